mod common;

use common::{codec, tiny_data, tiny_model};
use deblur_core::control::KernelControlNet;
use deblur_core::control::KernelEstimator;
use deblur_core::dataset::Split;
use deblur_core::error::Error;
use deblur_core::image::ImageArray;
use deblur_core::metrics::psnr;
use deblur_core::pipeline::Foundation;
use deblur_core::runtime::*;
use deblur_core::scenes::render_scene;
use deblur_core::tensor::Tensor;
use rand::SeedableRng;

fn trained_like(seed: u64) -> Deblurrer {
    let model = tiny_model();
    let mut f = Foundation::new(model.unet.clone(), codec(), model.schedule.clone(), seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for pid in 0..f.unet.params.len() {
        let shape = f.unet.params.get(pid).shape().to_vec();
        f.unet.params.update(pid, |w| *w = w.zip_map(&Tensor::randn(&shape, 0.02, &mut rng), |a, b| a + b));
    }
    let est = KernelEstimator::new(model.control.clone(), seed + 1).unwrap();
    let net = KernelControlNet::new(model.control, &f.unet, 4, est, seed + 2).unwrap();
    Deblurrer::new(f, Some(net))
}

#[test]
fn evaluation_is_deterministic_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), Split::Test, 3);
    let d = trained_like(1);
    for t_mode in [TMode::Fixed(200.0), TMode::Predicted] {
        let cfg = InferenceConfig { t_mode, batch_size: 2, ..Default::default() };
        let a = evaluate(&d, &cfg, &data).unwrap().to_csv();
        let b = evaluate(&d, &InferenceConfig { batch_size: 5, ..cfg.clone() }, &data).unwrap().to_csv();
        assert_eq!(a, b, "batching must not change results");
        let lines: Vec<&str> = a.lines().collect();
        assert!(lines[0].starts_with("# ") && lines[0].contains("lpips_proxy=") && lines[0].contains(&format!("t_mode={t_mode}")));
        assert_eq!(lines[1], REPORT_HEADER);
        let points = evaluation_items(&data).len();
        assert_eq!(lines.len(), 2 + points + 2);
        assert!(lines[lines.len() - 2].starts_with("mean,") && lines[lines.len() - 1].starts_with("blurry_input,"));
        let ids: Vec<&str> = lines[2..2 + points].iter().map(|l| l.split(',').next().unwrap()).collect();
        let key = |id: &&str| {
            let (s, t) = id.split_once("/t").unwrap();
            (s.to_string(), t.parse::<usize>().unwrap())
        };
        assert!(ids.windows(2).all(|w| key(&w[0]) < key(&w[1])), "rows ordered by sample then t: {ids:?}");
    }
}

#[test]
fn predicted_timesteps_are_continuous_and_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), Split::Test, 2);
    let d = trained_like(2);
    let items = evaluation_items(&data);
    let out = d.restore_items(&InferenceConfig { t_mode: TMode::Predicted, ..Default::default() }, &items).unwrap();
    for r in &out {
        assert!(r.t_used > 0.0 && r.t_used < 280.0, "{}", r.t_used);
        assert!(r.field.is_some());
    }
    let fixed = d.restore_items(&InferenceConfig { t_mode: TMode::Fixed(120.0), ..Default::default() }, &items).unwrap();
    assert!(fixed.iter().all(|r| r.t_used == 120.0));
}

#[test]
fn resize_trick_keeps_dimensions() {
    let d = trained_like(3);
    let img = render_scene(4, 16, 16, 3);
    let cfg = InferenceConfig { resize_trick: true, ..Default::default() };
    let r = d.deblur_one_step(&cfg, &img).unwrap();
    assert_eq!(r.image.dims(), img.dims());
    let plain = d.deblur_one_step(&InferenceConfig::default(), &img).unwrap();
    assert_ne!(r.image, plain.image);
}

#[test]
fn fresh_models_return_their_input() {
    let model = tiny_model();
    let f = Foundation::new(model.unet.clone(), codec(), model.schedule.clone(), 0).unwrap();
    let img = render_scene(9, 16, 16, 3).quantize8();
    let d = Deblurrer::new(f, None);
    for t in [1.0, 80.0, 280.0] {
        let r = d.deblur_one_step(&InferenceConfig { t_mode: TMode::Fixed(t), ..Default::default() }, &img).unwrap();
        assert!(psnr(&r.image, &img) > 60.0, "t={t}");
    }
}

#[test]
fn invalid_requests_are_rejected() {
    let d = trained_like(4);
    let img = render_scene(1, 16, 16, 3);
    let bad_t = InferenceConfig { t_mode: TMode::Fixed(300.0), ..Default::default() };
    assert!(matches!(d.deblur_one_step(&bad_t, &img), Err(Error::InvalidArgument(_))));
    let odd = ImageArray::filled(3, 12, 12, 0.5);
    assert!(matches!(d.deblur_one_step(&InferenceConfig::default(), &odd), Err(Error::Shape(_))));
    let gray = ImageArray::filled(1, 16, 16, 0.5);
    assert!(matches!(d.deblur_one_step(&InferenceConfig::default(), &gray), Err(Error::Shape(_))));
    let no_control = Deblurrer::new(d.foundation.clone(), None);
    let pred = InferenceConfig { t_mode: TMode::Predicted, ..Default::default() };
    let err = no_control.deblur_one_step(&pred, &img).unwrap_err();
    assert!(err.to_string().contains("run stage 3 first"));
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), Split::Test, 2);
    assert!(timestep_sweep(&d, &InferenceConfig::default(), &data, &[]).is_err());
    assert!("fixed:abc".parse::<TMode>().is_err() && "sometimes".parse::<TMode>().is_err());
    assert_eq!("fixed:200".parse::<TMode>().unwrap(), TMode::Fixed(200.0));
}

#[test]
fn sweep_and_spread() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), Split::Test, 2);
    let d = trained_like(5);
    let rows = timestep_sweep(&d, &InferenceConfig::default(), &data, &[80.0, 200.0, 280.0]).unwrap();
    assert_eq!(rows.iter().map(|r| r.t).collect::<Vec<_>>(), vec![80.0, 200.0, 280.0]);
    let csv = sweep_csv(&rows, "k=v");
    assert_eq!(csv.lines().nth(1), Some(SWEEP_HEADER));
    assert_eq!(csv.lines().count(), 5);
    let drop = relative_psnr_drop(&rows);
    assert!((0.0..1.0).contains(&drop));
    let own = cross_timestep_spread(&d, &data, PointTimestep::Own, false).unwrap();
    let shared = cross_timestep_spread(&d, &data, PointTimestep::Shared(200.0), false).unwrap();
    assert!(own > 0.0 && shared > 0.0);
    let fresh = Deblurrer::new(Foundation::new(tiny_model().unet, codec(), Default::default(), 0).unwrap(), None);
    let blurry_spread = cross_timestep_spread(&fresh, &data, PointTimestep::Own, false).unwrap();
    assert!(blurry_spread > 0.01, "identity model keeps the blur differences: {blurry_spread}");
}
