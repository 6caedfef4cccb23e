mod common;

use std::fs;

use common::{codec, tiny_data, tiny_model, tiny_train};
use deblur_core::checkpoint::Checkpoint;
use deblur_core::control::{Discriminator, KernelControlNet, KernelEstimator};
use deblur_core::dataset::Split;
use deblur_core::error::Error;
use deblur_core::graph::Graph;
use deblur_core::losses::discriminator_loss;
use deblur_core::nn::Bind;
use deblur_core::pipeline::Foundation;
use deblur_core::tensor::Tensor;
use deblur_core::train::*;
use rand::SeedableRng;

fn ctx<'a>(
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    data: &'a deblur_core::dataset::LoadedDataset,
    layout: &'a RunLayout,
) -> RunContext<'a> {
    RunContext { model, train, data, layout, config_hash: "test", resume: false, stop_after: None }
}

#[test]
fn stages_demand_their_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(&dir.path().join("d"), Split::Train, 2);
    let (model, train) = (tiny_model(), tiny_train(1));
    let layout = RunLayout::new(dir.path().join("run"));
    let c = ctx(&model, &train, &data, &layout);
    let err = run_stage(Stage::Control, &c, None).unwrap_err();
    assert!(matches!(err, Error::Prerequisite(_)) && err.to_string().contains("run stage 1 first"), "{err}");
    assert!(err.is_validation());
    run_stage(Stage::Foundation, &c, Some(codec())).unwrap();
    let err = run_stage(Stage::Control, &c, None).unwrap_err();
    assert!(err.to_string().contains("run stage 2 first"), "{err}");
    assert!(run_stage(Stage::Foundation, &c, None).is_err());
    assert!(load_trained(&RunLayout::new(dir.path().join("empty"))).is_err());
}

#[test]
fn interrupted_and_resumed_runs_match_uninterrupted_ones() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(&dir.path().join("d"), Split::Train, 3);
    let model = tiny_model();
    let mut train = tiny_train(4);
    train.weights.lambda2 = 0.1;
    train.gan_start = 1;
    let full = RunLayout::new(dir.path().join("full"));
    let split = RunLayout::new(dir.path().join("split"));
    for stage in [Stage::Foundation, Stage::Estimator, Stage::Control] {
        let rep = run_stage(stage, &ctx(&model, &train, &data, &full), Some(codec())).unwrap();
        assert_eq!(rep.steps_run, 4);
        let mut c = ctx(&model, &train, &data, &split);
        c.stop_after = Some(3);
        assert_eq!(run_stage(stage, &c, Some(codec())).unwrap().steps_run, 3);
        assert_eq!(Checkpoint::load(&split.checkpoint(stage)).unwrap().meta_u64("step"), Some(3));
        c.stop_after = None;
        c.resume = true;
        assert_eq!(run_stage(stage, &c, Some(codec())).unwrap().steps_run, 1);
        let a = fs::read(full.checkpoint(stage)).unwrap();
        let b = fs::read(split.checkpoint(stage)).unwrap();
        assert!(a == b, "stage {} checkpoints differ after resume", stage.number());
        let csv = fs::read_to_string(full.metrics(stage)).unwrap();
        assert_eq!(csv, fs::read_to_string(split.metrics(stage)).unwrap());
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
    }
    let gan_row = fs::read_to_string(full.metrics(Stage::Foundation)).unwrap();
    let cells: Vec<&str> = gan_row.lines().nth(1).unwrap().split(',').collect();
    assert!(cells[3].is_empty(), "GAN columns stay empty before gan_start");
    let cells: Vec<&str> = gan_row.lines().nth(2).unwrap().split(',').collect();
    assert!(!cells[3].is_empty() && !cells[4].is_empty());

    let mut other = train.clone();
    other.stage1.steps = 6;
    let mut c = ctx(&model, &other, &data, &split);
    c.resume = true;
    assert!(matches!(run_stage(Stage::Foundation, &c, Some(codec())), Err(Error::Checkpoint(_))));
}

#[test]
fn stage_three_leaves_the_foundation_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(&dir.path().join("d"), Split::Train, 2);
    let (model, train) = (tiny_model(), tiny_train(2));
    let layout = RunLayout::new(dir.path().join("run"));
    let c = ctx(&model, &train, &data, &layout);
    for stage in [Stage::Foundation, Stage::Estimator] {
        run_stage(stage, &c, Some(codec())).unwrap();
    }
    let before = fs::read(layout.checkpoint(Stage::Foundation)).unwrap();
    let rep = run_stage(Stage::Control, &c, None).unwrap();
    assert_eq!(before, fs::read(layout.checkpoint(Stage::Foundation)).unwrap());
    let csv = fs::read_to_string(rep.metrics_csv).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert!(row[5].parse::<f64>().is_ok() && row[6].parse::<f64>().is_ok(), "stage 3 logs reblur and time: {row:?}");

    let (f, net) = load_trained(&layout).unwrap();
    let net = net.expect("stage 3 checkpoint present");
    let mut other = f.clone();
    other.unet.config.res_blocks = 2;
    let other = Foundation::new(other.unet.config.clone(), codec(), other.schedule_config.clone(), 0).unwrap();
    let ck = net.to_checkpoint(&f);
    assert!(KernelControlNet::from_checkpoint(&ck, &other).is_err());
}

#[test]
fn fresh_control_reproduces_foundation_losses() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(&dir.path().join("d"), Split::Train, 2);
    let (model, train) = (tiny_model(), tiny_train(2));
    let mut f = Foundation::new(model.unet.clone(), codec(), model.schedule.clone(), 3).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    for pid in 0..f.unet.params.len() {
        let shape = f.unet.params.get(pid).shape().to_vec();
        f.unet.params.set(pid, Tensor::randn(&shape, 0.05, &mut rng));
    }
    let est = KernelEstimator::new(model.control.clone(), 9).unwrap();
    let net = KernelControlNet::new(model.control.clone(), &f.unet, 4, est, 10).unwrap();
    let mut rng = step_rng(1, Stage::Control, 0);
    let items = draw_batch(&data, 3, 0.0, true, &mut rng).unwrap();
    let ts: Vec<f64> = items.iter().map(|i| i.t as f64).collect();
    let (l1, ea) = foundation_image_losses(&f, &items, &ts).unwrap();
    let mut tr = ControlTrainer::new(f, net);
    let losses = tr.evaluate(&items, &ts, &train).unwrap();
    assert_eq!(losses.l1, Some(l1));
    assert_eq!(losses.ealpips, Some(ea));
    tr.step(&items, &ts, &train, 1e-3, 1).unwrap();
    tr.verify_frozen().unwrap();
    tr.foundation.unet.params.update(0, |w| w.data_mut()[0] += 1.0);
    assert!(matches!(tr.verify_frozen(), Err(Error::FrozenGradient(_))));
}

#[test]
fn discriminator_starts_at_two_log_two() {
    let model = tiny_model();
    let f = Foundation::new(model.unet, codec(), model.schedule, 1).unwrap();
    let d = Discriminator::new(&f.unet, 2);
    let g = Graph::new();
    let b = Bind::new(&g, &d.params, false);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let real = g.constant(Tensor::randn(&[2, 48, 4, 4], 1.0, &mut rng));
    let fake = g.constant(Tensor::randn(&[2, 48, 4, 4], 1.0, &mut rng));
    let loss = discriminator_loss(&g, d.forward(&b, real), d.forward(&b, fake));
    let v = g.value(loss).data()[0];
    assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12, "{v}");
}

#[test]
fn ablation_switch_trains_at_one_timestep() {
    let mut train = tiny_train(1);
    assert_eq!(train.train_t(80), 80.0);
    train.consistency = false;
    assert_eq!(train.train_t(80), 200.0);
    assert_eq!(train.train_t(280), 200.0);
}
