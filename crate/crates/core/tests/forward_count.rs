mod common;

use common::{codec, tiny_data, tiny_model};
use deblur_core::control::{KernelControlNet, KernelEstimator};
use deblur_core::dataset::Split;
use deblur_core::pipeline::Foundation;
use deblur_core::runtime::*;
use deblur_core::unet::forward_pass_count;

#[test]
fn one_denoiser_forward_per_image_in_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), Split::Test, 3);
    let model = tiny_model();
    let f = Foundation::new(model.unet.clone(), codec(), model.schedule.clone(), 0).unwrap();
    let est = KernelEstimator::new(model.control.clone(), 1).unwrap();
    let net = KernelControlNet::new(model.control, &f.unet, 4, est, 2).unwrap();
    let d = Deblurrer::new(f, Some(net));
    let n = evaluation_items(&data).len();
    for cfg in [
        InferenceConfig::default(),
        InferenceConfig { t_mode: TMode::Predicted, ..Default::default() },
        InferenceConfig { use_control: false, batch_size: 3, ..Default::default() },
        InferenceConfig { resize_trick: true, ..Default::default() },
    ] {
        let before = forward_pass_count();
        evaluate(&d, &cfg, &data).unwrap();
        assert_eq!(forward_pass_count() - before, n, "{cfg:?}");
    }
    let before = forward_pass_count();
    timestep_sweep(&d, &InferenceConfig::default(), &data, &[80.0, 200.0]).unwrap();
    assert_eq!(forward_pass_count() - before, 2 * n);
}
