//! Training objectives: the edge-aware perceptual proxy, adversarial terms,
//! the reblur loss and the timestep regression loss.

use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::ImageArray;
use crate::tensor::Tensor;

/// Output channels of the fixed feature pyramid, finest first.
const PYRAMID_WIDTHS: [usize; 4] = [16, 24, 32, 48];
const PYRAMID_SEED: u64 = 0x5eed_1b15;
const SOBEL_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-8;

/// Fixed, randomly initialized conv pyramid applied to `[image, |∇image|]`.
/// Stands in for a pretrained perceptual network; the weights never train.
#[derive(Debug)]
pub struct EdgePerceptual {
    channels: usize,
    gray: Tensor,
    sobel: Tensor,
    layers: Vec<(Tensor, Tensor)>,
}

impl EdgePerceptual {
    pub fn new(channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PYRAMID_SEED ^ channels as u64);
        let gray = Tensor::full(&[1, channels, 1, 1], 1.0 / channels as f64);
        #[rustfmt::skip]
        let sobel = Tensor::new(&[2, 1, 3, 3], vec![
            -1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0,
            -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0,
        ]).expect("sobel shape");
        let mut c_in = channels + 1;
        let layers = PYRAMID_WIDTHS
            .iter()
            .map(|&c_out| {
                let w = Tensor::randn(&[c_out, c_in, 3, 3], (2.0 / (9 * c_in) as f64).sqrt(), &mut rng);
                let b = Tensor::randn(&[c_out], 0.05, &mut rng);
                c_in = c_out;
                (w, b)
            })
            .collect();
        Self { channels, gray, sobel, layers }
    }

    /// Shared instance per channel count.
    pub fn shared(channels: usize) -> Arc<Self> {
        static GRAY: OnceLock<Arc<EdgePerceptual>> = OnceLock::new();
        static RGB: OnceLock<Arc<EdgePerceptual>> = OnceLock::new();
        match channels {
            1 => GRAY.get_or_init(|| Arc::new(Self::new(1))).clone(),
            3 => RGB.get_or_init(|| Arc::new(Self::new(3))).clone(),
            c => Arc::new(Self::new(c)),
        }
    }

    /// Identifies the extractor weights in reports.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (w, b) in &self.layers {
            for v in w.data().iter().chain(b.data()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Sobel gradient magnitude of the channel-mean image, `(n, 1, h, w)`.
    pub fn edge_map(&self, g: &Graph, img: Var) -> Var {
        let gray = g.conv2d(img, g.constant(self.gray.clone()), None, 1, 0);
        let grads = g.square(g.conv2d(gray, g.constant(self.sobel.clone()), None, 1, 1));
        let ones = g.constant(Tensor::full(&[1, 2, 1, 1], 1.0));
        g.sqrt(g.add_scalar(g.conv2d(grads, ones, None, 1, 0), SOBEL_EPS))
    }

    fn features(&self, g: &Graph, img: Var) -> Vec<Var> {
        let mut h = g.concat(img, self.edge_map(g, img));
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let stride = if l == 0 { 1 } else { 2 };
            h = g.silu(g.conv2d(h, g.constant(w.clone()), Some(g.constant(b.clone())), stride, 1));
            out.push(g.channel_l2_normalize(h, NORM_EPS));
        }
        out
    }

    /// Sum over pyramid levels of the mean L1 distance between normalized
    /// features. Scalar var.
    pub fn distance_var(&self, g: &Graph, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (g.shape(a), g.shape(b));
        if sa != sb || sa.len() != 4 || sa[1] != self.channels {
            return Err(Error::Shape(format!("perceptual distance needs matching (N, {}, H, W), got {sa:?} and {sb:?}", self.channels)));
        }
        let (fa, fb) = (self.features(g, a), self.features(g, b));
        let mut total = g.l1_loss(fa[0], fb[0]);
        for (x, y) in fa.iter().zip(&fb).skip(1) {
            total = g.add(total, g.l1_loss(*x, *y));
        }
        Ok(total)
    }

    pub fn distance(&self, a: &ImageArray, b: &ImageArray) -> Result<f64> {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!("perceptual distance inputs differ: {:?} vs {:?}", a.dims(), b.dims())));
        }
        let g = Graph::new();
        let d = self.distance_var(&g, g.constant(a.to_tensor()), g.constant(b.to_tensor()))?;
        Ok(g.value(d).data()[0])
    }
}

/// Edge-aware perceptual distance between two images.
pub fn ea_lpips(pred: &ImageArray, target: &ImageArray) -> Result<f64> {
    EdgePerceptual::shared(pred.channels()).distance(pred, target)
}

/// Batched form over `(N, C, H, W)` vars.
pub fn ea_lpips_var(g: &Graph, pred: Var, target: Var) -> Result<Var> {
    let c = g.shape(pred).get(1).copied().unwrap_or(0);
    EdgePerceptual::shared(c).distance_var(g, pred, target)
}

/// Non-saturating generator loss `−E log D(fake)`.
pub fn generator_gan_loss(g: &Graph, fake_logits: Var) -> Var {
    g.bce_with_logits(fake_logits, 1.0)
}

/// `−E log D(real) − E log(1 − D(fake))`.
pub fn discriminator_loss(g: &Graph, real_logits: Var, fake_logits: Var) -> Var {
    g.add(g.bce_with_logits(real_logits, 1.0), g.bce_with_logits(fake_logits, 0.0))
}

/// `L1(field ∗ sharp, blur)`.
pub fn reblur_loss(g: &Graph, field: Var, sharp: Var, blur: Var, m: usize) -> Var {
    g.l1_loss(g.pixel_conv(field, sharp, m), blur)
}

/// `mean(((t − t̂)/scale)²)` with `t̂` of shape `(n, 1)`.
pub fn time_loss(g: &Graph, t_hat: Var, t_true: &[f64], scale: f64) -> Var {
    let target = g.constant(Tensor::new(&[t_true.len(), 1], t_true.to_vec()).expect("one t per row"));
    g.mean(g.square(g.scale(g.sub(t_hat, target), 1.0 / scale)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blur::{convolve_pixelwise, BlurKernelField};
    use crate::gradcheck::{check_inputs, GradCheckConfig};
    use crate::scenes::render_scene;

    #[test]
    fn identity_symmetry_and_positivity() {
        let x = render_scene(3, 32, 32, 3);
        let y = render_scene(4, 32, 32, 3);
        assert_eq!(ea_lpips(&x, &x).unwrap(), 0.0);
        let (dxy, dyx) = (ea_lpips(&x, &y).unwrap(), ea_lpips(&y, &x).unwrap());
        assert!((dxy - dyx).abs() < 1e-6);
        assert!(dxy > 0.0);
        let mut k = vec![0.0; 81];
        for j in 2..7 {
            k[4 * 9 + j] = 0.2;
        }
        let blurred = convolve_pixelwise(&x, &uniform_field(&k)).unwrap();
        assert!(ea_lpips(&blurred, &x).unwrap() > 0.0);
        assert!(ea_lpips(&x, &ImageArray::filled(3, 16, 16, 0.0)).is_err());
        assert_eq!(EdgePerceptual::shared(3).hash(), EdgePerceptual::new(3).hash());
    }

    fn uniform_field(k: &[f64]) -> BlurKernelField {
        BlurKernelField::uniform(32, 32, &crate::blur::BlurKernel { m: 9, weights: k.to_vec() })
    }

    #[test]
    fn edge_map_matches_direct_sobel() {
        let img = render_scene(5, 16, 16, 1);
        let p = EdgePerceptual::new(1);
        let g = Graph::new();
        let e = g.value(p.edge_map(&g, g.constant(img.to_tensor())));
        let px = |y: isize, x: isize| if y < 0 || x < 0 || y >= 16 || x >= 16 { 0.0 } else { img.at(0, y as usize, x as usize) };
        for y in 0..16isize {
            for x in 0..16isize {
                let gx =
                    px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1) - px(y - 1, x - 1) - 2.0 * px(y, x - 1) - px(y + 1, x - 1);
                let gy =
                    px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1) - px(y - 1, x - 1) - 2.0 * px(y - 1, x) - px(y - 1, x + 1);
                let want = (gx * gx + gy * gy + SOBEL_EPS).sqrt();
                assert!((e.data()[(y * 16 + x) as usize] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gan_terms_at_indifference() {
        let g = Graph::new();
        let zero = g.constant(Tensor::zeros(&[2, 1, 4, 4]));
        assert!((g.value(discriminator_loss(&g, zero, zero)).data()[0] - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g.value(generator_gan_loss(&g, zero)).data()[0] - 2f64.ln()).abs() < 1e-12);
        let t_hat = g.constant(Tensor::new(&[2, 1], vec![80.0, 200.0]).unwrap());
        assert_eq!(g.value(time_loss(&g, t_hat, &[80.0, 200.0], 280.0)).data()[0], 0.0);
    }

    #[test]
    fn loss_gradients() {
        let cfg = GradCheckConfig { per_tensor: 8, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::rand_uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let r = check_inputs(&[a.clone(), b.clone()], |g, v| ea_lpips_var(g, v[0], v[1]).unwrap(), &cfg);
        assert!(r.passes(1e-3), "ea_lpips {r:?}");

        let logits = [Tensor::randn(&[2, 1, 2, 2], 1.0, &mut rng), Tensor::randn(&[2, 1, 2, 2], 1.0, &mut rng)];
        let r = check_inputs(&logits, |g, v| g.add(discriminator_loss(g, v[0], v[1]), generator_gan_loss(g, v[1])), &cfg);
        assert!(r.passes(1e-3), "gan {r:?}");

        let field = Tensor::rand_uniform(&[2, 9, 16, 16], 0.0, 1.0, &mut rng);
        let blur = Tensor::rand_uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let r = check_inputs(&[field, a.clone()], |g, v| reblur_loss(g, v[0], v[1], g.constant(blur.clone()), 3), &cfg);
        assert!(r.passes(1e-3), "reblur {r:?}");

        let t_hat = Tensor::new(&[2, 1], vec![120.0, 30.0]).unwrap();
        let r = check_inputs(&[t_hat], |g, v| time_loss(g, v[0], &[80.0, 200.0], 280.0), &cfg);
        assert!(r.passes(1e-3), "time {r:?}");

        let l1 = check_inputs(&[a, b], |g, v| g.l1_loss(v[0], v[1]), &cfg);
        assert!(l1.passes(1e-3), "l1 {l1:?}");
    }
}
