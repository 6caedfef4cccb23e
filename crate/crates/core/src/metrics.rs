//! Full-reference image quality metrics.

use crate::error::{Error, Result};
use crate::image::ImageArray;

/// Reported in place of `+∞` for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(a: &ImageArray, b: &ImageArray) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("metric inputs differ in shape: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10·log10(1/MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn try_psnr(a: &ImageArray, b: &ImageArray) -> Result<f64> {
    check_same(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// [`try_psnr`] for inputs known to match in shape.
pub fn psnr(a: &ImageArray, b: &ImageArray) -> f64 {
    try_psnr(a, b).expect("psnr inputs share a shape")
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let mut w = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            w[i * size + j] = g[i] * g[j];
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Window side used for an `h×w` image: 11, shrunk to the largest odd size
/// that fits smaller images.
pub fn ssim_window_size(h: usize, w: usize) -> usize {
    let s = SSIM_WINDOW.min(h).min(w);
    if s.is_multiple_of(2) {
        s - 1
    } else {
        s
    }
}

/// Mean SSIM over valid window positions, averaged over channels.
pub fn try_ssim(a: &ImageArray, b: &ImageArray) -> Result<f64> {
    check_same(a, b)?;
    let (c, h, w) = a.dims();
    let ws = ssim_window_size(h, w);
    let win = gaussian_window(ws);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let (oh, ow) = (h - ws + 1, w - ws + 1);
    let mut total = 0.0;
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..ws {
                    for j in 0..ws {
                        let k = win[i * ws + j];
                        let (pa, pb) = (a.at(ch, y + i, x + j), b.at(ch, y + i, x + j));
                        ma += k * pa;
                        mb += k * pb;
                        saa += k * pa * pa;
                        sbb += k * pb * pb;
                        sab += k * pa * pb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

pub fn ssim(a: &ImageArray, b: &ImageArray) -> f64 {
    try_ssim(a, b).expect("ssim inputs share a shape")
}

/// Perceptual distance from the fixed edge-aware feature pyramid. A proxy:
/// not comparable with distances from pretrained perceptual networks.
pub fn try_lpips_proxy(a: &ImageArray, b: &ImageArray) -> Result<f64> {
    crate::losses::ea_lpips(a, b)
}

pub fn lpips_proxy(a: &ImageArray, b: &ImageArray) -> f64 {
    try_lpips_proxy(a, b).expect("lpips_proxy inputs share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::render_scene;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, h: usize, w: usize) -> ImageArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageArray::new(1, h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_anchors() {
        let x = render_scene(1, 16, 16, 3);
        assert_eq!(psnr(&x, &x), PSNR_CAP);
        let base = ImageArray::filled(3, 16, 16, 0.4);
        let off = ImageArray::filled(3, 16, 16, 0.5);
        assert!((psnr(&base, &off) - 20.0).abs() < 1e-9);
        assert!(try_psnr(&x, &ImageArray::filled(1, 16, 16, 0.0)).is_err());
    }

    #[test]
    fn ssim_identity_and_range() {
        let x = render_scene(2, 32, 32, 3);
        assert!((ssim(&x, &x) - 1.0).abs() < 1e-12);
        let y = render_scene(3, 32, 32, 3);
        let s = ssim(&x, &y);
        assert!((-1.0..1.0).contains(&s));
    }

    /// Direct formula evaluation over every valid window, using population
    /// statistics with explicit per-window Gaussian weights.
    fn ssim_oracle(a: &ImageArray, b: &ImageArray) -> f64 {
        let (h, w) = (a.height(), a.width());
        let ws = if h.min(w).min(11) % 2 == 0 { h.min(w).min(11) - 1 } else { h.min(w).min(11) };
        let r = (ws / 2) as f64;
        let mut vals = Vec::new();
        for y in 0..=h - ws {
            for x in 0..=w - ws {
                let mut wts = Vec::new();
                let mut pa = Vec::new();
                let mut pb = Vec::new();
                for i in 0..ws {
                    for j in 0..ws {
                        let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
                        wts.push((-d2 / 4.5).exp());
                        pa.push(a.at(0, y + i, x + j));
                        pb.push(b.at(0, y + i, x + j));
                    }
                }
                let z: f64 = wts.iter().sum();
                let mean = |v: &[f64]| v.iter().zip(&wts).map(|(p, q)| p * q).sum::<f64>() / z;
                let (mu_a, mu_b) = (mean(&pa), mean(&pb));
                let var_a = pa.iter().zip(&wts).map(|(p, q)| q * (p - mu_a).powi(2)).sum::<f64>() / z;
                let var_b = pb.iter().zip(&wts).map(|(p, q)| q * (p - mu_b).powi(2)).sum::<f64>() / z;
                let cov = pa.iter().zip(&pb).zip(&wts).map(|((p, s), q)| q * (p - mu_a) * (s - mu_b)).sum::<f64>() / z;
                let (c1, c2) = (0.0001, 0.0009);
                vals.push((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2) / ((mu_a.powi(2) + mu_b.powi(2) + c1) * (var_a + var_b + c2)));
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn metrics_match_brute_force_on_8x8() {
        for seed in 0..10 {
            let a = rand_img(seed, 8, 8);
            let b = rand_img(seed + 50, 8, 8);
            assert!((ssim(&a, &b) - ssim_oracle(&a, &b)).abs() < 1e-6);
            let mut se = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    se += (a.at(0, y, x) - b.at(0, y, x)).powi(2);
                }
            }
            let oracle_psnr = 10.0 * (64.0 / se).log10();
            assert!((psnr(&a, &b) - oracle_psnr).abs() < 1e-6);
        }
    }
}
