//! Physical forward process: motion trajectories, blur kernels, per-pixel
//! convolution and frame-averaged blur synthesis.
//!
//! Kernels use correlation form: `out[y,x] = Σ k[i,j] · img[y+i−r, x+j−r]`
//! with `r = m/2` and reflect padding. A trajectory offset `(dx, dy)` means
//! the sub-frame samples the sharp image at `(x+dx, y+dy)`, so it splats into
//! kernel cell `(r+dy, r+dx)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageArray;
use crate::kernels;

const NORM_TOL: f64 = 1e-5;

/// Single `m×m` kernel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    pub m: usize,
    pub weights: Vec<f64>,
}

impl BlurKernel {
    pub fn identity(m: usize) -> Result<Self> {
        check_odd(m)?;
        let mut weights = vec![0.0; m * m];
        weights[(m / 2) * m + m / 2] = 1.0;
        Ok(Self { m, weights })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.m + j]
    }

    /// Cells carrying nonzero weight.
    pub fn support(&self) -> Vec<(usize, usize)> {
        (0..self.m * self.m).filter(|&k| self.weights[k] > 0.0).map(|k| (k / self.m, k % self.m)).collect()
    }

    pub fn center_weight(&self) -> f64 {
        self.at(self.m / 2, self.m / 2)
    }
}

fn check_odd(m: usize) -> Result<()> {
    if m.is_multiple_of(2) || m == 0 {
        return Err(Error::InvalidArgument(format!("kernel size must be odd and positive, got {m}")));
    }
    Ok(())
}

/// Per-pixel `m×m` kernels over an `H×W` grid, stored as `(m, m, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernelField {
    m: usize,
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl BlurKernelField {
    /// Validates shape, nonnegativity and per-pixel normalization.
    pub fn new(m: usize, height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        check_odd(m)?;
        if weights.len() != m * m * height * width {
            return Err(Error::Shape(format!(
                "kernel field ({m},{m},{height},{width}) needs {} weights, got {}",
                m * m * height * width,
                weights.len()
            )));
        }
        let field = Self { m, height, width, weights };
        if field.weights.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument("kernel weights must be finite and nonnegative".into()));
        }
        let worst = field.max_normalization_error();
        if worst > NORM_TOL {
            return Err(Error::InvalidArgument(format!("per-pixel kernels must sum to 1 (worst error {worst:e})")));
        }
        Ok(field)
    }

    pub fn uniform(height: usize, width: usize, kernel: &BlurKernel) -> Self {
        let m = kernel.m;
        let hw = height * width;
        let mut weights = vec![0.0; m * m * hw];
        for (k, &v) in kernel.weights.iter().enumerate() {
            weights[k * hw..(k + 1) * hw].iter_mut().for_each(|w| *w = v);
        }
        Self { m, height, width, weights }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn weight(&self, i: usize, j: usize, y: usize, x: usize) -> f64 {
        self.weights[((i * self.m + j) * self.height + y) * self.width + x]
    }

    pub fn kernel_at(&self, y: usize, x: usize) -> BlurKernel {
        let m = self.m;
        let weights = (0..m * m).map(|k| self.weights[(k * self.height + y) * self.width + x]).collect();
        BlurKernel { m, weights }
    }

    /// Kernel averaged over all pixels.
    pub fn mean_kernel(&self) -> BlurKernel {
        let hw = (self.height * self.width) as f64;
        let plane = self.height * self.width;
        let weights = (0..self.m * self.m).map(|k| self.weights[k * plane..(k + 1) * plane].iter().sum::<f64>() / hw).collect();
        BlurKernel { m: self.m, weights }
    }

    pub fn max_normalization_error(&self) -> f64 {
        let hw = self.height * self.width;
        (0..hw).map(|p| ((0..self.m * self.m).map(|k| self.weights[k * hw + p]).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Field whose every kernel is a centered delta.
pub fn identity_kernel_field(height: usize, width: usize, m: usize) -> Result<BlurKernelField> {
    check_odd(m)?;
    if m > height.min(width) {
        return Err(Error::InvalidArgument(format!("kernel size {m} exceeds image {height}x{width}")));
    }
    Ok(BlurKernelField::uniform(height, width, &BlurKernel::identity(m)?))
}

/// Ordered sub-pixel camera offsets, one per simulated sub-frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionTrajectory {
    points: Vec<(f64, f64)>,
    max_step: f64,
}

/// Parameters of the random trajectory generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryParams {
    /// Initial speed range in px per sub-frame.
    pub speed: (f64, f64),
    /// Std of the per-step velocity perturbation (px per sub-frame).
    pub impulse: f64,
    /// Hard bound on any single step.
    pub max_step: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self { speed: (0.4, 0.5), impulse: 0.05, max_step: 0.5 }
    }
}

impl MotionTrajectory {
    pub fn new(points: Vec<(f64, f64)>, max_step: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("trajectory needs at least one point".into()));
        }
        if points[0] != (0.0, 0.0) {
            return Err(Error::InvalidArgument(format!("trajectory must start at (0,0), got {:?}", points[0])));
        }
        for (k, w) in points.windows(2).enumerate() {
            let step = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
            if step > max_step + 1e-12 {
                return Err(Error::InvalidArgument(format!("step {k}->{} has length {step:.4} > max_step {max_step}", k + 1)));
            }
        }
        Ok(Self { points, max_step })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Random trajectory of `n_points` sub-frames with momentum.
    pub fn generate<R: Rng + ?Sized>(n_points: usize, params: &TrajectoryParams, rng: &mut R) -> Result<Self> {
        if n_points == 0 {
            return Err(Error::InvalidArgument("n_points must be >= 1".into()));
        }
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let speed = if params.speed.1 > params.speed.0 { rng.random_range(params.speed.0..params.speed.1) } else { params.speed.0 };
        let (mut vx, mut vy) = (speed * theta.cos(), speed * theta.sin());
        let mut p = (0.0, 0.0);
        let mut points = vec![p];
        for _ in 1..n_points {
            let (nx, ny): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
            vx += params.impulse * nx;
            vy += params.impulse * ny;
            let len = (vx * vx + vy * vy).sqrt();
            if len > params.max_step {
                vx *= params.max_step / len;
                vy *= params.max_step / len;
            }
            p = (p.0 + vx, p.1 + vy);
            points.push(p);
        }
        Self::new(points, params.max_step)
    }

    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.points.len() {
            return Err(Error::InvalidArgument(format!("prefix length {n} of {}", self.points.len())));
        }
        Ok(Self { points: self.points[..n].to_vec(), max_step: self.max_step })
    }

    /// Offsets of the `n` sub-frames centered on the middle of the full
    /// trajectory, relative to that middle point.
    pub fn centered_window(&self, n: usize) -> Result<Vec<(f64, f64)>> {
        check_odd(n)?;
        let len = self.points.len();
        if n > len {
            return Err(Error::InvalidArgument(format!("window of {n} frames exceeds trajectory of {len}")));
        }
        let mid = (len - 1) / 2;
        let half = (n - 1) / 2;
        let origin = self.points[mid];
        Ok(self.points[mid - half..=mid + half].iter().map(|&(x, y)| (x - origin.0, y - origin.1)).collect())
    }
}

/// Bilinear splat of offsets into an `m×m` kernel whose center is `(0,0)`,
/// then normalization.
pub fn rasterize_offsets(points: &[(f64, f64)], m: usize) -> Result<BlurKernel> {
    check_odd(m)?;
    if points.is_empty() {
        return Err(Error::InvalidArgument("cannot rasterize an empty trajectory".into()));
    }
    let r = (m / 2) as f64;
    let mut weights = vec![0.0; m * m];
    for (idx, &(dx, dy)) in points.iter().enumerate() {
        let (py, px) = (r + dy, r + dx);
        let (y0, x0) = (py.floor(), px.floor());
        let (ty, tx) = (py - y0, px - x0);
        for (a, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
            for (b, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
                let wgt = wy * wx;
                if wgt == 0.0 {
                    continue;
                }
                let (cy, cx) = (y0 + a, x0 + b);
                if cy < 0.0 || cx < 0.0 || cy >= m as f64 || cx >= m as f64 {
                    return Err(Error::OutOfBounds(format!(
                        "trajectory point {idx} at ({dx:.3}, {dy:.3}) falls outside the {m}x{m} kernel window"
                    )));
                }
                weights[cy as usize * m + cx as usize] += wgt;
            }
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(BlurKernel { m, weights })
}

/// Kernel of a trajectory anchored at its first point `(0,0)`.
pub fn rasterize_trajectory(traj: &MotionTrajectory, m: usize) -> Result<BlurKernel> {
    rasterize_offsets(traj.points(), m)
}

/// Spatially varying correlation with reflect boundary, output clamped to `[0,1]`.
pub fn convolve_pixelwise(img: &ImageArray, field: &BlurKernelField) -> Result<ImageArray> {
    Ok(convolve_pixelwise_unclamped(img, field)?.clamp01())
}

/// [`convolve_pixelwise`] without the final clamp (linear in `img`).
pub fn convolve_pixelwise_unclamped(img: &ImageArray, field: &BlurKernelField) -> Result<ImageArray> {
    let (c, h, w) = img.dims();
    if (field.height, field.width) != (h, w) {
        return Err(Error::Shape(format!("kernel field is {}x{} but image is {h}x{w}", field.height, field.width)));
    }
    let out = kernels::pixel_conv_forward(&field.weights, img.data(), 1, c, h, w, field.m);
    ImageArray::new(c, h, w, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveNoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl AdditiveNoiseSpec {
    pub const DEFAULT_SIGMA: f64 = 0.005;

    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(0.0..0.1).contains(&sigma) {
            return Err(Error::InvalidArgument(format!("noise sigma must lie in [0, 0.1), got {sigma}")));
        }
        Ok(Self { sigma, seed })
    }

    pub fn none() -> Self {
        Self { sigma: 0.0, seed: 0 }
    }

    /// Adds i.i.d. Gaussian noise (no clamping).
    pub fn apply(&self, img: &ImageArray) -> ImageArray {
        let mut out = img.clone();
        if self.sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            for v in out.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += self.sigma * z;
            }
        }
        out
    }
}

/// Mean of the middle `n` of an odd-length sub-frame sequence.
pub fn centered_average(subframes: &[ImageArray], n: usize) -> Result<ImageArray> {
    check_odd(n)?;
    let len = subframes.len();
    if len.is_multiple_of(2) || n > len {
        return Err(Error::InvalidArgument(format!("cannot take centered {n}-average of {len} sub-frames")));
    }
    let mid = (len - 1) / 2;
    let half = (n - 1) / 2;
    let window = &subframes[mid - half..=mid + half];
    let mut acc = window[0].clone();
    for f in &window[1..] {
        acc.data_mut().iter_mut().zip(f.data()).for_each(|(a, b)| *a += b);
    }
    acc.data_mut().iter_mut().for_each(|v| *v /= n as f64);
    Ok(acc)
}

/// Warps `sharp` by the first `n_frames` trajectory offsets (re-anchored so
/// the middle one is `(0,0)`), averages them and adds noise. Returns the
/// clamped blur and the sub-frames, the middle of which equals `sharp`.
pub fn synthesize_frame_average(
    sharp: &ImageArray,
    traj: &MotionTrajectory,
    n_frames: usize,
    noise: &AdditiveNoiseSpec,
) -> Result<(ImageArray, Vec<ImageArray>)> {
    if n_frames.is_multiple_of(2) || n_frames == 0 {
        return Err(Error::InvalidArgument(format!("n_frames must be odd, got {n_frames}")));
    }
    if traj.len() < n_frames {
        return Err(Error::InvalidArgument(format!("trajectory has {} points, need at least {n_frames}", traj.len())));
    }
    let prefix = traj.prefix(n_frames)?;
    let offsets = prefix.centered_window(n_frames)?;
    let subframes: Vec<ImageArray> = offsets.iter().map(|&(dx, dy)| sharp.translate(dx, dy)).collect();
    let avg = centered_average(&subframes, n_frames)?;
    Ok((noise.apply(&avg).clamp01(), subframes))
}

/// Bilinear (corner-aligned) interpolation of a `gh×gw` grid of control
/// kernels over an `H×W` image. A `1×1` grid yields a uniform field.
pub fn interpolate_kernel_grid(controls: &[BlurKernel], gh: usize, gw: usize, height: usize, width: usize) -> Result<BlurKernelField> {
    if controls.len() != gh * gw || controls.is_empty() {
        return Err(Error::InvalidArgument(format!("expected {} control kernels, got {}", gh * gw, controls.len())));
    }
    let m = controls[0].m;
    if controls.iter().any(|k| k.m != m) {
        return Err(Error::InvalidArgument("control kernels differ in size".into()));
    }
    let hw = height * width;
    let mut weights = vec![0.0; m * m * hw];
    let coord = |p: usize, len: usize, cells: usize| -> (usize, usize, f64) {
        if cells == 1 || len == 1 {
            return (0, 0, 0.0);
        }
        let f = p as f64 * (cells - 1) as f64 / (len - 1) as f64;
        let i0 = (f.floor() as usize).min(cells - 2);
        (i0, i0 + 1, f - i0 as f64)
    };
    for y in 0..height {
        let (gy0, gy1, ty) = coord(y, height, gh);
        for x in 0..width {
            let (gx0, gx1, tx) = coord(x, width, gw);
            let taps = [(gy0, gx0, (1.0 - ty) * (1.0 - tx)), (gy0, gx1, (1.0 - ty) * tx), (gy1, gx0, ty * (1.0 - tx)), (gy1, gx1, ty * tx)];
            for (cy, cx, wgt) in taps {
                if wgt == 0.0 {
                    continue;
                }
                let ker = &controls[cy * gw + cx];
                for k in 0..m * m {
                    weights[k * hw + y * width + x] += wgt * ker.weights[k];
                }
            }
        }
    }
    BlurKernelField::new(m, height, width, weights)
}

/// Control-grid resolution for a smoothness value: 4 cells per side at 0,
/// shrinking to a single (uniform) control point as smoothness grows.
pub fn control_grid_size(smoothness: f64) -> usize {
    if smoothness.is_infinite() {
        return 1;
    }
    ((4.0 / (1.0 + smoothness)).ceil() as usize).clamp(1, 4)
}

/// Spatially smooth random field: one random trajectory of `n_points` per
/// control point, rasterized over its centered window and interpolated.
pub fn sample_kernel_field(
    height: usize,
    width: usize,
    params: &TrajectoryParams,
    n_points: usize,
    m: usize,
    smoothness: f64,
    seed: u64,
) -> Result<BlurKernelField> {
    let n = if n_points.is_multiple_of(2) { n_points + 1 } else { n_points };
    Ok(kernel_field_family(height, width, params, &[n], m, smoothness, seed)?.remove(0))
}

/// Fields for several odd sub-frame counts sharing one set of control
/// trajectories (sized for the largest count), so that every field is a
/// centered window of the same physical motion.
pub fn kernel_field_family(
    height: usize,
    width: usize,
    params: &TrajectoryParams,
    frame_counts: &[usize],
    m: usize,
    smoothness: f64,
    seed: u64,
) -> Result<Vec<BlurKernelField>> {
    if smoothness.is_nan() || smoothness < 0.0 {
        return Err(Error::InvalidArgument(format!("smoothness must be >= 0, got {smoothness}")));
    }
    let longest = frame_counts.iter().copied().max().ok_or_else(|| Error::InvalidArgument("no frame counts".into()))?;
    check_odd(longest)?;
    let g = control_grid_size(smoothness);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectories = (0..g * g).map(|_| MotionTrajectory::generate(longest, params, &mut rng)).collect::<Result<Vec<_>>>()?;
    frame_counts
        .iter()
        .map(|&n| {
            let controls = trajectories.iter().map(|t| rasterize_offsets(&t.centered_window(n)?, m)).collect::<Result<Vec<_>>>()?;
            interpolate_kernel_grid(&controls, g, g, height, width)
        })
        .collect()
}
