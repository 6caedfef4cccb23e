//! Parameters, layers and the optimizer.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Named, ordered collection of parameter tensors.
///
/// Cloning yields an independent store with a fresh identity, so gradients
/// recorded against the original never leak into the clone.
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new((**v).clone())).collect(),
        }
    }
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore").field("params", &self.len()).field("scalars", &self.num_scalars()).finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed), names: Vec::new(), values: Vec::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn name(&self, pid: usize) -> &str {
        &self.names[pid]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, pid: usize) -> &Tensor {
        &self.values[pid]
    }

    pub(crate) fn get_arc(&self, pid: usize) -> Arc<Tensor> {
        self.values[pid].clone()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn set(&mut self, pid: usize, value: Tensor) {
        assert_eq!(self.values[pid].shape(), value.shape(), "set: shape change for {}", self.names[pid]);
        self.values[pid] = Arc::new(value);
    }

    pub fn update(&mut self, pid: usize, f: impl FnOnce(&mut Tensor)) {
        f(Arc::make_mut(&mut self.values[pid]));
    }

    /// Copies every parameter of `src` whose name starts with `src_prefix`
    /// into the parameter of `self` named with `dst_prefix` instead.
    /// Returns the number of tensors copied.
    pub fn copy_prefixed(&mut self, src: &ParamStore, src_prefix: &str, dst_prefix: &str) -> usize {
        let mut copied = 0;
        for (name, value) in src.names.iter().zip(&src.values) {
            if let Some(rest) = name.strip_prefix(src_prefix) {
                let target = format!("{dst_prefix}{rest}");
                if let Some(pid) = self.find(&target) {
                    self.set(pid, (**value).clone());
                    copied += 1;
                }
            }
        }
        copied
    }

    /// SHA-256 over names, shapes and exact bit patterns.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }
}

/// Binds a parameter store into a graph for one forward pass.
pub struct Bind<'a> {
    pub g: &'a Graph,
    pub ps: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Bind<'a> {
    pub fn new(g: &'a Graph, ps: &'a ParamStore, trainable: bool) -> Self {
        Self { g, ps, trainable }
    }

    pub fn p(&self, pid: usize) -> Var {
        self.g.param(self.ps, pid, self.trainable)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Fan(f64),
    Zeros,
}

fn init_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::Fan(gain) => Tensor::randn(shape, gain / (fan_in as f64).sqrt(), rng),
        Init::Zeros => Tensor::zeros(shape),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), init_tensor(&[c_out, c_in, k, k], c_in * k * k, init, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { weight, bias, c_in, c_out, k, stride, pad: k / 2 }
    }

    /// Same-padded 3×3 convolution.
    pub fn k3<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self::new(ps, name, c_in, c_out, 3, 1, Init::Fan(1.0), rng)
    }

    pub fn forward(&self, b: &Bind, x: Var) -> Var {
        b.g.conv2d(x, b.p(self.weight), Some(b.p(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, f_in: usize, f_out: usize, init: Init, rng: &mut R) -> Self {
        let weight = ps.add(format!("{name}.weight"), init_tensor(&[f_out, f_in], f_in, init, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[f_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, b: &Bind, x: Var) -> Var {
        b.g.linear(x, b.p(self.weight), b.p(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: usize,
    pub beta: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let groups = groups.min(channels).max(1);
        let groups = (1..=groups).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1);
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, b: &Bind, x: Var) -> Var {
        b.g.group_norm(x, b.p(self.gamma), b.p(self.beta), self.groups, 1e-5)
    }
}

/// Rescales gradient lists in place so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut Vec<Option<Tensor>>], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().flat_map(|gs| gs.iter().flatten()).map(Tensor::sq_norm).sum::<f64>().sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for gs in grads.iter_mut() {
            for g in gs.iter_mut().flatten() {
                *g = g.scale(s);
            }
        }
    }
    total
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(ps: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = ps.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn apply(&mut self, ps: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), ps.len(), "gradient list does not match store");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (pid, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[pid], &mut self.v[pid]);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ps.update(pid, |p| {
                for (((pv, mv), vv), gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                    *mv = b1 * *mv + (1.0 - b1) * gv;
                    *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                    *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                }
            });
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clone_gets_fresh_identity_and_equal_hash() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::new();
        Conv2d::k3(&mut ps, "c", 2, 3, &mut rng);
        let cp = ps.clone();
        assert_ne!(ps.uid(), cp.uid());
        assert_eq!(ps.content_hash(), cp.content_hash());
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut ps = ParamStore::new();
        let pid = ps.add("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&ps);
        for _ in 0..2000 {
            let g = Graph::new();
            let x = g.param(&ps, pid, true);
            let loss = g.sum(g.square(x));
            let grads = g.backward(loss).for_store(&ps);
            opt.apply(&mut ps, &grads, 0.01);
        }
        assert!(ps.get(pid).data().iter().all(|v| v.abs() < 1e-2), "{:?}", ps.get(pid));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut a = vec![Some(Tensor::new(&[2], vec![3.0, 4.0]).unwrap())];
        let n = clip_grad_norm(&mut [&mut a], 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((a[0].as_ref().unwrap().sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }
}
