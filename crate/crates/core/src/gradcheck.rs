//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per tensor (all when the tensor is smaller).
    pub per_tensor: usize,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-6, per_tensor: 6, abs_floor: 1e-7, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, label: String, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = format!("{label}: analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

fn coords(len: usize, per: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= per {
        (0..len).collect()
    } else {
        sample(rng, len, per).into_vec()
    }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    let t = g.value(v);
    assert_eq!(t.numel(), 1, "gradcheck objective must be scalar");
    t.data()[0]
}

/// Checks gradients of `f` with respect to graph inputs.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[idx]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for c in coords(input.numel(), cfg.per_tensor, &mut rng) {
            let eval = |delta: f64| {
                let g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == idx {
                            t.data_mut()[c] += delta;
                        }
                        g.constant(t)
                    })
                    .collect();
                scalar(&g, f(&g, &vars))
            };
            let numeric = (eval(cfg.eps) - eval(-cfg.eps)) / (2.0 * cfg.eps);
            report.record(format!("input{idx}[{c}]"), analytic.data()[c], numeric, cfg.abs_floor);
        }
    }
    report
}

/// Checks gradients of `f` with respect to every tensor in `ps`.
pub fn check_params<F>(ps: &mut ParamStore, f: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&Graph, &ParamStore) -> Var,
{
    let analytic = {
        let g = Graph::new();
        let loss = f(&g, ps);
        g.backward(loss).for_store(ps)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for pid in 0..ps.len() {
        let name = ps.name(pid).to_string();
        let numel = ps.get(pid).numel();
        let grad = analytic[pid].clone().unwrap_or_else(|| Tensor::zeros(ps.get(pid).shape()));
        for c in coords(numel, cfg.per_tensor, &mut rng) {
            let orig = ps.get(pid).data()[c];
            let mut eval = |value: f64| {
                ps.update(pid, |t| t.data_mut()[c] = value);
                let g = Graph::new();

                scalar(&g, f(&g, ps))
            };
            let plus = eval(orig + cfg.eps);
            let minus = eval(orig - cfg.eps);
            ps.update(pid, |t| t.data_mut()[c] = orig);
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            report.record(format!("{name}[{c}]"), grad.data()[c], numeric, cfg.abs_floor);
        }
    }
    report
}
