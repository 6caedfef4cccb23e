//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Nodes that
//! do not depend on a trainable leaf store no backward closure, so inference
//! through a graph costs only the forward arithmetic.

use std::cell::RefCell;
use std::sync::Arc;

use crate::kernels::{self, ConvGeom};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Back<'a> {
    grad: &'a Tensor,
    inputs: Vec<&'a Tensor>,
    output: &'a Tensor,
    needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&Back) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    source: Option<(u64, usize)>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    node_grads: Vec<Option<Tensor>>,
    sources: Vec<(usize, u64, usize)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.node_grads[v.0].as_ref()
    }

    /// Per-parameter gradients for `store`, summed over every leaf that
    /// referenced the parameter. `None` where no gradient reached it.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; store.len()];
        for &(node, uid, pid) in &self.sources {
            if uid != store.uid() {
                continue;
            }
            if let Some(g) = &self.node_grads[node] {
                match &mut out[pid] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn sum_spatial(g: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = g.dims4();
    let hw = h * w;
    (0..n * c).map(|i| g.data()[i * hw..(i + 1) * hw].iter().sum()).collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push_leaf(&self, value: Arc<Tensor>, requires_grad: bool, source: Option<(u64, usize)>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad, source });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), false, None)
    }

    /// A leaf whose gradient is tracked (for input-gradient checks).
    pub fn input(&self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), true, None)
    }

    /// Leaf bound to parameter `pid` of `store`. Frozen leaves never carry gradient.
    pub fn param(&self, store: &ParamStore, pid: usize, trainable: bool) -> Var {
        self.push_leaf(store.get_arc(pid), trainable, Some((store.uid(), pid)))
    }

    /// Copy of `v` cut from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push_leaf(value, false, None)
    }

    fn push_op<F>(&self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Back) -> Vec<Option<Tensor>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
            source: None,
        });
        Var(nodes.len() - 1)
    }

    /// Reverse pass from a scalar (single-element) node.
    pub fn backward(&self, loss: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let back = Back {
                grad: &grad,
                inputs: node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let pgrads = bw(&back);
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            if node.parents.is_empty() || node.source.is_some() {
                grads[i] = Some(grad);
            }
        }
        let sources = nodes.iter().enumerate().filter_map(|(i, n)| n.source.map(|(u, p)| (i, u, p))).collect();
        Grads { node_grads: grads, sources }
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = va.zip_map(&vb, |x, y| x + y);
        self.push_op(out, &[a, b], |bk| vec![Some(bk.grad.clone()), Some(bk.grad.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = va.zip_map(&vb, |x, y| x - y);
        self.push_op(out, &[a, b], |bk| vec![Some(bk.grad.clone()), Some(bk.grad.scale(-1.0))])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = va.zip_map(&vb, |x, y| x * y);
        self.push_op(out, &[a, b], |bk| {
            vec![
                bk.needs[0].then(|| bk.grad.zip_map(bk.inputs[1], |g, y| g * y)),
                bk.needs[1].then(|| bk.grad.zip_map(bk.inputs[0], |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push_op(out, &[a], move |bk| vec![Some(bk.grad.scale(s))])
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push_op(out, &[a], |bk| vec![Some(bk.grad.clone())])
    }

    pub fn square(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push_op(out, &[a], |bk| vec![Some(bk.grad.zip_map(bk.inputs[0], |g, x| 2.0 * g * x))])
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push_op(out, &[a], |bk| vec![Some(bk.grad.zip_map(bk.output, |g, y| g / (2.0 * y)))])
    }

    pub fn silu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        self.push_op(out, &[a], |bk| {
            vec![Some(bk.grad.zip_map(bk.inputs[0], |g, x| {
                let s = 1.0 / (1.0 + (-x).exp());
                g * s * (1.0 + x * (1.0 - s))
            }))]
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push_op(out, &[a], |bk| vec![Some(bk.grad.zip_map(bk.output, |g, y| g * y * (1.0 - y)))])
    }

    // ----- shape ----------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let in_shape = va.shape().to_vec();
        let out = (*va).clone().reshape(shape).expect("reshape");
        self.push_op(out, &[a], move |bk| vec![Some(bk.grad.clone().reshape(&in_shape).unwrap())])
    }

    /// Concatenates along axis 1 (channels for NCHW, features for NF).
    pub fn concat(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sa.len() == sb.len() && sa[0] == sb[0] && sa[2..] == sb[2..], "concat mismatch {sa:?} vs {sb:?}");
        let n = sa[0];
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for i in 0..n {
            data.extend_from_slice(&va.data()[i * ca * inner..(i + 1) * ca * inner]);
            data.extend_from_slice(&vb.data()[i * cb * inner..(i + 1) * cb * inner]);
        }
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let out = Tensor::new(&shape, data).unwrap();
        let (shape_a, shape_b) = (sa.to_vec(), sb.to_vec());
        self.push_op(out, &[a, b], move |bk| {
            let g = bk.grad.data();
            let mut ga = Vec::with_capacity(n * ca * inner);
            let mut gb = Vec::with_capacity(n * cb * inner);
            for i in 0..n {
                let base = i * (ca + cb) * inner;
                ga.extend_from_slice(&g[base..base + ca * inner]);
                gb.extend_from_slice(&g[base + ca * inner..base + (ca + cb) * inner]);
            }
            vec![Some(Tensor::new(&shape_a, ga).unwrap()), Some(Tensor::new(&shape_b, gb).unwrap())]
        })
    }

    // ----- dense / conv ---------------------------------------------------

    /// `x: (n, f_in)`, `w: (f_out, f_in)`, `b: (f_out)` → `(n, f_out)`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (n, fi) = (vx.shape()[0], vx.shape()[1]);
        let fo = vw.shape()[0];
        assert_eq!(vw.shape()[1], fi, "linear input width mismatch");
        let mut y = vec![0.0; n * fo];
        kernels::gemm(n, fi, fo, vx.data(), false, vw.data(), true, 0.0, &mut y);
        for row in y.chunks_mut(fo) {
            row.iter_mut().zip(vb.data()).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::new(&[n, fo], y).unwrap();
        self.push_op(out, &[x, w, b], move |bk| {
            let g = bk.grad.data();
            let dx = bk.needs[0].then(|| {
                let mut dx = vec![0.0; n * fi];
                kernels::gemm(n, fo, fi, g, false, bk.inputs[1].data(), false, 0.0, &mut dx);
                Tensor::new(&[n, fi], dx).unwrap()
            });
            let dw = bk.needs[1].then(|| {
                let mut dw = vec![0.0; fo * fi];
                kernels::gemm(fo, n, fi, g, true, bk.inputs[0].data(), false, 0.0, &mut dw);
                Tensor::new(&[fo, fi], dw).unwrap()
            });
            let db = bk.needs[2].then(|| {
                let mut db = vec![0.0; fo];
                for row in g.chunks(fo) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                Tensor::new(&[fo], db).unwrap()
            });
            vec![dx, dw, db]
        })
    }

    /// Cross-correlation with zero padding. `w: (c_out, c_in, k, k)`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, c, h, wd) = vx.dims4();
        let ws = vw.shape();
        assert_eq!(ws[1], c, "conv2d: weight expects {} input channels, got {c}", ws[1]);
        let (c_out, k) = (ws[0], ws[2]);
        let geom = ConvGeom { c_in: c, h, w: wd, k, stride, pad };
        let (ho, wo) = geom.out_hw();
        let bias = b.map(|b| self.value(b));
        let y = kernels::conv2d_forward(vx.data(), n, geom, vw.data(), bias.as_deref().map(|t| t.data()), c_out);
        let out = Tensor::new(&[n, c_out, ho, wo], y).unwrap();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op(out, &parents, move |bk| {
            let grads = kernels::conv2d_backward(bk.inputs[0].data(), n, geom, bk.inputs[1].data(), c_out, bk.grad.data(), bk.needs[0]);
            let mut res = vec![
                grads.dx.map(|d| Tensor::new(&[n, c, h, wd], d).unwrap()),
                bk.needs[1].then(|| Tensor::new(&[c_out, c, k, k], grads.dw).unwrap()),
            ];
            if bk.inputs.len() == 3 {
                res.push(Some(Tensor::new(&[c_out], grads.db).unwrap()));
            }
            res
        })
    }

    /// Adds a per-(batch, channel) vector `v: (n, c)` to `x: (n, c, h, w)`.
    pub fn add_channel(&self, x: Var, v: Var) -> Var {
        let (vx, vv) = (self.value(x), self.value(v));
        let (n, c, h, w) = vx.dims4();
        assert_eq!(vv.shape(), &[n, c], "add_channel: vector shape mismatch");
        let hw = h * w;
        let mut out = (*vx).clone();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let b = vv.data()[i];
            plane.iter_mut().for_each(|p| *p += b);
        }
        self.push_op(out, &[x, v], move |bk| {
            vec![Some(bk.grad.clone()), bk.needs[1].then(|| Tensor::new(&[n, c], sum_spatial(bk.grad)).unwrap())]
        })
    }

    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let (n, c, h, w) = vx.dims4();
        assert_eq!(c % groups, 0, "group_norm: {c} channels not divisible by {groups} groups");
        let cg = c / groups;
        let hw = h * w;
        let gsize = cg * hw;
        let mut out = vec![0.0; vx.numel()];
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; n * groups];
        for b in 0..n {
            for gi in 0..groups {
                let start = (b * c + gi * cg) * hw;
                let seg = &vx.data()[start..start + gsize];
                let mean = seg.iter().sum::<f64>() / gsize as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[b * groups + gi] = is;
                for (k, &v) in seg.iter().enumerate() {
                    let ch = gi * cg + k / hw;
                    let xh = (v - mean) * is;
                    xhat[start + k] = xh;
                    out[start + k] = xh * vg.data()[ch] + vb.data()[ch];
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out).unwrap();
        self.push_op(out, &[x, gamma, beta], move |bk| {
            let g = bk.grad.data();
            let gam = bk.inputs[1].data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; g.len()];
            for b in 0..n {
                for gi in 0..groups {
                    let start = (b * c + gi * cg) * hw;
                    let is = inv_std[b * groups + gi];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for k in 0..gsize {
                        let ch = gi * cg + k / hw;
                        let gv = g[start + k];
                        let xh = xhat[start + k];
                        dgamma[ch] += gv * xh;
                        dbeta[ch] += gv;
                        let d = gv * gam[ch];
                        mean_d += d;
                        mean_dx += d * xh;
                    }
                    mean_d /= gsize as f64;
                    mean_dx /= gsize as f64;
                    for k in 0..gsize {
                        let ch = gi * cg + k / hw;
                        let d = g[start + k] * gam[ch];
                        dx[start + k] = is * (d - mean_d - xhat[start + k] * mean_dx);
                    }
                }
            }
            vec![
                Some(Tensor::new(&[n, c, h, w], dx).unwrap()),
                Some(Tensor::new(&[c], dgamma).unwrap()),
                Some(Tensor::new(&[c], dbeta).unwrap()),
            ]
        })
    }

    // ----- resampling / pooling -----------------------------------------

    pub fn upsample2x(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(p * h2 + y) * w2 + xx] = vx.data()[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(&[n, c, h2, w2], out).unwrap();
        self.push_op(out, &[x], move |bk| {
            let g = bk.grad.data();
            let mut dx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dx[(p * h + y / 2) * w + xx / 2] += g[(p * h2 + y) * w2 + xx];
                    }
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], dx).unwrap())]
        })
    }

    pub fn avg_pool2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..ho * 2 {
                for xx in 0..wo * 2 {
                    out[(p * ho + y / 2) * wo + xx / 2] += 0.25 * vx.data()[(p * h + y) * w + xx];
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out).unwrap();
        self.push_op(out, &[x], move |bk| {
            let g = bk.grad.data();
            let mut dx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                for y in 0..ho * 2 {
                    for xx in 0..wo * 2 {
                        dx[(p * h + y) * w + xx] = 0.25 * g[(p * ho + y / 2) * wo + xx / 2];
                    }
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], dx).unwrap())]
        })
    }

    /// `(n, c, h, w) -> (n, c)` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let hw = (h * w) as f64;
        let out: Vec<f64> = sum_spatial(&vx).into_iter().map(|s| s / hw).collect();
        let out = Tensor::new(&[n, c], out).unwrap();
        self.push_op(out, &[x], move |bk| {
            let mut dx = vec![0.0; n * c * h * w];
            for (i, plane) in dx.chunks_mut(h * w).enumerate() {
                let g = bk.grad.data()[i] / hw;
                plane.iter_mut().for_each(|v| *v = g);
            }
            vec![Some(Tensor::new(&[n, c, h, w], dx).unwrap())]
        })
    }

    /// `(n, c, h, w) -> (n, c)` spatial max; ties route gradient to the first.
    pub fn global_max_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let hw = h * w;
        let mut arg = vec![0usize; n * c];
        let mut out = vec![0.0; n * c];
        for (i, plane) in vx.data().chunks(hw).enumerate() {
            let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
            for (k, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    bi = k;
                }
            }
            arg[i] = bi;
            out[i] = best;
        }
        let out = Tensor::new(&[n, c], out).unwrap();
        self.push_op(out, &[x], move |bk| {
            let mut dx = vec![0.0; n * c * hw];
            for i in 0..n * c {
                dx[i * hw + arg[i]] = bk.grad.data()[i];
            }
            vec![Some(Tensor::new(&[n, c, h, w], dx).unwrap())]
        })
    }

    /// Softmax across axis 1 independently at every spatial site.
    pub fn softmax_channels(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let hw = h * w;
        let mut out = vec![0.0; vx.numel()];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(vx.data()[base + ch * hw + p]);
                }
                let mut s = 0.0;
                for ch in 0..c {
                    let e = (vx.data()[base + ch * hw + p] - mx).exp();
                    out[base + ch * hw + p] = e;
                    s += e;
                }
                for ch in 0..c {
                    out[base + ch * hw + p] /= s;
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out).unwrap();
        self.push_op(out, &[x], move |bk| {
            let (g, y) = (bk.grad.data(), bk.output.data());
            let mut dx = vec![0.0; g.len()];
            for b in 0..n {
                let base = b * c * hw;
                for p in 0..hw {
                    let dot: f64 = (0..c).map(|ch| g[base + ch * hw + p] * y[base + ch * hw + p]).sum();
                    for ch in 0..c {
                        let i = base + ch * hw + p;
                        dx[i] = y[i] * (g[i] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], dx).unwrap())]
        })
    }

    /// `x / sqrt(Σ_c x² + eps)` at every spatial site.
    pub fn channel_l2_normalize(&self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let hw = h * w;
        let mut norms = vec![0.0; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let s: f64 = (0..c).map(|ch| vx.data()[(b * c + ch) * hw + p].powi(2)).sum();
                norms[b * hw + p] = (s + eps).sqrt();
            }
        }
        let mut out = (*vx).clone();
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out.data_mut()[(b * c + ch) * hw + p] /= norms[b * hw + p];
                }
            }
        }
        self.push_op(out, &[x], move |bk| {
            let (g, xv) = (bk.grad.data(), bk.inputs[0].data());
            let mut dx = vec![0.0; g.len()];
            for b in 0..n {
                for p in 0..hw {
                    let s = norms[b * hw + p];
                    let dot: f64 = (0..c).map(|ch| g[(b * c + ch) * hw + p] * xv[(b * c + ch) * hw + p]).sum();
                    for ch in 0..c {
                        let i = (b * c + ch) * hw + p;
                        dx[i] = g[i] / s - xv[i] * dot / (s * s * s);
                    }
                }
            }
            vec![Some(Tensor::new(&[n, c, h, w], dx).unwrap())]
        })
    }

    // ----- filtering -------------------------------------------------------

    /// Per-pixel depthwise filter; `weights: (n, f², h, w)`, `z: (n, c, h, w)`.
    pub fn dynamic_filter(&self, weights: Var, z: Var, f: usize) -> Var {
        let (vw, vz) = (self.value(weights), self.value(z));
        let (n, c, h, w) = vz.dims4();
        assert_eq!(vw.shape(), &[n, f * f, h, w], "dynamic_filter: weight shape mismatch");
        let out = kernels::dynamic_filter_forward(vw.data(), vz.data(), n, c, h, w, f);
        let out = Tensor::new(&[n, c, h, w], out).unwrap();
        self.push_op(out, &[weights, z], move |bk| {
            let (dw, dz) = kernels::dynamic_filter_backward(bk.inputs[0].data(), bk.inputs[1].data(), bk.grad.data(), n, c, h, w, f);
            vec![Some(Tensor::new(&[n, f * f, h, w], dw).unwrap()), Some(Tensor::new(&[n, c, h, w], dz).unwrap())]
        })
    }

    /// Spatially varying blur with reflect padding; `kernel: (n, m², h, w)`.
    pub fn pixel_conv(&self, kernel: Var, img: Var, m: usize) -> Var {
        let (vk, vi) = (self.value(kernel), self.value(img));
        let (n, c, h, w) = vi.dims4();
        assert_eq!(vk.shape(), &[n, m * m, h, w], "pixel_conv: kernel shape mismatch");
        let out = kernels::pixel_conv_forward(vk.data(), vi.data(), n, c, h, w, m);
        let out = Tensor::new(&[n, c, h, w], out).unwrap();
        self.push_op(out, &[kernel, img], move |bk| {
            let (dk, di) = kernels::pixel_conv_backward(bk.inputs[0].data(), bk.inputs[1].data(), bk.grad.data(), n, c, h, w, m);
            vec![Some(Tensor::new(&[n, m * m, h, w], dk).unwrap()), Some(Tensor::new(&[n, c, h, w], di).unwrap())]
        })
    }

    pub fn space_to_depth(&self, x: Var, d: usize) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        let out = kernels::space_to_depth(vx.data(), n, c, h, w, d);
        let out = Tensor::new(&[n, c * d * d, h / d, w / d], out).unwrap();
        self.push_op(out, &[x], move |bk| {
            let dx = kernels::depth_to_space(bk.grad.data(), n, c, h, w, d);
            vec![Some(Tensor::new(&[n, c, h, w], dx).unwrap())]
        })
    }

    /// Inverse of [`Graph::space_to_depth`] producing `c` image channels.
    pub fn depth_to_space(&self, z: Var, c: usize, d: usize) -> Var {
        let vz = self.value(z);
        let (n, cz, ho, wo) = vz.dims4();
        assert_eq!(cz, c * d * d, "depth_to_space: channel mismatch");
        let (h, w) = (ho * d, wo * d);
        let out = kernels::depth_to_space(vz.data(), n, c, h, w, d);
        let out = Tensor::new(&[n, c, h, w], out).unwrap();
        self.push_op(out, &[z], move |bk| {
            let dz = kernels::space_to_depth(bk.grad.data(), n, c, h, w, d);
            vec![Some(Tensor::new(&[n, cz, ho, wo], dz).unwrap())]
        })
    }

    // ----- reductions / losses ------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(out, &[a], |bk| vec![Some(Tensor::full(bk.inputs[0].shape(), bk.grad.data()[0]))])
    }

    pub fn mean(&self, a: Var) -> Var {
        let va = self.value(a);
        let count = va.numel() as f64;
        let out = Tensor::scalar(va.sum() / count);
        self.push_op(out, &[a], move |bk| vec![Some(Tensor::full(bk.inputs[0].shape(), bk.grad.data()[0] / count))])
    }

    /// Mean absolute error.
    pub fn l1_loss(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "l1_loss shape mismatch");
        let count = va.numel() as f64;
        let out = Tensor::scalar(va.data().iter().zip(vb.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / count);
        self.push_op(out, &[a, b], move |bk| {
            let s = bk.grad.data()[0] / count;
            let d = bk.inputs[0].zip_map(bk.inputs[1], |x, y| {
                if x > y {
                    s
                } else if x < y {
                    -s
                } else {
                    0.0
                }
            });
            vec![bk.needs[0].then(|| d.clone()), bk.needs[1].then(|| d.scale(-1.0))]
        })
    }

    pub fn mse_loss(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse_loss shape mismatch");
        let count = va.numel() as f64;
        let out = Tensor::scalar(va.data().iter().zip(vb.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / count);
        self.push_op(out, &[a, b], move |bk| {
            let s = 2.0 * bk.grad.data()[0] / count;
            let d = bk.inputs[0].zip_map(bk.inputs[1], |x, y| s * (x - y));
            vec![bk.needs[0].then(|| d.clone()), bk.needs[1].then(|| d.scale(-1.0))]
        })
    }

    /// Mean binary cross-entropy of logits against a constant label.
    pub fn bce_with_logits(&self, logits: Var, target: f64) -> Var {
        let vl = self.value(logits);
        let count = vl.numel() as f64;
        let loss: f64 = vl.data().iter().map(|&x| x.max(0.0) - x * target + (-x.abs()).exp().ln_1p()).sum::<f64>() / count;
        self.push_op(Tensor::scalar(loss), &[logits], move |bk| {
            let s = bk.grad.data()[0] / count;
            vec![Some(bk.inputs[0].map(|x| s * (1.0 / (1.0 + (-x).exp()) - target)))]
        })
    }
}
