//! Low-level numeric kernels shared by the autograd ops and the
//! non-differentiable image code. All buffers are NCHW row-major.

use crate::par;

/// Mirror index into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n-2`).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// `c = a · b + beta · c` for row-major operands, with optional transposes.
/// `a` is logically `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the stated logical shapes.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.k) / self.stride + 1, (self.w + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `(c, h, w)` into columns `(c·k·k, ho·wo)` with zero padding.
pub fn im2col(x: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let kk = g.k * g.k;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = c * kk + ki * g.k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
pub fn col2im(cols: &[f64], g: ConvGeom, x: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let kk = g.k * g.k;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = c * kk + ki * g.k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `x: (n, c_in, h, w)`, `weight: (c_out, c_in, k, k)`.
pub fn conv2d_forward(x: &[f64], n: usize, g: ConvGeom, weight: &[f64], bias: Option<&[f64]>, c_out: usize) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let in_per = g.c_in * g.h * g.w;
    let out_per = c_out * ho * wo;
    let ckk = g.c_in * g.k * g.k;
    let mut y = vec![0.0; n * out_per];
    par::for_each_chunk_mut(&mut y, out_per, |b, out| {
        let xb = &x[b * in_per..(b + 1) * in_per];
        if g.is_pointwise() {
            gemm(c_out, ckk, ho * wo, weight, false, xb, false, 0.0, out);
        } else {
            let mut cols = vec![0.0; ckk * ho * wo];
            im2col(xb, g, &mut cols);
            gemm(c_out, ckk, ho * wo, weight, false, &cols, false, 0.0, out);
        }
        if let Some(bias) = bias {
            for (co, plane) in out.chunks_mut(ho * wo).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    });
    y
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

/// Gradients of [`conv2d_forward`] given upstream `dy: (n, c_out, ho, wo)`.
pub fn conv2d_backward(x: &[f64], n: usize, g: ConvGeom, weight: &[f64], c_out: usize, dy: &[f64], need_dx: bool) -> ConvGrads {
    let (ho, wo) = g.out_hw();
    let in_per = g.c_in * g.h * g.w;
    let out_per = c_out * ho * wo;
    let ckk = g.c_in * g.k * g.k;
    let parts = par::map_range(n, |b| {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let dyb = &dy[b * out_per..(b + 1) * out_per];
        let mut dw = vec![0.0; c_out * ckk];
        let mut dx = if need_dx { vec![0.0; in_per] } else { Vec::new() };
        if g.is_pointwise() {
            gemm(c_out, ho * wo, ckk, dyb, false, xb, true, 0.0, &mut dw);
            if need_dx {
                gemm(ckk, c_out, ho * wo, weight, true, dyb, false, 0.0, &mut dx);
            }
        } else {
            let mut cols = vec![0.0; ckk * ho * wo];
            im2col(xb, g, &mut cols);
            gemm(c_out, ho * wo, ckk, dyb, false, &cols, true, 0.0, &mut dw);
            if need_dx {
                gemm(ckk, c_out, ho * wo, weight, true, dyb, false, 0.0, &mut cols);
                col2im(&cols, g, &mut dx);
            }
        }
        let db: Vec<f64> = dyb.chunks(ho * wo).map(|p| p.iter().sum()).collect();
        (dx, dw, db)
    });
    let mut dw = vec![0.0; c_out * ckk];
    let mut db = vec![0.0; c_out];
    let mut dx = if need_dx { Some(Vec::with_capacity(n * in_per)) } else { None };
    for (pdx, pdw, pdb) in parts {
        dw.iter_mut().zip(&pdw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&pdb).for_each(|(a, b)| *a += b);
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&pdx);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Spatially varying correlation with reflect padding:
/// `out[n,c,y,x] = Σ_{i,j} k[n, i·m+j, y, x] · img[n, c, y+i−m/2, x+j−m/2]`.
/// `kernel: (n, m², h, w)`, `img: (n, c, h, w)`.
pub fn pixel_conv_forward(kernel: &[f64], img: &[f64], n: usize, c: usize, h: usize, w: usize, m: usize) -> Vec<f64> {
    let hw = h * w;
    let r = (m / 2) as isize;
    let mut out = vec![0.0; n * c * hw];
    par::for_each_chunk_mut(&mut out, c * hw, |b, ob| {
        let kb = &kernel[b * m * m * hw..(b + 1) * m * m * hw];
        let ib = &img[b * c * hw..(b + 1) * c * hw];
        for i in 0..m {
            for j in 0..m {
                let kp = &kb[(i * m + j) * hw..(i * m + j + 1) * hw];
                for y in 0..h {
                    let sy = reflect(y as isize + i as isize - r, h);
                    for x in 0..w {
                        let sx = reflect(x as isize + j as isize - r, w);
                        let kv = kp[y * w + x];
                        if kv == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            ob[ch * hw + y * w + x] += kv * ib[ch * hw + sy * w + sx];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns `(d_kernel, d_img)` for [`pixel_conv_forward`].
#[allow(clippy::too_many_arguments)]
pub fn pixel_conv_backward(
    kernel: &[f64],
    img: &[f64],
    dout: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    m: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let r = (m / 2) as isize;
    let parts = par::map_range(n, |b| {
        let kb = &kernel[b * m * m * hw..(b + 1) * m * m * hw];
        let ib = &img[b * c * hw..(b + 1) * c * hw];
        let db = &dout[b * c * hw..(b + 1) * c * hw];
        let mut dk = vec![0.0; m * m * hw];
        let mut di = vec![0.0; c * hw];
        for i in 0..m {
            for j in 0..m {
                let off = (i * m + j) * hw;
                for y in 0..h {
                    let sy = reflect(y as isize + i as isize - r, h);
                    for x in 0..w {
                        let sx = reflect(x as isize + j as isize - r, w);
                        let kv = kb[off + y * w + x];
                        let mut acc = 0.0;
                        for ch in 0..c {
                            let g = db[ch * hw + y * w + x];
                            acc += g * ib[ch * hw + sy * w + sx];
                            di[ch * hw + sy * w + sx] += kv * g;
                        }
                        dk[off + y * w + x] = acc;
                    }
                }
            }
        }
        (dk, di)
    });
    let mut dk = Vec::with_capacity(n * m * m * hw);
    let mut di = Vec::with_capacity(n * c * hw);
    for (a, b) in parts {
        dk.extend(a);
        di.extend(b);
    }
    (dk, di)
}

/// Per-pixel depthwise dynamic filter with zero padding:
/// `out[n,c,y,x] = Σ_{i,j} wgt[n, i·f+j, y, x] · z[n, c, y+i−f/2, x+j−f/2]`.
pub fn dynamic_filter_forward(wgt: &[f64], z: &[f64], n: usize, c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let hw = h * w;
    let r = (f / 2) as isize;
    let mut out = vec![0.0; n * c * hw];
    par::for_each_chunk_mut(&mut out, c * hw, |b, ob| {
        let wb = &wgt[b * f * f * hw..(b + 1) * f * f * hw];
        let zb = &z[b * c * hw..(b + 1) * c * hw];
        for i in 0..f {
            for j in 0..f {
                let wp = &wb[(i * f + j) * hw..(i * f + j + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + i as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + j as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let wv = wp[y * w + x];
                        let src = sy as usize * w + sx as usize;
                        for ch in 0..c {
                            ob[ch * hw + y * w + x] += wv * zb[ch * hw + src];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns `(d_weights, d_z)` for [`dynamic_filter_forward`].
#[allow(clippy::too_many_arguments)]
pub fn dynamic_filter_backward(
    wgt: &[f64],
    z: &[f64],
    dout: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let r = (f / 2) as isize;
    let parts = par::map_range(n, |b| {
        let wb = &wgt[b * f * f * hw..(b + 1) * f * f * hw];
        let zb = &z[b * c * hw..(b + 1) * c * hw];
        let db = &dout[b * c * hw..(b + 1) * c * hw];
        let mut dw = vec![0.0; f * f * hw];
        let mut dz = vec![0.0; c * hw];
        for i in 0..f {
            for j in 0..f {
                let off = (i * f + j) * hw;
                for y in 0..h {
                    let sy = y as isize + i as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + j as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = sy as usize * w + sx as usize;
                        let wv = wb[off + y * w + x];
                        let mut acc = 0.0;
                        for ch in 0..c {
                            let g = db[ch * hw + y * w + x];
                            acc += g * zb[ch * hw + src];
                            dz[ch * hw + src] += wv * g;
                        }
                        dw[off + y * w + x] = acc;
                    }
                }
            }
        }
        (dw, dz)
    });
    let mut dw = Vec::with_capacity(n * f * f * hw);
    let mut dz = Vec::with_capacity(n * c * hw);
    for (a, b) in parts {
        dw.extend(a);
        dz.extend(b);
    }
    (dw, dz)
}

/// `(n, c, h, w) -> (n, c·d², h/d, w/d)`; channel `c·d² + dy·d + dx`.
pub fn space_to_depth(x: &[f64], n: usize, c: usize, h: usize, w: usize, d: usize) -> Vec<f64> {
    let (ho, wo) = (h / d, w / d);
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..d {
                for dx in 0..d {
                    let oc = ch * d * d + dy * d + dx;
                    for y in 0..ho {
                        for xx in 0..wo {
                            out[((b * c * d * d + oc) * ho + y) * wo + xx] = x[((b * c + ch) * h + y * d + dy) * w + xx * d + dx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of [`space_to_depth`]; `c` is the image channel count.
pub fn depth_to_space(z: &[f64], n: usize, c: usize, h: usize, w: usize, d: usize) -> Vec<f64> {
    let (ho, wo) = (h / d, w / d);
    let mut out = vec![0.0; z.len()];
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..d {
                for dx in 0..d {
                    let oc = ch * d * d + dy * d + dx;
                    for y in 0..ho {
                        for xx in 0..wo {
                            out[((b * c + ch) * h + y * d + dy) * w + xx * d + dx] = z[((b * c * d * d + oc) * ho + y) * wo + xx];
                        }
                    }
                }
            }
        }
    }
    out
}
