//! Forward and backward numeric kernels, independent of the tape.
//!
//! Convolutions accumulate every output element over `(in_channel, ky, kx)` in
//! ascending order starting from zero and add the bias last, so they agree exactly
//! with a naive nested-loop evaluation.

use crate::error::{Error, Result};

use super::{Shape, Tensor};

/// Stride, zero padding and dilation of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            pad,
            dilation,
        }
    }

    /// Same-size 3×3-style geometry: `pad = dilation * (k - 1) / 2`.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeometry::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    /// `floor((len + 2 pad - dilation (k - 1) - 1) / stride) + 1`, or `None` when empty.
    pub fn conv_out(&self, len: usize, k: usize) -> Option<usize> {
        let span = (self.dilation * (k - 1) + 1) as isize;
        let avail = len as isize + 2 * self.pad as isize - span;
        (avail >= 0).then(|| avail as usize / self.stride + 1)
    }

    /// `(len - 1) stride - 2 pad + k`, or `None` when non-positive.
    pub fn transposed_out(&self, len: usize, k: usize) -> Option<usize> {
        let out = (len as isize - 1) * self.stride as isize - 2 * self.pad as isize + k as isize;
        (out >= 1).then_some(out as usize)
    }
}

const TILE: usize = 256;

/// `out[m, p] += Σ_k a[m, k] · b[k, p]`, summed over `k` in ascending order.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    let mut start = 0;
    while start < p {
        let end = (start + TILE).min(p);
        for kk in 0..k {
            let row = &b[kk * p + start..kk * p + end];
            for mm in 0..m {
                let coef = a[mm * k + kk];
                let o = &mut out[mm * p + start..mm * p + end];
                for (o, r) in o.iter_mut().zip(row) {
                    *o += coef * r;
                }
            }
        }
        start = end;
    }
}

/// `out[k, p] += Σ_m a[m, k] · b[m, p]` (i.e. `aᵀ b`).
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    let mut start = 0;
    while start < p {
        let end = (start + TILE).min(p);
        for kk in 0..k {
            let o = &mut out[kk * p + start..kk * p + end];
            for mm in 0..m {
                let coef = a[mm * k + kk];
                if coef == 0.0 {
                    continue;
                }
                let row = &b[mm * p + start..mm * p + end];
                for (o, r) in o.iter_mut().zip(row) {
                    *o += coef * r;
                }
            }
        }
        start = end;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m, k] += Σ_p a[m, p] · b[k, p]` (i.e. `a bᵀ`).
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for mm in 0..m {
        let ar = &a[mm * p..(mm + 1) * p];
        let orow = &mut out[mm * k..(mm + 1) * k];
        let mut kk = 0;
        // four output columns at once so each load of `ar` feeds four products
        while kk + 4 <= k {
            let rows = [0, 1, 2, 3].map(|r| &b[(kk + r) * p..(kk + r + 1) * p]);
            let mut acc = [[0.0f64; 2]; 4];
            let split = p - p % 2;
            for j in (0..split).step_by(2) {
                let (x0, x1) = (ar[j], ar[j + 1]);
                for r in 0..4 {
                    acc[r][0] += x0 * rows[r][j];
                    acc[r][1] += x1 * rows[r][j + 1];
                }
            }
            for r in 0..4 {
                let mut v = acc[r][0] + acc[r][1];
                if split < p {
                    v += ar[split] * rows[r][split];
                }
                orow[kk + r] += v;
            }
            kk += 4;
        }
        for kk in kk..k {
            orow[kk] += dot(ar, &b[kk * p..(kk + 1) * p]);
        }
    }
}

struct Patch {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    g: ConvGeometry,
}

impl Patch {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the column matrix is the input itself.
    fn is_identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.g.stride == 1 && self.g.pad == 0
    }

    /// Source index along one axis, or `None` inside the zero padding.
    #[inline]
    fn src(o: usize, k: usize, g: ConvGeometry, len: usize) -> Option<usize> {
        let i = (o * g.stride + k * g.dilation) as isize - g.pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match Patch::src(oy, ky, self.g, self.h) {
                            None => line.fill(0.0),
                            Some(iy) => {
                                let srow = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match Patch::src(ox, kx, self.g, self.w) {
                                        Some(ix) => srow[ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let Some(iy) = Patch::src(oy, ky, self.g, self.h) else {
                            continue;
                        };
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        for (ox, v) in line.iter().enumerate() {
                            if let Some(ix) = Patch::src(ox, kx, self.g, self.w) {
                                plane[iy * self.w + ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_geometry(op: &'static str, g: ConvGeometry) -> Result<()> {
    if g.stride == 0 || g.dilation == 0 {
        return Err(Error::invalid(
            op,
            format!(
                "stride {} and dilation {} must be >= 1",
                g.stride, g.dilation
            ),
        ));
    }
    Ok(())
}

fn check_bias(op: &'static str, b: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.numel() != channels {
            return Err(Error::mismatch(op, "bias length", channels, b.numel()));
        }
    }
    Ok(())
}

/// Output shape of `conv2d`, validating every dimension first.
pub fn conv2d_shape(x: Shape, w: Shape, g: ConvGeometry) -> Result<Shape> {
    const OP: &str = "conv2d";
    check_geometry(OP, g)?;
    if w.c != x.c {
        return Err(Error::mismatch(OP, "input channels", w.c, x.c));
    }
    if w.h == 0 || w.w == 0 {
        return Err(Error::invalid(OP, "kernel extent must be >= 1"));
    }
    match (g.conv_out(x.h, w.h), g.conv_out(x.w, w.w)) {
        (Some(oh), Some(ow)) => Ok(Shape::new(x.n, w.n, oh, ow)),
        _ => Err(Error::EmptyOutput {
            op: OP,
            input: x,
            detail: format!("kernel {}x{} with {:?}", w.h, w.w, g),
        }),
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    let ys = conv2d_shape(xs, ws, g)?;
    check_bias("conv2d", b, ws.n)?;
    let patch = Patch {
        c: xs.c,
        h: xs.h,
        w: xs.w,
        kh: ws.h,
        kw: ws.w,
        oh: ys.h,
        ow: ys.w,
        g,
    };
    let (k, p) = (patch.rows(), patch.cols());
    let identity = patch.is_identity();
    let mut col = vec![0.0; if identity { 0 } else { k * p }];
    let mut y = Tensor::zeros(ys);
    for n in 0..xs.n {
        let src = if identity {
            x.sample(n)
        } else {
            patch.im2col(x.sample(n), &mut col);
            &col
        };
        let out = y.sample_mut(n);
        gemm_acc(w.data(), src, out, ws.n, k, p);
        if let Some(b) = b {
            for (co, bias) in b.data().iter().enumerate() {
                for v in &mut out[co * p..(co + 1) * p] {
                    *v += bias;
                }
            }
        }
    }
    Ok(y)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: ConvGeometry,
    dy: &Tensor,
    need: [bool; 3],
) -> ConvGrads {
    let (xs, ws, ys) = (x.shape(), w.shape(), dy.shape());
    let patch = Patch {
        c: xs.c,
        h: xs.h,
        w: xs.w,
        kh: ws.h,
        kw: ws.w,
        oh: ys.h,
        ow: ys.w,
        g,
    };
    let (k, p) = (patch.rows(), patch.cols());
    let identity = patch.is_identity();
    let mut col = vec![0.0; if identity { 0 } else { k * p }];
    let mut dx = need[0].then(|| Tensor::zeros(xs));
    let mut dw = need[1].then(|| Tensor::zeros(ws));
    for n in 0..xs.n {
        let dyn_ = dy.sample(n);
        if let Some(dw) = dw.as_mut() {
            let src = if identity {
                x.sample(n)
            } else {
                patch.im2col(x.sample(n), &mut col);
                &col
            };
            gemm_nt_acc(dyn_, src, dw.data_mut(), ws.n, k, p);
        }
        if let Some(dx) = dx.as_mut() {
            if identity {
                gemm_tn_acc(w.data(), dyn_, dx.sample_mut(n), ws.n, k, p);
            } else {
                col.fill(0.0);
                gemm_tn_acc(w.data(), dyn_, &mut col, ws.n, k, p);
                patch.col2im(&col, dx.sample_mut(n));
            }
        }
    }
    let db = need[2].then(|| channel_sums(dy));
    ConvGrads { dx, dw, db }
}

/// Per-channel sums over batch and space, as a `1×C×1×1` tensor.
fn channel_sums(t: &Tensor) -> Tensor {
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            out.data_mut()[c] += t.plane(n, c).iter().sum::<f64>();
        }
    }
    out
}

/// Output shape of `conv_transpose2d` with weights laid out `[C_in, C_out, k, k]`.
pub fn conv_transpose2d_shape(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Shape> {
    const OP: &str = "conv_transpose2d";
    let g = ConvGeometry::new(stride, pad, 1);
    check_geometry(OP, g)?;
    if w.n != x.c {
        return Err(Error::mismatch(OP, "input channels", w.n, x.c));
    }
    if w.h == 0 || w.w == 0 {
        return Err(Error::invalid(OP, "kernel extent must be >= 1"));
    }
    match (g.transposed_out(x.h, w.h), g.transposed_out(x.w, w.w)) {
        (Some(oh), Some(ow)) => Ok(Shape::new(x.n, w.c, oh, ow)),
        _ => Err(Error::EmptyOutput {
            op: OP,
            input: x,
            detail: format!("kernel {}x{}, stride {stride}, pad {pad}", w.h, w.w),
        }),
    }
}

/// Transposed convolution as `col = Wᵀ x` followed by a scatter of `col` onto the
/// output grid. Each output element sums, over taps `(ky, kx)` in ascending order,
/// the per-tap channel sum `Σ_ci w · x` (itself accumulated in ascending `ci`), then adds the bias.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    let ys = conv_transpose2d_shape(xs, ws, stride, pad)?;
    check_bias("conv_transpose2d", b, ws.c)?;
    let patch = Patch {
        c: ws.c,
        h: ys.h,
        w: ys.w,
        kh: ws.h,
        kw: ws.w,
        oh: xs.h,
        ow: xs.w,
        g: ConvGeometry::new(stride, pad, 1),
    };
    let (k, p) = (patch.rows(), patch.cols());
    let mut col = vec![0.0; k * p];
    let mut y = Tensor::zeros(ys);
    for n in 0..xs.n {
        col.fill(0.0);
        gemm_tn_acc(w.data(), x.sample(n), &mut col, ws.n, k, p);
        let out = y.sample_mut(n);
        patch.col2im(&col, out);
        if let Some(b) = b {
            let plane = ys.plane();
            for (co, bias) in b.data().iter().enumerate() {
                for v in &mut out[co * plane..(co + 1) * plane] {
                    *v += bias;
                }
            }
        }
    }
    Ok(y)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
    need: [bool; 3],
) -> ConvGrads {
    let (xs, ws, ys) = (x.shape(), w.shape(), dy.shape());
    // Gathering dy through the forward-conv geometry lands exactly on the input grid.
    let patch = Patch {
        c: ws.c,
        h: ys.h,
        w: ys.w,
        kh: ws.h,
        kw: ws.w,
        oh: xs.h,
        ow: xs.w,
        g: ConvGeometry::new(stride, pad, 1),
    };
    let (k, p) = (patch.rows(), patch.cols());
    let mut col = vec![0.0; k * p];
    let mut dx = need[0].then(|| Tensor::zeros(xs));
    let mut dw = need[1].then(|| Tensor::zeros(ws));
    for n in 0..xs.n {
        patch.im2col(dy.sample(n), &mut col);
        if let Some(dx) = dx.as_mut() {
            gemm_acc(w.data(), &col, dx.sample_mut(n), ws.n, k, p);
        }
        if let Some(dw) = dw.as_mut() {
            gemm_nt_acc(x.sample(n), &col, dw.data_mut(), ws.n, k, p);
        }
    }
    let db = need[2].then(|| channel_sums(dy));
    ConvGrads { dx, dw, db }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

/// Saved statistics of a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormSaved {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalize with per-channel statistics over `(N, H, W)`.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Tensor, BatchNormSaved) {
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut acc = 0.0;
        for n in 0..s.n {
            acc += x.plane(n, c).iter().sum::<f64>();
        }
        mean[c] = acc / count;
        let mut sq = 0.0;
        for n in 0..s.n {
            sq += x
                .plane(n, c)
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>();
        }
        var[c] = sq / count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let xh = x_hat.plane_mut(n, c);
            for (d, v) in xh.iter_mut().zip(src) {
                *d = (v - mean[c]) * inv_std[c];
            }
            let xh = x_hat.plane(n, c).to_vec();
            for (d, v) in y.plane_mut(n, c).iter_mut().zip(&xh) {
                *d = gamma[c] * v + beta[c];
            }
        }
    }
    (
        y,
        BatchNormSaved {
            x_hat,
            inv_std,
            mean,
            var,
        },
    )
}

pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> (Tensor, BatchNormSaved) {
    let s = x.shape();
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c).to_vec();
            let xh = x_hat.plane_mut(n, c);
            for (d, v) in xh.iter_mut().zip(&src) {
                *d = (v - running_mean[c]) * inv_std[c];
            }
            let xh = x_hat.plane(n, c).to_vec();
            for (d, v) in y.plane_mut(n, c).iter_mut().zip(&xh) {
                *d = gamma[c] * v + beta[c];
            }
        }
    }
    let saved = BatchNormSaved {
        x_hat,
        inv_std,
        mean: running_mean.to_vec(),
        var: running_var.to_vec(),
    };
    (y, saved)
}

/// Returns `(dx, dgamma, dbeta)`; `train` selects batch-statistic or frozen-statistic rules.
pub fn batch_norm_backward(
    saved: &BatchNormSaved,
    gamma: &[f64],
    dy: &Tensor,
    train: bool,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = dy.shape();
    let count = (s.n * s.plane()) as f64;
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let g = dy.plane(n, c);
            let xh = saved.x_hat.plane(n, c);
            dbeta[c] += g.iter().sum::<f64>();
            dgamma[c] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma[c] * saved.inv_std[c];
            let g = dy.plane(n, c).to_vec();
            let xh = saved.x_hat.plane(n, c).to_vec();
            let out = dx.plane_mut(n, c);
            if train {
                let mean_g = dbeta[c] / count;
                let mean_gx = dgamma[c] / count;
                for ((d, gv), xv) in out.iter_mut().zip(&g).zip(&xh) {
                    *d = scale * (gv - mean_g - xv * mean_gx);
                }
            } else {
                for (d, gv) in out.iter_mut().zip(&g) {
                    *d = scale * gv;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::invalid("global_avg_pool", "empty spatial extent"));
    }
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    let area = s.plane() as f64;
    for n in 0..s.n {
        for c in 0..s.c {
            let mean = x.plane(n, c).iter().sum::<f64>() / area;
            y.set(n, c, 0, 0, mean);
        }
    }
    Ok(y)
}

pub fn global_avg_pool_backward(input: Shape, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input);
    let area = input.plane() as f64;
    for n in 0..input.n {
        for c in 0..input.c {
            let g = dy.at(n, c, 0, 0) / area;
            dx.plane_mut(n, c).fill(g);
        }
    }
    dx
}

/// Corner-aligned sampling taps along one axis: `(lo, hi, frac)` per output index.
fn resize_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            if in_len == 1 || out_len == 1 {
                return (0, 0, 0.0);
            }
            let src = (o * (in_len - 1)) as f64 / (out_len - 1) as f64;
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize with corner-aligned sampling (output corners hit input corners).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "resize_bilinear",
            "output size must be >= 1",
        ));
    }
    let s = x.shape();
    let ry = resize_taps(s.h, out_h);
    let rx = resize_taps(s.w, out_w);
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c).to_vec();
            let dst = y.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
                    let (a, b) = (src[y0 * s.w + x0], src[y0 * s.w + x1]);
                    let (c_, d) = (src[y1 * s.w + x0], src[y1 * s.w + x1]);
                    // lerp form keeps constant inputs exact
                    let top = a + fx * (b - a);
                    let bottom = c_ + fx * (d - c_);
                    dst[oy * out_w + ox] = top + fy * (bottom - top);
                }
            }
        }
    }
    Ok(y)
}

pub fn resize_bilinear_backward(input: Shape, dy: &Tensor) -> Tensor {
    let ys = dy.shape();
    let ry = resize_taps(input.h, ys.h);
    let rx = resize_taps(input.w, ys.w);
    let mut dx = Tensor::zeros(input);
    for n in 0..input.n {
        for c in 0..input.c {
            let g = dy.plane(n, c).to_vec();
            let dst = dx.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
                    let v = g[oy * ys.w + ox];
                    dst[y0 * input.w + x0] += v * (1.0 - fx) * (1.0 - fy);
                    dst[y0 * input.w + x1] += v * fx * (1.0 - fy);
                    dst[y1 * input.w + x0] += v * (1.0 - fx) * fy;
                    dst[y1 * input.w + x1] += v * fx * fy;
                }
            }
        }
    }
    dx
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    const OP: &str = "concat_channels";
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid(OP, "no inputs"))?
        .shape();
    let mut channels = 0;
    for (i, t) in xs.iter().enumerate() {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::invalid(
                OP,
                format!("input {i} has shape {s}, expected batch/spatial of {first}"),
            ));
        }
        channels += s.c;
    }
    let mut y = Tensor::zeros(Shape::new(first.n, channels, first.h, first.w));
    for n in 0..first.n {
        let mut offset = 0;
        let out = y.sample_mut(n);
        for t in xs {
            let src = t.sample(n);
            out[offset..offset + src.len()].copy_from_slice(src);
            offset += src.len();
        }
    }
    Ok(y)
}

/// Channels `[start, start + len)` of every sample.
pub fn narrow_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if start + len > s.c || len == 0 {
        return Err(Error::invalid(
            "narrow_channels",
            format!("range {start}..{} outside {} channels", start + len, s.c),
        ));
    }
    let mut y = Tensor::zeros(Shape::new(s.n, len, s.h, s.w));
    let p = s.plane();
    for n in 0..s.n {
        let src = &x.sample(n)[start * p..(start + len) * p];
        y.sample_mut(n).copy_from_slice(src);
    }
    Ok(y)
}

/// Checks shapes for [`mse_masked`]: `mask` is `N×C×1×1`.
pub fn mse_masked_check(pred: Shape, target: Shape, mask: Shape) -> Result<()> {
    const OP: &str = "mse_masked";
    if pred != target {
        return Err(Error::invalid(
            OP,
            format!("pred {pred} vs target {target}"),
        ));
    }
    if mask != Shape::new(pred.n, pred.c, 1, 1) {
        return Err(Error::invalid(
            OP,
            format!("mask {mask} must be {}x{}x1x1", pred.n, pred.c),
        ));
    }
    if pred.n == 0 || pred.plane() == 0 {
        return Err(Error::invalid(OP, "empty prediction"));
    }
    Ok(())
}

/// `½ · mean_n Σ_c mask[n,c] · mean_pixels (pred − target)²`.
pub fn mse_masked(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<f64> {
    let s = pred.shape();
    mse_masked_check(s, target.shape(), mask.shape())?;
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let m = mask.at(n, c, 0, 0);
            if m == 0.0 {
                continue;
            }
            let sq: f64 = pred
                .plane(n, c)
                .iter()
                .zip(target.plane(n, c))
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            total += m * sq / s.plane() as f64;
        }
    }
    Ok(0.5 * total / s.n as f64)
}

pub fn mse_masked_backward(pred: &Tensor, target: &Tensor, mask: &Tensor, g: f64) -> Tensor {
    let s = pred.shape();
    let scale = g / (s.n * s.plane()) as f64;
    let mut d = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let m = mask.at(n, c, 0, 0);
            if m == 0.0 {
                continue;
            }
            let (p, t) = (pred.plane(n, c).to_vec(), target.plane(n, c));
            for ((o, pv), tv) in d.plane_mut(n, c).iter_mut().zip(&p).zip(t) {
                *o = scale * m * (pv - tv);
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = t(
            Shape::new(1, 1, 3, 3),
            &[1., -2., 3., 4., 5.5, 6., -7., 8., 9.],
        );
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let y = conv2d(&x, &w, Some(&b), ConvGeometry::new(1, 0, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &w, None, ConvGeometry::new(1, 1, 1)).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, r, c), 4.0);
        }
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn dilated_same_padding_preserves_size() {
        let x = Tensor::zeros(Shape::new(1, 1, 5, 5));
        let w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        let y = conv2d(&x, &w, None, ConvGeometry::new(1, 2, 2)).unwrap();
        assert_eq!((y.shape().h, y.shape().w), (5, 5));
    }

    #[test]
    fn conv_errors_name_the_dimension() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(Shape::new(1, 3, 3, 3));
        match conv2d(&x, &w, None, ConvGeometry::new(1, 1, 1)) {
            Err(Error::ShapeMismatch {
                dim,
                expected,
                actual,
                ..
            }) => {
                assert_eq!((dim, expected, actual), ("input channels", 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        let w = Tensor::zeros(Shape::new(1, 2, 5, 5));
        assert!(matches!(
            conv2d(&x, &w, None, ConvGeometry::new(1, 0, 1)),
            Err(Error::EmptyOutput { .. })
        ));
        assert!(conv2d(&x, &w, None, ConvGeometry::new(0, 2, 1)).is_err());
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let x = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let w = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let y = conv_transpose2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 8, 8));
    }

    #[test]
    fn transposed_conv_single_pixel_scatter() {
        let x = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 4, 4), 1.0);
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let y = conv_transpose2d(&x, &w, Some(&b), 2, 1).unwrap();
        assert_eq!(y, Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
    }

    #[test]
    fn transposed_conv_rejects_empty_output() {
        let x = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let w = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(matches!(
            conv_transpose2d(&x, &w, None, 1, 1),
            Err(Error::EmptyOutput { .. })
        ));
    }

    #[test]
    fn relu_clamps_and_masks() {
        let x = t(Shape::new(1, 1, 1, 3), &[-1., 0., 2.]);
        assert_eq!(relu(&x).data(), &[0., 0., 2.]);
        let g = relu_backward(&x, &Tensor::full(x.shape(), 1.0));
        assert_eq!(g.data(), &[0., 0., 1.]);
    }

    #[test]
    fn batch_norm_with_zero_gamma_outputs_beta() {
        let mut rng = rand::thread_rng();
        let x = Tensor::uniform(Shape::new(2, 3, 4, 4), -1.0, 1.0, &mut rng);
        let (y, _) = batch_norm_train(&x, &[0.0; 3], &[0.5, -1.0, 2.0], 1e-5);
        for n in 0..2 {
            for (c, beta) in [0.5, -1.0, 2.0].into_iter().enumerate() {
                assert!(y.plane(n, c).iter().all(|&v| v == beta));
            }
        }
    }

    #[test]
    fn batch_norm_of_standardized_input_is_near_identity() {
        // per-channel mean 0, biased variance 1
        let x = t(Shape::new(1, 1, 2, 2), &[1., -1., 1., -1.]);
        let (y, saved) = batch_norm_train(&x, &[1.0], &[0.0], 1e-5);
        assert_eq!(saved.mean[0], 0.0);
        assert_eq!(saved.var[0], 1.0);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn global_pool_means() {
        let x = t(Shape::new(1, 1, 2, 2), &[1., 2., 3., 4.]);
        assert_eq!(global_avg_pool(&x).unwrap().item(), 2.5);
        let c = Tensor::full(Shape::new(2, 3, 3, 5), -0.7);
        let y = global_avg_pool(&c).unwrap();
        assert!(y.data().iter().all(|&v| (v + 0.7).abs() < 1e-15));
        let g = global_avg_pool_backward(Shape::new(1, 1, 2, 2), &Tensor::scalar(1.0));
        assert_eq!(g.data(), &[0.25; 4]);
    }

    #[test]
    fn resize_is_exact_on_constants_and_corners() {
        let c = Tensor::full(Shape::new(1, 2, 3, 5), 0.37);
        let y = resize_bilinear(&c, 7, 4).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.37));

        let one = Tensor::full(Shape::new(1, 1, 1, 1), 4.0);
        let y = resize_bilinear(&one, 3, 6).unwrap();
        assert!(y.data().iter().all(|&v| v == 4.0));

        let x = t(Shape::new(1, 1, 2, 2), &[0., 1., 0., 1.]);
        let y = resize_bilinear(&x, 2, 4).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for r in 0..2 {
            for (c, e) in expect.iter().enumerate() {
                assert!((y.at(0, 0, r, c) - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn concat_orders_channels_and_reports_offender() {
        let a = Tensor::full(Shape::new(2, 2, 3, 3), 1.0);
        let b = Tensor::full(Shape::new(2, 3, 3, 3), 2.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 5, 3, 3));
        assert_eq!(y.at(1, 1, 0, 0), 1.0);
        assert_eq!(y.at(1, 2, 0, 0), 2.0);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let bad = Tensor::zeros(Shape::new(2, 1, 4, 3));
        let err = concat_channels(&[&a, &b, &bad]).unwrap_err().to_string();
        assert!(err.contains("input 2"), "{err}");
    }

    #[test]
    fn mse_masked_examples() {
        let s = Shape::new(1, 2, 2, 2);
        let p = Tensor::full(s, 3.0);
        let tgt = Tensor::full(s, 1.0);
        let mut mask = Tensor::zeros(Shape::new(1, 2, 1, 1));
        assert_eq!(
            mse_masked(&p, &p, &Tensor::full(mask.shape(), 1.0)).unwrap(),
            0.0
        );
        assert_eq!(mse_masked(&p, &tgt, &mask).unwrap(), 0.0);
        mask.set(0, 1, 0, 0, 1.0);
        assert_eq!(mse_masked(&p, &tgt, &mask).unwrap(), 2.0);
        assert!(mse_masked(&p, &Tensor::zeros(Shape::new(1, 2, 2, 3)), &mask).is_err());
    }
}
