//! Raw forward/backward kernels over row-major `f64` buffers.
//!
//! Nothing here allocates tape state; `primitive.rs` wires these into nodes.

use serde::{Deserialize, Serialize};

/// Convolution hyperparameters. Kernels are laid out `(c_out, c_in / groups, k, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvAttrs {
    /// Stride-`stride` convolution that keeps spatial size at stride 1.
    pub fn same(kernel: usize, stride: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups,
        }
    }

    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }
}

impl Default for ConvAttrs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub attrs: ConvAttrs,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.c_in / self.attrs.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.attrs.groups
    }
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.attrs.stride == 1 && self.attrs.padding == 0
    }
    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
}

fn im2col(g: &ConvGeom, x: &[f64], n: usize, group: usize, col: &mut [f64]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let a = g.attrs;
    let cin_g = g.cin_g();
    let hw = ho * wo;
    for c in 0..cin_g {
        let plane = &x[((n * g.c_in) + group * cin_g + c) * h * w..][..h * w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut col[((c * g.kh + i) * g.kw + j) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * a.stride + i * a.dilation) as isize - a.padding as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * a.stride + j * a.dilation) as isize - a.padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, col: &[f64], n: usize, group: usize, dx: &mut [f64]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let a = g.attrs;
    let cin_g = g.cin_g();
    let hw = ho * wo;
    for c in 0..cin_g {
        let plane = &mut dx[((n * g.c_in) + group * cin_g + c) * h * w..][..h * w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &col[((c * g.kh + i) * g.kw + j) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * a.stride + i * a.dilation) as isize - a.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * a.stride + j * a.dilation) as isize - a.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the debug assertions above bound every access made by dgemm for
    // the given extents and strides; all callers pass slices of at least that size.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], wt: &[f64]) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.c_out * hw];
    if g.is_depthwise() {
        depthwise_forward(g, x, wt, &mut out);
        return out;
    }
    let (cin_g, cout_g, k) = (g.cin_g(), g.cout_g(), g.k());
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * hw]
    };
    for n in 0..g.n {
        for grp in 0..g.attrs.groups {
            let b: &[f64] = if g.is_pointwise() {
                &x[(n * g.c_in + grp * cin_g) * hw..][..cin_g * hw]
            } else {
                im2col(g, x, n, grp, &mut col);
                &col
            };
            let a = &wt[grp * cout_g * k..][..cout_g * k];
            let c = &mut out[(n * g.c_out + grp * cout_g) * hw..][..cout_g * hw];
            gemm(cout_g, k, hw, a, k, 1, b, hw, 1, 0.0, c);
        }
    }
    out
}

/// Gradients of a convolution with respect to its input and/or kernel.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = g.ho * g.wo;
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; wt.len()]);
    if g.is_depthwise() {
        depthwise_backward(g, x, wt, dy, dx.as_deref_mut(), dw.as_deref_mut());
        return (dx, dw);
    }
    let (cin_g, cout_g, k) = (g.cin_g(), g.cout_g(), g.k());
    let pointwise = g.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![0.0; k * hw]
    };
    let mut dcol = if pointwise || !need_dx {
        Vec::new()
    } else {
        vec![0.0; k * hw]
    };
    for n in 0..g.n {
        for grp in 0..g.attrs.groups {
            let dyg = &dy[(n * g.c_out + grp * cout_g) * hw..][..cout_g * hw];
            let wg = &wt[grp * cout_g * k..][..cout_g * k];
            if let Some(dw) = dw.as_deref_mut() {
                let b: &[f64] = if pointwise {
                    &x[(n * g.c_in + grp * cin_g) * hw..][..cin_g * hw]
                } else {
                    im2col(g, x, n, grp, &mut col);
                    &col
                };
                // dW (cout_g x k) += dY (cout_g x hw) * col^T (hw x k)
                let c = &mut dw[grp * cout_g * k..][..cout_g * k];
                gemm(cout_g, hw, k, dyg, hw, 1, b, 1, hw, 1.0, c);
            }
            if let Some(dx) = dx.as_deref_mut() {
                // dcol (k x hw) = W^T (k x cout_g) * dY (cout_g x hw)
                if pointwise {
                    let c = &mut dx[(n * g.c_in + grp * cin_g) * hw..][..cin_g * hw];
                    gemm(k, cout_g, hw, wg, 1, k, dyg, hw, 1, 1.0, c);
                } else {
                    gemm(k, cout_g, hw, wg, 1, k, dyg, hw, 1, 0.0, &mut dcol);
                    col2im_add(g, &dcol, n, grp, dx);
                }
            }
        }
    }
    (dx, dw)
}

fn depthwise_forward(g: &ConvGeom, x: &[f64], wt: &[f64], out: &mut [f64]) {
    let a = g.attrs;
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    for n in 0..g.n {
        for c in 0..g.c_in {
            let plane = &x[(n * g.c_in + c) * h * w..][..h * w];
            let kern = &wt[c * g.kh * g.kw..][..g.kh * g.kw];
            let dst = &mut out[(n * g.c_out + c) * ho * wo..][..ho * wo];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let kv = kern[i * g.kw + j];
                    for oy in 0..ho {
                        let iy = (oy * a.stride + i * a.dilation) as isize - a.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let row = &mut dst[oy * wo..][..wo];
                        for (ox, o) in row.iter_mut().enumerate() {
                            let ix = (ox * a.stride + j * a.dilation) as isize - a.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *o += kv * src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let a = g.attrs;
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    for n in 0..g.n {
        for c in 0..g.c_in {
            let plane = &x[(n * g.c_in + c) * h * w..][..h * w];
            let dyp = &dy[(n * g.c_out + c) * ho * wo..][..ho * wo];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let kidx = c * g.kh * g.kw + i * g.kw + j;
                    let kv = wt[kidx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * a.stride + i * a.dilation) as isize - a.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..wo {
                            let ix = (ox * a.stride + j * a.dilation) as isize - a.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ix = ix as usize;
                            let gv = dyp[oy * wo + ox];
                            acc += gv * plane[iy * w + ix];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[(n * g.c_in + c) * h * w + iy * w + ix] += kv * gv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[kidx] += acc;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_geom(x: &[usize], wt: &[usize], attrs: ConvAttrs) -> Result<ConvGeom, String> {
    if x.len() != 4 || wt.len() != 4 {
        return Err("conv2d expects 4-d input and kernel".into());
    }
    if attrs.groups == 0 || attrs.stride == 0 || attrs.dilation == 0 {
        return Err("groups, stride and dilation must be positive".into());
    }
    let (n, c_in, h, w) = (x[0], x[1], x[2], x[3]);
    let (c_out, cin_g, kh, kw) = (wt[0], wt[1], wt[2], wt[3]);
    if c_in % attrs.groups != 0 || c_out % attrs.groups != 0 {
        return Err(format!(
            "groups={} must divide input channels {} and output channels {}",
            attrs.groups, c_in, c_out
        ));
    }
    if cin_g != c_in / attrs.groups {
        return Err(format!(
            "kernel expects {} channels per group, input provides {}",
            cin_g,
            c_in / attrs.groups
        ));
    }
    let ho = attrs
        .out_extent(h, kh)
        .ok_or_else(|| format!("input height {h} below kernel support"))?;
    let wo = attrs
        .out_extent(w, kw)
        .ok_or_else(|| format!("input width {w} below kernel support"))?;
    Ok(ConvGeom {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        ho,
        wo,
        attrs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolAttrs {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolAttrs {
    pub fn same3(stride: usize) -> Self {
        Self {
            kernel: 3,
            stride,
            padding: 1,
        }
    }

    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            None
        } else {
            Some((padded - self.kernel) / self.stride + 1)
        }
    }
}

/// Max pooling over valid (unpadded) positions; returns output and flat argmax indices.
pub(crate) fn max_pool_forward(
    shape: &[usize],
    x: &[f64],
    p: PoolAttrs,
    ho: usize,
    wo: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; nc * ho * wo];
    let mut arg = vec![0usize; nc * ho * wo];
    for pl in 0..nc {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut bi = usize::MAX;
                for i in 0..p.kernel {
                    let iy = (oy * p.stride + i) as isize - p.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for j in 0..p.kernel {
                        let ix = (ox * p.stride + j) as isize - p.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if x[idx] > best || bi == usize::MAX {
                            best = x[idx];
                            bi = idx;
                        }
                    }
                }
                let o = (pl * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = bi;
            }
        }
    }
    (out, arg)
}

/// Average pooling that divides by the number of valid (unpadded) positions.
pub(crate) fn avg_pool_forward(
    shape: &[usize],
    x: &[f64],
    p: PoolAttrs,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; nc * ho * wo];
    for pl in 0..nc {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let (mut s, mut cnt) = (0.0, 0usize);
                for_window(p, oy, ox, h, w, |iy, ix| {
                    s += x[base + iy * w + ix];
                    cnt += 1;
                });
                out[(pl * ho + oy) * wo + ox] = s / cnt as f64;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(
    shape: &[usize],
    dy: &[f64],
    p: PoolAttrs,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let mut dx = vec![0.0; nc * h * w];
    for pl in 0..nc {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut cnt = 0usize;
                for_window(p, oy, ox, h, w, |_, _| cnt += 1);
                let g = dy[(pl * ho + oy) * wo + ox] / cnt as f64;
                for_window(p, oy, ox, h, w, |iy, ix| dx[base + iy * w + ix] += g);
            }
        }
    }
    dx
}

fn for_window(
    p: PoolAttrs,
    oy: usize,
    ox: usize,
    h: usize,
    w: usize,
    mut f: impl FnMut(usize, usize),
) {
    for i in 0..p.kernel {
        let iy = (oy * p.stride + i) as isize - p.padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for j in 0..p.kernel {
            let ix = (ox * p.stride + j) as isize - p.padding as isize;
            if ix < 0 || ix >= w as isize {
                continue;
            }
            f(iy as usize, ix as usize);
        }
    }
}

/// Per-channel batch statistics over `(N, H, W)`; variance is biased.
pub(crate) fn channel_moments(shape: &[usize], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..n {
            v += x[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|t| (t - mu) * (t - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

pub(crate) fn channel_affine(
    shape: &[usize],
    x: &[f64],
    mean: &[f64],
    invstd: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let (n, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (mu, is, ga, be) = (mean[ch], invstd[ch], gamma[ch], beta[ch]);
            for (o, v) in out[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                *o = ga * (v - mu) * is + be;
            }
        }
    }
    out
}

/// Batchnorm backward. `batch_stats` selects the train-mode formula, which
/// differentiates through the batch mean and variance.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward(
    shape: &[usize],
    x: &[f64],
    dy: &[f64],
    mean: &[f64],
    invstd: &[f64],
    gamma: &[f64],
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let m = (n * hw) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mu, is) = (mean[ch], invstd[ch]);
        let (mut sdy, mut sdyx) = (0.0, 0.0);
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for (g, v) in dy[off..off + hw].iter().zip(&x[off..off + hw]) {
                sdy += g;
                sdyx += g * (v - mu) * is;
            }
        }
        dgamma[ch] = sdyx;
        dbeta[ch] = sdy;
        let k = gamma[ch] * is;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = if batch_stats {
                    let xhat = (x[i] - mu) * is;
                    k * (dy[i] - sdy / m - xhat * sdyx / m)
                } else {
                    k * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Group normalization forward: returns output plus per-(sample, group) mean and inverse std.
pub(crate) fn group_norm_forward(
    shape: &[usize],
    x: &[f64],
    groups: usize,
    eps: f64,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let cg = c / groups;
    let len = cg * hw;
    let mut out = vec![0.0; x.len()];
    let mut means = vec![0.0; n * groups];
    let mut invstds = vec![0.0; n * groups];
    for b in 0..n {
        for g in 0..groups {
            let off = (b * c + g * cg) * hw;
            let seg = &x[off..off + len];
            let mu = seg.iter().sum::<f64>() / len as f64;
            let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / len as f64;
            let is = 1.0 / (var + eps).sqrt();
            means[b * groups + g] = mu;
            invstds[b * groups + g] = is;
            for ci in 0..cg {
                let ch = g * cg + ci;
                for k in 0..hw {
                    let i = off + ci * hw + k;
                    out[i] = gamma[ch] * (x[i] - mu) * is + beta[ch];
                }
            }
        }
    }
    (out, means, invstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    shape: &[usize],
    x: &[f64],
    dy: &[f64],
    groups: usize,
    means: &[f64],
    invstds: &[f64],
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let cg = c / groups;
    let len = (cg * hw) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for g in 0..groups {
            let (mu, is) = (means[b * groups + g], invstds[b * groups + g]);
            let off = (b * c + g * cg) * hw;
            let (mut s1, mut s2) = (0.0, 0.0);
            for ci in 0..cg {
                let ch = g * cg + ci;
                for k in 0..hw {
                    let i = off + ci * hw + k;
                    let xhat = (x[i] - mu) * is;
                    let dxhat = dy[i] * gamma[ch];
                    dgamma[ch] += dy[i] * xhat;
                    dbeta[ch] += dy[i];
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                }
            }
            for ci in 0..cg {
                let ch = g * cg + ci;
                for k in 0..hw {
                    let i = off + ci * hw + k;
                    let xhat = (x[i] - mu) * is;
                    let dxhat = dy[i] * gamma[ch];
                    dx[i] = is * (dxhat - s1 / len - xhat * s2 / len);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(shape: &[usize], axis: usize, x: &[f64], log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mx = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|k| (x[at(k)] - mx).exp()).sum();
            if log {
                let lz = z.ln();
                for k in 0..len {
                    out[at(k)] = x[at(k)] - mx - lz;
                }
            } else {
                for k in 0..len {
                    out[at(k)] = (x[at(k)] - mx).exp() / z;
                }
            }
        }
    }
    out
}

pub(crate) fn softmax_backward(
    shape: &[usize],
    axis: usize,
    y: &[f64],
    dy: &[f64],
    log: bool,
) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            if log {
                let s: f64 = (0..len).map(|k| dy[at(k)]).sum();
                for k in 0..len {
                    dx[at(k)] = dy[at(k)] - y[at(k)].exp() * s;
                }
            } else {
                let s: f64 = (0..len).map(|k| dy[at(k)] * y[at(k)]).sum();
                for k in 0..len {
                    dx[at(k)] = y[at(k)] * (dy[at(k)] - s);
                }
            }
        }
    }
    dx
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, k, 1, b, n, 1, 0.0, &mut c);
    c
}

/// `a^T b` where `a` is `(k x m)` and `b` is `(k x n)`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, 1, m, b, n, 1, 0.0, &mut c);
    c
}

/// `a b^T` where `a` is `(m x k)` and `b` is `(n x k)`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, k, 1, b, 1, k, 0.0, &mut c);
    c
}

/// Index map from each element of `out_shape` to the broadcast source of shape `src_shape`
/// (numpy rules, right-aligned).
pub(crate) fn broadcast_index(out_shape: &[usize], src_shape: &[usize]) -> Option<Vec<usize>> {
    if src_shape.len() > out_shape.len() {
        return None;
    }
    let off = out_shape.len() - src_shape.len();
    let mut strides = vec![0usize; out_shape.len()];
    let mut acc = 1;
    for d in (0..src_shape.len()).rev() {
        let (s, o) = (src_shape[d], out_shape[d + off]);
        if s != o && s != 1 {
            return None;
        }
        strides[d + off] = if s == 1 { 0 } else { acc };
        acc *= s;
    }
    let total: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; out_shape.len()];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            cur -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Some(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_index_per_channel() {
        // (2,3,2) <- (3,1)
        let idx = broadcast_index(&[2, 3, 2], &[3, 1]).unwrap();
        assert_eq!(idx, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
        assert!(broadcast_index(&[2, 3], &[2]).is_none());
    }

    #[test]
    fn same_padding_extents() {
        let a = ConvAttrs::same(3, 1, 1, 1);
        assert_eq!(a.out_extent(8, 3), Some(8));
        let a = ConvAttrs::same(5, 2, 2, 1);
        assert_eq!(a.out_extent(16, 5), Some(8));
        assert_eq!(PoolAttrs::same3(2).out_extent(7), Some(4));
    }

    #[test]
    fn im2col_conv_matches_direct_sum() {
        // one 3x3 conv, 2 in / 3 out channels, stride 2 pad 1, compared with a naive loop
        let geom = conv_geom(
            &[1, 2, 5, 5],
            &[3, 2, 3, 3],
            ConvAttrs {
                stride: 2,
                padding: 1,
                dilation: 1,
                groups: 1,
            },
        )
        .unwrap();
        let x: Vec<f64> = (0..50).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..54).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let y = conv2d_forward(&geom, &x, &w);
        assert_eq!(y.len(), 3 * 3 * 3);
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for i in 0..3 {
                            for j in 0..3 {
                                let iy = (oy * 2 + i) as isize - 1;
                                let ix = (ox * 2 + j) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += w[((co * 2 + ci) * 3 + i) * 3 + j]
                                        * x[(ci * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    assert_eq!(y[(co * 3 + oy) * 3 + ox], s);
                }
            }
        }
    }
}
