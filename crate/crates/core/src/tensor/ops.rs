//! Pure forward kernels and their vector-Jacobian products.
//!
//! Reductions run in `f64`; convolutions and matrix products go through
//! `matrixmultiply`.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// `floor((len + 2*padding - dilation*(kernel-1) - 1)/stride) + 1`, rejecting
/// windows that do not fit.
pub fn output_extent(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return None;
    }
    let span = dilation * (kernel - 1) + 1;
    let padded = len + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// C[m,n] (+)= A[m,k] · B[k,n] with arbitrary strides on A and B.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: slice lengths cover every index addressed by the strides below;
    // callers pass dense row-major buffers or their transposed views.
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

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("inner dimension: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), k, 1, b.data(), n, 1, &mut out, false);
    Ok(Tensor::from_raw(vec![m, n], out))
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(input: &[usize], weight: &[usize], p: &ConvParams) -> Result<ConvGeom> {
    if input.len() != 4 {
        return Err(Error::shape("conv2d", format!("input must be NCHW, got {input:?}")));
    }
    if weight.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("weight must be [Cout,Cin/groups,kh,kw], got {weight:?}"),
        ));
    }
    if p.groups == 0 || p.stride == 0 || p.dilation == 0 {
        return Err(Error::Invalid(format!(
            "conv2d: stride, dilation and groups must be >= 1, got {p:?}"
        )));
    }
    let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
    let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    if cin % p.groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("Cin={cin} not divisible by groups={}", p.groups),
        ));
    }
    if cout % p.groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("Cout={cout} not divisible by groups={}", p.groups),
        ));
    }
    if cin_g != cin / p.groups {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight dim 1 is {cin_g}, expected Cin/groups = {}",
                cin / p.groups
            ),
        ));
    }
    let oh = output_extent(h, kh, p.stride, p.padding, p.dilation);
    let ow = output_extent(w, kw, p.stride, p.padding, p.dilation);
    let (oh, ow) = match (oh, ow) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::OutputExtent {
                op: "conv2d",
                detail: format!("input {h}x{w}, kernel {kh}x{kw}, {p:?}"),
            })
        }
    };
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g: cout / p.groups,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Unfolds channels `[c0, c0+g.cin_g)` of sample `img` into `cols`
/// with layout `[cin_g*kh*kw, oh*ow]`.
fn im2col(x: &[f64], g: &ConvGeom, p: &ConvParams, img: usize, c0: usize, cols: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.cin_g {
        let plane = &x[((img * g.cin) + c0 + c) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * p.stride + ky * p.dilation) as isize - p.padding as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * p.stride + kx * p.dilation) as isize - p.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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

fn col2im(cols: &[f64], g: &ConvGeom, p: &ConvParams, img: usize, c0: usize, dx: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.cin_g {
        let plane = &mut dx[((img * g.cin) + c0 + c) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * p.stride + ky * p.dilation) as isize - p.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * p.stride + kx * p.dilation) as isize - p.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation over NCHW input.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    p: ConvParams,
) -> Result<Tensor> {
    let g = conv_geometry(input.shape(), weight.shape(), &p)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{}], got {:?}", g.cout, b.shape()),
            ));
        }
    }
    let ohw = g.oh * g.ow;
    let kdim = g.cin_g * g.kh * g.kw;
    let mut cols = vec![0.0; kdim * ohw];
    let mut out = vec![0.0; g.n * g.cout * ohw];
    let wd = weight.data();
    for img in 0..g.n {
        for grp in 0..p.groups {
            im2col(input.data(), &g, &p, img, grp * g.cin_g, &mut cols);
            let w_g = &wd[grp * g.cout_g * kdim..];
            let o = &mut out[(img * g.cout + grp * g.cout_g) * ohw..][..g.cout_g * ohw];
            gemm(g.cout_g, kdim, ohw, w_g, kdim, 1, &cols, ohw, 1, o, false);
        }
        if let Some(b) = bias {
            for co in 0..g.cout {
                let bv = b.data()[co];
                out[(img * g.cout + co) * ohw..][..ohw]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_raw(vec![g.n, g.cout, g.oh, g.ow], out).ensure_finite("conv2d")
}

pub struct ConvGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    p: ConvParams,
) -> Result<ConvGrads> {
    let g = conv_geometry(input.shape(), weight.shape(), &p)?;
    let ohw = g.oh * g.ow;
    let kdim = g.cin_g * g.kh * g.kw;
    let mut cols = vec![0.0; kdim * ohw];
    let mut dcols = vec![0.0; kdim * ohw];
    let mut dx = vec![0.0; input.numel()];
    let mut dw = vec![0.0; weight.numel()];
    let mut db = vec![0.0; g.cout];
    let wd = weight.data();
    for img in 0..g.n {
        for grp in 0..p.groups {
            let c0 = grp * g.cin_g;
            im2col(input.data(), &g, &p, img, c0, &mut cols);
            let dy = &grad_out[(img * g.cout + grp * g.cout_g) * ohw..][..g.cout_g * ohw];
            // dW_g += dY_g · colsᵀ
            let dw_g = &mut dw[grp * g.cout_g * kdim..][..g.cout_g * kdim];
            gemm(g.cout_g, ohw, kdim, dy, ohw, 1, &cols, 1, ohw, dw_g, true);
            // dcols = W_gᵀ · dY_g
            let w_g = &wd[grp * g.cout_g * kdim..];
            gemm(kdim, g.cout_g, ohw, w_g, 1, kdim, dy, ohw, 1, &mut dcols, false);
            col2im(&dcols, &g, &p, img, c0, &mut dx);
        }
        for co in 0..g.cout {
            db[co] += grad_out[(img * g.cout + co) * ohw..][..ohw].iter().sum::<f64>();
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

pub struct BatchNormOutput {
    pub output: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
    /// Normalized input `(x - mean)/sqrt(var + eps)`, kept for the backward pass.
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn nchw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.ndim() != 4 {
        return Err(Error::shape(op, format!("expected NCHW input, got {:?}", t.shape())));
    }
    let s = t.shape();
    Ok((s[0], s[1], s[2] * s[3]))
}

/// Per-channel batch statistics over N, H, W (biased variance, two passes).
pub fn channel_stats(input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, hw) = nchw("batchnorm2d", input)?;
    let count = (n * hw) as f64;
    let x = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for img in 0..n {
            s += x[(img * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        let mu = s / count;
        let mut ss = 0.0;
        for img in 0..n {
            ss += x[(img * c + ch) * hw..][..hw]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / count;
    }
    Ok((mean, var))
}

pub fn batchnorm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<BatchNormOutput> {
    let (n, c, hw) = nchw("batchnorm2d", input)?;
    if n * hw < 2 {
        return Err(Error::Invalid(format!(
            "batchnorm2d: degenerate batch, N*H*W = {} < 2",
            n * hw
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Invalid("batchnorm2d: eps must be > 0".into()));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm2d",
            format!(
                "gamma/beta must be [{c}], got {:?}/{:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let (mean, var) = channel_stats(input)?;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let x = input.data();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let (g, b, mu, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in base..base + hw {
                let xh = (x[i] - mu) * is;
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    Ok(BatchNormOutput {
        output: Tensor::from_raw(input.shape().to_vec(), out).ensure_finite("batchnorm2d")?,
        mean: Tensor::from_raw(vec![c], mean),
        var: Tensor::from_raw(vec![c], var),
        xhat,
        inv_std,
    })
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm2d_backward(
    shape: &[usize],
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            for i in base..base + hw {
                dbeta[ch] += grad_out[i];
                dgamma[ch] += grad_out[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![0.0; grad_out.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let k = gamma[ch] * inv_std[ch] / m;
            for i in base..base + hw {
                dx[i] = k * (m * grad_out[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::shape(
            "linear",
            format!("input {:?} vs weight {:?}: in-features differ", x.shape(), w.shape()),
        ));
    }
    let (n, fin, fout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let mut out = vec![0.0; n * fout];
    gemm(n, fin, fout, x.data(), fin, 1, w.data(), 1, fin, &mut out, false);
    if let Some(b) = b {
        if b.shape() != [fout] {
            return Err(Error::shape(
                "linear",
                format!("bias must be [{fout}], got {:?}", b.shape()),
            ));
        }
        for row in out.chunks_mut(fout) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
    }
    Tensor::from_raw(vec![n, fout], out).ensure_finite("linear")
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

fn pool_geometry(op: &'static str, x: &Tensor, p: &PoolParams) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.ndim() != 4 {
        return Err(Error::shape(op, format!("expected NCHW input, got {:?}", x.shape())));
    }
    if p.padding * 2 > p.kernel {
        return Err(Error::Invalid(format!(
            "{op}: padding {} exceeds half the kernel {}",
            p.padding, p.kernel
        )));
    }
    let s = x.shape();
    let oh = output_extent(s[2], p.kernel, p.stride, p.padding, 1);
    let ow = output_extent(s[3], p.kernel, p.stride, p.padding, 1);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok((s[0], s[1], s[2], s[3], oh, ow)),
        _ => Err(Error::OutputExtent {
            op,
            detail: format!("input {}x{}, {p:?}", s[2], s[3]),
        }),
    }
}

/// Max pooling; also returns, per output element, the flat input index of the
/// selected maximum (first occurrence on ties).
pub fn max_pool2d(x: &Tensor, p: PoolParams) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w, oh, ow) = pool_geometry("max_pool2d", x, &p)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..p.kernel {
                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..p.kernel {
                        let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_raw(vec![n, c, oh, ow], out), arg))
}

/// Average pooling; padded positions count toward the divisor.
pub fn avg_pool2d(x: &Tensor, p: PoolParams) -> Result<Tensor> {
    let (n, c, h, w, oh, ow) = pool_geometry("avg_pool2d", x, &p)?;
    let xd = x.data();
    let norm = 1.0 / (p.kernel * p.kernel) as f64;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ky in 0..p.kernel {
                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..p.kernel {
                        let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            s += xd[base + iy as usize * w + ix as usize];
                        }
                    }
                }
                out.push(s * norm);
            }
        }
    }
    Ok(Tensor::from_raw(vec![n, c, oh, ow], out))
}

pub fn avg_pool2d_backward(shape: &[usize], p: PoolParams, grad_out: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = output_extent(h, p.kernel, p.stride, p.padding, 1).unwrap_or(0);
    let ow = output_extent(w, p.kernel, p.stride, p.padding, 1).unwrap_or(0);
    let norm = 1.0 / (p.kernel * p.kernel) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(plane * oh + oy) * ow + ox] * norm;
                for ky in 0..p.kernel {
                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..p.kernel {
                        let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + iy as usize * w + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `[N,C,H,W] -> [N,C]`
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, hw) = nchw("global_avg_pool", x)?;
    let out = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Ok(Tensor::from_raw(vec![n, c], out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("operands differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_raw(a.shape().to_vec(), data).ensure_finite("add")
}

/// Concatenation along axis 1 (channels for NCHW, columns for matrices).
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("concat: no inputs".into()))?;
    if first.ndim() < 2 {
        return Err(Error::shape("concat", "inputs need at least 2 dims"));
    }
    let outer = first.shape()[0];
    let inner: usize = first.shape()[2..].iter().product();
    let mut axis_total = 0;
    for t in parts {
        if t.ndim() != first.ndim() || t.shape()[0] != outer || t.shape()[2..] != first.shape()[2..] {
            return Err(Error::shape(
                "concat",
                format!(
                    "all dims except 1 must agree: {:?} vs {:?}",
                    first.shape(),
                    t.shape()
                ),
            ));
        }
        axis_total += t.shape()[1];
    }
    let mut out = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for t in parts {
            let chunk = t.shape()[1] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = axis_total;
    Ok(Tensor::from_raw(shape, out))
}

/// Splits a gradient for [`concat`] back into its parts.
pub fn concat_backward(part_shapes: &[Vec<usize>], grad_out: &[f64]) -> Vec<Vec<f64>> {
    let outer = part_shapes[0][0];
    let inner: usize = part_shapes[0][2..].iter().product();
    let mut grads: Vec<Vec<f64>> = part_shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (g, s) in grads.iter_mut().zip(part_shapes) {
            let chunk = s[1] * inner;
            g.extend_from_slice(&grad_out[pos..pos + chunk]);
            pos += chunk;
        }
    }
    grads
}

/// Mean softmax cross-entropy over the batch; also returns the softmax
/// probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let k = logits.shape()[1];
    let mut probs = vec![0.0; logits.numel()];
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        if y >= k {
            return Err(Error::Invalid(format!("label {y} out of range for {k} classes")));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - row[y];
        for (j, v) in row.iter().enumerate() {
            probs[i * k + j] = (v - lse).exp();
        }
    }
    let loss = loss / labels.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy".into()));
    }
    Ok((loss, probs))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[logits.ndim() - 1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, p: ConvParams) -> Tensor {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let cout_g = cout / p.groups;
        let oh = (h + 2 * p.padding - p.dilation * (kh - 1) - 1) / p.stride + 1;
        let ow = (wd + 2 * p.padding - p.dilation * (kw - 1) - 1) / p.stride + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for img in 0..n {
            for co in 0..cout {
                let grp = co / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin_g {
                            let c = grp * cin_g + ci;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.stride + ky * p.dilation) as isize
                                        - p.padding as isize;
                                    let ix = (ox * p.stride + kx * p.dilation) as isize
                                        - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((img * cin + c) * h + iy as usize) * wd
                                        + ix as usize]
                                        * w.data()[((co * cin_g + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((img * cout + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        Tensor::from_raw(vec![n, cout, oh, ow], out)
    }

    #[test]
    fn conv_all_ones_sums_to_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, ConvParams::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 1, 5, 4]);
        let w = Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 1.0 } else { 0.0 });
        let p = ConvParams {
            padding: 1,
            ..Default::default()
        };
        let y = conv2d(&x, &w, None, p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let p = ConvParams {
            stride: 2,
            ..Default::default()
        };
        let y = conv2d(&x, &w, Some(&b), p).unwrap();
        let o = conv_oracle(&x, &w, Some(&b), p);
        assert_eq!(y.shape(), o.shape());
        assert!(y.max_abs_diff(&o) < 1e-6);

        for &(groups, dilation, padding, stride) in
            &[(1, 2, 2, 1), (2, 1, 1, 1), (4, 1, 1, 2), (4, 2, 0, 1)]
        {
            let x = rand_tensor(&mut rng, &[2, 4, 7, 6]);
            let w = rand_tensor(&mut rng, &[4, 4 / groups, 3, 3]);
            let p = ConvParams {
                stride,
                padding,
                dilation,
                groups,
            };
            let y = conv2d(&x, &w, None, p).unwrap();
            assert!(y.max_abs_diff(&conv_oracle(&x, &w, None, p)) < 1e-9);
        }
    }

    #[test]
    fn depthwise_equals_independent_channel_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 3;
        let x = rand_tensor(&mut rng, &[2, c, 6, 6]);
        let w = rand_tensor(&mut rng, &[c, 1, 3, 3]);
        let p = ConvParams {
            padding: 1,
            groups: c,
            ..Default::default()
        };
        let y = conv2d(&x, &w, None, p).unwrap();
        for ch in 0..c {
            // channel `ch` alone through a single-channel conv
            let xc = Tensor::from_fn(&[2, 1, 6, 6], |i| {
                let (img, rest) = (i / 36, i % 36);
                x.data()[(img * c + ch) * 36 + rest]
            });
            let wc = Tensor::from_raw(vec![1, 1, 3, 3], w.data()[ch * 9..(ch + 1) * 9].to_vec());
            let yc = conv2d(&xc, &wc, None, ConvParams { groups: 1, ..p }).unwrap();
            for img in 0..2 {
                let got = &y.data()[(img * c + ch) * 36..][..36];
                assert_eq!(got, &yc.data()[img * 36..][..36]);
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 2, 3, 3]);
        let err = conv2d(&x, &w, None, ConvParams::default()).unwrap_err();
        assert!(err.to_string().contains("weight dim 1"), "{err}");
        let w = Tensor::zeros(&[2, 3, 5, 5]);
        assert!(matches!(
            conv2d(&x, &w, None, ConvParams::default()),
            Err(Error::OutputExtent { .. })
        ));
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        let p = ConvParams {
            groups: 2,
            ..Default::default()
        };
        assert!(conv2d(&x, &w, None, p).unwrap_err().to_string().contains("Cin=3"));
    }

    #[test]
    fn output_extent_matches_window_enumeration() {
        for len in 1..10 {
            for k in 1..5 {
                for s in 1..4 {
                    for p in 0..3 {
                        for d in 1..4 {
                            // count window starts whose dilated window fits the padded input
                            let padded = (len + 2 * p) as isize;
                            let mut count = 0;
                            let mut start = 0isize;
                            while start + ((d * (k - 1)) as isize) < padded {
                                count += 1;
                                start += s as isize;
                            }
                            let got = output_extent(len, k, s, p, d);
                            if count == 0 {
                                assert_eq!(got, None);
                            } else {
                                assert_eq!(got, Some(count), "len={len} k={k} s={s} p={p} d={d}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let x = Tensor::from_fn(&[2, 2, 2, 2], |i| if (i / 4) % 2 == 0 { 3.0 } else { -1.0 });
        let g = Tensor::new(vec![2], vec![2.0, 5.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.25, -0.5]).unwrap();
        let out = batchnorm2d(&x, &g, &b, 1e-5).unwrap();
        for (i, v) in out.output.data().iter().enumerate() {
            let expect = if (i / 4) % 2 == 0 { 0.25 } else { -0.5 };
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn batchnorm_identity_normalization() {
        let eps = 1e-5;
        // per channel: values ±sqrt(1-eps) so mean 0 and variance 1-eps
        let a = (1.0f64 - eps).sqrt();
        let x = Tensor::from_fn(&[2, 1, 1, 2], |i| if i % 2 == 0 { a } else { -a });
        let out = batchnorm2d(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), eps).unwrap();
        assert!(out.output.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn batchnorm_moments_against_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = 1e-5;
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = Tensor::zeros(&[3]);
        let out = batchnorm2d(&x, &gamma, &beta, eps).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| x.data()[(n * 3 + c) * 16..][..16].to_vec())
                .collect();
            let mu = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 32.0;
            let outs: Vec<f64> = (0..2)
                .flat_map(|n| out.output.data()[(n * 3 + c) * 16..][..16].to_vec())
                .collect();
            let omu = outs.iter().sum::<f64>() / 32.0;
            let ovar = outs.iter().map(|v| (v - omu).powi(2)).sum::<f64>() / 32.0;
            let g = gamma.data()[c];
            assert!(omu.abs() < 1e-6);
            assert!((ovar - g * g * var / (var + eps)).abs() < 1e-9);
            assert!((out.var.data()[c] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_rejects_degenerate_batch() {
        let x = Tensor::zeros(&[1, 2, 1, 1]);
        assert!(batchnorm2d(&x, &Tensor::zeros(&[2]), &Tensor::zeros(&[2]), 1e-5).is_err());
    }

    #[test]
    fn pools() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let p = PoolParams {
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        let (m, arg) = max_pool2d(&x, p).unwrap();
        assert_eq!(m.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
        let a = avg_pool2d(&x, p).unwrap();
        assert_eq!(a.data(), &[2.5, 4.5, 10.5, 12.5]);
        let g = global_avg_pool(&x).unwrap();
        assert_eq!(g.data(), &[7.5]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(probs.iter().all(|p| (p - 0.25).abs() < 1e-12));
    }
}
