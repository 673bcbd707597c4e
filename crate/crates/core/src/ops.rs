//! Forward kernels and their adjoints on plain tensors.
//!
//! The MAC counter is charged only by `matmul`, `conv3d` (and their
//! adjoints) and by the attention kernels, which are built on `matmul`.

use crate::error::{Error, Result};
use crate::mac;
use crate::tensor::Tensor;

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects rank {rank}"),
        });
    }
    Ok(())
}

/// `[m×k] · [k×n] → [m×n]`, charging `m·n·k` MACs.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let out = matmul_raw(a.data(), b.data(), m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    mac::record((m * n * k) as u64);
    out
}

/// `a · bᵀ` for row-major `a: [m×k]`, `b: [n×k]`.
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    mac::record((m * n * k) as u64);
    out
}

/// `aᵀ · b` for row-major `a: [k×m]`, `b: [k×n]`.
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            for (o, &b_pj) in out[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *o += a_pi * b_pj;
            }
        }
    }
    mac::record((m * n * k) as u64);
    out
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    require_rank("transpose", a, 2)?;
    permute(a, &[1, 0])
}

/// Gradients of `matmul` with respect to both operands.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let ga = matmul_nt_raw(grad.data(), b.data(), m, n, k);
    let gb = matmul_tn_raw(a.data(), grad.data(), m, k, n);
    (
        Tensor::from_parts(vec![m, k], ga),
        Tensor::from_parts(vec![k, n], gb),
    )
}

fn last_dim(op: &'static str, x: &Tensor) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d >= 1 => Ok(d),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("{op} needs a last axis"),
        }),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax over the last axis, stabilised by subtracting the slice maximum.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let d = last_dim("softmax_lastdim", x)?;
    let mut out = x.to_vec();
    out.chunks_exact_mut(d).for_each(softmax_in_place);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn softmax_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    let d = *y.shape().last().unwrap();
    let mut out = vec![0.0; y.len()];
    for ((o, yr), gr) in out
        .chunks_exact_mut(d)
        .zip(y.data().chunks_exact(d))
        .zip(grad.data().chunks_exact(d))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
            *o = yi * (gi - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// Normalises each last-axis slice to zero mean and unit variance
/// (population variance, `eps` added before the square root).
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_with_stats(x, eps)?.0)
}

/// Returns the normalised tensor and the per-slice inverse std.
pub(crate) fn layer_norm_with_stats(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let d = last_dim("layer_norm", x)?;
    let mut out = x.to_vec();
    let mut inv_std = Vec::with_capacity(x.len() / d);
    for row in out.chunks_exact_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), inv_std))
}

pub(crate) fn layer_norm_backward(xhat: &Tensor, inv_std: &[f64], grad: &Tensor) -> Tensor {
    let d = *xhat.shape().last().unwrap();
    let n = d as f64;
    let mut out = vec![0.0; xhat.len()];
    for (((o, xr), gr), &inv) in out
        .chunks_exact_mut(d)
        .zip(xhat.data().chunks_exact(d))
        .zip(grad.data().chunks_exact(d))
        .zip(inv_std)
    {
        let g_mean = gr.iter().sum::<f64>() / n;
        let gx_mean = gr.iter().zip(xr).map(|(g, x)| g * x).sum::<f64>() / n;
        for ((o, &g), &xh) in o.iter_mut().zip(gr).zip(xr) {
            *o = inv * (g - g_mean - xh * gx_mean);
        }
    }
    Tensor::from_parts(xhat.shape().to_vec(), out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Zero-padded "same" cross-correlation.
///
/// `x: [C_in×T×H×W]`, `kernel: [C_out×C_in×kt×kh×kw]` with odd extents,
/// optional `bias: [C_out]`. Charges `C_out·C_in·kt·kh·kw·T·H·W` MACs.
pub fn conv3d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let geo = ConvGeometry::new(x, kernel, bias)?;
    let mut out = vec![0.0; geo.c_out * geo.t * geo.h * geo.w];
    if let Some(b) = bias {
        let plane = geo.t * geo.h * geo.w;
        for (chunk, &bv) in out.chunks_exact_mut(plane).zip(b.data()) {
            chunk.fill(bv);
        }
    }
    geo.for_each_tap(|tap| {
        let wv = kernel.data()[tap.kernel];
        let xr = &x.data()[tap.x_row..];
        let orow = &mut out[tap.out_row..];
        for wpos in tap.lo..tap.hi {
            orow[wpos] += wv * xr[(wpos as isize + tap.shift) as usize];
        }
    });
    mac::record(geo.macs());
    Ok(Tensor::from_parts(
        vec![geo.c_out, geo.t, geo.h, geo.w],
        out,
    ))
}

/// Gradients of `conv3d` with respect to input, kernel and bias.
pub fn conv3d_backward(x: &Tensor, kernel: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let geo = ConvGeometry::new(x, kernel, None).expect("validated in forward");
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    let g = grad.data();
    geo.for_each_tap(|tap| {
        let wv = kernel.data()[tap.kernel];
        let xr = &x.data()[tap.x_row..];
        let gr = &g[tap.out_row..];
        let gxr = &mut gx[tap.x_row..];
        let mut acc = 0.0;
        for wpos in tap.lo..tap.hi {
            let src = (wpos as isize + tap.shift) as usize;
            acc += gr[wpos] * xr[src];
            gxr[src] += wv * gr[wpos];
        }
        gk[tap.kernel] += acc;
    });
    mac::record(2 * geo.macs());
    let plane = geo.t * geo.h * geo.w;
    let gb: Vec<f64> = g.chunks_exact(plane).map(|c| c.iter().sum()).collect();
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(kernel.shape().to_vec(), gk),
        Tensor::from_parts(vec![geo.c_out], gb),
    )
}

/// One kernel tap applied along one output row.
struct Tap {
    kernel: usize,
    x_row: usize,
    out_row: usize,
    /// Valid output column range.
    lo: usize,
    hi: usize,
    /// Input column = output column + shift.
    shift: isize,
}

struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeometry {
    fn new(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Self> {
        require_rank("conv3d input", x, 4)?;
        require_rank("conv3d kernel", kernel, 5)?;
        let (c_in, t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let k = kernel.shape();
        if k[1] != c_in {
            return Err(Error::shape("conv3d", x.shape(), k));
        }
        if k[2..].iter().any(|&e| e % 2 == 0) {
            return Err(Error::InvalidShape {
                shape: k.to_vec(),
                reason: "conv3d kernel extents must be odd for symmetric same padding".into(),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [k[0]] {
                return Err(Error::shape("conv3d bias", b.shape(), &k[..1]));
            }
        }
        Ok(Self {
            c_in,
            c_out: k[0],
            t,
            h,
            w,
            kt: k[2],
            kh: k[3],
            kw: k[4],
        })
    }

    fn macs(&self) -> u64 {
        (self.c_out * self.c_in * self.kt * self.kh * self.kw * self.t * self.h * self.w) as u64
    }

    /// Visits every (output row, kernel tap) pair with a non-empty overlap.
    fn for_each_tap(&self, mut f: impl FnMut(&Tap)) {
        let (pt, ph, pw) = (self.kt / 2, self.kh / 2, self.kw / 2);
        for o in 0..self.c_out {
            for i in 0..self.c_in {
                for dt in 0..self.kt {
                    for dh in 0..self.kh {
                        for dw in 0..self.kw {
                            let kidx = (((o * self.c_in + i) * self.kt + dt) * self.kh + dh)
                                * self.kw
                                + dw;
                            let shift = dw as isize - pw as isize;
                            let x_lo = pw.saturating_sub(dw);
                            let x_hi = (self.w + pw).saturating_sub(dw).min(self.w);
                            if x_lo >= x_hi {
                                continue;
                            }
                            for t in 0..self.t {
                                let ts = t as isize + dt as isize - pt as isize;
                                if ts < 0 || ts >= self.t as isize {
                                    continue;
                                }
                                for hh in 0..self.h {
                                    let hs = hh as isize + dh as isize - ph as isize;
                                    if hs < 0 || hs >= self.h as isize {
                                        continue;
                                    }
                                    let x_row = ((i * self.t + ts as usize) * self.h + hs as usize)
                                        * self.w;
                                    let out_row = ((o * self.t + t) * self.h + hh) * self.w;
                                    f(&Tap {
                                        kernel: kidx,
                                        x_row,
                                        out_row,
                                        lo: x_lo,
                                        hi: x_hi,
                                        shift,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 stride-2 spatial average pooling on `[C×T×H×W]` (floor on odd extents).
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    require_rank("avg_pool2", x, 4)?;
    let (c, t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h < 2 || w < 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "avg_pool2 needs H, W >= 2".into(),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * t * ho * wo);
    for plane in 0..c * t {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let p = base + 2 * i * w + 2 * j;
                out.push(0.25 * (xd[p] + xd[p + 1] + xd[p + w] + xd[p + w + 1]));
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, t, ho, wo], out))
}

pub(crate) fn avg_pool2_backward(input_shape: &[usize], grad: &Tensor) -> Tensor {
    let (c, t, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * t * h * w];
    let g = grad.data();
    for plane in 0..c * t {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let gv = 0.25 * g[(plane * ho + i) * wo + j];
                let p = base + 2 * i * w + 2 * j;
                out[p] += gv;
                out[p + 1] += gv;
                out[p + w] += gv;
                out[p + w + 1] += gv;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Mean over one axis; the axis is removed (a rank-1 input yields `[1]`).
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::invalid(format!(
            "mean_axis: axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = split_at_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let scale = 1.0 / len as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn mean_axis_backward(input_shape: &[usize], axis: usize, grad: &Tensor) -> Tensor {
    let (outer, len, inner) = split_at_axis(input_shape, axis);
    let scale = 1.0 / len as f64;
    let g = grad.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for _ in 0..len {
            out.extend(g[o * inner..(o + 1) * inner].iter().map(|v| v * scale));
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank
        || axes
            .iter()
            .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::invalid(format!(
            "permute: {axes:?} is not a permutation of {rank} axes"
        )));
    }
    let in_strides = x.strides();
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(xd[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Concatenates along axis 0.
pub fn concat0(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != b.rank() || a.shape()[1..] != b.shape()[1..] {
        return Err(Error::shape("concat0", a.shape(), b.shape()));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.to_vec();
    data.extend_from_slice(b.data());
    Ok(Tensor::from_parts(shape, data))
}

/// Repeats each axis-0 slice `times` times in place (`out[c] = x[c / times]`).
pub fn repeat0(x: &Tensor, times: usize) -> Result<Tensor> {
    if times == 0 {
        return Err(Error::invalid("repeat0: times must be >= 1"));
    }
    let inner = x.len() / x.shape()[0];
    let mut data = Vec::with_capacity(x.len() * times);
    for slice in x.data().chunks_exact(inner) {
        for _ in 0..times {
            data.extend_from_slice(slice);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] *= times;
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn repeat0_backward(input_shape: &[usize], times: usize, grad: &Tensor) -> Tensor {
    let inner: usize = input_shape[1..].iter().product();
    let mut out = vec![0.0; input_shape.iter().product()];
    for (c, dst) in out.chunks_exact_mut(inner).enumerate() {
        for r in 0..times {
            let src = &grad.data()[(c * times + r) * inner..(c * times + r + 1) * inner];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

/// How a smaller operand lines up against a larger one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    /// Operand shape equals the trailing axes (e.g. a bias over rows).
    Suffix,
    /// Operand shape equals the leading axes (e.g. a per-channel scale).
    Prefix,
}

impl Broadcast {
    pub(crate) fn check(self, x: &[usize], y: &[usize]) -> Result<()> {
        let ok = y.len() <= x.len()
            && match self {
                Broadcast::Suffix => x[x.len() - y.len()..] == *y,
                Broadcast::Prefix => x[..y.len()] == *y,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::shape("broadcast", x, y))
        }
    }

    /// Index into the broadcast operand for flat index `i` of the larger one.
    #[inline]
    pub(crate) fn index(self, i: usize, x_len: usize, y_len: usize) -> usize {
        match self {
            Broadcast::Suffix => i % y_len,
            Broadcast::Prefix => i / (x_len / y_len),
        }
    }

    /// Sums a full-size gradient down to the operand's shape.
    pub(crate) fn reduce(self, grad: &Tensor, y_shape: &[usize]) -> Tensor {
        let y_len: usize = y_shape.iter().product();
        let mut out = vec![0.0; y_len];
        let n = grad.len();
        for (i, g) in grad.data().iter().enumerate() {
            out[self.index(i, n, y_len)] += g;
        }
        Tensor::from_parts(y_shape.to_vec(), out)
    }
}

pub fn broadcast_zip(
    x: &Tensor,
    y: &Tensor,
    mode: Broadcast,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    mode.check(x.shape(), y.shape())?;
    let (n, m) = (x.len(), y.len());
    let yd = y.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| f(a, yd[mode.index(i, n, m)]))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Shifts channel group 0 forward in time and group 1 backward, by one
/// frame, zero-filling the vacated frames. `x: [C×T×H×W]`, `C` even.
pub fn temporal_shift(x: &Tensor) -> Result<Tensor> {
    shift_groups(x, false)
}

/// Adjoint of [`temporal_shift`].
pub(crate) fn temporal_shift_adjoint(x: &Tensor) -> Tensor {
    shift_groups(x, true).expect("validated in forward")
}

fn shift_groups(x: &Tensor, adjoint: bool) -> Result<Tensor> {
    require_rank("temporal_shift", x, 4)?;
    let (c, t) = (x.shape()[0], x.shape()[1]);
    if c % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "temporal_shift needs an even channel count".into(),
        });
    }
    let plane = x.shape()[2] * x.shape()[3];
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let forward = (ch < c / 2) != adjoint;
        for f in 0..t {
            let src = if forward {
                f.checked_sub(1)
            } else {
                Some(f + 1).filter(|&s| s < t)
            };
            if let Some(s) = src {
                let dst = (ch * t + f) * plane;
                let from = (ch * t + s) * plane;
                out[dst..dst + plane].copy_from_slice(&xd[from..from + plane]);
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Softmax cross-entropy of `logits: [n]` against class `target`.
/// Returns the loss and the softmax probabilities.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<(f64, Tensor)> {
    let n = logits.len();
    if target >= n {
        return Err(Error::invalid(format!(
            "cross_entropy: target {target} out of range for {n} classes"
        )));
    }
    let max = logits
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .data()
        .iter()
        .map(|v| (v - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    let probs = logits.map(|v| (v - lse).exp());
    Ok((lse - logits.data()[target], probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mac::MacCounter;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_cases() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x = t(&[2, 2], &[3.0, -1.0, 0.5, 2.0]);
        assert_eq!(matmul(&eye, &x).unwrap(), x);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatch_naming_shapes() {
        let err = matmul(
            &Tensor::zeros(vec![2, 3]).unwrap(),
            &Tensor::zeros(vec![2, 3]).unwrap(),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_charges_mnk() {
        let a = Tensor::zeros(vec![5, 7]).unwrap();
        let b = Tensor::zeros(vec![7, 3]).unwrap();
        let (_, macs) = MacCounter::measure(|| matmul(&a, &b).unwrap());
        assert_eq!(macs, 5 * 7 * 3);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_lastdim(&t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax_lastdim(&t(&[1], &[42.0])).unwrap().data(), &[1.0]);
        assert_eq!(
            softmax_lastdim(&t(&[2], &[1000.0, 1000.0])).unwrap().data(),
            &[0.5, 0.5]
        );
    }

    #[test]
    fn layer_norm_cases() {
        let c = layer_norm(&t(&[4], &[2.0; 4]), 1e-5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        let n = layer_norm(&t(&[2], &[1.0, -1.0]), 0.0).unwrap();
        assert_eq!(n.data(), &[1.0, -1.0]);
    }

    #[test]
    fn conv3d_hand_cases() {
        let x = Tensor::from_fn(vec![1, 2, 3, 3], |i| i as f64).unwrap();
        let id = t(&[1, 1, 1, 1, 1], &[1.0]);
        assert_eq!(conv3d(&x, &id, None).unwrap(), x);

        let ones = Tensor::full(vec![1, 3, 3, 3], 1.0).unwrap();
        let k = Tensor::full(vec![1, 1, 3, 3, 3], 1.0).unwrap();
        let y = conv3d(&ones, &k, None).unwrap();
        assert_eq!(y.get(&[0, 1, 1, 1]), 27.0);
        assert_eq!(y.get(&[0, 0, 0, 0]), 8.0);
    }

    #[test]
    fn conv3d_rejects_even_kernel() {
        let x = Tensor::zeros(vec![1, 2, 4, 4]).unwrap();
        let k = Tensor::zeros(vec![1, 1, 1, 2, 3]).unwrap();
        assert!(conv3d(&x, &k, None).is_err());
    }

    #[test]
    fn conv3d_charges_formula() {
        let x = Tensor::zeros(vec![3, 4, 5, 6]).unwrap();
        let k = Tensor::zeros(vec![2, 3, 3, 3, 1]).unwrap();
        let (_, macs) = MacCounter::measure(|| conv3d(&x, &k, None).unwrap());
        assert_eq!(macs, (2 * 3 * 3 * 3) * 4 * 5 * 6);
    }

    #[test]
    fn permute_and_inverse() {
        let x = Tensor::from_fn(vec![2, 3, 4], |i| i as f64).unwrap();
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), x.get(&[1, 2, 3]));
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn temporal_shift_definition() {
        // C=2, T=3, 1×1 planes: channel 0 = (a,b,c), channel 1 = (a,b,c).
        let x = t(&[2, 3, 1, 1], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let y = temporal_shift(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 2.0, 3.0, 0.0]);
        let single = t(&[2, 1, 1, 1], &[5.0, 6.0]);
        assert_eq!(temporal_shift(&single).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_axis_and_pool() {
        let x = Tensor::from_fn(vec![2, 3], |i| i as f64).unwrap();
        assert_eq!(mean_axis(&x, 0).unwrap().data(), &[1.5, 2.5, 3.5]);
        assert_eq!(mean_axis(&x, 1).unwrap().data(), &[1.0, 4.0]);
        let p = avg_pool2(&Tensor::from_fn(vec![1, 1, 2, 2], |i| i as f64).unwrap()).unwrap();
        assert_eq!(p.data(), &[1.5]);
    }

    #[test]
    fn cross_entropy_uniform() {
        let (loss, probs) = cross_entropy(&Tensor::zeros(vec![4]).unwrap(), 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((probs.sum() - 1.0).abs() < 1e-15);
        assert!(cross_entropy(&Tensor::zeros(vec![4]).unwrap(), 4).is_err());
    }
}
