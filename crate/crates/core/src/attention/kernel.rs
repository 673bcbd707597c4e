//! Matrix form of space-time mixing attention and its adjoint.
//!
//! Per head and frame `t`, the mixed keys `K̃_t` and values `Ṽ_t` are
//! gathered as `[S×d_h]` matrices, then `Y_t = softmax(Q_t K̃_tᵀ / √d_h) Ṽ_t`.
//! Both products go through the counted matmul kernels, so one head costs
//! `2·T·S²·d_h` MACs.

use super::ChannelPlan;
use crate::error::{Error, Result};
use crate::ops::{self, matmul_nt_raw, matmul_raw, matmul_tn_raw};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub heads: usize,
    pub frames: usize,
    pub tokens: usize,
    pub head_dim: usize,
}

impl Dims {
    pub fn of(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Self> {
        if q.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: q.shape().to_vec(),
                reason: "attention expects [heads×frames×tokens×head_dim]".into(),
            });
        }
        if k.shape() != q.shape() {
            return Err(Error::shape("attention q/k", q.shape(), k.shape()));
        }
        if v.shape() != q.shape() {
            return Err(Error::shape("attention q/v", q.shape(), v.shape()));
        }
        let s = q.shape();
        Ok(Self {
            heads: s[0],
            frames: s[1],
            tokens: s[2],
            head_dim: s[3],
        })
    }

    fn frame_len(&self) -> usize {
        self.tokens * self.head_dim
    }

    fn head_len(&self) -> usize {
        self.frames * self.frame_len()
    }
}

pub(crate) fn check_plan(dims: &Dims, plan: &ChannelPlan) -> Result<()> {
    if plan.head_dim() != dims.head_dim {
        return Err(Error::invalid(format!(
            "channel plan covers {} channels but heads have {}",
            plan.head_dim(),
            dims.head_dim
        )));
    }
    Ok(())
}

/// Source frame of every channel when mixing for frame `t`.
pub(crate) fn source_frames(offsets: &[isize], t: usize, frames: usize) -> Vec<usize> {
    offsets
        .iter()
        .map(|&d| (t as isize + d).clamp(0, frames as isize - 1) as usize)
        .collect()
}

/// Channel-aligned gather of one head's `[T×S×d]` block into `[S×d]`.
fn gather(head: &[f64], dims: &Dims, src: &[usize], out: &mut [f64]) {
    let (s_len, d) = (dims.tokens, dims.head_dim);
    for s in 0..s_len {
        let row = &mut out[s * d..(s + 1) * d];
        for (c, (dst, &f)) in row.iter_mut().zip(src).enumerate() {
            *dst = head[(f * s_len + s) * d + c];
        }
    }
}

fn scatter_add(head: &mut [f64], dims: &Dims, src: &[usize], grad: &[f64]) {
    let (s_len, d) = (dims.tokens, dims.head_dim);
    for s in 0..s_len {
        let row = &grad[s * d..(s + 1) * d];
        for (c, (&g, &f)) in row.iter().zip(src).enumerate() {
            head[(f * s_len + s) * d + c] += g;
        }
    }
}

/// Returns the attention output `[H×T×S×d]` and weights `[H×T×S×S]`.
pub(crate) fn stm_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    plan: &ChannelPlan,
) -> Result<(Tensor, Tensor)> {
    let dims = Dims::of(q, k, v)?;
    check_plan(&dims, plan)?;
    let (s_len, d) = (dims.tokens, dims.head_dim);
    let scale = 1.0 / (d as f64).sqrt();
    let offsets = plan.channel_offsets();
    let mut y = Vec::with_capacity(q.len());
    let mut probs = Vec::with_capacity(dims.heads * dims.frames * s_len * s_len);
    let mut k_mix = vec![0.0; dims.frame_len()];
    let mut v_mix = vec![0.0; dims.frame_len()];
    for h in 0..dims.heads {
        let head = h * dims.head_len()..(h + 1) * dims.head_len();
        let (qh, kh, vh) = (
            &q.data()[head.clone()],
            &k.data()[head.clone()],
            &v.data()[head],
        );
        for t in 0..dims.frames {
            let src = source_frames(&offsets, t, dims.frames);
            gather(kh, &dims, &src, &mut k_mix);
            gather(vh, &dims, &src, &mut v_mix);
            let q_t = &qh[t * dims.frame_len()..(t + 1) * dims.frame_len()];
            let mut scores = matmul_nt_raw(q_t, &k_mix, s_len, d, s_len);
            for row in scores.chunks_exact_mut(s_len) {
                row.iter_mut().for_each(|x| *x *= scale);
                ops::softmax_in_place(row);
            }
            y.extend(matmul_raw(&scores, &v_mix, s_len, s_len, d));
            probs.extend(scores);
        }
    }
    Ok((
        Tensor::from_parts(q.shape().to_vec(), y),
        Tensor::from_parts(vec![dims.heads, dims.frames, s_len, s_len], probs),
    ))
}

pub(crate) fn stm_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    plan: &ChannelPlan,
    probs: &Tensor,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let dims = Dims::of(q, k, v).expect("validated in forward");
    let (s_len, d) = (dims.tokens, dims.head_dim);
    let scale = 1.0 / (d as f64).sqrt();
    let offsets = plan.channel_offsets();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut k_mix = vec![0.0; dims.frame_len()];
    let mut v_mix = vec![0.0; dims.frame_len()];
    let pd = probs.data();
    for h in 0..dims.heads {
        let head = h * dims.head_len()..(h + 1) * dims.head_len();
        let (qh, kh, vh) = (
            &q.data()[head.clone()],
            &k.data()[head.clone()],
            &v.data()[head.clone()],
        );
        for t in 0..dims.frames {
            let src = source_frames(&offsets, t, dims.frames);
            gather(kh, &dims, &src, &mut k_mix);
            gather(vh, &dims, &src, &mut v_mix);
            let frame = t * dims.frame_len()..(t + 1) * dims.frame_len();
            let q_t = &qh[frame.clone()];
            let gy = &grad.data()[head.start + frame.start..head.start + frame.end];
            let p_off = (h * dims.frames + t) * s_len * s_len;
            let p = &pd[p_off..p_off + s_len * s_len];

            let gp = matmul_nt_raw(gy, &v_mix, s_len, d, s_len);
            let gv_mix = matmul_tn_raw(p, gy, s_len, s_len, d);
            let mut ga = vec![0.0; s_len * s_len];
            for ((ga_row, p_row), gp_row) in ga
                .chunks_exact_mut(s_len)
                .zip(p.chunks_exact(s_len))
                .zip(gp.chunks_exact(s_len))
            {
                let dot: f64 = p_row.iter().zip(gp_row).map(|(a, b)| a * b).sum();
                for ((o, &pi), &gi) in ga_row.iter_mut().zip(p_row).zip(gp_row) {
                    *o = pi * (gi - dot) * scale;
                }
            }
            let gq_t = matmul_raw(&ga, &k_mix, s_len, s_len, d);
            let gk_mix = matmul_tn_raw(&ga, q_t, s_len, s_len, d);
            gq[head.start + frame.start..head.start + frame.end].copy_from_slice(&gq_t);
            scatter_add(&mut gk[head.clone()], &dims, &src, &gk_mix);
            scatter_add(&mut gv[head.clone()], &dims, &src, &gv_mix);
        }
    }
    (
        Tensor::from_parts(q.shape().to_vec(), gq),
        Tensor::from_parts(k.shape().to_vec(), gk),
        Tensor::from_parts(v.shape().to_vec(), gv),
    )
}
