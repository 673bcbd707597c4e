//! Space-time mixing attention and the video transformer built on it.
//!
//! For query `q[s,t]`, each key and value is assembled channel by channel
//! from neighbouring frames (`t-t_w ..= t+t_w`) according to a
//! [`ChannelPlan`]; attention then runs over the `S` spatial locations only,
//! so cost grows linearly with the number of frames. [`full_st_attention`]
//! is the joint space-time baseline whose cost grows quadratically.

pub(crate) mod kernel;
mod patch;
mod plan;
mod xvit;

pub use patch::{extract_patches, patchify, PatchEmbed};
pub use plan::ChannelPlan;
pub use xvit::{init_xvit_params, xvit_forward, xvit_logits, XViTConfig};

use crate::error::{Error, Result};
use crate::mac;
use crate::tensor::Tensor;
use kernel::{check_plan, source_frames, Dims};

/// Per-head queries, keys and values, each `[heads×frames×tokens×head_dim]`.
#[derive(Debug, Clone)]
pub struct TokenField {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl TokenField {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        Dims::of(&q, &k, &v)?;
        Ok(Self { q, k, v })
    }

    /// Builds a one-head field from `[frames×tokens×head_dim]` tensors.
    pub fn single_head(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let lift = |t: Tensor| -> Result<Tensor> {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshape(shape)
        };
        Self::new(lift(q)?, lift(k)?, lift(v)?)
    }

    pub fn heads(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.q.shape()[2]
    }

    pub fn head_dim(&self) -> usize {
        self.q.shape()[3]
    }

    fn dims(&self) -> Dims {
        Dims::of(&self.q, &self.k, &self.v).expect("validated at construction")
    }
}

/// `y[h,t,s,:]` for every head, frame and token; same shape as `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub y: Tensor,
}

/// The mixed key and value rows `(k̃, ṽ)` seen by frame `t` at location `s'`.
pub fn assemble_mixed_kv(
    field: &TokenField,
    plan: &ChannelPlan,
    head: usize,
    t: usize,
    s_prime: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_plan(&field.dims(), plan)?;
    if head >= field.heads() || t >= field.frames() || s_prime >= field.tokens() {
        return Err(Error::invalid(format!(
            "assemble_mixed_kv: (head {head}, t {t}, s' {s_prime}) outside field {:?}",
            field.q.shape()
        )));
    }
    let src = source_frames(&plan.channel_offsets(), t, field.frames());
    let pick = |tensor: &Tensor| {
        src.iter()
            .enumerate()
            .map(|(c, &f)| tensor.get(&[head, f, s_prime, c]))
            .collect()
    };
    Ok((pick(&field.k), pick(&field.v)))
}

/// Space-time mixing attention.
pub fn stm_attention(field: &TokenField, plan: &ChannelPlan) -> Result<AttentionOutput> {
    let (y, _) = kernel::stm_forward(&field.q, &field.k, &field.v, plan)?;
    Ok(AttentionOutput { y })
}

/// Attention weights `[heads×frames×S×S]` of [`stm_attention`]; row
/// `(h,t,s)` is the distribution over `s'`.
pub fn stm_attention_weights(field: &TokenField, plan: &ChannelPlan) -> Result<Tensor> {
    Ok(kernel::stm_forward(&field.q, &field.k, &field.v, plan)?.1)
}

/// Per-frame attention over the frame's own tokens.
pub fn spatial_attention(field: &TokenField) -> Result<AttentionOutput> {
    stm_attention(field, &ChannelPlan::build(field.head_dim(), 0)?)
}

/// Joint attention of every token over all `T·S` tokens.
pub fn full_st_attention(field: &TokenField) -> Result<AttentionOutput> {
    let (h, t, s, d) = (
        field.heads(),
        field.frames(),
        field.tokens(),
        field.head_dim(),
    );
    let flat = |x: &Tensor| x.reshape(vec![h, 1, t * s, d]);
    let plan = ChannelPlan::build(d, 0)?;
    let (y, _) = kernel::stm_forward(&flat(&field.q)?, &flat(&field.k)?, &flat(&field.v)?, &plan)?;
    Ok(AttentionOutput {
        y: y.reshape(vec![h, t, s, d])?,
    })
}

/// Direct loop evaluation of the mixing attention, one query at a time.
pub fn eq1_reference(field: &TokenField, plan: &ChannelPlan) -> Result<AttentionOutput> {
    let dims = field.dims();
    check_plan(&dims, plan)?;
    let (heads, frames, tokens, d) = (dims.heads, dims.frames, dims.tokens, dims.head_dim);
    let scale = 1.0 / (d as f64).sqrt();
    let mut y = vec![0.0; field.q.len()];
    for h in 0..heads {
        for t in 0..frames {
            for s in 0..tokens {
                let mut scores = vec![0.0; tokens];
                for (sp, score) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for delta in plan.offsets() {
                        let f = (t as isize + delta).clamp(0, frames as isize - 1) as usize;
                        for &c in plan.channels(delta) {
                            dot += field.q.get(&[h, t, s, c]) * field.k.get(&[h, f, sp, c]);
                        }
                    }
                    *score = dot * scale;
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    total += *sc;
                }
                for (sp, w) in scores.iter().enumerate() {
                    let w = w / total;
                    for delta in plan.offsets() {
                        let f = (t as isize + delta).clamp(0, frames as isize - 1) as usize;
                        for &c in plan.channels(delta) {
                            y[((h * frames + t) * tokens + s) * d + c] +=
                                w * field.v.get(&[h, f, sp, c]);
                        }
                    }
                }
            }
        }
    }
    mac::record((2 * heads * frames * tokens * tokens * d) as u64);
    Ok(AttentionOutput {
        y: Tensor::new(field.q.shape().to_vec(), y)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mac::MacCounter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_field(h: usize, t: usize, s: usize, d: usize, seed: u64) -> TokenField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = || Tensor::uniform(vec![h, t, s, d], 1.0, &mut rng).unwrap();
        TokenField::new(r(), r(), r()).unwrap()
    }

    #[test]
    fn single_token_returns_value() {
        let f = random_field(1, 1, 1, 3, 1);
        let plan = ChannelPlan::build(3, 0).unwrap();
        assert_eq!(stm_attention(&f, &plan).unwrap().y, f.v);
        assert_eq!(eq1_reference(&f, &plan).unwrap().y, f.v);
    }

    #[test]
    fn zero_query_averages_mixed_values() {
        let mut f = random_field(1, 3, 4, 6, 2);
        f.q = Tensor::zeros(f.q.shape().to_vec()).unwrap();
        let plan = ChannelPlan::build(6, 1).unwrap();
        let y = stm_attention(&f, &plan).unwrap().y;
        for t in 0..3 {
            let mut mean = [0.0; 6];
            for sp in 0..4 {
                let (_, v) = assemble_mixed_kv(&f, &plan, 0, t, sp).unwrap();
                mean.iter_mut().zip(&v).for_each(|(m, x)| *m += x / 4.0);
            }
            for s in 0..4 {
                for c in 0..6 {
                    assert!((y.get(&[0, t, s, c]) - mean[c]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn mixed_kv_boundary_cases() {
        let f = random_field(1, 1, 2, 6, 3);
        let plan = ChannelPlan::build(6, 1).unwrap();
        let (k, v) = assemble_mixed_kv(&f, &plan, 0, 0, 1).unwrap();
        for c in 0..6 {
            assert_eq!(k[c], f.k.get(&[0, 0, 1, c]));
            assert_eq!(v[c], f.v.get(&[0, 0, 1, c]));
        }
        let f3 = random_field(1, 3, 2, 6, 4);
        let zero = ChannelPlan::build(6, 0).unwrap();
        let (k, _) = assemble_mixed_kv(&f3, &zero, 0, 2, 0).unwrap();
        for c in 0..6 {
            assert_eq!(k[c], f3.k.get(&[0, 2, 0, c]));
        }
        assert!(assemble_mixed_kv(&f3, &plan, 0, 3, 0).is_err());
    }

    #[test]
    fn full_attention_on_one_frame_is_spatial() {
        let f = random_field(2, 1, 5, 4, 5);
        assert_eq!(
            full_st_attention(&f).unwrap(),
            spatial_attention(&f).unwrap()
        );
    }

    #[test]
    fn full_attention_with_uniform_scores_is_global_mean() {
        let mut f = random_field(1, 2, 3, 4, 6);
        f.q = Tensor::full(f.q.shape().to_vec(), 0.5).unwrap();
        f.k = Tensor::full(f.k.shape().to_vec(), -0.25).unwrap();
        let y = full_st_attention(&f).unwrap().y;
        for c in 0..4 {
            let mut mean = 0.0;
            for t in 0..2 {
                for s in 0..3 {
                    mean += f.v.get(&[0, t, s, c]) / 6.0;
                }
            }
            for t in 0..2 {
                for s in 0..3 {
                    assert!((y.get(&[0, t, s, c]) - mean).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn plan_width_must_match_heads() {
        let f = random_field(1, 2, 2, 4, 7);
        let plan = ChannelPlan::build(6, 1).unwrap();
        assert!(stm_attention(&f, &plan).is_err());
        assert!(eq1_reference(&f, &plan).is_err());
    }

    #[test]
    fn qkv_shapes_must_agree() {
        let a = Tensor::zeros(vec![1, 2, 3, 4]).unwrap();
        let b = Tensor::zeros(vec![1, 2, 3, 5]).unwrap();
        assert!(TokenField::new(a.clone(), b, a.clone()).is_err());
    }

    #[test]
    fn mac_counts() {
        let f = random_field(2, 4, 5, 6, 8);
        let plan = ChannelPlan::build(6, 1).unwrap();
        let (_, stm) = MacCounter::measure(|| stm_attention(&f, &plan).unwrap());
        assert_eq!(stm, 2 * 2 * 4 * 25 * 6);
        let (_, full) = MacCounter::measure(|| full_st_attention(&f).unwrap());
        assert_eq!(full, 2 * 2 * 400 * 6);
    }
}
