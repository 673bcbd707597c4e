//! Gate-Shift-Fuse.
//!
//! A 3×3×3 convolution produces one sigmoid gate per channel group. The
//! gated part of the features is shifted in time (group 0 forward, group 1
//! backward, by one frame) and fused back with the ungated residual, either
//! by addition (GSM) or by a data-dependent per-channel convex combination
//! (GSF).

mod backbone;

pub use backbone::{
    init_backbone_params, toy_backbone_forward, toy_backbone_logits, ToyBackboneConfig,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Eval};
use crate::error::{Error, Result};
use crate::ops::{self, Broadcast};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const GROUPS: usize = 2;
pub const GATE_KERNEL: [usize; 3] = [3, 3, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `shifted + residual`.
    Additive,
    /// `w ⊙ shifted + (1 − w) ⊙ residual`, `w` per channel from pooled features.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GsfConfig {
    pub channels: usize,
    pub fusion: Fusion,
}

impl GsfConfig {
    pub fn new(channels: usize, fusion: Fusion) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(GROUPS) {
            return Err(Error::Config(format!(
                "gsf: channel count {channels} must be a positive multiple of {GROUPS}"
            )));
        }
        Ok(Self { channels, fusion })
    }
}

/// Adds `{prefix}.gate.{w,b}` and, for weighted fusion, `{prefix}.fuse.{w,b}`.
pub fn init_gsf_params(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &GsfConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let c = cfg.channels;
    let [kt, kh, kw] = GATE_KERNEL;
    let fan_in = c * kt * kh * kw;
    store.insert_uniform(
        format!("{prefix}.gate.w"),
        vec![GROUPS, c, kt, kh, kw],
        fan_in,
        rng,
    )?;
    store.insert_uniform(format!("{prefix}.gate.b"), vec![GROUPS], fan_in, rng)?;
    if cfg.fusion == Fusion::Weighted {
        store.insert_uniform(format!("{prefix}.fuse.w"), vec![2 * c, c], 2 * c, rng)?;
        store.insert_uniform(format!("{prefix}.fuse.b"), vec![c], 2 * c, rng)?;
    }
    Ok(())
}

fn check_input(x: &[usize], channels: usize) -> Result<()> {
    if x.len() != 4 || x[0] != channels {
        return Err(Error::InvalidShape {
            shape: x.to_vec(),
            reason: format!("gsf expects [{channels}×T×H×W]"),
        });
    }
    Ok(())
}

/// Group gate broadcast to all channels: `sigmoid(conv3d(x))`, `[C×T×H×W]`.
pub fn spatial_gating_on<B: Backend>(
    b: &B,
    x: &B::Value,
    weight: &B::Value,
    bias: &B::Value,
) -> Result<B::Value> {
    let shape = b.shape(x);
    if shape.len() != 4 || shape[0] % GROUPS != 0 {
        return Err(Error::InvalidShape {
            shape,
            reason: format!("gating expects [C×T×H×W] with C divisible by {GROUPS}"),
        });
    }
    let logits = b.conv3d(x, weight, Some(bias))?;
    let gate = b.sigmoid(&logits);
    b.repeat0(&gate, shape[0] / GROUPS)
}

/// `(gate ⊙ x, x − gate ⊙ x)`.
pub fn gate_split_on<B: Backend>(
    b: &B,
    x: &B::Value,
    gate: &B::Value,
) -> Result<(B::Value, B::Value)> {
    let gated = b.mul(gate, x)?;
    let residual = b.sub(x, &gated)?;
    Ok((gated, residual))
}

/// Per-channel fusion weights `[C]` from `[shifted ‖ residual]` pooled over
/// time and space.
pub fn fusion_weights_on<B: Backend>(
    b: &B,
    shifted: &B::Value,
    residual: &B::Value,
    weight: &B::Value,
    bias: &B::Value,
) -> Result<B::Value> {
    let both = b.concat0(shifted, residual)?;
    let shape = b.shape(&both);
    let flat = b.reshape(&both, &[shape[0], shape[1..].iter().product()])?;
    let pooled = b.mean_axis(&flat, 1)?;
    let row = b.reshape(&pooled, &[1, shape[0]])?;
    let w = b.sigmoid(&b.linear(&row, weight, bias)?);
    b.reshape(&w, &[shape[0] / 2])
}

/// `w ⊙ shifted + (1 − w) ⊙ residual`, written as `residual + w ⊙ (shifted − residual)`.
pub fn fuse_weighted_on<B: Backend>(
    b: &B,
    shifted: &B::Value,
    residual: &B::Value,
    w: &B::Value,
) -> Result<B::Value> {
    let delta = b.sub(shifted, residual)?;
    let scaled = b.mul_bcast(&delta, w, Broadcast::Prefix)?;
    b.add(residual, &scaled)
}

/// Full gate → split → shift → fuse pipeline for the layer at `prefix`.
pub fn gsf_forward_on<B: Backend>(
    b: &B,
    cfg: &GsfConfig,
    params: &Bound<B::Value>,
    prefix: &str,
    x: &B::Value,
) -> Result<B::Value> {
    check_input(&b.shape(x), cfg.channels)?;
    let p = |s: &str| params.get(&format!("{prefix}.{s}"));
    let gate = spatial_gating_on(b, x, p("gate.w")?, p("gate.b")?)?;
    let (gated, residual) = gate_split_on(b, x, &gate)?;
    let shifted = b.temporal_shift(&gated)?;
    match cfg.fusion {
        Fusion::Additive => b.add(&shifted, &residual),
        Fusion::Weighted => {
            let w = fusion_weights_on(b, &shifted, &residual, p("fuse.w")?, p("fuse.b")?)?;
            fuse_weighted_on(b, &shifted, &residual, &w)
        }
    }
}

pub fn spatial_gating(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    spatial_gating_on(&Eval, x, weight, bias)
}

pub fn gate_split(x: &Tensor, gate: &Tensor) -> Result<(Tensor, Tensor)> {
    gate_split_on(&Eval, x, gate)
}

pub fn temporal_shift(gated: &Tensor) -> Result<Tensor> {
    ops::temporal_shift(gated)
}

pub fn fuse_add(shifted: &Tensor, residual: &Tensor) -> Result<Tensor> {
    Eval.add(shifted, residual)
}

/// Weighted fusion; returns the fused features and the channel weights.
pub fn fuse_weighted(
    shifted: &Tensor,
    residual: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if shifted.shape() != residual.shape() {
        return Err(Error::shape(
            "fuse_weighted",
            shifted.shape(),
            residual.shape(),
        ));
    }
    let w = fusion_weights_on(&Eval, shifted, residual, weight, bias)?;
    Ok((fuse_weighted_on(&Eval, shifted, residual, &w)?, w))
}

pub fn gsf_forward(
    x: &Tensor,
    cfg: &GsfConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<Tensor> {
    gsf_forward_on(&Eval, cfg, &params.bind(&Eval), prefix, x)
}

/// Intermediate tensors of one GSF layer.
#[derive(Debug, Clone)]
pub struct GsfState {
    pub gate: Tensor,
    pub gated: Tensor,
    pub residual: Tensor,
    pub shifted: Tensor,
    /// Per-channel weights (weighted fusion only).
    pub fusion_w: Option<Tensor>,
    pub output: Tensor,
}

/// Runs one layer and keeps every intermediate.
pub fn gsf_trace(
    x: &Tensor,
    cfg: &GsfConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<GsfState> {
    check_input(x.shape(), cfg.channels)?;
    let p = |s: &str| params.get(&format!("{prefix}.{s}"));
    let gate = spatial_gating(x, p("gate.w")?, p("gate.b")?)?;
    let (gated, residual) = gate_split(x, &gate)?;
    let shifted = temporal_shift(&gated)?;
    let (output, fusion_w) = match cfg.fusion {
        Fusion::Additive => (fuse_add(&shifted, &residual)?, None),
        Fusion::Weighted => {
            let (out, w) = fuse_weighted(&shifted, &residual, p("fuse.w")?, p("fuse.b")?)?;
            (out, Some(w))
        }
    };
    Ok(GsfState {
        gate,
        gated,
        residual,
        shifted,
        fusion_w,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn saturated(c: usize, fusion: Fusion, gate_bias: f64) -> ParamStore {
        let cfg = GsfConfig::new(c, fusion).unwrap();
        let mut p = ParamStore::new();
        init_gsf_params(&mut p, "g", &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.insert("g.gate.w", Tensor::zeros(vec![2, c, 3, 3, 3]).unwrap());
        p.insert("g.gate.b", Tensor::full(vec![2], gate_bias).unwrap());
        p
    }

    fn input(c: usize, t: usize, seed: u64) -> Tensor {
        Tensor::uniform(vec![c, t, 3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(GsfConfig::new(3, Fusion::Additive).is_err());
        assert!(GsfConfig::new(0, Fusion::Weighted).is_err());
    }

    #[test]
    fn zero_gating_weights_give_half() {
        let p = saturated(4, Fusion::Additive, 0.0);
        let gate = spatial_gating(
            &input(4, 3, 1),
            p.get("g.gate.w").unwrap(),
            p.get("g.gate.b").unwrap(),
        )
        .unwrap();
        assert!(gate.data().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn negative_bias_closes_gate() {
        let p = saturated(4, Fusion::Additive, -20.0);
        let gate = spatial_gating(
            &input(4, 3, 1),
            p.get("g.gate.w").unwrap(),
            p.get("g.gate.b").unwrap(),
        )
        .unwrap();
        assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1e-8));
    }

    #[test]
    fn split_extremes() {
        let x = input(2, 2, 3);
        let (g, r) = gate_split(&x, &Tensor::full(x.shape().to_vec(), 1.0).unwrap()).unwrap();
        assert_eq!(g, x);
        assert!(r.data().iter().all(|&v| v == 0.0));
        let (g, r) = gate_split(&x, &Tensor::zeros(x.shape().to_vec()).unwrap()).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert_eq!(r, x);
        assert!(gate_split(&x, &Tensor::zeros(vec![2, 2, 3, 3]).unwrap()).is_err());
    }

    #[test]
    fn additive_fusion_identities() {
        let a = input(2, 2, 4);
        let z = Tensor::zeros(a.shape().to_vec()).unwrap();
        assert_eq!(fuse_add(&z, &a).unwrap(), a);
        assert_eq!(fuse_add(&a, &z).unwrap(), a);
        let b = input(2, 2, 5);
        assert_eq!(fuse_add(&a, &b).unwrap(), fuse_add(&b, &a).unwrap());
        assert!(fuse_add(&a, &Tensor::zeros(vec![2]).unwrap()).is_err());
    }

    #[test]
    fn weighted_fusion_saturation() {
        let (s, r) = (input(4, 3, 6), input(4, 3, 7));
        let w = Tensor::zeros(vec![8, 4]).unwrap();
        let (out, _) = fuse_weighted(&s, &r, &w, &Tensor::full(vec![4], 1000.0).unwrap()).unwrap();
        assert_eq!(out, s);
        let (out, _) = fuse_weighted(&s, &r, &w, &Tensor::full(vec![4], -1000.0).unwrap()).unwrap();
        assert_eq!(out, r);
    }

    #[test]
    fn closed_gate_is_identity_for_gsm() {
        let p = saturated(4, Fusion::Additive, -1000.0);
        let x = input(4, 5, 8);
        let cfg = GsfConfig::new(4, Fusion::Additive).unwrap();
        assert_eq!(gsf_forward(&x, &cfg, &p, "g").unwrap(), x);
    }

    #[test]
    fn open_gate_on_single_frame_empties_gsm() {
        let p = saturated(4, Fusion::Additive, 1000.0);
        let x = input(4, 1, 9);
        let cfg = GsfConfig::new(4, Fusion::Additive).unwrap();
        let y = gsf_forward(&x, &cfg, &p, "g").unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trace_matches_forward() {
        let cfg = GsfConfig::new(4, Fusion::Weighted).unwrap();
        let mut p = ParamStore::new();
        init_gsf_params(&mut p, "g", &cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let x = input(4, 3, 11);
        let state = gsf_trace(&x, &cfg, &p, "g").unwrap();
        assert_eq!(state.output, gsf_forward(&x, &cfg, &p, "g").unwrap());
        let w = state.fusion_w.unwrap();
        assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(gsf_forward(&input(2, 3, 1), &cfg, &p, "g").is_err());
    }
}
