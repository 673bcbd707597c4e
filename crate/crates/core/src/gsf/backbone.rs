use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gsf_forward_on, init_gsf_params, Fusion, GsfConfig};
use crate::backend::{Backend, Eval};
use crate::error::{Error, Result};
use crate::heads::{init_head_params, multitask_heads, ClassCounts, PredictionScores, TaskLogits};
use crate::ops::Broadcast;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 8;

/// Two stages of per-frame 3×3 conv, per-clip channel normalisation, GSF,
/// GELU and 2×2 average pooling, then global average pooling into the
/// heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyBackboneConfig {
    #[serde(default = "default_widths")]
    pub widths: [usize; 2],
    pub fusion: Fusion,
    /// `false` drops the GSF layers, leaving a plain per-frame 2D CNN.
    #[serde(default = "enabled")]
    pub gsf: bool,
    #[serde(default = "rgb")]
    pub in_channels: usize,
    pub class_counts: ClassCounts,
}

fn default_widths() -> [usize; 2] {
    [16, 32]
}

fn enabled() -> bool {
    true
}

fn rgb() -> usize {
    3
}

impl ToyBackboneConfig {
    pub fn new(fusion: Fusion, class_counts: ClassCounts) -> Self {
        Self {
            widths: default_widths(),
            fusion,
            gsf: true,
            in_channels: 3,
            class_counts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &w in &self.widths {
            GsfConfig::new(w, self.fusion)?;
        }
        if self.in_channels == 0 {
            return Err(Error::Config(
                "backbone: in_channels must be positive".into(),
            ));
        }
        self.class_counts.validate()
    }

    fn stage_gsf(&self, stage: usize) -> GsfConfig {
        GsfConfig {
            channels: self.widths[stage],
            fusion: self.fusion,
        }
    }
}

pub fn init_backbone_params(cfg: &ToyBackboneConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    let mut c_in = cfg.in_channels;
    for (stage, &c_out) in cfg.widths.iter().enumerate() {
        let fan_in = c_in * 9;
        p.insert_uniform(
            format!("stage.{stage}.conv.w"),
            vec![c_out, c_in, 1, 3, 3],
            fan_in,
            rng,
        )?;
        p.insert(
            format!("stage.{stage}.norm.g"),
            Tensor::full(vec![c_out], 1.0)?,
        );
        p.insert(format!("stage.{stage}.norm.b"), Tensor::zeros(vec![c_out])?);
        if cfg.gsf {
            init_gsf_params(
                &mut p,
                &format!("stage.{stage}.gsf"),
                &cfg.stage_gsf(stage),
                rng,
            )?;
        }
        c_in = c_out;
    }
    init_head_params(&mut p, c_in, cfg.class_counts, rng)?;
    Ok(p)
}

pub const NORM_EPS: f64 = 1e-5;

/// Standardises each channel of a `[C×T×H×W]` clip over all of its
/// positions, then applies a per-channel gain and shift.
fn channel_norm<B: Backend>(
    b: &B,
    x: &B::Value,
    g: &B::Value,
    shift: &B::Value,
) -> Result<B::Value> {
    let shape = b.shape(x);
    let flat = b.reshape(x, &[shape[0], shape[1..].iter().product()])?;
    let normed = b.reshape(&b.layer_norm(&flat, NORM_EPS)?, &shape)?;
    let scaled = b.mul_bcast(&normed, g, Broadcast::Prefix)?;
    b.add_bcast(&scaled, shift, Broadcast::Prefix)
}

pub fn toy_backbone_logits<B: Backend>(
    b: &B,
    cfg: &ToyBackboneConfig,
    params: &Bound<B::Value>,
    clip: &Tensor,
) -> Result<TaskLogits<B::Value>> {
    cfg.validate()?;
    let s = clip.shape();
    if s.len() != 4 || s[1] != cfg.in_channels {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("backbone expects [T×{}×H×W]", cfg.in_channels),
        });
    }
    if s[2] < MIN_SIDE || s[3] < MIN_SIDE {
        return Err(Error::invalid(format!(
            "backbone: {}x{} input is below the {MIN_SIDE}x{MIN_SIDE} minimum",
            s[2], s[3]
        )));
    }
    // Channel-major layout so per-frame convs are 1×3×3 conv3d kernels.
    let mut x = b.constant(crate::ops::permute(clip, &[1, 0, 2, 3])?);
    for stage in 0..cfg.widths.len() {
        let p = |n: &str| params.get(&format!("stage.{stage}.{n}"));
        // No conv bias: the channel norm subtracts each channel's mean.
        x = b.conv3d(&x, p("conv.w")?, None)?;
        x = channel_norm(b, &x, p("norm.g")?, p("norm.b")?)?;
        if cfg.gsf {
            x = gsf_forward_on(
                b,
                &cfg.stage_gsf(stage),
                params,
                &format!("stage.{stage}.gsf"),
                &x,
            )?;
        }
        x = b.gelu(&x);
        x = b.avg_pool2(&x)?;
    }
    let shape = b.shape(&x);
    let flat = b.reshape(&x, &[shape[0], shape[1..].iter().product()])?;
    let feature = b.mean_axis(&flat, 1)?;
    multitask_heads(b, params, &feature)
}

pub fn toy_backbone_forward(
    clip: &Tensor,
    cfg: &ToyBackboneConfig,
    params: &ParamStore,
) -> Result<PredictionScores> {
    Ok(toy_backbone_logits(&Eval, cfg, &params.bind(&Eval), clip)?.into_scores())
}
