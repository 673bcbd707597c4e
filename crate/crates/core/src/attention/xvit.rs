use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{extract_patches, ChannelPlan};
use crate::backend::{Backend, Eval};
use crate::error::{Error, Result};
use crate::heads::{init_head_params, multitask_heads, ClassCounts, PredictionScores, TaskLogits};
use crate::ops::Broadcast;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;
const MLP_RATIO: usize = 4;

/// Shape of the video transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XViTConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub patch: usize,
    pub t_w: usize,
    pub frames: usize,
    pub input_hw: (usize, usize),
    #[serde(default = "rgb")]
    pub channels: usize,
    pub class_counts: ClassCounts,
}

fn rgb() -> usize {
    3
}

impl XViTConfig {
    /// ViT-B/16 with a one-frame mixing window and the EPIC-Kitchens-100
    /// label space, at a square input of `side` pixels.
    pub fn paper_preset(side: usize) -> Self {
        Self {
            layers: 12,
            heads: 12,
            embed_dim: 768,
            patch: 16,
            t_w: 1,
            frames: 16,
            input_hw: (side, side),
            channels: 3,
            class_counts: ClassCounts {
                verbs: 97,
                nouns: 300,
                actions: 3806,
            },
        }
    }

    /// Paper preset at the 112×112 desk resolution.
    pub fn desk_preset() -> Self {
        Self::paper_preset(112)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("xvit: {m}")));
        if self.layers == 0 || self.heads == 0 || self.frames == 0 || self.channels == 0 {
            return bad("layers, heads, frames and channels must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        let (h, w) = self.input_hw;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return bad(format!(
                "input {h}x{w} not divisible by patch {}",
                self.patch
            ));
        }
        if self.head_dim() < 2 * self.t_w + 1 {
            return bad(format!(
                "head_dim {} too small for t_w {}",
                self.head_dim(),
                self.t_w
            ));
        }
        self.class_counts.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Spatial tokens per frame.
    pub fn tokens(&self) -> usize {
        (self.input_hw.0 / self.patch) * (self.input_hw.1 / self.patch)
    }

    pub fn plan(&self) -> Result<ChannelPlan> {
        ChannelPlan::build(self.head_dim(), self.t_w)
    }
}

/// Seeded `uniform(-1/√fan_in, 1/√fan_in)` weights; unit/zero layer norms.
pub fn init_xvit_params(cfg: &XViTConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let patch_in = cfg.channels * cfg.patch * cfg.patch;
    let hidden = MLP_RATIO * d;
    let mut p = ParamStore::new();
    p.insert_uniform("patch.w", vec![patch_in, d], patch_in, rng)?;
    p.insert_uniform("patch.b", vec![d], patch_in, rng)?;
    p.insert_uniform("pos", vec![cfg.tokens(), d], d, rng)?;
    for l in 0..cfg.layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        p.insert(name("ln1.g"), Tensor::full(vec![d], 1.0)?);
        p.insert(name("ln1.b"), Tensor::zeros(vec![d])?);
        for proj in ["q", "k", "v", "o"] {
            p.insert_uniform(name(&format!("attn.w{proj}")), vec![d, d], d, rng)?;
            // A key bias shifts every score of a query by the same amount, so
            // softmax cancels it; it is left out.
            if proj != "k" {
                p.insert_uniform(name(&format!("attn.b{proj}")), vec![d], d, rng)?;
            }
        }
        p.insert(name("ln2.g"), Tensor::full(vec![d], 1.0)?);
        p.insert(name("ln2.b"), Tensor::zeros(vec![d])?);
        p.insert_uniform(name("mlp.w1"), vec![d, hidden], d, rng)?;
        p.insert_uniform(name("mlp.b1"), vec![hidden], d, rng)?;
        p.insert_uniform(name("mlp.w2"), vec![hidden, d], hidden, rng)?;
        p.insert_uniform(name("mlp.b2"), vec![d], hidden, rng)?;
    }
    p.insert("norm.g", Tensor::full(vec![d], 1.0)?);
    p.insert("norm.b", Tensor::zeros(vec![d])?);
    init_head_params(&mut p, d, cfg.class_counts, rng)?;
    Ok(p)
}

fn affine_norm<B: Backend>(
    b: &B,
    x: &B::Value,
    gain: &B::Value,
    shift: &B::Value,
) -> Result<B::Value> {
    let n = b.layer_norm(x, LN_EPS)?;
    let n = b.mul_bcast(&n, gain, Broadcast::Suffix)?;
    b.add_bcast(&n, shift, Broadcast::Suffix)
}

/// Pre-norm transformer over `[T·S × D]` tokens with mixing attention,
/// then temporal-spatial mean pooling into the three heads.
pub fn xvit_logits<B: Backend>(
    b: &B,
    cfg: &XViTConfig,
    params: &Bound<B::Value>,
    clip: &Tensor,
) -> Result<TaskLogits<B::Value>> {
    cfg.validate()?;
    let expected = [cfg.frames, cfg.channels, cfg.input_hw.0, cfg.input_hw.1];
    if clip.shape() != expected {
        return Err(Error::shape("xvit clip", clip.shape(), &expected));
    }
    let (t, s, d, heads, dh) = (
        cfg.frames,
        cfg.tokens(),
        cfg.embed_dim,
        cfg.heads,
        cfg.head_dim(),
    );
    let n = t * s;
    let plan = cfg.plan()?;
    let p = |name: &str| params.get(name);

    let patches = b.constant(extract_patches(clip, cfg.patch)?);
    let x = b.linear(&patches, p("patch.w")?, p("patch.b")?)?;
    let x = b.reshape(&x, &[t, s, d])?;
    let x = b.add_bcast(&x, p("pos")?, Broadcast::Suffix)?;
    let mut x = b.reshape(&x, &[n, d])?;

    let split_heads = |y: &B::Value| -> Result<B::Value> {
        let y = b.reshape(y, &[t, s, heads, dh])?;
        b.permute(&y, &[2, 0, 1, 3])
    };
    for l in 0..cfg.layers {
        let lp = |s: &str| params.get(&format!("layers.{l}.{s}"));
        let h = affine_norm(b, &x, lp("ln1.g")?, lp("ln1.b")?)?;
        let q = split_heads(&b.linear(&h, lp("attn.wq")?, lp("attn.bq")?)?)?;
        let k = split_heads(&b.matmul(&h, lp("attn.wk")?)?)?;
        let v = split_heads(&b.linear(&h, lp("attn.wv")?, lp("attn.bv")?)?)?;
        let y = b.stm_attention(&q, &k, &v, &plan)?;
        let y = b.permute(&y, &[1, 2, 0, 3])?;
        let y = b.reshape(&y, &[n, d])?;
        let y = b.linear(&y, lp("attn.wo")?, lp("attn.bo")?)?;
        x = b.add(&x, &y)?;

        let h = affine_norm(b, &x, lp("ln2.g")?, lp("ln2.b")?)?;
        let h = b.gelu(&b.linear(&h, lp("mlp.w1")?, lp("mlp.b1")?)?);
        let h = b.linear(&h, lp("mlp.w2")?, lp("mlp.b2")?)?;
        x = b.add(&x, &h)?;
    }
    let x = affine_norm(b, &x, p("norm.g")?, p("norm.b")?)?;
    let pooled = b.mean_axis(&x, 0)?;
    multitask_heads(b, params, &pooled)
}

/// Forward pass on plain tensors.
pub fn xvit_forward(
    clip: &Tensor,
    cfg: &XViTConfig,
    params: &ParamStore,
) -> Result<PredictionScores> {
    Ok(xvit_logits(&Eval, cfg, &params.bind(&Eval), clip)?.into_scores())
}
