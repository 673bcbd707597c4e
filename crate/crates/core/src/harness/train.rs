use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::in_top_k;
use super::sampling::temporal_jitter;
use super::views::{clip_ranges, crop_clip, select_frames};
use crate::attention::{init_xvit_params, xvit_logits, XViTConfig};
use crate::backend::{Backend, Eval};
use crate::error::{Error, Result};
use crate::gsf::{init_backbone_params, toy_backbone_logits, ToyBackboneConfig};
use crate::heads::{
    multitask_loss_on, ClassCounts, PredictionScores, Task, TaskLabels, TaskLogits,
};
use crate::params::{Bound, ParamStore};
use crate::tape::GradTape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyModel {
    GsfToy(ToyBackboneConfig),
    XvitToy(XViTConfig),
}

impl ToyModel {
    pub fn name(&self) -> &'static str {
        match self {
            ToyModel::GsfToy(_) => "gsf_toy",
            ToyModel::XvitToy(_) => "xvit_toy",
        }
    }

    pub fn class_counts(&self) -> ClassCounts {
        match self {
            ToyModel::GsfToy(c) => c.class_counts,
            ToyModel::XvitToy(c) => c.class_counts,
        }
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            ToyModel::GsfToy(c) => init_backbone_params(c, &mut rng),
            ToyModel::XvitToy(c) => init_xvit_params(c, &mut rng),
        }
    }

    pub fn logits<B: Backend>(
        &self,
        b: &B,
        params: &Bound<B::Value>,
        clip: &Tensor,
    ) -> Result<TaskLogits<B::Value>> {
        match self {
            ToyModel::GsfToy(c) => toy_backbone_logits(b, c, params, clip),
            ToyModel::XvitToy(c) => xvit_logits(b, c, params, clip),
        }
    }

    pub fn forward(&self, params: &ParamStore, clip: &Tensor) -> Result<PredictionScores> {
        Ok(self.logits(&Eval, &params.bind(&Eval), clip)?.into_scores())
    }
}

/// SGD with momentum under linear warmup and cosine decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainSpec {
    /// Published settings for the GSF family.
    pub fn paper_gsf() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            batch: 32,
            epochs: 60,
            warmup_epochs: 5,
        }
    }

    /// Published settings for XViT.
    pub fn paper_xvit() -> Self {
        Self {
            base_lr: 0.05,
            momentum: 0.9,
            batch: 128,
            epochs: 50,
            warmup_epochs: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return bad("base_lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup must be shorter than training");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(spec: &TrainSpec, steps_per_epoch: usize) -> Self {
        Self {
            base_lr: spec.base_lr,
            warmup_steps: spec.warmup_epochs * steps_per_epoch,
            total_steps: spec.epochs * steps_per_epoch,
        }
    }

    /// Rate for the 0-based update `step`. Warmup rises linearly to
    /// `base_lr` at its last step; the cosine then falls to exactly 0 at the
    /// last step.
    pub fn lr(&self, step: usize) -> f64 {
        let (w, n) = (self.warmup_steps, self.total_steps);
        if step < w {
            return self.base_lr * ((step + 1) as f64 / w as f64);
        }
        let span = n.saturating_sub(1).saturating_sub(w);
        if span == 0 {
            return if step == w { self.base_lr } else { 0.0 };
        }
        let progress = ((step - w) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn trace(&self) -> Vec<f64> {
        (0..self.total_steps).map(|s| self.lr(s)).collect()
    }
}

/// Videos prepared for training: resized and centre-cropped once, since
/// the crop does not depend on which frames a clip uses.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub videos: Vec<Tensor>,
    pub labels: Vec<TaskLabels>,
    /// Frames per training clip.
    pub frames: usize,
}

impl TrainSet {
    pub fn new(
        videos: &[Tensor],
        labels: Vec<TaskLabels>,
        frames: usize,
        side: usize,
    ) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::invalid("train set is empty"));
        }
        if videos.len() != labels.len() {
            return Err(Error::invalid("train set: one label per video required"));
        }
        if frames == 0 {
            return Err(Error::invalid("train set: clips need at least one frame"));
        }
        let videos = videos
            .iter()
            .map(|v| Ok(crop_clip(v, side)?[1].clone()))
            .collect::<Result<_>>()?;
        Ok(Self {
            videos,
            labels,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// A jittered clip from a randomly chosen half of the video. Test clips
    /// cover one half each, so this keeps the frame stride of training and
    /// test clips equal.
    fn clip(&self, i: usize, seed: u64) -> Result<Tensor> {
        let ranges = clip_ranges(self.videos[i].shape()[0]);
        let (lo, hi) = ranges[ChaCha8Rng::seed_from_u64(seed).gen_range(0..ranges.len())];
        let idx: Vec<usize> = temporal_jitter(hi - lo, self.frames, seed)?
            .into_iter()
            .map(|f| lo + f)
            .collect();
        select_frames(&self.videos[i], &idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Training top-1 percentages from the epoch's own forward passes.
    pub verb_top1: f64,
    pub noun_top1: f64,
    pub action_top1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: Vec<EpochRecord>,
    pub lr_trace: Vec<f64>,
}

/// Jitter seed for one sample in one epoch; every draw is a pure function
/// of the run seed.
fn clip_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    seed ^ ((epoch as u64) << 40) ^ ((sample as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains `model` from a seeded initialisation. Single-threaded and
/// deterministic for a given seed.
pub fn train_toy(
    model: &ToyModel,
    data: &TrainSet,
    spec: &TrainSpec,
    seed: u64,
) -> Result<TrainOutcome> {
    let params = model.init_params(seed)?;
    train_from(model, params, data, spec, seed)
}

/// Trains from the given parameters.
pub fn train_from(
    model: &ToyModel,
    mut params: ParamStore,
    data: &TrainSet,
    spec: &TrainSpec,
    seed: u64,
) -> Result<TrainOutcome> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train_toy: no training data"));
    }
    let steps_per_epoch = data.len().div_ceil(spec.batch);
    let schedule = LrSchedule::new(spec, steps_per_epoch);
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut velocity: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut history = Vec::with_capacity(spec.epochs);
    let mut step = 0;

    for epoch in 0..spec.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut hits = [0usize; 3];
        for batch in order.chunks(spec.batch) {
            let mut grad_sum: Vec<Vec<f64>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            for &i in batch {
                let clip = data.clip(i, clip_seed(seed, epoch, i))?;
                let labels = data.labels[i];
                let tape = GradTape::new();
                let bound = params.bind_inputs(&tape);
                let logits = model.logits(&tape, &bound, &clip)?;
                let loss = multitask_loss_on(&tape, &logits, &labels)?;
                let value = tape.value(&loss).item()?;
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, loss: value });
                }
                loss_sum += value;
                for (h, task) in hits.iter_mut().zip(Task::ALL) {
                    let scores = match task {
                        Task::Verb => tape.value(&logits.verb),
                        Task::Noun => tape.value(&logits.noun),
                        Task::Action => tape.value(&logits.action),
                    };
                    if labels.get(task).is_some_and(|y| in_top_k(&scores, y, 1)) {
                        *h += 1;
                    }
                }
                let grads = bound.collect_grads(&tape.backward(loss)?);
                for (acc, (_, g)) in grad_sum.iter_mut().zip(grads.iter()) {
                    for (a, x) in acc.iter_mut().zip(g.data()) {
                        *a += x;
                    }
                }
            }
            let lr = schedule.lr(step);
            let scale = 1.0 / batch.len() as f64;
            for ((name, vel), grad) in names.iter().zip(velocity.iter_mut()).zip(&grad_sum) {
                let current = params.get(name)?;
                let mut data = current.to_vec();
                for ((p, v), g) in data.iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = spec.momentum * *v + g * scale;
                    *p -= lr * *v;
                }
                params.insert(name.clone(), Tensor::new(current.shape().to_vec(), data)?);
            }
            step += 1;
        }
        let n = data.len() as f64;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / n,
            verb_top1: 100.0 * hits[0] as f64 / n,
            noun_top1: 100.0 * hits[1] as f64 / n,
            action_top1: 100.0 * hits[2] as f64 / n,
        };
        if !record.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: record.loss,
            });
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        params,
        history,
        lr_trace: schedule.trace(),
    })
}
