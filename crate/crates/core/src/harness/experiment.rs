//! Desk-scale experiment: train the toy models on synthetic clips, score
//! the test videos through the six-view protocol, and ensemble.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::MetricReport;
use super::sampling::{SamplingMode, SamplingSpec};
use super::synth::{synth_videos, SynthDataset, SynthSpec};
use super::train::{train_toy, ToyModel, TrainOutcome, TrainSet, TrainSpec};
use super::views::{aggregate_views, generate_views, ViewSpec};
use crate::attention::XViTConfig;
use crate::error::{Error, Result};
use crate::gsf::{Fusion, ToyBackboneConfig};
use crate::heads::{ClassCounts, EnsembleSpec, EnsembleWeights, PredictionScores, TaskLabels};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub gsf_toy: ToyBackboneConfig,
    pub xvit_toy: XViTConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub gsf_toy: TrainSpec,
    pub xvit_toy: TrainSpec,
    pub data: SynthSpec,
    pub test_samples_per_class: usize,
}

/// The JSON experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    /// Training-clip sampling; test clips are always centre-uniform.
    pub sampling: SamplingSpec,
    pub views: ViewSpec,
    pub train: TrainSection,
    pub ensemble: EnsembleSpec,
}

pub const SYNTH_COUNTS: ClassCounts = ClassCounts {
    verbs: 3,
    nouns: 3,
    actions: 9,
};

impl ExperimentConfig {
    /// Small models on 8-frame 16×16 clips of the synthetic set.
    pub fn toy_default() -> Self {
        let frames = 8;
        Self {
            model: ModelSection {
                gsf_toy: ToyBackboneConfig {
                    widths: [8, 16],
                    ..ToyBackboneConfig::new(Fusion::Weighted, SYNTH_COUNTS)
                },
                xvit_toy: XViTConfig {
                    layers: 2,
                    heads: 4,
                    embed_dim: 32,
                    patch: 4,
                    t_w: 1,
                    frames,
                    input_hw: (16, 16),
                    channels: 3,
                    class_counts: SYNTH_COUNTS,
                },
            },
            sampling: SamplingSpec {
                frames,
                mode: SamplingMode::Jittered,
                seed: 0,
            },
            views: ViewSpec::new(16),
            train: TrainSection {
                gsf_toy: TrainSpec {
                    base_lr: 0.05,
                    momentum: 0.9,
                    batch: 4,
                    epochs: 30,
                    warmup_epochs: 2,
                },
                xvit_toy: TrainSpec {
                    base_lr: 0.003,
                    momentum: 0.9,
                    batch: 4,
                    epochs: 30,
                    warmup_epochs: 2,
                },
                data: SynthSpec::new(12),
                test_samples_per_class: 6,
            },
            ensemble: EnsembleSpec {
                members: vec!["gsf_toy".into(), "xvit_toy".into()],
                weights: EnsembleWeights::Uniform,
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        if self.sampling.mode != SamplingMode::Jittered {
            return Err(Error::Config(
                "sampling: training clips use jittered mode".into(),
            ));
        }
        self.views.validate()?;
        self.train.data.validate()?;
        if self.train.test_samples_per_class == 0 {
            return Err(Error::Config(
                "train: test_samples_per_class must be positive".into(),
            ));
        }
        self.model.gsf_toy.validate()?;
        self.model.xvit_toy.validate()?;
        let x = &self.model.xvit_toy;
        if x.frames != self.sampling.frames {
            return Err(Error::Config(format!(
                "model: xvit_toy expects {} frames, sampling gives {}",
                x.frames, self.sampling.frames
            )));
        }
        if x.input_hw != (self.views.side, self.views.side) {
            return Err(Error::Config(format!(
                "model: xvit_toy expects {:?} input, views give {}x{}",
                x.input_hw, self.views.side, self.views.side
            )));
        }
        for counts in [self.model.gsf_toy.class_counts, x.class_counts] {
            if counts != SYNTH_COUNTS {
                return Err(Error::Config(format!(
                    "model: class counts {counts:?} do not match the synthetic set"
                )));
            }
        }
        self.train.gsf_toy.validate()?;
        self.train.xvit_toy.validate()?;
        self.ensemble.validate()?;
        for m in &self.ensemble.members {
            self.member(m)?;
        }
        Ok(())
    }

    pub fn member(&self, name: &str) -> Result<(ToyModel, &TrainSpec)> {
        match name {
            "gsf_toy" => Ok((
                ToyModel::GsfToy(self.model.gsf_toy.clone()),
                &self.train.gsf_toy,
            )),
            "xvit_toy" => Ok((
                ToyModel::XvitToy(self.model.xvit_toy.clone()),
                &self.train.xvit_toy,
            )),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }

    pub fn test_spec(&self) -> SynthSpec {
        SynthSpec {
            samples_per_class: self.train.test_samples_per_class,
            ..self.train.data.clone()
        }
    }
}

/// Seeds of the independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub train_data: u64,
    pub test_data: u64,
    pub model: u64,
    pub shuffle: u64,
}

impl RunSeeds {
    pub fn from_seed(seed: u64) -> Self {
        let mix = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        Self {
            train_data: mix(1),
            test_data: mix(2),
            model: mix(3),
            shuffle: mix(4),
        }
    }
}

/// Train and test sets of one run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: SynthDataset,
    pub test: SynthDataset,
    pub test_labels: Vec<TaskLabels>,
}

impl RunData {
    pub fn generate(cfg: &ExperimentConfig, seeds: RunSeeds) -> Result<Self> {
        let train = synth_videos(&cfg.train.data, seeds.train_data)?;
        let test = synth_videos(&cfg.test_spec(), seeds.test_data)?;
        // Test labels are composed against the training vocabulary.
        let test_labels = test.videos.iter().map(|v| train.label_of(v)).collect();
        Ok(Self {
            train,
            test,
            test_labels,
        })
    }

    /// Both splits with every video's frames in a seeded random order.
    pub fn shuffled_frames(&self, seed: u64) -> Result<Self> {
        Ok(Self {
            train: self.train.shuffled_frames(seed)?,
            test: self.test.shuffled_frames(seed.wrapping_add(1))?,
            test_labels: self.test_labels.clone(),
        })
    }

    pub fn train_set(&self, frames: usize, side: usize) -> Result<TrainSet> {
        let videos: Vec<_> = self.train.videos.iter().map(|v| v.frames.clone()).collect();
        TrainSet::new(&videos, self.train.labels(), frames, side)
    }
}

/// Video-level scores for every test video: six views, each scored, then
/// averaged.
pub fn score_videos(
    model: &ToyModel,
    params: &ParamStore,
    test: &SynthDataset,
    views: &ViewSpec,
    frames: usize,
) -> Result<Vec<PredictionScores>> {
    let sampling = SamplingSpec::uniform(frames);
    test.videos
        .iter()
        .map(|v| {
            let per_view = generate_views(&v.frames, views, &sampling)?
                .iter()
                .map(|view| model.forward(params, &view.frames))
                .collect::<Result<Vec<_>>>()?;
            aggregate_views(&per_view, views)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MemberRun {
    pub name: String,
    pub training: TrainOutcome,
    pub scores: Vec<PredictionScores>,
    pub metrics: MetricReport,
}

pub fn run_member(
    cfg: &ExperimentConfig,
    name: &str,
    data: &RunData,
    seed: u64,
) -> Result<MemberRun> {
    let (model, spec) = cfg.member(name)?;
    let train_set = data.train_set(cfg.sampling.frames, cfg.views.side)?;
    let training = train_toy(&model, &train_set, spec, seed)?;
    let scores = score_videos(
        &model,
        &training.params,
        &data.test,
        &cfg.views,
        cfg.sampling.frames,
    )?;
    let metrics = MetricReport::evaluate(&scores, &data.test_labels)?;
    Ok(MemberRun {
        name: name.to_string(),
        training,
        scores,
        metrics,
    })
}

/// Per-video ensemble of the members' scores, in member order.
pub fn ensemble_scores(
    spec: &EnsembleSpec,
    members: &[&[PredictionScores]],
) -> Result<Vec<PredictionScores>> {
    let videos = members.first().map_or(0, |m| m.len());
    if members.iter().any(|m| m.len() != videos) {
        return Err(Error::invalid(
            "ensemble: members scored different video counts",
        ));
    }
    (0..videos)
        .map(|i| {
            let row: Vec<PredictionScores> = members.iter().map(|m| m[i].clone()).collect();
            spec.combine(&row)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub members: Vec<MemberRun>,
    pub ensemble: MetricReport,
}

impl EvalReport {
    /// Verb / noun / action columns with `top-1 (top-5)` cells.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let cell = |a: super::metrics::TaskAccuracy| format!("{:.2} ({:.2})", a.top1, a.top5);
        writeln!(
            out,
            "{:<10} | {:<15} | {:<15} | {:<15}",
            "Method", "Verb", "Noun", "Action"
        )
        .unwrap();
        writeln!(out, "{}", "-".repeat(64)).unwrap();
        let rows = self
            .members
            .iter()
            .map(|m| (m.name.as_str(), m.metrics))
            .chain(std::iter::once(("Ensemble", self.ensemble)));
        for (name, m) in rows {
            writeln!(
                out,
                "{:<10} | {:<15} | {:<15} | {:<15}",
                name,
                cell(m.verb),
                cell(m.noun),
                cell(m.action)
            )
            .unwrap();
        }
        out
    }

    /// `task,top1,top5` for the ensemble.
    pub fn csv(&self) -> String {
        let mut out = String::from("task,top1,top5\n");
        for (task, a) in [
            ("verb", self.ensemble.verb),
            ("noun", self.ensemble.noun),
            ("action", self.ensemble.action),
        ] {
            writeln!(out, "{task},{:.4},{:.4}", a.top1, a.top5).unwrap();
        }
        out
    }
}

/// Trains every ensemble member, scores the test split and ensembles.
pub fn run_eval(cfg: &ExperimentConfig, seed: u64) -> Result<EvalReport> {
    cfg.validate()?;
    let seeds = RunSeeds::from_seed(seed);
    eval_on(cfg, &RunData::generate(cfg, seeds)?, seeds)
}

fn eval_on(cfg: &ExperimentConfig, data: &RunData, seeds: RunSeeds) -> Result<EvalReport> {
    let members = cfg
        .ensemble
        .members
        .iter()
        .map(|name| run_member(cfg, name, data, seeds.model))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&[PredictionScores]> = members.iter().map(|m| m.scores.as_slice()).collect();
    let ensemble =
        MetricReport::evaluate(&ensemble_scores(&cfg.ensemble, &all)?, &data.test_labels)?;
    Ok(EvalReport { members, ensemble })
}

/// An evaluation together with a frame-order control: the GSF member
/// trained and tested on the same videos with their frames shuffled.
#[derive(Debug, Clone)]
pub struct ControlledEval {
    pub report: EvalReport,
    pub shuffled_gsf: MetricReport,
}

impl ControlledEval {
    pub fn member(&self, name: &str) -> Option<&MemberRun> {
        self.report.members.iter().find(|m| m.name == name)
    }

    /// GSF verb top-1 minus the shuffled control's, in points.
    pub fn verb_gap(&self) -> Option<f64> {
        Some(self.member("gsf_toy")?.metrics.verb.top1 - self.shuffled_gsf.verb.top1)
    }
}

pub fn run_controlled_eval(cfg: &ExperimentConfig, seed: u64) -> Result<ControlledEval> {
    cfg.validate()?;
    let seeds = RunSeeds::from_seed(seed);
    let data = RunData::generate(cfg, seeds)?;
    let report = eval_on(cfg, &data, seeds)?;
    let shuffled = data.shuffled_frames(seeds.shuffle)?;
    let shuffled_gsf = run_member(cfg, "gsf_toy", &shuffled, seeds.model)?.metrics;
    Ok(ControlledEval {
        report,
        shuffled_gsf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::toy_default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::toy_default().to_json()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::toy_default().to_json()).unwrap();
        v["train"]["gsf_toy"]["nesterov"] = serde_json::json!(true);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn mismatched_frames_rejected() {
        let mut cfg = ExperimentConfig::toy_default();
        cfg.sampling.frames = 4;
        assert!(cfg.validate().is_err());
    }
}
