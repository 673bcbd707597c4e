//! Verb/noun/action classification heads, the action vocabulary, the
//! multi-task loss and score averaging.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::textfmt::fmt_g;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCounts {
    pub verbs: usize,
    pub nouns: usize,
    pub actions: usize,
}

impl ClassCounts {
    pub fn validate(&self) -> Result<()> {
        if self.verbs == 0 || self.nouns == 0 || self.actions == 0 {
            return Err(Error::Config(format!(
                "class counts must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Verb,
    Noun,
    Action,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Verb, Task::Noun, Task::Action];

    pub fn name(self) -> &'static str {
        match self {
            Task::Verb => "verb",
            Task::Noun => "noun",
            Task::Action => "action",
        }
    }
}

/// Observed verb–noun pairs, numbered in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionVocab {
    verbs: usize,
    nouns: usize,
    pairs: Vec<(usize, usize)>,
    pair_to_action: HashMap<(usize, usize), usize>,
}

impl ActionVocab {
    /// Rows are 1-based in error messages.
    pub fn build(verbs: usize, nouns: usize, annotations: &[(usize, usize)]) -> Result<Self> {
        if annotations.is_empty() {
            return Err(Error::invalid("action vocabulary: no annotations"));
        }
        let mut pairs = Vec::new();
        let mut pair_to_action = HashMap::new();
        for (row, &(v, n)) in annotations.iter().enumerate() {
            if v >= verbs || n >= nouns {
                return Err(Error::invalid(format!(
                    "action vocabulary: row {}: pair ({v}, {n}) outside {verbs} verbs x {nouns} nouns",
                    row + 1
                )));
            }
            pair_to_action.entry((v, n)).or_insert_with(|| {
                pairs.push((v, n));
                pairs.len() - 1
            });
        }
        Ok(Self {
            verbs,
            nouns,
            pairs,
            pair_to_action,
        })
    }

    pub fn verbs(&self) -> usize {
        self.verbs
    }

    pub fn nouns(&self) -> usize {
        self.nouns
    }

    pub fn actions(&self) -> usize {
        self.pairs.len()
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts {
            verbs: self.verbs,
            nouns: self.nouns,
            actions: self.actions(),
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Action id of a pair, or `None` for pairs never observed.
    pub fn compose(&self, verb: usize, noun: usize) -> Result<Option<usize>> {
        if verb >= self.verbs || noun >= self.nouns {
            return Err(Error::invalid(format!(
                "compose: ({verb}, {noun}) outside {} verbs x {} nouns",
                self.verbs, self.nouns
            )));
        }
        Ok(self.pair_to_action.get(&(verb, noun)).copied())
    }

    pub fn decompose(&self, action: usize) -> Option<(usize, usize)> {
        self.pairs.get(action).copied()
    }
}

/// One annotation row: `segment_id,verb_id,noun_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub segment_id: String,
    pub verb: usize,
    pub noun: usize,
}

pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header))
            if header
                .split(',')
                .map(str::trim)
                .eq(["segment_id", "verb_id", "noun_id"]) => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                reason: "expected header `segment_id,verb_id,noun_id`".into(),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let err = |reason: String| Error::Parse {
                line: i + 1,
                reason,
            };
            if fields.len() != 3 {
                return Err(err(format!("expected 3 columns, got {}", fields.len())));
            }
            let id = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| err(format!("bad id `{s}`: {e}")))
            };
            Ok(Annotation {
                segment_id: fields[0].to_string(),
                verb: id(fields[1])?,
                noun: id(fields[2])?,
            })
        })
        .collect()
}

pub fn write_annotations(rows: &[Annotation]) -> String {
    let mut out = String::from("segment_id,verb_id,noun_id\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.segment_id, r.verb, r.noun).unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Logits,
    Probabilities,
}

/// Verb, noun and action scores for one view, clip, video or ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionScores {
    pub verb: Tensor,
    pub noun: Tensor,
    pub action: Tensor,
    pub kind: ScoreKind,
}

impl PredictionScores {
    pub fn logits(verb: Tensor, noun: Tensor, action: Tensor) -> Self {
        Self {
            verb,
            noun,
            action,
            kind: ScoreKind::Logits,
        }
    }

    pub fn task(&self, task: Task) -> &Tensor {
        match task {
            Task::Verb => &self.verb,
            Task::Noun => &self.noun,
            Task::Action => &self.action,
        }
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts {
            verbs: self.verb.len(),
            nouns: self.noun.len(),
            actions: self.action.len(),
        }
    }

    /// Per-task probabilities: softmax of logits, or renormalised scores.
    pub fn normalized(&self) -> PredictionScores {
        let norm = |t: &Tensor| match self.kind {
            ScoreKind::Logits => ops::softmax_lastdim(t).expect("non-empty scores"),
            ScoreKind::Probabilities => {
                let total = t.sum();
                t.map(|x| x / total)
            }
        };
        PredictionScores {
            verb: norm(&self.verb),
            noun: norm(&self.noun),
            action: norm(&self.action),
            kind: ScoreKind::Probabilities,
        }
    }
}

/// Head outputs on a backend.
#[derive(Debug, Clone)]
pub struct TaskLogits<V> {
    pub verb: V,
    pub noun: V,
    pub action: V,
}

impl TaskLogits<Tensor> {
    pub fn into_scores(self) -> PredictionScores {
        PredictionScores::logits(self.verb, self.noun, self.action)
    }
}

/// Adds `head.{verb,noun,action}.{w,b}` for a `dim`-wide feature.
pub fn init_head_params(
    store: &mut ParamStore,
    dim: usize,
    counts: ClassCounts,
    rng: &mut impl Rng,
) -> Result<()> {
    for (task, n) in [
        ("verb", counts.verbs),
        ("noun", counts.nouns),
        ("action", counts.actions),
    ] {
        store.insert_uniform(format!("head.{task}.w"), vec![dim, n], dim, rng)?;
        store.insert_uniform(format!("head.{task}.b"), vec![n], dim, rng)?;
    }
    Ok(())
}

/// Three independent affine maps from a `[D]` feature.
pub fn multitask_heads<B: Backend>(
    backend: &B,
    params: &Bound<B::Value>,
    feature: &B::Value,
) -> Result<TaskLogits<B::Value>> {
    let dim = backend.shape(feature).iter().product::<usize>();
    let row = backend.reshape(feature, &[1, dim])?;
    let head = |task: &str| -> Result<B::Value> {
        let w = params.get(&format!("head.{task}.w"))?;
        let b = params.get(&format!("head.{task}.b"))?;
        let w_shape = backend.shape(w);
        if w_shape[0] != dim {
            return Err(Error::shape("multitask_heads", &[dim], &w_shape));
        }
        let y = backend.linear(&row, w, b)?;
        backend.reshape(&y, &[w_shape[1]])
    };
    Ok(TaskLogits {
        verb: head("verb")?,
        noun: head("noun")?,
        action: head("action")?,
    })
}

/// Ground-truth labels for the three tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskLabels {
    pub verb: usize,
    pub noun: usize,
    /// `None` when the verb–noun pair is outside the vocabulary.
    pub action: Option<usize>,
}

impl TaskLabels {
    pub fn get(&self, task: Task) -> Option<usize> {
        match task {
            Task::Verb => Some(self.verb),
            Task::Noun => Some(self.noun),
            Task::Action => self.action,
        }
    }
}

/// Unweighted sum of the three cross-entropies.
pub fn multitask_loss_on<B: Backend>(
    backend: &B,
    logits: &TaskLogits<B::Value>,
    target: &TaskLabels,
) -> Result<B::Value> {
    let action = target
        .action
        .ok_or_else(|| Error::invalid("multitask_loss: target has no action id"))?;
    let lv = backend.cross_entropy(&logits.verb, target.verb)?;
    let ln = backend.cross_entropy(&logits.noun, target.noun)?;
    let la = backend.cross_entropy(&logits.action, action)?;
    backend.add(&backend.add(&lv, &ln)?, &la)
}

pub fn multitask_loss(scores: &PredictionScores, target: &TaskLabels) -> Result<f64> {
    let as_logits = |t: &Tensor| match scores.kind {
        ScoreKind::Logits => t.clone(),
        ScoreKind::Probabilities => t.map(f64::ln),
    };
    let logits = TaskLogits {
        verb: as_logits(&scores.verb),
        noun: as_logits(&scores.noun),
        action: as_logits(&scores.action),
    };
    multitask_loss_on(&crate::Eval, &logits, target)?.item()
}

/// Sum with a reduction order fixed by the values themselves: sorted, then
/// summed as a balanced binary tree. Permuting the inputs cannot change
/// the result.
pub(crate) fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    pairwise(values)
}

fn pairwise(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => pairwise(&values[..n / 2]) + pairwise(&values[n / 2..]),
    }
}

/// Mean of the members' normalised scores, per task and class.
pub fn ensemble_average(members: &[PredictionScores]) -> Result<PredictionScores> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("ensemble_average: no members"))?;
    let counts = first.counts();
    if let Some(bad) = members.iter().find(|m| m.counts() != counts) {
        return Err(Error::invalid(format!(
            "ensemble_average: member extents {:?} differ from {:?}",
            bad.counts(),
            counts
        )));
    }
    let normalized: Vec<PredictionScores> = members.iter().map(|m| m.normalized()).collect();
    let k = members.len() as f64;
    let average = |task: Task| {
        let n = normalized[0].task(task).len();
        let mut column = Vec::with_capacity(normalized.len());
        let data = (0..n)
            .map(|c| {
                column.clear();
                column.extend(normalized.iter().map(|m| m.task(task).data()[c]));
                canonical_sum(&mut column) / k
            })
            .collect::<Vec<_>>();
        Tensor::from_parts(vec![n], data)
    };
    Ok(PredictionScores {
        verb: average(Task::Verb),
        noun: average(Task::Noun),
        action: average(Task::Action),
        kind: ScoreKind::Probabilities,
    })
}

/// Member weighting of an ensemble. Only the uniform mean is defined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleWeights {
    #[default]
    Uniform,
}

/// Named score sources averaged into one prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub members: Vec<String>,
    #[serde(default)]
    pub weights: EnsembleWeights,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Config(
                "ensemble: at least one member required".into(),
            ));
        }
        Ok(())
    }

    /// Averages one score set per member, given in member order.
    pub fn combine(&self, scores: &[PredictionScores]) -> Result<PredictionScores> {
        self.validate()?;
        if scores.len() != self.members.len() {
            return Err(Error::invalid(format!(
                "ensemble: {} members configured, {} score sets given",
                self.members.len(),
                scores.len()
            )));
        }
        ensemble_average(scores)
    }
}

/// Score file rows: `segment_id,v0..v{V-1},n0..n{N-1},a0..a{A-1}` at `%.9g`.
pub fn write_score_file(rows: &[(String, PredictionScores)]) -> String {
    let mut out = String::new();
    for (id, s) in rows {
        out.push_str(id);
        for t in [&s.verb, &s.noun, &s.action] {
            for &x in t.data() {
                out.push(',');
                out.push_str(&fmt_g(x, 9));
            }
        }
        out.push('\n');
    }
    out
}

/// Reads a score file written by [`write_score_file`]; scores are taken as
/// normalised probabilities.
pub fn parse_score_file(
    text: &str,
    counts: ClassCounts,
) -> Result<Vec<(String, PredictionScores)>> {
    let width = counts.verbs + counts.nouns + counts.actions;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let err = |reason: String| Error::Parse {
                line: i + 1,
                reason,
            };
            let mut fields = line.split(',').map(str::trim);
            let id = fields.next().unwrap_or_default().to_string();
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| err(format!("bad score `{f}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != width {
                return Err(err(format!(
                    "expected {width} scores, got {}",
                    values.len()
                )));
            }
            let (v, rest) = values.split_at(counts.verbs);
            let (n, a) = rest.split_at(counts.nouns);
            let t = |x: &[f64]| Tensor::from_parts(vec![x.len()], x.to_vec());
            Ok((
                id,
                PredictionScores {
                    verb: t(v),
                    noun: t(n),
                    action: t(a),
                    kind: ScoreKind::Probabilities,
                },
            ))
        })
        .collect()
}
