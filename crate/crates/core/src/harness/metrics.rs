use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{PredictionScores, Task, TaskLabels};
use crate::tensor::Tensor;

/// Whether `label` is among the `k` best classes. Classes are ranked by
/// score, ties going to the lower index.
pub fn in_top_k(scores: &Tensor, label: usize, k: usize) -> bool {
    let s = scores.data();
    let Some(&target) = s.get(label) else {
        return false;
    };
    let ahead = s
        .iter()
        .enumerate()
        .filter(|&(c, &x)| x > target || (x == target && c < label))
        .count();
    ahead < k
}

/// Percentage of samples whose label for `task` is in the top `k`. A sample
/// without a label for the task (an unseen verb–noun pair) counts as a miss.
pub fn topk_accuracy(
    predictions: &[PredictionScores],
    labels: &[TaskLabels],
    task: Task,
    k: usize,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("topk_accuracy: no predictions"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "topk_accuracy: {} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::invalid("topk_accuracy: k must be at least 1"));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| l.get(task).is_some_and(|y| in_top_k(p.task(task), y, k)))
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub verb: TaskAccuracy,
    pub noun: TaskAccuracy,
    pub action: TaskAccuracy,
}

impl MetricReport {
    pub fn evaluate(predictions: &[PredictionScores], labels: &[TaskLabels]) -> Result<Self> {
        let task = |t| -> Result<TaskAccuracy> {
            Ok(TaskAccuracy {
                top1: topk_accuracy(predictions, labels, t, 1)?,
                top5: topk_accuracy(predictions, labels, t, 5)?,
            })
        };
        Ok(Self {
            verb: task(Task::Verb)?,
            noun: task(Task::Noun)?,
            action: task(Task::Action)?,
        })
    }

    pub fn task(&self, task: Task) -> TaskAccuracy {
        match task {
            Task::Verb => self.verb,
            Task::Noun => self.noun,
            Task::Action => self.action,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: &[f64]) -> PredictionScores {
        let t = Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        PredictionScores::logits(t.clone(), t.clone(), t)
    }

    fn labels(y: usize) -> TaskLabels {
        TaskLabels {
            verb: y,
            noun: y,
            action: Some(y),
        }
    }

    #[test]
    fn one_hot_is_perfect() {
        let p = vec![scores(&[0.0, 1.0, 0.0]), scores(&[1.0, 0.0, 0.0])];
        let l = vec![labels(1), labels(0)];
        assert_eq!(topk_accuracy(&p, &l, Task::Verb, 1).unwrap(), 100.0);
    }

    #[test]
    fn ties_favour_lower_index() {
        let flat = scores(&[0.5; 6]);
        for y in 0..6 {
            for k in 1..=6 {
                assert_eq!(in_top_k(flat.task(Task::Noun), y, k), y < k);
            }
        }
    }

    #[test]
    fn missing_action_is_a_miss() {
        let p = vec![scores(&[1.0, 0.0])];
        let l = vec![TaskLabels {
            verb: 0,
            noun: 0,
            action: None,
        }];
        assert_eq!(topk_accuracy(&p, &l, Task::Action, 2).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&p, &l, Task::Verb, 1).unwrap(), 100.0);
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(topk_accuracy(&[], &[], Task::Verb, 1).is_err());
        assert!(topk_accuracy(&[scores(&[1.0])], &[labels(0)], Task::Verb, 0).is_err());
        assert!(topk_accuracy(&[scores(&[1.0])], &[], Task::Verb, 1).is_err());
    }
}
