//! Sampling, test-time views, metrics, complexity measurements, toy
//! training and the synthetic dataset.

pub mod experiment;
pub mod metrics;
pub mod sampling;
pub mod scaling;
pub mod synth;
pub mod train;
pub mod views;

pub use experiment::{run_controlled_eval, run_eval, ControlledEval, EvalReport, ExperimentConfig};
pub use metrics::{topk_accuracy, MetricReport};
pub use sampling::{temporal_jitter, uniform_sample, SamplingMode, SamplingSpec};
pub use scaling::{mac_scaling_experiment, AttentionModel, ScalingReport};
pub use synth::{synth_videos, SynthDataset, SynthSpec};
pub use train::{train_toy, LrSchedule, ToyModel, TrainOutcome, TrainSet, TrainSpec};
pub use views::{aggregate_views, generate_views, three_crops, View, ViewSpec};
