//! Video action recognition building blocks: space-time mixing attention,
//! Gate-Shift-Fuse, multi-task heads with score ensembling, and a
//! multi-view evaluation harness, on a small reverse-mode tensor engine.

pub mod attention;
pub mod backend;
pub mod error;
pub mod gradcheck;
pub mod gsf;
pub mod harness;
pub mod heads;
pub mod mac;
pub mod ops;
pub mod params;
pub mod reference;
pub mod suites;
pub mod tape;
pub mod tensor;
pub mod textfmt;

pub use attention::{
    assemble_mixed_kv, eq1_reference, full_st_attention, spatial_attention, stm_attention,
    AttentionOutput, ChannelPlan, TokenField, XViTConfig,
};
pub use backend::{Backend, Eval};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use gsf::{Fusion, GsfConfig, GsfState, ToyBackboneConfig};
pub use heads::{
    ActionVocab, ClassCounts, EnsembleSpec, PredictionScores, ScoreKind, Task, TaskLabels,
};
pub use mac::MacCounter;
pub use params::ParamStore;
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
