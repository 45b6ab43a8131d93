//! Joint dialog sentiment classification and dialog act recognition.
//!
//! The model reads a dialog through a speaker-aware temporal graph, makes an
//! initial estimate of both label sequences, then refines them over `T`
//! rounds of dual-task reasoning in which each task sees the other's current
//! label distribution. Everything differentiable runs on the small
//! reverse-mode engine in [`tape`].

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use data::{Corpus, Dialog, LabelVocab, TokenVocab, Utterance};
pub use error::{Error, Result};
pub use graph::{RelGraph, Task};
pub use metrics::{Convention, Metrics, TaskMetrics};
pub use model::{Darer, DarerConfig, EncodedDialog, ForwardTrace};
pub use objectives::LossReport;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{evaluate, train, EpochRecord, TrainConfig, TrainOutcome};
