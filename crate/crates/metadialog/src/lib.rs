//! Meta-learned domain adaptation for task-oriented dialog generation.
//!
//! The pipeline: generate multi-domain slot-filling dialogs with oracle
//! belief annotations, train a copy-augmented belief-span seq2seq model
//! either with first-order MAML across source domains or on pooled data
//! (transfer baseline), adapt to an unseen domain with a handful of
//! dialogs, and score BLEU / Entity F1 / adaptation epochs.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod datagen;
pub mod domains;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod par;
pub mod schema;
pub mod train;

pub use autodiff::{AdamState, Graph, Param, ParamSet, Tensor};
pub use error::Error;
