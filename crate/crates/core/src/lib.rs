//! Workbench for studying co-occurrence hallucination in a toy
//! vision-language captioner and removing it by unlearning in the LM head.
//!
//! Pipeline: [`corpus`] synthesizes biased scenes, captions and questions and
//! the paired counterfactual benchmark; [`model`] is the frozen-backbone
//! captioner; [`train`] runs base training and LM-head unlearning; [`harvest`]
//! turns the model's own hallucinations into unlearning spans; [`metrics`] and
//! [`eval`] score benchmarks and captions; [`probe`] fits linear probes on
//! hidden states; [`pipeline`] stages everything end to end.

pub mod audit;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod harvest;
pub mod hash;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod probe;
pub mod scene;
pub mod seeds;
pub mod svg;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
