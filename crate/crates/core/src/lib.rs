//! Grounded 3D visual question answering at desk scale.
//!
//! The crate covers the full pipeline: exact box geometry, the QA sample
//! model and its JSONL schema, procedural scene/question synthesis with
//! answer oracles, dataset extension transforms, a differentiable
//! language/vision/fusion model with grounded answer heads, the four-term
//! training objective with per-source loss masks, the evaluation protocol,
//! and training/evaluation drivers used by the `gqa3d` CLI.

pub mod data;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod geometry;
pub mod lang;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod tape;
pub mod transform;
pub mod vision;

pub use error::{Error, Result};
