//! Guided iterative decoding for masked diffusion language models.
//!
//! Generation starts from a prompt followed by mask tokens and fills the
//! masks over a fixed number of steps. Each step can be steered with
//! classifier-free guidance, either against a fully masked input (static
//! CFG) or against an input in which only the currently least confident
//! tokens are re-masked (adaptive CFG).
//!
//! - [`guidance`]: one guidance step over a sequence and a model.
//! - [`decoder`]: the reveal schedule and the decode loop.
//! - [`model`]: the [`Model`] trait with mock, count-based and remote
//!   backends.
//! - [`harness`]: synthetic tasks, evaluation and `(rho, w)` sweeps.
//! - [`trace`]: heatmap and refinement exports of decode traces.

pub mod decoder;
mod error;
pub mod guidance;
pub mod harness;
pub mod model;
pub mod trace;
mod types;

pub use decoder::{decode, make_schedule, sample_token, DecodeConfig, DecodeMode, DecodeResult, Sampler, StepTrace};
pub use error::{Error, Result};
pub use guidance::{acfg_step, apply_cfg, static_cfg_step, ConfidenceMetric, GuidanceConfig, RemaskScope};
pub use model::Model;
pub use types::{LogitMatrix, Matrix, ProbMatrix, TokenId, TokenSeq, Vocab};
