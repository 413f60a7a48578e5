//! Certification engine for zero-shot prompt classifiers under randomized
//! smoothing.
//!
//! A classifier is an [`model::Encoder`] producing embeddings and a
//! [`model::PromptHead`] whose rows are class-prompt embeddings. Besides the
//! standard Monte-Carlo certifier, three faster paths certify novel prompts:
//!
//! * [`certify::certify_modified_irs`] reuses a known prompt's certificate when
//!   predictions under the replayed noise almost always agree.
//! * [`certify::certify_ovc`] replays cached embeddings; it performs no encoder
//!   calls and returns exactly the standard certificate.
//! * [`certify::certify_mvn_ovc`] samples logits from a Gaussian fitted to the
//!   cached embeddings; cheaper to store, but heuristic.

pub mod cache;
pub mod certify;
pub mod cli;
pub mod error;
pub mod model;
pub mod noise;
pub mod stats;

pub use certify::{CertConfig, Certificate, Method};
pub use error::{OvcError, Result};
pub use model::{Encoder, InputPoint, PromptHead};
pub use noise::NoiseStream;
