//! Exact small-instance laboratory for discrete diffusion language models.
//!
//! The crate computes forward marginals and reverse kernels of uniform and
//! absorbing discrete diffusion exactly on enumerable state spaces, checks
//! their small-noise scaling numerically, and trains a count-based denoiser
//! on a synthetic walk language to study what it learns first.

pub mod corruption;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod instance;
pub mod language;
pub mod learner;
pub mod probes;
pub mod reverse;
pub mod samplers;
pub mod schedule;
pub mod seed;
pub mod support;
pub mod theory;

pub use domain::{ExplicitDistribution, Mechanism, Token, TokenSeq, MASK};
pub use error::{LabError, Result};
pub use instance::Instance;
pub use language::LanguageSpec;
pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind};
