//! Complete-to-partial distillation for 4D point cloud sequences.
//!
//! The crate covers the whole pipeline: partial-view generation from
//! complete sequences ([`partial_view`]), a small reverse-mode tensor engine
//! ([`autograd`]), asymmetric teacher/student encoders ([`encoders`]), the
//! windowed contrastive objective and its training loop ([`distill`]),
//! procedural labeled scenes and file formats ([`synth`], [`io`]), and
//! linear-probe evaluation with an ablation harness ([`eval`]).

pub mod autograd;
pub mod config;
pub mod distill;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod partial_view;
pub mod rng;
pub mod synth;

pub use config::RunConfig;
pub use error::{Error, Result};
