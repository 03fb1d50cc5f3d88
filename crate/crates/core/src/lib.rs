//! Hierarchical contrastive visual prompts for domain generalization.
//!
//! Everything runs on the small reverse-mode engine in [`graph`]: a frozen
//! convolutional extractor feeds a two-level prompt generator ([`hpgn`]),
//! per-layer prompt modulation ([`pmn`]) injects the prompts into a tiny
//! vision transformer ([`vit`]), and training combines cross-entropy with
//! two contrastive objectives ([`losses`]).

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod hpgn;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pmn;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use kernels::Exec;
pub use tensor::Tensor;
