//! Classifiers trained from one to five labelled examples per class.
//!
//! Training alternates between a prototypical matching objective and a
//! self-distillation plus prototype-contrastive objective on augmented
//! copies of the few available samples. The crate carries its own small
//! reverse-mode autodiff engine, a wide residual encoder, augmentation
//! pipelines, scarce-regime data splitting and per-class evaluation.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Mode, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
