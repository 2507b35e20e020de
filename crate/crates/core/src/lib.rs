//! Translation-ensemble defenses for convolutional networks, with the
//! attacks used to evaluate them and a small stereo-matching testbed.
//!
//! Everything runs on a dense `f64` [`Tensor`] with a tape-based
//! reverse-mode [`Graph`].

pub mod archive;
pub mod attacks;
pub mod defense;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod group;
pub mod kernels;
pub mod model;
pub mod seed;
pub mod stereo;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use group::{GroupAction, Rounding, Shift, ShiftSet};
pub use kernels::PadMode;
pub use tensor::Tensor;
pub use model::{LabeledImages, Model, ModelSpec, TrainConfig, WeightBundle};
pub use defense::{Defense, DefenseConfig, DefenseMode};
pub use attacks::{AdversarialExample, AttackConfig, AttackKind};
