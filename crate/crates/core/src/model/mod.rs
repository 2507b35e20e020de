//! Sequential CNN classifiers and encoders described as data, with named
//! tap points, SGD training and weight persistence.

mod bundle;
mod net;
mod spec;
mod train;

pub use bundle::{TrainingMeta, WeightBundle};
pub use net::{accuracy_of, Model};
pub use spec::{Layer, ModelSpec, TapPoint, TapSpec};
pub use train::{train, LabeledImages, TrainConfig};
