//! Neural feature extractors and classifiers for multichannel EEG epochs.

pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod scalar;
pub mod svm;
pub mod tensor;
pub mod vae;

pub use classifier::{Architecture, ClassifierModel, ModelInput, ModelKind, NetClassifier, Samples};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use vae::{TrainedVae, VaeConfig};
