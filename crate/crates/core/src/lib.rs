//! Generalized-distillation modality hallucination.
//!
//! Train a two-stream classifier on paired modalities, distill the stream of
//! the modality that will be missing at test time into a hallucination
//! network, and deploy a two-stream classifier that needs one modality only.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
mod io;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use autograd::{Gradients, Parameter, Tape, Var};
pub use data::{MultimodalDataset, SplitIndices};
pub use error::{Error, ErrorKind, Result};
pub use losses::{Logits, SoftTargets};
pub use networks::{FusionLayer, LayerSpec, Modality, Model, StreamNet, TwoStreamNet};
pub use optim::{Optimizer, OptimizerKind};
pub use rng::RngState;
pub use tensor::Tensor;
