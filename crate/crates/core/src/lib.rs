//! Contrastive spatial-temporal separable (CSTS) audio-visual fusion for
//! egocentric gaze anticipation, at configurable scale.
//!
//! The crate is organised bottom-up: [`tensor`] and [`autograd`] form the
//! numeric substrate; [`audio`] turns waveforms into spectrogram stacks;
//! [`encoders`], [`fusion`] and [`heads`] make up the model, assembled in
//! [`model`]; [`metrics`], [`data`] and [`train`] cover evaluation, I/O and
//! optimisation.

pub mod audio;
pub mod autograd;
pub mod data;
pub mod error;
pub mod encoders;
pub mod fusion;
pub mod gradsuite;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, ParamId, ParamStore, Precision, Var};
pub use error::{CstsError, Result};
pub use model::{Model, ModelConfig, Sample};
pub use tensor::Tensor;
