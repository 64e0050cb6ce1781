//! metrolab: a desk-scale lab for denoising pretraining of text-to-text
//! transformers. An auxiliary masked language model corrupts inputs; the
//! main encoder-decoder is trained jointly on replaced-token detection and
//! corrective language modeling, with ablation variants, prompt finetuning,
//! rank-classification evaluation, and model-introspection reports.

pub mod analysis;
pub mod config;
pub mod data;
pub mod elem;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod ops;
pub mod runner;
pub mod synth;
pub mod tape;
pub mod tasks;
pub mod trainer;
pub mod tensor;
pub mod vocab;

pub use elem::Elem;
pub use error::{Error, Result};
pub use tape::{backward, Gradients, Tape};
pub use tensor::{Param, ParamSet, Tensor, TensorId};
