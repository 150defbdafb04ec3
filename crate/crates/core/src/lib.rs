//! Multimodal chain-of-thought pipeline for structural damage identification.

pub mod checkpoint;
pub mod cot;
pub mod dataset;
pub mod decoder;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod lora;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod qformer;
pub mod rng;
pub mod segmenter;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vision;

pub use error::{Error, ErrorKind, Result};
pub use param::{ParamId, ParamStore};
pub use rng::RngStream;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
