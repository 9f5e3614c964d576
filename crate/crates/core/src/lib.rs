//! Multi-source dialog generation: a small reverse-mode autodiff engine, a
//! Transformer encoder-decoder with one encoder per context source and a
//! copy head over knowledge tokens, a consistency selector that reranks
//! sampled candidates, training loops and checkpoints.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`.

pub mod checkpoint;
pub mod copy_head;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod selector;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph<'a> = graph::Graph<'a, f64>;
pub type ParamStore = params::ParamStore<f64>;
pub use graph::Var;
pub use params::ParamId;
pub use tensor::TensorError;
pub use error::ModelError;
pub type GeneratorModel = generator::GeneratorModel<f64>;
pub use generator::{Architecture, Candidate, CandidatePool, ContextIds, DecodingParams, Example, Source};
pub use transformer::ModelConfig;
pub type SelectorModel = selector::SelectorModel<f64>;
pub use selector::{Reranked, SelectorPair};
pub use trainer::{LogRecord, Phase, TrainConfig};
