pub mod autodiff;
pub mod bottleneck;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod minilm;
pub mod probes;
pub mod tensor;
pub mod trainer;
pub mod vae;

pub use autodiff::{AttnBlock, ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
