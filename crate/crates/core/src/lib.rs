pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod colormap;
pub mod config;
pub mod dataset;
pub mod error;
pub mod mdm;
pub mod model;
pub mod optim;
pub mod protolayer;
pub mod rng;
pub mod saliency_eval;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
