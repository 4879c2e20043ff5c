pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod linalg;
pub mod nonlocal;
pub mod ops;
pub mod spatial_bias;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
