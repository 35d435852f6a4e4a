pub mod dense;
pub mod error;
pub mod qgemm;
pub mod qlayers;
pub mod qnonlinear;
pub mod qtensor;
pub mod trainer;

pub use error::{Error, Result};
pub use qtensor::{BlockQuantTensor, DenseTensor, QuantScheme};
