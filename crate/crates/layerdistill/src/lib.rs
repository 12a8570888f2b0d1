pub mod autodiff;
pub mod checkpoint;
pub mod distiller;
pub mod encoder;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod losses;
pub mod mapping;
pub mod masking;
pub mod optim;
pub mod probe;
pub mod rng;

pub use error::{Error, Result};
