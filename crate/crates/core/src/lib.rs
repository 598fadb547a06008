pub mod config;
pub mod corpus;
pub mod error;
pub mod io;
pub mod lfcc;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use selfcheck::gradcheck_suite;
