//! Multi-head attention whose head aggregation is pluggable: the standard
//! concatenation plus linear map, simple routing-by-agreement, or EM
//! routing-by-agreement.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod optim;
pub mod params;
pub mod routing;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Category, Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
