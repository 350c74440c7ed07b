pub mod attention;
pub mod checkpoint;
pub mod codes;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod ndtensor;
pub mod net;
pub mod retrieval;
pub mod solver;
pub mod trainer;

pub use error::{Error, Result};
