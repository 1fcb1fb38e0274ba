pub mod error;
pub mod mesh;
pub mod phantom;
pub mod sparse;
pub mod forward;
pub mod jacobian;
pub mod regularizers;
pub mod problem;
pub mod irgn;
pub mod mcmc;
pub mod harness;

pub use error::{Error, Result};
