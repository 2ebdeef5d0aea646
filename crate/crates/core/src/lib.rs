pub mod channel;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod koopman;
pub mod neural;
pub mod protocol;

pub use error::{Error, Result};
