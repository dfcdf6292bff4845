pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod init;
pub mod optim;
pub mod prompts;
pub mod training;

pub use error::{Error, Result};
