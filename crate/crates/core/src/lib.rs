pub mod audio;
pub mod bench;
pub mod error;
pub mod eval;
pub mod framing;
pub mod gpcore;
pub mod kernel;
pub mod kernelfit;
pub mod linalg;
pub mod optim;
pub mod sparsevi;

pub use error::{Error, Result};
