pub mod analysis;
pub mod backbone;
pub mod classify;
pub mod diffcore;
pub mod error;
pub mod forecast;
pub mod pipeline;
pub mod pretrain;
pub mod signal;

pub use error::{LblmError, Result};
