pub mod autodiff;
pub mod error;
pub mod eval;

pub use error::{Error, Result};
pub mod model;
pub mod netrecon;
pub mod panel;
pub mod par;
pub mod xai;
