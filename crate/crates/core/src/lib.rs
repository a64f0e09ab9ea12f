pub mod autodiff;
pub mod error;
pub mod tensor;

pub use error::{Result, TdlpError};
pub mod io;
pub mod synth;
pub mod features;
pub mod model;
pub mod assoc;
pub mod training;
pub mod tracker;
pub mod eval;
pub mod experiments;
