pub mod autograd;
pub mod builder;
pub mod config;
pub mod error;
pub mod eval;
pub mod format;
pub mod fusion;
pub mod gnn;
pub mod graph;
pub mod head;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod ordinal;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
