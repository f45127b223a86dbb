pub mod data;
pub mod diffengine;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gnn;
pub mod graphcore;
pub mod losses;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Execution;
