pub mod analysis;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{GateKind, ModelConfig, Network, ParamStore, RouteRecord};
pub use tensor::{Tape, Tensor, Var};
