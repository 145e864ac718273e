pub mod bench;
pub mod block;
pub mod error;
pub mod gradcheck;
pub mod home;
pub mod io;
pub mod par;
pub mod params;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::{Tape, Tensor, Var};
