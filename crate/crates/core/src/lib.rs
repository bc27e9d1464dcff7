pub mod checkpoint;
pub mod error;
pub mod font_net;
pub mod glyph;
pub mod gradcheck;
pub mod losses;
pub mod nst;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{BoundParams, NetworkParams};
pub use tensor::{BnMode, Gradients, Graph, RunningStats, Tensor, Var};
