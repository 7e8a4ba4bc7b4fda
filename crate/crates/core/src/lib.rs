//! Hybrid coarse-solver plus correction-network training where the solver is
//! a black box. Network weights get exact reverse-mode gradients; coarse mesh
//! coordinates get zeroth-order estimates built from forward solves only.

mod clock;
pub mod check;
#[cfg(feature = "cli")]
pub mod cli;
pub mod error;
pub mod grid;
pub mod net;
pub mod optim;
mod par;
pub mod solver;
pub mod train;
pub mod zo;

pub use error::{Error, Result};
pub use par::init_thread_pool;
