pub mod causal;
pub mod cli;
pub mod error;
pub mod g2af;
pub mod imageio;
pub mod len;
pub mod network;
pub mod nn;
pub mod numerics;
pub mod objective;
pub mod uad;
pub mod verify;

pub use error::{Error, Result};
