//! Differentiable op vocabulary. Most ops are methods on [`Var`](super::Var);
//! multi-input ops (`concat`, `fft2`, `ifft2`) are free functions.

pub mod conv;
pub mod elementwise;
pub mod fft;
pub mod reduce;
pub mod shape;

pub use conv::ConvOpts;
pub use elementwise::sigmoid;
pub use fft::{fft2, fft2_tensor, ifft2, ifft2_tensor, ComplexVar};
pub use shape::{concat, reflect_index, GatherIndex};
