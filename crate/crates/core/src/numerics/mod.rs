//! Minimal deterministic tensor engine: rank-4 tensors, a define-by-run
//! tape for reverse-mode differentiation, and a finite-difference oracle.

pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, excess_error, fd_gradient, fd_gradient_at, fd_noise_floor, relative_error, CheckOptions, ParamCheck};
pub use ops::{concat, fft2, fft2_tensor, ifft2, ifft2_tensor, ComplexVar, ConvOpts, GatherIndex};
pub use params::{Initializer, ParamStore};
pub use tape::{Gradients, Precision, Tape, Var};
pub use tensor::{ComplexTensor, Shape, Tensor};
