//! Depth-estimation toolkit: reverse-mode tensors, high-order derivative
//! stencils, a depth gradient refinement block, optimal-transport depth
//! losses, composite depth losses with evaluation metrics, and a
//! sparse-pixel mask experiment over toy predictors.

pub mod audit;
pub mod dgr;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod mask;
pub mod ops;
pub mod optim;
pub mod ot;
pub mod predictor;
pub mod scene;
pub mod stencil;
pub mod tape;
pub mod tensor;
pub mod toytrain;

pub use error::{Error, Result};
pub use ops::Pad;
pub use stencil::Stencil;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
