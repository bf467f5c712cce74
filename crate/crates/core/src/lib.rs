//! Segmentation-free partial volume correction for volumetric nuclear
//! imaging: a densely connected multi-dimensional dynamic convolution
//! U-net, its clinically weighted training losses, the iterative Yang
//! anatomical baseline and a synthetic cardiac phantom pipeline.

#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod conv;
pub mod dataset;
pub mod dynconv;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod phantom;
pub mod pvc;
pub mod tensor;
pub mod train;
pub mod volume;

pub use autodiff::{Gradients, Tape, Var};
pub use conv::ConvGeometry;
pub use error::{PvcError, Result};
pub use tensor::Tensor;
