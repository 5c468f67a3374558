//! Desk-scale neural machine translation toolkit.

pub mod autodiff;
pub mod backtranslation;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod subword;
pub mod tensor;
pub mod toy;
pub mod training;

pub use autodiff::{Graph, PadMode, Var};
pub use tensor::{DType, Scalar, Tensor};
