//! Density-guided processing for dense tiny object detection.
//!
//! The crate covers ground-truth density synthesis and a small density
//! regression network ([`density`]), density-driven region selection
//! ([`region`]), focused two-stage attention ([`dafm`]), DCT dual-frequency
//! fusion ([`dffm`]), COCO-style evaluation with tiny-object size buckets
//! ([`eval`]), synthetic scenes ([`synth`]), the file formats used by the
//! command-line tool ([`io`]) and a small density training loop ([`train`]).
//! Everything is `f64` and deterministic.

pub mod attention;
pub mod autodiff;
pub mod dafm;
pub mod density;
pub mod dffm;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod params;
pub mod region;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, grad_check_bundle, Bound, GradCheckReport, Gradients, Tape, Var};
pub use density::{BBoxAnnotation, DensityMap};
pub use error::{Error, Result};
pub use eval::{ApReport, Detection};
pub use params::{ParamBuilder, ParamBundle};
pub use region::{BinaryMask, RegionSet};
pub use rng::SplitMix64;
pub use tensor::Tensor;
