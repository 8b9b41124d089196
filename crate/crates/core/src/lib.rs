pub mod clusters;
pub mod error;
pub mod isoperimetry;
pub mod lattice;
pub mod linalg;
pub mod perforate;
pub mod regularity;
pub mod renorm;
pub mod rng;
pub mod samplers;
pub mod scalar;
pub mod walk;

pub use error::{Error, Result};

/// Double-precision walk kernel.
pub type Kernel = walk::WalkKernel<f64>;
/// Double-precision continuous-time kernel.
pub type CtKernel = walk::CtKernel<f64>;
/// Double-precision killed Green function.
pub type GreenField = walk::GreenField<f64>;
/// Double-precision weak Poincaré estimate.
pub type PoincareConstant = isoperimetry::PoincareConstant<f64>;
