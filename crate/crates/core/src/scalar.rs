//! Floating-point abstraction for the numerical kernels.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Scalar type accepted by the solvers and walk kernels (`f32` or `f64`).
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn of_usize(x: usize) -> Self {
        Self::from_usize(x).expect("representable count")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
