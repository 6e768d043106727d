//! Floating point scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar type: `f32` or `f64`.
///
/// Experiments run in `f64`; the geometry and gating code is written against
/// this trait so it can also be evaluated in single precision.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Orthonormality tolerance accepted by [`crate::manifold::Frame`].
    const FRAME_TOL: f64;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Real for f64 {
    const FRAME_TOL: f64 = 1e-8;
}

impl Real for f32 {
    const FRAME_TOL: f64 = 1e-4;
}
