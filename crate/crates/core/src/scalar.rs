//! Floating-point abstraction shared by the numerical foundation.
//!
//! The grid, quadrature, Hermite, ODE, banded-solver and series layers are
//! generic over [`Real`]. The profile/spectral/corrector/simulator pipeline
//! is instantiated at `f64` because its tolerances sit below `f32` epsilon.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar type accepted by the generic layers.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + NumAssign + Sum + Copy + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal not representable")
    }

    /// Conversion from a count or index.
    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize not representable")
    }

    /// Widen to `f64` for diagnostics and I/O.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Real for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Sum
        + Copy
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

/// Shorthand used throughout the generic code.
#[inline]
pub fn c<T: Real>(x: f64) -> T {
    T::lit(x)
}

/// Integer power by repeated squaring, used for the `p`-th power when `p` is integral.
#[inline]
pub fn powi<T: Real>(x: T, n: i32) -> T {
    x.powi(n)
}

/// `x^p` for real `p`, falling back to `powi` when `p` is an integer.
#[inline]
pub fn pow_real<T: Real>(x: T, p: T) -> T {
    let r = p.round();
    if (p - r).abs() <= T::epsilon() && r.abs() < c(64.0) {
        x.powi(r.to_i32().unwrap_or(0))
    } else {
        x.powf(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_power_matches_powf() {
        let x = 0.731_f64;
        assert!((pow_real(x, 7.0) - x.powf(7.0)).abs() < 1e-15);
        assert!((pow_real(x, 6.5) - x.powf(6.5)).abs() < 1e-15);
        let y = 0.731_f32;
        assert!((pow_real(y, 7.0) - y.powf(7.0)).abs() < 1e-6);
    }
}
