use std::fmt::Debug;
use std::iter::Sum;

/// Scalar type the tensor core computes in.
///
/// f32 is the training dtype; f64 exists as a shadow path for gradient
/// verification, where finite-difference noise in f32 would mask real bugs.
pub trait Element:
    num_traits::Float + num_traits::FromPrimitive + Sum + Debug + Default + 'static
{
    const DTYPE_NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Gauss error function, bit-stable across platforms (libm, not the
    /// system math library).
    fn erf(self) -> Self;
}

impl Element for f32 {
    const DTYPE_NAME: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Element for f64 {
    const DTYPE_NAME: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn erf(self) -> Self {
        libm::erf(self)
    }
}
