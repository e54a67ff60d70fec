//! Small dense complex blocks. Phase blocks are at most 3x3, so everything is
//! dense `nalgebra` storage.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub fn c64(re: f64, im: f64) -> C64 {
    Complex64::new(re, im)
}

/// `a b^H`
pub fn outer(a: &CVec, b: &CVec) -> CMat {
    a * b.adjoint()
}

pub fn is_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub fn max_abs(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}
