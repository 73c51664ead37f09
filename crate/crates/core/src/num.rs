//! Floating point plumbing shared by the numeric modules.

use ndarray::{Array2, ArrayView2, NdFloat};
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::StandardNormal;

/// Element type of every tensor in the crate. Implemented for `f32` and `f64`.
pub trait Real: NdFloat + FromPrimitive {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    /// Additive bias applied to disallowed attention scores.
    fn mask_bias() -> Self;
}

impl Real for f32 {
    fn mask_bias() -> Self {
        -1e9
    }
}

impl Real for f64 {
    fn mask_bias() -> Self {
        -1e9
    }
}

pub fn randn<F: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        F::lit(z * scale)
    })
}

pub fn all_finite<F: Real>(x: ArrayView2<F>) -> bool {
    x.iter().all(|v| v.is_finite())
}

pub fn max_abs_diff<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>) -> F {
    a.iter()
        .zip(b.iter())
        .fold(F::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}

pub fn cast<F: Real, G: Real>(x: ArrayView2<F>) -> Array2<G> {
    x.mapv(|v| G::lit(v.to_f64().expect("finite")))
}
