//! Zero-terminal-SNR noise schedule and v-prediction algebra.
//!
//! With `a = sqrt(alpha_bar_t)` and `b = sqrt(1 - alpha_bar_t)` (so `a^2 + b^2 = 1`):
//!
//! ```text
//! z_t = a * z_V + b * eps
//! v   = a * eps - b * z_V
//! z_V = a * z_t - b * v
//! eps = b * z_t + a * v
//! ```

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::num::Real;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiffusionError {
    #[error("schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("timestep {t} outside 0..={max}")]
    Timestep { t: usize, max: usize },
    #[error("shape mismatch: {a:?} vs {b:?}")]
    Shape { a: (usize, usize), b: (usize, usize) },
    #[error("sampler step must move towards t=0, got {from} -> {to}")]
    StepOrder { from: usize, to: usize },
}

/// Base `alpha_bar` curve before the zero-terminal-SNR rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaseSchedule {
    /// `beta_t` linear in `t` from `1e-4` to `2e-2`.
    Linear,
    /// `sqrt(beta_t)` linear from `sqrt(8.5e-4)` to `sqrt(1.2e-2)`.
    ScaledLinear,
    /// `alpha_bar(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)` normalised by its value at 0, `s = 0.008`.
    #[default]
    Cosine,
}

/// `alpha_bar[t]` for `t` in `0..=T`; strictly decreasing from exactly 1 to exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

fn base_alpha_bar(base: BaseSchedule, steps: usize) -> Vec<f64> {
    let t_max = steps as f64;
    match base {
        BaseSchedule::Linear | BaseSchedule::ScaledLinear => {
            let beta = |t: usize| -> f64 {
                let frac = (t - 1) as f64 / (steps - 1) as f64;
                match base {
                    BaseSchedule::Linear => 1e-4 + frac * (2e-2 - 1e-4),
                    _ => {
                        let (lo, hi) = (8.5e-4f64.sqrt(), 1.2e-2f64.sqrt());
                        (lo + frac * (hi - lo)).powi(2)
                    }
                }
            };
            let mut out = Vec::with_capacity(steps + 1);
            let mut acc = 1.0;
            out.push(acc);
            for t in 1..=steps {
                acc *= 1.0 - beta(t);
                out.push(acc);
            }
            out
        }
        BaseSchedule::Cosine => {
            let s = 0.008;
            let f = |t: f64| (((t / t_max + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let f0 = f(0.0);
            (0..=steps).map(|t| f(t as f64) / f0).collect()
        }
    }
}

pub fn make_zero_snr_schedule(steps: usize) -> Result<NoiseSchedule, DiffusionError> {
    NoiseSchedule::zero_snr(steps, BaseSchedule::default())
}

impl NoiseSchedule {
    /// Shifts and scales `sqrt(alpha_bar)` of `base` so the first value is 1 and the
    /// last is 0.
    pub fn zero_snr(steps: usize, base: BaseSchedule) -> Result<Self, DiffusionError> {
        if steps < 2 {
            return Err(DiffusionError::TooFewSteps(steps));
        }
        let sqrt_ab: Vec<f64> = base_alpha_bar(base, steps).iter().map(|a| a.sqrt()).collect();
        let first = sqrt_ab[0];
        let last = sqrt_ab[steps];
        let alpha_bar = sqrt_ab
            .iter()
            .map(|&s| {
                let r = (s - last) * first / (first - last);
                r * r
            })
            .collect::<Vec<_>>();
        let mut sched = NoiseSchedule { alpha_bar };
        // exact endpoints regardless of rounding in the affine map
        sched.alpha_bar[0] = 1.0;
        sched.alpha_bar[steps] = 0.0;
        Ok(sched)
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64), DiffusionError> {
        let ab = *self.alpha_bar.get(t).ok_or(DiffusionError::Timestep {
            t,
            max: self.steps(),
        })?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Descending timesteps `T = t_0 > .. > t_k = 0` spaced uniformly over `k` steps.
    pub fn uniform_grid(&self, steps: usize) -> Vec<usize> {
        let t_max = self.steps();
        let k = steps.clamp(1, t_max);
        let mut grid: Vec<usize> = (0..=k)
            .rev()
            .map(|i| ((i * t_max) as f64 / k as f64).round() as usize)
            .collect();
        grid.dedup();
        grid
    }
}

fn same_shape<F>(a: ArrayView2<F>, b: ArrayView2<F>) -> Result<(), DiffusionError> {
    if a.dim() != b.dim() {
        return Err(DiffusionError::Shape { a: a.dim(), b: b.dim() });
    }
    Ok(())
}

/// `a * x + b * y` with schedule coefficients cast to `F`.
fn combine<F: Real>(a: f64, x: ArrayView2<F>, b: f64, y: ArrayView2<F>) -> Array2<F> {
    let (a, b) = (F::lit(a), F::lit(b));
    let mut out = Array2::zeros(x.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(&x)
        .and(&y)
        .for_each(|o, &x, &y| *o = a * x + b * y);
    out
}

/// Noised latents `z_t = sqrt(ab) * z_V + sqrt(1 - ab) * eps`.
pub fn forward_perturb<F: Real>(
    z_v: ArrayView2<F>,
    eps: ArrayView2<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<F>, DiffusionError> {
    same_shape(z_v, eps)?;
    let (a, b) = sched.coefficients(t)?;
    Ok(combine(a, z_v, b, eps))
}

/// Velocity target `v = sqrt(ab) * eps - sqrt(1 - ab) * z_V`.
pub fn velocity_target<F: Real>(
    z_v: ArrayView2<F>,
    eps: ArrayView2<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<F>, DiffusionError> {
    same_shape(z_v, eps)?;
    let (a, b) = sched.coefficients(t)?;
    Ok(combine(a, eps, -b, z_v))
}

/// Inverts the `(z_t, v)` pair back to `(z_V, eps)`.
pub fn recover_clean<F: Real>(
    z_t: ArrayView2<F>,
    v: ArrayView2<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Array2<F>, Array2<F>), DiffusionError> {
    same_shape(z_t, v)?;
    let (a, b) = sched.coefficients(t)?;
    Ok((combine(a, z_t, -b, v), combine(b, z_t, a, v)))
}

/// Deterministic DDIM update from `t` to `t_next` using a predicted velocity.
/// `t_next == t` returns `z_t` unchanged.
pub fn ddim_step<F: Real>(
    z_t: ArrayView2<F>,
    v_pred: ArrayView2<F>,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<F>, DiffusionError> {
    same_shape(z_t, v_pred)?;
    if t_next > t || t > sched.steps() {
        return Err(DiffusionError::StepOrder { from: t, to: t_next });
    }
    if t_next == t {
        return Ok(z_t.to_owned());
    }
    let (z_v, eps) = recover_clean(z_t, v_pred, t, sched)?;
    forward_perturb(z_v.view(), eps.view(), t_next, sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{max_abs_diff, randn};
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line rescaling for the linear base, written independently of the
    /// schedule code: cumulative product, square root, shift, scale, square.
    fn reference_linear(steps: usize, t: usize) -> f64 {
        let betas: Vec<f64> = (0..steps)
            .map(|i| 1e-4 + (2e-2 - 1e-4) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut prod = vec![1.0];
        for b in &betas {
            let last = *prod.last().unwrap();
            prod.push(last * (1.0 - b));
        }
        let s0 = prod[0].sqrt();
        let st = prod[steps].sqrt();
        let s = prod[t].sqrt();
        ((s - st) / (s0 - st) * s0).powi(2)
    }

    #[test]
    fn endpoints_and_monotonicity() {
        for base in [BaseSchedule::Linear, BaseSchedule::ScaledLinear, BaseSchedule::Cosine] {
            for steps in [2, 3, 10, 100, 1000] {
                let s = NoiseSchedule::zero_snr(steps, base).unwrap();
                assert_eq!(s.alpha_bar(0), 1.0);
                assert_eq!(s.alpha_bar(steps), 0.0);
                assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]), "{base:?} {steps}");
            }
        }
        assert_eq!(make_zero_snr_schedule(1), Err(DiffusionError::TooFewSteps(1)));
    }

    #[test]
    fn linear_base_matches_reference() {
        let s = NoiseSchedule::zero_snr(1000, BaseSchedule::Linear).unwrap();
        for t in [1, 250, 500, 999] {
            assert!((s.alpha_bar(t) - reference_linear(1000, t)).abs() < 1e-12, "t={t}");
        }
    }

    fn scalar_schedule(alpha_bar: f64) -> NoiseSchedule {
        NoiseSchedule {
            alpha_bar: vec![1.0, alpha_bar, 0.0],
        }
    }

    #[test]
    fn scalar_examples() {
        let s = scalar_schedule(0.25);
        let z = arr2(&[[2.0f64]]);
        let e = arr2(&[[1.0f64]]);
        let zt = forward_perturb(z.view(), e.view(), 1, &s).unwrap();
        assert!((zt[[0, 0]] - (1.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((zt[[0, 0]] - 1.8660).abs() < 1e-4);
        let v = velocity_target(z.view(), e.view(), 1, &s).unwrap();
        assert!((v[[0, 0]] - (0.5 - 2.0 * 0.75f64.sqrt())).abs() < 1e-12);
        assert!((v[[0, 0]] + 1.2321).abs() < 1e-4);
        let (zv, eps) = recover_clean(zt.view(), v.view(), 1, &s).unwrap();
        assert!((zv[[0, 0]] - 2.0).abs() < 1e-6);
        assert!((eps[[0, 0]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn endpoint_timesteps() {
        let s = make_zero_snr_schedule(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Array2<f64> = randn(&mut rng, 3, 4, 1.0);
        let e: Array2<f64> = randn(&mut rng, 3, 4, 1.0);
        assert_eq!(forward_perturb(z.view(), e.view(), 0, &s).unwrap(), z);
        assert_eq!(forward_perturb(z.view(), e.view(), 50, &s).unwrap(), e);
        assert_eq!(velocity_target(z.view(), e.view(), 0, &s).unwrap(), e);
        assert_eq!(velocity_target(z.view(), e.view(), 50, &s).unwrap(), -&z);
        let (zv, _) = recover_clean(z.view(), e.view(), 0, &s).unwrap();
        assert_eq!(zv, z);
    }

    #[test]
    fn round_trip_every_timestep() {
        let s = make_zero_snr_schedule(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Array2<f32> = randn(&mut rng, 4, 8, 1.0);
        let e: Array2<f32> = randn(&mut rng, 4, 8, 1.0);
        for t in 0..=100 {
            let zt = forward_perturb(z.view(), e.view(), t, &s).unwrap();
            let v = velocity_target(z.view(), e.view(), t, &s).unwrap();
            let (zv, eps) = recover_clean(zt.view(), v.view(), t, &s).unwrap();
            assert!(max_abs_diff(zv.view(), z.view()) <= 1e-6, "t={t}");
            assert!(max_abs_diff(eps.view(), e.view()) <= 1e-6, "t={t}");
        }
    }

    #[test]
    fn ddim_with_exact_velocity() {
        let s = make_zero_snr_schedule(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Array2<f64> = randn(&mut rng, 2, 3, 1.0);
        let e: Array2<f64> = randn(&mut rng, 2, 3, 1.0);
        let zt = forward_perturb(z.view(), e.view(), 100, &s).unwrap();
        let v = velocity_target(z.view(), e.view(), 100, &s).unwrap();
        assert_eq!(ddim_step(zt.view(), v.view(), 100, 100, &s).unwrap(), zt);
        let one = ddim_step(zt.view(), v.view(), 100, 0, &s).unwrap();
        assert!(max_abs_diff(one.view(), z.view()) < 1e-12);

        // ten steps: along the deterministic path the noise estimate stays `e`
        let mut cur = zt;
        for pair in s.uniform_grid(10).windows(2) {
            let v = velocity_target(z.view(), e.view(), pair[0], &s).unwrap();
            cur = ddim_step(cur.view(), v.view(), pair[0], pair[1], &s).unwrap();
        }
        assert!(max_abs_diff(cur.view(), one.view()) < 1e-5);
        assert!(matches!(
            ddim_step(z.view(), z.view(), 3, 5, &s),
            Err(DiffusionError::StepOrder { .. })
        ));
    }

    #[test]
    fn shape_and_range_errors() {
        let s = make_zero_snr_schedule(10).unwrap();
        let a = Array2::<f64>::zeros((2, 2));
        let b = Array2::<f64>::zeros((2, 3));
        assert!(matches!(forward_perturb(a.view(), b.view(), 1, &s), Err(DiffusionError::Shape { .. })));
        assert!(matches!(
            velocity_target(a.view(), a.view(), 11, &s),
            Err(DiffusionError::Timestep { t: 11, max: 10 })
        ));
    }

    #[test]
    fn grid_is_uniform_and_descending() {
        let s = make_zero_snr_schedule(100).unwrap();
        assert_eq!(s.uniform_grid(1), vec![100, 0]);
        assert_eq!(s.uniform_grid(4), vec![100, 75, 50, 25, 0]);
        assert_eq!(s.uniform_grid(100).len(), 101);
        assert_eq!(s.uniform_grid(500).len(), 101);
    }
}
