//! Transition kernels: log-density evaluator / sampler pairs.
//!
//! The solver talks to kernels exclusively through [`TransitionKernel`]:
//! `log_density` evaluates log p_h^a(y|x) (never exponentiated internally) and
//! `sample` draws the next state from an explicit RNG substream. Shipped
//! implementations are the Gaussian shift family p(y|x) = N(y; x+a, σ_h² I)
//! and a reflected wrapper that confines any such kernel to a centered ball by
//! redirecting exiting transitions to a uniform draw from the ball.

use serde::Serialize;
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{invalid, Error, Result};
use crate::numeric::{log_add_exp, norm2};
use crate::rng::SubRng;

/// One-step transition density and sampler for p_h^a(y|x).
///
/// Implementations must describe the same distribution through both methods;
/// `log_density` must be pure and `sample` must draw only from the supplied
/// substream, so kernels are safe to share across threads.
pub trait TransitionKernel: Send + Sync {
    /// State dimension d.
    fn dim(&self) -> usize;

    /// log p_{h+1}^a(y | x) for the transition out of step `step`.
    fn log_density(&self, step: usize, x: &[f64], a: &[f64], y: &[f64]) -> f64;

    /// Draw the next state given the current state and action.
    fn sample(&self, step: usize, x: &[f64], a: &[f64], rng: &mut SubRng) -> Vec<f64>;

    /// P(|Y| > radius) for the one-step transition out of (x, a), when an
    /// analytic expression is available. The reflected wrapper requires it.
    fn ball_exit_mass(&self, step: usize, x: &[f64], a: &[f64], radius: f64) -> Option<f64> {
        let _ = (step, x, a, radius);
        None
    }
}

impl<K: TransitionKernel + ?Sized> TransitionKernel for &K {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, step: usize, x: &[f64], a: &[f64], y: &[f64]) -> f64 {
        (**self).log_density(step, x, a, y)
    }
    fn sample(&self, step: usize, x: &[f64], a: &[f64], rng: &mut SubRng) -> Vec<f64> {
        (**self).sample(step, x, a, rng)
    }
    fn ball_exit_mass(&self, step: usize, x: &[f64], a: &[f64], radius: f64) -> Option<f64> {
        (**self).ball_exit_mass(step, x, a, radius)
    }
}

impl<K: TransitionKernel + ?Sized> TransitionKernel for std::sync::Arc<K> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, step: usize, x: &[f64], a: &[f64], y: &[f64]) -> f64 {
        (**self).log_density(step, x, a, y)
    }
    fn sample(&self, step: usize, x: &[f64], a: &[f64], rng: &mut SubRng) -> Vec<f64> {
        (**self).sample(step, x, a, rng)
    }
    fn ball_exit_mass(&self, step: usize, x: &[f64], a: &[f64], radius: f64) -> Option<f64> {
        (**self).ball_exit_mass(step, x, a, radius)
    }
}

/// Gaussian shift kernel: Y = x + a + σ_step Z with Z standard normal in d
/// dimensions. One σ per step.
#[derive(Clone, Debug)]
pub struct GaussianShiftKernel {
    sigmas: Vec<f64>,
    dim: usize,
    // -(d/2) ln(2π σ²) and 1/(2σ²) per step
    log_norms: Vec<f64>,
    inv_two_var: Vec<f64>,
}

impl GaussianShiftKernel {
    pub fn new(sigmas: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("state dimension must be at least 1"));
        }
        if sigmas.is_empty() {
            return Err(invalid("at least one step sigma is required"));
        }
        if !sigmas.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(invalid("all sigmas must be finite and strictly positive"));
        }
        let d = dim as f64;
        let log_norms = sigmas
            .iter()
            .map(|s| -0.5 * d * (std::f64::consts::TAU * s * s).ln())
            .collect();
        let inv_two_var = sigmas.iter().map(|s| 0.5 / (s * s)).collect();
        Ok(GaussianShiftKernel {
            sigmas,
            dim,
            log_norms,
            inv_two_var,
        })
    }

    /// Same σ at every step.
    pub fn isotropic(sigma: f64, horizon: usize, dim: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        Self::new(vec![sigma; horizon], dim)
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigmas.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas.iter().cloned().fold(0.0, f64::max)
    }

    fn check_dims(&self, step: usize, x: &[f64], a: &[f64]) {
        assert!(
            step < self.sigmas.len(),
            "step {} out of range (horizon {})",
            step,
            self.sigmas.len()
        );
        assert_eq!(x.len(), self.dim, "state dimension mismatch");
        assert_eq!(a.len(), self.dim, "action dimension mismatch");
    }
}

impl TransitionKernel for GaussianShiftKernel {
    fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn log_density(&self, step: usize, x: &[f64], a: &[f64], y: &[f64]) -> f64 {
        self.check_dims(step, x, a);
        assert_eq!(y.len(), self.dim, "state dimension mismatch");
        let mut q = 0.0;
        for i in 0..self.dim {
            let e = y[i] - x[i] - a[i];
            q += e * e;
        }
        self.log_norms[step] - q * self.inv_two_var[step]
    }

    fn sample(&self, step: usize, x: &[f64], a: &[f64], rng: &mut SubRng) -> Vec<f64> {
        self.check_dims(step, x, a);
        let sigma = self.sigmas[step];
        (0..self.dim)
            .map(|i| x[i] + a[i] + sigma * rng.standard_normal())
            .collect()
    }

    fn ball_exit_mass(&self, step: usize, x: &[f64], a: &[f64], radius: f64) -> Option<f64> {
        self.check_dims(step, x, a);
        let shifted: Vec<f64> = x.iter().zip(a).map(|(xi, ai)| xi + ai).collect();
        ball_tail_mass(norm2(&shifted), self.sigmas[step], radius, self.dim).ok()
    }
}

/// P(|Y| > radius) for Y ~ N(μ, σ² I_d) with |μ| = `mean_norm`.
///
/// Equivalently the survival function of a noncentral χ²_d with noncentrality
/// (mean_norm/σ)² evaluated at (radius/σ)², computed as a Poisson mixture of
/// central χ² tails. The mixture terminates once the remaining Poisson mass
/// cannot move the result by more than 1e-15; for d > 200 (outside the tested
/// range) it falls back to Sankaran's normal approximation.
pub fn ball_tail_mass(mean_norm: f64, sigma: f64, radius: f64, dim: usize) -> Result<f64> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(invalid("sigma must be finite and positive"));
    }
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(invalid("radius must be finite and nonnegative"));
    }
    if !mean_norm.is_finite() || mean_norm < 0.0 {
        return Err(invalid("mean_norm must be finite and nonnegative"));
    }
    if dim == 0 {
        return Err(invalid("dimension must be at least 1"));
    }
    let noncentrality = (mean_norm / sigma).powi(2);
    let t = (radius / sigma).powi(2);
    if dim > 200 {
        return Ok(sankaran_survival(t, dim as f64, noncentrality));
    }
    noncentral_chi_sq_survival(t, dim, noncentrality)
}

/// Survival function of the noncentral χ²_d(λ) at t via the Poisson mixture
/// Σ_j Pois(j; λ/2) Q(d/2 + j, t/2), with the central tails advanced by the
/// forward recurrence Q(s+1, x) = Q(s, x) + x^s e^{-x} / Γ(s+1).
fn noncentral_chi_sq_survival(t: f64, dim: usize, noncentrality: f64) -> Result<f64> {
    let half_lambda = 0.5 * noncentrality;
    let x = 0.5 * t;
    let s0 = 0.5 * dim as f64;
    if x == 0.0 {
        return Ok(1.0);
    }
    let ln_x = x.ln();
    let mut q = gamma_ur(s0, x);
    let mut total = 0.0;
    let mut poisson_cum = 0.0;
    // enough iterations to exhaust the Poisson mass plus margin
    let j_max = (half_lambda + 80.0 * (half_lambda + 4.0).sqrt() + 200.0) as usize;
    for j in 0..=j_max {
        let ln_pois = if half_lambda == 0.0 {
            if j == 0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            -half_lambda + j as f64 * half_lambda.ln() - ln_gamma(j as f64 + 1.0)
        };
        let pois = ln_pois.exp();
        total += pois * q;
        poisson_cum += pois;
        if 1.0 - poisson_cum <= 1e-14 {
            return Ok(total.clamp(0.0, 1.0));
        }
        // past the Poisson mode the terms decay at least geometrically with
        // ratio (λ/2)/(j+1); cut once that envelope drops below 1e-14
        let ratio = half_lambda / (j as f64 + 1.0);
        if ratio < 1.0 && pois * ratio / (1.0 - ratio) <= 1e-14 {
            return Ok(total.clamp(0.0, 1.0));
        }
        let s = s0 + j as f64;
        q += (s * ln_x - x - ln_gamma(s + 1.0)).exp();
        if q > 1.0 {
            q = 1.0;
        }
    }
    Err(Error::Numeric(format!(
        "noncentral chi-square survival did not converge: dim={dim}, \
         noncentrality={noncentrality:.6e}, t={t:.6e}, \
         remaining Poisson mass={:.3e} after {j_max} terms",
        1.0 - poisson_cum
    )))
}

/// Sankaran's normal approximation to the noncentral χ² survival function.
fn sankaran_survival(t: f64, d: f64, lambda: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let dl = d + lambda;
    let h = 1.0 - 2.0 / 3.0 * dl * (d + 3.0 * lambda) / ((d + 2.0 * lambda) * (d + 2.0 * lambda));
    let p = (d + 2.0 * lambda) / (dl * dl);
    let m = (h - 1.0) * (1.0 - 3.0 * h);
    let num = (t / dl).powf(h) - (1.0 + h * p * (h - 1.0 - 0.5 * (2.0 - h) * m * p));
    let den = h * (2.0 * p).sqrt() * (1.0 + 0.5 * m * p);
    let z = num / den;
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// ln of the volume of the d-dimensional Euclidean ball of radius r.
pub fn ln_ball_volume(radius: f64, dim: usize) -> f64 {
    let d = dim as f64;
    0.5 * d * std::f64::consts::PI.ln() + d * radius.ln() - ln_gamma(0.5 * d + 1.0)
}

/// A kernel confined to the centered ball B_R: transitions that would exit are
/// replaced by a uniform draw from the ball, which adds the exited mass spread
/// uniformly to the density:
/// p^D(y|x) = p(y|x) + P(exit) / vol(B_R) for x, y in B_R.
#[derive(Clone, Debug)]
pub struct ReflectedKernel<K: TransitionKernel> {
    inner: K,
    radius: f64,
    ln_volume: f64,
}

impl<K: TransitionKernel> ReflectedKernel<K> {
    pub fn new(inner: K, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(invalid("domain radius must be finite and positive"));
        }
        let d = inner.dim();
        let origin = vec![0.0; d];
        if inner.ball_exit_mass(0, &origin, &origin, radius).is_none() {
            return Err(invalid(
                "inner kernel does not provide an analytic ball exit mass; \
                 the reflected density would not be computable",
            ));
        }
        let ln_volume = ln_ball_volume(radius, d);
        Ok(ReflectedKernel {
            inner,
            radius,
            ln_volume,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn inner(&self) -> &K {
        &self.inner
    }

    /// Reflected log density, checking that both states lie in the ball.
    pub fn try_log_density(&self, step: usize, x: &[f64], a: &[f64], y: &[f64]) -> Result<f64> {
        if norm2(x) > self.radius || norm2(y) > self.radius {
            return Err(Error::Domain(format!(
                "reflected density queried outside the ball: |x|={:.6}, |y|={:.6}, R={:.6}",
                norm2(x),
                norm2(y),
                self.radius
            )));
        }
        let inner_log = self.inner.log_density(step, x, a, y);
        let exit = self
            .inner
            .ball_exit_mass(step, x, a, self.radius)
            .expect("exit mass availability was checked at construction");
        let log_correction = if exit > 0.0 {
            exit.ln() - self.ln_volume
        } else {
            f64::NEG_INFINITY
        };
        Ok(log_add_exp(inner_log, log_correction))
    }
}

impl<K: TransitionKernel> TransitionKernel for ReflectedKernel<K> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_density(&self, step: usize, x: &[f64], a: &[f64], y: &[f64]) -> f64 {
        self.try_log_density(step, x, a, y)
            .unwrap_or_else(|e| panic!("{e}"))
    }

    fn sample(&self, step: usize, x: &[f64], a: &[f64], rng: &mut SubRng) -> Vec<f64> {
        let y = self.inner.sample(step, x, a, rng);
        if norm2(&y) <= self.radius {
            return y;
        }
        // uniform draw from the ball: normalized Gaussian direction, radius ∝ u^{1/d}
        let d = self.inner.dim();
        let mut dir = vec![0.0; d];
        loop {
            rng.fill_standard_normal(&mut dir);
            let n = norm2(&dir);
            if n > 0.0 {
                let r = self.radius * rng.next_f64().powf(1.0 / d as f64);
                for v in dir.iter_mut() {
                    *v *= r / n;
                }
                return dir;
            }
        }
    }
}

/// Density bounds and truncation-radius schedule for a Gaussian shift kernel
/// on a shrinking-confidence ball. Informational only; never feeds back into
/// the solver.
#[derive(Clone, Debug, Serialize)]
pub struct KernelDiagnostics {
    /// Truncation radius R_N of the schedule.
    pub radius: f64,
    /// Lower density bound δ over the ball with actions of norm ≤ A.
    pub density_lower: f64,
    /// Upper density bound Λ (the mode value at the smallest σ).
    pub density_upper: f64,
    /// Lipschitz-type constant of the truncated density; reported, unused.
    pub lipschitz: f64,
    /// Upper bound on the per-step probability that the chain leaves the ball.
    pub tail_mass_bound: f64,
    /// The schedule exponent used.
    pub gamma: f64,
    /// Mesh size the schedule was computed for.
    pub n_paths: usize,
}

/// Evaluate the truncation-radius schedule R_N = √(γ σ_min² ln N / 4) and the
/// associated density bounds for a Gaussian shift kernel with action norms
/// bounded by `action_radius`.
pub fn diagnostics_for_schedule(
    kernel: &GaussianShiftKernel,
    action_radius: f64,
    n_paths: usize,
    gamma: f64,
) -> Result<KernelDiagnostics> {
    if !(gamma > 0.0 && gamma < 0.25) {
        return Err(invalid(format!(
            "schedule exponent gamma must lie in (0, 1/4), got {gamma}"
        )));
    }
    if n_paths < 2 {
        return Err(invalid("schedule requires at least 2 paths"));
    }
    if !(action_radius.is_finite() && action_radius >= 0.0) {
        return Err(invalid("action radius must be finite and nonnegative"));
    }
    let d = kernel.dim() as f64;
    let s_min = kernel.sigma_min();
    let s_max = kernel.sigma_max();
    let n = n_paths as f64;
    let radius = (gamma * s_min * s_min * n.ln() / 4.0).sqrt();
    let density_upper = (std::f64::consts::TAU * s_min * s_min).powf(-0.5 * d);
    let density_lower = (std::f64::consts::TAU * s_max * s_max).powf(-0.5 * d)
        * (-(action_radius * action_radius) / (s_min * s_min)).exp()
        * n.powf(-gamma);
    let lipschitz = 2.0 * (1.0 + 2f64.powf(0.5 * (d + 3.0))) * radius
        / (s_min.powf(d + 2.0) * std::f64::consts::PI.powf(0.5 * d));
    // per-step exit bound: regularized upper incomplete gamma at R²/(8 σ̄²),
    // where σ̄² accumulates the per-step variances over the whole horizon
    let var_sum: f64 = kernel.sigmas().iter().map(|s| s * s).sum();
    let tail_mass_bound = gamma_ur(0.5 * d, radius * radius / (8.0 * var_sum));
    Ok(KernelDiagnostics {
        radius,
        density_lower,
        density_upper,
        lipschitz,
        tail_mass_bound,
        gamma,
        n_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::gauss_legendre;
    use crate::rng::Substream;

    fn kernel_1d(sigma: f64) -> GaussianShiftKernel {
        GaussianShiftKernel::isotropic(sigma, 4, 1).unwrap()
    }

    #[test]
    fn constructor_rejects_degenerate_sigma() {
        assert!(GaussianShiftKernel::isotropic(0.0, 3, 1).is_err());
        assert!(GaussianShiftKernel::isotropic(-0.5, 3, 1).is_err());
        assert!(GaussianShiftKernel::isotropic(f64::NAN, 3, 1).is_err());
        assert!(GaussianShiftKernel::new(vec![], 1).is_err());
        assert!(GaussianShiftKernel::new(vec![1.0], 0).is_err());
    }

    #[test]
    fn log_density_at_the_mode() {
        let k = kernel_1d(0.1);
        let v = k.log_density(0, &[0.3], &[0.2], &[0.5]);
        // -(1/2) ln(2π · 0.01)
        assert!((v - 1.383646559789373).abs() < 1e-12);
    }

    #[test]
    fn log_density_mode_d5() {
        // direct formula: -(5/2) ln(2π · 0.01); the normalizing constant is
        // (2πσ²)^{-5/2} = 1010.5326..., cross-checked with an independent
        // scalar script
        let k = GaussianShiftKernel::isotropic(0.1, 2, 5).unwrap();
        let x = [0.1, -0.2, 0.0, 0.4, -0.1];
        let a = [0.05; 5];
        let y: Vec<f64> = x.iter().zip(&a).map(|(xi, ai)| xi + ai).collect();
        let v = k.log_density(1, &x, &a, &y);
        assert!((v - 6.918232798946865).abs() < 1e-12);
        assert!((v.exp() - 1010.5326013811641).abs() < 1e-9);
    }

    #[test]
    fn log_density_symmetric_under_reversal() {
        // |x - y - a| = |y - x - (-a)|
        let k = GaussianShiftKernel::isotropic(0.37, 3, 2).unwrap();
        let x = [0.4, -1.2];
        let y = [0.9, 0.3];
        let a = [0.25, -0.6];
        let neg_a = [-0.25, 0.6];
        let lhs = k.log_density(1, &x, &a, &y);
        let rhs = k.log_density(1, &y, &neg_a, &x);
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn sample_moments_match_mean_and_covariance() {
        let k = GaussianShiftKernel::isotropic(0.4, 1, 3).unwrap();
        let x = [1.0, -0.5, 0.2];
        let a = [0.1, 0.3, -0.2];
        let n = 100_000;
        let mut rng = Substream::new(11).label("kernel-moments").rng();
        let mut mean = [0.0; 3];
        let mut second = [0.0; 3];
        for _ in 0..n {
            let y = k.sample(0, &x, &a, &mut rng);
            for i in 0..3 {
                mean[i] += y[i];
                let c = y[i] - (x[i] + a[i]);
                second[i] += c * c;
            }
        }
        for i in 0..3 {
            let m = mean[i] / n as f64;
            let var = second[i] / n as f64;
            assert!((m - (x[i] + a[i])).abs() < 4.0 * 0.4 / (n as f64).sqrt());
            assert!((var - 0.16).abs() < 0.05 * 0.16);
        }
    }

    #[test]
    fn density_normalizes_on_a_ten_sigma_window() {
        let k = kernel_1d(0.7);
        let x = [0.9];
        let a = [-0.4];
        let rule = gauss_legendre(32);
        let center = x[0] + a[0];
        let mass = rule.integrate_panels(center - 7.0, center + 7.0, 24, |y| {
            k.log_density(2, &x, &a, &[y]).exp()
        });
        assert!((mass - 1.0).abs() < 1e-8);
    }

    #[test]
    fn tail_mass_reference_values() {
        // reference values computed with SciPy's ncx2.sf / chi2.sf
        // (t = (R/σ)², λ = (|μ|/σ)²)
        let cases: &[(usize, f64, f64, f64)] = &[
            (1, 0.0, 4.0, 0.0455002638963586),
            (2, 0.0, 1.0, 0.606530659712633),
            (3, 2.5, 7.3, 0.265837406794263),
            (5, 100.0, 130.0, 0.112310614489547),
            (1, 16.0, 9.0, 0.841344746069823),
            (10, 0.01, 22.0, 0.0152169103111958),
            (4, 400.0, 380.0, 0.719854713011095),
            (2, 55.5, 40.0, 0.884600468449494),
        ];
        for &(d, lambda, t, expected) in cases {
            let sigma = 0.3;
            let mean_norm = sigma * lambda.sqrt();
            let radius = sigma * t.sqrt();
            let got = ball_tail_mass(mean_norm, sigma, radius, d).unwrap();
            assert!(
                (got - expected).abs() < 1e-10,
                "d={d} lambda={lambda} t={t}: got {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn tail_mass_centered_cases() {
        // d=1, centered: 2 Φ̄(R/σ)
        let v = ball_tail_mass(0.0, 0.5, 1.0, 1).unwrap();
        assert!((v - 0.04550026389635839).abs() < 1e-10);
        // d=2, centered: exp(-R²/(2σ²)) exactly
        let v = ball_tail_mass(0.0, 1.0, 1.0, 2).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn tail_mass_limits() {
        assert!(ball_tail_mass(0.3, 0.2, 1e6, 3).unwrap() < 1e-300);
        assert_eq!(ball_tail_mass(0.3, 0.2, 0.0, 3).unwrap(), 1.0);
    }

    #[test]
    fn tail_mass_normal_fallback_is_close_to_series() {
        // just inside and outside the series range should agree to ~1e-3
        let series = noncentral_chi_sq_survival(210.0, 200, 3.0).unwrap();
        let approx = sankaran_survival(210.0, 200.0, 3.0);
        assert!((series - approx).abs() < 2e-3);
    }

    #[test]
    fn reflected_requires_exit_mass_and_positive_radius() {
        let k = kernel_1d(0.5);
        assert!(ReflectedKernel::new(k.clone(), 0.0).is_err());

        struct Opaque;
        impl TransitionKernel for Opaque {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, _: usize, _: &[f64], _: &[f64], _: &[f64]) -> f64 {
                0.0
            }
            fn sample(&self, _: usize, _: &[f64], _: &[f64], _: &mut SubRng) -> Vec<f64> {
                vec![0.0]
            }
        }
        assert!(ReflectedKernel::new(Opaque, 1.0).is_err());
    }

    #[test]
    fn reflected_density_value_and_domain() {
        // σ=1, R=1, x=a=0, y=0: φ(0) + P(|Z|>1)/2
        let k = GaussianShiftKernel::isotropic(1.0, 1, 1).unwrap();
        let rk = ReflectedKernel::new(k, 1.0).unwrap();
        let v = rk.try_log_density(0, &[0.0], &[0.0], &[0.0]).unwrap();
        assert!((v.exp() - 0.5575975343328898).abs() < 1e-12);
        assert!(rk.try_log_density(0, &[1.5], &[0.0], &[0.0]).is_err());
        assert!(rk.try_log_density(0, &[0.0], &[0.0], &[-1.1]).is_err());
    }

    #[test]
    fn reflected_matches_inner_when_radius_is_huge() {
        let k = kernel_1d(0.3);
        let rk = ReflectedKernel::new(k.clone(), 1e6).unwrap();
        let x = [0.2];
        let a = [-0.1];
        let y = [0.5];
        let v = rk.try_log_density(1, &x, &a, &y).unwrap();
        assert!((v - k.log_density(1, &x, &a, &y)).abs() < 1e-12);
    }

    #[test]
    fn reflected_density_normalizes_on_the_ball() {
        let k = kernel_1d(1.0);
        let rk = ReflectedKernel::new(k, 1.0).unwrap();
        let x = [0.6];
        let a = [0.2];
        let rule = gauss_legendre(40);
        let mass = rule.integrate_panels(-1.0, 1.0, 16, |y| {
            rk.try_log_density(0, &x, &a, &[y]).unwrap().exp()
        });
        assert!((mass - 1.0).abs() < 1e-8);
    }

    #[test]
    fn reflected_density_dominates_inner() {
        let k = kernel_1d(0.8);
        let rk = ReflectedKernel::new(k.clone(), 2.0).unwrap();
        let mut rng = Substream::new(5).label("dominance").rng();
        for _ in 0..200 {
            let x = [rng.uniform(-2.0, 2.0)];
            let y = [rng.uniform(-2.0, 2.0)];
            let a = [rng.uniform(-0.5, 0.5)];
            let refl = rk.try_log_density(0, &x, &a, &y).unwrap();
            let base = k.log_density(0, &x, &a, &y);
            assert!(refl >= base);
        }
    }

    #[test]
    fn reflected_samples_stay_inside_and_exit_fraction_matches() {
        let sigma = 0.5;
        let radius = 0.8;
        let k = GaussianShiftKernel::isotropic(sigma, 1, 2).unwrap();
        let rk = ReflectedKernel::new(k, radius).unwrap();
        let x = [0.3, -0.2];
        let a = [0.25, 0.1];
        let expected_exit =
            ball_tail_mass(norm2(&[0.55, -0.1]), sigma, radius, 2).unwrap();
        let n = 100_000;
        let mut rng = Substream::new(21).label("reflect-exit").rng();
        let mut exits = 0usize;
        for _ in 0..n {
            // count a draw as an exit when the inner kernel would have left
            let y = rk.inner().sample(0, &x, &a, &mut rng);
            if norm2(&y) > radius {
                exits += 1;
            }
            let z = rk.sample(0, &x, &a, &mut rng);
            assert!(norm2(&z) <= radius + 1e-12);
        }
        let frac = exits as f64 / n as f64;
        let binom_sd = (expected_exit * (1.0 - expected_exit) / n as f64).sqrt();
        assert!(
            (frac - expected_exit).abs() <= 3.0 * binom_sd,
            "exit fraction {frac} vs tail mass {expected_exit} (sd {binom_sd})"
        );
    }

    #[test]
    fn schedule_diagnostics_values() {
        let k = GaussianShiftKernel::isotropic(0.1, 20, 1).unwrap();
        let d = diagnostics_for_schedule(&k, 1.0, 500, 0.2).unwrap();
        assert!((d.radius - 0.055743197335738605).abs() < 1e-12);
        assert!((d.density_upper - 3.9894228040143265).abs() < 1e-12);
        assert!(d.density_lower <= d.density_upper);
        assert!(d.density_lower >= 0.0);
        assert!(d.tail_mass_bound >= 0.0 && d.tail_mass_bound <= 1.0);
        assert!(d.lipschitz >= 0.0);
    }

    #[test]
    fn schedule_rejects_bad_gamma() {
        let k = GaussianShiftKernel::isotropic(0.1, 4, 1).unwrap();
        assert!(diagnostics_for_schedule(&k, 1.0, 100, 0.25).is_err());
        assert!(diagnostics_for_schedule(&k, 1.0, 100, 0.0).is_err());
        assert!(diagnostics_for_schedule(&k, 1.0, 1, 0.1).is_err());
    }

    #[test]
    fn density_respects_schedule_bounds_on_the_ball() {
        let k = GaussianShiftKernel::isotropic(0.1, 20, 1).unwrap();
        let diag = diagnostics_for_schedule(&k, 1.0, 500, 0.2).unwrap();
        let mut rng = Substream::new(3).label("bounds").rng();
        for _ in 0..2000 {
            let x = [rng.uniform(-diag.radius, diag.radius)];
            let y = [rng.uniform(-diag.radius, diag.radius)];
            let a = [rng.uniform(-1.0, 1.0)];
            let p = k.log_density(7, &x, &a, &y).exp();
            assert!(p >= diag.density_lower && p <= diag.density_upper);
        }
    }

    #[test]
    fn sampler_and_density_agree_chi_square() {
        // goodness of fit at the 0.1% level, both plain and reflected, d=1
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let sigma = 0.6;
        let x = [0.2];
        let a = [0.15];
        let n = 100_000;

        let run = |name: &str,
                   sample: &dyn Fn(&mut SubRng) -> f64,
                   density: &dyn Fn(f64) -> f64,
                   lo: f64,
                   hi: f64| {
            let bins = 40;
            let width = (hi - lo) / bins as f64;
            let mut counts = vec![0usize; bins];
            let mut rng = Substream::new(77).label(name).rng();
            for _ in 0..n {
                let y = sample(&mut rng);
                let idx = (((y - lo) / width).floor() as isize).clamp(0, bins as isize - 1);
                counts[idx as usize] += 1;
            }
            let rule = gauss_legendre(16);
            let mut stat = 0.0;
            let mut dof = 0usize;
            let mut tail_expected = n as f64;
            for (b, &c) in counts.iter().enumerate() {
                let blo = lo + b as f64 * width;
                let expected = n as f64 * rule.integrate(blo, blo + width, density);
                tail_expected -= expected;
                if expected >= 10.0 {
                    stat += (c as f64 - expected).powi(2) / expected;
                    dof += 1;
                }
            }
            // mass outside the binned window is negligible by construction
            assert!(tail_expected.abs() < 1.0);
            let crit = ChiSquared::new(dof as f64 - 1.0)
                .unwrap()
                .inverse_cdf(0.999);
            assert!(stat < crit, "{name}: chi2 {stat:.1} >= {crit:.1} (dof {dof})");
        };

        let k = GaussianShiftKernel::isotropic(sigma, 1, 1).unwrap();
        let kc = k.clone();
        run(
            "gof-plain",
            &|rng| kc.sample(0, &x, &a, rng)[0],
            &|y| kc.log_density(0, &x, &a, &[y]).exp(),
            x[0] + a[0] - 6.0 * sigma,
            x[0] + a[0] + 6.0 * sigma,
        );

        let rk = ReflectedKernel::new(k, 0.9).unwrap();
        run(
            "gof-reflected",
            &|rng| rk.sample(0, &x, &a, rng)[0],
            &|y| rk.try_log_density(0, &x, &a, &[y]).unwrap().exp(),
            -0.9,
            0.9,
        );
    }
}
