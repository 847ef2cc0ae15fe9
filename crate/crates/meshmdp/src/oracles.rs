//! Independent reference computations used to validate the mesh solver:
//! the log-moment closed form for the LQG family (Monte Carlo), a brute-force
//! grid dynamic program for one-dimensional problems, the large-N consistency
//! check of the weighted expectations, and a direct-formula mesh solve kept
//! deliberately free of the optimized code paths.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::mdp::{simulate_mesh, ActionSet, MdpSpec, TrajectoryMesh};
use crate::quad::{gauss_hermite, gauss_legendre};
use crate::rng::Substream;
use crate::solver::{mesh_expectation, precompute_denominators};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    ClosedFormMc,
    GridDp,
    Quadrature,
}

/// A reference value with its sampling error (zero for deterministic methods).
#[derive(Clone, Debug, Serialize)]
pub struct OracleEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub method: OracleMethod,
}

/// Closed-form optimal value of the continuous-time LQG problem at (x, t):
/// (1/λ) log E[ exp(λ F(x + √2 W_{T−t})) ], estimated by Monte Carlo.
///
/// The expectation is computed through a max-shifted log-mean-exp, and the
/// standard error by the delta method on the log of the sample mean. The
/// reduction order is fixed, so the estimate depends only on the seed.
pub fn lqg_closed_form(
    x: &[f64],
    t: f64,
    lambda: f64,
    t_end: f64,
    terminal: &(dyn Fn(&[f64]) -> f64 + Sync),
    n_samples: usize,
    seed: u64,
) -> Result<OracleEstimate> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda must be positive and finite"));
    }
    if !(0.0..=t_end).contains(&t) {
        return Err(invalid(format!("time {t} outside [0, {t_end}]")));
    }
    if n_samples < 2 {
        return Err(invalid("closed-form oracle needs at least 2 samples"));
    }
    let scale = (2.0 * (t_end - t)).sqrt();
    let d = x.len();
    let base = Substream::new(seed).label("closed-form");
    let exponents: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = base.index(i as u64).rng();
            let mut y = vec![0.0; d];
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = xi + scale * rng.standard_normal();
            }
            lambda * terminal(&y)
        })
        .collect();

    let m = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Numeric(format!(
            "exp(λF) produced a non-finite exponent (max = {m})"
        )));
    }
    let shifted: Vec<f64> = exponents.iter().map(|&u| (u - m).exp()).collect();
    let n = n_samples as f64;
    let mean_v = shifted.iter().sum::<f64>() / n;
    let value = (m + mean_v.ln()) / lambda;
    if !value.is_finite() {
        return Err(Error::Numeric(
            "closed-form value is non-finite after log-mean-exp".into(),
        ));
    }
    let var_v = shifted.iter().map(|v| (v - mean_v) * (v - mean_v)).sum::<f64>() / (n - 1.0);
    // delta method: Var(log m̂)/λ² with m̂ the shifted sample mean
    let std_error = (var_v / n).sqrt() / (mean_v * lambda);
    Ok(OracleEstimate {
        value,
        std_error,
        n_samples,
        method: OracleMethod::ClosedFormMc,
    })
}

/// One-dimensional problem description for the grid dynamic program.
pub struct GridDp1d<'a> {
    pub horizon: usize,
    /// Per-step Gaussian transition widths.
    pub sigmas: &'a [f64],
    pub reward: &'a (dyn Fn(usize, f64, f64) -> f64 + Sync),
    pub terminal: &'a (dyn Fn(f64) -> f64 + Sync),
    pub x0: f64,
}

/// Uniform state grid for [`grid_dp`].
#[derive(Clone, Copy, Debug)]
pub struct StateGrid1d {
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
}

impl StateGrid1d {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n_points - 1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct GridDpResult {
    pub estimate: OracleEstimate,
    /// |value − value at half the grid step|; a grid-refinement error gauge.
    pub refinement_error: f64,
}

fn grid_dp_pass(
    problem: &GridDp1d,
    xs: &[f64],
    actions: &ActionSet,
    quadrature_nodes: usize,
) -> f64 {
    let rule = gauss_hermite(quadrature_nodes);
    let n = xs.len();
    let lo = xs[0];
    let step = xs[1] - xs[0];
    let interp = |v: &[f64], x: f64| -> f64 {
        // linear interpolation, clamped to the grid ends
        let pos = (x - lo) / step;
        if pos <= 0.0 {
            return v[0];
        }
        if pos >= (n - 1) as f64 {
            return v[n - 1];
        }
        let j = pos.floor() as usize;
        let frac = pos - j as f64;
        v[j] * (1.0 - frac) + v[j + 1] * frac
    };
    let mut values: Vec<f64> = xs.iter().map(|&x| (problem.terminal)(x)).collect();
    for h in (0..problem.horizon).rev() {
        let sigma = problem.sigmas[h];
        let prev = values;
        values = xs
            .par_iter()
            .map(|&x| {
                let mut best = f64::NEG_INFINITY;
                for a in actions.iter() {
                    let a = a[0];
                    let expect = rule.normal_expectation(x + a, sigma, |y| interp(&prev, y));
                    let q = (problem.reward)(h, x, a) + expect;
                    if q > best {
                        best = q;
                    }
                }
                best
            })
            .collect();
    }
    interp(&values, problem.x0)
}

/// Backward induction on a uniform state grid with Gauss-Hermite transitions;
/// a deterministic reference for d = 1 problems.
///
/// The value is computed twice, at the given grid and at half the step; the
/// finer value is returned and the difference reported as `refinement_error`.
/// Errors if the grid does not cover the reachable region (6 standard
/// deviations of accumulated noise plus the total action range around x0), if
/// the step exceeds min σ/4, or if the refinement error exceeds `tolerance`.
pub fn grid_dp(
    problem: &GridDp1d,
    grid: &StateGrid1d,
    actions: &ActionSet,
    quadrature_nodes: usize,
    tolerance: f64,
) -> Result<GridDpResult> {
    if problem.sigmas.len() != problem.horizon {
        return Err(invalid("need one sigma per step"));
    }
    if actions.action_dim() != 1 {
        return Err(invalid("grid_dp is one-dimensional"));
    }
    if grid.n_points < 3 {
        return Err(invalid("grid needs at least 3 points"));
    }
    if quadrature_nodes < 2 {
        return Err(invalid("need at least 2 quadrature nodes"));
    }
    let var_sum: f64 = problem.sigmas.iter().map(|s| s * s).sum();
    let reach = 6.0 * var_sum.sqrt() + problem.horizon as f64 * actions.max_norm();
    if grid.lo > problem.x0 - reach || grid.hi < problem.x0 + reach {
        return Err(invalid(format!(
            "grid [{}, {}] does not cover the reachable span x0 ± {reach:.3}",
            grid.lo, grid.hi
        )));
    }
    let sigma_min = problem.sigmas.iter().cloned().fold(f64::INFINITY, f64::min);
    if grid.step() > sigma_min / 4.0 {
        return Err(invalid(format!(
            "grid step {:.5} exceeds sigma_min/4 = {:.5}",
            grid.step(),
            sigma_min / 4.0
        )));
    }

    let coarse_xs: Vec<f64> = (0..grid.n_points)
        .map(|j| grid.lo + j as f64 * grid.step())
        .collect();
    let fine_n = 2 * grid.n_points - 1;
    let fine_step = grid.step() / 2.0;
    let fine_xs: Vec<f64> = (0..fine_n).map(|j| grid.lo + j as f64 * fine_step).collect();

    let coarse = grid_dp_pass(problem, &coarse_xs, actions, quadrature_nodes);
    let fine = grid_dp_pass(problem, &fine_xs, actions, quadrature_nodes);
    let refinement_error = (fine - coarse).abs();
    if refinement_error > tolerance {
        return Err(Error::Accuracy(format!(
            "grid refinement moved the value by {refinement_error:.2e} \
             (tolerance {tolerance:.2e}); use a finer grid"
        )));
    }
    Ok(GridDpResult {
        estimate: OracleEstimate {
            value: fine,
            std_error: 0.0,
            n_samples: fine_n,
            method: OracleMethod::GridDp,
        },
        refinement_error,
    })
}

/// One point of the consistency curve: the weighted expectation against its
/// quadrature target for a fresh mesh of `n_paths` chains, plus the
/// unnormalized weight sum whose large-N limit is N/(N−1).
#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyPoint {
    pub n_paths: usize,
    pub abs_error: f64,
    pub denom_sum: f64,
    pub denom_sum_target: f64,
}

/// Check that the weighted expectation at a fixed (x, a, step) converges to
/// ∫ f(y) p^a(y|x) dy as the mesh grows. One-dimensional: the target is
/// computed by panel quadrature over `window`.
#[allow(clippy::too_many_arguments)]
pub fn weight_consistency_curve(
    spec: &MdpSpec,
    controls: &[Vec<f64>],
    x: &[f64],
    a: &[f64],
    step: usize,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    window: (f64, f64),
    n_list: &[usize],
    seed: u64,
) -> Result<Vec<ConsistencyPoint>> {
    if spec.state_dim != 1 {
        return Err(invalid("the consistency check is one-dimensional"));
    }
    let kernel = spec.kernel.as_ref();
    let rule = gauss_legendre(32);
    let target = rule.integrate_panels(window.0, window.1, 64, |y| {
        f(&[y]) * kernel.log_density(step, x, a, &[y]).exp()
    });

    let mut out = Vec::with_capacity(n_list.len());
    for (i, &n) in n_list.iter().enumerate() {
        let mesh_seed = Substream::new(seed)
            .label("consistency")
            .index(i as u64)
            .derived_seed();
        let mesh = simulate_mesh(spec, controls, &spec_start(spec, x)?, n, mesh_seed)?;
        let denoms = precompute_denominators(&mesh, kernel, step)?;
        let f_vals: Vec<f64> = (0..n).map(|r| f(mesh.state(r, step + 1))).collect();
        let (value, _) = mesh_expectation(x, a, step, &f_vals, &mesh, kernel, &denoms)?;
        // unnormalized sum of density ratios; ≈ N/(N−1) for large N
        let log_terms: Vec<f64> = (0..n)
            .map(|r| {
                let log_num = kernel.log_density(step, x, a, mesh.state(r, step + 1));
                if log_num == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    log_num - denoms.log_denom(r)
                }
            })
            .collect();
        let denom_sum = crate::numeric::log_sum_exp(&log_terms).exp();
        out.push(ConsistencyPoint {
            n_paths: n,
            abs_error: (value - target).abs(),
            denom_sum,
            denom_sum_target: n as f64 / (n as f64 - 1.0),
        });
    }
    Ok(out)
}

// the meshes of the consistency check are anchored at the probe point, so the
// step-h marginal actually covers the query
fn spec_start(spec: &MdpSpec, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.state_dim {
        return Err(Error::DimensionMismatch {
            what: "probe state",
            expected: spec.state_dim,
            got: x.len(),
        });
    }
    Ok(x.to_vec())
}

/// Direct-formula mesh solve in plain (non-log) arithmetic with no
/// denominator sharing: the validation reference for the optimized solver.
///
/// Densities are evaluated from the Gaussian formula using the provided
/// per-step sigmas, independently of any kernel code.
pub fn reference_mesh_root_value(
    mesh: &TrajectoryMesh,
    spec: &MdpSpec,
    sigmas: &[f64],
    actions: &ActionSet,
) -> Result<f64> {
    if sigmas.len() != mesh.horizon {
        return Err(invalid("need one sigma per step"));
    }
    let n = mesh.n_paths;
    if n < 2 {
        return Err(invalid("need at least 2 paths"));
    }
    let d = mesh.state_dim as f64;
    let density = |sigma: f64, x: &[f64], a: &[f64], y: &[f64]| -> f64 {
        let mut q = 0.0;
        for i in 0..x.len() {
            let e = y[i] - x[i] - a[i];
            q += e * e;
        }
        (std::f64::consts::TAU * sigma * sigma).powf(-0.5 * d)
            * (-q / (2.0 * sigma * sigma)).exp()
    };

    let mut values: Vec<f64> = (0..n).map(|r| spec.terminal(mesh.state(r, mesh.horizon))).collect();
    let mut root = f64::NEG_INFINITY;
    for step in (0..mesh.horizon).rev() {
        let control = &mesh.representative_controls[step];
        let sigma = sigmas[step];
        let points: Vec<&[f64]> = if step == 0 {
            vec![&mesh.start_state]
        } else {
            (0..n).map(|r| mesh.state(r, step)).collect()
        };
        let mut next_values = Vec::with_capacity(points.len());
        for x in &points {
            let mut best = f64::NEG_INFINITY;
            for a in actions.iter() {
                // unshared denominators, recomputed per (point, action)
                let mut ratio_sum = 0.0;
                let mut weighted = 0.0;
                for i in 0..n {
                    let target = mesh.state(i, step + 1);
                    let mut denom = 0.0;
                    for k in 0..n {
                        if k == i {
                            continue;
                        }
                        denom += density(sigma, mesh.state(k, step), control, target);
                    }
                    let num = density(sigma, x, a, target);
                    let ratio = if num == 0.0 { 0.0 } else { num / denom };
                    ratio_sum += ratio;
                    weighted += ratio * values[i];
                }
                let expect = if ratio_sum == 0.0 { 0.0 } else { weighted / ratio_sum };
                let q = spec.reward(step, x, a) + expect;
                if q > best {
                    best = q;
                }
            }
            next_values.push(best);
        }
        if step == 0 {
            root = next_values[0];
        } else {
            values = next_values;
        }
    }
    Ok(root)
}
