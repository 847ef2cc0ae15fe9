//! The weighted-mesh backward recursion.
//!
//! Conditional expectations E[f(S_{h+1}) | S_h = x, a] are approximated by
//! self-normalized weighted sums over the mesh column at step h+1. The weight
//! of point n is its transition density from (x, a) divided by the
//! leave-one-out sum of densities from all other mesh parents under the
//! representative control; the vector is then normalized to sum to one. All
//! density arithmetic is in log space and every reduction runs in ascending
//! index order, so a solve is bit-reproducible for any worker count.
//!
//! Degenerate cells — every unnormalized weight underflowed — contribute an
//! expectation of zero (the 0/0 = 0 convention) and are counted, not raised.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::kernels::TransitionKernel;
use crate::mdp::{ActionSet, MdpSpec, PolicyTable, TrajectoryMesh};
use crate::numeric::log_sum_exp;

/// Leave-one-out log-density sums for one step:
/// entry n = log Σ_{k≠n} p^{b_h}(S_{h+1}^{(n)} | S_h^{(k)}).
///
/// The table depends only on the mesh and the representative control, never
/// on the query point or action, so one table serves every cell of a step.
#[derive(Clone, Debug)]
pub struct DenominatorTable {
    pub step: usize,
    log_denoms: Vec<f64>,
    neg_inf_flags: Vec<bool>,
}

impl DenominatorTable {
    #[inline]
    pub fn log_denom(&self, n: usize) -> f64 {
        self.log_denoms[n]
    }

    /// True when every term for entry n underflowed.
    pub fn underflowed(&self, n: usize) -> bool {
        self.neg_inf_flags[n]
    }

    pub fn len(&self) -> usize {
        self.log_denoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_denoms.is_empty()
    }
}

/// Self-normalized weights over the mesh column, plus the degenerate marker.
#[derive(Clone, Debug)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub degenerate: bool,
}

/// Backward-computed values at every mesh point, plus the root value at x0.
#[derive(Clone, Debug)]
pub struct ValueTable {
    values: Vec<f64>,
    pub n_paths: usize,
    pub horizon: usize,
    pub root_value: f64,
}

impl ValueTable {
    #[inline]
    pub fn value(&self, path: usize, step: usize) -> f64 {
        self.values[path * (self.horizon + 1) + step]
    }

    /// The value column at one step, in path order.
    pub fn column(&self, step: usize) -> Vec<f64> {
        (0..self.n_paths).map(|n| self.value(n, step)).collect()
    }
}

/// Work tally for one solve. The denominator precompute alone costs
/// H·N·(N−1) density evaluations; H·N² is the conventional budget figure.
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct CostCounter {
    /// Total kernel log-density evaluations.
    pub density_evals: u64,
    /// Portion spent on the leave-one-out denominators.
    pub denominator_evals: u64,
    /// Number of weight vectors built (one per evaluated (point, action)).
    pub weight_builds: u64,
    /// Cells where every weight underflowed and the 0/0 = 0 rule fired.
    pub degenerate_weight_count: u64,
    /// H·N², for comparison.
    pub hn2_budget: u64,
}

/// Build the leave-one-out denominator table for `step`.
///
/// Log-space, max-shifted sums in ascending k order. Requires N ≥ 2 (with a
/// single path the leave-one-out sum would be empty).
pub fn precompute_denominators(
    mesh: &TrajectoryMesh,
    kernel: &dyn TransitionKernel,
    step: usize,
) -> Result<DenominatorTable> {
    let n = mesh.n_paths;
    if n < 2 {
        return Err(invalid(
            "leave-one-out denominators require at least 2 paths",
        ));
    }
    if step >= mesh.horizon {
        return Err(invalid(format!(
            "step {step} out of range for horizon {}",
            mesh.horizon
        )));
    }
    let control = &mesh.representative_controls[step];
    let log_denoms: Vec<f64> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0f64; n - 1],
            |scratch, i| {
                let target = mesh.state(i, step + 1);
                let mut idx = 0;
                for k in 0..n {
                    if k == i {
                        continue;
                    }
                    scratch[idx] = kernel.log_density(step, mesh.state(k, step), control, target);
                    idx += 1;
                }
                log_sum_exp(scratch)
            },
        )
        .collect();
    let neg_inf_flags = log_denoms.iter().map(|&v| v == f64::NEG_INFINITY).collect();
    Ok(DenominatorTable {
        step,
        log_denoms,
        neg_inf_flags,
    })
}

/// One weighted-expectation cell. `scratch` must have length N; on a
/// non-degenerate return it holds the normalized weights.
///
/// Returns `(value, degenerate)`.
fn expectation_core(
    x: &[f64],
    a: &[f64],
    step: usize,
    f_values: &[f64],
    mesh: &TrajectoryMesh,
    kernel: &dyn TransitionKernel,
    denoms: &DenominatorTable,
    scratch: &mut [f64],
) -> (f64, bool) {
    let n = mesh.n_paths;
    let mut max_term = f64::NEG_INFINITY;
    for i in 0..n {
        let log_num = kernel.log_density(step, x, a, mesh.state(i, step + 1));
        // a zero numerator keeps weight zero even against a zero denominator
        let term = if log_num == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            log_num - denoms.log_denom(i)
        };
        scratch[i] = term;
        if term > max_term {
            max_term = term;
        }
    }
    if max_term == f64::NEG_INFINITY {
        scratch.fill(0.0);
        return (0.0, true);
    }
    if max_term == f64::INFINITY {
        // an underflowed denominator against a positive numerator: all mass
        // concentrates on those entries
        let count = scratch.iter().filter(|&&t| t == f64::INFINITY).count();
        let w = 1.0 / count as f64;
        let mut value = 0.0;
        for i in 0..n {
            if scratch[i] == f64::INFINITY {
                scratch[i] = w;
                value += w * f_values[i];
            } else {
                scratch[i] = 0.0;
            }
        }
        return (value, false);
    }
    let mut total = 0.0;
    for t in scratch.iter_mut() {
        *t = (*t - max_term).exp();
        total += *t;
    }
    let inv = 1.0 / total;
    let mut value = 0.0;
    for (w, &f) in scratch.iter_mut().zip(f_values) {
        *w *= inv;
        value += *w * f;
    }
    (value, false)
}

/// Weighted-mesh approximation of E[f(S_{step+1}) | x, a].
///
/// `f_values` are f at the mesh points of step+1, `denoms` the table built by
/// [`precompute_denominators`] for the same mesh and step. A degenerate cell
/// (all weights underflowed) returns value 0 with the flag set; it is not an
/// error.
pub fn mesh_expectation(
    x: &[f64],
    a: &[f64],
    step: usize,
    f_values: &[f64],
    mesh: &TrajectoryMesh,
    kernel: &dyn TransitionKernel,
    denoms: &DenominatorTable,
) -> Result<(f64, WeightVector)> {
    if denoms.step != step {
        return Err(invalid(format!(
            "denominator table built for step {}, queried at step {step}",
            denoms.step
        )));
    }
    if denoms.len() != mesh.n_paths {
        return Err(invalid(
            "denominator table does not match the mesh path count",
        ));
    }
    if f_values.len() != mesh.n_paths {
        return Err(Error::DimensionMismatch {
            what: "f_values",
            expected: mesh.n_paths,
            got: f_values.len(),
        });
    }
    if !f_values.iter().all(|v| v.is_finite()) {
        return Err(invalid("f_values must be finite"));
    }
    if x.len() != mesh.state_dim {
        return Err(Error::DimensionMismatch {
            what: "query state",
            expected: mesh.state_dim,
            got: x.len(),
        });
    }
    let mut weights = vec![0.0; mesh.n_paths];
    let (value, degenerate) =
        expectation_core(x, a, step, f_values, mesh, kernel, denoms, &mut weights);
    Ok((
        value,
        WeightVector {
            weights,
            degenerate,
        },
    ))
}

/// Check the contraction property of one weighted-expectation cell:
/// |E(f) − E(g)| ≤ max_n |f_n − g_n| (+ a rounding allowance).
pub fn contraction_check(
    f_values: &[f64],
    g_values: &[f64],
    x: &[f64],
    a: &[f64],
    step: usize,
    mesh: &TrajectoryMesh,
    kernel: &dyn TransitionKernel,
    denoms: &DenominatorTable,
) -> Result<bool> {
    if g_values.len() != f_values.len() {
        return Err(Error::DimensionMismatch {
            what: "g_values",
            expected: f_values.len(),
            got: g_values.len(),
        });
    }
    let (f_val, w) = mesh_expectation(x, a, step, f_values, mesh, kernel, denoms)?;
    let g_val = if w.degenerate {
        0.0
    } else {
        w.weights
            .iter()
            .zip(g_values)
            .map(|(wi, gi)| wi * gi)
            .sum()
    };
    let sup: f64 = f_values
        .iter()
        .zip(g_values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((f_val - g_val).abs() <= sup + 1e-12)
}

/// Run the backward recursion over the whole mesh.
///
/// Terminal values are F at the mesh endpoints; each earlier step maximizes
/// reward-plus-weighted-expectation over the action set at every mesh point
/// (ties broken by the lowest action index). At step 0 only the start point
/// is evaluated and its optimum becomes `root_value`.
pub fn backward_solve(
    mesh: &TrajectoryMesh,
    spec: &MdpSpec,
    actions: &ActionSet,
) -> Result<(ValueTable, PolicyTable, CostCounter)> {
    if mesh.state_dim != spec.state_dim || mesh.horizon != spec.horizon {
        return Err(invalid(
            "mesh shape does not match the problem specification",
        ));
    }
    if actions.action_dim() != spec.action_dim {
        return Err(Error::DimensionMismatch {
            what: "action set",
            expected: spec.action_dim,
            got: actions.action_dim(),
        });
    }
    let n = mesh.n_paths;
    if n < 2 {
        return Err(invalid("backward solve requires at least 2 paths"));
    }
    let h_max = mesh.horizon;
    let n_actions = actions.len() as u64;
    let kernel = spec.kernel.as_ref();

    let mut values = vec![0.0f64; n * (h_max + 1)];
    let mut choices = vec![0usize; n * h_max];
    let mut cost = CostCounter {
        hn2_budget: (h_max * n * n) as u64,
        ..CostCounter::default()
    };

    // terminal layer, stored exactly as evaluated
    for r in 0..n {
        values[r * (h_max + 1) + h_max] = spec.terminal(mesh.state(r, h_max));
    }

    let mut root_value = f64::NEG_INFINITY;
    let mut root_choice = 0usize;

    for step in (0..h_max).rev() {
        let denoms = precompute_denominators(mesh, kernel, step)?;
        cost.denominator_evals += (n * (n - 1)) as u64;
        cost.density_evals += (n * (n - 1)) as u64;
        let f_next: Vec<f64> = (0..n)
            .map(|r| values[r * (h_max + 1) + step + 1])
            .collect();
        if let Some(&bad) = f_next.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {bad} entered the backward recursion at step {}",
                step + 1
            )));
        }

        let optimize = |x: &[f64], scratch: &mut [f64]| -> (f64, usize, u64) {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0usize;
            let mut degenerate = 0u64;
            for (idx, a) in actions.iter().enumerate() {
                let (expect, degen) =
                    expectation_core(x, a, step, &f_next, mesh, kernel, &denoms, scratch);
                if degen {
                    degenerate += 1;
                }
                let q = spec.reward(step, x, a) + expect;
                if q > best {
                    best = q;
                    best_idx = idx;
                }
            }
            (best, best_idx, degenerate)
        };

        if step == 0 {
            // every chain starts at x0; one evaluation covers the whole column
            let mut scratch = vec![0.0; n];
            let (best, best_idx, degenerate) = optimize(&mesh.start_state, &mut scratch);
            cost.density_evals += n_actions * n as u64;
            cost.weight_builds += n_actions;
            cost.degenerate_weight_count += degenerate;
            root_value = best;
            root_choice = best_idx;
            for r in 0..n {
                values[r * (h_max + 1)] = best;
                choices[r * h_max] = best_idx;
            }
        } else {
            let results: Vec<(f64, usize, u64)> = (0..n)
                .into_par_iter()
                .map_init(
                    || vec![0.0f64; n],
                    |scratch, r| optimize(mesh.state(r, step), scratch),
                )
                .collect();
            cost.density_evals += n as u64 * n_actions * n as u64;
            cost.weight_builds += n as u64 * n_actions;
            for (r, (best, best_idx, degenerate)) in results.into_iter().enumerate() {
                values[r * (h_max + 1) + step] = best;
                choices[r * h_max + step] = best_idx;
                cost.degenerate_weight_count += degenerate;
            }
        }
    }

    if cost.degenerate_weight_count > 0 {
        log::warn!(
            "{} of {} weight vectors were degenerate (all terms underflowed); \
             the mesh may be under-resolved",
            cost.degenerate_weight_count,
            cost.weight_builds
        );
    }

    let value_table = ValueTable {
        values,
        n_paths: n,
        horizon: h_max,
        root_value,
    };
    let policy = PolicyTable::new(choices, n, h_max, actions.clone())?;
    debug_assert_eq!(policy.choice(0, 0), root_choice);
    Ok((value_table, policy, cost))
}

/// CSV export of the solve result: `path,step,value,action_index`, with an
/// empty action index on the terminal row.
pub fn write_solution_csv<W: Write>(
    values: &ValueTable,
    policy: &PolicyTable,
    w: &mut W,
) -> std::io::Result<()> {
    writeln!(w, "path,step,value,action_index")?;
    for path in 0..values.n_paths {
        for step in 0..=values.horizon {
            if step < values.horizon {
                writeln!(
                    w,
                    "{},{},{},{}",
                    path,
                    step,
                    values.value(path, step),
                    policy.choice(path, step)
                )?;
            } else {
                writeln!(w, "{},{},{},", path, step, values.value(path, step))?;
            }
        }
    }
    Ok(())
}
