//! Problem definition, trajectory mesh simulation, and forward policy
//! evaluation.
//!
//! An [`MdpSpec`] bundles the horizon, reward and terminal functions, and the
//! transition kernel. [`simulate_mesh`] draws N independent chains under fixed
//! representative controls, all starting from the same point; the resulting
//! [`TrajectoryMesh`] is the point cloud every backward step reuses.
//! [`evaluate_policy`] forward-simulates a greedy policy table, extending it
//! off-mesh by the nearest mesh point at the same step, and reports a Monte
//! Carlo estimate with its standard error — in expectation a lower bound on
//! the optimal value.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::kernels::TransitionKernel;
use crate::numeric::dist2_sq;
use crate::rng::Substream;

pub type RewardFn = Arc<dyn Fn(usize, &[f64], &[f64]) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type DynKernel = Arc<dyn TransitionKernel>;

/// Full problem definition for a discrete-time, finite-horizon MDP with a
/// transition density.
#[derive(Clone)]
pub struct MdpSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    reward: RewardFn,
    terminal: TerminalFn,
    pub kernel: DynKernel,
    /// Declared sup bound on |reward| and |terminal|; diagnostics only.
    pub reward_bound: f64,
    bound_violations: Arc<AtomicU64>,
}

impl MdpSpec {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        horizon: usize,
        reward: RewardFn,
        terminal: TerminalFn,
        kernel: DynKernel,
        reward_bound: f64,
    ) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 {
            return Err(invalid("state and action dimensions must be at least 1"));
        }
        if horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        if kernel.dim() != state_dim {
            return Err(Error::DimensionMismatch {
                what: "kernel state dimension",
                expected: state_dim,
                got: kernel.dim(),
            });
        }
        if !(reward_bound >= 0.0) {
            return Err(invalid("reward bound must be nonnegative"));
        }
        Ok(MdpSpec {
            state_dim,
            action_dim,
            horizon,
            reward,
            terminal,
            kernel,
            reward_bound,
            bound_violations: Arc::new(AtomicU64::new(0)),
        })
    }

    /// Immediate reward R_h(x, a), tracking declared-bound violations.
    pub fn reward(&self, step: usize, x: &[f64], a: &[f64]) -> f64 {
        let r = (self.reward)(step, x, a);
        self.check_bound(r, "reward");
        r
    }

    /// Terminal reward F(x), tracking declared-bound violations.
    pub fn terminal(&self, x: &[f64]) -> f64 {
        let f = (self.terminal)(x);
        self.check_bound(f, "terminal");
        f
    }

    fn check_bound(&self, value: f64, what: &str) {
        if value.abs() > self.reward_bound {
            let prior = self.bound_violations.fetch_add(1, Ordering::Relaxed);
            if prior == 0 {
                log::warn!(
                    "{what} value {value} exceeds the declared bound {}; \
                     continuing (bound is diagnostic only)",
                    self.reward_bound
                );
            }
        }
    }

    /// How many reward/terminal evaluations exceeded the declared bound.
    pub fn bound_violation_count(&self) -> u64 {
        self.bound_violations.load(Ordering::Relaxed)
    }
}

/// Where a finite action set came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum ActionProvenance {
    Explicit,
    UniformSampled {
        seed: u64,
        count: usize,
        halfwidth: f64,
    },
}

/// A finite, non-empty set of action vectors the solver maximizes over.
#[derive(Clone, Debug)]
pub struct ActionSet {
    actions: Vec<Vec<f64>>,
    pub provenance: ActionProvenance,
}

impl ActionSet {
    pub fn explicit(actions: Vec<Vec<f64>>, action_dim: usize) -> Result<Self> {
        if actions.is_empty() {
            return Err(invalid("action set must be non-empty"));
        }
        for a in &actions {
            if a.len() != action_dim {
                return Err(Error::DimensionMismatch {
                    what: "action vector",
                    expected: action_dim,
                    got: a.len(),
                });
            }
        }
        Ok(ActionSet {
            actions,
            provenance: ActionProvenance::Explicit,
        })
    }

    pub(crate) fn from_samples(
        actions: Vec<Vec<f64>>,
        seed: u64,
        count: usize,
        halfwidth: f64,
    ) -> Self {
        ActionSet {
            actions,
            provenance: ActionProvenance::UniformSampled {
                seed,
                count,
                halfwidth,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.actions.iter().map(|a| a.as_slice())
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].len()
    }

    /// Largest Euclidean action norm in the set.
    pub fn max_norm(&self) -> f64 {
        self.actions
            .iter()
            .map(|a| crate::numeric::norm2(a))
            .fold(0.0, f64::max)
    }
}

/// N simulated chains under representative controls, with full provenance.
///
/// States are stored flat as `[path][step][component]`; every path starts at
/// `start_state` and path n at step h is advanced with the RNG substream
/// `(seed, "mesh", n, h)`, so any step can be regenerated independently.
#[derive(Clone, Debug)]
pub struct TrajectoryMesh {
    states: Vec<f64>,
    pub n_paths: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub representative_controls: Vec<Vec<f64>>,
    pub start_state: Vec<f64>,
    pub seed: u64,
}

impl TrajectoryMesh {
    #[cfg(test)]
    pub(crate) fn from_raw(
        states: Vec<f64>,
        n_paths: usize,
        horizon: usize,
        state_dim: usize,
        representative_controls: Vec<Vec<f64>>,
        start_state: Vec<f64>,
    ) -> Self {
        assert_eq!(states.len(), n_paths * (horizon + 1) * state_dim);
        TrajectoryMesh {
            states,
            n_paths,
            horizon,
            state_dim,
            representative_controls,
            start_state,
            seed: 0,
        }
    }

    /// The state of `path` at `step` (0 ≤ step ≤ horizon).
    #[inline]
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let d = self.state_dim;
        let offset = (path * (self.horizon + 1) + step) * d;
        &self.states[offset..offset + d]
    }

    /// CSV dump with header `path,step,s0,...,s{d-1}`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "path,step")?;
        for i in 0..self.state_dim {
            write!(w, ",s{i}")?;
        }
        writeln!(w)?;
        for n in 0..self.n_paths {
            for h in 0..=self.horizon {
                write!(w, "{n},{h}")?;
                for v in self.state(n, h) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Greedy action indices at every mesh point and step.
#[derive(Clone, Debug)]
pub struct PolicyTable {
    choices: Vec<usize>,
    pub n_paths: usize,
    pub horizon: usize,
    pub action_set: ActionSet,
}

impl PolicyTable {
    pub fn new(
        choices: Vec<usize>,
        n_paths: usize,
        horizon: usize,
        action_set: ActionSet,
    ) -> Result<Self> {
        if choices.len() != n_paths * horizon {
            return Err(invalid(format!(
                "policy table needs {} entries, got {}",
                n_paths * horizon,
                choices.len()
            )));
        }
        if let Some(&bad) = choices.iter().find(|&&c| c >= action_set.len()) {
            return Err(invalid(format!(
                "policy references action index {bad}, but the set has {} actions",
                action_set.len()
            )));
        }
        Ok(PolicyTable {
            choices,
            n_paths,
            horizon,
            action_set,
        })
    }

    /// Action index chosen at mesh point `path`, step `step`.
    #[inline]
    pub fn choice(&self, path: usize, step: usize) -> usize {
        self.choices[path * self.horizon + step]
    }

    pub fn action_at(&self, path: usize, step: usize) -> &[f64] {
        self.action_set.action(self.choice(path, step))
    }
}

/// Simulate the trajectory mesh: N independent chains from `x0` driven by the
/// representative controls `b`.
///
/// Identical `(spec, b, x0, n_paths, seed)` give bit-identical meshes, for any
/// number of worker threads.
pub fn simulate_mesh(
    spec: &MdpSpec,
    controls: &[Vec<f64>],
    x0: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<TrajectoryMesh> {
    if controls.len() != spec.horizon {
        return Err(invalid(format!(
            "expected {} representative controls, got {}",
            spec.horizon,
            controls.len()
        )));
    }
    for b in controls {
        if b.len() != spec.action_dim {
            return Err(Error::DimensionMismatch {
                what: "representative control",
                expected: spec.action_dim,
                got: b.len(),
            });
        }
    }
    if x0.len() != spec.state_dim {
        return Err(Error::DimensionMismatch {
            what: "start state",
            expected: spec.state_dim,
            got: x0.len(),
        });
    }
    if n_paths == 0 {
        return Err(invalid("n_paths must be at least 1"));
    }

    let d = spec.state_dim;
    let h_max = spec.horizon;
    let slab = (h_max + 1) * d;
    let mut states = vec![0.0; n_paths * slab];
    let base = Substream::new(seed).label("mesh");
    states
        .par_chunks_mut(slab)
        .enumerate()
        .for_each(|(n, path_states)| {
            path_states[..d].copy_from_slice(x0);
            let mut x = x0.to_vec();
            for h in 0..h_max {
                let mut rng = base.index(n as u64).index(h as u64).rng();
                x = spec.kernel.sample(h, &x, &controls[h], &mut rng);
                path_states[(h + 1) * d..(h + 2) * d].copy_from_slice(&x);
            }
        });

    Ok(TrajectoryMesh {
        states,
        n_paths,
        horizon: h_max,
        state_dim: d,
        representative_controls: controls.to_vec(),
        start_state: x0.to_vec(),
        seed,
    })
}

/// Index of the mesh point at `step` nearest to `x` (ties: lowest index).
pub fn nearest_mesh_point(mesh: &TrajectoryMesh, step: usize, x: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for n in 0..mesh.n_paths {
        let d2 = dist2_sq(x, mesh.state(n, step));
        if d2 < best_d {
            best_d = d2;
            best = n;
        }
    }
    best
}

/// Forward-simulate the greedy policy, acting off-mesh with the action of the
/// nearest mesh point at the same step. Returns the Monte Carlo mean and its
/// standard error; in expectation this is a lower bound on the optimal value.
pub fn evaluate_policy(
    spec: &MdpSpec,
    mesh: &TrajectoryMesh,
    policy: &PolicyTable,
    value_table: &crate::solver::ValueTable,
    n_eval_paths: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if policy.n_paths != mesh.n_paths || policy.horizon != mesh.horizon {
        return Err(invalid(format!(
            "policy table shape ({} x {}) does not match the mesh ({} x {})",
            policy.n_paths, policy.horizon, mesh.n_paths, mesh.horizon
        )));
    }
    if value_table.n_paths != mesh.n_paths || value_table.horizon != mesh.horizon {
        return Err(invalid(format!(
            "value table shape ({} x {}) does not match the mesh ({} x {})",
            value_table.n_paths, value_table.horizon, mesh.n_paths, mesh.horizon
        )));
    }
    if policy.action_set.action_dim() != spec.action_dim {
        return Err(Error::DimensionMismatch {
            what: "policy action",
            expected: spec.action_dim,
            got: policy.action_set.action_dim(),
        });
    }
    if n_eval_paths == 0 {
        return Err(invalid("n_eval_paths must be at least 1"));
    }

    let base = Substream::new(seed).label("eval");
    let totals: Vec<f64> = (0..n_eval_paths)
        .into_par_iter()
        .map(|p| {
            let mut x = mesh.start_state.clone();
            let mut total = 0.0;
            for h in 0..mesh.horizon {
                let r = nearest_mesh_point(mesh, h, &x);
                let a = policy.action_at(r, h);
                total += spec.reward(h, &x, a);
                let mut rng = base.index(p as u64).index(h as u64).rng();
                x = spec.kernel.sample(h, &x, a, &mut rng);
            }
            total + spec.terminal(&x)
        })
        .collect();

    let n = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let std_error = if totals.len() > 1 {
        let var = totals.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok((mean, std_error))
}
