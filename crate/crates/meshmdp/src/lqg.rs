//! The discretized linear-quadratic-Gaussian benchmark.
//!
//! The continuous problem dX = 2√λ m dt + √2 dW with running cost ∫|m|² dt
//! and terminal reward F(x) = ±log((1+|x|²)/2) discretizes, with a_h =
//! 2√λ m Δ, to a Gaussian shift chain S_{h+1} = S_h + a_h + √(2Δ) ε and the
//! objective −Σ|a_h|²/(4λΔ) + F(S_H). The closed-form optimum
//! (1/λ) log E[exp(λF(x + √2 W_T))] serves as the benchmark reference.
//!
//! Experiments sample action grids uniformly from [−A, A]^d (the zero action
//! is always prepended so "do nothing" stays representable), resample them per
//! repetition, and aggregate solve statistics per mesh size.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kernels::GaussianShiftKernel;
use crate::mdp::{simulate_mesh, ActionSet, MdpSpec, RewardFn, TerminalFn};
use crate::oracles::{lqg_closed_form, OracleEstimate};
use crate::rng::Substream;
use crate::solver::backward_solve;
use std::sync::Arc;

/// Sign choice in F(x) = ±log((1+|x|²)/2).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalSign {
    Plus,
    Minus,
}

impl TerminalSign {
    fn factor(self) -> f64 {
        match self {
            TerminalSign::Plus => 1.0,
            TerminalSign::Minus => -1.0,
        }
    }
}

/// Full description of one benchmark configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LqgConfig {
    pub dim: usize,
    pub lambda: f64,
    /// Terminal time T.
    pub t_end: f64,
    /// Time step Δ; the horizon is round(T/Δ).
    pub delta: f64,
    /// Action box half-width A.
    pub action_halfwidth: f64,
    /// Number of uniformly sampled actions (the zero action is prepended).
    pub n_actions: usize,
    pub terminal_sign: TerminalSign,
    pub x0: Vec<f64>,
    pub n_paths_list: Vec<usize>,
    pub n_repetitions: usize,
    pub base_seed: u64,
    /// Monte Carlo samples for the closed-form reference.
    pub reference_samples: usize,
}

impl LqgConfig {
    pub fn horizon(&self) -> usize {
        (self.t_end / self.delta).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("dim must be at least 1"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda must be positive"));
        }
        if !(self.delta > 0.0) || !(self.t_end > 0.0) || self.horizon() == 0 {
            return Err(invalid("t_end and delta must give a horizon of at least 1"));
        }
        if !(self.action_halfwidth > 0.0) {
            return Err(invalid("action_halfwidth must be positive"));
        }
        if self.x0.len() != self.dim {
            return Err(invalid(format!(
                "x0 has length {}, expected {}",
                self.x0.len(),
                self.dim
            )));
        }
        if self.n_paths_list.is_empty() || self.n_paths_list.iter().any(|&n| n < 2) {
            return Err(invalid("n_paths_list entries must all be at least 2"));
        }
        if self.n_repetitions == 0 {
            return Err(invalid("n_repetitions must be at least 1"));
        }
        if self.reference_samples < 2 {
            return Err(invalid("reference_samples must be at least 2"));
        }
        Ok(())
    }

    /// The terminal function F(x) = ±log((1+|x|²)/2) as a shareable closure.
    pub fn terminal_fn(&self) -> TerminalFn {
        let sign = self.terminal_sign.factor();
        Arc::new(move |x: &[f64]| {
            sign * ((1.0 + x.iter().map(|v| v * v).sum::<f64>()) / 2.0).ln()
        })
    }
}

/// Build the discretized MDP: reward −|a|²/(4λΔ), terminal ±log((1+|x|²)/2),
/// Gaussian shift kernel with σ_h = √(2Δ) per step (the Euler width of the
/// √2-scaled Brownian driver).
pub fn build_lqg_spec(cfg: &LqgConfig) -> Result<MdpSpec> {
    cfg.validate()?;
    let horizon = cfg.horizon();
    let sigma = (2.0 * cfg.delta).sqrt();
    let kernel = Arc::new(GaussianShiftKernel::isotropic(sigma, horizon, cfg.dim)?);
    let coef = 1.0 / (4.0 * cfg.lambda * cfg.delta);
    let reward: RewardFn =
        Arc::new(move |_h, _x, a: &[f64]| -coef * a.iter().map(|v| v * v).sum::<f64>());
    let terminal = cfg.terminal_fn();
    // generous sup bound over the reachable region, diagnostics only
    let reach = crate::numeric::norm2(&cfg.x0)
        + horizon as f64 * cfg.action_halfwidth * (cfg.dim as f64).sqrt()
        + 6.0 * (2.0 * cfg.delta * horizon as f64 * cfg.dim as f64).sqrt();
    let bound_f = ((1.0 + reach * reach) / 2.0).ln().abs() + std::f64::consts::LN_2;
    let bound_r = coef * cfg.dim as f64 * cfg.action_halfwidth * cfg.action_halfwidth;
    MdpSpec::new(
        cfg.dim,
        cfg.dim,
        horizon,
        reward,
        terminal,
        kernel,
        bound_f.max(bound_r),
    )
}

/// `count` i.i.d. uniform draws from [−halfwidth, halfwidth]^dim with the zero
/// action prepended, deterministic in the seed.
pub fn sample_actions(dim: usize, count: usize, halfwidth: f64, seed: u64) -> Result<ActionSet> {
    if count == 0 {
        return Err(invalid("need at least one sampled action"));
    }
    if dim == 0 || !(halfwidth > 0.0) {
        return Err(invalid("need a positive dimension and halfwidth"));
    }
    let base = Substream::new(seed).label("actions");
    let mut actions = Vec::with_capacity(count + 1);
    actions.push(vec![0.0; dim]);
    for i in 0..count {
        let mut rng = base.index(i as u64).rng();
        actions.push((0..dim).map(|_| rng.uniform(-halfwidth, halfwidth)).collect());
    }
    Ok(ActionSet::from_samples(actions, seed, count, halfwidth))
}

/// One aggregated table row.
#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub n_paths: usize,
    /// Mean root value over the repetitions.
    pub mean: f64,
    /// |mean − reference|.
    pub abs_bias: f64,
    /// Standard deviation of the root value over the repetitions.
    pub std: f64,
    pub reference: f64,
    pub reference_std_error: f64,
    pub degenerate_weight_count: u64,
    pub density_evals: u64,
    pub wall_time_s: f64,
}

/// A table row that either aggregated successfully or recorded its failure.
#[derive(Clone, Debug)]
pub enum RowOutcome {
    Ok(RunResult),
    Failed { n_paths: usize, error: String },
}

fn solve_once(
    spec: &MdpSpec,
    cfg: &LqgConfig,
    n_paths: usize,
    rep: usize,
) -> Result<(f64, u64, u64)> {
    let rep_base = Substream::new(cfg.base_seed)
        .label("table")
        .index(n_paths as u64)
        .index(rep as u64);
    let actions = sample_actions(
        cfg.dim,
        cfg.n_actions,
        cfg.action_halfwidth,
        rep_base.label("actions").derived_seed(),
    )?;
    let controls = vec![vec![0.0; cfg.dim]; cfg.horizon()];
    let mesh = simulate_mesh(
        spec,
        &controls,
        &cfg.x0,
        n_paths,
        rep_base.label("mesh").derived_seed(),
    )?;
    let (values, _, cost) = backward_solve(&mesh, spec, &actions)?;
    Ok((
        values.root_value,
        cost.degenerate_weight_count,
        cost.density_evals,
    ))
}

/// The closed-form reference for a configuration.
pub fn reference_estimate(cfg: &LqgConfig) -> Result<OracleEstimate> {
    let terminal = cfg.terminal_fn();
    lqg_closed_form(
        &cfg.x0,
        0.0,
        cfg.lambda,
        cfg.t_end,
        terminal.as_ref(),
        cfg.reference_samples,
        Substream::new(cfg.base_seed).label("reference").derived_seed(),
    )
}

/// Run the full table: for every mesh size, `n_repetitions` independent
/// solves with freshly sampled action grids and meshes, aggregated against
/// the closed-form reference. Rows are produced in ascending mesh size; a
/// failed row is recorded and the remaining rows continue.
pub fn run_table(cfg: &LqgConfig) -> Result<Vec<RowOutcome>> {
    cfg.validate()?;
    let spec = build_lqg_spec(cfg)?;
    let reference = reference_estimate(cfg)?;
    let mut sizes = cfg.n_paths_list.clone();
    sizes.sort_unstable();

    let mut rows = Vec::with_capacity(sizes.len());
    for n_paths in sizes {
        let started = Instant::now();
        let reps: Vec<Result<(f64, u64, u64)>> = (0..cfg.n_repetitions)
            .into_par_iter()
            .map(|rep| solve_once(&spec, cfg, n_paths, rep))
            .collect();
        let outcome = aggregate_row(cfg, n_paths, reps, &reference, started.elapsed().as_secs_f64());
        if let RowOutcome::Failed { n_paths, error } = &outcome {
            log::error!("table row N={n_paths} failed: {error}");
        }
        rows.push(outcome);
    }
    Ok(rows)
}

fn aggregate_row(
    cfg: &LqgConfig,
    n_paths: usize,
    reps: Vec<Result<(f64, u64, u64)>>,
    reference: &OracleEstimate,
    wall_time_s: f64,
) -> RowOutcome {
    let mut roots = Vec::with_capacity(reps.len());
    let mut degenerate = 0u64;
    let mut evals = 0u64;
    for r in reps {
        match r {
            Ok((root, deg, ev)) => {
                roots.push(root);
                degenerate += deg;
                evals += ev;
            }
            Err(e) => {
                return RowOutcome::Failed {
                    n_paths,
                    error: e.to_string(),
                }
            }
        }
    }
    let n = roots.len() as f64;
    let mean = roots.iter().sum::<f64>() / n;
    let std = if roots.len() > 1 {
        (roots.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        log::warn!("single repetition for N={n_paths}; reporting std = 0");
        0.0
    };
    let _ = cfg;
    RowOutcome::Ok(RunResult {
        n_paths,
        mean,
        abs_bias: (mean - reference.value).abs(),
        std,
        reference: reference.value,
        reference_std_error: reference.std_error,
        degenerate_weight_count: degenerate,
        density_evals: evals,
        wall_time_s,
    })
}

/// One λ-sweep row: mesh estimate and closed-form reference side by side.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mesh_value: f64,
    pub mesh_std: f64,
    pub reference_value: f64,
    pub reference_std_error: f64,
}

/// Estimate the optimum across a λ grid with the largest configured mesh
/// size, recomputing the closed-form reference at every λ. Both curves use
/// per-λ derived seeds from the same base.
pub fn lambda_sweep(cfg: &LqgConfig, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if lambdas.is_empty() || lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(invalid("lambdas must be positive"));
    }
    let n_paths = *cfg.n_paths_list.iter().max().unwrap();
    let mut rows = Vec::with_capacity(lambdas.len());
    for (i, &lambda) in lambdas.iter().enumerate() {
        let sweep_cfg = LqgConfig {
            lambda,
            n_paths_list: vec![n_paths],
            base_seed: Substream::new(cfg.base_seed)
                .label("sweep")
                .index(i as u64)
                .derived_seed(),
            ..cfg.clone()
        };
        let mut table = run_table(&sweep_cfg)?;
        match table.pop() {
            Some(RowOutcome::Ok(row)) => rows.push(SweepRow {
                lambda,
                mesh_value: row.mean,
                mesh_std: row.std,
                reference_value: row.reference,
                reference_std_error: row.reference_std_error,
            }),
            Some(RowOutcome::Failed { error, .. }) => {
                return Err(crate::error::Error::Numeric(format!(
                    "sweep point lambda={lambda} failed: {error}"
                )))
            }
            None => unreachable!("run_table returns one row per mesh size"),
        }
    }
    Ok(rows)
}

/// Scan a λ grid and pick the value whose closed-form reference sits closest
/// to `target`. All reference estimates reuse the same substream (common
/// random numbers), so the selection is stable under the seed.
pub fn calibrate_lambda(
    cfg: &LqgConfig,
    lambdas: &[f64],
    target: f64,
) -> Result<(f64, Vec<(f64, OracleEstimate)>)> {
    cfg.validate()?;
    if lambdas.is_empty() || lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(invalid("lambdas must be positive"));
    }
    let terminal = cfg.terminal_fn();
    let seed = Substream::new(cfg.base_seed)
        .label("calibrate")
        .derived_seed();
    let mut scanned = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let est = lqg_closed_form(
            &cfg.x0,
            0.0,
            lambda,
            cfg.t_end,
            terminal.as_ref(),
            cfg.reference_samples,
            seed,
        )?;
        scanned.push((lambda, est));
    }
    let best = scanned
        .iter()
        .min_by(|a, b| {
            (a.1.value - target)
                .abs()
                .total_cmp(&(b.1.value - target).abs())
        })
        .map(|(l, _)| *l)
        .unwrap();
    Ok((best, scanned))
}

/// CSV header shared by the table and sweep writers.
pub const TABLE_CSV_HEADER: &str = "config_id,n_paths,mean,abs_bias,std,reference,reference_std,degenerate_count,density_evals,wall_time_s";

/// Write table rows as CSV. Failed rows are emitted as comments so the data
/// columns stay machine-readable.
pub fn write_table_csv<W: Write>(
    config_id: &str,
    rows: &[RowOutcome],
    w: &mut W,
) -> std::io::Result<()> {
    writeln!(w, "{TABLE_CSV_HEADER}")?;
    for row in rows {
        match row {
            RowOutcome::Ok(r) => writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                config_id,
                r.n_paths,
                r.mean,
                r.abs_bias,
                r.std,
                r.reference,
                r.reference_std_error,
                r.degenerate_weight_count,
                r.density_evals,
                r.wall_time_s
            )?,
            RowOutcome::Failed { n_paths, error } => {
                writeln!(w, "# row n_paths={n_paths} failed: {error}")?
            }
        }
    }
    Ok(())
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: &mut W) -> std::io::Result<()> {
    writeln!(
        w,
        "lambda,mesh_value,mesh_std,reference_value,reference_std"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.lambda, r.mesh_value, r.mesh_std, r.reference_value, r.reference_std_error
        )?;
    }
    Ok(())
}
