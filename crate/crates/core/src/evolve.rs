//! First-order product formulas over a state decomposition.
//!
//! `e^{-iHt} ≈ (prod_j e^{-i delta h_j rho_j})^n` with `delta = t/n`; every
//! factor is one density-matrix exponentiation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::decompose::StateDecomposition;
use crate::dme::{apply_term, DmeMode, DEFAULT_GUARD};
use crate::error::{Result, SbqsError};
use crate::io::{flatten_matrix, matrix_columns, CsvWriter, DenseMatrix};
use crate::tensor::{ComplexMatrix, C64};

pub const DEFAULT_MAX_STEPS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    /// Constant in `n = ceil(c_plan t^2 (sum |h_j|)^2 / eps)`.
    pub c_plan: f64,
    pub max_steps: usize,
    /// Largest admissible `|h_j delta|`.
    pub guard: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig { c_plan: 1.0, max_steps: DEFAULT_MAX_STEPS, guard: DEFAULT_GUARD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrotterPlan {
    pub n: usize,
    pub delta: f64,
    pub t: f64,
    pub term_order: Vec<usize>,
    pub target_error: f64,
}

impl TrotterPlan {
    /// Plan with an explicit step count.
    pub fn with_steps(d: &StateDecomposition, t: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(SbqsError::Argument("step count must be >= 1".into()));
        }
        if !t.is_finite() || t < 0.0 {
            return Err(SbqsError::Argument("evolution time must be finite and >= 0".into()));
        }
        let w = d.weight_norm();
        Ok(TrotterPlan {
            n,
            delta: t / n as f64,
            t,
            term_order: (0..d.len()).collect(),
            target_error: t * t * w * w / n as f64,
        })
    }

    /// Reorder the per-step term sequence with a seeded shuffle.
    pub fn shuffled(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.term_order.shuffle(&mut rng);
        self
    }

    /// Worst-case first-order product-formula error `t^2 (sum |h_j|)^2 / n`.
    pub fn trotter_bound(&self, d: &StateDecomposition) -> f64 {
        let w = d.weight_norm();
        self.t * self.t * w * w / self.n as f64
    }
}

/// `n = ceil(t^2 (sum |h_j|)^2 / eps)`, refined so every `|h_j delta| <= 0.1`.
pub fn plan(d: &StateDecomposition, t: f64, eps: f64) -> Result<TrotterPlan> {
    plan_with(d, t, eps, &PlanConfig::default())
}

pub fn plan_with(d: &StateDecomposition, t: f64, eps: f64, cfg: &PlanConfig) -> Result<TrotterPlan> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(SbqsError::Argument("target error must be positive".into()));
    }
    if !t.is_finite() || t < 0.0 {
        return Err(SbqsError::Argument("evolution time must be finite and >= 0".into()));
    }
    let w = d.weight_norm();
    let hmax = d.terms.iter().map(|x| x.weight.norm()).fold(0.0, f64::max);
    let by_error = (cfg.c_plan * t * t * w * w / eps).ceil();
    let by_guard = (hmax * t / cfg.guard).ceil();
    let n = by_error.max(by_guard).max(1.0);
    if n > cfg.max_steps as f64 {
        return Err(SbqsError::Budget(format!(
            "{n:e} Trotter steps needed, limit is {}",
            cfg.max_steps
        )));
    }
    let mut p = TrotterPlan::with_steps(d, t, n as usize)?;
    p.target_error = eps;
    Ok(p)
}

/// Aggregate resource use of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ResourceReport {
    pub steps: u64,
    pub dme_applications: u64,
    /// Resource-state copies consumed by circuit or e-SWAP steps.
    pub copies: u64,
    /// Circuit executions including failed heralds.
    pub attempts: u64,
}

/// Time-indexed sequence of simulator states.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    #[serde(skip)]
    pub states: Vec<ComplexMatrix>,
    /// Mean herald probability per step (circuit mode only).
    pub herald_probs: Vec<f64>,
    /// Accumulated error bound (product formula plus per-term circuit bounds).
    pub error_budget: f64,
    /// `ln` of the discarded trace at each sample, for non-unitary generators.
    pub log_norms: Vec<f64>,
    pub resources: ResourceReport,
}

impl Trajectory {
    pub fn new() -> Self {
        Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            herald_probs: Vec::new(),
            error_budget: 0.0,
            log_norms: Vec::new(),
            resources: ResourceReport::default(),
        }
    }

    pub fn push(&mut self, t: f64, state: ComplexMatrix, log_norm: f64) {
        self.times.push(t);
        self.states.push(state);
        self.log_norms.push(log_norm);
    }

    pub fn final_state(&self) -> &ComplexMatrix {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// CSV with columns `t, log_norm, re_i_j, im_i_j, ...` preceded by comments.
    pub fn to_csv(&self, provenance: &[String]) -> String {
        let mut w = CsvWriter::new();
        for p in provenance {
            w.comment(p);
        }
        let d = self.states.first().map(|s| s.nrows()).unwrap_or(0);
        let mut cols = vec!["t".to_string(), "log_norm".to_string()];
        cols.extend(matrix_columns(d));
        w.header(&cols);
        for ((t, s), ln) in self.times.iter().zip(&self.states).zip(&self.log_norms) {
            let mut row = vec![*t, *ln];
            row.extend(flatten_matrix(s));
            w.row(&row);
        }
        w.finish()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "times": self.times,
            "states": self.states.iter().map(DenseMatrix::from_matrix).collect::<Vec<_>>(),
            "herald_probs": self.herald_probs,
            "error_budget": self.error_budget,
            "log_norms": self.log_norms,
            "resources": self.resources,
        })
    }
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory::new()
    }
}

/// Execution options shared by the simulators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub mode: DmeMode,
    /// Record a sample every this many steps; 0 records only the endpoints.
    pub sample_every: usize,
    /// Seed for sampled post-selection.
    pub seed: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { mode: DmeMode::default(), sample_every: 0, seed: 0 }
    }
}

impl SimOptions {
    pub fn with_mode(mode: DmeMode) -> Self {
        SimOptions { mode, ..SimOptions::default() }
    }

    pub(crate) fn records(&self, step: usize, n: usize) -> bool {
        step == n || (self.sample_every > 0 && step % self.sample_every == 0)
    }

    pub(crate) fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Running totals while stepping.
#[derive(Debug, Default)]
pub(crate) struct StepStats {
    pub p_sum: f64,
    pub p_count: usize,
    pub log_norm: f64,
    pub bound: f64,
}

/// One product-formula step `prod_j e^{-i delta h_j rho_j}` in plan order.
pub(crate) fn trotter_step(
    d: &StateDecomposition,
    order: &[usize],
    sigma: ComplexMatrix,
    delta: f64,
    mode: &DmeMode,
    rng: &mut ChaCha8Rng,
    stats: &mut StepStats,
    res: &mut ResourceReport,
) -> Result<ComplexMatrix> {
    let mut state = sigma;
    for &j in order {
        let term = &d.terms[j];
        let kappa = term.weight * delta;
        if kappa == C64::new(0.0, 0.0) {
            continue;
        }
        let out = apply_term(&term.state, &state, kappa, mode, Some(rng))?;
        if let Some(p) = out.p_herald {
            stats.p_sum += p;
            stats.p_count += 1;
        }
        stats.log_norm += out.log_norm;
        stats.bound += out.error_bound;
        res.dme_applications += 1;
        res.copies += out.copies as u64;
        res.attempts += out.attempts;
        state = out.state;
    }
    // e^{-i q delta} only rescales the norm through Im q
    stats.log_norm += 2.0 * d.identity_offset.im * delta;
    Ok(state)
}

/// Evolve `sigma0` under the decomposed generator following `plan`.
///
/// Complex weights realize `e^{-iH delta} sigma e^{iH† delta}` with the
/// state renormalized after every factor.
pub fn simulate_linear(
    d: &StateDecomposition,
    sigma0: &ComplexMatrix,
    plan: &TrotterPlan,
    opts: &SimOptions,
) -> Result<Trajectory> {
    if sigma0.nrows() != d.dim || !sigma0.is_square() {
        return Err(SbqsError::Dimension(format!(
            "initial state is {}x{}, decomposition acts on dim {}",
            sigma0.nrows(),
            sigma0.ncols(),
            d.dim
        )));
    }
    if plan.term_order.len() != d.len() || plan.term_order.iter().any(|&j| j >= d.len()) {
        return Err(SbqsError::Argument("plan term order does not match the decomposition".into()));
    }
    let mut rng = opts.rng();
    let mut traj = Trajectory::new();
    traj.push(0.0, sigma0.clone(), 0.0);
    let mut state = sigma0.clone();
    let mut stats = StepStats::default();
    for step in 1..=plan.n {
        let before = stats.p_count;
        let p_before = stats.p_sum;
        state = trotter_step(
            d,
            &plan.term_order,
            state,
            plan.delta,
            &opts.mode,
            &mut rng,
            &mut stats,
            &mut traj.resources,
        )?;
        traj.resources.steps += 1;
        if stats.p_count > before {
            traj.herald_probs.push((stats.p_sum - p_before) / (stats.p_count - before) as f64);
        }
        if opts.records(step, plan.n) && plan.delta > 0.0 {
            traj.push(step as f64 * plan.delta, state.clone(), stats.log_norm);
        }
    }
    traj.error_budget = plan.trotter_bound(d) + stats.bound;
    Ok(traj)
}
