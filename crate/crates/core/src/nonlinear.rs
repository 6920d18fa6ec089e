//! State-history-dependent Hamiltonians `H = sum_k c_k Tr[xi_k Gamma_k] rho_k`
//! with `Gamma = prod_j sigma(t - a_j)^{n_j}`.
//!
//! The coupling `Tr[xi Gamma]` is imprinted on a control qubit by a chain of
//! controlled-SWAPs over `xi ⊗ sigma(t-a_1)^{⊗n_1} ⊗ ...`, and the same control
//! then drives one heralded c-SWAP against `rho ⊗ sigma(t)`.

use std::collections::VecDeque;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decompose::{ResourceState, StateDecomposition};
use crate::dme::{
    cswap_heralded, dme_channel_exact_tracked, eswap_step_with, finish, herald, ControlNormalization,
    ControlQubit, DmeMode, StepKind,
};
use crate::error::{Result, SbqsError};
use crate::evolve::{trotter_step, ResourceReport, SimOptions, StepStats, Trajectory};
use crate::io::{DenseMatrix, JsonComplex};
use crate::tensor::{
    identity, kron, party_swap_operator, partial_trace, trace, ComplexMatrix,
    QRegister, Tolerances, C64, I, ONE, ZERO,
};

/// Delays must sit on the step grid to this relative precision.
pub const SNAP_TOLERANCE: f64 = 1e-6;

/// Largest target space (product of party dims) built explicitly by the
/// automatic backend.
pub const CHAIN_EXPLICIT_LIMIT: usize = 64;

/// One term `c Tr[xi Gamma] rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryTerm {
    pub c: C64,
    pub xi: ComplexMatrix,
    pub rho: ResourceState,
    pub delays: Vec<f64>,
    pub powers: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TermJson {
    c: JsonComplex,
    xi: DenseMatrix,
    rho: Value,
    delays: Vec<f64>,
    powers: Vec<usize>,
}

impl HistoryTerm {
    pub fn new(
        c: C64,
        xi: ComplexMatrix,
        rho: ResourceState,
        delays: Vec<f64>,
        powers: Vec<usize>,
    ) -> Result<Self> {
        let t = HistoryTerm { c, xi, rho, delays, powers };
        t.validate(&Tolerances::default())?;
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.rho.dim()
    }

    /// `N = sum_j n_j`, the number of history copies consumed per estimate.
    pub fn parties(&self) -> usize {
        self.powers.iter().sum()
    }

    pub fn max_delay(&self) -> f64 {
        self.delays.iter().copied().fold(0.0, f64::max)
    }

    pub fn validate(&self, tol: &Tolerances) -> Result<()> {
        let d = self.rho.dim();
        self.rho.validate(tol)?;
        if self.xi.shape() != (d, d) {
            return Err(SbqsError::Dimension(format!(
                "xi is {}x{}, resource state has dim {d}",
                self.xi.nrows(),
                self.xi.ncols()
            )));
        }
        crate::tensor::check_density(&self.xi, tol)
            .map_err(|e| SbqsError::Density(format!("xi must be a trace-one positive operator: {e}")))?;
        if self.delays.len() != self.powers.len() {
            return Err(SbqsError::Argument("delays and powers differ in length".into()));
        }
        if self.delays.is_empty() {
            return Err(SbqsError::Argument("a history term needs at least one delay".into()));
        }
        if self.delays.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(SbqsError::Argument("delays must be finite and >= 0".into()));
        }
        if self.powers.iter().any(|&n| n == 0) {
            return Err(SbqsError::Argument("powers must be >= 1".into()));
        }
        if !(self.c.re.is_finite() && self.c.im.is_finite()) {
            return Err(SbqsError::Argument("coupling must be finite".into()));
        }
        Ok(())
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let t: TermJson = serde_json::from_value(v.clone())
            .map_err(|e| SbqsError::Argument(format!("history term: {e}")))?;
        let rho = ResourceState::from_json(&t.rho)?;
        let xi = t.xi.to_square(Some(rho.dim()))?;
        HistoryTerm::new(t.c.into(), xi, rho, t.delays, t.powers)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(TermJson {
            c: self.c.into(),
            xi: DenseMatrix::from_matrix(&self.xi),
            rho: self.rho.to_json(),
            delays: self.delays.clone(),
            powers: self.powers.clone(),
        })
        .expect("term serializes")
    }
}

/// States on the grid `t, t - delta, ..., t - tau`, newest last.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    pub delta: f64,
    states: VecDeque<ComplexMatrix>,
    capacity: usize,
    /// Time of the newest entry.
    pub t: f64,
}

impl HistoryBuffer {
    /// Sample `f` on `[-tau, 0]`; the newest entry is `f(0)`.
    pub fn from_fn(delta: f64, tau: f64, f: impl Fn(f64) -> ComplexMatrix) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(SbqsError::Argument("history step must be positive".into()));
        }
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(SbqsError::Argument("memory length must be >= 0".into()));
        }
        let k = snap(tau, delta)?;
        let states: VecDeque<_> = (0..=k).rev().map(|j| f(-(j as f64) * delta)).collect();
        let d = states[0].nrows();
        let tol = Tolerances::default();
        for s in &states {
            if s.shape() != (d, d) {
                return Err(SbqsError::Dimension("history states differ in dimension".into()));
            }
            crate::tensor::check_density(s, &tol)?;
        }
        Ok(HistoryBuffer { delta, states, capacity: k + 1, t: 0.0 })
    }

    pub fn constant(sigma: &ComplexMatrix, delta: f64, tau: f64) -> Result<Self> {
        HistoryBuffer::from_fn(delta, tau, |_| sigma.clone())
    }

    pub fn dim(&self) -> usize {
        self.states[0].nrows()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Memory length covered, `(len - 1) delta`.
    pub fn tau(&self) -> f64 {
        (self.capacity - 1) as f64 * self.delta
    }

    pub fn latest(&self) -> &ComplexMatrix {
        self.states.back().expect("buffer is never empty")
    }

    /// `sigma(t - a)`; `a` must lie on the grid.
    pub fn at_delay(&self, a: f64) -> Result<&ComplexMatrix> {
        let k = snap(a, self.delta)?;
        if k >= self.states.len() {
            return Err(SbqsError::Argument(format!(
                "delay {a} exceeds the stored memory {}",
                self.tau()
            )));
        }
        Ok(&self.states[self.states.len() - 1 - k])
    }

    /// Append the state at `t + delta`, dropping entries older than `tau`.
    pub fn push(&mut self, state: ComplexMatrix) {
        self.states.push_back(state);
        while self.states.len() > self.capacity {
            self.states.pop_front();
        }
        self.t += self.delta;
    }
}

fn snap(a: f64, delta: f64) -> Result<usize> {
    let k = a / delta;
    let kr = k.round();
    if (k - kr).abs() > SNAP_TOLERANCE {
        return Err(SbqsError::GridMismatch { delay: a, delta });
    }
    Ok(kr as usize)
}

/// History factors `sigma(t-a_1)` (x n_1), `sigma(t-a_2)` (x n_2), ... in listed order.
pub fn gamma_factors<'a>(term: &HistoryTerm, buf: &'a HistoryBuffer) -> Result<Vec<&'a ComplexMatrix>> {
    if buf.dim() != term.dim() {
        return Err(SbqsError::Dimension("history buffer and term dims differ".into()));
    }
    let mut out = Vec::with_capacity(term.parties());
    for (&a, &n) in term.delays.iter().zip(&term.powers) {
        let s = buf.at_delay(a)?;
        out.extend(std::iter::repeat(s).take(n));
    }
    Ok(out)
}

/// `xi ⊗ Gamma` register with parties `0..=N`.
pub fn build_gamma_register(term: &HistoryTerm, buf: &HistoryBuffer) -> Result<QRegister> {
    let factors = gamma_factors(term, buf)?;
    let mut parts: Vec<&ComplexMatrix> = vec![&term.xi];
    parts.extend(factors);
    QRegister::product(&parts)
}

/// `Tr[xi Gamma]` by direct matrix products.
pub fn gamma_trace(term: &HistoryTerm, buf: &HistoryBuffer) -> Result<C64> {
    let mut m = term.xi.clone();
    for s in gamma_factors(term, buf)? {
        m = &m * s;
    }
    Ok(trace(&m))
}

/// Reduced control after `U_cs(N-1,N) ... U_cs(0,1)` on `control ⊗ reg`,
/// with all target parties traced out. Every gate is materialized.
pub fn chain_cswap_control_explicit(reg: &QRegister, control: &ComplexMatrix) -> Result<ComplexMatrix> {
    let dims = reg.dims();
    if dims.len() < 2 {
        return Err(SbqsError::Argument("the chain needs xi and at least one history party".into()));
    }
    if dims.iter().any(|&d| d != dims[0]) {
        return Err(SbqsError::Dimension("all chain parties must share one dimension".into()));
    }
    if control.shape() != (2, 2) {
        return Err(SbqsError::Dimension("control must be 2x2".into()));
    }
    let n = reg.dim();
    let p0 = ComplexMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, ZERO]);
    let p1 = ComplexMatrix::from_row_slice(2, 2, &[ZERO, ZERO, ZERO, ONE]);
    let id = identity(n);
    let mut state = kron(control, reg.state())?;
    for k in 0..dims.len() - 1 {
        let s = party_swap_operator(dims, k, k + 1)?;
        let u = kron(&p0, &id)? + kron(&p1, &s)?;
        state = &u * state * u.adjoint();
    }
    let mut full_dims = vec![2];
    full_dims.extend_from_slice(dims);
    let full = QRegister::new(full_dims, state)?;
    Ok(partial_trace(&full, &[0])?.into_state())
}

/// Same reduced control from the trace identity
/// `Tr[S_{N-1,N} ... S_{0,1} (xi ⊗ s_1 ⊗ ... ⊗ s_N)] = Tr[xi s_1 ... s_N]`.
pub fn chain_cswap_control_contracted(
    xi: &ComplexMatrix,
    factors: &[&ComplexMatrix],
    control: &ComplexMatrix,
) -> Result<ComplexMatrix> {
    if control.shape() != (2, 2) {
        return Err(SbqsError::Dimension("control must be 2x2".into()));
    }
    let mut m = xi.clone();
    let mut norm = trace(xi);
    for s in factors {
        if s.shape() != xi.shape() {
            return Err(SbqsError::Dimension("all chain parties must share one dimension".into()));
        }
        m = &m * *s;
        norm *= trace(s);
    }
    let g = trace(&m);
    Ok(ComplexMatrix::from_row_slice(
        2,
        2,
        &[control[(0, 0)] * norm, control[(0, 1)] * g.conj(), control[(1, 0)] * g, control[(1, 1)] * norm],
    ))
}

/// Updated control after the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlEstimate {
    /// Reduced 2x2 control operator.
    pub density: ComplexMatrix,
    /// `rho_c[1,0] / rho_c[0,0]`, ideally `-i c delta Tr[xi Gamma]`.
    pub ratio: C64,
    /// `|| rho_c - |psi~><psi~| ||_F` with `psi~ = |0> - i c delta Tr[xi Gamma] |1>`.
    pub pure_defect: f64,
}

fn estimate_from(density: ComplexMatrix) -> ControlEstimate {
    let ratio = density[(1, 0)] / density[(0, 0)];
    let ideal = ControlQubit { amp0: density[(0, 0)].sqrt(), amp1: ratio * density[(0, 0)].sqrt() };
    let pure_defect = (&density - ideal.density()).norm();
    ControlEstimate { density, ratio, pure_defect }
}

/// Chain estimate on an explicit `xi ⊗ Gamma` register with control `|0> - i c delta |1>`.
pub fn chain_cswap_estimate(reg: &QRegister, c: C64, delta: f64) -> Result<ControlEstimate> {
    let control = ControlQubit::for_coupling(c * delta).density();
    Ok(estimate_from(chain_cswap_control_explicit(reg, &control)?))
}

fn chain_control(
    term: &HistoryTerm,
    buf: &HistoryBuffer,
    control: &ComplexMatrix,
    explicit: bool,
) -> Result<ComplexMatrix> {
    if explicit {
        chain_cswap_control_explicit(&build_gamma_register(term, buf)?, control)
    } else {
        chain_cswap_control_contracted(&term.xi, &gamma_factors(term, buf)?, control)
    }
}

fn chain_uses_explicit(mode: &DmeMode, d: usize, parties: usize) -> bool {
    use crate::dme::CircuitBackend;
    match mode.circuit.backend {
        CircuitBackend::Explicit => true,
        CircuitBackend::Contracted => false,
        CircuitBackend::Auto => {
            let size = (d as f64).powi(parties as i32 + 1);
            size <= CHAIN_EXPLICIT_LIMIT as f64
        }
    }
}

/// Result of one history-term step.
#[derive(Debug, Clone)]
pub struct NonlinearOutcome {
    pub state: ComplexMatrix,
    /// Effective coupling `c Tr[xi Gamma]`.
    pub coupling: C64,
    pub p_herald: Option<f64>,
    pub attempts: u32,
    pub log_norm: f64,
    /// Updated control (circuit modes only).
    pub control: Option<ControlEstimate>,
}

/// Advance `sigma` by `e^{-i H delta} sigma e^{i H† delta}` with
/// `H = c Tr[xi Gamma] rho`, the coupling read from `buf`.
///
/// Exact mode evaluates `Tr[xi Gamma]` directly and applies the ideal
/// channel; circuit modes run the chain and the heralded c-SWAP.
pub fn nonlinear_step<R: RngCore + ?Sized>(
    term: &HistoryTerm,
    buf: &HistoryBuffer,
    sigma: &ComplexMatrix,
    delta: f64,
    mode: &DmeMode,
    rng: Option<&mut R>,
) -> Result<NonlinearOutcome> {
    if sigma.shape() != (term.dim(), term.dim()) {
        return Err(SbqsError::Dimension("simulator state does not match the term".into()));
    }
    match mode.kind {
        StepKind::Exact | StepKind::Eswap => {
            let g = gamma_trace(term, buf)?;
            let coupling = term.c * g;
            let kappa = coupling * delta;
            let (state, log_norm) = if mode.kind == StepKind::Eswap {
                if kappa.im != 0.0 {
                    return Err(SbqsError::Argument("the e-SWAP route only realizes real couplings".into()));
                }
                let s = eswap_step_with(
                    &term.rho,
                    sigma,
                    kappa.re,
                    mode.circuit.backend,
                    mode.circuit.explicit_limit,
                )?;
                (s, 0.0)
            } else {
                dme_channel_exact_tracked(&term.rho, sigma, kappa)?
            };
            Ok(NonlinearOutcome { state, coupling, p_herald: None, attempts: 0, log_norm, control: None })
        }
        StepKind::Circuit => {
            let kappa0 = term.c * delta;
            mode.circuit.check_guard(kappa0)?;
            let mut ctrl = ControlQubit::for_coupling(kappa0);
            if mode.circuit.normalization == ControlNormalization::Strict {
                ctrl = ctrl.normalized();
            }
            let explicit = chain_uses_explicit(mode, term.dim(), term.parties());
            let updated = chain_control(term, buf, &ctrl.density(), explicit)?;
            let est = estimate_from(updated);
            let k = cswap_heralded(&est.density, &term.rho, sigma, mode.circuit.use_explicit(term.dim()))?;
            let p = trace(&k).re;
            let (_, attempts) = herald(p, mode.circuit.post_selection, rng)?;
            let ctrl_trace = trace(&est.density).re;
            let coupling = est.ratio * I / delta;
            let (state, _) = finish(k, coupling.im == 0.0)?;
            Ok(NonlinearOutcome {
                state,
                coupling,
                p_herald: Some(p),
                attempts,
                log_norm: (2.0 * p / ctrl_trace).ln(),
                control: Some(est),
            })
        }
    }
}

/// Copy costs for the two provisioning strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CopyReport {
    pub steps: usize,
    /// Product-formula factors per step.
    pub terms_per_step: usize,
    /// Largest number of history copies one factor consumes.
    pub copies_per_term: usize,
    /// `log10(n R C^n)`: re-running the simulation for every needed past copy.
    pub rerun_log10: f64,
    /// `log10(sum_k R C^k)`: all generations prepared in parallel up front.
    pub preprovision_log10: f64,
}

impl CopyReport {
    pub fn model(steps: usize, r: usize, c: usize) -> Self {
        let n = steps as f64;
        let (rf, cf) = (r.max(1) as f64, c.max(1) as f64);
        let rerun = n.max(1.0).log10() + rf.log10() + n * cf.log10();
        // sum_{k=1}^{n} C^k = C (C^n - 1)/(C - 1)
        let pre = if c <= 1 {
            (rf * n.max(1.0)).log10()
        } else {
            rf.log10() + cf.log10() + n * cf.log10() + (1.0 - cf.powf(-n)).log10()
                - (cf - 1.0).log10()
        };
        CopyReport { steps, terms_per_step: r, copies_per_term: c, rerun_log10: rerun, preprovision_log10: pre }
    }
}

/// Output of [`simulate_history_dependent`].
#[derive(Debug, Clone)]
pub struct HistoryRun {
    pub trajectory: Trajectory,
    pub copies: CopyReport,
    /// Effective couplings of every history term at each step.
    pub couplings: Vec<Vec<C64>>,
}

/// Advance on the `delta` grid from the newest buffer entry to time `t_end`.
///
/// Each step applies the linear part `h0` (if any) and then every history
/// term, with couplings evaluated on the buffer at the start of the step.
pub fn simulate_history_dependent(
    terms: &[HistoryTerm],
    h0: Option<&StateDecomposition>,
    init: HistoryBuffer,
    t_end: f64,
    opts: &SimOptions,
) -> Result<HistoryRun> {
    let delta = init.delta;
    let d = init.dim();
    for (k, term) in terms.iter().enumerate() {
        if term.dim() != d {
            return Err(SbqsError::Dimension(format!("term {k} has dim {}, state has {d}", term.dim())));
        }
        for &a in &term.delays {
            if a > 0.0 && delta > a / 10.0 {
                return Err(SbqsError::StepSize { value: delta, guard: a / 10.0 });
            }
            if a > init.tau() + SNAP_TOLERANCE * delta {
                return Err(SbqsError::Argument(format!(
                    "delay {a} exceeds the initial history length {}",
                    init.tau()
                )));
            }
        }
    }
    if let Some(h) = h0 {
        if h.dim != d {
            return Err(SbqsError::Dimension("linear part does not match the state".into()));
        }
    }
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(SbqsError::Argument("final time must be finite and >= 0".into()));
    }
    let n = (t_end / delta).round() as usize;
    if ((n as f64) * delta - t_end).abs() > SNAP_TOLERANCE * delta {
        return Err(SbqsError::GridMismatch { delay: t_end, delta });
    }
    let mut rng = opts.rng();
    let mut buf = init;
    let mut traj = Trajectory::new();
    let mut state = buf.latest().clone();
    traj.push(0.0, state.clone(), 0.0);
    let mut stats = StepStats::default();
    let mut res = ResourceReport::default();
    let order: Vec<usize> = h0.map(|h| (0..h.len()).collect()).unwrap_or_default();
    let mut couplings = Vec::with_capacity(n);
    for step in 1..=n {
        let p_count = stats.p_count;
        let p_sum = stats.p_sum;
        if let Some(h) = h0 {
            state = trotter_step(h, &order, state, delta, &opts.mode, &mut rng, &mut stats, &mut res)?;
        }
        let mut row = Vec::with_capacity(terms.len());
        for term in terms {
            let out = nonlinear_step(term, &buf, &state, delta, &opts.mode, Some(&mut rng))?;
            if let Some(p) = out.p_herald {
                stats.p_sum += p;
                stats.p_count += 1;
            }
            stats.log_norm += out.log_norm;
            res.dme_applications += 1;
            res.attempts += out.attempts as u64;
            if opts.mode.kind != StepKind::Exact {
                res.copies += 1 + term.parties() as u64;
            }
            row.push(out.coupling);
            state = out.state;
        }
        couplings.push(row);
        res.steps += 1;
        if stats.p_count > p_count {
            traj.herald_probs.push((stats.p_sum - p_sum) / (stats.p_count - p_count) as f64);
        }
        buf.push(state.clone());
        if opts.records(step, n) {
            traj.push(step as f64 * delta, state.clone(), stats.log_norm);
        }
    }
    traj.resources = res;
    let w = h0.map(|h| h.weight_norm()).unwrap_or(0.0)
        + terms.iter().map(|t| t.c.norm()).sum::<f64>();
    traj.error_budget = t_end * t_end * w * w / n.max(1) as f64 + stats.bound;
    let r = h0.map(|h| h.len()).unwrap_or(0) + terms.len();
    let c = terms.iter().map(|t| t.parties()).max().unwrap_or(0);
    Ok(HistoryRun { trajectory: traj, copies: CopyReport::model(n, r, c), couplings })
}

/// Mean-field terms `g Tr[Pi_r sigma] Pi_r` of the lattice Gross-Pitaevskii
/// Hamiltonian on `d` sites.
pub fn gp_terms(g: f64, d: usize) -> Result<Vec<HistoryTerm>> {
    (0..d)
        .map(|r| {
            let ket = crate::tensor::basis_ket(d, r);
            HistoryTerm::new(
                C64::new(g, 0.0),
                crate::tensor::projector(&ket),
                ResourceState::Pure(ket),
                vec![0.0],
                vec![1],
            )
        })
        .collect()
}

/// Nearest-neighbour hopping `-J sum (|r><r+1| + h.c.)` plus an on-site potential.
pub fn lattice_hamiltonian(hopping: f64, potential: &[f64]) -> ComplexMatrix {
    let d = potential.len();
    let mut h = ComplexMatrix::zeros(d, d);
    for r in 0..d {
        h[(r, r)] = C64::new(potential[r], 0.0);
        if r + 1 < d {
            h[(r, r + 1)] = C64::new(-hopping, 0.0);
            h[(r + 1, r)] = C64::new(-hopping, 0.0);
        }
    }
    h
}

/// `true` when every effective coupling of the run was real.
pub fn couplings_hermitian(run: &HistoryRun, tol: f64) -> bool {
    run.couplings.iter().flatten().all(|c| c.im.abs() <= tol)
}
