//! Counterdiabatic, state-dependent driving toward ground states.
//!
//! The driving term `i[sigma', sigma]` uses the system's own trajectory, with
//! the derivative taken as a backward difference over a lag `tau`:
//! `H_cd = H(t) - (i / tau) [sigma(t - tau), sigma(t)]`.

use std::collections::VecDeque;

use serde::Serialize;

use crate::decompose::polarization_general;
use crate::dme::{apply_term, DmeMode, StepKind};
use crate::error::{Result, SbqsError};
use crate::tensor::{
    commutator, eigh, frobenius_distance, hermitian_part, identity, kron, mat_exp, projector, trace, ComplexMatrix,
    ComplexVector, C64, I,
};

/// Gap below which a run records a degeneracy warning.
pub const GAP_WARNING: f64 = 1e-6;

/// `s(t)` sampled on the step grid `t_k = k delta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    pub samples: Vec<f64>,
    pub t_total: f64,
    pub tau: f64,
    pub delta: f64,
}

impl Schedule {
    pub fn from_fn(t_total: f64, delta: f64, tau: f64, s: impl Fn(f64) -> f64) -> Result<Self> {
        let n = (t_total / delta).round() as usize;
        if !(delta > 0.0) || n == 0 || ((n as f64) * delta - t_total).abs() > 1e-9 * t_total.max(1.0) {
            return Err(SbqsError::Argument(format!("T = {t_total} is not a multiple of delta = {delta}")));
        }
        let samples = (0..=n).map(|k| s(k as f64 * delta)).collect();
        let out = Schedule { samples, t_total, tau, delta };
        out.validate()?;
        Ok(out)
    }

    /// `s(t) = t / T`.
    pub fn linear(t_total: f64, delta: f64, tau: f64) -> Result<Self> {
        Schedule::from_fn(t_total, delta, tau, |t| t / t_total)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.samples;
        if s.len() < 2 {
            return Err(SbqsError::Argument("schedule needs at least two samples".into()));
        }
        if s[0].abs() > 1e-12 || (s[s.len() - 1] - 1.0).abs() > 1e-12 {
            return Err(SbqsError::Argument("schedule must run from s = 0 to s = 1".into()));
        }
        if s.windows(2).any(|w| w[1] < w[0]) || s.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SbqsError::Argument("schedule must be monotone within [0, 1]".into()));
        }
        let m = self.tau / self.delta;
        if self.tau < self.delta * (1.0 - 1e-12) || (m - m.round()).abs() > 1e-6 {
            return Err(SbqsError::Argument(format!(
                "tau = {} must be a positive multiple of delta = {}",
                self.tau, self.delta
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.samples.len() - 1
    }

    pub fn lag_steps(&self) -> usize {
        (self.tau / self.delta).round() as usize
    }

    /// `s` at the midpoint of step `k`.
    fn mid(&self, k: usize) -> f64 {
        0.5 * (self.samples[k] + self.samples[k + 1])
    }
}

/// `c Tr[O sigma] G`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateCoupling {
    pub c: f64,
    pub observable: ComplexMatrix,
    pub generator: ComplexMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CdTarget {
    Fixed(ComplexMatrix),
    /// `H(sigma) = base + sum_k c_k Tr[O_k sigma] G_k`.
    StateDependent { base: ComplexMatrix, couplings: Vec<StateCoupling> },
}

impl CdTarget {
    pub fn at(&self, sigma: &ComplexMatrix) -> ComplexMatrix {
        match self {
            CdTarget::Fixed(h) => h.clone(),
            CdTarget::StateDependent { base, couplings } => {
                let mut h = base.clone();
                for k in couplings {
                    let e = trace(&(&k.observable * sigma)).re;
                    h += &k.generator * C64::new(k.c * e, 0.0);
                }
                h
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            CdTarget::Fixed(h) => h.nrows(),
            CdTarget::StateDependent { base, .. } => base.nrows(),
        }
    }
}

/// Start from the ground state of `h0`, end at the ground state of the target.
#[derive(Debug, Clone, PartialEq)]
pub struct CdProblem {
    pub h0: ComplexMatrix,
    pub target: CdTarget,
    pub psi0: ComplexVector,
}

fn gap_of(h: &ComplexMatrix) -> Result<(f64, ComplexVector, f64)> {
    let (vals, vecs) = eigh(h)?;
    let gap = if vals.len() > 1 { vals[1] - vals[0] } else { f64::INFINITY };
    Ok((vals[0], vecs.column(0).into_owned(), gap))
}

impl CdProblem {
    pub fn new(h0: ComplexMatrix, target: CdTarget) -> Result<Self> {
        if !crate::tensor::is_hermitian(&h0, 1e-9) {
            return Err(SbqsError::Argument("H0 must be Hermitian".into()));
        }
        if target.dim() != h0.nrows() {
            return Err(SbqsError::Dimension("target and H0 act on different spaces".into()));
        }
        let (_, psi0, gap) = gap_of(&h0)?;
        if gap < GAP_WARNING {
            return Err(SbqsError::Argument(format!("H0 ground state is degenerate (gap {gap:e})")));
        }
        Ok(CdProblem { h0, target, psi0 })
    }

    /// `(1 - s) H0 + s H(sigma)`.
    pub fn hamiltonian(&self, s: f64, sigma: &ComplexMatrix) -> ComplexMatrix {
        &self.h0 * C64::new(1.0 - s, 0.0) + self.target.at(sigma) * C64::new(s, 0.0)
    }
}

/// `H - (i / tau) [sigma_lag, sigma_now]`; Hermitian for Hermitian arguments.
pub fn cd_hamiltonian(h: &ComplexMatrix, sigma_now: &ComplexMatrix, sigma_lag: &ComplexMatrix, tau: f64) -> ComplexMatrix {
    h - commutator(sigma_lag, sigma_now) * (I / tau)
}

/// One step `sigma -> e^{-i H_cd delta} sigma e^{i H_cd delta}`.
///
/// Circuit mode expands `H_cd` into states and applies each one through the
/// controlled-SWAP step.
pub fn cd_step(
    h: &ComplexMatrix,
    sigma_now: &ComplexMatrix,
    sigma_lag: &ComplexMatrix,
    tau: f64,
    delta: f64,
    mode: &DmeMode,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ComplexMatrix> {
    let hcd = hermitian_part(&cd_hamiltonian(h, sigma_now, sigma_lag, tau));
    match mode.kind {
        StepKind::Exact | StepKind::Eswap => {
            let u = mat_exp(&hcd, -I * delta)?;
            Ok(hermitian_part(&(&u * sigma_now * u.adjoint())))
        }
        StepKind::Circuit => {
            let dec = polarization_general(&hcd)?;
            let mut state = sigma_now.clone();
            for t in &dec.terms {
                let kappa = t.weight * delta;
                if kappa.norm() == 0.0 {
                    continue;
                }
                state = apply_term(&t.state, &state, kappa, mode, Some(&mut *rng))?.state;
            }
            Ok(hermitian_part(&state))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdOptions {
    pub mode: DmeMode,
    /// Include the driving term; `false` gives the plain adiabatic baseline.
    pub counterdiabatic: bool,
    pub seed: u64,
    /// Record diagnostics every this many steps (0: endpoints only).
    pub sample_every: usize,
}

impl Default for CdOptions {
    fn default() -> Self {
        CdOptions { mode: DmeMode::exact(), counterdiabatic: true, seed: 0, sample_every: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AdiabaticRun {
    pub times: Vec<f64>,
    /// `Tr[H(t) sigma]` at each sample.
    pub energies: Vec<f64>,
    /// `||[H(t), sigma(t)]||_F`.
    pub residuals: Vec<f64>,
    /// `<g(t)| sigma |g(t)>` against the instantaneous ground state.
    pub fidelities: Vec<f64>,
    pub purities: Vec<f64>,
    /// Smallest instantaneous gap seen and whether it fell below [`GAP_WARNING`].
    pub min_gap: f64,
    pub gap_warning: bool,
    #[serde(skip)]
    pub final_state: ComplexMatrix,
}

impl AdiabaticRun {
    pub fn final_fidelity(&self) -> f64 {
        *self.fidelities.last().unwrap_or(&f64::NAN)
    }
    pub fn final_energy(&self) -> f64 {
        *self.energies.last().unwrap_or(&f64::NAN)
    }
    pub fn final_residual(&self) -> f64 {
        *self.residuals.last().unwrap_or(&f64::NAN)
    }
}

/// Evolve the ground state of `H0` along the schedule.
///
/// Before `t = tau` the lagged state is the initial state.
pub fn run_adiabatic(p: &CdProblem, sched: &Schedule, opts: &CdOptions) -> Result<AdiabaticRun> {
    sched.validate()?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(opts.seed);
    let n = sched.steps();
    let m = sched.lag_steps();
    let mut sigma = projector(&p.psi0);
    let mut lag: VecDeque<ComplexMatrix> = std::iter::repeat(sigma.clone()).take(m + 1).collect();
    let mut run = AdiabaticRun {
        times: Vec::new(),
        energies: Vec::new(),
        residuals: Vec::new(),
        fidelities: Vec::new(),
        purities: Vec::new(),
        min_gap: f64::INFINITY,
        gap_warning: false,
        final_state: sigma.clone(),
    };
    let record = |run: &mut AdiabaticRun, k: usize, sigma: &ComplexMatrix| -> Result<()> {
        let h = p.hamiltonian(sched.samples[k], sigma);
        let (_, g, gap) = gap_of(&h)?;
        run.min_gap = run.min_gap.min(gap);
        run.gap_warning |= gap < GAP_WARNING;
        run.times.push(k as f64 * sched.delta);
        run.energies.push(trace(&(&h * sigma)).re);
        run.residuals.push(commutator(&h, sigma).norm());
        run.fidelities.push((g.adjoint() * sigma * &g)[(0, 0)].re);
        run.purities.push(trace(&(sigma * sigma)).re);
        Ok(())
    };
    record(&mut run, 0, &sigma)?;
    for k in 0..n {
        let h = p.hamiltonian(sched.mid(k), &sigma);
        let lagged = if opts.counterdiabatic { lag.front().unwrap().clone() } else { sigma.clone() };
        sigma = cd_step(&h, &sigma, &lagged, sched.tau, sched.delta, &opts.mode, &mut rng)?;
        lag.pop_front();
        lag.push_back(sigma.clone());
        let step = k + 1;
        if step == n || (opts.sample_every > 0 && step % opts.sample_every == 0) {
            record(&mut run, step, &sigma)?;
        }
    }
    run.final_state = sigma;
    Ok(run)
}

/// `<A^2> - <A>^2`.
pub fn variance(a: &ComplexMatrix, sigma: &ComplexMatrix) -> f64 {
    let m1 = trace(&(a * sigma)).re;
    let m2 = trace(&(a * a * sigma)).re;
    m2 - m1 * m1
}

/// `(A^2 ⊗ I + I ⊗ A^2) / 2 - A ⊗ A`; its expectation in `|phi>|phi>` is the variance.
pub fn doubled_variance_hamiltonian(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    let d = a.nrows();
    let a2 = a * a;
    let id = identity(d);
    Ok((kron(&a2, &id)? + kron(&id, &a2)?) * C64::new(0.5, 0.0) - kron(a, a)?)
}

/// `-(P ⊗ I + I ⊗ P)` with `P` the projector on the uniform superposition.
pub fn default_doubled_start(d: usize) -> Result<ComplexMatrix> {
    let u = ComplexVector::from_element(d, C64::new(1.0 / (d as f64).sqrt(), 0.0));
    let p = projector(&u);
    let id = identity(d);
    Ok((kron(&p, &id)? + kron(&id, &p)?) * C64::new(-1.0, 0.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceBound {
    pub value: f64,
    pub run: AdiabaticRun,
}

/// Ground energy of the doubled-space variance Hamiltonian reached adiabatically.
pub fn variance_lower_bound(
    a: &ComplexMatrix,
    sched: &Schedule,
    h0: Option<&ComplexMatrix>,
    opts: &CdOptions,
) -> Result<VarianceBound> {
    if !crate::tensor::is_hermitian(a, 1e-9) {
        return Err(SbqsError::Argument("A must be Hermitian".into()));
    }
    let ha = doubled_variance_hamiltonian(a)?;
    let h0 = match h0 {
        Some(h) => h.clone(),
        None => default_doubled_start(a.nrows())?,
    };
    let p = CdProblem::new(h0, CdTarget::Fixed(ha.clone()))?;
    let run = run_adiabatic(&p, sched, opts)?;
    let value = trace(&(&ha * &run.final_state)).re;
    Ok(VarianceBound { value, run })
}

/// Sign of the mean-field term in `A^2 ∓ <A> A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum VarianceSign {
    /// `A^2 - <A> A`, whose expectation is the variance.
    #[default]
    Minus,
    Plus,
}

/// `H'(sigma) = A^2 ∓ <A>_sigma A` as a state-dependent target.
pub fn variance_target(a: &ComplexMatrix, sign: VarianceSign) -> CdTarget {
    let c = match sign {
        VarianceSign::Minus => -1.0,
        VarianceSign::Plus => 1.0,
    };
    CdTarget::StateDependent {
        base: a * a,
        couplings: vec![StateCoupling { c, observable: a.clone(), generator: a.clone() }],
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceOptimum {
    #[serde(skip)]
    pub state: ComplexMatrix,
    pub variance: f64,
    pub initial_variance: f64,
    /// `||[A, sigma]||_F`.
    pub residual: f64,
    pub run: AdiabaticRun,
}

/// Drive the ground state of `h0` toward the ground state of `H'(sigma)`.
pub fn variance_exact_optimum(
    a: &ComplexMatrix,
    h0: &ComplexMatrix,
    sched: &Schedule,
    sign: VarianceSign,
    opts: &CdOptions,
) -> Result<VarianceOptimum> {
    if !crate::tensor::is_hermitian(a, 1e-9) {
        return Err(SbqsError::Argument("A must be Hermitian".into()));
    }
    let p = CdProblem::new(h0.clone(), variance_target(a, sign))?;
    let initial_variance = variance(a, &projector(&p.psi0));
    let run = run_adiabatic(&p, sched, opts)?;
    let state = run.final_state.clone();
    Ok(VarianceOptimum {
        variance: variance(a, &state),
        initial_variance,
        residual: commutator(a, &state).norm(),
        state,
        run,
    })
}

/// Uhlmann fidelity with a pure state.
pub fn pure_state_fidelity(sigma: &ComplexMatrix, psi: &ComplexVector) -> f64 {
    (psi.adjoint() * sigma * psi)[(0, 0)].re
}

/// `||sigma - sigma'||_F` helper for callers comparing trajectories.
pub fn state_distance(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    frobenius_distance(a, b)
}

/// Qubit sweep `H(s) = (1 - s) X + s Z`.
pub fn qubit_sweep_problem() -> Result<CdProblem> {
    use crate::tensor::{pauli_x, pauli_z};
    CdProblem::new(pauli_x(), CdTarget::Fixed(pauli_z()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{pauli_x, pauli_y, pauli_z, random_hermitian, ONE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn driving_term_is_hermitian_and_vanishes_without_lag() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = crate::tensor::random_density(&mut rng, 3);
        let b = crate::tensor::random_density(&mut rng, 3);
        let h = random_hermitian(&mut rng, 3);
        let hcd = cd_hamiltonian(&h, &a, &b, 0.01);
        assert!((&hcd - hcd.adjoint()).norm() < 1e-12);
        assert!((cd_hamiltonian(&h, &a, &a, 0.01) - &h).norm() < 1e-12);
    }

    #[test]
    fn eigenstate_is_stationary() {
        let p = CdProblem::new(pauli_x(), CdTarget::Fixed(pauli_x())).unwrap();
        let sched = Schedule::linear(0.5, 1e-3, 5e-3).unwrap();
        let run = run_adiabatic(&p, &sched, &CdOptions::default()).unwrap();
        assert!(run.final_residual() < 1e-10);
        assert!((run.final_fidelity() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::linear(1.0, 1e-3, 5e-3).is_ok());
        assert!(Schedule::linear(1.0, 1e-3, 2.5e-3).is_err());
        assert!(Schedule::from_fn(1.0, 0.1, 0.1, |t| 1.0 - t).is_err());
    }

    #[test]
    fn slow_plain_sweep_follows_ground_state() {
        let p = qubit_sweep_problem().unwrap();
        let sched = Schedule::linear(20.0, 1e-2, 1e-2).unwrap();
        let opts = CdOptions { counterdiabatic: false, ..CdOptions::default() };
        let run = run_adiabatic(&p, &sched, &opts).unwrap();
        assert!(run.final_fidelity() > 0.99, "{}", run.final_fidelity());
    }

    #[test]
    fn circuit_step_tracks_exact_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s0 = projector(&ComplexVector::from_vec(vec![ONE, ONE]).normalize());
        let s1 = projector(&ComplexVector::from_vec(vec![ONE, C64::new(0.9, 0.1)]).normalize());
        let h = pauli_x() * C64::new(0.3, 0.0) + pauli_z() * C64::new(0.7, 0.0) + pauli_y() * C64::new(0.1, 0.0);
        let mut errs = Vec::new();
        for delta in [2e-3, 1e-3] {
            let e = cd_step(&h, &s1, &s0, 0.05, delta, &DmeMode::exact(), &mut rng).unwrap();
            let c = cd_step(&h, &s1, &s0, 0.05, delta, &DmeMode::circuit(), &mut rng).unwrap();
            errs.push((e - c).norm());
        }
        assert!((3.0..5.0).contains(&(errs[0] / errs[1])), "{errs:?}");
    }

    #[test]
    fn variance_helpers() {
        let z = pauli_z();
        let zero = ComplexVector::from_vec(vec![ONE, C64::new(0.0, 0.0)]);
        assert!(variance(&z, &projector(&zero)).abs() < 1e-15);
        let ha = doubled_variance_hamiltonian(&z).unwrap();
        let zz = kron(&projector(&zero), &projector(&zero)).unwrap();
        assert!(trace(&(&ha * &zz)).re.abs() < 1e-15);
        // <phi phi| H_A |phi phi> is the variance for any product state
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_hermitian(&mut rng, 3);
        let ha = doubled_variance_hamiltonian(&a).unwrap();
        let phi = crate::tensor::random_ket(&mut rng, 3);
        let s = projector(&phi);
        let ss = kron(&s, &s).unwrap();
        assert!((trace(&(&ha * &ss)).re - variance(&a, &s)).abs() < 1e-12);
        // sigma_z from |0> is already optimal
        let sched = Schedule::linear(0.1, 1e-3, 5e-3).unwrap();
        let h0 = -z.clone();
        let opt = variance_exact_optimum(&z, &h0, &sched, VarianceSign::Minus, &CdOptions::default()).unwrap();
        assert!(opt.initial_variance.abs() < 1e-12 && opt.variance.abs() < 1e-9);
        assert!((opt.variance - variance(&z, &opt.state)).abs() < 1e-15);
    }
}
