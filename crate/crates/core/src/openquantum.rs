//! Markovian open-system dynamics through vectorization.
//!
//! The master equation becomes `d|sigma>>/dt = L |sigma>>` on the doubled
//! space. `L` is expanded in states with complex weights, the normalized
//! vectorized state `|psi> = |sigma>>/|| |sigma>> ||` is evolved as a pure
//! density `Psi = |psi><psi|` by density-matrix exponentiation with the
//! non-Hermitian contract, and `sigma(t)` is read out by contracting with
//! `|I>>` and normalizing the trace.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decompose::{
    polarization_decompose, ResourceState, StateDecomposition, StateTerm, TermLabel,
};
use crate::error::{Result, SbqsError};
use crate::evolve::{plan_with, simulate_linear, PlanConfig, SimOptions, Trajectory, TrotterPlan};
use crate::io::DenseMatrix;
use crate::tensor::{
    devectorize, eigh, hermitian_part, identity, is_hermitian, kron, projector, trace, vectorize,
    ComplexMatrix, ComplexVector, Tolerances, C64, I, ONE, ZERO,
};

/// Readout fails below this trace denominator.
pub const READOUT_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Jump {
    pub l: ComplexMatrix,
    pub gamma: f64,
}

/// Hamiltonian plus jump operators with rates.
#[derive(Debug, Clone, PartialEq)]
pub struct LindbladSpec {
    pub h: ComplexMatrix,
    pub jumps: Vec<Jump>,
}

#[derive(Debug, Deserialize, Serialize)]
struct JumpJson {
    #[serde(rename = "L")]
    l: DenseMatrix,
    gamma: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct SpecJson {
    #[serde(rename = "H")]
    h: DenseMatrix,
    #[serde(default)]
    jumps: Vec<JumpJson>,
}

impl LindbladSpec {
    pub fn new(h: ComplexMatrix, jumps: Vec<Jump>) -> Result<Self> {
        let s = LindbladSpec { h, jumps };
        s.validate()?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.h.nrows();
        if !self.h.is_square() || d == 0 {
            return Err(SbqsError::Dimension("H must be square".into()));
        }
        if !is_hermitian(&self.h, Tolerances::default().tol_herm) {
            return Err(SbqsError::Argument("H must be Hermitian".into()));
        }
        for (k, j) in self.jumps.iter().enumerate() {
            if j.l.shape() != (d, d) {
                return Err(SbqsError::Dimension(format!(
                    "jump {k} is {}x{}, expected {d}x{d}",
                    j.l.nrows(),
                    j.l.ncols()
                )));
            }
            if !(j.gamma.is_finite() && j.gamma >= 0.0) {
                return Err(SbqsError::Argument(format!("jump {k} rate must be >= 0")));
            }
        }
        Ok(())
    }

    /// `||H|| + sum gamma ||L||^2`, a rough rate scale.
    pub fn generator_scale(&self) -> f64 {
        self.h.norm() + self.jumps.iter().map(|j| j.gamma * j.l.norm_squared()).sum::<f64>()
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let s: SpecJson = serde_json::from_value(v.clone())
            .map_err(|e| SbqsError::Argument(format!("lindblad spec: {e}")))?;
        let h = s.h.to_square(None)?;
        let d = h.nrows();
        let jumps = s
            .jumps
            .iter()
            .map(|j| Ok(Jump { l: j.l.to_square(Some(d))?, gamma: j.gamma }))
            .collect::<Result<Vec<_>>>()?;
        LindbladSpec::new(h, jumps)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(SpecJson {
            h: DenseMatrix::from_matrix(&self.h),
            jumps: self
                .jumps
                .iter()
                .map(|j| JumpJson { l: DenseMatrix::from_matrix(&j.l), gamma: j.gamma })
                .collect(),
        })
        .expect("spec serializes")
    }
}

/// `L = -i(H ⊗ I - I ⊗ H^T) + sum gamma (L ⊗ L* - L†L ⊗ I / 2 - I ⊗ (L†L)^T / 2)`.
pub fn vectorize_lindbladian(spec: &LindbladSpec) -> Result<ComplexMatrix> {
    spec.validate()?;
    let d = spec.dim();
    let id = identity(d);
    let mut l = (kron(&spec.h, &id)? - kron(&id, &spec.h.transpose())?) * (-I);
    for j in &spec.jumps {
        let ll = j.l.adjoint() * &j.l;
        let g = C64::new(j.gamma, 0.0);
        let half = C64::new(0.5, 0.0);
        l += (kron(&j.l, &j.l.map(|z| z.conj()))?
            - kron(&ll, &id)? * half
            - kron(&id, &ll.transpose())? * half)
            * g;
    }
    Ok(l)
}

/// Split `L` into Hermitian and anti-Hermitian parts, polarization-expand
/// both and merge them with complex weights. Identity parts collect into
/// the offset `q`.
pub fn decompose_lindbladian(l: &ComplexMatrix) -> Result<StateDecomposition> {
    if !l.is_square() || l.is_empty() {
        return Err(SbqsError::Dimension("L must be square".into()));
    }
    let tol = Tolerances { tol_herm: f64::INFINITY, ..Tolerances::default() };
    let a = hermitian_part(l);
    let k = (l - l.adjoint()) * C64::new(0.0, -0.5);
    let da = polarization_decompose(&a, &tol)?;
    let dk = polarization_decompose(&k, &tol)?.scaled(I);
    let merged = da.merged_with(&dk)?;
    let thr = 1e-14 * l.norm().max(f64::MIN_POSITIVE);
    Ok(merged.pruned(thr))
}

/// Hermitian factor written as `w rho + c I` (with `w = 0` when it is a
/// multiple of the identity).
struct Factor {
    w: f64,
    rho: ComplexMatrix,
    c: f64,
    tag: String,
}

fn factor(a: &ComplexMatrix, tag: &str) -> Result<Factor> {
    let d = a.nrows();
    let (ev, _) = eigh(a)?;
    let scale = a.norm().max(f64::MIN_POSITIVE);
    if ev[d - 1] - ev[0] <= 1e-14 * scale {
        return Ok(Factor { w: 0.0, rho: identity(d), c: trace(a).re / d as f64, tag: tag.into() });
    }
    let s = -ev[0];
    let shifted = hermitian_part(a) + identity(d) * C64::new(s, 0.0);
    let w = trace(&shifted).re;
    Ok(Factor { w, rho: shifted / C64::new(w, 0.0), c: -s, tag: tag.into() })
}

/// Push `weight * (x ⊗ y)` where `None` denotes the maximally mixed state.
fn push_product(
    out: &mut StateDecomposition,
    weight: C64,
    x: Option<&Factor>,
    y: Option<&Factor>,
    d: usize,
) -> Result<()> {
    if weight == ZERO {
        return Ok(());
    }
    let mixed = identity(d) / C64::new(d as f64, 0.0);
    let (xm, xl) = match x {
        Some(f) => (f.rho.clone(), TermLabel::Custom(f.tag.clone())),
        None => (mixed.clone(), TermLabel::Custom("I/d".into())),
    };
    let (ym, yl) = match y {
        Some(f) => (f.rho.clone(), TermLabel::Custom(f.tag.clone())),
        None => (mixed, TermLabel::Custom("I/d".into())),
    };
    let label = TermLabel::Product(vec![xl, yl]);
    let state = ResourceState::Mixed(kron(&xm, &ym)?);
    match out.terms.iter_mut().find(|t| t.label == label) {
        Some(t) => t.weight += weight,
        None => out.terms.push(StateTerm { weight, state, label }),
    }
    Ok(())
}

/// `c_ab * (A ⊗ B)` expanded through the factor forms of `A` and `B`.
fn push_kron(
    out: &mut StateDecomposition,
    coeff: C64,
    a: &Factor,
    b: &Factor,
    d: usize,
) -> Result<()> {
    let dd = d as f64;
    let wa = (a.w != 0.0).then_some(a);
    let wb = (b.w != 0.0).then_some(b);
    if let (Some(fa), Some(fb)) = (wa, wb) {
        push_product(out, coeff * fa.w * fb.w, Some(fa), Some(fb), d)?;
    }
    if let Some(fa) = wa {
        push_product(out, coeff * fa.w * b.c * dd, Some(fa), None, d)?;
    }
    if let Some(fb) = wb {
        push_product(out, coeff * a.c * fb.w * dd, None, Some(fb), d)?;
    }
    out.identity_offset += coeff * a.c * b.c;
    Ok(())
}

/// Product-state expansion of `L` built from shift-normalized factors of
/// `H`, `L_k`, `L_k†L_k`. Every term is a product `rho_a ⊗ rho_b` on the
/// doubled space; identity factors appear as the maximally mixed state.
/// Requires Hermitian jump operators.
pub fn decompose_lindbladian_structured(spec: &LindbladSpec) -> Result<StateDecomposition> {
    spec.validate()?;
    let d = spec.dim();
    let tol = Tolerances::default();
    let mut out = StateDecomposition::empty(d * d);
    let id = Factor { w: 0.0, rho: identity(d), c: 1.0, tag: "I".into() };
    let h = factor(&spec.h, "H")?;
    let ht = factor(&spec.h.transpose(), "H^T")?;
    push_kron(&mut out, -I, &h, &id, d)?;
    push_kron(&mut out, I, &id, &ht, d)?;
    for (k, j) in spec.jumps.iter().enumerate() {
        if !is_hermitian(&j.l, tol.tol_herm) {
            return Err(SbqsError::Argument(format!(
                "structured expansion needs Hermitian jump operators (jump {k})"
            )));
        }
        let g = C64::new(j.gamma, 0.0);
        let lf = factor(&j.l, &format!("L{k}"))?;
        let lc = factor(&j.l.map(|z| z.conj()), &format!("L{k}*"))?;
        let ll = j.l.adjoint() * &j.l;
        let llf = factor(&ll, &format!("L{k}'L{k}"))?;
        let llt = factor(&ll.transpose(), &format!("(L{k}'L{k})^T"))?;
        push_kron(&mut out, g, &lf, &lc, d)?;
        push_kron(&mut out, -g * 0.5, &llf, &id, d)?;
        push_kron(&mut out, -g * 0.5, &id, &llt, d)?;
    }
    let thr = 1e-14 * spec.generator_scale().max(f64::MIN_POSITIVE);
    Ok(out.pruned(thr))
}

/// Unit vector on the doubled space together with the initial norm.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorizedState {
    pub psi: ComplexVector,
    /// `sqrt <<sigma(0)|sigma(0)>>`.
    pub norm0: f64,
}

impl VectorizedState {
    pub fn from_state(sigma: &ComplexMatrix) -> Result<Self> {
        let v = vectorize(sigma);
        let n = v.norm();
        if !(n > 0.0) {
            return Err(SbqsError::Argument("cannot vectorize the zero matrix".into()));
        }
        Ok(VectorizedState { psi: v / C64::new(n, 0.0), norm0: n })
    }

    /// Principal eigenvector of a doubled-space density, phased so that
    /// `<<I|psi>>` is real and positive.
    pub fn from_density(big: &ComplexMatrix, norm0: f64) -> Result<Self> {
        let (_, v) = eigh(big)?;
        let mut psi = v.column(v.ncols() - 1).into_owned();
        let d = (psi.len() as f64).sqrt().round() as usize;
        let tr: C64 = (0..d).map(|k| psi[k * d + k]).sum();
        if tr.norm() > 0.0 {
            psi *= tr.conj() / tr.norm();
        }
        Ok(VectorizedState { psi, norm0 })
    }

    pub fn density(&self) -> ComplexMatrix {
        projector(&self.psi)
    }

    /// `sigma = devec(psi) / Tr devec(psi)`.
    pub fn readout(&self) -> Result<ComplexMatrix> {
        let m = devectorize(&self.psi)?;
        let tr = trace(&m);
        if tr.norm() < READOUT_THRESHOLD {
            return Err(SbqsError::Readout(tr.norm()));
        }
        Ok(m / tr)
    }
}

/// `sigma = devec(Psi |I>>) / Tr(...)` for a doubled-space density `Psi`.
///
/// Exact for pure `Psi`; for slightly mixed `Psi` (circuit mode) it returns
/// the `|I>>`-weighted average.
pub fn readout_density(big: &ComplexMatrix) -> Result<ComplexMatrix> {
    let n = big.nrows();
    let d = (n as f64).sqrt().round() as usize;
    if d * d != n || !big.is_square() {
        return Err(SbqsError::Dimension("doubled-space density has non-square dim".into()));
    }
    let vi = vectorize(&identity(d));
    let w = big * &vi;
    let den = (vi.adjoint() * &w)[(0, 0)].re.max(0.0).sqrt();
    if den < READOUT_THRESHOLD {
        return Err(SbqsError::Readout(den));
    }
    let m = devectorize(&w)?;
    let tr = trace(&m);
    if tr.norm() < READOUT_THRESHOLD * den {
        return Err(SbqsError::Readout(tr.norm()));
    }
    Ok(hermitian_part(&(m / tr)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LindbladExpansion {
    /// Hermitian/anti-Hermitian polarization split of `L`.
    #[default]
    Polarization,
    /// Products of shift-normalized factors (Hermitian jumps only).
    Structured,
}

/// Open-system run: readouts of `sigma(t)` plus the doubled-space samples.
#[derive(Debug, Clone)]
pub struct OpenRun {
    /// `sigma(t)` samples; `log_norms` holds `ln(<<s(t)|s(t)>> / <<s(0)|s(0)>>)`.
    pub trajectory: Trajectory,
    /// Doubled-space densities `Psi(t)` at the same sample times.
    pub doubled: Vec<ComplexMatrix>,
    pub norm0: f64,
    pub steps: usize,
    pub terms: usize,
}

impl OpenRun {
    /// Unnormalized vectorized norm `<<sigma(t)|sigma(t)>>` at sample `k`.
    pub fn vectorized_norm_sqr(&self, k: usize) -> f64 {
        self.norm0 * self.norm0 * self.trajectory.log_norms[k].exp()
    }
}

/// Evolve `sigma0` under the master equation to time `t` with target error `eps`.
pub fn simulate_open(
    spec: &LindbladSpec,
    sigma0: &ComplexMatrix,
    t: f64,
    eps: f64,
    opts: &SimOptions,
    expansion: LindbladExpansion,
) -> Result<OpenRun> {
    simulate_open_with(spec, sigma0, t, eps, opts, expansion, &PlanConfig::default())
}

/// `iL` expanded in states; `e^{tL} = e^{-it(iL)}`.
pub fn open_generator(spec: &LindbladSpec, expansion: LindbladExpansion) -> Result<StateDecomposition> {
    let dec = match expansion {
        LindbladExpansion::Polarization => decompose_lindbladian(&vectorize_lindbladian(spec)?)?,
        LindbladExpansion::Structured => decompose_lindbladian_structured(spec)?,
    };
    Ok(dec.scaled(I))
}

pub fn simulate_open_with(
    spec: &LindbladSpec,
    sigma0: &ComplexMatrix,
    t: f64,
    eps: f64,
    opts: &SimOptions,
    expansion: LindbladExpansion,
    plan_cfg: &PlanConfig,
) -> Result<OpenRun> {
    let gen = open_generator(spec, expansion)?;
    let p = plan_with(&gen, t, eps, plan_cfg)?;
    simulate_open_planned(spec, sigma0, &gen, &p, opts)
}

/// Run with a prepared generator (from [`open_generator`]) and plan.
pub fn simulate_open_planned(
    spec: &LindbladSpec,
    sigma0: &ComplexMatrix,
    gen: &StateDecomposition,
    p: &TrotterPlan,
    opts: &SimOptions,
) -> Result<OpenRun> {
    spec.validate()?;
    if sigma0.shape() != (spec.dim(), spec.dim()) {
        return Err(SbqsError::Dimension("initial state does not match H".into()));
    }
    if gen.dim != spec.dim() * spec.dim() {
        return Err(SbqsError::Dimension("generator does not act on the doubled space".into()));
    }
    let v0 = VectorizedState::from_state(sigma0)?;
    let big = simulate_linear(gen, &v0.density(), p, opts)?;
    let mut traj = Trajectory::new();
    for ((tk, s), ln) in big.times.iter().zip(&big.states).zip(&big.log_norms) {
        traj.push(*tk, readout_density(s)?, *ln);
    }
    traj.herald_probs = big.herald_probs.clone();
    traj.error_budget = big.error_budget;
    traj.resources = big.resources;
    Ok(OpenRun { trajectory: traj, doubled: big.states, norm0: v0.norm0, steps: p.n, terms: gen.len() })
}

/// Result of the projective expectation-value route.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectorExpectation {
    pub value: f64,
    /// Distinct eigenvalues of the observable.
    pub eigenvalues: Vec<f64>,
    /// Recovered populations `p_i = Tr[P_i sigma]`, normalized to sum 1.
    pub populations: Vec<f64>,
    /// Eigenspaces whose overlap sign disagreed with the non-negative choice.
    pub sign_flags: Vec<usize>,
    /// `|value - Tr[A sigma_readout]|`.
    pub discrepancy: f64,
}

/// `<A>` from measuring `|psi>` in the orthonormalized eigenprojector
/// basis `{|P_i>> / sqrt(rank P_i)}`.
///
/// The outcome probabilities are proportional to `p_i^2 / rank P_i`, so
/// `p_i` is recovered as a non-negative square root and normalized by
/// `sum p_i = 1`.
pub fn expectation_via_projectors(v: &VectorizedState, a: &ComplexMatrix) -> Result<ProjectorExpectation> {
    let d = a.nrows();
    if !a.is_square() || d * d != v.psi.len() {
        return Err(SbqsError::Dimension("observable does not match the vectorized state".into()));
    }
    if !is_hermitian(a, Tolerances::default().tol_herm) {
        return Err(SbqsError::Argument("observable must be Hermitian".into()));
    }
    let (w, vecs) = eigh(a)?;
    let gap_tol = 1e-9 * a.norm().max(1.0);
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for (k, &lam) in w.iter().enumerate() {
        match groups.last_mut() {
            Some((l0, idx)) if (lam - *l0).abs() <= gap_tol => idx.push(k),
            _ => groups.push((lam, vec![k])),
        }
    }
    let mut pops = Vec::with_capacity(groups.len());
    let mut flags = Vec::new();
    for (gi, (_, idx)) in groups.iter().enumerate() {
        let mut p = ComplexMatrix::zeros(d, d);
        for &k in idx {
            p += projector(&vecs.column(k).into_owned());
        }
        let r = idx.len() as f64;
        let e = vectorize(&p) / C64::new(r.sqrt(), 0.0);
        let amp = (e.adjoint() * &v.psi)[(0, 0)];
        if amp.re < 0.0 {
            flags.push(gi);
        }
        let q = amp.norm_sqr();
        pops.push((q * r).max(0.0).sqrt());
    }
    let total: f64 = pops.iter().sum();
    if !(total > 0.0) {
        return Err(SbqsError::Readout(total));
    }
    for p in &mut pops {
        *p /= total;
    }
    let value: f64 = groups.iter().zip(&pops).map(|((l, _), p)| l * p).sum();
    let direct = trace(&(a * v.readout()?)).re;
    Ok(ProjectorExpectation {
        value,
        eigenvalues: groups.iter().map(|g| g.0).collect(),
        populations: pops,
        sign_flags: flags,
        discrepancy: (value - direct).abs(),
    })
}

/// Closed-form two-level solution for `H = omega S_z`, jump `S_x` at rate
/// `gamma`, starting in `|+>`: returns the off-diagonal `sigma_01(t)`.
pub fn two_level_offdiag(omega: f64, gamma: f64, t: f64) -> C64 {
    let om = C64::new(gamma * gamma - 4.0 * omega * omega, 0.0).sqrt();
    let z = if om.norm() < 1e-12 {
        // Omega -> 0 limit
        (-gamma * t).exp() * (ONE + C64::new(gamma, -2.0 * omega) * t)
    } else {
        (-gamma * t).exp() * ((om * t).cosh() + C64::new(gamma, -2.0 * omega) / om * (om * t).sinh())
    };
    z / 2.0
}
