//! Density-matrix exponentiation.
//!
//! Three ways of applying `sigma -> e^{-i kappa rho} sigma e^{i conj(kappa) rho}`
//! with a resource state `rho`:
//!
//! * the ideal channel, computed with a matrix exponential;
//! * the controlled-SWAP circuit: a control qubit `|0> - i kappa |1>`, a
//!   c-SWAP between resource and simulator, and a heralded `|+>` outcome;
//! * the exponential-SWAP gate `e^{-i S delta}` followed by discarding the
//!   resource.
//!
//! Complex `kappa` gives a non-unitary map. Outputs are always
//! trace-normalized and the discarded normalization is returned as a log
//! factor so callers can track norms of vectorized states.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::decompose::ResourceState;
use crate::error::{Result, SbqsError};
use crate::tensor::{
    hermitian_part, identity, kron, kron_all, mat_exp, swap_operator, trace, trace_first,
    ComplexMatrix, C64, I, ONE, ZERO,
};

/// Largest `|kappa|` accepted by a single circuit step.
pub const DEFAULT_GUARD: f64 = 0.1;

/// Resource dimension up to which the circuit is materialized as a dense
/// unitary on `control ⊗ rho ⊗ sigma` when the backend is `Auto`.
pub const DEFAULT_EXPLICIT_LIMIT: usize = 4;

/// Cap on retries in sampled post-selection.
pub const MAX_ATTEMPTS: u32 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostSelection {
    /// Keep the heralded branch deterministically and record its probability.
    #[default]
    Conditional,
    /// Draw the measurement; on failure retry from the pre-step checkpoint.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlNormalization {
    /// Control amplitudes `(1, -i kappa)` exactly as prepared.
    #[default]
    AsWritten,
    /// Renormalize the control before the gate.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircuitBackend {
    /// Explicit below the size limit, contracted above it.
    #[default]
    Auto,
    /// Dense `|0><0| ⊗ I + |1><1| ⊗ S` on the full register.
    Explicit,
    /// Same circuit evaluated through the SWAP trace identities.
    Contracted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircuitConfig {
    pub post_selection: PostSelection,
    pub normalization: ControlNormalization,
    pub backend: CircuitBackend,
    pub guard: f64,
    pub explicit_limit: usize,
}

impl Default for CircuitConfig {
    fn default() -> Self {
        CircuitConfig {
            post_selection: PostSelection::Conditional,
            normalization: ControlNormalization::AsWritten,
            backend: CircuitBackend::Auto,
            guard: DEFAULT_GUARD,
            explicit_limit: DEFAULT_EXPLICIT_LIMIT,
        }
    }
}

impl CircuitConfig {
    pub(crate) fn use_explicit(&self, d: usize) -> bool {
        match self.backend {
            CircuitBackend::Explicit => true,
            CircuitBackend::Contracted => false,
            CircuitBackend::Auto => d <= self.explicit_limit,
        }
    }

    pub(crate) fn check_guard(&self, kappa: C64) -> Result<()> {
        if kappa.norm() > self.guard * (1.0 + 1e-12) {
            return Err(SbqsError::StepSize { value: kappa.norm(), guard: self.guard });
        }
        Ok(())
    }
}

/// Control register `amp0 |0> + amp1 |1>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlQubit {
    pub amp0: C64,
    pub amp1: C64,
}

impl ControlQubit {
    /// `|0> - i kappa |1>`.
    pub fn for_coupling(kappa: C64) -> Self {
        ControlQubit { amp0: ONE, amp1: -I * kappa }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amp0.norm_sqr() + self.amp1.norm_sqr()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm_sqr().sqrt();
        ControlQubit { amp0: self.amp0 / n, amp1: self.amp1 / n }
    }

    /// `amp1 / amp0`.
    pub fn ratio(&self) -> C64 {
        self.amp1 / self.amp0
    }

    pub fn density(&self) -> ComplexMatrix {
        let v = [self.amp0, self.amp1];
        ComplexMatrix::from_fn(2, 2, |i, j| v[i] * v[j].conj())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HeraldMode {
    ExactConditional,
    Sampled,
}

/// Outcome of one heralded circuit step.
#[derive(Debug, Clone)]
pub struct HeraldResult {
    /// Renormalized simulator state.
    pub state: ComplexMatrix,
    /// Probability of the kept `|+>` outcome.
    pub p_herald: f64,
    pub mode: HeraldMode,
    /// Circuit executions until the herald fired (1 in conditional mode).
    pub attempts: u32,
    /// Estimate of `ln Tr[e^{-i kappa rho} sigma e^{i conj(kappa) rho}]`.
    pub log_norm: f64,
    /// Crude bound `4 |kappa|^2` on the distance to the ideal channel.
    pub error_bound: f64,
}

fn check_dims(rho: &ResourceState, sigma: &ComplexMatrix) -> Result<usize> {
    let d = sigma.nrows();
    if !sigma.is_square() || d == 0 {
        return Err(SbqsError::Dimension("simulator state must be square".into()));
    }
    if rho.dim() != d {
        return Err(SbqsError::Dimension(format!(
            "resource dim {} does not match simulator dim {d}",
            rho.dim()
        )));
    }
    Ok(d)
}

/// `U sigma U†` with `U = e^{-i kappa rho}`, before renormalization.
pub fn dme_channel_unnormalized(
    rho: &ResourceState,
    sigma: &ComplexMatrix,
    kappa: C64,
) -> Result<ComplexMatrix> {
    let _ = check_dims(rho, sigma)?;
    if kappa == ZERO {
        return Ok(sigma.clone());
    }
    match rho {
        ResourceState::Pure(u) => {
            // e^{-i kappa |u><u|} = I + f |u><u| for a unit ket
            let f = (-I * kappa).exp() - ONE;
            let su = sigma * u;
            let sdu = sigma.adjoint() * u;
            let uu = u.dotc(&su);
            let mut out = sigma.clone();
            // rank-one updates: f u (u† sigma) + conj(f) (sigma u) u† + |f|^2 <u|sigma|u> u u†
            out.gerc(f, u, &sdu, ONE);
            out.gerc(f.conj(), &su, u, ONE);
            out.gerc(C64::new(f.norm_sqr(), 0.0) * uu, u, u, ONE);
            Ok(out)
        }
        ResourceState::Mixed(m) => {
            let u = mat_exp(m, -I * kappa)?;
            Ok(&u * sigma * u.adjoint())
        }
    }
}

pub(crate) fn finish(m: ComplexMatrix, hermitian: bool) -> Result<(ComplexMatrix, f64)> {
    let tr = trace(&m).re;
    if !(tr.is_finite() && tr > 0.0) {
        return Err(SbqsError::Numeric(format!("state trace collapsed to {tr:e}")));
    }
    let out = m / C64::new(tr, 0.0);
    let out = if hermitian { hermitian_part(&out) } else { out };
    Ok((out, tr))
}

/// Ideal channel `e^{-i kappa rho} sigma e^{i conj(kappa) rho}`, trace-normalized.
pub fn dme_channel_exact(rho: &ResourceState, sigma: &ComplexMatrix, kappa: C64) -> Result<ComplexMatrix> {
    Ok(dme_channel_exact_tracked(rho, sigma, kappa)?.0)
}

/// As [`dme_channel_exact`], also returning the log of the discarded trace.
pub fn dme_channel_exact_tracked(
    rho: &ResourceState,
    sigma: &ComplexMatrix,
    kappa: C64,
) -> Result<(ComplexMatrix, f64)> {
    let raw = dme_channel_unnormalized(rho, sigma, kappa)?;
    let (out, tr) = finish(raw, true)?;
    Ok((out, tr.ln()))
}

/// Heralded, unnormalized simulator state `(<+| ⊗ Tr_rho)[U (C ⊗ rho ⊗ sigma) U†]`
/// for an arbitrary (possibly mixed) 2x2 control operator `C`.
///
/// The returned trace is the herald probability when `C` has unit trace.
pub fn cswap_heralded(
    control: &ComplexMatrix,
    rho: &ResourceState,
    sigma: &ComplexMatrix,
    explicit: bool,
) -> Result<ComplexMatrix> {
    let d = check_dims(rho, sigma)?;
    if control.shape() != (2, 2) {
        return Err(SbqsError::Dimension("control must be a 2x2 operator".into()));
    }
    if explicit {
        let rho_m = rho.matrix();
        let full = kron_all(&[control, &rho_m, sigma])?;
        let n = d * d;
        let s = swap_operator(d)?;
        let p0 = ComplexMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, ZERO]);
        let p1 = ComplexMatrix::from_row_slice(2, 2, &[ZERO, ZERO, ZERO, ONE]);
        let u = kron(&p0, &identity(n))? + kron(&p1, &s)?;
        let evolved = &u * full * u.adjoint();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let plus_bra = ComplexMatrix::from_row_slice(1, 2, &[C64::new(h, 0.0), C64::new(h, 0.0)]);
        let proj = kron(&plus_bra, &identity(n))?;
        let kept = &proj * evolved * proj.adjoint();
        trace_first(&kept, d, d)
    } else {
        // Tr_1[S X] = rho sigma, Tr_1[X S] = sigma rho, Tr_1[S X S] = rho
        let half = C64::new(0.5, 0.0);
        let mut out = sigma * (control[(0, 0)] * half);
        out += rho.left_mul(sigma) * (control[(1, 0)] * half);
        out += rho.right_mul(sigma) * (control[(0, 1)] * half);
        rho.add_scaled_to(&mut out, control[(1, 1)] * half);
        Ok(out)
    }
}

pub(crate) fn herald<R: RngCore + ?Sized>(
    p: f64,
    post: PostSelection,
    rng: Option<&mut R>,
) -> Result<(HeraldMode, u32)> {
    match post {
        PostSelection::Conditional => Ok((HeraldMode::ExactConditional, 1)),
        PostSelection::Sampled => {
            let rng = rng.ok_or_else(|| {
                SbqsError::Argument("sampled post-selection needs a random source".into())
            })?;
            if !(p > 0.0) {
                return Err(SbqsError::Numeric("herald probability is zero".into()));
            }
            for attempt in 1..=MAX_ATTEMPTS {
                let u: f64 = rng.gen();
                if u < p {
                    return Ok((HeraldMode::Sampled, attempt));
                }
            }
            Err(SbqsError::Budget(format!("herald did not fire in {MAX_ATTEMPTS} attempts")))
        }
    }
}

/// One c-SWAP step with effective coupling `kappa = c * delta` (complex allowed).
pub fn dme_cswap_kappa<R: RngCore + ?Sized>(
    rho: &ResourceState,
    sigma: &ComplexMatrix,
    kappa: C64,
    cfg: &CircuitConfig,
    rng: Option<&mut R>,
) -> Result<HeraldResult> {
    let d = check_dims(rho, sigma)?;
    cfg.check_guard(kappa)?;
    let mut control = ControlQubit::for_coupling(kappa);
    let k2 = kappa.norm_sqr();
    if cfg.normalization == ControlNormalization::Strict {
        control = control.normalized();
    }
    let k = cswap_heralded(&control.density(), rho, sigma, cfg.use_explicit(d))?;
    let p = trace(&k).re;
    let (mode, attempts) = herald(p, cfg.post_selection, rng)?;
    let physical = match cfg.normalization {
        ControlNormalization::AsWritten => 2.0 * p / (1.0 + k2),
        ControlNormalization::Strict => 2.0 * p,
    };
    let hermitian = kappa.im == 0.0;
    let (state, _) = finish(k, hermitian)?;
    Ok(HeraldResult {
        state,
        p_herald: p,
        mode,
        attempts,
        log_norm: physical.ln(),
        error_bound: 4.0 * k2,
    })
}

/// One c-SWAP step for a real coupling `c` and step `delta`.
pub fn dme_cswap_step<R: RngCore + ?Sized>(
    rho: &ResourceState,
    sigma: &ComplexMatrix,
    delta: f64,
    c: f64,
    cfg: &CircuitConfig,
    rng: Option<&mut R>,
) -> Result<HeraldResult> {
    dme_cswap_kappa(rho, sigma, C64::new(c * delta, 0.0), cfg, rng)
}

/// `Tr_1[e^{-i S delta} (rho ⊗ sigma) e^{i S delta}]`.
pub fn eswap_step(rho: &ResourceState, sigma: &ComplexMatrix, delta: f64) -> Result<ComplexMatrix> {
    eswap_step_with(rho, sigma, delta, CircuitBackend::Auto, DEFAULT_EXPLICIT_LIMIT)
}

pub fn eswap_step_with(
    rho: &ResourceState,
    sigma: &ComplexMatrix,
    delta: f64,
    backend: CircuitBackend,
    explicit_limit: usize,
) -> Result<ComplexMatrix> {
    let d = check_dims(rho, sigma)?;
    if !delta.is_finite() {
        return Err(SbqsError::Argument("delta must be finite".into()));
    }
    let explicit = match backend {
        CircuitBackend::Explicit => true,
        CircuitBackend::Contracted => false,
        CircuitBackend::Auto => d <= explicit_limit,
    };
    let (c, s) = (delta.cos(), delta.sin());
    let out = if explicit {
        // S^2 = I so e^{-i S delta} = cos(delta) I - i sin(delta) S
        let sw = swap_operator(d)?;
        let u = identity(d * d) * C64::new(c, 0.0) - sw * C64::new(0.0, s);
        let x = kron(&rho.matrix(), sigma)?;
        trace_first(&(&u * x * u.adjoint()), d, d)?
    } else {
        let rs = rho.left_mul(sigma);
        let sr = rho.right_mul(sigma);
        let mut out = sigma * C64::new(c * c, 0.0);
        rho.add_scaled_to(&mut out, C64::new(s * s, 0.0));
        out += (rs - sr) * C64::new(0.0, -c * s);
        out
    };
    Ok(hermitian_part(&out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    #[default]
    Exact,
    Circuit,
    Eswap,
}

/// How each term `e^{-i kappa rho}` is realized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmeMode {
    pub kind: StepKind,
    pub circuit: CircuitConfig,
    /// Split every application into this many sub-steps of `kappa / copies`,
    /// each consuming one fresh resource copy.
    pub copies: usize,
}

impl Default for DmeMode {
    fn default() -> Self {
        DmeMode { kind: StepKind::Exact, circuit: CircuitConfig::default(), copies: 1 }
    }
}

impl DmeMode {
    pub fn exact() -> Self {
        DmeMode::default()
    }

    pub fn circuit() -> Self {
        DmeMode { kind: StepKind::Circuit, ..DmeMode::default() }
    }

    pub fn sampled() -> Self {
        let mut m = DmeMode::circuit();
        m.circuit.post_selection = PostSelection::Sampled;
        m
    }

    pub fn eswap() -> Self {
        DmeMode { kind: StepKind::Eswap, ..DmeMode::default() }
    }

    pub fn with_copies(mut self, copies: usize) -> Self {
        self.copies = copies.max(1);
        self
    }
}

/// Result of applying one decomposition term.
#[derive(Debug, Clone)]
pub struct TermOutcome {
    pub state: ComplexMatrix,
    /// Mean herald probability over the sub-steps (circuit mode only).
    pub p_herald: Option<f64>,
    pub log_norm: f64,
    pub attempts: u64,
    pub copies: usize,
    pub error_bound: f64,
}

/// Apply `e^{-i kappa rho}` to `sigma` in the chosen mode.
pub fn apply_term<R: RngCore + ?Sized>(
    rho: &ResourceState,
    sigma: &ComplexMatrix,
    kappa: C64,
    mode: &DmeMode,
    mut rng: Option<&mut R>,
) -> Result<TermOutcome> {
    let copies = mode.copies.max(1);
    match mode.kind {
        StepKind::Exact => {
            let (state, log_norm) = dme_channel_exact_tracked(rho, sigma, kappa)?;
            Ok(TermOutcome { state, p_herald: None, log_norm, attempts: 0, copies: 0, error_bound: 0.0 })
        }
        StepKind::Circuit => {
            let sub = kappa / copies as f64;
            let mut state = sigma.clone();
            let (mut p_sum, mut log_norm, mut attempts, mut bound) = (0.0, 0.0, 0u64, 0.0);
            for _ in 0..copies {
                let r = dme_cswap_kappa(rho, &state, sub, &mode.circuit, rng.as_deref_mut())?;
                p_sum += r.p_herald;
                log_norm += r.log_norm;
                attempts += r.attempts as u64;
                bound += r.error_bound;
                state = r.state;
            }
            Ok(TermOutcome {
                state,
                p_herald: Some(p_sum / copies as f64),
                log_norm,
                attempts,
                copies,
                error_bound: bound,
            })
        }
        StepKind::Eswap => {
            if kappa.im != 0.0 {
                return Err(SbqsError::Argument(
                    "the e-SWAP route only realizes real couplings".into(),
                ));
            }
            let sub = kappa.re / copies as f64;
            let mut state = sigma.clone();
            for _ in 0..copies {
                state = eswap_step_with(
                    rho,
                    &state,
                    sub,
                    mode.circuit.backend,
                    mode.circuit.explicit_limit,
                )?;
            }
            let bound = copies as f64 * 4.0 * sub * sub;
            Ok(TermOutcome { state, p_herald: None, log_norm: 0.0, attempts: 0, copies, error_bound: bound })
        }
    }
}

/// Outcome of [`dme_repeat`].
#[derive(Debug, Clone)]
pub struct DmeRun {
    pub state: ComplexMatrix,
    pub herald_probs: Vec<f64>,
}

/// `n` repetitions of the chosen step with `delta = h t / n`, approximating
/// `e^{-i h t rho} sigma0 e^{i h t rho}`.
pub fn dme_repeat<R: RngCore + ?Sized>(
    rho: &ResourceState,
    sigma0: &ComplexMatrix,
    h: f64,
    t: f64,
    n: usize,
    mode: &DmeMode,
    mut rng: Option<&mut R>,
) -> Result<DmeRun> {
    if n == 0 {
        return Err(SbqsError::Argument("dme_repeat needs n >= 1".into()));
    }
    let kappa = C64::new(h * t / n as f64, 0.0);
    let single = DmeMode { copies: 1, ..*mode };
    let mut state = sigma0.clone();
    let mut herald_probs = Vec::new();
    for _ in 0..n {
        let out = apply_term(rho, &state, kappa, &single, rng.as_deref_mut())?;
        if let Some(p) = out.p_herald {
            herald_probs.push(p);
        }
        state = out.state;
    }
    Ok(DmeRun { state, herald_probs })
}

/// Copies of `rho` needed for total error `eps` at evolution angle `h t`
/// under the first-order accumulation bound.
pub fn copies_for_error(ht: f64, eps: f64) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(SbqsError::Argument("eps must be positive".into()));
    }
    Ok(((ht * ht) / eps).ceil().max(1.0) as usize)
}
