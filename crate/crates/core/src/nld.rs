//! Polynomial nonlinear delay ODEs as history-dependent state evolution.
//!
//! A system `x_m' = sum_n f_mn(x(t), x(t-a_1), ...) x_n` is embedded in the
//! unit vector `psi = (x0, alpha x_1, ..., alpha x_D, x_{D+1})`, where `x0` is a
//! constant slot and `x_{D+1}` takes up the remaining norm. Then
//! `psi' = F psi`, i.e. `psi' = -i H psi` with `H = i F`, and every entry
//! `f_mn` is the expectation of an operator `F_mn` over copies of past
//! states. Each monomial `x_i^r` becomes `|i><i|^{⊗ r/2}`, with odd powers
//! absorbing one factor as `x0^{-1} |0><i|`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decompose::{polarization_general, ResourceState};
use crate::dme::{
    cswap_heralded, dme_channel_exact_tracked, finish, herald, ControlNormalization, ControlQubit,
    DmeMode, StepKind,
};
use crate::error::{Result, SbqsError};
use crate::evolve::{ResourceReport, SimOptions};
use crate::nonlinear::{chain_cswap_control_explicit, CopyReport, HistoryBuffer, SNAP_TOLERANCE};
use crate::tensor::{basis_ket, identity, kron_all, projector, trace, ComplexMatrix, ComplexVector, QRegister, C64, I, ONE, ZERO};

/// One coefficient `C^{mn}_{r}` of `f_mn`; `exponents[j][i - 1]` is the
/// power of `x_i(t - a_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NldCoefficient {
    pub m: usize,
    pub n: usize,
    pub exponents: Vec<Vec<u32>>,
    pub value: f64,
}

fn default_x0() -> f64 {
    0.5
}
fn default_alpha() -> f64 {
    1.0
}
fn default_taylor() -> usize {
    2
}

/// `x_m' = sum_{n=1}^{D} f_mn x_n` with polynomial `f_mn` over lagged variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NldSystem {
    #[serde(rename = "D")]
    pub dim: usize,
    /// `a_1 .. a_N`; `a_0 = 0` is implicit.
    #[serde(default)]
    pub delays: Vec<f64>,
    /// `l_0 .. l_N`.
    pub degrees: Vec<u32>,
    #[serde(default)]
    pub coefficients: Vec<NldCoefficient>,
    #[serde(default = "default_x0")]
    pub x0: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_taylor")]
    pub taylor_order: usize,
}

impl NldSystem {
    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return Err(SbqsError::Argument("D must be >= 1".into()));
        }
        if self.degrees.len() != self.delays.len() + 1 {
            return Err(SbqsError::Argument(format!(
                "expected {} degrees (one per time including t), got {}",
                self.delays.len() + 1,
                self.degrees.len()
            )));
        }
        if self.delays.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(SbqsError::Argument("delays must be finite and > 0".into()));
        }
        if !(self.x0.is_finite() && self.x0 != 0.0 && self.x0.abs() < 1.0) {
            return Err(SbqsError::Argument("x0 must be nonzero with |x0| < 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(SbqsError::Argument("alpha must be positive".into()));
        }
        if self.taylor_order == 0 {
            return Err(SbqsError::Argument("taylor_order must be >= 1".into()));
        }
        for (k, c) in self.coefficients.iter().enumerate() {
            if !(1..=d).contains(&c.m) || !(1..=d).contains(&c.n) {
                return Err(SbqsError::Argument(format!("coefficient {k}: m, n must lie in 1..={d}")));
            }
            if c.exponents.len() != self.degrees.len() {
                return Err(SbqsError::Argument(format!(
                    "coefficient {k}: need exponents for {} times",
                    self.degrees.len()
                )));
            }
            for (j, row) in c.exponents.iter().enumerate() {
                if row.len() != d {
                    return Err(SbqsError::Argument(format!("coefficient {k}: time {j} needs {d} exponents")));
                }
                if row.iter().any(|&r| r > self.degrees[j]) {
                    return Err(SbqsError::Argument(format!(
                        "coefficient {k}: exponent exceeds degree {} at time {j}",
                        self.degrees[j]
                    )));
                }
            }
            if !c.value.is_finite() {
                return Err(SbqsError::Argument(format!("coefficient {k} is not finite")));
            }
        }
        Ok(())
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let s: NldSystem =
            serde_json::from_value(v.clone()).map_err(|e| SbqsError::Argument(format!("nld system: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    /// Times `0, a_1, ..., a_N`.
    pub fn lags(&self) -> Vec<f64> {
        let mut v = vec![0.0];
        v.extend_from_slice(&self.delays);
        v
    }

    pub fn max_delay(&self) -> f64 {
        self.delays.iter().copied().fold(0.0, f64::max)
    }

    /// `alpha = 0.9 / (B sqrt(D + 1))` for a bound `B` on `max |x_i(t)|`.
    pub fn auto_alpha(&self, bound: f64) -> f64 {
        0.9 / (bound * ((self.dim + 1) as f64).sqrt())
    }

    /// `f_mn` in the original variables; `lagged[j]` is `x(t - a_j)`.
    pub fn f_value(&self, m: usize, n: usize, lagged: &[Vec<f64>]) -> f64 {
        self.coefficients
            .iter()
            .filter(|c| c.m == m && c.n == n)
            .map(|c| {
                c.value
                    * c.exponents
                        .iter()
                        .zip(lagged)
                        .map(|(row, x)| row.iter().zip(x).map(|(&r, &xi)| xi.powi(r as i32)).product::<f64>())
                        .product::<f64>()
            })
            .sum()
    }

    /// Right-hand side `x_m' = sum_n f_mn x_n(t)` in the original variables.
    pub fn rhs(&self, lagged: &[Vec<f64>]) -> Vec<f64> {
        (1..=self.dim)
            .map(|m| (1..=self.dim).map(|n| self.f_value(m, n, lagged) * lagged[0][n - 1]).sum())
            .collect()
    }
}

/// Unit vector `(x0, alpha x, x_{D+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedState {
    pub psi: ComplexVector,
}

impl EmbeddedState {
    pub fn density(&self) -> ComplexMatrix {
        projector(&self.psi)
    }
}

pub fn embed(x: &[f64], sys: &NldSystem) -> Result<EmbeddedState> {
    if x.len() != sys.dim {
        return Err(SbqsError::Dimension(format!("expected {} variables, got {}", sys.dim, x.len())));
    }
    let used: f64 = sys.x0 * sys.x0 + x.iter().map(|v| (sys.alpha * v).powi(2)).sum::<f64>();
    if !(used <= 1.0) {
        return Err(SbqsError::Scaling(format!(
            "|(x0, alpha x)|^2 = {used} exceeds 1; choose a smaller alpha"
        )));
    }
    let mut psi = ComplexVector::zeros(sys.dim + 2);
    psi[0] = C64::new(sys.x0, 0.0);
    for (i, v) in x.iter().enumerate() {
        psi[i + 1] = C64::new(sys.alpha * v, 0.0);
    }
    psi[sys.dim + 1] = C64::new((1.0 - used).max(0.0).sqrt(), 0.0);
    Ok(EmbeddedState { psi })
}

/// `x_i = x0 sigma_{i0} / (alpha sigma_00)`; independent of the trace normalization.
pub fn readout(sigma: &ComplexMatrix, sys: &NldSystem) -> Result<Vec<f64>> {
    let s00 = sigma[(0, 0)].re;
    if !(s00.abs() > 1e-12) {
        return Err(SbqsError::Readout(s00));
    }
    Ok((1..=sys.dim).map(|i| sys.x0 * (sigma[(i, 0)] / sigma[(0, 0)]).re / sys.alpha).collect())
}

/// Polynomial over embedded components: `exps[j][i]` for `i = 0..D+1`.
#[derive(Debug, Clone, PartialEq)]
struct Poly {
    terms: Vec<(f64, Vec<Vec<u32>>)>,
}

/// All `f_mn` in embedded variables, including the normalization row
/// `f_{D+1,0} = -(x0 x_{D+1})^{-1} sum f_mn x_m x_n` with the truncated series
/// `1/u = sum_{k<=r} (1-u)^k`.
fn embedded_polys(sys: &NldSystem) -> Vec<((usize, usize), Poly)> {
    let d = sys.dim;
    let width = d + 2;
    let times = sys.degrees.len();
    let mut out: Vec<((usize, usize), Poly)> = Vec::new();
    for c in &sys.coefficients {
        // x = y / alpha in the original variables
        let total: u32 = c.exponents.iter().flatten().sum();
        let mut e = vec![vec![0u32; width]; times];
        for (j, row) in c.exponents.iter().enumerate() {
            for (i, &r) in row.iter().enumerate() {
                e[j][i + 1] = r;
            }
        }
        let val = c.value * sys.alpha.powi(-(total as i32));
        match out.iter_mut().find(|(k, _)| *k == (c.m, c.n)) {
            Some((_, p)) => p.terms.push((val, e)),
            None => out.push(((c.m, c.n), Poly { terms: vec![(val, e)] })),
        }
    }
    // series coefficients of u^p in sum_{k<=r} (1-u)^k
    let r = sys.taylor_order;
    let mut series = vec![0.0; r + 1];
    for k in 0..=r {
        let mut binom = 1.0;
        for p in 0..=k {
            let sign = if p % 2 == 0 { 1.0 } else { -1.0 };
            series[p] += sign * binom;
            binom = binom * (k - p) as f64 / (p + 1) as f64;
        }
    }
    let mut norm_row = Poly { terms: Vec::new() };
    for ((m, n), p) in &out {
        for (val, e) in &p.terms {
            for (pw, s) in series.iter().enumerate() {
                if *s == 0.0 {
                    continue;
                }
                let mut e2 = e.clone();
                e2[0][*m] += 1;
                e2[0][*n] += 1;
                e2[0][d + 1] += pw as u32;
                norm_row.terms.push((-val * s / sys.x0, e2));
            }
        }
    }
    if !norm_row.terms.is_empty() {
        out.push(((d + 1, 0), norm_row));
    }
    out
}

/// One copy slot of an `F_mn` monomial.
#[derive(Debug, Clone, PartialEq)]
pub enum CopyFactor {
    Identity,
    /// `|i><i|`.
    Diagonal(usize),
    /// `|0><i|` (the `x0^{-1}` is carried by the monomial coefficient).
    Shift(usize),
}

impl CopyFactor {
    fn matrix(&self, dim: usize) -> ComplexMatrix {
        match *self {
            CopyFactor::Identity => identity(dim),
            CopyFactor::Diagonal(i) => projector(&basis_ket(dim, i)),
            CopyFactor::Shift(i) => basis_ket(dim, 0) * basis_ket(dim, i).adjoint(),
        }
    }

    /// `Tr[A sigma]`.
    fn expectation(&self, sigma: &ComplexMatrix) -> C64 {
        match *self {
            CopyFactor::Identity => trace(sigma),
            CopyFactor::Diagonal(i) => sigma[(i, i)],
            CopyFactor::Shift(i) => sigma[(i, 0)],
        }
    }

    /// Weighted states summing to this factor.
    fn states(&self, dim: usize) -> Result<Vec<(C64, ComplexMatrix)>> {
        Ok(match *self {
            CopyFactor::Identity => vec![(C64::new(dim as f64, 0.0), identity(dim) / C64::new(dim as f64, 0.0))],
            CopyFactor::Diagonal(_) => vec![(ONE, self.matrix(dim))],
            CopyFactor::Shift(_) => {
                let dec = polarization_general(&self.matrix(dim))?;
                debug_assert!(dec.identity_offset == ZERO);
                dec.terms.into_iter().map(|t| (t.weight, t.state.into_matrix())).collect()
            }
        })
    }
}

/// `coeff * ⊗_k A_k` over the padded copy layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMonomial {
    pub coeff: f64,
    pub factors: Vec<CopyFactor>,
}

/// Product state `weight * ⊗_k rho_k` from expanding one monomial.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductTerm {
    pub weight: C64,
    pub states: Vec<ComplexMatrix>,
}

/// `F_mn` on `|Psi> = ⊗_j |psi(t - a_j)>^{⊗ C_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FmnOperator {
    pub m: usize,
    pub n: usize,
    /// Embedded dimension `D + 2`.
    pub dim: usize,
    /// Copies `C_j` per time.
    pub copies: Vec<usize>,
    pub monomials: Vec<OperatorMonomial>,
}

/// Unpadded copy factors of one monomial, grouped by time.
fn monomial_factors(exps: &[Vec<u32>]) -> Vec<Vec<CopyFactor>> {
    let constant = exps.iter().flatten().all(|&r| r == 0);
    exps.iter()
        .enumerate()
        .map(|(j, row)| {
            let mut f = Vec::new();
            if constant && j == 0 {
                f.push(CopyFactor::Diagonal(0));
            }
            for (i, &r) in row.iter().enumerate() {
                for _ in 0..r / 2 {
                    f.push(CopyFactor::Diagonal(i));
                }
                if r % 2 == 1 {
                    f.push(CopyFactor::Shift(i));
                }
            }
            f
        })
        .collect()
}

/// Copy slot counts shared by every `F_mn` of the system.
pub fn copy_layout(sys: &NldSystem) -> Vec<usize> {
    let mut c = vec![0usize; sys.degrees.len()];
    for (_, p) in embedded_polys(sys) {
        for (_, e) in &p.terms {
            for (j, f) in monomial_factors(e).iter().enumerate() {
                c[j] = c[j].max(f.len());
            }
        }
    }
    c
}

fn build_with_layout(sys: &NldSystem, m: usize, n: usize, layout: &[usize]) -> FmnOperator {
    let x0 = sys.x0;
    let mut monomials = Vec::new();
    if let Some((_, p)) = embedded_polys(sys).into_iter().find(|(k, _)| *k == (m, n)) {
        for (val, e) in &p.terms {
            let groups = monomial_factors(e);
            let constant = e.iter().flatten().all(|&r| r == 0);
            let odd: i32 = e.iter().flatten().map(|&r| (r % 2) as i32).sum();
            let scale = if constant { x0.powi(-2) } else { x0.powi(-odd) };
            let mut factors = Vec::new();
            for (j, g) in groups.into_iter().enumerate() {
                let pad = layout[j] - g.len();
                factors.extend(g);
                factors.extend(std::iter::repeat(CopyFactor::Identity).take(pad));
            }
            monomials.push(OperatorMonomial { coeff: val * scale, factors });
        }
    }
    FmnOperator { m, n, dim: sys.dim + 2, copies: layout.to_vec(), monomials }
}

/// `F_mn` with `<Psi|F_mn|Psi> = f_mn` (zero operator when `f_mn` vanishes).
pub fn build_fmn(sys: &NldSystem, m: usize, n: usize) -> FmnOperator {
    build_with_layout(sys, m, n, &copy_layout(sys))
}

impl FmnOperator {
    pub fn total_copies(&self) -> usize {
        self.copies.iter().sum()
    }

    /// Time index of every copy slot.
    fn slot_times(&self) -> Vec<usize> {
        self.copies.iter().enumerate().flat_map(|(j, &c)| std::iter::repeat(j).take(c)).collect()
    }

    /// Dense operator on the copy space (small systems only).
    pub fn matrix(&self) -> Result<ComplexMatrix> {
        let side = self.dim.pow(self.total_copies() as u32);
        let mut out = ComplexMatrix::zeros(side, side);
        for mono in &self.monomials {
            let mats: Vec<ComplexMatrix> = mono.factors.iter().map(|f| f.matrix(self.dim)).collect();
            let refs: Vec<&ComplexMatrix> = mats.iter().collect();
            out += kron_all(&refs)? * C64::new(mono.coeff, 0.0);
        }
        Ok(out)
    }

    /// `Tr[F_mn ⊗_k sigma_{j(k)}]`, with `states[j] = sigma(t - a_j)`.
    pub fn expectation(&self, states: &[&ComplexMatrix]) -> C64 {
        let times = self.slot_times();
        self.monomials
            .iter()
            .map(|mono| {
                mono.factors
                    .iter()
                    .zip(&times)
                    .map(|(f, &j)| f.expectation(states[j]))
                    .fold(C64::new(mono.coeff, 0.0), |a, b| a * b)
            })
            .sum()
    }

    /// Expansion into weighted product states, without merging duplicates.
    pub fn state_terms(&self) -> Result<Vec<ProductTerm>> {
        let mut out = Vec::new();
        for mono in &self.monomials {
            let mut partial = vec![ProductTerm { weight: C64::new(mono.coeff, 0.0), states: Vec::new() }];
            for f in &mono.factors {
                let opts = f.states(self.dim)?;
                let mut next = Vec::with_capacity(partial.len() * opts.len());
                for p in &partial {
                    for (w, s) in &opts {
                        let mut states = p.states.clone();
                        states.push(s.clone());
                        next.push(ProductTerm { weight: p.weight * w, states });
                    }
                }
                partial = next;
            }
            out.extend(partial);
        }
        Ok(out)
    }
}

/// One product-formula factor: `H_k = i f-weight * Tr[xi Psi] * w_q rho_q`.
#[derive(Debug, Clone)]
struct NldFactor {
    /// `i * (state weight) * (|m><n| weight)`.
    c: C64,
    xi: Vec<ComplexMatrix>,
    rho: ResourceState,
}

/// Resource count of the embedded Hamiltonian.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NldTermReport {
    /// Copies of the state per estimate, `C = sum_j C_j`.
    pub copies: usize,
    /// Product-formula factors per step, `R = sum_mn terms(F_mn) terms(|m><n|)`.
    pub terms: usize,
    /// `(m, n, terms(F_mn))` for every nonzero entry.
    pub per_entry: Vec<(usize, usize, usize)>,
}

struct Plan {
    factors: Vec<NldFactor>,
    slot_times: Vec<usize>,
    report: NldTermReport,
}

fn build_plan(sys: &NldSystem) -> Result<Plan> {
    let layout = copy_layout(sys);
    let dimd = sys.dim + 2;
    let mut factors = Vec::new();
    let mut per_entry = Vec::new();
    let mut slot_times = Vec::new();
    let mut entries: Vec<(usize, usize)> = embedded_polys(sys).into_iter().map(|(k, _)| k).collect();
    entries.sort();
    for (m, n) in entries {
        let op = build_with_layout(sys, m, n, &layout);
        slot_times = op.slot_times();
        let terms = op.state_terms()?;
        per_entry.push((m, n, terms.len()));
        let mn = basis_ket(dimd, m) * basis_ket(dimd, n).adjoint();
        let pieces: Vec<(C64, ComplexMatrix)> = if m == n {
            vec![(ONE, mn)]
        } else {
            polarization_general(&mn)?.terms.into_iter().map(|t| (t.weight, t.state.into_matrix())).collect()
        };
        // grouped by resource state so that consecutive factors commute
        for (wq, rho) in &pieces {
            let res = ResourceState::Mixed(rho.clone());
            for t in &terms {
                factors.push(NldFactor { c: I * t.weight * wq, xi: t.states.clone(), rho: res.clone() });
            }
        }
    }
    let report = NldTermReport { copies: layout.iter().sum(), terms: factors.len(), per_entry };
    Ok(Plan { factors, slot_times, report })
}

/// Term and copy counts without running.
pub fn term_report(sys: &NldSystem) -> Result<NldTermReport> {
    sys.validate()?;
    Ok(build_plan(sys)?.report)
}

/// How `Tr[xi Psi]` reaches the control in circuit mode.
fn factor_control(
    f: &NldFactor,
    slots: &[&ComplexMatrix],
    control: &ComplexMatrix,
    explicit: bool,
) -> Result<ComplexMatrix> {
    if explicit {
        let xi_refs: Vec<&ComplexMatrix> = f.xi.iter().collect();
        let xi = kron_all(&xi_refs)?;
        let psi = kron_all(slots)?;
        let reg = QRegister::product(&[&xi, &psi])?;
        chain_cswap_control_explicit(&reg, control)
    } else {
        // product states: Tr[xi Psi] factorizes over copies, and every party has unit trace
        let g: C64 = f.xi.iter().zip(slots).map(|(x, s)| trace(&(x * *s))).product();
        let norm: C64 = f.xi.iter().map(trace).chain(slots.iter().map(|s| trace(s))).product();
        Ok(ComplexMatrix::from_row_slice(
            2,
            2,
            &[control[(0, 0)] * norm, control[(0, 1)] * g.conj(), control[(1, 0)] * g, control[(1, 1)] * norm],
        ))
    }
}

/// Options for [`solve_nld`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NldOptions {
    pub sim: SimOptions,
    /// Build the chain register explicitly in circuit mode (tiny systems only).
    pub explicit_chain: bool,
}

impl Default for NldOptions {
    fn default() -> Self {
        NldOptions { sim: SimOptions::default(), explicit_chain: false }
    }
}

/// Classical trajectory read out of the embedded evolution.
#[derive(Debug, Clone, Serialize)]
pub struct NldTrajectory {
    pub times: Vec<f64>,
    /// `x(t)` in the original variables.
    pub xs: Vec<Vec<f64>>,
    /// `|sqrt(sigma_00) - x0|` at each sample: drift of the constant slot.
    pub x0_drift: Vec<f64>,
    /// `Tr sigma - 1` at each sample.
    pub norm_error: Vec<f64>,
    pub herald_probs: Vec<f64>,
    pub resources: ResourceReport,
    pub terms: NldTermReport,
    pub copy_model: CopyReport,
    /// Largest `(1 - x_{D+1})^{r+1}` seen, the size of the dropped series tail.
    pub taylor_tail: f64,
    #[serde(skip)]
    pub states: Vec<ComplexMatrix>,
}

impl NldTrajectory {
    /// CSV with columns `t, x_1..x_D` preceded by comment lines.
    pub fn to_csv(&self, provenance: &[String]) -> String {
        let mut w = crate::io::CsvWriter::new();
        for p in provenance {
            w.comment(p);
        }
        let d = self.xs.first().map(|x| x.len()).unwrap_or(0);
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=d).map(|i| format!("x_{i}")));
        w.header(&cols);
        for (t, x) in self.times.iter().zip(&self.xs) {
            let mut row = vec![*t];
            row.extend(x);
            w.row(&row);
        }
        w.finish()
    }
}

/// Advance one step of all product-formula factors from the buffer state.
fn nld_step(
    plan: &Plan,
    sys: &NldSystem,
    buf: &HistoryBuffer,
    sigma: ComplexMatrix,
    delta: f64,
    opts: &NldOptions,
    rng: &mut rand_chacha::ChaCha8Rng,
    stats: &mut (f64, usize, u64, u64),
) -> Result<ComplexMatrix> {
    let lags = sys.lags();
    let lagged: Vec<&ComplexMatrix> = lags.iter().map(|&a| buf.at_delay(a)).collect::<Result<_>>()?;
    let slots: Vec<&ComplexMatrix> = plan.slot_times.iter().map(|&j| lagged[j]).collect();
    let mode: &DmeMode = &opts.sim.mode;
    let mut state = sigma;
    for f in &plan.factors {
        match mode.kind {
            StepKind::Exact | StepKind::Eswap => {
                let g: C64 = f.xi.iter().zip(&slots).map(|(x, s)| trace(&(x * *s))).product();
                let kappa = f.c * g * delta;
                if kappa == ZERO {
                    continue;
                }
                state = dme_channel_exact_tracked(&f.rho, &state, kappa)?.0;
            }
            StepKind::Circuit => {
                let k0 = f.c * delta;
                mode.circuit.check_guard(k0)?;
                let mut ctrl = ControlQubit::for_coupling(k0);
                if mode.circuit.normalization == ControlNormalization::Strict {
                    ctrl = ctrl.normalized();
                }
                let updated = factor_control(f, &slots, &ctrl.density(), opts.explicit_chain)?;
                let k = cswap_heralded(&updated, &f.rho, &state, mode.circuit.use_explicit(state.nrows()))?;
                let p = trace(&k).re;
                let (_, attempts) = herald(p, mode.circuit.post_selection, Some(&mut *rng))?;
                stats.0 += p;
                stats.1 += 1;
                stats.2 += attempts as u64;
                stats.3 += 1 + slots.len() as u64;
                state = finish(k, false)?.0;
            }
        }
    }
    Ok(crate::tensor::hermitian_part(&state))
}

/// Solve the delay system on `[0, t_end]` from history `x(t)`, `t <= 0`.
pub fn solve_nld(
    sys: &NldSystem,
    history: impl Fn(f64) -> Vec<f64>,
    t_end: f64,
    delta: f64,
    opts: &NldOptions,
) -> Result<NldTrajectory> {
    sys.validate()?;
    for &a in &sys.delays {
        if delta > a / 10.0 {
            return Err(SbqsError::StepSize { value: delta, guard: a / 10.0 });
        }
    }
    let embed_err = std::cell::RefCell::new(None);
    let buf0 = HistoryBuffer::from_fn(delta, sys.max_delay(), |t| match embed(&history(t), sys) {
        Ok(e) => e.density(),
        Err(e) => {
            embed_err.borrow_mut().get_or_insert(e);
            identity(sys.dim + 2) / C64::new((sys.dim + 2) as f64, 0.0)
        }
    });
    if let Some(e) = embed_err.into_inner() {
        return Err(e);
    }
    let mut buf = buf0?;
    let n = (t_end / delta).round() as usize;
    if !(t_end >= 0.0) || ((n as f64) * delta - t_end).abs() > SNAP_TOLERANCE * delta {
        return Err(SbqsError::GridMismatch { delay: t_end, delta });
    }
    let plan = build_plan(sys)?;
    let mut rng = opts.sim.rng();
    let mut state = buf.latest().clone();
    let mut traj = NldTrajectory {
        times: Vec::new(),
        xs: Vec::new(),
        x0_drift: Vec::new(),
        norm_error: Vec::new(),
        herald_probs: Vec::new(),
        resources: ResourceReport::default(),
        terms: plan.report.clone(),
        copy_model: CopyReport::model(n, plan.report.terms, plan.report.copies),
        taylor_tail: 0.0,
        states: Vec::new(),
    };
    let r = sys.taylor_order as i32;
    let record = |traj: &mut NldTrajectory, t: f64, s: &ComplexMatrix| -> Result<()> {
        traj.times.push(t);
        traj.xs.push(readout(s, sys)?);
        traj.x0_drift.push((s[(0, 0)].re.max(0.0).sqrt() - sys.x0.abs()).abs());
        traj.norm_error.push((trace(s) - ONE).norm());
        let u = s[(sys.dim + 1, sys.dim + 1)].re.max(0.0).sqrt();
        traj.taylor_tail = traj.taylor_tail.max((1.0 - u).abs().powi(r + 1));
        traj.states.push(s.clone());
        Ok(())
    };
    record(&mut traj, 0.0, &state)?;
    let mut stats = (0.0, 0usize, 0u64, 0u64);
    for step in 1..=n {
        let before = (stats.0, stats.1);
        state = nld_step(&plan, sys, &buf, state, delta, opts, &mut rng, &mut stats)?;
        traj.resources.steps += 1;
        traj.resources.dme_applications += plan.factors.len() as u64;
        if stats.1 > before.1 {
            traj.herald_probs.push((stats.0 - before.0) / (stats.1 - before.1) as f64);
        }
        buf.push(state.clone());
        if opts.sim.records(step, n) {
            record(&mut traj, step as f64 * delta, &state)?;
        }
    }
    traj.resources.attempts = stats.2;
    traj.resources.copies = stats.3;
    Ok(traj)
}

/// `x' = (r - 1) x - r x^2`, written as `f_11 = (r - 1) - r x`.
pub fn logistic_system(r: f64, alpha: f64, x0: f64) -> NldSystem {
    NldSystem {
        dim: 1,
        delays: vec![],
        degrees: vec![2],
        coefficients: vec![
            NldCoefficient { m: 1, n: 1, exponents: vec![vec![0]], value: r - 1.0 },
            NldCoefficient { m: 1, n: 1, exponents: vec![vec![1]], value: -r },
        ],
        x0,
        alpha,
        taylor_order: 2,
    }
}

/// Logistic run with its resource summary.
#[derive(Debug, Clone, Serialize)]
pub struct LogisticReport {
    pub trajectory: NldTrajectory,
    /// Copies per estimate `C`.
    pub c: usize,
    /// Product-formula factors per step `R`.
    pub r: usize,
    pub steps: usize,
    /// `log10(n R C^n)`.
    pub copy_log10: f64,
    /// `(r - 1) / r`.
    pub fixed_point: f64,
}

pub fn logistic_report(
    r_param: f64,
    alpha: f64,
    x0: f64,
    x_init: f64,
    t_end: f64,
    delta: f64,
    opts: &NldOptions,
) -> Result<LogisticReport> {
    let sys = logistic_system(r_param, alpha, x0);
    let traj = solve_nld(&sys, |_| vec![x_init], t_end, delta, opts)?;
    Ok(LogisticReport {
        c: traj.terms.copies,
        r: traj.terms.terms,
        steps: traj.copy_model.steps,
        copy_log10: traj.copy_model.rerun_log10,
        fixed_point: (r_param - 1.0) / r_param,
        trajectory: traj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dme::DmeMode;
    use crate::oracle::{logistic_closed_form, rk4_delay, OdeProblem};
    use crate::tensor::mat_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embedding_examples() {
        let sys = logistic_system(2.0, 1.0, 0.5);
        let e = embed(&[0.0], &sys).unwrap();
        assert!((e.psi[2].re - 0.75f64.sqrt()).abs() < 1e-15);
        let e = embed(&[0.1], &sys).unwrap();
        assert!((e.psi[1].re - 0.1).abs() < 1e-15);
        assert!((e.psi[2].re - 0.74f64.sqrt()).abs() < 1e-15);
        assert!((readout(&e.density(), &sys).unwrap()[0] - 0.1).abs() < 1e-12);
        assert!(matches!(embed(&[0.9], &sys), Err(SbqsError::Scaling(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s2 = sys.clone();
        s2.dim = 3;
        s2.alpha = 0.4;
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let back = readout(&embed(&x, &s2).unwrap().density(), &s2).unwrap();
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn logistic_term_counts() {
        let sys = logistic_system(2.0, 1.0, 0.5);
        let f11 = build_fmn(&sys, 1, 1);
        let f20 = build_fmn(&sys, 2, 0);
        assert_eq!(f11.total_copies(), 3);
        assert_eq!(f11.state_terms().unwrap().len(), 5);
        assert_eq!(f20.state_terms().unwrap().len(), 30);
        let rep = term_report(&sys).unwrap();
        assert_eq!(rep.copies, 3);
        assert_eq!(rep.terms, 125);
    }

    #[test]
    fn constant_entry_recovers_value() {
        let sys = NldSystem {
            dim: 1,
            delays: vec![],
            degrees: vec![0],
            coefficients: vec![NldCoefficient { m: 1, n: 1, exponents: vec![vec![0]], value: 0.7 }],
            x0: 0.5,
            alpha: 1.0,
            taylor_order: 2,
        };
        let f = build_fmn(&sys, 1, 1);
        assert_eq!(f.monomials.len(), 1);
        assert!((f.monomials[0].coeff - 0.7 / 0.25).abs() < 1e-14);
        assert_eq!(f.monomials[0].factors[0], CopyFactor::Diagonal(0));
        let s = embed(&[0.3], &sys).unwrap().density();
        let n = f.total_copies();
        assert!((f.expectation(&[&s]) - C64::new(0.7, 0.0)).norm() < 1e-14);
        assert!(n >= 1);
        assert!(build_fmn(&sys, 1, 2).monomials.is_empty());
    }

    #[test]
    fn operator_expectation_matches_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let d = rng.gen_range(1..=2);
            let delays = if rng.gen_bool(0.5) { vec![0.5] } else { vec![] };
            let degrees: Vec<u32> = (0..=delays.len()).map(|_| rng.gen_range(0..=2)).collect();
            let coefficients = (0..4)
                .map(|_| NldCoefficient {
                    m: rng.gen_range(1..=d),
                    n: rng.gen_range(1..=d),
                    exponents: degrees.iter().map(|&l| (0..d).map(|_| rng.gen_range(0..=l)).collect()).collect(),
                    value: rng.gen_range(-1.0..1.0),
                })
                .collect();
            let sys = NldSystem { dim: d, delays, degrees, coefficients, x0: 0.5, alpha: 1.0, taylor_order: 2 };
            sys.validate().unwrap();
            let xs: Vec<Vec<f64>> =
                sys.lags().iter().map(|_| (0..d).map(|_| rng.gen_range(-0.4..0.4)).collect()).collect();
            let states: Vec<ComplexMatrix> = xs.iter().map(|x| embed(x, &sys).unwrap().density()).collect();
            let refs: Vec<&ComplexMatrix> = states.iter().collect();
            for m in 1..=d {
                for n in 1..=d {
                    let f = build_fmn(&sys, m, n);
                    let direct = sys.f_value(m, n, &xs);
                    assert!((f.expectation(&refs) - C64::new(direct, 0.0)).norm() < 1e-10);
                    // state expansion reproduces the operator
                    if f.total_copies() <= 3 {
                        let dense = f.matrix().unwrap();
                        let mut sum = ComplexMatrix::zeros(dense.nrows(), dense.ncols());
                        for t in f.state_terms().unwrap() {
                            let r: Vec<&ComplexMatrix> = t.states.iter().collect();
                            sum += kron_all(&r).unwrap() * t.weight;
                        }
                        assert!((sum - dense).norm() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_system_is_constant() {
        let sys = NldSystem {
            dim: 2,
            delays: vec![],
            degrees: vec![1],
            coefficients: vec![],
            x0: 0.5,
            alpha: 1.0,
            taylor_order: 2,
        };
        let tr = solve_nld(&sys, |_| vec![0.2, -0.1], 0.1, 1e-3, &NldOptions::default()).unwrap();
        let last = tr.xs.last().unwrap();
        assert!((last[0] - 0.2).abs() < 1e-14 && (last[1] + 0.1).abs() < 1e-14);
    }

    #[test]
    fn linear_system_matches_exponential() {
        let a = [[-0.5, 0.8], [-0.6, 0.1]];
        let mut coefficients = Vec::new();
        for m in 0..2 {
            for n in 0..2 {
                coefficients.push(NldCoefficient { m: m + 1, n: n + 1, exponents: vec![vec![0, 0]], value: a[m][n] });
            }
        }
        let sys = NldSystem { dim: 2, delays: vec![], degrees: vec![0], coefficients, x0: 0.5, alpha: 1.0, taylor_order: 3 };
        let x_init = [0.2, 0.1];
        let tr = solve_nld(&sys, |_| x_init.to_vec(), 1.0, 1e-3, &NldOptions::default()).unwrap();
        let am = ComplexMatrix::from_fn(2, 2, |i, j| C64::new(a[i][j], 0.0));
        let exact = mat_exp(&am, ONE).unwrap() * ComplexVector::from_vec(vec![C64::new(0.2, 0.0), C64::new(0.1, 0.0)]);
        let last = tr.xs.last().unwrap();
        for i in 0..2 {
            assert!((last[i] - exact[i].re).abs() < 2e-3, "{i}: {} vs {}", last[i], exact[i].re);
        }
        assert!(tr.norm_error.iter().all(|e| *e < 1e-9));
    }

    #[test]
    fn logistic_short_run() {
        let rep = logistic_report(2.0, 1.0, 0.5, 0.1, 0.5, 1e-3, &NldOptions::default()).unwrap();
        let x = rep.trajectory.xs.last().unwrap()[0];
        assert!((x - logistic_closed_form(2.0, 0.1, 0.5)).abs() < 2e-3, "{x}");
        assert_eq!((rep.c, rep.r), (3, 125));
    }

    #[test]
    fn fixed_point_is_stationary() {
        let rep = logistic_report(2.0, 1.0, 0.5, 0.5, 0.3, 1e-3, &NldOptions::default()).unwrap();
        let x = rep.trajectory.xs.last().unwrap()[0];
        assert!((x - 0.5).abs() < 1e-3, "{x}");
    }

    #[test]
    fn circuit_and_exact_modes_agree_per_step() {
        let sys = logistic_system(2.0, 1.0, 0.5);
        let mut errs = Vec::new();
        for delta in [1e-3, 5e-4] {
            let run = |mode: DmeMode| {
                let opts = NldOptions { sim: SimOptions::with_mode(mode), explicit_chain: false };
                solve_nld(&sys, |_| vec![0.2], delta, delta, &opts).unwrap()
            };
            let a = run(DmeMode::exact());
            let b = run(DmeMode::circuit());
            errs.push((a.states[1].clone() - b.states[1].clone()).norm());
        }
        let ratio = errs[0] / errs[1];
        assert!((3.0..5.0).contains(&ratio), "{errs:?}");
    }

    #[test]
    fn explicit_chain_on_a_tiny_system() {
        // constant rate and first-order series keep the copy space at 3^2
        let sys = NldSystem {
            dim: 1,
            delays: vec![],
            degrees: vec![0],
            coefficients: vec![NldCoefficient { m: 1, n: 1, exponents: vec![vec![0]], value: -0.5 }],
            x0: 0.5,
            alpha: 1.0,
            taylor_order: 1,
        };
        let run = |explicit: bool| {
            let opts = NldOptions { sim: SimOptions::with_mode(DmeMode::circuit()), explicit_chain: explicit };
            solve_nld(&sys, |_| vec![0.3], 5e-3, 1e-3, &opts).unwrap()
        };
        assert_eq!(term_report(&sys).unwrap().copies, 2);
        let a = run(true);
        let b = run(false);
        assert!((a.states.last().unwrap() - b.states.last().unwrap()).norm() < 1e-12);
    }

    #[test]
    fn delayed_equation_matches_rk4() {
        // x' = -x(t - 0.5) x(t) ... written as f_11 = -x(t - a)
        let sys = NldSystem {
            dim: 1,
            delays: vec![0.5],
            degrees: vec![0, 1],
            coefficients: vec![NldCoefficient { m: 1, n: 1, exponents: vec![vec![0], vec![1]], value: -1.0 }],
            x0: 0.5,
            alpha: 1.0,
            taylor_order: 2,
        };
        let tr = solve_nld(&sys, |_| vec![0.3], 1.0, 1e-3, &NldOptions::default()).unwrap();
        let p = OdeProblem {
            rhs: Box::new(|_, x, lag| vec![-lag[0][0] * x[0]]),
            delays: vec![0.5],
            history: Box::new(|_| vec![0.3]),
            dt: 1e-3,
        };
        let oracle = rk4_delay(&p, 1.0).unwrap();
        let x = tr.xs.last().unwrap()[0];
        assert!((x - oracle.values.last().unwrap()[0]).abs() < 2e-3, "{x}");
    }

    #[test]
    fn json_schema() {
        let sys = logistic_system(2.0, 1.0, 0.5);
        let v = serde_json::to_value(&sys).unwrap();
        assert_eq!(NldSystem::from_json(&v).unwrap(), sys);
        let mut bad = v.clone();
        bad["coefficients"][0]["exponents"] = serde_json::json!([[3]]);
        assert!(NldSystem::from_json(&bad).is_err());
    }
}
