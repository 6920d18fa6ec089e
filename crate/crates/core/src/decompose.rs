//! Expansions of operators as weighted sums of density matrices.
//!
//! Every routine returns a [`StateDecomposition`]: a list of complex
//! weights on valid density matrices plus a multiple of the identity that
//! only contributes a global phase (or, for non-Hermitian generators, a
//! norm factor tracked separately).

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Result, SbqsError};
use crate::io::{vector_from_json, vector_to_json, DenseMatrix, JsonComplex};
use crate::tensor::{
    basis_ket, check_density, eigh, identity, is_hermitian, minus_ket, plus_ket, projector,
    trace, ComplexMatrix, ComplexVector, Tolerances, C64, I, ONE, ZERO,
};

/// A resource density matrix, kept as a ket when it is pure.
#[derive(Debug, Clone, PartialEq)]
pub enum ResourceState {
    Pure(ComplexVector),
    Mixed(ComplexMatrix),
}

impl ResourceState {
    pub fn dim(&self) -> usize {
        match self {
            ResourceState::Pure(v) => v.len(),
            ResourceState::Mixed(m) => m.nrows(),
        }
    }

    pub fn matrix(&self) -> Cow<'_, ComplexMatrix> {
        match self {
            ResourceState::Pure(v) => Cow::Owned(projector(v)),
            ResourceState::Mixed(m) => Cow::Borrowed(m),
        }
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        match self {
            ResourceState::Pure(v) => projector(&v),
            ResourceState::Mixed(m) => m,
        }
    }

    /// `Tr[rho A]`.
    pub fn expectation(&self, a: &ComplexMatrix) -> C64 {
        match self {
            ResourceState::Pure(v) => (v.adjoint() * a * v)[(0, 0)],
            ResourceState::Mixed(m) => {
                let mut acc = ZERO;
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        acc += m[(i, j)] * a[(j, i)];
                    }
                }
                acc
            }
        }
    }

    /// `rho * a`.
    pub fn left_mul(&self, a: &ComplexMatrix) -> ComplexMatrix {
        match self {
            ResourceState::Pure(v) => v * (v.adjoint() * a),
            ResourceState::Mixed(m) => m * a,
        }
    }

    /// `a * rho`.
    pub fn right_mul(&self, a: &ComplexMatrix) -> ComplexMatrix {
        match self {
            ResourceState::Pure(v) => (a * v) * v.adjoint(),
            ResourceState::Mixed(m) => a * m,
        }
    }

    pub fn add_scaled_to(&self, target: &mut ComplexMatrix, w: C64) {
        match self {
            ResourceState::Pure(v) => {
                for j in 0..v.len() {
                    let cj = w * v[j].conj();
                    if cj == ZERO {
                        continue;
                    }
                    for i in 0..v.len() {
                        target[(i, j)] += v[i] * cj;
                    }
                }
            }
            ResourceState::Mixed(m) => *target += m * w,
        }
    }

    pub fn is_pure_ket(&self) -> bool {
        matches!(self, ResourceState::Pure(_))
    }

    /// Density checks; pure kets only need unit norm.
    pub fn validate(&self, tol: &Tolerances) -> Result<()> {
        match self {
            ResourceState::Pure(v) => {
                let n = v.norm_squared();
                if (n - 1.0).abs() > tol.tol_trace || !n.is_finite() {
                    return Err(SbqsError::Density(format!("ket norm^2 = {n}")));
                }
                Ok(())
            }
            ResourceState::Mixed(m) => check_density(m, tol).map(|_| ()),
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            ResourceState::Pure(v) => json!({ "ket": vector_to_json(v) }),
            ResourceState::Mixed(m) => json!({ "matrix": DenseMatrix::from_matrix(m) }),
        }
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        if let Some(k) = v.get("ket") {
            let pairs: Vec<[f64; 2]> = serde_json::from_value(k.clone())
                .map_err(|e| SbqsError::Argument(format!("ket: {e}")))?;
            return Ok(ResourceState::Pure(vector_from_json(&pairs)));
        }
        if let Some(m) = v.get("matrix") {
            let dm: DenseMatrix = serde_json::from_value(m.clone())
                .map_err(|e| SbqsError::Argument(format!("matrix: {e}")))?;
            return Ok(ResourceState::Mixed(dm.to_square(None)?));
        }
        Err(SbqsError::Argument("resource state needs `ket` or `matrix`".into()))
    }
}

impl From<ComplexMatrix> for ResourceState {
    fn from(m: ComplexMatrix) -> Self {
        ResourceState::Mixed(m)
    }
}

/// Provenance of a decomposition term, used for merging and reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TermLabel {
    Basis(usize),
    Plus(usize, usize),
    Minus(usize, usize),
    SupportPositive,
    SupportNegative,
    Shifted,
    Coherent { re: f64, im: f64 },
    Product(Vec<TermLabel>),
    Custom(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateTerm {
    pub weight: C64,
    pub state: ResourceState,
    pub label: TermLabel,
}

/// `H = sum_j h_j rho_j + identity_offset * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDecomposition {
    pub terms: Vec<StateTerm>,
    pub identity_offset: C64,
    pub dim: usize,
}

impl StateDecomposition {
    pub fn empty(dim: usize) -> Self {
        StateDecomposition { terms: Vec::new(), identity_offset: ZERO, dim }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// `sum_j |h_j|`, the quantity that sets the Trotter step count.
    pub fn weight_norm(&self) -> f64 {
        self.terms.iter().map(|t| t.weight.norm()).sum()
    }

    pub fn is_hermitian_weights(&self) -> bool {
        self.terms.iter().all(|t| t.weight.im == 0.0)
    }

    pub fn reconstruct(&self) -> ComplexMatrix {
        reconstruct(self)
    }

    /// Multiply every weight and the offset by `s`.
    pub fn scaled(&self, s: C64) -> Self {
        StateDecomposition {
            terms: self
                .terms
                .iter()
                .map(|t| StateTerm { weight: t.weight * s, state: t.state.clone(), label: t.label.clone() })
                .collect(),
            identity_offset: self.identity_offset * s,
            dim: self.dim,
        }
    }

    /// Concatenate two decompositions on the same space, merging equal labels.
    pub fn merged_with(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(SbqsError::Dimension(format!(
                "cannot merge decompositions of dim {} and {}",
                self.dim, other.dim
            )));
        }
        let mut out = self.clone();
        for t in &other.terms {
            match out.terms.iter_mut().find(|o| o.label == t.label && o.state == t.state) {
                Some(o) => o.weight += t.weight,
                None => out.terms.push(t.clone()),
            }
        }
        out.identity_offset += other.identity_offset;
        Ok(out)
    }

    /// Drop terms whose weight is below `rel` times the largest weight.
    pub fn pruned(mut self, abs_tol: f64) -> Self {
        self.terms.retain(|t| t.weight.norm() > abs_tol);
        self
    }

    pub fn validate(&self, tol: &Tolerances) -> Result<()> {
        for (k, t) in self.terms.iter().enumerate() {
            if t.state.dim() != self.dim {
                return Err(SbqsError::Dimension(format!(
                    "term {k} has dim {}, decomposition has {}",
                    t.state.dim(),
                    self.dim
                )));
            }
            if !(t.weight.re.is_finite() && t.weight.im.is_finite()) {
                return Err(SbqsError::Argument(format!("term {k} weight is not finite")));
            }
            t.state.validate(tol).map_err(|e| SbqsError::Density(format!("term {k}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "dim": self.dim,
            "identity_offset": JsonComplex::from(self.identity_offset),
            "terms": self.terms.iter().map(|t| json!({
                "weight": JsonComplex::from(t.weight),
                "label": t.label,
                "state": t.state.to_json(),
            })).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let dim = v
            .get("dim")
            .and_then(Value::as_u64)
            .ok_or_else(|| SbqsError::Argument("decomposition needs `dim`".into()))? as usize;
        let offset: JsonComplex = match v.get("identity_offset") {
            Some(o) => serde_json::from_value(o.clone())
                .map_err(|e| SbqsError::Argument(format!("identity_offset: {e}")))?,
            None => JsonComplex([0.0, 0.0]),
        };
        let mut terms = Vec::new();
        for (k, t) in v.get("terms").and_then(Value::as_array).into_iter().flatten().enumerate() {
            let w: JsonComplex = serde_json::from_value(t.get("weight").cloned().unwrap_or(Value::Null))
                .map_err(|e| SbqsError::Argument(format!("terms[{k}].weight: {e}")))?;
            let label = match t.get("label") {
                Some(l) => serde_json::from_value(l.clone())
                    .map_err(|e| SbqsError::Argument(format!("terms[{k}].label: {e}")))?,
                None => TermLabel::Custom(format!("t{k}")),
            };
            let state = ResourceState::from_json(t.get("state").unwrap_or(&Value::Null))?;
            terms.push(StateTerm { weight: w.into(), state, label });
        }
        let d = StateDecomposition { terms, identity_offset: offset.into(), dim };
        d.validate(&Tolerances::default())?;
        Ok(d)
    }
}

/// `sum_j h_j rho_j + identity_offset * I`.
pub fn reconstruct(d: &StateDecomposition) -> ComplexMatrix {
    let mut out = identity(d.dim) * d.identity_offset;
    for t in &d.terms {
        t.state.add_scaled_to(&mut out, t.weight);
    }
    out
}

fn require_square(h: &ComplexMatrix) -> Result<usize> {
    if !h.is_square() || h.is_empty() {
        return Err(SbqsError::Dimension(format!(
            "expected a non-empty square matrix, got {}x{}",
            h.nrows(),
            h.ncols()
        )));
    }
    Ok(h.nrows())
}

fn require_hermitian(h: &ComplexMatrix, tol: &Tolerances) -> Result<usize> {
    let d = require_square(h)?;
    if !is_hermitian(h, tol.tol_herm) {
        return Err(SbqsError::Argument("operator is not Hermitian".into()));
    }
    Ok(d)
}

/// Relative threshold below which a weight counts as zero.
const PRUNE_REL: f64 = 1e-14;

/// Polarization expansion of an arbitrary square matrix.
///
/// Uses `|m><n| = P+ + iP- - (1+i)/2 (|m><m| + |n><n|)` with
/// `|+> = (|m>+|n>)/sqrt 2` and `|-> = (|m>+i|n>)/sqrt 2`. Terms are emitted in
/// row-major pair order with each diagonal projector at its `(m, m)` slot.
/// When every diagonal weight is equal the diagonal collapses into the
/// identity offset.
pub fn polarization_general(m: &ComplexMatrix) -> Result<StateDecomposition> {
    let d = require_square(m)?;
    let scale = m.norm().max(f64::MIN_POSITIVE);
    let thr = PRUNE_REL * scale;
    let mut diag: Vec<C64> = (0..d).map(|k| m[(k, k)]).collect();
    let half = C64::new(0.5, 0.0);
    let mut pairs: Vec<(usize, usize, C64, C64)> = Vec::new();
    for a in 0..d {
        for b in (a + 1)..d {
            let x = m[(a, b)];
            let y = m[(b, a)];
            if x == ZERO && y == ZERO {
                continue;
            }
            let wd = -((ONE + I) * x + (ONE - I) * y) * half;
            diag[a] += wd;
            diag[b] += wd;
            pairs.push((a, b, x + y, I * (x - y)));
        }
    }
    let mut out = StateDecomposition::empty(d);
    let uniform = d >= 2 && diag.iter().all(|w| (*w - diag[0]).norm() <= thr);
    if uniform {
        out.identity_offset = diag[0];
    }
    let mut p = pairs.iter().peekable();
    for a in 0..d {
        if !uniform && diag[a].norm() > thr {
            out.terms.push(StateTerm {
                weight: diag[a],
                state: ResourceState::Pure(basis_ket(d, a)),
                label: TermLabel::Basis(a),
            });
        }
        while let Some(&&(pa, pb, wp, wm)) = p.peek() {
            if pa != a {
                break;
            }
            if wp.norm() > thr {
                out.terms.push(StateTerm {
                    weight: wp,
                    state: ResourceState::Pure(plus_ket(d, pa, pb)),
                    label: TermLabel::Plus(pa, pb),
                });
            }
            if wm.norm() > thr {
                out.terms.push(StateTerm {
                    weight: wm,
                    state: ResourceState::Pure(minus_ket(d, pa, pb)),
                    label: TermLabel::Minus(pa, pb),
                });
            }
            p.next();
        }
    }
    if d == 1 {
        out.identity_offset = m[(0, 0)];
        out.terms.clear();
    }
    Ok(out)
}

/// Polarization decomposition of a Hermitian operator; all weights are real.
pub fn polarization_decompose(h: &ComplexMatrix, tol: &Tolerances) -> Result<StateDecomposition> {
    require_hermitian(h, tol)?;
    let mut out = polarization_general(h)?;
    for t in &mut out.terms {
        t.weight = C64::new(t.weight.re, 0.0);
    }
    out.identity_offset = C64::new(out.identity_offset.re, 0.0);
    Ok(out)
}

/// `H = Tr[H+] rho+ - Tr[H-] rho-` from the spectral split.
pub fn support_split_decompose(h: &ComplexMatrix, tol: &Tolerances) -> Result<StateDecomposition> {
    let d = require_hermitian(h, tol)?;
    let (w, v) = eigh(h)?;
    let thr = PRUNE_REL * h.norm().max(f64::MIN_POSITIVE) * d as f64;
    let mut pos = ComplexMatrix::zeros(d, d);
    let mut neg = ComplexMatrix::zeros(d, d);
    for (k, &lam) in w.iter().enumerate() {
        if lam.abs() <= thr {
            continue;
        }
        let col = v.column(k).into_owned();
        let p = projector(&col);
        if lam > 0.0 {
            pos += p * C64::new(lam, 0.0);
        } else {
            neg += p * C64::new(-lam, 0.0);
        }
    }
    let mut out = StateDecomposition::empty(d);
    for (m, sign, label) in [
        (pos, 1.0, TermLabel::SupportPositive),
        (neg, -1.0, TermLabel::SupportNegative),
    ] {
        let tr = trace(&m).re;
        if tr > thr {
            let rho = crate::tensor::hermitian_part(&(m / C64::new(tr, 0.0)));
            out.terms.push(StateTerm {
                weight: C64::new(sign * tr, 0.0),
                state: ResourceState::Mixed(rho),
                label,
            });
        }
    }
    Ok(out)
}

/// `H = (Tr H + d s) rho_H - s I` with `s = max(0, -lambda_min) + margin`.
pub fn shift_normalize_decompose(
    h: &ComplexMatrix,
    margin: f64,
    tol: &Tolerances,
) -> Result<StateDecomposition> {
    let d = require_hermitian(h, tol)?;
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(SbqsError::Argument("margin must be finite and >= 0".into()));
    }
    let (w, _) = eigh(h)?;
    let s = (-w[0]).max(0.0) + margin;
    let shifted = crate::tensor::hermitian_part(h) + identity(d) * C64::new(s, 0.0);
    let weight = trace(&shifted).re;
    let mut out = StateDecomposition::empty(d);
    let thr = PRUNE_REL * h.norm().max(f64::MIN_POSITIVE) * d as f64;
    if weight <= thr {
        // H is a multiple of the identity sitting at its own minimum
        out.identity_offset = C64::new(trace(h).re / d as f64, 0.0);
        return Ok(out);
    }
    let rho = shifted / C64::new(weight, 0.0);
    out.terms.push(StateTerm {
        weight: C64::new(weight, 0.0),
        state: ResourceState::Mixed(rho),
        label: TermLabel::Shifted,
    });
    out.identity_offset = C64::new(-s, 0.0);
    Ok(out)
}

/// Square lattice of coherent amplitudes clipped to a disc.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherentGrid {
    pub delta: f64,
    pub cutoff: f64,
    pub n_max: usize,
}

impl CoherentGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(SbqsError::Argument("grid spacing must be positive".into()));
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(SbqsError::Argument("grid cutoff must be positive".into()));
        }
        if self.n_max < 2 {
            return Err(SbqsError::Argument("n_max must be at least 2".into()));
        }
        Ok(())
    }

    /// Lattice points `(j + ik) delta` with `|alpha| <= cutoff`.
    pub fn points(&self) -> Vec<C64> {
        let k = (self.cutoff / self.delta).floor() as i64;
        let mut pts = Vec::new();
        for a in -k..=k {
            for b in -k..=k {
                let z = C64::new(a as f64 * self.delta, b as f64 * self.delta);
                if z.norm() <= self.cutoff * (1.0 + 1e-12) {
                    pts.push(z);
                }
            }
        }
        pts
    }

    /// Weight `delta^2 / pi` of one lattice cell.
    pub fn cell_weight(&self) -> f64 {
        self.delta * self.delta / std::f64::consts::PI
    }

    /// Norm squared retained by a truncated coherent state at the cutoff.
    pub fn retained_norm(&self) -> f64 {
        truncated_coherent_norm(self.cutoff, self.n_max)
    }

    /// Number of low Fock levels `k` for which the disc `|alpha| <= cutoff`
    /// holds all but 1e-3 of the P-weight `|alpha|^{2k} e^{-|alpha|^2} / k!`.
    /// Only this block is faithfully resolved by the grid.
    pub fn trusted_levels(&self) -> usize {
        let x = self.cutoff * self.cutoff;
        let mut term = (-x).exp();
        let mut cdf = 0.0;
        let mut k = 0;
        while k < self.n_max {
            cdf += term;
            if cdf > 1e-3 {
                break;
            }
            k += 1;
            term *= x / k as f64;
        }
        k.max(1)
    }

    pub fn check_truncation(&self) -> Result<()> {
        let kept = self.retained_norm();
        if kept < 1.0 - 1e-6 {
            return Err(SbqsError::Truncation(format!(
                "n_max = {} loses {:.3e} of the norm at |alpha| = {}",
                self.n_max,
                1.0 - kept,
                self.cutoff
            )));
        }
        Ok(())
    }
}

/// `sum_{k < n_max} e^{-r^2} r^{2k} / k!`.
pub fn truncated_coherent_norm(r: f64, n_max: usize) -> f64 {
    let x = r * r;
    let mut term = (-x).exp();
    let mut sum = 0.0;
    for k in 0..n_max {
        sum += term;
        term *= x / (k + 1) as f64;
    }
    sum
}

/// Coherent state `|alpha>` truncated to `n_max` Fock levels and renormalized.
pub fn coherent_ket(alpha: C64, n_max: usize) -> ComplexVector {
    let mut v = ComplexVector::zeros(n_max);
    let mut amp = ONE;
    for k in 0..n_max {
        v[k] = amp;
        amp = amp * alpha / C64::new(((k + 1) as f64).sqrt(), 0.0);
    }
    let n = v.norm();
    v / C64::new(n, 0.0)
}

/// One antinormally ordered monomial `coeff * a^m (a†)^n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AntinormalMonomial {
    pub m: u32,
    pub n: u32,
    pub coeff: JsonComplex,
}

/// Annihilation operator on `d` Fock levels.
pub fn annihilation(d: usize) -> ComplexMatrix {
    let mut a = ComplexMatrix::zeros(d, d);
    for k in 1..d {
        a[(k - 1, k)] = C64::new((k as f64).sqrt(), 0.0);
    }
    a
}

/// `sum J a^m (a†)^n` on the first `n_max` levels, computed without
/// truncation artifacts by working in a padded space.
pub fn antinormal_operator(poly: &[AntinormalMonomial], n_max: usize) -> ComplexMatrix {
    let pad = poly.iter().map(|p| p.n.max(p.m) as usize).max().unwrap_or(0);
    let big = n_max + pad + 1;
    let a = annihilation(big);
    let ad = a.adjoint();
    let mut out = ComplexMatrix::zeros(big, big);
    for p in poly {
        let mut op = identity(big);
        for _ in 0..p.m {
            op = &op * &a;
        }
        for _ in 0..p.n {
            op = &op * &ad;
        }
        out += op * C64::from(p.coeff);
    }
    out.view((0, 0), (n_max, n_max)).into_owned()
}

/// Result of a coherent-grid expansion and its reconstruction error.
#[derive(Debug, Clone)]
pub struct CoherentDecomposition {
    pub decomposition: StateDecomposition,
    /// Frobenius distance between the grid sum and the truncated operator.
    pub reconstruction_error: f64,
    /// Fock levels whose coherent support lies inside the disc.
    pub trusted_levels: usize,
    /// Frobenius distance restricted to the trusted block.
    pub block_error: f64,
}

fn block_distance(a: &ComplexMatrix, b: &ComplexMatrix, n: usize) -> f64 {
    (a.view((0, 0), (n, n)) - b.view((0, 0), (n, n))).norm()
}

/// Discretized P-representation `(delta^2/pi) sum_k J alpha_k^m conj(alpha_k)^n |alpha_k><alpha_k|`.
pub fn coherent_grid_decompose(
    poly: &[AntinormalMonomial],
    grid: &CoherentGrid,
) -> Result<CoherentDecomposition> {
    grid.validate()?;
    grid.check_truncation()?;
    let d = grid.n_max;
    let mut out = StateDecomposition::empty(d);
    let target = antinormal_operator(poly, d);
    if poly.iter().all(|p| C64::from(p.coeff) == ZERO) {
        let n = grid.trusted_levels();
        return Ok(CoherentDecomposition {
            decomposition: out,
            reconstruction_error: target.norm(),
            trusted_levels: n,
            block_error: block_distance(&target, &ComplexMatrix::zeros(d, d), n),
        });
    }
    let cell = grid.cell_weight();
    for alpha in grid.points() {
        let mut w = ZERO;
        for p in poly {
            w += C64::from(p.coeff) * alpha.powu(p.m) * alpha.conj().powu(p.n);
        }
        w *= cell;
        if w == ZERO {
            continue;
        }
        out.terms.push(StateTerm {
            weight: w,
            state: ResourceState::Pure(coherent_ket(alpha, d)),
            label: TermLabel::Coherent { re: alpha.re, im: alpha.im },
        });
    }
    let rec = reconstruct(&out);
    let n = grid.trusted_levels();
    Ok(CoherentDecomposition {
        reconstruction_error: (&rec - &target).norm(),
        trusted_levels: n,
        block_error: block_distance(&rec, &target, n),
        decomposition: out,
    })
}

/// Which constructor to use; polarization is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionMethod {
    #[default]
    Polarization,
    SupportSplit,
    ShiftNormalize,
}

pub fn decompose(
    h: &ComplexMatrix,
    method: DecompositionMethod,
    tol: &Tolerances,
) -> Result<StateDecomposition> {
    match method {
        DecompositionMethod::Polarization => polarization_decompose(h, tol),
        DecompositionMethod::SupportSplit => support_split_decompose(h, tol),
        DecompositionMethod::ShiftNormalize => shift_normalize_decompose(h, 0.0, tol),
    }
}
