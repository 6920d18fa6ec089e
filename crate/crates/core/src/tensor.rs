//! Dense complex linear algebra over tensor-product spaces.
//!
//! Subsystems are ordered with the leftmost factor most significant, so a
//! register with dims `[d0, d1]` stores `|i j>` at index `i * d1 + j`.

use std::env;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Result, SbqsError};

pub type C64 = Complex64;
pub type ComplexMatrix = DMatrix<C64>;
pub type ComplexVector = DVector<C64>;

/// Default cap on the dimension of any composite space.
pub const DEFAULT_MAX_DIM: usize = 1 << 20;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Largest composite dimension allowed, overridable through `SBQS_MAX_DIM`.
pub fn max_dim() -> usize {
    env::var("SBQS_MAX_DIM")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(DEFAULT_MAX_DIM)
}

/// Absolute tolerances for density checks and reconstructions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tolerances {
    pub tol_herm: f64,
    pub tol_trace: f64,
    pub tol_psd: f64,
    pub tol_recon: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            tol_herm: 1e-9,
            tol_trace: 1e-9,
            tol_psd: 1e-9,
            tol_recon: 1e-9,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        let all = [self.tol_herm, self.tol_trace, self.tol_psd, self.tol_recon];
        if all.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(SbqsError::Argument("tolerances must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn checked_product(dims: &[usize]) -> Result<usize> {
    let cap = max_dim();
    let mut total: usize = 1;
    for &d in dims {
        if d == 0 {
            return Err(SbqsError::Dimension("subsystem dimension must be positive".into()));
        }
        total = total
            .checked_mul(d)
            .filter(|&t| t <= cap)
            .ok_or_else(|| SbqsError::Dimension(format!("composite dimension exceeds cap {cap}")))?;
    }
    Ok(total)
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    let rows = checked_product(&[a.nrows().max(1), b.nrows().max(1)])?;
    let cols = checked_product(&[a.ncols().max(1), b.ncols().max(1)])?;
    if a.is_empty() || b.is_empty() {
        return Err(SbqsError::Dimension("kron of an empty matrix".into()));
    }
    debug_assert_eq!(rows, a.nrows() * b.nrows());
    let (br, bc) = b.shape();
    let mut out = ComplexMatrix::zeros(rows, cols);
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let aij = a[(i, j)];
            if aij == ZERO {
                continue;
            }
            let mut block = out.view_mut((i * br, j * bc), (br, bc));
            block.zip_apply(b, |o, bv| *o = aij * bv);
        }
    }
    Ok(out)
}

/// Kronecker product of a list of factors, left to right.
pub fn kron_all(factors: &[&ComplexMatrix]) -> Result<ComplexMatrix> {
    let (first, rest) = factors
        .split_first()
        .ok_or_else(|| SbqsError::Argument("kron_all needs at least one factor".into()))?;
    let mut acc = (*first).clone();
    for f in rest {
        acc = kron(&acc, f)?;
    }
    Ok(acc)
}

/// Dense square matrix together with its subsystem-dimension signature.
#[derive(Debug, Clone, PartialEq)]
pub struct QRegister {
    dims: Vec<usize>,
    state: ComplexMatrix,
}

impl QRegister {
    pub fn new(dims: Vec<usize>, state: ComplexMatrix) -> Result<Self> {
        if dims.is_empty() {
            return Err(SbqsError::Dimension("register needs at least one subsystem".into()));
        }
        let total = checked_product(&dims)?;
        if state.nrows() != total || state.ncols() != total {
            return Err(SbqsError::Dimension(format!(
                "state is {}x{} but dims {:?} require {total}x{total}",
                state.nrows(),
                state.ncols(),
                dims
            )));
        }
        Ok(QRegister { dims, state })
    }

    pub fn single(state: ComplexMatrix) -> Result<Self> {
        let d = state.nrows();
        QRegister::new(vec![d], state)
    }

    /// Product register `parts[0] ⊗ parts[1] ⊗ ...`.
    pub fn product(parts: &[&ComplexMatrix]) -> Result<Self> {
        let dims = parts.iter().map(|p| p.nrows()).collect();
        QRegister::new(dims, kron_all(parts)?)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.state.nrows()
    }

    pub fn state(&self) -> &ComplexMatrix {
        &self.state
    }

    pub fn into_state(self) -> ComplexMatrix {
        self.state
    }

    pub fn partial_trace(&self, keep: &[usize]) -> Result<QRegister> {
        partial_trace(self, keep)
    }

    /// Density checks on the whole register.
    pub fn check_density(&self, tol: &Tolerances) -> Result<DensityReport> {
        check_density(&self.state, tol)
    }
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Offsets of every multi-index over the chosen subsystems.
fn offsets(dims: &[usize], strides: &[usize], parties: &[usize]) -> Vec<usize> {
    let mut out = vec![0usize];
    for &p in parties {
        let mut next = Vec::with_capacity(out.len() * dims[p]);
        for &o in &out {
            for k in 0..dims[p] {
                next.push(o + k * strides[p]);
            }
        }
        out = next;
    }
    out
}

/// Trace out every subsystem not listed in `keep`.
///
/// Kept subsystems retain their original relative order.
pub fn partial_trace(reg: &QRegister, keep: &[usize]) -> Result<QRegister> {
    let dims = reg.dims();
    let mut kept: Vec<usize> = keep.to_vec();
    kept.sort_unstable();
    if kept.windows(2).any(|w| w[0] == w[1]) {
        return Err(SbqsError::Argument("duplicate subsystem index in keep".into()));
    }
    if let Some(&bad) = kept.iter().find(|&&k| k >= dims.len()) {
        return Err(SbqsError::Argument(format!(
            "subsystem index {bad} out of range for {} parties",
            dims.len()
        )));
    }
    if kept.is_empty() {
        return Err(SbqsError::Argument("keep must name at least one subsystem".into()));
    }
    let traced: Vec<usize> = (0..dims.len()).filter(|i| !kept.contains(i)).collect();
    let st = strides(dims);
    let ko = offsets(dims, &st, &kept);
    let to = offsets(dims, &st, &traced);
    let m = reg.state();
    let dk = ko.len();
    let mut out = ComplexMatrix::zeros(dk, dk);
    for b in 0..dk {
        for a in 0..dk {
            let mut acc = ZERO;
            for &t in &to {
                acc += m[(ko[a] + t, ko[b] + t)];
            }
            out[(a, b)] = acc;
        }
    }
    QRegister::new(kept.iter().map(|&k| dims[k]).collect(), out)
}

/// Convenience: trace out the first factor of a bipartite `d1 ⊗ d2` operator.
pub fn trace_first(m: &ComplexMatrix, d1: usize, d2: usize) -> Result<ComplexMatrix> {
    let reg = QRegister::new(vec![d1, d2], m.clone())?;
    Ok(partial_trace(&reg, &[1])?.into_state())
}

/// SWAP operator on `C^d ⊗ C^d`.
pub fn swap_operator(d: usize) -> Result<ComplexMatrix> {
    if d == 0 {
        return Err(SbqsError::Dimension("swap dimension must be positive".into()));
    }
    let n = checked_product(&[d, d])?;
    let mut s = ComplexMatrix::zeros(n, n);
    for i in 0..d {
        for j in 0..d {
            s[(j * d + i, i * d + j)] = ONE;
        }
    }
    Ok(s)
}

/// Permutation of basis indices that exchanges parties `a` and `b`.
pub fn party_swap_permutation(dims: &[usize], a: usize, b: usize) -> Result<Vec<usize>> {
    if a >= dims.len() || b >= dims.len() {
        return Err(SbqsError::Argument("party index out of range".into()));
    }
    if dims[a] != dims[b] {
        return Err(SbqsError::Dimension(format!(
            "cannot swap parties of dimension {} and {}",
            dims[a], dims[b]
        )));
    }
    let total = checked_product(dims)?;
    let st = strides(dims);
    let perm = (0..total)
        .map(|idx| {
            let da = (idx / st[a]) % dims[a];
            let db = (idx / st[b]) % dims[b];
            idx - da * st[a] - db * st[b] + db * st[a] + da * st[b]
        })
        .collect();
    Ok(perm)
}

/// Dense unitary exchanging parties `a` and `b` of a register.
pub fn party_swap_operator(dims: &[usize], a: usize, b: usize) -> Result<ComplexMatrix> {
    let perm = party_swap_permutation(dims, a, b)?;
    let n = perm.len();
    let mut s = ComplexMatrix::zeros(n, n);
    for (col, &row) in perm.iter().enumerate() {
        s[(row, col)] = ONE;
    }
    Ok(s)
}

/// Row-major vectorization: `|A>>` has entry `a_ij` at index `i * cols + j`.
pub fn vectorize(a: &ComplexMatrix) -> ComplexVector {
    let (r, c) = a.shape();
    ComplexVector::from_fn(r * c, |k, _| a[(k / c, k % c)])
}

/// Inverse of [`vectorize`] for square matrices.
pub fn devectorize(v: &ComplexVector) -> Result<ComplexMatrix> {
    let n = v.len();
    let d = (n as f64).sqrt().round() as usize;
    if d * d != n || n == 0 {
        return Err(SbqsError::Argument(format!(
            "vector of length {n} is not the vectorization of a square matrix"
        )));
    }
    Ok(ComplexMatrix::from_fn(d, d, |i, j| v[i * d + j]))
}

/// Hermitian part `(a + a†)/2`.
pub fn hermitian_part(a: &ComplexMatrix) -> ComplexMatrix {
    (a + a.adjoint()) * C64::new(0.5, 0.0)
}

pub fn commutator(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    a * b - b * a
}

pub fn trace(a: &ComplexMatrix) -> C64 {
    a.diagonal().sum()
}

/// Frobenius norm of `a - a†`.
pub fn hermiticity_error(a: &ComplexMatrix) -> f64 {
    (a - a.adjoint()).norm()
}

pub fn is_hermitian(a: &ComplexMatrix, tol: f64) -> bool {
    a.is_square() && hermiticity_error(a) <= tol
}

pub fn frobenius_distance(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    (a - b).norm()
}

pub fn all_finite(a: &ComplexMatrix) -> bool {
    a.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub fn identity(d: usize) -> ComplexMatrix {
    ComplexMatrix::identity(d, d)
}

/// Spectral decomposition of a Hermitian matrix with ascending eigenvalues.
///
/// The input is symmetrized first so tiny anti-Hermitian noise is ignored.
pub fn eigh(a: &ComplexMatrix) -> Result<(Vec<f64>, ComplexMatrix)> {
    if !a.is_square() {
        return Err(SbqsError::Dimension("eigh needs a square matrix".into()));
    }
    if !all_finite(a) {
        return Err(SbqsError::Numeric("eigh input has non-finite entries".into()));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok((Vec::new(), ComplexMatrix::zeros(0, 0)));
    }
    let eig = hermitian_part(a).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = ComplexMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

fn exp_hermitian(h: &ComplexMatrix, scale: C64) -> Result<ComplexMatrix> {
    let (w, v) = eigh(h)?;
    let mut scaled = v.clone();
    for (c, lam) in w.iter().enumerate() {
        let f = (scale * *lam).exp();
        for r in 0..scaled.nrows() {
            scaled[(r, c)] *= f;
        }
    }
    Ok(scaled * v.adjoint())
}

/// Matrix exponential `exp(scale * a)`.
///
/// Hermitian and skew-Hermitian inputs go through the spectral
/// decomposition, everything else through scaling and squaring with a
/// Padé approximant.
pub fn mat_exp(a: &ComplexMatrix, scale: C64) -> Result<ComplexMatrix> {
    if !a.is_square() {
        return Err(SbqsError::Dimension("mat_exp needs a square matrix".into()));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(ComplexMatrix::zeros(0, 0));
    }
    if !all_finite(a) || !(scale.re.is_finite() && scale.im.is_finite()) {
        return Err(SbqsError::Numeric("mat_exp input has non-finite entries".into()));
    }
    if scale == ZERO {
        return Ok(identity(n));
    }
    let norm = a.norm();
    let tol = 1e-13 * norm.max(1.0);
    let out = if hermiticity_error(a) <= tol {
        exp_hermitian(a, scale)?
    } else if (a + a.adjoint()).norm() <= tol {
        // a = iK with K Hermitian
        exp_hermitian(&(a * (-I)), scale * I)?
    } else {
        (a * scale).exp()
    };
    if !all_finite(&out) {
        return Err(SbqsError::Numeric(format!(
            "matrix exponential did not converge (|scale| = {:e}, ||a||_F = {:e})",
            scale.norm(),
            norm
        )));
    }
    Ok(out)
}

/// Summary of how far a matrix is from being a valid density matrix.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DensityReport {
    pub hermiticity: f64,
    pub trace_error: f64,
    pub min_eigenvalue: f64,
}

impl DensityReport {
    pub fn passes(&self, tol: &Tolerances) -> bool {
        self.hermiticity <= tol.tol_herm
            && self.trace_error <= tol.tol_trace
            && self.min_eigenvalue >= -tol.tol_psd
    }
}

pub fn density_report(m: &ComplexMatrix) -> Result<DensityReport> {
    if !m.is_square() || m.is_empty() {
        return Err(SbqsError::Dimension("density matrix must be square and non-empty".into()));
    }
    let (w, _) = eigh(m)?;
    Ok(DensityReport {
        hermiticity: hermiticity_error(m),
        trace_error: (trace(m) - ONE).norm(),
        min_eigenvalue: w[0],
    })
}

/// Hermiticity, unit trace and positivity within `tol`.
pub fn check_density(m: &ComplexMatrix, tol: &Tolerances) -> Result<DensityReport> {
    let rep = density_report(m)?;
    if !rep.passes(tol) {
        return Err(SbqsError::Density(format!(
            "hermiticity {:e}, trace error {:e}, min eigenvalue {:e}",
            rep.hermiticity, rep.trace_error, rep.min_eigenvalue
        )));
    }
    Ok(rep)
}

/// Divide by the trace; fails when the trace vanishes.
pub fn normalize_trace(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    let tr = trace(m);
    if tr.norm() < 1e-300 || !tr.re.is_finite() {
        return Err(SbqsError::Numeric(format!("cannot normalize, trace = {tr}")));
    }
    Ok(m / tr)
}

pub fn basis_ket(d: usize, i: usize) -> ComplexVector {
    let mut v = ComplexVector::zeros(d);
    v[i] = ONE;
    v
}

/// `(|m> + |n>)/sqrt 2`.
pub fn plus_ket(d: usize, m: usize, n: usize) -> ComplexVector {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut v = ComplexVector::zeros(d);
    v[m] += C64::new(s, 0.0);
    v[n] += C64::new(s, 0.0);
    v
}

/// `(|m> + i|n>)/sqrt 2`.
pub fn minus_ket(d: usize, m: usize, n: usize) -> ComplexVector {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut v = ComplexVector::zeros(d);
    v[m] += C64::new(s, 0.0);
    v[n] += C64::new(0.0, s);
    v
}

/// `|v><v|`.
pub fn projector(v: &ComplexVector) -> ComplexMatrix {
    v * v.adjoint()
}

pub fn pauli_x() -> ComplexMatrix {
    ComplexMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
}

pub fn pauli_y() -> ComplexMatrix {
    ComplexMatrix::from_row_slice(2, 2, &[ZERO, -I, I, ZERO])
}

pub fn pauli_z() -> ComplexMatrix {
    ComplexMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE])
}

/// Matrix with i.i.d. standard normal real and imaginary parts.
pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| C64::new(gauss(rng), gauss(rng)))
}

pub fn random_hermitian<R: Rng + ?Sized>(rng: &mut R, d: usize) -> ComplexMatrix {
    hermitian_part(&random_matrix(rng, d, d))
}

/// Haar-like random pure state.
pub fn random_ket<R: Rng + ?Sized>(rng: &mut R, d: usize) -> ComplexVector {
    let v = ComplexVector::from_fn(d, |_, _| C64::new(gauss(rng), gauss(rng)));
    let n = v.norm();
    v / C64::new(n, 0.0)
}

/// Random full-rank mixed state `G G† / Tr`.
pub fn random_density<R: Rng + ?Sized>(rng: &mut R, d: usize) -> ComplexMatrix {
    let g = random_matrix(rng, d, d);
    let m = &g * g.adjoint();
    let tr = trace(&m);
    m / tr
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    // Reference exponential by Taylor series with scaling and squaring,
    // independent of the spectral path.
    fn taylor_exp(a: &ComplexMatrix) -> ComplexMatrix {
        let n = a.nrows();
        let norm = a.norm();
        let mut sq = 0;
        let mut b = a.clone();
        while b.norm() > 0.25 {
            b /= c(2.0);
            sq += 1;
        }
        let mut term = identity(n);
        let mut sum = identity(n);
        for k in 1..40 {
            term = &term * &b / c(k as f64);
            sum += &term;
        }
        for _ in 0..sq {
            sum = &sum * &sum;
        }
        assert!(norm.is_finite());
        sum
    }

    #[test]
    fn kron_identities() {
        let i4 = kron(&identity(2), &identity(2)).unwrap();
        assert_eq!(i4, identity(4));
        let p0 = projector(&basis_ket(2, 0));
        let p1 = projector(&basis_ket(2, 1));
        let k = kron(&p0, &p1).unwrap();
        let mut expect = ComplexMatrix::zeros(4, 4);
        expect[(1, 1)] = ONE;
        assert_eq!(k, expect);
    }

    #[test]
    fn kron_matches_index_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 2, 3);
        let b = random_matrix(&mut rng, 3, 2);
        let k = kron(&a, &b).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for p in 0..3 {
                    for q in 0..2 {
                        assert_eq!(k[(i * 3 + p, j * 2 + q)], a[(i, j)] * b[(p, q)]);
                    }
                }
            }
        }
        let xx = kron(&pauli_x(), &pauli_x()).unwrap();
        for r in 0..4 {
            for col in 0..4 {
                let expect = if r + col == 3 { ONE } else { ZERO };
                assert_eq!(xx[(r, col)], expect);
            }
        }
    }

    #[test]
    fn kron_respects_dimension_cap() {
        let big = ComplexMatrix::zeros(1 << 11, 1);
        let err = kron(&big, &big).unwrap_err();
        assert!(matches!(err, SbqsError::Dimension(_)));
    }

    #[test]
    fn swap_identity_on_basis_example() {
        let rho = projector(&basis_ket(2, 0));
        let sigma = projector(&plus_ket(2, 0, 1));
        let x = kron(&rho, &sigma).unwrap();
        let s = swap_operator(2).unwrap();
        let out = trace_first(&(s * x), 2, 2).unwrap();
        let expect = &rho * &sigma;
        assert!(frobenius_distance(&out, &expect) < 1e-15);
        // |0><+| / sqrt 2
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[(0, 0)] - c(0.5)).norm() < 1e-15);
        assert!((out[(0, 1)] - c(0.5)).norm() < 1e-15);
        assert!((out[(0, 1)] - c(h * h)).norm() < 1e-15);
    }

    #[test]
    fn partial_trace_product_factorizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = random_density(&mut rng, 3);
        let sigma = random_matrix(&mut rng, 2, 2);
        let reg = QRegister::product(&[&rho, &sigma]).unwrap();
        let out = reg.partial_trace(&[0]).unwrap();
        assert!(frobenius_distance(out.state(), &(&rho * trace(&sigma))) < 1e-12);
    }

    #[test]
    fn partial_trace_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_density(&mut rng, 12);
        let reg = QRegister::new(vec![2, 3, 2], m.clone()).unwrap();
        let out = reg.partial_trace(&[0, 2]).unwrap();
        assert_eq!(out.dims(), &[2, 2]);
        for a0 in 0..2 {
            for a2 in 0..2 {
                for b0 in 0..2 {
                    for b2 in 0..2 {
                        let mut acc = ZERO;
                        for k in 0..3 {
                            acc += m[(a0 * 6 + k * 2 + a2, b0 * 6 + k * 2 + b2)];
                        }
                        let got = out.state()[(a0 * 2 + a2, b0 * 2 + b2)];
                        assert!((got - acc).norm() < 1e-14);
                    }
                }
            }
        }
        assert!((trace(out.state()) - trace(&m)).norm() < 1e-13);
        let middle = reg.partial_trace(&[1]).unwrap();
        assert!((trace(middle.state()) - ONE).norm() < 1e-13);
    }

    #[test]
    fn partial_trace_rejects_bad_index() {
        let reg = QRegister::product(&[&identity(2), &identity(2)]).unwrap();
        assert!(matches!(reg.partial_trace(&[2]), Err(SbqsError::Argument(_))));
        assert!(matches!(reg.partial_trace(&[0, 0]), Err(SbqsError::Argument(_))));
    }

    #[test]
    fn swap_properties() {
        let s2 = swap_operator(2).unwrap();
        let expect = ComplexMatrix::from_row_slice(
            4,
            4,
            &[
                ONE, ZERO, ZERO, ZERO, ZERO, ZERO, ONE, ZERO, ZERO, ONE, ZERO, ZERO, ZERO, ZERO,
                ZERO, ONE,
            ],
        );
        assert_eq!(s2, expect);
        let s3 = swap_operator(3).unwrap();
        assert_eq!(&s3 * &s3, identity(9));
        assert_eq!(s3.adjoint(), s3);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 3, 3);
        let b = random_matrix(&mut rng, 3, 3);
        let lhs = trace(&(&s3 * kron(&a, &b).unwrap()));
        let rhs = trace(&(&a * &b));
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn party_swap_matches_bipartite_swap() {
        assert_eq!(party_swap_operator(&[3, 3], 0, 1).unwrap(), swap_operator(3).unwrap());
        let p = party_swap_operator(&[2, 3, 2], 0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 2, 2);
        let b = random_matrix(&mut rng, 3, 3);
        let cc = random_matrix(&mut rng, 2, 2);
        let lhs = &p * kron_all(&[&a, &b, &cc]).unwrap() * p.adjoint();
        let rhs = kron_all(&[&cc, &b, &a]).unwrap();
        assert!(frobenius_distance(&lhs, &rhs) < 1e-13);
    }

    #[test]
    fn vectorization_identities() {
        let plus = projector(&plus_ket(2, 0, 1));
        let v = vectorize(&plus);
        for k in 0..4 {
            assert!((v[k] - c(0.5)).norm() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_matrix(&mut rng, 2, 2);
        let b = random_matrix(&mut rng, 2, 2);
        let cm = random_matrix(&mut rng, 2, 2);
        assert_eq!(devectorize(&vectorize(&a)).unwrap(), a);
        let lhs = kron(&a, &cm.transpose()).unwrap() * vectorize(&b);
        let rhs = vectorize(&(&a * &b * &cm));
        assert!((lhs - rhs).norm() < 1e-13);
        assert!(devectorize(&ComplexVector::zeros(3)).is_err());
    }

    #[test]
    fn exp_basic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_matrix(&mut rng, 3, 3);
        assert_eq!(mat_exp(&a, ZERO).unwrap(), identity(3));
        let e = mat_exp(&pauli_x(), C64::new(0.0, -std::f64::consts::FRAC_PI_2)).unwrap();
        assert!(frobenius_distance(&e, &(pauli_x() * (-I))) < 1e-14);
    }

    #[test]
    fn exp_hermitian_matches_taylor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for d in [2, 4, 8, 16] {
            let h = random_hermitian(&mut rng, d);
            let scale = C64::new(0.0, -0.7);
            let got = mat_exp(&h, scale).unwrap();
            let expect = taylor_exp(&(&h * scale));
            assert!(frobenius_distance(&got, &expect) < 1e-10, "d={d}");
            let u = &got * got.adjoint();
            assert!(frobenius_distance(&u, &identity(d)) < 1e-12);
        }
    }

    #[test]
    fn exp_general_matches_eigendecomposition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for d in [2, 4, 8, 16] {
            let v = random_matrix(&mut rng, d, d) + identity(d) * c(2.0);
            let vinv = v.clone().try_inverse().unwrap();
            let diag: Vec<C64> = (0..d)
                .map(|k| C64::new(0.3 * k as f64 - 1.0, 0.5 - 0.1 * k as f64))
                .collect();
            let dm = ComplexMatrix::from_diagonal(&ComplexVector::from_vec(diag.clone()));
            let a = &v * &dm * &vinv;
            let got = mat_exp(&a, ONE).unwrap();
            let ed = ComplexMatrix::from_diagonal(&ComplexVector::from_vec(
                diag.iter().map(|z| z.exp()).collect(),
            ));
            let expect = &v * ed * &vinv;
            let rel = frobenius_distance(&got, &expect) / expect.norm().max(1.0);
            assert!(rel < 1e-10, "d={d} rel={rel}");
        }
    }

    #[test]
    fn exp_skew_hermitian_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let h = random_hermitian(&mut rng, 4);
        let a = &h * I;
        let got = mat_exp(&a, c(0.9)).unwrap();
        let expect = taylor_exp(&(&a * c(0.9)));
        assert!(frobenius_distance(&got, &expect) < 1e-10);
    }

    #[test]
    fn density_checks() {
        let tol = Tolerances::default();
        let rho = projector(&plus_ket(2, 0, 1));
        assert!(check_density(&rho, &tol).is_ok());
        assert!(check_density(&pauli_z(), &tol).is_err());
        assert!(check_density(&(identity(2) * c(0.6)), &tol).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        assert!(check_density(&random_density(&mut rng, 5), &tol).is_ok());
    }
}
