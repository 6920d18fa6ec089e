//! Two-mode parametric amplifier `H = g a_s† a_i† + g* a_s a_i` on a
//! discretized pair of coherent-state grids.
//!
//! Each grid pair gives the product state `|alpha><alpha| ⊗ |beta><beta|` with
//! weight `(Delta^4 / pi^2) (g conj(alpha beta) + conj(g) alpha beta)`, so every
//! term is a Hermitian contribution driven by one product resource.

use serde::{Deserialize, Serialize};

use crate::decompose::{annihilation, coherent_ket, CoherentGrid, ResourceState, StateDecomposition, StateTerm, TermLabel};
use crate::error::{Result, SbqsError};
use crate::evolve::{simulate_linear, ResourceReport, SimOptions, TrotterPlan};
use crate::io::JsonComplex;
use crate::tensor::{basis_ket, kron, mat_exp, projector, ComplexMatrix, ComplexVector, C64, I};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplifierConfig {
    pub g: JsonComplex,
    pub grid: CoherentGrid,
    /// Total evolution time.
    pub t: f64,
    #[serde(default = "one_step")]
    pub steps: usize,
}

fn one_step() -> usize {
    1
}

impl AmplifierConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.grid.check_truncation()?;
        if !(self.t.is_finite() && self.t > 0.0) || self.steps == 0 {
            return Err(SbqsError::Argument("t must be positive and steps >= 1".into()));
        }
        let d = self.grid.n_max * self.grid.n_max;
        if d > crate::tensor::max_dim() {
            return Err(SbqsError::Dimension(format!("two-mode dimension {d} exceeds the cap")));
        }
        Ok(())
    }
}

/// `g a† ⊗ a† + h.c.` on `n_max` levels per mode.
pub fn amplifier_hamiltonian(g: C64, n_max: usize) -> Result<ComplexMatrix> {
    let a = annihilation(n_max);
    let ad = a.adjoint();
    let up = kron(&ad, &ad)? * g;
    Ok(&up + up.adjoint())
}

/// Grid expansion of [`amplifier_hamiltonian`], pairs with zero weight dropped.
pub fn amplifier_decomposition(g: C64, grid: &CoherentGrid) -> Result<StateDecomposition> {
    grid.validate()?;
    grid.check_truncation()?;
    let n = grid.n_max;
    let pts = grid.points();
    let kets: Vec<ComplexVector> = pts.iter().map(|&z| coherent_ket(z, n)).collect();
    let cell = grid.cell_weight();
    let mut out = StateDecomposition::empty(n * n);
    for (ka, &alpha) in pts.iter().enumerate() {
        for (kb, &beta) in pts.iter().enumerate() {
            let h = g * (alpha * beta).conj();
            let w = 2.0 * cell * cell * h.re;
            if w == 0.0 {
                continue;
            }
            out.terms.push(StateTerm {
                weight: C64::new(w, 0.0),
                state: ResourceState::Pure(kets[ka].kronecker(&kets[kb])),
                label: TermLabel::Product(vec![
                    TermLabel::Coherent { re: alpha.re, im: alpha.im },
                    TermLabel::Coherent { re: beta.re, im: beta.im },
                ]),
            });
        }
    }
    Ok(out)
}

/// `(|00> - i g t |11>)` normalized.
pub fn pair_creation_state(g: C64, t: f64, n_max: usize) -> Result<ComplexVector> {
    let d = n_max * n_max;
    let v = basis_ket(d, 0) - basis_ket(d, n_max + 1) * (I * g * t);
    Ok(v.normalize())
}

#[derive(Debug, Clone, Serialize)]
pub struct AmplifierRun {
    /// `<target| sigma |target>` for the first-order pair state.
    pub pair_overlap: f64,
    /// Overlap with `e^{-iHt}|00>` on the truncated space.
    pub exact_overlap: f64,
    pub terms: usize,
    pub mean_herald: Option<f64>,
    pub resources: ResourceReport,
    #[serde(skip)]
    pub state: ComplexMatrix,
}

/// Evolve the two-mode vacuum.
pub fn simulate_amplifier(cfg: &AmplifierConfig, opts: &SimOptions) -> Result<AmplifierRun> {
    cfg.validate()?;
    let g: C64 = cfg.g.into();
    let n = cfg.grid.n_max;
    let dec = amplifier_decomposition(g, &cfg.grid)?;
    let plan = TrotterPlan::with_steps(&dec, cfg.t, cfg.steps)?;
    let vac = projector(&basis_ket(n * n, 0));
    let traj = simulate_linear(&dec, &vac, &plan, opts)?;
    let state = traj.final_state().clone();
    let pair = pair_creation_state(g, cfg.t, n)?;
    let u = mat_exp(&amplifier_hamiltonian(g, n)?, -I * cfg.t)?;
    let exact = u.column(0).into_owned();
    let overlap = |v: &ComplexVector| (v.adjoint() * &state * v)[(0, 0)].re;
    let mean_herald = if traj.herald_probs.is_empty() {
        None
    } else {
        Some(traj.herald_probs.iter().sum::<f64>() / traj.herald_probs.len() as f64)
    };
    Ok(AmplifierRun {
        pair_overlap: overlap(&pair),
        exact_overlap: overlap(&exact),
        terms: dec.len(),
        mean_herald,
        resources: traj.resources,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(t: f64) -> AmplifierConfig {
        AmplifierConfig {
            g: JsonComplex([0.8, 0.3]),
            grid: CoherentGrid { delta: 0.55, cutoff: 2.2, n_max: 19 },
            t,
            steps: 1,
        }
    }

    #[test]
    fn grid_reproduces_pair_creation_on_vacuum() {
        let c = cfg(0.01);
        let g: C64 = c.g.into();
        let dec = amplifier_decomposition(g, &c.grid).unwrap();
        let n = c.grid.n_max;
        let vac = basis_ket(n * n, 0);
        let mut approx = ComplexVector::zeros(n * n);
        for t in &dec.terms {
            if let ResourceState::Pure(u) = &t.state {
                approx += u * (u.dotc(&vac) * t.weight);
            }
        }
        let exact = amplifier_hamiltonian(g, n).unwrap() * &vac;
        // the disc keeps 1 - (1 + c^2) e^{-c^2} of the |1> amplitude per mode
        let c2 = c.grid.cutoff * c.grid.cutoff;
        let kept = 1.0 - (1.0 + c2) * (-c2).exp();
        let err = (approx - exact).norm() / g.norm();
        assert!(err < 1.5 * (1.0 - kept * kept), "{err}");
    }

    #[test]
    fn vacuum_creates_a_photon_pair() {
        let run = simulate_amplifier(&cfg(0.01), &SimOptions::default()).unwrap();
        assert!(run.pair_overlap > 1.0 - 1e-3, "{}", run.pair_overlap);
        assert!(run.exact_overlap > 1.0 - 1e-3);
    }
}
