//! Classical reference solutions.
//!
//! Nothing here routes through density-matrix exponentiation; these are the
//! ground truths the simulation paths are checked against.

use crate::error::{Result, SbqsError};
use crate::openquantum::LindbladSpec;
use crate::tensor::{
    eigh, hermitian_part, is_hermitian, mat_exp, trace, ComplexMatrix, ComplexVector, C64, I,
};

/// `e^{-iHt} sigma0 e^{iHt}` through the spectral decomposition of `H`.
pub fn exact_unitary(h: &ComplexMatrix, sigma0: &ComplexMatrix, t: f64) -> Result<ComplexMatrix> {
    let u = propagator(h, t)?;
    if sigma0.nrows() != u.nrows() {
        return Err(SbqsError::Dimension("state and Hamiltonian dims differ".into()));
    }
    Ok(&u * sigma0 * u.adjoint())
}

/// `e^{-iHt}` for Hermitian `H`.
pub fn propagator(h: &ComplexMatrix, t: f64) -> Result<ComplexMatrix> {
    if !is_hermitian(h, 1e-9 * h.norm().max(1.0)) {
        return Err(SbqsError::Argument("exact_unitary needs a Hermitian generator".into()));
    }
    let (w, v) = eigh(h)?;
    let n = w.len();
    let mut out = v.clone();
    for (c, lam) in w.iter().enumerate() {
        let ph = (-I * (lam * t)).exp();
        for r in 0..n {
            out[(r, c)] *= ph;
        }
    }
    Ok(out * v.adjoint())
}

/// Right-hand side of the master equation.
pub fn lindblad_rhs(spec: &LindbladSpec, sigma: &ComplexMatrix) -> ComplexMatrix {
    let h = &spec.h;
    let mut out = (h * sigma - sigma * h) * (-I);
    for j in &spec.jumps {
        let l = &j.l;
        let ld = l.adjoint();
        let ll = &ld * l;
        let g = C64::new(j.gamma, 0.0);
        out += (l * sigma * &ld - (&ll * sigma + sigma * &ll) * C64::new(0.5, 0.0)) * g;
    }
    out
}

/// RK4 integration of the master equation with a fixed step near `dt`.
pub fn direct_lindblad(
    spec: &LindbladSpec,
    sigma0: &ComplexMatrix,
    t: f64,
    dt: f64,
) -> Result<ComplexMatrix> {
    spec.validate()?;
    if !(dt > 0.0) || !t.is_finite() || t < 0.0 {
        return Err(SbqsError::Argument("need dt > 0 and t >= 0".into()));
    }
    let n = (t / dt).ceil().max(1.0) as usize;
    let h = t / n as f64;
    let stiff = spec.generator_scale() * h;
    if stiff > 2.5 {
        return Err(SbqsError::Numeric(format!(
            "RK4 step {h:e} unstable for generator scale {:e}",
            spec.generator_scale()
        )));
    }
    let mut s = sigma0.clone();
    let half = C64::new(h / 2.0, 0.0);
    let full = C64::new(h, 0.0);
    let sixth = C64::new(h / 6.0, 0.0);
    for _ in 0..n {
        let k1 = lindblad_rhs(spec, &s);
        let k2 = lindblad_rhs(spec, &(&s + &k1 * half));
        let k3 = lindblad_rhs(spec, &(&s + &k2 * half));
        let k4 = lindblad_rhs(spec, &(&s + &k3 * full));
        s += (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * sixth;
    }
    Ok(s)
}

/// Delay-ODE right-hand side: `(t, x(t), [x(t - a_j)]) -> dx/dt`.
pub type DelayRhs<'a> = dyn Fn(f64, &[f64], &[Vec<f64>]) -> Vec<f64> + 'a;
pub type HistoryFn<'a> = dyn Fn(f64) -> Vec<f64> + 'a;

/// Delay-ODE specification for [`rk4_delay`].
pub struct OdeProblem<'a> {
    pub rhs: Box<DelayRhs<'a>>,
    pub delays: Vec<f64>,
    /// Values for `t <= 0`.
    pub history: Box<HistoryFn<'a>>,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl OdeTrajectory {
    /// Value at an arbitrary time by linear interpolation between samples.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let dt = self.times[1] - self.times[0];
        let k = ((t - self.times[0]) / dt).floor().clamp(0.0, (self.times.len() - 2) as f64) as usize;
        let w = (t - self.times[k]) / dt;
        self.values[k]
            .iter()
            .zip(&self.values[k + 1])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }
}

/// Classic RK4 on a fixed grid. Delayed arguments inside the integrated
/// window come from cubic Hermite interpolation of the stored solution and
/// its derivative, which keeps the scheme fourth order.
pub fn rk4_delay(p: &OdeProblem<'_>, t_end: f64) -> Result<OdeTrajectory> {
    if !(p.dt > 0.0) || !t_end.is_finite() || t_end < 0.0 {
        return Err(SbqsError::Argument("need dt > 0 and T >= 0".into()));
    }
    if p.delays.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(SbqsError::Argument("delays must be >= 0".into()));
    }
    let n = (t_end / p.dt).round().max(1.0) as usize;
    let h = t_end / n as f64;
    let mut times = vec![0.0];
    let mut xs: Vec<Vec<f64>> = vec![(p.history)(0.0)];
    let mut fs: Vec<Vec<f64>> = Vec::new();

    let sample = |xs: &Vec<Vec<f64>>, fs: &Vec<Vec<f64>>, s: f64, current: &[f64], t_now: f64| -> Vec<f64> {
        if s <= 0.0 {
            return (p.history)(s);
        }
        if s >= t_now - 1e-14 * h.max(1.0) {
            return current.to_vec();
        }
        let k = ((s / h).floor() as usize).min(fs.len().saturating_sub(1));
        let k = k.min(xs.len() - 2);
        let th = (s - k as f64 * h) / h;
        let (x0, x1) = (&xs[k], &xs[k + 1]);
        let (f0, f1) = (&fs[k], &fs[k + 1]);
        let h00 = 2.0 * th.powi(3) - 3.0 * th.powi(2) + 1.0;
        let h10 = th.powi(3) - 2.0 * th.powi(2) + th;
        let h01 = -2.0 * th.powi(3) + 3.0 * th.powi(2);
        let h11 = th.powi(3) - th.powi(2);
        (0..x0.len())
            .map(|i| h00 * x0[i] + h10 * h * f0[i] + h01 * x1[i] + h11 * h * f1[i])
            .collect()
    };

    let eval = |xs: &Vec<Vec<f64>>, fs: &Vec<Vec<f64>>, t: f64, x: &[f64], t_now: f64| -> Vec<f64> {
        let lagged: Vec<Vec<f64>> =
            p.delays.iter().map(|a| sample(xs, fs, t - a, x, t_now)).collect();
        (p.rhs)(t, x, &lagged)
    };

    for step in 0..n {
        let t = step as f64 * h;
        let x = xs[step].clone();
        // delayed samples for stages that fall in (t, t+h] use the stage state
        let k1 = eval(&xs, &fs, t, &x, t);
        if fs.len() == step {
            fs.push(k1.clone());
        }
        let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * h * k).collect();
        let k2 = eval(&xs, &fs, t + 0.5 * h, &x2, t);
        let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + 0.5 * h * k).collect();
        let k3 = eval(&xs, &fs, t + 0.5 * h, &x3, t);
        let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + h * k).collect();
        let k4 = eval(&xs, &fs, t + h, &x4, t);
        let next: Vec<f64> = (0..x.len())
            .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SbqsError::Numeric(format!("RK4 diverged at t = {}", t + h)));
        }
        times.push(t + h);
        xs.push(next);
        // derivative at the new point for the interpolant
        let tn = t + h;
        let xn = xs[step + 1].clone();
        let fnew = eval(&xs, &fs, tn, &xn, tn);
        fs.push(fnew);
    }
    Ok(OdeTrajectory { times, values: xs })
}

/// Closed form of `x' = (r-1) x - r x^2`.
pub fn logistic_closed_form(r: f64, x_init: f64, t: f64) -> f64 {
    let xs = (r - 1.0) / r;
    let e = ((r - 1.0) * t).exp();
    xs * x_init * e / (xs - x_init + x_init * e)
}

/// Result of [`direct_gp`].
#[derive(Debug, Clone)]
pub struct GpSolution {
    pub psi: ComplexVector,
    /// `| ||psi(t)||^2 - ||psi(0)||^2 |`.
    pub norm_drift: f64,
    /// Drift of `<H0> + (g/2) sum_r p_r^2`.
    pub energy_drift: f64,
}

fn gp_rhs(h0: &ComplexMatrix, g: f64, psi: &ComplexVector) -> ComplexVector {
    let mut out = h0 * psi;
    for k in 0..psi.len() {
        out[k] += psi[k] * (g * psi[k].norm_sqr());
    }
    out * (-I)
}

/// Mean-field energy `<H0> + (g/2) sum_r |psi_r|^4`.
pub fn gp_energy(h0: &ComplexMatrix, g: f64, psi: &ComplexVector) -> f64 {
    let e0 = (psi.adjoint() * h0 * psi)[(0, 0)].re;
    e0 + 0.5 * g * psi.iter().map(|z| z.norm_sqr().powi(2)).sum::<f64>()
}

/// RK4 for `i psi' = (H0 + g |psi|^2) psi` on a lattice, without renormalization.
pub fn direct_gp(
    h0: &ComplexMatrix,
    g: f64,
    psi0: &ComplexVector,
    t: f64,
    dt: f64,
) -> Result<GpSolution> {
    if h0.nrows() != psi0.len() || !h0.is_square() {
        return Err(SbqsError::Dimension("H0 and psi0 dims differ".into()));
    }
    if !(dt > 0.0) || t < 0.0 {
        return Err(SbqsError::Argument("need dt > 0 and t >= 0".into()));
    }
    let n = (t / dt).ceil().max(1.0) as usize;
    let h = t / n as f64;
    let mut psi = psi0.clone();
    let n0 = psi.norm_squared();
    let e0 = gp_energy(h0, g, &psi);
    let c = |x: f64| C64::new(x, 0.0);
    for _ in 0..n {
        let k1 = gp_rhs(h0, g, &psi);
        let k2 = gp_rhs(h0, g, &(&psi + &k1 * c(h / 2.0)));
        let k3 = gp_rhs(h0, g, &(&psi + &k2 * c(h / 2.0)));
        let k4 = gp_rhs(h0, g, &(&psi + &k3 * c(h)));
        psi += (k1 + (k2 + k3) * c(2.0) + k4) * c(h / 6.0);
    }
    Ok(GpSolution {
        norm_drift: (psi.norm_squared() - n0).abs(),
        energy_drift: (gp_energy(h0, g, &psi) - e0).abs(),
        psi,
    })
}

/// Ground state projector and spectral gap of a Hermitian matrix.
pub fn ground_state(h: &ComplexMatrix) -> Result<(ComplexVector, f64, f64)> {
    let (w, v) = eigh(&hermitian_part(h))?;
    let gap = if w.len() > 1 { w[1] - w[0] } else { f64::INFINITY };
    Ok((v.column(0).into_owned(), w[0], gap))
}

/// `<psi| sigma |psi>`, the fidelity of `sigma` with a pure target.
pub fn pure_fidelity(sigma: &ComplexMatrix, psi: &ComplexVector) -> f64 {
    (psi.adjoint() * sigma * psi)[(0, 0)].re
}

/// `e^{tL}` applied to a vectorized state through the dense superoperator;
/// used only to cross-check the vectorization algebra.
pub fn superoperator_flow(l: &ComplexMatrix, v0: &ComplexVector, t: f64) -> Result<ComplexVector> {
    Ok(mat_exp(l, C64::new(t, 0.0))? * v0)
}

/// Trace of a density matrix, exposed for oracle-side sanity checks.
pub fn trace_of(m: &ComplexMatrix) -> C64 {
    trace(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::openquantum::{Jump, LindbladSpec};
    use crate::tensor::{
        frobenius_distance, identity, pauli_x, pauli_z, plus_ket, projector, random_density,
        random_hermitian, random_ket, random_matrix,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_unitary_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_density(&mut rng, 2);
        let zero = ComplexMatrix::zeros(2, 2);
        assert!(frobenius_distance(&exact_unitary(&zero, &s, 3.0).unwrap(), &s) < 1e-15);
        let z = pauli_z();
        // e^{-i pi Z} = -I, e^{-i pi Z / 2} = -iZ
        let full = exact_unitary(&z, &s, std::f64::consts::PI).unwrap();
        assert!(frobenius_distance(&full, &s) < 1e-13);
        let half = exact_unitary(&z, &s, std::f64::consts::FRAC_PI_2).unwrap();
        assert!(frobenius_distance(&half, &(&z * &s * &z)) < 1e-13);
        let h = random_hermitian(&mut rng, 5);
        let u = propagator(&h, 0.8).unwrap();
        assert!(frobenius_distance(&(u.adjoint() * &u), &identity(5)) < 1e-12);
    }

    fn two_level(omega: f64, gamma: f64) -> LindbladSpec {
        LindbladSpec::new(pauli_z() * C64::new(omega, 0.0), vec![Jump { l: pauli_x(), gamma }]).unwrap()
    }

    #[test]
    fn lindblad_reduces_to_unitary() {
        let spec = LindbladSpec::new(pauli_z(), vec![]).unwrap();
        let s0 = projector(&plus_ket(2, 0, 1));
        let a = direct_lindblad(&spec, &s0, 1.0, 1e-3).unwrap();
        let b = exact_unitary(&pauli_z(), &s0, 1.0).unwrap();
        assert!(frobenius_distance(&a, &b) < 1e-8);
    }

    #[test]
    fn lindblad_two_level_closed_form() {
        let s0 = projector(&plus_ket(2, 0, 1));
        for (omega, gamma) in [(1.0, 0.5), (1.0, 3.0)] {
            let spec = two_level(omega, gamma);
            let t = 1.0;
            let out = direct_lindblad(&spec, &s0, t, 1e-4).unwrap();
            let om = (C64::new(gamma * gamma - 4.0 * omega * omega, 0.0)).sqrt();
            let z = (-gamma * t as f64).exp()
                * ((om * t).cosh() + C64::new(gamma, -2.0 * omega) / om * (om * t).sinh());
            assert!((out[(0, 1)] - z / 2.0).norm() < 1e-6);
            assert!((out[(0, 0)] - C64::new(0.5, 0.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn lindblad_positivity_and_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_hermitian(&mut rng, 3);
        let l = random_matrix(&mut rng, 3, 3) * C64::new(0.5, 0.0);
        let spec = LindbladSpec::new(h, vec![Jump { l, gamma: 0.7 }]).unwrap();
        let s0 = random_density(&mut rng, 3);
        let out = direct_lindblad(&spec, &s0, 1.0, 1e-4).unwrap();
        assert!((trace(&out).re - 1.0).abs() < 1e-8);
        let (w, _) = eigh(&out).unwrap();
        assert!(w[0] > -1e-7);
    }

    #[test]
    fn rk4_constant_and_linear_delay() {
        let p = OdeProblem {
            rhs: Box::new(|_, _, _| vec![0.0]),
            delays: vec![],
            history: Box::new(|_| vec![2.0]),
            dt: 0.1,
        };
        let tr = rk4_delay(&p, 1.0).unwrap();
        assert!(tr.values.iter().all(|v| v[0] == 2.0));

        let p = OdeProblem {
            rhs: Box::new(|_, _, lag| vec![-lag[0][0]]),
            delays: vec![1.0],
            history: Box::new(|_| vec![1.0]),
            dt: 0.01,
        };
        let tr = rk4_delay(&p, 1.0).unwrap();
        for (t, v) in tr.times.iter().zip(&tr.values) {
            assert!((v[0] - (1.0 - t)).abs() < 1e-14);
        }
    }

    #[test]
    fn rk4_logistic_closed_form() {
        let r = 2.0;
        let p = OdeProblem {
            rhs: Box::new(move |_, x, _| vec![(r - 1.0) * x[0] - r * x[0] * x[0]]),
            delays: vec![],
            history: Box::new(|_| vec![0.1]),
            dt: 1e-4,
        };
        let tr = rk4_delay(&p, 2.0).unwrap();
        let err = tr
            .times
            .iter()
            .zip(&tr.values)
            .map(|(t, v)| (v[0] - logistic_closed_form(r, 0.1, *t)).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rk4_is_fourth_order() {
        let mk = |dt: f64| OdeProblem {
            rhs: Box::new(|_, x, _| vec![x[0] - 2.0 * x[0] * x[0]]),
            delays: vec![],
            history: Box::new(|_| vec![0.1]),
            dt,
        };
        let exact = logistic_closed_form(2.0, 0.1, 2.0);
        let e1 = (rk4_delay(&mk(0.1), 2.0).unwrap().values.last().unwrap()[0] - exact).abs();
        let e2 = (rk4_delay(&mk(0.05), 2.0).unwrap().values.last().unwrap()[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((12.0..20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn rk4_delay_self_convergence() {
        // x' = -x(t - 0.5) with history cos t, compared across step sizes
        let mk = |dt: f64| OdeProblem {
            rhs: Box::new(|_, _, lag| vec![-lag[0][0]]),
            delays: vec![0.5],
            history: Box::new(|t| vec![t.cos()]),
            dt,
        };
        let fine = rk4_delay(&mk(0.0125), 1.3).unwrap();
        let f = fine.values.last().unwrap()[0];
        let e1 = (rk4_delay(&mk(0.1), 1.3).unwrap().values.last().unwrap()[0] - f).abs();
        let e2 = (rk4_delay(&mk(0.05), 1.3).unwrap().values.last().unwrap()[0] - f).abs();
        assert!(e2 < e1 && e1 < 1e-4, "{e1} {e2}");
    }

    #[test]
    fn gp_oracle_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h0 = random_hermitian(&mut rng, 4);
        let psi0 = random_ket(&mut rng, 4);
        let lin = direct_gp(&h0, 0.0, &psi0, 1.0, 1e-4).unwrap();
        let u = propagator(&h0, 1.0).unwrap();
        assert!((lin.psi - &u * &psi0).norm() < 1e-10);

        let one = ComplexMatrix::from_element(1, 1, C64::new(0.3, 0.0));
        let psi1 = ComplexVector::from_element(1, C64::new(1.0, 0.0));
        let s = direct_gp(&one, 0.5, &psi1, 2.0, 1e-4).unwrap();
        assert!((s.psi[0].norm() - 1.0).abs() < 1e-10);

        let g = direct_gp(&h0, 0.5, &psi0, 1.0, 1e-4).unwrap();
        assert!(g.norm_drift < 1e-7);
        assert!(g.energy_drift < 1e-6);
    }
}
