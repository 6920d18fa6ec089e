//! JSON scenario files binding every simulator to one runner.
//!
//! A scenario names a `kind`, a kind-specific `payload`, and optionally an
//! `output` target, a `mode` and a `seed`. The payload is parsed and checked
//! completely before anything is computed.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::amplifier::{simulate_amplifier, AmplifierConfig};
use crate::cdopt::{
    run_adiabatic, variance_exact_optimum, variance_lower_bound, CdOptions, CdProblem, CdTarget, Schedule,
    VarianceSign,
};
use crate::decompose::{decompose, reconstruct, DecompositionMethod, StateDecomposition};
use crate::dme::DmeMode;
use crate::error::{Result, SbqsError};
use crate::evolve::{plan, simulate_linear, SimOptions, Trajectory, TrotterPlan};
use crate::io::{fmt_f64, vector_from_json, CsvWriter, DenseMatrix};
use crate::nld::{logistic_report, solve_nld, NldOptions, NldSystem};
use crate::nonlinear::{
    couplings_hermitian, gp_terms, lattice_hamiltonian, simulate_history_dependent, HistoryBuffer, HistoryTerm,
};
use crate::openquantum::{open_generator, simulate_open_planned, LindbladExpansion, LindbladSpec};
use crate::tensor::{basis_ket, check_density, frobenius_distance, projector, ComplexMatrix, Tolerances};

/// Scenario kinds understood by the runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Decompose,
    Linear,
    Open,
    Nonlinear,
    Nld,
    Logistic,
    Amplifier,
    Gp,
    Cd,
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    Exact,
    Circuit,
    Sampled,
}

impl ModeName {
    pub fn dme(self) -> DmeMode {
        match self {
            ModeName::Exact => DmeMode::exact(),
            ModeName::Circuit => DmeMode::circuit(),
            ModeName::Sampled => DmeMode::sampled(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(ModeName::Exact),
            "circuit" => Ok(ModeName::Circuit),
            "sampled" => Ok(ModeName::Sampled),
            other => Err(SbqsError::Argument(format!("unknown mode `{other}` (exact, circuit, sampled)"))),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ModeName::Exact => "exact",
            ModeName::Circuit => "circuit",
            ModeName::Sampled => "sampled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub payload: Value,
    #[serde(default)]
    pub output: Option<OutputSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: ModeName,
}

/// Artifacts of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub csv: String,
    pub report: Value,
    pub provenance: Vec<String>,
}

impl ScenarioOutput {
    /// The artifact in the requested format.
    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.csv.clone(),
            OutputFormat::Json => {
                let doc = json!({ "provenance": self.provenance, "report": self.report });
                let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
                s.push('\n');
                s
            }
        }
    }
}

fn field<T: DeserializeOwned>(kind: &str, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| SbqsError::Argument(format!("{kind} payload: {e}")))
}

fn square(name: &str, m: &DenseMatrix, d: Option<usize>) -> Result<ComplexMatrix> {
    m.to_square(d).map_err(|e| match e {
        SbqsError::Dimension(msg) => SbqsError::Dimension(format!("{name}: {msg}")),
        other => other,
    })
}

fn hermitian(name: &str, m: &DenseMatrix, d: Option<usize>) -> Result<ComplexMatrix> {
    let h = square(name, m, d)?;
    if !crate::tensor::is_hermitian(&h, Tolerances::default().tol_herm) {
        return Err(SbqsError::Argument(format!("{name} must be Hermitian")));
    }
    Ok(h)
}

/// Initial state from either `sigma0` (density) or `psi0` (ket).
#[derive(Debug, Clone, Default, Deserialize)]
struct InitialState {
    #[serde(default)]
    sigma0: Option<DenseMatrix>,
    #[serde(default)]
    psi0: Option<Vec<[f64; 2]>>,
}

impl InitialState {
    fn resolve(&self, d: usize, default_ket: Option<usize>) -> Result<ComplexMatrix> {
        let s = match (&self.sigma0, &self.psi0) {
            (Some(_), Some(_)) => return Err(SbqsError::Argument("give only one of sigma0 and psi0".into())),
            (Some(m), None) => square("sigma0", m, Some(d))?,
            (None, Some(v)) => {
                if v.len() != d {
                    return Err(SbqsError::Dimension(format!("psi0 has {} entries, expected {d}", v.len())));
                }
                let k = vector_from_json(v);
                let n = k.norm();
                if !(n > 0.0) {
                    return Err(SbqsError::Argument("psi0 is zero".into()));
                }
                projector(&(k / crate::tensor::C64::new(n, 0.0)))
            }
            (None, None) => match default_ket {
                Some(i) => projector(&basis_ket(d, i)),
                None => return Err(SbqsError::Argument("missing field `sigma0` or `psi0`".into())),
            },
        };
        check_density(&s, &Tolerances::default())
            .map_err(|e| SbqsError::Density(format!("initial state: {e}")))?;
        Ok(s)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecomposePayload {
    #[serde(rename = "H")]
    h: DenseMatrix,
    #[serde(default)]
    method: DecompositionMethod,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearPayload {
    #[serde(rename = "H")]
    h: DenseMatrix,
    #[serde(flatten)]
    init: InitialState,
    t: f64,
    #[serde(default)]
    eps: Option<f64>,
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default)]
    method: DecompositionMethod,
    #[serde(default)]
    sample_every: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OpenPayload {
    #[serde(rename = "H")]
    h: Value,
    #[serde(default)]
    jumps: Value,
    #[serde(flatten)]
    init: InitialState,
    t: f64,
    #[serde(default)]
    eps: Option<f64>,
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default)]
    expansion: LindbladExpansion,
    #[serde(default)]
    sample_every: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NonlinearPayload {
    terms: Vec<Value>,
    #[serde(rename = "H0", default)]
    h0: Option<DenseMatrix>,
    #[serde(flatten)]
    init: InitialState,
    delta: f64,
    t: f64,
    #[serde(default)]
    sample_every: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NldPayload {
    system: Value,
    /// Constant history `x(t), t <= 0`.
    history: Vec<f64>,
    t: f64,
    delta: f64,
    #[serde(default)]
    explicit_chain: bool,
    #[serde(default)]
    sample_every: usize,
}

fn default_r() -> f64 {
    2.0
}
fn default_one() -> f64 {
    1.0
}
fn default_x0() -> f64 {
    0.5
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogisticPayload {
    #[serde(default = "default_r")]
    r: f64,
    #[serde(default = "default_one")]
    alpha: f64,
    #[serde(default = "default_x0")]
    x0: f64,
    x_init: f64,
    t: f64,
    delta: f64,
    #[serde(default)]
    sample_every: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GpPayload {
    #[serde(default = "default_one")]
    hopping: f64,
    potential: Vec<f64>,
    g: f64,
    #[serde(flatten)]
    init: InitialState,
    t: f64,
    delta: f64,
    #[serde(default)]
    sample_every: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CdPayload {
    #[serde(rename = "H0")]
    h0: DenseMatrix,
    #[serde(rename = "H1")]
    h1: DenseMatrix,
    #[serde(rename = "T")]
    t: f64,
    delta: f64,
    #[serde(default)]
    tau: Option<f64>,
    #[serde(default = "yes")]
    counterdiabatic: bool,
    #[serde(default)]
    sample_every: usize,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SignName {
    #[default]
    Minus,
    Plus,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariancePayload {
    #[serde(rename = "A")]
    a: DenseMatrix,
    /// Optional for the doubled bound, which has a default start.
    #[serde(rename = "H0", default)]
    h0: Option<DenseMatrix>,
    #[serde(rename = "T")]
    t: f64,
    delta: f64,
    #[serde(default)]
    tau: Option<f64>,
    #[serde(default)]
    sign: SignName,
    #[serde(default = "yes")]
    counterdiabatic: bool,
    #[serde(default)]
    doubled_bound: bool,
}

/// Fully parsed and validated scenario, ready to run.
enum Prepared {
    Decompose { h: ComplexMatrix, method: DecompositionMethod },
    Linear { dec: StateDecomposition, h: ComplexMatrix, sigma0: ComplexMatrix, plan: TrotterPlan, sample_every: usize },
    Open { spec: LindbladSpec, gen: StateDecomposition, sigma0: ComplexMatrix, plan: TrotterPlan, sample_every: usize },
    Nonlinear { terms: Vec<HistoryTerm>, h0: Option<StateDecomposition>, buf: HistoryBuffer, t: f64, sample_every: usize },
    Nld { sys: NldSystem, history: Vec<f64>, t: f64, delta: f64, explicit: bool, sample_every: usize },
    Logistic(LogisticPayload),
    Amplifier(AmplifierConfig),
    Gp { h0: ComplexMatrix, g: f64, sigma0: ComplexMatrix, t: f64, delta: f64, sample_every: usize },
    Cd { problem: CdProblem, sched: Schedule, counterdiabatic: bool, sample_every: usize },
    Variance { a: ComplexMatrix, h0: Option<ComplexMatrix>, sched: Schedule, sign: VarianceSign, counterdiabatic: bool, doubled: bool },
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(SbqsError::Argument(format!("{name} must be positive and finite")))
    }
}

fn linear_plan(dec: &StateDecomposition, t: f64, eps: Option<f64>, steps: Option<usize>) -> Result<TrotterPlan> {
    match (steps, eps) {
        (Some(n), _) => TrotterPlan::with_steps(dec, t, n),
        (None, Some(e)) => plan(dec, t, e),
        (None, None) => plan(dec, t, 1e-3),
    }
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SbqsError::Argument(format!("scenario: {e}")))
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SbqsError::Argument(format!("cannot read {}: {e}", path.display())))?;
        Scenario::from_json_str(&text)
    }

    fn prepare(&self) -> Result<Prepared> {
        let p = &self.payload;
        let tol = Tolerances::default();
        Ok(match self.kind {
            ScenarioKind::Decompose => {
                let q: DecomposePayload = field("decompose", p)?;
                Prepared::Decompose { h: hermitian("H", &q.h, None)?, method: q.method }
            }
            ScenarioKind::Linear => {
                let q: LinearPayload = field("linear", p)?;
                let h = hermitian("H", &q.h, None)?;
                positive("t", q.t)?;
                let sigma0 = q.init.resolve(h.nrows(), None)?;
                let dec = decompose(&h, q.method, &tol)?;
                let plan = linear_plan(&dec, q.t, q.eps, q.steps)?;
                Prepared::Linear { dec, h, sigma0, plan, sample_every: q.sample_every }
            }
            ScenarioKind::Open => {
                let q: OpenPayload = field("open", p)?;
                let jumps = if q.jumps.is_null() { json!([]) } else { q.jumps.clone() };
                let spec = LindbladSpec::from_json(&json!({ "H": q.h, "jumps": jumps }))?;
                positive("t", q.t)?;
                let sigma0 = q.init.resolve(spec.dim(), None)?;
                let gen = open_generator(&spec, q.expansion)?;
                let plan = linear_plan(&gen, q.t, q.eps, q.steps)?;
                Prepared::Open { spec, gen, sigma0, plan, sample_every: q.sample_every }
            }
            ScenarioKind::Nonlinear => {
                let q: NonlinearPayload = field("nonlinear", p)?;
                let terms: Vec<HistoryTerm> = q.terms.iter().map(HistoryTerm::from_json).collect::<Result<_>>()?;
                let d = terms
                    .first()
                    .map(|t| t.dim())
                    .or_else(|| q.h0.as_ref().map(|h| h.0.len()))
                    .ok_or_else(|| SbqsError::Argument("nonlinear payload needs terms or H0".into()))?;
                let h0 = match &q.h0 {
                    Some(m) => Some(decompose(&hermitian("H0", m, Some(d))?, DecompositionMethod::Polarization, &tol)?),
                    None => None,
                };
                positive("delta", q.delta)?;
                let sigma0 = q.init.resolve(d, None)?;
                let tau = terms.iter().map(|t| t.max_delay()).fold(0.0, f64::max);
                let buf = HistoryBuffer::constant(&sigma0, q.delta, tau)?;
                Prepared::Nonlinear { terms, h0, buf, t: q.t, sample_every: q.sample_every }
            }
            ScenarioKind::Nld => {
                let q: NldPayload = field("nld", p)?;
                let sys = NldSystem::from_json(&q.system)?;
                if q.history.len() != sys.dim {
                    return Err(SbqsError::Dimension(format!(
                        "history has {} values, system has D = {}",
                        q.history.len(),
                        sys.dim
                    )));
                }
                crate::nld::embed(&q.history, &sys)?;
                positive("delta", q.delta)?;
                Prepared::Nld {
                    sys,
                    history: q.history,
                    t: q.t,
                    delta: q.delta,
                    explicit: q.explicit_chain,
                    sample_every: q.sample_every,
                }
            }
            ScenarioKind::Logistic => {
                let q: LogisticPayload = field("logistic", p)?;
                positive("delta", q.delta)?;
                positive("t", q.t)?;
                let sys = crate::nld::logistic_system(q.r, q.alpha, q.x0);
                sys.validate()?;
                crate::nld::embed(&[q.x_init], &sys)?;
                Prepared::Logistic(q)
            }
            ScenarioKind::Amplifier => {
                let q: AmplifierConfig = field("amplifier", p)?;
                q.validate()?;
                Prepared::Amplifier(q)
            }
            ScenarioKind::Gp => {
                let q: GpPayload = field("gp", p)?;
                if q.potential.len() < 2 {
                    return Err(SbqsError::Argument("gp needs at least two sites".into()));
                }
                positive("delta", q.delta)?;
                let h0 = lattice_hamiltonian(q.hopping, &q.potential);
                let sigma0 = q.init.resolve(q.potential.len(), Some(0))?;
                Prepared::Gp { h0, g: q.g, sigma0, t: q.t, delta: q.delta, sample_every: q.sample_every }
            }
            ScenarioKind::Cd => {
                let q: CdPayload = field("cd", p)?;
                let h0 = hermitian("H0", &q.h0, None)?;
                let h1 = hermitian("H1", &q.h1, Some(h0.nrows()))?;
                let sched = Schedule::linear(q.t, q.delta, q.tau.unwrap_or(5.0 * q.delta))?;
                let problem = CdProblem::new(h0, CdTarget::Fixed(h1))?;
                Prepared::Cd { problem, sched, counterdiabatic: q.counterdiabatic, sample_every: q.sample_every }
            }
            ScenarioKind::Variance => {
                let q: VariancePayload = field("variance", p)?;
                let a = hermitian("A", &q.a, None)?;
                let d = a.nrows();
                let hd = if q.doubled_bound { d * d } else { d };
                let h0 = match (&q.h0, q.doubled_bound) {
                    (Some(m), _) => Some(hermitian("H0", m, Some(hd))?),
                    (None, true) => None,
                    (None, false) => return Err(SbqsError::Argument("variance payload: missing field `H0`".into())),
                };
                let sched = Schedule::linear(q.t, q.delta, q.tau.unwrap_or(5.0 * q.delta))?;
                let sign = match q.sign {
                    SignName::Minus => VarianceSign::Minus,
                    SignName::Plus => VarianceSign::Plus,
                };
                Prepared::Variance { a, h0, sched, sign, counterdiabatic: q.counterdiabatic, doubled: q.doubled_bound }
            }
        })
    }

    /// Parse and check the payload without computing anything.
    pub fn validate(&self) -> Result<()> {
        self.prepare().map(|_| ())
    }

    /// Comment lines identifying the run.
    pub fn provenance(&self, mode: ModeName, seed: u64) -> Vec<String> {
        let tol = Tolerances::default();
        vec![
            format!("sbqs {}", env!("CARGO_PKG_VERSION")),
            format!("kind {}", serde_json::to_value(self.kind).unwrap().as_str().unwrap_or("?")),
            format!("mode {}", mode.as_str()),
            format!("seed {seed}"),
            format!(
                "tolerances herm {} trace {} psd {} recon {}",
                fmt_f64(tol.tol_herm),
                fmt_f64(tol.tol_trace),
                fmt_f64(tol.tol_psd),
                fmt_f64(tol.tol_recon)
            ),
        ]
    }

    /// Run with the scenario's own mode and seed.
    pub fn run(&self) -> Result<ScenarioOutput> {
        self.run_with(self.mode, self.seed)
    }

    pub fn run_with(&self, mode: ModeName, seed: u64) -> Result<ScenarioOutput> {
        let prepared = self.prepare()?;
        let provenance = self.provenance(mode, seed);
        let sim = |sample_every: usize| SimOptions { mode: mode.dme(), sample_every, seed };
        let mut checks = DensityChecks::default();
        let (csv, mut report) = match prepared {
            Prepared::Decompose { h, method } => {
                let dec = decompose(&h, method, &Tolerances::default())?;
                let err = frobenius_distance(&reconstruct(&dec), &h);
                for t in &dec.terms {
                    checks.check(&t.state.matrix());
                }
                let mut w = CsvWriter::new();
                for p in &provenance {
                    w.comment(p);
                }
                w.header(&["term", "weight_re", "weight_im"]);
                for (k, t) in dec.terms.iter().enumerate() {
                    w.row(&[k as f64, t.weight.re, t.weight.im]);
                }
                let report = json!({
                    "terms": dec.len(),
                    "identity_offset": [dec.identity_offset.re, dec.identity_offset.im],
                    "reconstruction_error": err,
                    "decomposition": dec.to_json(),
                });
                (w.finish(), report)
            }
            Prepared::Linear { dec, h, sigma0, plan, sample_every } => {
                let traj = simulate_linear(&dec, &sigma0, &plan, &sim(sample_every))?;
                let exact = crate::oracle::exact_unitary(&h, &sigma0, plan.t)?;
                checks.trajectory(&traj);
                let report = json!({
                    "trotter_steps": plan.n,
                    "terms": dec.len(),
                    "error_budget": traj.error_budget,
                    "final_error_vs_exact": frobenius_distance(traj.final_state(), &exact),
                    "final_state": DenseMatrix::from_matrix(traj.final_state()),
                    "herald": herald_summary(&traj),
                    "resources": traj.resources,
                });
                (traj.to_csv(&provenance), report)
            }
            Prepared::Open { spec, gen, sigma0, plan, sample_every } => {
                let run = simulate_open_planned(&spec, &sigma0, &gen, &plan, &sim(sample_every))?;
                let direct = crate::oracle::direct_lindblad(&spec, &sigma0, plan.t, plan.t / plan.n as f64 / 4.0)?;
                checks.trajectory(&run.trajectory);
                let report = json!({
                    "trotter_steps": run.steps,
                    "terms": run.terms,
                    "final_error_vs_direct": frobenius_distance(run.trajectory.final_state(), &direct),
                    "final_state": DenseMatrix::from_matrix(run.trajectory.final_state()),
                    "herald": herald_summary(&run.trajectory),
                    "resources": run.trajectory.resources,
                });
                (run.trajectory.to_csv(&provenance), report)
            }
            Prepared::Nonlinear { terms, h0, buf, t, sample_every } => {
                let run = simulate_history_dependent(&terms, h0.as_ref(), buf, t, &sim(sample_every))?;
                checks.trajectory(&run.trajectory);
                let report = json!({
                    "steps": run.copies.steps,
                    "couplings_real": couplings_hermitian(&run, 1e-12),
                    "copy_model": run.copies,
                    "herald": herald_summary(&run.trajectory),
                    "resources": run.trajectory.resources,
                });
                (run.trajectory.to_csv(&provenance), report)
            }
            Prepared::Nld { sys, history, t, delta, explicit, sample_every } => {
                let opts = NldOptions { sim: sim(sample_every), explicit_chain: explicit };
                let traj = solve_nld(&sys, |_| history.clone(), t, delta, &opts)?;
                for s in &traj.states {
                    checks.check(s);
                }
                let report = json!({
                    "terms": traj.terms,
                    "copy_model": traj.copy_model,
                    "taylor_tail": traj.taylor_tail,
                    "max_x0_drift": traj.x0_drift.iter().cloned().fold(0.0, f64::max),
                    "resources": traj.resources,
                });
                (traj.to_csv(&provenance), report)
            }
            Prepared::Logistic(q) => {
                let opts = NldOptions { sim: sim(q.sample_every), explicit_chain: false };
                let rep = logistic_report(q.r, q.alpha, q.x0, q.x_init, q.t, q.delta, &opts)?;
                for s in &rep.trajectory.states {
                    checks.check(s);
                }
                let closed = rep
                    .trajectory
                    .times
                    .iter()
                    .zip(&rep.trajectory.xs)
                    .map(|(t, x)| (x[0] - crate::oracle::logistic_closed_form(q.r, q.x_init, *t)).abs())
                    .fold(0.0, f64::max);
                let report = json!({
                    "R": rep.r,
                    "C": rep.c,
                    "steps": rep.steps,
                    "copy_model_log10": rep.copy_log10,
                    "copy_model": rep.trajectory.copy_model,
                    "fixed_point": rep.fixed_point,
                    "max_error_vs_closed_form": closed,
                    "taylor_tail": rep.trajectory.taylor_tail,
                });
                (rep.trajectory.to_csv(&provenance), report)
            }
            Prepared::Amplifier(cfg) => {
                let run = simulate_amplifier(&cfg, &sim(0))?;
                checks.check(&run.state);
                let n = cfg.grid.n_max;
                let mut w = CsvWriter::new();
                for p in &provenance {
                    w.comment(p);
                }
                w.header(&["n_s", "n_i", "probability"]);
                for k in 0..n * n {
                    let pk = run.state[(k, k)].re;
                    if pk > 1e-14 {
                        w.row(&[(k / n) as f64, (k % n) as f64, pk]);
                    }
                }
                let report = json!({
                    "pair_overlap": run.pair_overlap,
                    "exact_overlap": run.exact_overlap,
                    "terms": run.terms,
                    "mean_herald": run.mean_herald,
                    "resources": run.resources,
                });
                (w.finish(), report)
            }
            Prepared::Gp { h0, g, sigma0, t, delta, sample_every } => {
                let d = h0.nrows();
                let dec = decompose(&h0, DecompositionMethod::Polarization, &Tolerances::default())?;
                let buf = HistoryBuffer::constant(&sigma0, delta, 0.0)?;
                let run = simulate_history_dependent(&gp_terms(g, d)?, Some(&dec), buf, t, &sim(sample_every))?;
                checks.trajectory(&run.trajectory);
                let (w0, v0) = crate::tensor::eigh(&sigma0)?;
                let psi0 = v0.column(w0.len() - 1).into_owned();
                let direct = crate::oracle::direct_gp(&h0, g, &psi0, t, (delta / 10.0).min(1e-4))?;
                let fin = run.trajectory.final_state();
                let profile_err =
                    (0..d).map(|r| (fin[(r, r)].re - direct.psi[r].norm_sqr()).abs()).fold(0.0, f64::max);
                let mut w = CsvWriter::new();
                for p in &provenance {
                    w.comment(p);
                }
                let mut cols = vec!["t".to_string()];
                cols.extend((0..d).map(|r| format!("n_{r}")));
                w.header(&cols);
                for (tk, s) in run.trajectory.times.iter().zip(&run.trajectory.states) {
                    let mut row = vec![*tk];
                    row.extend((0..d).map(|r| s[(r, r)].re));
                    w.row(&row);
                }
                let report = json!({
                    "profile_error_vs_direct": profile_err,
                    "norm_error": (crate::tensor::trace(fin).re - 1.0).abs(),
                    "couplings_real": couplings_hermitian(&run, 1e-12),
                    "resources": run.trajectory.resources,
                });
                (w.finish(), report)
            }
            Prepared::Cd { problem, sched, counterdiabatic, sample_every } => {
                let opts = CdOptions { mode: mode.dme(), counterdiabatic, seed, sample_every };
                let run = run_adiabatic(&problem, &sched, &opts)?;
                checks.check(&run.final_state);
                let mut w = CsvWriter::new();
                for p in &provenance {
                    w.comment(p);
                }
                w.header(&["t", "energy", "residual", "fidelity", "purity"]);
                for k in 0..run.times.len() {
                    w.row(&[run.times[k], run.energies[k], run.residuals[k], run.fidelities[k], run.purities[k]]);
                }
                let report = json!({
                    "final_fidelity": run.final_fidelity(),
                    "final_energy": run.final_energy(),
                    "final_residual": run.final_residual(),
                    "min_gap": run.min_gap,
                    "gap_warning": run.gap_warning,
                });
                (w.finish(), report)
            }
            Prepared::Variance { a, h0, sched, sign, counterdiabatic, doubled } => {
                let opts = CdOptions { mode: mode.dme(), counterdiabatic, seed, sample_every: 0 };
                let mut w = CsvWriter::new();
                for p in &provenance {
                    w.comment(p);
                }
                let report = if doubled {
                    let b = variance_lower_bound(&a, &sched, h0.as_ref(), &opts)?;
                    checks.check(&b.run.final_state);
                    w.header(&["lower_bound"]);
                    w.row(&[b.value]);
                    json!({ "lower_bound": b.value, "final_residual": b.run.final_residual() })
                } else {
                    let o = variance_exact_optimum(&a, h0.as_ref().expect("checked in prepare"), &sched, sign, &opts)?;
                    checks.check(&o.state);
                    w.header(&["initial_variance", "variance", "residual"]);
                    w.row(&[o.initial_variance, o.variance, o.residual]);
                    json!({ "initial_variance": o.initial_variance, "variance": o.variance, "residual": o.residual })
                };
                (w.finish(), report)
            }
        };
        report["density_checks"] = json!({ "checked": checks.checked, "failed": checks.failed });
        Ok(ScenarioOutput { csv, report, provenance })
    }
}

#[derive(Debug, Default)]
struct DensityChecks {
    checked: usize,
    failed: usize,
}

impl DensityChecks {
    fn check(&mut self, s: &ComplexMatrix) {
        self.checked += 1;
        if check_density(s, &Tolerances::default()).is_err() {
            self.failed += 1;
        }
    }

    fn trajectory(&mut self, t: &Trajectory) {
        for s in &t.states {
            self.check(s);
        }
    }
}

fn herald_summary(t: &Trajectory) -> Value {
    if t.herald_probs.is_empty() {
        return Value::Null;
    }
    let n = t.herald_probs.len() as f64;
    let mean = t.herald_probs.iter().sum::<f64>() / n;
    let min = t.herald_probs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = t.herald_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    json!({ "mean": mean, "min": min, "max": max })
}
