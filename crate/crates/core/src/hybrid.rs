//! Variational hybrid workloads: VQE over Pauli observables and
//! QAOA-MaxCut, driven through an [`ExecutionTarget`], plus exact
//! brute-force references for small instances.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{derive_seed, CountsMap, DeviceSpec, NoiseMode, StateVector};
use crate::circuit::{CircuitBatch, GateOp, QuantumCircuit};
use crate::gateway::{execute_logical, Gateway, JobState};

/// Largest instance the brute-force references accept.
pub const BRUTE_FORCE_MAX_QUBITS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HybridError {
    #[error("invalid observable: {0}")]
    InvalidObservable(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("counts do not match measurement basis: {0}")]
    BasisMismatch(String),
    #[error("parameter vector has length {got}, template needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("{n} qubits exceed the brute-force cap of {cap}")]
    SizeCap { n: usize, cap: usize },
    #[error("job rejected: {0}")]
    Rejected(String),
    #[error("execution failed: {0}")]
    Execution(String),
    #[error("run failed after {completed} iterations: {reason}")]
    RunFailed {
        reason: String,
        completed: usize,
        partial: Vec<RestartTrace>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    fn from_char(c: char) -> Option<Self> {
        match c {
            'I' => Some(Pauli::I),
            'X' => Some(Pauli::X),
            'Y' => Some(Pauli::Y),
            'Z' => Some(Pauli::Z),
            _ => None,
        }
    }

    fn as_char(self) -> char {
        match self {
            Pauli::I => 'I',
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }

    fn matrix(self) -> [[Complex64; 2]; 2] {
        let o = Complex64::new(0.0, 0.0);
        let l = Complex64::new(1.0, 0.0);
        let i = Complex64::new(0.0, 1.0);
        match self {
            Pauli::I => [[l, o], [o, l]],
            Pauli::X => [[o, l], [l, o]],
            Pauli::Y => [[o, -i], [i, o]],
            Pauli::Z => [[l, o], [o, -l]],
        }
    }
}

/// Weighted sum of Pauli strings. Character `q` of a string acts on qubit `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, String)>", into = "Vec<(f64, String)>")]
pub struct PauliObservable {
    n_qubits: usize,
    terms: Vec<(f64, Vec<Pauli>)>,
}

impl TryFrom<Vec<(f64, String)>> for PauliObservable {
    type Error = HybridError;

    fn try_from(terms: Vec<(f64, String)>) -> Result<Self, Self::Error> {
        Self::new(terms)
    }
}

impl From<PauliObservable> for Vec<(f64, String)> {
    fn from(o: PauliObservable) -> Self {
        o.terms().collect()
    }
}

impl PauliObservable {
    pub fn new<S: AsRef<str>>(terms: impl IntoIterator<Item = (f64, S)>) -> Result<Self, HybridError> {
        let mut parsed = Vec::new();
        let mut n = None;
        for (coeff, s) in terms {
            let s = s.as_ref();
            if !coeff.is_finite() {
                return Err(HybridError::InvalidObservable(format!("coefficient {coeff} of `{s}`")));
            }
            let paulis = s
                .chars()
                .map(|c| Pauli::from_char(c).ok_or_else(|| HybridError::InvalidObservable(format!("`{c}` in `{s}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            match n {
                None => n = Some(paulis.len()),
                Some(m) if m != paulis.len() => {
                    return Err(HybridError::InvalidObservable(format!(
                        "`{s}` has length {}, expected {m}",
                        paulis.len()
                    )))
                }
                _ => {}
            }
            parsed.push((coeff, paulis));
        }
        match n {
            None => Err(HybridError::InvalidObservable("no terms".into())),
            Some(0) => Err(HybridError::InvalidObservable("empty Pauli string".into())),
            Some(n) => Ok(Self { n_qubits: n, terms: parsed }),
        }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn terms(&self) -> impl Iterator<Item = (f64, String)> + '_ {
        self.terms
            .iter()
            .map(|(c, p)| (*c, p.iter().map(|x| x.as_char()).collect()))
    }

    /// Σ|coeff|, the bound on any expectation value.
    pub fn norm_bound(&self) -> f64 {
        self.terms.iter().map(|(c, _)| c.abs()).sum()
    }

    /// Groups of qubit-wise commuting terms, greedily in term order, each
    /// with the basis it is measured in.
    pub fn measurement_groups(&self) -> Vec<MeasurementBasis> {
        let mut groups: Vec<Vec<Option<Pauli>>> = Vec::new();
        for (_, term) in &self.terms {
            if term.iter().all(|&p| p == Pauli::I) {
                continue;
            }
            let fits = |g: &Vec<Option<Pauli>>| {
                term.iter()
                    .zip(g)
                    .all(|(&p, &b)| p == Pauli::I || b.is_none() || b == Some(p))
            };
            match groups.iter_mut().find(|g| fits(g)) {
                Some(g) => {
                    for (slot, &p) in g.iter_mut().zip(term) {
                        if p != Pauli::I {
                            *slot = Some(p);
                        }
                    }
                }
                None => groups.push(term.iter().map(|&p| (p != Pauli::I).then_some(p)).collect()),
            }
        }
        if groups.is_empty() {
            groups.push(vec![None; self.n_qubits]);
        }
        groups
            .into_iter()
            .map(|g| MeasurementBasis(g.into_iter().map(|b| b.unwrap_or(Pauli::Z)).collect()))
            .collect()
    }

    /// Exact ⟨ψ|O|ψ⟩.
    pub fn expectation_statevector(&self, psi: &StateVector) -> f64 {
        let n = self.n_qubits;
        let amps = psi.amplitudes();
        let mut total = 0.0;
        for (coeff, term) in &self.terms {
            let mut flip = 0usize;
            for (q, &p) in term.iter().enumerate() {
                if matches!(p, Pauli::X | Pauli::Y) {
                    flip |= 1 << (n - 1 - q);
                }
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for (b, &a) in amps.iter().enumerate() {
                // P|b⟩ = phase · |b ^ flip⟩
                let mut phase = Complex64::new(1.0, 0.0);
                for (q, &p) in term.iter().enumerate() {
                    let bit = (b >> (n - 1 - q)) & 1;
                    phase *= match (p, bit) {
                        (Pauli::Z, 1) => Complex64::new(-1.0, 0.0),
                        (Pauli::Y, 0) => Complex64::new(0.0, 1.0),
                        (Pauli::Y, 1) => Complex64::new(0.0, -1.0),
                        _ => Complex64::new(1.0, 0.0),
                    };
                }
                acc += amps[b ^ flip].conj() * phase * a;
            }
            total += coeff * acc.re;
        }
        total
    }

    /// Dense 2ⁿ×2ⁿ matrix of the observable.
    pub fn to_matrix(&self) -> DMatrix<Complex64> {
        let dim = 1usize << self.n_qubits;
        let mut m = DMatrix::<Complex64>::zeros(dim, dim);
        for (coeff, term) in &self.terms {
            let mut k = DMatrix::<Complex64>::identity(1, 1);
            for &p in term {
                let pm = p.matrix();
                let pm = DMatrix::from_fn(2, 2, |r, c| pm[r][c]);
                k = k.kronecker(&pm);
            }
            m += k * Complex64::new(*coeff, 0.0);
        }
        m
    }
}

impl fmt::Display for PauliObservable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.terms().map(|(c, s)| format!("{c}*{s}")).collect();
        f.write_str(&parts.join(" + "))
    }
}

/// Per-qubit measurement basis; Z means measure as is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementBasis(pub Vec<Pauli>);

impl MeasurementBasis {
    pub fn computational(n: usize) -> Self {
        Self(vec![Pauli::Z; n])
    }

    /// Appends the basis change (H for X, S†H for Y) and measures every qubit.
    pub fn append_to(&self, c: &mut QuantumCircuit) {
        for (q, &p) in self.0.iter().enumerate() {
            match p {
                Pauli::X => {
                    c.h(q);
                }
                Pauli::Y => {
                    c.rz(q, -PI / 2.0).h(q);
                }
                _ => {}
            }
        }
        c.measure_all();
    }
}

impl fmt::Display for MeasurementBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|p| write!(f, "{}", p.as_char()))
    }
}

fn parity_sign(bits: &[u8], term: &[Pauli]) -> f64 {
    let ones = term
        .iter()
        .zip(bits)
        .filter(|(&p, &b)| p != Pauli::I && b == b'1')
        .count();
    if ones % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Σ coeff·⟨term⟩ over the terms measurable in `basis`, from counts taken
/// in that basis. Fails if any term needs a different basis or the
/// bitstrings do not cover all qubits.
pub fn expectation_from_counts(
    counts: &CountsMap,
    obs: &PauliObservable,
    basis: &MeasurementBasis,
) -> Result<f64, HybridError> {
    expectation_subset(counts, obs, basis, false)
}

fn compatible(term: &[Pauli], basis: &MeasurementBasis) -> bool {
    term.iter().zip(&basis.0).all(|(&p, &b)| p == Pauli::I || p == b)
}

fn expectation_subset(
    counts: &CountsMap,
    obs: &PauliObservable,
    basis: &MeasurementBasis,
    skip_incompatible: bool,
) -> Result<f64, HybridError> {
    if basis.0.len() != obs.n_qubits {
        return Err(HybridError::BasisMismatch(format!(
            "basis `{basis}` for a {}-qubit observable",
            obs.n_qubits
        )));
    }
    let shots: u64 = counts.values().sum();
    if shots == 0 {
        return Err(HybridError::BasisMismatch("no counts".into()));
    }
    if let Some(bad) = counts.keys().find(|k| k.len() != obs.n_qubits || !k.bytes().all(|b| b == b'0' || b == b'1')) {
        return Err(HybridError::BasisMismatch(format!(
            "bitstring `{bad}` does not cover {} qubits",
            obs.n_qubits
        )));
    }
    let mut value = 0.0;
    for (coeff, term) in &obs.terms {
        if !compatible(term, basis) {
            if skip_incompatible {
                continue;
            }
            let s: String = term.iter().map(|p| p.as_char()).collect();
            return Err(HybridError::BasisMismatch(format!("term `{s}` is not diagonal in basis `{basis}`")));
        }
        let mut acc = 0.0;
        for (bits, &n) in counts {
            acc += parity_sign(bits.as_bytes(), term) * n as f64;
        }
        value += coeff * acc / shots as f64;
    }
    Ok(value)
}

/// Combines per-group counts: each term is taken from the first group
/// whose basis measures it.
pub fn expectation_from_groups(
    counts: &[CountsMap],
    obs: &PauliObservable,
    groups: &[MeasurementBasis],
) -> Result<f64, HybridError> {
    if counts.len() != groups.len() {
        return Err(HybridError::BasisMismatch(format!(
            "{} count maps for {} groups",
            counts.len(),
            groups.len()
        )));
    }
    let mut value = 0.0;
    for (coeff, term) in &obs.terms {
        let Some(g) = groups.iter().position(|b| compatible(term, b)) else {
            let s: String = term.iter().map(|p| p.as_char()).collect();
            return Err(HybridError::BasisMismatch(format!("no group measures `{s}`")));
        };
        let single = PauliObservable {
            n_qubits: obs.n_qubits,
            terms: vec![(*coeff, term.clone())],
        };
        value += expectation_subset(&counts[g], &single, &groups[g], false)?;
    }
    Ok(value)
}

/// Layered hardware-efficient ansatz: ry then rz on every qubit per layer,
/// with a cz ring between consecutive layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnsatzTemplate {
    pub n_qubits: usize,
    pub layers: usize,
}

impl AnsatzTemplate {
    pub fn new(n_qubits: usize, layers: usize) -> Self {
        Self { n_qubits, layers }
    }

    pub fn n_params(&self) -> usize {
        2 * self.n_qubits * self.layers
    }

    fn entangle(&self, c: &mut QuantumCircuit) {
        match self.n_qubits {
            0 | 1 => {}
            2 => {
                c.cz(0, 1);
            }
            n => {
                for q in 0..n {
                    c.cz(q, (q + 1) % n);
                }
            }
        }
    }

    /// The state-preparation circuit, without measurements.
    pub fn build(&self, params: &[f64]) -> Result<QuantumCircuit, HybridError> {
        if params.len() != self.n_params() {
            return Err(HybridError::ParamCount {
                expected: self.n_params(),
                got: params.len(),
            });
        }
        let mut c = QuantumCircuit::new("ansatz", self.n_qubits);
        let mut it = params.iter();
        for layer in 0..self.layers {
            if layer > 0 {
                self.entangle(&mut c);
            }
            for q in 0..self.n_qubits {
                let ry = *it.next().expect("length checked");
                let rz = *it.next().expect("length checked");
                c.ry(q, ry).rz(q, rz);
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMethod {
    Spsa,
    NelderMead,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpsaGains {
    pub a: f64,
    pub c: f64,
    #[serde(rename = "A")]
    pub big_a: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for SpsaGains {
    fn default() -> Self {
        Self {
            a: 0.2,
            c: 0.1,
            big_a: 10.0,
            alpha: 0.602,
            gamma: 0.101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: OptimizerMethod,
    pub max_iterations: usize,
    pub gains: SpsaGains,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: OptimizerMethod::Spsa,
            max_iterations: 150,
            gains: SpsaGains::default(),
            seed: 0,
            restarts: 4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), HybridError> {
        let g = &self.gains;
        if self.max_iterations == 0 || self.restarts == 0 {
            return Err(HybridError::InvalidConfig("iterations and restarts must be at least 1".into()));
        }
        if [g.a, g.c, g.big_a, g.alpha, g.gamma].iter().any(|v| !(*v > 0.0)) {
            return Err(HybridError::InvalidConfig("gains must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub params: Vec<f64>,
    pub energy: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub restart: usize,
    pub iterations: Vec<IterationRecord>,
    pub final_params: Vec<f64>,
    pub final_energy: f64,
}

impl RestartTrace {
    fn new(restart: usize) -> Self {
        Self {
            restart,
            iterations: Vec::new(),
            final_params: Vec::new(),
            final_energy: f64::NAN,
        }
    }

    fn record(&mut self, params: &[f64], energy: f64) {
        let best = self.iterations.last().map_or(energy, |r| r.best_so_far.min(energy));
        self.iterations.push(IterationRecord {
            iteration: self.iterations.len(),
            params: params.to_vec(),
            energy,
            best_so_far: best,
        });
    }
}

/// Where circuits run: the local simulator or a gateway device.
pub trait ExecutionTarget: Sync {
    /// Counts per circuit over each circuit's measured qubits.
    fn run(&self, circuits: &[QuantumCircuit], shots: u64, seed: u64) -> Result<Vec<CountsMap>, HybridError>;

    /// Whether independent restarts may call `run` from several threads
    /// without changing results.
    fn concurrent(&self) -> bool {
        true
    }
}

/// In-process execution on a device spec (transpiled like the gateway does).
#[derive(Debug, Clone)]
pub struct LocalTarget {
    pub spec: DeviceSpec,
    pub mode: NoiseMode,
}

impl LocalTarget {
    /// Noise-free all-to-all device.
    pub fn ideal(n_qubits: usize) -> Self {
        Self {
            spec: DeviceSpec::ideal("local-ideal", n_qubits),
            mode: NoiseMode::Noiseless,
        }
    }

    pub fn device(spec: DeviceSpec, mode: NoiseMode) -> Self {
        Self { spec, mode }
    }
}

impl ExecutionTarget for LocalTarget {
    fn run(&self, circuits: &[QuantumCircuit], shots: u64, seed: u64) -> Result<Vec<CountsMap>, HybridError> {
        circuits
            .iter()
            .enumerate()
            .map(|(i, c)| {
                execute_logical(c, shots, &self.spec, derive_seed(seed, i as u64), self.mode)
                    .map_err(|e| HybridError::Execution(e.to_string()))
            })
            .collect()
    }
}

/// Submits every evaluation as a job to a gateway device and drains the
/// queue in virtual time. Sampling seeds come from the gateway, so the
/// `seed` argument is unused and restarts run one after another.
pub struct GatewayTarget {
    pub gateway: Arc<Gateway>,
    pub device_id: String,
    pub project_id: String,
    pub token: String,
    clock: Mutex<f64>,
}

impl GatewayTarget {
    pub fn new(gateway: Arc<Gateway>, device_id: &str, project_id: &str, token: &str, start: f64) -> Self {
        Self {
            gateway,
            device_id: device_id.into(),
            project_id: project_id.into(),
            token: token.into(),
            clock: Mutex::new(start),
        }
    }

    pub fn now(&self) -> f64 {
        *self.clock.lock()
    }
}

impl ExecutionTarget for GatewayTarget {
    fn run(&self, circuits: &[QuantumCircuit], shots: u64, _seed: u64) -> Result<Vec<CountsMap>, HybridError> {
        let mut clock = self.clock.lock();
        let batch = CircuitBatch::new(circuits.to_vec(), shots).map_err(|e| HybridError::Execution(e.to_string()))?;
        let doc = self
            .gateway
            .submit_job(&self.device_id, batch, &self.project_id, &self.token, *clock)
            .map_err(|e| HybridError::Execution(e.to_string()))?;
        if doc.state == JobState::Rejected {
            return Err(HybridError::Rejected(doc.reason.unwrap_or_default()));
        }
        self.gateway
            .run_until_idle(&self.device_id, *clock)
            .map_err(|e| HybridError::Execution(e.to_string()))?;
        let res = self
            .gateway
            .fetch_results(&doc.job_id)
            .map_err(|e| HybridError::Execution(e.to_string()))?;
        match (res.state, res.counts, res.usage) {
            (JobState::Done, Some(counts), Some(usage)) => {
                *clock = clock.max(usage.finished_at);
                Ok(counts)
            }
            (state, ..) => Err(HybridError::Execution(format!(
                "job {} ended {state:?}: {}",
                doc.job_id,
                res.reason.unwrap_or_else(|| "device did not run it".into())
            ))),
        }
    }

    fn concurrent(&self) -> bool {
        false
    }
}

/// Energy estimator for one parametrized state family.
struct Objective<'a> {
    prepare: &'a (dyn Fn(&[f64]) -> Result<QuantumCircuit, HybridError> + Sync),
    obs: &'a PauliObservable,
    groups: Vec<MeasurementBasis>,
    target: &'a dyn ExecutionTarget,
    shots: u64,
}

impl Objective<'_> {
    fn circuits(&self, params: &[f64]) -> Result<Vec<QuantumCircuit>, HybridError> {
        let base = (self.prepare)(params)?;
        Ok(self
            .groups
            .iter()
            .map(|b| {
                let mut c = base.clone();
                b.append_to(&mut c);
                c
            })
            .collect())
    }

    fn energy(&self, params: &[f64], seed: u64) -> Result<f64, HybridError> {
        let counts = self.target.run(&self.circuits(params)?, self.shots, seed)?;
        expectation_from_groups(&counts, self.obs, &self.groups)
    }
}

fn random_start(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-PI..PI)).collect()
}

fn spsa(
    obj: &Objective<'_>,
    x0: Vec<f64>,
    cfg: &OptimizerConfig,
    seed: u64,
    trace: &mut RestartTrace,
) -> Result<Vec<f64>, HybridError> {
    let g = cfg.gains;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5953_5041));
    let mut eval = 0u64;
    let mut next_seed = || {
        eval += 1;
        derive_seed(seed, eval)
    };
    let mut theta = x0;
    for k in 0..cfg.max_iterations {
        let ak = g.a / (k as f64 + 1.0 + g.big_a).powf(g.alpha);
        let ck = g.c / (k as f64 + 1.0).powf(g.gamma);
        let delta: Vec<f64> = (0..theta.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let plus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t + ck * d).collect();
        let minus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t - ck * d).collect();
        let fp = obj.energy(&plus, next_seed())?;
        let fm = obj.energy(&minus, next_seed())?;
        let scale = (fp - fm) / (2.0 * ck);
        for (t, d) in theta.iter_mut().zip(&delta) {
            *t -= ak * scale * d;
        }
        let e = obj.energy(&theta, next_seed())?;
        trace.record(&theta, e);
    }
    Ok(theta)
}

fn nelder_mead(
    obj: &Objective<'_>,
    x0: Vec<f64>,
    cfg: &OptimizerConfig,
    seed: u64,
    trace: &mut RestartTrace,
) -> Result<Vec<f64>, HybridError> {
    let n = x0.len();
    let mut eval = 0u64;
    let mut f = |x: &[f64]| {
        eval += 1;
        obj.energy(x, derive_seed(seed, eval))
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = f(&x0)?;
    simplex.push((x0.clone(), v0));
    for i in 0..n {
        let mut x = x0.clone();
        x[i] += 0.5;
        let v = f(&x)?;
        simplex.push((x, v));
    }
    let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect() };
    for _ in 0..cfg.max_iterations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let reflected = lerp(&centroid, &worst.0, -1.0);
        let fr = f(&reflected)?;
        if fr < simplex[0].1 {
            let expanded = lerp(&centroid, &worst.0, -2.0);
            let fe = f(&expanded)?;
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
        } else {
            let contracted = lerp(&centroid, &worst.0, 0.5);
            let fc = f(&contracted)?;
            if fc < worst.1 {
                simplex[n] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let x = lerp(&best, &vertex.0, 0.5);
                    let v = f(&x)?;
                    *vertex = (x, v);
                }
            }
        }
        let best = simplex.iter().min_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty");
        trace.record(&best.0, best.1);
    }
    Ok(simplex.into_iter().min_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty").0)
}

fn run_restart(obj: &Objective<'_>, n_params: usize, cfg: &OptimizerConfig, restart: usize) -> Result<RestartTrace, (HybridError, RestartTrace)> {
    let seed = derive_seed(cfg.seed, restart as u64 + 1);
    let x0 = random_start(n_params, seed);
    let mut trace = RestartTrace::new(restart);
    let result = match cfg.method {
        OptimizerMethod::Spsa => spsa(obj, x0, cfg, seed, &mut trace),
        OptimizerMethod::NelderMead => nelder_mead(obj, x0, cfg, seed, &mut trace),
    };
    let finish = result.and_then(|theta| {
        let e = obj.energy(&theta, derive_seed(seed, u64::MAX))?;
        Ok((theta, e))
    });
    match finish {
        Ok((theta, e)) => {
            trace.final_params = theta;
            trace.final_energy = e;
            Ok(trace)
        }
        Err(err) => Err((err, trace)),
    }
}

fn run_restarts(obj: &Objective<'_>, n_params: usize, cfg: &OptimizerConfig) -> Result<Vec<RestartTrace>, HybridError> {
    cfg.validate()?;
    let results: Vec<Result<RestartTrace, (HybridError, RestartTrace)>> = if obj.target.concurrent() && cfg.restarts > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..cfg.restarts)
                .map(|r| s.spawn(move || run_restart(obj, n_params, cfg, r)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("restart thread panicked")).collect()
        })
    } else {
        let mut out = Vec::new();
        for r in 0..cfg.restarts {
            let res = run_restart(obj, n_params, cfg, r);
            let failed = res.is_err();
            out.push(res);
            if failed {
                break;
            }
        }
        out
    };
    let mut traces = Vec::new();
    let mut failure = None;
    for r in results {
        match r {
            Ok(t) => traces.push(t),
            Err((e, t)) => {
                failure.get_or_insert(e);
                traces.push(t);
            }
        }
    }
    match failure {
        None => Ok(traces),
        Some(e) => Err(HybridError::RunFailed {
            reason: e.to_string(),
            completed: traces.iter().map(|t| t.iterations.len()).sum(),
            partial: traces,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqeReport {
    pub best_energy: f64,
    pub best_params: Vec<f64>,
    pub restarts: Vec<RestartTrace>,
}

fn best_of(traces: &[RestartTrace]) -> &RestartTrace {
    traces
        .iter()
        .min_by(|a, b| a.final_energy.total_cmp(&b.final_energy).then(a.restart.cmp(&b.restart)))
        .expect("at least one restart")
}

/// Minimizes ⟨obs⟩ over the ansatz; the reported energy is the smallest
/// final energy over the restarts.
pub fn run_vqe(
    ansatz: &AnsatzTemplate,
    obs: &PauliObservable,
    cfg: &OptimizerConfig,
    target: &dyn ExecutionTarget,
    shots: u64,
) -> Result<VqeReport, HybridError> {
    if ansatz.n_qubits != obs.n_qubits() {
        return Err(HybridError::InvalidObservable(format!(
            "observable on {} qubits, ansatz on {}",
            obs.n_qubits(),
            ansatz.n_qubits
        )));
    }
    let prepare = |p: &[f64]| ansatz.build(p);
    let obj = Objective {
        prepare: &prepare,
        obs,
        groups: obs.measurement_groups(),
        target,
        shots,
    };
    let restarts = run_restarts(&obj, ansatz.n_params(), cfg)?;
    let best = best_of(&restarts);
    Ok(VqeReport {
        best_energy: best.final_energy,
        best_params: best.final_params.clone(),
        restarts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Graph {
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self, HybridError> {
        let g = Self { n_nodes, edges };
        g.validate()?;
        Ok(g)
    }

    pub fn cycle(n: usize) -> Self {
        Self {
            n_nodes: n,
            edges: (0..n).map(|i| (i, (i + 1) % n)).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), HybridError> {
        if self.n_nodes < 2 || self.edges.is_empty() {
            return Err(HybridError::InvalidGraph("need at least two nodes and one edge".into()));
        }
        for &(a, b) in &self.edges {
            if a >= self.n_nodes || b >= self.n_nodes || a == b {
                return Err(HybridError::InvalidGraph(format!("bad edge ({a}, {b})")));
            }
        }
        let mut seen = vec![false; self.n_nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(a, b) in &self.edges {
                for (x, y) in [(a, b), (b, a)] {
                    if x == v && !seen[y] {
                        seen[y] = true;
                        stack.push(y);
                    }
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(HybridError::InvalidGraph("graph is not connected".into()));
        }
        Ok(())
    }

    /// Edges crossing the partition given by a bitstring (node 0 leftmost).
    pub fn cut_value(&self, bits: &str) -> usize {
        let b = bits.as_bytes();
        self.edges.iter().filter(|&&(x, y)| b[x] != b[y]).count()
    }

    /// Σ_edges ½ Z_a Z_b, equal to |E|/2 − cut on basis states.
    pub fn cost_observable(&self) -> PauliObservable {
        let terms: Vec<(f64, String)> = self
            .edges
            .iter()
            .map(|&(a, b)| {
                let s: String = (0..self.n_nodes).map(|q| if q == a || q == b { 'Z' } else { 'I' }).collect();
                (0.5, s)
            })
            .collect();
        PauliObservable::new(terms).expect("well-formed cost terms")
    }

    /// p-layer QAOA state: H on all, then per layer exp(-iγ Z_a Z_b) on
    /// each edge and rx(2β) on each node. `params` = [γ_1..γ_p, β_1..β_p].
    pub fn qaoa_circuit(&self, params: &[f64]) -> Result<QuantumCircuit, HybridError> {
        if !params.len().is_multiple_of(2) || params.is_empty() {
            return Err(HybridError::ParamCount {
                expected: 2 * (params.len() / 2).max(1),
                got: params.len(),
            });
        }
        let p = params.len() / 2;
        let mut c = QuantumCircuit::new("qaoa", self.n_nodes);
        for q in 0..self.n_nodes {
            c.h(q);
        }
        for layer in 0..p {
            let (gamma, beta) = (params[layer], params[p + layer]);
            for &(a, b) in &self.edges {
                c.cx(a, b).rz(b, 2.0 * gamma).cx(a, b);
            }
            for q in 0..self.n_nodes {
                c.rx(q, 2.0 * beta);
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaoaReport {
    pub best_cut: usize,
    pub best_bitstring: String,
    pub best_params: Vec<f64>,
    pub distribution: CountsMap,
    pub restarts: Vec<RestartTrace>,
}

/// Optimizes p-layer QAOA angles against the cut observable, then samples
/// the best angles once more and reports the best cut seen in those samples.
pub fn run_qaoa_maxcut(
    graph: &Graph,
    p: usize,
    cfg: &OptimizerConfig,
    target: &dyn ExecutionTarget,
    shots: u64,
) -> Result<QaoaReport, HybridError> {
    graph.validate()?;
    if p == 0 {
        return Err(HybridError::InvalidConfig("p must be at least 1".into()));
    }
    let obs = graph.cost_observable();
    let prepare = |x: &[f64]| graph.qaoa_circuit(x);
    let obj = Objective {
        prepare: &prepare,
        obs: &obs,
        groups: vec![MeasurementBasis::computational(graph.n_nodes)],
        target,
        shots,
    };
    let restarts = run_restarts(&obj, 2 * p, cfg)?;
    let best = best_of(&restarts);
    let circuits = obj.circuits(&best.final_params)?;
    let distribution = target
        .run(&circuits, shots, derive_seed(cfg.seed, 0x5141_4f41))?
        .pop()
        .expect("one circuit");
    let (best_bitstring, best_cut) = distribution
        .keys()
        .map(|b| (b.clone(), graph.cut_value(b)))
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .expect("non-empty counts");
    Ok(QaoaReport {
        best_cut,
        best_bitstring,
        best_params: best.final_params.clone(),
        distribution,
        restarts,
    })
}

/// Smallest eigenvalue by dense Hermitian eigendecomposition.
pub fn brute_force_ground_energy(obs: &PauliObservable) -> Result<f64, HybridError> {
    if obs.n_qubits() > BRUTE_FORCE_MAX_QUBITS {
        return Err(HybridError::SizeCap {
            n: obs.n_qubits(),
            cap: BRUTE_FORCE_MAX_QUBITS,
        });
    }
    let eig = obs.to_matrix().symmetric_eigenvalues();
    Ok(eig.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Maximum cut by enumerating all 2ⁿ partitions.
pub fn brute_force_maxcut(graph: &Graph) -> Result<usize, HybridError> {
    graph.validate()?;
    if graph.n_nodes > BRUTE_FORCE_MAX_QUBITS {
        return Err(HybridError::SizeCap {
            n: graph.n_nodes,
            cap: BRUTE_FORCE_MAX_QUBITS,
        });
    }
    Ok((0u32..1 << graph.n_nodes)
        .map(|m| {
            graph
                .edges
                .iter()
                .filter(|&&(a, b)| (m >> a) & 1 != (m >> b) & 1)
                .count()
        })
        .max()
        .unwrap_or(0))
}

/// Exact ⟨obs⟩ for a measurement-free state-preparation circuit.
pub fn exact_expectation(prep: &QuantumCircuit, obs: &PauliObservable) -> f64 {
    let mut sv = StateVector::zero(prep.n_qubits);
    prep.ops.iter().filter(|op| op.gate.is_unitary()).for_each(|op: &GateOp| sv.apply(op));
    obs.expectation_statevector(&sv)
}

/// Input document for the hybrid runners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Observable(PauliObservable),
    Graph(Graph),
}

impl Problem {
    pub fn parse(document: &str) -> Result<Self, String> {
        let p: Problem = serde_json::from_str(document).map_err(|e| e.to_string())?;
        if let Problem::Graph(g) = &p {
            g.validate().map_err(|e| e.to_string())?;
        }
        Ok(p)
    }
}

/// Sorted (bitstring, probability) view of counts.
pub fn normalized(counts: &CountsMap) -> BTreeMap<String, f64> {
    let total: u64 = counts.values().sum();
    counts
        .iter()
        .map(|(k, &v)| (k.clone(), v as f64 / total.max(1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(terms: &[(f64, &str)]) -> PauliObservable {
        PauliObservable::new(terms.iter().map(|&(c, s)| (c, s))).unwrap()
    }

    fn counts(pairs: &[(&str, u64)]) -> CountsMap {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn expectation_examples() {
        let z = obs(&[(1.0, "Z")]);
        let b1 = MeasurementBasis::computational(1);
        assert_eq!(expectation_from_counts(&counts(&[("0", 500), ("1", 500)]), &z, &b1).unwrap(), 0.0);
        let zz = obs(&[(1.0, "ZZ")]);
        let b2 = MeasurementBasis::computational(2);
        assert_eq!(expectation_from_counts(&counts(&[("00", 1000)]), &zz, &b2).unwrap(), 1.0);
        assert_eq!(expectation_from_counts(&counts(&[("01", 1000)]), &zz, &b2).unwrap(), -1.0);
        let xx = obs(&[(1.0, "XX")]);
        assert!(matches!(
            expectation_from_counts(&counts(&[("00", 1)]), &xx, &b2),
            Err(HybridError::BasisMismatch(_))
        ));
        assert!(matches!(
            expectation_from_counts(&counts(&[("0", 1)]), &zz, &b2),
            Err(HybridError::BasisMismatch(_))
        ));
    }

    #[test]
    fn observable_validation() {
        assert!(PauliObservable::new([(1.0, "ZQ")]).is_err());
        assert!(PauliObservable::new([(1.0, "Z"), (1.0, "ZZ")]).is_err());
        assert!(PauliObservable::new(Vec::<(f64, &str)>::new()).is_err());
        let o: PauliObservable = serde_json::from_str(r#"[[1.0, "ZZ"], [0.5, "XI"]]"#).unwrap();
        assert_eq!(o.n_qubits(), 2);
        assert_eq!(serde_json::to_string(&o).unwrap(), r#"[[1.0,"ZZ"],[0.5,"XI"]]"#);
    }

    #[test]
    fn grouping_is_qubit_wise() {
        let o = obs(&[(1.0, "ZZ"), (1.0, "ZI"), (1.0, "XX"), (1.0, "IX"), (1.0, "YI")]);
        let groups: Vec<String> = o.measurement_groups().iter().map(|g| g.to_string()).collect();
        assert_eq!(groups, ["ZZ", "XX", "YZ"]);
    }

    #[test]
    fn brute_force_examples() {
        assert_eq!(brute_force_ground_energy(&obs(&[(1.0, "ZZ")])).unwrap(), -1.0);
        let e = brute_force_ground_energy(&obs(&[(0.5, "ZI"), (0.5, "IZ")])).unwrap();
        assert!((e + 1.0).abs() < 1e-12);
        let e = brute_force_ground_energy(&obs(&[(1.0, "XX"), (1.0, "YY"), (1.0, "ZZ")])).unwrap();
        assert!((e + 3.0).abs() < 1e-9);
        assert_eq!(brute_force_maxcut(&Graph::cycle(4)).unwrap(), 4);
        assert_eq!(brute_force_maxcut(&Graph::new(3, vec![(0, 1), (1, 2), (2, 0)]).unwrap()).unwrap(), 2);
        assert_eq!(brute_force_maxcut(&Graph::new(2, vec![(0, 1)]).unwrap()).unwrap(), 1);
        assert!(matches!(Graph::new(3, vec![(0, 1)]), Err(HybridError::InvalidGraph(_))));
    }

    #[test]
    fn statevector_expectation_matches_basis_rotation() {
        // ry(π/2) puts qubit 0 in |+⟩: ⟨X⟩ = 1, ⟨Z⟩ = 0; |1⟩ on qubit 1
        let mut c = QuantumCircuit::new("t", 2);
        c.ry(0, PI / 2.0).x(1);
        assert!((exact_expectation(&c, &obs(&[(1.0, "XI")])) - 1.0).abs() < 1e-12);
        assert!(exact_expectation(&c, &obs(&[(1.0, "ZI")])).abs() < 1e-12);
        assert!((exact_expectation(&c, &obs(&[(1.0, "IZ")])) + 1.0).abs() < 1e-12);
        let mut y = QuantumCircuit::new("y", 1);
        y.rx(0, -PI / 2.0);
        assert!((exact_expectation(&y, &obs(&[(1.0, "Y")])) - 1.0).abs() < 1e-12);
        let target = LocalTarget::ideal(1);
        let basis = MeasurementBasis(vec![Pauli::Y]);
        let mut m = y.clone();
        basis.append_to(&mut m);
        let counts = target.run(&[m], 1000, 1).unwrap();
        assert_eq!(expectation_from_counts(&counts[0], &obs(&[(1.0, "Y")]), &basis).unwrap(), 1.0);
    }

    #[test]
    fn ansatz_shape() {
        let a = AnsatzTemplate::new(3, 2);
        assert_eq!(a.n_params(), 12);
        let c = a.build(&[0.1; 12]).unwrap();
        assert_eq!(c.ops.iter().filter(|o| o.gate == crate::circuit::Gate::Cz).count(), 3);
        assert!(matches!(a.build(&[0.0; 3]), Err(HybridError::ParamCount { .. })));
    }

    #[test]
    fn single_qubit_vqe_converges() {
        let cfg = OptimizerConfig {
            max_iterations: 60,
            restarts: 2,
            seed: 5,
            ..Default::default()
        };
        let r = run_vqe(&AnsatzTemplate::new(1, 1), &obs(&[(1.0, "Z")]), &cfg, &LocalTarget::ideal(1), 2000).unwrap();
        assert!(r.best_energy <= -0.95, "{}", r.best_energy);
        assert_eq!(r.restarts.len(), 2);
        for t in &r.restarts {
            assert!(t.iterations.windows(2).all(|w| w[1].best_so_far <= w[0].best_so_far));
        }
    }

    #[test]
    fn nelder_mead_runs() {
        let cfg = OptimizerConfig {
            method: OptimizerMethod::NelderMead,
            max_iterations: 40,
            restarts: 1,
            ..Default::default()
        };
        let r = run_vqe(&AnsatzTemplate::new(1, 1), &obs(&[(1.0, "Z")]), &cfg, &LocalTarget::ideal(1), 2000).unwrap();
        assert!(r.best_energy <= -0.9, "{}", r.best_energy);
    }

    #[test]
    fn qaoa_single_edge_and_triangle() {
        let cfg = OptimizerConfig {
            max_iterations: 30,
            restarts: 2,
            ..Default::default()
        };
        let edge = Graph::new(2, vec![(0, 1)]).unwrap();
        assert_eq!(run_qaoa_maxcut(&edge, 1, &cfg, &LocalTarget::ideal(2), 500).unwrap().best_cut, 1);
        let tri = Graph::new(3, vec![(0, 1), (1, 2), (2, 0)]).unwrap();
        assert_eq!(run_qaoa_maxcut(&tri, 1, &cfg, &LocalTarget::ideal(3), 500).unwrap().best_cut, 2);
    }

    #[test]
    fn problem_documents() {
        let p = Problem::parse(r#"{"observable": [[1.0, "ZZ"]]}"#).unwrap();
        assert!(matches!(p, Problem::Observable(_)));
        let g = Problem::parse(r#"{"graph": {"n_nodes": 4, "edges": [[0,1],[1,2],[2,3],[3,0]]}}"#).unwrap();
        assert_eq!(g, Problem::Graph(Graph::cycle(4)));
        assert!(Problem::parse(r#"{"graph": {"n_nodes": 3, "edges": [[0,1]]}}"#).is_err());
    }
}
