//! Exact statevector execution with calibration-driven trajectory noise.
//!
//! Noise is sampled per shot: after each gate a uniformly random non-identity
//! Pauli hits the gate's qubits with probability `1 - F`, each involved qubit
//! dephases (Z) with probability `1 - exp(-duration / T2)`, and every measured
//! bit flips with probability `1 - f_ro`. Shots whose trajectory draws no
//! gate error reuse the ideal output distribution.
//!
//! Only qubits that some op touches are simulated; idle wires stay in |0⟩
//! and are never read out, so they do not count against the qubit cap.

use std::collections::BTreeMap;

use num_complex::Complex64;
use parking_lot::RwLock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{memory_estimate, validate_circuit, Gate, GateOp, QuantumCircuit, Violation};
use crate::transpiler::{NativeGateSet, Topology};

pub const DEFAULT_QUBIT_CAP: usize = 20;

/// Mixes a base seed with an index (splitmix64 finalizer) so that derived
/// streams for neighbouring indices are unrelated.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut x = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Measurement outcomes keyed by bitstring (qubit 0 leftmost).
pub type CountsMap = BTreeMap<String, u64>;

/// Outcome probabilities keyed by bitstring.
pub type Distribution = BTreeMap<String, f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("circuit uses {active} active qubits, above the cap of {cap} ({memory} needed)")]
    QubitCapExceeded {
        active: usize,
        cap: usize,
        memory: String,
    },
    #[error("circuit has no measurements")]
    NoMeasurements,
    #[error("circuit is not transpiled for the device: {0}")]
    Untranspiled(String),
    #[error("shots must be at least 1")]
    ZeroShots,
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("device `{0}` is already registered")]
    DuplicateDevice(String),
    #[error("invalid device spec: {0}")]
    InvalidSpec(String),
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSnapshot {
    pub f1: f64,
    pub f2: f64,
    pub f_ro: f64,
    pub t2_us: f64,
    /// UTC seconds (or virtual seconds inside a simulation).
    pub taken_at: f64,
}

impl CalibrationSnapshot {
    /// Mid-range values of the published device characteristics.
    pub fn nominal() -> Self {
        Self {
            f1: 0.997,
            f2: 0.95,
            f_ro: 0.95,
            t2_us: 15.0,
            taken_at: 0.0,
        }
    }

    /// No gate, readout or dephasing error at all.
    pub fn perfect() -> Self {
        Self {
            f1: 1.0,
            f2: 1.0,
            f_ro: 1.0,
            t2_us: f64::INFINITY,
            taken_at: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        for (name, f) in [("f1", self.f1), ("f2", self.f2), ("f_ro", self.f_ro)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(BackendError::InvalidCalibration(format!(
                    "{name}={f} outside (0, 1]"
                )));
            }
        }
        if !(self.t2_us > 0.0) {
            return Err(BackendError::InvalidCalibration(format!(
                "t2_us={} must be positive",
                self.t2_us
            )));
        }
        Ok(())
    }
}

/// Sampling intervals for fresh calibration snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRanges {
    pub f1: (f64, f64),
    pub f2: (f64, f64),
    pub f_ro: (f64, f64),
    pub t2_us: (f64, f64),
}

impl Default for CalibrationRanges {
    fn default() -> Self {
        Self {
            f1: (0.995, 0.999),
            f2: (0.94, 0.96),
            f_ro: (0.94, 0.96),
            t2_us: (10.0, 20.0),
        }
    }
}

impl CalibrationRanges {
    pub fn sample(&self, seed: u64, taken_at: f64) -> CalibrationSnapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CalibrationSnapshot {
            f1: rng.gen_range(self.f1.0..=self.f1.1),
            f2: rng.gen_range(self.f2.0..=self.f2.1),
            f_ro: rng.gen_range(self.f_ro.0..=self.f_ro.1),
            t2_us: rng.gen_range(self.t2_us.0..=self.t2_us.1),
            taken_at,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDurations {
    pub single_qubit_ns: f64,
    pub two_qubit_ns: f64,
    pub readout_ns: f64,
}

impl Default for GateDurations {
    fn default() -> Self {
        Self {
            single_qubit_ns: 40.0,
            two_qubit_ns: 120.0,
            readout_ns: 1500.0,
        }
    }
}

impl GateDurations {
    pub fn for_gate(&self, gate: Gate) -> f64 {
        match gate {
            Gate::Barrier => 0.0,
            Gate::Measure => self.readout_ns,
            g if g.is_two_qubit() => self.two_qubit_ns,
            _ => self.single_qubit_ns,
        }
    }

    /// Wall duration of one shot in seconds: the critical path through the
    /// gates plus one readout when anything is measured. Barriers align
    /// the qubits they span.
    pub fn circuit_duration_s(&self, c: &QuantumCircuit) -> f64 {
        let mut ready = vec![0.0f64; c.n_qubits];
        let mut measured = false;
        for op in &c.ops {
            match op.gate {
                Gate::Measure => measured = true,
                Gate::Barrier => {
                    let t = op.qubits.iter().map(|&q| ready[q]).fold(0.0, f64::max);
                    op.qubits.iter().for_each(|&q| ready[q] = t);
                }
                g => {
                    let start = op.qubits.iter().map(|&q| ready[q]).fold(0.0, f64::max);
                    let end = start + self.for_gate(g);
                    op.qubits.iter().for_each(|&q| ready[q] = end);
                }
            }
        }
        let gates = ready.into_iter().fold(0.0, f64::max);
        let readout = if measured { self.readout_ns } else { 0.0 };
        (gates + readout) * 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub device_id: String,
    pub topology: Topology,
    pub native_gates: NativeGateSet,
    pub calibration: CalibrationSnapshot,
    pub gate_durations_ns: GateDurations,
}

impl DeviceSpec {
    /// Five qubits in a star around physical qubit 0.
    pub fn helmi_sim() -> Self {
        Self {
            device_id: "helmi-sim".into(),
            topology: Topology::star(5),
            native_gates: NativeGateSet::superconducting(),
            calibration: CalibrationSnapshot::nominal(),
            gate_durations_ns: GateDurations::default(),
        }
    }

    /// 25 qubits on a 5×5 nearest-neighbour grid.
    pub fn qal9000_sim() -> Self {
        Self {
            device_id: "qal9000-sim".into(),
            topology: Topology::grid(5, 5),
            native_gates: NativeGateSet::superconducting(),
            calibration: CalibrationSnapshot::nominal(),
            gate_durations_ns: GateDurations::default(),
        }
    }

    /// Noise-free, all-to-all coupled device accepting every gate. Used for
    /// local runs where routing and decomposition are not under study.
    pub fn ideal(device_id: &str, n_qubits: usize) -> Self {
        let edges = (0..n_qubits).flat_map(|a| (a + 1..n_qubits).map(move |b| (a, b)));
        Self {
            device_id: device_id.into(),
            topology: Topology::new(n_qubits, edges).expect("complete graph"),
            native_gates: NativeGateSet::new(Gate::ALL).expect("full gate set"),
            calibration: CalibrationSnapshot::perfect(),
            gate_durations_ns: GateDurations::default(),
        }
    }

    pub fn preset(device_id: &str) -> Option<Self> {
        match device_id {
            "helmi-sim" => Some(Self::helmi_sim()),
            "qal9000-sim" => Some(Self::qal9000_sim()),
            _ => None,
        }
    }

    pub fn with_calibration(mut self, calibration: CalibrationSnapshot) -> Self {
        self.calibration = calibration;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.device_id.is_empty() {
            return Err(BackendError::InvalidSpec("empty device id".into()));
        }
        if !self.topology.is_connected() {
            return Err(BackendError::InvalidSpec("topology is disconnected".into()));
        }
        let d = &self.gate_durations_ns;
        if !(d.single_qubit_ns > 0.0 && d.two_qubit_ns > 0.0 && d.readout_ns > 0.0) {
            return Err(BackendError::InvalidSpec("gate durations must be positive".into()));
        }
        self.calibration.validate()
    }

    pub fn noise(&self) -> NoiseParams {
        derive_noise_from_calibration(&self.calibration, &self.gate_durations_ns)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseParams {
    pub p_single: f64,
    pub p_two: f64,
    pub p_readout: f64,
    pub dephase_single: f64,
    pub dephase_two: f64,
}

impl NoiseParams {
    pub fn depolarizing(&self, gate: Gate) -> f64 {
        if gate.is_two_qubit() {
            self.p_two
        } else {
            self.p_single
        }
    }

    pub fn dephasing(&self, gate: Gate) -> f64 {
        if gate.is_two_qubit() {
            self.dephase_two
        } else {
            self.dephase_single
        }
    }
}

pub fn derive_noise_from_calibration(
    cal: &CalibrationSnapshot,
    durations: &GateDurations,
) -> NoiseParams {
    let dephase = |ns: f64| 1.0 - (-(ns * 1e-3) / cal.t2_us).exp();
    NoiseParams {
        p_single: 1.0 - cal.f1,
        p_two: 1.0 - cal.f2,
        p_readout: 1.0 - cal.f_ro,
        dephase_single: dephase(durations.single_qubit_ns),
        dephase_two: dephase(durations.two_qubit_ns),
    }
}

type Mat2 = [[Complex64; 2]; 2];

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn single_qubit_matrix(gate: Gate, params: &[f64]) -> Mat2 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let zero = c(0.0, 0.0);
    let one = c(1.0, 0.0);
    match gate {
        Gate::H => [[c(s, 0.0), c(s, 0.0)], [c(s, 0.0), c(-s, 0.0)]],
        Gate::X => [[zero, one], [one, zero]],
        Gate::Y => [[zero, c(0.0, -1.0)], [c(0.0, 1.0), zero]],
        Gate::Z => [[one, zero], [zero, -one]],
        Gate::Rx => {
            let (sn, cs) = (params[0] / 2.0).sin_cos();
            [[c(cs, 0.0), c(0.0, -sn)], [c(0.0, -sn), c(cs, 0.0)]]
        }
        Gate::Ry => {
            let (sn, cs) = (params[0] / 2.0).sin_cos();
            [[c(cs, 0.0), c(-sn, 0.0)], [c(sn, 0.0), c(cs, 0.0)]]
        }
        Gate::Rz => {
            let (sn, cs) = (params[0] / 2.0).sin_cos();
            [[c(cs, -sn), zero], [zero, c(cs, sn)]]
        }
        other => unreachable!("{other} is not a single-qubit unitary"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pauli {
    X,
    Y,
    Z,
}

impl Pauli {
    fn gate(self) -> Gate {
        match self {
            Pauli::X => Gate::X,
            Pauli::Y => Gate::Y,
            Pauli::Z => Gate::Z,
        }
    }
}

/// Pure state over `n` qubits; qubit `q` is bit `n - 1 - q` of the basis
/// index, so index binary digits read as the bitstring.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n: usize,
    amps: Vec<Complex64>,
}

impl StateVector {
    pub fn zero(n: usize) -> Self {
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n];
        amps[0] = Complex64::new(1.0, 0.0);
        Self { n, amps }
    }

    pub fn n_qubits(&self) -> usize {
        self.n
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn mask(&self, q: usize) -> usize {
        1 << (self.n - 1 - q)
    }

    fn apply_single(&mut self, m: &Mat2, q: usize) {
        let mask = self.mask(q);
        for i in 0..self.amps.len() {
            if i & mask == 0 {
                let j = i | mask;
                let (a0, a1) = (self.amps[i], self.amps[j]);
                self.amps[i] = m[0][0] * a0 + m[0][1] * a1;
                self.amps[j] = m[1][0] * a0 + m[1][1] * a1;
            }
        }
    }

    /// Applies a unitary op; barrier and measure are no-ops here.
    pub fn apply(&mut self, op: &GateOp) {
        match op.gate {
            Gate::Barrier | Gate::Measure => {}
            Gate::Cz => {
                let m = self.mask(op.qubits[0]) | self.mask(op.qubits[1]);
                for (i, a) in self.amps.iter_mut().enumerate() {
                    if i & m == m {
                        *a = -*a;
                    }
                }
            }
            Gate::Cx => {
                let (mc, mt) = (self.mask(op.qubits[0]), self.mask(op.qubits[1]));
                for i in 0..self.amps.len() {
                    if i & mc != 0 && i & mt == 0 {
                        self.amps.swap(i, i | mt);
                    }
                }
            }
            Gate::Swap => {
                let (ma, mb) = (self.mask(op.qubits[0]), self.mask(op.qubits[1]));
                for i in 0..self.amps.len() {
                    if i & ma != 0 && i & mb == 0 {
                        self.amps.swap(i, (i & !ma) | mb);
                    }
                }
            }
            g => self.apply_single(&single_qubit_matrix(g, &op.params), op.qubits[0]),
        }
    }

    fn apply_pauli(&mut self, p: Pauli, q: usize) {
        self.apply(&GateOp::single(p.gate(), q));
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }
}

/// A circuit re-indexed onto the qubits it actually touches.
struct CompactCircuit {
    n_active: usize,
    ops: Vec<GateOp>,
    /// Compact indices of measured qubits, in ascending original order.
    measured: Vec<usize>,
}

impl CompactCircuit {
    fn new(c: &QuantumCircuit, cap: usize) -> Result<Self, BackendError> {
        let mut index = vec![usize::MAX; c.n_qubits];
        let mut used = vec![false; c.n_qubits];
        for op in &c.ops {
            for &q in &op.qubits {
                used[q] = true;
            }
        }
        let mut n_active = 0;
        for q in 0..c.n_qubits {
            if used[q] {
                index[q] = n_active;
                n_active += 1;
            }
        }
        if n_active > cap {
            let memory = memory_estimate(n_active as u32)
                .map(|m| m.to_string())
                .unwrap_or_default();
            return Err(BackendError::QubitCapExceeded {
                active: n_active,
                cap,
                memory,
            });
        }
        let measured: Vec<usize> = c.measured_qubits().into_iter().map(|q| index[q]).collect();
        if measured.is_empty() {
            return Err(BackendError::NoMeasurements);
        }
        let ops = c
            .ops
            .iter()
            .filter(|op| op.gate.is_unitary())
            .map(|op| GateOp::new(op.gate, op.qubits.iter().map(|&q| index[q]).collect(), op.params.clone()))
            .collect();
        Ok(Self { n_active, ops, measured })
    }

    fn run(&self) -> StateVector {
        let mut sv = StateVector::zero(self.n_active);
        for op in &self.ops {
            sv.apply(op);
        }
        sv
    }

    /// Outcome register value (first measured qubit most significant) for a
    /// basis index of the compact state.
    fn outcome_of(&self, basis: usize) -> u64 {
        self.measured.iter().fold(0u64, |acc, &q| {
            (acc << 1) | ((basis >> (self.n_active - 1 - q)) & 1) as u64
        })
    }

    fn outcome_probabilities(&self, sv: &StateVector) -> BTreeMap<u64, f64> {
        let mut out = BTreeMap::new();
        for (i, p) in sv.probabilities().into_iter().enumerate() {
            if p > 0.0 {
                *out.entry(self.outcome_of(i)).or_insert(0.0) += p;
            }
        }
        out
    }

    /// Inverse-CDF draw over basis states in index order.
    fn draw_from_state(&self, sv: &StateVector, u: f64) -> u64 {
        let target = u * sv.norm_sqr();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, a) in sv.amplitudes().iter().enumerate() {
            let p = a.norm_sqr();
            if p > 0.0 {
                acc += p;
                last = i;
                if acc > target {
                    break;
                }
            }
        }
        self.outcome_of(last)
    }

    fn bitstring(&self, outcome: u64) -> String {
        let k = self.measured.len();
        (0..k)
            .map(|i| if (outcome >> (k - 1 - i)) & 1 == 1 { '1' } else { '0' })
            .collect()
    }
}

/// Inverse-CDF sampler over a discrete outcome distribution.
struct OutcomeTable {
    outcomes: Vec<u64>,
    cumulative: Vec<f64>,
}

impl OutcomeTable {
    fn new(probs: &BTreeMap<u64, f64>) -> Self {
        let mut outcomes = Vec::with_capacity(probs.len());
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for (&o, &p) in probs {
            acc += p;
            outcomes.push(o);
            cumulative.push(acc);
        }
        Self { outcomes, cumulative }
    }

    fn draw(&self, u: f64) -> u64 {
        let total = *self.cumulative.last().expect("non-empty distribution");
        let target = u * total;
        let i = self.cumulative.partition_point(|&c| c <= target);
        self.outcomes[i.min(self.outcomes.len() - 1)]
    }
}

/// Exact output distribution over the measured qubits.
pub fn simulate_ideal(c: &QuantumCircuit, cap: usize) -> Result<Distribution, BackendError> {
    let compact = CompactCircuit::new(c, cap)?;
    let sv = compact.run();
    Ok(compact
        .outcome_probabilities(&sv)
        .into_iter()
        .map(|(o, p)| (compact.bitstring(o), p))
        .collect())
}

/// Final statevector over the circuit's active qubits.
pub fn simulate_statevector(c: &QuantumCircuit, cap: usize) -> Result<StateVector, BackendError> {
    let compact = CompactCircuit::new(c, cap)?;
    Ok(compact.run())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Noiseless,
    Noisy,
}

impl NoiseMode {
    pub fn from_flag(noisy: bool) -> Self {
        if noisy {
            NoiseMode::Noisy
        } else {
            NoiseMode::Noiseless
        }
    }
}

/// Samples `shots` measurement outcomes of a device-ready circuit.
///
/// Two independent ChaCha streams are derived from `seed`: one drives the
/// outcome draw (exactly one uniform per shot), the other every noise
/// event. With zero noise the outcome stream is consumed identically in
/// both modes, so the counts match bit for bit.
pub fn sample_counts(
    c: &QuantumCircuit,
    shots: u64,
    spec: &DeviceSpec,
    seed: u64,
    mode: NoiseMode,
) -> Result<CountsMap, BackendError> {
    sample_counts_capped(c, shots, spec, seed, mode, DEFAULT_QUBIT_CAP)
}

pub fn sample_counts_capped(
    c: &QuantumCircuit,
    shots: u64,
    spec: &DeviceSpec,
    seed: u64,
    mode: NoiseMode,
    cap: usize,
) -> Result<CountsMap, BackendError> {
    if shots == 0 {
        return Err(BackendError::ZeroShots);
    }
    let report = validate_circuit(c, spec);
    if !report.is_clean() {
        let first: &Violation = &report.violations[0];
        return Err(BackendError::Untranspiled(first.to_string()));
    }
    let compact = CompactCircuit::new(c, cap)?;
    let ideal = OutcomeTable::new(&compact.outcome_probabilities(&compact.run()));

    let mut outcome_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);

    let noise = spec.noise();
    let mut tallies = Tallies::new(compact.measured.len());
    let mut errors: Vec<(usize, Pauli, usize)> = Vec::new();
    let k = compact.measured.len();

    for _ in 0..shots {
        let outcome = match mode {
            NoiseMode::Noiseless => ideal.draw(outcome_rng.gen::<f64>()),
            NoiseMode::Noisy => {
                errors.clear();
                draw_gate_errors(&compact.ops, &noise, &mut noise_rng, &mut errors);
                let raw = if errors.is_empty() {
                    ideal.draw(outcome_rng.gen::<f64>())
                } else {
                    let sv = run_trajectory(&compact, &errors);
                    compact.draw_from_state(&sv, outcome_rng.gen::<f64>())
                };
                let mut flipped = raw;
                for bit in 0..k {
                    if noise_rng.gen::<f64>() < noise.p_readout {
                        flipped ^= 1 << bit;
                    }
                }
                flipped
            }
        };
        tallies.add(outcome);
    }

    Ok(tallies
        .into_iter()
        .map(|(o, n)| (compact.bitstring(o), n))
        .collect())
}

/// Outcome counters: a flat array for few measured bits, a map otherwise.
enum Tallies {
    Dense(Vec<u64>),
    Sparse(BTreeMap<u64, u64>),
}

impl Tallies {
    fn new(bits: usize) -> Self {
        if bits <= 12 {
            Tallies::Dense(vec![0; 1 << bits])
        } else {
            Tallies::Sparse(BTreeMap::new())
        }
    }

    fn add(&mut self, outcome: u64) {
        match self {
            Tallies::Dense(v) => v[outcome as usize] += 1,
            Tallies::Sparse(m) => *m.entry(outcome).or_insert(0) += 1,
        }
    }

    fn into_iter(self) -> Box<dyn Iterator<Item = (u64, u64)>> {
        match self {
            Tallies::Dense(v) => Box::new(
                v.into_iter()
                    .enumerate()
                    .filter(|&(_, n)| n > 0)
                    .map(|(o, n)| (o as u64, n)),
            ),
            Tallies::Sparse(m) => Box::new(m.into_iter()),
        }
    }
}

// Records (op index, pauli, qubit) insertions that follow op `index`.
fn draw_gate_errors(
    ops: &[GateOp],
    noise: &NoiseParams,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<(usize, Pauli, usize)>,
) {
    const PAULIS: [Option<Pauli>; 4] = [None, Some(Pauli::X), Some(Pauli::Y), Some(Pauli::Z)];
    for (i, op) in ops.iter().enumerate() {
        if rng.gen::<f64>() < noise.depolarizing(op.gate) {
            match op.qubits.as_slice() {
                [q] => out.push((i, PAULIS[rng.gen_range(1..4)].unwrap(), *q)),
                [a, b] => {
                    // one of the 15 non-identity two-qubit Paulis
                    let pick = rng.gen_range(1..16);
                    if let Some(p) = PAULIS[pick / 4] {
                        out.push((i, p, *a));
                    }
                    if let Some(p) = PAULIS[pick % 4] {
                        out.push((i, p, *b));
                    }
                }
                _ => {}
            }
        }
        let pd = noise.dephasing(op.gate);
        for &q in &op.qubits {
            if rng.gen::<f64>() < pd {
                out.push((i, Pauli::Z, q));
            }
        }
    }
}

fn run_trajectory(compact: &CompactCircuit, errors: &[(usize, Pauli, usize)]) -> StateVector {
    let mut sv = StateVector::zero(compact.n_active);
    let mut next = 0;
    for (i, op) in compact.ops.iter().enumerate() {
        sv.apply(op);
        while next < errors.len() && errors[next].0 == i {
            sv.apply_pauli(errors[next].1, errors[next].2);
            next += 1;
        }
    }
    sv
}

/// Registered device specs, readable concurrently; calibration updates
/// replace the stored snapshot atomically.
#[derive(Debug, Default)]
pub struct DeviceRegistry {
    devices: RwLock<BTreeMap<String, DeviceSpec>>,
    ranges: CalibrationRanges,
}

impl DeviceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, spec: DeviceSpec) -> Result<String, BackendError> {
        spec.validate()?;
        let mut devices = self.devices.write();
        if devices.contains_key(&spec.device_id) {
            return Err(BackendError::DuplicateDevice(spec.device_id));
        }
        let id = spec.device_id.clone();
        devices.insert(id.clone(), spec);
        Ok(id)
    }

    pub fn get(&self, device_id: &str) -> Result<DeviceSpec, BackendError> {
        self.devices
            .read()
            .get(device_id)
            .cloned()
            .ok_or_else(|| BackendError::UnknownDevice(device_id.into()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.devices.read().keys().cloned().collect()
    }

    /// Draws a fresh snapshot for a registered device and stores it.
    pub fn generate_calibration_snapshot(
        &self,
        device_id: &str,
        seed: u64,
        taken_at: f64,
    ) -> Result<CalibrationSnapshot, BackendError> {
        let mut devices = self.devices.write();
        let spec = devices
            .get_mut(device_id)
            .ok_or_else(|| BackendError::UnknownDevice(device_id.into()))?;
        let snapshot = self.ranges.sample(seed, taken_at);
        spec.calibration = snapshot.clone();
        Ok(snapshot)
    }

    pub fn set_calibration(
        &self,
        device_id: &str,
        snapshot: CalibrationSnapshot,
    ) -> Result<(), BackendError> {
        snapshot.validate()?;
        let mut devices = self.devices.write();
        let spec = devices
            .get_mut(device_id)
            .ok_or_else(|| BackendError::UnknownDevice(device_id.into()))?;
        spec.calibration = snapshot;
        Ok(())
    }
}
