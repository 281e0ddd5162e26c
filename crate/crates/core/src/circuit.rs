//! Circuit data model, wire format and device validation.
//!
//! A circuit is a flat list of [`GateOp`]s over `n_qubits` wires. Measurement
//! is terminal only: each measured qubit contributes one classical bit, and
//! bitstrings are rendered with qubit 0 as the leftmost character.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::DeviceSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CircuitError {
    #[error("malformed circuit document: {0}")]
    Malformed(String),
    #[error("unknown gate `{0}`")]
    UnknownGate(String),
    #[error("negative qubit index {0}")]
    NegativeQubit(i64),
    #[error("qubit {qubit} out of range for a {n_qubits}-qubit circuit")]
    QubitOutOfRange { qubit: usize, n_qubits: usize },
    #[error("gate `{gate}` expects {expected} qubit(s), got {got}")]
    QubitArity { gate: Gate, expected: usize, got: usize },
    #[error("gate `{gate}` expects {expected} parameter(s), got {got}")]
    ParamArity { gate: Gate, expected: usize, got: usize },
    #[error("repeated qubit {0} within a single op")]
    RepeatedQubit(usize),
    #[error("qubit {0} measured more than once")]
    DoubleMeasure(usize),
    #[error("op {op_index} acts on qubit {qubit} after it was measured")]
    OpAfterMeasure { op_index: usize, qubit: usize },
    #[error("circuit must have at least one qubit")]
    NoQubits,
    #[error("batch must contain at least one circuit")]
    EmptyBatch,
    #[error("shots must be at least 1")]
    ZeroShots,
    #[error("qubit count must be at least 1")]
    InvalidQubitCount,
}

/// The fixed gate vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    H,
    X,
    Y,
    Z,
    Rx,
    Ry,
    Rz,
    Cz,
    Cx,
    Swap,
    Barrier,
    Measure,
}

impl Gate {
    pub const ALL: [Gate; 12] = [
        Gate::H,
        Gate::X,
        Gate::Y,
        Gate::Z,
        Gate::Rx,
        Gate::Ry,
        Gate::Rz,
        Gate::Cz,
        Gate::Cx,
        Gate::Swap,
        Gate::Barrier,
        Gate::Measure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Gate::H => "h",
            Gate::X => "x",
            Gate::Y => "y",
            Gate::Z => "z",
            Gate::Rx => "rx",
            Gate::Ry => "ry",
            Gate::Rz => "rz",
            Gate::Cz => "cz",
            Gate::Cx => "cx",
            Gate::Swap => "swap",
            Gate::Barrier => "barrier",
            Gate::Measure => "measure",
        }
    }

    /// Number of qubits the gate acts on; `None` for barriers, which span any set.
    pub fn qubit_arity(self) -> Option<usize> {
        match self {
            Gate::Cz | Gate::Cx | Gate::Swap => Some(2),
            Gate::Barrier => None,
            _ => Some(1),
        }
    }

    pub fn param_arity(self) -> usize {
        match self {
            Gate::Rx | Gate::Ry | Gate::Rz => 1,
            _ => 0,
        }
    }

    pub fn is_rotation(self) -> bool {
        matches!(self, Gate::Rx | Gate::Ry | Gate::Rz)
    }

    pub fn is_two_qubit(self) -> bool {
        self.qubit_arity() == Some(2)
    }

    /// Gates that act unitarily on the state (everything but barrier and measure).
    pub fn is_unitary(self) -> bool {
        !matches!(self, Gate::Barrier | Gate::Measure)
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Gate {
    type Err = CircuitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Gate::ALL
            .iter()
            .copied()
            .find(|g| g.name() == s)
            .ok_or_else(|| CircuitError::UnknownGate(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateOp {
    pub gate: Gate,
    pub qubits: Vec<usize>,
    pub params: Vec<f64>,
}

impl GateOp {
    pub fn new(gate: Gate, qubits: Vec<usize>, params: Vec<f64>) -> Self {
        Self { gate, qubits, params }
    }

    pub fn single(gate: Gate, q: usize) -> Self {
        Self::new(gate, vec![q], Vec::new())
    }

    pub fn rotation(gate: Gate, q: usize, theta: f64) -> Self {
        Self::new(gate, vec![q], vec![theta])
    }

    pub fn two(gate: Gate, a: usize, b: usize) -> Self {
        Self::new(gate, vec![a, b], Vec::new())
    }

    pub fn measure(q: usize) -> Self {
        Self::single(Gate::Measure, q)
    }

    /// Checks arity and distinctness; range checks need the owning circuit.
    pub fn check_shape(&self) -> Result<(), CircuitError> {
        if let Some(expected) = self.gate.qubit_arity() {
            if self.qubits.len() != expected {
                return Err(CircuitError::QubitArity {
                    gate: self.gate,
                    expected,
                    got: self.qubits.len(),
                });
            }
        }
        if self.params.len() != self.gate.param_arity() {
            return Err(CircuitError::ParamArity {
                gate: self.gate,
                expected: self.gate.param_arity(),
                got: self.params.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for &q in &self.qubits {
            if !seen.insert(q) {
                return Err(CircuitError::RepeatedQubit(q));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantumCircuit {
    pub name: String,
    pub n_qubits: usize,
    pub ops: Vec<GateOp>,
}

impl QuantumCircuit {
    pub fn new(name: impl Into<String>, n_qubits: usize) -> Self {
        Self {
            name: name.into(),
            n_qubits,
            ops: Vec::new(),
        }
    }

    pub fn push(&mut self, op: GateOp) -> &mut Self {
        self.ops.push(op);
        self
    }

    pub fn h(&mut self, q: usize) -> &mut Self {
        self.push(GateOp::single(Gate::H, q))
    }

    pub fn x(&mut self, q: usize) -> &mut Self {
        self.push(GateOp::single(Gate::X, q))
    }

    pub fn rx(&mut self, q: usize, theta: f64) -> &mut Self {
        self.push(GateOp::rotation(Gate::Rx, q, theta))
    }

    pub fn ry(&mut self, q: usize, theta: f64) -> &mut Self {
        self.push(GateOp::rotation(Gate::Ry, q, theta))
    }

    pub fn rz(&mut self, q: usize, theta: f64) -> &mut Self {
        self.push(GateOp::rotation(Gate::Rz, q, theta))
    }

    pub fn cx(&mut self, a: usize, b: usize) -> &mut Self {
        self.push(GateOp::two(Gate::Cx, a, b))
    }

    pub fn cz(&mut self, a: usize, b: usize) -> &mut Self {
        self.push(GateOp::two(Gate::Cz, a, b))
    }

    pub fn measure(&mut self, q: usize) -> &mut Self {
        self.push(GateOp::measure(q))
    }

    pub fn measure_all(&mut self) -> &mut Self {
        for q in 0..self.n_qubits {
            self.measure(q);
        }
        self
    }

    /// The canonical two-qubit Bell program.
    pub fn bell() -> Self {
        let mut c = Self::new("bell", 2);
        c.h(0).cx(0, 1).measure(0).measure(1);
        c
    }

    /// GHZ state preparation on `n` qubits, fully measured.
    pub fn ghz(n: usize) -> Self {
        let mut c = Self::new(format!("ghz{n}"), n);
        c.h(0);
        for q in 1..n {
            c.cx(q - 1, q);
        }
        c.measure_all();
        c
    }

    /// Measured qubits in ascending index order; this is the bit order of
    /// every bitstring produced for the circuit.
    pub fn measured_qubits(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .ops
            .iter()
            .filter(|op| op.gate == Gate::Measure)
            .flat_map(|op| op.qubits.iter().copied())
            .collect();
        set.into_iter().collect()
    }

    pub fn unitary_ops(&self) -> impl Iterator<Item = &GateOp> {
        self.ops.iter().filter(|op| op.gate.is_unitary())
    }

    pub fn validate(&self) -> Result<(), CircuitError> {
        if self.n_qubits == 0 {
            return Err(CircuitError::NoQubits);
        }
        let mut measured = vec![false; self.n_qubits];
        for (i, op) in self.ops.iter().enumerate() {
            op.check_shape()?;
            for &q in &op.qubits {
                if q >= self.n_qubits {
                    return Err(CircuitError::QubitOutOfRange {
                        qubit: q,
                        n_qubits: self.n_qubits,
                    });
                }
            }
            match op.gate {
                Gate::Measure => {
                    let q = op.qubits[0];
                    if measured[q] {
                        return Err(CircuitError::DoubleMeasure(q));
                    }
                    measured[q] = true;
                }
                Gate::Barrier => {}
                _ => {
                    if let Some(&q) = op.qubits.iter().find(|&&q| measured[q]) {
                        return Err(CircuitError::OpAfterMeasure { op_index: i, qubit: q });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CircuitBatch {
    pub circuits: Vec<QuantumCircuit>,
    pub shots: u64,
}

impl CircuitBatch {
    pub fn new(circuits: Vec<QuantumCircuit>, shots: u64) -> Result<Self, CircuitError> {
        let batch = Self { circuits, shots };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<(), CircuitError> {
        if self.circuits.is_empty() {
            return Err(CircuitError::EmptyBatch);
        }
        if self.shots == 0 {
            return Err(CircuitError::ZeroShots);
        }
        self.circuits.iter().try_for_each(QuantumCircuit::validate)
    }

    /// Shots across every circuit in the batch.
    pub fn total_shots(&self) -> u64 {
        self.shots * self.circuits.len() as u64
    }
}

// Untyped mirror of the wire schema; qubit indices are signed so that
// negative values produce a precise error instead of a generic type error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOp {
    gate: String,
    qubits: Vec<i64>,
    #[serde(default)]
    params: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCircuit {
    #[serde(default)]
    name: String,
    n_qubits: i64,
    ops: Vec<RawOp>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBatch {
    circuits: Vec<RawCircuit>,
    shots: i64,
}

impl TryFrom<RawOp> for GateOp {
    type Error = CircuitError;

    fn try_from(raw: RawOp) -> Result<Self, Self::Error> {
        let gate: Gate = raw.gate.parse()?;
        let qubits = raw
            .qubits
            .into_iter()
            .map(|q| usize::try_from(q).map_err(|_| CircuitError::NegativeQubit(q)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GateOp::new(gate, qubits, raw.params))
    }
}

impl TryFrom<RawCircuit> for QuantumCircuit {
    type Error = CircuitError;

    fn try_from(raw: RawCircuit) -> Result<Self, Self::Error> {
        let n_qubits = usize::try_from(raw.n_qubits).map_err(|_| CircuitError::NoQubits)?;
        let ops = raw
            .ops
            .into_iter()
            .map(GateOp::try_from)
            .collect::<Result<Vec<_>, _>>()?;
        let circuit = QuantumCircuit {
            name: raw.name,
            n_qubits,
            ops,
        };
        circuit.validate()?;
        Ok(circuit)
    }
}

impl<'de> Deserialize<'de> for QuantumCircuit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawCircuit::deserialize(d)?;
        QuantumCircuit::try_from(raw).map_err(serde::de::Error::custom)
    }
}

impl<'de> Deserialize<'de> for CircuitBatch {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawBatch::deserialize(d)?;
        let circuits = raw
            .circuits
            .into_iter()
            .map(QuantumCircuit::try_from)
            .collect::<Result<Vec<_>, _>>()
            .map_err(serde::de::Error::custom)?;
        let shots = u64::try_from(raw.shots).map_err(|_| serde::de::Error::custom(CircuitError::ZeroShots))?;
        CircuitBatch::new(circuits, shots).map_err(serde::de::Error::custom)
    }
}

/// Parses a circuit document, reporting typed errors for the schema-level
/// failures the wire contract names.
pub fn parse_circuit(document: &str) -> Result<QuantumCircuit, CircuitError> {
    let raw: RawCircuit =
        serde_json::from_str(document).map_err(|e| CircuitError::Malformed(e.to_string()))?;
    QuantumCircuit::try_from(raw)
}

pub fn serialize_circuit(c: &QuantumCircuit) -> String {
    serde_json::to_string_pretty(c).expect("circuit serialization is infallible")
}

pub fn parse_batch(document: &str) -> Result<CircuitBatch, CircuitError> {
    let raw: RawBatch =
        serde_json::from_str(document).map_err(|e| CircuitError::Malformed(e.to_string()))?;
    let circuits = raw
        .circuits
        .into_iter()
        .map(QuantumCircuit::try_from)
        .collect::<Result<Vec<_>, _>>()?;
    let shots = u64::try_from(raw.shots).map_err(|_| CircuitError::ZeroShots)?;
    CircuitBatch::new(circuits, shots)
}

pub fn serialize_batch(b: &CircuitBatch) -> String {
    serde_json::to_string_pretty(b).expect("batch serialization is infallible")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    QubitCountExceedsDevice { circuit: usize, device: usize },
    NonNativeGate { op_index: usize, gate: Gate },
    UncoupledPair { op_index: usize, a: usize, b: usize },
}

impl Violation {
    /// Hard violations cannot be repaired by transpilation.
    pub fn is_hard(&self) -> bool {
        matches!(self, Violation::QubitCountExceedsDevice { .. })
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::QubitCountExceedsDevice { circuit, device } => write!(
                f,
                "qubit count exceeds device ({circuit} > {device})"
            ),
            Violation::NonNativeGate { op_index, gate } => {
                write!(f, "op {op_index}: gate `{gate}` is not native")
            }
            Violation::UncoupledPair { op_index, a, b } => {
                write!(f, "op {op_index}: qubits ({a}, {b}) are not coupled")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_hard_violation(&self) -> bool {
        self.violations.iter().any(Violation::is_hard)
    }

    /// True when the circuit can run on the device without transpilation.
    pub fn is_executable(&self) -> bool {
        self.is_clean()
    }
}

pub fn validate_circuit(c: &QuantumCircuit, spec: &DeviceSpec) -> ValidationReport {
    let mut violations = Vec::new();
    if c.n_qubits > spec.topology.n_qubits() {
        violations.push(Violation::QubitCountExceedsDevice {
            circuit: c.n_qubits,
            device: spec.topology.n_qubits(),
        });
    }
    for (i, op) in c.ops.iter().enumerate() {
        if op.gate.is_unitary() && !spec.native_gates.contains(op.gate) {
            violations.push(Violation::NonNativeGate {
                op_index: i,
                gate: op.gate,
            });
        }
        if op.gate.is_two_qubit() {
            let (a, b) = (op.qubits[0], op.qubits[1]);
            if !spec.topology.has_edge(a, b) {
                violations.push(Violation::UncoupledPair { op_index: i, a, b });
            }
        }
    }
    ValidationReport { violations }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryEstimate {
    Bytes(u64),
    /// The byte count does not fit in 64 bits.
    Overflow,
}

impl MemoryEstimate {
    pub fn bytes(self) -> Option<u64> {
        match self {
            MemoryEstimate::Bytes(b) => Some(b),
            MemoryEstimate::Overflow => None,
        }
    }
}

impl fmt::Display for MemoryEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemoryEstimate::Bytes(b) => write!(f, "{b} bytes"),
            MemoryEstimate::Overflow => f.write_str("more than 2^64 bytes"),
        }
    }
}

/// Bytes needed for an exact statevector of `n` qubits, one 16-byte complex
/// double per basis state.
pub fn memory_estimate(n: u32) -> Result<MemoryEstimate, CircuitError> {
    if n < 1 {
        return Err(CircuitError::InvalidQubitCount);
    }
    Ok(1u64
        .checked_shl(n)
        .and_then(|states| states.checked_mul(16))
        .map_or(MemoryEstimate::Overflow, MemoryEstimate::Bytes))
}

/// Wraps an angle into (-π, π].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}
