//! Rewriting circuits onto a device: native-gate decomposition, greedy SWAP
//! routing along BFS shortest paths, and peephole gate optimization.
//!
//! Routing starts from the identity layout (logical `i` on physical `i`) and
//! reports the final logical→physical layout. Ancilla wires start in |0⟩.

use std::collections::{BTreeSet, VecDeque};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::DeviceSpec;
use crate::circuit::{normalize_angle, Gate, GateOp, QuantumCircuit};

/// Rotations whose wrapped angle is below this are dropped.
pub const ANGLE_EPSILON: f64 = 1e-12;

const MAX_DECOMPOSITION_DEPTH: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TranspileError {
    #[error("gate `{0}` has no decomposition into the native set")]
    NoDecomposition(Gate),
    #[error("topology is disconnected: no path between {0} and {1}")]
    Disconnected(usize, usize),
    #[error("circuit needs {circuit} qubits but the topology has {topology}")]
    TooManyQubits { circuit: usize, topology: usize },
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid native gate set: {0}")]
    InvalidGateSet(String),
}

/// Undirected coupling graph over physical qubits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    n_qubits: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Topology {
    pub fn new(
        n_qubits: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, TranspileError> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n_qubits || b >= n_qubits {
                return Err(TranspileError::InvalidTopology(format!(
                    "edge ({a}, {b}) outside {n_qubits} qubits"
                )));
            }
            if a == b {
                return Err(TranspileError::InvalidTopology(format!("self-loop on {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self { n_qubits, edges: set })
    }

    /// Star with physical qubit 0 at the center.
    pub fn star(n_qubits: usize) -> Self {
        Self::new(n_qubits, (1..n_qubits).map(|i| (0, i))).expect("star edges are in range")
    }

    /// Row-major `rows × cols` grid with nearest-neighbour couplings.
    pub fn grid(rows: usize, cols: usize) -> Self {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let q = r * cols + c;
                if c + 1 < cols {
                    edges.push((q, q + 1));
                }
                if r + 1 < rows {
                    edges.push((q, q + cols));
                }
            }
        }
        Self::new(rows * cols, edges).expect("grid edges are in range")
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn neighbors(&self, q: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == q {
                    Some(b)
                } else if b == q {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Shortest path from `from` to `to`, both endpoints included. Neighbours
    /// are explored in ascending index order so the result is deterministic.
    pub fn shortest_path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        if from >= self.n_qubits || to >= self.n_qubits {
            return None;
        }
        let adjacency: Vec<Vec<usize>> = (0..self.n_qubits).map(|q| self.neighbors(q)).collect();
        let mut prev = vec![usize::MAX; self.n_qubits];
        let mut seen = vec![false; self.n_qubits];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(q) = queue.pop_front() {
            if q == to {
                let mut path = vec![to];
                let mut cur = to;
                while cur != from {
                    cur = prev[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            for &n in &adjacency[q] {
                if !seen[n] {
                    seen[n] = true;
                    prev[n] = q;
                    queue.push_back(n);
                }
            }
        }
        None
    }

    pub fn is_connected(&self) -> bool {
        self.n_qubits <= 1 || (1..self.n_qubits).all(|q| self.shortest_path(0, q).is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NativeGateSet {
    names: BTreeSet<Gate>,
}

impl NativeGateSet {
    pub fn new(names: impl IntoIterator<Item = Gate>) -> Result<Self, TranspileError> {
        let names: BTreeSet<Gate> = names.into_iter().filter(|g| g.is_unitary()).collect();
        if !names.iter().any(|g| g.is_rotation()) {
            return Err(TranspileError::InvalidGateSet(
                "needs a single-qubit rotation family".into(),
            ));
        }
        if !names.iter().any(|g| matches!(g, Gate::Cz | Gate::Cx)) {
            return Err(TranspileError::InvalidGateSet("needs an entangling gate".into()));
        }
        Ok(Self { names })
    }

    /// {rx, rz, cz}, the set both simulated devices expose.
    pub fn superconducting() -> Self {
        Self::new([Gate::Rx, Gate::Rz, Gate::Cz]).expect("valid set")
    }

    /// Barrier and measure are always accepted.
    pub fn contains(&self, gate: Gate) -> bool {
        !gate.is_unitary() || self.names.contains(&gate)
    }

    pub fn names(&self) -> impl Iterator<Item = Gate> + '_ {
        self.names.iter().copied()
    }
}

// Rewrites in circuit (time) order. Each is exact up to global phase.
fn rewrites(op: &GateOp) -> Vec<Vec<GateOp>> {
    use Gate::*;
    let q = op.qubits[0];
    let rot = |g, t| GateOp::rotation(g, q, t);
    match op.gate {
        H => vec![
            vec![rot(Rz, PI / 2.0), rot(Rx, PI / 2.0), rot(Rz, PI / 2.0)],
            vec![rot(Ry, PI / 2.0), GateOp::single(X, q)],
        ],
        X => vec![vec![rot(Rx, PI)], vec![GateOp::single(H, q), rot(Rz, PI), GateOp::single(H, q)]],
        Y => vec![vec![rot(Ry, PI)], vec![rot(Rx, PI), rot(Rz, PI)]],
        Z => vec![vec![rot(Rz, PI)], vec![GateOp::single(H, q), rot(Rx, PI), GateOp::single(H, q)]],
        Rx => {
            let t = op.params[0];
            vec![
                vec![GateOp::single(H, q), rot(Rz, t), GateOp::single(H, q)],
                vec![rot(Rz, PI / 2.0), rot(Ry, t), rot(Rz, -PI / 2.0)],
            ]
        }
        Ry => {
            let t = op.params[0];
            vec![vec![rot(Rz, -PI / 2.0), rot(Rx, t), rot(Rz, PI / 2.0)]]
        }
        Rz => {
            let t = op.params[0];
            vec![vec![GateOp::single(H, q), rot(Rx, t), GateOp::single(H, q)]]
        }
        Cx => {
            let (a, b) = (op.qubits[0], op.qubits[1]);
            vec![vec![GateOp::single(H, b), GateOp::two(Cz, a, b), GateOp::single(H, b)]]
        }
        Cz => {
            let (a, b) = (op.qubits[0], op.qubits[1]);
            vec![vec![GateOp::single(H, b), GateOp::two(Cx, a, b), GateOp::single(H, b)]]
        }
        Swap => {
            let (a, b) = (op.qubits[0], op.qubits[1]);
            vec![vec![GateOp::two(Cx, a, b), GateOp::two(Cx, b, a), GateOp::two(Cx, a, b)]]
        }
        Barrier | Measure => vec![],
    }
}

fn decompose_op(op: &GateOp, g: &NativeGateSet, depth: usize) -> Option<Vec<GateOp>> {
    if g.contains(op.gate) {
        return Some(vec![op.clone()]);
    }
    if depth == 0 {
        return None;
    }
    rewrites(op).into_iter().find_map(|seq| {
        let mut out = Vec::new();
        for sub in &seq {
            out.extend(decompose_op(sub, g, depth - 1)?);
        }
        Some(out)
    })
}

/// Rewrites every op into `g` (plus measure/barrier).
pub fn decompose_to_native(
    c: &QuantumCircuit,
    g: &NativeGateSet,
) -> Result<QuantumCircuit, TranspileError> {
    let mut ops = Vec::with_capacity(c.ops.len());
    for op in &c.ops {
        let seq = decompose_op(op, g, MAX_DECOMPOSITION_DEPTH)
            .ok_or(TranspileError::NoDecomposition(op.gate))?;
        ops.extend(seq);
    }
    Ok(QuantumCircuit {
        name: c.name.clone(),
        n_qubits: c.n_qubits,
        ops,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutedCircuit {
    /// Circuit over the topology's physical qubits.
    pub circuit: QuantumCircuit,
    /// `layout[logical] = physical` after the last op.
    pub layout: Vec<usize>,
}

/// Inserts SWAPs so every two-qubit op acts on a coupled pair. Each
/// non-adjacent gate moves its first operand along a BFS shortest path
/// until it neighbours the second; no lookahead.
pub fn route_to_topology(
    c: &QuantumCircuit,
    t: &Topology,
) -> Result<RoutedCircuit, TranspileError> {
    if c.n_qubits > t.n_qubits() {
        return Err(TranspileError::TooManyQubits {
            circuit: c.n_qubits,
            topology: t.n_qubits(),
        });
    }
    let mut layout: Vec<usize> = (0..c.n_qubits).collect();
    // physical → logical occupant, None for ancillas
    let mut occupant: Vec<Option<usize>> = (0..t.n_qubits())
        .map(|p| (p < c.n_qubits).then_some(p))
        .collect();
    let mut ops = Vec::with_capacity(c.ops.len());

    for op in &c.ops {
        if op.gate.is_two_qubit() {
            let (la, lb) = (op.qubits[0], op.qubits[1]);
            let (pa, pb) = (layout[la], layout[lb]);
            if !t.has_edge(pa, pb) {
                let path = t
                    .shortest_path(pa, pb)
                    .ok_or(TranspileError::Disconnected(pa, pb))?;
                for w in path[..path.len() - 1].windows(2) {
                    let (x, y) = (w[0], w[1]);
                    ops.push(GateOp::two(Gate::Swap, x, y));
                    occupant.swap(x, y);
                    for p in [x, y] {
                        if let Some(l) = occupant[p] {
                            layout[l] = p;
                        }
                    }
                }
            }
        }
        let mut mapped = op.clone();
        for q in mapped.qubits.iter_mut() {
            *q = layout[*q];
        }
        ops.push(mapped);
    }

    Ok(RoutedCircuit {
        circuit: QuantumCircuit {
            name: c.name.clone(),
            n_qubits: t.n_qubits(),
            ops,
        },
        layout,
    })
}

enum Fusion {
    Cancel,
    Merge(GateOp),
}

fn fuse(a: &GateOp, b: &GateOp) -> Option<Fusion> {
    if a.gate != b.gate {
        return None;
    }
    match a.gate {
        Gate::Rx | Gate::Ry | Gate::Rz => {
            let theta = normalize_angle(a.params[0] + b.params[0]);
            if theta.abs() < ANGLE_EPSILON {
                Some(Fusion::Cancel)
            } else {
                Some(Fusion::Merge(GateOp::rotation(a.gate, a.qubits[0], theta)))
            }
        }
        Gate::H | Gate::X | Gate::Y | Gate::Z => Some(Fusion::Cancel),
        Gate::Cz | Gate::Swap => Some(Fusion::Cancel),
        Gate::Cx if a.qubits == b.qubits => Some(Fusion::Cancel),
        _ => None,
    }
}

fn same_support(a: &GateOp, b: &GateOp) -> bool {
    a.qubits.len() == b.qubits.len() && a.qubits.iter().all(|q| b.qubits.contains(q))
}

fn is_null_rotation(op: &GateOp) -> bool {
    op.gate.is_rotation() && normalize_angle(op.params[0]).abs() < ANGLE_EPSILON
}

/// Merges adjacent same-axis rotations and cancels adjacent self-inverse
/// pairs until a fixpoint; two ops are adjacent when no op in between
/// touches any of their qubits.
pub fn optimize_gates(c: &QuantumCircuit) -> QuantumCircuit {
    let mut ops: Vec<Option<GateOp>> = c
        .ops
        .iter()
        .filter(|op| !is_null_rotation(op))
        .cloned()
        .map(Some)
        .collect();

    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..ops.len() {
            let Some(a) = ops[i].as_ref() else { continue };
            if !a.gate.is_unitary() {
                continue;
            }
            let next = (i + 1..ops.len()).find(|&j| {
                ops[j]
                    .as_ref()
                    .is_some_and(|b| b.qubits.iter().any(|q| a.qubits.contains(q)))
            });
            let Some(j) = next else { continue };
            let b = ops[j].as_ref().expect("found above");
            if !same_support(a, b) {
                continue;
            }
            match fuse(a, b) {
                Some(Fusion::Cancel) => {
                    ops[i] = None;
                    ops[j] = None;
                    changed = true;
                }
                Some(Fusion::Merge(m)) => {
                    ops[i] = Some(m);
                    ops[j] = None;
                    changed = true;
                }
                None => {}
            }
        }
    }

    QuantumCircuit {
        name: c.name.clone(),
        n_qubits: c.n_qubits,
        ops: ops.into_iter().flatten().collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranspiledCircuit {
    pub circuit: QuantumCircuit,
    pub layout: Vec<usize>,
}

impl TranspiledCircuit {
    /// Physical measured qubits paired with the logical qubit each one reads,
    /// ordered by logical index.
    pub fn logical_readout(&self, original: &QuantumCircuit) -> Vec<(usize, usize)> {
        original
            .measured_qubits()
            .into_iter()
            .map(|l| (l, self.layout[l]))
            .collect()
    }
}

/// Full pipeline: route, decompose (including inserted SWAPs), optimize.
pub fn transpile(c: &QuantumCircuit, spec: &DeviceSpec) -> Result<TranspiledCircuit, TranspileError> {
    let routed = route_to_topology(c, &spec.topology)?;
    let native = decompose_to_native(&routed.circuit, &spec.native_gates)?;
    Ok(TranspiledCircuit {
        circuit: optimize_gates(&native),
        layout: routed.layout,
    })
}
