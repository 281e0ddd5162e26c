//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qhpc_core::accounting::{Accounting, Resource};
use qhpc_core::backend::DeviceSpec;
use qhpc_core::circuit::{CircuitBatch, Gate, GateOp, QuantumCircuit};
use qhpc_core::gateway::{DailyWindow, DeviceState, Gateway, GatewayConfig, GatewayEventKind};
use qhpc_core::scheduler::{
    ComputeJob, DispatchRecord, Policy, Scheduler, SchedulerConfig, TraceEvent, TraceKind,
};
use qhpc_core::transpiler::TranspiledCircuit;

type M = DMatrix<Complex64>;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn m2(a: [[Complex64; 2]; 2]) -> M {
    M::from_fn(2, 2, |r, k| a[r][k])
}

fn pauli(name: char) -> M {
    match name {
        'I' => m2([[c(1., 0.), c(0., 0.)], [c(0., 0.), c(1., 0.)]]),
        'X' => m2([[c(0., 0.), c(1., 0.)], [c(1., 0.), c(0., 0.)]]),
        'Y' => m2([[c(0., 0.), c(0., -1.)], [c(0., 1.), c(0., 0.)]]),
        'Z' => m2([[c(1., 0.), c(0., 0.)], [c(0., 0.), c(-1., 0.)]]),
        _ => unreachable!(),
    }
}

fn gate_matrix(g: Gate, params: &[f64]) -> M {
    let s2 = 1.0 / 2f64.sqrt();
    match g {
        Gate::H => m2([[c(s2, 0.), c(s2, 0.)], [c(s2, 0.), c(-s2, 0.)]]),
        Gate::X => pauli('X'),
        Gate::Y => pauli('Y'),
        Gate::Z => pauli('Z'),
        Gate::Rx | Gate::Ry | Gate::Rz => {
            // exp(-iθP/2) = cos(θ/2) I - i sin(θ/2) P
            let p = match g {
                Gate::Rx => 'X',
                Gate::Ry => 'Y',
                _ => 'Z',
            };
            let t = params[0] / 2.0;
            pauli('I') * c(t.cos(), 0.0) + pauli(p) * c(0.0, -t.sin())
        }
        _ => unreachable!("not a single-qubit gate"),
    }
}

/// Kronecker product over `n` wires with `ops[w]` on wire `w` (identity
/// elsewhere); wire 0 is the most significant factor.
fn embed(n: usize, ops: &HashMap<usize, M>) -> M {
    let mut acc = M::identity(1, 1);
    for w in 0..n {
        let f = ops.get(&w).cloned().unwrap_or_else(|| pauli('I'));
        acc = acc.kronecker(&f);
    }
    acc
}

fn op_matrix(n: usize, op: &GateOp, wire: &HashMap<usize, usize>) -> M {
    let w = |q: usize| wire[&q];
    let proj0 = m2([[c(1., 0.), c(0., 0.)], [c(0., 0.), c(0., 0.)]]);
    let proj1 = m2([[c(0., 0.), c(0., 0.)], [c(0., 0.), c(1., 0.)]]);
    match op.gate {
        Gate::Cx | Gate::Cz => {
            let target = if op.gate == Gate::Cx { pauli('X') } else { pauli('Z') };
            let a = embed(n, &HashMap::from([(w(op.qubits[0]), proj0)]));
            let b = embed(n, &HashMap::from([(w(op.qubits[0]), proj1), (w(op.qubits[1]), target)]));
            a + b
        }
        Gate::Swap => {
            // ½(II + XX + YY + ZZ)
            let mut acc = M::zeros(1 << n, 1 << n);
            for p in ['I', 'X', 'Y', 'Z'] {
                acc += embed(n, &HashMap::from([(w(op.qubits[0]), pauli(p)), (w(op.qubits[1]), pauli(p))]));
            }
            acc * c(0.5, 0.0)
        }
        g => embed(n, &HashMap::from([(w(op.qubits[0]), gate_matrix(g, &op.params))])),
    }
}

/// Dense unitary of the circuit's unitary ops restricted to `wires`
/// (listed in significance order).
pub fn dense_unitary(circ: &QuantumCircuit, wires: &[usize]) -> M {
    let n = wires.len();
    let wire: HashMap<usize, usize> = wires.iter().enumerate().map(|(i, &q)| (q, i)).collect();
    let mut u = M::identity(1 << n, 1 << n);
    for op in circ.ops.iter().filter(|o| o.gate.is_unitary()) {
        u = op_matrix(n, op, &wire) * u;
    }
    u
}

/// Applies `op` to a state over `m` wires, using its dense matrix on the
/// touched wires only.
fn apply_local(state: &mut [Complex64], m: usize, op: &GateOp, pos: &HashMap<usize, usize>) {
    let k = op.qubits.len();
    let local: HashMap<usize, usize> = op.qubits.iter().enumerate().map(|(i, &q)| (q, i)).collect();
    let u = op_matrix(k, op, &local);
    let bits: Vec<usize> = op.qubits.iter().map(|q| m - 1 - pos[q]).collect();
    let mask: usize = bits.iter().map(|b| 1 << b).sum();
    for base in 0..state.len() {
        if base & mask != 0 {
            continue;
        }
        let idx: Vec<usize> = (0..1usize << k)
            .map(|s| {
                let mut i = base;
                for (j, b) in bits.iter().enumerate() {
                    if (s >> (k - 1 - j)) & 1 == 1 {
                        i |= 1 << b;
                    }
                }
                i
            })
            .collect();
        let old: Vec<Complex64> = idx.iter().map(|&i| state[i]).collect();
        for (r, &i) in idx.iter().enumerate() {
            state[i] = (0..idx.len()).map(|cc| u[(r, cc)] * old[cc]).sum();
        }
    }
}

/// Largest entrywise deviation between the transpiled circuit and the
/// original, up to one global phase, on inputs whose ancillas start in |0⟩.
/// Logical qubit `l` starts on physical `l` and ends on `layout[l]`.
pub fn transpile_deviation(original: &QuantumCircuit, t: &TranspiledCircuit) -> f64 {
    let n = original.n_qubits;
    let mut wires: Vec<usize> = (0..n).collect();
    wires.extend(t.layout.iter().copied());
    for op in &t.circuit.ops {
        wires.extend(op.qubits.iter().copied());
    }
    wires.sort_unstable();
    wires.dedup();
    assert!(wires.len() <= 14, "too many active wires for the dense oracle");
    let m = wires.len();
    let pos: HashMap<usize, usize> = wires.iter().enumerate().map(|(i, &q)| (q, i)).collect();

    let logical: Vec<usize> = (0..n).collect();
    let uo = dense_unitary(original, &logical);

    // basis index over `wires` with the logical bits of `b` on the given positions
    let place = |b: usize, targets: &[usize]| -> usize {
        let mut idx = 0;
        for (l, &p) in targets.iter().enumerate() {
            if (b >> (n - 1 - l)) & 1 == 1 {
                idx |= 1 << (m - 1 - pos[&p]);
            }
        }
        idx
    };
    let mut phase: Option<Complex64> = None;
    let mut worst: f64 = 0.0;
    for b in 0..1usize << n {
        let mut state = vec![c(0.0, 0.0); 1 << m];
        state[place(b, &logical)] = c(1.0, 0.0);
        for op in t.circuit.ops.iter().filter(|o| o.gate.is_unitary()) {
            apply_local(&mut state, m, op, &pos);
        }
        let mut expected = vec![c(0.0, 0.0); 1 << m];
        for out in 0..1usize << n {
            expected[place(out, &t.layout)] = uo[(out, b)];
        }
        if phase.is_none() {
            let (i, _) = expected
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.norm().total_cmp(&y.1.norm()))
                .unwrap();
            phase = Some(state[i] / expected[i]);
        }
        let ph = phase.unwrap();
        for (got, e) in state.iter().zip(&expected) {
            worst = worst.max((got - ph * e).norm());
        }
    }
    worst
}

/// Random circuit over the full unitary gate set with `n_ops` ops.
pub fn random_circuit(rng: &mut ChaCha8Rng, n: usize, n_ops: usize, measure: bool) -> QuantumCircuit {
    let single = [Gate::H, Gate::X, Gate::Y, Gate::Z, Gate::Rx, Gate::Ry, Gate::Rz];
    let two = [Gate::Cx, Gate::Cz, Gate::Swap];
    let mut circ = QuantumCircuit::new("random", n);
    for _ in 0..n_ops {
        if n >= 2 && rng.gen_bool(0.4) {
            let a = rng.gen_range(0..n);
            let mut b = rng.gen_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            circ.push(GateOp::two(two[rng.gen_range(0..two.len())], a, b));
        } else {
            let g = single[rng.gen_range(0..single.len())];
            let q = rng.gen_range(0..n);
            if g.is_rotation() {
                circ.push(GateOp::rotation(g, q, rng.gen_range(-2.0 * PI..2.0 * PI)));
            } else {
                circ.push(GateOp::single(g, q));
            }
        }
    }
    if measure {
        circ.measure_all();
    }
    circ
}

/// Randomized scheduling scenario: projects, jobs, and device signals.
pub struct Scenario {
    pub policy: Policy,
    pub cpu_capacity: usize,
    pub window: DailyWindow,
    pub jobs: Vec<ComputeJob>,
    pub signals: Vec<(f64, DeviceState)>,
    pub grants: Vec<(String, u64)>,
}

pub fn random_scenario(seed: u64, policy: Policy) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_projects = rng.gen_range(1..=4);
    let grants: Vec<(String, u64)> = (0..n_projects)
        .map(|p| (format!("p{p}"), rng.gen_range(200..5000)))
        .collect();
    let n_jobs = rng.gen_range(1..=14);
    let jobs = (0..n_jobs)
        .map(|i| {
            let p = rng.gen_range(0..n_projects);
            let hybrid = rng.gen_bool(0.75);
            let shots = rng.gen_range(10..600);
            let circuit = if rng.gen_bool(0.5) { QuantumCircuit::bell() } else { QuantumCircuit::ghz(3) };
            ComputeJob {
                job_id: format!("j{i:02}"),
                project_id: format!("p{p}"),
                user: format!("u{p}"),
                cpu_core_seconds: rng.gen_range(1.0..40.0),
                cores: rng.gen_range(1..=2),
                needs_qpu: hybrid,
                qc_batch: hybrid.then(|| CircuitBatch::new(vec![circuit], shots).unwrap()),
                device_id: None,
                walltime_limit_s: if rng.gen_bool(0.15) { rng.gen_range(5.0..80.0) } else { 1e6 },
                submitted_at: (rng.gen_range(0.0..200.0f64) * 4.0).round() / 4.0,
            }
        })
        .collect();
    let states = [DeviceState::Available, DeviceState::Calibrating, DeviceState::Maintenance, DeviceState::Offline];
    let mut signals: Vec<(f64, DeviceState)> = (0..rng.gen_range(0..8))
        .map(|_| (rng.gen_range(0.0..300.0), states[rng.gen_range(0..states.len())]))
        .collect();
    signals.push((rng.gen_range(0.0..50.0), DeviceState::Available));
    signals.push((400.0, DeviceState::Available));
    signals.sort_by(|a, b| a.0.total_cmp(&b.0));
    Scenario {
        policy,
        cpu_capacity: rng.gen_range(1..=4),
        window: if policy == Policy::Timeslot {
            let start = rng.gen_range(0.0..200.0f64).round();
            DailyWindow { start_s: start, end_s: start + rng.gen_range(20.0..300.0f64).round() }
        } else {
            DailyWindow::whole_day()
        },
        jobs,
        signals,
        grants,
    }
}

pub struct Stack {
    pub accounting: Arc<Accounting>,
    pub gateway: Arc<Gateway>,
    pub scheduler: Scheduler,
}

pub fn build_stack(s: &Scenario) -> Stack {
    let accounting = Arc::new(Accounting::new());
    for (p, shots) in &s.grants {
        let user = format!("u{}", &p[1..]);
        accounting.open_project_named(p, vec![user]).unwrap();
        accounting
            .approve_project(
                p,
                &[
                    (Resource::Shots, *shots),
                    (Resource::CpuCoreSeconds, Resource::units_from_seconds(150.0)),
                    (Resource::QpuSeconds, Resource::units_from_seconds(10.0)),
                ],
            )
            .unwrap();
    }
    let gateway = Arc::new(
        Gateway::new(
            accounting.clone(),
            GatewayConfig {
                noisy: false,
                ..Default::default()
            },
        )
        .unwrap(),
    );
    gateway.register_device(DeviceSpec::helmi_sim()).unwrap();
    let scheduler = Scheduler::new(
        accounting.clone(),
        gateway.clone(),
        SchedulerConfig {
            policy: s.policy,
            cpu_capacity: s.cpu_capacity,
            window: s.window,
        },
    )
    .unwrap();
    Stack {
        accounting,
        gateway,
        scheduler,
    }
}

/// Submits and runs the scenario, checking accounting invariants after
/// every step. Returns the violations found along the way.
pub fn run_scenario(s: &Scenario) -> (Stack, Vec<String>) {
    let mut stack = build_stack(s);
    let mut problems = Vec::new();
    for j in &s.jobs {
        // over-quota submissions are refused up front, which is fine
        let _ = stack.scheduler.submit(j.clone());
    }
    for (t, st) in &s.signals {
        stack.scheduler.inject_signal("helmi-sim", *st, *t).unwrap();
    }
    while stack.scheduler.step().unwrap().is_some() {
        for p in stack.accounting.check_invariants() {
            problems.push(format!("t={}: {p}", stack.scheduler.now()));
        }
    }
    (stack, problems)
}

fn job_of(subject: &str) -> &str {
    subject.split('@').next().unwrap()
}

/// Re-derives every scheduling invariant from the rendered trace alone.
pub fn check_trace(trace: &[TraceEvent], s: &Scenario) -> Vec<String> {
    let (jobs, policy, cpu_capacity) = (&s.jobs, s.policy, s.cpu_capacity);
    let mut v = Vec::new();
    let info: HashMap<&str, (usize, &ComputeJob)> =
        jobs.iter().enumerate().map(|(i, j)| (j.job_id.as_str(), (i, j))).collect();
    let key = |id: &str| (info[id].1.submitted_at, info[id].0);

    let mut open = false;
    let mut executing = 0usize;
    let mut cpu_running = 0usize;
    let mut cpu_holders: HashSet<String> = HashSet::new();
    let mut pending: Vec<String> = Vec::new();
    let mut awaiting: Vec<String> = Vec::new();
    let mut last_t = f64::NEG_INFINITY;

    let mut i = 0;
    while i < trace.len() {
        let t = trace[i].time;
        if t < last_t {
            v.push(format!("time goes backwards at event {i}"));
        }
        last_t = t;
        while i < trace.len() && trace[i].time == t {
            let e = &trace[i];
            let id = job_of(&e.subject).to_string();
            match e.kind {
                TraceKind::Submit => pending.push(id),
                TraceKind::Rejected => pending.retain(|x| *x != id),
                TraceKind::DispatchCpu => {
                    if policy != Policy::Fairshare {
                        if let Some(earlier) = pending.iter().filter(|x| **x != id).find(|x| key(x) < key(&id)) {
                            v.push(format!("t={t}: {id} dispatched to cpu before earlier {earlier}"));
                        }
                    }
                    pending.retain(|x| *x != id);
                    cpu_running += 1;
                    cpu_holders.insert(id);
                    if cpu_running > cpu_capacity {
                        v.push(format!("t={t}: {cpu_running} jobs in {cpu_capacity} cpu slots"));
                    }
                }
                TraceKind::CpuDone => awaiting.push(id),
                TraceKind::DispatchQpu => {
                    if !open {
                        v.push(format!("t={t}: {id} dispatched into a closed partition"));
                    }
                    if !s.window.contains(t) {
                        v.push(format!("t={t}: {id} dispatched outside the window"));
                    }
                    if policy != Policy::Fairshare {
                        if let Some(earlier) = awaiting.iter().filter(|x| **x != id).find(|x| key(x) < key(&id)) {
                            v.push(format!("t={t}: {id} dispatched to qpu before earlier {earlier}"));
                        }
                    }
                    awaiting.retain(|x| *x != id);
                }
                TraceKind::QcStart => {
                    executing += 1;
                    if executing > 1 {
                        v.push(format!("t={t}: {executing} jobs executing on one device"));
                    }
                }
                TraceKind::QcEnd => executing -= 1,
                TraceKind::JobDone | TraceKind::JobFailed => {
                    awaiting.retain(|x| *x != id);
                    if cpu_holders.remove(&id) {
                        cpu_running -= 1;
                    }
                }
                TraceKind::PartitionOpen => open = true,
                TraceKind::PartitionClose => open = false,
            }
            i += 1;
        }
        // after everything due at t: an open, idle device with waiting work is a stall
        if open && s.window.contains(t) && executing == 0 && !awaiting.is_empty() {
            v.push(format!("t={t}: device idle while {} jobs wait", awaiting.len()));
        }
    }
    v
}

/// Every fair-share dispatch picked a maximal 1/(1 + dominant usage) job.
pub fn check_fairshare(records: &[DispatchRecord]) -> Vec<String> {
    let mut v = Vec::new();
    for r in records {
        let score = |project: &str| {
            let ratio = r
                .fairshare
                .projects
                .get(project)
                .map(|per| per.values().map(|&(u, a)| u as f64 / a as f64).fold(0.0, f64::max))
                .unwrap_or(0.0);
            1.0 / (1.0 + ratio)
        };
        let chosen = r.eligible.iter().find(|e| e.0 == r.chosen).expect("chosen is eligible");
        let best = r.eligible.iter().map(|e| score(&e.1)).fold(f64::NEG_INFINITY, f64::max);
        if score(&chosen.1) < best {
            v.push(format!("t={}: {} scored {} below {}", r.time, r.chosen, score(&chosen.1), best));
        }
        let tied_earlier = r
            .eligible
            .iter()
            .any(|e| score(&e.1) == score(&chosen.1) && e.2 < chosen.2);
        if tied_earlier {
            v.push(format!("t={}: {} lost a tie to an earlier submission", r.time, r.chosen));
        }
    }
    v
}

/// Executing intervals recorded by the gateway never overlap per device.
pub fn check_gateway_exclusion(gw: &Gateway) -> Vec<String> {
    let mut busy: BTreeMap<String, Option<String>> = BTreeMap::new();
    let mut v = Vec::new();
    for e in gw.trace() {
        let slot = busy.entry(e.device_id.clone()).or_default();
        match e.kind {
            GatewayEventKind::Started => {
                if let Some(other) = slot {
                    v.push(format!("{:?} started while {other} runs", e.job_id));
                }
                *slot = e.job_id.clone();
            }
            GatewayEventKind::Finished | GatewayEventKind::Failed => *slot = None,
            _ => {}
        }
    }
    v
}
