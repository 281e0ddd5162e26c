mod common;

use common::random_circuit;
use qhpc_core::backend::{
    sample_counts, simulate_ideal, CalibrationSnapshot, DeviceSpec, NoiseMode, DEFAULT_QUBIT_CAP,
};
use qhpc_core::circuit::{memory_estimate, MemoryEstimate, QuantumCircuit};
use qhpc_core::gateway::execute_logical;
use qhpc_core::transpiler::transpile;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn readout_only() -> DeviceSpec {
    DeviceSpec::helmi_sim().with_calibration(CalibrationSnapshot {
        f1: 1.0,
        f2: 1.0,
        f_ro: 0.95,
        t2_us: f64::INFINITY,
        taken_at: 0.0,
    })
}

#[test]
fn noiseless_bell_splits_evenly() {
    for seed in 0..20 {
        let counts = execute_logical(&QuantumCircuit::bell(), 10_000, &DeviceSpec::helmi_sim(), seed, NoiseMode::Noiseless)
            .unwrap();
        assert_eq!(counts.get("01"), None);
        assert_eq!(counts.get("10"), None);
        let zeros = counts["00"];
        assert!((4850..=5150).contains(&zeros), "seed {seed}: {zeros}");
        assert_eq!(zeros + counts["11"], 10_000);
    }
}

#[test]
fn readout_fidelity_shows_up_in_counts() {
    let mut c = QuantumCircuit::new("idle", 1);
    c.measure(0);
    for (seed, prep_one) in [(1, false), (2, true), (3, false)] {
        let mut c = c.clone();
        if prep_one {
            c = QuantumCircuit::new("one", 1);
            c.x(0).measure(0);
        }
        let counts = execute_logical(&c, 100_000, &readout_only(), seed, NoiseMode::Noisy).unwrap();
        let right = if prep_one { "1" } else { "0" };
        let p = counts[right] as f64 / 1e5;
        assert!((0.9479..=0.9521).contains(&p), "seed {seed}: {p}");
    }
}

#[test]
fn zero_noise_matches_noiseless_bit_for_bit() {
    let spec = DeviceSpec::helmi_sim().with_calibration(CalibrationSnapshot::perfect());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..30 {
        let c = random_circuit(&mut rng, 4, 25, true);
        let t = transpile(&c, &spec).unwrap();
        let a = sample_counts(&t.circuit, 777, &spec, seed, NoiseMode::Noisy).unwrap();
        let b = sample_counts(&t.circuit, 777, &spec, seed, NoiseMode::Noiseless).unwrap();
        assert_eq!(a, b, "seed {seed}");
    }
}

#[test]
fn sampled_frequencies_track_ideal_probabilities() {
    let spec = DeviceSpec::ideal("ideal", 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shots = 20_000u64;
    let (mut outcomes, mut outside) = (0, 0);
    for seed in 0..25 {
        let c = random_circuit(&mut rng, 5, 30, true);
        let probs = simulate_ideal(&c, DEFAULT_QUBIT_CAP).unwrap();
        let counts = execute_logical(&c, shots, &spec, seed, NoiseMode::Noiseless).unwrap();
        assert_eq!(counts.values().sum::<u64>(), shots);
        for (k, &p) in &probs {
            let f = counts.get(k).copied().unwrap_or(0) as f64 / shots as f64;
            let sigma = (p * (1.0 - p) / shots as f64).sqrt();
            outcomes += 1;
            if (f - p).abs() > 3.0 * sigma + 1.0 / shots as f64 {
                outside += 1;
            }
        }
        for k in counts.keys() {
            assert!(probs.get(k).is_some_and(|&p| p > 1e-12), "impossible outcome {k}");
        }
    }
    // a correct sampler leaves about 0.3% outside 3σ
    assert!((outside as f64) < 0.02 * outcomes as f64, "{outside}/{outcomes} outside 3σ");
}

#[test]
fn same_seed_same_counts() {
    let spec = DeviceSpec::helmi_sim();
    let c = QuantumCircuit::ghz(4);
    let a = execute_logical(&c, 4096, &spec, 99, NoiseMode::Noisy).unwrap();
    let b = execute_logical(&c, 4096, &spec, 99, NoiseMode::Noisy).unwrap();
    let other = execute_logical(&c, 4096, &spec, 100, NoiseMode::Noisy).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, other);
}

#[test]
fn statevector_memory_estimates() {
    assert_eq!(memory_estimate(25).unwrap(), MemoryEstimate::Bytes(536_870_912));
    assert_eq!(memory_estimate(50).unwrap(), MemoryEstimate::Bytes(18_014_398_509_481_984));
    assert_eq!(memory_estimate(1).unwrap(), MemoryEstimate::Bytes(32));
    assert_eq!(memory_estimate(59).unwrap(), MemoryEstimate::Bytes(1 << 63));
    assert_eq!(memory_estimate(60).unwrap(), MemoryEstimate::Overflow);
    assert!(memory_estimate(0).is_err());
}
