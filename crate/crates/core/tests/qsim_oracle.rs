mod common;

use common::*;
use num_complex::Complex64;
use proptest::prelude::*;
use qkd_core::qsim::{
    dense_circuit_unitary, fidelity, fidelity_grad_shift, run_circuit, weighted_fidelity_grad, zero_state,
    CircuitParams, Statevector,
};

#[test]
fn statevector_matches_dense_unitary_on_100_circuits() {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let q = 1 + i % 4;
        let l = 1 + (i / 4) % 3;
        let input = random_angles(&mut r, q);
        let params = random_params(&mut r, l, q);
        let state = run_circuit(&input, &params).unwrap();
        let u = dense_circuit_unitary(&input, &params).unwrap();
        for (k, a) in state.amplitudes().iter().enumerate() {
            worst = worst.max((a - u[[k, 0]]).norm());
        }
    }
    assert!(worst < 1e-12, "max amplitude error {worst:e}");
}

#[test]
fn dense_unitary_is_unitary() {
    let mut r = rng(12);
    let input = random_angles(&mut r, 3);
    let params = random_params(&mut r, 2, 3);
    let u = dense_circuit_unitary(&input, &params).unwrap();
    let uh = u.t().mapv(|z| z.conj());
    let prod = uh.dot(&u);
    for ((i, j), z) in prod.indexed_iter() {
        let e = if i == j { 1.0 } else { 0.0 };
        assert!((z - Complex64::new(e, 0.0)).norm() < 1e-12);
    }
}

fn shifted(input: &[f64], params: &CircuitParams, slot: usize, h: f64) -> (Vec<f64>, CircuitParams) {
    let q = input.len();
    let mut input = input.to_vec();
    let mut params = params.clone();
    if slot < q {
        input[slot] += h;
    } else {
        let k = slot - q;
        params.set(k / q, k % q, params.theta(k / q, k % q) + h);
    }
    (input, params)
}

#[test]
fn parameter_shift_matches_central_differences() {
    let mut r = rng(13);
    let h = 1e-5;
    for i in 0..50 {
        let q = 2 + i % 3;
        let l = 1 + (i / 3) % 3;
        let input = random_angles(&mut r, q);
        let params = random_params(&mut r, l, q);
        let targets: Vec<Statevector> = (0..3).map(|_| random_state(&mut r, q)).collect();
        let weights: Vec<f64> = (0..3).map(|_| gaussian(&mut r)).collect();
        let objective = |input: &[f64], params: &CircuitParams| -> f64 {
            let s = run_circuit(input, params).unwrap();
            targets
                .iter()
                .zip(&weights)
                .map(|(t, w)| w * fidelity(&s, t).unwrap())
                .sum()
        };
        let g = weighted_fidelity_grad(&input, &params, &targets, &weights).unwrap();
        let analytic: Vec<f64> = g.input.iter().chain(&g.theta).copied().collect();
        let numeric: Vec<f64> = (0..q + l * q)
            .map(|slot| {
                let (ip, pp) = shifted(&input, &params, slot, h);
                let (im, pm) = shifted(&input, &params, slot, -h);
                (objective(&ip, &pp) - objective(&im, &pm)) / (2.0 * h)
            })
            .collect();
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-5, "configuration {i} (q={q}, l={l}): relative error {err:e}");
    }
}

#[test]
fn single_qubit_closed_form() {
    let target = zero_state(1).unwrap();
    for t in [-2.5, -0.3, 0.0, 0.7, 1.9, 3.0] {
        let params = CircuitParams::new(vec![t], 1, 1).unwrap();
        let f = fidelity(&run_circuit(&[0.0], &params).unwrap(), &target).unwrap();
        assert!((f - (t / 2.0).cos().powi(2)).abs() < 1e-15);
        let g = fidelity_grad_shift(&[0.0], &params, &target).unwrap();
        assert!((g.theta[0] + t.sin() / 2.0).abs() < 1e-14);
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let mut r = rng(14);
    let input = random_angles(&mut r, 4);
    let params = random_params(&mut r, 3, 4);
    let a = run_circuit(&input, &params).unwrap();
    let b = run_circuit(&input, &params).unwrap();
    for (x, y) in a.amplitudes().iter().zip(b.amplitudes()) {
        assert_eq!(x.re.to_bits(), y.re.to_bits());
        assert_eq!(x.im.to_bits(), y.im.to_bits());
    }
}

#[derive(Clone, Debug)]
enum Op {
    Ry(usize, f64),
    Cnot(usize, usize),
}

fn op_strategy(q: usize) -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..q, -10.0..10.0f64).prop_map(|(k, a)| Op::Ry(k, a)),
        (0..q, 1..q).prop_map(move |(c, off)| Op::Cnot(c, (c + off) % q)),
    ]
}

proptest! {
    #[test]
    fn gate_sequences_preserve_norm(ops in proptest::collection::vec(op_strategy(4), 0..=200)) {
        let mut s = zero_state(4).unwrap();
        for op in &ops {
            match *op {
                Op::Ry(k, a) => s.ry(k, a).unwrap(),
                Op::Cnot(c, t) => s.cnot(c, t).unwrap(),
            }
        }
        prop_assert!((s.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fidelity_is_symmetric_and_bounded(seed in any::<u64>(), q in 1usize..=5) {
        let mut r = rng(seed);
        let a = random_state(&mut r, q);
        let b = random_state(&mut r, q);
        let ab = fidelity(&a, &b).unwrap();
        let ba = fidelity(&b, &a).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((fidelity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn circuit_output_is_unit_norm(seed in any::<u64>(), q in 1usize..=6, l in 1usize..=4) {
        let mut r = rng(seed);
        let input = random_angles(&mut r, q);
        let params = random_params(&mut r, l, q);
        prop_assert!((run_circuit(&input, &params).unwrap().norm() - 1.0).abs() < 1e-12);
    }
}
