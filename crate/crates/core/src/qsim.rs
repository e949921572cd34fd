//! Exact statevector simulation of the layered Ry/CNOT circuit.
//!
//! Qubit 0 is the most significant bit of the amplitude index. Every layer
//! applies the input-angle Ry rotations, then the variational Ry rotations,
//! then the CNOT chain `0→1, 1→2, …, (q-2)→(q-1)`.

use std::f64::consts::FRAC_PI_2;

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{QkdError, Result};

/// Largest register `zero_state` accepts.
pub const MAX_QUBITS: usize = 20;
/// Largest register the dense-unitary oracle will build.
pub const MAX_DENSE_QUBITS: usize = 6;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Amplitudes of a `q`-qubit pure state.
#[derive(Clone, Debug, PartialEq)]
pub struct Statevector {
    num_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl Statevector {
    /// The all-zero computational basis state.
    pub fn zero(num_qubits: usize) -> Result<Self> {
        Self::basis(num_qubits, 0)
    }

    /// Computational basis state `|index⟩`.
    pub fn basis(num_qubits: usize, index: usize) -> Result<Self> {
        if !(1..=MAX_QUBITS).contains(&num_qubits) {
            return Err(QkdError::Config(format!(
                "qubit count {num_qubits} outside 1..={MAX_QUBITS}"
            )));
        }
        let dim = 1usize << num_qubits;
        if index >= dim {
            return Err(QkdError::Index(format!("basis index {index} for dimension {dim}")));
        }
        let mut amplitudes = vec![ZERO; dim];
        amplitudes[index] = ONE;
        Ok(Self { num_qubits, amplitudes })
    }

    /// Wraps raw amplitudes. The length must be a power of two; no
    /// normalization is applied.
    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let len = amplitudes.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(QkdError::Argument(format!(
                "amplitude count {len} is not a power of two >= 2"
            )));
        }
        let num_qubits = len.trailing_zeros() as usize;
        if num_qubits > MAX_QUBITS {
            return Err(QkdError::Config(format!(
                "qubit count {num_qubits} outside 1..={MAX_QUBITS}"
            )));
        }
        Ok(Self { num_qubits, amplitudes })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    fn bit(&self, qubit: usize) -> usize {
        1 << (self.num_qubits - 1 - qubit)
    }

    fn check_qubit(&self, qubit: usize) -> Result<()> {
        if qubit >= self.num_qubits {
            return Err(QkdError::Index(format!(
                "qubit {qubit} on a {}-qubit register",
                self.num_qubits
            )));
        }
        Ok(())
    }

    /// Applies `Ry(angle)` to `qubit` in place.
    pub fn ry(&mut self, qubit: usize, angle: f64) -> Result<()> {
        self.check_qubit(qubit)?;
        self.ry_unchecked(qubit, angle);
        Ok(())
    }

    /// Applies `CNOT(control → target)` in place.
    pub fn cnot(&mut self, control: usize, target: usize) -> Result<()> {
        if control == target {
            return Err(QkdError::Argument(format!(
                "CNOT control and target are both qubit {control}"
            )));
        }
        self.check_qubit(control)?;
        self.check_qubit(target)?;
        self.cnot_unchecked(control, target);
        Ok(())
    }

    fn ry_unchecked(&mut self, qubit: usize, angle: f64) {
        let mask = self.bit(qubit);
        let (s, c) = (0.5 * angle).sin_cos();
        for i in 0..self.amplitudes.len() {
            if i & mask == 0 {
                let a0 = self.amplitudes[i];
                let a1 = self.amplitudes[i | mask];
                self.amplitudes[i] = a0 * c - a1 * s;
                self.amplitudes[i | mask] = a0 * s + a1 * c;
            }
        }
    }

    fn cnot_unchecked(&mut self, control: usize, target: usize) {
        let cmask = self.bit(control);
        let tmask = self.bit(target);
        for i in 0..self.amplitudes.len() {
            if i & cmask != 0 && i & tmask == 0 {
                self.amplitudes.swap(i, i | tmask);
            }
        }
    }

    /// `⟨self|other⟩`, conjugating `self`.
    pub fn inner(&self, other: &Statevector) -> Result<Complex64> {
        if self.num_qubits != other.num_qubits {
            return Err(QkdError::Argument(format!(
                "inner product of {}-qubit and {}-qubit states",
                self.num_qubits, other.num_qubits
            )));
        }
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .fold(ZERO, |acc, (a, b)| acc + a.conj() * b))
    }
}

/// `|0…0⟩` on `q` qubits.
pub fn zero_state(num_qubits: usize) -> Result<Statevector> {
    Statevector::zero(num_qubits)
}

pub fn apply_ry(state: &Statevector, qubit: usize, angle: f64) -> Result<Statevector> {
    let mut out = state.clone();
    out.ry(qubit, angle)?;
    Ok(out)
}

pub fn apply_cnot(state: &Statevector, control: usize, target: usize) -> Result<Statevector> {
    let mut out = state.clone();
    out.cnot(control, target)?;
    Ok(out)
}

/// `|⟨a|b⟩|²`.
pub fn fidelity(a: &Statevector, b: &Statevector) -> Result<f64> {
    Ok(a.inner(b)?.norm_sqr())
}

/// Variational rotation angles, `num_layers × num_qubits`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CircuitParams {
    theta: Vec<f64>,
    num_layers: usize,
    num_qubits: usize,
}

impl CircuitParams {
    pub fn zeros(num_layers: usize, num_qubits: usize) -> Result<Self> {
        Self::new(vec![0.0; num_layers * num_qubits], num_layers, num_qubits)
    }

    pub fn new(theta: Vec<f64>, num_layers: usize, num_qubits: usize) -> Result<Self> {
        if num_layers == 0 {
            return Err(QkdError::Config("circuit needs at least one layer".into()));
        }
        if !(1..=MAX_QUBITS).contains(&num_qubits) {
            return Err(QkdError::Config(format!(
                "qubit count {num_qubits} outside 1..={MAX_QUBITS}"
            )));
        }
        if theta.len() != num_layers * num_qubits {
            return Err(QkdError::Argument(format!(
                "{} angles for a {num_layers}x{num_qubits} circuit",
                theta.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(QkdError::Argument("non-finite circuit angle".into()));
        }
        Ok(Self {
            theta,
            num_layers,
            num_qubits,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_qubits = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_qubits) {
            return Err(QkdError::Argument("ragged theta rows".into()));
        }
        Self::new(rows.concat(), rows.len(), num_qubits)
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn theta(&self, layer: usize, qubit: usize) -> f64 {
        self.theta[layer * self.num_qubits + qubit]
    }

    /// Flat row-major view of all angles.
    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    /// Adds `delta` to every angle (no wrapping).
    pub fn add_scaled(&mut self, delta: &[f64], scale: f64) {
        for (t, d) in self.theta.iter_mut().zip(delta) {
            *t += scale * d;
        }
    }

    pub fn set(&mut self, layer: usize, qubit: usize, value: f64) {
        self.theta[layer * self.num_qubits + qubit] = value;
    }
}

/// One Ry occurrence in the layered circuit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Input { layer: usize, qubit: usize },
    Theta { layer: usize, qubit: usize },
}

fn check_inputs(input_angles: &[f64], params: &CircuitParams) -> Result<()> {
    if input_angles.len() != params.num_qubits {
        return Err(QkdError::Argument(format!(
            "{} input angles for {} qubits",
            input_angles.len(),
            params.num_qubits
        )));
    }
    Ok(())
}

fn run_shifted(input_angles: &[f64], params: &CircuitParams, shift: Option<(Slot, f64)>) -> Statevector {
    let q = params.num_qubits;
    let mut state = Statevector::zero(q).expect("qubit count validated by CircuitParams");
    let offset = |slot: Slot| match shift {
        Some((s, delta)) if s == slot => delta,
        _ => 0.0,
    };
    for layer in 0..params.num_layers {
        for (qubit, &a) in input_angles.iter().enumerate() {
            state.ry_unchecked(qubit, a + offset(Slot::Input { layer, qubit }));
        }
        for qubit in 0..q {
            let t = params.theta(layer, qubit);
            state.ry_unchecked(qubit, t + offset(Slot::Theta { layer, qubit }));
        }
        for j in 0..q.saturating_sub(1) {
            state.cnot_unchecked(j, j + 1);
        }
    }
    state
}

/// Runs the full layered circuit on `|0…0⟩`.
pub fn run_circuit(input_angles: &[f64], params: &CircuitParams) -> Result<Statevector> {
    check_inputs(input_angles, params)?;
    Ok(run_shifted(input_angles, params, None))
}

fn kron(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Array2<Complex64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::from_elem((ar * br, ac * bc), ZERO);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[[i, j]];
            for k in 0..br {
                for l in 0..bc {
                    out[[i * br + k, j * bc + l]] = aij * b[[k, l]];
                }
            }
        }
    }
    out
}

fn ry_matrix(angle: f64) -> Array2<Complex64> {
    let (s, c) = (0.5 * angle).sin_cos();
    Array2::from_shape_vec(
        (2, 2),
        vec![
            Complex64::new(c, 0.0),
            Complex64::new(-s, 0.0),
            Complex64::new(s, 0.0),
            Complex64::new(c, 0.0),
        ],
    )
    .expect("2x2")
}

fn single_qubit_operator(num_qubits: usize, qubit: usize, gate: &Array2<Complex64>) -> Array2<Complex64> {
    let eye = Array2::from_diag_elem(2, ONE);
    (0..num_qubits).fold(Array2::from_elem((1, 1), ONE), |acc, j| {
        kron(&acc, if j == qubit { gate } else { &eye })
    })
}

fn cnot_operator(num_qubits: usize, control: usize, target: usize) -> Array2<Complex64> {
    let dim = 1usize << num_qubits;
    let cmask = 1 << (num_qubits - 1 - control);
    let tmask = 1 << (num_qubits - 1 - target);
    let mut out = Array2::from_elem((dim, dim), ZERO);
    for col in 0..dim {
        let row = if col & cmask != 0 { col ^ tmask } else { col };
        out[[row, col]] = ONE;
    }
    out
}

/// The whole layered circuit as one dense `2^q × 2^q` matrix, built from
/// Kronecker products of the individual gates. Oracle use only.
pub fn dense_circuit_unitary(input_angles: &[f64], params: &CircuitParams) -> Result<Array2<Complex64>> {
    check_inputs(input_angles, params)?;
    let q = params.num_qubits;
    if q > MAX_DENSE_QUBITS {
        return Err(QkdError::Size(format!(
            "dense unitary for {q} qubits exceeds the {MAX_DENSE_QUBITS}-qubit oracle limit"
        )));
    }
    let dim = 1usize << q;
    let mut unitary = Array2::from_diag_elem(dim, ONE);
    for layer in 0..params.num_layers {
        for (qubit, &a) in input_angles.iter().enumerate() {
            unitary = single_qubit_operator(q, qubit, &ry_matrix(a)).dot(&unitary);
        }
        for qubit in 0..q {
            let gate = ry_matrix(params.theta(layer, qubit));
            unitary = single_qubit_operator(q, qubit, &gate).dot(&unitary);
        }
        for j in 0..q.saturating_sub(1) {
            unitary = cnot_operator(q, j, j + 1).dot(&unitary);
        }
    }
    Ok(unitary)
}

/// Gradient of a (weighted sum of) fidelities with respect to the circuit
/// inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct CircuitGradient {
    /// One entry per input angle; re-uploads across layers are summed.
    pub input: Vec<f64>,
    /// Row-major `num_layers × num_qubits`.
    pub theta: Vec<f64>,
}

/// Gradient of `Σ_i weights[i] · |⟨ψ(input, θ)|targets[i]⟩|²` by the
/// parameter-shift rule, one ±π/2 pair per Ry occurrence.
pub fn weighted_fidelity_grad(
    input_angles: &[f64],
    params: &CircuitParams,
    targets: &[Statevector],
    weights: &[f64],
) -> Result<CircuitGradient> {
    check_inputs(input_angles, params)?;
    if targets.len() != weights.len() {
        return Err(QkdError::Argument(format!(
            "{} targets with {} weights",
            targets.len(),
            weights.len()
        )));
    }
    if let Some(bad) = targets.iter().find(|t| t.num_qubits() != params.num_qubits) {
        return Err(QkdError::Argument(format!(
            "{}-qubit target for a {}-qubit circuit",
            bad.num_qubits(),
            params.num_qubits
        )));
    }
    let objective = |state: &Statevector| -> f64 {
        targets
            .iter()
            .zip(weights)
            .filter(|(_, w)| **w != 0.0)
            .map(|(t, w)| w * state.inner(t).expect("dimensions checked").norm_sqr())
            .sum()
    };
    let shift_derivative = |slot: Slot| -> f64 {
        let plus = run_shifted(input_angles, params, Some((slot, FRAC_PI_2)));
        let minus = run_shifted(input_angles, params, Some((slot, -FRAC_PI_2)));
        0.5 * (objective(&plus) - objective(&minus))
    };

    let q = params.num_qubits;
    let mut grad = CircuitGradient {
        input: vec![0.0; q],
        theta: vec![0.0; params.num_layers * q],
    };
    if weights.iter().all(|w| *w == 0.0) {
        return Ok(grad);
    }
    for layer in 0..params.num_layers {
        for qubit in 0..q {
            grad.input[qubit] += shift_derivative(Slot::Input { layer, qubit });
            grad.theta[layer * q + qubit] = shift_derivative(Slot::Theta { layer, qubit });
        }
    }
    Ok(grad)
}

/// Parameter-shift gradient of the fidelity against one target state.
pub fn fidelity_grad_shift(
    input_angles: &[f64],
    params: &CircuitParams,
    target: &Statevector,
) -> Result<CircuitGradient> {
    weighted_fidelity_grad(input_angles, params, std::slice::from_ref(target), &[1.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn amps(state: &Statevector) -> Vec<(f64, f64)> {
        state.amplitudes().iter().map(|a| (a.re, a.im)).collect()
    }

    #[test]
    fn zero_state_shapes() {
        assert_eq!(amps(&zero_state(1).unwrap()), vec![(1.0, 0.0), (0.0, 0.0)]);
        assert_eq!(zero_state(2).unwrap().amplitudes().len(), 4);
        let s3 = zero_state(3).unwrap();
        assert_eq!(s3.amplitudes().len(), 8);
        assert_eq!(s3.amplitudes()[0], ONE);
        assert!(s3.amplitudes()[1..].iter().all(|a| *a == ZERO));
    }

    #[test]
    fn zero_state_rejects_out_of_range() {
        assert!(matches!(zero_state(0), Err(QkdError::Config(_))));
        assert!(matches!(zero_state(21), Err(QkdError::Config(_))));
    }

    #[test]
    fn ry_examples() {
        let zero = zero_state(1).unwrap();
        assert_eq!(apply_ry(&zero, 0, 0.0).unwrap(), zero);
        let one = apply_ry(&zero, 0, PI).unwrap();
        assert!(one.amplitudes()[0].norm() < 1e-15);
        assert!((one.amplitudes()[1].re - 1.0).abs() < 1e-15);
        let plus = apply_ry(&zero, 0, PI / 2.0).unwrap();
        assert!((plus.amplitudes()[0].re - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((plus.amplitudes()[1].re - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(apply_ry(&zero, 1, 0.3), Err(QkdError::Index(_))));
    }

    #[test]
    fn cnot_examples() {
        // |10⟩ is index 2 with qubit 0 as the high bit.
        let s10 = Statevector::basis(2, 0b10).unwrap();
        assert_eq!(apply_cnot(&s10, 0, 1).unwrap(), Statevector::basis(2, 0b11).unwrap());
        let s01 = Statevector::basis(2, 0b01).unwrap();
        assert_eq!(apply_cnot(&s01, 0, 1).unwrap(), s01);
        let mixed = apply_ry(&zero_state(2).unwrap(), 0, 0.7).unwrap();
        let twice = apply_cnot(&apply_cnot(&mixed, 0, 1).unwrap(), 0, 1).unwrap();
        assert_eq!(twice, mixed);
        assert!(matches!(apply_cnot(&s10, 1, 1), Err(QkdError::Argument(_))));
        assert!(matches!(apply_cnot(&s10, 0, 2), Err(QkdError::Index(_))));
    }

    #[test]
    fn run_circuit_examples() {
        let params = CircuitParams::zeros(1, 1).unwrap();
        assert_eq!(run_circuit(&[0.0], &params).unwrap(), zero_state(1).unwrap());

        // Ry(π) flips qubit 0, then CNOT(0→1) flips qubit 1: |11⟩.
        let params = CircuitParams::zeros(1, 2).unwrap();
        let out = run_circuit(&[PI, 0.0], &params).unwrap();
        for (i, a) in out.amplitudes().iter().enumerate() {
            let expected = if i == 0b11 { 1.0 } else { 0.0 };
            assert!((a.re - expected).abs() < 1e-15 && a.im == 0.0, "index {i}: {a}");
        }
        assert!(matches!(run_circuit(&[0.0], &params), Err(QkdError::Argument(_))));
    }

    #[test]
    fn dense_unitary_small_cases() {
        let params = CircuitParams::zeros(1, 2).unwrap();
        let u = dense_circuit_unitary(&[0.0, 0.0], &params).unwrap();
        assert_eq!(u, cnot_operator(2, 0, 1));

        let params = CircuitParams::zeros(1, 1).unwrap();
        let u = dense_circuit_unitary(&[PI / 2.0], &params).unwrap();
        let expected = ry_matrix(PI / 2.0);
        for (a, b) in u.iter().zip(expected.iter()) {
            assert!((a - b).norm() < 1e-15);
        }

        let params = CircuitParams::zeros(1, 7).unwrap();
        assert!(matches!(
            dense_circuit_unitary(&[0.0; 7], &params),
            Err(QkdError::Size(_))
        ));
    }

    #[test]
    fn fidelity_examples() {
        let zero = zero_state(1).unwrap();
        let one = Statevector::basis(1, 1).unwrap();
        let plus = apply_ry(&zero, 0, PI / 2.0).unwrap();
        assert_eq!(fidelity(&zero, &zero).unwrap(), 1.0);
        assert_eq!(fidelity(&zero, &one).unwrap(), 0.0);
        assert!((fidelity(&zero, &plus).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            fidelity(&zero, &zero_state(2).unwrap()),
            Err(QkdError::Argument(_))
        ));
    }

    #[test]
    fn shift_gradient_at_maximum_is_zero() {
        let params = CircuitParams::zeros(1, 1).unwrap();
        let grad = fidelity_grad_shift(&[0.0], &params, &zero_state(1).unwrap()).unwrap();
        assert!(grad.input.iter().chain(&grad.theta).all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn shift_gradient_single_qubit_closed_form() {
        // F(t) = cos²(t/2) so dF/dt = -sin(t)/2.
        for t in [-2.5, -0.3, 0.0, 0.4, 1.1, 2.9] {
            let params = CircuitParams::new(vec![t], 1, 1).unwrap();
            let grad = fidelity_grad_shift(&[0.0], &params, &zero_state(1).unwrap()).unwrap();
            assert!((grad.theta[0] + t.sin() / 2.0).abs() < 1e-14, "t={t}");
            let f = fidelity(&run_circuit(&[0.0], &params).unwrap(), &zero_state(1).unwrap()).unwrap();
            assert!((f - (t / 2.0).cos().powi(2)).abs() < 1e-14);
        }
    }

    #[test]
    fn weighted_gradient_checks_lengths() {
        let params = CircuitParams::zeros(1, 2).unwrap();
        let target = zero_state(2).unwrap();
        assert!(weighted_fidelity_grad(&[0.0, 0.0], &params, std::slice::from_ref(&target), &[]).is_err());
        assert!(weighted_fidelity_grad(&[0.0, 0.0], &params, &[zero_state(1).unwrap()], &[1.0]).is_err());
    }
}
