//! Sample-to-task relevance: the quantum fidelity gate and the classical
//! baselines it is compared against.
//!
//! The quantum gate projects a normalized feature to `q` angles
//! (`π·tanh(P·h̃)`), runs the layered circuit, scores every stored task state
//! by fidelity and turns the scores into weights with a temperature softmax.

use std::f64::consts::PI;
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{QkdError, Result};
use crate::network::hash_floats;
use crate::qsim::{run_circuit, weighted_fidelity_grad, CircuitParams, Statevector};
use crate::taskembed::TaskEmbedding;

/// Hidden width of the MLP baseline gate.
pub const MLP_HIDDEN: usize = 64;
/// Standard deviation of the initial projection entries.
pub const PROJECTION_INIT_STD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateKind {
    Quantum,
    Cosine,
    Mlp,
    Random,
}

impl GateKind {
    pub const ALL: [GateKind; 4] = [GateKind::Quantum, GateKind::Cosine, GateKind::Mlp, GateKind::Random];
}

impl FromStr for GateKind {
    type Err = QkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantum" => Ok(Self::Quantum),
            "cosine" => Ok(Self::Cosine),
            "mlp" => Ok(Self::Mlp),
            "random" => Ok(Self::Random),
            other => Err(QkdError::Config(format!(
                "unknown gate kind {other:?} (expected quantum, cosine, mlp or random)"
            ))),
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Quantum => "quantum",
            Self::Cosine => "cosine",
            Self::Mlp => "mlp",
            Self::Random => "random",
        })
    }
}

/// What the sparsity regularizer penalizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SparsityTarget {
    /// `Σ p_i` on raw fidelities. The L1 norm of `α` is always 1.
    P,
    /// Entropy of `α`.
    EntropyAlpha,
}

impl FromStr for SparsityTarget {
    type Err = QkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(Self::P),
            "entropy_alpha" => Ok(Self::EntropyAlpha),
            other => Err(QkdError::Config(format!(
                "unknown sparsity_target {other:?} (expected p or entropy_alpha)"
            ))),
        }
    }
}

impl fmt::Display for SparsityTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::P => "p",
            Self::EntropyAlpha => "entropy_alpha",
        })
    }
}

/// Projection, circuit angles and temperature of the quantum gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    /// `q × d`
    pub projection: Array2<f64>,
    pub circuit: CircuitParams,
    pub tau: f64,
}

impl GateParams {
    pub fn new(projection: Array2<f64>, circuit: CircuitParams, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(QkdError::Config(format!("temperature {tau} must be positive")));
        }
        if projection.nrows() != circuit.num_qubits() {
            return Err(QkdError::Argument(format!(
                "{}-row projection for a {}-qubit circuit",
                projection.nrows(),
                circuit.num_qubits()
            )));
        }
        if projection.iter().any(|x| !x.is_finite()) {
            return Err(QkdError::Argument("non-finite projection entry".into()));
        }
        Ok(Self {
            projection,
            circuit,
            tau,
        })
    }

    /// Gaussian projection (`PROJECTION_INIT_STD`), zero circuit angles.
    pub fn random(width: usize, num_qubits: usize, num_layers: usize, tau: f64, seed: u64) -> Result<Self> {
        let circuit = CircuitParams::zeros(num_layers, num_qubits)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = Array2::from_shape_simple_fn((num_qubits, width), || {
            PROJECTION_INIT_STD * rng.sample::<f64, _>(StandardNormal)
        });
        Self::new(projection, circuit, tau)
    }

    pub fn num_qubits(&self) -> usize {
        self.circuit.num_qubits()
    }

    pub fn num_params(&self) -> usize {
        self.projection.len() + self.circuit.as_slice().len()
    }
}

/// Raw scores `p` and normalized weights `α` over a task pool.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceVector {
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RelevanceVector {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.alpha)
    }

    pub fn entropy(&self) -> f64 {
        -self.alpha.iter().filter(|&&a| a > 0.0).map(|a| a * a.ln()).sum::<f64>()
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_with_temperature(scores: &[f64], tau: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `π · tanh(P · h̃)`.
pub fn project_to_angles(h_tilde: ArrayView1<f64>, gate: &GateParams) -> Result<Vec<f64>> {
    if h_tilde.len() != gate.projection.ncols() {
        return Err(QkdError::Argument(format!(
            "feature of length {} for a projection of width {}",
            h_tilde.len(),
            gate.projection.ncols()
        )));
    }
    Ok(gate.projection.dot(&h_tilde).iter().map(|u| PI * u.tanh()).collect())
}

fn check_pool(pool_len: usize) -> Result<()> {
    if pool_len == 0 {
        return Err(QkdError::State("relevance requested over an empty task pool".into()));
    }
    Ok(())
}

fn sample_state(h_tilde: ArrayView1<f64>, gate: &GateParams) -> Result<(Vec<f64>, Statevector)> {
    let angles = project_to_angles(h_tilde, gate)?;
    let state = run_circuit(&angles, &gate.circuit)?;
    Ok((angles, state))
}

/// Fidelity of the sample state against every task state, then a
/// temperature softmax.
pub fn compute_relevance(
    h_tilde: ArrayView1<f64>,
    pool: &[TaskEmbedding],
    gate: &GateParams,
) -> Result<RelevanceVector> {
    check_pool(pool.len())?;
    let (_, state) = sample_state(h_tilde, gate)?;
    let p = pool
        .iter()
        .map(|e| crate::qsim::fidelity(&state, &e.task_state))
        .collect::<Result<Vec<_>>>()?;
    let alpha = softmax_with_temperature(&p, gate.tau);
    Ok(RelevanceVector { p, alpha })
}

/// `‖p‖₁`.
pub fn sparsity_loss(rel: &RelevanceVector) -> f64 {
    rel.p.iter().sum()
}

pub fn sparsity_value(rel: &RelevanceVector, target: SparsityTarget) -> f64 {
    match target {
        SparsityTarget::P => sparsity_loss(rel),
        SparsityTarget::EntropyAlpha => rel.entropy(),
    }
}

/// Loss gradient arriving at the gate: with respect to `α` and directly with
/// respect to `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceUpstream {
    pub d_alpha: Vec<f64>,
    pub d_p: Vec<f64>,
}

impl RelevanceUpstream {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_alpha: vec![0.0; n],
            d_p: vec![0.0; n],
        }
    }

    /// Adds the gradient of `weight · sparsity_value(rel, target)`.
    pub fn add_sparsity(&mut self, rel: &RelevanceVector, target: SparsityTarget, weight: f64) {
        match target {
            SparsityTarget::P => self.d_p.iter_mut().for_each(|g| *g += weight),
            SparsityTarget::EntropyAlpha => {
                for (g, a) in self.d_alpha.iter_mut().zip(&rel.alpha) {
                    if *a > 0.0 {
                        *g -= weight * (a.ln() + 1.0);
                    }
                }
            }
        }
    }
}

/// `dL/dp` through the softmax Jacobian `(diag(α) − ααᵀ)/τ` plus the direct term.
pub fn grad_wrt_scores(rel: &RelevanceVector, upstream: &RelevanceUpstream, tau: f64) -> Vec<f64> {
    let mean: f64 = rel.alpha.iter().zip(&upstream.d_alpha).map(|(a, g)| a * g).sum();
    rel.alpha
        .iter()
        .zip(&upstream.d_alpha)
        .zip(&upstream.d_p)
        .map(|((a, g), dp)| a * (g - mean) / tau + dp)
        .collect()
}

/// Gradient of the quantum gate parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantumGateGrad {
    pub projection: Array2<f64>,
    pub theta: Vec<f64>,
}

/// Chain rule from `(dL/dα, dL/dp)` back to the projection and the circuit
/// angles. Fidelity derivatives use the parameter-shift rule; the task states
/// are stored constants.
pub fn gate_gradients(
    h_tilde: ArrayView1<f64>,
    pool: &[TaskEmbedding],
    gate: &GateParams,
    upstream: &RelevanceUpstream,
) -> Result<QuantumGateGrad> {
    check_pool(pool.len())?;
    if upstream.d_alpha.len() != pool.len() || upstream.d_p.len() != pool.len() {
        return Err(QkdError::Argument("upstream gradient length differs from pool".into()));
    }
    let rel = compute_relevance(h_tilde, pool, gate)?;
    let d_p = grad_wrt_scores(&rel, upstream, gate.tau);
    let angles = project_to_angles(h_tilde, gate)?;
    let targets: Vec<Statevector> = pool.iter().map(|e| e.task_state.clone()).collect();
    let circuit_grad = weighted_fidelity_grad(&angles, &gate.circuit, &targets, &d_p)?;

    // d angle_j / d P_jk = π·sech²(u_j)·h̃_k
    let u = gate.projection.dot(&h_tilde);
    let d_u: Array1<f64> = u
        .iter()
        .zip(&circuit_grad.input)
        .map(|(uj, ga)| ga * PI * (1.0 - uj.tanh().powi(2)))
        .collect();
    let projection = d_u.view().insert_axis(Axis(1)).dot(&h_tilde.insert_axis(Axis(0)));
    Ok(QuantumGateGrad {
        projection,
        theta: circuit_grad.theta,
    })
}

/// `p_i = max(0, ⟨h̃, s̃_i⟩)`, then the temperature softmax.
pub fn cosine_relevance(
    h_tilde: ArrayView1<f64>,
    pool_vectors: &[ArrayView1<f64>],
    tau: f64,
) -> Result<RelevanceVector> {
    check_pool(pool_vectors.len())?;
    let p = pool_vectors
        .iter()
        .map(|s| {
            if s.len() != h_tilde.len() {
                return Err(QkdError::Argument("task vector width differs from feature".into()));
            }
            Ok(h_tilde.dot(s).max(0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let alpha = softmax_with_temperature(&p, tau);
    Ok(RelevanceVector { p, alpha })
}

/// Uniform pool index keyed by the seed and the bit pattern of `key`.
pub fn random_index(seed: u64, key: ArrayView1<f64>, pool_len: usize) -> usize {
    let mut h = DefaultHasher::new();
    seed.hash(&mut h);
    hash_floats(&mut h, key.iter());
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
    rng.random_range(0..pool_len)
}

/// One-hot weights on a uniformly drawn pool entry.
pub fn random_relevance(seed: u64, key: ArrayView1<f64>, pool_len: usize) -> Result<RelevanceVector> {
    check_pool(pool_len)?;
    let pick = random_index(seed, key, pool_len);
    let alpha: Vec<f64> = (0..pool_len).map(|i| if i == pick { 1.0 } else { 0.0 }).collect();
    Ok(RelevanceVector {
        p: alpha.clone(),
        alpha,
    })
}

/// Two-layer baseline gate `d → 64 → pool`, scores `p = sigmoid(z)`.
/// Output rows are added as tasks register.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGate {
    /// `64 × d`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `tasks × 64`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGateGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MlpGate {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (width as f64).sqrt();
        Self {
            w1: Array2::from_shape_simple_fn((MLP_HIDDEN, width), || rng.random_range(-bound..bound)),
            b1: Array1::zeros(MLP_HIDDEN),
            w2: Array2::zeros((0, MLP_HIDDEN)),
            b2: Array1::zeros(0),
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.b2.len()
    }

    /// Grows the output layer to `n` rows; new rows start at zero.
    pub fn ensure_outputs(&mut self, n: usize) {
        let have = self.num_outputs();
        if n <= have {
            return;
        }
        let mut w2 = Array2::zeros((n, MLP_HIDDEN));
        w2.slice_mut(ndarray::s![..have, ..]).assign(&self.w2);
        let mut b2 = Array1::zeros(n);
        b2.slice_mut(ndarray::s![..have]).assign(&self.b2);
        self.w2 = w2;
        self.b2 = b2;
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn check(&self, h_tilde: ArrayView1<f64>, pool_len: usize) -> Result<()> {
        check_pool(pool_len)?;
        if pool_len > self.num_outputs() {
            return Err(QkdError::State(format!(
                "MLP gate has {} outputs for a pool of {pool_len}",
                self.num_outputs()
            )));
        }
        if h_tilde.len() != self.w1.ncols() {
            return Err(QkdError::Argument("feature width differs from MLP gate input".into()));
        }
        Ok(())
    }

    fn hidden_pre(&self, h_tilde: ArrayView1<f64>) -> Array1<f64> {
        self.w1.dot(&h_tilde) + &self.b1
    }

    fn scores(&self, hidden: &Array1<f64>, pool_len: usize) -> Vec<f64> {
        (0..pool_len)
            .map(|i| sigmoid(self.w2.row(i).dot(hidden) + self.b2[i]))
            .collect()
    }

    pub fn relevance(&self, h_tilde: ArrayView1<f64>, pool_len: usize, tau: f64) -> Result<RelevanceVector> {
        self.check(h_tilde, pool_len)?;
        let hidden = self.hidden_pre(h_tilde).mapv(|v| v.max(0.0));
        let p = self.scores(&hidden, pool_len);
        let alpha = softmax_with_temperature(&p, tau);
        Ok(RelevanceVector { p, alpha })
    }

    pub fn gradients(
        &self,
        h_tilde: ArrayView1<f64>,
        pool_len: usize,
        tau: f64,
        upstream: &RelevanceUpstream,
    ) -> Result<MlpGateGrad> {
        self.check(h_tilde, pool_len)?;
        let pre = self.hidden_pre(h_tilde);
        let hidden = pre.mapv(|v| v.max(0.0));
        let p = self.scores(&hidden, pool_len);
        let rel = RelevanceVector {
            alpha: softmax_with_temperature(&p, tau),
            p,
        };
        let d_p = grad_wrt_scores(&rel, upstream, tau);

        let mut d_z = Array1::zeros(self.num_outputs());
        for i in 0..pool_len {
            d_z[i] = d_p[i] * rel.p[i] * (1.0 - rel.p[i]);
        }
        let w2 = d_z.view().insert_axis(Axis(1)).dot(&hidden.view().insert_axis(Axis(0)));
        let d_hidden = self.w2.t().dot(&d_z) * pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let w1 = d_hidden.view().insert_axis(Axis(1)).dot(&h_tilde.insert_axis(Axis(0)));
        Ok(MlpGateGrad {
            w1,
            b1: d_hidden,
            w2,
            b2: d_z,
        })
    }
}

/// Gradient buffers for whichever gate is trainable.
#[derive(Clone, Debug, PartialEq)]
pub enum GateGrad {
    Quantum(QuantumGateGrad),
    Mlp(MlpGateGrad),
}

impl GateGrad {
    pub fn accumulate(&mut self, other: &GateGrad, scale: f64) {
        match (self, other) {
            (GateGrad::Quantum(a), GateGrad::Quantum(b)) => {
                a.projection.scaled_add(scale, &b.projection);
                a.theta.iter_mut().zip(&b.theta).for_each(|(x, y)| *x += scale * y);
            }
            (GateGrad::Mlp(a), GateGrad::Mlp(b)) => {
                a.w1.scaled_add(scale, &b.w1);
                a.b1.scaled_add(scale, &b.b1);
                a.w2.scaled_add(scale, &b.w2);
                a.b2.scaled_add(scale, &b.b2);
            }
            _ => panic!("mixed gate gradient kinds"),
        }
    }

    pub fn scale(&mut self, s: f64) {
        match self {
            GateGrad::Quantum(g) => {
                g.projection *= s;
                g.theta.iter_mut().for_each(|x| *x *= s);
            }
            GateGrad::Mlp(g) => {
                g.w1 *= s;
                g.b1 *= s;
                g.w2 *= s;
                g.b2 *= s;
            }
        }
    }

    /// All entries in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            GateGrad::Quantum(g) => g.projection.iter().chain(&g.theta).copied().collect(),
            GateGrad::Mlp(g) => g.w1.iter().chain(&g.b1).chain(&g.w2).chain(&g.b2).copied().collect(),
        }
    }
}

/// The relevance estimator used by a model: shared quantum parameters (also
/// used to encode task states) plus the kind-specific scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub kind: GateKind,
    pub params: GateParams,
    pub mlp: Option<MlpGate>,
    pub seed: u64,
}

impl Gate {
    pub fn new(
        kind: GateKind,
        width: usize,
        num_qubits: usize,
        num_layers: usize,
        tau: f64,
        seed: u64,
    ) -> Result<Self> {
        let params = GateParams::random(width, num_qubits, num_layers, tau, seed)?;
        let mlp = (kind == GateKind::Mlp).then(|| MlpGate::new(width, seed ^ 0x6d6c_7067));
        Ok(Self {
            kind,
            params,
            mlp,
            seed,
        })
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.kind, GateKind::Quantum | GateKind::Mlp)
    }

    /// Trainable parameter count of the scorer actually in use.
    pub fn num_params(&self) -> usize {
        match self.kind {
            GateKind::Quantum => self.params.num_params(),
            GateKind::Mlp => self.mlp.as_ref().map_or(0, MlpGate::num_params),
            GateKind::Cosine | GateKind::Random => 0,
        }
    }

    /// Called when a task embedding joins the pool.
    pub fn register_task(&mut self, pool_len: usize) {
        if let Some(mlp) = &mut self.mlp {
            mlp.ensure_outputs(pool_len);
        }
    }

    pub fn relevance(&self, h_tilde: ArrayView1<f64>, pool: &[TaskEmbedding]) -> Result<RelevanceVector> {
        match self.kind {
            GateKind::Quantum => compute_relevance(h_tilde, pool, &self.params),
            GateKind::Cosine => {
                let vectors: Vec<_> = pool.iter().map(|e| e.s_tilde.view()).collect();
                cosine_relevance(h_tilde, &vectors, self.params.tau)
            }
            GateKind::Mlp => {
                self.mlp
                    .as_ref()
                    .expect("mlp gate carries its network")
                    .relevance(h_tilde, pool.len(), self.params.tau)
            }
            GateKind::Random => random_relevance(self.seed, h_tilde, pool.len()),
        }
    }

    /// Parameter gradient, or `None` for parameterless gates.
    pub fn gradients(
        &self,
        h_tilde: ArrayView1<f64>,
        pool: &[TaskEmbedding],
        upstream: &RelevanceUpstream,
    ) -> Result<Option<GateGrad>> {
        match self.kind {
            GateKind::Quantum => Ok(Some(GateGrad::Quantum(gate_gradients(
                h_tilde,
                pool,
                &self.params,
                upstream,
            )?))),
            GateKind::Mlp => Ok(Some(GateGrad::Mlp(
                self.mlp.as_ref().expect("mlp gate carries its network").gradients(
                    h_tilde,
                    pool.len(),
                    self.params.tau,
                    upstream,
                )?,
            ))),
            GateKind::Cosine | GateKind::Random => Ok(None),
        }
    }

    pub fn zero_grad(&self) -> Option<GateGrad> {
        match self.kind {
            GateKind::Quantum => Some(GateGrad::Quantum(QuantumGateGrad {
                projection: Array2::zeros(self.params.projection.raw_dim()),
                theta: vec![0.0; self.params.circuit.as_slice().len()],
            })),
            GateKind::Mlp => self.mlp.as_ref().map(|m| {
                GateGrad::Mlp(MlpGateGrad {
                    w1: Array2::zeros(m.w1.raw_dim()),
                    b1: Array1::zeros(m.b1.len()),
                    w2: Array2::zeros(m.w2.raw_dim()),
                    b2: Array1::zeros(m.b2.len()),
                })
            }),
            GateKind::Cosine | GateKind::Random => None,
        }
    }

    /// `params += scale · step`.
    pub fn apply_update(&mut self, step: &GateGrad, scale: f64) {
        match (step, self.kind) {
            (GateGrad::Quantum(g), GateKind::Quantum) => {
                self.params.projection.scaled_add(scale, &g.projection);
                self.params.circuit.add_scaled(&g.theta, scale);
            }
            (GateGrad::Mlp(g), GateKind::Mlp) => {
                let mlp = self.mlp.as_mut().expect("mlp gate carries its network");
                mlp.w1.scaled_add(scale, &g.w1);
                mlp.b1.scaled_add(scale, &g.b1);
                mlp.w2.scaled_add(scale, &g.w2);
                mlp.b2.scaled_add(scale, &g.b2);
            }
            _ => panic!("gate update kind does not match gate"),
        }
    }
}

/// Relevance from one of the parameter-free or classical scorers.
pub fn classical_gate(
    kind: GateKind,
    h_tilde: ArrayView1<f64>,
    pool_vectors: &[ArrayView1<f64>],
    tau: f64,
    seed: u64,
    mlp: Option<&MlpGate>,
) -> Result<RelevanceVector> {
    match kind {
        GateKind::Cosine => cosine_relevance(h_tilde, pool_vectors, tau),
        GateKind::Random => random_relevance(seed, h_tilde, pool_vectors.len()),
        GateKind::Mlp => mlp
            .ok_or_else(|| QkdError::Config("mlp gate requested without network weights".into()))?
            .relevance(h_tilde, pool_vectors.len(), tau),
        GateKind::Quantum => Err(QkdError::Config("quantum is not a classical gate kind".into())),
    }
}
