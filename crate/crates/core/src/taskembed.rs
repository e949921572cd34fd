//! Task-level vectors from adapter weights: stack, truncate, aggregate,
//! normalize, encode.

use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{QkdError, Result};
use crate::gating::{project_to_angles, GateParams};
use crate::network::{hash_floats, AdapterStack};
use crate::qsim::{run_circuit, CircuitParams, Statevector};
use crate::svd::{truncated_svd, TruncatedSvd};

/// Stacked adapter parameters, `d × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterMatrix(pub Array2<f64>);

/// Per block, the columns of `W_down` followed by the columns of `W_upᵀ`.
/// `k = blocks · 2 · r`.
pub fn stack_adapter_matrix(adapters: &AdapterStack) -> Result<AdapterMatrix> {
    if adapters.blocks.is_empty() {
        return Err(QkdError::State("adapter stack has no blocks".into()));
    }
    let d = adapters.width();
    let r = adapters.rank();
    let k = adapters.blocks.len() * 2 * r;
    let mut s = Array2::<f64>::zeros((d, k));
    for (b, block) in adapters.blocks.iter().enumerate() {
        let base = b * 2 * r;
        s.slice_mut(ndarray::s![.., base..base + r]).assign(&block.down);
        s.slice_mut(ndarray::s![.., base + r..base + 2 * r])
            .assign(&block.up.t());
    }
    Ok(AdapterMatrix(s))
}

/// `normalize(U·Σ·(Vᵀ·1))`, i.e. the row sums of the rank-`r` reconstruction.
pub fn task_vector(svd: &TruncatedSvd) -> Result<Array1<f64>> {
    let weights = svd.v.sum_axis(ndarray::Axis(0)) * &svd.sigma;
    let v = svd.u.dot(&weights);
    let norm = v.dot(&v).sqrt();
    if norm < 1e-12 {
        return Err(QkdError::DegenerateTask(norm));
    }
    Ok(v / norm)
}

/// How a task vector becomes a task state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskStateMode {
    /// Encoding layers only, variational angles held at zero.
    AngleEnc,
    /// The full circuit with the gate's current variational angles.
    AngleEncSharedTheta,
}

impl FromStr for TaskStateMode {
    type Err = QkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "angle_enc" => Ok(Self::AngleEnc),
            "angle_enc_shared_theta" => Ok(Self::AngleEncSharedTheta),
            other => Err(QkdError::Config(format!(
                "unknown task_state_mode {other:?} (expected angle_enc or angle_enc_shared_theta)"
            ))),
        }
    }
}

impl fmt::Display for TaskStateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AngleEnc => "angle_enc",
            Self::AngleEncSharedTheta => "angle_enc_shared_theta",
        })
    }
}

/// Projects `s_tilde` with the shared gate projection and runs the circuit.
pub fn encode_task_state(s_tilde: ArrayView1<f64>, gate: &GateParams, mode: TaskStateMode) -> Result<Statevector> {
    let angles = project_to_angles(s_tilde, gate)?;
    match mode {
        TaskStateMode::AngleEnc => {
            let params = CircuitParams::zeros(gate.circuit.num_layers(), gate.circuit.num_qubits())?;
            run_circuit(&angles, &params)
        }
        TaskStateMode::AngleEncSharedTheta => run_circuit(&angles, &gate.circuit),
    }
}

/// Frozen summary of one finished task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbedding {
    pub task_id: usize,
    /// Unit vector of length `d`.
    pub s_tilde: Array1<f64>,
    pub task_state: Statevector,
}

impl TaskEmbedding {
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.task_id.hash(&mut h);
        hash_floats(&mut h, self.s_tilde.iter());
        for a in self.task_state.amplitudes() {
            hash_floats(&mut h, [&a.re, &a.im]);
        }
        h.finish()
    }
}

/// Task vector for an adapter stack. A cancelling aggregation falls back to
/// the top left singular vector.
pub fn task_embedding_vector(adapters: &AdapterStack, r_svd: usize) -> Result<Array1<f64>> {
    let s = stack_adapter_matrix(adapters)?;
    let svd = truncated_svd(&s.0, r_svd)?;
    match task_vector(&svd) {
        Ok(v) => Ok(v),
        Err(QkdError::DegenerateTask(norm)) => {
            log::warn!(
                "task {}: aggregated direction vanished (norm {norm:e}); using top singular vector",
                adapters.task_id
            );
            Ok(svd.u.column(0).to_owned())
        }
        Err(e) => Err(e),
    }
}

pub fn build_task_embedding(
    adapters: &AdapterStack,
    r_svd: usize,
    gate: &GateParams,
    mode: TaskStateMode,
) -> Result<TaskEmbedding> {
    let s_tilde = task_embedding_vector(adapters, r_svd)?;
    let task_state = encode_task_state(s_tilde.view(), gate, mode)?;
    Ok(TaskEmbedding {
        task_id: adapters.task_id,
        s_tilde,
        task_state,
    })
}
