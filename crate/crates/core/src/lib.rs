//! Quantum-gated adapter routing for exemplar-free class-incremental
//! learning.
//!
//! A frozen backbone receives one low-rank adapter per task. Finished tasks
//! are summarized by a unit vector taken from the adapter's singular
//! subspace and encoded as a small simulated quantum state. A gate scores
//! each sample against those states by fidelity; the resulting weights steer
//! distillation from old adapters into the new one during training and fuse
//! adapter features at inference.

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod gating;
pub mod losses;
pub mod network;
pub mod qsim;
pub mod svd;
pub mod taskembed;
pub mod trainer;

pub use datagen::{LabeledSample, Stream, StreamSpec, TaskData};
pub use error::{QkdError, Result};
pub use gating::{Gate, GateKind, GateParams, RelevanceVector, SparsityTarget};
pub use losses::{DistillSpace, LossBreakdown};
pub use network::{AdapterStack, Backbone, BackboneMode, TaskHead};
pub use qsim::{CircuitParams, Statevector};
pub use taskembed::{TaskEmbedding, TaskStateMode};
pub use trainer::{run_protocol, GateInput, IncrementalModel, Metrics, RunOutcome, TrainConfig};
