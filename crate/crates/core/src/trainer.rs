//! The incremental protocol. Each task adds one adapter and one head; SGD
//! updates them jointly with the gate, after which the task joins the pool
//! used for gated inference.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{LabeledSample, TaskData};
use crate::error::{QkdError, Result};
use crate::gating::{argmax, Gate, GateGrad, GateKind, SparsityTarget};
use crate::losses::{loss_gradients, DistillSpace, LossBreakdown, ObjectiveConfig, SampleInputs, StudentSlice};
use crate::network::{init_adapter, AdapterGrad, AdapterStack, Backbone, BackboneMode, HeadGrad, TaskHead};
use crate::taskembed::{build_task_embedding, TaskEmbedding, TaskStateMode};

const SEED_BACKBONE: u64 = 1;
const SEED_GATE: u64 = 2;
const SEED_ADAPTER: u64 = 3;
const SEED_SHUFFLE: u64 = 4;

/// SplitMix64 finalizer over `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Which features feed the gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateInput {
    RawBackbone,
    /// Backbone with the first task's adapter.
    FirstAdapter,
    /// Backbone with the first two tasks' adapters.
    FirstTwo,
}

impl GateInput {
    pub const ALL: [GateInput; 3] = [GateInput::RawBackbone, GateInput::FirstAdapter, GateInput::FirstTwo];

    pub(crate) fn code(self) -> u8 {
        match self {
            Self::RawBackbone => 0,
            Self::FirstAdapter => 1,
            Self::FirstTwo => 2,
        }
    }

    /// Adapters used once enough tasks exist.
    fn adapters_used(self) -> usize {
        self.code() as usize
    }
}

impl FromStr for GateInput {
    type Err = QkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_backbone" => Ok(Self::RawBackbone),
            "first_adapter" => Ok(Self::FirstAdapter),
            "first_two" => Ok(Self::FirstTwo),
            other => Err(QkdError::Config(format!(
                "unknown gate_input {other:?} (expected raw_backbone, first_adapter or first_two)"
            ))),
        }
    }
}

impl fmt::Display for GateInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RawBackbone => "raw_backbone",
            Self::FirstAdapter => "first_adapter",
            Self::FirstTwo => "first_two",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub r_adapter: usize,
    pub r_svd: usize,
    /// Qubits of the gate circuit.
    pub q: usize,
    /// Variational layers of the gate circuit.
    pub l_q: usize,
    pub tau: f64,
    pub lambda_kd: f64,
    pub lambda_s: f64,
    pub gate_kind: GateKind,
    pub gate_input: GateInput,
    pub distill_space: DistillSpace,
    pub task_state_mode: TaskStateMode,
    pub sparsity_target: SparsityTarget,
    pub num_blocks: usize,
    pub backbone_mode: BackboneMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            base_lr: 0.05,
            momentum: 0.9,
            r_adapter: 8,
            r_svd: 12,
            q: 4,
            l_q: 2,
            tau: 1.0,
            lambda_kd: 1.0,
            lambda_s: 0.05,
            gate_kind: GateKind::Quantum,
            gate_input: GateInput::FirstAdapter,
            distill_space: DistillSpace::LogitKl,
            task_state_mode: TaskStateMode::AngleEnc,
            sparsity_target: SparsityTarget::P,
            num_blocks: 2,
            backbone_mode: BackboneMode::Mlp,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks the configuration against a backbone of width `width`.
    pub fn validate(&self, width: usize) -> Result<()> {
        let fail = |m: String| Err(QkdError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau {} must be positive", self.tau));
        }
        if self.lambda_kd < 0.0 || self.lambda_s < 0.0 || !self.lambda_kd.is_finite() || !self.lambda_s.is_finite() {
            return fail("lambda_kd and lambda_s must be finite and non-negative".into());
        }
        if self.q == 0 || self.q > crate::qsim::MAX_QUBITS || self.l_q == 0 {
            return fail(format!(
                "q = {} must lie in 1..={} and l_q = {} must be positive",
                self.q,
                crate::qsim::MAX_QUBITS,
                self.l_q
            ));
        }
        if self.num_blocks == 0 {
            return fail("num_blocks must be positive".into());
        }
        if self.r_adapter == 0 || self.r_adapter >= width {
            return fail(format!(
                "r_adapter {} must satisfy 1 <= r < d = {width}",
                self.r_adapter
            ));
        }
        let k = self.num_blocks * 2 * self.r_adapter;
        if self.r_svd == 0 || self.r_svd > width.min(k) {
            return fail(format!(
                "r_svd {} must lie in 1..={} for d = {width} and k = {k}",
                self.r_svd,
                width.min(k)
            ));
        }
        Ok(())
    }

    fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda_kd: self.lambda_kd,
            lambda_s: self.lambda_s,
            distill_space: self.distill_space,
            sparsity_target: self.sparsity_target,
        }
    }
}

/// `base · (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(QkdError::Config("cosine schedule over zero steps".into()));
    }
    if step > total_steps {
        return Err(QkdError::Argument(format!("step {step} beyond {total_steps}")));
    }
    Ok(base_lr * (1.0 + (PI * step as f64 / total_steps as f64).cos()) / 2.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `A_b` after each stage.
    pub per_stage_accuracy: Vec<f64>,
    /// `A_B`.
    pub final_accuracy: f64,
    /// `Ā`.
    pub average: f64,
}

impl Metrics {
    pub fn from_stages(per_stage_accuracy: Vec<f64>) -> Result<Self> {
        let final_accuracy = *per_stage_accuracy
            .last()
            .ok_or_else(|| QkdError::State("no stages evaluated".into()))?;
        let average = per_stage_accuracy.iter().sum::<f64>() / per_stage_accuracy.len() as f64;
        Ok(Self {
            per_stage_accuracy,
            final_accuracy,
            average,
        })
    }
}

/// Accuracy and routing statistics over an evaluation set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub accuracy: f64,
    pub mean_max_alpha: f64,
    pub mean_entropy: f64,
    pub num_samples: usize,
}

/// Outcome of training and evaluating one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub task_id: usize,
    pub eval: EvalStats,
    /// Mean loss components per epoch.
    pub epoch_losses: Vec<LossBreakdown>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub class: usize,
    pub alpha: Vec<f64>,
}

/// Hashes of everything that must stay fixed once written.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrozenChecksums {
    pub backbone: u64,
    pub adapters: Vec<u64>,
    pub heads: Vec<u64>,
    pub embeddings: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IncrementalModel {
    pub backbone: Backbone,
    pub adapters: Vec<AdapterStack>,
    pub heads: Vec<TaskHead>,
    pub embeddings: Vec<TaskEmbedding>,
    pub gate: Gate,
    pub gate_input: GateInput,
    pub seen_classes: usize,
}

struct Momentum {
    adapter: AdapterGrad,
    head: HeadGrad,
    gate: Option<GateGrad>,
}

impl IncrementalModel {
    pub fn new(width: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate(width)?;
        Ok(Self {
            backbone: Backbone::build(
                cfg.backbone_mode,
                width,
                cfg.num_blocks,
                derive_seed(cfg.seed, SEED_BACKBONE, 0),
            )?,
            adapters: Vec::new(),
            heads: Vec::new(),
            embeddings: Vec::new(),
            gate: Gate::new(
                cfg.gate_kind,
                width,
                cfg.q,
                cfg.l_q,
                cfg.tau,
                derive_seed(cfg.seed, SEED_GATE, 0),
            )?,
            gate_input: cfg.gate_input,
            seen_classes: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.backbone.width()
    }

    pub fn num_tasks(&self) -> usize {
        self.adapters.len()
    }

    /// Count of every parameter training has touched.
    pub fn num_trainable_params(&self) -> usize {
        self.adapters.iter().map(AdapterStack::num_params).sum::<usize>()
            + self.heads.iter().map(TaskHead::num_params).sum::<usize>()
            + self.gate.num_params()
    }

    pub fn frozen_checksums(&self) -> FrozenChecksums {
        FrozenChecksums {
            backbone: self.backbone.checksum(),
            adapters: self.adapters.iter().map(AdapterStack::checksum).collect(),
            heads: self.heads.iter().map(TaskHead::checksum).collect(),
            embeddings: self.embeddings.iter().map(TaskEmbedding::checksum).collect(),
        }
    }

    /// Normalized gate input for `x`, built from the finished adapters that
    /// are available.
    pub fn gate_features(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let n = self.gate_input.adapters_used().min(self.adapters.len());
        let used: Vec<&AdapterStack> = self.adapters[..n].iter().collect();
        let h = self.backbone.forward_multi(x, &used)?;
        let norm = h.dot(&h).sqrt();
        Ok(if norm > 0.0 { h / norm } else { h })
    }

    /// `f(x; A_i)` for every finished adapter.
    pub fn adapter_features(&self, x: ArrayView1<f64>) -> Result<Vec<Array1<f64>>> {
        self.adapters
            .iter()
            .map(|a| self.backbone.forward(x, Some(a)))
            .collect()
    }

    /// Task-agnostic prediction over all seen classes.
    pub fn predict(&self, x: ArrayView1<f64>) -> Result<Prediction> {
        if self.adapters.is_empty() {
            return Err(QkdError::State("inference before any task was trained".into()));
        }
        let h = self.gate_features(x)?;
        let rel = self.gate.relevance(h.view(), &self.embeddings)?;
        let mut fused = Array1::<f64>::zeros(self.width());
        for (f, a) in self.adapter_features(x)?.iter().zip(&rel.alpha) {
            fused.scaled_add(*a, f);
        }
        let logits: Vec<f64> = self
            .heads
            .iter()
            .flat_map(|head| head.forward(fused.view()).to_vec())
            .collect();
        Ok(Prediction {
            class: argmax(&logits),
            alpha: rel.alpha,
        })
    }

    pub fn infer(&self, x: ArrayView1<f64>) -> Result<usize> {
        self.predict(x).map(|p| p.class)
    }

    /// Accuracy over the union of `sets`, in the given order.
    pub fn evaluate(&self, sets: &[&[LabeledSample]]) -> Result<EvalStats> {
        let total: usize = sets.iter().map(|s| s.len()).sum();
        if total == 0 {
            return Err(QkdError::Argument("evaluation over an empty set".into()));
        }
        let (mut correct, mut max_alpha, mut entropy) = (0usize, 0.0, 0.0);
        for sample in sets.iter().flat_map(|s| s.iter()) {
            let p = self.predict(sample.features.view())?;
            correct += usize::from(p.class == sample.label);
            max_alpha += p.alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            entropy -= p.alpha.iter().filter(|a| **a > 0.0).map(|a| a * a.ln()).sum::<f64>();
        }
        let n = total as f64;
        Ok(EvalStats {
            accuracy: correct as f64 / n,
            mean_max_alpha: max_alpha / n,
            mean_entropy: entropy / n,
            num_samples: total,
        })
    }

    /// Trains a fresh adapter and head on `data`, then freezes them and
    /// registers the task. Returns the per-epoch mean losses.
    pub fn train_task(&mut self, data: &TaskData, cfg: &TrainConfig) -> Result<Vec<LossBreakdown>> {
        cfg.validate(self.width())?;
        if data.train.is_empty() {
            return Err(QkdError::Argument(format!(
                "task {} has no training samples",
                data.task_id
            )));
        }
        if data.class_offset != self.seen_classes || data.num_classes == 0 {
            return Err(QkdError::Data(format!(
                "task {} starts at class {} but {} classes are already seen",
                data.task_id, data.class_offset, self.seen_classes
            )));
        }
        if let Some(bad) = data
            .train
            .iter()
            .find(|s| !data.class_range().contains(&s.label) || s.features.len() != self.width())
        {
            return Err(QkdError::Data(format!(
                "sample with label {} and dimension {} does not fit task {} (classes {:?}, width {})",
                bad.label,
                bad.features.len(),
                data.task_id,
                data.class_range(),
                self.width()
            )));
        }

        let task_id = self.adapters.len();
        let mut adapter = init_adapter(
            self.width(),
            cfg.r_adapter,
            cfg.num_blocks,
            task_id,
            derive_seed(cfg.seed, SEED_ADAPTER, task_id as u64),
        )?;
        let mut head = TaskHead::zeros(data.num_classes, self.width(), data.class_offset)?;

        // Gate inputs and teacher features depend only on frozen weights.
        let with_pool = !self.embeddings.is_empty();
        let mut gate_inputs = Vec::new();
        let mut teachers = Vec::new();
        if with_pool {
            for s in &data.train {
                gate_inputs.push(self.gate_features(s.features.view())?);
                teachers.push(self.adapter_features(s.features.view())?);
            }
        }

        let objective = cfg.objective();
        let n = data.train.len();
        let batches_per_epoch = n.div_ceil(cfg.batch_size);
        let total_steps = cfg.epochs * batches_per_epoch;
        let mut momentum = Momentum {
            adapter: AdapterGrad::zeros_like(&adapter),
            head: HeadGrad::zeros_like(&head),
            gate: self.gate.zero_grad(),
        };
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut step = 0;

        for epoch in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                SEED_SHUFFLE,
                ((task_id as u64) << 32) | epoch as u64,
            ));
            order.sort_unstable();
            order.shuffle(&mut rng);
            let mut sums = [0.0; 4];

            for batch in order.chunks(cfg.batch_size) {
                let mut g_adapter = AdapterGrad::zeros_like(&adapter);
                let mut g_head = HeadGrad::zeros_like(&head);
                let mut g_gate = self.gate.zero_grad();
                for &i in batch {
                    let sample = &data.train[i];
                    let slice = StudentSlice {
                        backbone: &self.backbone,
                        adapter: &adapter,
                        head: &head,
                        gate: &self.gate,
                        pool: &self.embeddings,
                    };
                    let inputs = SampleInputs {
                        x: sample.features.view(),
                        label: sample.label - data.class_offset,
                        gate_input: gate_inputs.get(i).map(|h| h.view()),
                        teacher_features: teachers.get(i).map_or(&[], Vec::as_slice),
                    };
                    let g = loss_gradients(&slice, &inputs, &objective)?;
                    g_adapter.accumulate(&g.adapter, 1.0);
                    g_head.accumulate(&g.head, 1.0);
                    if let (Some(acc), Some(gg)) = (g_gate.as_mut(), g.gate.as_ref()) {
                        acc.accumulate(gg, 1.0);
                    }
                    for (s, v) in sums
                        .iter_mut()
                        .zip([g.loss.ce, g.loss.qkd, g.loss.sparsity, g.loss.total])
                    {
                        *s += v;
                    }
                }
                let inv = 1.0 / batch.len() as f64;
                let lr = cosine_lr(step, total_steps, cfg.base_lr)?;
                momentum.adapter.scale(cfg.momentum);
                momentum.adapter.accumulate(&g_adapter, inv);
                adapter.apply_update(&momentum.adapter, -lr);
                momentum.head.scale(cfg.momentum);
                momentum.head.accumulate(&g_head, inv);
                head.weight.scaled_add(-lr, &momentum.head.weight);
                head.bias.scaled_add(-lr, &momentum.head.bias);
                if with_pool {
                    if let (Some(v), Some(g)) = (momentum.gate.as_mut(), g_gate.as_ref()) {
                        v.scale(cfg.momentum);
                        v.accumulate(g, inv);
                        self.gate.apply_update(v, -lr);
                    }
                }
                step += 1;
            }
            let inv = 1.0 / n as f64;
            epoch_losses.push(LossBreakdown {
                ce: sums[0] * inv,
                qkd: sums[1] * inv,
                sparsity: sums[2] * inv,
                total: sums[3] * inv,
                lambda_kd: cfg.lambda_kd,
                lambda_s: cfg.lambda_s,
            });
        }

        adapter.frozen = true;
        let embedding = build_task_embedding(&adapter, cfg.r_svd, &self.gate.params, cfg.task_state_mode)?;
        self.adapters.push(adapter);
        self.heads.push(head);
        self.embeddings.push(embedding);
        self.gate.register_task(self.embeddings.len());
        self.seen_classes += data.num_classes;
        Ok(epoch_losses)
    }
}

/// Result of a full protocol run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub metrics: Metrics,
    pub stages: Vec<StageReport>,
    pub model: IncrementalModel,
}

fn check_stream(stream: &[TaskData]) -> Result<usize> {
    let width = stream
        .iter()
        .flat_map(|t| t.train.iter().chain(&t.test))
        .map(|s| s.features.len())
        .next()
        .ok_or_else(|| QkdError::Argument("empty stream".into()))?;
    for (i, a) in stream.iter().enumerate() {
        for b in &stream[i + 1..] {
            if a.class_range().start < b.class_range().end && b.class_range().start < a.class_range().end {
                return Err(QkdError::Data(format!(
                    "tasks {} and {} share labels ({:?} vs {:?})",
                    a.task_id,
                    b.task_id,
                    a.class_range(),
                    b.class_range()
                )));
            }
        }
        if let Some(s) = a
            .train
            .iter()
            .chain(&a.test)
            .find(|s| !a.class_range().contains(&s.label))
        {
            return Err(QkdError::Data(format!(
                "label {} outside task {}'s classes {:?}",
                s.label,
                a.task_id,
                a.class_range()
            )));
        }
    }
    Ok(width)
}

/// Trains every stage in order and evaluates on all seen test data after each.
pub fn run_protocol(stream: &[TaskData], cfg: &TrainConfig) -> Result<RunOutcome> {
    let width = check_stream(stream)?;
    let mut model = IncrementalModel::new(width, cfg)?;
    let mut stages = Vec::with_capacity(stream.len());
    for (b, task) in stream.iter().enumerate() {
        let epoch_losses = model.train_task(task, cfg)?;
        let seen: Vec<&[LabeledSample]> = stream[..=b].iter().map(|t| t.test.as_slice()).collect();
        let eval = model.evaluate(&seen)?;
        log::info!(
            "stage {b}: accuracy {:.4}, mean max alpha {:.3}",
            eval.accuracy,
            eval.mean_max_alpha
        );
        stages.push(StageReport {
            task_id: task.task_id,
            eval,
            epoch_losses,
        });
    }
    let metrics = Metrics::from_stages(stages.iter().map(|s| s.eval.accuracy).collect())?;
    Ok(RunOutcome { metrics, stages, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_stream, StreamSpec};
    use crate::network::AdapterBlock;
    use ndarray::{array, Array2};

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            q: 2,
            r_adapter: 2,
            r_svd: 4,
            ..TrainConfig::default()
        }
    }

    fn small_stream(tasks: usize) -> Vec<TaskData> {
        gen_stream(&StreamSpec {
            num_tasks: tasks,
            train_per_class: 20,
            test_per_class: 20,
            input_dim: 8,
            subspace_dim: 2,
            ..StreamSpec::default()
        })
        .unwrap()
        .tasks
    }

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_lr(0, 100, 0.05).unwrap(), 0.05);
        assert!(cosine_lr(100, 100, 0.05).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.05).unwrap() - 0.025).abs() < 1e-15);
        assert!(matches!(cosine_lr(0, 0, 0.05), Err(QkdError::Config(_))));
    }

    #[test]
    fn metrics_average() {
        let m = Metrics::from_stages(vec![1.0, 0.5, 0.75]).unwrap();
        assert_eq!(m.final_accuracy, 0.75);
        assert!((m.average - 0.75).abs() < 1e-12);
        assert!(Metrics::from_stages(vec![]).is_err());
    }

    #[test]
    fn seeds_are_distinct_per_stream() {
        assert_ne!(derive_seed(0, SEED_ADAPTER, 0), derive_seed(0, SEED_ADAPTER, 1));
        assert_ne!(derive_seed(0, SEED_ADAPTER, 0), derive_seed(0, SEED_SHUFFLE, 0));
        assert_eq!(derive_seed(7, 3, 9), derive_seed(7, 3, 9));
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(32).is_ok());
        assert!(TrainConfig {
            r_svd: 40,
            ..cfg.clone()
        }
        .validate(32)
        .is_err());
        assert!(TrainConfig {
            r_adapter: 32,
            ..cfg.clone()
        }
        .validate(32)
        .is_err());
        assert!(TrainConfig { tau: 0.0, ..cfg }.validate(32).is_err());
    }

    #[test]
    fn untrained_model_refuses_inference() {
        let model = IncrementalModel::new(8, &quick()).unwrap();
        assert!(matches!(model.infer(Array1::zeros(8).view()), Err(QkdError::State(_))));
    }

    #[test]
    fn train_task_rejects_bad_data() {
        let stream = small_stream(2);
        let mut model = IncrementalModel::new(8, &quick()).unwrap();
        let empty = TaskData {
            train: vec![],
            ..stream[0].clone()
        };
        assert!(matches!(model.train_task(&empty, &quick()), Err(QkdError::Argument(_))));
        assert!(matches!(model.train_task(&stream[1], &quick()), Err(QkdError::Data(_))));
        let mut bad = stream[0].clone();
        bad.train[0].label = 5;
        assert!(matches!(model.train_task(&bad, &quick()), Err(QkdError::Data(_))));
    }

    #[test]
    fn bookkeeping_grows_per_stage() {
        let stream = small_stream(3);
        let mut model = IncrementalModel::new(8, &quick()).unwrap();
        for (i, task) in stream.iter().enumerate() {
            model.train_task(task, &quick()).unwrap();
            assert_eq!(model.adapters.len(), i + 1);
            assert_eq!(model.heads.len(), i + 1);
            assert_eq!(model.embeddings.len(), i + 1);
            assert_eq!(model.seen_classes, 2 * (i + 1));
            assert!(model.adapters.iter().all(|a| a.frozen));
        }
    }

    #[test]
    fn first_task_has_no_distillation() {
        let stream = small_stream(1);
        let mut model = IncrementalModel::new(8, &quick()).unwrap();
        let losses = model.train_task(&stream[0], &quick()).unwrap();
        assert!(losses
            .iter()
            .all(|l| l.qkd == 0.0 && l.sparsity == 0.0 && l.total == l.ce));
    }

    #[test]
    fn overlapping_labels_rejected() {
        let mut stream = small_stream(2);
        stream[1].class_offset = 1;
        assert!(matches!(run_protocol(&stream, &quick()), Err(QkdError::Data(_))));
    }

    #[test]
    fn single_task_prediction_uses_its_adapter() {
        let stream = small_stream(1);
        let out = run_protocol(&stream, &quick()).unwrap();
        assert_eq!(out.metrics.average, out.metrics.final_accuracy);
        let model = &out.model;
        for s in &stream[0].test {
            let f = model
                .backbone
                .forward(s.features.view(), Some(&model.adapters[0]))
                .unwrap();
            let logits = model.heads[0].forward(f.view());
            let p = model.predict(s.features.view()).unwrap();
            assert_eq!(p.alpha, vec![1.0]);
            assert_eq!(p.class, argmax(logits.as_slice().unwrap()));
        }
    }

    fn hand_model() -> IncrementalModel {
        let cfg = TrainConfig {
            gate_kind: GateKind::Cosine,
            gate_input: GateInput::RawBackbone,
            backbone_mode: BackboneMode::Identity,
            num_blocks: 1,
            r_adapter: 1,
            r_svd: 1,
            q: 1,
            l_q: 1,
            ..TrainConfig::default()
        };
        let mut model = IncrementalModel::new(2, &cfg).unwrap();
        let adapters = [
            AdapterBlock {
                down: array![[1.0], [0.0]],
                up: array![[1.0, 0.0]],
            },
            AdapterBlock {
                down: array![[0.0], [1.0]],
                up: array![[0.0, 1.0]],
            },
        ];
        for (i, block) in adapters.into_iter().enumerate() {
            let stack = AdapterStack {
                task_id: i,
                blocks: vec![block],
                frozen: true,
            };
            let e = build_task_embedding(&stack, 1, &model.gate.params, TaskStateMode::AngleEnc).unwrap();
            model.adapters.push(stack);
            model.embeddings.push(e);
            model.heads.push(TaskHead {
                weight: Array2::eye(2),
                bias: Array1::zeros(2),
                class_offset: 2 * i,
            });
        }
        model.seen_classes = 4;
        model
    }

    #[test]
    fn fused_feature_is_alpha_average() {
        let model = hand_model();
        // x on the diagonal is equally similar to both task vectors.
        let x = array![1.0, 1.0];
        let p = model.predict(x.view()).unwrap();
        assert!((p.alpha[0] - 0.5).abs() < 1e-15);
        // f_0 = [2, 1], f_1 = [1, 2], average [1.5, 1.5]; logits [1.5, 1.5, 1.5, 1.5].
        let f = model.adapter_features(x.view()).unwrap();
        assert_eq!(f[0], array![2.0, 1.0]);
        assert_eq!(f[1], array![1.0, 2.0]);
        assert_eq!(p.class, 0);
    }

    #[test]
    fn evaluation_counts() {
        let model = hand_model();
        let s = |f: [f64; 2], label| LabeledSample {
            features: array![f[0], f[1]],
            label,
            task_id: 0,
        };
        // Strongly first-axis input routes to adapter 0 and predicts class 0.
        let set = vec![s([1.0, 0.0], 0), s([1.0, 0.0], 1)];
        let stats = model.evaluate(&[&set]).unwrap();
        assert_eq!(stats.accuracy, 0.5);
        assert!(model.evaluate(&[&[]]).is_err());
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let stream = small_stream(2);
        let a = run_protocol(&stream, &quick()).unwrap();
        let b = run_protocol(&stream, &quick()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
    }
}
