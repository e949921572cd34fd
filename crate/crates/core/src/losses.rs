//! Classification, relevance-weighted distillation and the joint objective,
//! with the analytic per-sample reverse pass.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1, Axis};

use crate::error::{QkdError, Result};
use crate::gating::{sparsity_value, Gate, GateGrad, RelevanceUpstream, RelevanceVector, SparsityTarget};
use crate::network::{AdapterGrad, AdapterStack, Backbone, HeadGrad, TaskHead};
use crate::taskembed::TaskEmbedding;

const NORMALIZATION_TOL: f64 = 1e-9;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(QkdError::Argument(format!(
            "{name} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// `Σ t_i ln(t_i / s_i)` with `0·ln(0/·) = 0`.
pub fn kl_divergence(teacher: &[f64], student: &[f64]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(QkdError::Argument(format!(
            "KL between lengths {} and {}",
            teacher.len(),
            student.len()
        )));
    }
    check_distribution("teacher", teacher)?;
    check_distribution("student", student)?;
    let mut kl = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        if *t > 0.0 {
            if *s <= 0.0 {
                return Err(QkdError::Argument(
                    "student assigns zero mass where teacher does not".into(),
                ));
            }
            kl += t * (t / s).ln();
        }
    }
    Ok(kl)
}

/// KL(softmax(teacher) ‖ softmax(student)) evaluated in log space.
pub fn kl_from_logits(teacher_logits: &[f64], student_logits: &[f64]) -> f64 {
    let lt = log_softmax(teacher_logits);
    let ls = log_softmax(student_logits);
    lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// `Σ_i α_i · KL(σ(z_i) ‖ σ(z_new))`.
pub fn tikd_loss<T: AsRef<[f64]>>(alpha: &[f64], teacher_logits: &[T], student_logits: &[f64]) -> Result<f64> {
    if alpha.len() != teacher_logits.len() {
        return Err(QkdError::Argument(format!(
            "{} weights for {} teachers",
            alpha.len(),
            teacher_logits.len()
        )));
    }
    if let Some(t) = teacher_logits.iter().find(|t| t.as_ref().len() != student_logits.len()) {
        return Err(QkdError::Argument(format!(
            "teacher logits of length {} vs student {}",
            t.as_ref().len(),
            student_logits.len()
        )));
    }
    Ok(alpha
        .iter()
        .zip(teacher_logits)
        .map(|(a, t)| a * kl_from_logits(t.as_ref(), student_logits))
        .sum())
}

/// `−ln softmax(z)[label]`, stabilized by the maximum logit.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(QkdError::Argument(format!(
            "label {label} for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label)
        .map(|(_, z)| (z - max).exp())
        .sum();
    let own = logits[label] - max;
    Ok(if own == 0.0 {
        rest.ln_1p()
    } else {
        -own + (own.exp() + rest).ln()
    })
}

/// Components of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub qkd: f64,
    pub sparsity: f64,
    pub total: f64,
    pub lambda_kd: f64,
    pub lambda_s: f64,
}

/// `ce + λ_kd·qkd + λ_s·sparsity`.
pub fn total_loss(ce: f64, qkd: f64, sparsity: f64, lambda_kd: f64, lambda_s: f64) -> Result<LossBreakdown> {
    if lambda_kd < 0.0 || lambda_s < 0.0 || !lambda_kd.is_finite() || !lambda_s.is_finite() {
        return Err(QkdError::Config(format!(
            "loss weights must be non-negative (lambda_kd={lambda_kd}, lambda_s={lambda_s})"
        )));
    }
    if !(ce.is_finite() && qkd.is_finite() && sparsity.is_finite()) {
        return Err(QkdError::Argument("non-finite loss component".into()));
    }
    Ok(LossBreakdown {
        ce,
        qkd,
        sparsity,
        total: ce + lambda_kd * qkd + lambda_s * sparsity,
        lambda_kd,
        lambda_s,
    })
}

/// Space in which the new adapter is matched to the old ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillSpace {
    /// KL between current-head softmaxes of old and new features.
    LogitKl,
    /// `‖f_i − f_new‖² / d`.
    FeatureMse,
}

impl FromStr for DistillSpace {
    type Err = QkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit_kl" => Ok(Self::LogitKl),
            "feature_mse" => Ok(Self::FeatureMse),
            other => Err(QkdError::Config(format!(
                "unknown distill_space {other:?} (expected logit_kl or feature_mse)"
            ))),
        }
    }
}

impl fmt::Display for DistillSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LogitKl => "logit_kl",
            Self::FeatureMse => "feature_mse",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda_kd: f64,
    pub lambda_s: f64,
    pub distill_space: DistillSpace,
    pub sparsity_target: SparsityTarget,
}

/// Parameters touched by one training step: the current adapter and head are
/// trainable, everything else is read-only.
#[derive(Clone, Copy)]
pub struct StudentSlice<'a> {
    pub backbone: &'a Backbone,
    pub adapter: &'a AdapterStack,
    pub head: &'a TaskHead,
    pub gate: &'a Gate,
    /// Embeddings of the finished tasks acting as teachers.
    pub pool: &'a [TaskEmbedding],
}

/// One training sample with its frozen, precomputed quantities.
#[derive(Clone, Copy)]
pub struct SampleInputs<'a> {
    pub x: ArrayView1<'a, f64>,
    /// Class index local to the current head.
    pub label: usize,
    /// Normalized gate input `h̃`; needed whenever the pool is non-empty.
    pub gate_input: Option<ArrayView1<'a, f64>>,
    /// `f(x; A_i)` for every pool entry.
    pub teacher_features: &'a [Array1<f64>],
}

#[derive(Clone, Debug)]
pub struct SampleGradients {
    pub adapter: AdapterGrad,
    pub head: HeadGrad,
    /// `None` when the gate has no parameters or receives no signal.
    pub gate: Option<GateGrad>,
    pub loss: LossBreakdown,
    pub relevance: Option<RelevanceVector>,
}

struct DistillTerms {
    relevance: RelevanceVector,
    /// Per-teacher divergence.
    divergences: Vec<f64>,
    qkd: f64,
    sparsity: f64,
    /// `dQKD/d(student logits)` or `dQKD/d(student feature)`.
    grad_student: Array1<f64>,
}

fn check_inputs(slice: &StudentSlice<'_>, inputs: &SampleInputs<'_>) -> Result<()> {
    if inputs.teacher_features.len() != slice.pool.len() {
        return Err(QkdError::Argument(format!(
            "{} teacher features for a pool of {}",
            inputs.teacher_features.len(),
            slice.pool.len()
        )));
    }
    if !slice.pool.is_empty() && inputs.gate_input.is_none() {
        return Err(QkdError::Argument("gate input missing for a non-empty pool".into()));
    }
    if inputs.label >= slice.head.num_classes() {
        return Err(QkdError::Data(format!(
            "label {} outside the current head's {} classes",
            inputs.label,
            slice.head.num_classes()
        )));
    }
    Ok(())
}

fn distill_terms(
    slice: &StudentSlice<'_>,
    inputs: &SampleInputs<'_>,
    cfg: &ObjectiveConfig,
    feature: &Array1<f64>,
    logits: &Array1<f64>,
) -> Result<Option<DistillTerms>> {
    if slice.pool.is_empty() {
        return Ok(None);
    }
    let h = inputs.gate_input.expect("checked");
    let relevance = slice.gate.relevance(h, slice.pool)?;
    let (divergences, grad_student) = match cfg.distill_space {
        DistillSpace::LogitKl => {
            let student = logits.as_slice().expect("contiguous");
            let s_prob = Array1::from(softmax(student));
            let mut grad = Array1::zeros(logits.len());
            let mut divs = Vec::with_capacity(slice.pool.len());
            for (f_i, a) in inputs.teacher_features.iter().zip(&relevance.alpha) {
                let teacher = slice.head.forward(f_i.view());
                let t = teacher.as_slice().expect("contiguous");
                divs.push(kl_from_logits(t, student));
                // d KL(t‖s) / d z_s = σ(z_s) − σ(z_t)
                grad.scaled_add(*a, &(&s_prob - &Array1::from(softmax(t))));
            }
            (divs, grad)
        }
        DistillSpace::FeatureMse => {
            let d = feature.len() as f64;
            let mut grad = Array1::zeros(feature.len());
            let mut divs = Vec::with_capacity(slice.pool.len());
            for (f_i, a) in inputs.teacher_features.iter().zip(&relevance.alpha) {
                let diff = feature - f_i;
                divs.push(diff.dot(&diff) / d);
                grad.scaled_add(2.0 * a / d, &diff);
            }
            (divs, grad)
        }
    };
    let qkd = relevance.alpha.iter().zip(&divergences).map(|(a, k)| a * k).sum();
    let sparsity = sparsity_value(&relevance, cfg.sparsity_target);
    Ok(Some(DistillTerms {
        relevance,
        divergences,
        qkd,
        sparsity,
        grad_student,
    }))
}

/// Loss of one sample without gradients.
pub fn sample_loss(
    slice: &StudentSlice<'_>,
    inputs: &SampleInputs<'_>,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    check_inputs(slice, inputs)?;
    let feature = slice.backbone.forward(inputs.x, Some(slice.adapter))?;
    let logits = slice.head.forward(feature.view());
    let ce = cross_entropy(logits.as_slice().expect("contiguous"), inputs.label)?;
    let terms = distill_terms(slice, inputs, cfg, &feature, &logits)?;
    let (qkd, sparsity) = terms.map_or((0.0, 0.0), |t| (t.qkd, t.sparsity));
    total_loss(ce, qkd, sparsity, cfg.lambda_kd, cfg.lambda_s)
}

/// Loss of one sample and its gradient with respect to the current adapter,
/// the current head and the gate. Teacher paths are constants.
pub fn loss_gradients(
    slice: &StudentSlice<'_>,
    inputs: &SampleInputs<'_>,
    cfg: &ObjectiveConfig,
) -> Result<SampleGradients> {
    check_inputs(slice, inputs)?;
    let cache = slice.backbone.forward_cached(inputs.x, slice.adapter)?;
    let feature = &cache.output;
    let logits = slice.head.forward(feature.view());
    let z = logits.as_slice().expect("contiguous");
    let ce = cross_entropy(z, inputs.label)?;

    let mut d_logits = Array1::from(softmax(z));
    d_logits[inputs.label] -= 1.0;
    let mut d_feature_extra: Option<Array1<f64>> = None;

    let terms = distill_terms(slice, inputs, cfg, feature, &logits)?;
    let mut gate_grad = None;
    let mut relevance = None;
    let (qkd, sparsity) = match terms {
        None => (0.0, 0.0),
        Some(t) => {
            if cfg.lambda_kd != 0.0 {
                match cfg.distill_space {
                    DistillSpace::LogitKl => d_logits.scaled_add(cfg.lambda_kd, &t.grad_student),
                    DistillSpace::FeatureMse => d_feature_extra = Some(&t.grad_student * cfg.lambda_kd),
                }
            }
            if slice.gate.is_trainable() && (cfg.lambda_kd != 0.0 || cfg.lambda_s != 0.0) {
                let mut upstream = RelevanceUpstream::zeros(slice.pool.len());
                for (g, k) in upstream.d_alpha.iter_mut().zip(&t.divergences) {
                    *g = cfg.lambda_kd * k;
                }
                upstream.add_sparsity(&t.relevance, cfg.sparsity_target, cfg.lambda_s);
                let h = inputs.gate_input.expect("checked");
                gate_grad = slice.gate.gradients(h, slice.pool, &upstream)?;
            }
            relevance = Some(t.relevance);
            (t.qkd, t.sparsity)
        }
    };

    let head = HeadGrad {
        weight: d_logits
            .view()
            .insert_axis(Axis(1))
            .dot(&feature.view().insert_axis(Axis(0))),
        bias: d_logits.clone(),
    };
    let mut d_feature = slice.head.weight.t().dot(&d_logits);
    if let Some(extra) = d_feature_extra {
        d_feature += &extra;
    }
    let adapter = slice.backbone.backward(&cache, slice.adapter, d_feature.view());
    Ok(SampleGradients {
        adapter,
        head,
        gate: gate_grad,
        loss: total_loss(ce, qkd, sparsity, cfg.lambda_kd, cfg.lambda_s)?,
        relevance,
    })
}
