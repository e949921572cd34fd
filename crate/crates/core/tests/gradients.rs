mod common;

use common::*;
use ndarray::{Array1, Axis};
use proptest::prelude::*;
use qkd_core::gating::{
    compute_relevance, gate_gradients, Gate, GateGrad, GateKind, GateParams, RelevanceUpstream, SparsityTarget,
};
use qkd_core::losses::{
    kl_divergence, loss_gradients, sample_loss, softmax, tikd_loss, DistillSpace, ObjectiveConfig, SampleInputs,
    StudentSlice,
};
use qkd_core::network::{init_adapter, AdapterStack, Backbone, TaskHead};
use qkd_core::taskembed::{build_task_embedding, TaskEmbedding, TaskStateMode};
use rand_chacha::ChaCha8Rng;

#[derive(Clone)]
struct Setup {
    backbone: Backbone,
    adapter: AdapterStack,
    head: TaskHead,
    teacher_head: TaskHead,
    gate: Gate,
    pool: Vec<TaskEmbedding>,
    old: Vec<AdapterStack>,
    x: Array1<f64>,
    label: usize,
}

fn randomize_adapter(r: &mut ChaCha8Rng, a: &mut AdapterStack, scale: f64) {
    for b in &mut a.blocks {
        b.down.mapv_inplace(|_| scale * gaussian(r));
        b.up.mapv_inplace(|_| scale * gaussian(r));
    }
}

fn setup(seed: u64, kind: GateKind, pool_len: usize) -> Setup {
    let (d, rank, q, l, blocks, classes) = (8, 2, 2, 2, 2, 3);
    let mut r = rng(seed);
    let backbone = Backbone::random(d, blocks, seed).unwrap();
    let mut gate = Gate::new(kind, d, q, l, 0.7, seed ^ 5).unwrap();
    gate.params.circuit = random_params(&mut r, l, q);
    let mut old = Vec::new();
    let mut pool = Vec::new();
    for t in 0..pool_len {
        let mut a = init_adapter(d, rank, blocks, t, seed + 100 + t as u64).unwrap();
        randomize_adapter(&mut r, &mut a, 0.5);
        a.frozen = true;
        pool.push(build_task_embedding(&a, 3, &gate.params, TaskStateMode::AngleEnc).unwrap());
        old.push(a);
    }
    gate.register_task(pool_len);
    if let Some(m) = gate.mlp.as_mut() {
        m.w2.mapv_inplace(|_| 0.3 * gaussian(&mut r));
        m.b2.mapv_inplace(|_| 0.3 * gaussian(&mut r));
    }
    let mut adapter = init_adapter(d, rank, blocks, pool_len, seed + 7).unwrap();
    randomize_adapter(&mut r, &mut adapter, 0.4);
    let mut head = TaskHead::zeros(classes, d, 0).unwrap();
    head.weight.mapv_inplace(|_| 0.5 * gaussian(&mut r));
    head.bias.mapv_inplace(|_| 0.1 * gaussian(&mut r));
    let x = Array1::from_shape_simple_fn(d, || gaussian(&mut r));
    Setup {
        backbone,
        adapter,
        teacher_head: head.clone(),
        head,
        gate,
        pool,
        old,
        x,
        label: (seed % classes as u64) as usize,
    }
}

fn gate_input(s: &Setup) -> Array1<f64> {
    let h = s.backbone.forward(s.x.view(), s.old.first()).unwrap();
    let n = h.dot(&h).sqrt();
    h / n
}

fn teachers(s: &Setup) -> Vec<Array1<f64>> {
    s.old
        .iter()
        .map(|a| s.backbone.forward(s.x.view(), Some(a)).unwrap())
        .collect()
}

/// Independent evaluation of the objective. Teacher logits come from the
/// snapshot `teacher_head`, so perturbing the live head leaves them fixed.
fn loss(s: &Setup, cfg: &ObjectiveConfig) -> f64 {
    let feature = s.backbone.forward(s.x.view(), Some(&s.adapter)).unwrap();
    let z = s.head.forward(feature.view()).to_vec();
    let p = softmax(&z);
    let ce = -p[s.label].ln();
    if s.pool.is_empty() {
        return ce;
    }
    let rel = s.gate.relevance(gate_input(s).view(), &s.pool).unwrap();
    let mut qkd = 0.0;
    for (f, a) in teachers(s).iter().zip(&rel.alpha) {
        let div = match cfg.distill_space {
            DistillSpace::LogitKl => {
                let t = softmax(&s.teacher_head.forward(f.view()).to_vec());
                t.iter().zip(&p).map(|(ti, si)| ti * (ti / si).ln()).sum::<f64>()
            }
            DistillSpace::FeatureMse => (&feature - f).mapv(|v| v * v).sum() / feature.len() as f64,
        };
        qkd += a * div;
    }
    let sparsity = match cfg.sparsity_target {
        SparsityTarget::P => rel.p.iter().sum::<f64>(),
        SparsityTarget::EntropyAlpha => -rel.alpha.iter().filter(|a| **a > 0.0).map(|a| a * a.ln()).sum::<f64>(),
    };
    ce + cfg.lambda_kd * qkd + cfg.lambda_s * sparsity
}

fn library_loss(s: &Setup, cfg: &ObjectiveConfig) -> f64 {
    let h = gate_input(s);
    let t = teachers(s);
    let slice = StudentSlice {
        backbone: &s.backbone,
        adapter: &s.adapter,
        head: &s.head,
        gate: &s.gate,
        pool: &s.pool,
    };
    let inputs = SampleInputs {
        x: s.x.view(),
        label: s.label,
        gate_input: (!s.pool.is_empty()).then(|| h.view()),
        teacher_features: &t,
    };
    sample_loss(&slice, &inputs, cfg).unwrap().total
}

/// Every trainable scalar, in the order the gradients are flattened.
fn params_mut(s: &mut Setup) -> Vec<&mut f64> {
    let mut out: Vec<&mut f64> = Vec::new();
    for b in &mut s.adapter.blocks {
        out.extend(b.down.iter_mut());
        out.extend(b.up.iter_mut());
    }
    out.extend(s.head.weight.iter_mut());
    out.extend(s.head.bias.iter_mut());
    match s.gate.kind {
        GateKind::Quantum => {
            out.extend(s.gate.params.projection.iter_mut());
        }
        GateKind::Mlp => {
            let m = s.gate.mlp.as_mut().unwrap();
            out.extend(m.w1.iter_mut());
            out.extend(m.b1.iter_mut());
            out.extend(m.w2.iter_mut());
            out.extend(m.b2.iter_mut());
        }
        _ => {}
    }
    out
}

fn numeric_gradient(s: &Setup, cfg: &ObjectiveConfig, h: f64) -> Vec<f64> {
    let n = params_mut(&mut s.clone()).len();
    let mut grad: Vec<f64> = (0..n)
        .map(|i| {
            let mut plus = s.clone();
            *params_mut(&mut plus).swap_remove(i) += h;
            let mut minus = s.clone();
            *params_mut(&mut minus).swap_remove(i) -= h;
            (loss(&plus, cfg) - loss(&minus, cfg)) / (2.0 * h)
        })
        .collect();
    if s.gate.kind == GateKind::Quantum {
        let (l, q) = (s.gate.params.circuit.num_layers(), s.gate.params.circuit.num_qubits());
        for k in 0..l * q {
            let shift = |delta: f64| {
                let mut t = s.clone();
                let v = t.gate.params.circuit.theta(k / q, k % q);
                t.gate.params.circuit.set(k / q, k % q, v + delta);
                loss(&t, cfg)
            };
            grad.push((shift(h) - shift(-h)) / (2.0 * h));
        }
    }
    grad
}

fn analytic_gradient(s: &Setup, cfg: &ObjectiveConfig) -> Vec<f64> {
    let h = gate_input(s);
    let t = teachers(s);
    let slice = StudentSlice {
        backbone: &s.backbone,
        adapter: &s.adapter,
        head: &s.head,
        gate: &s.gate,
        pool: &s.pool,
    };
    let inputs = SampleInputs {
        x: s.x.view(),
        label: s.label,
        gate_input: (!s.pool.is_empty()).then(|| h.view()),
        teacher_features: &t,
    };
    let g = loss_gradients(&slice, &inputs, cfg).unwrap();
    let mut out = Vec::new();
    for b in &g.adapter.blocks {
        out.extend(b.down.iter());
        out.extend(b.up.iter());
    }
    out.extend(g.head.weight.iter());
    out.extend(g.head.bias.iter());
    if let Some(gg) = &g.gate {
        out.extend(gg.flatten());
    }
    out
}

fn objective(i: usize) -> ObjectiveConfig {
    ObjectiveConfig {
        lambda_kd: [1.0, 0.5, 1.5][i % 3],
        lambda_s: [0.05, 0.2][i % 2],
        distill_space: if i % 4 == 3 {
            DistillSpace::FeatureMse
        } else {
            DistillSpace::LogitKl
        },
        sparsity_target: if i % 5 == 4 {
            SparsityTarget::EntropyAlpha
        } else {
            SparsityTarget::P
        },
    }
}

#[test]
fn library_loss_matches_oracle() {
    for i in 0..20 {
        let s = setup(
            200 + i as u64,
            if i % 3 == 2 { GateKind::Mlp } else { GateKind::Quantum },
            i % 4,
        );
        let cfg = objective(i);
        let (a, b) = (library_loss(&s, &cfg), loss(&s, &cfg));
        assert!(
            (a - b).abs() <= 1e-12 * b.abs().max(1.0),
            "configuration {i}: {a} vs {b}"
        );
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for i in 0..10 {
        let s = setup(300 + i as u64, GateKind::Quantum, 2 + i % 2);
        let cfg = objective(i);
        let a = analytic_gradient(&s, &cfg);
        let n = numeric_gradient(&s, &cfg, 1e-6);
        let err = relative_error(&a, &n, 1e-8);
        assert!(err < 1e-4, "configuration {i}: relative error {err:e}");
    }
}

#[test]
fn mlp_gate_gradients_match_finite_differences() {
    for i in 0..4 {
        let s = setup(400 + i as u64, GateKind::Mlp, 3);
        let cfg = objective(i);
        let err = relative_error(&analytic_gradient(&s, &cfg), &numeric_gradient(&s, &cfg, 1e-6), 1e-8);
        assert!(err < 1e-4, "configuration {i}: relative error {err:e}");
    }
}

#[test]
fn first_task_gradient_has_no_gate_part() {
    let s = setup(500, GateKind::Quantum, 0);
    let cfg = objective(0);
    let a = analytic_gradient(&s, &cfg);
    let n = numeric_gradient(&s, &cfg, 1e-6);
    // The numeric side still perturbs gate parameters; their effect is nil.
    let tail = n.len() - a.len();
    assert!(n[a.len()..].iter().all(|g| *g == 0.0) && tail > 0);
    assert!(relative_error(&a, &n[..a.len()], 1e-8) < 1e-4);
}

#[test]
fn head_gradient_closed_form_without_distillation() {
    let s = setup(501, GateKind::Quantum, 0);
    let cfg = ObjectiveConfig {
        lambda_kd: 0.0,
        ..objective(0)
    };
    let feature = s.backbone.forward(s.x.view(), Some(&s.adapter)).unwrap();
    let mut delta = Array1::from(softmax(s.head.forward(feature.view()).as_slice().unwrap()));
    delta[s.label] -= 1.0;
    let expected = delta
        .view()
        .insert_axis(Axis(1))
        .dot(&feature.view().insert_axis(Axis(0)));
    let a = analytic_gradient(&s, &cfg);
    let adapter_len: usize = s.adapter.num_params();
    for (x, y) in a[adapter_len..adapter_len + expected.len()].iter().zip(expected.iter()) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn teachers_influence_loss_but_receive_no_gradient() {
    let s = setup(502, GateKind::Quantum, 2);
    let cfg = objective(0);
    let mut perturbed = s.clone();
    perturbed.old[1].blocks[0].up[[0, 0]] += 0.5;
    assert_ne!(library_loss(&s, &cfg), library_loss(&perturbed, &cfg));
    // Gradients exist only for the current adapter, the current head and the gate.
    let a = analytic_gradient(&s, &cfg);
    let g = s.gate.params.projection.len() + s.gate.params.circuit.as_slice().len();
    assert_eq!(a.len(), s.adapter.num_params() + s.head.num_params() + g);
}

fn random_pool(r: &mut ChaCha8Rng, gate: &GateParams, d: usize, n: usize) -> Vec<TaskEmbedding> {
    (0..n)
        .map(|t| TaskEmbedding {
            task_id: t,
            s_tilde: random_unit(r, d),
            task_state: random_state(r, gate.num_qubits()),
        })
        .collect()
}

#[test]
fn gate_gradients_match_finite_differences() {
    let mut r = rng(600);
    let h = 1e-6;
    for i in 0..20 {
        let (d, q, l) = (6, 2 + i % 2, 1 + i % 3);
        let mut gate = GateParams::random(d, q, l, 0.5 + 0.1 * i as f64, 600 + i as u64).unwrap();
        gate.circuit = random_params(&mut r, l, q);
        let pool = random_pool(&mut r, &gate, d, 3);
        let x = random_unit(&mut r, d);
        let c: Vec<f64> = (0..3).map(|_| gaussian(&mut r)).collect();
        let lambda = 0.3;
        let scalar = |g: &GateParams| {
            let rel = compute_relevance(x.view(), &pool, g).unwrap();
            rel.alpha.iter().zip(&c).map(|(a, w)| a * w).sum::<f64>() + lambda * rel.p.iter().sum::<f64>()
        };
        let upstream = RelevanceUpstream {
            d_alpha: c.clone(),
            d_p: vec![lambda; 3],
        };
        let g = gate_gradients(x.view(), &pool, &gate, &upstream).unwrap();
        let analytic: Vec<f64> = g.projection.iter().chain(&g.theta).copied().collect();
        let mut numeric = Vec::new();
        for k in 0..gate.projection.len() {
            let mut p = gate.clone();
            let mut m = gate.clone();
            *p.projection.iter_mut().nth(k).unwrap() += h;
            *m.projection.iter_mut().nth(k).unwrap() -= h;
            numeric.push((scalar(&p) - scalar(&m)) / (2.0 * h));
        }
        for k in 0..l * q {
            let mut p = gate.clone();
            let mut m = gate.clone();
            p.circuit.set(k / q, k % q, gate.circuit.theta(k / q, k % q) + h);
            m.circuit.set(k / q, k % q, gate.circuit.theta(k / q, k % q) - h);
            numeric.push((scalar(&p) - scalar(&m)) / (2.0 * h));
        }
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-4, "configuration {i}: relative error {err:e}");
    }
}

#[test]
fn huge_temperature_silences_the_softmax_path() {
    let mut r = rng(601);
    let mut gate = GateParams::random(6, 3, 2, 1e6, 601).unwrap();
    gate.circuit = random_params(&mut r, 2, 3);
    let pool = random_pool(&mut r, &gate, 6, 3);
    let x = random_unit(&mut r, 6);
    let upstream = RelevanceUpstream {
        d_alpha: vec![1.0, -2.0, 0.5],
        d_p: vec![0.0; 3],
    };
    let g = gate_gradients(x.view(), &pool, &gate, &upstream).unwrap();
    let norm = g.projection.iter().chain(&g.theta).map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-5, "gradient norm {norm:e}");
}

#[test]
fn gate_gradient_kind_matches_gate() {
    let s = setup(602, GateKind::Mlp, 2);
    let upstream = RelevanceUpstream::zeros(2);
    let g = s.gate.gradients(gate_input(&s).view(), &s.pool, &upstream).unwrap();
    assert!(matches!(g, Some(GateGrad::Mlp(_))));
    let cosine = Gate::new(GateKind::Cosine, 8, 2, 2, 1.0, 0).unwrap();
    assert!(cosine
        .gradients(gate_input(&s).view(), &s.pool, &upstream)
        .unwrap()
        .is_none());
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

#[test]
fn kl_matches_compensated_oracle() {
    let mut r = rng(603);
    for _ in 0..200 {
        let n = 2 + (gaussian(&mut r).abs() * 10.0) as usize % 30;
        let t = softmax(&(0..n).map(|_| 2.0 * gaussian(&mut r)).collect::<Vec<_>>());
        let s = softmax(&(0..n).map(|_| 2.0 * gaussian(&mut r)).collect::<Vec<_>>());
        let oracle = compensated_sum(t.iter().zip(&s).map(|(a, b)| a * (a / b).ln()));
        assert!((kl_divergence(&t, &s).unwrap() - oracle).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn tikd_is_linear_in_alpha(seed in any::<u64>(), c in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let teachers: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| gaussian(&mut r)).collect()).collect();
        let student: Vec<f64> = (0..4).map(|_| gaussian(&mut r)).collect();
        let a1 = softmax(&[gaussian(&mut r), gaussian(&mut r), gaussian(&mut r)]);
        let a2 = softmax(&[gaussian(&mut r), gaussian(&mut r), gaussian(&mut r)]);
        let mix: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| c * x + (1.0 - c) * y).collect();
        let lhs = tikd_loss(&mix, &teachers, &student).unwrap();
        let rhs = c * tikd_loss(&a1, &teachers, &student).unwrap() + (1.0 - c) * tikd_loss(&a2, &teachers, &student).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-12);
        prop_assert!(lhs >= 0.0);
    }

    #[test]
    fn loss_breakdown_identity_holds(seed in 0u64..500) {
        let s = setup(seed, GateKind::Quantum, (seed % 3) as usize);
        let cfg = objective(seed as usize);
        let h = gate_input(&s);
        let t = teachers(&s);
        let slice = StudentSlice { backbone: &s.backbone, adapter: &s.adapter, head: &s.head, gate: &s.gate, pool: &s.pool };
        let inputs = SampleInputs {
            x: s.x.view(),
            label: s.label,
            gate_input: (!s.pool.is_empty()).then(|| h.view()),
            teacher_features: &t,
        };
        let b = sample_loss(&slice, &inputs, &cfg).unwrap();
        prop_assert!(b.ce >= 0.0 && b.qkd >= 0.0 && b.sparsity >= 0.0);
        prop_assert!((b.total - (b.ce + b.lambda_kd * b.qkd + b.lambda_s * b.sparsity)).abs() < 1e-12);
    }
}
