//! Synthetic class-incremental streams with tunable subspace overlap between
//! consecutive tasks, and a compact binary format for externally extracted
//! features.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{QkdError, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"QKDFEAT1";
const MAX_REJECTIONS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub subspace_dim: usize,
    /// Fraction of each task's basis inherited from the previous task.
    pub overlap: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            classes_per_task: 2,
            train_per_class: 100,
            test_per_class: 100,
            input_dim: 32,
            subspace_dim: 6,
            overlap: 0.5,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(QkdError::Config(m));
        if self.num_tasks == 0 || self.classes_per_task == 0 {
            return fail("a stream needs at least one task and one class per task".into());
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return fail("every class needs train and test samples".into());
        }
        if self.subspace_dim == 0 || self.subspace_dim > self.input_dim {
            return fail(format!(
                "subspace_dim {} must lie in 1..={}",
                self.subspace_dim, self.input_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return fail(format!("overlap {} outside [0, 1]", self.overlap));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!(
                "noise_sigma {} must be finite and non-negative",
                self.noise_sigma
            ));
        }
        Ok(())
    }

    /// Directions each task inherits from its predecessor.
    pub fn shared_dims(&self) -> usize {
        (self.overlap * self.subspace_dim as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub features: Array1<f64>,
    /// Global class index.
    pub label: usize,
    pub task_id: usize,
}

/// One stage of a stream: a contiguous block of classes with disjoint
/// train and test samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task_id: usize,
    pub class_offset: usize,
    pub num_classes: usize,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl TaskData {
    pub fn class_range(&self) -> std::ops::Range<usize> {
        self.class_offset..self.class_offset + self.num_classes
    }
}

#[derive(Clone, Debug)]
pub struct Stream {
    pub tasks: Vec<TaskData>,
    /// Per task, `input_dim × subspace_dim` with orthonormal columns.
    pub bases: Vec<Array2<f64>>,
    pub class_means: Vec<Array1<f64>>,
}

fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal))
}

/// Orthonormal vector drawn at random orthogonal to `against`.
fn fresh_direction(rng: &mut ChaCha8Rng, dim: usize, against: &[Array1<f64>]) -> Array1<f64> {
    loop {
        let mut v = gaussian_vector(rng, dim);
        // Two passes keep the residual orthogonal to working precision.
        for _ in 0..2 {
            for a in against {
                let p = a.dot(&v);
                v.scaled_add(-p, a);
            }
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn task_bases(spec: &StreamSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Array1<f64>>> {
    let shared = spec.shared_dims();
    let mut all: Vec<Array1<f64>> = Vec::new();
    let mut bases: Vec<Vec<Array1<f64>>> = Vec::with_capacity(spec.num_tasks);
    for _ in 0..spec.num_tasks {
        let mut basis: Vec<Array1<f64>> = match bases.last() {
            Some(prev) => prev[prev.len() - shared..].to_vec(),
            None => Vec::new(),
        };
        let need = spec.subspace_dim - basis.len();
        // Orthogonal to every earlier direction while the ambient space has
        // room, otherwise only to the previous task.
        let global = all.len() + need <= spec.input_dim;
        for _ in 0..need {
            let new = if global {
                fresh_direction(rng, spec.input_dim, &all)
            } else {
                let mut against = bases.last().cloned().unwrap_or_default();
                against.extend(basis.iter().cloned());
                fresh_direction(rng, spec.input_dim, &against)
            };
            all.push(new.clone());
            basis.push(new);
        }
        bases.push(basis);
    }
    bases
}

/// Deterministic stream for `spec`.
pub fn gen_stream(spec: &StreamSpec) -> Result<Stream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let raw_bases = task_bases(spec, &mut rng);
    let min_sep = 4.0 * spec.noise_sigma;
    let mut means: Vec<Array1<f64>> = Vec::new();
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    let mut bases = Vec::with_capacity(spec.num_tasks);

    for (t, basis) in raw_bases.iter().enumerate() {
        let mut b = Array2::<f64>::zeros((spec.input_dim, spec.subspace_dim));
        for (j, col) in basis.iter().enumerate() {
            b.column_mut(j).assign(col);
        }
        let class_offset = t * spec.classes_per_task;
        for c in 0..spec.classes_per_task {
            let mut accepted = None;
            for _ in 0..MAX_REJECTIONS {
                let coeffs = gaussian_vector(&mut rng, spec.subspace_dim);
                let m = b.dot(&coeffs);
                let ok = means.iter().all(|o| {
                    let d = &m - o;
                    d.dot(&d).sqrt() >= min_sep
                });
                if ok {
                    accepted = Some(m);
                    break;
                }
            }
            let m = accepted.ok_or_else(|| {
                QkdError::Generation(format!(
                    "class {} of task {t}: no mean {min_sep} apart from the others after {MAX_REJECTIONS} draws; \
                     use fewer classes per task or a smaller noise_sigma",
                    class_offset + c
                ))
            })?;
            means.push(m);
        }

        let mut train = Vec::with_capacity(spec.classes_per_task * spec.train_per_class);
        let mut test = Vec::with_capacity(spec.classes_per_task * spec.test_per_class);
        for c in 0..spec.classes_per_task {
            let label = class_offset + c;
            let mean = &means[label];
            for i in 0..spec.train_per_class + spec.test_per_class {
                let noise = gaussian_vector(&mut rng, spec.input_dim) * spec.noise_sigma;
                let sample = LabeledSample {
                    features: mean + &noise,
                    label,
                    task_id: t,
                };
                if i < spec.train_per_class {
                    train.push(sample);
                } else {
                    test.push(sample);
                }
            }
        }
        tasks.push(TaskData {
            task_id: t,
            class_offset,
            num_classes: spec.classes_per_task,
            train,
            test,
        });
        bases.push(b);
    }
    Ok(Stream {
        tasks,
        bases,
        class_means: means,
    })
}

/// Groups samples by task id. Within each class the trailing
/// `round(test_fraction · n)` samples in file order form the test split.
pub fn split_by_task(samples: &[LabeledSample], test_fraction: f64) -> Result<Vec<TaskData>> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(QkdError::Config(format!(
            "test_fraction {test_fraction} outside [0, 1)"
        )));
    }
    let mut by_task: BTreeMap<usize, BTreeMap<usize, Vec<&LabeledSample>>> = BTreeMap::new();
    for s in samples {
        by_task
            .entry(s.task_id)
            .or_default()
            .entry(s.label)
            .or_default()
            .push(s);
    }
    let mut tasks = Vec::with_capacity(by_task.len());
    let mut next_offset = 0;
    for (task_id, classes) in by_task {
        let lo = *classes.keys().next().expect("non-empty group");
        let hi = *classes.keys().next_back().expect("non-empty group");
        if lo != next_offset || hi - lo + 1 != classes.len() {
            return Err(QkdError::Data(format!(
                "task {task_id} labels {lo}..={hi} are not contiguous from class {next_offset}"
            )));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for members in classes.values() {
            let n_test = (test_fraction * members.len() as f64).round() as usize;
            let n_train = members.len() - n_test;
            if n_train == 0 {
                return Err(QkdError::Data(format!(
                    "class {} of task {task_id} has no training samples",
                    members[0].label
                )));
            }
            train.extend(members[..n_train].iter().map(|s| (*s).clone()));
            test.extend(members[n_train..].iter().map(|s| (*s).clone()));
        }
        tasks.push(TaskData {
            task_id,
            class_offset: lo,
            num_classes: classes.len(),
            train,
            test,
        });
        next_offset = hi + 1;
    }
    Ok(tasks)
}

/// Writes samples with `f32` features. Fails if the dimensions differ.
pub fn write_feature_file(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.features.len());
    if samples.iter().any(|s| s.features.len() != dim) {
        return Err(QkdError::Data("samples have differing feature dimensions".into()));
    }
    let narrow =
        |v: usize, what: &str| u32::try_from(v).map_err(|_| QkdError::Data(format!("{what} {v} does not fit in u32")));
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&narrow(samples.len(), "sample count")?.to_le_bytes())?;
    w.write_all(&narrow(dim, "dimension")?.to_le_bytes())?;
    for s in samples {
        w.write_all(&narrow(s.label, "label")?.to_le_bytes())?;
        w.write_all(&narrow(s.task_id, "task id")?.to_le_bytes())?;
        for x in &s.features {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(QkdError::format(
                self.pos as u64,
                format!("file truncated while reading {what}"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a feature file written by [`write_feature_file`].
pub fn parse_feature_bytes(bytes: &[u8]) -> Result<Vec<LabeledSample>> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() < FEATURE_MAGIC.len() || &bytes[..FEATURE_MAGIC.len()] != FEATURE_MAGIC {
        return Err(QkdError::format(0, "not a feature file (bad magic)"));
    }
    c.pos = FEATURE_MAGIC.len();
    let count = c.u32("sample count")? as usize;
    let dim = c.u32("dimension")? as usize;
    let record = 8 + 4 * dim;
    let expected = c.pos as u64 + count as u64 * record as u64;
    if (bytes.len() as u64) > expected {
        return Err(QkdError::format(
            expected,
            format!(
                "{} trailing bytes after {count} samples of dimension {dim}",
                bytes.len() as u64 - expected
            ),
        ));
    }
    let mut samples = Vec::with_capacity(count.min(bytes.len() / record.max(1)));
    for i in 0..count {
        let label = c.u32(&format!("label of sample {i}"))? as usize;
        let task_id = c.u32(&format!("task id of sample {i}"))? as usize;
        let raw = c.take(4 * dim, &format!("features of sample {i}"))?;
        let features = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        samples.push(LabeledSample {
            features,
            label,
            task_id,
        });
    }
    Ok(samples)
}

pub fn load_feature_file(path: &Path) -> Result<Vec<LabeledSample>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_feature_bytes(&bytes)
}
