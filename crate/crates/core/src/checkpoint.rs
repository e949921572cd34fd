//! Versioned little-endian model checkpoints.
//!
//! Layout: the magic `QKDCKPT1`, a `u32` section count, then per section a
//! `u32` key length, the UTF-8 key, a `u32` rank, `rank` `u64` dimensions
//! and the `f64` payload in row-major order. Integers that must survive
//! bit-exactly (seeds) are stored through `f64::from_bits`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{QkdError, Result};
use crate::gating::{Gate, GateKind, GateParams, MlpGate};
use crate::network::{AdapterBlock, AdapterStack, Backbone, Block, TaskHead};
use crate::qsim::{CircuitParams, Statevector};
use crate::taskembed::TaskEmbedding;
use crate::trainer::{GateInput, IncrementalModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QKDCKPT1";
const MAGIC_STEM: &[u8; 7] = b"QKDCKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub key: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Section {
    fn scalars(key: impl Into<String>, values: &[f64]) -> Self {
        Self {
            key: key.into(),
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    fn vector(key: impl Into<String>, v: &Array1<f64>) -> Self {
        Self::scalars(key, &v.to_vec())
    }

    fn matrix(key: impl Into<String>, m: &Array2<f64>) -> Self {
        Self {
            key: key.into(),
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }
}

pub fn encode_sections(sections: &[Section]) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend((sections.len() as u32).to_le_bytes());
    for s in sections {
        out.extend((s.key.len() as u32).to_le_bytes());
        out.extend(s.key.as_bytes());
        out.extend((s.shape.len() as u32).to_le_bytes());
        for d in &s.shape {
            out.extend((*d as u64).to_le_bytes());
        }
        for x in &s.data {
            out.extend(x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(QkdError::format(self.pos as u64, format!("truncated {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_sections(bytes: &[u8]) -> Result<Vec<Section>> {
    if bytes.len() >= CHECKPOINT_MAGIC.len()
        && &bytes[..MAGIC_STEM.len()] == MAGIC_STEM
        && bytes[7] != CHECKPOINT_MAGIC[7]
    {
        return Err(QkdError::Version(String::from_utf8_lossy(&bytes[..8]).into_owned()));
    }
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(QkdError::format(0, "not a checkpoint (bad magic)"));
    }
    let mut r = Reader { bytes, pos: 8 };
    let count = r.u32("section count")?;
    let mut sections = Vec::new();
    for i in 0..count {
        let key_at = r.pos as u64;
        let key_len = r.u32(&format!("key length of section {i}"))? as usize;
        let key = std::str::from_utf8(r.take(key_len, &format!("key of section {i}"))?)
            .map_err(|_| QkdError::format(key_at, "section key is not UTF-8"))?
            .to_owned();
        let rank = r.u32(&format!("rank of section {key}"))?;
        let mut shape = Vec::with_capacity(rank.min(8) as usize);
        let mut len: u64 = 1;
        for _ in 0..rank {
            let d = r.u64(&format!("shape of section {key}"))?;
            len = len
                .checked_mul(d)
                .ok_or_else(|| QkdError::format(r.pos as u64, format!("section {key} is too large")))?;
            shape.push(d as usize);
        }
        let nbytes = len
            .checked_mul(8)
            .filter(|n| *n <= (bytes.len() - r.pos) as u64)
            .ok_or_else(|| QkdError::format(r.pos as u64, format!("truncated data of section {key}")))?;
        let data = r
            .take(nbytes as usize, &format!("data of section {key}"))?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        sections.push(Section { key, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(QkdError::format(r.pos as u64, "trailing bytes after the last section"));
    }
    Ok(sections)
}

fn bits(x: u64) -> f64 {
    f64::from_bits(x)
}

fn gate_kind_code(kind: GateKind) -> f64 {
    GateKind::ALL.iter().position(|k| *k == kind).expect("listed") as f64
}

pub fn model_sections(model: &IncrementalModel) -> Vec<Section> {
    let gate = &model.gate;
    let mut s = vec![Section::scalars(
        "meta",
        &[
            model.adapters.len() as f64,
            model.backbone.depth() as f64,
            model.seen_classes as f64,
            f64::from(model.gate_input.code()),
            gate_kind_code(gate.kind),
            gate.params.tau,
            bits(gate.seed),
            bits(model.backbone.seed()),
        ],
    )];
    for (b, block) in model.backbone.blocks().iter().enumerate() {
        s.push(Section::matrix(format!("backbone/{b}/weight"), &block.weight));
        s.push(Section::vector(format!("backbone/{b}/bias"), &block.bias));
    }
    for (t, a) in model.adapters.iter().enumerate() {
        s.push(Section::scalars(format!("adapter/{t}/task_id"), &[a.task_id as f64]));
        for (b, block) in a.blocks.iter().enumerate() {
            s.push(Section::matrix(format!("adapter/{t}/{b}/down"), &block.down));
            s.push(Section::matrix(format!("adapter/{t}/{b}/up"), &block.up));
        }
    }
    for (t, h) in model.heads.iter().enumerate() {
        s.push(Section::scalars(format!("head/{t}/offset"), &[h.class_offset as f64]));
        s.push(Section::matrix(format!("head/{t}/weight"), &h.weight));
        s.push(Section::vector(format!("head/{t}/bias"), &h.bias));
    }
    for (t, e) in model.embeddings.iter().enumerate() {
        s.push(Section::scalars(format!("embedding/{t}/task_id"), &[e.task_id as f64]));
        s.push(Section::vector(format!("embedding/{t}/s_tilde"), &e.s_tilde));
        let amps = e.task_state.amplitudes();
        s.push(Section {
            key: format!("embedding/{t}/state"),
            shape: vec![amps.len(), 2],
            data: amps.iter().flat_map(|a| [a.re, a.im]).collect(),
        });
    }
    let circuit = &gate.params.circuit;
    s.push(Section::matrix("gate/projection", &gate.params.projection));
    s.push(Section {
        key: "gate/theta".into(),
        shape: vec![circuit.num_layers(), circuit.num_qubits()],
        data: circuit.as_slice().to_vec(),
    });
    if let Some(m) = &gate.mlp {
        s.push(Section::matrix("gate/mlp/w1", &m.w1));
        s.push(Section::vector("gate/mlp/b1", &m.b1));
        s.push(Section::matrix("gate/mlp/w2", &m.w2));
        s.push(Section::vector("gate/mlp/b2", &m.b2));
    }
    s
}

struct SectionMap(BTreeMap<String, Section>);

impl SectionMap {
    fn get(&self, key: &str) -> Result<&Section> {
        self.0
            .get(key)
            .ok_or_else(|| QkdError::format(0, format!("missing section {key}")))
    }

    fn scalar(&self, key: &str, index: usize) -> Result<f64> {
        self.get(key)?
            .data
            .get(index)
            .copied()
            .ok_or_else(|| QkdError::format(0, format!("section {key} has no entry {index}")))
    }

    fn count(&self, key: &str, index: usize) -> Result<usize> {
        let v = self.scalar(key, index)?;
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(QkdError::format(
                0,
                format!("section {key}[{index}] is not a count: {v}"),
            ));
        }
        Ok(v as usize)
    }

    fn vector(&self, key: &str) -> Result<Array1<f64>> {
        let s = self.get(key)?;
        if s.shape.len() != 1 {
            return Err(QkdError::format(0, format!("section {key} is not a vector")));
        }
        Ok(Array1::from(s.data.clone()))
    }

    fn matrix(&self, key: &str) -> Result<Array2<f64>> {
        let s = self.get(key)?;
        if s.shape.len() != 2 {
            return Err(QkdError::format(0, format!("section {key} is not a matrix")));
        }
        Array2::from_shape_vec((s.shape[0], s.shape[1]), s.data.clone())
            .map_err(|e| QkdError::format(0, format!("section {key}: {e}")))
    }
}

fn shape_error(e: QkdError) -> QkdError {
    match e {
        QkdError::Format { .. } => e,
        other => QkdError::format(0, format!("inconsistent checkpoint: {other}")),
    }
}

pub fn model_from_sections(sections: Vec<Section>) -> Result<IncrementalModel> {
    let map = SectionMap(sections.into_iter().map(|s| (s.key.clone(), s)).collect());
    let tasks = map.count("meta", 0)?;
    let depth = map.count("meta", 1)?;
    let seen_classes = map.count("meta", 2)?;
    let gate_input = GateInput::ALL
        .get(map.count("meta", 3)?)
        .copied()
        .ok_or_else(|| QkdError::format(0, "unknown gate input code"))?;
    let kind = GateKind::ALL
        .get(map.count("meta", 4)?)
        .copied()
        .ok_or_else(|| QkdError::format(0, "unknown gate kind code"))?;
    let tau = map.scalar("meta", 5)?;
    let gate_seed = map.scalar("meta", 6)?.to_bits();
    let backbone_seed = map.scalar("meta", 7)?.to_bits();

    let blocks = (0..depth)
        .map(|b| {
            Ok(Block {
                weight: map.matrix(&format!("backbone/{b}/weight"))?,
                bias: map.vector(&format!("backbone/{b}/bias"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let backbone = Backbone::from_blocks(blocks, backbone_seed).map_err(shape_error)?;

    let mut adapters = Vec::with_capacity(tasks);
    let mut heads = Vec::with_capacity(tasks);
    let mut embeddings = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let blocks = (0..depth)
            .map(|b| {
                Ok(AdapterBlock {
                    down: map.matrix(&format!("adapter/{t}/{b}/down"))?,
                    up: map.matrix(&format!("adapter/{t}/{b}/up"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        adapters.push(AdapterStack {
            task_id: map.count(&format!("adapter/{t}/task_id"), 0)?,
            blocks,
            frozen: true,
        });
        heads.push(TaskHead {
            weight: map.matrix(&format!("head/{t}/weight"))?,
            bias: map.vector(&format!("head/{t}/bias"))?,
            class_offset: map.count(&format!("head/{t}/offset"), 0)?,
        });
        let state = map.matrix(&format!("embedding/{t}/state"))?;
        if state.ncols() != 2 {
            return Err(QkdError::format(0, format!("embedding {t} state is not complex pairs")));
        }
        let amps = state.rows().into_iter().map(|r| Complex64::new(r[0], r[1])).collect();
        embeddings.push(TaskEmbedding {
            task_id: map.count(&format!("embedding/{t}/task_id"), 0)?,
            s_tilde: map.vector(&format!("embedding/{t}/s_tilde"))?,
            task_state: Statevector::from_amplitudes(amps).map_err(shape_error)?,
        });
    }

    let theta = map.get("gate/theta")?;
    if theta.shape.len() != 2 {
        return Err(QkdError::format(0, "section gate/theta is not a matrix"));
    }
    let circuit = CircuitParams::new(theta.data.clone(), theta.shape[0], theta.shape[1]).map_err(shape_error)?;
    let params = GateParams::new(map.matrix("gate/projection")?, circuit, tau).map_err(shape_error)?;
    let mlp = if kind == GateKind::Mlp {
        Some(MlpGate {
            w1: map.matrix("gate/mlp/w1")?,
            b1: map.vector("gate/mlp/b1")?,
            w2: map.matrix("gate/mlp/w2")?,
            b2: map.vector("gate/mlp/b2")?,
        })
    } else {
        None
    };

    let width = backbone.width();
    let consistent = adapters.iter().all(|a| {
        a.blocks
            .iter()
            .all(|b| b.down.nrows() == width && b.up.ncols() == width && b.down.ncols() == b.up.nrows())
    }) && heads
        .iter()
        .all(|h| h.weight.ncols() == width && h.weight.nrows() == h.bias.len())
        && embeddings
            .iter()
            .all(|e| e.s_tilde.len() == width && e.task_state.num_qubits() == params.num_qubits())
        && params.projection.ncols() == width
        && mlp.as_ref().is_none_or(|m| {
            m.w1.ncols() == width
                && m.w1.nrows() == m.b1.len()
                && m.w2.ncols() == m.b1.len()
                && m.w2.nrows() == m.b2.len()
        })
        && heads.iter().map(|h| h.num_classes()).sum::<usize>() == seen_classes;
    if !consistent {
        return Err(QkdError::format(0, "checkpoint sections have inconsistent shapes"));
    }

    Ok(IncrementalModel {
        backbone,
        adapters,
        heads,
        embeddings,
        gate: Gate {
            kind,
            params,
            mlp,
            seed: gate_seed,
        },
        gate_input,
        seen_classes,
    })
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(model: &IncrementalModel, path: &Path) -> Result<()> {
    let bytes = encode_sections(&model_sections(model));
    let tmp = path.with_extension("tmp-ckpt");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Parses the whole file before building anything.
pub fn load_checkpoint(path: &Path) -> Result<IncrementalModel> {
    let bytes = fs::read(path)?;
    model_from_sections(decode_sections(&bytes)?)
}
