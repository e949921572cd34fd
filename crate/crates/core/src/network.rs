//! Frozen residual-MLP backbone with per-task adapter branches and
//! per-task linear heads.
//!
//! Each block computes
//! `x_out = MLP(x_in) + Σ_a ReLU(x_in · W_down_a) · W_up_a`
//! with `MLP(x) = x + gelu(x · W + c)`.

use std::hash::{DefaultHasher, Hash, Hasher};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{QkdError, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Hashes the bit patterns of `values` into `hasher`.
pub(crate) fn hash_floats<'a>(hasher: &mut DefaultHasher, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        v.to_bits().hash(hasher);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneMode {
    /// Random frozen residual-MLP blocks.
    Mlp,
    /// Blocks reduce to the identity; used with precomputed feature files.
    Identity,
}

impl std::str::FromStr for BackboneMode {
    type Err = QkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "identity" => Ok(Self::Identity),
            other => Err(QkdError::Config(format!(
                "unknown backbone_mode {other:?} (expected mlp or identity)"
            ))),
        }
    }
}

impl std::fmt::Display for BackboneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::Identity => "identity",
        })
    }
}

/// One frozen backbone block: `MLP(x) = x + gelu(x · weight + bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Block {
    pub fn mlp(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let pre = x.dot(&self.weight) + &self.bias;
        &x + &pre.mapv(gelu)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    blocks: Vec<Block>,
    width: usize,
    seed: u64,
}

impl Backbone {
    /// Random frozen blocks, weights `N(0, 1/d)`, biases `N(0, 0.1²)`.
    pub fn random(width: usize, num_blocks: usize, seed: u64) -> Result<Self> {
        if width == 0 || num_blocks == 0 {
            return Err(QkdError::Config("backbone needs width and depth >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (width as f64).sqrt();
        let blocks = (0..num_blocks)
            .map(|_| {
                let weight =
                    Array2::from_shape_simple_fn((width, width), || scale * rng.sample::<f64, _>(StandardNormal));
                let bias = Array1::from_shape_simple_fn(width, || 0.1 * rng.sample::<f64, _>(StandardNormal));
                Block { weight, bias }
            })
            .collect();
        Ok(Self { blocks, width, seed })
    }

    /// Blocks with zero weights and biases, so that `MLP(x) = x`.
    pub fn identity(width: usize, num_blocks: usize) -> Result<Self> {
        if width == 0 || num_blocks == 0 {
            return Err(QkdError::Config("backbone needs width and depth >= 1".into()));
        }
        let blocks = (0..num_blocks)
            .map(|_| Block {
                weight: Array2::zeros((width, width)),
                bias: Array1::zeros(width),
            })
            .collect();
        Ok(Self { blocks, width, seed: 0 })
    }

    pub fn build(mode: BackboneMode, width: usize, num_blocks: usize, seed: u64) -> Result<Self> {
        match mode {
            BackboneMode::Mlp => Self::random(width, num_blocks, seed),
            BackboneMode::Identity => Self::identity(width, num_blocks),
        }
    }

    pub fn from_blocks(blocks: Vec<Block>, seed: u64) -> Result<Self> {
        let width = blocks.first().map(|b| b.bias.len()).unwrap_or(0);
        if width == 0
            || blocks
                .iter()
                .any(|b| b.weight.dim() != (width, width) || b.bias.len() != width)
        {
            return Err(QkdError::Argument("inconsistent backbone block shapes".into()));
        }
        Ok(Self { blocks, width, seed })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for b in &self.blocks {
            hash_floats(&mut h, b.weight.iter());
            hash_floats(&mut h, b.bias.iter());
        }
        h.finish()
    }

    fn check_input(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.width {
            return Err(QkdError::Argument(format!(
                "input of length {} for backbone width {}",
                x.len(),
                self.width
            )));
        }
        Ok(())
    }

    fn check_adapter(&self, adapter: &AdapterStack) -> Result<()> {
        if adapter.blocks.len() != self.blocks.len() {
            return Err(QkdError::Config(format!(
                "adapter with {} blocks on a {}-block backbone",
                adapter.blocks.len(),
                self.blocks.len()
            )));
        }
        if adapter.width() != self.width {
            return Err(QkdError::Config(format!(
                "adapter width {} on a width-{} backbone",
                adapter.width(),
                self.width
            )));
        }
        Ok(())
    }

    /// Feature of `x` with one adapter stack attached, or none.
    pub fn forward(&self, x: ArrayView1<f64>, adapter: Option<&AdapterStack>) -> Result<Array1<f64>> {
        match adapter {
            Some(a) => self.forward_multi(x, &[a]),
            None => self.forward_multi(x, &[]),
        }
    }

    /// Feature of `x` with several adapter stacks attached in parallel; their
    /// branches are summed in every block.
    pub fn forward_multi(&self, x: ArrayView1<f64>, adapters: &[&AdapterStack]) -> Result<Array1<f64>> {
        self.check_input(x)?;
        for a in adapters {
            self.check_adapter(a)?;
        }
        let mut h = x.to_owned();
        for (b, block) in self.blocks.iter().enumerate() {
            let mut out = block.mlp(h.view());
            for a in adapters {
                out += &a.blocks[b].branch(h.view());
            }
            h = out;
        }
        Ok(h)
    }

    /// Forward pass with a single trainable adapter, keeping what the
    /// backward pass needs.
    pub fn forward_cached(&self, x: ArrayView1<f64>, adapter: &AdapterStack) -> Result<ForwardCache> {
        self.check_input(x)?;
        self.check_adapter(adapter)?;
        let mut cache = ForwardCache {
            block_inputs: Vec::with_capacity(self.blocks.len()),
            mlp_pre: Vec::with_capacity(self.blocks.len()),
            adapter_pre: Vec::with_capacity(self.blocks.len()),
            output: Array1::zeros(0),
        };
        let mut h = x.to_owned();
        for (block, ab) in self.blocks.iter().zip(&adapter.blocks) {
            let mlp_pre = h.dot(&block.weight) + &block.bias;
            let adapter_pre = h.dot(&ab.down);
            let out = &h + &mlp_pre.mapv(gelu) + adapter_pre.mapv(relu).dot(&ab.up);
            cache.block_inputs.push(h);
            cache.mlp_pre.push(mlp_pre);
            cache.adapter_pre.push(adapter_pre);
            h = out;
        }
        cache.output = h;
        Ok(cache)
    }

    /// Reverse pass through the blocks. Returns gradients for the adapter
    /// only; backbone parameters receive none.
    pub fn backward(&self, cache: &ForwardCache, adapter: &AdapterStack, grad_output: ArrayView1<f64>) -> AdapterGrad {
        let mut grad = AdapterGrad::zeros_like(adapter);
        let mut g = grad_output.to_owned();
        for b in (0..self.blocks.len()).rev() {
            let block = &self.blocks[b];
            let ab = &adapter.blocks[b];
            let x_in = &cache.block_inputs[b];
            let apre = &cache.adapter_pre[b];
            let hidden = apre.mapv(relu);

            // W_up: hiddenᵀ ⊗ g
            grad.blocks[b].up = hidden.view().insert_axis(Axis(1)).dot(&g.view().insert_axis(Axis(0)));
            // ReLU subgradient 0 at 0.
            let g_hidden = ab.up.dot(&g) * apre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            grad.blocks[b].down = x_in
                .view()
                .insert_axis(Axis(1))
                .dot(&g_hidden.view().insert_axis(Axis(0)));

            if b > 0 {
                let g_mlp = &g * &cache.mlp_pre[b].mapv(gelu_derivative);
                g = &g + &block.weight.dot(&g_mlp) + ab.down.dot(&g_hidden);
            }
        }
        grad
    }
}

/// Activations saved by [`Backbone::forward_cached`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    block_inputs: Vec<Array1<f64>>,
    mlp_pre: Vec<Array1<f64>>,
    adapter_pre: Vec<Array1<f64>>,
    pub output: Array1<f64>,
}

/// Adapter weights for one backbone block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBlock {
    /// `d × r`
    pub down: Array2<f64>,
    /// `r × d`
    pub up: Array2<f64>,
}

impl AdapterBlock {
    pub fn branch(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.down).mapv(relu).dot(&self.up)
    }
}

/// Block output with the adapter branch: `MLP(x) + ReLU(x·W_down)·W_up`.
pub fn adapter_forward(x_in: ArrayView1<f64>, block: &Block, adapter: &AdapterBlock) -> Result<Array1<f64>> {
    let d = x_in.len();
    if block.weight.dim() != (d, d)
        || block.bias.len() != d
        || adapter.down.nrows() != d
        || adapter.up.ncols() != d
        || adapter.down.ncols() != adapter.up.nrows()
    {
        return Err(QkdError::Argument("adapter/block shape mismatch".into()));
    }
    Ok(block.mlp(x_in) + adapter.branch(x_in))
}

/// Per-task adapters, one per backbone block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStack {
    pub task_id: usize,
    pub blocks: Vec<AdapterBlock>,
    pub frozen: bool,
}

impl AdapterStack {
    pub fn width(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.down.nrows())
    }

    pub fn rank(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.down.ncols())
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.down.len() + b.up.len()).sum()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.task_id.hash(&mut h);
        for b in &self.blocks {
            hash_floats(&mut h, b.down.iter());
            hash_floats(&mut h, b.up.iter());
        }
        h.finish()
    }

    pub fn apply_update(&mut self, step: &AdapterGrad, scale: f64) {
        for (b, g) in self.blocks.iter_mut().zip(&step.blocks) {
            b.down.scaled_add(scale, &g.down);
            b.up.scaled_add(scale, &g.up);
        }
    }
}

/// New adapter stack: `W_down ~ U(-1/√d, 1/√d)`, `W_up = 0`, so the branch
/// starts silent.
pub fn init_adapter(width: usize, rank: usize, num_blocks: usize, task_id: usize, seed: u64) -> Result<AdapterStack> {
    if rank == 0 || rank >= width {
        return Err(QkdError::Config(format!(
            "adapter rank {rank} must satisfy 1 <= r < d = {width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (width as f64).sqrt();
    let blocks = (0..num_blocks)
        .map(|_| AdapterBlock {
            down: Array2::from_shape_simple_fn((width, rank), || rng.random_range(-bound..bound)),
            up: Array2::zeros((rank, width)),
        })
        .collect();
    Ok(AdapterStack {
        task_id,
        blocks,
        frozen: false,
    })
}

/// Gradient (or update) buffers shaped like an [`AdapterStack`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrad {
    pub blocks: Vec<AdapterBlock>,
}

impl AdapterGrad {
    pub fn zeros_like(adapter: &AdapterStack) -> Self {
        Self {
            blocks: adapter
                .blocks
                .iter()
                .map(|b| AdapterBlock {
                    down: Array2::zeros(b.down.raw_dim()),
                    up: Array2::zeros(b.up.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &AdapterGrad, scale: f64) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.down.scaled_add(scale, &b.down);
            a.up.scaled_add(scale, &b.up);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            b.down *= s;
            b.up *= s;
        }
    }
}

/// Linear classifier for one task's classes.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    /// `C_t × d`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// Global index of this head's first class.
    pub class_offset: usize,
}

impl TaskHead {
    pub fn zeros(num_classes: usize, width: usize, class_offset: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(QkdError::Argument("a head needs at least one class".into()));
        }
        Ok(Self {
            weight: Array2::zeros((num_classes, width)),
            bias: Array1::zeros(num_classes),
            class_offset,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn class_range(&self) -> std::ops::Range<usize> {
        self.class_offset..self.class_offset + self.num_classes()
    }

    pub fn forward(&self, feature: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&feature) + &self.bias
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.class_offset.hash(&mut h);
        hash_floats(&mut h, self.weight.iter());
        hash_floats(&mut h, self.bias.iter());
        h.finish()
    }
}

/// Logits of `head` for `feature`.
pub fn head_forward(feature: ArrayView1<f64>, head: &TaskHead) -> Result<Array1<f64>> {
    if feature.len() != head.weight.ncols() {
        return Err(QkdError::Argument(format!(
            "feature of length {} for a head of width {}",
            feature.len(),
            head.weight.ncols()
        )));
    }
    Ok(head.forward(feature))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl HeadGrad {
    pub fn zeros_like(head: &TaskHead) -> Self {
        Self {
            weight: Array2::zeros(head.weight.raw_dim()),
            bias: Array1::zeros(head.bias.len()),
        }
    }

    pub fn accumulate(&mut self, other: &HeadGrad, scale: f64) {
        self.weight.scaled_add(scale, &other.weight);
        self.bias.scaled_add(scale, &other.bias);
    }

    pub fn scale(&mut self, s: f64) {
        self.weight *= s;
        self.bias *= s;
    }
}
