//! Two-level encoder-decoder with a skip connection and three heads
//! (displacement, mask probability, signed distance), with hand-written
//! reverse-mode gradients and an Adam optimizer.
//!
//! ```text
//! [pmri, half_mask] → conv3 2→8 → conv3 8→8 ─────────────── skip ──┐
//!                                   └→ maxpool2 → conv3 8→16 → conv3 16→16 → upsample2 → concat(24)
//!   → conv3 24→8 → conv3 8→8 → { conv1 8→3 (disp), conv1 8→1 + sigmoid (mask), conv1 8→1 (sdf) }
//! ```
//! Every 3×3×3 convolution is followed by a ReLU.

mod adam;
mod checkpoint;
pub mod ops;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::LossGrads;
use crate::volume::{Geometry, Volume};
use ops::*;

pub use adam::{adam_step, OptimState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use train::{predict_case, train, train_from, LogRow, TrainConfig, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv3,
    Conv1,
}

/// `(name, kind, in channels, out channels)` for every layer, in parameter order.
pub const ARCHITECTURE: [(&str, LayerKind, usize, usize); 9] = [
    ("enc1a", LayerKind::Conv3, 2, 8),
    ("enc1b", LayerKind::Conv3, 8, 8),
    ("enc2a", LayerKind::Conv3, 8, 16),
    ("enc2b", LayerKind::Conv3, 16, 16),
    ("dec1a", LayerKind::Conv3, 24, 8),
    ("dec1b", LayerKind::Conv3, 8, 8),
    ("head_disp", LayerKind::Conv1, 8, 3),
    ("head_mask", LayerKind::Conv1, 8, 1),
    ("head_sdf", LayerKind::Conv1, 8, 1),
];

/// Spatial dims must be divisible by this.
pub const DIVISOR: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        NamedTensor { name: name.into(), shape, data: vec![0.0; n] }
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Weights and biases in architecture order (`<layer>.weight`, `<layer>.bias`).
#[derive(Clone, Debug)]
pub struct NetParams {
    tensors: Vec<NamedTensor>,
    rng_seed: u64,
    version: u64,
}

impl PartialEq for NetParams {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors && self.rng_seed == other.rng_seed
    }
}

/// The expected tensor names and shapes.
pub fn architecture_shapes() -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::with_capacity(2 * ARCHITECTURE.len());
    for (name, kind, cin, cout) in ARCHITECTURE {
        let k = if kind == LayerKind::Conv3 { 3 } else { 1 };
        out.push((format!("{name}.weight"), vec![cout, cin, k, k, k]));
        out.push((format!("{name}.bias"), vec![cout]));
    }
    out
}

impl NetParams {
    /// He-normal weights (each tensor drawn from its own stream of `seed`), zero biases.
    pub fn init(seed: u64) -> Self {
        let tensors = architecture_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let mut t = NamedTensor::zeros(name, shape);
                if t.shape.len() == 5 {
                    let fan_in: usize = t.shape[1..].iter().product();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    t.data.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
                }
                t
            })
            .collect();
        NetParams { tensors, rng_seed: seed, version: fresh_version() }
    }

    pub fn zeros(seed: u64) -> Self {
        let tensors = architecture_shapes().into_iter().map(|(n, s)| NamedTensor::zeros(n, s)).collect();
        NetParams { tensors, rng_seed: seed, version: fresh_version() }
    }

    /// Validates names, shapes and finiteness against the architecture.
    pub fn from_tensors(tensors: Vec<NamedTensor>, rng_seed: u64) -> Result<Self> {
        let expected = architecture_shapes();
        if tensors.len() != expected.len() {
            return Err(Error::CheckpointShape(format!("{} tensors, expected {}", tensors.len(), expected.len())));
        }
        for (t, (name, shape)) in tensors.iter().zip(&expected) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::CheckpointShape(format!("tensor '{}' {:?}, expected '{name}' {shape:?}", t.name, t.shape)));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::CheckpointShape(format!("tensor '{}' holds {} values", t.name, t.data.len())));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::CheckpointFormat(format!("tensor '{}' has non-finite values", t.name)));
            }
        }
        Ok(NetParams { tensors, rng_seed, version: fresh_version() })
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    /// Mutable access; invalidates activations recorded with the previous values.
    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        self.version = fresh_version();
        &mut self.tensors
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.tensors[2 * i].data, &self.tensors[2 * i + 1].data)
    }
}

/// Gradients aligned with [`NetParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(p: &NetParams) -> Self {
        ParamGrads { tensors: p.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput {
    pub disp: Volume,
    pub mask_prob: Volume,
    pub sdf: Volume,
}

/// Everything backward needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    version: u64,
    input: Tensor,
    a1: Tensor,
    a2: Tensor,
    pool_arg: Vec<usize>,
    pooled: Tensor,
    a3: Tensor,
    a4: Tensor,
    cat: Tensor,
    a5: Tensor,
    a6: Tensor,
    mask_prob: Vec<f64>,
}

impl Activations {
    /// Signature of every piecewise choice made in the forward pass (ReLU
    /// signs and pooling winners); equal signatures mean the network was
    /// evaluated on the same linear piece.
    pub fn pattern(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        for t in [&self.a1, &self.a2, &self.a3, &self.a4, &self.a5, &self.a6] {
            bits.extend(t.data.chunks(64).map(|c| c.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | ((v > 0.0) as u64) << i)));
        }
        bits.extend(self.pool_arg.iter().map(|&i| i as u64));
        bits
    }
}

fn check_inputs(pmri: &Volume, half_mask: &Volume) -> Result<()> {
    pmri.ensure_channels(1, "pmri")?;
    half_mask.ensure_channels(1, "half mask")?;
    pmri.geometry().ensure_same(half_mask.geometry(), "network input")?;
    let dims = pmri.dims();
    if dims.iter().any(|&d| d % DIVISOR != 0 || d == 0) {
        return Err(Error::DimsNotDivisible { dims, divisor: DIVISOR });
    }
    Ok(())
}

fn conv(kind: LayerKind, input: &Tensor, params: &NetParams, layer: usize) -> Tensor {
    let (w, b) = params.layer(layer);
    let cout = ARCHITECTURE[layer].3;
    match kind {
        LayerKind::Conv3 => conv3_forward(input, w, b, cout),
        LayerKind::Conv1 => conv1_forward(input, w, b, cout),
    }
}

fn conv_relu(input: &Tensor, params: &NetParams, layer: usize) -> Tensor {
    let mut t = conv(LayerKind::Conv3, input, params, layer);
    relu(&mut t);
    t
}

fn to_volume(geom: &Geometry, t: Tensor) -> Volume {
    Volume::new(geom.clone(), t.channels, t.data).expect("network output matches input geometry")
}

/// Runs the network and records the activations needed by [`backward`].
pub fn forward(pmri: &Volume, half_mask: &Volume, params: &NetParams) -> Result<(NetOutput, Activations)> {
    check_inputs(pmri, half_mask)?;
    let dims = pmri.dims();
    let mut data = pmri.data().to_vec();
    data.extend_from_slice(half_mask.data());
    let input = Tensor::from_data(2, dims, data);

    let a1 = conv_relu(&input, params, 0);
    let a2 = conv_relu(&a1, params, 1);
    let (pooled, pool_arg) = maxpool2_forward(&a2);
    let a3 = conv_relu(&pooled, params, 2);
    let a4 = conv_relu(&a3, params, 3);
    let up = upsample2_forward(&a4);
    let cat = concat(&up, &a2);
    let a5 = conv_relu(&cat, params, 4);
    let a6 = conv_relu(&a5, params, 5);

    let disp = conv(LayerKind::Conv1, &a6, params, 6);
    let mut mask = conv(LayerKind::Conv1, &a6, params, 7);
    mask.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    let sdf = conv(LayerKind::Conv1, &a6, params, 8);

    let geom = pmri.geometry();
    let acts = Activations {
        version: params.version,
        input,
        a1,
        a2,
        pool_arg,
        pooled,
        a3,
        a4,
        cat,
        a5,
        a6,
        mask_prob: mask.data.clone(),
    };
    let out = NetOutput { disp: to_volume(geom, disp), mask_prob: to_volume(geom, mask), sdf: to_volume(geom, sdf) };
    Ok((out, acts))
}

/// Inference without keeping activations.
pub fn predict(pmri: &Volume, half_mask: &Volume, params: &NetParams) -> Result<NetOutput> {
    forward(pmri, half_mask, params).map(|(o, _)| o)
}

/// Exact parameter gradients given the loss gradients with respect to the
/// three outputs (mask gradient taken with respect to the probability).
pub fn backward(acts: &Activations, params: &NetParams, out_grads: &LossGrads) -> Result<ParamGrads> {
    if acts.version != params.version {
        return Err(Error::StaleActivations { recorded: acts.version, current: params.version });
    }
    let dims = acts.input.dims;
    let n = acts.input.plane_len();
    if out_grads.disp.len() != 3 * n || out_grads.mask.len() != n || out_grads.sdf.len() != n {
        return Err(Error::DimensionMismatch { field: "output gradient", detail: format!("expected {} voxels", n) });
    }
    let mut grads = ParamGrads::zeros_like(params);
    let mut store = |layer: usize, gw: Vec<f64>, gb: Vec<f64>| {
        grads.tensors[2 * layer] = gw;
        grads.tensors[2 * layer + 1] = gb;
    };

    let g_disp = Tensor::from_data(3, dims, out_grads.disp.clone());
    let g_logit = Tensor::from_data(
        1,
        dims,
        out_grads.mask.iter().zip(&acts.mask_prob).map(|(g, p)| g * p * (1.0 - p)).collect(),
    );
    let g_sdf = Tensor::from_data(1, dims, out_grads.sdf.clone());

    let mut g_a6 = Tensor::zeros(8, dims);
    for (layer, g) in [(6, &g_disp), (7, &g_logit), (8, &g_sdf)] {
        let (gi, gw, gb) = conv1_backward(&acts.a6, params.layer(layer).0, g);
        for (a, b) in g_a6.data.iter_mut().zip(&gi.data) {
            *a += b;
        }
        store(layer, gw, gb);
    }

    let conv3_back = |layer: usize, input: &Tensor, output: &Tensor, mut g: Tensor, need: bool, store: &mut dyn FnMut(usize, Vec<f64>, Vec<f64>)| {
        relu_backward(output, &mut g);
        let (gi, gw, gb) = conv3_backward(input, params.layer(layer).0, &g, need);
        store(layer, gw, gb);
        gi
    };

    let g_a5 = conv3_back(5, &acts.a5, &acts.a6, g_a6, true, &mut store).unwrap();
    let g_cat = conv3_back(4, &acts.cat, &acts.a5, g_a5, true, &mut store).unwrap();
    let (g_up, mut g_a2) = concat_backward(&g_cat, 16);
    let g_a4 = upsample2_backward(acts.a4.dims, &g_up);
    let g_a3 = conv3_back(3, &acts.a3, &acts.a4, g_a4, true, &mut store).unwrap();
    let g_pooled = conv3_back(2, &acts.pooled, &acts.a3, g_a3, true, &mut store).unwrap();
    let from_pool = maxpool2_backward(dims, 8, &acts.pool_arg, &g_pooled);
    for (a, b) in g_a2.data.iter_mut().zip(&from_pool.data) {
        *a += b;
    }
    let g_a1 = conv3_back(1, &acts.a1, &acts.a2, g_a2, true, &mut store).unwrap();
    conv3_back(0, &acts.input, &acts.a1, g_a1, false, &mut store);
    Ok(grads)
}
