//! 3-D convolutional visual encoder.
//!
//! Maps an RGB clip `(T, H, W, 3)` to either a spatio-temporal feature grid
//! `(T, 7, 7, D1)` or a temporally resolved pooled feature `(T, D_g)`. No
//! temporal pooling happens anywhere, so the frame count is preserved end to
//! end. The backbone here is a deliberately small reference network — four
//! 3-D conv blocks with a per-resolution stride plan plus pointwise expansion
//! heads — standing in for any heavier encoder with the same output contract.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, ThornError};
use crate::nn::{fan_in_uniform, LinearParams};
use ndarray::{Array2, Array4, Ix2, Ix4, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Spatial size of the output grid.
pub const GRID_SIZE: usize = 7;
const NUM_BLOCKS: usize = 4;

/// Raw RGB clip, shape `(T, H, W, 3)`, values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ClipTensor {
    data: Array4<f64>,
}

impl ClipTensor {
    /// Validates frame count, spatial size, finiteness, and value range.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (t, h, w, c) = data.dim();
        if t < 1 {
            return Err(ThornError::InvalidInput("clip must have at least one frame".into()));
        }
        if c != 3 {
            return Err(ThornError::shape("clip", "(T, H, W, 3)", format!("{:?}", data.shape())));
        }
        if h < 8 || w < 8 {
            return Err(ThornError::InvalidInput(format!(
                "clip spatial size {h}x{w} too small (need at least 8x8)"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(ThornError::InvalidInput("clip contains non-finite values".into()));
        }
        if data.iter().any(|&v| !(-1e-6..=1.0 + 1e-6).contains(&v)) {
            return Err(ThornError::InvalidInput("clip values must lie in [0, 1]".into()));
        }
        Ok(ClipTensor { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }
}

/// Whether nodes are built from the full spatial grid or the pooled feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    SpatioTemporal,
    Temporal,
}

/// Encoder output: the grid `F (T, H', W', D1)` or the pooled `(T, D_g)`.
#[derive(Clone, Debug)]
pub enum SceneFeature {
    Grid(Array4<f64>),
    Pooled(Array2<f64>),
}

impl SceneFeature {
    pub fn frames(&self) -> usize {
        match self {
            SceneFeature::Grid(g) => g.dim().0,
            SceneFeature::Pooled(p) => p.dim().0,
        }
    }

    /// Flattened per-frame feature width seen by the object filter.
    pub fn feature_width(&self) -> usize {
        match self {
            SceneFeature::Grid(g) => {
                let (_, h, w, d) = g.dim();
                h * w * d
            }
            SceneFeature::Pooled(p) => p.dim().1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Channel width of the spatio-temporal grid.
    pub d1: usize,
    /// Channel width of the pooled temporal feature.
    pub d_g: usize,
    /// Output channels of the four conv blocks.
    pub channels: [usize; 4],
}

impl EncoderConfig {
    /// Desk-scale defaults for a given grid width.
    pub fn with_d1(d1: usize) -> Self {
        let c = |frac: usize| (d1 * frac / 4).max(8);
        EncoderConfig {
            d1,
            d_g: 256,
            channels: [c(1), c(2), c(3), c(4)],
        }
    }
}

/// One conv block: kernel `(3, 3, 3, Ci, Co)` plus bias.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Reference encoder parameters. Deterministic for a fixed seed.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub blocks: Vec<ConvBlock>,
    pub proj_spatial: LinearParams,
    pub proj_temporal: LinearParams,
}

impl EncoderParams {
    /// Initialize with the default channel schedule for `d1`.
    pub fn init(seed: u64, d1: usize) -> Result<Self> {
        Self::init_with(seed, EncoderConfig::with_d1(d1))
    }

    pub fn init_with(seed: u64, config: EncoderConfig) -> Result<Self> {
        if config.d1 < 8 {
            return Err(ThornError::InvalidInput(format!(
                "encoder d1 = {} too small (need at least 8)",
                config.d1
            )));
        }
        if config.d_g < 8 {
            return Err(ThornError::InvalidInput(format!(
                "encoder d_g = {} too small (need at least 8)",
                config.d_g
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut ci = 3usize;
        for &co in &config.channels {
            let fan_in = 27 * ci;
            blocks.push(ConvBlock {
                kernel: fan_in_uniform(&mut rng, &[3, 3, 3, ci, co], fan_in),
                bias: Tensor::zeros(IxDyn(&[co])),
            });
            ci = co;
        }
        let c4 = config.channels[3];
        Ok(EncoderParams {
            config,
            blocks,
            proj_spatial: LinearParams::init(&mut rng, c4, config.d1),
            proj_temporal: LinearParams::init(&mut rng, c4, config.d_g),
        })
    }

    /// Named tensors in canonical order (checkpoint / optimizer order).
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("encoder.block{i}.kernel"), &b.kernel));
            out.push((format!("encoder.block{i}.bias"), &b.bias));
        }
        out.push(("encoder.proj_spatial.weight".into(), &self.proj_spatial.weight));
        out.push(("encoder.proj_spatial.bias".into(), &self.proj_spatial.bias));
        out.push(("encoder.proj_temporal.weight".into(), &self.proj_temporal.weight));
        out.push(("encoder.proj_temporal.bias".into(), &self.proj_temporal.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("encoder.block{i}.kernel"), &mut b.kernel));
            out.push((format!("encoder.block{i}.bias"), &mut b.bias));
        }
        out.push(("encoder.proj_spatial.weight".into(), &mut self.proj_spatial.weight));
        out.push(("encoder.proj_spatial.bias".into(), &mut self.proj_spatial.bias));
        out.push(("encoder.proj_temporal.weight".into(), &mut self.proj_temporal.weight));
        out.push(("encoder.proj_temporal.bias".into(), &mut self.proj_temporal.bias));
        out
    }
}

/// Tape handles for the encoder parameters, in [`EncoderParams::tensors`] order.
pub struct EncoderVars {
    pub blocks: Vec<(Var, Var)>,
    pub proj_spatial: (Var, Var),
    pub proj_temporal: (Var, Var),
}

impl EncoderVars {
    pub fn leaf(tape: &mut Tape, params: &EncoderParams) -> Self {
        let blocks = params
            .blocks
            .iter()
            .map(|b| (tape.leaf(b.kernel.clone()), tape.leaf(b.bias.clone())))
            .collect();
        EncoderVars {
            blocks,
            proj_spatial: (
                tape.leaf(params.proj_spatial.weight.clone()),
                tape.leaf(params.proj_spatial.bias.clone()),
            ),
            proj_temporal: (
                tape.leaf(params.proj_temporal.weight.clone()),
                tape.leaf(params.proj_temporal.bias.clone()),
            ),
        }
    }
}

/// Per-block (stride, padding) pairs that take one spatial axis to exactly 7.
///
/// Strides are spatial only; the temporal axis always runs at stride 1 with
/// same-length padding. Returns an error when no 4-block plan lands on 7
/// (supported inputs include 13..=16, 28, 56, and 112 pixels per axis).
pub fn plan_axis(len: usize) -> Result<[(usize, usize); NUM_BLOCKS]> {
    let mut plan = [(1usize, 1usize); NUM_BLOCKS];
    let mut cur = len;
    for slot in plan.iter_mut() {
        if cur == GRID_SIZE {
            *slot = (1, 1);
        } else if cur.div_ceil(2) == GRID_SIZE {
            *slot = (2, 1);
            cur = GRID_SIZE;
        } else if cur.div_ceil(2) - 1 == GRID_SIZE {
            *slot = (2, 0);
            cur = GRID_SIZE;
        } else if cur > GRID_SIZE {
            *slot = (2, 1);
            cur = cur.div_ceil(2);
        } else {
            return Err(ThornError::InvalidInput(format!(
                "input axis {len} cannot be reduced to a {GRID_SIZE}-cell grid"
            )));
        }
    }
    if cur != GRID_SIZE {
        return Err(ThornError::InvalidInput(format!(
            "input axis {len} cannot be reduced to a {GRID_SIZE}-cell grid in {NUM_BLOCKS} blocks"
        )));
    }
    Ok(plan)
}

/// Forward through the conv stack on an existing tape; returns the grid var
/// `(T, 7, 7, c4)` before the pointwise expansion heads.
pub fn backbone_on(tape: &mut Tape, clip: Var, vars: &EncoderVars) -> Result<Var> {
    let shape = tape.value(clip).shape().to_vec();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(ThornError::shape("encoder input", "(T, H, W, 3)", format!("{shape:?}")));
    }
    let plan_h = plan_axis(shape[1])?;
    let plan_w = plan_axis(shape[2])?;
    let mut x = clip;
    for (i, &(kv, bv)) in vars.blocks.iter().enumerate() {
        let conv = tape.conv3d(x, kv, bv, (plan_h[i].0, plan_w[i].0), (plan_h[i].1, plan_w[i].1));
        x = tape.relu(conv);
    }
    Ok(x)
}

/// Full encoder forward on a tape. Output var is the grid `(T, 7, 7, D1)` in
/// spatio-temporal mode or the pooled `(T, D_g)` in temporal mode.
pub fn encode_on(
    tape: &mut Tape,
    clip: Var,
    vars: &EncoderVars,
    config: &EncoderConfig,
    mode: EncoderMode,
) -> Result<Var> {
    let x = backbone_on(tape, clip, vars)?;
    let t = tape.value(x).shape()[0];
    let c4 = config.channels[3];
    match mode {
        EncoderMode::SpatioTemporal => {
            let flat = tape.reshape(x, &[t * GRID_SIZE * GRID_SIZE, c4]);
            let proj = tape.linear(flat, vars.proj_spatial.0, vars.proj_spatial.1);
            let act = tape.relu(proj);
            Ok(tape.reshape(act, &[t, GRID_SIZE, GRID_SIZE, config.d1]))
        }
        EncoderMode::Temporal => {
            let pooled = tape.spatial_mean_pool(x);
            let proj = tape.linear(pooled, vars.proj_temporal.0, vars.proj_temporal.1);
            Ok(tape.relu(proj))
        }
    }
}

/// Standalone encode: validates the clip and returns the scene feature.
pub fn encode(params: &EncoderParams, clip: &ClipTensor, mode: EncoderMode) -> Result<SceneFeature> {
    let mut tape = Tape::new();
    let vars = EncoderVars::leaf(&mut tape, params);
    let clip_var = tape.leaf(clip.data().clone().into_dyn());
    let out = encode_on(&mut tape, clip_var, &vars, &params.config, mode)?;
    let value = tape.value(out);
    Ok(match mode {
        EncoderMode::SpatioTemporal => {
            SceneFeature::Grid(value.view().into_dimensionality::<Ix4>().unwrap().to_owned())
        }
        EncoderMode::Temporal => {
            SceneFeature::Pooled(value.view().into_dimensionality::<Ix2>().unwrap().to_owned())
        }
    })
}
