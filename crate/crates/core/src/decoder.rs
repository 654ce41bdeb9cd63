//! Spatial decoding: from an attention map and an operation vector to a
//! predicted pose.
//!
//! The attended world tensor is the outer product `A ⊗ v_op` — every voxel
//! carries the operation vector scaled by its attention score. Two
//! same-padded convolutions (tanh in volumetric mode, batchnorm + relu in
//! flat mode) propagate that signal spatially, and a final 1×1×1
//! projection emits 8 channels per voxel: offsets `d_x, d_y, d_z, d_θ`
//! and confidence logits `c_x, c_y, c_z, c_θ`. Each confidence channel is
//! softmax-normalized over all voxels and the pose is the
//! confidence-weighted sum
//!
//! ```text
//! x̂ = Σ_ijk c_x(i,j,k) · (g_x(i,j,k) + d_x(i,j,k))
//! ```
//!
//! with `g` the constant voxel-center coordinate grid; `θ̂` uses no grid
//! term (`θ̂ = Σ c_θ · d_θ`) and is wrapped only outside the graph so the
//! training signal stays smooth.

use crate::config::ConvMode;
use crate::real::Real;
use crate::tape::{BnMode, BnStats, Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::world::GridDims;

// ── Readout channel layout ──────────────────────────────────────────────

pub const CH_DX: usize = 0;
pub const CH_DY: usize = 1;
pub const CH_DZ: usize = 2;
pub const CH_DTHETA: usize = 3;
pub const CH_CX: usize = 4;
pub const CH_CY: usize = 5;
pub const CH_CZ: usize = 6;
pub const CH_CTHETA: usize = 7;
pub const READOUT_CHANNELS: usize = 8;

// ── Coordinate grid ─────────────────────────────────────────────────────

/// Constant per-voxel world coordinates, flattened to `[D·H·W]` in the
/// same row-major (i, j, k) order the feature tensors use. Values are the
/// voxel centers: `g_x = k + 0.5`, `g_y = j + 0.5`, `g_z = i + 0.5`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateGrid<R> {
    pub g_x: Tensor<R>,
    pub g_y: Tensor<R>,
    pub g_z: Tensor<R>,
}

impl<R: Real> CoordinateGrid<R> {
    pub fn new(dims: GridDims) -> Self {
        let n = dims.numel();
        let mut g_x = vec![R::ZERO; n];
        let mut g_y = vec![R::ZERO; n];
        let mut g_z = vec![R::ZERO; n];
        for i in 0..dims.d {
            for j in 0..dims.h {
                for k in 0..dims.w {
                    let v = dims.flat(i, j, k);
                    let (x, y, z) = dims.center(i, j, k);
                    g_x[v] = R::from_f64(x);
                    g_y[v] = R::from_f64(y);
                    g_z[v] = R::from_f64(z);
                }
            }
        }
        CoordinateGrid {
            g_x: Tensor::from_vec(g_x),
            g_y: Tensor::from_vec(g_y),
            g_z: Tensor::from_vec(g_z),
        }
    }
}

/// The grid staged on a tape as constants, shared by every example in a
/// batch graph.
#[derive(Debug, Clone, Copy)]
pub struct GridVars {
    pub g_x: Var,
    pub g_y: Var,
    pub g_z: Var,
}

pub fn stage_grid<R: Real>(tape: &mut Tape<R>, grid: &CoordinateGrid<R>) -> GridVars {
    GridVars {
        g_x: tape.constant(grid.g_x.clone()),
        g_y: tape.constant(grid.g_y.clone()),
        g_z: tape.constant(grid.g_z.clone()),
    }
}

// ── Graph stages ────────────────────────────────────────────────────────

/// `A ⊗ v_op`: output row `v` (one per voxel) is `A[v] · v_op`, realized
/// as a rank-1 matrix product `[n,1] × [1,C] → [n,C]`.
pub fn broadcast_operation<R: Real>(
    tape: &mut Tape<R>,
    attention: Var,
    v_op: Var,
) -> Result<Var, TensorError> {
    let n = tape.value(attention).numel();
    let c = tape.value(v_op).numel();
    let col = tape.reshape(attention, vec![n, 1])?;
    let row = tape.reshape(v_op, vec![1, c])?;
    tape.matmul(col, row)
}

/// Tape handles for the convolution stack parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvStackVars {
    pub conv1_k: Var,
    pub conv1_b: Var,
    pub conv2_k: Var,
    pub conv2_b: Var,
    pub proj_k: Var,
    pub proj_b: Var,
    /// (gamma, beta) pairs, present exactly in relu-batchnorm mode.
    pub bn1: Option<(Var, Var)>,
    pub bn2: Option<(Var, Var)>,
}

/// Persistent batchnorm moments for the two normalized layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStackStats<R> {
    pub bn1: BnStats<R>,
    pub bn2: BnStats<R>,
}

fn apply_activation<R: Real>(
    tape: &mut Tape<R>,
    conv_out: Var,
    mode: ConvMode,
    bn_vars: Option<(Var, Var)>,
    bn_stats: Option<&mut BnStats<R>>,
    bn_mode: BnMode,
    bn_eps: R,
) -> Result<Var, TensorError> {
    match mode {
        ConvMode::Tanh3d => Ok(tape.tanh(conv_out)),
        ConvMode::ReluBatchNorm => {
            let shape = tape.value(conv_out).shape().to_vec();
            let c = *shape.last().expect("conv output has channels");
            let n: usize = shape[..shape.len() - 1].iter().product();
            let (gamma, beta) = bn_vars.expect("batchnorm parameters staged");
            let stats = bn_stats.expect("batchnorm stats owned by the model");
            let flat = tape.reshape(conv_out, vec![n, c])?;
            let normed = tape.batchnorm(flat, gamma, beta, stats, bn_mode, bn_eps)?;
            let act = tape.relu(normed);
            tape.reshape(act, shape)
        }
    }
}

/// Two same-padded convolutions with the configured activation, then the
/// linear 1×1×1 projection down to the 8 readout channels. Spatial dims
/// are preserved throughout.
#[allow(clippy::too_many_arguments)]
pub fn conv_stack<R: Real>(
    tape: &mut Tape<R>,
    world_feat: Var,
    vars: &ConvStackVars,
    mode: ConvMode,
    stats: Option<&mut ConvStackStats<R>>,
    bn_mode: BnMode,
    bn_eps: R,
) -> Result<Var, TensorError> {
    let (stats1, stats2) = match stats {
        Some(s) => (Some(&mut s.bn1), Some(&mut s.bn2)),
        None => (None, None),
    };
    let y1 = tape.conv3d(world_feat, vars.conv1_k, vars.conv1_b)?;
    let a1 = apply_activation(tape, y1, mode, vars.bn1, stats1, bn_mode, bn_eps)?;
    let y2 = tape.conv3d(a1, vars.conv2_k, vars.conv2_b)?;
    let a2 = apply_activation(tape, y2, mode, vars.bn2, stats2, bn_mode, bn_eps)?;
    tape.conv3d(a2, vars.proj_k, vars.proj_b)
}

// ── Readout ─────────────────────────────────────────────────────────────

/// Pose estimate handles for one example; `theta` is pre-wrap.
#[derive(Debug, Clone, Copy)]
pub struct PoseVars {
    pub x: Var,
    pub y: Var,
    pub z: Var,
    pub theta: Var,
}

/// Confidence-weighted pose readout over one example's feature block
/// `[D·H·W, 8]` (or any shape with 8 trailing channels and D·H·W rows).
pub fn readout<R: Real>(
    tape: &mut Tape<R>,
    features: Var,
    grid: GridVars,
) -> Result<PoseVars, TensorError> {
    let numel = tape.value(features).numel();
    let voxels = numel / READOUT_CHANNELS;
    let flat = tape.reshape(features, vec![voxels, READOUT_CHANNELS])?;
    let by_channel = tape.transpose2(flat)?;
    let channel = |tape: &mut Tape<R>, ch: usize| tape.slice(by_channel, ch * voxels, voxels);

    let axis = |tape: &mut Tape<R>, d_ch: usize, c_ch: usize, g: Option<Var>| {
        let d = channel(tape, d_ch)?;
        let c_logits = channel(tape, c_ch)?;
        let conf = tape.softmax(c_logits, 0)?;
        let target = match g {
            Some(gv) => tape.add(gv, d)?,
            None => d,
        };
        tape.dot(conf, target)
    };

    let x = axis(tape, CH_DX, CH_CX, Some(grid.g_x))?;
    let y = axis(tape, CH_DY, CH_CY, Some(grid.g_y))?;
    let z = axis(tape, CH_DZ, CH_CZ, Some(grid.g_z))?;
    let theta = axis(tape, CH_DTHETA, CH_CTHETA, None)?;
    Ok(PoseVars { x, y, z, theta })
}
