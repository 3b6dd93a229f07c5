//! Analytical FLOPs and parameter accounting.
//!
//! One FLOP is one multiply-accumulate. Normalization, activation, bias and
//! softmax arithmetic is not counted; normalization affine parameters (two
//! per channel) and linear-layer biases are counted as parameters.
//!
//! Layer conventions, for a clip of `T` frames and `H x W` pixels:
//!
//! * MBConv-3D block `C_in -> C_out`, expansion `e`, kernel `k_t x k_s^2`,
//!   spatial stride `s`: `C_mid = round(e * C_in)`,
//!   `H' = ceil(H / s)`. The stride sits in the depthwise convolution, so
//!   the expand pointwise runs at the input resolution:
//!   `C_in*C_mid*T*H*W + C_mid*k_t*k_s^2*T*H'*W' + C_mid*C_out*T*H'*W'`.
//!   Temporal length is never strided.
//! * GloRe with `C_s = C / state_div` state channels and `N = C / node_div`
//!   nodes over `L = T*H*W` positions: state and projection pointwise maps
//!   `C*C_s*L + C*N*L`, projection onto nodes `C_s*N*L`, the two graph
//!   convolutions `N*N*C_s + C_s*C_s*N`, reverse projection `C_s*N*L` and the
//!   output pointwise `C_s*C*L`.
//! * Non-local (embedded Gaussian, `C_i = C / nonlocal_div`): three
//!   embeddings `3*C*C_i*L`, affinity and aggregation `2*L^2*C_i`, output
//!   `C_i*C*L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{check_compatible, ArchitectureSpec, AttentionKind, GroupChoice, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub fn new(channels: usize, frames: usize, height: usize, width: usize) -> Self {
        TensorShape { channels, frames, height, width }
    }

    /// `T * H * W`.
    pub fn positions(&self) -> u64 {
        (self.frames * self.height * self.width) as u64
    }

    fn check(&self, label: &str) -> Result<()> {
        if self.channels == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Cost { label: label.to_string(), reason: format!("zero-sized shape {self:?}") });
        }
        Ok(())
    }

    /// Parses `CxTxS` (square frames) or `CxTxHxW`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(['x', 'X', '×'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidValue(format!("bad shape `{s}`, expected CxTxS")))?;
        let shape = match parts[..] {
            [c, t, s] => TensorShape::new(c, t, s, s),
            [c, t, h, w] => TensorShape::new(c, t, h, w),
            _ => return Err(Error::InvalidValue(format!("bad shape `{s}`, expected CxTxS"))),
        };
        shape.check("input").map_err(|_| Error::InvalidValue(format!("zero-sized shape `{s}`")))?;
        Ok(shape)
    }
}

/// Internal sizing of the attention blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub glore_state_div: usize,
    pub glore_node_div: usize,
    pub nonlocal_div: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { glore_state_div: 2, glore_node_div: 4, nonlocal_div: 2 }
    }
}

impl AttentionConfig {
    /// `(state channels, nodes)` of a GloRe unit over `channels` inputs.
    pub fn glore_dims(&self, channels: usize) -> Result<(usize, usize)> {
        for div in [self.glore_state_div, self.glore_node_div] {
            if div == 0 || channels % div != 0 || channels < div {
                return Err(Error::InvalidValue(format!(
                    "GloRe reduction by {div} does not divide {channels} channels"
                )));
            }
        }
        Ok((channels / self.glore_state_div, channels / self.glore_node_div))
    }

    pub fn nonlocal_dim(&self, channels: usize) -> Result<usize> {
        let div = self.nonlocal_div;
        if div == 0 || channels % div != 0 || channels < div {
            return Err(Error::InvalidValue(format!(
                "non-local reduction by {div} does not divide {channels} channels"
            )));
        }
        Ok(channels / div)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCost {
    pub flops: u64,
    pub params: u64,
    pub out_shape: TensorShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub label: String,
    pub flops: u64,
    pub params: u64,
    pub out_shape: TensorShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_flops: u64,
    pub total_params: u64,
    pub per_block: Vec<LayerCost>,
}

impl CostReport {
    fn push(&mut self, label: String, flops: u64, params: u64, out_shape: TensorShape) {
        self.total_flops += flops;
        self.total_params += params;
        self.per_block.push(LayerCost { label, flops, params, out_shape });
    }
}

pub(crate) fn strided(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Cost of one MBConv-3D block (expand, depthwise, project, each followed
/// by normalization).
pub fn flops_mbconv3d(
    choice: &GroupChoice,
    in_shape: TensorShape,
    out_channels: usize,
    stride: usize,
) -> Result<BlockCost> {
    in_shape.check("mbconv")?;
    if out_channels == 0 {
        return Err(Error::Cost { label: "mbconv".into(), reason: "zero output channels".into() });
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Cost { label: "mbconv".into(), reason: format!("stride {stride} not in {{1,2}}") });
    }
    let c_in = in_shape.channels as u64;
    let c_mid = choice.expansion.mid_channels(in_shape.channels) as u64;
    if c_mid == 0 {
        return Err(Error::Cost {
            label: "mbconv".into(),
            reason: format!("expansion {} of {} channels is empty", choice.expansion, c_in),
        });
    }
    let c_out = out_channels as u64;
    let out_shape = TensorShape::new(
        out_channels,
        in_shape.frames,
        strided(in_shape.height, stride),
        strided(in_shape.width, stride),
    );
    let taps = (choice.block_type.temporal_kernel() * choice.block_type.spatial_kernel().pow(2)) as u64;
    let expand = c_in * c_mid * in_shape.positions();
    let depthwise = c_mid * taps * out_shape.positions();
    let project = c_mid * c_out * out_shape.positions();
    let params = c_in * c_mid + c_mid * taps + c_mid * c_out + 2 * (c_mid + c_mid + c_out);
    Ok(BlockCost { flops: expand + depthwise + project, params, out_shape })
}

/// Cost of an attention block at `shape` (the block preserves the shape).
pub fn flops_attention(kind: AttentionKind, shape: TensorShape, cfg: &AttentionConfig) -> Result<(u64, u64)> {
    match kind {
        AttentionKind::PassThrough => Ok((0, 0)),
        AttentionKind::GloRe => {
            shape.check("glore")?;
            let (cs, n) = cfg.glore_dims(shape.channels)?;
            let (c, cs, n, l) = (shape.channels as u64, cs as u64, n as u64, shape.positions());
            let flops = c * cs * l + c * n * l + cs * n * l + n * n * cs + cs * cs * n + cs * n * l + cs * c * l;
            let params = c * cs + c * n + n * n + cs * cs + cs * c + 2 * c;
            Ok((flops, params))
        }
        AttentionKind::NonLocal => {
            shape.check("nonlocal")?;
            let ci = cfg.nonlocal_dim(shape.channels)? as u64;
            let (c, l) = (shape.channels as u64, shape.positions());
            let flops = 3 * c * ci * l + 2 * l * l * ci + ci * c * l;
            let params = 3 * c * ci + ci * c + 2 * c;
            Ok((flops, params))
        }
    }
}

/// Walks stem, groups (stride on the first block of each group), the
/// attention block after each group, and the head.
pub fn cost_report(space: &SearchSpace, arch: &ArchitectureSpec, input: TensorShape) -> Result<CostReport> {
    cost_report_with(space, arch, input, &AttentionConfig::default())
}

pub fn cost_report_with(
    space: &SearchSpace,
    arch: &ArchitectureSpec,
    input: TensorShape,
    cfg: &AttentionConfig,
) -> Result<CostReport> {
    check_compatible(space, arch)?;
    input.check("input")?;
    let mut report = CostReport { total_flops: 0, total_params: 0, per_block: Vec::new() };

    let stem_c = space.stem.channels as u64;
    let mut shape = TensorShape::new(
        space.stem.channels,
        input.frames,
        strided(input.height, space.stem.stride),
        strided(input.width, space.stem.stride),
    );
    report.push(
        "stem".into(),
        input.channels as u64 * stem_c * 9 * shape.positions(),
        input.channels as u64 * stem_c * 9 + 2 * stem_c,
        shape,
    );

    for (g, (axes, choice)) in space.groups.iter().zip(&arch.choices).enumerate() {
        for b in 0..axes.blocks {
            let label = format!("g{}.b{}", g + 1, b + 1);
            let stride = if b == 0 { axes.stride } else { 1 };
            let cost = flops_mbconv3d(choice, shape, choice.channels, stride).map_err(|e| Error::Cost {
                label: label.clone(),
                reason: e.to_string(),
            })?;
            report.push(label, cost.flops, cost.params, cost.out_shape);
            shape = cost.out_shape;
        }
        if choice.attention != AttentionKind::PassThrough {
            let label = format!("g{}.{}", g + 1, choice.attention);
            let (flops, params) = flops_attention(choice.attention, shape, cfg)
                .map_err(|e| Error::Cost { label: label.clone(), reason: e.to_string() })?;
            report.push(label, flops, params, shape);
        }
    }

    let (pool, fc, classes) = (space.head.pool as u64, space.head.fc as u64, space.head.classes as u64);
    let c_last = shape.channels as u64;
    let pooled = TensorShape::new(space.head.pool, shape.frames, shape.height, shape.width);
    report.push(
        "head.conv".into(),
        c_last * pool * shape.positions(),
        c_last * pool + 2 * pool,
        pooled,
    );
    report.push("head.fc1".into(), pool * fc, pool * fc + fc, TensorShape::new(space.head.fc, 1, 1, 1));
    report.push(
        "head.fc2".into(),
        fc * classes,
        fc * classes + classes,
        TensorShape::new(space.head.classes, 1, 1, 1),
    );
    Ok(report)
}

/// Cost of `arch` at the space's own input size.
pub fn arch_flops(space: &SearchSpace, arch: &ArchitectureSpec) -> Result<u64> {
    let input = TensorShape::new(space.input.c, space.input.t, space.input.s, space.input.s);
    Ok(cost_report(space, arch, input)?.total_flops)
}

/// FLOPs hinge penalty `max(flops - target, 0) / target`.
pub fn hinge_cost(flops: u64, target: u64) -> Result<f64> {
    if target == 0 {
        return Err(Error::InvalidValue("target FLOPs must be positive".into()));
    }
    Ok(flops.saturating_sub(target) as f64 / target as f64)
}
