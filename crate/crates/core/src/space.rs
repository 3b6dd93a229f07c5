//! The searchable design space: block micro-architectures, channel and
//! expansion grids, attention insertion, and concrete architectures drawn
//! from it.
//!
//! Choices are made per block group. All blocks of a group share one
//! [`GroupChoice`]; the first block of a group carries the group's spatial
//! stride.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, GroupDiagnostic, Result};

/// Schema tag carried by every JSON document this crate reads or writes.
pub const SCHEMA_VERSION: &str = "v1";

/// Depthwise kernel of an MBConv-3D block: `t{temporal}_s{spatial}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockType {
    T1S3,
    T1S5,
    T3S3,
    T3S5,
    T5S3,
    T5S5,
}

impl BlockType {
    pub const ALL: [BlockType; 6] = [
        BlockType::T1S3,
        BlockType::T1S5,
        BlockType::T3S3,
        BlockType::T3S5,
        BlockType::T5S3,
        BlockType::T5S5,
    ];

    pub fn from_kernels(temporal: usize, spatial: usize) -> Result<Self> {
        Ok(match (temporal, spatial) {
            (1, 3) => BlockType::T1S3,
            (1, 5) => BlockType::T1S5,
            (3, 3) => BlockType::T3S3,
            (3, 5) => BlockType::T3S5,
            (5, 3) => BlockType::T5S3,
            (5, 5) => BlockType::T5S5,
            _ => {
                return Err(Error::InvalidValue(format!(
                    "no block type with kernel {temporal}x{spatial}^2"
                )))
            }
        })
    }

    pub fn temporal_kernel(self) -> usize {
        match self {
            BlockType::T1S3 | BlockType::T1S5 => 1,
            BlockType::T3S3 | BlockType::T3S5 => 3,
            BlockType::T5S3 | BlockType::T5S5 => 5,
        }
    }

    pub fn spatial_kernel(self) -> usize {
        match self {
            BlockType::T1S3 | BlockType::T3S3 | BlockType::T5S3 => 3,
            BlockType::T1S5 | BlockType::T3S5 | BlockType::T5S5 => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockType::T1S3 => "t1_s3",
            BlockType::T1S5 => "t1_s5",
            BlockType::T3S3 => "t3_s3",
            BlockType::T3S5 => "t3_s5",
            BlockType::T5S3 => "t5_s3",
            BlockType::T5S5 => "t5_s5",
        }
    }
}

impl fmt::Display for BlockType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockType::ALL
            .iter()
            .copied()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown block type `{s}`")))
    }
}

impl Serialize for BlockType {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for BlockType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Attention block inserted after a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttentionKind {
    /// No block; zero cost.
    #[serde(rename = "pass")]
    PassThrough,
    #[serde(rename = "glore")]
    GloRe,
    #[serde(rename = "nonlocal")]
    NonLocal,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::PassThrough => "pass",
            AttentionKind::GloRe => "glore",
            AttentionKind::NonLocal => "nonlocal",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An expansion ratio, held exactly in thousandths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Expansion(u32);

impl Expansion {
    pub const fn from_millis(millis: u32) -> Self {
        Expansion(millis)
    }

    pub fn millis(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    /// `round(ratio * c_in)` with halves rounded up.
    pub fn mid_channels(self, c_in: usize) -> usize {
        (self.0 as usize * c_in + 500) / 1000
    }
}

impl fmt::Display for Expansion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let int = self.0 / 1000;
        let mut frac = format!("{:03}", self.0 % 1000);
        while frac.len() > 1 && frac.ends_with('0') {
            frac.pop();
        }
        write!(f, "{int}.{frac}")
    }
}

impl FromStr for Expansion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidValue(format!("bad expansion ratio `{s}`"));
        let s = s.trim();
        let (int, frac) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int.is_empty() || frac.len() > 3 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let int: u32 = int.parse().map_err(|_| bad())?;
        let mut millis = int.checked_mul(1000).ok_or_else(bad)?;
        if !frac.is_empty() {
            let scale = 10u32.pow(3 - frac.len() as u32);
            millis += frac.parse::<u32>().map_err(|_| bad())? * scale;
        }
        if millis == 0 {
            return Err(bad());
        }
        Ok(Expansion(millis))
    }
}

impl Serialize for Expansion {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expansion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::Number(x) if x > 0.0 && x.is_finite() => Ok(Expansion((x * 1000.0).round() as u32)),
            Raw::Number(x) => Err(serde::de::Error::custom(format!("bad expansion ratio {x}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelRange {
    pub min: usize,
    pub max: usize,
    pub step: usize,
}

impl ChannelRange {
    pub fn values(&self) -> Vec<usize> {
        (self.min..=self.max).step_by(self.step.max(1)).collect()
    }

    pub fn len(&self) -> usize {
        (self.max - self.min) / self.step + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, c: usize) -> Option<usize> {
        (c >= self.min && c <= self.max && (c - self.min) % self.step == 0)
            .then(|| (c - self.min) / self.step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpansionRange {
    pub min: Expansion,
    pub max: Expansion,
    pub step: Expansion,
}

impl ExpansionRange {
    pub fn values(&self) -> Vec<Expansion> {
        (self.min.0..=self.max.0)
            .step_by(self.step.0.max(1) as usize)
            .map(Expansion)
            .collect()
    }

    pub fn len(&self) -> usize {
        ((self.max.0 - self.min.0) / self.step.0) as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, e: Expansion) -> Option<usize> {
        (e.0 >= self.min.0 && e.0 <= self.max.0 && (e.0 - self.min.0) % self.step.0 == 0)
            .then(|| ((e.0 - self.min.0) / self.step.0) as usize)
    }
}

/// The choice axes of one block group.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupAxes {
    #[serde(rename = "types")]
    pub block_types: Vec<BlockType>,
    pub channels: ChannelRange,
    pub expansion: ExpansionRange,
    pub attention: Vec<AttentionKind>,
    pub blocks: usize,
    pub stride: usize,
}

/// The four searchable axes of a group, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    BlockType,
    Channels,
    Expansion,
    Attention,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::BlockType, Axis::Channels, Axis::Expansion, Axis::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Axis::BlockType => "type",
            Axis::Channels => "channels",
            Axis::Expansion => "expansion",
            Axis::Attention => "attention",
        }
    }
}

impl GroupAxes {
    pub fn axis_len(&self, axis: Axis) -> usize {
        match axis {
            Axis::BlockType => self.block_types.len(),
            Axis::Channels => self.channels.len(),
            Axis::Expansion => self.expansion.len(),
            Axis::Attention => self.attention.len(),
        }
    }

    /// Number of distinct group choices.
    pub fn options(&self) -> u64 {
        Axis::ALL.iter().map(|&a| self.axis_len(a) as u64).product()
    }

    pub fn choice_at(&self, idx: [usize; 4]) -> GroupChoice {
        GroupChoice {
            block_type: self.block_types[idx[0]],
            channels: self.channels.min + idx[1] * self.channels.step,
            expansion: Expansion(self.expansion.min.0 + idx[2] as u32 * self.expansion.step.0),
            attention: self.attention[idx[3]],
        }
    }

    /// Axis indices of `choice`, or the per-axis diagnostics for the group.
    pub fn indices_of(&self, group: usize, choice: &GroupChoice) -> Result<[usize; 4], Vec<GroupDiagnostic>> {
        let mut diags = Vec::new();
        let mut diag = |axis, value: String, reason: &str| {
            diags.push(GroupDiagnostic { group, axis, value, reason: reason.to_string() })
        };
        let bt = self.block_types.iter().position(|&b| b == choice.block_type);
        if bt.is_none() {
            diag("type", choice.block_type.to_string(), "block type not in axis list");
        }
        let ch = self.channels.index_of(choice.channels);
        if ch.is_none() {
            let reason = if choice.channels < self.channels.min || choice.channels > self.channels.max {
                "channel out of range"
            } else {
                "channel not on step grid"
            };
            diag("channels", choice.channels.to_string(), reason);
        }
        let ex = self.expansion.index_of(choice.expansion);
        if ex.is_none() {
            let reason = if choice.expansion < self.expansion.min || choice.expansion > self.expansion.max {
                "expansion out of range"
            } else {
                "expansion not on step grid"
            };
            diag("expansion", choice.expansion.to_string(), reason);
        }
        let at = self.attention.iter().position(|&a| a == choice.attention);
        if at.is_none() {
            diag("attention", choice.attention.to_string(), "attention kind not in axis list");
        }
        match (bt, ch, ex, at) {
            (Some(a), Some(b), Some(c), Some(d)) => Ok([a, b, c, d]),
            _ => Err(diags),
        }
    }

    fn check(&self, g: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpace(format!("group {}: {msg}", g + 1)));
        if self.block_types.is_empty() || self.attention.is_empty() {
            return bad("choice lists must be non-empty".into());
        }
        let c = &self.channels;
        if c.min == 0 || c.step == 0 || c.max < c.min || (c.max - c.min) % c.step != 0 {
            return bad(format!("channel range {}..{} step {} is not a grid", c.min, c.max, c.step));
        }
        let e = &self.expansion;
        if e.min.0 == 0 || e.step.0 == 0 || e.max < e.min || (e.max.0 - e.min.0) % e.step.0 != 0 {
            return bad(format!("expansion range {}..{} step {} is not a grid", e.min, e.max, e.step));
        }
        if self.blocks == 0 {
            return bad("block count must be positive".into());
        }
        if self.stride != 1 && self.stride != 2 {
            return bad(format!("spatial stride {} not in {{1,2}}", self.stride));
        }
        let mut types = self.block_types.clone();
        types.sort();
        types.dedup();
        let mut att = self.attention.clone();
        att.sort();
        att.dedup();
        if types.len() != self.block_types.len() || att.len() != self.attention.len() {
            return bad("duplicate entries in a choice list".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputSpec {
    pub c: usize,
    pub t: usize,
    pub s: usize,
}

/// Fixed `1x3^2` stem convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadSpec {
    pub pool: usize,
    pub fc: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SearchSpace {
    pub id: String,
    pub input: InputSpec,
    pub stem: StemSpec,
    pub groups: Vec<GroupAxes>,
    pub head: HeadSpec,
}

#[derive(Serialize, Deserialize)]
struct SpaceFile {
    schema: String,
    #[serde(flatten)]
    space: SearchSpace,
}

#[derive(Serialize, Deserialize)]
struct ArchFile {
    schema: String,
    #[serde(flatten)]
    arch: ArchitectureSpec,
}

fn check_schema(found: &str) -> Result<()> {
    if found == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(Error::Schema(format!(
            "schema version `{found}` is not supported (expected `{SCHEMA_VERSION}`)"
        )))
    }
}

/// Identifier of the full-scale space with three attention options.
pub const FULL_SPACE_ID: &str = "autox3d";
/// Identifier of the full-scale space without the non-local option.
pub const FULL_GLORE_SPACE_ID: &str = "autox3d-glore";
pub const TOY_SPACE_ID: &str = "toy";
pub const TOY_CHANNEL_SPACE_ID: &str = "toy-channels";

fn ex(s: &str) -> Expansion {
    s.parse().expect("literal expansion")
}

impl SearchSpace {
    /// The 11-group video macro-architecture, searching block type, width,
    /// expansion and the attention block after every group.
    pub fn full() -> Self {
        Self::full_with_attention(
            FULL_SPACE_ID,
            vec![AttentionKind::PassThrough, AttentionKind::GloRe, AttentionKind::NonLocal],
        )
    }

    /// Same macro-architecture with attention restricted to {pass, GloRe}.
    pub fn full_glore_only() -> Self {
        Self::full_with_attention(
            FULL_GLORE_SPACE_ID,
            vec![AttentionKind::PassThrough, AttentionKind::GloRe],
        )
    }

    fn full_with_attention(id: &str, attention: Vec<AttentionKind>) -> Self {
        let ranges = [
            (12, 28, 4),
            (12, 28, 4),
            (24, 64, 8),
            (24, 64, 8),
            (48, 132, 12),
            (48, 132, 12),
            (48, 132, 12),
            (48, 132, 12),
            (96, 264, 24),
            (96, 264, 24),
            (96, 264, 24),
        ];
        let blocks = [1, 2, 2, 3, 2, 3, 3, 3, 2, 2, 3];
        let strides = [2, 1, 2, 1, 2, 1, 1, 1, 2, 1, 1];
        let groups = (0..11)
            .map(|g| GroupAxes {
                block_types: BlockType::ALL.to_vec(),
                channels: ChannelRange { min: ranges[g].0, max: ranges[g].1, step: ranges[g].2 },
                expansion: ExpansionRange { min: ex("1.5"), max: ex("6.0"), step: ex("0.75") },
                attention: attention.clone(),
                blocks: blocks[g],
                stride: strides[g],
            })
            .collect();
        SearchSpace {
            id: id.to_string(),
            input: InputSpec { c: 3, t: 13, s: 160 },
            stem: StemSpec { channels: 24, stride: 2 },
            groups,
            head: HeadSpec { pool: 432, fc: 2048, classes: 400 },
        }
    }

    /// Small space for end-to-end runs on synthetic clips (3x8x16^2 input,
    /// four groups, every axis searchable).
    pub fn toy() -> Self {
        let group = |min, max, stride, types: &[BlockType], exp: (&str, &str)| GroupAxes {
            block_types: types.to_vec(),
            channels: ChannelRange { min, max, step: 4 },
            expansion: ExpansionRange { min: ex(exp.0), max: ex(exp.1), step: ex("0.75") },
            attention: vec![AttentionKind::PassThrough, AttentionKind::GloRe],
            blocks: 1,
            stride,
        };
        let types = [BlockType::T1S3, BlockType::T3S3, BlockType::T5S3, BlockType::T3S5];
        SearchSpace {
            id: TOY_SPACE_ID.to_string(),
            input: InputSpec { c: 3, t: 8, s: 16 },
            stem: StemSpec { channels: 8, stride: 2 },
            groups: vec![
                group(4, 12, 1, &types, ("1.5", "3.0")),
                group(8, 16, 2, &types, ("1.5", "3.0")),
                group(8, 20, 1, &types, ("1.5", "3.0")),
                group(16, 32, 2, &types, ("1.5", "3.0")),
            ],
            head: HeadSpec { pool: 32, fc: 32, classes: 4 },
        }
    }

    /// Toy space that searches only width and expansion (block type fixed to
    /// `t3_s3`, no attention). Width and expansion grids have three candidates
    /// each; widths are exact multiples of the grid step, so channel parts are
    /// equal slices.
    pub fn toy_channels() -> Self {
        let group = |stride| GroupAxes {
            block_types: vec![BlockType::T3S3],
            channels: ChannelRange { min: 4, max: 12, step: 4 },
            expansion: ExpansionRange { min: ex("1.0"), max: ex("3.0"), step: ex("1.0") },
            attention: vec![AttentionKind::PassThrough],
            blocks: 1,
            stride,
        };
        SearchSpace {
            id: TOY_CHANNEL_SPACE_ID.to_string(),
            input: InputSpec { c: 3, t: 4, s: 8 },
            stem: StemSpec { channels: 8, stride: 2 },
            groups: vec![group(1), group(2), group(1)],
            head: HeadSpec { pool: 16, fc: 16, classes: 4 },
        }
    }

    /// Looks up a built-in space by id.
    pub fn builtin(id: &str) -> Option<Self> {
        match id {
            FULL_SPACE_ID => Some(Self::full()),
            FULL_GLORE_SPACE_ID => Some(Self::full_glore_only()),
            TOY_SPACE_ID => Some(Self::toy()),
            TOY_CHANNEL_SPACE_ID => Some(Self::toy_channels()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::InvalidSpace("no block groups".into()));
        }
        let dims = [
            self.input.c,
            self.input.t,
            self.input.s,
            self.stem.channels,
            self.head.pool,
            self.head.fc,
            self.head.classes,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidSpace("input, stem and head sizes must be positive".into()));
        }
        if self.stem.stride != 1 && self.stem.stride != 2 {
            return Err(Error::InvalidSpace("stem stride must be 1 or 2".into()));
        }
        for (g, axes) in self.groups.iter().enumerate() {
            axes.check(g)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SpaceFile {
            schema: SCHEMA_VERSION.to_string(),
            space: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        match raw.get("schema").and_then(|v| v.as_str()) {
            Some(v) => check_schema(v)?,
            None => return Err(Error::Schema("missing `schema` field".into())),
        }
        let file: SpaceFile = serde_json::from_value(raw)?;
        file.space.validate()?;
        Ok(file.space)
    }

    /// Stable short digest of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&SpaceFile {
            schema: SCHEMA_VERSION.to_string(),
            space: self.clone(),
        })
        .expect("space serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }

    /// Axis indices of every group of `arch`, validating membership.
    pub fn indices_of(&self, arch: &ArchitectureSpec) -> Result<Vec<[usize; 4]>> {
        validate_spec(self, arch)?;
        Ok(self
            .groups
            .iter()
            .zip(&arch.choices)
            .enumerate()
            .map(|(g, (axes, c))| axes.indices_of(g, c).expect("validated"))
            .collect())
    }

    pub fn arch_from_indices(&self, idx: &[[usize; 4]]) -> ArchitectureSpec {
        ArchitectureSpec {
            space_id: self.id.clone(),
            choices: self.groups.iter().zip(idx).map(|(axes, &i)| axes.choice_at(i)).collect(),
        }
    }

    /// The architecture taking the last (largest) option on every axis.
    pub fn max_arch(&self) -> ArchitectureSpec {
        let idx: Vec<[usize; 4]> = self
            .groups
            .iter()
            .map(|a| {
                let bt = a
                    .block_types
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, b)| (b.temporal_kernel() * b.spatial_kernel().pow(2), **b))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                let att = a
                    .attention
                    .iter()
                    .position(|&k| k == AttentionKind::GloRe)
                    .unwrap_or(0);
                [bt, a.channels.len() - 1, a.expansion.len() - 1, att]
            })
            .collect();
        self.arch_from_indices(&idx)
    }

    /// Every architecture of the space, in mixed-radix order (last group
    /// fastest). Intended for small spaces.
    pub fn enumerate(&self) -> impl Iterator<Item = ArchitectureSpec> + '_ {
        let radices: Vec<usize> = self
            .groups
            .iter()
            .flat_map(|g| Axis::ALL.map(|a| g.axis_len(a)))
            .collect();
        let mut digits = vec![0usize; radices.len()];
        let mut done = false;
        std::iter::from_fn(move || {
            if done {
                return None;
            }
            let idx: Vec<[usize; 4]> = digits
                .chunks(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect();
            let arch = self.arch_from_indices(&idx);
            // increment
            let mut pos = digits.len();
            loop {
                if pos == 0 {
                    done = true;
                    break;
                }
                pos -= 1;
                digits[pos] += 1;
                if digits[pos] < radices[pos] {
                    break;
                }
                digits[pos] = 0;
            }
            Some(arch)
        })
    }
}

/// The chosen operators for one block group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupChoice {
    #[serde(rename = "type")]
    pub block_type: BlockType,
    pub channels: usize,
    pub expansion: Expansion,
    pub attention: AttentionKind,
}

/// One concrete network of a space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub space_id: String,
    pub choices: Vec<GroupChoice>,
}

impl ArchitectureSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ArchFile {
            schema: SCHEMA_VERSION.to_string(),
            arch: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        match raw.get("schema").and_then(|v| v.as_str()) {
            Some(v) => check_schema(v)?,
            None => return Err(Error::Schema("missing `schema` field".into())),
        }
        let file: ArchFile = serde_json::from_value(raw)?;
        Ok(file.arch)
    }
}

/// Checks that `arch` has one choice per group and that every choice is a
/// member of its group's axis lists.
pub fn validate_spec(space: &SearchSpace, arch: &ArchitectureSpec) -> Result<()> {
    if arch.choices.len() != space.groups.len() {
        return Err(Error::LengthMismatch { expected: space.groups.len(), got: arch.choices.len() });
    }
    let diags: Vec<GroupDiagnostic> = space
        .groups
        .iter()
        .zip(&arch.choices)
        .enumerate()
        .filter_map(|(g, (axes, c))| axes.indices_of(g, c).err())
        .flatten()
        .collect();
    if diags.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArch(diags))
    }
}

/// Structural check only: one choice per group with positive channels and
/// expansion. Costing uses this so that off-grid architectures (such as
/// published ones) can still be priced.
pub fn check_compatible(space: &SearchSpace, arch: &ArchitectureSpec) -> Result<()> {
    if arch.choices.len() != space.groups.len() {
        return Err(Error::LengthMismatch { expected: space.groups.len(), got: arch.choices.len() });
    }
    let diags: Vec<GroupDiagnostic> = arch
        .choices
        .iter()
        .enumerate()
        .flat_map(|(g, c)| {
            let mut d = Vec::new();
            if c.channels == 0 {
                d.push(GroupDiagnostic { group: g, axis: "channels", value: "0".into(), reason: "must be positive".into() });
            }
            if c.expansion.millis() == 0 {
                d.push(GroupDiagnostic { group: g, axis: "expansion", value: "0".into(), reason: "must be positive".into() });
            }
            d
        })
        .collect();
    if diags.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArch(diags))
    }
}

fn uniform_arch(
    space_id: &str,
    types: &[BlockType],
    expansions: &[&str],
    channels: &[usize],
    attention: &[AttentionKind],
) -> ArchitectureSpec {
    ArchitectureSpec {
        space_id: space_id.to_string(),
        choices: (0..channels.len())
            .map(|g| GroupChoice {
                block_type: types[g],
                channels: channels[g],
                expansion: ex(expansions[g]),
                attention: attention[g],
            })
            .collect(),
    }
}

/// X3D-S expressed in the full space: `t3_s3` everywhere, expansion 2.25,
/// widths 24/48/96/192 per stage and no attention.
pub fn preset_x3d_s() -> ArchitectureSpec {
    uniform_arch(
        FULL_SPACE_ID,
        &[BlockType::T3S3; 11],
        &["2.25"; 11],
        &[24, 24, 48, 48, 96, 96, 96, 96, 192, 192, 192],
        &[AttentionKind::PassThrough; 11],
    )
}

/// The searched AutoX3D-S network.
pub fn preset_autox3d_s() -> ArchitectureSpec {
    use BlockType::*;
    let mut attention = [AttentionKind::PassThrough; 11];
    attention[3] = AttentionKind::GloRe;
    uniform_arch(
        FULL_SPACE_ID,
        &[T3S3, T3S3, T3S3, T1S3, T1S5, T3S3, T5S3, T3S3, T3S5, T1S3, T3S3],
        &["2.25", "5.25", "4.5", "2.25", "4.5", "3.75", "2.25", "3.0", "3.75", "3.0", "3.0"],
        &[16, 16, 48, 48, 72, 72, 88, 88, 144, 144, 192],
        &attention,
    )
}

/// Size of a space: the exact count and its base-10 logarithm.
#[derive(Debug, Clone, PartialEq)]
pub struct Cardinality {
    pub count: BigUint,
    pub log10: f64,
}

pub fn cardinality(space: &SearchSpace) -> Cardinality {
    let mut count = BigUint::from(1u32);
    let mut log10 = 0.0;
    for g in &space.groups {
        let n = g.options();
        count *= BigUint::from(n);
        log10 += (n as f64).log10();
    }
    Cardinality { count, log10 }
}
