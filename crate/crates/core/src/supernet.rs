//! Weight-sharing supernet.
//!
//! Every parameter is stored once at the largest size any candidate needs.
//! Activating an architecture produces, for each parameter of its
//! standalone [`NetPlan`], the per-dimension index lists of the slice it
//! reads. Depthwise kernels are sliced around their center; channel slices
//! follow the group's [`FairPattern`] over its width grid; mid (expanded)
//! channels follow a pattern over the expansion grid, or a plain prefix.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::AttentionConfig;
use crate::error::{Error, Result};
use crate::fair::{FairPattern, PatternMode};
use crate::net::{self, BnMode, Evaluation, LayerKind, LayerPlan, NetPlan, Network};
use crate::space::{validate_spec, ArchitectureSpec, AttentionKind, Axis, SearchSpace};
use crate::tensor::{Checkpoint, OptimState, Tensor};

/// How mid (expanded) channels are shared between expansion candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpansionSharing {
    /// Same pattern mode as the width axis, built over the expansion grid.
    Pattern,
    /// Always the leading channels.
    Prefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub mode: PatternMode,
    pub expansion_sharing: ExpansionSharing,
    pub attention: AttentionConfig,
}

impl SupernetConfig {
    pub fn new(mode: PatternMode) -> Self {
        SupernetConfig { mode, expansion_sharing: ExpansionSharing::Pattern, attention: AttentionConfig::default() }
    }
}

/// Where one standalone parameter lives inside the supernet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlice {
    pub super_index: usize,
    pub index: Vec<Vec<usize>>,
}

/// A single activated candidate.
#[derive(Debug, Clone)]
pub struct ActivationPlan {
    pub arch: ArchitectureSpec,
    pub net: NetPlan,
    /// One entry per parameter of `net`, in canonical order.
    pub slices: Vec<ParamSlice>,
    /// Selected output channels of each group's blocks.
    pub group_channels: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Supernet {
    space: SearchSpace,
    config: SupernetConfig,
    seed: u64,
    super_plan: NetPlan,
    names: Vec<String>,
    by_name: BTreeMap<String, usize>,
    params: Vec<Tensor>,
    width_patterns: Vec<FairPattern>,
    expansion_patterns: Vec<FairPattern>,
}

fn full(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn centered(max: usize, k: usize) -> Vec<usize> {
    let lo = (max - k) / 2;
    (lo..lo + k).collect()
}

impl Supernet {
    /// Allocates the super kernels and draws He-style initial weights.
    pub fn new(space: &SearchSpace, config: SupernetConfig, seed: u64) -> Result<Self> {
        space.validate()?;
        let mut layers = vec![LayerPlan {
            label: "stem".into(),
            kind: LayerKind::Stem { c_in: space.input.c, c_out: space.stem.channels, stride: space.stem.stride },
        }];
        let mut c = space.stem.channels;
        let mut width_patterns = Vec::new();
        let mut expansion_patterns = Vec::new();
        for (g, axes) in space.groups.iter().enumerate() {
            let w = axes.channels.max;
            let kt = axes.block_types.iter().map(|b| b.temporal_kernel()).max().unwrap_or(1);
            let ks = axes.block_types.iter().map(|b| b.spatial_kernel()).max().unwrap_or(1);
            for b in 0..axes.blocks {
                layers.push(LayerPlan {
                    label: format!("g{}.b{}", g + 1, b + 1),
                    kind: LayerKind::Block {
                        c_in: c,
                        c_mid: axes.expansion.max.mid_channels(c),
                        c_out: w,
                        kt,
                        ks,
                        stride: if b == 0 { axes.stride } else { 1 },
                    },
                });
                c = w;
            }
            if axes.attention.contains(&AttentionKind::GloRe) {
                let (state, nodes) = config.attention.glore_dims(w)?;
                layers.push(LayerPlan {
                    label: format!("g{}.glore", g + 1),
                    kind: LayerKind::GloRe { channels: w, state, nodes },
                });
            }
            width_patterns.push(FairPattern::new(config.mode, axes.axis_len(Axis::Channels))?);
            expansion_patterns.push(FairPattern::new(config.mode, axes.axis_len(Axis::Expansion))?);
        }
        layers.push(LayerPlan {
            label: "head".into(),
            kind: LayerKind::Head { c_in: c, pool: space.head.pool, fc: space.head.fc, classes: space.head.classes },
        });
        let super_plan = NetPlan { input: [space.input.c, space.input.t, space.input.s], layers };
        let specs = super_plan.param_specs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor> = specs.iter().map(|s| s.initialize(&mut rng)).collect();
        let names: Vec<String> = specs.into_iter().map(|s| s.name).collect();
        let by_name = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Supernet {
            space: space.clone(),
            config,
            seed,
            super_plan,
            names,
            by_name,
            params,
            width_patterns,
            expansion_patterns,
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of stored weights.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn width_pattern(&self, group: usize) -> &FairPattern {
        &self.width_patterns[group]
    }

    fn super_layer(&self, label: &str) -> Result<&LayerKind> {
        self.super_plan
            .layers
            .iter()
            .find(|l| l.label == label)
            .map(|l| &l.kind)
            .ok_or_else(|| Error::Shape(format!("supernet has no layer `{label}`")))
    }

    fn slot(&self, name: &str) -> Result<usize> {
        self.by_name.get(name).copied().ok_or_else(|| Error::Shape(format!("supernet has no parameter `{name}`")))
    }

    /// Resolves the slices `arch` reads.
    pub fn activate(&self, arch: &ArchitectureSpec) -> Result<ActivationPlan> {
        validate_spec(&self.space, arch)?;
        let idx = self.space.indices_of(arch)?;
        let net = NetPlan::new(&self.space, arch, &self.config.attention)?;
        let group_channels: Vec<Vec<usize>> = idx
            .iter()
            .zip(&self.space.groups)
            .enumerate()
            .map(|(g, (ix, axes))| {
                self.width_patterns[g].select_channels(ix[1], axes.channels.max, axes.channels.values()[ix[1]])
            })
            .collect::<Result<_>>()?;

        let mut slices = Vec::new();
        let mut prev = full(self.space.stem.channels);
        let specs = net.param_specs();
        let mut push = |name: &str, index: Vec<Vec<usize>>| -> Result<()> {
            slices.push(ParamSlice { super_index: self.slot(name)?, index });
            Ok(())
        };
        for layer in &net.layers {
            let l = &layer.label;
            let group = l.strip_prefix('g').and_then(|s| s.split('.').next()).and_then(|s| s.parse::<usize>().ok());
            match (&layer.kind, self.super_layer(l)?) {
                (LayerKind::Stem { c_in, c_out, .. }, _) => {
                    push(&format!("{l}.w"), vec![full(*c_out), full(*c_in), vec![0], full(3), full(3)])?;
                    push(&format!("{l}.bn.gamma"), vec![full(*c_out)])?;
                    push(&format!("{l}.bn.beta"), vec![full(*c_out)])?;
                }
                (
                    LayerKind::Block { c_mid, kt, ks, .. },
                    LayerKind::Block { c_mid: sup_mid, kt: sup_kt, ks: sup_ks, .. },
                ) => {
                    let g = group.expect("block label carries its group") - 1;
                    let mid = match self.config.expansion_sharing {
                        ExpansionSharing::Pattern => self.expansion_patterns[g].select_channels(idx[g][2], *sup_mid, *c_mid)?,
                        ExpansionSharing::Prefix => {
                            if c_mid > sup_mid {
                                return Err(Error::Shape(format!("{l}: {c_mid} mid channels exceed {sup_mid}")));
                            }
                            full(*c_mid)
                        }
                    };
                    let out = &group_channels[g];
                    push(&format!("{l}.expand.w"), vec![mid.clone(), prev.clone(), vec![0], vec![0], vec![0]])?;
                    push(&format!("{l}.expand.bn.gamma"), vec![mid.clone()])?;
                    push(&format!("{l}.expand.bn.beta"), vec![mid.clone()])?;
                    let (ct, cs) = (centered(*sup_kt, *kt), centered(*sup_ks, *ks));
                    push(&format!("{l}.dw.w"), vec![mid.clone(), vec![0], ct, cs.clone(), cs])?;
                    push(&format!("{l}.dw.bn.gamma"), vec![mid.clone()])?;
                    push(&format!("{l}.dw.bn.beta"), vec![mid.clone()])?;
                    push(&format!("{l}.project.w"), vec![out.clone(), mid, vec![0], vec![0], vec![0]])?;
                    push(&format!("{l}.project.bn.gamma"), vec![out.clone()])?;
                    push(&format!("{l}.project.bn.beta"), vec![out.clone()])?;
                    prev = out.clone();
                }
                (LayerKind::GloRe { state, nodes, .. }, LayerKind::GloRe { .. }) => {
                    let c = prev.clone();
                    push(&format!("{l}.state.w"), vec![full(*state), c.clone(), vec![0], vec![0], vec![0]])?;
                    push(&format!("{l}.proj.w"), vec![full(*nodes), c.clone(), vec![0], vec![0], vec![0]])?;
                    push(&format!("{l}.gcn.node"), vec![full(*nodes), full(*nodes)])?;
                    push(&format!("{l}.gcn.state"), vec![full(*state), full(*state)])?;
                    push(&format!("{l}.out.w"), vec![c.clone(), full(*state), vec![0], vec![0], vec![0]])?;
                    push(&format!("{l}.out.bn.gamma"), vec![c.clone()])?;
                    push(&format!("{l}.out.bn.beta"), vec![c])?;
                }
                (LayerKind::Head { pool, fc, classes, .. }, _) => {
                    push(&format!("{l}.conv.w"), vec![full(*pool), prev.clone(), vec![0], vec![0], vec![0]])?;
                    push(&format!("{l}.conv.bn.gamma"), vec![full(*pool)])?;
                    push(&format!("{l}.conv.bn.beta"), vec![full(*pool)])?;
                    push(&format!("{l}.fc1.w"), vec![full(*fc), full(*pool)])?;
                    push(&format!("{l}.fc1.b"), vec![full(*fc)])?;
                    push(&format!("{l}.fc2.w"), vec![full(*classes), full(*fc)])?;
                    push(&format!("{l}.fc2.b"), vec![full(*classes)])?;
                }
                (kind, sup) => {
                    return Err(Error::Shape(format!("{l}: layer {kind:?} does not match supernet layer {sup:?}")));
                }
            }
        }
        debug_assert_eq!(slices.len(), specs.len());
        for (s, spec) in slices.iter().zip(&specs) {
            let shape: Vec<usize> = s.index.iter().map(Vec::len).collect();
            if shape != spec.shape || self.names[s.super_index] != spec.name {
                return Err(Error::Shape(format!("slice for {} has shape {shape:?}, expected {:?}", spec.name, spec.shape)));
            }
        }
        Ok(ActivationPlan { arch: arch.clone(), net, slices, group_channels })
    }

    /// Copies the activated slices out of the super kernels.
    pub fn gather(&self, plan: &ActivationPlan) -> Result<Vec<Tensor>> {
        plan.slices.iter().map(|s| self.params[s.super_index].gather(&s.index)).collect()
    }

    /// Forward (and optionally backward) through the activated candidate
    /// with batch normalization statistics.
    pub fn forward_loss(&self, plan: &ActivationPlan, x: &Tensor, labels: &[usize], want_grads: bool) -> Result<Evaluation> {
        let params = self.gather(plan)?;
        net::evaluate(&plan.net, &params, x, labels, BnMode::Batch, want_grads)
    }

    /// Logits of the activated candidate.
    pub fn logits(&self, plan: &ActivationPlan, x: &Tensor) -> Result<Tensor> {
        net::predict(&plan.net, &self.gather(plan)?, x, BnMode::Batch)
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    pub fn empty_mask(&self) -> Vec<Vec<bool>> {
        self.params.iter().map(|p| vec![false; p.numel()]).collect()
    }

    /// Adds `weight * grads` into the activated slices of `bank`.
    pub fn scatter_grads(&self, bank: &mut [Tensor], plan: &ActivationPlan, grads: &[Tensor], weight: f64) -> Result<()> {
        if grads.len() != plan.slices.len() || bank.len() != self.params.len() {
            return Err(Error::Shape("gradient list does not match the activation".into()));
        }
        for (s, g) in plan.slices.iter().zip(grads) {
            bank[s.super_index].scatter_add(&s.index, g, weight)?;
        }
        Ok(())
    }

    /// Marks the elements `plan` reads.
    pub fn mark(&self, mask: &mut [Vec<bool>], plan: &ActivationPlan) -> Result<()> {
        for s in &plan.slices {
            let shape = self.params[s.super_index].shape();
            let strides = crate::tensor::strides(shape);
            let m = &mut mask[s.super_index];
            let mut offsets = vec![0usize];
            for (ix, &stride) in s.index.iter().zip(&strides) {
                offsets = offsets.iter().flat_map(|&o| ix.iter().map(move |&i| o + i * stride)).collect();
            }
            for o in offsets {
                m[o] = true;
            }
        }
        Ok(())
    }

    /// Applies one optimizer step restricted to `mask`.
    pub fn apply(&mut self, opt: &mut OptimState, grads: &[Tensor], mask: &[Vec<bool>]) -> Result<()> {
        opt.step_masked(&mut self.params, grads, Some(mask))
    }

    /// Standalone weights of `arch`; running statistics are left at identity.
    pub fn extract(&self, arch: &ArchitectureSpec) -> Result<Network> {
        let plan = self.activate(arch)?;
        let params = self.gather(&plan)?;
        Network::new(plan.net, params)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.names.iter().cloned().zip(self.params.iter().cloned()).collect());
        ck.metadata.insert("space_hash".into(), self.space.hash().into());
        ck.metadata.insert("pattern_mode".into(), self.config.mode.to_string().into());
        ck.metadata.insert("seed".into(), self.seed.into());
        ck
    }

    /// Restores weights saved by [`Supernet::to_checkpoint`].
    pub fn load_weights(&mut self, ck: &Checkpoint) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let t = ck.get(name).ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
            if t.shape() != self.params[i].shape() {
                return Err(Error::Checkpoint(format!("`{name}` has the wrong shape")));
            }
            self.params[i] = t.clone();
        }
        Ok(())
    }
}
