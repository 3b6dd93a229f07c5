//! Standalone networks for a single architecture.
//!
//! A [`NetPlan`] lists layers with concrete widths; its parameters come in a
//! fixed, named order ([`NetPlan::param_specs`]) that the supernet and the
//! checkpoint format both rely on. Parameter counts agree exactly with the
//! cost model.
//!
//! Layer structure:
//!
//! * stem: `1 x 3^2` conv (spatial stride), BN, ReLU
//! * block: expand `1^3` conv, BN, swish; depthwise `k_t x k_s^2` conv
//!   (spatial stride), BN, swish; project `1^3` conv, BN; identity residual
//!   when input and output shapes agree
//! * GloRe: `x + BN(W_out * G)` where, over `L` positions,
//!   `V = S P^T / L`, `H = V + V A_node^T`, `G = swish(A_state H) P`,
//!   `S` and `P` being pointwise state and node projections of `x`
//! * head: `1^3` conv, BN, ReLU, global average pool, fc, ReLU, fc

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{strided, AttentionConfig};
use crate::error::{Error, Result};
use crate::space::{check_compatible, ArchitectureSpec, AttentionKind, SearchSpace};
use crate::tensor::ops::BnStats;
use crate::tensor::{Checkpoint, Conv3dConfig, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Stem { c_in: usize, c_out: usize, stride: usize },
    Block { c_in: usize, c_mid: usize, c_out: usize, kt: usize, ks: usize, stride: usize },
    GloRe { channels: usize, state: usize, nodes: usize },
    Head { c_in: usize, pool: usize, fc: usize, classes: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub label: String,
    pub kind: LayerKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec { name, shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn initialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        match self.init {
            Init::He { fan_in } => Tensor::randn(&self.shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng),
            Init::Ones => Tensor::full(&self.shape, 1.0),
            Init::Zeros => Tensor::zeros(&self.shape),
        }
    }
}

/// Normalization statistics source for a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    Batch,
    Running(&'a [BnStats]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetPlan {
    pub input: [usize; 3],
    pub layers: Vec<LayerPlan>,
}

fn bn_specs(prefix: &str, c: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.bn.gamma"), vec![c], Init::Ones),
        ParamSpec::new(format!("{prefix}.bn.beta"), vec![c], Init::Zeros),
    ]
}

impl NetPlan {
    /// Builds the layer list of `arch` in `space`. Non-local attention is
    /// costed by the cost model but not instantiated.
    pub fn new(space: &SearchSpace, arch: &ArchitectureSpec, cfg: &AttentionConfig) -> Result<Self> {
        check_compatible(space, arch)?;
        let mut layers = vec![LayerPlan {
            label: "stem".into(),
            kind: LayerKind::Stem { c_in: space.input.c, c_out: space.stem.channels, stride: space.stem.stride },
        }];
        let mut c = space.stem.channels;
        for (g, (axes, choice)) in space.groups.iter().zip(&arch.choices).enumerate() {
            for b in 0..axes.blocks {
                let c_mid = choice.expansion.mid_channels(c);
                if c_mid == 0 {
                    return Err(Error::InvalidArch(vec![crate::error::GroupDiagnostic {
                        group: g,
                        axis: "expansion",
                        value: choice.expansion.to_string(),
                        reason: format!("no mid channels for {c} inputs"),
                    }]));
                }
                layers.push(LayerPlan {
                    label: format!("g{}.b{}", g + 1, b + 1),
                    kind: LayerKind::Block {
                        c_in: c,
                        c_mid,
                        c_out: choice.channels,
                        kt: choice.block_type.temporal_kernel(),
                        ks: choice.block_type.spatial_kernel(),
                        stride: if b == 0 { axes.stride } else { 1 },
                    },
                });
                c = choice.channels;
            }
            match choice.attention {
                AttentionKind::PassThrough => {}
                AttentionKind::GloRe => {
                    let (state, nodes) = cfg.glore_dims(c)?;
                    layers.push(LayerPlan {
                        label: format!("g{}.glore", g + 1),
                        kind: LayerKind::GloRe { channels: c, state, nodes },
                    });
                }
                AttentionKind::NonLocal => {
                    return Err(Error::Unsupported(format!(
                        "group {}: non-local attention has a cost model but no trainable implementation",
                        g + 1
                    )));
                }
            }
        }
        layers.push(LayerPlan {
            label: "head".into(),
            kind: LayerKind::Head { c_in: c, pool: space.head.pool, fc: space.head.fc, classes: space.head.classes },
        });
        Ok(NetPlan { input: [space.input.c, space.input.t, space.input.s], layers })
    }

    pub fn classes(&self) -> usize {
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Head { classes, .. }) => *classes,
            _ => 0,
        }
    }

    /// Parameters in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let l = &layer.label;
            match layer.kind {
                LayerKind::Stem { c_in, c_out, .. } => {
                    out.push(ParamSpec::new(format!("{l}.w"), vec![c_out, c_in, 1, 3, 3], Init::He { fan_in: c_in * 9 }));
                    out.extend(bn_specs(l, c_out));
                }
                LayerKind::Block { c_in, c_mid, c_out, kt, ks, .. } => {
                    let e = format!("{l}.expand");
                    out.push(ParamSpec::new(format!("{e}.w"), vec![c_mid, c_in, 1, 1, 1], Init::He { fan_in: c_in }));
                    out.extend(bn_specs(&e, c_mid));
                    let d = format!("{l}.dw");
                    out.push(ParamSpec::new(format!("{d}.w"), vec![c_mid, 1, kt, ks, ks], Init::He { fan_in: kt * ks * ks }));
                    out.extend(bn_specs(&d, c_mid));
                    let p = format!("{l}.project");
                    out.push(ParamSpec::new(format!("{p}.w"), vec![c_out, c_mid, 1, 1, 1], Init::He { fan_in: c_mid }));
                    out.extend(bn_specs(&p, c_out));
                }
                LayerKind::GloRe { channels: c, state, nodes } => {
                    out.push(ParamSpec::new(format!("{l}.state.w"), vec![state, c, 1, 1, 1], Init::He { fan_in: c }));
                    out.push(ParamSpec::new(format!("{l}.proj.w"), vec![nodes, c, 1, 1, 1], Init::He { fan_in: c }));
                    out.push(ParamSpec::new(format!("{l}.gcn.node"), vec![nodes, nodes], Init::He { fan_in: nodes }));
                    out.push(ParamSpec::new(format!("{l}.gcn.state"), vec![state, state], Init::He { fan_in: state }));
                    let o = format!("{l}.out");
                    out.push(ParamSpec::new(format!("{o}.w"), vec![c, state, 1, 1, 1], Init::He { fan_in: state }));
                    out.extend(bn_specs(&o, c));
                }
                LayerKind::Head { c_in, pool, fc, classes } => {
                    let cv = format!("{l}.conv");
                    out.push(ParamSpec::new(format!("{cv}.w"), vec![pool, c_in, 1, 1, 1], Init::He { fan_in: c_in }));
                    out.extend(bn_specs(&cv, pool));
                    out.push(ParamSpec::new(format!("{l}.fc1.w"), vec![fc, pool], Init::He { fan_in: pool }));
                    out.push(ParamSpec::new(format!("{l}.fc1.b"), vec![fc], Init::Zeros));
                    out.push(ParamSpec::new(format!("{l}.fc2.w"), vec![classes, fc], Init::He { fan_in: fc }));
                    out.push(ParamSpec::new(format!("{l}.fc2.b"), vec![classes], Init::Zeros));
                }
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    pub fn num_bn(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Block { .. } => 3,
                _ => 1,
            })
            .sum()
    }

    /// Shape `[C, T, H, W]` of the activation leaving each layer (the head
    /// reports its logits as `[classes, 1, 1, 1]`).
    pub fn activation_shapes(&self) -> Vec<[usize; 4]> {
        let [_, t, s] = self.input;
        let (mut h, mut w) = (s, s);
        self.layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Stem { c_out, stride, .. } | LayerKind::Block { c_out, stride, .. } => {
                    h = strided(h, stride);
                    w = strided(w, stride);
                    [c_out, t, h, w]
                }
                LayerKind::GloRe { channels, .. } => [channels, t, h, w],
                LayerKind::Head { classes, .. } => [classes, 1, 1, 1],
            })
            .collect()
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        self.param_specs().iter().map(|p| p.initialize(rng)).collect()
    }

    /// Checks that `params` match [`NetPlan::param_specs`] in count and shape.
    pub fn check_params(&self, params: &[Tensor]) -> Result<()> {
        let specs = self.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Shape(format!("plan has {} parameters, got {}", specs.len(), params.len())));
        }
        for (s, p) in specs.iter().zip(params) {
            if s.shape != p.shape() {
                return Err(Error::Shape(format!("{}: expected {:?}, got {:?}", s.name, s.shape, p.shape())));
            }
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. `params` are leaf variables in
    /// canonical order; `x` is `[N, C, T, S, S]`. Returns the logits and
    /// the batch statistics of every normalization layer (empty when
    /// running statistics were supplied).
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var, mode: BnMode<'_>) -> Result<(Var, Vec<BnStats>)> {
        let mut fw = Forward { tape, params, next: 0, mode, bn_index: 0, stats: Vec::new() };
        let expected = [fw.tape.value(x).shape().get(1).copied(), fw.tape.value(x).shape().get(2).copied()];
        if fw.tape.value(x).shape().len() != 5 || expected != [Some(self.input[0]), Some(self.input[1])] {
            return Err(Error::Shape(format!(
                "network input {:?} does not match [N, {}, {}, H, W]",
                fw.tape.value(x).shape(),
                self.input[0],
                self.input[1]
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            h = match layer.kind {
                LayerKind::Stem { stride, .. } => {
                    let w = fw.param();
                    let y = fw.tape.conv3d(h, w, Conv3dConfig { stride, groups: 1 })?;
                    let y = fw.bn(y)?;
                    fw.tape.relu(y)
                }
                LayerKind::Block { c_in, c_mid, c_out, stride, .. } => {
                    let w = fw.param();
                    let y = fw.tape.conv3d(h, w, Conv3dConfig::POINTWISE)?;
                    let y = fw.bn(y)?;
                    let y = fw.tape.swish(y);
                    let w = fw.param();
                    let y = fw.tape.conv3d(y, w, Conv3dConfig::depthwise(c_mid, stride))?;
                    let y = fw.bn(y)?;
                    let y = fw.tape.swish(y);
                    let w = fw.param();
                    let y = fw.tape.conv3d(y, w, Conv3dConfig::POINTWISE)?;
                    let y = fw.bn(y)?;
                    if c_in == c_out && stride == 1 {
                        fw.tape.add(h, y)?
                    } else {
                        y
                    }
                }
                LayerKind::GloRe { state, nodes, .. } => fw.glore(h, state, nodes)?,
                LayerKind::Head { .. } => {
                    let w = fw.param();
                    let y = fw.tape.conv3d(h, w, Conv3dConfig::POINTWISE)?;
                    let y = fw.bn(y)?;
                    let y = fw.tape.relu(y);
                    let y = fw.tape.global_avg_pool(y)?;
                    let (w, b) = (fw.param(), fw.param());
                    let y = fw.tape.linear(y, w, b)?;
                    let y = fw.tape.relu(y);
                    let (w, b) = (fw.param(), fw.param());
                    fw.tape.linear(y, w, b)?
                }
            };
        }
        if fw.next != params.len() {
            return Err(Error::Shape(format!("forward used {} of {} parameters", fw.next, params.len())));
        }
        Ok((h, fw.stats))
    }
}

struct Forward<'t, 'p, 'm> {
    tape: &'t mut Tape,
    params: &'p [Var],
    next: usize,
    mode: BnMode<'m>,
    bn_index: usize,
    stats: Vec<BnStats>,
}

impl Forward<'_, '_, '_> {
    fn param(&mut self) -> Var {
        let v = self.params[self.next];
        self.next += 1;
        v
    }

    fn bn(&mut self, x: Var) -> Result<Var> {
        let (gamma, beta) = (self.param(), self.param());
        let i = self.bn_index;
        self.bn_index += 1;
        match self.mode {
            BnMode::Batch => {
                let (y, stats) = self.tape.batchnorm(x, gamma, beta)?;
                self.stats.push(stats);
                Ok(y)
            }
            BnMode::Running(all) => {
                let stats = all
                    .get(i)
                    .ok_or_else(|| Error::MissingContext(format!("no running statistics for normalization {i}")))?;
                self.tape.batchnorm_eval(x, gamma, beta, stats)
            }
        }
    }

    fn glore(&mut self, x: Var, state: usize, nodes: usize) -> Result<Var> {
        let shape = self.tape.value(x).shape().to_vec();
        let (n, l) = (shape[0], shape[2] * shape[3] * shape[4]);
        let (w_state, w_proj, a_node, a_state, w_out) =
            (self.param(), self.param(), self.param(), self.param(), self.param());
        let s = self.tape.conv3d(x, w_state, Conv3dConfig::POINTWISE)?;
        let s = self.tape.reshape(s, &[n, state, l])?;
        let p = self.tape.conv3d(x, w_proj, Conv3dConfig::POINTWISE)?;
        let p = self.tape.reshape(p, &[n, nodes, l])?;
        let v = self.tape.matmul(s, p, false, true)?;
        let v = self.tape.scale(v, 1.0 / l as f64);
        let a_node = self.tape.reshape(a_node, &[1, nodes, nodes])?;
        let vn = self.tape.matmul(v, a_node, false, true)?;
        let h = self.tape.add(v, vn)?;
        let a_state = self.tape.reshape(a_state, &[1, state, state])?;
        let g = self.tape.matmul(a_state, h, false, false)?;
        let g = self.tape.swish(g);
        let y = self.tape.matmul(g, p, false, false)?;
        let y = self.tape.reshape(y, &[n, state, shape[2], shape[3], shape[4]])?;
        let y = self.tape.conv3d(y, w_out, Conv3dConfig::POINTWISE)?;
        let y = self.bn(y)?;
        self.tape.add(x, y)
    }
}

/// Output of [`evaluate`].
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub logits: Tensor,
    pub loss: f64,
    pub logliks: Vec<f64>,
    /// Parameter gradients in canonical order (empty unless requested).
    pub grads: Vec<Tensor>,
    pub bn_stats: Vec<BnStats>,
}

/// Runs `plan` on `x` with cross-entropy against `labels`, optionally
/// computing parameter gradients.
pub fn evaluate(
    plan: &NetPlan,
    params: &[Tensor],
    x: &Tensor,
    labels: &[usize],
    mode: BnMode<'_>,
    want_grads: bool,
) -> Result<Evaluation> {
    plan.check_params(params)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let xv = tape.leaf(x.clone());
    let (logits, bn_stats) = plan.forward(&mut tape, &vars, xv, mode)?;
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    if !ce.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {}", ce.loss)));
    }
    let grads = if want_grads {
        let g = tape.backward(ce.var)?;
        vars.iter().zip(params).map(|(v, p)| g.get_or_zeros(*v, p.shape())).collect()
    } else {
        Vec::new()
    };
    Ok(Evaluation { logits: tape.value(logits).clone(), loss: ce.loss, logliks: ce.logliks, grads, bn_stats })
}

/// Logits only, without a loss.
pub fn predict(plan: &NetPlan, params: &[Tensor], x: &Tensor, mode: BnMode<'_>) -> Result<Tensor> {
    plan.check_params(params)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let xv = tape.leaf(x.clone());
    let (logits, _) = plan.forward(&mut tape, &vars, xv, mode)?;
    Ok(tape.value(logits).clone())
}

/// A standalone network: plan, weights and running normalization statistics.
#[derive(Debug, Clone)]
pub struct Network {
    pub plan: NetPlan,
    pub params: Vec<Tensor>,
    pub running: Vec<BnStats>,
}

impl Network {
    pub fn new(plan: NetPlan, params: Vec<Tensor>) -> Result<Self> {
        plan.check_params(&params)?;
        let running = running_init(&plan);
        Ok(Network { plan, params, running })
    }

    pub fn init<R: Rng + ?Sized>(plan: NetPlan, rng: &mut R) -> Self {
        let params = plan.init_params(rng);
        let running = running_init(&plan);
        Network { plan, params, running }
    }

    /// Blends batch statistics into the running ones.
    pub fn update_running(&mut self, batch: &[BnStats], momentum: f64) -> Result<()> {
        if batch.len() != self.running.len() {
            return Err(Error::Shape(format!("{} statistics for {} layers", batch.len(), self.running.len())));
        }
        for (r, b) in self.running.iter_mut().zip(batch) {
            for (rm, bm) in r.mean.iter_mut().zip(&b.mean) {
                *rm = (1.0 - momentum) * *rm + momentum * bm;
            }
            for (rv, bv) in r.var.iter_mut().zip(&b.var) {
                *rv = (1.0 - momentum) * *rv + momentum * bv;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries: Vec<(String, Tensor)> = self
            .plan
            .param_specs()
            .into_iter()
            .zip(&self.params)
            .map(|(s, p)| (s.name, p.clone()))
            .collect();
        for (i, r) in self.running.iter().enumerate() {
            let c = r.mean.len();
            entries.push((format!("running.{i}.mean"), Tensor::new(vec![c], r.mean.clone()).expect("length")));
            entries.push((format!("running.{i}.var"), Tensor::new(vec![c], r.var.clone()).expect("length")));
        }
        Checkpoint::new(entries)
    }

    /// Reads weights by name; running statistics default to identity when
    /// absent (as in supernet extractions).
    pub fn from_checkpoint(plan: NetPlan, ck: &Checkpoint) -> Result<Self> {
        let params = plan
            .param_specs()
            .iter()
            .map(|s| {
                let t = ck.get(&s.name).ok_or_else(|| Error::Checkpoint(format!("missing array `{}`", s.name)))?;
                if t.shape() != s.shape {
                    return Err(Error::Checkpoint(format!("`{}` has shape {:?}, expected {:?}", s.name, t.shape(), s.shape)));
                }
                Ok(t.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = Network::new(plan, params)?;
        for (i, r) in net.running.iter_mut().enumerate() {
            if let (Some(m), Some(v)) = (ck.get(&format!("running.{i}.mean")), ck.get(&format!("running.{i}.var"))) {
                if m.numel() != r.mean.len() || v.numel() != r.var.len() {
                    return Err(Error::Checkpoint(format!("running statistics {i} have the wrong width")));
                }
                r.mean = m.data().to_vec();
                r.var = v.data().to_vec();
            }
        }
        Ok(net)
    }
}

fn running_init(plan: &NetPlan) -> Vec<BnStats> {
    let mut widths = Vec::new();
    for l in &plan.layers {
        match l.kind {
            LayerKind::Stem { c_out, .. } => widths.push(c_out),
            LayerKind::Block { c_mid, c_out, .. } => widths.extend([c_mid, c_mid, c_out]),
            LayerKind::GloRe { channels, .. } => widths.push(channels),
            LayerKind::Head { pool, .. } => widths.push(pool),
        }
    }
    widths.into_iter().map(|c| BnStats { mean: vec![0.0; c], var: vec![1.0; c] }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{cost_report, TensorShape};
    use crate::space::{preset_autox3d_s, preset_x3d_s};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_matches_cost_model() {
        let space = SearchSpace::full();
        for arch in [preset_x3d_s(), preset_autox3d_s()] {
            let plan = NetPlan::new(&space, &arch, &AttentionConfig::default()).unwrap();
            let report = cost_report(&space, &arch, TensorShape::new(3, 13, 160, 160)).unwrap();
            assert_eq!(plan.num_params() as u64, report.total_params);
        }
    }

    #[test]
    fn toy_forward_shapes() {
        let space = SearchSpace::toy();
        let arch = space.max_arch();
        let plan = NetPlan::new(&space, &arch, &AttentionConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = plan.init_params(&mut rng);
        let [c, t, s] = plan.input;
        let x = Tensor::randn(&[2, c, t, s, s], 1.0, &mut rng);
        let e = evaluate(&plan, &params, &x, &[0, 1], BnMode::Batch, true).unwrap();
        assert_eq!(e.logits.shape(), &[2, space.head.classes]);
        assert_eq!(e.bn_stats.len(), plan.num_bn());
        assert_eq!(e.grads.len(), params.len());
        assert!(e.grads.iter().all(Tensor::all_finite));
    }

    #[test]
    fn nonlocal_is_not_instantiated() {
        let space = SearchSpace::full();
        let mut arch = preset_x3d_s();
        arch.choices[2].attention = AttentionKind::NonLocal;
        assert!(matches!(NetPlan::new(&space, &arch, &AttentionConfig::default()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let space = SearchSpace::toy();
        let arch = space.max_arch();
        let plan = NetPlan::new(&space, &arch, &AttentionConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::init(plan.clone(), &mut rng);
        net.running[0].mean[0] = 0.25;
        let back = Network::from_checkpoint(plan, &net.to_checkpoint()).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(back.running, net.running);
    }
}
