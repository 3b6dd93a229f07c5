//! Probabilistic architecture search over categorical logits.
//!
//! Each group carries one logit vector per axis. A step draws `K`
//! architectures independently (with replacement), scores each with
//! `s_k = loglik_k - lambda * hinge_k`, turns the scores into posterior
//! weights `w = softmax(s)` and moves the logits along
//! `sum_k w_k grad log P(A_k | alpha)`, which per axis is
//! `sum_k w_k (onehot(choice_k) - softmax(logits))`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{ArchitectureSpec, Axis, SearchSpace};
use crate::tensor::{OptimKind, OptimState, Tensor};

/// Scores below this are clamped before the posterior softmax.
pub const LOG_FLOOR: f64 = -30.0;

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lz).collect()
}

/// Categorical logits, `logits[group][axis][choice]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub logits: Vec<[Vec<f64>; 4]>,
}

/// One draw from the architecture distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub arch: ArchitectureSpec,
    pub indices: Vec<[usize; 4]>,
    pub log_prob: f64,
}

impl ArchParams {
    /// All-zero logits: uniform on every axis.
    pub fn init(space: &SearchSpace) -> Self {
        let logits = space.groups.iter().map(|g| Axis::ALL.map(|a| vec![0.0; g.axis_len(a)])).collect();
        ArchParams { logits }
    }

    pub fn probs(&self, group: usize, axis: Axis) -> Vec<f64> {
        softmax(&self.logits[group][axis as usize])
    }

    /// Checks that the logits fit `space` and are finite.
    pub fn check(&self, space: &SearchSpace) -> Result<()> {
        if self.logits.len() != space.groups.len() {
            return Err(Error::LengthMismatch { expected: space.groups.len(), got: self.logits.len() });
        }
        for (g, (l, axes)) in self.logits.iter().zip(&space.groups).enumerate() {
            for a in Axis::ALL {
                let v = &l[a as usize];
                if v.len() != axes.axis_len(a) {
                    return Err(Error::Shape(format!("group {g} axis {a:?}: {} logits for {} choices", v.len(), axes.axis_len(a))));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("group {g} axis {a:?} logits")));
                }
            }
        }
        Ok(())
    }

    /// Independent categorical draw per axis per group.
    pub fn sample<R: Rng + ?Sized>(&self, space: &SearchSpace, rng: &mut R) -> Sample {
        let indices: Vec<[usize; 4]> = self
            .logits
            .iter()
            .map(|axes| {
                Axis::ALL.map(|a| {
                    let p = softmax(&axes[a as usize]);
                    WeightedIndex::new(&p).map(|d| d.sample(rng)).unwrap_or(0)
                })
            })
            .collect();
        let log_prob = self.log_prob(&indices);
        Sample { arch: space.arch_from_indices(&indices), indices, log_prob }
    }

    pub fn log_prob(&self, indices: &[[usize; 4]]) -> f64 {
        self.logits
            .iter()
            .zip(indices)
            .map(|(axes, ix)| Axis::ALL.iter().map(|&a| log_softmax(&axes[a as usize])[ix[a as usize]]).sum::<f64>())
            .sum()
    }

    /// Per-axis argmax, ties to the lowest index.
    pub fn most_probable_indices(&self) -> Vec<[usize; 4]> {
        self.logits
            .iter()
            .map(|axes| {
                Axis::ALL.map(|a| {
                    let v = &axes[a as usize];
                    let mut best = 0;
                    for (i, &x) in v.iter().enumerate() {
                        if x > v[best] {
                            best = i;
                        }
                    }
                    best
                })
            })
            .collect()
    }

    pub fn most_probable(&self, space: &SearchSpace) -> ArchitectureSpec {
        space.arch_from_indices(&self.most_probable_indices())
    }

    /// Mean entropy (nats) of each axis across groups, in [`Axis::ALL`] order.
    pub fn entropies(&self) -> [f64; 4] {
        let n = self.logits.len().max(1) as f64;
        Axis::ALL.map(|a| {
            self.logits
                .iter()
                .map(|axes| {
                    softmax(&axes[a as usize]).iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>()
                })
                .sum::<f64>()
                / n
        })
    }

    fn as_tensors(&self) -> Vec<Tensor> {
        self.logits
            .iter()
            .flat_map(|axes| axes.iter().map(|v| Tensor::new(vec![v.len()], v.clone()).expect("length")))
            .collect()
    }

    fn set_from_tensors(&mut self, ts: &[Tensor]) {
        let mut it = ts.iter();
        for axes in &mut self.logits {
            for v in axes.iter_mut() {
                v.copy_from_slice(it.next().expect("one tensor per axis").data());
            }
        }
    }
}

/// `w_k = softmax_k(loglik_k - lambda * cost_k)`. Scores are floored at
/// [`LOG_FLOOR`] below the best one, which keeps the weights shift invariant.
pub fn posterior_weights(logliks: &[f64], costs: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if logliks.len() != costs.len() {
        return Err(Error::LengthMismatch { expected: logliks.len(), got: costs.len() });
    }
    if logliks.is_empty() {
        return Err(Error::InvalidValue("no samples to weight".into()));
    }
    if logliks.iter().all(|&l| l == f64::NEG_INFINITY) {
        return Err(Error::NonFinite("all log-likelihoods are -inf".into()));
    }
    if logliks.iter().chain(costs).any(|x| x.is_nan()) || costs.iter().any(|c| !c.is_finite()) || !lambda.is_finite() {
        return Err(Error::NonFinite("posterior inputs must be finite".into()));
    }
    let scores: Vec<f64> = logliks.iter().zip(costs).map(|(l, c)| l - lambda * c).collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(softmax(&scores.iter().map(|s| (s - best).max(LOG_FLOOR)).collect::<Vec<_>>()))
}

/// Descent direction for the logits (the negated ascent gradient
/// `sum_k w_k (onehot - softmax)`), shaped like [`ArchParams::logits`].
pub fn alpha_gradient(samples: &[Vec<[usize; 4]>], weights: &[f64], params: &ArchParams) -> Result<Vec<[Vec<f64>; 4]>> {
    if samples.len() != weights.len() {
        return Err(Error::LengthMismatch { expected: samples.len(), got: weights.len() });
    }
    let wsum: f64 = weights.iter().sum();
    let mut grad: Vec<[Vec<f64>; 4]> = params
        .logits
        .iter()
        .map(|axes| Axis::ALL.map(|a| softmax(&axes[a as usize]).into_iter().map(|p| wsum * p).collect()))
        .collect();
    for (idx, &w) in samples.iter().zip(weights) {
        if idx.len() != grad.len() {
            return Err(Error::LengthMismatch { expected: grad.len(), got: idx.len() });
        }
        for (g, ix) in idx.iter().enumerate() {
            for a in 0..4 {
                let v = &mut grad[g][a];
                if ix[a] >= v.len() {
                    return Err(Error::Shape(format!("choice {} out of range on group {g} axis {a}", ix[a])));
                }
                v[ix[a]] -= w;
            }
        }
    }
    Ok(grad)
}

/// Search hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub samples_per_step: usize,
    /// Target FLOPs; `None` means the median of uniformly drawn architectures.
    pub target_flops: Option<u64>,
    pub cost_weight: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub arch_optimizer: OptimKind,
    pub weight_optimizer: OptimKind,
    pub seed: u64,
    /// Clips per weight-update batch.
    pub batch_size: usize,
    /// Held-out clips scored per step for the likelihoods.
    pub eval_batch_size: usize,
    /// Optimization steps per logged epoch.
    pub steps_per_epoch: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            samples_per_step: 13,
            target_flops: None,
            cost_weight: 1.0,
            warmup_epochs: 60,
            total_epochs: 200,
            arch_optimizer: OptimKind::adam(0.02),
            weight_optimizer: OptimKind::sgd(0.1, 0.9, 0.0),
            seed: 0,
            batch_size: 16,
            eval_batch_size: 16,
            steps_per_epoch: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_step == 0 {
            return Err(Error::InvalidValue("samples_per_step must be at least 1".into()));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::InvalidValue(format!(
                "warm-up ({}) exceeds total epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.cost_weight >= 0.0 && self.cost_weight.is_finite()) {
            return Err(Error::InvalidValue("cost_weight must be a non-negative number".into()));
        }
        if self.target_flops == Some(0) {
            return Err(Error::InvalidValue("target FLOPs must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::InvalidValue("batch sizes and steps per epoch must be positive".into()));
        }
        Ok(())
    }
}

/// Logits plus their optimizer.
#[derive(Debug, Clone)]
pub struct Parsec {
    pub params: ArchParams,
    opt: OptimState,
}

impl Parsec {
    pub fn new(space: &SearchSpace, optimizer: OptimKind) -> Self {
        let params = ArchParams::init(space);
        let opt = OptimState::for_params(optimizer, &params.as_tensors());
        Parsec { params, opt }
    }

    pub fn sample_k<R: Rng + ?Sized>(&self, space: &SearchSpace, k: usize, rng: &mut R) -> Vec<Sample> {
        (0..k).map(|_| self.params.sample(space, rng)).collect()
    }

    /// One optimizer step along the posterior-weighted score gradient.
    pub fn update(&mut self, samples: &[Sample], weights: &[f64]) -> Result<()> {
        let idx: Vec<Vec<[usize; 4]>> = samples.iter().map(|s| s.indices.clone()).collect();
        let grad = alpha_gradient(&idx, weights, &self.params)?;
        let grads: Vec<Tensor> = grad
            .iter()
            .flat_map(|axes| axes.iter().map(|v| Tensor::new(vec![v.len()], v.clone()).expect("length")))
            .collect();
        let mut ts = self.params.as_tensors();
        self.opt.step(&mut ts, &grads)?;
        self.params.set_from_tensors(&ts);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init() {
        let space = SearchSpace::full();
        let p = ArchParams::init(&space);
        let probs = p.probs(0, Axis::BlockType);
        assert_eq!(probs.len(), 6);
        assert!(probs.iter().all(|&q| (q - 1.0 / 6.0).abs() < 1e-15));
        assert!(p.most_probable_indices().iter().all(|ix| *ix == [0, 0, 0, 0]));
    }

    #[test]
    fn posterior_examples() {
        let w = posterior_weights(&[0.0, 0.0, 0.0], &[0.0; 3], 1.0).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let w = posterior_weights(&[0.0, 2f64.ln()], &[0.0, 0.0], 0.0).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);
        let w = posterior_weights(&[0.0, 0.0], &[0.0, 0.5], 1.0).unwrap();
        assert!((w[0] - 0.6225).abs() < 1e-4 && (w[1] - 0.3775).abs() < 1e-4);
        assert!(posterior_weights(&[f64::NEG_INFINITY; 2], &[0.0; 2], 1.0).is_err());
    }

    #[test]
    fn single_sample_gradient() {
        let space = SearchSpace::toy();
        let p = ArchParams::init(&space);
        let idx = vec![[0, 0, 0, 0]; space.groups.len()];
        let g = alpha_gradient(&[idx], &[1.0], &p).unwrap();
        // attention axis has two options: ascent (+0.5, -0.5), descent negated
        assert_eq!(g[0][Axis::Attention as usize], vec![-0.5, 0.5]);
    }

    #[test]
    fn most_probable_follows_one_hot() {
        let space = SearchSpace::toy();
        let mut p = ArchParams::init(&space);
        p.logits[1][Axis::Channels as usize][2] = 50.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(p.sample(&space, &mut rng).indices[1][Axis::Channels as usize], 2);
        }
        assert_eq!(p.most_probable_indices()[1][Axis::Channels as usize], 2);
    }
}
