//! Helpers shared by the integration suites.
#![allow(dead_code)]

use nasforge_core::data::{DataConfig, SyntheticVideoTask};
use nasforge_core::fair::PatternMode;
use nasforge_core::search::{posterior_weights, ArchParams, Parsec, Sample};
use nasforge_core::space::{Axis, ChannelRange, SearchSpace};
use nasforge_core::supernet::{Supernet, SupernetConfig};
use nasforge_core::tensor::{OptimKind, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One searchable group whose five widths (4..=20) are exact multiples of
/// the part size, so part `j` owns channels `4j..4j+4`.
pub fn five_width_space() -> SearchSpace {
    let mut space = SearchSpace::toy_channels();
    space.id = "five-widths".into();
    space.groups.truncate(1);
    space.groups[0].channels = ChannelRange { min: 4, max: 20, step: 4 };
    space
}

/// Fraction of uniform draws in which each width part of the single group
/// is activated (and therefore receives an update).
pub fn part_update_rates(mode: PatternMode, draws: usize, seed: u64) -> Vec<f64> {
    let space = five_width_space();
    let net = Supernet::new(&space, SupernetConfig::new(mode), seed).unwrap();
    let slot = net.names().iter().position(|n| n == "g1.b1.project.bn.gamma").unwrap();
    let params = ArchParams::init(&space);
    let mut r = rng(seed);
    let mut hits = [0usize; 5];
    for _ in 0..draws {
        let s = params.sample(&space, &mut r);
        let plan = net.activate(&s.arch).unwrap();
        let mut mask = net.empty_mask();
        net.mark(&mut mask, &plan).unwrap();
        for (part, h) in hits.iter_mut().enumerate() {
            let used: Vec<bool> = (4 * part..4 * part + 4).map(|c| mask[slot][c]).collect();
            assert!(used.iter().all(|&u| u == used[0]), "part {part} is split");
            *h += used[0] as usize;
        }
    }
    hits.iter().map(|&h| h as f64 / draws as f64).collect()
}

/// Expected per-part rate: column count over N.
pub fn expected_rates(mode: PatternMode) -> Vec<f64> {
    match mode {
        PatternMode::Fair => vec![0.6; 5],
        PatternMode::Naive => vec![1.0, 0.8, 0.6, 0.4, 0.2],
    }
}

pub fn toy_task(space: &SearchSpace, clips: usize, noise: f64, seed: u64) -> SyntheticVideoTask {
    let cfg = DataConfig {
        num_clips: clips,
        frames: space.input.t,
        spatial: space.input.s,
        classes: space.head.classes,
        noise,
        speed: 1.0,
    };
    SyntheticVideoTask::generate(cfg, seed).unwrap()
}

pub fn first_batch(task: &SyntheticVideoTask, n: usize) -> (Tensor, Vec<usize>) {
    task.batch(&(0..n).collect::<Vec<_>>()).unwrap()
}

/// Synthetic evaluator: minus the squared index distance to `target`.
pub fn bandit_loglik(s: &Sample, target: &[[usize; 4]]) -> f64 {
    -s.indices
        .iter()
        .zip(target)
        .flat_map(|(a, b)| (0..4).map(move |i| (a[i] as f64 - b[i] as f64).powi(2)))
        .sum::<f64>()
}

/// Runs the bandit with K=13 and no cost term. Returns the step at which
/// every axis puts more than 0.9 on the planted choice, if within `steps`.
pub fn bandit_steps(space: &SearchSpace, target: &[[usize; 4]], seed: u64, steps: usize) -> Option<usize> {
    let mut parsec = Parsec::new(space, OptimKind::adam(0.05));
    let mut r = rng(seed);
    for step in 1..=steps {
        let samples = parsec.sample_k(space, 13, &mut r);
        let ll: Vec<f64> = samples.iter().map(|s| bandit_loglik(s, target)).collect();
        let w = posterior_weights(&ll, &vec![0.0; ll.len()], 0.0).unwrap();
        parsec.update(&samples, &w).unwrap();
        let done = target.iter().enumerate().all(|(g, ix)| {
            Axis::ALL.iter().all(|&a| parsec.params.probs(g, a)[ix[a as usize]] > 0.9)
        });
        if done {
            return Some(step);
        }
    }
    None
}
