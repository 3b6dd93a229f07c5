//! End-to-end workflows: supernet search and standalone training.
//!
//! Random streams are split from one seed: stream 0 draws the dataset,
//! 1 initializes weights, 2 samples architectures, 3 shuffles batches and
//! 4 estimates the default FLOPs target.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{arch_flops, hinge_cost, AttentionConfig};
use crate::data::{DataConfig, SyntheticVideoTask};
use crate::error::{Error, Result};
use crate::fair::PatternMode;
use crate::net::{self, BnMode, NetPlan, Network};
use crate::search::{posterior_weights, ArchParams, Parsec, SearchConfig, LOG_FLOOR};
use crate::space::{ArchitectureSpec, SearchSpace, SCHEMA_VERSION};
use crate::supernet::{ExpansionSharing, Supernet, SupernetConfig};
use crate::tensor::{OptimKind, OptimState, Tensor};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "NASFORGE_SEED";

pub const STREAM_DATA: u64 = 0;
pub const STREAM_INIT: u64 = 1;
pub const STREAM_SAMPLE: u64 = 2;
pub const STREAM_BATCH: u64 = 3;
pub const STREAM_TARGET: u64 = 4;

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed from [`SEED_ENV`] when set, else `seed`.
pub fn seed_from_env(seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::InvalidValue(format!("{SEED_ENV}=`{v}` is not an integer"))),
        Err(_) => Ok(seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub space: SearchSpace,
    pub search: SearchConfig,
    pub data: DataConfig,
    /// Clips held out for likelihood scoring.
    pub holdout: usize,
    pub pattern_mode: PatternMode,
    pub expansion_sharing: ExpansionSharing,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Settings tuned for the toy spaces on one CPU core.
    pub fn toy(space: SearchSpace) -> Self {
        let data = DataConfig { num_clips: 288, frames: space.input.t, spatial: space.input.s, classes: space.head.classes, noise: 0.1, speed: 1.0 };
        let search = SearchConfig {
            cost_weight: 3.0,
            arch_optimizer: OptimKind::adam(0.05),
            weight_optimizer: OptimKind::sgd(0.05, 0.9, 0.0),
            batch_size: 8,
            eval_batch_size: 16,
            warmup_epochs: 70,
            total_epochs: 100,
            steps_per_epoch: 8,
            ..SearchConfig::default()
        };
        RunConfig {
            space,
            search,
            data,
            holdout: 64,
            pattern_mode: PatternMode::Fair,
            expansion_sharing: ExpansionSharing::Pattern,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.search.validate()?;
        self.data.validate()?;
        if self.data.frames != self.space.input.t || self.data.spatial != self.space.input.s || self.space.input.c != 3 {
            return Err(Error::InvalidValue(format!(
                "data clips 3x{}x{} do not match space input {}x{}x{}",
                self.data.frames, self.data.spatial, self.space.input.c, self.space.input.t, self.space.input.s
            )));
        }
        if self.data.classes != self.space.head.classes {
            return Err(Error::InvalidValue(format!(
                "{} data classes for a {}-way head",
                self.data.classes, self.space.head.classes
            )));
        }
        if self.holdout == 0 || self.holdout >= self.data.num_clips {
            return Err(Error::InvalidValue(format!("holdout {} of {} clips", self.holdout, self.data.num_clips)));
        }
        Ok(())
    }

    /// Short hex digest of the configuration (output directory excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// One row of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub most_probable_flops: u64,
    pub mean_loglik: f64,
    pub mean_hinge: f64,
    pub entropy_type: f64,
    pub entropy_channels: f64,
    pub entropy_expansion: f64,
    pub entropy_attention: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub arch: ArchitectureSpec,
    pub derived_flops: u64,
    pub target_flops: u64,
    pub log: Vec<EpochLog>,
    /// Logits at the end of every epoch.
    pub alpha_history: Vec<ArchParams>,
    pub params: ArchParams,
    pub supernet: Supernet,
    pub seed: u64,
    pub elapsed_secs: f64,
}

/// Median FLOPs of `n` uniformly drawn architectures.
pub fn median_flops(space: &SearchSpace, n: usize, seed: u64) -> Result<u64> {
    let uniform = ArchParams::init(space);
    let mut rng = rng_stream(seed, STREAM_TARGET);
    let mut f: Vec<u64> = (0..n.max(1))
        .map(|_| arch_flops(space, &uniform.sample(space, &mut rng).arch))
        .collect::<Result<_>>()?;
    f.sort_unstable();
    Ok(f[f.len() / 2])
}

/// Supernet warm-up followed by alternating architecture and weight steps.
pub fn run_search(config: &RunConfig) -> Result<SearchOutcome> {
    config.validate()?;
    let start = Instant::now();
    let sc = &config.search;
    let space = &config.space;
    let seed = sc.seed;
    let task = SyntheticVideoTask::generate(config.data, seed)?;
    let (heldout, train) = task.split(config.holdout)?;
    let target = match sc.target_flops {
        Some(t) => t,
        None => median_flops(space, 1000, seed)?,
    };

    let snc = SupernetConfig {
        mode: config.pattern_mode,
        expansion_sharing: config.expansion_sharing,
        attention: AttentionConfig::default(),
    };
    let mut supernet = Supernet::new(space, snc, rng_stream(seed, STREAM_INIT).next_u64())?;
    let mut w_opt = OptimState::for_params(sc.weight_optimizer, supernet.params());
    let mut parsec = Parsec::new(space, sc.arch_optimizer);
    let mut sample_rng = rng_stream(seed, STREAM_SAMPLE);
    let mut batch_rng = rng_stream(seed, STREAM_BATCH);

    let mut train_stream = BatchStream::new(train.len(), sc.batch_size);
    let mut heldout_cursor = 0;
    let mut log = Vec::with_capacity(sc.total_epochs);
    let mut alpha_history = Vec::with_capacity(sc.total_epochs);
    let k = sc.samples_per_step;

    for epoch in 0..sc.total_epochs {
        let warm = epoch < sc.warmup_epochs;
        let (mut ll_sum, mut hinge_sum, mut count) = (0.0, 0.0, 0usize);
        for _ in 0..sc.steps_per_epoch {
            let (x, y) = train.batch(&train_stream.next(&mut batch_rng))?;
            let samples = parsec.sample_k(space, k, &mut sample_rng);
            let plans = samples.iter().map(|s| supernet.activate(&s.arch)).collect::<Result<Vec<_>>>()?;
            let costs = samples
                .iter()
                .map(|s| hinge_cost(arch_flops(space, &s.arch)?, target))
                .collect::<Result<Vec<f64>>>()?;

            let weights = if warm {
                vec![1.0 / k as f64; k]
            } else {
                let hidx: Vec<usize> =
                    (0..sc.eval_batch_size).map(|i| (heldout_cursor + i) % heldout.len()).collect();
                heldout_cursor = (heldout_cursor + sc.eval_batch_size) % heldout.len();
                let (hx, hy) = heldout.batch(&hidx)?;
                let mut logliks = Vec::with_capacity(k);
                for plan in &plans {
                    let e = supernet.forward_loss(plan, &hx, &hy, false).map_err(|e| abort(epoch, e))?;
                    ll_sum += mean_loglik(&e.logliks);
                    logliks.push(mean_loglik(&e.logliks) * e.logliks.len() as f64);
                }
                let w = posterior_weights(&logliks, &costs, sc.cost_weight)?;
                parsec.update(&samples, &w)?;
                w
            };

            let mut grads = supernet.zero_grads();
            let mut mask = supernet.empty_mask();
            for (plan, &w) in plans.iter().zip(&weights) {
                let e = supernet.forward_loss(plan, &x, &y, true).map_err(|e| abort(epoch, e))?;
                if warm {
                    ll_sum += mean_loglik(&e.logliks);
                }
                supernet.scatter_grads(&mut grads, plan, &e.grads, w)?;
                supernet.mark(&mut mask, plan)?;
            }
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(abort(epoch, Error::NonFinite("weight gradient".into())));
            }
            supernet.apply(&mut w_opt, &grads, &mask)?;
            hinge_sum += costs.iter().sum::<f64>();
            count += k;
        }
        let mp = parsec.params.most_probable(space);
        let ent = parsec.params.entropies();
        log.push(EpochLog {
            epoch,
            most_probable_flops: arch_flops(space, &mp)?,
            mean_loglik: ll_sum / count.max(1) as f64,
            mean_hinge: hinge_sum / count.max(1) as f64,
            entropy_type: ent[0],
            entropy_channels: ent[1],
            entropy_expansion: ent[2],
            entropy_attention: ent[3],
        });
        alpha_history.push(parsec.params.clone());
    }

    let arch = parsec.params.most_probable(space);
    let derived_flops = arch_flops(space, &arch)?;
    let outcome = SearchOutcome {
        arch,
        derived_flops,
        target_flops: target,
        log,
        alpha_history,
        params: parsec.params.clone(),
        supernet,
        seed,
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &config.out_dir {
        write_search_artifacts(dir, config, &outcome)?;
    }
    Ok(outcome)
}

/// Per-clip log-likelihoods, floored, averaged over the batch.
fn mean_loglik(logliks: &[f64]) -> f64 {
    logliks.iter().map(|l| l.max(LOG_FLOOR)).sum::<f64>() / logliks.len().max(1) as f64
}

/// Endless shuffled mini-batches; reshuffles after each pass.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchStream {
    fn new(len: usize, batch: usize) -> Self {
        BatchStream { order: (0..len).collect(), pos: len, batch: batch.min(len) }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

fn abort(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
        other => other,
    }
}

pub const LOG_COLUMNS: [&str; 8] = [
    "epoch",
    "most_probable_flops",
    "mean_loglik",
    "mean_hinge",
    "entropy_type",
    "entropy_channels",
    "entropy_expansion",
    "entropy_attention",
];

/// Paths written by a search run.
pub struct SearchArtifacts {
    pub arch: PathBuf,
    pub log: PathBuf,
    pub alpha: PathBuf,
    pub supernet: PathBuf,
    pub derived: PathBuf,
    pub manifest: PathBuf,
}

impl SearchArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        SearchArtifacts {
            arch: dir.join("arch.json"),
            log: dir.join("search_log.csv"),
            alpha: dir.join("alpha.jsonl"),
            supernet: dir.join("supernet"),
            derived: dir.join("derived"),
            manifest: dir.join("manifest.json"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub kind: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub space_hash: String,
    pub pattern_mode: PatternMode,
    pub target_flops: Option<u64>,
    pub derived_flops: Option<u64>,
    pub wall_clock_secs: f64,
    pub config: RunConfig,
}

pub fn version_string() -> String {
    format!("nasforge-core {}", env!("CARGO_PKG_VERSION"))
}

/// Alpha snapshot line of `alpha.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaSnapshot {
    pub epoch: usize,
    pub logits: Vec<[Vec<f64>; 4]>,
}

fn write_search_artifacts(dir: &Path, config: &RunConfig, out: &SearchOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let paths = SearchArtifacts::in_dir(dir);
    fs::write(&paths.arch, out.arch.to_json()?)?;

    let mut w = csv::Writer::from_path(&paths.log)?;
    for row in &out.log {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut alpha = fs::File::create(&paths.alpha)?;
    for (epoch, p) in out.alpha_history.iter().enumerate() {
        let line = serde_json::to_string(&AlphaSnapshot { epoch, logits: p.logits.clone() })?;
        writeln!(alpha, "{line}")?;
    }

    let mut ck = out.supernet.to_checkpoint();
    ck.metadata.insert("alpha".into(), serde_json::to_value(&out.params)?);
    ck.metadata.insert("space".into(), serde_json::to_value(&config.space)?);
    ck.save(&paths.supernet)?;
    let derived = out.supernet.extract(&out.arch)?;
    let mut dck = derived.to_checkpoint();
    dck.metadata.insert("arch".into(), serde_json::to_value(&out.arch)?);
    dck.save(&paths.derived)?;

    let manifest = Manifest {
        schema: SCHEMA_VERSION.into(),
        kind: "search".into(),
        version: version_string(),
        config_hash: config.hash(),
        seed: out.seed,
        space_hash: config.space.hash(),
        pattern_mode: config.pattern_mode,
        target_flops: Some(out.target_flops),
        derived_flops: Some(out.derived_flops),
        wall_clock_secs: out.elapsed_secs,
        config: config.clone(),
    };
    fs::write(&paths.manifest, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads back the search log CSV.
pub fn read_search_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if headers != LOG_COLUMNS {
        return Err(Error::Schema(format!("unexpected log columns {headers:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// The most probable architecture stored in a search checkpoint.
pub fn derive_from_checkpoint(path: &Path) -> Result<ArchitectureSpec> {
    let ck = crate::tensor::Checkpoint::load(path)?;
    let alpha: ArchParams = serde_json::from_value(
        ck.metadata.get("alpha").cloned().ok_or_else(|| Error::Checkpoint("no architecture parameters".into()))?,
    )?;
    let space: SearchSpace = serde_json::from_value(
        ck.metadata.get("space").cloned().ok_or_else(|| Error::Checkpoint("no search space".into()))?,
    )?;
    alpha.check(&space)?;
    Ok(alpha.most_probable(&space))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimKind,
    pub holdout: usize,
    pub seed: u64,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            optimizer: OptimKind::sgd(0.05, 0.9, 1e-4),
            holdout: 32,
            seed: 0,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub final_loss: f64,
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Trains `arch` from scratch with SGD and reports accuracies in
/// evaluation mode.
pub fn run_train(space: &SearchSpace, arch: &ArchitectureSpec, task: &SyntheticVideoTask, cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
    let plan = NetPlan::new(space, arch, &AttentionConfig::default())?;
    let (val, train) = task.split(cfg.holdout)?;
    let mut net = Network::init(plan, &mut rng_stream(cfg.seed, STREAM_INIT));
    let mut opt = OptimState::for_params(cfg.optimizer, &net.params);
    let mut rng = rng_stream(cfg.seed, STREAM_BATCH);
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = train.batch(chunk)?;
            let e = net::evaluate(&net.plan, &net.params, &x, &y, BnMode::Batch, true).map_err(|e| abort(epoch, e))?;
            opt.step(&mut net.params, &e.grads)?;
            net.update_running(&e.bn_stats, cfg.bn_momentum)?;
            final_loss = e.loss;
        }
    }
    let eval = |t: &SyntheticVideoTask| -> Result<f64> {
        let idx: Vec<usize> = (0..t.len()).collect();
        let (x, y) = t.batch(&idx)?;
        Ok(accuracy(&net::predict(&net.plan, &net.params, &x, BnMode::Running(&net.running))?, &y))
    };
    let report = TrainReport { epochs: cfg.epochs, train_accuracy: eval(&train)?, val_accuracy: eval(&val)?, final_loss };
    Ok((net, report))
}
