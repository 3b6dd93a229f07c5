//! Synthetic motion-direction clips.
//!
//! Each clip shows one Gaussian blob drifting at constant speed; the class
//! is the direction (right, left, down, up). Every frame alone is
//! uninformative, so a model needs temporal context to do better than
//! chance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GENERATOR_RULE: &str = "moving-blob-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_clips: usize,
    pub frames: usize,
    pub spatial: usize,
    pub classes: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Blob displacement per frame, in pixels.
    pub speed: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { num_clips: 256, frames: 4, spatial: 8, classes: 4, noise: 0.0, speed: 1.0 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes != 2 && self.classes != 4 {
            return Err(Error::InvalidValue(format!("classes must be 2 or 4, got {}", self.classes)));
        }
        if self.frames < 4 {
            return Err(Error::InvalidValue(format!("need at least 4 frames, got {}", self.frames)));
        }
        if self.spatial < 8 {
            return Err(Error::InvalidValue(format!("spatial size {} is too small for the blob (< 8)", self.spatial)));
        }
        if self.num_clips == 0 {
            return Err(Error::InvalidValue("empty dataset".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::InvalidValue("noise must be >= 0 and speed > 0".into()));
        }
        let travel = self.speed * (self.frames - 1) as f64;
        if travel > self.spatial as f64 - 3.0 {
            return Err(Error::InvalidValue(format!(
                "blob travels {travel} px, which does not fit in {} px",
                self.spatial
            )));
        }
        Ok(())
    }
}

/// Unit displacement of each class: right, left, down, up.
pub fn direction(class: usize) -> (f64, f64) {
    match class {
        0 => (1.0, 0.0),
        1 => (-1.0, 0.0),
        2 => (0.0, 1.0),
        _ => (0.0, -1.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideoTask {
    /// `[N, 3, T, S, S]`.
    pub clips: Tensor,
    pub labels: Vec<usize>,
    pub config: DataConfig,
    pub seed: u64,
}

impl SyntheticVideoTask {
    pub fn generate(config: DataConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..config.num_clips).map(|i| i % config.classes).collect();
        labels.shuffle(&mut rng);
        let (t, s) = (config.frames, config.spatial);
        let frame = s * s;
        let clip = 3 * t * frame;
        let mut data = vec![0.0; config.num_clips * clip];
        let noise = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let sigma = 1.0;
        let travel = config.speed * (t - 1) as f64;
        for (n, &label) in labels.iter().enumerate() {
            let (dx, dy) = direction(label);
            // start so that the whole path stays at least 1 px inside
            let lo = 1.0;
            let hi = s as f64 - 2.0;
            let pick = |rng: &mut ChaCha8Rng, d: f64| {
                let (a, b) = if d > 0.0 {
                    (lo, hi - travel)
                } else if d < 0.0 {
                    (lo + travel, hi)
                } else {
                    (lo, hi)
                };
                rng.random_range(a..=b)
            };
            let x0 = pick(&mut rng, dx);
            let y0 = pick(&mut rng, dy);
            let colour: [f64; 3] = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
            for f in 0..t {
                let cx = x0 + dx * config.speed * f as f64;
                let cy = y0 + dy * config.speed * f as f64;
                for yy in 0..s {
                    for xx in 0..s {
                        let r2 = (xx as f64 - cx).powi(2) + (yy as f64 - cy).powi(2);
                        let v = (-r2 / (2.0 * sigma * sigma)).exp();
                        for (c, col) in colour.iter().enumerate() {
                            data[n * clip + (c * t + f) * frame + yy * s + xx] = col * v;
                        }
                    }
                }
            }
        }
        if config.noise > 0.0 {
            for v in &mut data {
                *v += noise.sample(&mut rng);
            }
        }
        let clips = Tensor::new(vec![config.num_clips, 3, t, s, s], data)?;
        Ok(SyntheticVideoTask { clips, labels, config, seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.config.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Clips and labels at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let shape = self.clips.shape();
        let per = shape[1..].iter().product::<usize>();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Shape(format!("clip {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.clips.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        Ok((Tensor::new(out_shape, data)?, labels))
    }

    /// First `n` clips and the rest.
    pub fn split(&self, n: usize) -> Result<(SyntheticVideoTask, SyntheticVideoTask)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidValue(format!("cannot split {} clips at {n}", self.len())));
        }
        let take = |idx: Vec<usize>| -> Result<SyntheticVideoTask> {
            let (clips, labels) = self.batch(&idx)?;
            let config = DataConfig { num_clips: idx.len(), ..self.config };
            Ok(SyntheticVideoTask { clips, labels, config, seed: self.seed })
        };
        Ok((take((0..n).collect())?, take((n..self.len()).collect())?))
    }
}

/// Direction guess from the displacement of the intensity centroid between
/// the first and last frame.
pub fn centroid_direction(clip: &[f64], frames: usize, spatial: usize) -> usize {
    let frame = spatial * spatial;
    let centroid = |f: usize| {
        let (mut m, mut x, mut y) = (0.0, 0.0, 0.0);
        for c in 0..3 {
            let base = (c * frames + f) * frame;
            for yy in 0..spatial {
                for xx in 0..spatial {
                    let v = clip[base + yy * spatial + xx].max(0.0);
                    m += v;
                    x += v * xx as f64;
                    y += v * yy as f64;
                }
            }
        }
        (x / m, y / m)
    };
    let (x0, y0) = centroid(0);
    let (x1, y1) = centroid(frames - 1);
    let (dx, dy) = (x1 - x0, y1 - y0);
    if dx.abs() >= dy.abs() {
        if dx >= 0.0 {
            0
        } else {
            1
        }
    } else if dy >= 0.0 {
        2
    } else {
        3
    }
}
