//! Class-imbalanced synthetic segmentation task.
//!
//! Each case is Gaussian background noise plus a few soft-edged ellipses. The
//! mask is the union of the hard ellipses; intensity ramps across the boundary
//! so rim pixels sit close to the noise floor.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::train::data::{Dataset, Sample, Split};

/// Attempts per case before the budget is declared infeasible.
const MAX_ATTEMPTS: usize = 64;
/// Smallest semi-axis, in pixels.
const MIN_AXIS: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Upper bound on the foreground fraction of every mask.
    pub foreground_budget: f64,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Peak blob intensity above background in the strongest channel.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Width in pixels of the intensity ramp across a blob boundary.
    pub rim_width: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            height: 64,
            width: 64,
            channels: 4,
            n_train: 140,
            n_val: 20,
            n_test: 40,
            foreground_budget: 0.05,
            min_blobs: 1,
            max_blobs: 3,
            contrast: 1.0,
            noise_sigma: 0.5,
            rim_width: 1.5,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("image extent and channels must be ≥ 1".into()));
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return Err(Error::Config(format!(
                "blob count range {}..={} is empty or starts at 0",
                self.min_blobs, self.max_blobs
            )));
        }
        if !(self.foreground_budget > 0.0 && self.foreground_budget <= 0.10) {
            return Err(Error::Config(format!(
                "foreground budget must lie in (0, 0.10], got {}",
                self.foreground_budget
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.rim_width > 0.0) || !self.contrast.is_finite() {
            return Err(Error::Config("noise σ must be ≥ 0, rim width > 0, contrast finite".into()));
        }
        let budget_px = self.foreground_budget * (self.height * self.width) as f64;
        let smallest = std::f64::consts::PI * MIN_AXIS * MIN_AXIS * self.min_blobs as f64;
        if smallest > budget_px {
            return Err(Error::Config(format!(
                "{} blobs need at least {smallest:.1} foreground pixels, budget allows {budget_px:.1}",
                self.min_blobs
            )));
        }
        if MIN_AXIS * 2.0 + 2.0 > self.height.min(self.width) as f64 {
            return Err(Error::Config("image is too small to hold a blob".into()));
        }
        Ok(())
    }
}

/// A rotated ellipse in pixel coordinates (row, column of pixel centers).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Normalised squared radius: ≤ 1 inside.
    pub fn level(&self, r: f64, c: f64) -> f64 {
        let (dy, dx) = (r - self.cy, c - self.cx);
        let (s, co) = self.theta.sin_cos();
        let u = (dx * co + dy * s) / self.a;
        let v = (-dx * s + dy * co) / self.b;
        u * u + v * v
    }

    pub fn contains(&self, r: f64, c: f64) -> bool {
        self.level(r, c) <= 1.0
    }

    /// Approximate signed distance to the boundary, positive inside.
    fn signed_distance(&self, r: f64, c: f64) -> f64 {
        (1.0 - self.level(r, c).sqrt()) * self.a.min(self.b)
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b
    }
}

/// A generated case before conversion to tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub id: String,
    pub blobs: Vec<Ellipse>,
    /// `[C, H, W]` row-major
    pub image: Vec<f64>,
    /// `[H, W]` row-major
    pub mask: Vec<bool>,
}

impl SyntheticCase {
    pub fn to_sample<T: Scalar>(&self, cfg: &SyntheticTaskConfig) -> Sample<T> {
        let (h, w) = (cfg.height, cfg.width);
        let image = Tensor::from_vec(
            vec![cfg.channels, h, w],
            self.image.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
        .expect("image size");
        let mask = Tensor::from_vec(
            vec![1, h, w],
            self.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect(),
        )
        .expect("mask size");
        Sample {
            id: self.id.clone(),
            image,
            mask,
        }
    }
}

pub fn rasterize(blobs: &[Ellipse], h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            mask[r * w + c] = blobs.iter().any(|e| e.contains(r as f64, c as f64));
        }
    }
    mask
}

fn case_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream_id() << 32) | index as u64);
    rng
}

fn sample_blobs(cfg: &SyntheticTaskConfig, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let k = rng.gen_range(cfg.min_blobs..=cfg.max_blobs);
    let budget_px = cfg.foreground_budget * h * w;
    // total target area between 30% and 90% of the budget, split unevenly
    let total = budget_px * rng.gen_range(0.3..0.9);
    let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    weights
        .iter()
        .map(|wt| {
            let area = (total * wt / wsum).max(std::f64::consts::PI * MIN_AXIS * MIN_AXIS);
            let aspect: f64 = rng.gen_range(0.5..2.0);
            let a = (area / std::f64::consts::PI * aspect).sqrt().max(MIN_AXIS);
            let b = (area / std::f64::consts::PI / a).max(MIN_AXIS);
            let reach = a.max(b) + 1.0;
            let lo_y = reach.min(h / 2.0);
            let lo_x = reach.min(w / 2.0);
            Ellipse {
                cy: rng.gen_range(lo_y..=(h - 1.0 - lo_y).max(lo_y)),
                cx: rng.gen_range(lo_x..=(w - 1.0 - lo_x).max(lo_x)),
                a,
                b,
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            }
        })
        .collect()
}

/// Generates case `index` of `split`; depends only on `(cfg, split, index)`.
pub fn generate_case(cfg: &SyntheticTaskConfig, split: Split, index: usize) -> Result<SyntheticCase> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = case_rng(cfg.seed, split, index);
    let limit = (cfg.foreground_budget * (h * w) as f64).floor() as usize;
    for _ in 0..MAX_ATTEMPTS {
        let blobs = sample_blobs(cfg, &mut rng);
        let mask = rasterize(&blobs, h, w);
        let fg = mask.iter().filter(|&&m| m).count();
        if fg == 0 || fg > limit {
            continue;
        }
        // per-case channel gains so no channel is uniformly informative
        let gains: Vec<f64> = (0..cfg.channels)
            .map(|ch| cfg.contrast * (ch + 1) as f64 / cfg.channels as f64 * rng.gen_range(0.6..1.0))
            .collect();
        let mut image = vec![0.0; cfg.channels * h * w];
        for r in 0..h {
            for c in 0..w {
                let d = blobs
                    .iter()
                    .map(|e| e.signed_distance(r as f64, c as f64))
                    .fold(f64::NEG_INFINITY, f64::max);
                let soft = 1.0 / (1.0 + (-d / cfg.rim_width).exp());
                for (ch, g) in gains.iter().enumerate() {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    image[(ch * h + r) * w + c] = g * soft + cfg.noise_sigma * noise;
                }
            }
        }
        return Ok(SyntheticCase {
            id: format!("{}_{index:04}", split.name()),
            blobs,
            image,
            mask,
        });
    }
    Err(Error::Config(format!(
        "could not place blobs within a foreground budget of {} after {MAX_ATTEMPTS} attempts",
        cfg.foreground_budget
    )))
}

/// Generates all three splits.
pub fn gen_synthetic<T: Scalar>(cfg: &SyntheticTaskConfig) -> Result<Dataset<T>> {
    cfg.validate()?;
    let split = |s: Split| -> Result<Vec<Sample<T>>> {
        (0..cfg.count(s))
            .map(|i| generate_case(cfg, s, i).map(|c| c.to_sample(cfg)))
            .collect()
    };
    Ok(Dataset {
        train: split(Split::Train)?,
        val: split(Split::Val)?,
        test: split(Split::Test)?,
    })
}
