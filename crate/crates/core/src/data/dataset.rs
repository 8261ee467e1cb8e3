//! Deterministic indexed dataset over synthetic identities.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{keypoints_to_heatmaps, render_figure, Identity};
use super::{sample_pose, PoseConstraints, Skeleton, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable capping the number of data worker threads.
pub const THREADS_ENV: &str = "BIGRAPH_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a sequence of integers into one stream seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

const IDENTITY_STREAM: u64 = 0x1D;
const POSE_STREAM: u64 = 0x90;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub heatmap_radius: f64,
    pub constraints: PoseConstraints,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            n_train: 200,
            n_test: 50,
            seed: 0,
            heatmap_radius: 2.0,
            constraints: PoseConstraints::default(),
        }
    }
}

/// Everything needed to re-render one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub split: Split,
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub heatmap_radius: f64,
    pub identity: Identity,
    pub pose_a: Skeleton,
    pub pose_b: Skeleton,
}

impl SampleRecord {
    pub fn render(&self) -> Result<PoseSample> {
        let (h, w) = (self.height, self.width);
        let (i_a, _) = render_figure(&self.pose_a, &self.identity, h, w);
        let (i_b, mask_b) = render_figure(&self.pose_b, &self.identity, h, w);
        let (p_a, ca) = keypoints_to_heatmaps(&self.pose_a, h, w, self.heatmap_radius)?;
        let (p_b, cb) = keypoints_to_heatmaps(&self.pose_b, h, w, self.heatmap_radius)?;
        let (joints_b, _) = self.pose_b.pixels(h, w);
        Ok(PoseSample {
            i_a,
            p_a,
            i_b,
            p_b,
            mask_b,
            joints_b,
            identity: self.identity.id,
            clamped: ca || cb,
        })
    }
}

/// One rendered source/target pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    /// `[3, h, w]` in `[-1, 1]`.
    pub i_a: Tensor<f32>,
    /// `[18, h, w]` binary heatmaps.
    pub p_a: Tensor<f32>,
    pub i_b: Tensor<f32>,
    pub p_b: Tensor<f32>,
    /// `[1, h, w]` foreground of `I_b`.
    pub mask_b: Tensor<f32>,
    /// Target joint pixels as `(row, col)`.
    pub joints_b: [[usize; 2]; NUM_JOINTS],
    pub identity: u64,
    /// Set when a joint fell outside the frame and was clamped.
    pub clamped: bool,
}

/// Samples stacked along a leading batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub i_a: Tensor<f32>,
    pub p_a: Tensor<f32>,
    pub i_b: Tensor<f32>,
    pub p_b: Tensor<f32>,
    pub mask_b: Tensor<f32>,
    pub joints_b: Vec<[[usize; 2]; NUM_JOINTS]>,
}

impl Batch {
    pub fn from_samples(samples: &[PoseSample]) -> Result<Self> {
        let stack = |f: fn(&PoseSample) -> &Tensor<f32>| {
            Tensor::stack(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
        };
        Ok(Self {
            i_a: stack(|s| &s.i_a)?,
            p_a: stack(|s| &s.p_a)?,
            i_b: stack(|s| &s.i_b)?,
            p_b: stack(|s| &s.p_b)?,
            mask_b: stack(|s| &s.mask_b)?,
            joints_b: samples.iter().map(|s| s.joints_b).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.joints_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints_b.is_empty()
    }
}

/// Worker thread count: `BIGRAPH_THREADS` when set, else the available
/// parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Indexed view of the synthetic data. A `(seed, split, index)` triple
/// fixes a sample. Train identities are `0..n_train`, test identities
/// `n_train..n_train + n_test`; sample `i` of a split uses identity
/// `i mod n` of that split and its own pair of freshly drawn poses.
#[derive(Clone, Debug)]
pub struct Dataset {
    config: DataConfig,
}

impl Dataset {
    pub fn new(mut config: DataConfig) -> Result<Self> {
        if config.n_train == 0 || config.n_test == 0 {
            return Err(Error::Config("both splits need at least one identity".into()));
        }
        if config.height < 32 || config.width < 16 {
            return Err(Error::Config(format!(
                "image size {}x{} is below 32x16",
                config.height, config.width
            )));
        }
        if !config.height.is_multiple_of(4) || !config.width.is_multiple_of(4) {
            return Err(Error::Config("image sides must be multiples of 4".into()));
        }
        if config.heatmap_radius.is_nan() || config.heatmap_radius < 1.0 {
            return Err(Error::Config("heatmap radius must be at least 1".into()));
        }
        config.constraints.height = config.height;
        config.constraints.width = config.width;
        Ok(Self { config })
    }

    pub fn config(&self) -> &DataConfig {
        &self.config
    }

    pub fn identity(&self, id: u64) -> Identity {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, IDENTITY_STREAM, id]));
        Identity::sample(id, &mut rng)
    }

    pub fn identity_of(&self, split: Split, index: usize) -> u64 {
        match split {
            Split::Train => (index % self.config.n_train) as u64,
            Split::Test => (self.config.n_train + index % self.config.n_test) as u64,
        }
    }

    pub fn record(&self, split: Split, index: usize) -> Result<SampleRecord> {
        let c = &self.config;
        let identity = self.identity(self.identity_of(split, index));
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&[c.seed, POSE_STREAM, split.tag(), index as u64]));
        let pose_a = sample_pose(&mut rng, &c.constraints, &identity.build)?;
        let pose_b = sample_pose(&mut rng, &c.constraints, &identity.build)?;
        Ok(SampleRecord {
            seed: c.seed,
            split,
            index,
            height: c.height,
            width: c.width,
            heatmap_radius: c.heatmap_radius,
            identity,
            pose_a,
            pose_b,
        })
    }

    pub fn sample(&self, split: Split, index: usize) -> Result<PoseSample> {
        self.record(split, index)?.render()
    }

    /// Render `indices` on up to `threads` scoped workers. Results are
    /// placed by position, so the batch does not depend on scheduling.
    pub fn samples(&self, split: Split, indices: &[usize], threads: usize) -> Result<Vec<PoseSample>> {
        let threads = threads.clamp(1, indices.len().max(1));
        if threads == 1 {
            return indices.iter().map(|&i| self.sample(split, i)).collect();
        }
        let chunk = indices.len().div_ceil(threads);
        let parts: Vec<Result<Vec<PoseSample>>> = std::thread::scope(|s| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|&i| self.sample(split, i)).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("data worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(indices.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn batch(&self, split: Split, indices: &[usize], threads: usize) -> Result<Batch> {
        Batch::from_samples(&self.samples(split, indices, threads)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threaded_batches_match_serial() {
        let d = Dataset::new(DataConfig::default()).unwrap();
        let idx: Vec<usize> = (10..17).collect();
        let a = d.samples(Split::Train, &idx, 1).unwrap();
        let b = d.samples(Split::Train, &idx, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splits_use_disjoint_identities() {
        let d = Dataset::new(DataConfig::default()).unwrap();
        for i in 0..400 {
            assert!(d.identity_of(Split::Train, i) < 200);
            assert!(d.identity_of(Split::Test, i) >= 200);
        }
    }

    #[test]
    fn derive_seed_is_order_sensitive() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
    }
}
