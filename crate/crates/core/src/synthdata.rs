//! Deterministic synthetic two-platform data.
//!
//! Each class owns a latent prototype `c_y ~ N(0, I_m)`. Each platform has a
//! fixed map `T_k(v) = tanh(A_k v)` with a random `p×m` matrix `A_k`
//! (entries `N(0, 1/m)`). A class contributes one satellite item
//! `T_1(c_y) + ε` and `n` drone items `T_2(c_y + δ_i) + ε`, with latent
//! jitter `δ_i ~ N(0, jitter²)` and observation noise `ε ~ N(0, noise²)`.
//! The tanh keeps the two platforms from being linearly related.

use serde::{Deserialize, Serialize};

use crate::dataset::{CrossViewDataset, Item, ItemId, Platform};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::Rng;

/// Class partition into train and test labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassSplit {
    /// The first `train` labels train, the remaining `total - train` test.
    pub fn first(train: usize, total: usize) -> Self {
        Self {
            train: (0..train.min(total)).collect(),
            test: (train.min(total)..total).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    /// Drone items per class; a single entry applies to every class.
    pub drone_per_class: Vec<usize>,
    pub noise_sigma: f64,
    pub jitter_sigma: f64,
    pub platform_transform_seed: u64,
    pub split: ClassSplit,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 60,
            latent_dim: 8,
            input_dim: 32,
            drone_per_class: vec![12],
            noise_sigma: 0.05,
            jitter_sigma: 0.3,
            platform_transform_seed: 7,
            split: ClassSplit::first(30, 60),
        }
    }
}

impl SynthSpec {
    pub fn drone_count(&self, label: usize) -> usize {
        if self.drone_per_class.len() == 1 {
            self.drone_per_class[0]
        } else {
            self.drone_per_class[label]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {c}")));
        }
        if self.latent_dim == 0 || self.input_dim == 0 {
            return Err(Error::Config("latent and input dimensions must be positive".into()));
        }
        if self.drone_per_class.len() != 1 && self.drone_per_class.len() != c {
            return Err(Error::Config(format!(
                "drone_per_class needs 1 or {c} entries, got {}",
                self.drone_per_class.len()
            )));
        }
        if self.drone_per_class.contains(&0) {
            return Err(Error::Config("every class needs at least one drone item".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.jitter_sigma >= 0.0) {
            return Err(Error::Config("noise and jitter must be non-negative".into()));
        }
        self.validate_split()
    }

    fn validate_split(&self) -> Result<()> {
        let c = self.num_classes;
        let mut seen = vec![0u8; c];
        for &l in self.split.train.iter().chain(&self.split.test) {
            if l >= c {
                return Err(Error::Config(format!("split label {l} outside [0, {c})")));
            }
            seen[l] += 1;
        }
        if let Some(l) = seen.iter().position(|&n| n > 1) {
            return Err(Error::Config(format!("class {l} appears more than once in the split")));
        }
        if let Some(l) = seen.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("class {l} is in neither split")));
        }
        Ok(())
    }
}

/// Latent-side facts about a generated dataset, for checking separability.
#[derive(Clone, Debug)]
pub struct GenerationTrace {
    pub prototypes: Vec<Vec<f64>>,
    /// `(item id, label, latent point)`; satellite items sit on the prototype.
    pub latents: Vec<(ItemId, usize, Vec<f64>)>,
    pub satellite_map: DenseMatrix,
    pub drone_map: DenseMatrix,
}

impl GenerationTrace {
    /// Fraction of items whose latent point is closest to its own prototype.
    pub fn nearest_prototype_accuracy(&self) -> f64 {
        let hits = self
            .latents
            .iter()
            .filter(|(_, label, z)| nearest(&self.prototypes, z) == *label)
            .count();
        hits as f64 / self.latents.len() as f64
    }
}

fn nearest(points: &[Vec<f64>], z: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let d: f64 = p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

fn platform_map(spec: &SynthSpec, platform: u64) -> DenseMatrix {
    let mut rng = Rng::new(spec.platform_transform_seed, platform);
    let scale = 1.0 / (spec.latent_dim as f64).sqrt();
    DenseMatrix::from_fn(spec.input_dim, spec.latent_dim, |_, _| rng.normal() * scale)
}

fn apply_map(map: &DenseMatrix, z: &[f64], noise: f64, rng: &mut Rng) -> Vec<f64> {
    (0..map.rows())
        .map(|r| {
            let pre: f64 = map.row(r).iter().zip(z).map(|(a, b)| a * b).sum();
            let eps = if noise > 0.0 { rng.normal() * noise } else { 0.0 };
            pre.tanh() + eps
        })
        .collect()
}

/// Generates the full dataset (all classes) and its latent trace.
pub fn generate_with_trace(spec: &SynthSpec, rng: &Rng) -> Result<(CrossViewDataset, GenerationTrace)> {
    spec.validate()?;
    let sat_map = platform_map(spec, 1);
    let drone_map = platform_map(spec, 2);
    let mut items = Vec::new();
    let mut prototypes = Vec::with_capacity(spec.num_classes);
    let mut latents = Vec::new();
    let mut next_id: ItemId = 0;
    for label in 0..spec.num_classes {
        let mut r = rng.fork(1000 + label as u64);
        let proto: Vec<f64> = (0..spec.latent_dim).map(|_| r.normal()).collect();

        items.push(Item {
            id: next_id,
            label,
            platform: Platform::Satellite,
            features: apply_map(&sat_map, &proto, spec.noise_sigma, &mut r),
        });
        latents.push((next_id, label, proto.clone()));
        next_id += 1;

        for _ in 0..spec.drone_count(label) {
            let z: Vec<f64> = proto
                .iter()
                .map(|&v| if spec.jitter_sigma > 0.0 { v + r.normal() * spec.jitter_sigma } else { v })
                .collect();
            items.push(Item {
                id: next_id,
                label,
                platform: Platform::Drone,
                features: apply_map(&drone_map, &z, spec.noise_sigma, &mut r),
            });
            latents.push((next_id, label, z));
            next_id += 1;
        }
        prototypes.push(proto);
    }
    let ds = CrossViewDataset::from_items(spec.input_dim, items)?;
    Ok((
        ds,
        GenerationTrace { prototypes, latents, satellite_map: sat_map, drone_map },
    ))
}

pub fn generate_dataset(spec: &SynthSpec, rng: &Rng) -> Result<CrossViewDataset> {
    generate_with_trace(spec, rng).map(|(ds, _)| ds)
}

/// Class-disjoint train/test partition following `spec.split`.
pub fn split_train_test(
    ds: &CrossViewDataset,
    spec: &SynthSpec,
) -> Result<(CrossViewDataset, CrossViewDataset)> {
    spec.validate_split()?;
    Ok((ds.restrict(&spec.split.train)?, ds.restrict(&spec.split.test)?))
}
