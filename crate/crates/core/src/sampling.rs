//! Positive-pair sampling over view-imbalanced datasets.
//!
//! Every batch consists of same-label (satellite, drone) pairs. Four
//! strategies are available: satellite-anchored, drone-anchored, their
//! half-and-half symmetric combination, and uniform random pairs.
//!
//! Batches are always full. When an epoch's anchor stream runs out partway
//! through a batch, the batch is topped up from a fresh permutation and the
//! next epoch starts with another fresh permutation, so every anchor still
//! appears at least once per epoch.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{CrossViewDataset, ItemId};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SamplePair {
    pub satellite_id: ItemId,
    pub drone_id: ItemId,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    SatelliteAnchored,
    DroneAnchored,
    Random,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct BatchPlan {
    pub pairs: Vec<SamplePair>,
    pub provenance: Vec<Provenance>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&q| q == p).count()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.label).collect()
    }

    pub fn satellite_ids(&self) -> Vec<ItemId> {
        self.pairs.iter().map(|p| p.satellite_id).collect()
    }

    pub fn drone_ids(&self) -> Vec<ItemId> {
        self.pairs.iter().map(|p| p.drone_id).collect()
    }

    fn extend(&mut self, pairs: Vec<SamplePair>, tag: Provenance) {
        self.provenance.extend(std::iter::repeat_n(tag, pairs.len()));
        self.pairs.extend(pairs);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingStrategy {
    Random,
    Satellite,
    Drone,
    Symmetric,
}

impl SamplingStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SamplingStrategy::Random => "random",
            SamplingStrategy::Satellite => "satellite",
            SamplingStrategy::Drone => "drone",
            SamplingStrategy::Symmetric => "symmetric",
        }
    }
}

impl FromStr for SamplingStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "satellite" => Ok(Self::Satellite),
            "drone" => Ok(Self::Drone),
            "symmetric" => Ok(Self::Symmetric),
            other => Err(format!(
                "unknown sampling strategy `{other}` (random|satellite|drone|symmetric)"
            )),
        }
    }
}

/// One pass over the satellite items in random order, each paired with a
/// drone item of its class drawn uniformly (with replacement across epochs).
pub fn satellite_view_epoch(ds: &CrossViewDataset, rng: &mut Rng) -> Vec<SamplePair> {
    let mut anchors: Vec<(ItemId, usize)> = ds
        .classes()
        .iter()
        .flat_map(|c| c.satellite_items.iter().map(move |&id| (id, c.label)))
        .collect();
    rng.shuffle(&mut anchors);
    anchors
        .into_iter()
        .map(|(satellite_id, label)| {
            let drones = &ds.class(label).expect("label from dataset").drone_items;
            SamplePair {
                satellite_id,
                drone_id: drones[rng.below(drones.len())],
                label,
            }
        })
        .collect()
}

/// One pass over all drone items in random order, each paired with a
/// satellite item of its class.
pub fn drone_view_epoch(ds: &CrossViewDataset, rng: &mut Rng) -> Vec<SamplePair> {
    let mut anchors: Vec<(ItemId, usize)> = ds
        .classes()
        .iter()
        .flat_map(|c| c.drone_items.iter().map(move |&id| (id, c.label)))
        .collect();
    rng.shuffle(&mut anchors);
    anchors
        .into_iter()
        .map(|(drone_id, label)| {
            let sats = &ds.class(label).expect("label from dataset").satellite_items;
            let satellite_id = if sats.len() == 1 {
                sats[0]
            } else {
                sats[rng.below(sats.len())]
            };
            SamplePair { satellite_id, drone_id, label }
        })
        .collect()
}

fn random_pair(ds: &CrossViewDataset, rng: &mut Rng) -> SamplePair {
    let class = &ds.classes()[rng.below(ds.num_classes())];
    SamplePair {
        satellite_id: class.satellite_items[rng.below(class.satellite_items.len())],
        drone_id: class.drone_items[rng.below(class.drone_items.len())],
        label: class.label,
    }
}

type EpochFn = fn(&CrossViewDataset, &mut Rng) -> Vec<SamplePair>;

/// An endless stream of pairs produced one permutation at a time.
#[derive(Debug)]
struct PairStream {
    epoch_fn: EpochFn,
    rng: Rng,
    queue: Vec<SamplePair>,
    pos: usize,
}

impl PairStream {
    fn new(epoch_fn: EpochFn, rng: Rng) -> Self {
        Self { epoch_fn, rng, queue: Vec::new(), pos: 0 }
    }

    fn refill(&mut self, ds: &CrossViewDataset) {
        self.queue = (self.epoch_fn)(ds, &mut self.rng);
        self.pos = 0;
    }

    /// Takes `n` pairs, crossing permutation boundaries freely.
    fn take(&mut self, ds: &CrossViewDataset, n: usize) -> Vec<SamplePair> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.queue.len() {
                self.refill(ds);
            }
            let k = (n - out.len()).min(self.queue.len() - self.pos);
            out.extend_from_slice(&self.queue[self.pos..self.pos + k]);
            self.pos += k;
        }
        out
    }

    /// Takes up to `n` pairs from the current pass, starting a new pass if the
    /// previous one is finished. Returns the pairs and whether the pass ended.
    /// A short take is topped up from a throw-away permutation so the result
    /// always has `n` pairs.
    fn take_in_pass(&mut self, ds: &CrossViewDataset, n: usize) -> (Vec<SamplePair>, bool) {
        if self.pos == self.queue.len() {
            self.refill(ds);
        }
        let k = n.min(self.queue.len() - self.pos);
        let mut out = self.queue[self.pos..self.pos + k].to_vec();
        self.pos += k;
        let ended = self.pos == self.queue.len();
        if out.len() < n {
            let extra = (self.epoch_fn)(ds, &mut self.rng);
            out.extend(extra.into_iter().cycle().take(n - k));
        }
        (out, ended)
    }
}

/// Produces training batches for one strategy.
///
/// Epoch lengths: satellite and random epochs cover `ceil(S / B)` batches
/// (`S` = satellite item count); drone epochs cover `ceil(N / B)` batches
/// and symmetric epochs `ceil(N / (B/2))` batches (`N` = drone item count).
#[derive(Debug)]
pub struct BatchSampler<'a> {
    ds: &'a CrossViewDataset,
    strategy: SamplingStrategy,
    batch_size: usize,
    satellite: PairStream,
    drone: PairStream,
    rng: Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(
        ds: &'a CrossViewDataset,
        strategy: SamplingStrategy,
        batch_size: usize,
        rng: &Rng,
    ) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
        }
        if strategy == SamplingStrategy::Symmetric && !batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "symmetric sampling needs an even batch size, got {batch_size}"
            )));
        }
        if ds.num_classes() == 0 {
            return Err(Error::Data("empty dataset".into()));
        }
        Ok(Self {
            ds,
            strategy,
            batch_size,
            satellite: PairStream::new(satellite_view_epoch, rng.fork(rng.stream() * 4 + 1)),
            drone: PairStream::new(drone_view_epoch, rng.fork(rng.stream() * 4 + 2)),
            rng: rng.fork(rng.stream() * 4 + 3),
        })
    }

    pub fn strategy(&self) -> SamplingStrategy {
        self.strategy
    }

    /// All batches of the next epoch.
    pub fn next_epoch(&mut self) -> Vec<BatchPlan> {
        let b = self.batch_size;
        let mut batches = Vec::new();
        match self.strategy {
            SamplingStrategy::Satellite => loop {
                let (pairs, ended) = self.satellite.take_in_pass(self.ds, b);
                let mut plan = BatchPlan::default();
                plan.extend(pairs, Provenance::SatelliteAnchored);
                batches.push(plan);
                if ended {
                    break;
                }
            },
            SamplingStrategy::Drone => loop {
                let (pairs, ended) = self.drone.take_in_pass(self.ds, b);
                let mut plan = BatchPlan::default();
                plan.extend(pairs, Provenance::DroneAnchored);
                batches.push(plan);
                if ended {
                    break;
                }
            },
            SamplingStrategy::Symmetric => loop {
                let sat = self.satellite.take(self.ds, b / 2);
                let (drone, ended) = self.drone.take_in_pass(self.ds, b / 2);
                let mut plan = BatchPlan::default();
                plan.extend(sat, Provenance::SatelliteAnchored);
                plan.extend(drone, Provenance::DroneAnchored);
                batches.push(plan);
                if ended {
                    break;
                }
            },
            SamplingStrategy::Random => {
                let n = self.ds.num_satellite_items().div_ceil(b);
                for _ in 0..n {
                    batches.push(random_pair_batch(self.ds, b, &mut self.rng));
                }
            }
        }
        batches
    }
}

/// `symmetric_batches` as an endless iterator: each batch holds `B/2`
/// satellite-anchored pairs followed by `B/2` drone-anchored pairs.
pub fn symmetric_batches<'a>(
    ds: &'a CrossViewDataset,
    batch_size: usize,
    rng: &Rng,
) -> Result<impl Iterator<Item = BatchPlan> + 'a> {
    let mut sampler = BatchSampler::new(ds, SamplingStrategy::Symmetric, batch_size, rng)?;
    Ok(std::iter::from_fn(move || Some(sampler.next_epoch())).flatten())
}

/// One batch of `batch_size` positive pairs with classes drawn uniformly.
pub fn random_pair_batch(ds: &CrossViewDataset, batch_size: usize, rng: &mut Rng) -> BatchPlan {
    let mut plan = BatchPlan::default();
    let pairs = (0..batch_size).map(|_| random_pair(ds, rng)).collect();
    plan.extend(pairs, Provenance::Random);
    plan
}

/// Endless stream of uniform random-pair batches.
pub fn random_pair_batches<'a>(
    ds: &'a CrossViewDataset,
    batch_size: usize,
    rng: &Rng,
) -> impl Iterator<Item = BatchPlan> + 'a {
    let mut rng = rng.clone();
    std::iter::from_fn(move || Some(random_pair_batch(ds, batch_size, &mut rng)))
}
