//! Training loop for the two-branch network: instance loss (or a triplet
//! variant), cross-view and optional intra-view DWDR, sampling strategies,
//! SGD with a step schedule.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::dataset::{CrossViewDataset, ItemId, Platform};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::losses::{
    dwdr_loss, instance_loss, pearson_matrix, total_loss, triplet_loss, DwdrConfig, TripletConfig,
    TripletVariant,
};
use crate::matrix::DenseMatrix;
use crate::model::{encoder_forward, ClassifierNodes, EncoderNodes, Model, ModelConfig, RetrievalFeature};
use crate::optim::{LrSchedule, OptimState, ParamGroup};
use crate::retrieval::EmbeddingSet;
use crate::rng::Rng;
use crate::sampling::{BatchPlan, BatchSampler, SamplingStrategy};

const STREAM_INIT: u64 = 0;
const STREAM_SAMPLER: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_NOISE: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossArm {
    InstanceOnly,
    DwdrOnly,
    InstancePlusDwdr,
    TripletPlusDwdr,
    SoftMarginPlusDwdr,
}

impl LossArm {
    pub const ALL: [LossArm; 5] = [
        LossArm::InstanceOnly,
        LossArm::DwdrOnly,
        LossArm::InstancePlusDwdr,
        LossArm::TripletPlusDwdr,
        LossArm::SoftMarginPlusDwdr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossArm::InstanceOnly => "instance_only",
            LossArm::DwdrOnly => "dwdr_only",
            LossArm::InstancePlusDwdr => "instance_plus_dwdr",
            LossArm::TripletPlusDwdr => "triplet_plus_dwdr",
            LossArm::SoftMarginPlusDwdr => "softmargin_plus_dwdr",
        }
    }

    pub fn uses_classifier(self) -> bool {
        matches!(self, LossArm::InstanceOnly | LossArm::InstancePlusDwdr)
    }

    pub fn uses_dwdr(self) -> bool {
        self != LossArm::InstanceOnly
    }

    fn triplet_variant(self) -> Option<TripletVariant> {
        match self {
            LossArm::TripletPlusDwdr => Some(TripletVariant::HardMargin),
            LossArm::SoftMarginPlusDwdr => Some(TripletVariant::SoftMargin),
            _ => None,
        }
    }
}

impl FromStr for LossArm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        LossArm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown loss arm `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub sampling: SamplingStrategy,
    pub arm: LossArm,
    pub dwdr: DwdrConfig,
    pub triplet: TripletConfig,
    /// Standard deviation of the input noise used for intra-view copies.
    pub intra_noise_sigma: f64,
    pub model: ModelConfig,
    pub retrieval_feature: RetrievalFeature,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            decay_epoch: 40,
            decay_factor: 0.1,
            lr_backbone: 0.015,
            lr_classifier: 0.15,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 16,
            sampling: SamplingStrategy::Symmetric,
            arm: LossArm::InstancePlusDwdr,
            dwdr: DwdrConfig::default(),
            triplet: TripletConfig::default(),
            intra_noise_sigma: 0.05,
            model: ModelConfig::default(),
            retrieval_feature: RetrievalFeature::Embedding,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dwdr.validate()?;
        let positive = [
            ("lr_backbone", self.lr_backbone),
            ("lr_classifier", self.lr_classifier),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::Config("decay_factor must be positive".into()));
        }
        if !(self.intra_noise_sigma >= 0.0) {
            return Err(Error::Config("intra_noise_sigma must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.sampling == SamplingStrategy::Symmetric && !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config("symmetric sampling needs an even batch_size".into()));
        }
        if self.arm.uses_dwdr() && !self.dwdr.cross_view && !self.dwdr.intra_view {
            return Err(Error::Config(format!(
                "arm {} needs cross_view or intra_view DWDR enabled",
                self.arm.name()
            )));
        }
        let m = &self.model;
        if m.hidden_dim == 0 || m.embed_dim == 0 || m.classifier_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", m.dropout)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            epochs: self.epochs,
            decay_epoch: self.decay_epoch,
            decay_factor: self.decay_factor,
            lr_backbone: self.lr_backbone,
            lr_classifier: self.lr_classifier,
        }
    }
}

/// Nodes of one training step's graph.
#[derive(Clone, Debug)]
pub struct Objective {
    /// Encoder parameter nodes read by the satellite and drone branches.
    pub branch_encoders: [EncoderNodes; 2],
    pub classifier: Option<ClassifierNodes>,
    pub f_satellite: NodeId,
    pub f_drone: NodeId,
    /// Instance loss, or the triplet loss for triplet arms.
    pub l_main: Option<NodeId>,
    pub l_dwdr: Option<NodeId>,
    /// Cross-view Pearson matrix of the batch.
    pub rho: NodeId,
    pub total: NodeId,
}

/// For each row, the next row (cyclically) with a different label.
fn negative_permutation(labels: &[usize]) -> Result<DenseMatrix> {
    let b = labels.len();
    let mut p = DenseMatrix::zeros(b, b);
    for i in 0..b {
        let j = (1..b)
            .map(|k| (i + k) % b)
            .find(|&j| labels[j] != labels[i])
            .ok_or_else(|| Error::DegenerateBatch("triplet loss needs at least two labels in a batch".into()))?;
        p.set(i, j, 1.0);
    }
    Ok(p)
}

fn add_noise(x: &DenseMatrix, sigma: f64, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) + sigma * rng.normal())
}

/// Builds the training objective for one batch.
///
/// `labels` are class indices in `[0, C)`. The classifier runs in train
/// mode, so its running statistics are updated; dropout masks come from
/// `dropout_rng` and intra-view noise from `noise_rng`.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    g: &mut Graph,
    model: &mut Model,
    cfg: &TrainConfig,
    x_satellite: &DenseMatrix,
    x_drone: &DenseMatrix,
    labels: &[usize],
    dropout_rng: &mut Rng,
    noise_rng: &mut Rng,
) -> Result<Objective> {
    let enc = model.encoder.bind(g);
    let xs = g.constant(x_satellite.clone());
    let xd = g.constant(x_drone.clone());
    let f_satellite = encoder_forward(g, &enc, xs)?;
    let f_drone = encoder_forward(g, &enc, xd)?;
    let rho = pearson_matrix(g, f_satellite, f_drone, cfg.dwdr.eps)?;

    let mut classifier = None;
    let l_main = if cfg.arm.uses_classifier() {
        let nodes = model.classifier.bind(g);
        let zs = model.classifier.forward(g, &nodes, f_satellite, Mode::Train, dropout_rng)?;
        let zd = model.classifier.forward(g, &nodes, f_drone, Mode::Train, dropout_rng)?;
        classifier = Some(nodes);
        Some(instance_loss(g, zs.logits, zd.logits, labels)?)
    } else if let Some(variant) = cfg.arm.triplet_variant() {
        let tcfg = TripletConfig { variant, ..cfg.triplet };
        let perm = g.constant(negative_permutation(labels)?);
        let neg_drone = g.matmul(perm, f_drone)?;
        let neg_sat = g.matmul(perm, f_satellite)?;
        let a = triplet_loss(g, f_satellite, f_drone, neg_drone, &tcfg)?;
        let b = triplet_loss(g, f_drone, f_satellite, neg_sat, &tcfg)?;
        Some(g.add(a, b)?)
    } else {
        None
    };

    let l_dwdr = if cfg.arm.uses_dwdr() {
        let mut terms = Vec::new();
        if cfg.dwdr.cross_view {
            terms.push(dwdr_loss(g, f_satellite, f_drone, &cfg.dwdr)?);
        }
        if cfg.dwdr.intra_view {
            for (x, f) in [(x_satellite, f_satellite), (x_drone, f_drone)] {
                let xn = g.constant(add_noise(x, cfg.intra_noise_sigma, noise_rng));
                let fn_ = encoder_forward(g, &enc, xn)?;
                terms.push(dwdr_loss(g, f, fn_, &cfg.dwdr)?);
            }
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Some(acc)
    } else {
        None
    };

    let total = match (l_main, l_dwdr) {
        (Some(m), Some(d)) => total_loss(g, m, d, cfg.dwdr.alpha)?,
        (Some(m), None) => m,
        (None, Some(d)) => d,
        (None, None) => unreachable!("every arm has at least one loss term"),
    };
    Ok(Objective {
        branch_encoders: [enc, enc],
        classifier,
        f_satellite,
        f_drone,
        l_main,
        l_dwdr,
        rho,
        total,
    })
}

/// Mean absolute off-diagonal entry of a square matrix.
pub fn mean_abs_offdiag(m: &DenseMatrix) -> f64 {
    let d = m.rows();
    if d < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += m.get(i, j).abs();
            }
        }
    }
    s / (d * d - d) as f64
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch mean of the instance loss (triplet loss for triplet arms).
    pub l_id: f64,
    pub l_dwdr: f64,
    pub l_total: f64,
    pub mean_abs_offdiag_rho: f64,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub l_id: f64,
    pub l_dwdr: f64,
    pub l_total: f64,
    pub mean_abs_offdiag_rho: f64,
}

/// Maps dataset labels to classifier indices (position in label order).
pub fn class_index(ds: &CrossViewDataset) -> BTreeMap<usize, usize> {
    ds.labels().into_iter().enumerate().map(|(i, l)| (l, i)).collect()
}

/// Inputs and class indices of a batch plan.
pub fn batch_inputs(
    ds: &CrossViewDataset,
    index: &BTreeMap<usize, usize>,
    plan: &BatchPlan,
) -> Result<(DenseMatrix, DenseMatrix, Vec<usize>)> {
    let xs = ds.features(&plan.satellite_ids())?;
    let xd = ds.features(&plan.drone_ids())?;
    let labels = plan
        .labels()
        .iter()
        .map(|l| {
            index
                .get(l)
                .copied()
                .ok_or_else(|| Error::Data(format!("label {l} not in the training set")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((xs, xd, labels))
}

/// A model being trained, with its optimizer and random streams.
pub struct Trainer<'a> {
    pub model: Model,
    pub optim: OptimState,
    cfg: TrainConfig,
    ds: &'a CrossViewDataset,
    index: BTreeMap<usize, usize>,
    sampler: BatchSampler<'a>,
    dropout_rng: Rng,
    noise_rng: Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, ds: &'a CrossViewDataset) -> Result<Self> {
        cfg.validate()?;
        if ds.num_classes() < 2 {
            return Err(Error::Data("training needs at least two classes".into()));
        }
        let mut init_rng = Rng::new(cfg.seed, STREAM_INIT);
        let model = Model::init(ds.dim(), ds.num_classes(), &cfg.model, &mut init_rng);
        let optim = Self::fresh_optim(&model, cfg);
        let sampler = BatchSampler::new(ds, cfg.sampling, cfg.batch_size, &Rng::new(cfg.seed, STREAM_SAMPLER))?;
        Ok(Self {
            model,
            optim,
            cfg: cfg.clone(),
            ds,
            index: class_index(ds),
            sampler,
            dropout_rng: Rng::new(cfg.seed, STREAM_DROPOUT),
            noise_rng: Rng::new(cfg.seed, STREAM_NOISE),
            epoch: 0,
        })
    }

    fn fresh_optim(model: &Model, cfg: &TrainConfig) -> OptimState {
        let e = &model.encoder;
        let c = &model.classifier;
        let enc: Vec<_> = [&e.w1, &e.b1, &e.w2, &e.b2].iter().map(|m| m.shape()).collect();
        let cls: Vec<_> = [&c.w1, &c.b1, &c.bn_scale, &c.bn_shift, &c.w2, &c.b2]
            .iter()
            .map(|m| m.shape())
            .collect();
        OptimState::new(&enc, &cls, cfg.momentum, cfg.weight_decay, cfg.lr_backbone, cfg.lr_classifier)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Runs one optimization step on `plan`.
    pub fn step(&mut self, plan: &BatchPlan, lr_backbone: f64, lr_classifier: f64) -> Result<BatchStats> {
        let (xs, xd, labels) = batch_inputs(self.ds, &self.index, plan)?;
        let mut g = Graph::new();
        let obj = build_objective(
            &mut g,
            &mut self.model,
            &self.cfg,
            &xs,
            &xd,
            &labels,
            &mut self.dropout_rng,
            &mut self.noise_rng,
        )?;
        let stats = BatchStats {
            l_id: obj.l_main.map_or(0.0, |n| g.scalar(n)),
            l_dwdr: obj.l_dwdr.map_or(0.0, |n| g.scalar(n)),
            l_total: g.scalar(obj.total),
            mean_abs_offdiag_rho: mean_abs_offdiag(g.value(obj.rho)),
        };
        if !stats.l_total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {} at epoch {} (seed {}, {} arm, batch labels {:?})",
                stats.l_total,
                self.epoch,
                self.cfg.seed,
                self.cfg.arm.name(),
                plan.labels()
            )));
        }
        let grads = g.backward(obj.total)?;
        let enc_grads: Vec<DenseMatrix> = obj.branch_encoders[0].all().iter().map(|&n| grads.wrt(n)).collect();
        self.optim
            .step_group(ParamGroup::Backbone, &mut self.model.encoder.params_mut(), &enc_grads, lr_backbone);
        if let Some(nodes) = obj.classifier {
            let cls_grads: Vec<DenseMatrix> = nodes.all().iter().map(|&n| grads.wrt(n)).collect();
            self.optim.step_group(
                ParamGroup::Classifier,
                &mut self.model.classifier.params_mut(),
                &cls_grads,
                lr_classifier,
            );
        }
        Ok(stats)
    }

    /// Trains one epoch and returns its log row.
    pub fn train_epoch(&mut self) -> Result<EpochLog> {
        let schedule = self.cfg.schedule();
        let lr_b = schedule.lr_at_epoch(self.epoch, ParamGroup::Backbone)?;
        let lr_c = schedule.lr_at_epoch(self.epoch, ParamGroup::Classifier)?;
        let batches = self.sampler.next_epoch();
        let mut sums = [0.0; 4];
        for (i, plan) in batches.iter().enumerate() {
            let s = self.step(plan, lr_b, lr_c).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg}, batch {i}")),
                other => other,
            })?;
            for (acc, v) in sums.iter_mut().zip([s.l_id, s.l_dwdr, s.l_total, s.mean_abs_offdiag_rho]) {
                *acc += v;
            }
        }
        let n = batches.len().max(1) as f64;
        let log = EpochLog {
            epoch: self.epoch,
            l_id: sums[0] / n,
            l_dwdr: sums[1] / n,
            l_total: sums[2] / n,
            mean_abs_offdiag_rho: sums[3] / n,
            lr_backbone: lr_b,
            lr_classifier: lr_c,
        };
        self.epoch += 1;
        Ok(log)
    }

    /// Mean training objective over `plans`, without updating anything.
    ///
    /// Dropout and noise draws use fixed streams so repeated calls agree.
    pub fn evaluate_objective(&self, plans: &[BatchPlan]) -> Result<f64> {
        let mut model = self.model.clone();
        let mut dropout_rng = Rng::new(self.cfg.seed, 1000 + STREAM_DROPOUT);
        let mut noise_rng = Rng::new(self.cfg.seed, 1000 + STREAM_NOISE);
        let mut total = 0.0;
        for plan in plans {
            let (xs, xd, labels) = batch_inputs(self.ds, &self.index, plan)?;
            let mut g = Graph::new();
            let obj = build_objective(&mut g, &mut model, &self.cfg, &xs, &xd, &labels, &mut dropout_rng, &mut noise_rng)?;
            total += g.scalar(obj.total);
        }
        Ok(total / plans.len().max(1) as f64)
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

/// Trains from a fresh initialization for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, ds: &CrossViewDataset) -> Result<(Model, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(cfg, ds)?;
    let mut logs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        logs.push(trainer.train_epoch()?);
    }
    Ok((trainer.into_model(), logs))
}

/// Retrieval features of every item on `platform`, in dataset item order.
pub fn embed_platform(
    model: &Model,
    ds: &CrossViewDataset,
    platform: Platform,
    kind: RetrievalFeature,
) -> Result<EmbeddingSet> {
    let items: Vec<_> = ds.items_on(platform).collect();
    let ids: Vec<ItemId> = items.iter().map(|i| i.id).collect();
    let labels = items.iter().map(|i| i.label).collect();
    let x = ds.features(&ids)?;
    let v = model.features(&x, kind)?;
    EmbeddingSet::new(ids, labels, platform, v)
}

/// `(satellite, drone)` embedding sets for a dataset.
pub fn embed_dataset(model: &Model, ds: &CrossViewDataset, kind: RetrievalFeature) -> Result<(EmbeddingSet, EmbeddingSet)> {
    Ok((
        embed_platform(model, ds, Platform::Satellite, kind)?,
        embed_platform(model, ds, Platform::Drone, kind)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::DwdrConfig;
    use crate::synthdata::{generate_dataset, split_train_test, SynthSpec};

    fn small_data() -> CrossViewDataset {
        let spec = SynthSpec::default();
        let ds = generate_dataset(&spec, &Rng::new(5, 0)).unwrap();
        split_train_test(&ds, &spec).unwrap().0
    }

    fn quick(arm: LossArm) -> TrainConfig {
        TrainConfig { epochs: 2, decay_epoch: 1, arm, seed: 3, ..TrainConfig::default() }
    }

    fn one_batch(ds: &CrossViewDataset, cfg: &TrainConfig) -> BatchPlan {
        let mut s = BatchSampler::new(ds, cfg.sampling, cfg.batch_size, &Rng::new(9, 1)).unwrap();
        s.next_epoch().remove(0)
    }

    fn grads_for(cfg: &TrainConfig, ds: &CrossViewDataset) -> (Graph, Objective, crate::autodiff::Gradients) {
        let mut model = Model::init(ds.dim(), ds.num_classes(), &cfg.model, &mut Rng::new(1, 0));
        let plan = one_batch(ds, cfg);
        let (xs, xd, labels) = batch_inputs(ds, &class_index(ds), &plan).unwrap();
        let mut g = Graph::new();
        let obj = build_objective(&mut g, &mut model, cfg, &xs, &xd, &labels, &mut Rng::new(2, 2), &mut Rng::new(2, 3)).unwrap();
        let grads = g.backward(obj.total).unwrap();
        (g, obj, grads)
    }

    #[test]
    fn branches_share_encoder_nodes() {
        let ds = small_data();
        let (_, obj, _) = grads_for(&quick(LossArm::InstancePlusDwdr), &ds);
        assert_eq!(obj.branch_encoders[0], obj.branch_encoders[1]);
    }

    #[test]
    fn alpha_one_removes_dwdr_gradient() {
        let ds = small_data();
        let mut with = quick(LossArm::InstancePlusDwdr);
        with.dwdr.alpha = 1.0;
        with.model.dropout = 0.0;
        let mut without = with.clone();
        without.arm = LossArm::InstanceOnly;
        let (_, oa, ga) = grads_for(&with, &ds);
        let (_, ob, gb) = grads_for(&without, &ds);
        for (a, b) in oa.branch_encoders[0].all().iter().zip(ob.branch_encoders[0].all()) {
            let (ga, gb) = (ga.wrt(*a), gb.wrt(b));
            let diff = ga.zip_map(&gb, |x, y| x - y).unwrap().max_abs();
            assert!(diff < 1e-12, "diff {diff}");
        }
    }

    #[test]
    fn dwdr_only_leaves_classifier_untouched() {
        let ds = small_data();
        let (g, obj, grads) = grads_for(&quick(LossArm::DwdrOnly), &ds);
        assert!(obj.classifier.is_none());
        // Parameters bound but unreachable also receive zero gradient.
        let mut g2 = Graph::new();
        let cfg = quick(LossArm::DwdrOnly);
        let mut model = Model::init(ds.dim(), ds.num_classes(), &cfg.model, &mut Rng::new(1, 0));
        let nodes = model.classifier.bind(&mut g2);
        let plan = one_batch(&ds, &cfg);
        let (xs, xd, labels) = batch_inputs(&ds, &class_index(&ds), &plan).unwrap();
        let obj2 = build_objective(&mut g2, &mut model, &cfg, &xs, &xd, &labels, &mut Rng::new(2, 2), &mut Rng::new(2, 3)).unwrap();
        let grads2 = g2.backward(obj2.total).unwrap();
        for n in nodes.all() {
            assert_eq!(grads2.wrt(n).max_abs(), 0.0);
        }
        assert!(!g.is_empty() && grads.wrt(obj.branch_encoders[0].w1).max_abs() > 0.0);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = small_data();
        let cfg = TrainConfig { epochs: 0, ..quick(LossArm::InstancePlusDwdr) };
        let (model, logs) = train(&cfg, &ds).unwrap();
        let init = Model::init(ds.dim(), ds.num_classes(), &cfg.model, &mut Rng::new(cfg.seed, STREAM_INIT));
        assert!(logs.is_empty());
        assert_eq!(model, init);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_data();
        let cfg = quick(LossArm::InstancePlusDwdr);
        let (a, la) = train(&cfg, &ds).unwrap();
        let (b, lb) = train(&cfg, &ds).unwrap();
        assert_eq!(a.checkpoint_string(), b.checkpoint_string());
        assert_eq!(la, lb);
        assert_eq!(la.len(), 2);
    }

    #[test]
    fn one_epoch_reduces_training_loss() {
        let ds = small_data();
        let mut decreased = 0;
        for seed in 0..5 {
            let cfg = TrainConfig { seed, epochs: 1, ..TrainConfig::default() };
            let mut t = Trainer::new(&cfg, &ds).unwrap();
            let probe: Vec<BatchPlan> = BatchSampler::new(&ds, cfg.sampling, cfg.batch_size, &Rng::new(seed, 77))
                .unwrap()
                .next_epoch();
            let before = t.evaluate_objective(&probe).unwrap();
            t.train_epoch().unwrap();
            let after = t.evaluate_objective(&probe).unwrap();
            if after < before {
                decreased += 1;
            }
        }
        assert!(decreased >= 4, "loss decreased in only {decreased}/5 seeds");
    }

    #[test]
    fn dwdr_ignores_positive_channel_scaling() {
        let ds = small_data();
        let cfg = quick(LossArm::InstancePlusDwdr);
        let model = Model::init(ds.dim(), ds.num_classes(), &cfg.model, &mut Rng::new(4, 0));
        let plan = one_batch(&ds, &cfg);
        let (xs, xd, _) = batch_inputs(&ds, &class_index(&ds), &plan).unwrap();
        let fs = model.encoder.embed(&xs).unwrap();
        let fd = model.encoder.embed(&xd).unwrap();
        let d = fs.cols();
        let scale = DenseMatrix::from_fn(d, d, |i, j| if i == j { 0.5 + i as f64 } else { 0.0 });
        let dcfg = DwdrConfig { eps: 1e-12, ..DwdrConfig::default() };
        let value = |a: &DenseMatrix, b: &DenseMatrix| {
            let mut g = Graph::new();
            let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
            let l = dwdr_loss(&mut g, a, b, &dcfg).unwrap();
            g.scalar(l)
        };
        let base = value(&fs, &fd);
        let scaled = value(&fs.matmul(&scale).unwrap(), &fd.matmul(&scale).unwrap());
        assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
    }

    #[test]
    fn triplet_negatives_differ_in_label() {
        let p = negative_permutation(&[0, 0, 1, 2]).unwrap();
        assert_eq!(p.get(0, 2), 1.0);
        assert_eq!(p.get(1, 2), 1.0);
        assert_eq!(p.get(3, 0), 1.0);
        assert!(negative_permutation(&[4, 4]).is_err());
    }

    #[test]
    fn triplet_and_intra_arms_train() {
        let ds = small_data();
        for arm in [LossArm::TripletPlusDwdr, LossArm::SoftMarginPlusDwdr] {
            let mut cfg = quick(arm);
            cfg.epochs = 1;
            cfg.dwdr.intra_view = true;
            let (_, logs) = train(&cfg, &ds).unwrap();
            assert!(logs[0].l_total.is_finite());
        }
    }

    #[test]
    fn arm_names_round_trip() {
        for arm in LossArm::ALL {
            assert_eq!(arm.name().parse::<LossArm>().unwrap(), arm);
        }
    }
}
