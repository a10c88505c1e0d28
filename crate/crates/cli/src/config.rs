//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is listed
//! in [`KEYS`]; unknown keys are rejected with their line number.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use dwdr::gradcheck::GradCheckConfig;
use dwdr::model::RetrievalFeature;
use dwdr::synthdata::ClassSplit;
use dwdr::{LossArm, SamplingStrategy, SynthSpec, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Threshold for counting "hard" correlated channel pairs.
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10], tau: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: SynthSpec,
    /// Number of leading classes used for training; the rest are held out.
    pub train_classes: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SynthSpec::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            train_classes: data.split.train.len(),
            data,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> Result<(), String>;

pub struct Key {
    pub name: &'static str,
    pub doc: &'static str,
    get: Getter,
    set: Setter,
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',').map(|s| parse::<usize>(s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn feature_name(f: RetrievalFeature) -> &'static str {
    match f {
        RetrievalFeature::Embedding => "embedding",
        RetrievalFeature::ClassifierHidden => "classifier_hidden",
    }
}

fn parse_feature(v: &str) -> Result<RetrievalFeature, String> {
    match v {
        "embedding" => Ok(RetrievalFeature::Embedding),
        "classifier_hidden" => Ok(RetrievalFeature::ClassifierHidden),
        _ => Err(format!("unknown retrieval feature `{v}` (embedding, classifier_hidden)")),
    }
}

macro_rules! key {
    ($name:literal, $doc:literal, |$c:ident| $get:expr, |$m:ident, $v:ident| $set:expr) => {
        Key {
            name: $name,
            doc: $doc,
            get: |$c: &RunConfig| $get.to_string(),
            set: |$m: &mut RunConfig, $v: &str| {
                $set;
                Ok(())
            },
        }
    };
}

pub const KEYS: &[Key] = &[
    key!("seed", "seed for data generation and training", |c| c.seed, |m, v| m.seed = parse(v)?),
    key!("out_dir", "directory for manifests, checkpoints, logs and metrics", |c| c.out_dir.display(), |m, v| m.out_dir = PathBuf::from(v)),
    key!("data.num_classes", "number of geo-tag classes", |c| c.data.num_classes, |m, v| m.data.num_classes = parse(v)?),
    key!("data.train_classes", "leading classes used for training; the rest are held out", |c| c.train_classes, |m, v| m.train_classes = parse(v)?),
    key!("data.latent_dim", "latent prototype dimension", |c| c.data.latent_dim, |m, v| m.data.latent_dim = parse(v)?),
    key!("data.input_dim", "item feature dimension", |c| c.data.input_dim, |m, v| m.data.input_dim = parse(v)?),
    key!("data.drone_per_class", "drone items per class: one count, or one per class (comma separated)", |c| join(&c.data.drone_per_class), |m, v| m.data.drone_per_class = parse_list(v)?),
    key!("data.noise_sigma", "observation noise standard deviation", |c| c.data.noise_sigma, |m, v| m.data.noise_sigma = parse(v)?),
    key!("data.jitter_sigma", "per-drone-item latent jitter standard deviation", |c| c.data.jitter_sigma, |m, v| m.data.jitter_sigma = parse(v)?),
    key!("data.platform_transform_seed", "seed of the fixed per-platform maps", |c| c.data.platform_transform_seed, |m, v| m.data.platform_transform_seed = parse(v)?),
    key!("train.epochs", "training epochs", |c| c.train.epochs, |m, v| m.train.epochs = parse(v)?),
    key!("train.decay_epoch", "first epoch of the decayed learning rate", |c| c.train.decay_epoch, |m, v| m.train.decay_epoch = parse(v)?),
    key!("train.decay_factor", "learning-rate multiplier after decay_epoch", |c| c.train.decay_factor, |m, v| m.train.decay_factor = parse(v)?),
    key!("train.lr_backbone", "encoder learning rate", |c| c.train.lr_backbone, |m, v| m.train.lr_backbone = parse(v)?),
    key!("train.lr_classifier", "classifier learning rate", |c| c.train.lr_classifier, |m, v| m.train.lr_classifier = parse(v)?),
    key!("train.momentum", "SGD momentum", |c| c.train.momentum, |m, v| m.train.momentum = parse(v)?),
    key!("train.weight_decay", "coupled L2 weight decay", |c| c.train.weight_decay, |m, v| m.train.weight_decay = parse(v)?),
    key!("train.batch_size", "positive pairs per batch", |c| c.train.batch_size, |m, v| m.train.batch_size = parse(v)?),
    key!("train.sampling", "random, satellite, drone or symmetric", |c| c.train.sampling.name(), |m, v| m.train.sampling = parse(v)?),
    key!("train.arm", "instance_only, dwdr_only, instance_plus_dwdr, triplet_plus_dwdr or softmargin_plus_dwdr", |c| c.train.arm.name(), |m, v| m.train.arm = parse::<LossArm>(v)?),
    key!("train.intra_noise_sigma", "input noise for intra-view copies", |c| c.train.intra_noise_sigma, |m, v| m.train.intra_noise_sigma = parse(v)?),
    key!("train.retrieval_feature", "embedding or classifier_hidden", |c| feature_name(c.train.retrieval_feature), |m, v| m.train.retrieval_feature = parse_feature(v)?),
    key!("model.hidden_dim", "encoder hidden width", |c| c.train.model.hidden_dim, |m, v| m.train.model.hidden_dim = parse(v)?),
    key!("model.embed_dim", "embedding dimension d", |c| c.train.model.embed_dim, |m, v| m.train.model.embed_dim = parse(v)?),
    key!("model.classifier_hidden", "classifier hidden width", |c| c.train.model.classifier_hidden, |m, v| m.train.model.classifier_hidden = parse(v)?),
    key!("model.dropout", "classifier dropout rate", |c| c.train.model.dropout, |m, v| m.train.model.dropout = parse(v)?),
    key!("model.bn_momentum", "batch-norm running-statistics momentum", |c| c.train.model.bn_momentum, |m, v| m.train.model.bn_momentum = parse(v)?),
    key!("model.bn_eps", "batch-norm variance epsilon", |c| c.train.model.bn_eps, |m, v| m.train.model.bn_eps = parse(v)?),
    key!("dwdr.lambda", "off-diagonal weight", |c| c.train.dwdr.lambda, |m, v| m.train.dwdr.lambda = parse(v)?),
    key!("dwdr.gamma1", "diagonal focusing parameter", |c| c.train.dwdr.gamma1, |m, v| m.train.dwdr.gamma1 = parse(v)?),
    key!("dwdr.gamma2", "off-diagonal focusing parameter", |c| c.train.dwdr.gamma2, |m, v| m.train.dwdr.gamma2 = parse(v)?),
    key!("dwdr.alpha", "weight of the main loss against DWDR", |c| c.train.dwdr.alpha, |m, v| m.train.dwdr.alpha = parse(v)?),
    key!("dwdr.eps", "added to the standard deviation in the Pearson denominator", |c| c.train.dwdr.eps, |m, v| m.train.dwdr.eps = parse(v)?),
    key!("dwdr.cross_view", "DWDR between satellite and drone embeddings", |c| c.train.dwdr.cross_view, |m, v| m.train.dwdr.cross_view = parse(v)?),
    key!("dwdr.intra_view", "DWDR between each branch and its noisy copy", |c| c.train.dwdr.intra_view, |m, v| m.train.dwdr.intra_view = parse(v)?),
    key!("triplet.margin", "hard-margin triplet margin", |c| c.train.triplet.margin, |m, v| m.train.triplet.margin = parse(v)?),
    key!("eval.ks", "recall cut-offs (comma separated)", |c| join(&c.eval.ks), |m, v| m.eval.ks = parse_list(v)?),
    key!("eval.tau", "threshold for hard correlated channel pairs", |c| c.eval.tau, |m, v| m.eval.tau = parse(v)?),
    key!("gradcheck.instances", "random instances per loss", |c| c.gradcheck.instances, |m, v| m.gradcheck.instances = parse(v)?),
    key!("gradcheck.batch", "batch rows", |c| c.gradcheck.batch, |m, v| m.gradcheck.batch = parse(v)?),
    key!("gradcheck.dim", "feature dimension", |c| c.gradcheck.dim, |m, v| m.gradcheck.dim = parse(v)?),
    key!("gradcheck.classes", "classifier classes", |c| c.gradcheck.classes, |m, v| m.gradcheck.classes = parse(v)?),
    key!("gradcheck.h", "central-difference step", |c| c.gradcheck.h, |m, v| m.gradcheck.h = parse(v)?),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

impl RunConfig {
    /// Sets one key; the error names the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let k = find_key(key).ok_or_else(|| format!("unknown config key `{key}`"))?;
        (k.set)(self, value).map_err(|e| format!("key `{key}`: {e}"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        find_key(key).map(|k| (k.get)(self))
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let Some((k, v)) = split_line(line).map_err(|e| CliError::config(format!("line {}: {e}", i + 1)))? else {
                continue;
            };
            self.set(k, v).map_err(|e| CliError::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every key with its documentation and current value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "# {}", k.doc);
            let _ = writeln!(s, "{} = {}", k.name, (k.get)(self));
        }
        s
    }

    /// Synthetic-data spec with the split resolved.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            split: ClassSplit::first(self.train_classes, self.data.num_classes),
            ..self.data.clone()
        }
    }

    /// Training config carrying the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let spec = self.synth_spec();
        spec.validate().map_err(|e| CliError::config(e.to_string()))?;
        if self.train_classes < 2 || self.train_classes >= self.data.num_classes {
            return Err(CliError::config(format!(
                "data.train_classes must leave at least 2 training classes and 1 test class, got {} of {}",
                self.train_classes, self.data.num_classes
            )));
        }
        self.train_config().validate().map_err(|e| CliError::config(e.to_string()))?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(CliError::config("eval.ks needs positive cut-offs"));
        }
        Ok(())
    }
}

/// `Ok(None)` for blank and comment lines.
pub fn split_line(line: &str) -> Result<Option<(&str, &str)>, String> {
    let t = line.trim();
    if t.is_empty() || t.starts_with('#') {
        return Ok(None);
    }
    let (k, v) = t.split_once('=').ok_or_else(|| format!("expected `key = value`, got `{t}`"))?;
    Ok(Some((k.trim(), v.trim())))
}

/// The sampling strategies in config spelling, for help text.
pub fn sampling_names() -> Vec<&'static str> {
    [
        SamplingStrategy::Random,
        SamplingStrategy::Satellite,
        SamplingStrategy::Drone,
        SamplingStrategy::Symmetric,
    ]
    .iter()
    .map(|s| s.name())
    .collect()
}
