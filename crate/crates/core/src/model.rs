//! Two-branch network at toy scale: one MLP encoder shared by both
//! platforms, and one classifier (FC → BN → dropout → FC) shared likewise.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{batch_norm_1d, dropout, Mode, RunningStats};
use crate::matrix::DenseMatrix;
use crate::rng::Rng;

pub const CHECKPOINT_FORMAT: &str = "dwdr-checkpoint v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub classifier_hidden: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            embed_dim: 32,
            classifier_hidden: 64,
            dropout: 0.5,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

fn kaiming(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    let std = (2.0 / rows as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.normal() * std)
}

/// `f = relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
}

/// Encoder parameters bound to one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl EncoderNodes {
    pub fn all(&self) -> [NodeId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl Encoder {
    pub fn init(input_dim: usize, hidden: usize, embed: usize, rng: &mut Rng) -> Self {
        Self {
            w1: kaiming(input_dim, hidden, rng),
            b1: DenseMatrix::zeros(1, hidden),
            w2: kaiming(hidden, embed, rng),
            b2: DenseMatrix::zeros(1, embed),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn bind(&self, g: &mut Graph) -> EncoderNodes {
        EncoderNodes {
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
        }
    }

    pub fn params_mut(&mut self) -> [&mut DenseMatrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Embeds a batch outside any training graph.
    pub fn embed(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let x = g.constant(x.clone());
        let f = encoder_forward(&mut g, &nodes, x)?;
        Ok(g.value(f).clone())
    }
}

pub fn encoder_forward(g: &mut Graph, enc: &EncoderNodes, x: NodeId) -> Result<NodeId> {
    let expected = g.value(enc.w1).rows();
    let got = g.value(x).cols();
    if got != expected {
        return Err(Error::Dimension(format!(
            "encoder expects {expected} input features, got {got}"
        )));
    }
    let h = g.matmul(x, enc.w1)?;
    let h = g.add(h, enc.b1)?;
    let h = g.relu(h);
    let f = g.matmul(h, enc.w2)?;
    g.add(f, enc.b2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub bn_scale: DenseMatrix,
    pub bn_shift: DenseMatrix,
    pub running: RunningStats,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub bn_scale: NodeId,
    pub bn_shift: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl ClassifierNodes {
    pub fn all(&self) -> [NodeId; 6] {
        [self.w1, self.b1, self.bn_scale, self.bn_shift, self.w2, self.b2]
    }
}

/// Outputs of one classifier pass.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    /// Output of the first fully-connected layer.
    pub fc1: NodeId,
    pub logits: NodeId,
}

impl Classifier {
    pub fn init(embed: usize, hidden: usize, classes: usize, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        Self {
            w1: kaiming(embed, hidden, rng),
            b1: DenseMatrix::zeros(1, hidden),
            bn_scale: DenseMatrix::filled(1, hidden, 1.0),
            bn_shift: DenseMatrix::zeros(1, hidden),
            running: RunningStats::new(hidden),
            // Small final-layer init keeps initial logits near uniform.
            w2: DenseMatrix::from_fn(hidden, classes, |_, _| rng.normal() * 1e-3),
            b2: DenseMatrix::zeros(1, classes),
            dropout: cfg.dropout,
            bn_momentum: cfg.bn_momentum,
            bn_eps: cfg.bn_eps,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w2.cols()
    }

    pub fn bind(&self, g: &mut Graph) -> ClassifierNodes {
        ClassifierNodes {
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            bn_scale: g.param(self.bn_scale.clone()),
            bn_shift: g.param(self.bn_shift.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
        }
    }

    pub fn params_mut(&mut self) -> [&mut DenseMatrix; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.bn_scale,
            &mut self.bn_shift,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    /// FC → BN → dropout → FC. Train mode updates the running statistics.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        nodes: &ClassifierNodes,
        f: NodeId,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ClassifierOutput> {
        let expected = self.w1.rows();
        if g.value(f).cols() != expected {
            return Err(Error::Dimension(format!(
                "classifier expects {expected} features, got {}",
                g.value(f).cols()
            )));
        }
        let h = g.matmul(f, nodes.w1)?;
        let fc1 = g.add(h, nodes.b1)?;
        let h = batch_norm_1d(
            g,
            fc1,
            nodes.bn_scale,
            nodes.bn_shift,
            &mut self.running,
            mode,
            self.bn_momentum,
            self.bn_eps,
        )?;
        let h = dropout(g, h, self.dropout, mode, rng)?;
        let z = g.matmul(h, nodes.w2)?;
        let logits = g.add(z, nodes.b2)?;
        Ok(ClassifierOutput { fc1, logits })
    }
}

/// Which vector represents an item at retrieval time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalFeature {
    /// The encoder output `f`, before the classifier.
    Embedding,
    /// The first classifier layer's output.
    ClassifierHidden,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub classifier: Classifier,
}

impl Model {
    pub fn init(input_dim: usize, classes: usize, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let encoder = Encoder::init(input_dim, cfg.hidden_dim, cfg.embed_dim, rng);
        let classifier = Classifier::init(cfg.embed_dim, cfg.classifier_hidden, classes, cfg, rng);
        Self { encoder, classifier }
    }

    /// Retrieval features for a batch, in eval mode.
    pub fn features(&self, x: &DenseMatrix, kind: RetrievalFeature) -> Result<DenseMatrix> {
        let f = self.encoder.embed(x)?;
        match kind {
            RetrievalFeature::Embedding => Ok(f),
            RetrievalFeature::ClassifierHidden => {
                let h = f.matmul(&self.classifier.w1)?;
                let b1 = &self.classifier.b1;
                Ok(DenseMatrix::from_fn(h.rows(), h.cols(), |r, c| h.get(r, c) + b1.get(0, c)))
            }
        }
    }

    fn named(&self) -> Vec<(&'static str, &DenseMatrix)> {
        let e = &self.encoder;
        let c = &self.classifier;
        vec![
            ("encoder.w1", &e.w1),
            ("encoder.b1", &e.b1),
            ("encoder.w2", &e.w2),
            ("encoder.b2", &e.b2),
            ("classifier.w1", &c.w1),
            ("classifier.b1", &c.b1),
            ("classifier.bn_scale", &c.bn_scale),
            ("classifier.bn_shift", &c.bn_shift),
            ("classifier.running_mean", &c.running.mean),
            ("classifier.running_var", &c.running.var),
            ("classifier.w2", &c.w2),
            ("classifier.b2", &c.b2),
        ]
    }

    /// Text checkpoint: a format line, scalar settings, then every matrix as
    /// `matrix <name> <rows> <cols>` followed by one line of values per row.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_FORMAT}")?;
        let c = &self.classifier;
        writeln!(w, "setting dropout {}", c.dropout)?;
        writeln!(w, "setting bn_momentum {}", c.bn_momentum)?;
        writeln!(w, "setting bn_eps {}", c.bn_eps)?;
        for (name, m) in self.named() {
            writeln!(w, "matrix {name} {} {}", m.rows(), m.cols())?;
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn checkpoint_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ASCII")
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        if lines.first().map(|l| l.trim()) != Some(CHECKPOINT_FORMAT) {
            return Err(perr(1, format!("expected format tag `{CHECKPOINT_FORMAT}`")));
        }
        let mut settings = std::collections::HashMap::new();
        let mut mats = std::collections::HashMap::new();
        let mut i = 1;
        while i < lines.len() {
            let fields: Vec<&str> = lines[i].split_whitespace().collect();
            match fields.as_slice() {
                [] => i += 1,
                ["setting", key, value] => {
                    let v: f64 = value
                        .parse()
                        .map_err(|_| perr(i + 1, format!("bad value for {key}")))?;
                    settings.insert(key.to_string(), v);
                    i += 1;
                }
                ["matrix", name, rows, cols] => {
                    let rows: usize = rows.parse().map_err(|_| perr(i + 1, "bad row count".into()))?;
                    let cols: usize = cols.parse().map_err(|_| perr(i + 1, "bad column count".into()))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let ln = i + 1 + r;
                        let row = lines
                            .get(ln)
                            .ok_or_else(|| perr(ln + 1, format!("matrix {name} truncated")))?;
                        let vals: Vec<f64> = row
                            .split_whitespace()
                            .map(|v| v.parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| perr(ln + 1, "bad matrix value".into()))?;
                        if vals.len() != cols {
                            return Err(perr(ln + 1, format!("expected {cols} values")));
                        }
                        data.extend(vals);
                    }
                    mats.insert(name.to_string(), DenseMatrix::from_vec(rows, cols, data)?);
                    i += 1 + rows;
                }
                _ => return Err(perr(i + 1, format!("unrecognized line `{}`", lines[i]))),
            }
        }
        let mut take = |name: &str| {
            mats.remove(name)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing matrix {name}")))
        };
        let setting = |key: &str| {
            settings
                .get(key)
                .copied()
                .ok_or_else(|| Error::Data(format!("checkpoint is missing setting {key}")))
        };
        let model = Model {
            encoder: Encoder {
                w1: take("encoder.w1")?,
                b1: take("encoder.b1")?,
                w2: take("encoder.w2")?,
                b2: take("encoder.b2")?,
            },
            classifier: Classifier {
                w1: take("classifier.w1")?,
                b1: take("classifier.b1")?,
                bn_scale: take("classifier.bn_scale")?,
                bn_shift: take("classifier.bn_shift")?,
                running: RunningStats {
                    mean: take("classifier.running_mean")?,
                    var: take("classifier.running_var")?,
                },
                w2: take("classifier.w2")?,
                b2: take("classifier.b2")?,
                dropout: setting("dropout")?,
                bn_momentum: setting("bn_momentum")?,
                bn_eps: setting("bn_eps")?,
            },
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let e = &self.encoder;
        let c = &self.classifier;
        let (h, d, hc, classes) = (e.w1.cols(), e.w2.cols(), c.w1.cols(), c.w2.cols());
        let ok = e.b1.shape() == (1, h)
            && e.w2.rows() == h
            && e.b2.shape() == (1, d)
            && c.w1.rows() == d
            && [&c.b1, &c.bn_scale, &c.bn_shift, &c.running.mean, &c.running.var]
                .iter()
                .all(|m| m.shape() == (1, hc))
            && c.w2.rows() == hc
            && c.b2.shape() == (1, classes);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("checkpoint matrices have inconsistent shapes".into()))
        }
    }
}
