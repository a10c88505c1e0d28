//! Finite-difference verification of every loss and of the full
//! encoder + classifier objective.

use serde::Serialize;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::losses::{
    barlow_twins_loss, dwdr_loss, instance_loss, pearson_matrix, total_loss, triplet_loss, DwdrConfig,
    TripletConfig, TripletVariant,
};
use crate::matrix::DenseMatrix;
use crate::model::{Model, ModelConfig};
use crate::rng::Rng;
use crate::trainer::{build_objective, LossArm, TrainConfig};

/// Central differences `(f(x + h·e_ij) - f(x - h·e_ij)) / 2h` for every entry.
pub fn finite_diff_grad(mut f: impl FnMut(&DenseMatrix) -> f64, x: &DenseMatrix, h: f64) -> DenseMatrix {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| {
        let orig = x.get(r, c);
        probe.set(r, c, orig + h);
        let up = f(&probe);
        probe.set(r, c, orig - h);
        let down = f(&probe);
        probe.set(r, c, orig);
        (up - down) / (2.0 * h)
    })
}

/// Fourth-order stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
/// With a larger `h` its roundoff is far below that of [`finite_diff_grad`],
/// which makes it a tighter oracle for entries with tiny gradients.
pub fn five_point_grad(mut f: impl FnMut(&DenseMatrix) -> f64, x: &DenseMatrix, h: f64) -> DenseMatrix {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| {
        let orig = x.get(r, c);
        let mut at = |d: f64| {
            probe.set(r, c, orig + d);
            f(&probe)
        };
        let v = -at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h);
        probe.set(r, c, orig);
        v / (12.0 * h)
    })
}

/// Elementwise agreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Agreement {
    /// Largest relative error over entries with `|analytic| > abs_floor`.
    pub max_rel_err: f64,
    /// Largest absolute error over the remaining entries.
    pub max_abs_err: f64,
    /// Largest relative error against the five-point stencil, same entries
    /// as `max_rel_err`. Informational only.
    pub five_point_rel_err: f64,
}

impl Agreement {
    pub fn measure(analytic: &DenseMatrix, numeric: &DenseMatrix, abs_floor: f64) -> Self {
        let mut out = Agreement::default();
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            let err = (a - n).abs();
            if a.abs() > abs_floor {
                out.max_rel_err = out.max_rel_err.max(err / a.abs());
            } else {
                out.max_abs_err = out.max_abs_err.max(err);
            }
        }
        out
    }

    pub fn merge(self, other: Self) -> Self {
        Agreement {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            five_point_rel_err: self.five_point_rel_err.max(other.five_point_rel_err),
        }
    }

    pub fn within(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel_err < rel_tol && self.max_abs_err < abs_tol
    }
}

/// Compares `backward()` with central differences for a scalar function of
/// several matrices. `build` turns the inputs into a loss and returns the
/// leaf node of each input. `five_point_h` is the step of the secondary
/// five-point comparison.
pub fn check_function<F>(
    inputs: &[DenseMatrix],
    build: F,
    h: f64,
    five_point_h: f64,
    abs_floor: f64,
) -> Result<Agreement>
where
    F: Fn(&mut Graph, &[DenseMatrix]) -> Result<(NodeId, Vec<NodeId>)>,
{
    let mut g = Graph::new();
    let (loss, leaves) = build(&mut g, inputs)?;
    let grads = g.backward(loss)?;
    let mut agreement = Agreement::default();
    let mut failure = None;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf);
        let mut current = inputs.to_vec();
        let mut eval = |x: &DenseMatrix| {
            current[k] = x.clone();
            let mut g = Graph::new();
            match build(&mut g, &current) {
                Ok((l, _)) => g.scalar(l),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let numeric = finite_diff_grad(&mut eval, &inputs[k], h);
        let stencil = five_point_grad(&mut eval, &inputs[k], five_point_h);
        let mut a = Agreement::measure(&analytic, &numeric, abs_floor);
        a.five_point_rel_err = Agreement::measure(&analytic, &stencil, abs_floor).max_rel_err;
        agreement = agreement.merge(a);
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(agreement),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub h: f64,
    /// Step of the five-point comparison for the individual losses.
    pub five_point_h: f64,
    /// Same for the composite, small enough to stay clear of relu kinks.
    pub composite_five_point_h: f64,
    pub batch: usize,
    pub dim: usize,
    pub classes: usize,
    /// Relative tolerance for the individual losses.
    pub loss_tol: f64,
    /// Relative tolerance for the full encoder + classifier objective.
    pub composite_tol: f64,
    /// Entries with smaller analytic magnitude are compared absolutely.
    pub abs_floor: f64,
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            h: 1e-5,
            five_point_h: 1e-3,
            composite_five_point_h: 1e-4,
            batch: 8,
            dim: 6,
            classes: 5,
            loss_tol: 1e-6,
            composite_tol: 1e-5,
            abs_floor: 1e-8,
            abs_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossCheck {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub five_point_rel_err: f64,
    pub rel_tol: f64,
    pub passed: bool,
    /// Set when building the loss itself failed.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<LossCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Names of the checks run by [`run_suite`], in report order.
pub const CHECK_NAMES: [&str; 7] = [
    "barlow_twins",
    "instance",
    "dwdr",
    "total",
    "triplet_hard",
    "triplet_soft",
    "composite",
];

fn normal(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn labels(b: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
    (0..b).map(|_| rng.below(classes)).collect()
}

fn leaves(g: &mut Graph, inputs: &[DenseMatrix]) -> Vec<NodeId> {
    inputs.iter().map(|m| g.param(m.clone())).collect()
}

/// Runs `n` instances of one check, aggregating the worst errors.
fn run_check(
    name: &str,
    n: usize,
    rel_tol: f64,
    cfg: &GradCheckConfig,
    mut instance: impl FnMut(&mut Rng) -> Result<Agreement>,
) -> LossCheck {
    let mut worst = Agreement::default();
    let mut error = None;
    for k in 0..n {
        let mut rng = Rng::new(cfg.seed, k as u64);
        match instance(&mut rng) {
            Ok(a) => worst = worst.merge(a),
            Err(e) => {
                error = Some(format!("instance {k}: {e}"));
                break;
            }
        }
    }
    LossCheck {
        name: name.to_string(),
        instances: n,
        max_rel_err: worst.max_rel_err,
        max_abs_err: worst.max_abs_err,
        five_point_rel_err: worst.five_point_rel_err,
        rel_tol,
        passed: error.is_none() && worst.within(rel_tol, cfg.abs_tol),
        error,
    }
}

/// Draws triplet inputs away from the hinge of the hard-margin loss, where
/// central differences straddle the kink.
fn triplet_inputs(cfg: &GradCheckConfig, margin: f64, rng: &mut Rng) -> Vec<DenseMatrix> {
    let (b, d) = (cfg.batch, cfg.dim);
    loop {
        let m = [normal(b, d, rng), normal(b, d, rng), normal(b, d, rng)];
        let dist = |x: &DenseMatrix, y: &DenseMatrix, r: usize| {
            x.row(r).iter().zip(y.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        };
        let clear = (0..b).all(|r| (dist(&m[0], &m[1], r) - dist(&m[0], &m[2], r) + margin).abs() > 1e-3);
        if clear {
            return m.to_vec();
        }
    }
}

fn composite_config(cfg: &GradCheckConfig) -> TrainConfig {
    TrainConfig {
        arm: LossArm::InstancePlusDwdr,
        model: ModelConfig {
            hidden_dim: 10,
            embed_dim: cfg.dim,
            classifier_hidden: 8,
            dropout: 0.5,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

const COMPOSITE_INPUT_DIM: usize = 7;

/// Random model parameters with every relu pre-activation of both branches
/// at least `1e-3` from zero.
fn composite_instance(
    cfg: &GradCheckConfig,
    tcfg: &TrainConfig,
    rng: &mut Rng,
) -> (Model, DenseMatrix, DenseMatrix, Vec<usize>) {
    loop {
        let mut model = Model::init(COMPOSITE_INPUT_DIM, cfg.classes, &tcfg.model, rng);
        let c = &mut model.classifier;
        c.w2 = normal(c.w2.rows(), c.w2.cols(), rng);
        c.b1 = normal(1, c.b1.cols(), rng);
        let jitter = normal(1, c.bn_scale.cols(), rng);
        c.bn_scale = c.bn_scale.zip_map(&jitter, |v, j| v + 0.3 * j).expect("same shape");
        c.bn_shift = normal(1, c.bn_shift.cols(), rng);
        model.encoder.b1 = normal(1, model.encoder.b1.cols(), rng);
        let xs = normal(cfg.batch, COMPOSITE_INPUT_DIM, rng);
        let xd = normal(cfg.batch, COMPOSITE_INPUT_DIM, rng);
        let y = labels(cfg.batch, cfg.classes, rng);
        let e = &model.encoder;
        let clear = [&xs, &xd].iter().all(|x| {
            let pre = x.matmul(&e.w1).expect("shapes agree");
            (0..pre.rows()).all(|r| pre.row(r).iter().zip(e.b1.row(0)).all(|(v, b)| (v + b).abs() > 1e-3))
        });
        if clear {
            return (model, xs, xd, y);
        }
    }
}

fn model_params(model: &Model) -> Vec<DenseMatrix> {
    let e = &model.encoder;
    let c = &model.classifier;
    [&e.w1, &e.b1, &e.w2, &e.b2, &c.w1, &c.b1, &c.bn_scale, &c.bn_shift, &c.w2, &c.b2]
        .into_iter()
        .cloned()
        .collect()
}

fn with_params(template: &Model, params: &[DenseMatrix]) -> Model {
    let mut m = template.clone();
    let slots = m.encoder.params_mut().into_iter().chain(m.classifier.params_mut());
    for (slot, p) in slots.zip(params) {
        *slot = p.clone();
    }
    m
}

/// The full objective's gradient w.r.t. every model parameter, with the
/// dropout mask frozen by replaying the same random stream.
pub fn composite_agreement(cfg: &GradCheckConfig, rng: &mut Rng) -> Result<Agreement> {
    let tcfg = composite_config(cfg);
    let (template, xs, xd, y) = composite_instance(cfg, &tcfg, rng);
    let dropout_seed = rng.next_u64();
    check_function(
        &model_params(&template),
        |g, params| {
            let mut model = with_params(&template, params);
            let obj = build_objective(
                g,
                &mut model,
                &tcfg,
                &xs,
                &xd,
                &y,
                &mut Rng::new(dropout_seed, 0),
                &mut Rng::new(dropout_seed, 1),
            )?;
            let cls = obj.classifier.expect("instance arm binds the classifier");
            let nodes = obj.branch_encoders[0].all().into_iter().chain(cls.all()).collect();
            Ok((obj.total, nodes))
        },
        cfg.h,
        cfg.composite_five_point_h,
        cfg.abs_floor,
    )
}

/// Runs every check in [`CHECK_NAMES`].
pub fn run_suite(cfg: &GradCheckConfig) -> GradCheckReport {
    let (b, d, c, n) = (cfg.batch, cfg.dim, cfg.classes, cfg.instances);
    let dwdr = DwdrConfig::default();
    let (h, h5, floor) = (cfg.h, cfg.five_point_h, cfg.abs_floor);
    let mut checks = Vec::new();

    checks.push(run_check("barlow_twins", n, cfg.loss_tol, cfg, |rng| {
        let inputs = [normal(b, d, rng), normal(b, d, rng)];
        check_function(
            &inputs,
            |g, m| {
                let l = leaves(g, m);
                let rho = pearson_matrix(g, l[0], l[1], dwdr.eps)?;
                Ok((barlow_twins_loss(g, rho, dwdr.lambda)?, l))
            },
            h,
            h5,
            floor,
        )
    }));

    checks.push(run_check("instance", n, cfg.loss_tol, cfg, |rng| {
        let inputs = [normal(b, c, rng), normal(b, c, rng)];
        let y = labels(b, c, rng);
        check_function(
            &inputs,
            |g, m| {
                let l = leaves(g, m);
                Ok((instance_loss(g, l[0], l[1], &y)?, l))
            },
            h,
            h5,
            floor,
        )
    }));

    checks.push(run_check("dwdr", n, cfg.loss_tol, cfg, |rng| {
        let inputs = [normal(b, d, rng), normal(b, d, rng)];
        check_function(
            &inputs,
            |g, m| {
                let l = leaves(g, m);
                Ok((dwdr_loss(g, l[0], l[1], &dwdr)?, l))
            },
            h,
            h5,
            floor,
        )
    }));

    checks.push(run_check("total", n, cfg.loss_tol, cfg, |rng| {
        // Features of both platforms through one linear classifier.
        let inputs = [normal(b, d, rng), normal(b, d, rng), normal(d, c, rng)];
        let y = labels(b, c, rng);
        check_function(
            &inputs,
            |g, m| {
                let l = leaves(g, m);
                let z1 = g.matmul(l[0], l[2])?;
                let z2 = g.matmul(l[1], l[2])?;
                let l_id = instance_loss(g, z1, z2, &y)?;
                let l_dwdr = dwdr_loss(g, l[0], l[1], &dwdr)?;
                Ok((total_loss(g, l_id, l_dwdr, dwdr.alpha)?, l))
            },
            h,
            h5,
            floor,
        )
    }));

    for (name, variant) in [
        ("triplet_hard", TripletVariant::HardMargin),
        ("triplet_soft", TripletVariant::SoftMargin),
    ] {
        let tcfg = TripletConfig { variant, ..TripletConfig::default() };
        checks.push(run_check(name, n, cfg.loss_tol, cfg, |rng| {
            let inputs = triplet_inputs(cfg, tcfg.margin, rng);
            check_function(
                &inputs,
                |g, m| {
                    let l = leaves(g, m);
                    Ok((triplet_loss(g, l[0], l[1], l[2], &tcfg)?, l))
                },
                h,
                h5,
                floor,
            )
        }));
    }

    checks.push(run_check("composite", n, cfg.composite_tol, cfg, |rng| composite_agreement(cfg, rng)));
    GradCheckReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::BackwardRule;

    #[test]
    fn fd_of_sum_of_squares() {
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let g = finite_diff_grad(|m| m.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.get(0, 0) - 2.0).abs() < 1e-8);
        assert!((g.get(0, 1) - 4.0).abs() < 1e-8);
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let x = DenseMatrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64);
        let g = finite_diff_grad(|_| 4.2, &x, 1e-5);
        assert!(g.max_abs() < 1e-10);
    }

    /// Squares its input but reports the gradient of a cube.
    struct WrongSquare;

    impl BackwardRule for WrongSquare {
        fn name(&self) -> &str {
            "wrong_square"
        }

        fn backward(&self, grad_out: &DenseMatrix, inputs: &[&DenseMatrix], _: &DenseMatrix) -> Vec<DenseMatrix> {
            vec![inputs[0].zip_map(grad_out, |x, g| 3.0 * x * x * g).unwrap()]
        }
    }

    struct RightSquare;

    impl BackwardRule for RightSquare {
        fn name(&self) -> &str {
            "square"
        }

        fn backward(&self, grad_out: &DenseMatrix, inputs: &[&DenseMatrix], _: &DenseMatrix) -> Vec<DenseMatrix> {
            vec![inputs[0].zip_map(grad_out, |x, g| 2.0 * x * g).unwrap()]
        }
    }

    fn square_check(rule: fn() -> Box<dyn BackwardRule>) -> Agreement {
        let x = DenseMatrix::from_fn(3, 3, |r, c| 0.3 + r as f64 - 0.7 * c as f64);
        check_function(
            &[x],
            |g, m| {
                let leaf = g.param(m[0].clone());
                let value = m[0].map(|v| v * v);
                let sq = g.custom(&[leaf], value, rule());
                Ok((g.sum_all(sq), vec![leaf]))
            },
            1e-5,
            1e-3,
            1e-8,
        )
        .unwrap()
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        assert!(square_check(|| Box::new(RightSquare)).within(1e-6, 1e-8));
        let bad = square_check(|| Box::new(WrongSquare));
        assert!(!bad.within(1e-6, 1e-8));
        assert!(bad.max_rel_err > 0.1);
    }

    #[test]
    fn backward_agrees_with_fd_on_random_compositions() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(seed, 0);
            let inputs = [normal(4, 3, &mut rng), normal(3, 5, &mut rng)];
            let k = seed % 4;
            let a = check_function(
                &inputs,
                |g, m| {
                    let l = leaves(g, m);
                    let p = g.matmul(l[0], l[1])?;
                    let q = match k {
                        0 => g.softplus(p),
                        1 => g.log_softmax_rows(p)?,
                        2 => {
                            let s = g.pow_const(p, 2.0)?;
                            g.offset(s, 1.0)
                        }
                        _ => {
                            let t = g.transpose(p);
                            let sq = g.matmul(p, t)?;
                            let back = g.matmul(sq, p)?;
                            g.scale(back, 0.1)
                        }
                    };
                    let r = g.mul(q, p)?;
                    Ok((g.sum_all(r), l))
                },
                1e-5,
                1e-3,
                1e-8,
            )
            .unwrap();
            assert!(a.within(1e-6, 1e-8), "seed {seed}: {a:?}");
        }
    }

    #[test]
    fn report_names_every_check() {
        let cfg = GradCheckConfig { instances: 2, ..GradCheckConfig::default() };
        let report = run_suite(&cfg);
        let names: Vec<_> = report.checks.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, CHECK_NAMES);
    }
}

