//! Reverse-mode automatic differentiation over [`DenseMatrix`] values.
//!
//! A [`Graph`] is a single-use tape: operations append nodes in creation
//! order (which is a topological order), and [`Graph::backward`] walks the
//! nodes in reverse exactly once. Gradients accumulate additively when a
//! node fans out to several consumers.
//!
//! Binary elementwise ops broadcast along any axis of length 1, so a `1×d`
//! bias adds to a `b×d` batch and a `1×1` scalar combines with anything.

use std::fmt;

use crate::error::{dim_err, Error, Result};
use crate::matrix::DenseMatrix;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied local vector-Jacobian product.
///
/// `backward` receives the upstream gradient, the parent values and the
/// node's own value, and returns one gradient per parent (same shapes).
pub trait BackwardRule {
    fn name(&self) -> &str;
    fn backward(
        &self,
        grad_out: &DenseMatrix,
        inputs: &[&DenseMatrix],
        output: &DenseMatrix,
    ) -> Vec<DenseMatrix>;
}

enum Rule {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Pow(f64),
    Abs,
    Scale(f64),
    Offset,
    Clamp(f64, f64),
    Relu,
    Softplus,
    SumAll,
    SumDiag,
    SumOffDiag,
    MeanRows,
    SumCols,
    Diag,
    LogSoftmaxRows,
    Custom(Box<dyn BackwardRule>),
}

impl fmt::Debug for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Custom(r) => write!(f, "Custom({})", r.name()),
            Rule::Leaf => write!(f, "Leaf"),
            Rule::MatMul => write!(f, "MatMul"),
            Rule::Transpose => write!(f, "Transpose"),
            Rule::Add => write!(f, "Add"),
            Rule::Sub => write!(f, "Sub"),
            Rule::Mul => write!(f, "Mul"),
            Rule::Div => write!(f, "Div"),
            Rule::Pow(e) => write!(f, "Pow({e})"),
            Rule::Abs => write!(f, "Abs"),
            Rule::Scale(k) => write!(f, "Scale({k})"),
            Rule::Offset => write!(f, "Offset"),
            Rule::Clamp(lo, hi) => write!(f, "Clamp({lo}, {hi})"),
            Rule::Relu => write!(f, "Relu"),
            Rule::Softplus => write!(f, "Softplus"),
            Rule::SumAll => write!(f, "SumAll"),
            Rule::SumDiag => write!(f, "SumDiag"),
            Rule::SumOffDiag => write!(f, "SumOffDiag"),
            Rule::MeanRows => write!(f, "MeanRows"),
            Rule::SumCols => write!(f, "SumCols"),
            Rule::Diag => write!(f, "Diag"),
            Rule::LogSoftmaxRows => write!(f, "LogSoftmaxRows"),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    grad: Option<DenseMatrix>,
    parents: Vec<NodeId>,
    rule: Rule,
    requires_grad: bool,
}

/// Which reduction [`Graph::reduce`] performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    SumAll,
    SumDiag,
    SumOffDiag,
}

/// Gradients of a scalar loss with respect to the nodes of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `id`, or `None` when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, zero-filled when the loss does not reach it.
    pub fn wrt(&self, id: NodeId) -> DenseMatrix {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0]
            .value
            .as_scalar()
            .expect("scalar() called on a non-scalar node")
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient stored on the node by the last [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    fn push(&mut self, value: DenseMatrix, parents: Vec<NodeId>, rule: Rule) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            parents,
            rule,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: DenseMatrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            parents: Vec::new(),
            rule: Rule::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable input; gradients are reported for it.
    pub fn param(&mut self, value: DenseMatrix) -> NodeId {
        self.push_leaf(value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push_leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, vec![a, b], Rule::MatMul))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, vec![a], Rule::Transpose)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(value, vec![a, b], Rule::Add))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(value, vec![a, b], Rule::Sub))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(value, vec![a, b], Rule::Mul))
    }

    /// Elementwise quotient; any zero in the denominator is a numeric error.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Numeric("division by a zero entry".into()));
        }
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(value, vec![a, b], Rule::Div))
    }

    /// `x^exponent` elementwise for a constant, non-negative exponent.
    ///
    /// Exponent 0 yields the constant 1 everywhere (so `0^0 = 1`) with zero
    /// gradient. At a zero base the derivative is taken as 1 for exponent 1
    /// and 0 otherwise.
    pub fn pow_const(&mut self, x: NodeId, exponent: f64) -> Result<NodeId> {
        if !(exponent >= 0.0) || !exponent.is_finite() {
            return Err(Error::Config(format!(
                "pow exponent must be a finite non-negative constant, got {exponent}"
            )));
        }
        let integral = exponent.fract() == 0.0;
        if !integral && self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric(
                "negative base with non-integer exponent".into(),
            ));
        }
        let value = self.value(x).map(|v| pow_value(v, exponent));
        Ok(self.push(value, vec![x], Rule::Pow(exponent)))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::abs);
        self.push(value, vec![x], Rule::Abs)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let value = self.value(x).scale(k);
        self.push(value, vec![x], Rule::Scale(k))
    }

    /// `x + k` for a constant `k`.
    pub fn offset(&mut self, x: NodeId, k: f64) -> NodeId {
        let value = self.value(x).map(|v| v + k);
        self.push(value, vec![x], Rule::Offset)
    }

    /// Clamps into `[lo, hi]`; gradient passes where the input is inside the
    /// closed interval.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(value, vec![x], Rule::Clamp(lo, hi))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, vec![x], Rule::Relu)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self
            .value(x)
            .map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.push(value, vec![x], Rule::Softplus)
    }

    pub fn reduce(&mut self, kind: Reduce, x: NodeId) -> Result<NodeId> {
        let m = self.value(x);
        let (r, c) = m.shape();
        if kind != Reduce::SumAll && r != c {
            return dim_err(format!("{kind:?} needs a square input, got {r}x{c}"));
        }
        let total = match kind {
            Reduce::SumAll => m.sum(),
            Reduce::SumDiag => (0..r).map(|i| m.get(i, i)).sum(),
            Reduce::SumOffDiag => {
                let mut s = 0.0;
                for i in 0..r {
                    for j in 0..c {
                        if i != j {
                            s += m.get(i, j);
                        }
                    }
                }
                s
            }
        };
        let rule = match kind {
            Reduce::SumAll => Rule::SumAll,
            Reduce::SumDiag => Rule::SumDiag,
            Reduce::SumOffDiag => Rule::SumOffDiag,
        };
        Ok(self.push(DenseMatrix::scalar(total), vec![x], rule))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.reduce(Reduce::SumAll, x)
            .expect("sum_all accepts any shape")
    }

    /// Column means: `b×d → 1×d`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let m = self.value(x);
        let (b, d) = m.shape();
        let mut out = vec![0.0; d];
        for r in 0..b {
            for (o, v) in out.iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / b as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let value = DenseMatrix::from_vec(1, d, out).expect("shape");
        self.push(value, vec![x], Rule::MeanRows)
    }

    /// Row sums: `b×d → b×1`.
    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let m = self.value(x);
        let sums = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
        let value = DenseMatrix::from_vec(m.rows(), 1, sums).expect("shape");
        self.push(value, vec![x], Rule::SumCols)
    }

    /// Diagonal of a square matrix as a `1×d` row.
    pub fn diag(&mut self, x: NodeId) -> Result<NodeId> {
        let m = self.value(x);
        if m.rows() != m.cols() {
            return dim_err(format!("diag needs a square input, got {:?}", m.shape()));
        }
        let d = m.rows();
        let value = DenseMatrix::from_fn(1, d, |_, i| m.get(i, i));
        Ok(self.push(value, vec![x], Rule::Diag))
    }

    /// Row-wise log-softmax, stabilized by subtracting the row maximum.
    pub fn log_softmax_rows(&mut self, z: NodeId) -> Result<NodeId> {
        let m = self.value(z);
        let (b, c) = m.shape();
        if c < 2 {
            return dim_err(format!("log_softmax_rows needs at least 2 columns, got {c}"));
        }
        let mut out = Vec::with_capacity(b * c);
        for r in 0..b {
            let row = m.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = DenseMatrix::from_vec(b, c, out)?;
        Ok(self.push(value, vec![z], Rule::LogSoftmaxRows))
    }

    /// Appends a node with a caller-supplied value and backward rule.
    pub fn custom(
        &mut self,
        inputs: &[NodeId],
        value: DenseMatrix,
        rule: Box<dyn BackwardRule>,
    ) -> NodeId {
        self.push(value, inputs.to_vec(), Rule::Custom(rule))
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// The tape is single-use: a second call fails with a contract error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this graph; build a new tape".into(),
            ));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; n];
        grads[loss.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad && !node.parents.is_empty() {
                let parent_grads = local_backward(&self.nodes, node, &g);
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            node.grad = g.clone();
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        // Only differentiable nodes carry gradients.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn pow_value(v: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else if e == 1.0 {
        v
    } else if e == 2.0 {
        v * v
    } else {
        v.powf(e)
    }
}

fn pow_deriv(v: f64, e: f64) -> f64 {
    if e == 0.0 {
        0.0
    } else if e == 1.0 {
        1.0
    } else if v == 0.0 {
        0.0
    } else if e == 2.0 {
        2.0 * v
    } else {
        e * v.powf(e - 1.0)
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => dim_err(format!("shapes {a:?} and {b:?} do not broadcast")),
    }
}

#[inline]
fn bget(m: &DenseMatrix, r: usize, c: usize) -> f64 {
    let rr = if m.rows() == 1 { 0 } else { r };
    let cc = if m.cols() == 1 { 0 } else { c };
    m.get(rr, cc)
}

fn broadcast_zip(
    a: &DenseMatrix,
    b: &DenseMatrix,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DenseMatrix> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (r, c) = broadcast_shape(a.shape(), b.shape())?;
    Ok(DenseMatrix::from_fn(r, c, |i, j| f(bget(a, i, j), bget(b, i, j))))
}

/// Sums a full-shape gradient down to `shape` over broadcast axes.
fn unbroadcast(g: DenseMatrix, shape: (usize, usize)) -> DenseMatrix {
    if g.shape() == shape {
        return g;
    }
    let mut out = DenseMatrix::zeros(shape.0, shape.1);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let rr = if shape.0 == 1 { 0 } else { r };
            let cc = if shape.1 == 1 { 0 } else { c };
            let v = out.get(rr, cc) + g.get(r, c);
            out.set(rr, cc, v);
        }
    }
    out
}

fn local_backward(nodes: &[Node], node: &Node, g: &DenseMatrix) -> Vec<DenseMatrix> {
    let val = |i: usize| &nodes[node.parents[i].0].value;
    let out = &node.value;
    match &node.rule {
        Rule::Leaf => Vec::new(),
        Rule::MatMul => {
            let (a, b) = (val(0), val(1));
            vec![
                g.matmul_t(b).expect("matmul backward"),
                a.t_matmul(g).expect("matmul backward"),
            ]
        }
        Rule::Transpose => vec![g.transpose()],
        Rule::Add => vec![
            unbroadcast(g.clone(), val(0).shape()),
            unbroadcast(g.clone(), val(1).shape()),
        ],
        Rule::Sub => vec![
            unbroadcast(g.clone(), val(0).shape()),
            unbroadcast(g.scale(-1.0), val(1).shape()),
        ],
        Rule::Mul => {
            let (a, b) = (val(0), val(1));
            let ga = DenseMatrix::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * bget(b, r, c));
            let gb = DenseMatrix::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * bget(a, r, c));
            vec![unbroadcast(ga, a.shape()), unbroadcast(gb, b.shape())]
        }
        Rule::Div => {
            let (a, b) = (val(0), val(1));
            let ga = DenseMatrix::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) / bget(b, r, c));
            let gb = DenseMatrix::from_fn(g.rows(), g.cols(), |r, c| {
                let d = bget(b, r, c);
                -g.get(r, c) * bget(a, r, c) / (d * d)
            });
            vec![unbroadcast(ga, a.shape()), unbroadcast(gb, b.shape())]
        }
        Rule::Pow(e) => {
            let x = val(0);
            vec![g.zip_map(x, |gv, xv| gv * pow_deriv(xv, *e)).expect("shape")]
        }
        Rule::Abs => {
            let x = val(0);
            vec![g
                .zip_map(x, |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })
                .expect("shape")]
        }
        Rule::Scale(k) => vec![g.scale(*k)],
        Rule::Offset => vec![g.clone()],
        Rule::Clamp(lo, hi) => {
            let x = val(0);
            vec![g
                .zip_map(x, |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                .expect("shape")]
        }
        Rule::Relu => {
            let x = val(0);
            vec![g
                .zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                .expect("shape")]
        }
        Rule::Softplus => {
            let x = val(0);
            vec![g
                .zip_map(x, |gv, xv| gv * sigmoid(xv))
                .expect("shape")]
        }
        Rule::SumAll => {
            let (r, c) = val(0).shape();
            vec![DenseMatrix::filled(r, c, g.data()[0])]
        }
        Rule::SumDiag => {
            let n = val(0).rows();
            let s = g.data()[0];
            vec![DenseMatrix::from_fn(n, n, |i, j| if i == j { s } else { 0.0 })]
        }
        Rule::SumOffDiag => {
            let n = val(0).rows();
            let s = g.data()[0];
            vec![DenseMatrix::from_fn(n, n, |i, j| if i != j { s } else { 0.0 })]
        }
        Rule::MeanRows => {
            let (b, d) = val(0).shape();
            let inv = 1.0 / b as f64;
            vec![DenseMatrix::from_fn(b, d, |_, c| g.get(0, c) * inv)]
        }
        Rule::SumCols => {
            let (b, d) = val(0).shape();
            vec![DenseMatrix::from_fn(b, d, |r, _| g.get(r, 0))]
        }
        Rule::Diag => {
            let n = val(0).rows();
            vec![DenseMatrix::from_fn(n, n, |i, j| if i == j { g.get(0, i) } else { 0.0 })]
        }
        Rule::LogSoftmaxRows => {
            let (b, c) = out.shape();
            let mut gin = DenseMatrix::zeros(b, c);
            for r in 0..b {
                let gsum: f64 = g.row(r).iter().sum();
                for j in 0..c {
                    gin.set(r, j, g.get(r, j) - out.get(r, j).exp() * gsum);
                }
            }
            vec![gin]
        }
        Rule::Custom(rule) => {
            let inputs: Vec<&DenseMatrix> = (0..node.parents.len()).map(val).collect();
            rule.backward(g, &inputs, out)
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Column standardization with population statistics.
///
/// Returns `(z, mu, sigma)` where `mu` and `sigma` are the `1×d` column mean
/// and population standard deviation and `z = (x - mu) / (sigma + eps)`.
/// All three stay on the graph.
pub fn standardize_columns(
    g: &mut Graph,
    x: NodeId,
    eps: f64,
) -> Result<(NodeId, NodeId, NodeId)> {
    let b = g.value(x).rows();
    if b < 2 {
        return Err(Error::DegenerateBatch(format!(
            "standardize_columns needs at least 2 rows, got {b}"
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mu = g.mean_rows(x);
    let centered = g.sub(x, mu)?;
    let sq = g.pow_const(centered, 2.0)?;
    let var = g.mean_rows(sq);
    let sigma = g.pow_const(var, 0.5)?;
    let denom = g.offset(sigma, eps);
    let z = g.div(centered, denom)?;
    Ok((z, mu, sigma))
}
