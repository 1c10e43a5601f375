//! Tape-style reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its value; [`Graph::backward`]
//! walks the tape once in reverse. Scalars are `1 × 1` matrices and batches
//! are row-major `n × features`.

use crate::diffnet::params::{Gradient, ParamStore};
use crate::error::{Error, Result};
use crate::linalg::Mat64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    Minimum(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    RowMean(NodeId),
    SoftmaxRows(NodeId),
}

struct Node {
    value: Mat64,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(usize, NodeId)>,
    switches: Vec<f64>,
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, id: NodeId) -> &Mat64 {
        &self.nodes[id.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(Error::NotScalar(v.shape()));
        }
        Ok(v[(0, 0)])
    }

    /// Branch-selecting quantities of every non-smooth op recorded so far
    /// (ReLU pre-activations, clamp bound distances, `a − b` of minima).
    /// Their signs fix the active branch; magnitudes near zero flag kinks.
    pub fn switch_values(&self) -> &[f64] {
        &self.switches
    }

    fn push(&mut self, value: Mat64, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat64) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Mat64::from_vec_unchecked(1, 1, vec![v]))
    }

    /// Leaf for the named parameter; repeated calls return the same node so
    /// shared weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if let Some((_, id)) = self.params.iter().find(|(i, _)| *i == idx) {
            return Ok(*id);
        }
        let id = self.push(store.tensor(idx).clone(), Op::Param(idx));
        self.params.push((idx, id));
        Ok(id)
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                expected: sa,
                found: sb,
            });
        }
        Ok(())
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Mat64 {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Mat64::from_vec_unchecked(va.rows(), va.cols(), data)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    fn check_row(&self, a: NodeId, row: NodeId) -> Result<()> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::ShapeMismatch {
                expected: (1, va.cols()),
                found: vr.shape(),
            });
        }
        Ok(())
    }

    /// `a + 1·row`, broadcasting a `1 × c` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check_row(a, row)?;
        let v = broadcast_row(self.value(a), self.value(row), |x, y| x + y);
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// `a ⊙ 1·row`.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check_row(a, row)?;
        let v = broadcast_row(self.value(a), self.value(row), |x, y| x * y);
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let pre = self.value(a).clone();
        self.switches.extend_from_slice(pre.as_slice());
        let v = pre.map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Elementwise `log(1 + eˣ)`; `softplus(−Δ)` is the Bradley–Terry loss.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let src = self.value(a).clone();
        for x in src.as_slice() {
            self.switches.push(x - lo);
            self.switches.push(hi - x);
        }
        let v = src.map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let diffs: Vec<f64> = self
            .value(a)
            .as_slice()
            .iter()
            .zip(self.value(b).as_slice())
            .map(|(x, y)| x - y)
            .collect();
        self.switches.extend(diffs);
        let v = self.zip(a, b, f64::min);
        Ok(self.push(v, Op::Minimum(a, b)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).as_slice().iter().sum();
        self.push(Mat64::from_vec_unchecked(1, 1, vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let s = va.as_slice().iter().sum::<f64>() / va.as_slice().len() as f64;
        self.push(Mat64::from_vec_unchecked(1, 1, vec![s]), Op::Mean(a))
    }

    /// `n × c → n × 1`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
        let v = Mat64::from_vec_unchecked(va.rows(), 1, data);
        self.push(v, Op::RowSum(a))
    }

    /// `n × c → n × 1`.
    pub fn row_mean(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let c = va.cols() as f64;
        let data = (0..va.rows())
            .map(|r| va.row(r).iter().sum::<f64>() / c)
            .collect();
        let v = Mat64::from_vec_unchecked(va.rows(), 1, data);
        self.push(v, Op::RowMean(a))
    }

    /// Exponential normalization of every row onto the simplex.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Exact gradient of the scalar `loss` with respect to every parameter of
    /// `store`; parameters absent from the tape get zeros.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<Gradient> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        let mut adj: Vec<Option<Mat64>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Mat64::from_vec_unchecked(1, 1, vec![1.0]));
        let mut grad = Gradient::zeros_like(store);
        for i in (0..=loss.0).rev() {
            let Some(up) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Constant => {}
                Op::Param(idx) => {
                    let g = grad.tensor_mut(idx);
                    for (o, u) in g.as_mut_slice().iter_mut().zip(up.as_slice()) {
                        *o += u;
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = up.matmul(&self.value(b).transpose())?;
                    let gb = self.value(a).transpose().matmul(&up)?;
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, a, up.clone());
                    accumulate(&mut adj, b, up);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, b, up.scaled(-1.0));
                    accumulate(&mut adj, a, up);
                }
                Op::Mul(a, b) => {
                    let ga = hadamard(&up, self.value(b));
                    let gb = hadamard(&up, self.value(a));
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut adj, row, column_sums(&up));
                    accumulate(&mut adj, a, up);
                }
                Op::MulRow(a, row) => {
                    let ga = broadcast_row(&up, self.value(row), |x, y| x * y);
                    let gr = column_sums(&hadamard(&up, self.value(a)));
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, row, gr);
                }
                Op::Scale(a, s) => accumulate(&mut adj, a, up.scaled(s)),
                Op::AddScalar(a) => accumulate(&mut adj, a, up),
                Op::Tanh(a) => {
                    let d = node.value.map(|t| 1.0 - t * t);
                    accumulate(&mut adj, a, hadamard(&up, &d));
                }
                Op::Relu(a) => {
                    let d = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut adj, a, hadamard(&up, &d));
                }
                Op::Exp(a) => accumulate(&mut adj, a, hadamard(&up, &node.value)),
                Op::Softplus(a) => {
                    let d = self.value(a).map(sigmoid);
                    accumulate(&mut adj, a, hadamard(&up, &d));
                }
                Op::Square(a) => {
                    let d = self.value(a).map(|x| 2.0 * x);
                    accumulate(&mut adj, a, hadamard(&up, &d));
                }
                Op::Clamp(a, lo, hi) => {
                    let d = self
                        .value(a)
                        .map(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 });
                    accumulate(&mut adj, a, hadamard(&up, &d));
                }
                Op::Minimum(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let mask_a = Mat64::from_vec_unchecked(
                        va.rows(),
                        va.cols(),
                        va.as_slice()
                            .iter()
                            .zip(vb.as_slice())
                            .map(|(x, y)| if x <= y { 1.0 } else { 0.0 })
                            .collect(),
                    );
                    let mask_b = mask_a.map(|m| 1.0 - m);
                    accumulate(&mut adj, a, hadamard(&up, &mask_a));
                    accumulate(&mut adj, b, hadamard(&up, &mask_b));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(a).shape();
                    accumulate(
                        &mut adj,
                        a,
                        Mat64::from_vec_unchecked(r, c, vec![up[(0, 0)]; r * c]),
                    );
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(a).shape();
                    let g = up[(0, 0)] / (r * c) as f64;
                    accumulate(&mut adj, a, Mat64::from_vec_unchecked(r, c, vec![g; r * c]));
                }
                Op::RowSum(a) => {
                    let (r, c) = self.value(a).shape();
                    accumulate(&mut adj, a, Mat64::from_fn(r, c, |i, _| up[(i, 0)]));
                }
                Op::RowMean(a) => {
                    let (r, c) = self.value(a).shape();
                    let inv = 1.0 / c as f64;
                    accumulate(&mut adj, a, Mat64::from_fn(r, c, |i, _| up[(i, 0)] * inv));
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let mut g = Mat64::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let inner = crate::linalg::dot(up.row(r), s.row(r));
                        for c in 0..s.cols() {
                            g[(r, c)] = s[(r, c)] * (up[(r, c)] - inner);
                        }
                    }
                    accumulate(&mut adj, a, g);
                }
            }
        }
        Ok(grad)
    }
}

fn accumulate(adj: &mut [Option<Mat64>], id: NodeId, g: Mat64) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (o, v) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *o += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Mat64, b: &Mat64) -> Mat64 {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .collect();
    Mat64::from_vec_unchecked(a.rows(), a.cols(), data)
}

fn column_sums(m: &Mat64) -> Mat64 {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    Mat64::from_vec_unchecked(1, m.cols(), out)
}

pub(crate) fn broadcast_row(a: &Mat64, row: &Mat64, f: impl Fn(f64, f64) -> f64) -> Mat64 {
    let c = a.cols();
    let r = row.as_slice();
    let data = a
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, x)| f(*x, r[i % c]))
        .collect();
    Mat64::from_vec_unchecked(a.rows(), c, data)
}

pub(crate) fn softmax_rows(m: &Mat64) -> Mat64 {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = m.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (c, e) in exps.into_iter().enumerate() {
            out[(r, c)] = e / z;
        }
    }
    out
}
