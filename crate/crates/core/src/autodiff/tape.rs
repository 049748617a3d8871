use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::{Csr, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitives.
///
/// `TanhC`, `TanC`, `SinhC` and `SinC` are `f(x) / x` with the removable
/// singularity at 0 filled in; the exponential maps are built from them so
/// that a zero tangent vector has a well-defined gradient. `TanCClamped(m)`
/// is `tan(min(x, m)) / x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Neg,
    Sqrt,
    Exp,
    Log,
    Tanh,
    Tan,
    Sin,
    Cos,
    Cosh,
    Sinh,
    /// Input clamped to `[-1, 1]`; zero gradient outside the open interval.
    Acos,
    /// Input clamped to `>= 1`; zero gradient at or below 1.
    Acosh,
    Softplus,
    Relu,
    LeakyRelu(f64),
    TanhC,
    TanC,
    TanCClamped(f64),
    SinhC,
    SinC,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Sqrt => "sqrt",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Tan => "tan",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Cosh => "cosh",
            Unary::Sinh => "sinh",
            Unary::Acos => "acos",
            Unary::Acosh => "acosh",
            Unary::Softplus => "softplus",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::TanhC => "tanhc",
            Unary::TanC => "tanc",
            Unary::TanCClamped(_) => "tanc_clamped",
            Unary::SinhC => "sinhc",
            Unary::SinC => "sinc",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Sqrt => x.max(0.0).sqrt(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Tan => x.tan(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Cosh => x.cosh(),
            Unary::Sinh => x.sinh(),
            Unary::Acos => x.clamp(-1.0, 1.0).acos(),
            Unary::Acosh => x.max(1.0).acosh(),
            Unary::Softplus => softplus(x),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::TanhC => series_or(x, |t| t.tanh() / t, [-1.0 / 3.0, 2.0 / 15.0]),
            Unary::TanC => series_or(x, |t| t.tan() / t, [1.0 / 3.0, 2.0 / 15.0]),
            Unary::TanCClamped(m) => {
                if x > m {
                    m.tan() / x
                } else {
                    Unary::TanC.eval(x)
                }
            }
            Unary::SinhC => series_or(x, |t| t.sinh() / t, [1.0 / 6.0, 1.0 / 120.0]),
            Unary::SinC => series_or(x, |t| t.sin() / t, [-1.0 / 6.0, 1.0 / 120.0]),
        }
    }

    /// Derivative at `x`, given the forward value `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Sqrt => {
                if x > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Tan => 1.0 + y * y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Cosh => x.sinh(),
            Unary::Sinh => x.cosh(),
            Unary::Acos => {
                if x > -1.0 && x < 1.0 {
                    -1.0 / ((1.0 - x) * (1.0 + x)).sqrt()
                } else {
                    0.0
                }
            }
            Unary::Acosh => {
                if x > 1.0 {
                    1.0 / ((x - 1.0) * (x + 1.0)).sqrt()
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            // (x f'(x) - f(x)) / x^2 for f(x)/x, with series near zero.
            Unary::TanhC => odd_series_or(
                x,
                |t| {
                    let th = t.tanh();
                    (t * (1.0 - th * th) - th) / (t * t)
                },
                [-2.0 / 3.0, 8.0 / 15.0],
            ),
            Unary::TanC => odd_series_or(
                x,
                |t| {
                    let tn = t.tan();
                    (t * (1.0 + tn * tn) - tn) / (t * t)
                },
                [2.0 / 3.0, 8.0 / 15.0],
            ),
            Unary::TanCClamped(m) => {
                if x > m {
                    -m.tan() / (x * x)
                } else {
                    Unary::TanC.derivative(x, y)
                }
            }
            Unary::SinhC => odd_series_or(x, |t| (t * t.cosh() - t.sinh()) / (t * t), [1.0 / 3.0, 1.0 / 30.0]),
            Unary::SinC => odd_series_or(x, |t| (t * t.cos() - t.sin()) / (t * t), [-1.0 / 3.0, 1.0 / 30.0]),
        }
    }
}

const SERIES_CUTOFF: f64 = 1e-3;

/// `f(x)` away from zero, `1 + c0 x^2 + c1 x^4` near it.
fn series_or(x: f64, f: impl Fn(f64) -> f64, c: [f64; 2]) -> f64 {
    if x.abs() < SERIES_CUTOFF {
        let x2 = x * x;
        1.0 + c[0] * x2 + c[1] * x2 * x2
    } else {
        f(x)
    }
}

/// `f(x)` away from zero, `c0 x + c1 x^3` near it.
fn odd_series_or(x: f64, f: impl Fn(f64) -> f64, c: [f64; 2]) -> f64 {
    if x.abs() < SERIES_CUTOFF {
        c[0] * x + c[1] * x * x * x
    } else {
        f(x)
    }
}

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

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// A recorded operation and the ids of its inputs.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Unary(Unary, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Sum of all entries, scalar output.
    Sum(NodeId),
    Mean(NodeId),
    /// Row sums, `[r, c] -> [r, 1]`.
    SumCols(NodeId),
    /// Row-wise Euclidean norm, `[r, c] -> [r, 1]`; zero gradient at zero rows.
    Norm2Rows(NodeId),
    /// Row softmax; masked-out entries (`false`) get probability 0.
    Softmax(NodeId, Option<Rc<Vec<bool>>>),
    /// Row log-softmax; masked-out entries are set to 0 and carry no gradient.
    LogSoftmax(NodeId, Option<Rc<Vec<bool>>>),
    /// Column-wise concatenation.
    Concat(Vec<NodeId>),
    /// Columns `start..end`.
    SliceCols(NodeId, usize, usize),
    BroadcastTo(NodeId, Vec<usize>),
    /// Same data in row-major order under a new shape.
    Reshape(NodeId, Vec<usize>),
    /// Picks `(row, col)` entries into a `[m, 1]` column.
    Gather(NodeId, Rc<Vec<(usize, usize)>>),
    /// `out[i][j] = |x_i - x_j|^2` over rows of `x`; with `true` the first
    /// coordinate's term is subtracted (Lorentz).
    PairwiseSqDist(NodeId, bool),
    /// `out[i][j] = <x_i, x_j>`; with `true` the first coordinate is negated (Lorentz).
    PairwiseInner(NodeId, bool),
    /// Constant sparse matrix times a dense input.
    SpMatMul(Rc<Csr>, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Unary(u, _) => u.name(),
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumCols(_) => "sum_cols",
            Op::Norm2Rows(_) => "norm2",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Concat(_) => "concat",
            Op::SliceCols(..) => "slice",
            Op::BroadcastTo(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::PairwiseInner(..) => "pairwise_inner",
            Op::SpMatMul(..) => "spmm",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Unary(_, a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a)
            | Op::Norm2Rows(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::SliceCols(a, ..)
            | Op::BroadcastTo(a, _)
            | Op::Reshape(a, _)
            | Op::Gather(a, _)
            | Op::PairwiseSqDist(a, _)
            | Op::PairwiseInner(a, _)
            | Op::SpMatMul(_, a) => vec![*a],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a computation, differentiated by [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; zeros when `id` does not influence the output.
    pub fn get(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(self.shapes.get(id.0).map_or(&[][..], |s| &s[..])),
        }
    }
}

impl Tape {
    /// A tape in checked mode: every recorded value must be finite.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
        }
    }

    /// A tape that tolerates non-finite values.
    pub fn unchecked() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Record a leaf (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    /// Validate the inputs of `op`, evaluate it and append it.
    pub fn record(&mut self, op: Op) -> Result<NodeId> {
        for id in op.inputs() {
            if id.0 >= self.nodes.len() {
                return Err(Error::Graph(format!(
                    "{} refers to node {} but the tape has {} nodes",
                    op.name(),
                    id.0,
                    self.nodes.len()
                )));
            }
        }
        let value = match &op {
            Op::Leaf => return Err(Error::Graph("use Tape::leaf to add leaves".into())),
            _ => self.forward(&op)?,
        };
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn forward(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => binary(Binary::Add, v(a), v(b))?,
            Op::Sub(a, b) => binary(Binary::Sub, v(a), v(b))?,
            Op::Mul(a, b) => binary(Binary::Mul, v(a), v(b))?,
            Op::Div(a, b) => binary(Binary::Div, v(a), v(b))?,
            Op::Unary(u, a) => v(a).map(|x| u.eval(x)),
            Op::MatMul(a, b) => matmul(v(a), v(b))?,
            Op::Transpose(a) => transpose(v(a)),
            Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
            Op::Mean(a) => {
                let t = v(a);
                if t.is_empty() {
                    return Err(Error::Shape("mean of an empty tensor".into()));
                }
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::SumCols(a) => {
                let t = v(a);
                let (r, _) = t.dims2();
                Tensor::column((0..r).map(|i| t.row_slice(i).iter().sum()).collect())
            }
            Op::Norm2Rows(a) => {
                let t = v(a);
                let (r, _) = t.dims2();
                Tensor::column(
                    (0..r)
                        .map(|i| t.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                        .collect(),
                )
            }
            Op::Softmax(a, mask) => {
                let t = v(a);
                check_mask(t, mask.as_deref())?;
                row_softmax(t, mask.as_deref(), false)?
            }
            Op::LogSoftmax(a, mask) => {
                let t = v(a);
                check_mask(t, mask.as_deref())?;
                row_softmax(t, mask.as_deref(), true)?
            }
            Op::Concat(xs) => {
                if xs.is_empty() {
                    return Err(Error::Shape("concat of nothing".into()));
                }
                let r = v(&xs[0]).rows();
                if let Some(bad) = xs.iter().find(|x| v(x).rows() != r) {
                    return Err(Error::Dimension {
                        expected: r,
                        got: v(bad).rows(),
                    });
                }
                let total: usize = xs.iter().map(|x| v(x).cols()).sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for x in xs {
                        data.extend_from_slice(v(x).row_slice(i));
                    }
                }
                Tensor::from_parts_unchecked(vec![r, total], data)
            }
            Op::SliceCols(a, start, end) => {
                let t = v(a);
                let (r, c) = t.dims2();
                if start > end || *end > c {
                    return Err(Error::Shape(format!("column range {start}..{end} out of 0..{c}")));
                }
                let mut data = Vec::with_capacity(r * (end - start));
                for i in 0..r {
                    data.extend_from_slice(&t.row_slice(i)[*start..*end]);
                }
                Tensor::from_parts_unchecked(vec![r, end - start], data)
            }
            Op::Reshape(a, shape) => Tensor::new(shape.clone(), v(a).data().to_vec())?,
            Op::BroadcastTo(a, shape) => {
                let target = Tensor::zeros(shape);
                if target.shape().len() > 2 {
                    return Err(Error::Shape("broadcast target rank > 2".into()));
                }
                binary(Binary::Add, &target, v(a)).and_then(|t| {
                    if t.dims2() == target.dims2() {
                        Ok(Tensor::from_parts_unchecked(shape.clone(), t.into_data()))
                    } else {
                        Err(Error::Shape(format!(
                            "cannot broadcast {:?} to {shape:?}",
                            v(a).shape()
                        )))
                    }
                })?
            }
            Op::Gather(a, idx) => {
                let t = v(a);
                let (r, c) = t.dims2();
                let mut out = Vec::with_capacity(idx.len());
                for &(i, j) in idx.iter() {
                    if i >= r || j >= c {
                        return Err(Error::Shape(format!("gather index ({i}, {j}) outside [{r}, {c}]")));
                    }
                    out.push(t.get(i, j));
                }
                Tensor::column(out)
            }
            Op::PairwiseSqDist(a, lorentz) => {
                let t = v(a);
                let lorentz = *lorentz;
                pairwise(t, |x, y| {
                    let s: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
                    if lorentz {
                        s - 2.0 * (x[0] - y[0]) * (x[0] - y[0])
                    } else {
                        s
                    }
                })
            }
            Op::PairwiseInner(a, lorentz) => {
                let t = v(a);
                let lorentz = *lorentz;
                if lorentz && t.cols() < 2 {
                    return Err(Error::Dimension {
                        expected: 2,
                        got: t.cols(),
                    });
                }
                pairwise(t, |x, y| inner(x, y, lorentz))
            }
            Op::SpMatMul(s, a) => {
                let t = v(a);
                if s.cols() != t.rows() {
                    return Err(Error::Dimension {
                        expected: s.cols(),
                        got: t.rows(),
                    });
                }
                s.matmul(t)
            }
        })
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("node {} is not on the tape", output.0)));
        }
        if !self.nodes[output.0].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(self.nodes[output.0].value.shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (input, contribution) in self.local_grads(node, &g)? {
                accumulate(&mut grads[input.0], contribution);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, reduce_to(g, v(a))), (*b, reduce_to(g, v(b)))],
            Op::Sub(a, b) => vec![(*a, reduce_to(g, v(a))), (*b, reduce_to(&g.map(|x| -x), v(b)))],
            Op::Mul(a, b) => {
                let ga = binary(Binary::Mul, g, v(b))?;
                let gb = binary(Binary::Mul, g, v(a))?;
                vec![(*a, reduce_to(&ga, v(a))), (*b, reduce_to(&gb, v(b)))]
            }
            Op::Div(a, b) => {
                let ga = binary(Binary::Div, g, v(b))?;
                // d(a/b)/db = -(a/b)/b
                let gb = binary(Binary::Mul, g, &binary(Binary::Div, out, v(b))?)?.map(|x| -x);
                vec![(*a, reduce_to(&ga, v(a))), (*b, reduce_to(&gb, v(b)))]
            }
            Op::Unary(u, a) => {
                let x = v(a);
                let data = x
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| if gi == 0.0 { 0.0 } else { gi * u.derivative(xi, yi) })
                    .collect();
                vec![(*a, Tensor::from_parts_unchecked(x.shape().to_vec(), data))]
            }
            Op::MatMul(a, b) => {
                let ga = matmul(g, &transpose(v(b)))?;
                let gb = matmul(&transpose(v(a)), g)?;
                vec![(*a, reshape_like(ga, v(a))), (*b, reshape_like(gb, v(b)))]
            }
            Op::Transpose(a) => vec![(*a, reshape_like(transpose(g), v(a)))],
            Op::Sum(a) => vec![(*a, Tensor::full(v(a).shape(), g.data()[0]))],
            Op::Mean(a) => {
                let n = v(a).len() as f64;
                vec![(*a, Tensor::full(v(a).shape(), g.data()[0] / n))]
            }
            Op::SumCols(a) => {
                let x = v(a);
                let (r, c) = x.dims2();
                let data = (0..r).flat_map(|i| core::iter::repeat_n(g.data()[i], c)).collect();
                vec![(*a, Tensor::from_parts_unchecked(x.shape().to_vec(), data))]
            }
            Op::Norm2Rows(a) => {
                let x = v(a);
                let (r, c) = x.dims2();
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    let n = out.data()[i];
                    if n > 0.0 {
                        let s = g.data()[i] / n;
                        for (d, xv) in data[i * c..(i + 1) * c].iter_mut().zip(x.row_slice(i)) {
                            *d = s * xv;
                        }
                    }
                }
                vec![(*a, Tensor::from_parts_unchecked(x.shape().to_vec(), data))]
            }
            Op::Softmax(a, mask) => {
                let (r, c) = out.dims2();
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        if is_active(mask.as_deref(), i * c + j) {
                            data[i * c + j] = y[j] * (gr[j] - dot);
                        }
                    }
                }
                vec![(*a, Tensor::from_parts_unchecked(v(a).shape().to_vec(), data))]
            }
            Op::LogSoftmax(a, mask) => {
                let (r, c) = out.dims2();
                let mask = mask.as_deref();
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let gsum: f64 = (0..c).filter(|&j| is_active(mask, i * c + j)).map(|j| gr[j]).sum();
                    for j in 0..c {
                        if is_active(mask, i * c + j) {
                            data[i * c + j] = gr[j] - y[j].exp() * gsum;
                        }
                    }
                }
                vec![(*a, Tensor::from_parts_unchecked(v(a).shape().to_vec(), data))]
            }
            Op::Concat(xs) => {
                let (r, total) = g.dims2();
                let mut offset = 0;
                let mut res = Vec::with_capacity(xs.len());
                for x in xs {
                    let c = v(x).cols();
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                    }
                    offset += c;
                    res.push((*x, Tensor::from_parts_unchecked(v(x).shape().to_vec(), data)));
                }
                res
            }
            Op::SliceCols(a, start, end) => {
                let x = v(a);
                let (r, c) = x.dims2();
                let w = end - start;
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    data[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![(*a, Tensor::from_parts_unchecked(x.shape().to_vec(), data))]
            }
            Op::BroadcastTo(a, _) => vec![(*a, reduce_to(g, v(a)))],
            Op::Reshape(a, _) => vec![(
                *a,
                Tensor::from_parts_unchecked(v(a).shape().to_vec(), g.data().to_vec()),
            )],
            Op::Gather(a, idx) => {
                let x = v(a);
                let mut gx = Tensor::zeros(x.shape());
                let c = x.cols();
                for (&(i, j), gi) in idx.iter().zip(g.data()) {
                    gx.data_mut()[i * c + j] += gi;
                }
                vec![(*a, gx)]
            }
            Op::PairwiseSqDist(a, lorentz) => {
                let x = v(a);
                let (n, c) = x.dims2();
                let mut data = vec![0.0; n * c];
                for i in 0..n {
                    let xi = x.row_slice(i);
                    for j in 0..n {
                        let w = 2.0 * (g.get(i, j) + g.get(j, i));
                        if w == 0.0 {
                            continue;
                        }
                        let xj = x.row_slice(j);
                        for k in 0..c {
                            data[i * c + k] += w * (xi[k] - xj[k]);
                        }
                    }
                    if *lorentz {
                        data[i * c] = -data[i * c];
                    }
                }
                vec![(*a, Tensor::from_parts_unchecked(x.shape().to_vec(), data))]
            }
            Op::PairwiseInner(a, lorentz) => {
                let x = v(a);
                let (n, c) = x.dims2();
                let mut data = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..n {
                        let w = g.get(i, j) + g.get(j, i);
                        if w == 0.0 {
                            continue;
                        }
                        let xj = x.row_slice(j);
                        for k in 0..c {
                            data[i * c + k] += w * xj[k];
                        }
                    }
                    if *lorentz {
                        data[i * c] = -data[i * c];
                    }
                }
                vec![(*a, Tensor::from_parts_unchecked(x.shape().to_vec(), data))]
            }
            Op::SpMatMul(s, a) => vec![(*a, reshape_like(s.matmul_transposed(g), v(a)))],
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn reshape_like(t: Tensor, like: &Tensor) -> Tensor {
    Tensor::from_parts_unchecked(like.shape().to_vec(), t.into_data())
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn binary(op: Binary, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (da, db) = (a.dims2(), b.dims2());
    let (r, c) = broadcast_dims(da, db)
        .ok_or_else(|| Error::Shape(format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))?;
    let shape = if a.shape().len() >= b.shape().len() && da == (r, c) {
        a.shape().to_vec()
    } else if db == (r, c) {
        b.shape().to_vec()
    } else {
        vec![r, c]
    };
    let f = |x: f64, y: f64| match op {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
    };
    let data = if da == db {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let at = |t: &Tensor, (tr, tc): (usize, usize), i: usize, j: usize| {
            t.data()[if tr == 1 { 0 } else { i } * tc + if tc == 1 { 0 } else { j }]
        };
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(f(at(a, da, i, j), at(b, db, i, j)));
            }
        }
        data
    };
    Ok(Tensor::from_parts_unchecked(shape, data))
}

/// Sum a broadcast gradient back down to the shape of `like`.
fn reduce_to(g: &Tensor, like: &Tensor) -> Tensor {
    let (lr, lc) = like.dims2();
    let (gr, gc) = g.dims2();
    if (lr, lc) == (gr, gc) {
        return Tensor::from_parts_unchecked(like.shape().to_vec(), g.data().to_vec());
    }
    let mut data = vec![0.0; lr * lc];
    for i in 0..gr {
        for j in 0..gc {
            let ti = if lr == 1 { 0 } else { i };
            let tj = if lc == 1 { 0 } else { j };
            data[ti * lc + tj] += g.data()[i * gc + j];
        }
    }
    Tensor::from_parts_unchecked(like.shape().to_vec(), data)
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2();
    let (k2, m) = b.dims2();
    if k != k2 {
        return Err(Error::Dimension { expected: k, got: k2 });
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let dst = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a.row_slice(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in dst.iter_mut().zip(b.row_slice(p)) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, m], out))
}

fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = a.dims2();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::from_parts_unchecked(vec![c, r], data)
}

fn inner(x: &[f64], y: &[f64], lorentz: bool) -> f64 {
    let s: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
    if lorentz {
        s - 2.0 * x[0] * y[0]
    } else {
        s
    }
}

fn pairwise(t: &Tensor, f: impl Fn(&[f64], &[f64]) -> f64) -> Tensor {
    let n = t.rows();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let d = f(t.row_slice(i), t.row_slice(j));
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    Tensor::from_parts_unchecked(vec![n, n], data)
}

fn is_active(mask: Option<&Vec<bool>>, idx: usize) -> bool {
    mask.is_none_or(|m| m[idx])
}

fn check_mask(t: &Tensor, mask: Option<&Vec<bool>>) -> Result<()> {
    match mask {
        Some(m) if m.len() != t.len() => Err(Error::Dimension {
            expected: t.len(),
            got: m.len(),
        }),
        _ => Ok(()),
    }
}

fn row_softmax(t: &Tensor, mask: Option<&Vec<bool>>, log: bool) -> Result<Tensor> {
    let (r, c) = t.dims2();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        let row = t.row_slice(i);
        let active = |j: usize| is_active(mask, i * c + j);
        let max = (0..c)
            .filter(|&j| active(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Shape(format!("softmax row {i} has no active entries")));
        }
        let lse = max
            + (0..c)
                .filter(|&j| active(j))
                .map(|j| (row[j] - max).exp())
                .sum::<f64>()
                .ln();
        for j in (0..c).filter(|&j| active(j)) {
            let lp = row[j] - lse;
            data[i * c + j] = if log { lp } else { lp.exp() };
        }
    }
    Ok(Tensor::from_parts_unchecked(t.shape().to_vec(), data))
}
