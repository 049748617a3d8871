//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Values are recorded on a [`Tape`] as they are computed; [`Tape::backward`]
//! then walks the tape once in reverse and returns the gradient of a scalar
//! output with respect to every node. Operations that only make sense on a
//! branch of their domain (`acos`, `acosh`, `sqrt`, the row norm) clamp the
//! input and propagate a zero gradient from the clamped region.
//!
//! ```
//! use stereograph_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).item().unwrap(), 6.0);
//! ```

mod gradcheck;
mod tape;
mod tensor;

use alloc::rc::Rc;
use alloc::vec::Vec;

pub use gradcheck::{central_difference, finite_diff_check, NOISE_ULPS};
pub use tape::{sigmoid, softplus, softplus_inverse, Gradients, NodeId, Op, Tape, Unary};
pub use tensor::{Csr, Tensor};

use crate::Result;

impl Tape {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Div(a, b))
    }

    pub fn unary(&mut self, u: Unary, a: NodeId) -> Result<NodeId> {
        self.record(Op::Unary(u, a))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Neg, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tanh, a)
    }

    pub fn tan(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tan, a)
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sin, a)
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Cos, a)
    }

    pub fn cosh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Cosh, a)
    }

    pub fn sinh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sinh, a)
    }

    pub fn acos(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Acos, a)
    }

    pub fn acosh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Acosh, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Softplus, a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(Unary::LeakyRelu(slope), a)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Transpose(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Mean(a))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::SumCols(a))
    }

    pub fn norm2_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Norm2Rows(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        self.record(Op::Softmax(a, mask.map(Rc::new)))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        self.record(Op::LogSoftmax(a, mask.map(Rc::new)))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.record(Op::Concat(xs.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.record(Op::SliceCols(a, start, end))
    }

    /// Split the columns of `a` into consecutive blocks of the given widths.
    pub fn split_cols(&mut self, a: NodeId, widths: &[usize]) -> Result<Vec<NodeId>> {
        let mut start = 0;
        widths
            .iter()
            .map(|w| {
                let id = self.slice_cols(a, start, start + w);
                start += w;
                id
            })
            .collect()
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.record(Op::BroadcastTo(a, shape.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    pub fn gather(&mut self, a: NodeId, index: Vec<(usize, usize)>) -> Result<NodeId> {
        self.record(Op::Gather(a, Rc::new(index)))
    }

    pub fn pairwise_sq_dist(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::PairwiseSqDist(a, false))
    }

    /// Pairwise `<x_i - x_j, x_i - x_j>_L`.
    pub fn pairwise_lorentz_sq_dist(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::PairwiseSqDist(a, true))
    }

    pub fn pairwise_inner(&mut self, a: NodeId, lorentz: bool) -> Result<NodeId> {
        self.record(Op::PairwiseInner(a, lorentz))
    }

    pub fn sp_matmul(&mut self, s: Rc<Csr>, a: NodeId) -> Result<NodeId> {
        self.record(Op::SpMatMul(s, a))
    }

    /// `a * c` for a constant scalar `c`.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.scalar(c);
        self.mul(a, k)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.scalar(c);
        self.add(a, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use alloc::vec;

    fn fd_ok(f: impl Fn(&mut Tape, NodeId) -> Result<NodeId>, x: &[f64], tol: f64) {
        let err = finite_diff_check(f, x, 1e-5).unwrap();
        assert!(err <= tol, "relative error {err}");
    }

    #[test]
    fn record_examples() {
        let mut t = Tape::new();
        let a = t.scalar(2.0);
        let b = t.scalar(3.0);
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).item().unwrap(), 5.0);
        let z = t.scalar(0.0);
        let th = t.tanh(z).unwrap();
        assert_eq!(t.value(th).item().unwrap(), 0.0);
        let q = t.scalar(5.0 / 3.0);
        let ac = t.acosh(q).unwrap();
        assert!((t.value(ac).item().unwrap() - 3f64.ln()).abs() < 1e-15);
        assert!(matches!(t.record(Op::Add(a, NodeId(99))), Err(Error::Graph(_))));
        assert!(matches!(t.record(Op::Leaf), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.scalar(3.0);
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.backward(y).unwrap().get(x).item().unwrap(), 6.0);

        let mut t = Tape::new();
        let x = t.scalar(2.0);
        let y = t.scalar(5.0);
        let unused = t.scalar(7.0);
        let f = t.mul(x, y).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.get(x).item().unwrap(), 5.0);
        assert_eq!(g.get(y).item().unwrap(), 2.0);
        assert_eq!(g.get(unused).item().unwrap(), 0.0);

        let v = t.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(t.backward(v), Err(Error::Shape(_))));
    }

    #[test]
    fn checked_mode_trips_on_non_finite() {
        let mut t = Tape::new();
        let z = t.scalar(0.0);
        assert_eq!(t.log(z), Err(Error::NonFinite { op: "log" }));
        let mut u = Tape::unchecked();
        let z = u.scalar(0.0);
        let l = u.log(z).unwrap();
        assert_eq!(u.value(l).item().unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn gradcheck_examples() {
        let sq = |t: &mut Tape, x: NodeId| {
            let s = t.mul(x, x)?;
            t.sum(s)
        };
        let err = finite_diff_check(sq, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(err <= 1e-7, "{err}");
        let constant = |t: &mut Tape, _x: NodeId| Ok(t.scalar(4.0));
        assert_eq!(finite_diff_check(constant, &[1.0, 2.0], 1e-5).unwrap(), 0.0);
        let blowup = |t: &mut Tape, x: NodeId| {
            let l = t.log(x)?;
            t.sum(l)
        };
        assert!(matches!(
            finite_diff_check(blowup, &[1e-7], 1e-5),
            Err(Error::Evaluation { coordinate: 0 })
        ));
        // Kink at 0: one-sided autodiff slope against a central difference of 1/2.
        let kink = |t: &mut Tape, x: NodeId| {
            let r = t.relu(x)?;
            t.sum(r)
        };
        assert!(finite_diff_check(kink, &[0.0], 1e-5).unwrap() >= 0.5);
    }

    #[test]
    fn gradcheck_ignores_rounding_on_structural_zeros() {
        // d/dx1 of (x0 + x1) - x1 is exactly 0; the difference quotient only sees rounding.
        let cancel = |t: &mut Tape, x: NodeId| {
            let a = t.slice_cols(x, 0, 1)?;
            let b = t.slice_cols(x, 1, 2)?;
            let s = t.add(a, b)?;
            let d = t.sub(s, b)?;
            let big = t.add_scalar(d, 0.3)?;
            t.sum(big)
        };
        let x = [0.1, 12_345.678_9];
        let numeric = central_difference(&cancel, &x, 1e-7).unwrap();
        assert!(numeric[1] != 0.0 || numeric[0] != 1.0);
        assert!(finite_diff_check(cancel, &x, 1e-7).unwrap() < 1e-4);
    }

    #[test]
    fn elementwise_primitives_match_finite_differences() {
        let cases: &[(Unary, &[f64])] = &[
            (Unary::Neg, &[0.3, -1.2]),
            (Unary::Sqrt, &[0.3, 2.5]),
            (Unary::Exp, &[0.3, -1.2]),
            (Unary::Log, &[0.3, 2.5]),
            (Unary::Tanh, &[0.3, -1.2]),
            (Unary::Tan, &[0.3, -1.2]),
            (Unary::Sin, &[0.3, -1.2]),
            (Unary::Cos, &[0.3, -1.2]),
            (Unary::Cosh, &[0.3, -1.2]),
            (Unary::Sinh, &[0.3, -1.2]),
            (Unary::Acos, &[0.3, -0.7]),
            (Unary::Acosh, &[1.3, 4.0]),
            (Unary::Softplus, &[0.3, -1.2, 40.0]),
            (Unary::Relu, &[0.3, -1.2]),
            (Unary::LeakyRelu(0.2), &[0.3, -1.2]),
            (Unary::TanhC, &[0.3, -1.2, 2e-4]),
            (Unary::TanC, &[0.3, -1.2, 2e-4]),
            (Unary::TanCClamped(1.0), &[0.3, 1.4, 2e-4]),
            (Unary::SinhC, &[0.3, -1.2, 2e-4]),
            (Unary::SinC, &[0.3, -1.2, 2e-4]),
        ];
        for &(u, xs) in cases {
            let f = move |t: &mut Tape, x: NodeId| {
                let y = t.unary(u, x)?;
                t.sum(y)
            };
            let err = finite_diff_check(f, xs, 1e-6).unwrap();
            assert!(err <= 1e-6, "{u:?}: {err}");
        }
    }

    #[test]
    fn ratio_primitives_are_smooth_at_zero() {
        for u in [Unary::TanhC, Unary::TanC, Unary::SinhC, Unary::SinC] {
            assert_eq!(u.eval(0.0), 1.0);
            assert_eq!(u.derivative(0.0, 1.0), 0.0);
            let (below, above) = (u.eval(0.999e-3), u.eval(1.001e-3));
            assert!((below - above).abs() < 1e-6, "{u:?}");
        }
    }

    #[test]
    fn clamped_primitives_have_zero_gradient_outside() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.5, -2.0, 1.0]));
        let y = t.acos(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, core::f64::consts::PI, 0.0]);
        let s = t.sum(y).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).data(), &[0.0, 0.0, 0.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![0.5, 1.0]));
        let y = t.acosh(x).unwrap();
        let s = t.sum(y).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).data(), &[0.0, 0.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![0.0, 0.0]));
        let n = t.norm2_rows(x).unwrap();
        let r = t.sqrt(n).unwrap();
        let s = t.sum(r).unwrap();
        let g = t.backward(s).unwrap().get(x);
        assert!(g.all_finite());
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn reshape_round_trips_gradients() {
        let f = |t: &mut Tape, p: NodeId| {
            let m = t.reshape(p, &[2, 3])?;
            let w = t.leaf(Tensor::from_rows(&[vec![1.0], vec![-2.0], vec![0.5]])?);
            let y = t.matmul(m, w)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        };
        fd_ok(f, &[0.3, -0.8, 1.1, 0.4, 0.9, -0.2], 1e-7);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0; 6]));
        assert!(t.reshape(x, &[4, 2]).is_err());
    }

    #[test]
    fn binary_and_broadcast_gradients() {
        // x is [2, 3]: rows (x00 x01 x02), (x10 x11 x12)
        let x0 = [0.3, -0.8, 1.1, 0.4, 0.9, -0.2];
        let f = |t: &mut Tape, p: NodeId| {
            let r0 = t.slice_cols(p, 0, 3)?;
            let r1 = t.slice_cols(p, 3, 6)?;
            let col = t.slice_cols(p, 0, 1)?;
            let sc = t.slice_cols(p, 5, 6)?;
            let a = t.mul(r0, r1)?;
            let b = t.div(a, sc)?;
            let c = t.sub(b, col)?;
            let d = t.add(c, r0)?;
            let e = t.broadcast_to(sc, &[2, 3])?;
            let e = t.sum_cols(e)?;
            let ds = t.sum(d)?;
            let es = t.mean(e)?;
            let o = t.mul(ds, es)?;
            Ok(o)
        };
        fd_ok(f, &x0, 1e-7);
    }

    #[test]
    fn matrix_primitives_gradients() {
        // p packs a [3, 2] matrix A and a [2, 2] matrix B.
        let p0 = [0.3, -0.8, 1.1, 0.4, 0.9, -0.2, 0.5, 0.7, -1.3, 0.25];
        let f = |t: &mut Tape, p: NodeId| {
            let cols: Vec<NodeId> = (0..10).map(|i| t.slice_cols(p, i, i + 1)).collect::<Result<_>>()?;
            let row = |t: &mut Tape, ids: &[NodeId]| t.concat_cols(ids);
            let a0 = row(t, &cols[0..2])?;
            let a1 = row(t, &cols[2..4])?;
            let a2 = row(t, &cols[4..6])?;
            let a0t = t.transpose(a0)?;
            let a1t = t.transpose(a1)?;
            let a2t = t.transpose(a2)?;
            let a_t = t.concat_cols(&[a0t, a1t, a2t])?; // [2, 3] = A^T
            let a = t.transpose(a_t)?; // [3, 2]
            let b0 = row(t, &cols[6..8])?;
            let b1 = row(t, &cols[8..10])?;
            let b0t = t.transpose(b0)?;
            let b1t = t.transpose(b1)?;
            let bt = t.concat_cols(&[b0t, b1t])?;
            let b = t.transpose(bt)?; // [2, 2]
            let ab = t.matmul(a, b)?; // [3, 2]
            let sm = t.softmax_rows(ab, None)?;
            let ls = t.log_softmax_rows(ab, Some(vec![true, false, true, true, false, true]))?;
            let pd = t.pairwise_sq_dist(ab)?;
            let pld = t.pairwise_lorentz_sq_dist(ab)?;
            let pl = t.pairwise_inner(ab, true)?;
            let pe = t.pairwise_inner(ab, false)?;
            let g = t.gather(pd, vec![(0, 1), (2, 0), (1, 2)])?;
            let nr = t.norm2_rows(ab)?;
            let parts = [sm, ls, pl, pe, g, nr, pld];
            let mut acc = t.scalar(0.0);
            for (i, q) in parts.iter().enumerate() {
                let s = t.sum(*q)?;
                let w = t.scale(s, 1.0 + i as f64 * 0.3)?;
                acc = t.add(acc, w)?;
            }
            let tn = t.tanh(acc)?;
            Ok(tn)
        };
        fd_ok(f, &p0, 1e-6);
    }

    #[test]
    fn sparse_matmul_gradient() {
        let s = Rc::new(
            Csr::from_rows(
                3,
                &[
                    vec![(0, 0.5), (2, 0.5)],
                    vec![(1, 1.0)],
                    vec![(0, 0.3), (1, 0.3), (2, 0.4)],
                ],
            )
            .unwrap(),
        );
        let f = move |t: &mut Tape, p: NodeId| {
            let c0 = t.slice_cols(p, 0, 3)?;
            let c1 = t.slice_cols(p, 3, 6)?;
            let c0 = t.transpose(c0)?;
            let c1 = t.transpose(c1)?;
            let x = t.concat_cols(&[c0, c1])?; // [3, 2]
            let y = t.sp_matmul(s.clone(), x)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        };
        fd_ok(f, &[0.1, -0.4, 0.9, 1.2, 0.3, -0.6], 1e-7);
    }

    #[test]
    fn masked_softmax_ignores_masked_entries() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 3, vec![0.0, 100.0, 0.0]).unwrap());
        let p = t.softmax_rows(x, Some(vec![true, false, true])).unwrap();
        assert_eq!(t.value(p).data(), &[0.5, 0.0, 0.5]);
        let l = t.log_softmax_rows(x, Some(vec![true, false, true])).unwrap();
        assert!((t.value(l).data()[0] - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(t.value(l).data()[1], 0.0);
        assert!(t.softmax_rows(x, Some(vec![false; 3])).is_err());
        assert!(t.softmax_rows(x, Some(vec![true; 2])).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, a).is_err());
        assert!(t.slice_cols(a, 2, 4).is_err());
        assert!(t.broadcast_to(a, &[3, 3]).is_err());
        assert!(t.gather(a, vec![(2, 0)]).is_err());
        let c = t.leaf(Tensor::zeros(&[2, 1]));
        let bc = t.broadcast_to(c, &[2, 3]).unwrap();
        assert_eq!(t.value(bc).shape(), &[2, 3]);
        assert!(t.concat_cols(&[a, b]).is_err());
    }
}
