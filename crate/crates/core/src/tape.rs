//! Reverse-mode differentiation tape over dense real/complex tensors.
//!
//! Forward values are computed eagerly as nodes are appended; `backward`
//! walks the tape in reverse and accumulates adjoints. The scalar being
//! differentiated is always real. For a complex intermediate z the adjoint
//! stored is dL/dRe(z) + i dL/dIm(z), so complex parameters decompose into
//! independent real and imaginary partials; every complex parameter enters
//! the graph as two real leaves through `complex_from_pair`.
//!
//! Under the unitary FFT convention the adjoint of `fft` is `ifft` and vice
//! versa; the half-spectrum transforms use zero-padding / Hermitian folding
//! as their exact adjoints.

use crate::error::{Error, Result};
use crate::fft;
use crate::tensor::{complexify, Tensor};
use indexmap::IndexMap;
use ndarray::{ArrayD, Axis, Ix2, Ix3, IxDyn, Slice, Zip};
use num_complex::Complex64;
use std::sync::Arc;

pub type NodeId = usize;

/// Named real parameter arrays, iterated in insertion order everywhere
/// (gradient extraction, optimizer updates, checkpoints) for determinism.
pub type ParamStore = IndexMap<String, ArrayD<f64>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Matmul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    RowScale(NodeId, NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SoftmaxLast(NodeId),
    ConcatLast(Vec<NodeId>),
    SliceLast(NodeId, usize, usize),
    ComplexFromPair(NodeId, NodeId),
    Complexify(NodeId),
    RealPart(NodeId),
    ImagPart(NodeId),
    ModulusSq(NodeId),
    Fft(NodeId, usize),
    Ifft(NodeId, usize),
    Rfft(NodeId, usize),
    Irfft(NodeId, usize),
    RowGather(NodeId, Arc<Vec<usize>>),
    RowScatter(NodeId, Arc<Vec<usize>>),
    ModeMatmul(NodeId, NodeId),
    Reshape(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<(String, NodeId)>,
}

pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn leaves(&self) -> &[(String, NodeId)] {
        &self.leaves
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn rval(&self, id: NodeId) -> &ArrayD<f64> {
        self.nodes[id].value.real().expect("real operand")
    }

    fn cval(&self, id: NodeId) -> &ArrayD<Complex64> {
        self.nodes[id].value.complex().expect("complex operand")
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_same_dtype(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).is_complex() != self.value(b).is_complex() {
            return Err(Error::invalid(format!("{op}: mixed real/complex operands")));
        }
        Ok(())
    }

    // ---- graph inputs ----

    /// Named real parameter leaf; gradients are reported per leaf name.
    pub fn leaf(&mut self, name: &str, value: ArrayD<f64>) -> NodeId {
        let id = self.push(Op::Leaf, Tensor::Real(value));
        self.leaves.push((name.to_string(), id));
        id
    }

    /// Non-differentiated input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn constant_real(&mut self, value: ArrayD<f64>) -> NodeId {
        self.constant(Tensor::Real(value))
    }

    pub fn constant_complex(&mut self, value: ArrayD<Complex64>) -> NodeId {
        self.constant(Tensor::Complex(value))
    }

    // ---- elementwise arithmetic ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        self.check_same_dtype("add", a, b)?;
        let v = match (&self.nodes[a].value, &self.nodes[b].value) {
            (Tensor::Real(x), Tensor::Real(y)) => Tensor::Real(x + y),
            (Tensor::Complex(x), Tensor::Complex(y)) => Tensor::Complex(x + y),
            _ => unreachable!(),
        };
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        self.check_same_dtype("sub", a, b)?;
        let v = match (&self.nodes[a].value, &self.nodes[b].value) {
            (Tensor::Real(x), Tensor::Real(y)) => Tensor::Real(x - y),
            (Tensor::Complex(x), Tensor::Complex(y)) => Tensor::Complex(x - y),
            _ => unreachable!(),
        };
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise (Hadamard) product, real or complex.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("hadamard", a, b)?;
        self.check_same_dtype("hadamard", a, b)?;
        let v = match (&self.nodes[a].value, &self.nodes[b].value) {
            (Tensor::Real(x), Tensor::Real(y)) => Tensor::Real(x * y),
            (Tensor::Complex(x), Tensor::Complex(y)) => Tensor::Complex(x * y),
            _ => unreachable!(),
        };
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("div", a, b)?;
        let v = Tensor::Real(self.nodes[a].value.real()? / self.nodes[b].value.real()?);
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = match &self.nodes[a].value {
            Tensor::Real(x) => Tensor::Real(x.mapv(|v| -v)),
            Tensor::Complex(x) => Tensor::Complex(x.mapv(|v| -v)),
        };
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = match &self.nodes[a].value {
            Tensor::Real(x) => Tensor::Real(x.mapv(|v| v * c)),
            Tensor::Complex(x) => Tensor::Complex(x.mapv(|v| v * c)),
        };
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = Tensor::Real(self.nodes[a].value.real()?.mapv(|v| v + c));
        Ok(self.push(Op::AddScalar(a), v))
    }

    // ---- linear algebra over the channel axis ----

    /// Contract the last axis of `x` ([..., k], real) with a real matrix
    /// [k, m], yielding [..., m].
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xv = self.nodes[x].value.real()?;
        let wv = self.nodes[w].value.real()?;
        if wv.ndim() != 2 || xv.ndim() < 1 || xv.shape()[xv.ndim() - 1] != wv.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let k = wv.shape()[0];
        let m = wv.shape()[1];
        let n = xv.len() / k;
        let x2 = xv.view().into_shape_with_order((n, k)).expect("contiguous");
        let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
        let y = x2.dot(&w2);
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = m;
        let y = y.into_shape_clone(IxDyn(&out_shape)).unwrap();
        Ok(self.push(Op::Matmul(x, w), Tensor::Real(y)))
    }

    /// Add a bias vector [m] to every point of [..., m].
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.nodes[x].value.real()?;
        let bv = self.nodes[b].value.real()?;
        let m = *xv.shape().last().unwrap_or(&0);
        if bv.ndim() != 1 || bv.len() != m {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = xv.to_owned();
        {
            let n = out.len() / m;
            let mut o2 = out
                .view_mut()
                .into_shape_with_order((n, m))
                .expect("contiguous");
            for mut row in o2.rows_mut() {
                row += &b1;
            }
        }
        Ok(self.push(Op::AddBias(x, b), Tensor::Real(out)))
    }

    /// Multiply every channel of [..., m] by a per-point weight of shape
    /// [...] (the leading axes of `x`).
    pub fn row_scale(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xv = self.nodes[x].value.real()?;
        let wv = self.nodes[w].value.real()?;
        if xv.ndim() < 1 || wv.shape() != &xv.shape()[..xv.ndim() - 1] {
            return Err(Error::Shape {
                op: "row_scale",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let m = *xv.shape().last().unwrap();
        let n = wv.len();
        let mut out = xv.to_owned();
        {
            let mut o2 = out
                .view_mut()
                .into_shape_with_order((n, m))
                .expect("contiguous");
            let wf = wv.view().into_shape_with_order(n).expect("contiguous");
            for (mut row, &s) in o2.rows_mut().into_iter().zip(wf.iter()) {
                row *= s;
            }
        }
        Ok(self.push(Op::RowScale(x, w), Tensor::Real(out)))
    }

    // ---- pointwise nonlinearities (real) ----

    fn pointwise(
        &mut self,
        a: NodeId,
        op: fn(NodeId) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let v = Tensor::Real(self.nodes[a].value.real()?.mapv(f));
        Ok(self.push(op(a), v))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.pointwise(a, Op::Tanh, f64::tanh)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.pointwise(a, Op::Softplus, stable_softplus)
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.pointwise(a, Op::Sin, f64::sin)
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.pointwise(a, Op::Cos, f64::cos)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.pointwise(a, Op::Exp, f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.pointwise(a, Op::Ln, f64::ln)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.pointwise(a, Op::Square, |v| v * v)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a].value.real()?.sum();
        Ok(self.push(Op::SumAll(a), Tensor::scalar(s)))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.real()?;
        let s = v.sum() / v.len() as f64;
        Ok(self.push(Op::MeanAll(a), Tensor::scalar(s)))
    }

    /// Softmax over the last axis, max-subtracted per row.
    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let xv = self.nodes[a].value.real()?;
        if xv.ndim() < 1 {
            return Err(Error::invalid("softmax: rank-0 input"));
        }
        let m = *xv.shape().last().unwrap();
        let n = xv.len() / m;
        let mut out = xv.to_owned();
        {
            let mut o2 = out
                .view_mut()
                .into_shape_with_order((n, m))
                .expect("contiguous");
            for mut row in o2.rows_mut() {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        Ok(self.push(Op::SoftmaxLast(a), Tensor::Real(out)))
    }

    // ---- channel plumbing ----

    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat: no inputs"));
        }
        let lead = |s: &[usize]| s[..s.len() - 1].to_vec();
        let first = self.nodes[parts[0]].value.real()?.shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.nodes[p].value.real()?.shape();
            if lead(s) != lead(&first) {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[s.len() - 1];
        }
        let mut shape = first.clone();
        *shape.last_mut().unwrap() = total;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        let last = shape.len() - 1;
        let mut at = 0;
        for &p in parts {
            let v = self.nodes[p].value.real()?;
            let c = v.shape()[last];
            out.slice_axis_mut(Axis(last), Slice::from(at..at + c))
                .assign(v);
            at += c;
        }
        Ok(self.push(Op::ConcatLast(parts.to_vec()), Tensor::Real(out)))
    }

    /// Channels [start, start+len) of the last axis.
    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.nodes[a].value.real()?;
        let last = v.ndim() - 1;
        if start + len > v.shape()[last] {
            return Err(Error::invalid(format!(
                "slice: channels {}..{} out of range for {:?}",
                start,
                start + len,
                v.shape()
            )));
        }
        let out = v
            .slice_axis(Axis(last), Slice::from(start..start + len))
            .to_owned();
        Ok(self.push(Op::SliceLast(a, start, len), Tensor::Real(out)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.value(a).shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let v = match &self.nodes[a].value {
            Tensor::Real(x) => Tensor::Real(
                x.view()
                    .into_shape_with_order(IxDyn(shape))
                    .expect("contiguous")
                    .to_owned(),
            ),
            Tensor::Complex(x) => Tensor::Complex(
                x.view()
                    .into_shape_with_order(IxDyn(shape))
                    .expect("contiguous")
                    .to_owned(),
            ),
        };
        Ok(self.push(Op::Reshape(a), v))
    }

    // ---- real/complex conversions ----

    pub fn complex_from_pair(&mut self, re: NodeId, im: NodeId) -> Result<NodeId> {
        self.check_same_shape("complex_from_pair", re, im)?;
        let r = self.nodes[re].value.real()?;
        let i = self.nodes[im].value.real()?;
        let mut out = ArrayD::<Complex64>::zeros(r.raw_dim());
        Zip::from(&mut out)
            .and(r)
            .and(i)
            .for_each(|o, &a, &b| *o = Complex64::new(a, b));
        Ok(self.push(Op::ComplexFromPair(re, im), Tensor::Complex(out)))
    }

    pub fn complexify(&mut self, a: NodeId) -> Result<NodeId> {
        let v = complexify(self.nodes[a].value.real()?);
        Ok(self.push(Op::Complexify(a), Tensor::Complex(v)))
    }

    pub fn real_part(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.complex()?.mapv(|z| z.re);
        Ok(self.push(Op::RealPart(a), Tensor::Real(v)))
    }

    pub fn imag_part(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.complex()?.mapv(|z| z.im);
        Ok(self.push(Op::ImagPart(a), Tensor::Real(v)))
    }

    pub fn modulus_sq(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.complex()?.mapv(|z| z.norm_sqr());
        Ok(self.push(Op::ModulusSq(a), Tensor::Real(v)))
    }

    // ---- Fourier transforms over leading spatial axes ----

    pub fn fft(&mut self, a: NodeId, spatial_rank: usize) -> Result<NodeId> {
        let v = fft::fftn(self.nodes[a].value.complex()?, spatial_rank, false);
        Ok(self.push(Op::Fft(a, spatial_rank), Tensor::Complex(v)))
    }

    pub fn ifft(&mut self, a: NodeId, spatial_rank: usize) -> Result<NodeId> {
        let v = fft::fftn(self.nodes[a].value.complex()?, spatial_rank, true);
        Ok(self.push(Op::Ifft(a, spatial_rank), Tensor::Complex(v)))
    }

    pub fn rfft(&mut self, a: NodeId, spatial_rank: usize) -> Result<NodeId> {
        let v = fft::rfftn(self.nodes[a].value.real()?, spatial_rank);
        Ok(self.push(Op::Rfft(a, spatial_rank), Tensor::Complex(v)))
    }

    pub fn irfft(&mut self, a: NodeId, spatial_rank: usize, n_last: usize) -> Result<NodeId> {
        let h = self.nodes[a].value.complex()?;
        if h.shape()[spatial_rank - 1] != n_last / 2 + 1 {
            return Err(Error::Shape {
                op: "irfft",
                lhs: h.shape().to_vec(),
                rhs: vec![n_last / 2 + 1],
            });
        }
        let v = fft::irfftn(h, spatial_rank, n_last);
        Ok(self.push(Op::Irfft(a, spatial_rank), Tensor::Real(v)))
    }

    // ---- mode selection ----

    /// Gather rows (first axis) at `idx`; used to compact retained Fourier
    /// modes. Works for real and complex tensors.
    pub fn row_gather(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId> {
        let rows = self.value(a).shape()[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather: row {bad} out of range (have {rows})"
            )));
        }
        let v = match &self.nodes[a].value {
            Tensor::Real(x) => Tensor::Real(x.select(Axis(0), &idx)),
            Tensor::Complex(x) => Tensor::Complex(x.select(Axis(0), &idx)),
        };
        Ok(self.push(Op::RowGather(a, idx), v))
    }

    /// Scatter rows of `a` into a zero tensor with `rows` leading rows:
    /// out[idx[i]] += a[i]. Adjoint of `row_gather`.
    pub fn row_scatter(&mut self, a: NodeId, idx: Arc<Vec<usize>>, rows: usize) -> Result<NodeId> {
        if idx.len() != self.value(a).shape()[0] {
            return Err(Error::Shape {
                op: "scatter",
                lhs: vec![idx.len()],
                rhs: self.value(a).shape().to_vec(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "scatter: row {bad} out of range (have {rows})"
            )));
        }
        let mut shape = self.value(a).shape().to_vec();
        shape[0] = rows;
        let v = match &self.nodes[a].value {
            Tensor::Real(x) => {
                let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
                for (i, &r) in idx.iter().enumerate() {
                    let src = x.index_axis(Axis(0), i);
                    let mut dst = out.index_axis_mut(Axis(0), r);
                    dst += &src;
                }
                Tensor::Real(out)
            }
            Tensor::Complex(x) => {
                let mut out = ArrayD::<Complex64>::zeros(IxDyn(&shape));
                for (i, &r) in idx.iter().enumerate() {
                    let src = x.index_axis(Axis(0), i);
                    let mut dst = out.index_axis_mut(Axis(0), r);
                    dst += &src;
                }
                Tensor::Complex(out)
            }
        };
        Ok(self.push(Op::RowScatter(a, idx), v))
    }

    /// Per-mode complex matrix-vector product: g [M, p, m] applied to
    /// v [M, m] gives [M, p].
    pub fn mode_matmul(&mut self, g: NodeId, v: NodeId) -> Result<NodeId> {
        let gv = self.nodes[g].value.complex()?;
        let vv = self.nodes[v].value.complex()?;
        if gv.ndim() != 3 || vv.ndim() != 2 || gv.shape()[0] != vv.shape()[0] || gv.shape()[2] != vv.shape()[1]
        {
            return Err(Error::Shape {
                op: "mode_matmul",
                lhs: gv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let g3 = gv.view().into_dimensionality::<Ix3>().unwrap();
        let v2 = vv.view().into_dimensionality::<Ix2>().unwrap();
        let (mm, p, m) = g3.dim();
        let mut out = ndarray::Array2::<Complex64>::zeros((mm, p));
        for k in 0..mm {
            for i in 0..p {
                let mut acc = Complex64::default();
                for j in 0..m {
                    acc += g3[[k, i, j]] * v2[[k, j]];
                }
                out[[k, i]] = acc;
            }
        }
        Ok(self.push(Op::ModeMatmul(g, v), Tensor::Complex(out.into_dyn())))
    }

    // ---- backward ----

    /// Reverse sweep from a real scalar node; returns adjoints for every
    /// node that influences it.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root >= self.nodes.len() {
            return Err(Error::invalid("backward: no such node (run forward first)"));
        }
        let rv = &self.nodes[root].value;
        if rv.is_complex() || rv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: root must be a real scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let Some(g) = adj[id].clone() else { continue };
            self.push_adjoint(id, &g, &mut adj);
        }
        Ok(Gradients { adj })
    }

    fn push_adjoint(&self, id: NodeId, g: &Tensor, adj: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                accumulate(&mut adj[*a], g.clone());
                accumulate(&mut adj[*b], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[*a], g.clone());
                accumulate(&mut adj[*b], neg_tensor(g));
            }
            Op::Mul(a, b) => match g {
                Tensor::Real(gr) => {
                    accumulate(&mut adj[*a], Tensor::Real(gr * self.rval(*b)));
                    accumulate(&mut adj[*b], Tensor::Real(gr * self.rval(*a)));
                }
                Tensor::Complex(gc) => {
                    let bv = self.cval(*b).mapv(|z| z.conj());
                    let av = self.cval(*a).mapv(|z| z.conj());
                    accumulate(&mut adj[*a], Tensor::Complex(gc * &bv));
                    accumulate(&mut adj[*b], Tensor::Complex(gc * &av));
                }
            },
            Op::Div(a, b) => {
                let gr = g.real().unwrap();
                let av = self.rval(*a);
                let bv = self.rval(*b);
                accumulate(&mut adj[*a], Tensor::Real(gr / bv));
                let gb = Zip::from(gr)
                    .and(av)
                    .and(bv)
                    .map_collect(|&g, &a, &b| -g * a / (b * b));
                accumulate(&mut adj[*b], Tensor::Real(gb));
            }
            Op::Neg(a) => accumulate(&mut adj[*a], neg_tensor(g)),
            Op::Scale(a, c) => {
                let t = match g {
                    Tensor::Real(x) => Tensor::Real(x.mapv(|v| v * c)),
                    Tensor::Complex(x) => Tensor::Complex(x.mapv(|v| v * c)),
                };
                accumulate(&mut adj[*a], t);
            }
            Op::AddScalar(a) => accumulate(&mut adj[*a], g.clone()),
            Op::Matmul(x, w) => {
                // adjoints may arrive F-ordered (dot of a transposed view)
                let gr = g.real().unwrap().as_standard_layout();
                let xv = self.rval(*x);
                let wv = self.rval(*w);
                let k = wv.shape()[0];
                let m = wv.shape()[1];
                let n = xv.len() / k;
                let g2 = gr.view().into_shape_with_order((n, m)).expect("contiguous");
                let x2 = xv.view().into_shape_with_order((n, k)).expect("contiguous");
                let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
                // dot against a transposed view can come back in column-major
                // order; into_shape_clone restores standard layout when needed
                let gx = g2.dot(&w2.t()).into_shape_clone(xv.raw_dim()).unwrap();
                let gw = x2.t().dot(&g2);
                let gw_dim = gw.raw_dim();
                let gw = gw.into_shape_clone(gw_dim).unwrap();
                accumulate(&mut adj[*x], Tensor::Real(gx));
                accumulate(&mut adj[*w], Tensor::Real(gw.into_dyn()));
            }
            Op::AddBias(x, b) => {
                let gr = g.real().unwrap().as_standard_layout();
                let m = self.rval(*b).len();
                let n = gr.len() / m;
                let g2 = gr.view().into_shape_with_order((n, m)).expect("contiguous");
                let gb = g2.sum_axis(ndarray::Axis(0));
                accumulate(&mut adj[*x], g.clone());
                accumulate(&mut adj[*b], Tensor::Real(gb.into_dyn()));
            }
            Op::RowScale(x, w) => {
                let gr = g.real().unwrap().as_standard_layout();
                let xv = self.rval(*x);
                let wv = self.rval(*w);
                let m = *xv.shape().last().unwrap();
                let n = wv.len();
                let g2 = gr.view().into_shape_with_order((n, m)).expect("contiguous");
                let x2 = xv.view().into_shape_with_order((n, m)).expect("contiguous");
                let wf = wv.view().into_shape_with_order(n).expect("contiguous");
                let mut gx = g2.to_owned();
                for (mut row, &s) in gx.rows_mut().into_iter().zip(wf.iter()) {
                    row *= s;
                }
                let mut gw = ndarray::Array1::<f64>::zeros(n);
                for ((grow, xrow), o) in g2.rows().into_iter().zip(x2.rows()).zip(gw.iter_mut()) {
                    *o = grow.dot(&xrow);
                }
                accumulate(
                    &mut adj[*x],
                    Tensor::Real(gx.into_shape_with_order(xv.raw_dim()).unwrap()),
                );
                accumulate(
                    &mut adj[*w],
                    Tensor::Real(gw.into_dyn().into_shape_with_order(wv.raw_dim()).unwrap()),
                );
            }
            Op::Tanh(a) => {
                let y = self.nodes[id].value.real().unwrap();
                let ga = Zip::from(g.real().unwrap())
                    .and(y)
                    .map_collect(|&g, &y| g * (1.0 - y * y));
                accumulate(&mut adj[*a], Tensor::Real(ga));
            }
            Op::Softplus(a) => {
                let ga = Zip::from(g.real().unwrap())
                    .and(self.rval(*a))
                    .map_collect(|&g, &x| g * stable_sigmoid(x));
                accumulate(&mut adj[*a], Tensor::Real(ga));
            }
            Op::Sin(a) => {
                let ga = Zip::from(g.real().unwrap())
                    .and(self.rval(*a))
                    .map_collect(|&g, &x| g * x.cos());
                accumulate(&mut adj[*a], Tensor::Real(ga));
            }
            Op::Cos(a) => {
                let ga = Zip::from(g.real().unwrap())
                    .and(self.rval(*a))
                    .map_collect(|&g, &x| -g * x.sin());
                accumulate(&mut adj[*a], Tensor::Real(ga));
            }
            Op::Exp(a) => {
                let y = self.nodes[id].value.real().unwrap();
                let ga = Zip::from(g.real().unwrap()).and(y).map_collect(|&g, &y| g * y);
                accumulate(&mut adj[*a], Tensor::Real(ga));
            }
            Op::Ln(a) => {
                let ga = Zip::from(g.real().unwrap())
                    .and(self.rval(*a))
                    .map_collect(|&g, &x| g / x);
                accumulate(&mut adj[*a], Tensor::Real(ga));
            }
            Op::Square(a) => {
                let ga = Zip::from(g.real().unwrap())
                    .and(self.rval(*a))
                    .map_collect(|&g, &x| 2.0 * g * x);
                accumulate(&mut adj[*a], Tensor::Real(ga));
            }
            Op::SumAll(a) => {
                let gs = g.scalar_value().unwrap();
                let av = self.rval(*a);
                accumulate(
                    &mut adj[*a],
                    Tensor::Real(ArrayD::from_elem(av.raw_dim(), gs)),
                );
            }
            Op::MeanAll(a) => {
                let av = self.rval(*a);
                let gs = g.scalar_value().unwrap() / av.len() as f64;
                accumulate(
                    &mut adj[*a],
                    Tensor::Real(ArrayD::from_elem(av.raw_dim(), gs)),
                );
            }
            Op::SoftmaxLast(a) => {
                let s = self.nodes[id].value.real().unwrap();
                let gr = g.real().unwrap().as_standard_layout();
                let m = *s.shape().last().unwrap();
                let n = s.len() / m;
                let s2 = s.view().into_shape_with_order((n, m)).expect("contiguous");
                let g2 = gr.view().into_shape_with_order((n, m)).expect("contiguous");
                let mut ga = ndarray::Array2::<f64>::zeros((n, m));
                for ((srow, grow), mut orow) in
                    s2.rows().into_iter().zip(g2.rows()).zip(ga.rows_mut())
                {
                    let dot = srow.dot(&grow);
                    for j in 0..m {
                        orow[j] = srow[j] * (grow[j] - dot);
                    }
                }
                accumulate(
                    &mut adj[*a],
                    Tensor::Real(ga.into_dyn().into_shape_with_order(s.raw_dim()).unwrap()),
                );
            }
            Op::ConcatLast(parts) => {
                let gr = g.real().unwrap();
                let last = gr.ndim() - 1;
                let mut at = 0;
                for &p in parts {
                    let c = *self.rval(p).shape().last().unwrap();
                    let gp = gr
                        .slice_axis(Axis(last), Slice::from(at..at + c))
                        .to_owned();
                    accumulate(&mut adj[p], Tensor::Real(gp));
                    at += c;
                }
            }
            Op::SliceLast(a, start, len) => {
                let av = self.rval(*a);
                let last = av.ndim() - 1;
                let mut ga = ArrayD::<f64>::zeros(av.raw_dim());
                ga.slice_axis_mut(Axis(last), Slice::from(*start..start + len))
                    .assign(g.real().unwrap());
                accumulate(&mut adj[*a], Tensor::Real(ga));
            }
            Op::ComplexFromPair(re, im) => {
                let gc = g.complex().unwrap();
                accumulate(&mut adj[*re], Tensor::Real(gc.mapv(|z| z.re)));
                accumulate(&mut adj[*im], Tensor::Real(gc.mapv(|z| z.im)));
            }
            Op::Complexify(a) => {
                accumulate(
                    &mut adj[*a],
                    Tensor::Real(g.complex().unwrap().mapv(|z| z.re)),
                );
            }
            Op::RealPart(a) => {
                accumulate(
                    &mut adj[*a],
                    Tensor::Complex(complexify(g.real().unwrap())),
                );
            }
            Op::ImagPart(a) => {
                let gc = g.real().unwrap().mapv(|v| Complex64::new(0.0, v));
                accumulate(&mut adj[*a], Tensor::Complex(gc));
            }
            Op::ModulusSq(a) => {
                let ga = Zip::from(g.real().unwrap())
                    .and(self.cval(*a))
                    .map_collect(|&g, &z| 2.0 * g * z);
                accumulate(&mut adj[*a], Tensor::Complex(ga));
            }
            Op::Fft(a, r) => {
                let ga = fft::fftn(g.complex().unwrap(), *r, true);
                accumulate(&mut adj[*a], Tensor::Complex(ga));
            }
            Op::Ifft(a, r) => {
                let ga = fft::fftn(g.complex().unwrap(), *r, false);
                accumulate(&mut adj[*a], Tensor::Complex(ga));
            }
            Op::Rfft(a, r) => {
                // adjoint: zero-pad the half spectrum, inverse transform,
                // take the real part
                let gc = g.complex().unwrap();
                let av = self.rval(*a);
                let mut full = ArrayD::<Complex64>::zeros(av.raw_dim());
                let n_half = gc.shape()[*r - 1];
                full.slice_axis_mut(Axis(*r - 1), Slice::from(0..n_half))
                    .assign(gc);
                let ga = fft::fftn(&full, *r, true).mapv(|z| z.re);
                accumulate(&mut adj[*a], Tensor::Real(ga));
            }
            Op::Irfft(a, r) => {
                // adjoint: embed the real cotangent, forward transform,
                // fold by Hermitian symmetry
                let full = fft::fftn(&complexify(g.real().unwrap()), *r, false);
                let ga = fft::hermitian_fold(&full, *r);
                accumulate(&mut adj[*a], Tensor::Complex(ga));
            }
            Op::RowGather(a, idx) => {
                let shape = self.value(*a).shape().to_vec();
                let t = match g {
                    Tensor::Real(gr) => {
                        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
                        for (i, &row) in idx.iter().enumerate() {
                            let src = gr.index_axis(Axis(0), i);
                            let mut dst = out.index_axis_mut(Axis(0), row);
                            dst += &src;
                        }
                        Tensor::Real(out)
                    }
                    Tensor::Complex(gc) => {
                        let mut out = ArrayD::<Complex64>::zeros(IxDyn(&shape));
                        for (i, &row) in idx.iter().enumerate() {
                            let src = gc.index_axis(Axis(0), i);
                            let mut dst = out.index_axis_mut(Axis(0), row);
                            dst += &src;
                        }
                        Tensor::Complex(out)
                    }
                };
                accumulate(&mut adj[*a], t);
            }
            Op::RowScatter(a, idx) => {
                let t = match g {
                    Tensor::Real(gr) => Tensor::Real(gr.select(Axis(0), idx)),
                    Tensor::Complex(gc) => Tensor::Complex(gc.select(Axis(0), idx)),
                };
                accumulate(&mut adj[*a], t);
            }
            Op::ModeMatmul(gm, v) => {
                let gc = g.complex().unwrap();
                let g2 = gc.view().into_dimensionality::<Ix2>().unwrap();
                let gmv = self.cval(*gm).view().into_dimensionality::<Ix3>().unwrap();
                let vv = self.cval(*v).view().into_dimensionality::<Ix2>().unwrap();
                let (mm, p, m) = gmv.dim();
                let mut dgm = ndarray::Array3::<Complex64>::zeros((mm, p, m));
                let mut dv = ndarray::Array2::<Complex64>::zeros((mm, m));
                for k in 0..mm {
                    for i in 0..p {
                        let go = g2[[k, i]];
                        for j in 0..m {
                            dgm[[k, i, j]] = go * vv[[k, j]].conj();
                            dv[[k, j]] += gmv[[k, i, j]].conj() * go;
                        }
                    }
                }
                accumulate(&mut adj[*gm], Tensor::Complex(dgm.into_dyn()));
                accumulate(&mut adj[*v], Tensor::Complex(dv.into_dyn()));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                let t = match g {
                    Tensor::Real(x) => Tensor::Real(
                        x.as_standard_layout()
                            .view()
                            .into_shape_with_order(IxDyn(&shape))
                            .expect("contiguous")
                            .to_owned(),
                    ),
                    Tensor::Complex(x) => Tensor::Complex(
                        x.as_standard_layout()
                            .view()
                            .into_shape_with_order(IxDyn(&shape))
                            .expect("contiguous")
                            .to_owned(),
                    ),
                };
                accumulate(&mut adj[*a], t);
            }
        }
    }
}

fn neg_tensor(t: &Tensor) -> Tensor {
    match t {
        Tensor::Real(x) => Tensor::Real(x.mapv(|v| -v)),
        Tensor::Complex(x) => Tensor::Complex(x.mapv(|v| -v)),
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        None => *slot = Some(t),
        Some(acc) => match (acc, t) {
            (Tensor::Real(a), Tensor::Real(b)) => *a += &b,
            (Tensor::Complex(a), Tensor::Complex(b)) => *a += &b,
            _ => panic!("adjoint dtype mismatch"),
        },
    }
}

pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.adj.get(id).and_then(|t| t.as_ref())
    }

    /// Gradients for every named leaf, zeros where no gradient flowed.
    pub fn for_leaves(&self, tape: &Tape) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, id) in tape.leaves() {
            let g = match self.wrt(*id) {
                Some(t) => t.real().expect("leaf gradient is real").clone(),
                None => ArrayD::zeros(tape.value(*id).real().unwrap().raw_dim()),
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub pass: bool,
}

/// Compare tape gradients against central finite differences for every entry
/// of every leaf. `build` must construct the same scalar graph each call.
pub fn grad_check<F>(build: F, params: &ParamStore, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let root = build(&mut tape, p)?;
        let v = tape.value(root).scalar_value()?;
        if !v.is_finite() {
            return Err(Error::numerical("grad_check: non-finite objective"));
        }
        Ok(v)
    };
    let mut tape = Tape::new();
    let root = build(&mut tape, params)?;
    eval(params)?; // finite check
    let grads = tape.backward(root)?.for_leaves(&tape);

    let mut max_rel_err: f64 = 0.0;
    let mut worst_param = String::new();
    for (name, base) in params {
        let Some(analytic) = grads.get(name) else {
            continue;
        };
        for i in 0..base.len() {
            let mut plus = params.clone();
            plus[name].as_slice_mut().unwrap()[i] += step;
            let mut minus = params.clone();
            minus[name].as_slice_mut().unwrap()[i] -= step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let an = analytic.as_slice().unwrap()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_param,
        pass: max_rel_err < tol,
    })
}
