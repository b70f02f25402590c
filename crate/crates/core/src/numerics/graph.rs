//! Append-only differentiation tape.
//!
//! Every op appends a node holding its forward value plus whatever it needs for
//! the vector-Jacobian product. `backward` walks nodes in reverse append order,
//! so each node is visited once and after all of its consumers.

use crate::error::{Error, Result};
use crate::numerics::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Reduction applied by [`Graph::l1_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L1Reduction {
    #[default]
    Mean,
    Sum,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BiasAdd(Var, Var),
    ScaleRows(Var, Var),
    Matmul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SelectRows { x: Var, indices: Vec<usize> },
    Transpose(Var),
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    L1 { a: Var, b: Var, factor: f64 },
    Pick { x: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Reverse-mode differentiation graph over [`Tensor`] values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `c (m×n) = op(a) (m×k) · op(b) (k×n)`, optionally accumulating into `c`.
/// A transposed operand is stored with its two axes swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths were checked above against the logical dimensions and
    // strides, so every element dgemm touches lies inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `data` laid out as `shape` into the axis order `perm`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; gradients accumulate into it on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a trainable leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// Adds a length-`n` bias to every trailing row of `x` (`[..., n]`).
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tx.cols() != tb.len() || tx.rank() == 0 {
            return Err(Error::dim("bias_add", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let n = tb.len();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % n])
            .collect();
        let v = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(v, Op::BiasAdd(x, bias), &[x, bias]))
    }

    /// Multiplies row `i` of `x` (`[R, C]`) by `s[i]` (`s` has `R` elements).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.rank() != 2 || ts.len() != tx.rows() {
            return Err(Error::dim("scale_rows", format!("{:?} by {:?}", tx.shape(), ts.shape())));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ts.data()[i / c])
            .collect();
        let v = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(v, Op::ScaleRows(x, s), &[x, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let v = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(v, Op::Matmul(a, b), &[a, b]))
    }

    /// Batched product of `a: [B, p, q]` with `b: [B, q, r]`, or with `b: [B, r, q]`
    /// read transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bad = || Error::dim("bmm", format!("{:?} x {:?} (trans_b={trans_b})", ta.shape(), tb.shape()));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(bad());
        }
        let (batch, p, q) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (bq, r) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if bq != q {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * p * r];
        for i in 0..batch {
            gemm(
                p,
                q,
                r,
                &ta.data()[i * p * q..(i + 1) * p * q],
                false,
                &tb.data()[i * q * r..(i + 1) * q * r],
                trans_b,
                &mut out[i * p * r..(i + 1) * p * r],
                false,
            );
        }
        let v = Tensor::from_parts(vec![batch, p, r], out);
        Ok(self.push(v, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a), &[a])
    }

    /// Normalizes the last axis, then applies `gain` and `bias` (both length of that axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tx.rank() == 0 || tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::dim(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let v = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = softmax_last(self.value(x), "softmax")?;
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(Error::dim("log_softmax", "empty axis"));
        }
        let n = t.cols();
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, v)| (v - max).exp())
                .sum();
            let log_norm = rest.ln_1p();
            out.extend(row.iter().map(|v| (v - max) - log_norm));
        }
        debug_assert_eq!(out.len(), t.rows() * n);
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(v, Op::LogSoftmax(x), &[x]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::dim("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::from_parts(out_shape, out);
        Ok(self.push(v, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start >= end || end > t.shape()[axis] {
            return Err(Error::dim(
                "slice",
                format!("{start}..{end} on axis {axis} of {:?}", t.shape()),
            ));
        }
        let (outer, inner) = outer_inner(t.shape(), axis);
        let dim = t.shape()[axis];
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::Slice { x, axis, start }, &[x]))
    }

    /// Gathers entries of the leading axis; indices may repeat.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || indices.is_empty() {
            return Err(Error::dim("select_rows", format!("{} indices from {:?}", indices.len(), t.shape())));
        }
        let rows = t.shape()[0];
        let inner = t.len() / rows;
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= rows {
                return Err(Error::dim("select_rows", format!("index {i} out of {rows} rows")));
            }
            out.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::SelectRows { x, indices: indices.to_vec() }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {:?}", t.shape())));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), &[1, 0]);
        let v = Tensor::from_parts(shape, data);
        Ok(self.push(v, Op::Transpose(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of {:?}", t.shape())));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), perm);
        let v = Tensor::from_parts(shape, data);
        Ok(self.push(v, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(v, Op::Mean(x), &[x])
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::dim("sum_axis", format!("axis {axis} of {:?}", t.shape())));
        }
        let (outer, inner) = outer_inner(t.shape(), axis);
        let dim = t.shape()[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &t.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::SumAxis { x, axis }, &[x]))
    }

    /// `‖a − b‖₁`, divided by the element count under [`L1Reduction::Mean`].
    pub fn l1_loss(&mut self, a: Var, b: Var, reduction: L1Reduction) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("l1_loss", ta, tb)?;
        let factor = match reduction {
            L1Reduction::Mean => 1.0 / ta.len() as f64,
            L1Reduction::Sum => 1.0,
        };
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum();
        let v = Tensor::scalar(s * factor);
        Ok(self.push(v, Op::L1 { a, b, factor }, &[a, b]))
    }

    /// Picks `x[r, indices[r]]` for every row of a rank-2 `x`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || indices.len() != t.rows() || indices.iter().any(|&i| i >= t.cols()) {
            return Err(Error::dim("pick", format!("{} indices into {:?}", indices.len(), t.shape())));
        }
        let data = indices.iter().enumerate().map(|(r, &c)| t.row(r)[c]).collect();
        let v = Tensor::vector(data);
        Ok(self.push(v, Op::Pick { x, indices: indices.to_vec() }, &[x]))
    }

    /// Back-propagates from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let shape = node.value.shape().to_vec();
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::from_parts(shape, g)),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        // Adds `f(i)` into the gradient of `v` for each element `i`.
        let mut acc = |v: Var, f: &dyn Fn(usize) -> f64| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            for (i, b) in buf.iter_mut().enumerate() {
                *b += f(i);
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                acc(*a, &|i| g[i]);
                acc(*b, &|i| g[i]);
            }
            Op::Sub(a, b) => {
                acc(*a, &|i| g[i]);
                acc(*b, &|i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|i| g[i] * vb[i]);
                acc(*b, &|i| g[i] * va[i]);
            }
            Op::Scale(a, c) => acc(*a, &|i| g[i] * c),
            Op::BiasAdd(x, b) => {
                acc(*x, &|i| g[i]);
                let n = nodes[b.0].value.len();
                let mut gb = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    gb[i % n] += gi;
                }
                acc(*b, &|i| gb[i]);
            }
            Op::ScaleRows(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let c = nodes[x.0].value.cols();
                acc(*x, &|i| g[i] * vs[i / c]);
                let gs: Vec<f64> = (0..vs.len())
                    .map(|r| (0..c).map(|j| g[r * c + j] * vx[r * c + j]).sum())
                    .collect();
                acc(*s, &|i| gs[i]);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if nodes[a.0].requires_grad {
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(m, n, k, g, false, val(*b), true, buf, true);
                }
                if nodes[b.0].requires_grad {
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm(k, m, n, val(*a), true, g, false, buf, true);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let (batch, p, q) = (sa[0], sa[1], sa[2]);
                let r = node.value.shape()[2];
                let (va, vb) = (val(*a), val(*b));
                if nodes[a.0].requires_grad {
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; batch * p * q]);
                    for i in 0..batch {
                        // dA = G · op(B)ᵀ
                        gemm(
                            p,
                            r,
                            q,
                            &g[i * p * r..(i + 1) * p * r],
                            false,
                            &vb[i * q * r..(i + 1) * q * r],
                            !trans_b,
                            &mut buf[i * p * q..(i + 1) * p * q],
                            true,
                        );
                    }
                }
                if nodes[b.0].requires_grad {
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; batch * q * r]);
                    for i in 0..batch {
                        let ga = &g[i * p * r..(i + 1) * p * r];
                        let aa = &va[i * p * q..(i + 1) * p * q];
                        let out = &mut buf[i * q * r..(i + 1) * q * r];
                        if *trans_b {
                            // stored B is r×q: dB = Gᵀ · A
                            gemm(r, p, q, ga, true, aa, false, out, true);
                        } else {
                            gemm(q, p, r, aa, true, ga, false, out, true);
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &|i| if va[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Gelu(a) => {
                let va = val(*a);
                acc(*a, &|i| {
                    let x = va[i];
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = nodes[gain.0].value.len();
                let gv = val(*gain);
                let rows = rstd.len();
                if nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; rows * n];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat[r * n + j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            dx[r * n + j] = rstd[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
                        }
                    }
                    acc(*x, &|i| dx[i]);
                }
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    dg[i % n] += gi * xhat[i];
                    db[i % n] += gi;
                }
                acc(*gain, &|i| dg[i]);
                acc(*bias, &|i| db[i]);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let dot: f64 = (0..n).map(|j| g[r * n + j] * y[r * n + j]).sum();
                    for j in 0..n {
                        dx[r * n + j] = y[r * n + j] * (g[r * n + j] - dot);
                    }
                }
                acc(*x, &|i| dx[i]);
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let gsum: f64 = g[r * n..(r + 1) * n].iter().sum();
                    for j in 0..n {
                        dx[r * n + j] = g[r * n + j] - y[r * n + j].exp() * gsum;
                    }
                }
                acc(*x, &|i| dx[i]);
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = outer_inner(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for v in inputs {
                    let dim = nodes[v.0].value.shape()[*axis];
                    let off = offset;
                    acc(*v, &|i| {
                        let o = i / (dim * inner);
                        let rem = i % (dim * inner);
                        g[o * total * inner + off * inner + rem]
                    });
                    offset += dim;
                }
                debug_assert_eq!(outer * total * inner, g.len());
            }
            Op::Slice { x, axis, start } => {
                let in_shape = nodes[x.0].value.shape();
                let (_, inner) = outer_inner(in_shape, *axis);
                let dim = in_shape[*axis];
                let len = node.value.shape()[*axis];
                acc(*x, &|i| {
                    let o = i / (dim * inner);
                    let rem = i % (dim * inner);
                    let d = rem / inner;
                    if d >= *start && d < start + len {
                        g[o * len * inner + (d - start) * inner + rem % inner]
                    } else {
                        0.0
                    }
                });
            }
            Op::SelectRows { x, indices } => {
                if nodes[x.0].requires_grad {
                    let t = &nodes[x.0].value;
                    let inner = t.len() / t.shape()[0];
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; t.len()]);
                    for (k, &row) in indices.iter().enumerate() {
                        for j in 0..inner {
                            buf[row * inner + j] += g[k * inner + j];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (gt, _) = permute_data(g, node.value.shape(), &[1, 0]);
                acc(*x, &|i| gt[i]);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (gt, _) = permute_data(g, node.value.shape(), &inverse);
                acc(*x, &|i| gt[i]);
            }
            Op::Reshape(x) => acc(*x, &|i| g[i]),
            Op::Sum(x) => acc(*x, &|_| g[0]),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &|_| g[0] / n);
            }
            Op::SumAxis { x, axis } => {
                let in_shape = nodes[x.0].value.shape();
                let (_, inner) = outer_inner(in_shape, *axis);
                let dim = in_shape[*axis];
                acc(*x, &|i| g[(i / (dim * inner)) * inner + i % inner]);
            }
            Op::L1 { a, b, factor } => {
                let (va, vb) = (val(*a), val(*b));
                let sign = |i: usize| {
                    let d = va[i] - vb[i];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*a, &|i| g[0] * factor * sign(i));
                acc(*b, &|i| -g[0] * factor * sign(i));
            }
            Op::Pick { x, indices } => {
                let c = nodes[x.0].value.cols();
                acc(*x, &|i| if indices[i / c] == i % c { g[i / c] } else { 0.0 });
            }
        }
    }
}

/// Max-subtracted softmax along the last axis of a plain tensor.
pub fn softmax_last(t: &Tensor, op: &'static str) -> Result<Tensor> {
    if t.rank() == 0 {
        return Err(Error::dim(op, "empty axis"));
    }
    let mut out = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        let row = t.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    Ok(Tensor::from_parts(t.shape().to_vec(), out))
}
