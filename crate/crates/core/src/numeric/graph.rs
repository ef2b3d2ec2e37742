//! Eagerly-built reverse-mode tape.
//!
//! Every operation evaluates immediately and appends a node holding its value
//! and the handles of its inputs. [`Graph::backward`] walks the tape in reverse
//! and accumulates vector-Jacobian products additively across fan-out.

use super::conv::{self, ConvGeom};
use super::scalar::{gemm, Layout, Scalar};
use super::tensor::Tensor;
use crate::error::{contract_err, dim_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag, used for diagnostics and fault injection in the gradient suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    AddScalar,
    Exp,
    Log,
    Square,
    Sqrt,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    SumAll,
    MeanAll,
    SumAxis,
    MeanAxis,
    Transpose,
    Reshape,
    Broadcast,
    GatherRows,
    MatMul,
    Softmax,
    L2Normalize,
    Conv2d,
    UpsampleNearest,
    PadReflect,
    Diagonal,
    WeightedLogSumExp,
    Mse,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Broadcast(Var),
    GatherRows(Var, Vec<usize>),
    MatMul(Var, Var),
    Softmax(Var, usize),
    L2Normalize(Var, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    UpsampleNearest(Var, usize),
    /// Source offset of every output entry.
    PadReflect(Var, Vec<usize>),
    Diagonal(Var),
    WeightedLse(Var, Var),
    Mse(Var, Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Neg(..) => OpKind::Neg,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Square(..) => OpKind::Square,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Relu(..) => OpKind::Relu,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::SumAll(..) => OpKind::SumAll,
            Op::MeanAll(..) => OpKind::MeanAll,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Broadcast(..) => OpKind::Broadcast,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Softmax(..) => OpKind::Softmax,
            Op::L2Normalize(..) => OpKind::L2Normalize,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::UpsampleNearest(..) => OpKind::UpsampleNearest,
            Op::PadReflect(..) => OpKind::PadReflect,
            Op::Diagonal(..) => OpKind::Diagonal,
            Op::WeightedLse(..) => OpKind::WeightedLogSumExp,
            Op::Mse(..) => OpKind::Mse,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-owner computation record. Build one per forward pass and drop it
/// after [`Graph::backward`].
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Split `shape` around `axis` into (outer, extent, inner) block sizes.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {} out of range for shape {:?}", axis, shape));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Source offset for each output element of a broadcast from `src` to `dst`.
fn broadcast_offsets(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let rank = dst.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let n: usize = dst.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < dst[d] {
                break;
            }
            off -= strides[d] * dst[d];
            idx[d] = 0;
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Flip the sign of every gradient emitted by operations of `kind`.
    /// Exists so the gradient-check suite can be shown to detect a broken rule.
    #[doc(hidden)]
    pub fn inject_sign_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(
            value.is_finite() || !value.data().iter().any(|v| v.is_nan()),
            "NaN produced by {:?}",
            op.kind()
        );
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf node; tracked for gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let track = t.requires_grad();
        self.push(t, Op::Leaf, track)
    }

    /// Tracked leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Untracked copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{}: shapes {:?} and {:?} differ",
                what,
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), f);
        let t = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(x, |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            let inv = T::one() / T::of(n as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = Tensor::new(&out_shape, out)?;
        let ng = self.ng(x);
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        Ok(self.push(t, op, ng))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(dim_err!("transpose needs a matrix, got {:?}", shape));
        }
        let (r, c) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Expand size-1 extents of `x` to `shape` (equal rank required).
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let ok = src_shape.len() == shape.len() && src_shape.iter().zip(shape).all(|(&s, &d)| s == d || s == 1);
        if !ok {
            return Err(dim_err!("cannot broadcast {:?} to {:?}", src_shape, shape));
        }
        let offs = broadcast_offsets(&src_shape, shape);
        let src = self.value(x).data();
        let data = offs.iter().map(|&o| src[o]).collect();
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Broadcast(x), ng))
    }

    /// Rows of a matrix selected by index, in the given order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(dim_err!("gather_rows needs a matrix, got {:?}", shape));
        }
        let (r, c) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index(format!("row {} of {}", i, r)));
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(&[idx.len(), c], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec()), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul {:?} · {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::N,
            self.value(b).data(),
            Layout::N,
            T::zero(),
            &mut out,
        );
        let t = Tensor::new(&[m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax(x, axis), ng))
    }

    /// Row-wise `x / (‖x‖ + eps)` for a matrix.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(dim_err!("l2_normalize needs a matrix, got {:?}", shape));
        }
        let eps = T::of(eps);
        let c = shape[1];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(c.max(1)) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = norm + eps;
            out.extend(row.iter().map(|&v| v / d));
        }
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::L2Normalize(x, eps), ng))
    }

    /// Cross-correlation of a `c_in×h×w` input with `c_out×c_in×k×k` kernels.
    /// Output extent per axis is `⌊(h + 2·pad − k)/stride⌋ + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(dim_err!(
                    "conv bias {:?} for {} output channels",
                    self.shape(b),
                    geom.c_out
                ));
            }
        }
        let cols = conv::im2col(self.value(x).data(), &geom);
        let hw = geom.h_out * geom.w_out;
        let mut out = vec![T::zero(); geom.c_out * hw];
        if let Some(b) = bias {
            for (co, &bv) in self.value(b).data().iter().enumerate() {
                out[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = bv);
            }
        }
        gemm(
            geom.c_out,
            geom.patch_len(),
            hw,
            self.value(w).data(),
            Layout::N,
            &cols,
            Layout::N,
            if bias.is_some() { T::one() } else { T::zero() },
            &mut out,
        );
        let t = Tensor::new(&[geom.c_out, geom.h_out, geom.w_out], out)?;
        let ng = self.ng(x) || self.ng(w) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b: bias,
                geom,
                cols,
            },
            ng,
        ))
    }

    /// Nearest-neighbour upsampling of a `c×h×w` map by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || factor == 0 {
            return Err(dim_err!("upsample needs c×h×w and factor ≥ 1, got {:?}", shape));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                let row = &src[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
                for xo in 0..wo {
                    out.push(row[xo / factor]);
                }
            }
        }
        let t = Tensor::new(&[c, ho, wo], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::UpsampleNearest(x, factor), ng))
    }

    /// Mirror-pad the spatial extents of a `c×h×w` map by `pad` on every
    /// side, without repeating the edge (`pad < h, w`).
    pub fn pad_reflect(&mut self, x: Var, pad: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || pad >= shape[1] || pad >= shape[2] {
            return Err(dim_err!(
                "reflect pad {pad} needs c×h×w with h, w > {pad}, got {:?}",
                shape
            ));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let mirror = |i: usize, n: usize| {
            let i = i as isize - pad as isize;
            let n = n as isize;
            (if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            }) as usize
        };
        let mut src = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                let row = (ch * h + mirror(y, h)) * w;
                src.extend((0..wo).map(|xo| row + mirror(xo, w)));
            }
        }
        let data = self.value(x).data();
        let out = src.iter().map(|&o| data[o]).collect();
        let t = Tensor::new(&[c, ho, wo], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::PadReflect(x, src), ng))
    }

    /// Main diagonal of a square matrix.
    pub fn diagonal(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(dim_err!("diagonal needs a square matrix, got {:?}", shape));
        }
        let n = shape[0];
        let src = self.value(x).data();
        let out = (0..n).map(|i| src[i * n + i]).collect();
        let t = Tensor::new(&[n], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Diagonal(x), ng))
    }

    /// Row-wise `log Σ_j w_ij · exp(s_ij)` for matrices `s`, `w` of equal shape.
    /// Weights must be non-negative with at least one positive entry per row.
    pub fn weighted_logsumexp(&mut self, s: Var, w: Var) -> Result<Var> {
        self.same_shape(s, w, "weighted_logsumexp")?;
        let shape = self.shape(s).to_vec();
        if shape.len() != 2 {
            return Err(dim_err!("weighted_logsumexp needs matrices, got {:?}", shape));
        }
        let c = shape[1];
        let (sv, wv) = (self.value(s).data(), self.value(w).data());
        let mut out = Vec::with_capacity(shape[0]);
        for (srow, wrow) in sv.chunks(c).zip(wv.chunks(c)) {
            if wrow.iter().any(|&v| v < T::zero()) {
                return Err(contract_err!("negative weight in weighted_logsumexp"));
            }
            let m = srow
                .iter()
                .zip(wrow)
                .filter(|(_, &wt)| wt > T::zero())
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() {
                return Err(contract_err!("weighted_logsumexp row has no positive weight"));
            }
            let z: T = srow.iter().zip(wrow).map(|(&v, &wt)| wt * (v - m).exp()).sum();
            out.push(m + z.ln());
        }
        let t = Tensor::new(&[shape[0]], out)?;
        let ng = self.ng(s) || self.ng(w);
        Ok(self.push(t, Op::WeightedLse(s, w), ng))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = T::of(av.len() as f64);
        let s: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut parts = self.vjp(i, &g);
            if self.fault == Some(node.op.kind()) {
                for (_, p) in parts.iter_mut() {
                    p.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (v, p) in parts {
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&p).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(p),
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.needs_grad => {
                        Some(Tensor::new(node.value.shape(), g).expect("grad extent"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Contributions of node `i`'s upstream gradient `g` to each tracked input.
    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let y = self.nodes[i].value.data();
        let mut out = Vec::with_capacity(2);
        let mut emit = |v: Var, f: &dyn Fn() -> Vec<T>| {
            if self.ng(v) {
                out.push((v, f()));
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                emit(*a, &|| zip_map(g, val(*b), |g, b| g * b));
                emit(*b, &|| zip_map(g, val(*a), |g, a| g * a));
            }
            Op::Div(a, b) => {
                emit(*a, &|| zip_map(g, val(*b), |g, b| g / b));
                emit(*b, &|| {
                    g.iter()
                        .zip(val(*a))
                        .zip(val(*b))
                        .map(|((&g, &a), &b)| -g * a / (b * b))
                        .collect()
                });
            }
            Op::Neg(x) => emit(*x, &|| g.iter().map(|&v| -v).collect()),
            Op::Scale(x, s) => emit(*x, &|| g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(x) => emit(*x, &|| g.to_vec()),
            Op::Exp(x) => emit(*x, &|| zip_map(g, y, |g, y| g * y)),
            Op::Log(x) => emit(*x, &|| zip_map(g, val(*x), |g, x| g / x)),
            Op::Square(x) => emit(*x, &|| zip_map(g, val(*x), |g, x| g * (x + x))),
            Op::Sqrt(x) => emit(*x, &|| zip_map(g, y, |g, y| g / (y + y))),
            Op::Relu(x) => emit(*x, &|| {
                zip_map(g, val(*x), |g, x| if x > T::zero() { g } else { T::zero() })
            }),
            Op::LeakyRelu(x, s) => emit(*x, &|| {
                zip_map(g, val(*x), |g, x| if x > T::zero() { g } else { g * *s })
            }),
            Op::Sigmoid(x) => emit(*x, &|| zip_map(g, y, |g, y| g * y * (T::one() - y))),
            Op::Tanh(x) => emit(*x, &|| zip_map(g, y, |g, y| g * (T::one() - y * y))),
            Op::SumAll(x) => emit(*x, &|| vec![g[0]; val(*x).len()]),
            Op::MeanAll(x) => emit(*x, &|| {
                let n = val(*x).len();
                vec![g[0] / T::of(n as f64); n]
            }),
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => emit(*x, &|| {
                let (outer, n, inner) = split_axis(self.nodes[x.0].value.shape(), *axis).expect("axis");
                let scale = if matches!(self.nodes[i].op, Op::MeanAxis(..)) {
                    T::one() / T::of(n as f64)
                } else {
                    T::one()
                };
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d = gv * scale;
                        }
                    }
                }
                gx
            }),
            Op::Transpose(x) => emit(*x, &|| {
                let s = self.nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                let mut gx = vec![T::zero(); r * c];
                for a in 0..r {
                    for b in 0..c {
                        gx[a * c + b] = g[b * r + a];
                    }
                }
                gx
            }),
            Op::Reshape(x) => emit(*x, &|| g.to_vec()),
            Op::Broadcast(x) => emit(*x, &|| {
                let src = self.nodes[x.0].value.shape();
                let dst = self.nodes[i].value.shape();
                let mut gx = vec![T::zero(); src.iter().product()];
                for (o, &gv) in broadcast_offsets(src, dst).iter().zip(g) {
                    gx[*o] += gv;
                }
                gx
            }),
            Op::GatherRows(x, idx) => emit(*x, &|| {
                let s = self.nodes[x.0].value.shape();
                let c = s[1];
                let mut gx = vec![T::zero(); s[0] * c];
                for (k, &r) in idx.iter().enumerate() {
                    for (d, &gv) in gx[r * c..(r + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                        *d += gv;
                    }
                }
                gx
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                emit(*a, &|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g, Layout::N, val(*b), Layout::T, T::zero(), &mut ga);
                    ga
                });
                emit(*b, &|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, val(*a), Layout::T, g, Layout::N, T::zero(), &mut gb);
                    gb
                });
            }
            Op::Softmax(x, axis) => emit(*x, &|| {
                let (outer, n, inner) = split_axis(self.nodes[x.0].value.shape(), *axis).expect("axis");
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + c;
                        let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                gx
            }),
            Op::L2Normalize(x, eps) => emit(*x, &|| {
                let xs = val(*x);
                let c = self.nodes[x.0].value.shape()[1].max(1);
                let mut gx = Vec::with_capacity(xs.len());
                // Reductions in f64: the two terms cancel for gradients
                // nearly parallel to the row, which f32 cannot resolve.
                let eps = eps.f64();
                for (row, grow) in xs.chunks(c).zip(g.chunks(c)) {
                    let norm = row.iter().map(|&v| v.f64() * v.f64()).sum::<f64>().sqrt();
                    let d = norm + eps;
                    let gd: f64 = row.iter().zip(grow).map(|(&a, &b)| a.f64() * b.f64()).sum();
                    let coef = if norm > 0.0 { gd / (d * d * norm) } else { 0.0 };
                    gx.extend(
                        row.iter()
                            .zip(grow)
                            .map(|(&xv, &gv)| T::of(gv.f64() / d - xv.f64() * coef)),
                    );
                }
                gx
            }),
            Op::Conv2d { x, w, b, geom, cols } => {
                let hw = geom.h_out * geom.w_out;
                let pl = geom.patch_len();
                emit(*w, &|| {
                    let mut gw = vec![T::zero(); geom.c_out * pl];
                    gemm(geom.c_out, hw, pl, g, Layout::N, cols, Layout::T, T::zero(), &mut gw);
                    gw
                });
                if let Some(b) = b {
                    emit(*b, &|| g.chunks(hw).map(|ch| ch.iter().copied().sum()).collect());
                }
                emit(*x, &|| {
                    let mut gcols = vec![T::zero(); pl * hw];
                    gemm(
                        pl,
                        geom.c_out,
                        hw,
                        val(*w),
                        Layout::T,
                        g,
                        Layout::N,
                        T::zero(),
                        &mut gcols,
                    );
                    conv::col2im(&gcols, geom)
                });
            }
            Op::UpsampleNearest(x, f) => emit(*x, &|| {
                let s = self.nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h * f, w * f);
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for yo in 0..ho {
                        for xo in 0..wo {
                            gx[(ch * h + yo / f) * w + xo / f] += g[(ch * ho + yo) * wo + xo];
                        }
                    }
                }
                gx
            }),
            Op::PadReflect(x, src) => emit(*x, &|| {
                let mut gx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (&o, &gv) in src.iter().zip(g) {
                    gx[o] += gv;
                }
                gx
            }),
            Op::Diagonal(x) => emit(*x, &|| {
                let n = g.len();
                let mut gx = vec![T::zero(); n * n];
                for (k, &gv) in g.iter().enumerate() {
                    gx[k * n + k] = gv;
                }
                gx
            }),
            Op::WeightedLse(s, w) => {
                let c = self.nodes[s.0].value.shape()[1];
                let (sv, wv) = (val(*s), val(*w));
                // e^{s_ij − out_i} is the normalized exponential of each entry.
                let ratio: Vec<T> = sv
                    .chunks(c)
                    .zip(y)
                    .flat_map(|(row, &o)| row.iter().map(move |&v| (v - o).exp()))
                    .collect();
                emit(*s, &|| {
                    ratio
                        .iter()
                        .zip(wv)
                        .enumerate()
                        .map(|(k, (&r, &wt))| g[k / c] * wt * r)
                        .collect()
                });
                emit(*w, &|| ratio.iter().enumerate().map(|(k, &r)| g[k / c] * r).collect());
            }
            Op::Mse(a, b) => {
                let n = T::of(val(*a).len() as f64);
                let two = T::of(2.0);
                emit(*a, &|| zip_map(val(*a), val(*b), |x, y| two * (x - y) / n * g[0]));
                emit(*b, &|| zip_map(val(*a), val(*b), |x, y| two * (y - x) / n * g[0]));
            }
        }
        out
    }
}

/// Gradients of a scalar loss with respect to tracked leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Move the gradient for `v` out, leaving zeros semantics for later calls.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}
