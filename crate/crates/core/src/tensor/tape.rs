use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{col2im3x3, gemm, im2col3x3};
use super::{broadcast_shape, numel, Tensor};
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Elementwise operation selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Relu,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy)]
enum UnKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Softplus,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
    Custom(fn(f64) -> f64),
}

enum IndexMap {
    Identity,
    Scalar,
    Map(Vec<usize>),
}

impl IndexMap {
    #[inline]
    fn get(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Scalar => 0,
            IndexMap::Map(m) => m[i],
        }
    }
}

enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        amap: IndexMap,
        bmap: IndexMap,
    },
    Unary {
        kind: UnKind,
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        n: usize,
        k: usize,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    LogSoftmax {
        x: Var,
        cols: usize,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
        mid: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        chunks: Vec<usize>,
        outer: usize,
    },
    IndexSelect {
        x: Var,
        indices: Vec<usize>,
        width: usize,
    },
    Conv1x1 {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        cin: usize,
        cout: usize,
        s: usize,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv3x3Geom,
        cols: Vec<f64>,
    },
    AvgPool2 {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        n: usize,
        c: usize,
        s: usize,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
        train: bool,
    },
}

#[derive(Clone, Copy)]
struct Conv3x3Geom {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics of a train-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

/// A recording of operations, replayed backwards by [`Tape::backward`].
///
/// Each tape owns its nodes; a [`Var`] from one tape must not be used with
/// another (this is checked and panics).
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    leaf_grads: BTreeMap<u32, Vec<f64>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: BTreeMap::new(),
        }
    }

    /// Drop every node. Handles from before the reset become invalid.
    pub fn clear(&mut self) {
        *self = Self::new();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx as usize]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    // ---- elementwise -------------------------------------------------

    /// Dispatch form of the elementwise family.
    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(shape_err!("{:?} takes {} inputs, got {}", kind, arity, inputs.len()));
        }
        match kind {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Sub => self.sub(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Div => self.div(inputs[0], inputs[1]),
            Elementwise::Scale(c) => Ok(self.scale(inputs[0], c)),
            Elementwise::Relu => Ok(self.relu(inputs[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(inputs[0])),
            Elementwise::Exp => Ok(self.exp(inputs[0])),
            Elementwise::Log => self.log(inputs[0]),
        }
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let amap = index_map(&out_shape, &sa);
        let bmap = index_map(&out_shape, &sb);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let mut out = vec![0.0; n];
        match kind {
            BinKind::Add => (0..n).for_each(|i| out[i] = av[amap.get(i)] + bv[bmap.get(i)]),
            BinKind::Sub => (0..n).for_each(|i| out[i] = av[amap.get(i)] - bv[bmap.get(i)]),
            BinKind::Mul => (0..n).for_each(|i| out[i] = av[amap.get(i)] * bv[bmap.get(i)]),
            BinKind::Div => {
                if bv.iter().any(|&x| x == 0.0) {
                    return Err(Error::Domain("division by zero".into()));
                }
                (0..n).for_each(|i| out[i] = av[amap.get(i)] / bv[bmap.get(i)])
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Binary {
                kind,
                a,
                b,
                amap,
                bmap,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    /// Errors with `Domain` on a zero divisor.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, x: Var) -> Var {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().map(|&v| unary_fwd(kind, v)).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        Ok(self.unary(UnKind::Log, x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Domain("sqrt of a negative value".into()));
        }
        Ok(self.unary(UnKind::Sqrt, x))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnKind::Softplus, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnKind::AddScalar(c), x)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnKind::Clamp(lo, hi), x)
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(UnKind::Clamp(lo, f64::INFINITY), x)
    }

    /// Elementwise user function with a caller-supplied derivative.
    pub fn custom_unary(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(
            value,
            Op::Unary {
                kind: UnKind::Custom(df),
                x,
            },
            rg,
        )
    }

    // ---- linear algebra ----------------------------------------------

    /// `A[m×k] · B[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched or plain product of `op(a)` and `op(b)`, where `ta`/`tb`
    /// transpose the last two axes. Operands are both 2-D or both 3-D with
    /// equal leading extent.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let batch = match (sa.len(), sb.len()) {
            (2, 2) => 1,
            (3, 3) if sa[0] == sb[0] => sa[0],
            _ => return Err(shape_err!("matmul operands {:?} and {:?}", sa, sb)),
        };
        let (r, c) = (sa.len() - 2, sa.len() - 1);
        let (m, k) = if ta { (sa[c], sa[r]) } else { (sa[r], sa[c]) };
        let (k2, n) = if tb { (sb[c], sb[r]) } else { (sb[r], sb[c]) };
        if k != k2 {
            return Err(shape_err!("matmul inner extents {} and {} differ", k, k2));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            gemm(
                m,
                n,
                k,
                &av[t * m * k..(t + 1) * m * k],
                ta,
                &bv[t * k * n..(t + 1) * k * n],
                tb,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let shape: Vec<usize> = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                n,
                k,
            },
            rg,
        ))
    }

    /// Softmax over the last axis, stabilized by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (cols, out) = self.row_softmax(x, false)?;
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, cols }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (cols, out) = self.row_softmax(x, true)?;
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax { x, cols }, rg))
    }

    fn row_softmax(&self, x: Var, log: bool) -> Result<(usize, Vec<f64>)> {
        let xv = self.value(x);
        let cols = *xv
            .shape()
            .last()
            .ok_or_else(|| shape_err!("softmax of a scalar"))?;
        if cols == 0 {
            return Err(shape_err!("softmax over an empty axis"));
        }
        if xv.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("softmax input is not finite".into()));
        }
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = libm::exp(v - mx);
                z += *oi;
            }
            if log {
                let lz = libm::log(z);
                for (oi, &v) in o.iter_mut().zip(row) {
                    *oi = v - mx - lz;
                }
            } else {
                o.iter_mut().for_each(|oi| *oi /= z);
            }
        }
        Ok((cols, out))
    }

    // ---- reductions & shape ------------------------------------------

    /// Reduce over `axes` (dropped from the output shape).
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
        let ndim = self.shape(x).len();
        let mut ax = axes.to_vec();
        ax.sort_unstable();
        ax.dedup();
        if let Some(&bad) = ax.iter().find(|&&a| a >= ndim) {
            return Err(shape_err!("axis {} out of range for {}-d tensor", bad, ndim));
        }
        if ax.is_empty() {
            return Ok(x);
        }
        let contiguous = ax.windows(2).all(|w| w[1] == w[0] + 1);
        if contiguous {
            return self.reduce_range(kind, x, ax[0], ax[ax.len() - 1] + 1);
        }
        let mut cur = x;
        for &a in ax.iter().rev() {
            cur = self.reduce_range(kind, cur, a, a + 1)?;
        }
        Ok(cur)
    }

    fn reduce_range(&mut self, kind: ReduceKind, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let outer: usize = shape[..lo].iter().product();
        let mid: usize = shape[lo..hi].iter().product();
        let inner: usize = shape[hi..].iter().product();
        if mid == 0 {
            return Err(shape_err!("reduction over an empty axis of {:?}", shape));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for m in 0..mid {
                        let src = &xv[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                    if kind == ReduceKind::Mean {
                        let inv = 1.0 / mid as f64;
                        dst.iter_mut().for_each(|d| *d *= inv);
                    }
                }
            }
            ReduceKind::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = o * mid * inner + i;
                        for m in 1..mid {
                            let j = (o * mid + m) * inner + i;
                            if xv[j] > xv[best] {
                                best = j;
                            }
                        }
                        out[o * inner + i] = xv[best];
                        argmax[o * inner + i] = best;
                    }
                }
            }
        }
        let mut oshape: Vec<usize> = shape[..lo].to_vec();
        oshape.extend_from_slice(&shape[hi..]);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::Reduce {
                x,
                kind,
                mid,
                inner,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd == 0 {
            return Ok(x);
        }
        self.reduce_range(ReduceKind::Sum, x, 0, nd)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd == 0 {
            return Ok(x);
        }
        self.reduce_range(ReduceKind::Mean, x, 0, nd)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {} out of range", axis));
        }
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let mut chunks = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err!("concat shapes {:?} and {:?}", first, s));
            }
            chunks.push(s[axis] * tail);
            total += s[axis];
        }
        let width: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(p).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                chunks,
                outer,
            },
            rg,
        ))
    }

    /// Gather entries of axis 0.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| shape_err!("index_select on a scalar"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(shape_err!("index {} out of range for {} rows", bad, rows));
        }
        let width = numel(&shape[1..]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&xv[i * width..(i + 1) * width]);
        }
        let mut oshape = shape.clone();
        oshape[0] = indices.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
                width,
            },
            rg,
        ))
    }

    // ---- convolution-style blocks -----------------------------------

    /// Per-position channel mixing: `x[N×C_in×…]`, `w[C_out×C_in]`, `b[C_out]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() < 2 || sw.len() != 2 || sw[1] != sx[1] {
            return Err(shape_err!("conv1x1 input {:?} with weight {:?}", sx, sw));
        }
        let (n, cin, cout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv1x1 bias {:?}, want [{}]", self.shape(b), cout));
            }
        }
        let s = numel(&sx[2..]);
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; n * cout * s];
        for i in 0..n {
            let o = &mut out[i * cout * s..(i + 1) * cout * s];
            gemm(cout, s, cin, wv, false, &xv[i * cin * s..(i + 1) * cin * s], false, o);
            if let Some(b) = b {
                for (c, &bv) in self.value(b).data().iter().enumerate() {
                    o[c * s..(c + 1) * s].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut shape = sx.clone();
        shape[1] = cout;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Conv1x1 {
                x,
                w,
                b,
                n,
                cin,
                cout,
                s,
            },
            rg,
        ))
    }

    /// 3×3 convolution with padding 1: `x[N×C_in×H×W]`, `w[C_out×C_in×3×3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 || stride == 0 {
            return Err(shape_err!("conv3x3 input {:?} with weight {:?}", sx, sw));
        }
        let (n, cin, h, wd, cout) = (sx[0], sx[1], sx[2], sx[3], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv3x3 bias {:?}, want [{}]", self.shape(b), cout));
            }
        }
        let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        let npix = ho * wo;
        let csz = cin * 9 * npix;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut cols = vec![0.0; n * csz];
        let mut out = vec![0.0; n * cout * npix];
        for i in 0..n {
            let cb = &mut cols[i * csz..(i + 1) * csz];
            im2col3x3(&xv[i * cin * h * wd..(i + 1) * cin * h * wd], cin, h, wd, stride, ho, wo, cb);
            let o = &mut out[i * cout * npix..(i + 1) * cout * npix];
            gemm(cout, npix, cin * 9, wv, false, cb, false, o);
            if let Some(b) = b {
                for (c, &bv) in self.value(b).data().iter().enumerate() {
                    o[c * npix..(c + 1) * npix].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let geom = Conv3x3Geom {
            n,
            cin,
            cout,
            h,
            w: wd,
            ho,
            wo,
            stride,
        };
        Ok(self.push(
            Tensor::new(&[n, cout, ho, wo], out)?,
            Op::Conv3x3 { x, w, b, geom, cols },
            rg,
        ))
    }

    /// 2×2 average pooling with stride 2 over the last two axes.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 1] % 2 != 0 || s[s.len() - 2] % 2 != 0 {
            return Err(shape_err!("avg_pool2 needs even spatial extents, got {:?}", s));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s[..s.len() - 2]);
        let xv = self.value(x).data();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    out[(p * ho + y) * wo + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let mut shape = s.clone();
        let nd = shape.len();
        shape[nd - 2] = ho;
        shape[nd - 1] = wo;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AvgPool2 { x, planes, h, w }, rg))
    }

    /// Per-channel normalization of `x[N×C×…]` over every axis except 1.
    ///
    /// With `running = None` the batch statistics are used (train mode) and
    /// returned so the caller can update running estimates; otherwise the
    /// supplied `(mean, var)` are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(shape_err!("batch_norm input {:?} needs N×C×…", sx));
        }
        let (n, c) = (sx[0], sx[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!("batch_norm affine parameters must be [{}]", c));
        }
        let s = numel(&sx[2..]);
        let xv = self.value(x).data();
        let count = n * s;
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err!("running statistics must have {} channels", c));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if n < 2 {
                    return Err(Error::DegenerateBatch(alloc::format!(
                        "train-mode batch norm needs at least 2 samples, got {}",
                        n
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += xv[(i * c + ch) * s..(i * c + ch + 1) * s].iter().sum::<f64>();
                    }
                    mean[ch] = acc / count as f64;
                    let mut sq = 0.0;
                    for i in 0..n {
                        for &v in &xv[(i * c + ch) * s..(i * c + ch + 1) * s] {
                            let d = v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq / count as f64;
                }
                (mean, var, true)
            }
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                for j in r {
                    xhat[j] = (xv[j] - mean[ch]) * invstd[ch];
                    out[j] = gv[ch] * xhat[j] + bv[ch];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(&sx, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                n,
                c,
                s,
                xhat,
                invstd,
                train: stats,
            },
            rg,
        );
        let stats = stats.then_some(BatchStats { mean, var, count });
        Ok((v, stats))
    }

    // ---- backward -----------------------------------------------------

    /// Accumulate d`loss`/d`leaf` into every `requires_grad` leaf.
    ///
    /// Calling this twice without [`Tape::zero_grads`] adds the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.node(loss);
        if lv.value.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                lv.value.shape()
            ));
        }
        let end = loss.idx as usize + 1;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..end).map(|_| None).collect();
        grads[end - 1] = Some(vec![1.0]);
        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backward_node(nodes, node, &g, &mut grads, &mut self.leaf_grads, i as u32);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                self.leaf_grads
                    .entry(i as u32)
                    .or_insert_with(|| vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward ran.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = self.node(v);
        self.leaf_grads
            .get(&v.idx)
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Every accumulated leaf gradient, keyed by leaf handle.
    pub fn gradients(&self) -> BTreeMap<Var, Tensor> {
        self.leaf_grads
            .keys()
            .map(|&idx| {
                let v = Var { tape: self.id, idx };
                (v, self.grad(v).expect("present"))
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.clear();
    }
}

fn unary_fwd(kind: UnKind, v: f64) -> f64 {
    match kind {
        UnKind::Relu => {
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        UnKind::Sigmoid => sigmoid(v),
        UnKind::Exp => libm::exp(v),
        UnKind::Log => libm::log(v),
        UnKind::Sqrt => libm::sqrt(v),
        UnKind::Softplus => softplus(v),
        UnKind::Scale(c) => c * v,
        UnKind::AddScalar(c) => c + v,
        UnKind::Clamp(lo, hi) => v.max(lo).min(hi),
        UnKind::Custom(_) => unreachable!("custom forward is evaluated by the caller"),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + libm::log1p(libm::exp(-v))
    } else {
        libm::log1p(libm::exp(v))
    }
}

fn index_map(out: &[usize], inp: &[usize]) -> IndexMap {
    if out == inp {
        return IndexMap::Identity;
    }
    if numel(inp) == 1 {
        return IndexMap::Scalar;
    }
    let nd = out.len();
    let off = nd - inp.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1;
    for d in (0..inp.len()).rev() {
        if inp[d] != 1 {
            strides[d + off] = acc;
        }
        acc *= inp[d];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..nd).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    IndexMap::Map(map)
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    let i = v.idx as usize;
    if !nodes[i].requires_grad {
        return;
    }
    match &mut grads[i] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backward_node(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    leaf_grads: &mut BTreeMap<u32, Vec<f64>>,
    self_idx: u32,
) {
    let val = |v: Var| nodes[v.idx as usize].value.data();
    let len = |v: Var| nodes[v.idx as usize].value.len();
    let needs = |v: Var| nodes[v.idx as usize].requires_grad;
    match &node.op {
        Op::Leaf => {
            let acc = leaf_grads
                .entry(self_idx)
                .or_insert_with(|| vec![0.0; g.len()]);
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Op::Binary {
            kind,
            a,
            b,
            amap,
            bmap,
        } => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let mut ga = vec![0.0; len(*a)];
                for (i, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        BinKind::Add | BinKind::Sub => gi,
                        BinKind::Mul => gi * bv[bmap.get(i)],
                        BinKind::Div => gi / bv[bmap.get(i)],
                    };
                    ga[amap.get(i)] += d;
                }
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; len(*b)];
                for (i, &gi) in g.iter().enumerate() {
                    let j = bmap.get(i);
                    let d = match kind {
                        BinKind::Add => gi,
                        BinKind::Sub => -gi,
                        BinKind::Mul => gi * av[amap.get(i)],
                        BinKind::Div => -gi * av[amap.get(i)] / (bv[j] * bv[j]),
                    };
                    gb[j] += d;
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Unary { kind, x } => {
            let xv = val(*x);
            let y = node.value.data();
            let gx: Vec<f64> = (0..g.len())
                .map(|i| {
                    g[i] * match *kind {
                        UnKind::Relu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnKind::Sigmoid => y[i] * (1.0 - y[i]),
                        UnKind::Exp => y[i],
                        UnKind::Log => 1.0 / xv[i],
                        UnKind::Sqrt => 0.5 / y[i],
                        UnKind::Softplus => sigmoid(xv[i]),
                        UnKind::Scale(c) => c,
                        UnKind::AddScalar(_) => 1.0,
                        UnKind::Clamp(lo, hi) => {
                            if xv[i] >= lo && xv[i] <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnKind::Custom(df) => df(xv[i]),
                    }
                })
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            n,
            k,
        } => {
            let (m, n, k) = (*m, *n, *k);
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let mut ga = vec![0.0; batch * m * k];
                for t in 0..*batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let bt = &bv[t * k * n..(t + 1) * k * n];
                    let out = &mut ga[t * m * k..(t + 1) * m * k];
                    if *ta {
                        // A stored k×m: dA = op(B) · dCᵀ
                        gemm(k, m, n, bt, *tb, gt, true, out);
                    } else {
                        gemm(m, k, n, gt, false, bt, !*tb, out);
                    }
                }
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; batch * k * n];
                for t in 0..*batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let at = &av[t * m * k..(t + 1) * m * k];
                    let out = &mut gb[t * k * n..(t + 1) * k * n];
                    if *tb {
                        // B stored n×k: dB = dCᵀ · op(A)
                        gemm(n, k, m, gt, true, at, *ta, out);
                    } else {
                        gemm(k, n, m, at, !*ta, gt, false, out);
                    }
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Softmax { x, cols } => {
            let y = node.value.data();
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), out) in y.chunks(*cols).zip(g.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..*cols {
                    out[j] = yr[j] * (gr[j] - dotp);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::LogSoftmax { x, cols } => {
            let y = node.value.data();
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), out) in y.chunks(*cols).zip(g.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                let gs: f64 = gr.iter().sum();
                for j in 0..*cols {
                    out[j] = gr[j] - libm::exp(yr[j]) * gs;
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Reduce {
            x,
            kind,
            mid,
            inner,
            argmax,
        } => {
            let mut gx = vec![0.0; len(*x)];
            let (mid, inner) = (*mid, *inner);
            let outer = g.len() / inner.max(1);
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let f = if *kind == ReduceKind::Mean { 1.0 / mid as f64 } else { 1.0 };
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for m in 0..mid {
                            let dst = &mut gx[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += f * s);
                        }
                    }
                }
                ReduceKind::Max => {
                    for (o, &j) in argmax.iter().enumerate() {
                        gx[j] += g[o];
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Reshape { x } => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Concat {
            parts,
            chunks,
            outer,
        } => {
            let width: usize = chunks.iter().sum();
            let mut off = 0;
            for (&p, &c) in parts.iter().zip(chunks) {
                if needs(p) {
                    let mut gp = Vec::with_capacity(outer * c);
                    for o in 0..*outer {
                        gp.extend_from_slice(&g[o * width + off..o * width + off + c]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                off += c;
            }
        }
        Op::IndexSelect { x, indices, width } => {
            let mut gx = vec![0.0; len(*x)];
            for (r, &i) in indices.iter().enumerate() {
                let dst = &mut gx[i * width..(i + 1) * width];
                dst.iter_mut()
                    .zip(&g[r * width..(r + 1) * width])
                    .for_each(|(d, s)| *d += s);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Conv1x1 {
            x,
            w,
            b,
            n,
            cin,
            cout,
            s,
        } => {
            let (n, cin, cout, s) = (*n, *cin, *cout, *s);
            let (xv, wv) = (val(*x), val(*w));
            if needs(*x) {
                let mut gx = vec![0.0; n * cin * s];
                for i in 0..n {
                    gemm(
                        cin,
                        s,
                        cout,
                        wv,
                        true,
                        &g[i * cout * s..(i + 1) * cout * s],
                        false,
                        &mut gx[i * cin * s..(i + 1) * cin * s],
                    );
                }
                accumulate(nodes, grads, *x, gx);
            }
            if needs(*w) {
                let mut gw = vec![0.0; cout * cin];
                for i in 0..n {
                    gemm(
                        cout,
                        cin,
                        s,
                        &g[i * cout * s..(i + 1) * cout * s],
                        false,
                        &xv[i * cin * s..(i + 1) * cin * s],
                        true,
                        &mut gw,
                    );
                }
                accumulate(nodes, grads, *w, gw);
            }
            if let Some(b) = b {
                if needs(*b) {
                    let mut gb = vec![0.0; cout];
                    for i in 0..n {
                        for c in 0..cout {
                            gb[c] += g[(i * cout + c) * s..(i * cout + c + 1) * s].iter().sum::<f64>();
                        }
                    }
                    accumulate(nodes, grads, *b, gb);
                }
            }
        }
        Op::Conv3x3 { x, w, b, geom, cols } => {
            let Conv3x3Geom {
                n,
                cin,
                cout,
                h,
                w: wd,
                ho,
                wo,
                stride,
            } = *geom;
            let npix = ho * wo;
            let csz = cin * 9 * npix;
            let wv = val(*w);
            if needs(*w) {
                let mut gw = vec![0.0; cout * cin * 9];
                for i in 0..n {
                    gemm(
                        cout,
                        cin * 9,
                        npix,
                        &g[i * cout * npix..(i + 1) * cout * npix],
                        false,
                        &cols[i * csz..(i + 1) * csz],
                        true,
                        &mut gw,
                    );
                }
                accumulate(nodes, grads, *w, gw);
            }
            if needs(*x) {
                let mut gx = vec![0.0; n * cin * h * wd];
                let mut gcols = vec![0.0; csz];
                for i in 0..n {
                    gcols.iter_mut().for_each(|v| *v = 0.0);
                    gemm(
                        cin * 9,
                        npix,
                        cout,
                        wv,
                        true,
                        &g[i * cout * npix..(i + 1) * cout * npix],
                        false,
                        &mut gcols,
                    );
                    col2im3x3(
                        &gcols,
                        cin,
                        h,
                        wd,
                        stride,
                        ho,
                        wo,
                        &mut gx[i * cin * h * wd..(i + 1) * cin * h * wd],
                    );
                }
                accumulate(nodes, grads, *x, gx);
            }
            if let Some(b) = b {
                if needs(*b) {
                    let mut gb = vec![0.0; cout];
                    for i in 0..n {
                        for c in 0..cout {
                            gb[c] += g[(i * cout + c) * npix..(i * cout + c + 1) * npix]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    accumulate(nodes, grads, *b, gb);
                }
            }
        }
        Op::AvgPool2 { x, planes, h, w } => {
            let (h, w) = (*h, *w);
            let (ho, wo) = (h / 2, w / 2);
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..*planes {
                for y in 0..ho {
                    for xx in 0..wo {
                        let gv = 0.25 * g[(p * ho + y) * wo + xx];
                        let i = p * h * w + 2 * y * w + 2 * xx;
                        gx[i] += gv;
                        gx[i + 1] += gv;
                        gx[i + w] += gv;
                        gx[i + w + 1] += gv;
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            n,
            c,
            s,
            xhat,
            invstd,
            train,
        } => {
            let (n, c, s) = (*n, *c, *s);
            let gv = val(*gamma);
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                        sum_g[ch] += g[j];
                        sum_gx[ch] += g[j] * xhat[j];
                    }
                }
            }
            if needs(*x) {
                let m = (n * s) as f64;
                let mut gx = vec![0.0; g.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let k = gv[ch] * invstd[ch];
                        for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                            gx[j] = if *train {
                                k * (g[j] - sum_g[ch] / m - xhat[j] * sum_gx[ch] / m)
                            } else {
                                k * g[j]
                            };
                        }
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
            accumulate(nodes, grads, *gamma, sum_gx);
            accumulate(nodes, grads, *beta, sum_g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_map_middle_axis() {
        let m = index_map(&[2, 3, 2], &[2, 1, 2]);
        let IndexMap::Map(v) = m else { panic!("expected map") };
        assert_eq!(v, [0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0, 2.0]));
        let b = t.param(Tensor::vector(vec![3.0]));
        let l = t.sum_all(a).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(b).unwrap().data(), &[0.0]);
        assert_eq!(t.grad(a).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.mul(w, w).unwrap();
        let l = t.sum_all(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0, 4.0]);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[4.0, 8.0]);
        t.zero_grads();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_backward_is_shape_error() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(Error::Shape(_))));
    }

    #[test]
    #[should_panic(expected = "another tape")]
    fn foreign_var_panics() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(Tensor::scalar(1.0));
        let _ = b.relu(x);
    }
}
