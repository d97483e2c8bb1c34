//! Reverse-mode automatic differentiation over a linear (Wengert) tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the tape
//! from the loss down to the leaves, accumulating gradients, so a value used by
//! several consumers receives the sum of all paths. Nodes whose inputs never
//! require gradients are skipped.

use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{split_axis, strides, Scalar, Tensor};
use crate::error::{GemtError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Square,
    Gelu,
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: F,
    },
    AddScalar {
        x: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    BroadcastTo {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAll {
        x: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Mask {
        x: Var,
        mask: Vec<F>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    non_finite: Option<String>,
}

/// Gradients of the leaves reached by a backward pass.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of `v`, or `None` when no path from the loss reaches it.
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `v`, zeros when unreached.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<F> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (right-aligned), zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < off || shape[i - off] == 1 { 0 } else { s[i - off] })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        // odometer increment
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + F::lit(0.044715) * x * x * x);
    F::lit(0.5) * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + F::lit(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + F::lit(3.0 * 0.044715) * x * x);
    F::lit(0.5) * (F::one() + t) + F::lit(0.5) * x * (F::one() - t * t) * dinner
}

fn acc<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op_name(&op).to_string());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Error if any node so far produced NaN or Inf.
    pub fn check_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(op) => Err(GemtError::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| GemtError::shape(name, &sa, &sb))?;
        let f = |x: F, y: F| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let data: Vec<F> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n: usize = out_shape.iter().product();
            let mut out = vec![F::zero(); n];
            let (ba, bb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
            for_each_bcast(&out_shape, &ba, &bb, |o, ia, ib| out[o] = f(av[ia], bv[ib]));
            out
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Binary { kind, a, b }, rg))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let data = self.value(x).data.iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let data = self.value(x).data.iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::AddScalar { x }, rg)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f = |v: F| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Ln => v.ln(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Square => v * v,
            UnaryKind::Gelu => gelu(v),
            UnaryKind::Relu => v.max(F::zero()),
            UnaryKind::Sigmoid => F::one() / (F::one() + (-v).exp()),
            UnaryKind::Tanh => v.tanh(),
        };
        let data = self.value(x).data.iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Unary { kind, x }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Ln, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }
    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GemtError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![F::zero(); m * n];
        gemm_nn(&self.value(a).data, &self.value(b).data, &mut data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// Batched product of `[B,m,k]` with `[B,k,n]`, or with `[B,n,k]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || GemtError::shape("bmm", sa, sb);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut data = vec![F::zero(); batch * m * n];
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        for i in 0..batch {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let cb = &mut data[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, cb, m, k, n);
            } else {
                gemm_nn(ab, bb, cb, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![batch, m, n],
                data,
            },
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// `x[..., k] · w[k, n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let k = *sx.last().ok_or_else(|| GemtError::arg("linear", "rank-0 input"))?;
        let rows = sx.iter().product::<usize>() / k.max(1);
        let x2 = self.reshape(x, &[rows, k])?;
        let y = self.matmul(x2, w)?;
        let y = match b {
            Some(b) => self.add(y, b)?,
            None => y,
        };
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = self.shape(y)[1];
        self.reshape(y, &out_shape)
    }

    // ── shape manipulation ──────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len()
            || perm
                .iter()
                .any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(GemtError::shape("permute", &sx, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let in_strides = strides(&sx);
        let permuted: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zero = vec![0; out_shape.len()];
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(src.len());
        for_each_bcast(&out_shape, &permuted, &zero, |_, i, _| data.push(src[i]));
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape: out_shape, data },
            Op::Permute { x, perm: perm.to_vec() },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(GemtError::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        match broadcast_shape(&sx, shape) {
            Some(s) if s == shape => {}
            _ => return Err(GemtError::shape("broadcast_to", &sx, shape)),
        }
        let bs = broadcast_strides(&sx, shape);
        let zero = vec![0; shape.len()];
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(shape.iter().product());
        for_each_bcast(shape, &bs, &zero, |_, i, _| data.push(src[i]));
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::BroadcastTo { x },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| GemtError::arg("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(GemtError::arg("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(GemtError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data[o * len..(o + 1) * len]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor { shape: out_shape, data },
            Op::Concat { xs: xs.to_vec(), axis },
            rg,
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(GemtError::arg(
                "slice",
                format!("[{start}, {}) on axis {axis} of {sx:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = sx;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Slice { x, axis, start }, rg))
    }

    /// Index `i` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, i: usize) -> Result<Var> {
        let s = self.slice(x, axis, i, 1)?;
        let mut shape = self.shape(s).to_vec();
        shape.remove(axis);
        self.reshape(s, &shape)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data.iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, F::one() / F::from_usize(n).unwrap())
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(GemtError::arg("sum_axis", format!("axis {axis} of {sx:?}")));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let src = &self.value(x).data;
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        let mut out_shape = sx;
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| GemtError::arg("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, F::one() / F::from_usize(n.max(1)).unwrap()))
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(GemtError::arg("max_axis", format!("axis {axis} of {sx:?}")));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let src = &self.value(x).data;
        let mut data = vec![F::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = src[o * n * inner + i];
                let mut bi = 0;
                for j in 1..n {
                    let v = src[(o * n + j) * inner + i];
                    if v > best {
                        best = v;
                        bi = j;
                    }
                }
                data[o * inner + i] = best;
                argmax[o * inner + i] = bi;
            }
        }
        let mut out_shape = sx;
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::MaxAxis { x, axis, argmax }, rg))
    }

    // ── neural-network primitives ───────────────────────────────────

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(GemtError::arg("softmax", format!("axis {axis} of {sx:?}")));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let src = &self.value(x).data;
        let mut data = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..n {
                    mx = mx.max(src[at(j)]);
                }
                let mut z = F::zero();
                for j in 0..n {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    z = z + e;
                }
                for j in 0..n {
                    data[at(j)] = data[at(j)] / z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: sx, data }, Op::Softmax { x, axis }, rg))
    }

    /// LayerNorm over the last axis followed by `gain * x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| GemtError::arg("layernorm", "rank-0 input"))?;
        if d == 0 || !(eps > F::zero()) {
            return Err(GemtError::arg("layernorm", "need d >= 1 and eps > 0"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(GemtError::shape("layernorm", &sx, self.shape(gain)));
        }
        let rows = self.value(x).numel() / d;
        let src = &self.value(x).data;
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let df = F::from_usize(d).unwrap();
        let mut xhat = vec![F::zero(); src.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut data = vec![F::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor { shape: sx, data },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = self.value(x).data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, Op::Mask { x, mask }, rg)
    }

    /// Rows of a `[n, d]` table, output `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(GemtError::shape("gather_rows", &st, &[]));
        }
        let (n, d) = (st[0], st[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(GemtError::arg("gather_rows", format!("row {bad} of {n}")));
        }
        let src = &self.value(table).data;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![idx.len(), d],
                data,
            },
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(GemtError::shape("cross_entropy", &sl, &[targets.len()]));
        }
        let (rows, c) = (sl[0], sl[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(GemtError::arg("cross_entropy", format!("target {t} of {c} classes")));
        }
        let src = &self.value(logits).data;
        let mut probs = vec![F::zero(); rows * c];
        let mut loss = F::zero();
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss = loss + lse - row[targets[r]];
        }
        loss = loss / F::from_usize(rows.max(1)).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        self.check_finite()?;
        if self.value(loss).numel() != 1 {
            return Err(GemtError::shape("backward", self.shape(loss), &[1]));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GemtError::NonFinite {
                    op: format!("gradient flowing into {}", op_name(&node.op)),
                });
            }
            self.backward_node(node, &g, &mut grads);
        }
        for (g, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(GemtError::NonFinite {
                        op: format!("backward of {}", op_name(&node.op)),
                    });
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let (av, bv) = (&val(a).data, &val(b).data);
                let out = &node.value.shape;
                let (sa, sb) = (val(a).shape.clone(), val(b).shape.clone());
                let (ba, bb) = (broadcast_strides(&sa, out), broadcast_strides(&sb, out));
                if self.rg(a) {
                    let ga = acc(grads, a, av.len());
                    for_each_bcast(out, &ba, &bb, |o, ia, ib| {
                        let d = match kind {
                            BinKind::Add | BinKind::Sub => F::one(),
                            BinKind::Mul => bv[ib],
                            BinKind::Div => F::one() / bv[ib],
                        };
                        ga[ia] = ga[ia] + g[o] * d;
                    });
                }
                if self.rg(b) {
                    let gb = acc(grads, b, bv.len());
                    for_each_bcast(out, &ba, &bb, |o, ia, ib| {
                        let d = match kind {
                            BinKind::Add => F::one(),
                            BinKind::Sub => -F::one(),
                            BinKind::Mul => av[ia],
                            BinKind::Div => -av[ia] / (bv[ib] * bv[ib]),
                        };
                        gb[ib] = gb[ib] + g[o] * d;
                    });
                }
            }
            Op::Scale { x, c } => {
                let gx = acc(grads, *x, g.len());
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d = *d + v * *c;
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                let gx = acc(grads, *x, g.len());
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d = *d + v;
                }
            }
            Op::Unary { kind, x } => {
                let xv = &val(*x).data;
                let y = &node.value.data;
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Neg => -F::one(),
                        UnaryKind::Exp => y[i],
                        UnaryKind::Ln => F::one() / xv[i],
                        UnaryKind::Sqrt => F::lit(0.5) / y[i],
                        UnaryKind::Square => F::lit(2.0) * xv[i],
                        UnaryKind::Gelu => gelu_grad(xv[i]),
                        UnaryKind::Relu => {
                            if xv[i] > F::zero() {
                                F::one()
                            } else {
                                F::zero()
                            }
                        }
                        UnaryKind::Sigmoid => y[i] * (F::one() - y[i]),
                        UnaryKind::Tanh => F::one() - y[i] * y[i],
                    };
                    gx[i] = gx[i] + g[i] * d;
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.rg(a) {
                    let ga = acc(grads, a, m * k);
                    gemm_nt(g, &val(b).data, ga, m, n, k);
                }
                if self.rg(b) {
                    let gb = acc(grads, b, k * n);
                    gemm_tn(&val(a).data, g, gb, k, m, n);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                let (av, bv) = (&val(a).data, &val(b).data);
                if self.rg(a) {
                    let ga = acc(grads, a, batch * m * k);
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // dA = G · B  (B stored [n,k])
                            gemm_nn(gi, bi, gai, m, n, k);
                        } else {
                            gemm_nt(gi, bi, gai, m, n, k);
                        }
                    }
                }
                if self.rg(b) {
                    let gb = acc(grads, b, batch * k * n);
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB[n,k] = Gᵀ · A
                            gemm_tn(gi, ai, gbi, n, m, k);
                        } else {
                            gemm_tn(ai, gi, gbi, k, m, n);
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                let sx = &val(*x).shape;
                let in_strides = strides(sx);
                let permuted: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let zero = vec![0; perm.len()];
                let gx = acc(grads, *x, g.len());
                for_each_bcast(&node.value.shape, &permuted, &zero, |o, i, _| {
                    gx[i] = gx[i] + g[o];
                });
            }
            Op::BroadcastTo { x } => {
                let sx = val(*x).shape.clone();
                let out = &node.value.shape;
                let bs = broadcast_strides(&sx, out);
                let zero = vec![0; out.len()];
                let gx = acc(grads, *x, val(*x).numel());
                for_each_bcast(out, &bs, &zero, |o, i, _| gx[i] = gx[i] + g[o]);
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = split_axis(&node.value.shape, *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &v in xs {
                        let len = val(v).shape[*axis] * inner;
                        if self.rg(v) {
                            let gx = acc(grads, v, val(v).numel());
                            for j in 0..len {
                                gx[o * len + j] = gx[o * len + j] + g[offset + j];
                            }
                        }
                        offset += len;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = &val(*x).shape;
                let (outer, n, inner) = split_axis(sx, *axis);
                let len = node.value.shape[*axis];
                let gx = acc(grads, *x, val(*x).numel());
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        gx[dst + j] = gx[dst + j] + g[src + j];
                    }
                }
            }
            Op::SumAll { x } => {
                let gx = acc(grads, *x, val(*x).numel());
                for d in gx.iter_mut() {
                    *d = *d + g[0];
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(&val(*x).shape, *axis);
                let gx = acc(grads, *x, val(*x).numel());
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            let at = (o * n + j) * inner + i;
                            gx[at] = gx[at] + g[o * inner + i];
                        }
                    }
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, n, inner) = split_axis(&val(*x).shape, *axis);
                let gx = acc(grads, *x, val(*x).numel());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = (o * n + argmax[o * inner + i]) * inner + i;
                        gx[at] = gx[at] + g[o * inner + i];
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(&node.value.shape, *axis);
                let y = &node.value.data;
                let gx = acc(grads, *x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: F = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = gx[at(j)] + y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*gain).numel();
                let rows = rstd.len();
                let gv = &val(*gain).data;
                if self.rg(*gain) {
                    let gg = acc(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = acc(grads, *bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + g[r * d + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let df = F::from_usize(d).unwrap();
                    let gx = acc(grads, *x, rows * d);
                    for r in 0..rows {
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * d + j];
                        }
                        mean_dh = mean_dh / df;
                        mean_dh_h = mean_dh_h / df;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            let at = r * d + j;
                            gx[at] = gx[at] + rstd[r] * (dh - mean_dh - xhat[at] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Mask { x, mask } => {
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * mask[i];
                }
            }
            Op::GatherRows { table, idx } => {
                let d = val(*table).shape[1];
                let gt = acc(grads, *table, val(*table).numel());
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] = gt[i * d + j] + g[r * d + j];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let rows = targets.len();
                let c = probs.len() / rows.max(1);
                let scale = g[0] / F::from_usize(rows.max(1)).unwrap();
                let gl = acc(grads, *logits, probs.len());
                for r in 0..rows {
                    for j in 0..c {
                        let t = if j == targets[r] { F::one() } else { F::zero() };
                        gl[r * c + j] = gl[r * c + j] + scale * (probs[r * c + j] - t);
                    }
                }
            }
        }
    }
}

fn op_name<F>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Binary { kind, .. } => match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        },
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Unary { kind, .. } => match kind {
            UnaryKind::Neg => "neg",
            UnaryKind::Exp => "exp",
            UnaryKind::Ln => "ln",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Square => "square",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
        },
        Op::MatMul { .. } => "matmul",
        Op::BatchMatMul { .. } => "bmm",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::BroadcastTo { .. } => "broadcast_to",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::SumAll { .. } => "sum",
        Op::SumAxis { .. } => "sum_axis",
        Op::MaxAxis { .. } => "max_axis",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layernorm",
        Op::Mask { .. } => "dropout",
        Op::GatherRows { .. } => "gather_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}
