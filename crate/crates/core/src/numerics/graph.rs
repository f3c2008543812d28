//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the tape in reverse creation order, so each node is visited exactly
//! once and leaf gradients are summed over all of their uses.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Log,
    LogSigmoid,
}

/// Layout of a grouped multi-head attention call.
///
/// Queries are `groups * m` rows and keys/values `groups * n` rows; row block
/// `g` of the queries attends only over row block `g` of the keys. Columns are
/// split evenly into `heads`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSpec {
    pub groups: usize,
    pub heads: usize,
    pub causal: bool,
    pub scale: f64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale { x: Var, c: T },
    MulScalar { x: Var, s: Var },
    Unary { x: Var, kind: Unary },
    Softmax { x: Var, axis: usize },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<T> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Narrow { x: Var, axis: usize, start: usize },
    Expand { x: Var, row_rep: usize, col_rep: usize },
    Tile { x: Var, times: usize },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    KlRows { p: Var, q: Var, p_probs: Vec<T>, q_probs: Vec<T>, kl_rows: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of the leaves that require them.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unused.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

/// A recorded computation. Not shareable across threads.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rc<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    t.dims2()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the post-op scan for NaN/Inf values.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        rc(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                if tb { "matmul_t" } else { "matmul" },
                self.shape(a),
                self.shape(b),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            tb,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, tb }, rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (rr, rn) = self.dims(row);
        if rr != 1 || rn != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += r[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, row]);
        self.push(Tensor::new(shape, out)?, Op::AddRow { x, row }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x, c }, rg)
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x, s]);
        self.push(t, Op::MulScalar { x, s }, rg)
    }

    // ---------------------------------------------------------------- pointwise

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let v = self.value(x);
        if kind == Unary::Log {
            if let Some(bad) = v.data().iter().find(|&&e| e <= T::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let t = v.map(|e| unary_fwd(kind, e));
        let rg = self.rg(&[x]);
        self.push(t, Op::Unary { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::LogSigmoid)
    }

    /// Max-shifted softmax along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let axis = normalize_axis(v, axis)?;
        let (m, n) = rc(v);
        let mut out = v.data().to_vec();
        for_each_lane(m, n, axis, |idx| softmax_lane(&mut out, idx));
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg)
    }

    /// Root-mean-square normalisation of each row, times a `1 x n` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gain) != (1, n) {
            return Err(Error::shape("rms_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::from_f64_lossy(eps);
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let nn = T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); m * n];
        let mut inv = vec![T::zero(); m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let ms = row.iter().map(|&e| e * e).sum::<T>() / nn;
            let r = T::one() / (ms + eps).sqrt();
            inv[i] = r;
            for j in 0..n {
                out[i * n + j] = row[j] * r * gv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain]);
        self.push(
            Tensor::new(shape, out)?,
            Op::RmsNorm {
                x,
                gain,
                inv_rms: inv,
            },
            rg,
        )
    }

    /// Scaled dot-product attention, grouped and multi-headed; see [`AttentionSpec`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, qc) = self.dims(q);
        let (kr, kc) = self.dims(k);
        let (vr, vc) = self.dims(v);
        let g = spec.groups;
        let h = spec.heads;
        if g == 0 || h == 0 || qr % g != 0 || kr % g != 0 || kr == 0 {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if kc != qc || vr != kr || qc % h != 0 || vc % h != 0 {
            return Err(Error::shape("attention", self.shape(q), self.shape(v)));
        }
        let m = qr / g;
        let n = kr / g;
        if spec.causal && m != n {
            return Err(Error::Contract("causal attention needs square blocks".into()));
        }
        let dk = qc / h;
        let dv = vc / h;
        let scale = T::from_f64_lossy(spec.scale);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); qr * vc];
        let mut probs = vec![T::zero(); g * h * m * n];
        let mut qb = vec![T::zero(); m * dk];
        let mut kb = vec![T::zero(); n * dk];
        let mut vb = vec![T::zero(); n * dv];
        let mut ob = vec![T::zero(); m * dv];
        for gi in 0..g {
            for hi in 0..h {
                copy_block(qd, qc, gi * m, hi * dk, m, dk, &mut qb);
                copy_block(kd, kc, gi * n, hi * dk, n, dk, &mut kb);
                copy_block(vd, vc, gi * n, hi * dv, n, dv, &mut vb);
                let p = &mut probs[(gi * h + hi) * m * n..(gi * h + hi + 1) * m * n];
                T::gemm(m, dk, n, &qb, false, &kb, true, p, false);
                for i in 0..m {
                    let lane = &mut p[i * n..(i + 1) * n];
                    lane.iter_mut().for_each(|e| *e *= scale);
                    let upto = if spec.causal { i + 1 } else { n };
                    softmax_slice(&mut lane[..upto]);
                    lane[upto..].iter_mut().for_each(|e| *e = T::zero());
                }
                T::gemm(m, n, dv, p, false, &vb, false, &mut ob, false);
                paste_block(&mut out, vc, gi * m, hi * dv, m, dv, &ob);
            }
        }
        let rg = self.rg(&[q, k, v]);
        if !rg {
            probs = Vec::new();
        }
        self.push(
            Tensor::new([qr, vc], out)?,
            Op::Attention { q, k, v, spec, probs },
            rg,
        )
    }

    // ---------------------------------------------------------------- structure

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::OutOfRange {
                    what: "rows",
                    index: i,
                    bound: m,
                });
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new([idx.len(), n], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let n = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::new([rows, n], out)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let m = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += c;
        }
        let mut out = vec![T::zero(); m * total];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.dims(p);
            let d = self.value(p).data();
            for i in 0..m {
                out[i * total + off..i * total + off + c].copy_from_slice(&d[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let rg = self.rg(parts);
        self.push(Tensor::new([m, total], out)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Slice `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        let bound = if axis == 0 { m } else { n };
        if axis > 1 || len == 0 || start + len > bound {
            return Err(Error::OutOfRange {
                what: "narrow",
                index: start + len,
                bound,
            });
        }
        let d = self.value(x).data();
        let (out, shape) = if axis == 0 {
            (d[start * n..(start + len) * n].to_vec(), [len, n])
        } else {
            let mut o = Vec::with_capacity(m * len);
            for i in 0..m {
                o.extend_from_slice(&d[i * n + start..i * n + start + len]);
            }
            (o, [m, len])
        };
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, rg)
    }

    /// Repeats each row `row_rep` times and each column `col_rep` times in place.
    pub fn expand(&mut self, x: Var, row_rep: usize, col_rep: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if row_rep == 0 || col_rep == 0 {
            return Err(Error::Contract("expand by zero".into()));
        }
        let d = self.value(x).data();
        let (om, on) = (m * row_rep, n * col_rep);
        let mut out = Vec::with_capacity(om * on);
        for i in 0..om {
            let src = &d[(i / row_rep) * n..(i / row_rep + 1) * n];
            for j in 0..on {
                out.push(src[j / col_rep]);
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new([om, on], out)?,
            Op::Expand { x, row_rep, col_rep },
            rg,
        )
    }

    /// Stacks `times` copies of the whole matrix vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if times == 0 {
            return Err(Error::Contract("tile by zero".into()));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(m * n * times);
        for _ in 0..times {
            out.extend_from_slice(d);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new([m * times, n], out)?, Op::Tile { x, times }, rg)
    }

    // ---------------------------------------------------------------- reductions and losses

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`: axis 1 gives an `m x 1` column, axis 0 a `1 x n` row.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        let d = self.value(x).data();
        let (out, shape) = match axis {
            0 => {
                let mut o = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        o[j] += d[i * n + j];
                    }
                }
                (o, [1, n])
            }
            1 => ((0..m).map(|i| d[i * n..(i + 1) * n].iter().copied().sum()).collect(), [m, 1]),
            _ => {
                return Err(Error::OutOfRange {
                    what: "axis",
                    index: axis,
                    bound: 2,
                })
            }
        };
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis }, rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::OutOfRange {
                what: "vocabulary",
                index: t,
                bound: n,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for i in 0..m {
            let lane = &mut probs[i * n..(i + 1) * n];
            let lse = log_sum_exp(lane);
            total += (lse - lane[targets[i]]).as_f64();
            softmax_slice(lane);
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(T::from_f64_lossy(total / m as f64)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean over rows of `KL(softmax(p) || softmax(q))`.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let (m, n) = self.dims(p);
        if self.shape(p) != self.shape(q) {
            return Err(Error::shape("kl_divergence", self.shape(p), self.shape(q)));
        }
        let mut pp = self.value(p).data().to_vec();
        let mut qq = self.value(q).data().to_vec();
        let mut rows = vec![T::zero(); m];
        for i in 0..m {
            let pl = &mut pp[i * n..(i + 1) * n];
            let ql = &mut qq[i * n..(i + 1) * n];
            let lp = log_sum_exp(pl);
            let lq = log_sum_exp(ql);
            let mut kl = T::zero();
            for j in 0..n {
                let a = pl[j] - lp;
                let b = ql[j] - lq;
                kl += a.exp() * (a - b);
            }
            rows[i] = kl;
            softmax_slice(pl);
            softmax_slice(ql);
        }
        let mean = rows.iter().copied().sum::<T>() / T::from_usize(m).unwrap();
        let rg = self.rg(&[p, q]);
        self.push(
            Tensor::scalar(mean),
            Op::KlRows {
                p,
                q,
                p_probs: pp,
                q_probs: qq,
                kl_rows: rows,
            },
            rg,
        )
    }

    // ---------------------------------------------------------------- backward

    /// Gradients of a scalar `loss` with respect to every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(gout);
                continue;
            }
            self.backprop_node(id, &gout, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) if self.nodes[i].requires_grad => {
                    Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (m, k) = self.dims(*a);
                let n = out.cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |ga| {
                    // dA = dC * op(B)^T
                    T::gemm(m, n, k, g, false, bv, !tb, ga, true);
                });
                self.acc(grads, *b, |gb| {
                    if *tb {
                        // B is n x k: dB = dC^T * A
                        T::gemm(n, m, k, g, true, av, false, gb, true);
                    } else {
                        // B is k x n: dB = A^T * dC
                        T::gemm(k, m, n, av, true, g, false, gb, true);
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow { x, row } => {
                let n = out.cols();
                self.acc(grads, *x, |gx| add_into(gx, g));
                self.acc(grads, *row, |gr| {
                    for (i, &e) in g.iter().enumerate() {
                        gr[i % n] += e;
                    }
                });
            }
            Op::Scale { x, c } => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *c));
            }
            Op::MulScalar { x, s } => {
                let c = self.value(*s).item();
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * c));
                self.acc(grads, *s, |gs| {
                    gs[0] += g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>();
                });
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x).data();
                let yv = out.data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * unary_grad(*kind, xv[i], yv[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (m, n) = rc(out);
                let y = out.data();
                self.acc(grads, *x, |gx| {
                    for_each_lane(m, n, *axis, |idx| {
                        let dot: T = idx.clone().map(|i| g[i] * y[i]).sum();
                        for i in idx {
                            gx[i] += y[i] * (g[i] - dot);
                        }
                    });
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (m, n) = rc(out);
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let nn = T::from_usize(n).unwrap();
                self.acc(grads, *gain, |gg| {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xv[i * n + j] * inv_rms[i];
                        }
                    }
                });
                self.acc(grads, *x, |gx| {
                    for i in 0..m {
                        let r = inv_rms[i];
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += g[i * n + j] * gv[j] * xv[i * n + j] * r;
                        }
                        let mean = dot / nn;
                        for j in 0..n {
                            let xh = xv[i * n + j] * r;
                            gx[i * n + j] += (g[i * n + j] * gv[j] - xh * mean) * r;
                        }
                    }
                });
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, grads);
            }
            Op::GatherRows { x, idx } => {
                let n = out.cols();
                self.acc(grads, *x, |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            gx[src * n + j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = rc(out);
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.acc(grads, p, |gp| {
                        for i in 0..m {
                            for j in 0..c {
                                gp[i * c + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (m, n) = self.dims(*x);
                let (om, on) = rc(out);
                self.acc(grads, *x, |gx| {
                    if *axis == 0 {
                        add_into(&mut gx[start * n..(start + om) * n], g);
                    } else {
                        for i in 0..m {
                            for j in 0..on {
                                gx[i * n + start + j] += g[i * on + j];
                            }
                        }
                    }
                });
            }
            Op::Expand { x, row_rep, col_rep } => {
                let n = self.dims(*x).1;
                let (om, on) = rc(out);
                self.acc(grads, *x, |gx| {
                    for i in 0..om {
                        for j in 0..on {
                            gx[(i / row_rep) * n + j / col_rep] += g[i * on + j];
                        }
                    }
                });
            }
            Op::Tile { x, times } => {
                let len = self.value(*x).len();
                self.acc(grads, *x, |gx| {
                    for t in 0..*times {
                        add_into(gx, &g[t * len..(t + 1) * len]);
                    }
                });
            }
            Op::SumAll(x) => {
                let s = g[0];
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|e| *e += s));
            }
            Op::SumAxis { x, axis } => {
                let (m, n) = self.dims(*x);
                self.acc(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += if *axis == 0 { g[j] } else { g[i] };
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (m, n) = self.dims(*logits);
                let s = g[0] / T::from_usize(m).unwrap();
                self.acc(grads, *logits, |gl| {
                    for i in 0..m {
                        for j in 0..n {
                            let onehot = if targets[i] == j { T::one() } else { T::zero() };
                            gl[i * n + j] += s * (probs[i * n + j] - onehot);
                        }
                    }
                });
            }
            Op::KlRows { p, q, p_probs, q_probs, kl_rows } => {
                let (m, n) = self.dims(*p);
                let s = g[0] / T::from_usize(m).unwrap();
                self.acc(grads, *q, |gq| {
                    for i in 0..m * n {
                        gq[i] += s * (q_probs[i] - p_probs[i]);
                    }
                });
                self.acc(grads, *p, |gp| {
                    for i in 0..m {
                        for j in 0..n {
                            let ix = i * n + j;
                            let pi = p_probs[ix];
                            if pi > T::zero() {
                                let lr = pi.ln() - q_probs[ix].max(T::min_positive_value()).ln();
                                gp[ix] += s * pi * (lr - kl_rows[i]);
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qr, qc) = self.dims(q);
        let (kr, _) = self.dims(k);
        let vc = self.dims(v).1;
        let (gn, h) = (spec.groups, spec.heads);
        let (m, n) = (qr / gn, kr / gn);
        let (dk, dv) = (qc / h, vc / h);
        let scale = T::from_f64_lossy(spec.scale);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); qr * qc];
        let mut dkk = vec![T::zero(); kr * qc];
        let mut dvv = vec![T::zero(); kr * vc];
        let mut qb = vec![T::zero(); m * dk];
        let mut kb = vec![T::zero(); n * dk];
        let mut vb = vec![T::zero(); n * dv];
        let mut gb = vec![T::zero(); m * dv];
        let mut dp = vec![T::zero(); m * n];
        let mut tq = vec![T::zero(); m * dk];
        let mut tk = vec![T::zero(); n * dk];
        let mut tv = vec![T::zero(); n * dv];
        for gi in 0..gn {
            for hi in 0..h {
                let p = &probs[(gi * h + hi) * m * n..(gi * h + hi + 1) * m * n];
                copy_block(qd, qc, gi * m, hi * dk, m, dk, &mut qb);
                copy_block(kd, qc, gi * n, hi * dk, n, dk, &mut kb);
                copy_block(vd, vc, gi * n, hi * dv, n, dv, &mut vb);
                copy_block(g, vc, gi * m, hi * dv, m, dv, &mut gb);
                // dV = P^T dO
                T::gemm(n, m, dv, p, true, &gb, false, &mut tv, false);
                paste_block(&mut dvv, vc, gi * n, hi * dv, n, dv, &tv);
                // dP = dO V^T, then softmax backward and scale
                T::gemm(m, dv, n, &gb, false, &vb, true, &mut dp, false);
                for i in 0..m {
                    let pr = &p[i * n..(i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                T::gemm(m, n, dk, &dp, false, &kb, false, &mut tq, false);
                paste_block(&mut dq, qc, gi * m, hi * dk, m, dk, &tq);
                T::gemm(n, m, dk, &dp, true, &qb, false, &mut tk, false);
                paste_block(&mut dkk, qc, gi * n, hi * dk, n, dk, &tk);
            }
        }
        self.acc(grads, q, |gq| add_into(gq, &dq));
        self.acc(grads, k, |gk| add_into(gk, &dkk));
        self.acc(grads, v, |gv| add_into(gv, &dvv));
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow { .. } => "add_row",
        Op::Scale { .. } => "scale",
        Op::MulScalar { .. } => "mul_scalar",
        Op::Unary { .. } => "unary",
        Op::Softmax { .. } => "softmax",
        Op::RmsNorm { .. } => "rms_norm",
        Op::Attention { .. } => "attention",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::Narrow { .. } => "narrow",
        Op::Expand { .. } => "expand",
        Op::Tile { .. } => "tile_rows",
        Op::SumAll(_) => "sum",
        Op::SumAxis { .. } => "sum_axis",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::KlRows { .. } => "kl_divergence",
    }
}

fn unary_fwd<T: Scalar>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
        Unary::Sigmoid => sigmoid(x),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::LogSigmoid => log_sigmoid(x),
    }
}

fn unary_grad<T: Scalar>(kind: Unary, x: T, y: T) -> T {
    match kind {
        // subgradient at 0 is 0
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Exp => y,
        Unary::Log => T::one() / x,
        Unary::LogSigmoid => sigmoid(-x),
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    // log sigma(x) = -softplus(-x)
    if x >= T::zero() {
        -((-x).exp().ln_1p())
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
    mx + xs.iter().map(|&x| (x - mx).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_slice<T: Scalar>(xs: &mut [T]) {
    let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

fn softmax_lane<T: Scalar>(buf: &mut [T], idx: std::iter::StepBy<std::ops::Range<usize>>) {
    let idx: Vec<usize> = idx.collect();
    let mx = idx.iter().map(|&i| buf[i]).fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for &i in &idx {
        buf[i] = (buf[i] - mx).exp();
        s += buf[i];
    }
    for &i in &idx {
        buf[i] /= s;
    }
}

fn normalize_axis<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<usize> {
    match (t.rank(), axis) {
        (1, 0) => Ok(1),
        (2, 0) | (2, 1) => Ok(axis),
        _ => Err(Error::OutOfRange {
            what: "axis",
            index: axis,
            bound: t.rank(),
        }),
    }
}

fn for_each_lane(
    m: usize,
    n: usize,
    axis: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    if axis == 1 {
        for i in 0..m {
            f((i * n..(i + 1) * n).step_by(1));
        }
    } else {
        for j in 0..n {
            f((j..m * n).step_by(n));
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

fn copy_block<T: Scalar>(src: &[T], stride: usize, r0: usize, c0: usize, rows: usize, cols: usize, dst: &mut [T]) {
    for i in 0..rows {
        let s = (r0 + i) * stride + c0;
        dst[i * cols..(i + 1) * cols].copy_from_slice(&src[s..s + cols]);
    }
}

fn paste_block<T: Scalar>(dst: &mut [T], stride: usize, r0: usize, c0: usize, rows: usize, cols: usize, src: &[T]) {
    for i in 0..rows {
        let d = (r0 + i) * stride + c0;
        dst[d..d + cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
    }
}
