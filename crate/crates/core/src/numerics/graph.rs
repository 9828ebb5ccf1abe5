//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order. Node ids are therefore a topological order and [`Graph::backward`]
//! visits each node exactly once, newest first. Graphs are single-threaded;
//! independent graphs may be built on different threads.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{bail, Result};

use super::real::{gemm, MatView, Real};
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Row-major `[outer, len, inner]` factorisation around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

fn split_axis(shape: &[usize], axis: usize) -> AxisSplit {
    AxisSplit {
        outer: shape[..axis].iter().product(),
        len: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    Square(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax { x: Var, temperature: T },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Gather { table: Var, idx: Vec<usize> },
    Slice { x: Var, split: AxisSplit, start: usize, len: usize },
    Concat { xs: Vec<Var>, outer: usize, lens: Vec<usize>, inner: usize },
    Reshape(Var),
    Attention(Box<AttentionSaved<T>>),
    TapSum { m: Var, w: Var, batch: usize, steps: usize, taps: usize },
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    n: usize,
    lq: usize,
    lk: usize,
    d: usize,
    probs: Vec<T>,
}

struct Node<T> {
    shape: Vec<usize>,
    value: Rc<Vec<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded operation graph (the tape).
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value: Rc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Leaf node; gradients are tracked when the tensor requires them.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, needs)
    }

    /// Leaf node that always tracks gradients.
    pub fn param(&self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad(true))
    }

    /// Leaf node that never tracks gradients.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn data(&self, v: Var) -> Rc<Vec<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.as_ref().clone()).expect("node shape invariant")
    }

    pub fn item(&self, v: Var) -> Result<T> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        if node.value.len() != 1 {
            bail!(Dimension, "item() on node of shape {:?}", node.shape);
        }
        Ok(node.value[0])
    }

    // ---------------------------------------------------------------- linear

    /// `a[.., k] x b[k, n] -> [.., n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            bail!(Dimension, "matmul of {:?} by {:?}", sa, sb);
        }
        let (k, n) = (sb[0], sb[1]);
        let m = sa.iter().product::<usize>() / k.max(1);
        let (av, bv) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), &av, MatView::dense(0, m, k), &bv, MatView::dense(0, k, n), T::zero(), &mut out, MatView::dense(0, m, n));
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, self.needs(&[a, b])))
    }

    /// Adds a vector over the last axis.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let w = sx.last().copied().unwrap_or(1);
        if sb.len() != 1 || sb[0] != w {
            bail!(Dimension, "bias {:?} does not match last axis of {:?}", sb, sx);
        }
        let bv = self.data(b);
        let mut out = self.data(x).as_ref().clone();
        for row in out.chunks_mut(w) {
            for (o, &bb) in row.iter_mut().zip(bv.iter()) {
                *o += bb;
            }
        }
        Ok(self.push(sx, out, Op::AddBias { x, b }, self.needs(&[x, b])))
    }

    // ----------------------------------------------------------- elementwise

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            bail!(Dimension, "{} of {:?} and {:?}", name, sa, sb);
        }
        let (av, bv) = (self.data(a), self.data(b));
        Ok((sa, av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect()))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(s, v, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(s, v, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(s, v, Op::Mul(a, b), self.needs(&[a, b])))
    }

    fn unary(&self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v: Vec<T> = self.data(x).iter().map(|&a| f(a)).collect();
        self.push(self.shape(x), v, op, self.needs(&[x]))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |a| {
            if a >= T::zero() {
                T::one() / (T::one() + (-a).exp())
            } else {
                let e = a.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |a| a.tanh())
    }

    pub fn leaky_relu(&self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |a| if a > T::zero() { a } else { a * slope })
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        self.push(vec![], vec![s], Op::Sum(x), self.needs(&[x]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let d = self.data(x);
        let s: T = d.iter().copied().sum::<T>() / T::lit(d.len().max(1) as f64);
        self.push(vec![], vec![s], Op::Mean(x), self.needs(&[x]))
    }

    // ----------------------------------------------------------- normalising

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x);
        let d = sx.last().copied().unwrap_or(0);
        if d == 0 {
            bail!(Dimension, "layer_norm over an empty axis");
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            bail!(Dimension, "layer_norm gain/bias must have shape [{}]", d);
        }
        let (xv, gv, bv) = (self.data(x), self.data(gain), self.data(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let dn = T::lit(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mu) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(sx, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, self.needs(&[x, gain, bias])))
    }

    /// Softmax over the last axis of `x / temperature`.
    pub fn softmax(&self, x: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            bail!(Parameter, "softmax temperature must be positive, got {}", temperature);
        }
        let sx = self.shape(x);
        let k = sx.last().copied().unwrap_or(1);
        let xv = self.data(x);
        let mut out = vec![T::zero(); xv.len()];
        for (o, row) in out.chunks_mut(k).zip(xv.chunks(k)) {
            softmax_row(row, temperature, o);
        }
        Ok(self.push(sx, out, Op::Softmax { x, temperature }, self.needs(&[x])))
    }

    /// Mean cross-entropy of `targets` under `softmax(logits)` over the last axis.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        let k = sl.last().copied().unwrap_or(0);
        let lv = self.data(logits);
        let rows = if k == 0 { 0 } else { lv.len() / k };
        if rows != targets.len() || rows == 0 {
            bail!(Dimension, "cross_entropy: {} targets for logits {:?}", targets.len(), sl);
        }
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= k {
                bail!(Index, "target {} outside vocabulary of {}", t, k);
            }
            let row = &lv[r * k..(r + 1) * k];
            let p = &mut probs[r * k..(r + 1) * k];
            softmax_row(row, T::one(), p);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&a| (a - mx).exp()).sum::<T>().ln();
            loss += lse - row[t];
        }
        loss /= T::lit(rows as f64);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            self.needs(&[logits]),
        ))
    }

    // -------------------------------------------------------------- indexing

    /// Rows of `table[V, d]` selected by `idx`, shape `[idx.len(), d]`.
    pub fn gather(&self, table: Var, idx: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            bail!(Dimension, "gather table must be 2-D, got {:?}", st);
        }
        let (rows, d) = (st[0], st[1]);
        let tv = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                bail!(Index, "row {} outside table of {} rows", i, rows);
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![idx.len(), d], out, Op::Gather { table, idx: idx.to_vec() }, self.needs(&[table])))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() || start + len > sx[axis] {
            bail!(Dimension, "slice {}..{} on axis {} of {:?}", start, start + len, axis, sx);
        }
        let split = split_axis(&sx, axis);
        let xv = self.data(x);
        let mut out = Vec::with_capacity(split.outer * len * split.inner);
        for o in 0..split.outer {
            let base = o * split.len * split.inner + start * split.inner;
            out.extend_from_slice(&xv[base..base + len * split.inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Slice { x, split, start, len }, self.needs(&[x])))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            bail!(Dimension, "concat of nothing");
        }
        let first = self.shape(xs[0]);
        if axis >= first.len() {
            bail!(Dimension, "concat axis {} on {:?}", axis, first);
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                bail!(Dimension, "concat of {:?} with {:?} on axis {}", first, s, axis);
            }
            lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let datas: Vec<Rc<Vec<T>>> = xs.iter().map(|&x| self.data(x)).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (dv, &l) in datas.iter().zip(&lens) {
                out.extend_from_slice(&dv[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { xs: xs.to_vec(), outer, lens, inner }, self.needs(xs)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.iter().product::<usize>() != shape.iter().product::<usize>() {
            bail!(Dimension, "cannot reshape {:?} into {:?}", sx, shape);
        }
        let v = self.data(x).as_ref().clone();
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), self.needs(&[x])))
    }

    // ------------------------------------------------------------- composite

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [n, lq, d]`, `k, v: [n, lk, d]`. `mask[i * lk + j]` allows query `i`
    /// to attend key `j`; a query with no allowed key yields a zero row.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            bail!(Dimension, "attention shapes q {:?}, k {:?}, v {:?}", sq, sk, sv);
        }
        let (n, lq, lk, d) = (sq[0], sq[1], sk[1], sq[2]);
        if heads == 0 || d % heads != 0 {
            bail!(Config, "{} heads do not divide model width {}", heads, d);
        }
        if let Some(m) = mask {
            if m.len() != lq * lk {
                bail!(Dimension, "mask has {} entries, expected {}x{}", m.len(), lq, lk);
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::zero(); n * lq * d];
        let mut probs = vec![T::zero(); n * heads * lq * lk];
        for b in 0..n {
            for h in 0..heads {
                let pbase = (b * heads + h) * lq * lk;
                let qview = MatView::block(b * lq * d + h * dh, lq, dh, d);
                let kview = MatView::block(b * lk * d + h * dh, lk, dh, d);
                let pview = MatView::dense(pbase, lq, lk);
                gemm(scale, &qv, qview, &kv, kview.t(), T::zero(), &mut probs, pview);
                for i in 0..lq {
                    let row = &mut probs[pbase + i * lk..pbase + (i + 1) * lk];
                    masked_softmax_in_place(row, mask.map(|m| &m[i * lk..(i + 1) * lk]));
                }
                let vview = MatView::block(b * lk * d + h * dh, lk, dh, d);
                let oview = MatView::block(b * lq * d + h * dh, lq, dh, d);
                gemm(T::one(), &probs, pview, &vv, vview, T::zero(), &mut out, oview);
            }
        }
        let saved = AttentionSaved { q, k, v, heads, n, lq, lk, d, probs };
        Ok(self.push(vec![n, lq, d], out, Op::Attention(Box::new(saved)), self.needs(&[q, k, v])))
    }

    /// Tap-weighted sum along a diagonal: `y[b, t] = sum_j w[j] * m[b, t + j - taps/2, j]`,
    /// with out-of-range rows contributing zero.
    pub fn tap_sum(&self, m: Var, w: Var) -> Result<Var> {
        let (sm, sw) = (self.shape(m), self.shape(w));
        if sm.len() < 2 || sw.len() != 1 || *sm.last().unwrap() != sw[0] {
            bail!(Dimension, "tap_sum of {:?} with weights {:?}", sm, sw);
        }
        let taps = sw[0];
        let steps = sm[sm.len() - 2];
        let batch: usize = sm[..sm.len() - 2].iter().product();
        let (mv, wv) = (self.data(m), self.data(w));
        let half = (taps / 2) as isize;
        let mut out = vec![T::zero(); batch * steps];
        for b in 0..batch {
            for t in 0..steps {
                let mut acc = T::zero();
                for (j, &wj) in wv.iter().enumerate() {
                    let s = t as isize + j as isize - half;
                    if s >= 0 && (s as usize) < steps {
                        acc += wj * mv[(b * steps + s as usize) * taps + j];
                    }
                }
                out[b * steps + t] = acc;
            }
        }
        let shape = sm[..sm.len() - 1].to_vec();
        Ok(self.push(shape, out, Op::TapSum { m, w, batch, steps, taps }, self.needs(&[m, w])))
    }

    // -------------------------------------------------------------- backward

    /// Back-propagates from a scalar node; gradients of every node that needs
    /// them become available through [`Graph::grad`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            bail!(Dimension, "backward from non-scalar node of shape {:?}", nodes[loss.0].shape);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let gy = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            backprop(&nodes, node, &gy, &mut grads);
        }
        drop(nodes);
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("gradient shape invariant"))
    }
}

fn softmax_row<T: Real>(row: &[T], temperature: T, out: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &a) in out.iter_mut().zip(row) {
        *o = ((a - mx) / temperature).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn masked_softmax_in_place<T: Real>(row: &mut [T], mask: Option<&[bool]>) {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut mx = T::neg_infinity();
    for (j, &a) in row.iter().enumerate() {
        if allowed(j) && a > mx {
            mx = a;
        }
    }
    if mx == T::neg_infinity() {
        row.iter_mut().for_each(|a| *a = T::zero());
        return;
    }
    let mut z = T::zero();
    for (j, a) in row.iter_mut().enumerate() {
        *a = if allowed(j) { (*a - mx).exp() } else { T::zero() };
        z += *a;
    }
    row.iter_mut().for_each(|a| *a /= z);
}

fn accumulate<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let bv = nodes[b.0].value.clone();
            let av = nodes[a.0].value.clone();
            if let Some(ga) = accumulate(nodes, grads, *a) {
                gemm(T::one(), gy, MatView::dense(0, m, n), &bv, MatView::dense(0, k, n).t(), T::one(), ga, MatView::dense(0, m, k));
            }
            if let Some(gb) = accumulate(nodes, grads, *b) {
                gemm(T::one(), &av, MatView::dense(0, m, k).t(), gy, MatView::dense(0, m, n), T::one(), gb, MatView::dense(0, k, n));
            }
        }
        Op::AddBias { x, b } => {
            if let Some(gx) = accumulate(nodes, grads, *x) {
                gx.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
            }
            if let Some(gb) = accumulate(nodes, grads, *b) {
                let w = gb.len();
                for row in gy.chunks(w) {
                    gb.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(g) = accumulate(nodes, grads, v) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(g) = accumulate(nodes, grads, *a) {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
            }
            if let Some(g) = accumulate(nodes, grads, *b) {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
            if let Some(g) = accumulate(nodes, grads, *a) {
                for i in 0..g.len() {
                    g[i] += gy[i] * bv[i];
                }
            }
            if let Some(g) = accumulate(nodes, grads, *b) {
                for i in 0..g.len() {
                    g[i] += gy[i] * av[i];
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(g) = accumulate(nodes, grads, *x) {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *c);
            }
        }
        Op::Sigmoid(x) => {
            if let Some(g) = accumulate(nodes, grads, *x) {
                for i in 0..g.len() {
                    g[i] += gy[i] * y[i] * (T::one() - y[i]);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(g) = accumulate(nodes, grads, *x) {
                for i in 0..g.len() {
                    g[i] += gy[i] * (T::one() - y[i] * y[i]);
                }
            }
        }
        Op::LeakyRelu(x, slope) => {
            let xv = nodes[x.0].value.clone();
            if let Some(g) = accumulate(nodes, grads, *x) {
                for i in 0..g.len() {
                    g[i] += if xv[i] > T::zero() { gy[i] } else { gy[i] * *slope };
                }
            }
        }
        Op::Square(x) => {
            let xv = nodes[x.0].value.clone();
            if let Some(g) = accumulate(nodes, grads, *x) {
                for i in 0..g.len() {
                    g[i] += gy[i] * T::lit(2.0) * xv[i];
                }
            }
        }
        Op::Sum(x) => {
            if let Some(g) = accumulate(nodes, grads, *x) {
                g.iter_mut().for_each(|g| *g += gy[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(g) = accumulate(nodes, grads, *x) {
                let s = gy[0] / T::lit(g.len().max(1) as f64);
                g.iter_mut().for_each(|g| *g += s);
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let gv = nodes[gain.0].value.clone();
            let d = gv.len();
            if let Some(gg) = accumulate(nodes, grads, *gain) {
                for (row_g, row_h) in gy.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += row_g[j] * row_h[j];
                    }
                }
            }
            if let Some(gb) = accumulate(nodes, grads, *bias) {
                for row_g in gy.chunks(d) {
                    gb.iter_mut().zip(row_g).for_each(|(g, &dd)| *g += dd);
                }
            }
            if let Some(gx) = accumulate(nodes, grads, *x) {
                let dn = T::lit(d as f64);
                let mut dxhat = vec![T::zero(); d];
                for (r, inv) in inv_std.iter().enumerate() {
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for j in 0..d {
                        dxhat[j] = gy[r * d + j] * gv[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[r * d + j];
                    }
                    for j in 0..d {
                        gx[r * d + j] += *inv / dn * (dn * dxhat[j] - s1 - xhat[r * d + j] * s2);
                    }
                }
            }
        }
        Op::Softmax { x, temperature } => {
            if let Some(gx) = accumulate(nodes, grads, *x) {
                let k = node.shape.last().copied().unwrap_or(1);
                for ((g, yr), dy) in gx.chunks_mut(k).zip(y.chunks(k)).zip(gy.chunks(k)) {
                    let dot: T = yr.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        g[j] += yr[j] * (dy[j] - dot) / *temperature;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if let Some(g) = accumulate(nodes, grads, *logits) {
                let rows = targets.len();
                let k = probs.len() / rows;
                let s = gy[0] / T::lit(rows as f64);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let one = if j == t { T::one() } else { T::zero() };
                        g[r * k + j] += s * (probs[r * k + j] - one);
                    }
                }
            }
        }
        Op::Gather { table, idx } => {
            if let Some(g) = accumulate(nodes, grads, *table) {
                let d = node.shape[1];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        g[i * d + j] += gy[r * d + j];
                    }
                }
            }
        }
        Op::Slice { x, split, start, len } => {
            if let Some(g) = accumulate(nodes, grads, *x) {
                let chunk = len * split.inner;
                for o in 0..split.outer {
                    let base = o * split.len * split.inner + start * split.inner;
                    g[base..base + chunk].iter_mut().zip(&gy[o * chunk..(o + 1) * chunk]).for_each(|(g, &d)| *g += d);
                }
            }
        }
        Op::Concat { xs, outer, lens, inner } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&x, &l) in xs.iter().zip(lens) {
                if let Some(g) = accumulate(nodes, grads, x) {
                    for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * l * inner;
                        g[dst..dst + l * inner].iter_mut().zip(&gy[src..src + l * inner]).for_each(|(g, &d)| *g += d);
                    }
                }
                offset += l;
            }
        }
        Op::Reshape(x) => {
            if let Some(g) = accumulate(nodes, grads, *x) {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
            }
        }
        Op::Attention(s) => attention_backward(nodes, s, gy, grads),
        Op::TapSum { m, w, batch, steps, taps } => {
            let (batch, steps, taps) = (*batch, *steps, *taps);
            let half = (taps / 2) as isize;
            let (mv, wv) = (nodes[m.0].value.clone(), nodes[w.0].value.clone());
            if let Some(gm) = accumulate(nodes, grads, *m) {
                for b in 0..batch {
                    for t in 0..steps {
                        let d = gy[b * steps + t];
                        for j in 0..taps {
                            let s = t as isize + j as isize - half;
                            if s >= 0 && (s as usize) < steps {
                                gm[(b * steps + s as usize) * taps + j] += wv[j] * d;
                            }
                        }
                    }
                }
            }
            if let Some(gw) = accumulate(nodes, grads, *w) {
                for b in 0..batch {
                    for t in 0..steps {
                        let d = gy[b * steps + t];
                        for (j, g) in gw.iter_mut().enumerate() {
                            let s = t as isize + j as isize - half;
                            if s >= 0 && (s as usize) < steps {
                                *g += mv[(b * steps + s as usize) * taps + j] * d;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn attention_backward<T: Real>(nodes: &[Node<T>], s: &AttentionSaved<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
    let AttentionSaved { q, k, v, heads, n, lq, lk, d, probs } = s;
    let (heads, n, lq, lk, d) = (*heads, *n, *lq, *lk, *d);
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (qv, kv, vv) = (nodes[q.0].value.clone(), nodes[k.0].value.clone(), nodes[v.0].value.clone());
    let (need_q, need_k, need_v) = (nodes[q.0].needs_grad, nodes[k.0].needs_grad, nodes[v.0].needs_grad);
    let mut gq = if need_q { vec![T::zero(); qv.len()] } else { Vec::new() };
    let mut gk = if need_k { vec![T::zero(); kv.len()] } else { Vec::new() };
    let mut gv = if need_v { vec![T::zero(); vv.len()] } else { Vec::new() };
    let mut dp = vec![T::zero(); lq * lk];
    for b in 0..n {
        for h in 0..heads {
            let pbase = (b * heads + h) * lq * lk;
            let pview = MatView::dense(pbase, lq, lk);
            let oview = MatView::block(b * lq * d + h * dh, lq, dh, d);
            let qview = MatView::block(b * lq * d + h * dh, lq, dh, d);
            let kview = MatView::block(b * lk * d + h * dh, lk, dh, d);
            let vview = kview;
            if need_v {
                gemm(T::one(), probs, pview.t(), gy, oview, T::one(), &mut gv, vview);
            }
            if !(need_q || need_k) {
                continue;
            }
            gemm(T::one(), gy, oview, &vv, vview.t(), T::zero(), &mut dp, MatView::dense(0, lq, lk));
            for i in 0..lq {
                let p = &probs[pbase + i * lk..pbase + (i + 1) * lk];
                let row = &mut dp[i * lk..(i + 1) * lk];
                let dot: T = p.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..lk {
                    row[j] = p[j] * (row[j] - dot) * scale;
                }
            }
            let dsv = MatView::dense(0, lq, lk);
            if need_q {
                gemm(T::one(), &dp, dsv, &kv, kview, T::one(), &mut gq, qview);
            }
            if need_k {
                gemm(T::one(), &dp, dsv.t(), &qv, qview, T::one(), &mut gk, kview);
            }
        }
    }
    for (var, local) in [(*q, gq), (*k, gk), (*v, gv)] {
        if let Some(g) = accumulate(nodes, grads, var) {
            g.iter_mut().zip(&local).for_each(|(g, &d)| *g += d);
        }
    }
}
