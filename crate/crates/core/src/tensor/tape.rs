use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{numel, ParamId, ParamStore, Real, Result, Tensor, TensorError};
use crate::rng::Rng;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Masking applied to attention scores before the softmax.
#[derive(Debug, Clone, Default)]
pub struct AttentionMask {
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
    /// Flattened `[batch, keys]`; `true` marks a key that must be ignored.
    pub key_padding: Option<Vec<bool>>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Embedding { table: Var, ids: Vec<usize> },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, probs: Vec<T>, count: usize },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Execution record for one forward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Add every parameter leaf's gradient into the matching store entry.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParamStore<T>) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, self.grads[i].as_ref()) {
                for (dst, &src) in store.get_mut(pid).grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> TensorError {
    TensorError::ShapeMismatch { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}

fn invalid(op: &'static str, reason: impl Into<alloc::string::String>) -> TensorError {
    TensorError::InvalidArgument { op, reason: reason.into() }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat output index, the flat index into an operand broadcast to
/// `out`.
fn broadcast_index(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let total = numel(out);
    if operand == out {
        return (0..total).collect();
    }
    let n = out.len();
    let op_strides = strides(operand);
    // effective stride per output axis, zero where the operand is broadcast
    let mut eff = vec![0usize; n];
    for i in 0..operand.len() {
        let axis = n - operand.len() + i;
        if operand[i] != 1 {
            eff[axis] = op_strides[i];
        }
    }
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for axis in (0..n).rev() {
            counter[axis] += 1;
            cur += eff[axis];
            if counter[axis] < out[axis] {
                break;
            }
            cur -= eff[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    idx
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, local: Vec<T>) {
    match slot {
        Some(g) => {
            for (d, s) in g.iter_mut().zip(local) {
                *d += s;
            }
        }
        None => *slot = Some(local),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy a stored parameter onto the tape as a gradient-tracking leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.leaf(store.get(id).value.clone(), true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(mismatch("matmul", &[sa, sb]));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(sa) / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::ZERO; m * n];
        if m > 0 && n > 0 && k > 0 {
            let (ad, bd) = (self.data(a), self.data(b));
            unsafe {
                T::gemm(
                    m, k, n, T::ONE, ad.as_ptr(), k as isize, 1, bd.as_ptr(), n as isize, 1, T::ZERO,
                    out.as_mut_ptr(), n as isize, 1,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (da, db) = (self.data(a), self.data(b));
        if sa == sb {
            let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor { shape: sa.to_vec(), data });
        }
        let out = broadcast_shape(sa, sb).ok_or_else(|| mismatch(name, &[sa, sb]))?;
        if out == sa && sa.ends_with(sb) && !db.is_empty() {
            let mut data = Vec::with_capacity(da.len());
            for row in da.chunks(db.len()) {
                data.extend(row.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
            return Ok(Tensor { shape: out, data });
        }
        let ia = broadcast_index(sa, &out);
        let ib = broadcast_index(sb, &out);
        let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
        Ok(Tensor { shape: out, data })
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product with NumPy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let x = self.value(a);
        let t = Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| v * s).collect() };
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Rows of `table` (`[vocab, dim]`) selected by `ids`, giving `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(mismatch("embedding", &[st]));
        }
        let (rows, dim) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(invalid("embedding", format!("id {bad} out of range for table with {rows} rows")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor { shape: vec![ids.len(), dim], data: out }, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(a);
        Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| if x > T::ZERO { x } else { T::ZERO });
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.tanh());
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| {
            if x >= T::ZERO {
                T::ONE / (T::ONE + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::ONE + e)
            }
        });
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.data(a).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(out[base + j * inner]);
                }
                let mut sum = T::ZERO;
                for j in 0..len {
                    let e = (out[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x: a, axis }, rg))
    }

    /// Normalise over the last axis, then apply `gamma` and `beta` (both `[dim]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().ok_or_else(|| mismatch("layer_norm", &[&shape]))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(mismatch("layer_norm", &[&shape, self.shape(gamma), self.shape(beta)]));
        }
        let eps = T::from_f64(eps);
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / dim.max(1);
        let mut xhat = vec![T::ZERO; xd.len()];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; xd.len()];
        let inv_d = T::from_f64(1.0 / dim as f64);
        for r in 0..rows {
            let row = &xd[r * dim..(r + 1) * dim];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var = var * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..dim {
                let h = (row[j] - mean) * rs;
                xhat[r * dim + j] = h;
                out[r * dim + j] = h * gd[j] + bd[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Tensor { shape, data: out }, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Inverted dropout; the identity when `training` is false or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        // each 64-bit draw yields two 32-bit uniforms
        let threshold = (rate * 4294967296.0) as u64;
        let mut mask: Vec<T> = Vec::with_capacity(n + 1);
        while mask.len() < n {
            let r = rng.next_u64();
            for half in [r & 0xffff_ffff, r >> 32] {
                mask.push(if half < threshold { T::ZERO } else { keep });
            }
        }
        mask.truncate(n);
        let xv = self.value(x);
        let data = xv.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor { shape: xv.shape.clone(), data };
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for shape {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
                return Err(mismatch("concat", &shapes));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(Tensor { shape, data: out }, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if axis >= src.len() || start > end || end > src[axis] {
            return Err(invalid("slice", format!("range {start}..{end} on axis {axis} of shape {src:?}")));
        }
        let (outer, len, inner) = split_axis(&src, axis);
        let mut shape = src.clone();
        shape[axis] = end - start;
        let d = self.data(x);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&d[base + start * inner..base + end * inner]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Slice { x, axis, start }, rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        let mut seen = vec![false; src.len()];
        let valid = perm.len() == src.len() && perm.iter().all(|&p| p < src.len() && !core::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(invalid("transpose", format!("permutation {perm:?} for shape {src:?}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let map = permute_index(&src, perm);
        let d = self.data(x);
        let out = map.iter().map(|&i| d[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Transpose { x, perm: perm.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch, tq, dim]`, `k` and `v` are `[batch, tk, dim]`; `dim` is
    /// split into `heads` contiguous slices. Masked scores are set to negative
    /// infinity; a query with every key masked attends to nothing and yields
    /// zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttentionMask) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(mismatch("attention", &[sq, sk, sv]));
        }
        let (batch, tq, dim) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        if heads == 0 || dim % heads != 0 {
            return Err(invalid("attention", format!("dim {dim} not divisible by {heads} heads")));
        }
        if mask.causal && tq != tk {
            return Err(invalid("attention", format!("causal mask needs square scores, got {tq}x{tk}")));
        }
        if let Some(p) = &mask.key_padding {
            if p.len() != batch * tk {
                return Err(invalid("attention", format!("key padding has {} entries, expected {}", p.len(), batch * tk)));
            }
        }
        let dk = dim / heads;
        let scale = T::from_f64(1.0 / libm::sqrt(dk as f64));
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::ZERO; batch * heads * tq * tk];
        let mut out = vec![T::ZERO; batch * tq * dim];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * tq * tk..(b * heads + h + 1) * tq * tk];
                unsafe {
                    T::gemm(
                        tq, dk, tk, scale,
                        qd.as_ptr().add(b * tq * dim + h * dk), dim as isize, 1,
                        kd.as_ptr().add(b * tk * dim + h * dk), 1, dim as isize,
                        T::ZERO, p.as_mut_ptr(), tk as isize, 1,
                    );
                }
                for i in 0..tq {
                    let row = &mut p[i * tk..(i + 1) * tk];
                    for (j, s) in row.iter_mut().enumerate() {
                        let padded = mask.key_padding.as_ref().is_some_and(|m| m[b * tk + j]);
                        if padded || (mask.causal && j > i) {
                            *s = T::NEG_INFINITY;
                        }
                    }
                    let mut mx = T::NEG_INFINITY;
                    for &s in row.iter() {
                        mx = mx.max(s);
                    }
                    if mx == T::NEG_INFINITY {
                        row.iter_mut().for_each(|s| *s = T::ZERO);
                        continue;
                    }
                    let mut sum = T::ZERO;
                    for s in row.iter_mut() {
                        *s = (*s - mx).exp();
                        sum += *s;
                    }
                    for s in row.iter_mut() {
                        *s = *s / sum;
                    }
                }
                unsafe {
                    T::gemm(
                        tq, tk, dk, T::ONE,
                        p.as_ptr(), tk as isize, 1,
                        vd.as_ptr().add(b * tk * dim + h * dk), dim as isize, 1,
                        T::ZERO, out.as_mut_ptr().add(b * tq * dim + h * dk), dim as isize, 1,
                    );
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(Tensor { shape: vec![batch, tq, dim], data: out }, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Mean negative log-likelihood over rows of `logits` (`[..., classes]`)
    /// whose target differs from `ignore`. All-ignored input gives zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let shape = self.shape(logits);
        let classes = *shape.last().ok_or_else(|| mismatch("cross_entropy", &[shape]))?;
        let rows = numel(shape) / classes.max(1);
        if rows != targets.len() {
            return Err(invalid("cross_entropy", format!("{rows} rows but {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t >= classes) {
            return Err(invalid("cross_entropy", format!("target {bad} out of range for {classes} classes")));
        }
        let d = self.data(logits);
        let mut probs = vec![T::ZERO; d.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            let row = &d[r * classes..(r + 1) * classes];
            let mut mx = T::NEG_INFINITY;
            for &x in row {
                mx = mx.max(x);
            }
            let mut sum = T::ZERO;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[r * classes + j] = e;
                sum += e;
            }
            for j in 0..classes {
                probs[r * classes + j] = probs[r * classes + j] / sum;
            }
            if t != ignore {
                total += (sum.ln() + mx - row[t]).to_f64();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, probs, count },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::ZERO;
        for &v in self.data(x) {
            s += v;
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let mut s = T::ZERO;
        for &v in self.data(x) {
            s += v;
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s / T::from_f64(n as f64)), Op::Mean(x), rg)
    }

    /// `x W + b` for `x: [..., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(TensorError::NotScalar { shape: shape.to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (input, local) in self.local_grads(node, &g) {
                if self.nodes[input.0].requires_grad {
                    add_into(&mut grads[input.0], local);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let out_shape = node.value.shape();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (k, n) = (sb[0], sb[1]);
                let m = numel(sa) / k.max(1);
                if self.wants(*a) {
                    let mut ga = vec![T::ZERO; m * k];
                    if m * k * n > 0 {
                        unsafe {
                            T::gemm(
                                m, n, k, T::ONE, g.as_ptr(), n as isize, 1, self.data(*b).as_ptr(), 1, n as isize,
                                T::ZERO, ga.as_mut_ptr(), k as isize, 1,
                            );
                        }
                    }
                    res.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::ZERO; k * n];
                    if m * k * n > 0 {
                        unsafe {
                            T::gemm(
                                k, m, n, T::ONE, self.data(*a).as_ptr(), 1, k as isize, g.as_ptr(), n as isize, 1,
                                T::ZERO, gb.as_mut_ptr(), n as isize, 1,
                            );
                        }
                    }
                    res.push((*b, gb));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                let is_mul = matches!(node.op, Op::Mul(..));
                for (target, other, sign) in [(*a, *b, false), (*b, *a, neg)] {
                    if !self.wants(target) {
                        continue;
                    }
                    let ts = self.shape(target);
                    if ts == out_shape && (!is_mul || self.shape(other) == out_shape) {
                        let gt = if is_mul {
                            g.iter().zip(self.data(other)).map(|(&a, &b)| a * b).collect()
                        } else if sign {
                            g.iter().map(|&a| -a).collect()
                        } else {
                            g.to_vec()
                        };
                        res.push((target, gt));
                        continue;
                    }
                    let mut gt = vec![T::ZERO; numel(ts)];
                    if !is_mul && out_shape.ends_with(ts) {
                        for row in g.chunks(gt.len().max(1)) {
                            for (d, &gv) in gt.iter_mut().zip(row) {
                                if sign {
                                    *d -= gv;
                                } else {
                                    *d += gv;
                                }
                            }
                        }
                        res.push((target, gt));
                        continue;
                    }
                    let ti = broadcast_index(ts, out_shape);
                    if is_mul {
                        let od = self.data(other);
                        let oi = broadcast_index(self.shape(other), out_shape);
                        for j in 0..g.len() {
                            gt[ti[j]] += g[j] * od[oi[j]];
                        }
                    } else {
                        for j in 0..g.len() {
                            if sign {
                                gt[ti[j]] -= g[j];
                            } else {
                                gt[ti[j]] += g[j];
                            }
                        }
                    }
                    res.push((target, gt));
                }
            }
            Op::Scale(a, s) => res.push((*a, g.iter().map(|&x| x * *s).collect())),
            Op::Embedding { table, ids } => {
                let st = self.shape(*table);
                let dim = st[1];
                let mut gt = vec![T::ZERO; numel(st)];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        gt[id * dim + j] += g[r * dim + j];
                    }
                }
                res.push((*table, gt));
            }
            Op::Relu(a) => {
                let y = node.value.data();
                res.push((*a, g.iter().zip(y).map(|(&gv, &yv)| if yv > T::ZERO { gv } else { T::ZERO }).collect()));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                res.push((*a, g.iter().zip(y).map(|(&gv, &yv)| gv * (T::ONE - yv * yv)).collect()));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                res.push((*a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::ONE - yv)).collect()));
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let mut gx = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::ZERO;
                        for j in 0..len {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let at = base + j * inner;
                            gx[at] = y[at] * (g[at] - dot);
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let dim = *out_shape.last().unwrap();
                let rows = rstd.len();
                let gd = self.data(*gamma);
                if self.wants(*x) {
                    let mut gx = vec![T::ZERO; g.len()];
                    let inv_d = T::from_f64(1.0 / dim as f64);
                    for r in 0..rows {
                        let mut s1 = T::ZERO;
                        let mut s2 = T::ZERO;
                        for j in 0..dim {
                            let gh = g[r * dim + j] * gd[j];
                            s1 += gh;
                            s2 += gh * xhat[r * dim + j];
                        }
                        for j in 0..dim {
                            let at = r * dim + j;
                            let gh = g[at] * gd[j];
                            gx[at] = rstd[r] * (gh - inv_d * s1 - xhat[at] * inv_d * s2);
                        }
                    }
                    res.push((*x, gx));
                }
                if self.wants(*gamma) {
                    let mut gg = vec![T::ZERO; dim];
                    for (j, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[j % dim] += gv * h;
                    }
                    res.push((*gamma, gg));
                }
                if self.wants(*beta) {
                    let mut gb = vec![T::ZERO; dim];
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % dim] += gv;
                    }
                    res.push((*beta, gb));
                }
            }
            Op::Dropout { x, mask } => res.push((*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect())),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        res.push((v, gv));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let src = self.shape(*x);
                let (outer, len, inner) = split_axis(src, *axis);
                let width = out_shape[*axis] * inner;
                let mut gx = vec![T::ZERO; numel(src)];
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    gx[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                res.push((*x, gx));
            }
            Op::Transpose { x, perm } => {
                let src = self.shape(*x);
                let map = permute_index(src, perm);
                let mut gx = vec![T::ZERO; g.len()];
                for (j, &i) in map.iter().enumerate() {
                    gx[i] = g[j];
                }
                res.push((*x, gx));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Attention { q, k, v, heads, probs } => {
                let (batch, tq, dim) = (out_shape[0], out_shape[1], out_shape[2]);
                let tk = self.shape(*k)[1];
                let dk = dim / heads;
                let scale = T::from_f64(1.0 / libm::sqrt(dk as f64));
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut gq = vec![T::ZERO; qd.len()];
                let mut gk = vec![T::ZERO; kd.len()];
                let mut gv = vec![T::ZERO; vd.len()];
                let mut gp = vec![T::ZERO; tq * tk];
                for b in 0..batch {
                    for h in 0..*heads {
                        let p = &probs[(b * heads + h) * tq * tk..(b * heads + h + 1) * tq * tk];
                        let go = unsafe { g.as_ptr().add(b * tq * dim + h * dk) };
                        unsafe {
                            // dV = P^T dO
                            T::gemm(
                                tk, tq, dk, T::ONE, p.as_ptr(), 1, tk as isize, go, dim as isize, 1, T::ONE,
                                gv.as_mut_ptr().add(b * tk * dim + h * dk), dim as isize, 1,
                            );
                            // dP = dO V^T
                            T::gemm(
                                tq, dk, tk, T::ONE, go, dim as isize, 1, vd.as_ptr().add(b * tk * dim + h * dk), 1,
                                dim as isize, T::ZERO, gp.as_mut_ptr(), tk as isize, 1,
                            );
                        }
                        for i in 0..tq {
                            let (prow, grow) = (&p[i * tk..(i + 1) * tk], &mut gp[i * tk..(i + 1) * tk]);
                            let mut dot = T::ZERO;
                            for j in 0..tk {
                                dot += prow[j] * grow[j];
                            }
                            for j in 0..tk {
                                grow[j] = prow[j] * (grow[j] - dot) * scale;
                            }
                        }
                        unsafe {
                            // dQ = dS K
                            T::gemm(
                                tq, tk, dk, T::ONE, gp.as_ptr(), tk as isize, 1, kd.as_ptr().add(b * tk * dim + h * dk),
                                dim as isize, 1, T::ONE, gq.as_mut_ptr().add(b * tq * dim + h * dk), dim as isize, 1,
                            );
                            // dK = dS^T Q
                            T::gemm(
                                tk, tq, dk, T::ONE, gp.as_ptr(), 1, tk as isize, qd.as_ptr().add(b * tq * dim + h * dk),
                                dim as isize, 1, T::ONE, gk.as_mut_ptr().add(b * tk * dim + h * dk), dim as isize, 1,
                            );
                        }
                    }
                }
                for (var, gr) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.wants(var) {
                        res.push((var, gr));
                    }
                }
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                let mut gl = vec![T::ZERO; probs.len()];
                if *count > 0 {
                    let classes = probs.len() / targets.len().max(1);
                    let s = g[0] / T::from_f64(*count as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for j in 0..classes {
                            let at = r * classes + j;
                            let onehot = if j == t { T::ONE } else { T::ZERO };
                            gl[at] = (probs[at] - onehot) * s;
                        }
                    }
                }
                res.push((*logits, gl));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                res.push((*x, vec![g[0] / T::from_f64(n.max(1) as f64); n]));
            }
        }
        res
    }
}

/// Flat source index for every flat output index of a permuted tensor.
fn permute_index(src: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(src);
    let out_shape: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total = numel(src);
    let n = out_shape.len();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for axis in (0..n).rev() {
            counter[axis] += 1;
            cur += eff[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            cur -= eff[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    map
}
