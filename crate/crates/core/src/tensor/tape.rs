use std::collections::HashMap;

use super::kernels::{self, dot};
use super::{Element, Tensor, TensorId};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// right operand has the extent of the trailing axis
    Row,
    /// right operand is a single value
    Scalar,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    /// elementwise product with a fixed 0/1 selection
    Select(Var, Vec<bool>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_keep: Option<Vec<bool>>,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order since every op's parents already exist.
#[derive(Debug, Default)]
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<TensorId, Var>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / cols, cols)
}

fn gelu_parts<T: Element>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let one = T::one();
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (one + t);
    let dinner = c * (one + three * k * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * dinner;
    (value, deriv)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape shapes are consistent")
    }

    /// Records a tensor as a leaf. Tensors flagged `requires_grad` are
    /// tracked so their gradients can be read back by id after backward.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        if t.requires_grad() {
            if let Some(&v) = self.params.get(&t.id()) {
                return v;
            }
            let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
            self.params.insert(t.id(), v);
            v
        } else {
            self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
        }
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(Error::dim(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    // ----- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul {sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul_fwd(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `x[n×k] · w[m×k]ᵀ (+ bias[m])`, with `x` viewed as rows over its last axis.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let sx = self.shape(x).to_vec();
        let (n, k) = rows_cols(&sx);
        if sw.len() != 2 || sw[1] != k {
            return Err(Error::dim(format!(
                "linear: input {sx:?} with weight {sw:?}"
            )));
        }
        let m = sw[0];
        if let Some(b) = bias {
            if self.value(b).len() != m {
                return Err(Error::dim(format!(
                    "linear: bias {:?} for {m} outputs",
                    self.shape(b)
                )));
            }
        }
        let mut out = kernels::linear_fwd(self.value(x), self.value(w), n, k, m);
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(m) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o = *o + bb);
            }
        }
        let ng = self.ng(x) || self.ng(w) || bias.is_some_and(|b| self.ng(b));
        let mut shape = sx;
        *shape.last_mut().unwrap() = m;
        Ok(self.push(shape, out, Op::Linear { x, w, bias }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose needs a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != self.value(a).len() {
            return Err(Error::dim(format!(
                "reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let v = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, v, Op::Reshape(a), ng))
    }

    // ----- elementwise ----------------------------------------------------

    fn broadcast_kind(&self, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(b).len() == 1 {
            Ok(Broadcast::Scalar)
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Ok(Broadcast::Row)
        } else {
            Err(Error::dim(format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<T>, Broadcast)> {
        let kind = self.broadcast_kind(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = match kind {
            Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => va.iter().map(|&x| f(x, vb[0])).collect(),
            Broadcast::Row => {
                let c = vb.len();
                va.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, vb[i % c]))
                    .collect()
            }
        };
        Ok((out, kind))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, kind) = self.binary(a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b, kind), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, kind) = self.binary(a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b, kind), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, kind) = self.binary(a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b, kind), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), ng)
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu_parts(x).0).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), ng)
    }

    /// Zeroes every element whose `keep` flag is false. The selection is
    /// treated as a constant by backward.
    pub fn select(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        if keep.len() != self.value(a).len() {
            return Err(Error::dim("select: mask length differs from input"));
        }
        let out = self
            .value(a)
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x } else { T::zero() })
            .collect();
        let ng = self.ng(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Select(a, keep), ng))
    }

    // ----- transformer building blocks -----------------------------------

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(x));
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim(
                "layer_norm: affine parameters differ from width",
            ));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); n * d];
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Multi-head causal self-attention over `[batch·seq × d]` projections.
    /// Heads whose `head_keep` flag is false produce zeros.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_keep: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(q));
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::dim("attention: q, k, v shapes differ"));
        }
        if n != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!(
                "attention: {n} rows, batch {batch}, seq {seq}, width {d}, heads {heads}"
            )));
        }
        if head_keep.as_ref().is_some_and(|h| h.len() != heads) {
            return Err(Error::dim("attention: head mask length"));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); n * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                if head_keep.as_ref().is_some_and(|keep| !keep[h]) {
                    continue;
                }
                let off = h * dh;
                for t in 0..seq {
                    let qt = &qv[(b * seq + t) * d + off..(b * seq + t) * d + off + dh];
                    let mut max = T::neg_infinity();
                    for s in 0..=t {
                        let ks = &kv[(b * seq + s) * d + off..(b * seq + s) * d + off + dh];
                        scores[s] = dot(qt, ks) * scale;
                        max = max.max(scores[s]);
                    }
                    let mut z = T::zero();
                    for sc in scores.iter_mut().take(t + 1) {
                        *sc = (*sc - max).exp();
                        z = z + *sc;
                    }
                    let prow = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                    let orow = &mut out[(b * seq + t) * d + off..(b * seq + t) * d + off + dh];
                    for s in 0..=t {
                        let p = scores[s] / z;
                        prow[s] = p;
                        let vs = &vv[(b * seq + s) * d + off..(b * seq + s) * d + off + dh];
                        kernels::axpy(orow, p, vs);
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let shape = self.shape(q).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                head_keep,
                probs,
            },
            ng,
        ))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(table));
        if ids.is_empty() {
            return Err(Error::dim("embedding: no ids"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!("token id {id} ≥ table size {rows}")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(x));
        if rows.is_empty() {
            return Err(Error::dim("gather_rows: no rows"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index(format!("row {r} ≥ {n}")));
            }
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            vec![rows.len(), d],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Row-wise softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (n, c) = rows_cols(self.shape(a));
        let av = self.value(a);
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let row = &av[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                z = z + e;
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|o| *o = *o / z);
        }
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), ng)
    }

    // ----- losses and reductions ----------------------------------------

    /// Mean over rows of `−log softmax(logits)[target]`, max-stabilized.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = rows_cols(self.shape(logits));
        if targets.len() != n {
            return Err(Error::dim(format!(
                "cross entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target {t} ≥ vocabulary {c}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                z = z + e;
            }
            probs[i * c..(i + 1) * c]
                .iter_mut()
                .for_each(|p| *p = *p / z);
            total = total + (z.ln() + max - row[targets[i]]);
        }
        let loss = total / T::from_f64(n as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "mse: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let s: T = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let out = s / T::from_f64(va.len() as f64);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![1], vec![out], Op::Mse(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Mean(a), ng)
    }

    // ----- introspection ------------------------------------------------

    /// Fingerprint of every piecewise-constant decision on the tape: the
    /// sign pattern at each relu input and each selection mask. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => sig.extend(self.value(*a).iter().map(|&x| x > T::zero())),
                Op::Select(_, keep) => sig.extend_from_slice(keep),
                _ => {}
            }
        }
        sig
    }

    // ----- backward -----------------------------------------------------

    /// Reverse sweep from a scalar root. Gradients accumulate additively
    /// across fan-out; each node is visited once.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract("backward root is not on this tape".into()));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = self.acc(grads, *a) {
                    kernels::matmul_bwd_a(da, g, self.value(*b), m, k, n);
                }
                if let Some(db) = self.acc(grads, *b) {
                    kernels::matmul_bwd_b(db, g, self.value(*a), m, k, n);
                }
            }
            Op::Linear { x, w, bias } => {
                let (n, k) = rows_cols(self.shape(*x));
                let m = self.shape(*w)[0];
                if let Some(dx) = self.acc(grads, *x) {
                    kernels::linear_bwd_x(dx, g, self.value(*w), n, k, m);
                }
                if let Some(dw) = self.acc(grads, *w) {
                    kernels::linear_bwd_w(dw, g, self.value(*x), n, k, m);
                }
                if let Some(b) = bias {
                    if let Some(db) = self.acc(grads, *b) {
                        for row in g.chunks_exact(m) {
                            db.iter_mut().zip(row).for_each(|(d, &r)| *d = *d + r);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = da[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
                if let Some(db) = self.acc(grads, *b) {
                    reduce_broadcast(db, g, *kind, |x, _| sign * x);
                }
            }
            Op::Mul(a, b, kind) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(da) = self.acc(grads, *a) {
                    let c = vb.len();
                    for (idx, d) in da.iter_mut().enumerate() {
                        let y = match kind {
                            Broadcast::Same => vb[idx],
                            Broadcast::Scalar => vb[0],
                            Broadcast::Row => vb[idx % c],
                        };
                        *d = *d + g[idx] * y;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    reduce_broadcast(db, g, *kind, |x, idx| x * va[idx]);
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *s);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &x), &gg) in da.iter_mut().zip(va).zip(g) {
                        if x > T::zero() {
                            *d = *d + gg;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &x), &gg) in da.iter_mut().zip(va).zip(g) {
                        *d = *d + gg * gelu_parts(x).1;
                    }
                }
            }
            Op::Tanh(a) => {
                let out = &node.value;
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &y), &gg) in da.iter_mut().zip(out).zip(g) {
                        *d = *d + gg * (T::one() - y * y);
                    }
                }
            }
            Op::Select(a, keep) => {
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &k), &gg) in da.iter_mut().zip(keep).zip(g) {
                        if k {
                            *d = *d + gg;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = rows_cols(self.shape(*x));
                let gv = self.value(*gamma);
                if let Some(dg) = self.acc(grads, *gamma) {
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] = dg[j] + g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for i in 0..n {
                        for j in 0..d {
                            db[j] = db[j] + g[i * d + j];
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let dn = T::from_f64(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for i in 0..n {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..d {
                            let v = g[i * d + j] * gv[j];
                            dxhat[j] = v;
                            mean_d = mean_d + v;
                            mean_dx = mean_dx + v * xhat[i * d + j];
                        }
                        mean_d = mean_d / dn;
                        mean_dx = mean_dx / dn;
                        for j in 0..d {
                            let t = dxhat[j] - mean_d - xhat[i * d + j] * mean_dx;
                            dx[i * d + j] = dx[i * d + j] + rstd[i] * t;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                head_keep,
                probs,
            } => {
                self.attention_backward(
                    g, *q, *k, *v, *batch, *seq, *heads, head_keep, probs, grads,
                );
            }
            Op::Embedding { table, ids } => {
                let d = *self.shape(*table).last().unwrap();
                if let Some(dt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(
                            &mut dt[id * d..(id + 1) * d],
                            T::one(),
                            &g[r * d..(r + 1) * d],
                        );
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let d = *self.shape(*x).last().unwrap();
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, &src) in rows.iter().enumerate() {
                        kernels::axpy(
                            &mut dx[src * d..(src + 1) * d],
                            T::one(),
                            &g[r * d..(r + 1) * d],
                        );
                    }
                }
            }
            Op::Softmax(a) => {
                let (n, c) = rows_cols(&node.shape);
                let y = &node.value;
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..n {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let inner = dot(yr, gr);
                        for j in 0..c {
                            da[i * c + j] = da[i * c + j] + yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (n, c) = rows_cols(self.shape(*logits));
                let scale = g[0] / T::from_f64(n as f64);
                if let Some(dl) = self.acc(grads, *logits) {
                    for i in 0..n {
                        for j in 0..c {
                            let mut p = probs[i * c + j];
                            if j == targets[i] {
                                p = p - T::one();
                            }
                            dl[i * c + j] = dl[i * c + j] + scale * p;
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let scale = T::from_f64(2.0) * g[0] / T::from_f64(va.len() as f64);
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &x), &y) in da.iter_mut().zip(va).zip(vb) {
                        *d = *d + scale * (x - y);
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, &x), &y) in db.iter_mut().zip(va).zip(vb) {
                        *d = *d - scale * (x - y);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(a) => {
                let n = T::from_f64(self.value(*a).len() as f64);
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().for_each(|d| *d = *d + g[0] / n);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_keep: &Option<Vec<bool>>,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = *self.shape(q).last().unwrap();
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let n = batch * seq * d;
        let mut dq = vec![T::zero(); n];
        let mut dk = vec![T::zero(); n];
        let mut dv = vec![T::zero(); n];
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                if head_keep.as_ref().is_some_and(|keep| !keep[h]) {
                    continue;
                }
                let off = h * dh;
                let row = |t: usize| (b * seq + t) * d + off;
                for t in 0..seq {
                    let prow = &probs[((b * heads + h) * seq + t) * seq..][..seq];
                    let gt = &g[row(t)..row(t) + dh];
                    let mut inner = T::zero();
                    for s in 0..=t {
                        dp[s] = dot(gt, &vv[row(s)..row(s) + dh]);
                        inner = inner + prow[s] * dp[s];
                        kernels::axpy(&mut dv[row(s)..row(s) + dh], prow[s], gt);
                    }
                    for s in 0..=t {
                        let ds = prow[s] * (dp[s] - inner) * scale;
                        if ds != T::zero() {
                            kernels::axpy(
                                &mut dq[row(t)..row(t) + dh],
                                ds,
                                &kv[row(s)..row(s) + dh],
                            );
                            kernels::axpy(
                                &mut dk[row(s)..row(s) + dh],
                                ds,
                                &qv[row(t)..row(t) + dh],
                            );
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(acc) = self.acc(grads, var) {
                acc.iter_mut().zip(&local).for_each(|(a, &x)| *a = *a + x);
            }
        }
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a tracked tensor after backward.
    pub fn grad_of(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.params.get(&t.id()).and_then(|&v| self.grad(v))
    }

    /// Writes the gradient of each tracked tensor into its accumulator.
    pub fn write_grad(&self, t: &mut Tensor<T>) -> Result<()> {
        if let Some(g) = self.grad_of(t) {
            let g = g.to_vec();
            t.accumulate_grad(&g)?;
        }
        Ok(())
    }
}

fn reduce_broadcast<T: Element>(db: &mut [T], g: &[T], kind: Broadcast, f: impl Fn(T, usize) -> T) {
    match kind {
        Broadcast::Same => {
            for (idx, d) in db.iter_mut().enumerate() {
                *d = *d + f(g[idx], idx);
            }
        }
        Broadcast::Scalar => {
            let mut s = T::zero();
            for (idx, &x) in g.iter().enumerate() {
                s = s + f(x, idx);
            }
            db[0] = db[0] + s;
        }
        Broadcast::Row => {
            let c = db.len();
            for (idx, &x) in g.iter().enumerate() {
                db[idx % c] = db[idx % c] + f(x, idx);
            }
        }
    }
}
