use super::kernels::{self, axpy, dot};
use super::{check_shape, numel, Tensor};
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Execution};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    Gelu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Segment { x: Var, offset: usize },
    Attention(Box<AttentionCache>),
    MeanPool { x: Var, weights: Vec<f64>, batch: usize, seq: usize, dim: usize },
    L2Normalize { x: Var, norms: Vec<f64>, eps: f64 },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

struct AttentionCache {
    qkv: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    /// `[batch][head][query][key]`, zero outside the attended set.
    probs: Vec<f64>,
}

/// Record of the differentiable operations of one forward pass.
///
/// Nodes are appended in execution order, which is a topological order;
/// [`Graph::backward`] traverses it once in reverse. A graph supports a
/// single backward pass; a second call is an error.
pub struct Graph {
    nodes: Vec<Node>,
    exec: Execution,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::with_execution(Execution::preferred())
    }

    pub fn with_execution(exec: Execution) -> Self {
        Graph {
            nodes: Vec::new(),
            exec,
            consumed: false,
        }
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies `t` into the graph as a leaf; it requires a gradient iff `t` does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// First element of `v`; meaningful for scalars.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Detached copy of the value of `v`.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes hold valid shapes")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::InvalidShape(format!("{op} expects a matrix, got {s:?}"))),
        }
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.exec, self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("transpose", x)?;
        let src = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![cols, rows], out, rg, Op::Transpose { x, rows, cols }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale(x, c))
    }

    /// `x[..., j] + bias[j]`: the only broadcast the engine supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().expect("shapes are non-empty");
        if self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::AddBias { x, bias }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Gelu(x))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Softmax { x, outer, len, inner }))
    }

    /// Per-row standardisation over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let d = *self.shape(x).last().expect("shapes are non-empty");
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
        ))
    }

    /// Gathers rows of `table[V×D]`; output is `[ids.len() × D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::InvalidShape("embedding needs at least one id".into()));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id: id as u32, vocab: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding { table, ids: ids.to_vec() },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape)?;
        if numel(&shape) != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Reshape(x)))
    }

    /// Contiguous slice of the flattened `x` starting at `offset`, viewed as `shape`.
    pub fn segment(&mut self, x: Var, offset: usize, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape)?;
        let n = numel(&shape);
        if offset + n > self.value(x).len() {
            return Err(Error::InvalidShape(format!(
                "segment [{offset}, {}) exceeds {} values",
                offset + n,
                self.value(x).len()
            )));
        }
        let out = self.value(x)[offset..offset + n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Segment { x, offset }))
    }

    /// Multi-head causal self-attention over packed projections.
    ///
    /// `qkv` is `[batch·seq × 3D]` holding queries, keys and values side by
    /// side; the result is `[batch·seq × D]`. Query `t` of sequence `b`
    /// attends to keys `s ≤ t` whose `mask[b·seq + s]` is nonzero; a query
    /// with no such key falls back to every `s ≤ t`.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        mask: Option<&[u8]>,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, width) = self.matrix_dims("causal_attention", qkv)?;
        if rows != batch * seq || width % 3 != 0 || heads == 0 || (width / 3) % heads != 0 {
            return Err(Error::InvalidShape(format!(
                "attention over {batch}x{seq} with {heads} heads cannot use qkv {:?}",
                self.shape(qkv)
            )));
        }
        if let Some(m) = mask {
            if m.len() != batch * seq {
                return Err(Error::Shape {
                    op: "causal_attention mask",
                    lhs: vec![batch, seq],
                    rhs: vec![m.len()],
                });
            }
        }
        let d = width / 3;
        let src = self.value(qkv);
        let parts = map_indexed(self.exec, batch, |b| {
            let m = mask.map(|m| &m[b * seq..(b + 1) * seq]);
            attention_forward(&src[b * seq * width..(b + 1) * seq * width], m, seq, d, heads)
        });
        let mut out = Vec::with_capacity(rows * d);
        let mut probs = Vec::with_capacity(batch * heads * seq * seq);
        for (o, p) in parts {
            out.extend_from_slice(&o);
            probs.extend_from_slice(&p);
        }
        let rg = self.rg(qkv);
        Ok(self.push(
            vec![rows, d],
            out,
            rg,
            Op::Attention(Box::new(AttentionCache {
                qkv,
                batch,
                seq,
                heads,
                probs,
            })),
        ))
    }

    /// Mean over the time axis of `x[B×T×D]`, restricted to positions whose
    /// mask entry is nonzero (all positions when the mask is absent or a row
    /// of it is entirely zero). Output is `[B×D]`.
    pub fn mean_pool_time(&mut self, x: Var, mask: Option<&[u8]>) -> Result<Var> {
        let (batch, seq, dim) = match self.shape(x) {
            [b, t, d] => (*b, *t, *d),
            s => {
                return Err(Error::InvalidShape(format!(
                    "mean_pool_time expects [B x T x D], got {s:?}"
                )))
            }
        };
        if let Some(m) = mask {
            if m.len() != batch * seq {
                return Err(Error::Shape {
                    op: "mean_pool_time mask",
                    lhs: vec![batch, seq],
                    rhs: vec![m.len()],
                });
            }
        }
        let weights = pooling_weights(mask, batch, seq);
        let src = self.value(x);
        let mut out = vec![0.0; batch * dim];
        for b in 0..batch {
            let o = &mut out[b * dim..(b + 1) * dim];
            for t in 0..seq {
                let w = weights[b * seq + t];
                if w != 0.0 {
                    axpy(w, &src[(b * seq + t) * dim..(b * seq + t + 1) * dim], o);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![batch, dim],
            out,
            rg,
            Op::MeanPool { x, weights, batch, seq, dim },
        ))
    }

    /// Scales each row of `x[B×D]` by `1 / max(‖row‖, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::config("l2_normalize eps must be positive"));
        }
        let (_, d) = self.matrix_dims("l2_normalize_rows", x)?;
        let src = self.value(x);
        let mut norms = Vec::with_capacity(src.len() / d);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let norm = dot(row, row).sqrt();
            norms.push(norm);
            let denom = norm.max(eps);
            out.extend(row.iter().map(|v| v / denom));
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::L2Normalize { x, norms, eps }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Mean(x))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[N×V]`. `None` targets are ignored and receive zero gradient.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, v) = self.matrix_dims("cross_entropy_mean", logits)?;
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy_mean",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::DegenerateLoss);
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { id: bad as u32, vocab: v });
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &src[r * v..(r + 1) * v];
            let p = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (pv, &x) in p.iter_mut().zip(row) {
                *pv = (x - max).exp();
                sum += *pv;
            }
            p.iter_mut().for_each(|pv| *pv /= sum);
            total += max + sum.ln() - row[t];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    // ------------------------------------------------------------ backward

    /// Propagates d`loss`/d· to every node that requires a gradient.
    ///
    /// Afterwards every requires-grad node holds a populated gradient (zeros
    /// when the root does not depend on it). The graph is consumed: a second
    /// call returns [`Error::GraphConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.shape(loss) != [1] {
            return Err(Error::NonScalarRoot(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        if self.rg(loss) {
            self.nodes[loss.0].grad = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.input_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contribs {
                self.accumulate(v, c);
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, c: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        match node.grad.as_mut() {
            Some(g) => g.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
            None => node.grad = Some(c),
        }
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let exec = self.exec;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(exec, g, self.value(b), &mut da, m, n, k);
                    out.push((a, da));
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(exec, self.value(a), g, &mut db, k, m, n);
                    out.push((b, db));
                }
            }
            &Op::Transpose { x, rows, cols } => {
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dx[i * cols + j] = g[j * rows + i];
                    }
                }
                out.push((x, dx));
            }
            &Op::Add(a, b) => {
                if self.rg(a) {
                    out.push((a, g.to_vec()));
                }
                if self.rg(b) {
                    out.push((b, g.to_vec()));
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    out.push((a, g.to_vec()));
                }
                if self.rg(b) {
                    out.push((b, g.iter().map(|v| -v).collect()));
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    out.push((a, zip_map(g, self.value(b), |x, y| x * y)));
                }
                if self.rg(b) {
                    out.push((b, zip_map(g, self.value(a), |x, y| x * y)));
                }
            }
            &Op::Scale(x, c) => out.push((x, g.iter().map(|v| v * c).collect())),
            &Op::AddBias { x, bias } => {
                if self.rg(x) {
                    out.push((x, g.to_vec()));
                }
                if self.rg(bias) {
                    let n = self.value(bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((bias, db));
                }
            }
            &Op::Gelu(x) => {
                let dx = zip_map(g, self.value(x), |gv, v| {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                });
                out.push((x, dx));
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let s: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
                out.push((x, dx));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain);
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rs * (gr[j] * gv[j] - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    axpy(1.0, &g[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                }
                out.push((*table, dt));
            }
            &Op::Reshape(x) => out.push((x, g.to_vec())),
            &Op::Segment { x, offset } => {
                let mut dx = vec![0.0; self.value(x).len()];
                dx[offset..offset + g.len()].copy_from_slice(g);
                out.push((x, dx));
            }
            Op::Attention(cache) => {
                let AttentionCache { qkv, batch, seq, heads, probs } = cache.as_ref();
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let width = self.shape(*qkv)[1];
                let d = width / 3;
                let src = self.value(*qkv);
                let blocks = map_indexed(exec, batch, |b| {
                    attention_backward(
                        &src[b * seq * width..(b + 1) * seq * width],
                        &probs[b * heads * seq * seq..(b + 1) * heads * seq * seq],
                        &g[b * seq * d..(b + 1) * seq * d],
                        seq,
                        d,
                        heads,
                    )
                });
                out.push((*qkv, blocks.concat()));
            }
            Op::MeanPool { x, weights, batch, seq, dim } => {
                let (batch, seq, dim) = (*batch, *seq, *dim);
                let mut dx = vec![0.0; batch * seq * dim];
                for b in 0..batch {
                    let gb = &g[b * dim..(b + 1) * dim];
                    for t in 0..seq {
                        let w = weights[b * seq + t];
                        if w != 0.0 {
                            axpy(w, gb, &mut dx[(b * seq + t) * dim..(b * seq + t + 1) * dim]);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::L2Normalize { x, norms, eps } => {
                let y = &node.value;
                let d = self.shape(*x)[1];
                let mut dx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let dxr = &mut dx[r * d..(r + 1) * d];
                    if norm > *eps {
                        let proj = dot(yr, gr);
                        for j in 0..d {
                            dxr[j] = (gr[j] - yr[j] * proj) / norm;
                        }
                    } else {
                        for j in 0..d {
                            dxr[j] = gr[j] / eps;
                        }
                    }
                }
                out.push((*x, dx));
            }
            &Op::Sum(x) => out.push((x, vec![g[0]; self.value(x).len()])),
            &Op::Mean(x) => {
                let n = self.value(x).len();
                out.push((x, vec![g[0] / n as f64; n]));
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = &mut dl[r * v..(r + 1) * v];
                    row.iter_mut()
                        .zip(&probs[r * v..(r + 1) * v])
                        .for_each(|(d, p)| *d = p * scale);
                    row[t] -= scale;
                }
                out.push((*logits, dl));
            }
        }
        out
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn pooling_weights(mask: Option<&[u8]>, batch: usize, seq: usize) -> Vec<f64> {
    let mut w = vec![0.0; batch * seq];
    for b in 0..batch {
        let row = mask.map(|m| &m[b * seq..(b + 1) * seq]);
        let valid = row.map_or(seq, |r| r.iter().filter(|&&x| x != 0).count());
        for t in 0..seq {
            let on = match row {
                Some(r) if valid > 0 => r[t] != 0,
                _ => true,
            };
            if on {
                w[b * seq + t] = 1.0 / if valid > 0 { valid } else { seq } as f64;
            }
        }
    }
    w
}

/// Keys attended by query `t`: unmasked `s ≤ t`, or all `s ≤ t` if none is unmasked.
pub(crate) fn attended_keys(mask: Option<&[u8]>, t: usize) -> impl Iterator<Item = usize> + '_ {
    let any = mask.is_none_or(|m| m[..=t].iter().any(|&x| x != 0));
    (0..=t).filter(move |&s| !any || mask.is_none_or(|m| m[s] != 0))
}

/// One sequence: `qkv` is `[seq × 3d]`. Returns (`[seq × d]` output, `[heads × seq × seq]` probs).
fn attention_forward(
    qkv: &[f64],
    mask: Option<&[u8]>,
    seq: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let width = 3 * d;
    let mut out = vec![0.0; seq * d];
    let mut probs = vec![0.0; heads * seq * seq];
    let mut keys = Vec::with_capacity(seq);
    for t in 0..seq {
        keys.clear();
        keys.extend(attended_keys(mask, t));
        for h in 0..heads {
            let q = &qkv[t * width + h * dh..t * width + (h + 1) * dh];
            let p = &mut probs[(h * seq + t) * seq..(h * seq + t + 1) * seq];
            let mut max = f64::NEG_INFINITY;
            for &s in &keys {
                let k = &qkv[s * width + d + h * dh..s * width + d + (h + 1) * dh];
                let sc = dot(q, k) * scale;
                p[s] = sc;
                max = max.max(sc);
            }
            let mut sum = 0.0;
            for &s in &keys {
                p[s] = (p[s] - max).exp();
                sum += p[s];
            }
            let o = &mut out[t * d + h * dh..t * d + (h + 1) * dh];
            for &s in &keys {
                p[s] /= sum;
                let v = &qkv[s * width + 2 * d + h * dh..s * width + 2 * d + (h + 1) * dh];
                axpy(p[s], v, o);
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    g: &[f64],
    seq: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let width = 3 * d;
    let mut dqkv = vec![0.0; seq * width];
    let mut dp = vec![0.0; seq];
    for h in 0..heads {
        for t in 0..seq {
            let p = &probs[(h * seq + t) * seq..(h * seq + t + 1) * seq];
            let go = &g[t * d + h * dh..t * d + (h + 1) * dh];
            let mut s_dot = 0.0;
            for s in 0..=t {
                if p[s] == 0.0 {
                    dp[s] = 0.0;
                    continue;
                }
                let v = &qkv[s * width + 2 * d + h * dh..s * width + 2 * d + (h + 1) * dh];
                dp[s] = dot(go, v);
                s_dot += p[s] * dp[s];
            }
            for s in 0..=t {
                if p[s] == 0.0 {
                    continue;
                }
                let ds = p[s] * (dp[s] - s_dot) * scale;
                let (qo, ko, vo) = (t * width + h * dh, s * width + d + h * dh, s * width + 2 * d + h * dh);
                for j in 0..dh {
                    dqkv[qo + j] += ds * qkv[ko + j];
                    dqkv[ko + j] += ds * qkv[qo + j];
                    dqkv[vo + j] += p[s] * go[j];
                }
            }
        }
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> Var {
        g.leaf(&Tensor::new(shape, data).unwrap().requiring_grad())
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let i = g.constant(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        let b = g.constant(vec![2, 2], vec![5., 6., 7., 8.]).unwrap();
        let ai = g.matmul(a, i).unwrap();
        assert_eq!(g.value(ai), &[1., 2., 3., 4.]);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab), &[19., 22., 43., 50.]);
        let z = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let any = g.constant(vec![3, 4], (0..12).map(|x| x as f64).collect()).unwrap();
        let zz = g.matmul(z, any).unwrap();
        assert_eq!(g.shape(zz), &[2, 4]);
        assert!(g.value(zz).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(vec![4], vec![0.0; 4]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y), &[0.25; 4]);
        let x = g.constant(vec![2], vec![1000.0, 0.0]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-12 && g.value(y)[1] < 1e-300);
        let x = g.constant(vec![2], vec![1f64.ln(), 3f64.ln()]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_abs_diff_eq!(g.value(y)[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(y)[1], 0.75, epsilon = 1e-15);
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(g.value(y)[j] + g.value(y)[3 + j], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(vec![2], vec![1.0; 2]).unwrap();
        let zeros = g.constant(vec![2], vec![0.0; 2]).unwrap();
        let c = g.constant(vec![1, 2], vec![5.0, 5.0]).unwrap();
        let y = g.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0]);
        let x = g.constant(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let y = g.layer_norm(x, ones, zeros, 1e-14).unwrap();
        assert_abs_diff_eq!(g.value(y)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(y)[1], -1.0, epsilon = 1e-12);
        let bias = g.constant(vec![2], vec![0.3, -0.7]).unwrap();
        let y = g.layer_norm(x, zeros, bias, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.3, -0.7]);
        assert!(g.layer_norm(x, ones, zeros, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let u = g.constant(vec![1, 4], vec![0.0; 4]).unwrap();
        let l = g.cross_entropy_mean(u, &[Some(2)]).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 4f64.ln(), epsilon = 1e-12);
        let mut row = vec![0.0; 4];
        row[1] = 30.0;
        let p = g.constant(vec![1, 4], row.clone()).unwrap();
        let l = g.cross_entropy_mean(p, &[Some(1)]).unwrap();
        assert!(g.scalar(l) < 1e-12);

        let two = g.constant(vec![2, 4], [vec![0.3, -1.0, 2.0, 0.5], vec![9.0; 4]].concat()).unwrap();
        let one = g.constant(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let l2 = g.cross_entropy_mean(two, &[Some(2), None]).unwrap();
        let l1 = g.cross_entropy_mean(one, &[Some(2)]).unwrap();
        assert_abs_diff_eq!(g.scalar(l2), g.scalar(l1), epsilon = 1e-15);

        assert!(matches!(g.cross_entropy_mean(one, &[None]), Err(Error::DegenerateLoss)));
        assert!(g.cross_entropy_mean(one, &[Some(4)]).is_err());
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 3], vec![0.1, 0.2, 0.3, 1.0, 1.0, 1.0]);
        let l = g.cross_entropy_mean(x, &[Some(0), None]).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(x).unwrap();
        let e: Vec<f64> = [0.1f64, 0.2, 0.3].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        assert_abs_diff_eq!(grad[0], e[0] / s - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[1], e[1] / s, epsilon = 1e-15);
        assert_eq!(&grad[3..], &[0.0; 3]);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = g.constant(vec![3, 2], vec![3.0, 4.0, 0.6, 0.8, 0.0, 0.0]).unwrap();
        let y = g.l2_normalize_rows(x, 1e-8).unwrap();
        let v = g.value(y);
        assert_abs_diff_eq!(v[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.8, epsilon = 1e-15);
        assert_eq!(&v[2..4], &[0.6, 0.8]);
        assert_eq!(&v[4..], &[0.0, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![1.0, -2.0, 5.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));

        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![3.0]);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn unreached_leaves_get_zero_grads() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let unused = leaf(&mut g, vec![3], vec![0.0; 3]);
        let c = g.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn attention_respects_causality_and_mask() {
        let (b, t, d, h) = (1, 4, 4, 2);
        let data: Vec<f64> = (0..b * t * 3 * d).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        let mut g = Graph::new();
        let qkv = g.constant(vec![b * t, 3 * d], data.clone()).unwrap();
        let out = g.causal_attention(qkv, None, b, t, h).unwrap();
        // Query 0 only sees key 0, so its output is value row 0.
        assert_eq!(&g.value(out)[..d], &data[2 * d..3 * d]);

        let mask = [1u8, 0, 1, 1];
        let masked = g.causal_attention(qkv, Some(&mask), b, t, h).unwrap();
        let mut alt = data.clone();
        for j in 0..3 * d {
            alt[3 * d + j] += 100.0; // perturb the masked position's k and v
        }
        let qkv2 = g.constant(vec![b * t, 3 * d], alt).unwrap();
        let masked2 = g.causal_attention(qkv2, Some(&mask), b, t, h).unwrap();
        for row in [0, 2, 3] {
            assert_eq!(
                &g.value(masked)[row * d..(row + 1) * d],
                &g.value(masked2)[row * d..(row + 1) * d]
            );
        }
    }

    #[test]
    fn mean_pool_respects_mask() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]).unwrap();
        let p = g.mean_pool_time(x, Some(&[1, 1, 0])).unwrap();
        assert_eq!(g.value(p), &[2.0, 3.0]);
        let p = g.mean_pool_time(x, None).unwrap();
        assert_abs_diff_eq!(g.value(p)[0], 104.0 / 3.0, epsilon = 1e-12);
        let p = g.mean_pool_time(x, Some(&[0, 0, 0])).unwrap();
        assert_abs_diff_eq!(g.value(p)[0], 104.0 / 3.0, epsilon = 1e-12);
    }
}
