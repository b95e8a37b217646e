//! Reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded on a tape in evaluation order, which is a valid
//! topological order by construction. `backward` walks the tape in exact
//! reverse order and accumulates gradients across every recorded use of a
//! value (multivariate chain rule). Evaluation order is fixed, so identical
//! inputs produce bit-identical forward values.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var, F),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    MeanLast(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    L2NormRows(Var),
    SqDist(Var, Var),
    CosineSim(Var, Var),
    SoftmaxXent { logits: Var, targets: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize },
    Conv1d { x: Var, w: Var, b: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, causal: bool },
    InfoNceLiteral { sims: Var, tau: F },
}

enum Aux<F> {
    None,
    /// Softmax / attention probabilities saved for the backward pass.
    Probs(Vec<F>),
    /// Per-row (or per-group) mean and reciprocal standard deviation.
    Stats { mean: Vec<F>, rstd: Vec<F> },
    /// Per-row L2 norms.
    Norms(Vec<F>),
}

struct Node<F> {
    op: Op<F>,
    shape: Vec<usize>,
    value: Vec<F>,
    needs_grad: bool,
    aux: Aux<F>,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient w.r.t. `v`, if any path connected it to the root.
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

const EPS_NORM: f64 = 1e-12;
const EPS_COSINE: f64 = 1e-8;
const EPS_LN: f64 = 1e-5;

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, value: Vec<F>, needs_grad: bool) -> Var {
        self.push_aux(op, shape, value, needs_grad, Aux::None)
    }

    fn push_aux(
        &mut self,
        op: Op<F>,
        shape: Vec<usize>,
        value: Vec<F>,
        needs_grad: bool,
        aux: Aux<F>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self, v: Var) -> F {
        debug_assert_eq!(self.numel(v), 1);
        self.nodes[v.0].value[0]
    }

    /// Attention probabilities of a fused attention node: (probs, heads, sq, sk).
    pub fn attention_probs(&self, v: Var) -> Option<(&[F], usize, usize, usize)> {
        let node = &self.nodes[v.0];
        if let Op::Attention { q, k, heads, .. } = &node.op {
            if let Aux::Probs(p) = &node.aux {
                let sq = self.nodes[q.0].shape[0];
                let sk = self.nodes[k.0].shape[0];
                return Some((p, *heads, sq, sk));
            }
        }
        None
    }

    // ── Inputs ───────────────────────────────────────────────────────

    /// Records a leaf. Rejects non-finite inputs.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
        ))
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "constant" });
        }
        Ok(self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false))
    }

    pub fn scalar(&mut self, value: F) -> Var {
        self.push(Op::Leaf, vec![1], vec![value], false)
    }

    // ── Elementwise binary with broadcasting ─────────────────────────

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, kind: u8) -> Result<Var> {
        let out_shape = broadcast_shape(op_name, self.shape(a), self.shape(b))?;
        let numel: usize = out_shape.iter().product();
        let (av, bv) = (&self.nodes[a.0], &self.nodes[b.0]);
        let mut out = vec![F::zero(); numel];
        let apply = |x: F, y: F| match kind {
            0 => x + y,
            1 => x - y,
            _ => x * y,
        };
        if av.shape == bv.shape {
            for ((o, &x), &y) in out.iter_mut().zip(&av.value).zip(&bv.value) {
                *o = apply(x, y);
            }
        } else if is_suffix(&bv.shape, &av.shape) {
            // hot path: [n, d] op [d]-style bias broadcasting
            let chunk = bv.value.len();
            for (orow, arow) in out.chunks_mut(chunk).zip(av.value.chunks(chunk)) {
                for ((o, &x), &y) in orow.iter_mut().zip(arow).zip(&bv.value) {
                    *o = apply(x, y);
                }
            }
        } else if is_suffix(&av.shape, &bv.shape) {
            let chunk = av.value.len();
            for (orow, brow) in out.chunks_mut(chunk).zip(bv.value.chunks(chunk)) {
                for ((o, &y), &x) in orow.iter_mut().zip(brow).zip(&av.value) {
                    *o = apply(x, y);
                }
            }
        } else {
            let ai = BroadcastIndexer::new(&av.shape, &out_shape);
            let bi = BroadcastIndexer::new(&bv.shape, &out_shape);
            for (flat, o) in out.iter_mut().enumerate() {
                *o = apply(av.value[ai.map(flat)], bv.value[bi.map(flat)]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let op = match kind {
            0 => Op::Add(a, b),
            1 => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(op, out_shape, out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, 1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, 2)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), shape, value, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Op::AddScalar(a, c), shape, value, needs)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, needs))
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ash = self.shape(a);
        if ash.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: ash.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (ash[0], ash[1]);
        let src = &self.nodes[a.0].value;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose(a), vec![n, m], out, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(a) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let value = self.nodes[a.0].value.clone();
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), shape, value, needs))
    }

    /// Concatenates along axis 0. All trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat: no inputs"));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let sh = self.shape(p);
            if sh[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sh.to_vec(),
                });
            }
            rows += sh[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let mut value = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::Concat(parts.to_vec()), shape, value, needs))
    }

    /// Contiguous row range `[start, start+len)` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ash = self.shape(a);
        if ash.is_empty() || start + len > ash[0] || len == 0 {
            return Err(Error::invalid(format!(
                "slice: rows [{start}, {}) out of bounds for shape {ash:?}",
                start + len
            )));
        }
        let stride: usize = ash[1..].iter().product();
        let mut shape = vec![len];
        shape.extend_from_slice(&ash[1..]);
        let value = self.nodes[a.0].value[start * stride..(start + len) * stride].to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::SliceRows { x: a, start }, shape, value, needs))
    }

    /// Gathers rows along axis 0; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ash = self.shape(a);
        if ash.is_empty() || idx.is_empty() {
            return Err(Error::invalid("gather: empty input or index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= ash[0]) {
            return Err(Error::invalid(format!(
                "gather: row index {bad} out of bounds for shape {ash:?}"
            )));
        }
        let stride: usize = ash[1..].iter().product();
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&ash[1..]);
        let src = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            value.extend_from_slice(&src[i * stride..(i + 1) * stride]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            shape,
            value,
            needs,
        ))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0]
            .value
            .iter()
            .fold(F::zero(), |acc, &x| acc + x);
        let needs = self.needs(a);
        self.push(Op::SumAll(a), vec![1], vec![s], needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = F::cast(self.numel(a) as f64);
        let s = self.nodes[a.0]
            .value
            .iter()
            .fold(F::zero(), |acc, &x| acc + x)
            / n;
        let needs = self.needs(a);
        self.push(Op::MeanAll(a), vec![1], vec![s], needs)
    }

    /// Mean over axis 0: `[n, d...] -> [d...]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ash = self.shape(a);
        if ash.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "mean_rows",
                lhs: ash.to_vec(),
                rhs: vec![],
            });
        }
        let rows = ash[0];
        let stride: usize = ash[1..].iter().product();
        let inv = F::one() / F::cast(rows as f64);
        let mut out = vec![F::zero(); stride];
        for row in self.nodes[a.0].value.chunks(stride) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let shape = ash[1..].to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::MeanRows(a), shape, out, needs))
    }

    /// Mean over the last axis: `[..., t] -> [...]`.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let ash = self.shape(a);
        if ash.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "mean_last",
                lhs: ash.to_vec(),
                rhs: vec![],
            });
        }
        let t = *ash.last().unwrap();
        let lead: usize = ash[..ash.len() - 1].iter().product();
        let inv = F::one() / F::cast(t as f64);
        let mut out = vec![F::zero(); lead];
        for (o, chunk) in out.iter_mut().zip(self.nodes[a.0].value.chunks(t)) {
            *o = chunk.iter().fold(F::zero(), |acc, &x| acc + x) * inv;
        }
        let shape = ash[..ash.len() - 1].to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::MeanLast(a), shape, out, needs))
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(
        &mut self,
        op_name: &'static str,
        a: Var,
        f: impl Fn(F) -> F,
        check_finite: bool,
    ) -> Result<Var> {
        let value: Vec<F> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        if check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        let op = match op_name {
            "exp" => Op::Exp(a),
            "log" => Op::Log(a),
            "sqrt" => Op::Sqrt(a),
            "gelu" => Op::Gelu(a),
            "sigmoid" => Op::Sigmoid(a),
            _ => Op::LogSigmoid(a),
        };
        Ok(self.push(op, shape, value, needs))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), true)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.ln(), true)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, |x| x.sqrt(), true)
    }

    /// Exact Gaussian-CDF GELU: `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu_fwd, false)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid_stable, false)
    }

    /// Numerically stable `log(sigmoid(x)) = min(x, 0) - ln(1 + exp(-|x|))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("logsigmoid", a, log_sigmoid_stable, false)
    }

    // ── Row-wise nonlinearities ──────────────────────────────────────

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ash = self.shape(a);
        if ash.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: ash.to_vec(),
                rhs: vec![],
            });
        }
        let d = *ash.last().unwrap();
        let mut value = self.nodes[a.0].value.clone();
        for row in value.chunks_mut(d) {
            softmax_row(row);
        }
        let shape = ash.to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Softmax(a), shape, value, needs))
    }

    /// L2-normalizes along the last axis. Rows with norm below 1e-12 map to zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ash = self.shape(a);
        if ash.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "l2_normalize",
                lhs: ash.to_vec(),
                rhs: vec![],
            });
        }
        let d = *ash.last().unwrap();
        let src = &self.nodes[a.0].value;
        let rows = src.len() / d;
        let mut value = vec![F::zero(); src.len()];
        let mut norms = Vec::with_capacity(rows);
        let floor = F::cast(EPS_NORM);
        for (orow, row) in value.chunks_mut(d).zip(src.chunks(d)) {
            let n = row
                .iter()
                .fold(F::zero(), |acc, &x| acc + x * x)
                .sqrt();
            norms.push(n);
            if n >= floor {
                for (o, &x) in orow.iter_mut().zip(row) {
                    *o = x / n;
                }
            }
        }
        let shape = ash.to_vec();
        let needs = self.needs(a);
        Ok(self.push_aux(Op::L2NormRows(a), shape, value, needs, Aux::Norms(norms)))
    }

    // ── Distances and similarities ───────────────────────────────────

    /// Squared L2 distance between equal-shape tensors, reduced to a scalar.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "sq_dist",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let s = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .fold(F::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::SqDist(a, b), vec![1], vec![s], needs))
    }

    /// Cosine similarity of two equal-numel tensors, flattened.
    ///
    /// If either norm is below 1e-8 the similarity is defined as 0 with zero
    /// gradient (degenerate-input rule).
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.numel(a) != self.numel(b) {
            return Err(Error::ShapeMismatch {
                op: "cosine_sim",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (na, nb, dot) = cosine_parts(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let eps = F::cast(EPS_COSINE);
        let s = if na < eps || nb < eps {
            F::zero()
        } else {
            dot / (na * nb)
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::CosineSim(a, b), vec![1], vec![s], needs))
    }

    /// Per-row softmax cross-entropy against integer class targets.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ash = self.shape(logits);
        if ash.len() != 2 || ash[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_xent",
                lhs: ash.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let c = ash[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!(
                "softmax_xent: target class {bad} out of range for {c} classes"
            )));
        }
        let n = ash[0];
        let mut probs = self.nodes[logits.0].value.clone();
        let mut losses = Vec::with_capacity(n);
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let target_logit = row[t];
            let mut max = row[0];
            for &x in row.iter() {
                if x > max {
                    max = x;
                }
            }
            let mut sum = F::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
            losses.push(max + sum.ln() - target_logit);
        }
        let needs = self.needs(logits);
        Ok(self.push_aux(
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
            },
            vec![n],
            losses,
            needs,
            Aux::Probs(probs),
        ))
    }

    // ── Normalization layers ─────────────────────────────────────────

    /// Layer normalization along the last axis with learnable scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xsh = self.shape(x);
        let d = *xsh.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xsh.to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.numel(x) / d;
        let mut value = vec![F::zero(); self.numel(x)];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let eps = F::cast(EPS_LN);
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        for (orow, row) in value
            .chunks_mut(d)
            .zip(self.nodes[x.0].value.chunks(d))
        {
            let (mean, rstd) = moments(row, eps);
            means.push(mean);
            rstds.push(rstd);
            for (j, (o, &xv)) in orow.iter_mut().zip(row).enumerate() {
                *o = g[j] * (xv - mean) * rstd + b[j];
            }
        }
        let shape = xsh.to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push_aux(
            Op::LayerNorm { x, gamma, beta },
            shape,
            value,
            needs,
            Aux::Stats {
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Group normalization over `[batch, channels, t]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        if xsh.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                lhs: xsh,
                rhs: vec![],
            });
        }
        let (bsz, ch, t) = (xsh[0], xsh[1], xsh[2]);
        if groups == 0 || ch % groups != 0 {
            return Err(Error::invalid(format!(
                "group_norm: {ch} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                lhs: xsh,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let cg = ch / groups;
        let block = cg * t;
        let mut value = vec![F::zero(); self.numel(x)];
        let mut means = Vec::with_capacity(bsz * groups);
        let mut rstds = Vec::with_capacity(bsz * groups);
        let eps = F::cast(EPS_LN);
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        for bi in 0..bsz {
            for gi in 0..groups {
                let off = bi * ch * t + gi * block;
                let src = &self.nodes[x.0].value[off..off + block];
                let (mean, rstd) = moments(src, eps);
                means.push(mean);
                rstds.push(rstd);
                for ci in 0..cg {
                    let cidx = gi * cg + ci;
                    for ti in 0..t {
                        let at = off + ci * t + ti;
                        value[at] =
                            g[cidx] * (self.nodes[x.0].value[at] - mean) * rstd + b[cidx];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push_aux(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
            },
            xsh,
            value,
            needs,
            Aux::Stats {
                mean: means,
                rstd: rstds,
            },
        ))
    }

    // ── Fused network primitives ─────────────────────────────────────

    /// Batched 1-D convolution, stride 1, same (zero) padding, odd kernel.
    ///
    /// `x: [batch, c_in, t]`, `w: [c_out, c_in, k]`, `b: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        let wsh = self.shape(w).to_vec();
        if xsh.len() != 3 || wsh.len() != 3 || xsh[1] != wsh[1] || wsh[2] % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: xsh,
                rhs: wsh,
            });
        }
        let (bsz, cin, t) = (xsh[0], xsh[1], xsh[2]);
        let (cout, _, k) = (wsh[0], wsh[1], wsh[2]);
        if self.shape(b) != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: wsh,
                rhs: self.shape(b).to_vec(),
            });
        }
        let pad = (k - 1) / 2;
        let xval = &self.nodes[x.0].value;
        let wval = &self.nodes[w.0].value;
        let bval = &self.nodes[b.0].value;
        let mut out = vec![F::zero(); bsz * cout * t];
        for bi in 0..bsz {
            for o in 0..cout {
                let orow = &mut out[(bi * cout + o) * t..(bi * cout + o + 1) * t];
                orow.iter_mut().for_each(|v| *v = bval[o]);
                for c in 0..cin {
                    let xrow = &xval[(bi * cin + c) * t..(bi * cin + c + 1) * t];
                    for kk in 0..k {
                        let wv = wval[(o * cin + c) * k + kk];
                        let (o_lo, x_lo, len) = shifted_range(t, kk, pad);
                        for (ov, &xv) in orow[o_lo..o_lo + len]
                            .iter_mut()
                            .zip(&xrow[x_lo..x_lo + len])
                        {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Conv1d { x, w, b }, vec![bsz, cout, t], out, needs))
    }

    /// Fused multi-head scaled-dot-product attention.
    ///
    /// `q: [sq, d]`, `k: [sk, d]`, `v: [sk, d]` with `d = heads * dk`;
    /// returns `[sq, d]`. With `causal`, position i attends to keys `<= i`
    /// (requires `sq == sk`). Row probabilities are saved for backward and
    /// inspectable via [`Tape::attention_probs`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (qsh, ksh, vsh) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if qsh.len() != 2 || ksh.len() != 2 || vsh != ksh || qsh[1] != ksh[1] {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: qsh,
                rhs: ksh,
            });
        }
        let d = qsh[1];
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "attention: dim {d} not divisible by {heads} heads"
            )));
        }
        let (sq, sk) = (qsh[0], ksh[0]);
        if causal && sq != sk {
            return Err(Error::invalid(
                "attention: causal masking requires square score matrix",
            ));
        }
        let dk = d / heads;
        let scale = F::cast(1.0 / (dk as f64).sqrt());
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mut probs = vec![F::zero(); heads * sq * sk];
        let mut out = vec![F::zero(); sq * d];
        for h in 0..heads {
            let hoff = h * dk;
            for i in 0..sq {
                let prow = &mut probs[(h * sq + i) * sk..(h * sq + i + 1) * sk];
                let qrow = &qv[i * d + hoff..i * d + hoff + dk];
                let limit = if causal { i + 1 } else { sk };
                for (j, pj) in prow.iter_mut().enumerate().take(limit) {
                    let krow = &kv[j * d + hoff..j * d + hoff + dk];
                    let mut s = F::zero();
                    for (&a, &b) in qrow.iter().zip(krow) {
                        s += a * b;
                    }
                    *pj = s * scale;
                }
                softmax_row(&mut prow[..limit]);
                let orow = &mut out[i * d + hoff..i * d + hoff + dk];
                for (j, &p) in prow.iter().enumerate().take(limit) {
                    let vrow = &vv[j * d + hoff..j * d + hoff + dk];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push_aux(
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
            },
            vec![sq, d],
            out,
            needs,
            Aux::Probs(probs),
        ))
    }

    /// InfoNCE written exactly as the symmetric double-sum form with the
    /// positive term excluded from the denominator.
    ///
    /// For a `[b, b]` similarity matrix `s`, one direction contributes
    /// `sum_i sum_j (-s_ij / tau + ln sum_{k != i} exp(s_ik / tau))`; the loss
    /// averages both directions with a `1 / (2b)` factor. Requires `b >= 2`.
    pub fn infonce_literal(&mut self, sims: Var, tau: F) -> Result<Var> {
        let sh = self.shape(sims);
        if sh.len() != 2 || sh[0] != sh[1] {
            return Err(Error::ShapeMismatch {
                op: "infonce_literal",
                lhs: sh.to_vec(),
                rhs: vec![],
            });
        }
        let b = sh[0];
        if b < 2 {
            return Err(Error::invalid(
                "infonce_literal: needs batch size >= 2 (the k != i denominator is empty)",
            ));
        }
        if tau <= F::zero() {
            return Err(Error::invalid("infonce_literal: temperature must be > 0"));
        }
        let s = &self.nodes[sims.0].value;
        let mut total = F::zero();
        for transposed in [false, true] {
            for i in 0..b {
                let lse = lse_excl_diag(s, b, i, tau, transposed);
                let mut rowsum = F::zero();
                for j in 0..b {
                    let sij = if transposed { s[j * b + i] } else { s[i * b + j] };
                    rowsum += sij / tau;
                }
                total += F::cast(b as f64) * lse - rowsum;
            }
        }
        let loss = total / F::cast(2.0 * b as f64);
        let needs = self.needs(sims);
        Ok(self.push(Op::InfoNceLiteral { sims, tau }, vec![1], vec![loss], needs))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Gradients of a scalar root w.r.t. everything recorded before it.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if self.numel(root) != 1 {
            return Err(Error::invalid(format!(
                "backward: root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_seeded(&[(root, vec![F::one()])])
    }

    /// Backward from explicit (node, adjoint) seeds. Seeds on several nodes
    /// make one pass compute the gradient of any linear combination of them.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<F>)]) -> Result<Gradients<F>> {
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0usize;
        for (v, seed) in seeds {
            if seed.len() != self.numel(*v) {
                return Err(Error::ShapeMismatch {
                    op: "backward_seed",
                    lhs: self.shape(*v).to_vec(),
                    rhs: vec![seed.len()],
                });
            }
            accumulate(&mut grads[v.0], seed, self.numel(*v));
            top = top.max(v.0);
        }
        for i in (0..=top).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.vjp(i, g.as_deref().unwrap(), &mut grads);
            grads[i] = g;
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let n = &self.nodes[node];
        match &n.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_broadcast(*a, g, &n.shape, grads, false);
                self.acc_broadcast(*b, g, &n.shape, grads, false);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(*a, g, &n.shape, grads, false);
                self.acc_broadcast(*b, g, &n.shape, grads, true);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let other = self.broadcast_value(*b, &n.shape);
                    let prod: Vec<F> = g.iter().zip(&other).map(|(&gi, &o)| gi * o).collect();
                    self.acc_broadcast_vec(*a, prod, &n.shape, grads);
                }
                if self.needs(*b) {
                    let other = self.broadcast_value(*a, &n.shape);
                    let prod: Vec<F> = g.iter().zip(&other).map(|(&gi, &o)| gi * o).collect();
                    self.acc_broadcast_vec(*b, prod, &n.shape, grads);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let dst = ensure(&mut grads[a.0], self.numel(*a));
                    for (d, &gi) in dst.iter_mut().zip(g) {
                        *d += gi * *c;
                    }
                }
            }
            Op::AddScalar(a, _) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g, self.numel(*a));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let nn = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    let bv = &self.nodes[b.0].value;
                    let dst = ensure(&mut grads[a.0], m * k);
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        let arow = &mut dst[i * k..(i + 1) * k];
                        for (p, av) in arow.iter_mut().enumerate() {
                            let brow = &bv[p * nn..(p + 1) * nn];
                            let mut s = F::zero();
                            for (&gj, &bj) in grow.iter().zip(brow) {
                                s += gj * bj;
                            }
                            *av += s;
                        }
                    }
                }
                if self.needs(*b) {
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    let av = &self.nodes[a.0].value;
                    let dst = ensure(&mut grads[b.0], k * nn);
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let apv = av[i * k + p];
                            let brow = &mut dst[p * nn..(p + 1) * nn];
                            for (bj, &gj) in brow.iter_mut().zip(grow) {
                                *bj += apv * gj;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (m, nn) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let dst = ensure(&mut grads[a.0], m * nn);
                    for i in 0..m {
                        for j in 0..nn {
                            dst[i * nn + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g, self.numel(*a));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.numel(p);
                    if self.needs(p) {
                        accumulate(&mut grads[p.0], &g[off..off + len], len);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let stride: usize = self.shape(*x)[1..].iter().product();
                    let dst = ensure(&mut grads[x.0], self.numel(*x));
                    let off = start * stride;
                    for (d, &gi) in dst[off..off + g.len()].iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.needs(*x) {
                    let stride: usize = self.shape(*x)[1..].iter().product();
                    let dst = ensure(&mut grads[x.0], self.numel(*x));
                    for (r, &i) in idx.iter().enumerate() {
                        let grow = &g[r * stride..(r + 1) * stride];
                        for (d, &gi) in dst[i * stride..(i + 1) * stride].iter_mut().zip(grow) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let dst = ensure(&mut grads[a.0], self.numel(*a));
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let len = self.numel(*a);
                    let gi = g[0] / F::cast(len as f64);
                    let dst = ensure(&mut grads[a.0], len);
                    for d in dst.iter_mut() {
                        *d += gi;
                    }
                }
            }
            Op::MeanRows(a) => {
                if self.needs(*a) {
                    let rows = self.shape(*a)[0];
                    let stride = self.numel(*a) / rows;
                    let inv = F::one() / F::cast(rows as f64);
                    let dst = ensure(&mut grads[a.0], self.numel(*a));
                    for drow in dst.chunks_mut(stride) {
                        for (d, &gi) in drow.iter_mut().zip(g) {
                            *d += gi * inv;
                        }
                    }
                }
            }
            Op::MeanLast(a) => {
                if self.needs(*a) {
                    let t = *self.shape(*a).last().unwrap();
                    let inv = F::one() / F::cast(t as f64);
                    let dst = ensure(&mut grads[a.0], self.numel(*a));
                    for (drow, &gi) in dst.chunks_mut(t).zip(g) {
                        for d in drow.iter_mut() {
                            *d += gi * inv;
                        }
                    }
                }
            }
            Op::Exp(a) => self.acc_elementwise(*a, grads, |i| g[i] * n.value[i]),
            Op::Log(a) => {
                self.acc_elementwise(*a, grads, |i| g[i] / self.nodes[a.0].value[i])
            }
            Op::Sqrt(a) => self.acc_elementwise(*a, grads, |i| {
                g[i] / (F::cast(2.0) * n.value[i])
            }),
            Op::Gelu(a) => self.acc_elementwise(*a, grads, |i| {
                g[i] * gelu_grad(self.nodes[a.0].value[i])
            }),
            Op::Sigmoid(a) => self.acc_elementwise(*a, grads, |i| {
                let y = n.value[i];
                g[i] * y * (F::one() - y)
            }),
            Op::LogSigmoid(a) => self.acc_elementwise(*a, grads, |i| {
                g[i] * sigmoid_stable(-self.nodes[a.0].value[i])
            }),
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let d = *n.shape.last().unwrap();
                    let dst = ensure(&mut grads[a.0], self.numel(*a));
                    for ((drow, grow), yrow) in dst
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(n.value.chunks(d))
                    {
                        let dot = grow
                            .iter()
                            .zip(yrow)
                            .fold(F::zero(), |acc, (&gi, &yi)| acc + gi * yi);
                        for ((d0, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d0 += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::L2NormRows(a) => {
                if self.needs(*a) {
                    let d = *n.shape.last().unwrap();
                    let norms = match &n.aux {
                        Aux::Norms(v) => v,
                        _ => unreachable!(),
                    };
                    let floor = F::cast(EPS_NORM);
                    let dst = ensure(&mut grads[a.0], self.numel(*a));
                    for (((drow, grow), yrow), &norm) in dst
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(n.value.chunks(d))
                        .zip(norms)
                    {
                        if norm < floor {
                            continue;
                        }
                        let dot = grow
                            .iter()
                            .zip(yrow)
                            .fold(F::zero(), |acc, (&gi, &yi)| acc + gi * yi);
                        for ((d0, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d0 += (gi - yi * dot) / norm;
                        }
                    }
                }
            }
            Op::SqDist(a, b) => {
                let diff: Vec<F> = self.nodes[a.0]
                    .value
                    .iter()
                    .zip(&self.nodes[b.0].value)
                    .map(|(&x, &y)| F::cast(2.0) * (x - y) * g[0])
                    .collect();
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], &diff, diff.len());
                }
                if self.needs(*b) {
                    let neg: Vec<F> = diff.iter().map(|&x| -x).collect();
                    accumulate(&mut grads[b.0], &neg, neg.len());
                }
            }
            Op::CosineSim(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (na, nb, dot) = cosine_parts(av, bv);
                let eps = F::cast(EPS_COSINE);
                if na < eps || nb < eps {
                    return;
                }
                let s = dot / (na * nb);
                if self.needs(*a) {
                    let dst = ensure(&mut grads[a.0], av.len());
                    for ((d, &x), &y) in dst.iter_mut().zip(av).zip(bv) {
                        *d += g[0] * (y / (na * nb) - s * x / (na * na));
                    }
                }
                if self.needs(*b) {
                    let dst = ensure(&mut grads[b.0], bv.len());
                    for ((d, &y), &x) in dst.iter_mut().zip(bv).zip(av) {
                        *d += g[0] * (x / (na * nb) - s * y / (nb * nb));
                    }
                }
            }
            Op::SoftmaxXent { logits, targets } => {
                if self.needs(*logits) {
                    let c = self.shape(*logits)[1];
                    let probs = match &n.aux {
                        Aux::Probs(p) => p,
                        _ => unreachable!(),
                    };
                    let dst = ensure(&mut grads[logits.0], self.numel(*logits));
                    for ((drow, prow), (&t, &gi)) in dst
                        .chunks_mut(c)
                        .zip(probs.chunks(c))
                        .zip(targets.iter().zip(g))
                    {
                        for (j, (d0, &pj)) in drow.iter_mut().zip(prow).enumerate() {
                            let indicator = if j == t { F::one() } else { F::zero() };
                            *d0 += gi * (pj - indicator);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = *n.shape.last().unwrap();
                let (means, rstds) = match &n.aux {
                    Aux::Stats { mean, rstd } => (mean, rstd),
                    _ => unreachable!(),
                };
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let rows = xv.len() / d;
                let nf = F::cast(d as f64);
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dgamma = vec![F::zero(); d];
                    let mut dbeta = vec![F::zero(); d];
                    for r in 0..rows {
                        let grow = &g[r * d..(r + 1) * d];
                        let xrow = &xv[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xhat = (xrow[j] - means[r]) * rstds[r];
                            dgamma[j] += grow[j] * xhat;
                            dbeta[j] += grow[j];
                        }
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads[gamma.0], &dgamma, d);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads[beta.0], &dbeta, d);
                    }
                }
                if self.needs(*x) {
                    let dst = ensure(&mut grads[x.0], xv.len());
                    for r in 0..rows {
                        let grow = &g[r * d..(r + 1) * d];
                        let xrow = &xv[r * d..(r + 1) * d];
                        let drow = &mut dst[r * d..(r + 1) * d];
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            let gj = grow[j] * gv[j];
                            let xhat = (xrow[j] - means[r]) * rstds[r];
                            s1 += gj;
                            s2 += gj * xhat;
                        }
                        for j in 0..d {
                            let gj = grow[j] * gv[j];
                            let xhat = (xrow[j] - means[r]) * rstds[r];
                            drow[j] += rstds[r] * (gj - s1 / nf - xhat * s2 / nf);
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
            } => {
                let (bsz, ch, t) = (n.shape[0], n.shape[1], n.shape[2]);
                let cg = ch / groups;
                let block = cg * t;
                let nf = F::cast(block as f64);
                let (means, rstds) = match &n.aux {
                    Aux::Stats { mean, rstd } => (mean, rstd),
                    _ => unreachable!(),
                };
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let mut dgamma = vec![F::zero(); ch];
                let mut dbeta = vec![F::zero(); ch];
                let mut dx = if self.needs(*x) {
                    vec![F::zero(); xv.len()]
                } else {
                    Vec::new()
                };
                for bi in 0..bsz {
                    for gi in 0..*groups {
                        let off = bi * ch * t + gi * block;
                        let stat = bi * groups + gi;
                        let (mean, rstd) = (means[stat], rstds[stat]);
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for ci in 0..cg {
                            let cidx = gi * cg + ci;
                            for ti in 0..t {
                                let at = off + ci * t + ti;
                                let xhat = (xv[at] - mean) * rstd;
                                let gj = g[at] * gv[cidx];
                                dgamma[cidx] += g[at] * xhat;
                                dbeta[cidx] += g[at];
                                s1 += gj;
                                s2 += gj * xhat;
                            }
                        }
                        if self.needs(*x) {
                            for ci in 0..cg {
                                let cidx = gi * cg + ci;
                                for ti in 0..t {
                                    let at = off + ci * t + ti;
                                    let xhat = (xv[at] - mean) * rstd;
                                    let gj = g[at] * gv[cidx];
                                    dx[at] += rstd * (gj - s1 / nf - xhat * s2 / nf);
                                }
                            }
                        }
                    }
                }
                if self.needs(*gamma) {
                    accumulate(&mut grads[gamma.0], &dgamma, ch);
                }
                if self.needs(*beta) {
                    accumulate(&mut grads[beta.0], &dbeta, ch);
                }
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], &dx, xv.len());
                }
            }
            Op::Conv1d { x, w, b } => {
                let (bsz, cin, t) = (
                    self.shape(*x)[0],
                    self.shape(*x)[1],
                    self.shape(*x)[2],
                );
                let (cout, _, k) = (
                    self.shape(*w)[0],
                    self.shape(*w)[1],
                    self.shape(*w)[2],
                );
                let pad = (k - 1) / 2;
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                if self.needs(*b) {
                    let mut db = vec![F::zero(); cout];
                    for bi in 0..bsz {
                        for o in 0..cout {
                            let grow = &g[(bi * cout + o) * t..(bi * cout + o + 1) * t];
                            db[o] += grow.iter().fold(F::zero(), |acc, &x| acc + x);
                        }
                    }
                    accumulate(&mut grads[b.0], &db, cout);
                }
                if self.needs(*w) {
                    let dst = ensure(&mut grads[w.0], wv.len());
                    for bi in 0..bsz {
                        for o in 0..cout {
                            let grow = &g[(bi * cout + o) * t..(bi * cout + o + 1) * t];
                            for c in 0..cin {
                                let xrow = &xv[(bi * cin + c) * t..(bi * cin + c) * t + t];
                                for kk in 0..k {
                                    let (o_lo, x_lo, len) = shifted_range(t, kk, pad);
                                    let mut s = F::zero();
                                    for (&gv2, &xv2) in grow[o_lo..o_lo + len]
                                        .iter()
                                        .zip(&xrow[x_lo..x_lo + len])
                                    {
                                        s += gv2 * xv2;
                                    }
                                    dst[(o * cin + c) * k + kk] += s;
                                }
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    let dst = ensure(&mut grads[x.0], xv.len());
                    for bi in 0..bsz {
                        for o in 0..cout {
                            let grow = &g[(bi * cout + o) * t..(bi * cout + o + 1) * t];
                            for c in 0..cin {
                                let drow =
                                    &mut dst[(bi * cin + c) * t..(bi * cin + c) * t + t];
                                for kk in 0..k {
                                    let wv2 = wv[(o * cin + c) * k + kk];
                                    let (o_lo, x_lo, len) = shifted_range(t, kk, pad);
                                    for (dxv, &gv2) in drow[x_lo..x_lo + len]
                                        .iter_mut()
                                        .zip(&grow[o_lo..o_lo + len])
                                    {
                                        *dxv += wv2 * gv2;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
            } => {
                let d = n.shape[1];
                let dk = d / heads;
                let (sq, sk) = (self.shape(*q)[0], self.shape(*k)[0]);
                let scale = F::cast(1.0 / (dk as f64).sqrt());
                let probs = match &n.aux {
                    Aux::Probs(p) => p,
                    _ => unreachable!(),
                };
                let qv = &self.nodes[q.0].value;
                let kv = &self.nodes[k.0].value;
                let vv = &self.nodes[v.0].value;
                let mut dq = vec![F::zero(); qv.len()];
                let mut dkk = vec![F::zero(); kv.len()];
                let mut dv = vec![F::zero(); vv.len()];
                let mut dp = vec![F::zero(); sk];
                for h in 0..*heads {
                    let hoff = h * dk;
                    for i in 0..sq {
                        let prow = &probs[(h * sq + i) * sk..(h * sq + i + 1) * sk];
                        let grow = &g[i * d + hoff..i * d + hoff + dk];
                        let limit = if *causal { i + 1 } else { sk };
                        // dV and dP
                        for (j, dpj) in dp.iter_mut().enumerate().take(limit) {
                            let vrow = &vv[j * d + hoff..j * d + hoff + dk];
                            let mut s = F::zero();
                            for (&gi, &vi) in grow.iter().zip(vrow) {
                                s += gi * vi;
                            }
                            *dpj = s;
                            let p = prow[j];
                            let dvrow = &mut dv[j * d + hoff..j * d + hoff + dk];
                            for (dvi, &gi) in dvrow.iter_mut().zip(grow) {
                                *dvi += p * gi;
                            }
                        }
                        // softmax backward: ds = p * (dp - sum(dp * p))
                        let mut dot = F::zero();
                        for j in 0..limit {
                            dot += dp[j] * prow[j];
                        }
                        for j in 0..limit {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            let krow = &kv[j * d + hoff..j * d + hoff + dk];
                            let qrow = &qv[i * d + hoff..i * d + hoff + dk];
                            let dqrow = &mut dq[i * d + hoff..i * d + hoff + dk];
                            for (dqi, &ki) in dqrow.iter_mut().zip(krow) {
                                *dqi += ds * ki;
                            }
                            let dkrow = &mut dkk[j * d + hoff..j * d + hoff + dk];
                            for (dki, &qi) in dkrow.iter_mut().zip(qrow) {
                                *dki += ds * qi;
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    accumulate(&mut grads[q.0], &dq, dq.len());
                }
                if self.needs(*k) {
                    accumulate(&mut grads[k.0], &dkk, dkk.len());
                }
                if self.needs(*v) {
                    accumulate(&mut grads[v.0], &dv, dv.len());
                }
            }
            Op::InfoNceLiteral { sims, tau } => {
                if self.needs(*sims) {
                    let b = self.shape(*sims)[0];
                    let s = &self.nodes[sims.0].value;
                    let bf = F::cast(b as f64);
                    let norm = g[0] / (F::cast(2.0) * bf);
                    let dst = ensure(&mut grads[sims.0], b * b);
                    for transposed in [false, true] {
                        for i in 0..b {
                            let lse = lse_excl_diag(s, b, i, *tau, transposed);
                            for j in 0..b {
                                let sij =
                                    if transposed { s[j * b + i] } else { s[i * b + j] };
                                let onto = if transposed { j * b + i } else { i * b + j };
                                let mut grad = -F::one() / *tau;
                                if j != i {
                                    let p = ((sij / *tau) - lse).exp();
                                    grad += bf * p / *tau;
                                }
                                dst[onto] += norm * grad;
                            }
                        }
                    }
                }
            }
        }
    }

    fn acc_elementwise(&self, a: Var, grads: &mut [Option<Vec<F>>], f: impl Fn(usize) -> F) {
        if self.needs(a) {
            let len = self.numel(a);
            let dst = ensure(&mut grads[a.0], len);
            for (i, d) in dst.iter_mut().enumerate() {
                *d += f(i);
            }
        }
    }

    /// Accumulates `g` (shaped `out_shape`) into an input of a broadcasting
    /// binary op, summing over broadcast dimensions.
    fn acc_broadcast(
        &self,
        a: Var,
        g: &[F],
        out_shape: &[usize],
        grads: &mut [Option<Vec<F>>],
        negate: bool,
    ) {
        if !self.needs(a) {
            return;
        }
        let reduced = reduce_to_shape(g, out_shape, self.shape(a));
        let dst = ensure(&mut grads[a.0], self.numel(a));
        if negate {
            for (d, &r) in dst.iter_mut().zip(&reduced) {
                *d -= r;
            }
        } else {
            for (d, &r) in dst.iter_mut().zip(&reduced) {
                *d += r;
            }
        }
    }

    fn acc_broadcast_vec(
        &self,
        a: Var,
        g: Vec<F>,
        out_shape: &[usize],
        grads: &mut [Option<Vec<F>>],
    ) {
        let reduced = reduce_to_shape(&g, out_shape, self.shape(a));
        let dst = ensure(&mut grads[a.0], self.numel(a));
        for (d, &r) in dst.iter_mut().zip(&reduced) {
            *d += r;
        }
    }

    /// Materializes a value broadcast to `out_shape`.
    fn broadcast_value(&self, a: Var, out_shape: &[usize]) -> Vec<F> {
        let node = &self.nodes[a.0];
        if node.shape == out_shape {
            return node.value.clone();
        }
        if is_suffix(&node.shape, out_shape) {
            let numel: usize = out_shape.iter().product();
            let mut out = Vec::with_capacity(numel);
            while out.len() < numel {
                out.extend_from_slice(&node.value);
            }
            return out;
        }
        let indexer = BroadcastIndexer::new(&node.shape, out_shape);
        let numel: usize = out_shape.iter().product();
        (0..numel).map(|i| node.value[indexer.map(i)]).collect()
    }
}

// ── Kernel helpers ───────────────────────────────────────────────────

fn ensure<F: Scalar>(slot: &mut Option<Vec<F>>, len: usize) -> &mut [F] {
    slot.get_or_insert_with(|| vec![F::zero(); len]).as_mut_slice()
}

fn accumulate<F: Scalar>(slot: &mut Option<Vec<F>>, delta: &[F], len: usize) {
    let dst = ensure(slot, len);
    for (d, &x) in dst.iter_mut().zip(delta) {
        *d += x;
    }
}

/// C += A @ B with A `[m, k]`, B `[k, n]`, row-major.
fn matmul_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &apv) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += apv * bv;
            }
        }
    }
}

fn softmax_row<F: Scalar>(row: &mut [F]) {
    let mut max = row[0];
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn moments<F: Scalar>(row: &[F], eps: F) -> (F, F) {
    let n = F::cast(row.len() as f64);
    let mean = row.iter().fold(F::zero(), |acc, &x| acc + x) / n;
    let var = row
        .iter()
        .fold(F::zero(), |acc, &x| acc + (x - mean) * (x - mean))
        / n;
    (mean, F::one() / (var + eps).sqrt())
}

fn cosine_parts<F: Scalar>(a: &[F], b: &[F]) -> (F, F, F) {
    let mut na = F::zero();
    let mut nb = F::zero();
    let mut dot = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        na += x * x;
        nb += y * y;
        dot += x * y;
    }
    (na.sqrt(), nb.sqrt(), dot)
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    x * gauss_cdf(x)
}

fn gauss_cdf<F: Scalar>(x: F) -> F {
    let half = F::cast(0.5);
    half * (F::one() + (x / F::cast(std::f64::consts::SQRT_2)).erf())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let pdf = (-(x * x) * F::cast(0.5)).exp() / F::cast((2.0 * std::f64::consts::PI).sqrt());
    gauss_cdf(x) + x * pdf
}

fn sigmoid_stable<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn log_sigmoid_stable<F: Scalar>(x: F) -> F {
    let zero = F::zero();
    let m = if x < zero { x } else { zero };
    m - (-x.abs()).exp().ln_1p()
}

/// Stable `ln sum_{k != i} exp(s_ik / tau)` over row (or column) `i`.
fn lse_excl_diag<F: Scalar>(s: &[F], b: usize, i: usize, tau: F, transposed: bool) -> F {
    let mut max = F::neg_infinity();
    for k in 0..b {
        if k == i {
            continue;
        }
        let v = if transposed { s[k * b + i] } else { s[i * b + k] } / tau;
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for k in 0..b {
        if k == i {
            continue;
        }
        let v = if transposed { s[k * b + i] } else { s[i * b + k] } / tau;
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// For kernel offset `kk` with padding `pad`: output range start, input range
/// start, and overlap length for `y[t] += w * x[t + kk - pad]`.
fn shifted_range(t: usize, kk: usize, pad: usize) -> (usize, usize, usize) {
    if kk >= pad {
        let shift = kk - pad;
        (0, shift, t.saturating_sub(shift))
    } else {
        let shift = pad - kk;
        (shift, 0, t.saturating_sub(shift))
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> crate::Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Maps flat indices in a broadcast output back into a smaller operand.
struct BroadcastIndexer {
    out_shape: Vec<usize>,
    in_strides: Vec<usize>,
}

impl BroadcastIndexer {
    fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let ndim = out_shape.len();
        let mut padded = vec![1usize; ndim];
        padded[ndim - in_shape.len()..].copy_from_slice(in_shape);
        let mut strides = vec![0usize; ndim];
        let mut acc = 1;
        for d in (0..ndim).rev() {
            strides[d] = if padded[d] == 1 { 0 } else { acc };
            acc *= padded[d];
        }
        BroadcastIndexer {
            out_shape: out_shape.to_vec(),
            in_strides: strides,
        }
    }

    fn map(&self, mut flat: usize) -> usize {
        let mut idx = 0;
        for d in (0..self.out_shape.len()).rev() {
            let c = flat % self.out_shape[d];
            flat /= self.out_shape[d];
            idx += c * self.in_strides[d];
        }
        idx
    }
}

/// Sums a gradient over broadcast dimensions back to the operand shape.
fn reduce_to_shape<F: Scalar>(g: &[F], from: &[usize], to: &[usize]) -> Vec<F> {
    if from == to {
        return g.to_vec();
    }
    let to_numel: usize = to.iter().product();
    if is_suffix(to, from) {
        let mut out = vec![F::zero(); to_numel];
        for chunk in g.chunks(to_numel) {
            for (o, &x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        return out;
    }
    let indexer = BroadcastIndexer::new(to, from);
    let mut out = vec![F::zero(); to_numel];
    for (flat, &gv) in g.iter().enumerate() {
        out[indexer.map(flat)] += gv;
    }
    out
}
