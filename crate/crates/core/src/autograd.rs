//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Primitives
//! keep no hidden state: a backward rule reads the recorded parent values and
//! the node's own output, so [`Tape::record`] is the single way a node enters
//! the tape.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{sigmoid, BinaryOp, ReduceOp, Tensor, UnaryOp};

/// Smallest mask value fed to the reciprocal in [`Tape::recip_sigmoid`].
pub const RECIP_FLOOR: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn node_id(&self) -> usize {
        self.id
    }
}

/// A user-defined primitive. Returning `false` from `has_backward` marks the
/// primitive as forward-only; recording it on a differentiable path fails.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    fn has_backward(&self) -> bool {
        true
    }

    /// Gradient for each input, given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

pub enum Primitive {
    Leaf,
    Unary(UnaryOp),
    Binary(BinaryOp),
    MatMul,
    Transpose,
    Reshape,
    Reduce { op: ReduceOp, axes: Vec<usize>, keepdims: bool },
    Concat { axis: usize },
    Conv2d { stride: (usize, usize), padding: (usize, usize) },
    /// Per-channel normalization of `[N,C,H,W]`. `stats: None` uses batch
    /// statistics, otherwise the given (mean, var) per channel.
    BatchNorm { stats: Option<(Vec<f64>, Vec<f64>)>, eps: f64 },
    /// `sigmoid(1 / max(x, RECIP_FLOOR))`.
    RecipSigmoid,
    SoftmaxCrossEntropy { labels: Vec<usize> },
    Custom(Box<dyn CustomOp>),
}

impl Primitive {
    fn arity(&self) -> Option<usize> {
        Some(match self {
            Primitive::Leaf => 0,
            Primitive::Unary(_)
            | Primitive::Transpose
            | Primitive::Reshape
            | Primitive::Reduce { .. }
            | Primitive::RecipSigmoid
            | Primitive::SoftmaxCrossEntropy { .. } => 1,
            Primitive::Binary(_) | Primitive::MatMul | Primitive::Conv2d { .. } => 2,
            Primitive::BatchNorm { .. } => 3,
            Primitive::Concat { .. } | Primitive::Custom(_) => return None,
        })
    }

    pub fn name(&self) -> String {
        match self {
            Primitive::Leaf => "leaf".into(),
            Primitive::Unary(op) => format!("{op:?}").to_lowercase(),
            Primitive::Binary(op) => format!("{op:?}").to_lowercase(),
            Primitive::MatMul => "matmul".into(),
            Primitive::Transpose => "transpose".into(),
            Primitive::Reshape => "reshape".into(),
            Primitive::Reduce { op, .. } => format!("reduce_{op:?}").to_lowercase(),
            Primitive::Concat { .. } => "concat".into(),
            Primitive::Conv2d { .. } => "conv2d".into(),
            Primitive::BatchNorm { .. } => "batch_norm".into(),
            Primitive::RecipSigmoid => "recip_sigmoid".into(),
            Primitive::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy".into(),
            Primitive::Custom(op) => op.name().to_string(),
        }
    }
}

impl fmt::Debug for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

struct Node {
    prim: Primitive,
    parents: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Autograd(format!("variable {} is not on this tape", v.id)));
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Primitive::Leaf, Vec::new(), value, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, prim: Primitive, parents: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { prim, parents, value, requires_grad });
        self.grads.push(None);
        Var { id, tape: self.id }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Accumulated gradient; zeros when nothing reached this variable.
    pub fn grad(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => self.nodes[v.id].value.filled_like(0.0),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Appends a node computed outside the tape. The caller vouches that
    /// `output` is the primitive applied to `inputs`.
    pub fn record(&mut self, prim: Primitive, inputs: &[Var], output: Tensor) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if let Some(n) = prim.arity() {
            if n != inputs.len() {
                return Err(Error::Autograd(format!(
                    "primitive {} takes {n} inputs, got {}",
                    prim.name(),
                    inputs.len()
                )));
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        if let Primitive::Leaf = prim {
            return Err(Error::Autograd("leaves are created with Tape::leaf".into()));
        }
        if let Primitive::Custom(op) = &prim {
            if requires_grad && !op.has_backward() {
                return Err(Error::Autograd(format!(
                    "no backward rule registered for primitive '{}'",
                    op.name()
                )));
            }
        }
        let parents = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(prim, parents, output, requires_grad))
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        self.check(a)?;
        let y = self.value(a).unary(op)?;
        self.record(Primitive::Unary(op), &[a], y)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(k), a)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(UnaryOp::AddScalar(k), a)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let y = self.value(a).binary(op, self.value(b))?;
        self.record(Primitive::Binary(op), &[a, b], y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let y = self.value(a).matmul(self.value(b))?;
        self.record(Primitive::MatMul, &[a, b], y)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let y = self.value(a).transpose2d()?;
        self.record(Primitive::Transpose, &[a], y)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        self.check(a)?;
        let y = self.value(a).reshape(dims)?;
        self.record(Primitive::Reshape, &[a], y)
    }

    pub fn reduce(&mut self, op: ReduceOp, a: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        self.check(a)?;
        let y = self.value(a).reduce(op, axes, keepdims)?;
        self.record(Primitive::Reduce { op, axes: axes.to_vec(), keepdims }, &[a], y)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).shape().rank()).collect();
        self.reduce(ReduceOp::Sum, a, &axes, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).shape().rank()).collect();
        self.reduce(ReduceOp::Mean, a, &axes, false)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat(&values, axis)?;
        self.record(Primitive::Concat { axis }, parts, y)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let g = conv_geometry(self.value(x), self.value(w), stride, padding)?;
        let (ho, wo) = g.output_hw().ok_or_else(|| {
            shape_err!(
                "conv output would be empty: input {} kernel {} stride {stride:?} padding {padding:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )
        })?;
        let data = kernels::conv2d_forward(&g, self.value(x).data(), self.value(w).data());
        let y = Tensor::from_vec(&[g.batch, g.out_channels, ho, wo], data)?;
        self.record(Primitive::Conv2d { stride, padding }, &[x, w], y)
    }

    /// Batch normalization over `[N,C,H,W]`. With `stats = None` the batch
    /// statistics are used and returned as (mean, biased var) per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(Vec<f64>, Vec<f64>)>,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err!("batch norm parameters must have {c} elements"));
        }
        let (mean, var) = match &stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(shape_err!("running statistics must have {c} elements"));
                }
                (m.clone(), v.clone())
            }
            None => {
                if n * h * w < 2 {
                    return Err(Error::InvalidArgument(
                        "batch norm in train mode needs at least 2 values per channel".into(),
                    ));
                }
                channel_stats(xv)
            }
        };
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let hw = h * w;
        let mut out = vec![0.0; xv.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let base = (ni * c + ci) * hw;
                for k in base..base + hw {
                    out[k] = gv[ci] * (xv.data()[k] - mean[ci]) * inv + bv[ci];
                }
            }
        }
        let y = Tensor::from_vec(xv.dims(), out)?;
        let v = self.record(Primitive::BatchNorm { stats, eps }, &[x, gamma, beta], y)?;
        Ok((v, mean, var))
    }

    pub fn recip_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let y = self.value(a).map(|x| sigmoid(1.0 / x.max(RECIP_FLOOR)));
        self.record(Primitive::RecipSigmoid, &[a], y)
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let probs = softmax_rows(self.value(logits), labels)?;
        let (n, k) = (labels.len(), probs.len() / labels.len().max(1));
        let mut loss = 0.0;
        let z = self.value(logits).data();
        for (i, &l) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let y = Tensor::scalar(loss / n as f64);
        self.record(Primitive::SoftmaxCrossEntropy { labels: labels.to_vec() }, &[logits], y)
    }

    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        if self.nodes[root.id].value.numel() != 1 {
            return Err(shape_err!(
                "backward without a seed needs a single-element root, got {}",
                self.nodes[root.id].value.shape()
            ));
        }
        let seed = self.nodes[root.id].value.filled_like(1.0);
        self.backward_with_seed(root, seed)
    }

    /// Propagates `seed` from `root`, adding the result onto existing grads.
    pub fn backward_with_seed(&mut self, root: Var, seed: Tensor) -> Result<()> {
        self.check(root)?;
        if seed.shape() != self.nodes[root.id].value.shape() {
            return Err(shape_err!(
                "seed shape {} differs from root shape {}",
                seed.shape(),
                self.nodes[root.id].value.shape()
            ));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; root.id + 1];
        local[root.id] = Some(seed);
        for i in (0..=root.id).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let parent_grads = self.parent_grads(i, &g)?;
            for (&p, pg) in self.nodes[i].parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if self.nodes[p].requires_grad {
                        accumulate(&mut local[p], pg)?;
                    }
                }
            }
            accumulate(&mut self.grads[i], g)?;
        }
        Ok(())
    }

    fn parent_grads(&self, i: usize, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let node = &self.nodes[i];
        let pv = |k: usize| &self.nodes[node.parents[k]].value;
        let needs = |k: usize| self.nodes[node.parents[k]].requires_grad;
        let y = &node.value;
        Ok(match &node.prim {
            Primitive::Leaf => Vec::new(),
            Primitive::Unary(op) => {
                let x = pv(0);
                let gx = match op {
                    UnaryOp::Neg => g.map(|v| -v),
                    UnaryOp::Relu => g.zip_broadcast(x, |g, x| if x > 0.0 { g } else { 0.0 })?,
                    UnaryOp::Sigmoid => g.zip_broadcast(y, |g, s| g * s * (1.0 - s))?,
                    UnaryOp::Exp => g.mul(y)?,
                    UnaryOp::Log => g.zip_broadcast(x, |g, x| g / x)?,
                    UnaryOp::Scale(k) => g.map(|v| v * k),
                    UnaryOp::AddScalar(_) => g.clone(),
                };
                vec![Some(gx)]
            }
            Primitive::Binary(op) => {
                let (a, b) = (pv(0), pv(1));
                let ga = needs(0).then(|| -> Result<Tensor> {
                    let full = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.clone(),
                        BinaryOp::Mul => g.zip_broadcast(b, |g, b| g * b)?,
                        BinaryOp::Div => g.zip_broadcast(b, |g, b| g / b)?,
                    };
                    full.sum_to_shape(a.shape())
                });
                let gb = needs(1).then(|| -> Result<Tensor> {
                    let full = match op {
                        BinaryOp::Add => g.clone(),
                        BinaryOp::Sub => g.map(|v| -v),
                        BinaryOp::Mul => g.zip_broadcast(a, |g, a| g * a)?,
                        BinaryOp::Div => {
                            let q = g.zip_broadcast(a, |g, a| g * a)?;
                            q.zip_broadcast(b, |q, b| -q / (b * b))?
                        }
                    };
                    full.sum_to_shape(b.shape())
                });
                vec![ga.transpose()?, gb.transpose()?]
            }
            Primitive::MatMul => {
                let (a, b) = (pv(0), pv(1));
                let (m, k) = (a.dims()[0], a.dims()[1]);
                let n = b.dims()[1];
                let ga = needs(0).then(|| {
                    let mut out = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, b.data(), true, &mut out, 0.0);
                    Tensor::from_parts(a.shape().clone(), out)
                });
                let gb = needs(1).then(|| {
                    let mut out = vec![0.0; k * n];
                    kernels::gemm(k, m, n, a.data(), true, g.data(), false, &mut out, 0.0);
                    Tensor::from_parts(b.shape().clone(), out)
                });
                vec![ga, gb]
            }
            Primitive::Transpose => vec![Some(g.transpose2d()?)],
            Primitive::Reshape => vec![Some(g.reshape(pv(0).dims())?)],
            Primitive::Reduce { op, axes, keepdims: _ } => {
                let x = pv(0);
                let mut kept = x.dims().to_vec();
                for &a in axes {
                    kept[a] = 1;
                }
                let gk = g.reshape(&kept)?;
                let gx = match op {
                    ReduceOp::Sum => gk.broadcast_to(x.shape())?,
                    ReduceOp::Mean => {
                        let count = (x.numel() / gk.numel().max(1)) as f64;
                        gk.broadcast_to(x.shape())?.map(|v| v / count)
                    }
                    ReduceOp::Max => {
                        let (_, arg) = x.reduce_with_argmax(ReduceOp::Max, axes, true)?;
                        let mut out = vec![0.0; x.numel()];
                        for (o, &idx) in arg.iter().enumerate() {
                            out[idx] += gk.data()[o];
                        }
                        Tensor::from_parts(x.shape().clone(), out)
                    }
                };
                vec![Some(gx)]
            }
            Primitive::Concat { axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(node.parents.len());
                for k in 0..node.parents.len() {
                    let len = pv(k).dims()[*axis];
                    out.push(if needs(k) { Some(g.slice_axis(*axis, start, len)?) } else { None });
                    start += len;
                }
                out
            }
            Primitive::Conv2d { stride, padding } => {
                let (x, w) = (pv(0), pv(1));
                let geo = conv_geometry(x, w, *stride, *padding)?;
                let (gx, gw) = kernels::conv2d_backward(&geo, x.data(), w.data(), g.data(), needs(0), needs(1));
                vec![
                    gx.map(|d| Tensor::from_parts(x.shape().clone(), d)),
                    gw.map(|d| Tensor::from_parts(w.shape().clone(), d)),
                ]
            }
            Primitive::BatchNorm { stats, eps } => {
                let (x, gamma) = (pv(0), pv(1));
                let (n, c, h, w) = dims4(x)?;
                let hw = h * w;
                let (mean, var) = match stats {
                    Some((m, v)) => (m.clone(), v.clone()),
                    None => channel_stats(x),
                };
                let m_count = (n * hw) as f64;
                let mut gx = vec![0.0; x.numel()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for k in base..base + hw {
                            let xh = (x.data()[k] - mean[ci]) * inv;
                            sum_g += g.data()[k];
                            sum_gx += g.data()[k] * xh;
                        }
                    }
                    gg[ci] = sum_gx;
                    gb[ci] = sum_g;
                    let gam = gamma.data()[ci];
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for k in base..base + hw {
                            gx[k] = if stats.is_some() {
                                g.data()[k] * gam * inv
                            } else {
                                let xh = (x.data()[k] - mean[ci]) * inv;
                                gam * inv / m_count * (m_count * g.data()[k] - sum_g - xh * sum_gx)
                            };
                        }
                    }
                }
                vec![
                    needs(0).then(|| Tensor::from_parts(x.shape().clone(), gx)),
                    needs(1).then(|| Tensor::from_parts(pv(1).shape().clone(), gg)),
                    needs(2).then(|| Tensor::from_parts(pv(2).shape().clone(), gb)),
                ]
            }
            Primitive::RecipSigmoid => {
                let x = pv(0);
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&g, &x), &s)| if x > RECIP_FLOOR { -g * s * (1.0 - s) / (x * x) } else { 0.0 })
                    .collect();
                vec![Some(Tensor::from_parts(x.shape().clone(), gx))]
            }
            Primitive::SoftmaxCrossEntropy { labels } => {
                let z = pv(0);
                let mut p = softmax_rows(z, labels)?;
                let n = labels.len();
                let k = p.len() / n;
                let scale = g.item()? / n as f64;
                for (i, &l) in labels.iter().enumerate() {
                    p[i * k + l] -= 1.0;
                }
                p.iter_mut().for_each(|v| *v *= scale);
                vec![Some(Tensor::from_parts(z.shape().clone(), p))]
            }
            Primitive::Custom(op) => {
                let inputs: Vec<&Tensor> = (0..node.parents.len()).map(pv).collect();
                let grads = op.backward(&inputs, y, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Autograd(format!(
                        "custom primitive '{}' returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (gi, xi) in grads.iter().zip(&inputs) {
                    if gi.shape() != xi.shape() {
                        return Err(shape_err!("custom primitive '{}' gradient shape mismatch", op.name()));
                    }
                }
                grads.into_iter().map(Some).collect()
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(shape_err!("gradient shape {} vs {}", acc.shape(), g.shape()));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}

fn dims4(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match x.dims() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        _ => Err(shape_err!("expected [N,C,H,W], got {}", x.shape())),
    }
}

fn conv_geometry(x: &Tensor, w: &Tensor, stride: (usize, usize), padding: (usize, usize)) -> Result<ConvGeometry> {
    let (n, c, h, wd) = dims4(x)?;
    let (o, ci, kh, kw) = dims4(w)?;
    if c != ci {
        return Err(shape_err!("conv input has {c} channels, kernel expects {ci}"));
    }
    Ok(ConvGeometry {
        batch: n,
        in_channels: c,
        height: h,
        width: wd,
        out_channels: o,
        kernel: (kh, kw),
        stride,
        padding,
    })
}

/// Per-channel mean and biased variance of `[N,C,H,W]`.
pub(crate) fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d = x.dims();
    let (n, c, hw) = (d[0], d[1], d[2] * d[3]);
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            s += x.data()[base..base + hw].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            v += x.data()[base..base + hw].iter().map(|t| (t - m) * (t - m)).sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = v / count;
    }
    (mean, var)
}

fn softmax_rows(z: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, k) = match z.dims() {
        [n, k] => (*n, *k),
        _ => return Err(shape_err!("logits must be [N,K], got {}", z.shape())),
    };
    if n != labels.len() || n == 0 {
        return Err(shape_err!("{} labels for {n} logit rows", labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {k} classes")));
    }
    let mut p = vec![0.0; n * k];
    for i in 0..n {
        let row = &z.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for j in 0..k {
            p[i * k + j] = (row[j] - m).exp();
            s += p[i * k + j];
        }
        for j in 0..k {
            p[i * k + j] /= s;
        }
    }
    Ok(p)
}

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn numeric_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!("function value at coordinate {i}")));
        }
        out[i] = (hi - lo) / (2.0 * eps);
    }
    Tensor::from_vec(x.dims(), out)
}
