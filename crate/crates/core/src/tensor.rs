//! Dense row-major `f64` tensors of rank at most four.
//!
//! Every shape is internally padded to rank four (leading ones) so that
//! broadcasting, reductions and concatenation reduce to fixed four-deep loops
//! with a deterministic visiting order.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, Uniform};

use crate::error::{shape_err, Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(shape_err!("rank {} exceeds the maximum of {MAX_RANK}", dims.len()));
        }
        Ok(Shape(dims.to_vec()))
    }

    /// Builds a shape from signed dimensions, rejecting negatives.
    pub fn from_signed(dims: &[i64]) -> Result<Self> {
        let mut out = Vec::with_capacity(dims.len());
        for &d in dims {
            if d < 0 {
                return Err(shape_err!("negative dimension {d}"));
            }
            out.push(d as usize);
        }
        Shape::new(&out)
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Dimensions left-padded with ones to rank four.
    pub(crate) fn padded(&self) -> [usize; MAX_RANK] {
        let mut out = [1; MAX_RANK];
        let off = MAX_RANK - self.0.len();
        out[off..].copy_from_slice(&self.0);
        out
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

fn padded_strides(dims: &[usize; MAX_RANK]) -> [usize; MAX_RANK] {
    let mut s = [0; MAX_RANK];
    let mut acc = 1;
    for i in (0..MAX_RANK).rev() {
        s[i] = acc;
        acc *= dims[i];
    }
    s
}

/// Strides of `dims` when read as `out`: broadcast (size-1) axes get stride 0.
fn broadcast_strides(dims: &[usize; MAX_RANK], out: &[usize; MAX_RANK]) -> [usize; MAX_RANK] {
    let mut s = padded_strides(dims);
    for i in 0..MAX_RANK {
        if dims[i] == 1 && out[i] != 1 {
            s[i] = 0;
        }
    }
    s
}

/// Trailing-alignment broadcast of two shapes.
pub fn broadcast_shapes(a: &Shape, b: &Shape) -> Result<Shape> {
    let rank = a.rank().max(b.rank());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.rank() { 1 } else { a.0[i - (rank - a.rank())] };
        let db = if i < rank - b.rank() { 1 } else { b.0[i - (rank - b.rank())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a} with {b}")),
        };
    }
    Shape::new(&out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum FillSpec {
    Zeros,
    Constant(f64),
    FromValues(Vec<f64>),
    Random { dist: Distribution, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryOp {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Scale(k) => k * x,
            UnaryOp::AddScalar(k) => x + k,
        }
    }
}

impl BinaryOp {
    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn create(dims: &[usize], fill: FillSpec) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        let data = match fill {
            FillSpec::Zeros => vec![0.0; n],
            FillSpec::Constant(v) => vec![v; n],
            FillSpec::FromValues(values) => {
                if values.len() != n {
                    return Err(shape_err!(
                        "length mismatch: {} values for shape {shape} ({n} elements)",
                        values.len()
                    ));
                }
                values
            }
            FillSpec::Random { dist, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                sample(dist, n, &mut rng)?
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::create(dims, FillSpec::FromValues(data))
    }

    pub fn zeros(dims: &[usize]) -> Result<Tensor> {
        Tensor::create(dims, FillSpec::Zeros)
    }

    pub fn full(dims: &[usize], v: f64) -> Result<Tensor> {
        Tensor::create(dims, FillSpec::Constant(v))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: Shape::scalar(), data: vec![v] }
    }

    pub fn identity(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor { shape: Shape(vec![n, n]), data }
    }

    /// A tensor with the same shape, every element set to `v`.
    pub fn filled_like(&self, v: f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: vec![v; self.data.len()] }
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(shape_err!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Tensor> {
        if op == UnaryOp::Log {
            if let Some(i) = self.data.iter().position(|&v| v <= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "log of non-positive value {} at element {i}",
                    self.data[i]
                )));
            }
        }
        Ok(self.map(|x| op.apply(x)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn binary(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        if op == BinaryOp::Div {
            if let Some(index) = other.data.iter().position(|&v| v == 0.0) {
                return Err(Error::DivisionByZero { index });
            }
        }
        self.zip_broadcast(other, |a, b| op.apply(a, b))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Div, other)
    }

    /// Elementwise `f(a, b)` under trailing-alignment broadcasting.
    pub fn zip_broadcast(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        let out_shape = broadcast_shapes(&self.shape, &other.shape)?;
        let od = out_shape.padded();
        let sa = broadcast_strides(&self.shape.padded(), &od);
        let sb = broadcast_strides(&other.shape.padded(), &od);
        let mut data = Vec::with_capacity(out_shape.numel());
        for i0 in 0..od[0] {
            for i1 in 0..od[1] {
                for i2 in 0..od[2] {
                    let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                    let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                    for i3 in 0..od[3] {
                        data.push(f(self.data[ba + i3 * sa[3]], other.data[bb + i3 * sb[3]]));
                    }
                }
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Materializes this tensor broadcast to `target`.
    pub fn broadcast_to(&self, target: &Shape) -> Result<Tensor> {
        let out = broadcast_shapes(&self.shape, target)?;
        if &out != target {
            return Err(shape_err!("cannot broadcast {} to {target}", self.shape));
        }
        let zeros = Tensor { shape: target.clone(), data: vec![0.0; target.numel()] };
        self.zip_broadcast(&zeros, |a, _| a)
    }

    /// Sums over the axes along which `target` was broadcast to produce `self`.
    /// Adjoint of [`Tensor::broadcast_to`].
    pub fn sum_to_shape(&self, target: &Shape) -> Result<Tensor> {
        if &self.shape == target {
            return Ok(self.clone());
        }
        let check = broadcast_shapes(target, &self.shape)?;
        if check != self.shape {
            return Err(shape_err!("cannot sum {} down to {target}", self.shape));
        }
        let id = self.shape.padded();
        let tp = target.padded();
        let st = broadcast_strides(&tp, &id);
        let mut out = vec![0.0; target.numel()];
        let mut k = 0;
        for i0 in 0..id[0] {
            for i1 in 0..id[1] {
                for i2 in 0..id[2] {
                    let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                    for i3 in 0..id[3] {
                        out[base + i3 * st[3]] += self.data[k];
                        k += 1;
                    }
                }
            }
        }
        Ok(Tensor { shape: target.clone(), data: out })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = match self.dims() {
            [m, k] => (*m, *k),
            _ => return Err(shape_err!("matmul lhs must be rank 2, got {}", self.shape)),
        };
        let (k2, n) = match other.dims() {
            [k2, n] => (*k2, *n),
            _ => return Err(shape_err!("matmul rhs must be rank 2, got {}", other.shape)),
        };
        if k != k2 {
            return Err(shape_err!("matmul inner dims differ: {} x {}", self.shape, other.shape));
        }
        let mut out = vec![0.0; m * n];
        crate::kernels::gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Ok(Tensor { shape: Shape(vec![m, n]), data: out })
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (r, c) = match self.dims() {
            [r, c] => (*r, *c),
            _ => return Err(shape_err!("transpose expects rank 2, got {}", self.shape)),
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: Shape(vec![c, r]), data: out })
    }

    fn reduced_shape(&self, axes: &[usize], keepdims: bool) -> Result<(Shape, [bool; MAX_RANK])> {
        let rank = self.shape.rank();
        let off = MAX_RANK - rank;
        let mut reduced = [false; MAX_RANK];
        for &a in axes {
            if a >= rank {
                return Err(shape_err!("axis {a} out of range for rank {rank}"));
            }
            reduced[off + a] = true;
        }
        let mut dims = Vec::with_capacity(rank);
        for (i, &d) in self.dims().iter().enumerate() {
            if reduced[off + i] {
                if keepdims {
                    dims.push(1);
                }
            } else {
                dims.push(d);
            }
        }
        Ok((Shape(dims), reduced))
    }

    /// Reduction over `axes`. Visits the input in row-major order, so sums have
    /// a fixed accumulation order.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize], keepdims: bool) -> Result<Tensor> {
        Ok(self.reduce_with_argmax(op, axes, keepdims)?.0)
    }

    /// As [`Tensor::reduce`]; for `Max` also returns, per output element, the
    /// flat input index of the first maximal element in row-major order.
    pub(crate) fn reduce_with_argmax(
        &self,
        op: ReduceOp,
        axes: &[usize],
        keepdims: bool,
    ) -> Result<(Tensor, Vec<usize>)> {
        let (out_shape, reduced) = self.reduced_shape(axes, keepdims)?;
        let id = self.shape.padded();
        if id.iter().any(|&d| d == 0) {
            return Err(shape_err!("reduce over empty tensor {}", self.shape));
        }
        let mut od = id;
        for i in 0..MAX_RANK {
            if reduced[i] {
                od[i] = 1;
            }
        }
        let ost = broadcast_strides(&od, &id);
        let n_out = out_shape.numel();
        let count: usize = (0..MAX_RANK).filter(|&i| reduced[i]).map(|i| id[i]).product();
        let mut acc = match op {
            ReduceOp::Max => vec![f64::NEG_INFINITY; n_out],
            _ => vec![0.0; n_out],
        };
        let mut arg = if op == ReduceOp::Max { vec![usize::MAX; n_out] } else { Vec::new() };
        // Mean accumulates deviations from the first element of each group,
        // which keeps the mean of a constant group exact.
        let mut shift = if op == ReduceOp::Mean { vec![f64::NAN; n_out] } else { Vec::new() };
        let mut k = 0;
        for i0 in 0..id[0] {
            for i1 in 0..id[1] {
                for i2 in 0..id[2] {
                    let base = i0 * ost[0] + i1 * ost[1] + i2 * ost[2];
                    for i3 in 0..id[3] {
                        let o = base + i3 * ost[3];
                        let v = self.data[k];
                        match op {
                            ReduceOp::Max => {
                                if arg[o] == usize::MAX || v > acc[o] {
                                    acc[o] = v;
                                    arg[o] = k;
                                }
                            }
                            ReduceOp::Mean => {
                                if shift[o].is_nan() {
                                    shift[o] = v;
                                }
                                acc[o] += v - shift[o];
                            }
                            ReduceOp::Sum => acc[o] += v,
                        }
                        k += 1;
                    }
                }
            }
        }
        if op == ReduceOp::Mean {
            let c = count as f64;
            for (v, s) in acc.iter_mut().zip(&shift) {
                *v = s + *v / c;
            }
        }
        Ok((Tensor { shape: out_shape, data: acc }, arg))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let rank = first.shape.rank();
        if axis >= rank {
            return Err(shape_err!("concat axis {axis} out of range for rank {rank}"));
        }
        let mut total = 0;
        for t in tensors {
            if t.shape.rank() != rank
                || t.dims().iter().zip(first.dims()).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat shape mismatch: {} vs {}", t.shape, first.shape));
            }
            total += t.dims()[axis];
        }
        let mut dims = first.dims().to_vec();
        dims[axis] = total;
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in tensors {
                let chunk = t.dims()[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor { shape: Shape(dims), data })
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape.rank();
        if axis >= rank || start + len > self.dims()[axis] {
            return Err(shape_err!(
                "slice [{start}, {}) on axis {axis} out of range for {}",
                start + len,
                self.shape
            ));
        }
        let size = self.dims()[axis];
        let outer: usize = self.dims()[..axis].iter().product();
        let inner: usize = self.dims()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * size * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut dims = self.dims().to_vec();
        dims[axis] = len;
        Ok(Tensor { shape: Shape(dims), data })
    }

    /// Gathers rows (indices along axis 0).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let n = *self.dims().first().ok_or_else(|| shape_err!("select_rows on a scalar"))?;
        let inner = if n == 0 { 0 } else { self.numel() / n };
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= n {
                return Err(shape_err!("row {r} out of range for {}", self.shape));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut dims = self.dims().to_vec();
        dims[0] = rows.len();
        Ok(Tensor { shape: Shape(dims), data })
    }
}

fn sample(dist: Distribution, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    match dist {
        Distribution::Uniform { low, high } => {
            let u = Uniform::new(low, high)
                .map_err(|e| Error::InvalidArgument(format!("uniform({low}, {high}): {e}")))?;
            Ok((0..n).map(|_| u.sample(rng)).collect())
        }
        Distribution::Normal { mean, std } => {
            let d = Normal::new(mean, std)
                .map_err(|e| Error::InvalidArgument(format!("normal({mean}, {std}): {e}")))?;
            Ok((0..n).map(|_| d.sample(rng)).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(dims, v.to_vec()).unwrap()
    }

    fn rand_t(dims: &[usize], seed: u64) -> Tensor {
        Tensor::create(dims, FillSpec::Random { dist: Distribution::Normal { mean: 0.0, std: 1.0 }, seed })
            .unwrap()
    }

    #[test]
    fn create_variants() {
        assert_eq!(Tensor::create(&[2, 2], FillSpec::Constant(0.0)).unwrap().data(), &[0.0; 4]);
        assert_eq!(t(&[3], &[1.0, 2.0, 3.0]).data(), &[1.0, 2.0, 3.0]);
        assert!(matches!(
            Tensor::create(&[2], FillSpec::FromValues(vec![1.0, 2.0, 3.0])),
            Err(Error::Shape(_))
        ));
        assert!(Shape::from_signed(&[2, -1]).is_err());
        assert!(Tensor::zeros(&[1, 1, 1, 1, 1]).is_err());
        let a = rand_t(&[3, 4], 9);
        let b = rand_t(&[3, 4], 9);
        assert_eq!(a, b);
        assert_eq!(Shape::scalar().numel(), 1);
    }

    #[test]
    fn elementwise_basics() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let b = t(&[3], &[2.0, 2.0, 2.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(t(&[1], &[0.0]).unary(UnaryOp::Sigmoid).unwrap().data(), &[0.5]);
        assert!(matches!(a.div(&t(&[3], &[1.0, 0.0, 1.0])), Err(Error::DivisionByZero { index: 1 })));
        assert!(t(&[1], &[0.0]).unary(UnaryOp::Log).is_err());
        assert!(a.add(&t(&[2], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn per_channel_mask_matches_loop() {
        let x = rand_t(&[2, 3, 4, 4], 1);
        let m = rand_t(&[3, 1, 1], 2);
        let y = x.mul(&m).unwrap();
        assert_eq!(y.dims(), &[2, 3, 4, 4]);
        for n in 0..2 {
            for c in 0..3 {
                for p in 0..16 {
                    let i = (n * 3 + c) * 16 + p;
                    assert_eq!(y.data()[i], x.data()[i] * m.data()[c]);
                }
            }
        }
    }

    #[test]
    fn stable_sigmoid_extremes() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!(sigmoid(-40.0) > 0.0);
    }

    #[test]
    fn matmul_cases() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        assert_eq!(t(&[1, 2], &[1.0, 2.0]).matmul(&t(&[2, 1], &[3.0, 4.0])).unwrap().data(), &[11.0]);
        assert!(a.matmul(&t(&[3, 1], &[1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn reduce_cases() {
        let c = Tensor::full(&[2, 3, 4], 3.5).unwrap();
        for axes in [vec![0], vec![1, 2], vec![0, 1, 2]] {
            for v in c.reduce(ReduceOp::Mean, &axes, false).unwrap().data() {
                assert_eq!(*v, 3.5);
            }
        }
        assert_eq!(t(&[3], &[1.0, 5.0, 2.0]).reduce(ReduceOp::Max, &[0], false).unwrap().data(), &[5.0]);
        let ramp = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(f64::from).collect()).unwrap();
        let m = ramp.reduce(ReduceOp::Mean, &[2, 3], true).unwrap();
        assert_eq!(m.dims(), &[1, 2, 1, 1]);
        for c in 0..2 {
            let mut s = 0.0;
            for k in 0..16 {
                s += ramp.data()[c * 16 + k];
            }
            assert_eq!(m.data()[c], s / 16.0);
        }
        assert!(ramp.reduce(ReduceOp::Sum, &[4], false).is_err());
    }

    #[test]
    fn max_ties_pick_first_index() {
        let x = t(&[4], &[1.0, 7.0, 7.0, 2.0]);
        let (_, arg) = x.reduce_with_argmax(ReduceOp::Max, &[0], false).unwrap();
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn concat_cases() {
        let a = Tensor::full(&[1, 1, 4, 4], 1.0).unwrap();
        let b = Tensor::full(&[1, 1, 4, 4], 2.0).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap().dims(), &[1, 2, 4, 4]);
        let p = t(&[1], &[3.0]);
        let q = t(&[1], &[4.0]);
        assert_eq!(Tensor::concat(&[&p, &q], 0).unwrap().data(), &[3.0, 4.0]);
        assert!(Tensor::concat(&[&a, &t(&[1, 1, 4, 3], &[0.0; 12])], 1).is_err());
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint() {
        // <broadcast(x), y> == <x, sum_to(y)>
        let x = rand_t(&[3, 1], 5);
        let y = rand_t(&[2, 3, 4], 6);
        let bx = x.broadcast_to(y.shape()).unwrap();
        let lhs: f64 = bx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let sy = y.sum_to_shape(x.shape()).unwrap();
        let rhs: f64 = x.data().iter().zip(sy.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..4, 1..=4)
    }

    proptest! {
        #[test]
        fn broadcast_binary_matches_index_oracle(dims in dims_strategy(), mask in prop::collection::vec(any::<bool>(), 4), seed in 0u64..1000) {
            let bdims: Vec<usize> = dims.iter().zip(&mask).map(|(&d, &m)| if m { 1 } else { d }).collect();
            let a = rand_t(&dims, seed);
            let b = rand_t(&bdims, seed + 1).map(|v| v + 3.0 * v.signum() + 0.5);
            let pd = a.shape().padded();
            let pb = b.shape().padded();
            for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
                let y = a.binary(op, &b).unwrap();
                let mut k = 0;
                for i0 in 0..pd[0] { for i1 in 0..pd[1] { for i2 in 0..pd[2] { for i3 in 0..pd[3] {
                    let idx = [i0, i1, i2, i3];
                    let mut bi = 0;
                    for ax in 0..4 {
                        let j = if pb[ax] == 1 { 0 } else { idx[ax] };
                        bi = bi * pb[ax] + j;
                    }
                    prop_assert_eq!(y.data()[k], op.apply(a.data()[k], b.data()[bi]));
                    k += 1;
                }}}}
            }
        }

        #[test]
        fn sigmoid_symmetry_and_range(x in -700.0f64..700.0) {
            let s = sigmoid(x);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!((sigmoid(-x) - (1.0 - s)).abs() <= 1e-15);
        }

        #[test]
        fn mean_of_constant_is_exact(dims in dims_strategy(), v in -1e6f64..1e6) {
            let c = Tensor::full(&dims, v).unwrap();
            let all: Vec<usize> = (0..dims.len()).collect();
            prop_assert_eq!(c.reduce(ReduceOp::Mean, &all, false).unwrap().data()[0], v);
        }

        #[test]
        fn identity_matmul_is_bit_exact(r in 1usize..6, c in 1usize..6, seed in 0u64..100) {
            let a = rand_t(&[r, c], seed);
            prop_assert_eq!(Tensor::identity(r).matmul(&a).unwrap(), a.clone());
            prop_assert_eq!(a.matmul(&Tensor::identity(c)).unwrap(), a);
        }

        #[test]
        fn concat_then_slice_round_trips(n1 in 1usize..4, n2 in 1usize..4, axis in 0usize..3, seed in 0u64..100) {
            let mut d1 = vec![2, 3, 2];
            let mut d2 = d1.clone();
            d1[axis] = n1;
            d2[axis] = n2;
            let a = rand_t(&d1, seed);
            let b = rand_t(&d2, seed + 7);
            let c = Tensor::concat(&[&a, &b], axis).unwrap();
            prop_assert_eq!(c.slice_axis(axis, 0, n1).unwrap(), a);
            prop_assert_eq!(c.slice_axis(axis, n1, n2).unwrap(), b);
        }
    }
}
