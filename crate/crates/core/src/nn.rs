//! Parameterized layers: linear, 2-D convolution, batch normalization, and the
//! global/channel pooling helpers used by the attention blocks.
//!
//! Layers do not own tensors. Their parameters live in a [`ParamStore`] and are
//! addressed by [`ParamId`]; each forward pass binds the whole store onto a
//! fresh tape with [`ParamStore::bind`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{ReduceOp, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamRole {
    /// Only conv/linear weights receive weight decay.
    pub fn decays(self) -> bool {
        self == ParamRole::Weight
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape variables for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps variables that stand for a store's parameters, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Bound {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, role: ParamRole) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param { name: name.to_string(), value, role });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(shape_err!("parameter {} has shape {}, got {}", p.name, p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.param(p.value.clone())).collect())
    }

    pub fn grads(&self, tape: &Tape, bound: &Bound) -> Vec<Tensor> {
        bound.0.iter().map(|&v| tape.grad(v)).collect()
    }
}

/// Deterministic per-parameter generator: the stream depends on the parameter
/// name, so adding a layer never shifts the initialization of the others.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name selects the ChaCha stream.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// He-normal initialization, `N(0, sqrt(2 / fan_in))`.
pub fn he_normal(dims: &[usize], fan_in: usize, seed: u64, name: &str) -> Result<Tensor> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = param_rng(seed, name);
    let n: usize = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| dist.sample(&mut rng)).collect())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        use_bias: bool,
        seed: u64,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let weight = store.add(
            &wname,
            he_normal(&[out_features, in_features], in_features, seed, &wname)?,
            ParamRole::Weight,
        )?;
        let bias = if use_bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[out_features])?, ParamRole::Bias)?)
        } else {
            None
        };
        Ok(Linear { weight, bias, in_features, out_features })
    }

    /// `x W^T + b` for `x` of shape `[n, in]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        match tape.value(x).dims() {
            [_, i] if *i == self.in_features => {}
            d => return Err(shape_err!("linear expects [n, {}], got {d:?}", self.in_features)),
        }
        let wt = tape.transpose(bound.var(self.weight))?;
        let y = tape.matmul(x, wt)?;
        match self.bias {
            Some(b) => tape.add(y, bound.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        use_bias: bool,
        seed: u64,
    ) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument(format!("conv {name}: kernel and stride must be >= 1")));
        }
        let wname = format!("{name}.weight");
        let fan_in = in_channels * kernel.0 * kernel.1;
        let weight = store.add(
            &wname,
            he_normal(&[out_channels, in_channels, kernel.0, kernel.1], fan_in, seed, &wname)?,
            ParamRole::Weight,
        )?;
        let bias = if use_bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[out_channels])?, ParamRole::Bias)?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, in_channels, out_channels, kernel, stride, padding })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, bound.var(self.weight), self.stride, self.padding)?;
        match self.bias {
            Some(b) => {
                let b = tape.reshape(bound.var(b), &[self.out_channels, 1, 1])?;
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0)?, ParamRole::NormScale)?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[channels])?, ParamRole::NormShift)?;
        Ok(BatchNorm2d {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates (unbiased variance); eval mode uses the estimates.
    pub fn forward(&mut self, tape: &mut Tape, bound: &Bound, x: Var, mode: Mode) -> Result<Var> {
        let (g, b) = (bound.var(self.gamma), bound.var(self.beta));
        match mode {
            Mode::Eval => {
                let stats = Some((self.running_mean.clone(), self.running_var.clone()));
                Ok(tape.batch_norm(x, g, b, stats, self.eps)?.0)
            }
            Mode::Train => {
                let d = tape.value(x).dims();
                let count = (d[0] * d[2] * d[3]) as f64;
                let (y, mean, var) = tape.batch_norm(x, g, b, None, self.eps)?;
                let m = self.momentum;
                for c in 0..mean.len() {
                    let unbiased = var[c] * count / (count - 1.0);
                    self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
                    self.running_var[c] = (1.0 - m) * self.running_var[c] + m * unbiased;
                }
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

impl PoolKind {
    fn op(self) -> ReduceOp {
        match self {
            PoolKind::Avg => ReduceOp::Mean,
            PoolKind::Max => ReduceOp::Max,
        }
    }
}

fn require_nchw(tape: &Tape, x: Var) -> Result<()> {
    match tape.value(x).dims() {
        [_, _, h, w] if *h >= 1 && *w >= 1 => Ok(()),
        d => Err(shape_err!("expected non-empty [N,C,H,W], got {d:?}")),
    }
}

/// `[N,C,H,W] -> [N,C,1,1]`.
pub fn global_pool(tape: &mut Tape, kind: PoolKind, x: Var) -> Result<Var> {
    require_nchw(tape, x)?;
    tape.reduce(kind.op(), x, &[2, 3], true)
}

/// `[N,C,H,W] -> [N,1,H,W]`, pooling across channels at each pixel.
pub fn channel_pool(tape: &mut Tape, kind: PoolKind, x: Var) -> Result<Var> {
    require_nchw(tape, x)?;
    tape.reduce(kind.op(), x, &[1], true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Distribution as Dist, FillSpec};

    fn rand_t(dims: &[usize], seed: u64) -> Tensor {
        Tensor::create(dims, FillSpec::Random { dist: Dist::Normal { mean: 0.0, std: 1.0 }, seed }).unwrap()
    }

    #[test]
    fn linear_identity_and_literal() {
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "fc", 3, 3, true, 0).unwrap();
        store.set_value(l.weight, Tensor::identity(3)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(rand_t(&[2, 3], 1));
        let y = l.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "fc", 2, 1, false, 0).unwrap();
        store.set_value(l.weight, Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap());
        let y = l.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let bad = tape.constant(Tensor::zeros(&[1, 3]).unwrap());
        assert!(l.forward(&mut tape, &bound, bad).is_err());
    }

    #[test]
    fn conv_unit_kernel_and_ones_kernel() {
        let mut store = ParamStore::new();
        let c = Conv2d::new(&mut store, "c", 1, 1, (1, 1), (1, 1), (0, 0), false, 0).unwrap();
        store.set_value(c.weight, Tensor::full(&[1, 1, 1, 1], 1.0).unwrap()).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(rand_t(&[1, 1, 5, 5], 3));
        let y = c.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let mut store = ParamStore::new();
        let c = Conv2d::new(&mut store, "c", 1, 1, (3, 3), (1, 1), (1, 1), false, 0).unwrap();
        store.set_value(c.weight, Tensor::full(&[1, 1, 3, 3], 1.0).unwrap()).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0).unwrap());
        let y = c.forward(&mut tape, &bound, x).unwrap();
        #[rustfmt::skip]
        let expect = [4.0, 6.0, 6.0, 4.0,
                      6.0, 9.0, 9.0, 6.0,
                      6.0, 9.0, 9.0, 6.0,
                      4.0, 6.0, 6.0, 4.0];
        assert_eq!(tape.value(y).data(), &expect);
    }

    #[test]
    fn odd_kernels_preserve_size() {
        for k in [1usize, 3, 5, 7] {
            let mut store = ParamStore::new();
            let c = Conv2d::new(&mut store, "c", 2, 1, (k, k), (1, 1), ((k - 1) / 2, (k - 1) / 2), true, 0).unwrap();
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = tape.constant(rand_t(&[1, 2, 9, 6], 4));
            let y = c.forward(&mut tape, &bound, x).unwrap();
            assert_eq!(tape.value(y).dims(), &[1, 1, 9, 6]);
        }
    }

    #[test]
    fn conv_empty_output_rejected() {
        let mut store = ParamStore::new();
        let c = Conv2d::new(&mut store, "c", 1, 1, (5, 5), (1, 1), (0, 0), false, 0).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 3]).unwrap());
        assert!(c.forward(&mut tape, &bound, x).is_err());
    }

    #[test]
    fn pooling_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 4], 2.5).unwrap());
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let y = global_pool(&mut tape, kind, x).unwrap();
            assert_eq!(tape.value(y).dims(), &[2, 3, 1, 1]);
            assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
        }
        let x = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = global_pool(&mut tape, PoolKind::Avg, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let plane = rand_t(&[1, 1, 3, 3], 8);
        let x = tape.constant(plane.clone());
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let y = channel_pool(&mut tape, kind, x).unwrap();
            assert_eq!(tape.value(y), &plane);
        }
        let neg = plane.map(|v| -v);
        let x = tape.constant(Tensor::concat(&[&plane, &neg], 1).unwrap());
        let y = channel_pool(&mut tape, PoolKind::Avg, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_pool_gradient_goes_to_first_argmax() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 4.0, 4.0, 0.0]).unwrap());
        let y = global_pool(&mut tape, PoolKind::Max, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn channel_avg_times_c_is_channel_sum() {
        let x = rand_t(&[2, 5, 3, 3], 11);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let avg = channel_pool(&mut tape, PoolKind::Avg, v).unwrap();
        let scaled = tape.value(avg).map(|a| a * 5.0);
        let sum = x.reduce(ReduceOp::Sum, &[1], true).unwrap();
        assert!(scaled.max_abs_diff(&sum) < 1e-12);
    }

    #[test]
    fn batchnorm_eval_identity_and_train_statistics() {
        let mut store = ParamStore::new();
        let mut bn = BatchNorm2d::new(&mut store, "bn", 3).unwrap();
        let x = rand_t(&[4, 3, 5, 5], 21).map(|v| 3.0 * v + 1.5);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = bn.forward(&mut tape, &bound, xv, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
        assert!(tape.value(y).max_abs_diff(&x) < 1e-4 * 10.0);

        bn.eps = 1e-14;
        let y = bn.forward(&mut tape, &bound, xv, Mode::Train).unwrap();
        let (mean, var) = crate::autograd::channel_stats(tape.value(y));
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-10);
            assert!((var[c] - 1.0).abs() < 1e-10);
        }
        // running statistics moved towards the batch statistics
        assert!(bn.running_mean.iter().all(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_train_needs_two_values() {
        let mut store = ParamStore::new();
        let mut bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]).unwrap());
        assert!(bn.forward(&mut tape, &bound, x, Mode::Train).is_err());
    }

    #[test]
    fn init_is_name_keyed_and_deterministic() {
        let a = he_normal(&[4, 4], 4, 7, "a.weight").unwrap();
        let b = he_normal(&[4, 4], 4, 7, "a.weight").unwrap();
        let c = he_normal(&[4, 4], 4, 7, "b.weight").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
