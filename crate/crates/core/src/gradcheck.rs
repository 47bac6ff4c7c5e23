//! Backward rules versus central finite differences.
//!
//! Each case evaluates `L = sum(out * R)` for a fixed random `R`, seeds the
//! backward pass with `R`, and compares every input gradient against
//! [`numeric_grad`]. The error of one element is
//! `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{CbamBlock, InversionKind, MaskMode, SeBlock};
use crate::autograd::{numeric_grad, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, StageSpec};
use crate::nn::{channel_pool, global_pool, BatchNorm2d, Bound, Conv2d, Linear, Mode, ParamStore, PoolKind};
use crate::tensor::{BinaryOp, Distribution as Dist, FillSpec, ReduceOp, Tensor, UnaryOp};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-5;
pub const SHAPES_PER_CASE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Primitive,
    Block,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Primitive => "primitive",
            Group::Block => "block",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub group: Group,
    pub shapes: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Largest element error over all inputs of `f`.
pub fn max_rel_error(inputs: &[Tensor], f: &mut dyn FnMut(&mut Tape, &[Var]) -> Result<Var>, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let r = Tensor::create(tape.value(out).dims(), FillSpec::Random { dist: Dist::Normal { mean: 0.0, std: 1.0 }, seed })?;
    tape.backward_with_seed(out, r.clone())?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = numeric_grad(
            |x| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.constant(if j == i { x.clone() } else { v.clone() }))
                    .collect();
                let o = f(&mut t, &vs)?;
                Ok(t.value(o).data().iter().zip(r.data()).map(|(p, q)| p * q).sum())
            },
            &inputs[i],
            EPS,
        )?;
        worst = worst.max(rel_error(a, &numeric));
    }
    Ok(worst)
}

type Runner = Box<dyn Fn(usize, &mut ChaCha8Rng) -> Result<f64>>;

pub struct Case {
    pub name: String,
    pub group: Group,
    run: Runner,
}

impl Case {
    fn new(name: &str, group: Group, run: impl Fn(usize, &mut ChaCha8Rng) -> Result<f64> + 'static) -> Self {
        Case { name: name.to_string(), group, run: Box::new(run) }
    }

    pub fn check(&self, seed: u64) -> Result<CheckResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for s in 0..SHAPES_PER_CASE {
            let e = (self.run)(s, &mut rng).map_err(|e| Error::Autograd(format!("{} (shape {s}): {e}", self.name)))?;
            worst = worst.max(e);
        }
        Ok(CheckResult { name: self.name.clone(), group: self.group, shapes: SHAPES_PER_CASE, max_rel_err: worst })
    }
}

fn normal(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Normal values pushed at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize], gap: f64) -> Tensor {
    normal(rng, dims).map(|v| if v.abs() < gap { gap.copysign(v) + v } else { v })
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Distinct values spaced well beyond the finite-difference step.
fn distinct(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    v.shuffle(rng);
    Tensor::from_vec(dims, v).unwrap()
}

const SHAPES: [&[usize]; 5] = [&[3], &[2, 3], &[2, 3, 4], &[1, 2, 3, 2], &[2, 2, 2, 3]];
const BLOCK_SHAPES: [[usize; 4]; 5] = [[2, 4, 3, 3], [1, 8, 4, 4], [2, 6, 2, 5], [3, 4, 1, 1], [2, 5, 3, 2]];

fn unary_case(name: &str, op: UnaryOp, gen: fn(&mut ChaCha8Rng, &[usize]) -> Tensor) -> Case {
    Case::new(name, Group::Primitive, move |s, rng| {
        let x = gen(rng, SHAPES[s]);
        max_rel_error(&[x], &mut |t, v| t.unary(op, v[0]), rng.random())
    })
}

fn binary_case(name: &str, op: BinaryOp) -> Case {
    const PAIRS: [(&[usize], &[usize]); 5] =
        [(&[2, 3], &[2, 3]), (&[2, 3], &[3]), (&[2, 3, 4], &[3, 1]), (&[2, 3, 2, 2], &[3, 1, 1]), (&[1], &[4])];
    Case::new(name, Group::Primitive, move |s, rng| {
        let (da, db) = PAIRS[s];
        let a = normal(rng, da);
        let b = if op == BinaryOp::Div { uniform(rng, db, 0.5, 2.0) } else { normal(rng, db) };
        max_rel_error(&[a, b], &mut |t, v| t.binary(op, v[0], v[1]), rng.random())
    })
}

fn reduce_case(name: &str, op: ReduceOp) -> Case {
    const SPECS: [(&[usize], &[usize], bool); 5] = [
        (&[5], &[0], false),
        (&[2, 3], &[1], true),
        (&[2, 3, 4], &[0, 2], false),
        (&[2, 3, 2, 2], &[2, 3], true),
        (&[2, 2, 3, 2], &[1], false),
    ];
    Case::new(name, Group::Primitive, move |s, rng| {
        let (dims, axes, keep) = SPECS[s];
        let x = if op == ReduceOp::Max { distinct(rng, dims) } else { normal(rng, dims) };
        max_rel_error(&[x], &mut |t, v| t.reduce(op, v[0], axes, keep), rng.random())
    })
}

fn primitive_cases() -> Vec<Case> {
    let mut cases = vec![
        unary_case("neg", UnaryOp::Neg, normal),
        unary_case("relu", UnaryOp::Relu, |r, d| away_from_zero(r, d, 0.05)),
        unary_case("sigmoid", UnaryOp::Sigmoid, normal),
        unary_case("exp", UnaryOp::Exp, normal),
        unary_case("log", UnaryOp::Log, |r, d| uniform(r, d, 0.2, 3.0)),
        unary_case("scale", UnaryOp::Scale(-1.7), normal),
        unary_case("add_scalar", UnaryOp::AddScalar(0.3), normal),
        binary_case("add", BinaryOp::Add),
        binary_case("sub", BinaryOp::Sub),
        binary_case("mul", BinaryOp::Mul),
        binary_case("div", BinaryOp::Div),
        reduce_case("sum", ReduceOp::Sum),
        reduce_case("mean", ReduceOp::Mean),
        reduce_case("max", ReduceOp::Max),
    ];
    cases.push(Case::new("matmul", Group::Primitive, |s, rng| {
        let (m, k, n) = [(1, 1, 1), (2, 3, 4), (4, 2, 3), (3, 5, 1), (5, 4, 6)][s];
        let a = normal(rng, &[m, k]);
        let b = normal(rng, &[k, n]);
        max_rel_error(&[a, b], &mut |t, v| t.matmul(v[0], v[1]), rng.random())
    }));
    cases.push(Case::new("transpose", Group::Primitive, |s, rng| {
        let d = [[1, 1], [2, 3], [3, 2], [4, 1], [3, 5]][s];
        let x = normal(rng, &d);
        max_rel_error(&[x], &mut |t, v| t.transpose(v[0]), rng.random())
    }));
    cases.push(Case::new("reshape", Group::Primitive, |s, rng| {
        const SPECS: [(&[usize], &[usize]); 5] =
            [(&[6], &[2, 3]), (&[2, 3], &[3, 2]), (&[2, 3, 4], &[4, 6]), (&[1, 2, 3, 2], &[12]), (&[4, 3], &[2, 2, 3, 1])];
        let (from, to) = SPECS[s];
        let x = normal(rng, from);
        max_rel_error(&[x], &mut |t, v| t.reshape(v[0], to), rng.random())
    }));
    cases.push(Case::new("concat", Group::Primitive, |s, rng| {
        const SPECS: [(&[usize], &[usize], usize); 5] = [
            (&[2], &[3], 0),
            (&[2, 3], &[1, 3], 0),
            (&[2, 3], &[2, 2], 1),
            (&[2, 1, 2, 2], &[2, 3, 2, 2], 1),
            (&[1, 2, 3, 2], &[1, 2, 3, 1], 3),
        ];
        let (a, b, axis) = SPECS[s];
        let x = normal(rng, a);
        let y = normal(rng, b);
        max_rel_error(&[x, y], &mut |t, v| t.concat(&[v[0], v[1]], axis), rng.random())
    }));
    cases.push(Case::new("conv2d", Group::Primitive, |s, rng| {
        let (x, w, stride, pad): ([usize; 4], [usize; 4], (usize, usize), (usize, usize)) = [
            ([1, 1, 4, 4], [1, 1, 3, 3], (1, 1), (0, 0)),
            ([2, 2, 5, 5], [3, 2, 3, 3], (1, 1), (1, 1)),
            ([1, 3, 6, 5], [2, 3, 3, 3], (2, 2), (1, 1)),
            ([2, 2, 4, 4], [2, 2, 1, 1], (2, 1), (0, 0)),
            ([1, 2, 5, 6], [2, 2, 3, 1], (1, 2), (1, 0)),
        ][s];
        let xv = normal(rng, &x);
        let wv = normal(rng, &w);
        max_rel_error(&[xv, wv], &mut |t, v| t.conv2d(v[0], v[1], stride, pad), rng.random())
    }));
    cases.push(Case::new("batch_norm", Group::Primitive, |s, rng| {
        let d = BLOCK_SHAPES[s];
        let x = normal(rng, &d);
        let g = uniform(rng, &[d[1]], 0.5, 1.5);
        let b = normal(rng, &[d[1]]);
        max_rel_error(&[x, g, b], &mut |t, v| Ok(t.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0), rng.random())
    }));
    cases.push(Case::new("recip_sigmoid", Group::Primitive, |s, rng| {
        let x = uniform(rng, SHAPES[s], 0.05, 1.0);
        max_rel_error(&[x], &mut |t, v| t.recip_sigmoid(v[0]), rng.random())
    }));
    cases.push(Case::new("softmax_cross_entropy", Group::Primitive, |s, rng| {
        let (n, k) = [(1, 2), (2, 3), (3, 5), (4, 10), (2, 7)][s];
        let z = normal(rng, &[n, k]).map(|v| 3.0 * v);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        max_rel_error(&[z], &mut |t, v| t.softmax_cross_entropy(v[0], &labels), rng.random())
    }));
    cases
}

/// Checks `forward` against gradients of its input and of every parameter
/// in `store`.
fn block_error(
    store: &ParamStore,
    x: Tensor,
    seed: u64,
    forward: &mut dyn FnMut(&mut Tape, &Bound, Var) -> Result<Var>,
) -> Result<f64> {
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|p| p.value.clone()));
    max_rel_error(&inputs, &mut |t, v| forward(t, &Bound::from_vars(v[1..].to_vec()), v[0]), seed)
}

fn se_case(name: &str, mode: MaskMode) -> Case {
    Case::new(name, Group::Block, move |s, rng| {
        let d = BLOCK_SHAPES[s];
        let mut store = ParamStore::new();
        let block = SeBlock::new(&mut store, "se", d[1], 2, s % 2 == 1, mode, rng.random())?;
        let x = normal(rng, &d);
        block_error(&store, x, rng.random(), &mut |t, b, x| Ok(block.apply(t, b, x)?.output))
    })
}

#[derive(Clone, Copy)]
enum CbamPart {
    Channel,
    Spatial,
    Full,
}

fn cbam_case(name: &str, mode: MaskMode, part: CbamPart) -> Case {
    Case::new(name, Group::Block, move |s, rng| {
        let d = BLOCK_SHAPES[s];
        let mut store = ParamStore::new();
        let block = CbamBlock::new(&mut store, "cbam", d[1], 2, s % 2 == 1, mode, rng.random())?;
        let x = normal(rng, &d);
        block_error(&store, x, rng.random(), &mut |t, b, x| match part {
            CbamPart::Channel => {
                let m = block.channel_mask(t, b, x)?;
                t.mul(x, m.mask)
            }
            CbamPart::Spatial => {
                let m = block.spatial_mask(t, b, x)?;
                t.mul(x, m.mask)
            }
            CbamPart::Full => Ok(block.apply(t, b, x)?.output),
        })
    })
}

fn pool_case(name: &str, channel: bool, kind: PoolKind) -> Case {
    Case::new(name, Group::Block, move |s, rng| {
        let d = BLOCK_SHAPES[s];
        let x = if kind == PoolKind::Max { distinct(rng, &d) } else { normal(rng, &d) };
        let store = ParamStore::new();
        block_error(&store, x, rng.random(), &mut |t, _, x| {
            if channel {
                channel_pool(t, kind, x)
            } else {
                global_pool(t, kind, x)
            }
        })
    })
}

fn block_cases() -> Vec<Case> {
    let t1 = |a: f64| MaskMode::Ignore(InversionKind::T1 { alpha: a });
    let t2 = MaskMode::Ignore(InversionKind::T2);
    let t3 = MaskMode::Ignore(InversionKind::T3);
    let mut cases = vec![
        Case::new("linear", Group::Block, |s, rng| {
            let (n, i, o) = [(1, 1, 1), (2, 3, 4), (3, 5, 2), (4, 2, 6), (2, 7, 3)][s];
            let mut store = ParamStore::new();
            let lin = Linear::new(&mut store, "fc", i, o, s % 2 == 0, rng.random())?;
            let x = normal(rng, &[n, i]);
            block_error(&store, x, rng.random(), &mut |t, b, x| lin.forward(t, b, x))
        }),
        Case::new("conv_layer", Group::Block, |s, rng| {
            let d = BLOCK_SHAPES[s];
            let mut store = ParamStore::new();
            let k = [3, 1, 3, 1, 3][s];
            let conv = Conv2d::new(&mut store, "conv", d[1], 3, (k, k), (1 + s % 2, 1), (k / 2, k / 2), true, rng.random())?;
            let x = normal(rng, &d);
            block_error(&store, x, rng.random(), &mut |t, b, x| conv.forward(t, b, x))
        }),
        Case::new("batchnorm_train", Group::Block, |s, rng| {
            let d = BLOCK_SHAPES[s];
            let mut store = ParamStore::new();
            let mut bn = BatchNorm2d::new(&mut store, "bn", d[1])?;
            let x = normal(rng, &d);
            block_error(&store, x, rng.random(), &mut |t, b, x| bn.forward(t, b, x, Mode::Train))
        }),
        Case::new("batchnorm_eval", Group::Block, |s, rng| {
            let d = BLOCK_SHAPES[s];
            let mut store = ParamStore::new();
            let mut bn = BatchNorm2d::new(&mut store, "bn", d[1])?;
            bn.running_mean = normal(rng, &[d[1]]).into_data();
            bn.running_var = uniform(rng, &[d[1]], 0.5, 2.0).into_data();
            let x = normal(rng, &d);
            block_error(&store, x, rng.random(), &mut |t, b, x| bn.forward(t, b, x, Mode::Eval))
        }),
        pool_case("global_avg_pool", false, PoolKind::Avg),
        pool_case("global_max_pool", false, PoolKind::Max),
        pool_case("channel_avg_pool", true, PoolKind::Avg),
        pool_case("channel_max_pool", true, PoolKind::Max),
        se_case("se", MaskMode::Attend),
        se_case("se-ign1", t1(0.5)),
        se_case("se-ign2", t2),
        se_case("se-ign3", t3),
        cbam_case("cbam-channel", MaskMode::Attend, CbamPart::Channel),
        cbam_case("cbam-spatial", MaskMode::Attend, CbamPart::Spatial),
        cbam_case("cbam", MaskMode::Attend, CbamPart::Full),
    ];
    for (name, mode) in [("cbam-ign1", t1(0.5)), ("cbam-ign2", t2), ("cbam-ign3", t3)] {
        cases.push(cbam_case(&format!("{name}-channel"), mode, CbamPart::Channel));
        cases.push(cbam_case(&format!("{name}-spatial"), mode, CbamPart::Spatial));
        cases.push(cbam_case(name, mode, CbamPart::Full));
    }
    cases.push(Case::new("mini-net", Group::Block, |s, rng| {
        let attention = ["none", "se", "cbam-ign1:alpha=0.5", "se-ign2", "cbam-ign3"][s];
        let cfg = ModelConfig {
            stem_channels: 4,
            stages: vec![StageSpec { blocks: 1, channels: 4, stride: 1 }, StageSpec { blocks: 1, channels: 6, stride: 2 }],
            attention: attention.parse()?,
            num_classes: 3,
            input_shape: [2, 4, 4],
            reduction: 2,
            bottleneck_bias: false,
        };
        let mut model = Model::build(cfg, rng.random())?;
        let x = normal(rng, &[2, 2, 4, 4]);
        let store = model.params().clone();
        block_error(&store, x, rng.random(), &mut |t, b, x| Ok(model.forward_with(t, b.clone(), x, Mode::Train)?.logits))
    }));
    cases
}

pub fn all_cases() -> Vec<Case> {
    let mut c = primitive_cases();
    c.extend(block_cases());
    c
}

/// Runs the cases selected by `scope`: `all`, `primitives`, `blocks`, or a
/// case name. Names ending in `*` select by prefix.
pub fn run(scope: &str, seed: u64) -> Result<Vec<CheckResult>> {
    let cases = all_cases();
    let selected: Vec<&Case> = cases
        .iter()
        .filter(|c| match scope {
            "all" => true,
            "primitives" => c.group == Group::Primitive,
            "blocks" => c.group == Group::Block,
            s => match s.strip_suffix('*') {
                Some(p) => c.name.starts_with(p),
                None => c.name == s,
            },
        })
        .collect();
    if selected.is_empty() {
        let names: Vec<&str> = cases.iter().map(|c| c.name.as_str()).collect();
        return Err(Error::InvalidArgument(format!(
            "unknown gradcheck scope '{scope}'; use all, primitives, blocks or one of: {}",
            names.join(", ")
        )));
    }
    selected.iter().map(|c| c.check(seed)).collect()
}
