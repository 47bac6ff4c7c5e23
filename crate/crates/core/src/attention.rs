//! Explicit attention (SE, CBAM) and ignoring attention built from inversion
//! functions.
//!
//! An explicit block computes an attention mask `f(F)` and returns `F * f(F)`.
//! An ignoring block computes the same network output but reads it as an
//! *ignoring* mask `g(F)` (high = suppress) and returns `F * T(g(F))`, where
//! `T` is one of three monotone non-increasing maps onto `[0, 1]`:
//!
//! * `T1(x) = 1 - alpha * x`, applied to the post-sigmoid mask;
//! * `T2(x) = sigmoid(1 / x)`, applied to the post-sigmoid mask, with
//!   `T2(0) = 1` (the right limit);
//! * `T3(z) = sigmoid(-z)`, applied to the pre-sigmoid logits `z`.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var, RECIP_FLOOR};
use crate::error::{shape_err, Error, Result};
use crate::nn::{channel_pool, global_pool, Bound, Conv2d, Linear, ParamStore, PoolKind};
use crate::tensor::{sigmoid, Tensor};

/// Tolerance on mask inputs to [`invert`] outside `[0, 1]`.
pub const MASK_RANGE_TOL: f64 = 1e-12;

pub const DEFAULT_REDUCTION: usize = 16;
/// Narrowest bottleneck the reduction ratio is clamped to.
pub const MIN_HIDDEN: usize = 4;
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InversionKind {
    T1 { alpha: f64 },
    T2,
    T3,
}

impl InversionKind {
    pub fn t1(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(InversionKind::T1 { alpha })
    }

    /// Scalar inversion. `x` is the post-sigmoid mask for T1/T2 and the
    /// pre-sigmoid logit for T3.
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            InversionKind::T1 { alpha } => 1.0 - alpha * x,
            InversionKind::T2 => sigmoid(1.0 / x.max(RECIP_FLOOR)),
            InversionKind::T3 => sigmoid(-x),
        }
    }

    pub fn uses_logits(self) -> bool {
        matches!(self, InversionKind::T3)
    }
}

/// Tensor-level inversion. T1/T2 read `mask` (validated to lie in `[0, 1]`);
/// T3 reads `logits`, which must then be provided.
pub fn invert(kind: InversionKind, mask: &Tensor, logits: Option<&Tensor>) -> Result<Tensor> {
    if kind.uses_logits() {
        let z = logits.ok_or_else(|| Error::InvalidArgument("T3 needs pre-sigmoid logits".into()))?;
        return Ok(z.map(|v| kind.apply_scalar(v)));
    }
    if let Some((i, v)) =
        mask.data().iter().enumerate().find(|(_, &v)| !(-MASK_RANGE_TOL..=1.0 + MASK_RANGE_TOL).contains(&v))
    {
        return Err(Error::InvalidArgument(format!("mask value {v} at element {i} lies outside [0, 1]")));
    }
    Ok(mask.map(|v| kind.apply_scalar(v.clamp(0.0, 1.0))))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    Attend,
    Ignore(InversionKind),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionMode {
    None,
    Se(MaskMode),
    Cbam(MaskMode),
}

pub const ATTENTION_NAMES: [&str; 9] =
    ["none", "se", "se-ign1", "se-ign2", "se-ign3", "cbam", "cbam-ign1", "cbam-ign2", "cbam-ign3"];

impl AttentionMode {
    /// Every mode, with `alpha` used for the T1 variants.
    pub fn all(alpha: f64) -> Vec<AttentionMode> {
        let mut out = vec![AttentionMode::None];
        for wrap in [AttentionMode::Se as fn(MaskMode) -> AttentionMode, AttentionMode::Cbam] {
            out.push(wrap(MaskMode::Attend));
            out.push(wrap(MaskMode::Ignore(InversionKind::T1 { alpha })));
            out.push(wrap(MaskMode::Ignore(InversionKind::T2)));
            out.push(wrap(MaskMode::Ignore(InversionKind::T3)));
        }
        out
    }

    pub fn mask_mode(self) -> Option<MaskMode> {
        match self {
            AttentionMode::None => None,
            AttentionMode::Se(m) | AttentionMode::Cbam(m) => Some(m),
        }
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    /// Grammar: `name[:alpha=v]`; `alpha` is only accepted by the `*-ign1`
    /// modes and defaults to 1.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, opts) = match s.split_once(':') {
            Some((n, o)) => (n.trim(), Some(o.trim())),
            None => (s, None),
        };
        let alpha = match opts {
            None => None,
            Some(o) => {
                let v = o
                    .strip_prefix("alpha=")
                    .ok_or_else(|| Error::Config(format!("unknown attention option '{o}' (expected alpha=<v>)")))?;
                Some(v.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad alpha '{v}': {e}")))?)
            }
        };
        let kind = |suffix: &str| -> Result<MaskMode> {
            Ok(match suffix {
                "" => MaskMode::Attend,
                "-ign1" => MaskMode::Ignore(InversionKind::t1(alpha.unwrap_or(1.0)).map_err(|e| Error::Config(e.to_string()))?),
                "-ign2" => MaskMode::Ignore(InversionKind::T2),
                "-ign3" => MaskMode::Ignore(InversionKind::T3),
                _ => unreachable!(),
            })
        };
        if alpha.is_some() && !name.ends_with("-ign1") {
            return Err(Error::Config(format!("attention mode '{name}' takes no alpha")));
        }
        let mode = match name {
            "none" => AttentionMode::None,
            "se" | "se-ign1" | "se-ign2" | "se-ign3" => AttentionMode::Se(kind(&name[2..])?),
            "cbam" | "cbam-ign1" | "cbam-ign2" | "cbam-ign3" => AttentionMode::Cbam(kind(&name[4..])?),
            _ => {
                return Err(Error::Config(format!(
                    "unknown attention mode '{name}'; expected one of: {}",
                    ATTENTION_NAMES.join(", ")
                )))
            }
        };
        Ok(mode)
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (family, mode) = match self {
            AttentionMode::None => return f.write_str("none"),
            AttentionMode::Se(m) => ("se", m),
            AttentionMode::Cbam(m) => ("cbam", m),
        };
        match mode {
            MaskMode::Attend => f.write_str(family),
            MaskMode::Ignore(InversionKind::T1 { alpha }) => write!(f, "{family}-ign1:alpha={alpha}"),
            MaskMode::Ignore(InversionKind::T2) => write!(f, "{family}-ign2"),
            MaskMode::Ignore(InversionKind::T3) => write!(f, "{family}-ign3"),
        }
    }
}

/// Bottleneck width for `channels` under reduction ratio `reduction`.
///
/// The ratio is lowered to the largest divisor of `channels` that keeps at
/// least `MIN_HIDDEN` hidden units (or all of them for very narrow inputs).
pub fn bottleneck_width(channels: usize, reduction: usize) -> Result<usize> {
    if channels == 0 || reduction == 0 {
        return Err(Error::InvalidArgument("channels and reduction must be >= 1".into()));
    }
    let floor = MIN_HIDDEN.min(channels);
    let r = (1..=reduction.min(channels))
        .rev()
        .find(|&r| channels % r == 0 && channels / r >= floor)
        .unwrap_or(1);
    Ok(channels / r)
}

/// A block's multiplicative mask plus the raw sigmoid response behind it.
///
/// For explicit attention `response == mask`. For ignoring modes `response`
/// is the ignoring mask `g = sigmoid(z)` before inversion (for T3 it is
/// computed alongside, it is not on the mask's path).
#[derive(Clone, Copy, Debug)]
pub struct MaskOutput {
    pub logits: Var,
    pub mask: Var,
    pub response: Var,
}

pub fn mask_from_logits(tape: &mut Tape, mode: MaskMode, z: Var) -> Result<MaskOutput> {
    let s = tape.sigmoid(z)?;
    let mask = match mode {
        MaskMode::Attend => s,
        MaskMode::Ignore(InversionKind::T1 { alpha }) => {
            let scaled = tape.scale(s, -alpha)?;
            tape.add_scalar(scaled, 1.0)?
        }
        MaskMode::Ignore(InversionKind::T2) => tape.recip_sigmoid(s)?,
        MaskMode::Ignore(InversionKind::T3) => {
            let nz = tape.neg(z)?;
            tape.sigmoid(nz)?
        }
    };
    Ok(MaskOutput { logits: z, mask, response: s })
}

fn channels_of(tape: &Tape, f: Var) -> Result<(usize, usize, usize, usize)> {
    match tape.value(f).dims() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        d => Err(shape_err!("attention input must be [N,C,H,W], got {d:?}")),
    }
}

/// Two-layer bottleneck `W2 relu(W1 x)` on `[N,C]` descriptors.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Bottleneck {
    fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, bias: bool, seed: u64) -> Result<Self> {
        Ok(Bottleneck {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, bias, seed)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, bias, seed)?,
        })
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, bound, x)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, bound, h)
    }
}

#[derive(Clone, Debug)]
pub struct SeBlock {
    pub mlp: Bottleneck,
    pub channels: usize,
    pub hidden: usize,
    pub mode: MaskMode,
}

#[derive(Clone, Copy, Debug)]
pub struct SeOutput {
    pub output: Var,
    pub mask: MaskOutput,
}

impl SeBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        bias: bool,
        mode: MaskMode,
        seed: u64,
    ) -> Result<Self> {
        let hidden = bottleneck_width(channels, reduction)?;
        Ok(SeBlock { mlp: Bottleneck::new(store, name, channels, hidden, bias, seed)?, channels, hidden, mode })
    }

    /// Channel mask `[N,C,1,1]` from `z = W2 relu(W1 GAP(F))`.
    pub fn mask(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<MaskOutput> {
        let (n, c, _, _) = channels_of(tape, f)?;
        if c != self.channels {
            return Err(shape_err!("SE block built for {} channels, got {c}", self.channels));
        }
        let pooled = global_pool(tape, PoolKind::Avg, f)?;
        let pooled = tape.reshape(pooled, &[n, c])?;
        let z = self.mlp.forward(tape, bound, pooled)?;
        let z = tape.reshape(z, &[n, c, 1, 1])?;
        mask_from_logits(tape, self.mode, z)
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<SeOutput> {
        let mask = self.mask(tape, bound, f)?;
        let output = tape.mul(f, mask.mask)?;
        Ok(SeOutput { output, mask })
    }
}

#[derive(Clone, Debug)]
pub struct CbamBlock {
    pub mlp: Bottleneck,
    pub spatial: Conv2d,
    pub channels: usize,
    pub hidden: usize,
    pub mode: MaskMode,
}

#[derive(Clone, Copy, Debug)]
pub struct CbamOutput {
    pub output: Var,
    pub channel: MaskOutput,
    pub spatial: MaskOutput,
}

impl CbamBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        bias: bool,
        mode: MaskMode,
        seed: u64,
    ) -> Result<Self> {
        let hidden = bottleneck_width(channels, reduction)?;
        let pad = SPATIAL_KERNEL / 2;
        let spatial = Conv2d::new(
            store,
            &format!("{name}.spatial"),
            2,
            1,
            (SPATIAL_KERNEL, SPATIAL_KERNEL),
            (1, 1),
            (pad, pad),
            false,
            seed,
        )?;
        Ok(CbamBlock { mlp: Bottleneck::new(store, name, channels, hidden, bias, seed)?, spatial, channels, hidden, mode })
    }

    /// Channel mask from the shared bottleneck applied to both the average-
    /// and max-pooled descriptors, summed before the sigmoid.
    pub fn channel_mask(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<MaskOutput> {
        let (n, c, _, _) = channels_of(tape, f)?;
        if c != self.channels {
            return Err(shape_err!("CBAM block built for {} channels, got {c}", self.channels));
        }
        let avg = global_pool(tape, PoolKind::Avg, f)?;
        let avg = tape.reshape(avg, &[n, c])?;
        let max = global_pool(tape, PoolKind::Max, f)?;
        let max = tape.reshape(max, &[n, c])?;
        let za = self.mlp.forward(tape, bound, avg)?;
        let zm = self.mlp.forward(tape, bound, max)?;
        let z = tape.add(za, zm)?;
        let z = tape.reshape(z, &[n, c, 1, 1])?;
        mask_from_logits(tape, self.mode, z)
    }

    /// Spatial mask `[N,1,H,W]`: channel-wise mean and max planes,
    /// concatenated and passed through the 7x7 convolution.
    pub fn spatial_mask(&self, tape: &mut Tape, bound: &Bound, fch: Var) -> Result<MaskOutput> {
        channels_of(tape, fch)?;
        let avg = channel_pool(tape, PoolKind::Avg, fch)?;
        let max = channel_pool(tape, PoolKind::Max, fch)?;
        let planes = tape.concat(&[avg, max], 1)?;
        let z = self.spatial.forward(tape, bound, planes)?;
        mask_from_logits(tape, self.mode, z)
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<CbamOutput> {
        let channel = self.channel_mask(tape, bound, f)?;
        let fch = tape.mul(f, channel.mask)?;
        let spatial = self.spatial_mask(tape, bound, fch)?;
        let output = tape.mul(fch, spatial.mask)?;
        Ok(CbamOutput { output, channel, spatial })
    }
}
