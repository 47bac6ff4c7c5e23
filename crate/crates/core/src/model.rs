//! Mini residual CNN with configurable attention in every residual unit.
//!
//! Layout: 3x3 stem conv + BN + ReLU, then stages of basic residual units
//! (conv-BN-ReLU-conv-BN, attention, add shortcut, ReLU), global average
//! pooling and a linear head. Attention sits after the second BN and before
//! the residual addition.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attention::{AttentionMode, CbamBlock, MaskMode, MaskOutput, SeBlock, DEFAULT_REDUCTION};
use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{global_pool, BatchNorm2d, Bound, Conv2d, Linear, Mode, ParamStore, PoolKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    #[serde(serialize_with = "ser_mode", deserialize_with = "de_mode")]
    pub attention: AttentionMode,
    pub num_classes: usize,
    /// `(C, H, W)` of one input image.
    pub input_shape: [usize; 3],
    pub reduction: usize,
    pub bottleneck_bias: bool,
}

fn ser_mode<S: Serializer>(m: &AttentionMode, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&m.to_string())
}

fn de_mode<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<AttentionMode, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

impl ModelConfig {
    /// 16-channel stem and three stages of two units at 16/32/64 channels,
    /// for 3x32x32 inputs.
    pub fn mini_resnet(attention: AttentionMode, num_classes: usize) -> Self {
        ModelConfig {
            stem_channels: 16,
            stages: vec![
                StageSpec { blocks: 2, channels: 16, stride: 1 },
                StageSpec { blocks: 2, channels: 32, stride: 2 },
                StageSpec { blocks: 2, channels: 64, stride: 2 },
            ],
            attention,
            num_classes,
            input_shape: [3, 32, 32],
            reduction: DEFAULT_REDUCTION,
            bottleneck_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.stem_channels == 0 || self.num_classes == 0 || self.reduction == 0 {
            return bad("stem_channels, num_classes and reduction must be >= 1".into());
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return bad(format!("invalid input shape {:?}", self.input_shape));
        }
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 || s.stride == 0 {
                return bad(format!("stage {} has a zero field: {s:?}", i + 1));
            }
            h = (h - 1) / s.stride + 1;
            w = (w - 1) / s.stride + 1;
        }
        if h == 0 || w == 0 {
            return bad("stages shrink the input to nothing".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
    bn_name: String,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        seed: u64,
    ) -> Result<Self> {
        let pad = (k - 1) / 2;
        let conv = Conv2d::new(store, &format!("{name}.conv"), cin, cout, (k, k), (stride, stride), (pad, pad), false, seed)?;
        let bn_name = format!("{name}.bn");
        let bn = BatchNorm2d::new(store, &bn_name, cout)?;
        Ok(ConvBn { conv, bn, bn_name })
    }

    fn forward(&mut self, tape: &mut Tape, bound: &Bound, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, bound, x)?;
        self.bn.forward(tape, bound, y, mode)
    }
}

#[derive(Clone, Debug)]
pub enum AttentionBlock {
    Se(SeBlock),
    Cbam(CbamBlock),
}

#[derive(Clone, Debug)]
struct ResidualUnit {
    name: String,
    conv1: ConvBn,
    conv2: ConvBn,
    attention: Option<AttentionBlock>,
    shortcut: Option<ConvBn>,
}

/// What one residual unit produced during a forward pass.
#[derive(Clone, Debug)]
pub struct UnitTrace {
    pub name: String,
    pub output: Var,
    pub channel: Option<MaskOutput>,
    pub spatial: Option<MaskOutput>,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub params: Bound,
    pub stem: Var,
    pub units: Vec<UnitTrace>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    stem: ConvBn,
    units: Vec<ResidualUnit>,
    head: Linear,
    force_identity_masks: bool,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let stem = ConvBn::new(&mut store, "stem", config.input_shape[0], config.stem_channels, 3, 1, seed)?;
        let mut units = Vec::new();
        let mut cin = config.stem_channels;
        for (si, stage) in config.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let name = format!("stage{}.unit{}", si + 1, bi + 1);
                let stride = if bi == 0 { stage.stride } else { 1 };
                let cout = stage.channels;
                let conv1 = ConvBn::new(&mut store, &format!("{name}.a"), cin, cout, 3, stride, seed)?;
                let conv2 = ConvBn::new(&mut store, &format!("{name}.b"), cout, cout, 3, 1, seed)?;
                let aname = format!("{name}.attn");
                let attention = match config.attention {
                    AttentionMode::None => None,
                    AttentionMode::Se(m) => Some(AttentionBlock::Se(SeBlock::new(
                        &mut store,
                        &aname,
                        cout,
                        config.reduction,
                        config.bottleneck_bias,
                        m,
                        seed,
                    )?)),
                    AttentionMode::Cbam(m) => Some(AttentionBlock::Cbam(CbamBlock::new(
                        &mut store,
                        &aname,
                        cout,
                        config.reduction,
                        config.bottleneck_bias,
                        m,
                        seed,
                    )?)),
                };
                let shortcut = if stride != 1 || cin != cout {
                    Some(ConvBn::new(&mut store, &format!("{name}.short"), cin, cout, 1, stride, seed)?)
                } else {
                    None
                };
                units.push(ResidualUnit { name, conv1, conv2, attention, shortcut });
                cin = cout;
            }
        }
        let head = Linear::new(&mut store, "head", cin, config.num_classes, true, seed)?;
        Ok(Model { config, params: store, stem, units, head, force_identity_masks: false })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Replace every attention mask by 1, turning each block into the identity.
    pub fn set_force_identity_masks(&mut self, on: bool) {
        self.force_identity_masks = on;
    }

    /// Names accepted as CAM layers: `stem` and each `stageS.unitU`.
    pub fn layer_names(&self) -> Vec<String> {
        std::iter::once("stem".to_string()).chain(self.units.iter().map(|u| u.name.clone())).collect()
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    /// Attention blocks in unit order.
    pub fn attention_blocks(&self) -> Vec<&AttentionBlock> {
        self.units.iter().filter_map(|u| u.attention.as_ref()).collect()
    }

    fn batch_norms_mut(&mut self) -> Vec<(&str, &mut BatchNorm2d)> {
        let mut out: Vec<(&str, &mut BatchNorm2d)> = vec![(self.stem.bn_name.as_str(), &mut self.stem.bn)];
        for u in &mut self.units {
            out.push((u.conv1.bn_name.as_str(), &mut u.conv1.bn));
            out.push((u.conv2.bn_name.as_str(), &mut u.conv2.bn));
            if let Some(s) = &mut u.shortcut {
                out.push((s.bn_name.as_str(), &mut s.bn));
            }
        }
        out
    }

    /// Non-trainable state (BN running statistics) as named tensors.
    pub fn buffers(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, bn) in self.batch_norms_mut() {
            let c = bn.running_mean.len();
            out.push((format!("{name}.running_mean"), Tensor::from_vec(&[c], bn.running_mean.clone()).unwrap()));
            out.push((format!("{name}.running_var"), Tensor::from_vec(&[c], bn.running_var.clone()).unwrap()));
        }
        out
    }

    pub fn set_buffers(&mut self, buffers: &[(String, Tensor)]) -> Result<()> {
        for (name, bn) in self.batch_norms_mut() {
            for (suffix, slot) in [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)] {
                let key = format!("{name}.{suffix}");
                let t = buffers
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::Checkpoint(format!("missing buffer {key}")))?;
                if t.numel() != slot.len() {
                    return Err(Error::Checkpoint(format!("buffer {key} has {} values, expected {}", t.numel(), slot.len())));
                }
                slot.copy_from_slice(t.data());
            }
        }
        Ok(())
    }

    /// Copies every parameter and buffer whose name and shape also exist in
    /// `other`. Returns the number of parameters copied.
    pub fn copy_shared_from(&mut self, other: &mut Model) -> Result<usize> {
        let mut copied = 0;
        for p in self.params.iter_mut() {
            if let Some(id) = other.params.find(&p.name) {
                let src = other.params.value(id);
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied += 1;
                }
            }
        }
        let theirs = other.buffers();
        let mine: Vec<(String, Tensor)> = self
            .buffers()
            .into_iter()
            .map(|(n, t)| match theirs.iter().find(|(m, u)| *m == n && u.shape() == t.shape()) {
                Some((_, u)) => (n, u.clone()),
                None => (n, t),
            })
            .collect();
        self.set_buffers(&mine)?;
        Ok(copied)
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let d = tape.value(x).dims();
        if d.len() != 4 || d[1..] != self.config.input_shape {
            return Err(shape_err!("model expects [N, {:?}] input, got {d:?}", self.config.input_shape));
        }
        Ok(())
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<ForwardOutput> {
        let bound = self.params.bind(tape);
        self.forward_with(tape, bound, x, mode)
    }

    /// Forward pass with parameters already placed on the tape.
    pub fn forward_with(&mut self, tape: &mut Tape, bound: Bound, x: Var, mode: Mode) -> Result<ForwardOutput> {
        self.check_input(tape, x)?;
        if bound.vars().len() != self.params.len() {
            return Err(shape_err!("{} bound parameters for a model with {}", bound.vars().len(), self.params.len()));
        }
        let stem = self.stem.forward(tape, &bound, x, mode)?;
        let stem = tape.relu(stem)?;
        let mut units = Vec::with_capacity(self.units.len());
        let mut h = stem;
        for i in 0..self.units.len() {
            let trace = self.unit_forward(i, tape, &bound, h, mode)?;
            h = trace.output;
            units.push(trace);
        }
        let logits = self.head_forward(tape, &bound, h)?;
        Ok(ForwardOutput { logits, params: bound, stem, units })
    }

    /// Runs the network from the output of unit `after_unit` (an index into
    /// [`Model::layer_names`] minus one; `None` starts right after the stem).
    pub fn forward_from(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        after_unit: Option<usize>,
        activation: Var,
        mode: Mode,
    ) -> Result<Var> {
        let start = after_unit.map_or(0, |u| u + 1);
        let mut h = activation;
        for i in start..self.units.len() {
            h = self.unit_forward(i, tape, bound, h, mode)?.output;
        }
        self.head_forward(tape, bound, h)
    }

    fn head_forward(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
        let pooled = global_pool(tape, PoolKind::Avg, h)?;
        let d = tape.value(pooled).dims().to_vec();
        let flat = tape.reshape(pooled, &[d[0], d[1]])?;
        self.head.forward(tape, bound, flat)
    }

    fn unit_forward(&mut self, i: usize, tape: &mut Tape, bound: &Bound, x: Var, mode: Mode) -> Result<UnitTrace> {
        let force = self.force_identity_masks;
        let u = &mut self.units[i];
        let h = u.conv1.forward(tape, bound, x, mode)?;
        let h = tape.relu(h)?;
        let h = u.conv2.forward(tape, bound, h, mode)?;
        let (h, channel, spatial) = match (&u.attention, force) {
            (None, _) | (_, true) => (h, None, None),
            (Some(AttentionBlock::Se(b)), false) => {
                let o = b.apply(tape, bound, h)?;
                (o.output, Some(o.mask), None)
            }
            (Some(AttentionBlock::Cbam(b)), false) => {
                let o = b.apply(tape, bound, h)?;
                (o.output, Some(o.channel), Some(o.spatial))
            }
        };
        let sc = match &mut u.shortcut {
            Some(s) => s.forward(tape, bound, x, mode)?,
            None => x,
        };
        let sum = tape.add(h, sc)?;
        let output = tape.relu(sum)?;
        Ok(UnitTrace { name: u.name.clone(), output, channel, spatial })
    }

    /// Eval-mode logits for already-normalized images, in chunks of `batch`.
    pub fn predict(&mut self, images: &Tensor, batch: usize) -> Result<Tensor> {
        let n = images.dims().first().copied().unwrap_or(0);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = batch.max(1).min(n - start);
            let chunk = images.slice_axis(0, start, len)?;
            let mut tape = Tape::new();
            let x = tape.constant(chunk);
            let out = self.forward(&mut tape, x, Mode::Eval)?;
            parts.push(tape.value(out.logits).clone());
            start += len;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    }
}

impl AttentionBlock {
    pub fn mode(&self) -> MaskMode {
        match self {
            AttentionBlock::Se(b) => b.mode,
            AttentionBlock::Cbam(b) => b.mode,
        }
    }

    /// Extra parameters this block adds to its unit.
    pub fn param_count(&self) -> usize {
        match self {
            AttentionBlock::Se(b) => 2 * b.channels * b.hidden,
            AttentionBlock::Cbam(b) => {
                2 * b.channels * b.hidden + 2 * b.spatial.kernel.0 * b.spatial.kernel.1
            }
        }
    }
}
