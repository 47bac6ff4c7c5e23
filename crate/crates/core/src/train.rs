//! SGD with momentum, step learning-rate schedule, metrics and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{augment, AugmentConfig, LabeledImages, NormSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Mode, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub milestones: Vec<usize>,
    /// The learning rate is divided by this at each milestone.
    pub decay_factor: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    /// 30-epoch schedule with milestones at 15 and 23.
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 30,
            milestones: vec![15, 23],
            decay_factor: 5.0,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// 200 epochs, divided by 5 after 60, 120 and 160.
    pub fn full_schedule() -> Self {
        TrainConfig { epochs: 200, milestones: vec![60, 120, 160], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be finite and >= 0, got {}", self.lr0));
        }
        if !(self.decay_factor > 1.0) {
            return bad(format!("decay_factor must be > 1, got {}", self.decay_factor));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing: {:?}", self.milestones));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return bad("momentum and weight_decay must be >= 0".into());
        }
        Ok(())
    }
}

/// `lr0 / decay_factor^(milestones <= epoch)`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let passed = config.milestones.iter().filter(|&&m| m <= epoch).count();
    config.lr0 / config.decay_factor.powi(passed as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub velocities: Vec<Tensor>,
    pub best_val_metric: f64,
    /// Shuffling and augmentation for epoch `e` use a generator derived from
    /// `(seed, e)`, so this plus `epoch` is the whole RNG state.
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: &ParamStore, seed: u64) -> Self {
        TrainState {
            epoch: 0,
            velocities: params.iter().map(|p| p.value.filled_like(0.0)).collect(),
            best_val_metric: f64::INFINITY,
            seed,
        }
    }
}

pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// `v <- m*v + (g + wd*w); w <- w - lr*v`. Weight decay only touches
/// parameters whose role decays. Nothing is modified if any gradient is
/// non-finite.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    velocities: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocities.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocities.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::InvalidArgument(format!("gradient shape mismatch for {}", p.name)));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocities.iter_mut()) {
        let wd = if p.role.decays() { weight_decay } else { 0.0 };
        let w = p.value.data_mut();
        let vv = v.data_mut();
        for ((wi, gi), vi) in w.iter_mut().zip(g.data()).zip(vv.iter_mut()) {
            *vi = momentum * *vi + (gi + wd * *wi);
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy, recorded on the tape.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let d = tape.value(logits).dims();
    if d.len() != 2 || d[0] != labels.len() {
        return Err(Error::Shape(format!("logits {d:?} vs {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= d[1]) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {} classes", d[1])));
    }
    tape.softmax_cross_entropy(logits, labels)
}

/// Percentage of rows whose label is not among the `k` largest logits. A
/// logit equal to the label's ranks ahead of it when its index is lower.
pub fn topk_error(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let d = logits.dims();
    if d.len() != 2 || d[0] != labels.len() || d[0] == 0 {
        return Err(Error::Shape(format!("logits {d:?} vs {} labels", labels.len())));
    }
    let kk = d[1];
    if k == 0 || k > kk {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={kk}")));
    }
    let mut wrong = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l >= kk {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {kk} classes")));
        }
        let row = &logits.data()[i * kk..(i + 1) * kk];
        let t = row[l];
        let ahead = row.iter().enumerate().filter(|&(j, &v)| v > t || (v == t && j < l)).count();
        if ahead >= k {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub top1: f64,
    /// Top-min(5, K) error.
    pub top5: f64,
}

/// Eval-mode loss and errors over already-normalized images.
pub fn evaluate(model: &mut Model, images: &Tensor, labels: &[usize], batch: usize) -> Result<(EvalMetrics, Tensor)> {
    let n = labels.len();
    let mut parts = Vec::new();
    let mut loss = 0.0;
    let mut start = 0;
    while start < n {
        let len = batch.max(1).min(n - start);
        let mut tape = Tape::new();
        let x = tape.constant(images.slice_axis(0, start, len)?);
        let out = model.forward(&mut tape, x, Mode::Eval)?;
        let l = cross_entropy(&mut tape, out.logits, &labels[start..start + len])?;
        loss += tape.value(l).item()? * len as f64;
        parts.push(tape.value(out.logits).clone());
        start += len;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let logits = Tensor::concat(&refs, 0)?;
    let k = logits.dims()[1];
    let metrics = EvalMetrics {
        loss: loss / n as f64,
        top1: topk_error(&logits, labels, 1)?,
        top5: topk_error(&logits, labels, k.min(5))?,
    };
    Ok((metrics, logits))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
    pub params: Vec<Tensor>,
    pub buffers: Vec<(String, Tensor)>,
    pub velocities: Vec<Tensor>,
}

impl Snapshot {
    pub fn take(model: &mut Model, state: &TrainState) -> Self {
        Snapshot {
            epoch: state.epoch,
            params: model.params().iter().map(|p| p.value.clone()).collect(),
            buffers: model.buffers(),
            velocities: state.velocities.clone(),
        }
    }

    pub fn restore(&self, model: &mut Model) -> Result<()> {
        if self.params.len() != model.params().len() {
            return Err(Error::Checkpoint("snapshot does not match model".into()));
        }
        for (p, v) in model.params_mut().iter_mut().zip(&self.params) {
            if p.value.shape() != v.shape() {
                return Err(Error::Checkpoint(format!("snapshot shape mismatch for {}", p.name)));
            }
            p.value = v.clone();
        }
        model.set_buffers(&self.buffers)
    }
}

#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch with the lowest val top-1 error (earliest on ties).
    pub best_epoch: Option<usize>,
    pub best: Option<Snapshot>,
    pub state: TrainState,
    pub norm: NormSpec,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

impl TrainHistory {
    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|e| &self.records[e - 1])
    }
}

pub fn fit(model: &mut Model, train: &LabeledImages, val: &LabeledImages, config: &TrainConfig) -> Result<TrainHistory> {
    fit_with(model, train, val, config, |_| {})
}

/// Trains for `config.epochs`, calling `on_epoch` after each epoch. The
/// normalization is computed from `train`.
pub fn fit_with(
    model: &mut Model,
    train: &LabeledImages,
    val: &LabeledImages,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    config.validate()?;
    let shape = train.image_shape();
    if shape != model.config().input_shape || val.image_shape() != shape {
        return Err(Error::Data(format!(
            "data shapes {:?}/{:?} do not match model input {:?}",
            shape,
            val.image_shape(),
            model.config().input_shape
        )));
    }
    let norm = NormSpec::from_images(&train.images)?;
    let val_x = norm.apply(&val.images)?;
    let mut history = TrainHistory {
        records: Vec::with_capacity(config.epochs),
        best_epoch: None,
        best: None,
        state: TrainState::new(model.params(), config.seed),
        norm,
        aborted: None,
    };
    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch);
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let (raw, labels) = train.batch(idx)?;
            let x = augment(&raw, &config.augment, &history.norm, &mut rng)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let out = model.forward(&mut tape, xv, Mode::Train)?;
            let loss = cross_entropy(&mut tape, out.logits, &labels)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                history.aborted = Some(format!("non-finite training loss in epoch {}", epoch + 1));
                return Ok(history);
            }
            tape.backward(loss)?;
            let grads = model.params().grads(&tape, &out.params);
            let step = sgd_step(
                model.params_mut(),
                &grads,
                &mut history.state.velocities,
                lr,
                config.momentum,
                config.weight_decay,
            );
            if let Err(e) = step {
                history.aborted = Some(format!("epoch {}: {e}", epoch + 1));
                return Ok(history);
            }
            loss_sum += lv * idx.len() as f64;
        }
        let (m, _) = evaluate(model, &val_x, &val.labels, config.batch_size)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss: m.loss,
            val_top1: m.top1,
            val_top5: m.top5,
        };
        history.records.push(rec);
        history.state.epoch = epoch + 1;
        if m.top1 < history.state.best_val_metric {
            history.state.best_val_metric = m.top1;
            history.best_epoch = Some(epoch + 1);
            history.best = Some(Snapshot::take(model, &history.state));
        }
        on_epoch(&rec);
        if !m.loss.is_finite() {
            history.aborted = Some(format!("non-finite validation loss in epoch {}", epoch + 1));
            break;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamRole;

    #[test]
    fn schedule_examples() {
        let paper = TrainConfig::full_schedule();
        assert_eq!(lr_at(&paper, 0), 0.1);
        assert_eq!(lr_at(&paper, 59), 0.1);
        assert!((lr_at(&paper, 60) - 0.02).abs() < 1e-15);
        assert!((lr_at(&paper, 160) - 0.0008).abs() < 1e-15);
        let desk = TrainConfig::default();
        assert_eq!(lr_at(&desk, 14), 0.1);
        assert!((lr_at(&desk, 15) - 0.02).abs() < 1e-15);
        assert!((lr_at(&desk, 29) - 0.004).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { decay_factor: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { milestones: vec![5, 5], ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn store(role: ParamRole, w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_vec(&[2], vec![w, -w]).unwrap(), role).unwrap();
        s
    }

    #[test]
    fn plain_sgd() {
        let mut s = store(ParamRole::Weight, 1.0);
        let g = vec![Tensor::from_vec(&[2], vec![0.5, 2.0]).unwrap()];
        let mut v = vec![Tensor::zeros(&[2]).unwrap()];
        sgd_step(&mut s, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0 - 0.05, -1.0 - 0.2]);
    }

    #[test]
    fn two_momentum_steps_closed_form() {
        let (lr, m, g0) = (0.1, 0.9, 0.3);
        let mut s = store(ParamRole::Weight, 1.0);
        let g = vec![Tensor::full(&[2], g0).unwrap()];
        let mut v = vec![Tensor::zeros(&[2]).unwrap()];
        sgd_step(&mut s, &g, &mut v, lr, m, 0.0).unwrap();
        sgd_step(&mut s, &g, &mut v, lr, m, 0.0).unwrap();
        let w = s.iter().next().unwrap().value.data().to_vec();
        assert!((w[0] - (1.0 - lr * g0 * (2.0 + m))).abs() < 1e-15);
    }

    #[test]
    fn decay_only_is_geometric_and_skips_norms() {
        let (lr, wd) = (0.1, 0.01);
        let mut s = store(ParamRole::Weight, 1.0);
        s.add("gamma", Tensor::full(&[2], 1.0).unwrap(), ParamRole::NormScale).unwrap();
        s.add("b", Tensor::full(&[2], 1.0).unwrap(), ParamRole::Bias).unwrap();
        let g = vec![Tensor::zeros(&[2]).unwrap(); 3];
        let mut v = g.clone();
        for step in 1..=5 {
            sgd_step(&mut s, &g, &mut v, lr, 0.0, wd).unwrap();
            let w = s.iter().next().unwrap().value.data()[0];
            assert!((w - (1.0 - lr * wd).powi(step)).abs() < 1e-15);
        }
        for p in s.iter().skip(1) {
            assert_eq!(p.value.data(), &[1.0, 1.0]);
        }
    }

    #[test]
    fn non_finite_gradient_leaves_params_untouched() {
        let mut s = store(ParamRole::Weight, 1.0);
        let g = vec![Tensor::from_vec(&[2], vec![0.1, f64::NAN]).unwrap()];
        let mut v = vec![Tensor::zeros(&[2]).unwrap()];
        assert!(matches!(sgd_step(&mut s, &g, &mut v, 0.1, 0.9, 0.0), Err(Error::NonFinite(_))));
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0, -1.0]);
        assert_eq!(v[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::zeros(&[3, 10]).unwrap());
        let l = cross_entropy(&mut tape, z, &[0, 4, 9]).unwrap();
        assert!((tape.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut big = vec![0.0; 10];
        big[2] = 1000.0;
        let z = tape.param(Tensor::from_vec(&[1, 10], big).unwrap());
        let l = cross_entropy(&mut tape, z, &[2]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);
        assert!(cross_entropy(&mut tape, z, &[10]).is_err());
    }

    #[test]
    fn topk_examples() {
        let z = Tensor::from_vec(&[3, 4], vec![0.1, 0.9, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.3, 0.2, 0.1, 0.4]).unwrap();
        assert_eq!(topk_error(&z, &[1, 0, 3], 1).unwrap(), 0.0);
        // tie at 1.0: index 0 wins over index 1
        assert!((topk_error(&z, &[1, 1, 3], 1).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(topk_error(&z, &[1, 1, 3], 2).unwrap(), 0.0);
        assert_eq!(topk_error(&z, &[2, 3, 2], 4).unwrap(), 0.0);
        assert!(topk_error(&z, &[0, 0, 0], 5).is_err());
        assert!(topk_error(&z, &[0, 0, 0], 0).is_err());
    }
}
