mod common;

use common::{synth, tiny_model};
use ignet::data::{AugmentConfig, NormSpec};
use ignet::nn::Mode;
use ignet::train::*;
use ignet::{numeric_grad, Tape, Tensor};
use proptest::prelude::*;

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr0: 0.05,
        batch_size: 16,
        epochs,
        milestones: vec![2],
        augment: AugmentConfig { pad: 1, ..Default::default() },
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut m = tiny_model("cbam-ign1", 0);
    let before: Vec<Tensor> = m.params().iter().map(|p| p.value.clone()).collect();
    let h = fit(&mut m, &synth(32, 1), &synth(16, 2), &TrainConfig { lr0: 0.0, ..quick(1) }).unwrap();
    assert!(h.aborted.is_none());
    for (p, b) in m.params().iter().zip(&before) {
        assert_eq!(&p.value, b, "{}", p.name);
    }
}

#[test]
fn single_image_is_memorized() {
    let mut m = tiny_model("se", 0);
    let data = synth(1, 4);
    let x = NormSpec::from_images(&data.images).unwrap().apply(&data.images).unwrap();
    let mut vel: Vec<Tensor> = m.params().iter().map(|p| p.value.filled_like(0.0)).collect();
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = m.forward(&mut tape, xv, Mode::Train).unwrap();
        let loss = cross_entropy(&mut tape, out.logits, &data.labels).unwrap();
        last = tape.value(loss).item().unwrap();
        if last < 0.01 {
            break;
        }
        tape.backward(loss).unwrap();
        let g = m.params().grads(&tape, &out.params);
        sgd_step(m.params_mut(), &g, &mut vel, 0.05, 0.9, 0.0).unwrap();
    }
    assert!(last < 0.01, "loss {last}");
}

#[test]
fn history_is_complete_and_best_is_minimum() {
    let mut m = tiny_model("cbam", 1);
    let (tr, va) = (synth(48, 5), synth(24, 6));
    let mut seen = Vec::new();
    let h = fit_with(&mut m, &tr, &va, &quick(3), |r| seen.push(r.epoch)).unwrap();
    assert_eq!(h.records.len(), 3);
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(h.state.epoch, 3);
    let min = h.records.iter().map(|r| r.val_top1).fold(f64::INFINITY, f64::min);
    let first = h.records.iter().position(|r| r.val_top1 == min).unwrap() + 1;
    assert_eq!(h.best_epoch, Some(first));
    assert_eq!((h.records[1].lr, h.records[2].lr), (0.05, 0.05 / 5.0));

    let best = h.best.as_ref().unwrap();
    best.restore(&mut m).unwrap();
    let x = h.norm.apply(&va.images).unwrap();
    let (metrics, _) = evaluate(&mut m, &x, &va.labels, 7).unwrap();
    let rec = h.best_record().unwrap();
    assert_eq!(metrics.top1, rec.val_top1);
    assert!((metrics.loss - rec.val_loss).abs() < 1e-12);
}

#[test]
fn training_is_deterministic() {
    let (tr, va) = (synth(40, 7), synth(20, 8));
    let run = || {
        let mut m = tiny_model("se-ign3", 2);
        let h = fit(&mut m, &tr, &va, &quick(2)).unwrap();
        (h.records, m.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn weight_decay_touches_only_weights() {
    let mut m = tiny_model("cbam-ign2", 0);
    let before: Vec<_> = m.params().iter().map(|p| (p.role, p.value.clone())).collect();
    let grads: Vec<Tensor> = before.iter().map(|(_, v)| v.filled_like(0.0)).collect();
    let mut vel = grads.clone();
    sgd_step(m.params_mut(), &grads, &mut vel, 0.1, 0.9, 0.01).unwrap();
    let mut decayed = 0;
    for (p, (role, v)) in m.params().iter().zip(&before) {
        if role.decays() {
            decayed += 1;
            let expect = v.map(|w| w - 0.1 * 0.01 * w);
            assert!(p.value.max_abs_diff(&expect) < 1e-15, "{}", p.name);
        } else {
            assert_eq!(&p.value, v, "{}", p.name);
        }
    }
    assert!(decayed > 0 && decayed < before.len());
}

#[test]
fn non_finite_gradient_leaves_parameters_untouched() {
    let mut m = tiny_model("none", 0);
    let before: Vec<Tensor> = m.params().iter().map(|p| p.value.clone()).collect();
    let mut grads: Vec<Tensor> = before.iter().map(|v| v.filled_like(1.0)).collect();
    let last = grads.len() - 1;
    grads[last] = grads[last].filled_like(f64::NAN);
    let mut vel: Vec<Tensor> = before.iter().map(|v| v.filled_like(0.0)).collect();
    assert!(sgd_step(m.params_mut(), &grads, &mut vel, 0.1, 0.9, 0.0).is_err());
    for (p, b) in m.params().iter().zip(&before) {
        assert_eq!(&p.value, b);
    }
}

fn ce_oracle(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.dims()[1];
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / labels.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_entropy_matches_oracle_and_numeric_gradient(
        vals in prop::collection::vec(-8.0f64..8.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        let x = Tensor::from_vec(&[3, 4], vals).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let loss = cross_entropy(&mut tape, v, &labels).unwrap();
        prop_assert!((tape.value(loss).item().unwrap() - ce_oracle(&x, &labels)).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let fd = numeric_grad(|t| Ok(ce_oracle(t, &labels)), &x, 1e-6).unwrap();
        prop_assert!(tape.grad(v).max_abs_diff(&fd) < 1e-7);
    }

    #[test]
    fn topk_matches_sort_oracle(
        vals in prop::collection::vec(-3i32..3, 40),
        labels in prop::collection::vec(0usize..8, 5),
        k in 1usize..=8,
    ) {
        let logits = Tensor::from_vec(&[5, 8], vals.iter().map(|&v| f64::from(v)).collect()).unwrap();
        let mut wrong = 0;
        for (i, &l) in labels.iter().enumerate() {
            let mut idx: Vec<usize> = (0..8).collect();
            // stable sort keeps lower indices first among equal logits
            idx.sort_by(|&a, &b| logits.data()[i * 8 + b].partial_cmp(&logits.data()[i * 8 + a]).unwrap());
            if !idx[..k].contains(&l) {
                wrong += 1;
            }
        }
        let expect = 100.0 * wrong as f64 / 5.0;
        prop_assert_eq!(topk_error(&logits, &labels, k).unwrap(), expect);
    }
}

#[test]
fn shape_mismatch_is_a_data_error() {
    let mut m = tiny_model("none", 0);
    let tr = common::synth(8, 1);
    let bad = ignet::data::synth_generate(&ignet::data::SyntheticSpec { n: 4, hw: 12, border: 2, ..Default::default() }).unwrap();
    assert!(matches!(fit(&mut m, &tr, &bad, &quick(1)), Err(ignet::Error::Data(_))));
}
