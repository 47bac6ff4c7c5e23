mod common;

use common::{synth, tiny_model};
use ignet::cam::*;
use ignet::data::{to_byte, NormSpec};
use ignet::model::Model;
use ignet::nn::Mode;
use ignet::{numeric_grad, Tape, Tensor};
use proptest::prelude::*;

fn image(seed: u64) -> Tensor {
    let d = synth(4, seed);
    let x = NormSpec::from_images(&d.images).unwrap().apply(&d.images).unwrap();
    x.slice_axis(0, 0, 1).unwrap().reshape(&[3, 16, 16]).unwrap()
}

fn logit_from(model: &mut Model, layer: LayerRef, act: &Tensor, class: usize) -> f64 {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let mut d = vec![1];
    d.extend_from_slice(act.dims());
    let a = tape.constant(act.reshape(&d).unwrap());
    let logits = model.forward_from(&mut tape, &bound, layer.after_unit(), a, Mode::Eval).unwrap();
    tape.value(logits).data()[class]
}

#[test]
fn channel_weights_match_finite_differences() {
    for (mode, layer) in [("cbam-ign1", LayerRef::Unit(1)), ("se-ign2", LayerRef::Unit(0)), ("none", LayerRef::Stem)] {
        let mut m = tiny_model(mode, 5);
        let x = image(1);
        let parts = grad_cam_parts(&mut m, &x, 1, layer).unwrap();
        assert!((logit_from(&mut m, layer, &parts.activation, 1) - parts.logit).abs() < 1e-12);
        let fd = numeric_grad(|a| Ok(logit_from(&mut m, layer, a, 1)), &parts.activation, 1e-6).unwrap();
        let fw = channel_weights(&fd).unwrap();
        let scale = fw.iter().fold(0f64, |s, v| s.max(v.abs()));
        let err = parts.weights.iter().zip(&fw).fold(0f64, |e, (a, b)| e.max((a - b).abs())) / scale;
        assert!(err < 1e-3, "{mode}: relative weight error {err}");
    }
}

#[test]
fn heatmap_is_invariant_to_head_scaling() {
    let x = image(2);
    let mut a = tiny_model("cbam", 3);
    let mut b = tiny_model("cbam", 3);
    for m in [&mut a, &mut b] {
        let id = m.params().find("head.bias").unwrap();
        let z = m.params().value(id).filled_like(0.0);
        m.params_mut().set_value(id, z).unwrap();
    }
    let id = b.params().find("head.weight").unwrap();
    let w = b.params().value(id).map(|v| 7.5 * v);
    b.params_mut().set_value(id, w).unwrap();
    let ha = grad_cam(&mut a, &x, 0, None).unwrap();
    let hb = grad_cam(&mut b, &x, 0, None).unwrap();
    assert!(ha.values.max_abs_diff(&hb.values) < 1e-10);
}

#[test]
fn heatmap_contract() {
    let mut m = tiny_model("se", 0);
    let x = image(3);
    let h = grad_cam(&mut m, &x, 1, Some("stage1.unit1")).unwrap();
    assert_eq!(h.values.dims(), &[16, 16]);
    assert_eq!((h.source_layer.as_str(), h.class_index), ("stage1.unit1", 1));
    assert!(h.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(grad_cam(&mut m, &x, 1, Some("stage1.unit1")).unwrap(), h);
    assert_eq!(grad_cam(&mut m, &x, 0, None).unwrap().source_layer, "stage2.unit1");
    assert!(grad_cam(&mut m, &x, 2, None).is_err());
    assert!(grad_cam(&mut m, &x, 0, Some("stage9.unit1")).is_err());
}

#[test]
fn single_channel_reduces_to_scaled_activation() {
    let act = Tensor::from_vec(&[1, 2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 6.0]).unwrap();
    let pos = normalize_min_max(&cam_combine(&act, &[2.5]).unwrap());
    assert!(pos.max_abs_diff(&act.reshape(&[2, 3]).unwrap().map(|v| v / 6.0)) < 1e-15);
    let neg = normalize_min_max(&cam_combine(&act, &[-1.0]).unwrap());
    assert!(neg.data().iter().all(|&v| v == 0.0));
}

#[test]
fn exports_read_back_with_independent_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let map = Tensor::from_vec(&[2, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]).unwrap();
    let p = dir.path().join("m.pgm");
    write_pgm(&p, &map).unwrap();
    let g = image::open(&p).unwrap().into_luma8();
    assert_eq!(g.dimensions(), (3, 2));
    let expect: Vec<u8> = map.data().iter().map(|&v| to_byte(v)).collect();
    assert_eq!(g.as_raw(), &expect);
    assert_eq!((g.as_raw()[0], g.as_raw()[4]), (0, 255));

    let zeros = Tensor::zeros(&[4, 4]).unwrap();
    write_pgm(&p, &zeros).unwrap();
    assert!(image::open(&p).unwrap().into_luma8().as_raw().iter().all(|&b| b == 0));

    let img = Tensor::from_vec(&[3, 2, 3], (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
    let q = dir.path().join("o.ppm");
    write_overlay_ppm(&q, &map, &img).unwrap();
    let rgb = image::open(&q).unwrap().into_rgb8();
    for y in 0..2u32 {
        for x in 0..3u32 {
            let px = rgb.get_pixel(x, y).0;
            let p = (y * 3 + x) as usize;
            for c in 0..3 {
                assert_eq!(px[c], to_byte(0.5 * img.data()[c * 6 + p] + 0.5 * map.data()[p]));
            }
        }
    }
    assert!(write_pgm(&p, &map.map(|v| v + 1.0)).is_err());
    assert!(write_overlay_ppm(&q, &map, &zeros).is_err());
}

fn region_oracle(map: &[f64], h: usize, w: usize, bw: usize) -> (f64, f64) {
    let total: f64 = map.iter().sum();
    let mut inner = 0.0;
    for y in bw..h - bw {
        for x in bw..w - bw {
            inner += map[y * w + x];
        }
    }
    let n_in = ((h - 2 * bw) * (w - 2 * bw)) as f64;
    (total - inner, inner / n_in)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn region_stats_match_rectangle_oracle(
        h in 3usize..12, w in 3usize..12, bw in 1usize..4, seed in any::<u64>(),
    ) {
        prop_assume!(2 * bw < h.min(w));
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let s = ignore_mask_stats(&Tensor::from_vec(&[1, h, w], v.clone()).unwrap(), bw).unwrap();
        let n_in = (h - 2 * bw) * (w - 2 * bw);
        prop_assert_eq!(s.interior_count, n_in);
        prop_assert_eq!(s.border_count, h * w - n_in);
        let (border_sum, inner_mean) = region_oracle(&v, h, w, bw);
        let border_mean = border_sum / s.border_count as f64;
        prop_assert!((s.interior_mean - inner_mean).abs() < 1e-12);
        prop_assert!((s.border_mean - border_mean).abs() < 1e-12);
    }

    #[test]
    fn resize_preserves_constants_and_bounds(
        h in 1usize..6, w in 1usize..6, oh in 1usize..20, ow in 1usize..20, seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let m = Tensor::from_vec(&[h, w], v.clone()).unwrap();
        let r = bilinear_resize(&m, oh, ow).unwrap();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(r.data().iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
        let c = bilinear_resize(&m.filled_like(0.3), oh, ow).unwrap();
        prop_assert!(c.data().iter().all(|&x| (x - 0.3).abs() < 1e-15));
        prop_assert!(bilinear_resize(&m, h, w).unwrap().max_abs_diff(&m) < 1e-15);
    }
}
