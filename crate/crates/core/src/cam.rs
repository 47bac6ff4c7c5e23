//! Grad-CAM heatmaps, border/interior statistics of ignoring responses and
//! PGM/PPM export.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autograd::{Tape, Var};
use crate::data::to_byte;
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Model};
use crate::nn::Mode;
use crate::tensor::Tensor;

/// A layer whose activation can feed Grad-CAM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRef {
    Stem,
    Unit(usize),
}

impl LayerRef {
    /// `None` selects the last residual unit.
    pub fn resolve(model: &Model, name: Option<&str>) -> Result<LayerRef> {
        let names = model.layer_names();
        let name = match name {
            None => return Ok(LayerRef::Unit(model.unit_count() - 1)),
            Some(n) => n,
        };
        match names.iter().position(|n| n == name) {
            Some(0) => Ok(LayerRef::Stem),
            Some(i) => Ok(LayerRef::Unit(i - 1)),
            None => Err(Error::InvalidArgument(format!("layer '{name}' not found; available: {}", names.join(", ")))),
        }
    }

    pub fn activation(self, out: &ForwardOutput) -> Var {
        match self {
            LayerRef::Stem => out.stem,
            LayerRef::Unit(i) => out.units[i].output,
        }
    }

    /// Argument for [`Model::forward_from`].
    pub fn after_unit(self) -> Option<usize> {
        match self {
            LayerRef::Stem => None,
            LayerRef::Unit(i) => Some(i),
        }
    }

    pub fn name(self, model: &Model) -> String {
        match self {
            LayerRef::Stem => "stem".into(),
            LayerRef::Unit(i) => model.layer_names()[i + 1].clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[H, W]` in `[0, 1]`.
    pub values: Tensor,
    pub source_layer: String,
    pub class_index: usize,
}

/// Intermediate quantities of one Grad-CAM evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCamParts {
    /// `[C, h, w]`.
    pub activation: Tensor,
    /// d logit / d activation, `[C, h, w]`.
    pub gradient: Tensor,
    pub weights: Vec<f64>,
    pub logit: f64,
}

/// Spatial mean of each channel of a `[C, h, w]` gradient.
pub fn channel_weights(gradient: &Tensor) -> Result<Vec<f64>> {
    let (c, hw) = chw(gradient)?;
    Ok((0..c).map(|ch| gradient.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect())
}

/// `ReLU(sum_c weight_c * activation_c)` as an `[h, w]` map.
pub fn cam_combine(activation: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let (c, hw) = chw(activation)?;
    if weights.len() != c {
        return Err(Error::Shape(format!("{} weights for {c} channels", weights.len())));
    }
    let d = activation.dims();
    let mut out = vec![0.0; hw];
    for (ch, &w) in weights.iter().enumerate() {
        for (o, &a) in out.iter_mut().zip(&activation.data()[ch * hw..(ch + 1) * hw]) {
            *o += w * a;
        }
    }
    for o in out.iter_mut() {
        *o = o.max(0.0);
    }
    Tensor::from_vec(&[d[1], d[2]], out)
}

fn chw(t: &Tensor) -> Result<(usize, usize)> {
    match t.dims() {
        [c, h, w] => Ok((*c, h * w)),
        d => Err(Error::Shape(format!("expected [C,h,w], got {d:?}"))),
    }
}

/// Bilinear resize of an `[h, w]` map with half-pixel centers and edge
/// clamping.
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = match map.dims() {
        [h, w] => (*h, *w),
        d => return Err(Error::Shape(format!("expected [h,w], got {d:?}"))),
    };
    let src = map.data();
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Tensor::from_vec(&[out_h, out_w], out)
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_min_max(map: &Tensor) -> Tensor {
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return map.filled_like(0.0);
    }
    map.map(|v| (v - lo) / (hi - lo))
}

/// Activation, gradient and channel weights for one normalized `[C, H, W]`
/// image.
pub fn grad_cam_parts(model: &mut Model, image: &Tensor, class_index: usize, layer: LayerRef) -> Result<GradCamParts> {
    let d = image.dims().to_vec();
    if d.len() != 3 {
        return Err(Error::Shape(format!("expected one [C,H,W] image, got {d:?}")));
    }
    let k = model.config().num_classes;
    if class_index >= k {
        return Err(Error::InvalidArgument(format!("class {class_index} out of range for {k} classes")));
    }
    let mut tape = Tape::new();
    let x = tape.constant(image.reshape(&[1, d[0], d[1], d[2]])?);
    let out = model.forward(&mut tape, x, Mode::Eval)?;
    let act = layer.activation(&out);
    let logit = tape.value(out.logits).data()[class_index];
    let mut seed = vec![0.0; k];
    seed[class_index] = 1.0;
    tape.backward_with_seed(out.logits, Tensor::from_vec(&[1, k], seed)?)?;
    let ad = tape.value(act).dims().to_vec();
    let activation = tape.value(act).reshape(&ad[1..])?;
    let gradient = tape.grad(act).reshape(&ad[1..])?;
    let weights = channel_weights(&gradient)?;
    Ok(GradCamParts { activation, gradient, weights, logit })
}

pub fn grad_cam(model: &mut Model, image: &Tensor, class_index: usize, layer: Option<&str>) -> Result<Heatmap> {
    let layer = LayerRef::resolve(model, layer)?;
    let parts = grad_cam_parts(model, image, class_index, layer)?;
    let raw = cam_combine(&parts.activation, &parts.weights)?;
    let d = image.dims();
    let up = bilinear_resize(&raw, d[1], d[2])?;
    Ok(Heatmap { values: normalize_min_max(&up), source_layer: layer.name(model), class_index })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionStats {
    pub border_mean: f64,
    pub interior_mean: f64,
    pub border_width: usize,
    pub border_count: usize,
    pub interior_count: usize,
}

/// Mean over the border frame of width `border_width` versus the rest.
/// Accepts `[1, H, W]` or `[H, W]`.
pub fn ignore_mask_stats(mask: &Tensor, border_width: usize) -> Result<RegionStats> {
    let (h, w) = match mask.dims() {
        [1, h, w] | [h, w] => (*h, *w),
        d => return Err(Error::Shape(format!("expected [1,H,W] or [H,W], got {d:?}"))),
    };
    if 2 * border_width >= h.min(w) {
        return Err(Error::InvalidArgument(format!("border width {border_width} too large for {h}x{w}")));
    }
    let (mut bs, mut bn, mut is, mut inn) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let v = mask.data()[y * w + x];
            let edge = y < border_width || x < border_width || y >= h - border_width || x >= w - border_width;
            if edge {
                bs += v;
                bn += 1;
            } else {
                is += v;
                inn += 1;
            }
        }
    }
    Ok(RegionStats {
        border_mean: if bn > 0 { bs / bn as f64 } else { f64::NAN },
        interior_mean: is / inn as f64,
        border_width,
        border_count: bn,
        interior_count: inn,
    })
}

fn check_unit(map: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = match map.dims() {
        [h, w] | [1, h, w] => (*h, *w),
        d => return Err(Error::Shape(format!("expected [H,W], got {d:?}"))),
    };
    if map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("map values must lie in [0, 1]".into()));
    }
    Ok((h, w))
}

/// 8-bit binary graymap (P5).
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = check_unit(map)?;
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&map.data().iter().map(|&v| to_byte(v)).collect::<Vec<_>>())?;
    Ok(())
}

/// Binary pixmap (P6) of `image` (`[3, H, W]` in `[0, 1]`) blended 50/50
/// with the grayscale map.
pub fn write_overlay_ppm(path: &Path, map: &Tensor, image: &Tensor) -> Result<()> {
    let (h, w) = check_unit(map)?;
    if image.dims() != [3, h, w] {
        return Err(Error::Shape(format!("overlay image {:?} does not match map {h}x{w}", image.dims())));
    }
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            bytes.push(to_byte(0.5 * image.data()[ch * plane + p] + 0.5 * map.data()[p]));
        }
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(&bytes)?;
    Ok(())
}
