//! CIFAR binary ingestion, train/val splitting, augmentation and the
//! planted-distractor synthetic dataset.
//!
//! Images are kept as raw `[0, 1]` pixels; normalization is applied when a
//! batch is assembled, so the stored data stays invertible.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarFormat {
    /// 1 label byte per record.
    Cifar10,
    /// 2 label bytes per record (coarse, fine); the fine label is used.
    Cifar100,
}

impl CifarFormat {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 1,
            CifarFormat::Cifar100 => 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 10,
            CifarFormat::Cifar100 => 100,
        }
    }

    /// Bytes per record for 3-channel `side x side` images.
    pub fn record_len(self, side: usize) -> usize {
        self.label_bytes() + 3 * side * side
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    /// `[N, C, H, W]`, raw pixels in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
}

impl LabeledImages {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        let d = images.dims();
        if d.len() != 4 {
            return Err(Error::Data(format!("images must be [N,C,H,W], got {d:?}")));
        }
        if d[0] != labels.len() || labels.is_empty() {
            return Err(Error::Data(format!("{} images but {} labels", d[0], labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("label {l} out of range for {class_count} classes")));
        }
        Ok(LabeledImages { images, labels, class_count, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let d = self.images.dims();
        [d[1], d[2], d[3]]
    }

    pub fn select(&self, indices: &[usize], split: Split) -> Result<LabeledImages> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledImages::new(images, labels, self.class_count, split)
    }

    /// The first `n` records.
    pub fn head(&self, n: usize) -> Result<LabeledImages> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx, self.split)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select_rows(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Decodes records of `side x side` images (32 for the real datasets).
pub fn parse_cifar(bytes: &[u8], format: CifarFormat, side: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if side == 0 {
        return Err(Error::Data("image side must be >= 1".into()));
    }
    let rec = format.record_len(side);
    if bytes.len() % rec != 0 {
        return Err(Error::Data(format!(
            "malformed record: {} bytes is not a multiple of {rec}",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * (rec - format.label_bytes()));
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[format.label_bytes() - 1] as usize;
        if label >= format.classes() {
            return Err(Error::Data(format!("record {i}: label byte {label} >= {}", format.classes())));
        }
        labels.push(label);
        pixels.extend(r[format.label_bytes()..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((pixels, labels))
}

/// Loads and concatenates binary batch files in the given order.
pub fn load_cifar_binary<P: AsRef<Path>>(
    paths: &[P],
    format: CifarFormat,
    side: usize,
    split: Split,
) -> Result<LabeledImages> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        let (px, lb) = parse_cifar(&bytes, format, side).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", p.display())),
            other => other,
        })?;
        pixels.extend(px);
        labels.extend(lb);
    }
    if labels.is_empty() {
        return Err(Error::Data("no records found".into()));
    }
    let images = Tensor::from_vec(&[labels.len(), 3, side, side], pixels)?;
    LabeledImages::new(images, labels, format.classes(), split)
}

pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledImages> {
    load_cifar_binary(paths, CifarFormat::Cifar10, CIFAR_SIDE, Split::Train)
}

/// Quantizes a `[0, 1]` value to a byte.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes 3-channel square images in CIFAR record layout.
pub fn write_cifar_binary(path: &Path, data: &LabeledImages, format: CifarFormat) -> Result<()> {
    let [c, h, w] = data.image_shape();
    if c != 3 || h != w {
        return Err(Error::Data(format!("records need 3 square channels, got {c}x{h}x{w}")));
    }
    if data.class_count > format.classes() {
        return Err(Error::Data(format!("{} classes do not fit {format:?}", data.class_count)));
    }
    let px = c * h * w;
    let mut out = Vec::with_capacity(data.len() * (format.label_bytes() + px));
    for (i, &l) in data.labels.iter().enumerate() {
        if format == CifarFormat::Cifar100 {
            out.push(0);
        }
        out.push(l as u8);
        out.extend(data.images.data()[i * px..(i + 1) * px].iter().map(|&v| to_byte(v)));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Deterministic disjoint split; returns `(train, val)`.
pub fn split_train_val(data: &LabeledImages, n_val: usize, seed: u64) -> Result<(LabeledImages, LabeledImages)> {
    if n_val >= data.len() {
        return Err(Error::Data(format!("n_val {n_val} must be < N = {}", data.len())));
    }
    if n_val == 0 {
        return Err(Error::Data("n_val must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = data.select(&idx[..n_val], Split::Val)?;
    let train = data.select(&idx[n_val..], Split::Train)?;
    Ok((train, val))
}

/// Per-channel normalization constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormSpec {
    pub fn identity(channels: usize) -> Self {
        NormSpec { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Mean and population std per channel. Zero std falls back to 1.
    pub fn from_images(images: &Tensor) -> Result<Self> {
        let d = images.dims();
        if d.len() != 4 {
            return Err(Error::Data(format!("expected [N,C,H,W], got {d:?}")));
        }
        let (n, c, hw) = (d[0], d[1], d[2] * d[3]);
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (ch, m) in mean.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..n {
                s += images.data()[(i * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            *m = s / count;
        }
        for (ch, v) in var.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..n {
                s += images.data()[(i * c + ch) * hw..][..hw].iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
            }
            *v = s / count;
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(NormSpec { mean, std })
    }

    fn check(&self, t: &Tensor) -> Result<(usize, usize, usize)> {
        let d = t.dims();
        if d.len() != 4 || d[1] != self.mean.len() {
            return Err(Error::Data(format!("norm for {} channels cannot apply to {d:?}", self.mean.len())));
        }
        Ok((d[0], d[1], d[2] * d[3]))
    }

    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, hw) = self.check(images)?;
        let mut out = images.clone().into_data();
        for (k, v) in out.iter_mut().enumerate() {
            let ch = (k / hw) % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        Tensor::from_vec(images.dims(), out)
    }

    pub fn invert(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, hw) = self.check(images)?;
        let mut out = images.clone().into_data();
        for (k, v) in out.iter_mut().enumerate() {
            let ch = (k / hw) % c;
            *v = *v * self.std[ch] + self.mean[ch];
        }
        Tensor::from_vec(images.dims(), out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub pad: usize,
    /// Output side; `None` keeps the input side.
    pub crop: Option<usize>,
    pub hflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { pad: 4, crop: None, hflip_prob: 0.5 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { pad: 0, crop: None, hflip_prob: 0.0 }
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} not in [0,1]", self.hflip_prob)));
        }
        let crop = self.crop.unwrap_or(side);
        if crop == 0 || crop > side + 2 * self.pad {
            return Err(Error::Config(format!("crop {crop} must be in 1..={}", side + 2 * self.pad)));
        }
        Ok(())
    }
}

/// Top-left corner of a crop inside the padded image, uniform over all
/// `positions x positions` placements.
pub fn sample_crop_offset<R: Rng>(rng: &mut R, positions: usize) -> (usize, usize) {
    let y = rng.random_range(0..positions);
    let x = rng.random_range(0..positions);
    (y, x)
}

/// Mirrors every image of a `[N, C, H, W]` batch left to right.
pub fn hflip(images: &Tensor) -> Result<Tensor> {
    let d = images.dims();
    if d.len() != 4 {
        return Err(Error::Data(format!("expected [N,C,H,W], got {d:?}")));
    }
    let w = d[3];
    let mut out = images.clone().into_data();
    for row in out.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::from_vec(d, out)
}

/// Zero-pad, random crop and random horizontal flip per image, then
/// normalization. Draws `(dy, dx, flip)` per image in batch order.
pub fn augment<R: Rng>(images: &Tensor, config: &AugmentConfig, norm: &NormSpec, rng: &mut R) -> Result<Tensor> {
    let d = images.dims();
    if d.len() != 4 || d[2] != d[3] {
        return Err(Error::Data(format!("augment expects square [N,C,H,W], got {d:?}")));
    }
    let (n, c, side) = (d[0], d[1], d[2]);
    config.validate(side)?;
    let pad = config.pad;
    let crop = config.crop.unwrap_or(side);
    let positions = side + 2 * pad - crop + 1;
    let src = images.data();
    let mut out = vec![0.0; n * c * crop * crop];
    for i in 0..n {
        let (oy, ox) = sample_crop_offset(rng, positions);
        let flip = rng.random::<f64>() < config.hflip_prob;
        for ch in 0..c {
            let base_in = (i * c + ch) * side * side;
            let base_out = (i * c + ch) * crop * crop;
            for y in 0..crop {
                // row in unpadded coordinates
                let sy = (y + oy) as isize - pad as isize;
                if sy < 0 || sy >= side as isize {
                    continue;
                }
                for x in 0..crop {
                    let sx = (x + ox) as isize - pad as isize;
                    if sx < 0 || sx >= side as isize {
                        continue;
                    }
                    let dx = if flip { crop - 1 - x } else { x };
                    out[base_out + y * crop + dx] = src[base_in + sy as usize * side + sx as usize];
                }
            }
        }
    }
    norm.apply(&Tensor::from_vec(&[n, c, crop, crop], out)?)
}

/// Two-class planted-distractor images: a centered disc (class 0) or cross
/// (class 1) inside, and a border band of random rectangles and stripes that
/// never depends on the label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub hw: usize,
    pub border: usize,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { n: 2000, hw: 32, border: 6, amplitude: 0.5, noise_sigma: 0.1, seed: 0 }
    }
}

const BACKGROUND: f64 = 0.5;
const STREAM_LABELS: u64 = 1;
const STREAM_BORDER: u64 = 2;
const STREAM_NOISE: u64 = 3;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Data("synthetic n must be >= 1".into()));
        }
        if self.border == 0 || 2 * self.border >= self.hw || self.hw - 2 * self.border < 3 {
            return Err(Error::Data(format!(
                "border {} leaves no interior for side {} (need border >= 1 and side - 2*border >= 3)",
                self.border, self.hw
            )));
        }
        if !(self.amplitude.is_finite() && self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Data("amplitude and noise_sigma must be finite, sigma >= 0".into()));
        }
        Ok(())
    }

    pub fn is_border(&self, y: usize, x: usize) -> bool {
        let b = self.border;
        y < b || x < b || y >= self.hw - b || x >= self.hw - b
    }
}

fn stream_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

/// Renders image `index` as if it had label `label`. Border content and noise
/// depend only on `(seed, index)`.
pub fn synth_image(spec: &SyntheticSpec, index: usize, label: usize) -> Vec<f64> {
    let (hw, b) = (spec.hw, spec.border);
    let plane = hw * hw;
    let mut img = vec![BACKGROUND; 3 * plane];

    let mut br = stream_rng(spec.seed, STREAM_BORDER, index);
    let pieces = br.random_range(2..=5);
    for _ in 0..pieces {
        let color: [f64; 3] = [br.random(), br.random(), br.random()];
        let h = br.random_range(1..=b.max(1) + 2);
        let w = br.random_range(1..=hw / 2);
        let (h, w) = if br.random::<bool>() { (h, w) } else { (w, h) };
        let y0 = br.random_range(0..hw);
        let x0 = br.random_range(0..hw);
        for y in y0..(y0 + h).min(hw) {
            for x in x0..(x0 + w).min(hw) {
                if spec.is_border(y, x) {
                    for (ch, &v) in color.iter().enumerate() {
                        img[ch * plane + y * hw + x] = v;
                    }
                }
            }
        }
    }
    if br.random::<bool>() {
        let period = br.random_range(2..=4);
        let level: f64 = br.random();
        for y in 0..hw {
            for x in 0..hw {
                if spec.is_border(y, x) && (y + x) % period == 0 {
                    for ch in 0..3 {
                        img[ch * plane + y * hw + x] = level;
                    }
                }
            }
        }
    }

    let inner = hw - 2 * b;
    let c = (hw as f64 - 1.0) / 2.0;
    let radius = inner as f64 * 0.35;
    let arm = (inner as f64 * 0.12).max(0.5);
    for y in b..hw - b {
        for x in b..hw - b {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            let on = if label == 0 {
                dy * dy + dx * dx <= radius * radius
            } else {
                (dy.abs() <= arm && dx.abs() <= radius) || (dx.abs() <= arm && dy.abs() <= radius)
            };
            if on {
                for ch in 0..3 {
                    img[ch * plane + y * hw + x] += spec.amplitude;
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let mut nr = stream_rng(spec.seed, STREAM_NOISE, index);
        for v in img.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut nr);
            *v += spec.noise_sigma * z;
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<LabeledImages> {
    spec.validate()?;
    let mut lr = ChaCha8Rng::seed_from_u64(spec.seed);
    lr.set_stream(STREAM_LABELS);
    let labels: Vec<usize> = (0..spec.n).map(|_| lr.random_range(0..2)).collect();
    let mut pixels = Vec::with_capacity(spec.n * 3 * spec.hw * spec.hw);
    for (i, &l) in labels.iter().enumerate() {
        pixels.extend(synth_image(spec, i, l));
    }
    let images = Tensor::from_vec(&[spec.n, 3, spec.hw, spec.hw], pixels)?;
    LabeledImages::new(images, labels, 2, Split::Train)
}
