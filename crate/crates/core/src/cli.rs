//! The `ignet` command-line tool.
//!
//! Exit codes: 0 ok, 1 other failure, 2 configuration, 3 data, 4 numeric
//! failure (including failed gradient checks), 5 checkpoint.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cam::{bilinear_resize, grad_cam, ignore_mask_stats, write_overlay_ppm, write_pgm, RegionStats};
use crate::checkpoint::Checkpoint;
use crate::config::{DataKind, DataSection, RunConfig};
use crate::data::{
    load_cifar_binary, split_train_val, synth_generate, write_cifar_binary, CifarFormat, LabeledImages, Split,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::model::Model;
use crate::nn::Mode;
use crate::tensor::Tensor;
use crate::train::{evaluate, fit_with, EpochRecord, TrainConfig};
use crate::Tape;

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_loss,val_top1,val_top5";

#[derive(Parser, Debug)]
#[command(name = "ignet", version, about = "Attention and learning-to-ignore blocks on a mini residual network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per seed and write metrics, checkpoints and a summary.
    Train(TrainArgs),
    /// Top-1/top-5 error of a checkpoint on a record file.
    Eval(EvalArgs),
    /// Compare backward rules with finite differences.
    Gradcheck(GradcheckArgs),
    /// Grad-CAM heatmaps, overlays and border/interior statistics.
    Cam(CamArgs),
    /// Write a planted-distractor dataset as CIFAR-10 style records.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `train.epochs=5` or `attention=se-ign2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Cifar10,
    Cifar100,
}

impl From<FormatArg> for CifarFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Cifar10 => CifarFormat::Cifar10,
            FormatArg::Cifar100 => CifarFormat::Cifar100,
        }
    }
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Record files, read in order.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "cifar10")]
    format: FormatArg,
    /// Image side of the records.
    #[arg(long, default_value_t = 32)]
    side: usize,
    /// Use only the first N records (0 = all).
    #[arg(long, default_value_t = 0)]
    limit: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Also write the metrics to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// `all`, `primitives`, `blocks`, a case name, or a prefix ending in `*`.
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Record indices to visualize.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    indices: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    /// `stem` or `stageS.unitU`; defaults to the last unit.
    #[arg(long)]
    layer: Option<String>,
    /// Class to explain; defaults to each image's label.
    #[arg(long)]
    class: Option<usize>,
    /// Border frame width in input pixels for the region statistics.
    #[arg(long, default_value_t = 4)]
    border_width: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    hw: usize,
    #[arg(long, default_value_t = 6)]
    border: usize,
    #[arg(long, default_value_t = 0.5)]
    amplitude: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Data(_) => 3,
        Error::NonFinite(_) => 4,
        Error::Checkpoint(_) => 5,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Cam(a) => cmd_cam(&a),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// `(train, val)` as described by the data section.
pub fn load_run_data(d: &DataSection) -> Result<(LabeledImages, LabeledImages)> {
    let all = match d.kind {
        DataKind::Synthetic => synth_generate(&d.synthetic)?,
        DataKind::Cifar10 | DataKind::Cifar100 => {
            if d.train_files.is_empty() {
                return Err(Error::Data("data.train_files is empty".into()));
            }
            let fmt = if d.kind == DataKind::Cifar10 { CifarFormat::Cifar10 } else { CifarFormat::Cifar100 };
            load_cifar_binary(&d.train_files, fmt, d.side, Split::Train)?
        }
    };
    let all = if d.limit > 0 { all.head(d.limit)? } else { all };
    split_train_val(&all, d.n_val, d.split_seed)
}

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.val_loss, r.val_top1, r.val_top5);
    }
    s
}

/// Mean and sample standard deviation; the deviation is `None` for fewer
/// than two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

fn summary_csv(rows: &[(u64, EpochRecord)]) -> String {
    let mut s = String::from("run,best_epoch,val_top1,val_top5,val_loss\n");
    for (seed, r) in rows {
        let _ = writeln!(s, "seed{seed},{},{},{},{}", r.epoch, r.val_top1, r.val_top5, r.val_loss);
    }
    let cols: [fn(&EpochRecord) -> f64; 3] = [|r| r.val_top1, |r| r.val_top5, |r| r.val_loss];
    let stats: Vec<(f64, Option<f64>)> =
        cols.iter().map(|f| mean_std(&rows.iter().map(|(_, r)| f(r)).collect::<Vec<_>>())).collect();
    let _ = writeln!(s, "mean,,{},{},{}", stats[0].0, stats[1].0, stats[2].0);
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let _ = writeln!(s, "std,,{},{},{}", fmt(stats[0].1), fmt(stats[1].1), fmt(stats[2].1));
    s
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p, &a.set)?,
        None => RunConfig::parse("", &a.set)?,
    };
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let (train, val) = load_run_data(&cfg.data)?;
    let mcfg = cfg.model.to_model_config(train.class_count, train.image_shape())?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut model = Model::build(mcfg.clone(), seed)?;
        let tcfg = TrainConfig { seed, ..cfg.train.clone() };
        let history = fit_with(&mut model, &train, &val, &tcfg, |r| {
            if !a.quiet {
                eprintln!(
                    "seed {seed} epoch {}/{} lr {} train_loss {:.4} val_loss {:.4} val_top1 {:.2}",
                    r.epoch, tcfg.epochs, r.lr, r.train_loss, r.val_loss, r.val_top1
                );
            }
        })?;
        let dir = out.join(format!("seed{seed}"));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&history.records))?;
        if let Some(best) = &history.best {
            best.restore(&mut model)?;
            let ck = Checkpoint::from_model(&mut model, history.norm.clone(), best.epoch as u64, seed, Some(&best.velocities));
            ck.save(&dir.join("best.ckpt"))?;
        }
        if let Some(msg) = &history.aborted {
            return Err(Error::NonFinite(format!("seed {seed}: {msg}")));
        }
        if let Some(r) = history.best_record() {
            rows.push((seed, *r));
        }
    }
    if !rows.is_empty() {
        fs::write(out.join("summary.csv"), summary_csv(&rows))?;
    }
    Ok(0)
}

fn load_eval_data(d: &DataArgs, split: Split) -> Result<LabeledImages> {
    let data = load_cifar_binary(&d.data, d.format.into(), d.side, split)?;
    if d.limit > 0 {
        data.head(d.limit)
    } else {
        Ok(data)
    }
}

fn check_compatible(model: &Model, data: &LabeledImages) -> Result<()> {
    let cfg = model.config();
    if data.image_shape() != cfg.input_shape {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {:?} images, data has {:?}",
            cfg.input_shape,
            data.image_shape()
        )));
    }
    if let Some(&l) = data.labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::Checkpoint(format!("label {l} but the checkpoint has {} classes", cfg.num_classes)));
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut model = ck.to_model()?;
    let data = load_eval_data(&a.data, Split::Test)?;
    check_compatible(&model, &data)?;
    let x = ck.norm.apply(&data.images).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let (m, _) = evaluate(&mut model, &x, &data.labels, a.batch_size)?;
    println!("images {} loss {} top1_error {} top5_error {}", data.len(), m.loss, m.top1, m.top5);
    if let Some(p) = &a.out {
        fs::write(p, format!("n,loss,top1_error,top5_error\n{},{},{},{}\n", data.len(), m.loss, m.top1, m.top5))?;
    }
    Ok(0)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let results = gradcheck::run(&a.scope, a.seed)?;
    println!("{:<24} {:<10} {:>6} {:>12}  status", "case", "group", "shapes", "max_rel_err");
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        println!("{:<24} {:<10} {:>6} {:>12.3e}  {status}", r.name, r.group.to_string(), r.shapes, r.max_rel_err);
    }
    println!("{} cases, {failed} failed (tolerance {:e})", results.len(), gradcheck::TOLERANCE);
    Ok(if failed == 0 { 0 } else { 4 })
}

/// Spatial ignoring response of the first unit that has one, resized to
/// `h x w`.
pub fn spatial_response(model: &mut Model, image: &Tensor) -> Result<Option<Tensor>> {
    let d = image.dims();
    let mut tape = Tape::new();
    let x = tape.constant(image.reshape(&[1, d[0], d[1], d[2]])?);
    let out = model.forward(&mut tape, x, Mode::Eval)?;
    let Some(sp) = out.units.iter().find_map(|u| u.spatial) else {
        return Ok(None);
    };
    let r = tape.value(sp.response);
    let rd = r.dims();
    let map = r.reshape(&[rd[2], rd[3]])?;
    Ok(Some(bilinear_resize(&map, d[1], d[2])?))
}

fn stats_fields(s: Option<RegionStats>) -> String {
    match s {
        Some(s) => format!("{},{}", s.border_mean, s.interior_mean),
        None => ",".into(),
    }
}

fn cmd_cam(a: &CamArgs) -> Result<i32> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut model = ck.to_model()?;
    let data = load_eval_data(&a.data, Split::Test)?;
    check_compatible(&model, &data)?;
    fs::create_dir_all(&a.out)?;
    let mut csv = String::from("index,label,class,layer,cam_border_mean,cam_interior_mean,ignore_border_mean,ignore_interior_mean,border_width\n");
    for &i in &a.indices {
        if i >= data.len() {
            return Err(Error::Data(format!("index {i} out of range for {} images", data.len())));
        }
        let raw = data.images.select_rows(&[i])?;
        let norm = ck.norm.apply(&raw).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let d = raw.dims().to_vec();
        let raw = raw.reshape(&d[1..])?;
        let norm = norm.reshape(&d[1..])?;
        let class = a.class.unwrap_or(data.labels[i]);
        let heat = grad_cam(&mut model, &norm, class, a.layer.as_deref())?;
        write_pgm(&a.out.join(format!("img{i}_cam.pgm")), &heat.values)?;
        write_overlay_ppm(&a.out.join(format!("img{i}_overlay.ppm")), &heat.values, &raw)?;
        let cam_stats = ignore_mask_stats(&heat.values, a.border_width)?;
        let ign_stats = match spatial_response(&mut model, &norm)? {
            Some(r) => Some(ignore_mask_stats(&r, a.border_width)?),
            None => None,
        };
        let _ = writeln!(
            csv,
            "{i},{},{class},{},{},{},{}",
            data.labels[i],
            heat.source_layer,
            stats_fields(Some(cam_stats)),
            stats_fields(ign_stats),
            a.border_width
        );
    }
    fs::write(a.out.join("region_stats.csv"), csv)?;
    Ok(0)
}

fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let spec = SyntheticSpec {
        n: a.n,
        hw: a.hw,
        border: a.border,
        amplitude: a.amplitude,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
    };
    let data = synth_generate(&spec)?;
    write_cifar_binary(&a.out, &data, CifarFormat::Cifar10)?;
    let h = data.label_histogram();
    println!("wrote {} images ({}x{}) to {}; class counts {:?}", data.len(), a.hw, a.hw, display(&a.out), h);
    Ok(0)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
