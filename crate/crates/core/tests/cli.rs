use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ignet::cli::mean_std;
use ignet::data::{load_cifar_binary, split_train_val, write_cifar_binary, CifarFormat, Split};
use statrs::statistics::Statistics;

fn ignet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ignet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = r#"
seeds = [0, 1]

[model]
stem_channels = 4
stages = [{ blocks = 1, channels = 4, stride = 1 }, { blocks = 1, channels = 8, stride = 2 }]
reduction = 2

[train]
batch_size = 16
epochs = 2
milestones = [1]
lr0 = 0.05

[train.augment]
pad = 1

[data]
kind = "cifar10"
side = 12
n_val = 16
split_seed = 5
"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        let o = ignet(&["synth", "--n", "64", "--hw", "12", "--border", "2", "--seed", "3", "--out", s(&f.records())]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let cfg = CONFIG.replace("side = 12", &format!("side = 12\ntrain_files = [{:?}]", s(&f.records())));
        fs::write(f.config(), cfg).unwrap();
        f
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn records(&self) -> std::path::PathBuf {
        self.path("synth.bin")
    }

    fn config(&self) -> std::path::PathBuf {
        self.path("run.toml")
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (out, config) = (self.path(out), self.config());
        let mut args = vec!["train", "--quiet", "--config", s(&config), "--out", s(&out)];
        for e in extra {
            args.extend(["--set", e]);
        }
        ignet(&args)
    }
}

#[test]
fn mean_and_sample_std_match_statrs() {
    let v = [3.5, 1.25, 9.0, 4.0];
    let (m, sd) = mean_std(&v);
    assert!((m - v.mean()).abs() < 1e-12);
    assert!((sd.unwrap() - v.std_dev()).abs() < 1e-12);
    assert_eq!(mean_std(&[2.0]), (2.0, None));
}

#[test]
fn training_reruns_are_byte_identical() {
    let f = Fixture::new();
    for out in ["a", "b"] {
        let o = f.train(out, &["attention=cbam-ign1:alpha=0.5"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["seed0/metrics.csv", "seed1/metrics.csv", "seed0/best.ckpt", "summary.csv", "config.toml"] {
        assert_eq!(fs::read(f.path("a").join(file)).unwrap(), fs::read(f.path("b").join(file)).unwrap(), "{file}");
    }
    let metrics = fs::read_to_string(f.path("a/seed0/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert_eq!(metrics.lines().next().unwrap(), ignet::cli::METRICS_HEADER);

    let summary = fs::read_to_string(f.path("a/summary.csv")).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!((rows[0][0], rows[1][0], rows[2][0], rows[3][0]), ("seed0", "seed1", "mean", "std"));
    for col in 2..5 {
        let v: Vec<f64> = rows[..2].iter().map(|r| r[col].parse().unwrap()).collect();
        let (m, sd) = mean_std(&v);
        assert_eq!(rows[2][col].parse::<f64>().unwrap(), m);
        assert_eq!(rows[3][col].parse::<f64>().unwrap(), sd.unwrap());
    }
}

#[test]
fn zero_alpha_reproduces_plain_network() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("plain", &["attention=none", "seeds=[0]"])), 0);
    assert_eq!(code(&f.train("zero", &["attention=se-ign1:alpha=0", "seeds=[0]"])), 0);
    assert_eq!(
        fs::read(f.path("plain/seed0/metrics.csv")).unwrap(),
        fs::read(f.path("zero/seed0/metrics.csv")).unwrap()
    );
}

#[test]
fn eval_and_cam_on_trained_checkpoint() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("run", &["attention=cbam-ign2"])), 0);
    // rebuild the validation split and write it as records
    let all = load_cifar_binary(&[f.records()], CifarFormat::Cifar10, 12, Split::Train).unwrap();
    let (_, val) = split_train_val(&all, 16, 5).unwrap();
    let val_file = f.path("val.bin");
    write_cifar_binary(&val_file, &val, CifarFormat::Cifar10).unwrap();

    let ck = f.path("run/seed1/best.ckpt");
    let eval = |batch: &str, out: &str| {
        let o = ignet(&[
            "eval", "--checkpoint", s(&ck), "--data", s(&val_file), "--side", "12", "--batch-size", batch, "--out",
            s(&f.path(out)),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let first = eval("5", "e1.csv");
    assert_eq!(first, eval("5", "e2.csv"));
    assert_eq!(fs::read(f.path("e1.csv")).unwrap(), fs::read(f.path("e2.csv")).unwrap());
    let fields: Vec<&str> = first.split_whitespace().collect();
    assert_eq!((fields[0], fields[1]), ("images", "16"));
    let summary = fs::read_to_string(f.path("run/summary.csv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(row[0], "seed1");
    assert_eq!(fields[5].parse::<f64>().unwrap(), row[2].parse::<f64>().unwrap());
    assert!((fields[3].parse::<f64>().unwrap() - row[4].parse::<f64>().unwrap()).abs() < 1e-9);

    let cam = |out: &str| {
        let o = ignet(&[
            "cam", "--checkpoint", s(&ck), "--data", s(&val_file), "--side", "12", "--indices", "0,3,7", "--out",
            s(&f.path(out)), "--border-width", "2",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    cam("c1");
    cam("c2");
    let mut names: Vec<String> =
        fs::read_dir(f.path("c1")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in &names {
        assert_eq!(fs::read(f.path("c1").join(n)).unwrap(), fs::read(f.path("c2").join(n)).unwrap(), "{n}");
    }
    let csv = fs::read_to_string(f.path("c1/region_stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.split(',').all(|c| !c.is_empty())));

    let bad = ignet(&["cam", "--checkpoint", s(&ck), "--data", s(&val_file), "--side", "12", "--indices", "99", "--out", s(&f.path("c3"))]);
    assert_eq!(code(&bad), 3);
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("x", &["attention=se-ign9"])), 2);
    assert_eq!(code(&f.train("x", &["train.lr"])), 2);
    assert_eq!(code(&f.train("x", &["data.train_files=[\"/nonexistent.bin\"]"])), 3);
    assert_eq!(code(&f.train("x", &["data.side=13"])), 3);
    assert_eq!(code(&ignet(&["bogus"])), 2);

    let junk = f.path("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = ignet(&["eval", "--checkpoint", s(&junk), "--data", s(&f.records()), "--side", "12"]);
    assert_eq!(code(&o), 5);

    assert_eq!(code(&f.train("ok", &["seeds=[0]", "train.epochs=1"])), 0);
    let ck = f.path("ok/seed0/best.ckpt");
    let other = f.path("other.bin");
    assert_eq!(code(&ignet(&["synth", "--n", "4", "--hw", "10", "--border", "2", "--out", s(&other)])), 0);
    let o = ignet(&["eval", "--checkpoint", s(&ck), "--data", s(&other), "--side", "10"]);
    assert_eq!(code(&o), 5);

    let o = ignet(&["gradcheck", "--scope", "relu"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("relu") && out.contains("1 cases, 0 failed"));
    assert_eq!(code(&ignet(&["gradcheck", "--scope", "nothing"])), 2);
}
