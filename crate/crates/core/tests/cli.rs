//! End-to-end tests of the `cecr` binary: exit codes and output grammar.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use cecr::eval::{intra_class_variance, parse_scatter_csv, METRICS_HEADER, METRICS_SCHEMA};

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cecr(args: &[&str], seed: Option<&str>) -> Outcome {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cecr"));
    cmd.args(args).env_remove("CECR_SEED");
    if let Some(s) = seed {
        cmd.env("CECR_SEED", s);
    }
    let out = cmd.output().expect("run cecr");
    Outcome {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn shipped(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name).display().to_string()
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no `{key}=` in\n{stdout}"))
}

const BLOBS: &str = "
[data]
source = synthetic
classes = 2
per_class = 12
test_per_class = 6
dim = 6
spread = 0.15
pairs_per_class = 10
";

fn write_config(dir: &Path, name: &str, model: &str, train: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("[model]\n{model}\n{BLOBS}\n[train]\n{train}\n")).unwrap();
    path
}

const CEC: &str = "kind = cec\nlayers = 6,4\nclasses = 2";

#[test]
fn shipped_gradcheck_configs_pass() {
    for name in ["tiny_class_encoder.cfg", "tiny_cec.cfg", "tiny_dcec.cfg", "tiny_dcec_detach.cfg"] {
        let out = cecr(&["gradcheck", "--config", &shipped(name)], None);
        assert_eq!(out.code, 0, "{name}:\n{}{}", out.stdout, out.stderr);
        assert_eq!(value(&out.stdout, "result"), "pass");
        let err: f64 = value(&out.stdout, "max_relative_error").parse().unwrap();
        assert!(err < 1e-5);
    }
}

#[test]
fn sabotaged_gradcheck_fails() {
    let out = cecr(&["gradcheck", "--config", &shipped("tiny_cec.cfg"), "--sabotage"], None);
    assert_eq!(out.code, 1);
    assert_eq!(value(&out.stdout, "result"), "fail");
    let err: f64 = value(&out.stdout, "max_relative_error").parse().unwrap();
    assert!((err - 2.0).abs() < 1e-6);
}

#[test]
fn zero_epochs_writes_initial_checkpoint_and_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", CEC, "epochs = 0\nbatch_size = 4");
    let ckpt = dir.path().join("out/run.ckpt");
    let metrics = dir.path().join("m.csv");
    let args = ["train", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--out", metrics.to_str().unwrap()];
    let out = cecr(&args, None);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let text = fs::read_to_string(&metrics).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, [METRICS_SCHEMA, METRICS_HEADER, lines[2]]);
    assert!(lines[2].starts_with("0,"));
    let loaded = cecr::training::load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.epoch, 0);
    let fresh = cecr::config::RunConfig::load(&cfg).unwrap();
    let net = fresh.arch.build(&mut cecr::Rng::stream(0, cecr::rng::streams::INIT)).unwrap();
    assert_eq!(loaded.net, net);
}

#[test]
fn zero_lambda_cec_and_softmax_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let train = "epochs = 3\nbatch_size = 4\nlambda = 0\nseed = 9";
    let a = write_config(dir.path(), "cec.cfg", CEC, train);
    let b = write_config(dir.path(), "softmax.cfg", "kind = softmax\nlayers = 6,4\nclasses = 2", train);
    let mut csvs = Vec::new();
    for (cfg, tag) in [(a, "a"), (b, "b")] {
        let m = dir.path().join(format!("{tag}.csv"));
        let c = dir.path().join(format!("{tag}.ckpt"));
        let out = cecr(&["train", "--config", cfg.to_str().unwrap(), "--checkpoint", c.to_str().unwrap(), "--out", m.to_str().unwrap()], None);
        assert_eq!(out.code, 0, "{}", out.stderr);
        csvs.push(fs::read(&m).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn eval_reproduces_the_last_metrics_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", CEC, "epochs = 2\nbatch_size = 4\nlambda = 0.4");
    let (ckpt, metrics) = (dir.path().join("r.ckpt"), dir.path().join("r.csv"));
    let out = cecr(&["train", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--out", metrics.to_str().unwrap()], None);
    assert_eq!(out.code, 0, "{}", out.stderr);

    let out = cecr(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()], None);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert_eq!(out.stdout.lines().filter(|l| l.starts_with("test_error_pct=")).count(), 1);
    assert!(out.stdout.lines().all(|l| l.split_once('=').is_some()));
    let text = fs::read_to_string(&metrics).unwrap();
    let last: Vec<&str> = text.lines().last().unwrap().split(',').collect();
    for (key, expected) in METRICS_HEADER.split(',').zip(last) {
        assert_eq!(value(&out.stdout, key), expected, "{key}");
    }
}

#[test]
fn seed_override_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", CEC, "epochs = 2\nbatch_size = 4\nlambda = 0.4");
    let run = |tag: &str, seed: Option<&str>| {
        let m = dir.path().join(format!("{tag}.csv"));
        let c = dir.path().join(format!("{tag}.ckpt"));
        let out = cecr(&["train", "--config", cfg.to_str().unwrap(), "--checkpoint", c.to_str().unwrap(), "--out", m.to_str().unwrap()], seed);
        assert_eq!(out.code, 0, "{}", out.stderr);
        (fs::read(&m).unwrap(), fs::read(&c).unwrap())
    };
    let a = run("a", None);
    assert_eq!(a, run("b", None));
    assert_eq!(a, run("c", Some("0")));
    assert_ne!(a.0, run("d", Some("17")).0);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let full = write_config(dir.path(), "full.cfg", CEC, "epochs = 4\nbatch_size = 4\nlambda = 0.4");
    let half = write_config(dir.path(), "half.cfg", CEC, "epochs = 2\nbatch_size = 4\nlambda = 0.4");
    let p = |n: &str| dir.path().join(n).display().to_string();
    assert_eq!(cecr(&["train", "--config", full.to_str().unwrap(), "--checkpoint", &p("full.ckpt"), "--out", &p("full.csv")], None).code, 0);
    assert_eq!(cecr(&["train", "--config", half.to_str().unwrap(), "--checkpoint", &p("half.ckpt"), "--out", &p("resumed.csv")], None).code, 0);
    let out = cecr(
        &["train", "--config", full.to_str().unwrap(), "--resume", &p("half.ckpt"), "--checkpoint", &p("resumed.ckpt"), "--out", &p("resumed.csv")],
        None,
    );
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert_eq!(fs::read(p("full.ckpt")).unwrap(), fs::read(p("resumed.ckpt")).unwrap());
    assert_eq!(fs::read(p("full.csv")).unwrap(), fs::read(p("resumed.csv")).unwrap());
}

#[test]
fn scatter_exports_and_rejects_unknown_layers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", CEC, "epochs = 0\nbatch_size = 4");
    let p = |n: &str| dir.path().join(n).display().to_string();
    assert_eq!(cecr(&["train", "--config", cfg.to_str().unwrap(), "--checkpoint", &p("r.ckpt")], None).code, 0);
    let out = cecr(&["scatter", "--config", cfg.to_str().unwrap(), "--checkpoint", &p("r.ckpt"), "--out", &p("s.csv")], None);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert_eq!(value(&out.stdout, "layer"), "h1");
    let (coords, labels) = parse_scatter_csv(&fs::read_to_string(p("s.csv")).unwrap()).unwrap();
    assert_eq!(coords.shape(), &[12, 2]);
    assert!(labels.iter().all(|&l| l < 2));

    let out = cecr(&["scatter", "--config", cfg.to_str().unwrap(), "--checkpoint", &p("r.ckpt"), "--out", &p("t.csv"), "--layer", "h9"], None);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("h1, softmax, z"), "{}", out.stderr);
    assert!(!Path::new(&p("t.csv")).exists());

    let out = cecr(&["scatter", "--config", cfg.to_str().unwrap(), "--checkpoint", &p("r.ckpt")], None);
    assert_eq!(out.code, 2);
}

#[test]
fn trained_class_encoder_scatter_is_tighter() {
    let dir = tempfile::tempdir().unwrap();
    let model = "kind = class_encoder\nlayers = 50,10";
    let data = "[data]\nsource = synthetic\nclasses = 3\nper_class = 40\ntest_per_class = 40\ndim = 50\nspread = 0.3\npairs_per_class = 200\neval = train\n";
    let spread = |epochs: usize| {
        let cfg = dir.path().join(format!("e{epochs}.cfg"));
        fs::write(&cfg, format!("[model]\n{model}\n{data}[train]\nepochs = {epochs}\nlr = 2\nbatch_size = 16\nseed = 3\n")).unwrap();
        let p = |n: &str| dir.path().join(format!("{epochs}{n}")).display().to_string();
        assert_eq!(cecr(&["train", "--config", cfg.to_str().unwrap(), "--checkpoint", &p(".ckpt")], None).code, 0);
        let out = cecr(&["scatter", "--config", cfg.to_str().unwrap(), "--checkpoint", &p(".ckpt"), "--out", &p(".csv")], None);
        assert_eq!(out.code, 0, "{}", out.stderr);
        let (coords, labels) = parse_scatter_csv(&fs::read_to_string(p(".csv")).unwrap()).unwrap();
        intra_class_variance(&coords, &labels, 3).unwrap().mean
    };
    let (untrained, trained) = (spread(0), spread(20));
    assert!(trained < untrained, "{untrained} -> {trained}");
}

#[test]
fn checkpoint_class_count_must_match_data() {
    let dir = tempfile::tempdir().unwrap();
    let ten = dir.path().join("ten.cfg");
    fs::write(
        &ten,
        "[model]\nkind = cec\nlayers = 6,4\nclasses = 10\n[data]\nsource = synthetic\nclasses = 10\nper_class = 3\ntest_per_class = 2\ndim = 6\nspread = 0.1\npairs_per_class = 2\n[train]\nepochs = 0\n",
    )
    .unwrap();
    let two = write_config(dir.path(), "two.cfg", CEC, "epochs = 0");
    let ckpt = dir.path().join("ten.ckpt").display().to_string();
    assert_eq!(cecr(&["train", "--config", ten.to_str().unwrap(), "--checkpoint", &ckpt], None).code, 0);
    let out = cecr(&["eval", "--config", two.to_str().unwrap(), "--checkpoint", &ckpt], None);
    assert_eq!(out.code, 2, "{}", out.stderr);
    assert!(out.stderr.contains("10 classes"), "{}", out.stderr);
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cfg");
    assert_eq!(cecr(&["train", "--config", missing.to_str().unwrap()], None).code, 4);

    let typo = write_config(dir.path(), "typo.cfg", CEC, "epocs = 1");
    let out = cecr(&["train", "--config", typo.to_str().unwrap(), "--checkpoint", "x"], None);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("epocs"));

    let classifier = write_config(dir.path(), "cls.cfg", "kind = classifier\nlayers = 6,4\nclasses = 2", "lambda = 0.1");
    let ckpt = dir.path().join("c.ckpt").display().to_string();
    assert_eq!(cecr(&["train", "--config", classifier.to_str().unwrap(), "--checkpoint", &ckpt], None).code, 2);

    let good = write_config(dir.path(), "good.cfg", CEC, "epochs = 0");
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"CECR\x07\x00\x00\x00").unwrap();
    assert_eq!(cecr(&["eval", "--config", good.to_str().unwrap(), "--checkpoint", junk.to_str().unwrap()], None).code, 4);

    let wild = write_config(dir.path(), "wild.cfg", CEC, "lr = 1e308\nbatch_size = 4\nepochs = 3");
    let out = cecr(&["train", "--config", wild.to_str().unwrap(), "--checkpoint", &ckpt], None);
    assert_eq!(out.code, 3, "{}", out.stderr);
    assert!(out.stderr.contains("batch"), "{}", out.stderr);

    let out = cecr(&["bogus", "--config", good.to_str().unwrap()], None);
    assert_eq!(out.code, 2);
}

#[test]
fn pretrain_reports_each_encoder_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p.cfg", "kind = cec\nlayers = 6,5,4\nclasses = 2", "pretrain = dae\npretrain_epochs = 3\nbatch_size = 4\nlr = 0.1");
    let ckpt = dir.path().join("p.ckpt");
    let out = cecr(&["pretrain", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()], None);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let layers: Vec<&str> = out.stdout.lines().filter_map(|l| l.strip_prefix("layer=")).collect();
    assert_eq!(layers, ["h1", "h2"]);
    assert_eq!(cecr::training::load_checkpoint(&ckpt).unwrap().epoch, 0);

    let plain = write_config(dir.path(), "q.cfg", CEC, "");
    assert_eq!(cecr(&["pretrain", "--config", plain.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()], None).code, 2);
}
