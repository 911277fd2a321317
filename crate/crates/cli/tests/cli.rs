use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tangled::model::{load_checkpoint, ModelParams};
use tangled::numerics::Rng;
use tangled_cli::config::RunConfig;

const SMALL: &[&str] = &[
    "num_train=12",
    "num_val=6",
    "vocab_words=40",
    "num_layers=1",
    "hidden=16",
    "num_heads=2",
    "ff_width=32",
    "batch_size=4",
    "steps=3",
];

fn tangled(args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tangled"));
    cmd.args(args);
    for s in SMALL.iter().chain(extra) {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("spawn tangled")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn failure(out: Output) -> String {
    assert!(!out.status.success(), "expected failure, stdout: {}", String::from_utf8_lossy(&out.stdout));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic should be one line: {err:?}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str, extra: &[&str]) {
    ok(tangled(&["gen-data", "--seed", seed, "--out", s(dir)], extra));
}

fn pretrain(data: &Path, out: &Path, seed: &str, extra: &[&str]) -> String {
    ok(tangled(&["pretrain", "--seed", seed, "--data", s(data), "--out", s(out)], extra))
}

#[test]
fn gen_data_and_pretrain_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "5", &[]);
    gen(&b, "5", &[]);
    for f in ["train.abtd", "val.abtd"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    pretrain(&a, &a, "9", &[]);
    pretrain(&a, &b, "9", &[]);
    for f in ["checkpoint.abtc", "loss.log"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(a.join("loss.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        let cols: Vec<&str> = l.split('\t').collect();
        assert_eq!(cols.len(), 6);
        assert_eq!(cols[0], i.to_string());
    }

    let c = tmp.path().join("c");
    gen(&c, "6", &[]);
    assert_ne!(fs::read(a.join("train.abtd")).unwrap(), fs::read(c.join("train.abtd")).unwrap());
}

#[test]
fn eval_reports_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen(d, "2", &[]);
    pretrain(d, d, "2", &[]);
    let ckpt = d.join("checkpoint.abtc");
    let mut texts = Vec::new();
    for sub in ["r1", "r2"] {
        let out = d.join(sub);
        let stdout =
            ok(tangled(&["eval-retrieval", "--data", s(d), "--checkpoint", s(&ckpt), "--out", s(&out)], &[]));
        let file = fs::read_to_string(out.join("retrieval.txt")).unwrap();
        assert_eq!(stdout.trim_end(), file.trim_end());
        for key in ["R@1=", "R@5=", "MedianR="] {
            assert!(file.contains(key), "{file}");
        }
        ok(tangled(&["eval-localize", "--data", s(d), "--checkpoint", s(&ckpt), "--out", s(&out)], &[]));
        texts.push((file, fs::read_to_string(out.join("localization.txt")).unwrap()));
    }
    assert_eq!(texts[0], texts[1]);
    assert!(texts[0].1.contains("localization_accuracy="));
}

#[test]
fn unknown_key_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let err = failure(tangled(&["gen-data", "--seed", "1", "--out", s(tmp.path())], &["colour=red"]));
    assert!(err.contains("colour"), "{err}");
    assert!(!tmp.path().join("train.abtd").exists());

    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "seed = 1\nhidden 16\n").unwrap();
    let err = failure(tangled(&["gen-data", "--config", s(&cfg), "--out", s(tmp.path())], &[]));
    assert!(err.contains(":2"), "{err}");
}

#[test]
fn missing_seed_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let err = failure(tangled(&["gen-data", "--out", s(tmp.path())], &[]));
    assert!(err.contains("seed"), "{err}");
}

#[test]
fn config_file_and_overrides_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# small world\nseed = 4\nnum_train = 7\nnum_val = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tangled"))
        .args(["gen-data", "--config", s(&cfg), "--out", s(tmp.path()), "--set", "num_val=2"])
        .output()
        .unwrap();
    assert!(ok(out).contains("train=7 val=2"));
    let out = Command::new(env!("CARGO_BIN_EXE_tangled"))
        .args(["gen-data", "--config", s(&cfg), "--seed", "5", "--out", s(tmp.path())])
        .output()
        .unwrap();
    assert!(ok(out).contains("train=7 val=3"));
}

#[test]
fn zero_steps_saves_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen(d, "3", &[]);
    pretrain(d, d, "11", &["steps=0"]);
    assert_eq!(fs::read_to_string(d.join("loss.log")).unwrap(), "");
    let saved = load_checkpoint(&d.join("checkpoint.abtc")).unwrap();

    let mut cfg = RunConfig::default();
    for kv in SMALL {
        cfg.apply_override(kv).unwrap();
    }
    cfg.seed = Some(3);
    let world = cfg.world_spec().unwrap();
    let model = cfg.model_config(&world).unwrap();
    let init = ModelParams::init(&model, &mut Rng::new(11).fork(1)).unwrap();
    assert_eq!(saved, init);
}

#[test]
fn dimension_mismatches_fail_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen(d, "1", &["num_actions=4"]);
    let out = d.join("run");
    let err = failure(tangled(&["pretrain", "--seed", "1", "--data", s(d), "--out", s(&out)], &[]));
    assert!(err.contains("num_actions"), "{err}");
    assert!(!out.join("checkpoint.abtc").exists());

    pretrain(d, &out, "1", &["num_actions=4"]);
    let other = d.join("other");
    gen(&other, "1", &["num_actions=4", "num_object_classes=12"]);
    let err = failure(tangled(
        &["eval-retrieval", "--data", s(&other), "--checkpoint", s(&out.join("checkpoint.abtc"))],
        &[],
    ));
    assert!(err.contains("num_object_classes"), "{err}");
}

#[test]
fn untrained_retrieval_is_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen(d, "8", &["num_val=100"]);
    pretrain(d, d, "8", &["steps=0", "init_std=0.07"]);
    let out = ok(tangled(&["eval-retrieval", "--data", s(d), "--checkpoint", s(&d.join("checkpoint.abtc"))], &[]));
    let r1: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("R@1="))
        .expect("R@1 line")
        .parse()
        .unwrap();
    assert!(r1 <= 0.05, "R@1 = {r1}");
    assert!(out.contains("gallery=100"), "{out}");
}
