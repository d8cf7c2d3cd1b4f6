use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": { "generator": { "subjects": 2, "sessions": 4, "trials_per_session": 6,
                           "conditions": ["silent", "rest", "read"] } },
  "model": { "d": 8, "layers": 1, "heads": 2, "ffn_dim": 8, "conv_kernel": 3 },
  "pretrain": { "mstp": { "epochs": 1, "batch": 8 },
                "astp": { "stage": "astp", "epochs": 1, "batch": 8 } },
  "finetune": { "epochs": 1, "batch": 4 },
  "forecast": { "max_segments": 2, "overlays": 1 },
  "seed": 3
}"#;

fn lblm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lblm"))
        .current_dir(dir)
        .env_remove("LBLM_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = lblm(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn pipeline(dir: &Path) {
    std::fs::write(dir.join("cfg.json"), TINY).unwrap();
    let c = ["--config", "cfg.json", "-q"];
    let run = |rest: &[&str]| ok(dir, &[&c[..], rest].concat());
    run(&["synth", "--out", "raw.lbd"]);
    run(&["preprocess", "--in", "raw.lbd", "--out", "pre.lbd"]);
    run(&["pretrain", "--stage", "mstp", "--in", "pre.lbd", "--out", "mstp.ckpt"]);
    run(&["pretrain", "--stage", "astp", "--in", "pre.lbd", "--init", "mstp.ckpt", "--out", "astp.ckpt"]);
    run(&["finetune", "--task", "semantic6", "--in", "pre.lbd", "--init", "astp.ckpt", "--out", "ft.ckpt"]);
    let line = run(&["eval", "--checkpoint", "ft.ckpt", "--task", "semantic6", "--in", "pre.lbd", "--out", "eval.json"]);
    assert!(line.contains("test_accuracy="));
    run(&["forecast", "--checkpoint", "astp.ckpt", "--ladder", "204:46,114:136", "--in", "pre.lbd", "--out", "fc"]);
    run(&["analyze", "--in", "pre.lbd", "--out", "fscore.csv"]);
    run(&["plot", "--in", "fc.overlay.csv", "--out", "overlay.svg"]);
    run(&["plot", "--in", "mstp.ckpt.log.csv", "--out", "loss.svg"]);
}

#[test]
fn quickstart_end_to_end_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["fc.csv", "fc.summary.csv", "fc.overlay.csv", "fscore.csv", "eval.json", "ft.ckpt.val.json"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    for f in ["mstp.ckpt", "astp.ckpt", "ft.ckpt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let csv = read(a.path(), "fc.csv");
    let hash = csv.lines().next().unwrap().strip_prefix("# config_hash=").unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert!(csv.contains(",persistence,") && csv.contains(",last_patch,"));
    for f in ["fscore.csv", "fc.overlay.csv", "fc.summary.csv", "mstp.ckpt.log.csv", "ft.ckpt.log.csv"] {
        assert!(read(a.path(), f).starts_with(&format!("# config_hash={hash}")), "{f}");
    }
    assert!(read(a.path(), "eval.json").contains(&hash));
    assert!(read(a.path(), "overlay.svg").contains(&hash));
    assert!(read(a.path(), "overlay.svg").contains("prediction-start"));
    let fs = read(a.path(), "fscore.csv");
    assert!(fs.contains("rest-silent") && fs.contains("read-silent"));
}

#[test]
fn seed_flag_beats_env_and_changes_output() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("cfg.json"), TINY).unwrap();
    let synth = |extra: &[&str], env: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_lblm"));
        cmd.current_dir(d.path()).env_remove("LBLM_SEED");
        if let Some(v) = env {
            cmd.env("LBLM_SEED", v);
        }
        let o = cmd
            .args(["--config", "cfg.json", "-q", "synth", "--out", out])
            .args(extra)
            .output()
            .unwrap();
        assert!(o.status.success());
        std::fs::read(d.path().join(out)).unwrap()
    };
    let cfg_seed = synth(&[], None, "a.lbd");
    let env_seed = synth(&[], Some("9"), "b.lbd");
    let flag_seed = synth(&["--seed", "9"], Some("4"), "c.lbd");
    assert_ne!(cfg_seed, env_seed);
    assert_eq!(env_seed, flag_seed);
}

fn error_of(o: &Output) -> serde_json::Value {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(err.lines().last().unwrap()).unwrap()
}

#[test]
fn astp_without_init_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let o = lblm(d.path(), &["-q", "pretrain", "--stage", "astp", "--in", "missing.lbd", "--out", "x.ckpt"]);
    assert_eq!(error_of(&o)["error"], "stage_order");
    assert!(!d.path().join("x.ckpt").exists());
}

#[test]
fn config_violations_exit_nonzero() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.json"), r#"{"model": {"dim": 8}}"#).unwrap();
    let o = lblm(d.path(), &["--config", "bad.json", "synth", "--out", "x.lbd"]);
    assert_eq!(error_of(&o)["error"], "json");
    assert!(!d.path().join("x.lbd").exists());
    let o = lblm(d.path(), &["-q", "preprocess", "--in", "nope.lbd", "--out", "y.lbd"]);
    assert_eq!(error_of(&o)["error"], "io");
    let o = lblm(d.path(), &["-q", "forecast", "--checkpoint", "c", "--ladder", "204-46", "--in", "i", "--out", "o"]);
    assert_eq!(error_of(&o)["error"], "config");
    let o = lblm(d.path(), &["-q", "synth", "--out", "raw.lbd"]);
    assert!(o.status.success());
    let o = lblm(d.path(), &["-q", "pretrain", "--stage", "mstp", "--in", "raw.lbd", "--out", "m.ckpt"]);
    assert_eq!(error_of(&o)["error"], "config");
}
