use std::path::Path;
use std::process::{Command, Output};

fn pushid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pushid")).args(args).arg("--log").arg("warn").output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_TRAIN: &str = r#"
epochs = 1
batch_size = 2
c = 6
window = 3
windows_per_push = 1
val_windows = 1
pushes_per_object = 1

[protocol]
t_h = 1.0
affordances = 4
"#;

const SMALL_EVAL: &str = r#"
c = 6
pushes = 2

[protocol]
t_h = 1.0
affordances = 4
"#;

#[test]
fn gen_population_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        let out = pushid(&["gen-population", "--count", "7", "--seed", "4", "--out", path(p)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 7);
}

#[test]
fn unknown_mode_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let pop = dir.path().join("pop.json");
    assert!(pushid(&["gen-population", "--count", "4", "--out", path(&pop)]).status.success());
    let out = pushid(&["train", "--population", path(&pop), "--out-dir", path(dir.path()), "--mode", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let pop = dir.path().join("pop.json");
    assert!(pushid(&["gen-population", "--count", "4", "--out", path(&pop)]).status.success());
    let bad_syntax = dir.path().join("bad.toml");
    std::fs::write(&bad_syntax, "epochs = [").unwrap();
    let bad_value = dir.path().join("neg.toml");
    std::fs::write(&bad_value, "c = 1").unwrap();
    for cfg in [&bad_syntax, &bad_value] {
        let out = pushid(&["train", "--population", path(&pop), "--out-dir", path(dir.path()), "--config", path(cfg)]);
        assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn missing_checkpoints_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let pop = dir.path().join("pop.json");
    assert!(pushid(&["gen-population", "--count", "2", "--out", path(&pop)]).status.success());
    let out = pushid(&["ablate", "--population", path(&pop), "--checkpoints", path(&dir.path().join("none")), "--out-dir", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_infer_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let pop = dir.path().join("pop.json");
    assert!(pushid(&["gen-population", "--count", "6", "--seed", "2", "--out", path(&pop)]).status.success());
    let tcfg = dir.path().join("train.toml");
    std::fs::write(&tcfg, SMALL_TRAIN).unwrap();
    let run = dir.path().join("run");
    let out = pushid(&[
        "train", "--population", path(&pop), "--config", path(&tcfg), "--out-dir", path(&run), "--mode", "vt-ddf-uniform", "--seed", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoint.json");
    assert!(ckpt.exists());

    let ecfg = dir.path().join("eval.toml");
    std::fs::write(&ecfg, SMALL_EVAL).unwrap();
    let inf = dir.path().join("infer");
    let out = pushid(&[
        "infer", "--checkpoint", path(&ckpt), "--population", path(&pop), "--objects", "0,1", "--config", path(&ecfg), "--out-dir", path(&inf),
        "--mode", "vt-addf",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(inf.join("object-001.svg").exists());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(inf.join("nrmse.json")).unwrap()).unwrap();
    assert!(report["overall"].as_f64().unwrap().is_finite());

    let ckpts = dir.path().join("ckpts");
    for kind in ["dual-active", "dual-uniform", "vision-only", "joint"] {
        std::fs::create_dir_all(ckpts.join(kind)).unwrap();
        std::fs::copy(&ckpt, ckpts.join(kind).join("checkpoint.json")).unwrap();
    }
    let abl = dir.path().join("ablate");
    let out = pushid(&[
        "ablate", "--population", path(&pop), "--checkpoints", path(&ckpts), "--variants", "vt-ddf-uniform,v-ddf", "--config", path(&ecfg),
        "--out-dir", path(&abl),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = pushid(&["report", "--ablation", path(&abl.join("ablation.csv"))]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("V-DDF"));
    assert!(table.contains("VT-DDF (uniform)"));
}

#[test]
fn numerical_failure_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let pop = dir.path().join("pop.json");
    assert!(pushid(&["gen-population", "--count", "6", "--seed", "2", "--out", path(&pop)]).status.success());
    let tcfg = dir.path().join("train.toml");
    std::fs::write(&tcfg, format!("lr = 1e6\nepochs = 2\n{SMALL_TRAIN}").replace("epochs = 1\n", "")).unwrap();
    let out = pushid(&["train", "--population", path(&pop), "--config", path(&tcfg), "--out-dir", path(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
