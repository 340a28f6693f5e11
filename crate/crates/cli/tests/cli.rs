use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [(&str, &[&str]); 7] = [
    ("synth", &["--class", "--subjects", "--duration", "--fs", "--seed", "--out-dir", "--format", "--snr-db"]),
    ("detect", &["--input", "--sigma-ms", "--refractory-ms", "--delays", "--out"]),
    ("extract", &["--input", "--ann", "--out", "--lag", "--delay-d", "--beat-length"]),
    ("train", &["--features", "--out", "--seed", "--lambda", "--beta", "--sparsity"]),
    ("classify", &["--model", "--features", "--out"]),
    ("evaluate", &["--features", "--k", "--seed", "--out", "--roc", "--baseline", "--split"]),
    ("pipeline", &["--out-dir", "--seed"]),
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scg-breath"));
    c.env_remove("SCG_BREATH_SEED").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small, quick settings shared by the end-to-end tests.
const FAST_CONFIG: &str = r#"
[train]
epochs_pretrain = 40
epochs_finetune = 40

[eval]
k = 3

[synth]
subjects = 2
duration_s = 12.0
"#;

#[test]
fn help_documents_every_flag() {
    let top = bin().arg("--help").output().unwrap();
    assert!(top.status.success());
    for (cmd, flags) in SUBCOMMANDS {
        let out = bin().args([cmd, "--help"]).output().unwrap();
        assert!(out.status.success(), "{cmd} --help failed");
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in flags.iter().chain(&["--config", "--log-json", "--jobs"]) {
            assert!(text.contains(flag), "{cmd} --help does not mention {flag}");
        }
    }
}

#[test]
fn missing_input_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["detect", "--input", "absent.csv"],
        vec!["extract", "--input", "absent.csv"],
        vec!["train", "--features", "absent.csv"],
        vec!["evaluate", "--features", "absent.csv"],
        vec!["classify", "--model", "absent.json", "--features", "f.csv", "--out", "p.csv"],
    ] {
        let out = run(&args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(stderr(&out).contains("absent."), "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[eval]\nk = 1\n").unwrap();
    let out = run(&["--config", "bad.toml", "synth"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(dir.path().join("typo.toml"), "[trian]\nlambda = 1\n").unwrap();
    assert_eq!(run(&["--config", "typo.toml", "synth"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["--config", "nowhere.toml", "synth"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["synth", "--class", "XB"], dir.path()).status.code(), Some(2));
}

#[test]
fn stages_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("fast.toml"), FAST_CONFIG).unwrap();
    let ok = |args: &[&str]| {
        let mut full = vec!["--config", "fast.toml"];
        full.extend_from_slice(args);
        let out = run(&full, d);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
        String::from_utf8_lossy(&out.stdout).into_owned()
    };

    ok(&["synth", "--out-dir", "recs"]);
    assert!(d.join("recs/s02_LB.csv").exists() && d.join("recs/s02_LB.ann").exists());

    ok(&["detect", "--input", "recs/s01_SB.csv", "--out", "s01_SB.det"]);
    let detected = std::fs::read_to_string(d.join("s01_SB.det")).unwrap();
    let truth = std::fs::read_to_string(d.join("recs/s01_SB.ann")).unwrap();
    assert_eq!(detected.lines().count(), truth.lines().count());

    ok(&["extract", "--input", "recs/s01_SB.csv", "--ann", "recs/s01_SB.ann", "--out", "one.csv"]);
    ok(&["extract", "--input", "recs", "--out", "features.csv"]);
    let features = std::fs::read_to_string(d.join("features.csv")).unwrap();
    assert!(features.starts_with("record_id,f_HR,"));
    assert!(features.lines().count() > 60);

    ok(&["train", "--features", "features.csv", "--out", "model.json", "--lambda", "0.002", "--sparsity", "0.4,0.3"]);
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["config"]["lambda"], 0.002);
    assert_eq!(model["dims"], serde_json::json!([15, 12, 10, 3]));

    ok(&["classify", "--model", "model.json", "--features", "features.csv", "--out", "preds.csv"]);
    let preds = std::fs::read_to_string(d.join("preds.csv")).unwrap();
    assert_eq!(preds.lines().count(), features.lines().count());

    let table = ok(&["evaluate", "--features", "features.csv", "--out", "report.json", "--roc", "roc.csv"]);
    assert!(table.contains("baseline knn"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["k"], 3);
    assert_eq!(report["per_fold"].as_array().unwrap().len(), 3);
    assert!(std::fs::read_to_string(d.join("roc.csv")).unwrap().starts_with("class,fpr,tpr,threshold"));

    // a computation failure is exit 1 and names its stage
    let out = run(&["--config", "fast.toml", "evaluate", "--features", "one.csv"], d);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("evaluate stage"));
}

#[test]
fn pipeline_is_reproducible_and_honours_env_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("fast.toml"), FAST_CONFIG).unwrap();
    for out in ["a", "b"] {
        let o = run(&["--config", "fast.toml", "--jobs", "1", "pipeline", "--out-dir", out], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let c = bin()
        .args(["--config", "fast.toml", "--log-json", "pipeline", "--out-dir", "c"])
        .env("SCG_BREATH_SEED", "7")
        .current_dir(d)
        .output()
        .unwrap();
    assert!(c.status.success());
    for file in ["features.csv", "model.json", "report.json", "roc.csv", "report.txt"] {
        let a = std::fs::read(d.join("a").join(file)).unwrap();
        let b = std::fs::read(d.join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs between identical runs");
    }
    let a = std::fs::read(d.join("a/features.csv")).unwrap();
    let c_features = std::fs::read(d.join("c/features.csv")).unwrap();
    assert_ne!(a, c_features, "SCG_BREATH_SEED was ignored");
}

#[test]
fn log_json_emits_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--log-json", "synth", "--subjects", "1", "--duration", "10", "--out-dir", "r"])
        .env("RUST_LOG", "info")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let line = stderr(&out).lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).expect("JSON log line");
    let cfg: serde_json::Value = serde_json::from_str(v["fields"]["config"].as_str().unwrap()).unwrap();
    assert_eq!(cfg["synth"]["subjects"], 1);
    assert_eq!(cfg["train"]["beta"], 4.0);
}
