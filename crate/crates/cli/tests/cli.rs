use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lvst(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvst"))
        .current_dir(dir)
        .env_remove("LVST_SEED")
        .args(args)
        .output()
        .expect("spawn lvst")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", out.status.code(), text(&out.stdout), text(&out.stderr));
    text(&out.stdout)
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const SMALL: &[&str] = &[
    "--graph", "data/graph.txt", "--readings", "data/readings.csv", "--output-dir", "run",
    "--d", "8", "--layers", "1", "--spatial-heads", "2", "--temporal-heads", "2",
    "--t-in", "4", "--t-out", "2", "--max-epochs", "2", "--batch-size", "32",
];

fn with(extra: &[&'static str]) -> Vec<&'static str> {
    SMALL.iter().chain(extra).copied().collect()
}

/// An 8-node, 4-day synthetic dataset under `data/`.
fn synth_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&lvst(dir.path(), &["--output-dir", "data", "synth", "--nodes", "8", "--days", "4"]));
    dir
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn end_to_end_smoke_path() {
    let dir = synth_dir();
    let d = dir.path();
    ok(&lvst(d, &with(&["preprocess"])));
    for f in ["m_local.csv", "m_global.csv", "m_pivotal.csv", "laplacian_basis.csv", "normalizer.json", "resolved_config.toml"] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }
    ok(&lvst(d, &with(&["train"])));
    assert!(d.join("run/model.lvst").exists());
    let log = String::from_utf8(read(d, "run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let first = ok(&lvst(d, &with(&["evaluate"])));
    let saved = read(d, "run/metrics_test.json");
    let second = ok(&lvst(d, &with(&["evaluate"])));
    assert_eq!(first, second);
    assert_eq!(saved, read(d, "run/metrics_test.json"));
    let json: serde_json::Value = serde_json::from_str(&first).unwrap();
    for who in ["model", "ha_baseline"] {
        let o = &json[who]["overall"];
        assert!(o["mae"].as_f64().unwrap() <= o["rmse"].as_f64().unwrap());
        assert_eq!(json[who]["per_horizon"].as_array().unwrap().len(), 2);
    }

    ok(&lvst(d, &with(&["evaluate", "--split", "val"])));
    assert!(d.join("run/metrics_val.json").exists());

    ok(&lvst(d, &with(&["predict", "--window", "3", "--dump-attention"])));
    let pred = String::from_utf8(read(d, "run/pred_w3.csv")).unwrap();
    let rows: Vec<&str> = pred.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.split(',').count() == 8));
    for branch in ["local", "global", "pivotal"] {
        assert!(d.join(format!("run/attention_w3_l0_{branch}.csv")).exists());
    }
    assert!(d.join("run/truth_w3.csv").exists());
}

#[test]
fn reruns_are_bitwise_identical() {
    let dir = synth_dir();
    let d = dir.path();
    ok(&lvst(d, &with(&["preprocess"])));
    let files = ["m_local.csv", "m_global.csv", "m_pivotal.csv", "laplacian_basis.csv", "normalizer.json"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| read(d, &format!("run/{f}"))).collect();
    ok(&lvst(d, &with(&["train"])));
    let ckpt = read(d, "run/model.lvst");
    let log = read(d, "run/train_log.csv");

    ok(&lvst(d, &with(&["preprocess"])));
    let again: Vec<Vec<u8>> = files.iter().map(|f| read(d, &format!("run/{f}"))).collect();
    assert_eq!(first, again);
    ok(&lvst(d, &with(&["train"])));
    assert_eq!(ckpt, read(d, "run/model.lvst"));
    assert_eq!(log, read(d, "run/train_log.csv"));

    // A different seed changes training.
    ok(&lvst(d, &with(&["--seed", "5", "train"])));
    assert_ne!(log, read(d, "run/train_log.csv"));
}

#[test]
fn inputs_are_left_untouched() {
    let dir = synth_dir();
    let d = dir.path();
    let graph = read(d, "data/graph.txt");
    let readings = read(d, "data/readings.csv");
    ok(&lvst(d, &with(&["preprocess"])));
    ok(&lvst(d, &with(&["train"])));
    assert_eq!(graph, read(d, "data/graph.txt"));
    assert_eq!(readings, read(d, "data/readings.csv"));
    let mut data: Vec<PathBuf> = std::fs::read_dir(d.join("data")).unwrap().map(|e| e.unwrap().path()).collect();
    data.sort();
    assert_eq!(data.len(), 3, "{data:?}");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = synth_dir();
    let d = dir.path();
    let out = lvst(d, &with(&["--k-global", "8", "preprocess"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("k_global"));

    std::fs::write(d.join("bad.toml"), "no-such-knob = 1\n").unwrap();
    let out = lvst(d, &with(&["--config", "bad.toml", "preprocess"]));
    assert_eq!(out.status.code(), Some(2));

    let out = lvst(d, &["preprocess"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_with_two() {
    let dir = synth_dir();
    let d = dir.path();
    for cmd in ["train", "evaluate", "predict"] {
        let out = lvst(d, &with(&[cmd]));
        assert_eq!(out.status.code(), Some(2), "{cmd}: {}", text(&out.stderr));
    }
    ok(&lvst(d, &with(&["preprocess"])));
    let out = lvst(d, &with(&["evaluate"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("model.lvst"));
}

#[test]
fn divergent_training_exits_with_three() {
    let dir = synth_dir();
    let d = dir.path();
    ok(&lvst(d, &with(&["preprocess"])));
    let out = lvst(d, &with(&["--lr", "1e300", "train"]));
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("epoch 1"));
}

#[test]
fn config_file_and_flags_resolve_in_order() {
    let dir = synth_dir();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), "d = 16\nseed = 4\nlayers = 3\n").unwrap();
    ok(&lvst(d, &with(&["--config", "run.toml", "preprocess"])));
    let resolved: toml::Value = toml::from_str(&String::from_utf8(read(d, "run/resolved_config.toml")).unwrap()).unwrap();
    // The flag beats the file, the file beats the default.
    assert_eq!(resolved["d"].as_integer(), Some(8));
    assert_eq!(resolved["seed"].as_integer(), Some(4));

    let out = Command::new(env!("CARGO_BIN_EXE_lvst"))
        .current_dir(d)
        .env("LVST_SEED", "9")
        .args(with(&["--config", "run.toml", "preprocess"]))
        .output()
        .unwrap();
    ok(&out);
    let resolved: toml::Value = toml::from_str(&String::from_utf8(read(d, "run/resolved_config.toml")).unwrap()).unwrap();
    assert_eq!(resolved["seed"].as_integer(), Some(9));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&lvst(dir.path(), &["gradcheck"]));
    let groups = out.lines().filter(|l| l.trim_end().ends_with("ok")).count();
    assert!(groups > 50, "{out}");
    assert!(!out.lines().any(|l| l.trim_end().ends_with("FAIL")));

    let out = lvst(dir.path(), &["gradcheck", "--inject-fault", "gelu"]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("gradient check failed"), "{err}");
    assert!(err.contains("ffn"), "{err}");
}
