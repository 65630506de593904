use std::path::Path;
use std::process::{Command, Output};

fn mixformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixformer"))
        .args(args)
        .env_remove("MIXFORMER_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn analyze_b1_json_totals() {
    let o = mixformer(&["analyze", "--variant", "b1", "--resolution", "224", "224", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let params = v["total_params"].as_f64().unwrap();
    let flops = v["total_flops"].as_f64().unwrap();
    assert!((params / 8e6 - 1.0).abs() < 0.15, "{params}");
    assert!((flops / 0.7e9 - 1.0).abs() < 0.15, "{flops}");
    assert_eq!(v["height"], 224);
}

#[test]
fn analyze_text_table_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("model.json");
    std::fs::write(&cfg, r#"{"name": "tiny", "base_channels": 16, "blocks": [1, 1, 1, 1], "heads": [1, 2, 4, 8]}"#).unwrap();
    let o = mixformer(&["analyze", "--variant", p(&cfg), "--resolution", "64", "64"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("tiny @ 64x64"));
    assert!(text.contains("stages.3"));
    assert!(text.contains("total:"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(mixformer(&["analyze", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(mixformer(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mixformer(&["gradcheck", "--scope", "layer"]).status.code(), Some(2));
}

#[test]
fn file_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.mixf");
    let out = dir.path().join("out.mixf");
    let o = mixformer(&["forward", "--weights", p(&missing), "--input", p(&missing), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));

    let garbage = dir.path().join("garbage.mixf");
    std::fs::write(&garbage, b"not a weight file").unwrap();
    let o = mixformer(&["forward", "--weights", p(&garbage), "--input", p(&garbage), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.json");
    std::fs::write(&cfg, r#"{"train": {"steps": 1, "learning_rat": 0.1}}"#).unwrap();
    let o = mixformer(&["train-toy", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));
}

#[test]
fn gradcheck_block_scope_passes() {
    let o = mixformer(&["gradcheck", "--scope", "block"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn gradcheck_reports_failure_with_impossible_tolerance() {
    let o = mixformer(&["gradcheck", "--scope", "op", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn forward_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (w, x) = (dir.path().join("w.mixf"), dir.path().join("x.mixf"));
    let (y1, y2, y3) = (dir.path().join("y1.mixf"), dir.path().join("y2.mixf"), dir.path().join("y3.mixf"));
    assert!(mixformer(&["init", "--variant", "micro", "--seed", "4", "--output", p(&w)]).status.success());
    assert!(mixformer(&["sample-input", "--batch", "2", "--size", "36", "--output", p(&x)]).status.success());
    for y in [&y1, &y2] {
        let o = mixformer(&["forward", "--weights", p(&w), "--input", p(&x), "--output", p(y)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(mixformer(&["forward", "--weights", p(&w), "--input", p(&x), "--output", p(&y3), "--variant", "micro"]).status.success());
    let a = std::fs::read(&y1).unwrap();
    assert_eq!(a, std::fs::read(&y2).unwrap());
    assert_eq!(a, std::fs::read(&y3).unwrap());
    let logits = mixformer::io::read_single(&y1).unwrap();
    assert_eq!(logits.shape(), &[2, 4]);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_mixformer"))
            .args(["init", "--variant", "micro", "--output", p(&out)])
            .env("MIXFORMER_SEED", seed)
            .output()
            .unwrap();
        assert!(o.status.success());
        std::fs::read(out).unwrap()
    };
    let a = run("5", "a.mixf");
    assert_eq!(a, run("5", "b.mixf"));
    assert_ne!(a, run("6", "c.mixf"));
}

#[test]
fn train_toy_saves_loadable_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.json");
    std::fs::write(
        &cfg,
        r#"{"train": {"steps": 4, "batch_size": 4, "warmup_steps": 2, "eval_every": 2},
            "data": {"samples_per_class": 2, "image_size": 32}}"#,
    )
    .unwrap();
    let w = dir.path().join("w.mixf");
    let o = mixformer(&["train-toy", "--config", p(&cfg), "--save-weights", p(&w), "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(metrics["steps_run"], 4);
    assert_eq!(metrics["losses"].as_array().unwrap().len(), 4);
    let again = mixformer(&["train-toy", "--config", p(&cfg), "--json"]);
    assert_eq!(stdout(&o), stdout(&again));

    let x = dir.path().join("x.mixf");
    let y = dir.path().join("y.mixf");
    assert!(mixformer(&["sample-input", "--size", "32", "--output", p(&x)]).status.success());
    assert!(mixformer(&["forward", "--weights", p(&w), "--input", p(&x), "--output", p(&y)]).status.success());
}

#[test]
fn ablate_single_case() {
    let o = mixformer(&["ablate", "--mode", "parallel", "--interactions", "none", "--variant", "b0", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert_eq!(rows[0]["label"], "parallel / none");
    assert_eq!(rows[0]["forward_ok"], true);
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if name.starts_with("toy") {
            let text = std::fs::read_to_string(&path).unwrap();
            let cfg: mixformer::ToyConfig = serde_json::from_str(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
            cfg.train.validate().unwrap();
        } else {
            let o = mixformer(&["analyze", "--variant", p(&path), "--resolution", "224", "224", "--json"]);
            assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        }
        seen += 1;
    }
    assert!(seen >= 4);
}
