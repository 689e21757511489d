//! End-to-end runs of the `wlfm` binary: stage order, exit codes and
//! output files.

use std::path::Path;
use std::process::{Command, Output};

fn wlfm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wlfm"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env("WLFM_THREADS", "2")
        .output()
        .expect("spawn wlfm")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(extra: serde_json::Value) -> serde_json::Value {
    let mut cfg = serde_json::json!({
        "seed": 3,
        "corpus": {"n_wells": 8, "depth_range": [1000.0, 1040.0], "sample_spacing": 0.25},
        "tokenizer": {"codebook_size": 8, "latent_dim": 4, "patch_len": 16, "stride": 8,
                      "conv_layers": 1, "curve_emb_dim": 2, "steps": 10, "batch_size": 8},
        "pretrain": {"layers": 1, "heads": 2, "d_model": 8, "ffn_dim": 16, "proj_dim": 4,
                     "seq_len": 4, "steps": 6, "batch_size": 2},
        "finetune": {"steps": 5, "labeled_wells": 2},
        "loader": {"workers": 2, "queue_capacity": 4}
    });
    if let (Some(base), Some(extra)) = (cfg.as_object_mut(), extra.as_object()) {
        for (k, v) in extra {
            base.insert(k.clone(), v.clone());
        }
    }
    cfg
}

fn write_config(dir: &Path, cfg: &serde_json::Value) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn csv_column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let i = r.headers().unwrap().iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    r.records().map(|rec| rec.unwrap()[i].to_string()).collect()
}

#[test]
fn help_and_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&wlfm(dir.path(), &["--help"])), 0);
    assert_eq!(code(&wlfm(dir.path(), &["no-such-command"])), 2);
    assert_eq!(code(&wlfm(dir.path(), &["eval", "--split", "nowhere", "--scratch"])), 2);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), &tiny_config(serde_json::json!({"tokenizer": {"codebok_size": 8}})));
    let o = wlfm(dir.path(), &["--config", &c, "generate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("codebok_size"), "{}", stderr(&o));
}

#[test]
fn commands_need_earlier_stages() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["pretrain", "finetune", "eval", "export-embeddings"] {
        let o = wlfm(dir.path(), &[cmd]);
        assert_eq!(code(&o), 1, "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn ttest_requires_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let o = wlfm(dir.path(), &["eval", "--ttest"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("bad.ckpt");
    std::fs::write(&ck, b"NOTACKPT").unwrap();
    let o = wlfm(dir.path(), &["--checkpoint", &s(&ck), "pretrain"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let c = write_config(d, &tiny_config(serde_json::json!({})));
    let m = s(&d.join("manifest.csv"));
    let ck = |n: &str| s(&d.join(n));

    assert_eq!(code(&wlfm(d, &["--config", &c, "generate"])), 0);
    for f in ["manifest.csv", "split.json", "config.resolved.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    assert_eq!(code(&wlfm(d, &["--config", &c, "--manifest", &m, "train-tokenizer"])), 0);
    assert!(d.join("codebook_usage.csv").exists());

    // Stage order: the tokenizer checkpoint cannot be fine-tuned.
    let o = wlfm(d, &["--manifest", &m, "--checkpoint", &ck("tokenizer.ckpt"), "finetune"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    assert_eq!(code(&wlfm(d, &["--manifest", &m, "--checkpoint", &ck("tokenizer.ckpt"), "pretrain"])), 0);
    assert_eq!(code(&wlfm(d, &["--manifest", &m, "--checkpoint", &ck("pretrained.ckpt"), "finetune"])), 0);
    let o = wlfm(d, &["--manifest", &m, "--checkpoint", &ck("finetuned.ckpt"), "eval", "--seeds", "0,1,2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(csv_column(&d.join("metrics_per_seed.csv"), "seed"), ["0", "1", "2"]);

    // Compare against itself: a t-test file with one row per metric.
    let base = d.join("baseline.csv");
    std::fs::copy(d.join("metrics_per_seed.csv"), &base).unwrap();
    let o = wlfm(
        d,
        &["--manifest", &m, "--checkpoint", &ck("finetuned.ckpt"), "eval", "--seeds", "0,1,2", "--baseline", &s(&base), "--ttest"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!csv_column(&d.join("ttest.csv"), "metric").is_empty());

    let o = wlfm(d, &["--manifest", &m, "--checkpoint", &ck("finetuned.ckpt"), "export-embeddings"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut r = csv::Reader::from_path(d.join("predictions.csv")).unwrap();
    let headers: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers.iter().filter(|h| h.starts_with("litho_prob_")).count(), 3);
    for rec in r.records() {
        let rec = rec.unwrap();
        let total: f64 = (4..7).map(|i| rec[i].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    assert!(d.join("embeddings_patch.csv").exists() && d.join("embeddings_token.csv").exists());

    let o = wlfm(d, &["--config", &c, "--manifest", &m, "--workers", "2", "bench-loader"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(csv_column(&d.join("loader_bench.csv"), "workers"), ["2"]);
}

#[test]
fn vq_noscl_trains_without_contrastive_term() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let c = write_config(d, &tiny_config(serde_json::json!({"ablation": "vq_noscl"})));
    let m = s(&d.join("manifest.csv"));
    assert_eq!(code(&wlfm(d, &["--config", &c, "generate"])), 0);
    assert_eq!(code(&wlfm(d, &["--config", &c, "--manifest", &m, "train-tokenizer"])), 0);
    let o = wlfm(d, &["--manifest", &m, "--checkpoint", &s(&d.join("tokenizer.ckpt")), "pretrain"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let scl = csv_column(&d.join("pretrain_metrics.csv"), "scl");
    assert_eq!(scl.len(), 6);
    assert!(scl.iter().all(|v| v.parse::<f64>().unwrap() == 0.0), "{scl:?}");
}
