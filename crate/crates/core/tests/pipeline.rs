//! Library-level pipeline runs: determinism and checkpoint handling.

use wlfm::checkpoint::{ModelState, Stage};
use wlfm::config::TrainConfig;
use wlfm::corpus::Split;
use wlfm::pipeline::{evaluate, finetune, pretrain, train_tokenizer, Dataset, MetricsSink};

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = 11;
    cfg.corpus.n_wells = 8;
    cfg.corpus.depth_range = (1000.0, 1040.0);
    cfg.corpus.sample_spacing = 0.25;
    cfg.tokenizer.codebook_size = 8;
    cfg.tokenizer.latent_dim = 4;
    cfg.tokenizer.patch_len = 16;
    cfg.tokenizer.stride = 8;
    cfg.tokenizer.conv_layers = 1;
    cfg.tokenizer.curve_emb_dim = 2;
    cfg.tokenizer.steps = 12;
    cfg.tokenizer.batch_size = 8;
    cfg.pretrain.layers = 1;
    cfg.pretrain.heads = 2;
    cfg.pretrain.d_model = 8;
    cfg.pretrain.ffn_dim = 16;
    cfg.pretrain.proj_dim = 4;
    cfg.pretrain.seq_len = 4;
    cfg.pretrain.steps = 9;
    cfg.pretrain.batch_size = 2;
    cfg.pretrain.checkpoint_every = 4;
    cfg.finetune.steps = 5;
    cfg.finetune.labeled_wells = 2;
    cfg
}

fn run(cfg: &TrainConfig, ckpt: Option<&std::path::Path>) -> (ModelState, ModelState, ModelState) {
    let data = Dataset::synthetic(cfg).unwrap();
    let tok = train_tokenizer(cfg, &data.wells_in(Split::Train), cfg.seed, &mut MetricsSink::none()).unwrap();
    let pre = pretrain(&tok.state, cfg, &data, &mut MetricsSink::none(), ckpt).unwrap();
    let fin = finetune(&pre.state, cfg, &data, cfg.seed, &mut MetricsSink::none()).unwrap();
    (tok.state, pre.state, fin.state)
}

#[test]
fn same_seed_same_bytes() {
    let cfg = tiny();
    let (a, b) = (run(&cfg, None), run(&cfg, None));
    assert_eq!(a.0.to_bytes(), b.0.to_bytes());
    assert_eq!(a.1.to_bytes(), b.1.to_bytes());
    assert_eq!(a.2.to_bytes(), b.2.to_bytes());

    let data = Dataset::synthetic(&cfg).unwrap();
    let r1 = evaluate(&a.2, &cfg, &data, &[0, 1], Split::Test).unwrap();
    let r2 = evaluate(&b.2, &cfg, &data, &[0, 1], Split::Test).unwrap();
    assert_eq!(r1, r2);

    let other = TrainConfig { seed: 12, ..cfg.clone() };
    assert_ne!(run(&other, None).1.to_bytes(), a.1.to_bytes());
}

#[test]
fn intermediate_checkpoint_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pretrained.ckpt");
    let (_, last, _) = run(&tiny(), Some(&path));
    let mid = ModelState::load(&path).unwrap();
    assert_eq!(mid.stage, Stage::Pretrained);
    assert_eq!(mid.step, 8);
    assert_eq!(last.step, 9);
    assert_ne!(mid.tensors, last.tensors);
    assert!(!dir.path().join(".pretrained.ckpt.tmp").exists());
}

#[test]
fn reloaded_checkpoint_evaluates_identically() {
    let cfg = tiny();
    let (tok, _, fin) = run(&cfg, None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("finetuned.ckpt");
    fin.save(&path).unwrap();
    let loaded = ModelState::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), fin.to_bytes());

    let data = Dataset::synthetic(&cfg).unwrap();
    let a = evaluate(&fin, &cfg, &data, &[3], Split::Val).unwrap();
    let b = evaluate(&loaded, &cfg, &data, &[3], Split::Val).unwrap();
    assert_eq!(a, b);

    // A tokenizer checkpoint cannot be evaluated, and truncation is caught.
    assert!(evaluate(&tok, &cfg, &data, &[0], Split::Val).is_err());
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(ModelState::load(&path).is_err());
}
