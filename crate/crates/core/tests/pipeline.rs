use std::path::Path;

use lexrecycle::corpus::toy::toy_documents;
use lexrecycle::pipeline::{run_pipeline, verify, PipelineConfig, Stage, TransformMethod};
use lexrecycle::Error;

/// A run small enough to finish in seconds.
fn tiny_config(dir: &Path, seed: u64) -> PipelineConfig {
    let corpus = dir.join("corpus.txt");
    std::fs::write(&corpus, toy_documents(5, 3000).join("\n\n")).unwrap();
    let mut cfg = PipelineConfig {
        corpus: vec![corpus],
        out_dir: dir.join("run"),
        seed,
        vocab_size: 280,
        dev_fraction: 0.2,
        context_len: 16,
        small_layers: 1,
        small_d_model: 8,
        small_heads: 2,
        medium_layers: 1,
        medium_d_model: 12,
        medium_heads: 2,
        window: 16,
        batch: 8,
        accumulation: 32,
        lr: Some(0.01),
        max_epochs: 1,
        finetune_epochs: 1,
        eval_window: 16,
        eval_stride: 8,
        int_k: 10,
        beams: 2,
        max_tokens: 8,
        length_filter: None,
        samples: 2,
        ..PipelineConfig::default()
    };
    cfg.finetune_lr = 1e-4;
    cfg
}

#[test]
fn full_run_writes_verifiable_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let manifests = run_pipeline(&cfg, &Stage::ALL).unwrap();
    assert_eq!(manifests.len(), Stage::ALL.len());
    let eval = &manifests[6];
    assert_eq!(eval.stage, "eval");
    assert!(eval.metric("perplexity:medium-target-ft").is_some());
    assert!(eval.metric("int_at_10").is_some());
    assert!(eval.metric("alignment_top1").is_some());
    let generated = std::fs::read_to_string(cfg.out_dir.join("generate/generated.txt")).unwrap();
    assert!(!generated.is_empty());
    assert!(verify(&cfg.out_dir).unwrap() > 10);
    assert!(!cfg.out_dir.join(".lock").exists());

    // Rerunning a stage on unchanged inputs reproduces its outputs.
    let before = std::fs::read(cfg.out_dir.join("models/medium-target-init.ckpt")).unwrap();
    run_pipeline(&cfg, &[Stage::Transform]).unwrap();
    assert_eq!(std::fs::read(cfg.out_dir.join("models/medium-target-init.ckpt")).unwrap(), before);

    // Tampering with an output is caught by verify and by dependent stages.
    let tok = cfg.out_dir.join("corpus/target.dev.tok");
    let mut bytes = std::fs::read(&tok).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&tok, bytes).unwrap();
    assert!(matches!(verify(&cfg.out_dir), Err(Error::DigestMismatch { .. })));
    assert!(matches!(run_pipeline(&cfg, &[Stage::Eval]), Err(Error::DigestMismatch { .. })));
}

#[test]
fn vocab_stage_alone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let m = run_pipeline(&cfg, &[Stage::Vocab]).unwrap();
    assert!(m[0].outputs.iter().any(|(p, _)| p == "vocab.bpe"));
    assert!(cfg.out_dir.join("manifests/vocab.manifest").exists());
}

#[test]
fn missing_dependency_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), 3);
    cfg.transform = TransformMethod::Procrustes;
    run_pipeline(&cfg, &[Stage::Vocab]).unwrap();
    match run_pipeline(&cfg, &[Stage::Transform]) {
        Err(Error::MissingDependency(msg)) => assert!(msg.contains("small.ckpt"), "{msg}"),
        other => panic!("expected a dependency error, got {other:?}"),
    }
}

#[test]
fn reversal_target_runs_to_eval() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), 4);
    cfg.target = "reversal:3".parse().unwrap();
    cfg.transform = TransformMethod::Knn(3);
    let m = run_pipeline(&cfg, &[Stage::Vocab, Stage::TrainSource, Stage::Relearn, Stage::Transform, Stage::Eval]).unwrap();
    let eval = m.last().unwrap();
    assert!(eval.metric("perplexity:medium-target-init").is_some());
    assert!(eval.metric("alignment_top1").is_none());
}
