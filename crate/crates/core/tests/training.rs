//! Architecture-level training invariants: gradient checks across every
//! model, shape preservation in the deep stack, and the early-stopping
//! contract of the harness.

use lietext_core::corpus::{build_vocab, dev_holdout, make_batch, random_embeddings, Example};
use lietext_core::harness::{
    evaluate, gradcheck_model, resolve_dataset, run_train, RunConfig,
};
use lietext_core::models::{load_checkpoint, Arch, Model, ModelConfig};
use lietext_core::ndtensor::Tape;
use lietext_core::rng::stream;

const ARCHS: [Arch; 5] = [Arch::Linear, Arch::Scnn, Arch::Sclie, Arch::Dpcnn, Arch::Dpclie];

#[test]
fn every_architecture_passes_a_gradient_check() {
    for arch in ARCHS {
        let report = gradcheck_model(arch, 3).unwrap();
        assert!(
            report.passes(1e-4),
            "{arch:?}: max rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
    }
}

#[test]
fn deep_residual_blocks_preserve_length_at_any_depth() {
    // Inside each block the residual add requires the convolved map to
    // match the incoming shape exactly, so a successful forward at several
    // input lengths and block depths certifies the length-preservation of
    // the pre-pool convolutions.
    let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let examples: Vec<Example> = (0..4)
        .map(|k| Example {
            label: k % 2,
            tokens: words.iter().skip(k).take(9 + 5 * k).cloned().collect(),
        })
        .collect();
    let vocab = build_vocab(&examples, 1);
    let emb = random_embeddings(vocab.len(), 8, 1);

    for arch in [Arch::Dpcnn, Arch::Dpclie] {
        for blocks in 1..=3 {
            let mut config = ModelConfig::new(arch);
            config.embedding_dim = 8;
            config.channels = 6;
            config.blocks = blocks;
            config.kernel_hidden = vec![5, 4];
            config.dropout = 0.0;
            let model: Model<f64> = Model::build(&config, 2, &emb, 7).unwrap();

            for ex in &examples {
                let batch = make_batch(&[ex], &vocab, model.min_width()).unwrap();
                let mut tape = Tape::new();
                let mut rng = stream(0, "depth");
                let logits = model.forward(&mut tape, &batch, false, &mut rng).unwrap();
                assert_eq!(tape.shape(logits), [1, 2], "{arch:?} blocks={blocks}");
            }
        }
    }
}

fn fixture_config(patience: usize, max_epochs: usize) -> RunConfig {
    serde_json::from_value(serde_json::json!({
        "model": {
            "arch": "scnn",
            "embedding_dim": 16,
            "widths": [3, 4],
            "filters": 6,
            "dropout": 0.0
        },
        "data": {
            "name": "binary64",
            "split": { "policy": "standard", "dev_fraction": 0.25 },
            "embeddings": "fixture"
        },
        "optimizer": { "kind": "adadelta", "batch": 16 },
        "max_epochs": max_epochs,
        "patience": patience,
        "seed": 5
    }))
    .unwrap()
}

#[test]
fn early_stopping_keeps_the_best_dev_checkpoint() {
    let cfg = fixture_config(2, 40);
    let (report, ckpt) = run_train::<f64>(&cfg, true).unwrap();

    for fold in &report.folds {
        let best = fold
            .epochs
            .iter()
            .map(|e| e.dev_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(fold.best_dev_accuracy, best, "fold {}", fold.fold);
        assert_eq!(fold.epochs[fold.best_epoch].dev_accuracy, best);
        if fold.stopped_early {
            assert!(fold.epochs.len() < cfg.max_epochs);
        }
    }

    // the serialized checkpoint reproduces the reported best dev accuracy
    // on the reconstructed dev split
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    std::fs::write(&path, &ckpt).unwrap();
    let model: Model<f64> = load_checkpoint(&path).unwrap();

    let data = resolve_dataset(&cfg.data, true).unwrap();
    let frac = match &cfg.data.split {
        lietext_core::harness::SplitSpec::Standard { dev_fraction } => *dev_fraction,
        _ => unreachable!(),
    };
    let (_, dev_idx) = dev_holdout(&data.train, frac, cfg.seed).unwrap();
    let vocab = lietext_core::harness::build_run_vocab(&data, cfg.data.min_count);
    let eval = evaluate(&model, &data.train, &dev_idx, &vocab).unwrap();

    let best = report.folds[report.checkpoint_fold].best_dev_accuracy;
    assert_eq!(eval.accuracy, best);
}

#[test]
fn run_reports_carry_data_provenance() {
    let cfg = fixture_config(40, 8);
    let (report, _) = run_train::<f64>(&cfg, true).unwrap();
    assert_eq!(report.data.train_examples, 64);
    assert_eq!(report.data.classes, 2);
    assert_eq!(report.data.train_rejects, 0);
    assert_eq!(report.data.test_rejects, 0);
    assert!(report.data.vocab > 2);
    assert_eq!(report.parameters.total - report.parameters.embedding,
        report.parameters.non_embedding);
}
