use pkrank::audio::{Grade, SynthConfig};
use pkrank::experiment::{train_on_pairs, train_on_set, PipelineConfig};
use pkrank::features::{FeatureBank, StftConfig};
use pkrank::model::{pair_accuracy, read_checkpoint, write_checkpoint, ModelConfig, TrainConfig};
use pkrank::pairs::build_pairs;

fn pipeline(epochs: usize, keep: usize) -> PipelineConfig {
    PipelineConfig {
        n_val: 3,
        train: TrainConfig {
            epochs,
            keep,
            batch_size: 8,
            lr: 1e-3,
            seed: 11,
            model: ModelConfig::desk().with_n_mels(24),
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    }
}

fn corpus() -> (pkrank::audio::SystemSet, FeatureBank) {
    let cfg = SynthConfig {
        duration_s: 0.4,
        ..SynthConfig::new(vec![Grade::snr(30.0), Grade::snr(12.0), Grade::snr(-3.0)], 10, 3)
    };
    let set = cfg.generate(3).unwrap();
    let bank = FeatureBank::extract_set(&set, StftConfig { n_mels: 24, ..StftConfig::default() }).unwrap();
    (set, bank)
}

#[test]
fn training_keeps_checkpoints_and_learns() {
    let (set, bank) = corpus();
    let cfg = pipeline(6, 9);
    let trained = train_on_set(&set, &bank, &cfg).unwrap();
    let out = &trained.outcome;
    assert_eq!(out.log.epochs.len(), 6);
    assert_eq!(out.checkpoints.len(), 6);
    for w in out.checkpoints.windows(2) {
        assert!(w[0].val_loss <= w[1].val_loss);
    }
    let last = out.log.epochs.last().unwrap();
    assert!(
        last.train_loss < out.log.initial_train_loss,
        "{} !< {}",
        last.train_loss,
        out.log.initial_train_loss
    );
    let acc = pair_accuracy(&trained.selected().params, &trained.train_pairs.pairs, &bank).unwrap();
    assert!(acc > 0.5, "training accuracy {acc}");
    assert!(trained.selection.index < out.checkpoints.len());
    assert_eq!(trained.selection.sums.len(), 6);
}

#[test]
fn retention_is_capped() {
    let (set, bank) = corpus();
    let trained = train_on_set(&set, &bank, &pipeline(3, 2)).unwrap();
    assert_eq!(trained.outcome.checkpoints.len(), 2);
    assert_eq!(trained.outcome.log.epochs.len(), 3);
}

#[test]
fn training_is_deterministic() {
    let (set, bank) = corpus();
    let a = train_on_set(&set, &bank, &pipeline(2, 9)).unwrap();
    let b = train_on_set(&set, &bank, &pipeline(2, 9)).unwrap();
    assert_eq!(a.outcome.log, b.outcome.log);
    assert_eq!(a.selected().params.weights(), b.selected().params.weights());
}

#[test]
fn manifest_pairs_on_validation_utterances_are_dropped() {
    let (set, bank) = corpus();
    let cfg = pipeline(1, 1);
    let manifest = build_pairs(&set, cfg.delta).unwrap();
    let trained = train_on_pairs(&set, &manifest, &bank, &cfg).unwrap();
    let held_out = trained.val_set.utterance_ids();
    assert!(!trained.train_pairs.is_empty());
    assert!(trained.train_pairs.len() < manifest.len());
    assert!(trained
        .train_pairs
        .pairs
        .iter()
        .all(|p| !held_out.contains(&p.utterance_id)));
}

#[test]
fn checkpoint_file_round_trips_predictions() {
    let (set, bank) = corpus();
    let trained = train_on_set(&set, &bank, &pipeline(1, 1)).unwrap();
    let params = &trained.selected().params;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pkck");
    write_checkpoint(params, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.config(), params.config());
    // stored as f32
    for (a, b) in back.weights().iter().zip(params.weights()) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
    let acc_a = pair_accuracy(params, &trained.train_pairs.pairs, &bank).unwrap();
    let acc_b = pair_accuracy(&back, &trained.train_pairs.pairs, &bank).unwrap();
    assert!((acc_a - acc_b).abs() <= 1.0 / trained.train_pairs.len() as f64 * 2.0);
}
