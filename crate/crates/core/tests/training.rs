use rankclip_core::data::generate_dataset;
use rankclip_core::losses::lambda_schedule;
use rankclip_core::trainer::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, train};
use rankclip_core::*;

fn spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_superclasses: 2,
        subclasses_per_superclass: 2,
        latent_dim: 8,
        image_dim: 10,
        text_dim: 6,
        within_super_corr: 0.6,
        noise_std: 0.1,
        pairs_per_class: 12,
        eval_pairs: 16,
        seed,
    }
}

fn params(seed: u64) -> EncoderParams {
    let mut cfg = EncoderConfig::with_dims(10, 6, seed);
    cfg.image_hidden = vec![12];
    cfg.text_hidden = vec![12];
    cfg.shared_dim = 4;
    EncoderParams::init(&cfg).unwrap()
}

fn config(epochs: usize, ablation: Ablation) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        batch_size: 10,
        learning_rate: 1e-2,
        seed: 5,
        ..TrainConfig::default()
    };
    cfg.loss.ablation = ablation;
    cfg
}

#[test]
fn identical_runs_are_bit_identical() {
    let ds = generate_dataset(&spec(1)).unwrap();
    let cfg = config(3, Ablation::Full);
    let (p1, h1) = train(&cfg, &ds, params(2)).unwrap();
    let (p2, h2) = train(&cfg, &ds, params(2)).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(h1.to_ndjson(), h2.to_ndjson());
    assert_eq!(
        checkpoint_to_bytes(&p1, &Default::default(), 0),
        checkpoint_to_bytes(&p2, &Default::default(), 0)
    );
}

#[test]
fn clip_only_records_zero_rank_terms() {
    let ds = generate_dataset(&spec(1)).unwrap();
    let (_, h) = train(&config(2, Ablation::ClipOnly), &ds, params(2)).unwrap();
    assert!(!h.records.is_empty());
    for r in &h.records {
        assert_eq!((r.breakdown.l_in, r.breakdown.l_cross), (0.0, 0.0));
        assert_eq!(r.breakdown.total, r.breakdown.l_clip);
    }
}

#[test]
fn history_follows_schedule_and_additivity() {
    let ds = generate_dataset(&spec(1)).unwrap();
    let cfg = config(4, Ablation::Full);
    let (_, h) = train(&cfg, &ds, params(2)).unwrap();
    // 48 training pairs in batches of 10, trailing 8 kept.
    assert_eq!(h.records.len(), 4 * 5);
    for (i, r) in h.records.iter().enumerate() {
        assert_eq!(r.step, i as u64 + 1);
        let (l1, l2) = lambda_schedule(r.epoch, 4, LambdaMode::Scheduled, (0.0, 0.0)).unwrap();
        assert_eq!((r.breakdown.lambda1, r.breakdown.lambda2), (l1, l2));
        assert!(r.breakdown.additivity_residual() <= 1e-12);
        assert!(r.breakdown.is_finite());
    }
    let line = h.to_ndjson().lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    let mut expected = [
        "epoch", "step", "l_clip", "l_in", "l_cross", "lambda1", "lambda2", "total",
    ];
    expected.sort_unstable();
    let mut keys = keys;
    keys.sort_unstable();
    assert_eq!(keys, expected);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&spec(3)).unwrap();
    let cfg = config(5, Ablation::Full);

    let mut straight = Trainer::new(cfg.clone(), params(4)).unwrap();
    straight.run(&ds, Some(20)).unwrap();

    let mut first = Trainer::new(cfg.clone(), params(4)).unwrap();
    first.run(&ds, Some(10)).unwrap();
    let path = dir.path().join("ckpt.bin");
    first.save(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(cfg, &path).unwrap();
    assert_eq!(resumed.step, 10);
    resumed.run(&ds, Some(20)).unwrap();

    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.optimizer, straight.optimizer);
    assert_eq!(resumed.history.records[..].len(), 10);
    for (a, b) in resumed.history.records.iter().zip(&straight.history.records[10..]) {
        assert_eq!((a.step, a.epoch, a.breakdown), (b.step, b.epoch, b.breakdown));
    }
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&spec(3)).unwrap();
    let mut cfg = config(2, Ablation::Full);
    cfg.checkpoint_every = 3;
    cfg.checkpoint_path = Some(dir.path().join("periodic.bin"));
    cfg.history_path = Some(dir.path().join("history.ndjson"));
    let mut t = Trainer::new(cfg.clone(), params(1)).unwrap();
    t.run(&ds, None).unwrap();
    let (_, _, step) = load_checkpoint(cfg.checkpoint_path.unwrap()).unwrap();
    assert_eq!(step, 9);
    let text = std::fs::read_to_string(cfg.history_path.unwrap()).unwrap();
    assert_eq!(text.lines().count(), 10);
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&spec(3)).unwrap();
    let mut t = Trainer::new(config(2, Ablation::Full), params(1)).unwrap();
    t.run(&ds, Some(3)).unwrap();
    let path = dir.path().join("c.bin");
    save_checkpoint(&t.params, &t.optimizer, t.step, &path).unwrap();
    let (p, o, s) = load_checkpoint(&path).unwrap();
    assert_eq!((p, o, s), (t.params.clone(), t.optimizer.clone(), 3));

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(checkpoint_to_bytes(&t.params, &t.optimizer, 3), bytes);
    let err = checkpoint_from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
    assert_eq!(err.to_string(), "truncated checkpoint");
    let mut bad = bytes.clone();
    bad[1] = b'!';
    assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes;
    bad[4] = 9;
    assert!(matches!(
        checkpoint_from_bytes(&bad),
        Err(Error::UnsupportedVersion { .. })
    ));
}

#[test]
fn mean_loss_decreases_with_fixed_weights() {
    let ds = generate_dataset(&spec(7)).unwrap();
    let mut cfg = config(8, Ablation::Full);
    cfg.loss.lambda_mode = LambdaMode::Fixed;
    let (_, h) = train(&cfg, &ds, params(3)).unwrap();
    assert!(h.epoch_mean_total(8).unwrap() < h.epoch_mean_total(1).unwrap());
}

#[test]
fn contrastive_term_decreases_under_schedule() {
    let ds = generate_dataset(&spec(7)).unwrap();
    let (_, h) = train(&config(8, Ablation::Full), &ds, params(3)).unwrap();
    let clip_mean = |e: usize| {
        let v: Vec<f64> = h
            .records
            .iter()
            .filter(|r| r.epoch == e)
            .map(|r| r.breakdown.l_clip)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(clip_mean(8) < clip_mean(1));
}

#[test]
fn divergence_is_reported_with_step() {
    let ds = generate_dataset(&spec(3)).unwrap();
    let mut cfg = config(2, Ablation::Full);
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.learning_rate = 1e300;
    let err = train(&cfg, &ds, params(1)).unwrap_err();
    assert!(err.to_string().starts_with("divergence at step "), "{err}");
}

#[test]
fn mismatched_dataset_is_rejected() {
    let mut s = spec(3);
    s.image_dim = 11;
    let ds = generate_dataset(&s).unwrap();
    assert!(train(&config(2, Ablation::Full), &ds, params(1)).is_err());
}
