use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rankclip_core::data::{
    class_text_anchors, generate_dataset, generate_dataset_with_latents, load_dataset, save_dataset,
};
use rankclip_core::metrics::*;
use rankclip_core::trainer::train;
use rankclip_core::*;

fn acceptance_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_superclasses: 4,
        subclasses_per_superclass: 4,
        latent_dim: 32,
        image_dim: 64,
        text_dim: 48,
        within_super_corr: 0.6,
        noise_std: 0.1,
        pairs_per_class: 500,
        eval_pairs: 1000,
        seed,
    }
}

fn acceptance_encoder(seed: u64) -> EncoderParams {
    EncoderParams::init(&EncoderConfig::with_dims(64, 48, seed)).unwrap()
}

fn random_unit(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(row.iter().map(|x| x / norm));
    }
    Tensor::matrix(n, d, data).unwrap()
}

fn circle(angles: &[f64]) -> Tensor {
    let rows: Vec<[f64; 2]> = angles.iter().map(|a| [a.cos(), a.sin()]).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn untrained_zero_shot_is_chance() {
    let mut mean = 0.0;
    for seed in 0..5 {
        let spec = acceptance_spec(seed);
        let ds = generate_dataset(&spec).unwrap();
        let anchors = class_text_anchors(&spec).unwrap();
        let acc = zero_shot_accuracy(&acceptance_encoder(100 + seed), &ds, &anchors, &[1, 16]).unwrap();
        assert_eq!(acc[&16], 1.0);
        mean += acc[&1] / 5.0;
    }
    assert!((mean - 1.0 / 16.0).abs() <= 0.05, "{mean}");
}

#[test]
fn random_embedding_recall_is_chance() {
    let mut mean = 0.0;
    for seed in 0..5 {
        let v = random_unit(500, 16, seed);
        let t = random_unit(500, 16, 50 + seed);
        let r = recall_from_sims(&v.matmul_t(&t).unwrap(), &[1, 5, 10, 500]).unwrap();
        assert!(r[&1] <= r[&5] && r[&5] <= r[&10]);
        assert_eq!(r[&500], 1.0);
        mean += r[&1] / 5.0;
    }
    assert!((mean - 1.0 / 500.0).abs() <= 0.01, "{mean}");
}

#[test]
fn consistency_reversal_and_null() {
    let v = circle(&[0.0, 1.0, 2.5]);
    let t = circle(&[0.0, 2.5, 1.1]);
    assert!((consistency_spearman(&v, &t).unwrap() + 1.0).abs() < 1e-12);

    let mut mean_abs = 0.0;
    for seed in 0..5 {
        let v = random_unit(200, 16, seed);
        let t = random_unit(200, 16, 90 + seed);
        mean_abs += consistency_spearman(&v, &t).unwrap().abs() / 5.0;
    }
    assert!(mean_abs < 0.1, "{mean_abs}");
}

#[test]
fn spearman_ignores_monotone_transforms() {
    let a = [0.3, -0.2, 0.9, 0.1, 0.5, -0.7];
    let b = [0.1, 0.4, 0.8, -0.3, 0.2, 0.0];
    let tb: Vec<f64> = b.iter().map(|x: &f64| (3.0 * x).exp() + 7.0).collect();
    assert_eq!(spearman(&a, &b), spearman(&a, &tb));
}

#[test]
fn probe_on_prototypes_and_permuted_labels() {
    let mut spec = acceptance_spec(2);
    spec.noise_std = 0.0;
    spec.pairs_per_class = 20;
    spec.eval_pairs = 160;
    let (ds, latents) = generate_dataset_with_latents(&spec).unwrap();
    let train_idx = ds.indices(Split::Train);
    let eval_idx = ds.indices(Split::Eval);
    let labels = |idx: &[usize]| -> Vec<u32> { idx.iter().map(|&i| ds.labels[i]).collect() };
    let cfg = EvalConfig::default();
    let acc = linear_probe(
        &latents.select_rows(&train_idx),
        &labels(&train_idx),
        &latents.select_rows(&eval_idx),
        &labels(&eval_idx),
        16,
        &cfg,
    )
    .unwrap();
    assert_eq!(acc, 1.0);

    let spec = acceptance_spec(3);
    let (ds, latents) = generate_dataset_with_latents(&spec).unwrap();
    let train_idx = ds.indices(Split::Train);
    let eval_idx = ds.indices(Split::Eval);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut shuffled: Vec<u32> = ds.labels.clone();
    shuffled.shuffle(&mut rng);
    let pick = |idx: &[usize]| -> Vec<u32> { idx.iter().map(|&i| shuffled[i]).collect() };
    let acc = linear_probe(
        &latents.select_rows(&train_idx),
        &pick(&train_idx),
        &latents.select_rows(&eval_idx),
        &pick(&eval_idx),
        16,
        &cfg,
    )
    .unwrap();
    assert!((acc - 1.0 / 16.0).abs() <= 0.05, "{acc}");
}

#[test]
fn prototype_similarity_matches_latent_class_means() {
    let spec = acceptance_spec(4);
    let (ds, latents) = generate_dataset_with_latents(&spec).unwrap();
    let c = spec.num_classes();
    let mut means = vec![vec![0.0; spec.latent_dim]; c];
    let mut counts = vec![0.0; c];
    for i in ds.indices(Split::Train) {
        let l = ds.labels[i] as usize;
        means[l].iter_mut().zip(latents.row(i)).for_each(|(m, x)| *m += x);
        counts[l] += 1.0;
    }
    let unit: Vec<Vec<f64>> = means
        .iter()
        .zip(&counts)
        .map(|(m, n)| {
            let v: Vec<f64> = m.iter().map(|x| x / n).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    for a in 0..c {
        for b in 0..c {
            let cos: f64 = unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum();
            assert!((cos - ds.class_prototype_sim.get(a, b)).abs() < 0.02, "{a},{b}: {cos}");
        }
    }
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = acceptance_spec(5);
    spec.pairs_per_class = 10;
    let ds = generate_dataset(&spec).unwrap();
    let path = dir.path().join("d.bin");
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
    let again = dir.path().join("e.bin");
    save_dataset(&back, &again).unwrap();
    assert_eq!(std::fs::read(path).unwrap(), std::fs::read(again).unwrap());
}

#[test]
fn trained_on_separable_data_reaches_perfect_zero_shot() {
    let spec = DatasetSpec {
        num_superclasses: 2,
        subclasses_per_superclass: 2,
        latent_dim: 8,
        image_dim: 12,
        text_dim: 10,
        within_super_corr: 0.3,
        noise_std: 0.0,
        pairs_per_class: 16,
        eval_pairs: 40,
        seed: 1,
    };
    let ds = generate_dataset(&spec).unwrap();
    let anchors = class_text_anchors(&spec).unwrap();
    let mut cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    cfg.loss.ablation = Ablation::ClipOnly;
    let params = EncoderParams::init(&EncoderConfig::with_dims(12, 10, 3)).unwrap();
    let (trained, _) = train(&cfg, &ds, params).unwrap();
    let acc = zero_shot_accuracy(&trained, &ds, &anchors, &[1]).unwrap();
    assert_eq!(acc[&1], 1.0);

    let ecfg = EvalConfig {
        top_ks: vec![1, 3, 4],
        recall_ks: vec![1, 5, 40],
        ..EvalConfig::default()
    };
    let a = evaluate(&trained, &ds, &anchors, &ecfg).unwrap();
    let b = evaluate(&trained, &ds, &anchors, &ecfg).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.csv_row(), b.csv_row());
    assert_eq!(a.csv_header().split(',').count(), a.csv_row().split(',').count());
    assert_eq!(a.linear_probe_accuracy, 1.0);
    assert!((0.0..=2.0).contains(&a.modality_gap));
    assert!((-1.0..=1.0).contains(&a.alignment));
}
