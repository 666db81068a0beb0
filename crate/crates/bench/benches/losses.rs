use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankclip_core::data::generate_dataset;
use rankclip_core::losses::{clip_infonce, cross_modal_loss, in_modal_loss};
use rankclip_core::ranking::rank_loss;
use rankclip_core::*;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn rank_loss_forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("rank_loss");
    for n in [32, 128, 256] {
        let pred = random(n, n, 1);
        let reference = random(n, n, 2);
        let cfg = RankLossConfig::default();
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let p = g.param(pred.clone());
                let r = g.constant(reference.clone());
                let l = rank_loss(&mut g, p, r, &cfg).unwrap();
                g.backward(l).unwrap();
            })
        });
    }
    group.finish();
}

fn batch_losses(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_losses");
    let n = 256;
    let raw_v = random(n, 16, 3);
    let raw_t = random(n, 16, 4);
    let rank = RankLossConfig::default();
    type Loss = fn(&mut Graph, Var, Var, &RankLossConfig) -> Result<Var>;
    let losses: [(&str, Loss); 3] = [
        ("clip_infonce", |g, v, t, _| clip_infonce(g, v, t, 0.07)),
        ("cross_modal", cross_modal_loss),
        ("in_modal", in_modal_loss),
    ];
    for (name, loss) in losses {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let v = g.param(raw_v.clone());
                let t = g.param(raw_t.clone());
                let v = g.l2_normalize_rows(v).unwrap();
                let t = g.l2_normalize_rows(t).unwrap();
                let l = loss(&mut g, v, t, &rank).unwrap();
                g.backward(l).unwrap();
            })
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let spec = DatasetSpec {
        num_superclasses: 4,
        subclasses_per_superclass: 4,
        latent_dim: 32,
        image_dim: 64,
        text_dim: 48,
        within_super_corr: 0.6,
        noise_std: 0.1,
        pairs_per_class: 16,
        eval_pairs: 16,
        seed: 0,
    };
    let ds = generate_dataset(&spec).unwrap();
    let params = EncoderParams::init(&EncoderConfig::with_dims(64, 48, 0)).unwrap();
    let mut group = c.benchmark_group("train_step_256");
    group.sample_size(20);
    for ablation in [Ablation::ClipOnly, Ablation::Full] {
        let mut cfg = TrainConfig {
            epochs: 2,
            batch_size: 256,
            ..TrainConfig::default()
        };
        cfg.loss.ablation = ablation;
        group.bench_function(ablation.as_str(), |b| {
            b.iter(|| {
                let mut t = Trainer::new(cfg.clone(), params.clone()).unwrap();
                t.run(&ds, Some(1)).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, rank_loss_forward_backward, batch_losses, training_step);
criterion_main!(benches);
