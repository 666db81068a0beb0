//! Self-checks run by `rankclip-lab verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankclip_core::encoders::{encode, logit_scale};
use rankclip_core::gradcheck::DEFAULT_EPSILON;
use rankclip_core::losses::{clip_infonce, cross_modal_loss, in_modal_loss, lambda_schedule, rankclip_total_scaled};
use rankclip_core::ranking::{brute_force_rank_nll, permutations, pl_ranking_prob, rank_loss_rows};
use rankclip_core::*;

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const PL_SUM_TOLERANCE: f64 = 1e-10;
pub const ORACLE_TOLERANCE: f64 = 1e-8;

/// One named check with its measured value.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    fn push(&mut self, name: impl Into<String>, value: f64, passed: bool) {
        self.checks.push(Check {
            name: name.into(),
            value,
            passed,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{} {} {:e}\n", if c.passed { "ok  " } else { "FAIL" }, c.name, c.value))
            .collect()
    }
}

type PairLoss = fn(&mut Graph, Var, Var, &RankLossConfig) -> Result<Var>;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn weighted_sum(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w = g.constant(Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(0.5..1.5)).collect(),
    )?);
    let y = g.mul_elementwise(out, w)?;
    g.sum_all(y)
}

type UnaryOp = fn(&mut Graph, Var) -> Result<Var>;

/// Finite-difference checks of every differentiable primitive and of the loss family.
pub fn gradcheck_suite(batches: usize) -> Result<Report> {
    let mut report = Report::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let unary: [(&str, UnaryOp); 16] = [
        ("transpose", |g, x| g.transpose(x)),
        ("exp", |g, x| g.exp(x)),
        ("tanh", |g, x| g.tanh(x)),
        ("log", |g, x| {
            let e = g.exp(x)?;
            g.log(e)
        }),
        ("scalar_mul", |g, x| g.scalar_mul(x, 1.7)),
        ("row_max", |g, x| g.row_max(x)),
        ("row_sum", |g, x| g.row_sum(x)),
        ("row_mean", |g, x| g.row_mean(x)),
        ("mean_all", |g, x| g.mean_all(x)),
        ("cumsum_last_axis", |g, x| g.cumsum_last_axis(x)),
        ("flip_last_axis", |g, x| g.flip_last_axis(x)),
        ("sort_desc_stable", |g, x| Ok(g.sort_desc_stable(x)?.0)),
        ("l2_normalize_rows", |g, x| g.l2_normalize_rows(x)),
        ("logsumexp_row", |g, x| g.logsumexp_row(x)),
        ("reverse_cumulative_logsumexp", |g, x| g.reverse_cumulative_logsumexp(x)),
        ("matmul_self", |g, x| {
            let t = g.transpose(x)?;
            g.matmul(x, t)
        }),
    ];
    for (name, op) in unary {
        let x = uniform(&mut rng, 3, 4, -1.0, 1.0);
        let err = finite_diff_check(
            |g, x| {
                let y = op(g, x)?;
                weighted_sum(g, y)
            },
            &x,
            DEFAULT_EPSILON,
        )?;
        report.push(format!("op {name}"), err, err < GRADCHECK_TOLERANCE);
    }
    // Inputs kept away from the kinks of relu and clamp.
    let away = Tensor::vector(vec![-0.8, -0.3, 0.2, 0.7]);
    for (name, op) in [
        ("relu", (|g, x| g.relu(x)) as UnaryOp),
        ("clamp", |g, x| g.clamp(x, -0.5, 0.5)),
    ] {
        let err = finite_diff_check(
            |g, x| {
                let y = op(g, x)?;
                g.sum_all(y)
            },
            &away,
            DEFAULT_EPSILON,
        )?;
        report.push(format!("op {name}"), err, err < GRADCHECK_TOLERANCE);
    }
    let (a, b, col) = (
        uniform(&mut rng, 3, 4, -1.0, 1.0),
        uniform(&mut rng, 3, 4, -1.0, 1.0),
        uniform(&mut rng, 3, 1, -1.0, 1.0),
    );
    for (name, rhs) in [("same", &b), ("column", &col)] {
        let err = finite_diff_check_many(
            |g, v| {
                let s = g.add(v[0], v[1])?;
                let d = g.sub(s, v[1])?;
                let m = g.mul_elementwise(d, v[1])?;
                weighted_sum(g, m)
            },
            &[a.clone(), rhs.clone()],
            DEFAULT_EPSILON,
        )?;
        report.push(
            format!("op add/sub/mul broadcast {name}"),
            err,
            err < GRADCHECK_TOLERANCE,
        );
    }
    let idx = Indices::new(3, 3, vec![3, 0, 0, 1, 2, 3, 2, 2, 1])?;
    let err = finite_diff_check(
        |g, x| {
            let y = g.gather_last_axis(x, &idx)?;
            weighted_sum(g, y)
        },
        &a,
        DEFAULT_EPSILON,
    )?;
    report.push("op gather_last_axis", err, err < GRADCHECK_TOLERANCE);

    let rank = RankLossConfig::default();
    let mut worst = [0.0f64; 4];
    for batch in 0..batches {
        let n = 2 + batch % 5;
        let d = 3 + batch % 6;
        let raw = [uniform(&mut rng, n, d, -1.0, 1.0), uniform(&mut rng, n, d, -1.0, 1.0)];
        let rank = rank.with_seed(batch as u64);
        let losses: [(usize, PairLoss); 3] = [
            (0, |g, v, t, _| clip_infonce(g, v, t, 0.3)),
            (1, cross_modal_loss),
            (2, in_modal_loss),
        ];
        for (slot, loss) in losses {
            let err = finite_diff_check_many(
                |g, x| {
                    let v = g.l2_normalize_rows(x[0])?;
                    let t = g.l2_normalize_rows(x[1])?;
                    loss(g, v, t, &rank)
                },
                &raw,
                DEFAULT_EPSILON,
            )?;
            worst[slot] = worst[slot].max(err);
        }

        let mut enc = EncoderConfig::with_dims(d, d + 1, batch as u64);
        enc.image_hidden = vec![n + 2];
        enc.text_hidden = vec![4];
        enc.shared_dim = d.min(8);
        let params = EncoderParams::init(&enc)?;
        let images = uniform(&mut rng, n, d, -1.0, 1.0);
        let texts = uniform(&mut rng, n, d + 1, -1.0, 1.0);
        let xs: Vec<Tensor> = params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let cfg = LossConfig {
            rank,
            ..LossConfig::default()
        };
        let err = finite_diff_check_many(
            |g, vars| {
                let bound = params.bind_vars(g, vars)?;
                let (i, t) = (g.constant(images.clone()), g.constant(texts.clone()));
                let v = encode(g, &bound, i, Modality::Image)?;
                let t = encode(g, &bound, t, Modality::Text)?;
                let scale = logit_scale(g, &bound)?;
                Ok(rankclip_total_scaled(g, v, t, scale, &cfg, 0.5, 0.5)?.total)
            },
            &xs,
            DEFAULT_EPSILON,
        )?;
        worst[3] = worst[3].max(err);
    }
    for (name, err) in [
        "clip_infonce",
        "cross_modal_loss",
        "in_modal_loss",
        "rankclip_total (through encoders)",
    ]
    .iter()
    .zip(worst)
    {
        report.push(
            format!("loss {name} over {batches} batches"),
            err,
            err < GRADCHECK_TOLERANCE,
        );
    }
    Ok(report)
}

/// Plackett–Luce normalisation and rank-loss / brute-force agreement.
pub fn oracle_suite() -> Result<Report> {
    let mut report = Report::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for k in 2..=6 {
        let orders = permutations(&(0..k).collect::<Vec<usize>>());
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let s: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
            let mut total = 0.0;
            for o in &orders {
                total += pl_ranking_prob(&s, o)?;
            }
            worst = worst.max((total - 1.0).abs());
        }
        report.push(
            format!("PL probabilities sum to 1, K = {k}"),
            worst,
            worst < PL_SUM_TOLERANCE,
        );
    }

    let mut worst = 0.0f64;
    for instance in 0..50usize {
        let n = 2 + instance % 6;
        let pred = uniform(&mut rng, n, n, -3.0, 3.0);
        let reference = uniform(&mut rng, n, n, -3.0, 3.0);
        let mut g = Graph::new();
        let (p, r) = (g.constant(pred.clone()), g.constant(reference.clone()));
        let rows = rank_loss_rows(&mut g, p, r, &RankLossConfig::default().with_seed(instance as u64))?;
        for (i, &v) in g.value(rows).data().iter().enumerate() {
            let oracle = brute_force_rank_nll(pred.row(i), reference.row(i))?;
            worst = worst.max((v - oracle).abs());
        }
    }
    report.push(
        "rank_loss rows match brute force (50 instances)",
        worst,
        worst < ORACLE_TOLERANCE,
    );

    let p = pl_ranking_prob(&[2.0, 1.0, 0.0], &[0, 1, 2])?;
    let e = std::f64::consts::E;
    let exact = e * e / (e * e + e + 1.0) * (e / (e + 1.0));
    let nll = -p.ln();
    report.push(
        "worked ranking nll [2, 1, 0]",
        (p - exact).abs(),
        (p - exact).abs() < ORACLE_TOLERANCE && (nll - 0.72087).abs() < 1e-5,
    );
    Ok(report)
}

/// Weight table for epochs `1..=n` with exactness, monotonicity and bound checks.
pub fn schedule_suite(n: usize) -> Result<(Report, Vec<(usize, f64)>)> {
    let mut report = Report::default();
    let mut table = Vec::with_capacity(n);
    let mut prev = f64::NEG_INFINITY;
    let (mut exact, mut monotone, mut bounded) = (true, true, true);
    for i in 1..=n {
        let (l1, l2) = lambda_schedule(i, n, LambdaMode::Scheduled, (0.0, 0.0))?;
        // Division of exactly representable integers rounds once, so this is the exact rational.
        let expected = ((3 * i - 1).min(2 * (n - 1))) as f64 / (n - 1) as f64;
        exact &= l1 == expected && l2 == expected;
        monotone &= l1 >= prev;
        bounded &= (0.0..=2.0).contains(&l1);
        prev = l1;
        table.push((i, l1));
    }
    report.push(
        format!("lambda equals clip((3i - 1)/(n - 1), 0, 2) for i = 1..={n}"),
        0.0,
        exact,
    );
    report.push("lambda nondecreasing", 0.0, monotone);
    report.push("lambda within [0, 2]", 0.0, bounded);
    Ok((report, table))
}
