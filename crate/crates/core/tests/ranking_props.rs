use proptest::prelude::*;
use rankclip_core::ranking::{brute_force_rank_nll, permutations, pl_ranking_prob, rank_loss, rank_loss_rows};
use rankclip_core::tensor::argsort_desc_stable;
use rankclip_core::*;

fn scores(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    len.prop_flat_map(|k| prop::collection::vec(-5.0..5.0f64, k))
}

/// Square matrix whose rows are random permutations of distinct values, so no ties.
fn tie_free_square(n: usize) -> impl Strategy<Value = Tensor> {
    let rows = prop::collection::vec(Just((0..n).collect::<Vec<usize>>()).prop_shuffle(), n);
    let jitter = prop::collection::vec(-0.3..0.3f64, n * n);
    (rows, jitter).prop_map(move |(rows, jitter)| {
        let data = rows.iter().flatten().zip(&jitter).map(|(&r, j)| r as f64 + j).collect();
        Tensor::matrix(n, n, data).unwrap()
    })
}

fn square(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0..3.0f64, n * n).prop_map(move |d| Tensor::matrix(n, n, d).unwrap())
}

/// `(pred, reference)` of equal size with a tie-free reference.
fn instance(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = (Tensor, Tensor)> {
    n.prop_flat_map(|n| (square(n), tie_free_square(n)))
}

fn loss_value(pred: &Tensor, reference: &Tensor, seed: u64) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let r = g.constant(reference.clone());
    let l = rank_loss(&mut g, p, r, &RankLossConfig::default().with_seed(seed)).unwrap();
    g.value(l).item().unwrap()
}

fn row_values(pred: &Tensor, reference: &Tensor, seed: u64) -> Vec<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let r = g.constant(reference.clone());
    let l = rank_loss_rows(&mut g, p, r, &RankLossConfig::default().with_seed(seed)).unwrap();
    g.value(l).data().to_vec()
}

proptest! {
    #[test]
    fn permutation_probabilities_sum_to_one(s in scores(1..=6)) {
        let idx: Vec<usize> = (0..s.len()).collect();
        let total: f64 = permutations(&idx).iter().map(|o| pl_ranking_prob(&s, o).unwrap()).sum();
        prop_assert!((total - 1.0).abs() < 1e-10, "{total}");
    }

    #[test]
    fn rows_match_brute_force((pred, reference) in instance(2..=6), seed in any::<u64>()) {
        let rows = row_values(&pred, &reference, seed);
        for (i, &v) in rows.iter().enumerate() {
            let oracle = brute_force_rank_nll(pred.row(i), reference.row(i)).unwrap();
            prop_assert!((v - oracle).abs() < 1e-8, "row {i}: {v} vs {oracle}");
        }
    }

    #[test]
    fn shift_invariance((pred, reference) in instance(2..=7), c in -50.0..50.0f64) {
        let shifted = Tensor::new(pred.shape().to_vec(), pred.data().iter().map(|x| x + c).collect()).unwrap();
        let (a, b) = (loss_value(&pred, &reference, 1), loss_value(&shifted, &reference, 1));
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn shuffle_seed_does_not_matter_without_ties((pred, reference) in instance(2..=7), s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (loss_value(&pred, &reference, s1), loss_value(&pred, &reference, s2));
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn loss_is_nonnegative((pred, reference) in (1..=7usize).prop_flat_map(|n| (square(n), square(n))), seed in any::<u64>()) {
        prop_assert!(loss_value(&pred, &reference, seed) >= -1e-12);
    }

    #[test]
    fn sort_then_gather_inverse(x in (1..=8usize).prop_flat_map(square)) {
        let idx = argsort_desc_stable(&x).unwrap();
        let sorted = x.gather_last_axis(&idx).unwrap();
        for r in 0..x.rows() {
            let row = sorted.row(r);
            prop_assert!(row.windows(2).all(|w| w[0] >= w[1]));
            let mut inverse = vec![0; x.cols()];
            for (pos, &src) in idx.row(r).iter().enumerate() {
                inverse[src] = pos;
            }
            for (c, &pos) in inverse.iter().enumerate() {
                prop_assert_eq!(row[pos], x.get(r, c));
            }
        }
    }

    #[test]
    fn cumsum_gradient_is_suffix_count(x in (1..=6usize).prop_flat_map(square)) {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let c = g.cumsum_last_axis(v).unwrap();
        let s = g.sum_all(c).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(v).unwrap();
        let n = x.cols();
        for r in 0..x.rows() {
            for j in 0..n {
                prop_assert_eq!(grad.get(r, j), (n - j) as f64);
            }
        }
    }
}
