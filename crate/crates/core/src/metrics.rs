//! Evaluation of frozen encoders on the held-out split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{PairedDataset, Split};
use crate::encoders::{encode_batch, EncoderParams, Modality};
use crate::error::{Error, Result};
use crate::losses::UNIT_NORM_TOLERANCE;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub top_ks: Vec<usize>,
    pub recall_ks: Vec<usize>,
    pub probe_l2: f64,
    pub probe_iters: usize,
    pub probe_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_ks: vec![1, 3, 5],
            recall_ks: vec![1, 5, 10],
            probe_l2: 1e-4,
            probe_iters: 300,
            probe_lr: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top_k_accuracy: BTreeMap<usize, f64>,
    pub recall_image_to_text: BTreeMap<usize, f64>,
    pub recall_text_to_image: BTreeMap<usize, f64>,
    pub alignment: f64,
    pub uniformity: f64,
    /// Distance between the image and text centroids.
    pub modality_gap: f64,
    /// Mean distance between matched image and text embeddings.
    pub pair_gap_mean: f64,
    pub consistency_spearman: f64,
    pub linear_probe_accuracy: f64,
    /// Number of evaluated pairs.
    pub n: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// Column names of [`MetricsReport::csv_row`].
    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = Vec::new();
        cols.extend(self.top_k_accuracy.keys().map(|k| format!("top{k}")));
        cols.extend(self.recall_image_to_text.keys().map(|k| format!("i2t_r{k}")));
        cols.extend(self.recall_text_to_image.keys().map(|k| format!("t2i_r{k}")));
        cols.extend(
            [
                "alignment",
                "uniformity",
                "modality_gap",
                "pair_gap_mean",
                "consistency_spearman",
                "linear_probe_accuracy",
                "n",
            ]
            .map(String::from),
        );
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut vals: Vec<String> = Vec::new();
        for map in [
            &self.top_k_accuracy,
            &self.recall_image_to_text,
            &self.recall_text_to_image,
        ] {
            vals.extend(map.values().map(|v| v.to_string()));
        }
        for v in [
            self.alignment,
            self.uniformity,
            self.modality_gap,
            self.pair_gap_mean,
            self.consistency_spearman,
            self.linear_probe_accuracy,
        ] {
            vals.push(v.to_string());
        }
        vals.push(self.n.to_string());
        vals.join(",")
    }
}

fn check_unit(op: &'static str, x: &Tensor) -> Result<()> {
    if !x.is_matrix() || x.rows() == 0 {
        return Err(Error::shape(
            op,
            format!("expected a non-empty matrix, got {:?}", x.shape()),
        ));
    }
    for r in 0..x.rows() {
        let norm = x.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::invalid(format!(
                "{op}: row {r} has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(())
}

fn check_pair(op: &'static str, v: &Tensor, t: &Tensor) -> Result<()> {
    check_unit(op, v)?;
    check_unit(op, t)?;
    if v.shape() != t.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", v.shape(), t.shape())));
    }
    Ok(())
}

/// Zero-based rank of `target` in `row` under descending order, ties to the lower index.
fn rank_of(row: &[f64], target: usize) -> usize {
    let s = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

fn check_ks(ks: &[usize], max: usize, what: &str) -> Result<()> {
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > max) {
        return Err(Error::invalid(format!("k = {k} out of range 1..={max} for {what}")));
    }
    Ok(())
}

/// Top-k accuracy from an `M × C` score matrix.
pub fn top_k_from_scores(scores: &Tensor, labels: &[u32], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if !scores.is_matrix() || scores.rows() == 0 {
        return Err(Error::invalid("zero_shot_accuracy: empty evaluation split"));
    }
    if labels.len() != scores.rows() {
        return Err(Error::shape("zero_shot_accuracy", "one label per score row required"));
    }
    check_ks(ks, scores.cols(), "classes")?;
    let ranks: Vec<usize> = (0..scores.rows())
        .map(|i| rank_of(scores.row(i), labels[i] as usize))
        .collect();
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64))
        .collect())
}

/// Recall@k from an `M × M` similarity matrix whose matching item of row `i` is column `i`.
pub fn recall_from_sims(sims: &Tensor, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let m = sims.rows();
    if !sims.is_matrix() || m == 0 || sims.cols() != m {
        return Err(Error::shape(
            "retrieval_recall",
            format!("expected square similarities, got {:?}", sims.shape()),
        ));
    }
    check_ks(ks, m, "evaluation pairs")?;
    let ranks: Vec<usize> = (0..m).map(|i| rank_of(sims.row(i), i)).collect();
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / m as f64))
        .collect())
}

fn eval_embeddings(params: &EncoderParams, ds: &PairedDataset) -> Result<(Tensor, Tensor, Vec<u32>)> {
    let idx = ds.indices(Split::Eval);
    if idx.is_empty() {
        return Err(Error::invalid("empty evaluation split"));
    }
    let b = ds.batch(&idx);
    Ok((
        encode_batch(params, &b.image, Modality::Image)?,
        encode_batch(params, &b.text, Modality::Text)?,
        b.labels,
    ))
}

/// Classifies evaluation images against one text input per class (`class_texts`, `C × text_dim`).
pub fn zero_shot_accuracy(
    params: &EncoderParams,
    ds: &PairedDataset,
    class_texts: &Tensor,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let (v, _, labels) = eval_embeddings(params, ds)?;
    let anchors = encode_batch(params, class_texts, Modality::Text)?;
    top_k_from_scores(&v.matmul_t(&anchors)?, &labels, ks)
}

pub fn retrieval_recall(
    params: &EncoderParams,
    ds: &PairedDataset,
    ks: &[usize],
    direction: Direction,
) -> Result<BTreeMap<usize, f64>> {
    let (v, t, _) = eval_embeddings(params, ds)?;
    let sims = match direction {
        Direction::ImageToText => v.matmul_t(&t)?,
        Direction::TextToImage => t.matmul_t(&v)?,
    };
    recall_from_sims(&sims, ks)
}

/// `S_A = mean_j v̂_j·t̂_j` and `S_U = log(mean_{j≠k} exp(−v̂_j·t̂_k))`.
pub fn alignment_uniformity(v_hat: &Tensor, t_hat: &Tensor) -> Result<(f64, f64)> {
    check_pair("alignment_uniformity", v_hat, t_hat)?;
    let n = v_hat.rows();
    if n < 2 {
        return Err(Error::invalid("alignment_uniformity needs at least 2 pairs"));
    }
    let sims = v_hat.matmul_t(t_hat)?;
    let s_a = (0..n).map(|j| sims.get(j, j)).sum::<f64>() / n as f64;
    let mut acc = 0.0;
    for j in 0..n {
        for k in 0..n {
            if j != k {
                acc += (-sims.get(j, k)).exp();
            }
        }
    }
    Ok((s_a, (acc / (n * (n - 1)) as f64).ln()))
}

fn centroid(x: &Tensor) -> Vec<f64> {
    let mut c = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        c.iter_mut().zip(x.row(r)).for_each(|(a, b)| *a += b);
    }
    c.iter_mut().for_each(|a| *a /= x.rows() as f64);
    c
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean distance between the image and text centroids.
pub fn modality_gap(v_hat: &Tensor, t_hat: &Tensor) -> Result<f64> {
    check_pair("modality_gap", v_hat, t_hat)?;
    Ok(distance(&centroid(v_hat), &centroid(t_hat)))
}

/// Mean of `‖v̂_j − t̂_j‖` over pairs.
pub fn pair_gap_mean(v_hat: &Tensor, t_hat: &Tensor) -> Result<f64> {
    check_pair("pair_gap_mean", v_hat, t_hat)?;
    let n = v_hat.rows();
    Ok((0..n).map(|j| distance(v_hat.row(j), t_hat.row(j))).sum::<f64>() / n as f64)
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Spearman correlation with average ranks for ties. A constant input gives 0.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Mean over `j` of the Spearman correlation between row `j` of `v̂v̂ᵀ` and row `j` of
/// `t̂t̂ᵀ`, each with its diagonal entry removed.
pub fn consistency_spearman(v_hat: &Tensor, t_hat: &Tensor) -> Result<f64> {
    if !v_hat.is_matrix() || v_hat.shape() != t_hat.shape() {
        return Err(Error::shape(
            "consistency_spearman",
            format!("{:?} vs {:?}", v_hat.shape(), t_hat.shape()),
        ));
    }
    let n = v_hat.rows();
    if n < 3 {
        return Err(Error::invalid("consistency_spearman needs at least 3 pairs"));
    }
    let (p, q) = (v_hat.matmul_t(v_hat)?, t_hat.matmul_t(t_hat)?);
    let off_diag = |m: &Tensor, j: usize| -> Vec<f64> {
        m.row(j)
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != j)
            .map(|(_, &x)| x)
            .collect()
    };
    let total: f64 = (0..n).map(|j| spearman(&off_diag(&p, j), &off_diag(&q, j))).sum();
    Ok(total / n as f64)
}

/// Multinomial logistic regression with L2 penalty, trained by full-batch gradient descent
/// from zero weights; returns accuracy on the evaluation features.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[u32],
    eval_x: &Tensor,
    eval_y: &[u32],
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<f64> {
    if cfg.probe_iters < 1
        || cfg.probe_lr.is_nan()
        || cfg.probe_lr <= 0.0
        || cfg.probe_l2.is_nan()
        || cfg.probe_l2 < 0.0
    {
        return Err(Error::invalid("linear_probe needs iters >= 1, lr > 0 and l2 >= 0"));
    }
    if train_x.rows() != train_y.len() || eval_x.rows() != eval_y.len() || train_x.cols() != eval_x.cols() {
        return Err(Error::shape("linear_probe", "features and labels disagree"));
    }
    if eval_y.is_empty() {
        return Err(Error::invalid("linear_probe: empty evaluation split"));
    }
    let first = train_y.first().copied();
    if train_y.iter().all(|&y| Some(y) == first) {
        return Err(Error::invalid(
            "linear_probe needs at least two classes in the training split",
        ));
    }
    if let Some(&y) = train_y.iter().chain(eval_y).find(|&&y| y as usize >= num_classes) {
        return Err(Error::invalid(format!(
            "label {y} out of range for {num_classes} classes"
        )));
    }
    let (n, d, c) = (train_x.rows(), train_x.cols(), num_classes);
    let mut w = Tensor::zeros(vec![d, c]);
    let mut b = vec![0.0; c];
    for _ in 0..cfg.probe_iters {
        let mut logits = train_x.matmul(&w)?;
        // Softmax minus one-hot, averaged over samples.
        for (i, &y) in train_y.iter().enumerate() {
            let row = &mut logits.data_mut()[i * c..(i + 1) * c];
            row.iter_mut().zip(&b).for_each(|(z, bb)| *z += bb);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row
                .iter_mut()
                .map(|z| {
                    *z = (*z - max).exp();
                    *z
                })
                .sum();
            row.iter_mut().for_each(|z| *z /= sum * n as f64);
            row[y as usize] -= 1.0 / n as f64;
        }
        let gw = train_x.transpose()?.matmul(&logits)?;
        for (k, bb) in b.iter_mut().enumerate() {
            *bb -= cfg.probe_lr * (0..n).map(|i| logits.get(i, k)).sum::<f64>();
        }
        w.data_mut()
            .iter_mut()
            .zip(gw.data())
            .for_each(|(wv, g)| *wv -= cfg.probe_lr * (g + cfg.probe_l2 * *wv));
    }
    let scores = eval_x.matmul(&w)?;
    let correct = (0..eval_x.rows())
        .filter(|&i| {
            let row: Vec<f64> = scores.row(i).iter().zip(&b).map(|(s, bb)| s + bb).collect();
            rank_of(&row, eval_y[i] as usize) == 0
        })
        .count();
    Ok(correct as f64 / eval_y.len() as f64)
}

/// All metrics on the evaluation split; the probe is fitted on training-split image embeddings.
pub fn evaluate(
    params: &EncoderParams,
    ds: &PairedDataset,
    class_texts: &Tensor,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let (v, t, labels) = eval_embeddings(params, ds)?;
    let anchors = encode_batch(params, class_texts, Modality::Text)?;
    let top_k_accuracy = top_k_from_scores(&v.matmul_t(&anchors)?, &labels, &cfg.top_ks)?;
    let i2t = v.matmul_t(&t)?;
    let recall_image_to_text = recall_from_sims(&i2t, &cfg.recall_ks)?;
    let recall_text_to_image = recall_from_sims(&i2t.transpose()?, &cfg.recall_ks)?;
    let (alignment, uniformity) = alignment_uniformity(&v, &t)?;

    let train = ds.batch(&ds.indices(Split::Train));
    let train_v = encode_batch(params, &train.image, Modality::Image)?;
    let linear_probe_accuracy = linear_probe(&train_v, &train.labels, &v, &labels, ds.num_classes(), cfg)?;

    Ok(MetricsReport {
        top_k_accuracy,
        recall_image_to_text,
        recall_text_to_image,
        alignment,
        uniformity,
        modality_gap: modality_gap(&v, &t)?,
        pair_gap_mean: pair_gap_mean(&v, &t)?,
        consistency_spearman: consistency_spearman(&v, &t)?,
        linear_probe_accuracy,
        n: labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 0), 0);
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 2), 2);
        assert_eq!(rank_of(&[0.1, 0.9, 0.5], 2), 1);
    }

    #[test]
    fn recall_identity_and_exhaustive() {
        let id = rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let r = recall_from_sims(&id, &[1, 3]).unwrap();
        assert_eq!(r[&1], 1.0);
        let flipped = rows(&[&[0.0, 1.0, 1.0], &[1.0, 0.0, 1.0], &[1.0, 1.0, 0.0]]);
        let r = recall_from_sims(&flipped, &[1, 2, 3]).unwrap();
        assert_eq!((r[&1], r[&3]), (0.0, 1.0));
        assert!(recall_from_sims(&id, &[4]).is_err());
    }

    #[test]
    fn top_k_all_classes() {
        let s = rows(&[&[0.1, 0.2], &[0.3, 0.0]]);
        let acc = top_k_from_scores(&s, &[0, 1], &[1, 2]).unwrap();
        assert_eq!((acc[&1], acc[&2]), (0.0, 1.0));
        assert!(top_k_from_scores(&s, &[0, 1], &[3]).is_err());
        assert!(top_k_from_scores(&Tensor::zeros(vec![0, 2]), &[], &[1]).is_err());
    }

    #[test]
    fn alignment_uniformity_examples() {
        let e = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (s_a, s_u) = alignment_uniformity(&e, &e).unwrap();
        assert_eq!(s_a, 1.0);
        assert_eq!(s_u, 0.0);
        let same = rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let (_, s_u) = alignment_uniformity(&same, &same).unwrap();
        assert!((s_u + 1.0).abs() < 1e-15);
        assert!(alignment_uniformity(&rows(&[&[1.0]]), &rows(&[&[1.0]])).is_err());
    }

    #[test]
    fn modality_gap_examples() {
        let e1 = Tensor::from_rows(&[[1.0, 0.0]; 3]).unwrap();
        let neg = Tensor::from_rows(&[[-1.0, 0.0]; 3]).unwrap();
        let e2 = Tensor::from_rows(&[[0.0, 1.0]; 3]).unwrap();
        assert_eq!(modality_gap(&e1, &e1).unwrap(), 0.0);
        assert_eq!(modality_gap(&e1, &neg).unwrap(), 2.0);
        assert!((modality_gap(&e1, &e2).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((pair_gap_mean(&e1, &e2).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(modality_gap(&Tensor::zeros(vec![0, 2]), &Tensor::zeros(vec![0, 2])).is_err());
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn consistency_identical_is_one() {
        let v = rows(&[&[1.0, 0.0], &[0.6, 0.8], &[0.0, 1.0], &[-0.6, 0.8]]);
        assert!((consistency_spearman(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!(consistency_spearman(&rows(&[&[1.0], &[1.0]]), &rows(&[&[1.0], &[1.0]])).is_err());
    }

    #[test]
    fn probe_separable_and_single_class() {
        let x = rows(&[&[1.0, 0.0], &[0.9, 0.1], &[0.0, 1.0], &[0.1, 0.9]]);
        let y = [0, 0, 1, 1];
        let acc = linear_probe(&x, &y, &x, &y, 2, &EvalConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
        assert!(linear_probe(&x, &[0, 0, 0, 0], &x, &y, 2, &EvalConfig::default()).is_err());
    }
}
