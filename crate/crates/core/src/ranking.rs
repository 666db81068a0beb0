//! Plackett–Luce ranking model and the list-wise rank-consistency loss.
//!
//! Under the Plackett–Luce model a ranking is built by repeatedly picking the next item
//! with probability proportional to `exp(score)` among the items not yet placed. The rank
//! loss is the negative log-likelihood of the ordering induced by a *reference* score
//! matrix, evaluated under the *predicted* scores, row by row.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{argsort_desc_stable, Graph, Indices, Var};

/// Largest list the brute-force oracle will enumerate.
pub const ORACLE_MAX_LEN: usize = 8;

/// One scored list together with a ranking of its items.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingList {
    scores: Vec<f64>,
    order: Vec<usize>,
}

impl RankingList {
    pub fn new(scores: Vec<f64>, order: Vec<usize>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("ranking list must hold at least one item"));
        }
        validate_permutation(&order, scores.len())?;
        Ok(RankingList { scores, order })
    }

    /// The list ranked by its own scores, descending (ties in index order).
    pub fn by_scores(scores: Vec<f64>) -> Result<Self> {
        let order = argsort_desc(&scores)?;
        RankingList::new(scores, order)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn probability(&self) -> Result<f64> {
        pl_ranking_prob(&self.scores, &self.order)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankLossConfig {
    /// Multiplier applied to every per-item loss term.
    pub scale_factor: f64,
    /// Seed of the column shuffle used for tie resolution.
    pub shuffle_seed: u64,
}

impl Default for RankLossConfig {
    fn default() -> Self {
        RankLossConfig {
            scale_factor: 1.0,
            shuffle_seed: 0,
        }
    }
}

impl RankLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale_factor <= 0.0 || !self.scale_factor.is_finite() {
            return Err(Error::invalid(format!(
                "scale_factor must be positive and finite, got {}",
                self.scale_factor
            )));
        }
        Ok(())
    }

    pub fn with_seed(self, shuffle_seed: u64) -> Self {
        RankLossConfig { shuffle_seed, ..self }
    }
}

fn validate_permutation(order: &[usize], k: usize) -> Result<()> {
    if order.len() != k {
        return Err(Error::invalid(format!(
            "order has {} entries for {k} items",
            order.len()
        )));
    }
    let mut seen = vec![false; k];
    for &i in order {
        if i >= k || std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid(format!(
                "order {order:?} is not a permutation of 0..{k}"
            )));
        }
    }
    Ok(())
}

fn argsort_desc(scores: &[f64]) -> Result<Vec<usize>> {
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("NaN filtered"));
    Ok(idx)
}

/// Probability that `candidate` is placed next, given the items already `placed`.
pub fn pl_placement_prob(scores: &[f64], placed: &[usize], candidate: usize) -> Result<f64> {
    let k = scores.len();
    let mut is_placed = vec![false; k];
    for &p in placed {
        if p >= k {
            return Err(Error::invalid(format!("placed index {p} out of range 0..{k}")));
        }
        is_placed[p] = true;
    }
    if candidate >= k {
        return Err(Error::invalid(format!("candidate {candidate} out of range 0..{k}")));
    }
    if is_placed[candidate] {
        return Err(Error::invalid(format!("candidate {candidate} already placed")));
    }
    let c = scores[candidate];
    let denom: f64 = (0..k).filter(|&i| !is_placed[i]).map(|i| (scores[i] - c).exp()).sum();
    Ok(1.0 / denom)
}

/// Probability of the full ranking `order` under scores `scores`.
pub fn pl_ranking_prob(scores: &[f64], order: &[usize]) -> Result<f64> {
    validate_permutation(order, scores.len())?;
    let mut p = 1.0;
    for k in 0..order.len() {
        p *= pl_placement_prob(scores, &order[..k], order[k])?;
    }
    Ok(p)
}

/// Direct-product negative log-likelihood of the reference ordering under `pred_row`.
///
/// No log-space arithmetic is used so that this stays independent of [`rank_loss`]. When the
/// reference has ties, the NLL is averaged over every ordering consistent with the ties.
pub fn brute_force_rank_nll(pred_row: &[f64], reference_row: &[f64]) -> Result<f64> {
    let k = pred_row.len();
    if reference_row.len() != k {
        return Err(Error::invalid(format!(
            "pred has {k} items, reference has {}",
            reference_row.len()
        )));
    }
    if k > ORACLE_MAX_LEN {
        return Err(Error::OracleSizeLimit {
            len: k,
            max: ORACLE_MAX_LEN,
        });
    }
    if k == 0 {
        return Err(Error::invalid("empty list"));
    }
    let base = argsort_desc(reference_row)?;

    // Group tied reference scores; every tie-consistent order permutes within groups.
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &i in &base {
        match groups.last_mut() {
            Some(g) if reference_row[g[0]] == reference_row[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    let mut orders: Vec<Vec<usize>> = vec![Vec::new()];
    for g in &groups {
        let perms = permutations(g);
        orders = orders
            .iter()
            .flat_map(|prefix| {
                perms.iter().map(move |p| {
                    let mut o = prefix.clone();
                    o.extend_from_slice(p);
                    o
                })
            })
            .collect();
    }

    let nll = |order: &[usize]| {
        let mut prob = 1.0;
        for (pos, &item) in order.iter().enumerate() {
            let denom: f64 = order[pos..].iter().map(|&j| pred_row[j].exp()).sum();
            prob *= pred_row[item].exp() / denom;
        }
        -prob.ln()
    };
    let total: f64 = orders.iter().map(|o| nll(o)).sum();
    Ok(total / orders.len() as f64)
}

/// All permutations of `items`, in lexicographic order of positions (Heap's order is not
/// needed here, only completeness).
pub fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}

fn check_square_pair(g: &Graph, pred: Var, reference: Var) -> Result<usize> {
    let (p, r) = (g.value(pred), g.value(reference));
    if !p.is_matrix() || p.shape()[0] != p.shape()[1] {
        return Err(Error::shape(
            "rank_loss",
            format!("pred must be square, got {:?}", p.shape()),
        ));
    }
    if p.shape() != r.shape() {
        return Err(Error::shape(
            "rank_loss",
            format!("pred {:?} vs reference {:?}", p.shape(), r.shape()),
        ));
    }
    let n = p.shape()[0];
    if n == 0 {
        return Err(Error::shape("rank_loss", "empty score matrix"));
    }
    Ok(n)
}

/// The shared column permutation drawn for one rank-loss call.
pub fn shuffle_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream_rng(seed, rng::Stream::RankShuffle, 0, 0));
    perm
}

/// Per-row rank-loss terms (`N × 1`) before the mean reduction.
///
/// Only `pred` receives gradient; the reference contributes its sort order alone.
pub fn rank_loss_rows(g: &mut Graph, pred: Var, reference: Var, cfg: &RankLossConfig) -> Result<Var> {
    cfg.validate()?;
    let n = check_square_pair(g, pred, reference)?;

    // One column permutation shared by both matrices, for randomised tie resolution.
    let perm = Indices::repeat_row(n, &shuffle_permutation(n, cfg.shuffle_seed));
    let pred_shuffled = g.gather_last_axis(pred, &perm)?;
    let ref_shuffled = g.value(reference).gather_last_axis(&perm)?;

    // Reference order, then pred scores arranged in that order.
    let order = argsort_desc_stable(&ref_shuffled)?;
    let pred_sorted = g.gather_last_axis(pred_shuffled, &order)?;

    let row_max = g.row_max(pred_sorted)?;
    let shifted = g.sub(pred_sorted, row_max)?;
    let log_tail = g.reverse_cumulative_logsumexp(shifted)?;
    let per_item = g.sub(log_tail, shifted)?;
    let per_item = if cfg.scale_factor == 1.0 {
        per_item
    } else {
        g.scalar_mul(per_item, cfg.scale_factor)?
    };
    g.row_sum(per_item)
}

/// List-wise Plackett–Luce rank loss: the mean over rows of the per-row negative
/// log-likelihood of `reference`'s descending order under `pred`.
pub fn rank_loss(g: &mut Graph, pred: Var, reference: Var, cfg: &RankLossConfig) -> Result<Var> {
    let rows = rank_loss_rows(g, pred, reference, cfg)?;
    g.mean_all(rows)
}
