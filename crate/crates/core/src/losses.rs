//! Contrastive and ranking-consistency objectives.
//!
//! The combined objective is
//! `total = l_clip + λ₁ · l_in + λ₂ · l_cross`, where `l_clip` is the symmetric InfoNCE loss
//! over temperature-scaled cosine similarities and the two consistency terms are
//! symmetrised Plackett–Luce rank losses over raw cosine similarities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::{rank_loss, RankLossConfig};
use crate::tensor::{Graph, Indices, Var};

/// Row norms of embedding batches must be within this distance of 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Scheduled,
    Fixed,
}

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    CrossOnly,
    InOnly,
    ClipOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::ClipOnly,
        Ablation::Full,
        Ablation::CrossOnly,
        Ablation::InOnly,
    ];

    pub fn uses_cross(self) -> bool {
        matches!(self, Ablation::Full | Ablation::CrossOnly)
    }

    pub fn uses_in(self) -> bool {
        matches!(self, Ablation::Full | Ablation::InOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::CrossOnly => "cross_only",
            Ablation::InOnly => "in_only",
            Ablation::ClipOnly => "clip_only",
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Contrastive temperature τ, or its initial value when learnable.
    pub temperature_tau: f64,
    /// Train `ln(1/τ)` as a parameter instead of keeping τ fixed.
    pub learnable_temperature: bool,
    pub lambda_mode: LambdaMode,
    pub fixed_lambda1: f64,
    pub fixed_lambda2: f64,
    pub ablation: Ablation,
    pub rank: RankLossConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature_tau: 0.07,
            learnable_temperature: true,
            lambda_mode: LambdaMode::Scheduled,
            fixed_lambda1: 1.0 / 16.0,
            fixed_lambda2: 1.0 / 16.0,
            ablation: Ablation::Full,
            rank: RankLossConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature_tau <= 0.0 || !self.temperature_tau.is_finite() {
            return Err(Error::invalid(format!(
                "temperature_tau must be positive, got {}",
                self.temperature_tau
            )));
        }
        check_lambda(self.fixed_lambda1)?;
        check_lambda(self.fixed_lambda2)?;
        self.rank.validate()
    }
}

/// Scalar components of one evaluation of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_clip: f64,
    pub l_cross: f64,
    pub l_in: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_clip,
            self.l_cross,
            self.l_in,
            self.lambda1,
            self.lambda2,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// `|total - (l_clip + λ₁ l_in + λ₂ l_cross)|`
    pub fn additivity_residual(&self) -> f64 {
        (self.total - (self.l_clip + self.lambda1 * self.l_in + self.lambda2 * self.l_cross)).abs()
    }
}

/// The differentiable total together with its scalar breakdown.
#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn check_lambda(l: f64) -> Result<()> {
    if l < 0.0 || !l.is_finite() {
        return Err(Error::invalid(format!(
            "lambda must be finite and non-negative, got {l}"
        )));
    }
    Ok(())
}

fn check_pair(g: &Graph, op: &'static str, v: Var, t: Var) -> Result<usize> {
    let (vs, ts) = (g.value(v).shape(), g.value(t).shape());
    if vs.len() != 2 || vs != ts {
        return Err(Error::shape(op, format!("image batch {vs:?} vs text batch {ts:?}")));
    }
    if vs[0] == 0 {
        return Err(Error::shape(op, "empty batch"));
    }
    for (name, x) in [("image", v), ("text", t)] {
        let x = g.value(x);
        for r in 0..x.rows() {
            let norm = x.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::invalid(format!(
                    "{op}: {name} row {r} has norm {norm}, expected unit norm"
                )));
            }
        }
    }
    Ok(vs[0])
}

fn infonce_from_logits(g: &mut Graph, logits: Var, n: usize) -> Result<Var> {
    let diag = Indices::column((0..n).collect());
    let mut directions = [logits, g.transpose(logits)?];
    for dir in directions.iter_mut() {
        let lse = g.logsumexp_row(*dir)?;
        let matched = g.gather_last_axis(*dir, &diag)?;
        let nll = g.sub(lse, matched)?;
        *dir = g.mean_all(nll)?;
    }
    let sum = g.add(directions[0], directions[1])?;
    g.scalar_mul(sum, 0.5)
}

/// Symmetric InfoNCE with a fixed temperature `tau`.
pub fn clip_infonce(g: &mut Graph, v_hat: Var, t_hat: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let n = check_pair(g, "clip_infonce", v_hat, t_hat)?;
    let sims = similarity(g, v_hat, t_hat)?;
    let logits = g.scalar_mul(sims, 1.0 / tau)?;
    infonce_from_logits(g, logits, n)
}

/// Symmetric InfoNCE with a (possibly learnable) scalar logit scale `1/τ`.
pub fn clip_infonce_scaled(g: &mut Graph, v_hat: Var, t_hat: Var, logit_scale: Var) -> Result<Var> {
    let n = check_pair(g, "clip_infonce", v_hat, t_hat)?;
    if g.value(logit_scale).numel() != 1 {
        return Err(Error::shape(
            "clip_infonce",
            format!("logit scale must be scalar, got {:?}", g.value(logit_scale).shape()),
        ));
    }
    let sims = similarity(g, v_hat, t_hat)?;
    let logits = g.mul_elementwise(sims, logit_scale)?;
    infonce_from_logits(g, logits, n)
}

/// `a · bᵀ`
fn similarity(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let bt = g.transpose(b)?;
    g.matmul(a, bt)
}

/// Cross-modal consistency: the text ranking seen from each image should agree with the
/// image ranking seen from the paired text, in both directions.
pub fn cross_modal_loss(g: &mut Graph, v_hat: Var, t_hat: Var, rank_cfg: &RankLossConfig) -> Result<Var> {
    check_pair(g, "cross_modal_loss", v_hat, t_hat)?;
    let text_per_image = similarity(g, v_hat, t_hat)?;
    let image_per_text = g.transpose(text_per_image)?;
    let a = rank_loss(g, text_per_image, image_per_text, rank_cfg)?;
    let b = rank_loss(g, image_per_text, text_per_image, rank_cfg)?;
    g.add(a, b)
}

/// In-modal consistency: image–image similarity rankings should agree with text–text
/// rankings of the paired captions, in both directions. Diagonals are kept.
pub fn in_modal_loss(g: &mut Graph, v_hat: Var, t_hat: Var, rank_cfg: &RankLossConfig) -> Result<Var> {
    check_pair(g, "in_modal_loss", v_hat, t_hat)?;
    let image_image = similarity(g, v_hat, v_hat)?;
    let text_text = similarity(g, t_hat, t_hat)?;
    let a = rank_loss(g, image_image, text_text, rank_cfg)?;
    let b = rank_loss(g, text_text, image_image, rank_cfg)?;
    g.add(a, b)
}

/// Combined objective with the fixed temperature from `cfg`.
pub fn rankclip_total(
    g: &mut Graph,
    v_hat: Var,
    t_hat: Var,
    cfg: &LossConfig,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossOutput> {
    total_impl(g, v_hat, t_hat, cfg, lambda1, lambda2, None)
}

/// Combined objective with an explicit logit scale (learnable temperature).
pub fn rankclip_total_scaled(
    g: &mut Graph,
    v_hat: Var,
    t_hat: Var,
    logit_scale: Var,
    cfg: &LossConfig,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossOutput> {
    total_impl(g, v_hat, t_hat, cfg, lambda1, lambda2, Some(logit_scale))
}

fn total_impl(
    g: &mut Graph,
    v_hat: Var,
    t_hat: Var,
    cfg: &LossConfig,
    lambda1: f64,
    lambda2: f64,
    logit_scale: Option<Var>,
) -> Result<LossOutput> {
    check_lambda(lambda1)?;
    check_lambda(lambda2)?;
    cfg.validate()?;

    let l_clip = match logit_scale {
        Some(s) => clip_infonce_scaled(g, v_hat, t_hat, s)?,
        None => clip_infonce(g, v_hat, t_hat, cfg.temperature_tau)?,
    };
    let mut total = l_clip;
    let mut l_in = 0.0;
    let mut l_cross = 0.0;
    if cfg.ablation.uses_in() {
        let term = in_modal_loss(g, v_hat, t_hat, &cfg.rank)?;
        l_in = g.value(term).item()?;
        let weighted = g.scalar_mul(term, lambda1)?;
        total = g.add(total, weighted)?;
    }
    if cfg.ablation.uses_cross() {
        let term = cross_modal_loss(g, v_hat, t_hat, &cfg.rank)?;
        l_cross = g.value(term).item()?;
        let weighted = g.scalar_mul(term, lambda2)?;
        total = g.add(total, weighted)?;
    }
    let breakdown = LossBreakdown {
        l_clip: g.value(l_clip).item()?,
        l_cross,
        l_in,
        lambda1,
        lambda2,
        total: g.value(total).item()?,
    };
    Ok(LossOutput { total, breakdown })
}

/// Ranking-loss weights for epoch `epoch` (1-based) of `total_epochs`.
///
/// Scheduled mode ramps both weights as `clip((3i - 1) / (n - 1), 0, 2)`; fixed mode returns
/// the configured pair.
pub fn lambda_schedule(epoch: usize, total_epochs: usize, mode: LambdaMode, fixed: (f64, f64)) -> Result<(f64, f64)> {
    if epoch < 1 || epoch > total_epochs {
        return Err(Error::invalid(format!("epoch {epoch} out of range 1..={total_epochs}")));
    }
    match mode {
        LambdaMode::Scheduled => {
            if total_epochs < 2 {
                return Err(Error::invalid(format!(
                    "scheduled lambda needs at least 2 epochs, got {total_epochs}"
                )));
            }
            let raw = (3 * epoch - 1) as f64 / (total_epochs - 1) as f64;
            let l = raw.clamp(0.0, 2.0);
            Ok((l, l))
        }
        LambdaMode::Fixed => {
            check_lambda(fixed.0)?;
            check_lambda(fixed.1)?;
            Ok(fixed)
        }
    }
}
