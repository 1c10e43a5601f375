use serde::{Deserialize, Serialize};

use crate::diffnet::{softplus, Graph, NodeId};
use crate::error::{Error, Result};

/// Which objective a model is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Bradley–Terry on pairs plus attribute regression, shared backbone.
    Smorm,
    SingleOnly,
    MultiOnly,
    /// Bradley–Terry with a fixed margin.
    Margin,
    /// Bradley–Terry with label smoothing.
    LabelSmooth,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 5] = [
        Self::Smorm,
        Self::SingleOnly,
        Self::MultiOnly,
        Self::Margin,
        Self::LabelSmooth,
    ];

    pub fn uses_pairs(self) -> bool {
        self != Self::MultiOnly
    }

    pub fn uses_attributes(self) -> bool {
        matches!(self, Self::Smorm | Self::MultiOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Smorm => "smorm",
            Self::SingleOnly => "single_only",
            Self::MultiOnly => "multi_only",
            Self::Margin => "margin",
            Self::LabelSmooth => "label_smooth",
        }
    }
}

impl std::str::FromStr for TrainingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown training mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: TrainingMode,
    /// Weight of the regression term relative to the pairwise term.
    pub lambda_multi: f64,
    pub margin: f64,
    pub label_smooth_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Smorm,
            lambda_multi: 1.0,
            margin: 0.5,
            label_smooth_eps: 0.1,
        }
    }
}

impl LossConfig {
    pub fn with_mode(mode: TrainingMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_multi >= 0.0) || !self.lambda_multi.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda_multi must be >= 0, got {}",
                self.lambda_multi
            )));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "margin must be >= 0, got {}",
                self.margin
            )));
        }
        if !(0.0..0.5).contains(&self.label_smooth_eps) {
            return Err(Error::InvalidConfig(format!(
                "label_smooth_eps must lie in [0, 0.5), got {}",
                self.label_smooth_eps
            )));
        }
        Ok(())
    }
}

/// `−log σ(score_c − score_r)`, stable for every finite input.
pub fn bt_loss(score_c: f64, score_r: f64) -> f64 {
    softplus(-(score_c - score_r))
}

/// `−log σ(Δ − m)`.
pub fn margin_loss(score_c: f64, score_r: f64, m: f64) -> f64 {
    softplus(-(score_c - score_r - m))
}

/// `−(1−ε)·log σ(Δ) − ε·log σ(−Δ)`.
pub fn label_smooth_loss(score_c: f64, score_r: f64, eps: f64) -> f64 {
    let d = score_c - score_r;
    (1.0 - eps) * softplus(-d) + eps * softplus(d)
}

/// `‖pred − target‖²`, summed over attributes.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: pred.len(),
            found: target.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum())
}

/// Batch-mean pairwise loss of `(n × 1)` score nodes under `cfg.mode`.
pub(crate) fn pairwise_term(
    g: &mut Graph,
    chosen: NodeId,
    rejected: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let delta = g.sub(chosen, rejected)?;
    let per = match cfg.mode {
        TrainingMode::Margin => {
            let shifted = g.add_scalar(delta, -cfg.margin);
            let neg = g.neg(shifted);
            g.softplus(neg)
        }
        TrainingMode::LabelSmooth => {
            let neg = g.neg(delta);
            let a = g.softplus(neg);
            let b = g.softplus(delta);
            let a = g.scale(a, 1.0 - cfg.label_smooth_eps);
            let b = g.scale(b, cfg.label_smooth_eps);
            g.add(a, b)?
        }
        _ => {
            let neg = g.neg(delta);
            g.softplus(neg)
        }
    };
    Ok(g.mean(per))
}

/// Batch mean of per-record squared errors summed over attributes.
pub(crate) fn regression_term(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let n = g.value(pred).rows() as f64;
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / n))
}
