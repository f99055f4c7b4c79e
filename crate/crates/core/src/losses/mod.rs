//! Training-stage losses with analytic gradients: cosine-normalized
//! cross-entropy, old/new margin separation, centroid-level intra-domain
//! contrastive alignment and feature distillation, plus their weighted sum.

mod cnce;
mod contrastive;
mod distill;
mod margin;

pub use cnce::cnce_loss;
pub use contrastive::{
    contrastive_loss, CentroidBank, CentroidPair, CentroidUpdate, ContrastiveOutput, Domain,
};
pub use distill::{distillation_loss, soft_distillation_loss};
pub use margin::margin_loss;

use serde::{Deserialize, Serialize};

use crate::backbone::UnitRows;
use crate::error::{Error, Result};

/// A scalar loss with gradients w.r.t. a feature batch and the class
/// embedding matrix of the cosine head.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    /// Row-major `B × D`.
    pub grad_feats: Vec<f64>,
    /// Row-major `K × D`.
    pub grad_embeddings: Vec<f64>,
}

impl LossTerm {
    pub fn zeros(feat_len: usize, embed_len: usize) -> Self {
        LossTerm {
            value: 0.0,
            grad_feats: vec![0.0; feat_len],
            grad_embeddings: vec![0.0; embed_len],
        }
    }

    fn add_scaled(&mut self, other: &LossTerm, weight: f64) -> Result<()> {
        if other.grad_feats.len() != self.grad_feats.len()
            || other.grad_embeddings.len() != self.grad_embeddings.len()
        {
            return Err(Error::Shape("loss parts computed on different batches".into()));
        }
        self.value += weight * other.value;
        self.grad_feats
            .iter_mut()
            .zip(&other.grad_feats)
            .for_each(|(a, b)| *a += weight * b);
        self.grad_embeddings
            .iter_mut()
            .zip(&other.grad_embeddings)
            .for_each(|(a, b)| *a += weight * b);
        Ok(())
    }
}

/// How the distillation term compares the current and frozen models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistillMode {
    /// `1 − cos(f*(x), f(x))`.
    Cosine,
    /// Temperature-softened KL divergence between old-class logits.
    SoftLogits { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLossConfig {
    pub margin: f64,
    /// Inverse temperature multiplying centroid similarities in the contrastive term.
    pub tau: f64,
    pub alpha_dist: f64,
    pub alpha_margin: f64,
    pub alpha_contras: f64,
    pub distill: DistillMode,
    /// EMA momentum of the centroid bank.
    pub centroid_momentum: f64,
}

impl Default for TrainLossConfig {
    fn default() -> Self {
        TrainLossConfig {
            margin: 0.3,
            tau: 10.0,
            alpha_dist: 5.0,
            alpha_margin: 1.0,
            alpha_contras: 1.0,
            distill: DistillMode::Cosine,
            centroid_momentum: 0.99,
        }
    }
}

impl TrainLossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| {
            Err(Error::Config {
                path: path.into(),
                message: message.into(),
            })
        };
        if !(0.0..=2.0).contains(&self.margin) {
            return bad("margin", "must lie in [0, 2]");
        }
        if !(self.tau > 0.0) {
            return bad("tau", "must be positive");
        }
        for (name, v) in [
            ("alpha_dist", self.alpha_dist),
            ("alpha_margin", self.alpha_margin),
            ("alpha_contras", self.alpha_contras),
        ] {
            if !(v >= 0.0) {
                return bad(name, "must be non-negative");
            }
        }
        if !(0.0..=1.0).contains(&self.centroid_momentum) {
            return bad("centroid_momentum", "must lie in [0, 1]");
        }
        if let DistillMode::SoftLogits { temperature } = self.distill {
            if !(temperature > 0.0) {
                return bad("distill.temperature", "must be positive");
            }
        }
        Ok(())
    }
}

/// Per-step loss parts. A part that was not computed (its weight is zero or
/// it has no inputs) is `None`.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub cnce: LossTerm,
    pub dist: Option<LossTerm>,
    pub margin: Option<LossTerm>,
    pub contras: Option<LossTerm>,
}

/// `L_cnce + α_dist·L_dist + α_margin·L_margin + α_contras·L_contras`, with
/// gradients combined by the same weights.
pub fn total_loss(parts: &LossParts, cfg: &TrainLossConfig) -> Result<LossTerm> {
    let mut total = parts.cnce.clone();
    for (part, weight) in [
        (&parts.dist, cfg.alpha_dist),
        (&parts.margin, cfg.alpha_margin),
        (&parts.contras, cfg.alpha_contras),
    ] {
        if let Some(p) = part {
            if weight != 0.0 {
                total.add_scaled(p, weight)?;
            }
        }
    }
    Ok(total)
}

/// Pulls `∂L/∂s` for a similarity matrix `s_ik = ⟨f̄_i, θ̄_k⟩` back to the raw
/// feature and embedding rows.
pub(crate) fn similarity_backward(
    feats: &UnitRows,
    embeds: &UnitRows,
    dsim: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let b = feats.rows();
    let k = embeds.rows();
    let d = feats.dim;
    let mut du = vec![0.0; b * d];
    let mut de = vec![0.0; k * d];
    for i in 0..b {
        let fi = feats.row(i);
        for c in 0..k {
            let g = dsim[i * k + c];
            if g == 0.0 {
                continue;
            }
            let ec = embeds.row(c);
            for j in 0..d {
                du[i * d + j] += g * ec[j];
                de[c * d + j] += g * fi[j];
            }
        }
    }
    (feats.backward(&du), embeds.backward(&de))
}
