use super::{similarity_backward, LossTerm};
use crate::backbone::{unit_rows, ClassId, CosineHead, FeatureBatch};
use crate::error::{Error, Result};

/// Hinge separating old-class anchors from the new classes: for each anchor,
/// `Σ_{k ∈ new} max(m − ⟨θ̄_true, f̄⟩ + ⟨θ̄_k, f̄⟩, 0)`, averaged over anchors.
///
/// At the kink (hinge argument exactly zero) the zero subgradient is used.
pub fn margin_loss(
    anchor_feats: &FeatureBatch,
    anchor_labels: &[ClassId],
    head: &CosineHead,
    new_class_ids: &[ClassId],
    margin: f64,
) -> Result<LossTerm> {
    head.check_dim(anchor_feats)?;
    if new_class_ids.is_empty() {
        return Err(Error::Contract("margin loss needs at least one new class".into()));
    }
    if let Some(l) = anchor_labels.iter().find(|l| new_class_ids.contains(l)) {
        return Err(Error::Contract(format!(
            "margin anchor labelled with new class {l}"
        )));
    }
    let truth = head.indices_of(anchor_labels)?;
    let negatives = head.indices_of(new_class_ids)?;
    let b = anchor_feats.rows;
    let k = head.num_classes();
    let f = unit_rows(&anchor_feats.data, anchor_feats.dim, None, "feature")?;
    let e = head.unit_embeddings()?;
    let sims = head.similarities(&f, &e);

    let mut value = 0.0;
    let mut dsim = vec![0.0; b * k];
    for i in 0..b {
        let s_true = sims[i * k + truth[i]];
        for &n in &negatives {
            let h = margin - s_true + sims[i * k + n];
            if h > 0.0 {
                value += h;
                dsim[i * k + truth[i]] -= 1.0 / b as f64;
                dsim[i * k + n] += 1.0 / b as f64;
            }
        }
    }
    let (grad_feats, grad_embeddings) = similarity_backward(&f, &e, &dsim);
    Ok(LossTerm {
        value: value / b as f64,
        grad_feats,
        grad_embeddings,
    })
}
