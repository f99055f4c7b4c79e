use super::{similarity_backward, LossTerm};
use crate::backbone::{unit_rows, ClassId, CosineHead, FeatureBatch};
use crate::error::Result;

/// Cosine-normalized cross-entropy averaged over the batch:
/// `−log softmax_k(η⟨θ̄_k, f̄⟩)` at the true class.
pub fn cnce_loss(feats: &FeatureBatch, labels: &[ClassId], head: &CosineHead) -> Result<LossTerm> {
    head.check_dim(feats)?;
    let targets = head.indices_of(labels)?;
    let b = feats.rows;
    let k = head.num_classes();
    let f = unit_rows(&feats.data, feats.dim, None, "feature")?;
    let e = head.unit_embeddings()?;
    let sims = head.similarities(&f, &e);

    let mut value = 0.0;
    let mut dsim = vec![0.0; b * k];
    for i in 0..b {
        let row = &sims[i * k..(i + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(head.eta * s));
        let exps: Vec<f64> = row.iter().map(|&s| (head.eta * s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        value += max + z.ln() - head.eta * row[targets[i]];
        for c in 0..k {
            let p = exps[c] / z;
            let onehot = if c == targets[i] { 1.0 } else { 0.0 };
            dsim[i * k + c] = head.eta * (p - onehot) / b as f64;
        }
    }
    let (grad_feats, grad_embeddings) = similarity_backward(&f, &e, &dsim);
    Ok(LossTerm {
        value: value / b as f64,
        grad_feats,
        grad_embeddings,
    })
}
