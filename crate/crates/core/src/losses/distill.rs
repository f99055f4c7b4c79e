use super::{similarity_backward, LossTerm};
use crate::backbone::{dot, unit_rows, CosineHead, FeatureBatch};
use crate::error::{Error, Result};

/// Batch mean of `1 − ⟨f̄*(x), f̄(x)⟩`. Only the current features receive a
/// gradient; the frozen model's features are constants.
pub fn distillation_loss(feats: &FeatureBatch, old_feats: &FeatureBatch) -> Result<LossTerm> {
    if feats.rows != old_feats.rows || feats.dim != old_feats.dim {
        return Err(Error::Shape(
            "current and frozen features must have matching shapes".into(),
        ));
    }
    let b = feats.rows;
    let cur = unit_rows(&feats.data, feats.dim, None, "feature")?;
    let old = unit_rows(&old_feats.data, old_feats.dim, None, "frozen feature")?;
    let mut value = 0.0;
    let mut du = vec![0.0; feats.data.len()];
    for i in 0..b {
        value += 1.0 - dot(cur.row(i), old.row(i));
        for (j, &o) in old.row(i).iter().enumerate() {
            du[i * feats.dim + j] = -o / b as f64;
        }
    }
    Ok(LossTerm {
        value: value / b as f64,
        grad_feats: cur.backward(&du),
        grad_embeddings: Vec::new(),
    })
}

/// Knowledge distillation on temperature-softened old-class logits:
/// `T² · KL(softmax(z*/T) ‖ softmax(z/T))` averaged over the batch, where `z`
/// are the current cosine logits restricted to the frozen head's classes.
pub fn soft_distillation_loss(
    feats: &FeatureBatch,
    head: &CosineHead,
    old_feats: &FeatureBatch,
    old_head: &CosineHead,
    temperature: f64,
) -> Result<LossTerm> {
    if feats.rows != old_feats.rows {
        return Err(Error::Shape("batch sizes differ".into()));
    }
    let cols = head.indices_of(&old_head.class_ids)?;
    let b = feats.rows;
    let k = head.num_classes();
    let f = unit_rows(&feats.data, feats.dim, None, "feature")?;
    let e = head.unit_embeddings()?;
    let sims = head.similarities(&f, &e);
    let teacher = old_head.logits(old_feats, None)?;
    let ko = cols.len();

    let softmax = |z: &[f64]| -> Vec<f64> {
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let ex: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = ex.iter().sum();
        ex.into_iter().map(|v| v / s).collect()
    };

    let mut value = 0.0;
    let mut dsim = vec![0.0; b * k];
    for i in 0..b {
        let zs: Vec<f64> = cols
            .iter()
            .map(|&c| head.eta * sims[i * k + c] / temperature)
            .collect();
        let zt: Vec<f64> = teacher[i * ko..(i + 1) * ko]
            .iter()
            .map(|v| v / temperature)
            .collect();
        let ps = softmax(&zs);
        let pt = softmax(&zt);
        for c in 0..ko {
            if pt[c] > 0.0 {
                value += temperature * temperature * pt[c] * (pt[c].ln() - ps[c].ln());
            }
            // ∂/∂z_c of T²·KL = T·(p_s − p_t); z_c = η·s_c
            dsim[i * k + cols[c]] = temperature * (ps[c] - pt[c]) * head.eta / b as f64;
        }
    }
    let (grad_feats, grad_embeddings) = similarity_backward(&f, &e, &dsim);
    Ok(LossTerm {
        value: value / b as f64,
        grad_feats,
        grad_embeddings,
    })
}
