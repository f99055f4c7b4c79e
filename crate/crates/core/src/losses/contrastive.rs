//! Centroid bank and the intra-domain contrastive loss.
//!
//! Source centroids summarize synthesized replay features (true labels);
//! target centroids summarize real features under pseudo-labels. Both are
//! exponential moving averages; the gradient of the loss reaches the features
//! of the current batch through the `(1 − ρ)` share of the update.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{dot, unit_rows, ClassId, FeatureBatch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CentroidPair {
    pub source: Option<Vec<f64>>,
    pub target: Option<Vec<f64>>,
}

impl CentroidPair {
    pub fn get(&self, domain: Domain) -> Option<&Vec<f64>> {
        match domain {
            Domain::Source => self.source.as_ref(),
            Domain::Target => self.target.as_ref(),
        }
    }

    fn slot(&mut self, domain: Domain) -> &mut Option<Vec<f64>> {
        match domain {
            Domain::Source => &mut self.source,
            Domain::Target => &mut self.target,
        }
    }
}

/// One centroid's dependence on the batch that last updated it:
/// `∂c / ∂f_i = weight` for every member row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidUpdate {
    pub class: ClassId,
    pub domain: Domain,
    pub weight: f64,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank {
    pub dim: usize,
    /// EMA momentum ρ.
    pub momentum: f64,
    pub classes: BTreeMap<ClassId, CentroidPair>,
}

impl CentroidBank {
    pub fn new(dim: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Contract("centroid momentum must lie in [0, 1]".into()));
        }
        Ok(CentroidBank {
            dim,
            momentum,
            classes: BTreeMap::new(),
        })
    }

    pub fn centroid(&self, class: ClassId, domain: Domain) -> Option<&Vec<f64>> {
        self.classes.get(&class).and_then(|p| p.get(domain))
    }

    pub fn is_eligible(&self, class: ClassId) -> bool {
        self.classes
            .get(&class)
            .is_some_and(|p| p.source.is_some() && p.target.is_some())
    }

    /// `c ← ρ·c + (1 − ρ)·mean` for every class present in `labels`; the first
    /// observation of a centroid sets it to the batch class mean. Classes
    /// absent from the batch are untouched.
    pub fn update(
        &mut self,
        feats: &FeatureBatch,
        labels: &[ClassId],
        domain: Domain,
    ) -> Result<Vec<CentroidUpdate>> {
        if feats.dim != self.dim {
            return Err(Error::Shape(format!(
                "feature dim {} but centroid dim {}",
                feats.dim, self.dim
            )));
        }
        if labels.len() != feats.rows {
            return Err(Error::Shape("one label per feature row required".into()));
        }
        let mut members: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            members.entry(l).or_default().push(i);
        }
        let rho = self.momentum;
        let mut updates = Vec::with_capacity(members.len());
        for (class, rows) in members {
            let n = rows.len() as f64;
            let mut mean = vec![0.0; self.dim];
            for &i in &rows {
                mean.iter_mut().zip(feats.row(i)).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let slot = self.classes.entry(class).or_default().slot(domain);
            let weight = match slot {
                Some(c) => {
                    c.iter_mut()
                        .zip(&mean)
                        .for_each(|(c, m)| *c = rho * *c + (1.0 - rho) * m);
                    (1.0 - rho) / n
                }
                None => {
                    *slot = Some(mean);
                    1.0 / n
                }
            };
            updates.push(CentroidUpdate {
                class,
                domain,
                weight,
                members: rows,
            });
        }
        Ok(updates)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub value: f64,
    /// True when no old class had both centroids initialized.
    pub skipped: bool,
    pub eligible: Vec<ClassId>,
    /// Gradient w.r.t. each raw centroid that entered the loss.
    pub grads: BTreeMap<(ClassId, Domain), Vec<f64>>,
}

impl ContrastiveOutput {
    /// Chains centroid gradients to the feature rows that produced `updates`,
    /// accumulating into a `B × D` buffer.
    pub fn backprop_into(&self, updates: &[CentroidUpdate], grad_feats: &mut [f64], dim: usize) {
        for u in updates {
            if let Some(g) = self.grads.get(&(u.class, u.domain)) {
                for &i in &u.members {
                    for j in 0..dim {
                        grad_feats[i * dim + j] += u.weight * g[j];
                    }
                }
            }
        }
    }
}

/// Mean over eligible old classes `k` of
/// `−log( e^{τ⟨c̄_k^S, c̄_k^T⟩} / (e^{τ⟨c̄_k^S, c̄_k^T⟩} + Σ_{j≠k, Q∈{S,T}} e^{τ⟨c̄_j^Q, c̄_k^T⟩}) )`.
///
/// `j` ranges over the other old classes; each `c_j^Q` term appears when that
/// centroid has been initialized.
pub fn contrastive_loss(
    bank: &CentroidBank,
    old_class_ids: &[ClassId],
    tau: f64,
) -> Result<ContrastiveOutput> {
    let eligible: Vec<ClassId> = old_class_ids
        .iter()
        .copied()
        .filter(|&c| bank.is_eligible(c))
        .collect();
    if eligible.is_empty() {
        return Ok(ContrastiveOutput {
            value: 0.0,
            skipped: true,
            eligible,
            grads: BTreeMap::new(),
        });
    }

    // Unit-normalize every initialized centroid once.
    let mut keys = Vec::new();
    let mut raw = Vec::new();
    for &c in old_class_ids {
        for d in [Domain::Source, Domain::Target] {
            if let Some(v) = bank.centroid(c, d) {
                keys.push((c, d));
                raw.extend_from_slice(v);
            }
        }
    }
    let units = unit_rows(&raw, bank.dim, None, "centroid")?;
    let index = |key: (ClassId, Domain)| keys.iter().position(|&k| k == key).unwrap();

    let mut dunit = vec![0.0; raw.len()];
    let scale = 1.0 / eligible.len() as f64;
    let mut value = 0.0;
    for &k in &eligible {
        let tk = index((k, Domain::Target));
        let sk = index((k, Domain::Source));
        let mut terms = vec![(sk, tau * dot(units.row(sk), units.row(tk)))];
        for &j in old_class_ids.iter().filter(|&&j| j != k) {
            for d in [Domain::Source, Domain::Target] {
                if bank.centroid(j, d).is_some() {
                    let q = index((j, d));
                    terms.push((q, tau * dot(units.row(q), units.row(tk))));
                }
            }
        }
        let max = terms.iter().fold(f64::NEG_INFINITY, |m, t| m.max(t.1));
        let z: f64 = terms.iter().map(|t| (t.1 - max).exp()).sum();
        value += max + z.ln() - terms[0].1;
        for (n, &(q, logit)) in terms.iter().enumerate() {
            let p = (logit - max).exp() / z;
            let g = (p - if n == 0 { 1.0 } else { 0.0 }) * tau * scale;
            for j in 0..bank.dim {
                dunit[q * bank.dim + j] += g * units.row(tk)[j];
                dunit[tk * bank.dim + j] += g * units.row(q)[j];
            }
        }
    }
    let draw = units.backward(&dunit);
    let grads = keys
        .iter()
        .enumerate()
        .map(|(i, &key)| (key, draw[i * bank.dim..(i + 1) * bank.dim].to_vec()))
        .collect();
    Ok(ContrastiveOutput {
        value: value * scale,
        skipped: false,
        eligible,
        grads,
    })
}
