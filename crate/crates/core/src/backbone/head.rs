//! Cosine classifier head: temperature-scaled cosine similarity between
//! unit-normalized features and unit-normalized class embeddings. No bias.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassId, FeatureBatch};
use crate::error::{Error, Result};

/// Rows of `data` scaled to unit length, together with their original norms.
#[derive(Debug, Clone)]
pub struct UnitRows {
    pub unit: Vec<f64>,
    pub norms: Vec<f64>,
    pub dim: usize,
}

impl UnitRows {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.unit[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> usize {
        self.norms.len()
    }

    /// Pulls a gradient w.r.t. the unit rows back to the raw rows:
    /// `dv = (du - u ⟨u, du⟩) / ‖v‖`.
    pub fn backward(&self, dunit: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; dunit.len()];
        for i in 0..self.rows() {
            let u = self.row(i);
            let du = &dunit[i * self.dim..(i + 1) * self.dim];
            let proj = dot(u, du);
            let inv = 1.0 / self.norms[i];
            for j in 0..self.dim {
                out[i * self.dim + j] = (du[j] - u[j] * proj) * inv;
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalizes each `dim`-length row. Zero-norm rows are an error unless an
/// epsilon floor is supplied.
pub fn unit_rows(data: &[f64], dim: usize, epsilon: Option<f64>, what: &str) -> Result<UnitRows> {
    let rows = data.len() / dim;
    let mut unit = vec![0.0; data.len()];
    let mut norms = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &data[i * dim..(i + 1) * dim];
        let mut norm = dot(row, row).sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("{what} row {i} has non-finite norm")));
        }
        match epsilon {
            Some(eps) => norm = norm.max(eps),
            None if norm == 0.0 => {
                return Err(Error::DegenerateNorm(format!("{what} row {i} has zero norm")))
            }
            None => {}
        }
        for j in 0..dim {
            unit[i * dim + j] = row[j] / norm;
        }
        norms.push(norm);
    }
    Ok(UnitRows { unit, norms, dim })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineHead {
    pub dim: usize,
    pub eta: f64,
    pub class_ids: Vec<ClassId>,
    /// Row-major `K × dim` class embedding matrix.
    pub embeddings: Vec<f64>,
    /// Norm of new rows when the head is still empty.
    pub init_scale: f64,
}

impl CosineHead {
    pub fn new(dim: usize, eta: f64) -> Self {
        CosineHead {
            dim,
            eta,
            class_ids: Vec::new(),
            embeddings: Vec::new(),
            init_scale: 1.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    pub fn indices_of(&self, labels: &[ClassId]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&c| {
                self.index_of(c)
                    .ok_or_else(|| Error::Label(format!("class {c} is not among the seen classes")))
            })
            .collect()
    }

    /// Appends one embedding row per new class. Each row is a uniformly random
    /// direction scaled to the mean norm of the existing rows, or to
    /// `init_scale` when there are none.
    pub fn extend<R: Rng + ?Sized>(&mut self, new_ids: &[ClassId], rng: &mut R) -> Result<()> {
        for (i, id) in new_ids.iter().enumerate() {
            if self.class_ids.contains(id) || new_ids[..i].contains(id) {
                return Err(Error::Conflict(format!("class {id} is already present")));
            }
        }
        if new_ids.is_empty() {
            return Ok(());
        }
        let scale = if self.class_ids.is_empty() {
            self.init_scale
        } else {
            let k = self.num_classes();
            (0..k).map(|r| dot(self.row(r), self.row(r)).sqrt()).sum::<f64>() / k as f64
        };
        for &id in new_ids {
            let mut dir: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dot(&dir, &dir).sqrt();
            dir.iter_mut().for_each(|v| *v *= scale / norm);
            self.embeddings.extend_from_slice(&dir);
            self.class_ids.push(id);
        }
        Ok(())
    }

    pub fn unit_embeddings(&self) -> Result<UnitRows> {
        unit_rows(&self.embeddings, self.dim, None, "class embedding")
    }

    /// Raw cosine similarities `⟨θ̄_k, f̄_i⟩` (no temperature), `B × K` row-major.
    pub fn similarities(&self, feats: &UnitRows, embeds: &UnitRows) -> Vec<f64> {
        let k = embeds.rows();
        let mut out = vec![0.0; feats.rows() * k];
        for i in 0..feats.rows() {
            for c in 0..k {
                out[i * k + c] = dot(feats.row(i), embeds.row(c));
            }
        }
        out
    }

    /// `η · ⟨θ_k/‖θ_k‖, f_i/‖f_i‖⟩` for every feature row and class, `B × K` row-major.
    pub fn logits(&self, feats: &FeatureBatch, epsilon: Option<f64>) -> Result<Vec<f64>> {
        self.check_dim(feats)?;
        if self.class_ids.is_empty() {
            return Err(Error::Contract("cosine head has no classes".into()));
        }
        let f = unit_rows(&feats.data, feats.dim, epsilon, "feature")?;
        let e = unit_rows(&self.embeddings, self.dim, epsilon, "class embedding")?;
        let mut sims = self.similarities(&f, &e);
        sims.iter_mut().for_each(|s| *s *= self.eta);
        Ok(sims)
    }

    pub(crate) fn check_dim(&self, feats: &FeatureBatch) -> Result<()> {
        if feats.dim != self.dim {
            return Err(Error::Shape(format!(
                "feature dim {} but head dim {}",
                feats.dim, self.dim
            )));
        }
        Ok(())
    }
}
