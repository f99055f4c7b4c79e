use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{ClassId, ModelState};
use crate::data::Dataset;
use crate::error::Result;
use crate::synthesis::argmax;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub correct: usize,
    pub total: usize,
}

impl ClassCount {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Per-class test outcomes of one model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_class: BTreeMap<ClassId, ClassCount>,
}

impl Evaluation {
    /// Correct over total across `classes`.
    pub fn accuracy_over(&self, classes: &[ClassId]) -> Option<f64> {
        let (c, t) = classes
            .iter()
            .filter_map(|k| self.per_class.get(k))
            .fold((0, 0), |(c, t), x| (c + x.correct, t + x.total));
        (t > 0).then(|| c as f64 / t as f64)
    }

    pub fn overall(&self) -> Option<f64> {
        let classes: Vec<ClassId> = self.per_class.keys().copied().collect();
        self.accuracy_over(&classes)
    }
}

/// Predicted class ids (argmax cosine logit over every seen class).
pub fn predict(model: &ModelState, data: &Dataset, indices: &[usize]) -> Result<Vec<ClassId>> {
    let k = model.head.num_classes();
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let feats = model.features(&data.batch(chunk)?)?;
        let logits = model.head.logits(&feats, None)?;
        out.extend(logits.chunks_exact(k).map(|row| model.head.class_ids[argmax(row)]));
    }
    Ok(out)
}

/// Accuracy on the samples of `indices` whose class has been seen.
pub fn evaluate(model: &ModelState, data: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    let seen = model.seen_classes();
    let kept: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| seen.contains(&data.label(i)))
        .collect();
    let mut per_class: BTreeMap<ClassId, ClassCount> =
        seen.iter().map(|&k| (k, ClassCount::default())).collect();
    for (&i, p) in kept.iter().zip(predict(model, data, &kept)?) {
        let e = per_class.get_mut(&data.label(i)).unwrap();
        e.total += 1;
        if p == data.label(i) {
            e.correct += 1;
        }
    }
    Ok(Evaluation { per_class })
}

/// Accuracy bookkeeping of a whole schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub ablations: String,
    pub seed: u64,
    pub tasks: Vec<Vec<ClassId>>,
    /// `accuracy_matrix[t][τ]`: accuracy on task-τ classes after task `t`;
    /// `null` for `τ > t`.
    pub accuracy_matrix: Vec<Vec<Option<f64>>>,
    /// Accuracy over every seen test sample after each task.
    pub average_accuracy: Vec<f64>,
    pub final_average_accuracy: f64,
    /// Mean over classes learned before the last task of their largest drop
    /// from an earlier best.
    pub forgetting: f64,
    pub per_class: Vec<BTreeMap<ClassId, ClassCount>>,
    pub checkpoints: Vec<String>,
    pub seed_ledger: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn from_evaluations(
        strategy: String,
        ablations: String,
        seed: u64,
        tasks: Vec<Vec<ClassId>>,
        evals: &[Evaluation],
        checkpoints: Vec<String>,
        seed_ledger: BTreeMap<String, String>,
    ) -> Self {
        let t = evals.len();
        let accuracy_matrix = (0..t)
            .map(|row| {
                (0..tasks.len())
                    .map(|col| {
                        if col <= row {
                            evals[row].accuracy_over(&tasks[col])
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect();
        let average_accuracy: Vec<f64> = evals
            .iter()
            .map(|e| e.overall().unwrap_or(0.0))
            .collect();
        MetricsReport {
            strategy,
            ablations,
            seed,
            forgetting: forgetting(&tasks, evals),
            final_average_accuracy: average_accuracy.last().copied().unwrap_or(0.0),
            accuracy_matrix,
            average_accuracy,
            per_class: evals.iter().map(|e| e.per_class.clone()).collect(),
            tasks,
            checkpoints,
            seed_ledger,
        }
    }
}

fn forgetting(tasks: &[Vec<ClassId>], evals: &[Evaluation]) -> f64 {
    let Some(last) = evals.len().checked_sub(1) else {
        return 0.0;
    };
    let mut drops = Vec::new();
    for (intro, classes) in tasks.iter().enumerate().take(last) {
        for k in classes {
            let acc = |t: usize| evals[t].per_class.get(k).and_then(ClassCount::accuracy);
            let best = (intro..last).filter_map(acc).fold(f64::NEG_INFINITY, f64::max);
            if let (true, Some(now)) = (best.is_finite(), acc(last)) {
                drops.push(best - now);
            }
        }
    }
    if drops.is_empty() {
        0.0
    } else {
        drops.iter().sum::<f64>() / drops.len() as f64
    }
}
