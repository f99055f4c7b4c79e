use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{synthesis_objective, ClassMeanStore, SynthesisConfig};
use crate::backbone::{ClassId, ImageBatch, ModelState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub tv: f64,
    pub l2: f64,
    pub bn: f64,
}

/// One optimized batch. `trace` has `steps + 1` rows: the objective before
/// every update and after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub labels: Vec<ClassId>,
    pub lr: f64,
    /// Why the first attempt was abandoned, if it was.
    pub retry_reason: Option<String>,
    pub trace: Vec<TraceRow>,
    pub final_hit_rate: f64,
}

/// Synthesized replay: `quota_per_class` images for every old class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassImpressionSet {
    pub quota_per_class: usize,
    pub config: SynthesisConfig,
    pub images: BTreeMap<ClassId, ImageBatch>,
    pub batches: Vec<BatchRecord>,
}

impl ClassImpressionSet {
    pub fn class_ids(&self) -> Vec<ClassId> {
        self.images.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.images.values().map(|b| b.batch).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Every image with its label, classes in ascending id order.
    pub fn flatten(&self) -> Option<(ImageBatch, Vec<ClassId>)> {
        let mut out: Option<ImageBatch> = None;
        let mut labels = Vec::new();
        for (&k, imgs) in &self.images {
            labels.extend(std::iter::repeat_n(k, imgs.batch));
            out = Some(match out {
                None => imgs.clone(),
                Some(acc) => acc.concat(imgs).ok()?,
            });
        }
        out.map(|b| (b, labels))
    }
}

fn optimize_batch(
    frozen: &ModelState,
    init: ImageBatch,
    labels: &[ClassId],
    cfg: &SynthesisConfig,
    lr: f64,
    range: Option<(f64, f64)>,
) -> Result<(ImageBatch, Vec<TraceRow>, f64)> {
    let mut x = init;
    let n = x.data.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let (mut p1, mut p2) = (1.0, 1.0);
    for step in 0..=cfg.steps {
        let eval = match synthesis_objective(frozen, &x, labels, cfg) {
            Err(Error::Numeric(e) | Error::DegenerateNorm(e)) => {
                return Err(Error::Synthesis(format!("step {step} (lr {lr}): {e}")))
            }
            other => other?,
        };
        if !eval.total.is_finite() || eval.grad_input.iter().any(|g| !g.is_finite()) {
            return Err(Error::Synthesis(format!(
                "objective became non-finite at step {step} (lr {lr})"
            )));
        }
        trace.push(TraceRow {
            step,
            total: eval.total,
            ce: eval.parts.ce,
            tv: eval.parts.tv,
            l2: eval.parts.l2,
            bn: eval.parts.bn,
        });
        if step == cfg.steps {
            return Ok((x, trace, eval.hit_rate));
        }
        p1 *= cfg.beta1;
        p2 *= cfg.beta2;
        for i in 0..n {
            let g = eval.grad_input[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m[i] / (1.0 - p1);
            let vh = v[i] / (1.0 - p2);
            x.data[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            if let Some((lo, hi)) = range {
                x.data[i] = x.data[i].clamp(lo, hi);
            }
        }
    }
    unreachable!()
}

/// Fills `quota_per_class` images for every class in `old_classes`. Classes
/// are interleaved within each batch so batch statistics cover the same mix
/// the running estimates were accumulated over. A batch whose objective
/// diverges is retried once from the same start at a tenth of the rate.
pub fn synthesize(
    frozen: &ModelState,
    means: &ClassMeanStore,
    old_classes: &[ClassId],
    quota_per_class: usize,
    cfg: &SynthesisConfig,
    seed: u64,
) -> Result<ClassImpressionSet> {
    cfg.validate("synthesis")?;
    if quota_per_class == 0 {
        return Err(Error::Contract("replay quota must be at least 1".into()));
    }
    if old_classes.is_empty() {
        return Err(Error::Contract("no classes to synthesize".into()));
    }
    frozen.head.indices_of(old_classes)?;
    let range = if cfg.clamp_pixels {
        means.pixel_range()
    } else {
        None
    };

    let plan: Vec<ClassId> = (0..quota_per_class)
        .flat_map(|_| old_classes.iter().copied())
        .collect();
    let mut per_class: BTreeMap<ClassId, Vec<f64>> =
        old_classes.iter().map(|&k| (k, Vec::new())).collect();
    let mut batches = Vec::new();
    for (b, labels) in plan.chunks(cfg.batch_size).enumerate() {
        let label = format!("synthesis-batch-{b}");
        let init = means.init_batch(labels, cfg, &mut crate::rng::stream(seed, &label))?;
        let (out, lr, retry_reason) =
            match optimize_batch(frozen, init.clone(), labels, cfg, cfg.lr, range) {
                Ok(out) => (out, cfg.lr, None),
                Err(Error::Synthesis(reason)) => {
                    let lr = cfg.lr / 10.0;
                    let out = optimize_batch(frozen, init, labels, cfg, lr, range).map_err(
                        |e| Error::Synthesis(format!("batch {b} failed twice: {reason}; {e}")),
                    )?;
                    (out, lr, Some(reason))
                }
                Err(e) => return Err(e),
            };
        let (images, trace, final_hit_rate) = out;
        for (i, &k) in labels.iter().enumerate() {
            per_class.get_mut(&k).unwrap().extend_from_slice(images.image(i));
        }
        batches.push(BatchRecord {
            labels: labels.to_vec(),
            lr,
            retry_reason,
            trace,
            final_hit_rate,
        });
    }
    let g = means.geometry;
    let images = per_class
        .into_iter()
        .map(|(k, data)| {
            ImageBatch::new(quota_per_class, g.height, g.width, g.channels, data).map(|b| (k, b))
        })
        .collect::<Result<_>>()?;
    Ok(ClassImpressionSet {
        quota_per_class,
        config: cfg.clone(),
        images,
        batches,
    })
}
