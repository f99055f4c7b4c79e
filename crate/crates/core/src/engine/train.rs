//! One SGD step on the combined objective.

use serde::{Deserialize, Serialize};

use super::{DistillOn, EffectivePhase};
use crate::backbone::{ClassId, FeatureBatch, ImageBatch, Mode, ModelGrads, ModelState};
use crate::error::{Error, Result};
use crate::losses::{
    cnce_loss, contrastive_loss, distillation_loss, margin_loss, soft_distillation_loss, DistillMode,
    total_loss, CentroidBank, Domain, LossParts, LossTerm,
};
use crate::synthesis::argmax;

/// Loss parts of one optimizer step; `None` for parts that were not computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: usize,
    pub epoch: usize,
    pub step: usize,
    pub cnce: f64,
    pub dist: Option<f64>,
    pub margin: Option<f64>,
    pub contras: Option<f64>,
    pub total: f64,
}

/// SGD with heavy-ball momentum; weight decay applies to convolution kernels.
pub(crate) struct Sgd {
    velocity: ModelGrads,
}

impl Sgd {
    pub fn new(model: &ModelState) -> Self {
        Sgd {
            velocity: ModelGrads::zeros_like(model),
        }
    }

    pub fn step(&mut self, model: &mut ModelState, grads: &ModelGrads, lr: f64, momentum: f64, wd: f64) {
        let upd = |p: &mut [f64], g: &[f64], v: &mut [f64], decay: f64| {
            for i in 0..p.len() {
                v[i] = momentum * v[i] + g[i] + decay * p[i];
                p[i] -= lr * v[i];
            }
        };
        for l in 0..model.conv_weights.len() {
            upd(&mut model.conv_weights[l], &grads.conv[l], &mut self.velocity.conv[l], wd);
            upd(&mut model.bn[l].gamma, &grads.gamma[l], &mut self.velocity.gamma[l], 0.0);
            upd(&mut model.bn[l].beta, &grads.beta[l], &mut self.velocity.beta[l], 0.0);
        }
        upd(
            &mut model.head.embeddings,
            &grads.embeddings,
            &mut self.velocity.embeddings,
            0.0,
        );
    }
}

/// Expands a loss computed on `rows` of an `n`-row batch to the full batch.
fn scatter(term: LossTerm, rows: &[usize], n: usize, dim: usize, embed_len: usize) -> LossTerm {
    let mut g = vec![0.0; n * dim];
    for (j, &r) in rows.iter().enumerate() {
        g[r * dim..(r + 1) * dim].copy_from_slice(&term.grad_feats[j * dim..(j + 1) * dim]);
    }
    LossTerm {
        value: term.value,
        grad_feats: g,
        grad_embeddings: if term.grad_embeddings.is_empty() {
            vec![0.0; embed_len]
        } else {
            term.grad_embeddings
        },
    }
}

/// Argmax cosine class and its softmax probability for every row.
pub(crate) fn pseudo_labels_from(model: &ModelState, feats: &FeatureBatch) -> Result<(Vec<ClassId>, Vec<f64>)> {
    let k = model.head.num_classes();
    let logits = model.head.logits(feats, None)?;
    let mut labels = Vec::with_capacity(feats.rows);
    let mut conf = Vec::with_capacity(feats.rows);
    for row in logits.chunks_exact(k) {
        let a = argmax(row);
        let z: f64 = row.iter().map(|v| (v - row[a]).exp()).sum();
        labels.push(model.head.class_ids[a]);
        conf.push(1.0 / z);
    }
    Ok((labels, conf))
}

pub(crate) struct StepInput<'a> {
    pub images: &'a ImageBatch,
    pub labels: &'a [ClassId],
    pub replay: &'a [bool],
    /// Unlabeled images that only feed the target centroids.
    pub target_extra: Option<&'a ImageBatch>,
}

pub(crate) struct StepContext<'a> {
    pub frozen: Option<&'a ModelState>,
    pub old_classes: &'a [ClassId],
    pub new_classes: &'a [ClassId],
    pub phase: &'a EffectivePhase,
    pub distill_on: DistillOn,
}

/// Forward, loss, backward, SGD update and running-statistics update.
pub(crate) fn train_step(
    model: &mut ModelState,
    sgd: &mut Sgd,
    bank: Option<&mut CentroidBank>,
    input: &StepInput,
    ctx: &StepContext,
    (phase, epoch, step): (usize, usize, usize),
) -> Result<StepRecord> {
    let cfg = &ctx.phase.train;
    let b = input.images.batch;
    let images = match input.target_extra {
        Some(extra) => input.images.concat(extra)?,
        None => input.images.clone(),
    };
    let n = images.batch;
    let dim = model.feature_dim();
    let embed_len = model.head.embeddings.len();
    let pass = model.forward(&images, Mode::Train)?;
    let feats = &pass.features;

    let main: Vec<usize> = (0..b).collect();
    let cnce = scatter(
        cnce_loss(&feats.select(&main), input.labels, &model.head)?,
        &main,
        n,
        dim,
        embed_len,
    );

    let dist = match ctx.frozen {
        Some(frozen) if cfg.alpha_dist != 0.0 => {
            let rows: Vec<usize> = main
                .iter()
                .copied()
                .filter(|&i| match ctx.distill_on {
                    DistillOn::All => true,
                    DistillOn::New => !input.replay[i],
                    DistillOn::Replay => input.replay[i],
                })
                .collect();
            if rows.is_empty() {
                None
            } else {
                let old = frozen.features(&images.select(&rows)?)?;
                let cur = feats.select(&rows);
                let term = match cfg.distill {
                    DistillMode::Cosine => distillation_loss(&cur, &old)?,
                    DistillMode::SoftLogits { temperature } => {
                        soft_distillation_loss(&cur, &model.head, &old, &frozen.head, temperature)?
                    }
                };
                Some(scatter(term, &rows, n, dim, embed_len))
            }
        }
        _ => None,
    };

    let anchors: Vec<usize> = main.iter().copied().filter(|&i| input.replay[i]).collect();
    let margin = if cfg.alpha_margin != 0.0 && !anchors.is_empty() {
        let labels: Vec<ClassId> = anchors.iter().map(|&i| input.labels[i]).collect();
        let term = margin_loss(
            &feats.select(&anchors),
            &labels,
            &model.head,
            ctx.new_classes,
            cfg.margin,
        )?;
        Some(scatter(term, &anchors, n, dim, embed_len))
    } else {
        None
    };

    let contras = match bank {
        Some(bank) if cfg.alpha_contras != 0.0 => {
            let mut term = LossTerm::zeros(n * dim, embed_len);
            let mut updates = Vec::new();
            if !anchors.is_empty() {
                let labels: Vec<ClassId> = anchors.iter().map(|&i| input.labels[i]).collect();
                for mut u in bank.update(&feats.select(&anchors), &labels, Domain::Source)? {
                    u.members.iter_mut().for_each(|m| *m = anchors[*m]);
                    updates.push(u);
                }
            }
            let targets: Vec<usize> = (0..n).filter(|&i| i >= b || !input.replay[i]).collect();
            if !targets.is_empty() {
                let tf = feats.select(&targets);
                let (pseudo, _) = pseudo_labels_from(model, &tf)?;
                for mut u in bank.update(&tf, &pseudo, Domain::Target)? {
                    u.members.iter_mut().for_each(|m| *m = targets[*m]);
                    updates.push(u);
                }
            }
            let out = contrastive_loss(bank, ctx.old_classes, cfg.tau)?;
            term.value = out.value;
            out.backprop_into(&updates, &mut term.grad_feats, dim);
            Some(term)
        }
        _ => None,
    };

    let record = StepRecord {
        phase,
        epoch,
        step,
        cnce: cnce.value,
        dist: dist.as_ref().map(|t| t.value),
        margin: margin.as_ref().map(|t| t.value),
        contras: contras.as_ref().map(|t| t.value),
        total: 0.0,
    };
    let total = total_loss(
        &LossParts {
            cnce,
            dist,
            margin,
            contras,
        },
        cfg,
    )?;
    let record = StepRecord {
        total: total.value,
        ..record
    };
    if !total.value.is_finite()
        || total.grad_feats.iter().chain(&total.grad_embeddings).any(|v| !v.is_finite())
    {
        return Err(Error::Numeric(format!(
            "non-finite loss at phase {phase} epoch {epoch} step {step}: {record:?}"
        )));
    }

    let bg = model.backward(&pass, &total.grad_feats, None, true, false)?;
    let grads = ModelGrads {
        conv: bg.conv,
        gamma: bg.gamma,
        beta: bg.beta,
        embeddings: total.grad_embeddings,
    };
    if grads.values().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient at phase {phase} epoch {epoch} step {step}"
        )));
    }
    let o = &ctx.phase.optim;
    sgd.step(model, &grads, o.lr, o.momentum, o.weight_decay);
    model.apply_running_stats(&pass.observation);
    Ok(record)
}
