use crate::backbone::{BnObservation, ImageBatch, ModelState, StatGrad};
use crate::error::{Error, Result};

fn check_tv_shape(batch: &ImageBatch) -> Result<()> {
    if batch.height < 2 || batch.width < 2 {
        return Err(Error::Shape("total variation needs H, W ≥ 2".into()));
    }
    Ok(())
}

/// Squared anisotropic total variation, averaged over the batch.
pub fn tv_l2_reg(batch: &ImageBatch) -> Result<f64> {
    check_tv_shape(batch)?;
    let (h, w, c) = (batch.height, batch.width, batch.channels);
    let mut sum = 0.0;
    for b in 0..batch.batch {
        let img = batch.image(b);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = img[(y * w + x) * c + ch];
                    if y + 1 < h {
                        sum += (img[((y + 1) * w + x) * c + ch] - v).powi(2);
                    }
                    if x + 1 < w {
                        sum += (img[(y * w + x + 1) * c + ch] - v).powi(2);
                    }
                }
            }
        }
    }
    Ok(sum / batch.batch as f64)
}

pub fn tv_l2_reg_grad(batch: &ImageBatch) -> Result<Vec<f64>> {
    check_tv_shape(batch)?;
    let (h, w, c) = (batch.height, batch.width, batch.channels);
    let scale = 2.0 / batch.batch as f64;
    let mut g = vec![0.0; batch.data.len()];
    for b in 0..batch.batch {
        let off = b * batch.image_len();
        let img = batch.image(b);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let i = (y * w + x) * c + ch;
                    for j in [
                        (y + 1 < h).then(|| ((y + 1) * w + x) * c + ch),
                        (x + 1 < w).then(|| (y * w + x + 1) * c + ch),
                    ]
                    .into_iter()
                    .flatten()
                    {
                        let d = scale * (img[j] - img[i]);
                        g[off + j] += d;
                        g[off + i] -= d;
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Batch mean of each image's squared ℓ2 norm.
pub fn l2_reg(batch: &ImageBatch) -> f64 {
    batch.data.iter().map(|v| v * v).sum::<f64>() / batch.batch as f64
}

pub fn l2_reg_grad(batch: &ImageBatch) -> Vec<f64> {
    let s = 2.0 / batch.batch as f64;
    batch.data.iter().map(|v| s * v).collect()
}

fn check_obs(obs: &BnObservation, model: &ModelState) -> Result<()> {
    let ok = obs.layers.len() == model.bn.len()
        && obs.layers.iter().zip(&model.bn).all(|(o, p)| {
            o.mean.len() == p.running_mean.len() && o.var.len() == p.running_var.len()
        });
    if ok {
        Ok(())
    } else {
        Err(Error::Shape("BN observation does not match the model's layers".into()))
    }
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `Σ_l ‖μ_l − running_mean_l‖₂ + ‖σ²_l − running_var_l‖₂` (norms not squared).
pub fn bn_reg(obs: &BnObservation, model: &ModelState) -> Result<f64> {
    check_obs(obs, model)?;
    Ok(obs
        .layers
        .iter()
        .zip(&model.bn)
        .map(|(o, p)| l2_dist(&o.mean, &p.running_mean) + l2_dist(&o.var, &p.running_var))
        .sum())
}

/// Gradient of `weight · bn_reg` w.r.t. each layer's batch statistics. A norm
/// that is exactly zero contributes the zero subgradient.
pub fn bn_reg_grad(obs: &BnObservation, model: &ModelState, weight: f64) -> Result<Vec<StatGrad>> {
    check_obs(obs, model)?;
    let unit = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let n = l2_dist(a, b);
        if n == 0.0 {
            vec![0.0; a.len()]
        } else {
            a.iter().zip(b).map(|(x, y)| weight * (x - y) / n).collect()
        }
    };
    Ok(obs
        .layers
        .iter()
        .zip(&model.bn)
        .map(|(o, p)| StatGrad {
            dmean: unit(&o.mean, &p.running_mean),
            dvar: unit(&o.var, &p.running_var),
        })
        .collect())
}
