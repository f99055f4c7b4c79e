//! Class-impression synthesis: optimize input pixels against a frozen model
//! so that it predicts the target class while the batch statistics at every
//! BN layer match the stored running estimates.

mod means;
mod regularizers;
mod run;
mod store;

pub use means::{ClassMean, ClassMeanStore};
pub use regularizers::{bn_reg, bn_reg_grad, l2_reg, l2_reg_grad, tv_l2_reg, tv_l2_reg_grad};
pub use run::{synthesize, BatchRecord, ClassImpressionSet, TraceRow};
pub use store::{load_impressions, save_impressions};

use serde::{Deserialize, Serialize};

use crate::backbone::{ClassId, ImageBatch, Mode, ModelState};
use crate::error::{Error, Result};
use crate::losses::cnce_loss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    ClassMean,
    GaussianNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub alpha_tv: f64,
    pub alpha_l2: f64,
    pub alpha_bn: f64,
    pub alpha_reg_total: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub init_mode: InitMode,
    pub init_jitter_sigma: f64,
    /// Clamp pixels to the normalized image of `[0, 1]` after every step.
    pub clamp_pixels: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            alpha_tv: 0.001,
            alpha_l2: 0.001,
            alpha_bn: 0.2,
            alpha_reg_total: 0.01,
            lr: 0.25,
            beta1: 0.9,
            beta2: 0.09,
            adam_eps: 1e-8,
            steps: 2000,
            batch_size: 40,
            init_mode: InitMode::ClassMean,
            init_jitter_sigma: 0.0,
            clamp_pixels: true,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                path: format!("{path}.{field}"),
                message: message.into(),
            })
        };
        for (field, v) in [
            ("alpha_tv", self.alpha_tv),
            ("alpha_l2", self.alpha_l2),
            ("alpha_bn", self.alpha_bn),
            ("alpha_reg_total", self.alpha_reg_total),
            ("init_jitter_sigma", self.init_jitter_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(field, "must be a finite non-negative number");
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", "must be positive");
        }
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(field, "must lie in [0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if self.steps == 0 {
            return bad("steps", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        Ok(())
    }
}

/// Unweighted objective parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SynthesisParts {
    pub ce: f64,
    pub tv: f64,
    pub l2: f64,
    pub bn: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisEval {
    pub total: f64,
    pub parts: SynthesisParts,
    /// Gradient of `total` w.r.t. the batch pixels.
    pub grad_input: Vec<f64>,
    /// Fraction of the batch the frozen model assigns to its target label.
    pub hit_rate: f64,
}

/// `CE(η·cos logits, y) + α_total·(α_tv·R_TV + α_ℓ2·R_ℓ2 + α_bn·R_BN)` with
/// the model in eval mode, and its input gradient.
pub fn synthesis_objective(
    frozen: &ModelState,
    batch: &ImageBatch,
    labels: &[ClassId],
    cfg: &SynthesisConfig,
) -> Result<SynthesisEval> {
    if labels.len() != batch.batch {
        return Err(Error::Shape("one label per synthesized image required".into()));
    }
    let pass = frozen.forward(batch, Mode::Eval)?;
    let ce = cnce_loss(&pass.features, labels, &frozen.head)?;

    let logits = frozen.head.logits(&pass.features, None)?;
    let k = frozen.head.num_classes();
    let targets = frozen.head.indices_of(labels)?;
    let hits = logits
        .chunks_exact(k)
        .zip(&targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count();

    let tv = tv_l2_reg(batch)?;
    let l2 = l2_reg(batch);
    let bn = bn_reg(&pass.observation, frozen)?;
    let gate = cfg.alpha_reg_total;
    let total =
        ce.value + gate * (cfg.alpha_tv * tv + cfg.alpha_l2 * l2 + cfg.alpha_bn * bn);

    let stat_grads = (gate * cfg.alpha_bn != 0.0)
        .then(|| bn_reg_grad(&pass.observation, frozen, gate * cfg.alpha_bn))
        .transpose()?;
    let mut grad_input = frozen
        .backward(&pass, &ce.grad_feats, stat_grads.as_deref(), false, true)?
        .input
        .expect("input gradient requested");
    if gate * cfg.alpha_tv != 0.0 {
        let g = tv_l2_reg_grad(batch)?;
        grad_input
            .iter_mut()
            .zip(g)
            .for_each(|(a, b)| *a += gate * cfg.alpha_tv * b);
    }
    if gate * cfg.alpha_l2 != 0.0 {
        grad_input
            .iter_mut()
            .zip(l2_reg_grad(batch))
            .for_each(|(a, b)| *a += gate * cfg.alpha_l2 * b);
    }
    Ok(SynthesisEval {
        total,
        parts: SynthesisParts { ce: ce.value, tv, l2, bn },
        grad_input,
        hit_rate: hits as f64 / batch.batch as f64,
    })
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::backbone::tests::tiny_arch;
    use crate::losses::testutil::check_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn trained_ish_model(seed: u64) -> ModelState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = ModelState::new(tiny_arch(), 4.0, &mut rng).unwrap();
        for bn in &mut m.bn {
            for c in 0..bn.gamma.len() {
                bn.gamma[c] = rng.random_range(0.5..1.5);
                bn.beta[c] = rng.random_range(-0.2..0.2);
                bn.running_mean[c] = rng.random_range(-0.3..0.3);
                bn.running_var[c] = rng.random_range(0.5..2.0);
            }
        }
        m.extend_classes(&[0, 1, 2], &mut rng).unwrap();
        m
    }

    fn random_batch(seed: u64, b: usize) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::new(b, 8, 8, 1, (0..b * 64).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn regularizers_off_leave_cross_entropy() {
        let m = trained_ish_model(1);
        let x = random_batch(2, 3);
        let labels = [0, 1, 2];
        let ce = synthesis_objective(
            &m,
            &x,
            &labels,
            &SynthesisConfig {
                alpha_tv: 0.0,
                alpha_l2: 0.0,
                alpha_bn: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ce.total, ce.parts.ce);
        let gated = synthesis_objective(
            &m,
            &x,
            &labels,
            &SynthesisConfig {
                alpha_reg_total: 0.0,
                alpha_tv: 3.0,
                alpha_bn: 7.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(gated.total, gated.parts.ce);
        assert_eq!(gated.grad_input, ce.grad_input);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = SynthesisConfig {
            alpha_tv: 0.3,
            alpha_l2: 0.05,
            alpha_bn: 0.7,
            alpha_reg_total: 1.0,
            ..Default::default()
        };
        for seed in 0..3 {
            let m = trained_ish_model(10 + seed);
            let x = random_batch(20 + seed, 2);
            let labels = [2, 0];
            let out = synthesis_objective(&m, &x, &labels, &cfg).unwrap();
            check_grad(
                &x.data,
                &out.grad_input,
                |d| {
                    let b = ImageBatch::new(2, 8, 8, 1, d.to_vec()).unwrap();
                    synthesis_objective(&m, &b, &labels, &cfg).unwrap().total
                },
                1e-5,
                1e-4,
            );
        }
    }

    #[test]
    fn unknown_label_is_rejected() {
        let m = trained_ish_model(3);
        let x = random_batch(4, 1);
        assert!(matches!(
            synthesis_objective(&m, &x, &[9], &SynthesisConfig::default()),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn config_validation_names_the_field() {
        let cfg = SynthesisConfig {
            beta2: 1.0,
            ..Default::default()
        };
        match cfg.validate("phase.2.synthesis") {
            Err(Error::Config { path, .. }) => assert_eq!(path, "phase.2.synthesis.beta2"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
