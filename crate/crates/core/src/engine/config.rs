use serde::{Deserialize, Serialize};

use crate::backbone::ArchDescriptor;
use crate::error::{Error, Result};
use crate::losses::TrainLossConfig;
use crate::synthesis::{InitMode, SynthesisConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Synthesized replay with the full training objective.
    Full,
    /// New-class data and cross-entropy only.
    Finetune,
    /// New-class data with cross-entropy and feature distillation.
    DistillOnly,
    /// Joint training on the real data of every seen class.
    Oracle,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Finetune => "finetune",
            Strategy::DistillOnly => "distill-only",
            Strategy::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Strategy::Full,
            Strategy::Finetune,
            Strategy::DistillOnly,
            Strategy::Oracle,
        ]
        .into_iter()
        .find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub no_contrastive: bool,
    pub no_margin: bool,
    pub noise_init: bool,
}

impl Ablations {
    pub fn parse_list(list: &str) -> Option<Self> {
        let mut a = Ablations::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "no-contrastive" => a.no_contrastive = true,
                "no-margin" => a.no_margin = true,
                "noise-init" => a.noise_init = true,
                _ => return None,
            }
        }
        Some(a)
    }

    pub fn label(&self) -> String {
        let mut v = Vec::new();
        if self.no_contrastive {
            v.push("no-contrastive");
        }
        if self.no_margin {
            v.push("no-margin");
        }
        if self.noise_init {
            v.push("noise-init");
        }
        v.join(",")
    }
}

/// Where the unlabeled target-domain features of the contrastive term come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetDomain {
    /// The new task's training images, labels withheld.
    #[default]
    NewTrain,
    /// Additionally the evaluation images of the seen classes. Leaks test
    /// data into training.
    Transductive,
}

/// Which samples the distillation term is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillOn {
    #[default]
    All,
    New,
    Replay,
}

/// How many images to synthesize per old class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReplayRule {
    /// As many as the mean per-class count of the new classes (rounded up).
    #[default]
    MatchNew,
    Fixed { per_class: usize },
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    /// Absent for the first phase.
    #[serde(default)]
    pub synthesis: Option<SynthesisConfig>,
    pub train: TrainLossConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub replay: ReplayRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// The original per-phase table, verbatim.
    PaperSuppT2,
    /// Same, with Adam β₂ = 0.999 and a shared synthesis rate of 0.01.
    Sane,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "paper-supp-t2" => Some(Profile::PaperSuppT2),
            "sane" => Some(Profile::Sane),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::PaperSuppT2 => "paper-supp-t2",
            Profile::Sane => "sane",
        }
    }

    /// Per-phase configuration for a schedule of `tasks` tasks. Phases past
    /// the fourth reuse the fourth column.
    pub fn phases(self, tasks: usize) -> Vec<PhaseConfig> {
        // columns for phases 2, 3, 4
        const BN: [f64; 3] = [0.2, 1.0, 5.0];
        const TV: [f64; 3] = [0.001, 0.01, 0.01];
        const TOTAL: [f64; 3] = [0.01, 0.1, 0.001];
        const LR: [f64; 3] = [0.25, 0.05, 0.005];
        const BETA2: [f64; 3] = [0.09, 0.9, 0.009];
        const MARGIN: [f64; 3] = [0.7, 0.3, 0.3];
        (1..=tasks)
            .map(|phase| {
                if phase == 1 {
                    return PhaseConfig {
                        synthesis: None,
                        train: TrainLossConfig {
                            alpha_dist: 0.0,
                            alpha_margin: 0.0,
                            alpha_contras: 0.0,
                            ..TrainLossConfig::default()
                        },
                        optim: OptimConfig::default(),
                        replay: ReplayRule::Disabled,
                    };
                }
                let c = (phase - 2).min(2);
                let (lr, beta2) = match self {
                    Profile::PaperSuppT2 => (LR[c], BETA2[c]),
                    Profile::Sane => (0.01, 0.999),
                };
                PhaseConfig {
                    synthesis: Some(SynthesisConfig {
                        alpha_tv: TV[c],
                        alpha_l2: TV[c],
                        alpha_bn: BN[c],
                        alpha_reg_total: TOTAL[c],
                        lr,
                        beta2,
                        ..SynthesisConfig::default()
                    }),
                    train: TrainLossConfig {
                        margin: MARGIN[c],
                        ..TrainLossConfig::default()
                    },
                    optim: OptimConfig::default(),
                    replay: ReplayRule::MatchNew,
                }
            })
            .collect()
    }
}

/// Everything the engine needs besides data and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub arch: ArchDescriptor,
    pub eta: f64,
    /// Length of class-embedding rows created in an empty head.
    pub head_init_scale: f64,
    pub phases: Vec<PhaseConfig>,
    pub strategy: Strategy,
    #[serde(default)]
    pub ablations: Ablations,
    #[serde(default)]
    pub target_domain: TargetDomain,
    #[serde(default)]
    pub distill_on: DistillOn,
}

impl EngineConfig {
    pub fn new(arch: ArchDescriptor, profile: Profile, tasks: usize, strategy: Strategy) -> Self {
        EngineConfig {
            arch,
            eta: 10.0,
            head_init_scale: 1.0,
            phases: profile.phases(tasks),
            strategy,
            ablations: Ablations::default(),
            target_domain: TargetDomain::default(),
            distill_on: DistillOn::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |path: String, message: &str| {
            Err(Error::Config {
                path,
                message: message.into(),
            })
        };
        if !(self.eta > 0.0) {
            return bad("eta".into(), "must be positive");
        }
        if !(self.head_init_scale > 0.0) {
            return bad("head_init_scale".into(), "must be positive");
        }
        if self.phases.is_empty() {
            return bad("phases".into(), "at least one phase is required");
        }
        for (i, p) in self.phases.iter().enumerate() {
            let at = |field: &str| format!("phases[{i}].{field}");
            p.train.validate().map_err(|e| match e {
                Error::Config { path, message } => Error::Config {
                    path: at(&format!("train.{path}")),
                    message,
                },
                other => other,
            })?;
            if let Some(s) = &p.synthesis {
                s.validate(&at("synthesis"))?;
            }
            let o = &p.optim;
            if !(o.lr > 0.0) {
                return bad(at("optim.lr"), "must be positive");
            }
            if !(0.0..1.0).contains(&o.momentum) {
                return bad(at("optim.momentum"), "must lie in [0, 1)");
            }
            if !(o.weight_decay >= 0.0) {
                return bad(at("optim.weight_decay"), "must be non-negative");
            }
            if o.batch_size == 0 {
                return bad(at("optim.batch_size"), "must be at least 1");
            }
            if let ReplayRule::Fixed { per_class: 0 } = p.replay {
                return bad(at("replay.per_class"), "must be at least 1");
            }
            if i > 0
                && p.synthesis.is_none()
                && p.replay != ReplayRule::Disabled
                && self.strategy == Strategy::Full
            {
                return bad(at("synthesis"), "replay needs a synthesis configuration");
            }
        }
        Ok(())
    }

    /// The phase configuration for 1-based `phase`.
    pub fn phase(&self, phase: usize) -> Result<&PhaseConfig> {
        self.phases.get(phase - 1).ok_or_else(|| Error::Config {
            path: "phases".into(),
            message: format!("no configuration for phase {phase}"),
        })
    }
}

/// What actually runs in one incremental phase once strategy and ablations
/// are applied.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EffectivePhase {
    pub train: TrainLossConfig,
    pub optim: OptimConfig,
    pub synthesis: Option<SynthesisConfig>,
    pub replay: ReplayRule,
    pub real_old_data: bool,
}

impl EngineConfig {
    pub(crate) fn effective(&self, phase: usize) -> Result<EffectivePhase> {
        let p = self.phase(phase)?;
        let mut e = EffectivePhase {
            train: p.train.clone(),
            optim: p.optim.clone(),
            synthesis: p.synthesis.clone(),
            replay: p.replay,
            real_old_data: false,
        };
        let zero_aux = |t: &mut TrainLossConfig| {
            t.alpha_dist = 0.0;
            t.alpha_margin = 0.0;
            t.alpha_contras = 0.0;
        };
        match self.strategy {
            Strategy::Full => {
                if self.ablations.no_contrastive {
                    e.train.alpha_contras = 0.0;
                }
                if self.ablations.no_margin {
                    e.train.alpha_margin = 0.0;
                }
                if self.ablations.noise_init {
                    if let Some(s) = &mut e.synthesis {
                        s.init_mode = InitMode::GaussianNoise;
                    }
                }
            }
            Strategy::Finetune => {
                zero_aux(&mut e.train);
                e.replay = ReplayRule::Disabled;
            }
            Strategy::DistillOnly => {
                e.train.alpha_margin = 0.0;
                e.train.alpha_contras = 0.0;
                e.replay = ReplayRule::Disabled;
            }
            Strategy::Oracle => {
                zero_aux(&mut e.train);
                e.replay = ReplayRule::Disabled;
                e.real_old_data = true;
            }
        }
        if e.replay == ReplayRule::Disabled {
            e.synthesis = None;
        }
        Ok(e)
    }
}
