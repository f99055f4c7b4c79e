//! The TOML experiment file: dataset, split, schedule, architecture, a
//! hyper-parameter profile with optional overrides, strategy and seeds.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ArchDescriptor;
use crate::data::{
    build_schedule, load_manifest, make_desk_dataset, Dataset, DeskSpec, ScheduleSpec, SplitSpec,
    TaskSchedule,
};
use crate::engine::{
    Ablations, DistillOn, EngineConfig, ExperimentData, OptimConfig, PhaseConfig, Profile,
    ReplayRule, Strategy, TargetDomain,
};
use crate::error::{Error, Result};
use crate::losses::{DistillMode, TrainLossConfig};
use crate::synthesis::{InitMode, SynthesisConfig};

/// Either a CSV manifest on disk or the built-in desk renderer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    /// Relative paths resolve against the configuration file's directory.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub desk: Option<DeskSpec>,
    /// Seed of the desk renderer.
    #[serde(default)]
    pub seed: u64,
}

macro_rules! overrides {
    ($(#[$m:meta])* $name:ident for $target:ty { $($field:ident: $ty:ty),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $name {
            $(pub $field: Option<$ty>,)*
        }

        impl $name {
            pub fn apply(&self, target: &mut $target) {
                $(if let Some(v) = &self.$field {
                    target.$field = v.clone();
                })*
            }
        }
    };
}

overrides! {
    /// Replaces fields of every phase that synthesizes.
    SynthesisOverrides for SynthesisConfig {
        alpha_tv: f64,
        alpha_l2: f64,
        alpha_bn: f64,
        alpha_reg_total: f64,
        lr: f64,
        beta1: f64,
        beta2: f64,
        adam_eps: f64,
        steps: usize,
        batch_size: usize,
        init_mode: InitMode,
        init_jitter_sigma: f64,
        clamp_pixels: bool,
    }
}

overrides! {
    /// Replaces loss fields of every phase after the first.
    TrainOverrides for TrainLossConfig {
        margin: f64,
        tau: f64,
        alpha_dist: f64,
        alpha_margin: f64,
        alpha_contras: f64,
        distill: DistillMode,
        centroid_momentum: f64,
    }
}

overrides! {
    /// Replaces optimizer fields of every phase.
    OptimOverrides for OptimConfig {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        epochs: usize,
        batch_size: usize,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Overrides {
    pub synthesis: SynthesisOverrides,
    pub train: TrainOverrides,
    pub optim: OptimOverrides,
    /// Replay rule of every phase after the first.
    pub replay: Option<ReplayRule>,
}

fn default_profile() -> Profile {
    Profile::PaperSuppT2
}

fn default_strategy() -> Strategy {
    Strategy::Full
}

fn default_eta() -> f64 {
    10.0
}

fn default_head_init_scale() -> f64 {
    1.0
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub arch: ArchDescriptor,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_head_init_scale")]
    pub head_init_scale: f64,
    #[serde(default = "default_profile")]
    pub profile: Profile,
    #[serde(default)]
    pub overrides: Overrides,
    /// Complete per-phase settings; when present the profile and overrides
    /// are not used.
    #[serde(default)]
    pub phases: Option<Vec<PhaseConfig>>,
    /// One or more strategies run side by side.
    #[serde(default = "default_strategies", deserialize_with = "one_or_many")]
    pub strategy: Vec<Strategy>,
    #[serde(default)]
    pub ablations: Ablations,
    #[serde(default)]
    pub target_domain: TargetDomain,
    #[serde(default)]
    pub distill_on: DistillOn,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_strategies() -> Vec<Strategy> {
    vec![default_strategy()]
}

fn one_or_many<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<Strategy>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(Strategy),
        Many(Vec<Strategy>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::parse("").expect("empty configuration is valid")
    }
}

impl ExperimentConfig {
    /// Parses TOML text; errors carry the dotted path of the offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            path: "top level".into(),
            message: e.message().to_string(),
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { "top level".into() } else { path },
                message: e.inner().message().to_string(),
            }
        })
    }

    /// Reads and validates a configuration file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(m) = &mut cfg.dataset.manifest {
            if m.is_relative() {
                *m = path.parent().unwrap_or(Path::new(".")).join(&*m);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| {
            Err(Error::Config {
                path: path.into(),
                message: message.into(),
            })
        };
        if self.dataset.manifest.is_some() && self.dataset.desk.is_some() {
            return bad("dataset", "give either manifest or desk, not both");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        if self.strategy.is_empty() {
            return bad("strategy", "at least one strategy is required");
        }
        if let Some(p) = &self.phases {
            if p.len() < self.schedule.tasks {
                return bad("phases", "one entry per task is required");
            }
        }
        for s in &self.strategy {
            self.engine_config(*s)?.validate()?;
        }
        Ok(())
    }

    /// Per-phase settings after applying the profile and overrides.
    pub fn resolved_phases(&self) -> Vec<PhaseConfig> {
        if let Some(p) = &self.phases {
            return p.clone();
        }
        let mut phases = self.profile.phases(self.schedule.tasks);
        for (i, p) in phases.iter_mut().enumerate() {
            self.overrides.optim.apply(&mut p.optim);
            if let Some(s) = &mut p.synthesis {
                self.overrides.synthesis.apply(s);
            }
            if i > 0 {
                self.overrides.train.apply(&mut p.train);
                if let Some(r) = self.overrides.replay {
                    p.replay = r;
                }
            }
        }
        phases
    }

    pub fn engine_config(&self, strategy: Strategy) -> Result<EngineConfig> {
        let cfg = EngineConfig {
            arch: self.arch.clone(),
            eta: self.eta,
            head_init_scale: self.head_init_scale,
            phases: self.resolved_phases(),
            strategy,
            ablations: self.ablations,
            target_domain: self.target_domain,
            distill_on: self.distill_on,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The raw dataset named by the configuration.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.dataset.manifest {
            Some(m) => load_manifest(m),
            None => make_desk_dataset(&self.dataset.desk.clone().unwrap_or_default(), self.dataset.seed),
        }
    }

    /// Dataset, split and schedule, ready for the engine.
    pub fn experiment_data(&self) -> Result<(ExperimentData, TaskSchedule)> {
        let data = ExperimentData::prepare(self.dataset()?, &self.split)?;
        let schedule = build_schedule(&data.dataset.manifest, &self.schedule)?;
        Ok((data, schedule))
    }
}
