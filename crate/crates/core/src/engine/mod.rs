//! The incremental protocol: train the first task from scratch, then for
//! every later task freeze the model, synthesize replay for the old classes,
//! and train on new data plus replay.

mod config;
mod metrics;
mod persist;
mod stream;
mod train;

pub use config::{
    Ablations, DistillOn, EngineConfig, OptimConfig, PhaseConfig, Profile, ReplayRule, Strategy,
    TargetDomain,
};
pub(crate) use config::EffectivePhase;
pub use metrics::{evaluate, predict, ClassCount, Evaluation, MetricsReport};
pub use stream::{assemble_training_stream, replay_quota, Sample, TrainingStream};
pub use persist::{checkpoint_path, epoch_records, EpochRecord};
pub use train::StepRecord;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::backbone::{ClassId, ImageBatch, ModelState};
use crate::data::{group_split, Dataset, Split, SplitSpec, TaskSchedule};
use crate::error::{Error, Result};
use crate::losses::CentroidBank;
use crate::rng::{stream_seed, Rng};
use crate::synthesis::{synthesize, ClassImpressionSet, ClassMeanStore};
use train::{pseudo_labels_from, train_step, Sgd, StepContext, StepInput};

/// A dataset normalized with its training-split statistics, plus the split.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub dataset: Dataset,
    pub split: Split,
}

impl ExperimentData {
    pub fn prepare(mut dataset: Dataset, spec: &SplitSpec) -> Result<Self> {
        let split = group_split(&dataset.manifest, spec)?;
        dataset.fit_normalization(&split.train)?;
        Ok(ExperimentData { dataset, split })
    }

    pub fn train_of(&self, classes: &[ClassId]) -> Vec<usize> {
        self.of(&self.split.train, classes)
    }

    pub fn test_of(&self, classes: &[ClassId]) -> Vec<usize> {
        self.of(&self.split.test, classes)
    }

    fn of(&self, within: &[usize], classes: &[ClassId]) -> Vec<usize> {
        within
            .iter()
            .copied()
            .filter(|&i| classes.contains(&self.dataset.label(i)))
            .collect()
    }
}

/// Hashes of the frozen model at the start and end of one task.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FrozenCheck {
    pub phase: usize,
    pub before: String,
    pub after: String,
}

/// Everything carried from one task to the next.
#[derive(Debug, Clone)]
pub struct ExperimentState {
    pub seed: u64,
    pub config: EngineConfig,
    pub schedule: TaskSchedule,
    pub model: ModelState,
    /// The previous task's final model while a task is being trained.
    pub frozen: Option<ModelState>,
    pub means: ClassMeanStore,
    pub bank: Option<CentroidBank>,
    pub impressions: Option<ClassImpressionSet>,
    pub completed: usize,
    pub evaluations: Vec<Evaluation>,
    /// Fingerprint of the model after each completed task.
    pub checkpoints: Vec<String>,
    pub frozen_checks: Vec<FrozenCheck>,
    pub steps: Vec<StepRecord>,
    /// Every random stream drawn, by label, with the first bytes of its seed.
    pub seed_ledger: BTreeMap<String, String>,
}

impl ExperimentState {
    fn rng(&mut self, label: &str) -> Rng {
        self.note_seed(label);
        crate::rng::stream(self.seed, label)
    }

    fn derived_seed(&mut self, label: &str) -> u64 {
        self.note_seed(label);
        u64::from_le_bytes(stream_seed(self.seed, label)[..8].try_into().unwrap())
    }

    fn note_seed(&mut self, label: &str) {
        let bytes = stream_seed(self.seed, label);
        self.seed_ledger
            .insert(label.to_string(), hex::encode(&bytes[..8]));
    }

    /// A copy of a state that has finished only the first task, continuing
    /// under `config`. The first phase must be configured identically.
    pub fn fork(&self, config: EngineConfig) -> Result<ExperimentState> {
        if self.completed != 1 {
            return Err(Error::Contract("only a state after the first task can be forked".into()));
        }
        config.validate()?;
        if config.phases.first() != self.config.phases.first()
            || config.arch != self.config.arch
            || config.eta != self.config.eta
            || config.head_init_scale != self.config.head_init_scale
        {
            return Err(Error::Contract(
                "forked configuration must share the first phase and the architecture".into(),
            ));
        }
        Ok(ExperimentState {
            config,
            ..self.clone()
        })
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport::from_evaluations(
            self.config.strategy.name().to_string(),
            self.config.ablations.label(),
            self.seed,
            self.schedule
                .tasks
                .iter()
                .map(|t| t.new_class_ids.clone())
                .collect(),
            &self.evaluations,
            self.checkpoints.clone(),
            self.seed_ledger.clone(),
        )
    }
}

/// Label and confidence (largest softmax probability) for every image.
pub fn pseudo_label(model: &ModelState, unlabeled: &ImageBatch) -> Result<(Vec<ClassId>, Vec<f64>)> {
    pseudo_labels_from(model, &model.features(unlabeled)?)
}

fn record_means(state: &mut ExperimentState, data: &ExperimentData, classes: &[ClassId]) -> Result<()> {
    for &k in classes {
        let idx = data.train_of(&[k]);
        if idx.is_empty() {
            return Err(Error::Dataset(format!("class {k} has no training samples")));
        }
        state.means.record_class_mean(k, &data.dataset.batch(&idx)?)?;
    }
    Ok(())
}

fn finish_task(state: &mut ExperimentState, data: &ExperimentData, new: &[ClassId]) -> Result<()> {
    record_means(state, data, new)?;
    let seen = state.model.seen_classes().to_vec();
    state
        .evaluations
        .push(evaluate(&state.model, &data.dataset, &data.test_of(&seen))?);
    state.checkpoints.push(state.model.fingerprint()?);
    state.completed += 1;
    Ok(())
}

fn run_epochs(
    state: &mut ExperimentState,
    data: &ExperimentData,
    phase: usize,
    eff: &EffectivePhase,
    stream: &TrainingStream,
    old: &[ClassId],
    new: &[ClassId],
) -> Result<()> {
    let mut sgd = Sgd::new(&state.model);
    let mut transductive: Vec<usize> = Vec::new();
    if state.config.target_domain == TargetDomain::Transductive && state.bank.is_some() {
        let seen = state.model.seen_classes().to_vec();
        transductive = data.test_of(&seen);
        transductive.shuffle(&mut state.rng(&format!("phase-{phase}/transductive")));
    }
    let mut cursor = 0;
    let mut step = 0;
    for epoch in 0..eff.optim.epochs {
        let label = format!("phase-{phase}/epoch-{epoch}");
        state.note_seed(&label);
        for batch in stream.epoch(state.seed, &label) {
            let (images, labels, replay) =
                stream::materialize(&batch, &data.dataset, state.impressions.as_ref())?;
            let extra = if transductive.is_empty() {
                None
            } else {
                let want = replay.iter().filter(|r| !**r).count().max(1);
                let idx: Vec<usize> = (0..want)
                    .map(|j| transductive[(cursor + j) % transductive.len()])
                    .collect();
                cursor = (cursor + want) % transductive.len();
                Some(data.dataset.batch(&idx)?)
            };
            let ctx = StepContext {
                frozen: state.frozen.as_ref(),
                old_classes: old,
                new_classes: new,
                phase: eff,
                distill_on: state.config.distill_on,
            };
            let input = StepInput {
                images: &images,
                labels: &labels,
                replay: &replay,
                target_extra: extra.as_ref(),
            };
            let record = train_step(
                &mut state.model,
                &mut sgd,
                state.bank.as_mut(),
                &input,
                &ctx,
                (phase, epoch, step),
            )?;
            state.steps.push(record);
            step += 1;
        }
    }
    Ok(())
}

/// Trains the first task's classes from scratch with cross-entropy only and
/// records their mean images.
pub fn run_initial_task(
    data: &ExperimentData,
    schedule: &TaskSchedule,
    config: &EngineConfig,
    seed: u64,
) -> Result<ExperimentState> {
    config.validate()?;
    schedule.validate()?;
    if config.phases.len() < schedule.tasks.len() {
        return Err(Error::Config {
            path: "phases".into(),
            message: format!(
                "{} phases configured for {} tasks",
                config.phases.len(),
                schedule.tasks.len()
            ),
        });
    }
    let g = data.dataset.geometry();
    let a = &config.arch;
    if (g.height, g.width, g.channels) != (a.height, a.width, a.channels) {
        return Err(Error::Config {
            path: "arch".into(),
            message: format!(
                "architecture expects {}×{}×{} images, dataset has {}×{}×{}",
                a.height, a.width, a.channels, g.height, g.width, g.channels
            ),
        });
    }
    let classes = schedule.tasks[0].new_class_ids.clone();
    for &k in &classes {
        if data.train_of(&[k]).is_empty() {
            return Err(Error::Dataset(format!("class {k} has no training samples")));
        }
    }
    let mut state = ExperimentState {
        seed,
        config: config.clone(),
        schedule: schedule.clone(),
        model: ModelState::new(a.clone(), config.eta, &mut crate::rng::stream(seed, "init/weights"))?,
        frozen: None,
        means: ClassMeanStore::new(g, data.dataset.manifest.normalization.clone()),
        bank: None,
        impressions: None,
        completed: 0,
        evaluations: Vec::new(),
        checkpoints: Vec::new(),
        frozen_checks: Vec::new(),
        steps: Vec::new(),
        seed_ledger: BTreeMap::new(),
    };
    state.note_seed("init/weights");
    state.model.head.init_scale = config.head_init_scale;
    let mut rng = state.rng("phase-1/head");
    state.model.extend_classes(&classes, &mut rng)?;

    let mut eff = EffectivePhase {
        train: config.phases[0].train.clone(),
        optim: config.phases[0].optim.clone(),
        synthesis: None,
        replay: ReplayRule::Disabled,
        real_old_data: false,
    };
    eff.train.alpha_dist = 0.0;
    eff.train.alpha_margin = 0.0;
    eff.train.alpha_contras = 0.0;
    let stream = assemble_training_stream(&data.train_of(&classes), &[], None, eff.optim.batch_size)?;
    run_epochs(&mut state, data, 1, &eff, &stream, &[], &classes)?;
    finish_task(&mut state, data, &classes)?;
    Ok(state)
}

/// The task that runs next, with its effective configuration.
fn next_task(state: &ExperimentState) -> Result<(usize, Vec<ClassId>, EffectivePhase)> {
    let phase = state.completed + 1;
    let task = state
        .schedule
        .tasks
        .get(phase - 1)
        .ok_or_else(|| Error::Contract("every task of the schedule is complete".into()))?;
    if phase == 1 {
        return Err(Error::Contract("the first task has no replay".into()));
    }
    Ok((phase, task.new_class_ids.clone(), state.config.effective(phase)?))
}

fn new_class_counts(data: &ExperimentData, new: &[ClassId]) -> Result<Vec<usize>> {
    let counts: Vec<usize> = new.iter().map(|&k| data.train_of(&[k]).len()).collect();
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Dataset(format!("class {} has no training samples", new[i])));
    }
    Ok(counts)
}

/// Synthesizes the replay the next task needs from the current model, or
/// `None` when the strategy uses no replay.
pub fn prepare_impressions(
    state: &mut ExperimentState,
    data: &ExperimentData,
) -> Result<Option<ClassImpressionSet>> {
    let (phase, new, eff) = next_task(state)?;
    let counts = new_class_counts(data, &new)?;
    let (Some(syn), Some(quota)) = (&eff.synthesis, replay_quota(eff.replay, &counts)) else {
        return Ok(None);
    };
    let seed = state.derived_seed(&format!("phase-{phase}/synthesis"));
    let old = state.model.seen_classes().to_vec();
    synthesize(&state.model, &state.means, &old, quota, syn, seed).map(Some)
}

/// Freeze, synthesize, extend, train and evaluate for the next task.
pub fn run_incremental_task(state: &mut ExperimentState, data: &ExperimentData) -> Result<()> {
    let impressions = prepare_impressions(state, data)?;
    run_incremental_task_with(state, data, impressions)
}

/// As [`run_incremental_task`], with replay synthesized beforehand from the
/// same model (for instance loaded from disk).
pub fn run_incremental_task_with(
    state: &mut ExperimentState,
    data: &ExperimentData,
    impressions: Option<ClassImpressionSet>,
) -> Result<()> {
    let (phase, new, eff) = next_task(state)?;
    let old = state.model.seen_classes().to_vec();
    if let Some(k) = new.iter().find(|k| old.contains(k)) {
        return Err(Error::Conflict(format!("class {k} was already learned")));
    }
    let counts = new_class_counts(data, &new)?;
    let expected = eff
        .synthesis
        .as_ref()
        .and_then(|_| replay_quota(eff.replay, &counts));
    match (&impressions, expected) {
        (None, None) => {}
        (Some(set), Some(q)) if set.quota_per_class == q && set.class_ids() == old => {}
        (Some(_), Some(q)) => {
            return Err(Error::ReplayCoverage(format!(
                "replay must hold {q} images for each of {old:?}"
            )))
        }
        (None, Some(_)) => {
            return Err(Error::ReplayCoverage("this phase needs synthesized replay".into()))
        }
        (Some(_), None) => {
            return Err(Error::ReplayCoverage("this phase does not use replay".into()))
        }
    }

    if expected.is_some() {
        state.note_seed(&format!("phase-{phase}/synthesis"));
    }
    let frozen = state.model.clone();
    let before = frozen.fingerprint()?;
    if state.checkpoints.last() != Some(&before) {
        return Err(Error::Contract("model changed after its checkpoint".into()));
    }
    state.frozen = Some(frozen);
    state.impressions = impressions;

    let mut rng = state.rng(&format!("phase-{phase}/head"));
    state.model.extend_classes(&new, &mut rng)?;
    state.bank = (eff.train.alpha_contras != 0.0 && state.impressions.is_some())
        .then(|| CentroidBank::new(state.model.feature_dim(), eff.train.centroid_momentum))
        .transpose()?;

    let real_classes: Vec<ClassId> = if eff.real_old_data {
        state.model.seen_classes().to_vec()
    } else {
        new.clone()
    };
    let stream = assemble_training_stream(
        &data.train_of(&real_classes),
        &old,
        state.impressions.as_ref(),
        eff.optim.batch_size,
    )?;
    run_epochs(state, data, phase, &eff, &stream, &old, &new)?;

    let after = state.frozen.as_ref().unwrap().fingerprint()?;
    state.frozen_checks.push(FrozenCheck {
        phase,
        before,
        after,
    });
    state.frozen = None;
    state.bank = None;
    finish_task(state, data, &new)
}

/// Every remaining task of `state`'s schedule.
pub fn continue_schedule(state: &mut ExperimentState, data: &ExperimentData) -> Result<MetricsReport> {
    while state.completed < state.schedule.tasks.len() {
        run_incremental_task(state, data)?;
    }
    Ok(state.report())
}

pub fn run_schedule(
    data: &ExperimentData,
    schedule: &TaskSchedule,
    config: &EngineConfig,
    seed: u64,
) -> Result<(ExperimentState, MetricsReport)> {
    let mut state = run_initial_task(data, schedule, config, seed)?;
    let report = continue_schedule(&mut state, data)?;
    Ok((state, report))
}
