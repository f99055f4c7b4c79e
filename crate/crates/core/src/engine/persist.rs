//! Saving and restoring an [`ExperimentState`] between CLI invocations.
//!
//! ```text
//! state.json               progress, evaluations, hashes, seed ledger, steps
//! metrics.jsonl            mean loss parts of every epoch
//! checkpoints/task-N.ckpt  model after task N
//! class_means.ctar         class-mean images
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EngineConfig, Evaluation, ExperimentState, FrozenCheck, StepRecord};
use crate::backbone::{load_checkpoint, save_checkpoint};
use crate::data::TaskSchedule;
use crate::error::{Error, Result};
use crate::synthesis::ClassMeanStore;

#[derive(Serialize, Deserialize)]
struct StateFile {
    seed: u64,
    completed: usize,
    evaluations: Vec<Evaluation>,
    checkpoints: Vec<String>,
    frozen_checks: Vec<FrozenCheck>,
    seed_ledger: BTreeMap<String, String>,
    steps: Vec<StepRecord>,
}

/// Loss parts of one epoch, averaged over its optimizer steps. A part is
/// `None` when no step of the epoch computed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    pub epoch: usize,
    pub steps: usize,
    pub cnce: f64,
    pub dist: Option<f64>,
    pub margin: Option<f64>,
    pub contras: Option<f64>,
    pub total: f64,
}

pub fn epoch_records(steps: &[StepRecord]) -> Vec<EpochRecord> {
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    steps
        .chunk_by(|a, b| (a.phase, a.epoch) == (b.phase, b.epoch))
        .map(|c| EpochRecord {
            phase: c[0].phase,
            epoch: c[0].epoch,
            steps: c.len(),
            cnce: mean(c.iter().map(|s| s.cnce).collect()).unwrap(),
            dist: mean(c.iter().filter_map(|s| s.dist).collect()),
            margin: mean(c.iter().filter_map(|s| s.margin).collect()),
            contras: mean(c.iter().filter_map(|s| s.contras).collect()),
            total: mean(c.iter().map(|s| s.total).collect()).unwrap(),
        })
        .collect()
}

pub fn checkpoint_path(dir: &Path, task: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("task-{task}.ckpt"))
}

impl ExperimentState {
    /// Writes the state after its latest completed task.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let ckpt = dir.join("checkpoints");
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        save_checkpoint(&self.model, checkpoint_path(dir, self.completed))?;
        self.means.save(dir.join("class_means.ctar"))?;

        let metrics = dir.join("metrics.jsonl");
        let mut lines = Vec::new();
        for e in epoch_records(&self.steps) {
            serde_json::to_writer(&mut lines, &e)?;
            lines.push(b'\n');
        }
        fs::File::create(&metrics)
            .and_then(|mut f| f.write_all(&lines))
            .map_err(|e| Error::io(&metrics, e))?;

        let state = StateFile {
            seed: self.seed,
            completed: self.completed,
            evaluations: self.evaluations.clone(),
            checkpoints: self.checkpoints.clone(),
            frozen_checks: self.frozen_checks.clone(),
            seed_ledger: self.seed_ledger.clone(),
            steps: self.steps.clone(),
        };
        let path = dir.join("state.json");
        fs::write(&path, serde_json::to_string_pretty(&state)? + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Restores a state written by [`ExperimentState::save`].
    pub fn load(dir: impl AsRef<Path>, config: EngineConfig, schedule: TaskSchedule) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("state.json");
        if !path.exists() {
            return Err(Error::Dependency {
                path,
                reason: "no experiment state; run train-initial first".into(),
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let s: StateFile = serde_json::from_str(&text)?;
        let ckpt = checkpoint_path(dir, s.completed);
        if !ckpt.exists() {
            return Err(Error::Dependency {
                path: ckpt,
                reason: "checkpoint of the latest task is missing".into(),
            });
        }
        let model = load_checkpoint(&ckpt)?;
        if s.checkpoints.last() != Some(&model.fingerprint()?) {
            return Err(Error::Incompatible(format!(
                "{} does not match the recorded state",
                ckpt.display()
            )));
        }
        if model.arch != config.arch {
            return Err(Error::Incompatible(
                "checkpoint architecture differs from the configuration".into(),
            ));
        }
        let means_path = dir.join("class_means.ctar");
        if !means_path.exists() {
            return Err(Error::Dependency {
                path: means_path,
                reason: "class-mean store is missing".into(),
            });
        }
        Ok(ExperimentState {
            seed: s.seed,
            config,
            schedule,
            model,
            frozen: None,
            means: ClassMeanStore::load(&means_path)?,
            bank: None,
            impressions: None,
            completed: s.completed,
            evaluations: s.evaluations,
            checkpoints: s.checkpoints,
            frozen_checks: s.frozen_checks,
            steps: s.steps,
            seed_ledger: s.seed_ledger,
        })
    }
}
