use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::backbone::ClassId;
use crate::error::{Error, Result};

/// How classes are dealt into tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub initial_classes: usize,
    pub increment: usize,
    pub tasks: usize,
    /// Explicit class order; takes precedence over `shuffle_seed`.
    pub order: Option<Vec<ClassId>>,
    /// Shuffle class ids before dealing them out. Ascending order when absent.
    pub shuffle_seed: Option<u64>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            initial_classes: 2,
            increment: 1,
            tasks: 4,
            order: None,
            shuffle_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    /// 1-based.
    pub phase: usize,
    pub new_class_ids: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub tasks: Vec<Task>,
}

impl TaskSchedule {
    /// Classes introduced in tasks `1..=phase`.
    pub fn seen_through(&self, phase: usize) -> Vec<ClassId> {
        self.tasks
            .iter()
            .take(phase)
            .flat_map(|t| t.new_class_ids.iter().copied())
            .collect()
    }

    pub fn all_classes(&self) -> Vec<ClassId> {
        self.seen_through(self.tasks.len())
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .tasks
            .first()
            .ok_or_else(|| Error::Dataset("schedule has no tasks".into()))?;
        if first.new_class_ids.len() < 2 {
            return Err(Error::Dataset(
                "the first task needs at least two classes".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if t.phase != i + 1 {
                return Err(Error::Dataset(format!("task {i} has phase {}", t.phase)));
            }
            if t.new_class_ids.is_empty() {
                return Err(Error::Dataset(format!("task {} adds no classes", t.phase)));
            }
            for &c in &t.new_class_ids {
                if !seen.insert(c) {
                    return Err(Error::Dataset(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn build_schedule(manifest: &DatasetManifest, spec: &ScheduleSpec) -> Result<TaskSchedule> {
    let available: Vec<ClassId> = manifest.class_histogram().into_keys().collect();
    if spec.tasks == 0 || spec.initial_classes < 2 || (spec.tasks > 1 && spec.increment == 0) {
        return Err(Error::Dataset(
            "schedule needs ≥1 task, ≥2 initial classes and a positive increment".into(),
        ));
    }
    let needed = spec.initial_classes + spec.increment * (spec.tasks - 1);
    let order = match (&spec.order, spec.shuffle_seed) {
        (Some(order), _) => {
            if let Some(c) = order.iter().find(|c| !available.contains(c)) {
                return Err(Error::Dataset(format!("class {c} is not in the dataset")));
            }
            order.clone()
        }
        (None, Some(seed)) => {
            let mut v = available.clone();
            v.shuffle(&mut crate::rng::stream(seed, "class-order"));
            v
        }
        (None, None) => available.clone(),
    };
    if order.len() < needed {
        return Err(Error::Dataset(format!(
            "schedule needs {needed} classes, only {} available",
            order.len()
        )));
    }
    let mut tasks = vec![Task {
        phase: 1,
        new_class_ids: order[..spec.initial_classes].to_vec(),
    }];
    for t in 1..spec.tasks {
        let start = spec.initial_classes + (t - 1) * spec.increment;
        tasks.push(Task {
            phase: t + 1,
            new_class_ids: order[start..start + spec.increment].to_vec(),
        });
    }
    let schedule = TaskSchedule { tasks };
    schedule.validate()?;
    Ok(schedule)
}
