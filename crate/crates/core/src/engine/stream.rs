use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::ReplayRule;
use crate::backbone::{ClassId, ImageBatch};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::synthesis::ClassImpressionSet;

/// One training example: a dataset row or a synthesized image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Sample {
    Real(usize),
    Replay { class: ClassId, index: usize },
}

/// The examples of one epoch; every epoch visits each exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingStream {
    pub samples: Vec<Sample>,
    pub batch_size: usize,
}

impl TrainingStream {
    /// Shuffled batches for one epoch.
    pub fn epoch(&self, seed: u64, label: &str) -> Vec<Vec<Sample>> {
        let mut order = self.samples.clone();
        order.shuffle(&mut crate::rng::stream(seed, label));
        order.chunks(self.batch_size).map(<[Sample]>::to_vec).collect()
    }

    pub fn composition(&self, data: &Dataset) -> BTreeMap<(bool, ClassId), usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            let key = match *s {
                Sample::Real(i) => (false, data.label(i)),
                Sample::Replay { class, .. } => (true, class),
            };
            *h.entry(key).or_insert(0) += 1;
        }
        h
    }
}

/// Images per old class under `rule`, given the new classes' sample counts.
pub fn replay_quota(rule: ReplayRule, new_class_counts: &[usize]) -> Option<usize> {
    match rule {
        ReplayRule::Disabled => None,
        ReplayRule::Fixed { per_class } => Some(per_class),
        ReplayRule::MatchNew => {
            let total: usize = new_class_counts.iter().sum();
            let k = new_class_counts.len().max(1);
            Some(total.div_ceil(k).max(1))
        }
    }
}

/// Real examples plus every synthesized image of every old class. Replay,
/// when present, must cover each old class with the same number of images.
pub fn assemble_training_stream(
    real: &[usize],
    old_classes: &[ClassId],
    impressions: Option<&ClassImpressionSet>,
    batch_size: usize,
) -> Result<TrainingStream> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut samples: Vec<Sample> = real.iter().map(|&i| Sample::Real(i)).collect();
    if let Some(set) = impressions {
        let mut count = None;
        for &k in old_classes {
            let imgs = set.images.get(&k).ok_or_else(|| {
                Error::ReplayCoverage(format!("no synthesized images for old class {k}"))
            })?;
            if *count.get_or_insert(imgs.batch) != imgs.batch {
                return Err(Error::ReplayCoverage(
                    "old classes have unequal replay counts".into(),
                ));
            }
            samples.extend((0..imgs.batch).map(|index| Sample::Replay { class: k, index }));
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset("training stream is empty".into()));
    }
    Ok(TrainingStream {
        samples,
        batch_size,
    })
}

/// Pixels, labels and replay flags of one batch.
pub(crate) fn materialize(
    batch: &[Sample],
    data: &Dataset,
    impressions: Option<&ClassImpressionSet>,
) -> Result<(ImageBatch, Vec<ClassId>, Vec<bool>)> {
    let g = data.geometry();
    let mut pixels = Vec::with_capacity(batch.len() * g.pixels());
    let mut labels = Vec::with_capacity(batch.len());
    let mut replay = Vec::with_capacity(batch.len());
    for s in batch {
        match *s {
            Sample::Real(i) => {
                pixels.extend(data.batch(&[i])?.data);
                labels.push(data.label(i));
                replay.push(false);
            }
            Sample::Replay { class, index } => {
                let set = impressions
                    .ok_or_else(|| Error::ReplayCoverage("replay sample without impressions".into()))?;
                let img = set
                    .images
                    .get(&class)
                    .filter(|b| index < b.batch)
                    .ok_or_else(|| Error::ReplayCoverage(format!("no replay image {class}/{index}")))?;
                pixels.extend_from_slice(img.image(index));
                labels.push(class);
                replay.push(true);
            }
        }
    }
    Ok((
        ImageBatch::new(batch.len(), g.height, g.width, g.channels, pixels)?,
        labels,
        replay,
    ))
}
