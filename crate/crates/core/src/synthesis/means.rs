use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{InitMode, SynthesisConfig};
use crate::archive::{Archive, DType, Tensor};
use crate::backbone::{ClassId, ImageBatch};
use crate::data::{Geometry, NormStats};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMean {
    pub image: Vec<f64>,
    pub count: usize,
}

/// Mean (normalized) training image of every class, recorded at the end of
/// the task that introduced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeanStore {
    pub geometry: Geometry,
    /// Normalization of the images the means were computed from; bounds the
    /// valid pixel range during synthesis.
    pub normalization: Option<NormStats>,
    pub means: BTreeMap<ClassId, ClassMean>,
}

#[derive(Serialize, Deserialize)]
struct StoreMeta {
    geometry: Geometry,
    normalization: Option<NormStats>,
    counts: BTreeMap<ClassId, usize>,
}

impl ClassMeanStore {
    pub fn new(geometry: Geometry, normalization: Option<NormStats>) -> Self {
        ClassMeanStore {
            geometry,
            normalization,
            means: BTreeMap::new(),
        }
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.means.keys().copied().collect()
    }

    pub fn get(&self, class: ClassId) -> Option<&ClassMean> {
        self.means.get(&class)
    }

    /// Pixelwise arithmetic mean of `images`, which must all belong to `class`.
    pub fn record_class_mean(&mut self, class: ClassId, images: &ImageBatch) -> Result<()> {
        let g = self.geometry;
        if (images.height, images.width, images.channels) != (g.height, g.width, g.channels) {
            return Err(Error::Shape("class images do not match the store geometry".into()));
        }
        let mut sum = vec![0.0; g.pixels()];
        for i in 0..images.batch {
            sum.iter_mut().zip(images.image(i)).for_each(|(s, v)| *s += v);
        }
        let n = images.batch as f64;
        sum.iter_mut().for_each(|s| *s /= n);
        if sum.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("class {class} mean is not finite")));
        }
        self.means.insert(
            class,
            ClassMean {
                image: sum,
                count: images.batch,
            },
        );
        Ok(())
    }

    /// Normalized values of raw pixels 0 and 1.
    pub fn pixel_range(&self) -> Option<(f64, f64)> {
        self.normalization.as_ref().map(NormStats::pixel_range)
    }

    /// Starting point for synthesis: one image per entry of `class_ids`.
    pub fn init_batch<R: Rng + ?Sized>(
        &self,
        class_ids: &[ClassId],
        cfg: &SynthesisConfig,
        rng: &mut R,
    ) -> Result<ImageBatch> {
        let g = self.geometry;
        let n = g.pixels();
        let mut data = Vec::with_capacity(class_ids.len() * n);
        match cfg.init_mode {
            InitMode::ClassMean => {
                let jitter = (cfg.init_jitter_sigma > 0.0)
                    .then(|| Normal::new(0.0, cfg.init_jitter_sigma).unwrap());
                for &c in class_ids {
                    let mean = self.get(c).ok_or(Error::MissingPrototype(c))?;
                    match &jitter {
                        Some(d) => data.extend(mean.image.iter().map(|v| v + d.sample(rng))),
                        None => data.extend_from_slice(&mean.image),
                    }
                }
            }
            InitMode::GaussianNoise => {
                data.extend((0..class_ids.len() * n).map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z
                }));
            }
        }
        ImageBatch::new(class_ids.len(), g.height, g.width, g.channels, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = StoreMeta {
            geometry: self.geometry,
            normalization: self.normalization.clone(),
            counts: self.means.iter().map(|(&k, m)| (k, m.count)).collect(),
        };
        let mut archive = Archive::new("class-means", DType::F64, serde_json::to_value(meta)?);
        let g = self.geometry;
        for (k, m) in &self.means {
            archive.push(Tensor::new(
                format!("mean.{k}"),
                vec![g.height, g.width, g.channels],
                m.image.clone(),
            ));
        }
        archive.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let archive = Archive::read(path)?;
        if archive.kind != "class-means" {
            return Err(Error::Format(format!(
                "expected a class-mean archive, found `{}`",
                archive.kind
            )));
        }
        let meta: StoreMeta = serde_json::from_value(archive.meta.clone())?;
        let mut means = BTreeMap::new();
        for (&k, &count) in &meta.counts {
            let t = archive.tensor(&format!("mean.{k}"))?;
            if t.data.len() != meta.geometry.pixels() {
                return Err(Error::Format(format!("mean.{k} has the wrong size")));
            }
            means.insert(
                k,
                ClassMean {
                    image: t.data.clone(),
                    count,
                },
            );
        }
        Ok(ClassMeanStore {
            geometry: meta.geometry,
            normalization: meta.normalization,
            means,
        })
    }
}
