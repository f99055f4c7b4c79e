//! Dataset manifests: a CSV of `(sample_id, path, class_id, group_id)` rows
//! backed either by image files (PNG/PGM) or by rows of a tensor archive
//! (`path` of the form `archive.ctar#row`).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::{Archive, DType, Tensor};
use crate::backbone::{ClassId, ImageBatch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    pub path: String,
    pub class_id: ClassId,
    pub group_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Geometry {
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Normalized value range of raw pixels in `[0, 1]`, widest over channels.
    pub fn pixel_range(&self) -> (f64, f64) {
        let lo = self
            .mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| -m / s)
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| (1.0 - m) / s)
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    pub geometry: Geometry,
    /// Fitted on the training split; `None` until [`Dataset::fit_normalization`].
    pub normalization: Option<NormStats>,
}

impl DatasetManifest {
    pub fn class_histogram(&self) -> BTreeMap<ClassId, usize> {
        let mut h = BTreeMap::new();
        for r in &self.rows {
            *h.entry(r.class_id).or_insert(0) += 1;
        }
        h
    }

    pub fn num_classes(&self) -> usize {
        self.class_histogram().len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.rows {
            if !ids.insert(r.sample_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate sample_id `{}`", r.sample_id)));
            }
            if r.group_id.is_empty() {
                return Err(Error::Dataset(format!(
                    "sample `{}` has no group_id",
                    r.sample_id
                )));
            }
        }
        let classes: Vec<ClassId> = self.class_histogram().into_keys().collect();
        if classes.iter().enumerate().any(|(i, &c)| c as usize != i) {
            return Err(Error::Dataset(format!(
                "class ids must be contiguous from 0, found {classes:?}"
            )));
        }
        Ok(())
    }
}

/// A manifest together with its pixels, stored as raw `[0, 1]` values.
/// Normalization is applied when batches are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pixels: Vec<f64>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, pixels: Vec<f64>) -> Result<Self> {
        manifest.validate()?;
        if pixels.len() != manifest.rows.len() * manifest.geometry.pixels() {
            return Err(Error::Dataset("pixel buffer does not match manifest".into()));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset("non-finite pixel values".into()));
        }
        Ok(Dataset { manifest, pixels })
    }

    pub fn len(&self) -> usize {
        self.manifest.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.rows.is_empty()
    }

    pub fn geometry(&self) -> Geometry {
        self.manifest.geometry
    }

    pub fn label(&self, i: usize) -> ClassId {
        self.manifest.rows[i].class_id
    }

    pub fn raw_image(&self, i: usize) -> &[f64] {
        let n = self.geometry().pixels();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Two-pass per-channel mean and (population) standard deviation over
    /// the given rows; stored in the manifest.
    pub fn fit_normalization(&mut self, indices: &[usize]) -> Result<NormStats> {
        if indices.is_empty() {
            return Err(Error::Dataset("cannot fit normalization on an empty split".into()));
        }
        let c = self.geometry().channels;
        let mut mean = vec![0.0; c];
        let mut count = 0usize;
        for &i in indices {
            for px in self.raw_image(i).chunks_exact(c) {
                mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
            }
            count += self.geometry().height * self.geometry().width;
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; c];
        for &i in indices {
            for px in self.raw_image(i).chunks_exact(c) {
                for ch in 0..c {
                    let d = px[ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count as f64).sqrt().max(1e-6))
            .collect();
        let stats = NormStats { mean, std };
        self.manifest.normalization = Some(stats.clone());
        Ok(stats)
    }

    /// Images at `indices`, normalized when statistics have been fitted.
    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let g = self.geometry();
        let mut data = Vec::with_capacity(indices.len() * g.pixels());
        for &i in indices {
            let img = self.raw_image(i);
            match &self.manifest.normalization {
                Some(ns) => data.extend(
                    img.iter()
                        .enumerate()
                        .map(|(j, v)| (v - ns.mean[j % g.channels]) / ns.std[j % g.channels]),
                ),
                None => data.extend_from_slice(img),
            }
        }
        ImageBatch::new(indices.len(), g.height, g.width, g.channels, data)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<ClassId> {
        indices.iter().map(|&i| self.label(i)).collect()
    }

    pub fn indices_of_class(&self, class: ClassId, within: &[usize]) -> Vec<usize> {
        within
            .iter()
            .copied()
            .filter(|&i| self.label(i) == class)
            .collect()
    }

    /// Hash of the manifest rows and pixel values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut archive = self.to_archive();
        archive.meta["rows"] = serde_json::to_value(&self.manifest.rows)?;
        Ok(crate::archive::sha256_hex(&archive.to_bytes()?))
    }

    fn to_archive(&self) -> Archive {
        let g = self.geometry();
        let mut archive = Archive::new(
            "dataset",
            DType::F32,
            serde_json::json!({ "geometry": g }),
        );
        archive.push(Tensor::new(
            "images",
            vec![self.len(), g.height, g.width, g.channels],
            self.pixels.clone(),
        ));
        archive
    }

    /// Writes `images.ctar` plus `manifest.csv` (rows reference the archive).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.to_archive().write(dir.join("images.ctar"))?;
        let path = dir.join("manifest.csv");
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| Error::Dataset(format!("cannot write manifest: {e}")))?;
        for (i, r) in self.manifest.rows.iter().enumerate() {
            let row = ManifestRow {
                path: format!("images.ctar#{i}"),
                ..r.clone()
            };
            w.serialize(row)
                .map_err(|e| Error::Dataset(format!("cannot write manifest: {e}")))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn load_image_file(path: &Path) -> Result<(Geometry, Vec<f64>)> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("cannot read image {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    if color.has_color() {
        let rgb = img.to_rgb32f();
        Ok((
            Geometry {
                height: h,
                width: w,
                channels: 3,
            },
            rgb.into_raw().into_iter().map(f64::from).collect(),
        ))
    } else {
        let luma = img.to_luma32f();
        Ok((
            Geometry {
                height: h,
                width: w,
                channels: 1,
            },
            luma.into_raw().into_iter().map(f64::from).collect(),
        ))
    }
}

/// Reads and validates a manifest CSV and the pixels it references.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Dataset(format!("cannot open manifest {}: {e}", path.display())))?;
    let rows: Vec<ManifestRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Dataset(format!("malformed manifest row: {e}")))?;
    if rows.is_empty() {
        return Err(Error::Dataset("manifest has no rows".into()));
    }

    let mut archives: HashMap<PathBuf, (Geometry, Archive)> = HashMap::new();
    let mut geometry: Option<Geometry> = None;
    let mut pixels = Vec::new();
    for row in &rows {
        let (g, img) = match row.path.split_once('#') {
            Some((file, idx)) => {
                let file = base.join(file);
                if !archives.contains_key(&file) {
                    let a = Archive::read(&file)?;
                    let g: Geometry = serde_json::from_value(a.meta["geometry"].clone())
                        .map_err(|e| Error::Dataset(format!("archive geometry: {e}")))?;
                    archives.insert(file.clone(), (g, a));
                }
                let (g, a) = &archives[&file];
                let idx: usize = idx
                    .parse()
                    .map_err(|_| Error::Dataset(format!("bad archive row in `{}`", row.path)))?;
                let images = a.tensor("images")?;
                let n = g.pixels();
                if (idx + 1) * n > images.data.len() {
                    return Err(Error::Dataset(format!("row {idx} outside archive")));
                }
                (*g, images.data[idx * n..(idx + 1) * n].to_vec())
            }
            None => {
                let file = base.join(&row.path);
                if !file.exists() {
                    return Err(Error::Dataset(format!("missing file {}", file.display())));
                }
                load_image_file(&file)?
            }
        };
        match geometry {
            None => geometry = Some(g),
            Some(prev) if prev != g => {
                return Err(Error::Dataset(format!(
                    "inconsistent geometry: `{}` is {}×{}×{}, expected {}×{}×{}",
                    row.sample_id, g.height, g.width, g.channels, prev.height, prev.width,
                    prev.channels
                )))
            }
            Some(_) => {}
        }
        pixels.extend(img);
    }
    Dataset::new(
        DatasetManifest {
            rows,
            geometry: geometry.unwrap(),
            normalization: None,
        },
        pixels,
    )
}
