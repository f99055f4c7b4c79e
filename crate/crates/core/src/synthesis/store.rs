//! On-disk layout of a [`ClassImpressionSet`]:
//!
//! ```text
//! impressions.json            quota, config, per-batch records
//! traces/batch-NNN.csv        step,total,ce,tv,l2,bn
//! class-K/images.ctar         tensor archive, images of class K
//! class-K/manifest.json       class id, quota, config, trace files
//! class-K/previews/NNN.png    first few images, de-normalized
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BatchRecord, ClassImpressionSet, SynthesisConfig, TraceRow};
use crate::archive::{Archive, DType, Tensor};
use crate::backbone::{ClassId, ImageBatch};
use crate::data::NormStats;
use crate::error::{Error, Result};

const PREVIEWS_PER_CLASS: usize = 8;

#[derive(Serialize, Deserialize)]
struct BatchMeta {
    labels: Vec<ClassId>,
    lr: f64,
    retry_reason: Option<String>,
    final_hit_rate: f64,
    trace_csv: String,
}

#[derive(Serialize, Deserialize)]
struct SetMeta {
    quota_per_class: usize,
    config: SynthesisConfig,
    classes: Vec<ClassId>,
    batches: Vec<BatchMeta>,
}

#[derive(Serialize, Deserialize)]
struct ClassMeta {
    class_id: ClassId,
    quota: usize,
    config: SynthesisConfig,
    images: String,
    trace_csv: Vec<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_preview(path: &Path, img: &[f64], batch: &ImageBatch, norm: Option<&NormStats>) -> Result<()> {
    let c = batch.channels;
    let raw: Vec<u8> = img
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = match norm {
                Some(ns) => v * ns.std[i % c] + ns.mean[i % c],
                None => v,
            };
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    let (w, h) = (batch.width as u32, batch.height as u32);
    let res = match c {
        1 => image::GrayImage::from_raw(w, h, raw).map(|im| im.save(path)),
        3 => image::RgbImage::from_raw(w, h, raw).map(|im| im.save(path)),
        _ => return Ok(()),
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(Error::Format(format!("cannot write {}: {e}", path.display()))),
        None => Err(Error::Shape("preview buffer size mismatch".into())),
    }
}

pub fn save_impressions(
    set: &ClassImpressionSet,
    dir: impl AsRef<Path>,
    norm: Option<&NormStats>,
) -> Result<()> {
    let dir = dir.as_ref();
    let traces = dir.join("traces");
    fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;

    let mut batch_meta = Vec::new();
    let mut class_traces: BTreeMap<ClassId, Vec<String>> = BTreeMap::new();
    for (b, rec) in set.batches.iter().enumerate() {
        let rel = format!("traces/batch-{b:03}.csv");
        let path = dir.join(&rel);
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| Error::Format(format!("cannot write {}: {e}", path.display())))?;
        for row in &rec.trace {
            w.serialize(row)
                .map_err(|e| Error::Format(format!("cannot write trace: {e}")))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let mut seen: Vec<ClassId> = rec.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        for k in seen {
            class_traces.entry(k).or_default().push(format!("../{rel}"));
        }
        batch_meta.push(BatchMeta {
            labels: rec.labels.clone(),
            lr: rec.lr,
            retry_reason: rec.retry_reason.clone(),
            final_hit_rate: rec.final_hit_rate,
            trace_csv: rel,
        });
    }

    for (&k, batch) in &set.images {
        let cdir = dir.join(format!("class-{k}"));
        let previews = cdir.join("previews");
        fs::create_dir_all(&previews).map_err(|e| Error::io(&previews, e))?;
        let mut archive = Archive::new("impressions", DType::F64, serde_json::json!({ "class_id": k }));
        archive.push(Tensor::new(
            "images",
            vec![batch.batch, batch.height, batch.width, batch.channels],
            batch.data.clone(),
        ));
        archive.write(cdir.join("images.ctar"))?;
        for i in 0..batch.batch.min(PREVIEWS_PER_CLASS) {
            write_preview(&previews.join(format!("{i:03}.png")), batch.image(i), batch, norm)?;
        }
        write_json(
            &cdir.join("manifest.json"),
            &ClassMeta {
                class_id: k,
                quota: set.quota_per_class,
                config: set.config.clone(),
                images: "images.ctar".into(),
                trace_csv: class_traces.remove(&k).unwrap_or_default(),
            },
        )?;
    }
    write_json(
        &dir.join("impressions.json"),
        &SetMeta {
            quota_per_class: set.quota_per_class,
            config: set.config.clone(),
            classes: set.class_ids(),
            batches: batch_meta,
        },
    )
}

pub fn load_impressions(dir: impl AsRef<Path>) -> Result<ClassImpressionSet> {
    let dir = dir.as_ref();
    let meta_path = dir.join("impressions.json");
    if !meta_path.exists() {
        return Err(Error::Dependency {
            path: meta_path,
            reason: "no synthesized impressions found".into(),
        });
    }
    let meta: SetMeta = read_json(&meta_path)?;
    let mut images = BTreeMap::new();
    for &k in &meta.classes {
        let archive = Archive::read(dir.join(format!("class-{k}")).join("images.ctar"))?;
        let t = archive.tensor("images")?;
        let [b, h, w, c] = t.shape[..] else {
            return Err(Error::Format("impression tensor must be 4-dimensional".into()));
        };
        images.insert(k, ImageBatch::new(b, h, w, c, t.data.clone())?);
    }
    let mut batches = Vec::new();
    for bm in meta.batches {
        let path = dir.join(&bm.trace_csv);
        let mut r = csv::Reader::from_path(&path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        let trace: Vec<TraceRow> = r
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("malformed trace {}: {e}", path.display())))?;
        batches.push(BatchRecord {
            labels: bm.labels,
            lr: bm.lr,
            retry_reason: bm.retry_reason,
            trace,
            final_hit_rate: bm.final_hit_rate,
        });
    }
    Ok(ClassImpressionSet {
        quota_per_class: meta.quota_per_class,
        config: meta.config,
        images,
        batches,
    })
}
