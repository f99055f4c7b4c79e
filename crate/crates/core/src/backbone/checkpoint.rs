//! Checkpoint persistence on top of the tensor archive container.
//!
//! Tensors are stored as little-endian `f64` so that a save/load roundtrip
//! reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchDescriptor, BatchNormParams, ClassId, CosineHead, ModelState};
use crate::archive::{Archive, DType, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const KIND: &str = "checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    arch: ArchDescriptor,
    class_ids: Vec<ClassId>,
    eta: f64,
    head_init_scale: f64,
}

pub(super) fn to_archive(model: &ModelState) -> Archive {
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        arch: model.arch.clone(),
        class_ids: model.head.class_ids.clone(),
        eta: model.head.eta,
        head_init_scale: model.head.init_scale,
    };
    let mut archive = Archive::new(
        KIND,
        DType::F64,
        serde_json::to_value(meta).expect("checkpoint metadata serializes"),
    );
    for (i, (g, w)) in model.arch.convs().iter().zip(&model.conv_weights).enumerate() {
        archive.push(Tensor::new(
            format!("conv.{i}.weight"),
            vec![g.kernel, g.kernel, g.cin, g.cout],
            w.clone(),
        ));
    }
    for (i, bn) in model.bn.iter().enumerate() {
        let c = bn.gamma.len();
        archive.push(Tensor::new(format!("bn.{i}.gamma"), vec![c], bn.gamma.clone()));
        archive.push(Tensor::new(format!("bn.{i}.beta"), vec![c], bn.beta.clone()));
        archive.push(Tensor::new(
            format!("bn.{i}.running_mean"),
            vec![c],
            bn.running_mean.clone(),
        ));
        archive.push(Tensor::new(
            format!("bn.{i}.running_var"),
            vec![c],
            bn.running_var.clone(),
        ));
    }
    archive.push(Tensor::new(
        "head.embeddings",
        vec![model.head.num_classes(), model.head.dim],
        model.head.embeddings.clone(),
    ));
    archive
}

fn from_archive(archive: &Archive) -> Result<ModelState> {
    if archive.kind != KIND {
        return Err(Error::Incompatible(format!(
            "expected a checkpoint archive, found `{}`",
            archive.kind
        )));
    }
    let version = archive
        .meta
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("checkpoint header lacks format_version".into()))?;
    if version != CHECKPOINT_FORMAT_VERSION as u64 {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone())
        .map_err(|e| Error::Incompatible(format!("architecture descriptor: {e}")))?;
    meta.arch.validate()?;

    let expect = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let t = archive.tensor(name)?;
        if t.shape != shape {
            return Err(Error::Incompatible(format!(
                "tensor `{name}` has shape {:?}, architecture requires {:?}",
                t.shape, shape
            )));
        }
        Ok(t.data.clone())
    };

    let convs = meta.arch.convs();
    let mut conv_weights = Vec::with_capacity(convs.len());
    let mut bn = Vec::with_capacity(convs.len());
    for (i, g) in convs.iter().enumerate() {
        conv_weights.push(expect(
            &format!("conv.{i}.weight"),
            &[g.kernel, g.kernel, g.cin, g.cout],
        )?);
        bn.push(BatchNormParams {
            gamma: expect(&format!("bn.{i}.gamma"), &[g.cout])?,
            beta: expect(&format!("bn.{i}.beta"), &[g.cout])?,
            running_mean: expect(&format!("bn.{i}.running_mean"), &[g.cout])?,
            running_var: expect(&format!("bn.{i}.running_var"), &[g.cout])?,
        });
    }
    let dim = meta.arch.feature_dim();
    let embeddings = expect("head.embeddings", &[meta.class_ids.len(), dim])?;
    if archive.tensors.len() != 4 * convs.len() + convs.len() + 1 {
        return Err(Error::Incompatible("unexpected extra tensors in checkpoint".into()));
    }
    Ok(ModelState {
        arch: meta.arch,
        conv_weights,
        bn,
        head: CosineHead {
            dim,
            eta: meta.eta,
            class_ids: meta.class_ids,
            embeddings,
            init_scale: meta.head_init_scale,
        },
    })
}

pub fn save_checkpoint(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    to_archive(model).write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    from_archive(&Archive::read(path)?)
}
