//! Residual convolutional feature extractor with batch normalization and a
//! cosine classifier head.
//!
//! Layout: a stem convolution followed by three residual blocks of two 3×3
//! convolutions each, then global average pooling. Blocks two and three
//! downsample by a stride of two and carry a 1×1 projection shortcut. Every
//! convolution is followed by batch normalization; the last block's output is
//! not passed through a ReLU so features may take either sign.

mod checkpoint;
mod head;
pub mod ops;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use head::{dot, unit_rows, CosineHead, UnitRows};
use ops::{BnCache, ConvGeometry};

use crate::error::{Error, Result};

pub type ClassId = u32;

/// A dense `B × H × W × C` image batch (channels innermost).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBatch {
    pub fn new(
        batch: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Shape("image batch must hold at least one image".into()));
        }
        if data.len() != batch * height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {batch}×{height}×{width}×{channels} batch",
                data.len()
            )));
        }
        Ok(ImageBatch {
            batch,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Copies the selected images into a new batch.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        ImageBatch::new(indices.len(), self.height, self.width, self.channels, data)
    }

    pub fn concat(&self, other: &ImageBatch) -> Result<Self> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels)
        {
            return Err(Error::Shape("cannot concatenate batches of different geometry".into()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        ImageBatch::new(
            self.batch + other.batch,
            self.height,
            self.width,
            self.channels,
            data,
        )
    }
}

/// `B × D` feature matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureBatch {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Shape(format!(
                "{} values for a {rows}×{dim} feature batch",
                data.len()
            )));
        }
        Ok(FeatureBatch { rows, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, indices: &[usize]) -> FeatureBatch {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureBatch {
            rows: indices.len(),
            dim: self.dim,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Fixed architecture descriptor; embedded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchDescriptor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Channel width of the stem/first block, second block and third block.
    pub widths: [usize; 3],
    pub kernel: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            height: 32,
            width: 32,
            channels: 1,
            widths: [16, 32, 64],
            kernel: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockPlan {
    conv_a: usize,
    conv_b: usize,
    shortcut: Option<usize>,
    last: bool,
}

impl ArchDescriptor {
    pub fn feature_dim(&self) -> usize {
        self.widths[2]
    }

    /// Convolution geometries in parameter order: stem, then per block
    /// `a`, `b` and (when present) the projection shortcut.
    pub fn convs(&self) -> Vec<ConvGeometry> {
        let mut out = vec![ConvGeometry {
            cin: self.channels,
            cout: self.widths[0],
            kernel: self.kernel,
            stride: 1,
        }];
        let mut cin = self.widths[0];
        for (b, &cout) in self.widths.iter().enumerate() {
            let stride = if b == 0 { 1 } else { 2 };
            out.push(ConvGeometry {
                cin,
                cout,
                kernel: self.kernel,
                stride,
            });
            out.push(ConvGeometry {
                cin: cout,
                cout,
                kernel: self.kernel,
                stride: 1,
            });
            if stride != 1 || cin != cout {
                out.push(ConvGeometry {
                    cin,
                    cout,
                    kernel: 1,
                    stride,
                });
            }
            cin = cout;
        }
        out
    }

    fn blocks(&self) -> Vec<BlockPlan> {
        let mut plans = Vec::new();
        let mut next = 1;
        let mut cin = self.widths[0];
        for (b, &cout) in self.widths.iter().enumerate() {
            let stride = if b == 0 { 1 } else { 2 };
            let shortcut = (stride != 1 || cin != cout).then_some(next + 2);
            plans.push(BlockPlan {
                conv_a: next,
                conv_b: next + 1,
                shortcut,
                last: b == self.widths.len() - 1,
            });
            next += if shortcut.is_some() { 3 } else { 2 };
            cin = cout;
        }
        plans
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 || self.channels == 0 {
            return Err(Error::Shape("input geometry must be at least 2×2×1".into()));
        }
        if self.widths.iter().any(|&w| w == 0) || self.kernel % 2 == 0 {
            return Err(Error::Shape("widths must be positive and the kernel odd".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::Shape("bn momentum must lie in [0,1] and eps be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Per-channel batch statistics of one BN layer's input.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch statistics of every BN layer's input, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct BnObservation {
    pub layers: Vec<BnLayerStats>,
}

/// Gradient of a scalar w.r.t. the batch mean and variance of one BN input.
#[derive(Debug, Clone, PartialEq)]
pub struct StatGrad {
    pub dmean: Vec<f64>,
    pub dvar: Vec<f64>,
}

/// The learnable model carried across tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch: ArchDescriptor,
    pub conv_weights: Vec<Vec<f64>>,
    pub bn: Vec<BatchNormParams>,
    pub head: CosineHead,
}

/// Gradients for every learnable tensor of a [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub conv: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub embeddings: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros_like(model: &ModelState) -> Self {
        ModelGrads {
            conv: model.conv_weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            gamma: model.bn.iter().map(|b| vec![0.0; b.gamma.len()]).collect(),
            beta: model.bn.iter().map(|b| vec![0.0; b.beta.len()]).collect(),
            embeddings: vec![0.0; model.head.embeddings.len()],
        }
    }

    /// Flat iterator over every gradient value, in a fixed order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.conv
            .iter()
            .flatten()
            .chain(self.gamma.iter().flatten())
            .chain(self.beta.iter().flatten())
            .chain(self.embeddings.iter())
    }
}

struct LayerRecord {
    input: usize,
    in_h: usize,
    in_w: usize,
    z: Vec<f64>,
    batch_mean: Vec<f64>,
    cache: BnCache,
}

struct Tape {
    batch: usize,
    acts: Vec<Vec<f64>>,
    /// Spatial size of each activation in `acts`.
    act_hw: Vec<(usize, usize)>,
    layers: Vec<Option<LayerRecord>>,
    /// Activation ids of (block input, post-relu of conv a, block output).
    block_acts: Vec<(usize, usize, usize)>,
    stem_out: usize,
}

/// Result of a forward pass; holds what the backward pass needs.
pub struct ForwardPass {
    pub features: FeatureBatch,
    pub observation: BnObservation,
    mode: Mode,
    tape: Option<Tape>,
}

impl ForwardPass {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Gradients produced by [`ModelState::backward`].
pub struct BackboneGrads {
    pub conv: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub input: Option<Vec<f64>>,
}

impl ModelState {
    /// Kaiming-normal convolutions, identity batch norms, empty head.
    pub fn new<R: Rng + ?Sized>(arch: ArchDescriptor, eta: f64, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if !(eta > 0.0) {
            return Err(Error::Contract("eta must be positive".into()));
        }
        let convs = arch.convs();
        let conv_weights = convs
            .iter()
            .map(|g| {
                let fan_in = (g.kernel * g.kernel * g.cin) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
                (0..g.weight_len()).map(|_| normal.sample(rng)).collect()
            })
            .collect();
        let bn = convs
            .iter()
            .map(|g| BatchNormParams::identity(g.cout))
            .collect();
        let head = CosineHead::new(arch.feature_dim(), eta);
        Ok(ModelState {
            arch,
            conv_weights,
            bn,
            head,
        })
    }

    pub fn seen_classes(&self) -> &[ClassId] {
        &self.head.class_ids
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn extend_classes<R: Rng + ?Sized>(
        &mut self,
        new_class_ids: &[ClassId],
        rng: &mut R,
    ) -> Result<()> {
        self.head.extend(new_class_ids, rng)
    }

    fn check_input(&self, batch: &ImageBatch) -> Result<()> {
        let a = &self.arch;
        if (batch.height, batch.width, batch.channels) != (a.height, a.width, a.channels) {
            return Err(Error::Shape(format!(
                "model expects {}×{}×{} images, got {}×{}×{}",
                a.height, a.width, a.channels, batch.height, batch.width, batch.channels
            )));
        }
        if batch.data.len() != batch.batch * batch.image_len() {
            return Err(Error::Shape("image batch data length is inconsistent".into()));
        }
        Ok(())
    }

    /// Pure forward pass. In train mode batch norm normalizes with the batch
    /// statistics; running statistics are left untouched (see
    /// [`ModelState::apply_running_stats`]).
    pub fn forward(&self, batch: &ImageBatch, mode: Mode) -> Result<ForwardPass> {
        self.run(batch, mode, true)
    }

    fn run(&self, batch: &ImageBatch, mode: Mode, record: bool) -> Result<ForwardPass> {
        self.check_input(batch)?;
        let convs = self.arch.convs();
        let n = batch.batch;
        let mut tape = Tape {
            batch: n,
            acts: vec![batch.data.clone()],
            act_hw: vec![(batch.height, batch.width)],
            layers: (0..convs.len()).map(|_| None).collect(),
            block_acts: Vec::new(),
            stem_out: 0,
        };
        let mut stats: Vec<Option<BnLayerStats>> = vec![None; convs.len()];

        let mut conv_bn = |tape: &mut Tape, layer: usize, input: usize| -> (Vec<f64>, usize, usize) {
            let g = &convs[layer];
            let (h, w) = tape.act_hw[input];
            let (z, ho, wo) =
                ops::conv_forward(&tape.acts[input], n, h, w, g, &self.conv_weights[layer]);
            let (mean, var) = ops::channel_stats(&z, g.cout);
            let bn = &self.bn[layer];
            let (y, cache) = match mode {
                Mode::Train => ops::bn_forward(
                    &z, g.cout, &mean, &var, &bn.gamma, &bn.beta, self.arch.bn_eps, true,
                ),
                Mode::Eval => ops::bn_forward(
                    &z,
                    g.cout,
                    &bn.running_mean,
                    &bn.running_var,
                    &bn.gamma,
                    &bn.beta,
                    self.arch.bn_eps,
                    false,
                ),
            };
            if record {
                tape.layers[layer] = Some(LayerRecord {
                    input,
                    in_h: h,
                    in_w: w,
                    z,
                    batch_mean: mean.clone(),
                    cache,
                });
            }
            stats[layer] = Some(BnLayerStats { mean, var });
            (y, ho, wo)
        };

        let (mut y, h, w) = conv_bn(&mut tape, 0, 0);
        ops::relu_inplace(&mut y);
        tape.acts.push(y);
        tape.act_hw.push((h, w));
        tape.stem_out = 1;
        let mut current = 1;

        for plan in self.arch.blocks() {
            let (mut ra, h, w) = conv_bn(&mut tape, plan.conv_a, current);
            ops::relu_inplace(&mut ra);
            tape.acts.push(ra);
            tape.act_hw.push((h, w));
            let ra_id = tape.acts.len() - 1;
            let (mut out, h, w) = conv_bn(&mut tape, plan.conv_b, ra_id);
            match plan.shortcut {
                Some(s) => {
                    let (sc, _, _) = conv_bn(&mut tape, s, current);
                    out.iter_mut().zip(&sc).for_each(|(o, v)| *o += v);
                }
                None => out
                    .iter_mut()
                    .zip(&tape.acts[current])
                    .for_each(|(o, v)| *o += v),
            }
            if !plan.last {
                ops::relu_inplace(&mut out);
            }
            tape.acts.push(out);
            tape.act_hw.push((h, w));
            let out_id = tape.acts.len() - 1;
            tape.block_acts.push((current, ra_id, out_id));
            if !record {
                // Only the current activation is needed going forward.
                for id in 0..out_id {
                    tape.acts[id] = Vec::new();
                }
            }
            current = out_id;
        }

        let (h, w) = tape.act_hw[current];
        let dim = self.feature_dim();
        let spatial = (h * w) as f64;
        let mut feats = vec![0.0; n * dim];
        for (i, img) in tape.acts[current].chunks_exact(h * w * dim).enumerate() {
            let row = &mut feats[i * dim..(i + 1) * dim];
            for px in img.chunks_exact(dim) {
                row.iter_mut().zip(px).for_each(|(r, v)| *r += v);
            }
            row.iter_mut().for_each(|r| *r /= spatial);
        }
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite features in forward pass".into()));
        }
        Ok(ForwardPass {
            features: FeatureBatch {
                rows: n,
                dim,
                data: feats,
            },
            observation: BnObservation {
                layers: stats.into_iter().map(|s| s.unwrap()).collect(),
            },
            mode,
            tape: record.then_some(tape),
        })
    }

    /// Backpropagates `dfeatures` (and optional gradients w.r.t. every BN
    /// layer's batch statistics) through the recorded pass.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        dfeatures: &[f64],
        stat_grads: Option<&[StatGrad]>,
        want_params: bool,
        want_input: bool,
    ) -> Result<BackboneGrads> {
        let tape = pass
            .tape
            .as_ref()
            .ok_or_else(|| Error::Contract("forward pass was not recorded".into()))?;
        let n = tape.batch;
        let dim = self.feature_dim();
        if dfeatures.len() != n * dim {
            return Err(Error::Shape("feature gradient has the wrong length".into()));
        }
        if let Some(sg) = stat_grads {
            if sg.len() != self.bn.len() {
                return Err(Error::Shape("one statistic gradient per BN layer required".into()));
            }
        }
        let convs = self.arch.convs();
        let mut conv_g: Vec<Vec<f64>> = convs.iter().map(|_| Vec::new()).collect();
        let mut gamma_g: Vec<Vec<f64>> = convs.iter().map(|_| Vec::new()).collect();
        let mut beta_g: Vec<Vec<f64>> = convs.iter().map(|_| Vec::new()).collect();

        // Returns the gradient w.r.t. the layer input (if wanted).
        let mut layer_back = |layer: usize, dy: &[f64], want_in: bool| -> Option<Vec<f64>> {
            let rec = tape.layers[layer].as_ref().unwrap();
            let g = &convs[layer];
            let (mut dz, dgamma, dbeta) =
                ops::bn_backward(dy, g.cout, &rec.cache, &self.bn[layer].gamma);
            if let Some(sg) = stat_grads {
                let sg = &sg[layer];
                let count = (rec.z.len() / g.cout) as f64;
                for (dzr, zr) in dz.chunks_exact_mut(g.cout).zip(rec.z.chunks_exact(g.cout)) {
                    for c in 0..g.cout {
                        dzr[c] += sg.dmean[c] / count
                            + sg.dvar[c] * 2.0 * (zr[c] - rec.batch_mean[c]) / count;
                    }
                }
            }
            let (dw, dx) = ops::conv_backward(
                &tape.acts[rec.input],
                n,
                rec.in_h,
                rec.in_w,
                g,
                &self.conv_weights[layer],
                &dz,
                want_params,
                want_in,
            );
            if want_params {
                conv_g[layer] = dw.unwrap();
                gamma_g[layer] = dgamma;
                beta_g[layer] = dbeta;
            }
            dx
        };

        let plans = self.arch.blocks();
        let (_, _, last_out) = *tape.block_acts.last().unwrap();
        let (h, w) = tape.act_hw[last_out];
        let spatial = (h * w) as f64;
        let mut d = vec![0.0; n * h * w * dim];
        for (i, img) in d.chunks_exact_mut(h * w * dim).enumerate() {
            let df = &dfeatures[i * dim..(i + 1) * dim];
            for px in img.chunks_exact_mut(dim) {
                px.iter_mut().zip(df).for_each(|(p, g)| *p = g / spatial);
            }
        }

        for (plan, &(input_id, ra_id, out_id)) in plans.iter().zip(&tape.block_acts).rev() {
            if !plan.last {
                ops::relu_backward_inplace(&mut d, &tape.acts[out_id]);
            }
            let mut dra = layer_back(plan.conv_b, &d, true).unwrap();
            ops::relu_backward_inplace(&mut dra, &tape.acts[ra_id]);
            let mut din = layer_back(plan.conv_a, &dra, true).unwrap();
            match plan.shortcut {
                Some(s) => {
                    let ds = layer_back(s, &d, true).unwrap();
                    din.iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
                }
                None => din.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
            }
            debug_assert_eq!(din.len(), tape.acts[input_id].len());
            d = din;
        }
        ops::relu_backward_inplace(&mut d, &tape.acts[tape.stem_out]);
        let input = layer_back(0, &d, want_input);

        Ok(BackboneGrads {
            conv: conv_g,
            gamma: gamma_g,
            beta: beta_g,
            input,
        })
    }

    /// Eval-mode features; the model is not modified.
    pub fn features(&self, batch: &ImageBatch) -> Result<FeatureBatch> {
        Ok(self.run(batch, Mode::Eval, false)?.features)
    }

    /// Forward pass that, in train mode, also folds the batch statistics into
    /// the running estimates.
    pub fn forward_features(&mut self, batch: &ImageBatch, mode: Mode) -> Result<FeatureBatch> {
        let pass = self.run(batch, mode, false)?;
        if mode == Mode::Train {
            self.apply_running_stats(&pass.observation);
        }
        Ok(pass.features)
    }

    /// Batch mean/variance of every BN layer's input under an eval-mode pass.
    /// Running statistics are not modified.
    pub fn observe_bn(&self, batch: &ImageBatch) -> Result<BnObservation> {
        Ok(self.run(batch, Mode::Eval, false)?.observation)
    }

    /// `running ← (1 − m)·running + m·batch` for every BN layer.
    pub fn apply_running_stats(&mut self, obs: &BnObservation) {
        self.apply_running_stats_with(obs, self.arch.bn_momentum);
    }

    pub fn apply_running_stats_with(&mut self, obs: &BnObservation, momentum: f64) {
        for (bn, stats) in self.bn.iter_mut().zip(&obs.layers) {
            for c in 0..bn.running_mean.len() {
                bn.running_mean[c] = (1.0 - momentum) * bn.running_mean[c] + momentum * stats.mean[c];
                bn.running_var[c] =
                    ((1.0 - momentum) * bn.running_var[c] + momentum * stats.var[c]).max(0.0);
            }
        }
    }

    /// SHA-256 of the serialized checkpoint; identifies the exact model state.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(crate::archive::sha256_hex(
            &checkpoint::to_archive(self).to_bytes()?,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.conv_weights.iter().map(Vec::len).sum::<usize>()
            + self.bn.iter().map(|b| 2 * b.gamma.len()).sum::<usize>()
            + self.head.embeddings.len()
    }
}
