//! Procedural grayscale shape corpus for CPU-sized experiments.
//!
//! Each class is a line-drawn shape. Groups play the role of subjects: every
//! group contributes images of every class and carries its own background
//! level, stroke brightness and offset, so group-wise splits see a real shift.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, Geometry, ManifestRow};
use crate::backbone::ClassId;
use crate::error::{Error, Result};

pub const SHAPES: [&str; 8] = [
    "hbar", "vbar", "diag", "ring", "plus", "antidiag", "square", "cross",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub groups: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for DeskSpec {
    fn default() -> Self {
        DeskSpec {
            classes: 5,
            per_class: 300,
            size: 32,
            groups: 10,
            noise: 0.08,
        }
    }
}

struct GroupStyle {
    background: f64,
    brightness: f64,
    dx: f64,
    dy: f64,
}

/// Distance from `(x, y)` to the stroke of `shape` centred at the origin.
fn stroke_distance(shape: &str, x: f64, y: f64, r: f64) -> f64 {
    let seg = |ax: f64, ay: f64| {
        // segment from -(ax,ay) to (ax,ay)
        let len2 = ax * ax + ay * ay;
        let t = ((x * ax + y * ay) / len2).clamp(-1.0, 1.0);
        ((x - t * ax).powi(2) + (y - t * ay).powi(2)).sqrt()
    };
    let d = r * std::f64::consts::FRAC_1_SQRT_2;
    match shape {
        "hbar" => seg(r, 0.0),
        "vbar" => seg(0.0, r),
        "diag" => seg(d, d),
        "antidiag" => seg(d, -d),
        "ring" => ((x * x + y * y).sqrt() - r).abs(),
        "plus" => seg(r, 0.0).min(seg(0.0, r)),
        "cross" => seg(d, d).min(seg(d, -d)),
        "square" => {
            let s = 0.8 * r;
            let (ax, ay) = (x.abs() - s, y.abs() - s);
            if ax <= 0.0 && ay <= 0.0 {
                -ax.max(ay)
            } else {
                (ax.max(0.0).powi(2) + ay.max(0.0).powi(2)).sqrt()
            }
        }
        _ => unreachable!("unknown shape"),
    }
}

fn render<R: Rng + ?Sized>(
    shape: &str,
    size: usize,
    style: &GroupStyle,
    noise: f64,
    rng: &mut R,
) -> Vec<f64> {
    let s = size as f64;
    let r = s * rng.random_range(0.26..0.36);
    let half = 0.045 * s + rng.random_range(0.0..0.02) * s;
    let cx = (s - 1.0) / 2.0 + style.dx + rng.random_range(-0.06..0.06) * s;
    let cy = (s - 1.0) / 2.0 + style.dy + rng.random_range(-0.06..0.06) * s;
    let ink = style.brightness * rng.random_range(0.85..1.0);
    let gauss = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dist = stroke_distance(shape, x as f64 - cx, y as f64 - cy, r);
            let cover = (half + 0.5 - dist).clamp(0.0, 1.0);
            let mut v = style.background + (ink - style.background) * cover;
            if noise > 0.0 {
                v += gauss.sample(rng);
            }
            // stored as float32 on disk, so keep exactly representable values
            img.push(v.clamp(0.0, 1.0) as f32 as f64);
        }
    }
    img
}

/// Generates `classes × per_class` images of `size × size × 1`, rows ordered
/// by class and then by sample.
pub fn make_desk_dataset(spec: &DeskSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > SHAPES.len() {
        return Err(Error::Dataset(format!(
            "desk dataset supports 2..={} classes",
            SHAPES.len()
        )));
    }
    if spec.per_class == 0 || spec.size < 8 || spec.groups == 0 || !(spec.noise >= 0.0) {
        return Err(Error::Dataset(
            "desk dataset needs per_class ≥ 1, size ≥ 8, groups ≥ 1, noise ≥ 0".into(),
        ));
    }
    let mut style_rng = crate::rng::stream(seed, "desk-groups");
    let styles: Vec<GroupStyle> = (0..spec.groups)
        .map(|_| GroupStyle {
            background: style_rng.random_range(0.0..0.25),
            brightness: style_rng.random_range(0.65..1.0),
            dx: style_rng.random_range(-0.08..0.08) * spec.size as f64,
            dy: style_rng.random_range(-0.08..0.08) * spec.size as f64,
        })
        .collect();

    let mut rows = Vec::with_capacity(spec.classes * spec.per_class);
    let mut pixels = Vec::with_capacity(rows.capacity() * spec.size * spec.size);
    for class in 0..spec.classes {
        let mut rng = crate::rng::stream(seed, &format!("desk-class-{class}"));
        for i in 0..spec.per_class {
            let g = i % spec.groups;
            pixels.extend(render(SHAPES[class], spec.size, &styles[g], spec.noise, &mut rng));
            rows.push(ManifestRow {
                sample_id: format!("c{class}-{i:05}"),
                path: String::new(),
                class_id: class as ClassId,
                group_id: format!("subject-{g:03}"),
            });
        }
    }
    Dataset::new(
        DatasetManifest {
            rows,
            geometry: Geometry {
                height: spec.size,
                width: spec.size,
                channels: 1,
            },
            normalization: None,
        },
        pixels,
    )
}
