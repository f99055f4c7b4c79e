//! Property tests over randomly generated inputs.

use std::collections::{BTreeMap, BTreeSet};

use proptest::collection::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ci_engine::backbone::{
    load_checkpoint, save_checkpoint, ArchDescriptor, BnLayerStats, BnObservation, CosineHead,
    FeatureBatch, ImageBatch, Mode, ModelState,
};
use ci_engine::data::{
    build_schedule, group_split, load_manifest, make_desk_dataset, DeskSpec, ScheduleSpec, SplitSpec,
};
use ci_engine::engine::{
    assemble_training_stream, replay_quota, ClassCount, Evaluation, MetricsReport, ReplayRule, Sample,
};
use ci_engine::losses::{
    cnce_loss, contrastive_loss, distillation_loss, margin_loss, CentroidBank, CentroidPair,
};
use ci_engine::synthesis::{bn_reg, l2_reg, synthesize, tv_l2_reg, ClassImpressionSet, ClassMeanStore, SynthesisConfig};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, failure_persistence: None, ..ProptestConfig::default() }
}

fn fb(d: usize, v: Vec<f64>) -> FeatureBatch {
    FeatureBatch::new(v.len() / d, d, v).unwrap()
}

fn head(emb: Vec<f64>, dim: usize, eta: f64) -> CosineHead {
    let mut h = CosineHead::new(dim, eta);
    h.class_ids = (0..(emb.len() / dim) as u32).collect();
    h.embeddings = emb;
    h
}

fn tiny_arch() -> ArchDescriptor {
    ArchDescriptor {
        height: 6,
        width: 6,
        channels: 1,
        widths: [2, 3, 4],
        ..ArchDescriptor::default()
    }
}

fn model(seed: u64, classes: &[u32]) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ModelState::new(tiny_arch(), 10.0, &mut rng).unwrap();
    m.extend_classes(classes, &mut rng).unwrap();
    m
}

/// Vectors with no tiny norm, so cosines are well defined.
fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(-1.0..1.0f64, n * d).prop_filter("rows need a usable norm", move |v| {
        v.chunks(d).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-2)
    })
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn cosine_logits_ignore_feature_scale(f in rows(3, 4), e in rows(3, 4), c in 1e-3..1e3f64) {
        let h = head(e, 4, 10.0);
        let a = h.logits(&fb(4, f.clone()), None).unwrap();
        let b = h.logits(&fb(4, f.iter().map(|x| c * x).collect()), None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn losses_are_finite_nonnegative_and_bounded(
        f in rows(4, 5),
        e in rows(4, 5),
        old in rows(4, 5),
        labels in vec(0u32..2, 4),
        m in 0.0..1.5f64,
    ) {
        let h = head(e, 5, 10.0);
        let cnce = cnce_loss(&fb(5, f.clone()), &labels, &h).unwrap().value;
        prop_assert!(cnce.is_finite() && cnce >= 0.0);
        prop_assert!(cnce <= (4.0f64).ln() + 2.0 * 10.0);
        let margin = margin_loss(&fb(5, f.clone()), &labels, &h, &[2, 3], m).unwrap().value;
        prop_assert!(margin.is_finite() && margin >= 0.0);
        let dist = distillation_loss(&fb(5, f), &fb(5, old)).unwrap().value;
        prop_assert!(dist.is_finite() && (-1e-15..=2.0 + 1e-15).contains(&dist));
    }

    #[test]
    fn cnce_and_distillation_ignore_positive_rescaling(
        f in rows(3, 4),
        e in rows(3, 4),
        old in rows(3, 4),
        labels in vec(0u32..3, 3),
        a in 1e-2..1e2f64,
        b in 1e-2..1e2f64,
    ) {
        let scale = |v: &[f64], s: f64| v.iter().map(|x| s * x).collect::<Vec<_>>();
        let x = cnce_loss(&fb(4, f.clone()), &labels, &head(e.clone(), 4, 10.0)).unwrap().value;
        let y = cnce_loss(&fb(4, scale(&f, a)), &labels, &head(scale(&e, b), 4, 10.0)).unwrap().value;
        prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        let x = distillation_loss(&fb(4, f.clone()), &fb(4, old.clone())).unwrap().value;
        let y = distillation_loss(&fb(4, scale(&f, a)), &fb(4, scale(&old, b))).unwrap().value;
        prop_assert!((x - y).abs() <= 1e-12);
    }

    #[test]
    fn contrastive_loss_falls_as_the_pair_aligns(
        others in vec(-1.0..1.0f64, 3 * 2 * 3),
        t1 in 0.05..1.5f64,
        dt in 0.01..1.0f64,
    ) {
        // Class 0 lives in the (e0, e1) plane, every other centroid in the
        // orthogonal (e2, e3, e4) subspace, so only ⟨S_0, T_0⟩ changes.
        let d = 5;
        let loss = |theta: f64| {
            let mut bank = CentroidBank::new(d, 0.9).unwrap();
            bank.classes.insert(0, CentroidPair {
                source: Some(vec![theta.cos(), theta.sin(), 0.0, 0.0, 0.0]),
                target: Some(vec![1.0, 0.0, 0.0, 0.0, 0.0]),
            });
            for (j, chunk) in others.chunks(6).enumerate() {
                let lift = |c: &[f64]| vec![0.0, 0.0, c[0] + 2.0, c[1], c[2]];
                bank.classes.insert(j as u32 + 1, CentroidPair {
                    source: Some(lift(&chunk[..3])),
                    target: Some(lift(&chunk[3..])),
                });
            }
            contrastive_loss(&bank, &[0, 1, 2, 3], 10.0).unwrap().value
        };
        let t0 = (t1 - dt).max(0.0);
        prop_assert!(loss(t0) < loss(t1));
    }

    #[test]
    fn regularizers_are_nonnegative_and_vanish_on_degenerate_inputs(
        px in vec(-2.0..2.0f64, 2 * 36),
        level in -2.0..2.0f64,
        seed in 0u64..1000,
    ) {
        let batch = ImageBatch::new(2, 6, 6, 1, px).unwrap();
        prop_assert!(tv_l2_reg(&batch).unwrap() >= 0.0);
        prop_assert!(l2_reg(&batch) >= 0.0);
        let flat = ImageBatch::new(2, 6, 6, 1, vec![level; 72]).unwrap();
        prop_assert_eq!(tv_l2_reg(&flat).unwrap(), 0.0);
        prop_assert_eq!(l2_reg(&ImageBatch::new(2, 6, 6, 1, vec![0.0; 72]).unwrap()), 0.0);

        let m = model(seed, &[0, 1]);
        prop_assert!(bn_reg(&m.observe_bn(&batch).unwrap(), &m).unwrap() >= 0.0);
        let matched = BnObservation {
            layers: m.bn.iter().map(|b| BnLayerStats {
                mean: b.running_mean.clone(),
                var: b.running_var.clone(),
            }).collect(),
        };
        prop_assert_eq!(bn_reg(&matched, &m).unwrap(), 0.0);
    }

    #[test]
    fn train_forwards_keep_running_variance_nonnegative(
        seed in 0u64..1000,
        batches in vec(vec(-3.0..3.0f64, 2 * 36), 1..6),
    ) {
        let mut m = model(seed, &[0]);
        for px in batches {
            let b = ImageBatch::new(2, 6, 6, 1, px).unwrap();
            m.forward_features(&b, Mode::Train).unwrap();
            let obs = m.observe_bn(&b).unwrap();
            prop_assert_eq!(obs.layers.len(), m.bn.len());
            for (o, p) in obs.layers.iter().zip(&m.bn) {
                prop_assert_eq!(o.mean.len(), p.running_mean.len());
                prop_assert_eq!(o.var.len(), p.running_var.len());
                prop_assert!(p.running_var.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn eval_features_are_pure(seed in 0u64..1000, px in vec(-1.0..1.0f64, 3 * 36)) {
        let m = model(seed, &[0, 1]);
        let b = ImageBatch::new(3, 6, 6, 1, px).unwrap();
        let before = m.clone();
        prop_assert_eq!(m.features(&b).unwrap(), m.features(&b).unwrap());
        prop_assert_eq!(m, before);
    }

    #[test]
    fn checkpoints_roundtrip_bit_exactly(seed in 0u64..10_000, classes in 1u32..6) {
        let ids: Vec<u32> = (0..classes).collect();
        let m = model(seed, &ids);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let bits = |v: &ModelState| -> Vec<u64> {
            v.conv_weights.iter().flatten()
                .chain(v.bn.iter().flat_map(|b| b.gamma.iter().chain(&b.beta).chain(&b.running_mean).chain(&b.running_var)))
                .chain(&v.head.embeddings)
                .map(|x| x.to_bits())
                .collect()
        };
        prop_assert_eq!(bits(&m), bits(&back));
        prop_assert_eq!(m, back);
    }

    #[test]
    fn seen_classes_grow_by_each_task(sizes in vec(1usize..4, 1..5), seed in 0u64..100) {
        let mut m = model(seed, &[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = 1u32;
        for s in sizes {
            let before = m.seen_classes().len();
            let new: Vec<u32> = (next..next + s as u32).collect();
            next += s as u32;
            m.extend_classes(&new, &mut rng).unwrap();
            prop_assert_eq!(m.seen_classes().len(), before + s);
            prop_assert!(m.extend_classes(&new[..1], &mut rng).is_err());
        }
    }

    #[test]
    fn metrics_average_is_the_count_weighted_mean(
        counts in vec(vec((0usize..20, 1usize..20), 5), 4),
    ) {
        let tasks: Vec<Vec<u32>> = vec![vec![0, 1], vec![2], vec![3], vec![4]];
        let evals: Vec<Evaluation> = (0..4)
            .map(|t| {
                let seen = 2 + t;
                Evaluation {
                    per_class: (0..seen)
                        .map(|k| {
                            let (c, n) = counts[t][k];
                            (k as u32, ClassCount { correct: c.min(n), total: n })
                        })
                        .collect(),
                }
            })
            .collect();
        let r = MetricsReport::from_evaluations(
            "full".into(), String::new(), 0, tasks.clone(), &evals, Vec::new(), BTreeMap::new(),
        );
        for t in 0..4 {
            let pc = &evals[t].per_class;
            let direct = pc.values().map(|c| c.correct).sum::<usize>() as f64
                / pc.values().map(|c| c.total).sum::<usize>() as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for (tau, classes) in tasks.iter().enumerate().take(t + 1) {
                let n: usize = classes.iter().map(|k| pc[k].total).sum();
                num += r.accuracy_matrix[t][tau].unwrap() * n as f64;
                den += n as f64;
            }
            prop_assert!((r.average_accuracy[t] - direct).abs() < 1e-12);
            prop_assert!((r.average_accuracy[t] - num / den).abs() < 1e-12);
            for tau in t + 1..4 {
                prop_assert!(r.accuracy_matrix[t][tau].is_none());
            }
        }
    }

    #[test]
    fn every_group_lands_in_exactly_one_split(groups in 3usize..20, seed in 0u64..1000, test in 0.05..0.3f64) {
        let ds = make_desk_dataset(
            &DeskSpec { classes: 2, per_class: groups * 2, size: 8, groups, noise: 0.05 },
            seed,
        ).unwrap();
        let spec = SplitSpec { train: 0.9 - test, val: 0.1, test, seed };
        let s = group_split(&ds.manifest, &spec).unwrap();
        let all: Vec<&String> = s.train_groups.iter().chain(&s.val_groups).chain(&s.test_groups).collect();
        let unique: BTreeSet<&String> = all.iter().copied().collect();
        prop_assert_eq!(all.len(), groups);
        prop_assert_eq!(unique.len(), groups);
        let rows: usize = s.train.len() + s.val.len() + s.test.len();
        prop_assert_eq!(rows, ds.manifest.rows.len());
        for (idx, gs) in [(&s.train, &s.train_groups), (&s.val, &s.val_groups), (&s.test, &s.test_groups)] {
            for &i in idx {
                prop_assert!(gs.contains(&ds.manifest.rows[i].group_id));
            }
        }
    }

    #[test]
    fn replay_is_balanced_and_matches_the_new_class(per_class in 10usize..40, seed in 0u64..100) {
        let ds = make_desk_dataset(
            &DeskSpec { classes: 3, per_class, size: 8, groups: 5, noise: 0.05 },
            seed,
        ).unwrap();
        let all: Vec<usize> = (0..ds.len()).collect();
        let new: Vec<usize> = ds.indices_of_class(2, &all);
        let quota = replay_quota(ReplayRule::MatchNew, &[new.len()]).unwrap();
        let mut images = BTreeMap::new();
        for k in [0u32, 1] {
            images.insert(k, ImageBatch::new(quota, 8, 8, 1, vec![0.0; quota * 64]).unwrap());
        }
        let set = ClassImpressionSet { quota_per_class: quota, config: SynthesisConfig::default(), images, batches: Vec::new() };
        let stream = assemble_training_stream(&new, &[0, 1], Some(&set), 7).unwrap();
        let comp = stream.composition(&ds);
        prop_assert_eq!(comp[&(true, 0)], new.len());
        prop_assert_eq!(comp[&(true, 1)], new.len());
        prop_assert_eq!(comp[&(false, 2)], new.len());
        for e in 0..3 {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for s in stream.epoch(seed, &format!("epoch-{e}")).concat() {
                if let Sample::Replay { class, .. } = s {
                    *counts.entry(class).or_default() += 1;
                }
            }
            prop_assert_eq!(counts[&0], new.len());
            prop_assert_eq!(counts[&1], new.len());
        }
    }

    #[test]
    fn manifest_roundtrip_is_lossless(classes in 2usize..5, per_class in 2usize..6, seed in 0u64..1000) {
        let ds = make_desk_dataset(
            &DeskSpec { classes, per_class, size: 8, groups: 2, noise: 0.1 },
            seed,
        ).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = ds.write(dir.path()).unwrap();
        let back = load_manifest(path).unwrap();
        let key = |m: &ci_engine::data::DatasetManifest| -> Vec<(String, u32, String)> {
            m.rows.iter().map(|r| (r.sample_id.clone(), r.class_id, r.group_id.clone())).collect()
        };
        prop_assert_eq!(key(&back.manifest), key(&ds.manifest));
        prop_assert_eq!(back.manifest.geometry, ds.manifest.geometry);
        prop_assert_eq!(back.pixels, ds.pixels);
    }

    #[test]
    fn schedules_partition_the_classes(classes in 3usize..8, increment in 1usize..3, seed in 0u64..100) {
        let ds = make_desk_dataset(&DeskSpec { classes, per_class: 2, size: 8, groups: 2, noise: 0.1 }, 0).unwrap();
        let tasks = 1 + (classes - 2) / increment;
        let spec = ScheduleSpec { initial_classes: 2, increment, tasks, order: None, shuffle_seed: Some(seed) };
        let s = build_schedule(&ds.manifest, &spec).unwrap();
        let mut seen = BTreeSet::new();
        for (i, t) in s.tasks.iter().enumerate() {
            for k in &t.new_class_ids {
                prop_assert!(seen.insert(*k));
            }
            prop_assert_eq!(s.seen_through(i + 1).len(), seen.len());
        }
    }
}

proptest! {
    #![proptest_config(cases(8))]

    #[test]
    fn synthesis_honors_quota_and_leaves_the_model_alone(quota in 1usize..5, seed in 0u64..100) {
        let m = model(seed, &[0, 1, 2]);
        let geometry = ci_engine::data::Geometry { height: 6, width: 6, channels: 1 };
        let mut means = ClassMeanStore::new(geometry, None);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..3u32 {
            let px: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
            means.record_class_mean(k, &ImageBatch::new(1, 6, 6, 1, px).unwrap()).unwrap();
        }
        let cfg = SynthesisConfig { steps: 3, batch_size: 4, ..SynthesisConfig::default() };
        let before = m.fingerprint().unwrap();
        let set = synthesize(&m, &means, &[0, 1, 2], quota, &cfg, seed).unwrap();
        prop_assert_eq!(m.fingerprint().unwrap(), before);
        for k in 0..3u32 {
            prop_assert_eq!(set.images[&k].batch, quota);
        }
    }
}
