use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.7,
            val: 0.2,
            test: 0.1,
            seed: 0,
        }
    }
}

/// Row indices of each split plus the groups assigned to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub train_groups: BTreeSet<String>,
    pub val_groups: BTreeSet<String>,
    pub test_groups: BTreeSet<String>,
}

/// Partitions whole groups into train/val/test. Group counts per split are
/// the rounded target fractions (at least one group each), so no group ever
/// straddles two splits.
pub fn group_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Split> {
    let fractions = [spec.train, spec.val, spec.test];
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config {
            path: "split".into(),
            message: "fractions must be positive and sum to 1".into(),
        });
    }
    let groups: BTreeSet<&str> = manifest.rows.iter().map(|r| r.group_id.as_str()).collect();
    let g = groups.len();
    if g < 3 {
        return Err(Error::Dataset(format!(
            "group split needs at least 3 groups, found {g}"
        )));
    }
    let mut order: Vec<&str> = groups.into_iter().collect();
    order.shuffle(&mut crate::rng::stream(spec.seed, "group-split"));

    let n_test = ((g as f64 * spec.test).round() as usize).max(1);
    let n_val = ((g as f64 * spec.val).round() as usize).max(1);
    if n_test + n_val >= g {
        return Err(Error::Dataset(format!(
            "{g} groups cannot be split into non-empty train/val/test"
        )));
    }
    let n_train = g - n_val - n_test;
    let to_set = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
    let train_groups = to_set(&order[..n_train]);
    let val_groups = to_set(&order[n_train..n_train + n_val]);
    let test_groups = to_set(&order[n_train + n_val..]);

    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        train_groups,
        val_groups,
        test_groups,
    };
    for (i, r) in manifest.rows.iter().enumerate() {
        if split.train_groups.contains(&r.group_id) {
            split.train.push(i);
        } else if split.val_groups.contains(&r.group_id) {
            split.val.push(i);
        } else {
            split.test.push(i);
        }
    }
    Ok(split)
}
