use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CorpusError, CorpusManifest, Result};
use crate::rng::{fnv1a, stream_rng};
use crate::taxonomy::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitParams {
    pub test_ratio: f64,
    pub seed: u64,
    /// Keep every view of one artifact on the same side of the split.
    pub group_by_artifact: bool,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            test_ratio: 0.2,
            seed: 0,
            group_by_artifact: true,
        }
    }
}

/// How a split was produced; carried into every metrics report.
pub type SplitDescriptor = SplitParams;

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub train: CorpusManifest,
    pub test: CorpusManifest,
    /// Classes left with no sample on one side of the split.
    pub non_computable: Vec<ClassId>,
    pub descriptor: SplitDescriptor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Train,
    Test,
}

/// `max(1, round(ratio·n))`, never taking the whole class.
fn test_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).max(1).min(n - 1)
}

/// Per-class seeded split. Classes with a single sample keep it in train and
/// are reported non-computable; so are classes whose artifact grouping
/// leaves one side empty.
pub fn stratified_split(manifest: &CorpusManifest, params: &SplitParams) -> Result<SplitOutcome> {
    if manifest.is_empty() {
        return Err(CorpusError::EmptyManifest);
    }
    if !(params.test_ratio > 0.0 && params.test_ratio < 1.0) {
        return Err(CorpusError::BadRatio(params.test_ratio));
    }

    let mut by_class: BTreeMap<&ClassId, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        by_class.entry(&s.class).or_default().push(i);
    }

    let mut sides = vec![Side::Train; manifest.len()];
    let mut artifact_side: HashMap<&str, Side> = HashMap::new();
    let mut non_computable = Vec::new();

    for (class, members) in &by_class {
        let n = members.len();
        let mut rng = stream_rng(params.seed, fnv1a(class.as_str().as_bytes()));
        let target = if n >= 2 { test_count(n, params.test_ratio) } else { 0 };

        if !params.group_by_artifact {
            let mut order = members.clone();
            order.shuffle(&mut rng);
            for &i in &order[..target] {
                sides[i] = Side::Test;
            }
            if n < 2 {
                non_computable.push((*class).clone());
            }
            continue;
        }

        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in members {
            groups
                .entry(manifest.samples[i].artifact_id.as_str())
                .or_default()
                .push(i);
        }
        let (mut train_count, mut test_count_so_far) = (0usize, 0usize);
        let mut free = Vec::new();
        for (artifact, idxs) in groups {
            match artifact_side.get(artifact) {
                Some(Side::Test) => test_count_so_far += idxs.len(),
                Some(Side::Train) => train_count += idxs.len(),
                None => free.push((artifact, idxs)),
            }
        }
        free.shuffle(&mut rng);
        let mut remaining: usize = free.iter().map(|(_, g)| g.len()).sum();
        for (artifact, idxs) in free {
            remaining -= idxs.len();
            let side = if test_count_so_far < target && train_count + remaining > 0 {
                test_count_so_far += idxs.len();
                Side::Test
            } else {
                train_count += idxs.len();
                Side::Train
            };
            artifact_side.insert(artifact, side);
        }
        for &i in members {
            sides[i] = artifact_side[manifest.samples[i].artifact_id.as_str()];
        }
        if train_count == 0 || test_count_so_far == 0 {
            non_computable.push((*class).clone());
        }
    }

    let mut train = CorpusManifest::default();
    let mut test = CorpusManifest::default();
    for (s, side) in manifest.samples.iter().zip(sides) {
        match side {
            Side::Train => train.samples.push(s.clone()),
            Side::Test => test.samples.push(s.clone()),
        }
    }
    Ok(SplitOutcome {
        train,
        test,
        non_computable,
        descriptor: *params,
    })
}
