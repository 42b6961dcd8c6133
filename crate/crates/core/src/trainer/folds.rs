use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Class, DatasetRecord, Split};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Held-out test ids per class plus the cross-validation folds over the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// True when the plan reproduces split tags from the manifest.
    pub tagged: bool,
    pub test: BTreeMap<Class, Vec<String>>,
    pub folds: Vec<Fold>,
}

/// Number of records per split for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub untagged: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test + self.untagged
    }
}

/// Per-class tallies of the split tags in a manifest.
pub fn class_split_counts(records: &[DatasetRecord]) -> BTreeMap<Class, SplitCounts> {
    let mut out: BTreeMap<Class, SplitCounts> = BTreeMap::new();
    for r in records {
        let c = out.entry(r.class).or_default();
        match r.split {
            Some(Split::Train) => c.train += 1,
            Some(Split::Val) => c.val += 1,
            Some(Split::Test) => c.test += 1,
            None => c.untagged += 1,
        }
    }
    out
}

/// Builds the test hold-out and `k` folds.
///
/// A manifest whose records all carry split tags is honored verbatim: when
/// every non-test record also has a fold index, fold `i` validates on the
/// records tagged `i`; otherwise there is a single fold from the train/val
/// tags. Untagged manifests are stratified per class: `round(test_fraction·n)`
/// items go to test and the rest are dealt into `k` folds.
pub fn make_fold_plan(records: &[DatasetRecord], test_fraction: f64, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test_fraction must lie in [0, 1), got {test_fraction}")));
    }
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Config(format!("duplicate id `{}`", r.id)));
        }
    }
    let tagged = records.iter().filter(|r| r.split.is_some()).count();
    if tagged == records.len() && !records.is_empty() {
        tagged_plan(records)
    } else if tagged == 0 {
        stratified_plan(records, test_fraction, k, seed)
    } else {
        Err(Error::Config(format!("{tagged} of {} records carry split tags; tag all or none", records.len())))
    }
}

fn tagged_plan(records: &[DatasetRecord]) -> Result<FoldPlan> {
    let mut test: BTreeMap<Class, Vec<String>> = BTreeMap::new();
    let pool: Vec<&DatasetRecord> = records.iter().filter(|r| r.split != Some(Split::Test)).collect();
    for r in records.iter().filter(|r| r.split == Some(Split::Test)) {
        test.entry(r.class).or_default().push(r.id.clone());
    }
    let ids = |it: &mut dyn Iterator<Item = &&DatasetRecord>| it.map(|r| r.id.clone()).collect::<Vec<_>>();
    let folds = if !pool.is_empty() && pool.iter().all(|r| r.fold.is_some()) {
        let k = pool.iter().filter_map(|r| r.fold).max().unwrap_or(0) as usize + 1;
        (0..k as u32)
            .map(|f| Fold {
                train: ids(&mut pool.iter().filter(|r| r.fold != Some(f))),
                val: ids(&mut pool.iter().filter(|r| r.fold == Some(f))),
            })
            .collect()
    } else {
        vec![Fold {
            train: ids(&mut pool.iter().filter(|r| r.split == Some(Split::Train))),
            val: ids(&mut pool.iter().filter(|r| r.split == Some(Split::Val))),
        }]
    };
    Ok(FoldPlan { k: folds.len(), tagged: true, test, folds })
}

fn stratified_plan(records: &[DatasetRecord], test_fraction: f64, k: usize, seed: u64) -> Result<FoldPlan> {
    let mut by_class: BTreeMap<Class, Vec<String>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class).or_default().push(r.id.clone());
    }
    let mut test = BTreeMap::new();
    let mut members: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut cursor = 0;
    for (class, mut ids) in by_class {
        ids.sort();
        let mut rng = stream(seed, &[0x666f_6c64, class as u64]);
        ids.shuffle(&mut rng);
        let n_test = (test_fraction * ids.len() as f64).round() as usize;
        let rest = ids.split_off(n_test);
        if rest.len() < k {
            return Err(Error::Config(format!(
                "class {} has {} non-test items, fewer than k = {k}",
                class.as_str(),
                rest.len()
            )));
        }
        for id in rest {
            members[cursor % k].push(id);
            cursor += 1;
        }
        test.insert(class, ids);
    }
    let folds = (0..k)
        .map(|i| Fold {
            train: members.iter().enumerate().filter(|&(j, _)| j != i).flat_map(|(_, m)| m.iter().cloned()).collect(),
            val: members[i].clone(),
        })
        .collect();
    Ok(FoldPlan { k, tagged: false, test, folds })
}

impl FoldPlan {
    pub fn test_ids(&self) -> impl Iterator<Item = &String> {
        self.test.values().flatten()
    }

    /// Checks the plan against its manifest: within every fold, test, train
    /// and validation are pairwise disjoint and together cover every record.
    pub fn audit(&self, records: &[DatasetRecord]) -> Result<()> {
        let all: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let test: HashSet<&str> = self.test_ids().map(String::as_str).collect();
        for (i, fold) in self.folds.iter().enumerate() {
            let train: HashSet<&str> = fold.train.iter().map(String::as_str).collect();
            let val: HashSet<&str> = fold.val.iter().map(String::as_str).collect();
            let overlap: Vec<String> = train
                .intersection(&val)
                .chain(train.intersection(&test))
                .chain(val.intersection(&test))
                .map(|s| s.to_string())
                .collect();
            if !overlap.is_empty() || train.len() != fold.train.len() || val.len() != fold.val.len() {
                return Err(Error::State { message: format!("fold {i} sets overlap"), ids: overlap });
            }
            let covered: HashSet<&str> = train.union(&val).copied().chain(test.iter().copied()).collect();
            if covered != all {
                let mut missing: Vec<String> = all.symmetric_difference(&covered).map(|s| s.to_string()).collect();
                missing.sort();
                return Err(Error::State { message: format!("fold {i} does not cover the manifest"), ids: missing });
            }
        }
        Ok(())
    }

    /// Validation-set size of each fold.
    pub fn fold_sizes(&self) -> Vec<usize> {
        self.folds.iter().map(|f| f.val.len()).collect()
    }

    /// Per-fold validation counts restricted to one class.
    pub fn class_fold_sizes(&self, records: &[DatasetRecord], class: Class) -> Vec<usize> {
        let class_of: HashMap<&str, Class> = records.iter().map(|r| (r.id.as_str(), r.class)).collect();
        self.folds
            .iter()
            .map(|f| f.val.iter().filter(|id| class_of.get(id.as_str()) == Some(&class)).count())
            .collect()
    }
}
