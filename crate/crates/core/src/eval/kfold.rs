use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{Burden, CaseEntry};

/// Case id to validation fold, plus the stratum each case was dealt from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub folds: BTreeMap<String, usize>,
    pub strata: BTreeMap<String, String>,
}

impl FoldAssignment {
    pub fn validation_ids(&self, fold: usize) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn training_ids(&self, fold: usize) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn check_fold(&self, fold: usize) -> Result<()> {
        if fold < self.k {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "fold {fold} out of range for {}-fold split",
                self.k
            )))
        }
    }
}

pub fn stratum_key(case: &CaseEntry) -> String {
    let burden = match case.burden {
        Some(Burden::High) => "high",
        Some(Burden::Low) => "low",
        None => "unknown",
    };
    format!("{}/{}", case.dataset, burden)
}

/// Stratified k-fold assignment over (dataset, burden) strata.
///
/// Strata are visited in sorted order; each is shuffled with the seeded RNG
/// and dealt round-robin, continuing from the fold where the previous stratum
/// stopped so that per-dataset and global fold sizes stay within one.
pub fn stratified_kfold(cases: &[CaseEntry], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if cases.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty manifest".into()));
    }
    let mut strata: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for c in cases {
        strata.entry(stratum_key(c)).or_default().push(c.id.as_str());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = BTreeMap::new();
    let mut stratum_of = BTreeMap::new();
    let mut next = 0usize;
    for (key, mut ids) in strata {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for id in ids {
            if folds.insert(id.to_string(), next % k).is_some() {
                return Err(Error::Manifest(format!("duplicate case id {id:?}")));
            }
            stratum_of.insert(id.to_string(), key.clone());
            next += 1;
        }
    }
    Ok(FoldAssignment {
        k,
        seed,
        folds,
        strata: stratum_of,
    })
}

/// Median split of foreground voxel counts within each dataset: the
/// `ceil(n/2)` largest are high burden. Ties are broken by id.
pub fn median_split(entries: &[(String, String, usize)]) -> BTreeMap<String, Burden> {
    let mut by_dataset: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
    for (id, ds, n) in entries {
        by_dataset.entry(ds.as_str()).or_default().push((id.as_str(), *n));
    }
    let mut out = BTreeMap::new();
    for (_, mut members) in by_dataset {
        members.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let high = members.len().div_ceil(2);
        for (rank, (id, _)) in members.into_iter().enumerate() {
            out.insert(id.to_string(), if rank < high { Burden::High } else { Burden::Low });
        }
    }
    out
}
