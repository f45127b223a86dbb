use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n_s` cut into `folds` test blocks whose sizes differ by at most one.
pub fn kfold_split(n_s: usize, folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if folds > n_s {
        return Err(Error::Config(format!(
            "{folds} folds for only {n_s} subjects"
        )));
    }
    let mut ids: Vec<usize> = (0..n_s).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (base, extra) = (n_s / folds, n_s % folds);
    let mut splits = Vec::with_capacity(folds);
    let mut start = 0;
    for fold in 0..folds {
        let len = base + usize::from(fold < extra);
        let mut test = ids[start..start + len].to_vec();
        let mut train: Vec<usize> = ids[..start]
            .iter()
            .chain(&ids[start + len..])
            .copied()
            .collect();
        test.sort_unstable();
        train.sort_unstable();
        splits.push(FoldSplit { fold, train, test });
        start += len;
    }
    Ok(splits)
}
