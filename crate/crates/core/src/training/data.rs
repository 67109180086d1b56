use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Example;
use crate::numerics::RngStream;

/// Disjoint train/test partition of all `p^2` ordered pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub p: usize,
    pub seed: u64,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl DataSplit {
    pub fn all_pairs(p: usize) -> Vec<Example> {
        (0..p * p).map(|i| Example::new(i / p, i % p, p)).collect()
    }
}

/// Number of training pairs for a given fraction, rounding half away from zero.
pub fn train_size(p: usize, frac: f64) -> usize {
    (frac * (p * p) as f64).round() as usize
}

/// Samples `round(frac * p^2)` pairs without replacement as the training set.
/// Both halves are returned sorted by `(a, b)`.
pub fn build_split(p: usize, frac: f64, seed: u64) -> Result<DataSplit> {
    if p < 2 {
        return Err(Error::arg(format!("modulus must be at least 2, got {p}")));
    }
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::arg(format!("train fraction must lie in (0, 1), got {frac}")));
    }
    let n_train = train_size(p, frac);
    if n_train == 0 || n_train == p * p {
        return Err(Error::arg(format!(
            "train fraction {frac} leaves an empty train or test set for p = {p}"
        )));
    }
    let mut pairs = DataSplit::all_pairs(p);
    let mut rng = RngStream::new(seed).substream(SPLIT_STREAM);
    pairs.shuffle(rng.rng_mut());
    let mut test = pairs.split_off(n_train);
    let mut train = pairs;
    train.sort_by_key(|e| (e.a, e.b));
    test.sort_by_key(|e| (e.a, e.b));
    Ok(DataSplit {
        p,
        seed,
        train,
        test,
    })
}

pub(crate) const SPLIT_STREAM: u64 = 1;
pub(crate) const INIT_STREAM: u64 = 2;
pub(crate) const DROPOUT_STREAM: u64 = 3;
