//! Train/test splitting and feature standardization.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shuffles `0..n` and returns `(train, test)` index lists, each sorted.
/// The training part has `round(train_fraction · n)` entries, kept within
/// `1..n`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::domain("need at least two points to split"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::domain(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut train = idx[..k].to_vec();
    let mut test = idx[k..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn select<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Per-feature centring and scaling fitted on training data. Constant
/// features are centred only.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or_else(|| Error::domain("no rows to standardize"))?;
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::dim("rows have differing numbers of features"));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale = (0..d)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .zip(self.mean.iter().zip(&self.scale))
                    .map(|(x, (m, s))| (x - m) / s)
                    .collect()
            })
            .collect()
    }
}
