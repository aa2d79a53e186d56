//! Logistic-regression probe on raw pixels, used to calibrate the synthetic
//! task's difficulty.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{input_err, Result};
use crate::metrics::{mean_auc, PredictionSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            l2: 1e-3,
            seed: 0,
        }
    }
}

fn flat(ds: &Dataset) -> Vec<Vec<f64>> {
    ds.images.iter().map(|im| im.data.iter().map(|&v| f64::from(v)).collect()).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Trains one logistic regressor per class with per-sample SGD on
/// standardized pixels and returns the test mean AUC.
pub fn linear_probe_auc(train: &Dataset, test: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    let (ytr, yte) = match (train.labels(), test.labels()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(input_err!("probe needs labeled datasets")),
    };
    if train.is_empty() {
        return Err(input_err!("empty training set"));
    }
    let xtr = flat(train);
    let xte = flat(test);
    let d = xtr[0].len();
    let n = xtr.len() as f64;
    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for x in &xtr {
        for j in 0..d {
            mu[j] += x[j] / n;
        }
    }
    for x in &xtr {
        for j in 0..d {
            sd[j] += (x[j] - mu[j]).powi(2) / n;
        }
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
    let standardize = |x: &[f64]| x.iter().enumerate().map(|(j, v)| (v - mu[j]) / sd[j]).collect::<Vec<_>>();
    let xtr: Vec<Vec<f64>> = xtr.iter().map(|x| standardize(x)).collect();
    let xte: Vec<Vec<f64>> = xte.iter().map(|x| standardize(x)).collect();

    let c = train.num_classes();
    let mut w = vec![vec![0.0; d]; c];
    let mut b = vec![0.0; c];
    let mut order: Vec<usize> = (0..xtr.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let step = cfg.lr / d as f64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let x = &xtr[i];
            for k in 0..c {
                let z = b[k] + w[k].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
                let g = sigmoid(z) - f64::from(ytr[i][k]);
                for (wj, xj) in w[k].iter_mut().zip(x) {
                    *wj -= step * (g * xj + cfg.l2 * *wj);
                }
                b[k] -= cfg.lr * g;
            }
        }
    }
    let scores = xte
        .iter()
        .map(|x| (0..c).map(|k| b[k] + w[k].iter().zip(x).map(|(a, v)| a * v).sum::<f64>()).collect())
        .collect();
    mean_auc(&PredictionSet::new(scores, yte.to_vec())?)
}
