use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::PreparedSample;

const STEPS: usize = 2000;
const LR: f64 = 0.5;
const L2: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_acc: f64,
    pub test_acc: f64,
}

fn features(s: &PreparedSample) -> Vec<f64> {
    s.frozen_image
        .data()
        .iter()
        .chain(s.frozen_text.data())
        .copied()
        .collect()
}

/// Logistic regression on the concatenated prompt-free embeddings `[ĩ ∥ t̃]`,
/// standardized with training statistics and fit by full-batch gradient
/// descent from zero weights. Measures what a linear head can do without
/// any cross-modal interaction.
pub fn linear_probe(train: &[PreparedSample], test: &[PreparedSample]) -> Result<ProbeResult> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract(
            "linear probe needs non-empty train and test sets".into(),
        ));
    }
    let xs: Vec<Vec<f64>> = train.iter().map(features).collect();
    let dim = xs[0].len();
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| {
            let v = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let standardize = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect() };
    let xs: Vec<Vec<f64>> = xs.iter().map(|x| standardize(x)).collect();
    let ys: Vec<f64> = train.iter().map(|s| s.label as f64).collect();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let logit = |w: &[f64], b: f64, x: &[f64]| -> f64 { b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() };
    for _ in 0..STEPS {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let p = 1.0 / (1.0 + (-logit(&w, b, x)).exp());
            let e = p - y;
            for (g, v) in gw.iter_mut().zip(x) {
                *g += e * v;
            }
            gb += e;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= LR * (g / n + L2 * *wi);
        }
        b -= LR * gb / n;
    }
    let accuracy = |set: &[PreparedSample]| -> f64 {
        let hits = set
            .iter()
            .filter(|s| usize::from(logit(&w, b, &standardize(&features(s))) > 0.0) == s.label)
            .count();
        hits as f64 / set.len() as f64
    };
    Ok(ProbeResult {
        train_acc: accuracy(train),
        test_acc: accuracy(test),
    })
}
