use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary classification scores. `confusion[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: [f64; 2],
    pub confusion: [[usize; 2]; 2],
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], predictions: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Contract("cannot score an empty test set".into()));
        }
        if labels.len() != predictions.len() {
            return Err(Error::Contract(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut confusion = [[0usize; 2]; 2];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y > 1 || p > 1 {
                return Err(Error::Contract(format!(
                    "class index out of range: label {y}, prediction {p}"
                )));
            }
            confusion[y][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: [[usize; 2]; 2]) -> Self {
        let total: usize = confusion.iter().flatten().sum();
        let correct = confusion[0][0] + confusion[1][1];
        let f1 = |c: usize| {
            let tp = confusion[c][c];
            let fp = confusion[1 - c][c];
            let fn_ = confusion[c][1 - c];
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        };
        let per_class_f1 = [f1(0), f1(1)];
        Metrics {
            accuracy: correct as f64 / total as f64,
            macro_f1: (per_class_f1[0] + per_class_f1[1]) / 2.0,
            per_class_f1,
            confusion,
        }
    }
}

/// Index of the larger logit; ties go to class 0.
pub fn argmax2(logits: [f64; 2]) -> usize {
    usize::from(logits[1] > logits[0])
}

/// One finished run in an aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub split: u64,
    pub acc: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub runs: Vec<RunRecord>,
    pub mean: Summary,
    /// Population standard deviation.
    pub std: Summary,
}

impl RunReport {
    pub fn median_acc(&self) -> f64 {
        median(&self.runs.iter().map(|r| r.acc).collect::<Vec<_>>())
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation over `runs` (at least one).
pub fn aggregate_runs(runs: Vec<RunRecord>) -> Result<RunReport> {
    if runs.is_empty() {
        return Err(Error::Contract("cannot aggregate zero runs".into()));
    }
    let (acc_mean, acc_std) = mean_std(runs.iter().map(|r| r.acc));
    let (f1_mean, f1_std) = mean_std(runs.iter().map(|r| r.macro_f1));
    Ok(RunReport {
        runs,
        mean: Summary {
            acc: acc_mean,
            macro_f1: f1_mean,
        },
        std: Summary {
            acc: acc_std,
            macro_f1: f1_std,
        },
    })
}
