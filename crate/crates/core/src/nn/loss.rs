use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw class scores, their softmax, and the predicted class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub raw: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

impl ScoreVector {
    pub fn from_raw(raw: Vec<f64>) -> ScoreVector {
        let probabilities = softmax(&raw);
        let predicted = argmax(&raw);
        ScoreVector {
            raw,
            probabilities,
            predicted,
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|v| (v - lse).exp()).collect()
}

/// `-log softmax(scores)[label]` and its gradient `P - onehot(label)`.
pub fn softmax_cross_entropy(scores: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= scores.len() {
        return Err(Error::Domain(format!(
            "label {label} outside [0, {})",
            scores.len()
        )));
    }
    let lse = log_sum_exp(scores);
    let loss = lse - scores[label];
    let mut grad: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}
