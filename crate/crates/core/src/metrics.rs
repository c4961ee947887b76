//! Confusion-matrix metrics and the per-class F1 state vector.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::nn::{Mlp, ParamVector};
use crate::{Error, Result};

/// `counts[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("counts", "matrix must be square"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }
}

pub fn confusion(preds: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truth.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::LabelOutOfRange {
                label: p.max(t),
                classes,
            });
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and F1; every 0/0 is taken as 0.
pub fn class_prf1(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    let c = cm.num_classes();
    (0..c)
        .map(|k| {
            let tp = cm.counts[k][k];
            let predicted: u64 = (0..c).map(|t| cm.counts[t][k]).sum();
            let actual: u64 = cm.counts[k].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
            }
        })
        .collect()
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.trace(), cm.total())
}

/// Accuracy plus unweighted means of the per-class scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Summary {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let scores = class_prf1(cm);
        let n = scores.len().max(1) as f64;
        Summary {
            accuracy: accuracy(cm),
            precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
            recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
            f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
        }
    }
}

/// Evaluate a model on a labelled set.
pub fn evaluate(model: &Mlp, features: ArrayView2<f64>, labels: &[usize]) -> Result<ConfusionMatrix> {
    let preds = model.predict(features)?;
    confusion(&preds, labels, model.output_dim())
}

/// Per-class F1 of the aggregated model on the client's training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub f1_per_class: Vec<f64>,
    pub round: usize,
}

impl StateVector {
    pub fn dim(&self) -> usize {
        self.f1_per_class.len()
    }
}

pub fn compute_state(
    params: &ParamVector,
    arch: &[usize],
    features: ArrayView2<f64>,
    labels: &[usize],
    round: usize,
) -> Result<StateVector> {
    if labels.is_empty() {
        return Err(Error::Empty("client training data"));
    }
    let model = Mlp::from_params(arch, params)?;
    let cm = evaluate(&model, features, labels)?;
    Ok(StateVector {
        f1_per_class: class_prf1(&cm).into_iter().map(|s| s.f1).collect(),
        round,
    })
}
