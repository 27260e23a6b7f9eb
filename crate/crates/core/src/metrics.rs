//! Accuracy summaries.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::Part;

/// Accuracy of one set of predictions against labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    /// Recall per class; zero for classes without samples.
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl Accuracy {
    pub fn new(labels: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if labels.len() != predicted.len() {
            return Err(Error::Data("label and prediction counts differ".into()));
        }
        if labels.is_empty() {
            return Err(Error::Data("no samples to score".into()));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&l, &p) in labels.iter().zip(predicted) {
            if l >= classes || p >= classes {
                return Err(Error::Index {
                    what: "class",
                    index: l.max(p),
                    len: classes,
                });
            }
            confusion[l][p] += 1;
        }
        let trace: u64 = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: u64 = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect();
        Ok(Self {
            top1: trace as f64 / labels.len() as f64,
            per_class,
            confusion,
        })
    }

    pub fn support(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    /// Accuracy over the samples whose true class is in `classes`.
    pub fn subset_accuracy(&self, classes: &[usize]) -> f64 {
        let (hit, total) = classes.iter().fold((0u64, 0u64), |(h, t), &c| {
            (h + self.confusion[c][c], t + self.confusion[c].iter().sum::<u64>())
        });
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

/// Fused result plus every stream on its own. `top1` and friends at the
/// top level describe the fused prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub fusion_weights: BTreeMap<Part, f64>,
    #[serde(flatten)]
    pub fused: Accuracy,
    pub streams: BTreeMap<Part, Accuracy>,
}
