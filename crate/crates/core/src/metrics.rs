//! Confusion matrices, weighted accuracy and macro-F1.

use serde::{Deserialize, Serialize};

use crate::dataio::ClassLabel;
use crate::error::{invalid, Result};

/// Weights of (absent, present, unknown) in the weighted accuracy.
pub const ACCURACY_WEIGHTS: [u64; 3] = [1, 5, 3];

/// Counts indexed `m[prediction][truth]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix3 {
    pub m: [[u64; 3]; 3],
}

impl ConfusionMatrix3 {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (ClassLabel, ClassLabel)>) -> Self {
        let mut cm = Self::default();
        for (pred, truth) in pairs {
            cm.add(pred, truth);
        }
        cm
    }

    pub fn add(&mut self, pred: ClassLabel, truth: ClassLabel) {
        self.m[pred.index()][truth.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.m.iter().flatten().sum()
    }

    /// Ground-truth count of each class (column sums).
    pub fn truth_totals(&self) -> [u64; 3] {
        std::array::from_fn(|t| (0..3).map(|p| self.m[p][t]).sum())
    }

    pub fn predicted_totals(&self) -> [u64; 3] {
        std::array::from_fn(|p| self.m[p].iter().sum())
    }

    /// Weighted accuracy as an exact `(numerator, denominator)` pair.
    pub fn weighted_accuracy_ratio(&self, weights: [u64; 3]) -> (u64, u64) {
        let truth = self.truth_totals();
        let num = (0..3).map(|k| weights[k] * self.m[k][k]).sum();
        let den = (0..3).map(|k| weights[k] * truth[k]).sum();
        (num, den)
    }

    /// F1 of one class as `(2·TP, 2·TP + FP + FN)`.
    pub fn f1_ratio(&self, class: ClassLabel) -> (u64, u64) {
        let k = class.index();
        let tp = self.m[k][k];
        let fp = self.predicted_totals()[k] - tp;
        let fn_ = self.truth_totals()[k] - tp;
        (2 * tp, 2 * tp + fp + fn_)
    }
}

/// `(correct_A + 5·correct_P + 3·correct_U) / (n_A + 5·n_P + 3·n_U)`.
pub fn weighted_accuracy(cm: &ConfusionMatrix3) -> Result<f64> {
    weighted_accuracy_with(cm, ACCURACY_WEIGHTS)
}

pub fn weighted_accuracy_with(cm: &ConfusionMatrix3, weights: [u64; 3]) -> Result<f64> {
    let (num, den) = cm.weighted_accuracy_ratio(weights);
    if den == 0 {
        return Err(invalid("weighted accuracy of an empty confusion matrix"));
    }
    Ok(num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Per-class precision, recall and F1; undefined ratios are 0.
pub fn per_class(cm: &ConfusionMatrix3) -> [ClassScores; 3] {
    let (pred, truth) = (cm.predicted_totals(), cm.truth_totals());
    std::array::from_fn(|k| {
        let (f_num, f_den) = cm.f1_ratio(ClassLabel::from_index(k).expect("k < 3"));
        ClassScores {
            precision: ratio(cm.m[k][k], pred[k]),
            recall: ratio(cm.m[k][k], truth[k]),
            f1: ratio(f_num, f_den),
        }
    })
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(cm: &ConfusionMatrix3) -> f64 {
    per_class(cm).iter().map(|s| s.f1).sum::<f64>() / 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix3,
    pub weighted_accuracy: f64,
    pub macro_f1: f64,
    pub per_class: [ClassScores; 3],
    /// Ground-truth count per class.
    pub counts: [u64; 3],
}

impl MetricsReport {
    pub fn from_matrix(confusion: ConfusionMatrix3) -> Result<Self> {
        Ok(Self {
            weighted_accuracy: weighted_accuracy(&confusion)?,
            macro_f1: macro_f1(&confusion),
            per_class: per_class(&confusion),
            counts: confusion.truth_totals(),
            confusion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_diagonal() {
        let cm = ConfusionMatrix3 {
            m: [[4, 0, 0], [0, 2, 0], [0, 0, 1]],
        };
        assert_eq!(weighted_accuracy(&cm).unwrap(), 1.0);
        assert_eq!(macro_f1(&cm), 1.0);
    }

    #[test]
    fn hand_expanded_weighted_accuracy() {
        // truth totals (100, 10, 5), correct (90, 9, 3)
        let cm = ConfusionMatrix3 {
            m: [[90, 1, 1], [6, 9, 1], [4, 0, 3]],
        };
        assert_eq!(cm.truth_totals(), [100, 10, 5]);
        assert_eq!(cm.weighted_accuracy_ratio(ACCURACY_WEIGHTS), (144, 165));
        assert!((weighted_accuracy(&cm).unwrap() - 144.0 / 165.0).abs() < 1e-15);
        assert!(weighted_accuracy(&ConfusionMatrix3::default()).is_err());
    }

    #[test]
    fn absent_class_scores_zero() {
        let cm = ConfusionMatrix3 {
            m: [[3, 0, 0], [0, 2, 0], [0, 0, 0]],
        };
        assert!((macro_f1(&cm) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn index_convention() {
        let cm = ConfusionMatrix3::from_pairs([(ClassLabel::Present, ClassLabel::Absent)]);
        assert_eq!(cm.m[1][0], 1);
        assert_eq!(cm.truth_totals(), [1, 0, 0]);
        assert_eq!(per_class(&cm)[1].precision, 0.0);
    }

    fn matrix() -> impl Strategy<Value = ConfusionMatrix3> {
        prop::array::uniform3(prop::array::uniform3(0u64..40)).prop_map(|m| ConfusionMatrix3 { m })
    }

    proptest! {
        #[test]
        fn unit_weights_give_plain_accuracy(cm in matrix()) {
            prop_assume!(cm.total() > 0);
            let plain = (0..3).map(|k| cm.m[k][k]).sum::<u64>() as f64 / cm.total() as f64;
            prop_assert_eq!(weighted_accuracy_with(&cm, [1, 1, 1]).unwrap(), plain);
        }

        #[test]
        fn relabeling_with_permuted_weights(cm in matrix(), perm in Just([1usize, 2, 0])) {
            prop_assume!(cm.total() > 0);
            let mut moved = ConfusionMatrix3::default();
            let mut w = [0u64; 3];
            for p in 0..3 {
                w[perm[p]] = ACCURACY_WEIGHTS[p];
                for t in 0..3 {
                    moved.m[perm[p]][perm[t]] = cm.m[p][t];
                }
            }
            prop_assert_eq!(weighted_accuracy(&cm).unwrap(), weighted_accuracy_with(&moved, w).unwrap());
            prop_assert!((macro_f1(&cm) - macro_f1(&moved)).abs() < 1e-12);
        }
    }
}
