//! Segmentation quality measures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: prediction has {pred} pixels, ground truth {gt}")]
    ShapeMismatch { pred: usize, gt: usize },
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(u8, usize),
}

/// C x C counts; entry (i, j) is the number of pixels with truth `i`
/// predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Ground-truth histogram (row sums).
    pub fn truth_histogram(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|i| (0..self.classes).map(|j| self.count(i, j)).sum())
            .collect()
    }
}

fn check_dims(pred: &[u8], gt: &[u8]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

/// Jaccard index (intersection over union) of class `c`.
///
/// An empty union scores 1.0, so classes absent from both planes do not
/// penalize a perfect prediction.
pub fn jaccard(pred: &[u8], gt: &[u8], class: u8) -> Result<f32, MetricsError> {
    check_dims(pred, gt)?;
    let mut intersection = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        let in_p = p == class;
        let in_g = g == class;
        if in_p && in_g {
            intersection += 1;
        }
        if in_p || in_g {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok((intersection as f64 / union as f64) as f32)
    }
}

/// Unweighted mean of per-class Jaccard over all `classes` classes.
pub fn mean_jaccard(pred: &[u8], gt: &[u8], classes: usize) -> Result<f32, MetricsError> {
    check_dims(pred, gt)?;
    let mut sum = 0f64;
    for c in 0..classes {
        sum += f64::from(jaccard(pred, gt, c as u8)?);
    }
    Ok((sum / classes as f64) as f32)
}

pub fn confusion(pred: &[u8], gt: &[u8], classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    check_dims(pred, gt)?;
    let mut counts = vec![0u64; classes * classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p as usize >= classes {
            return Err(MetricsError::LabelOutOfRange(p, classes));
        }
        if g as usize >= classes {
            return Err(MetricsError::LabelOutOfRange(g, classes));
        }
        counts[g as usize * classes + p as usize] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Set-based reference: collect the index sets and measure them directly.
    fn brute_force_jaccard(pred: &[u8], gt: &[u8], class: u8) -> f64 {
        use std::collections::HashSet;
        let p: HashSet<usize> = pred
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == class)
            .map(|(i, _)| i)
            .collect();
        let g: HashSet<usize> = gt
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == class)
            .map(|(i, _)| i)
            .collect();
        let union = p.union(&g).count();
        if union == 0 {
            1.0
        } else {
            p.intersection(&g).count() as f64 / union as f64
        }
    }

    #[test]
    fn identical_planes_score_one() {
        let plane = vec![0u8, 1, 2, 3, 1, 1, 0, 2];
        for c in 0..4 {
            assert_eq!(jaccard(&plane, &plane, c).unwrap(), 1.0);
        }
        assert_eq!(mean_jaccard(&plane, &plane, 4).unwrap(), 1.0);
        let cm = confusion(&plane, &plane, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(cm.count(i, j), 0);
                }
            }
        }
    }

    #[test]
    fn disjoint_sets_score_zero() {
        let pred = vec![1u8, 1, 0, 0];
        let gt = vec![0u8, 0, 1, 1];
        assert_eq!(jaccard(&pred, &gt, 1).unwrap(), 0.0);
    }

    #[test]
    fn partial_overlap_counts() {
        // gt has 4 boundary pixels; pred marks 2 of them plus 1 false positive.
        let gt = vec![1u8, 1, 1, 1, 0, 0];
        let pred = vec![1u8, 1, 0, 0, 1, 0];
        assert!((jaccard(&pred, &gt, 1).unwrap() - 0.4).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(matches!(
            jaccard(&[0, 1], &[0], 0),
            Err(MetricsError::ShapeMismatch { pred: 2, gt: 1 })
        ));
    }

    #[test]
    fn constant_prediction_on_half_half_truth() {
        let gt = vec![0u8, 0, 1, 1];
        let pred = vec![0u8, 0, 0, 0];
        // class 0: intersection 2, union 4; class 1: intersection 0, union 2.
        assert!((jaccard(&pred, &gt, 0).unwrap() - 0.5).abs() < 1e-7);
        assert_eq!(jaccard(&pred, &gt, 1).unwrap(), 0.0);
        assert!((mean_jaccard(&pred, &gt, 2).unwrap() - 0.25).abs() < 1e-7);
    }

    #[test]
    fn confusion_rows_match_truth_histogram() {
        let gt = vec![0u8, 0, 1, 2, 2, 2];
        let pred = vec![0u8, 1, 1, 2, 0, 2];
        let cm = confusion(&pred, &gt, 3).unwrap();
        assert_eq!(cm.truth_histogram(), vec![2, 1, 3]);
        assert_eq!(cm.total(), 6);
    }

    proptest! {
        #[test]
        fn prop_jaccard_matches_set_oracle(
            pred in proptest::collection::vec(0u8..4, 1..64),
            seed in 0u8..255,
        ) {
            let gt: Vec<u8> = pred
                .iter()
                .enumerate()
                .map(|(i, &v)| v.wrapping_add((i as u8).wrapping_mul(seed)) % 4)
                .collect();
            for c in 0..4u8 {
                let got = f64::from(jaccard(&pred, &gt, c).unwrap());
                let want = brute_force_jaccard(&pred, &gt, c);
                prop_assert!((got - want).abs() < 1e-6);
                prop_assert!((0.0..=1.0).contains(&got));
                // symmetry
                let rev = f64::from(jaccard(&gt, &pred, c).unwrap());
                prop_assert!((got - rev).abs() < 1e-7);
            }
            prop_assert_eq!(confusion(&pred, &gt, 4).unwrap().total(), pred.len() as u64);
        }
    }
}
