use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// From `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<RocPoint>,
    pub auroc: f64,
}

/// ROC curve over every distinct score threshold (predict positive when
/// `score ≥ threshold`) and its trapezoidal area. Tied scores form one step,
/// so the area equals the pairwise concordance with ties counted as one half.
pub fn roc_auroc(scores: &[f64], labels: &[bool]) -> Result<Roc> {
    ensure!(
        scores.len() == labels.len(),
        "{} scores but {} labels",
        scores.len(),
        labels.len()
    );
    ensure!(scores.iter().all(|s| !s.is_nan()), "scores contain NaN");
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("both classes must be present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of one (positive, negative) pair.
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    let auroc = twice_area as f64 / (2 * n_pos as u128 * n_neg as u128) as f64;
    Ok(Roc { points, auroc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfectly_separated() {
        let r = roc_auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(r.auroc, 1.0);
        assert_eq!(r.points.first().unwrap().fpr, 0.0);
        let last = r.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn all_tied_is_one_half() {
        let r = roc_auroc(&[1.0; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(r.auroc, 0.5);
        assert_eq!(r.points.len(), 2);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(roc_auroc(&[0.1, 0.2], &[true, true]).is_err());
    }
}
