//! Thresholded GL predictions, the kNN baseline, and accuracy scoring.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{class_of, Dataset};
use crate::error::{invalid, Result};
use crate::solve::HarmonicSolution;
use crate::spatial::NeighborIndex;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub classes: Vec<u8>,
    pub scores: Vec<f64>,
}

impl Prediction {
    /// Class 1 iff score >= 1/2.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let classes = scores.iter().map(|&s| class_of(s)).collect();
        Self { classes, scores }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// CSV with columns `index,class,score`.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("index,class,score\n");
        for (i, (c, v)) in self.classes.iter().zip(&self.scores).enumerate() {
            let _ = writeln!(s, "{i},{c},{v}");
        }
        s
    }
}

pub fn gl_classify(sol: &HarmonicSolution) -> Prediction {
    Prediction::from_scores(sol.u.clone())
}

/// Majority vote over the `k` nearest labeled points of `train`; a split vote
/// goes to class 1.
pub fn knn_classify(train: &Dataset, queries: &[f64], k: usize) -> Result<Prediction> {
    let labeled = train.labeled_part()?;
    if labeled.is_empty() {
        return Err(invalid("kNN needs at least one labeled point"));
    }
    if k == 0 || k > labeled.len() {
        return Err(invalid(format!("k must be in 1..={}, got {k}", labeled.len())));
    }
    let d = train.dim();
    if queries.len() % d != 0 {
        return Err(invalid("query buffer is not a multiple of the dimension"));
    }
    let index = NeighborIndex::new(labeled.points(), d);
    let classes = labeled.classes();
    let scores: Vec<f64> = queries
        .par_chunks(d)
        .map(|q| {
            let hits = index.knn(q, k, None);
            hits.iter().filter(|h| classes[h.index] == 1).count() as f64 / k as f64
        })
        .collect();
    Ok(Prediction::from_scores(scores))
}

/// Fraction of indices (restricted to `mask` if given) where the predicted
/// class equals the class of `truth`.
pub fn accuracy(pred: &Prediction, truth: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(invalid(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if let Some(m) = mask {
        if m.len() != truth.len() {
            return Err(invalid("mask length differs from label count"));
        }
    }
    let selected = |i: usize| mask.is_none_or(|m| m[i]);
    let (mut hit, mut total) = (0usize, 0usize);
    for i in 0..truth.len() {
        if selected(i) {
            total += 1;
            if pred.classes[i] == class_of(truth[i]) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(invalid("accuracy over an empty set"));
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solve::SolverKind;

    fn sol(u: Vec<f64>) -> HarmonicSolution {
        HarmonicSolution { u, iterations: 0, residual_norm: 0.0, rhs_norm: 0.0, solver: SolverKind::Cg }
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = gl_classify(&sol(vec![0.49, 0.5, 0.51]));
        assert_eq!(p.classes, vec![0, 1, 1]);
    }

    #[test]
    fn knn_votes() {
        let train = Dataset::new("t", 1, vec![0.0, 1.0, 2.0, 10.0], vec![0.0, 0.0, 1.0, 1.0], vec![true; 4]).unwrap();
        let p = knn_classify(&train, &[10.0], 1).unwrap();
        assert_eq!(p.classes, vec![1]);
        let p = knn_classify(&train, &[0.5], 3).unwrap();
        assert_eq!(p.classes, vec![0]);
        assert!((p.scores[0] - 1.0 / 3.0).abs() < 1e-15);
        // Split vote goes to class 1.
        let p = knn_classify(&train, &[1.6], 2).unwrap();
        assert_eq!((p.classes[0], p.scores[0]), (1, 0.5));
        assert!(knn_classify(&train, &[0.0], 5).is_err());
        assert!(knn_classify(&train.all_unlabeled(), &[0.0], 1).is_err());
    }

    #[test]
    fn knn_ignores_unlabeled_training_points() {
        let train =
            Dataset::new("t", 1, vec![0.0, 5.0], vec![1.0, 0.0], vec![false, true]).unwrap();
        assert_eq!(knn_classify(&train, &[0.0], 1).unwrap().classes, vec![0]);
    }

    #[test]
    fn accuracy_cases() {
        let truth = vec![0.0, 1.0, 1.0, 0.0];
        let p = Prediction::from_scores(truth.clone());
        assert_eq!(accuracy(&p, &truth, None).unwrap(), 1.0);
        let flipped = Prediction::from_scores(truth.iter().map(|t| 1.0 - t).collect());
        assert_eq!(accuracy(&flipped, &truth, None).unwrap(), 0.0);
        let mask = [true, false, false, false];
        assert_eq!(accuracy(&flipped, &truth, Some(&mask)).unwrap(), 0.0);
        assert!(accuracy(&p, &truth, Some(&[false; 4])).is_err());
        assert!(accuracy(&p, &truth[..3], None).is_err());
    }

    #[test]
    fn prediction_csv() {
        let p = Prediction::from_scores(vec![0.25, 0.75]);
        assert_eq!(p.to_csv_string(), "index,class,score\n0,0,0.25\n1,1,0.75\n");
    }
}
