//! Defenses: adversarial augmentation of the labeled set and a-separated
//! pruning.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::attack::{run_attack, AttackScope, AttackSpec};
use crate::data::Dataset;
use crate::error::{invalid, GlError, Result};
use crate::spatial::NeighborIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    AtSingle,
    AtAll,
    Prune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Adversarial,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedDataset {
    pub dataset: Dataset,
    pub provenance: Vec<Provenance>,
}

impl AugmentedDataset {
    /// Dataset CSV with an extra `provenance` column.
    pub fn to_csv_string(&self) -> String {
        let base = self.dataset.to_csv_string();
        let mut out = String::new();
        for (i, line) in base.lines().enumerate() {
            if i == 0 {
                let _ = writeln!(out, "{line},provenance");
            } else {
                let _ = writeln!(out, "{line},{}", self.provenance[i - 1].as_str());
            }
        }
        out
    }
}

fn row_key(ds: &Dataset, i: usize) -> Vec<u64> {
    ds.point(i).iter().map(|v| v.to_bits()).chain(std::iter::once(ds.labels()[i].to_bits())).collect()
}

/// Appends, for every labeled training point and every attack, the crafted
/// adversarial with the original label; exact duplicates are dropped.
/// DA uses `train` itself as the reference set.
pub fn augment_adversarial(train: &Dataset, attacks: &[AttackSpec]) -> Result<AugmentedDataset> {
    if attacks.is_empty() {
        return Err(invalid("augmentation needs at least one attack"));
    }
    let labeled = train.labeled_part()?;
    let mut seen: HashSet<Vec<u64>> = (0..labeled.len()).map(|i| row_key(&labeled, i)).collect();
    let mut out = labeled.clone();
    let mut provenance = vec![Provenance::Original; labeled.len()];
    for spec in attacks {
        let spec = spec.clone().with_scope(AttackScope::All);
        let pert = run_attack(&spec, &labeled, &labeled)?.perturbed;
        let keep: Vec<usize> = (0..pert.len()).filter(|&i| seen.insert(row_key(&pert, i))).collect();
        if keep.is_empty() {
            continue;
        }
        out = out.concat(&pert.subset(&keep)?)?;
        provenance.extend(std::iter::repeat_n(Provenance::Adversarial, keep.len()));
    }
    Ok(AugmentedDataset { dataset: out, provenance })
}

/// Greedy a-separated subset of the labeled rows of `train`.
///
/// Points are visited by descending count of same-class points within
/// distance `a` (ties by index) and admitted iff they are farther than `a` from
/// every admitted point of the other class. Returns the kept indices into the
/// labeled part.
pub fn prune_indices(train: &Dataset, a: f64) -> Result<Vec<usize>> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(invalid(format!("separation must be positive, got {a}")));
    }
    let labeled = train.labeled_part()?;
    let n = labeled.len();
    let classes = labeled.classes();
    let index = NeighborIndex::new(labeled.points(), labeled.dim());
    let balls: Vec<Vec<usize>> =
        (0..n).map(|i| index.within(labeled.point(i), a, Some(i)).into_iter().map(|h| h.index).collect()).collect();
    let density: Vec<usize> =
        (0..n).map(|i| balls[i].iter().filter(|&&j| classes[j] == classes[i]).count()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| density[y].cmp(&density[x]).then(x.cmp(&y)));
    let mut admitted = vec![false; n];
    for &i in &order {
        // `within` is inclusive, so any admitted opposite point at distance <= a blocks.
        if !balls[i].iter().any(|&j| admitted[j] && classes[j] != classes[i]) {
            admitted[i] = true;
        }
    }
    Ok((0..n).filter(|&i| admitted[i]).collect())
}

fn both_classes(classes: &[u8], kept: &[usize]) -> bool {
    kept.iter().any(|&i| classes[i] == 0) && kept.iter().any(|&i| classes[i] == 1)
}

/// a-separated pruning; fails when a class is wiped out, reporting the largest
/// separation (found by bisection) that keeps both classes.
pub fn robust_prune(train: &Dataset, a: f64) -> Result<Dataset> {
    let labeled = train.labeled_part()?;
    let classes = labeled.classes();
    let kept = prune_indices(train, a)?;
    if kept.is_empty() || (both_classes(&classes, &(0..labeled.len()).collect::<Vec<_>>()) && !both_classes(&classes, &kept)) {
        let (mut lo, mut hi) = (0.0, a);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if mid > 0.0 && both_classes(&classes, &prune_indices(train, mid)?) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        return Err(GlError::EmptyPrune { largest_feasible: lo });
    }
    labeled.subset(&kept)
}

/// Smallest distance between oppositely labeled rows (brute force).
pub fn min_cross_class_distance(ds: &Dataset) -> f64 {
    let classes = ds.classes();
    let mut best = f64::INFINITY;
    for i in 0..ds.len() {
        for j in i + 1..ds.len() {
            if classes[i] != classes[j] {
                best = best.min(crate::spatial::sq_dist(ds.point(i), ds.point(j)).sqrt());
            }
        }
    }
    best
}

/// Picks the separation maximizing `score(pruned)`; ties go to the larger `a`.
/// Grid values whose pruning fails are skipped.
pub fn select_separation(
    train: &Dataset,
    a_grid: &[f64],
    score: &mut dyn FnMut(&Dataset) -> Result<f64>,
) -> Result<f64> {
    if a_grid.is_empty() {
        return Err(invalid("separation grid is empty"));
    }
    let mut best: Option<(f64, f64)> = None;
    for &a in a_grid {
        let pruned = match robust_prune(train, a) {
            Ok(p) => p,
            Err(GlError::EmptyPrune { .. }) => continue,
            Err(e) => return Err(e),
        };
        let s = score(&pruned)?;
        let better = match best {
            None => true,
            Some((bs, ba)) => s > bs || (s == bs && a > ba),
        };
        if better {
            best = Some((s, a));
        }
    }
    best.map(|(_, a)| a).ok_or_else(|| GlError::EmptyPrune { largest_feasible: 0.0 })
}
