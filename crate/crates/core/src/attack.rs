//! Evasion attacks under a per-point l2 budget `r`.
//!
//! The direct attack (DA) moves a point along the line through its nearest
//! oppositely labeled reference point. KSA and the three black-box attacks
//! share one FGSM-l2 routine and differ only in the surrogate.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{class_of, Dataset};
use crate::error::{invalid, GlError, Result};
use crate::models::{sign, SurrogateModel};
use crate::rng::{derive_seed, seeded};
use crate::spatial::NeighborIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Direct,
    Ksa,
    BbLr,
    BbNn,
    BbKernel,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] =
        [AttackKind::Direct, AttackKind::Ksa, AttackKind::BbLr, AttackKind::BbNn, AttackKind::BbKernel];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Direct => "direct",
            AttackKind::Ksa => "ksa",
            AttackKind::BbLr => "bb_lr",
            AttackKind::BbNn => "bb_nn",
            AttackKind::BbKernel => "bb_kernel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown attack kind {s:?}")))
    }

    pub fn needs_surrogate(&self) -> bool {
        *self != AttackKind::Direct
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Direction of the direct attack relative to the nearest opposite point `x'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSign {
    /// `x + r (x - x') / |x - x'|`, verbatim.
    #[default]
    AwayFromOpponent,
    /// `x - r (x - x') / |x - x'|`.
    TowardOpponent,
}

/// Which points an attack may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackScope {
    #[default]
    Unlabeled,
    All,
}

/// Where a surrogate came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SurrogateProvenance {
    pub training_seed: u64,
    pub rounds: usize,
    pub queries: usize,
}

#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub budget_r: f64,
    pub surrogate: Option<Arc<SurrogateModel>>,
    pub provenance: Option<SurrogateProvenance>,
    pub seed: u64,
    pub direction_sign: DirectionSign,
    pub scope: AttackScope,
}

impl AttackSpec {
    pub fn direct(budget_r: f64, seed: u64) -> Self {
        Self {
            kind: AttackKind::Direct,
            budget_r,
            surrogate: None,
            provenance: None,
            seed,
            direction_sign: DirectionSign::AwayFromOpponent,
            scope: AttackScope::Unlabeled,
        }
    }

    pub fn gradient(kind: AttackKind, budget_r: f64, surrogate: Arc<SurrogateModel>, seed: u64) -> Self {
        Self { kind, surrogate: Some(surrogate), ..Self::direct(budget_r, seed) }
    }

    pub fn with_budget(&self, budget_r: f64) -> Self {
        Self { budget_r, ..self.clone() }
    }

    pub fn with_sign(mut self, s: DirectionSign) -> Self {
        self.direction_sign = s;
        self
    }

    pub fn with_scope(mut self, s: AttackScope) -> Self {
        self.scope = s;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.budget_r >= 0.0 && self.budget_r.is_finite()) {
            return Err(invalid(format!("attack budget must be finite and >= 0, got {}", self.budget_r)));
        }
        Ok(())
    }
}

/// Perturbed copy of a dataset; labels and mask are untouched.
#[derive(Debug, Clone)]
pub struct PerturbedDataset {
    pub original: Dataset,
    pub perturbed: Dataset,
    pub per_point_shift: Vec<f64>,
    pub budget_r: f64,
    pub metadata: BTreeMap<String, String>,
}

impl PerturbedDataset {
    fn build(original: &Dataset, points: Vec<f64>, budget_r: f64, metadata: BTreeMap<String, String>) -> Result<Self> {
        let perturbed = original.with_points(points)?;
        let per_point_shift = (0..original.len())
            .map(|i| crate::spatial::sq_dist(original.point(i), perturbed.point(i)).sqrt())
            .collect();
        Ok(Self { original: original.clone(), perturbed, per_point_shift, budget_r, metadata })
    }

    pub fn max_shift(&self) -> f64 {
        self.per_point_shift.iter().copied().fold(0.0, f64::max)
    }

    /// Budget compliance and label preservation.
    pub fn verify(&self) -> Result<()> {
        if self.max_shift() > self.budget_r + 1e-12 {
            return Err(GlError::HypothesisViolation(format!(
                "shift {} exceeds budget {}",
                self.max_shift(),
                self.budget_r
            )));
        }
        if self.original.labels() != self.perturbed.labels() || self.original.labeled_mask() != self.perturbed.labeled_mask() {
            return Err(GlError::HypothesisViolation("attack changed labels or mask".into()));
        }
        Ok(())
    }

    /// CSV: original coordinates, perturbed coordinates, shift norm.
    pub fn to_csv_string(&self) -> String {
        let d = self.original.dim();
        let mut s = String::new();
        let head: Vec<String> = (0..d).map(|k| format!("x{k}")).chain((0..d).map(|k| format!("xhat{k}"))).collect();
        let _ = writeln!(s, "{},shift", head.join(","));
        for i in 0..self.original.len() {
            let row: Vec<String> = self
                .original
                .point(i)
                .iter()
                .chain(self.perturbed.point(i))
                .map(|v| v.to_string())
                .collect();
            let _ = writeln!(s, "{},{}", row.join(","), self.per_point_shift[i]);
        }
        s
    }
}

fn in_scope(ds: &Dataset, scope: AttackScope, i: usize) -> bool {
    scope == AttackScope::All || !ds.is_labeled(i)
}

/// Unit vector drawn from a seeded isotropic Gaussian.
pub fn random_unit_vector(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed, 0);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// DA: move each in-scope point by exactly `r` along the line through its
/// nearest reference point of the opposite class.
pub fn direct_attack(ds: &Dataset, reference: &Dataset, spec: &AttackSpec) -> Result<PerturbedDataset> {
    spec.validate()?;
    if reference.dim() != ds.dim() {
        return Err(invalid("reference and dataset dimensions differ"));
    }
    let d = ds.dim();
    let refs = reference.labeled_part()?;
    let classes = refs.classes();
    let split = |c: u8| -> Vec<f64> {
        (0..refs.len()).filter(|&i| classes[i] == c).flat_map(|i| refs.point(i).to_vec()).collect()
    };
    let pts = [split(0), split(1)];
    if pts[0].is_empty() || pts[1].is_empty() {
        return Err(invalid("direct attack needs reference points of both classes"));
    }
    let index = [NeighborIndex::new(&pts[0], d), NeighborIndex::new(&pts[1], d)];
    let r = spec.budget_r;
    let toward = spec.direction_sign == DirectionSign::TowardOpponent;
    let moved: Vec<Vec<f64>> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = ds.point(i);
            if r == 0.0 || !in_scope(ds, spec.scope, i) {
                return x.to_vec();
            }
            let opp = 1 - class_of(ds.labels()[i]) as usize;
            let hit = index[opp].knn(x, 1, None)[0];
            let xp = &pts[opp][hit.index * d..(hit.index + 1) * d];
            let dist = hit.sq_dist.sqrt();
            let dir: Vec<f64> = if dist > 0.0 {
                x.iter().zip(xp).map(|(a, b)| (a - b) / dist).collect()
            } else {
                random_unit_vector(d, derive_seed(spec.seed, i as u64))
            };
            let s = if toward { -r } else { r };
            x.iter().zip(&dir).map(|(a, u)| a + s * u).collect()
        })
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("attack".into(), AttackKind::Direct.to_string());
    meta.insert("direction_sign".into(), format!("{:?}", spec.direction_sign));
    PerturbedDataset::build(ds, moved.concat(), r, meta)
}

/// FGSM under an l2 budget: `x + r sign(g) / |sign(g)|_2`, `g` the input
/// gradient of the surrogate's loss at the point's true label.
pub fn fgsm_l2(ds: &Dataset, spec: &AttackSpec) -> Result<PerturbedDataset> {
    spec.validate()?;
    let model = spec
        .surrogate
        .as_ref()
        .ok_or_else(|| GlError::Config(format!("{} attack has no surrogate", spec.kind)))?;
    if model.input_dim != ds.dim() {
        return Err(invalid(format!(
            "surrogate dimension {} does not match data dimension {}",
            model.input_dim,
            ds.dim()
        )));
    }
    let r = spec.budget_r;
    let moved: Vec<Vec<f64>> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = ds.point(i);
            if r == 0.0 || !in_scope(ds, spec.scope, i) {
                return Ok(x.to_vec());
            }
            let y = f64::from(class_of(ds.labels()[i]));
            let s: Vec<f64> = model.gradient_wrt_input(x, y)?.into_iter().map(sign).collect();
            let nnz = s.iter().filter(|v| **v != 0.0).count();
            if nnz == 0 {
                return Ok(x.to_vec());
            }
            let scale = r / (nnz as f64).sqrt();
            Ok(x.iter().zip(&s).map(|(a, b)| a + scale * b).collect())
        })
        .collect::<Result<_>>()?;
    let mut meta = BTreeMap::new();
    meta.insert("attack".into(), spec.kind.to_string());
    meta.insert("surrogate_kind".into(), model.kind.to_string());
    if let Some(p) = &spec.provenance {
        meta.insert("surrogate_seed".into(), p.training_seed.to_string());
        meta.insert("surrogate_rounds".into(), p.rounds.to_string());
        meta.insert("surrogate_queries".into(), p.queries.to_string());
    }
    PerturbedDataset::build(ds, moved.concat(), r, meta)
}

/// Dispatch: DA against `reference`, everything else through FGSM-l2.
pub fn run_attack(spec: &AttackSpec, ds: &Dataset, reference: &Dataset) -> Result<PerturbedDataset> {
    match spec.kind {
        AttackKind::Direct => direct_attack(ds, reference, spec),
        _ => {
            if spec.surrogate.is_none() {
                return Err(GlError::Config(format!("{} attack needs a trained surrogate", spec.kind)));
            }
            fgsm_l2(ds, spec)
        }
    }
}

/// Moves every in-scope point by exactly `r` along an independent random
/// direction.
pub fn random_perturbation(ds: &Dataset, r: f64, seed: u64, scope: AttackScope) -> Result<PerturbedDataset> {
    if !(r >= 0.0 && r.is_finite()) {
        return Err(invalid("perturbation radius must be finite and >= 0"));
    }
    let d = ds.dim();
    let mut pts = ds.points().to_vec();
    for i in 0..ds.len() {
        if in_scope(ds, scope, i) {
            let u = random_unit_vector(d, derive_seed(seed, i as u64));
            for k in 0..d {
                pts[i * d + k] += r * u[k];
            }
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("attack".into(), "random".into());
    PerturbedDataset::build(ds, pts, r, meta)
}
