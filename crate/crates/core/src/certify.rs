//! Certified robustness quantities and their calibration.
//!
//! The formula layer is pure: given `(N, N - M, d, eps)` and constants
//! `(c, C)` it evaluates
//!
//! * `k_min = ceil(C N log N / (N - M))`
//! * `r_max = c sqrt(beta) eps`
//! * `delta = (C eps / sqrt(beta)) log(sqrt(beta) / eps)`, clamped at 0
//! * `prob_proxy = N exp(-N beta eps^d)` (a relative indicator, not a
//!   calibrated probability)
//! * `boundary_margin = C0 beta^(-1/2) eps log(sqrt(beta) / eps)`
//!
//! with `beta = (N - M) / N`. Calibration picks `(c, C)` from a grid using
//! data; empirical checks estimate the robustness radius by attacking.

use std::fs;
use std::path::Path;

use crate::attack::{run_attack, AttackSpec};
use crate::data::Dataset;
use crate::error::{invalid, GlError, Result};
use crate::pipeline::Pipeline;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Constants {
    pub c_small: f64,
    pub c_big: f64,
}

impl Constants {
    pub fn new(c_small: f64, c_big: f64) -> Self {
        Self { c_small, c_big }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertInputs {
    pub n_total: usize,
    pub n_labeled: usize,
    pub dim: usize,
    pub epsilon: f64,
    pub constants: Constants,
    /// Boundary constant; `None` uses `c_big`.
    pub c0: Option<f64>,
}

impl CertInputs {
    pub fn new(n_total: usize, n_labeled: usize, dim: usize, epsilon: f64, constants: Constants) -> Self {
        Self { n_total, n_labeled, dim, epsilon, constants, c0: None }
    }

    /// `eps = (log N / (N - M))^(1/d)`.
    pub fn from_sizes(n_total: usize, n_labeled: usize, dim: usize, constants: Constants) -> Self {
        let eps = ((n_total as f64).ln() / n_labeled as f64).powf(1.0 / dim as f64);
        Self::new(n_total, n_labeled, dim, eps, constants)
    }

    /// `eps = (k / N)^(1/d)`, the kNN-to-bandwidth translation.
    pub fn from_k(n_total: usize, n_labeled: usize, dim: usize, k: usize, constants: Constants) -> Self {
        let eps = (k as f64 / n_total as f64).powf(1.0 / dim as f64);
        Self::new(n_total, n_labeled, dim, eps, constants)
    }

    pub fn beta(&self) -> f64 {
        self.n_labeled as f64 / self.n_total as f64
    }

    fn validate_shape(&self) -> Result<()> {
        if self.n_total == 0 || self.n_labeled == 0 || self.n_labeled > self.n_total {
            return Err(invalid(format!(
                "need 0 < N - M <= N, got N = {}, N - M = {}",
                self.n_total, self.n_labeled
            )));
        }
        if self.dim == 0 {
            return Err(invalid("dimension must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(invalid(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        let Constants { c_small, c_big } = self.constants;
        if !(c_small >= 0.0 && c_big >= 0.0 && c_small.is_finite() && c_big.is_finite()) {
            return Err(invalid("constants must be finite and non-negative"));
        }
        Ok(())
    }

    fn hypothesis_violations(&self) -> Vec<String> {
        let beta = self.beta();
        let eps2 = self.epsilon * self.epsilon;
        if beta < eps2 {
            vec![format!("beta = {beta} < eps^2 = {eps2}")]
        } else {
            Vec::new()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertBounds {
    pub k_min: usize,
    pub r_max: f64,
    pub delta: f64,
    pub prob_proxy: f64,
    pub boundary_margin: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// Failed hypotheses (only populated by the sample-size entry point).
    pub violations: Vec<String>,
}

/// `eps log(sqrt(beta) / eps) / sqrt(beta)`, clamped at 0.
fn delta_unit(beta: f64, eps: f64) -> f64 {
    let sb = beta.sqrt();
    if sb <= eps {
        0.0
    } else {
        eps / sb * (sb / eps).ln()
    }
}

fn evaluate(inp: &CertInputs, violations: Vec<String>) -> CertBounds {
    let n = inp.n_total as f64;
    let beta = inp.beta();
    let eps = inp.epsilon;
    let Constants { c_small, c_big } = inp.constants;
    let k_raw = c_big * n * n.ln() / inp.n_labeled as f64;
    // Guard against ceil() of a value that is an integer up to rounding.
    let k_min = (k_raw - 1e-9 * k_raw.max(1.0)).ceil().max(0.0) as usize;
    let unit = delta_unit(beta, eps);
    CertBounds {
        k_min,
        r_max: c_small * beta.sqrt() * eps,
        delta: c_big * unit,
        prob_proxy: n * (-n * beta * eps.powi(inp.dim as i32)).exp(),
        boundary_margin: inp.c0.unwrap_or(c_big) * unit,
        beta,
        epsilon: eps,
        violations,
    }
}

/// Certified quantities; errors when `beta < eps^2`.
pub fn certified_bounds(inp: &CertInputs) -> Result<CertBounds> {
    inp.validate_shape()?;
    let v = inp.hypothesis_violations();
    if !v.is_empty() {
        return Err(GlError::HypothesisViolation(v.join("; ")));
    }
    Ok(evaluate(inp, Vec::new()))
}

/// Certified quantities at `eps = (log N / (N - M))^(1/d)`; hypothesis
/// failures are reported in `violations` instead of failing.
pub fn certified_bounds_from_sizes(n_total: usize, n_labeled: usize, dim: usize, constants: Constants) -> Result<CertBounds> {
    let inp = CertInputs::from_sizes(n_total, n_labeled, dim, constants);
    inp.validate_shape()?;
    let v = inp.hypothesis_violations();
    Ok(evaluate(&inp, v))
}

/// `delta` for `C = 1`; observed errors divided by this calibrate `C`.
pub fn delta_per_unit_constant(beta: f64, eps: f64) -> f64 {
    delta_unit(beta, eps)
}

/// Search grid for calibration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationGrid {
    pub c_small: Vec<f64>,
    pub c_big: Vec<f64>,
}

impl CalibrationGrid {
    pub fn pairs(&self) -> Vec<Constants> {
        self.c_small
            .iter()
            .flat_map(|&c| self.c_big.iter().map(move |&cb| Constants::new(c, cb)))
            .collect()
    }
}

/// Seed-level accuracies for one `(k, r)` candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEval {
    pub clean: Vec<f64>,
    /// `(attack name, per-seed accuracy at budget r)`.
    pub attacks: Vec<(String, Vec<f64>)>,
    /// Number of evaluated points per seed (sets the resolution floor).
    pub n_eval: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeasibilityRow {
    pub c_small: f64,
    pub c_big: f64,
    pub k: usize,
    pub r: f64,
    pub clean_mean: f64,
    pub clean_std: f64,
    pub spread: f64,
    pub band: f64,
    pub feasible: bool,
}

impl CandidateEval {
    /// `(spread, band)`: max - min over seed-mean accuracies (clean and every
    /// attack) and the tolerated spread `max(2 std_clean, 1 / n_eval)`.
    pub fn stability(&self) -> (f64, f64) {
        let means: Vec<f64> = std::iter::once(mean(&self.clean))
            .chain(self.attacks.iter().map(|(_, a)| mean(a)))
            .collect();
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        let band = (2.0 * std(&self.clean)).max(1.0 / self.n_eval.max(1) as f64);
        (hi - lo, band)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationReport {
    pub dataset: String,
    pub subset_seed: u64,
    pub subset_fraction: f64,
    pub n_total: usize,
    pub n_labeled: usize,
    pub dim: usize,
    pub grid: CalibrationGrid,
    pub rule: String,
    pub chosen: Option<Constants>,
    pub table: Vec<FeasibilityRow>,
}

impl CalibrationReport {
    /// The chosen constants, or a calibration error naming the closest miss.
    pub fn constants(&self) -> Result<Constants> {
        if let Some(c) = self.chosen {
            return Ok(c);
        }
        let best = self
            .table
            .iter()
            .min_by(|a, b| (a.spread - a.band).total_cmp(&(b.spread - b.band)));
        Err(GlError::Calibration(match best {
            Some(b) => format!(
                "no feasible (c, C); closest was c = {}, C = {} with spread {:.4} > band {:.4}",
                b.c_small, b.c_big, b.spread, b.band
            ),
            None => "empty calibration grid".into(),
        }))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GlError::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| GlError::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

pub const STABILITY_RULE: &str =
    "feasible iff max-min of seed-mean accuracy over {clean, each attack at r_max} <= max(2*std(clean), 1/n_eval)";

/// Metadata of the calibration run.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSetup {
    pub dataset: String,
    pub subset_seed: u64,
    pub subset_fraction: f64,
    pub n_total: usize,
    pub n_labeled: usize,
    pub dim: usize,
}

/// Grid search: each `(c, C)` maps to `(k, r)` on the calibration subset via
/// the sample-size form; `evaluate(k, r)` supplies accuracies. The feasible pair
/// with the largest `r_max` wins; ties go to the larger `k_min`, then the
/// larger `C`. Evaluations are cached by `(k, r)`.
pub fn calibrate_constants(
    setup: &CalibrationSetup,
    grid: &CalibrationGrid,
    evaluate: &mut dyn FnMut(usize, f64) -> Result<CandidateEval>,
) -> Result<CalibrationReport> {
    if !(setup.subset_fraction > 0.0 && setup.subset_fraction <= 1.0) {
        return Err(invalid("subset fraction must lie in (0, 1]"));
    }
    if grid.c_small.is_empty() || grid.c_big.is_empty() {
        return Err(invalid("calibration grid is empty"));
    }
    let mut cache: Vec<((usize, u64), CandidateEval)> = Vec::new();
    let mut table = Vec::new();
    for pair in grid.pairs() {
        let b = certified_bounds_from_sizes(setup.n_total, setup.n_labeled, setup.dim, pair)?;
        let k = b.k_min.max(1);
        let key = (k, b.r_max.to_bits());
        let eval = match cache.iter().find(|(kk, _)| *kk == key) {
            Some((_, e)) => e.clone(),
            None => {
                let e = evaluate(k, b.r_max)?;
                cache.push((key, e.clone()));
                e
            }
        };
        let (spread, band) = eval.stability();
        table.push(FeasibilityRow {
            c_small: pair.c_small,
            c_big: pair.c_big,
            k,
            r: b.r_max,
            clean_mean: mean(&eval.clean),
            clean_std: std(&eval.clean),
            spread,
            band,
            feasible: spread <= band,
        });
    }
    let chosen = select_feasible(&table);
    Ok(CalibrationReport {
        dataset: setup.dataset.clone(),
        subset_seed: setup.subset_seed,
        subset_fraction: setup.subset_fraction,
        n_total: setup.n_total,
        n_labeled: setup.n_labeled,
        dim: setup.dim,
        grid: grid.clone(),
        rule: STABILITY_RULE.into(),
        chosen,
        table,
    })
}

/// Largest `r`, then largest `k`, then largest `C` among feasible rows.
pub fn select_feasible(table: &[FeasibilityRow]) -> Option<Constants> {
    table
        .iter()
        .filter(|r| r.feasible)
        .max_by(|a, b| {
            a.r.total_cmp(&b.r)
                .then(a.k.cmp(&b.k))
                .then(a.c_big.total_cmp(&b.c_big))
        })
        .map(|r| Constants::new(r.c_small, r.c_big))
}

/// Smallest grid value `>= x`, if any.
pub fn smallest_grid_at_least(grid: &[f64], x: f64) -> Option<f64> {
    grid.iter().copied().filter(|&g| g >= x).min_by(f64::total_cmp)
}

/// `sup` over unlabeled nodes of `|a - b|`.
fn unlabeled_sup_diff(ds: &Dataset, a: &[f64], b: &[f64]) -> f64 {
    ds.unlabeled_indices().into_iter().map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

/// Largest `r` in the ascending `r_grid` such that every attack at every
/// budget up to `r` moves `u` at the unlabeled nodes by at most `delta`.
/// An attack-based estimate: it can only over-estimate the true radius.
pub fn empirical_robustness_radius(
    pipeline: &Pipeline,
    ds: &Dataset,
    reference: &Dataset,
    delta: f64,
    attacks: &[AttackSpec],
    r_grid: &[f64],
) -> Result<f64> {
    if r_grid.windows(2).any(|w| w[0] > w[1]) || r_grid.iter().any(|&r| !(r > 0.0)) {
        return Err(invalid("r grid must be positive and ascending"));
    }
    let clean = pipeline.solve(ds)?;
    let mut best = 0.0;
    for &r in r_grid {
        for spec in attacks {
            let pert = run_attack(&spec.with_budget(r), ds, reference)?;
            let sol = pipeline.solve(&pert.perturbed)?;
            if unlabeled_sup_diff(ds, &clean.u, &sol.u) > delta {
                return Ok(best);
            }
        }
        best = r;
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelClosenessReport {
    pub max_error: f64,
    pub fraction_exceeding: f64,
    pub n_interior: usize,
    pub delta: f64,
}

/// `max |u(x_hat) - l(x)|` over unlabeled nodes whose original position is
/// farther than `margin` from the unit-cube boundary.
pub fn check_label_closeness(
    pipeline: &Pipeline,
    ds: &Dataset,
    ell: &dyn Fn(&[f64]) -> f64,
    attack: Option<(&AttackSpec, &Dataset)>,
    margin: f64,
    delta: f64,
) -> Result<LabelClosenessReport> {
    let perturbed = match attack {
        Some((spec, reference)) => run_attack(spec, ds, reference)?.perturbed,
        None => ds.clone(),
    };
    let sol = pipeline.solve(&perturbed)?;
    let interior: Vec<usize> = ds
        .unlabeled_indices()
        .into_iter()
        .filter(|&i| crate::graph::unit_cube_boundary_distance(ds.point(i)) > margin)
        .collect();
    let errors: Vec<f64> = interior.iter().map(|&i| (sol.u[i] - ell(ds.point(i))).abs()).collect();
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    let exceed = errors.iter().filter(|&&e| e > delta).count();
    Ok(LabelClosenessReport {
        max_error,
        fraction_exceeding: if errors.is_empty() { 0.0 } else { exceed as f64 / errors.len() as f64 },
        n_interior: interior.len(),
        delta,
    })
}

/// Nodes with `|u - 1/2| > 2 delta`.
pub fn margin_robust_set(u: &[f64], delta: f64) -> Vec<usize> {
    (0..u.len()).filter(|&i| (u[i] - 0.5).abs() > 2.0 * delta).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_substitution() {
        let b = certified_bounds(&CertInputs::new(100, 100, 2, 0.1, Constants::new(1.0, 1.0))).unwrap();
        assert!((b.r_max - 0.1).abs() < 1e-15);
        assert!((b.delta - 0.1 * 10f64.ln()).abs() < 1e-15);
        assert!((b.beta - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hypothesis_violation() {
        let err = certified_bounds(&CertInputs::new(1000, 10, 2, 0.5, Constants::new(1.0, 1.0)));
        assert!(matches!(err, Err(GlError::HypothesisViolation(_))));
        assert!(certified_bounds(&CertInputs::new(10, 20, 2, 0.1, Constants::new(1.0, 1.0))).is_err());
        assert!(certified_bounds(&CertInputs::new(10, 5, 2, 1.5, Constants::new(1.0, 1.0))).is_err());
    }

    #[test]
    fn delta_clamped_when_log_argument_small() {
        let mut inp = CertInputs::new(100, 100, 2, 0.5, Constants::new(1.0, 1.0));
        inp.n_labeled = 25; // sqrt(beta) = 0.5 = eps
        let b = certified_bounds(&inp).unwrap();
        assert_eq!(b.delta, 0.0);
        assert_eq!(b.boundary_margin, 0.0);
    }

    #[test]
    fn selection_prefers_radius_then_k() {
        let row = |c: f64, cb: f64, k: usize, r: f64, feasible: bool| FeasibilityRow {
            c_small: c,
            c_big: cb,
            k,
            r,
            clean_mean: 0.9,
            clean_std: 0.0,
            spread: 0.0,
            band: 0.0,
            feasible,
        };
        let table = vec![
            row(0.1, 1.0, 10, 0.01, true),
            row(0.2, 1.0, 10, 0.02, true),
            row(0.2, 2.0, 20, 0.02, true),
            row(0.3, 2.0, 20, 0.03, false),
        ];
        assert_eq!(select_feasible(&table), Some(Constants::new(0.2, 2.0)));
        assert_eq!(select_feasible(&table[3..]), None);
    }

    #[test]
    fn zero_budget_calibration_picks_largest_radius() {
        let setup = CalibrationSetup {
            dataset: "t".into(),
            subset_seed: 0,
            subset_fraction: 0.2,
            n_total: 1400,
            n_labeled: 400,
            dim: 2,
        };
        let grid = CalibrationGrid { c_small: vec![0.1, 0.3, 0.2], c_big: vec![0.5, 1.0] };
        // Attacks with no effect: every candidate is feasible.
        let mut eval = |_k: usize, _r: f64| -> Result<CandidateEval> {
            Ok(CandidateEval {
                clean: vec![0.9, 0.91],
                attacks: vec![("direct".into(), vec![0.9, 0.91])],
                n_eval: 100,
            })
        };
        let rep = calibrate_constants(&setup, &grid, &mut eval).unwrap();
        assert_eq!(rep.constants().unwrap(), Constants::new(0.3, 1.0));
        let back = CalibrationReport::from_toml(&rep.to_toml().unwrap()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn single_infeasible_point_reports_failure() {
        let setup = CalibrationSetup {
            dataset: "t".into(),
            subset_seed: 0,
            subset_fraction: 0.2,
            n_total: 1400,
            n_labeled: 400,
            dim: 2,
        };
        let grid = CalibrationGrid { c_small: vec![0.3], c_big: vec![1.0] };
        let mut eval = |_k: usize, _r: f64| -> Result<CandidateEval> {
            Ok(CandidateEval {
                clean: vec![0.9, 0.9],
                attacks: vec![("direct".into(), vec![0.5, 0.5])],
                n_eval: 100,
            })
        };
        let rep = calibrate_constants(&setup, &grid, &mut eval).unwrap();
        assert!(matches!(rep.constants(), Err(GlError::Calibration(_))));
    }

    #[test]
    fn margin_set_cases() {
        assert_eq!(margin_robust_set(&[0.5, 0.2, 0.9], 0.0), vec![1, 2]);
        assert!(margin_robust_set(&[0.5; 4], 0.0).is_empty());
        assert_eq!(margin_robust_set(&[0.0, 0.45, 1.0], 0.1), vec![0, 2]);
    }

    #[test]
    fn grid_helper() {
        assert_eq!(smallest_grid_at_least(&[0.5, 1.0, 2.0], 0.7), Some(1.0));
        assert_eq!(smallest_grid_at_least(&[0.5, 1.0], 3.0), None);
    }
}
