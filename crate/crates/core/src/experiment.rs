//! Experiment drivers: certification tables, robustness curves, label-count
//! sweeps and timing. Each seed owns its data, graphs and surrogates; results
//! are merged in seed order so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackKind, AttackSpec, DirectionSign, SurrogateProvenance};
use crate::certify::{
    calibrate_constants, certified_bounds_from_sizes, CalibrationReport, CalibrationSetup, CandidateEval, CertBounds,
    Constants,
};
use crate::classify::{accuracy, knn_classify};
use crate::config::{DatasetConfig, DatasetKind, ExperimentConfig, Mode};
use crate::data::{apply_label_mask, gen_halfmoon, load_abalone, load_mnist_1v7_splits, AbaloneOptions, Dataset, SexEncoding, SplitSpec};
use crate::defend::{augment_adversarial, robust_prune, select_separation, DefenseKind};
use crate::error::{GlError, Result};
use crate::models::{substitute_train_loop, train_surrogate, ModelKind, SurrogateModel, TrainConfig};
use crate::pipeline::Pipeline;
use crate::plot::{line_plot_svg, Series};
use crate::record::{write_records, write_rows, RunRecord};
use crate::rng::{derive_seed, seeded};
use crate::solve::{check_maximum_principle, HarmonicSolution, SolverConfig};
use crate::stats;

// ---------------------------------------------------------------- instruments

type Probe = (fn() -> u64, fn());

static MEMORY_PROBE: OnceLock<Probe> = OnceLock::new();

/// Registers an allocator high-water-mark reader and its reset hook.
pub fn set_memory_probe(peak: fn() -> u64, reset: fn()) {
    let _ = MEMORY_PROBE.set((peak, reset));
}

/// Allocator high-water mark in bytes; 0 when no probe is installed.
pub fn peak_bytes() -> u64 {
    MEMORY_PROBE.get().map_or(0, |(p, _)| p())
}

pub fn reset_peak() {
    if let Some((_, r)) = MEMORY_PROBE.get() {
        r();
    }
}

/// Runs `f` on a pool capped by `GLCERT_THREADS` when set.
pub fn with_thread_pool<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    match std::env::var("GLCERT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| GlError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

/// Per-run hard invariants: budget compliance, maximum principle and the
/// residual certificate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvariantLog {
    pub checks: usize,
    pub violations: Vec<String>,
}

impl InvariantLog {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn merge(&mut self, other: InvariantLog) {
        self.checks += other.checks;
        self.violations.extend(other.violations);
    }

    fn check_solution(&mut self, sol: &HarmonicSolution, ds: &Dataset, solver: &SolverConfig, what: &str) {
        self.checks += 2;
        let mp = check_maximum_principle(sol, ds);
        if !mp.holds(1e-8) {
            self.violations.push(format!("{what}: maximum principle violated by {:e}", mp.worst()));
        }
        if sol.rhs_norm > 0.0 && sol.residual_norm > solver.tol * sol.rhs_norm * (1.0 + 1e-9) {
            self.violations.push(format!(
                "{what}: residual {:e} above certificate {:e}",
                sol.residual_norm,
                solver.tol * sol.rhs_norm
            ));
        }
    }
}

// ---------------------------------------------------------------- data

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub validation: Option<Dataset>,
}

/// Train/test/validation splits for `seed`. Every returned row is labeled.
pub fn load_splits(cfg: &DatasetConfig, seed: u64) -> Result<Splits> {
    match cfg.kind {
        DatasetKind::Halfmoon => {
            let (train, rest) = gen_halfmoon(cfg.n_train, cfg.n_test + cfg.n_validation, cfg.noise, seed)?;
            let test = rest.subset(&(0..cfg.n_test).collect::<Vec<_>>())?.with_name("halfmoon-test");
            let validation = if cfg.n_validation > 0 {
                let idx: Vec<usize> = (cfg.n_test..cfg.n_test + cfg.n_validation).collect();
                Some(rest.subset(&idx)?.with_name("halfmoon-validation"))
            } else {
                None
            };
            Ok(Splits { train, test, validation })
        }
        DatasetKind::Abalone => {
            let path = cfg.path.as_ref().ok_or_else(|| GlError::Config("dataset.path is required for abalone".into()))?;
            let split = SplitSpec {
                train_count: cfg.n_train,
                test_count: cfg.n_test,
                validation_count: cfg.n_validation,
                seed,
            };
            let opts = AbaloneOptions {
                has_header: cfg.has_header,
                sex: if cfg.drop_sex { SexEncoding::Drop } else { SexEncoding::OneHot },
            };
            let (train, test, val) = load_abalone(path, split, opts)?;
            Ok(Splits { train, test, validation: (cfg.n_validation > 0).then_some(val) })
        }
        DatasetKind::Mnist => {
            let (images, labels) = match (&cfg.images, &cfg.labels) {
                (Some(i), Some(l)) => (i, l),
                _ => return Err(GlError::Config("dataset.images and dataset.labels are required for mnist".into())),
            };
            if cfg.n_train % 2 != 0 || cfg.n_test != cfg.n_train || (cfg.n_validation != 0 && cfg.n_validation != cfg.n_train) {
                return Err(GlError::Config("mnist splits are balanced: n_test (and n_validation) must equal the even n_train".into()));
            }
            let n_splits = if cfg.n_validation > 0 { 3 } else { 2 };
            let mut parts = load_mnist_1v7_splits(images, labels, cfg.n_train / 2, n_splits, seed)?.into_iter();
            let train = parts.next().expect("split").with_name("mnist1v7-train");
            let test = parts.next().expect("split").with_name("mnist1v7-test");
            let validation = parts.next().map(|v| v.with_name("mnist1v7-validation"));
            Ok(Splits { train, test, validation })
        }
    }
}

fn dataset_name(cfg: &DatasetConfig) -> &'static str {
    match cfg.kind {
        DatasetKind::Halfmoon => "halfmoon",
        DatasetKind::Abalone => "abalone",
        DatasetKind::Mnist => "mnist",
    }
}

/// `m` labeled rows drawn from `train` (both classes guaranteed).
fn labeled_subset(train: &Dataset, m: usize, seed: u64) -> Result<Dataset> {
    if m >= train.len() {
        return train.all_labeled().labeled_part();
    }
    apply_label_mask(&train.all_labeled(), m, seed)?.labeled_part()
}

// ---------------------------------------------------------------- classifiers

/// Base learner of a classifier family.
#[derive(Debug, Clone, Copy)]
pub enum Base {
    Gl(Pipeline),
    Knn(usize),
}

/// Accuracy of one classifier on one query set.
#[derive(Debug, Clone, Default)]
pub struct Cell {
    pub accuracy: f64,
    pub query_u: Option<Vec<f64>>,
    pub iterations: Option<usize>,
}

impl Base {
    /// Classes of `points` under the learner trained on `train`.
    pub fn predict(&self, train: &Dataset, points: &[f64]) -> Result<Vec<u8>> {
        match self {
            Base::Gl(p) => p.victim_labels(train, points),
            Base::Knn(k) => Ok(knn_classify(train, points, *k)?.classes),
        }
    }

    /// Trains on the labeled rows of `train` and scores the rows of `queries`
    /// against their stored labels.
    pub fn evaluate(&self, train: &Dataset, queries: &Dataset, log: &mut InvariantLog) -> Result<Cell> {
        match self {
            Base::Gl(p) => {
                let combined = Pipeline::combine(train, queries)?;
                let (acc, run) = p.accuracy_combined(&combined)?;
                log.check_solution(&run.solution, &combined, &p.solver, "GL solve");
                Ok(Cell { accuracy: acc, iterations: Some(run.solution.iterations), query_u: Some(run.query_u) })
            }
            Base::Knn(k) => {
                let pred = knn_classify(train, queries.points(), *k)?;
                Ok(Cell { accuracy: accuracy(&pred, queries.labels(), None)?, ..Cell::default() })
            }
        }
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- attacks

/// Surrogates for the gradient attacks of one (seed, victim).
#[derive(Debug, Clone, Default)]
pub struct AttackBank {
    models: BTreeMap<AttackKind, (Arc<SurrogateModel>, Option<SurrogateProvenance>)>,
    seed: u64,
    sign: DirectionSign,
}

fn bb_model(kind: AttackKind) -> Option<ModelKind> {
    match kind {
        AttackKind::BbLr => Some(ModelKind::Logistic),
        AttackKind::BbNn => Some(ModelKind::Mlp),
        AttackKind::BbKernel => Some(ModelKind::Kernel),
        _ => None,
    }
}

impl AttackBank {
    /// KSA: kernel model fit on the labeled training data. BB: substitutes
    /// grown by querying `victim`, seeded with `substitute_pool` points drawn
    /// from `pool_source`. A victim that answers every query with one class
    /// leaks no gradient; its substitute is the zero model (no perturbation).
    pub fn build(
        kinds: &[AttackKind],
        train: &Dataset,
        pool_source: &Dataset,
        victim: &Base,
        cfg: &crate::config::AttackConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut models = BTreeMap::new();
        let labeled = train.labeled_part()?;
        for &kind in kinds {
            let train_seed = derive_seed(seed, 100 + kind as u64);
            if kind == AttackKind::Ksa {
                let tc = TrainConfig { seed: train_seed, ..TrainConfig::for_kind(ModelKind::Kernel) };
                let m = train_surrogate(ModelKind::Kernel, &labeled, &tc)?;
                models.insert(kind, (Arc::new(m), None));
            } else if let Some(mk) = bb_model(kind) {
                let mut idx: Vec<usize> = (0..pool_source.len()).collect();
                idx.shuffle(&mut seeded(train_seed, 3));
                idx.truncate(cfg.substitute_pool.min(pool_source.len()));
                idx.sort_unstable();
                let pool = pool_source.subset(&idx)?.all_unlabeled();
                let tc = TrainConfig { seed: train_seed, ..TrainConfig::for_kind(mk) };
                let mut oracle = |pts: &[f64]| victim.predict(&labeled, pts);
                match substitute_train_loop(&mut oracle, &pool, cfg.substitute_rounds, cfg.substitute_step, mk, &tc) {
                    Ok(res) => {
                        let prov = SurrogateProvenance { training_seed: train_seed, rounds: res.rounds, queries: res.queries };
                        models.insert(kind, (Arc::new(res.model), Some(prov)));
                    }
                    Err(GlError::SingleClass(_)) => {
                        let zero = SurrogateModel::logistic(vec![0.0; pool.dim()], 0.0);
                        let prov = SurrogateProvenance { training_seed: train_seed, rounds: 0, queries: pool.len() };
                        models.insert(kind, (Arc::new(zero), Some(prov)));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(Self { models, seed, sign: cfg.direction_sign })
    }

    pub fn spec(&self, kind: AttackKind, r: f64) -> Result<AttackSpec> {
        let seed = derive_seed(self.seed, 200 + kind as u64);
        if kind == AttackKind::Direct {
            return Ok(AttackSpec::direct(r, seed).with_sign(self.sign));
        }
        let (m, prov) = self
            .models
            .get(&kind)
            .ok_or_else(|| GlError::Config(format!("no surrogate trained for {kind}")))?;
        let mut s = AttackSpec::gradient(kind, r, Arc::clone(m), seed);
        s.provenance = prov.clone();
        Ok(s)
    }

    /// Attacks every row of `queries` (treated as unlabeled test points).
    pub fn perturb(&self, kind: AttackKind, r: f64, queries: &Dataset, reference: &Dataset, log: &mut InvariantLog) -> Result<Dataset> {
        let q = queries.all_unlabeled();
        let pert = run_attack(&self.spec(kind, r)?, &q, reference)?;
        log.checks += 1;
        if let Err(e) = pert.verify() {
            log.violations.push(format!("{kind} at r = {r}: {e}"));
        }
        Ok(pert.perturbed)
    }
}

fn attack_names(kinds: &[AttackKind]) -> Vec<String> {
    kinds.iter().map(|k| k.to_string()).collect()
}

fn base_record(cfg: &ExperimentConfig, hash: &str, labeled: usize, seed: u64) -> RunRecord {
    RunRecord {
        config_hash: hash.into(),
        dataset: dataset_name(&cfg.dataset).into(),
        labeled,
        seed,
        classifier: String::new(),
        attack: String::new(),
        r: 0.0,
        accuracy: 0.0,
        u_deviation: None,
        solver_iterations: None,
        wall_time_s: 0.0,
        peak_bytes: 0,
    }
}

// ---------------------------------------------------------------- certify

/// One cell of the certification table in long form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyRow {
    pub config_hash: String,
    pub dataset: String,
    pub labeled: usize,
    pub n_total: usize,
    pub c_small: f64,
    pub c_big: f64,
    pub k: usize,
    pub r_max: f64,
    pub delta: f64,
    pub hypothesis_violations: String,
    pub column: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone)]
pub struct CertifyOutput {
    pub records: Vec<RunRecord>,
    pub table: Vec<CertifyRow>,
    pub bounds: Vec<(usize, Constants, CertBounds)>,
    pub calibration: Vec<CalibrationReport>,
    pub invariants: InvariantLog,
}

impl CertifyOutput {
    /// Mean and std (percent) of `column` at `labeled`.
    pub fn cell(&self, labeled: usize, column: &str) -> Option<(f64, f64)> {
        self.table
            .iter()
            .find(|r| r.labeled == labeled && r.column == column)
            .map(|r| (100.0 * r.mean, 100.0 * r.std))
    }
}

/// Evenly spaced budgets `j r / (n - 1)`, `j = 0..n`.
pub fn budget_grid(r: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![r];
    }
    (0..n).map(|j| r * j as f64 / (n - 1) as f64).collect()
}

/// Per-seed accuracies for the calibration candidate `(k, r)`.
fn calibration_eval(
    cfg: &ExperimentConfig,
    splits: &Splits,
    n_cal: usize,
    k: usize,
    r: f64,
    banks: &mut BTreeMap<(u64, usize), Arc<AttackBank>>,
) -> Result<CandidateEval> {
    let val = splits.validation.as_ref().ok_or_else(|| GlError::Config("calibration needs a validation split".into()))?;
    let kinds = &cfg.attacks.kinds;
    let pipeline = Pipeline { graph: cfg.graph.with_k(k), solver: cfg.solver };
    let base = Base::Gl(pipeline);
    let mut missing = Vec::new();
    for &s in &cfg.certify.calibration_seeds {
        if !banks.contains_key(&(s, k)) {
            missing.push(s);
        }
    }
    let built: Vec<(u64, AttackBank)> = missing
        .par_iter()
        .map(|&s| {
            let labeled = labeled_subset(&splits.train, n_cal, derive_seed(s, 1))?;
            Ok((s, AttackBank::build(kinds, &labeled, &splits.train, &base, &cfg.attacks, s)?))
        })
        .collect::<Result<_>>()?;
    for (s, b) in built {
        banks.insert((s, k), Arc::new(b));
    }
    let per_seed: Vec<(f64, Vec<f64>)> = cfg
        .certify
        .calibration_seeds
        .par_iter()
        .map(|&s| {
            let mut log = InvariantLog::default();
            let labeled = labeled_subset(&splits.train, n_cal, derive_seed(s, 1))?;
            let bank = &banks[&(s, k)];
            let clean = base.evaluate(&labeled, val, &mut log)?.accuracy;
            let mut accs = Vec::new();
            for &kind in kinds {
                let q = bank.perturb(kind, r, val, &labeled, &mut log)?;
                accs.push(base.evaluate(&labeled, &q, &mut log)?.accuracy);
            }
            Ok((clean, accs))
        })
        .collect::<Result<_>>()?;
    Ok(CandidateEval {
        clean: per_seed.iter().map(|(c, _)| *c).collect(),
        attacks: kinds
            .iter()
            .enumerate()
            .map(|(j, k)| (k.to_string(), per_seed.iter().map(|(_, a)| a[j]).collect()))
            .collect(),
        n_eval: val.len(),
    })
}

/// Certification table: calibrate `(c, C)`, derive `(k, r_max)`, and score
/// every attack at evenly spaced budgets in `[0, r_max]` over all seeds.
/// Calibration always uses the `data_seed` draw; with `vary_with_seed` each
/// run seed evaluates on its own draw.
pub fn run_certify_experiment(cfg: &ExperimentConfig) -> Result<CertifyOutput> {
    run_certify_experiment_with(cfg, &mut |_| Ok(()))
}

/// As [`run_certify_experiment`], handing each calibration report to
/// `on_report` as soon as it exists (also when it selects nothing).
pub fn run_certify_experiment_with(
    cfg: &ExperimentConfig,
    on_report: &mut dyn FnMut(&CalibrationReport) -> Result<()>,
) -> Result<CertifyOutput> {
    cfg.validate()?;
    if cfg.mode != Mode::Certify {
        return Err(GlError::Config("run_certify_experiment needs mode = certify".into()));
    }
    let hash = cfg.hash();
    let splits = load_splits(&cfg.dataset, cfg.dataset.data_seed)?;
    let n_test = splits.test.len();
    let dim = splits.train.dim();
    let kinds = &cfg.attacks.kinds;
    let mut out = CertifyOutput {
        records: Vec::new(),
        table: Vec::new(),
        bounds: Vec::new(),
        calibration: Vec::new(),
        invariants: InvariantLog::default(),
    };
    for &m in &cfg.certify.labeled_counts {
        if m == 0 || m > splits.train.len() {
            return Err(GlError::Config(format!("labeled count {m} outside 1..={}", splits.train.len())));
        }
        let constants = match cfg.certify.constants {
            Some(c) => c,
            None => {
                let n_cal = ((m as f64 * cfg.certify.subset_fraction).round() as usize).max(2);
                let n_val = splits.validation.as_ref().map_or(0, |v| v.len());
                let setup = CalibrationSetup {
                    dataset: dataset_name(&cfg.dataset).into(),
                    subset_seed: cfg.certify.calibration_seeds[0],
                    subset_fraction: cfg.certify.subset_fraction,
                    n_total: n_cal + n_val,
                    n_labeled: n_cal,
                    dim,
                };
                let mut banks = BTreeMap::new();
                let max_k = n_cal + n_val - 1;
                let mut eval = |k: usize, r: f64| calibration_eval(cfg, &splits, n_cal, k.min(max_k), r, &mut banks);
                let report = calibrate_constants(&setup, &cfg.certify.grid, &mut eval)?;
                on_report(&report)?;
                let chosen = report.constants();
                out.calibration.push(report);
                chosen?
            }
        };
        let n_total = m + n_test;
        let bounds = certified_bounds_from_sizes(n_total, m, dim, constants)?;
        let k = bounds.k_min.clamp(1, n_total - 1);
        let pipeline = Pipeline { graph: cfg.graph.with_k(k), solver: cfg.solver };
        let base = Base::Gl(pipeline);
        let budgets = budget_grid(bounds.r_max, cfg.certify.budgets);
        let per_seed: Vec<(Vec<RunRecord>, InvariantLog)> = cfg
            .seeds
            .par_iter()
            .map(|&s| {
                let mut log = InvariantLog::default();
                let mut recs = Vec::new();
                let redrawn;
                let splits = if cfg.dataset.vary_with_seed {
                    redrawn = load_splits(&cfg.dataset, derive_seed(cfg.dataset.data_seed, s))?;
                    &redrawn
                } else {
                    &splits
                };
                let labeled = labeled_subset(&splits.train, m, derive_seed(s, 1))?;
                let bank = AttackBank::build(kinds, &labeled, &splits.train, &base, &cfg.attacks, s)?;
                let t0 = Instant::now();
                let clean = base.evaluate(&labeled, &splits.test, &mut log)?;
                recs.push(RunRecord {
                    classifier: "GL".into(),
                    attack: "none".into(),
                    accuracy: clean.accuracy,
                    u_deviation: Some(0.0),
                    solver_iterations: clean.iterations,
                    wall_time_s: t0.elapsed().as_secs_f64(),
                    peak_bytes: peak_bytes(),
                    ..base_record(cfg, &hash, m, s)
                });
                let clean_u = clean.query_u.unwrap_or_default();
                for &kind in kinds {
                    for &r in &budgets {
                        let t0 = Instant::now();
                        let q = bank.perturb(kind, r, &splits.test, &labeled, &mut log)?;
                        let cell = base.evaluate(&labeled, &q, &mut log)?;
                        recs.push(RunRecord {
                            classifier: "GL".into(),
                            attack: kind.to_string(),
                            r,
                            accuracy: cell.accuracy,
                            u_deviation: cell.query_u.as_deref().map(|u| sup_diff(u, &clean_u)),
                            solver_iterations: cell.iterations,
                            wall_time_s: t0.elapsed().as_secs_f64(),
                            peak_bytes: peak_bytes(),
                            ..base_record(cfg, &hash, m, s)
                        });
                    }
                }
                Ok((recs, log))
            })
            .collect::<Result<_>>()?;
        let mut columns: Vec<(String, Vec<f64>)> = vec![("none".into(), Vec::new())];
        columns.extend(attack_names(kinds).into_iter().map(|n| (n, Vec::new())));
        for (recs, log) in per_seed {
            out.invariants.merge(log);
            for (name, vals) in columns.iter_mut() {
                let accs: Vec<f64> = recs.iter().filter(|r| &r.attack == name).map(|r| r.accuracy).collect();
                vals.push(stats::mean(&accs));
            }
            out.records.extend(recs);
        }
        for (name, vals) in columns {
            out.table.push(CertifyRow {
                config_hash: hash.clone(),
                dataset: dataset_name(&cfg.dataset).into(),
                labeled: m,
                n_total,
                c_small: constants.c_small,
                c_big: constants.c_big,
                k,
                r_max: bounds.r_max,
                delta: bounds.delta,
                hypothesis_violations: bounds.violations.join("; "),
                column: name,
                mean: stats::mean(&vals),
                std: stats::std(&vals),
                n_seeds: vals.len(),
            });
        }
        out.bounds.push((m, constants, bounds));
    }
    Ok(out)
}

/// Table with one row per labeled count and one `mean ± std` (percent) column
/// per attack.
pub fn certify_markdown(out: &CertifyOutput) -> String {
    let mut cols: Vec<&str> = Vec::new();
    for r in &out.table {
        if !cols.contains(&r.column.as_str()) {
            cols.push(&r.column);
        }
    }
    let mut s = format!("| dataset | N-M | k | r | {} |\n", cols.join(" | "));
    s.push_str(&format!("|{}\n", "---|".repeat(4 + cols.len())));
    let mut labeled: Vec<usize> = out.table.iter().map(|r| r.labeled).collect();
    labeled.dedup();
    for m in labeled {
        let rows: Vec<&CertifyRow> = out.table.iter().filter(|r| r.labeled == m).collect();
        let first = rows[0];
        let cells: Vec<String> = cols
            .iter()
            .map(|c| {
                rows.iter()
                    .find(|r| r.column == *c)
                    .map_or("-".into(), |r| format!("{:.1} ± {:.2}", 100.0 * r.mean, 100.0 * r.std))
            })
            .collect();
        s.push_str(&format!("| {} | {m} | {} | {:.4} | {} |\n", first.dataset, first.k, first.r_max, cells.join(" | ")));
    }
    s
}

// ---------------------------------------------------------------- curves

pub const VARIANTS_GL: [&str; 4] = ["GL", "ATGL", "ATGL-ALL", "RobustGL"];
pub const VARIANTS_KNN: [&str; 4] = ["kNN", "ATNN", "ATNN-ALL", "RobustNN"];

fn variant_name(base: &Base, d: DefenseKind) -> &'static str {
    let names = if matches!(base, Base::Gl(_)) { VARIANTS_GL } else { VARIANTS_KNN };
    match d {
        DefenseKind::None => names[0],
        DefenseKind::AtSingle => names[1],
        DefenseKind::AtAll => names[2],
        DefenseKind::Prune => names[3],
    }
}

/// Seed-mean accuracy of one classifier along the budget grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub config_hash: String,
    pub dataset: String,
    pub labeled: usize,
    pub attack: String,
    pub classifier: String,
    pub r: f64,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone)]
pub struct CurvesOutput {
    pub records: Vec<RunRecord>,
    pub curves: Vec<CurveRow>,
    pub invariants: InvariantLog,
}

impl CurvesOutput {
    /// Per-seed accuracies of `classifier` under `attack` at `r` (seed order).
    pub fn seed_accuracies(&self, classifier: &str, attack: &str, r: f64) -> Vec<f64> {
        self.records
            .iter()
            .filter(|x| x.classifier == classifier && x.attack == attack && x.r == r)
            .map(|x| x.accuracy)
            .collect()
    }
}

/// Evaluates every configured variant of both families on one seed.
fn curves_seed(
    cfg: &ExperimentConfig,
    hash: &str,
    seed: u64,
    labeled_count: Option<usize>,
    r_grid: &[f64],
) -> Result<(Vec<RunRecord>, InvariantLog)> {
    let data_seed = if cfg.dataset.vary_with_seed { derive_seed(cfg.dataset.data_seed, seed) } else { cfg.dataset.data_seed };
    let splits = load_splits(&cfg.dataset, data_seed)?;
    let train = match labeled_count {
        Some(m) => labeled_subset(&splits.train, m, derive_seed(seed, 1))?,
        None => splits.train.all_labeled(),
    };
    let m = train.len();
    let kinds = &cfg.attacks.kinds;
    let mut log = InvariantLog::default();
    let mut recs = Vec::new();
    let pipeline = Pipeline { graph: cfg.graph, solver: cfg.solver };
    let bases = [Base::Gl(pipeline), Base::Knn(cfg.curves.knn_k)];
    let needs_all = cfg.defense.variants.contains(&DefenseKind::AtAll);
    let needs_prune = cfg.defense.variants.contains(&DefenseKind::Prune);
    for base in &bases {
        let mut bank_kinds: Vec<AttackKind> = kinds.clone();
        if needs_all {
            bank_kinds = AttackKind::ALL.to_vec();
        }
        if needs_prune && !bank_kinds.contains(&cfg.defense.selection_attack) {
            bank_kinds.push(cfg.defense.selection_attack);
        }
        let bank = AttackBank::build(&bank_kinds, &train, &splits.train, base, &cfg.attacks, seed)?;
        let clean_u = base.evaluate(&train, &splits.test, &mut log)?.query_u;
        for &r in r_grid {
            // Training sets of the defended variants at this budget.
            let aug_r = cfg.defense.augmentation_budget.unwrap_or(r);
            let mut variants: Vec<(DefenseKind, Dataset)> = Vec::new();
            for &d in &cfg.defense.variants {
                let set = match d {
                    DefenseKind::None => train.clone(),
                    DefenseKind::AtSingle => {
                        augment_adversarial(&train, &[bank.spec(AttackKind::Direct, aug_r)?])?.dataset
                    }
                    DefenseKind::AtAll => {
                        let specs: Vec<AttackSpec> =
                            AttackKind::ALL.iter().map(|&k| bank.spec(k, aug_r)).collect::<Result<_>>()?;
                        augment_adversarial(&train, &specs)?.dataset
                    }
                    DefenseKind::Prune => {
                        let val = splits.validation.as_ref().ok_or_else(|| GlError::Config("pruning needs a validation split".into()))?;
                        let vq = bank.perturb(cfg.defense.selection_attack, r, val, &train, &mut log)?;
                        let mut vlog = InvariantLog::default();
                        let mut score = |p: &Dataset| Ok(base.evaluate(p, &vq, &mut vlog)?.accuracy);
                        let a = select_separation(&train, &cfg.defense.a_grid, &mut score)?;
                        log.merge(vlog);
                        robust_prune(&train, a)?
                    }
                };
                variants.push((d, set));
            }
            for &kind in kinds {
                let t0 = Instant::now();
                let q = bank.perturb(kind, r, &splits.test, &train, &mut log)?;
                for (d, set) in &variants {
                    let cell = base.evaluate(set, &q, &mut log)?;
                    let dev = match (&cell.query_u, &clean_u, d) {
                        (Some(u), Some(c), DefenseKind::None) => Some(sup_diff(u, c)),
                        _ => None,
                    };
                    recs.push(RunRecord {
                        classifier: variant_name(base, *d).into(),
                        attack: kind.to_string(),
                        r,
                        accuracy: cell.accuracy,
                        u_deviation: dev,
                        solver_iterations: cell.iterations,
                        wall_time_s: t0.elapsed().as_secs_f64(),
                        peak_bytes: peak_bytes(),
                        ..base_record(cfg, hash, m, seed)
                    });
                }
            }
        }
    }
    Ok((recs, log))
}

fn summarize_curves(cfg: &ExperimentConfig, hash: &str, records: &[RunRecord]) -> Vec<CurveRow> {
    let mut keys: Vec<(usize, String, String, u64)> = Vec::new();
    for r in records {
        let key = (r.labeled, r.attack.clone(), r.classifier.clone(), r.r.to_bits());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.iter()
        .map(|(m, attack, classifier, rb)| {
            let r = f64::from_bits(*rb);
            let accs: Vec<f64> = records
                .iter()
                .filter(|x| x.labeled == *m && &x.attack == attack && &x.classifier == classifier && x.r == r)
                .map(|x| x.accuracy)
                .collect();
            CurveRow {
                config_hash: hash.into(),
                dataset: dataset_name(&cfg.dataset).into(),
                labeled: *m,
                attack: attack.clone(),
                classifier: classifier.clone(),
                r,
                mean: stats::mean(&accs),
                std: stats::std(&accs),
                n_seeds: accs.len(),
            }
        })
        .collect()
}

/// Robust-accuracy curves of the GL and kNN families over the budget grid.
pub fn run_robust_curves(cfg: &ExperimentConfig) -> Result<CurvesOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    let per_seed: Vec<(Vec<RunRecord>, InvariantLog)> = cfg
        .seeds
        .par_iter()
        .map(|&s| curves_seed(cfg, &hash, s, None, &cfg.attacks.r_grid))
        .collect::<Result<_>>()?;
    let mut out = CurvesOutput { records: Vec::new(), curves: Vec::new(), invariants: InvariantLog::default() };
    for (recs, log) in per_seed {
        out.records.extend(recs);
        out.invariants.merge(log);
    }
    out.curves = summarize_curves(cfg, &hash, &out.records);
    Ok(out)
}

// ---------------------------------------------------------------- label sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub config_hash: String,
    pub dataset: String,
    pub classifier: String,
    pub attack: String,
    pub r: f64,
    /// Spearman correlation of seed-mean accuracy against the labeled count;
    /// empty when undefined.
    pub spearman: Option<f64>,
    pub n_sizes: usize,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub records: Vec<RunRecord>,
    pub curves: Vec<CurveRow>,
    pub trends: Vec<TrendRow>,
    pub invariants: InvariantLog,
}

/// Robust accuracy across labeled-set sizes at fixed budgets, with trend
/// statistics per classifier.
pub fn run_label_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    let sizes = &cfg.curves.labeled_counts;
    if sizes.is_empty() {
        return Err(GlError::Config("curves.labeled_counts must be nonempty".into()));
    }
    let jobs: Vec<(usize, u64)> = sizes.iter().flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    let per_job: Vec<(Vec<RunRecord>, InvariantLog)> = jobs
        .par_iter()
        .map(|&(m, s)| curves_seed(cfg, &hash, s, Some(m), &cfg.curves.r_values))
        .collect::<Result<_>>()?;
    let mut out = SweepOutput { records: Vec::new(), curves: Vec::new(), trends: Vec::new(), invariants: InvariantLog::default() };
    for (recs, log) in per_job {
        out.records.extend(recs);
        out.invariants.merge(log);
    }
    out.curves = summarize_curves(cfg, &hash, &out.records);
    let mut keys: Vec<(String, String, u64)> = Vec::new();
    for c in &out.curves {
        let k = (c.classifier.clone(), c.attack.clone(), c.r.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (classifier, attack, rb) in keys {
        let pts: Vec<(f64, f64)> = out
            .curves
            .iter()
            .filter(|c| c.classifier == classifier && c.attack == attack && c.r.to_bits() == rb)
            .map(|c| (c.labeled as f64, c.mean))
            .collect();
        let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
        out.trends.push(TrendRow {
            config_hash: hash.clone(),
            dataset: dataset_name(&cfg.dataset).into(),
            classifier,
            attack,
            r: f64::from_bits(rb),
            spearman: stats::spearman(&x, &y),
            n_sizes: pts.len(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- timing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub config_hash: String,
    pub dataset: String,
    pub classifier: String,
    pub k: usize,
    pub n_nodes: usize,
    /// Median over repeats.
    pub wall_time_s: f64,
    /// Allocator high-water mark during the measured call (0 without a probe).
    pub peak_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct TimingOutput {
    pub rows: Vec<TimingRow>,
    pub gl_nondecreasing_in_k: bool,
    pub knn_not_slower_than_gl: bool,
    pub invariants: InvariantLog,
}

/// Wall time and peak memory of kNN classification and the GL solve (graph
/// construction included) for each k. Runs sequentially.
pub fn run_timing(cfg: &ExperimentConfig) -> Result<TimingOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    let splits = load_splits(&cfg.dataset, cfg.dataset.data_seed)?;
    let train = splits.train.all_labeled();
    let combined = Pipeline::combine(&train, &splits.test)?;
    let mut rows = Vec::new();
    let mut log = InvariantLog::default();
    let reps = cfg.timing.repeats.max(1);
    for &k in &cfg.timing.ks {
        let pipeline = Pipeline { graph: cfg.graph.with_k(k), solver: cfg.solver };
        let measure = |gl: bool, log: &mut InvariantLog| -> Result<(f64, u64)> {
            let mut times = Vec::with_capacity(reps);
            let mut peak = 0;
            for _ in 0..reps {
                reset_peak();
                let t0 = Instant::now();
                if gl {
                    let sol = pipeline.solve(&combined)?;
                    times.push(t0.elapsed().as_secs_f64());
                    log.check_solution(&sol, &combined, &pipeline.solver, "timing solve");
                } else {
                    let pred = knn_classify(&train, splits.test.points(), k)?;
                    times.push(t0.elapsed().as_secs_f64());
                    std::hint::black_box(pred);
                }
                peak = peak.max(peak_bytes());
            }
            Ok((stats::median(&times), peak))
        };
        for (gl, name) in [(false, "kNN"), (true, "GL")] {
            let (t, p) = measure(gl, &mut log)?;
            rows.push(TimingRow {
                config_hash: hash.clone(),
                dataset: dataset_name(&cfg.dataset).into(),
                classifier: name.into(),
                k,
                n_nodes: combined.len(),
                wall_time_s: t,
                peak_bytes: p,
            });
        }
    }
    let time = |name: &str, k: usize| rows.iter().find(|r| r.classifier == name && r.k == k).map_or(0.0, |r| r.wall_time_s);
    let mut ks = cfg.timing.ks.clone();
    ks.sort_unstable();
    let gl_nondecreasing_in_k = ks.windows(2).all(|w| time("GL", w[0]) <= time("GL", w[1]));
    let knn_not_slower_than_gl = ks.iter().all(|&k| time("kNN", k) <= time("GL", k));
    Ok(TimingOutput { rows, gl_nondecreasing_in_k, knn_not_slower_than_gl, invariants: log })
}

// ---------------------------------------------------------------- outputs

fn attack_title(a: &str) -> String {
    match AttackKind::parse(a) {
        Ok(AttackKind::Direct) => "WB-DA".into(),
        Ok(AttackKind::Ksa) => "KSA".into(),
        Ok(AttackKind::BbLr) => "BB-LR".into(),
        Ok(AttackKind::BbNn) => "BB-NN".into(),
        Ok(AttackKind::BbKernel) => "BB-Kernel".into(),
        Err(_) => a.into(),
    }
}

/// One CSV and one SVG per attack (and labeled count when several).
pub fn write_curve_files(dir: &Path, prefix: &str, x_is_labeled: bool, curves: &[CurveRow]) -> Result<()> {
    let mut attacks: Vec<&str> = Vec::new();
    for c in curves {
        if !attacks.contains(&c.attack.as_str()) {
            attacks.push(&c.attack);
        }
    }
    for attack in attacks {
        let rows: Vec<CurveRow> = curves.iter().filter(|c| c.attack == attack).cloned().collect();
        let ds = rows.first().map_or(String::new(), |r| r.dataset.clone());
        write_rows(dir.join(format!("{prefix}_{ds}_{attack}.csv")), &rows)?;
        let mut series: Vec<Series> = Vec::new();
        for c in &rows {
            let name = if x_is_labeled { format!("{} r={}", c.classifier, c.r) } else { c.classifier.clone() };
            let x = if x_is_labeled { c.labeled as f64 } else { c.r };
            match series.iter_mut().find(|s| s.name == name) {
                Some(s) => s.points.push((x, c.mean)),
                None => series.push(Series { name, points: vec![(x, c.mean)] }),
            }
        }
        for s in &mut series {
            s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        let (title, xl) = if x_is_labeled {
            (format!("{ds}: {} vs labeled count", attack_title(attack)), "N - M")
        } else {
            (format!("{ds}: {}", attack_title(attack)), "r")
        };
        fs::write(dir.join(format!("{prefix}_{ds}_{attack}.svg")), line_plot_svg(&title, xl, "accuracy", &series))?;
    }
    Ok(())
}

/// Runs the configured mode and writes its artifacts into `dir`. Returns the
/// merged invariant log; calibration failures still write their report.
pub fn run_and_write(cfg: &ExperimentConfig, dir: &Path) -> Result<InvariantLog> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    match cfg.mode {
        Mode::Certify => {
            let mut save = |rep: &CalibrationReport| {
                rep.save(dir.join(format!("calibration_{}_subset{}.toml", rep.dataset, rep.n_labeled)))
            };
            let out = run_certify_experiment_with(cfg, &mut save)?;
            write_records(dir, "certify_runs", &out.records)?;
            write_rows(dir.join("certify_table.csv"), &out.table)?;
            fs::write(dir.join("certify_table.md"), certify_markdown(&out))?;
            Ok(out.invariants)
        }
        Mode::RobustCurve => {
            let out = run_robust_curves(cfg)?;
            write_records(dir, "curves_runs", &out.records)?;
            write_curve_files(dir, "curves", false, &out.curves)?;
            Ok(out.invariants)
        }
        Mode::LabelSweep => {
            let out = run_label_sweep(cfg)?;
            write_records(dir, "sweep_runs", &out.records)?;
            write_curve_files(dir, "sweep", true, &out.curves)?;
            write_rows(dir.join("sweep_trends.csv"), &out.trends)?;
            Ok(out.invariants)
        }
        Mode::Timing => {
            let out = run_timing(cfg)?;
            write_rows(dir.join("timing.csv"), &out.rows)?;
            fs::write(
                dir.join("timing_ordering.txt"),
                format!(
                    "gl_nondecreasing_in_k = {}\nknn_not_slower_than_gl = {}\n",
                    out.gl_nondecreasing_in_k, out.knn_not_slower_than_gl
                ),
            )?;
            Ok(out.invariants)
        }
    }
}
