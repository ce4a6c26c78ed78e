//! Experiment configuration (TOML) and its content hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackKind, DirectionSign};
use crate::certify::{CalibrationGrid, Constants};
use crate::defend::DefenseKind;
use crate::error::{GlError, Result};
use crate::graph::KnnWeights;
use crate::pipeline::GraphSpec;
use crate::solve::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Certify,
    RobustCurve,
    LabelSweep,
    Timing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Halfmoon,
    Abalone,
    Mnist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_test: usize,
    pub n_validation: usize,
    /// Halfmoon noise standard deviation.
    pub noise: f64,
    pub data_seed: u64,
    /// Regenerate the data from each run seed instead of `data_seed`.
    pub vary_with_seed: bool,
    /// Abalone CSV.
    pub path: Option<PathBuf>,
    pub has_header: bool,
    /// Abalone: drop the categorical column instead of one-hot encoding it.
    pub drop_sex: bool,
    /// MNIST IDX files.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Halfmoon,
            n_train: 2000,
            n_test: 1000,
            n_validation: 1000,
            noise: 0.2,
            data_seed: 7,
            vary_with_seed: false,
            path: None,
            has_header: false,
            drop_sex: false,
            images: None,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kinds: Vec<AttackKind>,
    pub r_grid: Vec<f64>,
    pub direction_sign: DirectionSign,
    /// Points drawn from the training set to seed substitute training.
    pub substitute_pool: usize,
    pub substitute_rounds: usize,
    pub substitute_step: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kinds: AttackKind::ALL.to_vec(),
            r_grid: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            direction_sign: DirectionSign::AwayFromOpponent,
            substitute_pool: 100,
            substitute_rounds: 3,
            substitute_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyConfig {
    pub labeled_counts: Vec<usize>,
    /// Budgets evenly spaced on `[0, r_max]`.
    pub budgets: usize,
    pub subset_fraction: f64,
    pub calibration_seeds: Vec<u64>,
    pub grid: CalibrationGrid,
    /// Skip calibration and use these constants.
    pub constants: Option<Constants>,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            labeled_counts: vec![400, 800, 1200, 1600, 2000],
            budgets: 20,
            subset_fraction: 0.2,
            calibration_seeds: vec![1000, 1001, 1002],
            grid: CalibrationGrid {
                c_small: vec![0.02, 0.04, 0.1, 0.2, 0.3, 0.5, 1.0],
                c_big: vec![0.4, 0.6, 0.83, 1.0, 1.62],
            },
            constants: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    pub variants: Vec<DefenseKind>,
    /// Budget for crafting training adversarials; `None` uses the evaluated r.
    pub augmentation_budget: Option<f64>,
    pub a_grid: Vec<f64>,
    /// Attack used to score separations on the validation split.
    pub selection_attack: AttackKind,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            variants: vec![DefenseKind::None, DefenseKind::AtSingle, DefenseKind::AtAll, DefenseKind::Prune],
            augmentation_budget: None,
            a_grid: vec![0.05, 0.1, 0.2, 0.4],
            selection_attack: AttackKind::Ksa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurvesConfig {
    /// Neighbour count of the kNN family.
    pub knn_k: usize,
    /// Training-set size for the label sweep (`labeled_counts` x `r_values`).
    pub labeled_counts: Vec<usize>,
    pub r_values: Vec<f64>,
}

impl Default for CurvesConfig {
    fn default() -> Self {
        Self { knn_k: 1, labeled_counts: vec![100, 200, 300, 400, 500], r_values: vec![0.01, 0.02, 0.04] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingConfig {
    pub ks: Vec<usize>,
    pub repeats: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self { ks: vec![5, 10, 15, 20], repeats: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub outputs: Option<PathBuf>,
    #[serde(default = "default_graph")]
    pub graph: GraphSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub attacks: AttackConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
    #[serde(default)]
    pub curves: CurvesConfig,
    #[serde(default)]
    pub timing: TimingConfig,
}

fn default_graph() -> GraphSpec {
    GraphSpec::Knn { k: 10, weights: KnnWeights::self_tuning() }
}

fn cfg_err(msg: impl Into<String>) -> GlError {
    GlError::Config(msg.into())
}

fn ascending(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}

impl ExperimentConfig {
    pub fn new(mode: Mode, seeds: Vec<u64>) -> Self {
        Self {
            mode,
            seeds,
            outputs: None,
            graph: default_graph(),
            solver: SolverConfig::default(),
            dataset: DatasetConfig::default(),
            attacks: AttackConfig::default(),
            defense: DefenseConfig::default(),
            certify: CertifyConfig::default(),
            curves: CurvesConfig::default(),
            timing: TimingConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds must be nonempty"));
        }
        let r = &self.attacks.r_grid;
        if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !ascending(r) {
            return Err(cfg_err("attacks.r_grid must be finite, non-negative and sorted ascending"));
        }
        if !ascending(&self.curves.r_values) {
            return Err(cfg_err("curves.r_values must be sorted ascending"));
        }
        if self.attacks.kinds.is_empty() && self.mode != Mode::Timing {
            return Err(cfg_err("attacks.kinds must be nonempty"));
        }
        if self.attacks.substitute_rounds == 0 || self.attacks.substitute_pool == 0 {
            return Err(cfg_err("substitute_pool and substitute_rounds must be positive"));
        }
        if self.curves.knn_k == 0 {
            return Err(cfg_err("curves.knn_k must be positive"));
        }
        if self.dataset.n_train == 0 || self.dataset.n_test == 0 {
            return Err(cfg_err("dataset sizes must be positive"));
        }
        let c = &self.certify;
        if self.mode == Mode::Certify {
            if c.labeled_counts.is_empty() || c.budgets < 2 {
                return Err(cfg_err("certify needs labeled_counts and at least 2 budgets"));
            }
            if !(c.subset_fraction > 0.0 && c.subset_fraction <= 1.0) {
                return Err(cfg_err("certify.subset_fraction must lie in (0, 1]"));
            }
            if c.constants.is_none() && (c.calibration_seeds.is_empty() || c.grid.c_small.is_empty() || c.grid.c_big.is_empty()) {
                return Err(cfg_err("calibration needs seeds and a nonempty grid"));
            }
            if self.dataset.n_validation == 0 {
                return Err(cfg_err("certify needs a validation split"));
            }
        }
        if self.mode == Mode::RobustCurve && self.defense.variants.contains(&DefenseKind::Prune) {
            if self.defense.a_grid.is_empty() || self.dataset.n_validation == 0 {
                return Err(cfg_err("pruning needs a_grid and a validation split"));
            }
        }
        if self.mode == Mode::Timing && self.timing.ks.is_empty() {
            return Err(cfg_err("timing.ks must be nonempty"));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?;
        Self::from_toml(&text)
    }

    /// First 16 hex digits of SHA-256 over the canonical TOML form (output
    /// directory excluded).
    pub fn hash(&self) -> String {
        let canon = Self { outputs: None, ..self.clone() };
        let text = canon.to_toml().unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash() {
        let cfg = ExperimentConfig::new(Mode::Certify, vec![1, 2]);
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
        let other = ExperimentConfig { seeds: vec![1, 3], ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
        let moved = ExperimentConfig { outputs: Some("x".into()), ..cfg.clone() };
        assert_eq!(moved.hash(), cfg.hash());
    }

    #[test]
    fn minimal_file() {
        let cfg = ExperimentConfig::from_toml("mode = \"robust_curve\"\nseeds = [0]\n[curves]\nknn_k = 3\n").unwrap();
        assert_eq!(cfg.curves.knn_k, 3);
        assert_eq!(cfg.attacks.kinds.len(), 5);
    }

    #[test]
    fn validation_errors() {
        assert!(ExperimentConfig::from_toml("mode = \"certify\"\nseeds = []\n").is_err());
        let mut cfg = ExperimentConfig::new(Mode::RobustCurve, vec![0]);
        cfg.attacks.r_grid = vec![0.2, 0.1];
        assert!(cfg.validate().is_err());
    }
}
