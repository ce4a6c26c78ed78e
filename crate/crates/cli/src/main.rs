use std::alloc::{GlobalAlloc, Layout, System};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use glcert::attack::{run_attack, AttackKind};
use glcert::config::{ExperimentConfig, Mode};
use glcert::defend::{robust_prune, select_separation, AugmentedDataset, Provenance};
use glcert::experiment::{self, load_splits, AttackBank, Base, InvariantLog};
use glcert::pipeline::Pipeline;

/// Counts live heap bytes and their high-water mark.
struct CountingAlloc;

static LIVE: AtomicU64 = AtomicU64::new(0);
static PEAK: AtomicU64 = AtomicU64::new(0);

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size() as u64, Ordering::Relaxed) + layout.size() as u64;
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size() as u64, Ordering::Relaxed);
    }
}

#[global_allocator]
static GLOBAL: CountingAlloc = CountingAlloc;

fn peak() -> u64 {
    PEAK.load(Ordering::Relaxed)
}

fn reset() {
    PEAK.store(LIVE.load(Ordering::Relaxed), Ordering::Relaxed);
}

#[derive(Parser)]
#[command(name = "glcert", version, about = "Graph Laplacian classification with certified adversarial robustness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the configured dataset splits as CSV.
    GenData(Common),
    /// Certification table: calibrated (k, r) and accuracies under all attacks.
    Certify(Common),
    /// Robust accuracy of the GL and kNN families over the budget grid.
    Curves(Common),
    /// Robust accuracy across labeled-set sizes.
    LabelSweep(Common),
    /// Wall time and peak memory of kNN and GL.
    Timing(Common),
    /// a-separated pruning of the training split.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Separation; selected on the validation split when omitted.
        #[arg(long)]
        a: Option<f64>,
    },
    /// Attack the test split and write the perturbed points.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "direct")]
        kind: String,
        #[arg(long)]
        r: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common, mode: Mode) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let mut value: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            value.insert("mode".into(), toml::Value::try_from(mode)?);
            ExperimentConfig::from_toml(&toml::to_string(&value)?)?
        }
        None => ExperimentConfig::new(mode, (0..20).collect()),
    };
    cfg.mode = mode;
    cfg.outputs = Some(common.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn report(log: &InvariantLog) -> ExitCode {
    if log.ok() {
        eprintln!("{} invariant checks passed", log.checks);
        ExitCode::SUCCESS
    } else {
        for v in &log.violations {
            eprintln!("invariant violated: {v}");
        }
        eprintln!("{} of {} invariant checks failed", log.violations.len(), log.checks);
        ExitCode::from(2)
    }
}

fn run_mode(common: &Common, mode: Mode) -> Result<ExitCode> {
    let cfg = load_config(common, mode)?;
    let log = experiment::with_thread_pool(|| experiment::run_and_write(&cfg, &common.out))??;
    eprintln!("wrote {}", common.out.display());
    Ok(report(&log))
}

fn gen_data(common: &Common) -> Result<ExitCode> {
    let cfg = load_config(common, Mode::RobustCurve)?;
    let splits = load_splits(&cfg.dataset, cfg.dataset.data_seed)?;
    fs::create_dir_all(&common.out)?;
    splits.train.write_csv(common.out.join("train.csv"))?;
    splits.test.write_csv(common.out.join("test.csv"))?;
    if let Some(v) = &splits.validation {
        v.write_csv(common.out.join("validation.csv"))?;
    }
    eprintln!("wrote {} train / {} test points to {}", splits.train.len(), splits.test.len(), common.out.display());
    Ok(ExitCode::SUCCESS)
}

fn prune(common: &Common, a: Option<f64>) -> Result<ExitCode> {
    let cfg = load_config(common, Mode::RobustCurve)?;
    let splits = load_splits(&cfg.dataset, cfg.dataset.data_seed)?;
    let train = splits.train.all_labeled();
    let a = match a {
        Some(a) => a,
        None => {
            let Some(val) = &splits.validation else { bail!("selecting a needs a validation split") };
            let base = Base::Gl(Pipeline { graph: cfg.graph, solver: cfg.solver });
            let seed = cfg.seeds[0];
            let kinds = [cfg.defense.selection_attack];
            let bank = AttackBank::build(&kinds, &train, &splits.train, &base, &cfg.attacks, seed)?;
            let r = cfg.attacks.r_grid.last().copied().unwrap_or(0.0);
            let mut log = InvariantLog::default();
            let vq = bank.perturb(cfg.defense.selection_attack, r, val, &train, &mut log)?;
            let mut score = |p: &glcert::data::Dataset| Ok(base.evaluate(p, &vq, &mut log)?.accuracy);
            select_separation(&train, &cfg.defense.a_grid, &mut score)?
        }
    };
    let pruned = robust_prune(&train, a)?;
    fs::create_dir_all(&common.out)?;
    let out = AugmentedDataset { provenance: vec![Provenance::Original; pruned.len()], dataset: pruned };
    fs::write(common.out.join("pruned.csv"), out.to_csv_string())?;
    eprintln!("a = {a}: kept {} of {} points", out.dataset.len(), train.len());
    Ok(ExitCode::SUCCESS)
}

fn attack(common: &Common, kind: &str, r: f64, seed: u64) -> Result<ExitCode> {
    let cfg = load_config(common, Mode::RobustCurve)?;
    let kind = AttackKind::parse(kind)?;
    let splits = load_splits(&cfg.dataset, cfg.dataset.data_seed)?;
    let train = splits.train.all_labeled();
    let base = Base::Gl(Pipeline { graph: cfg.graph, solver: cfg.solver });
    let bank = AttackBank::build(&[kind], &train, &splits.train, &base, &cfg.attacks, seed)?;
    let pert = run_attack(&bank.spec(kind, r)?, &splits.test.all_unlabeled(), &train)?;
    fs::create_dir_all(&common.out)?;
    let path: &Path = &common.out.join(format!("attack_{kind}.csv"));
    fs::write(path, pert.to_csv_string())?;
    let mut log = InvariantLog { checks: 1, ..Default::default() };
    if let Err(e) = pert.verify() {
        log.violations.push(e.to_string());
    }
    let clean = base.evaluate(&train, &splits.test, &mut log)?.accuracy;
    let attacked = base.evaluate(&train, &pert.perturbed, &mut log)?.accuracy;
    println!("GL accuracy clean {clean:.4}, under {kind} at r = {r}: {attacked:.4}");
    Ok(report(&log))
}

fn main() -> ExitCode {
    experiment::set_memory_probe(peak, reset);
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::GenData(c) => gen_data(c),
        Cmd::Certify(c) => run_mode(c, Mode::Certify),
        Cmd::Curves(c) => run_mode(c, Mode::RobustCurve),
        Cmd::LabelSweep(c) => run_mode(c, Mode::LabelSweep),
        Cmd::Timing(c) => run_mode(c, Mode::Timing),
        Cmd::Prune { common, a } => prune(common, *a),
        Cmd::Attack { common, kind, r, seed } => attack(common, kind, *r, *seed),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
