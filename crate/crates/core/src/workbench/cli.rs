//! The `semlab` command line. Arguments are checked against the resolved
//! configuration before anything is written.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use super::config::RunConfig;
use super::dataset::{gen_dataset, SyntheticDataset};
use super::emit::{read_curves_csv, write_aca_csv, write_curves_csv, write_overlays};
use super::store::{load_collection, save_collection, StoredCollection};
use super::{write_atomic, WorkbenchError};
use crate::attacks::AttackMethod;
use crate::ensemble::build_collection;
use crate::evaluation::{
    ablation_run, asr_at_epsilon, build_curve, AblationMode, AsrEstimate, Curve, CurveJob,
};
use crate::threat::{build_scenario, AttackFamily, ScenarioId, ScenarioSpec};

#[derive(Debug, Parser)]
#[command(name = "semlab", version, about = "Train model collections and measure attack success against them")]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Collection directory (default: `<out>/collection`).
    #[arg(long, global = true)]
    pub collection: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and grade the model collection, then store it.
    TrainCollection,
    /// Write and print the stored collection's accuracy table.
    AcaTable,
    /// Attack success rate at one budget.
    Attack(AttackArgs),
    /// ASR-vs-distortion curves for scenarios x attacks.
    Curve(CurveArgs),
    /// Attacker-A curves with a modified collection.
    Ablation(AblationArgs),
    /// Redraw overlays from curve CSV files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Scenario id, A-M
    #[arg(long)]
    pub scenario: ScenarioId,
    /// fgsm, bim, mim, pgd, nes or spsa
    #[arg(long)]
    pub attack: AttackMethod,
    /// Perturbation budget in the configured norm
    #[arg(long)]
    pub epsilon: f64,
    /// Aim at class (y + 1) mod C instead of any misclassification
    #[arg(long)]
    pub targeted: bool,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    /// Comma-separated scenario ids, A-M
    #[arg(long, value_delimiter = ',', required = true)]
    pub scenario: Vec<ScenarioId>,
    /// Comma-separated attacks: fgsm, bim, mim, pgd, nes, spsa
    #[arg(long, value_delimiter = ',', required = true)]
    pub attack: Vec<AttackMethod>,
    /// Aim at class (y + 1) mod C
    #[arg(long, conflicts_with = "untargeted")]
    pub targeted: bool,
    /// The default; accepted for symmetry.
    #[arg(long)]
    pub untargeted: bool,
    /// Stem of the output files.
    #[arg(long, default_value = "curve")]
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    QuantityHigh,
    Homogeneous,
    Both,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub mode: AblationArg,
    #[arg(long, default_value = "bim")]
    pub attack: AttackMethod,
    #[arg(long)]
    pub targeted: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Comma-separated curve CSV files
    #[arg(long, value_delimiter = ',', required = true)]
    pub csv: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub name: String,
}

#[derive(Debug, Serialize)]
struct AttackSummary<'a> {
    scenario: ScenarioId,
    attack: AttackMethod,
    targeted: bool,
    epsilon: f64,
    seed: u64,
    #[serde(flatten)]
    estimate: &'a AsrEstimate,
}

struct Resolved {
    cfg: RunConfig,
    out: PathBuf,
    collection_dir: PathBuf,
}

fn resolve(cli: &Cli) -> Result<Resolved, WorkbenchError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    let out = cfg.output_dir.clone();
    let collection_dir = cli.collection.clone().unwrap_or_else(|| out.join("collection"));
    Ok(Resolved {
        cfg,
        out,
        collection_dir,
    })
}

fn check_pair(cfg: &RunConfig, s: ScenarioId, m: AttackMethod, epsilon: f64, targeted: bool) -> Result<(), WorkbenchError> {
    let white = ScenarioSpec::of(s).attack_family == AttackFamily::WhiteTransfer;
    if white == m.is_black_box() {
        let need = if white { "a gradient attack" } else { "a score-based attack (nes, spsa)" };
        return Err(WorkbenchError::Config(format!("scenario {s} needs {need}, got {m}")));
    }
    let mut c = cfg.attack_config(m).with_epsilon(epsilon);
    c.targeted = targeted;
    c.validate().map_err(|e| WorkbenchError::Config(e.to_string()))
}

fn validate_args(cli: &Cli, cfg: &RunConfig) -> Result<(), WorkbenchError> {
    match &cli.command {
        Command::Attack(a) => check_pair(cfg, a.scenario, a.attack, a.epsilon, a.targeted),
        Command::Curve(c) => {
            if c.name.is_empty() || c.name.contains(['/', '\\']) {
                return Err(WorkbenchError::Config(format!("bad --name {:?}", c.name)));
            }
            for &s in &c.scenario {
                for &m in &c.attack {
                    check_pair(cfg, s, m, cfg.search.eps_max(cfg.attack.norm), c.targeted)?;
                }
            }
            Ok(())
        }
        Command::Ablation(a) => check_pair(cfg, ScenarioId::A, a.attack, cfg.search.eps_max(cfg.attack.norm), a.targeted),
        Command::Report(r) => {
            if let Some(p) = r.csv.iter().find(|p| !p.is_file()) {
                return Err(WorkbenchError::Config(format!("{} is not a file", p.display())));
            }
            Ok(())
        }
        Command::TrainCollection | Command::AcaTable => Ok(()),
    }
}

fn echo(r: &Resolved) -> Result<(), WorkbenchError> {
    let text = r.cfg.to_toml();
    eprintln!("# resolved configuration\n{text}");
    let seeds: Vec<String> = r.cfg.seeds().iter().map(|(k, v)| format!("{k}={v}")).collect();
    eprintln!("# seeds: {}", seeds.join(" "));
    write_atomic(&r.out.join("resolved_config.toml"), text.as_bytes())
}

fn dataset(cfg: &RunConfig) -> Result<SyntheticDataset, WorkbenchError> {
    gen_dataset(&cfg.dataset)
}

fn load(r: &Resolved) -> Result<StoredCollection, WorkbenchError> {
    load_collection(&r.collection_dir)
}

fn curve_job<'d>(cfg: &RunConfig, method: AttackMethod, targeted: bool, data: &'d crate::nets::LabeledSet) -> CurveJob<'d> {
    let mut template = cfg.attack_config(method);
    template.targeted = targeted;
    CurveJob {
        template,
        data,
        grid: cfg.search.default_grid(cfg.attack.norm),
        search: cfg.search,
        judge: cfg.judge(),
        seed: cfg.eval.seed,
        exec: cfg.exec,
    }
}

fn emit_curves(out: &Path, name: &str, curves: &[Curve]) -> Result<Vec<PathBuf>, WorkbenchError> {
    let csv = out.join(format!("{name}.csv"));
    write_curves_csv(&csv, curves)?;
    let mut files = vec![csv];
    files.extend(write_overlays(out, name, curves)?);
    Ok(files)
}

/// Runs one parsed command and returns the files it wrote.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>, WorkbenchError> {
    let r = resolve(cli)?;
    validate_args(cli, &r.cfg)?;
    let cfg = &r.cfg;
    if matches!(cli.command, Command::AcaTable | Command::Attack(_) | Command::Curve(_) | Command::Ablation(_))
        && !r.collection_dir.join(super::store::MANIFEST).is_file()
    {
        return Err(WorkbenchError::MissingCollection(r.collection_dir.clone()));
    }
    echo(&r)?;
    let mut files = vec![r.out.join("resolved_config.toml")];
    match &cli.command {
        Command::TrainCollection => {
            let d = dataset(cfg)?;
            let recipe = cfg.recipe();
            let (collection, table) = build_collection(&recipe, &d.train, &d.test, cfg.exec)?;
            save_collection(&r.collection_dir, &collection, &table, &recipe)?;
            let aca = r.out.join("aca_table.csv");
            write_aca_csv(&aca, &table)?;
            eprintln!(
                "stored {} entries over {} architectures in {}",
                collection.entries().len(),
                collection.arch_ids().len(),
                r.collection_dir.display()
            );
            files.push(r.collection_dir.join(super::store::MANIFEST));
            files.push(aca);
        }
        Command::AcaTable => {
            let stored = load(&r)?;
            let aca = r.out.join("aca_table.csv");
            write_aca_csv(&aca, &stored.aca_table)?;
            print!("{}", String::from_utf8_lossy(&super::emit::aca_csv(&stored.aca_table)?));
            files.push(aca);
        }
        Command::Attack(a) => {
            let stored = load(&r)?;
            let d = dataset(cfg)?;
            let data = d.test.take(cfg.eval.samples);
            let scenario = build_scenario(a.scenario, Arc::new(stored.collection), cfg.sem.clone())?;
            let mut template = cfg.attack_config(a.attack).with_epsilon(a.epsilon);
            template.targeted = a.targeted;
            let est = asr_at_epsilon(&scenario, &template, &data, &cfg.judge(), cfg.eval.seed, cfg.exec)?;
            let summary = AttackSummary {
                scenario: a.scenario,
                attack: a.attack,
                targeted: a.targeted,
                epsilon: a.epsilon,
                seed: cfg.eval.seed,
                estimate: &est,
            };
            let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
            println!("{json}");
            let mode = if a.targeted { "targeted" } else { "untargeted" };
            let path = r.out.join(format!("attack-{}-{}-{mode}.json", a.scenario, a.attack));
            write_atomic(&path, json.as_bytes())?;
            files.push(path);
        }
        Command::Curve(c) => {
            let stored = load(&r)?;
            let collection = Arc::new(stored.collection);
            let d = dataset(cfg)?;
            let data = d.test.take(cfg.eval.samples);
            let mut curves = Vec::new();
            for &s in &c.scenario {
                let scenario = build_scenario(s, collection.clone(), cfg.sem.clone())?;
                for &m in &c.attack {
                    eprintln!("curve {s} / {m}");
                    curves.push(build_curve(&scenario, &curve_job(cfg, m, c.targeted, &data))?);
                }
            }
            files.extend(emit_curves(&r.out, &c.name, &curves)?);
        }
        Command::Ablation(a) => {
            let stored = load(&r)?;
            let baseline = Arc::new(stored.collection);
            let d = dataset(cfg)?;
            let data = d.test.take(cfg.eval.samples);
            let job = curve_job(cfg, a.attack, a.targeted, &data);
            let modes: &[(AblationMode, &str)] = match a.mode {
                AblationArg::QuantityHigh => &[(AblationMode::QuantityHigh, "quantity-high")],
                AblationArg::Homogeneous => &[(AblationMode::Homogeneous, "homogeneous")],
                AblationArg::Both => &[
                    (AblationMode::QuantityHigh, "quantity-high"),
                    (AblationMode::Homogeneous, "homogeneous"),
                ],
            };
            for &(mode, tag) in modes {
                eprintln!("ablation {tag}");
                let res = ablation_run(
                    mode,
                    &cfg.ablation,
                    baseline.clone(),
                    &stored.recipe,
                    &d.train,
                    &d.test,
                    &cfg.sem,
                    &job,
                )?;
                files.extend(emit_curves(&r.out, &format!("ablation-{tag}"), &[res.baseline, res.ablated])?);
            }
        }
        Command::Report(rep) => {
            let mut curves = Vec::new();
            for p in &rep.csv {
                curves.extend(read_curves_csv(p)?);
            }
            files.extend(write_overlays(&r.out, &rep.name, &curves)?);
        }
    }
    Ok(files)
}

/// Parses `argv` (program name first) and runs it; returns the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
