use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fissure::harness::{self, ExperimentConfig, ExperimentKind, LevelConfig};

#[derive(Parser, Debug)]
#[command(name = "fissure", version, about = "Validation studies for double-porosity flow with thin fissures")]
struct Cli {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for concurrent runs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Macroscale waterflood at one model level.
    Simulate(SimulateArgs),
    /// Effective permeability sweep over fissure thickness.
    CellPerm(CellPermArgs),
    /// Laplace-domain block integrals against their thin-fissure asymptote.
    BlockAsymptotics,
    /// Analytic checks of the memory quadrature.
    KernelCheck,
    /// Limit model against rescaled delta-models.
    DeltaSweep(SweepArgs),
    /// Resolved matrix-block source against the memory-kernel source.
    SubgridCompare,
    /// Property checks of the saturation laws and transforms.
    ConstitutiveCheck(ConstitutiveArgs),
    /// Parse and validate a configuration, then print it with defaults filled.
    Validate,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Model level: `limit` or a fissure thickness.
    #[arg(long)]
    level: Option<String>,
    #[arg(long)]
    nsteps: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
}

#[derive(Args, Debug)]
struct CellPermArgs {
    #[arg(long)]
    d: Option<usize>,
    /// Comma-separated, strictly decreasing thicknesses.
    #[arg(long, value_delimiter = ',')]
    delta: Option<Vec<f64>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    kf: Option<f64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct ConstitutiveArgs {
    #[arg(long)]
    samples: Option<usize>,
}

impl Command {
    fn kind(&self) -> Option<ExperimentKind> {
        Some(match self {
            Command::Simulate(_) => ExperimentKind::Simulate,
            Command::CellPerm(_) => ExperimentKind::CellPerm,
            Command::BlockAsymptotics => ExperimentKind::BlockAsymptotics,
            Command::KernelCheck => ExperimentKind::KernelCheck,
            Command::DeltaSweep(_) => ExperimentKind::DeltaSweep,
            Command::SubgridCompare => ExperimentKind::SubgridCompare,
            Command::ConstitutiveCheck(_) => ExperimentKind::ConstitutiveCheck,
            Command::Validate => return None,
        })
    }
}

fn load(path: Option<&Path>, kind: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        let Some(kind) = kind else { bail!("validate needs --config") };
        return Ok(ExperimentConfig::reference_waterflood(kind));
    };
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
    if let (Some(kind), Some(obj)) = (kind, value.as_object_mut()) {
        if let Some(old) = obj.get("experiment").and_then(|v| v.as_str()) {
            if old != kind.name() {
                log::warn!("config names experiment `{old}`; running `{kind}`");
            }
        }
        obj.insert("experiment".into(), serde_json::Value::String(kind.name().into()));
    }
    let cfg = harness::validate_config(&value.to_string()).with_context(|| format!("config {}", path.display()))?;
    Ok(cfg)
}

fn apply_overrides(cli: &Cli, cfg: &mut ExperimentConfig) -> Result<()> {
    if let Some(out) = &cli.out {
        cfg.output = Some(out.clone());
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Simulate(a) => {
            if let Some(level) = &a.level {
                cfg.model.level = if level == "limit" {
                    LevelConfig::Limit
                } else {
                    LevelConfig::Delta(level.parse().with_context(|| format!("--level {level}"))?)
                };
            }
            if let Some(n) = a.nsteps {
                cfg.time.nsteps = n;
            }
            if let Some(dt) = a.dt {
                cfg.time.dt = dt;
            }
        }
        Command::CellPerm(a) => {
            let c = &mut cfg.cell_perm;
            if let Some(d) = a.d {
                c.d = d;
            }
            if let Some(v) = &a.delta {
                c.deltas = v.clone();
            }
            if let Some(n) = a.n {
                c.n = n;
            }
            if a.kf.is_some() {
                c.kf = a.kf;
            }
        }
        Command::DeltaSweep(a) => {
            if let Some(v) = &a.deltas {
                cfg.delta_sweep.deltas = v.clone();
            }
        }
        Command::ConstitutiveCheck(a) => {
            if let Some(n) = a.samples {
                cfg.constitutive_check.samples = n;
            }
        }
        _ => {}
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let kind = cli.command.kind();
    let mut cfg = load(cli.config.as_deref(), kind)?;
    apply_overrides(cli, &mut cfg)?;
    if kind.is_none() {
        harness::validate(&cfg)?;
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(true);
    }
    let rec = harness::run(&cfg)?;
    for (name, c) in &rec.criteria {
        println!(
            "{} {name}: {} = {:.6e} ({})",
            if c.passed { "PASS" } else { "FAIL" },
            c.metric,
            c.value,
            c.threshold
        );
    }
    if let Some(dir) = &cfg.output {
        println!("outputs in {}", dir.display());
    }
    Ok(rec.all_passed())
}
