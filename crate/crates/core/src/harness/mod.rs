//! Configuration ingestion, experiment dispatch and result persistence.
//!
//! [`run`] validates a configuration, computes everything in memory and
//! only then writes the output directory, so a failed run leaves no files.

mod checks;
mod config;
mod experiments;
mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use checks::{constitutive_suite, sample_saturations, PropertyCheck};
pub use config::{
    matrix_initial, resolve_psi, validate, validate_config, BlockAsymptoticsConfig, BoundaryConfig, CellPermConfig,
    ConstitutiveCheckConfig, DeltaSweepConfig, EdgeConfig, ExperimentConfig, ExperimentKind, GridConfig,
    InitialConfig, KernelCheckConfig, LawKind, LevelConfig, ModelConfig, OutputConfig, PsiPolicy, PsiRule,
    RockConfig, RocksConfig, SubgridCompareConfig, TagConfig, TimeConfig,
};
pub use experiments::{build_model, equilibrium_drift, CONTINUITY_LAGS};
pub use output::{csv, num, snapshot_csv, snapshot_name, timeseries_csv, write_atomic, OutputSet};

/// Pass/fail of one acceptance criterion and the metric it is judged by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub metric: String,
    pub value: f64,
    pub threshold: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: ExperimentKind,
    /// SHA-256 of the canonical JSON form of the configuration, output
    /// directory excluded.
    pub input_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub criteria: BTreeMap<String, CriterionResult>,
    pub wall_clock_seconds: f64,
    pub details: serde_json::Value,
}

impl MetricsRecord {
    pub fn all_passed(&self) -> bool {
        self.criteria.values().all(|c| c.passed)
    }
}

/// Results of [`run`] before they are written.
#[derive(Debug)]
pub struct RunOutput {
    pub record: MetricsRecord,
    pub files: OutputSet,
}

fn canonical(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let mut c = cfg.clone();
    c.output = None;
    c.workers = None;
    // serde_json maps are ordered by key
    Ok(serde_json::to_value(&c)?)
}

pub fn input_hash(cfg: &ExperimentConfig) -> Result<String> {
    let text = serde_json::to_string(&canonical(cfg)?)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

fn dispatch(cfg: &ExperimentConfig) -> Result<experiments::Outcome> {
    use experiments::*;
    let out = match cfg.experiment {
        ExperimentKind::Simulate => run_simulate(cfg),
        ExperimentKind::CellPerm => run_cell_perm(cfg),
        ExperimentKind::BlockAsymptotics => run_block_asymptotics(cfg),
        ExperimentKind::KernelCheck => run_kernel_check(cfg),
        ExperimentKind::DeltaSweep => run_delta_sweep(cfg),
        ExperimentKind::SubgridCompare => run_subgrid_compare(cfg),
        ExperimentKind::ConstitutiveCheck => run_constitutive_check(cfg),
    };
    out.map_err(|e| e.context(cfg.experiment.name()))
}

/// Validates `cfg` and runs its experiment without touching the disk.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput> {
    validate(cfg)?;
    let start = Instant::now();
    let outcome = match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(|| dispatch(cfg))?,
        None => dispatch(cfg)?,
    };
    let record = MetricsRecord {
        experiment: cfg.experiment,
        input_hash: input_hash(cfg)?,
        metrics: outcome.metrics,
        criteria: outcome.criteria,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        details: serde_json::Value::Object(outcome.details),
    };
    info!(
        "{} finished in {:.2} s; criteria {}",
        cfg.experiment,
        record.wall_clock_seconds,
        if record.all_passed() { "passed" } else { "FAILED" }
    );
    Ok(RunOutput {
        record,
        files: outcome.files,
    })
}

/// Runs the experiment and writes its files, `inputs.json` and
/// `metrics.json` below the configured output directory, if any.
pub fn run(cfg: &ExperimentConfig) -> Result<MetricsRecord> {
    let result = execute(cfg)?;
    if let Some(dir) = &cfg.output {
        write_outputs(dir, cfg, &result)?;
    }
    Ok(result.record)
}

pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, result: &RunOutput) -> Result<Vec<PathBuf>> {
    result.files.write_all(dir)?;
    let inputs = serde_json::to_string_pretty(&canonical(cfg)?)?;
    write_atomic(&dir.join("inputs.json"), inputs.as_bytes())?;
    let metrics = serde_json::to_string_pretty(&result.record)?;
    write_atomic(&dir.join("metrics.json"), metrics.as_bytes())?;
    let mut written: Vec<PathBuf> = result.files.paths().map(|p| dir.join(p)).collect();
    written.push(dir.join("inputs.json"));
    written.push(dir.join("metrics.json"));
    Ok(written)
}
