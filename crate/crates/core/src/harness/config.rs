use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::constitutive::{
    matching_p, pc, KirchhoffTable, Medium, PowerLaw, RockParams, TwoRockSystem,
};
use crate::error::{Error, Result};
use crate::macro_solver::{EdgeTag, NewtonSettings, EDGE_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    CellPerm,
    BlockAsymptotics,
    KernelCheck,
    DeltaSweep,
    SubgridCompare,
    ConstitutiveCheck,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::Simulate,
        Self::CellPerm,
        Self::BlockAsymptotics,
        Self::KernelCheck,
        Self::DeltaSweep,
        Self::SubgridCompare,
        Self::ConstitutiveCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::CellPerm => "cell-perm",
            Self::BlockAsymptotics => "block-asymptotics",
            Self::KernelCheck => "kernel-check",
            Self::DeltaSweep => "delta-sweep",
            Self::SubgridCompare => "subgrid-compare",
            Self::ConstitutiveCheck => "constitutive-check",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LawKind {
    #[default]
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RockConfig {
    pub phi: f64,
    pub k: f64,
    pub a: f64,
    #[serde(default)]
    pub law: LawKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pc_exponent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wetting_exponent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonwetting_exponent: Option<f64>,
}

impl RockConfig {
    fn law(&self) -> Result<PowerLaw> {
        match self.law {
            LawKind::Power => PowerLaw::with_exponents(
                self.a,
                self.pc_exponent.unwrap_or(0.5),
                self.wetting_exponent.unwrap_or(2.0),
                self.nonwetting_exponent.unwrap_or(2.0),
            ),
        }
    }

    pub fn build(&self, medium: Medium) -> Result<RockParams> {
        RockParams::new(medium, self.phi, self.k, std::sync::Arc::new(self.law()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RocksConfig {
    pub fracture: RockConfig,
    pub matrix: RockConfig,
}

impl RocksConfig {
    /// Fracture `Φ = 0.4, k = 1, a = 1`; matrix `Φ = 0.2, k = 1, a = 2`.
    pub fn reference() -> Self {
        let rock = |phi, a| RockConfig {
            phi,
            k: 1.0,
            a,
            law: LawKind::Power,
            pc_exponent: None,
            wetting_exponent: None,
            nonwetting_exponent: None,
        };
        Self {
            fracture: rock(0.4, 1.0),
            matrix: rock(0.2, 2.0),
        }
    }

    pub fn build(&self) -> Result<TwoRockSystem> {
        TwoRockSystem::new(self.fracture.build(Medium::Fracture)?, self.matrix.build(Medium::Matrix)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TagConfig {
    pub left: EdgeTag,
    pub right: EdgeTag,
    pub bottom: EdgeTag,
    pub top: EdgeTag,
}

impl Default for TagConfig {
    fn default() -> Self {
        Self {
            left: EdgeTag::Injection,
            right: EdgeTag::Impermeable,
            bottom: EdgeTag::Impermeable,
            top: EdgeTag::Impermeable,
        }
    }
}

impl TagConfig {
    pub fn as_array(&self) -> [EdgeTag; 4] {
        [self.left, self.right, self.bottom, self.top]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lx: f64,
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
    pub tags: TagConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lx: 1.0,
            ly: 1.0,
            nx: 64,
            ny: 64,
            tags: TagConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub nsteps: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self { dt: 2.5e-3, nsteps: 200 }
    }
}

/// Dirichlet data for one injection edge; give at most one of
/// `theta_gamma` and `s_gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConfig {
    #[serde(default)]
    pub p_gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConfig {
    pub left: Option<EdgeConfig>,
    pub right: Option<EdgeConfig>,
    pub bottom: Option<EdgeConfig>,
    pub top: Option<EdgeConfig>,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            left: Some(EdgeConfig {
                p_gamma: 1.0,
                theta_gamma: None,
                s_gamma: Some(1.0),
            }),
            right: None,
            bottom: None,
            top: None,
        }
    }
}

impl BoundaryConfig {
    pub fn edges(&self) -> [Option<&EdgeConfig>; 4] {
        [self.left.as_ref(), self.right.as_ref(), self.bottom.as_ref(), self.top.as_ref()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    pub s_f0: f64,
    /// Defaults to `𝒫(s_f0)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_m0: Option<f64>,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self { s_f0: 0.1, s_m0: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelConfig {
    Limit,
    Delta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiRule {
    /// `α_m` at the midpoint of the expected matrix saturation excursion.
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PsiPolicy {
    Value(f64),
    Rule(PsiRule),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub level: LevelConfig,
    pub d: usize,
    /// Defaults to `2d`, the face count of the cube block.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_d: Option<f64>,
    pub psi_m: PsiPolicy,
    pub cell_resolution: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            level: LevelConfig::Limit,
            d: 2,
            sigma_d: None,
            psi_m: PsiPolicy::Rule(PsiRule::Midpoint),
            cell_resolution: 320,
        }
    }
}

impl ModelConfig {
    pub fn sigma(&self) -> f64 {
        self.sigma_d.unwrap_or(2.0 * self.d as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Snapshot interval in steps; the initial and final states are always written.
    pub snapshot_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { snapshot_every: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellPermConfig {
    pub d: usize,
    pub deltas: Vec<f64>,
    pub n: usize,
    /// Defaults to the fracture permeability.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kf: Option<f64>,
}

impl Default for CellPermConfig {
    fn default() -> Self {
        Self {
            d: 2,
            deltas: vec![0.2, 0.1, 0.05],
            n: 512,
            kf: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockAsymptoticsConfig {
    pub d: usize,
    pub deltas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Finite-difference resolution; must be divisible by four.
    pub n: usize,
    pub psi_m: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_d: Option<f64>,
    /// Resolution of the one-dimensional slab check; 0 disables it.
    pub slab_n: usize,
}

impl Default for BlockAsymptoticsConfig {
    fn default() -> Self {
        Self {
            d: 3,
            deltas: vec![0.02],
            lambdas: vec![1.0, 4.0],
            n: 64,
            psi_m: 1.0,
            sigma_d: None,
            slab_n: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelCheckConfig {
    pub dts: Vec<f64>,
}

impl Default for KernelCheckConfig {
    fn default() -> Self {
        Self {
            dts: vec![4e-3, 2e-3, 1e-3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubgridCompareConfig {
    pub d: usize,
    pub deltas: Vec<f64>,
    pub n: usize,
    pub t_end: f64,
    pub nt: usize,
    /// Linear ramp of the matching trace from `trace_start` to `trace_end`.
    pub trace_start: f64,
    pub trace_end: f64,
    pub psi_m: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_d: Option<f64>,
}

impl Default for SubgridCompareConfig {
    fn default() -> Self {
        Self {
            d: 3,
            deltas: vec![0.1, 0.05, 0.02],
            n: 32,
            t_end: 1.0,
            nt: 200,
            trace_start: 0.1,
            trace_end: 0.9,
            psi_m: 1.0,
            sigma_d: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaSweepConfig {
    pub deltas: Vec<f64>,
}

impl Default for DeltaSweepConfig {
    fn default() -> Self {
        Self {
            deltas: vec![0.2, 0.1, 0.05],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstitutiveCheckConfig {
    pub samples: usize,
}

impl Default for ConstitutiveCheckConfig {
    fn default() -> Self {
        Self { samples: 1000 }
    }
}

/// Typed experiment configuration; every section but `experiment` and
/// `rocks` has defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub rocks: RocksConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub newton: NewtonSettings,
    #[serde(default)]
    pub snapshots: OutputConfig,
    #[serde(default)]
    pub cell_perm: CellPermConfig,
    #[serde(default)]
    pub block_asymptotics: BlockAsymptoticsConfig,
    #[serde(default)]
    pub kernel_check: KernelCheckConfig,
    #[serde(default)]
    pub subgrid_compare: SubgridCompareConfig,
    #[serde(default)]
    pub delta_sweep: DeltaSweepConfig,
    #[serde(default)]
    pub constitutive_check: ConstitutiveCheckConfig,
}

impl ExperimentConfig {
    /// Defaults for every section with the reference rocks.
    pub fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            rocks: RocksConfig::reference(),
            seed: 0,
            workers: None,
            output: None,
            grid: GridConfig::default(),
            time: TimeConfig::default(),
            boundary: BoundaryConfig::default(),
            initial: InitialConfig::default(),
            model: ModelConfig::default(),
            newton: NewtonSettings::default(),
            snapshots: OutputConfig::default(),
            cell_perm: CellPermConfig::default(),
            block_asymptotics: BlockAsymptoticsConfig::default(),
            kernel_check: KernelCheckConfig::default(),
            subgrid_compare: SubgridCompareConfig::default(),
            delta_sweep: DeltaSweepConfig::default(),
            constitutive_check: ConstitutiveCheckConfig::default(),
        }
    }

    /// The reference waterflood: injection on the left at `S = 1`,
    /// `P = 1`; the right edge held at `P = 0` and the initial saturation;
    /// top and bottom closed.
    pub fn reference_waterflood(experiment: ExperimentKind) -> Self {
        let mut cfg = Self::new(experiment);
        cfg.model.sigma_d = Some(4.0);
        cfg.grid.tags.right = EdgeTag::Injection;
        cfg.boundary.right = Some(EdgeConfig {
            p_gamma: 0.0,
            theta_gamma: None,
            s_gamma: Some(cfg.initial.s_f0),
        });
        cfg
    }

    pub fn needs_macro_model(&self) -> bool {
        matches!(self.experiment, ExperimentKind::Simulate | ExperimentKind::DeltaSweep)
    }
}

/// Parses and validates a JSON configuration.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(raw)?;
    validate(&cfg)?;
    Ok(cfg)
}

fn check_unit_interval(errors: &mut Vec<String>, name: &str, v: f64) {
    if !(0.0..=1.0).contains(&v) {
        errors.push(format!("{name} = {v} must lie in [0, 1] (A5)"));
    }
}

fn check_deltas(errors: &mut Vec<String>, name: &str, deltas: &[f64]) {
    if deltas.is_empty() {
        errors.push(format!("{name} must not be empty"));
    }
    if deltas.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
        errors.push(format!("{name} entries must lie in (0, 1)"));
    }
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        errors.push(format!("{name} must be strictly decreasing"));
    }
}

fn check_rock(errors: &mut Vec<String>, name: &str, rock: &RockConfig) {
    if !(rock.phi > 0.0 && rock.phi < 1.0) {
        errors.push(format!("rocks.{name}.phi = {} must lie in (0, 1) (A1)", rock.phi));
    }
    if !(rock.k > 0.0 && rock.k.is_finite()) {
        errors.push(format!("rocks.{name}.k = {} must be positive (A2)", rock.k));
    }
    if let Err(e) = rock.law() {
        errors.push(format!("rocks.{name}: {e} (A3/A4)"));
    }
}

/// Collects every range violation of `cfg`; one message per violation.
pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    let mut errors = Vec::new();
    check_rock(&mut errors, "fracture", &cfg.rocks.fracture);
    check_rock(&mut errors, "matrix", &cfg.rocks.matrix);
    let rocks = if errors.is_empty() {
        match cfg.rocks.build() {
            Ok(r) => Some(r),
            Err(e) => {
                errors.push(format!("rocks: {e} (A3)"));
                None
            }
        }
    } else {
        None
    };

    if cfg.workers == Some(0) {
        errors.push("workers must be at least 1".into());
    }
    if !(cfg.time.dt > 0.0 && cfg.time.dt.is_finite()) {
        errors.push(format!("time.dt = {} must be positive", cfg.time.dt));
    }
    let g = &cfg.grid;
    if !(g.lx > 0.0 && g.ly > 0.0) {
        errors.push("grid.lx and grid.ly must be positive".into());
    }
    if g.nx == 0 || g.ny == 0 {
        errors.push("grid.nx and grid.ny must be at least 1".into());
    }
    check_unit_interval(&mut errors, "initial.s_f0", cfg.initial.s_f0);
    if let Some(sm) = cfg.initial.s_m0 {
        check_unit_interval(&mut errors, "initial.s_m0", sm);
    }

    let m = &cfg.model;
    if !(1..=3).contains(&m.d) {
        errors.push(format!("model.d = {} must be 1, 2 or 3", m.d));
    } else if cfg.needs_macro_model() && m.d < 2 {
        errors.push("model.d must be 2 or 3 for macroscale runs".into());
    }
    if let Some(s) = m.sigma_d {
        if !(s > 0.0) {
            errors.push("model.sigma_d must be positive".into());
        }
    }
    if let PsiPolicy::Value(v) = m.psi_m {
        if !(v > 0.0 && v.is_finite()) {
            errors.push("model.psi_m must be positive".into());
        }
    }
    if let LevelConfig::Delta(d) = m.level {
        if !(d > 0.0 && d < 1.0) {
            errors.push(format!("model.level.delta = {d} must lie in (0, 1)"));
        }
    }
    if m.cell_resolution == 0 {
        errors.push("model.cell_resolution must be positive".into());
    }
    let n = &cfg.newton;
    if !(n.rel_tol > 0.0) || n.max_iter == 0 || !(n.fraction_to_boundary > 0.0 && n.fraction_to_boundary < 1.0) {
        errors.push("newton: need rel_tol > 0, max_iter >= 1 and 0 < fraction_to_boundary < 1".into());
    }
    if !(1..=3).contains(&n.coupling_passes) {
        errors.push("newton.coupling_passes must be 1, 2 or 3".into());
    }

    if cfg.needs_macro_model() {
        let tags = g.tags.as_array();
        if !tags.contains(&EdgeTag::Injection) {
            errors.push("grid.tags: at least one edge must be an injection edge".into());
        }
        let table = rocks.as_ref().and_then(|r| KirchhoffTable::build(&r.fracture).ok());
        for (k, (tag, entry)) in tags.iter().zip(cfg.boundary.edges()).enumerate() {
            let name = EDGE_NAMES[k];
            match (tag, entry) {
                (EdgeTag::Injection, None) => {
                    errors.push(format!("boundary.{name}: injection edge needs p_gamma and theta_gamma or s_gamma"))
                }
                (EdgeTag::Injection, Some(e)) => match (e.theta_gamma, e.s_gamma) {
                    (Some(_), Some(_)) => errors.push(format!("boundary.{name}: give theta_gamma or s_gamma, not both")),
                    (None, None) => errors.push(format!("boundary.{name}: missing theta_gamma or s_gamma")),
                    (None, Some(s)) => check_unit_interval(&mut errors, &format!("boundary.{name}.s_gamma"), s),
                    (Some(th), None) => {
                        if let Some(t) = &table {
                            if !(0.0..=t.theta_star()).contains(&th) {
                                errors.push(format!(
                                    "boundary.{name}.theta_gamma = {th} must lie in [0, theta_f*] = [0, {}] (A5)",
                                    t.theta_star()
                                ));
                            }
                        }
                    }
                },
                _ => {}
            }
        }
        if let (Some(r), Some(sm)) = (&rocks, cfg.initial.s_m0) {
            let sf = cfg.initial.s_f0;
            if sf > 0.0 && sm > 0.0 && (0.0..=1.0).contains(&sf) && (0.0..=1.0).contains(&sm) {
                let (pf, pm) = (pc(&r.fracture, sf).unwrap_or(f64::NAN), pc(&r.matrix, sm).unwrap_or(f64::NAN));
                if !((pf - pm).abs() <= 1e-10 * pf.abs().max(1.0)) {
                    errors.push(format!(
                        "initial: Pc_m(s_m0) = {pm} differs from Pc_f(s_f0) = {pf}; s_m0 must be the matched saturation (A3)"
                    ));
                }
            } else if (sf == 0.0) != (sm == 0.0) {
                errors.push("initial: s_f0 and s_m0 must vanish together (A3)".into());
            }
        }
    }

    if cfg.experiment == ExperimentKind::DeltaSweep {
        check_deltas(&mut errors, "delta_sweep.deltas", &cfg.delta_sweep.deltas);
    }
    let c = &cfg.cell_perm;
    if cfg.experiment == ExperimentKind::CellPerm {
        check_deltas(&mut errors, "cell_perm.deltas", &c.deltas);
        if !(1..=3).contains(&c.d) {
            errors.push("cell_perm.d must be 1, 2 or 3".into());
        }
        if c.n == 0 {
            errors.push("cell_perm.n must be positive".into());
        }
        if let Some(k) = c.kf {
            if !(k > 0.0) {
                errors.push("cell_perm.kf must be positive (A2)".into());
            }
        }
    }
    let b = &cfg.block_asymptotics;
    if cfg.experiment == ExperimentKind::BlockAsymptotics {
        check_deltas(&mut errors, "block_asymptotics.deltas", &b.deltas);
        if !(1..=3).contains(&b.d) {
            errors.push("block_asymptotics.d must be 1, 2 or 3".into());
        }
        if b.lambdas.is_empty() || b.lambdas.iter().any(|&l| !(l > 0.0)) {
            errors.push("block_asymptotics.lambdas must be positive".into());
        }
        if b.n < 8 || !b.n.is_multiple_of(4) {
            errors.push("block_asymptotics.n must be a multiple of 4 and at least 8".into());
        }
        if b.slab_n != 0 && (b.slab_n < 8 || !b.slab_n.is_multiple_of(4)) {
            errors.push("block_asymptotics.slab_n must be 0 or a multiple of 4 of at least 8".into());
        }
        if !(b.psi_m > 0.0) {
            errors.push("block_asymptotics.psi_m must be positive".into());
        }
    }
    if cfg.experiment == ExperimentKind::KernelCheck {
        let k = &cfg.kernel_check;
        if k.dts.is_empty() || k.dts.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
            errors.push("kernel_check.dts must be non-empty with entries in (0, 1]".into());
        }
    }
    let s = &cfg.subgrid_compare;
    if cfg.experiment == ExperimentKind::SubgridCompare {
        check_deltas(&mut errors, "subgrid_compare.deltas", &s.deltas);
        if !(1..=3).contains(&s.d) {
            errors.push("subgrid_compare.d must be 1, 2 or 3".into());
        }
        if s.n == 0 || s.nt == 0 || !(s.t_end > 0.0) {
            errors.push("subgrid_compare: need n >= 1, nt >= 1 and t_end > 0".into());
        }
        check_unit_interval(&mut errors, "subgrid_compare.trace_start", s.trace_start);
        check_unit_interval(&mut errors, "subgrid_compare.trace_end", s.trace_end);
        if !(s.psi_m > 0.0) {
            errors.push("subgrid_compare.psi_m must be positive".into());
        }
    }
    if cfg.experiment == ExperimentKind::ConstitutiveCheck && cfg.constitutive_check.samples < 2 {
        errors.push("constitutive_check.samples must be at least 2".into());
    }

    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errors))
    }
}

/// `s_m0` from the configuration or `𝒫(s_f0)`.
pub fn matrix_initial(cfg: &ExperimentConfig, rocks: &TwoRockSystem) -> Result<f64> {
    match cfg.initial.s_m0 {
        Some(v) => Ok(v),
        None => matching_p(rocks, cfg.initial.s_f0),
    }
}

/// `ψ_m` under the configured policy.
///
/// The midpoint rule evaluates `α_m` halfway between `s_m0` and the matrix
/// saturation matched to the first injection edge.
pub fn resolve_psi(cfg: &ExperimentConfig, rocks: &TwoRockSystem, table: &KirchhoffTable) -> Result<f64> {
    match cfg.model.psi_m {
        PsiPolicy::Value(v) => Ok(v),
        PsiPolicy::Rule(PsiRule::Midpoint) => {
            let sm0 = matrix_initial(cfg, rocks)?;
            let tags = cfg.grid.tags.as_array();
            let s_inj = tags
                .iter()
                .zip(cfg.boundary.edges())
                .find_map(|(t, e)| (*t == EdgeTag::Injection).then_some(e).flatten())
                .map(|e| match (e.s_gamma, e.theta_gamma) {
                    (Some(s), _) => s,
                    (None, Some(th)) => table.inverse_clamped(th),
                    (None, None) => 1.0,
                })
                .unwrap_or(1.0);
            let target = matching_p(rocks, s_inj)?;
            let v = rocks.matrix.law.alpha(0.5 * (sm0 + target));
            if v > 0.0 {
                Ok(v)
            } else {
                Err(Error::param("model.psi_m", "midpoint rule gives a vanishing diffusivity; set psi_m explicitly"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "experiment": "simulate",
        "rocks": {
            "fracture": {"phi": 0.4, "k": 1.0, "a": 1.0},
            "matrix": {"phi": 0.2, "k": 1.0, "a": 2.0}
        }
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = validate_config(MINIMAL).unwrap();
        assert_eq!(cfg.grid.nx, 64);
        assert_eq!(cfg.time.nsteps, 200);
        assert_eq!(cfg.grid.tags.left, EdgeTag::Injection);
        assert_eq!(cfg.grid.tags.right, EdgeTag::Impermeable);
        assert_eq!(cfg.model.sigma(), 4.0);
        assert_eq!(cfg.rocks, RocksConfig::reference());
    }

    #[test]
    fn porosity_out_of_range_names_a1() {
        let raw = MINIMAL.replace("\"phi\": 0.4", "\"phi\": 1.2");
        let err = validate_config(&raw).unwrap_err().to_string();
        assert!(err.contains("A1") && err.contains("fracture.phi"), "{err}");
    }

    #[test]
    fn theta_above_star_names_a5() {
        let raw = MINIMAL.replace(
            "\"experiment\": \"simulate\",",
            "\"experiment\": \"simulate\", \"boundary\": {\"left\": {\"p_gamma\": 1.0, \"theta_gamma\": 5.0}},",
        );
        let err = validate_config(&raw).unwrap_err().to_string();
        assert!(err.contains("A5") && err.contains("theta_gamma"), "{err}");
    }

    #[test]
    fn every_violation_is_listed() {
        let raw = MINIMAL
            .replace("\"phi\": 0.2", "\"phi\": -0.1")
            .replace("\"experiment\": \"simulate\",", "\"experiment\": \"simulate\", \"time\": {\"dt\": -1.0},");
        match validate_config(&raw).unwrap_err() {
            Error::Validation(list) => {
                assert!(list.iter().any(|m| m.contains("matrix.phi")));
                assert!(list.iter().any(|m| m.contains("time.dt")));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn mismatched_initial_matrix_saturation_names_a3() {
        let raw = MINIMAL.replace(
            "\"experiment\": \"simulate\",",
            "\"experiment\": \"simulate\", \"initial\": {\"s_f0\": 0.1, \"s_m0\": 0.5},",
        );
        let err = validate_config(&raw).unwrap_err().to_string();
        assert!(err.contains("A3"), "{err}");
        let rocks = RocksConfig::reference().build().unwrap();
        let sm = matching_p(&rocks, 0.1).unwrap();
        let ok = MINIMAL.replace(
            "\"experiment\": \"simulate\",",
            &format!("\"experiment\": \"simulate\", \"initial\": {{\"s_f0\": 0.1, \"s_m0\": {sm:?}}},"),
        );
        validate_config(&ok).unwrap();
    }

    #[test]
    fn parse_errors_carry_location_and_unknown_keys_fail() {
        let err = validate_config("{\"experiment\": ").unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
        let raw = MINIMAL.replace("\"experiment\": \"simulate\",", "\"experiment\": \"simulate\", \"gird\": {},");
        assert!(validate_config(&raw).is_err());
    }

    #[test]
    fn level_and_psi_forms() {
        let raw = MINIMAL.replace(
            "\"experiment\": \"simulate\",",
            "\"experiment\": \"simulate\", \"model\": {\"level\": {\"delta\": 0.1}, \"psi_m\": 0.3},",
        );
        let cfg = validate_config(&raw).unwrap();
        assert_eq!(cfg.model.level, LevelConfig::Delta(0.1));
        assert_eq!(cfg.model.psi_m, PsiPolicy::Value(0.3));
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn midpoint_psi_uses_injection_saturation() {
        let cfg = ExperimentConfig::reference_waterflood(ExperimentKind::Simulate);
        let rocks = cfg.rocks.build().unwrap();
        let table = KirchhoffTable::build(&rocks.fracture).unwrap();
        let psi = resolve_psi(&cfg, &rocks, &table).unwrap();
        let sm0 = matching_p(&rocks, 0.1).unwrap();
        assert_eq!(psi, rocks.matrix.law.alpha(0.5 * (sm0 + 1.0)));
    }

    #[test]
    fn experiment_names_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
    }
}
