//! Config-driven command line front end.
//!
//! One TOML file describes an experiment end to end: where the data comes
//! from, the kernel, the subspace construction, the trade-off level(s), the
//! fit settings, and run bookkeeping. The subcommands then cover the whole
//! workflow:
//!
//! * `train`   – fit one model at a single trade-off level, write a model
//!   dump and an evaluation report;
//! * `sweep`   – fit one model per grid level, reusing the shared subspace
//!   work, and write a trade-off table as CSV;
//! * `eval`    – score an existing model dump on the config's test split;
//! * `validate` – run the numerical self-checks and report pass/fail lines.
//!
//! Every run also writes a JSON manifest (config hash, resolved settings,
//! timings) next to its outputs. Configuration problems exit with code 2,
//! runtime failures with 1.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_csv, split, Dataset, DatasetSchema, TargetKind};
use crate::error::{Error, Result};
use crate::fair_subspace::{
    fair_nullspace, fairness_residual, protected_sdr_union, verify_prop1_synthetic, FairBasis,
    FairnessCriterion,
};
use crate::fgp::{self, FitConfig, FitOutcome, MeanMode};
use crate::kernel::{gram, median_heuristic_lengthscale, KernelMatrix, KernelSpec};
use crate::linalg::{max_abs, singular_values, sym_spectral_norm};
use crate::metrics::{eval_report, EvalReport};
use crate::model_subspace::{
    empirical_projection_gap, model_basis, orthonormalize, projection_gaps, OrthonormalBasis,
};
use crate::sdr::{
    between_slice_projection, default_slice_count, sdr_subspace, select_dimension,
    slice_by_target, within_slice_centering,
};
use crate::synth;

/// Version stamp written into model dumps.
pub const MODEL_DUMP_VERSION: u32 = 1;
/// Version stamp written into run manifests.
pub const MANIFEST_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// Where the data comes from and how it is split.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Either a CSV path or a built-in source such as
    /// `synthetic://planted?n=2000&binary=false&seed=7`.
    pub source: String,
    /// Fraction of rows held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Column roles; required for CSV sources, ignored for synthetic ones.
    #[serde(default)]
    pub schema: Option<DatasetSchema>,
}

fn default_test_fraction() -> f64 {
    0.3
}

/// Kernel choice. An absent RBF lengthscale means "use the median pairwise
/// distance of the training features".
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelConfig {
    Rbf {
        #[serde(default)]
        lengthscale: Option<f64>,
        #[serde(default = "default_variance")]
        variance: f64,
    },
    Linear {
        #[serde(default = "default_variance")]
        variance: f64,
    },
}

fn default_variance() -> f64 {
    1.0
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig::Rbf {
            lengthscale: None,
            variance: 1.0,
        }
    }
}

impl KernelConfig {
    /// Resolves the config into a concrete kernel, filling the lengthscale
    /// from the training features when it was left open.
    pub fn resolve(&self, train_x: &Array2<f64>) -> Result<KernelSpec> {
        let spec = match *self {
            KernelConfig::Rbf {
                lengthscale,
                variance,
            } => KernelSpec::Rbf {
                lengthscale: match lengthscale {
                    Some(l) => l,
                    None => median_heuristic_lengthscale(train_x)?,
                },
                variance,
            },
            KernelConfig::Linear { variance } => KernelSpec::Linear { variance },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Subspace construction settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubspaceConfig {
    /// Which dependence notion the fair subspace removes.
    pub criterion: FairnessCriterion,
    /// SDR directions kept per protected attribute (and per class block).
    pub m: usize,
    /// Predictive dimension; absent means automatic selection from the
    /// target SDR spectrum.
    pub d: Option<usize>,
    /// Relative spectrum threshold for the automatic choice of `d`.
    pub dim_threshold: f64,
    /// Ridge level for the SDR eigenproblems.
    pub eta: f64,
    /// Slice count for the target SDR; absent means a data-driven default.
    pub slices: Option<usize>,
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        SubspaceConfig {
            criterion: FairnessCriterion::StatisticalParity,
            m: 3,
            d: None,
            dim_threshold: 0.01,
            eta: 1e-3,
            slices: None,
        }
    }
}

/// Trade-off level(s) to run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TradeoffConfig {
    pub eps: Option<f64>,
    pub eps_grid: Option<Vec<f64>>,
}

/// Fit settings: prior mean choice plus the optimizer knobs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSection {
    pub mean: MeanMode,
    #[serde(flatten)]
    pub gp: FitConfig,
}

/// Whether wall times are reported as measured or forced to zero. Zeroing
/// makes repeated runs byte-identical, which is what a reproducibility diff
/// wants; measurement is the default everywhere else.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    #[default]
    Measured,
    Zeroed,
}

/// Run bookkeeping.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub timing_mode: TimingMode,
    /// Score fairness on thresholded labels instead of raw predictions
    /// (binary targets only).
    pub score_on_labels: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            timing_mode: TimingMode::Measured,
            score_on_labels: false,
        }
    }
}

/// One experiment, end to end.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub subspace: SubspaceConfig,
    #[serde(default)]
    pub tradeoff: TradeoffConfig,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub run: RunConfig,
}

impl ExperimentConfig {
    /// Structural validation beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        if self.dataset.source.trim().is_empty() {
            return Err(Error::Config("dataset source is empty".into()));
        }
        let f = self.dataset.test_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie strictly between 0 and 1, got {f}"
            )));
        }
        if let Some(schema) = &self.dataset.schema {
            schema.validate()?;
        }
        if self.subspace.m < 1 {
            return Err(Error::Config("subspace.m must be at least 1".into()));
        }
        if self.subspace.d == Some(0) {
            return Err(Error::Config("subspace.d must be at least 1".into()));
        }
        if !(self.subspace.eta > 0.0) || !self.subspace.eta.is_finite() {
            return Err(Error::Config(format!(
                "subspace.eta must be a positive finite number, got {}",
                self.subspace.eta
            )));
        }
        if !(self.subspace.dim_threshold > 0.0 && self.subspace.dim_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "subspace.dim_threshold must lie in (0, 1], got {}",
                self.subspace.dim_threshold
            )));
        }
        if self.subspace.slices == Some(0) {
            return Err(Error::Config("subspace.slices must be at least 1".into()));
        }
        if let Some(eps) = self.tradeoff.eps {
            check_eps(eps)?;
        }
        if let Some(grid) = &self.tradeoff.eps_grid {
            if grid.is_empty() {
                return Err(Error::Config("eps_grid must not be empty".into()));
            }
            for &eps in grid {
                check_eps(eps)?;
            }
        }
        self.fit.gp.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eps) || !eps.is_finite() {
        return Err(Error::Config(format!(
            "trade-off level must lie in [0, 1], got {eps}"
        )));
    }
    Ok(())
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config '{}': {e}", path.display()))
    })?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| {
        Error::Config(format!("cannot parse config '{}': {e}", path.display()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Dataset sources
// ---------------------------------------------------------------------------

/// Loaded data plus ingestion accounting, whatever the source was.
struct SourcedData {
    dataset: Dataset,
    rows_read: usize,
    rows_dropped: usize,
}

/// Parses a `synthetic://` source of the form
/// `synthetic://planted?n=500&binary=true&seed=3`.
fn load_synthetic(source: &str, default_seed: u64) -> Result<Dataset> {
    let rest = source.strip_prefix("synthetic://").expect("checked by caller");
    let (name, query) = rest.split_once('?').unwrap_or((rest, ""));
    if name != "planted" {
        return Err(Error::Config(format!(
            "unknown synthetic dataset '{name}' (available: planted)"
        )));
    }
    let mut n: Option<usize> = None;
    let mut binary = false;
    let mut seed = default_seed;
    for pair in query.split('&').filter(|p| !p.is_empty()) {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("malformed synthetic parameter '{pair}'"))
        })?;
        match key {
            "n" => {
                n = Some(value.parse().map_err(|_| {
                    Error::Config(format!("synthetic parameter n: bad value '{value}'"))
                })?)
            }
            "binary" => {
                binary = value.parse().map_err(|_| {
                    Error::Config(format!("synthetic parameter binary: bad value '{value}'"))
                })?
            }
            "seed" => {
                seed = value.parse().map_err(|_| {
                    Error::Config(format!("synthetic parameter seed: bad value '{value}'"))
                })?
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown synthetic parameter '{other}'"
                )))
            }
        }
    }
    let n = n.ok_or_else(|| Error::Config("synthetic source needs n=<rows>".into()))?;
    if n < 8 {
        return Err(Error::Config(format!(
            "synthetic source needs at least 8 rows, got {n}"
        )));
    }
    Ok(if binary {
        synth::planted_binary(n, seed)
    } else {
        synth::planted(n, seed)
    })
}

fn load_source(cfg: &ExperimentConfig) -> Result<SourcedData> {
    let source = cfg.dataset.source.trim();
    if source.starts_with("synthetic://") {
        let dataset = load_synthetic(source, cfg.run.seed)?;
        let n = dataset.n();
        Ok(SourcedData {
            dataset,
            rows_read: n,
            rows_dropped: 0,
        })
    } else {
        let schema = cfg.dataset.schema.as_ref().ok_or_else(|| {
            Error::Config("CSV sources need a [dataset.schema] section".into())
        })?;
        let report = load_csv(Path::new(source), schema)?;
        Ok(SourcedData {
            dataset: report.dataset,
            rows_read: report.rows_read,
            rows_dropped: report.rows_dropped,
        })
    }
}

// ---------------------------------------------------------------------------
// Shared pipeline
// ---------------------------------------------------------------------------

/// Everything the per-eps stage needs, computed once per run: the split, the
/// kernel, the fair subspace, and the predictive subspace.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub spec: KernelSpec,
    pub k: KernelMatrix,
    pub fair: FairBasis,
    pub f_basis: OrthonormalBasis,
    pub g_basis: OrthonormalBasis,
    /// Target SDR spectrum the predictive dimension was selected from.
    pub tau: Array1<f64>,
    /// Largest entry of the fair-subspace orthogonality residual.
    pub fair_residual: f64,
    /// Spectral norm of the training kernel (scale for the residual).
    pub kernel_norm: f64,
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub prepare_seconds: f64,
}

impl Prepared {
    /// Effective predictive dimension after rank truncation.
    pub fn d(&self) -> usize {
        self.g_basis.dim()
    }
}

/// Runs the shared, eps-independent part of an experiment: load, split,
/// kernel, protected-attribute SDR union, fair nullspace, and the target SDR
/// with its orthonormalized basis.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let start = Instant::now();
    let sourced = load_source(cfg)?;
    let criterion = cfg.subspace.criterion;
    if criterion.needs_binary_labels() && sourced.dataset.target_kind != TargetKind::Binary {
        return Err(Error::Config(format!(
            "criterion '{criterion}' conditions on binary labels, but the target is continuous"
        )));
    }
    let (train, test) = split(&sourced.dataset, cfg.dataset.test_fraction, cfg.run.seed)?;

    let spec = cfg.kernel.resolve(&train.x)?;
    let k = gram(&spec, &train.x)?;
    let kernel_norm = sym_spectral_norm(k.as_array());

    let w_union = protected_sdr_union(
        &k,
        &train.y,
        &train.s,
        criterion,
        cfg.subspace.m,
        cfg.subspace.eta,
    )?;
    let fair = fair_nullspace(&k, &w_union)?;
    let fair_residual = fairness_residual(&k, &fair);
    let f_basis = orthonormalize(&k, &fair.q)?;

    let n = train.n();
    let h = cfg
        .subspace
        .slices
        .unwrap_or_else(|| default_slice_count(&train.y));
    let m_y = cfg.subspace.d.unwrap_or_else(|| h.saturating_sub(1).max(1)).min(n);
    let y_sdr = sdr_subspace(&k, &train.y, m_y, h, cfg.subspace.eta)?;
    let d = match cfg.subspace.d {
        Some(d) => d.min(f_basis.dim()),
        None => {
            if !(y_sdr.tau[0] > 0.0) {
                return Err(Error::DegenerateBasis(
                    "target SDR spectrum is all zero; is the target constant?".into(),
                ));
            }
            let max_dim = m_y.min(f_basis.dim());
            let threshold = cfg.subspace.dim_threshold * y_sdr.tau[0];
            select_dimension(y_sdr.tau.as_slice().expect("contiguous"), max_dim, threshold)?
        }
    };
    let g_cols = y_sdr.w.slice(s![.., ..d]).to_owned();
    let g_basis = orthonormalize(&k, &g_cols)?;

    Ok(Prepared {
        train,
        test,
        spec,
        k,
        fair,
        f_basis,
        g_basis,
        tau: y_sdr.tau,
        fair_residual,
        kernel_norm,
        rows_read: sourced.rows_read,
        rows_dropped: sourced.rows_dropped,
        prepare_seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Per-eps evaluation
// ---------------------------------------------------------------------------

/// One row of the trade-off table.
#[derive(Clone, Debug, Serialize)]
pub struct TradeoffRecord {
    pub eps: f64,
    pub error: f64,
    pub sp: Vec<f64>,
    pub eop: Option<Vec<f64>>,
    pub eo: Option<Vec<f64>>,
    pub sigma_min: f64,
    pub fair_gap: f64,
    pub pred_gap: f64,
    pub wall_time_s: f64,
}

/// Everything one trade-off level produces.
pub struct EpsOutcome {
    pub record: TradeoffRecord,
    pub report: EvalReport,
    pub fit: FitOutcome,
}

/// Builds the trade-off basis at `eps`, fits the model, and scores it on the
/// test split.
pub fn evaluate_eps(prep: &Prepared, eps: f64, cfg: &ExperimentConfig) -> Result<EpsOutcome> {
    let start = Instant::now();
    let mb = model_basis(&prep.k, &prep.f_basis, &prep.g_basis, eps)?;
    let fit = fgp::fit(
        &prep.spec,
        &prep.train.x,
        &prep.train.y,
        &mb.e,
        cfg.fit.mean,
        &cfg.fit.gp,
    )?;
    let (mean, _var) = fgp::predict(&fit.model, &prep.test.x)?;
    let binary = prep.test.target_kind == TargetKind::Binary;
    let report = eval_report(
        &mean,
        &prep.test.s,
        &prep.test.y,
        binary,
        cfg.run.score_on_labels,
    )?;
    let gaps = projection_gaps(mb.sigma_min(), eps);
    let wall_time_s = match cfg.run.timing_mode {
        TimingMode::Measured => start.elapsed().as_secs_f64(),
        TimingMode::Zeroed => 0.0,
    };
    let record = TradeoffRecord {
        eps,
        error: report.error,
        sp: report.sp.iter().map(|c| c.value).collect(),
        eop: report
            .eop
            .as_ref()
            .map(|v| v.iter().map(|c| c.value).collect()),
        eo: report
            .eo
            .as_ref()
            .map(|v| v.iter().map(|c| c.value).collect()),
        sigma_min: mb.sigma_min(),
        fair_gap: gaps.fair_gap,
        pred_gap: gaps.pred_gap,
        wall_time_s,
    };
    Ok(EpsOutcome { record, report, fit })
}

// ---------------------------------------------------------------------------
// Trade-off table rendering
// ---------------------------------------------------------------------------

/// Replaces anything outside `[A-Za-z0-9_]` so attribute names are safe
/// inside CSV headers.
pub fn sanitize_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Renders the trade-off table. The header is
/// `eps,error,sp_<attr>...,eop_<attr>...,eo_<attr>...,sigma_min,fair_gap,pred_gap,wall_time_s`,
/// with the class-conditional columns present only for binary targets.
pub fn render_tradeoff_csv(
    records: &[TradeoffRecord],
    attr_names: &[String],
    binary: bool,
) -> String {
    let clean: Vec<String> = attr_names.iter().map(|n| sanitize_name(n)).collect();
    let mut out = String::from("eps,error");
    for a in &clean {
        let _ = write!(out, ",sp_{a}");
    }
    if binary {
        for a in &clean {
            let _ = write!(out, ",eop_{a}");
        }
        for a in &clean {
            let _ = write!(out, ",eo_{a}");
        }
    }
    out.push_str(",sigma_min,fair_gap,pred_gap,wall_time_s\n");
    for r in records {
        let _ = write!(out, "{},{}", r.eps, r.error);
        for v in &r.sp {
            let _ = write!(out, ",{v}");
        }
        if binary {
            for v in r.eop.as_deref().unwrap_or_default() {
                let _ = write!(out, ",{v}");
            }
            for v in r.eo.as_deref().unwrap_or_default() {
                let _ = write!(out, ",{v}");
            }
        }
        let _ = writeln!(
            out,
            ",{},{},{},{}",
            r.sigma_min, r.fair_gap, r.pred_gap, r.wall_time_s
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Model dumps and manifests
// ---------------------------------------------------------------------------

/// Serialized model plus the identity of the data it was trained for.
#[derive(Serialize, Deserialize)]
pub struct ModelDump {
    pub format_version: u32,
    pub target_kind: TargetKind,
    pub feature_names: Vec<String>,
    pub protected_names: Vec<String>,
    pub model: fgp::FgpModel,
}

/// Reads and version-checks a model dump.
pub fn load_model_dump(path: &Path) -> Result<ModelDump> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read model '{}': {e}", path.display())))?;
    parse_model_dump(&text)
}

/// Parses a model dump from its JSON text and checks the format version.
pub fn parse_model_dump(text: &str) -> Result<ModelDump> {
    let dump: ModelDump = serde_json::from_str(text)?;
    if dump.format_version != MODEL_DUMP_VERSION {
        return Err(Error::Config(format!(
            "model dump format {} is not supported (expected {})",
            dump.format_version, MODEL_DUMP_VERSION
        )));
    }
    Ok(dump)
}

#[derive(Serialize)]
struct Timings {
    prepare: f64,
    evaluate: f64,
    total: f64,
}

#[derive(Serialize)]
struct RunManifest {
    format_version: u32,
    command: String,
    crate_version: String,
    config_sha256: String,
    resolved_config: serde_json::Value,
    seed: u64,
    n_train: usize,
    n_test: usize,
    rows_read: usize,
    rows_dropped: usize,
    kernel: KernelSpec,
    criterion: FairnessCriterion,
    protected_directions: usize,
    fair_dim: usize,
    predictive_dim: usize,
    fair_residual: f64,
    kernel_norm: f64,
    eps_values: Vec<f64>,
    timings_s: Timings,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Stable hash of the resolved configuration (after CLI overrides), so the
/// manifest pins what actually ran rather than what the file said.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(hex_digest(serde_json::to_string(cfg)?.as_bytes()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn build_manifest(
    command: &str,
    cfg: &ExperimentConfig,
    prep: &Prepared,
    eps_values: &[f64],
    evaluate_seconds: f64,
    total_seconds: f64,
) -> Result<RunManifest> {
    let zero = cfg.run.timing_mode == TimingMode::Zeroed;
    let t = |v: f64| if zero { 0.0 } else { v };
    Ok(RunManifest {
        format_version: MANIFEST_VERSION,
        command: command.to_string(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: config_hash(cfg)?,
        resolved_config: serde_json::to_value(cfg)?,
        seed: cfg.run.seed,
        n_train: prep.train.n(),
        n_test: prep.test.n(),
        rows_read: prep.rows_read,
        rows_dropped: prep.rows_dropped,
        kernel: prep.spec.clone(),
        criterion: cfg.subspace.criterion,
        protected_directions: prep.fair.w.ncols(),
        fair_dim: prep.f_basis.dim(),
        predictive_dim: prep.d(),
        fair_residual: prep.fair_residual,
        kernel_norm: prep.kernel_norm,
        eps_values: eps_values.to_vec(),
        timings_s: Timings {
            prepare: t(prep.prepare_seconds),
            evaluate: t(evaluate_seconds),
            total: t(total_seconds),
        },
    })
}

// ---------------------------------------------------------------------------
// Command implementations
// ---------------------------------------------------------------------------

fn describe_kernel(spec: &KernelSpec) -> String {
    match *spec {
        KernelSpec::Rbf {
            lengthscale,
            variance,
        } => format!("rbf lengthscale={lengthscale:.4} variance={variance}"),
        KernelSpec::Linear { variance } => format!("linear variance={variance}"),
    }
}

fn print_prepared(prep: &Prepared, cfg: &ExperimentConfig) {
    println!(
        "data: {} rows read, {} dropped; {} train / {} test",
        prep.rows_read,
        prep.rows_dropped,
        prep.train.n(),
        prep.test.n()
    );
    println!("kernel: {}", describe_kernel(&prep.spec));
    println!(
        "fair subspace ({}): {} protected directions, nullspace rank {}, basis dim {}",
        cfg.subspace.criterion,
        prep.fair.w.ncols(),
        prep.fair.r,
        prep.f_basis.dim()
    );
    let spectrum: Vec<String> = prep.tau.iter().take(6).map(|t| format!("{t:.3}")).collect();
    println!(
        "predictive subspace: dim {} (target spectrum [{}])",
        prep.d(),
        spectrum.join(", ")
    );
}

fn print_report(report: &EvalReport, names: &[String], binary: bool) {
    let label = if binary { "misclassification" } else { "rmse" };
    println!("test error ({label}): {}", report.error);
    let show = |prefix: &str, scores: &[crate::metrics::CorrScore]| {
        for (name, score) in names.iter().zip(scores) {
            let mark = if score.degenerate { " (degenerate)" } else { "" };
            println!("{prefix}_{}: {}{mark}", sanitize_name(name), score.value);
        }
    };
    show("sp", &report.sp);
    if let Some(eop) = &report.eop {
        show("eop", eop);
    }
    if let Some(eo) = &report.eo {
        show("eo", eo);
    }
}

/// Picks the single trade-off level `train` runs at.
fn resolve_single_eps(cfg: &ExperimentConfig) -> Result<f64> {
    if let Some(eps) = cfg.tradeoff.eps {
        return Ok(eps);
    }
    if let Some(grid) = &cfg.tradeoff.eps_grid {
        if grid.len() == 1 {
            return Ok(grid[0]);
        }
    }
    Err(Error::Config(
        "train needs a single trade-off level: set [tradeoff] eps or pass --eps".into(),
    ))
}

/// Picks and sorts the grid `sweep` runs over.
fn resolve_eps_grid(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let mut grid = if let Some(grid) = &cfg.tradeoff.eps_grid {
        grid.clone()
    } else if let Some(eps) = cfg.tradeoff.eps {
        vec![eps]
    } else {
        return Err(Error::Config(
            "sweep needs trade-off levels: set [tradeoff] eps_grid or pass --eps-grid".into(),
        ));
    };
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite by validation"));
    Ok(grid)
}

fn cmd_train(cfg: ExperimentConfig) -> Result<i32> {
    let total_start = Instant::now();
    let eps = resolve_single_eps(&cfg)?;
    let prep = prepare(&cfg)?;
    print_prepared(&prep, &cfg);

    let eval_start = Instant::now();
    let outcome = evaluate_eps(&prep, eps, &cfg)?;
    let evaluate_seconds = eval_start.elapsed().as_secs_f64();

    let binary = prep.test.target_kind == TargetKind::Binary;
    println!(
        "trade-off eps={eps}: sigma_min={:.6}, fair_gap={:.6}, pred_gap={:.6}",
        outcome.record.sigma_min, outcome.record.fair_gap, outcome.record.pred_gap
    );
    println!(
        "fit: {} iterations, converged={}, evidence={:.6}",
        outcome.fit.iterations,
        outcome.fit.converged,
        outcome.fit.lml_trace.last().copied().unwrap_or(f64::NAN)
    );
    print_report(&outcome.report, &prep.test.protected_names, binary);

    let out_dir = &cfg.run.output_dir;
    std::fs::create_dir_all(out_dir)?;
    let dump = ModelDump {
        format_version: MODEL_DUMP_VERSION,
        target_kind: prep.train.target_kind,
        feature_names: prep.train.feature_names.clone(),
        protected_names: prep.train.protected_names.clone(),
        model: outcome.fit.model.clone(),
    };
    write_json(&out_dir.join("model.json"), &dump)?;

    #[derive(Serialize)]
    struct TrainReport<'a> {
        record: &'a TradeoffRecord,
        eval: &'a EvalReport,
        fit_iterations: usize,
        fit_converged: bool,
        evidence: f64,
    }
    write_json(
        &out_dir.join("report.json"),
        &TrainReport {
            record: &outcome.record,
            eval: &outcome.report,
            fit_iterations: outcome.fit.iterations,
            fit_converged: outcome.fit.converged,
            evidence: outcome.fit.lml_trace.last().copied().unwrap_or(f64::NAN),
        },
    )?;
    let manifest = build_manifest(
        "train",
        &cfg,
        &prep,
        &[eps],
        evaluate_seconds,
        total_start.elapsed().as_secs_f64(),
    )?;
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    println!("wrote {}", out_dir.join("model.json").display());
    println!("wrote {}", out_dir.join("report.json").display());
    println!("wrote {}", out_dir.join("manifest.json").display());
    Ok(0)
}

fn cmd_sweep(cfg: ExperimentConfig) -> Result<i32> {
    let total_start = Instant::now();
    let grid = resolve_eps_grid(&cfg)?;
    let prep = prepare(&cfg)?;
    print_prepared(&prep, &cfg);

    let eval_start = Instant::now();
    let results: Vec<Result<TradeoffRecord>> = grid
        .par_iter()
        .map(|&eps| evaluate_eps(&prep, eps, &cfg).map(|o| o.record))
        .collect();
    let mut records = Vec::with_capacity(results.len());
    for result in results {
        records.push(result?);
    }
    let evaluate_seconds = eval_start.elapsed().as_secs_f64();

    let binary = prep.test.target_kind == TargetKind::Binary;
    let csv = render_tradeoff_csv(&records, &prep.test.protected_names, binary);
    print!("{csv}");

    let out_dir = &cfg.run.output_dir;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("sweep.csv"), &csv)?;
    let manifest = build_manifest(
        "sweep",
        &cfg,
        &prep,
        &grid,
        evaluate_seconds,
        total_start.elapsed().as_secs_f64(),
    )?;
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    println!("wrote {}", out_dir.join("sweep.csv").display());
    println!("wrote {}", out_dir.join("manifest.json").display());
    Ok(0)
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.run.output_dir = out.clone();
    }
    let dump = load_model_dump(&args.model)?;

    let sourced = load_source(&cfg)?;
    let (_train, test) = split(&sourced.dataset, cfg.dataset.test_fraction, cfg.run.seed)?;
    if dump.feature_names != test.feature_names {
        return Err(Error::Config(format!(
            "model was trained on features [{}] but the dataset provides [{}]",
            dump.feature_names.join(", "),
            test.feature_names.join(", ")
        )));
    }
    if dump.target_kind != test.target_kind {
        return Err(Error::Config(
            "model target kind does not match the dataset schema".into(),
        ));
    }
    let (mean, _var) = fgp::predict(&dump.model, &test.x)?;
    let binary = dump.target_kind == TargetKind::Binary;
    let report = eval_report(&mean, &test.s, &test.y, binary, cfg.run.score_on_labels)?;
    println!("evaluating {} on {} test rows", args.model.display(), test.n());
    print_report(&report, &test.protected_names, binary);

    let out_dir = &cfg.run.output_dir;
    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("eval_report.json"), &report)?;
    println!("wrote {}", out_dir.join("eval_report.json").display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// Validation suite
// ---------------------------------------------------------------------------

struct CheckSheet {
    failures: usize,
    total: usize,
}

impl CheckSheet {
    fn new() -> Self {
        CheckSheet {
            failures: 0,
            total: 0,
        }
    }

    /// Prints one pass/fail line; a check passes when `measured <= limit`.
    fn check(&mut self, name: &str, measured: f64, limit: f64) {
        self.total += 1;
        let ok = measured <= limit && measured.is_finite();
        if !ok {
            self.failures += 1;
        }
        println!(
            "check {name:<30} measured {measured:>12.4e}  limit {limit:>10.4e}  {}",
            if ok { "pass" } else { "FAIL" }
        );
    }

    fn info(&self, name: &str, value: f64) {
        println!("info  {name:<30} measured {value:>12.4e}  (recorded, not asserted)");
    }
}

fn cmd_validate(args: &ValidateArgs) -> Result<i32> {
    let seed = args.seed;
    println!("validation seed {seed}");
    let mut sheet = CheckSheet::new();

    // A small planted instance exercises the full pipeline.
    let ds = synth::planted(180, seed);
    let (train, _test) = split(&ds, 0.25, seed)?;
    let n = train.n();
    let eta = 1e-3;
    let spec = KernelSpec::Rbf {
        lengthscale: median_heuristic_lengthscale(&train.x)?,
        variance: 1.0,
    };
    let k = gram(&spec, &train.x)?;
    let w_union = protected_sdr_union(
        &k,
        &train.y,
        &train.s,
        FairnessCriterion::StatisticalParity,
        2,
        eta,
    )?;
    let fair = fair_nullspace(&k, &w_union)?;
    let k_norm = sym_spectral_norm(k.as_array());
    sheet.check(
        "fair-subspace-orthogonality",
        fairness_residual(&k, &fair),
        1e-8 * k_norm * k_norm,
    );

    let f_basis = orthonormalize(&k, &fair.q)?;
    let h = default_slice_count(&train.y);
    let y_sdr = sdr_subspace(&k, &train.y, 2, h, eta)?;
    let g_basis = orthonormalize(&k, &y_sdr.w.slice(s![.., ..2]).to_owned())?;

    // Trade-off identities across a small grid of levels.
    let mut ortho_resid = 0.0_f64;
    let mut angle_resid = 0.0_f64;
    let mut gap_resid = 0.0_f64;
    for &eps in &[0.0, 0.5, 1.0] {
        let mb = model_basis(&k, &f_basis, &g_basis, eps)?;
        let mut e = mb.e.clone();
        if args.corrupt_basis && eps == 0.5 {
            e[(0, 0)] += 0.05;
        }
        let mut gram_e = e.t().dot(&k.as_array().dot(&e));
        for i in 0..gram_e.nrows() {
            gram_e[(i, i)] -= 1.0;
        }
        ortho_resid = ortho_resid.max(max_abs(&gram_e));

        let cross = f_basis.coeffs.t().dot(&k.as_array().dot(&mb.e));
        let sv = singular_values(&cross)?;
        for (got, want) in sv.iter().zip(mb.gamma.iter()) {
            angle_resid = angle_resid.max((got - want).abs());
        }

        let gaps = projection_gaps(mb.sigma_min(), eps);
        let emp_fair = empirical_projection_gap(&k, &f_basis.coeffs, &mb.e)?;
        let emp_pred = empirical_projection_gap(&k, &g_basis.coeffs, &mb.e)?;
        gap_resid = gap_resid
            .max((emp_fair - gaps.fair_gap).abs())
            .max((emp_pred - gaps.pred_gap).abs());
    }
    sheet.check("model-basis-orthonormality", ortho_resid, 1e-8);
    sheet.check("principal-angle-identity", angle_resid, 1e-8);
    sheet.check("projection-gap-formulas", gap_resid, 1e-6);

    // The recovered SDR pairs must satisfy the eigen relation they were
    // computed from. The equivalent ratio form is recorded for reference.
    let part = slice_by_target(&train.y, h)?;
    let kp = k.principal_submatrix(&part.sorted_index)?;
    let ridge = n as f64 * eta;
    let mut pencil_resid = 0.0_f64;
    let mut literal_resid = 0.0_f64;
    for i in 0..2 {
        let mut a = Array1::zeros(n);
        for (pos, &orig) in part.sorted_index.iter().enumerate() {
            a[pos] = y_sdr.w[(orig, i)];
        }
        let mut ka = kp.as_array().dot(&a);
        crate::linalg::center_vec_mut(&mut ka);
        let between = between_slice_projection(&ka, &part.slice_sizes);
        let mut total = ka.clone();
        total.scaled_add(ridge, &a);
        let resid = (&between - &(y_sdr.tau[i] * &total))
            .mapv(|v| v * v)
            .sum()
            .sqrt();
        pencil_resid = pencil_resid.max(resid);

        let tau = y_sdr.tau[i];
        if tau < 1.0 {
            let lambda = tau / (1.0 - tau);
            let mut within = within_slice_centering(&ka, &part.slice_sizes);
            within.scaled_add(ridge, &a);
            let resid_lit = (&between - &(lambda * &within)).mapv(|v| v * v).sum().sqrt();
            literal_resid = literal_resid.max(resid_lit);
        }
    }
    sheet.check("sdr-pencil-residual", pencil_resid, 1e-6 * k_norm.max(1.0));
    sheet.info("sdr-pencil-ratio-form", literal_resid);

    // Population identity behind the fair subspace, by Monte Carlo.
    let prop1 = verify_prop1_synthetic(4000, 4, seed)?;
    sheet.check("independence-monte-carlo", prop1.sample_cov_norm, prop1.bound);

    // Evidence gradient against central finite differences.
    let mut grad_err = 0.0_f64;
    for offset in 0..3 {
        grad_err = grad_err.max(gradient_check(seed.wrapping_add(offset))?);
    }
    sheet.check("evidence-gradient", grad_err, 1e-4);

    // Accepted fit steps must never lower the evidence.
    let mb = model_basis(&k, &f_basis, &g_basis, 0.5)?;
    let fit_cfg = FitConfig {
        max_iters: 40,
        ..FitConfig::default()
    };
    let outcome = fgp::fit(&spec, &train.x, &train.y, &mb.e, MeanMode::Zero, &fit_cfg)?;
    let mut worst_drop = 0.0_f64;
    for pair in outcome.lml_trace.windows(2) {
        worst_drop = worst_drop.max(pair[0] - pair[1]);
    }
    sheet.check("fit-evidence-monotone", worst_drop, 0.0);

    let passed = sheet.total - sheet.failures;
    println!("validation: {passed}/{} checks passed", sheet.total);
    Ok(if sheet.failures == 0 { 0 } else { 1 })
}

/// Compares the analytic evidence gradient against central differences on a
/// random small instance; returns the largest relative error.
fn gradient_check(seed: u64) -> Result<f64> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 25;
    let d = 3;
    let x = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
    let spec = KernelSpec::Rbf {
        lengthscale: 1.0,
        variance: 1.0,
    };
    let k = gram(&spec, &x)?;
    let b = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    let basis = orthonormalize(&k, &b)?;
    let e = basis.coeffs.slice(s![.., ..d.min(basis.dim())]).to_owned();
    let dim = e.ncols();
    let y = Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
    let log_lambda = Array1::from_shape_fn(dim, |_| 0.3 * rng.sample::<f64, _>(StandardNormal));
    let log_noise = -0.7 + 0.3 * rng.sample::<f64, _>(StandardNormal);

    let value = |ll: &Array1<f64>, ln: f64| -> Result<f64> {
        let model = fgp::FgpModel::new(
            spec.clone(),
            x.clone(),
            e.clone(),
            ll.clone(),
            ln,
            MeanMode::Zero,
        )?;
        fgp::log_marginal_likelihood(&model, &y)
    };
    let model = fgp::FgpModel::new(
        spec.clone(),
        x.clone(),
        e.clone(),
        log_lambda.clone(),
        log_noise,
        MeanMode::Zero,
    )?;
    let (grad_ll, grad_ln) = fgp::lml_gradient(&model, &y)?;

    let h = 1e-5;
    let mut worst = 0.0_f64;
    for j in 0..dim {
        let mut up = log_lambda.clone();
        up[j] += h;
        let mut dn = log_lambda.clone();
        dn[j] -= h;
        let fd = (value(&up, log_noise)? - value(&dn, log_noise)?) / (2.0 * h);
        worst = worst.max((grad_ll[j] - fd).abs() / fd.abs().max(1.0));
    }
    let fd = (value(&log_lambda, log_noise + h)? - value(&log_lambda, log_noise - h)?) / (2.0 * h);
    worst = worst.max((grad_ln - fd).abs() / fd.abs().max(1.0));
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Argument parsing and dispatch
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CriterionArg {
    Sp,
    Eop,
    Eo,
}

impl From<CriterionArg> for FairnessCriterion {
    fn from(arg: CriterionArg) -> Self {
        match arg {
            CriterionArg::Sp => FairnessCriterion::StatisticalParity,
            CriterionArg::Eop => FairnessCriterion::EqualityOfOpportunity,
            CriterionArg::Eo => FairnessCriterion::EqualizedOdds,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override with a single trade-off level in [0, 1].
    #[arg(long)]
    eps: Option<f64>,
    /// Override with a comma-separated list of trade-off levels.
    #[arg(long, value_name = "LIST")]
    eps_grid: Option<String>,
    /// Override the fairness criterion.
    #[arg(long, value_enum)]
    criterion: Option<CriterionArg>,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment config file describing the dataset and split.
    #[arg(long)]
    config: PathBuf,
    /// Model dump produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Override the config's seed (controls the split).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Seed for the synthetic validation instances.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deliberately corrupt the trade-off basis to prove the checks bite.
    #[arg(long, hide = true)]
    corrupt_basis: bool,
}

#[derive(Parser)]
#[command(
    name = "fairgp",
    version,
    about = "Fair kernel subspaces and fair Gaussian process experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model at a single trade-off level and write a model dump.
    Train(RunArgs),
    /// Produce a trade-off table over a grid of levels.
    Sweep(RunArgs),
    /// Score an existing model dump on the config's test split.
    Eval(EvalArgs),
    /// Run the numerical self-checks.
    Validate(ValidateArgs),
}

/// Parses a comma-separated trade-off grid as passed on the command line.
pub fn parse_eps_grid(list: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = list
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad trade-off level '{}'", part.trim())))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::Config("empty trade-off grid".into()));
    }
    Ok(values)
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) -> Result<()> {
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.run.output_dir = out.clone();
    }
    if let Some(eps) = args.eps {
        cfg.tradeoff.eps = Some(eps);
        cfg.tradeoff.eps_grid = None;
    }
    if let Some(list) = &args.eps_grid {
        cfg.tradeoff.eps_grid = Some(parse_eps_grid(list)?);
        cfg.tradeoff.eps = None;
    }
    if let Some(criterion) = args.criterion {
        cfg.subspace.criterion = criterion.into();
    }
    cfg.validate()
}

fn with_config(args: &RunArgs, f: fn(ExperimentConfig) -> Result<i32>) -> Result<i32> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args)?;
    f(cfg)
}

/// Entry point used by the binary: parses `std::env::args_os`.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Parses the given arguments, runs the selected command, and returns the
/// process exit code: 0 success, 1 runtime failure, 2 configuration or
/// argument problem.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match &cli.command {
        Command::Train(args) => with_config(args, cmd_train),
        Command::Sweep(args) => with_config(args, cmd_sweep),
        Command::Eval(args) => cmd_eval(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> &'static str {
        "[dataset]\nsource = \"synthetic://planted?n=100\"\n"
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg: ExperimentConfig = toml::from_str(minimal_toml()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.dataset.test_fraction, 0.3);
        assert!(matches!(cfg.kernel, KernelConfig::Rbf { lengthscale: None, variance } if variance == 1.0));
        assert_eq!(
            cfg.subspace.criterion,
            FairnessCriterion::StatisticalParity
        );
        assert_eq!(cfg.subspace.m, 3);
        assert_eq!(cfg.subspace.eta, 1e-3);
        assert_eq!(cfg.fit.mean, MeanMode::Zero);
        assert_eq!(cfg.fit.gp.max_iters, 200);
        assert_eq!(cfg.run.seed, 0);
        assert_eq!(cfg.run.timing_mode, TimingMode::Measured);
    }

    #[test]
    fn full_config_parses() {
        let text = r#"
[dataset]
source = "data/toy.csv"
test_fraction = 0.25

[dataset.schema]
target_column = "y"
target_kind = "binary"
protected_columns = [{ name = "s", kind = "continuous" }]
feature_columns = ["a", "b"]

[kernel]
family = "rbf"
lengthscale = 1.5
variance = 2.0

[subspace]
criterion = "equalized_odds"
m = 4
d = 2
eta = 1e-4
slices = 6

[tradeoff]
eps_grid = [0.0, 0.5, 1.0]

[fit]
mean = "linear_in_features"
max_iters = 150

[run]
seed = 7
output_dir = "out/exp1"
timing_mode = "zeroed"
score_on_labels = true
"#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.subspace.criterion, FairnessCriterion::EqualizedOdds);
        assert_eq!(cfg.subspace.d, Some(2));
        assert_eq!(cfg.fit.mean, MeanMode::LinearInFeatures);
        assert_eq!(cfg.fit.gp.max_iters, 150);
        assert_eq!(cfg.fit.gp.convergence_tol, 1e-8); // untouched default
        assert_eq!(cfg.run.timing_mode, TimingMode::Zeroed);
        assert_eq!(cfg.tradeoff.eps_grid.as_deref(), Some(&[0.0, 0.5, 1.0][..]));
    }

    #[test]
    fn unknown_section_is_rejected() {
        let text = "[dataset]\nsource = \"x.csv\"\n[nonsense]\na = 1\n";
        assert!(toml::from_str::<ExperimentConfig>(text).is_err());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg: ExperimentConfig = toml::from_str(minimal_toml()).unwrap();
        cfg.tradeoff.eps = Some(1.5);
        assert!(cfg.validate().is_err());

        let mut cfg: ExperimentConfig = toml::from_str(minimal_toml()).unwrap();
        cfg.tradeoff.eps_grid = Some(vec![]);
        assert!(cfg.validate().is_err());

        let mut cfg: ExperimentConfig = toml::from_str(minimal_toml()).unwrap();
        cfg.dataset.test_fraction = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg: ExperimentConfig = toml::from_str(minimal_toml()).unwrap();
        cfg.subspace.eta = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn synthetic_source_parsing() {
        let ds = load_synthetic("synthetic://planted?n=64&binary=true&seed=5", 0).unwrap();
        assert_eq!(ds.n(), 64);
        assert_eq!(ds.target_kind, TargetKind::Binary);
        // Default seed comes from the run config.
        let a = load_synthetic("synthetic://planted?n=32", 9).unwrap();
        let b = load_synthetic("synthetic://planted?n=32&seed=9", 0).unwrap();
        assert_eq!(a, b);

        assert!(load_synthetic("synthetic://mystery?n=10", 0).is_err());
        assert!(load_synthetic("synthetic://planted", 0).is_err());
        assert!(load_synthetic("synthetic://planted?n=abc", 0).is_err());
        assert!(load_synthetic("synthetic://planted?n=10&bogus=1", 0).is_err());
    }

    #[test]
    fn sanitize_keeps_headers_clean() {
        assert_eq!(sanitize_name("race"), "race");
        assert_eq!(sanitize_name("city=paris"), "city_paris");
        assert_eq!(sanitize_name("a b,c"), "a_b_c");
    }

    #[test]
    fn csv_rendering_matches_expected_bytes() {
        let records = vec![TradeoffRecord {
            eps: 0.5,
            error: 0.25,
            sp: vec![0.125],
            eop: Some(vec![0.5]),
            eo: Some(vec![0.75]),
            sigma_min: 0.0625,
            fair_gap: 0.1,
            pred_gap: 0.2,
            wall_time_s: 0.0,
        }];
        let names = vec!["s".to_string()];
        let binary = render_tradeoff_csv(&records, &names, true);
        assert_eq!(
            binary,
            "eps,error,sp_s,eop_s,eo_s,sigma_min,fair_gap,pred_gap,wall_time_s\n\
             0.5,0.25,0.125,0.5,0.75,0.0625,0.1,0.2,0\n"
        );
        let continuous = render_tradeoff_csv(&records, &names, false);
        assert_eq!(
            continuous,
            "eps,error,sp_s,sigma_min,fair_gap,pred_gap,wall_time_s\n\
             0.5,0.25,0.125,0.0625,0.1,0.2,0\n"
        );
    }

    #[test]
    fn csv_orders_all_sp_then_all_eop_then_all_eo() {
        let records = vec![TradeoffRecord {
            eps: 0.0,
            error: 0.0,
            sp: vec![1.0, 2.0],
            eop: Some(vec![3.0, 4.0]),
            eo: Some(vec![5.0, 6.0]),
            sigma_min: 0.0,
            fair_gap: 0.0,
            pred_gap: 0.0,
            wall_time_s: 0.0,
        }];
        let names = vec!["race".to_string(), "age".to_string()];
        let csv = render_tradeoff_csv(&records, &names, true);
        let header = csv.lines().next().unwrap();
        assert_eq!(
            header,
            "eps,error,sp_race,sp_age,eop_race,eop_age,eo_race,eo_age,\
             sigma_min,fair_gap,pred_gap,wall_time_s"
        );
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0,1,2,3,4,5,6,"));
    }

    #[test]
    fn grid_resolution_sorts_and_validates() {
        let mut cfg: ExperimentConfig = toml::from_str(minimal_toml()).unwrap();
        cfg.tradeoff.eps_grid = Some(vec![1.0, 0.0, 0.5]);
        assert_eq!(resolve_eps_grid(&cfg).unwrap(), vec![0.0, 0.5, 1.0]);

        cfg.tradeoff.eps_grid = None;
        cfg.tradeoff.eps = Some(0.25);
        assert_eq!(resolve_eps_grid(&cfg).unwrap(), vec![0.25]);
        assert_eq!(resolve_single_eps(&cfg).unwrap(), 0.25);

        cfg.tradeoff.eps = None;
        assert!(resolve_eps_grid(&cfg).is_err());
        assert!(resolve_single_eps(&cfg).is_err());

        cfg.tradeoff.eps_grid = Some(vec![0.1, 0.9]);
        assert!(resolve_single_eps(&cfg).is_err());
    }

    #[test]
    fn overrides_apply_and_revalidate() {
        let mut cfg: ExperimentConfig = toml::from_str(minimal_toml()).unwrap();
        let args = RunArgs {
            config: PathBuf::from("unused"),
            seed: Some(11),
            out: Some(PathBuf::from("elsewhere")),
            eps: None,
            eps_grid: Some("0, 0.5 ,1".into()),
            criterion: Some(CriterionArg::Eo),
        };
        apply_overrides(&mut cfg, &args).unwrap();
        assert_eq!(cfg.run.seed, 11);
        assert_eq!(cfg.run.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.tradeoff.eps_grid, Some(vec![0.0, 0.5, 1.0]));
        assert_eq!(cfg.subspace.criterion, FairnessCriterion::EqualizedOdds);

        let bad = RunArgs {
            config: PathBuf::from("unused"),
            seed: None,
            out: None,
            eps: Some(2.0),
            eps_grid: None,
            criterion: None,
        };
        assert!(apply_overrides(&mut cfg, &bad).is_err());
    }

    #[test]
    fn sha256_digest_is_correct() {
        assert_eq!(
            hex_digest(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn config_hash_is_stable_and_override_sensitive() {
        let cfg: ExperimentConfig = toml::from_str(minimal_toml()).unwrap();
        let h1 = config_hash(&cfg).unwrap();
        let h2 = config_hash(&cfg).unwrap();
        assert_eq!(h1, h2);
        let mut cfg2 = cfg.clone();
        cfg2.run.seed = 99;
        assert_ne!(h1, config_hash(&cfg2).unwrap());
    }

    #[test]
    fn unknown_cli_flag_exits_with_two() {
        let code = run_from(["fairgp", "train", "--config", "x.toml", "--bogus"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn missing_config_file_exits_with_two() {
        let code = run_from([
            "fairgp",
            "train",
            "--config",
            "/nonexistent/definitely/missing.toml",
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn prepare_and_evaluate_produce_consistent_records() {
        let text = "[dataset]\nsource = \"synthetic://planted?n=120\"\n\
                    [subspace]\nm = 2\nd = 2\n\
                    [run]\ntiming_mode = \"zeroed\"\n";
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        let prep = prepare(&cfg).unwrap();
        assert_eq!(prep.train.n() + prep.test.n(), 120);
        assert!(prep.fair_residual <= 1e-8 * prep.kernel_norm * prep.kernel_norm);
        assert!(prep.d() >= 1 && prep.d() <= 2);

        let out = evaluate_eps(&prep, 0.75, &cfg).unwrap();
        let rec = &out.record;
        assert_eq!(rec.eps, 0.75);
        assert!(rec.error.is_finite());
        assert!((0.0..=1.0).contains(&rec.sigma_min));
        let gaps = projection_gaps(rec.sigma_min, 0.75);
        assert_eq!(rec.fair_gap, gaps.fair_gap);
        assert_eq!(rec.pred_gap, gaps.pred_gap);
        assert_eq!(rec.wall_time_s, 0.0);
        assert_eq!(rec.sp.len(), 1);
        assert!(rec.eop.is_none() && rec.eo.is_none());
    }

    #[test]
    fn auto_dimension_selection_is_bounded() {
        let text = "[dataset]\nsource = \"synthetic://planted?n=100\"\n[subspace]\nm = 2\n";
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        let prep = prepare(&cfg).unwrap();
        assert!(prep.d() >= 1);
        assert!(prep.d() <= prep.f_basis.dim());
        // The spectrum is non-increasing, so the kept dimensions are the
        // leading ones.
        for pair in prep.tau.as_slice().unwrap().windows(2) {
            assert!(pair[0] >= pair[1] - 1e-12);
        }
    }

    #[test]
    fn criterion_label_mismatch_is_a_config_error() {
        let text = "[dataset]\nsource = \"synthetic://planted?n=100\"\n\
                    [subspace]\ncriterion = \"equalized_odds\"\n";
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        let err = match prepare(&cfg) {
            Ok(_) => panic!("criterion/target mismatch should fail"),
            Err(e) => e,
        };
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }
}
