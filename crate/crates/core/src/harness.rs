//! Replicated experiments, record files and summaries.
//!
//! # Files
//!
//! A run writes into `output`:
//!
//! * `records.csv`: `replication_id,estimator,pi_spec,m_spec,l2,l1,seconds`, one row
//!   per successful (replication, estimator, nuisance combination). Comparators
//!   use `-` for both spec columns. `seconds` is `0` unless `record_timing` is set.
//! * `inference.csv`: `replication_id,estimator,pi_spec,m_spec,coord,theta0,estimate,lower,upper,covered,length,truth_zero`,
//!   one row per coordinate of each desparsified fit.
//! * `errors.csv`: `replication_id,estimator,pi_spec,m_spec,error`.
//! * `summary.csv` and `summary.txt`.
//! * `shards/`: per-worker partial files, appended after every replication and merged at the end.
//!
//! θ₀ is cached under `theta0_cache` as a text file whose first line is
//! `# ddrkit-theta0 p=<p> dgp=<kind> cov=<cov> rho=<rho> seed=<seed> m=<draws>`
//! followed by one coefficient per line (intercept first).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ddr::{estimate, DdrConfig, ObservedDataset, OutcomeSpec};
use crate::error::{Error, Result};
use crate::inference::{
    confidence_intervals, desparsify, precision_auto, variance_estimates, NodewiseRule, PrecisionEstimate,
};
use crate::nuisance::{BandwidthRule, BasisSpec, LambdaRule, SimOptions, Truncation};
use crate::numkit::{mean, median, norm1, norm2, sample_sd, sub_vec, Matrix, RngStream};
use crate::par::{map_indexed, with_threads, worker_index, Execution};
use crate::simulate::{comparator_fits, theta0_cached, CovKind, Dgp, DgpKind, DgpSpec};

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "DDRKIT_THREADS";
pub const RECORDS_HEADER: [&str; 7] = ["replication_id", "estimator", "pi_spec", "m_spec", "l2", "l1", "seconds"];
pub const INFERENCE_HEADER: [&str; 12] = [
    "replication_id",
    "estimator",
    "pi_spec",
    "m_spec",
    "coord",
    "theta0",
    "estimate",
    "lower",
    "upper",
    "covered",
    "length",
    "truth_zero",
];
/// Largest tolerated fraction of failed replications.
pub const FAILURE_BUDGET: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PiSpec {
    #[serde(alias = "linear-logit")]
    Linear,
    #[serde(alias = "quad-logit")]
    Quad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MSpec {
    Linear,
    Quad,
    Sim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorId {
    Ddr,
    Oracle,
    Full,
    Cc,
}

impl PiSpec {
    pub fn name(self) -> &'static str {
        match self {
            PiSpec::Linear => "linear",
            PiSpec::Quad => "quad",
        }
    }

    pub fn basis(self) -> BasisSpec {
        match self {
            PiSpec::Linear => BasisSpec::linear(),
            PiSpec::Quad => BasisSpec::quadratic(),
        }
    }
}

impl MSpec {
    pub fn name(self) -> &'static str {
        match self {
            MSpec::Linear => "linear",
            MSpec::Quad => "quad",
            MSpec::Sim => "sim",
        }
    }
}

impl EstimatorId {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorId::Ddr => "ddr",
            EstimatorId::Oracle => "oracle",
            EstimatorId::Full => "full",
            EstimatorId::Cc => "cc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceCombo {
    pub pi: PiSpec,
    pub m: MSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthChoice {
    #[default]
    Rot,
    Lscv,
}

fn default_rho() -> f64 {
    0.2
}

fn default_truncation() -> [f64; 2] {
    [0.1, 0.9]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub kind: DgpKind,
    pub p: usize,
    #[serde(default = "default_cov")]
    pub cov: CovKind,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_truncation")]
    pub truncation: [f64; 2],
}

fn default_cov() -> CovKind {
    CovKind::Identity
}

impl DgpConfig {
    pub fn to_spec(&self) -> Result<DgpSpec> {
        let truncation =
            Truncation::new(self.truncation[0], self.truncation[1]).map_err(|e| Error::Config(e.to_string()))?;
        Ok(DgpSpec { kind: self.kind, p: self.p, cov: self.cov, rho: self.rho, truncation })
    }
}

fn default_alpha() -> f64 {
    0.05
}
fn default_theta0_draws() -> usize {
    200_000
}
fn default_folds() -> usize {
    10
}
fn default_repeats() -> usize {
    1
}
fn default_nodewise_c() -> f64 {
    0.5
}

/// Experiment description, read from JSON. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub n: usize,
    pub replications: usize,
    pub nuisance_grid: Vec<NuisanceCombo>,
    pub estimators: Vec<EstimatorId>,
    #[serde(default)]
    pub inference: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
    pub output: PathBuf,
    #[serde(default = "default_theta0_draws")]
    pub theta0_draws: usize,
    /// Defaults to `seed`.
    #[serde(default)]
    pub theta0_seed: Option<u64>,
    /// Defaults to `<output>/theta0`.
    #[serde(default)]
    pub theta0_cache: Option<PathBuf>,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_repeats")]
    pub crossfit_repeats: usize,
    #[serde(default)]
    pub bandwidth: BandwidthChoice,
    #[serde(default = "default_nodewise_c")]
    pub nodewise_c: f64,
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.replications < 1 {
            return fail("replications must be at least 1");
        }
        if self.n < 20 {
            return fail("n must be at least 20");
        }
        if self.estimators.is_empty() {
            return fail("estimators must not be empty");
        }
        if self.estimators.contains(&EstimatorId::Ddr) && self.nuisance_grid.is_empty() {
            return fail("nuisance_grid must not be empty when ddr is requested");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail("alpha must lie in (0, 1)");
        }
        if self.cv_folds < 2 {
            return fail("cv_folds must be at least 2");
        }
        if self.crossfit_repeats < 1 {
            return fail("crossfit_repeats must be at least 1");
        }
        if self.theta0_draws < 10_000 {
            return fail("theta0_draws must be at least 10000");
        }
        if !(self.nodewise_c > 0.0) {
            return fail("nodewise_c must be positive");
        }
        if self.threads == Some(0) {
            return fail("threads must be positive");
        }
        self.dgp.to_spec()?;
        crate::simulate::default_params(&self.dgp.to_spec()?).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    fn lambda_rule(&self) -> LambdaRule {
        match LambdaRule::default_cv() {
            LambdaRule::CrossValidation { n_lambdas, ratio, .. } => {
                LambdaRule::CrossValidation { folds: self.cv_folds, n_lambdas, ratio }
            }
            other => other,
        }
    }

    /// Estimator settings for one grid cell.
    pub fn ddr_config(&self, combo: NuisanceCombo) -> DdrConfig {
        let mut cfg = combo_config(combo, self.lambda_rule(), self.bandwidth);
        cfg.truncation = Truncation::new(self.dgp.truncation[0], self.dgp.truncation[1]).unwrap_or_default();
        cfg.repeats = self.crossfit_repeats;
        cfg
    }
}

/// Estimator settings for one (π̂, m̂) choice with λ chosen by `rule` throughout.
pub fn combo_config(combo: NuisanceCombo, rule: LambdaRule, bandwidth: BandwidthChoice) -> DdrConfig {
    let outcome = match combo.m {
        MSpec::Linear => OutcomeSpec::Lasso { basis: BasisSpec::linear(), rule },
        MSpec::Quad => OutcomeSpec::Lasso { basis: BasisSpec::quadratic(), rule },
        MSpec::Sim => OutcomeSpec::Sim(SimOptions {
            index_rule: rule,
            bandwidth: match bandwidth {
                BandwidthChoice::Rot => BandwidthRule::RuleOfThumb,
                BandwidthChoice::Lscv => BandwidthRule::Lscv { points: 30 },
            },
            ..SimOptions::default()
        }),
    };
    let mut cfg = DdrConfig::new(combo.pi.basis(), outcome);
    cfg.lambda_rule = rule;
    cfg
}

/// One row of `records.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication_id: usize,
    pub estimator: String,
    pub pi_spec: String,
    pub m_spec: String,
    pub l2: f64,
    pub l1: f64,
    pub seconds: f64,
}

/// One row of `inference.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateRecord {
    pub replication_id: usize,
    pub estimator: String,
    pub pi_spec: String,
    pub m_spec: String,
    pub coord: usize,
    pub theta0: f64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
    pub length: f64,
    pub truth_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub replication_id: usize,
    pub estimator: String,
    pub pi_spec: String,
    pub m_spec: String,
    pub error: String,
}

#[derive(Debug, Default)]
struct ReplicationOutput {
    records: Vec<ReplicationRecord>,
    coords: Vec<CoordinateRecord>,
    errors: Vec<ErrorRecord>,
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    dgp: Dgp,
    theta0: Vec<f64>,
    zero: Vec<bool>,
}

fn record(
    rep: usize,
    est: EstimatorId,
    combo: Option<NuisanceCombo>,
    coef: &[f64],
    theta0: &[f64],
    secs: f64,
) -> ReplicationRecord {
    let diff = sub_vec(coef, theta0);
    ReplicationRecord {
        replication_id: rep,
        estimator: est.name().into(),
        pi_spec: combo.map_or("-", |c| c.pi.name()).into(),
        m_spec: combo.map_or("-", |c| c.m.name()).into(),
        l2: norm2(&diff),
        l1: norm1(&diff),
        seconds: secs,
    }
}

fn error_record(rep: usize, est: EstimatorId, combo: Option<NuisanceCombo>, e: &Error) -> ErrorRecord {
    ErrorRecord {
        replication_id: rep,
        estimator: est.name().into(),
        pi_spec: combo.map_or("-", |c| c.pi.name()).into(),
        m_spec: combo.map_or("-", |c| c.m.name()).into(),
        error: e.to_string(),
    }
}

fn run_replication(ctx: &Context<'_>, rep: usize) -> ReplicationOutput {
    let cfg = ctx.cfg;
    let exec = Execution::Sequential;
    let rng = RngStream::new(cfg.seed, rep as u64);
    let mut out = ReplicationOutput::default();
    let timed = |start: Instant| if cfg.record_timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let (data, truth) = match ctx.dgp.generate(cfg.n, &mut rng.substream(0)) {
        Ok(v) => v,
        Err(e) => {
            for &est in &cfg.estimators {
                out.errors.push(error_record(rep, est, None, &e));
            }
            return out;
        }
    };
    let comparators: Vec<EstimatorId> = cfg.estimators.iter().copied().filter(|e| *e != EstimatorId::Ddr).collect();
    if !comparators.is_empty() {
        let start = Instant::now();
        match comparator_fits(&data, &truth, &cfg.lambda_rule(), &rng.substream(1), exec) {
            Ok(c) => {
                let secs = timed(start) / 3.0;
                for est in comparators {
                    let fit = match est {
                        EstimatorId::Oracle => &c.oracle,
                        EstimatorId::Full => &c.full,
                        _ => &c.cc,
                    };
                    out.records.push(record(rep, est, None, &fit.coefficients, &ctx.theta0, secs));
                }
            }
            Err(e) => out.errors.extend(comparators.iter().map(|&est| error_record(rep, est, None, &e))),
        }
    }
    if cfg.estimators.contains(&EstimatorId::Ddr) {
        let mut precision: Option<std::result::Result<PrecisionEstimate, String>> = None;
        for (k, &combo) in cfg.nuisance_grid.iter().enumerate() {
            let start = Instant::now();
            let dcfg = cfg.ddr_config(combo);
            let est = match estimate(&data, &dcfg, &rng.substream(10 + k as u64), exec) {
                Ok(v) => v,
                Err(e) => {
                    out.errors.push(error_record(rep, EstimatorId::Ddr, Some(combo), &e));
                    continue;
                }
            };
            out.records.push(record(
                rep,
                EstimatorId::Ddr,
                Some(combo),
                &est.fit.coefficients,
                &ctx.theta0,
                timed(start),
            ));
            if !cfg.inference {
                continue;
            }
            let basis = dcfg.target_basis;
            let omega = precision.get_or_insert_with(|| {
                let rule = NodewiseRule::Scaled { c: cfg.nodewise_c };
                precision_auto(&basis.expand(data.x()), rule, &mut rng.substream(2), exec).map_err(|e| e.to_string())
            });
            let result = match omega {
                Ok(omega) => desparsify(&data, &est.preds, &est.fit, omega, &basis).and_then(|theta| {
                    let sigma = variance_estimates(&data, &est.preds, &est.fit, omega, &basis)?;
                    confidence_intervals(theta, sigma, data.n(), cfg.alpha)
                }),
                Err(msg) => Err(Error::InvalidArgument(format!("precision estimate failed: {msg}"))),
            };
            match result {
                Ok(r) => {
                    for j in 0..r.theta_tilde.len() {
                        out.coords.push(CoordinateRecord {
                            replication_id: rep,
                            estimator: EstimatorId::Ddr.name().into(),
                            pi_spec: combo.pi.name().into(),
                            m_spec: combo.m.name().into(),
                            coord: j,
                            theta0: ctx.theta0[j],
                            estimate: r.theta_tilde[j],
                            lower: r.ci_lower[j],
                            upper: r.ci_upper[j],
                            covered: r.covers(j, ctx.theta0[j]),
                            length: r.ci_upper[j] - r.ci_lower[j],
                            truth_zero: ctx.zero[j],
                        });
                    }
                }
                Err(e) => out.errors.push(error_record(rep, EstimatorId::Ddr, Some(combo), &e)),
            }
        }
    }
    out
}

fn append_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, headers: bool) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().has_headers(headers).from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn shard_paths(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix)))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Merge shard files, ordering rows by replication id and keeping per-replication order.
fn merge_shards<T>(dir: &Path, prefix: &str, rep_of: impl Fn(&T) -> usize) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
{
    let mut rows = Vec::new();
    for path in shard_paths(dir, prefix)? {
        rows.extend(read_rows::<T>(&path, false)?);
    }
    rows.sort_by_key(|r| rep_of(r));
    Ok(rows)
}

/// Worker count from `DDRKIT_THREADS`, falling back to `configured`.
pub fn thread_count(configured: Option<usize>) -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|t| *t > 0).or(configured)
}

/// What [`run_experiment`] produced.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub records_path: PathBuf,
    pub inference_path: PathBuf,
    pub errors_path: PathBuf,
    pub summary: Summary,
    pub failed_replications: usize,
    pub theta0: Vec<f64>,
}

/// Run every replication, write the output files and summarize.
///
/// Returns [`Error::FailureBudget`] after writing all files when more than 10%
/// of replications had at least one failing cell.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Execution) -> Result<RunReport> {
    cfg.validate()?;
    let spec = cfg.dgp.to_spec()?;
    let dgp = Dgp::new(spec)?;
    let out_dir = cfg.output.clone();
    fs::create_dir_all(&out_dir)?;
    let shard_dir = out_dir.join("shards");
    if shard_dir.exists() {
        fs::remove_dir_all(&shard_dir)?;
    }
    fs::create_dir_all(&shard_dir)?;
    let cache = cfg.theta0_cache.clone().unwrap_or_else(|| out_dir.join("theta0"));
    let threads = thread_count(cfg.threads);
    let theta0 = with_threads(threads, || {
        theta0_cached(&dgp, cfg.theta0_draws, cfg.theta0_seed.unwrap_or(cfg.seed), &cache, exec)
    })?;
    let zero = dgp.structural_support().into_iter().map(|s| !s).collect();
    let ctx = Context { cfg, dgp, theta0: theta0.clone(), zero };
    let outcomes: Vec<Result<bool>> = with_threads(threads, || {
        map_indexed(exec, cfg.replications, |rep| {
            let out = run_replication(&ctx, rep);
            let w = worker_index();
            append_rows(&shard_dir.join(format!("records-{w:04}.csv")), &out.records)?;
            append_rows(&shard_dir.join(format!("inference-{w:04}.csv")), &out.coords)?;
            append_rows(&shard_dir.join(format!("errors-{w:04}.csv")), &out.errors)?;
            Ok(!out.errors.is_empty())
        })
    });
    let mut failed = 0;
    for o in outcomes {
        failed += usize::from(o?);
    }
    let records: Vec<ReplicationRecord> =
        merge_shards(&shard_dir, "records-", |r: &ReplicationRecord| r.replication_id)?;
    let coords: Vec<CoordinateRecord> =
        merge_shards(&shard_dir, "inference-", |r: &CoordinateRecord| r.replication_id)?;
    let errors: Vec<ErrorRecord> = merge_shards(&shard_dir, "errors-", |r: &ErrorRecord| r.replication_id)?;
    let records_path = out_dir.join("records.csv");
    let inference_path = out_dir.join("inference.csv");
    let errors_path = out_dir.join("errors.csv");
    write_csv(&records_path, &RECORDS_HEADER, &records)?;
    write_csv(&inference_path, &INFERENCE_HEADER, &coords)?;
    write_csv(&errors_path, &["replication_id", "estimator", "pi_spec", "m_spec", "error"], &errors)?;
    fs::remove_dir_all(&shard_dir)?;
    let summary = summarize_rows(&records, &coords);
    write_summary(&out_dir, &summary)?;
    if failed as f64 > FAILURE_BUDGET * cfg.replications as f64 {
        return Err(Error::FailureBudget { failed, total: cfg.replications });
    }
    Ok(RunReport { records_path, inference_path, errors_path, summary, failed_replications: failed, theta0 })
}

/// Coverage and length statistics for one coordinate class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageSummary {
    pub coords: usize,
    /// Mean over coordinates of the per-coordinate coverage rate.
    pub a_covp: f64,
    /// Median over coordinates of the per-coordinate coverage rate.
    pub m_covp: f64,
    /// Standard deviation over coordinates of the per-coordinate coverage rate.
    pub covp_sd_coords: f64,
    /// Standard deviation over replications of the per-replication average coverage.
    pub covp_sd_reps: f64,
    pub length: f64,
    pub length_sd_reps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub pi_spec: String,
    pub m_spec: String,
    pub replications: usize,
    pub l2_mean: f64,
    pub l2_sd: f64,
    pub l1_mean: f64,
    pub l1_sd: f64,
    pub zero: Option<CoverageSummary>,
    pub nonzero: Option<CoverageSummary>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn find(&self, estimator: &str, pi_spec: &str, m_spec: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.pi_spec == pi_spec && r.m_spec == m_spec)
    }
}

fn sd_or_zero(v: &[f64]) -> f64 {
    if v.len() < 2 {
        0.0
    } else {
        sample_sd(v)
    }
}

fn coverage(coords: &[&CoordinateRecord], zero_class: bool) -> Option<CoverageSummary> {
    let rows: Vec<&&CoordinateRecord> = coords.iter().filter(|c| c.truth_zero == zero_class).collect();
    if rows.is_empty() {
        return None;
    }
    let mut by_coord: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    let mut by_rep: BTreeMap<usize, (f64, f64, f64)> = BTreeMap::new();
    for c in &rows {
        let e = by_coord.entry(c.coord).or_default();
        e.0 += f64::from(u8::from(c.covered));
        e.1 += 1.0;
        let r = by_rep.entry(c.replication_id).or_default();
        r.0 += f64::from(u8::from(c.covered));
        r.1 += c.length;
        r.2 += 1.0;
    }
    let rates: Vec<f64> = by_coord.values().map(|(k, n)| k / n).collect();
    let rep_cov: Vec<f64> = by_rep.values().map(|(k, _, n)| k / n).collect();
    let rep_len: Vec<f64> = by_rep.values().map(|(_, l, n)| l / n).collect();
    let lengths: Vec<f64> = rows.iter().map(|c| c.length).collect();
    Some(CoverageSummary {
        coords: rates.len(),
        a_covp: mean(&rates),
        m_covp: median(&rates),
        covp_sd_coords: sd_or_zero(&rates),
        covp_sd_reps: sd_or_zero(&rep_cov),
        length: mean(&lengths),
        length_sd_reps: sd_or_zero(&rep_len),
    })
}

/// Aggregate rows per (estimator, pi_spec, m_spec) in order of first appearance.
pub fn summarize_rows(records: &[ReplicationRecord], coords: &[CoordinateRecord]) -> Summary {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    for r in records {
        let k = (r.estimator.clone(), r.pi_spec.clone(), r.m_spec.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let rows = keys
        .into_iter()
        .map(|(e, p, m)| {
            let sel: Vec<&ReplicationRecord> =
                records.iter().filter(|r| r.estimator == e && r.pi_spec == p && r.m_spec == m).collect();
            let l2: Vec<f64> = sel.iter().map(|r| r.l2).collect();
            let l1: Vec<f64> = sel.iter().map(|r| r.l1).collect();
            let cs: Vec<&CoordinateRecord> =
                coords.iter().filter(|c| c.estimator == e && c.pi_spec == p && c.m_spec == m).collect();
            SummaryRow {
                replications: sel.len(),
                l2_mean: mean(&l2),
                l2_sd: sd_or_zero(&l2),
                l1_mean: mean(&l1),
                l1_sd: sd_or_zero(&l1),
                zero: coverage(&cs, true),
                nonzero: coverage(&cs, false),
                estimator: e,
                pi_spec: p,
                m_spec: m,
            }
        })
        .collect();
    Summary { rows }
}

/// Read `records.csv` (and a sibling `inference.csv`, if present) and summarize.
pub fn summarize(records_path: &Path) -> Result<Summary> {
    let malformed = |e: Error| Error::MalformedRecords(format!("{}: {e}", records_path.display()));
    let mut reader = csv::Reader::from_path(records_path).map_err(|e| malformed(e.into()))?;
    let header = reader.headers().map_err(|e| malformed(e.into()))?.clone();
    if header.iter().collect::<Vec<_>>() != RECORDS_HEADER {
        return Err(Error::MalformedRecords(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let records: Vec<ReplicationRecord> =
        reader.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| malformed(e.into()))?;
    let sidecar = records_path.with_file_name("inference.csv");
    let coords = if sidecar.exists() {
        read_rows::<CoordinateRecord>(&sidecar, true)
            .map_err(|e| Error::MalformedRecords(format!("{}: {e}", sidecar.display())))?
    } else {
        Vec::new()
    };
    Ok(summarize_rows(&records, &coords))
}

const SUMMARY_HEADER: [&str; 22] = [
    "estimator",
    "pi_spec",
    "m_spec",
    "replications",
    "l2_mean",
    "l2_sd",
    "l1_mean",
    "l1_sd",
    "zero_a_covp",
    "zero_m_covp",
    "zero_covp_sd_coords",
    "zero_covp_sd_reps",
    "zero_length",
    "zero_length_sd_reps",
    "nonzero_a_covp",
    "nonzero_m_covp",
    "nonzero_covp_sd_coords",
    "nonzero_covp_sd_reps",
    "nonzero_length",
    "nonzero_length_sd_reps",
    "zero_coords",
    "nonzero_coords",
];

fn cov_fields(c: &Option<CoverageSummary>) -> Vec<String> {
    match c {
        Some(c) => [c.a_covp, c.m_covp, c.covp_sd_coords, c.covp_sd_reps, c.length, c.length_sd_reps]
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect(),
        None => vec![String::new(); 6],
    }
}

/// Summary as CSV text.
pub fn summary_csv(summary: &Summary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER)?;
    for r in &summary.rows {
        let mut rec = vec![
            r.estimator.clone(),
            r.pi_spec.clone(),
            r.m_spec.clone(),
            r.replications.to_string(),
            format!("{:.6}", r.l2_mean),
            format!("{:.6}", r.l2_sd),
            format!("{:.6}", r.l1_mean),
            format!("{:.6}", r.l1_sd),
        ];
        rec.extend(cov_fields(&r.zero));
        rec.extend(cov_fields(&r.nonzero));
        rec.push(r.zero.map_or(String::new(), |c| c.coords.to_string()));
        rec.push(r.nonzero.map_or(String::new(), |c| c.coords.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Fixed-width table: L2 error as `mean (sd)` and coverage by coordinate class.
pub fn summary_table(summary: &Summary) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:<7} {:<7} {:>5}  {:<16} {:<22} {:<22}",
        "est", "pi", "m", "reps", "L2 mean (sd)", "zero A/M-CovP len", "nonzero A/M-CovP len"
    );
    let cov = |c: &Option<CoverageSummary>| match c {
        Some(c) => format!("{:.3}/{:.3} {:.3}", c.a_covp, c.m_covp, c.length),
        None => "-".to_string(),
    };
    for r in &summary.rows {
        let _ = writeln!(
            s,
            "{:<8} {:<7} {:<7} {:>5}  {:<16} {:<22} {:<22}",
            r.estimator,
            r.pi_spec,
            r.m_spec,
            r.replications,
            format!("{:.3} ({:.3})", r.l2_mean, r.l2_sd),
            cov(&r.zero),
            cov(&r.nonzero)
        );
    }
    s
}

/// Write `summary.csv` and `summary.txt` into `dir`.
pub fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    fs::write(dir.join("summary.csv"), summary_csv(summary)?)?;
    fs::write(dir.join("summary.txt"), summary_table(summary))?;
    Ok(())
}

/// Dataset CSV: `t,y,x1..xp`, with an empty `y` where `t = 0`.
pub fn write_dataset(path: &Path, data: &ObservedDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string(), "y".to_string()];
    header.extend((1..=data.p()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut row =
            vec![u8::from(data.t(i)).to_string(), data.observed_y(i).map_or(String::new(), |y| format!("{y:e}"))];
        row.extend(data.x().row(i).iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<ObservedDataset> {
    let bad = |m: String| Error::MalformedRecords(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "t" || &header[1] != "y" {
        return Err(bad("expected header t,y,x1,...".into()));
    }
    let p = header.len() - 2;
    let (mut t, mut y, mut xs) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("row {}: bad number {s:?}", line + 1)));
        let ti = match rec[0].trim() {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("row {}: t must be 0 or 1, got {other:?}", line + 1))),
        };
        t.push(ti);
        y.push(if ti { parse(&rec[1])? } else { f64::NAN });
        for j in 0..p {
            xs.push(parse(&rec[j + 2])?);
        }
    }
    let n = t.len();
    ObservedDataset::new(t, y, Matrix::from_vec(n, p, xs)?)
}

/// Truth CSV written next to a simulated dataset: `y_full,pi,m`.
pub fn write_truth(path: &Path, truth: &crate::simulate::HiddenTruth) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["y_full", "pi", "m"])?;
    for i in 0..truth.y_full.len() {
        w.write_record([format!("{:e}", truth.y_full[i]), format!("{:e}", truth.pi[i]), format!("{:e}", truth.m[i])])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<crate::simulate::HiddenTruth> {
    #[derive(Deserialize)]
    struct Row {
        y_full: f64,
        pi: f64,
        m: f64,
    }
    let rows: Vec<Row> = read_rows(path, true)?;
    Ok(crate::simulate::HiddenTruth {
        y_full: rows.iter().map(|r| r.y_full).collect(),
        pi: rows.iter().map(|r| r.pi).collect(),
        pi_raw: rows.iter().map(|r| r.pi).collect(),
        m: rows.iter().map(|r| r.m).collect(),
    })
}
