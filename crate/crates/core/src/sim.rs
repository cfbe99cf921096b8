//! Seeded Monte Carlo experiments for the random intercept and slope model
//! `Y_ij = ψ₁ + ψ₂X_ij + U_1i + U_2i X_ij + E_ij`, `X_ij ~ U[−1, 2]`:
//! coverage, power and quantile agreement of the modified score statistic
//! against Wald and likelihood-ratio competitors.
//!
//! Replication `b` draws its design from the stream keyed by
//! `(seed, b, 0)` and its random effects and errors from `(seed, b, 1)`, so
//! every λ on the grid sees the same underlying normal draws and results do
//! not depend on the thread schedule.

use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chisq::chisq_quantile;
use crate::error::{Error, Result};
use crate::inference::{subvector_statistic, ScoreModel};
use crate::io::format_number;
use crate::models::lmm::{
    lmm_lrt, lmm_mle, lmm_modified_statistic_lambda, lmm_ols, lmm_simulate, lmm_wald, LmmData, LmmGroup, LmmModel,
    MleConfig, MleFit, SigmaMode,
};
use crate::rng::{derive_seed, stream};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "CRITSCORE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatKind {
    Modified,
    Wald,
    Lrt,
}

impl fmt::Display for StatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatKind::Modified => "modified",
            StatKind::Wald => "wald",
            StatKind::Lrt => "lrt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiEstimator {
    /// Ordinary least squares.
    Ols,
    /// The true ψ.
    Known,
}

fn default_model() -> String {
    "lmm".into()
}
fn default_n() -> usize {
    20
}
fn default_r() -> usize {
    10
}
fn default_lambdas() -> Vec<[f64; 2]> {
    [1e-6, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5].iter().map(|&l| [l, l]).collect()
}
fn default_psi() -> Vec<f64> {
    vec![1.0, 1.0]
}
fn default_sigma() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_psi_estimator() -> PsiEstimator {
    PsiEstimator::Ols
}
fn default_reps() -> usize {
    2000
}
fn default_level() -> f64 {
    0.95
}
fn default_seed() -> u64 {
    1
}
fn default_statistics() -> Vec<StatKind> {
    vec![StatKind::Modified, StatKind::Wald, StatKind::Lrt]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_r")]
    pub r: usize,
    /// True `(λ₁, λ₂)` values.
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<[f64; 2]>,
    #[serde(default = "default_psi")]
    pub psi: Vec<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_true")]
    pub sigma_known: bool,
    #[serde(default = "default_psi_estimator")]
    pub psi_estimator: PsiEstimator,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_statistics")]
    pub statistics: Vec<StatKind>,
    /// Power mode: test this λ instead of the truth.
    #[serde(default)]
    pub null_lambda: Option<[f64; 2]>,
    #[serde(default)]
    pub output: Option<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl SimConfig {
    pub fn from_json(src: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(src)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model != "lmm" {
            return bad(format!("unknown model `{}` (only `lmm` is simulated)", self.model));
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.n == 0 || self.r == 0 {
            return bad("n and r must be at least 1".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level must be in (0, 1), got {}", self.level));
        }
        if self.lambdas.is_empty() {
            return bad("lambda grid is empty".into());
        }
        let ok = |l: &[f64; 2]| l.iter().all(|v| v.is_finite() && *v >= 0.0);
        if !self.lambdas.iter().all(ok) || !self.null_lambda.as_ref().is_none_or(ok) {
            return bad("lambda values must be finite and >= 0".into());
        }
        if self.psi.len() != 2 || self.psi.iter().any(|p| !p.is_finite()) {
            return bad("psi must have two finite entries".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive".into());
        }
        if self.statistics.is_empty() {
            return bad("no statistics requested".into());
        }
        Ok(())
    }

    fn sigma_mode(&self) -> SigmaMode {
        if self.sigma_known {
            SigmaMode::Known(self.sigma)
        } else {
            SigmaMode::Unknown
        }
    }
}

/// Design of replication `rep`: intercept and `x ~ U[−1, 2]` in both X and Z.
pub fn gen_sim_design(config: &SimConfig, rep: usize) -> Result<LmmData> {
    let seed = derive_seed(config.seed, &[rep as u64, 0]);
    let groups = (0..config.n)
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            let x = DMatrix::from_fn(config.r, 2, |_, c| if c == 0 { 1.0 } else { -1.0 + 3.0 * rng.random::<f64>() });
            LmmGroup::new(DVector::zeros(config.r), x.clone(), x)
        })
        .collect::<Result<Vec<_>>>()?;
    LmmData::new(groups, vec![0, 1])
}

/// Data of replication `rep` under true scales `lambda`.
pub fn gen_sim_data(config: &SimConfig, lambda: &[f64; 2], rep: usize) -> Result<LmmData> {
    let design = gen_sim_design(config, rep)?;
    lmm_simulate(lambda, &config.psi, config.sigma, &design, derive_seed(config.seed, &[rep as u64, 1]))
}

/// Outcome of one replication at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub lambda_index: usize,
    pub rep: usize,
    /// One entry per configured statistic; `None` when excluded.
    pub values: Vec<Option<f64>>,
    /// Whether the maximum likelihood fit converged, if one was needed.
    pub mle_converged: Option<bool>,
}

fn needs_fit(config: &SimConfig) -> bool {
    !config.sigma_known || config.statistics.iter().any(|s| *s != StatKind::Modified)
}

/// All configured statistics for `data`, testing `test_lambda`.
pub fn evaluate_statistics(config: &SimConfig, data: &LmmData, test_lambda: &[f64; 2]) -> (Vec<Option<f64>>, Option<bool>) {
    let mode = config.sigma_mode();
    let fit: Option<Option<MleFit>> = needs_fit(config).then(|| {
        lmm_mle(data, &MleConfig::new(mode)).ok().filter(|f| f.converged)
    });
    let fit_ref = fit.as_ref().and_then(|f| f.as_ref());
    let values = config
        .statistics
        .iter()
        .map(|kind| match kind {
            StatKind::Modified => modified(config, data, test_lambda, fit_ref),
            StatKind::Wald => fit_ref.and_then(|f| lmm_wald(test_lambda, data, f, mode).ok()).map(|w| w.statistic),
            StatKind::Lrt => fit_ref.and_then(|f| lmm_lrt(test_lambda, data, f, mode).ok()),
        })
        .map(|v| v.filter(|x| x.is_finite()))
        .collect();
    (values, fit.map(|f| f.is_some()))
}

fn modified(config: &SimConfig, data: &LmmData, lambda: &[f64; 2], fit: Option<&MleFit>) -> Option<f64> {
    let psi = match config.psi_estimator {
        PsiEstimator::Ols => lmm_ols(data).ok()?.as_slice().to_vec(),
        PsiEstimator::Known => config.psi.clone(),
    };
    if config.sigma_known {
        return lmm_modified_statistic_lambda(lambda, &psi, config.sigma, data).ok().map(|t| t.statistic);
    }
    let model = LmmModel::unknown_sigma();
    let theta = model.theta(lambda, &psi, fit?.sigma).ok()?;
    model.check_theta(&theta, data).ok()?;
    subvector_statistic(&model, &theta, data, &[0, 1]).ok().map(|t| t.statistic)
}

/// Run `f` on a pool sized by [`THREADS_ENV`] if set, else on the global pool.
pub fn with_thread_limit<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    Coverage,
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub lambda: [f64; 2],
    pub statistic: StatKind,
    /// Coverage of the truth, or rejection rate of the null in power mode.
    pub rate: f64,
    pub mc_se: f64,
    /// Replications used.
    pub reps: usize,
    pub excluded: usize,
    pub mean: f64,
    pub q50: f64,
    pub q80: f64,
    pub q95: f64,
    /// `|rate − nominal| > 2 mc_se`.
    pub off_nominal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub mode: SimMode,
    pub level: f64,
    pub critical_value: f64,
    pub null_lambda: Option<[f64; 2]>,
    pub statistics: Vec<StatKind>,
    pub rows: Vec<SimRow>,
    /// Replications whose maximum likelihood fit failed or did not converge.
    pub mle_failures: usize,
    /// Power mode: rejection rates non-decreasing along the grid up to 2 MC s.e.
    pub monotone: Vec<(StatKind, bool)>,
    pub records: Vec<RepRecord>,
}

/// Type-7 sample quantile of sorted data.
pub fn sample_quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn simulate(config: &SimConfig, mode: SimMode) -> Result<SimResult> {
    config.validate()?;
    let null = match mode {
        SimMode::Coverage => None,
        SimMode::Power => Some(
            config
                .null_lambda
                .ok_or_else(|| Error::Config("power mode needs null_lambda".into()))?,
        ),
    };
    let critical_value = chisq_quantile(2, config.level)?;
    let units = config.lambdas.len() * config.reps;
    let outcomes: Vec<Result<RepRecord>> = with_thread_limit(|| {
        (0..units)
            .into_par_iter()
            .map(|u| {
                let (li, rep) = (u / config.reps, u % config.reps);
                let truth = &config.lambdas[li];
                let data = gen_sim_data(config, truth, rep)?;
                let (values, mle_converged) = evaluate_statistics(config, &data, null.as_ref().unwrap_or(truth));
                Ok(RepRecord {
                    lambda_index: li,
                    rep,
                    values,
                    mle_converged,
                })
            })
            .collect()
    })?;
    let records = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let nominal = match mode {
        SimMode::Coverage => config.level,
        SimMode::Power => 1.0 - config.level,
    };
    let mut rows = Vec::new();
    for (li, lambda) in config.lambdas.iter().enumerate() {
        let block = &records[li * config.reps..(li + 1) * config.reps];
        for (si, &kind) in config.statistics.iter().enumerate() {
            let mut vals: Vec<f64> = block.iter().filter_map(|r| r.values[si]).collect();
            let used = vals.len();
            let hits = vals
                .iter()
                .filter(|&&v| match mode {
                    SimMode::Coverage => v <= critical_value,
                    SimMode::Power => v > critical_value,
                })
                .count();
            let rate = hits as f64 / used as f64;
            let mc_se = (rate * (1.0 - rate) / used as f64).sqrt();
            let mean = vals.iter().sum::<f64>() / used as f64;
            vals.sort_by(f64::total_cmp);
            rows.push(SimRow {
                lambda: *lambda,
                statistic: kind,
                rate,
                mc_se,
                reps: used,
                excluded: config.reps - used,
                mean,
                q50: sample_quantile(&vals, 0.5),
                q80: sample_quantile(&vals, 0.8),
                q95: sample_quantile(&vals, 0.95),
                off_nominal: !((rate - nominal).abs() <= 2.0 * mc_se),
            });
        }
    }
    let ns = config.statistics.len();
    let monotone = match mode {
        SimMode::Coverage => Vec::new(),
        SimMode::Power => config
            .statistics
            .iter()
            .enumerate()
            .map(|(si, &kind)| {
                let series: Vec<&SimRow> = rows.iter().skip(si).step_by(ns).collect();
                let ok = series
                    .windows(2)
                    .all(|w| w[1].rate >= w[0].rate - 2.0 * (w[0].mc_se.powi(2) + w[1].mc_se.powi(2)).sqrt());
                (kind, ok)
            })
            .collect(),
    };
    Ok(SimResult {
        mode,
        level: config.level,
        critical_value,
        null_lambda: null,
        statistics: config.statistics.clone(),
        mle_failures: records.iter().filter(|r| r.mle_converged == Some(false)).count(),
        rows,
        monotone,
        records,
    })
}

/// Coverage of the true λ by each statistic's acceptance region.
pub fn run_coverage(config: &SimConfig) -> Result<SimResult> {
    simulate(config, SimMode::Coverage)
}

/// Rejection rate of `null_lambda` as the true λ ranges over the grid.
pub fn run_power(config: &SimConfig, null_lambda: [f64; 2]) -> Result<SimResult> {
    let mut c = config.clone();
    c.null_lambda = Some(null_lambda);
    simulate(&c, SimMode::Power)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqPoint {
    pub prob: f64,
    pub theoretical: f64,
    pub sample: f64,
}

/// Probabilities `0.01, 0.02, …, 0.99`.
pub fn qq_probs() -> Vec<f64> {
    (1..100).map(|k| k as f64 / 100.0).collect()
}

/// Sample against chi-square quantiles at `probs`.
pub fn qq_points(samples: &[f64], df: usize, probs: &[f64]) -> Result<Vec<QqPoint>> {
    let mut s: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
    s.sort_by(f64::total_cmp);
    probs
        .iter()
        .map(|&p| {
            Ok(QqPoint {
                prob: p,
                theoretical: chisq_quantile(df, p)?,
                sample: sample_quantile(&s, p),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqSeries {
    pub lambda: [f64; 2],
    pub statistic: StatKind,
    pub points: Vec<QqPoint>,
}

/// Quantiles of each statistic at the truth against `χ²₂`.
pub fn run_qq(config: &SimConfig) -> Result<(SimResult, Vec<QqSeries>)> {
    let result = run_coverage(config)?;
    let probs = qq_probs();
    let mut series = Vec::new();
    for (li, lambda) in config.lambdas.iter().enumerate() {
        let block = &result.records[li * config.reps..(li + 1) * config.reps];
        for (si, &kind) in config.statistics.iter().enumerate() {
            let vals: Vec<f64> = block.iter().filter_map(|r| r.values[si]).collect();
            series.push(QqSeries {
                lambda: *lambda,
                statistic: kind,
                points: qq_points(&vals, 2, &probs)?,
            });
        }
    }
    Ok((result, series))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(std::io::BufWriter::new(f))
}

/// Summary CSV. The rate column is `coverage` or, in power mode, `rejection`.
pub fn write_summary_csv<W: Write>(result: &SimResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let rate = match result.mode {
        SimMode::Coverage => "coverage",
        SimMode::Power => "rejection",
    };
    w.write_record([
        "lambda1", "lambda2", "statistic", rate, "mc_se", "reps", "excluded", "mean", "q50", "q80", "q95",
    ])?;
    for r in &result.rows {
        w.write_record([
            format_number(r.lambda[0]),
            format_number(r.lambda[1]),
            r.statistic.to_string(),
            format_number(r.rate),
            format_number(r.mc_se),
            r.reps.to_string(),
            r.excluded.to_string(),
            format_number(r.mean),
            format_number(r.q50),
            format_number(r.q80),
            format_number(r.q95),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per (grid point, replication, statistic). `indicator` is 1 when
/// the statistic covers (coverage mode) or rejects (power mode), empty when
/// the replication was excluded.
pub fn write_raw_csv<W: Write>(config: &SimConfig, result: &SimResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rep", "lambda1", "lambda2", "statistic", "value", "indicator", "mle_converged"])?;
    for rec in &result.records {
        let lambda = config.lambdas[rec.lambda_index];
        for (kind, v) in result.statistics.iter().zip(&rec.values) {
            let (value, ind) = match v {
                Some(v) => {
                    let hit = match result.mode {
                        SimMode::Coverage => *v <= result.critical_value,
                        SimMode::Power => *v > result.critical_value,
                    };
                    (format_number(*v), if hit { "1" } else { "0" }.to_string())
                }
                None => ("NA".to_string(), String::new()),
            };
            w.write_record([
                rec.rep.to_string(),
                format_number(lambda[0]),
                format_number(lambda[1]),
                kind.to_string(),
                value,
                ind,
                rec.mle_converged.map_or(String::new(), |c| u8::from(c).to_string()),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_qq_csv<W: Write>(series: &[QqSeries], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda1", "lambda2", "statistic", "prob", "theoretical", "sample"])?;
    for s in series {
        for p in &s.points {
            w.write_record([
                format_number(s.lambda[0]),
                format_number(s.lambda[1]),
                s.statistic.to_string(),
                format_number(p.prob),
                format_number(p.theoretical),
                format_number(p.sample),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv_file(result: &SimResult, path: impl AsRef<Path>) -> Result<()> {
    write_summary_csv(result, create(path.as_ref())?)
}

pub fn write_raw_csv_file(config: &SimConfig, result: &SimResult, path: impl AsRef<Path>) -> Result<()> {
    write_raw_csv(config, result, create(path.as_ref())?)
}

pub fn write_qq_csv_file(series: &[QqSeries], path: impl AsRef<Path>) -> Result<()> {
    write_qq_csv(series, create(path.as_ref())?)
}
