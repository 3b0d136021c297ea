//! Repeated-split experiments and coverage-bound trials.
//!
//! A fixed test block is held out once. Each replication reshuffles the
//! remaining rows into a proper training set and a calibration set, fits
//! every requested method, and records test coverage and mean region volume.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{pcp_calibrate, rcp_calibrate, rcp_fit, DEFAULT_PCP_SAMPLES};
use crate::conformal::{calibrate_scores, conformal_rank, ContraPredictor};
use crate::data::{split_pool, Dataset, Generator};
use crate::error::{Error, Result};
use crate::flow::{train_flow, FlowConfig};
use crate::mcqr::{mcqr_fit, McqrConfig};
use crate::rescontra::{rescontra_fit, KernelRidgeConfig, ResContraSplit, DEFAULT_PREDICTOR_FRACTION};
use crate::rng::{derive, derive_named, rng, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Contra,
    ResContra,
    Pcp,
    Rcp,
    Mcqr,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Contra, Method::ResContra, Method::Pcp, Method::Rcp, Method::Mcqr];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Contra => "CONTRA",
            Method::ResContra => "ResCONTRA",
            Method::Pcp => "PCP",
            Method::Rcp => "RCP",
            Method::Mcqr => "MCQR",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Row counts for the three blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sizes {
    pub train: usize,
    pub calibration: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub generator: Generator,
    /// Seed of the generated dataset.
    pub data_seed: u64,
    pub sizes: Sizes,
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub replications: usize,
    /// Root of every per-replication seed.
    pub seed: u64,
    pub flow: FlowConfig,
    /// Flow trained on ResCONTRA residuals. Its training set is smaller
    /// than the main flow's, so it runs fewer epochs by default.
    pub residual_flow: FlowConfig,
    pub mcqr: McqrConfig,
    pub krr: KernelRidgeConfig,
    pub pcp_samples: usize,
    /// Monte Carlo samples per test point for volume estimates.
    pub volume_samples: usize,
    /// Share of the training rows fitting the ResCONTRA point predictor.
    pub predictor_fraction: f64,
    /// Run replications on the rayon pool.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            generator: Generator::Mixture,
            data_seed: 0,
            sizes: Sizes {
                train: 3375,
                calibration: 1125,
                test: 500,
            },
            methods: vec![Method::Contra, Method::Pcp, Method::Rcp, Method::Mcqr],
            alpha: 0.1,
            replications: 10,
            seed: 0,
            flow: FlowConfig::default(),
            residual_flow: FlowConfig {
                epochs: 50,
                ..FlowConfig::default()
            },
            mcqr: McqrConfig::default(),
            krr: KernelRidgeConfig::default(),
            pcp_samples: DEFAULT_PCP_SAMPLES,
            volume_samples: 1000,
            predictor_fraction: DEFAULT_PREDICTOR_FRACTION,
            parallel: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.replications == 0 {
            return bad("replications must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.methods.is_empty() {
            return bad("no methods requested");
        }
        if self.sizes.train == 0 || self.sizes.calibration == 0 || self.sizes.test == 0 {
            return bad("train, calibration and test sizes must be positive");
        }
        if self.volume_samples < 100 {
            return bad("volume_samples must be at least 100");
        }
        if self.pcp_samples == 0 {
            return bad("pcp_samples must be positive");
        }
        if !(self.predictor_fraction > 0.0 && self.predictor_fraction < 1.0) {
            return bad("predictor_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// One method in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub replication: usize,
    pub method: Method,
    pub coverage: f64,
    /// Mean region volume over test inputs; infinite for an unbounded region.
    pub volume: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub replications: usize,
    pub coverage_mean: f64,
    pub coverage_se: f64,
    pub volume_mean: f64,
    pub volume_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ReplicationRow>,
    pub summary: Vec<MethodSummary>,
    pub seconds: f64,
}

/// Mean and standard error `sd / √n` (zero for a single value).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Groups rows by method, in first-appearance order.
pub fn summarize(rows: &[ReplicationRow]) -> Vec<MethodSummary> {
    let mut methods: Vec<Method> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let mine: Vec<&ReplicationRow> = rows.iter().filter(|r| r.method == m).collect();
            let (coverage_mean, coverage_se) = mean_se(&mine.iter().map(|r| r.coverage).collect::<Vec<_>>());
            let (volume_mean, volume_se) = mean_se(&mine.iter().map(|r| r.volume).collect::<Vec<_>>());
            MethodSummary {
                method: m,
                replications: mine.len(),
                coverage_mean,
                coverage_se,
                volume_mean,
                volume_se,
            }
        })
        .collect()
}

impl MetricsReport {
    pub fn from_rows(config: ExperimentConfig, rows: Vec<ReplicationRow>, seconds: f64) -> Self {
        let summary = summarize(&rows);
        MetricsReport {
            config,
            rows,
            summary,
            seconds,
        }
    }

    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == m)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["replication", "method", "coverage", "volume", "seconds"])?;
        for r in &self.rows {
            w.write_record([
                r.replication.to_string(),
                r.method.label().to_string(),
                r.coverage.to_string(),
                r.volume.to_string(),
                r.seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Methods as rows, coverage and volume with standard errors in
    /// parentheses.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>18} {:>20}", "Method", "Coverage", "Volume");
        for s in &self.summary {
            let cov = format!("{:.3}({:.3})", s.coverage_mean, s.coverage_se);
            let vol = format!("{:.2}({:.3})", s.volume_mean, s.volume_se);
            let _ = writeln!(out, "{:<10} {:>18} {:>20}", s.method.label(), cov, vol);
        }
        out
    }
}

fn fraction(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
}

fn rows_of(ds: &Dataset, idx: &[usize]) -> (ndarray::Array2<f64>, ndarray::Array2<f64>) {
    (ds.x.select(Axis(0), idx), ds.y.select(Axis(0), idx))
}

fn slice_row(v: ArrayView2<f64>, i: usize) -> Vec<f64> {
    v.row(i).to_vec()
}

/// Mean over test inputs of a per-input volume.
fn mean_volume<F>(x: ArrayView2<f64>, mut f: F) -> Result<f64>
where
    F: FnMut(usize, &[f64]) -> Result<f64>,
{
    let mut total = 0.0;
    for i in 0..x.nrows() {
        total += f(i, &slice_row(x, i))?;
    }
    Ok(total / x.nrows() as f64)
}

/// Runs one replication of every configured method.
pub fn run_replication(ds: &Dataset, pool: &[usize], test: &[usize], cfg: &ExperimentConfig, rep: usize) -> Result<Vec<ReplicationRow>> {
    let rep_seed = derive(cfg.seed, rep as u64);
    let (train, cal) = split_pool(pool, cfg.sizes.train, derive_named(rep_seed, "split"))?;
    let (xt, yt) = rows_of(ds, &train);
    let (xc, yc) = rows_of(ds, &cal);
    let (xs, ys) = rows_of(ds, test);
    let vol_seed = derive_named(rep_seed, "volume");
    let b = cfg.volume_samples;
    let alpha = cfg.alpha;
    let mut out = Vec::new();
    let mut push = |method, coverage, volume, seconds| {
        out.push(ReplicationRow {
            replication: rep,
            method,
            coverage,
            volume,
            seconds,
        })
    };

    let needs_flow = cfg.methods.iter().any(|m| matches!(m, Method::Contra | Method::Pcp));
    let flow_start = Instant::now();
    let flow = if needs_flow {
        let fc = FlowConfig {
            seed: derive_named(rep_seed, "flow"),
            ..cfg.flow.clone()
        };
        Some(train_flow(yt.view(), xt.view(), &fc)?)
    } else {
        None
    };
    let flow_seconds = flow_start.elapsed().as_secs_f64();

    for &method in &cfg.methods {
        let start = Instant::now();
        // the shared flow's training time is charged to both methods using it
        let shared = if matches!(method, Method::Contra | Method::Pcp) { flow_seconds } else { 0.0 };
        let took = || shared + start.elapsed().as_secs_f64();
        match method {
            Method::Contra => {
                let p = ContraPredictor::calibrate(flow.clone().expect("flow trained"), yc.view(), xc.view(), alpha)?;
                let coverage = fraction(&p.contains_batch(ys.view(), xs.view())?);
                let volume = if p.ball.radius.value().is_some() {
                    mean_volume(xs.view(), |i, x| Ok(p.volume(x, b, derive(vol_seed, i as u64))?.estimate))?
                } else {
                    f64::INFINITY
                };
                push(method, coverage, volume, took());
            }
            Method::Pcp => {
                let p = pcp_calibrate(flow.clone().expect("flow trained"), xc.view(), yc.view(), cfg.pcp_samples, alpha, derive_named(rep_seed, "pcp"))?;
                let flags = p.contains_batch(ys.view(), xs.view())?;
                let volume = if p.threshold.value().is_some() {
                    mean_volume(xs.view(), |i, x| Ok(p.volume(x, b, derive(vol_seed, i as u64))?.estimate))?
                } else {
                    f64::INFINITY
                };
                push(method, fraction(&flags), volume, took());
            }
            Method::Rcp => {
                let model = rcp_fit(xt.view(), yt.view(), &cfg.krr)?;
                let p = rcp_calibrate(model, xc.view(), yc.view(), alpha)?;
                let coverage = fraction(&p.contains_batch(ys.view(), xs.view())?);
                push(method, coverage, p.volume(), took());
            }
            Method::Mcqr => {
                let mc = McqrConfig {
                    quantile: crate::mcqr::QuantileConfig {
                        seed: derive_named(rep_seed, "mcqr"),
                        ..cfg.mcqr.quantile.clone()
                    },
                    ..cfg.mcqr.clone()
                };
                let p = mcqr_fit((xt.view(), yt.view()), (xc.view(), yc.view()), alpha, &mc)?;
                let regions = p.regions(xs.view());
                let flags: Vec<bool> = regions.iter().zip(ys.rows()).map(|(r, y)| r.contains(&y.to_vec())).collect();
                let volume = regions.iter().map(|r| r.volume()).sum::<f64>() / regions.len() as f64;
                push(method, fraction(&flags), volume, took());
            }
            Method::ResContra => {
                let k = ((train.len() as f64) * cfg.predictor_fraction).round() as usize;
                let k = k.clamp(1, train.len().saturating_sub(1).max(1));
                let split = ResContraSplit {
                    predictor: train[..k].to_vec(),
                    flow: train[k..].to_vec(),
                    calibration: cal.clone(),
                };
                let fc = FlowConfig {
                    seed: derive_named(rep_seed, "residual-flow"),
                    ..cfg.residual_flow.clone()
                };
                let p = rescontra_fit(ds.x.view(), ds.y.view(), split, alpha, &cfg.krr, &fc)?;
                let coverage = fraction(&p.contains_batch(ys.view(), xs.view())?);
                let volume = if p.ball.radius.value().is_some() {
                    mean_volume(xs.view(), |i, x| Ok(p.volume(x, b, derive(vol_seed, i as u64))?.estimate))?
                } else {
                    f64::INFINITY
                };
                push(method, coverage, volume, took());
            }
        }
        log::info!("replication {rep}: {method} done");
    }
    Ok(out)
}

/// Completed rows plus the first failing replication, if any.
#[derive(Debug)]
pub struct PartialRun {
    pub rows: Vec<ReplicationRow>,
    pub failure: Option<(usize, Error)>,
}

/// Runs all replications on an existing dataset. The last `sizes.test`
/// rows form the fixed test block.
pub fn run_on_dataset(ds: &Dataset, cfg: &ExperimentConfig) -> Result<PartialRun> {
    cfg.validate()?;
    let need = cfg.sizes.train + cfg.sizes.calibration + cfg.sizes.test;
    if ds.len() < need {
        return Err(Error::Config(format!("dataset has {} rows but the sizes need {need}", ds.len())));
    }
    let test: Vec<usize> = (ds.len() - cfg.sizes.test..ds.len()).collect();
    let pool: Vec<usize> = (0..cfg.sizes.train + cfg.sizes.calibration).collect();
    let one = |rep: usize| run_replication(ds, &pool, &test, cfg, rep);
    let results: Vec<Result<Vec<ReplicationRow>>> = if cfg.parallel {
        (0..cfg.replications).into_par_iter().map(one).collect()
    } else {
        (0..cfg.replications).map(one).collect()
    };
    let mut rows = Vec::new();
    let mut failure = None;
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(mut v) => rows.append(&mut v),
            Err(e) if failure.is_none() => failure = Some((rep, e)),
            Err(_) => {}
        }
    }
    Ok(PartialRun { rows, failure })
}

/// Generates the configured dataset and runs every replication.
pub fn run_experiment_partial(cfg: &ExperimentConfig) -> Result<(PartialRun, f64)> {
    let start = Instant::now();
    let n = cfg.sizes.train + cfg.sizes.calibration + cfg.sizes.test;
    let ds = cfg.generator.generate(n, cfg.data_seed)?;
    let run = run_on_dataset(&ds, cfg)?;
    Ok((run, start.elapsed().as_secs_f64()))
}

/// As [`run_experiment_partial`], failing on the first failed replication.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let (run, seconds) = run_experiment_partial(cfg)?;
    if let Some((_, e)) = run.failure {
        return Err(e);
    }
    Ok(MetricsReport::from_rows(cfg.clone(), run.rows, seconds))
}

/// Outcome of repeated exchangeable calibration/test draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageTrial {
    pub n2: usize,
    pub alpha: f64,
    pub trials: usize,
    pub mean: f64,
    /// Binomial standard error of `mean` around `expected`.
    pub se: f64,
    /// `k / (n2 + 1)`, or 1 when the threshold is unbounded.
    pub expected: f64,
}

impl CoverageTrial {
    pub fn within(&self, k_se: f64) -> bool {
        (self.mean - self.expected).abs() <= k_se * self.se
    }
}

/// `trials` independent draws of `n2 + 1` exchangeable scores: the first
/// `n2` calibrate a threshold, the last is tested against it.
///
/// `scores(rng, m)` must return `m` fresh i.i.d. scores.
pub fn coverage_bound_trial<F>(n2: usize, alpha: f64, trials: usize, seed: u64, mut scores: F) -> Result<CoverageTrial>
where
    F: FnMut(&mut SeededRng, usize) -> Result<Vec<f64>>,
{
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let expected = match conformal_rank(n2, alpha)? {
        Some(k) => k as f64 / (n2 as f64 + 1.0),
        None => 1.0,
    };
    let mut r = rng(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        let s = scores(&mut r, n2 + 1)?;
        if s.len() != n2 + 1 {
            return Err(Error::shape("trial scores", n2 + 1, s.len()));
        }
        if calibrate_scores(&s[..n2], alpha)?.admits(s[n2]) {
            hits += 1;
        }
    }
    let mean = hits as f64 / trials as f64;
    Ok(CoverageTrial {
        n2,
        alpha,
        trials,
        mean,
        se: (expected * (1.0 - expected) / trials as f64).sqrt(),
        expected,
    })
}

/// i.i.d. standard exponential scores, a generic continuous score source.
pub fn exponential_scores(r: &mut SeededRng, m: usize) -> Result<Vec<f64>> {
    Ok((0..m).map(|_| -(1.0 - r.random::<f64>()).ln()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_se_values() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn coverage_trials_match_order_statistic() {
        let t = coverage_bound_trial(99, 0.1, 20_000, 1, exponential_scores).unwrap();
        assert_eq!(t.expected, 0.9);
        assert!(t.within(3.0), "{t:?}");
        let t = coverage_bound_trial(9, 0.1, 20_000, 2, exponential_scores).unwrap();
        assert_eq!(t.expected, 0.9);
        assert!(t.within(3.0), "{t:?}");
        let t = coverage_bound_trial(1, 0.5, 20_000, 3, exponential_scores).unwrap();
        assert_eq!(t.expected, 0.5);
        assert!(t.within(3.0), "{t:?}");
    }

    #[test]
    fn unbounded_trial_always_covers() {
        let t = coverage_bound_trial(2, 0.1, 100, 1, exponential_scores).unwrap();
        assert_eq!(t.mean, 1.0);
        assert_eq!(t.expected, 1.0);
    }

    #[test]
    fn summary_recomputes_from_rows() {
        let rows: Vec<ReplicationRow> = (0..4)
            .flat_map(|r| {
                [Method::Contra, Method::Rcp].into_iter().map(move |m| ReplicationRow {
                    replication: r,
                    method: m,
                    coverage: 0.9 + 0.01 * r as f64,
                    volume: 10.0 * (r + 1) as f64 + if m == Method::Rcp { 5.0 } else { 0.0 },
                    seconds: 0.0,
                })
            })
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].method, Method::Contra);
        let (m, se) = mean_se(&[10.0, 20.0, 30.0, 40.0]);
        assert_eq!((s[0].volume_mean, s[0].volume_se), (m, se));
        assert_eq!(s[1].volume_mean, m + 5.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            ExperimentConfig {
                replications: 0,
                ..Default::default()
            },
            ExperimentConfig {
                alpha: 1.0,
                ..Default::default()
            },
            ExperimentConfig {
                methods: vec![],
                ..Default::default()
            },
            ExperimentConfig {
                volume_samples: 10,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn degenerate_calibration_covers_everything() {
        let cfg = ExperimentConfig {
            sizes: Sizes {
                train: 60,
                calibration: 2,
                test: 40,
            },
            methods: vec![Method::Contra, Method::Rcp, Method::Mcqr, Method::Pcp],
            replications: 2,
            flow: FlowConfig {
                layers: 2,
                hidden: vec![8],
                epochs: 2,
                ..FlowConfig::default()
            },
            mcqr: McqrConfig {
                optimize_weights: false,
                quantile: crate::mcqr::QuantileConfig {
                    hidden: vec![8],
                    epochs: 2,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..Default::default()
        };
        let report = run_experiment(&cfg).unwrap();
        for s in &report.summary {
            assert_eq!(s.coverage_mean, 1.0, "{}", s.method);
            assert!(s.volume_mean.is_infinite());
        }
    }
}
