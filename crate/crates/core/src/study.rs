//! Monte Carlo efficiency and truncation studies.
//!
//! Each experiment draws sites and data from its own stream, fits every
//! configured (order, truncation) cell, and records the raw estimates.
//! Metrics are a pure function of the raw estimates, so a report can be
//! rebuilt from `raw_estimates.csv` bit for bit. Wall-clock measurements
//! live only in `timings.csv`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit_model, FitFamily, FitResult, NelderMeadOptions};
use crate::likelihood::{build_scheme, log_likelihood_replicates, CompositeScheme, WeightRule};
use crate::models::{LogisticParams, Model, Point};
use crate::mvn::MvnOptions;
use crate::partitions::binomial;
use crate::simulate::{sample_logistic, sample_model, uniform_sites, RngSpec};

/// Regular `[0, 0.2, .., 1]^2` grid of 36 knots.
pub fn default_knots() -> Vec<Point> {
    let mut k = Vec::with_capacity(36);
    for i in 0..6 {
        for j in 0..6 {
            k.push([0.2 * i as f64, 0.2 * j as f64]);
        }
    }
    k
}

/// Generating model with its true parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum StudyModel {
    Logistic {
        alpha: f64,
    },
    ReichShaby {
        alpha: f64,
        tau: f64,
        #[serde(default = "default_knots")]
        knots: Vec<Point>,
    },
    BrownResnick {
        lambda: f64,
        nu: f64,
        #[serde(default)]
        mvn: MvnOptions,
    },
}

impl StudyModel {
    pub fn truth(&self) -> Vec<f64> {
        match *self {
            StudyModel::Logistic { alpha } => vec![alpha],
            StudyModel::ReichShaby { alpha, tau, .. } => vec![alpha, tau],
            StudyModel::BrownResnick { lambda, nu, .. } => vec![lambda, nu],
        }
    }

    pub fn family(&self, sites: &[Point]) -> FitFamily {
        match self {
            StudyModel::Logistic { .. } => FitFamily::Logistic,
            StudyModel::ReichShaby { knots, .. } => FitFamily::ReichShaby {
                knots: knots.clone(),
                locations: sites.to_vec(),
            },
            StudyModel::BrownResnick { mvn, .. } => FitFamily::BrownResnick {
                locations: sites.to_vec(),
                mvn: *mvn,
            },
        }
    }
}

fn default_truncations() -> Vec<f64> {
    vec![1.0]
}

fn default_failure_fraction() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub model: StudyModel,
    /// Number of sites `Q`.
    pub sites: usize,
    /// Fixed sites; when absent, sites are redrawn uniformly on the unit
    /// square for each experiment.
    #[serde(default)]
    pub sites_file: Option<PathBuf>,
    /// Replicates `m` per experiment.
    pub replicates: usize,
    /// Experiments `J`.
    pub experiments: usize,
    /// Composite orders, each in `2..=Q`.
    pub orders: Vec<usize>,
    #[serde(default = "default_truncations")]
    pub truncations: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: NelderMeadOptions,
    /// Largest tolerated fraction of failed fits.
    #[serde(default = "default_failure_fraction")]
    pub max_failure_fraction: f64,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::domain(m));
        if self.experiments < 1 {
            return bad("experiments must be at least 1".into());
        }
        if self.replicates < 1 {
            return bad("replicates must be at least 1".into());
        }
        if self.orders.is_empty() {
            return bad("orders must not be empty".into());
        }
        if let Some(q) = self.orders.iter().find(|&&q| q < 2 || q > self.sites) {
            return bad(format!("order {q} outside 2..={}", self.sites));
        }
        if self.truncations.is_empty() {
            return bad("truncations must not be empty".into());
        }
        if let Some(t) = self.truncations.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
            return bad(format!("truncation {t} outside (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return bad("max_failure_fraction must lie in [0, 1]".into());
        }
        let probe: Vec<Point> = (0..self.sites).map(|i| [i as f64, 0.0]).collect();
        self.model.family(&probe).model(&self.model.truth())?;
        Ok(())
    }

    /// Orders sorted ascending without duplicates.
    fn order_list(&self) -> Vec<usize> {
        let mut o = self.orders.clone();
        o.sort_unstable();
        o.dedup();
        o
    }

    /// Reference cell for relative efficiencies: the highest order, `t = 1`
    /// when configured, otherwise the largest truncation.
    fn reference(&self) -> (usize, f64) {
        let q = *self.order_list().last().expect("validated");
        let t = self.truncations.iter().copied().fold(0.0, f64::max);
        (q, t)
    }
}

/// Outcome of one fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Ok,
    NotConverged,
    Failed,
}

impl FitStatus {
    fn as_str(self) -> &'static str {
        match self {
            FitStatus::Ok => "ok",
            FitStatus::NotConverged => "not_converged",
            FitStatus::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(FitStatus::Ok),
            "not_converged" => Some(FitStatus::NotConverged),
            "failed" => Some(FitStatus::Failed),
            _ => None,
        }
    }
}

/// Deterministic part of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEstimate {
    pub experiment: usize,
    pub q: usize,
    pub t: f64,
    pub status: FitStatus,
    /// Natural-scale estimates; empty when the fit failed.
    pub theta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub subsets: usize,
}

/// Clock readings of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub experiment: usize,
    pub q: usize,
    pub total: usize,
    pub t: f64,
    pub wall_seconds: f64,
    pub likelihood_evaluations: usize,
    pub likelihood_seconds: f64,
}

impl Timing {
    pub fn seconds_per_evaluation(&self) -> f64 {
        if self.likelihood_evaluations == 0 {
            f64::NAN
        } else {
            self.likelihood_seconds / self.likelihood_evaluations as f64
        }
    }
}

/// Metrics of one parameter in one (q, t) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub q: usize,
    pub t: f64,
    pub parameter: String,
    pub truth: f64,
    pub n: usize,
    pub failures: usize,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub rre: f64,
    pub bias_sd_ratio: f64,
    pub mean_iterations: f64,
    pub mean_evaluations: f64,
    /// Median variogram distance ratio against the reference cell
    /// (Brown–Resnick only).
    pub variogram_ratio_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub param_names: Vec<String>,
    pub cells: Vec<CellMetrics>,
    pub raw: Vec<RawEstimate>,
    pub timings: Vec<Timing>,
    pub failures: usize,
    pub fits: usize,
}

fn experiment_sites(fixed: Option<&[Point]>, n: usize, spec: &RngSpec) -> Vec<Point> {
    match fixed {
        Some(s) => s.to_vec(),
        None => uniform_sites(n, spec),
    }
}

fn run_experiment(
    config: &StudyConfig,
    fixed: Option<&[Point]>,
    j: usize,
) -> Result<(Vec<RawEstimate>, Vec<Timing>)> {
    let stream = RngSpec::new(config.seed).child(j as u64);
    let sites = experiment_sites(fixed, config.sites, &stream.child(0));
    let family = config.model.family(&sites);
    let truth = config.model.truth();
    let model = family.model(&truth)?;
    let data = sample_model(&model, config.sites, config.replicates, &stream.child(1))?;
    let mut raw = Vec::new();
    let mut timings = Vec::new();
    for &q in &config.order_list() {
        // identical retained sets give identical fits
        let mut done: Vec<(CompositeScheme, RawEstimate, Timing)> = Vec::new();
        for &t in &config.truncations {
            let scheme = build_scheme(config.sites, q, Some(&sites), t, WeightRule::Unit)?;
            let reuse = done.iter().find(|(s, _, _)| s.subsets == scheme.subsets);
            let (mut r, mut tm) = match reuse {
                Some((_, r, tm)) => (r.clone(), tm.clone()),
                None => {
                    let clock = Instant::now();
                    let fit = fit_model(&data, &family, &scheme, &truth, &config.optimizer);
                    let wall = clock.elapsed().as_secs_f64();
                    let (r, tm) = record(j, q, t, &scheme, fit, wall, config.sites)?;
                    done.push((scheme, r.clone(), tm.clone()));
                    (r, tm)
                }
            };
            r.t = t;
            tm.t = t;
            raw.push(r);
            timings.push(tm);
        }
    }
    Ok((raw, timings))
}

fn record(
    j: usize,
    q: usize,
    t: f64,
    scheme: &CompositeScheme,
    fit: Result<FitResult>,
    wall: f64,
    total: usize,
) -> Result<(RawEstimate, Timing)> {
    match fit {
        Ok(f) => Ok((
            RawEstimate {
                experiment: j,
                q,
                t,
                status: if f.converged {
                    FitStatus::Ok
                } else {
                    FitStatus::NotConverged
                },
                theta: f.theta_hat,
                objective: f.objective,
                iterations: f.iterations,
                evaluations: f.evaluations,
                subsets: scheme.len(),
            },
            Timing {
                experiment: j,
                q,
                total,
                t,
                wall_seconds: wall,
                likelihood_evaluations: f.telemetry.likelihood_evaluations,
                likelihood_seconds: f.telemetry.likelihood_seconds,
            },
        )),
        Err(e @ (Error::MemoryCap { .. } | Error::ResourceLimit(_) | Error::Io(_))) => Err(e),
        Err(_) => Ok((
            RawEstimate {
                experiment: j,
                q,
                t,
                status: FitStatus::Failed,
                theta: Vec::new(),
                objective: f64::NAN,
                iterations: 0,
                evaluations: 0,
                subsets: scheme.len(),
            },
            Timing {
                experiment: j,
                q,
                total,
                t,
                wall_seconds: wall,
                likelihood_evaluations: 0,
                likelihood_seconds: 0.0,
            },
        )),
    }
}

/// Runs every experiment and cell of `config`.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let fixed = match &config.sites_file {
        Some(p) => {
            let s = crate::simulate::read_sites_csv(p)?;
            if s.len() != config.sites {
                return Err(Error::domain(format!(
                    "{} sites in {p:?}, config says {}",
                    s.len(),
                    config.sites
                )));
            }
            Some(s)
        }
        None => None,
    };
    let per: Vec<(Vec<RawEstimate>, Vec<Timing>)> = (0..config.experiments)
        .into_par_iter()
        .map(|j| run_experiment(config, fixed.as_deref(), j))
        .collect::<Result<_>>()?;
    let mut raw = Vec::new();
    let mut timings = Vec::new();
    for (r, t) in per {
        raw.extend(r);
        timings.extend(t);
    }
    let report = assemble(config.clone(), raw, timings)?;
    let allowed = config.max_failure_fraction * report.fits as f64;
    if report.failures as f64 > allowed {
        return Err(Error::Numerical(format!(
            "{} of {} fits failed, more than {:.1}%",
            report.failures,
            report.fits,
            100.0 * config.max_failure_fraction
        )));
    }
    Ok(report)
}

/// Efficiency study: every order at `t = 1`.
pub fn run_efficiency_study(config: &StudyConfig) -> Result<StudyReport> {
    let mut c = config.clone();
    c.truncations = vec![1.0];
    run_study(&c)
}

/// Builds a report from raw estimates.
pub fn assemble(
    config: StudyConfig,
    raw: Vec<RawEstimate>,
    timings: Vec<Timing>,
) -> Result<StudyReport> {
    let probe: Vec<Point> = (0..config.sites).map(|i| [i as f64, 0.0]).collect();
    let param_names: Vec<String> = config
        .model
        .family(&probe)
        .param_names()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let cells = aggregate(&config, &param_names, &raw);
    let failures = raw.iter().filter(|r| r.status != FitStatus::Ok).count();
    Ok(StudyReport {
        fits: raw.len(),
        failures,
        config,
        param_names,
        cells,
        raw,
        timings,
    })
}

fn cell_key(q: usize, t: f64) -> (usize, u64) {
    (q, t.to_bits())
}

/// Bias, standard deviation (divisor `n`), rmse and relative efficiency
/// per cell and parameter; failed and unconverged fits are excluded.
pub fn aggregate(
    config: &StudyConfig,
    param_names: &[String],
    raw: &[RawEstimate],
) -> Vec<CellMetrics> {
    let truth = config.model.truth();
    let mut groups: BTreeMap<(usize, u64), Vec<&RawEstimate>> = BTreeMap::new();
    for r in raw {
        groups.entry(cell_key(r.q, r.t)).or_default().push(r);
    }
    let (rq, rt) = config.reference();
    let reference_rmse: Vec<f64> = (0..truth.len())
        .map(|p| {
            groups
                .get(&cell_key(rq, rt))
                .map(|g| moments(g, p, truth[p]).2)
                .unwrap_or(f64::NAN)
        })
        .collect();
    let is_br = matches!(config.model, StudyModel::BrownResnick { .. });
    let mut out = Vec::new();
    for &q in &config.order_list() {
        for &t in &config.truncations {
            let Some(g) = groups.get(&cell_key(q, t)) else {
                continue;
            };
            let ok: Vec<&RawEstimate> = g
                .iter()
                .copied()
                .filter(|r| r.status == FitStatus::Ok)
                .collect();
            let variogram_ratio_median = if is_br {
                variogram_ratios(&truth, &ok, groups.get(&cell_key(rq, rt)))
            } else {
                None
            };
            for (p, name) in param_names.iter().enumerate() {
                let (bias, sd, rmse) = moments(g, p, truth[p]);
                let n = ok.len();
                let mean_of = |f: fn(&RawEstimate) -> usize| {
                    ok.iter().map(|r| f(r) as f64).sum::<f64>() / n as f64
                };
                out.push(CellMetrics {
                    q,
                    t,
                    parameter: name.clone(),
                    truth: truth[p],
                    n,
                    failures: g.len() - n,
                    bias,
                    sd,
                    rmse,
                    rre: reference_rmse[p] / rmse,
                    bias_sd_ratio: bias.abs() / sd,
                    mean_iterations: mean_of(|r| r.iterations),
                    mean_evaluations: mean_of(|r| r.evaluations),
                    variogram_ratio_median,
                });
            }
        }
    }
    out
}

fn moments(group: &[&RawEstimate], p: usize, truth: f64) -> (f64, f64, f64) {
    let xs: Vec<f64> = group
        .iter()
        .filter(|r| r.status == FitStatus::Ok)
        .map(|r| r.theta[p])
        .collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let bias = mean - truth;
    let sd = var.sqrt();
    (bias, sd, (bias * bias + var).sqrt())
}

fn variogram_ratios(
    truth: &[f64],
    ok: &[&RawEstimate],
    reference: Option<&Vec<&RawEstimate>>,
) -> Option<f64> {
    let reference = reference?;
    let mut ratios: Vec<f64> = ok
        .iter()
        .filter_map(|r| {
            let rf = reference
                .iter()
                .find(|x| x.experiment == r.experiment && x.status == FitStatus::Ok)?;
            Some(variogram_l2_ratio(
                (truth[0], truth[1]),
                (r.theta[0], r.theta[1]),
                (rf.theta[0], rf.theta[1]),
            ))
        })
        .collect();
    if ratios.is_empty() {
        return None;
    }
    ratios.sort_by(f64::total_cmp);
    let n = ratios.len();
    Some(if n % 2 == 1 {
        ratios[n / 2]
    } else {
        0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
    })
}

/// Subintervals of the Simpson rule in [`variogram_l2_ratio`].
pub const VARIOGRAM_QUADRATURE_INTERVALS: usize = 1024;

/// `L2` distance between the variograms `(h / lambda)^nu` of two
/// `(lambda, nu)` pairs over `h` in `[0, sqrt 2]`.
pub fn variogram_l2_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let n = VARIOGRAM_QUADRATURE_INTERVALS;
    let hmax = std::f64::consts::SQRT_2;
    let step = hmax / n as f64;
    let f = |h: f64| {
        let d = (h / a.0).powf(a.1) - (h / b.0).powf(b.1);
        d * d
    };
    let mut s = f(0.0) + f(hmax);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * step);
    }
    (s * step / 3.0).sqrt()
}

/// `d(truth, full) / d(truth, order q)`; 1 when both distances are below
/// `1e-12`, infinite when only the order-`q` distance is.
pub fn variogram_l2_ratio(truth: (f64, f64), fitted_q: (f64, f64), fitted_full: (f64, f64)) -> f64 {
    let dq = variogram_l2_distance(truth, fitted_q);
    let df = variogram_l2_distance(truth, fitted_full);
    match (df < 1e-12, dq < 1e-12) {
        (true, true) => 1.0,
        (false, true) => f64::INFINITY,
        _ => df / dq,
    }
}

/// Per-parameter summary of a truncation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationRow {
    pub q: usize,
    pub parameter: String,
    /// Relative efficiency at each configured truncation, in config order.
    pub rre: Vec<f64>,
    pub best_t: f64,
    pub best_rre: f64,
    /// Smallest `t` at which order `q` beats the best order `q - 1` cell.
    pub smallest_t_beating_previous: Option<f64>,
    /// `100` times the mean per-evaluation time of the best order `q - 1`
    /// cell over that of order `q` at the largest truncation.
    pub time_ratio_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationTable {
    pub truncations: Vec<f64>,
    pub rows: Vec<TruncationRow>,
}

/// Runs the study over all configured truncations and tabulates it.
pub fn run_truncation_study(config: &StudyConfig) -> Result<(StudyReport, TruncationTable)> {
    let report = run_study(config)?;
    let table = truncation_table(&report);
    Ok((report, table))
}

fn mean_seconds_per_evaluation(timings: &[Timing], q: usize, t: f64) -> f64 {
    let xs: Vec<f64> = timings
        .iter()
        .filter(|x| x.q == q && x.t.to_bits() == t.to_bits() && x.likelihood_evaluations > 0)
        .map(Timing::seconds_per_evaluation)
        .collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn truncation_table(report: &StudyReport) -> TruncationTable {
    let ts = &report.config.truncations;
    let t_full = ts.iter().copied().fold(0.0, f64::max);
    let orders = report.config.order_list();
    let mut rows: Vec<TruncationRow> = Vec::new();
    for name in &report.param_names {
        let mut previous: Option<(f64, f64, usize)> = None;
        for &q in &orders {
            let rre: Vec<f64> = ts
                .iter()
                .map(|&t| {
                    report
                        .cells
                        .iter()
                        .find(|c| c.q == q && c.t.to_bits() == t.to_bits() && &c.parameter == name)
                        .map_or(f64::NAN, |c| c.rre)
                })
                .collect();
            // ties go to the smallest truncation
            let mut order: Vec<usize> = (0..ts.len()).collect();
            order.sort_by(|&a, &b| ts[a].total_cmp(&ts[b]));
            let mut best = order[0];
            for &i in &order {
                if rre[i] > rre[best] {
                    best = i;
                }
            }
            let (smallest, ratio) = match previous {
                Some((prev_rre, prev_t, prev_q)) => {
                    let smallest = order.iter().find(|&&i| rre[i] > prev_rre).map(|&i| ts[i]);
                    let num = mean_seconds_per_evaluation(&report.timings, prev_q, prev_t);
                    let den = mean_seconds_per_evaluation(&report.timings, q, t_full);
                    let r = 100.0 * num / den;
                    (smallest, r.is_finite().then_some(r))
                }
                None => (None, None),
            };
            rows.push(TruncationRow {
                q,
                parameter: name.clone(),
                best_t: ts[best],
                best_rre: rre[best],
                rre,
                smallest_t_beating_previous: smallest,
                time_ratio_percent: ratio,
            });
            previous = Some((rows.last().unwrap().best_rre, ts[best], q));
        }
    }
    TruncationTable {
        truncations: ts.clone(),
        rows,
    }
}

/// Measured per-evaluation cost at `(q, Q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostMeasurement {
    pub q: usize,
    pub total: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTarget {
    pub q: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProjection {
    pub q: usize,
    pub total: usize,
    /// `Q` of the measurement used, if any qualifies.
    pub source_total: Option<usize>,
    pub source_seconds: Option<f64>,
    /// `C(Q, q)` when it fits in 128 bits.
    pub subsets: Option<u128>,
    /// `C(Q, q) / C(Q~, q)`.
    pub subset_ratio: Option<f64>,
    pub projected_seconds: Option<f64>,
    /// Fraction of subsets bringing the projection down to the budget,
    /// present when the projection exceeds it.
    pub truncation: Option<f64>,
}

/// `C(n, q) / C(m, q)` as a product of `q` exact-integer ratios.
pub fn binomial_ratio(n: usize, m: usize, q: usize) -> f64 {
    if let (Some(a), Some(b)) = (binomial(n as u64, q as u64), binomial(m as u64, q as u64)) {
        if a < (1u128 << 53) && b < (1u128 << 53) {
            return a as f64 / b as f64;
        }
    }
    (0..q).map(|i| (n - i) as f64 / (m - i) as f64).product()
}

/// Projects per-evaluation seconds to each target from the largest
/// measured `Q~ <= Q` at the same order with time below `threshold`.
pub fn project_cost(
    measured: &[CostMeasurement],
    targets: &[CostTarget],
    threshold: f64,
    budget: f64,
) -> Vec<CostProjection> {
    targets
        .iter()
        .map(|tg| {
            let src = measured
                .iter()
                .filter(|m| {
                    m.q == tg.q && m.total <= tg.total && m.seconds < threshold && m.total >= m.q
                })
                .max_by(|a, b| a.total.cmp(&b.total).then(b.seconds.total_cmp(&a.seconds)));
            let subsets = binomial(tg.total as u64, tg.q as u64);
            match src {
                Some(m) => {
                    let ratio = binomial_ratio(tg.total, m.total, tg.q);
                    let proj = if m.total == tg.total {
                        m.seconds
                    } else {
                        m.seconds * ratio
                    };
                    CostProjection {
                        q: tg.q,
                        total: tg.total,
                        source_total: Some(m.total),
                        source_seconds: Some(m.seconds),
                        subsets,
                        subset_ratio: Some(ratio),
                        projected_seconds: Some(proj),
                        truncation: (proj > budget).then(|| budget / proj),
                    }
                }
                None => CostProjection {
                    q: tg.q,
                    total: tg.total,
                    source_total: None,
                    source_seconds: None,
                    subsets,
                    subset_ratio: None,
                    projected_seconds: None,
                    truncation: None,
                },
            }
        })
        .collect()
}

/// Mean seconds per logistic composite likelihood evaluation at `(q, Q)`
/// over `repeats` evaluations on `m` simulated replicates.
pub fn time_logistic_evaluation(
    q: usize,
    total: usize,
    m: usize,
    alpha: f64,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    let data = sample_logistic(total, alpha, m, &RngSpec::new(seed))?;
    let scheme = build_scheme(total, q, None, 1.0, WeightRule::Unit)?;
    let model = Model::Logistic(LogisticParams::new(alpha)?);
    // warm the partition table cache
    log_likelihood_replicates(&model, &scheme, &data)?;
    let clock = Instant::now();
    for _ in 0..repeats.max(1) {
        log_likelihood_replicates(&model, &scheme, &data)?;
    }
    Ok(clock.elapsed().as_secs_f64() / repeats.max(1) as f64)
}

/// Averages `timings.csv` rows at the largest truncation into
/// per-(q, Q) measurements.
pub fn measurements_from_timings(timings: &[Timing]) -> Vec<CostMeasurement> {
    let mut by: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    let t_full = timings.iter().map(|t| t.t).fold(0.0, f64::max);
    for t in timings
        .iter()
        .filter(|t| t.t == t_full && t.likelihood_evaluations > 0)
    {
        let e = by.entry((t.q, t.total)).or_insert((0.0, 0));
        e.0 += t.seconds_per_evaluation();
        e.1 += 1;
    }
    by.into_iter()
        .map(|((q, total), (s, n))| CostMeasurement {
            q,
            total,
            seconds: s / n as f64,
        })
        .collect()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:e}"))
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(
        path,
    )?)))
}

pub fn write_report_csv(path: &Path, report: &StudyReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "q",
        "t",
        "parameter",
        "truth",
        "n",
        "failures",
        "bias",
        "sd",
        "rmse",
        "rre",
        "bias_sd_ratio",
        "mean_iterations",
        "mean_evaluations",
        "variogram_ratio_median",
    ])?;
    for c in &report.cells {
        w.write_record(&[
            c.q.to_string(),
            format!("{:e}", c.t),
            c.parameter.clone(),
            format!("{:e}", c.truth),
            c.n.to_string(),
            c.failures.to_string(),
            format!("{:e}", c.bias),
            format!("{:e}", c.sd),
            format!("{:e}", c.rmse),
            format!("{:e}", c.rre),
            format!("{:e}", c.bias_sd_ratio),
            format!("{:e}", c.mean_iterations),
            format!("{:e}", c.mean_evaluations),
            fmt_opt(c.variogram_ratio_median),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_raw_csv(path: &Path, report: &StudyReport) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = ["experiment", "q", "t", "status"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(report.param_names.iter().cloned());
    header.extend(
        ["objective", "iterations", "evaluations", "subsets"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in &report.raw {
        let mut rec = vec![
            r.experiment.to_string(),
            r.q.to_string(),
            format!("{:e}", r.t),
            r.status.as_str().to_string(),
        ];
        for p in 0..report.param_names.len() {
            rec.push(r.theta.get(p).map_or(String::new(), |v| format!("{v:e}")));
        }
        rec.push(format!("{:e}", r.objective));
        rec.push(r.iterations.to_string());
        rec.push(r.evaluations.to_string());
        rec.push(r.subsets.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    col: usize,
    key: &str,
    line: usize,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    rec.get(col)
        .unwrap_or("")
        .trim()
        .parse::<T>()
        .map_err(|e| Error::Parse {
            key: key.to_string(),
            line,
            message: e.to_string(),
        })
}

pub fn read_raw_csv(path: &Path, n_params: usize) -> Result<Vec<RawEstimate>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let status_s: String = parse_field(&rec, 3, "status", line)?;
        let status = FitStatus::parse(&status_s).ok_or_else(|| Error::Parse {
            key: "status".into(),
            line,
            message: format!("unknown status {status_s:?}"),
        })?;
        let theta = if status == FitStatus::Failed {
            Vec::new()
        } else {
            (0..n_params)
                .map(|p| parse_field::<f64>(&rec, 4 + p, "parameter", line))
                .collect::<Result<_>>()?
        };
        out.push(RawEstimate {
            experiment: parse_field(&rec, 0, "experiment", line)?,
            q: parse_field(&rec, 1, "q", line)?,
            t: parse_field(&rec, 2, "t", line)?,
            status,
            theta,
            objective: parse_field(&rec, 4 + n_params, "objective", line)?,
            iterations: parse_field(&rec, 5 + n_params, "iterations", line)?,
            evaluations: parse_field(&rec, 6 + n_params, "evaluations", line)?,
            subsets: parse_field(&rec, 7 + n_params, "subsets", line)?,
        });
    }
    Ok(out)
}

pub fn write_timings_csv(path: &Path, timings: &[Timing]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "experiment",
        "q",
        "Q",
        "t",
        "wall_seconds",
        "likelihood_evaluations",
        "likelihood_seconds",
        "seconds_per_evaluation",
    ])?;
    for t in timings {
        w.write_record(&[
            t.experiment.to_string(),
            t.q.to_string(),
            t.total.to_string(),
            format!("{:e}", t.t),
            format!("{:e}", t.wall_seconds),
            t.likelihood_evaluations.to_string(),
            format!("{:e}", t.likelihood_seconds),
            format!("{:e}", t.seconds_per_evaluation()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_timings_csv(path: &Path) -> Result<Vec<Timing>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        out.push(Timing {
            experiment: parse_field(&rec, 0, "experiment", line)?,
            q: parse_field(&rec, 1, "q", line)?,
            total: parse_field(&rec, 2, "Q", line)?,
            t: parse_field(&rec, 3, "t", line)?,
            wall_seconds: parse_field(&rec, 4, "wall_seconds", line)?,
            likelihood_evaluations: parse_field(&rec, 5, "likelihood_evaluations", line)?,
            likelihood_seconds: parse_field(&rec, 6, "likelihood_seconds", line)?,
        });
    }
    Ok(out)
}

pub fn write_truncation_csv(path: &Path, table: &TruncationTable) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = vec!["q".into(), "parameter".into()];
    header.extend(table.truncations.iter().map(|t| format!("rre_t{t}")));
    header.extend(
        ["best_t", "best_rre", "smallest_t_beating_previous"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![r.q.to_string(), r.parameter.clone()];
        rec.extend(r.rre.iter().map(|v| format!("{v:e}")));
        rec.push(format!("{:e}", r.best_t));
        rec.push(format!("{:e}", r.best_rre));
        rec.push(fmt_opt(r.smallest_t_beating_previous));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Elapsed-time ratios of the truncation table; clock-dependent.
pub fn write_truncation_timing_csv(path: &Path, table: &TruncationTable) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["q", "parameter", "time_ratio_percent"])?;
    for r in &table.rows {
        w.write_record(&[
            r.q.to_string(),
            r.parameter.clone(),
            fmt_opt(r.time_ratio_percent),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_projection_csv(path: &Path, rows: &[CostProjection]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "q",
        "Q",
        "source_Q",
        "source_seconds",
        "subsets",
        "subset_ratio",
        "projected_seconds",
        "truncation",
    ])?;
    for r in rows {
        w.write_record(&[
            r.q.to_string(),
            r.total.to_string(),
            r.source_total.map_or(String::new(), |v| v.to_string()),
            fmt_opt(r.source_seconds),
            r.subsets.map_or(String::new(), |v| v.to_string()),
            fmt_opt(r.subset_ratio),
            fmt_opt(r.projected_seconds),
            fmt_opt(r.truncation),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.csv`, `raw_estimates.csv` and `timings.csv`, plus the
/// truncation tables when more than one truncation is configured.
pub fn write_study_outputs(dir: &Path, report: &StudyReport) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    write_report_csv(&out("report.csv"), report)?;
    write_raw_csv(&out("raw_estimates.csv"), report)?;
    write_timings_csv(&out("timings.csv"), &report.timings)?;
    if report.config.truncations.len() > 1 {
        let table = truncation_table(report);
        write_truncation_csv(&out("truncation.csv"), &table)?;
        write_truncation_timing_csv(&out("truncation_timings.csv"), &table)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knot_grid() {
        let k = default_knots();
        assert_eq!(k.len(), 36);
        assert_eq!(k[35], [1.0, 1.0]);
    }

    #[test]
    fn variogram_degenerate_cases() {
        let truth = (0.42, 1.5);
        assert_eq!(variogram_l2_ratio(truth, truth, truth), 1.0);
        assert_eq!(variogram_l2_ratio(truth, (0.5, 1.2), (0.5, 1.2)), 1.0);
        assert!(variogram_l2_ratio(truth, (0.462, 1.5), truth) < 1.0);
    }

    #[test]
    fn projection_examples() {
        let m = [CostMeasurement {
            q: 2,
            total: 50,
            seconds: 0.5,
        }];
        let p = project_cost(
            &m,
            &[
                CostTarget { q: 2, total: 50 },
                CostTarget { q: 2, total: 100 },
                CostTarget { q: 3, total: 10 },
            ],
            25.0,
            1.0,
        );
        assert_eq!(p[0].projected_seconds, Some(0.5));
        assert_eq!(p[1].subsets, Some(4950));
        assert_eq!(p[1].subset_ratio, Some(4950.0 / 1225.0));
        assert_eq!(p[1].truncation, Some(1.0 / (0.5 * 4950.0 / 1225.0)));
        assert!(p[2].projected_seconds.is_none());
        assert!((binomial_ratio(100_000, 50, 8) / 1.0e24).is_finite());
    }
}
