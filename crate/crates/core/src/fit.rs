//! Nelder–Mead maximization of composite log-likelihoods on an
//! unconstrained parameter scale.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{log_likelihood_replicates, CompositeScheme, Dataset};
use crate::models::{BrownResnickParams, LogisticParams, Model, Point, ReichShabyParams};
use crate::mvn::MvnOptions;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NelderMeadOptions {
    pub max_iterations: usize,
    /// Simplex size, max-norm on the transformed scale, at which the search stops.
    pub tolerance: f64,
    /// Offset of the initial vertices from the start along each axis.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_iterations: 1000,
            tolerance: 0.01,
            initial_step: 0.1,
        }
    }
}

/// Result of a raw simplex search.
#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective value after each iteration.
    pub best_trace: Vec<f64>,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Maximizes `objective` from `start`. Non-finite objective values rank
/// below every finite one.
pub fn nelder_mead<F>(
    mut objective: F,
    start: &[f64],
    opts: &NelderMeadOptions,
) -> Result<NelderMeadOutcome>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = start.len();
    if n == 0 {
        return Err(Error::domain("Nelder-Mead needs at least one parameter"));
    }
    if start.iter().any(|v| !v.is_finite()) {
        return Err(Error::Initialization(format!(
            "start {start:?} is not finite"
        )));
    }
    let mut evaluations = 0usize;
    // minimize the negated objective; NaN and -inf become +inf
    let mut cost = |x: &[f64]| {
        evaluations += 1;
        let v = objective(x);
        if v.is_finite() {
            -v
        } else {
            f64::INFINITY
        }
    };
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(start.to_vec());
    for i in 0..n {
        let mut v = start.to_vec();
        v[i] += opts.initial_step;
        simplex.push(v);
    }
    let mut costs = Vec::with_capacity(n + 1);
    for v in &simplex {
        costs.push(cost(v));
    }
    if !costs[0].is_finite() {
        return Err(Error::Initialization(format!(
            "objective is not finite at the start {start:?}"
        )));
    }

    let mut iterations = 0usize;
    let mut converged = false;
    let mut best_trace = Vec::new();
    loop {
        // stable sort keeps earlier vertices first among ties
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        costs = order.iter().map(|&i| costs[i]).collect();

        let size = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if size < opts.tolerance && costs[0].is_finite() {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(REFLECT);
        let fr = cost(&xr);
        if fr < costs[0] {
            let xe = along(REFLECT * EXPAND);
            let fe = cost(&xe);
            if fe < fr {
                simplex[n] = xe;
                costs[n] = fe;
            } else {
                simplex[n] = xr;
                costs[n] = fr;
            }
        } else if fr < costs[n - 1] {
            simplex[n] = xr;
            costs[n] = fr;
        } else {
            let (xc, fc, accept) = if fr < costs[n] {
                let xc = along(REFLECT * CONTRACT);
                let fc = cost(&xc);
                (xc, fc, fc <= fr)
            } else {
                let xc = along(-CONTRACT);
                let fc = cost(&xc);
                (xc, fc, fc < costs[n])
            };
            if accept {
                simplex[n] = xc;
                costs[n] = fc;
            } else {
                for i in 1..=n {
                    let v: Vec<f64> = simplex[i]
                        .iter()
                        .zip(&simplex[0])
                        .map(|(x, b)| b + SHRINK * (x - b))
                        .collect();
                    costs[i] = cost(&v);
                    simplex[i] = v;
                }
            }
        }
        best_trace.push(-costs.iter().copied().fold(f64::INFINITY, f64::min));
    }
    Ok(NelderMeadOutcome {
        x: simplex[0].clone(),
        value: -costs[0],
        iterations,
        evaluations,
        converged,
        best_trace,
    })
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Largest dependence parameter used as a start; `alpha = 1` has no finite logit.
const ALPHA_START_CAP: f64 = 0.999;

/// A family with its fixed structure; the free parameters are fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FitFamily {
    /// Free: `alpha`.
    Logistic,
    /// Free: `alpha`, `tau`; knots held fixed.
    ReichShaby {
        knots: Vec<Point>,
        locations: Vec<Point>,
    },
    /// Free: `lambda`, `nu`.
    BrownResnick {
        locations: Vec<Point>,
        #[serde(default)]
        mvn: MvnOptions,
    },
}

impl FitFamily {
    pub fn name(&self) -> &'static str {
        match self {
            FitFamily::Logistic => "logistic",
            FitFamily::ReichShaby { .. } => "reich_shaby",
            FitFamily::BrownResnick { .. } => "brown_resnick",
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            FitFamily::Logistic => &["alpha"],
            FitFamily::ReichShaby { .. } => &["alpha", "tau"],
            FitFamily::BrownResnick { .. } => &["lambda", "nu"],
        }
    }

    pub fn n_params(&self) -> usize {
        self.param_names().len()
    }

    /// The model at natural-scale parameters.
    pub fn model(&self, theta: &[f64]) -> Result<Model> {
        if theta.len() != self.n_params() {
            return Err(Error::domain(format!(
                "{} parameters given, the {} family has {}",
                theta.len(),
                self.name(),
                self.n_params()
            )));
        }
        Ok(match self {
            FitFamily::Logistic => Model::Logistic(LogisticParams::new(theta[0])?),
            FitFamily::ReichShaby { knots, locations } => Model::ReichShaby(ReichShabyParams::new(
                theta[0],
                theta[1],
                knots.clone(),
                locations.clone(),
            )?),
            FitFamily::BrownResnick { locations, mvn } => Model::BrownResnick(
                BrownResnickParams::new(theta[0], theta[1], locations.clone())?.with_mvn(*mvn),
            ),
        })
    }

    /// Natural to unconstrained scale: `logit(alpha)`, `ln tau`,
    /// `ln lambda`, `logit(nu / 2)`.
    pub fn to_unconstrained(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.model(theta)?;
        Ok(match self {
            FitFamily::Logistic => vec![logit(theta[0].min(ALPHA_START_CAP))],
            FitFamily::ReichShaby { .. } => {
                vec![logit(theta[0].min(ALPHA_START_CAP)), theta[1].ln()]
            }
            FitFamily::BrownResnick { .. } => {
                vec![theta[0].ln(), logit((theta[1] / 2.0).min(ALPHA_START_CAP))]
            }
        })
    }

    pub fn to_natural(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FitFamily::Logistic => vec![expit(x[0])],
            FitFamily::ReichShaby { .. } => vec![expit(x[0]), x[1].exp()],
            FitFamily::BrownResnick { .. } => vec![x[0].exp(), 2.0 * expit(x[1])],
        }
    }
}

/// Cost of the likelihood evaluations of one fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct FitTelemetry {
    pub likelihood_evaluations: usize,
    pub partial_evaluations: u64,
    pub likelihood_seconds: f64,
    pub table_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: String,
    pub param_names: Vec<String>,
    pub theta_hat: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub wall_time: f64,
    pub telemetry: FitTelemetry,
}

/// Maximizes the composite log-likelihood of `data` over the free
/// parameters of `family`, starting from natural-scale `start`.
pub fn fit_model(
    data: &Dataset,
    family: &FitFamily,
    scheme: &CompositeScheme,
    start: &[f64],
    opts: &NelderMeadOptions,
) -> Result<FitResult> {
    let clock = Instant::now();
    let x0 = family
        .to_unconstrained(start)
        .map_err(|e| Error::Initialization(format!("invalid start {start:?}: {e}")))?;
    let mut telemetry = FitTelemetry::default();
    let mut fatal: Option<Error> = None;
    let outcome = nelder_mead(
        |x| {
            if fatal.is_some() {
                return f64::NAN;
            }
            let theta = family.to_natural(x);
            let value = family
                .model(&theta)
                .and_then(|m| log_likelihood_replicates(&m, scheme, data));
            match value {
                Ok(v) => {
                    telemetry.likelihood_evaluations += 1;
                    telemetry.partial_evaluations += v.telemetry.partial_evaluations;
                    telemetry.likelihood_seconds += v.telemetry.wall_seconds;
                    telemetry.table_bytes = telemetry.table_bytes.max(v.telemetry.table_bytes);
                    v.value
                }
                // parameter values where the likelihood breaks down rank last
                Err(Error::Numerical(_) | Error::ModelValidity(_) | Error::Domain(_)) => f64::NAN,
                Err(e) => {
                    fatal = Some(e);
                    f64::NAN
                }
            }
        },
        &x0,
        opts,
    );
    if let Some(e) = fatal {
        return Err(e);
    }
    let outcome = outcome?;
    Ok(FitResult {
        family: family.name().to_string(),
        param_names: family.param_names().iter().map(|s| s.to_string()).collect(),
        theta_hat: family.to_natural(&outcome.x),
        objective: outcome.value,
        iterations: outcome.iterations,
        evaluations: outcome.evaluations,
        converged: outcome.converged,
        wall_time: clock.elapsed().as_secs_f64(),
        telemetry,
    })
}
