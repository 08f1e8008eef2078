//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use maxstable::models::{
    BrownResnickParams, LocalMeasure, LogisticParams, MixtureParams, Model, Point, ReichShabyParams,
};
use maxstable::mvn::{MvnOptions, MvnProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Central difference in direction `i`, Richardson-extrapolated once.
pub fn richardson<F: Fn(&[f64]) -> f64>(f: F, z: &[f64], i: usize, rel_step: f64) -> f64 {
    let central = |h: f64| {
        let mut up = z.to_vec();
        let mut dn = z.to_vec();
        up[i] += h;
        dn[i] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    };
    let h = rel_step * z[i];
    (4.0 * central(h / 2.0) - central(h)) / 3.0
}

/// Outcome of checking one analytic `V_S` against a numerical derivative of
/// the analytic `V_{S \ i}` (or of `V` when `|S| = 1`), `i = max S`.
#[derive(Debug, Clone, Copy)]
pub struct FdCheck {
    pub mask: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|numeric - analytic| / |analytic|`, or 0 when both vanish.
    pub rel_err: f64,
    /// Rounding floor of the difference quotient, `1e-9 |f| / z_i`.
    pub floor: f64,
    /// Natural magnitude `prod_{i in S} z_i^{-1} / min_{i in S} z_i` of `V_S`.
    pub scale: f64,
}

impl FdCheck {
    /// Both values are zero to working precision relative to `scale`; the
    /// difference quotient carries no relative information there.
    pub fn negligible(&self) -> bool {
        self.analytic.abs() < 1e-12 * self.scale && self.numeric.abs() < 1e-12 * self.scale
    }

    pub fn passes(&self, tol: f64) -> bool {
        let err = (self.numeric - self.analytic).abs();
        err <= tol * self.analytic.abs() || err <= self.floor || self.negligible()
    }
}

/// Checks `V_S` against a difference quotient of the analytic `V_{S \ i}`
/// (or of `V` when `|S| = 1`) in direction `i = max S`.
pub fn fd_check(measure: &dyn LocalMeasure, z: &[f64], mask: usize) -> FdCheck {
    let q = measure.dim();
    let i = usize::BITS as usize - 1 - mask.leading_zeros() as usize;
    let rest = mask & !(1 << i);
    let base = |x: &[f64]| {
        if rest == 0 {
            measure.exponent_measure(x).unwrap()
        } else {
            measure.partial(x, rest).unwrap()
        }
    };
    let numeric = richardson(base, z, i, 1e-4);
    let analytic = measure.partial(z, mask).unwrap();
    let rel_err = if analytic == 0.0 && numeric == 0.0 {
        0.0
    } else {
        (numeric - analytic).abs() / analytic.abs()
    };
    let floor = 1e-9 * base(z).abs() / z[i];
    let members = (0..q).filter(|j| mask & (1 << j) != 0);
    let scale = members.clone().map(|j| 1.0 / z[j]).product::<f64>()
        / members.map(|j| z[j]).fold(f64::INFINITY, f64::min);
    FdCheck {
        mask,
        analytic,
        numeric,
        rel_err,
        floor,
        scale,
    }
}

/// Every subset with at most `max_order` elements; each derivative level is
/// differenced from the analytic level below it, down to `V` itself.
pub fn fd_checks(measure: &dyn LocalMeasure, z: &[f64], max_order: usize) -> Vec<FdCheck> {
    (1..(1usize << measure.dim()))
        .filter(|m| m.count_ones() as usize <= max_order)
        .map(|m| fd_check(measure, z, m))
        .collect()
}

/// Fixed-size lattice designs of increasing accuracy. With a fixed point
/// count the estimate is a smooth function of the limits, which the
/// difference quotients rely on. The last two levels also keep the
/// variable order fixed, so the estimate stays smooth when the priority
/// ordering would switch inside the stencil.
pub fn mvn_levels() -> Vec<MvnOptions> {
    [
        (1usize << 12, true),
        (1 << 15, true),
        (1 << 18, true),
        (1 << 20, false),
        (1 << 22, false),
    ]
    .iter()
    .map(|&(n, reorder)| MvnOptions {
        abs_tol: 0.0,
        initial_points: n,
        max_points: n,
        reorder,
        ..Default::default()
    })
    .collect()
}

/// Result of the escalating check for one Brown–Resnick derivative.
#[derive(Debug, Clone, Copy)]
pub struct LeveledCheck {
    pub check: FdCheck,
    /// Index into the escalation levels of the integration accuracy used.
    pub level: usize,
}

/// Checks `V_S` at the cheapest integration level; a failing comparison is
/// repeated at the next level, and the last attempt is the verdict.
pub fn fd_check_escalating(
    levels: &[MvnOptions],
    lambda: f64,
    nu: f64,
    locations: &[Point],
    z: &[f64],
    mask: usize,
    tol: f64,
) -> LeveledCheck {
    let mut last = None;
    for (level, opts) in levels.iter().enumerate() {
        let model = Model::BrownResnick(
            BrownResnickParams::new(lambda, nu, locations.to_vec())
                .unwrap()
                .with_mvn(*opts),
        );
        let local = model.full(z.len()).unwrap();
        let check = fd_check(local.as_ref(), z, mask);
        last = Some(LeveledCheck { check, level });
        if check.passes(tol) {
            break;
        }
    }
    last.unwrap()
}

pub fn unit_square(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.gen::<f64>(), rng.gen::<f64>()])
        .collect()
}

/// `Phi` from the complementary error function.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// The same probability with variables listed in `perm` order.
pub fn permuted(p: &MvnProblem, perm: &[usize]) -> MvnProblem {
    let d = p.dim();
    let upper = perm.iter().map(|&i| p.upper()[i]).collect();
    let mut corr = vec![0.0; d * d];
    for (a, &i) in perm.iter().enumerate() {
        for (b, &j) in perm.iter().enumerate() {
            corr[a * d + b] = p.correlation()[i * d + j];
        }
    }
    MvnProblem::new(upper, corr).unwrap()
}

/// `A A^T` rescaled to unit diagonal, `A` a `d x d` standard normal draw.
pub fn random_correlation(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let a: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            c[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum();
        }
    }
    let diag: Vec<f64> = (0..d).map(|i| c[i * d + i].sqrt()).collect();
    for i in 0..d {
        for j in 0..d {
            c[i * d + j] = if i == j {
                1.0
            } else {
                c[i * d + j] / (diag[i] * diag[j])
            };
        }
    }
    c
}

pub fn random_z(rng: &mut ChaCha8Rng, q: usize) -> Vec<f64> {
    (0..q).map(|_| rng.gen_range(-1.0f64..1.5).exp()).collect()
}

pub fn random_logistic(rng: &mut ChaCha8Rng) -> Model {
    Model::Logistic(LogisticParams::new(rng.gen_range(0.1..1.0)).unwrap())
}

pub fn random_mixture(rng: &mut ChaCha8Rng) -> Model {
    let l = rng.gen_range(1..=3);
    let raw: Vec<f64> = (0..l).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let head: f64 = weights[..l - 1].iter().sum();
    weights[l - 1] = 1.0 - head;
    let alphas = (0..l).map(|_| rng.gen_range(0.1..1.0)).collect();
    Model::Mixture(MixtureParams::new(weights, alphas).unwrap())
}

pub fn random_reich_shaby(rng: &mut ChaCha8Rng, q: usize) -> Model {
    let l = rng.gen_range(2..=9);
    let knots = unit_square(rng, l);
    let locations = unit_square(rng, q);
    Model::ReichShaby(
        ReichShabyParams::new(
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.1..0.5),
            knots,
            locations,
        )
        .unwrap(),
    )
}

pub fn random_brown_resnick(rng: &mut ChaCha8Rng, q: usize) -> Model {
    random_brown_resnick_with(rng, q, MvnOptions::default())
}

pub fn random_brown_resnick_with(rng: &mut ChaCha8Rng, q: usize, mvn: MvnOptions) -> Model {
    let locations = unit_square(rng, q);
    Model::BrownResnick(
        BrownResnickParams::new(rng.gen_range(0.2..1.0), rng.gen_range(0.3..1.8), locations)
            .unwrap()
            .with_mvn(mvn),
    )
}

/// Outcome of the Brown–Resnick finite-difference suite.
#[derive(Debug, Default)]
pub struct BrFdSummary {
    pub checks: usize,
    pub failures: Vec<String>,
    /// Checks that needed more than the cheapest integration level.
    pub escalated: usize,
    pub negligible: usize,
    pub worst: f64,
}

/// `instances` random Brown–Resnick problems with `q <= max_q`, every
/// subset with `|S| <= 4`. Checks run in parallel; the summary does not
/// depend on the thread count.
pub fn br_fd_suite(seed: u64, instances: usize, max_q: usize, tol: f64) -> BrFdSummary {
    br_fd_suite_with(&mvn_levels(), seed, instances, max_q, tol)
}

pub fn br_fd_suite_with(
    levels: &[MvnOptions],
    seed: u64,
    instances: usize,
    max_q: usize,
    tol: f64,
) -> BrFdSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let problems: Vec<_> = (0..instances)
        .map(|_| {
            let q = rng.gen_range(1..=max_q);
            let locations = unit_square(&mut rng, q);
            let lambda = rng.gen_range(0.2..1.0);
            let nu = rng.gen_range(0.3..1.8);
            let z = random_z(&mut rng, q);
            (q, locations, lambda, nu, z)
        })
        .collect();
    let jobs: Vec<(usize, usize)> = problems
        .iter()
        .enumerate()
        .flat_map(|(inst, p)| {
            (1..(1usize << p.0))
                .filter(|m| m.count_ones() <= 4)
                .map(move |m| (inst, m))
        })
        .collect();
    let results: Vec<LeveledCheck> = jobs
        .par_iter()
        .map(|&(inst, mask)| {
            let (_, locations, lambda, nu, z) = &problems[inst];
            fd_check_escalating(levels, *lambda, *nu, locations, z, mask, tol)
        })
        .collect();
    let mut out = BrFdSummary::default();
    for (&(inst, _), r) in jobs.iter().zip(&results) {
        let (q, _, lambda, nu, _) = &problems[inst];
        out.checks += 1;
        if r.level > 0 {
            out.escalated += 1;
        }
        let c = r.check;
        if c.negligible() {
            out.negligible += 1;
        } else if c.numeric.abs() > c.floor {
            out.worst = out.worst.max(c.rel_err);
        }
        if !c.passes(tol) || c.analytic > 0.0 {
            out.failures.push(format!(
                "instance {inst} (q = {q}, lambda = {lambda}, nu = {nu}): {c:?}"
            ));
        }
    }
    out
}

/// Asymptotic Kolmogorov–Smirnov p-value for a one-sample statistic.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// One-sample KS statistic against a continuous CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}
