//! Normal distribution utilities and multivariate normal orthant-type
//! probabilities `P(X <= upper)` for `X ~ N(0, R)` with `R` a correlation
//! matrix.
//!
//! Dimension one is exact, dimension two uses the Drezner–Wesolowsky
//! quadrature in the form refined by Genz, and higher dimensions use Genz's
//! separation-of-variables transform with variable reordering, integrated by
//! a randomly shifted Kronecker lattice (square roots of primes as generator)
//! with the baker's transform.
//!
//! The lattice shifts are drawn from a fixed seed that depends only on the
//! configured base seed and the dimension. For a fixed variable ordering the
//! estimate is then a smooth deterministic function of the limits, which is
//! what a derivative-free optimizer and finite-difference checks need.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const MAX_MVN_DIM: usize = 25;
const EIGEN_FLOOR: f64 = 1e-10;

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
    }
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

#[inline]
pub fn ln_std_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal quantile (Wichura, AS 241, about 1e-16 relative accuracy).
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
                + 67265.770927008700853)
                * r
                + 45921.953931549871457)
                * r
                + 13731.693765509461125)
                * r
                + 1971.5909503065514427)
                * r
                + 133.14166789178437745)
                * r
                + 3.387132872796366608)
            / (((((((5226.495278852545925 * r + 28729.085735721942674) * r
                + 39307.89580009271061)
                * r
                + 21213.794301586595867)
                * r
                + 5394.1960214247511077)
                * r
                + 687.1870074920579083)
                * r
                + 42.313330701600911252)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
            + 0.24178072517745061177)
            * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734)
            / (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                + 0.0151986665636164571966)
                * r
                + 0.14810397642748007459)
                * r
                + 0.68976733498510000455)
                * r
                + 1.6763848301838038494)
                * r
                + 2.05319162663775882187)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772)
            / (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                + 1.8463183175100546818e-5)
                * r
                + 7.868691311456132591e-4)
                * r
                + 0.0148753612908506148525)
                * r
                + 0.13692988092273580531)
                * r
                + 0.59983220655588793769)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

// Gauss–Legendre half-rules on [-1, 1] (positive nodes) for 6, 12 and 20 points.
const GL_W: [&[f64]; 3] = [
    &[0.1713244923791705, 0.3607615730481384, 0.4679139345726904],
    &[
        0.04717533638651177,
        0.1069393259953183,
        0.1600783285433464,
        0.2031674267230659,
        0.2334925365383547,
        0.2491470458134029,
    ],
    &[
        0.01761400713915212,
        0.04060142980038694,
        0.06267204833410906,
        0.08327674157670475,
        0.1019301198172404,
        0.1181945319615184,
        0.1316886384491766,
        0.1420961093183821,
        0.1491729864726037,
        0.1527533871307259,
    ],
];
const GL_X: [&[f64]; 3] = [
    &[0.9324695142031522, 0.6612093864662647, 0.2386191860831970],
    &[
        0.9815606342467191,
        0.9041172563704750,
        0.7699026741943050,
        0.5873179542866171,
        0.3678314989981802,
        0.1252334085114692,
    ],
    &[
        0.9931285991850949,
        0.9639719272779138,
        0.9122344282513259,
        0.8391169718222188,
        0.7463319064601508,
        0.6360536807265150,
        0.5108670019508271,
        0.3737060887154196,
        0.2277858511416451,
        0.07652652113349733,
    ],
];

/// Upper bivariate probability `P(X > dh, Y > dk)` with correlation `r`.
fn bvn_upper(dh: f64, dk: f64, r: f64) -> f64 {
    const TWO_PI: f64 = 2.0 * PI;
    if dh == f64::INFINITY || dk == f64::INFINITY {
        return 0.0;
    }
    if dh == f64::NEG_INFINITY {
        return if dk == f64::NEG_INFINITY {
            1.0
        } else {
            std_normal_cdf(-dk)
        };
    }
    if dk == f64::NEG_INFINITY {
        return std_normal_cdf(-dh);
    }
    if r == 0.0 {
        return std_normal_cdf(-dh) * std_normal_cdf(-dk);
    }
    let ng = if r.abs() < 0.3 {
        0
    } else if r.abs() < 0.75 {
        1
    } else {
        2
    };
    let (w, x) = (GL_W[ng], GL_X[ng]);
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for (&wi, &xi) in w.iter().zip(x) {
            for node in [1.0 - xi, 1.0 + xi] {
                let sn = (asr * node / 2.0).sin();
                bvn += wi * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        return (bvn * asr / (2.0 * TWO_PI) + std_normal_cdf(-h) * std_normal_cdf(-k))
            .clamp(0.0, 1.0);
    }
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    if r.abs() < 1.0 {
        let as_ = (1.0 - r) * (1.0 + r);
        let mut a = as_.sqrt();
        let bs = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        bvn = a
            * (-(bs / as_ + hk) / 2.0).exp()
            * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
        if hk > -160.0 {
            let b = bs.sqrt();
            bvn -= (-hk / 2.0).exp()
                * TWO_PI.sqrt()
                * std_normal_cdf(-b / a)
                * b
                * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a /= 2.0;
        for (&wi, &xi) in w.iter().zip(x) {
            for node in [1.0 + xi, 1.0 - xi] {
                let xs = (a * node) * (a * node);
                let rs = (1.0 - xs).sqrt();
                let asr = -(bs / xs + hk) / 2.0;
                if asr > -100.0 {
                    bvn += a
                        * wi
                        * asr.exp()
                        * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                            - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
        }
        bvn = -bvn / TWO_PI;
    }
    if r > 0.0 {
        bvn += std_normal_cdf(-h.max(k));
    } else {
        bvn = -bvn;
        if k > h {
            if h < 0.0 {
                bvn += std_normal_cdf(k) - std_normal_cdf(h);
            } else {
                bvn += std_normal_cdf(-h) - std_normal_cdf(-k);
            }
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// Bivariate standard normal CDF `P(X <= a, Y <= b)` with correlation `rho`.
pub fn bvn_cdf(a: f64, b: f64, rho: f64) -> f64 {
    bvn_upper(-a, -b, rho)
}

/// Quasi–Monte Carlo controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MvnOptions {
    /// Target absolute error (3 standard errors over the randomizations).
    pub abs_tol: f64,
    /// Alternative target relative to the estimate; 0 disables it.
    pub rel_tol: f64,
    /// Lattice points per randomization in the first pass; doubled until the
    /// target is met or `max_points` is reached.
    pub initial_points: usize,
    pub max_points: usize,
    pub randomizations: usize,
    pub seed: u64,
    /// Genz priority ordering of the variables. Turning it off (together
    /// with `initial_points == max_points`) makes the estimate a smooth
    /// function of the limits.
    pub reorder: bool,
}

impl Default for MvnOptions {
    fn default() -> Self {
        MvnOptions {
            abs_tol: 1e-4,
            rel_tol: 0.0,
            initial_points: 1 << 8,
            max_points: 100_000,
            randomizations: 12,
            seed: 0x6d76_6e5f_7365_6564,
            reorder: true,
        }
    }
}

/// `P(X <= upper)` for `X ~ N(0, correlation)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MvnProblem {
    upper: Vec<f64>,
    /// Row-major `d x d`.
    correlation: Vec<f64>,
}

impl MvnProblem {
    /// Validates shape, symmetry and the unit diagonal. Positive
    /// semi-definiteness is checked when the probability is evaluated.
    pub fn new(upper: Vec<f64>, correlation: Vec<f64>) -> Result<Self> {
        let d = upper.len();
        if d == 0 {
            return Err(Error::domain("mvn: dimension must be at least 1"));
        }
        if d > MAX_MVN_DIM {
            return Err(Error::domain(format!(
                "mvn: dimension {d} exceeds {MAX_MVN_DIM}"
            )));
        }
        if correlation.len() != d * d {
            return Err(Error::domain("mvn: correlation matrix has the wrong size"));
        }
        if upper.iter().any(|x| x.is_nan()) || correlation.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("mvn: non-finite input"));
        }
        for i in 0..d {
            if (correlation[i * d + i] - 1.0).abs() > 1e-10 {
                return Err(Error::domain("mvn: correlation diagonal must be 1"));
            }
            for j in 0..i {
                if (correlation[i * d + j] - correlation[j * d + i]).abs() > 1e-10 {
                    return Err(Error::domain("mvn: correlation matrix must be symmetric"));
                }
            }
        }
        Ok(MvnProblem { upper, correlation })
    }

    pub fn identity(upper: Vec<f64>) -> Result<Self> {
        let d = upper.len();
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            c[i * d + i] = 1.0;
        }
        Self::new(upper, c)
    }

    pub fn dim(&self) -> usize {
        self.upper.len()
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn correlation(&self) -> &[f64] {
        &self.correlation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MvnEstimate {
    pub value: f64,
    pub error: f64,
    /// Integrand evaluations over all randomizations.
    pub evaluations: usize,
    /// False when the point budget ran out before either tolerance was met.
    pub converged: bool,
}

impl MvnEstimate {
    fn exact(value: f64) -> Self {
        MvnEstimate {
            value,
            error: 0.0,
            evaluations: 0,
            converged: true,
        }
    }
}

/// Multivariate normal CDF. Dimensions 1 and 2 are exact; higher
/// dimensions use randomized lattice QMC.
pub fn mvn_cdf(problem: &MvnProblem, opts: &MvnOptions) -> Result<MvnEstimate> {
    let d = problem.dim();
    let b = &problem.upper;
    if b.iter().any(|&x| x == f64::NEG_INFINITY) {
        return Ok(MvnEstimate::exact(0.0));
    }
    match d {
        1 => Ok(MvnEstimate::exact(std_normal_cdf(b[0]))),
        2 => {
            let rho = problem.correlation[1].clamp(-1.0, 1.0);
            Ok(MvnEstimate::exact(bvn_cdf(b[0], b[1], rho)))
        }
        _ => mvn_cdf_qmc(problem, opts),
    }
}

/// The QMC route for any dimension (used directly by tests on low
/// dimensions against the exact formulas).
pub fn mvn_cdf_qmc(problem: &MvnProblem, opts: &MvnOptions) -> Result<MvnEstimate> {
    let d = problem.dim();
    // variables with an infinite upper limit drop out
    let keep: Vec<usize> = (0..d)
        .filter(|&i| problem.upper[i] < f64::INFINITY)
        .collect();
    if keep.is_empty() {
        return Ok(MvnEstimate::exact(1.0));
    }
    if problem.upper.iter().any(|&x| x == f64::NEG_INFINITY) {
        return Ok(MvnEstimate::exact(0.0));
    }
    let n = keep.len();
    let mut cov = vec![0.0; n * n];
    for (a, &i) in keep.iter().enumerate() {
        for (b, &j) in keep.iter().enumerate() {
            cov[a * n + b] = problem.correlation[i * d + j];
        }
    }
    let upper: Vec<f64> = keep.iter().map(|&i| problem.upper[i]).collect();
    let cov = regularize(cov, n)?;
    let (chol, limits) = ordered_cholesky(&cov, &upper, n, opts.reorder);
    if n == 1 {
        return Ok(MvnEstimate::exact(std_normal_cdf(limits[0] / chol[0])));
    }
    Ok(lattice_integrate(&chol, &limits, n, opts))
}

/// Checks positive semi-definiteness, clipping small negative eigenvalues.
fn regularize(cov: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    if cholesky_min_pivot(&cov, n) > EIGEN_FLOOR {
        return Ok(cov);
    }
    let m = nalgebra::DMatrix::from_row_slice(n, n, &cov);
    let eig = m.symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -EIGEN_FLOOR {
        return Err(Error::domain(format!(
            "mvn: correlation matrix is not positive semi-definite (eigenvalue {min:.3e})"
        )));
    }
    let clipped = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
    let rebuilt = &eig.eigenvectors
        * nalgebra::DMatrix::from_diagonal(&clipped)
        * eig.eigenvectors.transpose();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let s = (rebuilt[(i, i)] * rebuilt[(j, j)]).sqrt();
            out[i * n + j] = rebuilt[(i, j)] / s;
        }
    }
    Ok(out)
}

fn cholesky_min_pivot(cov: &[f64], n: usize) -> f64 {
    let mut l = vec![0.0; n * n];
    let mut min = f64::INFINITY;
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let v = cov[i * n + i] - s;
                min = min.min(v);
                if v <= 0.0 {
                    return v;
                }
                l[i * n + i] = v.sqrt();
            } else {
                l[i * n + j] = (cov[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    min
}

/// Cholesky factor with Genz's priority ordering: at each step the variable
/// with the smallest conditional probability goes next. Returns the
/// row-major lower factor and the permuted limits.
fn ordered_cholesky(cov: &[f64], upper: &[f64], n: usize, reorder: bool) -> (Vec<f64>, Vec<f64>) {
    let mut cov = cov.to_vec();
    let mut b = upper.to_vec();
    let mut l = vec![0.0; n * n];
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut best = i;
        let mut best_prob = f64::INFINITY;
        let mut best_sd = 1.0;
        let mut best_lim = 0.0;
        let candidates = if reorder { i..n } else { i..i + 1 };
        for j in candidates {
            let resid = cov[j * n + j] - (0..i).map(|k| l[j * n + k] * l[j * n + k]).sum::<f64>();
            let sd = resid.max(EIGEN_FLOOR).sqrt();
            let shift: f64 = (0..i).map(|k| l[j * n + k] * y[k]).sum();
            let lim = (b[j] - shift) / sd;
            let prob = std_normal_cdf(lim);
            if prob < best_prob {
                best = j;
                best_prob = prob;
                best_sd = sd;
                best_lim = lim;
            }
        }
        if best != i {
            b.swap(i, best);
            for k in 0..n {
                cov.swap(i * n + k, best * n + k);
            }
            for k in 0..n {
                cov.swap(k * n + i, k * n + best);
            }
            for k in 0..i {
                l.swap(i * n + k, best * n + k);
            }
        }
        l[i * n + i] = best_sd;
        for r in i + 1..n {
            let s: f64 = (0..i).map(|k| l[r * n + k] * l[i * n + k]).sum();
            l[r * n + i] = (cov[r * n + i] - s) / best_sd;
        }
        // mean of a standard normal truncated to (-inf, lim]
        y[i] = if best_prob > 1e-300 {
            -std_normal_pdf(best_lim) / best_prob
        } else {
            best_lim
        };
    }
    (l, b)
}

const PRIMES: [f64; 25] = [
    2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0, 41.0, 43.0, 47.0, 53.0,
    59.0, 61.0, 67.0, 71.0, 73.0, 79.0, 83.0, 89.0, 97.0,
];

fn lattice_integrate(chol: &[f64], limits: &[f64], n: usize, opts: &MvnOptions) -> MvnEstimate {
    let dims = n - 1;
    let generator: Vec<f64> = PRIMES[..dims].iter().map(|p| p.sqrt()).collect();
    let reps = opts.randomizations.max(2);
    let mut rng =
        ChaCha8Rng::seed_from_u64(opts.seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let shifts: Vec<f64> = (0..reps * dims).map(|_| rng.gen::<f64>()).collect();

    let first = std_normal_cdf(limits[0] / chol[0]);
    let mut sums = vec![0.0; reps];
    let mut done = 0usize;
    let mut target = opts.initial_points.max(1).min(opts.max_points.max(1));
    let mut y = vec![0.0; n];
    let mut w = vec![0.0; dims];
    loop {
        for k in done..target {
            let kf = (k + 1) as f64;
            for (r, sum) in sums.iter_mut().enumerate() {
                for j in 0..dims {
                    let x = (kf * generator[j] + shifts[r * dims + j]).fract();
                    w[j] = (2.0 * x - 1.0).abs();
                }
                *sum += integrand(chol, limits, n, first, &w, &mut y);
            }
        }
        done = target;
        let means: Vec<f64> = sums.iter().map(|s| s / done as f64).collect();
        let mean = means.iter().sum::<f64>() / reps as f64;
        let var =
            means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / ((reps - 1) * reps) as f64;
        let error = 3.0 * var.sqrt();
        let converged = error <= opts.abs_tol || error <= opts.rel_tol * mean;
        if converged || done >= opts.max_points {
            return MvnEstimate {
                value: mean.clamp(0.0, 1.0),
                error,
                evaluations: done * reps,
                converged,
            };
        }
        target = (done * 2).min(opts.max_points);
    }
}

#[inline]
fn integrand(chol: &[f64], limits: &[f64], n: usize, first: f64, w: &[f64], y: &mut [f64]) -> f64 {
    let mut e = first;
    let mut f = e;
    for i in 1..n {
        let u = (w[i - 1] * e).clamp(1e-300, 1.0 - 1e-16);
        y[i - 1] = std_normal_quantile(u);
        let t: f64 = (0..i).map(|k| chol[i * n + k] * y[k]).sum();
        e = std_normal_cdf((limits[i] - t) / chol[i * n + i]);
        f *= e;
        if f == 0.0 {
            break;
        }
    }
    f
}

/// `log Phi_d(upper; R)`, returning `-inf` for a zero probability.
pub fn ln_mvn_cdf(problem: &MvnProblem, opts: &MvnOptions) -> Result<f64> {
    let est = mvn_cdf(problem, opts)?;
    Ok(est.value.ln())
}
