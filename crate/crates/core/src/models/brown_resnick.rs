//! Brown–Resnick measure with the fractional variogram `gamma(h) = (h / lambda)^nu`.
//!
//! Partial derivatives use the lowest site `k` of `S` as anchor. With
//! `Sigma_ij = gamma_ik + gamma_jk - gamma_ij` over the other sites and
//! `u_i = ln(z_i / z_k)`, the vector `u` is Gaussian with mean `-gamma_.k` and
//! covariance `Sigma`, and
//!
//! `-V_S = z_k^{-2} prod_{i in S\k} z_i^{-1} phi(u_s) Phi(u_c | u_s)`,
//!
//! the last factor being the conditional Gaussian probability of the sites
//! outside `S`. Everything except the arguments is independent of `z` and is
//! prepared once per subset.

use serde::{Deserialize, Serialize};

use super::{check_mask, check_point, LocalMeasure, Point};
use crate::error::{Error, Result};
use crate::mvn::{mvn_cdf, std_normal_cdf, MvnOptions, MvnProblem};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrownResnickParams {
    pub lambda: f64,
    pub nu: f64,
    pub locations: Vec<Point>,
    #[serde(default)]
    pub mvn: MvnOptions,
}

impl BrownResnickParams {
    pub fn new(lambda: f64, nu: f64, locations: Vec<Point>) -> Result<Self> {
        let p = BrownResnickParams {
            lambda,
            nu,
            locations,
            mvn: MvnOptions::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_mvn(mut self, mvn: MvnOptions) -> Self {
        self.mvn = mvn;
        self
    }

    pub fn locations(&self) -> &[Point] {
        &self.locations
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::domain(format!(
                "range lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.nu > 0.0 && self.nu <= 2.0) {
            return Err(Error::domain(format!(
                "smoothness nu must lie in (0, 2], got {}",
                self.nu
            )));
        }
        if self.locations.is_empty() {
            return Err(Error::domain("Brown-Resnick needs at least one location"));
        }
        if !self
            .locations
            .iter()
            .all(|p| p[0].is_finite() && p[1].is_finite())
        {
            return Err(Error::domain("coordinates must be finite"));
        }
        for (i, a) in self.locations.iter().enumerate() {
            for (j, b) in self.locations.iter().enumerate().take(i) {
                if a == b {
                    return Err(Error::domain(format!(
                        "sites {} and {} coincide; the variogram would be singular",
                        j + 1,
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn variogram(&self, h: f64) -> f64 {
        (h / self.lambda).powf(self.nu)
    }

    fn gamma(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.locations[i], self.locations[j]);
        self.variogram((a[0] - b[0]).hypot(a[1] - b[1]))
    }

    pub(crate) fn local(&self, sites: &[usize]) -> Result<BrLocal> {
        self.validate()?;
        let q = sites.len();
        let mut gamma = vec![0.0; q * q];
        for a in 0..q {
            for b in 0..a {
                let g = self.gamma(sites[a], sites[b]);
                gamma[a * q + b] = g;
                gamma[b * q + a] = g;
            }
        }
        BrLocal::new(q, gamma, self.mvn)
    }
}

/// `(eta_q, R_q)` such that `V(z) = sum_q Phi_{Q-1}(eta_q; R_q) / z_q`.
///
/// `anchor` is 1-based. `eta_j = a_j / 2 + ln(z_j / z_q) / a_j` with
/// `a_j = sqrt(2 gamma_qj)`, and `R_q` is the correlation of
/// `gamma_qi + gamma_qj - gamma_ij`.
pub fn br_eta_r(
    params: &BrownResnickParams,
    anchor: usize,
    z: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    let n = params.locations.len();
    check_point(z, n)?;
    if anchor == 0 || anchor > n {
        return Err(Error::domain(format!("anchor {anchor} outside 1..={n}")));
    }
    let k = anchor - 1;
    let others: Vec<usize> = (0..n).filter(|&i| i != k).collect();
    let a: Vec<f64> = others
        .iter()
        .map(|&j| (2.0 * params.gamma(k, j)).sqrt())
        .collect();
    let eta = others
        .iter()
        .zip(&a)
        .map(|(&j, &aj)| aj / 2.0 + (z[j] / z[k]).ln() / aj)
        .collect();
    let m = others.len();
    let mut r = vec![0.0; m * m];
    for (x, &i) in others.iter().enumerate() {
        for (y, &j) in others.iter().enumerate() {
            r[x * m + y] = if x == y {
                1.0
            } else {
                (params.gamma(k, i) + params.gamma(k, j) - params.gamma(i, j)) / (a[x] * a[y])
            };
        }
    }
    Ok((eta, r))
}

/// Gaussian structure for one subset mask.
#[derive(Debug, Clone)]
struct MaskPlan {
    anchor: usize,
    s_idx: Vec<usize>,
    c_idx: Vec<usize>,
    // lower Cholesky factor of Sigma_ss, row-major
    chol: Vec<f64>,
    // 0.5 ln det Sigma_ss + 0.5 |s| ln 2 pi
    log_norm: f64,
    gamma_s: Vec<f64>,
    gamma_c: Vec<f64>,
    // Sigma_cs Sigma_ss^{-1}, row-major |c| x |s|
    b: Vec<f64>,
    cond_sd: Vec<f64>,
    cond_corr: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct BrLocal {
    q: usize,
    // a singular subset only fails when it is evaluated
    plans: Vec<Result<MaskPlan, String>>,
    mvn: MvnOptions,
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 1e-13 * a[i * n + i].abs()) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L x = b` in place.
#[inline]
fn forward(l: &[f64], n: usize, x: &mut [f64]) {
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
}

/// Solves `L^T x = b` in place.
fn backward(l: &[f64], n: usize, x: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
}

impl BrLocal {
    fn new(q: usize, gamma: Vec<f64>, mvn: MvnOptions) -> Result<Self> {
        let mut plans = Vec::with_capacity(1 << q);
        plans.push(Err("empty subset".to_string()));
        for mask in 1..(1usize << q) {
            plans.push(Self::plan(q, &gamma, mask));
        }
        Ok(BrLocal { q, plans, mvn })
    }

    fn plan(q: usize, gamma: &[f64], mask: usize) -> Result<MaskPlan, String> {
        let k = mask.trailing_zeros() as usize;
        let g = |i: usize, j: usize| gamma[i * q + j];
        let sigma = |i: usize, j: usize| g(i, k) + g(j, k) - g(i, j);
        let s_idx: Vec<usize> = (0..q).filter(|&i| i != k && mask & (1 << i) != 0).collect();
        let c_idx: Vec<usize> = (0..q).filter(|&i| mask & (1 << i) == 0).collect();
        let (ns, nc) = (s_idx.len(), c_idx.len());

        let mut ss = vec![0.0; ns * ns];
        for (x, &i) in s_idx.iter().enumerate() {
            for (y, &j) in s_idx.iter().enumerate() {
                ss[x * ns + y] = sigma(i, j);
            }
        }
        let chol = cholesky(&ss, ns).ok_or_else(|| {
            format!("variogram covariance is singular for subset mask {mask} (nu = 2 or collinear sites)")
        })?;
        let log_norm =
            (0..ns).map(|i| chol[i * ns + i].ln()).sum::<f64>() + 0.5 * ns as f64 * LN_2PI;

        // b row c = Sigma_ss^{-1} Sigma_sc
        let mut b = vec![0.0; nc * ns];
        let mut col = vec![0.0; ns];
        for (x, &c) in c_idx.iter().enumerate() {
            for (y, &s) in s_idx.iter().enumerate() {
                col[y] = sigma(s, c);
            }
            forward(&chol, ns, &mut col);
            backward(&chol, ns, &mut col);
            b[x * ns..(x + 1) * ns].copy_from_slice(&col);
        }
        let mut cov = vec![0.0; nc * nc];
        for (x, &c1) in c_idx.iter().enumerate() {
            for (y, &c2) in c_idx.iter().enumerate() {
                let reduce: f64 = (0..ns).map(|t| b[x * ns + t] * sigma(s_idx[t], c2)).sum();
                cov[x * nc + y] = sigma(c1, c2) - reduce;
            }
        }
        let floor = 1e-14
            * (0..nc)
                .map(|x| sigma(c_idx[x], c_idx[x]))
                .fold(0.0, f64::max);
        let cond_sd: Vec<f64> = (0..nc).map(|x| cov[x * nc + x].max(floor).sqrt()).collect();
        let mut cond_corr = vec![0.0; nc * nc];
        for x in 0..nc {
            for y in 0..nc {
                cond_corr[x * nc + y] = if x == y {
                    1.0
                } else {
                    (0.5 * (cov[x * nc + y] + cov[y * nc + x]) / (cond_sd[x] * cond_sd[y]))
                        .clamp(-1.0, 1.0)
                };
            }
        }
        Ok(MaskPlan {
            anchor: k,
            gamma_s: s_idx.iter().map(|&i| g(i, k)).collect(),
            gamma_c: c_idx.iter().map(|&i| g(i, k)).collect(),
            s_idx,
            c_idx,
            chol,
            log_norm,
            b,
            cond_sd,
            cond_corr,
        })
    }

    fn eval(&self, lz: &[f64], mask: usize) -> Result<f64> {
        let p = self.plans[mask]
            .as_ref()
            .map_err(|e| Error::Numerical(e.clone()))?;
        let k = p.anchor;
        let (ns, nc) = (p.s_idx.len(), p.c_idx.len());
        let mut r: Vec<f64> = p
            .s_idx
            .iter()
            .zip(&p.gamma_s)
            .map(|(&i, &g)| lz[i] - lz[k] + g)
            .collect();
        let r_raw = r.clone();
        forward(&p.chol, ns, &mut r);
        let quad: f64 = r.iter().map(|v| v * v).sum();
        let mut out = -2.0 * lz[k] - p.s_idx.iter().map(|&i| lz[i]).sum::<f64>();
        out += -0.5 * quad - p.log_norm;
        if nc > 0 {
            let limits: Vec<f64> = (0..nc)
                .map(|x| {
                    let shift: f64 = (0..ns).map(|t| p.b[x * ns + t] * r_raw[t]).sum();
                    (lz[p.c_idx[x]] - lz[k] + p.gamma_c[x] - shift) / p.cond_sd[x]
                })
                .collect();
            let prob = if nc == 1 {
                std_normal_cdf(limits[0])
            } else {
                let problem = MvnProblem::new(limits, p.cond_corr.clone())?;
                mvn_cdf(&problem, &self.mvn)?.value
            };
            out += prob.ln();
        }
        Ok(out)
    }
}

impl LocalMeasure for BrLocal {
    fn dim(&self) -> usize {
        self.q
    }

    fn exponent_measure(&self, z: &[f64]) -> Result<f64> {
        check_point(z, self.q)?;
        let lz: Vec<f64> = z.iter().map(|v| v.ln()).collect();
        let mut total = 0.0;
        for k in 0..self.q {
            total += (self.eval(&lz, 1 << k)? + lz[k]).exp();
        }
        Ok(total)
    }

    fn log_neg_partial(&self, z: &[f64], mask: usize) -> Result<f64> {
        check_mask(mask, self.q)?;
        check_point(z, self.q)?;
        let lz: Vec<f64> = z.iter().map(|v| v.ln()).collect();
        self.eval(&lz, mask)
    }

    fn all_partials(&self, z: &[f64]) -> Result<super::DerivativeVector> {
        check_point(z, self.q)?;
        let lz: Vec<f64> = z.iter().map(|v| v.ln()).collect();
        let mut out = Vec::with_capacity(1 << self.q);
        out.push(f64::NAN);
        for mask in 1..(1usize << self.q) {
            out.push(self.eval(&lz, mask)?);
        }
        Ok(super::DerivativeVector::from_log_neg(self.q, out))
    }
}
