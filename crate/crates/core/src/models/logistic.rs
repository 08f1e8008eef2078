//! Logistic, max-mixture of logistic and Reich–Shaby measures.
//!
//! All three share the form `V(z) = sum_l T_l(z)^{alpha_l}` with
//! `T_l = sum_i (w_li / z_i)^{1/alpha_l}`, so one implementation serves them.
//! For `k = |S|` and a single component,
//! `-V_S = alpha^{-k} |prod_{j<k} (alpha - j)| T^{alpha - k} prod_{i in S} w_i^{1/alpha} z_i^{-1/alpha - 1}`.

use serde::{Deserialize, Serialize};

use super::{check_mask, check_point, log_sum_exp, DerivativeVector, LocalMeasure, Point};
use crate::error::{Error, Result};

fn check_alpha(alpha: f64, what: &str) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::domain(format!(
            "{what} must lie in (0, 1], got {alpha}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticParams {
    pub alpha: f64,
}

impl LogisticParams {
    pub fn new(alpha: f64) -> Result<Self> {
        let p = LogisticParams { alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha, "logistic alpha")
    }

    pub(crate) fn local(&self, q: usize) -> Result<LogisticSum> {
        self.validate()?;
        Ok(LogisticSum::new(
            q,
            vec![Component::new(self.alpha, vec![0.0; q])],
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, alphas: Vec<f64>) -> Result<Self> {
        let p = MixtureParams { weights, alphas };
        p.validate()?;
        Ok(p)
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.alphas.len() {
            return Err(Error::domain(
                "mixture needs matching, non-empty weight and alpha lists",
            ));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::domain("mixture weights must be non-negative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!(
                "mixture weights must sum to 1, got {total}"
            )));
        }
        for &a in &self.alphas {
            check_alpha(a, "mixture alpha")?;
        }
        Ok(())
    }

    pub(crate) fn local(&self, q: usize) -> Result<LogisticSum> {
        self.validate()?;
        let comps = self
            .weights
            .iter()
            .zip(&self.alphas)
            .filter(|(&w, _)| w > 0.0)
            .map(|(&w, &a)| Component::new(a, vec![w.ln(); q]))
            .collect();
        Ok(LogisticSum::new(q, comps))
    }
}

/// Reich–Shaby process with Gaussian kernels at fixed knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReichShabyParams {
    pub alpha: f64,
    pub tau: f64,
    pub knots: Vec<Point>,
    pub locations: Vec<Point>,
}

impl ReichShabyParams {
    pub fn new(alpha: f64, tau: f64, knots: Vec<Point>, locations: Vec<Point>) -> Result<Self> {
        let p = ReichShabyParams {
            alpha,
            tau,
            knots,
            locations,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn locations(&self) -> &[Point] {
        &self.locations
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha, "Reich-Shaby alpha")?;
        check_tau(self.tau)?;
        if self.knots.is_empty() || self.locations.is_empty() {
            return Err(Error::domain(
                "Reich-Shaby needs at least one knot and one location",
            ));
        }
        let finite = |p: &Point| p[0].is_finite() && p[1].is_finite();
        if !self.knots.iter().all(finite) || !self.locations.iter().all(finite) {
            return Err(Error::domain("coordinates must be finite"));
        }
        Ok(())
    }

    /// `ln w_l(x)` for every site in `sites`, as one row of length `L` each.
    pub(crate) fn log_weights(&self, sites: &[usize]) -> Vec<Vec<f64>> {
        sites
            .iter()
            .map(|&s| log_weight_row(&self.locations[s], &self.knots, self.tau))
            .collect()
    }

    pub(crate) fn local(&self, sites: &[usize]) -> Result<LogisticSum> {
        self.validate()?;
        let rows = self.log_weights(sites);
        let comps = (0..self.knots.len())
            .map(|l| Component::new(self.alpha, rows.iter().map(|r| r[l]).collect()))
            .collect();
        Ok(LogisticSum::new(sites.len(), comps))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::domain(format!(
            "kernel bandwidth tau must be positive, got {tau}"
        )));
    }
    Ok(())
}

fn log_weight_row(x: &Point, knots: &[Point], tau: f64) -> Vec<f64> {
    let scale = -0.5 / (tau * tau);
    let mut row: Vec<f64> = knots
        .iter()
        .map(|v| {
            let (dx, dy) = (x[0] - v[0], x[1] - v[1]);
            scale * (dx * dx + dy * dy)
        })
        .collect();
    let norm = log_sum_exp(row.iter().copied());
    for r in &mut row {
        *r -= norm;
    }
    row
}

/// Normalised Gaussian-kernel weights, one row of length `L` per location.
///
/// Normalisation happens on the log scale, so rows sum to one even when
/// every kernel would underflow individually.
pub fn rs_weight_matrix(locations: &[Point], knots: &[Point], tau: f64) -> Result<Vec<Vec<f64>>> {
    check_tau(tau)?;
    if knots.is_empty() {
        return Err(Error::domain("at least one knot is required"));
    }
    Ok(locations
        .iter()
        .map(|x| {
            log_weight_row(x, knots, tau)
                .into_iter()
                .map(f64::exp)
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone)]
pub(crate) struct Component {
    alpha: f64,
    // ln w_i per local site; -inf for a zero weight
    log_w: Vec<f64>,
    // coef[k] = ln|prod_{j<k}(alpha - j)| - k ln alpha, k = 0..=q
    coef: Vec<f64>,
}

impl Component {
    fn new(alpha: f64, log_w: Vec<f64>) -> Self {
        let q = log_w.len();
        let mut coef = Vec::with_capacity(q + 1);
        let mut acc = 0.0;
        coef.push(0.0);
        for j in 0..q {
            acc += (alpha - j as f64).abs().ln() - alpha.ln();
            coef.push(acc);
        }
        Component { alpha, log_w, coef }
    }

    /// Returns `ln T` and fills `g_i = ln(w_i^{1/alpha} z_i^{-1/alpha - 1})`.
    #[inline]
    fn prepare(&self, lz: &[f64], g: &mut [f64]) -> f64 {
        let inv = 1.0 / self.alpha;
        let mut m = f64::NEG_INFINITY;
        for (i, gi) in g.iter_mut().enumerate() {
            let a = (self.log_w[i] - lz[i]) * inv;
            *gi = a;
            m = m.max(a);
        }
        let s: f64 = g.iter().map(|&a| (a - m).exp()).sum();
        for (gi, &l) in g.iter_mut().zip(lz) {
            *gi -= l;
        }
        m + s.ln()
    }

    #[inline]
    fn log_neg_term(&self, ln_t: f64, g: &[f64], mask: usize) -> f64 {
        let k = mask.count_ones() as usize;
        let mut acc = self.coef[k] + (self.alpha - k as f64) * ln_t;
        let mut m = mask;
        while m != 0 {
            acc += g[m.trailing_zeros() as usize];
            m &= m - 1;
        }
        acc
    }
}

/// `sum_l T_l^{alpha_l}` on `q` local sites.
#[derive(Debug, Clone)]
pub(crate) struct LogisticSum {
    q: usize,
    comps: Vec<Component>,
    shared: Option<SharedAlpha>,
}

/// Precomputation for several components with one common `alpha`.
#[derive(Debug, Clone)]
struct SharedAlpha {
    alpha: f64,
    // max_l ln w_li per site
    log_w_max: Vec<f64>,
    // (w_li / max_l w_li)^{1/alpha}, component-major
    ratio: Vec<f64>,
}

impl SharedAlpha {
    fn new(q: usize, comps: &[Component]) -> Option<Self> {
        let alpha = comps.first()?.alpha;
        if comps.len() < 2 || comps.iter().any(|c| c.alpha != alpha) {
            return None;
        }
        let log_w_max: Vec<f64> = (0..q)
            .map(|i| {
                comps
                    .iter()
                    .map(|c| c.log_w[i])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        if log_w_max.iter().any(|w| !w.is_finite()) {
            return None;
        }
        let ratio = comps
            .iter()
            .flat_map(|c| {
                (0..q)
                    .map(|i| ((c.log_w[i] - log_w_max[i]) / alpha).exp())
                    .collect::<Vec<_>>()
            })
            .collect();
        Some(SharedAlpha {
            alpha,
            log_w_max,
            ratio,
        })
    }
}

/// Rescaled sums below this fall back to log-domain evaluation.
const LINEAR_FLOOR: f64 = 1e-250;

impl LogisticSum {
    fn new(q: usize, comps: Vec<Component>) -> Self {
        // a component with no mass on any local site contributes nothing
        let comps = comps
            .into_iter()
            .filter(|c| c.log_w.iter().any(|&w| w > f64::NEG_INFINITY))
            .collect::<Vec<_>>();
        let shared = SharedAlpha::new(q, &comps);
        LogisticSum { q, comps, shared }
    }

    /// `V` and all `ln(-V_S)` through the shared-`alpha` tables; `None` when
    /// some rescaled quantity leaves the normal range.
    fn shared_partials(&self, sh: &SharedAlpha, lz: &[f64]) -> Option<(f64, Vec<f64>)> {
        let q = self.q;
        let n = 1usize << q;
        let l = self.comps.len();
        let alpha = sh.alpha;
        let a: Vec<f64> = (0..q).map(|i| (sh.log_w_max[i] - lz[i]) / alpha).collect();
        let a_max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v: Vec<f64> = a.iter().map(|&x| (x - a_max).exp()).collect();
        let mut s = vec![0.0; l];
        for (c, sc) in s.iter_mut().enumerate() {
            let row = &sh.ratio[c * q..(c + 1) * q];
            *sc = row.iter().zip(&v).map(|(r, x)| r * x).sum();
            if !(*sc >= LINEAR_FLOOR) {
                return None;
            }
        }
        let s_min = s.iter().copied().fold(f64::INFINITY, f64::min);
        let ln_t_min = a_max + s_min.ln();
        let mut measure = 0.0;
        let mut rho = vec![0.0; l];
        let mut h = vec![0.0; l];
        for c in 0..l {
            let ln_rho = (s_min / s[c]).ln();
            rho[c] = s_min / s[c];
            h[c] = ((1.0 - alpha) * ln_rho).exp();
            measure += (alpha * (ln_t_min - ln_rho)).exp();
        }
        let coef = &self.comps[0].coef;
        let mut sum = vec![0.0; n];
        let mut prod = vec![1.0; n];
        let mut hk = vec![0.0; q + 1];
        for c in 0..l {
            let row = &sh.ratio[c * q..(c + 1) * q];
            hk[1] = h[c];
            for k in 2..=q {
                hk[k] = hk[k - 1] * rho[c];
            }
            for mask in 1..n {
                let low = mask.trailing_zeros() as usize;
                prod[mask] = prod[mask & (mask - 1)] * row[low];
                sum[mask] += hk[mask.count_ones() as usize] * prod[mask];
            }
        }
        let mut out = vec![f64::NAN; n];
        let mut ms = vec![0.0; n];
        for mask in 1..n {
            let low = mask.trailing_zeros() as usize;
            ms[mask] = ms[mask & (mask - 1)] + a[low] - lz[low];
            if !(sum[mask] >= LINEAR_FLOOR) {
                return None;
            }
            let k = mask.count_ones() as usize;
            out[mask] = coef[k] + (alpha - k as f64) * ln_t_min + ms[mask] + sum[mask].ln();
        }
        Some((measure, out))
    }

    /// All `ln(-V_S)` of a multi-component sum. Terms are rescaled per site
    /// and per subset size so the component sum runs in the linear domain;
    /// masks whose rescaled sum is not a normal number fall back to
    /// log-domain accumulation.
    fn multi_partials(&self, lz: &[f64], out: &mut [f64]) {
        let q = self.q;
        let n = 1usize << q;
        let l = self.comps.len();
        let mut g = vec![0.0; l * q];
        let mut ln_t = vec![0.0; l];
        for (ci, c) in self.comps.iter().enumerate() {
            ln_t[ci] = c.prepare(lz, &mut g[ci * q..(ci + 1) * q]);
        }
        let mut site_max = vec![f64::NEG_INFINITY; q];
        for ci in 0..l {
            for i in 0..q {
                site_max[i] = site_max[i].max(g[ci * q + i]);
            }
        }
        for m in site_max.iter_mut().filter(|m| !m.is_finite()) {
            *m = 0.0;
        }
        let head = |ci: usize, k: usize| {
            let c = &self.comps[ci];
            c.coef[k] + (c.alpha - k as f64) * ln_t[ci]
        };
        let size_max: Vec<f64> = (0..=q)
            .map(|k| {
                (0..l)
                    .map(|ci| head(ci, k))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mut sum = vec![0.0; n];
        let mut prod = vec![1.0; n];
        let mut h = vec![0.0; q + 1];
        let mut e = vec![0.0; q];
        for ci in 0..l {
            for i in 0..q {
                e[i] = (g[ci * q + i] - site_max[i]).exp();
            }
            for (k, hk) in h.iter_mut().enumerate().skip(1) {
                *hk = (head(ci, k) - size_max[k]).exp();
            }
            for mask in 1..n {
                let low = mask.trailing_zeros() as usize;
                prod[mask] = prod[mask & (mask - 1)] * e[low];
                sum[mask] += h[mask.count_ones() as usize] * prod[mask];
            }
        }
        let mut ms = vec![0.0; n];
        for mask in 1..n {
            let low = mask.trailing_zeros() as usize;
            ms[mask] = ms[mask & (mask - 1)] + site_max[low];
            let k = mask.count_ones() as usize;
            out[mask] = if sum[mask] >= 1e-250 {
                size_max[k] + ms[mask] + sum[mask].ln()
            } else {
                log_sum_exp((0..l).map(|ci| {
                    let mut acc = head(ci, k);
                    let mut m = mask;
                    while m != 0 {
                        acc += g[ci * q + m.trailing_zeros() as usize];
                        m &= m - 1;
                    }
                    acc
                }))
            };
        }
    }

    fn log_z(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_point(z, self.q)?;
        Ok(z.iter().map(|v| v.ln()).collect())
    }
}

impl LocalMeasure for LogisticSum {
    fn dim(&self) -> usize {
        self.q
    }

    fn exponent_measure(&self, z: &[f64]) -> Result<f64> {
        let lz = self.log_z(z)?;
        let mut g = vec![0.0; self.q];
        Ok(self
            .comps
            .iter()
            .map(|c| (c.alpha * c.prepare(&lz, &mut g)).exp())
            .sum())
    }

    fn log_neg_partial(&self, z: &[f64], mask: usize) -> Result<f64> {
        check_mask(mask, self.q)?;
        let lz = self.log_z(z)?;
        let mut g = vec![0.0; self.q];
        let terms: Vec<f64> = self
            .comps
            .iter()
            .map(|c| {
                let ln_t = c.prepare(&lz, &mut g);
                c.log_neg_term(ln_t, &g, mask)
            })
            .collect();
        Ok(log_sum_exp(terms.iter().copied()))
    }

    fn all_partials(&self, z: &[f64]) -> Result<DerivativeVector> {
        let lz = self.log_z(z)?;
        let q = self.q;
        let n = 1usize << q;
        let mut g = vec![0.0; q];
        // gs[mask] = sum_{i in mask} g_i, built incrementally
        let mut gs = vec![0.0; n];
        let mut out = vec![f64::NEG_INFINITY; n];
        if self.comps.len() == 1 {
            let c = &self.comps[0];
            let ln_t = c.prepare(&lz, &mut g);
            for mask in 1..n {
                let low = mask.trailing_zeros() as usize;
                gs[mask] = gs[mask & (mask - 1)] + g[low];
                let k = mask.count_ones() as usize;
                out[mask] = c.coef[k] + (c.alpha - k as f64) * ln_t + gs[mask];
            }
        } else {
            match self
                .shared
                .as_ref()
                .and_then(|sh| self.shared_partials(sh, &lz))
            {
                Some((_, v)) => out = v,
                None => self.multi_partials(&lz, &mut out),
            }
        }
        out[0] = f64::NAN;
        Ok(DerivativeVector::from_log_neg(q, out))
    }

    fn measure_and_partials(&self, z: &[f64]) -> Result<(f64, DerivativeVector)> {
        if let Some(sh) = &self.shared {
            let lz = self.log_z(z)?;
            if let Some((v, out)) = self.shared_partials(sh, &lz) {
                return Ok((v, DerivativeVector::from_log_neg(self.q, out)));
            }
        }
        Ok((self.exponent_measure(z)?, self.all_partials(z)?))
    }
}
