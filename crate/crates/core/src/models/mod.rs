//! Exponent measures `V(z)` and their partial derivatives `V_S(z)`.
//!
//! Every model here satisfies `-V_S(z) >= 0` for all non-empty `S`, so
//! derivatives are carried as `ln(-V_S)` throughout. A value of `-inf`
//! encodes an exact zero (for instance mixed partials of the logistic model
//! at `alpha = 1`).
//!
//! A [`Model`] describes the process at all of its sites. Likelihood code asks
//! it for a [`LocalMeasure`] on a subset of sites; the local measure caches
//! whatever does not depend on `z` (kernel weights, conditional Gaussian
//! structure) so that it can be reused across replicates.

mod brown_resnick;
mod logistic;

pub use brown_resnick::{br_eta_r, BrownResnickParams};
pub use logistic::{rs_weight_matrix, LogisticParams, MixtureParams, ReichShabyParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partitions::SubsetId;

/// Planar coordinates.
pub type Point = [f64; 2];

/// Largest local dimension for the closed-form logistic-type models.
pub const MAX_LOGISTIC_DIM: usize = 13;
/// Largest local dimension for Brown–Resnick.
pub const MAX_BROWN_RESNICK_DIM: usize = 11;

/// All `2^q - 1` partial derivatives of `V` at one point, addressed by block
/// bitmask. Stored as `ln(-V_S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeVector {
    q: usize,
    // index 0 is unused
    log_neg: Vec<f64>,
}

impl DerivativeVector {
    pub(crate) fn from_log_neg(q: usize, log_neg: Vec<f64>) -> Self {
        debug_assert_eq!(log_neg.len(), 1 << q);
        DerivativeVector { q, log_neg }
    }

    /// Build from raw values `V_S`, `values[mask - 1]`. Each `-V_S` must be
    /// non-negative up to `1e-12`.
    pub fn from_values(q: usize, values: &[f64]) -> Result<Self> {
        if values.len() != (1 << q) - 1 {
            return Err(Error::domain(format!(
                "derivative vector for q = {q} needs {} entries, got {}",
                (1 << q) - 1,
                values.len()
            )));
        }
        let mut log_neg = Vec::with_capacity(1 << q);
        log_neg.push(f64::NAN);
        for (i, &v) in values.iter().enumerate() {
            let neg = -v;
            if neg < -1e-12 || neg.is_nan() {
                return Err(Error::ModelValidity(format!(
                    "-V_S = {neg:e} < 0 for subset mask {}",
                    i + 1
                )));
            }
            log_neg.push(neg.max(0.0).ln());
        }
        Ok(DerivativeVector { q, log_neg })
    }

    pub fn dim(&self) -> usize {
        self.q
    }

    /// Number of stored derivatives, `2^q - 1`.
    pub fn len(&self) -> usize {
        self.log_neg.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `V_S` for the subset with bitmask `mask`.
    pub fn value(&self, mask: usize) -> f64 {
        -self.log_neg[mask].exp()
    }

    /// `ln(-V_S)`.
    #[inline]
    pub fn log_neg(&self, mask: usize) -> f64 {
        self.log_neg[mask]
    }

    /// Whole table, index = mask, entry 0 unused.
    #[inline]
    pub fn log_neg_table(&self) -> &[f64] {
        &self.log_neg
    }
}

/// An exponent measure restricted to a fixed set of `q` sites.
pub trait LocalMeasure: Send + Sync {
    fn dim(&self) -> usize;

    /// `V(z)`.
    fn exponent_measure(&self, z: &[f64]) -> Result<f64>;

    /// `ln(-V_S(z))` for the subset with bitmask `mask`.
    fn log_neg_partial(&self, z: &[f64], mask: usize) -> Result<f64>;

    /// `V_S(z)`.
    fn partial(&self, z: &[f64], mask: usize) -> Result<f64> {
        Ok(-self.log_neg_partial(z, mask)?.exp())
    }

    fn all_partials(&self, z: &[f64]) -> Result<DerivativeVector> {
        let q = self.dim();
        check_point(z, q)?;
        let mut out = Vec::with_capacity(1 << q);
        out.push(f64::NAN);
        for mask in 1..(1usize << q) {
            out.push(self.log_neg_partial(z, mask)?);
        }
        Ok(DerivativeVector::from_log_neg(q, out))
    }

    /// `V(z)` together with every partial derivative.
    fn measure_and_partials(&self, z: &[f64]) -> Result<(f64, DerivativeVector)> {
        Ok((self.exponent_measure(z)?, self.all_partials(z)?))
    }
}

pub(crate) fn check_point(z: &[f64], q: usize) -> Result<()> {
    if z.len() != q {
        return Err(Error::domain(format!(
            "point has {} components, measure has dimension {q}",
            z.len()
        )));
    }
    if let Some(bad) = z.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::domain(format!(
            "exponent measure needs positive finite arguments, got {bad}"
        )));
    }
    Ok(())
}

pub(crate) fn check_mask(mask: usize, q: usize) -> Result<()> {
    if mask == 0 || mask >= (1 << q) {
        return Err(Error::domain(format!(
            "subset mask {mask} is not a non-empty subset of a {q}-set"
        )));
    }
    Ok(())
}

/// `ln(sum exp(v))`, `-inf` for an empty or all `-inf` input.
#[inline]
pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// One of the supported max-stable families with all of its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Model {
    Logistic(LogisticParams),
    Mixture(MixtureParams),
    ReichShaby(ReichShabyParams),
    BrownResnick(BrownResnickParams),
}

impl Model {
    pub fn family_name(&self) -> &'static str {
        match self {
            Model::Logistic(_) => "logistic",
            Model::Mixture(_) => "mixture",
            Model::ReichShaby(_) => "reich_shaby",
            Model::BrownResnick(_) => "brown_resnick",
        }
    }

    /// Number of sites for spatial models; `None` when any dimension works.
    pub fn n_sites(&self) -> Option<usize> {
        match self {
            Model::Logistic(_) | Model::Mixture(_) => None,
            Model::ReichShaby(p) => Some(p.locations().len()),
            Model::BrownResnick(p) => Some(p.locations().len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Model::Logistic(p) => p.validate(),
            Model::Mixture(p) => p.validate(),
            Model::ReichShaby(p) => p.validate(),
            Model::BrownResnick(p) => p.validate(),
        }
    }

    /// The measure on the given sites (0-based, strictly increasing).
    pub fn local(&self, sites: &[usize]) -> Result<Box<dyn LocalMeasure + '_>> {
        if sites.is_empty() {
            return Err(Error::domain("local measure needs at least one site"));
        }
        if sites.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("site indices must be strictly increasing"));
        }
        if let Some(n) = self.n_sites() {
            if sites[sites.len() - 1] >= n {
                return Err(Error::domain(format!(
                    "site index {} out of range for {n} sites",
                    sites[sites.len() - 1]
                )));
            }
        }
        match self {
            Model::Logistic(p) => Ok(Box::new(p.local(sites.len())?)),
            Model::Mixture(p) => Ok(Box::new(p.local(sites.len())?)),
            Model::ReichShaby(p) => Ok(Box::new(p.local(sites)?)),
            Model::BrownResnick(p) => Ok(Box::new(p.local(sites)?)),
        }
    }

    /// The measure on all sites, or on `q` anonymous components for the
    /// non-spatial families.
    pub fn full(&self, q: usize) -> Result<Box<dyn LocalMeasure + '_>> {
        if let Some(n) = self.n_sites() {
            if n != q {
                return Err(Error::domain(format!(
                    "model has {n} sites but the point has {q} components"
                )));
            }
        }
        let sites: Vec<usize> = (0..q).collect();
        self.local(&sites)
    }

    pub fn exponent_measure(&self, z: &[f64]) -> Result<f64> {
        self.full(z.len())?.exponent_measure(z)
    }

    /// `V_S(z)` for a subset of the components of `z`.
    pub fn exponent_measure_partial(&self, z: &[f64], subset: &SubsetId) -> Result<f64> {
        let mask = subset
            .rank()
            .filter(|_| subset.members().iter().all(|&i| i < z.len()))
            .ok_or_else(|| Error::domain("subset does not index the point"))?;
        self.full(z.len())?.partial(z, mask as usize)
    }

    pub fn all_partials(&self, z: &[f64]) -> Result<DerivativeVector> {
        let limit = match self {
            Model::BrownResnick(_) => MAX_BROWN_RESNICK_DIM,
            _ => MAX_LOGISTIC_DIM,
        };
        if z.len() > limit {
            return Err(Error::ResourceLimit(format!(
                "all partial derivatives of the {} model are limited to dimension {limit}, got {}",
                self.family_name(),
                z.len()
            )));
        }
        self.full(z.len())?.all_partials(z)
    }
}
