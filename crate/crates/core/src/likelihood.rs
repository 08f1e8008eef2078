//! Full partition-sum densities and composite likelihoods.
//!
//! The density of a `Q`-variate max-stable vector is
//! `exp(-V(z)) * sum over partitions pi of prod_{S in pi} (-V_S(z))`.
//! Every product is non-negative, so the sum is taken with log-sum-exp over
//! `sum_{S in pi} ln(-V_S)`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DerivativeVector, LocalMeasure, Model, Point};
use crate::partitions::{
    binomial, enumerate_subsets, rgs_iter, PartitionTable, SubsetId, DEFAULT_TABLE_MEMORY_CAP,
    MAX_PARTITION_DIM,
};

/// Largest composite design that is enumerated and ranked explicitly.
pub const MAX_SCHEME_SUBSETS: u128 = 20_000_000;

/// `m` replicates observed at `Q` sites, on the unit Fréchet scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n_sites: usize,
    /// Row-major `m x Q`.
    values: Vec<f64>,
    locations: Option<Vec<Point>>,
    replicate_ids: Vec<u64>,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, locations: Option<Vec<Point>>) -> Result<Self> {
        let ids = (1..=rows.len() as u64).collect();
        Self::with_ids(rows, locations, ids)
    }

    pub fn with_ids(
        rows: Vec<Vec<f64>>,
        locations: Option<Vec<Point>>,
        replicate_ids: Vec<u64>,
    ) -> Result<Self> {
        let n_sites = match (rows.first(), &locations) {
            (Some(r), _) => r.len(),
            (None, Some(l)) => l.len(),
            (None, None) => 0,
        };
        if n_sites == 0 {
            return Err(Error::domain("dataset needs at least one site"));
        }
        if replicate_ids.len() != rows.len() {
            return Err(Error::domain("one replicate id per row is required"));
        }
        let mut values = Vec::with_capacity(rows.len() * n_sites);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_sites {
                return Err(Error::domain(format!(
                    "replicate {} has {} values, expected {n_sites}",
                    i + 1,
                    r.len()
                )));
            }
            if let Some(v) = r.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::domain(format!(
                    "replicate {} contains the non-positive value {v}",
                    i + 1
                )));
            }
            values.extend_from_slice(r);
        }
        if let Some(locs) = &locations {
            if locs.len() != n_sites {
                return Err(Error::domain(format!(
                    "{} locations for {n_sites} sites",
                    locs.len()
                )));
            }
            for (i, a) in locs.iter().enumerate() {
                if locs[..i].contains(a) {
                    return Err(Error::domain(format!("location {} is duplicated", i + 1)));
                }
            }
        }
        Ok(Dataset {
            n_sites,
            values,
            locations,
            replicate_ids,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_replicates(&self) -> usize {
        self.replicate_ids.len()
    }

    pub fn replicate(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_sites..(i + 1) * self.n_sites]
    }

    pub fn replicates(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_sites)
    }

    pub fn replicate_ids(&self) -> &[u64] {
        &self.replicate_ids
    }

    pub fn locations(&self) -> Option<&[Point]> {
        self.locations.as_deref()
    }

    /// Keep only the listed replicates, in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(rows.len() * self.n_sites);
        for &r in rows {
            values.extend_from_slice(self.replicate(r));
        }
        Dataset {
            n_sites: self.n_sites,
            values,
            locations: self.locations.clone(),
            replicate_ids: rows.iter().map(|&r| self.replicate_ids[r]).collect(),
        }
    }
}

fn table_cache() -> &'static Mutex<HashMap<usize, Arc<PartitionTable>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<PartitionTable>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

static TABLE_MEMORY_CAP: AtomicU64 = AtomicU64::new(DEFAULT_TABLE_MEMORY_CAP as u64);

/// Sets the process-wide byte cap for partition tables used by composite
/// likelihoods.
pub fn set_table_memory_cap(bytes: u64) {
    TABLE_MEMORY_CAP.store(bytes, Ordering::Relaxed);
}

pub fn table_memory_cap() -> u128 {
    TABLE_MEMORY_CAP.load(Ordering::Relaxed) as u128
}

/// Process-wide partition table of dimension `n`, built on first use.
/// A cached table larger than `cap_bytes` is refused like a new one.
pub fn shared_table(n: usize, cap_bytes: u128) -> Result<Arc<PartitionTable>> {
    if let Some(t) = table_cache().lock().expect("table cache poisoned").get(&n) {
        let bytes = t.memory_bytes() as u128;
        if bytes > cap_bytes {
            return Err(Error::MemoryCap {
                what: format!("partition table for n = {n}"),
                required: bytes,
                cap: cap_bytes,
            });
        }
        return Ok(Arc::clone(t));
    }
    let table = Arc::new(PartitionTable::build_with_cap(n, cap_bytes)?);
    let mut cache = table_cache().lock().expect("table cache poisoned");
    Ok(Arc::clone(cache.entry(n).or_insert(table)))
}

/// `ln sum_pi prod_{S in pi} (-V_S)` over the rows of a partition table.
pub fn log_partition_sum(dv: &DerivativeVector, table: &PartitionTable) -> Result<f64> {
    if table.dim() != dv.dim() {
        return Err(Error::domain(format!(
            "partition table of dimension {} used with {} partial derivatives",
            table.dim(),
            dv.dim()
        )));
    }
    let lv = dv.log_neg_table();
    // every row covers each site once, so rescaling V_S by exp(-s |S|)
    // scales all products by exp(-s n); this keeps the row products in
    // range for a linear-domain sum
    let s = lv
        .iter()
        .enumerate()
        .skip(1)
        .map(|(m, &l)| l / m.count_ones() as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    if s.is_finite() {
        let w: Vec<f64> = lv
            .iter()
            .enumerate()
            .map(|(m, &l)| {
                if m == 0 {
                    0.0
                } else {
                    (l - s * m.count_ones() as f64).exp()
                }
            })
            .collect();
        let total: f64 = table
            .rows()
            .map(|row| row.iter().map(|&m| w[m as usize]).product::<f64>())
            .sum();
        if total.is_finite() && total >= 1e-250 {
            return Ok(s * dv.dim() as f64 + total.ln());
        }
    }
    let mut acc = LseAccumulator::default();
    for row in table.rows() {
        acc.push(row.iter().map(|&m| lv[m as usize]).sum());
    }
    Ok(acc.value())
}

/// The same sum enumerated on the fly, for dimensions without a table.
pub fn log_partition_sum_streaming(dv: &DerivativeVector) -> Result<f64> {
    let n = dv.dim();
    let lv = dv.log_neg_table();
    let mut acc = LseAccumulator::default();
    let mut masks = vec![0usize; n];
    for k in 1..=n {
        for rgs in rgs_iter(n, Some(k))? {
            masks[..k].iter_mut().for_each(|m| *m = 0);
            for (i, &b) in rgs.iter().enumerate() {
                masks[b as usize] |= 1 << i;
            }
            acc.push(masks[..k].iter().map(|&m| lv[m]).sum());
        }
    }
    Ok(acc.value())
}

/// Streaming log-sum-exp.
#[derive(Debug, Clone, Copy)]
struct LseAccumulator {
    max: f64,
    sum: f64,
}

impl Default for LseAccumulator {
    fn default() -> Self {
        LseAccumulator {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }
}

impl LseAccumulator {
    #[inline]
    fn push(&mut self, v: f64) {
        if v == f64::NEG_INFINITY {
            return;
        }
        if v <= self.max {
            self.sum += (v - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        }
    }

    fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

fn log_density_local(measure: &dyn LocalMeasure, z: &[f64], table: &PartitionTable) -> Result<f64> {
    let (v, dv) = measure.measure_and_partials(z)?;
    Ok(-v + log_partition_sum(&dv, table)?)
}

/// Full log-density of one `Q`-vector using a caller-supplied table.
pub fn log_density_full(model: &Model, z: &[f64], table: &PartitionTable) -> Result<f64> {
    if table.dim() != z.len() {
        return Err(Error::domain(format!(
            "partition table of dimension {} used with a {}-vector",
            table.dim(),
            z.len()
        )));
    }
    let dv = model.all_partials(z)?;
    let v = model.exponent_measure(z)?;
    Ok(-v + log_partition_sum(&dv, table)?)
}

/// Full log-density with the shared table, or streaming enumeration when
/// the table would exceed `cap_bytes`.
pub fn log_density(model: &Model, z: &[f64], cap_bytes: u128) -> Result<f64> {
    if z.len() > MAX_PARTITION_DIM {
        return Err(Error::ResourceLimit(format!(
            "full density is limited to dimension {MAX_PARTITION_DIM}, got {}",
            z.len()
        )));
    }
    match shared_table(z.len(), cap_bytes) {
        Ok(table) => log_density_full(model, z, &table),
        Err(Error::MemoryCap { .. }) => {
            let dv = model.all_partials(z)?;
            Ok(-model.exponent_measure(z)? + log_partition_sum_streaming(&dv)?)
        }
        Err(e) => Err(e),
    }
}

/// How composite weights are assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    #[default]
    Unit,
    Constant(f64),
    /// One weight per retained subset, in scheme order.
    Explicit(Vec<f64>),
}

/// The retained subsets of a (possibly truncated) composite likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeScheme {
    pub total: usize,
    pub q: usize,
    pub subsets: Vec<SubsetId>,
    pub weights: Vec<f64>,
    pub truncation: f64,
    /// Maximum pairwise distance per retained subset, when sites are known.
    pub max_distance: Option<Vec<f64>>,
    /// `C(Q, q)` before truncation.
    pub candidates: u128,
}

impl CompositeScheme {
    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    /// Partial derivative evaluations per replicate, `|retained| (2^q - 1)`.
    pub fn partials_per_replicate(&self) -> u64 {
        self.subsets.len() as u64 * ((1u64 << self.q) - 1)
    }

    /// A copy with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let mut s = self.clone();
        s.weights.iter_mut().for_each(|w| *w *= factor);
        check_weights(&s.weights)?;
        Ok(s)
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::domain(
            "composite weights must be positive and finite",
        ));
    }
    Ok(())
}

/// Number of subsets kept out of `candidates` for fraction `t`: rounded half
/// away from zero, never fewer than one.
pub fn retained_count(candidates: u128, t: f64) -> u128 {
    // the relative nudge keeps decimal halves such as 0.15 * 10 on the upper side
    let raw = t * candidates as f64 * (1.0 + 1e-12);
    (raw.round() as u128).clamp(1, candidates.max(1))
}

fn max_pairwise_distance(members: &[usize], locations: &[Point]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, &a) in members.iter().enumerate() {
        for &b in &members[..i] {
            let (p, r) = (locations[a], locations[b]);
            d = d.max((p[0] - r[0]).hypot(p[1] - r[1]));
        }
    }
    d
}

/// Subsets of order `q` out of `total` sites, ranked by maximum pairwise
/// distance (ties in lexicographic order) when `locations` are given, and
/// truncated to the first `round(t C(Q, q))`.
pub fn build_scheme(
    total: usize,
    q: usize,
    locations: Option<&[Point]>,
    t: f64,
    rule: WeightRule,
) -> Result<CompositeScheme> {
    if q == 0 || q > total {
        return Err(Error::domain(format!(
            "subset order {q} must lie in 1..={total}"
        )));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::domain(format!(
            "truncation fraction must lie in (0, 1], got {t}"
        )));
    }
    if t < 1.0 && locations.is_none() {
        return Err(Error::domain("truncated schemes need site locations"));
    }
    if let Some(l) = locations {
        if l.len() != total {
            return Err(Error::domain(format!(
                "{} locations for {total} sites",
                l.len()
            )));
        }
    }
    let candidates = binomial(total as u64, q as u64).unwrap_or(u128::MAX);
    if candidates > MAX_SCHEME_SUBSETS {
        return Err(Error::ResourceLimit(format!(
            "{candidates} candidate subsets exceed the enumeration limit {MAX_SCHEME_SUBSETS}"
        )));
    }
    let all: Vec<SubsetId> = enumerate_subsets(total, q)?.collect();
    let keep = retained_count(candidates, t) as usize;
    let (subsets, max_distance): (Vec<SubsetId>, Option<Vec<f64>>) = match locations {
        Some(locs) => {
            let mut ranked: Vec<(f64, SubsetId)> = all
                .into_iter()
                .map(|m| (max_pairwise_distance(m.members(), locs), m))
                .collect();
            // stable: equal distances stay in lexicographic order
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
            ranked.truncate(keep);
            let (d, s) = ranked.into_iter().unzip();
            (s, Some(d))
        }
        None => (all, None),
    };
    let weights = match rule {
        WeightRule::Unit => vec![1.0; subsets.len()],
        WeightRule::Constant(w) => vec![w; subsets.len()],
        WeightRule::Explicit(w) => {
            if w.len() != subsets.len() {
                return Err(Error::domain(format!(
                    "{} explicit weights for {} retained subsets",
                    w.len(),
                    subsets.len()
                )));
            }
            w
        }
    };
    check_weights(&weights)?;
    Ok(CompositeScheme {
        total,
        q,
        subsets,
        weights,
        truncation: t,
        max_distance,
        candidates,
    })
}

fn check_scheme(model: &Model, scheme: &CompositeScheme, n: usize) -> Result<()> {
    if scheme.total != n {
        return Err(Error::domain(format!(
            "scheme covers {} sites but the data have {n}",
            scheme.total
        )));
    }
    if let Some(sites) = model.n_sites() {
        if sites != n {
            return Err(Error::domain(format!(
                "model has {sites} sites but the data have {n}"
            )));
        }
    }
    Ok(())
}

fn gather(z: &[f64], members: &[usize], out: &mut Vec<f64>) {
    out.clear();
    out.extend(members.iter().map(|&i| z[i]));
}

/// Weighted composite log-likelihood of one replicate.
pub fn log_composite(model: &Model, scheme: &CompositeScheme, z: &[f64]) -> Result<f64> {
    check_scheme(model, scheme, z.len())?;
    let table = shared_table(scheme.q, table_memory_cap())?;
    let mut zs = Vec::with_capacity(scheme.q);
    let mut terms = Vec::with_capacity(scheme.len());
    for (s, &w) in scheme.subsets.iter().zip(&scheme.weights) {
        let local = model.local(s.members())?;
        gather(z, s.members(), &mut zs);
        terms.push(w * log_density_local(local.as_ref(), &zs, &table)?);
    }
    Ok(tree_sum(&terms))
}

/// Sum with a fixed pairwise topology, independent of scheduling.
pub fn tree_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    tree_sum(&values[..mid]) + tree_sum(&values[mid..])
}

/// Cost record of one likelihood evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Telemetry {
    pub wall_seconds: f64,
    /// `V_S` evaluations, `|retained| (2^q - 1) m`.
    pub partial_evaluations: u64,
    pub table_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodValue {
    pub value: f64,
    pub telemetry: Telemetry,
}

/// Composite log-likelihood summed over replicates.
///
/// Terms are computed per (subset, replicate) in parallel and combined with
/// [`tree_sum`] in subset-major order, so the result is bit-identical for
/// any thread count.
pub fn log_likelihood_replicates(
    model: &Model,
    scheme: &CompositeScheme,
    data: &Dataset,
) -> Result<LikelihoodValue> {
    let start = Instant::now();
    check_scheme(model, scheme, data.n_sites())?;
    let table = shared_table(scheme.q, table_memory_cap())?;
    let locals: Vec<Box<dyn LocalMeasure + '_>> = scheme
        .subsets
        .par_iter()
        .map(|s| model.local(s.members()))
        .collect::<Result<_>>()?;
    let m = data.n_replicates();
    let terms: Vec<f64> = (0..scheme.len() * m)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(scheme.q),
            |zs, idx| {
                let (s, r) = (idx / m, idx % m);
                gather(data.replicate(r), scheme.subsets[s].members(), zs);
                Ok(scheme.weights[s] * log_density_local(locals[s].as_ref(), zs, &table)?)
            },
        )
        .collect::<Result<_>>()?;
    Ok(LikelihoodValue {
        value: tree_sum(&terms),
        telemetry: Telemetry {
            wall_seconds: start.elapsed().as_secs_f64(),
            partial_evaluations: scheme.partials_per_replicate() * m as u64,
            table_bytes: table.memory_bytes(),
        },
    })
}
