//! Exact samplers and GEV marginal utilities.
//!
//! Every replicate draws from its own ChaCha8 stream derived from the
//! [`RngSpec`], so datasets are identical for any thread count.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::Dataset;
use crate::models::{
    rs_weight_matrix, BrownResnickParams, MixtureParams, Model, Point, ReichShabyParams,
};

/// Largest site count for dense Gaussian simulation.
pub const MAX_SIMULATION_SITES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GevParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl GevParams {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) || !mu.is_finite() || !xi.is_finite() {
            return Err(Error::domain(format!(
                "invalid GEV parameters ({mu}, {sigma}, {xi})"
            )));
        }
        Ok(GevParams { mu, sigma, xi })
    }

    pub const UNIT_FRECHET: GevParams = GevParams {
        mu: 1.0,
        sigma: 1.0,
        xi: 1.0,
    };

    pub fn cdf(&self, z: f64) -> f64 {
        let s = (z - self.mu) / self.sigma;
        if self.xi.abs() < 1e-10 {
            return (-(-s).exp()).exp();
        }
        let t = 1.0 + self.xi * s;
        if t <= 0.0 {
            // below the lower end point for xi > 0, above the upper one for xi < 0
            return if self.xi > 0.0 { 0.0 } else { 1.0 };
        }
        (-t.powf(-1.0 / self.xi)).exp()
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let y = -p.ln();
        if self.xi.abs() < 1e-10 {
            return self.mu - self.sigma * y.ln();
        }
        self.mu + self.sigma * (y.powf(-self.xi) - 1.0) / self.xi
    }
}

/// Seed and stream of a reproducible random sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngSpec {
    #[serde(default = "RngSpec::default_algorithm")]
    pub algorithm: Algorithm,
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Chacha8,
}

fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl RngSpec {
    fn default_algorithm() -> Algorithm {
        Algorithm::Chacha8
    }

    pub fn new(seed: u64) -> Self {
        RngSpec {
            algorithm: Algorithm::Chacha8,
            seed,
            stream: 0,
        }
    }

    /// Independent sub-sequence `index` of this one.
    pub fn child(&self, index: u64) -> RngSpec {
        RngSpec {
            algorithm: self.algorithm,
            seed: self.seed,
            stream: mix64(self.stream ^ mix64(index.wrapping_add(1))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }
}

/// `A >= 0` with `E exp(-sA) = exp(-s^alpha)`, by the Kanter /
/// Chambers–Mallows–Stuck representation.
pub fn sample_positive_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    if alpha >= 1.0 {
        return 1.0;
    }
    let u = std::f64::consts::PI * rng.gen::<f64>();
    let e: f64 = Exp1.sample(rng);
    let a = (alpha * u).sin() / u.sin().powf(1.0 / alpha);
    a * (((1.0 - alpha) * u).sin() / e).powf((1.0 - alpha) / alpha)
}

/// GEV(1, alpha, alpha) noise by inversion.
fn gev_noise<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let p: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    GevParams {
        mu: 1.0,
        sigma: alpha,
        xi: alpha,
    }
    .quantile(p)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::domain(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    Ok(())
}

fn replicate_rows(
    m: usize,
    spec: &RngSpec,
    draw: impl Fn(&mut ChaCha8Rng) -> Result<Vec<f64>> + Sync,
) -> Result<Vec<Vec<f64>>> {
    (0..m)
        .into_par_iter()
        .map(|r| draw(&mut spec.child(r as u64).rng()))
        .collect()
}

fn logistic_row(q: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = sample_positive_stable(alpha, rng).powf(alpha);
    (0..q).map(|_| gev_noise(alpha, rng) * scale).collect()
}

/// `m` replicates of the `q`-variate logistic law.
pub fn sample_logistic(q: usize, alpha: f64, m: usize, spec: &RngSpec) -> Result<Dataset> {
    check_alpha(alpha)?;
    if q == 0 {
        return Err(Error::domain("at least one component is required"));
    }
    let rows = replicate_rows(m, spec, |rng| Ok(logistic_row(q, alpha, rng)))?;
    Dataset::with_ids(rows, None, (1..=m as u64).collect())
}

/// Componentwise maximum of independently scaled logistic vectors.
pub fn sample_mixture(
    q: usize,
    params: &MixtureParams,
    m: usize,
    spec: &RngSpec,
) -> Result<Dataset> {
    params.validate()?;
    let rows = replicate_rows(m, spec, |rng| {
        let mut z = vec![0.0f64; q];
        for (&w, &a) in params.weights.iter().zip(&params.alphas) {
            let y = logistic_row(q, a, rng);
            for (zi, yi) in z.iter_mut().zip(y) {
                *zi = zi.max(w * yi);
            }
        }
        Ok(z)
    })?;
    Dataset::with_ids(rows, None, (1..=m as u64).collect())
}

/// `Z(x) = U(x) theta(x)` with `theta(x) = (sum_l A_l w_l(x)^{1/alpha})^alpha`.
pub fn sample_reich_shaby(params: &ReichShabyParams, m: usize, spec: &RngSpec) -> Result<Dataset> {
    params.validate()?;
    let alpha = params.alpha;
    let weights = rs_weight_matrix(&params.locations, &params.knots, params.tau)?;
    let root: Vec<Vec<f64>> = weights
        .iter()
        .map(|row| row.iter().map(|w| w.powf(1.0 / alpha)).collect())
        .collect();
    let rows = replicate_rows(m, spec, |rng| {
        let a: Vec<f64> = (0..params.knots.len())
            .map(|_| sample_positive_stable(alpha, rng))
            .collect();
        Ok(root
            .iter()
            .map(|r| {
                let theta: f64 = r
                    .iter()
                    .zip(&a)
                    .map(|(w, a)| w * a)
                    .sum::<f64>()
                    .powf(alpha);
                gev_noise(alpha, rng) * theta
            })
            .collect())
    })?;
    Dataset::with_ids(
        rows,
        Some(params.locations.clone()),
        (1..=m as u64).collect(),
    )
}

/// Square root factor of `gamma_ik + gamma_jk - gamma_ij` for every anchor `k`.
struct SpectralFactors {
    n: usize,
    gamma: Vec<f64>,
    // factors[k] is n x n with row/column k zero
    factors: Vec<DMatrix<f64>>,
}

impl SpectralFactors {
    fn new(params: &BrownResnickParams) -> Result<Self> {
        let locs = &params.locations;
        let n = locs.len();
        let mut gamma = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let h = (locs[i][0] - locs[j][0]).hypot(locs[i][1] - locs[j][1]);
                gamma[i * n + j] = params.variogram(h);
            }
        }
        let mut factors = Vec::with_capacity(n);
        for k in 0..n {
            let cov = DMatrix::from_fn(n, n, |i, j| {
                gamma[i * n + k] + gamma[j * n + k] - gamma[i * n + j]
            });
            let eig = SymmetricEigen::new(cov);
            let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            let mut f = eig.eigenvectors.clone();
            for (c, &lam) in eig.eigenvalues.iter().enumerate() {
                if lam < -1e-8 * top.max(1.0) {
                    return Err(Error::domain(format!(
                        "variogram covariance is not positive semi-definite (eigenvalue {lam:e})"
                    )));
                }
                let s = lam.max(0.0).sqrt();
                f.column_mut(c).scale_mut(s);
            }
            factors.push(f);
        }
        Ok(SpectralFactors { n, gamma, factors })
    }

    /// `exp(eps_i - eps_k - gamma_ik)`, one spectral function seen from site `k`.
    fn draw<R: Rng + ?Sized>(&self, k: usize, rng: &mut R, normals: &mut [f64], out: &mut [f64]) {
        for v in normals.iter_mut() {
            *v = rng.sample(rand_distr::StandardNormal);
        }
        let f = &self.factors[k];
        for i in 0..self.n {
            let e: f64 = (0..self.n).map(|c| f[(i, c)] * normals[c]).sum();
            out[i] = if i == k {
                1.0
            } else {
                (e - self.gamma[i * self.n + k]).exp()
            };
        }
    }
}

/// Exact Brown–Resnick samples by the extremal-functions algorithm.
pub fn sample_brown_resnick(
    params: &BrownResnickParams,
    m: usize,
    spec: &RngSpec,
) -> Result<Dataset> {
    params.validate()?;
    let n = params.locations.len();
    if n > MAX_SIMULATION_SITES {
        return Err(Error::ResourceLimit(format!(
            "Brown-Resnick simulation supports at most {MAX_SIMULATION_SITES} sites, got {n}"
        )));
    }
    let sf = SpectralFactors::new(params)?;
    let rows = replicate_rows(m, spec, |rng| {
        let mut z = vec![0.0f64; n];
        let mut y = vec![0.0f64; n];
        let mut normals = vec![0.0f64; n];
        for k in 0..n {
            let mut arrival: f64 = Exp1.sample(rng);
            while 1.0 / arrival > z[k] {
                sf.draw(k, rng, &mut normals, &mut y);
                let accept = (0..k).all(|i| y[i] / arrival < z[i]);
                if accept {
                    for i in k..n {
                        z[i] = z[i].max(y[i] / arrival);
                    }
                }
                let step: f64 = Exp1.sample(rng);
                arrival += step;
            }
        }
        Ok(z)
    })?;
    Dataset::with_ids(
        rows,
        Some(params.locations.clone()),
        (1..=m as u64).collect(),
    )
}

/// `n` sites drawn uniformly on the unit square.
pub fn uniform_sites(n: usize, spec: &RngSpec) -> Vec<Point> {
    let mut rng = spec.rng();
    (0..n)
        .map(|_| [rng.gen::<f64>(), rng.gen::<f64>()])
        .collect()
}

/// Dispatch on the model family; `q` is used by the non-spatial families.
pub fn sample_model(model: &Model, q: usize, m: usize, spec: &RngSpec) -> Result<Dataset> {
    match model {
        Model::Logistic(p) => sample_logistic(q, p.alpha, m, spec),
        Model::Mixture(p) => sample_mixture(q, p, m, spec),
        Model::ReichShaby(p) => sample_reich_shaby(p, m, spec),
        Model::BrownResnick(p) => sample_brown_resnick(p, m, spec),
    }
}

/// Dataset CSV with header `replicate,site_1,..,site_Q`.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["replicate".to_string()];
    header.extend((1..=data.n_sites()).map(|i| format!("site_{i}")));
    w.write_record(&header)?;
    for (id, row) in data.replicate_ids().iter().zip(data.replicates()) {
        let mut rec = vec![id.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path, locations: Option<Vec<Point>>) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str, col: usize| {
            s.trim().parse::<f64>().map_err(|e| Error::Parse {
                key: format!("column {}", col + 1),
                line: line + 2,
                message: format!("{e} in {path:?}"),
            })
        };
        let id = rec
            .get(0)
            .unwrap_or("")
            .trim()
            .parse::<u64>()
            .map_err(|e| Error::Parse {
                key: "replicate".into(),
                line: line + 2,
                message: format!("{e} in {path:?}"),
            })?;
        ids.push(id);
        rows.push(
            rec.iter()
                .enumerate()
                .skip(1)
                .map(|(c, s)| parse(s, c))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    Dataset::with_ids(rows, locations, ids)
}

/// Sites CSV with header `id,x,y`.
pub fn write_sites_csv(path: &Path, sites: &[Point]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["id", "x", "y"])?;
    for (i, p) in sites.iter().enumerate() {
        w.write_record(&[
            (i + 1).to_string(),
            format!("{:e}", p[0]),
            format!("{:e}", p[1]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads planar coordinates from the columns headed `x` and `y`, so both
/// `id,x,y` site files and `x,y` knot files are accepted.
pub fn read_sites_csv(path: &Path) -> Result<Vec<Point>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse {
                key: name.into(),
                line: 1,
                message: format!("no `{name}` column in {path:?}"),
            })
    };
    let (cx, cy) = (column("x")?, column("y")?);
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let get = |c: usize, key: &str| -> Result<f64> {
            rec.get(c)
                .ok_or_else(|| Error::Parse {
                    key: key.into(),
                    line: line + 2,
                    message: format!("missing column in {path:?}"),
                })?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    key: key.into(),
                    line: line + 2,
                    message: format!("{e} in {path:?}"),
                })
        };
        out.push([get(cx, "x")?, get(cy, "y")?]);
    }
    Ok(out)
}

/// Model and seed written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSidecar {
    pub model: Model,
    pub rng: RngSpec,
    pub replicates: usize,
    pub sites: usize,
    pub version: String,
}

pub fn write_sidecar(path: &Path, sidecar: &SimulationSidecar) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, sidecar)?;
    writeln!(f)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gev_examples() {
        let uf = GevParams::UNIT_FRECHET;
        assert!((uf.cdf(2.0) - (-0.5f64).exp()).abs() < 1e-15);
        let gumbel = GevParams::new(0.0, 1.0, 0.0).unwrap();
        assert!((gumbel.cdf(0.0) - (-1f64).exp()).abs() < 1e-15);
        for g in [
            uf,
            gumbel,
            GevParams::new(1.0, 0.3, 0.3).unwrap(),
            GevParams::new(0.0, 2.0, -0.4).unwrap(),
        ] {
            for p in [1e-9, 0.01, 0.3, 0.5, 0.9, 0.999_999] {
                assert!((g.cdf(g.quantile(p)) - p).abs() < 1e-12, "{g:?} {p}");
            }
        }
        assert!(GevParams::new(0.0, 0.0, 1.0).is_err());
        assert_eq!(uf.cdf(-1.0), 0.0);
    }

    #[test]
    fn degenerate_stable() {
        let mut rng = RngSpec::new(1).rng();
        assert_eq!(sample_positive_stable(1.0, &mut rng), 1.0);
    }

    #[test]
    fn streams_are_reproducible() {
        let spec = RngSpec::new(42);
        let a = sample_logistic(3, 0.5, 20, &spec).unwrap();
        let b = sample_logistic(3, 0.5, 20, &spec).unwrap();
        assert_eq!(a, b);
        let c = sample_logistic(3, 0.5, 20, &spec.child(1)).unwrap();
        assert_ne!(a, c);
        assert_ne!(spec.child(0), spec.child(1));
    }
}
