//! Command-line front end: run configuration, dispatch, provenance.
//!
//! Every run writes `config.toml` (the resolved configuration) and
//! `manifest.json` into its output directory, and nothing outside it.
//! On failure the artifacts of the run are removed and the manifest records
//! the error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fit::{fit_model, FitFamily, NelderMeadOptions};
use crate::likelihood::{build_scheme, set_table_memory_cap, WeightRule};
use crate::models::{
    BrownResnickParams, LogisticParams, MixtureParams, Model, Point, ReichShabyParams,
};
use crate::mvn::MvnOptions;
use crate::partitions::{
    bell_number, rgs_iter, stirling2, PartitionTable, DEFAULT_TABLE_MEMORY_CAP,
};
use crate::simulate::{
    read_dataset_csv, read_sites_csv, sample_model, uniform_sites, write_dataset_csv,
    write_sidecar, write_sites_csv, RngSpec, SimulationSidecar,
};
use crate::study::{
    default_knots, measurements_from_timings, project_cost, read_timings_csv, run_study,
    write_projection_csv, write_study_outputs, CostMeasurement, CostTarget, StudyConfig,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
/// Environment variable overriding the partition-table memory cap.
pub const MEMORY_CAP_ENV: &str = "MAXSTABLE_MEMORY_CAP";

pub const EXIT_OK: i32 = 0;
/// Command line not understood.
pub const EXIT_USAGE: i32 = 1;
/// A rerun produced outputs that differ from its manifest.
pub const EXIT_MISMATCH: i32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Fit,
    Study,
    Project,
    Partitions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Logistic,
    Mixture,
    ReichShaby,
    BrownResnick,
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "logistic" => Ok(Family::Logistic),
            "mixture" => Ok(Family::Mixture),
            "reich_shaby" => Ok(Family::ReichShaby),
            "brown_resnick" => Ok(Family::BrownResnick),
            _ => Err(format!(
                "unknown model `{s}`, expected logistic, mixture, reich_shaby or brown_resnick"
            )),
        }
    }
}

impl Family {
    fn key(self) -> &'static str {
        match self {
            Family::Logistic => "logistic",
            Family::Mixture => "mixture",
            Family::ReichShaby => "reich_shaby",
            Family::BrownResnick => "brown_resnick",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticBlock {
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureBlock {
    pub weights: Vec<f64>,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReichShabyBlock {
    pub alpha: f64,
    pub tau: f64,
    /// Inline knots; the 36-knot unit grid when neither this nor
    /// `knots_file` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrownResnickBlock {
    pub lambda: f64,
    pub nu: f64,
    #[serde(default)]
    pub mvn: MvnOptions,
}

/// Either a site file or a count of uniformly drawn sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SitesBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

fn default_t() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeBlock {
    pub q: usize,
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default)]
    pub weights: WeightRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateBlock {
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitBlock {
    /// Dataset CSV; starting values come from the model block.
    pub data: PathBuf,
    #[serde(default)]
    pub optimizer: NelderMeadOptions,
}

fn default_threshold() -> f64 {
    25.0
}

fn default_budget() -> f64 {
    86_400.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectBlock {
    /// `timings.csv` of a study; its `t = 1` rows become measurements.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<PathBuf>,
    #[serde(default)]
    pub measurements: Vec<CostMeasurement>,
    /// `[q, Q]` pairs.
    pub targets: Vec<[usize; 2]>,
    /// Measurements at or above this many seconds are not extrapolated from.
    #[serde(default = "default_threshold")]
    pub threshold_seconds: f64,
    #[serde(default = "default_budget")]
    pub budget_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionsBlock {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(default)]
    pub count_only: bool,
}

fn default_memory() -> u64 {
    DEFAULT_TABLE_MEMORY_CAP as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resources {
    /// Partition-table memory cap in bytes.
    #[serde(default = "default_memory")]
    pub memory_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl Default for Resources {
    fn default() -> Self {
        Resources {
            memory_bytes: default_memory(),
            wall_clock_seconds: None,
        }
    }
}

fn default_rng() -> RngSpec {
    RngSpec::new(0)
}

/// A complete, validated run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<Family>,
    #[serde(default = "default_rng")]
    pub rng: RngSpec,
    #[serde(default)]
    pub resources: Resources,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logistic: Option<LogisticBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reich_shaby: Option<ReichShabyBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brown_resnick: Option<BrownResnickBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<SitesBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project: Option<ProjectBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions: Option<PartitionsBlock>,
}

/// 1-based line of the byte offset `pos` in `src`.
fn line_of(src: &str, pos: usize) -> usize {
    src[..pos.min(src.len())]
        .bytes()
        .filter(|&b| b == b'\n')
        .count()
        + 1
}

/// Line declaring `key` (dotted, e.g. `logistic.alpha`) in `src`, or 0 when
/// it is not written out.
pub fn key_line(src: &str, key: &str) -> usize {
    let (table, leaf) = match key.rsplit_once('.') {
        Some((t, l)) => (t, l),
        None => ("", key),
    };
    let mut current = String::new();
    let mut header_line = 0;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[') {
            current = h
                .trim_start_matches('[')
                .trim_end_matches(']')
                .trim()
                .to_string();
            if current == key {
                header_line = i + 1;
            }
            continue;
        }
        if current == table {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim().trim_matches('"') == leaf {
                    return i + 1;
                }
            }
        }
    }
    header_line
}

fn parse_error(src: &str, key: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        key: key.to_string(),
        line: key_line(src, key),
        message: message.into(),
    }
}

fn from_toml_error(src: &str, e: toml::de::Error) -> Error {
    let message = e.message().to_string();
    let line = e.span().map_or(0, |s| line_of(src, s.start));
    let quoted = message
        .split('`')
        .nth(1)
        .filter(|_| message.starts_with("unknown field") || message.starts_with("missing field"));
    let key = match quoted {
        Some(k) => k.to_string(),
        None => src
            .lines()
            .nth(line.saturating_sub(1))
            .map(|l| {
                l.split('=')
                    .next()
                    .unwrap_or("")
                    .trim()
                    .trim_matches(['[', ']'])
                    .to_string()
            })
            .unwrap_or_default(),
    };
    Error::Parse { key, line, message }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses a run configuration, resolving relative paths against the
/// directory of `path`.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let src = fs::read_to_string(path)?;
    let base = path
        .parent()
        .map(|p| {
            if p.as_os_str().is_empty() {
                Path::new(".")
            } else {
                p
            }
        })
        .unwrap_or(Path::new("."));
    let base = fs::canonicalize(base)?;
    parse_config_str(&src, &base)
}

/// Parses configuration text; relative paths are taken against `base`.
pub fn parse_config_str(src: &str, base: &Path) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(src).map_err(|e| from_toml_error(src, e))?;
    cfg.output_dir = resolve(base, &cfg.output_dir);
    if let Some(s) = cfg.sites.as_mut() {
        if let Some(f) = s.file.as_mut() {
            *f = resolve(base, f);
        }
    }
    if let Some(f) = cfg.fit.as_mut() {
        f.data = resolve(base, &f.data);
    }
    if let Some(p) = cfg.project.as_mut() {
        if let Some(t) = p.timings.as_mut() {
            *t = resolve(base, t);
        }
    }
    if let Some(s) = cfg.study.as_mut() {
        if let Some(f) = s.sites_file.as_mut() {
            *f = resolve(base, f);
        }
    }
    if let Some(rs) = cfg.reich_shaby.as_mut() {
        if rs.knots.is_some() && rs.knots_file.is_some() {
            return Err(parse_error(
                src,
                "reich_shaby.knots_file",
                "give either knots or knots_file",
            ));
        }
        if let Some(f) = rs.knots_file.take() {
            let f = resolve(base, &f);
            rs.knots = Some(read_sites_csv(&f)?);
        } else if rs.knots.is_none() {
            rs.knots = Some(default_knots());
        }
    }
    validate(&cfg).map_err(|(key, msg)| parse_error(src, &key, msg))?;
    Ok(cfg)
}

type Invalid = (String, String);

fn need<T>(v: &Option<T>, key: &str, cmd: &str) -> std::result::Result<(), Invalid> {
    if v.is_none() {
        return Err((key.to_string(), format!("[{key}] is required by `{cmd}`")));
    }
    Ok(())
}

fn model_key(family: Family, e: &Error) -> String {
    let msg = e.to_string();
    let field = ["alpha", "tau", "lambda", "nu", "weights", "alphas", "knots"]
        .into_iter()
        .find(|f| msg.contains(f))
        .unwrap_or("");
    if field.is_empty() {
        family.key().to_string()
    } else {
        format!("{}.{}", family.key(), field)
    }
}

fn validate(cfg: &RunConfig) -> std::result::Result<(), Invalid> {
    let blocks = [
        (Family::Logistic, cfg.logistic.is_some()),
        (Family::Mixture, cfg.mixture.is_some()),
        (Family::ReichShaby, cfg.reich_shaby.is_some()),
        (Family::BrownResnick, cfg.brown_resnick.is_some()),
    ];
    for (f, present) in blocks {
        if present && cfg.model != Some(f) {
            return Err((
                f.key().into(),
                format!("[{}] given but model is not {}", f.key(), f.key()),
            ));
        }
    }
    if let Some(f) = cfg.model {
        if !blocks.iter().any(|&(g, p)| g == f && p) {
            return Err((
                "model".into(),
                format!("model = \"{}\" needs a [{}] block", f.key(), f.key()),
            ));
        }
        let probe: Vec<Point> = vec![[0.0, 0.0]];
        build_model(cfg, &probe).map_err(|e| (model_key(f, &e), e.to_string()))?;
    }
    if cfg.resources.memory_bytes == 0 {
        return Err((
            "resources.memory_bytes".into(),
            "memory cap must be positive".into(),
        ));
    }
    if let Some(w) = cfg.resources.wall_clock_seconds {
        if !(w > 0.0) {
            return Err((
                "resources.wall_clock_seconds".into(),
                "wall-clock cap must be positive".into(),
            ));
        }
    }
    if let Some(s) = &cfg.sites {
        match (&s.file, s.count) {
            (Some(_), Some(_)) | (None, None) => {
                return Err((
                    "sites".into(),
                    "give exactly one of sites.file and sites.count".into(),
                ))
            }
            (Some(f), None) if !f.exists() => {
                return Err(("sites.file".into(), format!("{f:?} does not exist")))
            }
            (None, Some(0)) => return Err(("sites.count".into(), "count must be positive".into())),
            _ => {}
        }
    }
    if let Some(s) = &cfg.scheme {
        if !(s.t > 0.0 && s.t <= 1.0) {
            return Err((
                "scheme.t".into(),
                format!("truncation must lie in (0, 1], got {}", s.t),
            ));
        }
        if s.q < 1 {
            return Err(("scheme.q".into(), "q must be positive".into()));
        }
    }
    let cmd = match cfg.command {
        Command::Simulate => "simulate",
        Command::Fit => "fit",
        Command::Study => "study",
        Command::Project => "project",
        Command::Partitions => "partitions",
    };
    match cfg.command {
        Command::Simulate => {
            need(&cfg.model, "model", cmd)?;
            need(&cfg.sites, "sites", cmd)?;
            need(&cfg.simulate, "simulate", cmd)?;
            if cfg.simulate.as_ref().is_some_and(|s| s.replicates == 0) {
                return Err((
                    "simulate.replicates".into(),
                    "replicates must be positive".into(),
                ));
            }
        }
        Command::Fit => {
            need(&cfg.model, "model", cmd)?;
            need(&cfg.sites, "sites", cmd)?;
            need(&cfg.scheme, "scheme", cmd)?;
            need(&cfg.fit, "fit", cmd)?;
            if cfg.model == Some(Family::Mixture) {
                return Err(("model".into(), "mixture models cannot be fitted".into()));
            }
            let data = &cfg.fit.as_ref().expect("checked").data;
            if !data.exists() {
                return Err(("fit.data".into(), format!("{data:?} does not exist")));
            }
        }
        Command::Study => {
            need(&cfg.study, "study", cmd)?;
            cfg.study
                .as_ref()
                .expect("checked")
                .validate()
                .map_err(|e| ("study".to_string(), e.to_string()))?;
            if let Some(f) = &cfg.study.as_ref().expect("checked").sites_file {
                if !f.exists() {
                    return Err(("study.sites_file".into(), format!("{f:?} does not exist")));
                }
            }
        }
        Command::Project => {
            need(&cfg.project, "project", cmd)?;
            let p = cfg.project.as_ref().expect("checked");
            if let Some(t) = &p.timings {
                if !t.exists() {
                    return Err(("project.timings".into(), format!("{t:?} does not exist")));
                }
            }
            if p.targets.iter().any(|&[q, total]| q < 1 || q > total) {
                return Err(("project.targets".into(), "targets need 1 <= q <= Q".into()));
            }
        }
        Command::Partitions => {
            need(&cfg.partitions, "partitions", cmd)?;
            let p = cfg.partitions.as_ref().expect("checked");
            if p.n < 1 {
                return Err(("partitions.n".into(), "n must be positive".into()));
            }
            if p.blocks.is_some_and(|k| k < 1 || k > p.n) {
                return Err((
                    "partitions.blocks".into(),
                    "blocks must lie in 1..=n".into(),
                ));
            }
        }
    }
    Ok(())
}

fn build_model(cfg: &RunConfig, sites: &[Point]) -> Result<Model> {
    let family = cfg
        .model
        .ok_or_else(|| Error::domain("no model selected"))?;
    Ok(match family {
        Family::Logistic => {
            let b = cfg
                .logistic
                .as_ref()
                .ok_or_else(|| Error::domain("missing [logistic]"))?;
            Model::Logistic(LogisticParams::new(b.alpha)?)
        }
        Family::Mixture => {
            let b = cfg
                .mixture
                .as_ref()
                .ok_or_else(|| Error::domain("missing [mixture]"))?;
            Model::Mixture(MixtureParams::new(b.weights.clone(), b.alphas.clone())?)
        }
        Family::ReichShaby => {
            let b = cfg
                .reich_shaby
                .as_ref()
                .ok_or_else(|| Error::domain("missing [reich_shaby]"))?;
            let knots = b.knots.clone().unwrap_or_else(default_knots);
            Model::ReichShaby(ReichShabyParams::new(
                b.alpha,
                b.tau,
                knots,
                sites.to_vec(),
            )?)
        }
        Family::BrownResnick => {
            let b = cfg
                .brown_resnick
                .as_ref()
                .ok_or_else(|| Error::domain("missing [brown_resnick]"))?;
            Model::BrownResnick(
                BrownResnickParams::new(b.lambda, b.nu, sites.to_vec())?.with_mvn(b.mvn),
            )
        }
    })
}

fn fit_family(model: &Model) -> Result<(FitFamily, Vec<f64>)> {
    Ok(match model {
        Model::Logistic(p) => (FitFamily::Logistic, vec![p.alpha]),
        Model::ReichShaby(p) => (
            FitFamily::ReichShaby {
                knots: p.knots.clone(),
                locations: p.locations.clone(),
            },
            vec![p.alpha, p.tau],
        ),
        Model::BrownResnick(p) => (
            FitFamily::BrownResnick {
                locations: p.locations.clone(),
                mvn: p.mvn,
            },
            vec![p.lambda, p.nu],
        ),
        Model::Mixture(_) => return Err(Error::domain("mixture models cannot be fitted")),
    })
}

/// Hash of one file, recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    /// Whether reruns must reproduce the file exactly.
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub status: String,
    pub exit_code: i32,
    #[serde(default)]
    pub error: Option<String>,
    pub threads: usize,
    pub seed: u64,
    pub wall_seconds: f64,
    pub config: RunConfig,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Files written by a run, removed again if the run fails.
#[derive(Debug, Default, Clone)]
pub struct Artifacts {
    files: Arc<Mutex<Vec<(PathBuf, bool)>>>,
}

impl Artifacts {
    fn add(&self, path: PathBuf, deterministic: bool) {
        self.files
            .lock()
            .expect("artifact list poisoned")
            .push((path, deterministic));
    }

    fn list(&self) -> Vec<(PathBuf, bool)> {
        self.files.lock().expect("artifact list poisoned").clone()
    }

    fn remove_all(&self) {
        for (p, _) in self.list() {
            let _ = fs::remove_file(p);
        }
        self.files.lock().expect("artifact list poisoned").clear();
    }
}

fn inputs_of(cfg: &RunConfig) -> Vec<PathBuf> {
    let mut v = Vec::new();
    if let Some(f) = cfg.sites.as_ref().and_then(|s| s.file.clone()) {
        v.push(f);
    }
    if let Some(f) = &cfg.fit {
        v.push(f.data.clone());
    }
    if let Some(t) = cfg.project.as_ref().and_then(|p| p.timings.clone()) {
        v.push(t);
    }
    if let Some(f) = cfg.study.as_ref().and_then(|s| s.sites_file.clone()) {
        v.push(f);
    }
    v
}

/// Memory cap from the environment, if set; accepts a byte count with an
/// optional `K`, `M` or `G` suffix (powers of 1024).
pub fn memory_cap_from_env() -> Result<Option<u64>> {
    match std::env::var(MEMORY_CAP_ENV) {
        Ok(v) => parse_bytes(&v).map(Some).ok_or_else(|| Error::Parse {
            key: MEMORY_CAP_ENV.into(),
            line: 0,
            message: format!("cannot read {v:?} as a byte count"),
        }),
        Err(_) => Ok(None),
    }
}

pub fn parse_bytes(s: &str) -> Option<u64> {
    let s = s.trim();
    let upper = s.to_ascii_uppercase();
    let t = upper.trim_end_matches('B');
    let (num, mult) = match t.chars().last()? {
        'K' => (&t[..t.len() - 1], 1u64 << 10),
        'M' => (&t[..t.len() - 1], 1 << 20),
        'G' => (&t[..t.len() - 1], 1 << 30),
        _ => (t, 1),
    };
    let n: u64 = num.trim().parse().ok()?;
    let v = n.checked_mul(mult)?;
    (v > 0).then_some(v)
}

/// Outcome of [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub manifest: Manifest,
    /// Text for standard output.
    pub stdout: String,
}

/// Executes `cfg`, writing artifacts, the resolved config and the manifest
/// into `cfg.output_dir`.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    run_with(cfg, &Artifacts::default())
}

fn run_with(cfg: &RunConfig, artifacts: &Artifacts) -> Result<RunOutcome> {
    let clock = Instant::now();
    fs::create_dir_all(&cfg.output_dir)?;
    let cap = memory_cap_from_env()?.unwrap_or(cfg.resources.memory_bytes);
    set_table_memory_cap(cap);
    let echo = cfg.output_dir.join(CONFIG_ECHO_FILE);
    fs::write(
        &echo,
        toml::to_string(cfg).map_err(|e| Error::domain(e.to_string()))?,
    )?;
    let mut stdout = String::new();
    let result = dispatch(cfg, cap, artifacts, &mut stdout);
    let (exit_code, error) = match &result {
        Ok(()) => (EXIT_OK, None),
        Err(e) => {
            artifacts.remove_all();
            (e.exit_code(), Some(e.to_string()))
        }
    };
    let manifest = write_manifest(
        cfg,
        artifacts,
        exit_code,
        error,
        clock.elapsed().as_secs_f64(),
    )?;
    Ok(RunOutcome {
        exit_code,
        manifest,
        stdout,
    })
}

fn write_manifest(
    cfg: &RunConfig,
    artifacts: &Artifacts,
    exit_code: i32,
    error: Option<String>,
    wall_seconds: f64,
) -> Result<Manifest> {
    let mut inputs = Vec::new();
    for p in inputs_of(cfg) {
        inputs.push(FileRecord {
            path: p.display().to_string(),
            sha256: sha256_file(&p).unwrap_or_default(),
            deterministic: true,
        });
    }
    let mut outputs = Vec::new();
    for (p, det) in artifacts.list() {
        outputs.push(FileRecord {
            path: p
                .strip_prefix(&cfg.output_dir)
                .unwrap_or(&p)
                .display()
                .to_string(),
            sha256: sha256_file(&p)?,
            deterministic: det,
        });
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: if exit_code == EXIT_OK {
            "ok".into()
        } else {
            "error".into()
        },
        exit_code,
        error,
        threads: rayon::current_num_threads(),
        seed: cfg.rng.seed,
        wall_seconds,
        config: cfg.clone(),
        inputs,
        outputs,
    };
    let mut f = fs::File::create(cfg.output_dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    Ok(manifest)
}

fn load_sites(cfg: &RunConfig) -> Result<Vec<Point>> {
    let s = cfg
        .sites
        .as_ref()
        .ok_or_else(|| Error::domain("no [sites] block"))?;
    match (&s.file, s.count) {
        (Some(f), _) => read_sites_csv(f),
        (None, Some(n)) => Ok(uniform_sites(n, &cfg.rng.child(0))),
        (None, None) => Err(Error::domain("no sites given")),
    }
}

fn dispatch(cfg: &RunConfig, cap: u64, artifacts: &Artifacts, stdout: &mut String) -> Result<()> {
    let out = |name: &str| cfg.output_dir.join(name);
    match cfg.command {
        Command::Partitions => {
            let p = cfg.partitions.as_ref().expect("validated");
            let count = match p.blocks {
                Some(k) => stirling2(p.n, k)?,
                None => bell_number(p.n)?,
            };
            if p.count_only {
                stdout.push_str(&format!("{count}\n"));
                return Ok(());
            }
            // the guard applies to the table this listing materializes
            let bytes = PartitionTable::estimated_bytes(p.n)?;
            if bytes > cap as u128 {
                return Err(Error::MemoryCap {
                    what: format!("partition table for n = {}", p.n),
                    required: bytes,
                    cap: cap as u128,
                });
            }
            let path = out("partitions.txt");
            artifacts.add(path.clone(), true);
            let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
            for rgs in rgs_iter(p.n, p.blocks)? {
                let line: Vec<String> = rgs.iter().map(|b| b.to_string()).collect();
                writeln!(w, "{}", line.join(""))?;
            }
            w.flush()?;
            stdout.push_str(&format!("{count}\n"));
        }
        Command::Simulate => {
            let sites = load_sites(cfg)?;
            let model = build_model(cfg, &sites)?;
            let m = cfg.simulate.as_ref().expect("validated").replicates;
            let data = sample_model(&model, sites.len(), m, &cfg.rng.child(1))?;
            let (d, s, j) = (out("data.csv"), out("sites.csv"), out("simulation.json"));
            artifacts.add(d.clone(), true);
            write_dataset_csv(&d, &data)?;
            artifacts.add(s.clone(), true);
            write_sites_csv(&s, &sites)?;
            artifacts.add(j.clone(), true);
            write_sidecar(
                &j,
                &SimulationSidecar {
                    model,
                    rng: cfg.rng,
                    replicates: m,
                    sites: sites.len(),
                    version: env!("CARGO_PKG_VERSION").to_string(),
                },
            )?;
        }
        Command::Fit => {
            let sites = load_sites(cfg)?;
            let model = build_model(cfg, &sites)?;
            let (family, start) = fit_family(&model)?;
            let fb = cfg.fit.as_ref().expect("validated");
            let sb = cfg.scheme.as_ref().expect("validated");
            let data = read_dataset_csv(&fb.data, Some(sites.clone()))?;
            let scheme =
                build_scheme(data.n_sites(), sb.q, Some(&sites), sb.t, sb.weights.clone())?;
            let result = fit_model(&data, &family, &scheme, &start, &fb.optimizer)?;
            let path = out("fit.json");
            artifacts.add(path.clone(), false);
            let json = serde_json::to_string_pretty(&result)?;
            fs::write(&path, format!("{json}\n"))?;
            stdout.push_str(&json);
            stdout.push('\n');
        }
        Command::Study => {
            let study = cfg.study.as_ref().expect("validated");
            let report = run_study(study)?;
            let written = write_study_outputs(&cfg.output_dir, &report)?;
            for p in written {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                let deterministic = !name.contains("timings");
                artifacts.add(p, deterministic);
            }
        }
        Command::Project => {
            let p = cfg.project.as_ref().expect("validated");
            let mut measured = p.measurements.clone();
            if let Some(t) = &p.timings {
                measured.extend(measurements_from_timings(&read_timings_csv(t)?));
            }
            let targets: Vec<CostTarget> = p
                .targets
                .iter()
                .map(|&[q, total]| CostTarget { q, total })
                .collect();
            let rows = project_cost(&measured, &targets, p.threshold_seconds, p.budget_seconds);
            let path = out("projection.csv");
            artifacts.add(path.clone(), p.timings.is_none());
            write_projection_csv(&path, &rows)?;
        }
    }
    Ok(())
}

/// Result of re-executing a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct RerunReport {
    pub outcome: RunOutcome,
    /// Deterministic outputs whose hash differs from the manifest.
    pub mismatches: Vec<String>,
    /// Inputs whose current hash differs from the manifest.
    pub changed_inputs: Vec<String>,
}

/// Re-executes the configuration stored in a manifest into `output_dir`
/// and compares the deterministic outputs.
pub fn rerun(manifest_path: &Path, output_dir: &Path) -> Result<RerunReport> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let changed_inputs = manifest
        .inputs
        .iter()
        .filter(|r| sha256_file(Path::new(&r.path)).map_or(true, |h| h != r.sha256))
        .map(|r| r.path.clone())
        .collect();
    let mut cfg = manifest.config.clone();
    cfg.output_dir = output_dir.to_path_buf();
    let outcome = run(&cfg)?;
    let mut mismatches = Vec::new();
    for r in manifest.outputs.iter().filter(|r| r.deterministic) {
        let same = outcome
            .manifest
            .outputs
            .iter()
            .any(|o| o.path == r.path && o.sha256 == r.sha256);
        if !same {
            mismatches.push(r.path.clone());
        }
    }
    Ok(RerunReport {
        outcome,
        mismatches,
        changed_inputs,
    })
}

#[derive(Debug, Parser)]
#[command(
    name = "maxstable",
    version,
    about = "Likelihood inference for max-stable models"
)]
pub struct Cli {
    /// Worker threads; numeric outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory.
    #[arg(long, default_value = "maxstable-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Execute a run configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-execute a manifest and compare its deterministic outputs.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count or list set partitions as restricted growth strings.
    Partitions {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        count_only: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Simulate a dataset.
    Simulate {
        #[arg(long)]
        model: Family,
        /// Parameters as `name=value` pairs separated by commas.
        #[arg(long)]
        params: String,
        /// Site CSV; otherwise `--n-sites` uniform sites are drawn.
        #[arg(long)]
        sites: Option<PathBuf>,
        #[arg(long)]
        n_sites: Option<usize>,
        #[arg(long)]
        knots: Option<PathBuf>,
        #[arg(long)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Fit a model by maximum composite likelihood.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sites: PathBuf,
        #[arg(long)]
        model: Family,
        #[arg(long)]
        q: usize,
        #[arg(long, default_value_t = 1.0)]
        trunc: f64,
        /// Natural-scale starting values, comma separated.
        #[arg(long, value_delimiter = ',')]
        start: Vec<f64>,
        #[arg(long)]
        knots: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run a Monte Carlo study from a study configuration file.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Project per-evaluation cost from study timings.
    Project {
        #[arg(long)]
        timings: PathBuf,
        /// Targets as `q:Q` pairs separated by commas.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        #[arg(long, default_value_t = 25.0)]
        threshold: f64,
        #[arg(long, default_value_t = 86_400.0)]
        budget: f64,
        #[command(flatten)]
        out: OutArg,
    },
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Parse {
        key: "command line".into(),
        line: 0,
        message: msg.into(),
    }
}

fn parse_params(s: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("parameter `{part}` is not name=value")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|e| usage(format!("parameter `{part}`: {e}")))?;
        match out.iter_mut().find(|(n, _)| n == k.trim()) {
            Some((_, vals)) => vals.push(v),
            None => out.push((k.trim().to_string(), vec![v])),
        }
    }
    Ok(out)
}

/// Renders flag arguments as configuration text so both entry points share
/// one parser.
fn model_toml(
    family: Family,
    values: &[(String, Vec<f64>)],
    knots: Option<&Path>,
) -> Result<String> {
    let mut s = format!("[{}]\n", family.key());
    for (k, v) in values {
        if v.len() == 1 && !matches!(k.as_str(), "weights" | "alphas") {
            s.push_str(&format!("{k} = {:?}\n", v[0]));
        } else {
            let items: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            s.push_str(&format!("{k} = [{}]\n", items.join(", ")));
        }
    }
    if let Some(k) = knots {
        s.push_str(&format!("knots_file = {}\n", toml_path(k)));
    }
    Ok(s)
}

fn toml_path(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn start_params(family: Family, start: &[f64]) -> Result<Vec<(String, Vec<f64>)>> {
    let names: &[&str] = match family {
        Family::Logistic => &["alpha"],
        Family::ReichShaby => &["alpha", "tau"],
        Family::BrownResnick => &["lambda", "nu"],
        Family::Mixture => return Err(usage("mixture models cannot be fitted")),
    };
    if start.len() != names.len() {
        return Err(usage(format!(
            "--start needs {} values for {}",
            names.len(),
            family.key()
        )));
    }
    Ok(names
        .iter()
        .zip(start)
        .map(|(n, &v)| (n.to_string(), vec![v]))
        .collect())
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()?.join(p)
    })
}

/// Translates a parsed command line into a run configuration.
pub fn config_from_cli(cmd: &CliCommand) -> Result<RunConfig> {
    let cwd = std::env::current_dir()?;
    let head = |command: &str, out: &Path| -> Result<String> {
        Ok(format!(
            "command = \"{command}\"\noutput_dir = {}\n",
            toml_path(&absolute(out)?)
        ))
    };
    let text = match cmd {
        CliCommand::Run { config } => return parse_config(config),
        CliCommand::Rerun { .. } => return Err(usage("rerun has no run configuration")),
        CliCommand::Partitions {
            n,
            blocks,
            count_only,
            out,
        } => {
            let mut s = head("partitions", &out.out)?;
            s.push_str(&format!(
                "[partitions]\nn = {n}\ncount_only = {count_only}\n"
            ));
            if let Some(k) = blocks {
                s.push_str(&format!("blocks = {k}\n"));
            }
            s
        }
        CliCommand::Simulate {
            model,
            params,
            sites,
            n_sites,
            knots,
            replicates,
            seed,
            out,
        } => {
            let mut s = head("simulate", &out.out)?;
            s.push_str(&format!("model = \"{}\"\n", model.key()));
            s.push_str(&format!("[rng]\nseed = {seed}\n"));
            s.push_str(&format!("[simulate]\nreplicates = {replicates}\n"));
            s.push_str("[sites]\n");
            match (sites, n_sites) {
                (Some(f), None) => s.push_str(&format!("file = {}\n", toml_path(&absolute(f)?))),
                (None, Some(n)) => s.push_str(&format!("count = {n}\n")),
                _ => return Err(usage("give exactly one of --sites and --n-sites")),
            }
            let knots = knots.as_deref().map(absolute).transpose()?;
            s.push_str(&model_toml(
                *model,
                &parse_params(params)?,
                knots.as_deref(),
            )?);
            s
        }
        CliCommand::Fit {
            data,
            sites,
            model,
            q,
            trunc,
            start,
            knots,
            out,
        } => {
            let mut s = head("fit", &out.out)?;
            s.push_str(&format!("model = \"{}\"\n", model.key()));
            s.push_str(&format!(
                "[sites]\nfile = {}\n",
                toml_path(&absolute(sites)?)
            ));
            s.push_str(&format!("[scheme]\nq = {q}\nt = {trunc:?}\n"));
            s.push_str(&format!("[fit]\ndata = {}\n", toml_path(&absolute(data)?)));
            let knots = knots.as_deref().map(absolute).transpose()?;
            s.push_str(&model_toml(
                *model,
                &start_params(*model, start)?,
                knots.as_deref(),
            )?);
            s
        }
        CliCommand::Study { config, out } => {
            let src = fs::read_to_string(config)?;
            let study: StudyConfig = toml::from_str(&src).map_err(|e| from_toml_error(&src, e))?;
            let base = absolute(config)?;
            let base = base.parent().unwrap_or(Path::new("."));
            let mut cfg = RunConfig {
                command: Command::Study,
                output_dir: absolute(&out.out)?,
                model: None,
                rng: RngSpec::new(study.seed),
                resources: Resources::default(),
                logistic: None,
                mixture: None,
                reich_shaby: None,
                brown_resnick: None,
                sites: None,
                scheme: None,
                simulate: None,
                fit: None,
                study: Some(study),
                project: None,
                partitions: None,
            };
            if let Some(f) = cfg.study.as_mut().and_then(|s| s.sites_file.as_mut()) {
                *f = resolve(base, f);
            }
            validate(&cfg)
                .map_err(|(key, msg)| parse_error(&src, key.trim_start_matches("study."), msg))?;
            return Ok(cfg);
        }
        CliCommand::Project {
            timings,
            targets,
            threshold,
            budget,
            out,
        } => {
            let mut s = head("project", &out.out)?;
            let mut pairs = Vec::new();
            for t in targets {
                let (q, total) = t
                    .split_once(':')
                    .ok_or_else(|| usage(format!("target `{t}` is not q:Q")))?;
                let q: usize = q
                    .trim()
                    .parse()
                    .map_err(|e| usage(format!("target `{t}`: {e}")))?;
                let total: usize = total
                    .trim()
                    .parse()
                    .map_err(|e| usage(format!("target `{t}`: {e}")))?;
                pairs.push(format!("[{q}, {total}]"));
            }
            s.push_str(&format!(
                "[project]\ntimings = {}\ntargets = [{}]\nthreshold_seconds = {threshold:?}\nbudget_seconds = {budget:?}\n",
                toml_path(&absolute(timings)?),
                pairs.join(", ")
            ));
            s
        }
    };
    parse_config_str(&text, &cwd)
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return EXIT_USAGE;
        }
    }
    let result = match &cli.command {
        CliCommand::Rerun { manifest, out } => rerun(manifest, out).map(|r| {
            print!("{}", r.outcome.stdout);
            for p in &r.changed_inputs {
                eprintln!("input changed since the manifest was written: {p}");
            }
            for p in &r.mismatches {
                eprintln!("output differs from the manifest: {p}");
            }
            if r.outcome.exit_code != EXIT_OK {
                r.outcome.exit_code
            } else if r.mismatches.is_empty() && r.changed_inputs.is_empty() {
                eprintln!("all deterministic outputs reproduced");
                EXIT_OK
            } else {
                EXIT_MISMATCH
            }
        }),
        cmd => config_from_cli(cmd).and_then(|cfg| run_guarded(&cfg)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs `cfg` under its wall-clock cap, if any; on expiry the artifacts are
/// removed, the manifest records the limit and the process exits.
fn run_guarded(cfg: &RunConfig) -> Result<i32> {
    let artifacts = Artifacts::default();
    if let Some(limit) = cfg.resources.wall_clock_seconds {
        let (cfg2, arts) = (cfg.clone(), artifacts.clone());
        std::thread::spawn(move || {
            std::thread::sleep(std::time::Duration::from_secs_f64(limit));
            arts.remove_all();
            let e = Error::ResourceLimit(format!("wall-clock cap of {limit} s exceeded"));
            let _ = write_manifest(&cfg2, &arts, e.exit_code(), Some(e.to_string()), limit);
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        });
    }
    let outcome = run_with(cfg, &artifacts)?;
    print!("{}", outcome.stdout);
    if let Some(e) = &outcome.manifest.error {
        eprintln!("error: {e}");
    }
    Ok(outcome.exit_code)
}
