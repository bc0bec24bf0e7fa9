//! Run configuration, CSV ingestion, draw-store persistence and posterior
//! summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::{comparison_prior_grid, BenchmarkReport, LabeledPrior, Scenario};
use crate::model::{
    max_rank, signal_to_noise, variance_decomposition, variance_decomposition_per_cell,
    ObservedMatrix,
};
use crate::posterior::{GradientRoute, RelaxationSchedule};
use crate::priors::{elicit_alpha, expected_pi, CspeHyper, PriorSpec, SpikeSlabHyper};
use crate::samplers::{run_chain, ChainConfig, ChainStats, Draw, DrawStore, NutsConfig, ZWeights};

// ---------------------------------------------------------------------------
// Configuration

/// A prior as written in a config file. CSPE takes either `alpha` or an
/// elicitation target `q` (with `k`, default `K − 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum PriorConfig {
    Noninformative,
    Exponential {
        chi: f64,
    },
    Lomax {
        #[serde(default = "default_mu1")]
        mu1: f64,
        mu2: f64,
    },
    Sse {
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default = "default_kappa1")]
        kappa1: f64,
        #[serde(default = "default_kappa2")]
        kappa2: f64,
    },
    Cspe {
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default = "default_kappa1")]
        kappa1: f64,
        #[serde(default = "default_kappa2")]
        kappa2: f64,
        alpha: Option<f64>,
        q: Option<f64>,
        k: Option<usize>,
    },
}

fn default_mu1() -> f64 {
    2.0
}
fn default_delta() -> f64 {
    CspeHyper::DEFAULT_DELTA
}
fn default_kappa1() -> f64 {
    CspeHyper::DEFAULT_KAPPA1
}
fn default_kappa2() -> f64 {
    CspeHyper::DEFAULT_KAPPA2
}

impl Default for PriorConfig {
    /// CSPE with the aggressive elicitation `q = 0.9`.
    fn default() -> Self {
        PriorConfig::Cspe {
            delta: default_delta(),
            kappa1: default_kappa1(),
            kappa2: default_kappa2(),
            alpha: None,
            q: Some(0.9),
            k: None,
        }
    }
}

impl PriorConfig {
    /// The concrete prior for model rank `big_k`.
    pub fn resolve(&self, big_k: usize) -> Result<PriorSpec> {
        let spec = match *self {
            PriorConfig::Noninformative => PriorSpec::Noninformative,
            PriorConfig::Exponential { chi } => PriorSpec::Exponential { chi },
            PriorConfig::Lomax { mu1, mu2 } => PriorSpec::Lomax { mu1, mu2 },
            PriorConfig::Sse {
                delta,
                kappa1,
                kappa2,
            } => PriorSpec::Sse(SpikeSlabHyper {
                delta,
                kappa1,
                kappa2,
            }),
            PriorConfig::Cspe {
                delta,
                kappa1,
                kappa2,
                alpha,
                q,
                k,
            } => {
                let alpha = match (alpha, q) {
                    (Some(_), Some(_)) => {
                        return Err(Error::Config(
                            "give either alpha or q for the cspe prior, not both".into(),
                        ))
                    }
                    (Some(a), None) => a,
                    (None, Some(q)) => {
                        let k = k.unwrap_or(big_k.saturating_sub(1).max(1));
                        elicit_alpha(q, k).map_err(|e| Error::Config(e.to_string()))?
                    }
                    (None, None) => {
                        return Err(Error::Config("the cspe prior needs alpha or q".into()))
                    }
                };
                PriorSpec::Cspe(CspeHyper {
                    delta,
                    kappa1,
                    kappa2,
                    alpha,
                })
            }
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub missing_token: String,
    /// First line holds column names.
    pub header: bool,
    /// First field of every row is a label.
    pub row_labels: bool,
    /// Standardize each row over its observed entries before fitting.
    pub standardize: bool,
    /// Also write `Θ` in the original units (needs `standardize`).
    pub back_transform: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            missing_token: "NA".into(),
            header: false,
            row_labels: false,
            standardize: false,
            back_transform: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model rank; `⌊JT/(J+T+1)⌋` when unset.
    pub k: Option<usize>,
}

/// Sampler block; the relaxation schedule lives in its own section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub seed: u64,
    pub nu1: f64,
    pub nu2: f64,
    pub z_weights: ZWeights,
    pub store_factors: bool,
    pub fixed_tau: Option<f64>,
    pub route: GradientRoute,
    pub nuts: NutsConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let c = ChainConfig::default();
        Self {
            iterations: c.iterations,
            burn_in: c.burn_in,
            thin: c.thin,
            seed: c.seed,
            nu1: c.nu1,
            nu2: c.nu2,
            z_weights: c.z_weights,
            store_factors: c.store_factors,
            fixed_tau: c.fixed_tau,
            route: c.route,
            nuts: c.nuts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("cspe-out"),
        }
    }
}

/// How the prior grid of a scenario file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorGridConfig {
    /// `"standard"`: the ten-prior comparison grid.
    Preset(String),
    List(Vec<LabeledPriorConfig>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPriorConfig {
    pub label: String,
    #[serde(flatten)]
    pub prior: PriorConfig,
}

/// Simulation design for `simulate`: every combination of true rank and
/// missing fraction becomes one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub j: usize,
    pub t: usize,
    pub true_ranks: Vec<usize>,
    pub missing_fractions: Vec<f64>,
    pub snr: f64,
    pub replications: usize,
    pub seed: u64,
    pub priors: PriorGridConfig,
    /// Worker threads; all cores when unset.
    pub threads: Option<usize>,
}

impl Default for ScenarioConfig {
    /// Desk scale: `J = T = 20`, 10 replications.
    fn default() -> Self {
        Self {
            j: 20,
            t: 20,
            true_ranks: vec![3],
            missing_fractions: vec![0.0, 0.1, 0.9],
            snr: 10.0,
            replications: 10,
            seed: 1,
            priors: PriorGridConfig::Preset("standard".into()),
            threads: None,
        }
    }
}

impl ScenarioConfig {
    pub fn scenarios(&self) -> Result<Vec<Scenario>> {
        let k = max_rank(self.j, self.t);
        let priors = match &self.priors {
            PriorGridConfig::Preset(p) if p == "standard" => comparison_prior_grid(k)?,
            PriorGridConfig::Preset(p) => {
                return Err(Error::Config(format!("unknown prior preset '{p}' (standard)")))
            }
            PriorGridConfig::List(list) => list
                .iter()
                .map(|p| Ok(LabeledPrior::new(p.label.clone(), p.prior.resolve(k)?)))
                .collect::<Result<_>>()?,
        };
        let mut out = Vec::new();
        for &frac in &self.missing_fractions {
            for &ks in &self.true_ranks {
                let s = Scenario {
                    j: self.j,
                    t: self.t,
                    true_rank: ks,
                    snr: self.snr,
                    missing_fraction: frac,
                    replications: self.replications,
                    priors: priors.clone(),
                    seed: self.seed,
                };
                s.validate()?;
                out.push(s);
            }
        }
        if out.is_empty() {
            return Err(Error::Config(
                "the scenario has no true ranks or missing fractions".into(),
            ));
        }
        Ok(out)
    }
}

/// Everything a run reads from its config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub prior: PriorConfig,
    pub sampler: SamplerConfig,
    pub schedule: RelaxationSchedule,
    pub output: OutputConfig,
    pub scenario: ScenarioConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.chain_config().validate()?;
        if self.data.missing_token.contains(',') {
            return Err(Error::Config(
                "missing_token must not contain a comma".into(),
            ));
        }
        if self.data.back_transform && !self.data.standardize {
            return Err(Error::Config(
                "back_transform requires standardize = true".into(),
            ));
        }
        Ok(())
    }

    pub fn chain_config(&self) -> ChainConfig {
        let s = &self.sampler;
        ChainConfig {
            iterations: s.iterations,
            burn_in: s.burn_in,
            thin: s.thin,
            seed: s.seed,
            stream: 0,
            nuts: s.nuts,
            schedule: self.schedule,
            nu1: s.nu1,
            nu2: s.nu2,
            z_weights: s.z_weights,
            store_factors: s.store_factors,
            fixed_tau: s.fixed_tau,
            route: s.route,
        }
    }

    pub fn csv_options(&self) -> CsvOptions {
        CsvOptions {
            missing_token: self.data.missing_token.clone(),
            header: self.data.header,
            row_labels: self.data.row_labels,
        }
    }
}

// ---------------------------------------------------------------------------
// Matrix CSV

#[derive(Debug, Clone, PartialEq)]
pub struct CsvOptions {
    pub missing_token: String,
    pub header: bool,
    pub row_labels: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            missing_token: "NA".into(),
            header: false,
            row_labels: false,
        }
    }
}

/// A data matrix with optional row and column names.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub data: ObservedMatrix,
    pub row_names: Option<Vec<String>>,
    pub col_names: Option<Vec<String>>,
}

/// Reads a headerless, unlabeled CSV; cells equal to `missing_token` or empty are missing.
pub fn load_matrix_csv(path: &Path, missing_token: &str) -> Result<ObservedMatrix> {
    let opts = CsvOptions {
        missing_token: missing_token.into(),
        ..CsvOptions::default()
    };
    Ok(read_matrix_csv(path, &opts)?.data)
}

pub fn read_matrix_csv(path: &Path, opts: &CsvOptions) -> Result<LabeledMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text, opts).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_matrix_csv(text: &str, opts: &CsvOptions) -> Result<LabeledMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let skip = usize::from(opts.row_labels);
    let col_names = if opts.header {
        let rec = records
            .next()
            .ok_or_else(|| Error::Data("empty file".into()))?
            .map_err(|e| Error::Data(e.to_string()))?;
        Some(
            rec.iter()
                .skip(skip)
                .map(str::to_string)
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    let mut row_names = Vec::new();
    let mut width = col_names.as_ref().map(Vec::len);
    for (i, rec) in records.enumerate() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        let line = i + 1 + usize::from(opts.header);
        if opts.row_labels {
            row_names.push(rec.get(0).unwrap_or("").to_string());
        }
        let row: Vec<Option<f64>> = rec
            .iter()
            .skip(skip)
            .enumerate()
            .map(|(c, cell)| {
                if cell.is_empty() || cell == opts.missing_token {
                    Ok(None)
                } else {
                    cell.parse::<f64>().map(Some).map_err(|_| {
                        Error::Data(format!(
                            "line {line}, column {}: '{cell}' is not a number",
                            c + 1 + skip
                        ))
                    })
                }
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Data(format!(
                    "ragged rows: line {line} has {} values, expected {w}",
                    row.len()
                )))
            }
            Some(_) => {}
        }
        rows.push(row);
    }
    let (j, t) = (rows.len(), width.unwrap_or(0));
    if j == 0 || t == 0 {
        return Err(Error::Data("no data rows".into()));
    }
    let values = DMatrix::from_fn(j, t, |r, c| rows[r][c].unwrap_or(0.0));
    let mask = DMatrix::from_fn(j, t, |r, c| rows[r][c].is_some());
    Ok(LabeledMatrix {
        data: ObservedMatrix::new(values, mask)?,
        row_names: opts.row_labels.then_some(row_names),
        col_names,
    })
}

/// Writes a matrix so that [`read_matrix_csv`] with the same options reads it back exactly.
pub fn format_matrix_csv(m: &LabeledMatrix, missing_token: &str) -> String {
    let mut out = String::new();
    let d = &m.data;
    if let Some(cols) = &m.col_names {
        let mut fields: Vec<String> = Vec::new();
        if m.row_names.is_some() {
            fields.push(String::new());
        }
        fields.extend(cols.iter().map(|c| quote(c)));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    for r in 0..d.rows() {
        let mut fields: Vec<String> = Vec::new();
        if let Some(names) = &m.row_names {
            fields.push(quote(&names[r]));
        }
        for c in 0..d.cols() {
            fields.push(if d.is_observed(r, c) {
                format!("{}", d.values()[(r, c)])
            } else {
                missing_token.to_string()
            });
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn save_matrix_csv(path: &Path, m: &LabeledMatrix, missing_token: &str) -> Result<()> {
    fs::write(path, format_matrix_csv(m, missing_token)).map_err(|e| Error::io(path, e))
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) || s != s.trim() {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_dense_csv(m: &DMatrix<f64>, preamble: &str) -> String {
    let mut out = String::from(preamble);
    for r in 0..m.nrows() {
        let line: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn read_dense_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::CorruptStore {
        path: path.to_path_buf(),
        reason,
    };
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| corrupt(format!("bad number '{v}'")))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let t = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != t) {
        return Err(corrupt("ragged rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), t, |r, c| rows[r][c]))
}

// ---------------------------------------------------------------------------
// Standardization

/// Per-row location and scale removed by [`standardize_rows`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowScaling {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl RowScaling {
    /// Maps a matrix in standardized units back to the original units.
    pub fn back_transform(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m.nrows() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "{} rows, scaling for {}",
                m.nrows(),
                self.mean.len()
            )));
        }
        Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
            m[(r, c)] * self.sd[r] + self.mean[r]
        }))
    }
}

/// Rescales every row to mean 0 and unit sample variance over its observed
/// entries. Missing cells are set to 0 and stay missing.
pub fn standardize_rows(data: &ObservedMatrix) -> Result<(ObservedMatrix, RowScaling)> {
    let (j, t) = (data.rows(), data.cols());
    let mut mean = Vec::with_capacity(j);
    let mut sd = Vec::with_capacity(j);
    for r in 0..j {
        let obs: Vec<f64> = (0..t)
            .filter(|&c| data.is_observed(r, c))
            .map(|c| data.values()[(r, c)])
            .collect();
        if obs.len() < 2 {
            return Err(Error::Data(format!(
                "row {} has fewer than two observed entries",
                r + 1
            )));
        }
        let m = obs.iter().sum::<f64>() / obs.len() as f64;
        let v = obs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (obs.len() - 1) as f64;
        if !(v > 0.0) {
            return Err(Error::Data(format!(
                "row {} is constant over its observed entries",
                r + 1
            )));
        }
        mean.push(m);
        sd.push(v.sqrt());
    }
    let values = DMatrix::from_fn(j, t, |r, c| {
        if data.is_observed(r, c) {
            (data.values()[(r, c)] - mean[r]) / sd[r]
        } else {
            0.0
        }
    });
    Ok((
        ObservedMatrix::new(values, data.mask().clone())?,
        RowScaling { mean, sd },
    ))
}

// ---------------------------------------------------------------------------
// Draw store

const STORE_FORMAT: &str = "cspe-draws/1";
const DRAWS_FILE: &str = "draws.csv";
const SIDECAR_FILE: &str = "draws.json";
const THETA_FILE: &str = "theta_mean.csv";

/// Provenance and layout of a persisted store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreMeta {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub j: usize,
    pub t: usize,
    pub k: usize,
    pub prior: PriorSpec,
    pub chain: ChainConfig,
    pub stats: ChainStats,
    pub n_draws: usize,
    pub columns: Vec<String>,
    pub draws_sha256: String,
    pub theta_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of everything that determines a run's output: data, rank, prior and
/// sampler settings. The output location is deliberately excluded.
pub fn config_hash(
    data: &ObservedMatrix,
    k: usize,
    prior: &PriorSpec,
    chain: &ChainConfig,
) -> Result<String> {
    let mut h = Sha256::new();
    h.update((data.rows() as u64).to_le_bytes());
    h.update((data.cols() as u64).to_le_bytes());
    for (v, &m) in data.values().iter().zip(data.mask().iter()) {
        h.update(if m { v.to_bits() } else { u64::MAX }.to_le_bytes());
    }
    h.update((k as u64).to_le_bytes());
    let json = serde_json::to_string(&(prior, chain)).map_err(|e| Error::Config(e.to_string()))?;
    h.update(json.as_bytes());
    Ok(hex::encode(h.finalize()))
}

fn store_columns(store: &DrawStore) -> Vec<String> {
    let k = store.k;
    let mut cols = vec!["iteration".to_string()];
    cols.extend((1..=k).map(|i| format!("omega_{i}")));
    cols.push("tau".into());
    let first = store.draws.first();
    if first.is_some_and(|d| d.lambda.is_some()) {
        cols.extend((1..=k).map(|i| format!("lambda_{i}")));
    }
    if first.is_some_and(|d| d.z.is_some()) {
        cols.extend((1..=k).map(|i| format!("z_{i}")));
    }
    if first.is_some_and(|d| d.spike.is_some()) {
        cols.extend((1..=k).map(|i| format!("spike_{i}")));
    }
    cols.push("phi_defect".into());
    cols.push("psi_defect".into());
    if first.is_some_and(|d| d.phi.is_some()) {
        cols.extend((1..=store.j * k).map(|i| format!("phi_{i}")));
        cols.extend((1..=store.t * k).map(|i| format!("psi_{i}")));
    }
    cols
}

fn provenance_line(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}\n")
}

fn draws_csv(store: &DrawStore, columns: &[String], preamble: &str) -> String {
    let mut out = String::from(preamble);
    out.push_str(&columns.join(","));
    out.push('\n');
    for d in &store.draws {
        let mut f: Vec<String> = vec![d.iteration.to_string()];
        f.extend(d.omega.iter().map(|v| format!("{v}")));
        f.push(format!("{}", d.tau));
        if let Some(l) = &d.lambda {
            f.extend(l.iter().map(|v| format!("{v}")));
        }
        if let Some(z) = &d.z {
            f.extend(z.iter().map(|v| (v + 1).to_string()));
        }
        if let Some(s) = &d.spike {
            f.extend(s.iter().map(|&v| u8::from(v).to_string()));
        }
        f.push(format!("{}", d.phi_defect));
        f.push(format!("{}", d.psi_defect));
        if let (Some(phi), Some(psi)) = (&d.phi, &d.psi) {
            f.extend(phi.iter().chain(psi).map(|v| format!("{v}")));
        }
        out.push_str(&f.join(","));
        out.push('\n');
    }
    out
}

/// Writes `draws.csv`, `theta_mean.csv` and the `draws.json` sidecar into `dir`.
pub fn write_store(dir: &Path, store: &DrawStore, config_hash: &str) -> Result<StoreMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let seed = store.config.seed;
    let pre = provenance_line(config_hash, seed);
    let columns = store_columns(store);
    let draws = draws_csv(store, &columns, &pre);
    let theta = write_dense_csv(&store.theta_mean, &pre);
    let meta = StoreMeta {
        format: STORE_FORMAT.into(),
        config_hash: config_hash.into(),
        seed,
        j: store.j,
        t: store.t,
        k: store.k,
        prior: store.prior,
        chain: store.config.clone(),
        stats: store.stats,
        n_draws: store.draws.len(),
        columns,
        draws_sha256: sha256_hex(draws.as_bytes()),
        theta_sha256: sha256_hex(theta.as_bytes()),
    };
    let write = |name: &str, content: &str| {
        let p = dir.join(name);
        fs::write(&p, content).map_err(|e| Error::io(&p, e))
    };
    write(DRAWS_FILE, &draws)?;
    write(THETA_FILE, &theta)?;
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
    write(SIDECAR_FILE, &(json + "\n"))?;
    Ok(meta)
}

/// Reads a store written by [`write_store`], checking it against its sidecar.
pub fn read_store(dir: &Path) -> Result<(DrawStore, StoreMeta)> {
    let side = dir.join(SIDECAR_FILE);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let corrupt = |path: &Path, reason: String| Error::CorruptStore {
        path: path.to_path_buf(),
        reason,
    };
    let meta: StoreMeta = serde_json::from_str(&text).map_err(|e| corrupt(&side, e.to_string()))?;
    if meta.format != STORE_FORMAT {
        return Err(corrupt(&side, format!("unknown format '{}'", meta.format)));
    }
    let dpath = dir.join(DRAWS_FILE);
    let draws_text = fs::read_to_string(&dpath).map_err(|e| Error::io(&dpath, e))?;
    if sha256_hex(draws_text.as_bytes()) != meta.draws_sha256 {
        return Err(corrupt(
            &dpath,
            "content does not match the checksum in the sidecar".into(),
        ));
    }
    let tpath = dir.join(THETA_FILE);
    let theta_text = fs::read_to_string(&tpath).map_err(|e| Error::io(&tpath, e))?;
    if sha256_hex(theta_text.as_bytes()) != meta.theta_sha256 {
        return Err(corrupt(
            &tpath,
            "content does not match the checksum in the sidecar".into(),
        ));
    }
    let theta_mean = read_dense_csv(&tpath)?;
    if theta_mean.shape() != (meta.j, meta.t) {
        return Err(corrupt(
            &tpath,
            format!(
                "shape {:?}, expected ({}, {})",
                theta_mean.shape(),
                meta.j,
                meta.t
            ),
        ));
    }

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(draws_text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| corrupt(&dpath, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != meta.columns {
        return Err(corrupt(&dpath, "header does not match the sidecar".into()));
    }
    let k = meta.k;
    let has = |prefix: &str| header.iter().any(|c| c == &format!("{prefix}_1"));
    let (has_lambda, has_z, has_spike, has_phi) =
        (has("lambda"), has("z"), has("spike"), has("phi"));
    let mut draws = Vec::with_capacity(meta.n_draws);
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| corrupt(&dpath, e.to_string()))?;
        let mut it = rec.iter();
        let mut next = |what: &str| -> Result<&str> {
            it.next()
                .ok_or_else(|| corrupt(&dpath, format!("row {}: missing {what}", row + 1)))
        };
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| corrupt(&dpath, format!("row {}: bad number '{s}'", row + 1)))
        };
        let iteration = next("iteration")?
            .parse::<u64>()
            .map_err(|_| corrupt(&dpath, format!("row {}: bad iteration", row + 1)))?;
        let omega = (0..k)
            .map(|_| num(next("omega")?))
            .collect::<Result<Vec<_>>>()?;
        let tau = num(next("tau")?)?;
        let lambda = if has_lambda {
            Some(
                (0..k)
                    .map(|_| num(next("lambda")?))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let z = if has_z {
            Some(
                (0..k)
                    .map(|_| {
                        let v = next("z")?;
                        match v.parse::<usize>() {
                            Ok(l) if (1..=k).contains(&l) => Ok(l - 1),
                            _ => Err(corrupt(&dpath, format!("row {}: bad label '{v}'", row + 1))),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let spike = if has_spike {
            Some(
                (0..k)
                    .map(|_| match next("spike")? {
                        "0" => Ok(false),
                        "1" => Ok(true),
                        v => Err(corrupt(
                            &dpath,
                            format!("row {}: bad spike flag '{v}'", row + 1),
                        )),
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let phi_defect = num(next("phi_defect")?)?;
        let psi_defect = num(next("psi_defect")?)?;
        let (phi, psi) = if has_phi {
            (
                Some(
                    (0..meta.j * k)
                        .map(|_| num(next("phi")?))
                        .collect::<Result<Vec<_>>>()?,
                ),
                Some(
                    (0..meta.t * k)
                        .map(|_| num(next("psi")?))
                        .collect::<Result<Vec<_>>>()?,
                ),
            )
        } else {
            (None, None)
        };
        draws.push(Draw {
            iteration,
            omega,
            tau,
            lambda,
            z,
            spike,
            phi_defect,
            psi_defect,
            phi,
            psi,
        });
    }
    if draws.len() != meta.n_draws {
        return Err(corrupt(
            &dpath,
            format!("{} draws, sidecar says {}", draws.len(), meta.n_draws),
        ));
    }
    let store = DrawStore {
        j: meta.j,
        t: meta.t,
        k,
        prior: meta.prior,
        config: meta.chain.clone(),
        draws,
        theta_mean,
        stats: meta.stats,
        elapsed_seconds: 0.0,
    };
    Ok((store, meta))
}

// ---------------------------------------------------------------------------
// Posterior summary

/// Posterior mean with an equal-tailed 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Quantile of sorted data with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn interval(values: &[f64]) -> Interval {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Interval {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        lower: quantile_sorted(&s, 0.025),
        upper: quantile_sorted(&s, 0.975),
    }
}

/// Gaussian kernel density on `points` equally spaced values covering the data ±3 bandwidths.
pub fn kde_grid(values: &[f64], points: usize) -> Vec<(f64, f64)> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let mut h = 0.9 * spread * n.powf(-0.2);
    if !(h > 0.0) {
        h = (mean.abs() * 1e-3).max(1e-12);
    }
    let lo = (s[0] - 3.0 * h).max(0.0);
    let hi = s[s.len() - 1] + 3.0 * h;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    (0..points)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            let d = values
                .iter()
                .map(|v| (-0.5 * ((x - v) / h).powi(2)).exp())
                .sum::<f64>()
                * norm;
            (x, d)
        })
        .collect()
}

pub const DENSITY_POINTS: usize = 512;

/// Posterior summary of one store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub config_hash: String,
    pub seed: u64,
    pub j: usize,
    pub t: usize,
    pub k: usize,
    pub prior: String,
    pub n_draws: usize,
    pub omega: Vec<Interval>,
    pub tau_inv: Interval,
    /// Shares of `ω₁², …, ω_K²` (each per cell, `/JT`) and `τ⁻¹` in the total variance.
    pub shares: Vec<Interval>,
    /// The same shares without the per-cell scaling of `ω²`.
    pub shares_unscaled: Vec<Interval>,
    /// `(Σω²/JT) · τ`.
    pub snr: Interval,
    pub divergence_rate: f64,
    pub mean_phi_defect: f64,
    pub mean_psi_defect: f64,
    #[serde(skip)]
    pub tau_inv_density: Vec<(f64, f64)>,
    #[serde(skip)]
    pub theta_mean: DMatrix<f64>,
}

pub fn summarize_store(store: &DrawStore, config_hash: &str) -> Result<PosteriorSummary> {
    let n = store.draws.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "a summary needs at least 2 draws, the store has {n}"
        )));
    }
    let cells = store.j * store.t;
    let k = store.k;
    let column = |f: &dyn Fn(&Draw) -> f64| -> Vec<f64> { store.draws.iter().map(f).collect() };
    let omega = (0..k).map(|i| interval(&column(&|d| d.omega[i]))).collect();
    let tau_inv_draws = column(&|d| 1.0 / d.tau);
    let per_cell: Vec<Vec<f64>> = store
        .draws
        .iter()
        .map(|d| variance_decomposition_per_cell(&d.omega, d.tau, cells))
        .collect::<Result<_>>()?;
    let unscaled: Vec<Vec<f64>> = store
        .draws
        .iter()
        .map(|d| variance_decomposition(&d.omega, d.tau))
        .collect::<Result<_>>()?;
    let share_intervals = |sh: &[Vec<f64>]| -> Vec<Interval> {
        (0..=k)
            .map(|i| interval(&sh.iter().map(|s| s[i]).collect::<Vec<_>>()))
            .collect()
    };
    Ok(PosteriorSummary {
        config_hash: config_hash.into(),
        seed: store.config.seed,
        j: store.j,
        t: store.t,
        k,
        prior: store.prior.family().into(),
        n_draws: n,
        omega,
        tau_inv: interval(&tau_inv_draws),
        shares: share_intervals(&per_cell),
        shares_unscaled: share_intervals(&unscaled),
        snr: interval(&column(&|d| signal_to_noise(&d.omega, d.tau, cells))),
        divergence_rate: store.stats.divergence_rate(),
        mean_phi_defect: store.mean_phi_defect(),
        mean_psi_defect: store.mean_psi_defect(),
        tau_inv_density: kde_grid(&tau_inv_draws, DENSITY_POINTS),
        theta_mean: store.theta_mean.clone(),
    })
}

impl PosteriorSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }

    /// Long CSV: `quantity,index,mean,lower,upper`.
    pub fn to_csv(&self) -> String {
        let mut out = provenance_line(&self.config_hash, self.seed);
        out.push_str("quantity,index,mean,lower,upper\n");
        let mut row = |q: &str, i: usize, v: &Interval| {
            let _ = writeln!(out, "{q},{i},{},{},{}", v.mean, v.lower, v.upper);
        };
        for (i, v) in self.omega.iter().enumerate() {
            row("omega", i + 1, v);
        }
        row("tau_inv", 0, &self.tau_inv);
        for (i, v) in self.shares.iter().enumerate() {
            row("share", i + 1, v);
        }
        for (i, v) in self.shares_unscaled.iter().enumerate() {
            row("share_unscaled", i + 1, v);
        }
        row("snr", 0, &self.snr);
        out
    }

    pub fn density_csv(&self) -> String {
        let mut out = provenance_line(&self.config_hash, self.seed);
        out.push_str("tau_inv,density\n");
        for (x, d) in &self.tau_inv_density {
            let _ = writeln!(out, "{x},{d}");
        }
        out
    }

    /// Writes `summary.json`, `summary.csv` and `tau_inv_density.csv`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("summary.json", self.to_json()),
            ("summary.csv", self.to_csv()),
            ("tau_inv_density.csv", self.density_csv()),
        ];
        files
            .into_iter()
            .map(|(name, content)| {
                let p = dir.join(name);
                fs::write(&p, content).map_err(|e| Error::io(&p, e))?;
                Ok(p)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Commands

/// Result of [`fit`].
pub struct FitOutput {
    pub summary: PosteriorSummary,
    pub store: DrawStore,
    pub meta: StoreMeta,
    pub files: Vec<PathBuf>,
}

/// Loads the data named in `config`, runs the chain, and writes the store
/// and the summary into the output directory.
pub fn fit(config: &RunConfig) -> Result<FitOutput> {
    config.validate()?;
    let path = config
        .data
        .path
        .as_deref()
        .ok_or_else(|| Error::Config("no data file given".into()))?;
    let loaded = read_matrix_csv(path, &config.csv_options())?;
    let (data, scaling) = if config.data.standardize {
        let (d, s) = standardize_rows(&loaded.data)?;
        (d, Some(s))
    } else {
        (loaded.data, None)
    };
    fit_matrix(config, &data, scaling.as_ref())
}

/// The model rank: `requested`, or `⌊JT/(J+T+1)⌋` when unset.
pub fn resolve_rank(j: usize, t: usize, requested: Option<usize>) -> Result<usize> {
    let limit = max_rank(j, t);
    let k = requested.unwrap_or(limit);
    if k == 0 || k > limit {
        return Err(Error::Config(format!(
            "K = {k} must lie in 1..={limit} for a {j}x{t} matrix"
        )));
    }
    Ok(k)
}

/// [`fit`] on an in-memory matrix.
pub fn fit_matrix(
    config: &RunConfig,
    data: &ObservedMatrix,
    scaling: Option<&RowScaling>,
) -> Result<FitOutput> {
    let k = resolve_rank(data.rows(), data.cols(), config.model.k)?;
    let prior = config.prior.resolve(k)?;
    let chain = config.chain_config();
    let hash = config_hash(data, k, &prior, &chain)?;
    let store = run_chain(data, k, prior, chain)?;
    let dir = &config.output.dir;
    let meta = write_store(dir, &store, &hash)?;
    let summary = summarize_store(&store, &hash)?;
    let mut files = vec![
        dir.join(DRAWS_FILE),
        dir.join(SIDECAR_FILE),
        dir.join(THETA_FILE),
    ];
    files.extend(summary.write(dir)?);
    if let (true, Some(s)) = (config.data.back_transform, scaling) {
        let p = dir.join("theta_mean_original_units.csv");
        let m = s.back_transform(&store.theta_mean)?;
        fs::write(
            &p,
            write_dense_csv(&m, &provenance_line(&hash, chain_seed(&store))),
        )
        .map_err(|e| Error::io(&p, e))?;
        files.push(p);
    }
    if let Some(s) = scaling {
        let p = dir.join("row_scaling.json");
        let json = serde_json::to_string_pretty(s).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
        files.push(p);
    }
    Ok(FitOutput {
        summary,
        store,
        meta,
        files,
    })
}

fn chain_seed(store: &DrawStore) -> u64 {
    store.config.seed
}

/// Recomputes the summary of a persisted store.
pub fn summarize(dir: &Path) -> Result<PosteriorSummary> {
    let (store, meta) = read_store(dir)?;
    summarize_store(&store, &meta.config_hash)
}

/// `α` for `E[π_k] = q` and the implied `E[π_j]` for `j = 1..=big_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitReport {
    pub q: f64,
    pub k: usize,
    pub alpha: f64,
    pub expected_pi: Vec<f64>,
}

pub fn elicit(q: f64, k: usize, big_k: Option<usize>) -> Result<ElicitReport> {
    let alpha = elicit_alpha(q, k)?;
    let big_k = big_k.unwrap_or(k + 1).max(1);
    Ok(ElicitReport {
        q,
        k,
        alpha,
        expected_pi: (1..=big_k).map(|j| expected_pi(alpha, j)).collect(),
    })
}

impl std::fmt::Display for ElicitReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "alpha = {:.6}  (E[pi_{}] = {})",
            self.alpha, self.k, self.q
        )?;
        writeln!(f, "{:>4}  {:>10}", "j", "E[pi_j]")?;
        for (j, p) in self.expected_pi.iter().enumerate() {
            writeln!(f, "{:>4}  {:>10.6}", j + 1, p)?;
        }
        Ok(())
    }
}

/// Runs the benchmark described by the `[scenario]` section and writes its reports.
pub fn simulate(config: &RunConfig) -> Result<(BenchmarkReport, Vec<PathBuf>)> {
    config.validate()?;
    let scenarios = config.scenario.scenarios()?;
    let chain = config.chain_config();
    let run = || crate::experiments::run_plan(&scenarios, &chain);
    let report = match config.scenario.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let dir = &config.output.dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string(&(&config.scenario, &chain))
        .map_err(|e| Error::Config(e.to_string()))?;
    let pre = provenance_line(&sha256_hex(json.as_bytes()), config.scenario.seed);
    let files = [
        ("report.csv", report.to_csv()),
        ("cells.csv", report.cells_csv()),
        ("timing.csv", report.timing_csv()),
        ("report.txt", report.to_text()),
    ]
    .map(|(name, content)| (name, format!("{pre}{content}")));
    let paths = files
        .into_iter()
        .map(|(name, content)| {
            let p = dir.join(name);
            fs::write(&p, content).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        })
        .collect::<Result<_>>()?;
    Ok((report, paths))
}
