//! Monte Carlo benchmark: simulated low-rank panels, a grid of priors, and
//! error tables normalized to the noninformative baseline.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{max_rank, ObservedMatrix};
use crate::priors::{elicit_alpha, CspeHyper, PriorSpec, SpikeSlabHyper};
use crate::samplers::{run_chain, ChainConfig, DrawStore};

/// A prior with the label used in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrior {
    pub label: String,
    pub spec: PriorSpec,
}

impl LabeledPrior {
    pub fn new(label: impl Into<String>, spec: PriorSpec) -> Self {
        Self {
            label: label.into(),
            spec,
        }
    }
}

/// The comparison grid: noninformative, three exponential rates, three Lomax
/// scales, SSE, and CSPE with `α` elicited from `q = 0.5` and `q = 0.9` at `k = K − 1`.
pub fn comparison_prior_grid(k: usize) -> Result<Vec<LabeledPrior>> {
    let mut grid = vec![LabeledPrior::new(
        "noninformative",
        PriorSpec::Noninformative,
    )];
    for chi in [1.0, 0.5, 0.1] {
        grid.push(LabeledPrior::new(
            format!("exponential chi={chi}"),
            PriorSpec::Exponential { chi },
        ));
    }
    for mu2 in [2.0, 5.0, 20.0] {
        grid.push(LabeledPrior::new(
            format!("lomax mu2={mu2}"),
            PriorSpec::Lomax { mu1: 2.0, mu2 },
        ));
    }
    grid.push(LabeledPrior::new(
        "sse",
        PriorSpec::Sse(SpikeSlabHyper::default()),
    ));
    let kk = k.saturating_sub(1).max(1);
    grid.push(LabeledPrior::new(
        "cspe conservative",
        PriorSpec::Cspe(CspeHyper::with_alpha(elicit_alpha(0.5, kk)?)),
    ));
    grid.push(LabeledPrior::new(
        "cspe aggressive",
        PriorSpec::Cspe(CspeHyper::with_alpha(elicit_alpha(0.9, kk)?)),
    ));
    Ok(grid)
}

/// One simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub j: usize,
    pub t: usize,
    pub true_rank: usize,
    pub snr: f64,
    pub missing_fraction: f64,
    pub replications: usize,
    pub priors: Vec<LabeledPrior>,
    pub seed: u64,
}

impl Scenario {
    /// `J = T = 30`, `snr = 10`, 80 replications, the full prior grid.
    pub fn full_scale(true_rank: usize, missing_fraction: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            j: 30,
            t: 30,
            true_rank,
            snr: 10.0,
            missing_fraction,
            replications: 80,
            priors: comparison_prior_grid(max_rank(30, 30))?,
            seed,
        })
    }

    /// Model rank used for every chain, `⌊JT/(J+T+1)⌋`.
    pub fn model_rank(&self) -> usize {
        max_rank(self.j, self.t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.j == 0 || self.t == 0 {
            return Err(Error::Config("J and T must be positive".into()));
        }
        if self.true_rank == 0 || self.true_rank >= self.j.min(self.t) {
            return Err(Error::Config(format!(
                "true rank {} must lie in 1..{}",
                self.true_rank,
                self.j.min(self.t)
            )));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::Config(format!(
                "snr must be positive, got {}",
                self.snr
            )));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(Error::Config(format!(
                "missing_fraction must lie in [0, 1), got {}",
                self.missing_fraction
            )));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be positive".into()));
        }
        if self.priors.is_empty() {
            return Err(Error::Config("the prior grid is empty".into()));
        }
        for p in &self.priors {
            p.spec
                .validate()
                .map_err(|e| Error::Config(format!("prior '{}': {e}", p.label)))?;
        }
        Ok(())
    }
}

/// One simulated data set.
#[derive(Debug, Clone)]
pub struct Dgp {
    pub theta0: DMatrix<f64>,
    /// Singular values of `Θ₀`, length `K*`.
    pub omega0: Vec<f64>,
    pub tau: f64,
    pub y: ObservedMatrix,
}

/// Random stream for the data of replication `rep`.
pub fn dgp_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((rep as u64) << 16) | 0xFFFF);
    rng
}

/// Stream of the chain for prior `prior_index` in replication `rep`.
pub fn chain_stream(rep: usize, prior_index: usize) -> u64 {
    ((rep as u64) << 16) | prior_index as u64
}

/// `Θ₀ = P A F` rescaled to unit variance, with `P` the centering projector.
///
/// Centering the columns of `A` zeroes the grand mean of `Θ₀` while keeping
/// its rank at `K*`; `τ = snr` then gives the requested signal-to-noise ratio.
pub fn generate_dgp<R: rand::Rng>(scenario: &Scenario, rng: &mut R) -> Result<Dgp> {
    let (j, t, ks) = (scenario.j, scenario.t, scenario.true_rank);
    if ks >= j.min(t) {
        return Err(Error::InvalidArgument(format!(
            "true rank {ks} must be below min(J, T) = {}",
            j.min(t)
        )));
    }
    let mut a = DMatrix::from_fn(j, ks, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = DMatrix::from_fn(ks, t, |_, _| rng.sample::<f64, _>(StandardNormal));
    for mut col in a.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let mut theta0 = &a * &f;
    let n = (j * t) as f64;
    let mean = theta0.mean();
    theta0.add_scalar_mut(-mean);
    let sd = (theta0.norm_squared() / n).sqrt();
    theta0 /= sd;

    let tau = scenario.snr;
    let noise =
        Normal::new(0.0, tau.recip().sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let values = theta0.map(|v| v + noise.sample(rng));

    let mut mask = DMatrix::from_element(j, t, true);
    let m = (scenario.missing_fraction * n).round() as usize;
    for idx in sample(rng, j * t, m.min(j * t - 1)).into_iter() {
        mask.as_mut_slice()[idx] = false;
    }
    let omega0 = theta0.singular_values().iter().take(ks).copied().collect();
    Ok(Dgp {
        y: ObservedMatrix::new(values, mask)?,
        theta0,
        omega0,
        tau,
    })
}

/// Error sums of one posterior-mean estimate against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Errors {
    pub ae_omega: f64,
    pub se_omega: f64,
    pub ae_theta: f64,
    pub se_theta: f64,
}

impl Errors {
    pub fn get(&self, col: usize) -> f64 {
        [self.ae_omega, self.se_omega, self.ae_theta, self.se_theta][col]
    }

    fn from_fn(f: impl Fn(usize) -> f64) -> Self {
        Self {
            ae_omega: f(0),
            se_omega: f(1),
            ae_theta: f(2),
            se_theta: f(3),
        }
    }
}

/// Metrics of one prior, raw and relative to the noninformative baseline (`= 100`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub raw: Errors,
    pub normalized: Option<Errors>,
}

impl MetricRow {
    pub fn normalize(&mut self, baseline: &Errors) {
        let raw = self.raw;
        self.normalized = Some(Errors::from_fn(|c| 100.0 * raw.get(c) / baseline.get(c)));
    }
}

/// AE and SE of `ω` (truth zero-padded to the estimate's length) and of `Θ` over all cells.
pub fn compute_metrics(
    estimate_omega: &[f64],
    truth_omega: &[f64],
    estimate_theta: &DMatrix<f64>,
    truth_theta: &DMatrix<f64>,
) -> Result<Errors> {
    if truth_omega.len() > estimate_omega.len() {
        return Err(Error::Dimension(format!(
            "true spectrum has {} values, estimate {}",
            truth_omega.len(),
            estimate_omega.len()
        )));
    }
    if estimate_theta.shape() != truth_theta.shape() {
        return Err(Error::Dimension(format!(
            "estimate is {:?}, truth {:?}",
            estimate_theta.shape(),
            truth_theta.shape()
        )));
    }
    let d_omega: Vec<f64> = estimate_omega
        .iter()
        .enumerate()
        .map(|(k, e)| e - truth_omega.get(k).copied().unwrap_or(0.0))
        .collect();
    let d_theta = estimate_theta - truth_theta;
    Ok(Errors {
        ae_omega: d_omega.iter().map(|d| d.abs()).sum(),
        se_omega: d_omega.iter().map(|d| d * d).sum(),
        ae_theta: d_theta.iter().map(|d| d.abs()).sum(),
        se_theta: d_theta.iter().map(|d| d * d).sum(),
    })
}

/// AE and SE of `Θ` over the cells where `mask` is false.
pub fn theta_errors_missing(
    estimate: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    mask: &DMatrix<bool>,
) -> (f64, f64) {
    estimate
        .iter()
        .zip(truth.iter())
        .zip(mask.iter())
        .filter(|(_, &obs)| !obs)
        .fold((0.0, 0.0), |(ae, se), ((e, t), _)| {
            (ae + (e - t).abs(), se + (e - t).powi(2))
        })
}

/// Posterior mean of `ω` over the retained draws.
pub fn posterior_mean_omega(store: &DrawStore) -> Vec<f64> {
    let n = store.draws.len().max(1) as f64;
    let mut m = vec![0.0; store.k];
    for d in &store.draws {
        for (a, b) in m.iter_mut().zip(&d.omega) {
            *a += b / n;
        }
    }
    m
}

/// Outcome of one (replication, prior) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub replication: usize,
    pub prior_index: usize,
    pub label: String,
    /// `None` when the chain failed; see `error`.
    pub errors: Option<Errors>,
    /// `Θ` errors over missing cells only (zero without missing cells).
    pub missing_theta: Option<(f64, f64)>,
    pub error: Option<String>,
    pub seconds_per_1000: f64,
    pub divergence_rate: f64,
    pub mean_phi_defect: f64,
    pub mean_psi_defect: f64,
    /// Mean over draws of `Σ_k max(0, −ω*_k)`.
    pub negative_increment_mass: f64,
    /// Share of draws with at least one `ω*_k < 0`.
    pub negative_increment_share: f64,
    /// Largest ordering violation `max_k (ω_{k+1} − ω_k)⁺` and negativity `(−ω_K)⁺` over draws.
    pub max_order_violation: f64,
}

/// Results of one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub iterations: u64,
    pub cells: Vec<CellResult>,
}

/// Cross-replication statistic used for aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
    Median,
}

impl Aggregate {
    pub fn name(self) -> &'static str {
        match self {
            Aggregate::Mean => "mean",
            Aggregate::Median => "median",
        }
    }

    fn apply(self, mut v: Vec<f64>) -> f64 {
        if v.is_empty() {
            return f64::NAN;
        }
        match self {
            Aggregate::Mean => v.iter().sum::<f64>() / v.len() as f64,
            Aggregate::Median => {
                v.sort_by(f64::total_cmp);
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    0.5 * (v[n / 2 - 1] + v[n / 2])
                }
            }
        }
    }
}

impl ScenarioReport {
    /// Index of the noninformative prior in the grid, if present.
    pub fn baseline_index(&self) -> Option<usize> {
        self.scenario
            .priors
            .iter()
            .position(|p| matches!(p.spec, PriorSpec::Noninformative))
    }

    fn cell(&self, rep: usize, prior: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.replication == rep && c.prior_index == prior)
    }

    /// Aggregated rows over replications where every prior finished.
    pub fn metric_rows(&self, agg: Aggregate) -> Vec<MetricRow> {
        let np = self.scenario.priors.len();
        let complete: Vec<usize> = (0..self.scenario.replications)
            .filter(|&r| (0..np).all(|p| self.cell(r, p).is_some_and(|c| c.errors.is_some())))
            .collect();
        let mut rows: Vec<MetricRow> = self
            .scenario
            .priors
            .iter()
            .enumerate()
            .map(|(p, prior)| {
                let raw = Errors::from_fn(|c| {
                    agg.apply(
                        complete
                            .iter()
                            .filter_map(|&r| {
                                self.cell(r, p).and_then(|x| x.errors).map(|e| e.get(c))
                            })
                            .collect(),
                    )
                });
                MetricRow {
                    label: prior.label.clone(),
                    raw,
                    normalized: None,
                }
            })
            .collect();
        if let Some(b) = self.baseline_index() {
            let base = rows[b].raw;
            for r in &mut rows {
                r.normalize(&base);
            }
            // Exact, whatever the rounding of x / x.
            rows[b].normalized = Some(Errors::from_fn(|_| 100.0));
        }
        rows
    }

    /// Replications where `prior` has strictly lower `AE_ω` than the baseline,
    /// out of those where both finished.
    pub fn paired_wins(&self, prior: usize) -> Option<(usize, usize)> {
        let b = self.baseline_index()?;
        let mut wins = 0;
        let mut total = 0;
        for r in 0..self.scenario.replications {
            let (Some(x), Some(y)) = (
                self.cell(r, prior).and_then(|c| c.errors),
                self.cell(r, b).and_then(|c| c.errors),
            ) else {
                continue;
            };
            total += 1;
            if x.ae_omega < y.ae_omega {
                wins += 1;
            }
        }
        Some((wins, total))
    }

    /// Mean seconds per 1,000 iterations for each prior.
    pub fn timing(&self) -> Vec<(String, f64)> {
        self.scenario
            .priors
            .iter()
            .enumerate()
            .map(|(p, prior)| {
                let v: Vec<f64> = self
                    .cells
                    .iter()
                    .filter(|c| c.prior_index == p && c.error.is_none())
                    .map(|c| c.seconds_per_1000)
                    .collect();
                (prior.label.clone(), Aggregate::Mean.apply(v))
            })
            .collect()
    }

    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

/// Runs every (replication, prior) cell of one scenario.
///
/// Cells are independent; seeds depend only on (scenario seed, replication,
/// prior index), so results do not depend on scheduling. A failing chain
/// marks its cell instead of aborting the run.
pub fn run_benchmark(scenario: &Scenario, chain: &ChainConfig) -> Result<ScenarioReport> {
    scenario.validate()?;
    chain.validate()?;
    let k = scenario.model_rank();
    let dgps: Vec<Dgp> = (0..scenario.replications)
        .map(|r| generate_dgp(scenario, &mut dgp_rng(scenario.seed, r)))
        .collect::<Result<_>>()?;
    let tasks: Vec<(usize, usize)> = (0..scenario.replications)
        .flat_map(|r| (0..scenario.priors.len()).map(move |p| (r, p)))
        .collect();
    let cells = tasks
        .par_iter()
        .map(|&(r, p)| {
            let cfg = ChainConfig {
                seed: scenario.seed,
                stream: chain_stream(r, p),
                ..chain.clone()
            };
            run_cell(&dgps[r], k, &scenario.priors[p], cfg, r, p)
        })
        .collect();
    Ok(ScenarioReport {
        scenario: scenario.clone(),
        iterations: chain.iterations,
        cells,
    })
}

fn run_cell(
    dgp: &Dgp,
    k: usize,
    prior: &LabeledPrior,
    cfg: ChainConfig,
    r: usize,
    p: usize,
) -> CellResult {
    let iterations = cfg.iterations;
    let mut cell = CellResult {
        replication: r,
        prior_index: p,
        label: prior.label.clone(),
        errors: None,
        missing_theta: None,
        error: None,
        seconds_per_1000: f64::NAN,
        divergence_rate: f64::NAN,
        mean_phi_defect: f64::NAN,
        mean_psi_defect: f64::NAN,
        negative_increment_mass: f64::NAN,
        negative_increment_share: f64::NAN,
        max_order_violation: f64::NAN,
    };
    let store = match run_chain(&dgp.y, k, prior.spec, cfg) {
        Ok(s) => s,
        Err(e) => {
            cell.error = Some(e.to_string());
            return cell;
        }
    };
    let omega_hat = posterior_mean_omega(&store);
    match compute_metrics(&omega_hat, &dgp.omega0, &store.theta_mean, &dgp.theta0) {
        Ok(e) => cell.errors = Some(e),
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell.missing_theta = Some(theta_errors_missing(
        &store.theta_mean,
        &dgp.theta0,
        dgp.y.mask(),
    ));
    cell.seconds_per_1000 = store.elapsed_seconds / iterations as f64 * 1000.0;
    cell.divergence_rate = store.stats.divergence_rate();
    cell.mean_phi_defect = store.mean_phi_defect();
    cell.mean_psi_defect = store.mean_psi_defect();
    let n = store.draws.len().max(1) as f64;
    cell.negative_increment_mass = store
        .draws
        .iter()
        .map(|d| d.omega_star().iter().map(|w| (-w).max(0.0)).sum::<f64>())
        .sum::<f64>()
        / n;
    cell.negative_increment_share = store
        .draws
        .iter()
        .filter(|d| d.omega_star().iter().any(|&w| w < 0.0))
        .count() as f64
        / n;
    cell.max_order_violation = store
        .draws
        .iter()
        .flat_map(|d| {
            let w = &d.omega;
            w.windows(2)
                .map(|p| (p[1] - p[0]).max(0.0))
                .chain(std::iter::once((-w[w.len() - 1]).max(0.0)))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    cell
}

/// Runs several scenarios in sequence.
pub fn run_plan(scenarios: &[Scenario], chain: &ChainConfig) -> Result<BenchmarkReport> {
    Ok(BenchmarkReport {
        scenarios: scenarios
            .iter()
            .map(|s| run_benchmark(s, chain))
            .collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenarios: Vec<ScenarioReport>,
}

const COLUMNS: [&str; 4] = ["AE_omega", "SE_omega", "AE_theta", "SE_theta"];

fn fmt_missing(f: f64) -> String {
    format!("{}% missing", (100.0 * f).round())
}

impl BenchmarkReport {
    /// Long-format CSV: one row per scenario × prior × statistic.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("missing_fraction,true_rank,prior,statistic,scale,AE_omega,SE_omega,AE_theta,SE_theta,wins_vs_baseline,replications\n");
        for s in &self.scenarios {
            for agg in [Aggregate::Mean, Aggregate::Median] {
                for (p, row) in s.metric_rows(agg).iter().enumerate() {
                    let wins = s
                        .paired_wins(p)
                        .map(|(w, n)| format!("{w},{n}"))
                        .unwrap_or_else(|| ",".into());
                    let mut line = |scale: &str, e: &Errors| {
                        let _ = writeln!(
                            out,
                            "{},{},{},{},{scale},{},{},{},{},{wins}",
                            s.scenario.missing_fraction,
                            s.scenario.true_rank,
                            csv_field(&row.label),
                            agg.name(),
                            e.ae_omega,
                            e.se_omega,
                            e.ae_theta,
                            e.se_theta
                        );
                    };
                    line("raw", &row.raw);
                    if let Some(n) = &row.normalized {
                        line("normalized", n);
                    }
                }
            }
        }
        out
    }

    /// Per-cell CSV, for paired comparisons and diagnostics.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from(
            "missing_fraction,true_rank,replication,prior,AE_omega,SE_omega,AE_theta,SE_theta,AE_theta_missing,SE_theta_missing,seconds_per_1000,divergence_rate,mean_phi_defect,mean_psi_defect,negative_increment_mass,negative_increment_share,max_order_violation,error\n",
        );
        for s in &self.scenarios {
            for c in &s.cells {
                let e = c
                    .errors
                    .map(|e| {
                        format!(
                            "{},{},{},{}",
                            e.ae_omega, e.se_omega, e.ae_theta, e.se_theta
                        )
                    })
                    .unwrap_or_else(|| ",,,".into());
                let m = c
                    .missing_theta
                    .map(|(a, b)| format!("{a},{b}"))
                    .unwrap_or_else(|| ",".into());
                let _ = writeln!(
                    out,
                    "{},{},{},{},{e},{m},{},{},{},{},{},{},{},{}",
                    s.scenario.missing_fraction,
                    s.scenario.true_rank,
                    c.replication,
                    csv_field(&c.label),
                    c.seconds_per_1000,
                    c.divergence_rate,
                    c.mean_phi_defect,
                    c.mean_psi_defect,
                    c.negative_increment_mass,
                    c.negative_increment_share,
                    c.max_order_violation,
                    csv_field(c.error.as_deref().unwrap_or(""))
                );
            }
        }
        out
    }

    /// Scenarios grouped by missing fraction, each with its true ranks in order of appearance.
    fn groups(&self) -> Vec<(f64, Vec<&ScenarioReport>)> {
        let mut groups: Vec<(f64, Vec<&ScenarioReport>)> = Vec::new();
        for s in &self.scenarios {
            match groups
                .iter_mut()
                .find(|(f, _)| *f == s.scenario.missing_fraction)
            {
                Some((_, v)) => v.push(s),
                None => groups.push((s.scenario.missing_fraction, vec![s])),
            }
        }
        groups
    }

    fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = Vec::new();
        for s in &self.scenarios {
            for p in &s.scenario.priors {
                if !labels.contains(&p.label) {
                    labels.push(p.label.clone());
                }
            }
        }
        labels
    }

    /// Aligned text tables: one error table per missing fraction (columns
    /// grouped by true rank, values normalized to the noninformative prior)
    /// for each aggregate, then the timing table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let labels = self.labels();
        let width = labels.iter().map(|l| l.len()).max().unwrap_or(5).max(14);
        for agg in [Aggregate::Mean, Aggregate::Median] {
            for (frac, group) in self.groups() {
                let _ = writeln!(
                    out,
                    "Errors, {} ({} over replications, noninformative = 100)",
                    fmt_missing(frac),
                    agg.name()
                );
                let _ = write!(out, "{:width$}", "");
                for s in &group {
                    let _ = write!(out, " | {:^39}", format!("K* = {}", s.scenario.true_rank));
                }
                let _ = write!(out, "\n{:width$}", "prior");
                for _ in &group {
                    let _ = write!(out, " |");
                    for c in COLUMNS {
                        let _ = write!(out, " {c:>9}");
                    }
                }
                out.push('\n');
                let rows: Vec<Vec<MetricRow>> = group.iter().map(|s| s.metric_rows(agg)).collect();
                for label in &labels {
                    let _ = write!(out, "{label:width$}");
                    for r in &rows {
                        let _ = write!(out, " |");
                        match r.iter().find(|m| &m.label == label) {
                            Some(m) => {
                                let e = m.normalized.unwrap_or(m.raw);
                                for c in 0..4 {
                                    let _ = write!(out, " {:>9.1}", e.get(c));
                                }
                            }
                            None => {
                                for _ in 0..4 {
                                    let _ = write!(out, " {:>9}", "-");
                                }
                            }
                        }
                    }
                    out.push('\n');
                }
                out.push('\n');
            }
        }
        out.push_str(&self.timing_text());
        out
    }

    /// Mean seconds per 1,000 iterations, columns by missing fraction and true rank.
    pub fn timing_text(&self) -> String {
        let mut out = String::from("Computation time (seconds per 1,000 iterations)\n");
        let labels = self.labels();
        let width = labels.iter().map(|l| l.len()).max().unwrap_or(5).max(14);
        let groups = self.groups();
        let _ = write!(out, "{:width$}", "");
        for (frac, g) in &groups {
            let _ = write!(
                out,
                " | {:^w$}",
                fmt_missing(*frac),
                w = 9 * g.len() + g.len().saturating_sub(1)
            );
        }
        let _ = write!(out, "\n{:width$}", "K*");
        for (_, g) in &groups {
            let _ = write!(out, " |");
            for s in g {
                let _ = write!(out, " {:>9}", s.scenario.true_rank);
            }
        }
        out.push('\n');
        for label in &labels {
            let _ = write!(out, "{label:width$}");
            for (_, g) in &groups {
                let _ = write!(out, " |");
                for s in g {
                    let v = s
                        .timing()
                        .into_iter()
                        .find(|(l, _)| l == label)
                        .map(|(_, v)| v);
                    match v {
                        Some(v) => {
                            let _ = write!(out, " {v:>9.2}");
                        }
                        None => {
                            let _ = write!(out, " {:>9}", "-");
                        }
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Timing in long CSV form.
    pub fn timing_csv(&self) -> String {
        let mut out =
            String::from("missing_fraction,true_rank,prior,seconds_per_1000_iterations\n");
        for s in &self.scenarios {
            for (label, v) in s.timing() {
                let _ = writeln!(
                    out,
                    "{},{},{},{v}",
                    s.scenario.missing_fraction,
                    s.scenario.true_rank,
                    csv_field(&label)
                );
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scenario(j: usize, ks: usize, frac: f64) -> Scenario {
        Scenario {
            j,
            t: j,
            true_rank: ks,
            snr: 10.0,
            missing_fraction: frac,
            replications: 2,
            priors: vec![
                LabeledPrior::new("noninformative", PriorSpec::Noninformative),
                LabeledPrior::new("exp", PriorSpec::Exponential { chi: 1.0 }),
            ],
            seed: 11,
        }
    }

    #[test]
    fn dgp_is_normalized_and_low_rank() {
        let s = scenario(20, 3, 0.0);
        let d = generate_dgp(&s, &mut dgp_rng(1, 0)).unwrap();
        let n = 400.0;
        assert!(d.theta0.mean().abs() < 1e-12);
        assert!((d.theta0.norm_squared() / n - 1.0).abs() < 1e-12);
        let sv = d.theta0.singular_values();
        assert!(sv[2] > 1e-3);
        assert!(sv.iter().skip(3).all(|&v| v < 1e-10));
        // Σω² / JT equals var(Θ₀) = 1, so the signal-to-noise ratio is τ.
        let s2: f64 = d.omega0.iter().map(|w| w * w).sum();
        assert!((s2 / n - 1.0).abs() < 1e-10);
    }

    #[test]
    fn noise_variance_matches_snr() {
        let s = Scenario {
            j: 1000,
            t: 1000,
            true_rank: 1,
            ..scenario(20, 1, 0.0)
        };
        let d = generate_dgp(&s, &mut dgp_rng(2, 0)).unwrap();
        let u = d.y.values() - &d.theta0;
        let n = 1e6;
        let m = u.mean();
        let var = u.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        // var of the sample variance of a Gaussian: 2σ⁴/(n−1).
        let se = (2.0 * 0.01 / n).sqrt();
        assert!((var - 0.1).abs() < 3.0 * se, "{var}");
    }

    #[test]
    fn missing_count_is_exact() {
        let d = generate_dgp(&scenario(20, 3, 0.9), &mut dgp_rng(3, 0)).unwrap();
        assert_eq!(d.y.missing_count(), 360);
        let d = generate_dgp(&scenario(20, 3, 0.1), &mut dgp_rng(3, 0)).unwrap();
        assert_eq!(d.y.missing_count(), 40);
    }

    #[test]
    fn rejects_full_rank_truth() {
        let mut s = scenario(5, 5, 0.0);
        assert!(s.validate().is_err());
        assert!(generate_dgp(&s, &mut dgp_rng(0, 0)).is_err());
        s.true_rank = 4;
        assert!(generate_dgp(&s, &mut dgp_rng(0, 0)).is_ok());
    }

    #[test]
    fn metrics_examples() {
        let th = DMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64);
        let e = compute_metrics(&[2.0, 1.0, 0.0], &[2.0, 1.0], &th, &th).unwrap();
        assert_eq!(
            e,
            Errors {
                ae_omega: 0.0,
                se_omega: 0.0,
                ae_theta: 0.0,
                se_theta: 0.0
            }
        );
        let e = compute_metrics(&[3.0, 1.0, 0.0], &[2.0, 1.0], &th, &th).unwrap();
        assert_eq!((e.ae_omega, e.se_omega), (1.0, 1.0));
        assert!(compute_metrics(&[1.0], &[1.0, 2.0], &th, &th).is_err());
        assert!(compute_metrics(&[1.0], &[1.0], &th, &DMatrix::zeros(2, 3)).is_err());
    }

    proptest! {
        #[test]
        fn metrics_match_elementwise_loop(
            est in proptest::collection::vec(-5.0f64..5.0, 4),
            truth in proptest::collection::vec(0.0f64..5.0, 1..=4),
            a in proptest::collection::vec(-3.0f64..3.0, 12),
            b in proptest::collection::vec(-3.0f64..3.0, 12),
        ) {
            let ea = DMatrix::from_vec(3, 4, a.clone());
            let tb = DMatrix::from_vec(3, 4, b.clone());
            let e = compute_metrics(&est, &truth, &ea, &tb).unwrap();
            let (mut ae, mut se) = (0.0, 0.0);
            for k in 0..4 {
                let t = if k < truth.len() { truth[k] } else { 0.0 };
                ae += (est[k] - t).abs();
                se += (est[k] - t) * (est[k] - t);
            }
            prop_assert!((e.ae_omega - ae).abs() < 1e-12);
            prop_assert!((e.se_omega - se).abs() < 1e-12);
            let (mut ae, mut se) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..4 {
                    let d = ea[(i, j)] - tb[(i, j)];
                    ae += d.abs();
                    se += d * d;
                }
            }
            prop_assert!((e.ae_theta - ae).abs() < 1e-12);
            prop_assert!((e.se_theta - se).abs() < 1e-12);
        }
    }

    #[test]
    fn comparison_grid_shape() {
        let g = comparison_prior_grid(14).unwrap();
        assert_eq!(g.len(), 10);
        match g[9].spec {
            PriorSpec::Cspe(h) => assert!((h.alpha - elicit_alpha(0.9, 13).unwrap()).abs() < 1e-12),
            _ => panic!("last entry should be CSPE"),
        }
    }

    fn tiny_chain() -> ChainConfig {
        ChainConfig {
            iterations: 40,
            burn_in: 20,
            nuts: crate::samplers::NutsConfig {
                adapt_iterations: 20,
                max_tree_depth: 6,
                ..Default::default()
            },
            ..ChainConfig::default()
        }
    }

    #[test]
    fn benchmark_baseline_is_100_and_order_invariant() {
        let s = scenario(6, 1, 0.1);
        let rep = run_benchmark(&s, &tiny_chain()).unwrap();
        assert_eq!(rep.cells.len(), 4);
        for agg in [Aggregate::Mean, Aggregate::Median] {
            let rows = rep.metric_rows(agg);
            assert_eq!(rows[0].normalized.unwrap(), Errors::from_fn(|_| 100.0));
        }
        // Any cell rerun on its own reproduces the benchmark's result.
        let d = generate_dgp(&s, &mut dgp_rng(s.seed, 1)).unwrap();
        let cfg = ChainConfig {
            seed: s.seed,
            stream: chain_stream(1, 1),
            ..tiny_chain()
        };
        let alone = run_cell(&d, s.model_rank(), &s.priors[1], cfg, 1, 1);
        let inside = rep
            .cells
            .iter()
            .find(|c| c.replication == 1 && c.prior_index == 1)
            .unwrap();
        assert_eq!(alone.errors, inside.errors);
        assert!(inside.errors.is_some());
        let text = BenchmarkReport {
            scenarios: vec![rep],
        }
        .to_text();
        assert!(text.contains("Computation time"));
        assert!(text.contains("noninformative"));
    }

    #[test]
    fn aggregates() {
        assert_eq!(Aggregate::Median.apply(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(Aggregate::Median.apply(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(Aggregate::Mean.apply(vec![1.0, 2.0]), 1.5);
    }
}
