//! Priors on the singular values.
//!
//! The cumulative shrinkage process exponential (CSPE) prior is the hierarchy
//!
//! ```text
//! ω_k | λ_k ~ Exp(λ_k)
//! λ_k | π_k ~ (1 − π_k) Gamma(κ₁, κ₂) + π_k 𝟙{λ_k = δ}
//! π_k = Σ_{l≤k} γ_l,   γ_l = υ_l Π_{m<l} (1 − υ_m)
//! υ_m ~ Beta(1, α),  m < K,   υ_K = 1
//! ```
//!
//! Integrating `λ_k` out of the slab gives a Lomax(κ₁, κ₂) marginal, so the
//! spike-and-slab conditional of `z_k` can be evaluated without `λ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::prefix_sums;

/// Hyperparameters of the CSPE prior. Gamma is shape–rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CspeHyper {
    pub delta: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub alpha: f64,
}

impl CspeHyper {
    pub const DEFAULT_DELTA: f64 = 10.0;
    pub const DEFAULT_KAPPA1: f64 = 2.0;
    pub const DEFAULT_KAPPA2: f64 = 20.0;

    /// Default spike/slab settings with the given stick-breaking concentration.
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            delta: Self::DEFAULT_DELTA,
            kappa1: Self::DEFAULT_KAPPA1,
            kappa2: Self::DEFAULT_KAPPA2,
            alpha,
        }
    }

    pub fn spike_slab(&self) -> SpikeSlabHyper {
        SpikeSlabHyper {
            delta: self.delta,
            kappa1: self.kappa1,
            kappa2: self.kappa2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spike_slab().validate()?;
        positive("alpha", self.alpha)
    }
}

/// Spike rate and slab shape/rate shared by the SSE and CSPE priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeSlabHyper {
    pub delta: f64,
    pub kappa1: f64,
    pub kappa2: f64,
}

impl Default for SpikeSlabHyper {
    fn default() -> Self {
        Self {
            delta: CspeHyper::DEFAULT_DELTA,
            kappa1: CspeHyper::DEFAULT_KAPPA1,
            kappa2: CspeHyper::DEFAULT_KAPPA2,
        }
    }
}

impl SpikeSlabHyper {
    pub fn validate(&self) -> Result<()> {
        positive("delta", self.delta)?;
        positive("kappa1", self.kappa1)?;
        positive("kappa2", self.kappa2)
    }

    /// `log f_E(ω | δ)`.
    pub fn spike_log_pdf(&self, omega: f64) -> f64 {
        exponential_log_pdf(omega, self.delta)
    }

    /// `log f_L(ω | κ₁, κ₂)`.
    pub fn slab_log_pdf(&self, omega: f64) -> f64 {
        lomax_log_pdf(omega, self.kappa1, self.kappa2)
    }

    /// Density of `(1 − π) Lomax(κ₁, κ₂) + π Exp(δ)`, the prior of `ω_k` given `π_k`.
    pub fn marginal_pdf(&self, omega: f64, pi: f64) -> f64 {
        (1.0 - pi) * self.slab_log_pdf(omega).exp() + pi * self.spike_log_pdf(omega).exp()
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

/// The five prior families for `ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum PriorSpec {
    /// `p(ω_k) ∝ 𝟙(ω_k ≥ 0)`; the support is enforced only by the sigmoid relaxation.
    Noninformative,
    Exponential {
        chi: f64,
    },
    Lomax {
        mu1: f64,
        mu2: f64,
    },
    /// Spike-and-slab exponential with independent uniform weights.
    Sse(SpikeSlabHyper),
    Cspe(CspeHyper),
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PriorSpec::Noninformative => Ok(()),
            PriorSpec::Exponential { chi } => positive("chi", *chi),
            PriorSpec::Lomax { mu1, mu2 } => {
                positive("mu1", *mu1)?;
                positive("mu2", *mu2)
            }
            PriorSpec::Sse(h) => h.validate(),
            PriorSpec::Cspe(h) => h.validate(),
        }
    }

    /// Whether the conditional prior of `ω_k` is `Exp(λ_k)` with sampled rates.
    pub fn uses_rates(&self) -> bool {
        matches!(self, PriorSpec::Sse(_) | PriorSpec::Cspe(_))
    }

    pub fn family(&self) -> &'static str {
        match self {
            PriorSpec::Noninformative => "noninformative",
            PriorSpec::Exponential { .. } => "exponential",
            PriorSpec::Lomax { .. } => "lomax",
            PriorSpec::Sse(_) => "sse",
            PriorSpec::Cspe(_) => "cspe",
        }
    }
}

/// Latent state of the CSPE hierarchy for one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeSlabState {
    /// Zero-based component labels; `ω_k` sits in the spike iff `z[k] ≤ k`.
    pub z: Vec<usize>,
    pub upsilon: Vec<f64>,
    pub gamma: Vec<f64>,
    pub pi: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl SpikeSlabState {
    pub fn is_spike(&self, k: usize) -> bool {
        self.z[k] <= k
    }
}

/// Stick weights `γ` and cumulative weights `π` from the breaking fractions `υ`.
pub fn stick_breaking(upsilon: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(bad) = upsilon.iter().find(|u| !(0.0..=1.0).contains(*u)) {
        return Err(Error::InvalidArgument(format!(
            "stick fraction {bad} outside [0, 1]"
        )));
    }
    match upsilon.last() {
        Some(&1.0) => {}
        Some(&last) => {
            return Err(Error::InvalidArgument(format!(
                "last stick fraction must be 1, got {last}"
            )))
        }
        None => return Ok((Vec::new(), Vec::new())),
    }
    let mut remaining = 1.0;
    let gamma: Vec<f64> = upsilon
        .iter()
        .map(|&u| {
            let g = u * remaining;
            remaining *= 1.0 - u;
            g
        })
        .collect();
    let mut pi = prefix_sums(&gamma);
    // υ_K = 1 makes the weights sum to one; pin the rounding.
    if let Some(last) = pi.last_mut() {
        *last = 1.0;
    }
    Ok((gamma, pi))
}

/// `E[π_k] = 1 − (α/(1+α))^k`.
pub fn expected_pi(alpha: f64, k: usize) -> f64 {
    1.0 - (alpha / (1.0 + alpha)).powi(k as i32)
}

/// The `α` for which `E[π_k] = q`.
pub fn elicit_alpha(q: f64, k: usize) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "q must lie in (0, 1), got {q}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let r = (1.0 - q).powf(1.0 / k as f64);
    Ok(r / (1.0 - r))
}

pub(crate) fn exponential_log_pdf(x: f64, rate: f64) -> f64 {
    rate.ln() - rate * x
}

/// Lomax with shape `a` and scale `b`; `−∞` where `1 + x/b ≤ 0`.
pub(crate) fn lomax_log_pdf(x: f64, a: f64, b: f64) -> f64 {
    let base = 1.0 + x / b;
    if base <= 0.0 {
        return f64::NEG_INFINITY;
    }
    (a / b).ln() - (a + 1.0) * base.ln()
}

/// Log prior density of a single `ω_k`; `rate` is the conditional `λ_k` for SSE/CSPE.
pub fn log_density_omega(spec: &PriorSpec, omega: f64, rate: Option<f64>) -> Result<f64> {
    if !(omega >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "omega must be nonnegative, got {omega}"
        )));
    }
    let rate = match (spec.uses_rates(), rate) {
        (true, None) => {
            return Err(Error::InvalidArgument(format!(
                "the {} prior needs the conditional rate lambda_k",
                spec.family()
            )))
        }
        (true, Some(r)) => {
            positive("lambda", r)?;
            Some(r)
        }
        (false, _) => None,
    };
    Ok(log_term(spec, omega, rate).0)
}

/// Value and `d/dω` of one prior term. No domain checks: the sampler evaluates
/// slightly negative `ω` under the sigmoid relaxation.
fn log_term(spec: &PriorSpec, omega: f64, rate: Option<f64>) -> (f64, f64) {
    match *spec {
        PriorSpec::Noninformative => (0.0, 0.0),
        PriorSpec::Exponential { chi } => (exponential_log_pdf(omega, chi), -chi),
        PriorSpec::Lomax { mu1, mu2 } => {
            let base = mu2 + omega;
            if base <= 0.0 {
                (f64::NEG_INFINITY, 0.0)
            } else {
                (lomax_log_pdf(omega, mu1, mu2), -(mu1 + 1.0) / base)
            }
        }
        PriorSpec::Sse(_) | PriorSpec::Cspe(_) => {
            let lambda = rate.unwrap_or(f64::NAN);
            (exponential_log_pdf(omega, lambda), -lambda)
        }
    }
}

/// Sum of prior log densities evaluated at `ω(ω*)` and its gradient with
/// respect to `ω*`.
pub fn log_prior_and_grad_omega_star(
    spec: &PriorSpec,
    omega_star: &[f64],
    rates: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    if spec.uses_rates() {
        match rates {
            None => {
                return Err(Error::InvalidArgument(format!(
                    "the {} prior needs conditional rates",
                    spec.family()
                )))
            }
            Some(r) if r.len() != omega_star.len() => {
                return Err(Error::Dimension(format!(
                    "{} rates for {} singular values",
                    r.len(),
                    omega_star.len()
                )))
            }
            Some(_) => {}
        }
    }
    let omega = crate::model::from_increments(omega_star);
    Ok(log_prior_terms(spec, &omega, rates))
}

/// Value and `ω*`-gradient for a vector already mapped back to `ω`.
pub(crate) fn log_prior_terms(
    spec: &PriorSpec,
    omega: &[f64],
    rates: Option<&[f64]>,
) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut grad_omega = Vec::with_capacity(omega.len());
    for (k, &w) in omega.iter().enumerate() {
        let (v, g) = log_term(spec, w, rates.map(|r| r[k]));
        total += v;
        grad_omega.push(g);
    }
    (total, prefix_sums(&grad_omega))
}
