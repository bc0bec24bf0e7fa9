//! Conjugate updates for the latent shrinkage variables, the noise precision
//! and the missing cells.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::{stick_breaking, SpikeSlabHyper, SpikeSlabState};

/// Which mixture weights enter the label update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZWeights {
    /// Stick weights `γ_l`, the prior probability of label `l`.
    #[default]
    Stick,
    /// Cumulative weights `π_l`.
    Cumulative,
}

impl std::str::FromStr for ZWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stick" => Ok(ZWeights::Stick),
            "cumulative" => Ok(ZWeights::Cumulative),
            other => Err(Error::Config(format!(
                "unknown z weighting '{other}' (stick|cumulative)"
            ))),
        }
    }
}

/// Normalized conditional probabilities of the label of `ω_k`.
///
/// Labels `l ≤ k` put `ω_k` in the spike. Returns `None` when every weight
/// underflows.
pub fn z_probabilities(
    omega_k: f64,
    k: usize,
    weights: &[f64],
    hyper: &SpikeSlabHyper,
) -> Option<Vec<f64>> {
    let log_spike = hyper.spike_log_pdf(omega_k);
    let log_slab = hyper.slab_log_pdf(omega_k);
    let logs: Vec<f64> = weights
        .iter()
        .enumerate()
        .map(|(l, &w)| w.ln() + if l <= k { log_spike } else { log_slab })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let unnorm: Vec<f64> = logs.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Some(unnorm.into_iter().map(|v| v / total).collect())
}

fn categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Redraws every label given `ω`, with the rates integrated out.
/// Returns how many labels kept their old value because all weights underflowed.
pub fn gibbs_update_z<R: Rng>(
    state: &mut SpikeSlabState,
    omega: &[f64],
    hyper: &SpikeSlabHyper,
    mode: ZWeights,
    rng: &mut R,
) -> usize {
    let weights = match mode {
        ZWeights::Stick => state.gamma.clone(),
        ZWeights::Cumulative => state.pi.clone(),
    };
    let mut fallbacks = 0;
    for (k, &w) in omega.iter().enumerate() {
        match z_probabilities(w, k, &weights, hyper) {
            Some(p) => state.z[k] = categorical(&p, rng),
            None => fallbacks += 1,
        }
    }
    fallbacks
}

/// `υ_k ~ Beta(1 + #{z = k}, α + #{z > k})` for `k < K`, `υ_K = 1`; refreshes `γ` and `π`.
pub fn gibbs_update_upsilon<R: Rng>(
    state: &mut SpikeSlabState,
    alpha: f64,
    rng: &mut R,
) -> Result<()> {
    let k_max = state.z.len();
    let mut counts = vec![0usize; k_max];
    for &z in &state.z {
        counts[z] += 1;
    }
    let mut above = k_max;
    for (k, &count) in counts.iter().enumerate() {
        above -= count;
        state.upsilon[k] = if k + 1 == k_max {
            1.0
        } else {
            let beta = Beta::new(1.0 + count as f64, alpha + above as f64)
                .map_err(|e| Error::Sampler(format!("stick fraction update: {e}")))?;
            beta.sample(rng)
        };
    }
    let (gamma, pi) = stick_breaking(&state.upsilon)?;
    state.gamma = gamma;
    state.pi = pi;
    Ok(())
}

/// Draws from `Gamma(shape, rate)`.
pub(crate) fn gamma_rate<R: Rng>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    Gamma::new(shape, 1.0 / rate)
        .map(|g| g.sample(rng))
        .map_err(|e| Error::Sampler(format!("Gamma({shape}, {rate}): {e}")))
}

/// Slab rate draw; the rate is floored because a relaxed `ω` may dip below zero.
fn slab_rate<R: Rng>(omega: f64, hyper: &SpikeSlabHyper, rng: &mut R) -> Result<f64> {
    gamma_rate(hyper.kappa1 + 1.0, (hyper.kappa2 + omega).max(1e-12), rng)
}

/// `λ_k = δ` in the spike, `Gamma(κ₁ + 1, κ₂ + ω_k)` in the slab.
pub fn gibbs_update_lambda<R: Rng>(
    state: &mut SpikeSlabState,
    omega: &[f64],
    hyper: &SpikeSlabHyper,
    rng: &mut R,
) -> Result<()> {
    for (k, &w) in omega.iter().enumerate() {
        state.lambda[k] = if state.is_spike(k) {
            hyper.delta
        } else {
            slab_rate(w, hyper, rng)?
        };
    }
    Ok(())
}

/// Latent state of the SSE prior: independent uniform weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SseState {
    pub spike: Vec<bool>,
    pub pi: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl SseState {
    /// Prior-mean start: `π_k = 1/2`, slab membership, `λ_k` at its prior mean.
    pub fn initial(k: usize, hyper: &SpikeSlabHyper) -> Self {
        let lambda = 0.5 * hyper.kappa1 / hyper.kappa2 + 0.5 * hyper.delta;
        Self {
            spike: vec![false; k],
            pi: vec![0.5; k],
            lambda: vec![lambda; k],
        }
    }
}

/// Spike indicator, then `π_k ~ Beta(1 + s, 2 − s)`, then `λ_k`.
pub fn gibbs_update_sse<R: Rng>(
    state: &mut SseState,
    omega: &[f64],
    hyper: &SpikeSlabHyper,
    rng: &mut R,
) -> Result<()> {
    for (k, &w) in omega.iter().enumerate() {
        let log_spike = state.pi[k].ln() + hyper.spike_log_pdf(w);
        let log_slab = (1.0 - state.pi[k]).ln() + hyper.slab_log_pdf(w);
        let m = log_spike.max(log_slab);
        if m.is_finite() {
            let p = (log_spike - m).exp() / ((log_spike - m).exp() + (log_slab - m).exp());
            state.spike[k] = rng.random::<f64>() < p;
        }
        let s = if state.spike[k] { 1.0 } else { 0.0 };
        state.pi[k] = Beta::new(1.0 + s, 2.0 - s)
            .map_err(|e| Error::Sampler(format!("SSE weight update: {e}")))?
            .sample(rng);
        state.lambda[k] = if state.spike[k] {
            hyper.delta
        } else {
            slab_rate(w, hyper, rng)?
        };
    }
    Ok(())
}

/// Shape and rate of `τ | Y, Θ`: `Gamma(ν₁ + JT/2, ν₂ + RSS/2)`.
pub fn tau_conditional(
    data: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    nu1: f64,
    nu2: f64,
) -> (f64, f64) {
    let rss: f64 = data
        .iter()
        .zip(theta.iter())
        .map(|(y, m)| (y - m).powi(2))
        .sum();
    (nu1 + 0.5 * data.len() as f64, nu2 + 0.5 * rss)
}

pub fn gibbs_update_tau<R: Rng>(
    data: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    nu1: f64,
    nu2: f64,
    rng: &mut R,
) -> Result<f64> {
    let (shape, rate) = tau_conditional(data, theta, nu1, nu2);
    gamma_rate(shape, rate, rng)
}

/// Overwrites the cells at column-major `missing` positions with `N(Θ, 1/τ)` draws.
pub fn impute_missing<R: Rng>(
    data: &mut DMatrix<f64>,
    missing: &[usize],
    theta: &DMatrix<f64>,
    tau: f64,
    rng: &mut R,
) -> Result<()> {
    let sd = tau.recip().sqrt();
    let noise =
        Normal::new(0.0, sd).map_err(|e| Error::Sampler(format!("imputation noise: {e}")))?;
    let (dv, tv) = (data.as_mut_slice(), theta.as_slice());
    for &i in missing {
        dv[i] = tv[i] + noise.sample(rng);
    }
    Ok(())
}
