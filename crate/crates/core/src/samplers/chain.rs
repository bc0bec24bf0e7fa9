//! The per-iteration cycle: schedule, NUTS on `ϑ`, sign alignment, shrinkage
//! sweeps, `τ`, and imputation of missing cells.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::gibbs::{
    gibbs_update_lambda, gibbs_update_sse, gibbs_update_tau, gibbs_update_upsilon, gibbs_update_z,
    impute_missing, SseState, ZWeights,
};
use super::nuts::{LogDensity, Nuts, NutsConfig, TransitionStats};
use crate::error::{Error, Result};
use crate::model::{
    from_increments, theta_unchecked, to_increments, unitarity_defect, Factorization,
    ObservedMatrix,
};
use crate::posterior::{
    align_signs_in_place, reference_signs, GradientRoute, KernelContext, PosteriorKernel,
    RelaxationSchedule, ThetaLayout,
};
use crate::priors::{expected_pi, stick_breaking, CspeHyper, PriorSpec, SpikeSlabState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    /// Total iterations including burn-in.
    pub iterations: u64,
    pub burn_in: u64,
    /// Keep every `thin`-th post-burn-in draw.
    pub thin: u64,
    pub seed: u64,
    /// ChaCha stream, so that related chains can share a seed.
    pub stream: u64,
    pub nuts: NutsConfig,
    pub schedule: RelaxationSchedule,
    /// Shape and rate of the Gamma prior on `τ`.
    pub nu1: f64,
    pub nu2: f64,
    pub z_weights: ZWeights,
    /// Also keep `vec Φ` and `vec Ψ` for every retained draw.
    pub store_factors: bool,
    /// Hold `τ` at this value instead of sampling it.
    pub fixed_tau: Option<f64>,
    pub route: GradientRoute,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iterations: 12_000,
            burn_in: 2_000,
            thin: 1,
            seed: 1,
            stream: 0,
            nuts: NutsConfig::default(),
            schedule: RelaxationSchedule::default(),
            nu1: 1e-3,
            nu2: 1e-3,
            z_weights: ZWeights::Stick,
            store_factors: false,
            fixed_tau: None,
            route: GradientRoute::default(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::Config(format!(
                "iterations ({}) must exceed burn_in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        for (name, v) in [("nu1", self.nu1), ("nu2", self.nu2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(t) = self.fixed_tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!(
                    "fixed_tau must be positive, got {t}"
                )));
            }
        }
        self.nuts.validate()?;
        self.schedule.validate()
    }
}

/// Latent shrinkage variables, by prior family.
#[derive(Debug, Clone, PartialEq)]
pub enum Shrinkage {
    None,
    Cspe(SpikeSlabState),
    Sse(SseState),
}

impl Shrinkage {
    pub fn rates(&self) -> Option<&[f64]> {
        match self {
            Shrinkage::None => None,
            Shrinkage::Cspe(s) => Some(&s.lambda),
            Shrinkage::Sse(s) => Some(&s.lambda),
        }
    }
}

/// Everything the sampler carries between iterations.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// `(vec Φ, vec Ψ, ω*)`.
    pub theta: Vec<f64>,
    pub layout: ThetaLayout,
    pub tau: f64,
    pub shrinkage: Shrinkage,
    /// Data with current imputations in the missing cells.
    pub completed: DMatrix<f64>,
    /// Column-major positions of the missing cells.
    pub missing: Vec<usize>,
    pub iteration: u64,
    /// Column signs of `Φ` fixed at initialization.
    pub reference: Vec<f64>,
}

impl ChainState {
    pub fn omega(&self) -> Vec<f64> {
        from_increments(self.layout.omega_star(&self.theta))
    }

    pub fn factorization(&self) -> Factorization {
        self.layout.factorization(&self.theta)
    }

    /// `Θ = ΦΩΨᵀ` at the current state.
    pub fn theta_matrix(&self) -> DMatrix<f64> {
        let phi = self.layout.phi(&self.theta);
        let psi = self.layout.psi(&self.theta);
        theta_unchecked(&phi, &self.omega(), &psi)
    }
}

/// Starting point: rank-`K` SVD of the zero-filled data.
pub fn initial_state<R: rand::Rng>(
    data: &ObservedMatrix,
    k: usize,
    prior: &PriorSpec,
    fixed_tau: Option<f64>,
    rng: &mut R,
) -> Result<ChainState> {
    let (j, t) = (data.rows(), data.cols());
    if k == 0 || k > j.min(t) {
        return Err(Error::InvalidArgument(format!(
            "rank {k} must lie in 1..={}",
            j.min(t)
        )));
    }
    let completed = data.filled(0.0);
    let svd = completed.clone().svd(true, true);
    let u = svd
        .u
        .as_ref()
        .ok_or_else(|| Error::Sampler("SVD returned no left vectors".into()))?;
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::Sampler("SVD returned no right vectors".into()))?;
    let phi = u.columns(0, k).into_owned();
    let psi = v_t.rows(0, k).transpose();
    let omega: Vec<f64> = svd.singular_values.iter().take(k).copied().collect();
    let layout = ThetaLayout::new(j, t, k);
    let theta = layout.pack(&phi, &psi, &to_increments(&omega));

    let fit = theta_unchecked(&phi, &omega, &psi);
    let tau = fixed_tau.unwrap_or_else(|| {
        let var = (&completed - &fit).norm_squared() / (j * t) as f64;
        1.0 / var.max(1e-8)
    });

    let shrinkage = match prior {
        PriorSpec::Cspe(h) => Shrinkage::Cspe(initial_cspe(k, h, rng)?),
        PriorSpec::Sse(h) => Shrinkage::Sse(SseState::initial(k, h)),
        _ => Shrinkage::None,
    };

    Ok(ChainState {
        theta,
        layout,
        tau,
        shrinkage,
        completed,
        missing: data.missing_indices(),
        iteration: 0,
        reference: reference_signs(&phi),
    })
}

fn initial_cspe<R: rand::Rng>(k: usize, h: &CspeHyper, rng: &mut R) -> Result<SpikeSlabState> {
    let stick = Beta::new(1.0, h.alpha).map_err(|e| Error::Config(format!("alpha: {e}")))?;
    let mut upsilon: Vec<f64> = (0..k).map(|_| stick.sample(rng)).collect();
    upsilon[k - 1] = 1.0;
    let (gamma, pi) = stick_breaking(&upsilon)?;
    let lambda = (1..=k)
        .map(|l| {
            let p = if l == k { 1.0 } else { expected_pi(h.alpha, l) };
            (1.0 - p) * h.kappa1 / h.kappa2 + p * h.delta
        })
        .collect();
    Ok(SpikeSlabState {
        z: vec![k - 1; k],
        upsilon,
        gamma,
        pi,
        lambda,
    })
}

/// Counters accumulated over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub divergences: u64,
    pub divergences_post_warmup: u64,
    pub transitions_post_warmup: u64,
    pub leapfrog_steps: u64,
    pub sign_flips: u64,
    /// Label updates skipped because every mixture weight underflowed.
    pub z_fallbacks: u64,
    pub mean_accept_post_warmup: f64,
    pub final_step_size: f64,
}

impl ChainStats {
    pub fn divergence_rate(&self) -> f64 {
        if self.transitions_post_warmup == 0 {
            0.0
        } else {
            self.divergences_post_warmup as f64 / self.transitions_post_warmup as f64
        }
    }
}

/// A running chain.
pub struct Chain {
    config: ChainConfig,
    prior: PriorSpec,
    state: ChainState,
    nuts: Nuts,
    rng: ChaCha8Rng,
    stats: ChainStats,
}

impl Chain {
    pub fn new(
        data: &ObservedMatrix,
        k: usize,
        prior: PriorSpec,
        config: ChainConfig,
    ) -> Result<Self> {
        config.validate()?;
        prior.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(config.stream);
        let state = initial_state(data, k, &prior, config.fixed_tau, &mut rng)?;
        Self::with_rng(state, prior, config, rng)
    }

    /// Resumes from an explicit state.
    pub fn from_state(state: ChainState, prior: PriorSpec, config: ChainConfig) -> Result<Self> {
        config.validate()?;
        prior.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(config.stream);
        Self::with_rng(state, prior, config, rng)
    }

    fn with_rng(
        state: ChainState,
        prior: PriorSpec,
        config: ChainConfig,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let chain = Self {
            nuts: Nuts::new(config.nuts),
            config,
            prior,
            state,
            rng,
            stats: ChainStats::default(),
        };
        let eta = |l| chain.config.schedule.eta(chain.state.iteration, l);
        let mut kernel = chain.kernel(eta(1), eta(2));
        let mut grad = vec![0.0; kernel.dim()];
        let v = kernel.log_density_and_grad(&chain.state.theta, &mut grad);
        if !v.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Sampler(format!(
                "kernel is not finite at the initial state ({v})"
            )));
        }
        Ok(chain)
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ChainState {
        &mut self.state
    }

    pub fn stats(&self) -> &ChainStats {
        &self.stats
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn kernel(&self, eta1: f64, eta2: f64) -> PosteriorKernel {
        let ctx = KernelContext {
            data: self.state.completed.clone(),
            tau: self.state.tau,
            rates: self.state.shrinkage.rates().map(<[f64]>::to_vec),
            eta1,
            eta2,
            prior: self.prior,
            route: self.config.route,
        };
        PosteriorKernel::new(ctx, self.state.layout.k)
    }

    /// Everything but the imputation: schedule, `ϑ`, signs, shrinkage, `τ`.
    /// Returns `Θ` at the new state.
    pub fn step_parameters(&mut self) -> Result<(TransitionStats, DMatrix<f64>)> {
        let i = self.state.iteration;
        let (eta1, eta2) = (
            self.config.schedule.eta(i, 1),
            self.config.schedule.eta(i, 2),
        );
        let mut kernel = self.kernel(eta1, eta2);
        let tr = self
            .nuts
            .transition(&mut self.state.theta, &mut kernel, &mut self.rng)?;
        self.stats.leapfrog_steps += tr.n_leapfrog;
        if tr.diverged {
            self.stats.divergences += 1;
        }
        if i >= self.config.nuts.adapt_iterations {
            let n = self.stats.transitions_post_warmup as f64;
            self.stats.mean_accept_post_warmup =
                (self.stats.mean_accept_post_warmup * n + tr.accept_stat) / (n + 1.0);
            self.stats.transitions_post_warmup += 1;
            if tr.diverged {
                self.stats.divergences_post_warmup += 1;
            }
        }
        self.stats.final_step_size = tr.step_size;
        self.stats.sign_flips += align_signs_in_place(
            &mut self.state.theta,
            &self.state.layout,
            &self.state.reference,
        ) as u64;

        let omega = self.state.omega();
        match (&mut self.state.shrinkage, &self.prior) {
            (Shrinkage::Cspe(s), PriorSpec::Cspe(h)) => {
                let ss = h.spike_slab();
                self.stats.z_fallbacks +=
                    gibbs_update_z(s, &omega, &ss, self.config.z_weights, &mut self.rng) as u64;
                gibbs_update_upsilon(s, h.alpha, &mut self.rng)?;
                gibbs_update_lambda(s, &omega, &ss, &mut self.rng)?;
            }
            (Shrinkage::Sse(s), PriorSpec::Sse(h)) => {
                gibbs_update_sse(s, &omega, h, &mut self.rng)?
            }
            (Shrinkage::None, _) => {}
            _ => {
                return Err(Error::Sampler(
                    "shrinkage state does not match the prior family".into(),
                ))
            }
        }

        let theta = self.state.theta_matrix();
        if self.config.fixed_tau.is_none() {
            self.state.tau = gibbs_update_tau(
                &self.state.completed,
                &theta,
                self.config.nu1,
                self.config.nu2,
                &mut self.rng,
            )?;
        }
        Ok((tr, theta))
    }

    /// One full iteration.
    pub fn step(&mut self) -> Result<TransitionStats> {
        let (tr, theta) = self.step_parameters()?;
        impute_missing(
            &mut self.state.completed,
            &self.state.missing,
            &theta,
            self.state.tau,
            &mut self.rng,
        )?;
        self.state.iteration += 1;
        Ok(tr)
    }
}

/// One retained iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub iteration: u64,
    pub omega: Vec<f64>,
    pub tau: f64,
    /// Rates, for the SSE/CSPE priors.
    pub lambda: Option<Vec<f64>>,
    /// Zero-based CSPE labels.
    pub z: Option<Vec<usize>>,
    /// SSE spike indicators.
    pub spike: Option<Vec<bool>>,
    pub phi_defect: f64,
    pub psi_defect: f64,
    pub phi: Option<Vec<f64>>,
    pub psi: Option<Vec<f64>>,
}

impl Draw {
    pub fn omega_star(&self) -> Vec<f64> {
        to_increments(&self.omega)
    }
}

/// Retained draws plus run-level summaries.
#[derive(Debug, Clone)]
pub struct DrawStore {
    pub j: usize,
    pub t: usize,
    pub k: usize,
    pub prior: PriorSpec,
    pub config: ChainConfig,
    pub draws: Vec<Draw>,
    /// Mean of `Θ` over the retained draws.
    pub theta_mean: DMatrix<f64>,
    pub stats: ChainStats,
    /// Wall-clock seconds of the whole run; not part of the persisted record.
    pub elapsed_seconds: f64,
}

impl DrawStore {
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let rate = self.stats.divergence_rate();
        if rate > 0.1 {
            out.push(format!(
                "{:.1}% of post-warm-up transitions diverged ({} of {})",
                100.0 * rate,
                self.stats.divergences_post_warmup,
                self.stats.transitions_post_warmup
            ));
        }
        if self.stats.z_fallbacks > 0 {
            out.push(format!(
                "{} label updates kept their previous value (weights underflowed)",
                self.stats.z_fallbacks
            ));
        }
        out
    }

    /// Mean of `‖ΦᵀΦ − I‖_F` over the retained draws.
    pub fn mean_phi_defect(&self) -> f64 {
        self.draws.iter().map(|d| d.phi_defect).sum::<f64>() / self.draws.len().max(1) as f64
    }

    pub fn mean_psi_defect(&self) -> f64 {
        self.draws.iter().map(|d| d.psi_defect).sum::<f64>() / self.draws.len().max(1) as f64
    }
}

fn record(state: &ChainState, store_factors: bool) -> Draw {
    let phi = state.layout.phi(&state.theta);
    let psi = state.layout.psi(&state.theta);
    let (lambda, z, spike) = match &state.shrinkage {
        Shrinkage::None => (None, None, None),
        Shrinkage::Cspe(s) => (Some(s.lambda.clone()), Some(s.z.clone()), None),
        Shrinkage::Sse(s) => (Some(s.lambda.clone()), None, Some(s.spike.clone())),
    };
    Draw {
        iteration: state.iteration,
        omega: state.omega(),
        tau: state.tau,
        lambda,
        z,
        spike,
        phi_defect: unitarity_defect(&phi),
        psi_defect: unitarity_defect(&psi),
        phi: store_factors.then(|| phi.as_slice().to_vec()),
        psi: store_factors.then(|| psi.as_slice().to_vec()),
    }
}

/// Runs one chain to completion and returns its retained draws.
pub fn run_chain(
    data: &ObservedMatrix,
    k: usize,
    prior: PriorSpec,
    config: ChainConfig,
) -> Result<DrawStore> {
    let started = Instant::now();
    let mut chain = Chain::new(data, k, prior, config.clone())?;
    let (j, t) = (data.rows(), data.cols());
    let mut draws = Vec::new();
    let mut theta_sum = DMatrix::zeros(j, t);
    for _ in 0..config.iterations {
        let i = chain.state.iteration;
        chain.step()?;
        if i >= config.burn_in && (i - config.burn_in).is_multiple_of(config.thin) {
            let mut d = record(&chain.state, config.store_factors);
            d.iteration = i;
            theta_sum += chain.state.theta_matrix();
            draws.push(d);
        }
    }
    let n = draws.len().max(1) as f64;
    Ok(DrawStore {
        j,
        t,
        k,
        prior,
        config,
        draws,
        theta_mean: theta_sum / n,
        stats: chain.stats,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    })
}
