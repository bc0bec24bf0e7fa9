//! Relaxed log posterior of `ϑ = (vec Φ, vec Ψ, ω*)` and its gradient.
//!
//! The Stiefel constraints are replaced by `exp(−η₁‖XᵀX − I‖²_F)` and the
//! orthant constraint on `ω*` by a product of sigmoids `Π σ(η₂ ω*_k)`. The
//! penalties are tightened along a [`RelaxationSchedule`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{from_increments, prefix_sums, Factorization};
use crate::priors::{log_prior_terms, PriorSpec};
use crate::samplers::nuts::LogDensity;

/// Schedule for the penalty weights `η₁` (unitarity) and `η₂` (ordering).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxationSchedule {
    pub eta_bar1: f64,
    pub eta_bar2: f64,
    pub a_eta: f64,
    pub b_eta: f64,
}

impl Default for RelaxationSchedule {
    fn default() -> Self {
        Self {
            eta_bar1: 1e3,
            eta_bar2: 1e3,
            a_eta: 0.5,
            b_eta: 0.1,
        }
    }
}

impl RelaxationSchedule {
    /// A schedule that sits at its ceiling from iteration 1 on (iteration 0 is always 0).
    pub fn constant(eta1: f64, eta2: f64) -> Self {
        Self {
            eta_bar1: eta1,
            eta_bar2: eta2,
            a_eta: 0.5,
            b_eta: 1e-12 / eta1.max(eta2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta_bar1", self.eta_bar1),
            ("eta_bar2", self.eta_bar2),
            ("b_eta", self.b_eta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.a_eta > 0.0 && self.a_eta < 1.0) {
            return Err(Error::Config(format!(
                "a_eta must lie in (0, 1), got {}",
                self.a_eta
            )));
        }
        Ok(())
    }

    /// `η_l` at iteration `i`; `l` is 1 (unitarity) or 2 (ordering).
    pub fn eta(&self, i: u64, l: u8) -> f64 {
        let bar = if l == 1 { self.eta_bar1 } else { self.eta_bar2 };
        relaxation_eta(bar, self.a_eta, self.b_eta, i)
    }
}

/// `η̄[1 − exp(log(1−a_η)/(b_η η̄) · i)]` below `i = η̄`, then `η̄`.
pub fn relaxation_eta(eta_bar: f64, a_eta: f64, b_eta: f64, i: u64) -> f64 {
    let i = i as f64;
    if i >= eta_bar {
        return eta_bar;
    }
    let rate = (1.0 - a_eta).ln() / (b_eta * eta_bar);
    eta_bar * -(rate * i).exp_m1()
}

/// How the `ω*` block of the gradient is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientRoute {
    /// Materialize `Υ` (a `JT×K` matrix) when it fits the byte budget, else stream.
    Auto { upsilon_budget_bytes: usize },
    /// Always materialize `Υ`.
    Dense,
    /// Use `Υᵀ vec(R) = (C⁻¹)ᵀ (φ_kᵀ R ψ_k)_k` with `R = Y − Θ`; no `JT×K` buffer.
    Streaming,
}

impl Default for GradientRoute {
    fn default() -> Self {
        GradientRoute::Auto {
            upsilon_budget_bytes: 0,
        }
    }
}

impl GradientRoute {
    fn dense_for(&self, j: usize, t: usize, k: usize) -> bool {
        match *self {
            GradientRoute::Dense => true,
            GradientRoute::Streaming => false,
            GradientRoute::Auto {
                upsilon_budget_bytes,
            } => j * t * k * std::mem::size_of::<f64>() <= upsilon_budget_bytes,
        }
    }
}

/// Everything the `ϑ` update conditions on.
#[derive(Debug, Clone)]
pub struct KernelContext {
    /// `Y` with the current imputations in missing cells.
    pub data: DMatrix<f64>,
    pub tau: f64,
    /// `λ` for the SSE/CSPE priors; ignored otherwise.
    pub rates: Option<Vec<f64>>,
    pub eta1: f64,
    pub eta2: f64,
    pub prior: PriorSpec,
    pub route: GradientRoute,
}

impl KernelContext {
    pub fn layout(&self, k: usize) -> ThetaLayout {
        ThetaLayout::new(self.data.nrows(), self.data.ncols(), k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.eta1 >= 0.0 && self.eta2 >= 0.0) {
            return Err(Error::InvalidArgument(
                "penalty weights must be nonnegative".into(),
            ));
        }
        if self.prior.uses_rates() && self.rates.is_none() {
            return Err(Error::InvalidArgument(format!(
                "the {} prior needs conditional rates",
                self.prior.family()
            )));
        }
        Ok(())
    }
}

/// Offsets of the three blocks inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThetaLayout {
    pub j: usize,
    pub t: usize,
    pub k: usize,
}

impl ThetaLayout {
    pub fn new(j: usize, t: usize, k: usize) -> Self {
        Self { j, t, k }
    }

    pub fn len(&self) -> usize {
        self.j * self.k + self.t * self.k + self.k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn psi_start(&self) -> usize {
        self.j * self.k
    }

    fn omega_start(&self) -> usize {
        self.j * self.k + self.t * self.k
    }

    pub fn phi(&self, theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.j, self.k, &theta[..self.psi_start()])
    }

    pub fn psi(&self, theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.t, self.k, &theta[self.psi_start()..self.omega_start()])
    }

    pub fn omega_star<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.omega_start()..]
    }

    pub fn omega_star_mut<'a>(&self, theta: &'a mut [f64]) -> &'a mut [f64] {
        let start = self.omega_start();
        &mut theta[start..]
    }

    pub fn pack(&self, phi: &DMatrix<f64>, psi: &DMatrix<f64>, omega_star: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(phi.as_slice());
        out.extend_from_slice(psi.as_slice());
        out.extend_from_slice(omega_star);
        out
    }

    pub fn factorization(&self, theta: &[f64]) -> Factorization {
        Factorization {
            phi: self.phi(theta),
            psi: self.psi(theta),
            omega: DVector::from_vec(from_increments(self.omega_star(theta))),
        }
    }

    pub fn from_factorization(&self, f: &Factorization) -> Vec<f64> {
        self.pack(
            &f.phi,
            &f.psi,
            &crate::model::to_increments(f.omega.as_slice()),
        )
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.len() {
            return Err(Error::Dimension(format!(
                "parameter vector has length {}, expected {}",
                theta.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `1 / (1 + e^{−x})` without overflow.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gram_minus_identity(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = x.tr_mul(x);
    for i in 0..g.nrows() {
        g[(i, i)] -= 1.0;
    }
    g
}

fn scale_columns(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut out = x.clone();
    for (mut col, &s) in out.column_iter_mut().zip(w) {
        col *= s;
    }
    out
}

/// Log of the relaxed conditional posterior kernel, including the likelihood
/// constant `(JT/2) log(τ/2π)`.
pub fn log_kernel(theta: &[f64], k: usize, ctx: &KernelContext) -> Result<f64> {
    let layout = ctx.layout(k);
    layout.check(theta)?;
    ctx.validate()?;
    Ok(log_value(theta, &layout, ctx))
}

/// Analytic gradient of [`log_kernel`], stacked as `(vec Φ, vec Ψ, ω*)`.
pub fn grad_log_kernel(theta: &[f64], k: usize, ctx: &KernelContext) -> Result<Vec<f64>> {
    let layout = ctx.layout(k);
    layout.check(theta)?;
    ctx.validate()?;
    let mut grad = vec![0.0; layout.len()];
    evaluate_with_grad(theta, &layout, ctx, &mut grad);
    Ok(grad)
}

fn log_value(theta: &[f64], layout: &ThetaLayout, ctx: &KernelContext) -> f64 {
    let phi = layout.phi(theta);
    let psi = layout.psi(theta);
    let omega_star = layout.omega_star(theta);
    let omega = from_increments(omega_star);
    let resid = &ctx.data - scale_columns(&phi, &omega) * psi.transpose();
    let cells = (layout.j * layout.t) as f64;
    let loglik = -0.5 * ctx.tau * resid.norm_squared()
        + 0.5 * cells * (ctx.tau / (2.0 * std::f64::consts::PI)).ln();
    let penalty = -ctx.eta1
        * (gram_minus_identity(&phi).norm_squared() + gram_minus_identity(&psi).norm_squared());
    let rho: f64 = omega_star.iter().map(|&w| -softplus(-ctx.eta2 * w)).sum();
    let (prior, _) = log_prior_terms(&ctx.prior, &omega, ctx.rates.as_deref());
    loglik + penalty + rho + prior
}

/// Value and gradient in one pass; `grad` must have the layout's length.
fn evaluate_with_grad(
    theta: &[f64],
    layout: &ThetaLayout,
    ctx: &KernelContext,
    grad: &mut [f64],
) -> f64 {
    let (j, t, k) = (layout.j, layout.t, layout.k);
    let phi = layout.phi(theta);
    let psi = layout.psi(theta);
    let omega_star = layout.omega_star(theta);
    let omega = from_increments(omega_star);
    let tau = ctx.tau;
    let y = &ctx.data;

    let phi_omega = scale_columns(&phi, &omega);
    let psi_omega = scale_columns(&psi, &omega);
    let resid = y - &phi_omega * psi.transpose();

    let phi_gram = phi.tr_mul(&phi);
    let psi_gram = psi.tr_mul(&psi);
    let mut phi_defect = phi_gram.clone();
    let mut psi_defect = psi_gram.clone();
    for i in 0..k {
        phi_defect[(i, i)] -= 1.0;
        psi_defect[(i, i)] -= 1.0;
    }

    let cells = (j * t) as f64;
    let loglik =
        -0.5 * tau * resid.norm_squared() + 0.5 * cells * (tau / (2.0 * std::f64::consts::PI)).ln();
    let penalty = -ctx.eta1 * (phi_defect.norm_squared() + psi_defect.norm_squared());
    let rho: f64 = omega_star.iter().map(|&w| -softplus(-ctx.eta2 * w)).sum();
    let (prior, prior_grad) = log_prior_terms(&ctx.prior, &omega, ctx.rates.as_deref());
    let value = loglik + penalty + rho + prior;

    let four_eta = 4.0 * ctx.eta1;
    let dense = ctx.route.dense_for(j, t, k);

    // ΦΦᵀΦ − Φ = Φ(ΦᵀΦ − I).
    let (g_phi, g_psi, lik_omega_star) = if dense {
        // −τ(−YΨΩ + ΦΩΨᵀΨΩ) and −τ(−YᵀΦΩ + ΨΩΦᵀΦΩ).
        let g_phi = (y * &psi_omega - &phi_omega * scale_columns(&psi_gram, &omega)) * tau;
        let g_psi = (y.tr_mul(&phi_omega) - &psi_omega * scale_columns(&phi_gram, &omega)) * tau;
        // Υ = (vec φ₁ψ₁ᵀ, …, vec φ_Kψ_Kᵀ) C⁻¹: column l accumulates the rank-one terms k ≤ l.
        let mut upsilon = DMatrix::<f64>::zeros(j * t, k);
        let mut running = DMatrix::<f64>::zeros(j, t);
        for l in 0..k {
            running.ger(1.0, &phi.column(l), &psi.column(l), 1.0);
            upsilon.column_mut(l).copy_from_slice(running.as_slice());
        }
        let vec_y = DVector::from_column_slice(y.as_slice());
        let w = DVector::from_column_slice(omega_star);
        // −τ(−Υᵀ vec Y + ΥᵀΥ ω*)
        let lik = (upsilon.tr_mul(&vec_y) - upsilon.tr_mul(&(&upsilon * w))) * tau;
        (g_phi, g_psi, lik.as_slice().to_vec())
    } else {
        let r_psi = &resid * &psi;
        let rt_phi = resid.tr_mul(&phi);
        let g_phi = scale_columns(&r_psi, &omega) * tau;
        let g_psi = scale_columns(&rt_phi, &omega) * tau;
        let diag: Vec<f64> = (0..k)
            .map(|c| tau * phi.column(c).dot(&r_psi.column(c)))
            .collect();
        (g_phi, g_psi, prefix_sums(&diag))
    };
    let g_phi = g_phi - &phi * &phi_defect * four_eta;
    let g_psi = g_psi - &psi * &psi_defect * four_eta;

    let split_a = j * k;
    let split_b = split_a + t * k;
    grad[..split_a].copy_from_slice(g_phi.as_slice());
    grad[split_a..split_b].copy_from_slice(g_psi.as_slice());
    for (c, g) in grad[split_b..].iter_mut().enumerate() {
        let w = omega_star[c];
        *g = lik_omega_star[c] + prior_grad[c] + ctx.eta2 * sigmoid(-ctx.eta2 * w);
    }
    value
}

/// The kernel as a [`LogDensity`] over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct PosteriorKernel {
    pub ctx: KernelContext,
    layout: ThetaLayout,
}

impl PosteriorKernel {
    pub fn new(ctx: KernelContext, k: usize) -> Self {
        let layout = ctx.layout(k);
        Self { ctx, layout }
    }

    pub fn layout(&self) -> ThetaLayout {
        self.layout
    }
}

impl LogDensity for PosteriorKernel {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn log_density_and_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        evaluate_with_grad(x, &self.layout, &self.ctx, grad)
    }
}

/// Sign of the first nonzero entry (`0` for an all-zero column).
pub fn column_sign(col: &[f64]) -> f64 {
    col.iter()
        .find(|&&v| v != 0.0)
        .map(|v| v.signum())
        .unwrap_or(0.0)
}

/// Reference signs from the columns of `Φ`.
pub fn reference_signs(phi: &DMatrix<f64>) -> Vec<f64> {
    phi.column_iter()
        .map(|c| column_sign(c.as_slice()))
        .collect()
}

/// Flips columns of `Φ` and `Ψ` together so that the sign of the first entry
/// of each `Φ` column matches `reference`.
pub fn align_signs(current: &Factorization, reference: &[f64]) -> Result<Factorization> {
    if reference.len() != current.rank() {
        return Err(Error::Dimension(format!(
            "{} reference signs for rank {}",
            reference.len(),
            current.rank()
        )));
    }
    let mut out = current.clone();
    for (k, &want) in reference.iter().enumerate() {
        let have = column_sign(out.phi.column(k).as_slice());
        if want != 0.0 && have != 0.0 && have != want {
            out.phi.column_mut(k).neg_mut();
            out.psi.column_mut(k).neg_mut();
        }
    }
    Ok(out)
}

/// [`align_signs`] on the flat parameter vector. Returns the number of flips.
pub fn align_signs_in_place(theta: &mut [f64], layout: &ThetaLayout, reference: &[f64]) -> usize {
    let (j, t) = (layout.j, layout.t);
    let psi_start = layout.psi_start();
    let mut flips = 0;
    for (k, &want) in reference.iter().enumerate() {
        let have = column_sign(&theta[k * j..(k + 1) * j]);
        if want != 0.0 && have != 0.0 && have != want {
            theta[k * j..(k + 1) * j].iter_mut().for_each(|v| *v = -*v);
            let ps = psi_start + k * t;
            theta[ps..ps + t].iter_mut().for_each(|v| *v = -*v);
            flips += 1;
        }
    }
    flips
}

// Index loops in the oracles mirror the formulas term by term.
#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::model::compose_theta;
    use crate::priors::{CspeHyper, SpikeSlabHyper};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn orthonormal(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        let q = random_matrix(rng, r, c).qr().q();
        q.columns(0, c).into_owned()
    }

    fn context(
        rng: &mut ChaCha8Rng,
        j: usize,
        t: usize,
        k: usize,
        prior: PriorSpec,
        eta1: f64,
        eta2: f64,
    ) -> KernelContext {
        KernelContext {
            data: random_matrix(rng, j, t),
            tau: rng.random_range(0.5..5.0),
            rates: Some((0..k).map(|_| rng.random_range(0.1..10.0)).collect()),
            eta1,
            eta2,
            prior,
            route: GradientRoute::Streaming,
        }
    }

    /// Direct triple loops over every term, no matrix algebra.
    fn naive_log_kernel(theta: &[f64], j: usize, t: usize, k: usize, ctx: &KernelContext) -> f64 {
        let phi = |a: usize, c: usize| theta[c * j + a];
        let psi = |b: usize, c: usize| theta[j * k + c * t + b];
        let ws = &theta[j * k + t * k..];
        let mut omega = vec![0.0; k];
        for c in 0..k {
            for l in c..k {
                omega[c] += ws[l];
            }
        }
        let mut sse = 0.0;
        for a in 0..j {
            for b in 0..t {
                let mut th = 0.0;
                for c in 0..k {
                    th += phi(a, c) * omega[c] * psi(b, c);
                }
                sse += (ctx.data[(a, b)] - th).powi(2);
            }
        }
        let mut value = -0.5 * ctx.tau * sse
            + 0.5 * (j * t) as f64 * (ctx.tau / (2.0 * std::f64::consts::PI)).ln();
        for (rows, get) in [(j, &phi as &dyn Fn(usize, usize) -> f64), (t, &psi)] {
            let mut fro = 0.0;
            for c1 in 0..k {
                for c2 in 0..k {
                    let mut g = 0.0;
                    for r in 0..rows {
                        g += get(r, c1) * get(r, c2);
                    }
                    if c1 == c2 {
                        g -= 1.0;
                    }
                    fro += g * g;
                }
            }
            value -= ctx.eta1 * fro;
        }
        for &w in ws {
            value += (1.0 / (1.0 + (-ctx.eta2 * w).exp())).ln();
        }
        for c in 0..k {
            value += match ctx.prior {
                PriorSpec::Noninformative => 0.0,
                PriorSpec::Exponential { chi } => chi.ln() - chi * omega[c],
                PriorSpec::Lomax { mu1, mu2 } => {
                    (mu1 / mu2).ln() - (mu1 + 1.0) * (1.0 + omega[c] / mu2).ln()
                }
                _ => {
                    let l = ctx.rates.as_ref().unwrap()[c];
                    l.ln() - l * omega[c]
                }
            };
        }
        value
    }

    fn priors() -> [PriorSpec; 5] {
        [
            PriorSpec::Noninformative,
            PriorSpec::Exponential { chi: 0.5 },
            PriorSpec::Lomax { mu1: 2.0, mu2: 5.0 },
            PriorSpec::Sse(SpikeSlabHyper::default()),
            PriorSpec::Cspe(CspeHyper::with_alpha(3.0)),
        ]
    }

    #[test]
    fn schedule_values() {
        let s = RelaxationSchedule::default();
        assert_eq!(s.eta(0, 1), 0.0);
        assert_relative_eq!(s.eta(100, 1), 500.0, epsilon = 1e-9);
        assert_relative_eq!(s.eta(100, 2), 500.0, epsilon = 1e-9);
        assert_eq!(s.eta(1_000_000, 2), 1000.0);
        assert_eq!(s.eta(1000, 1), 1000.0);
        let mut prev = 0.0;
        for i in 0..1500 {
            let e = s.eta(i, 1);
            assert!(e >= prev && e <= 1000.0);
            prev = e;
        }
        let c = RelaxationSchedule::constant(7.0, 9.0);
        assert_eq!(c.eta(0, 1), 0.0);
        assert_relative_eq!(c.eta(1, 1), 7.0);
        assert_relative_eq!(c.eta(3, 2), 9.0);
        assert!(c.validate().is_ok());
        assert!(RelaxationSchedule::default().validate().is_ok());
    }

    #[test]
    fn kernel_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (j, t, k) = (6, 6, 2);
        for i in 0..50 {
            let prior = priors()[i % 5];
            let ctx = context(
                &mut rng,
                j,
                t,
                k,
                prior,
                [0.0, 1.0, 1e3][i % 3],
                [0.0, 1.0, 1e3][(i / 3) % 3],
            );
            let layout = ctx.layout(k);
            let mut theta: Vec<f64> = (0..layout.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5)
                .collect();
            // Keep ω inside the Lomax support.
            for w in layout.omega_star_mut(&mut theta) {
                *w = w.abs();
            }
            let v = log_kernel(&theta, k, &ctx).unwrap();
            let naive = naive_log_kernel(&theta, j, t, k, &ctx);
            assert!(
                (v - naive).abs() <= 1e-10 * (1.0 + naive.abs()),
                "{v} vs {naive}"
            );
        }
    }

    #[test]
    fn unitary_factors_have_zero_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (j, t, k) = (7, 5, 3);
        let phi = orthonormal(&mut rng, j, k);
        let psi = orthonormal(&mut rng, t, k);
        let ctx = KernelContext {
            data: random_matrix(&mut rng, j, t),
            tau: 2.0,
            rates: None,
            eta1: 1e3,
            eta2: 10.0,
            prior: PriorSpec::Noninformative,
            route: GradientRoute::Streaming,
        };
        let layout = ctx.layout(k);
        let theta = layout.pack(&phi, &psi, &[0.5, 0.2, 0.1]);
        let with = log_kernel(&theta, k, &ctx).unwrap();
        let without = log_kernel(
            &theta,
            k,
            &KernelContext {
                eta1: 0.0,
                ..ctx.clone()
            },
        )
        .unwrap();
        assert_relative_eq!(with, without, epsilon = 1e-9);
        assert!((gram_minus_identity(&phi)).norm() < 1e-12);
        let penalty_term = &phi * gram_minus_identity(&phi) * 4e3;
        assert!(penalty_term.norm() < 1e-9);
    }

    #[test]
    fn zero_increments_give_half_sigmoid() {
        let (j, t, k) = (3, 4, 2);
        let ctx = KernelContext {
            data: DMatrix::zeros(j, t),
            tau: 1.0,
            rates: None,
            eta1: 0.0,
            eta2: 250.0,
            prior: PriorSpec::Noninformative,
            route: GradientRoute::Streaming,
        };
        let layout = ctx.layout(k);
        let theta = layout.pack(&DMatrix::zeros(j, k), &DMatrix::zeros(t, k), &[0.0, 0.0]);
        let v = log_kernel(&theta, k, &ctx).unwrap();
        let base = 0.5 * (j * t) as f64 * (1.0 / (2.0 * std::f64::consts::PI)).ln();
        assert_relative_eq!(v - base, 2.0 * 0.5f64.ln(), epsilon = 1e-12);
        let g = grad_log_kernel(&theta, k, &ctx).unwrap();
        assert_relative_eq!(g[layout.len() - 1], 125.0, epsilon = 1e-12);
        assert_relative_eq!(g[layout.len() - 2], 125.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-5;
        for i in 0..100 {
            let j = rng.random_range(5..=12);
            let t = rng.random_range(5..=12);
            let k = rng.random_range(1..=4);
            let eta = [0.0, 1.0, 1e3][i % 3];
            let mut ctx = context(&mut rng, j, t, k, priors()[i % 5], eta, eta);
            ctx.route = if i % 2 == 0 {
                GradientRoute::Dense
            } else {
                GradientRoute::Streaming
            };
            let layout = ctx.layout(k);
            let phi = orthonormal(&mut rng, j, k) + random_matrix(&mut rng, j, k) * 0.05;
            let psi = orthonormal(&mut rng, t, k) + random_matrix(&mut rng, t, k) * 0.05;
            let ws: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..2.0)).collect();
            let theta = layout.pack(&phi, &psi, &ws);
            let g = grad_log_kernel(&theta, k, &ctx).unwrap();
            let mut x = theta.clone();
            for d in 0..theta.len() {
                x[d] = theta[d] + h;
                let fp = log_kernel(&x, k, &ctx).unwrap();
                x[d] = theta[d] - h;
                let fm = log_kernel(&x, k, &ctx).unwrap();
                x[d] = theta[d];
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - g[d]).abs();
                assert!(
                    err <= 1e-5 * fd.abs().max(g[d].abs()) + 1e-8 * (1.0 + fp.abs()),
                    "instance {i} coord {d}: fd {fd} analytic {}",
                    g[d]
                );
            }
        }
    }

    #[test]
    fn dense_and_streaming_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..20 {
            let (j, t, k) = (8, 11, 1 + i % 4);
            let ctx = context(&mut rng, j, t, k, priors()[i % 5], 3.0, 50.0);
            let layout = ctx.layout(k);
            let theta: Vec<f64> = (0..layout.len())
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            let a = grad_log_kernel(
                &theta,
                k,
                &KernelContext {
                    route: GradientRoute::Dense,
                    ..ctx.clone()
                },
            )
            .unwrap();
            let b = grad_log_kernel(
                &theta,
                k,
                &KernelContext {
                    route: GradientRoute::Streaming,
                    ..ctx.clone()
                },
            )
            .unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
            let small = KernelContext {
                route: GradientRoute::Auto {
                    upsilon_budget_bytes: 8,
                },
                ..ctx.clone()
            };
            assert!(!small.route.dense_for(j, t, k));
            let big = GradientRoute::Auto {
                upsilon_budget_bytes: 1 << 20,
            };
            assert!(big.dense_for(j, t, k));
        }
    }

    #[test]
    fn penalty_decreases_in_eta1_off_manifold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ctx = context(&mut rng, 6, 6, 2, PriorSpec::Noninformative, 0.0, 10.0);
        let layout = ctx.layout(2);
        let theta: Vec<f64> = (0..layout.len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let mut prev = f64::INFINITY;
        for eta1 in [0.0, 0.5, 1.0, 10.0, 1e3] {
            let v = log_kernel(
                &theta,
                2,
                &KernelContext {
                    eta1,
                    ..ctx.clone()
                },
            )
            .unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn sigmoid_relaxation_approaches_indicator() {
        for &w in &[-0.5, -0.01, 0.01, 0.5] {
            let p = (-softplus(-1e6 * w)).exp();
            if w > 0.0 {
                assert!((p - 1.0).abs() < 1e-12);
            } else {
                assert!(p < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_invariant_under_column_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (j, t, k) = (6, 7, 3);
        let ctx = context(
            &mut rng,
            j,
            t,
            k,
            PriorSpec::Cspe(CspeHyper::with_alpha(2.0)),
            5.0,
            100.0,
        );
        let layout = ctx.layout(k);
        let theta: Vec<f64> = (0..layout.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let base = log_kernel(&theta, k, &ctx).unwrap();
        let mut flipped = theta.clone();
        for v in &mut flipped[j..2 * j] {
            *v = -*v;
        }
        for v in &mut flipped[j * k + t..j * k + 2 * t] {
            *v = -*v;
        }
        assert_relative_eq!(base, log_kernel(&flipped, k, &ctx).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn align_signs_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (j, t, k) = (5, 6, 3);
        let f = Factorization::new(
            orthonormal(&mut rng, j, k),
            DVector::from_vec(vec![3.0, 2.0, 1.0]),
            orthonormal(&mut rng, t, k),
        )
        .unwrap();
        let reference = reference_signs(&f.phi);
        assert_eq!(align_signs(&f, &reference).unwrap(), f);
        let theta0 = compose_theta(&f).unwrap();
        for _ in 0..1000 {
            let mut g = f.clone();
            for c in 0..k {
                if rng.random_bool(0.5) {
                    g.phi.column_mut(c).neg_mut();
                    g.psi.column_mut(c).neg_mut();
                }
            }
            assert!((compose_theta(&g).unwrap() - &theta0).norm() < 1e-12);
            let a = align_signs(&g, &reference).unwrap();
            assert!((compose_theta(&a).unwrap() - &theta0).norm() < 1e-12);
            assert_eq!(reference_signs(&a.phi), reference);
            assert_eq!(align_signs(&a, &reference).unwrap(), a);
            let layout = ThetaLayout::new(j, t, k);
            let mut flat = layout.from_factorization(&g);
            align_signs_in_place(&mut flat, &layout, &reference);
            assert_eq!(layout.phi(&flat), a.phi);
            assert_eq!(layout.psi(&flat), a.psi);
        }
    }

    #[test]
    fn zero_leading_entry_uses_first_nonzero() {
        let mut phi = DMatrix::<f64>::identity(3, 2);
        phi[(0, 1)] = 0.0;
        phi[(1, 1)] = -1.0;
        assert_eq!(reference_signs(&phi), vec![1.0, -1.0]);
        let f = Factorization::new(
            phi.clone(),
            DVector::from_vec(vec![2.0, 1.0]),
            DMatrix::identity(3, 2),
        )
        .unwrap();
        let a = align_signs(&f, &[1.0, 1.0]).unwrap();
        assert_eq!(a.phi[(1, 1)], 1.0);
        assert_eq!(a.psi[(1, 1)], -1.0);
    }
}
