//! Domain types for the three-component factorization `Θ = Φ diag(ω) Ψᵀ`.
//!
//! The singular values are sampled in increment coordinates
//! `ω* = Cω = (ω₁−ω₂, …, ω_{K−1}−ω_K, ω_K)`, under which the ordering
//! constraint `ω₁ ≥ … ≥ ω_K ≥ 0` becomes the orthant `ω* ≥ 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance on `‖XᵀX − I‖_F` for [`Factorization::validate`].
pub const DEFAULT_UNITARY_TOL: f64 = 1e-2;
/// Default slack allowed on the descending-order check.
pub const DEFAULT_ORDER_TOL: f64 = 1e-6;

/// A `J×T` data matrix with an explicit missingness mask (`true` = observed).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedMatrix {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
}

impl ObservedMatrix {
    /// Builds a matrix from values and a mask. Values at masked-out cells are
    /// kept as given (they are never read as data).
    pub fn new(values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::Dimension(format!(
                "values are {:?} but mask is {:?}",
                values.shape(),
                mask.shape()
            )));
        }
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Data(
                "matrix must have at least one row and one column".into(),
            ));
        }
        let mut observed = 0usize;
        for (v, &m) in values.iter().zip(mask.iter()) {
            if m {
                observed += 1;
                if !v.is_finite() {
                    return Err(Error::Data("observed cells must hold finite values".into()));
                }
            }
        }
        if observed == 0 {
            return Err(Error::Data(
                "no observed entries: at least one cell must be observed".into(),
            ));
        }
        Ok(Self { values, mask })
    }

    /// Fully observed matrix.
    pub fn complete(values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::new(values, mask)
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_observed(&self, j: usize, t: usize) -> bool {
        self.mask[(j, t)]
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn missing_count(&self) -> usize {
        self.mask.len() - self.observed_count()
    }

    /// Values with every missing cell replaced by `fill`.
    pub fn filled(&self, fill: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows(), self.cols(), |j, t| {
            if self.mask[(j, t)] {
                self.values[(j, t)]
            } else {
                fill
            }
        })
    }

    /// Column-major linear indices of the missing cells.
    pub fn missing_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (!m).then_some(i))
            .collect()
    }
}

/// `(Φ, ω, Ψ)` with `Φ: J×K`, `Ψ: T×K`, `ω` of length `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    pub phi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub omega: DVector<f64>,
}

/// Outcome of a post-hoc constraint check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub phi_unitarity: f64,
    pub psi_unitarity: f64,
    /// Largest violation of `ω_k ≥ ω_{k+1}` or `ω_K ≥ 0` (zero when satisfied).
    pub order_violation: f64,
}

impl ConstraintReport {
    pub fn passes(&self, unitary_tol: f64, order_tol: f64) -> bool {
        self.phi_unitarity <= unitary_tol
            && self.psi_unitarity <= unitary_tol
            && self.order_violation <= order_tol
    }
}

impl Factorization {
    pub fn new(phi: DMatrix<f64>, omega: DVector<f64>, psi: DMatrix<f64>) -> Result<Self> {
        let k = omega.len();
        if phi.ncols() != k || psi.ncols() != k {
            return Err(Error::Dimension(format!(
                "phi has {} columns, psi has {}, omega has length {k}",
                phi.ncols(),
                psi.ncols()
            )));
        }
        Ok(Self { phi, psi, omega })
    }

    pub fn rank(&self) -> usize {
        self.omega.len()
    }

    pub fn rows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn cols(&self) -> usize {
        self.psi.nrows()
    }

    /// Measures how far the factorization is from the identification constraints.
    pub fn constraint_report(&self) -> ConstraintReport {
        let order_violation = order_violation(self.omega.as_slice());
        ConstraintReport {
            phi_unitarity: unitarity_defect(&self.phi),
            psi_unitarity: unitarity_defect(&self.psi),
            order_violation,
        }
    }

    /// Checks unitarity, ordering and the rank bound with the given tolerances.
    pub fn validate(&self, unitary_tol: f64, order_tol: f64) -> Result<ConstraintReport> {
        let bound = max_rank(self.rows(), self.cols());
        if self.rank() > bound {
            return Err(Error::Dimension(format!(
                "K = {} exceeds the largest identified rank {bound}",
                self.rank()
            )));
        }
        let report = self.constraint_report();
        if !report.passes(unitary_tol, order_tol) {
            return Err(Error::InvalidArgument(format!(
                "factorization violates its constraints: {report:?}"
            )));
        }
        Ok(report)
    }
}

/// `‖XᵀX − I‖_F`.
pub fn unitarity_defect(x: &DMatrix<f64>) -> f64 {
    let mut gram = x.tr_mul(x);
    for i in 0..gram.nrows() {
        gram[(i, i)] -= 1.0;
    }
    gram.norm()
}

fn order_violation(omega: &[f64]) -> f64 {
    let inc = to_increments(omega);
    inc.iter().fold(0.0f64, |acc, &d| acc.max(-d))
}

/// Largest `K` with `JK + K + TK ≤ JT`.
pub fn max_rank(j: usize, t: usize) -> usize {
    (j * t) / (j + t + 1)
}

/// `Θ = Φ diag(ω) Ψᵀ`.
pub fn compose_theta(f: &Factorization) -> Result<DMatrix<f64>> {
    let k = f.omega.len();
    if f.phi.ncols() != k || f.psi.ncols() != k {
        return Err(Error::Dimension(format!(
            "phi has {} columns, psi has {}, omega has length {k}",
            f.phi.ncols(),
            f.psi.ncols()
        )));
    }
    Ok(theta_unchecked(&f.phi, f.omega.as_slice(), &f.psi))
}

pub(crate) fn theta_unchecked(
    phi: &DMatrix<f64>,
    omega: &[f64],
    psi: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut scaled = phi.clone();
    for (mut col, &w) in scaled.column_iter_mut().zip(omega) {
        col *= w;
    }
    scaled * psi.transpose()
}

/// The difference map `C` and its inverse, applied in `O(K)` passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DifferenceTransform {
    k: usize,
}

impl DifferenceTransform {
    pub fn new(k: usize) -> Self {
        Self { k }
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn forward(&self, omega: &[f64]) -> Vec<f64> {
        debug_assert_eq!(omega.len(), self.k);
        to_increments(omega)
    }

    pub fn backward(&self, omega_star: &[f64]) -> Vec<f64> {
        debug_assert_eq!(omega_star.len(), self.k);
        from_increments(omega_star)
    }

    /// `(C⁻¹)ᵀ v`: prefix sums of `v`. Maps a gradient in `ω` to one in `ω*`.
    pub fn pullback(&self, v: &[f64]) -> Vec<f64> {
        prefix_sums(v)
    }

    /// Dense `C`.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.k, |r, c| {
            if r == c {
                1.0
            } else if c == r + 1 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Dense `C⁻¹`, the upper-triangular all-ones matrix.
    pub fn inverse_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.k, |r, c| if c >= r { 1.0 } else { 0.0 })
    }
}

/// `(ω₁−ω₂, …, ω_{K−1}−ω_K, ω_K)`.
pub fn to_increments(omega: &[f64]) -> Vec<f64> {
    let k = omega.len();
    (0..k)
        .map(|i| {
            if i + 1 < k {
                omega[i] - omega[i + 1]
            } else {
                omega[i]
            }
        })
        .collect()
}

/// Suffix sums `ω_k = Σ_{l≥k} ω*_l`.
pub fn from_increments(omega_star: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; omega_star.len()];
    let mut acc = 0.0;
    for i in (0..omega_star.len()).rev() {
        acc += omega_star[i];
        out[i] = acc;
    }
    out
}

pub(crate) fn prefix_sums(v: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    v.iter()
        .map(|&x| {
            acc += x;
            acc
        })
        .collect()
}

/// Shares `(ω₁², …, ω_K², τ⁻¹) / (Σω² + τ⁻¹)`.
pub fn variance_decomposition(omega: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "tau must be positive and finite, got {tau}"
        )));
    }
    let noise = 1.0 / tau;
    let mut shares: Vec<f64> = omega.iter().map(|w| w * w).collect();
    shares.push(noise);
    let total: f64 = shares.iter().sum();
    for s in &mut shares {
        *s /= total;
    }
    Ok(shares)
}

/// Per-cell variance decomposition of a `J×T` panel: each `ω_k²` is spread
/// over the `JT` cells before being compared with the noise variance `τ⁻¹`.
pub fn variance_decomposition_per_cell(omega: &[f64], tau: f64, cells: usize) -> Result<Vec<f64>> {
    if cells == 0 {
        return Err(Error::InvalidArgument("cell count must be positive".into()));
    }
    let scale = (cells as f64).sqrt();
    let scaled: Vec<f64> = omega.iter().map(|w| w / scale).collect();
    variance_decomposition(&scaled, tau)
}

/// `(Σω²/JT) / τ⁻¹`, the ratio of mean signal power per cell to noise variance.
pub fn signal_to_noise(omega: &[f64], tau: f64, cells: usize) -> f64 {
    let power: f64 = omega.iter().map(|w| w * w).sum::<f64>() / cells as f64;
    power * tau
}
