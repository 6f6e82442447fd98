//! Regularized design matrix with an incrementally maintained inverse.
//!
//! Both policies keep `A = ωI + Σ x xᵀ`, the response accumulator
//! `b = Σ r x` and the ridge estimate `θ̂ = A⁻¹ b`. The inverse is updated
//! in O(d²) per observation with the Sherman–Morrison identity and is
//! periodically rebuilt from `A` to flush rounding drift.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, DVectorView, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of rank-1 updates between full dense re-inversions.
pub const DEFAULT_REFRESH_INTERVAL: u64 = 4096;

/// Quadratic forms below this (negative) value are treated as a positive
/// definiteness failure rather than rounding noise.
const QUAD_CLAMP_TOL: f64 = 1e-12;

const MIN_EIGENVALUE: f64 = 1e-12;

const NORM_TOL: f64 = 1e-9;

/// Gram matrix, its inverse, the response accumulator and the estimate.
#[derive(Debug, Clone)]
pub struct DesignState {
    dim: usize,
    a_matrix: DMatrix<f64>,
    a_inverse: DMatrix<f64>,
    b_vector: DVector<f64>,
    theta_hat: DVector<f64>,
    regularizer: f64,
    update_count: u64,
    refresh_interval: u64,
    last_refresh: u64,
}

/// What a single rank-1 update saw before it was applied.
#[derive(Debug, Clone)]
pub struct RankOneUpdate {
    /// `A⁻¹ x` under the pre-update inverse.
    pub direction: DVector<f64>,
    /// `xᵀ A⁻¹ x` under the pre-update inverse, clamped at zero.
    pub quad: f64,
}

impl RankOneUpdate {
    /// `1 + xᵀ A⁻¹ x`, the Sherman–Morrison denominator.
    pub fn denominator(&self) -> f64 {
        1.0 + self.quad
    }
}

impl DesignState {
    /// `A₀ = ωI`, `b₀ = 0`, `θ̂ = 0`.
    pub fn new(dim: usize, regularizer: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("feature dimension must be at least 1"));
        }
        if !(regularizer > 0.0 && regularizer.is_finite()) {
            return Err(Error::domain(format!(
                "regularizer must be positive and finite, got {regularizer}"
            )));
        }
        Ok(Self {
            dim,
            a_matrix: DMatrix::identity(dim, dim) * regularizer,
            a_inverse: DMatrix::identity(dim, dim) / regularizer,
            b_vector: DVector::zeros(dim),
            theta_hat: DVector::zeros(dim),
            regularizer,
            update_count: 0,
            refresh_interval: DEFAULT_REFRESH_INTERVAL,
            last_refresh: 0,
        })
    }

    /// Sets how many updates may accumulate before `recompute_theta`
    /// rebuilds the inverse densely. Zero disables the refresh.
    pub fn with_refresh_interval(mut self, interval: u64) -> Self {
        self.refresh_interval = interval;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn a_matrix(&self) -> &DMatrix<f64> {
        &self.a_matrix
    }

    pub fn a_inverse(&self) -> &DMatrix<f64> {
        &self.a_inverse
    }

    pub fn b_vector(&self) -> &DVector<f64> {
        &self.b_vector
    }

    pub fn theta_hat(&self) -> &DVector<f64> {
        &self.theta_hat
    }

    pub fn regularizer(&self) -> f64 {
        self.regularizer
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    fn view<'a>(&self, x: &'a [f64]) -> Result<DVectorView<'a, f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(DVectorView::from_slice(x, self.dim))
    }

    /// `A += x xᵀ` with the matching inverse update; `b += r x` when a
    /// reward is given. `θ̂` is left stale until [`recompute_theta`].
    ///
    /// [`recompute_theta`]: DesignState::recompute_theta
    pub fn rank1_update(&mut self, x: &[f64], reward: Option<f64>) -> Result<RankOneUpdate> {
        let xv = self.view(x)?;
        let norm = xv.norm();
        if norm > 1.0 + NORM_TOL {
            warn!("feature vector norm {norm:.6} exceeds 1");
        }

        let direction = &self.a_inverse * xv;
        let quad = checked_quad(xv.dot(&direction))?;
        let scale = 1.0 / (1.0 + quad);

        // Both triangles are written from one product so the matrices stay
        // exactly symmetric.
        let d = self.dim;
        for j in 0..d {
            for i in j..d {
                let a = x[i] * x[j];
                self.a_matrix[(i, j)] += a;
                let s = scale * direction[i] * direction[j];
                self.a_inverse[(i, j)] -= s;
                if i != j {
                    self.a_matrix[(j, i)] += a;
                    self.a_inverse[(j, i)] -= s;
                }
            }
        }
        if let Some(r) = reward {
            self.b_vector.axpy(r, &xv, 1.0);
        }
        self.update_count += 1;
        Ok(RankOneUpdate { direction, quad })
    }

    /// `b += r x` without touching `A`.
    pub fn add_response(&mut self, x: &[f64], reward: f64) -> Result<()> {
        let xv = self.view(x)?;
        self.b_vector.axpy(reward, &xv, 1.0);
        Ok(())
    }

    /// `θ̂ = A⁻¹ b`, rebuilding `A⁻¹` first if the refresh interval elapsed.
    pub fn recompute_theta(&mut self) -> Result<()> {
        if self.refresh_interval > 0
            && self.update_count - self.last_refresh >= self.refresh_interval
        {
            self.refresh_inverse()?;
        }
        self.theta_hat = &self.a_inverse * &self.b_vector;
        Ok(())
    }

    /// Replaces the cached inverse with a dense inversion of `A`.
    pub fn refresh_inverse(&mut self) -> Result<()> {
        if self.a_matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Conditioning("non-finite entry in A".into()));
        }
        let min_eig = SymmetricEigen::new(self.a_matrix.clone()).eigenvalues.min();
        if min_eig < MIN_EIGENVALUE {
            return Err(Error::Conditioning(format!(
                "smallest eigenvalue {min_eig:e} below {MIN_EIGENVALUE:e}"
            )));
        }
        let chol = Cholesky::new(self.a_matrix.clone())
            .ok_or_else(|| Error::Conditioning("Cholesky factorization failed".into()))?;
        let mut inv = chol.inverse();
        if inv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Conditioning("non-finite entry in A⁻¹".into()));
        }
        symmetrize(&mut inv);
        self.a_inverse = inv;
        self.last_refresh = self.update_count;
        Ok(())
    }

    /// `xᵀ A⁻¹ x`, clamped at zero.
    pub fn quad_form(&self, x: &[f64]) -> Result<f64> {
        let xv = self.view(x)?;
        checked_quad((&self.a_inverse * xv).dot(&xv))
    }

    /// `‖x‖_{A⁻¹} = √(xᵀ A⁻¹ x)`.
    pub fn weighted_norm(&self, x: &[f64]) -> Result<f64> {
        Ok(self.quad_form(x)?.sqrt())
    }

    /// Max-abs entry of `A·A⁻¹ − I`.
    pub fn inverse_residual(&self) -> f64 {
        let mut prod = &self.a_matrix * &self.a_inverse;
        for i in 0..self.dim {
            prod[(i, i)] -= 1.0;
        }
        prod.amax()
    }

    /// Whether `A − (ω − eps) I` admits a Cholesky factorization, i.e. every
    /// eigenvalue of `A` is at least `ω − eps`.
    pub fn eigenvalue_floor_holds(&self, eps: f64) -> bool {
        let shifted =
            &self.a_matrix - DMatrix::identity(self.dim, self.dim) * (self.regularizer - eps);
        Cholesky::new(shifted).is_some()
    }

    /// Largest asymmetry `|A_ij − A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        (&self.a_matrix - self.a_matrix.transpose()).amax()
    }
}

pub(crate) fn checked_quad(q: f64) -> Result<f64> {
    if !q.is_finite() {
        return Err(Error::Conditioning(format!("non-finite quadratic form {q}")));
    }
    if q < -QUAD_CLAMP_TOL {
        return Err(Error::Conditioning(format!(
            "quadratic form xᵀA⁻¹x = {q:e} is negative"
        )));
    }
    Ok(q.max(0.0))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Exploration width and the failure probability it was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams {
    pub alpha: f64,
    pub delta: f64,
}

impl ConfidenceParams {
    pub fn new(alpha: f64, delta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::domain(format!("alpha must be >= 0, got {alpha}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::domain(format!("delta must lie in (0,1), got {delta}")));
        }
        Ok(Self { alpha, delta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub lcb: f64,
    pub ucb: f64,
}

impl ConfidenceInterval {
    pub fn width(&self) -> f64 {
        self.ucb - self.lcb
    }
}

/// `x·θ̂ ∓ α‖x‖_{A⁻¹}`. Assumes `θ̂` is current.
pub fn confidence_bounds(
    state: &DesignState,
    params: &ConfidenceParams,
    x: &[f64],
) -> Result<ConfidenceInterval> {
    let width = params.alpha * state.weighted_norm(x)?;
    let estimate = DVectorView::from_slice(x, state.dim()).dot(state.theta_hat());
    Ok(ConfidenceInterval {
        lcb: estimate - width,
        ucb: estimate + width,
    })
}

/// Which regret theorem the exploration width is calibrated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaVariant {
    Semi,
    Cons,
}

/// Theory-calibrated exploration width.
///
/// * `Semi`: `√(d ln((1 + TN)/δ)) + 1`
/// * `Cons`: `√(d ln((1 + N + TN)/δ)) + 1`
pub fn theory_alpha(
    dim: usize,
    horizon: usize,
    n_products: usize,
    delta: f64,
    variant: AlphaVariant,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta must lie in (0,1), got {delta}")));
    }
    if dim == 0 || horizon == 0 || n_products == 0 {
        return Err(Error::domain("d, T and N must all be positive"));
    }
    let (d, t, n) = (dim as f64, horizon as f64, n_products as f64);
    let numerator = match variant {
        AlphaVariant::Semi => 1.0 + t * n,
        AlphaVariant::Cons => 1.0 + n + t * n,
    };
    Ok((d * (numerator / delta).ln()).sqrt() + 1.0)
}
