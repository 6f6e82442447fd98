//! Randomized numerical checks of the inequalities behind the conservative
//! score: the two auxiliary bounds, the multi-update bound on the shrinkage
//! of `‖x‖_{A⁻¹}`, and the elliptical potential bound on live runs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyTrace;
use crate::seed::{derive_seed, rng_from_seed};

/// Relative tolerance: a trial fails when `lhs > rhs + SLACK·max(1, |rhs|)`.
pub const SLACK: f64 = 1e-9;

const LOG_SPECTRUM: (f64, f64) = (-3.0, 3.0);
const KEY0_U_RADIUS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaTrial {
    pub dim: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub seed: u64,
}

impl LemmaTrial {
    fn new(dim: usize, lhs: f64, rhs: f64, seed: u64) -> Self {
        Self {
            dim,
            lhs,
            rhs,
            margin: rhs - lhs,
            seed,
        }
    }

    pub fn tolerance(&self) -> f64 {
        SLACK * self.rhs.abs().max(1.0)
    }

    pub fn holds(&self) -> bool {
        self.margin >= -self.tolerance()
    }

    /// The same trial with the inequality reversed.
    pub fn flipped(&self) -> Self {
        Self::new(self.dim, self.rhs, self.lhs, self.seed)
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::domain("lemma checks need dim >= 1"));
    }
    Ok(())
}

fn log_uniform(rng: &mut ChaCha8Rng) -> f64 {
    10f64.powf(rng.random_range(LOG_SPECTRUM.0..=LOG_SPECTRUM.1))
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    loop {
        let v: DVector<f64> = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Uniform draw from the ball of the given radius.
fn ball_vector(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> DVector<f64> {
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    unit_vector(rng, dim) * r
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal moved into `Q`.
fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Both sides of `(xᵀΛu)² / √(xᵀΛx) ≤ uᵀΛ^{3/2}u` for diagonal `Λ`.
pub fn key0_sides(lambda: &[f64], x: &[f64], u: &[f64]) -> Result<(f64, f64)> {
    let d = lambda.len();
    for v in [x, u] {
        if v.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: v.len() });
        }
    }
    if lambda.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::domain("Λ must have positive finite entries"));
    }
    let cross: f64 = (0..d).map(|i| x[i] * lambda[i] * u[i]).sum();
    let quad: f64 = (0..d).map(|i| lambda[i] * x[i] * x[i]).sum();
    if quad <= 0.0 {
        return Err(Error::domain("x must be nonzero"));
    }
    let rhs: f64 = (0..d).map(|i| lambda[i].powf(1.5) * u[i] * u[i]).sum();
    Ok((cross * cross / quad.sqrt(), rhs))
}

fn sorted_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    if ev.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::Conditioning(format!("matrix is not positive definite: {ev:?}")));
    }
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

fn inverse_quad(m: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Conditioning("Cholesky factorization failed".into()))?;
    Ok(x.dot(&chol.solve(x)).max(0.0))
}

/// Both sides of
/// `√(xᵀA⁻¹x) − √(xᵀ(A + Σuuᵀ)⁻¹x) ≤ Σ 2/√λᵢ − Σ 2/√νᵢ`,
/// where `λ` and `ν` are the eigenvalues of `A` and of the updated matrix.
pub fn shrinkage_sides(
    a: &DMatrix<f64>,
    updates: &[DVector<f64>],
    x: &DVector<f64>,
) -> Result<(f64, f64)> {
    let d = x.len();
    if a.nrows() != d || a.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: a.nrows() });
    }
    let mut b = a.clone();
    for u in updates {
        if u.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: u.len() });
        }
        b.ger(1.0, u, u, 1.0);
    }
    let lhs = inverse_quad(a, x)?.sqrt() - inverse_quad(&b, x)?.sqrt();
    let lambda = sorted_eigenvalues(a)?;
    let nu = sorted_eigenvalues(&b)?;
    // Pair eigenvalues in sorted order; each term is non-negative since the
    // update can only raise the spectrum.
    let rhs = lambda
        .iter()
        .zip(&nu)
        .map(|(l, n)| 2.0 / l.sqrt() - 2.0 / n.sqrt())
        .sum();
    Ok((lhs, rhs))
}

fn trial_seeds(seed: u64, trials: usize) -> Vec<u64> {
    (0..trials as u64).map(|t| derive_seed(seed, &[t])).collect()
}

/// Random diagonal `Λ` (log-uniform entries in `[1e-3, 1e3]`), unit `x`,
/// and `u` with `‖u‖ ≤ 10`.
pub fn check_key0(dim: usize, trials: usize, seed: u64) -> Result<Vec<LemmaTrial>> {
    check_dim(dim)?;
    trial_seeds(seed, trials)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng_from_seed(s);
            let lambda: Vec<f64> = (0..dim).map(|_| log_uniform(&mut rng)).collect();
            let x = unit_vector(&mut rng, dim);
            let u = ball_vector(&mut rng, dim, KEY0_U_RADIUS);
            let (lhs, rhs) = key0_sides(&lambda, x.as_slice(), u.as_slice())?;
            Ok(LemmaTrial::new(dim, lhs, rhs, s))
        })
        .collect()
}

/// Random `A = QΛQᵀ` with Haar `Q` and log-uniform spectrum in
/// `[1e-3, 1e3]`, `l_updates` vectors in the unit ball, and unit `x`.
pub fn check_main_lemma(
    dim: usize,
    l_updates: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<LemmaTrial>> {
    check_dim(dim)?;
    if l_updates == 0 {
        return Err(Error::domain("need at least one update vector"));
    }
    trial_seeds(seed, trials)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng_from_seed(s);
            let q = random_orthogonal(&mut rng, dim);
            let spectrum = DVector::from_fn(dim, |_, _| log_uniform(&mut rng));
            let mut a = &q * DMatrix::from_diagonal(&spectrum) * q.transpose();
            a = (&a + a.transpose()) * 0.5;
            let updates: Vec<DVector<f64>> =
                (0..l_updates).map(|_| ball_vector(&mut rng, dim, 1.0)).collect();
            let x = unit_vector(&mut rng, dim);
            let (lhs, rhs) = shrinkage_sides(&a, &updates, &x)?;
            Ok(LemmaTrial::new(dim, lhs, rhs, s))
        })
        .collect()
}

/// Single-update case of [`check_main_lemma`]; identical draws per seed.
pub fn check_key1(dim: usize, trials: usize, seed: u64) -> Result<Vec<LemmaTrial>> {
    check_main_lemma(dim, 1, trials, seed)
}

/// `Σ_t Σ_k ‖x_(t,k)‖_{A_{t,k-1}⁻¹}` against `5√(dKT log KT)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// False when `KT < 2`, where `log KT = 0` makes the bound vacuous.
    pub applicable: bool,
}

impl PotentialCheck {
    pub fn holds(&self) -> bool {
        !self.applicable || self.lhs <= self.rhs
    }
}

pub fn potential_rhs(dim: usize, k: usize, horizon: usize) -> f64 {
    let kt = (k * horizon) as f64;
    5.0 * (dim as f64 * kt * kt.ln()).sqrt()
}

/// Reads the potential sum a UCB run accumulated online. The bound is stated
/// for `A₀ = I`, so runs with another regularizer are rejected.
pub fn check_potential_bound(trace: &PolicyTrace) -> Result<PotentialCheck> {
    let lhs = trace.potential_sum.ok_or_else(|| {
        Error::domain(format!("{} runs keep no design state", trace.config.kind))
    })?;
    let omega = trace.config.effective_regularizer();
    if omega != 1.0 {
        return Err(Error::domain(format!(
            "potential bound assumes regularizer 1, run used {omega}"
        )));
    }
    let (k, t) = (trace.config.k_select, trace.horizon());
    Ok(PotentialCheck {
        lhs,
        rhs: potential_rhs(trace.dim, k, t),
        applicable: k * t >= 2,
    })
}

/// Aggregate of one batch of trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub lemma: String,
    pub dim: usize,
    pub l_updates: Option<usize>,
    pub trials: usize,
    pub violations: usize,
    pub min_margin: f64,
    pub worst_seed: Option<u64>,
}

impl SuiteSummary {
    pub fn from_trials(
        lemma: impl Into<String>,
        dim: usize,
        l_updates: Option<usize>,
        trials: &[LemmaTrial],
    ) -> Self {
        let worst = trials.iter().min_by(|a, b| a.margin.total_cmp(&b.margin));
        Self {
            lemma: lemma.into(),
            dim,
            l_updates,
            trials: trials.len(),
            violations: trials.iter().filter(|t| !t.holds()).count(),
            min_margin: worst.map_or(f64::INFINITY, |t| t.margin),
            worst_seed: worst.map(|t| t.seed),
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn key0_examples() {
        let (l, r) = key0_sides(&[1.0, 1.0], &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!((l, r), (1.0, 1.0));
        let (l, r) = key0_sides(&[4.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!((l, r), (0.0, 1.0));
        let (l, r) = key0_sides(&[3.0, 0.5], &[0.6, 0.8], &[0.0, 0.0]).unwrap();
        assert_eq!((l, r), (0.0, 0.0));
        assert!(key0_sides(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn shrinkage_identity_example() {
        let a = DMatrix::identity(2, 2);
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let (l, r) = shrinkage_sides(&a, &[x.clone()], &x).unwrap();
        assert!(close(l, 1.0 - 1.0 / 2f64.sqrt(), 1e-12));
        assert!(close(r, 4.0 - (2.0 / 2f64.sqrt() + 2.0), 1e-12));
        assert!(close(l, 0.29289, 1e-5) && close(r, 0.58579, 1e-5));
    }

    #[test]
    fn shrinkage_zero_and_orthogonal_updates() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 5.0, 0.3]));
        let x = DVector::from_vec(vec![0.0, 0.6, 0.8]);
        let zero = DVector::zeros(3);
        let (l, r) = shrinkage_sides(&a, &[zero.clone(), zero], &x).unwrap();
        assert!(l.abs() < 1e-15 && r.abs() < 1e-15);

        let u = DVector::from_vec(vec![0.9, 0.0, 0.0]);
        let (l, r) = shrinkage_sides(&a, &[u], &x).unwrap();
        assert!(l.abs() < 1e-15);
        assert!(r >= 0.0);
    }

    #[test]
    fn shrinkage_diagonal_closed_form() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 1.0]));
        let u = DVector::from_vec(vec![0.0, 0.5]);
        let x = DVector::from_vec(vec![0.0, 1.0]);
        let (l, r) = shrinkage_sides(&a, &[u], &x).unwrap();
        // A + uuᵀ = diag(9, 1.25).
        assert!(close(l, 1.0 - 1.0 / 1.25f64.sqrt(), 1e-14));
        assert!(close(r, 2.0 - 2.0 / 1.25f64.sqrt(), 1e-14));
        assert!(l <= r);
    }

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = rng_from_seed(3);
        let q = random_orthogonal(&mut rng, 7);
        let err = (q.transpose() * &q - DMatrix::identity(7, 7)).amax();
        assert!(err < 1e-12);
    }

    #[test]
    fn key1_matches_single_update_lemma() {
        let a = check_key1(5, 50, 11).unwrap();
        let b = check_main_lemma(5, 1, 50, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_batches_hold() {
        for dim in [1, 2, 5] {
            assert!(check_key0(dim, 200, 1).unwrap().iter().all(LemmaTrial::holds));
            assert!(check_main_lemma(dim, 3, 200, 2).unwrap().iter().all(LemmaTrial::holds));
        }
        assert!(check_key0(0, 1, 0).is_err());
        assert!(check_main_lemma(3, 0, 1, 0).is_err());
    }

    #[test]
    fn dim50_batch_has_no_violations() {
        let trials = check_key1(50, 1000, 5).unwrap();
        let summary = SuiteSummary::from_trials("key1", 50, Some(1), &trials);
        assert!(summary.passed(), "{summary:?}");
        assert_eq!(summary.trials, 1000);
    }

    #[test]
    fn flipped_trials_fail() {
        let trials = check_key0(3, 20, 9).unwrap();
        let flipped: Vec<_> = trials.iter().map(LemmaTrial::flipped).collect();
        assert!(!SuiteSummary::from_trials("key0", 3, None, &flipped).passed());
    }

    #[test]
    fn potential_rhs_example() {
        assert!(close(potential_rhs(2, 2, 3), 5.0 * (12.0 * 6f64.ln()).sqrt(), 1e-12));
        assert!(close(potential_rhs(2, 2, 3), 23.1846, 1e-4));
        assert_eq!(potential_rhs(1, 1, 1), 0.0);
    }
}
