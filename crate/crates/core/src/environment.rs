//! Ground-truth linear reward model, Bernoulli feedback and regret.

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};

const FEASIBILITY_TOL: f64 = 1e-9;

/// Fixed product features, stored row-major (`n_products × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    n_products: usize,
    dim: usize,
    features: Vec<f64>,
    labels: Option<Vec<String>>,
}

impl Catalog {
    pub fn new(n_products: usize, dim: usize, features: Vec<f64>) -> Result<Self> {
        if n_products == 0 || dim == 0 {
            return Err(Error::domain("catalog needs at least one product and one feature"));
        }
        if features.len() != n_products * dim {
            return Err(Error::DimensionMismatch {
                expected: n_products * dim,
                found: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("catalog features must be finite"));
        }
        let catalog = Self {
            n_products,
            dim,
            features,
            labels: None,
        };
        let over = (0..n_products)
            .filter(|&i| norm(catalog.feature(i)) > 1.0 + FEASIBILITY_TOL)
            .count();
        if over > 0 {
            warn!("{over} product feature vectors have norm above 1");
        }
        Ok(catalog)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.len(),
            });
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_products {
            return Err(Error::DimensionMismatch {
                expected: self.n_products,
                found: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n_products(&self) -> usize {
        self.n_products
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Feature vector `x_i`.
    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major feature buffer.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Label of product `i`, or its index when the catalog is unlabeled.
    pub fn label(&self, i: usize) -> String {
        match &self.labels {
            Some(l) => l[i].clone(),
            None => i.to_string(),
        }
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hidden parameter `θ*` and the induced success probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    theta_star: Vec<f64>,
    mu: Vec<f64>,
}

impl GroundTruth {
    /// Computes `μ(i) = x_iᵀθ*` for every product.
    pub fn new(catalog: &Catalog, theta_star: Vec<f64>) -> Result<Self> {
        if theta_star.len() != catalog.dim() {
            return Err(Error::DimensionMismatch {
                expected: catalog.dim(),
                found: theta_star.len(),
            });
        }
        let mu = (0..catalog.n_products())
            .map(|i| dot(catalog.feature(i), &theta_star))
            .collect();
        Self::from_parts(theta_star, mu)
    }

    /// Takes `μ` as given. Callers are responsible for consistency with the
    /// catalog.
    pub fn from_parts(theta_star: Vec<f64>, mu: Vec<f64>) -> Result<Self> {
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::domain("success probabilities must be finite"));
        }
        let theta_norm = norm(&theta_star);
        if theta_norm > 1.0 + FEASIBILITY_TOL {
            warn!("‖θ*‖ = {theta_norm:.6} exceeds 1");
        }
        let outside = mu
            .iter()
            .filter(|&&m| !(-FEASIBILITY_TOL..=1.0 + FEASIBILITY_TOL).contains(&m))
            .count();
        if outside > 0 {
            warn!("{outside} success probabilities fall outside [0,1]; they are clamped when sampling");
        }
        Ok(Self { theta_star, mu })
    }

    pub fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn n_products(&self) -> usize {
        self.mu.len()
    }

    /// Expected per-period reward of the best `k`-set.
    pub fn optimal_value(&self, k: usize) -> Result<f64> {
        Ok(optimal_set(self, k)?.iter().map(|&i| self.mu[i]).sum())
    }

    pub(crate) fn set_value(&self, selected: &[usize]) -> f64 {
        selected.iter().map(|&i| self.mu[i]).sum()
    }
}

/// Outcome of offering `selected` in one period.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodFeedback {
    pub period: usize,
    /// Offered products, in selection order.
    pub selected: Vec<usize>,
    /// 0/1 outcome per offered product, aligned with `selected`.
    pub rewards: Vec<f64>,
}

impl PeriodFeedback {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

pub(crate) fn validate_selection(selected: &[usize], n_products: usize) -> Result<()> {
    let mut seen = vec![false; n_products];
    for &i in selected {
        if i >= n_products {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: n_products,
            });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::domain(format!("product {i} selected twice")));
        }
    }
    Ok(())
}

/// Draws an independent Bernoulli(clamp(μ(i), 0, 1)) outcome for each
/// offered product, in order, from `rng`.
pub fn sample_feedback<R: Rng + ?Sized>(
    truth: &GroundTruth,
    selected: &[usize],
    period: usize,
    rng: &mut R,
) -> Result<PeriodFeedback> {
    validate_selection(selected, truth.n_products())?;
    let rewards = selected
        .iter()
        .map(|&i| {
            let p = truth.mu[i].clamp(0.0, 1.0);
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(PeriodFeedback {
        period,
        selected: selected.to_vec(),
        rewards,
    })
}

/// The `k` products with the largest `μ`, ties to the lowest index, sorted by
/// descending `μ`.
pub fn optimal_set(truth: &GroundTruth, k: usize) -> Result<Vec<usize>> {
    let n = truth.n_products();
    if k > n {
        return Err(Error::domain(format!("k = {k} exceeds N = {n}")));
    }
    let mu = truth.mu();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| mu[b].total_cmp(&mu[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// One period's regret: `Σ_{S*} μ − Σ_{selected} μ`, clamped at zero.
pub fn period_regret(truth: &GroundTruth, selected: &[usize], k: usize) -> Result<f64> {
    if selected.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: selected.len(),
        });
    }
    validate_selection(selected, truth.n_products())?;
    Ok(regret_against(truth.optimal_value(k)?, truth, selected))
}

pub(crate) fn regret_against(optimal_value: f64, truth: &GroundTruth, selected: &[usize]) -> f64 {
    (optimal_value - truth.set_value(selected)).max(0.0)
}
