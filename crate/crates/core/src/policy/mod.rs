//! Per-period product selection for SemiUCB and ConsUCB, plus the oracle
//! and uniform-random baselines used to calibrate the harness.

mod cons;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrixView, DVectorView};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::{checked_quad, DesignState};
use crate::environment::{
    optimal_set, regret_against, sample_feedback, validate_selection, Catalog, GroundTruth,
    PeriodFeedback,
};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

pub use cons::{cons_ucb_select, cons_ucb_select_naive, cons_ucb_select_ranked, ConsSelection};

/// ConsUCB always starts from `A₀ = I`.
pub const CONS_REGULARIZER: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[serde(alias = "semi")]
    SemiUcb,
    #[serde(alias = "cons")]
    ConsUcb,
    Oracle,
    #[serde(alias = "random")]
    UniformRandom,
}

impl PolicyKind {
    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::SemiUcb => "semi_ucb",
            PolicyKind::ConsUcb => "cons_ucb",
            PolicyKind::Oracle => "oracle",
            PolicyKind::UniformRandom => "uniform_random",
        }
    }

    /// Whether the policy keeps a design state and uses `α`.
    pub fn is_ucb(self) -> bool {
        matches!(self, PolicyKind::SemiUcb | PolicyKind::ConsUcb)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "semi" | "semi_ucb" | "semiucb" => Ok(PolicyKind::SemiUcb),
            "cons" | "cons_ucb" | "consucb" => Ok(PolicyKind::ConsUcb),
            "oracle" => Ok(PolicyKind::Oracle),
            "random" | "uniform" | "uniform_random" => Ok(PolicyKind::UniformRandom),
            other => Err(Error::domain(format!("unknown policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
    Random,
}

impl FromStr for TieBreak {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lowest_index" | "index" => Ok(TieBreak::LowestIndex),
            "random" => Ok(TieBreak::Random),
            other => Err(Error::domain(format!("unknown tie-break rule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub k_select: usize,
    pub alpha: f64,
    /// `ω`; only SemiUCB reads it.
    pub regularizer: f64,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind, k_select: usize, alpha: f64) -> Self {
        Self {
            kind,
            k_select,
            alpha,
            regularizer: 1.0,
            tie_break: TieBreak::LowestIndex,
        }
    }

    pub fn with_regularizer(mut self, regularizer: f64) -> Self {
        self.regularizer = regularizer;
        self
    }

    pub fn with_tie_break(mut self, tie_break: TieBreak) -> Self {
        self.tie_break = tie_break;
        self
    }

    /// The `ω` actually used by this policy.
    pub fn effective_regularizer(&self) -> f64 {
        match self.kind {
            PolicyKind::ConsUcb => CONS_REGULARIZER,
            _ => self.regularizer,
        }
    }

    pub fn validate(&self, n_products: usize) -> Result<()> {
        if self.k_select == 0 {
            return Err(Error::domain("k_select must be at least 1"));
        }
        if self.k_select > n_products {
            return Err(Error::domain(format!(
                "k_select = {} exceeds catalog size {n_products}",
                self.k_select
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::domain(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.regularizer > 0.0 && self.regularizer.is_finite()) {
            return Err(Error::domain(format!(
                "regularizer must be positive, got {}",
                self.regularizer
            )));
        }
        Ok(())
    }
}

/// Start-of-period estimates `x_iᵀθ̂` and widths `x_iᵀA⁻¹x_i` for the whole
/// catalog. Both policies score from these, so their `k = 1` scores agree
/// bit for bit.
#[derive(Debug, Clone)]
pub(crate) struct PeriodStats {
    pub estimates: Vec<f64>,
    pub quads: Vec<f64>,
}

pub(crate) fn period_stats(state: &DesignState, catalog: &Catalog) -> Result<PeriodStats> {
    let (n, d) = (catalog.n_products(), catalog.dim());
    if d != state.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            found: d,
        });
    }
    // The row-major N×d buffer is the column-major d×N matrix Xᵀ.
    let xt = DMatrixView::from_slice(catalog.features(), d, n);
    let estimates = (xt.transpose() * state.theta_hat()).as_slice().to_vec();
    let weighted = state.a_inverse() * xt;
    let quads = (0..n)
        .map(|i| checked_quad(xt.column(i).dot(&weighted.column(i))))
        .collect::<Result<Vec<_>>>()?;
    Ok(PeriodStats { estimates, quads })
}

/// `p_t(i) = x_iᵀθ̂ + α√(x_iᵀA⁻¹x_i)` for every product.
pub fn semi_ucb_scores(state: &DesignState, catalog: &Catalog, alpha: f64) -> Result<Vec<f64>> {
    let stats = period_stats(state, catalog)?;
    Ok(semi_scores_from(&stats, alpha))
}

fn semi_scores_from(stats: &PeriodStats, alpha: f64) -> Vec<f64> {
    stats
        .estimates
        .iter()
        .zip(&stats.quads)
        .map(|(e, q)| e + alpha * q.sqrt())
        .collect()
}

/// Per-product secondary sort key: lower wins a tie.
pub(crate) fn tie_ranks<R: Rng + ?Sized>(n: usize, rule: TieBreak, rng: &mut R) -> Vec<u32> {
    let mut ranks: Vec<u32> = (0..n as u32).collect();
    if rule == TieBreak::Random {
        ranks.shuffle(rng);
    }
    ranks
}

/// Higher score first, then lower rank.
pub(crate) fn rank_order(scores: &[f64], ranks: &[u32], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(ranks[a].cmp(&ranks[b]))
}

/// The `k` highest-scoring indices, best first. Ties go to the lowest index
/// under [`TieBreak::LowestIndex`] and to a uniformly random order otherwise.
pub fn select_top_k<R: Rng + ?Sized>(
    scores: &[f64],
    k: usize,
    tie_break: TieBreak,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let ranks = tie_ranks(scores.len(), tie_break, rng);
    select_top_k_ranked(scores, k, &ranks)
}

pub fn select_top_k_ranked(scores: &[f64], k: usize, ranks: &[u32]) -> Result<Vec<usize>> {
    let n = scores.len();
    if k > n {
        return Err(Error::domain(format!("k = {k} exceeds N = {n}")));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Conditioning(format!("score of product {i} is NaN")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < n {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, ranks, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, ranks, a, b));
    Ok(idx)
}

/// Folds one period's feedback into a SemiUCB state: `K` rewarded rank-1
/// updates in offer order, then `θ̂` is refreshed.
///
/// Returns `Σ_k ‖x_(t,k)‖_{A_{t,k-1}⁻¹}` over the offer order.
pub fn end_of_period_update(
    state: &mut DesignState,
    catalog: &Catalog,
    feedback: &PeriodFeedback,
) -> Result<f64> {
    check_feedback(catalog, feedback)?;
    let mut potential = 0.0;
    for (&i, &r) in feedback.selected.iter().zip(&feedback.rewards) {
        potential += state.rank1_update(catalog.feature(i), Some(r))?.quad.sqrt();
    }
    state.recompute_theta()?;
    Ok(potential)
}

/// Max-abs tolerance between the within-period Gram matrix and the batch one.
const BATCH_AGREEMENT_TOL: f64 = 1e-9;

/// Folds feedback into a ConsUCB state whose `A` already holds the period's
/// outer products (from the within-period updates). Only `b` and `θ̂` change.
/// `period_start` must be the state the period began from; it is used to
/// check that the within-period `A` equals `A_{t-1} + Σ x xᵀ`.
pub fn end_of_cons_period(
    within: &mut DesignState,
    period_start: &DesignState,
    catalog: &Catalog,
    feedback: &PeriodFeedback,
) -> Result<()> {
    check_feedback(catalog, feedback)?;
    let mut batch = period_start.a_matrix().clone();
    for (&i, &r) in feedback.selected.iter().zip(&feedback.rewards) {
        let x = catalog.feature(i);
        within.add_response(x, r)?;
        let xv = DVectorView::from_slice(x, x.len());
        batch.ger(1.0, &xv, &xv, 1.0);
    }
    let diff = (&batch - within.a_matrix()).amax();
    if diff > BATCH_AGREEMENT_TOL {
        return Err(Error::Conditioning(format!(
            "within-period Gram matrix drifted from batch update by {diff:e}"
        )));
    }
    within.recompute_theta()
}

fn check_feedback(catalog: &Catalog, feedback: &PeriodFeedback) -> Result<()> {
    if feedback.rewards.len() != feedback.selected.len() {
        return Err(Error::DimensionMismatch {
            expected: feedback.selected.len(),
            found: feedback.rewards.len(),
        });
    }
    validate_selection(&feedback.selected, catalog.n_products())
}

/// One period of a policy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub period: usize,
    /// `S_t` in selection order.
    pub selected: Vec<usize>,
    /// Score of each selected product at the moment it was selected.
    pub scores: Vec<f64>,
    /// `‖θ̂_t‖₂` used for this period's scores.
    pub theta_norm: f64,
    /// `|S_t \ S_{t-1}|`, or `K` in the first period.
    pub replaced: usize,
    /// Realized number of positive outcomes.
    pub reward: f64,
    /// Expected regret against the best `K`-set.
    pub regret: f64,
    /// `min_i (UCB_t(i) − μ(i))`; negative means some interval missed.
    pub coverage_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrace {
    pub config: PolicyConfig,
    pub dim: usize,
    pub periods: Vec<PeriodRecord>,
    /// `Σ_t Σ_k ‖x_(t,k)‖_{A_{t,k-1}⁻¹}`, for policies that keep a design state.
    pub potential_sum: Option<f64>,
}

impl PolicyTrace {
    pub fn horizon(&self) -> usize {
        self.periods.len()
    }

    pub fn cumulative_regret(&self) -> Vec<f64> {
        self.periods
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p.regret;
                Some(*acc)
            })
            .collect()
    }

    pub fn selections(&self) -> impl Iterator<Item = &[usize]> {
        self.periods.iter().map(|p| p.selected.as_slice())
    }
}

pub(crate) fn replaced_count(previous: Option<&[usize]>, current: &[usize], n: usize) -> usize {
    match previous {
        None => current.len(),
        Some(prev) => {
            let mut before = vec![false; n];
            for &i in prev {
                before[i] = true;
            }
            current.iter().filter(|&&i| !before[i]).count()
        }
    }
}

/// Runs `horizon` periods of one policy against a fixed ground truth.
///
/// Rewards and any policy randomness come from two streams derived from
/// `seed`, so two policies given the same seed see the same reward draws
/// whenever they offer the same products.
pub fn run_policy(
    config: &PolicyConfig,
    catalog: &Catalog,
    truth: &GroundTruth,
    horizon: usize,
    seed: u64,
) -> Result<PolicyTrace> {
    config.validate(catalog.n_products())?;
    if truth.n_products() != catalog.n_products() {
        return Err(Error::DimensionMismatch {
            expected: catalog.n_products(),
            found: truth.n_products(),
        });
    }
    if horizon == 0 {
        return Err(Error::domain("horizon must be at least 1"));
    }
    let k = config.k_select;
    let n = catalog.n_products();
    let mut reward_rng = rng_from_seed(derive_seed(seed, &[0]));
    let mut policy_rng = rng_from_seed(derive_seed(seed, &[1]));

    let best = optimal_set(truth, k)?;
    let best_value = truth.set_value(&best);

    let mut state = if config.kind.is_ucb() {
        Some(DesignState::new(catalog.dim(), config.effective_regularizer())?)
    } else {
        None
    };
    let mut potential = 0.0;
    let mut periods: Vec<PeriodRecord> = Vec::with_capacity(horizon);

    for t in 1..=horizon {
        let period = (|| -> Result<PeriodRecord> {
            let mut theta_norm = 0.0;
            let mut coverage_margin = None;
            let (selected, scores, next_state) = match (config.kind, state.as_ref()) {
                (PolicyKind::Oracle, _) => (best.clone(), vec![f64::NAN; k], None),
                (PolicyKind::UniformRandom, _) => {
                    let sel = rand::seq::index::sample(&mut policy_rng, n, k).into_vec();
                    (sel, vec![f64::NAN; k], None)
                }
                (PolicyKind::SemiUcb, Some(s)) => {
                    theta_norm = s.theta_hat().norm();
                    let stats = period_stats(s, catalog)?;
                    let scores = semi_scores_from(&stats, config.alpha);
                    coverage_margin = Some(min_gap(&scores, truth.mu()));
                    let ranks = tie_ranks(n, config.tie_break, &mut policy_rng);
                    let sel = select_top_k_ranked(&scores, k, &ranks)?;
                    let sel_scores = sel.iter().map(|&i| scores[i]).collect();
                    (sel, sel_scores, None)
                }
                (PolicyKind::ConsUcb, Some(s)) => {
                    theta_norm = s.theta_hat().norm();
                    let stats = period_stats(s, catalog)?;
                    coverage_margin =
                        Some(min_gap(&semi_scores_from(&stats, config.alpha), truth.mu()));
                    let ranks = tie_ranks(n, config.tie_break, &mut policy_rng);
                    let out = cons::select_lazy(s, catalog, &stats, config.alpha, k, &ranks)?;
                    potential += out.potential;
                    (out.selected, out.scores, Some(out.state))
                }
                (_, None) => unreachable!("UCB policies always carry a design state"),
            };

            let feedback = sample_feedback(truth, &selected, t, &mut reward_rng)?;
            match (config.kind, next_state) {
                (PolicyKind::SemiUcb, _) => {
                    let s = state.as_mut().expect("SemiUCB state");
                    potential += end_of_period_update(s, catalog, &feedback)?;
                }
                (PolicyKind::ConsUcb, Some(mut within)) => {
                    let start = state.as_ref().expect("ConsUCB state");
                    end_of_cons_period(&mut within, start, catalog, &feedback)?;
                    state = Some(within);
                }
                _ => {}
            }

            let previous = periods.last().map(|p| p.selected.as_slice());
            Ok(PeriodRecord {
                period: t,
                replaced: replaced_count(previous, &selected, n),
                reward: feedback.total_reward(),
                regret: regret_against(best_value, truth, &selected),
                selected,
                scores,
                theta_norm,
                coverage_margin,
            })
        })()
        .map_err(|e| e.at_period(t))?;
        periods.push(period);
    }

    Ok(PolicyTrace {
        config: *config,
        dim: catalog.dim(),
        periods,
        potential_sum: config.kind.is_ucb().then_some(potential),
    })
}

fn min_gap(ucb: &[f64], mu: &[f64]) -> f64 {
    ucb.iter()
        .zip(mu)
        .map(|(u, m)| u - m)
        .fold(f64::INFINITY, f64::min)
}
