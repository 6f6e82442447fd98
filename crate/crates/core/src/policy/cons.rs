//! ConsUCB's sequential within-period selection.
//!
//! The score of product `i` at step `k` of period `t` is
//!
//! ```text
//! p_{t,k}(i) = x_iᵀθ_t − α√(x_iᵀA_{t-1}⁻¹x_i) + 2α√(x_iᵀA_{t,k-1}⁻¹x_i)
//! ```
//!
//! Only the last term moves within a period, and it can only shrink as
//! outer products are added to `A_{t,k-1}`. A stale score is therefore an
//! upper bound on the fresh one, which is what lets a max-heap pop, rescore
//! and re-push candidates lazily instead of rescoring all `N` products at
//! every step.
//!
//! Widths are tracked through the Sherman–Morrison recurrence
//! `q ← max(0, q − (x_iᵀw)²/(1 + x_jᵀw))` with `w = A_{t,k-1}⁻¹x_j`. The
//! recurrence is monotone in floating point too, so the lazy and the naive
//! selections agree exactly, not just up to rounding.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::design::DesignState;
use crate::environment::{dot, Catalog};
use crate::error::{Error, Result};

use super::{period_stats, PeriodStats};

/// Result of one period of ConsUCB selection.
#[derive(Debug, Clone)]
pub struct ConsSelection {
    /// `i_{t,1}, …, i_{t,K}` in selection order.
    pub selected: Vec<usize>,
    /// `p_{t,k}(i_{t,k})` for each step.
    pub scores: Vec<f64>,
    /// Holds `A_{t,K}`; `b` and `θ̂` are those of the period start.
    pub state: DesignState,
    /// `Σ_k ‖x_{i_{t,k}}‖_{A_{t,k-1}⁻¹}`.
    pub potential: f64,
}

/// One within-period outer-product addition, as seen by the widths.
struct Step {
    direction: Vec<f64>,
    denominator: f64,
}

#[inline]
fn shrink(quad: f64, x: &[f64], step: &Step) -> f64 {
    let proj = dot(x, &step.direction);
    (quad - proj * proj / step.denominator).max(0.0)
}

/// `x·θ − α w₀ + 2α √q`, arranged so that `q = w₀²` reproduces the SemiUCB
/// score `x·θ + α w₀` exactly.
#[inline]
fn score(estimate: f64, width0: f64, alpha: f64, quad: f64) -> f64 {
    estimate + alpha * (2.0 * quad.sqrt() - width0)
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    rank: u32,
    index: usize,
    /// Number of within-period steps already folded into this score.
    version: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.rank.cmp(&self.rank))
    }
}

fn check_args(state: &DesignState, catalog: &Catalog, alpha: f64, k: usize) -> Result<()> {
    if k > catalog.n_products() {
        return Err(Error::domain(format!(
            "k = {k} exceeds N = {}",
            catalog.n_products()
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::domain(format!("alpha must be >= 0, got {alpha}")));
    }
    if catalog.dim() != state.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            found: catalog.dim(),
        });
    }
    Ok(())
}

fn lowest_index_ranks(n: usize) -> Vec<u32> {
    (0..n as u32).collect()
}

/// Selects `k` products for one period, ties to the lowest index.
///
/// `state` must hold `A_{t-1}` with a current `θ_t`.
pub fn cons_ucb_select(
    state: &DesignState,
    catalog: &Catalog,
    alpha: f64,
    k: usize,
) -> Result<ConsSelection> {
    cons_ucb_select_ranked(state, catalog, alpha, k, &lowest_index_ranks(catalog.n_products()))
}

/// As [`cons_ucb_select`], breaking ties by the smallest `ranks[i]`.
pub fn cons_ucb_select_ranked(
    state: &DesignState,
    catalog: &Catalog,
    alpha: f64,
    k: usize,
    ranks: &[u32],
) -> Result<ConsSelection> {
    check_args(state, catalog, alpha, k)?;
    let stats = period_stats(state, catalog)?;
    select_lazy(state, catalog, &stats, alpha, k, ranks)
}

pub(super) fn select_lazy(
    start: &DesignState,
    catalog: &Catalog,
    stats: &PeriodStats,
    alpha: f64,
    k: usize,
    ranks: &[u32],
) -> Result<ConsSelection> {
    let n = catalog.n_products();
    let widths: Vec<f64> = stats.quads.iter().map(|q| q.sqrt()).collect();
    let mut quads = stats.quads.clone();

    let mut heap: BinaryHeap<Candidate> = (0..n)
        .map(|i| Candidate {
            score: score(stats.estimates[i], widths[i], alpha, quads[i]),
            rank: ranks[i],
            index: i,
            version: 0,
        })
        .collect();
    if let Some(c) = heap.iter().find(|c| c.score.is_nan()) {
        return Err(Error::Conditioning(format!("score of product {} is NaN", c.index)));
    }

    let mut within = start.clone();
    let mut steps: Vec<Step> = Vec::with_capacity(k);
    let mut selected = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    let mut potential = 0.0;

    for step in 0..k {
        let chosen = loop {
            let mut top = heap.pop().expect("k <= N leaves a candidate");
            if top.version == step {
                break top;
            }
            let i = top.index;
            let x = catalog.feature(i);
            for s in &steps[top.version..step] {
                quads[i] = shrink(quads[i], x, s);
            }
            top.score = score(stats.estimates[i], widths[i], alpha, quads[i]);
            top.version = step;
            heap.push(top);
        };

        let update = within
            .rank1_update(catalog.feature(chosen.index), None)
            .map_err(|e| e.in_step(step + 1))?;
        potential += update.quad.sqrt();
        steps.push(Step {
            denominator: update.denominator(),
            direction: update.direction.as_slice().to_vec(),
        });
        selected.push(chosen.index);
        scores.push(chosen.score);
    }

    Ok(ConsSelection {
        selected,
        scores,
        state: within,
        potential,
    })
}

/// Reference implementation that rescores every unselected product at every
/// step. Quadratic in `N·K`; used to check the lazy path.
pub fn cons_ucb_select_naive(
    state: &DesignState,
    catalog: &Catalog,
    alpha: f64,
    k: usize,
    ranks: &[u32],
) -> Result<ConsSelection> {
    check_args(state, catalog, alpha, k)?;
    let stats = period_stats(state, catalog)?;
    let n = catalog.n_products();
    let widths: Vec<f64> = stats.quads.iter().map(|q| q.sqrt()).collect();
    let mut quads = stats.quads.clone();
    let mut taken = vec![false; n];
    let mut within = state.clone();
    let mut selected = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    let mut potential = 0.0;

    for step in 0..k {
        let mut best: Option<Candidate> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let c = Candidate {
                score: score(stats.estimates[i], widths[i], alpha, quads[i]),
                rank: ranks[i],
                index: i,
                version: step,
            };
            if best.is_none_or(|b| c > b) {
                best = Some(c);
            }
        }
        let chosen = best.expect("k <= N leaves a candidate");
        taken[chosen.index] = true;

        let update = within
            .rank1_update(catalog.feature(chosen.index), None)
            .map_err(|e| e.in_step(step + 1))?;
        potential += update.quad.sqrt();
        let s = Step {
            denominator: update.denominator(),
            direction: update.direction.as_slice().to_vec(),
        };
        for i in 0..n {
            quads[i] = shrink(quads[i], catalog.feature(i), &s);
        }
        selected.push(chosen.index);
        scores.push(chosen.score);
    }

    Ok(ConsSelection {
        selected,
        scores,
        state: within,
        potential,
    })
}
