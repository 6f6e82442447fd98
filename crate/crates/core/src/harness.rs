//! Replicated experiments: every (policy, replicate) cell runs on the same
//! instance with its own reward stream, and per-period statistics are
//! reduced in a fixed order.

use std::fs;
use std::path::{Path, PathBuf};

use log::{error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{theory_alpha, AlphaVariant};
use crate::environment::{Catalog, GroundTruth};
use crate::error::{Error, Result};
use crate::instances::{build_instance, InstanceSpec};
use crate::lemmas::{check_potential_bound, PotentialCheck};
use crate::policy::{run_policy, PolicyConfig, PolicyKind, PolicyTrace};
use crate::seed::derive_seed;

pub const RESULTS_FILE: &str = "results.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub instance: InstanceSpec,
    pub horizon: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    pub policies: Vec<PolicyConfig>,
    #[serde(default)]
    pub base_seed: u64,
    /// Directory receiving the per-cell and aggregate CSV files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
}

fn default_replicates() -> usize {
    10
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::domain("horizon must be at least 1"));
        }
        if self.replicates == 0 {
            return Err(Error::domain("replicates must be at least 1"));
        }
        if self.policies.is_empty() {
            return Err(Error::domain("plan lists no policies"));
        }
        Ok(())
    }

    /// Replaces the α of every UCB policy with its theoretical value.
    pub fn with_theory_alpha(mut self, n_products: usize, delta: f64) -> Result<Self> {
        for p in &mut self.policies {
            let variant = match p.kind {
                PolicyKind::SemiUcb => AlphaVariant::Semi,
                PolicyKind::ConsUcb => AlphaVariant::Cons,
                _ => continue,
            };
            p.alpha = theory_alpha(self.instance.dim, self.horizon, n_products, delta, variant)?;
        }
        Ok(self)
    }

    pub fn cell_seed(&self, policy_index: usize, replicate: usize) -> u64 {
        derive_seed(self.base_seed, &[policy_index as u64, replicate as u64])
    }
}

/// One finished (policy, replicate) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub policy_index: usize,
    pub replicate: usize,
    pub seed: u64,
    pub trace: PolicyTrace,
    /// Present for UCB runs with unit regularizer.
    pub potential: Option<PotentialCheck>,
}

/// Per-period mean and sample standard deviation across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SeriesStats {
    fn from_rows(rows: &[Vec<f64>], horizon: usize) -> Self {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; horizon];
        let mut std = vec![0.0; horizon];
        for t in 0..horizon {
            let m = rows.iter().map(|r| r[t]).sum::<f64>() / n;
            mean[t] = m;
            if rows.len() > 1 {
                let ss: f64 = rows.iter().map(|r| (r[t] - m).powi(2)).sum();
                std[t] = (ss / (n - 1.0)).sqrt();
            }
        }
        Self { mean, std }
    }

    pub fn last_mean(&self) -> f64 {
        *self.mean.last().expect("non-empty series")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySeries {
    pub config: PolicyConfig,
    pub regret: SeriesStats,
    pub cum_regret: SeriesStats,
    pub reward: SeriesStats,
    pub replaced: SeriesStats,
    pub potential: Vec<PotentialCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretSeries {
    pub horizon: usize,
    pub replicates: usize,
    pub per_policy: Vec<PolicySeries>,
}

impl RegretSeries {
    pub fn policy(&self, kind: PolicyKind) -> Option<&PolicySeries> {
        self.per_policy.iter().find(|p| p.config.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub series: RegretSeries,
    /// Ordered by policy index, then replicate.
    pub cells: Vec<CellResult>,
}

impl Experiment {
    pub fn cells_for(&self, policy_index: usize) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(move |c| c.policy_index == policy_index)
    }
}

/// `|S_t \ S_{t-1}|` per period, with `K` in the first.
pub fn replacement_counts(trace: &PolicyTrace) -> Vec<usize> {
    trace.periods.iter().map(|p| p.replaced).collect()
}

fn run_cell(
    plan: &ExperimentPlan,
    catalog: &Catalog,
    truth: &GroundTruth,
    policy_index: usize,
    replicate: usize,
) -> Result<CellResult> {
    let config = &plan.policies[policy_index];
    let seed = plan.cell_seed(policy_index, replicate);
    let trace = run_policy(config, catalog, truth, plan.horizon, seed)?;
    let potential = if config.kind.is_ucb() && config.effective_regularizer() == 1.0 {
        Some(check_potential_bound(&trace)?)
    } else {
        None
    };
    Ok(CellResult {
        policy_index,
        replicate,
        seed,
        trace,
        potential,
    })
}

/// Builds the instance once and runs every (policy, replicate) cell.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<Experiment> {
    plan.validate()?;
    let (catalog, truth) = build_instance(&plan.instance.clone().normalized())?;
    run_experiment_on(plan, &catalog, &truth)
}

/// As [`run_experiment`] with a prebuilt instance; `plan.instance` is only
/// recorded.
pub fn run_experiment_on(
    plan: &ExperimentPlan,
    catalog: &Catalog,
    truth: &GroundTruth,
) -> Result<Experiment> {
    plan.validate()?;
    for p in &plan.policies {
        p.validate(catalog.n_products())?;
    }
    let jobs: Vec<(usize, usize)> = (0..plan.policies.len())
        .flat_map(|p| (0..plan.replicates).map(move |r| (p, r)))
        .collect();
    info!(
        "running {} cells: N={}, d={}, T={}",
        jobs.len(),
        catalog.n_products(),
        catalog.dim(),
        plan.horizon
    );
    let outcomes: Vec<Result<CellResult>> = jobs
        .par_iter()
        .map(|&(p, r)| run_cell(plan, catalog, truth, p, r))
        .collect();

    let mut cells = Vec::with_capacity(outcomes.len());
    let mut first_error = None;
    for (outcome, &(p, r)) in outcomes.into_iter().zip(&jobs) {
        match outcome {
            Ok(cell) => cells.push(cell),
            Err(e) => {
                error!("policy {} replicate {r}: {e}", plan.policies[p].kind);
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_error {
        if let Some(dir) = &plan.output_path {
            write_results_csv(&dir.join(RESULTS_FILE), plan, &cells)?;
        }
        return Err(e);
    }

    let series = aggregate(plan, &cells);
    if let Some(dir) = &plan.output_path {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_results_csv(&dir.join(RESULTS_FILE), plan, &cells)?;
        write_aggregate_csv(&dir.join(AGGREGATE_FILE), &series)?;
    }
    Ok(Experiment { series, cells })
}

fn aggregate(plan: &ExperimentPlan, cells: &[CellResult]) -> RegretSeries {
    let per_policy = plan
        .policies
        .iter()
        .enumerate()
        .map(|(idx, config)| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.policy_index == idx).collect();
            let rows = |f: &dyn Fn(&PolicyTrace) -> Vec<f64>| -> Vec<Vec<f64>> {
                mine.iter().map(|c| f(&c.trace)).collect()
            };
            let h = plan.horizon;
            PolicySeries {
                config: *config,
                regret: SeriesStats::from_rows(
                    &rows(&|t| t.periods.iter().map(|p| p.regret).collect()),
                    h,
                ),
                cum_regret: SeriesStats::from_rows(&rows(&|t| t.cumulative_regret()), h),
                reward: SeriesStats::from_rows(
                    &rows(&|t| t.periods.iter().map(|p| p.reward).collect()),
                    h,
                ),
                replaced: SeriesStats::from_rows(
                    &rows(&|t| replacement_counts(t).iter().map(|&c| c as f64).collect()),
                    h,
                ),
                potential: mine.iter().filter_map(|c| c.potential).collect(),
            }
        })
        .collect();
    RegretSeries {
        horizon: plan.horizon,
        replicates: plan.replicates,
        per_policy,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// One row per (policy, replicate, period).
pub fn write_results_csv(path: &Path, plan: &ExperimentPlan, cells: &[CellResult]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "policy", "alpha", "replicate", "period", "reward", "regret", "cum_regret", "replaced",
    ])?;
    for cell in cells {
        let config = &plan.policies[cell.policy_index];
        let cum = cell.trace.cumulative_regret();
        for (p, c) in cell.trace.periods.iter().zip(cum) {
            w.write_record([
                config.kind.label().to_string(),
                config.alpha.to_string(),
                cell.replicate.to_string(),
                p.period.to_string(),
                p.reward.to_string(),
                p.regret.to_string(),
                c.to_string(),
                p.replaced.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per (policy, period) with `_mean` / `_std` columns.
pub fn write_aggregate_csv(path: &Path, series: &RegretSeries) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["policy".to_string(), "alpha".into(), "period".into()];
    for name in ["regret", "cum_regret", "reward", "replaced"] {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    w.write_record(&header)?;
    for ps in &series.per_policy {
        for t in 0..series.horizon {
            let mut row = vec![
                ps.config.kind.label().to_string(),
                ps.config.alpha.to_string(),
                (t + 1).to_string(),
            ];
            for s in [&ps.regret, &ps.cum_regret, &ps.reward, &ps.replaced] {
                row.push(s.mean[t].to_string());
                row.push(s.std[t].to_string());
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub policy: PolicyKind,
    pub alpha: f64,
    pub final_cum_regret_mean: f64,
    pub final_cum_regret_std: f64,
    pub cum_regret_mean: Vec<f64>,
    pub replaced_mean: Vec<f64>,
    pub potential: Vec<PotentialCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestAlpha {
    pub policy: PolicyKind,
    pub alpha: f64,
    pub regret: f64,
    /// `(baseline − this) / baseline · 100`, where the baseline is the
    /// first swept policy's best regret. `None` when the baseline is zero
    /// and this regret is not.
    pub improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub alphas: Vec<f64>,
    pub horizon: usize,
    pub cells: Vec<SweepCell>,
    pub best: Vec<BestAlpha>,
}

impl SweepTable {
    pub fn cell(&self, policy: PolicyKind, alpha: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.policy == policy && c.alpha == alpha)
    }

    pub fn best_for(&self, policy: PolicyKind) -> Option<&BestAlpha> {
        self.best.iter().find(|b| b.policy == policy)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["policy", "alpha", "cum_regret_mean", "cum_regret_std"])?;
        for c in &self.cells {
            w.write_record([
                c.policy.label().to_string(),
                c.alpha.to_string(),
                c.final_cum_regret_mean.to_string(),
                c.final_cum_regret_std.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn improvement_pct(baseline: f64, candidate: f64) -> Option<f64> {
    if baseline == 0.0 {
        (candidate == 0.0).then_some(0.0)
    } else {
        Some((baseline - candidate) / baseline * 100.0)
    }
}

/// Runs the plan once per α, substituting α into every UCB policy, and
/// tabulates the final mean cumulative regret of every policy (baselines
/// without α repeat across rows). When `plan.output_path` is set, each α
/// writes into its own `alpha_<α>` subdirectory.
pub fn alpha_sweep(plan: &ExperimentPlan, alphas: &[f64]) -> Result<SweepTable> {
    if alphas.is_empty() {
        return Err(Error::domain("alpha sweep needs at least one alpha"));
    }
    plan.validate()?;
    let (catalog, truth) = build_instance(&plan.instance.clone().normalized())?;
    let mut cells = Vec::new();
    for &alpha in alphas {
        let mut run = plan.clone();
        for p in &mut run.policies {
            if p.kind.is_ucb() {
                p.alpha = alpha;
            }
        }
        run.output_path = plan.output_path.as_ref().map(|d| d.join(format!("alpha_{alpha}")));
        let exp = run_experiment_on(&run, &catalog, &truth)?;
        for ps in &exp.series.per_policy {
            let last = plan.horizon - 1;
            cells.push(SweepCell {
                policy: ps.config.kind,
                alpha,
                final_cum_regret_mean: ps.cum_regret.mean[last],
                final_cum_regret_std: ps.cum_regret.std[last],
                cum_regret_mean: ps.cum_regret.mean.clone(),
                replaced_mean: ps.replaced.mean.clone(),
                potential: ps.potential.clone(),
            });
        }
    }

    let mut kinds: Vec<PolicyKind> = Vec::new();
    for c in &cells {
        if !kinds.contains(&c.policy) {
            kinds.push(c.policy);
        }
    }
    let mut best: Vec<BestAlpha> = kinds
        .iter()
        .map(|&k| {
            let b = cells
                .iter()
                .filter(|c| c.policy == k)
                .min_by(|a, b| a.final_cum_regret_mean.total_cmp(&b.final_cum_regret_mean))
                .expect("every swept policy has cells");
            BestAlpha {
                policy: k,
                alpha: b.alpha,
                regret: b.final_cum_regret_mean,
                improvement_pct: None,
            }
        })
        .collect();
    let baseline = best[0].regret;
    for b in &mut best {
        b.improvement_pct = improvement_pct(baseline, b.regret);
    }
    Ok(SweepTable {
        alphas: alphas.to_vec(),
        horizon: plan.horizon,
        cells,
        best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCoverage {
    pub policy: PolicyKind,
    pub alpha: f64,
    pub violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub delta: f64,
    pub replicates: usize,
    pub per_policy: Vec<PolicyCoverage>,
}

impl CoverageReport {
    /// Largest violation rate over the audited policies.
    pub fn violation_rate(&self) -> f64 {
        self.per_policy.iter().map(|p| p.violation_rate).fold(0.0, f64::max)
    }
}

/// Fraction of replicates in which some period and product had its upper
/// confidence bound below `μ(i)`, for each UCB policy at its configured α.
pub fn coverage_audit(plan: &ExperimentPlan, delta: f64) -> Result<CoverageReport> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    let exp = run_experiment(plan)?;
    let per_policy = plan
        .policies
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind.is_ucb())
        .map(|(idx, p)| {
            let missed = exp
                .cells_for(idx)
                .filter(|c| {
                    c.trace
                        .periods
                        .iter()
                        .any(|r| r.coverage_margin.is_some_and(|m| m < 0.0))
                })
                .count();
            PolicyCoverage {
                policy: p.kind,
                alpha: p.alpha,
                violation_rate: missed as f64 / plan.replicates as f64,
            }
        })
        .collect();
    Ok(CoverageReport {
        delta,
        replicates: plan.replicates,
        per_policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PeriodRecord, PolicyConfig};

    fn record(period: usize, selected: Vec<usize>, replaced: usize) -> PeriodRecord {
        PeriodRecord {
            period,
            scores: vec![0.0; selected.len()],
            selected,
            theta_norm: 0.0,
            replaced,
            reward: 0.0,
            regret: 0.0,
            coverage_margin: None,
        }
    }

    fn small_plan(kinds: &[PolicyKind], alpha: f64) -> ExperimentPlan {
        ExperimentPlan {
            instance: InstanceSpec::uniform_sphere(30, 4, 3, 5),
            horizon: 6,
            replicates: 3,
            policies: kinds.iter().map(|&k| PolicyConfig::new(k, 3, alpha)).collect(),
            base_seed: 17,
            output_path: None,
        }
    }

    #[test]
    fn replacement_counts_from_trace() {
        let config = PolicyConfig::new(PolicyKind::Oracle, 2, 0.0);
        let (c, t) = crate::instances::uniform_sphere_instance(5, 3, 0).unwrap();
        let trace = run_policy(&config, &c, &t, 4, 0).unwrap();
        assert_eq!(replacement_counts(&trace), vec![2, 0, 0, 0]);

        let hand = PolicyTrace {
            config,
            dim: 3,
            periods: vec![record(1, vec![0, 1], 2), record(2, vec![1, 2], 1)],
            potential_sum: None,
        };
        assert_eq!(replacement_counts(&hand), vec![2, 1]);
    }

    #[test]
    fn oracle_has_zero_regret() {
        let exp = run_experiment(&small_plan(&[PolicyKind::Oracle], 0.0)).unwrap();
        let s = &exp.series.per_policy[0];
        assert!(s.cum_regret.mean.iter().all(|&v| v == 0.0));
        assert!(s.cum_regret.std.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregation_is_deterministic() {
        let plan = small_plan(&[PolicyKind::SemiUcb, PolicyKind::ConsUcb], 0.3);
        let a = run_experiment(&plan).unwrap();
        let b = run_experiment(&plan).unwrap();
        assert_eq!(a.series, b.series);
        for ps in &a.series.per_policy {
            assert!(ps.cum_regret.mean.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(ps.potential.len(), plan.replicates);
            assert!(ps.potential.iter().all(PotentialCheck::holds));
        }
    }

    #[test]
    fn single_replicate_has_zero_std() {
        let mut plan = small_plan(&[PolicyKind::UniformRandom], 0.0);
        plan.replicates = 1;
        let exp = run_experiment(&plan).unwrap();
        assert!(exp.series.per_policy[0].regret.std.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        let s = SeriesStats::from_rows(&[vec![1.0], vec![3.0]], 1);
        assert_eq!(s.mean, vec![2.0]);
        assert!((s.std[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sweep_single_alpha_matches_experiment() {
        let plan = small_plan(&[PolicyKind::ConsUcb], 0.4);
        let table = alpha_sweep(&plan, &[0.4]).unwrap();
        let exp = run_experiment(&plan).unwrap();
        assert_eq!(table.cells.len(), 1);
        assert_eq!(
            table.cells[0].final_cum_regret_mean,
            exp.series.per_policy[0].cum_regret.last_mean()
        );
        assert_eq!(table.best[0].improvement_pct, Some(0.0));
        assert!(alpha_sweep(&plan, &[]).is_err());

        let oracle = small_plan(&[PolicyKind::Oracle], 0.0);
        let table = alpha_sweep(&oracle, &[0.1, 1.0]).unwrap();
        assert_eq!(table.best[0].improvement_pct, Some(0.0));
    }

    #[test]
    fn improvement_convention() {
        assert_eq!(improvement_pct(10.0, 10.0), Some(0.0));
        assert_eq!(improvement_pct(10.0, 7.5), Some(25.0));
        assert_eq!(improvement_pct(0.0, 0.0), Some(0.0));
        assert_eq!(improvement_pct(0.0, 1.0), None);
    }

    #[test]
    fn coverage_extremes() {
        let plan = small_plan(&[PolicyKind::SemiUcb], 1e6);
        assert_eq!(coverage_audit(&plan, 0.1).unwrap().violation_rate(), 0.0);
        let mut plan = small_plan(&[PolicyKind::SemiUcb], 0.0);
        plan.replicates = 10;
        plan.horizon = 10;
        assert!(coverage_audit(&plan, 0.1).unwrap().violation_rate() >= 0.9);
    }

    #[test]
    fn writes_csv_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = small_plan(&[PolicyKind::SemiUcb], 0.2);
        plan.output_path = Some(dir.path().to_path_buf());
        run_experiment(&plan).unwrap();
        let results = fs::read_to_string(dir.path().join(RESULTS_FILE)).unwrap();
        assert!(results.starts_with("policy,alpha,replicate,period,reward,regret,cum_regret,replaced"));
        assert_eq!(results.lines().count(), 1 + 3 * 6);
        let agg = fs::read_to_string(dir.path().join(AGGREGATE_FILE)).unwrap();
        assert!(agg.lines().next().unwrap().contains("cum_regret_mean,cum_regret_std"));
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let mut plan = small_plan(&[PolicyKind::SemiUcb], 0.2);
        plan.replicates = 0;
        assert!(run_experiment(&plan).is_err());
        let mut plan = small_plan(&[PolicyKind::SemiUcb], 0.2);
        plan.policies[0].k_select = 31;
        assert!(run_experiment(&plan).is_err());
    }
}
