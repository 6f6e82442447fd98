//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one status line, then exits non-zero if any failed.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use semibandit::design::DesignState;
use semibandit::harness::{alpha_sweep, coverage_audit, ExperimentPlan, SweepTable};
use semibandit::instances::{lower_bound_instance, uniform_sphere_instance, InstanceSpec};
use semibandit::lemmas::{
    check_key0, check_key1, check_main_lemma, check_potential_bound, PotentialCheck, SuiteSummary,
};
use semibandit::policy::{cons_ucb_select_naive, cons_ucb_select_ranked};
use semibandit::seed::{derive_seed, rng_from_seed};
use semibandit::{run_policy, PolicyConfig, PolicyKind, PolicyTrace};

const LB_DIM: usize = 10;
const LB_K: usize = 100;
const LB_T: usize = 26;
const SEED: u64 = 20_240_611;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn timed(budget: Duration, run: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = run();
    let elapsed = start.elapsed();
    if elapsed > budget {
        o.passed = false;
    }
    o.detail = format!("{} [{:.2}s / {}s]", o.detail, elapsed.as_secs_f64(), budget.as_secs());
    o
}

/// Group (0-based) of a product in the lower-bound instance.
fn group(i: usize) -> usize {
    i / LB_K
}

fn lower_bound_runs(kind: PolicyKind) -> Vec<(f64, PolicyTrace)> {
    let (catalog, truth) = lower_bound_instance(LB_DIM, LB_K).unwrap();
    [0.02, 1.0]
        .into_iter()
        .map(|alpha| {
            let config = PolicyConfig::new(kind, LB_K, alpha);
            (alpha, run_policy(&config, &catalog, &truth, LB_T, SEED).unwrap())
        })
        .collect()
}

fn potential_ok(traces: &[&PolicyTrace]) -> (bool, usize) {
    let checks: Vec<PotentialCheck> =
        traces.iter().map(|t| check_potential_bound(t).unwrap()).collect();
    (checks.iter().all(|c| c.applicable && c.holds()), checks.len())
}

fn criterion_1(potential: &mut Vec<PolicyTrace>) -> Outcome {
    // Every period until d − 1 the SemiUCB set lies in groups with μ = 0.
    let expected = (LB_T.min(LB_DIM - 1) * LB_K) as f64 * (0.5 + 1.0 / (2.0 * LB_DIM as f64));
    let mut ok = true;
    let mut parts = Vec::new();
    for (alpha, trace) in lower_bound_runs(PolicyKind::SemiUcb) {
        let zero_reward = trace.periods[..9].iter().all(|p| p.reward == 0.0);
        let cum9 = trace.cumulative_regret()[8];
        ok &= zero_reward && (cum9 - expected).abs() <= 1e-9;
        parts.push(format!("alpha={alpha}: reward(1..9)=0 {zero_reward}, R(9)={cum9}"));
        potential.push(trace);
    }
    outcome(ok, format!("expected R(9)={expected}; {}", parts.join("; ")))
}

/// Score-cascade oracle for ConsUCB's first period with `θ̂ = 0, A = I`:
/// the next pick from group `i` after `m` earlier picks scores
/// `α cᵢ (2/√(1 + m cᵢ²) − 1)`.
fn cascade_counts(alpha: f64) -> Vec<usize> {
    let c: Vec<f64> = (1..=LB_DIM)
        .map(|i| 0.5 + i as f64 / (2.0 * LB_DIM as f64))
        .collect();
    let mut m = vec![0usize; LB_DIM];
    for _ in 0..LB_K {
        let score = |g: usize| alpha * c[g] * (2.0 / (1.0 + m[g] as f64 * c[g] * c[g]).sqrt() - 1.0);
        let best = (0..LB_DIM)
            .filter(|&g| m[g] < LB_K)
            .max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a)))
            .unwrap();
        m[best] += 1;
    }
    m
}

fn criterion_2(potential: &mut Vec<PolicyTrace>) -> Outcome {
    const FROZEN: [usize; 10] = [20, 16, 13, 11, 9, 8, 7, 6, 5, 5];
    let g1_value = 0.5 + 1.0 / (2.0 * LB_DIM as f64);
    let mut ok = true;
    let mut parts = Vec::new();
    for (alpha, trace) in lower_bound_runs(PolicyKind::ConsUcb) {
        let oracle = cascade_counts(alpha);
        let mut counts = vec![0usize; LB_DIM];
        for &i in &trace.periods[0].selected {
            counts[group(i)] += 1;
        }
        let all_groups = counts.iter().all(|&c| c > 0);
        let g1_reward = counts[0] as f64 * g1_value;
        let period1_regret = LB_K as f64 * g1_value - g1_reward;
        let cum9 = trace.cumulative_regret()[8];
        ok &= all_groups
            && counts == oracle
            && oracle == FROZEN
            && (trace.periods[0].regret - period1_regret).abs() <= 1e-9
            && cum9 <= 495.0 - g1_reward;
        parts.push(format!(
            "alpha={alpha}: groups={counts:?}, R(1)={}, R(9)={cum9:.3} <= {}",
            trace.periods[0].regret,
            495.0 - g1_reward
        ));
        potential.push(trace);
    }
    outcome(ok, parts.join("; "))
}

fn criterion_3() -> Outcome {
    let (catalog, truth) = uniform_sphere_instance(200, 10, derive_seed(SEED, &[3])).unwrap();
    let mut ok = true;
    for alpha in [0.1, 1.0] {
        let semi = run_policy(&PolicyConfig::new(PolicyKind::SemiUcb, 1, alpha), &catalog, &truth, 50, SEED)
            .unwrap();
        let cons = run_policy(&PolicyConfig::new(PolicyKind::ConsUcb, 1, alpha), &catalog, &truth, 50, SEED)
            .unwrap();
        ok &= semi.selections().eq(cons.selections());
    }
    outcome(ok, "N=200, d=10, K=1, T=50, alpha in {0.1, 1.0}: identical selection sequences")
}

fn criterion_4() -> Outcome {
    let trials = 10_000;
    let mut suites: Vec<SuiteSummary> = Vec::new();
    for dim in [2, 5, 10, 50] {
        let s = derive_seed(SEED, &[4, dim as u64]);
        suites.push(SuiteSummary::from_trials("key0", dim, None, &check_key0(dim, trials, s).unwrap()));
        suites.push(SuiteSummary::from_trials("key1", dim, Some(1), &check_key1(dim, trials, s).unwrap()));
        for l in [1, 5, 20] {
            let t = check_main_lemma(dim, l, trials, derive_seed(s, &[l as u64])).unwrap();
            suites.push(SuiteSummary::from_trials("main", dim, Some(l), &t));
        }
    }
    let violations: usize = suites.iter().map(|s| s.violations).sum();
    let worst = suites
        .iter()
        .min_by(|a, b| a.min_margin.total_cmp(&b.min_margin))
        .unwrap();
    outcome(
        violations == 0 && suites.iter().all(|s| s.trials == trials),
        format!(
            "{} suites x {trials} trials, {violations} violations, min margin {:e} ({} d={} L={:?})",
            suites.len(),
            worst.min_margin,
            worst.lemma,
            worst.dim,
            worst.l_updates
        ),
    )
}

fn criterion_6() -> Outcome {
    let (n, dim, k, horizon, delta) = (100, 5, 10, 20, 0.1);
    let plan = ExperimentPlan {
        instance: InstanceSpec::uniform_sphere(n, dim, k, derive_seed(SEED, &[6])),
        horizon,
        replicates: 100,
        policies: vec![
            PolicyConfig::new(PolicyKind::SemiUcb, k, 0.0),
            PolicyConfig::new(PolicyKind::ConsUcb, k, 0.0),
        ],
        base_seed: SEED,
        output_path: None,
    }
    .with_theory_alpha(n, delta)
    .unwrap();
    let report = coverage_audit(&plan, delta).unwrap();
    let rates: Vec<String> = report
        .per_policy
        .iter()
        .map(|p| format!("{} alpha={:.4}: {}", p.policy, p.alpha, p.violation_rate))
        .collect();
    outcome(
        report.violation_rate() <= delta + 0.06,
        format!("delta={delta}, violation rates {}", rates.join(", ")),
    )
}

fn clustered_sweep() -> SweepTable {
    let k = 200;
    let plan = ExperimentPlan {
        instance: InstanceSpec::clustered(2000, 20, k, 8, 0.05, derive_seed(SEED, &[7])),
        horizon: 26,
        replicates: 10,
        policies: vec![
            PolicyConfig::new(PolicyKind::SemiUcb, k, 0.0),
            PolicyConfig::new(PolicyKind::ConsUcb, k, 0.0),
        ],
        base_seed: SEED,
        output_path: None,
    };
    alpha_sweep(&plan, &[0.02, 0.10, 0.50, 1.00]).unwrap()
}

fn criterion_7(table: &SweepTable) -> Outcome {
    let semi = table.best_for(PolicyKind::SemiUcb).unwrap();
    let cons = table.best_for(PolicyKind::ConsUcb).unwrap();
    let cells: Vec<String> = table
        .cells
        .iter()
        .map(|c| format!("{}@{}={:.2}", c.policy, c.alpha, c.final_cum_regret_mean))
        .collect();
    outcome(
        cons.regret <= semi.regret,
        format!(
            "best semi {:.2} (alpha {}), best cons {:.2} (alpha {}), improvement {:.2}%; {}",
            semi.regret,
            semi.alpha,
            cons.regret,
            cons.alpha,
            cons.improvement_pct.unwrap_or(f64::NAN),
            cells.join(" ")
        ),
    )
}

fn criterion_8() -> Outcome {
    let d = 50;
    let mut rng = rng_from_seed(derive_seed(SEED, &[8]));
    let mut state = DesignState::new(d, 1.0).unwrap();
    for _ in 0..10_000 {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let r = rng.random::<f64>().powf(1.0 / d as f64) / n;
        let x: Vec<f64> = v.iter().map(|x| x * r).collect();
        state.rank1_update(&x, Some(f64::from(rng.random_bool(0.5)))).unwrap();
    }
    let fresh = state.a_matrix().clone().try_inverse().unwrap();
    let err = (&fresh - state.a_inverse()).amax();

    let mut mismatches = 0;
    for case in 0..100u64 {
        let mut rng = rng_from_seed(derive_seed(SEED, &[8, case]));
        let n = rng.random_range(2..=200);
        let dim = rng.random_range(2..=12);
        let k = rng.random_range(1..=20.min(n));
        let (catalog, truth) = uniform_sphere_instance(n, dim, rng.random()).unwrap();
        let mut s = DesignState::new(dim, 1.0).unwrap();
        for _ in 0..rng.random_range(0..3 * n) {
            let i = rng.random_range(0..n);
            let reward = f64::from(rng.random_bool(truth.mu()[i].clamp(0.0, 1.0)));
            s.rank1_update(catalog.feature(i), Some(reward)).unwrap();
        }
        s.recompute_theta().unwrap();
        let alpha = rng.random_range(0.0..2.0);
        let mut ranks: Vec<u32> = (0..n as u32).collect();
        rand::seq::SliceRandom::shuffle(ranks.as_mut_slice(), &mut rng);
        let lazy = cons_ucb_select_ranked(&s, &catalog, alpha, k, &ranks).unwrap();
        let naive = cons_ucb_select_naive(&s, &catalog, alpha, k, &ranks).unwrap();
        if lazy.selected != naive.selected || lazy.scores != naive.scores {
            mismatches += 1;
        }
    }
    outcome(
        err <= 1e-8 && mismatches == 0,
        format!("inverse max-abs error {err:e} after 10000 updates; lazy/naive mismatches {mismatches}/100"),
    )
}

fn criterion_9(table: &SweepTable) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in [PolicyKind::SemiUcb, PolicyKind::ConsUcb] {
        let best = table.best_for(kind).unwrap();
        let cell = table.cell(kind, best.alpha).unwrap();
        let (r2, r26) = (cell.replaced_mean[1], cell.replaced_mean[25]);
        ok &= r26 <= 0.5 * r2;
        parts.push(format!("{kind} (alpha {}): period 2 {r2:.1}, period 26 {r26:.1}", best.alpha));
    }
    outcome(ok, parts.join("; "))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut lb_traces = Vec::new();
    results.push((
        "1 lower-bound reproduction",
        timed(Duration::from_secs(5), || criterion_1(&mut lb_traces)),
    ));
    results.push((
        "2 conservative diversification",
        timed(Duration::from_secs(5), || criterion_2(&mut lb_traces)),
    ));
    results.push(("3 K=1 equivalence", criterion_3()));
    results.push(("4 lemma suites", timed(Duration::from_secs(120), criterion_4)));

    let start = Instant::now();
    let table = clustered_sweep();
    let sweep_time = start.elapsed();
    let mut seven = criterion_7(&table);
    seven.passed &= sweep_time <= Duration::from_secs(600);
    seven.detail = format!("{} [{:.2}s / 600s]", seven.detail, sweep_time.as_secs_f64());

    let (lb_ok, lb_n) = potential_ok(&lb_traces.iter().collect::<Vec<_>>());
    let sweep_checks: Vec<&PotentialCheck> = table.cells.iter().flat_map(|c| &c.potential).collect();
    let sweep_ok = sweep_checks.len() == table.cells.len() * 10
        && sweep_checks.iter().all(|c| c.applicable && c.holds());
    let worst = sweep_checks
        .iter()
        .map(|c| c.lhs / c.rhs)
        .fold(0.0, f64::max);
    results.push((
        "5 potential bound",
        outcome(
            lb_ok && sweep_ok,
            format!(
                "{lb_n} lower-bound runs and {} clustered runs checked; max lhs/rhs on clustered {worst:.3}",
                sweep_checks.len()
            ),
        ),
    ));
    results.push(("6 confidence coverage", timed(Duration::from_secs(60), criterion_6)));
    results.push(("7 clustered best-alpha comparison", seven));
    results.push(("8 linear-algebra fidelity", criterion_8()));
    results.push(("9 replacement decay", criterion_9(&table)));

    let mut failed = 0;
    for (name, o) in &results {
        println!("[{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
