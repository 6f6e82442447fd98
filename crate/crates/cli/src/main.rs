mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, LevelFilter};
use serde::Serialize;

use semibandit::harness::{alpha_sweep, run_experiment, Experiment, ExperimentPlan};
use semibandit::instances::{build_instance, save_catalog, InstanceKind};
use semibandit::lemmas::{
    check_key0, check_key1, check_main_lemma, check_potential_bound, LemmaTrial, PotentialCheck,
    SuiteSummary,
};
use semibandit::{run_policy, InstanceSpec, PolicyConfig, PolicyKind, TieBreak};

use config::RunConfig;

const EXIT_ERROR: u8 = 1;
const EXIT_VIOLATION: u8 = 2;
const THREADS_ENV: &str = "SEMIBANDIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "semibandit", version, about = "Batch product selection under linear semi-bandit feedback")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run replicated experiments and write per-period CSVs.
    Simulate(RunArgs),
    /// Repeat an experiment over several alpha values.
    Sweep(RunArgs),
    /// Run both UCB policies on the adversarial grouped instance.
    Lowerbound(RunArgs),
    /// Check the supporting inequalities on random inputs.
    VerifyLemmas(LemmaArgs),
    /// Generate an instance and write it as a catalog CSV.
    GenInstance(GenArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    instance: Option<InstanceKind>,
    /// Number of products N.
    #[arg(long = "n")]
    n_products: Option<usize>,
    /// Feature dimension d.
    #[arg(long = "d")]
    dim: Option<usize>,
    /// Products offered per period K.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    instance_seed: Option<u64>,
    /// Catalog CSV for `--instance from_file`.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Horizon T.
    #[arg(long = "t")]
    horizon: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Comma-separated: semi, cons, oracle, random.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<PolicyKind>>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated alpha values for `sweep`.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// SemiUCB regularizer omega.
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    tie_break: Option<TieBreak>,
    /// Base seed for reward streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn flags(&self) -> RunConfig {
        RunConfig {
            instance: self.instance,
            n_products: self.n_products,
            dim: self.dim,
            k: self.k,
            cluster_count: self.clusters,
            cluster_spread: self.spread,
            instance_seed: self.instance_seed,
            catalog: self.catalog.clone(),
            horizon: self.horizon,
            replicates: self.replicates,
            policies: self.policies.clone(),
            alpha: self.alpha,
            alphas: self.alphas.clone(),
            regularizer: self.omega,
            tie_break: self.tie_break,
            seed: self.seed,
            output: self.out.clone(),
        }
    }

    fn resolve(&self, defaults: &RunConfig) -> Result<RunConfig, String> {
        let file = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        Ok(file.overlay(&self.flags()).with_defaults(defaults))
    }
}

#[derive(Args, Debug)]
struct LemmaArgs {
    /// Trials per suite.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,5,10,50")]
    dims: Vec<usize>,
    /// Update counts for the multi-update suite.
    #[arg(long = "l-updates", value_delimiter = ',', default_value = "1,5,20")]
    l_updates: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `lemmas.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reverse every inequality to exercise the failure path.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Catalog CSV to write.
    #[arg(long = "file")]
    file: PathBuf,
    /// Leave out the mu column.
    #[arg(long)]
    no_mu: bool,
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        LevelFilter::Error
    } else {
        match cli.verbose {
            0 => LevelFilter::Warn,
            1 => LevelFilter::Info,
            2 => LevelFilter::Debug,
            _ => LevelFilter::Trace,
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli);
    let result = init_threads().and_then(|_| match &cli.command {
        Command::Simulate(args) => cmd_simulate(args, &RunConfig::simulate_defaults()),
        Command::Lowerbound(args) => cmd_lowerbound(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::VerifyLemmas(args) => cmd_verify_lemmas(args),
        Command::GenInstance(args) => cmd_gen_instance(args),
    });
    match result {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, String> {
    cfg.output
        .clone()
        .ok_or_else(|| "config field 'output' is not set".to_string())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}

#[derive(Serialize)]
struct PolicySummary {
    policy: PolicyKind,
    alpha: f64,
    final_cum_regret_mean: f64,
    final_cum_regret_std: f64,
    potential_bound_holds: Option<bool>,
}

fn summarize(exp: &Experiment) -> Vec<PolicySummary> {
    exp.series
        .per_policy
        .iter()
        .map(|ps| PolicySummary {
            policy: ps.config.kind,
            alpha: ps.config.alpha,
            final_cum_regret_mean: ps.cum_regret.last_mean(),
            final_cum_regret_std: *ps.cum_regret.std.last().expect("horizon >= 1"),
            potential_bound_holds: (!ps.potential.is_empty())
                .then(|| ps.potential.iter().all(PotentialCheck::holds)),
        })
        .collect()
}

fn run_plan(cfg: &RunConfig) -> Result<(ExperimentPlan, Experiment, PathBuf), String> {
    let plan = cfg.plan()?;
    let dir = output_dir(cfg)?;
    cfg.echo(&dir)?;
    info!("writing results to {}", dir.display());
    let exp = run_experiment(&plan).map_err(|e| e.to_string())?;
    Ok((plan, exp, dir))
}

fn cmd_simulate(args: &RunArgs, defaults: &RunConfig) -> Result<ExitCode, String> {
    let cfg = args.resolve(defaults)?;
    let (_, exp, dir) = run_plan(&cfg)?;
    let summary = summarize(&exp);
    for s in &summary {
        println!(
            "{} alpha={}: final cumulative regret {:.4} ± {:.4}",
            s.policy, s.alpha, s.final_cum_regret_mean, s.final_cum_regret_std
        );
    }
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_lowerbound(args: &RunArgs) -> Result<ExitCode, String> {
    let cfg = args.resolve(&RunConfig::lowerbound_defaults())?;
    if cfg.instance != Some(InstanceKind::LowerBound) {
        return Err("lowerbound runs only on the lower_bound instance".into());
    }
    let (plan, exp, dir) = run_plan(&cfg)?;
    let d = plan.instance.dim;
    let k = plan.instance.k_select;
    let periods = plan.horizon.min(d - 1);
    let reference = (periods * k) as f64 * (0.5 + 1.0 / (2 * d) as f64);
    println!("d={d}, K={k}: SemiUCB regret through period {periods} is at least {reference}");
    for ps in &exp.series.per_policy {
        println!(
            "{} alpha={}: cumulative regret at period {periods} = {}",
            ps.config.kind,
            ps.config.alpha,
            ps.cum_regret.mean[periods.max(1) - 1]
        );
    }
    write_json(&dir.join("summary.json"), &summarize(&exp))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: &RunArgs) -> Result<ExitCode, String> {
    let cfg = args.resolve(&RunConfig::simulate_defaults())?;
    let plan = cfg.plan()?;
    let alphas = cfg.alphas.clone().unwrap_or_default();
    let dir = output_dir(&cfg)?;
    cfg.echo(&dir)?;
    let table = alpha_sweep(&plan, &alphas).map_err(|e| e.to_string())?;
    table
        .write_csv(&dir.join("sweep.csv"))
        .map_err(|e| e.to_string())?;
    for c in &table.cells {
        println!(
            "{} alpha={}: final cumulative regret {:.4} ± {:.4}",
            c.policy, c.alpha, c.final_cum_regret_mean, c.final_cum_regret_std
        );
    }
    for b in &table.best {
        let pct = b
            .improvement_pct
            .map_or_else(|| "n/a".to_string(), |p| format!("{p:.2}%"));
        println!("best {}: alpha={} regret {:.4} improvement {pct}", b.policy, b.alpha, b.regret);
    }
    write_json(&dir.join("summary.json"), &table.best)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct LemmaReport {
    slack: f64,
    suites: Vec<SuiteSummary>,
    potential: Vec<PotentialCheck>,
}

fn potential_runs(seed: u64) -> Result<Vec<PotentialCheck>, String> {
    let specs = [
        (InstanceSpec::lower_bound(2, 2), 3),
        (InstanceSpec::lower_bound(10, 100), 26),
        (InstanceSpec::uniform_sphere(200, 10, 20, seed), 26),
        (InstanceSpec::clustered(500, 10, 50, 4, 0.05, seed), 26),
    ];
    let mut checks = Vec::new();
    for (spec, horizon) in specs {
        let (catalog, truth) = build_instance(&spec).map_err(|e| e.to_string())?;
        for kind in [PolicyKind::SemiUcb, PolicyKind::ConsUcb] {
            let config = PolicyConfig::new(kind, spec.k_select, 1.0);
            let trace = run_policy(&config, &catalog, &truth, horizon, seed).map_err(|e| e.to_string())?;
            checks.push(check_potential_bound(&trace).map_err(|e| e.to_string())?);
        }
    }
    Ok(checks)
}

fn cmd_verify_lemmas(args: &LemmaArgs) -> Result<ExitCode, String> {
    if args.trials == 0 {
        return Err("--trials must be at least 1".into());
    }
    let adjust = |trials: Vec<LemmaTrial>| -> Vec<LemmaTrial> {
        if args.inject_fault {
            trials.iter().map(LemmaTrial::flipped).collect()
        } else {
            trials
        }
    };
    let mut suites = Vec::new();
    for &dim in &args.dims {
        let key0 = check_key0(dim, args.trials, args.seed).map_err(|e| e.to_string())?;
        suites.push(SuiteSummary::from_trials("key0", dim, None, &adjust(key0)));
        let key1 = check_key1(dim, args.trials, args.seed).map_err(|e| e.to_string())?;
        suites.push(SuiteSummary::from_trials("key1", dim, Some(1), &adjust(key1)));
        for &l in &args.l_updates {
            let main = check_main_lemma(dim, l, args.trials, args.seed).map_err(|e| e.to_string())?;
            suites.push(SuiteSummary::from_trials("main", dim, Some(l), &adjust(main)));
        }
    }
    let mut potential = potential_runs(args.seed)?;
    if args.inject_fault {
        for p in &mut potential {
            std::mem::swap(&mut p.lhs, &mut p.rhs);
        }
    }

    let mut violated = false;
    for s in &suites {
        let l = s.l_updates.map_or_else(String::new, |l| format!(" L={l}"));
        let seed = s.worst_seed.map_or_else(String::new, |w| format!(", worst seed {w}"));
        println!(
            "{} d={}{l}: {} trials, {} violations, min margin {:e}{seed}",
            s.lemma, s.dim, s.trials, s.violations, s.min_margin
        );
        violated |= !s.passed();
    }
    let failed_potential = potential.iter().filter(|p| !p.holds()).count();
    let min_gap = potential
        .iter()
        .filter(|p| p.applicable)
        .map(|p| p.rhs - p.lhs)
        .fold(f64::INFINITY, f64::min);
    println!(
        "potential: {} runs, {failed_potential} violations, min margin {min_gap:e}",
        potential.len()
    );
    violated |= failed_potential > 0;

    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let report = LemmaReport {
            slack: semibandit::lemmas::SLACK,
            suites,
            potential,
        };
        write_json(&dir.join("lemmas.json"), &report)?;
    }
    if violated {
        eprintln!("lemma violation detected; rerun with the worst seed printed above");
        Ok(ExitCode::from(EXIT_VIOLATION))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}

fn cmd_gen_instance(args: &GenArgs) -> Result<ExitCode, String> {
    let cfg = args.run.resolve(&RunConfig::simulate_defaults())?;
    let spec = cfg.instance_spec()?;
    let (catalog, truth) = build_instance(&spec).map_err(|e| e.to_string())?;
    let truth = (!args.no_mu).then_some(&truth);
    save_catalog(&args.file, &catalog, truth).map_err(|e| e.to_string())?;
    println!(
        "wrote {} products (d={}) to {}",
        catalog.n_products(),
        catalog.dim(),
        args.file.display()
    );
    Ok(ExitCode::SUCCESS)
}
