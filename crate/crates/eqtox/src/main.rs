//! Command-line front end: fit models, run equivalence tests, and reproduce
//! the simulation study.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use eqtox::bootstrap::{test_bivariate, test_univ, TestConfig};
use eqtox::error::EqtoxError;
use eqtox::estimation::{fit_mle_gumbel, fit_mle_univ};
use eqtox::io::{emit_curve_table, emit_report, make_document, parse_subject_csv};
use eqtox::model::{dose_grid, CountTable, Link};
use eqtox::sim::{builtin_scenarios, run_scenario, write_results_csv, FULL_N_BOOT, FULL_N_SIMS};

#[derive(Parser)]
#[command(name = "eqtox", version, about = "Equivalence tests for binary dose-response curves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum LinkArg {
    Logit,
    Probit,
}

impl From<LinkArg> for Link {
    fn from(l: LinkArg) -> Link {
        match l {
            LinkArg::Logit => Link::Logistic,
            LinkArg::Probit => Link::Probit,
        }
    }
}

#[derive(Args)]
struct TestArgs {
    /// Input CSV (subject-level or aggregated counts).
    #[arg(long)]
    data: PathBuf,
    /// Equivalence margin: X for univariate, X,Y for bivariate.
    #[arg(long)]
    epsilon: String,
    /// Test level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Number of bootstrap replications per endpoint.
    #[arg(long, default_value_t = 400)]
    n_boot: usize,
    /// RNG seed; identical seeds reproduce results exactly.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Marginal link function.
    #[arg(long, value_enum, default_value_t = LinkArg::Logit)]
    link: LinkArg,
    /// Number of grid nodes for the maximum-deviation search.
    #[arg(long, default_value_t = 201)]
    grid: usize,
    /// Dose range LO,HI over which curves are compared (default: data range).
    #[arg(long)]
    range: Option<String>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a plot-ready CSV of fitted curves to this path.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit marginal (and, for bivariate data, Gumbel) models to each group.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = LinkArg::Logit)]
        link: LinkArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Univariate equivalence test for one binary endpoint.
    TestUniv(TestArgs),
    /// Bivariate intersection-union test for efficacy and toxicity.
    TestBivar(TestArgs),
    /// Run the built-in simulation study (or a subset of its scenarios).
    Simulate {
        /// Scenario ids to run (default: all). See `eqtox scenarios`.
        #[arg(long)]
        scenario: Vec<String>,
        /// Use full study effort instead of the quicker default.
        #[arg(long)]
        full_effort: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Output CSV path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in simulation scenarios.
    Scenarios,
}

fn parse_epsilon(s: &str, bivariate: bool) -> Result<(f64, Option<f64>), EqtoxError> {
    let parts: Vec<&str> = s.split(',').collect();
    let bad = || EqtoxError::invalid("--epsilon", format!("cannot parse {s:?}"));
    match (parts.as_slice(), bivariate) {
        ([e], false) => Ok((e.trim().parse().map_err(|_| bad())?, None)),
        ([e, t], true) => Ok((
            e.trim().parse().map_err(|_| bad())?,
            Some(t.trim().parse().map_err(|_| bad())?),
        )),
        (_, false) => Err(EqtoxError::invalid(
            "--epsilon",
            "univariate test takes a single margin",
        )),
        (_, true) => Err(EqtoxError::invalid(
            "--epsilon",
            "bivariate test takes two margins as X,Y",
        )),
    }
}

fn parse_range(s: &str) -> Result<(f64, f64), EqtoxError> {
    let bad = || EqtoxError::invalid("--range", format!("expected LO,HI, got {s:?}"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo < hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

/// Rebuild a table with the comparison range overridden.
fn with_range(table: &CountTable, range: (f64, f64)) -> Result<CountTable, EqtoxError> {
    use eqtox::model::DoseDesign;
    let design = DoseDesign::new(
        table.design().doses().to_vec(),
        table.design().sizes().to_vec(),
        range,
    )?;
    match (table.successes(), table.cells()) {
        (Some(z), _) => CountTable::univariate(design, z.to_vec()),
        (_, Some(c)) => CountTable::bivariate(design, c.to_vec()),
        _ => unreachable!("count table is univariate or bivariate"),
    }
}

fn install_pool(workers: Option<usize>) -> Result<(), EqtoxError> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(EqtoxError::invalid("--workers", "must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| EqtoxError::invalid("--workers", e.to_string()))?;
    }
    Ok(())
}

fn run_test(args: &TestArgs, bivariate: bool) -> Result<(), EqtoxError> {
    install_pool(args.workers)?;
    let (eps_e, eps_t) = parse_epsilon(&args.epsilon, bivariate)?;
    let (mut a, mut b) = parse_subject_csv(&args.data)?;
    if let Some(range) = &args.range {
        let range = parse_range(range)?;
        a = with_range(&a, range)?;
        b = with_range(&b, range)?;
    }

    let mut config = if bivariate {
        TestConfig::bivariate((eps_e, eps_t.unwrap()), args.alpha, args.n_boot, args.seed)
    } else {
        TestConfig::univariate(eps_e, args.alpha, args.n_boot, args.seed)
    };
    config.grid_points = args.grid;
    config.link = args.link.into();
    config.validate()?;

    let report = if bivariate {
        if a.cells().is_none() {
            return Err(EqtoxError::invalid(
                "--data",
                "bivariate test needs joint efficacy-toxicity counts",
            ));
        }
        test_bivariate(&a, &b, &config)?
    } else {
        let collapse = |t: &CountTable| t.collapse(eqtox::model::Endpoint::Efficacy).unwrap_or_else(|| t.clone());
        test_univ(&collapse(&a), &collapse(&b), &config)?
    };

    if let Some(curves) = &args.curves {
        let lo = a.design().range().0.min(b.design().range().0);
        let hi = a.design().range().1.max(b.design().range().1);
        let grid = dose_grid((lo, hi), config.grid_points);
        emit_curve_table(&report.fits, &grid, curves)?;
    }

    let doc = make_document(&config, &report);
    match &args.out {
        Some(path) => emit_report(&doc, path)?,
        None => println!("{}", serde_json::to_string_pretty(&doc).expect("report serializes")),
    }

    let verdict = |r: bool| if r { "reject (equivalence shown)" } else { "fail to reject" };
    eprintln!(
        "efficacy: d = {:.4}, p = {:.4}, {}",
        report.efficacy.statistic,
        report.efficacy.p_value,
        verdict(report.efficacy.reject)
    );
    if let Some(tox) = &report.toxicity {
        eprintln!(
            "toxicity: d = {:.4}, p = {:.4}, {}",
            tox.statistic,
            tox.p_value,
            verdict(tox.reject)
        );
        eprintln!("global: {}", verdict(report.reject_global));
    }
    Ok(())
}

fn run_fit(data: &PathBuf, link: Link, out: Option<&PathBuf>) -> Result<(), EqtoxError> {
    let (a, b) = parse_subject_csv(data)?;
    let fits = if a.cells().is_some() {
        let fa = fit_mle_gumbel(&a)?;
        let fb = fit_mle_gumbel(&b)?;
        serde_json::json!({
            "model": "gumbel",
            "reference": { "params": fa.params, "loglik": fa.loglik, "converged": fa.converged },
            "test": { "params": fb.params, "loglik": fb.loglik, "converged": fb.converged },
        })
    } else {
        let fa = fit_mle_univ(&a, link)?;
        let fb = fit_mle_univ(&b, link)?;
        serde_json::json!({
            "model": "marginal",
            "reference": { "params": fa.params, "loglik": fa.loglik, "converged": fa.converged,
                           "separation": fa.separation },
            "test": { "params": fb.params, "loglik": fb.loglik, "converged": fb.converged,
                      "separation": fb.separation },
        })
    };
    let text = serde_json::to_string_pretty(&fits).expect("fit serializes");
    match out {
        Some(path) => std::fs::write(path, text + "\n").map_err(|e| EqtoxError::Io {
            path: path.display().to_string(),
            source: e,
        })?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run_simulate(
    ids: &[String],
    full_effort: bool,
    seed: Option<u64>,
    workers: Option<usize>,
    out: Option<&PathBuf>,
) -> Result<(), EqtoxError> {
    install_pool(workers)?;
    let mut specs = builtin_scenarios();
    if !ids.is_empty() {
        let known: Vec<String> = specs.iter().map(|s| s.id.clone()).collect();
        for id in ids {
            if !known.contains(id) {
                return Err(EqtoxError::invalid(
                    "--scenario",
                    format!("unknown id {id:?}; run `eqtox scenarios` for the list"),
                ));
            }
        }
        specs.retain(|s| ids.contains(&s.id));
    }
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut spec = if full_effort {
            spec.with_effort(FULL_N_SIMS, FULL_N_BOOT)
        } else {
            spec
        };
        if let Some(seed) = seed {
            spec = spec.with_seed(seed);
        }
        eprintln!("running {} ({} sims x {} boot)...", spec.id, spec.n_sims, spec.n_boot);
        let oc = run_scenario(&spec)?;
        eprintln!(
            "  rate = {:.4} (stderr {:.4}), {:.1}s",
            oc.rejection_rate_global, oc.mc_stderr, oc.runtime_secs
        );
        rows.push((spec, oc));
    }
    match out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| EqtoxError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            write_results_csv(file, &rows).map_err(|e| EqtoxError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        None => write_results_csv(std::io::stdout().lock(), &rows).map_err(|e| EqtoxError::Io {
            path: "<stdout>".into(),
            source: e,
        })?,
    }
    Ok(())
}

fn run_scenarios_list() {
    println!("{:<24} {:>6} {:>8} {:>8}  hypothesis", "id", "nu", "eps_e", "eps_t");
    for spec in builtin_scenarios() {
        let nu = match &spec.truth {
            eqtox::sim::Truth::Bivariate { a, .. } => format!("{}", a.nu),
            eqtox::sim::Truth::Univariate { .. } => "-".into(),
        };
        println!(
            "{:<24} {:>6} {:>8} {:>8}  {:?}",
            spec.id,
            nu,
            spec.epsilon_eff,
            spec.epsilon_tox.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
            spec.hypothesis,
        );
    }
}

fn exit_code_for(err: &EqtoxError) -> u8 {
    match err {
        EqtoxError::Invalid { .. } => 2,
        EqtoxError::MalformedRow { .. }
        | EqtoxError::MixedSchema
        | EqtoxError::EmptyGroup { .. }
        | EqtoxError::Io { .. }
        | EqtoxError::Csv { .. }
        | EqtoxError::Json { .. } => 3,
        EqtoxError::Feasibility { .. }
        | EqtoxError::InfeasibleCorrelation { .. }
        | EqtoxError::NonConvergence { .. }
        | EqtoxError::ConstraintInfeasible { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit { data, link, out } => run_fit(data, (*link).into(), out.as_ref()),
        Command::TestUniv(args) => run_test(args, false),
        Command::TestBivar(args) => run_test(args, true),
        Command::Simulate { scenario, full_effort, seed, workers, out } => {
            run_simulate(scenario, *full_effort, *seed, *workers, out.as_ref())
        }
        Command::Scenarios => {
            run_scenarios_list();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
