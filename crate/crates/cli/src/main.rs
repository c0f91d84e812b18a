//! `ctpeer` — simulate and identify continuous-time peer-effect choice
//! models described by scenario files.
//!
//! Subcommands: `validate`, `equilibrium`, `simulate`, `identify`,
//! `roundtrip`, `example2`. Every command is deterministic given the
//! scenario, seed, and flags. Output files carry a provenance header (tool
//! version, scenario hash, seed); reports are JSON, tables are CSV.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctpeer::config::ChoiceConfiguration;
use ctpeer::equilibrium::{invariant_distribution, RateMatrix};
use ctpeer::error::Error;
use ctpeer::files::{self, Provenance};
use ctpeer::identify::{
    rates_and_ccps_from_generator, recover_generator, RecoveryOptions, ThresholdPolicy,
    ThresholdPolicyOrDefault,
};
use ctpeer::model::{validate_assumptions, CcpTable, ModelSpec};
use ctpeer::report::{run_identification, IdentificationReport, PipelineSteps};
use ctpeer::scenario::Scenario;
use ctpeer::simulate::{
    emit_dataset1, emit_dataset2, estimate_ccp_dataset1, estimate_transition_matrix,
    occupation_frequencies, simulate,
};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "CTPEER_OUT";

// Exit codes; 0 is success.
const EXIT_VALIDATION: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_IO: u8 = 5;
const EXIT_TOLERANCE: u8 = 6;

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidModel(_)
        | Error::NotAPeer { .. }
        | Error::OffGridLookup { .. }
        | Error::NonPositiveRate(_)
        | Error::ProbabilityOutOfRange { .. }
        | Error::Parse { .. }
        | Error::Json(_) => EXIT_VALIDATION,
        Error::MissingCcpCells(_)
        | Error::UnvisitedRows { .. }
        | Error::InfeasibleRatio { .. }
        | Error::InsufficientContrast { .. }
        | Error::NotEnoughSizeVariation { .. }
        | Error::SizeCoverageGap { .. }
        | Error::RecursionBlocked { .. }
        | Error::TooFewSnapshots { .. }
        | Error::RatesRequired => EXIT_INFEASIBLE,
        Error::NonUniqueEquilibrium { .. }
        | Error::DegenerateClosedForm
        | Error::EmbeddingCondition(_)
        | Error::StateCapExceeded { .. }
        | Error::EnumerationTooLarge { .. } => EXIT_NUMERIC,
        Error::Io(_) => EXIT_IO,
    }
}

#[derive(Parser)]
#[command(name = "ctpeer", version, about = "Peer-effect choice model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory (default: $CTPEER_OUT or ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ScenarioArgs {
    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("out"))
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario against the model assumptions and print the report.
    Validate(ScenarioArgs),
    /// Solve for the invariant distribution and write generator/mu tables.
    Equilibrium(ScenarioArgs),
    /// Simulate a trajectory and write event and/or snapshot files.
    Simulate {
        #[command(flatten)]
        common: ScenarioArgs,
        /// RNG seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Simulation horizon T.
        #[arg(long, default_value_t = 1000.0)]
        horizon: f64,
        /// Observation scheme: 1 = event log, 2 = snapshots.
        #[arg(long, default_value_t = 1)]
        dataset: u8,
        /// Snapshot interval (Dataset 2).
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
        /// Also write the event log with latent active sets.
        #[arg(long)]
        debug_active_sets: bool,
    },
    /// Run the identification pipeline on recorded data (or exact CCPs).
    Identify {
        #[command(flatten)]
        common: ScenarioArgs,
        /// Dataset-1 event log to identify from.
        #[arg(long, conflicts_with_all = ["snapshots", "exact"])]
        events: Option<PathBuf>,
        /// Dataset-2 snapshot series to identify from.
        #[arg(long, conflicts_with = "exact")]
        snapshots: Option<PathBuf>,
        /// Identify from the scenario's exact CCPs (no data file).
        #[arg(long)]
        exact: bool,
        /// Fraction of the horizon discarded before counting.
        #[arg(long, default_value_t = 0.1)]
        burn_in: f64,
        /// Project infeasible contrast ratios into the feasible interval.
        #[arg(long)]
        project_feasible: bool,
        /// Pretend the clock rates are unknown (Dataset-2 path).
        #[arg(long)]
        without_rates: bool,
    },
    /// Ground truth -> simulate -> identify -> compare, with tolerances.
    Roundtrip {
        #[command(flatten)]
        common: ScenarioArgs,
        /// Base RNG seed; replication r uses seed + r.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Simulation horizon; default targets about 1e6 events.
        #[arg(long)]
        horizon: Option<f64>,
        /// Fraction of the horizon discarded before counting.
        #[arg(long, default_value_t = 0.1)]
        burn_in: f64,
        /// Tolerance on rule and logit-value errors.
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
        /// Tolerance on selection-kernel errors.
        #[arg(long, default_value_t = 0.02)]
        kernel_tolerance: f64,
        /// Relative tolerance on clock-rate errors.
        #[arg(long, default_value_t = 0.01)]
        rates_tolerance: f64,
        /// Number of replications (seeds seed..seed+n-1, parallel).
        #[arg(long, default_value_t = 1)]
        replications: usize,
    },
    /// Two-agent coordination analysis under the three attention regimes.
    Example2 {
        /// Rule value R(1|0, peer at 0).
        #[arg(long, default_value_t = 0.5)]
        r100: f64,
        /// Rule value R(1|0, peer at 1).
        #[arg(long, default_value_t = 0.8)]
        r101: f64,
        /// Rule value R(1|1, peer at 0).
        #[arg(long, default_value_t = 0.2)]
        r110: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load(common: &ScenarioArgs) -> Result<(Scenario, ModelSpec, PathBuf), Error> {
    let scenario = Scenario::load(&common.scenario)?;
    let model = scenario.to_model()?;
    let out = common.out_dir();
    std::fs::create_dir_all(&out)?;
    Ok((scenario, model, out))
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Validate(common) => cmd_validate(&common),
        Command::Equilibrium(common) => cmd_equilibrium(&common),
        Command::Simulate {
            common,
            seed,
            horizon,
            dataset,
            delta,
            debug_active_sets,
        } => cmd_simulate(&common, seed, horizon, dataset, delta, debug_active_sets),
        Command::Identify {
            common,
            events,
            snapshots,
            exact,
            burn_in,
            project_feasible,
            without_rates,
        } => cmd_identify(
            &common,
            events.as_deref(),
            snapshots.as_deref(),
            exact,
            burn_in,
            project_feasible,
            without_rates,
        ),
        Command::Roundtrip {
            common,
            seed,
            horizon,
            burn_in,
            tolerance,
            kernel_tolerance,
            rates_tolerance,
            replications,
        } => cmd_roundtrip(
            &common,
            seed,
            horizon,
            burn_in,
            Tolerances {
                rule: tolerance,
                kernel: kernel_tolerance,
                rates: rates_tolerance,
            },
            replications,
        ),
        Command::Example2 { r100, r101, r110 } => cmd_example2(r100, r101, r110),
    }
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

fn cmd_validate(common: &ScenarioArgs) -> Result<ExitCode, Error> {
    let scenario = Scenario::load(&common.scenario)?;
    let model = scenario.to_model()?;
    let report = validate_assumptions(&model);
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.all_pass() {
        eprintln!(
            "warning: scenario '{}' violates one or more model assumptions; \
             uniqueness and identification guarantees do not apply",
            scenario.name
        );
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// equilibrium
// ---------------------------------------------------------------------------

fn cmd_equilibrium(common: &ScenarioArgs) -> Result<ExitCode, Error> {
    let (scenario, model, out) = load(common)?;
    let prov = Provenance::new(scenario.hash(), 0, model.num_agents(), model.num_alternatives());

    let assumptions = validate_assumptions(&model);
    std::fs::write(
        out.join("assumptions.json"),
        serde_json::to_string_pretty(&assumptions)? + "\n",
    )?;
    if !assumptions.selection_interior {
        eprintln!(
            "warning: selection kernel touches the boundary; \
             equilibrium uniqueness is not guaranteed"
        );
    }

    let w = RateMatrix::build(&model)?;
    files::write_state_matrix(&out.join("generator.csv"), w.matrix(), &prov)?;
    let mu = invariant_distribution(&w)?;
    files::write_state_vector(&out.join("invariant.csv"), "mu", &mu.probs, &prov)?;

    println!("states: {}", w.num_states());
    println!("stationarity residual: {:.3e}", mu.residual(&w));
    println!("min mu: {:.6e}", mu.min());
    println!("assumptions pass: {}", assumptions.all_pass());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(
    common: &ScenarioArgs,
    seed: u64,
    horizon: f64,
    dataset: u8,
    delta: f64,
    debug_active_sets: bool,
) -> Result<ExitCode, Error> {
    let (scenario, model, out) = load(common)?;
    let shape = (model.num_agents(), model.num_alternatives());
    let initial = ChoiceConfiguration::zeros(shape.0, shape.1);
    let events = simulate(&model, horizon, &initial, seed, 0)?;
    let prov = Provenance::new(scenario.hash(), seed, shape.0, shape.1).with_horizon(horizon);

    match dataset {
        1 => {
            let observed = emit_dataset1(&events, false, shape);
            files::write_events(&out.join("events.csv"), &observed, &prov)?;
            let (_, rates) = estimate_ccp_dataset1(&observed, shape, horizon, 0.0)?;
            println!("events: {}", observed.len());
            print!("lambda-hat:");
            for r in &rates {
                print!(" {r:.4}");
            }
            println!();
        }
        2 => {
            let series = emit_dataset2(&events, delta, &initial, horizon)?;
            files::write_snapshots(
                &out.join("snapshots.csv"),
                &series,
                &prov.clone().with_delta(delta),
            )?;
            println!("events: {}", events.len());
            println!("snapshots: {}", series.configs.len());
        }
        other => {
            return Err(Error::InvalidModel(format!(
                "--dataset must be 1 or 2, got {other}"
            )))
        }
    }
    if debug_active_sets {
        files::write_events_debug(&out.join("events-debug.csv"), &events, &prov)?;
    }

    // Mixing diagnostic when the state space is small enough to solve.
    if let Ok(w) = RateMatrix::build(&model) {
        if let Ok(mu) = invariant_distribution(&w) {
            let occ = occupation_frequencies(&events, &initial, horizon, w.num_states());
            println!("tv-distance to invariant: {:.4}", mu.tv_distance(&occ));
        }
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// identify
// ---------------------------------------------------------------------------

fn roundtrip_options() -> RecoveryOptions {
    RecoveryOptions {
        thresholds: ThresholdPolicyOrDefault(ThresholdPolicy::default()),
        pool_contrasts: true,
        average_triples: true,
        project_feasible: true,
        refine: true,
        refine_logit: true,
        pool_network_configs: true,
    }
}

fn cmd_identify(
    common: &ScenarioArgs,
    events: Option<&Path>,
    snapshots: Option<&Path>,
    exact: bool,
    burn_in: f64,
    project_feasible: bool,
    without_rates: bool,
) -> Result<ExitCode, Error> {
    let (scenario, model, out) = load(common)?;
    let shape = (model.num_agents(), model.num_alternatives());
    let num_types = model.num_types();

    let mut options = RecoveryOptions::default();
    options.project_feasible = project_feasible;

    let report = if exact {
        let model = std::sync::Arc::new(model.clone());
        let ccps = CcpTable::exact(model.clone());
        let recovered =
            run_identification(&ccps, model.types(), num_types, &options, PipelineSteps::default())?;
        IdentificationReport::new(&recovered, &ccps, num_types).score_against(&model)
    } else if let Some(path) = events {
        let (observed, prov) = files::read_events(path)?;
        let horizon = prov
            .horizon
            .or_else(|| observed.last().map(|e| e.time))
            .ok_or_else(|| Error::InvalidModel("empty event log".into()))?;
        let (ccps, rates) = estimate_ccp_dataset1(&observed, shape, horizon, burn_in)?;
        let options = RecoveryOptions {
            project_feasible,
            ..roundtrip_options()
        };
        let recovered =
            run_identification(&ccps, model.types(), num_types, &options, PipelineSteps::default())?;
        IdentificationReport::new(&recovered, &ccps, num_types)
            .with_rates(rates)
            .score_against(&model)
    } else if let Some(path) = snapshots {
        if without_rates {
            return Err(Error::RatesRequired);
        }
        let (series, _) = files::read_snapshots(path)?;
        let num_states = ctpeer::config::state_count(shape.0, shape.1, 1 << 20)?;
        let kernel = estimate_transition_matrix(&series, num_states)?;
        kernel.require_complete()?;
        let recovery = recover_generator(&kernel.matrix, series.delta, shape.0, shape.1)?;
        let (ccps, flags) = rates_and_ccps_from_generator(
            &recovery.generator,
            model.rates(),
            shape.1,
            Some(&kernel.row_counts),
        )?;
        if !flags.is_empty() {
            eprintln!("warning: {} CCP cells fell outside [0,1]", flags.len());
        }
        let options = RecoveryOptions {
            project_feasible,
            ..roundtrip_options()
        };
        let recovered =
            run_identification(&ccps, model.types(), num_types, &options, PipelineSteps::default())?;
        let truth_w = RateMatrix::build(&model).ok();
        IdentificationReport::new(&recovered, &ccps, num_types)
            .with_generator(&recovery, series.delta, truth_w.as_ref().map(|w| w.matrix()))
            .score_against(&model)
    } else {
        return Err(Error::InvalidModel(
            "identify needs --events, --snapshots, or --exact".into(),
        ));
    };

    let path = out.join("report.json");
    std::fs::write(&path, report.to_json()? + "\n")?;
    if let Some(errors) = &report.errors {
        println!("network exact: {}", errors.network_exact);
        println!("kernel max abs error: {:.4}", errors.kernel_max_abs_error);
        println!("empty-rule max abs error: {:.4}", errors.empty_rule_max_abs_error);
        println!(
            "singleton-rule max abs error: {:.4}",
            errors.singleton_rule_max_abs_error
        );
        if let Some(e) = errors.full_rule_max_abs_error {
            println!("full-rule max abs error: {e:.4}");
        }
        if let Some(e) = errors.rates_max_rel_error {
            println!("rates max rel error: {e:.4}");
        }
    }
    println!("report written to {}", path.display());
    println!("scenario: {}", scenario.name);
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// roundtrip
// ---------------------------------------------------------------------------

struct Tolerances {
    rule: f64,
    kernel: f64,
    rates: f64,
}

#[derive(serde::Serialize)]
struct ReplicationSummary {
    seed: u64,
    network_exact: bool,
    kernel_max_abs_error: f64,
    empty_rule_max_abs_error: f64,
    singleton_rule_max_abs_error: f64,
    full_rule_max_abs_error: Option<f64>,
    alpha_max_abs_error: Option<f64>,
    beta_max_abs_error: Option<f64>,
    rates_max_rel_error: Option<f64>,
    pass: bool,
}

fn run_one_roundtrip(
    model: &ModelSpec,
    scenario: &Scenario,
    out: &Path,
    seed: u64,
    horizon: f64,
    burn_in: f64,
    tol: &Tolerances,
) -> Result<ReplicationSummary, Error> {
    let shape = (model.num_agents(), model.num_alternatives());
    let initial = ChoiceConfiguration::zeros(shape.0, shape.1);
    let events = simulate(model, horizon, &initial, seed, 0)?;
    let observed = emit_dataset1(&events, false, shape);
    let prov = Provenance::new(scenario.hash(), seed, shape.0, shape.1).with_horizon(horizon);
    std::fs::create_dir_all(out)?;
    files::write_events(&out.join("events.csv"), &observed, &prov)?;

    let (ccps, rates) = estimate_ccp_dataset1(&observed, shape, horizon, burn_in)?;
    let recovered = run_identification(
        &ccps,
        model.types(),
        model.num_types(),
        &roundtrip_options(),
        PipelineSteps::default(),
    )?;
    let report = IdentificationReport::new(&recovered, &ccps, model.num_types())
        .with_rates(rates)
        .score_against(model);
    std::fs::write(out.join("report.json"), report.to_json()? + "\n")?;

    let e = report.errors.as_ref().expect("scored report");
    let pass = e.network_exact
        && e.kernel_max_abs_error <= tol.kernel
        && e.empty_rule_max_abs_error <= tol.rule
        && e.singleton_rule_max_abs_error <= tol.rule
        && e.full_rule_max_abs_error.map_or(true, |x| x <= tol.rule)
        && e.rates_max_rel_error.map_or(true, |x| x <= tol.rates);
    Ok(ReplicationSummary {
        seed,
        network_exact: e.network_exact,
        kernel_max_abs_error: e.kernel_max_abs_error,
        empty_rule_max_abs_error: e.empty_rule_max_abs_error,
        singleton_rule_max_abs_error: e.singleton_rule_max_abs_error,
        full_rule_max_abs_error: e.full_rule_max_abs_error,
        alpha_max_abs_error: e.alpha_max_abs_error,
        beta_max_abs_error: e.beta_max_abs_error,
        rates_max_rel_error: e.rates_max_rel_error,
        pass,
    })
}

fn cmd_roundtrip(
    common: &ScenarioArgs,
    seed: u64,
    horizon: Option<f64>,
    burn_in: f64,
    tol: Tolerances,
    replications: usize,
) -> Result<ExitCode, Error> {
    let (scenario, model, out) = load(common)?;
    // Default horizon targets about 1e6 wake events.
    let horizon = horizon.unwrap_or(1.0e6 / model.total_rate());
    let replications = replications.max(1);

    let mut summaries: Vec<Result<ReplicationSummary, Error>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..replications)
            .map(|r| {
                let dir = if replications == 1 {
                    out.clone()
                } else {
                    out.join(format!("rep-{r}"))
                };
                let (model, scenario, tol) = (&model, &scenario, &tol);
                scope.spawn(move || {
                    run_one_roundtrip(model, scenario, &dir, seed + r as u64, horizon, burn_in, tol)
                })
            })
            .collect();
        for h in handles {
            summaries.push(h.join().expect("replication thread"));
        }
    });
    let summaries: Vec<ReplicationSummary> =
        summaries.into_iter().collect::<Result<_, Error>>()?;

    let all_pass = summaries.iter().all(|s| s.pass);
    for s in &summaries {
        println!(
            "seed {}: pass={} network={} kernel={:.4} empty={:.4} singleton={:.4} full={} rates={}",
            s.seed,
            s.pass,
            s.network_exact,
            s.kernel_max_abs_error,
            s.empty_rule_max_abs_error,
            s.singleton_rule_max_abs_error,
            s.full_rule_max_abs_error
                .map_or("-".into(), |x| format!("{x:.4}")),
            s.rates_max_rel_error
                .map_or("-".into(), |x| format!("{x:.4}")),
        );
    }
    if replications > 1 {
        let mean = |f: fn(&ReplicationSummary) -> f64| {
            summaries.iter().map(f).sum::<f64>() / summaries.len() as f64
        };
        let max = |f: fn(&ReplicationSummary) -> f64| {
            summaries.iter().map(f).fold(f64::NEG_INFINITY, f64::max)
        };
        let k: fn(&ReplicationSummary) -> f64 = |s| s.kernel_max_abs_error;
        let fr: fn(&ReplicationSummary) -> f64 =
            |s| s.full_rule_max_abs_error.unwrap_or(f64::NAN);
        println!("kernel error mean={:.4} max={:.4}", mean(k), max(k));
        println!("full-rule error mean={:.4} max={:.4}", mean(fr), max(fr));
    }

    let summary = serde_json::json!({
        "scenario": scenario.name,
        "horizon": horizon,
        "burn_in": burn_in,
        "tolerances": {
            "rule": tol.rule,
            "kernel": tol.kernel,
            "rates": tol.rates,
        },
        "replications": summaries,
        "all_pass": all_pass,
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;

    if all_pass {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("roundtrip failed configured tolerances");
        Ok(ExitCode::from(EXIT_TOLERANCE))
    }
}

// ---------------------------------------------------------------------------
// example2
// ---------------------------------------------------------------------------

fn cmd_example2(r100: f64, r101: f64, r110: f64) -> Result<ExitCode, Error> {
    for (value, name) in [(r100, "r100"), (r101, "r101"), (r110, "r110")] {
        if !(0.0 < value && value < 1.0) {
            return Err(Error::ProbabilityOutOfRange {
                value,
                context: name.into(),
            });
        }
    }
    let probs = ctpeer::equilibrium::coordination_analysis(r100, r101, r110);
    println!("Pr_std  = {:.6}", probs.pr_std);
    println!("Pr_same = {:.6}", probs.pr_same);
    println!("Pr_diff = {:.6}", probs.pr_diff);

    let mut orderings = BTreeMap::new();
    orderings.insert("std > same", probs.pr_std > probs.pr_same);
    orderings.insert("same > diff", probs.pr_same > probs.pr_diff);
    orderings.insert("diff > std", probs.pr_diff > probs.pr_std);
    for (name, holds) in &orderings {
        println!("{name}: {holds}");
    }
    if probs.pr_std > probs.pr_same && probs.pr_same > probs.pr_diff {
        println!("ordering: positive peer effect (std > same > diff)");
    } else if probs.pr_same > probs.pr_diff && probs.pr_diff > probs.pr_std {
        println!("ordering: negative peer effect (same > diff > std)");
    } else {
        println!("ordering: mixed");
    }
    Ok(ExitCode::SUCCESS)
}
