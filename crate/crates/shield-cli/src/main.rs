//! Command-line surface for the screening pipeline: solve single instances,
//! run guarded screen-and-solve steps, simulate closed loops, sweep parameter
//! grids, collect training data, and train predictors.
//!
//! Exit codes: 0 success (optimal where applicable), 1 parse/configuration
//! error, 2 infeasible problem, 3 numerical failure or iteration cap.
//!
//! All result records round their numbers to 12 significant digits so that
//! reruns with identical inputs diff cleanly; `--deterministic` additionally
//! zeroes wall-clock timing fields, making outputs byte-identical across
//! runs. The `SHIELD_THREADS` environment variable caps worker parallelism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use shield::dual::DualObjective;
use shield::mpc::{
    self, generate_scenario, PolicyLayout, RunRecord, Scenario, SimParams, StepRecord,
};
use shield::predictor::{self, PredictorModel, TrainConfig};
use shield::problem::RegularizedProgram;
use shield::screening::{self, ShieldConfig};
use shield::solver::{self, SolveStatus};
use shield::Error;

#[derive(Parser)]
#[command(
    name = "shield",
    about = "Safe screening for l1-regularized quadratic programs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance file and print a result record.
    Solve(SolveArgs),
    /// Run one guarded screen-and-solve step on an instance file.
    Shield(ShieldArgs),
    /// Run closed-loop simulations from a config file.
    Simulate(SimulateArgs),
    /// Sweep an (epsilon, lambda) grid over scenario seeds.
    Sweep(SweepArgs),
    /// Collect labeled training samples from scenario rollouts.
    Collect(CollectArgs),
    /// Train a logistic predictor from collected samples.
    Train(TrainArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Instance file (shield-v1 document).
    instance: PathBuf,
    /// Solve the margin-tightened variant instead of the problem as stored.
    #[arg(long)]
    reduced: bool,
    /// Also compute the exact dual of the tightened problem and its
    /// certificate radius.
    #[arg(long)]
    dual: bool,
    /// Report stationarity/feasibility residuals for both the tightened and
    /// the original problem.
    #[arg(long)]
    kkt_report: bool,
    #[command(flatten)]
    overrides: Overrides,
    /// Zero timing fields so identical inputs give byte-identical output.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct ShieldArgs {
    /// Instance file (shield-v1 document).
    instance: PathBuf,
    /// Predictor model file.
    #[arg(long)]
    model: PathBuf,
    /// Fail (exit 1) if the model's tightening margin differs from the
    /// instance's instead of only warning.
    #[arg(long)]
    zeta_check: bool,
    /// Screen on the certificate alone, ignoring the class conjunct.
    #[arg(long)]
    certificate_only: bool,
    #[command(flatten)]
    overrides: Overrides,
    /// Zero timing fields so identical inputs give byte-identical output.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config file (params, seeds, policy, model).
    #[arg(long)]
    config: PathBuf,
    /// Write the per-run summary here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one record per step to this file.
    #[arg(long)]
    steps_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Override the config's policy.
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    /// Override the config's model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: Overrides,
    /// Zero timing fields so identical inputs give byte-identical output.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep config file (params, seeds, epsilons, lambdas, model).
    #[arg(long)]
    config: PathBuf,
    /// Write the grid table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Zero timing fields so identical inputs give byte-identical output.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct CollectArgs {
    /// Collection config file (params, seeds).
    #[arg(long)]
    config: PathBuf,
    /// Output path for the samples (one record per line).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Optional training config file; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input samples (one record per line).
    #[arg(long)]
    samples: PathBuf,
    /// Output path for the trained model file.
    #[arg(long)]
    out: PathBuf,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Per-instance parameter overrides shared by several subcommands.
#[derive(Args)]
struct Overrides {
    /// Override the screening tolerance epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Override the tightening margin zeta.
    #[arg(long)]
    zeta: Option<f64>,
    /// Override the regularization weight lambda.
    #[arg(long)]
    lambda: Option<f64>,
}

impl Overrides {
    fn any(&self) -> bool {
        self.epsilon.is_some() || self.zeta.is_some() || self.lambda.is_some()
    }

    /// Rebuilds the program with the overridden parameters.
    fn apply(&self, program: &RegularizedProgram) -> Result<RegularizedProgram, Error> {
        if !self.any() {
            return Ok(program.clone());
        }
        let mut rebuilt = RegularizedProgram::new(
            program.quadratic().clone(),
            program.linear().clone(),
            program.screenable().clone(),
            program.immutable().clone(),
            program.equality().clone(),
            program.s_rows().to_vec(),
            self.lambda.unwrap_or(program.lambda()),
            self.zeta.unwrap_or(program.zeta()),
            self.epsilon.unwrap_or(program.epsilon()),
        )?;
        rebuilt.set_feature(program.feature().cloned());
        Ok(rebuilt)
    }

    fn apply_params(&self, params: &mut SimParams) {
        if let Some(e) = self.epsilon {
            params.epsilon = e;
        }
        if let Some(z) = self.zeta {
            params.zeta = z;
        }
        if let Some(l) = self.lambda {
            params.lambda = l;
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    JsonLines,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize, Debug, Default)]
#[serde(rename_all = "snake_case")]
enum PolicyKind {
    #[default]
    Full,
    Reduced,
    CertificateOnly,
}

/// A command failure carrying its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure {
            code: 1,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Parse { .. } | Error::Dimension(_) | Error::LayoutMismatch(_) => 1,
            Error::Infeasible(_) => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    if let Ok(raw) = std::env::var("SHIELD_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: SHIELD_THREADS must be a positive integer, got {raw:?}");
                return ExitCode::from(1);
            }
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Shield(args) => cmd_shield(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Collect(args) => cmd_collect(args),
        Command::Train(args) => cmd_train(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

// ---------------------------------------------------------------------------
// Numeric formatting: 12 significant digits everywhere.

fn round12(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().expect("rounded float reparses")
}

fn sig12(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.11e}")
    } else {
        format!("{x}")
    }
}

fn vec_json(values: impl IntoIterator<Item = f64>) -> serde_json::Value {
    serde_json::Value::Array(
        values
            .into_iter()
            .map(|v| json!(round12(v)))
            .collect::<Vec<_>>(),
    )
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn write_output(path: Option<&PathBuf>, content: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, content).map_err(|e| Failure::io(p, e)),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// solve

fn cmd_solve(args: SolveArgs) -> Result<u8, Failure> {
    let text = read_file(&args.instance)?;
    let program = RegularizedProgram::from_json_str(&text)?;
    let program = args.overrides.apply(&program)?;

    let solution = if args.reduced {
        solver::solve(&program, None)?
    } else {
        solver::solve_original(&program, None)?
    };

    let kkt = solution.dual.as_ref().map(|dual| {
        if args.reduced {
            solver::kkt_residual(&program, &solution.theta, &solution.s, dual)
        } else {
            solver::kkt_residual_original(&program, &solution.theta, &solution.s, dual)
        }
    });

    let mut record = json!({
        "command": "solve",
        "variant": if args.reduced { "tightened" } else { "original" },
        "status": status_name(solution.status),
        "objective": round12(solution.objective),
        "theta": vec_json(solution.theta.iter().copied()),
        "s": vec_json(solution.s.iter().copied()),
        "iterations": solution.iterations,
        "polished": solution.polished,
        "kkt_residual": kkt.map(round12),
        "solve_seconds": if args.deterministic { 0.0 } else { round12(solution.solve_seconds) },
    });

    if args.kkt_report {
        if let Some(dual) = &solution.dual {
            record["kkt_tightened"] = json!(round12(solver::kkt_residual(
                &program,
                &solution.theta,
                &solution.s,
                dual
            )));
            record["kkt_original"] = json!(round12(solver::kkt_residual_original(
                &program,
                &solution.theta,
                &solution.s,
                dual
            )));
        }
    }

    if args.dual {
        let exact = predictor::exact_dual(&program)?;
        let objective = DualObjective::new(&program)?;
        let gap = objective.gap(&exact)?;
        record["dual"] = json!({
            "mu": vec_json(exact.mu.iter().copied()),
            "eta": vec_json(exact.eta.iter().copied()),
            "nu": vec_json(exact.nu.iter().copied()),
            "g": vec_json(exact.g.iter().copied()),
            "value": round12(objective.value(&exact)?),
            "gap": round12(gap),
        });
    }

    println!("{}", serde_json::to_string_pretty(&record).expect("record"));
    Ok(match solution.status {
        SolveStatus::Optimal => 0,
        SolveStatus::IterationCap => 3,
    })
}

fn status_name(status: SolveStatus) -> &'static str {
    match status {
        SolveStatus::Optimal => "optimal",
        SolveStatus::IterationCap => "iteration_cap",
    }
}

// ---------------------------------------------------------------------------
// shield

fn cmd_shield(args: ShieldArgs) -> Result<u8, Failure> {
    let text = read_file(&args.instance)?;
    let program = RegularizedProgram::from_json_str(&text)?;
    let program = args.overrides.apply(&program)?;
    let model = PredictorModel::from_json_str(&read_file(&args.model)?)?;

    if args.zeta_check && (model.zeta() - program.zeta()).abs() > 1e-12 {
        return Err(Failure::config(format!(
            "model tightening margin {} does not match the instance's {}",
            model.zeta(),
            program.zeta()
        )));
    }

    let config = ShieldConfig {
        certificate_only: args.certificate_only,
        ..ShieldConfig::default()
    };
    let outcome = screening::shield_step(&program, &model, &config, None)?;

    let timings = if args.deterministic {
        json!({ "classifier": 0.0, "dual_approx": 0.0, "reduced_solve": 0.0, "total": 0.0 })
    } else {
        json!({
            "classifier": round12(outcome.timings.classifier),
            "dual_approx": round12(outcome.timings.dual_approx),
            "reduced_solve": round12(outcome.timings.reduced_solve),
            "total": round12(outcome.timings.total),
        })
    };
    let record = json!({
        "command": "shield",
        "epsilon": round12(program.epsilon()),
        "epsilon_crit": round12(program.epsilon_crit()),
        "screen": {
            "variables": outcome.screen.variables,
            "constraints": outcome.screen.constraints,
            "gap": round12(outcome.screen.gap),
            "epsilon_flagged": outcome.screen.epsilon_flagged,
        },
        "class": {
            "mu_active": outcome.class.mu_active.iter().filter(|&&b| b).count(),
            "g_saturated": outcome.class.g_saturated.iter().filter(|&&b| b).count(),
        },
        "fallback": outcome.fallback,
        "ls_fallback": outcome.ls_fallback,
        "timings": timings,
        "solution": {
            "status": status_name(outcome.solution.status),
            "objective": round12(outcome.solution.objective),
            "theta": vec_json(outcome.solution.theta.iter().copied()),
        },
    });
    println!("{}", serde_json::to_string_pretty(&record).expect("record"));
    Ok(0)
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    #[serde(default)]
    params: SimParams,
    seeds: Vec<u64>,
    #[serde(default)]
    policy: PolicyKind,
    #[serde(default)]
    model: Option<PathBuf>,
}

fn load_model_or_all_active(
    model_path: Option<&PathBuf>,
    params: &SimParams,
) -> Result<PredictorModel, Failure> {
    match model_path {
        Some(path) => Ok(PredictorModel::from_json_str(&read_file(path)?)?),
        None => {
            let bits = PolicyLayout {
                horizon: params.horizon,
                agents: params.agents,
                modes: params.modes,
            }
            .gain_count();
            Ok(PredictorModel::AllActive {
                mu_bits: bits,
                g_bits: bits,
                zeta: params.zeta,
            })
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<u8, Failure> {
    let mut config: SimulateConfig = serde_json::from_str(&read_file(&args.config)?)
        .map_err(|e| Failure::config(format!("{}: {e}", args.config.display())))?;
    args.overrides.apply_params(&mut config.params);
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(policy) = args.policy {
        config.policy = policy;
    }
    if args.model.is_some() {
        config.model = args.model.clone();
    }
    if config.seeds.is_empty() {
        return Err(Failure::config("config lists no scenario seeds"));
    }

    let model = load_model_or_all_active(config.model.as_ref(), &config.params)?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let scenario = generate_scenario(seed, &config.params);
        let policy = match config.policy {
            PolicyKind::Full => mpc::Policy::Full,
            PolicyKind::Reduced => mpc::Policy::Reduced {
                classifier: &model,
                config: ShieldConfig::default(),
            },
            PolicyKind::CertificateOnly => mpc::Policy::Reduced {
                classifier: &model,
                config: ShieldConfig {
                    certificate_only: true,
                    ..ShieldConfig::default()
                },
            },
        };
        runs.push(mpc::simulate(&scenario, &config.params, policy)?);
    }

    let summary = render_summaries(&runs, args.format, args.deterministic);
    write_output(args.out.as_ref(), &summary)?;
    if let Some(steps_path) = &args.steps_out {
        let steps = render_steps(&runs, args.format, args.deterministic);
        write_output(Some(steps_path), &steps)?;
    }
    Ok(0)
}

const SUMMARY_HEADER: &str = "seed,policy,steps,completed,Feasible (%),Collisions,\
Avg. Constraints Enforced (%),Avg. ADF Gains Kept (%),Avg. Classifier Query Time,\
Avg. Dual Approx. Time,Avg. Total Computation Time,Median Total Computation Time";

fn render_summaries(runs: &[RunRecord], format: Format, deterministic: bool) -> String {
    let zero = |x: f64| if deterministic { 0.0 } else { x };
    match format {
        Format::Csv => {
            let mut out = String::from(SUMMARY_HEADER);
            out.push('\n');
            for run in runs {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    run.seed,
                    run.policy,
                    run.steps.len(),
                    run.completed,
                    sig12(100.0 * run.feasible_fraction()),
                    run.collisions(),
                    sig12(100.0 * run.mean_constraint_keep()),
                    sig12(100.0 * run.mean_variable_keep()),
                    sig12(zero(run.mean_classifier_seconds())),
                    sig12(zero(run.mean_dual_seconds())),
                    sig12(zero(run.mean_total_seconds())),
                    sig12(zero(run.median_total_seconds())),
                ));
            }
            out
        }
        Format::JsonLines => {
            let mut out = String::new();
            for run in runs {
                let record = json!({
                    "kind": "summary",
                    "seed": run.seed,
                    "policy": run.policy,
                    "steps": run.steps.len(),
                    "completed": run.completed,
                    "feasible_pct": round12(100.0 * run.feasible_fraction()),
                    "collisions": run.collisions(),
                    "avg_constraints_enforced_pct": round12(100.0 * run.mean_constraint_keep()),
                    "avg_adf_gains_kept_pct": round12(100.0 * run.mean_variable_keep()),
                    "avg_classifier_query_time": round12(zero(run.mean_classifier_seconds())),
                    "avg_dual_approx_time": round12(zero(run.mean_dual_seconds())),
                    "avg_total_computation_time": round12(zero(run.mean_total_seconds())),
                    "median_total_computation_time": round12(zero(run.median_total_seconds())),
                });
                out.push_str(&serde_json::to_string(&record).expect("record"));
                out.push('\n');
            }
            out
        }
    }
}

const STEP_HEADER: &str = "seed,policy,step,feasible,collision,ego_x,ego_y,objective,\
original_violation,Constraints Enforced (%),ADF Gains Kept (%),gap,fallback,ls_fallback,\
epsilon_flagged,epsilon_crit,Classifier Query Time,Dual Approx. Time,Reduced Solve Time,\
Total Computation Time";

fn render_steps(runs: &[RunRecord], format: Format, deterministic: bool) -> String {
    let zero = |x: f64| if deterministic { 0.0 } else { x };
    match format {
        Format::Csv => {
            let mut out = String::from(STEP_HEADER);
            out.push('\n');
            for run in runs {
                for s in &run.steps {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                        run.seed,
                        run.policy,
                        s.step,
                        s.feasible,
                        s.collision,
                        sig12(s.ego[0]),
                        sig12(s.ego[1]),
                        sig12(s.objective),
                        sig12(s.original_violation),
                        sig12(100.0 * s.constraint_keep),
                        sig12(100.0 * s.variable_keep),
                        sig12(s.gap),
                        s.fallback,
                        s.ls_fallback,
                        s.epsilon_flagged,
                        sig12(s.epsilon_crit),
                        sig12(zero(s.classifier_seconds)),
                        sig12(zero(s.dual_seconds)),
                        sig12(zero(s.solve_seconds)),
                        sig12(zero(s.total_seconds)),
                    ));
                }
            }
            out
        }
        Format::JsonLines => {
            let mut out = String::new();
            for run in runs {
                for s in &run.steps {
                    let record = step_json(run, s, deterministic);
                    out.push_str(&serde_json::to_string(&record).expect("record"));
                    out.push('\n');
                }
            }
            out
        }
    }
}

fn step_json(run: &RunRecord, s: &StepRecord, deterministic: bool) -> serde_json::Value {
    let zero = |x: f64| if deterministic { 0.0 } else { x };
    json!({
        "kind": "step",
        "seed": run.seed,
        "policy": run.policy,
        "step": s.step,
        "feasible": s.feasible,
        "collision": s.collision,
        "ego": [round12(s.ego[0]), round12(s.ego[1])],
        "objective": round12(s.objective),
        "original_violation": round12(s.original_violation),
        "constraints_enforced_pct": round12(100.0 * s.constraint_keep),
        "adf_gains_kept_pct": round12(100.0 * s.variable_keep),
        "gap": round12(s.gap),
        "fallback": s.fallback,
        "ls_fallback": s.ls_fallback,
        "epsilon_flagged": s.epsilon_flagged,
        "epsilon_crit": round12(s.epsilon_crit),
        "classifier_query_time": round12(zero(s.classifier_seconds)),
        "dual_approx_time": round12(zero(s.dual_seconds)),
        "reduced_solve_time": round12(zero(s.solve_seconds)),
        "total_computation_time": round12(zero(s.total_seconds)),
    })
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepConfig {
    #[serde(default)]
    params: SimParams,
    seeds: Vec<u64>,
    epsilons: Vec<f64>,
    #[serde(default)]
    lambdas: Option<Vec<f64>>,
    #[serde(default)]
    model: Option<PathBuf>,
    #[serde(default)]
    certificate_only: bool,
}

const SWEEP_HEADER: &str = "epsilon,lambda,Avg. Constraints Enforced (%),\
Avg. ADF Gains Kept (%),Avg. Total Computation Time,Median Total Computation Time,\
Feasible (%),Collision (%)";

fn cmd_sweep(args: SweepArgs) -> Result<u8, Failure> {
    let config: SweepConfig = serde_json::from_str(&read_file(&args.config)?)
        .map_err(|e| Failure::config(format!("{}: {e}", args.config.display())))?;
    if config.seeds.is_empty() || config.epsilons.is_empty() {
        return Err(Failure::config("config needs at least one seed and one epsilon"));
    }
    let lambdas = config
        .lambdas
        .clone()
        .unwrap_or_else(|| vec![config.params.lambda]);
    let model = load_model_or_all_active(config.model.as_ref(), &config.params)?;
    let shield_config = ShieldConfig {
        certificate_only: config.certificate_only,
        ..ShieldConfig::default()
    };
    let scenarios: Vec<Scenario> = config
        .seeds
        .iter()
        .map(|&seed| generate_scenario(seed, &config.params))
        .collect();
    let rows = mpc::sweep(
        &scenarios,
        &config.params,
        &config.epsilons,
        &lambdas,
        &model,
        &shield_config,
    )?;

    let total_steps = config.seeds.len() * config.params.steps;
    let zero = |x: f64| if args.deterministic { 0.0 } else { x };
    let body = match args.format {
        Format::Csv => {
            let mut out = String::from(SWEEP_HEADER);
            out.push('\n');
            for row in &rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    sig12(row.epsilon),
                    sig12(row.lambda),
                    sig12(100.0 * row.mean_constraint_keep),
                    sig12(100.0 * row.mean_variable_keep),
                    sig12(zero(row.mean_total_seconds)),
                    sig12(zero(row.median_total_seconds)),
                    sig12(100.0 * row.feasible_fraction),
                    sig12(100.0 * row.collisions as f64 / total_steps.max(1) as f64),
                ));
            }
            out
        }
        Format::JsonLines => {
            let mut out = String::new();
            for row in &rows {
                let record = json!({
                    "kind": "sweep",
                    "epsilon": round12(row.epsilon),
                    "lambda": round12(row.lambda),
                    "avg_constraints_enforced_pct": round12(100.0 * row.mean_constraint_keep),
                    "avg_adf_gains_kept_pct": round12(100.0 * row.mean_variable_keep),
                    "avg_total_computation_time": round12(zero(row.mean_total_seconds)),
                    "median_total_computation_time": round12(zero(row.median_total_seconds)),
                    "feasible_pct": round12(100.0 * row.feasible_fraction),
                    "collision_pct": round12(100.0 * row.collisions as f64 / total_steps.max(1) as f64),
                });
                out.push_str(&serde_json::to_string(&record).expect("record"));
                out.push('\n');
            }
            out
        }
    };
    write_output(args.out.as_ref(), &body)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// collect

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CollectConfig {
    #[serde(default)]
    params: SimParams,
    seeds: Vec<u64>,
}

fn cmd_collect(args: CollectArgs) -> Result<u8, Failure> {
    let config: CollectConfig = serde_json::from_str(&read_file(&args.config)?)
        .map_err(|e| Failure::config(format!("{}: {e}", args.config.display())))?;
    if config.seeds.is_empty() {
        return Err(Failure::config("config lists no scenario seeds"));
    }
    let mut samples = Vec::new();
    for &seed in &config.seeds {
        let scenario = generate_scenario(seed, &config.params);
        let programs = mpc::collect_step_programs(&scenario, &config.params)?;
        samples.extend(predictor::collect(&programs, predictor::exact_dual)?);
    }
    fs::write(&args.out, predictor::samples_to_jsonl(&samples))
        .map_err(|e| Failure::io(&args.out, e))?;
    let summary = json!({
        "command": "collect",
        "samples": samples.len(),
        "feature_dim": samples.first().map(|s| s.feature.len()),
        "mu_bits": samples.first().map(|s| s.mu_label.len()),
        "g_bits": samples.first().map(|s| s.g_label.len()),
        "out": args.out.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("record"));
    Ok(0)
}

// ---------------------------------------------------------------------------
// train

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    positive_weight: Option<f64>,
    negative_weight: Option<f64>,
    eval_fraction: Option<f64>,
    seed: Option<u64>,
    tau: Option<f64>,
    zeta: Option<f64>,
    pair_norms: Option<bool>,
}

fn cmd_train(args: TrainArgs) -> Result<u8, Failure> {
    let file_config = match &args.config {
        Some(path) => serde_json::from_str::<TrainFileConfig>(&read_file(path)?)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?,
        None => TrainFileConfig::default(),
    };
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        epochs: file_config.epochs.unwrap_or(defaults.epochs),
        learning_rate: file_config.learning_rate.unwrap_or(defaults.learning_rate),
        positive_weight: file_config
            .positive_weight
            .unwrap_or(defaults.positive_weight),
        negative_weight: file_config
            .negative_weight
            .unwrap_or(defaults.negative_weight),
        eval_fraction: file_config.eval_fraction.unwrap_or(defaults.eval_fraction),
        seed: args.seed.or(file_config.seed).unwrap_or(defaults.seed),
        tau: file_config.tau.unwrap_or(defaults.tau),
        zeta: file_config.zeta.unwrap_or(defaults.zeta),
        pair_norms: file_config.pair_norms.unwrap_or(defaults.pair_norms),
    };

    let samples = predictor::samples_from_jsonl(&read_file(&args.samples)?)?;
    let (model, report) = predictor::train(&samples, &config)?;
    fs::write(&args.out, model.to_json_string()).map_err(|e| Failure::io(&args.out, e))?;

    let record = json!({
        "command": "train",
        "train_count": report.train_count,
        "eval_count": report.eval_count,
        "eval": {
            "samples": report.eval.samples,
            "true_positive": report.eval.true_positive,
            "false_positive": report.eval.false_positive,
            "true_negative": report.eval.true_negative,
            "false_negative": report.eval.false_negative,
            "recall": round12(report.eval.recall),
            "precision": round12(report.eval.precision),
            "accuracy": round12(report.eval.accuracy),
        },
        "out": args.out.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&record).expect("record"));
    Ok(0)
}
