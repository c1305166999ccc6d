//! Release acceptance suite: ten numbered checks covering screening safety,
//! certificate validity, solver agreement with a brute-force oracle, duality
//! identities, and the closed-loop harness. Each check prints a single line
//! `criterion N: PASS — …` (visible with `--nocapture`) and fails its test
//! otherwise.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use common::{
    enumerate_optimum, random_feasible_dual, random_full_rank_program, random_program,
    relax_screenable_row, GenOptions, OracleClassifier, RandomClassifier,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use shield::dual::DualObjective;
use shield::mpc::{
    collect_step_programs, generate_scenario, simulate, sweep, Policy, RunRecord, Scenario,
    SimParams,
};
use shield::predictor::{self, PredictorModel, TrainConfig, TrainReport};
use shield::screening::{shield_step, ClassifyDual, ShieldConfig};
use shield::solver;

fn report(criterion: u32, ok: bool, details: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {verdict} — {details}");
    assert!(ok, "criterion {criterion} failed: {details}");
}

fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

// ---------------------------------------------------------------------------
// Shared fixture: criteria 1 and 2 measure the same 500-instance suite.

struct ScreenSuite {
    instances: usize,
    screened_rows: usize,
    screened_vars: usize,
    fallbacks: usize,
    /// Largest original-row residual over screened rows at reduced optima.
    worst_violation: f64,
    /// Largest |regularized coordinate| over screened slots at full optima.
    worst_support: f64,
    elapsed: f64,
}

static SCREEN_SUITE: OnceLock<ScreenSuite> = OnceLock::new();

fn screen_suite() -> &'static ScreenSuite {
    SCREEN_SUITE.get_or_init(|| {
        let start = Instant::now();
        // An unreachable violation tolerance disables the guarded re-solve,
        // so the measured point is the reduced optimum itself, not a
        // fallback replacement.
        let config = ShieldConfig {
            certificate_only: false,
            violation_tol: f64::INFINITY,
        };
        let per: Vec<(f64, f64, usize, usize, bool)> = (0..500u64)
            .into_par_iter()
            .map(|seed| {
                let inst = random_program(seed, &GenOptions::stressed());
                let program = &inst.program;
                let outcome =
                    shield_step(program, &OracleClassifier, &config, None).expect("step");
                let residual = program.screenable().residual(&outcome.solution.theta);
                let worst_violation = outcome
                    .screen
                    .constraints
                    .iter()
                    .map(|&i| residual[i])
                    .fold(0.0_f64, f64::max);
                let full = solver::solve(program, None).expect("full solve");
                let worst_support = outcome
                    .screen
                    .variables
                    .iter()
                    .map(|&slot| full.theta[program.s_rows()[slot]].abs())
                    .fold(0.0_f64, f64::max);
                (
                    worst_violation,
                    worst_support,
                    outcome.screen.constraints.len(),
                    outcome.screen.variables.len(),
                    outcome.fallback,
                )
            })
            .collect();
        ScreenSuite {
            instances: per.len(),
            screened_rows: per.iter().map(|r| r.2).sum(),
            screened_vars: per.iter().map(|r| r.3).sum(),
            fallbacks: per.iter().filter(|r| r.4).count(),
            worst_violation: per.iter().map(|r| r.0).fold(0.0, f64::max),
            worst_support: per.iter().map(|r| r.1).fold(0.0, f64::max),
            elapsed: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_01_screened_constraints_hold_at_reduced_optima() {
    let s = screen_suite();
    let ok = s.worst_violation <= 1e-8 && s.screened_rows > 0 && s.elapsed <= 120.0;
    report(
        1,
        ok,
        &format!(
            "{} instances, {} rows screened ({} fallbacks), worst original-row violation \
             {:.2e} ≤ 1e-8, suite took {:.1}s (limit 120s)",
            s.instances, s.screened_rows, s.fallbacks, s.worst_violation, s.elapsed
        ),
    );
}

#[test]
fn criterion_02_screened_variables_are_zero_at_full_optima() {
    let s = screen_suite();
    let ok = s.worst_support <= 1e-8 && s.screened_vars > 0;
    report(
        2,
        ok,
        &format!(
            "{} instances, {} coordinates screened, worst |coordinate| at the full tightened \
             optimum {:.2e} ≤ 1e-8",
            s.instances, s.screened_vars, s.worst_support
        ),
    );
}

#[test]
fn criterion_03_certified_radius_bounds_dual_distance() {
    let per: Vec<(f64, f64, f64)> = (0..500u64)
        .into_par_iter()
        .map(|seed| {
            let inst = random_full_rank_program(seed, 20);
            let obj = DualObjective::new(&inst.program).expect("objective");
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1a1);
            let y = random_feasible_dual(&obj, &mut rng);
            let gap = obj.gap(&y).expect("gap");
            let seed_point = predictor::exact_dual(&inst.program).expect("dual seed");
            // Push the reference optimum far enough that its own error
            // (certified by its radius) cannot eat the 1e-8 slack.
            let tol = (1e-9_f64)
                .min(1e-9 * obj.rho_underbar() / (1.0 + obj.rho_bar()))
                .max(1e-14);
            let (y_star, _) = obj
                .refine(Some(&seed_point), tol, 400_000)
                .expect("dual refinement");
            let gap_at_opt = obj.gap(&y_star).expect("gap at optimum");
            (y.distance(&y_star), gap, gap_at_opt)
        })
        .collect();
    let worst_excess = per
        .iter()
        .map(|(d, g, _)| d - g)
        .fold(f64::NEG_INFINITY, f64::max);
    let worst_opt_gap = per.iter().map(|r| r.2).fold(0.0, f64::max);
    let ok = worst_excess <= 1e-8 && worst_opt_gap <= 1e-7;
    report(
        3,
        ok,
        &format!(
            "500 pairs: max(‖y−y*‖ − radius) = {:.2e} ≤ 1e-8, max radius at the optimum \
             {:.2e} ≤ 1e-7",
            worst_excess, worst_opt_gap
        ),
    );
}

#[test]
fn criterion_04_sensitivity_inequality_bounds_relaxation_gain() {
    let worst: f64 = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let inst = random_program(seed.wrapping_add(40_000), &GenOptions::moderate());
            let program = &inst.program;
            let base = solver::solve(program, None).expect("base solve");
            let obj = DualObjective::new(program).expect("objective");
            let tol = (1e-9_f64)
                .min(1e-9 * obj.rho_underbar() / (1.0 + obj.rho_bar()))
                .max(1e-14);
            let (y_star, _) = obj
                .refine(base.dual.as_ref(), tol, 400_000)
                .expect("dual refinement");
            let zeta = program.zeta();
            let mut worst = f64::NEG_INFINITY;
            for &delta in &[0.1 * zeta, zeta] {
                for row in 0..program.n_screenable() {
                    let relaxed = relax_screenable_row(program, row, delta);
                    let p_delta = solver::solve(&relaxed, None).expect("relaxed solve");
                    let excess =
                        (base.objective - p_delta.objective) - delta * y_star.mu[row];
                    worst = worst.max(excess);
                }
            }
            worst
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    let ok = worst <= 1e-8;
    report(
        4,
        ok,
        &format!(
            "100 instances × two margins × every screenable row: \
             max(p(0) − p(δ) − δ·μ*) = {:.2e} ≤ 1e-8",
            worst
        ),
    );
}

#[test]
fn criterion_05_solver_agrees_with_face_enumeration() {
    let per: Vec<(f64, f64)> = (0..200u64)
        .into_par_iter()
        .map(|seed| {
            let inst = random_program(seed.wrapping_add(70_000), &GenOptions::tiny());
            let program = &inst.program;
            let solution = solver::solve(program, None).expect("solve");
            let (_, oracle_objective) =
                enumerate_optimum(&program.tighten()).expect("enumeration found no optimum");
            let dual = solution.dual.as_ref().expect("solver returned no multipliers");
            let kkt = solver::kkt_residual(program, &solution.theta, &solution.s, dual);
            ((solution.objective - oracle_objective).abs(), kkt)
        })
        .collect();
    let worst_objective = per.iter().map(|r| r.0).fold(0.0, f64::max);
    let worst_kkt = per.iter().map(|r| r.1).fold(0.0, f64::max);
    let ok = worst_objective <= 1e-6 && worst_kkt <= 1e-7;
    report(
        5,
        ok,
        &format!(
            "200 instances: max |objective − enumerated| = {:.2e} ≤ 1e-6, \
             max KKT residual {:.2e} ≤ 1e-7",
            worst_objective, worst_kkt
        ),
    );
}

#[test]
fn criterion_06_strong_duality_closes_the_gap() {
    let worst: f64 = (0..500u64)
        .into_par_iter()
        .map(|seed| {
            let inst = random_program(seed, &GenOptions::stressed());
            let program = &inst.program;
            let primal = solver::solve(program, None).expect("solve").objective;
            let y_star = predictor::exact_dual(program).expect("exact dual");
            let dual = DualObjective::new(program)
                .expect("objective")
                .value(&y_star)
                .expect("value");
            (primal + dual).abs()
        })
        .reduce(|| 0.0, f64::max);
    let ok = worst <= 1e-6;
    report(
        6,
        ok,
        &format!("500 instances: max |p* + d*| = {:.2e} ≤ 1e-6", worst),
    );
}

// ---------------------------------------------------------------------------
// Shared fixture: the trained predictor used by criteria 7, 8, and 9.

struct Trained {
    model: PredictorModel,
    report: TrainReport,
    samples: usize,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let params = SimParams::default();
        let programs: Vec<_> = (100u64..122)
            .into_par_iter()
            .flat_map_iter(|seed| {
                let scenario = generate_scenario(seed, &params);
                collect_step_programs(&scenario, &params).expect("training rollout")
            })
            .collect();
        let samples = predictor::collect(&programs, predictor::exact_dual).expect("labels");
        let (model, report) =
            predictor::train(&samples, &TrainConfig::default()).expect("train");
        Trained {
            model,
            report,
            samples: samples.len(),
        }
    })
}

fn eval_scenarios(params: &SimParams) -> Vec<Scenario> {
    (0..20u64).map(|seed| generate_scenario(seed, params)).collect()
}

fn pooled<'a, F: Fn(&shield::mpc::StepRecord) -> f64>(
    runs: &'a [RunRecord],
    f: F,
) -> Vec<f64> {
    runs.iter().flat_map(|r| r.steps.iter()).map(f).collect()
}

#[test]
fn criterion_07_closed_loop_reduced_arm_is_safe_and_faster() {
    let params = SimParams::default();
    let fixture = trained(); // training time is criterion 9's subject
    let scenarios = eval_scenarios(&params);
    let start = Instant::now();

    let full: Vec<RunRecord> = scenarios
        .par_iter()
        .map(|sc| simulate(sc, &params, Policy::Full).expect("full run"))
        .collect();
    let reduced: Vec<RunRecord> = scenarios
        .par_iter()
        .map(|sc| {
            simulate(
                sc,
                &params,
                Policy::Reduced {
                    classifier: &fixture.model,
                    config: ShieldConfig::default(),
                },
            )
            .expect("reduced run")
        })
        .collect();
    let elapsed = start.elapsed().as_secs_f64();

    let all_feasible = reduced
        .iter()
        .all(|r| r.completed && (r.feasible_fraction() - 1.0).abs() < 1e-12);
    let collisions: usize = reduced.iter().map(|r| r.collisions()).sum();
    let steps: usize = reduced.iter().map(|r| r.steps.len()).sum();
    let mean_ckeep = {
        let v = pooled(&reduced, |s| s.constraint_keep);
        v.iter().sum::<f64>() / v.len() as f64
    };
    let mean_vkeep = {
        let v = pooled(&reduced, |s| s.variable_keep);
        v.iter().sum::<f64>() / v.len() as f64
    };
    let median_reduced = median(pooled(&reduced, |s| s.total_seconds));
    let median_full = median(pooled(&full, |s| s.total_seconds));
    let worst_violation = pooled(&reduced, |s| s.original_violation)
        .into_iter()
        .fold(0.0, f64::max);

    let ok = all_feasible
        && collisions == 0
        && mean_ckeep < 0.6
        && mean_vkeep < 0.6
        && median_reduced < median_full
        && worst_violation <= 1e-8
        && elapsed <= 600.0;
    report(
        7,
        ok,
        &format!(
            "20 scenarios × {} steps: reduced arm 100% feasible = {}, collisions = {}, \
             mean keep rates {:.1}% rows / {:.1}% coords (< 60%), median step \
             {:.4}s vs full {:.4}s, worst original violation {:.1e}, {:.0}s (limit 600s)",
            steps / 20,
            all_feasible,
            collisions,
            100.0 * mean_ckeep,
            100.0 * mean_vkeep,
            median_reduced,
            median_full,
            worst_violation,
            elapsed
        ),
    );
}

#[test]
fn criterion_08_tolerance_sweep_is_monotone_and_safe() {
    let params = SimParams::default();
    let fixture = trained();
    let scenarios = eval_scenarios(&params);
    let rows = sweep(
        &scenarios,
        &params,
        &[0.001, 0.01, 0.1],
        &[params.lambda],
        &fixture.model,
        &ShieldConfig::default(),
    )
    .expect("sweep");
    let keeps: Vec<f64> = rows.iter().map(|r| r.mean_constraint_keep).collect();
    // With a well-trained classifier the restricted solves land on the exact
    // optimum, so the certificate is ~1e-16 and every threshold in the sweep
    // clears it: the keep-rate curve is flat up to classifier tie-breaking
    // noise near the 0.5 decision boundary. A 0.1% absolute tolerance treats
    // flat as nonincreasing while a genuine increase would still fail.
    let monotone = keeps.windows(2).all(|w| w[0] >= w[1] - 1e-3);
    let safe = rows
        .iter()
        .all(|r| (r.feasible_fraction - 1.0).abs() < 1e-12 && r.collisions == 0);
    let ok = monotone && safe;
    report(
        8,
        ok,
        &format!(
            "keep rate vs ε: {:.2}% @0.001 ≥ {:.2}% @0.01 ≥ {:.2}% @0.1, \
             feasibility 100% and collisions 0 at every grid point = {}",
            100.0 * keeps[0],
            100.0 * keeps[1],
            100.0 * keeps[2],
            safe
        ),
    );
}

#[test]
fn criterion_09_predictor_pipeline_learns_and_accelerates() {
    let fixture = trained();
    let params = SimParams::default();
    let programs =
        collect_step_programs(&generate_scenario(0, &params), &params).expect("eval rollout");
    let mut reduced_seconds = 0.0;
    let mut full_seconds = 0.0;
    for program in &programs {
        let objective = DualObjective::new(program).expect("objective");
        let class = fixture.model.classify(program).expect("classes");
        let kept = class.kept_mu();
        let pins: Vec<(usize, f64)> = class
            .saturated()
            .iter()
            .map(|&j| (j, program.lambda()))
            .collect();
        let t = Instant::now();
        objective
            .solve_reduced_unconstrained(&kept, &pins)
            .expect("reduced dual");
        reduced_seconds += t.elapsed().as_secs_f64();
        let t = Instant::now();
        objective.solve_full_unconstrained().expect("full dual");
        full_seconds += t.elapsed().as_secs_f64();
    }
    let n = programs.len() as f64;
    let recall = fixture.report.eval.recall;
    let ok = fixture.samples >= 1000 && recall >= 0.85 && reduced_seconds <= full_seconds;
    report(
        9,
        ok,
        &format!(
            "{} samples (≥ 1000), held-out recall {:.3} (≥ 0.85), average dual solve \
             {:.2e}s reduced vs {:.2e}s full over {} programs",
            fixture.samples,
            recall,
            reduced_seconds / n,
            full_seconds / n,
            programs.len()
        ),
    );
}

#[test]
fn criterion_10_random_classes_never_violate_original_constraints() {
    let params = SimParams::default();
    let classifier = RandomClassifier::new(99);
    let runs: Vec<RunRecord> = (300u64..320)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&seed| {
            let scenario = generate_scenario(seed, &params);
            simulate(
                &scenario,
                &params,
                Policy::Reduced {
                    classifier: &classifier,
                    config: ShieldConfig::default(),
                },
            )
            .expect("adversarial run")
        })
        .collect();
    let worst_violation = pooled(&runs, |s| s.original_violation)
        .into_iter()
        .fold(0.0, f64::max);
    let fallbacks: usize = runs
        .iter()
        .flat_map(|r| r.steps.iter())
        .filter(|s| s.fallback)
        .count();
    let steps: usize = runs.iter().map(|r| r.steps.len()).sum();
    let ok = worst_violation <= 1e-8 && steps > 0;
    report(
        10,
        ok,
        &format!(
            "20 rollouts, {} steps with coin-flip classes: worst original-row violation \
             {:.1e} ≤ 1e-8 ({} guarded fallbacks)",
            steps, worst_violation, fallbacks
        ),
    );
}
