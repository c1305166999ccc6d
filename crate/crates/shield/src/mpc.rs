//! Closed-loop planning harness on synthetic multi-agent scenarios.
//!
//! The ego vehicle is a planar double integrator tracking a constant-speed
//! lane reference among moving agents whose future motion is uncertain: each
//! agent carries several candidate motion modes. The per-step plan optimizes
//! a nominal input sequence ū together with scalar feedback gains γ^{vm}_k —
//! one per agent, mode, and stage — that act on the observed deviation signal
//! of that mode, so a single plan hedges against every mode simultaneously.
//! The gains are ℓ1-regularized: a gain the optimizer leaves at zero means
//! "no contingency needed for that agent-mode at that stage".
//!
//! Collision avoidance is linearized around the previous plan: for each
//! agent, mode, and future step, the plan must stay on the far side of the
//! supporting halfspace of the predicted obstacle disc. Those rows form the
//! screenable block (they carry the ζ margin); input and velocity boxes are
//! immutable. The per-step program is exactly the regularized QP the rest of
//! the crate screens and solves.

use nalgebra::{DMatrix, DVector, Vector2, Vector4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::problem::{ConstraintBlock, RegularizedProgram};
use crate::screening::{ClassifyDual, ShieldConfig, ShieldOutcome};
use crate::solver::{StageGroup, StageLayout};
use crate::{screening, solver, Error};

/// Index arithmetic of the decision vector θ = [ū₀..ū_{N−1}; γ^{vm}_k].
///
/// Inputs come first, two coordinates per stage. Gains follow, grouped by
/// agent then mode then stage, one scalar each. Collision rows, regularizer
/// slots, and feature entries all share the (agent, mode, stage) order, so
/// slot `(v·M + m)·N + k` refers to physical step k+1 everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyLayout {
    pub horizon: usize,
    pub agents: usize,
    pub modes: usize,
}

impl PolicyLayout {
    pub fn theta_dim(&self) -> usize {
        2 * self.horizon + self.gain_count()
    }

    pub fn gain_count(&self) -> usize {
        self.agents * self.modes * self.horizon
    }

    pub fn input_index(&self, stage: usize, coord: usize) -> usize {
        2 * stage + coord
    }

    pub fn gain_index(&self, agent: usize, mode: usize, stage: usize) -> usize {
        2 * self.horizon + self.slot(agent, mode, stage)
    }

    /// Shared (agent, mode, stage) slot used by collision rows, regularizer
    /// entries, and (doubled) feature coordinates.
    pub fn slot(&self, agent: usize, mode: usize, stage: usize) -> usize {
        (agent * self.modes + mode) * self.horizon + stage
    }

    /// Regularizer rows: every gain coordinate, in slot order.
    pub fn s_rows(&self) -> Vec<usize> {
        (0..self.gain_count()).map(|s| 2 * self.horizon + s).collect()
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.gain_count()
    }

    /// Stage structure for shifting a previous solution one step forward.
    pub fn stage_layout(&self) -> StageLayout {
        let mut theta_groups = vec![StageGroup {
            offset: 0,
            stage_len: 2,
            stages: self.horizon,
        }];
        let mut s_groups = Vec::new();
        for v in 0..self.agents {
            for m in 0..self.modes {
                theta_groups.push(StageGroup {
                    offset: self.gain_index(v, m, 0),
                    stage_len: 1,
                    stages: self.horizon,
                });
                s_groups.push(StageGroup {
                    offset: self.slot(v, m, 0),
                    stage_len: 1,
                    stages: self.horizon,
                });
            }
        }
        StageLayout {
            theta_groups,
            s_groups,
        }
    }
}

/// Harness parameters; `Default` reproduces the standard study setup.
/// Serialized forms may omit any field; omissions take the default value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub horizon: usize,
    pub agents: usize,
    pub modes: usize,
    pub dt: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub epsilon: f64,
    /// Input box |ū| ≤ u_max (per coordinate).
    pub u_max: f64,
    /// Velocity box |v| ≤ v_max (per coordinate).
    pub v_max: f64,
    /// Input effort weight.
    pub w_input: f64,
    /// Gain effort weight (on top of the ℓ1 term).
    pub w_gain: f64,
    /// Lane-tracking cruise speed.
    pub cruise: f64,
    /// Per-stage growth of the predicted obstacle radius.
    pub radius_growth: f64,
    pub steps: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            horizon: 14,
            agents: 3,
            modes: 2,
            dt: 0.1,
            lambda: 100.0,
            zeta: 0.5,
            epsilon: 0.01,
            u_max: 4.0,
            v_max: 20.0,
            w_input: 0.5,
            w_gain: 1.0,
            cruise: 7.0,
            radius_growth: 0.02,
            steps: 50,
        }
    }
}

impl SimParams {
    pub fn layout(&self) -> PolicyLayout {
        PolicyLayout {
            horizon: self.horizon,
            agents: self.agents,
            modes: self.modes,
        }
    }
}

/// One moving agent: straight-line nominal motion plus per-mode velocity
/// offsets; the realized trajectory follows `true_mode` exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentSpec {
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    /// One velocity offset per mode (mode 0 is the nominal straight line).
    pub mode_drifts: Vec<[f64; 2]>,
    pub true_mode: usize,
    pub radius: f64,
}

impl AgentSpec {
    fn mode_velocity(&self, mode: usize) -> Vector2<f64> {
        Vector2::new(
            self.velocity[0] + self.mode_drifts[mode][0],
            self.velocity[1] + self.mode_drifts[mode][1],
        )
    }

    /// Deviation signal of a mode relative to the agent's mode-average: the
    /// per-step position offset the feedback gains act on.
    fn deviation(&self, mode: usize, dt: f64) -> Vector2<f64> {
        let modes = self.mode_drifts.len() as f64;
        let mut mean = Vector2::zeros();
        for d in &self.mode_drifts {
            mean += Vector2::new(d[0], d[1]);
        }
        mean /= modes;
        (Vector2::new(self.mode_drifts[mode][0], self.mode_drifts[mode][1]) - mean) * dt
    }
}

/// A complete deterministic scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub agents: Vec<AgentSpec>,
}

/// Draws a scenario with `params.agents` agents of mixed archetypes:
/// crossers aiming at the ego lane, oncomers running against it, and
/// drifters converging from the side.
pub fn generate_scenario(seed: u64, params: &SimParams) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agents = Vec::with_capacity(params.agents);
    for a in 0..params.agents {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (start, velocity): (Vector2<f64>, Vector2<f64>) = match a % 3 {
            0 => {
                // Crosser: starts beside the lane ahead, heads for a point on
                // the lane the ego will reach.
                let start = Vector2::new(rng.gen_range(6.0..16.0), side * rng.gen_range(5.0..10.0));
                let target = Vector2::new(start.x + rng.gen_range(1.0..4.0), 0.0);
                let speed = rng.gen_range(2.0..5.0);
                let dir = (target - start).normalize();
                (start, dir * speed)
            }
            1 => {
                // Oncomer: ahead in (or near) the lane, driving back at it.
                let start =
                    Vector2::new(rng.gen_range(18.0..30.0), side * rng.gen_range(0.5..2.5));
                (start, Vector2::new(-rng.gen_range(5.0..8.0), 0.0))
            }
            _ => {
                // Drifter: far to the side, slowly converging.
                let start = Vector2::new(rng.gen_range(8.0..20.0), side * rng.gen_range(8.0..14.0));
                (
                    start,
                    Vector2::new(rng.gen_range(0.0..3.0), -side * rng.gen_range(0.5..2.0)),
                )
            }
        };
        let mut mode_drifts = vec![[0.0, 0.0]];
        for _ in 1..params.modes {
            // A genuinely distinct hypothesis: at least 0.5 m/s offset.
            let mut dx: f64 = rng.gen_range(-1.5..1.5);
            let mut dy: f64 = rng.gen_range(-1.5..1.5);
            let norm = (dx * dx + dy * dy).sqrt();
            if norm < 0.5 {
                dx = 0.5 * side;
                dy = -0.5;
            }
            mode_drifts.push([dx, dy]);
        }
        agents.push(AgentSpec {
            start: [start.x, start.y],
            velocity: [velocity.x, velocity.y],
            mode_drifts,
            true_mode: rng.gen_range(0..params.modes),
            radius: rng.gen_range(0.4..0.7),
        });
    }
    Scenario { seed, agents }
}

/// World state at one planning instant.
#[derive(Debug, Clone)]
pub struct SimState {
    /// Ego state (px, py, vx, vy).
    pub ego: Vector4<f64>,
    pub agent_positions: Vec<Vector2<f64>>,
    /// Previous plan's ego positions for stages 1..=N (the linearization
    /// points for the collision halfspaces).
    pub plan: Vec<Vector2<f64>>,
    pub step: usize,
}

/// Starting state: ego at the origin at cruise speed; the initial "previous
/// plan" is the constant-velocity extrapolation.
pub fn initial_state(scenario: &Scenario, params: &SimParams) -> SimState {
    let ego = Vector4::new(0.0, 0.0, params.cruise, 0.0);
    let plan = (1..=params.horizon)
        .map(|k| nominal_position(&ego, k, params.dt))
        .collect();
    SimState {
        ego,
        agent_positions: scenario
            .agents
            .iter()
            .map(|a| Vector2::new(a.start[0], a.start[1]))
            .collect(),
        plan,
        step: 0,
    }
}

/// Zero-input ego position k steps ahead.
fn nominal_position(ego: &Vector4<f64>, k: usize, dt: f64) -> Vector2<f64> {
    Vector2::new(ego[0] + k as f64 * dt * ego[2], ego[1] + k as f64 * dt * ego[3])
}

/// Position response of input ū_j on the position at step k (zero for
/// j ≥ k): Δt²(k − j − ½).
fn position_gain(k: usize, j: usize, dt: f64) -> f64 {
    if j < k {
        dt * dt * (k as f64 - j as f64 - 0.5)
    } else {
        0.0
    }
}

/// Builds the per-step regularized QP at the given world state, including the
/// scene feature vector (per-slot displacement of the predicted obstacle from
/// the previous plan).
pub fn build_step_program(
    scenario: &Scenario,
    params: &SimParams,
    state: &SimState,
) -> Result<RegularizedProgram, Error> {
    let layout = params.layout();
    let n = layout.theta_dim();
    let nn = params.horizon;
    let dt = params.dt;

    // --- Cost ---------------------------------------------------------
    // ‖P ū + p_base − ref‖² + w_u‖ū‖² + w_γ‖γ‖², written as ½θᵀQθ + cᵀθ.
    let mut q = DMatrix::zeros(n, n);
    let mut c = DVector::zeros(n);
    // Tracking: accumulate PᵀP and Pᵀ(p_base − ref) stage by stage.
    for k in 1..=nn {
        let base = nominal_position(&state.ego, k, dt);
        let reference = Vector2::new(state.ego[0] + params.cruise * k as f64 * dt, 0.0);
        let err = base - reference;
        for j in 0..nn {
            let gj = position_gain(k, j, dt);
            if gj == 0.0 {
                continue;
            }
            for coord in 0..2 {
                c[layout.input_index(j, coord)] += 2.0 * gj * err[coord];
            }
            for j2 in 0..nn {
                let gj2 = position_gain(k, j2, dt);
                if gj2 == 0.0 {
                    continue;
                }
                for coord in 0..2 {
                    q[(layout.input_index(j, coord), layout.input_index(j2, coord))] +=
                        2.0 * gj * gj2;
                }
            }
        }
    }
    for k in 0..nn {
        for coord in 0..2 {
            let idx = layout.input_index(k, coord);
            q[(idx, idx)] += 2.0 * params.w_input;
        }
    }
    for slot in 0..layout.gain_count() {
        let idx = 2 * nn + slot;
        q[(idx, idx)] += 2.0 * params.w_gain;
    }

    // --- Screenable collision rows -------------------------------------
    let rows = layout.gain_count();
    let mut a_scr = DMatrix::zeros(rows, n);
    let mut b_scr = DVector::zeros(rows);
    let mut feature = DVector::zeros(layout.feature_dim());
    for (v, agent) in scenario.agents.iter().enumerate() {
        for m in 0..params.modes {
            let mode_vel = agent.mode_velocity(m);
            let deviation = agent.deviation(m, dt);
            for k in 1..=nn {
                let slot = layout.slot(v, m, k - 1);
                let obstacle = state.agent_positions[v] + mode_vel * (k as f64 * dt);
                let plan_pos = state.plan[k - 1];
                let rel = plan_pos - obstacle;
                let normal = if rel.norm() > 1e-9 {
                    rel / rel.norm()
                } else {
                    log::warn!(
                        "degenerate collision direction at agent {v} mode {m} step {k}; \
                         using the lane direction"
                    );
                    Vector2::new(1.0, 0.0)
                };
                let radius = agent.radius + params.radius_growth * k as f64;
                // n̂ᵀ(p_k(θ) − o) ≥ r  ⟺  −n̂ᵀ·lin(θ) ≤ n̂ᵀ(p_base − o) − r.
                for j in 0..k {
                    let gj = position_gain(k, j, dt);
                    for coord in 0..2 {
                        a_scr[(slot, layout.input_index(j, coord))] = -gj * normal[coord];
                    }
                    a_scr[(slot, layout.gain_index(v, m, j))] = -gj * normal.dot(&deviation);
                }
                let base = nominal_position(&state.ego, k, dt);
                b_scr[slot] = normal.dot(&(base - obstacle)) - radius;
                feature[2 * slot] = obstacle.x - plan_pos.x;
                feature[2 * slot + 1] = obstacle.y - plan_pos.y;
            }
        }
    }

    // --- Immutable boxes ------------------------------------------------
    // Input box (4N rows), then velocity box (4N rows).
    let imm_rows = 8 * nn;
    let mut a_imm = DMatrix::zeros(imm_rows, n);
    let mut b_imm = DVector::zeros(imm_rows);
    let mut at = 0;
    for k in 0..nn {
        for coord in 0..2 {
            let idx = layout.input_index(k, coord);
            a_imm[(at, idx)] = 1.0;
            b_imm[at] = params.u_max;
            at += 1;
            a_imm[(at, idx)] = -1.0;
            b_imm[at] = params.u_max;
            at += 1;
        }
    }
    for k in 1..=nn {
        for coord in 0..2 {
            let v0 = state.ego[2 + coord];
            for sign in [1.0, -1.0] {
                for j in 0..k {
                    a_imm[(at, layout.input_index(j, coord))] = sign * dt;
                }
                b_imm[at] = params.v_max - sign * v0;
                at += 1;
            }
        }
    }

    let mut program = RegularizedProgram::new(
        q,
        c,
        ConstraintBlock::new(a_scr, b_scr)?,
        ConstraintBlock::new(a_imm, b_imm)?,
        ConstraintBlock::empty(n),
        layout.s_rows(),
        params.lambda,
        params.zeta,
        params.epsilon,
    )?;
    program.set_feature(Some(feature));
    Ok(program)
}

/// Advances the world one step under the applied ego input.
pub fn advance(scenario: &Scenario, params: &SimParams, state: &SimState, input: Vector2<f64>) -> SimState {
    let dt = params.dt;
    let mut ego = state.ego;
    ego[0] += dt * ego[2] + 0.5 * dt * dt * input.x;
    ego[1] += dt * ego[3] + 0.5 * dt * dt * input.y;
    ego[2] += dt * input.x;
    ego[3] += dt * input.y;
    let agent_positions = scenario
        .agents
        .iter()
        .zip(&state.agent_positions)
        .map(|(agent, pos)| pos + agent.mode_velocity(agent.true_mode) * dt)
        .collect();
    SimState {
        ego,
        agent_positions,
        plan: state.plan.clone(),
        step: state.step + 1,
    }
}

/// Planned ego positions (stages 1..=N) under the nominal inputs of θ.
fn planned_positions(
    params: &SimParams,
    state: &SimState,
    theta: &DVector<f64>,
) -> Vec<Vector2<f64>> {
    let layout = params.layout();
    (1..=params.horizon)
        .map(|k| {
            let mut p = nominal_position(&state.ego, k, params.dt);
            for j in 0..k.min(params.horizon) {
                let gj = position_gain(k, j, params.dt);
                p.x += gj * theta[layout.input_index(j, 0)];
                p.y += gj * theta[layout.input_index(j, 1)];
            }
            p
        })
        .collect()
}

/// Per-step record of a closed-loop run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub feasible: bool,
    pub collision: bool,
    pub ego: [f64; 2],
    pub objective: f64,
    /// Largest violation of an original (untightened) screenable row by the
    /// applied plan; 0.0 when every row is satisfied.
    pub original_violation: f64,
    /// Fraction of screenable rows kept (1.0 for the full policy).
    pub constraint_keep: f64,
    /// Fraction of regularized coordinates kept (1.0 for the full policy).
    pub variable_keep: f64,
    pub gap: f64,
    pub fallback: bool,
    pub ls_fallback: bool,
    pub epsilon_flagged: bool,
    pub epsilon_crit: f64,
    pub classifier_seconds: f64,
    pub dual_seconds: f64,
    pub solve_seconds: f64,
    pub total_seconds: f64,
}

/// A finished closed-loop run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub policy: String,
    pub steps: Vec<StepRecord>,
    /// False when the run stopped early on an infeasible step.
    pub completed: bool,
}

impl RunRecord {
    pub fn feasible_fraction(&self) -> f64 {
        if self.steps.is_empty() {
            return 1.0;
        }
        self.steps.iter().filter(|s| s.feasible).count() as f64 / self.steps.len() as f64
    }

    pub fn collisions(&self) -> usize {
        self.steps.iter().filter(|s| s.collision).count()
    }

    pub fn mean_constraint_keep(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.constraint_keep))
    }

    pub fn mean_variable_keep(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.variable_keep))
    }

    pub fn mean_total_seconds(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.total_seconds))
    }

    pub fn median_total_seconds(&self) -> f64 {
        median(self.steps.iter().map(|s| s.total_seconds).collect())
    }

    pub fn mean_classifier_seconds(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.classifier_seconds))
    }

    pub fn mean_dual_seconds(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.dual_seconds))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let collected: Vec<f64> = values.collect();
    if collected.is_empty() {
        0.0
    } else {
        collected.iter().sum::<f64>() / collected.len() as f64
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Mean distance between the realized ego positions of two runs over their
/// common steps.
pub fn average_displacement(a: &RunRecord, b: &RunRecord) -> f64 {
    let n = a.steps.len().min(b.steps.len());
    if n == 0 {
        return 0.0;
    }
    (0..n)
        .map(|i| {
            let pa = a.steps[i].ego;
            let pb = b.steps[i].ego;
            ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / n as f64
}

/// Which planner runs the loop.
pub enum Policy<'a> {
    /// Full problem, no tightening, no screening.
    Full,
    /// Guarded screen-and-solve on the tightened problem.
    Reduced {
        classifier: &'a (dyn ClassifyDual + Sync),
        config: ShieldConfig,
    },
}

impl Policy<'_> {
    fn name(&self) -> String {
        match self {
            Policy::Full => "full".to_string(),
            Policy::Reduced { config, .. } => {
                if config.certificate_only {
                    "reduced-certificate-only".to_string()
                } else {
                    "reduced".to_string()
                }
            }
        }
    }
}

/// Runs the closed loop. Each step rebuilds the scene program, plans with the
/// selected policy (warm-started by the stage-shifted previous plan), applies
/// the first nominal input, advances the world, and checks for collisions
/// against the agents' realized motion. An infeasible step ends the run early
/// (recorded, `completed = false`).
pub fn simulate(scenario: &Scenario, params: &SimParams, policy: Policy) -> Result<RunRecord, Error> {
    let layout = params.layout();
    let stage_layout = layout.stage_layout();
    let mut state = initial_state(scenario, params);
    let mut steps = Vec::with_capacity(params.steps);
    let mut completed = true;
    let mut previous: Option<solver::Solution> = None;
    let policy_name = policy.name();

    for step in 0..params.steps {
        let program = build_step_program(scenario, params, &state)?;
        let epsilon_crit = program.epsilon_crit();
        let warm = match &previous {
            Some(prev) => Some(solver::shift_warm_start(prev, &stage_layout)?),
            None => None,
        };
        let planned = match &policy {
            Policy::Full => match solver::solve_original(&program, warm.as_ref()) {
                Ok(solution) => PlanOutcome::full(solution),
                Err(Error::Infeasible(_)) => {
                    steps.push(infeasible_record(step, &state, epsilon_crit));
                    completed = false;
                    break;
                }
                Err(other) => return Err(other),
            },
            Policy::Reduced { classifier, config } => {
                match screening::shield_step(&program, *classifier, config, warm.as_ref()) {
                    Ok(outcome) => PlanOutcome::reduced(outcome, &program),
                    Err(Error::Infeasible(_)) => {
                        steps.push(infeasible_record(step, &state, epsilon_crit));
                        completed = false;
                        break;
                    }
                    Err(other) => return Err(other),
                }
            }
        };
        if planned.epsilon_flagged {
            log::warn!(
                "step {step}: screening tolerance {} exceeds the critical value {epsilon_crit}; \
                 no constraints screened",
                program.epsilon()
            );
        }

        let original_violation = program
            .screenable()
            .residual(&planned.solution.theta)
            .iter()
            .fold(0.0_f64, |worst, &r| worst.max(r));

        let input = Vector2::new(
            planned.solution.theta[layout.input_index(0, 0)],
            planned.solution.theta[layout.input_index(0, 1)],
        );
        let plan = planned_positions(params, &state, &planned.solution.theta);
        let mut next = advance(scenario, params, &state, input);
        // Shift the plan: stage k of the new linearization is stage k+1 of
        // the plan just computed, extrapolating the terminal stage.
        let mut shifted: Vec<Vector2<f64>> = plan[1..].to_vec();
        let last = *plan.last().expect("horizon is nonzero");
        let prev = plan[plan.len() - 2];
        shifted.push(last + (last - prev));
        next.plan = shifted;

        let ego_pos = Vector2::new(next.ego[0], next.ego[1]);
        let collision = scenario
            .agents
            .iter()
            .zip(&next.agent_positions)
            .any(|(agent, pos)| (ego_pos - pos).norm() < agent.radius);

        steps.push(StepRecord {
            step,
            feasible: true,
            collision,
            ego: [ego_pos.x, ego_pos.y],
            objective: planned.solution.objective,
            original_violation,
            constraint_keep: planned.constraint_keep,
            variable_keep: planned.variable_keep,
            gap: planned.gap,
            fallback: planned.fallback,
            ls_fallback: planned.ls_fallback,
            epsilon_flagged: planned.epsilon_flagged,
            epsilon_crit,
            classifier_seconds: planned.classifier_seconds,
            dual_seconds: planned.dual_seconds,
            solve_seconds: planned.solve_seconds,
            total_seconds: planned.total_seconds,
        });
        previous = Some(planned.solution);
        state = next;
    }

    Ok(RunRecord {
        seed: scenario.seed,
        policy: policy_name,
        steps,
        completed,
    })
}

struct PlanOutcome {
    solution: solver::Solution,
    constraint_keep: f64,
    variable_keep: f64,
    gap: f64,
    fallback: bool,
    ls_fallback: bool,
    epsilon_flagged: bool,
    classifier_seconds: f64,
    dual_seconds: f64,
    solve_seconds: f64,
    total_seconds: f64,
}

impl PlanOutcome {
    fn full(solution: solver::Solution) -> Self {
        Self {
            constraint_keep: 1.0,
            variable_keep: 1.0,
            gap: f64::INFINITY,
            fallback: false,
            ls_fallback: false,
            epsilon_flagged: false,
            classifier_seconds: 0.0,
            dual_seconds: 0.0,
            solve_seconds: solution.solve_seconds,
            total_seconds: solution.solve_seconds,
            solution,
        }
    }

    fn reduced(outcome: ShieldOutcome, program: &RegularizedProgram) -> Self {
        Self {
            constraint_keep: outcome
                .screen
                .constraint_keep_rate(program.n_screenable()),
            variable_keep: outcome.screen.variable_keep_rate(program.n_regularized()),
            gap: outcome.screen.gap,
            fallback: outcome.fallback,
            ls_fallback: outcome.ls_fallback,
            epsilon_flagged: outcome.screen.epsilon_flagged,
            classifier_seconds: outcome.timings.classifier,
            dual_seconds: outcome.timings.dual_approx,
            solve_seconds: outcome.timings.reduced_solve,
            total_seconds: outcome.timings.total,
            solution: outcome.solution,
        }
    }
}

fn infeasible_record(step: usize, state: &SimState, epsilon_crit: f64) -> StepRecord {
    StepRecord {
        step,
        feasible: false,
        collision: false,
        ego: [state.ego[0], state.ego[1]],
        objective: f64::NAN,
        original_violation: 0.0,
        constraint_keep: 1.0,
        variable_keep: 1.0,
        gap: f64::INFINITY,
        fallback: false,
        ls_fallback: false,
        epsilon_flagged: false,
        epsilon_crit,
        classifier_seconds: 0.0,
        dual_seconds: 0.0,
        solve_seconds: 0.0,
        total_seconds: 0.0,
    }
}

/// Rolls the full (untightened) policy through a scenario and returns every
/// step's program, states included as featured scene snapshots — the raw
/// material for training-data collection.
pub fn collect_step_programs(
    scenario: &Scenario,
    params: &SimParams,
) -> Result<Vec<RegularizedProgram>, Error> {
    let layout = params.layout();
    let stage_layout = layout.stage_layout();
    let mut state = initial_state(scenario, params);
    let mut previous: Option<solver::Solution> = None;
    let mut programs = Vec::with_capacity(params.steps);
    for _ in 0..params.steps {
        let program = build_step_program(scenario, params, &state)?;
        let warm = match &previous {
            Some(prev) => Some(solver::shift_warm_start(prev, &stage_layout)?),
            None => None,
        };
        let solution = match solver::solve_original(&program, warm.as_ref()) {
            Ok(solution) => solution,
            Err(Error::Infeasible(_)) => break,
            Err(other) => return Err(other),
        };
        let input = Vector2::new(
            solution.theta[layout.input_index(0, 0)],
            solution.theta[layout.input_index(0, 1)],
        );
        let plan = planned_positions(params, &state, &solution.theta);
        let mut next = advance(scenario, params, &state, input);
        let mut shifted: Vec<Vector2<f64>> = plan[1..].to_vec();
        let last = *plan.last().expect("horizon is nonzero");
        let prev = plan[plan.len() - 2];
        shifted.push(last + (last - prev));
        next.plan = shifted;
        programs.push(program);
        previous = Some(solution);
        state = next;
    }
    Ok(programs)
}

/// Aggregated sweep row for one (ε, λ) grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub lambda: f64,
    pub mean_constraint_keep: f64,
    pub mean_variable_keep: f64,
    pub feasible_fraction: f64,
    pub collisions: usize,
    pub mean_total_seconds: f64,
    pub median_total_seconds: f64,
}

/// Runs the reduced policy over every scenario at each (ε, λ) grid point
/// (scenarios in parallel) and aggregates per point.
pub fn sweep(
    scenarios: &[Scenario],
    params: &SimParams,
    epsilons: &[f64],
    lambdas: &[f64],
    classifier: &(dyn ClassifyDual + Sync),
    config: &ShieldConfig,
) -> Result<Vec<SweepRow>, Error> {
    let mut rows = Vec::with_capacity(epsilons.len() * lambdas.len());
    for &epsilon in epsilons {
        for &lambda in lambdas {
            let point = SimParams {
                epsilon,
                lambda,
                ..params.clone()
            };
            let runs: Result<Vec<RunRecord>, Error> = scenarios
                .par_iter()
                .map(|scenario| {
                    simulate(
                        scenario,
                        &point,
                        Policy::Reduced {
                            classifier,
                            config: config.clone(),
                        },
                    )
                })
                .collect();
            let runs = runs?;
            let all_steps: Vec<&StepRecord> = runs.iter().flat_map(|r| r.steps.iter()).collect();
            rows.push(SweepRow {
                epsilon,
                lambda,
                mean_constraint_keep: mean(all_steps.iter().map(|s| s.constraint_keep)),
                mean_variable_keep: mean(all_steps.iter().map(|s| s.variable_keep)),
                feasible_fraction: mean(
                    all_steps.iter().map(|s| if s.feasible { 1.0 } else { 0.0 }),
                ),
                collisions: all_steps.iter().filter(|s| s.collision).count(),
                mean_total_seconds: mean(all_steps.iter().map(|s| s.total_seconds)),
                median_total_seconds: median(
                    all_steps.iter().map(|s| s.total_seconds).collect::<Vec<f64>>(),
                ),
            });
        }
    }
    Ok(rows)
}
