//! Certified screening and the guarded reduce-then-solve step.
//!
//! A classifier proposes which screenable constraints are active (μ̃) and
//! which regularizer subgradients are saturated (g̃). Those guesses pin a
//! face of the dual feasible set; solving the dual restricted to that face is
//! a single linear solve and yields an approximate dual point ŷ. The
//! projected-gradient certificate converts ŷ into a radius `gap ≥ ‖ŷ − y*‖`,
//! and two interval tests then decide what may be discarded *regardless of
//! how wrong the classifier was*:
//!
//! * variable j is fixed to zero when `|ĝ_j| + gap < λ` (strict), and
//! * screenable row i is dropped when `|μ̂_i| + gap ≤ ε/ζ` (non-strict),
//!   provided ε ≤ ε_crit; otherwise constraint screening reports itself
//!   disabled for the step.
//!
//! The reduced, still ζ-tightened problem is solved and its solution embedded
//! back into full coordinates. If anything goes wrong — the reduction is
//! infeasible, or the embedded point violates an *original* screenable row
//! beyond tolerance — the step falls back to the full tightened solve, so the
//! worst case of a bad prediction is lost speed, never lost safety.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::dual::DualObjective;
use crate::problem::{ConstraintBlock, RegularizedProgram};
use crate::solver::{self, Solution};
use crate::Error;

/// Predicted activity pattern of the dual blocks: `mu_active[i]` marks
/// screenable row i as active (keep its multiplier free), `g_saturated[j]`
/// marks regularizer coordinate j as saturated at ±λ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualClass {
    pub mu_active: Vec<bool>,
    pub g_saturated: Vec<bool>,
}

impl DualClass {
    /// Marks everything active/saturated: the dual approximation keeps every
    /// multiplier and screening discards nothing through the class conjunct.
    pub fn all_active(n_screenable: usize, n_regularized: usize) -> Self {
        Self {
            mu_active: vec![true; n_screenable],
            g_saturated: vec![true; n_regularized],
        }
    }

    /// Marks everything inactive/unsaturated.
    pub fn none_active(n_screenable: usize, n_regularized: usize) -> Self {
        Self {
            mu_active: vec![false; n_screenable],
            g_saturated: vec![false; n_regularized],
        }
    }

    pub fn check_dims(&self, program: &RegularizedProgram) -> Result<(), Error> {
        if self.mu_active.len() != program.n_screenable()
            || self.g_saturated.len() != program.n_regularized()
        {
            return Err(Error::LayoutMismatch(format!(
                "class has {} constraint bits and {} saturation bits, program expects {} and {}",
                self.mu_active.len(),
                self.g_saturated.len(),
                program.n_screenable(),
                program.n_regularized()
            )));
        }
        Ok(())
    }

    /// Indices of screenable rows whose multipliers stay free in the reduced
    /// dual solve.
    pub fn kept_mu(&self) -> Vec<usize> {
        (0..self.mu_active.len())
            .filter(|&i| self.mu_active[i])
            .collect()
    }

    /// Indices of regularizer coordinates pinned to ±λ.
    pub fn saturated(&self) -> Vec<usize> {
        (0..self.g_saturated.len())
            .filter(|&j| self.g_saturated[j])
            .collect()
    }
}

/// Anything that can propose a dual activity pattern for a program.
pub trait ClassifyDual {
    fn classify(&self, program: &RegularizedProgram) -> Result<DualClass, Error>;
}

/// Outcome of the two screening tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenSets {
    /// Regularized coordinates certified to be zero at the optimum (indices
    /// into the regularizer slots, i.e. positions in `s_rows`).
    pub variables: Vec<usize>,
    /// Screenable rows certified safe to drop.
    pub constraints: Vec<usize>,
    /// Certified dual error radius used by both tests.
    pub gap: f64,
    /// True when ε > ε_crit forced constraint screening off for this step.
    pub epsilon_flagged: bool,
}

impl ScreenSets {
    /// Fraction of screenable rows kept (1.0 when there are none).
    pub fn constraint_keep_rate(&self, n_screenable: usize) -> f64 {
        if n_screenable == 0 {
            1.0
        } else {
            (n_screenable - self.constraints.len()) as f64 / n_screenable as f64
        }
    }

    /// Fraction of regularized coordinates kept (1.0 when there are none).
    pub fn variable_keep_rate(&self, n_regularized: usize) -> f64 {
        if n_regularized == 0 {
            1.0
        } else {
            (n_regularized - self.variables.len()) as f64 / n_regularized as f64
        }
    }
}

/// Variable test: `{j : |ĝ_j| + gap < λ and not saturated[j]}`. The
/// inequality is strict, so a coordinate whose certificate interval touches
/// the regularization level is never discarded.
pub fn screen_variables(
    g_hat: &DVector<f64>,
    saturated: &[bool],
    gap: f64,
    lambda: f64,
) -> Vec<usize> {
    (0..g_hat.len())
        .filter(|&j| !saturated[j] && g_hat[j].abs() + gap < lambda)
        .collect()
}

/// Constraint test: `{i : |μ̂_i| + gap ≤ ε/ζ and not active[i]}`, valid only
/// when ε ≤ ε_crit. Above that threshold the certified sensitivity argument
/// no longer covers the removal, so the set is empty and the flag is raised.
pub fn screen_constraints(
    mu_hat: &DVector<f64>,
    active: &[bool],
    gap: f64,
    epsilon: f64,
    zeta: f64,
    epsilon_crit: f64,
) -> (Vec<usize>, bool) {
    if epsilon > epsilon_crit {
        return (Vec::new(), true);
    }
    let threshold = epsilon / zeta;
    let set = (0..mu_hat.len())
        .filter(|&i| !active[i] && mu_hat[i].abs() + gap <= threshold)
        .collect();
    (set, false)
}

/// A reduced program together with the bookkeeping needed to embed its
/// solution back into the full coordinate space (screened variables re-enter
/// as exact zeros, screened rows are simply gone).
#[derive(Debug, Clone)]
pub struct Reduction {
    pub program: RegularizedProgram,
    /// Full-space indices of the kept θ coordinates.
    pub kept_theta: Vec<usize>,
    /// Kept regularizer slots (positions into the full `s_rows`).
    pub kept_slots: Vec<usize>,
    /// Kept screenable row indices.
    pub kept_rows: Vec<usize>,
    n_full: usize,
    q_full: usize,
}

impl Reduction {
    /// Embeds a reduced θ into the full space, zero-filling screened
    /// coordinates.
    pub fn embed_theta(&self, theta_reduced: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::zeros(self.n_full);
        for (slot, &j) in self.kept_theta.iter().enumerate() {
            full[j] = theta_reduced[slot];
        }
        full
    }

    /// Restricts a full-space solution to the kept coordinates, for use as a
    /// warm hint for the reduced solve. Multipliers are dropped and the
    /// objective is not re-evaluated (hints are never read as results).
    pub fn restrict_hint(&self, full: &Solution) -> Solution {
        Solution {
            theta: DVector::from_iterator(
                self.kept_theta.len(),
                self.kept_theta.iter().map(|&j| full.theta[j]),
            ),
            s: DVector::from_iterator(
                self.kept_slots.len(),
                self.kept_slots.iter().map(|&j| full.s[j]),
            ),
            objective: full.objective,
            status: full.status,
            iterations: 0,
            dual: None,
            polished: false,
            solve_seconds: 0.0,
        }
    }

    /// Embeds a reduced solution: θ zero-filled, epigraph bounds zero at the
    /// screened slots, the objective re-evaluated on the full program.
    pub fn embed_solution(&self, base: &RegularizedProgram, reduced: &Solution) -> Solution {
        let theta = self.embed_theta(&reduced.theta);
        let mut s = DVector::zeros(self.q_full);
        for (slot, &j) in self.kept_slots.iter().enumerate() {
            s[j] = reduced.s[slot];
        }
        Solution {
            objective: base.objective(&theta),
            theta,
            s,
            status: reduced.status,
            iterations: reduced.iterations,
            dual: None,
            polished: reduced.polished,
            solve_seconds: reduced.solve_seconds,
        }
    }
}

/// Builds the reduced program: screened rows are deleted, screened
/// regularized coordinates are removed from θ (their columns drop out of
/// every block). An equality row whose entire support is removed while its
/// right-hand side is nonzero makes the reduction infeasible.
pub fn build_reduction(
    program: &RegularizedProgram,
    variables: &[usize],
    constraints: &[usize],
) -> Result<Reduction, Error> {
    let n = program.n();
    let q = program.n_regularized();
    let c_rows = program.n_screenable();
    for &j in variables {
        if j >= q {
            return Err(Error::Dimension(format!(
                "screened variable slot {j} out of range ({q} regularized coordinates)"
            )));
        }
    }
    for &i in constraints {
        if i >= c_rows {
            return Err(Error::Dimension(format!(
                "screened constraint {i} out of range ({c_rows} screenable rows)"
            )));
        }
    }

    let mut theta_removed = vec![false; n];
    let mut slot_removed = vec![false; q];
    for &j in variables {
        slot_removed[j] = true;
        theta_removed[program.s_rows()[j]] = true;
    }
    let mut row_removed = vec![false; c_rows];
    for &i in constraints {
        row_removed[i] = true;
    }

    let kept_theta: Vec<usize> = (0..n).filter(|&j| !theta_removed[j]).collect();
    let kept_slots: Vec<usize> = (0..q).filter(|&j| !slot_removed[j]).collect();
    let kept_rows: Vec<usize> = (0..c_rows).filter(|&i| !row_removed[i]).collect();
    let n_red = kept_theta.len();

    let select_cols = |m: &DMatrix<f64>, rows: &[usize]| -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), n_red, |r, c| m[(rows[r], kept_theta[c])])
    };

    let q_red = DMatrix::from_fn(n_red, n_red, |r, c| {
        program.quadratic()[(kept_theta[r], kept_theta[c])]
    });
    let c_red = DVector::from_iterator(n_red, kept_theta.iter().map(|&j| program.linear()[j]));

    let scr = program.screenable();
    let screenable_red = ConstraintBlock::new(
        select_cols(scr.matrix(), &kept_rows),
        DVector::from_iterator(kept_rows.len(), kept_rows.iter().map(|&i| scr.rhs()[i])),
    )?;
    let imm = program.immutable();
    let all_imm: Vec<usize> = (0..imm.rows()).collect();
    let immutable_red = ConstraintBlock::new(select_cols(imm.matrix(), &all_imm), imm.rhs().clone())?;
    let eq = program.equality();
    let all_eq: Vec<usize> = (0..eq.rows()).collect();
    let eq_matrix_red = select_cols(eq.matrix(), &all_eq);
    for i in 0..eq.rows() {
        let support: f64 = (0..n_red).map(|c| eq_matrix_red[(i, c)].abs()).sum();
        if support <= 1e-14 && eq.rhs()[i].abs() > 1e-9 {
            return Err(Error::Infeasible(format!(
                "equality row {i} loses its entire support under the reduction but requires {}",
                eq.rhs()[i]
            )));
        }
    }
    let equality_red = ConstraintBlock::new(eq_matrix_red, eq.rhs().clone())?;

    // Remap kept regularizer slots to reduced coordinate indices.
    let mut position = vec![usize::MAX; n];
    for (slot, &j) in kept_theta.iter().enumerate() {
        position[j] = slot;
    }
    let s_rows_red: Vec<usize> = kept_slots
        .iter()
        .map(|&j| position[program.s_rows()[j]])
        .collect();

    let mut reduced = RegularizedProgram::new(
        q_red,
        c_red,
        screenable_red,
        immutable_red,
        equality_red,
        s_rows_red,
        program.lambda(),
        program.zeta(),
        program.epsilon(),
    )?;
    reduced.set_feature(program.feature().cloned());

    Ok(Reduction {
        program: reduced,
        kept_theta,
        kept_slots,
        kept_rows,
        n_full: n,
        q_full: q,
    })
}

/// Knobs of the guarded step.
#[derive(Debug, Clone)]
pub struct ShieldConfig {
    /// Ignore the classifier in the screening tests (the certificate alone
    /// decides); the classifier still seeds the dual approximation.
    pub certificate_only: bool,
    /// Largest tolerated violation of an original screenable row by the
    /// embedded solution before the step falls back to the full solve.
    pub violation_tol: f64,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        Self {
            certificate_only: false,
            violation_tol: 1e-9,
        }
    }
}

/// Wall-clock stage breakdown of one step, in seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageSeconds {
    /// Classifier query.
    pub classifier: f64,
    /// Dual restriction, linear solve(s), projection, and certificate.
    pub dual_approx: f64,
    /// Reduced (or fallback full) primal solve.
    pub reduced_solve: f64,
    /// Whole step.
    pub total: f64,
}

/// Result of one guarded screen-and-solve step.
#[derive(Debug, Clone)]
pub struct ShieldOutcome {
    /// Solution of the ζ-tightened problem in full coordinates.
    pub solution: Solution,
    pub screen: ScreenSets,
    /// Classes as returned by the classifier.
    pub class: DualClass,
    pub timings: StageSeconds,
    /// True when the step had to re-solve the full problem.
    pub fallback: bool,
    /// True when the reduced dual system was singular and the minimum-norm
    /// least-squares path produced ŷ.
    pub ls_fallback: bool,
}

/// One guarded step: classify → restricted dual solve → certificate →
/// screening → reduced tightened solve → embed, with a full-solve fallback.
/// The optional `warm` hint (full coordinates) is restricted to the kept
/// coordinates for the reduced solve and forwarded whole to any fallback.
pub fn shield_step(
    program: &RegularizedProgram,
    classifier: &dyn ClassifyDual,
    config: &ShieldConfig,
    warm: Option<&Solution>,
) -> Result<ShieldOutcome, Error> {
    let t_start = Instant::now();

    let t0 = Instant::now();
    let class = classifier.classify(program)?;
    class.check_dims(program)?;
    let classifier_seconds = t0.elapsed().as_secs_f64();

    // Restricted dual solve with two-pass sign pinning: saturated
    // coordinates are first pinned to +λ, then re-pinned to λ·sign([Sθ̂]_j)
    // at the interim witness when that differs.
    let t1 = Instant::now();
    let objective = DualObjective::new(program)?;
    let lambda = program.lambda();
    let keep_mu = class.kept_mu();
    let saturated = class.saturated();
    let pins: Vec<(usize, f64)> = saturated.iter().map(|&j| (j, lambda)).collect();
    let (mut y_hat, mut ls_fallback) = objective.solve_reduced_unconstrained(&keep_mu, &pins)?;
    if !saturated.is_empty() && lambda > 0.0 {
        let witness = objective.theta_hat(&y_hat)?;
        let signed = program.s_apply(&witness);
        let repinned: Vec<(usize, f64)> = saturated
            .iter()
            .map(|&j| (j, if signed[j] < 0.0 { -lambda } else { lambda }))
            .collect();
        if repinned.iter().zip(pins.iter()).any(|(a, b)| a.1 != b.1) {
            let (y2, ls2) = objective.solve_reduced_unconstrained(&keep_mu, &repinned)?;
            y_hat = y2;
            ls_fallback |= ls2;
        }
    }
    let mut y_hat = objective.project(&y_hat)?;
    let mut gap = objective.gap(&y_hat)?;
    // When the restricted solve lands off the optimal face (an imperfect
    // class pattern), the certificate is too loose to screen constraints. A
    // short best-effort projected-gradient refinement often recovers a
    // usable radius; if it cannot, the step simply screens less.
    let target_gap = 0.5 * (program.epsilon() / program.zeta());
    if gap.is_finite() && gap > target_gap && objective.rho_underbar().is_finite() {
        let tol = (target_gap * objective.rho_underbar() / (1.0 + objective.rho_bar()))
            .max(1e-13);
        let (refined, _) = objective.refine(Some(&y_hat), tol, 400)?;
        let refined_gap = objective.gap(&refined)?;
        if refined_gap < gap {
            y_hat = refined;
            gap = refined_gap;
        }
    }
    let dual_seconds = t1.elapsed().as_secs_f64();

    // Screening tests. In certificate-only mode the class conjunct is
    // dropped, which is exactly what all-false classes evaluate to.
    let screen_class = if config.certificate_only {
        DualClass::none_active(program.n_screenable(), program.n_regularized())
    } else {
        class.clone()
    };
    let variables = screen_variables(&y_hat.g, &screen_class.g_saturated, gap, lambda);
    let (constraints, epsilon_flagged) = screen_constraints(
        &y_hat.mu,
        &screen_class.mu_active,
        gap,
        program.epsilon(),
        program.zeta(),
        program.epsilon_crit(),
    );
    let screen = ScreenSets {
        variables,
        constraints,
        gap,
        epsilon_flagged,
    };

    // Reduced solve, then embed; any feasibility trouble falls back to the
    // full tightened problem.
    let t2 = Instant::now();
    let mut fallback = false;
    let mut solution = match build_reduction(program, &screen.variables, &screen.constraints) {
        Ok(reduction) => {
            let hint = warm.map(|w| reduction.restrict_hint(w));
            match solver::solve(&reduction.program, hint.as_ref()) {
                Ok(reduced) => reduction.embed_solution(program, &reduced),
                Err(Error::Infeasible(_)) => {
                    fallback = true;
                    solver::solve(program, warm)?
                }
                Err(other) => return Err(other),
            }
        }
        Err(Error::Infeasible(_)) => {
            fallback = true;
            solver::solve(program, warm)?
        }
        Err(other) => return Err(other),
    };
    if !fallback {
        let residual = program.screenable().residual(&solution.theta);
        if residual.iter().any(|&r| r > config.violation_tol) {
            fallback = true;
            solution = solver::solve(program, warm)?;
        }
    }
    let reduced_seconds = t2.elapsed().as_secs_f64();

    Ok(ShieldOutcome {
        solution,
        screen,
        class,
        timings: StageSeconds {
            classifier: classifier_seconds,
            dual_approx: dual_seconds,
            reduced_solve: reduced_seconds,
            total: t_start.elapsed().as_secs_f64(),
        },
        fallback,
        ls_fallback,
    })
}
