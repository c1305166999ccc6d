//! Primal solver for the regularized QP.
//!
//! The nonsmooth objective is lifted to its epigraph form over (θ, s): each
//! regularized coordinate gets an auxiliary bound s_j with rows
//! [Sθ − s ≤ 0; −Sθ − s ≤ 0; −s ≤ 0] appended to the inequality system, and
//! the objective gains the linear term λ·1ᵀs. The lifted QP is solved by the
//! Clarabel interior-point method, after which an active-set polish step
//! resolves the detected active face as an equality-constrained QP so that
//! active multipliers, exact zeros of Sθ, and complementarity products are
//! recovered to near machine precision. Multipliers of the lifted rows map
//! back to the multipliers of the original problem via g = g₁ − g₂.

use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};

use crate::dual::DualPoint;
use crate::problem::{EpigraphProgram, RegularizedProgram};
use crate::Error;

/// Terminal state of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Converged (possibly after polish) to optimality tolerances.
    Optimal,
    /// The backend stopped on its iteration or progress limits without a
    /// certificate either way; the returned point is its best iterate.
    IterationCap,
}

/// Result of a primal solve, in original coordinates.
#[derive(Debug, Clone)]
pub struct Solution {
    /// Primal decision vector θ.
    pub theta: DVector<f64>,
    /// Epigraph bounds s (one per regularized coordinate; s_j = |[Sθ]_j| at
    /// optima).
    pub s: DVector<f64>,
    /// Objective value ½θᵀQθ + cᵀθ + λ‖Sθ‖₁ at θ.
    pub objective: f64,
    pub status: SolveStatus,
    /// Interior-point iterations used by the backend.
    pub iterations: usize,
    /// Multipliers (μ, η, ν, g) of the solved problem, when recovered.
    pub dual: Option<DualPoint>,
    /// Whether the active-set polish step was accepted.
    pub polished: bool,
    /// Wall-clock time of the solve.
    pub solve_seconds: f64,
}

/// One run of stage-indexed coordinates: block k occupies
/// `[offset + k·stage_len, offset + (k+1)·stage_len)`.
#[derive(Debug, Clone, Copy)]
pub struct StageGroup {
    pub offset: usize,
    pub stage_len: usize,
    pub stages: usize,
}

impl StageGroup {
    fn end(&self) -> usize {
        self.offset + self.stage_len * self.stages
    }
}

/// Stage structure of a solution vector, used to shift a previous solution
/// one stage forward as a warm-start hint for the next step of a receding
/// horizon: block k takes the old block k+1 and the terminal block is
/// duplicated.
#[derive(Debug, Clone, Default)]
pub struct StageLayout {
    pub theta_groups: Vec<StageGroup>,
    pub s_groups: Vec<StageGroup>,
}

/// Shifts `previous` one stage forward under `layout`. The objective value is
/// carried over unchanged (it is a hint object, not a certified solution) and
/// the multipliers are dropped.
pub fn shift_warm_start(previous: &Solution, layout: &StageLayout) -> Result<Solution, Error> {
    let mut theta = previous.theta.clone();
    let mut s = previous.s.clone();
    for (groups, vec, name) in [
        (&layout.theta_groups, &mut theta, "theta"),
        (&layout.s_groups, &mut s, "s"),
    ] {
        for group in groups.iter() {
            if group.end() > vec.len() {
                return Err(Error::LayoutMismatch(format!(
                    "stage group [{}..{}] exceeds {name} length {}",
                    group.offset,
                    group.end(),
                    vec.len()
                )));
            }
            for k in 0..group.stages.saturating_sub(1) {
                for i in 0..group.stage_len {
                    let dst = group.offset + k * group.stage_len + i;
                    let src = dst + group.stage_len;
                    vec[dst] = vec[src];
                }
            }
        }
    }
    Ok(Solution {
        theta,
        s,
        objective: previous.objective,
        status: previous.status,
        iterations: 0,
        dual: None,
        polished: false,
        solve_seconds: 0.0,
    })
}

/// Solves the ζ-tightened problem: every screenable right-hand side is
/// shifted to b̃ − ζ before solving. The `warm` hint is accepted for
/// interface stability; the interior-point backend does not consume it.
pub fn solve(program: &RegularizedProgram, warm: Option<&Solution>) -> Result<Solution, Error> {
    solve_epigraph(&EpigraphProgram::tightened(program), warm)
}

/// Solves the program exactly as stored, with no tightening.
pub fn solve_original(
    program: &RegularizedProgram,
    warm: Option<&Solution>,
) -> Result<Solution, Error> {
    solve_epigraph(&EpigraphProgram::original(program), warm)
}

/// KKT residual of (θ, s, y) for the ζ-tightened problem: the largest
/// violation across stationarity, primal and dual feasibility, the
/// complementarity products, and the regularizer support identity
/// |gᵀSθ − λ‖Sθ‖₁|.
pub fn kkt_residual(
    program: &RegularizedProgram,
    theta: &DVector<f64>,
    s: &DVector<f64>,
    dual: &DualPoint,
) -> f64 {
    kkt_residual_with_shift(program, theta, s, dual, program.zeta())
}

/// KKT residual for the program as stored (no tightening).
pub fn kkt_residual_original(
    program: &RegularizedProgram,
    theta: &DVector<f64>,
    s: &DVector<f64>,
    dual: &DualPoint,
) -> f64 {
    kkt_residual_with_shift(program, theta, s, dual, 0.0)
}

fn kkt_residual_with_shift(
    program: &RegularizedProgram,
    theta: &DVector<f64>,
    s: &DVector<f64>,
    dual: &DualPoint,
    shift: f64,
) -> f64 {
    let lambda = program.lambda();
    let mut worst: f64 = 0.0;
    let mut track = |v: f64| worst = worst.max(v);

    // Stationarity in θ: Qθ + c + Ãᵀμ + Āᵀη + Hᵀν + Sᵀg = 0.
    let mut stat = program.quadratic() * theta + program.linear();
    stat += program.screenable().matrix().transpose() * &dual.mu;
    stat += program.immutable().matrix().transpose() * &dual.eta;
    stat += program.equality().matrix().transpose() * &dual.nu;
    stat += program.s_transpose_apply(&dual.g);
    track(stat.amax());

    // Primal feasibility.
    let f_scr = program.screenable().residual(theta); // Ãθ − b̃
    for i in 0..f_scr.len() {
        track(f_scr[i] + shift); // rows must satisfy Ãθ ≤ b̃ − shift
    }
    let f_imm = program.immutable().residual(theta);
    for i in 0..f_imm.len() {
        track(f_imm[i]);
    }
    let f_eq = program.equality().residual(theta);
    for i in 0..f_eq.len() {
        track(f_eq[i].abs());
    }
    let s_theta = program.s_apply(theta);
    for i in 0..s_theta.len() {
        track(s_theta[i].abs() - s[i]); // epigraph feasibility s ≥ |Sθ|
    }

    // Dual feasibility.
    for &m in dual.mu.iter() {
        track(-m);
    }
    for &e in dual.eta.iter() {
        track(-e);
    }
    for &g in dual.g.iter() {
        track(g.abs() - lambda);
    }

    // Complementarity: inequality rows against their tightened residuals, and
    // the epigraph rows through the canonical split g = g₁ − g₂, γ = λ − |g|.
    for i in 0..f_scr.len() {
        track((dual.mu[i] * (f_scr[i] + shift)).abs());
    }
    for i in 0..f_imm.len() {
        track((dual.eta[i] * f_imm[i]).abs());
    }
    for i in 0..s_theta.len() {
        let g1 = dual.g[i].max(0.0);
        let g2 = (-dual.g[i]).max(0.0);
        let gamma = lambda - dual.g[i].abs();
        track((g1 * (s_theta[i] - s[i])).abs());
        track((g2 * (-s_theta[i] - s[i])).abs());
        track((gamma * s[i]).abs());
    }

    // Support identity of the regularizer subgradient.
    track((dual.g.dot(&s_theta) - lambda * s_theta.abs().sum()).abs());

    worst
}

// ---------------------------------------------------------------------------
// Backend
// ---------------------------------------------------------------------------

/// Dense epigraph system assembled once per solve.
struct EpiSystem {
    p: DMatrix<f64>,
    qlin: DVector<f64>,
    h: DMatrix<f64>,
    hrhs: DVector<f64>,
    g: DMatrix<f64>,
    r: DVector<f64>,
}

fn solve_epigraph(epi: &EpigraphProgram, _warm: Option<&Solution>) -> Result<Solution, Error> {
    let start = Instant::now();
    let base = epi.base();
    let n = base.n();
    let q = base.n_regularized();
    let (p, qlin) = epi.cost();
    let (h, hrhs) = epi.equality_system();
    let (g, r) = epi.inequality_system();
    let sys = EpiSystem {
        p,
        qlin,
        h,
        hrhs,
        g,
        r,
    };
    let nv = epi.n_vars();

    if nv == 0 {
        // No variables left: the system is feasible iff every residual
        // constant row is consistent on its own.
        for i in 0..sys.hrhs.len() {
            if sys.hrhs[i].abs() > 1e-9 {
                return Err(Error::Infeasible(format!(
                    "equality row {i} reduces to 0 = {}",
                    sys.hrhs[i]
                )));
            }
        }
        for i in 0..sys.r.len() {
            if sys.r[i] < -1e-9 {
                return Err(Error::Infeasible(format!(
                    "inequality row {i} reduces to 0 <= {}",
                    sys.r[i]
                )));
            }
        }
        return Ok(Solution {
            theta: DVector::zeros(0),
            s: DVector::zeros(0),
            objective: 0.0,
            status: SolveStatus::Optimal,
            iterations: 0,
            dual: Some(DualPoint {
                mu: DVector::zeros(0),
                eta: DVector::zeros(0),
                nu: DVector::zeros(0),
                g: DVector::zeros(0),
            }),
            polished: true,
            solve_seconds: start.elapsed().as_secs_f64(),
        });
    }

    // Unconstrained shortcut: no rows at all means θ = −Q⁻¹c in closed form.
    if sys.g.nrows() == 0 && sys.h.nrows() == 0 {
        let chol = nalgebra::Cholesky::new(base.quadratic().clone()).ok_or_else(|| {
            Error::Numerical("quadratic term is not positive definite".to_string())
        })?;
        let theta = -chol.solve(base.linear());
        let objective = base.objective(&theta);
        return Ok(Solution {
            theta,
            s: DVector::zeros(0),
            objective,
            status: SolveStatus::Optimal,
            iterations: 0,
            dual: Some(DualPoint {
                mu: DVector::zeros(0),
                eta: DVector::zeros(0),
                nu: DVector::zeros(0),
                g: DVector::zeros(0),
            }),
            polished: true,
            solve_seconds: start.elapsed().as_secs_f64(),
        });
    }

    let (mut x, mut nu, mut z, iterations) = run_interior_point(&sys)?;

    // Active-set polish: re-solve the detected active face as an
    // equality-constrained QP and keep the result when it lowers the
    // first-order error.
    let mut polished = false;
    let base_measure = epi_kkt_measure(&sys, &x, &nu, &z);
    if let Some((px, pnu, pz)) = polish(&sys, &x, &z) {
        let polished_measure = epi_kkt_measure(&sys, &px, &pnu, &pz);
        if polished_measure <= base_measure {
            x = px;
            nu = pnu;
            z = pz;
            polished = true;
        }
    }

    let final_measure = epi_kkt_measure(&sys, &x, &nu, &z);
    let theta = x.rows(0, n).into_owned();
    let s = x.rows(n, q).into_owned();
    let c_rows = base.n_screenable();
    let m_rows = base.n_immutable();
    let mu = z.rows(0, c_rows).into_owned();
    let eta = z.rows(c_rows, m_rows).into_owned();
    let g1 = z.rows(c_rows + m_rows, q).into_owned();
    let g2 = z.rows(c_rows + m_rows + q, q).into_owned();
    let dual = DualPoint {
        mu,
        eta,
        nu,
        g: g1 - g2,
    };
    let objective = base.objective(&theta);
    let status = if polished || final_measure <= 1e-6 {
        SolveStatus::Optimal
    } else {
        SolveStatus::IterationCap
    };
    Ok(Solution {
        theta,
        s,
        objective,
        status,
        iterations,
        dual: Some(dual),
        polished,
        solve_seconds: start.elapsed().as_secs_f64(),
    })
}

fn run_interior_point(
    sys: &EpiSystem,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, usize), Error> {
    let p_rows = sys.h.nrows();
    let m_rows = sys.g.nrows();
    let nv = sys.qlin.len();

    let p_csc = dense_to_csc_upper(&sys.p);
    let mut a_dense = DMatrix::zeros(p_rows + m_rows, nv);
    a_dense.view_mut((0, 0), (p_rows, nv)).copy_from(&sys.h);
    a_dense.view_mut((p_rows, 0), (m_rows, nv)).copy_from(&sys.g);
    let a_csc = dense_to_csc(&a_dense);
    let mut b = Vec::with_capacity(p_rows + m_rows);
    b.extend_from_slice(sys.hrhs.as_slice());
    b.extend_from_slice(sys.r.as_slice());
    let mut cones = Vec::new();
    if p_rows > 0 {
        cones.push(SupportedConeT::ZeroConeT(p_rows));
    }
    if m_rows > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(m_rows));
    }

    let attempt = |tol: f64| -> (SolverStatus, Vec<f64>, Vec<f64>, usize) {
        let settings = DefaultSettings {
            verbose: false,
            tol_gap_abs: tol,
            tol_gap_rel: tol,
            tol_feas: tol,
            max_iter: 200,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(
            &p_csc,
            sys.qlin.as_slice(),
            &a_csc,
            &b,
            &cones,
            settings,
        );
        solver.solve();
        (
            solver.solution.status,
            solver.solution.x.clone(),
            solver.solution.z.clone(),
            solver.solution.iterations as usize,
        )
    };

    let (mut status, mut x, mut z, mut iters) = attempt(1e-9);
    if !matches!(status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
        let retry = attempt(1e-8);
        if matches!(retry.0, SolverStatus::Solved | SolverStatus::AlmostSolved) {
            status = retry.0;
            x = retry.1;
            z = retry.2;
            iters = retry.3;
        }
    }

    match status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            return Err(Error::Infeasible(
                "interior-point method found a primal infeasibility certificate".to_string(),
            ));
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            return Err(Error::Numerical(
                "interior-point method reported dual infeasibility on a problem that should \
                 be bounded"
                    .to_string(),
            ));
        }
        other => {
            // Keep the best iterate; the caller sees IterationCap status if
            // the polish cannot rescue it.
            log::warn!("interior-point backend stopped with status {other:?}");
        }
    }

    let x = DVector::from_vec(x);
    let z_full = DVector::from_vec(z);
    let nu = z_full.rows(0, p_rows).into_owned();
    let z_ineq = z_full.rows(p_rows, m_rows).into_owned();
    Ok((x, nu, z_ineq, iters))
}

/// Largest first-order violation of the epigraph KKT system at (x, ν, z).
fn epi_kkt_measure(sys: &EpiSystem, x: &DVector<f64>, nu: &DVector<f64>, z: &DVector<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    let mut track = |v: f64| worst = worst.max(v);
    let mut stat = &sys.p * x + &sys.qlin;
    if sys.h.nrows() > 0 {
        stat += sys.h.transpose() * nu;
    }
    if sys.g.nrows() > 0 {
        stat += sys.g.transpose() * z;
    }
    track(stat.amax());
    if sys.h.nrows() > 0 {
        track((&sys.h * x - &sys.hrhs).amax());
    }
    let slack = &sys.r - &sys.g * x;
    for i in 0..slack.len() {
        track(-slack[i]);
        track(-z[i]);
        track((z[i] * slack[i]).abs());
    }
    worst
}

/// Equality-constrained re-solve of the detected active face. Iteratively
/// drops active rows whose multipliers come out negative and adds rows the
/// candidate violates, a bounded number of times.
fn polish(
    sys: &EpiSystem,
    x: &DVector<f64>,
    z: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let m_rows = sys.g.nrows();
    let slack = &sys.r - &sys.g * x;
    let mut active: Vec<bool> = (0..m_rows)
        .map(|i| z[i] > slack[i] || slack[i] <= 1e-9)
        .collect();

    for _round in 0..10 {
        let act: Vec<usize> = (0..m_rows).filter(|&i| active[i]).collect();
        let (px, pnu, z_act) = solve_active_face(sys, &act)?;

        let mut changed = false;
        for (slot, &i) in act.iter().enumerate() {
            if z_act[slot] < -1e-9 {
                active[i] = false;
                changed = true;
            }
        }
        if !changed {
            let slack_new = &sys.r - &sys.g * &px;
            for i in 0..m_rows {
                if !active[i] && slack_new[i] < -1e-9 {
                    active[i] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            let mut pz = DVector::zeros(m_rows);
            for (slot, &i) in act.iter().enumerate() {
                pz[i] = z_act[slot].max(0.0);
            }
            return Some((px, pnu, pz));
        }
    }
    None
}

/// Solves the KKT system of the equality-constrained QP on one active face.
fn solve_active_face(
    sys: &EpiSystem,
    active: &[usize],
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let nv = sys.qlin.len();
    let p_rows = sys.h.nrows();
    let ka = active.len();
    let dim = nv + p_rows + ka;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (nv, nv)).copy_from(&sys.p);
    for i in 0..p_rows {
        for j in 0..nv {
            kkt[(nv + i, j)] = sys.h[(i, j)];
            kkt[(j, nv + i)] = sys.h[(i, j)];
        }
    }
    for (slot, &row) in active.iter().enumerate() {
        for j in 0..nv {
            kkt[(nv + p_rows + slot, j)] = sys.g[(row, j)];
            kkt[(j, nv + p_rows + slot)] = sys.g[(row, j)];
        }
    }
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, nv).copy_from(&(-&sys.qlin));
    rhs.rows_mut(nv, p_rows).copy_from(&sys.hrhs);
    for (slot, &row) in active.iter().enumerate() {
        rhs[nv + p_rows + slot] = sys.r[row];
    }

    let lu = kkt.clone().full_piv_lu();
    let sol = match lu.solve(&rhs) {
        Some(sol) if (&kkt * &sol - &rhs).amax() <= 1e-7 => sol,
        _ => {
            // Degenerate face (e.g. duplicated rows): take the minimum-norm
            // least-squares KKT solution instead.
            let svd = kkt.clone().svd(true, true);
            let sol = svd.solve(&rhs, 1e-12).ok()?;
            if (&kkt * &sol - &rhs).amax() > 1e-7 {
                return None;
            }
            sol
        }
    };
    let x = sol.rows(0, nv).into_owned();
    let nu = sol.rows(nv, p_rows).into_owned();
    let z_act = sol.rows(nv + p_rows, ka).into_owned();
    Some((x, nu, z_act))
}

fn dense_to_csc(a: &DMatrix<f64>) -> CscMatrix<f64> {
    let (m, n) = a.shape();
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..n {
        for i in 0..m {
            let v = a[(i, j)];
            if v != 0.0 {
                rowval.push(i);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

/// Upper-triangular CSC of a symmetric matrix (the backend's convention for
/// the quadratic cost).
fn dense_to_csc_upper(a: &DMatrix<f64>) -> CscMatrix<f64> {
    let (m, n) = a.shape();
    debug_assert_eq!(m, n);
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..n {
        for i in 0..=j {
            let v = a[(i, j)];
            if v != 0.0 {
                rowval.push(i);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}
