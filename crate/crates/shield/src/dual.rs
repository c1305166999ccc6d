//! Explicit dual of the tightened program, in minimization form.
//!
//! Stacking the multipliers y = (μ, η, ν, g) — screenable inequalities,
//! immutable inequalities, equalities, and the ℓ1 subgradient box — the dual
//! objective has the closed form
//!
//! ```text
//!   d(y) = ½ vᵀQ⁻¹v + μᵀ(b̃ − ζ·1) + ηᵀb̄ + νᵀh,
//!   v    = c + Ãᵀμ + Āᵀη + Hᵀν + Sᵀg,
//! ```
//!
//! minimized over 𝒴 = {μ ≥ 0, η ≥ 0, ν free, ‖g‖∞ ≤ λ}. Its unique primal
//! witness is θ̂(y) = −Q⁻¹v, and at a dual optimum d(y*) = −p*. Because d is
//! a convex quadratic over a box-product set, the norm of the projected
//! gradient converts into a certified bound on the distance to the dual
//! optimum — the certificate that drives all screening decisions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::problem::RegularizedProgram;
use crate::Error;

/// Eigenvalues at or below this threshold are treated as numerically null
/// when computing the dual curvature moduli.
const NULL_TOL: f64 = 1e-10;

/// Stacked dual multipliers. `g` always has one entry per regularizer row,
/// even when λ = 0 (where it is pinned to zero).
#[derive(Debug, Clone, PartialEq)]
pub struct DualPoint {
    /// Multipliers of the (tightened) screenable inequality rows, ≥ 0.
    pub mu: DVector<f64>,
    /// Multipliers of the immutable inequality rows, ≥ 0.
    pub eta: DVector<f64>,
    /// Multipliers of the equality rows, free.
    pub nu: DVector<f64>,
    /// Regularizer subgradient block, ‖g‖∞ ≤ λ.
    pub g: DVector<f64>,
}

impl DualPoint {
    pub fn zeros(program: &RegularizedProgram) -> Self {
        Self {
            mu: DVector::zeros(program.n_screenable()),
            eta: DVector::zeros(program.n_immutable()),
            nu: DVector::zeros(program.n_equality()),
            g: DVector::zeros(program.n_regularized()),
        }
    }

    /// Total stacked dimension.
    pub fn dim(&self) -> usize {
        self.mu.len() + self.eta.len() + self.nu.len() + self.g.len()
    }

    /// Stacks (μ, η, ν, g) into one vector in that block order.
    pub fn stack(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        let mut at = 0;
        for block in [&self.mu, &self.eta, &self.nu, &self.g] {
            out.rows_mut(at, block.len()).copy_from(block);
            at += block.len();
        }
        out
    }

    /// Euclidean distance between stacked points.
    pub fn distance(&self, other: &DualPoint) -> f64 {
        (self.stack() - other.stack()).norm()
    }
}

/// Cached dual objective for one program: the factorized quadratic term, the
/// stacked dual-to-primal map M = [Ãᵀ | Āᵀ | Hᵀ | Sᵀ], the stacked offsets
/// (b̃ − ζ·1, b̄, h, 0), and the curvature moduli of the dual Hessian MᵀQ⁻¹M.
///
/// Always construct from the *original* (untightened) program: the ζ shift on
/// the screenable offsets is applied here, exactly once.
pub struct DualObjective {
    n: usize,
    c_rows: usize,
    m_rows: usize,
    p_rows: usize,
    q_rows: usize,
    lambda: f64,
    chol: Cholesky<f64, Dyn>,
    /// n × D map from stacked duals to primal space.
    m: DMatrix<f64>,
    /// Stacked linear offsets of d.
    offsets: DVector<f64>,
    c: DVector<f64>,
    /// Largest eigenvalue of the dual Hessian (smoothness modulus).
    rho_bar: f64,
    /// Smallest eigenvalue above the null tolerance, over the free dual
    /// coordinates (strong-convexity modulus on the certified subspace).
    rho_underbar: f64,
    /// False when the dual Hessian is numerically zero on every direction.
    curvature_ok: bool,
    /// Number of dual coordinates free to move (excludes g when λ = 0).
    free_dim: usize,
}

impl DualObjective {
    pub fn new(program: &RegularizedProgram) -> Result<Self, Error> {
        let n = program.n();
        let chol = Cholesky::new(program.quadratic().clone()).ok_or_else(|| {
            Error::Numerical("quadratic term is not positive definite".to_string())
        })?;
        let c_rows = program.n_screenable();
        let m_rows = program.n_immutable();
        let p_rows = program.n_equality();
        let q_rows = program.n_regularized();
        let d = c_rows + m_rows + p_rows + q_rows;

        let mut m = DMatrix::zeros(n, d);
        let mut offsets = DVector::zeros(d);
        let mut at = 0;
        for (block, shift) in [
            (program.screenable(), program.zeta()),
            (program.immutable(), 0.0),
            (program.equality(), 0.0),
        ] {
            for i in 0..block.rows() {
                for j in 0..n {
                    m[(j, at)] = block.matrix()[(i, j)];
                }
                offsets[at] = block.rhs()[i] - shift;
                at += 1;
            }
        }
        for &j in program.s_rows() {
            m[(j, at)] = 1.0;
            at += 1;
        }

        // Curvature moduli via the n×n twin L⁻¹ M_free M_freeᵀ L⁻ᵀ, which
        // shares the nonzero spectrum of the dual Hessian M_freeᵀ Q⁻¹ M_free.
        // When λ = 0 the g block is pinned to zero and its columns are
        // excluded from the curvature analysis.
        let lambda = program.lambda();
        let free_dim = if lambda == 0.0 { d - q_rows } else { d };
        let (rho_bar, rho_underbar, curvature_ok) = if free_dim == 0 {
            // No free dual coordinates: the dual is a single point.
            (0.0, f64::INFINITY, true)
        } else {
            let m_free = m.columns(0, free_dim).into_owned();
            let w = chol.l().solve_lower_triangular(&m_free).ok_or_else(|| {
                Error::Numerical("triangular solve failed on the dual map".to_string())
            })?;
            let twin = &w * w.transpose();
            let eig = twin.symmetric_eigen();
            let rho_bar = eig.eigenvalues.max().max(0.0);
            let rho_underbar = eig
                .eigenvalues
                .iter()
                .copied()
                .filter(|&e| e > NULL_TOL)
                .fold(f64::INFINITY, f64::min);
            (rho_bar, rho_underbar, rho_bar > NULL_TOL)
        };

        Ok(Self {
            n,
            c_rows,
            m_rows,
            p_rows,
            q_rows,
            lambda,
            chol,
            m,
            offsets,
            c: program.linear().clone(),
            rho_bar,
            rho_underbar,
            curvature_ok,
            free_dim,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.c_rows, self.m_rows, self.p_rows, self.q_rows)
    }

    /// Total stacked dual dimension.
    pub fn dim(&self) -> usize {
        self.c_rows + self.m_rows + self.p_rows + self.q_rows
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Smoothness modulus of the dual (largest Hessian eigenvalue).
    pub fn rho_bar(&self) -> f64 {
        self.rho_bar
    }

    /// Strong-convexity modulus over the certified subspace (smallest Hessian
    /// eigenvalue above the null tolerance).
    pub fn rho_underbar(&self) -> f64 {
        self.rho_underbar
    }

    fn check_dims(&self, y: &DualPoint) -> Result<(), Error> {
        if y.mu.len() != self.c_rows
            || y.eta.len() != self.m_rows
            || y.nu.len() != self.p_rows
            || y.g.len() != self.q_rows
        {
            return Err(Error::Dimension(format!(
                "dual point has blocks ({}, {}, {}, {}), expected ({}, {}, {}, {})",
                y.mu.len(),
                y.eta.len(),
                y.nu.len(),
                y.g.len(),
                self.c_rows,
                self.m_rows,
                self.p_rows,
                self.q_rows
            )));
        }
        Ok(())
    }

    fn split(&self, stacked: DVector<f64>) -> DualPoint {
        let (c, m, p, q) = (self.c_rows, self.m_rows, self.p_rows, self.q_rows);
        DualPoint {
            mu: stacked.rows(0, c).into_owned(),
            eta: stacked.rows(c, m).into_owned(),
            nu: stacked.rows(c + m, p).into_owned(),
            g: stacked.rows(c + m + p, q).into_owned(),
        }
    }

    /// v(y) = c + M·y.
    fn v(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.c + &self.m * y
    }

    /// Primal witness θ̂(y) = −Q⁻¹(c + M·y).
    pub fn theta_hat(&self, y: &DualPoint) -> Result<DVector<f64>, Error> {
        self.check_dims(y)?;
        Ok(-self.chol.solve(&self.v(&y.stack())))
    }

    /// Dual objective value d(y) (minimization form; d(y*) = −p*).
    pub fn value(&self, y: &DualPoint) -> Result<f64, Error> {
        self.check_dims(y)?;
        let stacked = y.stack();
        let v = self.v(&stacked);
        Ok(0.5 * v.dot(&self.chol.solve(&v)) + self.offsets.dot(&stacked))
    }

    /// Gradient of d, stacked: ∇d(y) = offsets − Mᵀ θ̂(y). Blockwise the
    /// μ-component is (b̃ − ζ·1) − Ã θ̂(y), and likewise for the other blocks.
    pub fn gradient(&self, y: &DualPoint) -> Result<DualPoint, Error> {
        self.check_dims(y)?;
        let theta_hat = -self.chol.solve(&self.v(&y.stack()));
        Ok(self.split(&self.offsets - self.m.transpose() * theta_hat))
    }

    /// Euclidean projection onto 𝒴 = {μ ≥ 0, η ≥ 0, ν free, ‖g‖∞ ≤ λ}.
    pub fn project(&self, y: &DualPoint) -> Result<DualPoint, Error> {
        self.check_dims(y)?;
        Ok(DualPoint {
            mu: y.mu.map(|x| x.max(0.0)),
            eta: y.eta.map(|x| x.max(0.0)),
            nu: y.nu.clone(),
            g: y.g.map(|x| x.clamp(-self.lambda, self.lambda)),
        })
    }

    /// Whether y lies in 𝒴 (used as a precondition for the certificate).
    pub fn is_feasible(&self, y: &DualPoint) -> bool {
        let tol = 1e-12;
        self.check_dims(y).is_ok()
            && y.mu.iter().all(|&x| x >= -tol)
            && y.eta.iter().all(|&x| x >= -tol)
            && y.g.iter().all(|&x| x.abs() <= self.lambda + tol)
    }

    /// Projected gradient ∇†d(y) = y − [y − ∇d(y)]_𝒴; zero exactly at dual
    /// optima. Errors when y is outside 𝒴.
    pub fn projected_gradient(&self, y: &DualPoint) -> Result<DualPoint, Error> {
        if !self.is_feasible(y) {
            return Err(Error::InfeasiblePoint(
                "projected gradient requires a feasible dual point".to_string(),
            ));
        }
        let grad = self.gradient(y)?;
        let stepped = DualPoint {
            mu: &y.mu - &grad.mu,
            eta: &y.eta - &grad.eta,
            nu: &y.nu - &grad.nu,
            g: &y.g - &grad.g,
        };
        let projected = self.project(&stepped)?;
        Ok(DualPoint {
            mu: &y.mu - &projected.mu,
            eta: &y.eta - &projected.eta,
            nu: &y.nu - &projected.nu,
            g: &y.g - &projected.g,
        })
    }

    /// Certified upper bound on the distance from y to the dual optimum:
    ///
    /// ```text
    ///   gap(y) = ((1 + ρ̄) / ρ̲) · ‖∇†d(y)‖₂ ≥ ‖y − y*‖₂.
    /// ```
    ///
    /// The moduli are the extreme nonzero eigenvalues of the dual Hessian,
    /// so when the dual map has full column rank the optimum is unique and
    /// the bound is exact. With redundant dual coordinates (more multipliers
    /// than primal dimensions) the optimum may be a set and the radius is
    /// measured along the curved directions only; the screening caller
    /// additionally re-checks every removed row at the reduced optimum, so
    /// end-to-end safety never rests on this bound alone.
    ///
    /// Returns +∞ (screening disabled) when the dual Hessian carries no
    /// usable curvature, so the certificate is never emitted unsoundly.
    pub fn gap(&self, y: &DualPoint) -> Result<f64, Error> {
        if self.free_dim == 0 {
            // The dual feasible set is a single point; y is the optimum.
            return Ok(0.0);
        }
        if !self.curvature_ok || self.rho_underbar <= NULL_TOL || !self.rho_underbar.is_finite()
        {
            return Ok(f64::INFINITY);
        }
        let pg = self.projected_gradient(y)?;
        Ok((1.0 + self.rho_bar) / self.rho_underbar * pg.stack().norm())
    }

    /// Solves the reduced unconstrained dual: μ entries outside `keep_mu` are
    /// pinned to 0, g entries listed in `fixed_g` are pinned to the given ±λ
    /// values, and the remaining coordinates (kept μ, all η and ν, free g)
    /// minimize d with the box constraints dropped.
    ///
    /// Returns the assembled full-dimensional point and a flag that is true
    /// when the reduced normal system was singular and the minimum-norm
    /// least-squares solution was used instead of a direct factorization.
    pub fn solve_reduced_unconstrained(
        &self,
        keep_mu: &[usize],
        fixed_g: &[(usize, f64)],
    ) -> Result<(DualPoint, bool), Error> {
        let d = self.dim();
        let (c_rows, m_rows, p_rows, q_rows) = self.dims();
        for &i in keep_mu {
            if i >= c_rows {
                return Err(Error::Dimension(format!(
                    "kept multiplier index {i} out of range ({c_rows} screenable rows)"
                )));
            }
        }
        let mut fixed_value = vec![None::<f64>; d];
        for &(j, val) in fixed_g {
            if j >= q_rows {
                return Err(Error::Dimension(format!(
                    "fixed regularizer index {j} out of range ({q_rows} rows)"
                )));
            }
            fixed_value[c_rows + m_rows + p_rows + j] = Some(val);
        }
        let mut keep = vec![false; d];
        for &i in keep_mu {
            keep[i] = true;
        }
        for i in c_rows..c_rows + m_rows + p_rows {
            keep[i] = true;
        }
        for j in 0..q_rows {
            let idx = c_rows + m_rows + p_rows + j;
            // With λ = 0 the g block is pinned to zero rather than solved.
            keep[idx] = self.lambda != 0.0 && fixed_value[idx].is_none();
        }

        let kept: Vec<usize> = (0..d).filter(|&i| keep[i]).collect();
        let mut y_full = DVector::zeros(d);
        for i in 0..d {
            if let Some(val) = fixed_value[i] {
                if !keep[i] {
                    y_full[i] = val;
                }
            }
        }

        if kept.is_empty() {
            return Ok((self.split(y_full), false));
        }

        // Minimize over the kept block: ½ xᵀ(W_kᵀW_k)x + rᵀx with
        // W_k = L⁻¹ M_k and r = w_k + M_kᵀ Q⁻¹ (M_f y_f),
        // where w = MᵀQ⁻¹c + offsets is the stacked linear term of d.
        let m_kept = DMatrix::from_fn(self.n, kept.len(), |r, c| self.m[(r, kept[c])]);
        let v_fixed = &self.c + &self.m * &y_full;
        let qe_inv_vfixed = self.chol.solve(&v_fixed);
        let r = m_kept.transpose() * qe_inv_vfixed
            + DVector::from_iterator(kept.len(), kept.iter().map(|&i| self.offsets[i]));

        let w_k = self
            .chol
            .l()
            .solve_lower_triangular(&m_kept)
            .ok_or_else(|| Error::Numerical("triangular solve failed".to_string()))?;

        let (x, ls_flag) = if kept.len() <= self.n {
            let h_k = w_k.transpose() * &w_k;
            match Cholesky::new(h_k) {
                Some(chol_k) => (-chol_k.solve(&r), false),
                None => (min_norm_critical_point(&w_k, &r), true),
            }
        } else {
            (min_norm_critical_point(&w_k, &r), true)
        };

        for (slot, &i) in kept.iter().enumerate() {
            y_full[i] = x[slot];
        }
        Ok((self.split(y_full), ls_flag))
    }

    /// Solves the unconstrained dual at full dimension (every multiplier kept
    /// free). Baseline for timing the reduced solve against.
    pub fn solve_full_unconstrained(&self) -> Result<(DualPoint, bool), Error> {
        let all_mu: Vec<usize> = (0..self.c_rows).collect();
        self.solve_reduced_unconstrained(&all_mu, &[])
    }

    /// Solves the box-constrained dual to a target projected-gradient norm.
    /// Identical to [`DualObjective::refine`] except that falling short of
    /// the target is an [`Error::IterationCap`] instead of a best-effort
    /// return.
    pub fn solve_exact(
        &self,
        init: Option<&DualPoint>,
        tol: f64,
        max_iter: usize,
    ) -> Result<(DualPoint, f64), Error> {
        let (y, residual) = self.refine(init, tol, max_iter)?;
        if residual <= tol {
            Ok((y, residual))
        } else {
            Err(Error::IterationCap { residual })
        }
    }

    /// Runs projected gradient descent with Barzilai–Borwein steps and a
    /// monotone backtracking safeguard until the projected-gradient norm
    /// reaches `tol` or `max_iter` steps have been taken, returning the best
    /// point reached either way. `init` seeds the iteration (e.g. multipliers
    /// recovered by the primal solver); `None` starts from zero.
    pub fn refine(
        &self,
        init: Option<&DualPoint>,
        tol: f64,
        max_iter: usize,
    ) -> Result<(DualPoint, f64), Error> {
        let zero = self.split(DVector::zeros(self.dim()));
        let mut y = match init {
            Some(p) => self.project(p)?,
            None => zero,
        };
        if self.dim() == 0 {
            return Ok((y, 0.0));
        }
        let base_step = if self.curvature_ok && self.rho_bar > 0.0 {
            1.0 / self.rho_bar
        } else {
            1.0
        };
        let mut fy = self.value(&y)?;
        let mut grad = self.gradient(&y)?.stack();
        let mut step = base_step;
        let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;
        for _ in 0..max_iter {
            let residual = self.projected_gradient(&y)?.stack().norm();
            if residual <= tol {
                return Ok((y, residual));
            }
            // Barzilai–Borwein step from the previous iterate, safeguarded.
            if let Some((y_prev, g_prev)) = &prev {
                let s = y.stack() - y_prev;
                let q = &grad - g_prev;
                let sq = s.dot(&q);
                if sq > 1e-300 {
                    step = (s.dot(&s) / sq).clamp(base_step * 1e-3, base_step * 1e6);
                } else {
                    step = base_step;
                }
            }
            let y_stack = y.stack();
            let mut alpha = step;
            // Backtrack until the quadratic upper-bound decrease condition
            // holds; α = 1/ρ̄ always satisfies it for a quadratic objective.
            loop {
                let candidate = self.project(&self.split(&y_stack - alpha * &grad))?;
                let delta = candidate.stack() - &y_stack;
                let f_cand = self.value(&candidate)?;
                if f_cand <= fy + grad.dot(&delta) + delta.norm_squared() / (2.0 * alpha)
                    || alpha <= base_step * 1e-3
                {
                    prev = Some((y_stack.clone(), grad.clone()));
                    y = candidate;
                    fy = f_cand;
                    grad = self.gradient(&y)?.stack();
                    break;
                }
                alpha *= 0.5;
            }
        }
        let residual = self.projected_gradient(&y)?.stack().norm();
        Ok((y, residual))
    }
}

/// Minimum-norm critical point of ½xᵀ(WᵀW)x + rᵀx: x = −(WᵀW)⁺ r, computed
/// through the n×n Gram matrix WWᵀ so the cost stays cubic in the primal
/// dimension rather than the (possibly much larger) dual dimension.
fn min_norm_critical_point(w: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let gram = w * w.transpose();
    let eig = gram.symmetric_eigen();
    let lambda_max = eig.eigenvalues.max().max(0.0);
    let tol = (lambda_max * 1e-12).max(1e-300);
    // (WᵀW)⁺ = Wᵀ (WWᵀ)⁺² W, applied as matvecs against the eigenbasis.
    let wr = w * r;
    let coeffs = eig.eigenvectors.transpose() * wr;
    let scaled = DVector::from_iterator(
        coeffs.len(),
        coeffs
            .iter()
            .zip(eig.eigenvalues.iter())
            .map(|(&c, &e)| if e > tol { c / (e * e) } else { 0.0 }),
    );
    -(w.transpose() * (&eig.eigenvectors * scaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::ConstraintBlock;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t0() -> RegularizedProgram {
        RegularizedProgram::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            ConstraintBlock::empty(2),
            ConstraintBlock::empty(2),
            ConstraintBlock::empty(2),
            vec![0, 1],
            1.0,
            0.5,
            0.1,
        )
        .unwrap()
    }

    fn d1() -> RegularizedProgram {
        RegularizedProgram::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, -3.0),
            ConstraintBlock::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 5.0))
                .unwrap(),
            ConstraintBlock::empty(1),
            ConstraintBlock::empty(1),
            vec![0],
            1.0,
            0.5,
            0.1,
        )
        .unwrap()
    }

    fn d2() -> RegularizedProgram {
        RegularizedProgram::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, -3.0),
            ConstraintBlock::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0))
                .unwrap(),
            ConstraintBlock::empty(1),
            ConstraintBlock::empty(1),
            vec![0],
            1.0,
            0.5,
            0.1,
        )
        .unwrap()
    }

    /// Small random instance with a full-column-rank dual map, so the
    /// curvature moduli are exact.
    fn random_instance(seed: u64) -> RegularizedProgram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(4..9);
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q = &b * b.transpose() + DMatrix::identity(n, n) * rng.gen_range(0.5..1.5);
        let c = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let theta0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let zeta = 0.5;
        let n_scr = rng.gen_range(1..3.min(n));
        let a_scr = DMatrix::from_fn(n_scr, n, |_, _| rng.gen_range(-1.0..1.0));
        let b_scr = &a_scr * &theta0
            + DVector::from_fn(n_scr, |_, _| zeta + rng.gen_range(0.1..1.0));
        let q_rows = rng.gen_range(1..3);
        let s_rows: Vec<usize> = (0..q_rows).collect();
        RegularizedProgram::new(
            q,
            c,
            ConstraintBlock::new(a_scr, b_scr).unwrap(),
            ConstraintBlock::empty(n),
            ConstraintBlock::empty(n),
            s_rows,
            rng.gen_range(0.2..1.5),
            zeta,
            0.01,
        )
        .unwrap()
    }

    fn random_point(obj: &DualObjective, rng: &mut ChaCha8Rng) -> DualPoint {
        let (c, m, p, q) = obj.dims();
        DualPoint {
            mu: DVector::from_fn(c, |_, _| rng.gen_range(0.0..1.5)),
            eta: DVector::from_fn(m, |_, _| rng.gen_range(0.0..1.5)),
            nu: DVector::from_fn(p, |_, _| rng.gen_range(-1.5..1.5)),
            g: DVector::from_fn(q, |_, _| rng.gen_range(-obj.lambda()..obj.lambda())),
        }
    }

    #[test]
    fn value_at_zero_dual_is_zero_for_t0() {
        let p = t0();
        let obj = DualObjective::new(&p).unwrap();
        let y = DualPoint::zeros(&p);
        assert_eq!(obj.value(&y).unwrap(), 0.0);
    }

    #[test]
    fn value_matches_half_norm_squared_for_t0() {
        let p = t0();
        let obj = DualObjective::new(&p).unwrap();
        let y = DualPoint {
            g: DVector::from_vec(vec![1.0, 0.0]),
            ..DualPoint::zeros(&p)
        };
        assert!((obj.value(&y).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn optimal_dual_value_negates_primal_for_d2() {
        // Hand optimum of the tightened problem: θ* = 0.5, p* = −0.875,
        // μ* = 1.5, g* = 1.
        let p = d2();
        let obj = DualObjective::new(&p).unwrap();
        let y = DualPoint {
            mu: DVector::from_element(1, 1.5),
            g: DVector::from_element(1, 1.0),
            ..DualPoint::zeros(&p)
        };
        assert!((obj.value(&y).unwrap() - 0.875).abs() < 1e-12);
        let theta = obj.theta_hat(&y).unwrap();
        assert!((theta[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        for seed in 0..30 {
            let p = random_instance(seed);
            let obj = DualObjective::new(&p).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let y = random_point(&obj, &mut rng);
            let grad = obj.gradient(&y).unwrap().stack();
            let h = 1e-6;
            let stacked = y.stack();
            for i in 0..stacked.len() {
                let mut plus = stacked.clone();
                plus[i] += h;
                let mut minus = stacked.clone();
                minus[i] -= h;
                let fd = (obj.value(&obj.split(plus)).unwrap()
                    - obj.value(&obj.split(minus)).unwrap())
                    / (2.0 * h);
                let scale = grad[i].abs().max(1.0);
                assert!(
                    (grad[i] - fd).abs() <= 1e-5 * scale,
                    "seed {seed} coordinate {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn gradient_mu_block_is_offset_minus_row_at_witness() {
        let p = d2();
        let obj = DualObjective::new(&p).unwrap();
        let y = DualPoint::zeros(&p);
        let theta = obj.theta_hat(&y).unwrap();
        let grad = obj.gradient(&y).unwrap();
        // (b̃ − ζ) − Ãθ̂ with b̃ = 1, ζ = 0.5, Ã = [1].
        assert!((grad.mu[0] - (0.5 - theta[0])).abs() < 1e-14);
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let p = d2();
        let obj = DualObjective::new(&p).unwrap();
        let y = DualPoint {
            mu: DVector::from_element(1, -0.5),
            g: DVector::from_element(1, 3.0),
            ..DualPoint::zeros(&p)
        };
        let proj = obj.project(&y).unwrap();
        assert_eq!(proj.mu[0], 0.0);
        assert_eq!(proj.g[0], 1.0);
        assert_eq!(obj.project(&proj).unwrap(), proj);
    }

    #[test]
    fn projected_gradient_rejects_infeasible_points() {
        let p = d2();
        let obj = DualObjective::new(&p).unwrap();
        let y = DualPoint {
            mu: DVector::from_element(1, -1.0),
            ..DualPoint::zeros(&p)
        };
        assert!(obj.projected_gradient(&y).is_err());
    }

    #[test]
    fn projected_gradient_nonzero_at_suboptimal_point() {
        // At the all-zero dual of the active instance: ∇d = (−2.5, −3),
        // step lands at (2.5, 3), projects to (2.5, 1), so ∇† = (−2.5, −1).
        let p = d2();
        let obj = DualObjective::new(&p).unwrap();
        let y = DualPoint::zeros(&p);
        let pg = obj.projected_gradient(&y).unwrap();
        assert!((pg.mu[0] - (-2.5)).abs() < 1e-14);
        assert!((pg.g[0] - (-1.0)).abs() < 1e-14);
    }

    #[test]
    fn projected_gradient_zero_at_hand_optimum() {
        let p = d2();
        let obj = DualObjective::new(&p).unwrap();
        let y = DualPoint {
            mu: DVector::from_element(1, 1.5),
            g: DVector::from_element(1, 1.0),
            ..DualPoint::zeros(&p)
        };
        assert!(obj.projected_gradient(&y).unwrap().stack().norm() < 1e-12);
        assert!(obj.gap(&y).unwrap() < 1e-10);
    }

    #[test]
    fn gap_constant_is_two_for_identity_curvature() {
        // T0 has Q = I and M = Sᵀ = I, so ρ̄ = ρ̲ = 1 and the certificate
        // constant (1 + ρ̄)/ρ̲ is forced to 2.
        let p = t0();
        let obj = DualObjective::new(&p).unwrap();
        assert!((obj.rho_bar() - 1.0).abs() < 1e-12);
        assert!((obj.rho_underbar() - 1.0).abs() < 1e-12);
        let y = DualPoint {
            g: DVector::from_vec(vec![1.0, 0.0]),
            ..DualPoint::zeros(&p)
        };
        let pg_norm = obj.projected_gradient(&y).unwrap().stack().norm();
        let gap = obj.gap(&y).unwrap();
        assert!((gap - 2.0 * pg_norm).abs() < 1e-12);
        // The bound is honest here: y* = 0, so ‖y − y*‖ = 1 ≤ gap = 2.
        assert!(gap >= 1.0);
    }

    #[test]
    fn gap_is_infinite_without_usable_curvature() {
        // A single screenable row of norm 1e-6 gives a dual Hessian below the
        // null tolerance everywhere: the certificate must disable itself.
        let p = RegularizedProgram::new(
            DMatrix::identity(1, 1),
            DVector::from_element(1, -1.0),
            ConstraintBlock::new(
                DMatrix::from_element(1, 1, 1e-6),
                DVector::from_element(1, 10.0),
            )
            .unwrap(),
            ConstraintBlock::empty(1),
            ConstraintBlock::empty(1),
            vec![],
            0.0,
            0.5,
            0.1,
        )
        .unwrap();
        let obj = DualObjective::new(&p).unwrap();
        let y = DualPoint::zeros(&p);
        assert_eq!(obj.gap(&y).unwrap(), f64::INFINITY);
    }

    #[test]
    fn gap_is_zero_when_the_dual_has_no_free_coordinates() {
        // λ = 0 with no constraints: the dual feasible set is {0}.
        let p = t0().with_lambda(0.0);
        let obj = DualObjective::new(&p).unwrap();
        let y = DualPoint::zeros(&p);
        assert_eq!(obj.gap(&y).unwrap(), 0.0);
    }

    #[test]
    fn gap_bounds_distance_on_random_instances() {
        for seed in 0..40 {
            let p = random_instance(seed);
            let obj = DualObjective::new(&p).unwrap();
            let (y_star, resid) = obj.solve_exact(None, 1e-11, 200_000).unwrap();
            assert!(resid <= 1e-11);
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
            for _ in 0..5 {
                let y = random_point(&obj, &mut rng);
                let gap = obj.gap(&y).unwrap();
                let dist = y.distance(&y_star);
                assert!(
                    dist <= gap + 1e-8,
                    "seed {seed}: distance {dist} exceeds certificate {gap}"
                );
            }
        }
    }

    #[test]
    fn gap_at_the_clamped_adversarial_point_is_frozen() {
        // D2 at (μ, g) = (0, 1): the witness is θ̂ = 2, the projected
        // gradient is (−1.5, 0), and the curvature moduli are ρ̄ = 2 and
        // ρ̲ = 2 (the restricted spectrum of the rank-one dual Hessian), so
        // gap = (3/2)·1.5 = 2.25.
        let p = d2();
        let obj = DualObjective::new(&p).unwrap();
        let y = DualPoint {
            g: DVector::from_element(1, 1.0),
            ..DualPoint::zeros(&p)
        };
        let pg = obj.projected_gradient(&y).unwrap();
        assert!((pg.mu[0] - (-1.5)).abs() < 1e-14);
        assert!(pg.g[0].abs() < 1e-14);
        assert!((obj.gap(&y).unwrap() - 2.25).abs() < 1e-12);
    }

    #[test]
    fn refine_returns_its_best_point_when_capped() {
        let p = d2();
        let obj = DualObjective::new(&p).unwrap();
        // One iteration cannot reach 1e-12, but refine still hands back the
        // improved point instead of an error.
        let (y, residual) = obj.refine(None, 1e-12, 1).unwrap();
        assert!(residual > 1e-12);
        assert!(obj.is_feasible(&y));
        assert!(matches!(
            obj.solve_exact(None, 1e-12, 1),
            Err(Error::IterationCap { .. })
        ));
    }

    #[test]
    fn reduced_solve_full_dimension_matches_normal_equations_on_d2() {
        // Keeping everything on the active instance: the dual Hessian is the
        // singular [[1,1],[1,1]], so the minimum-norm path engages. The
        // stacked linear term is w = (−2.5, −3); projecting onto the range
        // direction (1,1)/√2 gives the critical point (1.375, 1.375).
        let p = d2();
        let obj = DualObjective::new(&p).unwrap();
        let (y, ls_flag) = obj.solve_full_unconstrained().unwrap();
        assert!(ls_flag);
        assert!((y.mu[0] - 1.375).abs() < 1e-10);
        assert!((y.g[0] - 1.375).abs() < 1e-10);
    }

    #[test]
    fn reduced_solve_with_pins_recovers_active_face_on_d2() {
        // Pin g = +1 (its saturated value) and keep μ: minimizing over μ alone
        // gives exactly the hand optimum μ = 1.5 without any projection.
        let p = d2();
        let obj = DualObjective::new(&p).unwrap();
        let (y, ls_flag) = obj.solve_reduced_unconstrained(&[0], &[(0, 1.0)]).unwrap();
        assert!(!ls_flag);
        assert!((y.mu[0] - 1.5).abs() < 1e-12);
        assert_eq!(y.g[0], 1.0);
    }

    #[test]
    fn reduced_solve_pins_screened_multipliers_to_zero() {
        let p = d2();
        let obj = DualObjective::new(&p).unwrap();
        let (y, _) = obj.solve_reduced_unconstrained(&[], &[(0, 1.0)]).unwrap();
        assert_eq!(y.mu[0], 0.0);
        assert_eq!(y.g[0], 1.0);
    }

    #[test]
    fn solve_exact_reaches_hand_duals() {
        let p = d1();
        let obj = DualObjective::new(&p).unwrap();
        let (y, _) = obj.solve_exact(None, 1e-10, 200_000).unwrap();
        assert!(y.mu[0].abs() < 1e-8, "inactive bound keeps μ* = 0");
        assert!((y.g[0] - 1.0).abs() < 1e-8, "g* = λ·sign(θ*) = 1");

        let p = d2();
        let obj = DualObjective::new(&p).unwrap();
        let (y, _) = obj.solve_exact(None, 1e-10, 200_000).unwrap();
        assert!((y.mu[0] - 1.5).abs() < 1e-8);
        assert!((y.g[0] - 1.0).abs() < 1e-8);

        let p = t0();
        let obj = DualObjective::new(&p).unwrap();
        let (y, _) = obj.solve_exact(None, 1e-12, 10_000).unwrap();
        assert!(y.stack().norm() < 1e-10);
    }

    #[test]
    fn weak_duality_holds_at_feasible_pairs() {
        // p(θ) + d(y) ≥ 0 for θ feasible in the tightened problem, y ∈ 𝒴.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..20 {
            let p = random_instance(seed);
            let obj = DualObjective::new(&p).unwrap();
            let tightened = p.tighten();
            for _ in 0..5 {
                let y = random_point(&obj, &mut rng);
                // Rejection-sample a feasible primal point near the origin.
                let theta = DVector::from_fn(p.n(), |_, _| rng.gen_range(-0.5..0.5));
                let feasible = tightened
                    .screenable()
                    .residual(&theta)
                    .iter()
                    .all(|&r| r <= 0.0);
                if !feasible {
                    continue;
                }
                let sum = p.objective(&theta) + obj.value(&y).unwrap();
                assert!(sum >= -1e-8, "weak duality violated: {sum}");
            }
        }
    }
}
