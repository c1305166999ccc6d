//! Problem definition for the SHIELD toolkit: an ℓ1-regularized strongly
//! convex quadratic program with three affine constraint blocks.
//!
//! The decision variable is θ ∈ ℝⁿ and the program is
//!
//! ```text
//!   minimize   ½ θᵀQθ + cᵀθ + λ‖Sθ‖₁
//!   subject to Ã θ ≤ b̃   (screenable rows — candidates for removal)
//!              Ā θ ≤ b̄   (immutable rows — never touched)
//!              H θ = h    (equality rows)
//! ```
//!
//! where S has unit rows, each selecting one regularized coordinate of θ.
//! A safety margin ζ > 0 tightens the screenable block (b̃ → b̃ − ζ·1) before
//! solving, so that solutions of a *reduced* program — with some screenable
//! rows deleted — still satisfy the original, untightened inequalities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::Error;

/// Current on-disk format identifier for programs, models and scenarios.
pub const FORMAT_VERSION: &str = "shield-v1";

/// A block of affine rows `A θ ≤ b` (or `A θ = b` for the equality block),
/// with the per-row Lipschitz constants `L_i = ‖A_i‖₂` cached.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintBlock {
    a: DMatrix<f64>,
    b: DVector<f64>,
    lipschitz: DVector<f64>,
}

impl ConstraintBlock {
    /// Builds a block, computing the row norms. The row count of `a` must
    /// match the length of `b`.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self, Error> {
        if a.nrows() != b.len() {
            return Err(Error::Dimension(format!(
                "constraint block has {} rows but {} right-hand sides",
                a.nrows(),
                b.len()
            )));
        }
        let lipschitz = DVector::from_iterator(a.nrows(), a.row_iter().map(|r| r.norm()));
        Ok(Self { a, b, lipschitz })
    }

    /// An empty block over `n` columns (zero rows).
    pub fn empty(n: usize) -> Self {
        Self {
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            lipschitz: DVector::zeros(0),
        }
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn cols(&self) -> usize {
        self.a.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.b
    }

    /// Per-row Lipschitz constants (Euclidean row norms), always derived
    /// from the matrix rather than user-supplied.
    pub fn lipschitz(&self) -> &DVector<f64> {
        &self.lipschitz
    }

    /// Residuals `A θ − b`; nonpositive entries mean satisfied inequality rows.
    pub fn residual(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.a * theta - &self.b
    }
}

/// Report produced by [`RegularizedProgram::validate`]: a list of
/// human-readable violations, empty when the program is well-formed.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// The ℓ1-regularized strongly convex QP with screenable/immutable/equality
/// constraint blocks and the screening parameters (λ, ζ, ε).
///
/// Extremal eigenvalues of the symmetrized quadratic term are computed once
/// at construction and cached (`sigma_min`, `sigma_max`).
#[derive(Debug, Clone)]
pub struct RegularizedProgram {
    q: DMatrix<f64>,
    c: DVector<f64>,
    screenable: ConstraintBlock,
    immutable: ConstraintBlock,
    equality: ConstraintBlock,
    s_rows: Vec<usize>,
    lambda: f64,
    zeta: f64,
    epsilon: f64,
    sigma_min: f64,
    sigma_max: f64,
    /// Optional scene feature vector carried alongside the program (used by
    /// learned dual-class predictors; ignored by the solver).
    feature: Option<DVector<f64>>,
}

impl RegularizedProgram {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        q: DMatrix<f64>,
        c: DVector<f64>,
        screenable: ConstraintBlock,
        immutable: ConstraintBlock,
        equality: ConstraintBlock,
        s_rows: Vec<usize>,
        lambda: f64,
        zeta: f64,
        epsilon: f64,
    ) -> Result<Self, Error> {
        let n = q.nrows();
        if q.ncols() != n {
            return Err(Error::Dimension(format!(
                "quadratic term is {}x{}, expected square",
                q.nrows(),
                q.ncols()
            )));
        }
        if c.len() != n {
            return Err(Error::Dimension(format!(
                "linear term has length {}, expected {}",
                c.len(),
                n
            )));
        }
        for (name, block) in [
            ("screenable", &screenable),
            ("immutable", &immutable),
            ("equality", &equality),
        ] {
            if block.cols() != n {
                return Err(Error::Dimension(format!(
                    "{name} block has {} columns, expected {}",
                    block.cols(),
                    n
                )));
            }
        }
        if let Some(&bad) = s_rows.iter().find(|&&j| j >= n) {
            return Err(Error::Dimension(format!(
                "regularizer selects coordinate {bad}, but the program has {n} variables"
            )));
        }
        // Cache extremal eigenvalues of the symmetrized quadratic term; for a
        // symmetric Q these are exactly its extremal eigenvalues.
        let sym = (&q + q.transpose()) * 0.5;
        let (sigma_min, sigma_max) = if n == 0 {
            (f64::INFINITY, f64::INFINITY)
        } else {
            let eig = sym.symmetric_eigen();
            (eig.eigenvalues.min(), eig.eigenvalues.max())
        };
        Ok(Self {
            q,
            c,
            screenable,
            immutable,
            equality,
            s_rows,
            lambda,
            zeta,
            epsilon,
            sigma_min,
            sigma_max,
            feature: None,
        })
    }

    /// Number of decision variables n.
    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    /// Number of screenable inequality rows.
    pub fn n_screenable(&self) -> usize {
        self.screenable.rows()
    }

    /// Number of immutable inequality rows.
    pub fn n_immutable(&self) -> usize {
        self.immutable.rows()
    }

    /// Number of equality rows.
    pub fn n_equality(&self) -> usize {
        self.equality.rows()
    }

    /// Number of regularized coordinates q (rows of S).
    pub fn n_regularized(&self) -> usize {
        self.s_rows.len()
    }

    pub fn quadratic(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn screenable(&self) -> &ConstraintBlock {
        &self.screenable
    }

    pub fn immutable(&self) -> &ConstraintBlock {
        &self.immutable
    }

    pub fn equality(&self) -> &ConstraintBlock {
        &self.equality
    }

    /// Coordinate selected by each unit row of S.
    pub fn s_rows(&self) -> &[usize] {
        &self.s_rows
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Smallest eigenvalue of the symmetrized quadratic term (cached).
    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    /// Largest eigenvalue of the symmetrized quadratic term (cached).
    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn feature(&self) -> Option<&DVector<f64>> {
        self.feature.as_ref()
    }

    pub fn set_feature(&mut self, feature: Option<DVector<f64>>) {
        self.feature = feature;
    }

    /// Copy with a different screening tolerance ε (cached spectra carried over).
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    /// Copy with a different regularization weight λ.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }

    /// Copy with a different tightening margin ζ.
    pub fn with_zeta(&self, zeta: f64) -> Self {
        Self {
            zeta,
            ..self.clone()
        }
    }

    /// `Sθ`: the regularized coordinates of θ in row order of S.
    pub fn s_apply(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.s_rows.len(), self.s_rows.iter().map(|&j| theta[j]))
    }

    /// `Sᵀv`: scatter a length-q vector back into θ-space.
    pub fn s_transpose_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        for (i, &j) in self.s_rows.iter().enumerate() {
            out[j] += v[i];
        }
        out
    }

    /// Objective value ½θᵀQθ + cᵀθ + λ‖Sθ‖₁.
    pub fn objective(&self, theta: &DVector<f64>) -> f64 {
        let quad = 0.5 * theta.dot(&(&self.q * theta));
        let lin = self.c.dot(theta);
        let reg: f64 = self.s_rows.iter().map(|&j| theta[j].abs()).sum();
        quad + lin + self.lambda * reg
    }

    /// Structural and numerical well-formedness checks. Returns the full list
    /// of violations rather than failing fast, so callers can report them all.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let n = self.n();
        let sym_err = (&self.q - self.q.transpose()).abs().max();
        if n > 0 && sym_err > 1e-10 * self.q.abs().max().max(1.0) {
            violations.push(format!(
                "quadratic term is not symmetric (max asymmetry {sym_err:.3e})"
            ));
        }
        if self.sigma_min <= 0.0 && n > 0 {
            violations.push(format!(
                "quadratic term is not positive definite (smallest eigenvalue {:.3e})",
                self.sigma_min
            ));
        }
        for (i, &l) in self.screenable.lipschitz().iter().enumerate() {
            if l == 0.0 {
                violations.push(format!("screenable row {i} has zero Lipschitz constant"));
            }
        }
        let mut seen = vec![false; n];
        for (r, &j) in self.s_rows.iter().enumerate() {
            if seen[j] {
                violations.push(format!(
                    "regularizer row {r} duplicates coordinate {j}; each row must select a distinct coordinate"
                ));
            }
            seen[j] = true;
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            violations.push(format!(
                "tightening margin must be positive and finite, got {}",
                self.zeta
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            violations.push(format!(
                "regularization weight must be nonnegative and finite, got {}",
                self.lambda
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            violations.push(format!(
                "screening tolerance must be positive and finite, got {}",
                self.epsilon
            ));
        }
        if let Some(f) = &self.feature {
            if f.iter().any(|x| !x.is_finite()) {
                violations.push("feature vector contains non-finite entries".to_string());
            }
        }
        let all_finite = self.q.iter().all(|x| x.is_finite())
            && self.c.iter().all(|x| x.is_finite())
            && [&self.screenable, &self.immutable, &self.equality]
                .iter()
                .all(|b| {
                    b.matrix().iter().all(|x| x.is_finite())
                        && b.rhs().iter().all(|x| x.is_finite())
                });
        if !all_finite {
            violations.push("program data contains non-finite entries".to_string());
        }
        ValidationReport { violations }
    }

    /// Critical screening tolerance: the largest ε for which removing a
    /// constraint with multiplier at most ε/ζ is guaranteed safe,
    ///
    /// ```text
    ///   ε_crit = (σ_min / 2) · min_i (ζ / L_i)²
    /// ```
    ///
    /// over the screenable rows. With no screenable rows there is nothing to
    /// screen and the bound is vacuous (+∞).
    pub fn epsilon_crit(&self) -> f64 {
        let ratio_sq = self
            .screenable
            .lipschitz()
            .iter()
            .filter(|&&l| l > 0.0)
            .map(|&l| (self.zeta / l).powi(2))
            .fold(f64::INFINITY, f64::min);
        0.5 * self.sigma_min * ratio_sq
    }

    /// Copy with the screenable right-hand side tightened by the margin:
    /// b̃ → b̃ − ζ·1. Immutable and equality blocks are untouched. Applying
    /// this twice composes additively in ζ.
    pub fn tighten(&self) -> Self {
        let mut out = self.clone();
        let shifted = out.screenable.b.map(|v| v - self.zeta);
        out.screenable.b = shifted;
        out
    }

    /// Serializes to the `shield-v1` structured-text document.
    pub fn to_json_string(&self) -> String {
        let doc = ProgramDoc::from(self);
        serde_json::to_string_pretty(&doc).expect("program serialization cannot fail")
    }

    /// Parses a `shield-v1` structured-text document.
    pub fn from_json_str(text: &str) -> Result<Self, Error> {
        let doc: ProgramDoc = serde_json::from_str(text).map_err(Error::from_json)?;
        doc.into_program()
    }
}

/// The (θ, s) epigraph lifting of a [`RegularizedProgram`]: the ℓ1 term is
/// replaced by λ·1ᵀs with the additional inequality rows
///
/// ```text
///   Sθ − s ≤ 0,   −Sθ − s ≤ 0,   −s ≤ 0,
/// ```
///
/// so a single inequality-constrained QP solver covers both the full and the
/// reduced problems. At any optimum, s_j = |[Sθ]_j|.
#[derive(Debug, Clone)]
pub struct EpigraphProgram<'a> {
    base: &'a RegularizedProgram,
    /// Extra tightening applied to the screenable right-hand side (the
    /// program's own ζ when solving the tightened problem, 0 otherwise).
    pub shift: f64,
}

impl<'a> EpigraphProgram<'a> {
    /// Lifting of the ζ-tightened program.
    pub fn tightened(base: &'a RegularizedProgram) -> Self {
        Self {
            base,
            shift: base.zeta(),
        }
    }

    /// Lifting of the program exactly as stored (no tightening).
    pub fn original(base: &'a RegularizedProgram) -> Self {
        Self { base, shift: 0.0 }
    }

    pub fn base(&self) -> &RegularizedProgram {
        self.base
    }

    /// Total variable count: n primal coordinates plus q epigraph bounds.
    pub fn n_vars(&self) -> usize {
        self.base.n() + self.base.n_regularized()
    }

    /// Inequality row count: screenable + immutable + the 3q epigraph rows.
    pub fn n_ineq(&self) -> usize {
        self.base.n_screenable() + self.base.n_immutable() + 3 * self.base.n_regularized()
    }

    /// Stacked inequality system G·(θ,s) ≤ r in block order
    /// [screenable (shifted); immutable; Sθ−s; −Sθ−s; −s].
    pub fn inequality_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let base = self.base;
        let n = base.n();
        let q = base.n_regularized();
        let rows = self.n_ineq();
        let mut g = DMatrix::zeros(rows, n + q);
        let mut r = DVector::zeros(rows);
        let mut at = 0;
        for (block, shift) in [(base.screenable(), self.shift), (base.immutable(), 0.0)] {
            for i in 0..block.rows() {
                for j in 0..n {
                    g[(at, j)] = block.matrix()[(i, j)];
                }
                r[at] = block.rhs()[i] - shift;
                at += 1;
            }
        }
        for (i, &j) in base.s_rows().iter().enumerate() {
            g[(at, j)] = 1.0;
            g[(at, n + i)] = -1.0;
            at += 1;
        }
        for (i, &j) in base.s_rows().iter().enumerate() {
            g[(at, j)] = -1.0;
            g[(at, n + i)] = -1.0;
            at += 1;
        }
        for i in 0..q {
            g[(at, n + i)] = -1.0;
            at += 1;
        }
        (g, r)
    }

    /// Equality system over (θ, s): the base equality block padded with
    /// zero columns for s.
    pub fn equality_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let base = self.base;
        let p = base.n_equality();
        let mut h = DMatrix::zeros(p, self.n_vars());
        for i in 0..p {
            for j in 0..base.n() {
                h[(i, j)] = base.equality().matrix()[(i, j)];
            }
        }
        (h, base.equality().rhs().clone())
    }

    /// Quadratic and linear cost over (θ, s): blkdiag(Q, 0) and (c, λ·1).
    pub fn cost(&self) -> (DMatrix<f64>, DVector<f64>) {
        let base = self.base;
        let n = base.n();
        let q = base.n_regularized();
        let mut p = DMatrix::zeros(n + q, n + q);
        p.view_mut((0, 0), (n, n)).copy_from(base.quadratic());
        let mut lin = DVector::zeros(n + q);
        lin.rows_mut(0, n).copy_from(base.linear());
        for i in 0..q {
            lin[n + i] = base.lambda();
        }
        (p, lin)
    }
}

// ---------------------------------------------------------------------------
// shield-v1 document schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct BlockDoc {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EqualityDoc {
    #[serde(rename = "H")]
    h_mat: Vec<Vec<f64>>,
    h: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ProgramDoc {
    version: String,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    c: Vec<f64>,
    screenable: BlockDoc,
    immutable: BlockDoc,
    equality: EqualityDoc,
    #[serde(rename = "S_rows")]
    s_rows: Vec<usize>,
    lambda: f64,
    zeta: f64,
    epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f64>>,
}

fn rows_to_matrix(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>, Error> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::Dimension(format!(
                "{what} row {i} has {} entries, expected {ncols}",
                r.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl From<&RegularizedProgram> for ProgramDoc {
    fn from(p: &RegularizedProgram) -> Self {
        ProgramDoc {
            version: FORMAT_VERSION.to_string(),
            q: matrix_to_rows(p.quadratic()),
            c: p.linear().iter().copied().collect(),
            screenable: BlockDoc {
                a: matrix_to_rows(p.screenable().matrix()),
                b: p.screenable().rhs().iter().copied().collect(),
            },
            immutable: BlockDoc {
                a: matrix_to_rows(p.immutable().matrix()),
                b: p.immutable().rhs().iter().copied().collect(),
            },
            equality: EqualityDoc {
                h_mat: matrix_to_rows(p.equality().matrix()),
                h: p.equality().rhs().iter().copied().collect(),
            },
            s_rows: p.s_rows().to_vec(),
            lambda: p.lambda(),
            zeta: p.zeta(),
            epsilon: p.epsilon(),
            feature: p.feature().map(|f| f.iter().copied().collect()),
        }
    }
}

impl ProgramDoc {
    fn into_program(self) -> Result<RegularizedProgram, Error> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Parse {
                line: 0,
                column: 0,
                message: format!(
                    "unsupported format version {:?}, expected {FORMAT_VERSION:?}",
                    self.version
                ),
            });
        }
        let n = self.c.len();
        let q = rows_to_matrix(&self.q, n, "Q")?;
        if q.nrows() != n {
            return Err(Error::Dimension(format!(
                "Q has {} rows, expected {n}",
                q.nrows()
            )));
        }
        let screenable = ConstraintBlock::new(
            rows_to_matrix(&self.screenable.a, n, "screenable")?,
            DVector::from_vec(self.screenable.b),
        )?;
        let immutable = ConstraintBlock::new(
            rows_to_matrix(&self.immutable.a, n, "immutable")?,
            DVector::from_vec(self.immutable.b),
        )?;
        let equality = ConstraintBlock::new(
            rows_to_matrix(&self.equality.h_mat, n, "equality")?,
            DVector::from_vec(self.equality.h),
        )?;
        let mut program = RegularizedProgram::new(
            DMatrix::from_fn(n, n, |i, j| q[(i, j)]),
            DVector::from_vec(self.c),
            screenable,
            immutable,
            equality,
            self.s_rows,
            self.lambda,
            self.zeta,
            self.epsilon,
        )?;
        program.set_feature(self.feature.map(DVector::from_vec));
        Ok(program)
    }
}
