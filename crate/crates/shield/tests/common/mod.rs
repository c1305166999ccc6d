//! Shared generators, oracles, and classifier stand-ins for the integration
//! suites. Everything here is deliberately independent of the production
//! solve path: instances are built around an explicit strictly feasible
//! point, and the brute-force optimum enumerates faces instead of calling
//! the interior-point backend.
#![allow(dead_code)]

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shield::dual::{DualObjective, DualPoint};
use shield::predictor;
use shield::problem::{ConstraintBlock, RegularizedProgram};
use shield::screening::{ClassifyDual, DualClass};
use shield::Error;

/// Size and shape knobs for the random instance family.
#[derive(Debug, Clone)]
pub struct GenOptions {
    pub max_n: usize,
    pub max_screenable: usize,
    pub max_immutable: usize,
    pub max_equality: usize,
    pub max_regularized: usize,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
}

impl GenOptions {
    /// Large instances for the screening-safety sweeps.
    pub fn stressed() -> Self {
        Self {
            max_n: 30,
            max_screenable: 100,
            max_immutable: 5,
            max_equality: 3,
            max_regularized: 30,
            lambda_lo: 0.2,
            lambda_hi: 2.0,
        }
    }

    /// Middle-of-the-road instances for dual-certificate checks.
    pub fn moderate() -> Self {
        Self {
            max_n: 20,
            max_screenable: 20,
            max_immutable: 4,
            max_equality: 2,
            max_regularized: 20,
            lambda_lo: 0.2,
            lambda_hi: 2.0,
        }
    }

    /// Small instances the brute-force face enumeration can afford: the
    /// enumeration cost is `2^(inequality rows) · 3^(regularized coords)`
    /// linear solves, so both counts stay small.
    pub fn tiny() -> Self {
        Self {
            max_n: 8,
            max_screenable: 3,
            max_immutable: 2,
            max_equality: 1,
            max_regularized: 3,
            lambda_lo: 0.2,
            lambda_hi: 1.5,
        }
    }
}

/// A generated program together with the strictly feasible point it was
/// built around (feasible for the tightened constraints with margin ≥ 0.1,
/// and exactly on any equality rows).
pub struct SlaterInstance {
    pub program: RegularizedProgram,
    pub slater: DVector<f64>,
}

/// Builds a random strongly convex instance around an explicit interior
/// point: `Q = BBᵀ + αI`, screenable rows satisfied by `θ₀` with slack
/// `ζ + margin`, immutable rows with slack `margin`, equality rows passing
/// through `θ₀` exactly. The screening tolerance is pinned to
/// `0.9 · ε_crit` so the constraint-removal test is both admissible and
/// active.
pub fn random_program(seed: u64, opts: &GenOptions) -> SlaterInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let n = rng.gen_range(2..=opts.max_n);
    let c_rows = rng.gen_range(1..=opts.max_screenable);
    let m_rows = rng.gen_range(0..=opts.max_immutable);
    let p_rows = rng.gen_range(0..=opts.max_equality.min(n.saturating_sub(1)));
    let q_rows = rng.gen_range(1..=opts.max_regularized.min(n));
    let lambda = rng.gen_range(opts.lambda_lo..opts.lambda_hi);
    assemble(&mut rng, n, c_rows, m_rows, p_rows, q_rows, lambda)
}

/// Like [`random_program`] but with the total multiplier count held at or
/// below the primal dimension, so the stacked dual map has full column rank
/// almost surely: the dual optimum is then unique and the certified radius
/// is an exact distance bound rather than a quotient bound.
pub fn random_full_rank_program(seed: u64, max_n: usize) -> SlaterInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x94d0_49bb_1331_11eb));
    let n = rng.gen_range(6..=max_n.max(6));
    let q_rows = rng.gen_range(1..=(n / 4).max(1));
    let p_rows = rng.gen_range(0..=1);
    let m_rows = rng.gen_range(0..=2);
    let budget = n - q_rows - p_rows - m_rows;
    let c_rows = rng.gen_range(1..=budget.max(1));
    let lambda = rng.gen_range(0.2..1.5);
    assemble(&mut rng, n, c_rows, m_rows, p_rows, q_rows, lambda)
}

fn assemble(
    rng: &mut ChaCha8Rng,
    n: usize,
    c_rows: usize,
    m_rows: usize,
    p_rows: usize,
    q_rows: usize,
    lambda: f64,
) -> SlaterInstance {
    let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let q = &b * b.transpose() + DMatrix::identity(n, n) * rng.gen_range(0.3..1.5);
    let c = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let theta0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let zeta = 0.5;

    let a_scr = DMatrix::from_fn(c_rows, n, |_, _| rng.gen_range(-1.0..1.0));
    let b_scr =
        &a_scr * &theta0 + DVector::from_fn(c_rows, |_, _| zeta + rng.gen_range(0.1..1.0));

    let a_imm = DMatrix::from_fn(m_rows, n, |_, _| rng.gen_range(-1.0..1.0));
    let b_imm = &a_imm * &theta0 + DVector::from_fn(m_rows, |_, _| rng.gen_range(0.1..1.0));

    let h_mat = DMatrix::from_fn(p_rows, n, |_, _| rng.gen_range(-1.0..1.0));
    let h_rhs = &h_mat * &theta0;

    let mut coords: Vec<usize> = (0..n).collect();
    coords.shuffle(rng);
    let mut s_rows: Vec<usize> = coords.into_iter().take(q_rows).collect();
    s_rows.sort_unstable();

    let program = RegularizedProgram::new(
        q,
        c,
        ConstraintBlock::new(a_scr, b_scr).unwrap(),
        ConstraintBlock::new(a_imm, b_imm).unwrap(),
        ConstraintBlock::new(h_mat, h_rhs).unwrap(),
        s_rows,
        lambda,
        zeta,
        0.01,
    )
    .unwrap();
    let epsilon = 0.9 * program.epsilon_crit();
    SlaterInstance {
        program: program.with_epsilon(epsilon),
        slater: theta0,
    }
}

/// Brute-force global optimum of the program **as stored** (no tightening):
/// enumerates every inequality active set and every sign pattern of the
/// regularized coordinates, solves the resulting equality-constrained
/// stationarity system by LU, and keeps candidates whose multipliers,
/// inactive rows, and signs all verify. For a strongly convex program every
/// surviving candidate is the global optimum. Returns `(θ*, objective)`.
///
/// Cost is `2^(rows) · 3^(regularized)` linear solves — only for tiny
/// instances.
pub fn enumerate_optimum(program: &RegularizedProgram) -> Option<(DVector<f64>, f64)> {
    const TOL: f64 = 1e-9;
    let n = program.n();
    let q = program.quadratic();
    let c = program.linear();
    let s_rows = program.s_rows();
    let n_reg = s_rows.len();
    let lambda = program.lambda();

    // Stack screenable and immutable rows into one inequality system.
    let scr = program.screenable();
    let imm = program.immutable();
    let r = scr.rows() + imm.rows();
    let mut a_in = DMatrix::zeros(r, n);
    let mut b_in = DVector::zeros(r);
    for i in 0..scr.rows() {
        a_in.row_mut(i).copy_from(&scr.matrix().row(i));
        b_in[i] = scr.rhs()[i];
    }
    for i in 0..imm.rows() {
        a_in.row_mut(scr.rows() + i).copy_from(&imm.matrix().row(i));
        b_in[scr.rows() + i] = imm.rhs()[i];
    }
    let eq = program.equality();
    let p_eq = eq.rows();

    let mut best: Option<(DVector<f64>, f64)> = None;
    let patterns = 3usize.pow(n_reg as u32);

    for active_mask in 0..(1usize << r) {
        let active: Vec<usize> = (0..r).filter(|i| active_mask >> i & 1 == 1).collect();
        for pattern in 0..patterns {
            // Digits of `pattern` base 3: 0 → coordinate pinned to zero,
            // 1 → positive branch, 2 → negative branch.
            let mut sigma = vec![0i8; n_reg];
            let mut t = pattern;
            for s in sigma.iter_mut() {
                *s = match t % 3 {
                    0 => 0,
                    1 => 1,
                    _ => -1,
                };
                t /= 3;
            }
            let zero_coords: Vec<usize> =
                (0..n_reg).filter(|&j| sigma[j] == 0).collect();

            // Unknowns: θ, multipliers of active rows, equality multipliers,
            // and the free subgradient values on pinned coordinates.
            let dim = n + active.len() + p_eq + zero_coords.len();
            let mut sys = DMatrix::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);

            // Stationarity: Qθ + Σ zᵢ aᵢ + Σ νₖ hₖ + Σ w_j e_{s_j}
            //             = −c − λ Σ_{σ_j≠0} σ_j e_{s_j}.
            sys.view_mut((0, 0), (n, n)).copy_from(q);
            for (slot, &i) in active.iter().enumerate() {
                let col = n + slot;
                for k in 0..n {
                    sys[(k, col)] = a_in[(i, k)];
                }
            }
            for eq_row in 0..p_eq {
                let col = n + active.len() + eq_row;
                for k in 0..n {
                    sys[(k, col)] = eq.matrix()[(eq_row, k)];
                }
            }
            for (slot, &j) in zero_coords.iter().enumerate() {
                let col = n + active.len() + p_eq + slot;
                sys[(s_rows[j], col)] = 1.0;
            }
            for k in 0..n {
                rhs[k] = -c[k];
            }
            for j in 0..n_reg {
                if sigma[j] != 0 {
                    rhs[s_rows[j]] -= lambda * sigma[j] as f64;
                }
            }

            // Active rows tight, equality rows exact, pinned coordinates zero.
            let mut row = n;
            for &i in &active {
                for k in 0..n {
                    sys[(row, k)] = a_in[(i, k)];
                }
                rhs[row] = b_in[i];
                row += 1;
            }
            for eq_row in 0..p_eq {
                for k in 0..n {
                    sys[(row, k)] = eq.matrix()[(eq_row, k)];
                }
                rhs[row] = eq.rhs()[eq_row];
                row += 1;
            }
            for &j in &zero_coords {
                sys[(row, s_rows[j])] = 1.0;
                row += 1;
            }

            let solution = match sys.clone().full_piv_lu().solve(&rhs) {
                Some(x) => x,
                None => continue,
            };
            // A rank-deficient face gives an inconsistent square system, and
            // LU only reports exact zero pivots — it can hand back garbage
            // that silently violates the equality/pin rows it was built
            // from. Re-checking the system itself rejects those candidates.
            let system_residual = (&sys * &solution - &rhs).amax();
            if !system_residual.is_finite() || system_residual > 1e-7 {
                continue;
            }
            let theta = DVector::from_iterator(n, (0..n).map(|k| solution[k]));

            // Multipliers of active rows must be nonnegative.
            if (0..active.len()).any(|slot| solution[n + slot] < -TOL) {
                continue;
            }
            // Free subgradient values must stay inside the λ-box.
            let w_base = n + active.len() + p_eq;
            if (0..zero_coords.len()).any(|slot| solution[w_base + slot].abs() > lambda + TOL)
            {
                continue;
            }
            // Inactive rows must still hold.
            let res = &a_in * &theta - &b_in;
            if (0..r).any(|i| !active.contains(&i) && res[i] > TOL) {
                continue;
            }
            // Nonzero branches must land on the declared side.
            if (0..n_reg).any(|j| {
                let v = theta[s_rows[j]];
                (sigma[j] == 1 && v < -TOL) || (sigma[j] == -1 && v > TOL)
            }) {
                continue;
            }

            let objective = program.objective(&theta);
            match &best {
                Some((_, obj)) if *obj <= objective => {}
                _ => best = Some((theta, objective)),
            }
        }
    }
    best
}

/// Uniform random point of the dual feasible box: nonnegative multipliers,
/// free equality block, ℓ∞-bounded regularizer block.
pub fn random_feasible_dual(obj: &DualObjective, rng: &mut ChaCha8Rng) -> DualPoint {
    let (c, m, p, q) = obj.dims();
    let lambda = obj.lambda();
    DualPoint {
        mu: DVector::from_fn(c, |_, _| rng.gen_range(0.0..1.5)),
        eta: DVector::from_fn(m, |_, _| rng.gen_range(0.0..1.5)),
        nu: DVector::from_fn(p, |_, _| rng.gen_range(-1.5..1.5)),
        g: if lambda > 0.0 {
            DVector::from_fn(q, |_, _| rng.gen_range(-lambda..lambda))
        } else {
            DVector::zeros(q)
        },
    }
}

/// Copy of the program with screenable row `row`'s offset loosened by
/// `delta` (the perturbed problem of the sensitivity argument).
pub fn relax_screenable_row(
    program: &RegularizedProgram,
    row: usize,
    delta: f64,
) -> RegularizedProgram {
    let mut rhs = program.screenable().rhs().clone();
    rhs[row] += delta;
    RegularizedProgram::new(
        program.quadratic().clone(),
        program.linear().clone(),
        ConstraintBlock::new(program.screenable().matrix().clone(), rhs).unwrap(),
        ConstraintBlock::new(
            program.immutable().matrix().clone(),
            program.immutable().rhs().clone(),
        )
        .unwrap(),
        ConstraintBlock::new(
            program.equality().matrix().clone(),
            program.equality().rhs().clone(),
        )
        .unwrap(),
        program.s_rows().to_vec(),
        program.lambda(),
        program.zeta(),
        program.epsilon(),
    )
    .unwrap()
}

/// Labels every multiplier from the exact tightened dual — the ground-truth
/// classifier the screening theory assumes.
pub struct OracleClassifier;

impl ClassifyDual for OracleClassifier {
    fn classify(&self, program: &RegularizedProgram) -> Result<DualClass, Error> {
        let dual = predictor::exact_dual(program)?;
        let (mu_active, g_saturated) = predictor::labels_from_dual(&dual, program.lambda());
        Ok(DualClass {
            mu_active,
            g_saturated,
        })
    }
}

/// Flips a fair coin for every label — the adversarial stand-in used to show
/// the certificate gate keeps screening safe no matter what the predictor
/// says.
pub struct RandomClassifier(Mutex<ChaCha8Rng>);

impl RandomClassifier {
    pub fn new(seed: u64) -> Self {
        Self(Mutex::new(ChaCha8Rng::seed_from_u64(seed)))
    }
}

impl ClassifyDual for RandomClassifier {
    fn classify(&self, program: &RegularizedProgram) -> Result<DualClass, Error> {
        let mut rng = self.0.lock().expect("rng lock");
        Ok(DualClass {
            mu_active: (0..program.n_screenable()).map(|_| rng.gen_bool(0.5)).collect(),
            g_saturated: (0..program.n_regularized()).map(|_| rng.gen_bool(0.5)).collect(),
        })
    }
}
