//! Classifiers that propose dual activity patterns, and the tooling to
//! train and evaluate them.
//!
//! Three interchangeable kinds implement [`ClassifyDual`]:
//!
//! * `all_active` — marks every multiplier active and every subgradient
//!   saturated. The restricted dual solve then keeps everything, nothing is
//!   screened through the class conjunct, and the pipeline degrades to a
//!   certified full solve. Useful as a no-prediction baseline.
//! * `distance_heuristic` — a scene-aware rule of thumb: an agent mode whose
//!   predicted positions stay beyond a distance threshold over the whole
//!   horizon is marked inactive/unsaturated for all of its rows.
//! * `logistic` — one weighted logistic regression per activity bit over the
//!   scene feature vector, trained deterministically by full-batch gradient
//!   descent with class weights to favor recall.
//!
//! Labels come from an exact dual of the ζ-tightened problem: a multiplier
//! counts as active when it clears 1e-6, a subgradient as saturated when it
//! sits within 1e-6 of ±λ. A wrong prediction never endangers safety —
//! screening double-checks every class against the certificate — so the
//! classifier is tuned for keep-rate, not for worst-case correctness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::{DualObjective, DualPoint};
use crate::problem::RegularizedProgram;
use crate::screening::{ClassifyDual, DualClass};
use crate::solver;
use crate::Error;

/// Multiplier magnitude above which a screenable row is labeled active.
pub const ACTIVE_LABEL_TOL: f64 = 1e-6;
/// Distance from ±λ below which a subgradient is labeled saturated.
pub const SATURATED_LABEL_TOL: f64 = 1e-6;

/// One labeled example: the scene feature vector and the true activity bits.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingSample {
    pub feature: Vec<f64>,
    pub mu_label: Vec<bool>,
    pub g_label: Vec<bool>,
}

/// A serializable classifier.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorModel {
    AllActive {
        mu_bits: usize,
        g_bits: usize,
        zeta: f64,
    },
    DistanceHeuristic {
        agents: usize,
        modes: usize,
        horizon: usize,
        /// Minimum predicted distance (over the horizon) beyond which an
        /// agent mode is considered irrelevant.
        threshold: f64,
        zeta: f64,
    },
    Logistic(LogisticModel),
}

/// Per-bit logistic regression. `weights` is row-major with one row per bit
/// (μ rows first, then g rows), bias last in each row.
///
/// Each bit is scored over an engineered basis rather than the raw feature:
///
/// * `pair_norms` appends the Euclidean norm of every consecutive coordinate
///   pair. Activity regions of position-like features are radial (close in
///   *any* direction), which no half-plane over raw coordinates can express.
/// * `pairs_per_group` > 0 treats each run of that many consecutive pairs as
///   one track and appends the minimum pair norm per track. Whether a given
///   step binds depends on how close the whole track ever gets, and on the
///   step's own distance relative to that closest approach — both linear in
///   the own-norm and track-minimum columns together.
///
/// The stored feature layout itself stays unchanged; only the model's
/// internal basis grows.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogisticModel {
    pub input_dim: usize,
    pub mu_bits: usize,
    pub g_bits: usize,
    pub tau: f64,
    pub zeta: f64,
    /// Append consecutive-pair norms to the basis before the linear layer.
    #[serde(default)]
    pub pair_norms: bool,
    /// Append per-track minimum pair norms (0 disables).
    #[serde(default)]
    pub pairs_per_group: usize,
    pub weights: Vec<f64>,
}

impl LogisticModel {
    /// Linear basis length: raw feature plus optional engineered columns.
    fn basis_dim(&self) -> usize {
        expanded_dim(self.input_dim, self.pair_norms, self.pairs_per_group)
    }

    fn row(&self, bit: usize) -> &[f64] {
        let width = self.basis_dim() + 1;
        &self.weights[bit * width..(bit + 1) * width]
    }

    /// Scores one bit over an already-expanded basis vector.
    fn score_expanded(&self, bit: usize, expanded: &[f64]) -> f64 {
        let row = self.row(bit);
        let mut t = row[self.basis_dim()];
        for (w, x) in row[..self.basis_dim()].iter().zip(expanded) {
            t += w * x;
        }
        sigmoid(t)
    }
}

fn expanded_dim(input_dim: usize, pair_norms: bool, pairs_per_group: usize) -> usize {
    let npairs = input_dim / 2;
    let mut dim = input_dim;
    if pair_norms {
        dim += npairs;
    }
    if pairs_per_group > 0 {
        dim += npairs / pairs_per_group;
    }
    dim
}

/// The engineered basis a logistic model scores: the raw feature, optionally
/// followed by consecutive-pair norms and per-track minimum norms.
fn expand_feature(raw: &[f64], pair_norms: bool, pairs_per_group: usize) -> Vec<f64> {
    let npairs = raw.len() / 2;
    let norms: Vec<f64> = (0..npairs)
        .map(|p| raw[2 * p].hypot(raw[2 * p + 1]))
        .collect();
    let mut out = raw.to_vec();
    if pair_norms {
        out.extend_from_slice(&norms);
    }
    if pairs_per_group > 0 {
        for track in norms.chunks_exact(pairs_per_group) {
            out.push(track.iter().copied().fold(f64::INFINITY, f64::min));
        }
    }
    out
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t.clamp(-40.0, 40.0)).exp())
}

impl PredictorModel {
    pub fn zeta(&self) -> f64 {
        match self {
            PredictorModel::AllActive { zeta, .. } => *zeta,
            PredictorModel::DistanceHeuristic { zeta, .. } => *zeta,
            PredictorModel::Logistic(model) => model.zeta,
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<Self, Error> {
        serde_json::from_str(text).map_err(Error::from_json)
    }

    fn warn_on_margin_mismatch(&self, program: &RegularizedProgram) {
        let zeta = self.zeta();
        if (zeta - program.zeta()).abs() > 1e-12 {
            log::warn!(
                "classifier was built for tightening margin {zeta} but the program uses {}; \
                 predictions may be stale (safety is unaffected)",
                program.zeta()
            );
        }
    }
}

impl ClassifyDual for PredictorModel {
    fn classify(&self, program: &RegularizedProgram) -> Result<DualClass, Error> {
        self.warn_on_margin_mismatch(program);
        let c_rows = program.n_screenable();
        let q_rows = program.n_regularized();
        match self {
            PredictorModel::AllActive { mu_bits, g_bits, .. } => {
                if *mu_bits != c_rows || *g_bits != q_rows {
                    return Err(Error::LayoutMismatch(format!(
                        "model emits {mu_bits}+{g_bits} bits, program expects {c_rows}+{q_rows}"
                    )));
                }
                Ok(DualClass::all_active(c_rows, q_rows))
            }
            PredictorModel::DistanceHeuristic {
                agents,
                modes,
                horizon,
                threshold,
                ..
            } => {
                let bits = agents * modes * horizon;
                if bits != c_rows || bits != q_rows {
                    return Err(Error::LayoutMismatch(format!(
                        "heuristic expects {bits} rows per block, program has {c_rows}+{q_rows}"
                    )));
                }
                let feature = program.feature().ok_or_else(|| {
                    Error::LayoutMismatch(
                        "distance heuristic needs a scene feature vector".to_string(),
                    )
                })?;
                if feature.len() != bits * 2 {
                    return Err(Error::LayoutMismatch(format!(
                        "feature vector has length {}, expected {}",
                        feature.len(),
                        bits * 2
                    )));
                }
                let mut class = DualClass::all_active(c_rows, q_rows);
                for v in 0..*agents {
                    for m in 0..*modes {
                        let base = (v * modes + m) * horizon;
                        let mut min_dist = f64::INFINITY;
                        for k in 0..*horizon {
                            let dx = feature[(base + k) * 2];
                            let dy = feature[(base + k) * 2 + 1];
                            min_dist = min_dist.min(dx.hypot(dy));
                        }
                        if min_dist > *threshold {
                            for k in 0..*horizon {
                                class.mu_active[base + k] = false;
                                class.g_saturated[base + k] = false;
                            }
                        }
                    }
                }
                Ok(class)
            }
            PredictorModel::Logistic(model) => {
                if model.mu_bits != c_rows || model.g_bits != q_rows {
                    return Err(Error::LayoutMismatch(format!(
                        "model emits {}+{} bits, program expects {c_rows}+{q_rows}",
                        model.mu_bits, model.g_bits
                    )));
                }
                let feature = program.feature().ok_or_else(|| {
                    Error::LayoutMismatch("logistic model needs a feature vector".to_string())
                })?;
                if feature.len() != model.input_dim {
                    return Err(Error::LayoutMismatch(format!(
                        "feature vector has length {}, model expects {}",
                        feature.len(),
                        model.input_dim
                    )));
                }
                let x = feature.as_slice();
                Ok(DualClass {
                    mu_active: (0..model.mu_bits)
                        .map(|b| model.score(b, x) >= model.tau)
                        .collect(),
                    g_saturated: (0..model.g_bits)
                        .map(|b| model.score(model.mu_bits + b, x) >= model.tau)
                        .collect(),
                })
            }
        }
    }
}

/// Activity labels read off an (exact) dual point of the tightened problem.
pub fn labels_from_dual(dual: &DualPoint, lambda: f64) -> (Vec<bool>, Vec<bool>) {
    let mu = dual.mu.iter().map(|&m| m > ACTIVE_LABEL_TOL).collect();
    let g = dual
        .g
        .iter()
        .map(|&g| g.abs() >= lambda - SATURATED_LABEL_TOL)
        .collect();
    (mu, g)
}

/// Exact dual of the tightened program: the interior-point multipliers seed
/// a projected-gradient refinement down to a tight first-order residual.
pub fn exact_dual(program: &RegularizedProgram) -> Result<DualPoint, Error> {
    let solution = solver::solve(program, None)?;
    let objective = DualObjective::new(program)?;
    let init = solution.dual;
    match objective.solve_exact(init.as_ref(), 1e-9, 50_000) {
        Ok((y, _)) => Ok(y),
        Err(Error::IterationCap { .. }) => {
            // Keep the best point available; labels tolerate 1e-6 slack.
            let (y, _) = objective.solve_exact(init.as_ref(), 1e-6, 50_000)?;
            Ok(y)
        }
        Err(other) => Err(other),
    }
}

/// Solves each program exactly and pairs its feature vector with the labels.
/// Every program must carry a feature vector.
pub fn collect<F>(
    programs: &[RegularizedProgram],
    dual_solver: F,
) -> Result<Vec<TrainingSample>, Error>
where
    F: Fn(&RegularizedProgram) -> Result<DualPoint, Error> + Sync,
{
    programs
        .par_iter()
        .map(|program| {
            let feature = program
                .feature()
                .ok_or_else(|| {
                    Error::LayoutMismatch(
                        "cannot collect a sample from a program without a feature vector"
                            .to_string(),
                    )
                })?
                .iter()
                .copied()
                .collect::<Vec<f64>>();
            let dual = dual_solver(program)?;
            let (mu_label, g_label) = labels_from_dual(&dual, program.lambda());
            Ok(TrainingSample {
                feature,
                mu_label,
                g_label,
            })
        })
        .collect()
}

/// Training hyperparameters. Positive examples (active/saturated bits) are
/// up-weighted so the trained classifier errs toward keeping constraints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub positive_weight: f64,
    pub negative_weight: f64,
    /// Fraction of samples held out for evaluation.
    pub eval_fraction: f64,
    pub seed: u64,
    /// Decision threshold stored in the model.
    pub tau: f64,
    /// Tightening margin the labels were generated under.
    pub zeta: f64,
    /// Extend the basis with consecutive-pair norms (see [`LogisticModel`]).
    #[serde(default = "default_pair_norms")]
    pub pair_norms: bool,
}

fn default_pair_norms() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.5,
            positive_weight: 10.0,
            negative_weight: 1.0,
            eval_fraction: 0.15,
            seed: 0,
            tau: 0.5,
            zeta: 0.5,
            pair_norms: true,
        }
    }
}

/// Joint confusion counts over all activity bits of an evaluation set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
}

/// Evaluation report of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_count: usize,
    pub eval_count: usize,
    pub eval: Metrics,
}

/// Scores a model's bit predictions against labeled samples.
pub fn evaluate(model: &PredictorModel, samples: &[TrainingSample]) -> Result<Metrics, Error> {
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for sample in samples {
        let class = classify_sample(model, sample)?;
        for (&predicted, &truth) in class
            .mu_active
            .iter()
            .chain(class.g_saturated.iter())
            .zip(sample.mu_label.iter().chain(sample.g_label.iter()))
        {
            match (predicted, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    Ok(Metrics {
        samples: samples.len(),
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fn_,
        recall: ratio(tp, tp + fn_),
        precision: ratio(tp, tp + fp),
        accuracy: ratio(tp + tn, tp + fp + tn + fn_),
    })
}

/// Bit predictions straight from a feature vector (no program needed).
pub fn classify_feature(model: &PredictorModel, feature: &[f64]) -> Result<DualClass, Error> {
    match model {
        PredictorModel::Logistic(m) => {
            if feature.len() != m.input_dim {
                return Err(Error::LayoutMismatch(format!(
                    "feature length {} does not match model input {}",
                    feature.len(),
                    m.input_dim
                )));
            }
            Ok(DualClass {
                mu_active: (0..m.mu_bits)
                    .map(|b| m.score(b, feature) >= m.tau)
                    .collect(),
                g_saturated: (0..m.g_bits)
                    .map(|b| m.score(m.mu_bits + b, feature) >= m.tau)
                    .collect(),
            })
        }
        PredictorModel::AllActive { mu_bits, g_bits, .. } => {
            Ok(DualClass::all_active(*mu_bits, *g_bits))
        }
        PredictorModel::DistanceHeuristic {
            agents,
            modes,
            horizon,
            threshold,
            ..
        } => {
            let bits = agents * modes * horizon;
            if feature.len() != bits * 2 {
                return Err(Error::LayoutMismatch(format!(
                    "feature length {} does not match scene layout {}",
                    feature.len(),
                    bits * 2
                )));
            }
            let mut class = DualClass::all_active(bits, bits);
            for v in 0..*agents {
                for m in 0..*modes {
                    let base = (v * modes + m) * horizon;
                    let mut min_dist = f64::INFINITY;
                    for k in 0..*horizon {
                        let dx = feature[(base + k) * 2];
                        let dy = feature[(base + k) * 2 + 1];
                        min_dist = min_dist.min(dx.hypot(dy));
                    }
                    if min_dist > *threshold {
                        for k in 0..*horizon {
                            class.mu_active[base + k] = false;
                            class.g_saturated[base + k] = false;
                        }
                    }
                }
            }
            Ok(class)
        }
    }
}

/// [`classify_feature`] with the sample's label lengths validated first.
fn classify_sample(model: &PredictorModel, sample: &TrainingSample) -> Result<DualClass, Error> {
    let (mu_bits, g_bits) = match model {
        PredictorModel::Logistic(m) => (m.mu_bits, m.g_bits),
        PredictorModel::AllActive { mu_bits, g_bits, .. } => (*mu_bits, *g_bits),
        PredictorModel::DistanceHeuristic {
            agents,
            modes,
            horizon,
            ..
        } => (agents * modes * horizon, agents * modes * horizon),
    };
    if sample.mu_label.len() != mu_bits || sample.g_label.len() != g_bits {
        return Err(Error::LayoutMismatch(format!(
            "sample labels ({}, {}) do not match model bits ({}, {})",
            sample.mu_label.len(),
            sample.g_label.len(),
            mu_bits,
            g_bits
        )));
    }
    classify_feature(model, &sample.feature)
}

/// Trains one weighted logistic regression per activity bit by deterministic
/// full-batch gradient descent on standardized features (the normalization is
/// folded into the stored weights afterwards). Returns the model and its
/// metrics on the held-out fraction.
pub fn train(
    samples: &[TrainingSample],
    config: &TrainConfig,
) -> Result<(PredictorModel, TrainReport), Error> {
    if samples.is_empty() {
        return Err(Error::Dimension("cannot train on zero samples".to_string()));
    }
    let input_dim = samples[0].feature.len();
    let mu_bits = samples[0].mu_label.len();
    let g_bits = samples[0].g_label.len();
    for (i, s) in samples.iter().enumerate() {
        if s.feature.len() != input_dim || s.mu_label.len() != mu_bits || s.g_label.len() != g_bits
        {
            return Err(Error::Dimension(format!(
                "sample {i} has inconsistent dimensions"
            )));
        }
    }

    // Deterministic split.
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    order.shuffle(&mut rng);
    let eval_count = ((samples.len() as f64) * config.eval_fraction).round() as usize;
    let eval_count = eval_count.min(samples.len().saturating_sub(1));
    let (eval_idx, train_idx) = order.split_at(eval_count);
    let train_set: Vec<&TrainingSample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let eval_set: Vec<TrainingSample> = eval_idx.iter().map(|&i| samples[i].clone()).collect();

    // Expand to the scoring basis, then standardize over the training split.
    let expanded: Vec<Vec<f64>> = train_set
        .iter()
        .map(|s| expand_feature(&s.feature, config.pair_norms))
        .collect();
    let basis_dim = expanded[0].len();
    let n_train = train_set.len();
    let mut mean = vec![0.0; basis_dim];
    for x in &expanded {
        for (m, &v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n_train as f64;
    }
    let mut std = vec![0.0; basis_dim];
    for x in &expanded {
        for (v, (&xv, &m)) in std.iter_mut().zip(x.iter().zip(&mean)) {
            *v += (xv - m) * (xv - m);
        }
    }
    for v in &mut std {
        *v = (*v / n_train as f64).sqrt().max(1e-9);
    }
    let standardized: Vec<Vec<f64>> = expanded
        .iter()
        .map(|x| {
            x.iter()
                .zip(mean.iter().zip(&std))
                .map(|(&xv, (&m, &sd))| (xv - m) / sd)
                .collect()
        })
        .collect();

    let bit_label = |s: &TrainingSample, bit: usize| -> bool {
        if bit < mu_bits {
            s.mu_label[bit]
        } else {
            s.g_label[bit - mu_bits]
        }
    };

    let total_bits = mu_bits + g_bits;
    let width = basis_dim + 1;
    // One independent weighted logistic fit per bit, in parallel.
    let rows: Vec<Vec<f64>> = (0..total_bits)
        .into_par_iter()
        .map(|bit| {
            let labels: Vec<f64> = train_set
                .iter()
                .map(|s| if bit_label(s, bit) { 1.0 } else { 0.0 })
                .collect();
            let weights_per: Vec<f64> = labels
                .iter()
                .map(|&y| {
                    if y > 0.5 {
                        config.positive_weight
                    } else {
                        config.negative_weight
                    }
                })
                .collect();
            let weight_sum: f64 = weights_per.iter().sum();
            let mut w = vec![0.0; width];
            for _ in 0..config.epochs {
                let mut grad = vec![0.0; width];
                for (i, x) in standardized.iter().enumerate() {
                    let mut t = w[basis_dim];
                    for (wj, xj) in w[..basis_dim].iter().zip(x) {
                        t += wj * xj;
                    }
                    let err = weights_per[i] * (sigmoid(t) - labels[i]);
                    for (gj, xj) in grad[..basis_dim].iter_mut().zip(x) {
                        *gj += err * xj;
                    }
                    grad[basis_dim] += err;
                }
                for (wj, gj) in w.iter_mut().zip(&grad) {
                    *wj -= config.learning_rate * gj / weight_sum;
                }
            }
            // Fold the standardization into the basis weights:
            // w·(x−m)/σ + b = (w/σ)·x + (b − Σ w_j m_j / σ_j).
            let mut folded = vec![0.0; width];
            let mut bias = w[basis_dim];
            for j in 0..basis_dim {
                folded[j] = w[j] / std[j];
                bias -= w[j] * mean[j] / std[j];
            }
            folded[basis_dim] = bias;
            folded
        })
        .collect();

    let mut weights = Vec::with_capacity(total_bits * width);
    for row in rows {
        weights.extend(row);
    }
    let model = PredictorModel::Logistic(LogisticModel {
        input_dim,
        mu_bits,
        g_bits,
        tau: config.tau,
        zeta: config.zeta,
        pair_norms: config.pair_norms,
        weights,
    });
    let eval = evaluate(&model, &eval_set)?;
    let report = TrainReport {
        train_count: train_set.len(),
        eval_count: eval_set.len(),
        eval,
    };
    Ok((model, report))
}

/// One sample per line, JSON-encoded.
pub fn samples_to_jsonl(samples: &[TrainingSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serialization cannot fail"));
        out.push('\n');
    }
    out
}

pub fn samples_from_jsonl(text: &str) -> Result<Vec<TrainingSample>, Error> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                line: idx + 1,
                column: e.column(),
                message: e.to_string(),
            })
        })
        .collect()
}
