//! Nuisance models: propensity `pi(a | w)` and outcome regression `Q(z, a)`,
//! plus the fold bookkeeping used for cross-fitting.
//!
//! The propensity learner is a baseline-category multinomial logistic
//! regression (last action is the baseline) fitted by damped Newton with a
//! small ridge penalty. The outcome learner is an arm-saturated linear model:
//! one least-squares fit of `Y` on `[1, Z]` per action.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::simulation::misspecify;
use crate::tilt::{ActionSpace, Simplex, TiltError};

pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const DEFAULT_FLOOR: f64 = 1e-4;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NuisanceError {
    #[error("empty arm: action {0:?} has no training observations")]
    EmptyArm(String),
    #[error("action {action:?} has {got} training observations, at least {needed} required")]
    SparseArm {
        action: String,
        needed: usize,
        got: usize,
    },
    #[error("dimension mismatch: expected {expected} covariates, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("cannot split {n} rows into {k} folds")]
    Folds { n: usize, k: usize },
    #[error(transparent)]
    Tilt(#[from] TiltError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub w: Vec<f64>,
    pub a: usize,
    pub y: f64,
}

/// Observations `(W, A, Y)` with the outcome-model adjustment subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: Vec<Observation>,
    actions: ActionSpace,
    adjust_idx: Vec<usize>,
    p: usize,
}

impl Dataset {
    /// `adjust_idx = None` adjusts for every covariate.
    pub fn new(rows: Vec<Observation>, actions: ActionSpace, adjust_idx: Option<Vec<usize>>) -> Result<Self, NuisanceError> {
        let p = rows
            .first()
            .ok_or_else(|| NuisanceError::InvalidData("dataset is empty".into()))?
            .w
            .len();
        for (i, r) in rows.iter().enumerate() {
            if r.w.len() != p {
                return Err(NuisanceError::InvalidData(format!(
                    "row {i} has {} covariates, expected {p}",
                    r.w.len()
                )));
            }
            if r.a >= actions.len() {
                return Err(NuisanceError::InvalidData(format!(
                    "row {i} has action index {} outside 0..{}",
                    r.a,
                    actions.len()
                )));
            }
            if !r.y.is_finite() || r.w.iter().any(|x| !x.is_finite()) {
                return Err(NuisanceError::InvalidData(format!("row {i} has non-finite values")));
            }
        }
        let adjust_idx = adjust_idx.unwrap_or_else(|| (0..p).collect());
        if let Some(j) = adjust_idx.iter().find(|j| **j >= p) {
            return Err(NuisanceError::InvalidData(format!("adjustment index {j} outside 0..{p}")));
        }
        Ok(Self {
            rows,
            actions,
            adjust_idx,
            p,
        })
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> &ActionSpace {
        &self.actions
    }

    pub fn adjust_idx(&self) -> &[usize] {
        &self.adjust_idx
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            actions: self.actions.clone(),
            adjust_idx: self.adjust_idx.clone(),
            p: self.p,
        }
    }

    pub fn arm_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k()];
        for r in &self.rows {
            c[r.a] += 1;
        }
        c
    }
}

/// Covariate map applied before a model sees `W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTransform {
    /// Raw covariates.
    #[default]
    Identity,
    /// The nonlinear distortion `X(W)` of the benchmark's misspecified
    /// regimes; requires four covariates.
    Distorted,
}

impl FeatureTransform {
    fn propensity_features(self, w: &[f64]) -> Vec<f64> {
        match self {
            FeatureTransform::Identity => w.to_vec(),
            FeatureTransform::Distorted => misspecify(w).to_vec(),
        }
    }

    fn outcome_features(self, w: &[f64], adjust_idx: &[usize]) -> Vec<f64> {
        match self {
            FeatureTransform::Identity => adjust_idx.iter().map(|&j| w[j]).collect(),
            FeatureTransform::Distorted => misspecify(w).to_vec(),
        }
    }

    fn check(self, p: usize) -> Result<(), NuisanceError> {
        if self == FeatureTransform::Distorted && p != 4 {
            return Err(NuisanceError::Dimension { expected: 4, got: p });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropensityOptions {
    pub transform: FeatureTransform,
    pub ridge: f64,
    pub floor: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PropensityOptions {
    fn default() -> Self {
        Self {
            transform: FeatureTransform::Identity,
            ridge: DEFAULT_RIDGE,
            floor: DEFAULT_FLOOR,
            max_iter: 500,
            tol: 1e-8,
        }
    }
}

/// Baseline-category multinomial logit. `coef[j]` holds `[intercept, slopes..]`
/// for action `j < K - 1`; the last action has linear predictor 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub k: usize,
    pub p: usize,
    pub coef: Vec<Vec<f64>>,
    pub transform: FeatureTransform,
    pub floor: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn softmax_baseline(coef: &[Vec<f64>], x: &[f64], out: &mut [f64]) {
    let k = coef.len() + 1;
    for (j, b) in coef.iter().enumerate() {
        out[j] = b[0] + b[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
    }
    out[k - 1] = 0.0;
    let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for o in out.iter_mut() {
        *o = (*o - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

impl PropensityModel {
    /// Unfloored model probabilities.
    pub fn raw_probabilities(&self, w: &[f64]) -> Result<Vec<f64>, NuisanceError> {
        if w.len() != self.p {
            return Err(NuisanceError::Dimension {
                expected: self.p,
                got: w.len(),
            });
        }
        let x = self.transform.propensity_features(w);
        let mut out = vec![0.0; self.k];
        softmax_baseline(&self.coef, &x, &mut out);
        Ok(out)
    }

    /// Probabilities floored at `floor`, then renormalized.
    pub fn predict(&self, w: &[f64]) -> Result<Simplex, NuisanceError> {
        let mut p = self.raw_probabilities(w)?;
        p.iter_mut().for_each(|x| *x = x.max(self.floor));
        Ok(Simplex::from_weights(p)?)
    }
}

pub fn predict_propensity(model: &PropensityModel, w: &[f64]) -> Result<Simplex, NuisanceError> {
    model.predict(w)
}

/// Fits the multinomial logit by maximizing the mean log-likelihood minus
/// `ridge / 2 * |beta|^2`.
///
/// Convergence requires both gradient sup-norm `<= tol` and a Newton step
/// below `1e-6`; separated data keeps taking unit steps and ends flagged as
/// not converged.
pub fn fit_propensity(train: &Dataset, opts: &PropensityOptions) -> Result<PropensityModel, NuisanceError> {
    opts.transform.check(train.p())?;
    for (a, c) in train.arm_counts().into_iter().enumerate() {
        if c == 0 {
            return Err(NuisanceError::EmptyArm(train.actions().labels()[a].clone()));
        }
    }
    let k = train.k();
    let xs: Vec<Vec<f64>> = train
        .rows()
        .iter()
        .map(|r| {
            let mut x = vec![1.0];
            x.extend(opts.transform.propensity_features(&r.w));
            x
        })
        .collect();
    let d = xs[0].len();
    let m = (k - 1) * d;
    let n = xs.len() as f64;
    let unpack = |beta: &DVector<f64>| -> Vec<Vec<f64>> {
        (0..k - 1).map(|j| beta.as_slice()[j * d..(j + 1) * d].to_vec()).collect()
    };

    let objective = |beta: &DVector<f64>| -> f64 {
        let coef = unpack(beta);
        let mut probs = vec![0.0; k];
        let mut nll = 0.0;
        for (x, r) in xs.iter().zip(train.rows()) {
            softmax_baseline(&coef, &x[1..], &mut probs);
            nll -= probs[r.a].max(f64::MIN_POSITIVE).ln();
        }
        nll / n + 0.5 * opts.ridge * beta.norm_squared()
    };

    let mut beta = DVector::<f64>::zeros(m);
    let mut value = objective(&beta);
    let mut converged = false;
    let mut last_step = f64::INFINITY;
    let mut iterations = 0;
    let mut probs = vec![0.0; k];
    while iterations < opts.max_iter {
        let coef = unpack(&beta);
        let mut grad = DVector::<f64>::zeros(m);
        let mut hess = DMatrix::<f64>::zeros(m, m);
        for (x, r) in xs.iter().zip(train.rows()) {
            softmax_baseline(&coef, &x[1..], &mut probs);
            for j in 0..k - 1 {
                let resid = probs[j] - if r.a == j { 1.0 } else { 0.0 };
                for u in 0..d {
                    grad[j * d + u] += resid * x[u];
                }
                for l in 0..k - 1 {
                    let w = probs[j] * (if j == l { 1.0 } else { 0.0 } - probs[l]);
                    for u in 0..d {
                        let wu = w * x[u];
                        for v in 0..d {
                            hess[(j * d + u, l * d + v)] += wu * x[v];
                        }
                    }
                }
            }
        }
        grad /= n;
        hess /= n;
        grad += &beta * opts.ridge;
        for i in 0..m {
            hess[(i, i)] += opts.ridge;
        }
        if grad.amax() <= opts.tol && last_step <= 1e-6 {
            converged = true;
            break;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => match hess.lu().solve(&grad) {
                Some(s) => s,
                None => break,
            },
        };
        if step.iter().any(|s| !s.is_finite()) {
            break;
        }
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta - &step * t;
            let v = objective(&cand);
            if v.is_finite() && v <= value - 1e-4 * t * slope.max(0.0) {
                beta = cand;
                value = v;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        last_step = (&step * t).amax();
        if !accepted {
            // no descent possible: either already optimal to machine precision or stuck
            converged = grad.amax() <= opts.tol;
            break;
        }
    }
    Ok(PropensityModel {
        k,
        p: train.p(),
        coef: unpack(&beta),
        transform: opts.transform,
        floor: opts.floor,
        converged,
        iterations,
    })
}

/// Arm-saturated linear regression: `coef[a] = [intercept, slopes over Z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub p: usize,
    pub coef: Vec<Vec<f64>>,
    pub transform: FeatureTransform,
    pub adjust_idx: Vec<usize>,
    pub rank_deficient: bool,
}

impl OutcomeModel {
    pub fn predict(&self, w: &[f64], a: usize) -> Result<f64, NuisanceError> {
        if w.len() != self.p {
            return Err(NuisanceError::Dimension {
                expected: self.p,
                got: w.len(),
            });
        }
        let z = self.transform.outcome_features(w, &self.adjust_idx);
        let b = &self.coef[a];
        Ok(b[0] + b[1..].iter().zip(&z).map(|(c, v)| c * v).sum::<f64>())
    }

    /// Predictions for every action at `w`.
    pub fn predict_all(&self, w: &[f64]) -> Result<Vec<f64>, NuisanceError> {
        (0..self.coef.len()).map(|a| self.predict(w, a)).collect()
    }
}

pub fn predict_outcome(model: &OutcomeModel, w: &[f64], a: usize) -> Result<f64, NuisanceError> {
    model.predict(w, a)
}

/// Per-action least squares via the normal equations; a near-singular Gram
/// matrix switches to the SVD pseudo-inverse and flags the model.
pub fn fit_outcome(train: &Dataset, transform: FeatureTransform) -> Result<OutcomeModel, NuisanceError> {
    transform.check(train.p())?;
    let k = train.k();
    let mut coef = Vec::with_capacity(k);
    let mut rank_deficient = false;
    for a in 0..k {
        let arm: Vec<&Observation> = train.rows().iter().filter(|r| r.a == a).collect();
        let feats: Vec<Vec<f64>> = arm
            .iter()
            .map(|r| transform.outcome_features(&r.w, train.adjust_idx()))
            .collect();
        let dim = feats.first().map_or_else(
            || transform.outcome_features(&train.rows()[0].w, train.adjust_idx()).len(),
            |f| f.len(),
        ) + 1;
        if arm.len() < dim + 1 {
            return Err(NuisanceError::SparseArm {
                action: train.actions().labels()[a].clone(),
                needed: dim + 1,
                got: arm.len(),
            });
        }
        let mut gram = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for (f, r) in feats.iter().zip(&arm) {
            let x: Vec<f64> = std::iter::once(1.0).chain(f.iter().copied()).collect();
            for u in 0..dim {
                rhs[u] += x[u] * r.y;
                for v in 0..dim {
                    gram[(u, v)] += x[u] * x[v];
                }
            }
        }
        let sv = gram.clone().singular_values();
        let ratio = sv.min() / sv.max();
        let solved = if ratio > 1e-12 {
            gram.clone().cholesky().map(|c| c.solve(&rhs))
        } else {
            None
        };
        let b = match solved {
            Some(b) => b,
            None => {
                rank_deficient = true;
                let pinv = gram
                    .pseudo_inverse(1e-12 * sv.max())
                    .map_err(|e| NuisanceError::InvalidData(e.to_string()))?;
                pinv * rhs
            }
        };
        coef.push(b.iter().copied().collect());
    }
    Ok(OutcomeModel {
        p: train.p(),
        coef,
        transform,
        adjust_idx: train.adjust_idx().to_vec(),
        rank_deficient,
    })
}

/// Fold label per row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldAssignment {
    folds: Vec<usize>,
    k: usize,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    pub fn fold_of(&self, row: usize) -> usize {
        self.folds[row]
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.folds {
            s[f] += 1;
        }
        s
    }
}

/// Random near-equal partition of `0..n` into `k_folds` folds.
pub fn assign_folds(n: usize, k_folds: usize, seed: u64) -> Result<FoldAssignment, NuisanceError> {
    if k_folds < 2 || n < k_folds {
        return Err(NuisanceError::Folds { n, k: k_folds });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &row) in perm.iter().enumerate() {
        folds[row] = pos % k_folds;
    }
    Ok(FoldAssignment { folds, k: k_folds })
}

/// Learner settings for one cross-fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisanceSpec {
    pub propensity: PropensityOptions,
    pub outcome_transform: FeatureTransform,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        Self {
            propensity: PropensityOptions::default(),
            outcome_transform: FeatureTransform::Identity,
        }
    }
}

/// Models fitted on the complement of `fold`.
#[derive(Debug, Clone)]
pub struct NuisancePair {
    pub fold: usize,
    pub propensity: PropensityModel,
    pub outcome: OutcomeModel,
    train_rows: Vec<usize>,
}

impl NuisancePair {
    pub fn train_rows(&self) -> &[usize] {
        &self.train_rows
    }
}

/// Nuisance values at one observation: `pi_hat(. | W_i)` and `Q_hat(Z_i, .)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowNuisance {
    pub pi: Simplex,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CrossFit {
    pub folds: FoldAssignment,
    pub pairs: Vec<NuisancePair>,
}

impl CrossFit {
    pub fn fit(data: &Dataset, folds: FoldAssignment, spec: &NuisanceSpec, exec: Exec) -> Result<Self, NuisanceError> {
        if folds.len() != data.len() {
            return Err(NuisanceError::Folds {
                n: data.len(),
                k: folds.k(),
            });
        }
        let pairs = exec.try_map(folds.k(), |f| {
            let train_rows = folds.complement(f);
            let train = data.subset(&train_rows);
            Ok::<_, NuisanceError>(NuisancePair {
                fold: f,
                propensity: fit_propensity(&train, &spec.propensity)?,
                outcome: fit_outcome(&train, spec.outcome_transform)?,
                train_rows,
            })
        })?;
        Ok(Self { folds, pairs })
    }

    /// Out-of-fold nuisance values for every row of `data`.
    pub fn predictions(&self, data: &Dataset) -> Result<Vec<RowNuisance>, NuisanceError> {
        data.rows()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let pair = &self.pairs[self.folds.fold_of(i)];
                Ok(RowNuisance {
                    pi: pair.propensity.predict(&r.w)?,
                    q: pair.outcome.predict_all(&r.w)?,
                })
            })
            .collect()
    }

    pub fn all_converged(&self) -> bool {
        self.pairs.iter().all(|p| p.propensity.converged)
    }
}
