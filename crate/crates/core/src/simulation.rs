//! Synthetic benchmark: a three-arm data-generating process with four
//! Gaussian covariates, its nonlinear covariate distortion, Monte Carlo
//! ground truth for both policies, and the bias/RMSE study comparing the
//! plug-in and one-step estimators under correct and misspecified nuisances.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::estimation::{estimate_points, EstimatePoint, EstimationError};
use crate::exec::{stream_rng, Exec};
use crate::nuisance::{
    assign_folds, CrossFit, Dataset, FeatureTransform, NuisanceError, NuisanceSpec, Observation, PropensityOptions,
    RowNuisance, DEFAULT_FOLDS,
};
use crate::tilt::{ActionSpace, CostSpec, PolicyTilt, Simplex, TiltConfig, TiltError};

/// Variance of the outcome noise.
pub const NOISE_VARIANCE: f64 = 50.0;
pub const DEFAULT_TRUTH_DRAWS: usize = 1_000_000;
pub const MIN_TRUTH_DRAWS: usize = 100_000;
const TRUTH_BLOCK: usize = 8192;
const TRUTH_SEED_OFFSET: u64 = 0x7275_7468;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("Monte Carlo truth needs at least {MIN_TRUTH_DRAWS} draws, got {0}")]
    TooFewTruthDraws(usize),
    #[error("invalid benchmark settings: {0}")]
    Settings(String),
    #[error("replicate {rep}: {source}")]
    Replicate {
        rep: usize,
        #[source]
        source: EstimationError,
    },
    #[error(transparent)]
    Tilt(#[from] TiltError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
}

fn linear_index(w: &[f64]) -> f64 {
    2.0 * w[0] + w[1] + w[2] + w[3]
}

/// True propensity `pi(. | w)` of the three arms.
pub fn true_propensity(w: &[f64]) -> [f64; 3] {
    let l1 = -2.0 * w[0] + w[1] - 0.5 * w[2] - 0.25 * w[3];
    let l2 = -w[0] + 0.25 * w[1] + 2.0 * w[2] + 0.5 * w[3];
    let m = l1.max(l2).max(0.0);
    let (e1, e2, e3) = ((l1 - m).exp(), (l2 - m).exp(), (-m).exp());
    let z = e1 + e2 + e3;
    [e1 / z, e2 / z, e3 / z]
}

/// True regression `Q(w, a)`.
pub fn true_outcome(w: &[f64], a: usize) -> f64 {
    let q = linear_index(w);
    match a {
        0 => 10.0 - 8.7 * q,
        1 => 40.0 + 17.4 * q,
        _ => 50.0 + 26.1 * q,
    }
}

/// Nonlinear distortion `X(W)` used to misspecify a nuisance model.
pub fn misspecify(w: &[f64]) -> [f64; 3] {
    [
        10.0 + w[1] / (1.0 + w[0].exp()),
        (0.6 + w[0] * w[2] / 25.0).powi(3),
        (w[1] + w[3] + 20.0).powi(2),
    ]
}

fn draw_covariates<R: Rng>(rng: &mut R) -> [f64; 4] {
    std::array::from_fn(|_| StandardNormal.sample(rng))
}

fn draw_action<R: Rng>(rng: &mut R, pi: &[f64; 3]) -> usize {
    let u: f64 = rng.random();
    if u < pi[0] {
        0
    } else if u < pi[0] + pi[1] {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone)]
pub struct DgpSample {
    pub dataset: Dataset,
    pub seed: u64,
}

pub fn dgp_actions() -> ActionSpace {
    ActionSpace::indexed(3).expect("three labels")
}

/// `n` i.i.d. draws `(W, A, Y)`.
pub fn generate(n: usize, seed: u64) -> DgpSample {
    assert!(n >= 1, "sample size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = NOISE_VARIANCE.sqrt();
    let rows = (0..n)
        .map(|_| {
            let w = draw_covariates(&mut rng);
            let a = draw_action(&mut rng, &true_propensity(&w));
            let eps: f64 = StandardNormal.sample(&mut rng);
            Observation {
                y: true_outcome(&w, a) + sd * eps,
                w: w.to_vec(),
                a,
            }
        })
        .collect();
    DgpSample {
        dataset: Dataset::new(rows, dgp_actions(), None).expect("generated rows are valid"),
        seed,
    }
}

/// Nuisances at the truth, with `Q` scaled by `q_scale` (1 keeps it exact).
pub fn oracle_nuisance(data: &Dataset, q_scale: f64) -> Vec<RowNuisance> {
    data.rows()
        .iter()
        .map(|r| RowNuisance {
            pi: Simplex::new(true_propensity(&r.w).to_vec()).expect("softmax output"),
            q: (0..3).map(|a| q_scale * true_outcome(&r.w, a)).collect(),
        })
        .collect()
}

/// Monte Carlo value of both policy functionals at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruthPoint {
    pub delta: f64,
    pub mu_s: f64,
    pub mu_t: f64,
    pub se_s: f64,
    pub se_t: f64,
}

/// Averages `sum_a tilt(a | W) Q(W, a)` over `n_mc` covariate draws for each
/// grid point of `config`.
///
/// Draws are processed in fixed blocks with their own RNG streams, so the
/// result is identical for every thread count.
pub fn truth_oracle(config: &TiltConfig, n_mc: usize, seed: u64, exec: Exec) -> Result<Vec<TruthPoint>, SimulationError> {
    if n_mc < MIN_TRUTH_DRAWS {
        return Err(SimulationError::TooFewTruthDraws(n_mc));
    }
    if config.k() != 3 {
        return Err(SimulationError::Settings("the benchmark process has three actions".into()));
    }
    let tilts = config
        .delta_grid
        .iter()
        .map(|&d| PolicyTilt::new(&config.nu, &config.cost, d))
        .collect::<Result<Vec<_>, _>>()?;
    let g = tilts.len();
    let blocks = n_mc.div_ceil(TRUTH_BLOCK);
    // per block: [sum_s, sumsq_s, sum_t, sumsq_t] per grid point
    let partial = exec.try_map(blocks, |b| {
        let mut rng = stream_rng(seed, b as u64);
        let size = TRUTH_BLOCK.min(n_mc - b * TRUTH_BLOCK);
        let mut acc = vec![[0.0f64; 4]; g];
        let (mut src, mut tgt) = ([0.0; 3], [0.0; 3]);
        for _ in 0..size {
            let w = draw_covariates(&mut rng);
            let pi = true_propensity(&w);
            let q = [true_outcome(&w, 0), true_outcome(&w, 1), true_outcome(&w, 2)];
            for (tilt, a) in tilts.iter().zip(acc.iter_mut()) {
                tilt.marginals_into(&pi, &mut src, &mut tgt)?;
                let ms: f64 = src.iter().zip(&q).map(|(p, q)| p * q).sum();
                let mt: f64 = tgt.iter().zip(&q).map(|(p, q)| p * q).sum();
                a[0] += ms;
                a[1] += ms * ms;
                a[2] += mt;
                a[3] += mt * mt;
            }
        }
        Ok::<_, TiltError>(acc)
    })?;
    let mut total = vec![[0.0f64; 4]; g];
    for block in &partial {
        for (t, a) in total.iter_mut().zip(block) {
            for j in 0..4 {
                t[j] += a[j];
            }
        }
    }
    let n = n_mc as f64;
    let se = |sum: f64, sq: f64| {
        let mean = sum / n;
        ((sq / n - mean * mean).max(0.0) * n / (n - 1.0) / n).sqrt()
    };
    Ok(config
        .delta_grid
        .iter()
        .zip(&total)
        .map(|(&delta, t)| TruthPoint {
            delta,
            mu_s: t[0] / n,
            mu_t: t[2] / n,
            se_s: se(t[0], t[1]),
            se_t: se(t[2], t[3]),
        })
        .collect())
}

/// Which nuisance sees the distorted covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Correct,
    OutcomeMisspecified,
    PropensityMisspecified,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Correct, Regime::OutcomeMisspecified, Regime::PropensityMisspecified];

    /// Short label used in the report table.
    pub fn label(self) -> &'static str {
        match self {
            Regime::Correct => "--",
            Regime::OutcomeMisspecified => "Q",
            Regime::PropensityMisspecified => "pi",
        }
    }

    pub fn nuisance_spec(self, floor: f64) -> NuisanceSpec {
        let (p, q) = match self {
            Regime::Correct => (FeatureTransform::Identity, FeatureTransform::Identity),
            Regime::OutcomeMisspecified => (FeatureTransform::Identity, FeatureTransform::Distorted),
            Regime::PropensityMisspecified => (FeatureTransform::Distorted, FeatureTransform::Identity),
        };
        NuisanceSpec {
            propensity: PropensityOptions {
                transform: p,
                floor,
                ..Default::default()
            },
            outcome_transform: q,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    PlugIn,
    OneStep,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Estimator::PlugIn => "plug-in",
            Estimator::OneStep => "one-step",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Source,
    Target,
}

/// A named cost/target configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Setup {
    pub name: String,
    pub config: TiltConfig,
}

/// The three reference configurations `(c, nu)` on the given grid.
pub fn table_setups(grid: &[f64]) -> Vec<Setup> {
    let make = |name: &str, c: [f64; 3], nu: [f64; 3]| Setup {
        name: name.to_string(),
        config: TiltConfig::new(
            Simplex::new(nu.to_vec()).expect("preset target"),
            CostSpec::Destination(c.to_vec()),
            grid.to_vec(),
        )
        .expect("preset config"),
    };
    vec![
        make("1", [2.0, 1.0, 1.0], [0.4, 0.4, 0.2]),
        make("2", [1.0, 0.5, 2.0], [0.5, 0.3, 0.2]),
        make("3", [1.0, 1.0, 2.0], [0.0, 0.2, 0.8]),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub setups: Vec<Setup>,
    pub n: usize,
    pub reps: usize,
    pub regimes: Vec<Regime>,
    pub folds: usize,
    pub truth_draws: usize,
    pub floor: f64,
    pub seed: u64,
}

impl BenchmarkSpec {
    pub fn new(setups: Vec<Setup>, n: usize, reps: usize, seed: u64) -> Self {
        Self {
            setups,
            n,
            reps,
            regimes: Regime::ALL.to_vec(),
            folds: DEFAULT_FOLDS,
            truth_draws: DEFAULT_TRUTH_DRAWS,
            floor: crate::nuisance::DEFAULT_FLOOR,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkCell {
    pub setup: String,
    pub regime: Regime,
    pub estimator: Estimator,
    pub policy: Policy,
    pub ibias: f64,
    pub irmse: f64,
    /// Per-grid-point bias (mean error over replicates).
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub n: usize,
    pub reps: usize,
    pub folds: usize,
    pub truth_draws: usize,
    pub seed: u64,
    pub setups: Vec<Setup>,
    pub truth: Vec<Vec<TruthPoint>>,
    pub cells: Vec<BenchmarkCell>,
}

/// Independent 64-bit seed for sub-task `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).random()
}

/// Curves of one replicate: `[setup][regime] -> points`.
fn replicate(spec: &BenchmarkSpec, rep: usize) -> Result<Vec<Vec<Vec<EstimatePoint>>>, EstimationError> {
    let data = generate(spec.n, derive_seed(spec.seed, 2 * rep as u64)).dataset;
    let folds = assign_folds(spec.n, spec.folds, derive_seed(spec.seed, 2 * rep as u64 + 1))?;
    let mut per_regime = Vec::with_capacity(spec.regimes.len());
    for regime in &spec.regimes {
        let cross = CrossFit::fit(&data, folds.clone(), &regime.nuisance_spec(spec.floor), Exec::Sequential)?;
        let nuis = cross.predictions(&data)?;
        let curves = spec
            .setups
            .iter()
            .map(|s| estimate_points(&data, &nuis, &s.config, Exec::Sequential))
            .collect::<Result<Vec<_>, _>>()?;
        per_regime.push(curves);
    }
    // regime-major to setup-major
    Ok((0..spec.setups.len())
        .map(|s| per_regime.iter().map(|r| r[s].clone()).collect())
        .collect())
}

fn integrate(errors: &[Vec<f64>]) -> (f64, f64, Vec<f64>) {
    let reps = errors.len() as f64;
    let g = errors[0].len();
    let bias: Vec<f64> = (0..g).map(|j| errors.iter().map(|e| e[j]).sum::<f64>() / reps).collect();
    let rmse: Vec<f64> = (0..g)
        .map(|j| (errors.iter().map(|e| e[j] * e[j]).sum::<f64>() / reps).sqrt())
        .collect();
    let ibias = bias.iter().map(|b| b.abs()).sum::<f64>() / g as f64;
    let irmse = rmse.iter().sum::<f64>() / g as f64;
    (ibias, irmse, bias)
}

/// Runs the full study. Replicates are independent and may run in parallel;
/// any failed replicate aborts the run.
pub fn run_benchmark(spec: &BenchmarkSpec, exec: Exec) -> Result<BenchmarkReport, SimulationError> {
    if spec.reps == 0 || spec.setups.is_empty() || spec.regimes.is_empty() {
        return Err(SimulationError::Settings("need at least one replicate, setup and regime".into()));
    }
    if spec.n < spec.folds.max(2) {
        return Err(SimulationError::Settings(format!("n = {} is smaller than the fold count", spec.n)));
    }
    let truth = spec
        .setups
        .iter()
        .enumerate()
        .map(|(i, s)| truth_oracle(&s.config, spec.truth_draws, derive_seed(spec.seed ^ TRUTH_SEED_OFFSET, i as u64), exec))
        .collect::<Result<Vec<_>, _>>()?;
    let reps = exec.map(spec.reps, |r| replicate(spec, r));
    let mut curves = Vec::with_capacity(spec.reps);
    for (rep, r) in reps.into_iter().enumerate() {
        curves.push(r.map_err(|source| SimulationError::Replicate { rep, source })?);
    }
    let mut cells = Vec::new();
    for (si, setup) in spec.setups.iter().enumerate() {
        for (ri, regime) in spec.regimes.iter().enumerate() {
            for estimator in [Estimator::PlugIn, Estimator::OneStep] {
                for policy in [Policy::Source, Policy::Target] {
                    let errors: Vec<Vec<f64>> = curves
                        .iter()
                        .map(|rep| {
                            rep[si][ri]
                                .iter()
                                .zip(&truth[si])
                                .map(|(p, t)| match (estimator, policy) {
                                    (Estimator::PlugIn, Policy::Source) => p.mu_s_plugin - t.mu_s,
                                    (Estimator::PlugIn, Policy::Target) => p.mu_t_plugin - t.mu_t,
                                    (Estimator::OneStep, Policy::Source) => p.mu_s_onestep - t.mu_s,
                                    (Estimator::OneStep, Policy::Target) => p.mu_t_onestep - t.mu_t,
                                })
                                .collect()
                        })
                        .collect();
                    let (ibias, irmse, bias) = integrate(&errors);
                    cells.push(BenchmarkCell {
                        setup: setup.name.clone(),
                        regime: *regime,
                        estimator,
                        policy,
                        ibias,
                        irmse,
                        bias,
                    });
                }
            }
        }
    }
    Ok(BenchmarkReport {
        n: spec.n,
        reps: spec.reps,
        folds: spec.folds,
        truth_draws: spec.truth_draws,
        seed: spec.seed,
        setups: spec.setups.clone(),
        truth,
        cells,
    })
}

impl BenchmarkReport {
    pub fn cell(&self, setup: &str, regime: Regime, estimator: Estimator, policy: Policy) -> Option<&BenchmarkCell> {
        self.cells
            .iter()
            .find(|c| c.setup == setup && c.regime == regime && c.estimator == estimator && c.policy == policy)
    }

    /// Table layout: one row per (setup, estimator, regime) with iBias and
    /// iRMSE for the source and target policies.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["setup", "cost", "nu", "estimator", "misspec", "ibias_s", "irmse_s", "ibias_t", "irmse_t"])?;
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        for setup in &self.setups {
            let cost = match &setup.config.cost {
                CostSpec::Destination(c) => join(c),
                CostSpec::Matrix(_) => "matrix".to_string(),
            };
            let nu = join(setup.config.nu.probs());
            for estimator in [Estimator::PlugIn, Estimator::OneStep] {
                for regime in Regime::ALL {
                    let (Some(s), Some(t)) = (
                        self.cell(&setup.name, regime, estimator, Policy::Source),
                        self.cell(&setup.name, regime, estimator, Policy::Target),
                    ) else {
                        continue;
                    };
                    w.write_record([
                        setup.name.clone(),
                        cost.clone(),
                        nu.clone(),
                        estimator.label().to_string(),
                        regime.label().to_string(),
                        s.ibias.to_string(),
                        s.irmse.to_string(),
                        t.ibias.to_string(),
                        t.irmse.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl From<NuisanceError> for SimulationError {
    fn from(e: NuisanceError) -> Self {
        SimulationError::Estimation(e.into())
    }
}
