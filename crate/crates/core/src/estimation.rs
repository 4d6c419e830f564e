//! Plug-in and one-step estimation of the expected outcome under the tilted
//! source and tilted target policies.
//!
//! With out-of-fold nuisances `pi_hat`, `Q_hat` at each observation, the
//! uncentered efficient influence functions are
//!
//! ```text
//! D_S = r_S(A) [Y - sum_a pi*(a) Q(a)] + sum_a pi*(a) Q(a)
//! D_T = r_T(A) [Y - Q(A)]
//!     + [2 - r_S(A)] sum_a nu*(a) Q(a)
//!     + r_S(A) rho(A) Q(A) - sum_a pi*(a) rho(a) Q(a)
//! ```
//!
//! with `r_S = pi* / pi_hat` and `r_T = nu* / pi_hat`. The one-step estimate
//! is the sample mean of `D`; the plug-in estimate averages only the
//! policy-weighted regression.

use serde::Serialize;
use thiserror::Error;

use crate::exec::Exec;
use crate::nuisance::{CrossFit, Dataset, FoldAssignment, NuisanceError, NuisanceSpec, Observation, RowNuisance};
use crate::tilt::{PolicyTilt, Simplex, TiltConfig, TiltError};

/// Default flag threshold for the positivity ratio `nu*(a|W) / pi_hat(a|W)`.
pub const DEFAULT_POSITIVITY_THRESHOLD: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("target EIF requires destination costs")]
    TargetNeedsDestinationCosts,
    #[error("{got} nuisance rows supplied for {expected} observations")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Tilt(#[from] TiltError),
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
}

/// Uncentered EIF values at one observation and their summands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EifRow {
    pub d_source: f64,
    pub d_target: f64,
    pub s1: f64,
    pub s2: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    /// `sum_a nu*(a) Q(a)`, the target plug-in term.
    pub target_plugin: f64,
}

/// Per-`delta` evaluator holding the tilt and scratch buffers.
struct RowEvaluator {
    tilt: PolicyTilt,
    rho: Option<Vec<f64>>,
    source: Vec<f64>,
    target: Vec<f64>,
}

impl RowEvaluator {
    fn new(config: &TiltConfig, delta: f64) -> Result<Self, EstimationError> {
        let tilt = PolicyTilt::new(&config.nu, &config.cost, delta)?;
        let rho = tilt.rho();
        let k = config.k();
        Ok(Self {
            tilt,
            rho,
            source: vec![0.0; k],
            target: vec![0.0; k],
        })
    }

    /// Source-policy summands `(s1, s2)`.
    fn source_terms(&mut self, a: usize, y: f64, pi_hat: &[f64], q_hat: &[f64]) -> Result<(f64, f64), EstimationError> {
        self.tilt.marginals_into(pi_hat, &mut self.source, &mut self.target)?;
        let m_s: f64 = self.source.iter().zip(q_hat).map(|(p, q)| p * q).sum();
        let ratio_s = self.source[a] / pi_hat[a];
        Ok((ratio_s * (y - m_s), m_s))
    }

    fn row(&mut self, a: usize, y: f64, pi_hat: &[f64], q_hat: &[f64]) -> Result<EifRow, EstimationError> {
        let (s1, s2) = self.source_terms(a, y, pi_hat, q_hat)?;
        let rho = self.rho.as_ref().ok_or(EstimationError::TargetNeedsDestinationCosts)?;
        let ratio_s = self.source[a] / pi_hat[a];
        let ratio_t = self.target[a] / pi_hat[a];
        let m_t: f64 = self.target.iter().zip(q_hat).map(|(p, q)| p * q).sum();
        let t1 = ratio_t * (y - q_hat[a]);
        let t2 = (2.0 - ratio_s) * m_t;
        let rho_mean: f64 = self
            .source
            .iter()
            .zip(rho)
            .zip(q_hat)
            .map(|((p, r), q)| p * r * q)
            .sum();
        let t3 = ratio_s * rho[a] * q_hat[a] - rho_mean;
        Ok(EifRow {
            d_source: s1 + s2,
            d_target: t1 + t2 + t3,
            s1,
            s2,
            t1,
            t2,
            t3,
            target_plugin: m_t,
        })
    }
}

fn check_row(obs: &Observation, pi_hat: &Simplex, q_hat: &[f64], k: usize) -> Result<(), EstimationError> {
    if pi_hat.len() != k || q_hat.len() != k {
        return Err(EstimationError::Length {
            expected: k,
            got: pi_hat.len().min(q_hat.len()),
        });
    }
    if obs.a >= k {
        return Err(NuisanceError::InvalidData(format!("action index {} outside 0..{k}", obs.a)).into());
    }
    Ok(())
}

/// Source-policy EIF `(D_S1, D_S2)` at `obs`. Valid for any cost form.
pub fn eif_source(obs: &Observation, pi_hat: &Simplex, q_hat: &[f64], config: &TiltConfig, delta: f64) -> Result<(f64, f64), EstimationError> {
    check_row(obs, pi_hat, q_hat, config.k())?;
    RowEvaluator::new(config, delta)?.source_terms(obs.a, obs.y, pi_hat.probs(), q_hat)
}

/// Target-policy EIF `(D_T1, D_T2, D_T3)` at `obs`; destination costs only.
pub fn eif_target(obs: &Observation, pi_hat: &Simplex, q_hat: &[f64], config: &TiltConfig, delta: f64) -> Result<(f64, f64, f64), EstimationError> {
    let r = eif_row(obs, pi_hat, q_hat, config, delta)?;
    Ok((r.t1, r.t2, r.t3))
}

/// Both EIFs and all summands at `obs`; destination costs only.
pub fn eif_row(obs: &Observation, pi_hat: &Simplex, q_hat: &[f64], config: &TiltConfig, delta: f64) -> Result<EifRow, EstimationError> {
    check_row(obs, pi_hat, q_hat, config.k())?;
    if config.cost.destination().is_none() {
        return Err(EstimationError::TargetNeedsDestinationCosts);
    }
    RowEvaluator::new(config, delta)?.row(obs.a, obs.y, pi_hat.probs(), q_hat)
}

fn check_lengths(data: &Dataset, nuis: &[RowNuisance]) -> Result<(), EstimationError> {
    if data.len() != nuis.len() {
        return Err(EstimationError::Length {
            expected: data.len(),
            got: nuis.len(),
        });
    }
    Ok(())
}

/// Plug-in estimates `(mu_S, mu_T)` at `delta` from out-of-fold nuisances.
pub fn plugin_functionals(data: &Dataset, nuis: &[RowNuisance], config: &TiltConfig, delta: f64) -> Result<(f64, f64), EstimationError> {
    check_lengths(data, nuis)?;
    let tilt = PolicyTilt::new(&config.nu, &config.cost, delta)?;
    let k = config.k();
    let (mut src, mut tgt) = (vec![0.0; k], vec![0.0; k]);
    let (mut mu_s, mut mu_t) = (0.0, 0.0);
    for r in nuis {
        tilt.marginals_into(r.pi.probs(), &mut src, &mut tgt)?;
        mu_s += src.iter().zip(&r.q).map(|(p, q)| p * q).sum::<f64>();
        mu_t += tgt.iter().zip(&r.q).map(|(p, q)| p * q).sum::<f64>();
    }
    let n = nuis.len() as f64;
    Ok((mu_s / n, mu_t / n))
}

/// Estimates at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatePoint {
    pub delta: f64,
    pub mu_s_plugin: f64,
    pub mu_t_plugin: f64,
    pub mu_s_onestep: f64,
    pub mu_t_onestep: f64,
    pub sigma_s: f64,
    pub sigma_t: f64,
}

/// One-step curve plus the EIF columns (one `Vec` of length n per `delta`)
/// needed by the multiplier bootstrap.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveFit {
    pub points: Vec<EstimatePoint>,
    pub eif_source: Vec<Vec<f64>>,
    pub eif_target: Vec<Vec<f64>>,
}

impl CurveFit {
    pub fn n(&self) -> usize {
        self.eif_source.first().map_or(0, Vec::len)
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    let sd = if v.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

/// One-step and plug-in estimates over `config.delta_grid` from out-of-fold
/// nuisances. Grid points may run in parallel; output order follows the grid.
pub fn one_step_curve_from(data: &Dataset, nuis: &[RowNuisance], config: &TiltConfig, exec: Exec) -> Result<CurveFit, EstimationError> {
    curve_impl(data, nuis, config, exec, true)
}

/// Like [`one_step_curve_from`] but without retaining the EIF columns.
pub fn estimate_points(data: &Dataset, nuis: &[RowNuisance], config: &TiltConfig, exec: Exec) -> Result<Vec<EstimatePoint>, EstimationError> {
    Ok(curve_impl(data, nuis, config, exec, false)?.points)
}

fn curve_impl(data: &Dataset, nuis: &[RowNuisance], config: &TiltConfig, exec: Exec, keep_eif: bool) -> Result<CurveFit, EstimationError> {
    check_lengths(data, nuis)?;
    if config.cost.destination().is_none() {
        return Err(EstimationError::TargetNeedsDestinationCosts);
    }
    let per_delta = exec.try_map(config.delta_grid.len(), |g| {
        let delta = config.delta_grid[g];
        let mut ev = RowEvaluator::new(config, delta)?;
        let n = data.len();
        let mut ds = Vec::with_capacity(n);
        let mut dt = Vec::with_capacity(n);
        let (mut plug_s, mut plug_t) = (0.0, 0.0);
        for (obs, r) in data.rows().iter().zip(nuis) {
            let row = ev.row(obs.a, obs.y, r.pi.probs(), &r.q)?;
            ds.push(row.d_source);
            dt.push(row.d_target);
            plug_s += row.s2;
            plug_t += row.target_plugin;
        }
        let (mu_s, sigma_s) = mean_sd(&ds);
        let (mu_t, sigma_t) = mean_sd(&dt);
        let point = EstimatePoint {
            delta,
            mu_s_plugin: plug_s / n as f64,
            mu_t_plugin: plug_t / n as f64,
            mu_s_onestep: mu_s,
            mu_t_onestep: mu_t,
            sigma_s,
            sigma_t,
        };
        if !keep_eif {
            ds = Vec::new();
            dt = Vec::new();
        }
        Ok::<_, EstimationError>((point, ds, dt))
    })?;
    let mut fit = CurveFit {
        points: Vec::with_capacity(per_delta.len()),
        eif_source: Vec::with_capacity(per_delta.len()),
        eif_target: Vec::with_capacity(per_delta.len()),
    };
    for (p, ds, dt) in per_delta {
        fit.points.push(p);
        if keep_eif {
            fit.eif_source.push(ds);
            fit.eif_target.push(dt);
        }
    }
    Ok(fit)
}

/// Cross-fits the nuisances on `folds` and builds the one-step curve.
pub fn one_step_curve(data: &Dataset, folds: FoldAssignment, config: &TiltConfig, spec: &NuisanceSpec, exec: Exec) -> Result<(CurveFit, CrossFit), EstimationError> {
    let cross = CrossFit::fit(data, folds, spec, exec)?;
    let nuis = cross.predictions(data)?;
    Ok((one_step_curve_from(data, &nuis, config, exec)?, cross))
}

/// Largest `nu*(a|W_i) / pi_hat(a|W_i)` per grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityReport {
    pub deltas: Vec<f64>,
    pub max_ratio: Vec<f64>,
    pub threshold: f64,
    pub flagged: Vec<bool>,
}

impl PositivityReport {
    pub fn any_flagged(&self) -> bool {
        self.flagged.iter().any(|f| *f)
    }
}

pub fn positivity_diagnostic(nuis: &[RowNuisance], config: &TiltConfig, delta_grid: &[f64], threshold: f64) -> Result<PositivityReport, EstimationError> {
    let k = config.k();
    let mut max_ratio = Vec::with_capacity(delta_grid.len());
    for &delta in delta_grid {
        let tilt = PolicyTilt::new(&config.nu, &config.cost, delta)?;
        let (mut src, mut tgt) = (vec![0.0; k], vec![0.0; k]);
        let mut worst: f64 = 0.0;
        for r in nuis {
            tilt.marginals_into(r.pi.probs(), &mut src, &mut tgt)?;
            for (t, p) in tgt.iter().zip(r.pi.probs()) {
                if *t > 0.0 {
                    worst = worst.max(if *p > 0.0 { t / p } else { f64::INFINITY });
                }
            }
        }
        max_ratio.push(worst);
    }
    let flagged = max_ratio.iter().map(|r| *r > threshold).collect();
    Ok(PositivityReport {
        deltas: delta_grid.to_vec(),
        max_ratio,
        threshold,
        flagged,
    })
}
