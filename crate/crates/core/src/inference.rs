//! Pointwise Wald intervals and multiplier-bootstrap uniform bands over the
//! tilt grid.
//!
//! Draw `b` uses one vector of standard normal multipliers `chi_i`, shared
//! across every grid point and every process passed in together, and
//! records
//!
//! ```text
//! sup_delta | n^{-1/2} sum_i chi_i (D_delta(O_i) - mu_delta) / sigma_delta |
//! ```
//!
//! The critical value is the `ceil((1 - alpha) B)`-th order statistic.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::estimation::EstimatePoint;
use crate::exec::{stream_rng, Exec};

pub const DEFAULT_BOOTSTRAP: usize = 1000;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const MIN_BOOTSTRAP: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("degenerate EIF variance at grid point {0}")]
    DegenerateVariance(usize),
    #[error("bootstrap needs at least {MIN_BOOTSTRAP} draws, got {0}")]
    TooFewDraws(usize),
    #[error("alpha {0} outside (0, 1)")]
    Alpha(f64),
    #[error("inconsistent process shape: {0}")]
    Shape(String),
}

/// Centered-and-scaled EIF process over the grid: `columns[g][i]` is
/// `D_g(O_i)`.
#[derive(Debug, Clone, Copy)]
pub struct EifProcess<'a> {
    pub columns: &'a [Vec<f64>],
    pub mu: &'a [f64],
    pub sigma: &'a [f64],
}

fn standardize(p: &EifProcess<'_>, n: usize) -> Result<Vec<Vec<f64>>, InferenceError> {
    if p.columns.is_empty() || p.mu.len() != p.columns.len() || p.sigma.len() != p.columns.len() {
        return Err(InferenceError::Shape(format!(
            "{} columns, {} means, {} scales",
            p.columns.len(),
            p.mu.len(),
            p.sigma.len()
        )));
    }
    p.columns
        .iter()
        .enumerate()
        .map(|(g, col)| {
            if col.len() != n {
                return Err(InferenceError::Shape(format!("column {g} has {} rows, expected {n}", col.len())));
            }
            let s = p.sigma[g];
            // round-off level spread counts as no spread
            if !(s.is_finite() && s > 1e-12 * p.mu[g].abs().max(1.0)) {
                return Err(InferenceError::DegenerateVariance(g));
            }
            let scale = 1.0 / (s * (n as f64).sqrt());
            Ok(col.iter().map(|d| (d - p.mu[g]) * scale).collect())
        })
        .collect()
}

/// Sup statistics for each draw and each process: `out[b][j]`.
pub fn multiplier_draws(processes: &[EifProcess<'_>], draws: usize, seed: u64, exec: Exec) -> Result<Vec<Vec<f64>>, InferenceError> {
    let n = processes
        .first()
        .and_then(|p| p.columns.first())
        .map(Vec::len)
        .ok_or_else(|| InferenceError::Shape("no processes".into()))?;
    let scaled = processes
        .iter()
        .map(|p| standardize(p, n))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(exec.map(draws, |b| {
        let mut rng = stream_rng(seed, b as u64);
        let chi: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        scaled
            .iter()
            .map(|cols| {
                cols.iter()
                    .map(|col| col.iter().zip(&chi).map(|(z, c)| z * c).sum::<f64>().abs())
                    .fold(0.0, f64::max)
            })
            .collect()
    }))
}

/// Empirical `(1 - alpha)` quantile as the `ceil((1 - alpha) B)`-th order statistic.
pub fn upper_quantile(values: &mut [f64], alpha: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let b = values.len();
    let rank = (((1.0 - alpha) * b as f64) - 1e-9).ceil() as usize;
    values[rank.clamp(1, b) - 1]
}

fn check_params(draws: usize, alpha: f64) -> Result<(), InferenceError> {
    if draws < MIN_BOOTSTRAP {
        return Err(InferenceError::TooFewDraws(draws));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(InferenceError::Alpha(alpha));
    }
    Ok(())
}

/// Critical values for several processes from the same multipliers.
pub fn multiplier_critical_values(processes: &[EifProcess<'_>], draws: usize, alpha: f64, seed: u64, exec: Exec) -> Result<Vec<f64>, InferenceError> {
    check_params(draws, alpha)?;
    let stats = multiplier_draws(processes, draws, seed, exec)?;
    Ok((0..processes.len())
        .map(|j| {
            let mut v: Vec<f64> = stats.iter().map(|s| s[j]).collect();
            upper_quantile(&mut v, alpha)
        })
        .collect())
}

/// Uniform-band critical value for one process.
pub fn multiplier_critical_value(
    eif_columns: &[Vec<f64>],
    mu: &[f64],
    sigma: &[f64],
    draws: usize,
    alpha: f64,
    seed: u64,
    exec: Exec,
) -> Result<f64, InferenceError> {
    let p = EifProcess {
        columns: eif_columns,
        mu,
        sigma,
    };
    Ok(multiplier_critical_values(&[p], draws, alpha, seed, exec)?[0])
}

/// Two-sided normal critical value `z_{1 - alpha / 2}`.
pub fn pointwise_critical(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha / 2.0)
}

/// `mu -/+ xi sigma / sqrt(n)`.
pub fn interval(mu: f64, sigma: f64, xi: f64, n: usize) -> (f64, f64) {
    let half = xi * sigma / (n as f64).sqrt();
    (mu - half, mu + half)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandResult {
    pub delta_grid: Vec<f64>,
    pub estimates: Vec<f64>,
    pub sigma: Vec<f64>,
    pub lower_pointwise: Vec<f64>,
    pub upper_pointwise: Vec<f64>,
    pub lower_uniform: Vec<f64>,
    pub upper_uniform: Vec<f64>,
    pub critical_value: f64,
    pub pointwise_critical: f64,
    pub bootstrap: usize,
    pub alpha: f64,
    pub n: usize,
}

impl BandResult {
    /// `crit` holds the uniform and pointwise critical values.
    fn new(delta: Vec<f64>, est: Vec<f64>, sigma: Vec<f64>, crit: (f64, f64), n: usize, bootstrap: usize, alpha: f64) -> Self {
        let (xi, z) = crit;
        let pw: Vec<_> = est.iter().zip(&sigma).map(|(m, s)| interval(*m, *s, z, n)).collect();
        let un: Vec<_> = est.iter().zip(&sigma).map(|(m, s)| interval(*m, *s, xi, n)).collect();
        Self {
            delta_grid: delta,
            estimates: est,
            sigma,
            lower_pointwise: pw.iter().map(|p| p.0).collect(),
            upper_pointwise: pw.iter().map(|p| p.1).collect(),
            lower_uniform: un.iter().map(|p| p.0).collect(),
            upper_uniform: un.iter().map(|p| p.1).collect(),
            critical_value: xi,
            pointwise_critical: z,
            bootstrap,
            alpha,
            n,
        }
    }

    /// True when every `truth[g]` lies inside the uniform band.
    pub fn covers_uniformly(&self, truth: &[f64]) -> bool {
        truth
            .iter()
            .enumerate()
            .all(|(g, t)| self.lower_uniform[g] <= *t && *t <= self.upper_uniform[g])
    }

    pub fn covers_pointwise(&self, g: usize, truth: f64) -> bool {
        self.lower_pointwise[g] <= truth && truth <= self.upper_pointwise[g]
    }

    /// One row per grid point.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "delta",
            "estimate",
            "sigma",
            "lower_pointwise",
            "upper_pointwise",
            "lower_uniform",
            "upper_uniform",
        ])?;
        for g in 0..self.delta_grid.len() {
            w.write_record(
                [
                    self.delta_grid[g],
                    self.estimates[g],
                    self.sigma[g],
                    self.lower_pointwise[g],
                    self.upper_pointwise[g],
                    self.lower_uniform[g],
                    self.upper_uniform[g],
                ]
                .iter()
                .map(f64::to_string),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Bands for the source and target one-step curves. Pointwise intervals use
/// `z_{1 - alpha / 2}`; uniform bands use `xi_s` / `xi_t`.
pub fn build_bands(curve: &[EstimatePoint], xi_s: f64, xi_t: f64, n: usize, alpha: f64, bootstrap: usize) -> (BandResult, BandResult) {
    let z = pointwise_critical(alpha);
    let delta: Vec<f64> = curve.iter().map(|p| p.delta).collect();
    let s = BandResult::new(
        delta.clone(),
        curve.iter().map(|p| p.mu_s_onestep).collect(),
        curve.iter().map(|p| p.sigma_s).collect(),
        (xi_s, z),
        n,
        bootstrap,
        alpha,
    );
    let t = BandResult::new(
        delta,
        curve.iter().map(|p| p.mu_t_onestep).collect(),
        curve.iter().map(|p| p.sigma_t).collect(),
        (xi_t, z),
        n,
        bootstrap,
        alpha,
    );
    (s, t)
}
