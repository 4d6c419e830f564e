//! Cost-penalized I-projection couplings and their tilted marginals.
//!
//! For a source law `pi` (the organic propensity at one covariate profile), a
//! target law `nu` and a reallocation cost `c(a', a'')`, the coupling
//!
//! ```text
//! gamma(a', a'') ∝ pi(a') nu(a'') exp(-delta c(a', a''))
//! ```
//!
//! minimizes `KL(gamma | pi ⊗ nu) + delta E_gamma[c]`. Its row and column sums
//! are the tilted source and tilted target policies. When the cost only
//! depends on the destination, `c(a', a'') = c(a'') 1(a' != a'')`, both
//! marginals have O(K) closed forms in terms of
//!
//! ```text
//! xi(a) = nu(a) (1 - exp(-delta c(a)))
//! zeta  = sum_a nu(a) exp(-delta c(a))
//! ```
//!
//! All evaluations are carried out with the largest exponent factored out so
//! that `|delta c|` in the hundreds neither overflows nor underflows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating probability vectors.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TiltError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("dimension mismatch in {field}: expected {expected}, got {got}")]
    Dimension {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),
    #[error("weights undefined for general costs")]
    GeneralCostWeights,
    #[error("propensity {0} outside the open interval (0, 1)")]
    Domain(f64),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> TiltError {
    TiltError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Ordered, labelled set of K ≥ 2 treatment options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ActionSpace {
    labels: Vec<String>,
}

impl ActionSpace {
    pub fn new(labels: Vec<String>) -> Result<Self, TiltError> {
        if labels.len() < 2 {
            return Err(invalid("actions", "at least two actions are required"));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(invalid("actions", format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// Actions labelled `"0"`, `"1"`, ..., `"k-1"`.
    pub fn indexed(k: usize) -> Result<Self, TiltError> {
        Self::new((0..k).map(|i| i.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

impl TryFrom<Vec<String>> for ActionSpace {
    type Error = TiltError;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ActionSpace> for Vec<String> {
    fn from(a: ActionSpace) -> Self {
        a.labels
    }
}

/// Probability vector over the action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Simplex(Vec<f64>);

impl Simplex {
    /// Validates `probs` (entries ≥ 0 and sum 1, both within [`SIMPLEX_TOL`]),
    /// then clamps round-off negatives and renormalizes.
    pub fn new(probs: Vec<f64>) -> Result<Self, TiltError> {
        if probs.is_empty() {
            return Err(invalid("simplex", "empty probability vector"));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < -SIMPLEX_TOL) {
            return Err(invalid("simplex", format!("entry {p} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid("simplex", format!("entries sum to {sum}, not 1")));
        }
        Ok(Self::normalize_clamped(probs))
    }

    /// Normalizes nonnegative weights with a positive total.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, TiltError> {
        if weights.is_empty() {
            return Err(invalid("weights", "empty weight vector"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("weights", "weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(TiltError::DegenerateKernel(format!(
                "normalizer is {total}"
            )));
        }
        Ok(Self(weights.into_iter().map(|w| w / total).collect()))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn point_mass(k: usize, at: usize) -> Self {
        let mut v = vec![0.0; k];
        v[at] = 1.0;
        Self(v)
    }

    fn normalize_clamped(mut v: Vec<f64>) -> Self {
        for p in v.iter_mut() {
            *p = p.max(0.0);
        }
        let s: f64 = v.iter().sum();
        for p in v.iter_mut() {
            *p /= s;
        }
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for Simplex {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for Simplex {
    type Error = TiltError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<Simplex> for Vec<f64> {
    fn from(s: Simplex) -> Self {
        s.0
    }
}

/// Reallocation cost between actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostSpec {
    /// `c(a', a'') = c(a'') 1(a' != a'')`.
    Destination(Vec<f64>),
    /// Full `K x K` matrix, row = origin, column = destination.
    Matrix(Vec<Vec<f64>>),
}

impl CostSpec {
    /// `c(a', a'') = 1(a' != a'')`.
    pub fn hamming(k: usize) -> Self {
        CostSpec::Destination(vec![1.0; k])
    }

    pub fn k(&self) -> usize {
        match self {
            CostSpec::Destination(c) => c.len(),
            CostSpec::Matrix(m) => m.len(),
        }
    }

    pub fn validate(&self, k: usize) -> Result<(), TiltError> {
        let check = |x: f64| {
            if x.is_finite() && x >= 0.0 {
                Ok(())
            } else {
                Err(invalid("cost", format!("entry {x} must be finite and >= 0")))
            }
        };
        match self {
            CostSpec::Destination(c) => {
                if c.len() != k {
                    return Err(TiltError::Dimension {
                        field: "cost",
                        expected: k,
                        got: c.len(),
                    });
                }
                c.iter().try_for_each(|&x| check(x))
            }
            CostSpec::Matrix(m) => {
                if m.len() != k {
                    return Err(TiltError::Dimension {
                        field: "cost",
                        expected: k,
                        got: m.len(),
                    });
                }
                for row in m {
                    if row.len() != k {
                        return Err(TiltError::Dimension {
                            field: "cost",
                            expected: k,
                            got: row.len(),
                        });
                    }
                    row.iter().try_for_each(|&x| check(x))?;
                }
                Ok(())
            }
        }
    }

    /// Cost of moving a unit from `from` to `to`.
    pub fn pair(&self, from: usize, to: usize) -> f64 {
        match self {
            CostSpec::Destination(c) => {
                if from == to {
                    0.0
                } else {
                    c[to]
                }
            }
            CostSpec::Matrix(m) => m[from][to],
        }
    }

    /// Expands to the full matrix form.
    pub fn to_matrix(&self) -> CostSpec {
        let k = self.k();
        CostSpec::Matrix(
            (0..k)
                .map(|i| (0..k).map(|j| self.pair(i, j)).collect())
                .collect(),
        )
    }

    pub fn destination(&self) -> Option<&[f64]> {
        match self {
            CostSpec::Destination(c) => Some(c),
            CostSpec::Matrix(_) => None,
        }
    }
}

/// Policy design input: target law, cost and the grid of tilt values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltConfig {
    pub nu: Simplex,
    pub cost: CostSpec,
    pub delta_grid: Vec<f64>,
}

impl TiltConfig {
    pub fn new(nu: Simplex, cost: CostSpec, delta_grid: Vec<f64>) -> Result<Self, TiltError> {
        cost.validate(nu.len())?;
        if nu.len() < 2 {
            return Err(invalid("nu", "at least two actions are required"));
        }
        if delta_grid.is_empty() {
            return Err(invalid("delta", "grid is empty"));
        }
        if delta_grid.iter().any(|d| !d.is_finite()) {
            return Err(invalid("delta", "grid values must be finite"));
        }
        if delta_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("delta", "grid must be strictly increasing"));
        }
        Ok(Self {
            nu,
            cost,
            delta_grid,
        })
    }

    /// `points` equally spaced values on `[min, max]`.
    pub fn linspace(min: f64, max: f64, points: usize) -> Vec<f64> {
        match points {
            0 => vec![],
            1 => vec![min],
            _ => (0..points)
                .map(|i| min + (max - min) * i as f64 / (points - 1) as f64)
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.nu.len()
    }
}

/// The joint CPIP solution, row-major, rows indexed by the source action.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coupling {
    k: usize,
    joint: Vec<f64>,
}

impl Coupling {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.joint[from * self.k + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.joint[from * self.k..(from + 1) * self.k]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.k).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.k)
            .map(|j| (0..self.k).map(|i| self.get(i, j)).sum())
            .collect()
    }
}

/// `xi`, `zeta` and `rho = xi / (zeta + xi)` for destination costs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TiltWeights {
    pub xi: Vec<f64>,
    pub zeta: f64,
    pub rho: Vec<f64>,
}

fn check_inputs(pi: &Simplex, nu: &Simplex, cost: &CostSpec, delta: f64) -> Result<(), TiltError> {
    if pi.len() != nu.len() {
        return Err(TiltError::Dimension {
            field: "pi",
            expected: nu.len(),
            got: pi.len(),
        });
    }
    cost.validate(nu.len())?;
    if !delta.is_finite() {
        return Err(invalid("delta", format!("{delta} is not finite")));
    }
    Ok(())
}

fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Precomputed destination-cost tilt at one `delta`.
///
/// Every quantity is scaled by `exp(-m)` with `m = max(0, max_a -delta c(a))`
/// over the support of `nu`, which leaves the normalized marginals unchanged.
#[derive(Debug, Clone)]
struct DestinationTilt {
    nu: Vec<f64>,
    /// `exp(-delta c(a) - m)`
    decay: Vec<f64>,
    /// `exp(-m)`
    scale: f64,
    /// `(zeta + xi(a)) exp(-m)`
    source_weight: Vec<f64>,
}

impl DestinationTilt {
    fn new(nu: &[f64], costs: &[f64], delta: f64) -> Self {
        let shift = nu
            .iter()
            .zip(costs)
            .filter(|(n, _)| **n > 0.0)
            .map(|(_, c)| -delta * c)
            .fold(0.0_f64, f64::max);
        let scale = (-shift).exp();
        let decay: Vec<f64> = costs.iter().map(|c| (-delta * c - shift).exp()).collect();
        let zeta_scaled: f64 = nu.iter().zip(&decay).map(|(n, e)| n * e).sum();
        let source_weight = nu
            .iter()
            .zip(&decay)
            .map(|(n, e)| (zeta_scaled + n * (scale - e)).max(0.0))
            .collect();
        Self {
            nu: nu.to_vec(),
            decay,
            scale,
            source_weight,
        }
    }

    /// Writes the tilted source and target marginals for propensity `pi`.
    fn marginals(&self, pi: &[f64], source: &mut [f64], target: &mut [f64]) -> Result<(), TiltError> {
        let mut h = 0.0;
        let mut t_total = 0.0;
        for a in 0..pi.len() {
            source[a] = pi[a] * self.source_weight[a];
            target[a] = self.nu[a] * (pi[a] * self.scale + self.decay[a] * (1.0 - pi[a]));
            h += source[a];
            t_total += target[a];
        }
        if !(h > 0.0 && h.is_finite() && t_total > 0.0 && t_total.is_finite()) {
            return Err(TiltError::DegenerateKernel(format!(
                "normalizer underflowed ({h:e})"
            )));
        }
        source.iter_mut().for_each(|s| *s /= h);
        target.iter_mut().for_each(|t| *t /= t_total);
        Ok(())
    }

    fn rho(&self) -> Vec<f64> {
        self.nu
            .iter()
            .zip(&self.decay)
            .zip(&self.source_weight)
            .map(|((n, e), w)| if *w > 0.0 { n * (self.scale - e) / w } else { 0.0 })
            .collect()
    }
}

/// General-cost tilt evaluated through the log-domain kernel.
#[derive(Debug, Clone)]
struct GeneralTilt {
    k: usize,
    /// `ln nu(a'') - delta c(a', a'')`, row-major.
    log_kernel: Vec<f64>,
}

impl GeneralTilt {
    fn new(nu: &[f64], cost: &CostSpec, delta: f64) -> Self {
        let k = nu.len();
        let mut log_kernel = Vec::with_capacity(k * k);
        for i in 0..k {
            for (j, n) in nu.iter().enumerate() {
                log_kernel.push(ln_or_neg_inf(*n) - delta * cost.pair(i, j));
            }
        }
        Self { k, log_kernel }
    }

    fn joint(&self, pi: &[f64]) -> Result<Vec<f64>, TiltError> {
        let k = self.k;
        let mut logs = Vec::with_capacity(k * k);
        for (p, row) in pi.iter().zip(self.log_kernel.chunks(k)) {
            let lp = ln_or_neg_inf(*p);
            logs.extend(row.iter().map(|l| lp + l));
        }
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(TiltError::DegenerateKernel(format!(
                "largest log-kernel entry is {m}"
            )));
        }
        let mut joint: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = joint.iter().sum();
        if !(z > 0.0 && z.is_finite()) {
            return Err(TiltError::DegenerateKernel(format!("normalizer is {z}")));
        }
        joint.iter_mut().for_each(|g| *g /= z);
        Ok(joint)
    }

    fn marginals(&self, pi: &[f64], source: &mut [f64], target: &mut [f64]) -> Result<(), TiltError> {
        let joint = self.joint(pi)?;
        let k = self.k;
        source.iter_mut().for_each(|s| *s = 0.0);
        target.iter_mut().for_each(|t| *t = 0.0);
        for i in 0..k {
            for j in 0..k {
                source[i] += joint[i * k + j];
                target[j] += joint[i * k + j];
            }
        }
        renormalize(source);
        renormalize(target);
        Ok(())
    }

    /// Row `from` of the conditional kernel `gamma(from, .) / pi_star(from)`.
    fn kernel_row(&self, from: usize, out: &mut [f64]) {
        let row = &self.log_kernel[from * self.k..(from + 1) * self.k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (o, l) in out.iter_mut().zip(row) {
            *o = (l - m).exp();
        }
        renormalize(out);
    }
}

fn renormalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

/// Tilt policy at a fixed `delta`, reusable across covariate profiles.
///
/// Destination costs take the O(K) path; a full matrix goes through the
/// joint kernel.
#[derive(Debug, Clone)]
pub struct PolicyTilt {
    delta: f64,
    kind: TiltKind,
    general: GeneralTilt,
}

#[derive(Debug, Clone)]
enum TiltKind {
    Destination(DestinationTilt),
    General,
}

impl PolicyTilt {
    pub fn new(nu: &Simplex, cost: &CostSpec, delta: f64) -> Result<Self, TiltError> {
        check_inputs(nu, nu, cost, delta)?;
        let kind = match cost {
            CostSpec::Destination(c) => TiltKind::Destination(DestinationTilt::new(nu.probs(), c, delta)),
            CostSpec::Matrix(_) => TiltKind::General,
        };
        Ok(Self {
            delta,
            kind,
            general: GeneralTilt::new(nu.probs(), cost, delta),
        })
    }

    /// Forces the general kernel path even for destination costs.
    pub fn general(nu: &Simplex, cost: &CostSpec, delta: f64) -> Result<Self, TiltError> {
        let mut t = Self::new(nu, cost, delta)?;
        t.kind = TiltKind::General;
        Ok(t)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn k(&self) -> usize {
        self.general.k
    }

    /// Writes the tilted source and target marginals for the propensity `pi`.
    pub fn marginals_into(&self, pi: &[f64], source: &mut [f64], target: &mut [f64]) -> Result<(), TiltError> {
        match &self.kind {
            TiltKind::Destination(d) => d.marginals(pi, source, target),
            TiltKind::General => self.general.marginals(pi, source, target),
        }
    }

    pub fn marginals(&self, pi: &Simplex) -> Result<(Simplex, Simplex), TiltError> {
        let k = self.k();
        if pi.len() != k {
            return Err(TiltError::Dimension {
                field: "pi",
                expected: k,
                got: pi.len(),
            });
        }
        let mut s = vec![0.0; k];
        let mut t = vec![0.0; k];
        self.marginals_into(pi.probs(), &mut s, &mut t)?;
        Ok((Simplex(s), Simplex(t)))
    }

    /// `rho(a) = xi(a) / (zeta + xi(a))`; `None` for general costs.
    pub fn rho(&self) -> Option<Vec<f64>> {
        match &self.kind {
            TiltKind::Destination(d) => Some(d.rho()),
            TiltKind::General => None,
        }
    }

    pub fn coupling(&self, pi: &Simplex) -> Result<Coupling, TiltError> {
        Ok(Coupling {
            k: self.k(),
            joint: self.general.joint(pi.probs())?,
        })
    }

    pub fn pushforward(&self, pi: &Simplex) -> Result<Simplex, TiltError> {
        let k = self.k();
        let mut out = vec![0.0; k];
        let mut row = vec![0.0; k];
        for (from, p) in pi.probs().iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            self.general.kernel_row(from, &mut row);
            for (o, r) in out.iter_mut().zip(&row) {
                *o += p * r;
            }
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(TiltError::DegenerateKernel("non-finite pushforward".into()));
        }
        renormalize(&mut out);
        Ok(Simplex(out))
    }
}

/// Joint CPIP solution `gamma(a', a'') ∝ pi(a') nu(a'') exp(-delta c(a', a''))`.
pub fn cpip_coupling(pi_w: &Simplex, nu: &Simplex, cost: &CostSpec, delta: f64) -> Result<Coupling, TiltError> {
    check_inputs(pi_w, nu, cost, delta)?;
    PolicyTilt::general(nu, cost, delta)?.coupling(pi_w)
}

/// Tilted source policy (row marginal of the coupling).
pub fn tilted_source(pi_w: &Simplex, config: &TiltConfig, delta: f64) -> Result<Simplex, TiltError> {
    check_inputs(pi_w, &config.nu, &config.cost, delta)?;
    Ok(PolicyTilt::new(&config.nu, &config.cost, delta)?.marginals(pi_w)?.0)
}

/// Tilted target policy (column marginal of the coupling).
pub fn tilted_target(pi_w: &Simplex, config: &TiltConfig, delta: f64) -> Result<Simplex, TiltError> {
    check_inputs(pi_w, &config.nu, &config.cost, delta)?;
    Ok(PolicyTilt::new(&config.nu, &config.cost, delta)?.marginals(pi_w)?.1)
}

/// Pushforward of `pi_w` through the coupling's conditional kernel.
pub fn pushforward(pi_w: &Simplex, config: &TiltConfig, delta: f64) -> Result<Simplex, TiltError> {
    check_inputs(pi_w, &config.nu, &config.cost, delta)?;
    PolicyTilt::new(&config.nu, &config.cost, delta)?.pushforward(pi_w)
}

/// `(xi, zeta, rho)` at `delta`; destination costs only.
pub fn tilt_weights(config: &TiltConfig, delta: f64) -> Result<TiltWeights, TiltError> {
    let costs = config.cost.destination().ok_or(TiltError::GeneralCostWeights)?;
    if !delta.is_finite() {
        return Err(invalid("delta", format!("{delta} is not finite")));
    }
    let nu = config.nu.probs();
    let decay: Vec<f64> = costs.iter().map(|c| (-delta * c).exp()).collect();
    let xi = nu.iter().zip(&decay).map(|(n, e)| n * (1.0 - e)).collect();
    let zeta = nu.iter().zip(&decay).map(|(n, e)| n * e).sum();
    let rho = DestinationTilt::new(nu, costs, delta).rho();
    Ok(TiltWeights { xi, zeta, rho })
}

/// `delta -> infinity` limits `(pi_star_inf, nu_star_inf)` for destination costs.
pub fn tilted_limits(pi_w: &Simplex, config: &TiltConfig) -> Result<(Simplex, Simplex), TiltError> {
    let costs = config.cost.destination().ok_or(TiltError::GeneralCostWeights)?;
    check_inputs(pi_w, &config.nu, &config.cost, 0.0)?;
    let nu = config.nu.probs();
    let pi = pi_w.probs();
    let free: Vec<bool> = costs.iter().map(|c| *c == 0.0).collect();
    let free_mass: f64 = nu.iter().zip(&free).filter(|(_, f)| **f).map(|(n, _)| n).sum();
    let nu_dagger = nu.iter().zip(&free).map(|(n, f)| if *f { free_mass } else { n + free_mass });
    let pi_dagger = pi.iter().zip(&free).map(|(p, f)| if *f { 1.0 } else { *p });
    let source = Simplex::from_weights(pi.iter().zip(nu_dagger).map(|(p, n)| p * n).collect())?;
    let target = Simplex::from_weights(pi_dagger.zip(nu).map(|(p, n)| p * n).collect())?;
    Ok((source, target))
}

/// Incremental propensity score `e^delta p / (e^delta p + 1 - p)`.
pub fn ipi_propensity(pi1_w: f64, delta: f64) -> Result<f64, TiltError> {
    if !(pi1_w > 0.0 && pi1_w < 1.0) {
        return Err(TiltError::Domain(pi1_w));
    }
    if !delta.is_finite() {
        return Err(invalid("delta", format!("{delta} is not finite")));
    }
    Ok(if delta >= 0.0 {
        pi1_w / (pi1_w + (1.0 - pi1_w) * (-delta).exp())
    } else {
        let up = delta.exp() * pi1_w;
        up / (up + 1.0 - pi1_w)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn s(v: &[f64]) -> Simplex {
        Simplex::new(v.to_vec()).unwrap()
    }

    fn three_action() -> (Simplex, TiltConfig) {
        let cfg = TiltConfig::new(
            s(&[0.4, 0.4, 0.2]),
            CostSpec::Destination(vec![2.0, 1.0, 1.0]),
            vec![1.0],
        )
        .unwrap();
        (s(&[0.2, 0.3, 0.5]), cfg)
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn simplex_validation() {
        assert!(Simplex::new(vec![0.5, 0.6]).is_err());
        assert!(Simplex::new(vec![1.5, -0.5]).is_err());
        assert!(Simplex::new(vec![f64::NAN, 1.0]).is_err());
        assert!(Simplex::new(vec![0.1, 0.2, 0.7]).is_ok());
        let p = Simplex::new(vec![1.0 + 1e-13, -1e-13]).unwrap();
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn action_space_rejects_duplicates() {
        assert!(ActionSpace::new(vec!["a".into(), "a".into()]).is_err());
        assert!(ActionSpace::new(vec!["a".into()]).is_err());
        let a = ActionSpace::new(vec!["x".into(), "y".into()]).unwrap();
        assert_eq!(a.index_of("y"), Some(1));
    }

    #[test]
    fn config_rejects_bad_grid() {
        let nu = s(&[0.5, 0.5]);
        assert!(TiltConfig::new(nu.clone(), CostSpec::hamming(2), vec![0.0, 0.0]).is_err());
        assert!(TiltConfig::new(nu.clone(), CostSpec::hamming(2), vec![f64::INFINITY]).is_err());
        assert!(TiltConfig::new(nu.clone(), CostSpec::hamming(3), vec![0.0]).is_err());
        assert!(TiltConfig::new(nu, CostSpec::Destination(vec![1.0, -1.0]), vec![0.0]).is_err());
    }

    #[test]
    fn coupling_at_zero_is_outer_product() {
        let (pi, cfg) = three_action();
        let g = cpip_coupling(&pi, &cfg.nu, &cfg.cost, 0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(g.get(i, j), pi[i] * cfg.nu[j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn coupling_binary_degenerate_target() {
        let g = cpip_coupling(&s(&[0.5, 0.5]), &s(&[0.0, 1.0]), &CostSpec::hamming(2), 2f64.ln()).unwrap();
        assert_eq!(g.get(0, 0), 0.0);
        assert_eq!(g.get(1, 0), 0.0);
        assert_abs_diff_eq!(g.get(0, 1), 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.get(1, 1), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn three_action_frozen_values() {
        // Frozen from a brute-force minimization of the KL + delta * cost
        // objective (scipy BFGS on softmax parameters), agreement 1e-8.
        let (pi, cfg) = three_action();
        let src = tilted_source(&pi, &cfg, 1.0).unwrap();
        let tgt = tilted_target(&pi, &cfg, 1.0).unwrap();
        assert!(max_diff(src.probs(), &[0.2569760982358198, 0.32770133724707934, 0.4153225645171009]) < 1e-12);
        assert!(max_diff(tgt.probs(), &[0.2552409714714805, 0.46161366411376026, 0.28314536441475935]) < 1e-12);
        let g = cpip_coupling(&pi, &cfg.nu, &cfg.cost, 1.0).unwrap();
        assert!(max_diff(&g.row_sums(), src.probs()) < 1e-12);
        assert!(max_diff(&g.col_sums(), tgt.probs()) < 1e-12);
        let push = pushforward(&pi, &cfg, 1.0).unwrap();
        assert!(max_diff(push.probs(), &[0.2271067241162144, 0.45816059191809017, 0.3147326839656954]) < 1e-12);
    }

    #[test]
    fn weights_frozen_values() {
        let (_, cfg) = three_action();
        let w = tilt_weights(&cfg, 1.0).unwrap();
        assert_abs_diff_eq!(w.zeta, 0.2748617779975105, epsilon = 1e-14);
        assert!(max_diff(&w.xi, &[0.34586588670535495, 0.25284822353142306, 0.12642411176571153]) < 1e-14);
        assert_abs_diff_eq!(w.rho[0], 0.5571942517994855, epsilon = 1e-14);

        let w0 = tilt_weights(&cfg, 0.0).unwrap();
        assert_eq!(w0.zeta, 1.0);
        assert!(w0.xi.iter().chain(&w0.rho).all(|x| *x == 0.0));

        let free = TiltConfig::new(cfg.nu.clone(), CostSpec::Destination(vec![0.0; 3]), vec![0.0]).unwrap();
        for d in [-3.0, 0.5, 40.0] {
            let w = tilt_weights(&free, d).unwrap();
            assert_eq!(w.zeta, 1.0);
            assert!(w.xi.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn weights_reject_matrix_costs() {
        let (_, cfg) = three_action();
        let m = TiltConfig { cost: cfg.cost.to_matrix(), ..cfg };
        assert_eq!(tilt_weights(&m, 1.0), Err(TiltError::GeneralCostWeights));
    }

    #[test]
    fn binary_ipi_case() {
        let cfg = TiltConfig::new(s(&[0.0, 1.0]), CostSpec::hamming(2), vec![0.0]).unwrap();
        let src = tilted_source(&s(&[0.5, 0.5]), &cfg, 2f64.ln()).unwrap();
        assert_abs_diff_eq!(src[1], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ipi_propensity(0.5, 2f64.ln()).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        // degenerate target stays put
        for d in [0.0, 0.3, 2.0, 50.0] {
            let t = tilted_target(&s(&[0.3, 0.7]), &cfg, d).unwrap();
            assert_eq!(t.probs(), &[0.0, 1.0]);
            let p = pushforward(&s(&[0.3, 0.7]), &cfg, d).unwrap();
            assert_eq!(p.probs(), &[0.0, 1.0]);
        }
    }

    #[test]
    fn ipi_domain_and_limits() {
        assert_eq!(ipi_propensity(0.0, 1.0), Err(TiltError::Domain(0.0)));
        assert_eq!(ipi_propensity(1.0, 1.0), Err(TiltError::Domain(1.0)));
        assert_abs_diff_eq!(ipi_propensity(0.37, 0.0).unwrap(), 0.37, epsilon = 1e-16);
        for p in [0.01, 0.5, 0.99] {
            assert!((ipi_propensity(p, 40.0).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_zero_is_identity() {
        let (pi, cfg) = three_action();
        assert!(max_diff(tilted_source(&pi, &cfg, 0.0).unwrap().probs(), pi.probs()) < 1e-15);
        assert!(max_diff(tilted_target(&pi, &cfg, 0.0).unwrap().probs(), cfg.nu.probs()) < 1e-15);
        assert!(max_diff(pushforward(&pi, &cfg, 0.0).unwrap().probs(), cfg.nu.probs()) < 1e-15);
    }

    #[test]
    fn zero_probabilities_are_preserved() {
        let cfg = TiltConfig::new(s(&[0.0, 0.6, 0.4]), CostSpec::Destination(vec![1.0, 0.5, 2.0]), vec![0.0]).unwrap();
        let pi = s(&[0.7, 0.0, 0.3]);
        for d in [-4.0, 1.0, 9.0] {
            assert_eq!(tilted_source(&pi, &cfg, d).unwrap()[1], 0.0);
            assert_eq!(tilted_target(&pi, &cfg, d).unwrap()[0], 0.0);
        }
    }

    #[test]
    fn limits_all_positive_costs_give_poe() {
        let (pi, cfg) = three_action();
        let (a, b) = tilted_limits(&pi, &cfg).unwrap();
        let poe = Simplex::from_weights(vec![0.08, 0.12, 0.1]).unwrap();
        assert!(max_diff(a.probs(), poe.probs()) < 1e-15);
        assert!(max_diff(b.probs(), poe.probs()) < 1e-15);
    }

    #[test]
    fn limits_with_free_action() {
        let (pi, cfg) = three_action();
        let cfg = TiltConfig { cost: CostSpec::Destination(vec![0.0, 1.0, 1.0]), ..cfg };
        let (a, b) = tilted_limits(&pi, &cfg).unwrap();
        assert!(max_diff(a.probs(), &[0.12903225806451613, 0.3870967741935483, 0.4838709677419355]) < 1e-14);
        assert!(max_diff(b.probs(), &[0.6451612903225807, 0.1935483870967742, 0.16129032258064518]) < 1e-14);
        let big = tilted_source(&pi, &cfg, 1e4).unwrap();
        assert!(max_diff(big.probs(), a.probs()) < 1e-6);
        let big = tilted_target(&pi, &cfg, 1e4).unwrap();
        assert!(max_diff(big.probs(), b.probs()) < 1e-6);
    }

    #[test]
    fn ipi_limit_is_point_mass() {
        let cfg = TiltConfig::new(s(&[0.0, 1.0]), CostSpec::hamming(2), vec![0.0]).unwrap();
        let (a, _) = tilted_limits(&s(&[0.8, 0.2]), &cfg).unwrap();
        assert_eq!(a.probs(), &[0.0, 1.0]);
    }

    #[test]
    fn extreme_delta_stays_finite() {
        let (pi, cfg) = three_action();
        for d in [-300.0, -600.0, 350.0, 700.0] {
            let (a, b) = PolicyTilt::new(&cfg.nu, &cfg.cost, d).unwrap().marginals(&pi).unwrap();
            let (ga, gb) = PolicyTilt::general(&cfg.nu, &cfg.cost, d).unwrap().marginals(&pi).unwrap();
            assert!(a.probs().iter().chain(b.probs()).all(|x| x.is_finite()));
            assert!(max_diff(a.probs(), ga.probs()) < 1e-12, "delta {d}");
            assert!(max_diff(b.probs(), gb.probs()) < 1e-12, "delta {d}");
        }
    }

    #[test]
    fn disjoint_support_underflow_is_reported() {
        let cfg = TiltConfig::new(s(&[0.0, 1.0]), CostSpec::hamming(2), vec![0.0]).unwrap();
        let r = tilted_source(&s(&[1.0, 0.0]), &cfg, 800.0);
        assert!(matches!(r, Err(TiltError::DegenerateKernel(_))));
    }

    #[test]
    fn cost_serde_shape() {
        let c: CostSpec = serde_json::from_str(r#"{"destination":[1,2]}"#).unwrap();
        assert_eq!(c, CostSpec::Destination(vec![1.0, 2.0]));
        assert_eq!(CostSpec::Destination(vec![1.0, 2.0]).to_matrix(), CostSpec::Matrix(vec![vec![0.0, 2.0], vec![1.0, 0.0]]));
    }
}
