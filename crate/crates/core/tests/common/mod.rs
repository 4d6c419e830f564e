//! Independent reference computations shared by the integration suites.
#![allow(dead_code)]

use cpip::estimation::eif_row;
use cpip::nuisance::Observation;
use cpip::{tilted_source, tilted_target, CostSpec, Simplex, TiltConfig};

/// Minimizes `KL(g | pi x nu) + delta <c, g>` over joint laws `g` by
/// equality-constrained Newton iterations on the support of `pi x nu`,
/// without using the closed-form kernel. Returns the row-major `K x K` joint.
pub fn brute_force_coupling(pi: &[f64], nu: &[f64], cost: &CostSpec, delta: f64) -> Vec<f64> {
    let k = pi.len();
    let support: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .filter(|&(i, j)| pi[i] > 0.0 && nu[j] > 0.0)
        .collect();
    let base: Vec<f64> = support.iter().map(|&(i, j)| pi[i] * nu[j]).collect();
    let lin: Vec<f64> = support.iter().map(|&(i, j)| delta * cost.pair(i, j)).collect();
    let objective = |g: &[f64]| -> f64 {
        g.iter()
            .zip(&base)
            .zip(&lin)
            .map(|((g, b), l)| g * (g / b).ln() + l * g)
            .sum()
    };
    let mut g = base.clone();
    for _ in 0..500 {
        let grad: Vec<f64> = g.iter().zip(&base).zip(&lin).map(|((g, b), l)| (g / b).ln() + 1.0 + l).collect();
        // Newton step under the Hessian diag(1/g) and the constraint sum(step) = 0.
        let lambda = g.iter().zip(&grad).map(|(g, d)| g * d).sum::<f64>() / g.iter().sum::<f64>();
        let step: Vec<f64> = g.iter().zip(&grad).map(|(g, d)| -g * (d - lambda)).collect();
        let decrement: f64 = step.iter().zip(&g).map(|(s, g)| s * s / g).sum();
        if decrement < 1e-26 {
            break;
        }
        let f0 = objective(&g);
        let slope: f64 = step.iter().zip(&grad).map(|(s, d)| s * d).sum();
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = g.iter().zip(&step).map(|(g, s)| g + t * s).collect();
            if cand.iter().all(|x| *x > 0.0) && objective(&cand) <= f0 + 0.25 * t * slope {
                g = cand;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return dense(k, &support, &g);
            }
        }
    }
    dense(k, &support, &g)
}

fn dense(k: usize, support: &[(usize, usize)], g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    let total: f64 = g.iter().sum();
    for (&(i, j), v) in support.iter().zip(g) {
        out[i * k + j] = v / total;
    }
    out
}

/// A law of `(W, A, Y)` with finitely many atoms.
#[derive(Debug, Clone)]
pub struct FiniteLaw {
    pub atoms: Vec<(Observation, f64)>,
    pub profiles: Vec<Vec<f64>>,
    pub k: usize,
}

impl FiniteLaw {
    fn profile_of(&self, w: &[f64]) -> usize {
        self.profiles.iter().position(|p| p == w).expect("known profile")
    }

    /// Marginal `p(w)`, propensity `pi(a | w)` and regression `Q(w, a)`.
    pub fn nuisances(&self) -> (Vec<f64>, Vec<Simplex>, Vec<Vec<f64>>) {
        let m = self.profiles.len();
        let mut pw = vec![0.0; m];
        let mut pwa = vec![vec![0.0; self.k]; m];
        let mut ywa = vec![vec![0.0; self.k]; m];
        for (o, p) in &self.atoms {
            let w = self.profile_of(&o.w);
            pw[w] += p;
            pwa[w][o.a] += p;
            ywa[w][o.a] += p * o.y;
        }
        let pi = (0..m)
            .map(|w| Simplex::new(pwa[w].iter().map(|x| x / pw[w]).collect()).unwrap())
            .collect();
        let q = (0..m)
            .map(|w| (0..self.k).map(|a| ywa[w][a] / pwa[w][a]).collect())
            .collect();
        (pw, pi, q)
    }

    /// `(mu_S, mu_T)` at `delta`.
    pub fn functionals(&self, config: &TiltConfig, delta: f64) -> (f64, f64) {
        let (pw, pi, q) = self.nuisances();
        let (mut s, mut t) = (0.0, 0.0);
        for w in 0..pw.len() {
            let src = tilted_source(&pi[w], config, delta).unwrap();
            let tgt = tilted_target(&pi[w], config, delta).unwrap();
            s += pw[w] * (0..self.k).map(|a| src[a] * q[w][a]).sum::<f64>();
            t += pw[w] * (0..self.k).map(|a| tgt[a] * q[w][a]).sum::<f64>();
        }
        (s, t)
    }

    /// Uncentered EIFs `(D^S(o), D^T(o))` at the law's own nuisances.
    pub fn eif(&self, o: &Observation, config: &TiltConfig, delta: f64) -> (f64, f64) {
        let (_, pi, q) = self.nuisances();
        let w = self.profile_of(&o.w);
        let r = eif_row(o, &pi[w], &q[w], config, delta).unwrap();
        (r.d_source, r.d_target)
    }

    /// `(1 - eps) P + eps * point mass at o`; negative `eps` gives the
    /// signed mixture used by central differences.
    pub fn contaminate(&self, o: &Observation, eps: f64) -> FiniteLaw {
        let mut atoms: Vec<(Observation, f64)> = self.atoms.iter().map(|(a, p)| (a.clone(), (1.0 - eps) * p)).collect();
        atoms.push((o.clone(), eps));
        FiniteLaw {
            atoms,
            profiles: self.profiles.clone(),
            k: self.k,
        }
    }
}

/// Two covariate profiles, three actions, two outcome values per cell; every
/// cell has positive mass.
pub fn toy_law() -> FiniteLaw {
    let profiles = vec![vec![-0.5, 1.0], vec![1.5, -0.25]];
    let pw = [0.45, 0.55];
    let pi = [[0.2, 0.5, 0.3], [0.6, 0.15, 0.25]];
    let ys = [[(1.0, 4.0), (-2.0, 3.0), (5.0, 9.0)], [(0.5, 2.5), (7.0, 8.0), (-3.0, 1.0)]];
    let mut atoms = Vec::new();
    for w in 0..2 {
        for a in 0..3 {
            let (y0, y1) = ys[w][a];
            for (y, share) in [(y0, 0.35), (y1, 0.65)] {
                atoms.push((
                    Observation {
                        w: profiles[w].clone(),
                        a,
                        y,
                    },
                    pw[w] * pi[w][a] * share,
                ));
            }
        }
    }
    FiniteLaw { atoms, profiles, k: 3 }
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
