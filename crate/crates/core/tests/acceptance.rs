//! Acceptance criteria 1-9. Runs without the libtest harness so that every
//! criterion prints its `PASS`/`FAIL` line with the measured quantities.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_force_coupling, max_diff, toy_law};
use cpip::estimation::{eif_row, estimate_points, one_step_curve, one_step_curve_from};
use cpip::inference::{build_bands, multiplier_critical_value, multiplier_draws, upper_quantile, EifProcess};
use cpip::nuisance::{assign_folds, NuisanceSpec, Observation};
use cpip::simulation::{
    derive_seed, generate, oracle_nuisance, run_benchmark, table_setups, truth_oracle, BenchmarkSpec, Estimator, Policy,
    Regime,
};
use cpip::{
    cpip_coupling, ipi_propensity, tilted_limits, tilted_source, tilted_target, CostSpec, Exec, Simplex, TiltConfig,
};

fn report(id: u32, ok: bool, detail: String) {
    println!("criterion {id}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
}

fn random_simplex<R: Rng>(rng: &mut R, k: usize, allow_zero: bool) -> Simplex {
    loop {
        let mut v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.01).collect();
        if allow_zero && rng.random::<f64>() < 0.25 {
            v[rng.random_range(0..k)] = 0.0;
        }
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            return Simplex::new(v.iter().map(|x| x / s).collect()).unwrap();
        }
    }
}

fn criterion_1_closed_form_matches_brute_force() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_joint, mut worst_marg) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let k = [2, 3, 4][i % 3];
        let pi = random_simplex(&mut rng, k, true);
        let nu = random_simplex(&mut rng, k, true);
        let delta = rng.random_range(-2.0..5.0);
        let cost = if i % 2 == 0 {
            CostSpec::Destination((0..k).map(|_| rng.random_range(0.0..3.0)).collect())
        } else {
            CostSpec::Matrix((0..k).map(|_| (0..k).map(|_| rng.random_range(0.0..3.0)).collect()).collect())
        };
        let closed = cpip_coupling(&pi, &nu, &cost, delta).unwrap();
        let brute = brute_force_coupling(pi.probs(), nu.probs(), &cost, delta);
        let joint: Vec<f64> = (0..k).flat_map(|a| (0..k).map(move |b| (a, b))).map(|(a, b)| closed.get(a, b)).collect();
        worst_joint = worst_joint.max(max_diff(&joint, &brute));
        if let CostSpec::Destination(_) = cost {
            let cfg = TiltConfig::new(nu.clone(), cost.clone(), vec![delta]).unwrap();
            let src = tilted_source(&pi, &cfg, delta).unwrap();
            let tgt = tilted_target(&pi, &cfg, delta).unwrap();
            worst_marg = worst_marg
                .max(max_diff(src.probs(), &closed.row_sums()))
                .max(max_diff(tgt.probs(), &closed.col_sums()));
        }
    }
    let elapsed = start.elapsed();
    let ok = worst_joint <= 1e-6 && worst_marg <= 1e-12 && elapsed < Duration::from_secs(60);
    report(
        1,
        ok,
        format!("max joint gap {worst_joint:.2e} (tol 1e-6), max marginal gap {worst_marg:.2e} (tol 1e-12), {elapsed:.2?}"),
    );
    ok
}

fn criterion_2_binary_reduction() -> bool {
    let start = Instant::now();
    let cfg = TiltConfig::new(Simplex::new(vec![0.0, 1.0]).unwrap(), CostSpec::Destination(vec![1.0, 1.0]), vec![0.0]).unwrap();
    let mut worst = 0.0f64;
    for i in 0..50 {
        let p = 0.01 + 0.98 * i as f64 / 49.0;
        let pi = Simplex::new(vec![1.0 - p, p]).unwrap();
        for j in 0..50 {
            let delta = -5.0 + 10.0 * j as f64 / 49.0;
            let s = tilted_source(&pi, &cfg, delta).unwrap();
            worst = worst.max((s[1] - ipi_propensity(p, delta).unwrap()).abs());
        }
    }
    let elapsed = start.elapsed();
    let ok = worst <= 1e-12 && elapsed < Duration::from_secs(1);
    report(2, ok, format!("max gap {worst:.2e} over 2500 points (tol 1e-12), {elapsed:.2?}"));
    ok
}

fn criterion_3_limit_laws() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut poe_gap, mut free_gap) = (0.0f64, 0.0f64);
    for i in 0..200 {
        let k = 2 + i % 4;
        let pi = random_simplex(&mut rng, k, false);
        let nu = random_simplex(&mut rng, k, false);
        let positive = CostSpec::Destination((0..k).map(|_| rng.random_range(1.0..3.0)).collect());
        let cfg = TiltConfig::new(nu.clone(), positive, vec![0.0]).unwrap();
        let poe = Simplex::from_weights(pi.probs().iter().zip(nu.probs()).map(|(p, n)| p * n).collect()).unwrap();
        poe_gap = poe_gap
            .max(max_diff(tilted_source(&pi, &cfg, 20.0).unwrap().probs(), poe.probs()))
            .max(max_diff(tilted_target(&pi, &cfg, 20.0).unwrap().probs(), poe.probs()));

        let mut c: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..3.0)).collect();
        c[rng.random_range(0..k)] = 0.0;
        let cfg = TiltConfig::new(nu, CostSpec::Destination(c), vec![0.0]).unwrap();
        let (src_lim, tgt_lim) = tilted_limits(&pi, &cfg).unwrap();
        free_gap = free_gap
            .max(max_diff(tilted_source(&pi, &cfg, 1e4).unwrap().probs(), src_lim.probs()))
            .max(max_diff(tilted_target(&pi, &cfg, 1e4).unwrap().probs(), tgt_lim.probs()));
    }
    let ok = poe_gap <= 1e-6 && free_gap <= 1e-6;
    report(
        3,
        ok,
        format!("delta=20 gap to product of experts {poe_gap:.2e}, delta=1e4 gap to zero-cost limits {free_gap:.2e} (tol 1e-6)"),
    );
    ok
}

fn criterion_4_eif_correctness() -> bool {
    let start = Instant::now();
    let law = toy_law();
    let cfg = TiltConfig::new(
        Simplex::new(vec![0.4, 0.4, 0.2]).unwrap(),
        CostSpec::Destination(vec![2.0, 1.0, 1.0]),
        vec![0.0],
    )
    .unwrap();
    let deltas = [-1.5, -0.3, 0.0, 0.7, 2.0];

    // (a) exact means
    let mut mean_gap = 0.0f64;
    for &delta in &deltas {
        let (mu_s, mu_t) = law.functionals(&cfg, delta);
        let (mut es, mut et) = (0.0, 0.0);
        for (o, p) in &law.atoms {
            let (ds, dt) = law.eif(o, &cfg, delta);
            es += p * ds;
            et += p * dt;
        }
        mean_gap = mean_gap.max((es - mu_s).abs()).max((et - mu_t).abs());
    }

    // (b) Gateaux derivative by finite differences. The central stencil is
    // asserted; the one-sided gap carries the O(eps) curvature term and is
    // only reported.
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut gateaux_gap, mut forward_gap) = (0.0f64, 0.0f64);
    let points = 25;
    for i in 0..points {
        let delta = deltas[i % deltas.len()];
        let o = Observation {
            w: law.profiles[rng.random_range(0..2)].clone(),
            a: rng.random_range(0..3),
            y: rng.random_range(-10.0..10.0),
        };
        let (mu_s, mu_t) = law.functionals(&cfg, delta);
        let (ps, pt) = law.contaminate(&o, eps).functionals(&cfg, delta);
        let (ms, mt) = law.contaminate(&o, -eps).functionals(&cfg, delta);
        let (ds, dt) = law.eif(&o, &cfg, delta);
        gateaux_gap = gateaux_gap
            .max(((ps - ms) / (2.0 * eps) - (ds - mu_s)).abs())
            .max(((pt - mt) / (2.0 * eps) - (dt - mu_t)).abs());
        forward_gap = forward_gap
            .max(((ps - mu_s) / eps - (ds - mu_s)).abs())
            .max(((pt - mu_t) / eps - (dt - mu_t)).abs());
    }

    // (c) point-mass target at delta = 0 reduces to the AIPW score
    let mut aipw_gap = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    for target in 0..3 {
        let nu = Simplex::point_mass(3, target);
        let cfg = TiltConfig::new(nu, CostSpec::Destination(vec![1.0, 0.5, 2.0]), vec![0.0]).unwrap();
        for _ in 0..200 {
            let pi = random_simplex(&mut rng, 3, false);
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-20.0..20.0)).collect();
            let o = Observation {
                w: vec![0.0],
                a: rng.random_range(0..3),
                y: rng.random_range(-20.0..20.0),
            };
            let d = eif_row(&o, &pi, &q, &cfg, 0.0).unwrap().d_target;
            let ind = if o.a == target { 1.0 } else { 0.0 };
            let aipw = ind / pi[target] * (o.y - q[target]) + q[target];
            aipw_gap = aipw_gap.max((d - aipw).abs());
        }
    }
    let elapsed = start.elapsed();
    let ok = mean_gap <= 1e-10 && gateaux_gap < 1e-3 && aipw_gap <= 1e-12 && elapsed < Duration::from_secs(10);
    report(
        4,
        ok,
        format!(
            "(a) mean gap {mean_gap:.2e} (tol 1e-10), (b) Gateaux gap {gateaux_gap:.2e} central / {forward_gap:.2e} one-sided over {points} points (tol 1e-3), \
             (c) AIPW gap {aipw_gap:.2e} (tol 1e-12), {elapsed:.2?}"
        ),
    );
    ok
}

fn criterion_5_double_robustness_ordering() -> bool {
    let start = Instant::now();
    let (n, reps) = (2000, 50);
    let setup = table_setups(&TiltConfig::linspace(-2.0, 2.0, 21)).remove(0);
    let truth = truth_oracle(&setup.config, 1_000_000, 55, Exec::Parallel).unwrap();
    let curves = Exec::Parallel.map(reps, |r| {
        let data = generate(n, derive_seed(5, r as u64)).dataset;
        let nuis = oracle_nuisance(&data, 1.5);
        estimate_points(&data, &nuis, &setup.config, Exec::Sequential).unwrap()
    });
    let g = truth.len();
    let bias = |f: &dyn Fn(&cpip::estimation::EstimatePoint, &cpip::simulation::TruthPoint) -> f64| -> Vec<f64> {
        (0..g)
            .map(|j| curves.iter().map(|c| f(&c[j], &truth[j])).sum::<f64>() / reps as f64)
            .collect()
    };
    let os_s = bias(&|p, t| p.mu_s_onestep - t.mu_s);
    let pi_s = bias(&|p, t| p.mu_s_plugin - t.mu_s);
    let os_t = bias(&|p, t| p.mu_t_onestep - t.mu_t);
    let pi_t = bias(&|p, t| p.mu_t_plugin - t.mu_t);
    let wins = (0..g).filter(|&j| os_s[j].abs() < pi_s[j].abs() && os_t[j].abs() < pi_t[j].abs()).count();
    let elapsed = start.elapsed();
    let ok = wins == g && elapsed < Duration::from_secs(120);
    let worst = |v: &[f64]| v.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let least = |v: &[f64]| v.iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min);
    report(
        5,
        ok,
        format!(
            "one-step beats plug-in at {wins}/{g} grid points for both policies; max |bias| one-step S {:.3} T {:.3}, \
             min |bias| plug-in S {:.3} T {:.3}, {elapsed:.2?}",
            worst(&os_s),
            worst(&os_t),
            least(&pi_s),
            least(&pi_t)
        ),
    );
    ok
}

fn criterion_6_benchmark_table() -> bool {
    let start = Instant::now();
    let spec = BenchmarkSpec::new(table_setups(&TiltConfig::linspace(-2.0, 2.0, 100)), 1000, 50, 2024);
    let report_ = run_benchmark(&spec, Exec::Parallel).unwrap();
    let elapsed = start.elapsed();
    let mut lines = Vec::new();
    let mut ordered = 0;
    for setup in ["1", "2", "3"] {
        for regime in Regime::ALL {
            for policy in [Policy::Source, Policy::Target] {
                let p = report_.cell(setup, regime, Estimator::PlugIn, policy).unwrap().ibias;
                let o = report_.cell(setup, regime, Estimator::OneStep, policy).unwrap().ibias;
                if o < p {
                    ordered += 1;
                }
                lines.push(format!(
                    "  setup {setup} {:>2} {:?}: plug-in {p:.3} one-step {o:.3}{}",
                    regime.label(),
                    policy,
                    if o < p { "" } else { "  <-- not ordered" }
                ));
            }
        }
    }
    let correct_s: Vec<f64> = ["1", "2", "3"]
        .iter()
        .map(|s| report_.cell(s, Regime::Correct, Estimator::OneStep, Policy::Source).unwrap().ibias)
        .collect();
    let pimis_s: Vec<f64> = ["1", "2", "3"]
        .iter()
        .map(|s| report_.cell(s, Regime::PropensityMisspecified, Estimator::PlugIn, Policy::Source).unwrap().ibias)
        .collect();
    let small = correct_s.iter().all(|b| *b <= 0.5);
    let large = pimis_s.iter().all(|b| *b >= 5.0);
    let ok = ordered == 18 && small && large && elapsed < Duration::from_secs(600);
    for l in &lines {
        println!("{l}");
    }
    report(
        6,
        ok,
        format!(
            "ordered cells {ordered}/18; correct one-step iBias S {correct_s:.3?} (<= 0.5); \
             plug-in pi-misspec iBias S {pimis_s:.2?} (>= 5); {elapsed:.2?}"
        ),
    );
    ok
}

fn criterion_7_band_coverage() -> bool {
    let start = Instant::now();
    let (n, reps, draws) = (1000, 200, 1000);
    let setup = table_setups(&TiltConfig::linspace(-2.0, 2.0, 100)).remove(0);
    let truth: Vec<f64> = truth_oracle(&setup.config, 1_000_000, 77, Exec::Parallel)
        .unwrap()
        .iter()
        .map(|t| t.mu_s)
        .collect();
    let spec = NuisanceSpec::default();
    let outcomes = Exec::Parallel.map(reps, |r| {
        let data = generate(n, derive_seed(7, 2 * r as u64)).dataset;
        let folds = assign_folds(n, 5, derive_seed(7, 2 * r as u64 + 1)).unwrap();
        let (curve, _) = one_step_curve(&data, folds, &setup.config, &spec, Exec::Sequential).unwrap();
        let mu: Vec<f64> = curve.points.iter().map(|p| p.mu_s_onestep).collect();
        let sd: Vec<f64> = curve.points.iter().map(|p| p.sigma_s).collect();
        let xi = multiplier_critical_value(&curve.eif_source, &mu, &sd, draws, 0.05, derive_seed(8, r as u64), Exec::Sequential)
            .unwrap();
        let (band, _) = build_bands(&curve.points, xi, xi, n, 0.05, draws);
        let pointwise: Vec<bool> = (0..truth.len()).map(|g| band.covers_pointwise(g, truth[g])).collect();
        (band.covers_uniformly(&truth), pointwise, xi)
    });
    let uniform = outcomes.iter().filter(|o| o.0).count() as f64 / reps as f64;
    let per_delta: Vec<f64> = (0..truth.len())
        .map(|g| outcomes.iter().filter(|o| o.1[g]).count() as f64 / reps as f64)
        .collect();
    let (lo, hi) = per_delta.iter().fold((1.0f64, 0.0f64), |(l, h), c| (l.min(*c), h.max(*c)));
    let mean_xi = outcomes.iter().map(|o| o.2).sum::<f64>() / reps as f64;
    let elapsed = start.elapsed();
    let ok = (0.90..=0.99).contains(&uniform) && lo >= 0.91 && hi <= 0.98 && elapsed < Duration::from_secs(1200);
    report(
        7,
        ok,
        format!(
            "uniform coverage {:.1}% (90-99%), pointwise coverage range {:.1}%-{:.1}% (91-98%), mean xi {mean_xi:.3}, {elapsed:.2?}",
            100.0 * uniform,
            100.0 * lo,
            100.0 * hi
        ),
    );
    ok
}

fn criterion_8_bootstrap_critical_value() -> bool {
    let setup = table_setups(&TiltConfig::linspace(-2.0, 2.0, 100)).remove(0);
    let data = generate(1000, 88).dataset;
    let nuis = oracle_nuisance(&data, 1.0);
    let curve = one_step_curve_from(&data, &nuis, &setup.config, Exec::Parallel).unwrap();
    let mu: Vec<f64> = curve.points.iter().map(|p| p.mu_s_onestep).collect();
    let sd: Vec<f64> = curve.points.iter().map(|p| p.sigma_s).collect();
    let mid = 50;
    let single = EifProcess {
        columns: &curve.eif_source[mid..=mid],
        mu: &mu[mid..=mid],
        sigma: &sd[mid..=mid],
    };
    let full = EifProcess {
        columns: &curve.eif_source,
        mu: &mu,
        sigma: &sd,
    };
    let xi_single = multiplier_critical_value(single.columns, single.mu, single.sigma, 20_000, 0.05, 8, Exec::Parallel).unwrap();
    let stats = multiplier_draws(&[single, full], 1000, 9, Exec::Parallel).unwrap();
    let dominated = stats.iter().all(|s| s[1] >= s[0]);
    let mut v0: Vec<f64> = stats.iter().map(|s| s[0]).collect();
    let mut v1: Vec<f64> = stats.iter().map(|s| s[1]).collect();
    let (q0, q1) = (upper_quantile(&mut v0, 0.05), upper_quantile(&mut v1, 0.05));
    let ok = (1.91..=2.01).contains(&xi_single) && dominated && q1 >= q0;
    report(
        8,
        ok,
        format!("singleton xi {xi_single:.4} at B=20000 ([1.91, 2.01]); per-draw dominance {dominated}; grid xi {q1:.4} >= singleton xi {q0:.4}"),
    );
    ok
}

fn run_cli(args: &[&str], dir: &Path) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cpip")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "cpip {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn criterion_9_cli_determinism() -> bool {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("policy.json"),
        r#"{"nu": [0.4, 0.4, 0.2], "cost": [2, 1, 1], "delta": {"min": -2, "max": 2, "points": 15},
            "options": {"k_folds": 5, "bootstrap": 200, "seed": 11}}"#,
    )
    .unwrap();
    let runs: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        ("tilt", vec!["tilt", "--config", "policy.json", "--pi", "0.2,0.3,0.5", "--out", "OUT/tilt.csv"], vec!["tilt.csv"]),
        ("tilt-data", vec!["tilt", "--config", "policy.json", "--data", "data.csv", "--out", "OUT/tilt_data.csv"], vec!["tilt_data.csv"]),
        ("couple", vec!["couple", "--config", "policy.json", "--pi", "0.2,0.3,0.5", "--delta", "0.8", "--out", "OUT/couple.csv"], vec!["couple.csv"]),
        ("estimate", vec!["estimate", "--config", "policy.json", "--data", "data.csv", "--out", "OUT/est"], vec!["est/curve.csv", "est/estimate.json"]),
        (
            "simulate",
            vec!["simulate", "--setup", "2", "--n", "300", "--reps", "3", "--truth-draws", "100000", "--delta-points", "9", "--seed", "5", "--out", "OUT/sim"],
            vec!["sim/report.csv", "sim/report.json"],
        ),
    ];
    run_cli(&["simulate", "--emit-data", "data.csv", "--n", "400", "--seed", "3"], d);
    let first = std::fs::read(d.join("data.csv")).unwrap();
    run_cli(&["simulate", "--emit-data", "data.csv", "--n", "400", "--seed", "3"], d);
    let mut identical = vec![("emit-data", first == std::fs::read(d.join("data.csv")).unwrap())];
    for (name, args, files) in &runs {
        let mut outputs = Vec::new();
        for (i, threads) in ["1", "4"].iter().enumerate() {
            let out_dir = format!("run{i}");
            std::fs::create_dir_all(d.join(&out_dir)).unwrap();
            let mut a: Vec<String> = args.iter().map(|s| s.replace("OUT", &out_dir)).collect();
            a.extend(["--threads".to_string(), threads.to_string()]);
            let a: Vec<&str> = a.iter().map(String::as_str).collect();
            run_cli(&a, d);
            outputs.push(files.iter().map(|f| std::fs::read(d.join(&out_dir).join(f)).unwrap()).collect::<Vec<_>>());
        }
        identical.push((name, outputs[0] == outputs[1]));
    }
    let ok = identical.iter().all(|(_, same)| *same);
    report(
        9,
        ok,
        format!(
            "byte-identical repeated runs (threads 1 vs 4): {}",
            identical.iter().map(|(n, s)| format!("{n}={s}")).collect::<Vec<_>>().join(", ")
        ),
    );
    ok
}

fn main() {
    let criteria: [(u32, fn() -> bool); 9] = [
        (1, criterion_1_closed_form_matches_brute_force),
        (2, criterion_2_binary_reduction),
        (3, criterion_3_limit_laws),
        (4, criterion_4_eif_correctness),
        (5, criterion_5_double_robustness_ordering),
        (6, criterion_6_benchmark_table),
        (7, criterion_7_band_coverage),
        (8, criterion_8_bootstrap_critical_value),
        (9, criterion_9_cli_determinism),
    ];
    let mut failed = Vec::new();
    for (id, run) in criteria {
        match std::panic::catch_unwind(run) {
            Ok(true) => {}
            Ok(false) => failed.push(id),
            Err(_) => {
                report(id, false, "panicked".into());
                failed.push(id);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
