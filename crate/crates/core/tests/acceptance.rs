//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Positional arguments select criteria by number or
//! by a substring of their name.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ismp::adjoint::{adjoint_flow_lsmc, bsde_residual_check, discretization_floor, RegressionBasis};
use ismp::benchmarks::{lookup, BenchmarkId, BenchmarkParams};
use ismp::config::ExperimentConfig;
use ismp::flow::{
    flow_convergence_study, flow_finite_difference_richardson, flow_localtime_rep,
    flow_smooth_exp, relative_discrepancy, FlowEngine,
};
use ismp::localtime::{occupation_levels, occupation_total, tanaka_local_time};
use ismp::runner::{self, calibrate};
use ismp::sde::{
    girsanov_weights, ControlSpec, DriftSpec, McSetup, PathEnsemble, SigmaVector, TimeGrid,
};
use ismp::smp::{
    adjoint_convergence_study, cost_convergence_study, gateaux_check,
    mollified_convergence_study, optimize_control, verify_necessary, verify_sufficient,
    ConcavityProbe, OptimizerConfig, OptimizerStatus, PathReference, SufficientOutcome,
    TOLERANCE_FLOOR,
};
use ismp::stats::mean_and_se;
use ismp::Result;

struct Outcome {
    passed: bool,
    detail: String,
}

fn setup(horizon: f64, steps: usize, paths: usize, seed: u64) -> Result<McSetup> {
    Ok(McSetup {
        grid: TimeGrid::new(horizon, steps)?,
        sigma: SigmaVector::new(vec![1.0])?,
        x0: 0.0,
        num_paths: paths,
        seed,
    })
}

fn constant(id: BenchmarkId, grid: &TimeGrid, a: f64) -> Result<ControlSpec> {
    let p = BenchmarkParams::default();
    ControlSpec::constant(grid, lookup(id).control_box(&p)?, p.moment_bound, &[a])
}

fn driftless(s: &McSetup) -> Result<PathEnsemble> {
    let c = ControlSpec::constant(&s.grid, ismp::sde::ControlBox::interval(0.0, 0.0)?, 1.0, &[0.0])?;
    s.simulate(&DriftSpec::zero(), &c)
}

fn flow_triangle() -> Result<Outcome> {
    let clock = Instant::now();
    let s = setup(1.0, 4096, 10_000, 101)?;
    let p = BenchmarkParams::default();
    let drift = lookup(BenchmarkId::B2).drift(&p);
    let control = constant(BenchmarkId::B2, &s.grid, 0.2)?;
    let cal = calibrate(&[1.0], 1.0, 4096, 2000, 102)?;
    let ens = s.simulate(&drift, &control)?;
    let w = s.grid.full_window();
    let smooth = flow_smooth_exp(&drift, &ens, w)?;
    let fd = flow_finite_difference_richardson(&drift, &control, &ens, w, 1e-4)?;
    let lt = flow_localtime_rep(&drift, &ens, Some(&cal), w)?;
    let d = [
        relative_discrepancy(&smooth, &fd),
        relative_discrepancy(&smooth, &lt),
        relative_discrepancy(&fd, &lt),
    ];
    let elapsed = clock.elapsed();
    let passed = d.iter().all(|&v| v <= 0.05) && elapsed <= Duration::from_secs(120);
    Ok(Outcome {
        passed,
        detail: format!(
            "smooth/fd {:.4}, smooth/lt {:.4}, fd/lt {:.4} (<= 0.05); {:.1}s (<= 120s)",
            d[0],
            d[1],
            d[2],
            elapsed.as_secs_f64()
        ),
    })
}

fn local_time_identities() -> Result<Outcome> {
    let cal = calibrate(&[1.0], 1.0, 2048, 2000, 201)?;
    let below = cal.table.iter().filter(|(_, m)| *m < 0.05).count();
    let cal_ok = cal.mismatch < 0.05 && below == 1;

    let s = setup(1.0, 1024, 20_000, 202)?;
    let ens = driftless(&s)?;
    let l = tanaka_local_time(&ens, 0.0)?;
    let t: Vec<f64> = (0..s.num_paths).map(|p| l.terminal(p)).collect();
    let (m, se) = mean_and_se(&t);
    let exact = (2.0 / std::f64::consts::PI).sqrt();
    let lt_ok = (m - exact).abs() <= 3.0 * se;

    let s = setup(1.0, 1 << 13, 1000, 203)?;
    let ens = driftless(&s)?;
    let levels = occupation_levels(&ens);
    let occ = occupation_total(&ens, &levels, s.grid.steps())?;
    let rel: Vec<f64> = occ.iter().map(|o| o / s.sigma.norm_sq() - 1.0).collect();
    let rms = (rel.iter().map(|r| r * r).sum::<f64>() / rel.len() as f64).sqrt();
    let occ_ok = rms <= 0.05;

    Ok(Outcome {
        passed: cal_ok && lt_ok && occ_ok,
        detail: format!(
            "signs ({:+}, {:+}) mismatch {:.4} with {below} pair(s) < 0.05; \
             E[L(1,0)] {m:.4} vs {exact:.4} (3 SE {:.4}); occupation RMS rel. error {rms:.4} (<= 0.05)",
            cal.signs.sigma_sign,
            cal.signs.kappa_sign,
            cal.mismatch,
            3.0 * se
        ),
    })
}

fn adjoint_closed_form() -> Result<Outcome> {
    let s = setup(1.0, 512, 10_000, 301)?;
    let p = BenchmarkParams::default();
    let b = lookup(BenchmarkId::B1);
    let (drift, cost) = (b.drift(&p), b.cost(&p));
    let ens = s.simulate(&drift, &constant(BenchmarkId::B1, &s.grid, 0.2)?)?;
    let adj = adjoint_flow_lsmc(&ens, &FlowEngine::SmoothExp, &drift, &cost, &RegressionBasis::default())?;
    let n = s.grid.steps();
    let mut worst = f64::NEG_INFINITY;
    let mut max_err = 0.0f64;
    for k in 0..=n {
        let y = b.analytic_adjoint(&p, 1.0, s.grid.time(k)).unwrap_or(f64::NAN);
        for path in 0..s.num_paths {
            let e = (adj.y(path, k) - y).abs();
            max_err = max_err.max(e);
            worst = worst.max(e - 3.0 * adj.regression_se[k]);
        }
    }
    let res = bsde_residual_check(&adj, &ens, &drift, &cost)?;
    let floor = discretization_floor(s.grid.dt());
    let bad = res.violations(floor);
    Ok(Outcome {
        passed: worst <= 0.0 && bad.is_empty(),
        detail: format!(
            "max |Y - Y_exact| {max_err:.3e}, worst excess over 3 regression SE {worst:.3e} (<= 0); \
             residual steps outside 3 SE + {floor:.2e}: {}",
            bad.len()
        ),
    })
}

fn maximum_principle_round_trip() -> Result<Outcome> {
    let clock = Instant::now();
    let s = setup(1.0, 512, 10_000, 401)?;
    let p = BenchmarkParams::default();
    let b = lookup(BenchmarkId::B1);
    let (drift, cost, bounds) = (b.drift(&p), b.cost(&p), b.control_box(&p)?);
    let exact = b.analytic_control(&p, &s.grid)?.expect("B1 has a closed form");
    let config = OptimizerConfig::default();
    let res = optimize_control(&constant(BenchmarkId::B1, &s.grid, 0.0)?, &s, &drift, &cost, &config)?;
    let dist = res
        .control
        .lattice()
        .unwrap_or_default()
        .iter()
        .zip(exact.lattice().unwrap_or_default())
        .fold(0.0f64, |m, (a, e)| m.max((a - e).abs()));
    let opt_ok = res.status != OptimizerStatus::IterationLimit
        && !matches!(res.status, OptimizerStatus::Diverged { .. })
        && res.trace.len() <= 200
        && dist <= 1e-2;

    let probes = bounds.probe_set();
    let probe = ConcavityProbe::default();
    let check = |control: &ControlSpec, cost: &ismp::adjoint::CostSpec| -> Result<(bool, SufficientOutcome)> {
        let ens = s.simulate(&drift, control)?;
        let adj = adjoint_flow_lsmc(&ens, &FlowEngine::SmoothExp, &drift, cost, &RegressionBasis::default())?;
        let nec = verify_necessary(&ens, &adj, &drift, cost, &probes, TOLERANCE_FLOOR)?;
        let suf = verify_sufficient(&ens, &adj, &drift, cost, &bounds, &probe, TOLERANCE_FLOOR)?;
        Ok((nec.passed, suf.outcome))
    };
    let (nec_opt, suf_opt) = check(&exact, &cost)?;
    let shifted = exact.perturbed(&vec![1.0; s.grid.steps()], 0.5)?;
    let (nec_pert, _) = check(&shifted, &cost)?;
    let mut flipped = cost.clone();
    let (f, fx, fa) = (cost.f.clone(), cost.dfdx.clone(), cost.dfda.clone());
    flipped.f = Arc::new(move |t, x, a| -f(t, x, a));
    flipped.dfdx = Arc::new(move |t, x, a| -fx(t, x, a));
    flipped.dfda = Arc::new(move |t, x, a, out| {
        fa(t, x, a, out);
        out.iter_mut().for_each(|v| *v = -*v);
    });
    let (_, suf_flip) = check(&exact, &flipped)?;
    let elapsed = clock.elapsed();
    let passed = opt_ok
        && nec_opt
        && !nec_pert
        && suf_opt == SufficientOutcome::Pass
        && suf_flip == SufficientOutcome::HypothesesUnmet
        && elapsed <= Duration::from_secs(600);
    Ok(Outcome {
        passed,
        detail: format!(
            "{:?} in {} iterations, sup |a - a_exact| {dist:.2e} (<= 1e-2); necessary at optimum {nec_opt}, \
             at +0.5 {nec_pert}; sufficient at optimum {suf_opt:?}, with -f {suf_flip:?}; {:.1}s (<= 600s)",
            res.status,
            res.trace.len(),
            elapsed.as_secs_f64()
        ),
    })
}

fn decreasing_to_half(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0]) && v[v.len() - 1] <= 0.5 * v[0]
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" > ")
}

fn irregular_stability() -> Result<Outcome> {
    let clock = Instant::now();
    let s = McSetup {
        x0: 0.25,
        ..setup(1.0, 4096, 2000, 501)?
    };
    let p = BenchmarkParams::default();
    let b = lookup(BenchmarkId::B3);
    let (drift, cost) = (b.drift(&p), b.cost(&p));
    let control = constant(BenchmarkId::B3, &s.grid, 0.2)?;
    let levels = [4, 16, 64];
    let cal = calibrate(&[1.0], 1.0, 2048, 2000, 502)?;

    let path = mollified_convergence_study(&s, &drift, &control, &control, &levels, PathReference::Exact)?;
    let costs = cost_convergence_study(&s, &drift, &control, &cost, &levels)?;
    let controls = vec![control.clone(); levels.len()];
    let flow = flow_convergence_study(&s, &drift, &levels, &controls, &control, &cal, s.grid.full_window())?;
    let adj = adjoint_convergence_study(&s, &drift, &control, &cost, &levels, &cal, &RegressionBasis::default())?;

    let checks = [
        ("E|X_n - X|", &path.path_gap),
        ("|J_n - J|", &costs.gap),
        ("E|Phi_n - Phi|^2", &flow.mse),
        ("E|Y_n - Y|", &adj.mean_abs_gap),
    ];
    let elapsed = clock.elapsed();
    let mut passed = elapsed <= Duration::from_secs(900);
    let mut detail = Vec::new();
    for (name, v) in checks {
        let ok = decreasing_to_half(v);
        passed &= ok;
        detail.push(format!("{name} {} [{}]", fmt_list(v), if ok { "ok" } else { "no" }));
    }
    detail.push(format!("{:.1}s (<= 900s)", elapsed.as_secs_f64()));
    Ok(Outcome {
        passed,
        detail: detail.join("; "),
    })
}

fn measure_change() -> Result<Outcome> {
    let s = setup(1.0, 256, 20_000, 601)?;
    let base = driftless(&s)?;
    let p = BenchmarkParams::default();
    let mut detail = Vec::new();
    let mut passed = true;
    let mut b3_weights = Vec::new();
    for id in [BenchmarkId::B1, BenchmarkId::B2, BenchmarkId::B3] {
        let control = constant(id, &s.grid, 0.2)?;
        let w = girsanov_weights(&lookup(id).drift(&p), &control, &base)?;
        let (m, se) = mean_and_se(&w);
        let z = (m - 1.0).abs() / se;
        passed &= z <= 4.0;
        detail.push(format!("{id} weight mean {m:.4} ({z:.2} SE)"));
        if id == BenchmarkId::B3 {
            b3_weights = w;
        }
    }
    let weighted: Vec<f64> = (0..s.num_paths).map(|i| b3_weights[i] * base.terminal(i)).collect();
    let (gm, gse) = mean_and_se(&weighted);
    let direct_setup = McSetup { seed: 602, ..s.clone() };
    let drift = lookup(BenchmarkId::B3).drift(&p);
    let direct = direct_setup.simulate(&drift, &constant(BenchmarkId::B3, &s.grid, 0.2)?)?;
    let xs: Vec<f64> = (0..s.num_paths).map(|i| direct.terminal(i)).collect();
    let (dm, dse) = mean_and_se(&xs);
    let combined = (gse * gse + dse * dse).sqrt();
    let ok = (gm - dm).abs() <= 3.0 * combined;
    passed &= ok;
    detail.push(format!(
        "B3 E[X(T)] reweighted {gm:.4} vs direct {dm:.4} (3 SE {:.4})",
        3.0 * combined
    ));
    Ok(Outcome {
        passed,
        detail: detail.join("; "),
    })
}

fn gateaux_consistency() -> Result<Outcome> {
    let s = setup(1.0, 256, 10_000, 701)?;
    let p = BenchmarkParams::default();
    let b = lookup(BenchmarkId::B3);
    let drift = b.drift(&p).mollified(16)?;
    let cost = b.cost(&p);
    let control = constant(BenchmarkId::B3, &s.grid, 0.2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(702);
    let mut passed = true;
    let mut detail = Vec::new();
    for i in 0..3 {
        let eta: Vec<f64> = (0..s.grid.steps()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = gateaux_check(&s, &drift, &control, &eta, &[1e-2, 5e-3], &cost)?;
        passed &= r.agrees;
        detail.push(format!(
            "eta{i}: analytic {:.5} richardson {:.5} |diff| {:.2e} (<= {:.2e})",
            r.analytic,
            r.richardson,
            r.difference.abs(),
            r.tolerance
        ));
    }
    Ok(Outcome {
        passed,
        detail: detail.join("; "),
    })
}

const DETERMINISM_CONFIGS: &[&str] = &[
    "kind = \"simulate\"\n[model]\nbenchmark = \"B2\"\nsigma = [1.0]\n[mc]\nsteps = 64\npaths = 300\n",
    "kind = \"localtime\"\n[model]\nbenchmark = \"B3\"\nsigma = [0.6, 0.8]\n[mc]\nsteps = 128\npaths = 200\n\
     [localtime]\ncalibration_paths = 300\ncalibration_steps = 256\n",
    "kind = \"flow\"\n[model]\nbenchmark = \"B3\"\nsigma = [1.0]\n[mc]\nsteps = 256\npaths = 300\n\
     [control]\nvalue = [0.2]\n[flow]\nlevel = 16\ntolerance = 1.0\n\
     [localtime]\ncalibration_paths = 300\ncalibration_steps = 256\n",
    "kind = \"adjoint\"\n[model]\nbenchmark = \"B3\"\nsigma = [1.0]\n[mc]\nsteps = 64\npaths = 400\n\
     [adjoint]\nengine = \"localtime\"\n[localtime]\ncalibration_paths = 300\ncalibration_steps = 256\n",
    "kind = \"optimize\"\n[model]\nbenchmark = \"B1\"\nsigma = [1.0]\n[mc]\nsteps = 32\npaths = 300\n\
     [optimizer]\niterations = 15\n",
    "kind = \"study\"\n[model]\nbenchmark = \"B3\"\nsigma = [1.0]\n[mc]\nsteps = 64\npaths = 200\n\
     [control]\nvalue = [0.2]\n[localtime]\ncalibration_paths = 300\ncalibration_steps = 256\n",
];

fn csv_payloads(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir)? {
        let path = e?.path();
        if path.extension().is_some_and(|x| x == "csv" || x == "bin") {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, std::fs::read(&path)?);
        }
    }
    Ok(out)
}

fn determinism() -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for (i, body) in DETERMINISM_CONFIGS.iter().enumerate() {
        let mut runs = Vec::new();
        for (j, threads) in [1usize, 4, 4].into_iter().enumerate() {
            let dir = tmp.path().join(format!("c{i}-r{j}"));
            let cfg = ExperimentConfig::from_toml_str(&format!(
                "seed = {}\noutput = \"{}\"\n{body}",
                800 + i,
                dir.display()
            ))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool");
            pool.install(|| runner::run(&cfg))?;
            runs.push(csv_payloads(&dir)?);
        }
        for r in &runs[1..] {
            compared += runs[0].len();
            if runs[0].is_empty() || *r != runs[0] {
                mismatches.push(format!("config {i}"));
            }
        }
    }
    Ok(Outcome {
        passed: mismatches.is_empty(),
        detail: format!(
            "{} configs x (1, 4, 4 threads), {compared} CSV/binary files compared; mismatches: [{}]",
            DETERMINISM_CONFIGS.len(),
            mismatches.join(", ")
        ),
    })
}

type Criterion = (u8, &'static str, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "smooth-case flow triangle", flow_triangle),
        (2, "local-time calibration and identities", local_time_identities),
        (3, "adjoint closed form", adjoint_closed_form),
        (4, "maximum-principle round trip", maximum_principle_round_trip),
        (5, "irregular-drift stability", irregular_stability),
        (6, "measure-change correctness", measure_change),
        (7, "gateaux consistency", gateaux_consistency),
        (8, "determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| *f == n.to_string() || name.contains(f.as_str())) {
            continue;
        }
        let clock = Instant::now();
        let out = run().unwrap_or_else(|e| Outcome {
            passed: false,
            detail: format!("error: {e}"),
        });
        println!(
            "criterion {n} {} {name} [{:.1}s]: {}",
            if out.passed { "PASS" } else { "FAIL" },
            clock.elapsed().as_secs_f64(),
            out.detail
        );
        if !out.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
