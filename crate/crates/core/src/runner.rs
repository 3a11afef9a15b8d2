//! Experiment runner behind the `ismp` binary.
//!
//! [`run`] executes one [`ExperimentConfig`] and leaves in its output
//! directory the experiment's CSV files, a `summary.txt` with every check and
//! its tolerance, and a `manifest.json` listing the files together with the
//! config hash, seed, timing and local-time calibration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::adjoint::{
    adjoint_flow_lsmc, bsde_residual_check, discretization_floor, CostSpec, RESIDUAL_FLOOR,
};
use crate::benchmarks::{lookup, registry, Benchmark, BenchmarkParams};
use crate::config::{ControlKind, EngineKind, ExperimentConfig, ExperimentKind};
use crate::error::{IsmpError, Result};
use crate::flow::{
    flow_convergence_study, flow_finite_difference_richardson, flow_localtime_rep,
    flow_smooth_exp, relative_discrepancy, FlowEngine, FlowEstimate,
};
use crate::io::{fmt_f64, write_matrix, CsvTable};
use crate::localtime::{calibrate_reversal_signs, default_calibration_family, tanaka_local_time, Calibration};
use crate::sde::{
    doleans_exponential, ControlBox, ControlSpec, DriftSpec, McSetup, PathEnsemble, SigmaVector,
    TimeGrid,
};
use crate::smp::{
    adjoint_convergence_study, cost_convergence_study, mollified_convergence_study,
    optimize_control, value_of, verify_necessary, verify_sufficient, ConcavityProbe,
    OptimizerStatus, PathReference, SmpReport, SufficientReport,
};
use crate::stats::mean_and_se;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const CALIBRATION_SEED_OFFSET: u64 = 0xCA1B_0000_0000_0001;
/// Largest calibration mismatch reported as a pass.
pub const CALIBRATION_TOLERANCE: f64 = 0.05;
/// Sup-norm distance to the closed-form optimum accepted after optimisation.
pub const OPTIMUM_TOLERANCE: f64 = 1e-2;

/// One line of the summary.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `"<="` or `">="`.
    pub relation: &'static str,
    pub bound: f64,
    /// Informational checks are reported but never fail a run.
    pub gating: bool,
    pub passed: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            relation: "<=",
            bound,
            gating: true,
            passed: value <= bound,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            relation: ">=",
            bound,
            gating: true,
            passed: value >= bound,
        }
    }

    fn info(mut self) -> Self {
        self.gating = false;
        self
    }

    fn line(&self) -> String {
        let status = match (self.gating, self.passed) {
            (true, true) => "PASS",
            (true, false) => "FAIL",
            (false, true) => "ok  ",
            (false, false) => "warn",
        };
        format!(
            "{status}  {}: {:.6e} {} {:.6e}",
            self.name, self.value, self.relation, self.bound
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CalibrationRecord {
    pub sigma_sign: f64,
    pub kappa_sign: f64,
    pub mismatch: f64,
    pub separation: f64,
}

impl From<&Calibration> for CalibrationRecord {
    fn from(c: &Calibration) -> Self {
        Self {
            sigma_sign: c.signs.sigma_sign,
            kappa_sign: c.signs.kappa_sign,
            mismatch: c.mismatch,
            separation: c.separation,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix: f64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub timing: Timing,
    pub files: Vec<String>,
    pub calibration: Option<CalibrationRecord>,
    pub passed: bool,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| {
            IsmpError::InvalidArgument(format!("missing artifacts: {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output: PathBuf,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub manifest: RunManifest,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            2
        }
    }
}

/// Driftless Brownian ensemble with the given `sigma`, calibrated on the
/// default `{1, sin, cos}` family.
pub fn calibrate(
    sigma: &[f64],
    horizon: f64,
    steps: usize,
    paths: usize,
    seed: u64,
) -> Result<Calibration> {
    let grid = TimeGrid::new(horizon, steps)?;
    let setup = McSetup {
        grid,
        sigma: SigmaVector::new(sigma.to_vec())?,
        x0: 0.0,
        num_paths: paths,
        seed,
    };
    let control = ControlSpec::constant(&grid, ControlBox::interval(0.0, 0.0)?, 1.0, &[0.0])?;
    let ens = setup.simulate(&DriftSpec::zero(), &control)?;
    calibrate_reversal_signs(&default_calibration_family(), &ens)
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    bench: Benchmark,
    params: BenchmarkParams,
    drift: DriftSpec,
    cost: CostSpec,
    bounds: ControlBox,
    setup: McSetup,
    dir: PathBuf,
    files: Vec<String>,
    checks: Vec<Check>,
    notes: Vec<String>,
    calibration: Option<Calibration>,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        let bench = lookup(cfg.model.benchmark);
        let params = cfg.params();
        fs::create_dir_all(&cfg.output).map_err(|e| {
            IsmpError::Config(format!(
                "key 'output': cannot create {}: {e}",
                cfg.output.display()
            ))
        })?;
        let probe = cfg.output.join(".ismp-write-test");
        fs::write(&probe, b"").map_err(|e| {
            IsmpError::Config(format!(
                "key 'output': {} is not writable: {e}",
                cfg.output.display()
            ))
        })?;
        fs::remove_file(&probe)?;
        Ok(Self {
            drift: bench.drift(&params),
            cost: bench.cost(&params),
            bounds: bench.control_box(&params)?,
            setup: cfg.setup()?,
            bench,
            params,
            cfg,
            dir: cfg.output.clone(),
            files: Vec::new(),
            checks: Vec::new(),
            notes: Vec::new(),
            calibration: None,
        })
    }

    fn write_csv(&mut self, name: &str, table: &CsvTable) -> Result<()> {
        table.write(&self.dir.join(name))?;
        self.files.push(name.to_owned());
        Ok(())
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        fs::write(self.dir.join(name), text)?;
        self.files.push(name.to_owned());
        Ok(())
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    fn control(&self) -> Result<ControlSpec> {
        let c = &self.cfg.control;
        let grid = &self.setup.grid;
        let analytic = || {
            self.bench.analytic_control(&self.params, grid)?.ok_or_else(|| {
                IsmpError::Config(format!(
                    "key 'control.kind': {} has no closed-form control",
                    self.bench.id
                ))
            })
        };
        match c.kind {
            ControlKind::Constant => {
                ControlSpec::constant(grid, self.bounds.clone(), self.params.moment_bound, &c.value)
            }
            ControlKind::Analytic => analytic(),
            ControlKind::AnalyticPerturbed => {
                let base = analytic()?;
                let shift = vec![1.0; grid.steps()];
                base.perturbed(&shift, c.perturbation)
            }
        }
    }

    /// Drift used by the adjoint, optimiser and verifiers.
    fn model_drift(&self) -> Result<DriftSpec> {
        match self.cfg.adjoint.level {
            0 => Ok(self.drift.clone()),
            n => self.drift.mollified(n),
        }
    }

    fn calibration(&mut self) -> Result<Calibration> {
        if let Some(c) = &self.calibration {
            return Ok(c.clone());
        }
        let lt = &self.cfg.localtime;
        let cal = calibrate(
            &self.cfg.model.sigma,
            self.cfg.model.horizon,
            lt.calibration_steps,
            lt.calibration_paths,
            self.cfg.seed.wrapping_add(CALIBRATION_SEED_OFFSET),
        )?;
        self.checks.push(Check::at_most(
            "local-time calibration mismatch",
            cal.mismatch,
            CALIBRATION_TOLERANCE,
        ));
        self.write_text("calibration.json", &cal.report_json())?;
        self.calibration = Some(cal.clone());
        Ok(cal)
    }

    fn engine(&mut self, drift: &DriftSpec) -> Result<FlowEngine> {
        if self.cfg.adjoint.engine == EngineKind::Localtime || !drift.b1.has_derivative() {
            Ok(FlowEngine::LocalTimeRep(self.calibration()?))
        } else {
            Ok(FlowEngine::SmoothExp)
        }
    }
}

/// Reads, validates and runs a config file.
pub fn run_file(path: &Path) -> Result<RunOutcome> {
    run(&ExperimentConfig::from_file(path)?)
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let clock = Instant::now();
    let mut ctx = Context::new(cfg)?;
    match cfg.kind {
        ExperimentKind::Simulate => run_simulate(&mut ctx)?,
        ExperimentKind::Localtime => run_localtime(&mut ctx)?,
        ExperimentKind::Flow => run_flow(&mut ctx)?,
        ExperimentKind::Adjoint => run_adjoint(&mut ctx)?,
        ExperimentKind::Optimize => run_optimize(&mut ctx)?,
        ExperimentKind::Verify => run_verify(&mut ctx)?,
        ExperimentKind::Study => run_study(&mut ctx)?,
    }
    let passed = ctx.checks.iter().all(|c| c.passed || !c.gating);
    let summary = summary_text(&ctx, passed);
    ctx.write_text("summary.txt", &summary)?;
    ctx.files.push("manifest.json".into());
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        version: VERSION.to_owned(),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        timing: Timing {
            started_unix: started,
            elapsed_seconds: clock.elapsed().as_secs_f64(),
        },
        files: ctx.files.clone(),
        calibration: ctx.calibration.as_ref().map(CalibrationRecord::from),
        passed,
        config: cfg.clone(),
    };
    fs::write(
        ctx.dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(RunOutcome {
        output: ctx.dir.clone(),
        checks: ctx.checks,
        passed,
        manifest,
    })
}

fn summary_text(ctx: &Context, passed: bool) -> String {
    let cfg = ctx.cfg;
    let mut s = format!("ismp {VERSION}\n");
    s += &format!("kind: {:?}\n", cfg.kind).to_lowercase();
    s += &format!(
        "benchmark: {} ({}, oracle {})\n",
        ctx.bench.id,
        ctx.bench.name,
        serde_json::to_value(ctx.bench.oracle)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    );
    s += &format!("config hash: {}\n", cfg.hash());
    s += &format!("seed: {}\n", cfg.seed);
    s += &format!("paths x steps: {} x {}\n", cfg.mc.paths, cfg.mc.steps);
    if let Some(c) = &ctx.calibration {
        s += &format!(
            "calibration: sigma_sign={:+} kappa_sign={:+} mismatch={:.4e}\n",
            c.signs.sigma_sign, c.signs.kappa_sign, c.mismatch
        );
    }
    for n in &ctx.notes {
        s += &format!("{n}\n");
    }
    s += "\nchecks:\n";
    for c in &ctx.checks {
        s += &format!("  {}\n", c.line());
    }
    s += &format!("\nverdict: {}\n", if passed { "PASS" } else { "FAIL" });
    s
}

fn ensemble_table(ens: &PathEnsemble) -> Result<CsvTable> {
    let mut t = CsvTable::new(["path", "k", "t", "x"]);
    let grid = ens.grid();
    for p in 0..ens.num_paths() {
        for (k, x) in ens.path(p).iter().enumerate() {
            t.push(vec![p.to_string(), k.to_string(), fmt_f64(grid.time(k)), fmt_f64(*x)])?;
        }
    }
    Ok(t)
}

fn run_simulate(ctx: &mut Context) -> Result<()> {
    let control = ctx.control()?;
    let ens = ctx.setup.simulate(&ctx.drift, &control)?;
    ctx.write_csv("ensemble.csv", &ensemble_table(&ens)?)?;
    write_matrix(
        &ctx.dir.join("ensemble.bin"),
        ens.num_paths(),
        ens.steps() + 1,
        ens.states(),
    )?;
    ctx.files.push("ensemble.bin".into());

    let terminal: Vec<f64> = (0..ens.num_paths()).map(|p| ens.terminal(p)).collect();
    let (m, se) = mean_and_se(&terminal);
    ctx.note(format!("E[X(T)] = {m:.6e} +- {se:.3e}"));
    let sanity = ens.noise_sanity();
    ctx.checks.push(
        Check::at_most("|mean noise increment|", sanity.mean.abs(), sanity.mean_tolerance).info(),
    );
    ctx.checks.push(
        Check::at_most("max relative variance error", sanity.max_rel_variance_error, 0.10).info(),
    );
    let d = ctx.setup.sigma.dim();
    let w = doleans_exponential(&ens, |_, _, q| {
        q.fill(1.0 / d as f64);
        Ok(())
    }, ens.steps())?;
    let (wm, wse) = mean_and_se(&w);
    ctx.checks
        .push(Check::at_most("|mean Doleans weight - 1| / SE", (wm - 1.0).abs() / wse, 4.0).info());
    Ok(())
}

fn run_localtime(ctx: &mut Context) -> Result<()> {
    ctx.calibration()?;
    let control = ctx.control()?;
    let ens = ctx.setup.simulate(&ctx.drift, &control)?;
    let level = ctx.cfg.localtime.level;
    let curve = tanaka_local_time(&ens, level)?;
    let mut t = CsvTable::new(["path", "k", "value"]);
    for p in 0..curve.num_paths() {
        for (k, v) in curve.path(p).iter().enumerate() {
            t.push(vec![p.to_string(), k.to_string(), fmt_f64(*v)])?;
        }
    }
    ctx.write_csv("localtime.csv", &t)?;
    let terminal: Vec<f64> = (0..curve.num_paths()).map(|p| curve.terminal(p)).collect();
    let (m, se) = mean_and_se(&terminal);
    ctx.note(format!("E[L(T, {level})] = {m:.6e} +- {se:.3e}"));
    Ok(())
}

fn flow_rows(t: &mut CsvTable, est: &FlowEstimate, grid: &TimeGrid) -> Result<()> {
    let (ts, ss) = (grid.time(est.window.start), grid.time(est.window.end));
    for (p, v) in est.values.iter().enumerate() {
        t.push(vec![
            p.to_string(),
            est.estimator.name().to_owned(),
            fmt_f64(ts),
            fmt_f64(ss),
            fmt_f64(*v),
        ])?;
    }
    Ok(())
}

fn run_flow(ctx: &mut Context) -> Result<()> {
    let cal = ctx.calibration()?;
    let control = ctx.control()?;
    let window = ctx.cfg.flow_window()?;
    let ens = ctx.setup.simulate(&ctx.drift, &control)?;
    let smooth = if ctx.drift.b1.has_derivative() {
        flow_smooth_exp(&ctx.drift, &ens, window)?
    } else {
        let level = ctx.cfg.flow.level;
        ctx.note(format!("smooth-exp flow uses the drift mollified at n = {level}"));
        let dn = ctx.drift.mollified(level)?;
        let en = ctx.setup.simulate_on(&dn, &control, ens.noise())?;
        flow_smooth_exp(&dn, &en, window)?
    };
    let fd = flow_finite_difference_richardson(&ctx.drift, &control, &ens, window, ctx.cfg.flow.bump)?;
    let lt = flow_localtime_rep(&ctx.drift, &ens, Some(&cal), window)?;
    let grid = ctx.setup.grid;
    let estimates = [smooth, fd, lt];

    let mut all = CsvTable::new(["path", "estimator", "t", "s", "value"]);
    let mut summary = CsvTable::new(["estimator", "t", "s", "mean", "se", "rms"]);
    for e in &estimates {
        flow_rows(&mut all, e, &grid)?;
        let (m, se) = e.mean_and_se();
        summary.push(vec![
            e.estimator.name().to_owned(),
            fmt_f64(grid.time(window.start)),
            fmt_f64(grid.time(window.end)),
            fmt_f64(m),
            fmt_f64(se),
            fmt_f64(e.rms()),
        ])?;
    }
    ctx.write_csv("flow.csv", &all)?;
    ctx.write_csv("flow_summary.csv", &summary)?;
    if estimates[1].positivity_violations > 0 {
        ctx.note(format!(
            "finite-difference flow non-positive on {} paths",
            estimates[1].positivity_violations
        ));
    }
    let tol = ctx.cfg.flow.tolerance;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let (a, b) = (&estimates[i], &estimates[j]);
        ctx.checks.push(Check::at_most(
            format!("flow discrepancy {} vs {}", a.estimator.name(), b.estimator.name()),
            relative_discrepancy(a, b),
            tol,
        ));
    }
    Ok(())
}

fn run_adjoint(ctx: &mut Context) -> Result<()> {
    let drift = ctx.model_drift()?;
    let engine = ctx.engine(&drift)?;
    let control = ctx.control()?;
    let ens = ctx.setup.simulate(&drift, &control)?;
    let adj = adjoint_flow_lsmc(&ens, &engine, &drift, &ctx.cost, &ctx.cfg.basis())?;
    let grid = ctx.setup.grid;
    let n = grid.steps();

    let mut paths = CsvTable::new(["path", "k", "Y"]);
    for p in 0..adj.num_paths() {
        for (k, y) in adj.path(p).iter().enumerate() {
            paths.push(vec![p.to_string(), k.to_string(), fmt_f64(*y)])?;
        }
    }
    ctx.write_csv("adjoint.csv", &paths)?;

    let analytic: Vec<Option<f64>> = (0..=n)
        .map(|k| ctx.bench.analytic_adjoint(&ctx.params, grid.horizon(), grid.time(k)))
        .collect();
    let mut means = CsvTable::new([
        "k",
        "t",
        "mean",
        "regression_se",
        "payload_mean",
        "payload_se",
        "analytic",
    ]);
    for k in 0..=n {
        means.push(vec![
            k.to_string(),
            fmt_f64(grid.time(k)),
            fmt_f64(adj.mean(k)),
            fmt_f64(adj.regression_se[k]),
            fmt_f64(adj.payload_mean[k]),
            fmt_f64(adj.payload_se[k]),
            analytic[k].map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    ctx.write_csv("adjoint_mean.csv", &means)?;

    if drift.b1.has_derivative() {
        residual_checks(ctx, &adj, &ens, &drift)?;
    } else {
        ctx.note("BSDE residual skipped: b1 has no x-derivative (set adjoint.level to mollify)");
    }

    if analytic.iter().all(Option::is_some) {
        let mut worst = f64::NEG_INFINITY;
        for k in 0..=n {
            let y = analytic[k].unwrap_or_default();
            for p in 0..adj.num_paths() {
                worst = worst.max((adj.y(p, k) - y).abs() - 3.0 * adj.regression_se[k]);
            }
        }
        ctx.checks.push(Check::at_most(
            "adjoint |Y - Y_exact| - 3 regression SE (worst)",
            worst,
            RESIDUAL_FLOOR,
        ));
    }
    Ok(())
}

fn residual_checks(
    ctx: &mut Context,
    adj: &crate::adjoint::AdjointEstimate,
    ens: &PathEnsemble,
    drift: &DriftSpec,
) -> Result<()> {
    let grid = ctx.setup.grid;
    let residual = bsde_residual_check(adj, ens, drift, &ctx.cost)?;
    let mut text = format!("{:>6} {:>24} {:>24}\n", "k", "mean_residual", "SE");
    for k in 0..residual.mean.len() {
        text += &format!("{k:>6} {:>24} {:>24}\n", fmt_f64(residual.mean[k]), fmt_f64(residual.se[k]));
    }
    ctx.write_text("residual.txt", &text)?;
    let floor = discretization_floor(grid.dt());
    let worst = (0..residual.mean.len())
        .map(|k| residual.mean[k].abs() - 3.0 * residual.se[k])
        .fold(f64::NEG_INFINITY, f64::max);
    ctx.checks
        .push(Check::at_most("BSDE residual |mean| - 3 SE (worst step)", worst, floor));
    Ok(())
}

fn smp_table(grid: &TimeGrid, nec: &SmpReport, suf: &SufficientReport) -> Result<CsvTable> {
    let mut t = CsvTable::new([
        "k",
        "t",
        "necessary_statistic",
        "necessary_se",
        "necessary_margin",
        "stationarity_statistic",
        "stationarity_se",
        "stationarity_margin",
    ]);
    let st = &suf.stationarity;
    for k in 0..nec.profile.len() {
        t.push(vec![
            k.to_string(),
            fmt_f64(grid.time(k)),
            fmt_f64(nec.statistic[k]),
            fmt_f64(nec.se[k]),
            fmt_f64(nec.profile[k]),
            fmt_f64(st.statistic[k]),
            fmt_f64(st.se[k]),
            fmt_f64(st.profile[k]),
        ])?;
    }
    Ok(t)
}

/// Runs both verifiers at `control`, writes `smp_report.csv` and records the
/// checks (the necessary condition gates, the sufficient one is reported).
fn verify_at(ctx: &mut Context, drift: &DriftSpec, control: &ControlSpec) -> Result<()> {
    let engine = ctx.engine(drift)?;
    let ens = ctx.setup.simulate(drift, control)?;
    let adj = adjoint_flow_lsmc(&ens, &engine, drift, &ctx.cost, &ctx.cfg.basis())?;
    let floor = ctx.cfg.verify.floor;
    let nec = verify_necessary(&ens, &adj, drift, &ctx.cost, &ctx.bounds.probe_set(), floor)?;
    let probe = ConcavityProbe {
        samples: ctx.cfg.verify.concavity_samples,
        seed: ctx.cfg.seed,
        ..ConcavityProbe::default()
    };
    let suf = verify_sufficient(&ens, &adj, drift, &ctx.cost, &ctx.bounds, &probe, floor)?;
    let table = smp_table(&ctx.setup.grid, &nec, &suf)?;
    ctx.write_csv("smp_report.csv", &table)?;
    let value = value_of(&ens, &ctx.cost)?;
    ctx.note(format!("J = {:.6e} +- {:.3e}", value.value, value.se));
    ctx.note(format!("sufficient condition: {:?}", suf.outcome));
    ctx.checks.push(Check::at_least(
        "necessary condition worst margin (est + 3 SE + floor)",
        nec.worst_margin(),
        0.0,
    ));
    ctx.checks.push(
        Check::at_least(
            "stationarity worst margin (3 SE + floor - |est|)",
            suf.stationarity.worst_margin(),
            0.0,
        )
        .info(),
    );
    Ok(())
}

fn run_optimize(ctx: &mut Context) -> Result<()> {
    let drift = ctx.model_drift()?;
    let initial = ctx.control()?;
    let mut config = ctx.cfg.optimizer_schedule();
    config.engine = ctx.engine(&drift)?;
    let result = optimize_control(&initial, &ctx.setup, &drift, &ctx.cost, &config)?;

    let mut trace = CsvTable::new(["iteration", "value", "se", "gradient_sup", "step_sup"]);
    for e in &result.trace {
        trace.push(vec![
            e.iteration.to_string(),
            fmt_f64(e.value),
            fmt_f64(e.se),
            fmt_f64(e.gradient_sup),
            fmt_f64(e.step_sup),
        ])?;
    }
    ctx.write_csv("trace.csv", &trace)?;

    let grid = ctx.setup.grid;
    let lattice = result.control.lattice().unwrap_or_default().to_vec();
    let exact = ctx.bench.analytic_control(&ctx.params, &grid)?;
    let mut table = CsvTable::new(["k", "t", "control", "analytic"]);
    for (k, a) in lattice.iter().enumerate() {
        let analytic = exact
            .as_ref()
            .and_then(|c| c.lattice().map(|l| fmt_f64(l[k])))
            .unwrap_or_default();
        table.push(vec![k.to_string(), fmt_f64(grid.time(k)), fmt_f64(*a), analytic])?;
    }
    ctx.write_csv("control.csv", &table)?;

    ctx.note(format!(
        "optimizer: {:?} after {} iterations",
        result.status,
        result.trace.len()
    ));
    let diverged = matches!(result.status, OptimizerStatus::Diverged { .. });
    ctx.checks
        .push(Check::at_most("optimizer diverged", f64::from(u8::from(diverged)), 0.0));
    if let Some(exact) = exact.as_ref().and_then(|c| c.lattice()) {
        let dist = lattice
            .iter()
            .zip(exact)
            .fold(0.0f64, |s, (a, b)| s.max((a - b).abs()));
        ctx.checks
            .push(Check::at_most("sup |a - a_exact|", dist, OPTIMUM_TOLERANCE));
    }
    verify_at(ctx, &drift, &result.control)
}

fn run_verify(ctx: &mut Context) -> Result<()> {
    let drift = ctx.model_drift()?;
    let control = ctx.control()?;
    verify_at(ctx, &drift, &control)
}

fn monotone_halving(values: &[f64]) -> (bool, f64) {
    let monotone = values.windows(2).all(|w| w[1] < w[0]);
    let ratio = values.last().copied().unwrap_or(f64::NAN) / values[0];
    (monotone, ratio)
}

fn run_study(ctx: &mut Context) -> Result<()> {
    let cal = ctx.calibration()?;
    let control = ctx.control()?;
    let levels = ctx.cfg.study.levels.clone();
    let window = ctx.cfg.flow_window()?;
    let setup = ctx.setup.clone();

    let path = mollified_convergence_study(&setup, &ctx.drift, &control, &control, &levels, PathReference::Exact)?;
    let cost = cost_convergence_study(&setup, &ctx.drift, &control, &ctx.cost, &levels)?;
    let controls = vec![control.clone(); levels.len()];
    let flow = flow_convergence_study(&setup, &ctx.drift, &levels, &controls, &control, &cal, window)?;
    let adj = adjoint_convergence_study(
        &setup,
        &ctx.drift,
        &control,
        &ctx.cost,
        &levels,
        &cal,
        &ctx.cfg.basis(),
    )?;

    let nan = vec![f64::NAN; levels.len()];
    let series: [(&str, &[f64], &[f64]); 4] = [
        ("path_gap", &path.path_gap, &path.path_gap_se),
        ("cost_gap", &cost.gap, &cost.se),
        ("flow_mse", &flow.mse, &flow.se),
        ("adjoint_gap", &adj.mean_abs_gap, &nan),
    ];
    let mut t = CsvTable::new(["quantity", "n", "value", "se"]);
    for (name, v, se) in series {
        for (i, n) in levels.iter().enumerate() {
            t.push(vec![name.to_owned(), n.to_string(), fmt_f64(v[i]), fmt_f64(se[i])])?;
        }
    }
    ctx.write_csv("study.csv", &t)?;

    let mut fc = CsvTable::new(["n", "mse", "se"]);
    for (i, n) in levels.iter().enumerate() {
        fc.push(vec![n.to_string(), fmt_f64(flow.mse[i]), fmt_f64(flow.se[i])])?;
    }
    ctx.write_csv("flow_convergence.csv", &fc)?;

    let mut b = CsvTable::new(["n", "bound_integral", "bound_term", "finite"]);
    for (i, n) in levels.iter().enumerate() {
        b.push(vec![
            n.to_string(),
            fmt_f64(path.bound_integral[i]),
            fmt_f64(path.bound_term[i]),
            path.bound_finite[i].to_string(),
        ])?;
    }
    ctx.write_csv("bound.csv", &b)?;

    for (name, v, _) in series {
        let (monotone, ratio) = monotone_halving(v);
        ctx.checks.push(Check::at_most(
            format!("{name} last/first ratio"),
            ratio,
            0.5,
        ));
        ctx.checks.push(Check::at_least(
            format!("{name} strictly decreasing"),
            f64::from(u8::from(monotone)),
            1.0,
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct RegistryEntry<'a> {
    id: String,
    name: &'a str,
    description: &'a str,
    oracle: crate::benchmarks::OracleType,
    criteria: &'a [u8],
    defaults: &'a BenchmarkParams,
}

/// Registry listing, either as text or as JSON.
pub fn list_benchmarks(json: bool) -> String {
    let reg = registry();
    if json {
        let entries: Vec<RegistryEntry> = reg
            .iter()
            .map(|b| RegistryEntry {
                id: b.id.to_string(),
                name: b.name,
                description: b.description,
                oracle: b.oracle,
                criteria: &b.criteria,
                defaults: &b.defaults,
            })
            .collect();
        return serde_json::to_string_pretty(&entries).expect("registry serialises") + "\n";
    }
    let mut s = String::new();
    for b in &reg {
        let oracle = serde_json::to_value(b.oracle)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        let criteria: Vec<String> = b.criteria.iter().map(u8::to_string).collect();
        let d = &b.defaults;
        s += &format!("{}  {}  oracle={}  criteria={}\n", b.id, b.name, oracle, criteria.join(","));
        s += &format!("    {}\n", b.description);
        s += &format!(
            "    defaults: c={} theta={} steepness={} control=[{}, {}] moment_bound={}\n",
            d.c, d.theta, d.steepness, d.control_lo, d.control_hi, d.moment_bound
        );
    }
    s
}

fn parse_or_nan(s: &str) -> Result<f64> {
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse::<f64>()
        .map_err(|e| IsmpError::InvalidArgument(format!("bad number '{s}': {e}")))
}

fn column(table: &CsvTable, name: &str) -> Result<Vec<String>> {
    let j = table
        .headers()
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| IsmpError::InvalidArgument(format!("missing column '{name}'")))?;
    Ok(table.rows().iter().map(|r| r[j].clone()).collect())
}

/// Long `(series, x, y, se)` table built from columns of `table`.
fn long_form(
    table: &CsvTable,
    series: &str,
    x: &str,
    y: &str,
    se: Option<&str>,
    fixed_series: Option<&str>,
) -> Result<Vec<Vec<String>>> {
    let xs = column(table, x)?;
    let ys = column(table, y)?;
    let ses = match se {
        Some(c) => column(table, c)?,
        None => vec![String::new(); xs.len()],
    };
    let names = match fixed_series {
        Some(name) => vec![name.to_owned(); xs.len()],
        None => column(table, series)?,
    };
    let mut rows = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let yv = parse_or_nan(&ys[i])?;
        if yv.is_nan() && ys[i].is_empty() {
            continue;
        }
        rows.push(vec![
            names[i].clone(),
            fmt_f64(parse_or_nan(&xs[i])?),
            fmt_f64(yv),
            fmt_f64(parse_or_nan(&ses[i])?),
        ]);
    }
    Ok(rows)
}

/// Writes `plot_*.csv` files in long `(series, x, y, se)` form next to the
/// artifacts of a completed run and returns their paths.
pub fn emit_plot_data(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = RunManifest::read(run_dir)?;
    for f in &manifest.files {
        if !run_dir.join(f).exists() {
            return Err(IsmpError::InvalidArgument(format!(
                "missing artifacts: {} listed in the manifest but absent",
                f
            )));
        }
    }
    let has = |name: &str| manifest.files.iter().any(|f| f == name);
    let mut written = Vec::new();
    let mut emit = |name: &str, rows: Vec<Vec<String>>| -> Result<()> {
        let mut t = CsvTable::new(["series", "x", "y", "se"]);
        for r in rows {
            t.push(r)?;
        }
        let path = run_dir.join(name);
        t.write(&path)?;
        written.push(path);
        Ok(())
    };
    if has("trace.csv") {
        let t = CsvTable::read(&run_dir.join("trace.csv"))?;
        emit("plot_trace.csv", long_form(&t, "", "iteration", "value", Some("se"), Some("J"))?)?;
    }
    if has("control.csv") {
        let t = CsvTable::read(&run_dir.join("control.csv"))?;
        let mut rows = long_form(&t, "", "t", "control", None, Some("control"))?;
        rows.extend(long_form(&t, "", "t", "analytic", None, Some("analytic"))?);
        emit("plot_control.csv", rows)?;
    }
    if has("study.csv") {
        let t = CsvTable::read(&run_dir.join("study.csv"))?;
        emit("plot_study.csv", long_form(&t, "quantity", "n", "value", Some("se"), None)?)?;
    }
    if has("flow_summary.csv") {
        let t = CsvTable::read(&run_dir.join("flow_summary.csv"))?;
        emit("plot_flow.csv", long_form(&t, "estimator", "s", "mean", Some("se"), None)?)?;
    }
    if has("adjoint_mean.csv") {
        let t = CsvTable::read(&run_dir.join("adjoint_mean.csv"))?;
        let mut rows = long_form(&t, "", "t", "mean", Some("regression_se"), Some("Y"))?;
        rows.extend(long_form(&t, "", "t", "analytic", None, Some("Y_exact"))?);
        emit("plot_adjoint.csv", rows)?;
    }
    if has("smp_report.csv") {
        let t = CsvTable::read(&run_dir.join("smp_report.csv"))?;
        emit(
            "plot_smp.csv",
            long_form(&t, "", "t", "necessary_margin", None, Some("necessary_margin"))?,
        )?;
    }
    if written.is_empty() {
        return Err(IsmpError::InvalidArgument(format!(
            "missing artifacts: no plottable files in {}",
            run_dir.display()
        )));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(kind: &str, extra: &str, dir: &Path) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            "kind = \"{kind}\"\nseed = 5\noutput = \"{}\"\n{extra}",
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn listing_names_every_benchmark() {
        let text = list_benchmarks(false);
        assert_eq!(text.lines().filter(|l| l.starts_with('B')).count(), 3);
        let json: serde_json::Value = serde_json::from_str(&list_benchmarks(true)).unwrap();
        let arr = json.as_array().unwrap();
        assert_eq!(arr.len(), 3);
        let oracles: Vec<&str> = arr.iter().map(|e| e["oracle"].as_str().unwrap()).collect();
        assert_eq!(oracles, ["analytic", "cross-estimator", "stability"]);
    }

    #[test]
    fn simulate_writes_listed_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            "simulate",
            "[model]\nbenchmark = \"B3\"\nsigma = [1.0]\n[mc]\nsteps = 16\npaths = 20\n",
            dir.path(),
        );
        let out = run(&cfg).unwrap();
        assert_eq!(out.exit_code(), 0);
        for f in &out.manifest.files {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let (r, c, data) = crate::io::read_matrix(&dir.path().join("ensemble.bin")).unwrap();
        assert_eq!((r, c), (20, 17));
        let csv = CsvTable::read(&dir.path().join("ensemble.csv")).unwrap();
        assert_eq!(csv.column_f64("x").unwrap(), data);
        assert!(emit_plot_data(dir.path()).is_err());
    }

    #[test]
    fn analytic_control_needs_b1() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            "verify",
            "[model]\nbenchmark = \"B2\"\nsigma = [1.0]\n[mc]\nsteps = 8\npaths = 10\n[control]\nkind = \"analytic\"\n",
            dir.path(),
        );
        let err = run(&cfg).unwrap_err();
        assert!(err.to_string().contains("control.kind"), "{err}");
    }

    #[test]
    fn plot_data_needs_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_plot_data(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing artifacts"));
    }
}
