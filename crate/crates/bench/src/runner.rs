//! The four CLI verbs: run, sweep, verify-lb and report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bilevel_core::linalg::RealVector;
use bilevel_core::lower_bound::{
    simulate_on_instance, verify_certificate, verify_gap_floor, verify_grad_floor, verify_support_cap,
    HardInstance, LowerBoundReport, SimAlgorithm,
};
use bilevel_core::oracle::{exact_hypergradient, finite_difference_check, BilevelOracle, SmoothnessConstants};
use bilevel_core::hypergrad::{AgdConfig, HeavyBallConfig};
use bilevel_core::solvers::{
    accbio, accbio_bg, auto_inner_budget, baseline_aid_gd, l_phi_estimate, AccBiOBGConfig, AccBiOConfig,
    BaselineConfig, InnerBudget, LPhiInputs, Regularized, RunOptions, RunTrace, SolverError, TerminalStatus,
};
use bilevel_core::worst_case::{
    build_csc, build_scsc, csc_grad_floor_verify, csc_rstar, csc_rstar_equation, ScscInstance,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    Algorithm, Criterion, CscBattery, ExperimentConfig, InstanceKind, RadiusRule, RadiusSpec, RegimeSpec,
    ScscBattery, SolverSpec, StepBudget, SweepAxis,
};
use crate::instances::{build_instance, BuiltInstance};
use crate::output::{resolve_output_dir, write_atomic};
use crate::BenchError;

pub const SUMMARY_CSV_HEADER: &str = "algorithm,status,iterations,final_gap,final_grad_norm,complexity,complexity_to_eps,l_phi,n,m,original_gap,original_grad_norm";
pub const SWEEP_CSV_HEADER: &str = "axis_value,complexity_to_eps,final_gap";
pub const REPORT_CSV_HEADER: &str = "trace,rows,status,final_gap,final_grad_norm,complexity";

/// Finite-difference step and tolerance for the spot check at a random point.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub tau_cost: Option<f64>,
}

impl Overrides {
    /// Merged config and the output directory to write into.
    pub fn apply(&self, cfg: &ExperimentConfig) -> Result<(ExperimentConfig, PathBuf), BenchError> {
        let mut cfg = cfg.clone();
        let out = resolve_output_dir(self.out.as_deref(), cfg.output_dir.as_deref());
        cfg.output_dir = None;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(j) = self.jobs {
            if j == 0 {
                return Err(BenchError::Config("--jobs must be at least 1".into()));
            }
            cfg.jobs = j;
        }
        if let Some(t) = self.tau_cost {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(BenchError::Config(format!("--tau-cost must be non-negative, got {t}")));
            }
            if let Some(s) = cfg.solver.as_mut() {
                s.tau_cost = Some(t);
            }
        }
        Ok((cfg, out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRegularization {
    pub r: f64,
    pub weight: f64,
    pub criterion: Criterion,
}

/// Every parameter a run actually used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSolver {
    pub algorithm: Algorithm,
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub eps: f64,
    /// Accuracy handed to the solver; differs from `eps` under regularization.
    pub solver_eps: f64,
    pub tau_cost: f64,
    pub l_phi: f64,
    pub l_phi_source: String,
    pub mu_x: f64,
    pub kappa_y: f64,
    pub stepsize: Option<f64>,
    pub alpha: Option<f64>,
    pub u: Option<f64>,
    pub warm_start: bool,
    pub stop_at_eps: bool,
    pub regularization: Option<ResolvedRegularization>,
    pub inner_budget: Option<InnerBudget>,
    pub agd: AgdConfig,
    pub hb: HeavyBallConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdSpotCheck {
    pub point: RealVector,
    pub step: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub solver: ResolvedSolver,
    pub fd_check: Option<FdSpotCheck>,
}

/// Outcome of one solver run. A diverged run keeps its partial trace.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: RunTrace,
    pub resolved: ResolvedSolver,
    /// `Φ − Φ*` of the unregularized problem at the final point.
    pub original_gap: Option<f64>,
    pub original_grad_norm: Option<f64>,
}

impl RunResult {
    pub fn diverged(&self) -> bool {
        matches!(self.trace.status, TerminalStatus::Diverged { .. })
    }

    pub fn summary_row(&self) -> String {
        let t = &self.trace;
        let last = t.last();
        let status = match &t.status {
            TerminalStatus::Completed => "completed".to_string(),
            TerminalStatus::ReachedTarget { k } => format!("reached_target@{k}"),
            TerminalStatus::Diverged { iteration, .. } => format!("diverged@{iteration}"),
        };
        format!(
            "{},{},{},{},{},{:?},{},{:?},{},{},{},{}",
            t.algorithm,
            status,
            last.k,
            fmt_opt(last.phi_gap),
            fmt_opt(last.grad_norm),
            last.counters.complexity(),
            fmt_opt(t.complexity_to(self.resolved.solver_eps)),
            self.resolved.l_phi,
            self.resolved.n,
            self.resolved.m,
            fmt_opt(self.original_gap),
            fmt_opt(self.original_grad_norm),
        )
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn solver_err(e: SolverError) -> BenchError {
    match e {
        SolverError::Config(m) => BenchError::Config(format!("solver: {m}")),
        other => BenchError::Numeric(other.to_string()),
    }
}

fn l_phi_for<O: BilevelOracle + ?Sized>(oracle: &O, spec: &SolverSpec) -> Result<(f64, String), BenchError> {
    if let Some(l) = spec.l_phi {
        return Ok((l, "given".into()));
    }
    let c = oracle.constants();
    let (inputs, name) = match spec.l_phi_regime {
        RegimeSpec::QuadraticG => (LPhiInputs::QuadraticG, "quadratic_g"),
        RegimeSpec::BoundedGradient => (
            LPhiInputs::BoundedGradient { u: spec.u.ok_or_else(|| BenchError::Config("solver.u: required".into()))? },
            "bounded_gradient",
        ),
        RegimeSpec::General => (LPhiInputs::general_from_exact(oracle, spec.eps).map_err(solver_err)?, "general"),
    };
    Ok((l_phi_estimate(c, &inputs).map_err(solver_err)?, name.into()))
}

struct Plan {
    l_phi: f64,
    l_phi_source: String,
    solver_eps: f64,
    tau_cost: f64,
    regularization: Option<ResolvedRegularization>,
}

fn dispatch<O: BilevelOracle + ?Sized>(oracle: &O, spec: &SolverSpec, plan: Plan) -> Result<RunResult, BenchError> {
    let c = *oracle.constants();
    let mu_x = c.mu_x;
    let needs_auto = spec.n == StepBudget::Auto || spec.m == StepBudget::Auto;
    let inner_budget = if needs_auto {
        if !(mu_x > 0.0) {
            return Err(BenchError::Config(
                "solver.n/m: \"auto\" needs mu_x > 0; give fixed budgets or regularize".into(),
            ));
        }
        Some(auto_inner_budget(oracle, plan.solver_eps, plan.l_phi, mu_x).map_err(solver_err)?)
    } else {
        None
    };
    let pick = |b: StepBudget, auto: Option<usize>| match b {
        StepBudget::Fixed(v) => v,
        StepBudget::Auto => auto.unwrap_or(1),
    };
    let n = pick(spec.n, inner_budget.map(|b| b.n));
    let m = pick(spec.m, inner_budget.map(|b| b.m));
    let agd = AgdConfig::from_constants(n, &c).map_err(|e| BenchError::Config(format!("solver.n: {e}")))?;
    let hb = HeavyBallConfig::from_constants(m, &c).map_err(|e| BenchError::Config(format!("solver.m: {e}")))?;
    let options = RunOptions { tau_cost: plan.tau_cost, stop_at_eps: spec.stop_at_eps, ..RunOptions::default() };
    let eps = plan.solver_eps;
    let mut resolved = ResolvedSolver {
        algorithm: spec.algorithm,
        k: spec.k,
        n,
        m,
        eps: spec.eps,
        solver_eps: eps,
        tau_cost: plan.tau_cost,
        l_phi: plan.l_phi,
        l_phi_source: plan.l_phi_source,
        mu_x,
        kappa_y: c.kappa_y(),
        stepsize: None,
        alpha: None,
        u: None,
        warm_start: spec.warm_start,
        stop_at_eps: spec.stop_at_eps,
        regularization: plan.regularization,
        inner_budget,
        agd,
        hb,
    };
    let outcome = match spec.algorithm {
        Algorithm::Accbio => accbio(oracle, &AccBiOConfig { k: spec.k, l_phi: plan.l_phi, mu_x, agd, hb, eps, options }),
        Algorithm::AccbioBg => {
            let alpha = spec.alpha.unwrap_or(AccBiOBGConfig::alpha_for(plan.l_phi));
            resolved.alpha = Some(alpha);
            resolved.u = spec.u;
            let cfg = AccBiOBGConfig { k: spec.k, alpha, mu_x, agd, hb, u: spec.u, eps, warm_start: spec.warm_start, options };
            accbio_bg(oracle, &cfg)
        }
        Algorithm::BaselineAidGd => {
            let stepsize = spec.stepsize.unwrap_or(1.0 / plan.l_phi);
            resolved.stepsize = Some(stepsize);
            baseline_aid_gd(oracle, &BaselineConfig { k: spec.k, stepsize, agd, hb, eps, options })
        }
    };
    let trace = match outcome {
        Ok(t) => t,
        Err(SolverError::Diverged { partial, .. }) => *partial,
        Err(e) => return Err(solver_err(e)),
    };
    Ok(RunResult { trace, resolved, original_gap: None, original_grad_norm: None })
}

fn radius_for(instance: &BuiltInstance, spec: RadiusSpec) -> Result<f64, BenchError> {
    match (spec, instance) {
        (RadiusSpec::Value(r), _) => Ok(r),
        (RadiusSpec::Rule(rule), BuiltInstance::Csc(i)) => Ok(match rule {
            RadiusRule::BSquared => i.b_scale * i.b_scale,
            RadiusRule::B => i.b_scale,
        }),
        (RadiusSpec::Rule(_), _) => {
            Err(BenchError::Config("solver.regularize.r: radius rules need the csc instance; give a number".into()))
        }
    }
}

/// Resolve every parameter and run the configured solver on `instance`.
pub fn execute(instance: &BuiltInstance, spec: &SolverSpec) -> Result<RunResult, BenchError> {
    let base = instance.oracle();
    let tau_cost = spec.tau_cost.unwrap_or(1.0);
    let (l_phi, l_phi_source) = l_phi_for(base, spec)?;
    let Some(reg) = spec.regularize else {
        let plan = Plan { l_phi, l_phi_source, solver_eps: spec.eps, tau_cost, regularization: None };
        return dispatch(base, spec, plan);
    };
    let r = radius_for(instance, reg.r)?;
    let weight = spec.eps / r;
    let solver_eps = match reg.criterion {
        Criterion::Gap => spec.eps / 2.0,
        Criterion::GradNorm => spec.eps * spec.eps / (4.0 * l_phi + 8.0 * spec.eps / r),
    };
    let wrapped = Regularized::with_weight(base, weight);
    let plan = Plan {
        l_phi: l_phi + weight,
        l_phi_source,
        solver_eps,
        tau_cost,
        regularization: Some(ResolvedRegularization { r, weight, criterion: reg.criterion }),
    };
    let mut result = dispatch(&wrapped, spec, plan)?;
    let x = &result.trace.final_point;
    if let Some(ex) = base.exact() {
        result.original_gap = ex.phi_gap(x).ok();
        result.original_grad_norm = exact_hypergradient(base, x).ok().map(|g| g.norm());
    }
    Ok(result)
}

fn fd_spot_check(oracle: &dyn BilevelOracle, seed: u64) -> Result<Option<FdSpotCheck>, BenchError> {
    if oracle.exact().is_none() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = oracle.dims().0;
    let point = RealVector::from_fn(p, |_| rng.random_range(-1.0..1.0));
    let err = finite_difference_check(oracle, &point, FD_STEP).map_err(|e| BenchError::Numeric(e.to_string()))?;
    if !(err <= FD_TOL) {
        return Err(BenchError::Numeric(format!("finite-difference spot check failed: relative error {err:e}")));
    }
    Ok(Some(FdSpotCheck { point, step: FD_STEP, max_rel_error: err }))
}

fn run_into(cfg: &ExperimentConfig, out: &Path) -> Result<RunResult, BenchError> {
    let spec = cfg.solver()?;
    let instance = build_instance(&cfg.instance)?;
    let fd_check = fd_spot_check(instance.oracle(), cfg.seed)?;
    let result = execute(&instance, spec)?;
    let resolved = ResolvedConfig { config: cfg.clone(), solver: result.resolved.clone(), fd_check };
    write_atomic(&out.join("trace.csv"), result.trace.to_csv().as_bytes())?;
    write_atomic(&out.join("instance.json"), instance.document_json().as_bytes())?;
    let meta = serde_json::to_string_pretty(&resolved).expect("serializable");
    write_atomic(&out.join("resolved_config.json"), meta.as_bytes())?;
    let summary = format!("{SUMMARY_CSV_HEADER}\n{}\n", result.summary_row());
    write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
    Ok(result)
}

fn diverged_error(result: &RunResult) -> Option<BenchError> {
    match &result.trace.status {
        TerminalStatus::Diverged { iteration, reason } => {
            Some(BenchError::Numeric(format!("diverged at iteration {iteration}: {reason}; partial trace kept")))
        }
        _ => None,
    }
}

/// Run one experiment and write its artifacts. A divergence still writes
/// the partial trace before returning an error.
pub fn run_experiment(cfg: &ExperimentConfig, ov: &Overrides) -> Result<(RunResult, PathBuf), BenchError> {
    let (cfg, out) = ov.apply(cfg)?;
    let result = run_into(&cfg, &out)?;
    match diverged_error(&result) {
        Some(e) => Err(e),
        None => Ok((result, out)),
    }
}

/// Least-squares line `y = slope·x + intercept` with the largest relative
/// deviation of the data from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub max_rel_residual: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let max_rel_residual = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| ((slope * x + intercept) - y).abs() / y.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    Some(LineFit { slope, intercept, max_rel_residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis_value: f64,
    pub complexity_to_eps: Option<f64>,
    pub final_gap: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    /// `log(complexity)` against `log(axis value)`.
    pub loglog_fit: Option<LineFit>,
    /// `complexity` against `log(axis value)`.
    pub semilog_fit: Option<LineFit>,
    pub failures: usize,
    pub unreached: usize,
}

fn point_config(cfg: &ExperimentConfig, axis: SweepAxis, v: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.sweep = None;
    match axis {
        SweepAxis::KappaY => c.instance.kappa_y = Some(v),
        SweepAxis::Eps => {
            if let Some(s) = c.solver.as_mut() {
                s.eps = v;
            }
        }
        SweepAxis::D => c.instance.d = Some(v as usize),
    }
    c
}

/// One run per grid value, in a pool of `jobs` workers, each into its own
/// `point_<i>` directory.
pub fn sweep(cfg: &ExperimentConfig, ov: &Overrides) -> Result<(SweepMeta, PathBuf), BenchError> {
    let (cfg, out) = ov.apply(cfg)?;
    let grid = cfg.sweep.clone().ok_or_else(|| BenchError::Config("sweep: missing".into()))?;
    cfg.solver()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| BenchError::Numeric(format!("worker pool: {e}")))?;
    let results: Vec<Result<RunResult, BenchError>> = pool.install(|| {
        grid.values
            .par_iter()
            .enumerate()
            .map(|(i, &v)| {
                let pc = point_config(&cfg, grid.axis, v);
                pc.validate_common()?;
                let r = run_into(&pc, &out.join(format!("point_{i}")))?;
                match diverged_error(&r) {
                    Some(e) => Err(e),
                    None => Ok(r),
                }
            })
            .collect()
    });
    let eps = cfg.solver()?.eps;
    let mut points = Vec::with_capacity(results.len());
    let mut csv = format!("{SWEEP_CSV_HEADER}\n");
    let mut first_error = None;
    for (&v, r) in grid.values.iter().zip(&results) {
        let point = match r {
            Ok(r) => {
                let gap = r.original_gap.or(r.trace.final_gap());
                let solver_eps = r.resolved.solver_eps;
                let complexity = r.trace.complexity_to(solver_eps.min(eps));
                SweepPoint { axis_value: v, complexity_to_eps: complexity, final_gap: gap, error: None }
            }
            Err(e) => {
                first_error.get_or_insert_with(|| e.clone());
                SweepPoint { axis_value: v, complexity_to_eps: None, final_gap: None, error: Some(e.to_string()) }
            }
        };
        if point.error.is_some() {
            let _ = writeln!(csv, "{v:?},failed,failed");
        } else {
            let _ = writeln!(csv, "{v:?},{},{}", fmt_opt(point.complexity_to_eps), fmt_opt(point.final_gap));
        }
        points.push(point);
    }
    let reached: Vec<(f64, f64)> =
        points.iter().filter_map(|p| p.complexity_to_eps.map(|c| (p.axis_value, c))).collect();
    let lx: Vec<f64> = reached.iter().map(|(v, _)| v.ln()).collect();
    let ly: Vec<f64> = reached.iter().map(|(_, c)| c.ln()).collect();
    let cy: Vec<f64> = reached.iter().map(|(_, c)| *c).collect();
    let failures = points.iter().filter(|p| p.error.is_some()).count();
    let meta = SweepMeta {
        axis: grid.axis,
        loglog_fit: fit_line(&lx, &ly),
        semilog_fit: fit_line(&lx, &cy),
        failures,
        unreached: points.len() - failures - reached.len(),
        points,
    };
    write_atomic(&out.join("sweep_summary.csv"), csv.as_bytes())?;
    let meta_json = serde_json::to_string_pretty(&meta).expect("serializable");
    write_atomic(&out.join("sweep_meta.json"), meta_json.as_bytes())?;
    if failures == meta.points.len() {
        return Err(first_error.unwrap_or_else(|| BenchError::Numeric("every grid point failed".into())));
    }
    Ok((meta, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub pass: bool,
    pub failed: Vec<String>,
    pub items: Vec<CampaignItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignItem {
    pub label: String,
    pub report: LowerBoundReport,
}

impl CampaignReport {
    fn push(&mut self, label: String, report: LowerBoundReport) {
        if !report.pass {
            self.failed.push(label.clone());
        }
        self.pass = self.failed.is_empty();
        self.items.push(CampaignItem { label, report });
    }
}

fn lb_err(e: impl std::fmt::Display) -> BenchError {
    BenchError::Numeric(e.to_string())
}

fn sim_algorithm(a: Algorithm) -> SimAlgorithm<'static> {
    match a {
        Algorithm::BaselineAidGd => SimAlgorithm::Baseline { stepsize: None },
        Algorithm::Accbio => SimAlgorithm::AccBiO { l_phi: None, mu_x: None },
        Algorithm::AccbioBg => SimAlgorithm::AccBiOBG { alpha: None, mu_x: None, warm_start: true },
    }
}

fn corrupted(inst: &ScscInstance) -> Result<ScscInstance, BenchError> {
    let mut doc = inst.document();
    let mut bt = doc.vectors.b_tilde.clone().into_vec();
    bt[2] += 0.1 * bt[0].abs().max(1.0);
    doc.vectors.b_tilde = RealVector::new(bt).map_err(lb_err)?;
    ScscInstance::from_document(&doc).map_err(lb_err)
}

fn scsc_battery(c: SmoothnessConstants, b: &ScscBattery, report: &mut CampaignReport) -> Result<(), BenchError> {
    for &d in &b.certificate_dims {
        let mut inst = build_scsc(d, c, None).map_err(lb_err)?;
        let mut label = format!("scsc/certificate/d={d}");
        if b.corrupt_b_tilde {
            inst = corrupted(&inst)?;
            label.push_str("/corrupted");
        }
        report.push(label, verify_certificate(&inst).map_err(lb_err)?);
    }
    let probe = build_scsc(8, c, None).map_err(lb_err)?;
    let m = probe.support_cap(&b.budgets);
    let d = match b.d {
        Some(d) => d,
        None => probe.feasible_dimension(m).map_err(lb_err)?,
    };
    let inst = build_scsc(d, c, None).map_err(lb_err)?;
    for &a in &b.algorithms {
        let (x, profile) = simulate_on_instance(&inst, sim_algorithm(a), b.budgets).map_err(lb_err)?;
        let name = profile.algorithm.clone();
        report.push(format!("scsc/{name}/support"), verify_support_cap(&profile, &inst));
        report.push(format!("scsc/{name}/gap_floor"), verify_gap_floor(&inst, &x, m).map_err(lb_err)?);
    }
    Ok(())
}

fn csc_battery(c: SmoothnessConstants, b: &CscBattery, report: &mut CampaignReport) -> Result<(), BenchError> {
    let inst = build_csc(b.d, c, b.b_scale).map_err(lb_err)?;
    let scale = inst.b_tilde.norm();
    let grad = exact_hypergradient(&inst.oracle, &inst.x_star).map_err(lb_err)?.norm();
    let mut base = LowerBoundReport { instance: "csc".into(), d: b.d, pass: true, ..Default::default() };
    let add = |r: &mut LowerBoundReport, name: &str, pass: bool, detail: String| {
        r.checks.push(bilevel_core::lower_bound::Check { name: name.into(), pass, detail });
        r.pass = r.checks.iter().all(|c| c.pass);
    };
    add(&mut base, "minimizer_gradient", grad <= 1e-9 * scale, format!("{grad:e} vs {:e}", 1e-9 * scale));
    let (residual, floor) = csc_grad_floor_verify(&inst).map_err(lb_err)?;
    add(&mut base, "constrained_floor", residual >= floor, format!("constrained minimum {residual:e} vs floor {floor:e}"));
    let rs = csc_rstar(&inst.constants, b.b_scale, b.rstar_eps).map_err(lb_err)?;
    let (lin, rhs) = csc_rstar_equation(&inst.constants, b.b_scale, b.rstar_eps);
    let r = rs.r_star;
    let rel = (r.powi(4) + lin * r - rhs).abs() / rhs.max(f64::MIN_POSITIVE);
    add(&mut base, "rstar_residual", rel <= 1e-10, format!("r* = {r:e}, relative residual {rel:e}"));
    base.grad_floor = Some(floor);
    report.push("csc/instance".into(), base);

    let m = inst.support_cap(&b.budgets);
    let (x, profile) =
        simulate_on_instance(&inst, SimAlgorithm::Baseline { stepsize: None }, b.budgets).map_err(lb_err)?;
    report.push("csc/baseline_aid_gd/support".into(), verify_support_cap(&profile, &inst));
    report.push("csc/baseline_aid_gd/grad_floor".into(), verify_grad_floor(&inst, &x, m).map_err(lb_err)?);
    Ok(())
}

/// Run the configured lower-bound batteries and write
/// `lower_bound_report.json`. Any failing item is a verification error.
pub fn verify_lower_bounds(cfg: &ExperimentConfig, ov: &Overrides) -> Result<(CampaignReport, PathBuf), BenchError> {
    let (cfg, out) = ov.apply(cfg)?;
    let lb = cfg.lower_bound.as_ref().ok_or_else(|| BenchError::Config("lower_bound: missing".into()))?;
    if lb.scsc.is_none() && lb.csc.is_none() {
        return Err(BenchError::Config("lower_bound: give an scsc or csc battery".into()));
    }
    if !matches!(cfg.instance.kind, InstanceKind::Scsc | InstanceKind::Csc) {
        return Err(BenchError::Config("instance.kind: lower-bound campaigns use scsc or csc".into()));
    }
    let c = cfg.instance.resolved_constants();
    let mut report = CampaignReport { pass: true, failed: Vec::new(), items: Vec::new() };
    if let Some(b) = &lb.scsc {
        b.budgets.inner_steps().map_err(|e| BenchError::Config(format!("lower_bound.scsc.budgets: {e}")))?;
        scsc_battery(c, b, &mut report)?;
    }
    if let Some(b) = &lb.csc {
        b.budgets.inner_steps().map_err(|e| BenchError::Config(format!("lower_bound.csc.budgets: {e}")))?;
        csc_battery(c, b, &mut report)?;
    }
    let json = serde_json::to_string_pretty(&report).expect("serializable");
    write_atomic(&out.join("lower_bound_report.json"), json.as_bytes())?;
    if !report.pass {
        return Err(BenchError::Verification(format!("failed items: {}", report.failed.join(", "))));
    }
    Ok((report, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub trace: PathBuf,
    pub rows: usize,
    pub status: String,
    pub final_gap: Option<f64>,
    pub final_grad_norm: Option<f64>,
    pub complexity: f64,
}

fn find_traces(dir: &Path, found: &mut Vec<PathBuf>) -> Result<(), BenchError> {
    let entries = std::fs::read_dir(dir).map_err(|e| BenchError::Io(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_traces(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "trace.csv") {
            found.push(p);
        }
    }
    Ok(())
}

fn trace_status(trace: &Path) -> (f64, String) {
    let meta = trace.with_file_name("resolved_config.json");
    let summary = trace.with_file_name("summary.csv");
    let tau = std::fs::read_to_string(meta)
        .ok()
        .and_then(|t| serde_json::from_str::<ResolvedConfig>(&t).ok())
        .map(|r| r.solver.tau_cost)
        .unwrap_or(1.0);
    let status = std::fs::read_to_string(summary)
        .ok()
        .and_then(|t| t.lines().nth(1).and_then(|l| l.split(',').nth(1)).map(str::to_string))
        .unwrap_or_default();
    (tau, status)
}

/// Tabulate every `trace.csv` under `dir` into `report.csv`.
pub fn report(dir: &Path) -> Result<Vec<ReportRow>, BenchError> {
    let mut traces = Vec::new();
    find_traces(dir, &mut traces)?;
    let mut rows = Vec::with_capacity(traces.len());
    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    for t in traces {
        let text = std::fs::read_to_string(&t).map_err(|e| BenchError::Io(format!("{}: {e}", t.display())))?;
        let (tau, status) = trace_status(&t);
        let records =
            RunTrace::records_from_csv(&text, tau).map_err(|e| BenchError::Numeric(format!("{}: {e}", t.display())))?;
        let Some(last) = records.last() else { continue };
        let rel = t.strip_prefix(dir).unwrap_or(&t).to_path_buf();
        let row = ReportRow {
            trace: rel,
            rows: records.len(),
            status,
            final_gap: last.phi_gap,
            final_grad_norm: last.grad_norm,
            complexity: last.counters.complexity(),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{:?}",
            row.trace.display(),
            row.rows,
            row.status,
            fmt_opt(row.final_gap),
            fmt_opt(row.final_grad_norm),
            row.complexity
        );
        rows.push(row);
    }
    write_atomic(&dir.join("report.csv"), csv.as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_recovers_slope() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let f = fit_line(&xs, &ys).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!(f.max_rel_residual < 1e-12);
        assert!(fit_line(&[1.0], &[1.0]).is_none());
        assert!(fit_line(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }

    #[test]
    fn decoupled_run_resolves_auto_budgets() {
        let cfg = ExperimentConfig::from_json(
            r#"{"instance": {"kind": "decoupled"}, "solver": {"algorithm": "accbio", "k": 10, "eps": 1e-6}}"#,
        )
        .unwrap();
        let inst = build_instance(&cfg.instance).unwrap();
        let r = execute(&inst, cfg.solver().unwrap()).unwrap();
        assert_eq!(r.trace.records.len(), 11);
        assert!(r.resolved.inner_budget.is_some());
        assert_eq!(r.resolved.n, r.resolved.inner_budget.unwrap().n);
    }

    #[test]
    fn auto_budget_needs_strong_convexity() {
        let cfg = ExperimentConfig::from_json(
            r#"{"instance": {"kind": "csc", "d": 12}, "solver": {"algorithm": "baseline_aid_gd", "k": 3, "eps": 1e-3}}"#,
        )
        .unwrap();
        let inst = build_instance(&cfg.instance).unwrap();
        let err = execute(&inst, cfg.solver().unwrap()).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{err}");
    }
}
