//! Outer-loop solvers, smoothness estimates and the convex regularization
//! wrapper.

use std::fmt::Write as _;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypergrad::{
    aid_error_coefficients, aid_estimate, AgdConfig, BoundInputs, HeavyBallConfig, HypergradError,
    HypergradientEstimate,
};
use crate::linalg::{DenseFactor, LinalgConfig, RealVector};
use crate::oracle::{
    counted, exact_hypergradient, BilevelOracle, CounterHandle, ExactSurface, OracleCounters, OracleError,
    SmoothnessConstants,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String, partial: Box<RunTrace> },
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Settings shared by every outer solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Weight of Jacobian- and Hessian-vector products in the complexity.
    pub tau_cost: f64,
    /// Stop as soon as the recorded gap reaches `eps`.
    pub stop_at_eps: bool,
    /// Abort when the gap exceeds this multiple of the initial gap.
    pub divergence_factor: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { tau_cost: 1.0, stop_at_eps: false, divergence_factor: 1e6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccBiOConfig {
    pub k: usize,
    pub l_phi: f64,
    pub mu_x: f64,
    pub agd: AgdConfig,
    pub hb: HeavyBallConfig,
    pub eps: f64,
    #[serde(default)]
    pub options: RunOptions,
}

impl AccBiOConfig {
    pub fn kappa_x(&self) -> f64 {
        self.l_phi / self.mu_x
    }

    /// `(√κ_x−1)/(√κ_x+1)`
    pub fn momentum(&self) -> f64 {
        let s = self.kappa_x().sqrt();
        (s - 1.0) / (s + 1.0)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.mu_x > 0.0 && self.l_phi >= self.mu_x && self.l_phi.is_finite()) {
            return Err(SolverError::Config(format!("need l_phi >= mu_x > 0, got l_phi = {}, mu_x = {}", self.l_phi, self.mu_x)));
        }
        if self.k == 0 {
            return Err(SolverError::Config("K must be at least 1".into()));
        }
        validate_common(self.eps, &self.options)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccBiOBGConfig {
    pub k: usize,
    pub alpha: f64,
    pub mu_x: f64,
    pub agd: AgdConfig,
    pub hb: HeavyBallConfig,
    /// Gradient bound of the outer function in `y`; carried for the record.
    #[serde(default)]
    pub u: Option<f64>,
    pub eps: f64,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    #[serde(default)]
    pub options: RunOptions,
}

fn default_true() -> bool {
    true
}

impl AccBiOBGConfig {
    /// Step `alpha = 1/(2·l_phi)`.
    pub fn alpha_for(l_phi: f64) -> f64 {
        0.5 / l_phi
    }

    pub fn eta(&self) -> f64 {
        let s = (self.alpha * self.mu_x).sqrt();
        s / (s + 2.0)
    }

    pub fn tau(&self) -> f64 {
        (self.alpha * self.mu_x).sqrt() / 2.0
    }

    pub fn beta(&self) -> f64 {
        (self.alpha / self.mu_x).sqrt()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.alpha > 0.0 && self.mu_x > 0.0 && self.alpha * self.mu_x <= 1.0) {
            return Err(SolverError::Config(format!(
                "need alpha, mu_x > 0 and alpha·mu_x <= 1, got alpha = {}, mu_x = {}",
                self.alpha, self.mu_x
            )));
        }
        if self.k == 0 {
            return Err(SolverError::Config("K must be at least 1".into()));
        }
        validate_common(self.eps, &self.options)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub k: usize,
    pub stepsize: f64,
    pub agd: AgdConfig,
    pub hb: HeavyBallConfig,
    pub eps: f64,
    #[serde(default)]
    pub options: RunOptions,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.stepsize > 0.0 && self.stepsize.is_finite()) {
            return Err(SolverError::Config(format!("stepsize must be positive, got {}", self.stepsize)));
        }
        validate_common(self.eps, &self.options)
    }
}

fn validate_common(eps: f64, options: &RunOptions) -> Result<(), SolverError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(SolverError::Config(format!("eps must be positive, got {eps}")));
    }
    if !(options.tau_cost >= 0.0 && options.tau_cost.is_finite()) {
        return Err(SolverError::Config(format!("tau_cost must be non-negative, got {}", options.tau_cost)));
    }
    if !(options.divergence_factor > 1.0) {
        return Err(SolverError::Config("divergence_factor must exceed 1".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradNormSource {
    /// `‖∇Φ‖` at the recorded point.
    Exact,
    /// `‖G_k‖` at the last query point.
    Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub phi_gap: Option<f64>,
    pub grad_norm: Option<f64>,
    pub hypergrad_error: Option<f64>,
    pub counters: OracleCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TerminalStatus {
    Completed,
    ReachedTarget { k: usize },
    Diverged { iteration: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub algorithm: String,
    pub grad_norm_source: GradNormSource,
    pub records: Vec<TraceRecord>,
    pub status: TerminalStatus,
    pub final_point: RealVector,
}

pub const TRACE_CSV_HEADER: &str = "k,phi_gap,grad_norm,hypergrad_error,n_G,n_J,n_H,complexity";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl RunTrace {
    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("a trace always holds the initial record")
    }

    pub fn final_gap(&self) -> Option<f64> {
        self.last().phi_gap
    }

    /// Complexity at the first record whose gap is at most `eps`.
    pub fn complexity_to(&self, eps: f64) -> Option<f64> {
        self.records.iter().find(|r| r.phi_gap.is_some_and(|g| g <= eps)).map(|r| r.counters.complexity())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let c = &r.counters;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:?}",
                r.k,
                opt_field(r.phi_gap),
                opt_field(r.grad_norm),
                opt_field(r.hypergrad_error),
                c.n_g,
                c.n_j,
                c.n_h,
                c.complexity()
            );
        }
        out
    }

    /// Parse the rows written by [`RunTrace::to_csv`].
    pub fn records_from_csv(text: &str, tau_cost: f64) -> Result<Vec<TraceRecord>, SolverError> {
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_CSV_HEADER) {
            return Err(SolverError::Config("trace CSV header mismatch".into()));
        }
        let bad = |line: usize, what: &str| SolverError::Config(format!("trace CSV line {}: bad {what}", line + 2));
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(i, "field count"));
            }
            let opt = |s: &str, what: &str| -> Result<Option<f64>, SolverError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(i, what))
                }
            };
            let int = |s: &str, what: &str| -> Result<u64, SolverError> { s.parse().map_err(|_| bad(i, what)) };
            records.push(TraceRecord {
                k: int(f[0], "k")? as usize,
                phi_gap: opt(f[1], "phi_gap")?,
                grad_norm: opt(f[2], "grad_norm")?,
                hypergrad_error: opt(f[3], "hypergrad_error")?,
                counters: OracleCounters { n_g: int(f[4], "n_G")?, n_j: int(f[5], "n_J")?, n_h: int(f[6], "n_H")?, tau_cost },
            });
        }
        Ok(records)
    }
}

/// Iterates exposed to an observer after each outer step.
#[derive(Debug)]
pub struct IterateView<'a> {
    pub k: usize,
    /// Every outer-variable sequence the solver maintains.
    pub points: &'a [&'a RealVector],
    /// Inner iterate used for the last hypergradient.
    pub inner: &'a RealVector,
}

pub type Observer<'a> = &'a mut dyn FnMut(&IterateView<'_>);

struct Recorder<'o> {
    algorithm: &'static str,
    exact: Option<&'o dyn ExactSurface>,
    has_phi_star: bool,
    handle: CounterHandle,
    records: Vec<TraceRecord>,
    initial_gap: Option<f64>,
    options: RunOptions,
    eps: f64,
}

impl<'o> Recorder<'o> {
    fn new<O: BilevelOracle + ?Sized>(
        algorithm: &'static str,
        oracle: &'o O,
        handle: CounterHandle,
        options: RunOptions,
        eps: f64,
    ) -> Self {
        let exact = oracle.exact();
        let has_phi_star = exact.is_some_and(|e| e.phi_minimizer().is_ok());
        Self { algorithm, exact, has_phi_star, handle, records: Vec::new(), initial_gap: None, options, eps }
    }

    fn source(&self) -> GradNormSource {
        if self.exact.is_some() {
            GradNormSource::Exact
        } else {
            GradNormSource::Estimate
        }
    }

    /// Error of an estimate taken at `query`.
    fn hypergrad_error(&self, query: &RealVector, est: &HypergradientEstimate) -> Result<Option<f64>, SolverError> {
        match self.exact {
            Some(ex) => Ok(Some((&est.g - &exact_hypergradient(ex, query)?).norm())),
            None => Ok(None),
        }
    }

    /// Append a record for `point`; `Some(status)` ends the run.
    fn push(
        &mut self,
        k: usize,
        point: &RealVector,
        estimate: Option<&RealVector>,
        hypergrad_error: Option<f64>,
    ) -> Result<Option<TerminalStatus>, SolverError> {
        let phi_gap = match self.exact {
            Some(ex) if self.has_phi_star => Some(ex.phi_gap(point)?),
            _ => None,
        };
        let grad_norm = match self.exact {
            Some(ex) => Some(exact_hypergradient(ex, point)?.norm()),
            None => estimate.map(RealVector::norm),
        };
        self.records.push(TraceRecord { k, phi_gap, grad_norm, hypergrad_error, counters: self.handle.snapshot() });
        if k == 0 {
            self.initial_gap = phi_gap;
            return Ok(None);
        }
        if !point.is_finite() {
            return Ok(Some(TerminalStatus::Diverged { iteration: k, reason: "non-finite iterate".into() }));
        }
        if let (Some(gap), Some(g0)) = (phi_gap, self.initial_gap) {
            if !gap.is_finite() || (g0 > 0.0 && gap > self.options.divergence_factor * g0) {
                return Ok(Some(TerminalStatus::Diverged {
                    iteration: k,
                    reason: format!("gap {gap:e} exceeds {:e} times the initial gap {g0:e}", self.options.divergence_factor),
                }));
            }
            if self.options.stop_at_eps && gap <= self.eps {
                return Ok(Some(TerminalStatus::ReachedTarget { k }));
            }
        }
        Ok(None)
    }

    fn finish(self, status: TerminalStatus, final_point: RealVector) -> Result<RunTrace, SolverError> {
        let trace = RunTrace {
            algorithm: self.algorithm.to_string(),
            grad_norm_source: self.source(),
            records: self.records,
            status: status.clone(),
            final_point,
        };
        match status {
            TerminalStatus::Diverged { iteration, reason } => {
                Err(SolverError::Diverged { iteration, reason, partial: Box::new(trace) })
            }
            _ => Ok(trace),
        }
    }

    fn estimate<O: BilevelOracle + ?Sized>(
        &mut self,
        oracle: &O,
        k: usize,
        x: &RealVector,
        y0: &RealVector,
        agd: &AgdConfig,
        hb: &HeavyBallConfig,
    ) -> Result<Result<HypergradientEstimate, TerminalStatus>, SolverError> {
        match aid_estimate(oracle, x, y0, agd, hb) {
            Ok(est) => Ok(Ok(est)),
            Err(HypergradError::Divergence { stage, step }) => Ok(Err(TerminalStatus::Diverged {
                iteration: k + 1,
                reason: format!("{stage} produced a non-finite iterate at step {step}"),
            })),
            Err(HypergradError::Oracle(e)) => Err(e.into()),
            Err(HypergradError::Config(e)) => Err(SolverError::Config(e)),
        }
    }
}

pub fn accbio<O: BilevelOracle + ?Sized>(oracle: &O, cfg: &AccBiOConfig) -> Result<RunTrace, SolverError> {
    accbio_observed(oracle, cfg, &mut |_| {})
}

/// Accelerated outer loop with a fresh inner solve from `y = 0` at every
/// step. Records the `z` sequence.
pub fn accbio_observed<O: BilevelOracle + ?Sized>(
    oracle: &O,
    cfg: &AccBiOConfig,
    observer: Observer<'_>,
) -> Result<RunTrace, SolverError> {
    cfg.validate()?;
    let (p, q) = oracle.dims();
    let (co, handle) = counted(oracle, cfg.options.tau_cost);
    let mut rec = Recorder::new("accbio", oracle, handle, cfg.options, cfg.eps);
    let m = cfg.momentum();
    let y0 = RealVector::zeros(q);
    let mut x = RealVector::zeros(p);
    let mut z = RealVector::zeros(p);
    rec.push(0, &z, None, None)?;
    for k in 0..cfg.k {
        let est = match rec.estimate(&co, k, &x, &y0, &cfg.agd, &cfg.hb)? {
            Ok(est) => est,
            Err(status) => return rec.finish(status, z),
        };
        let err = rec.hypergrad_error(&x, &est)?;
        let mut z_next = x.clone();
        z_next.axpy(-1.0 / cfg.l_phi, &est.g);
        let x_next = RealVector::lincomb(1.0 + m, &z_next, -m, &z);
        z = z_next;
        x = x_next;
        observer(&IterateView { k: k + 1, points: &[&x, &z], inner: &est.y_inner });
        if let Some(status) = rec.push(k + 1, &z, Some(&est.g), err)? {
            return rec.finish(status, z);
        }
    }
    rec.finish(TerminalStatus::Completed, z)
}

pub fn accbio_bg<O: BilevelOracle + ?Sized>(oracle: &O, cfg: &AccBiOBGConfig) -> Result<RunTrace, SolverError> {
    accbio_bg_observed(oracle, cfg, &mut |_| {})
}

/// Three-sequence accelerated loop with warm-started inner solves.
/// Records the `z` sequence.
pub fn accbio_bg_observed<O: BilevelOracle + ?Sized>(
    oracle: &O,
    cfg: &AccBiOBGConfig,
    observer: Observer<'_>,
) -> Result<RunTrace, SolverError> {
    cfg.validate()?;
    let (p, q) = oracle.dims();
    let (co, handle) = counted(oracle, cfg.options.tau_cost);
    let mut rec = Recorder::new("accbio_bg", oracle, handle, cfg.options, cfg.eps);
    let (eta, tau, beta) = (cfg.eta(), cfg.tau(), cfg.beta());
    let mut x = RealVector::zeros(p);
    let mut z = RealVector::zeros(p);
    let mut y = RealVector::zeros(q);
    rec.push(0, &z, None, None)?;
    for k in 0..cfg.k {
        let x_mid = RealVector::lincomb(eta, &x, 1.0 - eta, &z);
        let y0 = if cfg.warm_start { y.clone() } else { RealVector::zeros(q) };
        let est = match rec.estimate(&co, k, &x_mid, &y0, &cfg.agd, &cfg.hb)? {
            Ok(est) => est,
            Err(status) => return rec.finish(status, z),
        };
        let err = rec.hypergrad_error(&x_mid, &est)?;
        let mut x_next = RealVector::lincomb(tau, &x_mid, 1.0 - tau, &x);
        x_next.axpy(-beta, &est.g);
        let mut z_next = x_mid.clone();
        z_next.axpy(-cfg.alpha, &est.g);
        x = x_next;
        z = z_next;
        y = est.y_inner;
        observer(&IterateView { k: k + 1, points: &[&x, &x_mid, &z], inner: &y });
        if let Some(status) = rec.push(k + 1, &z, Some(&est.g), err)? {
            return rec.finish(status, z);
        }
    }
    rec.finish(TerminalStatus::Completed, z)
}

pub fn baseline_aid_gd<O: BilevelOracle + ?Sized>(oracle: &O, cfg: &BaselineConfig) -> Result<RunTrace, SolverError> {
    baseline_aid_gd_observed(oracle, cfg, &mut |_| {})
}

/// Plain gradient descent on Φ with AID hypergradients and cold inner
/// starts.
pub fn baseline_aid_gd_observed<O: BilevelOracle + ?Sized>(
    oracle: &O,
    cfg: &BaselineConfig,
    observer: Observer<'_>,
) -> Result<RunTrace, SolverError> {
    cfg.validate()?;
    let (p, q) = oracle.dims();
    let (co, handle) = counted(oracle, cfg.options.tau_cost);
    let mut rec = Recorder::new("baseline_aid_gd", oracle, handle, cfg.options, cfg.eps);
    let y0 = RealVector::zeros(q);
    let mut x = RealVector::zeros(p);
    rec.push(0, &x, None, None)?;
    for k in 0..cfg.k {
        let est = match rec.estimate(&co, k, &x, &y0, &cfg.agd, &cfg.hb)? {
            Ok(est) => est,
            Err(status) => return rec.finish(status, x),
        };
        let err = rec.hypergrad_error(&x, &est)?;
        x.axpy(-cfg.stepsize, &est.g);
        observer(&IterateView { k: k + 1, points: &[&x], inner: &est.y_inner });
        if let Some(status) = rec.push(k + 1, &x, Some(&est.g), err)? {
            return rec.finish(status, x);
        }
    }
    rec.finish(TerminalStatus::Completed, x)
}

/// Inputs for [`l_phi_estimate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum LPhiInputs {
    /// Inner function quadratic in `(x, y)`; Φ is globally smooth.
    QuadraticG,
    /// `‖∇_y f‖ ≤ u` everywhere.
    BoundedGradient { u: f64 },
    /// Path-dependent constant; needs data at the optimum.
    General { grad_y_f_at_opt: f64, x_star_norm: f64, phi_gap_at_zero: f64, eps: f64 },
}

impl LPhiInputs {
    /// General-regime inputs read off the exact surface.
    pub fn general_from_exact<O: BilevelOracle + ?Sized>(oracle: &O, eps: f64) -> Result<Self, SolverError> {
        let ex = oracle.exact().ok_or(OracleError::Capability("data at the optimum (exact surface)"))?;
        let (x_star, _) = ex.phi_minimizer()?;
        let y = ex.y_star(&x_star)?;
        let p = x_star.dim();
        Ok(Self::General {
            grad_y_f_at_opt: ex.grad_y_f(&x_star, &y).norm(),
            x_star_norm: x_star.norm(),
            phi_gap_at_zero: ex.phi_gap(&RealVector::zeros(p))?,
            eps,
        })
    }
}

/// Smoothness constant of Φ for the given regime.
pub fn l_phi_estimate(c: &SmoothnessConstants, inputs: &LPhiInputs) -> Result<f64, SolverError> {
    c.validate()?;
    let mu = c.mu_y;
    let quadratic = c.l_x + 2.0 * c.l_xy * c.ltil_xy / mu + c.l_y * c.ltil_xy * c.ltil_xy / (mu * mu);
    let third = c.ltil_xy * c.rho_yy / (mu * mu) + c.rho_xy / mu;
    let spread = 1.0 + c.ltil_xy / mu;
    match *inputs {
        LPhiInputs::QuadraticG => Ok(quadratic),
        LPhiInputs::BoundedGradient { u } => {
            if !(u >= 0.0 && u.is_finite()) {
                return Err(SolverError::Config(format!("gradient bound must be non-negative, got {u}")));
            }
            Ok(quadratic + u * third * spread)
        }
        LPhiInputs::General { grad_y_f_at_opt, x_star_norm, phi_gap_at_zero, eps } => {
            if !(c.mu_x > 0.0) {
                return Err(SolverError::Config("general regime needs mu_x > 0".into()));
            }
            let radius = (2.0 / c.mu_x * phi_gap_at_zero + x_star_norm * x_star_norm + eps / c.mu_x).sqrt();
            Ok(quadratic
                + third * spread * grad_y_f_at_opt
                + 3.0 * third * spread * (c.l_xy + c.l_y * c.ltil_xy / mu) * radius)
        }
    }
}

/// Resolved inner budgets for a target accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerBudget {
    pub n: usize,
    pub m: usize,
    /// Hypergradient accuracy the outer analysis asks for.
    pub target: f64,
    /// Error-bound prefactor over the region the iterates stay in.
    pub prefactor: f64,
    pub eps_inner: f64,
}

/// `N = M = ⌈2√κ_y·ln(1/eps_inner)⌉`, with `eps_inner` chosen so the AID
/// error bound meets `√(eps·l_phi)/(2√2·κ_x^{1/4})` anywhere within three
/// times the initial distance to the optimum. Without an exact surface the
/// prefactor is taken as 1.
pub fn auto_inner_budget<O: BilevelOracle + ?Sized>(
    oracle: &O,
    eps: f64,
    l_phi: f64,
    mu_x: f64,
) -> Result<InnerBudget, SolverError> {
    if !(eps > 0.0 && mu_x > 0.0 && l_phi >= mu_x) {
        return Err(SolverError::Config(format!("need eps > 0 and l_phi >= mu_x > 0, got {eps}, {l_phi}, {mu_x}")));
    }
    let c = oracle.constants();
    let kappa_x = l_phi / mu_x;
    let target = (eps * l_phi).sqrt() / (2.0 * 2f64.sqrt() * kappa_x.powf(0.25));
    let (p, q) = oracle.dims();
    let prefactor = match BoundInputs::from_exact(oracle, &RealVector::zeros(p), &RealVector::zeros(q)) {
        Some(mut inputs) => {
            let gap0 = oracle.exact().map(|e| e.phi_gap(&RealVector::zeros(p))).transpose()?.unwrap_or(0.0);
            inputs.dist_to_opt =
                3.0 * (2.0 / mu_x * gap0 + inputs.dist_to_opt * inputs.dist_to_opt + eps / mu_x).sqrt();
            let (a, b) = aid_error_coefficients(c, &inputs);
            (a + b).max(1.0)
        }
        None => 1.0,
    };
    let eps_inner = (target / prefactor).min(0.5);
    let steps = (2.0 * c.kappa_y().sqrt() * (1.0 / eps_inner).ln()).ceil().max(1.0) as usize;
    Ok(InnerBudget { n: steps, m: steps, target, prefactor, eps_inner })
}

type CachedMinimizer = Result<(RealVector, f64, DMatrix<f64>), OracleError>;

/// Oracle with `(eps/2R)‖x‖²` added to the outer function.
pub struct Regularized<'a, O: ?Sized> {
    inner: &'a O,
    weight: f64,
    constants: SmoothnessConstants,
    minimizer: OnceLock<CachedMinimizer>,
}

impl<O: ?Sized> std::fmt::Debug for Regularized<'_, O> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Regularized").field("weight", &self.weight).field("constants", &self.constants).finish()
    }
}

pub fn regularize_convex<O: BilevelOracle + ?Sized>(oracle: &O, eps: f64, r: f64) -> Result<Regularized<'_, O>, SolverError> {
    if !(eps > 0.0 && r > 0.0 && (eps / r).is_finite()) {
        return Err(SolverError::Config(format!("need eps, R > 0, got {eps}, {r}")));
    }
    Ok(Regularized::with_weight(oracle, eps / r))
}

impl<'a, O: BilevelOracle + ?Sized> Regularized<'a, O> {
    /// Add `(weight/2)‖x‖²`; a zero weight leaves the oracle unchanged.
    pub fn with_weight(inner: &'a O, weight: f64) -> Self {
        let base = *inner.constants();
        let constants = SmoothnessConstants { mu_x: base.mu_x + weight, l_x: base.l_x + weight, ..base };
        Self { inner, weight, constants, minimizer: OnceLock::new() }
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    fn minimizer(&self) -> Result<&(RealVector, f64, DMatrix<f64>), OracleError> {
        self.minimizer
            .get_or_init(|| {
                let ex = self.inner.exact().ok_or(OracleError::Capability("an exact surface"))?;
                let mut h = ex.phi_hessian().ok_or(OracleError::Capability("a quadratic Φ"))?;
                for i in 0..h.nrows() {
                    h[(i, i)] += self.weight;
                }
                let p = h.nrows();
                let grad0 = exact_hypergradient(ex, &RealVector::zeros(p))?;
                let x_star = -&DenseFactor::new(h.clone(), LinalgConfig::default())?.solve(&grad0)?;
                let value = self.phi(&x_star)?;
                Ok((x_star, value, h))
            })
            .as_ref()
            .map_err(Clone::clone)
    }
}

impl<O: BilevelOracle + ?Sized> BilevelOracle for Regularized<'_, O> {
    fn dims(&self) -> (usize, usize) {
        self.inner.dims()
    }

    fn constants(&self) -> &SmoothnessConstants {
        &self.constants
    }

    fn grad_x_f(&self, x: &RealVector, y: &RealVector) -> RealVector {
        let mut g = self.inner.grad_x_f(x, y);
        g.axpy(self.weight, x);
        g
    }

    fn grad_y_f(&self, x: &RealVector, y: &RealVector) -> RealVector {
        self.inner.grad_y_f(x, y)
    }

    fn grad_y_g(&self, x: &RealVector, y: &RealVector) -> RealVector {
        self.inner.grad_y_g(x, y)
    }

    fn hess_y_g_vec(&self, x: &RealVector, y: &RealVector, v: &RealVector) -> RealVector {
        self.inner.hess_y_g_vec(x, y, v)
    }

    fn jac_xy_g_vec(&self, x: &RealVector, y: &RealVector, v: &RealVector) -> RealVector {
        self.inner.jac_xy_g_vec(x, y, v)
    }

    fn exact(&self) -> Option<&dyn ExactSurface> {
        self.inner.exact().map(|_| self as &dyn ExactSurface)
    }

    fn gradient_bound(&self) -> Option<f64> {
        self.inner.gradient_bound()
    }
}

impl<O: BilevelOracle + ?Sized> ExactSurface for Regularized<'_, O> {
    fn y_star(&self, x: &RealVector) -> Result<RealVector, OracleError> {
        self.inner.exact().ok_or(OracleError::Capability("an exact surface"))?.y_star(x)
    }

    fn solve_hess_y_g(&self, x: &RealVector, y: &RealVector, rhs: &RealVector) -> Result<RealVector, OracleError> {
        self.inner.exact().ok_or(OracleError::Capability("an exact surface"))?.solve_hess_y_g(x, y, rhs)
    }

    fn phi(&self, x: &RealVector) -> Result<f64, OracleError> {
        let ex = self.inner.exact().ok_or(OracleError::Capability("an exact surface"))?;
        Ok(ex.phi(x)? + 0.5 * self.weight * x.dot(x))
    }

    fn phi_minimizer(&self) -> Result<(RealVector, f64), OracleError> {
        let (x, v, _) = self.minimizer()?;
        Ok((x.clone(), *v))
    }

    fn phi_hessian(&self) -> Option<DMatrix<f64>> {
        self.minimizer().ok().map(|(_, _, h)| h.clone())
    }

    fn phi_gap(&self, x: &RealVector) -> Result<f64, OracleError> {
        let (x_star, _, h) = self.minimizer()?;
        let e = (x - x_star).to_dvector();
        Ok(0.5 * e.dot(&(h * &e)))
    }
}
