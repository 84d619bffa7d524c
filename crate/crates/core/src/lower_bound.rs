//! Span-restricted simulation on the hard instances and checks of the
//! predicted support caps and floors.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypergrad::{AgdConfig, HeavyBallConfig};
use crate::linalg::{RealVector, StructuredOperator};
use crate::oracle::{exact_hypergradient, BilevelOracle, ExactSurface, OracleError, QuadraticBilevel, SmoothnessConstants};
use crate::solvers::{
    accbio_bg_observed, accbio_observed, baseline_aid_gd_observed, l_phi_estimate, AccBiOBGConfig, AccBiOConfig,
    BaselineConfig, IterateView, LPhiInputs, RunOptions, SolverError,
};
use crate::worst_case::{csc_support_cap, scsc_gap_floor, scsc_support_cap, CscInstance, ScscInstance, WorstCaseError};

pub const DEFAULT_TOL_ACTIVE: f64 = 1e-10;
pub const DEFAULT_TOL_SUPPORT: f64 = 1e-10;
pub const DEFAULT_SPAN_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LowerBoundError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dimension d = {d} is infeasible for M = {m}; need d >= {required}")]
    Infeasible { d: usize, m: usize, required: usize },
    #[error("invalid budgets: {0}")]
    Budget(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    WorstCase(#[from] WorstCaseError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// `(K, Q, T)`: total iterations, outer-variable updates, Hessian-vector
/// products per hypergradient. Each update gets `K / Q` inner steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub k: usize,
    pub q: usize,
    pub t: usize,
}

impl Budgets {
    pub fn inner_steps(&self) -> Result<usize, LowerBoundError> {
        if self.q == 0 {
            return Ok(0);
        }
        if self.k < self.q || !self.k.is_multiple_of(self.q) {
            return Err(LowerBoundError::Budget(format!("K = {} must be a positive multiple of Q = {}", self.k, self.q)));
        }
        Ok(self.k / self.q)
    }
}

/// Hard instance with a known zero-chain structure.
pub trait HardInstance {
    fn kind(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn oracle(&self) -> &QuadraticBilevel;
    /// Predicted support cap `M` for the budgets.
    fn support_cap(&self, budgets: &Budgets) -> usize;
    /// `Zb`, the vector every outer iterate is built from.
    fn seed_vector(&self) -> RealVector;
    /// `Z²`
    fn chain_operator(&self) -> StructuredOperator;
    fn require_feasible(&self, m: usize) -> Result<(), LowerBoundError>;
}

impl HardInstance for ScscInstance {
    fn kind(&self) -> &'static str {
        "scsc"
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn oracle(&self) -> &QuadraticBilevel {
        &self.oracle
    }

    fn support_cap(&self, b: &Budgets) -> usize {
        scsc_support_cap(b.k, b.q, b.t)
    }

    fn seed_vector(&self) -> RealVector {
        StructuredOperator::z_scsc(self.d).mul_vec(&self.b)
    }

    fn chain_operator(&self) -> StructuredOperator {
        StructuredOperator::power(StructuredOperator::z_scsc(self.d), 2)
    }

    fn require_feasible(&self, m: usize) -> Result<(), LowerBoundError> {
        let required = self.feasible_dimension(m)?;
        if self.d < required {
            return Err(LowerBoundError::Infeasible { d: self.d, m, required });
        }
        Ok(())
    }
}

impl HardInstance for CscInstance {
    fn kind(&self) -> &'static str {
        "csc"
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn oracle(&self) -> &QuadraticBilevel {
        &self.oracle
    }

    fn support_cap(&self, b: &Budgets) -> usize {
        csc_support_cap(b.k, b.q, b.t)
    }

    fn seed_vector(&self) -> RealVector {
        StructuredOperator::z_csc(self.d).mul_vec(&self.b)
    }

    fn chain_operator(&self) -> StructuredOperator {
        StructuredOperator::power(StructuredOperator::z_csc(self.d), 2)
    }

    fn require_feasible(&self, m: usize) -> Result<(), LowerBoundError> {
        if m + 3 > self.d {
            return Err(LowerBoundError::Infeasible { d: self.d, m, required: m + 3 });
        }
        Ok(())
    }
}

/// Largest 1-based index with `|v_i| > tol·‖v‖_∞`; 0 for the zero vector.
pub fn active_index(v: &RealVector, tol: f64) -> usize {
    let scale = v.norm_inf();
    if scale == 0.0 {
        return 0;
    }
    v.as_slice().iter().rposition(|a| a.abs() > tol * scale).map_or(0, |i| i + 1)
}

/// `max_{i > m} |v_i| / ‖v‖_∞`, 0 for the zero vector.
pub fn tail_ratio(v: &RealVector, m: usize) -> f64 {
    let scale = v.norm_inf();
    if scale == 0.0 {
        return 0.0;
    }
    v.as_slice().iter().skip(m).fold(0.0f64, |acc, a| acc.max(a.abs())) / scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportProfile {
    pub algorithm: String,
    pub budgets: Budgets,
    /// Inner steps per outer update used for the run.
    pub inner_steps: usize,
    pub tol_active: f64,
    /// Active index of outer-space vectors, per oracle response.
    pub response_x_index: Vec<usize>,
    /// Active index of inner-space vectors, per oracle response.
    pub response_y_index: Vec<usize>,
    /// Largest active index over every outer sequence, per outer step.
    pub x_index: Vec<usize>,
    /// Active index of the inner iterate, per outer step.
    pub y_index: Vec<usize>,
    #[serde(skip)]
    pub x_iterates: Vec<RealVector>,
}

impl SupportProfile {
    fn new(algorithm: &str, budgets: Budgets, inner_steps: usize, tol_active: f64) -> Self {
        Self {
            algorithm: algorithm.into(),
            budgets,
            inner_steps,
            tol_active,
            response_x_index: Vec::new(),
            response_y_index: Vec::new(),
            x_index: vec![0],
            y_index: vec![0],
            x_iterates: Vec::new(),
        }
    }

    pub fn max_x_index(&self) -> usize {
        self.x_index.iter().chain(&self.response_x_index).copied().max().unwrap_or(0)
    }

    fn observe(&mut self, view: &IterateView<'_>) {
        let idx = view.points.iter().map(|p| active_index(p, self.tol_active)).max().unwrap_or(0);
        self.x_index.push(idx);
        self.y_index.push(active_index(view.inner, self.tol_active));
        self.x_iterates.extend(view.points.iter().map(|p| (*p).clone()));
    }
}

/// Oracle wrapper logging the active index of every response.
struct Recording<'a> {
    inner: &'a QuadraticBilevel,
    tol: f64,
    x_log: RefCell<Vec<usize>>,
    y_log: RefCell<Vec<usize>>,
}

impl Recording<'_> {
    fn x(&self, v: RealVector) -> RealVector {
        self.x_log.borrow_mut().push(active_index(&v, self.tol));
        v
    }

    fn y(&self, v: RealVector) -> RealVector {
        self.y_log.borrow_mut().push(active_index(&v, self.tol));
        v
    }
}

impl BilevelOracle for Recording<'_> {
    fn dims(&self) -> (usize, usize) {
        self.inner.dims()
    }

    fn constants(&self) -> &SmoothnessConstants {
        self.inner.constants()
    }

    fn grad_x_f(&self, x: &RealVector, y: &RealVector) -> RealVector {
        self.x(self.inner.grad_x_f(x, y))
    }

    fn grad_y_f(&self, x: &RealVector, y: &RealVector) -> RealVector {
        self.y(self.inner.grad_y_f(x, y))
    }

    fn grad_y_g(&self, x: &RealVector, y: &RealVector) -> RealVector {
        self.y(self.inner.grad_y_g(x, y))
    }

    fn hess_y_g_vec(&self, x: &RealVector, y: &RealVector, v: &RealVector) -> RealVector {
        self.y(self.inner.hess_y_g_vec(x, y, v))
    }

    fn jac_xy_g_vec(&self, x: &RealVector, y: &RealVector, v: &RealVector) -> RealVector {
        self.x(self.inner.jac_xy_g_vec(x, y, v))
    }

    fn exact(&self) -> Option<&dyn ExactSurface> {
        self.inner.exact()
    }
}

/// Handle to a vector produced inside a [`SpanContext`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct XId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct YId(usize);

/// The only operations a scripted algorithm may use: oracle queries at
/// points it already holds and linear combinations of what it holds.
pub struct SpanContext<'a> {
    oracle: &'a dyn BilevelOracle,
    xs: Vec<RealVector>,
    ys: Vec<RealVector>,
    committed: Vec<RealVector>,
}

impl<'a> SpanContext<'a> {
    fn new(oracle: &'a dyn BilevelOracle) -> Self {
        let (p, q) = oracle.dims();
        Self { oracle, xs: vec![RealVector::zeros(p)], ys: vec![RealVector::zeros(q)], committed: Vec::new() }
    }

    pub fn zero_x(&self) -> XId {
        XId(0)
    }

    pub fn zero_y(&self) -> YId {
        YId(0)
    }

    pub fn x(&self, id: XId) -> &RealVector {
        &self.xs[id.0]
    }

    pub fn y(&self, id: YId) -> &RealVector {
        &self.ys[id.0]
    }

    fn push_x(&mut self, v: RealVector) -> XId {
        self.xs.push(v);
        XId(self.xs.len() - 1)
    }

    fn push_y(&mut self, v: RealVector) -> YId {
        self.ys.push(v);
        YId(self.ys.len() - 1)
    }

    pub fn grad_x_f(&mut self, x: XId, y: YId) -> XId {
        let v = self.oracle.grad_x_f(&self.xs[x.0], &self.ys[y.0]);
        self.push_x(v)
    }

    pub fn grad_y_f(&mut self, x: XId, y: YId) -> YId {
        let v = self.oracle.grad_y_f(&self.xs[x.0], &self.ys[y.0]);
        self.push_y(v)
    }

    pub fn grad_y_g(&mut self, x: XId, y: YId) -> YId {
        let v = self.oracle.grad_y_g(&self.xs[x.0], &self.ys[y.0]);
        self.push_y(v)
    }

    pub fn hess_y_g(&mut self, x: XId, y: YId, v: YId) -> YId {
        let r = self.oracle.hess_y_g_vec(&self.xs[x.0], &self.ys[y.0], &self.ys[v.0]);
        self.push_y(r)
    }

    pub fn jac_xy_g(&mut self, x: XId, y: YId, v: YId) -> XId {
        let r = self.oracle.jac_xy_g_vec(&self.xs[x.0], &self.ys[y.0], &self.ys[v.0]);
        self.push_x(r)
    }

    pub fn combine_x(&mut self, terms: &[(f64, XId)]) -> XId {
        let mut out = RealVector::zeros(self.xs[0].dim());
        for &(a, id) in terms {
            out.axpy(a, &self.xs[id.0]);
        }
        self.push_x(out)
    }

    pub fn combine_y(&mut self, terms: &[(f64, YId)]) -> YId {
        let mut out = RealVector::zeros(self.ys[0].dim());
        for &(a, id) in terms {
            out.axpy(a, &self.ys[id.0]);
        }
        self.push_y(out)
    }

    /// Declare `id` the next outer iterate.
    pub fn commit_x(&mut self, id: XId) {
        self.committed.push(self.xs[id.0].clone());
    }
}

/// Scripted member of the span class; returns the final outer iterate.
pub type SpanScript<'s> = dyn FnMut(&mut SpanContext<'_>, &Budgets) -> XId + 's;

/// Algorithm to simulate. Step parameters left `None` are derived from
/// the instance constants.
pub enum SimAlgorithm<'s> {
    Baseline { stepsize: Option<f64> },
    AccBiO { l_phi: Option<f64>, mu_x: Option<f64> },
    AccBiOBG { alpha: Option<f64>, mu_x: Option<f64>, warm_start: bool },
    Script(Box<SpanScript<'s>>),
}

impl SimAlgorithm<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            SimAlgorithm::Baseline { .. } => "baseline_aid_gd",
            SimAlgorithm::AccBiO { .. } => "accbio",
            SimAlgorithm::AccBiOBG { .. } => "accbio_bg",
            SimAlgorithm::Script(_) => "script",
        }
    }
}

/// Run `algorithm` on the instance under budgets `(K, Q, T)` and log the
/// support of every oracle response and outer iterate.
pub fn simulate_on_instance<I: HardInstance + ?Sized>(
    instance: &I,
    algorithm: SimAlgorithm<'_>,
    budgets: Budgets,
) -> Result<(RealVector, SupportProfile), LowerBoundError> {
    let m = instance.support_cap(&budgets);
    instance.require_feasible(m)?;
    let n = budgets.inner_steps()?;
    let oracle = instance.oracle();
    let c = *oracle.constants();
    let rec = Recording { inner: oracle, tol: DEFAULT_TOL_ACTIVE, x_log: RefCell::default(), y_log: RefCell::default() };
    let mut profile = SupportProfile::new(algorithm.name(), budgets, n, DEFAULT_TOL_ACTIVE);
    let p = instance.dim();
    if budgets.q == 0 {
        profile.x_iterates.push(RealVector::zeros(p));
        return Ok((RealVector::zeros(p), profile));
    }
    let agd = AgdConfig::from_constants(n, &c).map_err(|e| LowerBoundError::Budget(e.to_string()))?;
    let hb = HeavyBallConfig::from_constants(budgets.t, &c).map_err(|e| LowerBoundError::Budget(e.to_string()))?;
    let l_phi = l_phi_estimate(&c, &LPhiInputs::QuadraticG)?;
    let strong = |mu: Option<f64>| -> Result<f64, LowerBoundError> {
        match mu.or((c.mu_x > 0.0).then_some(c.mu_x)) {
            Some(v) => Ok(v),
            None => Err(LowerBoundError::Contract("a convex instance needs an explicit mu_x for momentum".into())),
        }
    };
    let options = RunOptions::default();
    let eps = f64::MIN_POSITIVE;
    profile.x_iterates.push(RealVector::zeros(p));
    let final_x = {
        let mut observe = |v: &IterateView<'_>| profile.observe(v);
        match algorithm {
            SimAlgorithm::Baseline { stepsize } => {
                let cfg = BaselineConfig { k: budgets.q, stepsize: stepsize.unwrap_or(1.0 / l_phi), agd, hb, eps, options };
                baseline_aid_gd_observed(&rec, &cfg, &mut observe)?.final_point
            }
            SimAlgorithm::AccBiO { l_phi: l, mu_x } => {
                let cfg = AccBiOConfig { k: budgets.q, l_phi: l.unwrap_or(l_phi), mu_x: strong(mu_x)?, agd, hb, eps, options };
                accbio_observed(&rec, &cfg, &mut observe)?.final_point
            }
            SimAlgorithm::AccBiOBG { alpha, mu_x, warm_start } => {
                let cfg = AccBiOBGConfig {
                    k: budgets.q,
                    alpha: alpha.unwrap_or(AccBiOBGConfig::alpha_for(l_phi)),
                    mu_x: strong(mu_x)?,
                    agd,
                    hb,
                    u: None,
                    eps,
                    warm_start,
                    options,
                };
                accbio_bg_observed(&rec, &cfg, &mut observe)?.final_point
            }
            SimAlgorithm::Script(mut script) => {
                let mut ctx = SpanContext::new(&rec);
                let out = script(&mut ctx, &budgets);
                let final_x = ctx.x(out).clone();
                let zero = RealVector::zeros(oracle.dims().1);
                for (k, x) in ctx.committed.iter().chain([&final_x]).enumerate() {
                    observe(&IterateView { k: k + 1, points: &[x], inner: &zero });
                }
                final_x
            }
        }
    };
    let profile = profile_with(rec, profile);
    Ok((final_x, profile))
}

fn profile_with(rec: Recording<'_>, mut profile: SupportProfile) -> SupportProfile {
    profile.response_x_index = rec.x_log.into_inner();
    profile.response_y_index = rec.y_log.into_inner();
    profile
}

/// Orthonormal basis of `span{Z^{2j}·seed : j = 0..=count-1}`, built by
/// repeated `Z²` application with two Gram-Schmidt passes.
pub fn chain_basis(op: &StructuredOperator, seed: &RealVector, count: usize) -> Vec<RealVector> {
    let mut basis: Vec<RealVector> = Vec::with_capacity(count);
    let mut next = seed.clone();
    for _ in 0..count {
        let raw = next.norm();
        if raw == 0.0 {
            break;
        }
        let mut v = next.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q);
            }
        }
        let nv = v.norm();
        if nv <= 1e-12 * raw {
            break;
        }
        let v = v.scaled(1.0 / nv);
        next = op.mul_vec(&v);
        basis.push(v);
    }
    basis
}

/// `‖x − Π x‖ / ‖x‖` for the projection onto an orthonormal basis.
pub fn span_residual(basis: &[RealVector], x: &RealVector) -> f64 {
    let nx = x.norm();
    if nx == 0.0 {
        return 0.0;
    }
    let mut r = x.clone();
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(&r);
            r.axpy(-c, q);
        }
    }
    r.norm() / nx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub tol_active: f64,
    pub tol_support: f64,
    pub span_rel_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { tol_active: DEFAULT_TOL_ACTIVE, tol_support: DEFAULT_TOL_SUPPORT, span_rel_tol: DEFAULT_SPAN_TOL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LowerBoundReport {
    pub instance: String,
    pub d: usize,
    pub budgets: Option<Budgets>,
    pub algorithm: Option<String>,
    pub predicted_support_cap: usize,
    pub observed_max_index: Option<usize>,
    pub max_tail_ratio: Option<f64>,
    pub span_residual: Option<f64>,
    pub gap_floor: Option<f64>,
    pub observed_gap: Option<f64>,
    pub grad_floor: Option<f64>,
    pub observed_grad_norm: Option<f64>,
    pub tolerances: Option<Tolerances>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl LowerBoundReport {
    fn add(&mut self, name: &str, pass: bool, detail: String) {
        self.checks.push(Check { name: name.into(), pass, detail });
        self.pass = self.checks.iter().all(|c| c.pass);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Check every recorded outer iterate against the predicted cap: no mass
/// beyond `M` and membership in the span of `Z^{2j}(Zb)`.
pub fn verify_support_cap<I: HardInstance + ?Sized>(profile: &SupportProfile, instance: &I) -> LowerBoundReport {
    verify_support_cap_with(profile, instance, Tolerances::default())
}

pub fn verify_support_cap_with<I: HardInstance + ?Sized>(
    profile: &SupportProfile,
    instance: &I,
    tol: Tolerances,
) -> LowerBoundReport {
    let m = instance.support_cap(&profile.budgets);
    let mut report = LowerBoundReport {
        instance: instance.kind().into(),
        d: instance.dim(),
        budgets: Some(profile.budgets),
        algorithm: Some(profile.algorithm.clone()),
        predicted_support_cap: m,
        tolerances: Some(tol),
        pass: true,
        ..Default::default()
    };
    let tail = profile.x_iterates.iter().map(|x| tail_ratio(x, m)).fold(0.0, f64::max);
    let observed = profile.x_iterates.iter().map(|x| active_index(x, tol.tol_support)).max().unwrap_or(0);
    report.max_tail_ratio = Some(tail);
    report.observed_max_index = Some(observed);
    report.add("support_cap", tail <= tol.tol_support, format!("max tail ratio {tail:e} beyond M = {m}, observed index {observed}"));

    let seed = instance.seed_vector();
    let seed_support = active_index(&seed, tol.tol_active);
    let count = (m + 1).saturating_sub(seed_support);
    let basis = chain_basis(&instance.chain_operator(), &seed, count);
    let residual = profile.x_iterates.iter().map(|x| span_residual(&basis, x)).fold(0.0, f64::max);
    report.span_residual = Some(residual);
    report.add(
        "span_membership",
        residual <= tol.span_rel_tol,
        format!("relative residual {residual:e} against {} chain vectors", basis.len()),
    );
    report
}

/// Compare `Φ(x_final) − Φ*` against the gap floor for cap `M`, from `x0 = 0`.
pub fn verify_gap_floor(instance: &ScscInstance, x_final: &RealVector, m: usize) -> Result<LowerBoundReport, LowerBoundError> {
    instance.require_feasible(m)?;
    let floor = scsc_gap_floor(instance, m, &RealVector::zeros(instance.d))?;
    let gap = instance.oracle.phi_gap(x_final)?;
    let mut report = LowerBoundReport {
        instance: "scsc".into(),
        d: instance.d,
        predicted_support_cap: m,
        gap_floor: Some(floor),
        observed_gap: Some(gap),
        pass: true,
        ..Default::default()
    };
    report.add("gap_floor", gap >= floor, format!("gap {gap:e} vs floor {floor:e}"));
    Ok(report)
}

/// Compare `‖∇Φ(x_final)‖` against the instance's gradient floor.
pub fn verify_grad_floor(instance: &CscInstance, x_final: &RealVector, m: usize) -> Result<LowerBoundReport, LowerBoundError> {
    instance.require_feasible(m)?;
    let norm = exact_hypergradient(&instance.oracle, x_final)?.norm();
    let mut report = LowerBoundReport {
        instance: "csc".into(),
        d: instance.d,
        predicted_support_cap: m,
        grad_floor: Some(instance.grad_floor),
        observed_grad_norm: Some(norm),
        pass: true,
        ..Default::default()
    };
    report.add("grad_floor", norm >= instance.grad_floor, format!("gradient norm {norm:e} vs floor {:e}", instance.grad_floor));
    Ok(report)
}

/// Distance between the geometric guess and the dense minimizer against
/// its certified bound, plus the root checks.
pub fn verify_certificate(instance: &ScscInstance) -> Result<LowerBoundReport, LowerBoundError> {
    let x_star = instance.x_star_dense()?;
    let err = (&instance.x_hat - &x_star).norm();
    let bound = instance.geometric_error_bound();
    let residual = instance.quartic_residual();
    let (lo, hi) = instance.root_bracket();
    let mut report = LowerBoundReport { instance: "scsc".into(), d: instance.d, pass: true, ..Default::default() };
    report.add("geometric_certificate", err <= bound, format!("distance {err:e} vs bound {bound:e}"));
    report.add("quartic_residual", residual <= 1e-10, format!("residual {residual:e}"));
    report.add("root_bracket", instance.r > lo && instance.r < hi, format!("r = {} in ({lo}, {hi})", instance.r));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worst_case::{build_csc, build_scsc};

    fn mild_scsc(m: usize) -> ScscInstance {
        let probe = build_scsc(8, SmoothnessConstants::mild(), None).unwrap();
        let d = probe.feasible_dimension(m).unwrap();
        build_scsc(d, SmoothnessConstants::mild(), None).unwrap()
    }

    #[test]
    fn active_index_conventions() {
        assert_eq!(active_index(&RealVector::zeros(4), 1e-10), 0);
        assert_eq!(active_index(&RealVector::basis(4, 2), 1e-10), 3);
        let v = RealVector::new(vec![1.0, 1e-12, 0.0]).unwrap();
        assert_eq!(active_index(&v, 1e-10), 1);
        assert_eq!(tail_ratio(&v, 1), 1e-12);
    }

    #[test]
    fn zero_iterations() {
        let inst = mild_scsc(2);
        let (x, prof) = simulate_on_instance(&inst, SimAlgorithm::Baseline { stepsize: None }, Budgets { k: 0, q: 0, t: 0 }).unwrap();
        assert_eq!(x, RealVector::zeros(inst.d));
        assert_eq!(prof.max_x_index(), 0);
    }

    #[test]
    fn first_inner_response_is_b() {
        let inst = mild_scsc(32);
        let (p, q) = inst.oracle.dims();
        let g = inst.oracle.grad_y_g(&RealVector::zeros(p), &RealVector::zeros(q));
        assert_eq!(g, inst.b);
        let step = 1.0 / inst.constants.ltil_y;
        assert_eq!(active_index(&g.scaled(-step), 0.0), active_index(&inst.b, 0.0));
    }

    #[test]
    fn seed_vector_support() {
        let inst = mild_scsc(32);
        let seed = inst.seed_vector();
        assert_eq!(active_index(&seed, 0.0), 2);
        let basis = chain_basis(&inst.chain_operator(), &seed, 10);
        assert_eq!(span_residual(&basis, &seed), 0.0);
        let csc = build_csc(20, SmoothnessConstants::mild(), 1.0).unwrap();
        assert_eq!(active_index(&csc.seed_vector(), 1e-14), 3);
    }

    #[test]
    fn baseline_respects_cap_and_floor() {
        let budgets = Budgets { k: 10, q: 5, t: 3 };
        let inst = mild_scsc(32);
        assert_eq!(inst.support_cap(&budgets), 32);
        let (x, prof) = simulate_on_instance(&inst, SimAlgorithm::Baseline { stepsize: None }, budgets).unwrap();
        let report = verify_support_cap(&prof, &inst);
        assert!(report.pass, "{report:?}");
        let floor = verify_gap_floor(&inst, &x, 32).unwrap();
        assert!(floor.pass, "{floor:?}");
        // Each outer step adds at most N + T + 1 applications of Z².
        let per_step = prof.inner_steps + budgets.t + 1;
        for w in prof.x_index.windows(2) {
            assert!(w[1] <= w[0] + per_step, "{:?}", prof.x_index);
        }
    }

    #[test]
    fn floors_are_uniform_over_solvers() {
        let budgets = Budgets { k: 10, q: 5, t: 3 };
        let inst = mild_scsc(32);
        for alg in [
            SimAlgorithm::AccBiO { l_phi: None, mu_x: None },
            SimAlgorithm::AccBiOBG { alpha: None, mu_x: None, warm_start: true },
        ] {
            let (x, prof) = simulate_on_instance(&inst, alg, budgets).unwrap();
            assert!(verify_support_cap(&prof, &inst).pass);
            assert!(verify_gap_floor(&inst, &x, 32).unwrap().pass);
        }
    }

    #[test]
    fn negative_controls() {
        let budgets = Budgets { k: 10, q: 5, t: 3 };
        let inst = mild_scsc(32);
        let (_, mut prof) = simulate_on_instance(&inst, SimAlgorithm::Baseline { stepsize: None }, budgets).unwrap();
        let mut spiked = prof.x_iterates.last().unwrap().clone().into_vec();
        spiked[32 + 4] = 1.0;
        prof.x_iterates.push(RealVector::new(spiked).unwrap());
        let report = verify_support_cap(&prof, &inst);
        assert!(!report.pass);
        assert!(report.checks.iter().all(|c| !c.pass));
        let x_star = inst.x_star_dense().unwrap();
        assert!(!verify_gap_floor(&inst, &x_star, 32).unwrap().pass);
    }

    #[test]
    fn infeasible_dimension_rejected() {
        let inst = build_scsc(40, SmoothnessConstants::mild(), None).unwrap();
        let err = simulate_on_instance(&inst, SimAlgorithm::Baseline { stepsize: None }, Budgets { k: 10, q: 5, t: 3 });
        assert!(matches!(err, Err(LowerBoundError::Infeasible { required: 65, .. })), "{err:?}");
        let inst = mild_scsc(32);
        assert!(matches!(
            simulate_on_instance(&inst, SimAlgorithm::Baseline { stepsize: None }, Budgets { k: 7, q: 5, t: 3 }),
            Err(LowerBoundError::Budget(_))
        ));
    }

    #[test]
    fn csc_grad_floor_and_script() {
        let inst = build_csc(20, SmoothnessConstants::mild(), 1.0).unwrap();
        let zero = verify_grad_floor(&inst, &RealVector::zeros(20), 10).unwrap();
        assert!(zero.pass);
        assert!(!verify_grad_floor(&inst, &inst.x_star, 10).unwrap().pass);
        // K + QT − Q + 3 = 4 + 8 − 2 + 3 = 13 would need d >= 16.
        let budgets = Budgets { k: 4, q: 2, t: 4 };
        let (x, prof) = simulate_on_instance(&inst, SimAlgorithm::Baseline { stepsize: None }, budgets).unwrap();
        let report = verify_support_cap(&prof, &inst);
        assert!(report.pass, "{report:?} {:?}", prof.x_index);
        assert!(verify_grad_floor(&inst, &x, inst.support_cap(&budgets)).unwrap().pass);

        // A scripted member mixing every primitive with arbitrary weights.
        let script = |ctx: &mut SpanContext<'_>, b: &Budgets| {
            let mut x = ctx.zero_x();
            let mut y = ctx.zero_y();
            for s in 0..b.q {
                for _ in 0..b.k / b.q {
                    let g = ctx.grad_y_g(x, y);
                    y = ctx.combine_y(&[(1.0, y), (-0.3 - 0.01 * s as f64, g)]);
                }
                let mut v = ctx.grad_y_f(x, y);
                for _ in 0..b.t {
                    let h = ctx.hess_y_g(x, y, v);
                    v = ctx.combine_y(&[(0.9, v), (0.2, h)]);
                }
                let j = ctx.jac_xy_g(x, y, v);
                let gx = ctx.grad_x_f(x, y);
                x = ctx.combine_x(&[(1.0, x), (-0.05, gx), (0.07, j)]);
                ctx.commit_x(x);
            }
            x
        };
        let (x, prof) = simulate_on_instance(&inst, SimAlgorithm::Script(Box::new(script)), budgets).unwrap();
        assert!(x.norm() > 0.0);
        let report = verify_support_cap(&prof, &inst);
        assert!(report.pass, "{report:?}");
        assert!(verify_grad_floor(&inst, &x, 13).unwrap().pass);
        assert!(matches!(
            simulate_on_instance(&inst, SimAlgorithm::AccBiO { l_phi: None, mu_x: None }, budgets),
            Err(LowerBoundError::Contract(_))
        ));
    }

    #[test]
    fn certificate_and_corruption() {
        for d in [16, 32] {
            let inst = build_scsc(d, SmoothnessConstants::mild(), None).unwrap();
            assert!(verify_certificate(&inst).unwrap().pass);
        }
        let inst = build_scsc(32, SmoothnessConstants::mild(), None).unwrap();
        let mut doc = inst.document();
        let mut bt = doc.vectors.b_tilde.clone().into_vec();
        bt[2] = 0.1;
        doc.vectors.b_tilde = RealVector::new(bt).unwrap();
        let bad = ScscInstance::from_document(&doc).unwrap();
        let report = verify_certificate(&bad).unwrap();
        assert!(!report.pass);
        assert!(!report.checks[0].pass);
    }

    #[test]
    fn report_json_round_trip() {
        let inst = mild_scsc(32);
        let report = verify_certificate(&inst).unwrap();
        let back: LowerBoundReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
