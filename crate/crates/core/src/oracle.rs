//! Query interface for bilevel problems, the quadratic-inner subclass with
//! analytic ground truth, and the call-counting wrapper.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dense_eig_extremes, DenseFactor, LinalgConfig, LinalgError, RealVector, StructuredOperator};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("oracle does not expose {0}")]
    Capability(&'static str),
    #[error("invalid constants: {0}")]
    Constants(String),
    #[error("inner Hessian spectrum [{min}, {max}] lies outside [mu_y, Ltil_y] = [{mu_y}, {ltil_y}]")]
    Spectrum { min: f64, max: f64, mu_y: f64, ltil_y: f64 },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
}

/// Curvature constants of an (f, g) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    pub mu_x: f64,
    pub mu_y: f64,
    pub l_x: f64,
    pub l_y: f64,
    pub l_xy: f64,
    pub ltil_xy: f64,
    pub ltil_y: f64,
    #[serde(default)]
    pub rho_xy: f64,
    #[serde(default)]
    pub rho_yy: f64,
}

impl SmoothnessConstants {
    /// `mu_x = mu_y = 0.5`, every other first-order constant 1, no third-order terms.
    pub fn mild() -> Self {
        Self { mu_x: 0.5, mu_y: 0.5, l_x: 1.0, l_y: 1.0, l_xy: 1.0, ltil_xy: 1.0, ltil_y: 1.0, rho_xy: 0.0, rho_yy: 0.0 }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let named = [
            ("mu_x", self.mu_x),
            ("mu_y", self.mu_y),
            ("l_x", self.l_x),
            ("l_y", self.l_y),
            ("l_xy", self.l_xy),
            ("ltil_xy", self.ltil_xy),
            ("ltil_y", self.ltil_y),
            ("rho_xy", self.rho_xy),
            ("rho_yy", self.rho_yy),
        ];
        if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(OracleError::Constants(format!("{name} = {v} must be finite and nonnegative")));
        }
        if self.mu_y <= 0.0 {
            return Err(OracleError::Constants("mu_y must be positive".into()));
        }
        if self.ltil_y < self.mu_y {
            return Err(OracleError::Constants(format!("ltil_y = {} is below mu_y = {}", self.ltil_y, self.mu_y)));
        }
        Ok(())
    }

    pub fn kappa_y(&self) -> f64 {
        self.ltil_y / self.mu_y
    }
}

/// First- and second-order queries of an (f, g) pair.
pub trait BilevelOracle {
    /// `(p, q)`: outer and inner dimension.
    fn dims(&self) -> (usize, usize);
    fn constants(&self) -> &SmoothnessConstants;
    fn grad_x_f(&self, x: &RealVector, y: &RealVector) -> RealVector;
    fn grad_y_f(&self, x: &RealVector, y: &RealVector) -> RealVector;
    fn grad_y_g(&self, x: &RealVector, y: &RealVector) -> RealVector;
    /// `∇²_y g(x, y) v`
    fn hess_y_g_vec(&self, x: &RealVector, y: &RealVector, v: &RealVector) -> RealVector;
    /// `∇_x ∇_y g(x, y) v`, mapping inner vectors to outer vectors.
    fn jac_xy_g_vec(&self, x: &RealVector, y: &RealVector, v: &RealVector) -> RealVector;
    /// Uncounted ground truth, when the problem has one.
    fn exact(&self) -> Option<&dyn ExactSurface> {
        None
    }
    /// Bound on `‖∇_y f‖` over the domain, if declared.
    fn gradient_bound(&self) -> Option<f64> {
        None
    }
}

/// Ground-truth surface used for verification only.
pub trait ExactSurface: BilevelOracle {
    fn y_star(&self, x: &RealVector) -> Result<RealVector, OracleError>;
    /// Solve `∇²_y g(x, y) v = rhs`.
    fn solve_hess_y_g(&self, x: &RealVector, y: &RealVector, rhs: &RealVector) -> Result<RealVector, OracleError>;
    fn phi(&self, x: &RealVector) -> Result<f64, OracleError>;
    /// Minimizer of Φ and the minimum value.
    fn phi_minimizer(&self) -> Result<(RealVector, f64), OracleError>;
    /// Dense Hessian of Φ when Φ is quadratic.
    fn phi_hessian(&self) -> Option<DMatrix<f64>> {
        None
    }
    fn phi_gap(&self, x: &RealVector) -> Result<f64, OracleError> {
        let (_, phi_star) = self.phi_minimizer()?;
        Ok(self.phi(x)? - phi_star)
    }
}

/// Which optional members an oracle provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub y_star: bool,
    pub phi: bool,
    pub grad_phi: bool,
    pub phi_star: bool,
    pub gradient_bound: bool,
}

pub fn capabilities<O: BilevelOracle + ?Sized>(oracle: &O) -> Capabilities {
    let exact = oracle.exact();
    Capabilities {
        y_star: exact.is_some(),
        phi: exact.is_some(),
        grad_phi: exact.is_some(),
        phi_star: exact.map(|e| e.phi_minimizer().is_ok()).unwrap_or(false),
        gradient_bound: oracle.gradient_bound().is_some(),
    }
}

/// `∇Φ(x) = ∇_x f − ∇_x∇_y g [∇²_y g]⁻¹ ∇_y f`, all at `(x, y*(x))`.
pub fn exact_hypergradient<O: BilevelOracle + ?Sized>(oracle: &O, x: &RealVector) -> Result<RealVector, OracleError> {
    let ex = oracle.exact().ok_or(OracleError::Capability("an exact surface"))?;
    let y = ex.y_star(x)?;
    let gy = ex.grad_y_f(x, &y);
    let v = ex.solve_hess_y_g(x, &y, &gy)?;
    Ok(&ex.grad_x_f(x, &y) - &ex.jac_xy_g_vec(x, &y, &v))
}

/// Largest deviation between central differences of Φ and the exact
/// hypergradient, relative to `max(1, ‖∇Φ(x)‖_∞)`.
pub fn finite_difference_check<O: BilevelOracle + ?Sized>(oracle: &O, x: &RealVector, h: f64) -> Result<f64, OracleError> {
    let ex = oracle.exact().ok_or(OracleError::Capability("phi"))?;
    let grad = exact_hypergradient(oracle, x)?;
    let scale = grad.norm_inf().max(1.0);
    let mut worst = 0.0f64;
    for i in 0..x.dim() {
        let mut plus = x.clone().into_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (ex.phi(&RealVector::raw(plus))? - ex.phi(&RealVector::raw(minus))?) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / scale);
    }
    Ok(worst)
}

/// Linear map from inner to outer space (`p × q`).
#[derive(Clone, Debug)]
pub enum CrossOperator {
    /// Square symmetric operator (`p = q`).
    Square(StructuredOperator),
    Dense(DMatrix<f64>),
}

impl CrossOperator {
    pub fn zero(p: usize, q: usize) -> Self {
        CrossOperator::Dense(DMatrix::zeros(p, q))
    }

    pub fn rows(&self) -> usize {
        match self {
            CrossOperator::Square(op) => op.dim(),
            CrossOperator::Dense(m) => m.nrows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            CrossOperator::Square(op) => op.dim(),
            CrossOperator::Dense(m) => m.ncols(),
        }
    }

    /// `C v` with `v` in the inner space.
    pub fn apply(&self, v: &RealVector) -> RealVector {
        match self {
            CrossOperator::Square(op) => op.mul_vec(v),
            CrossOperator::Dense(m) => RealVector::from_dvector(&(m * v.to_dvector())),
        }
    }

    /// `Cᵀ u` with `u` in the outer space.
    pub fn apply_t(&self, u: &RealVector) -> RealVector {
        match self {
            CrossOperator::Square(op) => op.mul_vec(u),
            CrossOperator::Dense(m) => RealVector::from_dvector(&(m.transpose() * u.to_dvector())),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            CrossOperator::Square(op) => op.to_dense(),
            CrossOperator::Dense(m) => m.clone(),
        }
    }
}

/// `f(x, y) = ½xᵀAx + xᵀCy + ½yᵀDy + aᵀx + cᵀy + offset`
#[derive(Clone, Debug)]
pub struct QuadraticOuter {
    pub a: StructuredOperator,
    pub c: CrossOperator,
    pub d: StructuredOperator,
    pub lin_x: RealVector,
    pub lin_y: RealVector,
    pub offset: f64,
}

impl QuadraticOuter {
    /// `½‖x‖² + ½‖y‖²`
    pub fn separable(p: usize, q: usize) -> Self {
        Self {
            a: StructuredOperator::identity(p),
            c: CrossOperator::zero(p, q),
            d: StructuredOperator::identity(q),
            lin_x: RealVector::zeros(p),
            lin_y: RealVector::zeros(q),
            offset: 0.0,
        }
    }

    pub fn value(&self, x: &RealVector, y: &RealVector) -> f64 {
        0.5 * x.dot(&self.a.mul_vec(x))
            + x.dot(&self.c.apply(y))
            + 0.5 * y.dot(&self.d.mul_vec(y))
            + self.lin_x.dot(x)
            + self.lin_y.dot(y)
            + self.offset
    }
}

#[derive(Debug)]
struct PhiModel {
    hessian: DMatrix<f64>,
    x_star: RealVector,
    phi_star: f64,
}

/// Bilevel problem with `g(x, y) = ½yᵀHy + xᵀJy + bᵀy` and quadratic `f`.
#[derive(Debug)]
pub struct QuadraticBilevel {
    outer: QuadraticOuter,
    h: StructuredOperator,
    j: CrossOperator,
    b: RealVector,
    constants: SmoothnessConstants,
    gradient_bound: Option<f64>,
    cfg: LinalgConfig,
    h_factor: OnceLock<Result<DenseFactor, LinalgError>>,
    model: OnceLock<Result<PhiModel, OracleError>>,
}

/// Relative slack on the declared inner spectrum bounds.
const SPECTRUM_SLACK: f64 = 1e-9;

/// Build a quadratic-inner bilevel oracle, checking that `H` has its
/// spectrum inside `[mu_y, ltil_y]`.
pub fn make_quadratic_bilevel(
    h: StructuredOperator,
    j: CrossOperator,
    b: RealVector,
    outer: QuadraticOuter,
    constants: SmoothnessConstants,
) -> Result<QuadraticBilevel, OracleError> {
    constants.validate()?;
    let q = h.dim();
    let p = outer.a.dim();
    let checks = [
        ("J rows", p, j.rows()),
        ("J columns", q, j.cols()),
        ("b", q, b.dim()),
        ("C rows", p, outer.c.rows()),
        ("C columns", q, outer.c.cols()),
        ("D", q, outer.d.dim()),
        ("linear x term", p, outer.lin_x.dim()),
        ("linear y term", q, outer.lin_y.dim()),
    ];
    for (what, expected, got) in checks {
        if expected != got {
            return Err(OracleError::Dimension { what, expected, got });
        }
    }
    let cfg = LinalgConfig::default();
    if q <= cfg.dense_cap {
        let (min, max) = dense_eig_extremes(&h.to_dense())?;
        let tol = SPECTRUM_SLACK * constants.ltil_y.max(1.0);
        if min < constants.mu_y - tol || max > constants.ltil_y + tol {
            return Err(OracleError::Spectrum { min, max, mu_y: constants.mu_y, ltil_y: constants.ltil_y });
        }
    }
    Ok(QuadraticBilevel {
        outer,
        h,
        j,
        b,
        constants,
        gradient_bound: None,
        cfg,
        h_factor: OnceLock::new(),
        model: OnceLock::new(),
    })
}

impl QuadraticBilevel {
    pub fn with_gradient_bound(mut self, u: f64) -> Self {
        self.gradient_bound = Some(u);
        self
    }

    /// Same problem with different declared constants (no spectrum re-check).
    pub fn with_constants(mut self, constants: SmoothnessConstants) -> Self {
        self.constants = constants;
        self
    }

    pub fn inner_hessian(&self) -> &StructuredOperator {
        &self.h
    }

    pub fn coupling(&self) -> &CrossOperator {
        &self.j
    }

    pub fn inner_linear(&self) -> &RealVector {
        &self.b
    }

    pub fn outer(&self) -> &QuadraticOuter {
        &self.outer
    }

    fn factor(&self) -> Result<&DenseFactor, OracleError> {
        self.h_factor
            .get_or_init(|| DenseFactor::of(&self.h, self.cfg))
            .as_ref()
            .map_err(|e| OracleError::Linalg(e.clone()))
    }

    fn model(&self) -> Result<&PhiModel, OracleError> {
        self.model.get_or_init(|| self.build_model()).as_ref().map_err(Clone::clone)
    }

    // y*(x) = P x + p0 with P = -H⁻¹Jᵀ, p0 = -H⁻¹b, so
    // ∇²Φ = A + CP + PᵀCᵀ + PᵀDP.
    fn build_model(&self) -> Result<PhiModel, OracleError> {
        let (p, q) = self.dims();
        let factor = self.factor()?;
        let jt = self.j.to_dense().transpose();
        let mut pm = DMatrix::zeros(q, p);
        for col in 0..p {
            let rhs = RealVector::from_dvector(&jt.column(col).into_owned());
            let s = if rhs.norm() == 0.0 { RealVector::zeros(q) } else { factor.solve(&rhs)? };
            for row in 0..q {
                pm[(row, col)] = -s[row];
            }
        }
        let a = self.outer.a.to_dense();
        let c = self.outer.c.to_dense();
        let d = self.outer.d.to_dense();
        let cp = &c * &pm;
        let mut hessian = &a + &cp + cp.transpose() + pm.transpose() * &d * &pm;
        hessian = 0.5 * (&hessian + hessian.transpose());
        let x0 = RealVector::zeros(p);
        let grad0 = exact_hypergradient(self, &x0)?;
        let phi_factor = DenseFactor::new(hessian.clone(), self.cfg)?;
        let x_star = -&phi_factor.solve(&grad0)?;
        let phi_star = self.phi(&x_star)?;
        Ok(PhiModel { hessian, x_star, phi_star })
    }
}

impl BilevelOracle for QuadraticBilevel {
    fn dims(&self) -> (usize, usize) {
        (self.outer.a.dim(), self.h.dim())
    }

    fn constants(&self) -> &SmoothnessConstants {
        &self.constants
    }

    fn grad_x_f(&self, x: &RealVector, y: &RealVector) -> RealVector {
        let mut out = self.outer.a.mul_vec(x);
        out.axpy(1.0, &self.outer.c.apply(y));
        out.axpy(1.0, &self.outer.lin_x);
        out
    }

    fn grad_y_f(&self, x: &RealVector, y: &RealVector) -> RealVector {
        let mut out = self.outer.c.apply_t(x);
        out.axpy(1.0, &self.outer.d.mul_vec(y));
        out.axpy(1.0, &self.outer.lin_y);
        out
    }

    fn grad_y_g(&self, x: &RealVector, y: &RealVector) -> RealVector {
        let mut out = self.h.mul_vec(y);
        out.axpy(1.0, &self.j.apply_t(x));
        out.axpy(1.0, &self.b);
        out
    }

    fn hess_y_g_vec(&self, _x: &RealVector, _y: &RealVector, v: &RealVector) -> RealVector {
        self.h.mul_vec(v)
    }

    fn jac_xy_g_vec(&self, _x: &RealVector, _y: &RealVector, v: &RealVector) -> RealVector {
        self.j.apply(v)
    }

    fn exact(&self) -> Option<&dyn ExactSurface> {
        Some(self)
    }

    fn gradient_bound(&self) -> Option<f64> {
        self.gradient_bound
    }
}

impl ExactSurface for QuadraticBilevel {
    fn y_star(&self, x: &RealVector) -> Result<RealVector, OracleError> {
        let mut rhs = self.j.apply_t(x);
        rhs.axpy(1.0, &self.b);
        Ok(-&self.factor()?.solve(&rhs)?)
    }

    fn solve_hess_y_g(&self, _x: &RealVector, _y: &RealVector, rhs: &RealVector) -> Result<RealVector, OracleError> {
        Ok(self.factor()?.solve(rhs)?)
    }

    fn phi(&self, x: &RealVector) -> Result<f64, OracleError> {
        let y = self.y_star(x)?;
        Ok(self.outer.value(x, &y))
    }

    fn phi_minimizer(&self) -> Result<(RealVector, f64), OracleError> {
        let m = self.model()?;
        Ok((m.x_star.clone(), m.phi_star))
    }

    fn phi_hessian(&self) -> Option<DMatrix<f64>> {
        self.model().ok().map(|m| m.hessian.clone())
    }

    /// `½ (x − x*)ᵀ ∇²Φ (x − x*)`, free of the cancellation in `Φ(x) − Φ*`.
    fn phi_gap(&self, x: &RealVector) -> Result<f64, OracleError> {
        let m = self.model()?;
        let e = (x - &m.x_star).to_dvector();
        Ok(0.5 * e.dot(&(&m.hessian * &e)))
    }
}

/// Snapshot of oracle call tallies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleCounters {
    pub n_g: u64,
    pub n_j: u64,
    pub n_h: u64,
    pub tau_cost: f64,
}

impl OracleCounters {
    pub fn new(tau_cost: f64) -> Self {
        Self { n_g: 0, n_j: 0, n_h: 0, tau_cost }
    }

    /// `tau_cost · (n_J + n_H) + n_G`
    pub fn complexity(&self) -> f64 {
        self.tau_cost * (self.n_j + self.n_h) as f64 + self.n_g as f64
    }
}

#[derive(Debug, Default)]
struct CounterCells {
    n_g: AtomicU64,
    n_j: AtomicU64,
    n_h: AtomicU64,
}

/// Handle onto the tallies of a [`Counted`] oracle.
#[derive(Debug, Clone)]
pub struct CounterHandle {
    cells: Arc<CounterCells>,
    tau_cost: f64,
}

impl CounterHandle {
    pub fn snapshot(&self) -> OracleCounters {
        OracleCounters {
            n_g: self.cells.n_g.load(Ordering::Relaxed),
            n_j: self.cells.n_j.load(Ordering::Relaxed),
            n_h: self.cells.n_h.load(Ordering::Relaxed),
            tau_cost: self.tau_cost,
        }
    }
}

/// Wrapper that tallies algorithmic queries. Exact-surface calls go to the
/// inner oracle and are not counted.
pub struct Counted<'a, O: ?Sized> {
    inner: &'a O,
    cells: Arc<CounterCells>,
}

pub fn counted<O: BilevelOracle + ?Sized>(oracle: &O, tau_cost: f64) -> (Counted<'_, O>, CounterHandle) {
    let cells = Arc::new(CounterCells::default());
    (Counted { inner: oracle, cells: cells.clone() }, CounterHandle { cells, tau_cost })
}

impl<O: BilevelOracle + ?Sized> BilevelOracle for Counted<'_, O> {
    fn dims(&self) -> (usize, usize) {
        self.inner.dims()
    }

    fn constants(&self) -> &SmoothnessConstants {
        self.inner.constants()
    }

    fn grad_x_f(&self, x: &RealVector, y: &RealVector) -> RealVector {
        self.cells.n_g.fetch_add(1, Ordering::Relaxed);
        self.inner.grad_x_f(x, y)
    }

    fn grad_y_f(&self, x: &RealVector, y: &RealVector) -> RealVector {
        self.cells.n_g.fetch_add(1, Ordering::Relaxed);
        self.inner.grad_y_f(x, y)
    }

    fn grad_y_g(&self, x: &RealVector, y: &RealVector) -> RealVector {
        self.cells.n_g.fetch_add(1, Ordering::Relaxed);
        self.inner.grad_y_g(x, y)
    }

    fn hess_y_g_vec(&self, x: &RealVector, y: &RealVector, v: &RealVector) -> RealVector {
        self.cells.n_h.fetch_add(1, Ordering::Relaxed);
        self.inner.hess_y_g_vec(x, y, v)
    }

    fn jac_xy_g_vec(&self, x: &RealVector, y: &RealVector, v: &RealVector) -> RealVector {
        self.cells.n_j.fetch_add(1, Ordering::Relaxed);
        self.inner.jac_xy_g_vec(x, y, v)
    }

    fn exact(&self) -> Option<&dyn ExactSurface> {
        self.inner.exact()
    }

    fn gradient_bound(&self) -> Option<f64> {
        self.inner.gradient_bound()
    }
}
