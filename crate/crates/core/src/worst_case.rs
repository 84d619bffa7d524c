//! Hard instances for the strongly-convex (SCSC) and convex (CSC) outer
//! cases, with their certificates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{bisect_root, solve_dense, LinalgError, RealVector, StructuredOperator};
use crate::oracle::{
    exact_hypergradient, make_quadratic_bilevel, CrossOperator, ExactSurface, OracleError, QuadraticBilevel,
    QuadraticOuter, SmoothnessConstants,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorstCaseError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("infeasible parameters: {0}")]
    Constraint(String),
    #[error("quartic root search failed: {0}")]
    Numeric(String),
    #[error("required dimension {required} exceeds the cap {cap}")]
    Infeasible { required: usize, cap: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("malformed instance document: {0}")]
    Document(String),
}

/// Bisection width used for the quartic root.
pub const QUARTIC_TOL: f64 = 1e-14;
/// Default ceiling for [`scsc_feasible_dimension`].
pub const DEFAULT_DIMENSION_CAP: usize = 4096;

/// Smallest cross-coupling constant compatible with the cubic term of `f`.
pub fn lbar_feasibility_bound(c: &SmoothnessConstants) -> f64 {
    (c.l_x - c.mu_x) * (c.ltil_y - c.mu_y) / (2.0 * c.ltil_xy)
}

pub fn default_lbar(c: &SmoothnessConstants) -> f64 {
    c.l_xy.max(lbar_feasibility_bound(c))
}

/// Scalars of the minimizer equation `Z⁴x + λZ²x + τx = γ Zb`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScscCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub lam_coef: f64,
    pub tau_coef: f64,
    pub gamma: f64,
}

pub fn scsc_coefficients(c: &SmoothnessConstants, lbar: f64) -> Result<ScscCoefficients, WorstCaseError> {
    let alpha = (c.l_x - c.mu_x) / 4.0;
    let beta = (c.ltil_y - c.mu_y) / 4.0;
    let lead = beta * beta * c.mu_x + alpha * beta * c.mu_y + beta * lbar * c.ltil_xy / 2.0;
    if !(lead > 0.0) {
        return Err(WorstCaseError::Constraint(format!(
            "leading coefficient {lead} must be positive (needs ltil_y > mu_y and a nonzero coupling)"
        )));
    }
    let mid = 2.0 * beta * c.mu_x * c.mu_y
        + alpha * c.mu_y * c.mu_y
        + c.mu_y * lbar * c.ltil_xy / 2.0
        + c.l_y * c.ltil_xy * c.ltil_xy / 4.0;
    Ok(ScscCoefficients {
        alpha,
        beta,
        lam_coef: mid / lead,
        tau_coef: c.mu_x * c.mu_y * c.mu_y / lead,
        gamma: c.l_y * c.ltil_xy / (2.0 * lead),
    })
}

/// `1 − (4+λ)r + (6+2λ+τ)r² − (4+λ)r³ + r⁴`
pub fn scsc_quartic(lam: f64, tau: f64, r: f64) -> f64 {
    let a = 4.0 + lam;
    let m = 6.0 + 2.0 * lam + tau;
    (((r - a) * r + m) * r - a) * r + 1.0
}

/// Lower end of the open interval known to contain the root.
pub fn scsc_root_lower_bound(lam: f64, tau: f64) -> f64 {
    let xi = lam / (2.0 * tau);
    1.0 - 1.0 / (0.5 + (xi + 0.25).sqrt())
}

pub fn scsc_root(lam: f64, tau: f64) -> Result<f64, WorstCaseError> {
    let lo = scsc_root_lower_bound(lam, tau);
    bisect_root(|r| scsc_quartic(lam, tau, r), lo, 1.0, QUARTIC_TOL).map_err(|e| {
        WorstCaseError::Numeric(format!(
            "lam = {lam}, tau = {tau}, bracket [{lo}, 1], quartic(lo) = {}, quartic(1) = {}: {e}",
            scsc_quartic(lam, tau, lo),
            scsc_quartic(lam, tau, 1.0)
        ))
    })
}

/// SCSC pair with inner linear term `b`:
///
/// f = ½xᵀ(αZ²+μ_x I)x − (αβ/L̃xy)xᵀZ³y + (L̄/2)xᵀZy + (L_y/2)‖y‖² + (L̄/L̃xy)bᵀy − (2αβ/L̃xy²)bᵀZ²y
/// g = ½yᵀ(βZ²+μ_y I)y − (L̃xy/2)xᵀZy + bᵀy
pub fn scsc_oracle(
    d: usize,
    c: &SmoothnessConstants,
    lbar: f64,
    b: RealVector,
) -> Result<QuadraticBilevel, WorstCaseError> {
    let alpha = (c.l_x - c.mu_x) / 4.0;
    let beta = (c.ltil_y - c.mu_y) / 4.0;
    let z = StructuredOperator::z_scsc(d);
    let z2 = StructuredOperator::power(z.clone(), 2);
    let cross = StructuredOperator::combination(vec![
        (-alpha * beta / c.ltil_xy, StructuredOperator::power(z.clone(), 3)),
        (lbar / 2.0, z.clone()),
    ])?;
    let mut lin_y = b.scaled(lbar / c.ltil_xy);
    lin_y.axpy(-2.0 * alpha * beta / (c.ltil_xy * c.ltil_xy), &z2.mul_vec(&b));
    let outer = QuadraticOuter {
        a: StructuredOperator::shifted_scaled(z2.clone(), alpha, c.mu_x),
        c: CrossOperator::Square(cross),
        d: StructuredOperator::scaled_identity(d, c.l_y),
        lin_x: RealVector::zeros(d),
        lin_y,
        offset: 0.0,
    };
    let h = StructuredOperator::shifted_scaled(z2, beta, c.mu_y);
    let j = CrossOperator::Square(StructuredOperator::shifted_scaled(z, -c.ltil_xy / 2.0, 0.0));
    Ok(make_quadratic_bilevel(h, j, b, outer, *c)?)
}

/// SCSC pair with `b = 𝟙`, so that `Zb = e₁`. Unlike [`build_scsc`] it is
/// defined for `ltil_y = mu_y`; used as the solver benchmark.
pub fn scsc_benchmark(d: usize, c: &SmoothnessConstants, lbar: f64) -> Result<QuadraticBilevel, WorstCaseError> {
    c.validate()?;
    if d < 2 {
        return Err(WorstCaseError::Contract(format!("benchmark needs d >= 2, got {d}")));
    }
    scsc_oracle(d, c, lbar, RealVector::filled(d, 1.0))
}

/// Fully built strongly-convex hard instance.
#[derive(Debug)]
pub struct ScscInstance {
    pub d: usize,
    pub constants: SmoothnessConstants,
    pub lbar_xy: f64,
    pub coefficients: ScscCoefficients,
    pub r: f64,
    pub b_tilde: RealVector,
    pub b: RealVector,
    pub x_hat: RealVector,
    pub oracle: QuadraticBilevel,
}

/// Build the SCSC instance; `lbar_xy = None` picks [`default_lbar`].
pub fn build_scsc(d: usize, constants: SmoothnessConstants, lbar_xy: Option<f64>) -> Result<ScscInstance, WorstCaseError> {
    constants.validate()?;
    if d < 4 {
        return Err(WorstCaseError::Contract(format!("SCSC instance needs d >= 4, got {d}")));
    }
    let bound = lbar_feasibility_bound(&constants);
    if constants.l_xy < bound {
        return Err(WorstCaseError::Constraint(format!("l_xy = {} is below the required {bound}", constants.l_xy)));
    }
    let lbar = lbar_xy.unwrap_or_else(|| default_lbar(&constants));
    if !(lbar.is_finite() && lbar >= 0.0) {
        return Err(WorstCaseError::Constraint(format!("lbar_xy = {lbar} must be finite and nonnegative")));
    }
    let coef = scsc_coefficients(&constants, lbar)?;
    let (lam, tau) = (coef.lam_coef, coef.tau_coef);
    let r = scsc_root(lam, tau)?;
    let mut bt = vec![0.0; d];
    bt[0] = (2.0 + lam + tau) * r - (3.0 + lam) * r * r + r * r * r;
    bt[1] = r - 1.0;
    let b_tilde = RealVector::new(bt)?;
    let z = StructuredOperator::z_scsc(d);
    let b = solve_dense(&z, &b_tilde.scaled(1.0 / coef.gamma))?;
    let x_hat = RealVector::from_fn(d, |i| r.powi(i as i32 + 1));
    let oracle = scsc_oracle(d, &constants, lbar, b.clone())?;
    Ok(ScscInstance { d, constants, lbar_xy: lbar, coefficients: coef, r, b_tilde, b, x_hat, oracle })
}

impl ScscInstance {
    pub fn lam_coef(&self) -> f64 {
        self.coefficients.lam_coef
    }

    pub fn tau_coef(&self) -> f64 {
        self.coefficients.tau_coef
    }

    pub fn quartic_residual(&self) -> f64 {
        scsc_quartic(self.lam_coef(), self.tau_coef(), self.r).abs()
    }

    pub fn root_bracket(&self) -> (f64, f64) {
        (scsc_root_lower_bound(self.lam_coef(), self.tau_coef()), 1.0)
    }

    /// `Z⁴ + λZ² + τI`
    pub fn minimizer_operator(&self) -> StructuredOperator {
        let z = StructuredOperator::z_scsc(self.d);
        StructuredOperator::combination(vec![
            (1.0, StructuredOperator::power(z.clone(), 4)),
            (self.lam_coef(), StructuredOperator::power(z, 2)),
            (self.tau_coef(), StructuredOperator::identity(self.d)),
        ])
        .expect("same dimension")
    }

    /// Minimizer from a dense solve of the quartic-in-Z equation.
    pub fn x_star_dense(&self) -> Result<RealVector, WorstCaseError> {
        Ok(solve_dense(&self.minimizer_operator(), &self.b_tilde)?)
    }

    /// Certified distance between the geometric guess and the minimizer.
    pub fn geometric_error_bound(&self) -> f64 {
        (7.0 + self.lam_coef()) / self.tau_coef() * self.r.powi(self.d as i32)
    }

    pub fn feasible_dimension(&self, m: usize) -> Result<usize, WorstCaseError> {
        scsc_feasible_dimension(self.r, self.lam_coef(), self.tau_coef(), m, DEFAULT_DIMENSION_CAP)
    }
}

/// `M = K + QT + Q + 2`
pub fn scsc_support_cap(k: usize, q: usize, t: usize) -> usize {
    k + q * t + q + 2
}

/// `M = K + QT − Q + 3`
pub fn csc_support_cap(k: usize, q: usize, t: usize) -> usize {
    (k + q * t + 3).saturating_sub(q)
}

/// Smallest `d` with `d > max{2M, M + 1 + log_r(τ / (4(7+λ)))}`.
pub fn scsc_feasible_dimension(r: f64, lam: f64, tau: f64, m: usize, cap: usize) -> Result<usize, WorstCaseError> {
    if !(r > 0.0 && r < 1.0) {
        return Err(WorstCaseError::Contract(format!("r = {r} must lie in (0, 1)")));
    }
    let log_term = (tau / (4.0 * (7.0 + lam))).ln() / r.ln();
    let threshold = (2.0 * m as f64).max(m as f64 + 1.0 + log_term);
    let required = threshold.floor() + 1.0;
    if !required.is_finite() || required > cap as f64 {
        let required = if required.is_finite() { required as usize } else { usize::MAX };
        return Err(WorstCaseError::Infeasible { required, cap });
    }
    Ok(required as usize)
}

/// `(μ_x/2)·(‖x* − x0‖/(3√2))²·r^{2M}`
pub fn scsc_gap_floor(instance: &ScscInstance, m: usize, x0: &RealVector) -> Result<f64, WorstCaseError> {
    let required = instance.feasible_dimension(m)?;
    if instance.d < required {
        return Err(WorstCaseError::Contract(format!("d = {} is infeasible for M = {m}; need d >= {required}", instance.d)));
    }
    let x_star = instance.x_star_dense()?;
    let dist = (&x_star - x0).norm() / (3.0 * 2f64.sqrt());
    Ok(0.5 * instance.constants.mu_x * dist * dist * instance.r.powi(2 * m as i32))
}

/// Fully built convex hard instance.
#[derive(Debug)]
pub struct CscInstance {
    pub d: usize,
    pub constants: SmoothnessConstants,
    pub b_scale: f64,
    pub beta: f64,
    pub b_tilde: RealVector,
    pub b: RealVector,
    pub x_star: RealVector,
    pub grad_floor: f64,
    pub oracle: QuadraticBilevel,
}

/// CSC pair:
///
/// f = (L_x/8)xᵀZ²x + (L_y/2)‖y‖²,  g = ½yᵀ(βZ²+μ_y I)y − (L̃xy/2)xᵀZy + bᵀy
pub fn csc_oracle(d: usize, c: &SmoothnessConstants, b: RealVector) -> Result<QuadraticBilevel, WorstCaseError> {
    let beta = (c.ltil_y - c.mu_y) / 4.0;
    let z = StructuredOperator::z_csc(d);
    let z2 = StructuredOperator::power(z.clone(), 2);
    let outer = QuadraticOuter {
        a: StructuredOperator::shifted_scaled(z2.clone(), c.l_x / 4.0, 0.0),
        c: CrossOperator::zero(d, d),
        d: StructuredOperator::scaled_identity(d, c.l_y),
        lin_x: RealVector::zeros(d),
        lin_y: RealVector::zeros(d),
        offset: 0.0,
    };
    let h = StructuredOperator::shifted_scaled(z2, beta, c.mu_y);
    let j = CrossOperator::Square(StructuredOperator::shifted_scaled(z, -c.ltil_xy / 2.0, 0.0));
    Ok(make_quadratic_bilevel(h, j, b, outer, *c)?)
}

/// Gradient-norm floor for supports that avoid the last three coordinates.
pub fn csc_grad_floor(c: &SmoothnessConstants, b_scale: f64, d: usize) -> f64 {
    let beta = (c.ltil_y - c.mu_y) / 4.0;
    let mu = c.mu_y;
    let df = d as f64;
    let num = b_scale * b_scale * (c.ltil_xy * c.ltil_xy * c.l_y / 4.0 + c.l_x * mu * mu / 4.0).powi(2);
    let den = 8.0 * mu.powi(4) * df.powi(4)
        + 16.0 * df * beta.powi(4)
        + 32.0 * df * beta.powi(3) * mu
        + 32.0 * df * beta * beta * mu * mu;
    (num / den).sqrt()
}

/// Build the CSC instance with minimizer `(B/√d)·𝟙`. The declared `mu_x`
/// is replaced by 0 since Φ is only convex.
pub fn build_csc(d: usize, constants: SmoothnessConstants, b_scale: f64) -> Result<CscInstance, WorstCaseError> {
    let constants = SmoothnessConstants { mu_x: 0.0, ..constants };
    constants.validate()?;
    if d < 4 {
        return Err(WorstCaseError::Contract(format!("CSC instance needs d >= 4, got {d}")));
    }
    if !(b_scale > 0.0 && b_scale.is_finite()) {
        return Err(WorstCaseError::Constraint(format!("B = {b_scale} must be positive")));
    }
    let beta = (constants.ltil_y - constants.mu_y) / 4.0;
    let (lx, mu) = (constants.l_x, constants.mu_y);
    let s = b_scale / (d as f64).sqrt();
    let mut bt = vec![0.0; d];
    bt[0] = s * (1.25 * lx * beta * beta + lx * beta * mu + constants.ltil_xy.powi(2) * constants.l_y / 4.0 + lx * mu * mu / 4.0);
    bt[1] = s * (-lx * beta * beta - lx * beta * mu / 2.0);
    bt[2] = s * lx * beta * beta / 4.0;
    let b_tilde = RealVector::new(bt)?;
    let z = StructuredOperator::z_csc(d);
    let b = solve_dense(&z, &b_tilde.scaled(2.0 / (constants.l_y * constants.ltil_xy)))?;
    let oracle = csc_oracle(d, &constants, b.clone())?;
    Ok(CscInstance {
        d,
        constants,
        b_scale,
        beta,
        b_tilde,
        b,
        x_star: RealVector::filled(d, s),
        grad_floor: csc_grad_floor(&constants, b_scale, d),
        oracle,
    })
}

/// Minimum of `‖∇Φ(x)‖` over `x` whose last three coordinates vanish,
/// together with the analytic floor.
pub fn csc_grad_floor_verify(instance: &CscInstance) -> Result<(f64, f64), WorstCaseError> {
    let d = instance.d;
    let hess = instance.oracle.phi_hessian().ok_or(OracleError::Capability("a quadratic Φ"))?;
    // ∇Φ(x) = Hx − c with c = −∇Φ(0)
    let c = -&exact_hypergradient(&instance.oracle, &RealVector::zeros(d))?;
    let reduced = hess.columns(0, d - 3).into_owned();
    let svd = reduced.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-13 * smax) {
        return Err(WorstCaseError::Numeric(format!("reduced system singular (sigma ratio {:e})", smin / smax)));
    }
    let rhs = c.to_dvector();
    let sol = svd.solve(&rhs, 0.0).map_err(|e| WorstCaseError::Numeric(e.to_string()))?;
    let residual = &reduced * sol - rhs;
    Ok((residual.norm(), instance.grad_floor))
}

/// Root of the complexity equation for the convex case, with the two
/// closed-form regime values for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RStar {
    pub r_star: f64,
    /// `B^½ (L̃xy² L_y + L_x μ_y²)^½ / (μ_y ε^½)`
    pub small_beta_value: f64,
    /// `ε^{-½} min{1/μ_y, ε^{-3/2}}`
    pub constant_beta_value: f64,
}

/// Coefficients `(lin, rhs)` of the complexity equation `r⁴ + lin·r = rhs`.
pub fn csc_rstar_equation(c: &SmoothnessConstants, b_scale: f64, eps: f64) -> (f64, f64) {
    let beta = (c.ltil_y - c.mu_y) / 4.0;
    let t = beta / c.mu_y;
    let lin = 2.0 * t.powi(4) + 4.0 * t.powi(3) + 4.0 * t * t;
    let strength = c.ltil_xy * c.ltil_xy * c.l_y + c.l_x * c.mu_y * c.mu_y;
    let rhs = b_scale * b_scale * strength * strength / (128.0 * c.mu_y.powi(4) * eps * eps);
    (lin, rhs)
}

pub fn csc_rstar(c: &SmoothnessConstants, b_scale: f64, eps: f64) -> Result<RStar, WorstCaseError> {
    if !(eps > 0.0 && b_scale > 0.0) {
        return Err(WorstCaseError::Constraint("eps and B must be positive".into()));
    }
    let (lin, rhs) = csc_rstar_equation(c, b_scale, eps);
    let strength = c.ltil_xy * c.ltil_xy * c.l_y + c.l_x * c.mu_y * c.mu_y;
    let hi = rhs.powf(0.25);
    let r_star = if lin == 0.0 {
        hi
    } else {
        let hi = hi * (1.0 + 1e-12);
        bisect_root(|r| r.powi(4) + lin * r - rhs, 0.0, hi, 1e-14 * hi.max(1e-300))?
    };
    Ok(RStar {
        r_star,
        small_beta_value: (b_scale * strength).sqrt() / (c.mu_y * eps.sqrt()),
        constant_beta_value: (1.0 / c.mu_y).min(eps.powf(-1.5)) / eps.sqrt(),
    })
}

/// Derived scalars carried by an instance document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DerivedScalars {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lam_coef: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_coef: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lbar_xy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_floor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceVectors {
    pub b_tilde: RealVector,
    pub b: RealVector,
    /// `x̂` for SCSC, `x*` for CSC.
    pub reference_point: RealVector,
}

/// JSON form of a hard instance; vectors are base64 little-endian f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDocument {
    pub kind: String,
    pub d: usize,
    pub constants: SmoothnessConstants,
    pub derived: DerivedScalars,
    pub vectors: InstanceVectors,
}

impl InstanceDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance documents serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, WorstCaseError> {
        serde_json::from_str(text).map_err(|e| WorstCaseError::Document(e.to_string()))
    }
}

impl ScscInstance {
    pub fn document(&self) -> InstanceDocument {
        let c = &self.coefficients;
        InstanceDocument {
            kind: "scsc".into(),
            d: self.d,
            constants: self.constants,
            derived: DerivedScalars {
                alpha: Some(c.alpha),
                beta: c.beta,
                lam_coef: Some(c.lam_coef),
                tau_coef: Some(c.tau_coef),
                gamma: Some(c.gamma),
                r: Some(self.r),
                lbar_xy: Some(self.lbar_xy),
                ..DerivedScalars::default()
            },
            vectors: InstanceVectors {
                b_tilde: self.b_tilde.clone(),
                b: self.b.clone(),
                reference_point: self.x_hat.clone(),
            },
        }
    }

    /// Rebuild from a document without recomputing any stored quantity.
    pub fn from_document(doc: &InstanceDocument) -> Result<Self, WorstCaseError> {
        let missing = |what: &str| WorstCaseError::Document(format!("scsc document lacks {what}"));
        if doc.kind != "scsc" {
            return Err(WorstCaseError::Document(format!("expected kind scsc, found {}", doc.kind)));
        }
        let der = &doc.derived;
        let coefficients = ScscCoefficients {
            alpha: der.alpha.ok_or_else(|| missing("alpha"))?,
            beta: der.beta,
            lam_coef: der.lam_coef.ok_or_else(|| missing("lam_coef"))?,
            tau_coef: der.tau_coef.ok_or_else(|| missing("tau_coef"))?,
            gamma: der.gamma.ok_or_else(|| missing("gamma"))?,
        };
        let lbar = der.lbar_xy.ok_or_else(|| missing("lbar_xy"))?;
        let v = &doc.vectors;
        for (what, vec) in [("b_tilde", &v.b_tilde), ("b", &v.b), ("x_hat", &v.reference_point)] {
            if vec.dim() != doc.d {
                return Err(WorstCaseError::Document(format!("{what} has dimension {}, expected {}", vec.dim(), doc.d)));
            }
        }
        Ok(ScscInstance {
            d: doc.d,
            constants: doc.constants,
            lbar_xy: lbar,
            coefficients,
            r: der.r.ok_or_else(|| missing("r"))?,
            b_tilde: v.b_tilde.clone(),
            b: v.b.clone(),
            x_hat: v.reference_point.clone(),
            oracle: scsc_oracle(doc.d, &doc.constants, lbar, v.b.clone())?,
        })
    }
}

impl CscInstance {
    pub fn document(&self) -> InstanceDocument {
        InstanceDocument {
            kind: "csc".into(),
            d: self.d,
            constants: self.constants,
            derived: DerivedScalars {
                beta: self.beta,
                b_scale: Some(self.b_scale),
                grad_floor: Some(self.grad_floor),
                ..DerivedScalars::default()
            },
            vectors: InstanceVectors {
                b_tilde: self.b_tilde.clone(),
                b: self.b.clone(),
                reference_point: self.x_star.clone(),
            },
        }
    }

    pub fn from_document(doc: &InstanceDocument) -> Result<Self, WorstCaseError> {
        let missing = |what: &str| WorstCaseError::Document(format!("csc document lacks {what}"));
        if doc.kind != "csc" {
            return Err(WorstCaseError::Document(format!("expected kind csc, found {}", doc.kind)));
        }
        let v = &doc.vectors;
        for (what, vec) in [("b_tilde", &v.b_tilde), ("b", &v.b), ("x_star", &v.reference_point)] {
            if vec.dim() != doc.d {
                return Err(WorstCaseError::Document(format!("{what} has dimension {}, expected {}", vec.dim(), doc.d)));
            }
        }
        Ok(CscInstance {
            d: doc.d,
            constants: doc.constants,
            b_scale: doc.derived.b_scale.ok_or_else(|| missing("b_scale"))?,
            beta: doc.derived.beta,
            b_tilde: v.b_tilde.clone(),
            b: v.b.clone(),
            x_star: v.reference_point.clone(),
            grad_floor: doc.derived.grad_floor.ok_or_else(|| missing("grad_floor"))?,
            oracle: csc_oracle(doc.d, &doc.constants, v.b.clone())?,
        })
    }
}

/// Dense Hessian of Φ, for spectrum checks.
pub fn phi_hessian(oracle: &QuadraticBilevel) -> Result<DMatrix<f64>, WorstCaseError> {
    oracle.phi_hessian().ok_or(WorstCaseError::Oracle(OracleError::Capability("a quadratic Φ")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eig_extremes;
    use crate::oracle::{finite_difference_check, BilevelOracle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Independent root oracle: the quartic is palindromic, so with
    // s = r + 1/r it reduces to s² − (4+λ)s + (4+2λ+τ) = 0.
    fn palindromic_root(lam: f64, tau: f64) -> f64 {
        let a = 4.0 + lam;
        let disc = a * a - 4.0 * (4.0 + 2.0 * lam + tau);
        let s = (a - disc.sqrt()) / 2.0;
        (s - (s * s - 4.0).sqrt()) / 2.0
    }

    #[test]
    fn mild_coefficients() {
        let c = SmoothnessConstants::mild();
        let lbar = default_lbar(&c);
        assert_eq!(lbar, 1.0);
        let k = scsc_coefficients(&c, lbar).unwrap();
        assert_eq!((k.alpha, k.beta), (0.125, 0.125));
        // lead = 0.078125, mid = 0.59375 by hand
        assert!((k.lam_coef - 7.6).abs() < 1e-13);
        assert!((k.tau_coef - 1.6).abs() < 1e-13);
        assert!((k.gamma - 6.4).abs() < 1e-13);
    }

    #[test]
    fn root_matches_palindromic_closed_form() {
        for (lam, tau) in [(7.6, 1.6), (3.0, 2.0), (50.0, 0.01), (1.0, 1e-3), (0.5, 0.05)] {
            let r = scsc_root(lam, tau).unwrap();
            let oracle = palindromic_root(lam, tau);
            assert!((r - oracle).abs() < 1e-12, "lam={lam} tau={tau}: {r} vs {oracle}");
            assert!(r > scsc_root_lower_bound(lam, tau) && r < 1.0);
            assert!(scsc_quartic(lam, tau, r).abs() <= 1e-10);
        }
        // frozen from the closed form above
        assert!((scsc_root(7.6, 1.6).unwrap() - 0.630_392_738_973_514).abs() < 1e-12);
    }

    #[test]
    fn mild_instance_certificates() {
        for d in [16, 32] {
            let inst = build_scsc(d, SmoothnessConstants::mild(), None).unwrap();
            assert!(inst.quartic_residual() <= 1e-10);
            let (lo, hi) = inst.root_bracket();
            assert!(inst.r > lo && inst.r < hi);
            assert!(inst.b_tilde.as_slice()[2..].iter().all(|v| *v == 0.0));
            let zb = StructuredOperator::z_scsc(d).mul_vec(&inst.b).scaled(inst.coefficients.gamma);
            assert!((&zb - &inst.b_tilde).norm() <= 1e-10 * inst.b_tilde.norm());
            let xs = inst.x_star_dense().unwrap();
            assert!((&inst.x_hat - &xs).norm() <= inst.geometric_error_bound());
            // the dense minimizer of Φ agrees with the reduced equation
            let (x_phi, _) = inst.oracle.phi_minimizer().unwrap();
            assert!((&x_phi - &xs).norm() <= 1e-9 * xs.norm());
            assert!(exact_hypergradient(&inst.oracle, &xs).unwrap().norm() <= 1e-9 * inst.b_tilde.norm());
        }
    }

    #[test]
    fn b_matches_closed_form_inverse() {
        let d = 12;
        let inst = build_scsc(d, SmoothnessConstants::mild(), None).unwrap();
        let w = inst.b_tilde.scaled(1.0 / inst.coefficients.gamma);
        let closed = RealVector::from_fn(d, |i| (0..d).filter(|j| i + j < d).map(|j| w[j]).sum());
        assert!((&closed - &inst.b).norm() <= 1e-12 * closed.norm());
    }

    #[test]
    fn scsc_phi_strongly_convex() {
        for d in [8, 32, 64] {
            let inst = build_scsc(d, SmoothnessConstants::mild(), None).unwrap();
            let h = phi_hessian(&inst.oracle).unwrap();
            let (lo, _) = crate::linalg::dense_eig_extremes(&h).unwrap();
            assert!(lo >= inst.constants.mu_x * (1.0 - 1e-8), "d={d}: {lo}");
        }
    }

    #[test]
    fn inner_hessian_spectrum() {
        let inst = build_scsc(16, SmoothnessConstants::mild(), None).unwrap();
        let (lo, hi) = symmetric_eig_extremes(inst.oracle.inner_hessian()).unwrap();
        assert!(lo >= 0.5 && hi <= 1.0);
    }

    #[test]
    fn infeasible_coupling_rejected() {
        let c = SmoothnessConstants { l_x: 10.0, ltil_y: 10.0, l_xy: 0.1, ..SmoothnessConstants::mild() };
        assert!(matches!(build_scsc(8, c, None), Err(WorstCaseError::Constraint(_))));
        assert!(matches!(build_scsc(3, SmoothnessConstants::mild(), None), Err(WorstCaseError::Contract(_))));
    }

    #[test]
    fn feasible_dimension_examples() {
        assert_eq!(scsc_feasible_dimension(0.5, 3.0, 2.0, 10, 4096).unwrap(), 21);
        assert_eq!(scsc_feasible_dimension(1e-9, 3.0, 2.0, 1, 4096).unwrap(), 3);
        let inst = build_scsc(16, SmoothnessConstants::mild(), None).unwrap();
        assert!(inst.feasible_dimension(32).unwrap() <= 256);
        assert!(matches!(
            scsc_feasible_dimension(1.0 - 1e-9, 3.0, 1e-6, 10, 4096),
            Err(WorstCaseError::Infeasible { .. })
        ));
    }

    #[test]
    fn gap_floor_behaviour() {
        let m = 16;
        let d = build_scsc(8, SmoothnessConstants::mild(), None).unwrap().feasible_dimension(m).unwrap();
        let inst = build_scsc(d, SmoothnessConstants::mild(), None).unwrap();
        let x0 = RealVector::zeros(d);
        let xs = inst.x_star_dense().unwrap();
        let f0 = scsc_gap_floor(&inst, 0, &x0).unwrap();
        assert!((f0 - 0.5 * inst.constants.mu_x * xs.dot(&xs) / 18.0).abs() <= 1e-15 * f0.max(1e-300));
        let mut prev = f0;
        for m in 1..=m {
            let f = scsc_gap_floor(&inst, m, &x0).unwrap();
            assert!(f < prev && f > 0.0);
            prev = f;
        }
        let small = build_scsc(8, SmoothnessConstants::mild(), None).unwrap();
        assert!(matches!(scsc_gap_floor(&small, 16, &RealVector::zeros(8)), Err(WorstCaseError::Contract(_))));
    }

    #[test]
    fn csc_minimizer_and_floor() {
        for d in [8, 12, 20] {
            let inst = build_csc(d, SmoothnessConstants::mild(), 1.0).unwrap();
            assert!((inst.x_star.norm() - 1.0).abs() < 1e-15);
            assert!(inst.b_tilde.as_slice()[3..].iter().all(|v| *v == 0.0));
            let g = exact_hypergradient(&inst.oracle, &inst.x_star).unwrap();
            assert!(g.norm() <= 1e-9 * inst.b_tilde.norm(), "d={d}: {}", g.norm());
            let (measured, floor) = csc_grad_floor_verify(&inst).unwrap();
            assert!(measured >= floor, "d={d}: {measured} < {floor}");
            if d == 20 {
                assert!(measured / floor <= 1e3, "ratio {}", measured / floor);
            }
        }
    }

    #[test]
    fn csc_floor_formula() {
        let c = SmoothnessConstants { ltil_y: 2.0, ..SmoothnessConstants::mild() };
        let beta: f64 = 0.375;
        let d = 20.0f64;
        let expect = ((0.25f64 + 0.0625).powi(2)
            / (8.0 * 0.0625 * d.powi(4) + 16.0 * d * beta.powi(4) + 32.0 * d * beta.powi(3) * 0.5 + 32.0 * d * beta * beta * 0.25))
            .sqrt();
        assert!((csc_grad_floor(&c, 1.0, 20) - expect).abs() < 1e-15);
    }

    #[test]
    fn csc_phi_convex() {
        for d in [8, 32, 64] {
            let inst = build_csc(d, SmoothnessConstants::mild(), 1.0).unwrap();
            let h = phi_hessian(&inst.oracle).unwrap();
            let (lo, hi) = crate::linalg::dense_eig_extremes(&h).unwrap();
            assert!(lo >= -1e-10 * hi);
        }
    }

    #[test]
    fn hypergradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scsc = build_scsc(16, SmoothnessConstants::mild(), None).unwrap();
        let csc = build_csc(16, SmoothnessConstants::mild(), 1.0).unwrap();
        for _ in 0..10 {
            let x = RealVector::from_fn(16, |_| rng.random_range(-1.0..1.0));
            assert!(finite_difference_check(&scsc.oracle, &x, 1e-5).unwrap() <= 1e-6);
            assert!(finite_difference_check(&csc.oracle, &x, 1e-5).unwrap() <= 1e-6);
            for o in [&scsc.oracle, &csc.oracle] {
                let y = o.y_star(&x).unwrap();
                assert!(o.grad_y_g(&x, &y).norm() <= 1e-9 * (1.0 + x.norm()));
            }
        }
    }

    #[test]
    fn rstar_examples() {
        let c = SmoothnessConstants::mild();
        let flat = SmoothnessConstants { ltil_y: c.mu_y, ..c };
        let a = csc_rstar(&flat, 1.0, 1e-3).unwrap();
        let strength: f64 = 1.0 + 0.25;
        let rhs = strength * strength / (128.0 * 0.0625 * 1e-6);
        assert!((a.r_star - rhs.powf(0.25)).abs() <= 1e-12 * a.r_star);
        let b = csc_rstar(&flat, 1.0, 5e-4).unwrap();
        assert!((b.r_star / a.r_star - 2f64.sqrt()).abs() < 1e-10);
        let small_beta = SmoothnessConstants { ltil_y: 0.6, ..c };
        let r = csc_rstar(&small_beta, 1.0, 1e-4).unwrap();
        let ratio = r.r_star / r.small_beta_value;
        assert!((0.25..=4.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn documents_round_trip_bit_exactly() {
        let inst = build_scsc(16, SmoothnessConstants::mild(), None).unwrap();
        let doc = inst.document();
        let json = doc.to_json();
        let back = InstanceDocument::from_json(&json).unwrap();
        assert_eq!(back, doc);
        let rebuilt = ScscInstance::from_document(&back).unwrap();
        assert_eq!(rebuilt.document().to_json(), json);
        let csc = build_csc(12, SmoothnessConstants::mild(), 2.0).unwrap();
        let json = csc.document().to_json();
        let rebuilt = CscInstance::from_document(&InstanceDocument::from_json(&json).unwrap()).unwrap();
        assert_eq!(rebuilt.document().to_json(), json);
        assert!(CscInstance::from_document(&doc).is_err());
    }

    #[test]
    fn benchmark_defined_without_inner_curvature_spread() {
        let c = SmoothnessConstants { ltil_y: 0.5, ..SmoothnessConstants::mild() };
        let o = scsc_benchmark(16, &c, 1.0).unwrap();
        let (xs, _) = o.phi_minimizer().unwrap();
        assert!(exact_hypergradient(&o, &xs).unwrap().norm() < 1e-10);
        let zb = StructuredOperator::z_scsc(16).mul_vec(o.inner_linear());
        assert_eq!(zb.as_slice()[0], 1.0);
        assert!(zb.as_slice()[1..].iter().all(|v| *v == 0.0));
    }
}
