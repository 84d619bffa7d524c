//! Inner solvers and hypergradient estimators.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::RealVector;
use crate::oracle::{BilevelOracle, OracleError, SmoothnessConstants};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypergradError {
    #[error("{stage} produced a non-finite iterate at step {step}")]
    Divergence { stage: &'static str, step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Accelerated gradient descent on `g(x, ·)` with constant momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgdConfig {
    pub steps: usize,
    /// `1 / ltil_y`
    pub step: f64,
    /// `ltil_y / mu_y`
    pub kappa_y: f64,
}

impl AgdConfig {
    pub fn new(steps: usize, ltil_y: f64, mu_y: f64) -> Result<Self, HypergradError> {
        if steps == 0 {
            return Err(HypergradError::Config("AGD needs at least one step".into()));
        }
        if !(mu_y > 0.0 && ltil_y >= mu_y && ltil_y.is_finite()) {
            return Err(HypergradError::Config(format!("need 0 < mu_y <= ltil_y, got {mu_y}, {ltil_y}")));
        }
        Ok(Self { steps, step: 1.0 / ltil_y, kappa_y: ltil_y / mu_y })
    }

    pub fn from_constants(steps: usize, c: &SmoothnessConstants) -> Result<Self, HypergradError> {
        Self::new(steps, c.ltil_y, c.mu_y)
    }

    /// Coefficient of the newest iterate, `2√κ/(√κ+1)`.
    pub fn lead(&self) -> f64 {
        let s = self.kappa_y.sqrt();
        2.0 * s / (s + 1.0)
    }

    /// `(√κ−1)/(√κ+1)`
    pub fn momentum(&self) -> f64 {
        let s = self.kappa_y.sqrt();
        (s - 1.0) / (s + 1.0)
    }
}

/// Heavy-ball iteration for `H v = rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeavyBallConfig {
    pub steps: usize,
    /// `4/(√ltil_y + √mu_y)²`
    pub step: f64,
    /// `max{(1−√(step·mu_y))², (1−√(step·ltil_y))²}`
    pub momentum: f64,
}

impl HeavyBallConfig {
    pub fn new(steps: usize, ltil_y: f64, mu_y: f64) -> Result<Self, HypergradError> {
        if !(mu_y > 0.0 && ltil_y >= mu_y && ltil_y.is_finite()) {
            return Err(HypergradError::Config(format!("need 0 < mu_y <= ltil_y, got {mu_y}, {ltil_y}")));
        }
        let step = 4.0 / (ltil_y.sqrt() + mu_y.sqrt()).powi(2);
        let momentum = (1.0 - (step * mu_y).sqrt()).powi(2).max((1.0 - (step * ltil_y).sqrt()).powi(2));
        Ok(Self { steps, step, momentum })
    }

    pub fn from_constants(steps: usize, c: &SmoothnessConstants) -> Result<Self, HypergradError> {
        Self::new(steps, c.ltil_y, c.mu_y)
    }
}

/// Run `cfg.steps` accelerated steps on `g(x, ·)` from `y0` and return the
/// last `y` iterate.
pub fn agd_inner<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &RealVector,
    y0: &RealVector,
    cfg: &AgdConfig,
) -> Result<RealVector, HypergradError> {
    let (lead, momentum) = (cfg.lead(), cfg.momentum());
    let mut y_prev = y0.clone();
    let mut s = y0.clone();
    for t in 1..=cfg.steps {
        let mut y = s;
        y.axpy(-cfg.step, &oracle.grad_y_g(x, &y));
        if !y.is_finite() {
            return Err(HypergradError::Divergence { stage: "inner AGD", step: t });
        }
        s = RealVector::lincomb(lead, &y, -momentum, &y_prev);
        y_prev = y;
    }
    Ok(y_prev)
}

/// Heavy-ball solve from `v₀ = v₁ = 0`. Each of the `cfg.steps` updates
/// queries `hess_apply` once; returns the final iterate.
pub fn heavy_ball_solve(
    hess_apply: impl FnMut(&RealVector) -> RealVector,
    rhs: &RealVector,
    cfg: &HeavyBallConfig,
) -> Result<RealVector, HypergradError> {
    heavy_ball_solve_observed(hess_apply, rhs, cfg, |_, _| {})
}

/// As [`heavy_ball_solve`], calling `on_iterate(t, v)` after update `t`.
pub fn heavy_ball_solve_observed(
    hess_apply: impl FnMut(&RealVector) -> RealVector,
    rhs: &RealVector,
    cfg: &HeavyBallConfig,
    on_iterate: impl FnMut(usize, &RealVector),
) -> Result<RealVector, HypergradError> {
    heavy_ball_solve_from(hess_apply, rhs, &RealVector::zeros(rhs.dim()), cfg, on_iterate)
}

/// Heavy ball started from `v₀ = v₁ = start`.
pub fn heavy_ball_solve_from(
    mut hess_apply: impl FnMut(&RealVector) -> RealVector,
    rhs: &RealVector,
    start: &RealVector,
    cfg: &HeavyBallConfig,
    mut on_iterate: impl FnMut(usize, &RealVector),
) -> Result<RealVector, HypergradError> {
    if start.dim() != rhs.dim() {
        return Err(HypergradError::Config(format!("start has dimension {}, rhs {}", start.dim(), rhs.dim())));
    }
    let mut v_prev = start.clone();
    let mut v = start.clone();
    for t in 1..=cfg.steps {
        let mut residual = hess_apply(&v);
        residual.axpy(-1.0, rhs);
        let mut next = v.clone();
        next.axpy(-cfg.step, &residual);
        next.axpy(cfg.momentum, &(&v - &v_prev));
        if !next.is_finite() {
            return Err(HypergradError::Divergence { stage: "heavy ball", step: t });
        }
        v_prev = std::mem::replace(&mut v, next);
        on_iterate(t, &v);
    }
    Ok(v)
}

/// A hypergradient estimate with optional diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergradientEstimate {
    pub g: RealVector,
    /// Last inner iterate, reused by warm starts.
    pub y_inner: RealVector,
    /// `‖y_N − y*(x)‖` when the exact surface is present.
    pub inner_residual: Option<f64>,
    pub hb_iterations: usize,
    /// Right-hand side of the AID error bound when `x*` is known.
    pub error_bound: Option<f64>,
}

/// Distances entering the AID error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `‖x − x*‖`
    pub dist_to_opt: f64,
    /// `‖y0 − y*(x*)‖`; equals `‖y*(x*)‖` for cold starts.
    pub y0_to_inner_opt: f64,
    /// `‖∇_y f(x*, y*(x*))‖`
    pub grad_y_f_at_opt: f64,
}

impl BoundInputs {
    /// Gather the inputs from the exact surface, if `x*` is available.
    pub fn from_exact<O: BilevelOracle + ?Sized>(oracle: &O, x: &RealVector, y0: &RealVector) -> Option<Self> {
        let ex = oracle.exact()?;
        let (x_star, _) = ex.phi_minimizer().ok()?;
        let y_opt = ex.y_star(&x_star).ok()?;
        Some(Self {
            dist_to_opt: (x - &x_star).norm(),
            y0_to_inner_opt: (y0 - &y_opt).norm(),
            grad_y_f_at_opt: ex.grad_y_f(&x_star, &y_opt).norm(),
        })
    }
}

/// Coefficients `(c_inner, c_linear)` with
/// `bound = c_inner·exp(−N/(2√κ_y)) + c_linear·ρ^M`.
pub fn aid_error_coefficients(c: &SmoothnessConstants, inputs: &BoundInputs) -> (f64, f64) {
    let mu = c.mu_y;
    let m_k = inputs.y0_to_inner_opt + c.ltil_xy / mu * inputs.dist_to_opt;
    let n_k = inputs.grad_y_f_at_opt + (c.l_xy + c.l_y * c.ltil_xy / mu) * inputs.dist_to_opt;
    let sq = ((c.ltil_y + mu) / mu).sqrt();
    let lip = c.l_y + 2.0 * c.ltil_xy * c.l_y / mu + (c.rho_xy / mu + c.ltil_xy * c.rho_yy / (mu * mu)) * n_k;
    (sq * lip * m_k, c.ltil_xy / mu * n_k)
}

/// Upper bound on `‖G − ∇Φ(x)‖` for `N` inner and `M` heavy-ball steps.
pub fn aid_error_bound(c: &SmoothnessConstants, inputs: &BoundInputs, n: usize, m: usize) -> f64 {
    let (c_inner, c_linear) = aid_error_coefficients(c, inputs);
    let sk = c.kappa_y().sqrt();
    let rho = (sk - 1.0) / (sk + 1.0);
    c_inner * (-(n as f64) / (2.0 * sk)).exp() + c_linear * rho.powi(m as i32)
}

/// AID estimate: AGD for `y`, heavy ball for `[∇²_y g]⁻¹ ∇_y f`, one
/// Jacobian-vector product. Uses `N + 2` gradients, `M` Hessian-vector
/// products and one Jacobian-vector product.
pub fn aid_estimate<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &RealVector,
    y0: &RealVector,
    agd: &AgdConfig,
    hb: &HeavyBallConfig,
) -> Result<HypergradientEstimate, HypergradError> {
    let y = agd_inner(oracle, x, y0, agd)?;
    let gy = oracle.grad_y_f(x, &y);
    let v = heavy_ball_solve(|v| oracle.hess_y_g_vec(x, &y, v), &gy, hb)?;
    let mut g = oracle.grad_x_f(x, &y);
    g.axpy(-1.0, &oracle.jac_xy_g_vec(x, &y, &v));
    if !g.is_finite() {
        return Err(HypergradError::Divergence { stage: "hypergradient", step: 0 });
    }
    let inner_residual = match oracle.exact() {
        Some(ex) => Some((&y - &ex.y_star(x)?).norm()),
        None => None,
    };
    let error_bound =
        BoundInputs::from_exact(oracle, x, y0).map(|inputs| aid_error_bound(oracle.constants(), &inputs, agd.steps, hb.steps));
    Ok(HypergradientEstimate { g, y_inner: y, inner_residual, hb_iterations: hb.steps, error_bound })
}

/// ITD estimate: differentiate through `n` plain gradient steps of size
/// `eta`, accumulated by a reverse sweep. Uses `n + 2` gradients, `n − 1`
/// Hessian-vector and `n` Jacobian-vector products.
pub fn itd_estimate<O: BilevelOracle + ?Sized>(
    oracle: &O,
    x: &RealVector,
    y0: &RealVector,
    n: usize,
    eta: f64,
) -> Result<HypergradientEstimate, HypergradError> {
    let ltil = oracle.constants().ltil_y;
    if n == 0 {
        return Err(HypergradError::Config("ITD needs at least one inner step".into()));
    }
    if !(eta > 0.0 && eta <= 1.0 / ltil * (1.0 + 1e-12)) {
        return Err(HypergradError::Config(format!("eta = {eta} must lie in (0, 1/ltil_y]")));
    }
    let mut ys = Vec::with_capacity(n + 1);
    ys.push(y0.clone());
    for t in 1..=n {
        let prev = &ys[t - 1];
        let mut y = prev.clone();
        y.axpy(-eta, &oracle.grad_y_g(x, prev));
        if !y.is_finite() {
            return Err(HypergradError::Divergence { stage: "inner GD", step: t });
        }
        ys.push(y);
    }
    let y_n = &ys[n];
    let mut w = oracle.grad_y_f(x, y_n);
    let mut g = oracle.grad_x_f(x, y_n);
    let mut acc = RealVector::zeros(g.dim());
    for t in (0..n).rev() {
        acc.axpy(1.0, &oracle.jac_xy_g_vec(x, &ys[t], &w));
        if t > 0 {
            w.axpy(-eta, &oracle.hess_y_g_vec(x, &ys[t], &w));
        }
    }
    g.axpy(-eta, &acc);
    if !g.is_finite() {
        return Err(HypergradError::Divergence { stage: "hypergradient", step: n });
    }
    let inner_residual = match oracle.exact() {
        Some(ex) => Some((y_n - &ex.y_star(x)?).norm()),
        None => None,
    };
    Ok(HypergradientEstimate { g, y_inner: ys.pop().expect("n >= 1"), inner_residual, hb_iterations: 0, error_bound: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::StructuredOperator;
    use crate::oracle::{
        counted, exact_hypergradient, make_quadratic_bilevel, CrossOperator, ExactSurface, QuadraticOuter,
    };
    use crate::worst_case::scsc_benchmark;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bench_constants() -> SmoothnessConstants {
        SmoothnessConstants { mu_x: 0.1, mu_y: 0.25, ..SmoothnessConstants::mild() }
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> RealVector {
        RealVector::from_fn(d, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn coefficient_examples() {
        let a = AgdConfig::new(5, 4.0, 1.0).unwrap();
        assert!((a.momentum() - 1.0 / 3.0).abs() < 1e-15);
        assert!((a.lead() - 4.0 / 3.0).abs() < 1e-15);
        let h = HeavyBallConfig::new(5, 4.0, 1.0).unwrap();
        assert!((h.step - 4.0 / 9.0).abs() < 1e-15);
        assert!((h.momentum - 1.0 / 9.0).abs() < 1e-15);
        let id = HeavyBallConfig::new(1, 1.0, 1.0).unwrap();
        assert_eq!((id.step, id.momentum), (1.0, 0.0));
        assert!(AgdConfig::new(0, 1.0, 1.0).is_err());
    }

    #[test]
    fn heavy_ball_identity_one_step() {
        let cfg = HeavyBallConfig::new(1, 1.0, 1.0).unwrap();
        let rhs = RealVector::new(vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(heavy_ball_solve(|v| v.clone(), &rhs, &cfg).unwrap(), rhs);
    }

    #[test]
    fn agd_fixed_point() {
        let o = scsc_benchmark(12, &bench_constants(), 1.0).unwrap();
        let x = RealVector::filled(12, 0.3);
        let ys = o.y_star(&x).unwrap();
        let cfg = AgdConfig::from_constants(15, o.constants()).unwrap();
        let y = agd_inner(&o, &x, &ys, &cfg).unwrap();
        assert!((&y - &ys).norm() <= 1e-12 * ys.norm());
    }

    #[test]
    fn agd_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let o = scsc_benchmark(32, &bench_constants(), 1.0).unwrap();
        let c = *o.constants();
        for _ in 0..5 {
            let x = random_vec(&mut rng, 32);
            let ys = o.y_star(&x).unwrap();
            for n in 1..=20 {
                let cfg = AgdConfig::from_constants(n, &c).unwrap();
                let y = agd_inner(&o, &x, &RealVector::zeros(32), &cfg).unwrap();
                let envelope = ((c.ltil_y + c.mu_y) / c.mu_y).sqrt() * ys.norm() * (-(n as f64) / (2.0 * c.kappa_y().sqrt())).exp();
                assert!((&y - &ys).norm() <= envelope, "n={n}");
            }
        }
    }

    fn random_spd(rng: &mut ChaCha8Rng, d: usize, kappa: f64) -> DMatrix<f64> {
        let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let q = g.qr().q();
        let eig = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(d, |i, _| {
            if i == 0 {
                1.0
            } else if i == d - 1 {
                kappa
            } else {
                rng.random_range(1.0..kappa)
            }
        }));
        let m = &q * eig * q.transpose();
        0.5 * (&m + m.transpose())
    }

    // Least-squares slope of ln(err) against step index.
    fn log_slope(errs: &[(usize, f64)]) -> f64 {
        let n = errs.len() as f64;
        let mx = errs.iter().map(|(t, _)| *t as f64).sum::<f64>() / n;
        let my = errs.iter().map(|(_, e)| e.ln()).sum::<f64>() / n;
        let sxy: f64 = errs.iter().map(|(t, e)| (*t as f64 - mx) * (e.ln() - my)).sum();
        let sxx: f64 = errs.iter().map(|(t, _)| (*t as f64 - mx).powi(2)).sum();
        sxy / sxx
    }

    #[test]
    fn heavy_ball_asymptotic_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = 50;
        let op = StructuredOperator::dense(random_spd(&mut rng, d, 100.0)).unwrap();
        let cfg = HeavyBallConfig::new(200, 100.0, 1.0).unwrap();
        // With a zero right-hand side the iterate is the error itself, so
        // the tail is not masked by cancellation against the solution.
        let start = random_vec(&mut rng, d);
        let mut errs = Vec::new();
        heavy_ball_solve_from(|v| op.mul_vec(v), &RealVector::zeros(d), &start, &cfg, |t, v| errs.push((t, v.norm())))
            .unwrap();
        let slope = log_slope(&errs[150..]);
        let target = (9.0f64 / 11.0).ln();
        assert!((slope - target).abs() <= 0.1 * target.abs(), "{slope} vs {target}");

        let rhs = random_vec(&mut rng, d);
        let v_star = crate::linalg::solve_dense(&op, &rhs).unwrap();
        let mut errs = Vec::new();
        heavy_ball_solve_observed(|v| op.mul_vec(v), &rhs, &cfg, |t, v| errs.push((t, (v - &v_star).norm())))
            .unwrap();
        let slope = log_slope(&errs[50..100]);
        assert!((slope - target).abs() <= 0.1 * target.abs(), "{slope} vs {target}");
    }

    #[test]
    fn aid_footprint_and_exact_regime() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let o = scsc_benchmark(16, &bench_constants(), 1.0).unwrap();
        let c = *o.constants();
        for (n, m) in [(3, 4), (10, 1), (60, 60)] {
            let (co, handle) = counted(&o, 2.0);
            let x = random_vec(&mut rng, 16);
            let est = aid_estimate(
                &co,
                &x,
                &RealVector::zeros(16),
                &AgdConfig::from_constants(n, &c).unwrap(),
                &HeavyBallConfig::from_constants(m, &c).unwrap(),
            )
            .unwrap();
            let s = handle.snapshot();
            assert_eq!((s.n_g, s.n_h, s.n_j), (n as u64 + 2, m as u64, 1));
            let exact = exact_hypergradient(&o, &x).unwrap();
            let err = (&est.g - &exact).norm();
            assert!(err <= est.error_bound.unwrap());
            if n == 60 {
                assert!(err <= 1e-8 * (1.0 + exact.norm()), "{err}");
            }
        }
    }

    #[test]
    fn decoupled_ignores_linear_solve() {
        let c = SmoothnessConstants { mu_x: 1.0, mu_y: 1.0, l_x: 1.0, l_y: 1.0, l_xy: 1.0, ltil_xy: 1.0, ltil_y: 1.0, rho_xy: 0.0, rho_yy: 0.0 };
        let o = make_quadratic_bilevel(
            StructuredOperator::identity(3),
            CrossOperator::zero(3, 3),
            RealVector::zeros(3),
            QuadraticOuter::separable(3, 3),
            c,
        )
        .unwrap();
        let x = RealVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let y0 = RealVector::filled(3, 0.7);
        for m in [1, 4] {
            let est = aid_estimate(&o, &x, &y0, &AgdConfig::new(2, 1.0, 1.0).unwrap(), &HeavyBallConfig::new(m, 1.0, 1.0).unwrap())
                .unwrap();
            assert_eq!(est.g, o.grad_x_f(&x, &est.y_inner));
        }
        let est = itd_estimate(&o, &x, &y0, 3, 1.0).unwrap();
        assert_eq!(est.g, o.grad_x_f(&x, &est.y_inner));
    }

    #[test]
    fn itd_single_step_formula() {
        let o = scsc_benchmark(8, &bench_constants(), 1.0).unwrap();
        let x = RealVector::filled(8, 0.2);
        let y0 = RealVector::zeros(8);
        let eta = 1.0 / o.constants().ltil_y;
        let est = itd_estimate(&o, &x, &y0, 1, eta).unwrap();
        let mut y1 = y0.clone();
        y1.axpy(-eta, &o.grad_y_g(&x, &y0));
        let mut expect = o.grad_x_f(&x, &y1);
        expect.axpy(-eta, &o.jac_xy_g_vec(&x, &y0, &o.grad_y_f(&x, &y1)));
        assert!((&est.g - &expect).norm() <= 1e-15 * expect.norm());
    }

    #[test]
    fn itd_footprint_and_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let o = scsc_benchmark(16, &bench_constants(), 1.0).unwrap();
        let x = random_vec(&mut rng, 16);
        let (co, handle) = counted(&o, 2.0);
        let eta = 1.0 / o.constants().ltil_y;
        let est = itd_estimate(&co, &x, &RealVector::zeros(16), 200, eta).unwrap();
        let s = handle.snapshot();
        assert_eq!((s.n_g, s.n_h, s.n_j), (202, 199, 200));
        let exact = exact_hypergradient(&o, &x).unwrap();
        assert!((&est.g - &exact).norm() <= 1e-4 * (1.0 + exact.norm()));
    }

    #[test]
    fn aid_itd_agree_at_large_budgets() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let o = scsc_benchmark(16, &bench_constants(), 1.0).unwrap();
        let c = *o.constants();
        let agd = AgdConfig::from_constants(200, &c).unwrap();
        let hb = HeavyBallConfig::from_constants(200, &c).unwrap();
        for _ in 0..5 {
            let x = random_vec(&mut rng, 16);
            let a = aid_estimate(&o, &x, &RealVector::zeros(16), &agd, &hb).unwrap();
            let t = itd_estimate(&o, &x, &RealVector::zeros(16), 1000, 1.0 / c.ltil_y).unwrap();
            let scale = 1.0 + exact_hypergradient(&o, &x).unwrap().norm();
            assert!((&a.g - &t.g).norm() <= 1e-6 * scale);
        }
    }

    #[test]
    fn heavy_ball_budget_monotone() {
        let o = scsc_benchmark(32, &bench_constants(), 1.0).unwrap();
        let c = *o.constants();
        let x = RealVector::filled(32, 0.5);
        let y = o.y_star(&x).unwrap();
        let rhs = o.grad_y_f(&x, &y);
        let v_star = o.solve_hess_y_g(&x, &y, &rhs).unwrap();
        let err = |m: usize| {
            let cfg = HeavyBallConfig::from_constants(m, &c).unwrap();
            (&heavy_ball_solve(|v| o.hess_y_g_vec(&x, &y, v), &rhs, &cfg).unwrap() - &v_star).norm()
        };
        for m in [1, 5, 10, 20] {
            assert!(err(m + 50) <= err(m));
        }
    }

    #[test]
    fn divergence_reported() {
        let cfg = HeavyBallConfig { steps: 3000, step: 10.0, momentum: 0.0 };
        let rhs = RealVector::filled(2, 1.0);
        assert!(matches!(
            heavy_ball_solve(|v| v.scaled(1.0), &rhs, &cfg),
            Err(HypergradError::Divergence { stage: "heavy ball", .. })
        ));
    }
}
