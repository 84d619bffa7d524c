//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use bilevel_core::lower_bound::Budgets;
use bilevel_core::oracle::SmoothnessConstants;
use serde::{Deserialize, Serialize};

use crate::BenchError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub instance: InstanceSpec,
    #[serde(default)]
    pub solver: Option<SolverSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub lower_bound: Option<LowerBoundSpec>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    /// `f = (l_x/2)‖x − 𝟙‖² + (l_y/2)‖y‖²`, `g = (mu_y/2)‖y‖² + 𝟙ᵀy`.
    Decoupled,
    /// Quadratic SCSC pair with `b = 𝟙`.
    ScscBenchmark,
    /// Strongly convex hard instance.
    Scsc,
    /// Convex hard instance.
    Csc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `mu_x = mu_y = 0.5`, other constants 1.
    Mild,
    /// `mu_x = 0.1`, `mu_y = 0.25`, other constants 1.
    Benchmark,
}

impl Preset {
    pub fn constants(self) -> SmoothnessConstants {
        match self {
            Preset::Mild => SmoothnessConstants::mild(),
            Preset::Benchmark => SmoothnessConstants { mu_x: 0.1, mu_y: 0.25, ..SmoothnessConstants::mild() },
        }
    }
}

/// Per-field overrides on top of a preset.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsPatch {
    pub mu_x: Option<f64>,
    pub mu_y: Option<f64>,
    pub l_x: Option<f64>,
    pub l_y: Option<f64>,
    pub l_xy: Option<f64>,
    pub ltil_xy: Option<f64>,
    pub ltil_y: Option<f64>,
    pub rho_xy: Option<f64>,
    pub rho_yy: Option<f64>,
}

impl ConstantsPatch {
    pub fn apply(&self, base: SmoothnessConstants) -> SmoothnessConstants {
        SmoothnessConstants {
            mu_x: self.mu_x.unwrap_or(base.mu_x),
            mu_y: self.mu_y.unwrap_or(base.mu_y),
            l_x: self.l_x.unwrap_or(base.l_x),
            l_y: self.l_y.unwrap_or(base.l_y),
            l_xy: self.l_xy.unwrap_or(base.l_xy),
            ltil_xy: self.ltil_xy.unwrap_or(base.ltil_xy),
            ltil_y: self.ltil_y.unwrap_or(base.ltil_y),
            rho_xy: self.rho_xy.unwrap_or(base.rho_xy),
            rho_yy: self.rho_yy.unwrap_or(base.rho_yy),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub kind: InstanceKind,
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub constants: Option<ConstantsPatch>,
    /// Sets `ltil_y = kappa_y · mu_y` after the other overrides.
    #[serde(default)]
    pub kappa_y: Option<f64>,
    /// Norm of the convex instance's minimizer.
    #[serde(default)]
    pub b_scale: Option<f64>,
    #[serde(default)]
    pub lbar_xy: Option<f64>,
}

impl InstanceSpec {
    pub fn dimension(&self) -> usize {
        self.d.unwrap_or(match self.kind {
            InstanceKind::Decoupled => 4,
            InstanceKind::Csc => 20,
            _ => 32,
        })
    }

    pub fn resolved_constants(&self) -> SmoothnessConstants {
        let base = self.preset.unwrap_or(match self.kind {
            InstanceKind::ScscBenchmark => Preset::Benchmark,
            _ => Preset::Mild,
        });
        let mut c = self.constants.unwrap_or_default().apply(base.constants());
        if let Some(k) = self.kappa_y {
            c.ltil_y = k * c.mu_y;
        }
        c
    }

    pub fn b_scale(&self) -> f64 {
        self.b_scale.unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Accbio,
    AccbioBg,
    BaselineAidGd,
}

/// Inner budget: a fixed count or `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepBudget {
    Fixed(usize),
    #[default]
    #[serde(with = "auto_tag")]
    Auto,
}

mod auto_tag {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(D::Error::custom(format!("expected a count or \"auto\", found \"{s}\"")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeSpec {
    #[default]
    QuadraticG,
    BoundedGradient,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusRule {
    /// `R = B²`
    BSquared,
    /// `R = B`
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RadiusSpec {
    Value(f64),
    Rule(RadiusRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Target `Φ − Φ* ≤ eps`; the regularized run aims at `eps/2`.
    #[default]
    Gap,
    /// Target `‖∇Φ‖ ≤ eps`; the regularized run aims at
    /// `eps²/(4·l_phi + 8·eps/R)`.
    GradNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizeSpec {
    pub r: RadiusSpec,
    #[serde(default)]
    pub criterion: Criterion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub algorithm: Algorithm,
    pub k: usize,
    #[serde(default)]
    pub n: StepBudget,
    #[serde(default)]
    pub m: StepBudget,
    pub eps: f64,
    #[serde(default)]
    pub tau_cost: Option<f64>,
    /// `None` derives it from the regime.
    #[serde(default)]
    pub l_phi: Option<f64>,
    #[serde(default)]
    pub l_phi_regime: RegimeSpec,
    #[serde(default)]
    pub u: Option<f64>,
    #[serde(default)]
    pub stepsize: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    #[serde(default)]
    pub stop_at_eps: bool,
    #[serde(default)]
    pub regularize: Option<RegularizeSpec>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KappaY,
    Eps,
    D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScscBattery {
    pub budgets: Budgets,
    /// Dimension; defaults to the smallest feasible one.
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_certificate_dims")]
    pub certificate_dims: Vec<usize>,
    /// Perturb the third entry of the right-hand side (negative control).
    #[serde(default)]
    pub corrupt_b_tilde: bool,
}

fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::BaselineAidGd, Algorithm::Accbio, Algorithm::AccbioBg]
}

fn default_certificate_dims() -> Vec<usize> {
    vec![16, 32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CscBattery {
    pub d: usize,
    pub budgets: Budgets,
    #[serde(default = "default_b_scale")]
    pub b_scale: f64,
    /// Accuracy used for the complexity-equation root check.
    #[serde(default = "default_rstar_eps")]
    pub rstar_eps: f64,
}

fn default_b_scale() -> f64 {
    1.0
}

fn default_rstar_eps() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowerBoundSpec {
    #[serde(default)]
    pub scsc: Option<ScscBattery>,
    #[serde(default)]
    pub csc: Option<CscBattery>,
}

fn config_error(field: &str, msg: impl std::fmt::Display) -> BenchError {
    BenchError::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            BenchError::Config(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate_common()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            BenchError::Config(m) => BenchError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    pub fn validate_common(&self) -> Result<(), BenchError> {
        if self.jobs == 0 {
            return Err(config_error("jobs", "must be at least 1"));
        }
        let c = self.instance.resolved_constants();
        c.validate().map_err(|e| config_error("instance.constants", e))?;
        if let Some(k) = self.instance.kappa_y {
            if !(k >= 1.0 && k.is_finite()) {
                return Err(config_error("instance.kappa_y", format!("must be at least 1, got {k}")));
            }
        }
        if let Some(b) = self.instance.b_scale {
            if !(b > 0.0 && b.is_finite()) {
                return Err(config_error("instance.b_scale", format!("must be positive, got {b}")));
            }
        }
        if let Some(s) = &self.solver {
            s.validate()?;
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(config_error("sweep.values", "grid is empty"));
            }
            for v in &sw.values {
                let ok = match sw.axis {
                    SweepAxis::KappaY => *v >= 1.0,
                    SweepAxis::Eps => *v > 0.0,
                    SweepAxis::D => *v >= 2.0 && v.fract() == 0.0,
                };
                if !(ok && v.is_finite()) {
                    return Err(config_error("sweep.values", format!("{v} is not valid for axis {:?}", sw.axis)));
                }
            }
        }
        Ok(())
    }

    pub fn solver(&self) -> Result<&SolverSpec, BenchError> {
        self.solver.as_ref().ok_or_else(|| config_error("solver", "missing; required for run and sweep"))
    }
}

impl SolverSpec {
    fn validate(&self) -> Result<(), BenchError> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(config_error("solver.eps", format!("must be positive, got {}", self.eps)));
        }
        if self.n == StepBudget::Fixed(0) {
            return Err(config_error("solver.n", "must be at least 1"));
        }
        if let Some(t) = self.tau_cost {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(config_error("solver.tau_cost", format!("must be non-negative, got {t}")));
            }
        }
        for (field, v) in [("solver.l_phi", self.l_phi), ("solver.stepsize", self.stepsize), ("solver.alpha", self.alpha)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(config_error(field, format!("must be positive, got {v}")));
                }
            }
        }
        if self.l_phi_regime == RegimeSpec::BoundedGradient && self.u.is_none() {
            return Err(config_error("solver.u", "required by the bounded_gradient regime"));
        }
        if self.algorithm != Algorithm::BaselineAidGd && self.k == 0 {
            return Err(config_error("solver.k", "must be at least 1"));
        }
        if let Some(RegularizeSpec { r: RadiusSpec::Value(r), .. }) = self.regularize {
            if !(r > 0.0 && r.is_finite()) {
                return Err(config_error("solver.regularize.r", format!("must be positive, got {r}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"instance": {"kind": "decoupled"}, "solver": {"algorithm": "accbio", "k": 10, "eps": 1e-6}}"#,
        )
        .unwrap();
        let s = cfg.solver().unwrap();
        assert_eq!((s.n, s.m), (StepBudget::Auto, StepBudget::Auto));
        assert!(s.warm_start);
        assert_eq!(cfg.jobs, 1);
        assert_eq!(cfg.instance.dimension(), 4);
    }

    #[test]
    fn budgets_parse_both_forms() {
        let s: SolverSpec =
            serde_json::from_str(r#"{"algorithm": "accbio_bg", "k": 3, "n": 7, "m": "auto", "eps": 0.1}"#).unwrap();
        assert_eq!((s.n, s.m), (StepBudget::Fixed(7), StepBudget::Auto));
        assert!(serde_json::from_str::<SolverSpec>(r#"{"algorithm": "accbio", "k": 3, "n": "many", "eps": 0.1}"#).is_err());
    }

    #[test]
    fn diagnostics_name_line_and_field() {
        let text = "{\n  \"instance\": {\"kind\": \"scsc\"},\n  \"solver\": {\"algorithm\": \"accbio\", \"k\": 1, \"eps\": 1, \"bogus\": 2}\n}";
        let err = ExperimentConfig::from_json(text).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("bogus"), "{err}");
        let err = ExperimentConfig::from_json(
            r#"{"instance": {"kind": "scsc"}, "solver": {"algorithm": "accbio", "k": 1, "eps": -1}}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("solver.eps"), "{err}");
    }

    #[test]
    fn kappa_override() {
        let spec = InstanceSpec {
            kind: InstanceKind::ScscBenchmark,
            d: None,
            preset: None,
            constants: None,
            kappa_y: Some(16.0),
            b_scale: None,
            lbar_xy: None,
        };
        let c = spec.resolved_constants();
        assert_eq!((c.mu_x, c.mu_y, c.ltil_y), (0.1, 0.25, 4.0));
    }
}
