//! Instance construction from config specs.

use bilevel_core::linalg::{RealVector, StructuredOperator};
use bilevel_core::oracle::{make_quadratic_bilevel, CrossOperator, QuadraticBilevel, QuadraticOuter, SmoothnessConstants};
use bilevel_core::worst_case::{build_csc, build_scsc, scsc_benchmark, CscInstance, ScscInstance};
use serde::Serialize;

use crate::config::{InstanceKind, InstanceSpec};
use crate::BenchError;

#[derive(Debug)]
pub enum BuiltInstance {
    Decoupled { oracle: QuadraticBilevel, constants: SmoothnessConstants },
    Benchmark { oracle: QuadraticBilevel, constants: SmoothnessConstants, lbar_xy: f64 },
    Scsc(ScscInstance),
    Csc(CscInstance),
}

#[derive(Serialize)]
struct PlainDocument<'a> {
    kind: &'a str,
    d: usize,
    constants: &'a SmoothnessConstants,
    #[serde(skip_serializing_if = "Option::is_none")]
    lbar_xy: Option<f64>,
}

impl BuiltInstance {
    pub fn oracle(&self) -> &QuadraticBilevel {
        match self {
            BuiltInstance::Decoupled { oracle, .. } | BuiltInstance::Benchmark { oracle, .. } => oracle,
            BuiltInstance::Scsc(i) => &i.oracle,
            BuiltInstance::Csc(i) => &i.oracle,
        }
    }

    pub fn document_json(&self) -> String {
        let d = self.oracle().inner_hessian().dim();
        match self {
            BuiltInstance::Decoupled { constants, .. } => {
                serde_json::to_string_pretty(&PlainDocument { kind: "decoupled", d, constants, lbar_xy: None })
                    .expect("serializable")
            }
            BuiltInstance::Benchmark { constants, lbar_xy, .. } => serde_json::to_string_pretty(&PlainDocument {
                kind: "scsc_benchmark",
                d,
                constants,
                lbar_xy: Some(*lbar_xy),
            })
            .expect("serializable"),
            BuiltInstance::Scsc(i) => i.document().to_json(),
            BuiltInstance::Csc(i) => i.document().to_json(),
        }
    }
}

/// `f = (l_x/2)‖x − 𝟙‖² + (l_y/2)‖y‖²`, `g = (mu_y/2)‖y‖² + 𝟙ᵀy`.
pub fn decoupled(d: usize, c: &SmoothnessConstants) -> Result<QuadraticBilevel, BenchError> {
    let outer = QuadraticOuter {
        a: StructuredOperator::scaled_identity(d, c.l_x),
        d: StructuredOperator::scaled_identity(d, c.l_y),
        lin_x: RealVector::filled(d, -c.l_x),
        ..QuadraticOuter::separable(d, d)
    };
    make_quadratic_bilevel(
        StructuredOperator::scaled_identity(d, c.mu_y),
        CrossOperator::zero(d, d),
        RealVector::filled(d, 1.0),
        outer,
        *c,
    )
    .map_err(|e| BenchError::Config(format!("instance: {e}")))
}

pub fn build_instance(spec: &InstanceSpec) -> Result<BuiltInstance, BenchError> {
    let c = spec.resolved_constants();
    let d = spec.dimension();
    let cfg_err = |e: &dyn std::fmt::Display| BenchError::Config(format!("instance: {e}"));
    Ok(match spec.kind {
        InstanceKind::Decoupled => BuiltInstance::Decoupled { oracle: decoupled(d, &c)?, constants: c },
        InstanceKind::ScscBenchmark => {
            let lbar = spec.lbar_xy.unwrap_or(1.0);
            BuiltInstance::Benchmark { oracle: scsc_benchmark(d, &c, lbar).map_err(|e| cfg_err(&e))?, constants: c, lbar_xy: lbar }
        }
        InstanceKind::Scsc => BuiltInstance::Scsc(build_scsc(d, c, spec.lbar_xy).map_err(|e| cfg_err(&e))?),
        InstanceKind::Csc => BuiltInstance::Csc(build_csc(d, c, spec.b_scale()).map_err(|e| cfg_err(&e))?),
    })
}
