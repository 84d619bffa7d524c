//! Bilevel optimization laboratory: structured operators, problem oracles,
//! hard instances, hypergradient estimators, accelerated solvers and
//! lower-bound verification.

// `!(a > b)` guards are written that way so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod linalg;
pub mod oracle;
pub mod worst_case;
pub mod hypergrad;
pub mod solvers;
pub mod lower_bound;
