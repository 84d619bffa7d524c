//! Vectors, structured symmetric operators, dense fallback solves and
//! scalar root finding.

use std::fmt;
use std::ops::{Add, Index, Mul, Neg, Sub};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vectors must have positive dimension")]
    Empty,
    #[error("entry {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("matrix is singular to tolerance (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("no sign change on [{lo}, {hi}]: f(lo) = {f_lo}, f(hi) = {f_hi}")]
    Bracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    #[error("function value {value} at {at} is not finite")]
    Domain { at: f64, value: f64 },
    #[error("dimension {dim} exceeds the dense cap {cap}")]
    Capacity { dim: usize, cap: usize },
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed vector encoding: {0}")]
    Encoding(String),
}

/// Tolerances for the dense fallback paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinalgConfig {
    /// Required relative residual of `solve_dense`.
    pub solve_rel_tol: f64,
    /// Largest dimension that may be densified for eigen-decompositions.
    pub dense_cap: usize,
    /// Iterative refinement passes attempted before declaring singularity.
    pub refine_steps: usize,
}

impl Default for LinalgConfig {
    fn default() -> Self {
        Self { solve_rel_tol: 1e-10, dense_cap: 2048, refine_steps: 3 }
    }
}

/// A real vector of positive dimension.
///
/// Checked construction rejects NaN and infinities. Arithmetic does not
/// re-check, so solvers test `is_finite` on their iterates.
#[derive(Clone, PartialEq)]
pub struct RealVector(Vec<f64>);

impl RealVector {
    pub fn new(entries: Vec<f64>) -> Result<Self, LinalgError> {
        if entries.is_empty() {
            return Err(LinalgError::Empty);
        }
        if let Some((index, &value)) = entries.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index, value });
        }
        Ok(Self(entries))
    }

    pub(crate) fn raw(entries: Vec<f64>) -> Self {
        debug_assert!(!entries.is_empty());
        Self(entries)
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vectors must have positive dimension");
        Self(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        assert!(dim > 0, "vectors must have positive dimension");
        Self(vec![value; dim])
    }

    /// Unit vector with a one at 0-based index `k`.
    pub fn basis(dim: usize, k: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[k] = 1.0;
        v
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize) -> f64) -> Self {
        assert!(dim > 0, "vectors must have positive dimension");
        Self((0..dim).map(f).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &RealVector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dot: dimension mismatch");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &RealVector) {
        assert_eq!(self.dim(), x.dim(), "axpy: dimension mismatch");
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += a * v;
        }
    }

    pub fn scaled(&self, a: f64) -> RealVector {
        RealVector(self.0.iter().map(|v| a * v).collect())
    }

    /// `a * x + b * y`
    pub fn lincomb(a: f64, x: &RealVector, b: f64, y: &RealVector) -> RealVector {
        assert_eq!(x.dim(), y.dim(), "lincomb: dimension mismatch");
        RealVector(x.0.iter().zip(&y.0).map(|(u, v)| a * u + b * v).collect())
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn from_dvector(v: &DVector<f64>) -> RealVector {
        RealVector(v.iter().copied().collect())
    }

    /// Base64 of the little-endian IEEE-754 bytes.
    pub fn to_base64(&self) -> String {
        let mut bytes = Vec::with_capacity(8 * self.dim());
        for v in &self.0 {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        B64.encode(bytes)
    }

    pub fn from_base64(text: &str) -> Result<Self, LinalgError> {
        let bytes = B64.decode(text).map_err(|e| LinalgError::Encoding(e.to_string()))?;
        if bytes.len() % 8 != 0 {
            return Err(LinalgError::Encoding(format!("{} bytes is not a multiple of 8", bytes.len())));
        }
        let entries = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::new(entries)
    }
}

impl fmt::Debug for RealVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

impl Index<usize> for RealVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Add for &RealVector {
    type Output = RealVector;
    fn add(self, rhs: &RealVector) -> RealVector {
        RealVector::lincomb(1.0, self, 1.0, rhs)
    }
}

impl Sub for &RealVector {
    type Output = RealVector;
    fn sub(self, rhs: &RealVector) -> RealVector {
        RealVector::lincomb(1.0, self, -1.0, rhs)
    }
}

impl Mul<&RealVector> for f64 {
    type Output = RealVector;
    fn mul(self, rhs: &RealVector) -> RealVector {
        rhs.scaled(self)
    }
}

impl Neg for &RealVector {
    type Output = RealVector;
    fn neg(self) -> RealVector {
        self.scaled(-1.0)
    }
}

impl Serialize for RealVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for RealVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        RealVector::from_base64(&text).map_err(serde::de::Error::custom)
    }
}

/// How a [`StructuredOperator`] acts on a vector.
#[derive(Clone, Debug)]
pub enum OperatorKind {
    /// Anti-banded matrix with `+1` on the anti-diagonal and `-1` just
    /// right of it (strongly-convex construction).
    ZScsc,
    /// Anti-banded matrix with `+1` just left of the anti-diagonal and `-1`
    /// on it (convex construction).
    ZCsc,
    /// `off[i]` couples rows `i` and `i + 1`.
    Tridiagonal { diag: Vec<f64>, off: Vec<f64> },
    /// Symmetric band storage: `bands[k][i] = A[i][i + k]`.
    Banded { bands: Vec<Vec<f64>> },
    /// `scale * base + shift * I`
    ShiftedScaled { base: Box<StructuredOperator>, scale: f64, shift: f64 },
    /// `base^exponent`, applied by repetition.
    Power { base: Box<StructuredOperator>, exponent: u32 },
    /// `sum_i c_i A_i`
    Combination { terms: Vec<(f64, StructuredOperator)> },
    Dense(DMatrix<f64>),
}

/// Symmetric square linear operator applied matrix-free.
#[derive(Clone, Debug)]
pub struct StructuredOperator {
    dim: usize,
    kind: OperatorKind,
}

impl StructuredOperator {
    pub fn z_scsc(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim, kind: OperatorKind::ZScsc }
    }

    pub fn z_csc(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim, kind: OperatorKind::ZCsc }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(vec![1.0; dim])
    }

    pub fn scaled_identity(dim: usize, value: f64) -> Self {
        Self::diagonal(vec![value; dim])
    }

    pub fn diagonal(diag: Vec<f64>) -> Self {
        assert!(!diag.is_empty());
        Self { dim: diag.len(), kind: OperatorKind::Banded { bands: vec![diag] } }
    }

    pub fn tridiagonal(diag: Vec<f64>, off: Vec<f64>) -> Result<Self, LinalgError> {
        if diag.is_empty() {
            return Err(LinalgError::Empty);
        }
        if off.len() + 1 != diag.len() {
            return Err(LinalgError::DimensionMismatch { expected: diag.len() - 1, got: off.len() });
        }
        Ok(Self { dim: diag.len(), kind: OperatorKind::Tridiagonal { diag, off } })
    }

    pub fn banded(bands: Vec<Vec<f64>>) -> Result<Self, LinalgError> {
        let dim = bands.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(LinalgError::Empty);
        }
        for (k, band) in bands.iter().enumerate() {
            if band.len() + k != dim {
                return Err(LinalgError::DimensionMismatch { expected: dim.saturating_sub(k), got: band.len() });
            }
        }
        Ok(Self { dim, kind: OperatorKind::Banded { bands } })
    }

    /// `scale * base + shift * I`
    pub fn shifted_scaled(base: StructuredOperator, scale: f64, shift: f64) -> Self {
        Self { dim: base.dim, kind: OperatorKind::ShiftedScaled { base: Box::new(base), scale, shift } }
    }

    pub fn power(base: StructuredOperator, exponent: u32) -> Self {
        Self { dim: base.dim, kind: OperatorKind::Power { base: Box::new(base), exponent } }
    }

    pub fn combination(terms: Vec<(f64, StructuredOperator)>) -> Result<Self, LinalgError> {
        let dim = terms.first().map(|(_, op)| op.dim).ok_or(LinalgError::Empty)?;
        if let Some((_, op)) = terms.iter().find(|(_, op)| op.dim != dim) {
            return Err(LinalgError::DimensionMismatch { expected: dim, got: op.dim });
        }
        Ok(Self { dim, kind: OperatorKind::Combination { terms } })
    }

    /// Dense symmetric matrix; asymmetry above 1e-12 relative is rejected.
    pub fn dense(matrix: DMatrix<f64>) -> Result<Self, LinalgError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(LinalgError::DimensionMismatch { expected: matrix.nrows(), got: matrix.ncols() });
        }
        if matrix.nrows() == 0 {
            return Err(LinalgError::Empty);
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asymmetry = (&matrix - matrix.transpose()).amax() / scale;
        if asymmetry > 1e-12 {
            return Err(LinalgError::NotSymmetric { asymmetry });
        }
        Ok(Self { dim: matrix.nrows(), kind: OperatorKind::Dense(matrix) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    /// Half bandwidth of the operator once expanded.
    pub fn bandwidth(&self) -> usize {
        match &self.kind {
            OperatorKind::ZScsc | OperatorKind::ZCsc => self.dim - 1,
            OperatorKind::Tridiagonal { .. } => 1,
            OperatorKind::Banded { bands } => bands.len() - 1,
            OperatorKind::ShiftedScaled { base, .. } => base.bandwidth(),
            OperatorKind::Power { base, .. } => base.bandwidth().min(self.dim - 1),
            OperatorKind::Combination { terms } => terms.iter().map(|(_, op)| op.bandwidth()).max().unwrap_or(0),
            OperatorKind::Dense(_) => self.dim - 1,
        }
    }

    pub fn apply(&self, v: &RealVector) -> Result<RealVector, LinalgError> {
        if v.dim() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, got: v.dim() });
        }
        Ok(self.mul_vec(v))
    }

    /// Like [`apply`](Self::apply) but panics on a dimension mismatch.
    pub fn mul_vec(&self, v: &RealVector) -> RealVector {
        assert_eq!(v.dim(), self.dim, "operator applied to a vector of the wrong dimension");
        let mut out = vec![0.0; self.dim];
        self.apply_into(v.as_slice(), &mut out);
        RealVector::raw(out)
    }

    fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim;
        match &self.kind {
            OperatorKind::ZScsc => {
                for i in 0..d {
                    let mut s = v[d - 1 - i];
                    if i >= 1 {
                        s -= v[d - i];
                    }
                    out[i] = s;
                }
            }
            OperatorKind::ZCsc => {
                for i in 0..d {
                    let mut s = -v[d - 1 - i];
                    if i + 2 <= d {
                        s += v[d - 2 - i];
                    }
                    out[i] = s;
                }
            }
            OperatorKind::Tridiagonal { diag, off } => {
                for i in 0..d {
                    let mut s = diag[i] * v[i];
                    if i > 0 {
                        s += off[i - 1] * v[i - 1];
                    }
                    if i + 1 < d {
                        s += off[i] * v[i + 1];
                    }
                    out[i] = s;
                }
            }
            OperatorKind::Banded { bands } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = bands[0][i] * v[i];
                }
                for (k, band) in bands.iter().enumerate().skip(1) {
                    for (i, &a) in band.iter().enumerate() {
                        out[i] += a * v[i + k];
                        out[i + k] += a * v[i];
                    }
                }
            }
            OperatorKind::ShiftedScaled { base, scale, shift } => {
                base.apply_into(v, out);
                for (o, x) in out.iter_mut().zip(v) {
                    *o = scale * *o + shift * x;
                }
            }
            OperatorKind::Power { base, exponent } => {
                out.copy_from_slice(v);
                let mut tmp = vec![0.0; d];
                for _ in 0..*exponent {
                    base.apply_into(out, &mut tmp);
                    out.copy_from_slice(&tmp);
                }
            }
            OperatorKind::Combination { terms } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let mut tmp = vec![0.0; d];
                for (c, op) in terms {
                    op.apply_into(v, &mut tmp);
                    for (o, t) in out.iter_mut().zip(&tmp) {
                        *o += c * t;
                    }
                }
            }
            OperatorKind::Dense(m) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..d).map(|j| m[(i, j)] * v[j]).sum();
                }
            }
        }
    }

    /// Column-by-column materialization.
    pub fn to_dense(&self) -> DMatrix<f64> {
        if let OperatorKind::Dense(m) = &self.kind {
            return m.clone();
        }
        let d = self.dim;
        let mut m = DMatrix::zeros(d, d);
        let mut e = vec![0.0; d];
        let mut col = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            self.apply_into(&e, &mut col);
            m.column_mut(j).copy_from_slice(&col);
            e[j] = 0.0;
        }
        m
    }
}

/// LU factorization of a densified operator with residual-checked solves.
pub struct DenseFactor {
    matrix: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    cfg: LinalgConfig,
}

impl fmt::Debug for DenseFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseFactor({}x{})", self.dim(), self.dim())
    }
}

impl DenseFactor {
    pub fn new(matrix: DMatrix<f64>, cfg: LinalgConfig) -> Result<Self, LinalgError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(LinalgError::DimensionMismatch { expected: matrix.nrows(), got: matrix.ncols() });
        }
        let lu = matrix.clone().lu();
        if !lu.is_invertible() {
            return Err(LinalgError::Singular { condition: condition_estimate(&matrix) });
        }
        Ok(Self { matrix, lu, cfg })
    }

    pub fn of(op: &StructuredOperator, cfg: LinalgConfig) -> Result<Self, LinalgError> {
        Self::new(op.to_dense(), cfg)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn solve(&self, rhs: &RealVector) -> Result<RealVector, LinalgError> {
        if rhs.dim() != self.dim() {
            return Err(LinalgError::DimensionMismatch { expected: self.dim(), got: rhs.dim() });
        }
        let b = rhs.to_dvector();
        let b_norm = b.norm();
        if b_norm == 0.0 {
            return Ok(RealVector::zeros(self.dim()));
        }
        let singular = || LinalgError::Singular { condition: condition_estimate(&self.matrix) };
        let mut x = self.lu.solve(&b).ok_or_else(singular)?;
        for _ in 0..=self.cfg.refine_steps {
            let r = &b - &self.matrix * &x;
            if !r.iter().all(|v| v.is_finite()) {
                return Err(singular());
            }
            if r.norm() <= self.cfg.solve_rel_tol * b_norm {
                return Ok(RealVector::from_dvector(&x));
            }
            let dx = self.lu.solve(&r).ok_or_else(singular)?;
            x += dx;
        }
        Err(singular())
    }
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let s = m.clone().singular_values();
    let max = s.max();
    let min = s.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve `op x = rhs` through a dense LU with a relative residual check.
pub fn solve_dense(op: &StructuredOperator, rhs: &RealVector) -> Result<RealVector, LinalgError> {
    solve_dense_with(op, rhs, LinalgConfig::default())
}

pub fn solve_dense_with(
    op: &StructuredOperator,
    rhs: &RealVector,
    cfg: LinalgConfig,
) -> Result<RealVector, LinalgError> {
    if rhs.dim() != op.dim() {
        return Err(LinalgError::DimensionMismatch { expected: op.dim(), got: rhs.dim() });
    }
    DenseFactor::of(op, cfg)?.solve(rhs)
}

/// Smallest and largest eigenvalue through a dense symmetric decomposition.
pub fn symmetric_eig_extremes(op: &StructuredOperator) -> Result<(f64, f64), LinalgError> {
    symmetric_eig_extremes_with(op, LinalgConfig::default())
}

pub fn symmetric_eig_extremes_with(
    op: &StructuredOperator,
    cfg: LinalgConfig,
) -> Result<(f64, f64), LinalgError> {
    if op.dim() > cfg.dense_cap {
        return Err(LinalgError::Capacity { dim: op.dim(), cap: cfg.dense_cap });
    }
    dense_eig_extremes(&op.to_dense())
}

pub(crate) fn dense_eig_extremes(m: &DMatrix<f64>) -> Result<(f64, f64), LinalgError> {
    let eig = m.clone().symmetric_eigen();
    Ok((eig.eigenvalues.min(), eig.eigenvalues.max()))
}

/// Bisection on a sign-changing bracket until its width is at most `tol`.
pub fn bisect_root(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Result<f64, LinalgError> {
    if !(lo < hi) || !(tol > 0.0) {
        return Err(LinalgError::InvalidArgument(format!("need lo < hi and tol > 0, got [{lo}, {hi}], tol {tol}")));
    }
    let eval = |t: f64| {
        let value = f(t);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(LinalgError::Domain { at: t, value })
        }
    };
    let (mut lo, mut hi) = (lo, hi);
    let f_lo = eval(lo)?;
    let f_hi = eval(hi)?;
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(LinalgError::Bracket { lo, hi, f_lo, f_hi });
    }
    let lo_negative = f_lo < 0.0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = eval(mid)?;
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if (f_mid < 0.0) == lo_negative {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
