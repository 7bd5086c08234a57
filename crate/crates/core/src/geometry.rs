//! Thin-plate-spline geometry on normalized coordinates.
//!
//! Coordinates live in `[-1, 1]²` with x to the right and y downward. A
//! transform is fitted from a constant set of base fiducials `C` (on the
//! output frame) to target fiducials `C'` (on the input frame); evaluating it
//! at an output point yields the source location to sample from.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported fiducial count. The dense `(K+3)²` solve stays trivial below this.
pub const MAX_FIDUCIALS: usize = 64;

/// Minimum pairwise distance between fiducials, in normalized units.
pub const MIN_SEPARATION: f64 = 1e-9;

/// Condition-number estimate above which the TPS system is rejected.
pub const SINGULAR_CONDITION: f64 = 1e12;

pub const NEWTON_MAX_ITERATIONS: usize = 50;
pub const NEWTON_TOLERANCE: f64 = 1e-9;
pub const NEWTON_MIN_DETERMINANT: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid fiducial count {0}: must be even and within 4..={MAX_FIDUCIALS}")]
    InvalidK(usize),
    #[error("invalid margin {0}: must lie in [0, 0.5)")]
    InvalidMargin(f64),
    #[error("fiducial {index} is not finite")]
    NonFinite { index: usize },
    #[error("fiducials {first} and {second} coincide")]
    Coincident { first: usize, second: usize },
    #[error("TPS system is singular (condition estimate {condition:e})")]
    SingularSystem { condition: f64 },
    #[error("fiducial count mismatch: expected {expected}, found {found}")]
    MismatchedK { expected: usize, found: usize },
    #[error("Newton inversion did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
}

/// A point in normalized image coordinates. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(&self, other: Point2) -> f64 {
        (*self - other).norm()
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s)
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl fmt::Display for Point2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.x, self.y)
    }
}

/// An ordered set of K fiducial points.
///
/// Indices `0..K/2` are the top row left to right, `K/2..K` the bottom row
/// left to right. Construction validates the count, finiteness and that no
/// two points coincide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct FiducialSet {
    points: Vec<Point2>,
}

impl FiducialSet {
    pub fn new(points: Vec<Point2>) -> Result<Self, GeometryError> {
        let k = points.len();
        if k < 4 || k % 2 != 0 || k > MAX_FIDUCIALS {
            return Err(GeometryError::InvalidK(k));
        }
        if let Some(index) = points.iter().position(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite { index });
        }
        for a in 0..k {
            for b in a + 1..k {
                if points[a].distance(points[b]) <= MIN_SEPARATION {
                    return Err(GeometryError::Coincident { first: a, second: b });
                }
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn top(&self) -> &[Point2] {
        &self.points[..self.len() / 2]
    }

    pub fn bottom(&self) -> &[Point2] {
        &self.points[self.len() / 2..]
    }

    /// Adds per-point offsets, re-validating the result.
    pub fn offset_by(&self, offsets: &[Point2]) -> Result<Self, GeometryError> {
        if offsets.len() != self.len() {
            return Err(GeometryError::MismatchedK {
                expected: self.len(),
                found: offsets.len(),
            });
        }
        Self::new(self.points.iter().zip(offsets).map(|(&p, &o)| p + o).collect())
    }

    /// Per-point difference `self - other`.
    pub fn difference(&self, other: &FiducialSet) -> Result<Vec<Point2>, GeometryError> {
        if other.len() != self.len() {
            return Err(GeometryError::MismatchedK {
                expected: self.len(),
                found: other.len(),
            });
        }
        Ok(self.points.iter().zip(&other.points).map(|(&a, &b)| a - b).collect())
    }
}

impl TryFrom<Vec<Point2>> for FiducialSet {
    type Error = GeometryError;
    fn try_from(points: Vec<Point2>) -> Result<Self, Self::Error> {
        Self::new(points)
    }
}

impl From<FiducialSet> for Vec<Point2> {
    fn from(set: FiducialSet) -> Self {
        set.points
    }
}

/// Evenly spaced base fiducials along the top and bottom borders, inset by `2·margin`.
pub fn base_fiducials(k: usize, margin: f64) -> Result<FiducialSet, GeometryError> {
    if k < 4 || k % 2 != 0 || k > MAX_FIDUCIALS {
        return Err(GeometryError::InvalidK(k));
    }
    if !(0.0..0.5).contains(&margin) {
        return Err(GeometryError::InvalidMargin(margin));
    }
    let half = k / 2;
    let lo = -1.0 + 2.0 * margin;
    let hi = 1.0 - 2.0 * margin;
    let xs: Vec<f64> = (0..half)
        .map(|i| {
            if i + 1 == half {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (half - 1) as f64
            }
        })
        .collect();
    let points = xs
        .iter()
        .map(|&x| Point2::new(x, lo))
        .chain(xs.iter().map(|&x| Point2::new(x, hi)))
        .collect();
    FiducialSet::new(points)
}

/// Radial kernel `r² ln r`, with `phi(0) = 0`.
pub fn phi(r: f64) -> f64 {
    if r > 0.0 {
        r * r * r.ln()
    } else {
        0.0
    }
}

/// Kernel from squared radius: `½ r² ln r²`.
#[inline]
fn phi_sq(r2: f64) -> f64 {
    if r2 > 0.0 {
        0.5 * r2 * r2.ln()
    } else {
        0.0
    }
}

/// Lifted basis vector `[1, x, y, φ(‖p−c_1‖), …, φ(‖p−c_K‖)]`.
pub fn lift(base: &FiducialSet, p: Point2) -> Vec<f64> {
    let mut v = Vec::with_capacity(base.len() + 3);
    v.extend_from_slice(&[1.0, p.x, p.y]);
    v.extend(base.points().iter().map(|c| {
        let d = p - *c;
        phi_sq(d.x * d.x + d.y * d.y)
    }));
    v
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Assembles the `(K+3)×(K+3)` system matrix and its inverse.
///
/// Row 0 holds ones, rows 1-2 the base coordinates, rows `3..K+3` the kernel
/// matrix followed by `[1, x_a, y_a]`. Column `j < K` is therefore the lifted
/// vector of `c_j`.
pub fn build_system_from_points(
    points: &[Point2],
) -> Result<(DMatrix<f64>, DMatrix<f64>), GeometryError> {
    let k = points.len();
    let n = k + 3;
    let mut delta = DMatrix::<f64>::zeros(n, n);
    for (j, c) in points.iter().enumerate() {
        delta[(0, j)] = 1.0;
        delta[(1, j)] = c.x;
        delta[(2, j)] = c.y;
    }
    for (a, ca) in points.iter().enumerate() {
        for (b, cb) in points.iter().enumerate() {
            let d = *ca - *cb;
            delta[(3 + a, b)] = phi_sq(d.x * d.x + d.y * d.y);
        }
        delta[(3 + a, k)] = 1.0;
        delta[(3 + a, k + 1)] = ca.x;
        delta[(3 + a, k + 2)] = ca.y;
    }
    let inverse = delta
        .clone()
        .lu()
        .try_inverse()
        .ok_or(GeometryError::SingularSystem {
            condition: f64::INFINITY,
        })?;
    let condition = norm1(&delta) * norm1(&inverse);
    if !condition.is_finite() || condition > SINGULAR_CONDITION {
        return Err(GeometryError::SingularSystem { condition });
    }
    Ok((delta, inverse))
}

pub fn build_system(base: &FiducialSet) -> Result<(DMatrix<f64>, DMatrix<f64>), GeometryError> {
    build_system_from_points(base.points())
}

/// The factored system for a fixed base set. Shared by every transform fitted against it.
#[derive(Debug, Clone)]
pub struct TpsSystem {
    base: FiducialSet,
    delta: DMatrix<f64>,
    delta_inv: DMatrix<f64>,
}

impl TpsSystem {
    pub fn new(base: FiducialSet) -> Result<Arc<Self>, GeometryError> {
        let (delta, delta_inv) = build_system(&base)?;
        Ok(Arc::new(Self {
            base,
            delta,
            delta_inv,
        }))
    }

    pub fn base(&self) -> &FiducialSet {
        &self.base
    }

    pub fn k(&self) -> usize {
        self.base.len()
    }

    pub fn delta(&self) -> &DMatrix<f64> {
        &self.delta
    }

    pub fn delta_inv(&self) -> &DMatrix<f64> {
        &self.delta_inv
    }

    /// Fits `T = [C' 0] Δ⁻¹` for the given targets.
    pub fn estimate(self: &Arc<Self>, targets: &FiducialSet) -> Result<TpsTransform, GeometryError> {
        let k = self.k();
        if targets.len() != k {
            return Err(GeometryError::MismatchedK {
                expected: k,
                found: targets.len(),
            });
        }
        let columns = (0..k + 3)
            .map(|i| {
                targets
                    .points()
                    .iter()
                    .enumerate()
                    .fold([0.0, 0.0], |acc, (j, c)| {
                        let w = self.delta_inv[(j, i)];
                        [acc[0] + c.x * w, acc[1] + c.y * w]
                    })
            })
            .collect();
        Ok(TpsTransform {
            system: Arc::clone(self),
            targets: targets.clone(),
            columns,
        })
    }

    pub fn identity(self: &Arc<Self>) -> TpsTransform {
        self.estimate(&self.base.clone())
            .expect("base set always matches its own system")
    }
}

/// A fitted TPS map from the base frame to the target frame.
#[derive(Debug, Clone)]
pub struct TpsTransform {
    system: Arc<TpsSystem>,
    targets: FiducialSet,
    /// Parameter matrix stored column-wise, one `[x, y]` pair per lifted basis entry.
    columns: Vec<[f64; 2]>,
}

impl TpsTransform {
    pub fn system(&self) -> &Arc<TpsSystem> {
        &self.system
    }

    pub fn base(&self) -> &FiducialSet {
        self.system.base()
    }

    pub fn targets(&self) -> &FiducialSet {
        &self.targets
    }

    pub fn delta_inv(&self) -> &DMatrix<f64> {
        self.system.delta_inv()
    }

    /// The `2×(K+3)` parameter matrix, columns ordered `[1, x, y, φ_1..φ_K]`.
    pub fn params(&self) -> DMatrix<f64> {
        DMatrix::from_fn(2, self.columns.len(), |r, c| self.columns[c][r])
    }

    pub fn map_point(&self, p: Point2) -> Point2 {
        let c = &self.columns;
        let mut x = c[0][0] + c[1][0] * p.x + c[2][0] * p.y;
        let mut y = c[0][1] + c[1][1] * p.x + c[2][1] * p.y;
        for (base, col) in self.system.base.points().iter().zip(&c[3..]) {
            let dx = p.x - base.x;
            let dy = p.y - base.y;
            let f = phi_sq(dx * dx + dy * dy);
            x += col[0] * f;
            y += col[1] * f;
        }
        Point2::new(x, y)
    }

    /// Analytic Jacobian `∂map/∂p` as `[[dx/dx, dx/dy], [dy/dx, dy/dy]]`.
    pub fn jacobian(&self, p: Point2) -> [[f64; 2]; 2] {
        let c = &self.columns;
        let mut j = [[c[1][0], c[2][0]], [c[1][1], c[2][1]]];
        for (base, col) in self.system.base.points().iter().zip(&c[3..]) {
            let dx = p.x - base.x;
            let dy = p.y - base.y;
            let r2 = dx * dx + dy * dy;
            if r2 == 0.0 {
                continue;
            }
            // d/dp φ(‖p−c‖) = (2 ln r + 1)(p − c)
            let g = r2.ln() + 1.0;
            j[0][0] += col[0] * g * dx;
            j[0][1] += col[0] * g * dy;
            j[1][0] += col[1] * g * dx;
            j[1][1] += col[1] * g * dy;
        }
        j
    }

    /// Newton inversion of [`map_point`](Self::map_point), seeded at `init` or at the target.
    pub fn invert(&self, target: Point2, init: Option<Point2>) -> Result<Point2, GeometryError> {
        self.invert_counted(target, init).map(|(p, _)| p)
    }

    /// Like [`invert`](Self::invert) but also reports the Newton steps taken.
    pub fn invert_counted(
        &self,
        target: Point2,
        init: Option<Point2>,
    ) -> Result<(Point2, usize), GeometryError> {
        let mut p = init.unwrap_or(target);
        let mut residual = self.map_point(p) - target;
        for iteration in 0..=NEWTON_MAX_ITERATIONS {
            let norm = residual.norm();
            if norm <= NEWTON_TOLERANCE {
                return Ok((p, iteration));
            }
            if iteration == NEWTON_MAX_ITERATIONS || !norm.is_finite() {
                return Err(GeometryError::NoConvergence {
                    iterations: iteration,
                    residual: norm,
                });
            }
            let [[a, b], [c, d]] = self.jacobian(p);
            let det = a * d - b * c;
            if det.abs() < NEWTON_MIN_DETERMINANT {
                return Err(GeometryError::NoConvergence {
                    iterations: iteration,
                    residual: norm,
                });
            }
            p = Point2::new(
                p.x - (d * residual.x - b * residual.y) / det,
                p.y - (-c * residual.x + a * residual.y) / det,
            );
            residual = self.map_point(p) - target;
        }
        unreachable!("loop returns on its final iteration")
    }
}

/// Fits a transform from base `c` to targets `c_prime`, building the system on the fly.
pub fn estimate_tps(c: &FiducialSet, c_prime: &FiducialSet) -> Result<TpsTransform, GeometryError> {
    if c.len() != c_prime.len() {
        return Err(GeometryError::MismatchedK {
            expected: c.len(),
            found: c_prime.len(),
        });
    }
    TpsSystem::new(c.clone())?.estimate(c_prime)
}

pub fn map_point(t: &TpsTransform, p: Point2) -> Point2 {
    t.map_point(p)
}

pub fn map_jacobian(t: &TpsTransform, p: Point2) -> [[f64; 2]; 2] {
    t.jacobian(p)
}

pub fn invert_map(t: &TpsTransform, p_prime: Point2, init: Option<Point2>) -> Result<Point2, GeometryError> {
    t.invert(p_prime, init)
}
