//! Shared 3D machinery: unit directions, Plücker-coordinate lines,
//! Rodrigues rotations and SVD-based direction estimation.
//!
//! Everything here is a pure function over immutable values in one world
//! frame.  A line ("edge") is stored as a unit direction `q` plus moment
//! `m = p̄ × q`; the incidence residual `q × p + m` is zero exactly when
//! `p` lies on the line and its norm is the Euclidean point-line distance,
//! which is the error metric used throughout calibration and contour
//! validation.

use nalgebra as na;
use thiserror::Error;

/// 3-vector of `f64` (mm for positions, unitless for directions).
pub type Vec3 = na::Vector3<f64>;
/// Point in the world frame, mm.
pub type Point3 = na::Point3<f64>;
/// Direction on the unit sphere; `nalgebra::Unit` keeps it normalized.
pub type UnitDir = na::Unit<Vec3>;

/// Errors from the line/direction estimators.
#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    /// The input points coincide (or there are fewer than two), so no
    /// direction is defined.
    #[error("degenerate point set: {0} points with no measurable spread")]
    DegeneratePoints(usize),
}

/// Build a [`UnitDir`] from components, normalizing.
///
/// # Panics
/// Panics if the vector is (numerically) zero.
pub fn unit_dir(x: f64, y: f64, z: f64) -> UnitDir {
    let v = Vec3::new(x, y, z);
    assert!(v.norm() > 0.0, "unit_dir: zero vector");
    UnitDir::new_normalize(v)
}

/// Skew-symmetric cross-product matrix `[v]ₓ` with `[v]ₓ w = v × w`.
pub fn skew(v: &Vec3) -> na::Matrix3<f64> {
    na::Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// A 3D line in Plücker coordinates: unit direction `q` and moment
/// `m = p × q` for any point `p` on the line.
///
/// The pair always satisfies the Plücker constraint `q · m = 0`; the
/// constructors enforce it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Edge {
    /// Unit direction of the line.
    pub q: UnitDir,
    /// Moment vector, mm (zero for a line through the origin).
    pub m: Vec3,
}

impl Edge {
    /// Assemble an edge from direction and moment.
    ///
    /// # Panics
    /// Panics if `q · m` exceeds the Plücker tolerance of 1e-9.
    pub fn new(q: UnitDir, m: Vec3) -> Self {
        assert!(
            q.dot(&m).abs() <= 1e-9,
            "edge violates Plücker constraint: q·m = {}",
            q.dot(&m)
        );
        Edge { q, m }
    }

    /// The line through `p` with direction `q`.
    pub fn through(p: &Point3, q: UnitDir) -> Self {
        // m = p × q is orthogonal to q by construction.
        Edge { q, m: p.coords.cross(&q) }
    }

    /// Incidence residual `q × p + m`; see [`point_on_edge_residual`].
    pub fn residual(&self, p: &Point3) -> Vec3 {
        self.q.cross(&p.coords) + self.m
    }

    /// Euclidean distance from `p` to the line.
    pub fn distance_to(&self, p: &Point3) -> f64 {
        self.residual(p).norm()
    }

    /// The point on the line closest to the origin (a convenient anchor).
    pub fn anchor(&self) -> Point3 {
        // For unit q: p₀ = q × m lies on the line and is ⊥ q.
        Point3::from(self.q.cross(&self.m))
    }

    /// The edge after rotating the underlying line by `rot` about `center`.
    pub fn rotated(&self, rot: &Rotation, center: &Point3) -> Self {
        let q = UnitDir::new_normalize(rot.matrix() * self.q.into_inner());
        let p = rotate_about(rot, center, &self.anchor());
        Edge::through(&p, q)
    }

    /// The edge after translating the underlying line by `t`.
    pub fn translated(&self, t: &Vec3) -> Self {
        Edge::through(&(self.anchor() + t), self.q)
    }
}

/// Axis-angle rotation, angle wrapped to `(−π, π]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    /// Rotation axis.
    pub axis: UnitDir,
    /// Signed angle about `axis`, radians, in `(−π, π]`.
    pub angle: f64,
}

impl Rotation {
    /// New rotation with the angle normalized into `(−π, π]`.
    pub fn new(axis: UnitDir, angle: f64) -> Self {
        Rotation { axis, angle: wrap_angle(angle) }
    }

    /// Rotation matrix via the Rodrigues expansion
    /// `I + sinθ [n]ₓ + (1 − cosθ) [n]ₓ²`.
    pub fn matrix(&self) -> na::Matrix3<f64> {
        let k = skew(&self.axis);
        na::Matrix3::identity() + k * self.angle.sin() + k * k * (1.0 - self.angle.cos())
    }

    /// The inverse rotation (same axis, negated angle).
    pub fn inverse(&self) -> Self {
        Rotation::new(self.axis, -self.angle)
    }
}

/// Wrap an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Beam-line point recovery: the target point seen from sensor position
/// `s` at depth reading `d` along beam direction `v` is `s + d·v`.
///
/// # Panics
/// Panics unless `d > 0` (a zero/negative depth reading is meaningless).
pub fn recover_point(s: &Point3, d: f64, v: &UnitDir) -> Point3 {
    assert!(d > 0.0, "recover_point: depth must be positive, got {d}");
    s + d * v.into_inner()
}

/// Best-fit direction of a point cloud: the unit vector minimizing
/// `Σ ‖(pᵢ − p̄) × u‖²`, i.e. the dominant right-singular direction of the
/// centered point matrix.
///
/// The SVD sign ambiguity is resolved deterministically: the component of
/// largest magnitude is made positive (first index wins ties).
///
/// ```
/// use pdm2_core::geometry::{fit_direction, Point3};
/// let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(3.0, 4.0, 0.0)];
/// let u = fit_direction(&pts).unwrap();
/// assert!((u.x - 0.6).abs() < 1e-12 && (u.y - 0.8).abs() < 1e-12);
/// ```
pub fn fit_direction(points: &[Point3]) -> Result<UnitDir, GeometryError> {
    if points.len() < 2 {
        return Err(GeometryError::DegeneratePoints(points.len()));
    }
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p.coords) / points.len() as f64;
    let mut a = na::DMatrix::<f64>::zeros(points.len(), 3);
    for (i, p) in points.iter().enumerate() {
        a.set_row(i, &(p.coords - centroid).transpose());
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("svd requested V^T");
    // Take the right-singular vector of the largest singular value; do not
    // rely on any particular ordering from the backend.
    let mut best = 0;
    for i in 1..svd.singular_values.len() {
        if svd.singular_values[i] > svd.singular_values[best] {
            best = i;
        }
    }
    if svd.singular_values[best] < 1e-9 {
        return Err(GeometryError::DegeneratePoints(points.len()));
    }
    let dir = Vec3::new(v_t[(best, 0)], v_t[(best, 1)], v_t[(best, 2)]);
    Ok(orient_largest_component(UnitDir::new_normalize(dir)))
}

/// Flip `u` if needed so its largest-magnitude component is positive
/// (ties broken by the first index).
pub fn orient_largest_component(u: UnitDir) -> UnitDir {
    let v = u.into_inner();
    let mut key = 0;
    for i in 1..3 {
        if v[i].abs() > v[key].abs() {
            key = i;
        }
    }
    if v[key] < 0.0 {
        UnitDir::new_unchecked(-v)
    } else {
        u
    }
}

/// Fit a line through a point cloud: direction from [`fit_direction`],
/// moment anchored at the centroid (`m = p̄ × q`).
pub fn make_edge(points: &[Point3]) -> Result<Edge, GeometryError> {
    let q = fit_direction(points)?;
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p.coords) / points.len() as f64;
    Ok(Edge { q, m: centroid.cross(&q) })
}

/// Rotate `p` by `rot` about the pivot `center`:
/// `center + R (p − center)`.
pub fn rotate_about(rot: &Rotation, center: &Point3, p: &Point3) -> Point3 {
    center + rot.matrix() * (p - center)
}

/// Plücker incidence residual of `p` against edge `e`: `q × p + m`.
///
/// Zero iff `p` lies on the line; since `q` is unit, the norm is the
/// point-line distance.
pub fn point_on_edge_residual(e: &Edge, p: &Point3) -> Vec3 {
    e.residual(p)
}

/// Closest-approach parameters of two lines `a(t) = pa + t·da` and
/// `b(s) = pb + s·db`: returns `(t, s, distance)`.
///
/// For (anti)parallel lines `t` is taken as 0 and `s` as the projection of
/// `pa` onto line b, so the distance is still correct.
pub fn line_closest_approach(
    pa: &Point3,
    da: &UnitDir,
    pb: &Point3,
    db: &UnitDir,
) -> (f64, f64, f64) {
    let w = pa - pb;
    let b = da.dot(db);
    let denom = 1.0 - b * b;
    if denom < 1e-12 {
        let s = w.dot(db);
        let dist = (w - s * db.into_inner()).norm();
        return (0.0, s, dist);
    }
    let d_w = da.dot(&w);
    let e_w = db.dot(&w);
    let t = (b * e_w - d_w) / denom;
    let s = (e_w - b * d_w) / denom;
    let dist = (w + t * da.into_inner() - s * db.into_inner()).norm();
    (t, s, dist)
}
