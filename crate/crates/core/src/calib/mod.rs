//! Probe calibration: recover the emission direction, the turntable axis and a
//! point on that axis from raster scans of a tip target and a thin filament.
//!
//! The pipeline has three stages, each usable on its own:
//!
//! 1. [`extract_center`] collapses the raw positions of one raster scan into a
//!    weighted center with an empirical covariance,
//! 2. [`calibrate_beam`] and [`calibrate_turntable`] produce closed-form
//!    initial estimates from those centers,
//! 3. [`refine_mle`] polishes all parameters jointly with a damped
//!    Gauss-Newton iteration under measurement-covariance weighting.

use nalgebra as na;
use nalgebra::{Matrix3, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    self, make_edge, recover_point, wrap_angle, Edge, GeometryError, Point3, Rotation, UnitDir,
    Vec3,
};

mod refine;

pub use refine::{refine_mle, refine_mle_traced, refine_sensor_only, MleProblem, MleVars};

/// Rotations smaller than this (radians) carry no usable axis information.
pub const MIN_MOTION_RAD: f64 = 1e-6;

/// Relative singular-value gap below which a linear system is treated as
/// rank deficient.
const RANK_GAP: f64 = 1e-8;

/// Encoder angles this close to a half turn (radians) activate the
/// direction-sum constraint. Generous on purpose: the induced axis error is
/// bounded by the angular slack times the filament tilt, both small, while a
/// tight tolerance would reject real sessions whose encoder reads 180 deg
/// give or take its noise.
const HALF_TURN_TOL: f64 = 5e-2;

/// Variance floor applied to extracted center covariances, in mm^2.
pub const DEFAULT_SIGMA_FLOOR_MM2: f64 = 1e-4;

/// Default amplitude threshold used when collapsing raster scans.
pub const DEFAULT_THRESHOLD_FRAC: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CalibError {
    /// No raw point rose above the detection threshold (or the scan was empty).
    #[error("no usable signal in raster scan")]
    NoSignal,
    #[error(transparent)]
    Degenerate(#[from] GeometryError),
    /// All turntable readings are (numerically) zero rotations.
    #[error("turntable readings contain no usable rotation")]
    InsufficientMotion,
    /// The stacked linear system does not pin down a unique solution.
    #[error("rank-deficient system while solving for {context}")]
    RankDeficient { context: &'static str },
    /// A rotation reading references a frame id that was never scanned.
    #[error("rotation reading references unknown frame {frame_id}")]
    UnknownFrame { frame_id: usize },
    /// Calibration needs at least two tip frames and two edge frames.
    #[error("not enough {what} frames: have {have}, need {need}")]
    MissingFrames {
        what: &'static str,
        have: usize,
        need: usize,
    },
}

/// One raw range measurement inside a raster scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawPoint {
    /// Commanded sensor position, robot frame, mm.
    pub s: Point3,
    /// Measured (rectified) distance along the beam, mm.
    pub d: f64,
    /// Echo amplitude used for thresholding and weighting, arbitrary units.
    pub amplitude: f64,
}

impl RawPoint {
    pub fn new(s: Point3, d: f64, amplitude: f64) -> Self {
        assert!(d > 0.0, "range must be positive, got {d}");
        assert!(amplitude >= 0.0, "amplitude must be non-negative");
        Self { s, d, amplitude }
    }
}

/// What a calibration frame was looking at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameKind {
    /// Raster over the tip target; collapses to a single center.
    Tip,
    /// Sweeps across the filament; one center per sweep row.
    Edge,
}

/// Collapsed result of one raster scan (or one sweep row of an edge frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterPoint {
    /// Amplitude-weighted sensor position, mm.
    pub s: Point3,
    /// Amplitude-weighted range, mm.
    pub d: f64,
    /// Covariance of `s` (mm^2), floored and scaled by the sample count.
    pub sigma_s: Matrix3<f64>,
    /// Variance of `d` (mm^2), floored and scaled by the sample count.
    pub sigma_d: f64,
    /// Number of raw points that survived thresholding.
    pub n_raw: usize,
}

/// All centers extracted from one physical frame at one turntable position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScan {
    pub frame_id: usize,
    pub kind: FrameKind,
    pub centers: Vec<CenterPoint>,
    /// Commanded turntable angle for bookkeeping, radians.
    pub turntable_angle: f64,
}

/// Encoder reading of the relative rotation between two frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationReading {
    pub frame_i: usize,
    pub frame_k: usize,
    /// Signed angle from frame `i` to frame `k`, radians.
    pub theta: f64,
    /// Standard deviation of `theta`, radians.
    pub sigma_theta: f64,
}

/// A raw calibration recording: per-frame raster points plus encoder readings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFrame {
    pub frame_id: usize,
    pub kind: FrameKind,
    pub turntable_angle: f64,
    /// Raw measurements grouped by sweep row. Tip frames pool every row into
    /// one center; edge frames produce one center per row.
    pub rows: Vec<Vec<RawPoint>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSession {
    pub frames: Vec<RawFrame>,
    pub rotations: Vec<RotationReading>,
}

impl CalibrationSession {
    /// Collapse every raw frame into its centers.
    pub fn extract(&self, threshold_frac: f64, floor_mm2: f64) -> Result<Vec<FrameScan>, CalibError> {
        self.frames
            .iter()
            .map(|frame| {
                let centers = match frame.kind {
                    FrameKind::Tip => {
                        let pooled: Vec<RawPoint> =
                            frame.rows.iter().flatten().copied().collect();
                        vec![extract_center_with_floor(&pooled, threshold_frac, floor_mm2)?]
                    }
                    FrameKind::Edge => frame
                        .rows
                        .iter()
                        .map(|row| extract_center_with_floor(row, threshold_frac, floor_mm2))
                        .collect::<Result<_, _>>()?,
                };
                Ok(FrameScan {
                    frame_id: frame.frame_id,
                    kind: frame.kind,
                    centers,
                    turntable_angle: frame.turntable_angle,
                })
            })
            .collect()
    }
}

/// Full calibration estimate with uncertainty bookkeeping.
///
/// The covariance is ordered as (beam tangent x2, axis tangent x2, axis point
/// x3) in the tangent bases active at the final iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    /// Beam direction in the robot frame (unit).
    pub v: UnitDir,
    /// Turntable axis direction in the robot frame (unit).
    pub n: UnitDir,
    /// Point on the turntable axis, gauge-fixed so that `n . x_r = 0`.
    pub x_r: Point3,
    pub covariance: SMatrix<f64, 7, 7>,
    /// Root-mean-square of the unweighted residual entries, mm.
    pub residual_rms: f64,
    pub iterations: usize,
    /// False when the refinement hit its iteration cap before the gradient
    /// and cost tests were satisfied; the state still holds the best iterate.
    pub converged: bool,
}

impl CalibrationState {
    /// Closed-form state without refinement statistics.
    pub fn from_closed_form(v: UnitDir, n: UnitDir, x_r: Point3) -> Self {
        Self {
            v,
            n,
            x_r,
            covariance: SMatrix::zeros(),
            residual_rms: 0.0,
            iterations: 0,
            converged: true,
        }
    }
}

/// Collapse a raster scan into its amplitude-weighted center.
///
/// Points below `threshold_frac * max_amplitude` are discarded; the survivors
/// are averaged with amplitude weights. The reported covariances are the
/// empirical spread of the survivors, eigenvalue-floored and divided by the
/// survivor count so they describe the *mean*, not an individual draw.
pub fn extract_center(raws: &[RawPoint], threshold_frac: f64) -> Result<CenterPoint, CalibError> {
    extract_center_with_floor(raws, threshold_frac, DEFAULT_SIGMA_FLOOR_MM2)
}

pub fn extract_center_with_floor(
    raws: &[RawPoint],
    threshold_frac: f64,
    floor_mm2: f64,
) -> Result<CenterPoint, CalibError> {
    assert!(floor_mm2 > 0.0, "variance floor must be positive");
    let max_amp = raws.iter().map(|r| r.amplitude).fold(f64::NEG_INFINITY, f64::max);
    if raws.is_empty() || max_amp <= 0.0 {
        return Err(CalibError::NoSignal);
    }
    let cut = threshold_frac * max_amp;
    let kept: Vec<&RawPoint> = raws.iter().filter(|r| r.amplitude >= cut).collect();
    // max_amp > 0 guarantees at least the peak survives any threshold <= 1.
    debug_assert!(!kept.is_empty());

    let wsum: f64 = kept.iter().map(|r| r.amplitude).sum();
    let mut s = Vec3::zeros();
    let mut d = 0.0;
    for r in &kept {
        s += r.amplitude * r.s.coords;
        d += r.amplitude * r.d;
    }
    let s = Point3::from(s / wsum);
    let d = d / wsum;

    let k = kept.len();
    let mut cov_s = Matrix3::zeros();
    let mut var_d = 0.0;
    if k >= 2 {
        for r in &kept {
            let ds = r.s - s;
            cov_s += ds * ds.transpose();
            var_d += (r.d - d).powi(2);
        }
        cov_s /= (k - 1) as f64;
        var_d /= (k - 1) as f64;
    }

    // Floor the spread before the 1/k averaging gain: a raster that happens to
    // collapse onto a line (or a single point) must not claim zero uncertainty.
    let mut eig = cov_s.symmetric_eigen();
    for lambda in eig.eigenvalues.iter_mut() {
        *lambda = lambda.max(floor_mm2);
    }
    let sigma_s = eig.recompose() / k as f64;
    let sigma_d = var_d.max(floor_mm2) / k as f64;

    Ok(CenterPoint {
        s,
        d,
        sigma_s,
        sigma_d,
        n_raw: k,
    })
}

/// Estimate the beam direction from tip-target centers.
///
/// The tip stays put while the sensor moves, so the centers `S_c` all lie on
/// the line `X_tip - d_c * v`. The direction comes from the dominant spread of
/// the centers; its sign is chosen so that larger measured ranges correspond
/// to sensor positions *behind* the tip (range grows as the sensor backs away
/// along `-v`).
pub fn calibrate_beam(tip_frames: &[FrameScan]) -> Result<UnitDir, CalibError> {
    let centers: Vec<&CenterPoint> = tip_frames
        .iter()
        .filter(|f| f.kind == FrameKind::Tip)
        .flat_map(|f| f.centers.iter())
        .collect();
    if centers.len() < 2 {
        return Err(CalibError::MissingFrames {
            what: "tip",
            have: centers.len(),
            need: 2,
        });
    }
    let pts: Vec<Point3> = centers.iter().map(|c| c.s).collect();
    let u = geometry::fit_direction(&pts)?;

    let d_mean = centers.iter().map(|c| c.d).sum::<f64>() / centers.len() as f64;
    let along: f64 = centers
        .iter()
        .map(|c| c.s.coords.dot(&u) * (c.d - d_mean))
        .sum();
    // S_c = X_tip - d_c v implies cov(S.v, d) = -var(d): flip when positive.
    let v = if along > 0.0 { -u } else { u };
    Ok(v)
}

struct EdgeFrame {
    edge: Edge,
    points: Vec<Point3>,
}

/// Turn the edge frames into fitted lines in the robot frame.
fn edge_lines(
    edge_frames: &[FrameScan],
    v: &UnitDir,
) -> Result<std::collections::BTreeMap<usize, EdgeFrame>, CalibError> {
    let mut map = std::collections::BTreeMap::new();
    for frame in edge_frames.iter().filter(|f| f.kind == FrameKind::Edge) {
        let points: Vec<Point3> = frame
            .centers
            .iter()
            .map(|c| recover_point(&c.s, c.d, v))
            .collect();
        let edge = make_edge(&points)?;
        map.insert(frame.frame_id, EdgeFrame { edge, points });
    }
    Ok(map)
}

fn frame_pair<'a>(
    lines: &'a std::collections::BTreeMap<usize, EdgeFrame>,
    reading: &RotationReading,
) -> Result<(&'a EdgeFrame, &'a EdgeFrame), CalibError> {
    let fi = lines
        .get(&reading.frame_i)
        .ok_or(CalibError::UnknownFrame { frame_id: reading.frame_i })?;
    let fk = lines
        .get(&reading.frame_k)
        .ok_or(CalibError::UnknownFrame { frame_id: reading.frame_k })?;
    Ok((fi, fk))
}

/// Closed-form turntable estimate: axis direction `n` and a point `X_R` on
/// the axis, from filament lines observed at two or more table positions.
///
/// A rotation about `n` by `theta` maps the frame-`i` line onto the frame-`k`
/// line. Each usable pair contributes rows to a homogeneous system whose
/// null vector is `n`: every pair the exact invariant `(q_k - q_i)^T n = 0`,
/// and pairs at (or near) a half turn — as well as pairs with preserved line
/// direction — additionally the rows of `[q_i + q_k]_x`, the direction sum
/// being (nearly) parallel to the axis in those geometries. Sessions that
/// leave a whole plane of candidate axes (say, a single small rotation of one
/// filament) are reported as rank deficient rather than silently resolved.
/// Accuracy of the half-turn constraint degrades as the filament approaches
/// the table plane; keep it broadly upright.
///
/// `X_R` then solves the stacked incidence conditions
/// `[q_dst]_x (I - R) X_R = -(q_dst x (R X) + m_dst)` over both transport
/// directions of every pair, with the component along `n` (which the system
/// cannot see) gauge-fixed to zero.
pub fn calibrate_turntable(
    edge_frames: &[FrameScan],
    rotations: &[RotationReading],
    v: &UnitDir,
) -> Result<(UnitDir, Point3), CalibError> {
    let lines = edge_lines(edge_frames, v)?;
    if lines.len() < 2 {
        return Err(CalibError::MissingFrames {
            what: "edge",
            have: lines.len(),
            need: 2,
        });
    }

    let usable: Vec<&RotationReading> = rotations
        .iter()
        .filter(|r| wrap_angle(r.theta).abs() >= MIN_MOTION_RAD)
        .collect();
    if usable.is_empty() {
        return Err(CalibError::InsufficientMotion);
    }

    // --- axis direction -------------------------------------------------
    let mut rows: Vec<na::RowVector3<f64>> = Vec::new();
    for reading in &usable {
        let (fi, fk) = frame_pair(&lines, reading)?;
        let qi = fi.edge.q.into_inner();
        let mut qk = fk.edge.q.into_inner();
        // Line directions carry an arbitrary sign; make the pair acute.
        if qi.dot(&qk) < 0.0 {
            qk = -qk;
        }
        // The rotation preserves the axis component of the direction, so
        // n . (q_k - q_i) = 0 exactly. A single pair only pins down a plane,
        // which is where the half-turn geometry comes to the rescue: for
        // theta = pi the sum q_i + q_k is parallel to the axis exactly, and
        // for theta near pi it still is up to O(|theta - pi| sin a) with `a`
        // the filament tilt. Since (q_i + q_k) . (q_k - q_i) = 0 identically,
        // mixing both row families keeps the null space one-dimensional.
        // The same sum rows apply to (anti)parallel directions: a preserved
        // line direction away from a half turn must itself be the axis.
        rows.push((qk - qi).transpose());
        let theta = wrap_angle(reading.theta);
        let parallel = qi.dot(&qk) > 1.0 - RANK_GAP;
        let near_half_turn = (theta.abs() - std::f64::consts::PI).abs() < HALF_TURN_TOL;
        if parallel || near_half_turn {
            let sk = geometry::skew(&(qi + qk));
            rows.push(sk.row(0).into_owned());
            rows.push(sk.row(1).into_owned());
            rows.push(sk.row(2).into_owned());
        }
    }
    if rows.len() < 2 {
        return Err(CalibError::RankDeficient { context: "turntable axis" });
    }
    let m = na::DMatrix::from_fn(rows.len(), 3, |r, c| rows[r][c]);
    let svd = m.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let s0 = svd.singular_values[order[0]];
    let s1 = svd.singular_values[order[1]];
    if s1 <= RANK_GAP * s0 {
        return Err(CalibError::RankDeficient { context: "turntable axis" });
    }
    let null_row = v_t.row(order[2]);
    let n_dir = UnitDir::new_normalize(Vec3::new(null_row[0], null_row[1], null_row[2]));

    // Resolve the axis sign by the direction-transport residual; for a pure
    // half turn both signs tie and the largest-component rule decides.
    let cost = |n: &UnitDir| -> f64 {
        usable
            .iter()
            .map(|reading| {
                let (fi, fk) = frame_pair(&lines, reading).expect("checked above");
                let r = Rotation::new(*n, reading.theta).matrix();
                let rq = r * fi.edge.q.into_inner();
                let qk = fk.edge.q.into_inner();
                (rq - qk).norm_squared().min((rq + qk).norm_squared())
            })
            .sum()
    };
    let plus = cost(&n_dir);
    let minus = cost(&-n_dir);
    let n = if (plus - minus).abs() <= 1e-12 * (1.0 + plus.max(minus)) {
        geometry::orient_largest_component(n_dir)
    } else if minus < plus {
        -n_dir
    } else {
        n_dir
    };

    // --- point on the axis ----------------------------------------------
    let mut a_rows: Vec<na::RowVector3<f64>> = Vec::new();
    let mut b_vals: Vec<f64> = Vec::new();
    for reading in &usable {
        let (fi, fk) = frame_pair(&lines, reading)?;
        for (src, dst, theta) in [
            (fi, fk, reading.theta),
            (fk, fi, -reading.theta),
        ] {
            let r = Rotation::new(n, theta).matrix();
            let block = geometry::skew(&dst.edge.q) * (Matrix3::identity() - r);
            for p in &src.points {
                let rhs = -(dst.edge.q.cross(&(r * p.coords)) + dst.edge.m);
                for axis in 0..3 {
                    a_rows.push(block.row(axis).into_owned());
                    b_vals.push(rhs[axis]);
                }
            }
        }
    }
    let a = na::DMatrix::from_fn(a_rows.len(), 3, |r, c| a_rows[r][c]);
    let b = na::DVector::from_vec(b_vals);
    let svd = a.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    if sv.len() < 2 || sv[1] <= RANK_GAP * sv[0] {
        return Err(CalibError::RankDeficient { context: "axis point" });
    }
    // Truncated solve: the direction along n is structurally invisible
    // ((I - R) annihilates it), so the minimum-norm solution plus an explicit
    // projection lands on the gauge n . X_R = 0.
    let x = svd
        .solve(&b, RANK_GAP * sv[0])
        .map_err(|_| CalibError::RankDeficient { context: "axis point" })?;
    let mut x_r = Vec3::new(x[0], x[1], x[2]);
    x_r -= n.into_inner() * n.dot(&x_r);
    Ok((n, Point3::from(x_r)))
}
