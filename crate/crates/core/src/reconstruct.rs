//! Scan sessions to point clouds: undo the stage offset and the turntable
//! rotation for every station, then score the cloud against reference edges.
//!
//! A station contributes one point per modality it measured. The world-frame
//! point is `S + d·v`; de-rotating by the station angle about the calibrated
//! axis puts it in the object frame, where points from different table
//! positions of the same physical surface line up.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::CalibrationState;
use crate::geometry::{recover_point, rotate_about, Edge, Point3, Rotation};
use crate::Modality;

/// One stop of the scan path with its rectified ranges. A missing modality
/// simply contributes no point; a station may be entirely empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanStation {
    pub station_id: usize,
    /// Stage position, mm.
    pub s: Point3,
    /// Turntable angle when the station was recorded, radians.
    pub theta: f64,
    /// Rectified pulse-echo range, mm.
    pub d_us: Option<f64>,
    /// Rectified one-way range, mm.
    pub d_oa: Option<f64>,
}

/// One reconstructed surface point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudPoint {
    pub p: Point3,
    pub modality: Modality,
    pub station_id: usize,
}

/// Object-frame reconstruction of a whole session.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points of one modality, in insertion (station) order.
    pub fn modality(&self, m: Modality) -> impl Iterator<Item = &CloudPoint> {
        self.points.iter().filter(move |p| p.modality == m)
    }

    /// Station-ordered polyline per modality, the drawing order for contour
    /// plots.
    pub fn polylines(&self) -> Vec<(Modality, Vec<Point3>)> {
        [Modality::Us, Modality::Oa]
            .into_iter()
            .map(|m| (m, self.modality(m).map(|c| c.p).collect::<Vec<_>>()))
            .filter(|(_, pts)| !pts.is_empty())
            .collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReconstructError {
    #[error("scan session contains no stations")]
    EmptySession,
}

/// Both points a station can produce, in `[US, OA]` order.
///
/// `X_world = S + d·v`, then the table rotation is undone about the
/// calibrated axis: `X_obj = rot(n, -theta) applied around X_R`.
pub fn station_to_points(st: &ScanStation, calib: &CalibrationState) -> Vec<CloudPoint> {
    let back = Rotation::new(calib.n, -st.theta);
    let mut out = Vec::with_capacity(2);
    for (modality, d) in [(Modality::Us, st.d_us), (Modality::Oa, st.d_oa)] {
        if let Some(d) = d {
            let world = recover_point(&st.s, d, &calib.v);
            let p = rotate_about(&back, &calib.x_r, &world);
            out.push(CloudPoint { p, modality, station_id: st.station_id });
        }
    }
    out
}

/// Concatenated [`station_to_points`] over the session, station order
/// preserved.
pub fn reconstruct(
    session: &[ScanStation],
    calib: &CalibrationState,
) -> Result<PointCloud, ReconstructError> {
    if session.is_empty() {
        return Err(ReconstructError::EmptySession);
    }
    let points = session.iter().flat_map(|st| station_to_points(st, calib)).collect();
    Ok(PointCloud { points })
}

/// Summary of a set of non-negative distances, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub n: usize,
    pub mean_mm: f64,
    pub std_mm: f64,
    pub max_mm: f64,
}

impl ErrorStats {
    fn of(errors: &[f64]) -> Self {
        let n = errors.len();
        if n == 0 {
            return ErrorStats { n: 0, mean_mm: 0.0, std_mm: 0.0, max_mm: 0.0 };
        }
        let mean = errors.iter().sum::<f64>() / n as f64;
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
        let max = errors.iter().fold(0.0f64, |m, e| m.max(*e));
        ErrorStats { n, mean_mm: mean, std_mm: var.sqrt(), max_mm: max }
    }
}

/// One scored cloud point: which edge claimed it and at what distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointAssignment {
    pub station_id: usize,
    pub modality: Modality,
    /// Index into the edge list handed to [`contour_error`].
    pub edge_index: usize,
    pub error_mm: f64,
}

/// Point-to-edge validation metrics for one reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourReport {
    pub assignments: Vec<PointAssignment>,
    /// Statistics per reference edge, same order as the input list.
    pub per_edge: Vec<ErrorStats>,
    pub us: ErrorStats,
    pub oa: ErrorStats,
}

impl ContourReport {
    pub fn stats(&self, m: Modality) -> &ErrorStats {
        match m {
            Modality::Us => &self.us,
            Modality::Oa => &self.oa,
        }
    }
}

/// Score every cloud point against its nearest reference edge: the per-point
/// error is the Euclidean point-to-line distance, aggregated per edge and per
/// modality.
pub fn contour_error(cloud: &PointCloud, truth_edges: &[Edge]) -> ContourReport {
    assert!(!truth_edges.is_empty(), "contour scoring needs at least one reference edge");
    let mut assignments = Vec::with_capacity(cloud.len());
    let mut per_edge: Vec<Vec<f64>> = vec![Vec::new(); truth_edges.len()];
    let mut us = Vec::new();
    let mut oa = Vec::new();
    for pt in &cloud.points {
        let (edge_index, error_mm) = truth_edges
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.distance_to(&pt.p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty edge list");
        assignments.push(PointAssignment {
            station_id: pt.station_id,
            modality: pt.modality,
            edge_index,
            error_mm,
        });
        per_edge[edge_index].push(error_mm);
        match pt.modality {
            Modality::Us => us.push(error_mm),
            Modality::Oa => oa.push(error_mm),
        }
    }
    ContourReport {
        assignments,
        per_edge: per_edge.iter().map(|e| ErrorStats::of(e)).collect(),
        us: ErrorStats::of(&us),
        oa: ErrorStats::of(&oa),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{unit_dir, UnitDir, Vec3};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn simple_calib() -> CalibrationState {
        CalibrationState::from_closed_form(
            unit_dir(0.0, 1.0, 0.0),
            unit_dir(0.0, 0.0, 1.0),
            Point3::new(0.0, 0.0, 0.0),
        )
    }

    fn bench_calib() -> CalibrationState {
        CalibrationState::from_closed_form(
            crate::sim::bench_beam(),
            crate::sim::bench_axis(),
            crate::sim::bench_axis_point(),
        )
    }

    fn station(id: usize, s: Point3, theta: f64, d_us: Option<f64>, d_oa: Option<f64>) -> ScanStation {
        ScanStation { station_id: id, s, theta, d_us, d_oa }
    }

    #[test]
    fn zero_angle_keeps_world_coordinates() {
        let calib = bench_calib();
        let st = station(3, Point3::new(230.0, 270.0, 12.0), 0.0, Some(9.5), Some(9.4));
        let pts = station_to_points(&st, &calib);
        assert_eq!(pts.len(), 2);
        let world_us = st.s + 9.5 * calib.v.into_inner();
        assert_abs_diff_eq!(pts[0].p, world_us, epsilon = 1e-9);
        assert_eq!(pts[0].modality, Modality::Us);
        assert_eq!(pts[1].modality, Modality::Oa);
        assert_eq!(pts[0].station_id, 3);
    }

    #[test]
    fn rerotating_recovers_the_world_point() {
        let calib = bench_calib();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let s = Point3::new(
                220.0 + 30.0 * rng.random::<f64>(),
                260.0 + 30.0 * rng.random::<f64>(),
                20.0 * rng.random::<f64>(),
            );
            let theta = PI * (2.0 * rng.random::<f64>() - 1.0);
            let d = 6.5 + 10.0 * rng.random::<f64>();
            let st = station(0, s, theta, Some(d), None);
            let world = s + d * calib.v.into_inner();
            let obj = station_to_points(&st, &calib)[0].p;
            let fwd = Rotation::new(calib.n, theta);
            let back_to_world = rotate_about(&fwd, &calib.x_r, &obj);
            assert_abs_diff_eq!(back_to_world, world, epsilon = 1e-12);
        }
    }

    #[test]
    fn half_turn_on_a_symmetric_scene_lands_on_the_same_outline() {
        // Axis through the origin, beam along +y, square outline |x|,|y| <= 5
        // symmetric under a half turn: scanning the facing side before and
        // after the turn produces points on the same object outline, mirrored
        // through the center.
        let calib = simple_calib();
        let pre = station(0, Point3::new(1.0, -10.0, 0.0), 0.0, Some(5.0), None);
        let post = station(1, Point3::new(-1.0, -10.0, 0.0), PI, Some(5.0), None);
        let p_pre = station_to_points(&pre, &calib)[0].p;
        let p_post = station_to_points(&post, &calib)[0].p;
        assert_abs_diff_eq!(p_pre, Point3::new(1.0, -5.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(p_post, Point3::new(1.0, 5.0, 0.0), epsilon = 1e-9);
        let outline = [
            Edge::through(&Point3::new(0.0, -5.0, 0.0), unit_dir(1.0, 0.0, 0.0)),
            Edge::through(&Point3::new(0.0, 5.0, 0.0), unit_dir(1.0, 0.0, 0.0)),
        ];
        for p in [p_pre, p_post] {
            let nearest = outline.iter().map(|e| e.distance_to(&p)).fold(f64::MAX, f64::min);
            assert_abs_diff_eq!(nearest, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn empty_session_is_an_error_and_empty_stations_are_not() {
        let calib = simple_calib();
        assert_eq!(reconstruct(&[], &calib), Err(ReconstructError::EmptySession));
        let quiet = station(0, Point3::new(0.0, -10.0, 0.0), 0.0, None, None);
        let cloud = reconstruct(&[quiet], &calib).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn cloud_size_counts_present_modalities() {
        let calib = simple_calib();
        let s = Point3::new(0.0, -10.0, 0.0);
        let session = [
            station(0, s, 0.0, Some(4.0), Some(4.1)),
            station(1, s, 0.1, Some(4.0), None),
            station(2, s, 0.2, None, Some(4.2)),
            station(3, s, 0.3, None, None),
        ];
        let cloud = reconstruct(&session, &calib).unwrap();
        assert_eq!(cloud.len(), 4);
        assert_eq!(cloud.modality(Modality::Us).count(), 2);
        assert_eq!(cloud.modality(Modality::Oa).count(), 2);
        let lines = cloud.polylines();
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|(_, pts)| pts.len() == 2));
    }

    #[test]
    fn points_on_the_edges_score_zero() {
        let e1 = Edge::through(&Point3::new(0.0, 0.0, 5.0), unit_dir(1.0, 0.0, 0.0));
        let e2 = Edge::through(&Point3::new(0.0, 0.0, 5.0), unit_dir(0.0, 1.0, 0.0));
        let cloud = PointCloud {
            points: vec![
                CloudPoint { p: Point3::new(3.0, 0.0, 5.0), modality: Modality::Us, station_id: 0 },
                CloudPoint { p: Point3::new(0.0, -2.0, 5.0), modality: Modality::Oa, station_id: 1 },
            ],
        };
        let report = contour_error(&cloud, &[e1, e2]);
        assert_eq!(report.us.n, 1);
        assert_eq!(report.oa.n, 1);
        assert_abs_diff_eq!(report.us.mean_mm, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.oa.std_mm, 0.0, epsilon = 1e-12);
        assert_eq!(report.assignments[0].edge_index, 0);
        assert_eq!(report.assignments[1].edge_index, 1);
    }

    #[test]
    fn known_offsets_produce_known_stats() {
        let edge = Edge::through(&Point3::new(0.0, 0.0, 0.0), unit_dir(1.0, 0.0, 0.0));
        let mk = |y: f64, id: usize| CloudPoint {
            p: Point3::new(id as f64, y, 0.0),
            modality: Modality::Us,
            station_id: id,
        };
        let cloud = PointCloud { points: vec![mk(0.1, 0), mk(-0.3, 1), mk(0.2, 2)] };
        let report = contour_error(&cloud, &[edge]);
        assert_abs_diff_eq!(report.us.mean_mm, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(report.us.max_mm, 0.3, epsilon = 1e-12);
        let expect_std = (2.0f64 / 300.0).sqrt();
        assert_abs_diff_eq!(report.us.std_mm, expect_std, epsilon = 1e-12);
        assert_eq!(report.per_edge[0].n, 3);
    }

    #[test]
    fn contour_error_survives_a_common_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = move || -> f64 { rng.sample(StandardNormal) };
        let edges = [
            Edge::through(&Point3::new(0.0, -5.0, 2.0), unit_dir(1.0, 0.0, 0.0)),
            Edge::through(&Point3::new(5.0, 0.0, 2.0), unit_dir(0.0, 1.0, 0.1)),
        ];
        let points: Vec<CloudPoint> = (0..60)
            .map(|i| CloudPoint {
                p: Point3::new(4.0 * g(), 4.0 * g(), 2.0 + 0.3 * g()),
                modality: if i % 2 == 0 { Modality::Us } else { Modality::Oa },
                station_id: i,
            })
            .collect();
        let cloud = PointCloud { points };
        let before = contour_error(&cloud, &edges);

        let rot = Rotation::new(unit_dir(0.3, -0.5, 0.8), 1.1);
        let center = Point3::new(2.0, -7.0, 4.0);
        let shift = Vec3::new(12.0, -3.0, 5.5);
        let moved_cloud = PointCloud {
            points: cloud
                .points
                .iter()
                .map(|c| CloudPoint { p: rotate_about(&rot, &center, &c.p) + shift, ..*c })
                .collect(),
        };
        let moved_edges: Vec<Edge> =
            edges.iter().map(|e| e.rotated(&rot, &center).translated(&shift)).collect();
        let after = contour_error(&moved_cloud, &moved_edges);

        for (a, b) in before.assignments.iter().zip(&after.assignments) {
            assert_eq!(a.edge_index, b.edge_index);
            assert_abs_diff_eq!(a.error_mm, b.error_mm, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(before.us.mean_mm, after.us.mean_mm, epsilon = 1e-9);
        assert_abs_diff_eq!(before.oa.std_mm, after.oa.std_mm, epsilon = 1e-9);
    }

    #[test]
    fn quarter_turn_scan_of_a_square_block_closes_the_outline() {
        // Four stations, one per quarter turn, all aimed at whichever face
        // currently looks at the sensor; in the object frame they must land
        // on four different faces of the square.
        let calib = simple_calib();
        let session: Vec<ScanStation> = (0..4)
            .map(|f| {
                station(f, Point3::new(0.0, -10.0, 0.0), f as f64 * FRAC_PI_2, Some(6.0), None)
            })
            .collect();
        let cloud = reconstruct(&session, &calib).unwrap();
        let half = 4.0;
        let faces: Vec<Edge> = vec![
            Edge::through(&Point3::new(0.0, -half, 0.0), unit_dir(1.0, 0.0, 0.0)),
            Edge::through(&Point3::new(-half, 0.0, 0.0), unit_dir(0.0, 1.0, 0.0)),
            Edge::through(&Point3::new(0.0, half, 0.0), unit_dir(1.0, 0.0, 0.0)),
            Edge::through(&Point3::new(half, 0.0, 0.0), unit_dir(0.0, 1.0, 0.0)),
        ];
        let report = contour_error(&cloud, &faces);
        let hit_edges: Vec<usize> = report.assignments.iter().map(|a| a.edge_index).collect();
        let mut sorted = hit_edges.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3], "each quarter turn sees a different face");
        assert!(report.us.max_mm < 1e-9);
    }

    #[test]
    fn object_frame_points_are_theta_independent_at_a_surface_point() {
        // The same physical spot on a bench block face, observed at several
        // table angles with jittered ranges: de-rotated points cluster within
        // the injected noise scale.
        let (scene, center, half_xy) = crate::sim::aluminum_block_scene(
            crate::sim::NoiseSpec { sigma_sample: 0.0, sigma_s_mm: 0.0, sigma_d_mm: 0.05, sigma_theta_rad: 0.0 },
            9,
        );
        let calib = bench_calib();
        let v = scene.v_true.into_inner();
        let aim = Point3::new(center.x, center.y - half_xy, center.z);
        let mut worlds = Vec::new();
        for theta in [-0.35, -0.175, 0.0, 0.175, 0.35] {
            // Follow the spot as the table turns: aim the (world-fixed) beam
            // at the rotated image of the surface point. The face normal
            // stays within ~20 degrees of the beam, so the spot never hides.
            let fwd = Rotation::new(scene.n_true, theta);
            let target = rotate_about(&fwd, &scene.x_r_true, &aim);
            worlds.push((target - 11.0 * v, theta));
        }
        let (stations, _) = crate::sim::synth_object_scan(
            &scene,
            &worlds,
            crate::sim::ScanMode::DirectRange,
        );
        let session: Vec<ScanStation> = stations
            .iter()
            .map(|st| station(st.station_id, st.s, st.theta, st.d_us, st.d_oa))
            .collect();
        let cloud = reconstruct(&session, &calib).unwrap();
        let us: Vec<Point3> = cloud.modality(Modality::Us).map(|c| c.p).collect();
        assert_eq!(us.len(), 5);
        let centroid = Point3::from(
            us.iter().map(|p| p.coords).sum::<Vec3>() / us.len() as f64,
        );
        for p in &us {
            assert!((p - centroid).norm() < 2.0 * 0.05, "spread {}", (p - centroid).norm());
        }
    }

    #[test]
    fn direction_of_v_matters_in_recovery() {
        // Guard: the station transform must use the calibrated beam, not an
        // axis-aligned shortcut.
        let calib = bench_calib();
        let st = station(0, Point3::new(230.0, 270.0, 12.0), 0.0, None, Some(10.0));
        let p = station_to_points(&st, &calib)[0].p;
        let naive = st.s + Vec3::new(0.0, 10.0, 0.0);
        assert!((p - naive).norm() > 0.5);
        let exact = st.s + 10.0 * calib.v.into_inner();
        assert_abs_diff_eq!(p, exact, epsilon = 1e-9);
    }

    #[test]
    fn rotating_the_aim_ray_needs_unit_renormalization() {
        // station_to_points touches UnitDir's guarantees; make sure a
        // deliberately awkward axis still produces finite points.
        let calib = CalibrationState::from_closed_form(
            UnitDir::new_normalize(Vec3::new(1e-8, 1.0, 1e-8)),
            UnitDir::new_normalize(Vec3::new(1.0, 1.0, 1.0)),
            Point3::new(100.0, -50.0, 25.0),
        );
        let st = station(0, Point3::new(90.0, -80.0, 20.0), 2.3, Some(12.0), None);
        let p = station_to_points(&st, &calib)[0].p;
        assert!(p.coords.iter().all(|c| c.is_finite()));
    }
}
