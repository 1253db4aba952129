//! Synthetic sensor bench: declared ground-truth scenes turned into waveforms,
//! calibration sessions, and turntable scans, so every estimator in the crate
//! can be exercised without hardware.
//!
//! The generative model is deliberately small. Acoustic arrivals sit at
//! `(l0 + d) / c` one-way, where `d` is the beam-line distance to the target
//! and `l0` the probe's internal path; the pulse-echo return shows up at twice
//! that and a weaker reverberation at three times. Bursts are Hann-gated
//! multi-tone packets whose envelope peaks exactly at the arrival time, which
//! keeps "where is the burst" well defined down to one sample. All randomness
//! is `ChaCha8` seeded from the scene seed plus the station/position, so a
//! given scene reproduces bit-identically.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{
    CalibrationSession, FrameKind, RawFrame, RawPoint, RotationReading,
};
use crate::geometry::{
    line_closest_approach, rotate_about, unit_dir, Edge, Point3, Rotation, UnitDir, Vec3,
};
use crate::signal::Waveform;
use crate::Modality;

/// Speed of sound in air at room temperature, m/s.
pub const DEFAULT_SOUND_SPEED: f64 = 343.0;

/// Internal acoustic path between the transducer face and the stage zero of
/// the range axis, mm. Added to every arrival; the rectifier absorbs it.
pub const DEFAULT_PATH_OFFSET_MM: f64 = 17.0;

/// Acquisition rate of the bench digitizer, Hz.
pub const SAMPLE_RATE_HZ: f64 = 10.0e6;

/// Record length: 320 µs, enough to hold the second reverberation at the far
/// end of the working range.
pub const RECORD_SAMPLES: usize = 3200;

/// Emission band centers, Hz.
pub const BAND_CENTERS_HZ: [f64; 3] = [80.0e3, 532.0e3, 728.0e3];

/// Default mix of the three bands when a material does not specify one.
pub const DEFAULT_BAND_WEIGHTS: [f64; 3] = [0.2, 0.45, 0.35];

/// Relative amplitude of the second optoacoustic reverberation.
pub const DEFAULT_ECHO2_RATIO: f64 = 0.4;

/// Burst duration in cycles of the 532 kHz band (~18.8 µs). Ten cycles of the
/// 80 kHz band would last 125 µs and smear the one-way arrival into the
/// pulse-echo window, so the gate length follows the middle band instead; the
/// low band then contributes only a cycle and a half, as a resonance-filtered
/// pop does.
pub const BURST_CYCLES: f64 = 10.0;

/// Gate length of one burst, seconds.
pub fn burst_duration_s() -> f64 {
    BURST_CYCLES / BAND_CENTERS_HZ[1]
}

/// Encoder readings never claim to be perfect even on a noise-free bench;
/// a zero standard deviation would put infinite weight on the angle rows.
const MIN_ENCODER_SIGMA_RAD: f64 = 1e-6;

/// Beam direction of the reference bench, robot frame.
pub fn bench_beam() -> UnitDir {
    unit_dir(0.0656, 0.9955, -0.0678)
}

/// Turntable axis of the reference bench.
pub fn bench_axis() -> UnitDir {
    unit_dir(-0.0007, 0.0022, 0.9999)
}

/// Point on the turntable axis of the reference bench, mm.
pub fn bench_axis_point() -> Point3 {
    Point3::new(235.21, 288.17, 0.0)
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    /// The requested acquisition plan cannot produce usable data.
    #[error("infeasible plan: {0}")]
    PlanInfeasible(String),
    /// The scene itself violates its invariants.
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

// ---------------------------------------------------------------------------
// Scene description
// ---------------------------------------------------------------------------

/// Noise magnitudes injected by the bench. All zero means exact data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Additive per-sample waveform noise, same units as the burst amplitude.
    pub sigma_sample: f64,
    /// Stage position readout noise per axis, mm.
    pub sigma_s_mm: f64,
    /// Range readout noise, mm.
    pub sigma_d_mm: f64,
    /// Turntable encoder noise, radians.
    pub sigma_theta_rad: f64,
}

impl NoiseSpec {
    /// No noise anywhere; the bench becomes an exact oracle.
    pub fn quiet() -> Self {
        NoiseSpec { sigma_sample: 0.0, sigma_s_mm: 0.0, sigma_d_mm: 0.0, sigma_theta_rad: 0.0 }
    }

    /// Noise scale of the physical rig: 0.05 mm stage/range jitter and a
    /// 0.1° encoder.
    pub fn bench() -> Self {
        NoiseSpec {
            sigma_sample: 0.01,
            sigma_s_mm: 0.05,
            sigma_d_mm: 0.05,
            sigma_theta_rad: 1.7e-3,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let all = [self.sigma_sample, self.sigma_s_mm, self.sigma_d_mm, self.sigma_theta_rad];
        if all.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(SimError::InvalidScene("noise sigmas must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// How strongly a target answers in each modality and how its emission
/// spreads over the three bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    /// One-way optoacoustic response, 0 = optically silent (glass-like).
    pub oa_strength: f64,
    /// Pulse-echo reflectivity, 0 = acoustically soft (foam-like).
    pub us_reflectivity: f64,
    /// Relative energy in the three emission bands; non-negative, sums to <= 1.
    pub band_weights: [f64; 3],
}

impl MaterialSpec {
    pub fn new(oa_strength: f64, us_reflectivity: f64, band_weights: [f64; 3]) -> Self {
        let m = MaterialSpec { oa_strength, us_reflectivity, band_weights };
        m.validate().expect("material out of range");
        m
    }

    fn validate(&self) -> Result<(), SimError> {
        let ok_unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        if !ok_unit(self.oa_strength) || !ok_unit(self.us_reflectivity) {
            return Err(SimError::InvalidScene("modality strengths must lie in [0, 1]".into()));
        }
        if self.band_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SimError::InvalidScene("band weights must be >= 0".into()));
        }
        if self.band_weights.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(SimError::InvalidScene("band weights must sum to <= 1".into()));
        }
        Ok(())
    }

    /// Peak envelope amplitude of a unit-strength burst with these weights.
    pub fn tone_sum(&self) -> f64 {
        self.band_weights.iter().sum()
    }

    /// Bright in both modalities; the validation target.
    pub fn aluminum() -> Self {
        MaterialSpec::new(0.9, 0.85, [0.2, 0.45, 0.35])
    }

    /// Optically transparent: no optoacoustic generation, strong echo.
    pub fn glass() -> Self {
        MaterialSpec::new(0.0, 0.9, [0.15, 0.55, 0.30])
    }

    /// Soft absorber: strong optoacoustic pop, no usable echo.
    pub fn black_foam() -> Self {
        MaterialSpec::new(0.8, 0.0, [0.7, 0.2, 0.1])
    }
}

/// Analytic target geometry, object frame, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Axis-aligned box.
    Block { center: Point3, half_extents: Vec3 },
    /// Finite cylinder with flat caps.
    Cylinder { base: Point3, axis: UnitDir, radius: f64, height: f64 },
    /// Thin wire between two endpoints. Treated as a line scatterer: a ray
    /// passing within `radius` of the centerline reports the distance to the
    /// closest-approach point, not to the surface.
    Filament { a: Point3, b: Point3, radius: f64 },
}

impl Shape {
    /// Distance along `dir` from `origin` to this shape, if the ray hits it.
    /// Origins inside a solid return `None` — the probe cannot range from
    /// within a target.
    pub fn raycast(&self, origin: &Point3, dir: &UnitDir) -> Option<f64> {
        match *self {
            Shape::Block { center, half_extents } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for i in 0..3 {
                    let o = origin[i] - center[i];
                    let u = dir[i];
                    let h = half_extents[i];
                    if u.abs() < 1e-12 {
                        if o.abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let (ta, tb) = ((-h - o) / u, (h - o) / u);
                    t_near = t_near.max(ta.min(tb));
                    t_far = t_far.min(ta.max(tb));
                }
                (t_near <= t_far && t_near > 1e-9).then_some(t_near)
            }
            Shape::Cylinder { base, axis, radius, height } => {
                let w = origin - base;
                let uz = dir.dot(&axis);
                let wz = w.dot(&axis);
                let u_perp = dir.into_inner() - uz * axis.into_inner();
                let w_perp = w - wz * axis.into_inner();
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if t > 1e-9 && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                // Lateral surface.
                let a = u_perp.norm_squared();
                if a > 1e-16 {
                    let b = 2.0 * w_perp.dot(&u_perp);
                    let c = w_perp.norm_squared() - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        for t in [(-b - disc.sqrt()) / (2.0 * a), (-b + disc.sqrt()) / (2.0 * a)] {
                            let z = wz + t * uz;
                            if (0.0..=height).contains(&z) {
                                consider(t);
                            }
                        }
                    }
                }
                // Caps.
                if uz.abs() > 1e-12 {
                    for cap in [0.0, height] {
                        let t = (cap - wz) / uz;
                        if (w_perp + t * u_perp).norm() <= radius {
                            consider(t);
                        }
                    }
                }
                best
            }
            Shape::Filament { a, b, radius } => {
                let len = (b - a).norm();
                let m = UnitDir::new_normalize(b - a);
                let (t, s, dist) = line_closest_approach(origin, dir, &a, &m);
                (t > 1e-9 && dist <= radius && (0.0..=len).contains(&s)).then_some(t)
            }
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = match *self {
            Shape::Block { half_extents, .. } => half_extents.iter().any(|h| *h <= 0.0),
            Shape::Cylinder { radius, height, .. } => radius <= 0.0 || height <= 0.0,
            Shape::Filament { a, b, radius } => radius <= 0.0 || (b - a).norm() <= 0.0,
        };
        if bad {
            return Err(SimError::InvalidScene("shape dimensions must be positive".into()));
        }
        Ok(())
    }

    fn bounding_sphere(&self) -> (Point3, f64) {
        match *self {
            Shape::Block { center, half_extents } => (center, half_extents.norm()),
            Shape::Cylinder { base, axis, radius, height } => {
                let mid = base + axis.into_inner() * (height / 2.0);
                (mid, (radius * radius + height * height / 4.0).sqrt())
            }
            Shape::Filament { a, b, radius } => {
                (Point3::from((a.coords + b.coords) / 2.0), (b - a).norm() / 2.0 + radius)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub material: MaterialSpec,
}

/// Ground truth for one bench setup: sensor geometry, targets, noise, seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// True beam direction, robot frame.
    pub v_true: UnitDir,
    /// True turntable axis.
    pub n_true: UnitDir,
    /// True point on the turntable axis, mm.
    pub x_r_true: Point3,
    /// Speed of sound, m/s.
    pub sound_speed: f64,
    /// Internal acoustic path added to every arrival, mm.
    pub path_offset_mm: f64,
    /// Second-reverberation amplitude relative to the first arrival.
    pub echo2_ratio: f64,
    /// Targets, object frame (the pose they hold at turntable angle zero).
    pub objects: Vec<SceneObject>,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Scene {
    /// Scene with the reference-bench geometry and default acoustics.
    pub fn bench(objects: Vec<SceneObject>, noise: NoiseSpec, seed: u64) -> Self {
        let scene = Scene {
            v_true: bench_beam(),
            n_true: bench_axis(),
            x_r_true: bench_axis_point(),
            sound_speed: DEFAULT_SOUND_SPEED,
            path_offset_mm: DEFAULT_PATH_OFFSET_MM,
            echo2_ratio: DEFAULT_ECHO2_RATIO,
            objects,
            noise,
            seed,
        };
        scene.validate().expect("bench scene must be valid");
        scene
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sound_speed > 0.0) {
            return Err(SimError::InvalidScene("sound speed must be positive".into()));
        }
        if !(self.path_offset_mm >= 0.0) || !(0.0..=1.0).contains(&self.echo2_ratio) {
            return Err(SimError::InvalidScene(
                "path offset must be >= 0 and echo ratio in [0, 1]".into(),
            ));
        }
        self.noise.validate()?;
        for obj in &self.objects {
            obj.shape.validate()?;
            obj.material.validate()?;
        }
        // Coarse overlap rejection via bounding spheres; fine for the sparse
        // scenes the bench uses.
        for i in 0..self.objects.len() {
            for k in i + 1..self.objects.len() {
                let (ci, ri) = self.objects[i].shape.bounding_sphere();
                let (ck, rk) = self.objects[k].shape.bounding_sphere();
                if (ci - ck).norm() < ri + rk {
                    return Err(SimError::InvalidScene(format!(
                        "objects {i} and {k} overlap (bounding-sphere test)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// One-way arrival time for a beam-line distance `d_mm`, seconds.
    pub fn oa_time_s(&self, d_mm: f64) -> f64 {
        (self.path_offset_mm + d_mm) * 1e-3 / self.sound_speed
    }

    /// The sensor ray expressed in the object frame at turntable angle
    /// `theta`: rotating the table by `theta` is the same as rotating the ray
    /// by `-theta` about the axis.
    pub fn object_frame_ray(&self, s: &Point3, theta: f64) -> (Point3, UnitDir) {
        if theta == 0.0 {
            return (*s, self.v_true);
        }
        let rot = Rotation::new(self.n_true, -theta);
        let origin = rotate_about(&rot, &self.x_r_true, s);
        let dir = UnitDir::new_normalize(rot.matrix() * self.v_true.into_inner());
        (origin, dir)
    }

    /// Nearest target along the beam from `s` at turntable angle `theta`.
    pub fn raycast(&self, s: &Point3, theta: f64) -> Option<(f64, &SceneObject)> {
        let (origin, dir) = self.object_frame_ray(s, theta);
        self.objects
            .iter()
            .filter_map(|obj| obj.shape.raycast(&origin, &dir).map(|t| (t, obj)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

// ---------------------------------------------------------------------------
// Waveform synthesis
// ---------------------------------------------------------------------------

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn waveform_seed(base: u64, s: &Point3, theta: f64) -> u64 {
    let mut h = mix64(base ^ 0x57a7_e5ee_d000_0001);
    for bits in [s.x.to_bits(), s.y.to_bits(), s.z.to_bits(), theta.to_bits()] {
        h = mix64(h ^ bits);
    }
    h
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Add one Hann-gated multi-tone burst centered at `t_center_s`. All carriers
/// are cosines in the gate-centered time, so they align constructively at the
/// center and the envelope peak marks the arrival.
fn add_burst(samples: &mut [f64], t_center_s: f64, amp: f64, weights: &[f64; 3]) {
    if amp <= 0.0 {
        return;
    }
    let half = burst_duration_s() / 2.0;
    let i0 = ((t_center_s - half) * SAMPLE_RATE_HZ).ceil().max(0.0) as usize;
    let i1 = ((t_center_s + half) * SAMPLE_RATE_HZ).floor().min((samples.len() - 1) as f64);
    if i1 < 0.0 {
        return;
    }
    for i in i0..=i1 as usize {
        let dt = i as f64 / SAMPLE_RATE_HZ - t_center_s;
        let gate = 0.5 * (1.0 - (TAU * (dt / (2.0 * half) + 0.5)).cos());
        let tone: f64 =
            weights.iter().zip(BAND_CENTERS_HZ).map(|(w, f)| w * (TAU * f * dt).cos()).sum();
        samples[i] += amp * gate * tone;
    }
}

/// Assemble a full record from `(center_time_s, amplitude)` bursts plus white
/// noise. Bursts outside the record are silently clipped.
pub fn synth_bursts(
    bursts: &[(f64, f64)],
    weights: &[f64; 3],
    sigma_noise: f64,
    seed: u64,
) -> Waveform {
    let mut x = vec![0.0f64; RECORD_SAMPLES];
    for &(t, a) in bursts {
        add_burst(&mut x, t, a, weights);
    }
    if sigma_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut x {
            *v += sigma_noise * gauss(&mut rng);
        }
    }
    Waveform::new(x, SAMPLE_RATE_HZ, 0.0)
}

/// Record the bench would capture at `sensor_pos` with the table at zero.
/// No target in the beam means a noise-only record.
pub fn synth_waveform(scene: &Scene, sensor_pos: &Point3) -> Waveform {
    synth_waveform_at(scene, sensor_pos, 0.0)
}

/// Same as [`synth_waveform`] at an arbitrary turntable angle.
pub fn synth_waveform_at(scene: &Scene, sensor_pos: &Point3, theta: f64) -> Waveform {
    let seed = waveform_seed(scene.seed, sensor_pos, theta);
    match scene.raycast(sensor_pos, theta) {
        None => synth_bursts(&[], &DEFAULT_BAND_WEIGHTS, scene.noise.sigma_sample, seed),
        Some((d, obj)) => {
            let t1 = scene.oa_time_s(d);
            let m = &obj.material;
            let bursts = [
                (t1, m.oa_strength),
                (2.0 * t1, m.us_reflectivity),
                (3.0 * t1, scene.echo2_ratio * m.oa_strength),
            ];
            synth_bursts(&bursts, &m.band_weights, scene.noise.sigma_sample, seed)
        }
    }
}

/// Noise sigma that puts the given peak amplitude at `snr_db`.
pub fn sigma_for_snr_db(peak_amplitude: f64, snr_db: f64) -> f64 {
    peak_amplitude * 10f64.powf(-snr_db / 20.0)
}

/// One-way arrival time for range `d_mm` under the default bench acoustics.
pub fn oa_arrival_s(d_mm: f64) -> f64 {
    (DEFAULT_PATH_OFFSET_MM + d_mm) * 1e-3 / DEFAULT_SOUND_SPEED
}

/// Round-trip arrival time for range `d_mm` under the default bench acoustics.
pub fn us_arrival_s(d_mm: f64) -> f64 {
    2.0 * oa_arrival_s(d_mm)
}

/// Dual-modality record of an ideal reflector at range `d_mm`: one-way
/// arrival, pulse-echo return, and the reduced second reverberation.
pub fn synth_station_waveform(d_mm: f64, sigma_noise: f64, seed: u64) -> Waveform {
    let t = oa_arrival_s(d_mm);
    synth_bursts(
        &[(t, 1.0), (2.0 * t, 1.0), (3.0 * t, DEFAULT_ECHO2_RATIO)],
        &DEFAULT_BAND_WEIGHTS,
        sigma_noise,
        seed,
    )
}

// ---------------------------------------------------------------------------
// Ranging distortion and beam profile
// ---------------------------------------------------------------------------

/// Systematic beam-geometry ranging error at range `d_mm`: a smooth half-sine
/// over the 6–18 mm sweep, peaking mid-range at 0.6 mm (pulse-echo) and
/// 0.5 mm (one-way). This is what the rectifier exists to remove.
pub fn range_bias_mm(modality: Modality, d_mm: f64) -> f64 {
    let amp = match modality {
        Modality::Us => 0.6,
        Modality::Oa => 0.5,
    };
    amp * (PI * (d_mm - 6.0) / 12.0).sin()
}

/// Record of an ideal reflector whose arrivals carry the per-modality
/// systematic ranging bias; input to rectification tests.
pub fn synth_biased_ranging_waveform(d_mm: f64, sigma_noise: f64, seed: u64) -> Waveform {
    let t_oa = oa_arrival_s(d_mm + range_bias_mm(Modality::Oa, d_mm));
    let t_us = 2.0 * oa_arrival_s(d_mm + range_bias_mm(Modality::Us, d_mm));
    synth_bursts(
        &[(t_oa, 1.0), (t_us, 1.0), (3.0 * t_oa, DEFAULT_ECHO2_RATIO)],
        &DEFAULT_BAND_WEIGHTS,
        sigma_noise,
        seed,
    )
}

/// Lateral full-width-at-half-maximum of the beam at range `d_mm`: 0.75 mm
/// (pulse-echo) and 0.392 mm (one-way) at the 10 mm focus, widening linearly
/// away from it.
pub fn beam_fwhm_mm(modality: Modality, d_mm: f64) -> f64 {
    let (w0, slope) = match modality {
        Modality::Us => (0.75, 0.08),
        Modality::Oa => (0.392, 0.04),
    };
    w0 + slope * (d_mm - 10.0).abs()
}

/// Gaussian sigma equivalent of [`beam_fwhm_mm`].
pub fn beam_sigma_mm(modality: Modality, d_mm: f64) -> f64 {
    beam_fwhm_mm(modality, d_mm) / (8.0 * 2f64.ln()).sqrt()
}

// ---------------------------------------------------------------------------
// Turntable object scans
// ---------------------------------------------------------------------------

/// Whether a scan emits raw records or already-rectified ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanMode {
    /// Full waveform per station; the pipeline does ToF and rectification.
    Waveform,
    /// Per-modality ranges with absence flags, skipping the signal chain.
    DirectRange,
}

/// What the instrument records at one scan station.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedStation {
    pub station_id: usize,
    /// Stage position readout, mm.
    pub s: Point3,
    /// Turntable encoder readout, radians.
    pub theta: f64,
    /// Pulse-echo range, mm ([`ScanMode::DirectRange`] only).
    pub d_us: Option<f64>,
    /// One-way range, mm ([`ScanMode::DirectRange`] only).
    pub d_oa: Option<f64>,
    /// Raw record ([`ScanMode::Waveform`] only).
    pub waveform: Option<Waveform>,
}

/// Ground truth for the same station, for sidecar files and assertions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationTruth {
    pub station_id: usize,
    /// Commanded (physical) stage position, mm.
    pub s: Point3,
    /// Physical turntable angle, radians.
    pub theta: f64,
    /// Geometric beam-line range, mm, if the beam hits a target.
    pub d: Option<f64>,
    /// Hit point in the world frame.
    pub hit_world: Option<Point3>,
    /// Hit point de-rotated into the object frame.
    pub hit_object: Option<Point3>,
}

/// Drive the bench along `path` = [(stage position, turntable angle)] and
/// record every station. Physical geometry uses the commanded pose; readouts
/// add the scene noise on top.
pub fn synth_object_scan(
    scene: &Scene,
    path: &[(Point3, f64)],
    mode: ScanMode,
) -> (Vec<SimulatedStation>, Vec<StationTruth>) {
    let mut stations = Vec::with_capacity(path.len());
    let mut truths = Vec::with_capacity(path.len());
    for (station_id, &(s_cmd, theta_cmd)) in path.iter().enumerate() {
        let hit = scene.raycast(&s_cmd, theta_cmd);
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix64(scene.seed ^ 0x5ca0_0000) ^ station_id as u64);
        let noise = &scene.noise;

        let s_rec = s_cmd
            + Vec3::new(
                noise.sigma_s_mm * gauss(&mut rng),
                noise.sigma_s_mm * gauss(&mut rng),
                noise.sigma_s_mm * gauss(&mut rng),
            );
        let theta_rec = theta_cmd + noise.sigma_theta_rad * gauss(&mut rng);

        let (d_true, hit_world, hit_object) = match hit {
            Some((t, _)) => {
                let w = s_cmd + t * scene.v_true.into_inner();
                let back = Rotation::new(scene.n_true, -theta_cmd);
                (Some(t), Some(w), Some(rotate_about(&back, &scene.x_r_true, &w)))
            }
            None => (None, None, None),
        };

        let (mut d_us, mut d_oa, mut waveform) = (None, None, None);
        match mode {
            ScanMode::DirectRange => {
                if let Some((t, obj)) = hit {
                    if obj.material.us_reflectivity > 0.0 {
                        d_us = Some(t + noise.sigma_d_mm * gauss(&mut rng));
                    }
                    if obj.material.oa_strength > 0.0 {
                        d_oa = Some(t + noise.sigma_d_mm * gauss(&mut rng));
                    }
                }
            }
            ScanMode::Waveform => {
                waveform = Some(synth_waveform_at(scene, &s_cmd, theta_cmd));
            }
        }

        stations.push(SimulatedStation {
            station_id,
            s: s_rec,
            theta: theta_rec,
            d_us,
            d_oa,
            waveform,
        });
        truths.push(StationTruth {
            station_id,
            s: s_cmd,
            theta: theta_cmd,
            d: d_true,
            hit_world,
            hit_object,
        });
    }
    (stations, truths)
}

/// Station path that sweeps each of the four side faces of a block sitting on
/// the turntable, one face per quarter turn. The stations strafe along the
/// world x axis at fixed height; because the strafe line and the beam span a
/// plane, the true hits of one face are exactly collinear, which is what the
/// contour metric measures against.
///
/// Assumes a roughly axis-centered block with square cross-section `half_xy`,
/// as built by [`aluminum_block_scene`].
pub fn four_face_scan_path(
    scene: &Scene,
    center: Point3,
    half_xy: f64,
    stations_per_face: usize,
    d_nom: f64,
) -> Vec<(Point3, f64)> {
    assert!(stations_per_face >= 2, "need at least two stations per face");
    let v = scene.v_true.into_inner();
    // Aim points run along the front face at the block's mid-height; the
    // stage backs off by d_nom along the beam.
    let margin = 1.5;
    let span = half_xy - margin;
    let plane_y = center.y - half_xy;
    let mut path = Vec::new();
    for face in 0..4 {
        let theta = face as f64 * FRAC_PI_2;
        for i in 0..stations_per_face {
            let frac = i as f64 / (stations_per_face - 1) as f64;
            let aim = Point3::new(center.x - span + 2.0 * span * frac, plane_y, center.z);
            path.push((aim - d_nom * v, theta));
        }
    }
    path
}

/// Bench scene holding one aluminum block centered near the turntable axis,
/// sized so a mid-range scan hits every side face inside the working range.
pub fn aluminum_block_scene(noise: NoiseSpec, seed: u64) -> (Scene, Point3, f64) {
    let axis_point = bench_axis_point();
    let center = Point3::new(axis_point.x + 0.4, axis_point.y - 0.6, 20.0);
    let half_xy = 8.0;
    let block = SceneObject {
        shape: Shape::Block { center, half_extents: Vec3::new(half_xy, half_xy, 14.0) },
        material: MaterialSpec::aluminum(),
    };
    (Scene::bench(vec![block], noise, seed), center, half_xy)
}

// ---------------------------------------------------------------------------
// Calibration sessions
// ---------------------------------------------------------------------------

/// Acquisition plan for one calibration session: tip rasters at several
/// depths plus filament sweeps at several turntable angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPlan {
    /// Stylus tip position, world frame, mm.
    pub tip: Point3,
    /// Beam range per tip raster, mm.
    pub tip_depths: Vec<f64>,
    /// Raw points per tip raster; factored into a near-square grid.
    pub tip_counts: Vec<usize>,
    /// A point on the filament at table angle zero, mm.
    pub filament_base: Point3,
    pub filament_dir: UnitDir,
    /// Turntable angle per edge frame, radians.
    pub edge_angles: Vec<f64>,
    /// Along-filament offsets of the sweep rows, mm from the base.
    pub edge_offsets: Vec<f64>,
    /// Raw points per sweep row.
    pub edge_row_counts: Vec<usize>,
    /// Beam range per sweep row, mm.
    pub edge_depths: Vec<f64>,
    /// Lateral sigma of the amplitude falloff used for the rasters, mm.
    pub beam_sigma_mm: f64,
}

impl CalibrationPlan {
    /// The reference session shape: four tip rasters (70 raws), two edge
    /// frames half a turn apart with seven sweep rows each (88 raws).
    pub fn bench_default() -> Self {
        CalibrationPlan {
            tip: Point3::new(240.0, 290.0, 15.0),
            tip_depths: vec![8.0, 10.0, 12.0, 14.0],
            tip_counts: vec![25, 15, 15, 15],
            filament_base: bench_axis_point() + Vec3::new(4.0, -3.0, 0.0),
            filament_dir: unit_dir(0.01, -0.004, 1.0),
            edge_angles: vec![0.0, PI],
            edge_offsets: vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0],
            edge_row_counts: vec![7, 6, 6, 6, 6, 6, 7],
            edge_depths: vec![9.0, 9.3, 9.6, 9.9, 10.2, 10.5, 10.8],
            beam_sigma_mm: beam_sigma_mm(Modality::Oa, 10.0),
        }
    }
}

/// Ground truth behind a synthetic calibration session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTruth {
    pub v: UnitDir,
    pub n: UnitDir,
    pub x_r: Point3,
    pub tip: Point3,
    /// Filament line at table angle zero.
    pub edge_frame0: Edge,
    /// Physical angle of each edge frame, in plan order.
    pub frame_angles: Vec<f64>,
}

/// Symmetric offsets `{-(n-1)/2, ..., (n-1)/2}` (half-integer for even `n`),
/// so amplitude-weighted centroids of a symmetric falloff land exactly on the
/// aim point.
fn centered_offsets(count: usize) -> Vec<f64> {
    (0..count).map(|i| i as f64 - (count - 1) as f64 / 2.0).collect()
}

/// Near-square `(cols, rows)` factorization for tip raster grids.
fn grid_factors(count: usize) -> (usize, usize) {
    let mut best = (count, 1);
    let mut a = 1;
    while a * a <= count {
        if count % a == 0 {
            best = (count / a, a);
        }
        a += 1;
    }
    best
}

// Raster extents relative to the beam sigma. Tips raster in 2D, so they stay
// a bit tighter to keep corner amplitudes above the extraction threshold.
const TIP_EXTENT_SIGMA: f64 = 0.7;
const EDGE_EXTENT_SIGMA: f64 = 1.0;

/// Generate the raw frames and encoder readings of one calibration session,
/// plus the truth sidecar. Raster amplitudes follow the Gaussian beam
/// profile; stage, range, and encoder noise come from the scene.
pub fn synth_calibration_session(
    scene: &Scene,
    plan: &CalibrationPlan,
) -> Result<(CalibrationSession, SessionTruth), SimError> {
    if plan.tip_depths.len() != plan.tip_counts.len() || plan.tip_depths.is_empty() {
        return Err(SimError::PlanInfeasible("tip depths and counts must match".into()));
    }
    if plan.edge_offsets.len() != plan.edge_row_counts.len()
        || plan.edge_offsets.len() != plan.edge_depths.len()
        || plan.edge_offsets.is_empty()
        || plan.edge_angles.is_empty()
    {
        return Err(SimError::PlanInfeasible("edge rows, depths, and angles must match".into()));
    }
    if plan.tip_depths.iter().chain(&plan.edge_depths).any(|d| *d <= 0.0) {
        return Err(SimError::PlanInfeasible("beam ranges must be positive".into()));
    }
    if !(plan.beam_sigma_mm > 0.0) {
        return Err(SimError::PlanInfeasible("beam sigma must be positive".into()));
    }
    if plan.tip_counts.iter().chain(&plan.edge_row_counts).any(|c| *c == 0) {
        return Err(SimError::PlanInfeasible("raster counts must be positive".into()));
    }

    let v = scene.v_true;
    let noise = &scene.noise;
    let sigma_b = plan.beam_sigma_mm;
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(scene.seed ^ 0xca11_b4a7));
    let mut frames = Vec::new();

    // Orthonormal pair spanning the plane normal to the beam, for tip grids.
    let seed_axis = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = UnitDir::new_normalize(v.cross(&seed_axis));
    let e2 = UnitDir::new_normalize(v.cross(&e1));

    let noisy_point = |p: Point3, rng: &mut ChaCha8Rng| {
        p + Vec3::new(
            noise.sigma_s_mm * gauss(rng),
            noise.sigma_s_mm * gauss(rng),
            noise.sigma_s_mm * gauss(rng),
        )
    };

    // --- tip rasters -----------------------------------------------------
    for (i, (&depth, &count)) in plan.tip_depths.iter().zip(&plan.tip_counts).enumerate() {
        let (cols, grid_rows) = grid_factors(count);
        let mult_x = centered_offsets(cols);
        let mult_y = centered_offsets(grid_rows);
        let step = |mults: &[f64]| {
            let m = mults.last().copied().unwrap_or(0.0);
            if m > 0.0 { TIP_EXTENT_SIGMA * sigma_b / m } else { 0.0 }
        };
        let (sx, sy) = (step(&mult_x), step(&mult_y));
        let s0 = plan.tip - depth * v.into_inner();
        let mut rows = Vec::with_capacity(grid_rows);
        for &gy in &mult_y {
            let mut row = Vec::with_capacity(cols);
            for &gx in &mult_x {
                let offset = sx * gx * e1.into_inner() + sy * gy * e2.into_inner();
                let r2 = offset.norm_squared();
                let amp = (-r2 / (2.0 * sigma_b * sigma_b)).exp();
                let s = noisy_point(s0 + offset, &mut rng);
                let d = depth + noise.sigma_d_mm * gauss(&mut rng);
                row.push(RawPoint::new(s, d, amp));
            }
            rows.push(row);
        }
        frames.push(RawFrame {
            frame_id: 100 + i,
            kind: FrameKind::Tip,
            turntable_angle: 0.0,
            rows,
        });
    }

    // --- edge frames -----------------------------------------------------
    for (k, &theta) in plan.edge_angles.iter().enumerate() {
        let rot = Rotation::new(scene.n_true, theta);
        let base_k = rotate_about(&rot, &scene.x_r_true, &plan.filament_base);
        let dir_k = UnitDir::new_normalize(rot.matrix() * plan.filament_dir.into_inner());
        let normal = v.cross(&dir_k);
        if normal.norm() < 1e-6 {
            return Err(SimError::PlanInfeasible(format!(
                "filament runs along the beam at frame angle {theta:.3} rad"
            )));
        }
        let w = UnitDir::new_normalize(normal);
        let mut rows = Vec::with_capacity(plan.edge_offsets.len());
        for ((&along, &count), &depth) in
            plan.edge_offsets.iter().zip(&plan.edge_row_counts).zip(&plan.edge_depths)
        {
            let target = base_k + along * dir_k.into_inner();
            let s0 = target - depth * v.into_inner();
            let mults = centered_offsets(count);
            let max_mult = mults.last().copied().unwrap_or(0.0);
            let step = if max_mult > 0.0 { EDGE_EXTENT_SIGMA * sigma_b / max_mult } else { 0.0 };
            let mut row = Vec::with_capacity(count);
            for &mult in &mults {
                let delta = step * mult;
                // Shifting the stage along the common normal leaves the
                // closest-approach range unchanged; only the amplitude drops.
                let amp = (-delta * delta / (2.0 * sigma_b * sigma_b)).exp();
                let s = noisy_point(s0 + delta * w.into_inner(), &mut rng);
                let d = depth + noise.sigma_d_mm * gauss(&mut rng);
                row.push(RawPoint::new(s, d, amp));
            }
            rows.push(row);
        }
        frames.push(RawFrame { frame_id: k, kind: FrameKind::Edge, turntable_angle: theta, rows });
    }

    // --- encoder readings -------------------------------------------------
    let sigma_theta = noise.sigma_theta_rad.max(MIN_ENCODER_SIGMA_RAD);
    let rotations = plan
        .edge_angles
        .windows(2)
        .enumerate()
        .map(|(i, pair)| RotationReading {
            frame_i: i,
            frame_k: i + 1,
            theta: pair[1] - pair[0] + noise.sigma_theta_rad * gauss(&mut rng),
            sigma_theta,
        })
        .collect();

    let truth = SessionTruth {
        v: scene.v_true,
        n: scene.n_true,
        x_r: scene.x_r_true,
        tip: plan.tip,
        edge_frame0: Edge::through(&plan.filament_base, plan.filament_dir),
        frame_angles: plan.edge_angles.clone(),
    };
    Ok((CalibrationSession { frames, rotations }, truth))
}

// ---------------------------------------------------------------------------
// Classification datasets
// ---------------------------------------------------------------------------

/// Five everyday-object material classes with distinct band mixtures and
/// modality behavior.
pub fn household_classes() -> Vec<(String, MaterialSpec)> {
    [
        ("steel_bottle", MaterialSpec::new(0.85, 0.90, [0.20, 0.45, 0.35])),
        ("glass_bottle", MaterialSpec::glass()),
        ("plastic_cup", MaterialSpec::new(0.60, 0.35, [0.50, 0.35, 0.15])),
        ("black_foam", MaterialSpec::black_foam()),
        ("cardboard_box", MaterialSpec::new(0.45, 0.25, [0.35, 0.25, 0.40])),
    ]
    .into_iter()
    .map(|(name, m)| (name.to_string(), m))
    .collect()
}

/// Eight challenged-target classes: each answers in exactly one modality,
/// four echo-only and four optoacoustic-only, separated by band mixture.
pub fn single_modality_classes() -> Vec<(String, MaterialSpec)> {
    [
        ("pine_board", MaterialSpec::new(0.0, 0.85, [0.70, 0.20, 0.10])),
        ("acrylic_sheet", MaterialSpec::new(0.0, 0.85, [0.25, 0.60, 0.15])),
        ("ceramic_tile", MaterialSpec::new(0.0, 0.85, [0.10, 0.25, 0.65])),
        ("laminate_panel", MaterialSpec::new(0.0, 0.85, [0.33, 0.34, 0.33])),
        ("foam_sheet", MaterialSpec::new(0.85, 0.0, [0.55, 0.35, 0.10])),
        ("rubber_pad", MaterialSpec::new(0.85, 0.0, [0.15, 0.70, 0.15])),
        ("matte_fabric", MaterialSpec::new(0.85, 0.0, [0.10, 0.45, 0.45])),
        ("carbon_felt", MaterialSpec::new(0.85, 0.0, [0.45, 0.10, 0.45])),
    ]
    .into_iter()
    .map(|(name, m)| (name.to_string(), m))
    .collect()
}

/// Labeled magnitude spectra for classifier training: each sample is the
/// spectrum of a fresh record of that material at a jittered range, 30 dB
/// SNR. Spectra rather than raw records go to the classifier because the
/// discriminating feature is the band mixture; the spectrum is packed as an
/// index-domain series (unit sample rate).
pub fn synth_class_dataset(
    classes: &[(String, MaterialSpec)],
    per_class: usize,
    seed: u64,
) -> Vec<(Waveform, String)> {
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for (ci, (label, mat)) in classes.iter().enumerate() {
        for j in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(
                mix64(seed ^ 0xc1a5_5000) ^ ((ci as u64) << 32 | j as u64),
            );
            let d: f64 = rng.random_range(8.0..12.0);
            let scale: f64 = rng.random_range(0.7..1.3);
            let peak = mat.oa_strength.max(mat.us_reflectivity) * mat.tone_sum() * scale;
            let sigma = sigma_for_snr_db(peak.max(1e-6), 30.0);
            let t = oa_arrival_s(d);
            let record = synth_bursts(
                &[
                    (t, scale * mat.oa_strength),
                    (2.0 * t, scale * mat.us_reflectivity),
                    (3.0 * t, DEFAULT_ECHO2_RATIO * scale * mat.oa_strength),
                ],
                &mat.band_weights,
                sigma,
                rng.random(),
            );
            let spec = crate::signal::spectrum(&record.segment(40e-6, 200e-6));
            out.push((Waveform::new(spec.magnitudes, 1.0, 0.0), label.clone()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{calibrate_beam, calibrate_turntable, CalibrationState};
    use crate::rectify::{fit_range_model, rectify, RangeSample};
    use crate::signal::envelope;
    use crate::tof::{estimate_tof_oa, estimate_tof_us, extract_reference, SearchWindow};
    use approx::assert_abs_diff_eq;

    const SAMPLE_S: f64 = 1.0 / SAMPLE_RATE_HZ;

    /// Envelope-peak time inside a window, seconds.
    fn peak_time(w: &Waveform, from_s: f64, to_s: f64) -> f64 {
        let env = envelope(&w.segment(from_s, to_s));
        let (idx, _) = env
            .samples
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty window");
        env.time_of(idx)
    }

    #[test]
    fn reference_triple_lands_on_expected_times() {
        // Range chosen so the one-way arrival sits at 77 µs.
        let d = DEFAULT_SOUND_SPEED * 77e-6 * 1e3 - DEFAULT_PATH_OFFSET_MM;
        let w = synth_station_waveform(d, 0.0, 0);
        let t1 = peak_time(&w, 60e-6, 100e-6);
        let t2 = peak_time(&w, 130e-6, 180e-6);
        let t3 = peak_time(&w, 210e-6, 260e-6);
        assert!((t1 - 77e-6).abs() <= 0.51 * SAMPLE_S, "t1 = {t1:e}");
        assert!((t2 - 154e-6).abs() <= 0.51 * SAMPLE_S, "t2 = {t2:e}");
        assert!((t3 - 231e-6).abs() <= 0.51 * SAMPLE_S, "t3 = {t3:e}");
    }

    #[test]
    fn echo_times_are_integer_multiples_of_the_first_arrival() {
        for d in [6.5, 9.0, 12.25, 16.5] {
            let w = synth_station_waveform(d, 0.0, 0);
            let t = oa_arrival_s(d);
            // ±15 µs windows centered on the expected arrivals keep each
            // burst clear of its neighbors and of the window edges.
            let t1 = peak_time(&w, t - 15e-6, t + 15e-6);
            let t2 = peak_time(&w, 2.0 * t - 15e-6, 2.0 * t + 15e-6);
            let t3 = peak_time(&w, 3.0 * t - 15e-6, 3.0 * t + 15e-6);
            assert!((t2 - 2.0 * t1).abs() <= SAMPLE_S * 1.000001, "d = {d}");
            assert!((t3 - 3.0 * t1).abs() <= SAMPLE_S * 1.000001, "d = {d}");
        }
    }

    fn plate_scene(material: MaterialSpec) -> (Scene, Point3) {
        let center = Point3::new(0.0, 30.0, 0.0);
        let block = SceneObject {
            shape: Shape::Block { center, half_extents: Vec3::new(10.0, 5.0, 10.0) },
            material,
        };
        let mut scene = Scene::bench(vec![block], NoiseSpec::quiet(), 1);
        scene.v_true = unit_dir(0.0, 1.0, 0.0);
        (scene, Point3::new(0.0, 15.0, 0.0))
    }

    #[test]
    fn silent_modalities_leave_their_windows_empty() {
        let max_in = |w: &Waveform, a: f64, b: f64| {
            w.segment(a, b).samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
        };
        let (glass, s) = plate_scene(MaterialSpec::glass());
        let w = synth_waveform(&glass, &s);
        assert_eq!(max_in(&w, 40e-6, 120e-6), 0.0, "glass must be optically silent");
        assert!(max_in(&w, 120e-6, 200e-6) > 0.3, "glass still echoes");

        let (foam, s) = plate_scene(MaterialSpec::black_foam());
        let w = synth_waveform(&foam, &s);
        assert!(max_in(&w, 40e-6, 120e-6) > 0.3, "foam answers one-way");
        assert_eq!(max_in(&w, 120e-6, 200e-6), 0.0, "foam returns no echo");
    }

    #[test]
    fn missed_beam_gives_noise_only_record() {
        let (mut scene, s) = plate_scene(MaterialSpec::aluminum());
        scene.noise.sigma_sample = 0.05;
        let off_target = Point3::new(s.x + 100.0, s.y, s.z);
        let w = synth_waveform(&scene, &off_target);
        let rms = w.rms();
        assert!((rms / 0.05 - 1.0).abs() < 0.05, "rms = {rms}");
        // And with the noise off, a miss is exactly silent.
        scene.noise.sigma_sample = 0.0;
        let w = synth_waveform(&scene, &off_target);
        assert!(w.samples.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn waveforms_are_bit_identical_per_seed() {
        let (mut scene, s) = plate_scene(MaterialSpec::aluminum());
        scene.noise.sigma_sample = 0.02;
        let a = synth_waveform(&scene, &s);
        let b = synth_waveform(&scene, &s);
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
        scene.seed = 2;
        let c = synth_waveform(&scene, &s);
        assert!(a.samples.iter().zip(&c.samples).any(|(x, y)| x.to_bits() != y.to_bits()));
    }

    #[test]
    fn block_raycast_reports_front_face() {
        let shape = Shape::Block {
            center: Point3::new(0.0, 10.0, 0.0),
            half_extents: Vec3::new(1.0, 2.0, 3.0),
        };
        let up = unit_dir(0.0, 1.0, 0.0);
        let t = shape.raycast(&Point3::new(0.0, 0.0, 0.0), &up);
        assert_abs_diff_eq!(t.unwrap(), 8.0, epsilon = 1e-12);
        assert!(shape.raycast(&Point3::new(5.0, 0.0, 0.0), &up).is_none(), "clean miss");
        assert!(shape.raycast(&Point3::new(0.0, 10.0, 0.0), &up).is_none(), "inside");
    }

    #[test]
    fn cylinder_raycast_hits_side_and_cap() {
        let shape = Shape::Cylinder {
            base: Point3::new(0.0, 5.0, -1.0),
            axis: unit_dir(0.0, 0.0, 1.0),
            radius: 0.5,
            height: 2.0,
        };
        let t = shape.raycast(&Point3::new(-3.0, 5.0, 0.0), &unit_dir(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(t.unwrap(), 2.5, epsilon = 1e-12);
        let t = shape.raycast(&Point3::new(0.0, 5.0, 5.0), &unit_dir(0.0, 0.0, -1.0));
        assert_abs_diff_eq!(t.unwrap(), 4.0, epsilon = 1e-12);
        assert!(shape
            .raycast(&Point3::new(-3.0, 5.0, 1.5), &unit_dir(1.0, 0.0, 0.0))
            .is_none());
    }

    #[test]
    fn filament_raycast_uses_centerline_distance() {
        let shape = Shape::Filament {
            a: Point3::new(0.0, 10.0, -5.0),
            b: Point3::new(0.0, 10.0, 5.0),
            radius: 0.25,
        };
        let x = unit_dir(1.0, 0.0, 0.0);
        let t = shape.raycast(&Point3::new(-4.0, 10.0, 0.0), &x);
        assert_abs_diff_eq!(t.unwrap(), 4.0, epsilon = 1e-12);
        // Grazing inside the capture radius still reports the closest-approach
        // range along the beam.
        let t = shape.raycast(&Point3::new(-4.0, 10.2, 0.0), &x);
        assert_abs_diff_eq!(t.unwrap(), 4.0, epsilon = 1e-12);
        assert!(shape.raycast(&Point3::new(-4.0, 10.3, 0.0), &x).is_none());
        assert!(
            shape.raycast(&Point3::new(-4.0, 10.0, 6.0), &x).is_none(),
            "beyond the endpoint"
        );
    }

    #[test]
    fn turntable_rotation_moves_the_hit_face() {
        // Square block away from the axis; after a quarter turn the stations
        // aimed at the rotated pose must see the same approach distance.
        let center = Point3::new(1.0, 10.0, 0.0);
        let block = SceneObject {
            shape: Shape::Block { center, half_extents: Vec3::new(2.0, 2.0, 2.0) },
            material: MaterialSpec::aluminum(),
        };
        let mut scene = Scene::bench(vec![block], NoiseSpec::quiet(), 3);
        scene.v_true = unit_dir(0.0, 1.0, 0.0);
        scene.n_true = unit_dir(0.0, 0.0, 1.0);
        scene.x_r_true = Point3::new(0.0, 0.0, 0.0);

        // At zero the front face sits at y = 8.
        let (stations, truth) =
            synth_object_scan(&scene, &[(Point3::new(0.5, 0.0, 0.0), 0.0)], ScanMode::DirectRange);
        assert_abs_diff_eq!(stations[0].d_us.unwrap(), 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(truth[0].hit_world.unwrap(), Point3::new(0.5, 8.0, 0.0), epsilon = 1e-12);

        // Quarter turn: the center moves to (-10, 1), the front face to y = -1.
        let (stations, truth) =
            synth_object_scan(&scene, &[(Point3::new(-10.0, -15.0, 0.0), FRAC_PI_2)], ScanMode::DirectRange);
        assert_abs_diff_eq!(stations[0].d_us.unwrap(), 14.0, epsilon = 1e-12);
        let hit_w = truth[0].hit_world.unwrap();
        assert_abs_diff_eq!(hit_w, Point3::new(-10.0, -1.0, 0.0), epsilon = 1e-12);
        // De-rotating the world hit lands on the object-frame front face x = ±2...
        let hit_o = truth[0].hit_object.unwrap();
        assert_abs_diff_eq!(hit_o.y, hit_w.x * -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(hit_o.x, hit_w.y, epsilon = 1e-9);
        assert_abs_diff_eq!(hit_o.x.abs().min(hit_o.y.abs()), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn four_face_path_hits_every_station_inside_working_range() {
        let (scene, center, half_xy) = aluminum_block_scene(NoiseSpec::quiet(), 11);
        let path = four_face_scan_path(&scene, center, half_xy, 8, 11.0);
        assert_eq!(path.len(), 32);
        let (_, truths) = synth_object_scan(&scene, &path, ScanMode::DirectRange);
        for t in &truths {
            let d = t.d.expect("every station must hit the block");
            assert!((6.5..=16.5).contains(&d), "station {} at d = {d}", t.station_id);
        }
        // One face's true hits are collinear: the strafe line and the beam
        // span a plane whose intersection with the face plane is a line.
        for face in 0..4 {
            let hits: Vec<Point3> =
                truths[face * 8..(face + 1) * 8].iter().map(|t| t.hit_object.unwrap()).collect();
            let edge = Edge::through(
                &hits[0],
                UnitDir::new_normalize(hits[7] - hits[0]),
            );
            for h in &hits {
                assert!(edge.distance_to(h) < 1e-9, "face {face} hit off-line");
            }
        }
    }

    #[test]
    fn noise_free_pipeline_reproduces_scan_ranges() {
        // Full chain: synthetic records -> reference patterns -> ToF ->
        // fitted range models -> range at each scan station, compared against
        // the geometric truth. The budget is half a sample of acoustic path.
        let ref_wave = synth_station_waveform(10.0, 0.0, 0);
        let pat_oa =
            extract_reference(&ref_wave, Modality::Oa, 40e-6, 120e-6, 128, "bench").unwrap();
        let pat_us =
            extract_reference(&ref_wave, Modality::Us, 120e-6, 200e-6, 128, "bench").unwrap();
        let tof_oa = |w: &Waveform| {
            let win = SearchWindow::from_times(w, 40e-6, 120e-6);
            estimate_tof_oa(w, &pat_oa, &win).unwrap().tof_s
        };
        let tof_us = |w: &Waveform| {
            let win = SearchWindow::from_times(w, 120e-6, 200e-6);
            estimate_tof_us(w, &pat_us, &win).unwrap().tof_s
        };

        let mut samples_oa = Vec::new();
        let mut samples_us = Vec::new();
        let mut d = 7.0;
        while d <= 15.0 {
            let w = synth_station_waveform(d, 0.0, 0);
            samples_oa.push(RangeSample::new(tof_oa(&w), d, 0.05));
            samples_us.push(RangeSample::new(tof_us(&w), d, 0.05));
            d += 0.5;
        }
        let model_oa = fit_range_model(&samples_oa, Modality::Oa).unwrap();
        let model_us = fit_range_model(&samples_us, Modality::Us).unwrap();

        let (scene, center, half_xy) = aluminum_block_scene(NoiseSpec::quiet(), 5);
        let path = four_face_scan_path(&scene, center, half_xy, 3, 11.0);
        let (stations, truths) = synth_object_scan(&scene, &path, ScanMode::Waveform);
        let budget = 0.5 * SAMPLE_S * DEFAULT_SOUND_SPEED * 1e3;
        for (st, tr) in stations.iter().zip(&truths) {
            let w = st.waveform.as_ref().unwrap();
            let d_true = tr.d.unwrap();
            let d_oa = rectify(&model_oa, tof_oa(w)).distance_mm;
            let d_us = rectify(&model_us, tof_us(w)).distance_mm;
            assert!((d_oa - d_true).abs() < budget, "oa {} vs {}", d_oa, d_true);
            assert!((d_us - d_true).abs() < budget, "us {} vs {}", d_us, d_true);
        }
    }

    #[test]
    fn bench_plan_produces_reference_session_shape() {
        let scene = Scene::bench(Vec::new(), NoiseSpec::bench(), 21);
        let (session, truth) =
            synth_calibration_session(&scene, &CalibrationPlan::bench_default()).unwrap();
        let raw_count = |f: &RawFrame| f.rows.iter().map(Vec::len).sum::<usize>();
        let tips: Vec<_> = session.frames.iter().filter(|f| f.kind == FrameKind::Tip).collect();
        let edges: Vec<_> = session.frames.iter().filter(|f| f.kind == FrameKind::Edge).collect();
        assert_eq!(tips.len(), 4);
        assert_eq!(edges.len(), 2);
        assert_eq!(tips.iter().map(|f| raw_count(f)).sum::<usize>(), 70);
        assert_eq!(edges.iter().map(|f| raw_count(f)).sum::<usize>(), 88);
        assert_eq!(session.rotations.len(), 1);
        assert_abs_diff_eq!(session.rotations[0].theta, PI, epsilon = 0.01);

        let scans = session.extract(0.5, 1e-4).unwrap();
        let centers: usize = scans.iter().map(|s| s.centers.len()).sum();
        assert_eq!(centers, 4 + 14, "4 tip centers and 7 sweep rows per edge frame");
        assert_abs_diff_eq!(truth.frame_angles[1], PI);

        // Same plan, same seed: bit-identical sessions.
        let (again, _) =
            synth_calibration_session(&scene, &CalibrationPlan::bench_default()).unwrap();
        assert_eq!(session, again);
    }

    fn dir_angle(a: &UnitDir, b: &UnitDir) -> f64 {
        a.dot(b).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn quiet_session_calibrates_back_to_scene_truth() {
        let scene = Scene::bench(Vec::new(), NoiseSpec::quiet(), 8);
        let (session, truth) =
            synth_calibration_session(&scene, &CalibrationPlan::bench_default()).unwrap();
        let scans = session.extract(0.5, 1e-4).unwrap();
        let v = calibrate_beam(&scans).unwrap();
        let (n, x_r) = calibrate_turntable(&scans, &session.rotations, &v).unwrap();

        assert!(dir_angle(&v, &truth.v) < 1e-8, "beam angle error {}", dir_angle(&v, &truth.v));
        assert!(dir_angle(&n, &truth.n) < 1e-8, "axis angle error {}", dir_angle(&n, &truth.n));
        // The axis point is only observable transverse to the axis.
        let expect = truth.x_r - truth.n.into_inner() * truth.n.dot(&truth.x_r.coords);
        assert!((x_r - expect).norm() < 1e-6, "axis point error {}", (x_r - expect).norm());

        // The refined state must hold that exact optimum.
        let state = CalibrationState::from_closed_form(v, n, x_r);
        let (tips, edges): (Vec<_>, Vec<_>) =
            scans.iter().cloned().partition(|f| f.kind == FrameKind::Tip);
        let refined =
            crate::calib::refine_mle(&state, &tips, &edges, &session.rotations).unwrap();
        assert!(refined.converged);
        assert!(dir_angle(&refined.v, &truth.v) < 1e-7);
        assert!(dir_angle(&refined.n, &truth.n) < 1e-7);
        assert!((refined.x_r - expect).norm() < 1e-5);
    }

    #[test]
    fn beam_aligned_filament_is_rejected() {
        let scene = Scene::bench(Vec::new(), NoiseSpec::quiet(), 8);
        let mut plan = CalibrationPlan::bench_default();
        plan.filament_dir = scene.v_true;
        let err = synth_calibration_session(&scene, &plan).unwrap_err();
        assert!(matches!(err, SimError::PlanInfeasible(_)), "got {err:?}");
    }

    #[test]
    fn overlapping_objects_are_rejected() {
        let a = SceneObject {
            shape: Shape::Block {
                center: Point3::new(0.0, 10.0, 0.0),
                half_extents: Vec3::new(2.0, 2.0, 2.0),
            },
            material: MaterialSpec::aluminum(),
        };
        let mut b = a;
        b.shape = Shape::Block {
            center: Point3::new(1.0, 10.0, 0.0),
            half_extents: Vec3::new(2.0, 2.0, 2.0),
        };
        let scene = Scene {
            objects: vec![a, b],
            ..Scene::bench(Vec::new(), NoiseSpec::quiet(), 0)
        };
        assert!(matches!(scene.validate(), Err(SimError::InvalidScene(_))));
    }

    #[test]
    fn ranging_bias_is_a_mid_range_half_sine() {
        assert_abs_diff_eq!(range_bias_mm(Modality::Us, 12.0), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(range_bias_mm(Modality::Oa, 12.0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(range_bias_mm(Modality::Us, 6.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(range_bias_mm(Modality::Us, 18.0), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn snr_and_beam_helpers_match_hand_values() {
        assert_abs_diff_eq!(sigma_for_snr_db(1.0, 20.0), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(beam_fwhm_mm(Modality::Oa, 10.0), 0.392, epsilon = 1e-12);
        assert_abs_diff_eq!(beam_fwhm_mm(Modality::Us, 10.0), 0.75, epsilon = 1e-12);
        assert!(beam_fwhm_mm(Modality::Oa, 16.0) > beam_fwhm_mm(Modality::Oa, 12.0));
        assert!(beam_sigma_mm(Modality::Oa, 10.0) < beam_fwhm_mm(Modality::Oa, 10.0));
    }

    #[test]
    fn class_dataset_is_labeled_and_deterministic() {
        let classes = household_classes();
        let data = synth_class_dataset(&classes, 3, 42);
        assert_eq!(data.len(), 15);
        let len = data[0].0.len();
        assert!(data.iter().all(|(s, _)| s.len() == len));
        for (label, _) in &classes {
            assert_eq!(data.iter().filter(|(_, l)| l == label).count(), 3);
        }
        let again = synth_class_dataset(&classes, 3, 42);
        assert_eq!(data, again);
        let other = synth_class_dataset(&classes, 3, 43);
        assert_ne!(data, other);
    }

    #[test]
    fn household_spectra_are_separable() {
        let data = synth_class_dataset(&household_classes(), 8, 7);
        let params = crate::boss::SfaParams::for_series_len(data[0].0.len());
        let cm = crate::boss::evaluate(&data, &params, 2, 0.75, 99).unwrap();
        assert!(cm.accuracy() >= 0.9, "accuracy {}", cm.accuracy());
    }
}
