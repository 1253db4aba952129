//! Core library for a dual-modal acoustic pre-touch sensing toolkit.
//!
//! The sensor emits a laser pulse and listens for two kinds of acoustic
//! returns: a pulse-echo ultrasound round trip (US) and a one-way
//! optoacoustic wave (OA).  Everything in this crate supports turning those
//! raw voltage traces into calibrated 3D measurements:
//!
//! * [`signal`] — waveform container, averaging, band-pass and envelope
//!   preprocessing, spectra;
//! * [`tof`] — windowed cross-correlation time-of-flight estimation against
//!   stored reference patterns;
//! * [`rectify`] — per-modality quadratic ToF → distance rectification;
//! * [`geometry`] — unit directions, Plücker-line edges, Rodrigues
//!   rotations and SVD line fitting;
//! * [`calib`] — beam / turntable extrinsic calibration with closed-form
//!   initialization and Levenberg-Marquardt maximum-likelihood refinement;
//! * [`boss`] — a bag-of-SFA-symbols time-series classifier for material
//!   discrimination;
//! * [`sim`] — a synthetic sensor bench that generates waveforms,
//!   calibration sessions and turntable scans from a declared ground truth;
//! * [`reconstruct`] — calibrated scan sessions → object-frame point clouds
//!   and contour-error reports;
//! * [`io`] — file formats for all of the above;
//! * [`config`] — run-time defaults shared with the command-line tool.
//!
//! All geometry lives in a single fixed world frame; lengths are in
//! millimetres, times in seconds and angles in radians unless a name says
//! otherwise.

pub mod boss;
pub mod calib;
pub mod config;
pub mod geometry;
pub mod io;
pub mod reconstruct;
pub mod rectify;
pub mod signal;
pub mod sim;
pub mod tof;

use serde::{Deserialize, Serialize};

/// Which acoustic return a value refers to.
///
/// `Us` is the pulse-echo ultrasound round trip, `Oa` the one-way
/// optoacoustic wave.  Several estimators behave differently per modality
/// (most importantly ToF halving for `Us`), so the tag travels with
/// patterns, range models and reconstructed points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Pulse-echo ultrasound (round trip).
    Us,
    /// Optoacoustic (one way).
    Oa,
}

impl Modality {
    /// Short lower-case tag used in file formats and reports.
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Us => "us",
            Modality::Oa => "oa",
        }
    }

    /// Parse the tag written by [`Modality::tag`] (case-insensitive).
    pub fn from_tag(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "us" => Some(Modality::Us),
            "oa" => Some(Modality::Oa),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

pub use calib::{CalibrationSession, CalibrationState, CenterPoint, FrameScan, RawPoint, RotationReading};
pub use geometry::{Edge, Point3, Rotation, UnitDir, Vec3};
pub use rectify::{RangeModel, RangeSample};
pub use signal::{BandSpec, Spectrum, Waveform};
pub use tof::{ReferencePattern, SearchWindow, TofEstimate};
