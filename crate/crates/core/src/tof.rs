//! Time-of-flight estimation by windowed cross-correlation against stored
//! reference patterns.
//!
//! A reference pattern is a short template of the expected burst, one per
//! modality.  The estimator slides it over a search window, takes the
//! correlation argmax (ties to the smallest index, sample resolution — no
//! sub-sample interpolation) and converts the winning index to a ToF.  The
//! ultrasound return is a round trip, so its ToF is halved; the
//! optoacoustic return travels one way and is used as-is.  A normalized
//! peak correlation below the confidence threshold means the modality is
//! absent from the trace (transparent or porous target) and is reported as
//! [`TofError::LowConfidence`] rather than a bogus time.

use crate::signal::{envelope, Waveform};
use crate::Modality;
use thiserror::Error;

/// Default normalized-correlation threshold under which a modality is
/// declared absent.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.3;

/// Errors from correlation and ToF estimation.
#[derive(Debug, Error, PartialEq)]
pub enum TofError {
    /// The search window does not fit the waveform/pattern lengths.
    #[error("search window [{j_min}, {j_max}] invalid for waveform of {len} samples and pattern of {pattern_len}")]
    WindowOutOfRange { j_min: usize, j_max: usize, len: usize, pattern_len: usize },
    /// Best normalized correlation fell below the confidence threshold;
    /// the modality is considered absent.
    #[error("{modality} peak correlation {norm_corr:.3} below confidence threshold {threshold}")]
    LowConfidence { modality: Modality, norm_corr: f64, threshold: f64 },
    /// Reference extraction could not find a usable burst in the window.
    #[error("no usable burst for a {modality} reference in the requested window")]
    NoReferenceSignal { modality: Modality },
}

/// A stored burst template used as the correlation kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePattern {
    /// Template samples; length ≥ 8, nonzero energy.
    pub samples: Vec<f64>,
    /// Which return this template matches.
    pub modality: Modality,
    /// Free-form provenance string (file, bench scene, …).
    pub source_id: String,
}

impl ReferencePattern {
    /// Build a pattern, enforcing the minimum-length and energy invariants.
    ///
    /// # Panics
    /// Panics if fewer than 8 samples or all-zero.
    pub fn new(samples: Vec<f64>, modality: Modality, source_id: impl Into<String>) -> Self {
        assert!(samples.len() >= 8, "reference pattern needs ≥ 8 samples");
        let energy: f64 = samples.iter().map(|s| s * s).sum();
        assert!(energy > 0.0, "reference pattern must have nonzero energy");
        ReferencePattern { samples, modality, source_id: source_id.into() }
    }

    /// Number of template samples.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false for a validated pattern; present for completeness.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Euclidean norm of the template.
    pub fn norm(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Inclusive index range `[j_min, j_max]` of candidate pattern offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchWindow {
    /// First candidate offset.
    pub j_min: usize,
    /// Last candidate offset (inclusive).
    pub j_max: usize,
}

impl SearchWindow {
    /// New window; `j_min < j_max` is checked here, waveform/pattern
    /// bounds when used.
    pub fn new(j_min: usize, j_max: usize) -> Self {
        assert!(j_min < j_max, "search window must be a nonempty range");
        SearchWindow { j_min, j_max }
    }

    /// Window spanning trigger-relative times `[from_s, to_s]`, clamped to
    /// the waveform.
    pub fn from_times(w: &Waveform, from_s: f64, to_s: f64) -> Self {
        SearchWindow::new(w.nearest_index(from_s), w.nearest_index(to_s))
    }

    fn validate(&self, len: usize, pattern_len: usize) -> Result<(), TofError> {
        if self.j_min >= self.j_max || self.j_max + pattern_len > len {
            return Err(TofError::WindowOutOfRange {
                j_min: self.j_min,
                j_max: self.j_max,
                len,
                pattern_len,
            });
        }
        Ok(())
    }
}

/// A ToF measurement with the evidence behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TofEstimate {
    /// One-way time of flight, seconds (round trip already halved for US).
    pub tof_s: f64,
    /// Raw correlation value at the winning offset.
    pub peak_corr: f64,
    /// Winning offset (absolute sample index into the waveform).
    pub peak_index: usize,
    /// Peak correlation normalized by pattern and best window-segment
    /// energy; compared against the confidence threshold.
    pub norm_corr: f64,
}

/// Raw windowed cross-correlation
/// `c(j) = Σ_k r[k] · w[j + k]`, for `j` in `[j_min, j_max]`.
pub fn cross_correlate(
    w: &Waveform,
    r: &ReferencePattern,
    win: &SearchWindow,
) -> Result<Vec<f64>, TofError> {
    win.validate(w.len(), r.len())?;
    let mut out = Vec::with_capacity(win.j_max - win.j_min + 1);
    for j in win.j_min..=win.j_max {
        let mut acc = 0.0;
        for (k, rk) in r.samples.iter().enumerate() {
            acc += rk * w.samples[j + k];
        }
        out.push(acc);
    }
    Ok(out)
}

/// Ultrasound ToF: correlation argmax converted to time and halved
/// (pulse-echo round trip).
pub fn estimate_tof_us(
    w: &Waveform,
    r: &ReferencePattern,
    win: &SearchWindow,
) -> Result<TofEstimate, TofError> {
    estimate_tof_us_with_threshold(w, r, win, DEFAULT_CONFIDENCE_THRESHOLD)
}

/// [`estimate_tof_us`] with an explicit confidence threshold.
pub fn estimate_tof_us_with_threshold(
    w: &Waveform,
    r: &ReferencePattern,
    win: &SearchWindow,
    threshold: f64,
) -> Result<TofEstimate, TofError> {
    assert_eq!(r.modality, Modality::Us, "US estimator fed a {} pattern", r.modality);
    let mut est = estimate_peak(w, r, win, threshold, Modality::Us)?;
    est.tof_s /= 2.0;
    Ok(est)
}

/// Optoacoustic ToF: correlation argmax converted to time (single trip).
pub fn estimate_tof_oa(
    w: &Waveform,
    r: &ReferencePattern,
    win: &SearchWindow,
) -> Result<TofEstimate, TofError> {
    estimate_tof_oa_with_threshold(w, r, win, DEFAULT_CONFIDENCE_THRESHOLD)
}

/// [`estimate_tof_oa`] with an explicit confidence threshold.
pub fn estimate_tof_oa_with_threshold(
    w: &Waveform,
    r: &ReferencePattern,
    win: &SearchWindow,
    threshold: f64,
) -> Result<TofEstimate, TofError> {
    assert_eq!(r.modality, Modality::Oa, "OA estimator fed a {} pattern", r.modality);
    estimate_peak(w, r, win, threshold, Modality::Oa)
}

fn estimate_peak(
    w: &Waveform,
    r: &ReferencePattern,
    win: &SearchWindow,
    threshold: f64,
    modality: Modality,
) -> Result<TofEstimate, TofError> {
    assert!(
        w.t0 + win.j_min as f64 / w.sample_rate > 0.0,
        "window start must map to a positive time of flight"
    );
    let c = cross_correlate(w, r, win)?;
    // Argmax with ties to the smallest index: strict > while scanning up.
    let mut best = 0;
    for (i, v) in c.iter().enumerate() {
        if *v > c[best] {
            best = i;
        }
    }
    let peak_index = win.j_min + best;
    let peak_corr = c[best];

    // Normalize by ‖r‖ and the largest segment norm in the window, via a
    // prefix-sum sliding energy.
    let mut prefix = Vec::with_capacity(w.len() + 1);
    prefix.push(0.0);
    for s in &w.samples {
        prefix.push(prefix.last().unwrap() + s * s);
    }
    let n = r.len();
    let mut max_energy = 0.0f64;
    for j in win.j_min..=win.j_max {
        max_energy = max_energy.max(prefix[j + n] - prefix[j]);
    }
    let denom = r.norm() * max_energy.sqrt();
    let norm_corr = if denom > 0.0 { peak_corr / denom } else { 0.0 };
    if norm_corr < threshold {
        return Err(TofError::LowConfidence { modality, norm_corr, threshold });
    }
    Ok(TofEstimate {
        tof_s: w.t0 + peak_index as f64 / w.sample_rate,
        peak_corr,
        peak_index,
        norm_corr,
    })
}

/// Cut a reference pattern out of a recorded (already preprocessed)
/// waveform: the template starts at the envelope peak inside
/// `[from_s, to_s]` and runs for `pattern_len` samples.
///
/// This replaces manual pre-selection of templates with a reproducible
/// step; `source_id` should say where the waveform came from.
pub fn extract_reference(
    w: &Waveform,
    modality: Modality,
    from_s: f64,
    to_s: f64,
    pattern_len: usize,
    source_id: impl Into<String>,
) -> Result<ReferencePattern, TofError> {
    let env = envelope(w);
    let lo = w.nearest_index(from_s);
    let hi = w.nearest_index(to_s).max(lo + 1);
    let mut peak = lo;
    for i in lo..=hi.min(w.len() - 1) {
        if env.samples[i] > env.samples[peak] {
            peak = i;
        }
    }
    if peak + pattern_len > w.len() || pattern_len < 8 {
        return Err(TofError::NoReferenceSignal { modality });
    }
    let samples = w.samples[peak..peak + pattern_len].to_vec();
    if samples.iter().map(|s| s * s).sum::<f64>() <= 0.0 {
        return Err(TofError::NoReferenceSignal { modality });
    }
    Ok(ReferencePattern { samples, modality, source_id: source_id.into() })
}
