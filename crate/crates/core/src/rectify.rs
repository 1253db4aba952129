//! Per-modality ToF → distance rectification.
//!
//! Raw ranging (`d = c·t`) drifts from the truth by a smooth,
//! geometry-dependent deviation, so each modality gets a second-order
//! polynomial `d̂ = β₂t² + β₁t + β₀` fit by weighted least squares against
//! ground-truth distances.  The sound speed never appears explicitly — β₁
//! absorbs it.  Fitting is done on a normalized time axis for
//! conditioning (ToFs are ~1e-4 s, their squares ~1e-8) and the
//! coefficients are converted back to the seconds basis afterwards.

use crate::Modality;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from range-model fitting.
#[derive(Debug, Error, PartialEq)]
pub enum RectifyError {
    /// The quadratic design matrix is rank-deficient (fewer than three
    /// distinct ToFs, or numerically collinear columns).
    #[error("degenerate quadratic design: {distinct} distinct ToFs of {total} samples")]
    DegenerateDesign { distinct: usize, total: usize },
}

/// One calibration observation: a measured ToF against a known distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSample {
    /// Measured time of flight, seconds (already halved for US).
    pub tof_s: f64,
    /// Ground-truth distance, mm.
    pub true_mm: f64,
    /// Measurement variance, mm² (from repeated readings, or a configured
    /// default when only one reading exists).
    pub sigma: f64,
}

impl RangeSample {
    /// New sample; ToF must be positive and the variance nonzero.
    pub fn new(tof_s: f64, true_mm: f64, sigma: f64) -> Self {
        assert!(tof_s > 0.0, "ToF must be positive");
        assert!(sigma > 0.0, "variance must be positive");
        RangeSample { tof_s, true_mm, sigma }
    }
}

/// Fit diagnostics persisted with the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    /// Number of training samples.
    pub n_samples: usize,
    /// Root-mean-square of the unweighted residuals, mm.
    pub residual_rms_mm: f64,
    /// Largest absolute unweighted residual, mm.
    pub residual_max_mm: f64,
}

/// Quadratic ToF → distance map for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeModel {
    /// Which return this model rectifies.
    pub modality: Modality,
    /// Quadratic coefficient, mm/s².
    pub beta2: f64,
    /// Linear coefficient, mm/s (absorbs the sound speed).
    pub beta1: f64,
    /// Constant offset, mm.
    pub beta0: f64,
    /// ToF range covered by training data, seconds.
    pub valid_tof: [f64; 2],
    /// Fit diagnostics.
    pub stats: FitStats,
}

/// A rectified distance plus a soft out-of-range flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rectified {
    /// Rectified distance, mm.
    pub distance_mm: f64,
    /// True when the query ToF fell outside the trained `valid_tof` span
    /// (the value is an extrapolation, not an error).
    pub extrapolated: bool,
}

/// Weighted least-squares fit of the quadratic rectification polynomial.
///
/// Minimizes `Σᵢ (β₂tᵢ² + β₁tᵢ + β₀ − dᵢ)² / σᵢ`.  Scaling every `σᵢ` by
/// a common factor does not change the result.
pub fn fit_range_model(samples: &[RangeSample], modality: Modality) -> Result<RangeModel, RectifyError> {
    let total = samples.len();
    let mut tofs: Vec<f64> = samples.iter().map(|s| s.tof_s).collect();
    tofs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    tofs.dedup();
    let distinct = tofs.len();
    if total < 3 || distinct < 3 {
        return Err(RectifyError::DegenerateDesign { distinct, total });
    }

    // Normalize the time axis: u = t / t_scale keeps the design columns at
    // comparable magnitudes.
    let t_scale = tofs.last().copied().unwrap_or(1.0);
    let mut a = DMatrix::<f64>::zeros(total, 3);
    let mut b = DVector::<f64>::zeros(total);
    for (i, s) in samples.iter().enumerate() {
        let u = s.tof_s / t_scale;
        let w = s.sigma.sqrt().recip();
        a[(i, 0)] = w * u * u;
        a[(i, 1)] = w * u;
        a[(i, 2)] = w;
        b[i] = w * s.true_mm;
    }
    let svd = a.svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if s_min < 1e-10 * s_max {
        return Err(RectifyError::DegenerateDesign { distinct, total });
    }
    let coeffs = svd.solve(&b, 0.0).expect("svd solve");
    let beta2 = coeffs[0] / (t_scale * t_scale);
    let beta1 = coeffs[1] / t_scale;
    let beta0 = coeffs[2];

    let mut sq_sum = 0.0;
    let mut max_abs = 0.0f64;
    for s in samples {
        let r = (beta2 * s.tof_s + beta1) * s.tof_s + beta0 - s.true_mm;
        sq_sum += r * r;
        max_abs = max_abs.max(r.abs());
    }
    Ok(RangeModel {
        modality,
        beta2,
        beta1,
        beta0,
        valid_tof: [tofs[0], *tofs.last().unwrap()],
        stats: FitStats {
            n_samples: total,
            residual_rms_mm: (sq_sum / total as f64).sqrt(),
            residual_max_mm: max_abs,
        },
    })
}

/// Evaluate the rectification polynomial at `tof_s`.
///
/// Querying outside the trained ToF span is allowed but flagged.
pub fn rectify(model: &RangeModel, tof_s: f64) -> Rectified {
    let distance_mm = (model.beta2 * tof_s + model.beta1) * tof_s + model.beta0;
    let extrapolated = tof_s < model.valid_tof[0] || tof_s > model.valid_tof[1];
    Rectified { distance_mm, extrapolated }
}
