//! Waveform container and preprocessing: averaging, zero-phase band-pass
//! filtering, analytic-signal envelopes and magnitude spectra.
//!
//! Filtering is done in the frequency domain with a real (zero-phase)
//! Butterworth-shaped magnitude response, so it never shifts arrival times
//! — a hard requirement for everything the ToF estimator consumes.  The
//! response is steepened so that one octave beyond a band edge the
//! attenuation is at least 20 dB per filter order.

use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

/// Errors from waveform preprocessing.
#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    /// An empty list was passed where at least one waveform is needed.
    #[error("empty waveform list")]
    EmptyInput,
    /// Input `index` does not share length, sample rate and trigger offset
    /// with the first input.
    #[error("waveform {index} does not share the sample grid of waveform 0")]
    MismatchedGrid { index: usize },
    /// Band edges do not satisfy `0 < low < high < sample_rate/2`.
    #[error("invalid band [{low_hz}, {high_hz}] Hz for Nyquist {nyquist_hz} Hz")]
    InvalidBand { low_hz: f64, high_hz: f64, nyquist_hz: f64 },
}

/// A uniformly sampled voltage trace.
///
/// `t0` is the time of sample 0 relative to the laser trigger, so sample
/// `i` sits at `t0 + i / sample_rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// Amplitude samples (volts, arbitrary scale).
    pub samples: Vec<f64>,
    /// Sampling rate in Hz.
    pub sample_rate: f64,
    /// Trigger-relative time of sample 0, seconds.
    pub t0: f64,
}

impl Waveform {
    /// Build a waveform, checking the container invariants.
    ///
    /// # Panics
    /// Panics on an empty sample list, a non-positive sample rate or any
    /// non-finite sample.
    pub fn new(samples: Vec<f64>, sample_rate: f64, t0: f64) -> Self {
        assert!(!samples.is_empty(), "waveform must have at least one sample");
        assert!(sample_rate > 0.0, "sample rate must be positive");
        assert!(samples.iter().all(|s| s.is_finite()), "waveform samples must be finite");
        assert!(t0.is_finite(), "t0 must be finite");
        Waveform { samples, sample_rate, t0 }
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// True iff there are no samples (never, for a validated waveform).
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Trigger-relative time of sample `i`.
    pub fn time_of(&self, i: usize) -> f64 {
        self.t0 + i as f64 / self.sample_rate
    }

    /// Index of the sample nearest to time `t`, clamped into range.
    pub fn nearest_index(&self, t: f64) -> usize {
        let i = ((t - self.t0) * self.sample_rate).round();
        i.clamp(0.0, (self.len() - 1) as f64) as usize
    }

    /// Total duration covered by the samples, seconds.
    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    /// Root-mean-square amplitude.
    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.len() as f64).sqrt()
    }

    /// Copy out the samples with `from_s <= t < to_s` (trigger-relative,
    /// clamped to the record).  The cut keeps its own `t0`.
    ///
    /// # Panics
    /// Panics if the window misses the record entirely.
    pub fn segment(&self, from_s: f64, to_s: f64) -> Waveform {
        assert!(from_s < to_s, "segment: empty time window");
        // Guarded ceil so times that land on a sample up to rounding noise
        // resolve to that sample.
        let index = |t: f64| ((t - self.t0) * self.sample_rate - 1e-9).ceil();
        let start = index(from_s).max(0.0) as usize;
        let end = (index(to_s) as isize).clamp(0, self.len() as isize) as usize;
        assert!(start < end, "segment [{from_s}, {to_s}) s lies outside the record");
        Waveform {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
            t0: self.time_of(start),
        }
    }
}

/// Pass band for [`bandpass`]: edges in Hz plus a filter order that sets
/// the roll-off steepness (≥ 20 dB per order one octave out).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BandSpec {
    /// Lower passband edge, Hz.
    pub low_hz: f64,
    /// Upper passband edge, Hz.
    pub high_hz: f64,
    /// Filter order (≥ 1).
    pub order: u32,
}

impl BandSpec {
    /// New band spec; edge ordering is checked against Nyquist only when
    /// applied to a concrete waveform.
    pub fn new(low_hz: f64, high_hz: f64, order: u32) -> Self {
        assert!(order >= 1, "filter order must be at least 1");
        BandSpec { low_hz, high_hz, order }
    }

    fn validate(&self, sample_rate: f64) -> Result<(), SignalError> {
        let nyquist = sample_rate / 2.0;
        if self.low_hz <= 0.0 || self.low_hz >= self.high_hz || self.high_hz >= nyquist {
            return Err(SignalError::InvalidBand {
                low_hz: self.low_hz,
                high_hz: self.high_hz,
                nyquist_hz: nyquist,
            });
        }
        Ok(())
    }

    /// Magnitude response at frequency `f` (Butterworth-shaped band-pass,
    /// −3 dB at the edges, ≥ 20 dB × order one octave beyond them).
    fn gain(&self, f: f64) -> f64 {
        if f <= 0.0 {
            return 0.0;
        }
        // Steepness chosen so one octave out the attenuation is exactly
        // 20 dB per order: 20·log10(2^p) = 20·order  ⇔  p = order·log2(10).
        let p = self.order as f64 * std::f64::consts::LOG2_10;
        let hp = (1.0 + (self.low_hz / f).powf(2.0 * p)).sqrt().recip();
        let lp = (1.0 + (f / self.high_hz).powf(2.0 * p)).sqrt().recip();
        hp * lp
    }
}

/// Pointwise mean of several waveforms sharing one sample grid.
pub fn average_waveforms(ws: &[Waveform]) -> Result<Waveform, SignalError> {
    let first = ws.first().ok_or(SignalError::EmptyInput)?;
    let mut acc = vec![0.0f64; first.len()];
    for (index, w) in ws.iter().enumerate() {
        if w.len() != first.len() || w.sample_rate != first.sample_rate || w.t0 != first.t0 {
            return Err(SignalError::MismatchedGrid { index });
        }
        for (a, s) in acc.iter_mut().zip(&w.samples) {
            *a += s;
        }
    }
    let n = ws.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(Waveform { samples: acc, sample_rate: first.sample_rate, t0: first.t0 })
}

/// Zero-phase band-pass filter.
///
/// The filter is applied as a purely real gain in the frequency domain, so
/// group delay is identically zero and burst arrival times are preserved.
pub fn bandpass(w: &Waveform, band: &BandSpec) -> Result<Waveform, SignalError> {
    band.validate(w.sample_rate)?;
    let n = w.len();
    let mut buf: Vec<Complex<f64>> = w.samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        // Bin k and its mirror share the frequency |k·fs/n| folded at Nyquist.
        let k_fold = k.min(n - k);
        let f = k_fold as f64 * w.sample_rate / n as f64;
        *c *= band.gain(f);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    let samples = buf.iter().map(|c| c.re * scale).collect();
    Ok(Waveform { samples, sample_rate: w.sample_rate, t0: w.t0 })
}

/// Magnitude of the analytic signal (Hilbert-transform envelope).
///
/// The result is nonnegative, has the same length, and pointwise dominates
/// `|w|` (up to FFT round-off).
pub fn envelope(w: &Waveform) -> Waveform {
    let n = w.len();
    let mut buf: Vec<Complex<f64>> = w.samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    // Analytic signal: double strictly-positive frequencies, zero the
    // negative ones, keep DC (and Nyquist for even n) untouched.
    for (k, c) in buf.iter_mut().enumerate().skip(1) {
        if 2 * k < n {
            *c *= 2.0;
        } else if 2 * k > n {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    let samples = buf.iter().map(|c| (c * scale).norm()).collect();
    Waveform { samples, sample_rate: w.sample_rate, t0: w.t0 }
}

/// One-sided magnitude spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Frequency grid in Hz, strictly increasing from 0 to ≤ Nyquist.
    pub freqs: Vec<f64>,
    /// DFT magnitudes `|X_k|` (unscaled).
    pub magnitudes: Vec<f64>,
}

impl Spectrum {
    /// Frequency of the largest magnitude bin.
    pub fn peak_frequency(&self) -> f64 {
        let mut best = 0;
        for i in 1..self.magnitudes.len() {
            if self.magnitudes[i] > self.magnitudes[best] {
                best = i;
            }
        }
        self.freqs[best]
    }
}

/// Magnitude of the DFT on the positive-frequency grid `k·fs/n`,
/// `k = 0 ..= n/2`.
pub fn spectrum(w: &Waveform) -> Spectrum {
    let n = w.len();
    let mut buf: Vec<Complex<f64>> = w.samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let df = w.sample_rate / n as f64;
    let freqs = (0..=half).map(|k| k as f64 * df).collect();
    let magnitudes = buf[..=half].iter().map(|c| c.norm()).collect();
    Spectrum { freqs, magnitudes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    const FS: f64 = 10.0e6;

    fn tone(freq: f64, n: usize, amp: f64) -> Waveform {
        let samples = (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / FS).sin()).collect();
        Waveform::new(samples, FS, 0.0)
    }

    /// Frequency snapped onto the DFT grid so FFT-based checks see a
    /// single clean bin.
    fn on_grid(freq: f64, n: usize) -> f64 {
        (freq * n as f64 / FS).round() * FS / n as f64
    }

    #[test]
    fn average_identical_is_identity() {
        let w = tone(100e3, 256, 1.0);
        let avg = average_waveforms(&[w.clone(), w.clone()]).unwrap();
        assert_eq!(avg, w);
    }

    #[test]
    fn average_symmetry() {
        let a = Waveform::new(vec![1.0, 3.0], 1.0, 0.0);
        let b = Waveform::new(vec![3.0, 1.0], 1.0, 0.0);
        let avg = average_waveforms(&[a, b]).unwrap();
        assert_eq!(avg.samples, vec![2.0, 2.0]);
    }

    #[test]
    fn average_suppresses_noise_like_sqrt_n() {
        let clean = tone(on_grid(200e3, 2048), 2048, 1.0);
        let sigma = 0.2;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let copies: Vec<Waveform> = (0..64)
            .map(|_| {
                let samples = clean
                    .samples
                    .iter()
                    .map(|&s| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        s + sigma * n
                    })
                    .collect();
                Waveform::new(samples, FS, 0.0)
            })
            .collect();
        let avg = average_waveforms(&copies).unwrap();
        let resid = Waveform::new(
            avg.samples.iter().zip(&clean.samples).map(|(a, c)| a - c).collect(),
            FS,
            0.0,
        );
        let expected = sigma / 8.0; // σ/√64
        assert!(
            resid.rms() < 1.4 * expected && resid.rms() > 0.6 * expected,
            "residual rms {} vs expected {expected}",
            resid.rms()
        );
    }

    #[test]
    fn average_rejects_mismatched_grids() {
        let a = tone(100e3, 64, 1.0);
        let b = tone(100e3, 65, 1.0);
        assert_eq!(average_waveforms(&[a.clone(), b]), Err(SignalError::MismatchedGrid { index: 1 }));
        let mut c = tone(100e3, 64, 1.0);
        c.t0 = 1.0e-6;
        assert_eq!(average_waveforms(&[a, c]), Err(SignalError::MismatchedGrid { index: 1 }));
        assert_eq!(average_waveforms(&[]), Err(SignalError::EmptyInput));
    }

    fn attenuation_db(band: &BandSpec, freq: f64, n: usize) -> f64 {
        let w = tone(on_grid(freq, n), n, 1.0);
        let out = bandpass(&w, band).unwrap();
        20.0 * (w.rms() / out.rms()).log10()
    }

    #[test]
    fn bandpass_passes_in_band_tone() {
        let band = BandSpec::new(300e3, 1.5e6, 4);
        let db = attenuation_db(&band, 670e3, 4096);
        assert!(db.abs() < 1.0, "in-band change {db} dB");
    }

    #[test]
    fn bandpass_attenuates_per_order_at_one_octave() {
        for order in [1, 2, 4] {
            let band = BandSpec::new(20e3, 200e3, order);
            let db = attenuation_db(&band, 400e3, 8192);
            assert!(db >= 20.0 * order as f64, "order {order}: {db} dB at one octave");
        }
    }

    #[test]
    fn bandpass_attenuates_far_out_of_band() {
        let band = BandSpec::new(20e3, 200e3, 1);
        let db = attenuation_db(&band, 800e3, 8192);
        assert!(db >= 20.0, "{db} dB at 4× high edge");
    }

    #[test]
    fn bandpass_zero_in_zero_out() {
        let w = Waveform::new(vec![0.0; 512], FS, 0.0);
        let out = bandpass(&w, &BandSpec::new(20e3, 200e3, 4)).unwrap();
        assert!(out.samples.iter().all(|&s| s.abs() < 1e-15));
    }

    #[test]
    fn bandpass_applied_twice_is_nearly_idempotent_in_band() {
        let band = BandSpec::new(300e3, 1.5e6, 4);
        let w = tone(on_grid(670e3, 4096), 4096, 1.0);
        let once = bandpass(&w, &band).unwrap();
        let twice = bandpass(&once, &band).unwrap();
        let db = 20.0 * (once.rms() / twice.rms()).log10();
        assert!(db.abs() < 1.0, "second pass changed in-band tone by {db} dB");
    }

    #[test]
    fn bandpass_rejects_bad_edges() {
        let w = tone(100e3, 64, 1.0);
        assert!(matches!(
            bandpass(&w, &BandSpec { low_hz: 0.0, high_hz: 1e6, order: 2 }),
            Err(SignalError::InvalidBand { .. })
        ));
        assert!(matches!(
            bandpass(&w, &BandSpec { low_hz: 4.0e6, high_hz: 6.0e6, order: 2 }),
            Err(SignalError::InvalidBand { .. })
        ));
    }

    #[test]
    fn envelope_of_tone_is_flat() {
        let w = tone(on_grid(500e3, 2048), 2048, 0.7);
        let env = envelope(&w);
        for &e in &env.samples[200..1848] {
            assert!((e - 0.7).abs() < 0.035, "envelope {e} should be ≈ 0.7");
        }
    }

    #[test]
    fn envelope_zero_and_dominates_signal() {
        let z = Waveform::new(vec![0.0; 128], FS, 0.0);
        assert!(envelope(&z).samples.iter().all(|&e| e.abs() < 1e-15));

        let w = tone(on_grid(313e3, 1024), 1024, 1.3);
        let env = envelope(&w);
        for (e, s) in env.samples.iter().zip(&w.samples) {
            assert!(*e >= s.abs() - 1e-9);
        }
    }

    #[test]
    fn envelope_peak_of_hann_burst_at_center() {
        let n = 2048;
        let burst_len = 301;
        let start = 700;
        let mut samples = vec![0.0; n];
        for i in 0..burst_len {
            let window = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (burst_len - 1) as f64).cos());
            let carrier = (2.0 * std::f64::consts::PI * 532e3 * i as f64 / FS).sin();
            samples[start + i] = window * carrier;
        }
        let env = envelope(&Waveform::new(samples, FS, 0.0));
        let argmax = env
            .samples
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let center = start + (burst_len - 1) / 2;
        assert!(
            (argmax as isize - center as isize).unsigned_abs() <= 2,
            "envelope peak at {argmax}, burst center {center}"
        );
    }

    #[test]
    fn spectrum_single_tone_peaks_at_tone() {
        let f = on_grid(532e3, 2500);
        let spec = spectrum(&tone(f, 2500, 1.0));
        assert_relative_eq!(spec.peak_frequency(), f, epsilon = 1.0);
    }

    #[test]
    fn spectrum_resolves_two_emission_bands() {
        let n = 2500;
        let f_lo = on_grid(80e3, n);
        let f_hi = on_grid(532e3, n);
        let mut w = tone(f_lo, n, 1.0);
        for (s, t) in w.samples.iter_mut().zip(tone(f_hi, n, 1.0).samples) {
            *s += t;
        }
        let spec = spectrum(&w);
        let mut mags: Vec<(f64, f64)> = spec.freqs.iter().copied().zip(spec.magnitudes.iter().copied()).collect();
        mags.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let top2: Vec<f64> = mags[..2].iter().map(|(f, _)| *f).collect();
        assert!(top2.contains(&f_lo) && top2.contains(&f_hi), "dominant bins {top2:?}");
    }

    #[test]
    fn spectrum_satisfies_parseval() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &n in &[255usize, 256] {
            let samples: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let w = Waveform::new(samples, FS, 0.0);
            let spec = spectrum(&w);
            let time_energy: f64 = w.samples.iter().map(|s| s * s).sum();
            // One-sided Parseval: DC (and Nyquist for even n) count once.
            let mut freq_energy = spec.magnitudes[0].powi(2);
            let last = spec.magnitudes.len() - 1;
            for m in &spec.magnitudes[1..last] {
                freq_energy += 2.0 * m * m;
            }
            let nyquist_once = n % 2 == 0;
            freq_energy += if nyquist_once { 1.0 } else { 2.0 } * spec.magnitudes[last].powi(2);
            freq_energy /= n as f64;
            assert_relative_eq!(freq_energy, time_energy, max_relative = 1e-9);
        }
    }

    #[test]
    fn segment_cuts_by_time() {
        let w = tone(100e3, 1000, 1.0);
        let cut = w.segment(20.0e-6, 50.0e-6);
        assert_eq!(cut.len(), 300);
        assert_relative_eq!(cut.t0, 20.0e-6, epsilon = 1e-12);
        assert_eq!(cut.samples[0], w.samples[200]);
    }
}
