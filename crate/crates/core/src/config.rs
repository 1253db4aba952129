//! Run-time defaults shared between the library and the command-line tool.
//!
//! Everything here can be overridden from a TOML file; a missing file or a
//! partial file is fine, unknown keys are rejected.  The file is found in
//! this order:
//!
//! 1. an explicit path (the CLI's `--config` flag),
//! 2. the `PDM2_CONFIG` environment variable,
//! 3. `./pdm2.toml` if it exists,
//! 4. built-in defaults.
//!
//! The defaults bracket the bench geometry this workspace simulates: band
//! edges around the 80 / 532 / 728 kHz signal content, OA and US search
//! windows of [40, 120] and [120, 200] µs, room-air sound speed, and the
//! 17 mm acoustic path offset between the sensor plane and the zero of the
//! distance scale.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boss::SfaParams;
use crate::signal::BandSpec;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "PDM2_CONFIG";
/// Config file picked up from the working directory when nothing else is
/// specified.
pub const CONFIG_FILE: &str = "pdm2.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("config: {0}")]
    Invalid(String),
}

/// Band-pass and sampling defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSection {
    /// Low receive band, bracketing the 80 kHz content.
    pub low_band: BandSpec,
    /// High receive band, bracketing the 532 / 728 kHz content.
    pub high_band: BandSpec,
}

impl Default for SignalSection {
    fn default() -> Self {
        SignalSection {
            low_band: BandSpec::new(20.0e3, 200.0e3, 4),
            high_band: BandSpec::new(300.0e3, 1.5e6, 4),
        }
    }
}

/// Search windows and acceptance threshold for ToF estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TofSection {
    /// One-way arrival search window, µs.
    pub oa_window_us: [f64; 2],
    /// Round-trip arrival search window, µs.
    pub us_window_us: [f64; 2],
    /// Normalized correlation peaks below this are reported as
    /// low-confidence.
    pub min_peak_corr: f64,
    /// Samples per extracted reference pattern.
    pub pattern_len: usize,
}

impl Default for TofSection {
    fn default() -> Self {
        TofSection {
            oa_window_us: [40.0, 120.0],
            us_window_us: [120.0, 200.0],
            min_peak_corr: 0.3,
            pattern_len: 128,
        }
    }
}

impl TofSection {
    /// OA window in seconds.
    pub fn oa_window_s(&self) -> (f64, f64) {
        (self.oa_window_us[0] * 1e-6, self.oa_window_us[1] * 1e-6)
    }

    /// US window in seconds.
    pub fn us_window_s(&self) -> (f64, f64) {
        (self.us_window_us[0] * 1e-6, self.us_window_us[1] * 1e-6)
    }
}

/// Acoustic path constants for converting ToF to distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangingSection {
    /// Speed of sound, m/s (room air).
    pub sound_speed_m_s: f64,
    /// One-way acoustic path between the sensor plane and the zero of the
    /// distance scale, mm.
    pub path_offset_mm: f64,
    /// Standard deviation assigned to rectification samples that come
    /// without repeats, mm.
    pub fallback_sigma_mm: f64,
}

impl Default for RangingSection {
    fn default() -> Self {
        RangingSection {
            sound_speed_m_s: 343.0,
            path_offset_mm: 17.0,
            fallback_sigma_mm: 0.05,
        }
    }
}

/// Center-point extraction defaults for calibration sessions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSection {
    /// Raw points below this fraction of the frame's peak amplitude are
    /// discarded before averaging.
    pub threshold_frac: f64,
    /// Eigenvalue floor for empirical center covariances, mm².
    pub sigma_floor_mm2: f64,
}

impl Default for CalibSection {
    fn default() -> Self {
        CalibSection {
            threshold_frac: 0.5,
            sigma_floor_mm2: 1e-4,
        }
    }
}

/// Classifier defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BossSection {
    /// Sliding-window length in samples; 0 derives it from the series
    /// length.
    pub window_len: usize,
    /// Symbols per word (two per retained Fourier bin).
    pub word_len: usize,
    /// Alphabet size per symbol.
    pub alphabet: usize,
    /// Z-normalize windows before the DFT.
    pub normalize_windows: bool,
}

impl Default for BossSection {
    fn default() -> Self {
        BossSection {
            window_len: 0,
            word_len: 8,
            alphabet: 4,
            normalize_windows: true,
        }
    }
}

/// Synthetic-bench defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Second OA echo amplitude relative to the first.
    pub echo2_ratio: f64,
    /// Signal-to-noise ratio of synthesized station waveforms, dB.
    pub snr_db: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            echo2_ratio: 0.4,
            snr_db: 20.0,
        }
    }
}

/// The full configuration document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Pdm2Config {
    pub signal: SignalSection,
    pub tof: TofSection,
    pub ranging: RangingSection,
    pub calib: CalibSection,
    pub boss: BossSection,
    pub bench: BenchSection,
}

impl Pdm2Config {
    /// Classifier parameters for a series of `series_len` samples, honoring
    /// the `window_len = 0 → derive` convention.
    pub fn boss_params(&self, series_len: usize) -> SfaParams {
        if self.boss.window_len == 0 {
            let auto = SfaParams::for_series_len(series_len);
            SfaParams::new(
                auto.window_len,
                self.boss.word_len,
                self.boss.alphabet,
                self.boss.normalize_windows,
            )
        } else {
            SfaParams::new(
                self.boss.window_len,
                self.boss.word_len,
                self.boss.alphabet,
                self.boss.normalize_windows,
            )
        }
    }

    /// Reject configurations that type-check but cannot work.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        for (name, band) in [
            ("signal.low_band", self.signal.low_band),
            ("signal.high_band", self.signal.high_band),
        ] {
            if !(band.low_hz > 0.0 && band.low_hz < band.high_hz) {
                return fail(format!(
                    "{name}: edges must satisfy 0 < low < high, got {} .. {}",
                    band.low_hz, band.high_hz
                ));
            }
        }
        for (name, w) in [
            ("tof.oa_window_us", self.tof.oa_window_us),
            ("tof.us_window_us", self.tof.us_window_us),
        ] {
            if !(w[0] >= 0.0 && w[0] < w[1]) {
                return fail(format!("{name}: window must be ordered, got {w:?}"));
            }
        }
        if !(self.tof.min_peak_corr > 0.0 && self.tof.min_peak_corr <= 1.0) {
            return fail(format!(
                "tof.min_peak_corr must lie in (0, 1], got {}",
                self.tof.min_peak_corr
            ));
        }
        if self.tof.pattern_len < 8 {
            return fail(format!(
                "tof.pattern_len must be at least 8, got {}",
                self.tof.pattern_len
            ));
        }
        if !(self.ranging.sound_speed_m_s > 0.0) {
            return fail(format!(
                "ranging.sound_speed_m_s must be positive, got {}",
                self.ranging.sound_speed_m_s
            ));
        }
        if !(self.ranging.fallback_sigma_mm > 0.0) {
            return fail(format!(
                "ranging.fallback_sigma_mm must be positive, got {}",
                self.ranging.fallback_sigma_mm
            ));
        }
        if !(self.calib.threshold_frac > 0.0 && self.calib.threshold_frac <= 1.0) {
            return fail(format!(
                "calib.threshold_frac must lie in (0, 1], got {}",
                self.calib.threshold_frac
            ));
        }
        if !(self.calib.sigma_floor_mm2 > 0.0) {
            return fail(format!(
                "calib.sigma_floor_mm2 must be positive, got {}",
                self.calib.sigma_floor_mm2
            ));
        }
        if self.boss.word_len == 0 || self.boss.word_len % 2 != 0 || self.boss.word_len > 20 {
            return fail(format!(
                "boss.word_len must be even and 2 ..= 20, got {}",
                self.boss.word_len
            ));
        }
        if !(2..=8).contains(&self.boss.alphabet) {
            return fail(format!(
                "boss.alphabet must be 2 ..= 8, got {}",
                self.boss.alphabet
            ));
        }
        if self.boss.window_len != 0 && self.boss.window_len < self.boss.word_len {
            return fail(format!(
                "boss.window_len must be 0 (auto) or at least word_len, got {}",
                self.boss.window_len
            ));
        }
        if !(self.bench.echo2_ratio >= 0.0) {
            return fail(format!(
                "bench.echo2_ratio must be non-negative, got {}",
                self.bench.echo2_ratio
            ));
        }
        Ok(())
    }
}

/// Parse and validate a config document.
pub fn parse(text: &str) -> Result<Pdm2Config, ConfigError> {
    let cfg: Pdm2Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: "<inline>".to_owned(),
        msg: first_line(&e.to_string()),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("parse error").trim().to_owned()
}

fn from_file(path: &Path) -> Result<Pdm2Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let cfg: Pdm2Config = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.display().to_string(),
        msg: first_line(&e.to_string()),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Resolve the configuration, returning it together with the file it came
/// from (`None` for built-in defaults).
pub fn load(explicit: Option<&Path>) -> Result<(Pdm2Config, Option<PathBuf>), ConfigError> {
    if let Some(p) = explicit {
        return Ok((from_file(p)?, Some(p.to_owned())));
    }
    if let Some(v) = std::env::var_os(CONFIG_ENV) {
        let p = PathBuf::from(v);
        return Ok((from_file(&p)?, Some(p)));
    }
    let local = Path::new(CONFIG_FILE);
    if local.exists() {
        return Ok((from_file(local)?, Some(local.to_owned())));
    }
    Ok((Pdm2Config::default(), None))
}
