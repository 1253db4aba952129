//! Readers and writers for the artifact files the tools exchange.
//!
//! Four format families live here:
//!
//! * a little-endian binary container for waveforms and reference patterns
//!   (magic `PDM2WAVE`);
//! * line-oriented text for calibration sessions (`PDM2CAL`), scan sessions
//!   (`PDM2SCAN`) and the range-model document (`PDM2RANGE`);
//! * bare numeric rows for point clouds, plus two small CSV tables
//!   (dataset manifest, confusion matrix);
//! * TOML documents, via serde, for plain records: scenes, ground-truth
//!   sidecars, calibration states and contour summaries.
//!
//! Every writer is deterministic — equal values produce identical bytes —
//! and every reader inverts its writer without loss.  Floats are printed in
//! the shortest decimal form that parses back to the same bits, so text
//! round trips are exact, not approximate.
//!
//! Each format has a pure pair (`format_*`/`parse_*` for text,
//! `encode_*`/`decode_*` for binary) and a path pair (`write_*`/`read_*`)
//! that adds file I/O and prefixes errors with the offending path.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boss::ConfusionMatrix;
use crate::calib::{
    CalibrationSession, CalibrationState, FrameKind, RawFrame, RawPoint, RotationReading,
};
use crate::geometry::Point3;
use crate::reconstruct::{CloudPoint, ContourReport, ErrorStats, PointCloud, ScanStation};
use crate::rectify::{FitStats, RangeModel};
use crate::signal::Waveform;
use crate::sim::{Scene, SessionTruth, StationTruth};
use crate::tof::ReferencePattern;
use crate::Modality;

/// Magic prefix of the binary waveform / reference-pattern container.
pub const WAVE_MAGIC: &[u8; 8] = b"PDM2WAVE";
/// Container version written by this build.
pub const WAVE_VERSION: u32 = 1;

const CAL_HEADER: &str = "PDM2CAL v1";
const SCAN_HEADER: &str = "PDM2SCAN v1";
const RANGE_HEADER: &str = "PDM2RANGE v1";

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    /// The bytes were readable but do not form a valid document.
    #[error("{0}")]
    Malformed(String),
}

fn io_err(path: &Path, source: std::io::Error) -> FileError {
    FileError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Prefix a parse error with the file it came from.
fn at_path(path: &Path, e: FileError) -> FileError {
    match e {
        FileError::Malformed(m) => FileError::Malformed(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn bad(msg: impl Into<String>) -> FileError {
    FileError::Malformed(msg.into())
}

/// Shortest decimal representation that parses back to the same `f64`.
fn fmt_f(x: f64) -> String {
    format!("{x}")
}

fn parse_f64(tok: &str, line_no: usize, what: &str) -> Result<f64, FileError> {
    tok.parse()
        .map_err(|_| bad(format!("line {line_no}: bad {what} `{tok}`")))
}

fn parse_usize(tok: &str, line_no: usize, what: &str) -> Result<usize, FileError> {
    tok.parse()
        .map_err(|_| bad(format!("line {line_no}: bad {what} `{tok}`")))
}

// ---------------------------------------------------------------------------
// Binary container
// ---------------------------------------------------------------------------

/// Sequential little-endian reader over a byte slice.
struct Take<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Take<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Take { bytes, pos: 0 }
    }

    fn chunk(&mut self, n: usize, what: &str) -> Result<&'a [u8], FileError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(format!("truncated before {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, FileError> {
        Ok(self.chunk(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, FileError> {
        Ok(u32::from_le_bytes(self.chunk(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, FileError> {
        Ok(u64::from_le_bytes(self.chunk(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, FileError> {
        Ok(f64::from_le_bytes(self.chunk(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> Result<(), FileError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(bad(format!(
                "{} trailing bytes after the declared content",
                self.bytes.len() - self.pos
            )))
        }
    }
}

fn check_header(t: &mut Take<'_>) -> Result<(), FileError> {
    let magic = t.chunk(8, "magic")?;
    if magic != WAVE_MAGIC {
        return Err(bad("not a PDM2WAVE container (bad magic)"));
    }
    let version = t.u32("version")?;
    if version != WAVE_VERSION {
        return Err(bad(format!("unsupported container version {version}")));
    }
    Ok(())
}

fn sample_count(t: &mut Take<'_>) -> Result<usize, FileError> {
    let count = t.u64("sample count")?;
    usize::try_from(count)
        .ok()
        // Eight bytes per sample; reject counts the slice cannot possibly hold
        // before allocating anything.
        .filter(|&n| n <= t.bytes.len() / 8 + 1)
        .ok_or_else(|| bad(format!("implausible sample count {count}")))
}

/// Serialize a waveform into the binary container:
/// magic, version `u32`, `sample_rate: f64`, `t0: f64`, `count: u64`,
/// then `count` little-endian `f64` samples.
pub fn encode_waveform(w: &Waveform) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 + 8 + 8 + 8 + 8 * w.samples.len());
    buf.extend_from_slice(WAVE_MAGIC);
    buf.extend_from_slice(&WAVE_VERSION.to_le_bytes());
    buf.extend_from_slice(&w.sample_rate.to_le_bytes());
    buf.extend_from_slice(&w.t0.to_le_bytes());
    buf.extend_from_slice(&(w.samples.len() as u64).to_le_bytes());
    for &x in &w.samples {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_waveform(bytes: &[u8]) -> Result<Waveform, FileError> {
    let mut t = Take::new(bytes);
    check_header(&mut t)?;
    let sample_rate = t.f64("sample rate")?;
    let t0 = t.f64("t0")?;
    let n = sample_count(&mut t)?;
    if n == 0 {
        return Err(bad("empty waveform"));
    }
    if !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(bad(format!("bad sample rate {sample_rate}")));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        samples.push(t.f64("sample")?);
    }
    t.done()?;
    Ok(Waveform::new(samples, sample_rate, t0))
}

pub fn write_waveform_bin(path: impl AsRef<Path>, w: &Waveform) -> Result<(), FileError> {
    let path = path.as_ref();
    fs::write(path, encode_waveform(w)).map_err(|e| io_err(path, e))
}

pub fn read_waveform_bin(path: impl AsRef<Path>) -> Result<Waveform, FileError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_waveform(&bytes).map_err(|e| at_path(path, e))
}

fn modality_byte(m: Modality) -> u8 {
    match m {
        Modality::Us => 0,
        Modality::Oa => 1,
    }
}

/// Serialize a reference pattern: the waveform container with a modality tag
/// and a provenance string in the header, and no time base (patterns are
/// sample sequences at the host waveform's rate):
/// magic, version `u32`, modality `u8` (0 = US, 1 = OA), source-id length
/// `u32` + UTF-8 bytes, `count: u64`, samples.
pub fn encode_reference_pattern(r: &ReferencePattern) -> Vec<u8> {
    let src = r.source_id.as_bytes();
    let mut buf = Vec::with_capacity(8 + 4 + 1 + 4 + src.len() + 8 + 8 * r.samples.len());
    buf.extend_from_slice(WAVE_MAGIC);
    buf.extend_from_slice(&WAVE_VERSION.to_le_bytes());
    buf.push(modality_byte(r.modality));
    buf.extend_from_slice(&(src.len() as u32).to_le_bytes());
    buf.extend_from_slice(src);
    buf.extend_from_slice(&(r.samples.len() as u64).to_le_bytes());
    for &x in &r.samples {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_reference_pattern(bytes: &[u8]) -> Result<ReferencePattern, FileError> {
    let mut t = Take::new(bytes);
    check_header(&mut t)?;
    let modality = match t.u8("modality tag")? {
        0 => Modality::Us,
        1 => Modality::Oa,
        other => return Err(bad(format!("unknown modality tag {other}"))),
    };
    let src_len = t.u32("source-id length")? as usize;
    let source_id = std::str::from_utf8(t.chunk(src_len, "source id")?)
        .map_err(|_| bad("source id is not UTF-8"))?
        .to_owned();
    let n = sample_count(&mut t)?;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        samples.push(t.f64("sample")?);
    }
    t.done()?;
    if samples.len() < 8 || samples.iter().map(|x| x * x).sum::<f64>() <= 0.0 {
        return Err(bad("pattern too short or all-zero"));
    }
    Ok(ReferencePattern::new(samples, modality, source_id))
}

pub fn write_reference_pattern(
    path: impl AsRef<Path>,
    r: &ReferencePattern,
) -> Result<(), FileError> {
    let path = path.as_ref();
    fs::write(path, encode_reference_pattern(r)).map_err(|e| io_err(path, e))
}

pub fn read_reference_pattern(path: impl AsRef<Path>) -> Result<ReferencePattern, FileError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_reference_pattern(&bytes).map_err(|e| at_path(path, e))
}

// ---------------------------------------------------------------------------
// Waveform CSV
// ---------------------------------------------------------------------------

/// Render `time_s,amplitude` rows with a uniform time step.
pub fn format_waveform_csv(w: &Waveform) -> String {
    let mut out = String::with_capacity(24 * w.samples.len() + 16);
    out.push_str("time_s,amplitude\n");
    for (i, &x) in w.samples.iter().enumerate() {
        let t = w.t0 + i as f64 / w.sample_rate;
        out.push_str(&fmt_f(t));
        out.push(',');
        out.push_str(&fmt_f(x));
        out.push('\n');
    }
    out
}

/// Round to twelve significant decimal digits.
///
/// The CSV stores times, not the rate; recomputing `1 / Δt` lands within a
/// few ulps of the true rate, and any rate a human ever configured is exact
/// at twelve digits, so snapping makes `parse ∘ format` the identity.
fn snap12(x: f64) -> f64 {
    format!("{x:.11e}").parse().unwrap()
}

pub fn parse_waveform_csv(text: &str) -> Result<Waveform, FileError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "time_s,amplitude" => {}
        _ => return Err(bad("line 1: expected header `time_s,amplitude`")),
    }
    let mut times = Vec::new();
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let (t, x) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("line {line_no}: expected `time,amplitude`")))?;
        times.push(parse_f64(t.trim(), line_no, "time")?);
        samples.push(parse_f64(x.trim(), line_no, "amplitude")?);
    }
    if samples.len() < 2 {
        return Err(bad("need at least two rows to infer the sample rate"));
    }
    let n = times.len();
    let dt = (times[n - 1] - times[0]) / (n - 1) as f64;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(bad("time column is not increasing"));
    }
    for (i, pair) in times.windows(2).enumerate() {
        let step = pair[1] - pair[0];
        if (step - dt).abs() > dt * 1e-6 {
            return Err(bad(format!(
                "non-uniform time step near row {} ({} vs {})",
                i + 2,
                fmt_f(step),
                fmt_f(dt)
            )));
        }
    }
    Ok(Waveform::new(samples, snap12(1.0 / dt), times[0]))
}

pub fn write_waveform_csv(path: impl AsRef<Path>, w: &Waveform) -> Result<(), FileError> {
    let path = path.as_ref();
    fs::write(path, format_waveform_csv(w)).map_err(|e| io_err(path, e))
}

pub fn read_waveform_csv(path: impl AsRef<Path>) -> Result<Waveform, FileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_waveform_csv(&text).map_err(|e| at_path(path, e))
}

// ---------------------------------------------------------------------------
// Range-model document
// ---------------------------------------------------------------------------

/// Render a fitted rectification model as a small `key value` document.
pub fn format_range_model(m: &RangeModel) -> String {
    format!(
        "{RANGE_HEADER}\n\
         modality {}\n\
         beta2 {}\n\
         beta1 {}\n\
         beta0 {}\n\
         valid_tof {} {}\n\
         n_samples {}\n\
         residual_rms_mm {}\n\
         residual_max_mm {}\n",
        m.modality.tag(),
        fmt_f(m.beta2),
        fmt_f(m.beta1),
        fmt_f(m.beta0),
        fmt_f(m.valid_tof[0]),
        fmt_f(m.valid_tof[1]),
        m.stats.n_samples,
        fmt_f(m.stats.residual_rms_mm),
        fmt_f(m.stats.residual_max_mm),
    )
}

pub fn parse_range_model(text: &str) -> Result<RangeModel, FileError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RANGE_HEADER => {}
        _ => return Err(bad(format!("line 1: expected `{RANGE_HEADER}`"))),
    }
    let mut modality = None;
    let mut beta = [None::<f64>; 3];
    let mut valid_tof = None;
    let mut n_samples = None;
    let mut rms = None;
    let mut max = None;
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let mut tok = line.split_whitespace();
        let key = tok.next().unwrap();
        let rest: Vec<&str> = tok.collect();
        let one = |rest: &[&str]| -> Result<String, FileError> {
            if rest.len() == 1 {
                Ok(rest[0].to_owned())
            } else {
                Err(bad(format!("line {line_no}: `{key}` takes one value")))
            }
        };
        match key {
            "modality" => {
                modality = Some(Modality::from_tag(&one(&rest)?).ok_or_else(|| {
                    bad(format!("line {line_no}: unknown modality `{}`", rest[0]))
                })?)
            }
            "beta2" => beta[2] = Some(parse_f64(&one(&rest)?, line_no, "beta2")?),
            "beta1" => beta[1] = Some(parse_f64(&one(&rest)?, line_no, "beta1")?),
            "beta0" => beta[0] = Some(parse_f64(&one(&rest)?, line_no, "beta0")?),
            "valid_tof" => {
                if rest.len() != 2 {
                    return Err(bad(format!("line {line_no}: `valid_tof` takes two values")));
                }
                valid_tof = Some([
                    parse_f64(rest[0], line_no, "valid_tof low")?,
                    parse_f64(rest[1], line_no, "valid_tof high")?,
                ]);
            }
            "n_samples" => n_samples = Some(parse_usize(&one(&rest)?, line_no, "n_samples")?),
            "residual_rms_mm" => rms = Some(parse_f64(&one(&rest)?, line_no, "residual_rms_mm")?),
            "residual_max_mm" => max = Some(parse_f64(&one(&rest)?, line_no, "residual_max_mm")?),
            other => return Err(bad(format!("line {line_no}: unknown key `{other}`"))),
        }
    }
    let missing = |what: &str| bad(format!("missing `{what}`"));
    Ok(RangeModel {
        modality: modality.ok_or_else(|| missing("modality"))?,
        beta2: beta[2].ok_or_else(|| missing("beta2"))?,
        beta1: beta[1].ok_or_else(|| missing("beta1"))?,
        beta0: beta[0].ok_or_else(|| missing("beta0"))?,
        valid_tof: valid_tof.ok_or_else(|| missing("valid_tof"))?,
        stats: FitStats {
            n_samples: n_samples.ok_or_else(|| missing("n_samples"))?,
            residual_rms_mm: rms.ok_or_else(|| missing("residual_rms_mm"))?,
            residual_max_mm: max.ok_or_else(|| missing("residual_max_mm"))?,
        },
    })
}

pub fn write_range_model(path: impl AsRef<Path>, m: &RangeModel) -> Result<(), FileError> {
    let path = path.as_ref();
    fs::write(path, format_range_model(m)).map_err(|e| io_err(path, e))
}

pub fn read_range_model(path: impl AsRef<Path>) -> Result<RangeModel, FileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_range_model(&text).map_err(|e| at_path(path, e))
}

// ---------------------------------------------------------------------------
// Calibration session
// ---------------------------------------------------------------------------

fn kind_tag(k: FrameKind) -> &'static str {
    match k {
        FrameKind::Tip => "tip",
        FrameKind::Edge => "edge",
    }
}

fn point_fields(p: &Point3) -> String {
    format!("{} {} {}", fmt_f(p.x), fmt_f(p.y), fmt_f(p.z))
}

/// Render a raw calibration session, one record per line.
///
/// Layout: a `PDM2CAL v1` header, a units line, then per frame one
/// `FRAME id kind angle nrows` record followed by its raws as
/// `RAW frame row Sx Sy Sz d amp`, and finally the encoder readings as
/// `ANGLE frame_i frame_k theta sigma_theta`.  Millimetres and radians
/// throughout; row indices reconstruct the sweep grouping exactly, including
/// empty rows.
pub fn format_calibration_session(s: &CalibrationSession) -> String {
    let mut out = String::new();
    out.push_str(CAL_HEADER);
    out.push('\n');
    out.push_str("META units mm rad\n");
    for f in &s.frames {
        out.push_str(&format!(
            "FRAME {} {} {} {}\n",
            f.frame_id,
            kind_tag(f.kind),
            fmt_f(f.turntable_angle),
            f.rows.len()
        ));
        for (row, points) in f.rows.iter().enumerate() {
            for p in points {
                out.push_str(&format!(
                    "RAW {} {row} {} {} {}\n",
                    f.frame_id,
                    point_fields(&p.s),
                    fmt_f(p.d),
                    fmt_f(p.amplitude)
                ));
            }
        }
    }
    for r in &s.rotations {
        out.push_str(&format!(
            "ANGLE {} {} {} {}\n",
            r.frame_i,
            r.frame_k,
            fmt_f(r.theta),
            fmt_f(r.sigma_theta)
        ));
    }
    out
}

pub fn parse_calibration_session(text: &str) -> Result<CalibrationSession, FileError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CAL_HEADER => {}
        _ => return Err(bad(format!("line 1: expected `{CAL_HEADER}`"))),
    }
    let mut frames: Vec<RawFrame> = Vec::new();
    let mut index_of = std::collections::HashMap::new();
    let mut rotations = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok[0] {
            "META" => {}
            "FRAME" => {
                if tok.len() != 5 {
                    return Err(bad(format!(
                        "line {line_no}: FRAME takes id, kind, angle, nrows"
                    )));
                }
                let frame_id = parse_usize(tok[1], line_no, "frame id")?;
                let kind = match tok[2] {
                    "tip" => FrameKind::Tip,
                    "edge" => FrameKind::Edge,
                    other => {
                        return Err(bad(format!("line {line_no}: unknown frame kind `{other}`")))
                    }
                };
                let turntable_angle = parse_f64(tok[3], line_no, "frame angle")?;
                let nrows = parse_usize(tok[4], line_no, "row count")?;
                if index_of.insert(frame_id, frames.len()).is_some() {
                    return Err(bad(format!("line {line_no}: duplicate frame {frame_id}")));
                }
                frames.push(RawFrame {
                    frame_id,
                    kind,
                    turntable_angle,
                    rows: vec![Vec::new(); nrows],
                });
            }
            "RAW" => {
                if tok.len() != 8 {
                    return Err(bad(format!(
                        "line {line_no}: RAW takes frame, row, Sx, Sy, Sz, d, amp"
                    )));
                }
                let frame_id = parse_usize(tok[1], line_no, "frame id")?;
                let &fi = index_of.get(&frame_id).ok_or_else(|| {
                    bad(format!("line {line_no}: RAW before FRAME {frame_id}"))
                })?;
                let row = parse_usize(tok[2], line_no, "row index")?;
                if row >= frames[fi].rows.len() {
                    return Err(bad(format!(
                        "line {line_no}: row {row} outside the declared {} rows",
                        frames[fi].rows.len()
                    )));
                }
                let s = Point3::new(
                    parse_f64(tok[3], line_no, "Sx")?,
                    parse_f64(tok[4], line_no, "Sy")?,
                    parse_f64(tok[5], line_no, "Sz")?,
                );
                let d = parse_f64(tok[6], line_no, "range")?;
                if !(d > 0.0) {
                    return Err(bad(format!("line {line_no}: non-positive range {d}")));
                }
                let amplitude = parse_f64(tok[7], line_no, "amplitude")?;
                frames[fi].rows[row].push(RawPoint { s, d, amplitude });
            }
            "ANGLE" => {
                if tok.len() != 5 {
                    return Err(bad(format!(
                        "line {line_no}: ANGLE takes frame_i, frame_k, theta, sigma_theta"
                    )));
                }
                let frame_i = parse_usize(tok[1], line_no, "frame_i")?;
                let frame_k = parse_usize(tok[2], line_no, "frame_k")?;
                let theta = parse_f64(tok[3], line_no, "theta")?;
                let sigma_theta = parse_f64(tok[4], line_no, "sigma_theta")?;
                if !(sigma_theta >= 0.0) {
                    return Err(bad(format!(
                        "line {line_no}: negative sigma_theta {sigma_theta}"
                    )));
                }
                rotations.push(RotationReading {
                    frame_i,
                    frame_k,
                    theta,
                    sigma_theta,
                });
            }
            other => return Err(bad(format!("line {line_no}: unknown record `{other}`"))),
        }
    }
    Ok(CalibrationSession { frames, rotations })
}

pub fn write_calibration_session(
    path: impl AsRef<Path>,
    s: &CalibrationSession,
) -> Result<(), FileError> {
    let path = path.as_ref();
    fs::write(path, format_calibration_session(s)).map_err(|e| io_err(path, e))
}

pub fn read_calibration_session(path: impl AsRef<Path>) -> Result<CalibrationSession, FileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_calibration_session(&text).map_err(|e| at_path(path, e))
}

// ---------------------------------------------------------------------------
// Scan session
// ---------------------------------------------------------------------------

fn opt_range(d: Option<f64>) -> String {
    match d {
        Some(d) => fmt_f(d),
        None => "-".to_owned(),
    }
}

/// Render scan stations, one `STATION id Sx Sy Sz theta d_us d_oa` per line;
/// an absent modality is written as `-`.
pub fn format_scan_session(stations: &[ScanStation]) -> String {
    let mut out = String::new();
    out.push_str(SCAN_HEADER);
    out.push('\n');
    out.push_str("META units mm rad\n");
    for st in stations {
        out.push_str(&format!(
            "STATION {} {} {} {} {}\n",
            st.station_id,
            point_fields(&st.s),
            fmt_f(st.theta),
            opt_range(st.d_us),
            opt_range(st.d_oa)
        ));
    }
    out
}

pub fn parse_scan_session(text: &str) -> Result<Vec<ScanStation>, FileError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SCAN_HEADER => {}
        _ => return Err(bad(format!("line 1: expected `{SCAN_HEADER}`"))),
    }
    let mut stations = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok[0] {
            "META" => {}
            "STATION" => {
                if tok.len() != 8 {
                    return Err(bad(format!(
                        "line {line_no}: STATION takes id, Sx, Sy, Sz, theta, d_us, d_oa"
                    )));
                }
                let parse_opt = |tok: &str, what: &str| -> Result<Option<f64>, FileError> {
                    if tok == "-" {
                        Ok(None)
                    } else {
                        parse_f64(tok, line_no, what).map(Some)
                    }
                };
                stations.push(ScanStation {
                    station_id: parse_usize(tok[1], line_no, "station id")?,
                    s: Point3::new(
                        parse_f64(tok[2], line_no, "Sx")?,
                        parse_f64(tok[3], line_no, "Sy")?,
                        parse_f64(tok[4], line_no, "Sz")?,
                    ),
                    theta: parse_f64(tok[5], line_no, "theta")?,
                    d_us: parse_opt(tok[6], "d_us")?,
                    d_oa: parse_opt(tok[7], "d_oa")?,
                });
            }
            other => return Err(bad(format!("line {line_no}: unknown record `{other}`"))),
        }
    }
    Ok(stations)
}

pub fn write_scan_session(
    path: impl AsRef<Path>,
    stations: &[ScanStation],
) -> Result<(), FileError> {
    let path = path.as_ref();
    fs::write(path, format_scan_session(stations)).map_err(|e| io_err(path, e))
}

pub fn read_scan_session(path: impl AsRef<Path>) -> Result<Vec<ScanStation>, FileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_scan_session(&text).map_err(|e| at_path(path, e))
}

// ---------------------------------------------------------------------------
// Point cloud
// ---------------------------------------------------------------------------

/// Render a point cloud, one `x y z modality station_id` row per point, mm.
pub fn format_point_cloud(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for c in &cloud.points {
        out.push_str(&format!(
            "{} {} {}\n",
            point_fields(&c.p),
            c.modality.tag(),
            c.station_id
        ));
    }
    out
}

pub fn parse_point_cloud(text: &str) -> Result<PointCloud, FileError> {
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 5 {
            return Err(bad(format!(
                "line {line_no}: expected `x y z modality station_id`"
            )));
        }
        points.push(CloudPoint {
            p: Point3::new(
                parse_f64(tok[0], line_no, "x")?,
                parse_f64(tok[1], line_no, "y")?,
                parse_f64(tok[2], line_no, "z")?,
            ),
            modality: Modality::from_tag(tok[3])
                .ok_or_else(|| bad(format!("line {line_no}: unknown modality `{}`", tok[3])))?,
            station_id: parse_usize(tok[4], line_no, "station id")?,
        });
    }
    Ok(PointCloud { points })
}

pub fn write_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<(), FileError> {
    let path = path.as_ref();
    fs::write(path, format_point_cloud(cloud)).map_err(|e| io_err(path, e))
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud, FileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_point_cloud(&text).map_err(|e| at_path(path, e))
}

// ---------------------------------------------------------------------------
// Dataset manifest and confusion matrix
// ---------------------------------------------------------------------------

/// Render a labeled-dataset manifest: a `path,label` header and one
/// `path,label` row per series.
pub fn format_dataset_manifest(entries: &[(String, String)]) -> Result<String, FileError> {
    let mut out = String::from("path,label\n");
    for (path, label) in entries {
        for (field, what) in [(path, "path"), (label, "label")] {
            if field.contains(',') || field.contains('\n') {
                return Err(bad(format!(
                    "manifest {what} `{field}` contains a comma or newline"
                )));
            }
        }
        out.push_str(path);
        out.push(',');
        out.push_str(label);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_dataset_manifest(text: &str) -> Result<Vec<(String, String)>, FileError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "path,label" => {}
        _ => return Err(bad("line 1: expected header `path,label`")),
    }
    let mut entries = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (path, label) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("line {}: expected `path,label`", idx + 1)))?;
        entries.push((path.to_owned(), label.to_owned()));
    }
    Ok(entries)
}

pub fn write_dataset_manifest(
    path: impl AsRef<Path>,
    entries: &[(String, String)],
) -> Result<(), FileError> {
    let path = path.as_ref();
    let text = format_dataset_manifest(entries).map_err(|e| at_path(path, e))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_dataset_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, String)>, FileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_dataset_manifest(&text).map_err(|e| at_path(path, e))
}

/// Read every series a manifest lists (binary waveform containers), with
/// relative paths resolved against the manifest's directory.
pub fn load_labeled_dataset(
    manifest: impl AsRef<Path>,
) -> Result<Vec<(Waveform, String)>, FileError> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (rel, label) in read_dataset_manifest(manifest)? {
        let p = base.join(&rel);
        out.push((read_waveform_bin(&p)?, label));
    }
    Ok(out)
}

/// Render a confusion matrix as CSV: a label header row, one count row per
/// true label (its label in the first column), then a mean-accuracy footer
/// and the trial count.
pub fn format_confusion_csv(m: &ConfusionMatrix) -> Result<String, FileError> {
    for l in &m.labels {
        if l.contains(',') || l.contains('\n') {
            return Err(bad(format!("label `{l}` contains a comma or newline")));
        }
    }
    let mut out = String::from("label");
    for l in &m.labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (l, row) in m.labels.iter().zip(&m.counts) {
        out.push_str(l);
        for &c in row {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out.push_str(&format!("mean_accuracy,{}\n", fmt_f(m.accuracy())));
    out.push_str(&format!("trials,{}\n", m.trial_count));
    Ok(out)
}

pub fn parse_confusion_csv(text: &str) -> Result<ConfusionMatrix, FileError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let labels: Vec<String> = match lines.next() {
        Some((_, h)) if h.starts_with("label,") => {
            h.trim().split(',').skip(1).map(str::to_owned).collect()
        }
        _ => return Err(bad("line 1: expected a `label,...` header")),
    };
    let mut counts = Vec::new();
    let mut trial_count = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let tok: Vec<&str> = line.trim().split(',').collect();
        match tok[0] {
            "mean_accuracy" => {} // derived; recomputed from the counts
            "trials" => {
                if tok.len() != 2 {
                    return Err(bad(format!("line {line_no}: `trials` takes one value")));
                }
                trial_count = Some(
                    tok[1]
                        .parse()
                        .map_err(|_| bad(format!("line {line_no}: bad trial count `{}`", tok[1])))?,
                );
            }
            l => {
                let row_i = counts.len();
                if row_i >= labels.len() || l != labels[row_i] {
                    return Err(bad(format!("line {line_no}: unexpected row label `{l}`")));
                }
                if tok.len() != labels.len() + 1 {
                    return Err(bad(format!(
                        "line {line_no}: expected {} counts",
                        labels.len()
                    )));
                }
                let row: Result<Vec<u64>, FileError> = tok[1..]
                    .iter()
                    .map(|t| {
                        t.parse()
                            .map_err(|_| bad(format!("line {line_no}: bad count `{t}`")))
                    })
                    .collect();
                counts.push(row?);
            }
        }
    }
    if counts.len() != labels.len() {
        return Err(bad(format!(
            "{} count rows for {} labels",
            counts.len(),
            labels.len()
        )));
    }
    Ok(ConfusionMatrix {
        labels,
        counts,
        trial_count: trial_count.ok_or_else(|| bad("missing `trials` footer"))?,
    })
}

pub fn write_confusion_csv(path: impl AsRef<Path>, m: &ConfusionMatrix) -> Result<(), FileError> {
    let path = path.as_ref();
    let text = format_confusion_csv(m).map_err(|e| at_path(path, e))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_confusion_csv(path: impl AsRef<Path>) -> Result<ConfusionMatrix, FileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_confusion_csv(&text).map_err(|e| at_path(path, e))
}

// ---------------------------------------------------------------------------
// TOML documents
// ---------------------------------------------------------------------------

fn write_toml<T: Serialize>(path: &Path, value: &T, what: &str) -> Result<(), FileError> {
    let text = toml::to_string(value)
        .map_err(|e| bad(format!("{}: cannot serialize {what}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T, FileError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| {
        bad(format!(
            "{}: not a valid {what}: {}",
            path.display(),
            // toml errors are multi-line with a caret; keep the first line so
            // CLI error output stays single-line.
            e.to_string().lines().next().unwrap_or("parse error").trim()
        ))
    })
}

pub fn write_scene(path: impl AsRef<Path>, scene: &Scene) -> Result<(), FileError> {
    write_toml(path.as_ref(), scene, "scene")
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<Scene, FileError> {
    read_toml(path.as_ref(), "scene")
}

pub fn write_session_truth(path: impl AsRef<Path>, t: &SessionTruth) -> Result<(), FileError> {
    write_toml(path.as_ref(), t, "calibration ground truth")
}

pub fn read_session_truth(path: impl AsRef<Path>) -> Result<SessionTruth, FileError> {
    read_toml(path.as_ref(), "calibration ground truth")
}

/// Scan ground truth: a TOML document with one `[[station]]` table per stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTruthDoc {
    pub station: Vec<StationTruth>,
}

pub fn write_scan_truth(path: impl AsRef<Path>, truths: &[StationTruth]) -> Result<(), FileError> {
    let doc = ScanTruthDoc {
        station: truths.to_vec(),
    };
    write_toml(path.as_ref(), &doc, "scan ground truth")
}

pub fn read_scan_truth(path: impl AsRef<Path>) -> Result<Vec<StationTruth>, FileError> {
    let doc: ScanTruthDoc = read_toml(path.as_ref(), "scan ground truth")?;
    Ok(doc.station)
}

pub fn write_calibration_state(
    path: impl AsRef<Path>,
    state: &CalibrationState,
) -> Result<(), FileError> {
    write_toml(path.as_ref(), state, "calibration state")
}

pub fn read_calibration_state(path: impl AsRef<Path>) -> Result<CalibrationState, FileError> {
    read_toml(path.as_ref(), "calibration state")
}

/// Contour-report artifact: pooled and per-face statistics, no per-point
/// assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourSummary {
    pub n_points: usize,
    pub us: ErrorStats,
    pub oa: ErrorStats,
    pub per_edge: Vec<ErrorStats>,
}

impl From<&ContourReport> for ContourSummary {
    fn from(r: &ContourReport) -> Self {
        ContourSummary {
            n_points: r.assignments.len(),
            us: r.us,
            oa: r.oa,
            per_edge: r.per_edge.clone(),
        }
    }
}

pub fn write_contour_summary(path: impl AsRef<Path>, s: &ContourSummary) -> Result<(), FileError> {
    write_toml(path.as_ref(), s, "contour summary")
}

pub fn read_contour_summary(path: impl AsRef<Path>) -> Result<ContourSummary, FileError> {
    read_toml(path.as_ref(), "contour summary")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::FrameKind;
    use crate::sim;

    fn toy_waveform() -> Waveform {
        let samples: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin() * 0.83).collect();
        Waveform::new(samples, 10.0e6, 2.0e-3)
    }

    #[test]
    fn waveform_binary_round_trip_is_exact() {
        let w = toy_waveform();
        let bytes = encode_waveform(&w);
        assert_eq!(&bytes[..8], WAVE_MAGIC);
        assert_eq!(decode_waveform(&bytes).unwrap(), w);
        // Writing again produces identical bytes.
        assert_eq!(encode_waveform(&w), bytes);
    }

    #[test]
    fn waveform_binary_rejects_damage() {
        let w = toy_waveform();
        let good = encode_waveform(&w);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_waveform(&bad_magic),
            Err(FileError::Malformed(m)) if m.contains("magic")
        ));

        let truncated = &good[..good.len() - 3];
        assert!(decode_waveform(truncated).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(
            decode_waveform(&trailing),
            Err(FileError::Malformed(m)) if m.contains("trailing")
        ));
    }

    #[test]
    fn waveform_csv_round_trip_is_exact() {
        let w = toy_waveform();
        let text = format_waveform_csv(&w);
        assert!(text.starts_with("time_s,amplitude\n"));
        let back = parse_waveform_csv(&text).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn waveform_csv_rejects_bad_shapes() {
        assert!(parse_waveform_csv("amplitude,time_s\n0,1\n1,2\n").is_err());
        assert!(parse_waveform_csv("time_s,amplitude\n0,1\n").is_err());
        assert!(
            parse_waveform_csv("time_s,amplitude\n0,1\n0.1,2\n0.3,3\n").is_err(),
            "non-uniform step must be rejected"
        );
    }

    #[test]
    fn reference_pattern_round_trip_keeps_tag_and_source() {
        let r = ReferencePattern::new(
            (0..32).map(|i| ((i % 5) as f64) - 2.0).collect(),
            Modality::Oa,
            "bench scene 7, station 3".to_owned(),
        );
        let bytes = encode_reference_pattern(&r);
        let back = decode_reference_pattern(&bytes).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn range_model_document_round_trips() {
        let m = RangeModel {
            modality: Modality::Us,
            beta2: -5.1234e7,
            beta1: 171623.456,
            beta0: -17.03,
            valid_tof: [7.6e-5, 1.93e-4],
            stats: FitStats {
                n_samples: 25,
                residual_rms_mm: 0.0123,
                residual_max_mm: 0.0456,
            },
        };
        let text = format_range_model(&m);
        assert_eq!(parse_range_model(&text).unwrap(), m);
    }

    #[test]
    fn range_model_document_rejects_gaps() {
        let m = RangeModel {
            modality: Modality::Oa,
            beta2: 0.0,
            beta1: 343000.0,
            beta0: -17.0,
            valid_tof: [4.0e-5, 1.2e-4],
            stats: FitStats {
                n_samples: 10,
                residual_rms_mm: 0.0,
                residual_max_mm: 0.0,
            },
        };
        let text = format_range_model(&m);
        let crippled = text.lines().filter(|l| !l.starts_with("beta1")).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            parse_range_model(&crippled),
            Err(FileError::Malformed(msg)) if msg.contains("beta1")
        ));
    }

    #[test]
    fn bench_calibration_session_round_trips() {
        let scene = sim::Scene::bench(vec![], sim::NoiseSpec::bench(), 31);
        let (session, _) =
            sim::synth_calibration_session(&scene, &sim::CalibrationPlan::bench_default())
                .unwrap();
        let text = format_calibration_session(&session);
        let back = parse_calibration_session(&text).unwrap();
        assert_eq!(back, session);
        // Deterministic bytes.
        assert_eq!(format_calibration_session(&back), text);
    }

    #[test]
    fn calibration_session_preserves_empty_rows() {
        let session = CalibrationSession {
            frames: vec![RawFrame {
                frame_id: 4,
                kind: FrameKind::Edge,
                turntable_angle: 0.25,
                rows: vec![
                    vec![RawPoint {
                        s: Point3::new(1.0, 2.0, 3.0),
                        d: 9.5,
                        amplitude: 0.8,
                    }],
                    Vec::new(),
                    vec![RawPoint {
                        s: Point3::new(1.5, 2.0, 3.0),
                        d: 9.6,
                        amplitude: 0.7,
                    }],
                    Vec::new(),
                ],
            }],
            rotations: vec![RotationReading {
                frame_i: 4,
                frame_k: 4,
                theta: 0.0,
                sigma_theta: 1e-6,
            }],
        };
        let back = parse_calibration_session(&format_calibration_session(&session)).unwrap();
        assert_eq!(back, session);
    }

    #[test]
    fn calibration_session_parse_errors_name_the_line() {
        let text = format!("{CAL_HEADER}\nRAW 9 0 1 2 3 4 0.5\n");
        match parse_calibration_session(&text) {
            Err(FileError::Malformed(m)) => {
                assert!(m.contains("line 2") && m.contains("FRAME 9"), "{m}")
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
        let text = format!("{CAL_HEADER}\nFRAME 1 tip 0 1\nFRAME 1 tip 0 1\n");
        assert!(matches!(
            parse_calibration_session(&text),
            Err(FileError::Malformed(m)) if m.contains("duplicate")
        ));
    }

    #[test]
    fn scan_session_round_trips_with_missing_modalities() {
        let stations = vec![
            ScanStation {
                station_id: 0,
                s: Point3::new(230.0, 280.5, 20.0),
                theta: 0.0,
                d_us: Some(9.875),
                d_oa: Some(10.0125),
            },
            ScanStation {
                station_id: 1,
                s: Point3::new(231.0, 280.5, 20.0),
                theta: 1.5707963267948966,
                d_us: None,
                d_oa: Some(11.25),
            },
            ScanStation {
                station_id: 2,
                s: Point3::new(232.0, 280.5, 20.0),
                theta: 3.141592653589793,
                d_us: Some(8.5),
                d_oa: None,
            },
        ];
        let text = format_scan_session(&stations);
        assert_eq!(parse_scan_session(&text).unwrap(), stations);
    }

    #[test]
    fn point_cloud_rows_round_trip() {
        let cloud = PointCloud {
            points: vec![
                CloudPoint {
                    p: Point3::new(235.61, 280.17, 20.0),
                    modality: Modality::Us,
                    station_id: 3,
                },
                CloudPoint {
                    p: Point3::new(-1.0e-7, 0.0, 4.25),
                    modality: Modality::Oa,
                    station_id: 11,
                },
            ],
        };
        let text = format_point_cloud(&cloud);
        for line in text.lines() {
            assert_eq!(line.split_whitespace().count(), 5);
        }
        assert_eq!(parse_point_cloud(&text).unwrap(), cloud);
        assert_eq!(parse_point_cloud("").unwrap(), PointCloud { points: vec![] });
    }

    #[test]
    fn dataset_manifest_round_trips_and_rejects_commas() {
        let entries = vec![
            ("waves/steel_000.bin".to_owned(), "steel_bottle".to_owned()),
            ("waves/foam_001.bin".to_owned(), "black_foam".to_owned()),
        ];
        let text = format_dataset_manifest(&entries).unwrap();
        assert_eq!(parse_dataset_manifest(&text).unwrap(), entries);
        assert!(format_dataset_manifest(&[("a,b".to_owned(), "c".to_owned())]).is_err());
    }

    #[test]
    fn confusion_csv_round_trips() {
        let m = ConfusionMatrix {
            labels: vec!["steel".into(), "glass".into(), "foam".into()],
            counts: vec![vec![48, 2, 0], vec![1, 49, 0], vec![0, 0, 50]],
            trial_count: 50,
        };
        let text = format_confusion_csv(&m).unwrap();
        assert!(text.contains("mean_accuracy,0.98\n"), "{text}");
        assert_eq!(parse_confusion_csv(&text).unwrap(), m);
    }

    #[test]
    fn scene_toml_round_trips() {
        let (scene, _, _) = sim::aluminum_block_scene(sim::NoiseSpec::bench(), 77);
        let text = toml::to_string(&scene).unwrap();
        let back: Scene = toml::from_str(&text).unwrap();
        assert_eq!(back, scene);
    }

    #[test]
    fn truth_sidecars_round_trip() {
        let scene = sim::Scene::bench(vec![], sim::NoiseSpec::quiet(), 5);
        let (_, truth) =
            sim::synth_calibration_session(&scene, &sim::CalibrationPlan::bench_default())
                .unwrap();
        let text = toml::to_string(&truth).unwrap();
        let back: SessionTruth = toml::from_str(&text).unwrap();
        assert_eq!(back, truth);

        let (block, center, half_xy) = sim::aluminum_block_scene(sim::NoiseSpec::quiet(), 5);
        let path = sim::four_face_scan_path(&block, center, half_xy, 2, 10.0);
        let (_, truths) = sim::synth_object_scan(&block, &path, sim::ScanMode::DirectRange);
        let doc = ScanTruthDoc { station: truths.clone() };
        let back: ScanTruthDoc = toml::from_str(&toml::to_string(&doc).unwrap()).unwrap();
        assert_eq!(back.station, truths);
    }

    #[test]
    fn calibration_state_toml_round_trips() {
        let scene = sim::Scene::bench(vec![], sim::NoiseSpec::quiet(), 1);
        let state =
            CalibrationState::from_closed_form(scene.v_true, scene.n_true, scene.x_r_true);
        let text = toml::to_string(&state).unwrap();
        let back: CalibrationState = toml::from_str(&text).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn contour_summary_toml_round_trips() {
        let s = ContourSummary {
            n_points: 128,
            us: ErrorStats {
                n: 64,
                mean_mm: 0.15,
                std_mm: 0.11,
                max_mm: 0.4,
            },
            oa: ErrorStats {
                n: 64,
                mean_mm: 0.06,
                std_mm: 0.06,
                max_mm: 0.2,
            },
            per_edge: vec![
                ErrorStats {
                    n: 32,
                    mean_mm: 0.1,
                    std_mm: 0.05,
                    max_mm: 0.2,
                },
                ErrorStats {
                    n: 96,
                    mean_mm: 0.12,
                    std_mm: 0.08,
                    max_mm: 0.4,
                },
            ],
        };
        let text = toml::to_string(&s).unwrap();
        let back: ContourSummary = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn labeled_dataset_loads_relative_to_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let w0 = toy_waveform();
        let mut w1 = toy_waveform();
        w1.samples.reverse();
        fs::create_dir(dir.path().join("waves")).unwrap();
        write_waveform_bin(dir.path().join("waves/a.bin"), &w0).unwrap();
        write_waveform_bin(dir.path().join("waves/b.bin"), &w1).unwrap();
        let manifest = dir.path().join("set.csv");
        write_dataset_manifest(
            &manifest,
            &[
                ("waves/a.bin".to_owned(), "first".to_owned()),
                ("waves/b.bin".to_owned(), "second".to_owned()),
            ],
        )
        .unwrap();
        let loaded = load_labeled_dataset(&manifest).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0], (w0, "first".to_owned()));
        assert_eq!(loaded[1], (w1, "second".to_owned()));
    }

    #[test]
    fn path_errors_carry_the_path() {
        let e = read_waveform_bin("/no/such/file.bin").unwrap_err();
        assert!(e.to_string().contains("/no/such/file.bin"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.bin");
        fs::write(&p, b"not a container").unwrap();
        let e = read_waveform_bin(&p).unwrap_err();
        assert!(e.to_string().contains("junk.bin"), "{e}");
    }
}
