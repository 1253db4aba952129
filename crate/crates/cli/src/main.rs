//! `pdm2` — batch front end for the dual-modality pre-touch toolkit.
//!
//! Every subcommand reads and writes the artifact formats owned by
//! `pdm2-core::io`, prints a short human summary to stdout, and reports
//! failures as a single `error[<tag>]: <message>` line on stderr. Exit codes:
//! 0 ok, 2 bad arguments, 3 I/O, 4 degenerate data, 5 non-convergence,
//! 6 low confidence. Given the same inputs and `--seed`, every invocation
//! produces byte-identical artifacts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pdm2_core::boss;
use pdm2_core::calib::{
    calibrate_beam, calibrate_turntable, refine_mle, CalibError, CalibrationState, FrameKind,
};
use pdm2_core::config::{self, ConfigError, Pdm2Config};
use pdm2_core::geometry::{make_edge, Edge, Point3};
use pdm2_core::io::{self, FileError};
use pdm2_core::reconstruct::{contour_error, reconstruct, ReconstructError, ScanStation};
use pdm2_core::rectify::{fit_range_model, rectify, RectifyError};
use pdm2_core::sim::{self, CalibrationPlan, NoiseSpec, ScanMode, Scene};
use pdm2_core::tof::{estimate_tof_oa_with_threshold, estimate_tof_us_with_threshold, TofError};
use pdm2_core::{Modality, RangeSample, ReferencePattern, SearchWindow, Waveform};

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

/// CLI-level error: a tag that maps onto the exit code, plus one line of
/// detail. The Display form is the machine-parsable stderr line.
#[derive(Debug)]
enum CliError {
    BadArgs(String),
    Io(String),
    Degenerate(String),
    NonConvergence(String),
    LowConfidence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::BadArgs(_) => 2,
            CliError::Io(_) => 3,
            CliError::Degenerate(_) => 4,
            CliError::NonConvergence(_) => 5,
            CliError::LowConfidence(_) => 6,
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            CliError::BadArgs(_) => "bad-args",
            CliError::Io(_) => "io",
            CliError::Degenerate(_) => "degenerate-data",
            CliError::NonConvergence(_) => "non-convergence",
            CliError::LowConfidence(_) => "low-confidence",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            CliError::BadArgs(m)
            | CliError::Io(m)
            | CliError::Degenerate(m)
            | CliError::NonConvergence(m)
            | CliError::LowConfidence(m) => m,
        };
        write!(f, "error[{}]: {}", self.tag(), one_line(msg))
    }
}

/// Collapse a possibly multi-line message (TOML parse errors with carets,
/// …) into its first non-empty line, so stderr stays machine-parsable.
fn one_line(s: &str) -> String {
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string()
}

impl From<FileError> for CliError {
    fn from(e: FileError) -> Self {
        match e {
            FileError::Io { .. } => CliError::Io(e.to_string()),
            FileError::Malformed(_) => CliError::Degenerate(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            ConfigError::Parse { .. } | ConfigError::Invalid(_) => {
                CliError::BadArgs(e.to_string())
            }
        }
    }
}

impl From<TofError> for CliError {
    fn from(e: TofError) -> Self {
        match e {
            TofError::LowConfidence { .. } => CliError::LowConfidence(e.to_string()),
            _ => CliError::Degenerate(e.to_string()),
        }
    }
}

impl From<CalibError> for CliError {
    fn from(e: CalibError) -> Self {
        CliError::Degenerate(e.to_string())
    }
}

impl From<RectifyError> for CliError {
    fn from(e: RectifyError) -> Self {
        CliError::Degenerate(e.to_string())
    }
}

impl From<boss::BossError> for CliError {
    fn from(e: boss::BossError) -> Self {
        CliError::Degenerate(e.to_string())
    }
}

impl From<sim::SimError> for CliError {
    fn from(e: sim::SimError) -> Self {
        CliError::Degenerate(e.to_string())
    }
}

impl From<ReconstructError> for CliError {
    fn from(e: ReconstructError) -> Self {
        CliError::Degenerate(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Command-line grammar
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "pdm2",
    version,
    about = "Dual-modality pre-touch sensing toolkit",
    propagate_version = true
)]
struct Cli {
    /// Configuration file (overrides the PDM2_CONFIG env var and ./pdm2.toml).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic bench artifacts (seeded).
    Bench(BenchCmd),
    /// Cut a correlation template out of a recorded waveform.
    ExtractRef(ExtractRefCmd),
    /// Estimate per-modality times of flight for one waveform.
    Tof(TofCmd),
    /// Fit the time-of-flight → distance rectification model from samples.
    FitRange(FitRangeCmd),
    /// Recover beam direction and turntable geometry from a session.
    Calibrate(CalibrateCmd),
    /// Evaluate the spectral material classifier on a labeled dataset.
    Classify(ClassifyCmd),
    /// Drive the synthetic bench across the reference block (seeded).
    Scan(ScanCmd),
    /// Turn a range session into an object-frame point cloud.
    Reconstruct(ReconstructCmd),
    /// Emit plot-ready CSV series from existing artifacts.
    Report(ReportCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Us,
    Oa,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Modality {
        match m {
            ModalityArg::Us => Modality::Us,
            ModalityArg::Oa => Modality::Oa,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    /// No noise anywhere; exact geometry.
    Quiet,
    /// Reference-rig noise: 0.05 mm stage and range, 0.1° encoder.
    Bench,
}

impl From<NoiseArg> for NoiseSpec {
    fn from(n: NoiseArg) -> NoiseSpec {
        match n {
            NoiseArg::Quiet => NoiseSpec::quiet(),
            NoiseArg::Bench => NoiseSpec::bench(),
        }
    }
}

#[derive(Args)]
struct BenchCmd {
    #[command(subcommand)]
    kind: BenchKind,
}

#[derive(Subcommand)]
enum BenchKind {
    /// Synthesize a calibration session plus its ground-truth sidecar.
    Calibration {
        /// RNG seed; identical seeds reproduce identical files.
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = NoiseArg::Bench)]
        noise: NoiseArg,
        /// Output session file.
        #[arg(long, value_name = "PATH")]
        session: PathBuf,
        /// Output truth sidecar (TOML).
        #[arg(long, value_name = "PATH")]
        truth: PathBuf,
    },
    /// Synthesize one dual-modality station record.
    Station {
        #[arg(long)]
        seed: u64,
        /// Beam-line range to the reflector, mm.
        #[arg(long)]
        distance: f64,
        /// Signal-to-noise ratio in dB; omit for a clean record.
        #[arg(long)]
        snr_db: Option<f64>,
        /// Apply the systematic mid-range ranging bias.
        #[arg(long)]
        biased: bool,
        /// Output waveform (.csv for text, anything else binary).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Run the ranging chain over biased records and emit fit samples.
    Ranging {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        modality: ModalityArg,
        /// Number of stations across the 6.5–16.5 mm span.
        #[arg(long, default_value_t = 25)]
        stations: usize,
        #[arg(long)]
        snr_db: Option<f64>,
        /// Output samples CSV (tof_s,true_mm,sigma_mm).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Synthesize a labeled spectral dataset for the classifier.
    Dataset {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        classes: ClassSetArg,
        #[arg(long, default_value_t = 16)]
        per_class: usize,
        /// Directory for the per-sample spectra.
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
        /// Output manifest CSV (path,label).
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassSetArg {
    /// Five everyday household materials.
    Five,
    /// Eight single-modality challenged targets.
    Eight,
}

#[derive(Args)]
struct ExtractRefCmd {
    /// Input waveform (.csv text or binary).
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    #[arg(long, value_enum)]
    modality: ModalityArg,
    /// Search window start, µs after the trigger (default from config).
    #[arg(long)]
    from_us: Option<f64>,
    /// Search window end, µs after the trigger (default from config).
    #[arg(long)]
    to_us: Option<f64>,
    /// Template length in samples (default from config).
    #[arg(long)]
    pattern_len: Option<usize>,
    /// Free-form provenance string stored in the pattern file.
    #[arg(long)]
    source_id: Option<String>,
    /// Output reference pattern (binary).
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct TofCmd {
    /// Input waveform (.csv text or binary).
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Pulse-echo reference pattern.
    #[arg(long, value_name = "PATH")]
    ref_us: Option<PathBuf>,
    /// Optoacoustic reference pattern.
    #[arg(long, value_name = "PATH")]
    ref_oa: Option<PathBuf>,
    /// Normalized-correlation confidence threshold (default from config).
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct FitRangeCmd {
    /// Samples CSV: header tof_s,true_mm[,sigma_mm].
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    #[arg(long, value_enum)]
    modality: ModalityArg,
    /// Output range model file.
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
}

#[derive(Args)]
struct CalibrateCmd {
    /// Input calibration session.
    #[arg(long, value_name = "PATH")]
    session: PathBuf,
    /// Output calibration state (TOML).
    #[arg(long, value_name = "PATH")]
    state: PathBuf,
    /// Stop after the closed-form solve, skipping refinement.
    #[arg(long)]
    no_refine: bool,
}

#[derive(Args)]
struct ClassifyCmd {
    /// Dataset manifest CSV (path,label), paths relative to the manifest.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    #[arg(long, default_value_t = 50)]
    trials: u32,
    /// Training fraction per trial.
    #[arg(long, default_value_t = 0.75)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output confusion matrix CSV.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct ScanCmd {
    /// RNG seed; identical seeds reproduce identical files.
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = NoiseArg::Bench)]
    noise: NoiseArg,
    /// Stations per block face.
    #[arg(long, default_value_t = 12)]
    stations_per_face: usize,
    /// Stage standoff from the aim point along the beam, mm.
    #[arg(long, default_value_t = 11.0)]
    standoff: f64,
    /// Output scan session.
    #[arg(long, value_name = "PATH")]
    session: PathBuf,
    /// Output truth sidecar (TOML).
    #[arg(long, value_name = "PATH")]
    truth: PathBuf,
    /// Calibration state; when given the scan is reconstructed immediately.
    #[arg(long, value_name = "PATH", requires = "cloud")]
    calib: Option<PathBuf>,
    /// Output point cloud (requires --calib).
    #[arg(long, value_name = "PATH", requires = "calib")]
    cloud: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructCmd {
    /// Input scan session.
    #[arg(long, value_name = "PATH")]
    session: PathBuf,
    /// Calibration state (TOML).
    #[arg(long, value_name = "PATH")]
    calib: PathBuf,
    /// Output point cloud.
    #[arg(long, value_name = "PATH")]
    cloud: PathBuf,
    /// Scan truth sidecar; enables the contour summary.
    #[arg(long, value_name = "PATH", requires = "contour")]
    truth: Option<PathBuf>,
    /// Output contour summary (TOML, requires --truth).
    #[arg(long, value_name = "PATH", requires = "truth")]
    contour: Option<PathBuf>,
}

#[derive(Args)]
struct ReportCmd {
    #[command(subcommand)]
    kind: ReportKind,
}

#[derive(Subcommand)]
enum ReportKind {
    /// Deviation-vs-distance series for a fitted range model.
    Ranging {
        /// Range model file.
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Samples CSV the model was fitted on (tof_s,true_mm[,sigma_mm]).
        #[arg(long, value_name = "PATH")]
        samples: PathBuf,
        /// Output CSV series.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Per-point contour errors of a reconstructed cloud.
    Contour {
        /// Point cloud file.
        #[arg(long, value_name = "PATH")]
        cloud: PathBuf,
        /// Scan truth sidecar (TOML).
        #[arg(long, value_name = "PATH")]
        truth: PathBuf,
        /// Output CSV series.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Read a waveform, choosing text or binary by file extension.
fn read_waveform(path: &Path) -> Result<Waveform, CliError> {
    if path.extension().is_some_and(|e| e == "csv") {
        Ok(io::read_waveform_csv(path)?)
    } else {
        Ok(io::read_waveform_bin(path)?)
    }
}

/// Write a waveform, choosing text or binary by file extension.
fn write_waveform(path: &Path, w: &Waveform) -> Result<(), CliError> {
    if path.extension().is_some_and(|e| e == "csv") {
        io::write_waveform_csv(path, w)?;
    } else {
        io::write_waveform_bin(path, w)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Parse a ranging-samples CSV: header `tof_s,true_mm` with an optional
/// third `sigma_mm` column; rows missing the sigma get `fallback_sigma`.
fn parse_samples_csv(text: &str, fallback_sigma: f64) -> Result<Vec<RangeSample>, CliError> {
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .map(|(_, l)| l.trim())
        .ok_or_else(|| CliError::Degenerate("samples file is empty".into()))?;
    if header != "tof_s,true_mm,sigma_mm" && header != "tof_s,true_mm" {
        return Err(CliError::Degenerate(format!(
            "samples header must be `tof_s,true_mm[,sigma_mm]`, got `{header}`"
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 2 && cols.len() != 3 {
            return Err(CliError::Degenerate(format!(
                "samples line {}: expected 2 or 3 columns, got {}",
                i + 1,
                cols.len()
            )));
        }
        let num = |s: &str, what: &str| -> Result<f64, CliError> {
            s.trim().parse::<f64>().map_err(|_| {
                CliError::Degenerate(format!("samples line {}: bad {what} `{s}`", i + 1))
            })
        };
        let tof_s = num(cols[0], "tof_s")?;
        let true_mm = num(cols[1], "true_mm")?;
        let sigma = match cols.get(2) {
            Some(c) if !c.trim().is_empty() => num(c, "sigma_mm")?,
            _ => fallback_sigma,
        };
        out.push(RangeSample::new(tof_s, true_mm, sigma));
    }
    Ok(out)
}

fn format_samples_csv(samples: &[RangeSample]) -> String {
    let mut s = String::from("tof_s,true_mm,sigma_mm\n");
    for r in samples {
        s.push_str(&format!("{},{},{}\n", r.tof_s, r.true_mm, r.sigma_mm));
    }
    s
}

/// Clean reference patterns for the ranging chain, cut from a noise-free
/// record whose burst centers fall exactly on a sample.
fn internal_references() -> Result<(ReferencePattern, ReferencePattern), CliError> {
    let d_ref = 343.0 * 816.0 / 1e4 - 17.0;
    let clean = sim::synth_station_waveform(d_ref, 0.0, 0);
    let r_oa = pdm2_core::tof::extract_reference(
        &clean,
        Modality::Oa,
        40e-6,
        120e-6,
        128,
        "internal clean bench record, oa",
    )?;
    let r_us = pdm2_core::tof::extract_reference(
        &clean,
        Modality::Us,
        120e-6,
        200e-6,
        128,
        "internal clean bench record, us",
    )?;
    Ok((r_us, r_oa))
}

/// Group truth stations into per-face point sets by their commanded
/// turntable angle and fit one edge per face.
fn truth_edges(truths: &[sim::StationTruth]) -> Result<Vec<Edge>, CliError> {
    let mut groups: Vec<(u64, Vec<Point3>)> = Vec::new();
    for t in truths {
        let Some(p) = t.hit_object else { continue };
        let key = t.theta.to_bits();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push(p),
            None => groups.push((key, vec![p])),
        }
    }
    if groups.is_empty() {
        return Err(CliError::Degenerate(
            "truth sidecar contains no hit points to build contour edges from".into(),
        ));
    }
    let mut edges = Vec::new();
    for (_, pts) in &groups {
        if pts.len() < 2 {
            return Err(CliError::Degenerate(format!(
                "a truth face has only {} hit point(s); need at least 2 for an edge",
                pts.len()
            )));
        }
        edges.push(make_edge(pts).map_err(|e| CliError::Degenerate(e.to_string()))?);
    }
    Ok(edges)
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

fn run_bench(cmd: BenchCmd, cfg: &Pdm2Config) -> Result<(), CliError> {
    match cmd.kind {
        BenchKind::Calibration { seed, noise, session, truth } => {
            let scene = Scene::bench(Vec::new(), noise.into(), seed);
            let (s, t) = sim::synth_calibration_session(&scene, &CalibrationPlan::bench_default())?;
            io::write_calibration_session(&session, &s)?;
            io::write_session_truth(&truth, &t)?;
            println!(
                "calibration session: {} frames, {} rotation readings -> {}",
                s.frames.len(),
                s.rotations.len(),
                session.display()
            );
        }
        BenchKind::Station { seed, distance, snr_db, biased, out } => {
            if !(distance > 0.0) {
                return Err(CliError::BadArgs(format!(
                    "--distance must be positive, got {distance}"
                )));
            }
            let sigma = snr_db.map_or(0.0, |db| sim::sigma_for_snr_db(1.0, db));
            let w = if biased {
                sim::synth_biased_ranging_waveform(distance, sigma, seed)
            } else {
                sim::synth_station_waveform(distance, sigma, seed)
            };
            write_waveform(&out, &w)?;
            println!(
                "station record: d {distance} mm, {} samples at {} Hz -> {}",
                w.len(),
                w.sample_rate,
                out.display()
            );
        }
        BenchKind::Ranging { seed, modality, stations, snr_db, out } => {
            if stations < 3 {
                return Err(CliError::BadArgs(format!(
                    "--stations must be at least 3, got {stations}"
                )));
            }
            let modality: Modality = modality.into();
            let sigma = snr_db.map_or(0.0, |db| sim::sigma_for_snr_db(1.0, db));
            let (r_us, r_oa) = internal_references()?;
            let (oa_lo, oa_hi) = cfg.tof.oa_window_s();
            let (us_lo, us_hi) = cfg.tof.us_window_s();
            let mut samples = Vec::with_capacity(stations);
            for i in 0..stations {
                let d = 6.5 + 10.0 * i as f64 / (stations - 1) as f64;
                let w = sim::synth_biased_ranging_waveform(d, sigma, seed ^ (i as u64) << 17);
                let est = match modality {
                    Modality::Us => estimate_tof_us_with_threshold(
                        &w,
                        &r_us,
                        &SearchWindow::from_times(&w, us_lo, us_hi),
                        cfg.tof.min_peak_corr,
                    )?,
                    Modality::Oa => estimate_tof_oa_with_threshold(
                        &w,
                        &r_oa,
                        &SearchWindow::from_times(&w, oa_lo, oa_hi),
                        cfg.tof.min_peak_corr,
                    )?,
                };
                samples.push(RangeSample::new(est.tof_s, d, cfg.ranging.fallback_sigma_mm));
            }
            write_text(&out, &format_samples_csv(&samples))?;
            println!(
                "{modality} ranging samples: {stations} stations across 6.5–16.5 mm -> {}",
                out.display()
            );
        }
        BenchKind::Dataset { seed, classes, per_class, dir, manifest } => {
            if per_class == 0 {
                return Err(CliError::BadArgs("--per-class must be at least 1".into()));
            }
            let classes = match classes {
                ClassSetArg::Five => sim::household_classes(),
                ClassSetArg::Eight => sim::single_modality_classes(),
            };
            let data = sim::synth_class_dataset(&classes, per_class, seed);
            std::fs::create_dir_all(&dir)
                .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            let mut entries = Vec::with_capacity(data.len());
            for (i, (w, label)) in data.iter().enumerate() {
                let name = format!("{label}_{:03}.bin", i % per_class);
                io::write_waveform_bin(dir.join(&name), w)?;
                entries.push((name, label.clone()));
            }
            // Manifest paths are relative to the manifest file itself.
            let manifest_dir = manifest.parent().unwrap_or(Path::new(""));
            let rel = dir.strip_prefix(manifest_dir).unwrap_or(&dir);
            let entries: Vec<(String, String)> = entries
                .into_iter()
                .map(|(name, label)| (rel.join(name).to_string_lossy().into_owned(), label))
                .collect();
            io::write_dataset_manifest(&manifest, &entries)?;
            println!(
                "dataset: {} classes × {per_class} samples -> {}",
                classes.len(),
                manifest.display()
            );
        }
    }
    Ok(())
}

fn run_extract_ref(cmd: ExtractRefCmd, cfg: &Pdm2Config) -> Result<(), CliError> {
    let modality: Modality = cmd.modality.into();
    let w = read_waveform(&cmd.input)?;
    let (def_lo, def_hi) = match modality {
        Modality::Us => cfg.tof.us_window_s(),
        Modality::Oa => cfg.tof.oa_window_s(),
    };
    let from_s = cmd.from_us.map_or(def_lo, |us| us * 1e-6);
    let to_s = cmd.to_us.map_or(def_hi, |us| us * 1e-6);
    if !(to_s > from_s) {
        return Err(CliError::BadArgs(format!(
            "window end ({} µs) must exceed its start ({} µs)",
            to_s * 1e6,
            from_s * 1e6
        )));
    }
    let pattern_len = cmd.pattern_len.unwrap_or(cfg.tof.pattern_len);
    let source_id = cmd
        .source_id
        .unwrap_or_else(|| cmd.input.file_name().unwrap_or_default().to_string_lossy().into_owned());
    let r = pdm2_core::tof::extract_reference(&w, modality, from_s, to_s, pattern_len, source_id)?;
    io::write_reference_pattern(&cmd.out, &r)?;
    println!(
        "{modality} reference: {} samples from {} -> {}",
        r.samples.len(),
        cmd.input.display(),
        cmd.out.display()
    );
    Ok(())
}

fn run_tof(cmd: TofCmd, cfg: &Pdm2Config) -> Result<(), CliError> {
    if cmd.ref_us.is_none() && cmd.ref_oa.is_none() {
        return Err(CliError::BadArgs(
            "at least one of --ref-us / --ref-oa is required".into(),
        ));
    }
    let w = read_waveform(&cmd.input)?;
    let threshold = cmd.threshold.unwrap_or(cfg.tof.min_peak_corr);
    let mut confident = 0usize;
    let mut requested = 0usize;

    let mut run_one = |modality: Modality, path: &Path| -> Result<(), CliError> {
        requested += 1;
        let r = io::read_reference_pattern(path)?;
        let (lo, hi) = match modality {
            Modality::Us => cfg.tof.us_window_s(),
            Modality::Oa => cfg.tof.oa_window_s(),
        };
        let win = SearchWindow::from_times(&w, lo, hi);
        let est = match modality {
            Modality::Us => estimate_tof_us_with_threshold(&w, &r, &win, threshold),
            Modality::Oa => estimate_tof_oa_with_threshold(&w, &r, &win, threshold),
        };
        match est {
            Ok(est) => {
                confident += 1;
                println!(
                    "{modality} tof_us {:.4} peak_corr {:.6} norm_corr {:.6}",
                    est.tof_s * 1e6,
                    est.peak_corr,
                    est.norm_corr
                );
                Ok(())
            }
            Err(TofError::LowConfidence { norm_corr, threshold, .. }) => {
                println!("{modality} low-confidence norm_corr {norm_corr:.6} threshold {threshold}");
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    };

    if let Some(path) = cmd.ref_us.clone() {
        run_one(Modality::Us, &path)?;
    }
    if let Some(path) = cmd.ref_oa.clone() {
        run_one(Modality::Oa, &path)?;
    }
    if confident == 0 {
        return Err(CliError::LowConfidence(format!(
            "no confident arrival in any of the {requested} requested modalit{}",
            if requested == 1 { "y" } else { "ies" }
        )));
    }
    Ok(())
}

fn run_fit_range(cmd: FitRangeCmd, cfg: &Pdm2Config) -> Result<(), CliError> {
    let modality: Modality = cmd.modality.into();
    let samples = parse_samples_csv(&read_text(&cmd.input)?, cfg.ranging.fallback_sigma_mm)?;
    let model = fit_range_model(&samples, modality)?;
    io::write_range_model(&cmd.model, &model)?;
    println!(
        "{modality} range model: residual rms {:.4} mm, max {:.4} mm over {} samples -> {}",
        model.stats.residual_rms_mm,
        model.stats.residual_max_mm,
        model.stats.n_samples,
        cmd.model.display()
    );
    Ok(())
}

fn run_calibrate(cmd: CalibrateCmd, cfg: &Pdm2Config) -> Result<(), CliError> {
    let session = io::read_calibration_session(&cmd.session)?;
    let scans = session.extract(cfg.calib.threshold_frac, cfg.calib.sigma_floor_mm2)?;
    let v0 = calibrate_beam(&scans)?;
    let (n0, x0) = calibrate_turntable(&scans, &session.rotations, &v0)?;
    let state = if cmd.no_refine {
        CalibrationState::from_closed_form(v0, n0, x0)
    } else {
        let (tips, edges): (Vec<_>, Vec<_>) =
            scans.iter().cloned().partition(|f| f.kind == FrameKind::Tip);
        let seed = CalibrationState::from_closed_form(v0, n0, x0);
        refine_mle(&seed, &tips, &edges, &session.rotations)?
    };

    io::write_calibration_state(&cmd.state, &state)?;
    let row = |name: &str, x: f64, y: f64, z: f64| {
        println!("  {name:<8} {x:>12.6} {y:>12.6} {z:>12.6}");
    };
    println!("calibration ({} frames):", session.frames.len());
    row("v", state.v.x, state.v.y, state.v.z);
    row("n", state.n.x, state.n.y, state.n.z);
    row("X_R mm", state.x_r.x, state.x_r.y, state.x_r.z);
    println!("  residual rms {:.6}", state.residual_rms);
    println!(
        "  iterations {} ({})",
        state.iterations,
        if state.converged { "converged" } else { "not converged" }
    );
    if !state.converged {
        return Err(CliError::NonConvergence(format!(
            "refinement still moving after {} iterations (state written to {})",
            state.iterations,
            cmd.state.display()
        )));
    }
    Ok(())
}

fn run_classify(cmd: ClassifyCmd, cfg: &Pdm2Config) -> Result<(), CliError> {
    if !(cmd.split > 0.0 && cmd.split < 1.0) {
        return Err(CliError::BadArgs(format!(
            "--split must lie strictly between 0 and 1, got {}",
            cmd.split
        )));
    }
    if cmd.trials == 0 {
        return Err(CliError::BadArgs("--trials must be at least 1".into()));
    }
    let dataset = io::load_labeled_dataset(&cmd.manifest)?;
    let Some((first, _)) = dataset.first() else {
        return Err(CliError::Degenerate("dataset manifest lists no samples".into()));
    };
    let params = cfg.boss_params(first.len());
    let m = boss::evaluate(&dataset, &params, cmd.trials, cmd.split, cmd.seed)?;
    io::write_confusion_csv(&cmd.out, &m)?;
    println!(
        "classification: {} classes, {} samples, mean accuracy {:.2}% over {} trials -> {}",
        m.labels.len(),
        dataset.len(),
        100.0 * m.accuracy(),
        cmd.trials,
        cmd.out.display()
    );
    Ok(())
}

fn run_scan(cmd: ScanCmd) -> Result<(), CliError> {
    if cmd.stations_per_face < 2 {
        return Err(CliError::BadArgs(format!(
            "--stations-per-face must be at least 2, got {}",
            cmd.stations_per_face
        )));
    }
    if !(cmd.standoff > 0.0) {
        return Err(CliError::BadArgs(format!(
            "--standoff must be positive, got {}",
            cmd.standoff
        )));
    }
    let (scene, center, half_xy) = sim::aluminum_block_scene(cmd.noise.into(), cmd.seed);
    let path = sim::four_face_scan_path(&scene, center, half_xy, cmd.stations_per_face, cmd.standoff);
    let (stations, truths) = sim::synth_object_scan(&scene, &path, ScanMode::DirectRange);
    let session: Vec<ScanStation> = stations
        .iter()
        .map(|st| ScanStation {
            station_id: st.station_id,
            s: st.s,
            theta: st.theta,
            d_us: st.d_us,
            d_oa: st.d_oa,
        })
        .collect();
    io::write_scan_session(&cmd.session, &session)?;
    io::write_scan_truth(&cmd.truth, &truths)?;
    println!(
        "scan session: {} stations on 4 faces -> {}",
        session.len(),
        cmd.session.display()
    );
    if let (Some(calib), Some(cloud_path)) = (cmd.calib, cmd.cloud) {
        let state = io::read_calibration_state(&calib)?;
        let cloud = reconstruct(&session, &state)?;
        io::write_point_cloud(&cloud_path, &cloud)?;
        println!("point cloud: {} points -> {}", cloud.len(), cloud_path.display());
    }
    Ok(())
}

fn run_reconstruct(cmd: ReconstructCmd) -> Result<(), CliError> {
    let session = io::read_scan_session(&cmd.session)?;
    let state = io::read_calibration_state(&cmd.calib)?;
    let cloud = reconstruct(&session, &state)?;
    io::write_point_cloud(&cmd.cloud, &cloud)?;
    println!("point cloud: {} points -> {}", cloud.len(), cmd.cloud.display());

    if let (Some(truth_path), Some(contour_path)) = (cmd.truth, cmd.contour) {
        let truths = io::read_scan_truth(&truth_path)?;
        let edges = truth_edges(&truths)?;
        let rep = contour_error(&cloud, &edges);
        io::write_contour_summary(&contour_path, &io::ContourSummary::from(&rep))?;
        println!(
            "contour vs {} edges: oa {:.4} ± {:.4} mm, us {:.4} ± {:.4} mm -> {}",
            edges.len(),
            rep.oa.mean_mm,
            rep.oa.std_mm,
            rep.us.mean_mm,
            rep.us.std_mm,
            contour_path.display()
        );
    }
    Ok(())
}

fn run_report(cmd: ReportCmd, cfg: &Pdm2Config) -> Result<(), CliError> {
    match cmd.kind {
        ReportKind::Ranging { model, samples, out } => {
            let model = io::read_range_model(&model)?;
            let samples = parse_samples_csv(&read_text(&samples)?, cfg.ranging.fallback_sigma_mm)?;
            if samples.is_empty() {
                return Err(CliError::Degenerate("samples file holds no rows".into()));
            }
            // Raw distance: straight conversion of the (one-way) time of
            // flight without the fitted correction.
            let naive = |tof_s: f64| {
                tof_s * cfg.ranging.sound_speed_m_s * 1e3 - cfg.ranging.path_offset_mm
            };
            let mut csv = String::from(
                "true_mm,tof_us,raw_mm,raw_dev_mm,rectified_mm,rectified_dev_mm,extrapolated\n",
            );
            for s in &samples {
                let raw = naive(s.tof_s);
                let r = rectify(&model, s.tof_s);
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    s.true_mm,
                    s.tof_s * 1e6,
                    raw,
                    raw - s.true_mm,
                    r.distance_mm,
                    r.distance_mm - s.true_mm,
                    u8::from(r.extrapolated)
                ));
            }
            write_text(&out, &csv)?;
            println!(
                "ranging series: {} rows ({}) -> {}",
                samples.len(),
                model.modality,
                out.display()
            );
        }
        ReportKind::Contour { cloud, truth, out } => {
            let cloud = io::read_point_cloud(&cloud)?;
            let truths = io::read_scan_truth(&truth)?;
            let edges = truth_edges(&truths)?;
            let rep = contour_error(&cloud, &edges);
            let mut csv = String::from("station_id,modality,x,y,z,edge_index,error_mm\n");
            for (p, a) in cloud.points.iter().zip(&rep.assignments) {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    a.station_id, a.modality, p.p.x, p.p.y, p.p.z, a.edge_index, a.error_mm
                ));
            }
            write_text(&out, &csv)?;
            println!(
                "contour series: {} points against {} edges -> {}",
                cloud.len(),
                edges.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cfg, _source) = config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Bench(c) => run_bench(c, &cfg),
        Command::ExtractRef(c) => run_extract_ref(c, &cfg),
        Command::Tof(c) => run_tof(c, &cfg),
        Command::FitRange(c) => run_fit_range(c, &cfg),
        Command::Calibrate(c) => run_calibrate(c, &cfg),
        Command::Classify(c) => run_classify(c, &cfg),
        Command::Scan(c) => run_scan(c),
        Command::Reconstruct(c) => run_reconstruct(c),
        Command::Report(c) => run_report(c, &cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
