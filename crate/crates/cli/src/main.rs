use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use emscan_core::antenna::{helix_axial_ratio, helix_gain_kraus, helix_hpbw_kraus, spacing_from_pitch, HelixDesign};
use emscan_core::heatmap::{self, Colormap, Heatmap, Interpolation, OverlaySpec};
use emscan_core::scan::{estimate_duration, execute_scan, CsvPixelLog, ScanAbort, ScanOptions, ScanPlan};
use emscan_core::scene::load_scene;
use emscan_core::sdr::SimBackend;
use emscan_core::serial_protocol::{LineClient, RotorLink, SimDevice, SimPort};
use serde::Serialize;

mod config;

use config::{BackendKind, RunConfig, RunConfigFile};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("scan incomplete: {0}")]
    Partial(String),
    #[error("{0}")]
    Transport(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Partial(_) => 3,
            Self::Transport(_) => 4,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

/// Rotor-scanned SDR direction finder.
#[derive(Parser)]
#[command(name = "emscan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Axial-mode helix gain, beamwidth and axial ratio.
    Antenna(AntennaArgs),
    /// Print the scan plan as JSON.
    Plan(PlanCmd),
    /// Print the scan duration.
    Estimate(PlanCmd),
    /// Run a scan and write heatmaps, pixel log and manifest.
    Scan(ScanArgs),
    /// Blend a heatmap over a photograph.
    Overlay(OverlayArgs),
    /// Convert a heatmap CSV to normalized PGM/PNG/CSV.
    Export(ExportArgs),
}

#[derive(Args)]
struct AntennaArgs {
    #[arg(long)]
    turns: u32,
    /// Pitch angle, degrees.
    #[arg(long)]
    pitch: f64,
    /// Circumference in wavelengths.
    #[arg(long)]
    clambda: f64,
    #[arg(long, default_value_t = 2450.0)]
    frequency_mhz: f64,
    #[arg(long)]
    json: bool,
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `lo,hi`, got {s:?}"))?;
    let p = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    Ok([p(a)?, p(b)?])
}

/// Plan parameters; each overrides the config file.
#[derive(Args, Default)]
struct PlanArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Azimuth span `lo,hi` in degrees.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    az_range: Option<[f64; 2]>,
    /// Elevation span `lo,hi` in degrees.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    el_range: Option<[f64; 2]>,
    #[arg(long)]
    az_pixels: Option<usize>,
    #[arg(long)]
    el_pixels: Option<usize>,
    /// Monitored band `lo,hi` in MHz.
    #[arg(long, value_parser = parse_pair)]
    band_mhz: Option<[f64; 2]>,
    /// Hop bandwidth, MHz.
    #[arg(long)]
    hop_mhz: Option<f64>,
    /// Capture time per hop, seconds.
    #[arg(long)]
    hop_duration: Option<f64>,
    /// Settle time per pixel, seconds.
    #[arg(long)]
    settle: Option<f64>,
    /// Allow settle times below 0.5 s.
    #[arg(long)]
    unsafe_settle: bool,
}

#[derive(Args)]
struct PlanCmd {
    #[command(flatten)]
    plan: PlanArgs,
}

#[derive(Args)]
struct ScanArgs {
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Scene file for the simulated receiver.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Serial device of the rotor controller (serial backend).
    #[arg(long)]
    port: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Noise seed (required).
    #[arg(long)]
    seed: Option<u64>,
    /// dBm minus dBFS; defaults to the scene's value.
    #[arg(long, allow_hyphen_values = true)]
    calibration_offset: Option<f64>,
    #[arg(long)]
    pipeline_depth: Option<usize>,
    /// Fresh noise for every capture instead of one draw per hop.
    #[arg(long)]
    independent_noise: bool,
    /// `inferno`, `gray`, or a file of 256 `R G B` rows.
    #[arg(long)]
    colormap: Option<String>,
    #[arg(long)]
    upscale: Option<usize>,
    /// Log the rotor conversation here.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
struct OverlayArgs {
    /// Heatmap CSV.
    #[arg(long)]
    map: PathBuf,
    /// Normalize against this map instead of the map itself.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// PNG photograph.
    #[arg(long)]
    photo: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 90.0)]
    hfov: f64,
    #[arg(long, default_value_t = 30.0)]
    vfov: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    cam_az: f64,
    #[arg(long, default_value_t = 15.0, allow_hyphen_values = true)]
    cam_el: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value = "inferno")]
    colormap: String,
}

#[derive(Args)]
struct ExportArgs {
    /// Heatmap CSV.
    #[arg(long)]
    map: PathBuf,
    /// Normalize against this map instead of the map itself.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    pgm: Option<PathBuf>,
    #[arg(long)]
    png: Option<PathBuf>,
    /// Normalized CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "inferno")]
    colormap: String,
    #[arg(long, default_value_t = 1)]
    upscale: usize,
    #[arg(long)]
    bilinear: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Antenna(a) => cmd_antenna(&a),
        Cmd::Plan(p) => cmd_plan(&p.plan),
        Cmd::Estimate(p) => cmd_estimate(&p.plan),
        Cmd::Scan(s) => cmd_scan(&s),
        Cmd::Overlay(o) => cmd_overlay(&o),
        Cmd::Export(e) => cmd_export(&e),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[derive(Serialize)]
struct AntennaReport {
    turns: u32,
    pitch_deg: f64,
    circumference_wavelengths: f64,
    frequency_hz: f64,
    spacing_wavelengths: f64,
    gain_dbi: f64,
    hpbw_deg: f64,
    axial_ratio: f64,
    warnings: Vec<String>,
}

fn cmd_antenna(a: &AntennaArgs) -> Result<(), CliError> {
    let mut d = HelixDesign::new(a.turns, a.pitch, a.clambda);
    d.frequency_hz = a.frequency_mhz * 1e6;
    let warnings = d.validate().map_err(usage)?;
    let r = AntennaReport {
        turns: d.turns,
        pitch_deg: d.pitch_angle_deg,
        circumference_wavelengths: d.circumference_wavelengths,
        frequency_hz: d.frequency_hz,
        spacing_wavelengths: spacing_from_pitch(&d),
        gain_dbi: helix_gain_kraus(&d),
        hpbw_deg: helix_hpbw_kraus(&d),
        axial_ratio: helix_axial_ratio(&d),
        warnings,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        return Ok(());
    }
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    let wavelength = 299_792_458.0 / r.frequency_hz;
    println!("turns               {}", r.turns);
    println!("pitch               {} deg", r.pitch_deg);
    println!("circumference       {} lambda ({:.1} mm)", r.circumference_wavelengths, r.circumference_wavelengths * wavelength * 1e3);
    println!("spacing             {:.4} lambda", r.spacing_wavelengths);
    println!("gain                {:.2} dBi", r.gain_dbi);
    println!("hpbw                {:.2} deg", r.hpbw_deg);
    println!("axial ratio         {:.4}", r.axial_ratio);
    Ok(())
}

fn resolve_plan_args(p: &PlanArgs, cfg: &mut RunConfig) -> Result<(), CliError> {
    if let Some(path) = &p.config {
        cfg.apply(RunConfigFile::load(path)?);
    }
    if let Some(v) = p.az_range {
        cfg.az_range = v;
    }
    if let Some(v) = p.el_range {
        cfg.el_range = v;
    }
    if let Some(v) = p.az_pixels {
        cfg.az_pixels = v;
    }
    if let Some(v) = p.el_pixels {
        cfg.el_pixels = v;
    }
    if let Some([lo, hi]) = p.band_mhz {
        cfg.band_hz = [lo * 1e6, hi * 1e6];
    }
    if let Some(v) = p.hop_mhz {
        cfg.hop_bandwidth_hz = v * 1e6;
    }
    if let Some(v) = p.hop_duration {
        cfg.hop_duration_s = v;
    }
    if let Some(v) = p.settle {
        cfg.settle_s = v;
    }
    if p.unsafe_settle {
        cfg.unsafe_settle = true;
    }
    Ok(())
}

/// `H:MM:SS`, seconds truncated.
fn hms(seconds: f64) -> String {
    let s = seconds.max(0.0).floor() as u64;
    format!("{}:{:02}:{:02}", s / 3600, s / 60 % 60, s % 60)
}

#[derive(Serialize)]
struct PlanReport<'a> {
    plan: &'a ScanPlan,
    pixels: usize,
    estimated_duration_s: f64,
}

fn cmd_plan(p: &PlanArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::default();
    resolve_plan_args(p, &mut cfg)?;
    let plan = cfg.plan()?;
    let report = PlanReport {
        plan: &plan,
        pixels: plan.pixel_count(),
        estimated_duration_s: estimate_duration(&plan),
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("plan serializes"));
    Ok(())
}

fn cmd_estimate(p: &PlanArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::default();
    resolve_plan_args(p, &mut cfg)?;
    let t = estimate_duration(&cfg.plan()?);
    println!("{t} s ({})", hms(t));
    Ok(())
}

fn load_colormap(name: &str) -> Result<Colormap, CliError> {
    if let Some(c) = Colormap::by_name(name) {
        return Ok(c);
    }
    let text = std::fs::read_to_string(name)
        .map_err(|e| CliError::Usage(format!("colormap {name:?} is neither built in nor a readable file: {e}")))?;
    Colormap::parse(&text).map_err(|e| CliError::Usage(format!("{name}: {e}")))
}

#[derive(Serialize)]
struct Peak {
    i_az: usize,
    i_el: usize,
    az_deg: f64,
    el_deg: f64,
    integrated_dbm: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    plan: &'a ScanPlan,
    estimated_duration_s: f64,
    simulated_elapsed_s: f64,
    pixels_total: usize,
    pixels_acquired: usize,
    invalid_pixels: usize,
    complete: bool,
    abort: Option<String>,
    peak: Option<Peak>,
    outputs: [&'static str; 4],
}

fn cmd_scan(a: &ScanArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::default();
    resolve_plan_args(&a.plan, &mut cfg)?;
    if let Some(b) = a.backend {
        cfg.backend = b;
    }
    if a.scene.is_some() {
        cfg.scene = a.scene.clone();
    }
    if a.port.is_some() {
        cfg.port = a.port.clone();
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    if a.calibration_offset.is_some() {
        cfg.calibration_offset_db = a.calibration_offset;
    }
    if let Some(d) = a.pipeline_depth {
        cfg.pipeline_depth = d;
    }
    if a.independent_noise {
        cfg.seeding = emscan_core::scan::NoiseSeeding::PerCapture;
    }
    if let Some(c) = &a.colormap {
        cfg.colormap = c.clone();
    }
    if let Some(u) = a.upscale {
        cfg.upscale = u;
    }

    let seed = cfg
        .seed
        .ok_or_else(|| CliError::Usage("--seed is required: simulated captures must be reproducible".into()))?;
    let scene_path = cfg
        .scene
        .clone()
        .ok_or_else(|| CliError::Usage("--scene is required (captures are simulated)".into()))?;
    let mut scene = load_scene(&scene_path).map_err(usage)?;
    if let Some(c) = cfg.calibration_offset_db {
        scene.chain.calibration_offset_db = c;
    }
    let plan = cfg.plan()?;
    let colormap = load_colormap(&cfg.colormap)?;
    if cfg.upscale == 0 {
        return Err(CliError::Usage("--upscale must be at least 1".into()));
    }

    let mut link: Box<dyn RotorLink> = match cfg.backend {
        BackendKind::Sim => {
            let client = LineClient::new(SimPort::new(SimDevice::new(cfg.rotor.clone())));
            Box::new(with_transcript(client, a.transcript.as_deref())?)
        }
        BackendKind::Serial => {
            let port = cfg
                .port
                .clone()
                .ok_or_else(|| CliError::Usage("--port is required with --backend serial".into()))?;
            let dev = OpenOptions::new()
                .read(true)
                .write(true)
                .open(&port)
                .map_err(|e| CliError::Transport(format!("{}: {e}", port.display())))?;
            Box::new(with_transcript(LineClient::new(dev), a.transcript.as_deref())?)
        }
    };

    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Usage(format!("{}: {e}", cfg.out.display())))?;
    let out = |name: &str| cfg.out.join(name);
    let log_file = File::create(out("pixels.csv")).map_err(|e| CliError::Usage(format!("{}: {e}", out("pixels.csv").display())))?;
    let mut sink = CsvPixelLog::new(BufWriter::new(log_file), plan.hops.len()).map_err(usage)?;

    let options = ScanOptions {
        seed,
        pipeline_depth: cfg.pipeline_depth,
        calibration_offset_db: scene.chain.calibration_offset_db,
        rotor: cfg.rotor.clone(),
        seeding: cfg.seeding,
        real_time: false,
    };
    let mut sdr = SimBackend::new(Arc::new(scene));
    log::info!(
        "scanning {} pixels x {} hops, estimated {}",
        plan.pixel_count(),
        plan.hops.len(),
        hms(estimate_duration(&plan))
    );
    let outcome = execute_scan(&plan, &options, &mut link, &mut sdr, &mut sink).map_err(usage)?;
    sink.into_inner().flush().map_err(usage)?;

    let map = &outcome.heatmap;
    heatmap::write_csv(map, &out("heatmap.csv")).map_err(usage)?;
    let norm = normalized(map, None)?;
    heatmap::export_pgm(&norm, &out("heatmap.pgm")).map_err(usage)?;
    heatmap::export_png(&norm, &colormap, &out("heatmap.png"), cfg.upscale, Interpolation::Nearest).map_err(usage)?;

    let peak = map.argmax().map(|(i, j)| {
        let p = map.cell_pose(i, j);
        Peak {
            i_az: i,
            i_el: j,
            az_deg: p.az,
            el_deg: p.el,
            integrated_dbm: map.get(i, j),
        }
    });
    let manifest = Manifest {
        tool: "emscan",
        version: env!("CARGO_PKG_VERSION"),
        config: &cfg,
        plan: &plan,
        estimated_duration_s: estimate_duration(&plan),
        simulated_elapsed_s: outcome.elapsed_s,
        pixels_total: plan.pixel_count(),
        pixels_acquired: outcome.records.len(),
        invalid_pixels: outcome.invalid_pixels,
        complete: outcome.complete,
        abort: outcome.abort.as_ref().map(|a| a.to_string()),
        peak,
        outputs: ["heatmap.csv", "heatmap.pgm", "heatmap.png", "pixels.csv"],
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out("manifest.json"), text + "\n").map_err(usage)?;

    if let Some(p) = &manifest.peak {
        println!(
            "peak {:.2} dBm at az {:.2} deg, el {:.2} deg (pixel {}, {})",
            p.integrated_dbm, p.az_deg, p.el_deg, p.i_az, p.i_el
        );
    }
    if outcome.invalid_pixels > 0 {
        eprintln!("warning: {} invalid pixels", outcome.invalid_pixels);
    }
    match outcome.abort {
        None => Ok(()),
        Some(ScanAbort::Transport(m)) => Err(CliError::Transport(m)),
        Some(other) => Err(CliError::Partial(other.to_string())),
    }
}

fn with_transcript<S: std::io::Read + Write>(client: LineClient<S>, path: Option<&Path>) -> Result<LineClient<S>, CliError> {
    Ok(match path {
        Some(p) => {
            let f = File::create(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            client.with_transcript(Box::new(f))
        }
        None => client,
    })
}

fn normalized(map: &Heatmap, reference: Option<&Path>) -> Result<Heatmap, CliError> {
    let maps = match reference {
        Some(r) => vec![map.clone(), heatmap::read_csv(r).map_err(usage)?],
        None => vec![map.clone()],
    };
    let idx = maps.len() - 1;
    Ok(heatmap::normalize_clip(&maps, idx).map_err(usage)?.swap_remove(0))
}

fn cmd_overlay(a: &OverlayArgs) -> Result<(), CliError> {
    let map = heatmap::read_csv(&a.map).map_err(usage)?;
    let norm = normalized(&map, a.reference.as_deref())?;
    let photo = heatmap::read_png(&a.photo).map_err(usage)?;
    let spec = OverlaySpec {
        width: photo.width,
        height: photo.height,
        hfov_deg: a.hfov,
        vfov_deg: a.vfov,
        cam_az: a.cam_az,
        cam_el: a.cam_el,
        alpha: a.alpha,
    };
    let img = heatmap::overlay(&norm, &photo, &spec, &load_colormap(&a.colormap)?).map_err(usage)?;
    heatmap::write_png(&img, &a.out, None).map_err(usage)
}

fn cmd_export(a: &ExportArgs) -> Result<(), CliError> {
    if a.pgm.is_none() && a.png.is_none() && a.csv.is_none() {
        return Err(CliError::Usage("nothing to do: give --pgm, --png and/or --csv".into()));
    }
    if a.upscale == 0 {
        return Err(CliError::Usage("--upscale must be at least 1".into()));
    }
    let map = heatmap::read_csv(&a.map).map_err(usage)?;
    let norm = normalized(&map, a.reference.as_deref())?;
    if let Some(p) = &a.pgm {
        heatmap::export_pgm(&norm, p).map_err(usage)?;
    }
    if let Some(p) = &a.png {
        let interp = if a.bilinear { Interpolation::Bilinear } else { Interpolation::Nearest };
        heatmap::export_png(&norm, &load_colormap(&a.colormap)?, p, a.upscale, interp).map_err(usage)?;
    }
    if let Some(p) = &a.csv {
        heatmap::write_csv(&norm, p).map_err(usage)?;
    }
    Ok(())
}
