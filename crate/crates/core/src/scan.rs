//! Scan planning and execution.
//!
//! A scan visits the az×el grid serpentine-fashion (elevation rows
//! ascending, azimuth direction alternating per row). At each pixel the
//! rotor moves, the settle clock starts, and every frequency hop is captured
//! with the sweep direction alternating from pixel to pixel. Acquisition
//! (stage A) feeds a bounded in-order queue; power estimation and heatmap
//! updates (stage B) run on a second thread.

use std::io::Write;
use std::sync::mpsc::sync_channel;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::heatmap::Heatmap;
use crate::rotor::{steps_to_angle, AngularPose, Axis, MotionPlanner, RotorConfig, RotorError};
use crate::sdr::{capture_power, dbfs_to_dbm, CaptureRequest, IqCapture, SdrBackend, SdrError, MAX_BANDWIDTH_HZ};
use crate::serial_protocol::{Command, LinkError, Response, RotorLink};

pub const MIN_SAFE_SETTLE_S: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("band {width_mhz} MHz is not a whole number of {hop_mhz} MHz hops ({ratio:.3}); {suggestion}")]
    Indivisible {
        width_mhz: f64,
        hop_mhz: f64,
        ratio: f64,
        suggestion: String,
    },
    #[error("invalid scan plan: {0}")]
    Invalid(String),
    #[error(transparent)]
    Capture(#[from] SdrError),
    #[error(transparent)]
    Rotor(#[from] RotorError),
}

#[derive(Debug, thiserror::Error)]
pub enum ScanError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("pixel sink: {0}")]
    Sink(#[from] std::io::Error),
}

/// Contiguous equal-width hops covering `[f_low, f_high]`.
pub fn build_hop_plan(f_low_hz: f64, f_high_hz: f64, hop_bandwidth_hz: f64, hop_duration_s: f64) -> Result<Vec<CaptureRequest>, PlanError> {
    if !(f_low_hz > 0.0 && f_high_hz > f_low_hz) {
        return Err(PlanError::Invalid(format!(
            "band [{f_low_hz}, {f_high_hz}] Hz is empty"
        )));
    }
    if !(hop_bandwidth_hz > 0.0 && hop_bandwidth_hz <= MAX_BANDWIDTH_HZ) {
        return Err(PlanError::Invalid(format!(
            "hop bandwidth {} MHz must be in (0, {}] MHz",
            hop_bandwidth_hz / 1e6,
            MAX_BANDWIDTH_HZ / 1e6
        )));
    }
    let width = f_high_hz - f_low_hz;
    let ratio = width / hop_bandwidth_hz;
    let hops = ratio.round();
    if hops < 1.0 || (ratio - hops).abs() > 1e-9 * ratio.max(1.0) {
        let mut options: Vec<String> = [ratio.ceil(), ratio.floor()]
            .into_iter()
            .filter(|&k| k >= 1.0 && width / k <= MAX_BANDWIDTH_HZ)
            .map(|k| format!("{:.3} MHz ({} hops)", width / k / 1e6, k))
            .collect();
        if options.is_empty() {
            let k = (width / MAX_BANDWIDTH_HZ).ceil();
            options.push(format!("{:.3} MHz ({} hops)", width / k / 1e6, k));
        }
        options.dedup();
        return Err(PlanError::Indivisible {
            width_mhz: width / 1e6,
            hop_mhz: hop_bandwidth_hz / 1e6,
            ratio,
            suggestion: format!("try {}", options.join(" or ")),
        });
    }
    let plan: Vec<CaptureRequest> = (0..hops as usize)
        .map(|k| CaptureRequest {
            center_hz: f_low_hz + (k as f64 + 0.5) * hop_bandwidth_hz,
            bandwidth_hz: hop_bandwidth_hz,
            duration_s: hop_duration_s,
            seed: None,
        })
        .collect();
    for h in &plan {
        h.validate()?;
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub az_range: [f64; 2],
    pub el_range: [f64; 2],
    pub az_pixels: usize,
    pub el_pixels: usize,
    pub hops: Vec<CaptureRequest>,
    pub settle_s: f64,
    /// Permits settle times below the vibration-safe minimum.
    #[serde(default)]
    pub unsafe_settle: bool,
    #[serde(default)]
    pub band_label: String,
}

impl ScanPlan {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: String| Err(PlanError::Invalid(m));
        if self.az_pixels == 0 || self.el_pixels == 0 {
            return bad("need at least one pixel per axis".into());
        }
        if !(self.az_range[0] < self.az_range[1] && self.el_range[0] < self.el_range[1]) {
            return bad("angular ranges must have min < max".into());
        }
        if self.hops.is_empty() {
            return bad("no frequency hops".into());
        }
        for h in &self.hops {
            h.validate()?;
        }
        if !(self.settle_s >= 0.0 && self.settle_s.is_finite()) {
            return bad(format!("settle {} s must be non-negative", self.settle_s));
        }
        if self.settle_s < MIN_SAFE_SETTLE_S && !self.unsafe_settle {
            return bad(format!(
                "settle {} s is below the {MIN_SAFE_SETTLE_S} s vibration minimum (use --unsafe-settle to override)",
                self.settle_s
            ));
        }
        Ok(())
    }

    /// Checks that every pixel center is reachable.
    pub fn validate_travel(&self, config: &RotorConfig) -> Result<(), PlanError> {
        for (i_az, i_el) in [(0, 0), (self.az_pixels - 1, self.el_pixels - 1)] {
            let p = self.pixel_pose(i_az, i_el);
            for (axis, v) in [(Axis::Az, p.az), (Axis::El, p.el)] {
                let t = config.travel(axis);
                if !t.contains(v) {
                    return Err(RotorError::OutOfTravel {
                        axis,
                        angle: v,
                        min: t.min,
                        max: t.max,
                    }
                    .into());
                }
            }
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.az_pixels * self.el_pixels
    }

    pub fn az_step(&self) -> f64 {
        (self.az_range[1] - self.az_range[0]) / self.az_pixels as f64
    }

    pub fn el_step(&self) -> f64 {
        (self.el_range[1] - self.el_range[0]) / self.el_pixels as f64
    }

    /// Pixel centers split each range into equal cells.
    pub fn pixel_pose(&self, i_az: usize, i_el: usize) -> AngularPose {
        AngularPose::new(
            self.az_range[0] + (i_az as f64 + 0.5) * self.az_step(),
            self.el_range[0] + (i_el as f64 + 0.5) * self.el_step(),
        )
    }

    pub fn empty_heatmap(&self) -> Heatmap {
        Heatmap::new(
            self.az_pixels,
            self.el_pixels,
            self.az_range,
            self.el_range,
            self.band_label.clone(),
        )
    }
}

/// Serpentine visit order over `(i_az, i_el)`.
pub fn pixel_order(plan: &ScanPlan) -> Vec<(usize, usize)> {
    let mut order = Vec::with_capacity(plan.pixel_count());
    for i_el in 0..plan.el_pixels {
        if i_el % 2 == 0 {
            order.extend((0..plan.az_pixels).map(|i_az| (i_az, i_el)));
        } else {
            order.extend((0..plan.az_pixels).rev().map(|i_az| (i_az, i_el)));
        }
    }
    order
}

/// Hop indices for the `pixel_index`-th pixel in acquisition order.
pub fn hop_order(plan: &ScanPlan, pixel_index: usize) -> Vec<usize> {
    let n = plan.hops.len();
    if pixel_index.is_multiple_of(2) {
        (0..n).collect()
    } else {
        (0..n).rev().collect()
    }
}

/// Dwell per pixel: settling and capture overlap, so the longer one wins.
pub fn pixel_dwell_s(plan: &ScanPlan) -> f64 {
    let capture: f64 = plan.hops.iter().map(|h| h.duration_s).sum();
    plan.settle_s.max(capture)
}

/// Scan time excluding slews and homing.
pub fn estimate_duration(plan: &ScanPlan) -> f64 {
    plan.pixel_count() as f64 * pixel_dwell_s(plan)
}

/// Linear power sum of per-hop powers in dBm.
pub fn integrate_hops(per_hop_dbm: &[f64]) -> Result<f64, PlanError> {
    if per_hop_dbm.is_empty() {
        return Err(PlanError::Invalid("cannot integrate zero hops".into()));
    }
    let mw: f64 = per_hop_dbm.iter().map(|p| 10f64.powf(p / 10.0)).sum();
    Ok(10.0 * mw.log10())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelRecord {
    pub i_az: usize,
    pub i_el: usize,
    pub pose: AngularPose,
    /// Indexed by plan hop, not by acquisition order. NaN marks a failed hop.
    pub per_hop_dbm: Vec<f64>,
    /// NaN when any hop failed.
    pub integrated_dbm: f64,
    pub t_offset_s: f64,
}

impl PixelRecord {
    pub fn is_valid(&self) -> bool {
        self.integrated_dbm.is_finite()
    }
}

pub trait PixelSink: Send {
    fn record(&mut self, rec: &PixelRecord) -> std::io::Result<()>;
}

impl PixelSink for Vec<PixelRecord> {
    fn record(&mut self, rec: &PixelRecord) -> std::io::Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Discards records.
pub struct NullSink;

impl PixelSink for NullSink {
    fn record(&mut self, _: &PixelRecord) -> std::io::Result<()> {
        Ok(())
    }
}

/// Writes the pixel log as CSV, one row per pixel in acquisition order.
pub struct CsvPixelLog<W> {
    out: W,
}

impl<W: Write + Send> CsvPixelLog<W> {
    pub fn new(mut out: W, hop_count: usize) -> std::io::Result<Self> {
        write!(out, "i_az,i_el,az_deg,el_deg,t_offset_s")?;
        for k in 0..hop_count {
            write!(out, ",hop{k}_dbm")?;
        }
        writeln!(out, ",integrated_dbm")?;
        Ok(Self { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write + Send> PixelSink for CsvPixelLog<W> {
    fn record(&mut self, r: &PixelRecord) -> std::io::Result<()> {
        write!(
            self.out,
            "{},{},{},{},{}",
            r.i_az, r.i_el, r.pose.az, r.pose.el, r.t_offset_s
        )?;
        for p in &r.per_hop_dbm {
            write!(self.out, ",{p}")?;
        }
        writeln!(self.out, ",{}", r.integrated_dbm)
    }
}

/// How capture seeds are derived from the scan seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSeeding {
    /// One seed per hop, reused at every pixel: pixel-to-pixel differences
    /// come only from pointing.
    #[default]
    PerHop,
    /// Fresh seed for every (pixel, hop) capture.
    PerCapture,
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    pub seed: u64,
    /// Capacity of the acquisition → processing queue (≥ 1).
    pub pipeline_depth: usize,
    pub calibration_offset_db: f64,
    pub rotor: RotorConfig,
    pub seeding: NoiseSeeding,
    /// Sleep through the dwell instead of advancing a simulated clock.
    pub real_time: bool,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            pipeline_depth: 2,
            calibration_offset_db: 0.0,
            rotor: RotorConfig::default(),
            seeding: NoiseSeeding::PerHop,
            real_time: false,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for one capture.
pub fn capture_seed(scan_seed: u64, seeding: NoiseSeeding, pixel_seq: usize, hop: usize) -> u64 {
    let h = splitmix64(scan_seed ^ splitmix64(hop as u64 + 1));
    match seeding {
        NoiseSeeding::PerHop => h,
        NoiseSeeding::PerCapture => splitmix64(h ^ splitmix64((pixel_seq as u64) << 20 | 0xA5)),
    }
}

#[derive(Debug, Clone)]
pub struct ScanOutcome {
    pub heatmap: Heatmap,
    pub records: Vec<PixelRecord>,
    pub invalid_pixels: usize,
    /// False when the rotor faulted and the scan stopped early.
    pub complete: bool,
    pub abort: Option<ScanAbort>,
    /// Simulated acquisition time of the pixels captured.
    pub elapsed_s: f64,
}

struct Acquisition {
    i_az: usize,
    i_el: usize,
    pose: AngularPose,
    t_offset_s: f64,
    /// Indexed by plan hop.
    captures: Vec<Result<IqCapture, SdrError>>,
}

/// Why a scan stopped early.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScanAbort {
    /// The controller answered with an error (limit strike, not homed, ...).
    Device(String),
    /// The link itself failed.
    Transport(String),
    /// A pose could not be turned into a move.
    Motion(String),
}

impl ScanAbort {
    fn at(self, context: &str) -> Self {
        match self {
            Self::Device(m) => Self::Device(format!("{context}: {m}")),
            Self::Transport(m) => Self::Transport(format!("{context}: {m}")),
            Self::Motion(m) => Self::Motion(format!("{context}: {m}")),
        }
    }
}

impl std::fmt::Display for ScanAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Device(m) => write!(f, "rotor fault: {m}"),
            Self::Transport(m) => write!(f, "rotor link failure: {m}"),
            Self::Motion(m) => write!(f, "motion planning: {m}"),
        }
    }
}

fn rotor_fault(cmd: &Command, r: Result<Response, LinkError>) -> Option<ScanAbort> {
    match r {
        Ok(Response::Ok) => None,
        Ok(Response::Err(code)) => Some(ScanAbort::Device(format!("{cmd:?} answered ERR {}", code.code()))),
        Ok(other) => Some(ScanAbort::Device(format!("{cmd:?} answered {other:?}"))),
        Err(e) => Some(ScanAbort::Transport(format!("{cmd:?}: {e}"))),
    }
}

/// Runs a full scan. The rotor is homed first. Capture failures mark single
/// pixels invalid; rotor faults stop the scan and return what was acquired.
pub fn execute_scan<L, B>(
    plan: &ScanPlan,
    options: &ScanOptions,
    link: &mut L,
    backend: &mut B,
    sink: &mut dyn PixelSink,
) -> Result<ScanOutcome, ScanError>
where
    L: RotorLink + ?Sized,
    B: SdrBackend + ?Sized,
{
    plan.validate()?;
    options.rotor.validate().map_err(PlanError::from)?;
    plan.validate_travel(&options.rotor)?;
    let depth = options.pipeline_depth.max(1);
    let dwell = pixel_dwell_s(plan);
    let order = pixel_order(plan);
    let (tx, rx) = sync_channel::<Acquisition>(depth);

    std::thread::scope(|scope| {
        let processing = scope.spawn(move || -> Result<(Heatmap, Vec<PixelRecord>, usize), std::io::Error> {
            let mut map = plan.empty_heatmap();
            let mut records = Vec::with_capacity(plan.pixel_count());
            let mut invalid = 0;
            for acq in rx {
                let per_hop: Vec<f64> = acq
                    .captures
                    .iter()
                    .map(|c| match c {
                        Ok(cap) => capture_power(cap)
                            .map(|p| dbfs_to_dbm(p, options.calibration_offset_db))
                            .unwrap_or(f64::NAN),
                        Err(_) => f64::NAN,
                    })
                    .collect();
                let integrated = if per_hop.iter().all(|p| p.is_finite()) {
                    integrate_hops(&per_hop).unwrap_or(f64::NAN)
                } else {
                    f64::NAN
                };
                let rec = PixelRecord {
                    i_az: acq.i_az,
                    i_el: acq.i_el,
                    pose: acq.pose,
                    per_hop_dbm: per_hop,
                    integrated_dbm: integrated,
                    t_offset_s: acq.t_offset_s,
                };
                if !rec.is_valid() {
                    invalid += 1;
                }
                map.set(rec.i_az, rec.i_el, rec.integrated_dbm);
                sink.record(&rec)?;
                records.push(rec);
            }
            Ok((map, records, invalid))
        });

        let mut abort: Option<ScanAbort> = None;
        let mut acquired = 0usize;
        'acquire: {
            if let Some(f) = rotor_fault(&Command::Home, link.send(&Command::Home)) {
                abort = Some(f.at("homing"));
                break 'acquire;
            }
            let mut planner = MotionPlanner::new(options.rotor.clone()).with_settle(plan.settle_s);
            planner.set_homed(true);
            let mut current = AngularPose::new(
                steps_to_angle(&options.rotor, Axis::Az, options.rotor.min_steps(Axis::Az)),
                steps_to_angle(&options.rotor, Axis::El, options.rotor.min_steps(Axis::El)),
            );
            for (seq, &(i_az, i_el)) in order.iter().enumerate() {
                let target = plan.pixel_pose(i_az, i_el);
                let mv = match planner.plan_move(&current, &target) {
                    Ok(m) => m,
                    Err(e) => {
                        abort = Some(ScanAbort::Motion(format!("pixel ({i_az}, {i_el}): {e}")));
                        break;
                    }
                };
                if mv.az_delta != 0 || mv.el_delta != 0 {
                    let cmd = match (i32::try_from(mv.az_delta), i32::try_from(mv.el_delta)) {
                        (Ok(a), Ok(e)) => Command::Move { az_steps: a, el_steps: e },
                        _ => {
                            abort = Some(ScanAbort::Motion(format!("pixel ({i_az}, {i_el}): move exceeds 32-bit step range")));
                            break;
                        }
                    };
                    if let Some(f) = rotor_fault(&cmd, link.send(&cmd)) {
                        abort = Some(f.at(&format!("pixel ({i_az}, {i_el})")));
                        break;
                    }
                }
                current = target;
                if options.real_time {
                    std::thread::sleep(Duration::from_secs_f64(dwell));
                }
                let mut captures: Vec<Option<Result<IqCapture, SdrError>>> = (0..plan.hops.len()).map(|_| None).collect();
                for hop in hop_order(plan, seq) {
                    let mut req = plan.hops[hop].clone();
                    req.seed = Some(capture_seed(options.seed, options.seeding, seq, hop));
                    captures[hop] = Some(backend.capture(&req, &target));
                }
                let acq = Acquisition {
                    i_az,
                    i_el,
                    pose: target,
                    t_offset_s: seq as f64 * dwell,
                    captures: captures.into_iter().map(|c| c.expect("every hop captured")).collect(),
                };
                if tx.send(acq).is_err() {
                    // processing stage stopped on a sink error
                    break;
                }
                acquired += 1;
            }
        }
        drop(tx);
        let (heatmap, records, invalid) = processing.join().expect("processing stage panicked")?;
        let complete = abort.is_none() && records.len() == plan.pixel_count();
        Ok(ScanOutcome {
            heatmap,
            invalid_pixels: invalid,
            complete,
            abort,
            elapsed_s: acquired as f64 * dwell,
            records,
        })
    })
}
