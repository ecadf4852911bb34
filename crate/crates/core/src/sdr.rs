//! Backend-neutral capture contract and the per-capture power estimator.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::rotor::AngularPose;
use crate::scene::{synthesize_iq, Scene};

/// Widest instantaneous bandwidth the receiver supports.
pub const MAX_BANDWIDTH_HZ: f64 = 20e6;
pub const SIM_SAMPLE_RATE_HZ: f64 = 2e6;
/// Mean power floor applied before taking the logarithm (−300 dBFS).
pub const POWER_FLOOR: f64 = 1e-30;

#[derive(Debug, thiserror::Error)]
pub enum SdrError {
    #[error("capture config: {0}")]
    Config(String),
    #[error("backend transport: {0}")]
    Transport(String),
    #[error("{0}")]
    Domain(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureRequest {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CaptureRequest {
    pub fn validate(&self) -> Result<(), SdrError> {
        if !(self.bandwidth_hz > 0.0) {
            return Err(SdrError::Config(format!(
                "bandwidth {} Hz must be positive",
                self.bandwidth_hz
            )));
        }
        if self.bandwidth_hz > MAX_BANDWIDTH_HZ {
            return Err(SdrError::Config(format!(
                "bandwidth {} MHz exceeds the {} MHz receiver limit",
                self.bandwidth_hz / 1e6,
                MAX_BANDWIDTH_HZ / 1e6
            )));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(SdrError::Config(format!(
                "duration {} s must be positive",
                self.duration_s
            )));
        }
        if !(self.center_hz > 0.0 && self.center_hz.is_finite()) {
            return Err(SdrError::Config(format!(
                "center frequency {} Hz must be positive",
                self.center_hz
            )));
        }
        Ok(())
    }

    pub fn band(&self) -> [f64; 2] {
        [
            self.center_hz - self.bandwidth_hz / 2.0,
            self.center_hz + self.bandwidth_hz / 2.0,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqCapture {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
    pub center_hz: f64,
    /// Set when any sample hit full scale.
    pub clipped: bool,
}

pub fn sample_count(duration_s: f64, sample_rate_hz: f64) -> Result<usize, SdrError> {
    let n = (duration_s * sample_rate_hz).round();
    if !(n >= 1.0) {
        return Err(SdrError::Config(format!(
            "{duration_s} s at {sample_rate_hz} S/s yields no samples"
        )));
    }
    Ok(n as usize)
}

/// Anything that can tune and return IQ. `pointing` is where the antenna
/// currently looks; hardware backends ignore it, the simulator needs it.
pub trait SdrBackend {
    fn capture(&mut self, request: &CaptureRequest, pointing: &AngularPose) -> Result<IqCapture, SdrError>;
}

impl<B: SdrBackend + ?Sized> SdrBackend for &mut B {
    fn capture(&mut self, request: &CaptureRequest, pointing: &AngularPose) -> Result<IqCapture, SdrError> {
        (**self).capture(request, pointing)
    }
}

impl<B: SdrBackend + ?Sized> SdrBackend for Box<B> {
    fn capture(&mut self, request: &CaptureRequest, pointing: &AngularPose) -> Result<IqCapture, SdrError> {
        (**self).capture(request, pointing)
    }
}

/// Backend that synthesizes captures from a [`Scene`].
#[derive(Debug, Clone)]
pub struct SimBackend {
    scene: Arc<Scene>,
    sample_rate_hz: f64,
}

impl SimBackend {
    pub fn new(scene: Arc<Scene>) -> Self {
        Self {
            scene,
            sample_rate_hz: SIM_SAMPLE_RATE_HZ,
        }
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }
}

impl SdrBackend for SimBackend {
    fn capture(&mut self, request: &CaptureRequest, pointing: &AngularPose) -> Result<IqCapture, SdrError> {
        synthesize_iq(&self.scene, pointing, request, self.sample_rate_hz)
    }
}

/// Free-function form of [`SdrBackend::capture`].
pub fn capture<B: SdrBackend + ?Sized>(
    backend: &mut B,
    request: &CaptureRequest,
    pointing: &AngularPose,
) -> Result<IqCapture, SdrError> {
    backend.capture(request, pointing)
}

/// Mean sample power in dB full scale.
pub fn capture_power(capture: &IqCapture) -> Result<f64, SdrError> {
    if capture.samples.is_empty() {
        return Err(SdrError::Domain("cannot estimate power of an empty capture".into()));
    }
    let sum: f64 = capture.samples.iter().map(|z| z.norm_sqr()).sum();
    let mean = sum / capture.samples.len() as f64;
    Ok(10.0 * mean.max(POWER_FLOOR).log10())
}

pub fn dbfs_to_dbm(power_dbfs: f64, calibration_offset_db: f64) -> f64 {
    power_dbfs + calibration_offset_db
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

/// Writes interleaved little-endian f32 I/Q to `path` and a text header to
/// `path.hdr`.
pub fn write_raw(capture: &IqCapture, path: &Path) -> Result<(), SdrError> {
    let io = |p: &Path| {
        let shown = p.display().to_string();
        move |source| SdrError::Io { path: shown, source }
    };
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io(path))?);
    for z in &capture.samples {
        w.write_all(&(z.re as f32).to_le_bytes()).map_err(io(path))?;
        w.write_all(&(z.im as f32).to_le_bytes()).map_err(io(path))?;
    }
    w.flush().map_err(io(path))?;
    let hdr = sidecar(path);
    std::fs::write(
        &hdr,
        format!(
            "center_hz={}\nrate_hz={}\ncount={}\n",
            capture.center_hz,
            capture.sample_rate_hz,
            capture.samples.len()
        ),
    )
    .map_err(io(&hdr))
}

pub fn read_raw(path: &Path) -> Result<IqCapture, SdrError> {
    let hdr = sidecar(path);
    let bad = |m: String| SdrError::Domain(format!("{}: {m}", hdr.display()));
    let f = std::fs::File::open(&hdr).map_err(|source| SdrError::Io {
        path: hdr.display().to_string(),
        source,
    })?;
    let (mut center, mut rate, mut count) = (None, None, None);
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|source| SdrError::Io {
            path: hdr.display().to_string(),
            source,
        })?;
        let Some((k, v)) = line.split_once('=') else { continue };
        match k.trim() {
            "center_hz" => center = v.trim().parse::<f64>().ok(),
            "rate_hz" => rate = v.trim().parse::<f64>().ok(),
            "count" => count = v.trim().parse::<usize>().ok(),
            _ => {}
        }
    }
    let (center, rate, count) = match (center, rate, count) {
        (Some(c), Some(r), Some(n)) => (c, r, n),
        _ => return Err(bad("missing center_hz, rate_hz or count".into())),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| SdrError::Io {
            path: path.display().to_string(),
            source,
        })?;
    if bytes.len() != count * 8 {
        return Err(bad(format!("expected {} bytes of samples, found {}", count * 8, bytes.len())));
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(f64::from(re), f64::from(im))
        })
        .collect();
    Ok(IqCapture {
        samples,
        sample_rate_hz: rate,
        center_hz: center,
        clipped: false,
    })
}
