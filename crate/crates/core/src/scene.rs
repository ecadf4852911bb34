//! RF environment simulator. The receiver sits at the origin; x points to
//! (az 0, el 0), y to az +90°, z up. Emitters radiate uniformly over their
//! band and each capture receives the overlapping share.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::antenna::{angular_offset, load_measured_pattern, AntennaError, AntennaPattern, DEFAULT_SIDELOBE_FLOOR_DB};
use crate::rotor::AngularPose;
use crate::sdr::{sample_count, CaptureRequest, IqCapture, SdrError};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Thermal noise density at 290 K, dBm/Hz.
pub const THERMAL_NOISE_DBM_HZ: f64 = -174.0;
pub const REFERENCE_TEMPERATURE_K: f64 = 290.0;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("{what} must be positive, got {value}")]
    Domain { what: &'static str, value: f64 },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("{file}: at `{path}`: {msg}")]
    Json { file: String, path: String, msg: String },
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Antenna(#[from] AntennaError),
}

/// Free-space path loss in dB.
pub fn fspl(distance_m: f64, frequency_hz: f64) -> Result<f64, SceneError> {
    if !(distance_m > 0.0) {
        return Err(SceneError::Domain {
            what: "distance",
            value: distance_m,
        });
    }
    if !(frequency_hz > 0.0) {
        return Err(SceneError::Domain {
            what: "frequency",
            value: frequency_hz,
        });
    }
    Ok(20.0 * (4.0 * std::f64::consts::PI * distance_m * frequency_hz / SPEED_OF_LIGHT).log10())
}

/// Fraction of the emitter's band that falls inside the capture band.
pub fn band_overlap(emitter_band: [f64; 2], capture_band: [f64; 2]) -> f64 {
    let lo = emitter_band[0].max(capture_band[0]);
    let hi = emitter_band[1].min(capture_band[1]);
    if hi <= lo {
        return 0.0;
    }
    ((hi - lo) / (emitter_band[1] - emitter_band[0])).clamp(0.0, 1.0)
}

fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: [f64; 3], k: f64) -> [f64; 3] {
    [a[0] * k, a[1] * k, a[2] * k]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Emitter {
    pub label: String,
    pub position_m: [f64; 3],
    pub eirp_dbm: f64,
    pub band_hz: [f64; 2],
}

impl Emitter {
    pub fn distance_m(&self) -> f64 {
        norm(self.position_m)
    }

    /// Direction from the receiver to the emitter.
    pub fn bearing(&self) -> AngularPose {
        let [x, y, z] = self.position_m;
        AngularPose::new(y.atan2(x).to_degrees(), z.atan2(x.hypot(y)).to_degrees())
    }

    fn validate(&self) -> Result<(), SceneError> {
        if !(self.band_hz[0] < self.band_hz[1]) || self.band_hz[0] < 0.0 {
            return Err(SceneError::Invalid(format!(
                "emitter {:?}: band low must be below band high",
                self.label
            )));
        }
        if !self.position_m.iter().all(|c| c.is_finite()) || self.distance_m() == 0.0 {
            return Err(SceneError::Invalid(format!(
                "emitter {:?}: position must be finite and away from the receiver",
                self.label
            )));
        }
        if !self.eirp_dbm.is_finite() {
            return Err(SceneError::Invalid(format!("emitter {:?}: eirp not finite", self.label)));
        }
        Ok(())
    }
}

/// Finite planar attenuator. The rectangle's first half-extent runs along
/// `normal × z` (horizontal for vertical walls), the second along
/// `normal × first`; a wall whose normal is vertical uses x for the first.
#[derive(Debug, Clone, PartialEq)]
pub struct Wall {
    pub point_m: [f64; 3],
    normal: [f64; 3],
    pub half_extents_m: [f64; 2],
    pub attenuation_db: f64,
}

impl Wall {
    pub fn new(point_m: [f64; 3], normal: [f64; 3], half_extents_m: [f64; 2], attenuation_db: f64) -> Result<Self, SceneError> {
        let n = norm(normal);
        if !(n > 0.0 && n.is_finite()) {
            return Err(SceneError::Invalid("wall normal must be a nonzero vector".into()));
        }
        if !(attenuation_db >= 0.0) {
            return Err(SceneError::Invalid(format!(
                "wall attenuation {attenuation_db} dB must be non-negative"
            )));
        }
        if !(half_extents_m[0] > 0.0 && half_extents_m[1] > 0.0) {
            return Err(SceneError::Invalid("wall half-extents must be positive".into()));
        }
        if !point_m.iter().all(|c| c.is_finite()) {
            return Err(SceneError::Invalid("wall point must be finite".into()));
        }
        Ok(Self {
            point_m,
            normal: scale(normal, 1.0 / n),
            half_extents_m,
            attenuation_db,
        })
    }

    pub fn normal(&self) -> [f64; 3] {
        self.normal
    }

    fn axes(&self) -> ([f64; 3], [f64; 3]) {
        let c = cross(self.normal, [0.0, 0.0, 1.0]);
        let u = if norm(c) > 1e-9 {
            scale(c, 1.0 / norm(c))
        } else {
            [1.0, 0.0, 0.0]
        };
        let v = cross(self.normal, u);
        (u, v)
    }

    /// Whether the open segment from the receiver to `target` passes through
    /// the rectangle.
    pub fn blocks(&self, target: [f64; 3]) -> bool {
        let denom = dot(self.normal, target);
        if denom.abs() < 1e-12 {
            return false;
        }
        let t = dot(self.normal, self.point_m) / denom;
        if !(t > 0.0 && t < 1.0) {
            return false;
        }
        let hit = scale(target, t);
        let d = [
            hit[0] - self.point_m[0],
            hit[1] - self.point_m[1],
            hit[2] - self.point_m[2],
        ];
        let (u, v) = self.axes();
        dot(d, u).abs() <= self.half_extents_m[0] && dot(d, v).abs() <= self.half_extents_m[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceiveChain {
    pub pattern: AntennaPattern,
    pub lna_gain_db: f64,
    pub noise_figure_db: f64,
    pub calibration_offset_db: f64,
}

impl ReceiveChain {
    /// 2.45 GHz helicone (13.94 dBi, 30° beam) behind the 38 dB LNA.
    pub fn default_2g4() -> Self {
        Self {
            pattern: AntennaPattern::gaussian(13.94, 30.0, DEFAULT_SIDELOBE_FLOOR_DB)
                .expect("static pattern is valid"),
            lna_gain_db: 38.0,
            noise_figure_db: 1.2,
            calibration_offset_db: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub emitters: Vec<Emitter>,
    pub walls: Vec<Wall>,
    pub chain: ReceiveChain,
    pub temperature_k: f64,
}

impl Scene {
    pub fn new(chain: ReceiveChain) -> Self {
        Self {
            emitters: Vec::new(),
            walls: Vec::new(),
            chain,
            temperature_k: REFERENCE_TEMPERATURE_K,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let mut labels = HashSet::new();
        for e in &self.emitters {
            e.validate()?;
            if !labels.insert(e.label.as_str()) {
                return Err(SceneError::Invalid(format!("duplicate emitter label {:?}", e.label)));
            }
        }
        if !(self.chain.noise_figure_db >= 0.0) {
            return Err(SceneError::Invalid("noise figure must be non-negative".into()));
        }
        if !(self.temperature_k > 0.0) {
            return Err(SceneError::Invalid("temperature must be positive".into()));
        }
        self.chain.pattern.validate()?;
        Ok(())
    }

    /// Thermal noise at the LNA output over `bandwidth_hz`, dBm.
    pub fn noise_floor_dbm(&self, bandwidth_hz: f64) -> f64 {
        THERMAL_NOISE_DBM_HZ
            + 10.0 * (self.temperature_k / REFERENCE_TEMPERATURE_K).log10()
            + 10.0 * bandwidth_hz.log10()
            + self.chain.noise_figure_db
            + self.chain.lna_gain_db
    }

    /// Total one-way wall loss on the line of sight to `target`.
    pub fn wall_loss_db(&self, target: [f64; 3]) -> f64 {
        self.walls
            .iter()
            .filter(|w| w.blocks(target))
            .map(|w| w.attenuation_db)
            .sum()
    }

    /// Signal power from one emitter at the LNA output, or `None` when the
    /// emitter has no energy in the capture band.
    pub fn emitter_power_dbm(&self, emitter: &Emitter, pose: &AngularPose, capture_band: [f64; 2]) -> Option<f64> {
        let frac = band_overlap(emitter.band_hz, capture_band);
        if frac <= 0.0 {
            return None;
        }
        let f = 0.5 * (emitter.band_hz[0].max(capture_band[0]) + emitter.band_hz[1].min(capture_band[1]));
        let offset = angular_offset(pose, &emitter.bearing());
        let gain = self.chain.pattern.gain(offset).ok()?;
        let loss = fspl(emitter.distance_m(), f).ok()?;
        Some(
            emitter.eirp_dbm + 10.0 * frac.log10() + gain - loss - self.wall_loss_db(emitter.position_m)
                + self.chain.lna_gain_db,
        )
    }
}

/// Signal plus thermal noise at the LNA output for a capture band, dBm.
pub fn received_power(scene: &Scene, pose: &AngularPose, capture_band: [f64; 2]) -> f64 {
    let noise = scene.noise_floor_dbm(capture_band[1] - capture_band[0]);
    let total = scene
        .emitters
        .iter()
        .filter_map(|e| scene.emitter_power_dbm(e, pose, capture_band))
        .map(dbm_to_mw)
        .sum::<f64>()
        + dbm_to_mw(noise);
    mw_to_dbm(total)
}

/// Circular complex Gaussian capture whose expected per-sample power equals
/// the received power in full-scale units. Samples are limited to unit
/// magnitude; targets above full scale are scaled to 0 dBFS and flagged.
pub fn synthesize_iq(
    scene: &Scene,
    pose: &AngularPose,
    request: &CaptureRequest,
    sample_rate_hz: f64,
) -> Result<IqCapture, SdrError> {
    request.validate()?;
    let n = sample_count(request.duration_s, sample_rate_hz)?;
    let dbm = received_power(scene, pose, request.band());
    let mut dbfs = dbm - scene.chain.calibration_offset_db;
    let mut clipped = false;
    if dbfs > 0.0 {
        log::warn!(
            "capture at {} Hz targets {dbfs:.2} dBFS; scaling to full scale",
            request.center_hz
        );
        dbfs = 0.0;
        clipped = true;
    }
    let sigma = (10f64.powf(dbfs / 10.0) / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed.unwrap_or(0));
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let i: f64 = StandardNormal.sample(&mut rng);
        let q: f64 = StandardNormal.sample(&mut rng);
        let mut z = Complex64::new(sigma * i, sigma * q);
        let mag = z.norm();
        if mag > 1.0 {
            z /= mag;
            clipped = true;
        }
        samples.push(z);
    }
    Ok(IqCapture {
        samples,
        sample_rate_hz,
        center_hz: request.center_hz,
        clipped,
    })
}

// ---- scene file ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum PatternSpec {
    GaussianBeam {
        boresight_gain_dbi: f64,
        hpbw_deg: f64,
        #[serde(default = "default_floor")]
        sidelobe_floor_db: f64,
    },
    /// Measured cut, inline or from a CSV path relative to the scene file.
    Tabulated {
        #[serde(default)]
        table: Option<Vec<(f64, f64)>>,
        #[serde(default)]
        csv: Option<PathBuf>,
    },
}

fn default_floor() -> f64 {
    DEFAULT_SIDELOBE_FLOOR_DB
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub pattern: PatternSpec,
    #[serde(default = "default_lna")]
    pub lna_gain_db: f64,
    #[serde(default = "default_nf")]
    pub noise_figure_db: f64,
    #[serde(default)]
    pub calibration_offset_db: f64,
}

fn default_lna() -> f64 {
    38.0
}

fn default_nf() -> f64 {
    1.2
}

fn default_temperature() -> f64 {
    REFERENCE_TEMPERATURE_K
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallSpec {
    pub point_m: [f64; 3],
    pub normal: [f64; 3],
    pub half_extents_m: [f64; 2],
    pub attenuation_db: f64,
}

/// On-disk scene document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
    #[serde(default)]
    pub emitters: Vec<Emitter>,
    #[serde(default)]
    pub walls: Vec<WallSpec>,
    pub chain: ChainSpec,
    #[serde(default = "default_temperature")]
    pub temperature_k: f64,
}

impl SceneFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self, SceneError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| SceneError::Json {
            file: origin.to_string(),
            path: e.path().to_string(),
            msg: e.inner().to_string(),
        })
    }

    /// Resolves pattern files against `base_dir` and validates the result.
    pub fn into_scene(self, base_dir: &Path) -> Result<Scene, SceneError> {
        let pattern = match self.chain.pattern {
            PatternSpec::GaussianBeam {
                boresight_gain_dbi,
                hpbw_deg,
                sidelobe_floor_db,
            } => AntennaPattern::gaussian(boresight_gain_dbi, hpbw_deg, sidelobe_floor_db)?,
            PatternSpec::Tabulated { table: Some(t), csv: None } => AntennaPattern::tabulated(t)?,
            PatternSpec::Tabulated { table: None, csv: Some(p) } => load_measured_pattern(&base_dir.join(p))?,
            PatternSpec::Tabulated { .. } => {
                return Err(SceneError::Invalid(
                    "tabulated pattern needs exactly one of `table` or `csv`".into(),
                ))
            }
        };
        let walls = self
            .walls
            .into_iter()
            .map(|w| Wall::new(w.point_m, w.normal, w.half_extents_m, w.attenuation_db))
            .collect::<Result<Vec<_>, _>>()?;
        let scene = Scene {
            emitters: self.emitters,
            walls,
            chain: ReceiveChain {
                pattern,
                lna_gain_db: self.chain.lna_gain_db,
                noise_figure_db: self.chain.noise_figure_db,
                calibration_offset_db: self.chain.calibration_offset_db,
            },
            temperature_k: self.temperature_k,
        };
        scene.validate()?;
        Ok(scene)
    }
}

pub fn load_scene(path: &Path) -> Result<Scene, SceneError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        file: shown.clone(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    SceneFile::parse(&text, &shown)?.into_scene(base)
}
