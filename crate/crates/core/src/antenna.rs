//! Axial-mode helix performance (Kraus closed forms) and directive gain
//! evaluation for the receive antenna.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rotor::AngularPose;

#[derive(Debug, thiserror::Error)]
pub enum AntennaError {
    #[error("invalid helix design: {0}")]
    InvalidDesign(String),
    #[error("invalid antenna pattern: {0}")]
    InvalidPattern(String),
    #[error("offset {0} deg outside [0, 180]")]
    OffsetOutOfDomain(f64),
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: no pattern rows")]
    Empty { path: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Axial-mode helix described by turns, pitch angle and circumference in
/// wavelengths at the design frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelixDesign {
    pub turns: u32,
    pub pitch_angle_deg: f64,
    pub circumference_wavelengths: f64,
    pub frequency_hz: f64,
    /// Free-form fabrication notes (wire gauge etc.), not used by any formula.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl HelixDesign {
    pub fn new(turns: u32, pitch_angle_deg: f64, circumference_wavelengths: f64) -> Self {
        Self {
            turns,
            pitch_angle_deg,
            circumference_wavelengths,
            frequency_hz: 2.45e9,
            notes: None,
        }
    }

    /// Rejects designs the formulas cannot evaluate; returns warnings for
    /// designs outside the axial-mode regime.
    pub fn validate(&self) -> Result<Vec<String>, AntennaError> {
        if self.turns == 0 {
            return Err(AntennaError::InvalidDesign("turns must be at least 1".into()));
        }
        if !(self.pitch_angle_deg > 0.0 && self.pitch_angle_deg < 90.0) {
            return Err(AntennaError::InvalidDesign(format!(
                "pitch angle {} deg not in (0, 90)",
                self.pitch_angle_deg
            )));
        }
        if !(self.circumference_wavelengths > 0.0 && self.circumference_wavelengths.is_finite()) {
            return Err(AntennaError::InvalidDesign(format!(
                "circumference {} wavelengths must be positive",
                self.circumference_wavelengths
            )));
        }
        if !(self.frequency_hz > 0.0 && self.frequency_hz.is_finite()) {
            return Err(AntennaError::InvalidDesign(format!(
                "frequency {} Hz must be positive",
                self.frequency_hz
            )));
        }
        let mut warnings = Vec::new();
        if self.turns < 3 {
            warnings.push(format!(
                "{} turns is below the 3-turn axial-mode minimum",
                self.turns
            ));
        }
        if !(0.75..=1.33).contains(&self.circumference_wavelengths) {
            warnings.push(format!(
                "circumference {} wavelengths outside the axial-mode band [0.75, 1.33]",
                self.circumference_wavelengths
            ));
        }
        Ok(warnings)
    }
}

/// Turn spacing in wavelengths, `C·tan(pitch)`.
pub fn spacing_from_pitch(design: &HelixDesign) -> f64 {
    design.circumference_wavelengths * design.pitch_angle_deg.to_radians().tan()
}

/// Directivity `15·C²·n·S` in dBi.
pub fn helix_gain_kraus(design: &HelixDesign) -> f64 {
    let c = design.circumference_wavelengths;
    let d = 15.0 * c * c * f64::from(design.turns) * spacing_from_pitch(design);
    10.0 * d.log10()
}

/// Half-power beamwidth in degrees for explicit circumference and spacing.
pub fn hpbw_kraus(turns: u32, circumference_wavelengths: f64, spacing_wavelengths: f64) -> f64 {
    52.0 / (circumference_wavelengths * (f64::from(turns) * spacing_wavelengths).sqrt())
}

pub fn helix_hpbw_kraus(design: &HelixDesign) -> f64 {
    hpbw_kraus(
        design.turns,
        design.circumference_wavelengths,
        spacing_from_pitch(design),
    )
}

/// Axial ratio `(2n+1)/(2n)` of the radiated circular polarization.
pub fn helix_axial_ratio(design: &HelixDesign) -> f64 {
    let n = f64::from(design.turns);
    (2.0 * n + 1.0) / (2.0 * n)
}

pub const DEFAULT_SIDELOBE_FLOOR_DB: f64 = -20.0;

#[derive(Debug, Clone, PartialEq)]
pub enum PatternModel {
    /// Parabolic-in-dB main lobe floored at `sidelobe_floor_db` below boresight.
    GaussianBeam { sidelobe_floor_db: f64 },
    /// `(offset_deg, gain_dbi)` rows sorted by offset.
    Tabulated { table: Vec<(f64, f64)> },
}

/// Rotationally symmetric directive gain about boresight.
#[derive(Debug, Clone, PartialEq)]
pub struct AntennaPattern {
    pub boresight_gain_dbi: f64,
    pub hpbw_deg: f64,
    pub model: PatternModel,
}

impl AntennaPattern {
    pub fn gaussian(boresight_gain_dbi: f64, hpbw_deg: f64, sidelobe_floor_db: f64) -> Result<Self, AntennaError> {
        let p = Self {
            boresight_gain_dbi,
            hpbw_deg,
            model: PatternModel::GaussianBeam { sidelobe_floor_db },
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds a tabulated pattern; rows are sorted by offset and the
    /// boresight gain is the table maximum. The half-power beamwidth is read
    /// off the table by interpolation (twice the first −3 dB crossing), or
    /// `360` when the table never drops 3 dB.
    pub fn tabulated(mut table: Vec<(f64, f64)>) -> Result<Self, AntennaError> {
        if table.is_empty() {
            return Err(AntennaError::InvalidPattern("empty table".into()));
        }
        if table.iter().any(|(o, g)| !o.is_finite() || !g.is_finite()) {
            return Err(AntennaError::InvalidPattern("non-finite table entry".into()));
        }
        table.sort_by(|a, b| a.0.total_cmp(&b.0));
        let g0 = table.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        let hpbw = table_hpbw(&table, g0);
        let p = Self {
            boresight_gain_dbi: g0,
            hpbw_deg: hpbw,
            model: PatternModel::Tabulated { table },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AntennaError> {
        if !(self.hpbw_deg > 0.0) {
            return Err(AntennaError::InvalidPattern(format!(
                "hpbw {} must be positive",
                self.hpbw_deg
            )));
        }
        if !self.boresight_gain_dbi.is_finite() {
            return Err(AntennaError::InvalidPattern("boresight gain not finite".into()));
        }
        match &self.model {
            PatternModel::GaussianBeam { sidelobe_floor_db } => {
                if !(*sidelobe_floor_db < 0.0) {
                    return Err(AntennaError::InvalidPattern(format!(
                        "sidelobe floor {sidelobe_floor_db} dB must be negative"
                    )));
                }
            }
            PatternModel::Tabulated { table } => {
                if table.is_empty() {
                    return Err(AntennaError::InvalidPattern("empty table".into()));
                }
                if table.windows(2).any(|w| w[1].0 < w[0].0) {
                    return Err(AntennaError::InvalidPattern("table offsets not sorted".into()));
                }
                if table.iter().any(|r| r.1 > self.boresight_gain_dbi) {
                    return Err(AntennaError::InvalidPattern(
                        "table gain exceeds boresight gain".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Gain in dBi at `offset_deg` degrees off boresight.
    pub fn gain(&self, offset_deg: f64) -> Result<f64, AntennaError> {
        if !(0.0..=180.0).contains(&offset_deg) {
            return Err(AntennaError::OffsetOutOfDomain(offset_deg));
        }
        Ok(match &self.model {
            PatternModel::GaussianBeam { sidelobe_floor_db } => {
                let rolloff = -12.0 * (offset_deg / self.hpbw_deg).powi(2);
                self.boresight_gain_dbi + rolloff.max(*sidelobe_floor_db)
            }
            PatternModel::Tabulated { table } => interpolate(table, offset_deg),
        })
    }
}

/// Free-function form of [`AntennaPattern::gain`].
pub fn pattern_gain(pattern: &AntennaPattern, offset_deg: f64) -> Result<f64, AntennaError> {
    pattern.gain(offset_deg)
}

fn interpolate(table: &[(f64, f64)], x: f64) -> f64 {
    let first = table[0];
    let last = table[table.len() - 1];
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    let k = table.partition_point(|r| r.0 <= x);
    let (x0, y0) = table[k - 1];
    let (x1, y1) = table[k];
    if x1 == x0 {
        return y1;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

fn table_hpbw(table: &[(f64, f64)], g0: f64) -> f64 {
    let target = g0 - 3.0;
    for w in table.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if y0 >= target && y1 <= target && y0 != y1 {
            return 2.0 * (x0 + (target - y0) * (x1 - x0) / (y1 - y0));
        }
    }
    360.0
}

/// Unit vector for a pose: x toward (az 0, el 0), y toward az +90°, z up.
pub fn pose_unit_vector(pose: &AngularPose) -> [f64; 3] {
    let (az, el) = (pose.az.to_radians(), pose.el.to_radians());
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// Great-circle angle in degrees between two pointing directions.
pub fn angular_offset(pose: &AngularPose, direction: &AngularPose) -> f64 {
    let a = pose_unit_vector(pose);
    let b = pose_unit_vector(direction);
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Reads a measured cut exported as `offset_deg,gain_dbi` rows.
///
/// A first line whose fields are both non-numeric is taken as a header.
pub fn load_measured_pattern(path: &Path) -> Result<AntennaPattern, AntennaError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| AntennaError::Io {
        path: shown.clone(),
        source,
    })?;
    parse_measured_pattern(&text, &shown)
}

pub fn parse_measured_pattern(text: &str, origin: &str) -> Result<AntennaPattern, AntennaError> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let err = |msg: String| AntennaError::Parse {
            path: origin.to_string(),
            line: line_no,
            msg,
        };
        if fields.len() != 2 {
            return Err(err(format!("expected 2 fields, found {}", fields.len())));
        }
        let offset = fields[0].parse::<f64>();
        let gain = fields[1].parse::<f64>();
        match (offset, gain) {
            (Ok(o), Ok(g)) if o.is_finite() && g.is_finite() => rows.push((o, g)),
            (Err(_), Err(_)) if line_no == 1 => continue,
            (Ok(_), Ok(_)) => return Err(err("non-finite value".into())),
            (Err(_), _) => return Err(err(format!("cannot parse offset {:?}", fields[0]))),
            (_, Err(_)) => return Err(err(format!("cannot parse gain {:?}", fields[1]))),
        }
    }
    if rows.is_empty() {
        return Err(AntennaError::Empty {
            path: origin.to_string(),
        });
    }
    if let Some(r) = rows.iter().find(|r| !(0.0..=180.0).contains(&r.0)) {
        return Err(AntennaError::InvalidPattern(format!(
            "offset {} deg outside [0, 180]",
            r.0
        )));
    }
    AntennaPattern::tabulated(rows)
}
