//! Run configuration: JSON file values overridden by command-line flags.

use std::path::{Path, PathBuf};

use emscan_core::rotor::RotorConfig;
use emscan_core::scan::{build_hop_plan, NoiseSeeding, ScanPlan};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Simulated rotor controller and simulated SDR.
    Sim,
    /// Rotor controller on a serial device; captures still simulated.
    Serial,
}

/// Everything a run needs. Serialized into the manifest, which can be fed
/// back with `--config` to repeat the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub az_range: [f64; 2],
    pub el_range: [f64; 2],
    pub az_pixels: usize,
    pub el_pixels: usize,
    pub band_hz: [f64; 2],
    pub hop_bandwidth_hz: f64,
    pub hop_duration_s: f64,
    pub settle_s: f64,
    pub unsafe_settle: bool,
    pub backend: BackendKind,
    pub scene: Option<PathBuf>,
    pub port: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub calibration_offset_db: Option<f64>,
    pub pipeline_depth: usize,
    pub seeding: NoiseSeeding,
    pub rotor: RotorConfig,
    pub colormap: String,
    pub upscale: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            az_range: [-90.0, 90.0],
            el_range: [0.0, 80.0],
            az_pixels: 100,
            el_pixels: 100,
            band_hz: [1648e6, 1728e6],
            hop_bandwidth_hz: 20e6,
            hop_duration_s: 0.125,
            settle_s: 0.5,
            unsafe_settle: false,
            backend: BackendKind::Sim,
            scene: None,
            port: None,
            out: PathBuf::from("scan_out"),
            seed: None,
            calibration_offset_db: None,
            pipeline_depth: 4,
            seeding: NoiseSeeding::PerHop,
            rotor: RotorConfig::default(),
            colormap: "inferno".into(),
            upscale: 4,
        }
    }
}

/// Same keys as [`RunConfig`], all optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub az_range: Option<[f64; 2]>,
    pub el_range: Option<[f64; 2]>,
    pub az_pixels: Option<usize>,
    pub el_pixels: Option<usize>,
    pub band_hz: Option<[f64; 2]>,
    pub hop_bandwidth_hz: Option<f64>,
    pub hop_duration_s: Option<f64>,
    pub settle_s: Option<f64>,
    pub unsafe_settle: Option<bool>,
    pub backend: Option<BackendKind>,
    pub scene: Option<PathBuf>,
    pub port: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub calibration_offset_db: Option<f64>,
    pub pipeline_depth: Option<usize>,
    pub seeding: Option<NoiseSeeding>,
    pub rotor: Option<RotorConfig>,
    pub colormap: Option<String>,
    pub upscale: Option<usize>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Usage(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))
    }
}

macro_rules! overlay_fields {
    ($dst:expr, $src:expr; $($f:ident),*) => {
        $( if let Some(v) = $src.$f { $dst.$f = v; } )*
    };
}

impl RunConfig {
    pub fn apply(&mut self, f: RunConfigFile) {
        overlay_fields!(self, f; az_range, el_range, az_pixels, el_pixels, band_hz, hop_bandwidth_hz,
            hop_duration_s, settle_s, unsafe_settle, backend, out, pipeline_depth, seeding, rotor,
            colormap, upscale);
        if f.scene.is_some() {
            self.scene = f.scene;
        }
        if f.port.is_some() {
            self.port = f.port;
        }
        if f.seed.is_some() {
            self.seed = f.seed;
        }
        if f.calibration_offset_db.is_some() {
            self.calibration_offset_db = f.calibration_offset_db;
        }
    }

    pub fn band_label(&self) -> String {
        format!("{}-{} MHz", self.band_hz[0] / 1e6, self.band_hz[1] / 1e6)
    }

    pub fn plan(&self) -> Result<ScanPlan, CliError> {
        let hops = build_hop_plan(self.band_hz[0], self.band_hz[1], self.hop_bandwidth_hz, self.hop_duration_s)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let plan = ScanPlan {
            az_range: self.az_range,
            el_range: self.el_range,
            az_pixels: self.az_pixels,
            el_pixels: self.el_pixels,
            hops,
            settle_s: self.settle_s,
            unsafe_settle: self.unsafe_settle,
            band_label: self.band_label(),
        };
        plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.rotor.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        plan.validate_travel(&self.rotor).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_defaults_and_unknown_keys_fail() {
        let f: RunConfigFile = serde_json::from_str(r#"{"az_pixels": 10, "seed": 3, "seeding": "per_capture"}"#).unwrap();
        let mut c = RunConfig::default();
        c.apply(f);
        assert_eq!(c.az_pixels, 10);
        assert_eq!(c.el_pixels, 100);
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.seeding, NoiseSeeding::PerCapture);
        assert!(serde_json::from_str::<RunConfigFile>(r#"{"az_pixel": 10}"#).is_err());
    }

    #[test]
    fn resolved_config_reads_back_as_a_file() {
        let c = RunConfig {
            seed: Some(9),
            scene: Some("scenarios/desktop_6ft.json".into()),
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&c).unwrap();
        let f: RunConfigFile = serde_json::from_str(&text).unwrap();
        let mut d = RunConfig::default();
        d.apply(f);
        assert_eq!(c, d);
    }
}
