//! Passive 2-D direction finding with a rotor-steered directional antenna
//! and a software-defined radio.
//!
//! The crate is hardware-free: [`serial_protocol::SimDevice`] stands in for
//! the rotor firmware and [`sdr::SimBackend`] synthesizes IQ from an
//! [`scene::Scene`] of emitters and walls.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod antenna;
pub mod heatmap;
pub mod rotor;
pub mod scan;
pub mod scene;
pub mod sdr;
pub mod serial_protocol;

pub use antenna::{AntennaPattern, HelixDesign};
pub use heatmap::{Colormap, Heatmap};
pub use rotor::{AngularPose, RotorConfig};
pub use scan::{execute_scan, ScanOptions, ScanOutcome, ScanPlan};
pub use scene::Scene;
pub use sdr::{CaptureRequest, IqCapture, SdrBackend, SimBackend};
pub use serial_protocol::{Command, LineClient, Response, RotorLink, SimDevice};
