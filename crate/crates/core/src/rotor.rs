//! Gear-train step arithmetic, travel limits, limit-switch homing and move
//! planning for the two-axis rotor.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RotorError {
    #[error("{axis} angle {angle} deg outside travel [{min}, {max}]")]
    OutOfTravel {
        axis: Axis,
        angle: f64,
        min: f64,
        max: f64,
    },
    #[error("rotor not homed")]
    NotHomed,
    #[error("invalid rotor config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Az,
    El,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Az => "azimuth",
            Axis::El => "elevation",
        })
    }
}

/// Pointing direction in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularPose {
    pub az: f64,
    pub el: f64,
}

impl AngularPose {
    pub const fn new(az: f64, el: f64) -> Self {
        Self { az, el }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Travel {
    pub min: f64,
    pub max: f64,
}

impl Travel {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, angle: f64) -> bool {
        angle >= self.min && angle <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotorConfig {
    /// Driven:driver teeth, 300:12 herringbone.
    pub az_gear_ratio: f64,
    /// Worm wheel teeth per worm start.
    pub el_gear_ratio: f64,
    pub motor_full_steps_per_rev: u32,
    pub microsteps: u32,
    pub az_travel: Travel,
    pub el_travel: Travel,
    pub az_backlash_steps: u32,
    pub el_backlash_steps: u32,
}

impl Default for RotorConfig {
    fn default() -> Self {
        Self {
            az_gear_ratio: 300.0 / 12.0,
            el_gear_ratio: 40.0,
            motor_full_steps_per_rev: 200,
            microsteps: 16,
            az_travel: Travel::new(-90.0, 90.0),
            el_travel: Travel::new(0.0, 80.0),
            az_backlash_steps: 0,
            el_backlash_steps: 0,
        }
    }
}

/// Back-off distance after the first switch strike while homing.
pub const HOMING_BACKOFF_DEG: f64 = 2.0;

/// Minimum post-move dwell before a capture is trusted.
pub const DEFAULT_SETTLE_S: f64 = 0.5;

impl RotorConfig {
    pub fn validate(&self) -> Result<(), RotorError> {
        let bad = |m: &str| Err(RotorError::InvalidConfig(m.to_string()));
        if !(self.az_gear_ratio > 0.0 && self.el_gear_ratio > 0.0) {
            return bad("gear ratios must be positive");
        }
        if self.motor_full_steps_per_rev == 0 || self.microsteps == 0 {
            return bad("steps per revolution must be positive");
        }
        if !(self.az_travel.min < self.az_travel.max && self.el_travel.min < self.el_travel.max) {
            return bad("travel min must be below travel max");
        }
        Ok(())
    }

    pub fn travel(&self, axis: Axis) -> Travel {
        match axis {
            Axis::Az => self.az_travel,
            Axis::El => self.el_travel,
        }
    }

    pub fn backlash(&self, axis: Axis) -> u32 {
        match axis {
            Axis::Az => self.az_backlash_steps,
            Axis::El => self.el_backlash_steps,
        }
    }

    /// Motor microsteps per output-shaft revolution.
    pub fn steps_per_rev(&self, axis: Axis) -> f64 {
        let ratio = match axis {
            Axis::Az => self.az_gear_ratio,
            Axis::El => self.el_gear_ratio,
        };
        f64::from(self.motor_full_steps_per_rev) * f64::from(self.microsteps) * ratio
    }

    pub fn step_size_deg(&self, axis: Axis) -> f64 {
        360.0 / self.steps_per_rev(axis)
    }

    /// Step count of the travel minimum, where the limit switch sits.
    pub fn min_steps(&self, axis: Axis) -> i64 {
        quantize(self.travel(axis).min / 360.0 * self.steps_per_rev(axis))
    }

    pub fn max_steps(&self, axis: Axis) -> i64 {
        quantize(self.travel(axis).max / 360.0 * self.steps_per_rev(axis))
    }
}

fn quantize(x: f64) -> i64 {
    // f64::round is half-away-from-zero
    x.round() as i64
}

pub fn angle_to_steps(config: &RotorConfig, axis: Axis, angle: f64) -> Result<i64, RotorError> {
    let t = config.travel(axis);
    if !t.contains(angle) {
        return Err(RotorError::OutOfTravel {
            axis,
            angle,
            min: t.min,
            max: t.max,
        });
    }
    Ok(quantize(angle / 360.0 * config.steps_per_rev(axis)))
}

pub fn steps_to_angle(config: &RotorConfig, axis: Axis, steps: i64) -> f64 {
    steps as f64 * 360.0 / config.steps_per_rev(axis)
}

pub fn pose_to_steps(config: &RotorConfig, pose: &AngularPose) -> Result<(i64, i64), RotorError> {
    Ok((
        angle_to_steps(config, Axis::Az, pose.az)?,
        angle_to_steps(config, Axis::El, pose.el)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HomingPhase {
    Idle,
    SeekingFast,
    BackingOff,
    SeekingSlow,
    Zeroed,
    /// Switch re-triggered after zeroing; requires a new homing run.
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotorState {
    pub az_steps: i64,
    pub el_steps: i64,
    pub homed: bool,
    pub phase: HomingPhase,
}

impl Default for RotorState {
    fn default() -> Self {
        Self {
            az_steps: 0,
            el_steps: 0,
            homed: false,
            phase: HomingPhase::Idle,
        }
    }
}

impl RotorState {
    pub fn pose(&self, config: &RotorConfig) -> Result<AngularPose, RotorError> {
        if !self.homed {
            return Err(RotorError::NotHomed);
        }
        Ok(AngularPose::new(
            steps_to_angle(config, Axis::Az, self.az_steps),
            steps_to_angle(config, Axis::El, self.el_steps),
        ))
    }
}

/// Back-off move length per axis, in steps.
pub fn homing_backoff_steps(config: &RotorConfig, axis: Axis) -> i64 {
    quantize(HOMING_BACKOFF_DEG / 360.0 * config.steps_per_rev(axis))
}

/// One transition of the homing machine. `limit_hit` is the combined
/// minimum-switch signal sampled after the motion implied by the current
/// phase. In `BackingOff` the caller has already retreated the back-off
/// distance; a still-pressed switch means another back-off.
pub fn home_step(config: &RotorConfig, state: RotorState, limit_hit: bool) -> RotorState {
    use HomingPhase::*;
    let mut next = state;
    next.phase = match (state.phase, limit_hit) {
        (Idle, _) => {
            next.homed = false;
            SeekingFast
        }
        (SeekingFast, false) => SeekingFast,
        (SeekingFast, true) => BackingOff,
        (BackingOff, true) => BackingOff,
        (BackingOff, false) => SeekingSlow,
        (SeekingSlow, false) => SeekingSlow,
        (SeekingSlow, true) => {
            next.az_steps = config.min_steps(Axis::Az);
            next.el_steps = config.min_steps(Axis::El);
            next.homed = true;
            Zeroed
        }
        (Zeroed, false) => Zeroed,
        (Zeroed, true) | (Fault, _) => {
            next.homed = false;
            Fault
        }
    };
    next
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovePlan {
    pub az_delta: i64,
    pub el_delta: i64,
    /// Minimum dwell after the move completes, seconds.
    pub settle_hint_s: f64,
}

/// Tracks direction history so that reversals pick up backlash compensation.
#[derive(Debug, Clone)]
pub struct MotionPlanner {
    config: RotorConfig,
    settle_s: f64,
    homed: bool,
    last_dir: [i8; 2],
}

impl MotionPlanner {
    pub fn new(config: RotorConfig) -> Self {
        Self {
            config,
            settle_s: DEFAULT_SETTLE_S,
            homed: false,
            last_dir: [0, 0],
        }
    }

    pub fn with_settle(mut self, settle_s: f64) -> Self {
        self.settle_s = settle_s;
        self
    }

    pub fn config(&self) -> &RotorConfig {
        &self.config
    }

    /// Marks the rotor homed and forgets direction history.
    pub fn set_homed(&mut self, homed: bool) {
        self.homed = homed;
        self.last_dir = [0, 0];
    }

    pub fn plan_move(&mut self, from: &AngularPose, to: &AngularPose) -> Result<MovePlan, RotorError> {
        if !self.homed {
            return Err(RotorError::NotHomed);
        }
        let (fa, fe) = pose_to_steps(&self.config, from)?;
        let (ta, te) = pose_to_steps(&self.config, to)?;
        let az = self.compensate(Axis::Az, ta - fa);
        let el = self.compensate(Axis::El, te - fe);
        Ok(MovePlan {
            az_delta: az,
            el_delta: el,
            settle_hint_s: self.settle_s,
        })
    }

    fn compensate(&mut self, axis: Axis, delta: i64) -> i64 {
        if delta == 0 {
            return 0;
        }
        let slot = match axis {
            Axis::Az => 0,
            Axis::El => 1,
        };
        let dir = delta.signum() as i8;
        let prev = self.last_dir[slot];
        self.last_dir[slot] = dir;
        if prev != 0 && prev != dir {
            delta + i64::from(dir) * i64::from(self.config.backlash(axis))
        } else {
            delta
        }
    }
}

/// Free-function form of [`MotionPlanner::plan_move`].
pub fn plan_move(
    planner: &mut MotionPlanner,
    from: &AngularPose,
    to: &AngularPose,
) -> Result<MovePlan, RotorError> {
    planner.plan_move(from, to)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn angle_to_steps_examples() {
        let c = RotorConfig::default();
        assert_eq!(angle_to_steps(&c, Axis::Az, 90.0).unwrap(), 20000);
        assert_eq!(angle_to_steps(&c, Axis::Az, 0.0).unwrap(), 0);
        assert_eq!(angle_to_steps(&c, Axis::El, 1.0).unwrap(), 356);
        let err = angle_to_steps(&c, Axis::El, -1.0).unwrap_err();
        assert!(err.to_string().contains("elevation"));
        assert!(err.to_string().contains("[0, 80]"));
    }

    #[test]
    fn quantization_is_symmetric() {
        let c = RotorConfig {
            az_gear_ratio: 1.0,
            motor_full_steps_per_rev: 360,
            microsteps: 2,
            ..RotorConfig::default()
        };
        // 0.25 deg = 0.5 step: half away from zero on both sides
        assert_eq!(angle_to_steps(&c, Axis::Az, 0.25).unwrap(), 1);
        assert_eq!(angle_to_steps(&c, Axis::Az, -0.25).unwrap(), -1);
    }

    #[test]
    fn steps_to_angle_examples() {
        let c = RotorConfig::default();
        assert_eq!(steps_to_angle(&c, Axis::Az, 20000), 90.0);
        assert!((steps_to_angle(&c, Axis::Az, 1) - 0.0045).abs() < 1e-15);
        assert_eq!(steps_to_angle(&c, Axis::El, 0), 0.0);
    }

    #[test]
    fn homing_transitions() {
        let c = RotorConfig::default();
        let s = home_step(&c, RotorState::default(), false);
        assert_eq!(s.phase, HomingPhase::SeekingFast);
        let slow = RotorState {
            phase: HomingPhase::SeekingSlow,
            ..RotorState::default()
        };
        let z = home_step(&c, slow, true);
        assert_eq!(z.phase, HomingPhase::Zeroed);
        assert!(z.homed);
        assert_eq!(z.az_steps, angle_to_steps(&c, Axis::Az, -90.0).unwrap());
        assert_eq!(z.el_steps, 0);
        let f = home_step(&c, z, true);
        assert_eq!(f.phase, HomingPhase::Fault);
        assert!(!f.homed);
        assert!(f.pose(&c).is_err());
    }

    #[test]
    fn pose_requires_homing() {
        let c = RotorConfig::default();
        assert_eq!(RotorState::default().pose(&c), Err(RotorError::NotHomed));
    }

    #[test]
    fn plan_move_examples() {
        let mut p = MotionPlanner::new(RotorConfig::default());
        let o = AngularPose::new(0.0, 0.0);
        assert_eq!(p.plan_move(&o, &o), Err(RotorError::NotHomed));
        p.set_homed(true);
        let m = p.plan_move(&o, &AngularPose::new(1.8, 0.0)).unwrap();
        assert_eq!((m.az_delta, m.el_delta, m.settle_hint_s), (400, 0, 0.5));
        let m = p.plan_move(&o, &o).unwrap();
        assert_eq!((m.az_delta, m.el_delta), (0, 0));
    }

    #[test]
    fn backlash_on_reversal() {
        let c = RotorConfig {
            az_backlash_steps: 5,
            ..RotorConfig::default()
        };
        let mut p = MotionPlanner::new(c);
        p.set_homed(true);
        let a = AngularPose::new(0.0, 0.0);
        let b = AngularPose::new(1.8, 0.0);
        assert_eq!(p.plan_move(&a, &b).unwrap().az_delta, 400);
        assert_eq!(p.plan_move(&b, &a).unwrap().az_delta, -405);
        assert_eq!(p.plan_move(&b, &a).unwrap().az_delta, -400);
    }

    fn run_homing(c: &RotorConfig, trace: &[bool]) -> (RotorState, usize) {
        let mut s = RotorState::default();
        for (i, &hit) in trace.iter().enumerate() {
            s = home_step(c, s, hit);
            if s.phase == HomingPhase::Zeroed {
                return (s, i + 1);
            }
        }
        (s, trace.len())
    }

    proptest! {
        #[test]
        fn step_angle_round_trip(axis in prop_oneof![Just(Axis::Az), Just(Axis::El)], u in 0.0f64..=1.0) {
            let c = RotorConfig::default();
            let t = c.travel(axis);
            let a = t.min + u * (t.max - t.min);
            let back = steps_to_angle(&c, axis, angle_to_steps(&c, axis, a).unwrap());
            prop_assert!((back - a).abs() <= 0.5 * c.step_size_deg(axis) + 1e-12);
        }

        #[test]
        fn steps_to_angle_precision(steps in -10_000_000i64..10_000_000) {
            let c = RotorConfig::default();
            let exact = steps as f64 * 360.0 / 80000.0;
            let got = steps_to_angle(&c, Axis::Az, steps);
            prop_assert!(got == exact || ((got - exact) / exact).abs() < 1e-12);
        }

        // Any switch trace that eventually asserts in each seeking phase and
        // releases during back-off reaches Zeroed in bounded transitions.
        #[test]
        fn homing_terminates(fast in 0usize..50, held in 0usize..5, slow in 0usize..50) {
            let c = RotorConfig::default();
            let mut trace = vec![false];
            trace.extend(std::iter::repeat_n(false, fast));
            trace.push(true);
            trace.extend(std::iter::repeat_n(true, held));
            trace.push(false);
            trace.extend(std::iter::repeat_n(false, slow));
            trace.push(true);
            let (s, n) = run_homing(&c, &trace);
            prop_assert_eq!(s.phase, HomingPhase::Zeroed);
            prop_assert!(s.homed);
            prop_assert_eq!(n, trace.len());
        }

        #[test]
        fn elevation_never_moves_when_level(el in 0.0f64..80.0, az0 in -90.0f64..90.0, az1 in -90.0f64..90.0) {
            let mut p = MotionPlanner::new(RotorConfig { el_backlash_steps: 7, ..RotorConfig::default() });
            p.set_homed(true);
            let m = p.plan_move(&AngularPose::new(az0, el), &AngularPose::new(az1, el)).unwrap();
            prop_assert_eq!(m.el_delta, 0);
        }
    }
}
