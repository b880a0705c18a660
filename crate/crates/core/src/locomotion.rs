//! Capsule locomotion: in-place clips chained by a two-state machine while
//! commands move and turn the capsule.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use thiserror::Error;

use crate::animation::{AnimationError, Clip};
use crate::math::{wrap_angle, Transform, Vec3};
use crate::skeleton::{Pose, Skeleton};

/// Below this magnitude a command velocity carries no direction.
const DIRECTION_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    /// Ground-plane position in x/z; y is a height offset.
    pub position: Vec3,
    pub yaw: f64,
    pub radius: f64,
    pub half_height: f64,
}

impl Default for Capsule {
    fn default() -> Self {
        Self {
            position: Vec3::ZERO,
            yaw: 0.0,
            radius: 0.3,
            half_height: 0.9,
        }
    }
}

impl Capsule {
    pub fn at(x: f64, z: f64, yaw: f64) -> Self {
        Self {
            position: Vec3::new(x, 0.0, z),
            yaw: wrap_angle(yaw),
            ..Self::default()
        }
    }

    pub fn ground(&self) -> [f64; 2] {
        [self.position.x, self.position.z]
    }

    pub fn placement(&self) -> Transform {
        Transform::from_ground(self.position.x, self.position.z, self.yaw).compose(&Transform::from_translation(
            Vec3::new(0.0, self.position.y, 0.0),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LocoMode {
    Idle,
    Walk,
}

impl LocoMode {
    pub fn label(self) -> &'static str {
        match self {
            LocoMode::Idle => "idle",
            LocoMode::Walk => "walk",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocomotionState {
    pub mode: LocoMode,
    pub speed: f64,
    pub clip: String,
    pub phase: f64,
    /// Direction of travel (yaw convention); kept while decelerating without a command.
    pub heading: f64,
}

impl LocomotionState {
    pub fn idle(params: &LocomotionParams) -> Self {
        Self {
            mode: LocoMode::Idle,
            speed: 0.0,
            clip: params.idle_clip.clone(),
            phase: 0.0,
            heading: 0.0,
        }
    }

    /// Keeps the phase inside `[0, duration)` to avoid precision loss on long runs.
    pub fn wrap_phase(&mut self, duration: f64) {
        if duration > 0.0 && self.phase >= duration {
            self.phase = self.phase.rem_euclid(duration);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocomotionCommand {
    /// Desired ground-plane velocity (x, z) in m/s.
    pub velocity: [f64; 2],
    pub facing: Option<f64>,
}

impl LocomotionCommand {
    pub const STOP: LocomotionCommand = LocomotionCommand {
        velocity: [0.0, 0.0],
        facing: None,
    };

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    /// Copy with the velocity magnitude limited to `max_speed`.
    pub fn clamped(&self, max_speed: f64) -> LocomotionCommand {
        let s = self.speed();
        if !s.is_finite() {
            return LocomotionCommand { velocity: [0.0, 0.0], ..*self };
        }
        if s <= max_speed {
            return *self;
        }
        let k = max_speed / s;
        LocomotionCommand {
            velocity: [self.velocity[0] * k, self.velocity[1] * k],
            facing: self.facing,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocomotionParams {
    pub walk_clip: String,
    /// Ground speed the walk clip was authored at (m/s).
    pub walk_speed: f64,
    pub idle_clip: String,
    pub walk_start_threshold: f64,
    pub walk_stop_threshold: f64,
    pub max_accel: f64,
    pub max_turn_rate: f64,
    pub rate_min: f64,
    pub rate_max: f64,
    pub max_speed: f64,
}

impl LocomotionParams {
    pub fn new(walk_clip: impl Into<String>, walk_speed: f64, idle_clip: impl Into<String>) -> Self {
        Self {
            walk_clip: walk_clip.into(),
            walk_speed,
            idle_clip: idle_clip.into(),
            walk_start_threshold: 0.1,
            walk_stop_threshold: 0.05,
            max_accel: 2.0,
            max_turn_rate: PI,
            rate_min: 0.5,
            rate_max: 2.0,
            max_speed: 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), LocomotionError> {
        let bad = |m: &str| Err(LocomotionError::InvalidParams(m.to_string()));
        if !(self.walk_stop_threshold > 0.0 && self.walk_stop_threshold < self.walk_start_threshold) {
            return bad("require 0 < walk_stop_threshold < walk_start_threshold");
        }
        if !(self.walk_speed > 0.0 && self.walk_speed.is_finite()) {
            return bad("walk_speed must be positive");
        }
        if !(self.max_accel > 0.0 && self.max_turn_rate > 0.0 && self.max_speed > 0.0) {
            return bad("max_accel, max_turn_rate and max_speed must be positive");
        }
        if !(self.rate_min > 0.0 && self.rate_min <= self.rate_max) {
            return bad("require 0 < rate_min <= rate_max");
        }
        Ok(())
    }

    fn clip_for(&self, mode: LocoMode) -> &str {
        match mode {
            LocoMode::Idle => &self.idle_clip,
            LocoMode::Walk => &self.walk_clip,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LocomotionError {
    #[error("invalid locomotion parameters: {0}")]
    InvalidParams(String),
    #[error("missing locomotion clip {0:?}")]
    MissingClip(String),
    #[error(transparent)]
    Animation(#[from] AnimationError),
}

/// Condition guarding a state transition, evaluated on the commanded target speed
/// and the speed reached after this tick.
#[derive(Debug, Clone, Copy)]
enum Guard {
    TargetAtLeastStart,
    TargetAtMostStopAndSettled,
}

/// Transition table; the first matching row wins.
const TRANSITIONS: &[(LocoMode, Guard, LocoMode)] = &[
    (LocoMode::Idle, Guard::TargetAtLeastStart, LocoMode::Walk),
    (LocoMode::Walk, Guard::TargetAtMostStopAndSettled, LocoMode::Idle),
];

impl Guard {
    fn holds(self, target: f64, speed: f64, p: &LocomotionParams) -> bool {
        match self {
            Guard::TargetAtLeastStart => target >= p.walk_start_threshold,
            Guard::TargetAtMostStopAndSettled => target <= p.walk_stop_threshold && speed < p.walk_stop_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocomotionTick {
    pub state: LocomotionState,
    pub capsule: Capsule,
    pub clip: String,
    pub rate: f64,
}

fn approach(from: f64, to: f64, max_step: f64) -> f64 {
    if to > from {
        (from + max_step).min(to)
    } else {
        (from - max_step).max(to)
    }
}

/// Advances one fixed step.
///
/// In Walk the speed approaches the commanded magnitude at `max_accel`; Idle only
/// decelerates. Yaw turns toward the requested facing (or the travel direction) at
/// `max_turn_rate` and the capsule translates along the commanded direction. Walk
/// returns to Idle once the target is at or below the stop threshold and the speed
/// has bled off beneath it.
pub fn tick_locomotion(
    state: &LocomotionState,
    capsule: &Capsule,
    cmd: &LocomotionCommand,
    params: &LocomotionParams,
    dt: f64,
) -> LocomotionTick {
    let cmd = cmd.clamped(params.max_speed);
    let target = cmd.speed();

    let effective = if state.mode == LocoMode::Walk && target > params.walk_stop_threshold {
        target
    } else {
        0.0
    };
    let speed = approach(state.speed, effective, params.max_accel * dt);
    let mode = TRANSITIONS
        .iter()
        .find(|(from, guard, _)| *from == state.mode && guard.holds(target, speed, params))
        .map_or(state.mode, |&(_, _, to)| to);

    let heading = if target > DIRECTION_EPSILON {
        cmd.velocity[0].atan2(cmd.velocity[1])
    } else {
        state.heading
    };
    let desired_yaw = cmd.facing.or((target > DIRECTION_EPSILON).then_some(heading));
    let mut out = *capsule;
    if let Some(desired) = desired_yaw {
        let diff = wrap_angle(desired - capsule.yaw);
        let limit = params.max_turn_rate * dt;
        out.yaw = wrap_angle(capsule.yaw + diff.clamp(-limit, limit));
    }
    let (s, c) = heading.sin_cos();
    out.position.x += s * speed * dt;
    out.position.z += c * speed * dt;

    let rate = match mode {
        LocoMode::Walk => (speed / params.walk_speed).clamp(params.rate_min, params.rate_max),
        LocoMode::Idle => 1.0,
    };
    let clip = params.clip_for(mode).to_string();
    let phase = if mode == state.mode { state.phase } else { 0.0 } + rate * dt;

    LocomotionTick {
        state: LocomotionState {
            mode,
            speed,
            clip: clip.clone(),
            phase,
            heading,
        },
        capsule: out,
        clip,
        rate,
    }
}

/// Samples the state's active in-place clip at its phase, looping.
pub fn locomotion_pose(
    state: &LocomotionState,
    clips: &BTreeMap<String, Arc<Clip>>,
    skeleton: &Skeleton,
) -> Result<Pose, LocomotionError> {
    let clip = clips
        .get(&state.clip)
        .ok_or_else(|| LocomotionError::MissingClip(state.clip.clone()))?;
    Ok(clip.sample(skeleton, state.phase, true)?)
}
