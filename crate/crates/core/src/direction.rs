//! Cue sheets, the salient/idle player and controller classification.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::animation::{crossfade, Clip, Salience};
use crate::navigation::Point;
use crate::skeleton::{Pose, Skeleton};

pub const DEFAULT_FADE_IN: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum DirectionError {
    #[error("cue {cue:?} references unknown clip {clip:?}")]
    UnknownClip { cue: String, clip: String },
    #[error("cue {cue:?}: clip {clip:?} is tagged {found}, expected {expected}")]
    WrongSalience {
        cue: String,
        clip: String,
        expected: Salience,
        found: Salience,
    },
    #[error("cue {cue:?}: idle clip {clip:?} is not loopable")]
    IdleNotLoopable { cue: String, clip: String },
    #[error("cue {cue:?}: fade_in must be a finite number >= 0")]
    BadFade { cue: String },
    #[error("cue {cue:?}: clip {clip:?} targets skeleton {found:?}, player uses {expected:?}")]
    SkeletonMismatch {
        cue: String,
        clip: String,
        expected: String,
        found: String,
    },
    #[error("duplicate cue id {0:?} (cue groups are disabled)")]
    DuplicateCue(String),
    #[error("unknown cue {0:?}")]
    UnknownCue(String),
    #[error("pose for skeleton {found:?} cannot seed a player on {expected:?}")]
    PoseMismatch { expected: String, found: String },
    #[error("controller: {0}")]
    Controller(String),
}

/// Relative stage move applied to the avatar when its cue fires.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageAdjustment {
    pub dx: f64,
    pub dz: f64,
    pub dyaw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cue {
    pub id: String,
    pub avatar: String,
    pub salient: String,
    pub idle: String,
    pub fade_in: f64,
    pub adjust: Option<StageAdjustment>,
    /// Walk here before the gesture. Only meaningful for locomotion-driven avatars.
    pub walk_to: Option<Point>,
}

impl Cue {
    pub fn new(id: impl Into<String>, avatar: impl Into<String>, salient: impl Into<String>, idle: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            avatar: avatar.into(),
            salient: salient.into(),
            idle: idle.into(),
            fade_in: DEFAULT_FADE_IN,
            adjust: None,
            walk_to: None,
        }
    }
}

/// Ordered cues plus the index of the next one to fire.
#[derive(Debug, Clone, PartialEq)]
pub struct CueSheet {
    cues: Vec<Cue>,
    pointer: usize,
    allow_groups: bool,
}

impl CueSheet {
    /// With `allow_groups`, adjacent cues sharing an id form a group that fires on one GO.
    pub fn new(cues: Vec<Cue>, allow_groups: bool) -> Result<Self, DirectionError> {
        let mut first_seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, c) in cues.iter().enumerate() {
            if let Some(&j) = first_seen.get(c.id.as_str()) {
                let adjacent_group = allow_groups && cues[j..i].iter().all(|o| o.id == c.id);
                if !adjacent_group {
                    return Err(DirectionError::DuplicateCue(c.id.clone()));
                }
            } else {
                first_seen.insert(&c.id, i);
            }
        }
        Ok(Self {
            cues,
            pointer: 0,
            allow_groups,
        })
    }

    pub fn cues(&self) -> &[Cue] {
        &self.cues
    }

    pub fn pointer(&self) -> usize {
        self.pointer
    }

    pub fn len(&self) -> usize {
        self.cues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cues.is_empty()
    }

    pub fn allow_groups(&self) -> bool {
        self.allow_groups
    }

    fn group_end(&self, start: usize) -> usize {
        let id = &self.cues[start].id;
        start + self.cues[start..].iter().take_while(|c| &c.id == id).count()
    }

    /// Fires the cue (or cue group) at the pointer and advances past it. Empty when exhausted.
    pub fn go(&mut self) -> Vec<Cue> {
        if self.pointer >= self.cues.len() {
            return Vec::new();
        }
        let end = self.group_end(self.pointer);
        let fired = self.cues[self.pointer..end].to_vec();
        self.pointer = end;
        fired
    }

    /// Steps the pointer back one cue (or group), stopping at 0.
    pub fn back(&mut self) {
        if self.pointer == 0 {
            return;
        }
        self.pointer -= 1;
        while self.pointer > 0 && self.cues[self.pointer - 1].id == self.cues[self.pointer].id {
            self.pointer -= 1;
        }
    }

    /// Moves the pointer to the cue with this id so the next GO fires it.
    pub fn goto(&mut self, id: &str) -> Result<(), DirectionError> {
        self.pointer = self.position(id)?;
        Ok(())
    }

    /// The cues with this id, without moving the pointer.
    pub fn lookup(&self, id: &str) -> Result<Vec<Cue>, DirectionError> {
        let start = self.position(id)?;
        Ok(self.cues[start..self.group_end(start)].to_vec())
    }

    fn position(&self, id: &str) -> Result<usize, DirectionError> {
        self.cues
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| DirectionError::UnknownCue(id.to_string()))
    }
}

/// A cue with its clips resolved and checked.
#[derive(Debug, Clone)]
pub struct Gesture {
    pub label: String,
    /// `None` plays the idle loop straight away.
    pub salient: Option<Arc<Clip>>,
    pub idle: Arc<Clip>,
    pub fade_in: f64,
}

impl Gesture {
    pub fn new(
        label: impl Into<String>,
        salient: Option<Arc<Clip>>,
        idle: Arc<Clip>,
        fade_in: f64,
    ) -> Result<Self, DirectionError> {
        let label = label.into();
        if !(fade_in.is_finite() && fade_in >= 0.0) {
            return Err(DirectionError::BadFade { cue: label });
        }
        if let Some(s) = &salient {
            check_tag(&label, s, Salience::Salient)?;
            if s.skeleton() != idle.skeleton() {
                return Err(DirectionError::SkeletonMismatch {
                    cue: label,
                    clip: s.name().to_string(),
                    expected: idle.skeleton().to_string(),
                    found: s.skeleton().to_string(),
                });
            }
        }
        check_tag(&label, &idle, Salience::Idle)?;
        if !idle.loopable() {
            return Err(DirectionError::IdleNotLoopable {
                cue: label,
                clip: idle.name().to_string(),
            });
        }
        Ok(Self {
            label,
            salient,
            idle,
            fade_in,
        })
    }

    pub fn skeleton(&self) -> &str {
        self.idle.skeleton()
    }
}

fn check_tag(cue: &str, clip: &Clip, expected: Salience) -> Result<(), DirectionError> {
    if clip.salience() != expected {
        return Err(DirectionError::WrongSalience {
            cue: cue.to_string(),
            clip: clip.name().to_string(),
            expected,
            found: clip.salience(),
        });
    }
    Ok(())
}

/// Looks up a cue's clips by name.
pub fn resolve_cue(cue: &Cue, clips: &BTreeMap<String, Arc<Clip>>) -> Result<Gesture, DirectionError> {
    let get = |name: &str| {
        clips.get(name).cloned().ok_or_else(|| DirectionError::UnknownClip {
            cue: cue.id.clone(),
            clip: name.to_string(),
        })
    };
    Gesture::new(cue.id.clone(), Some(get(&cue.salient)?), get(&cue.idle)?, cue.fade_in)
}

/// Elapsed time kept as `base + n * dt` so fixed-step runs land on exact multiples.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Clock {
    base: f64,
    dt: f64,
    n: u64,
}

impl Clock {
    fn starting_at(base: f64) -> Self {
        Self { base, dt: 0.0, n: 0 }
    }

    fn value(&self) -> f64 {
        self.base + self.n as f64 * self.dt
    }

    fn advance(&mut self, dt: f64) {
        if dt != self.dt {
            *self = Self {
                base: self.value(),
                dt,
                n: 0,
            };
        }
        self.n += 1;
    }

    /// True once the clock has reached `limit`, judged in whole steps of the current dt.
    fn reached(&self, limit: f64) -> bool {
        if self.dt > 0.0 {
            self.n as f64 >= (limit - self.base) / self.dt
        } else {
            self.base >= limit
        }
    }
}

#[derive(Debug, Clone)]
pub enum PlayerState {
    Inactive,
    PlayingSalient { gesture: Arc<Gesture>, clock: ClockPhase },
    LoopingIdle { gesture: Arc<Gesture>, clock: ClockPhase },
}

/// Opaque phase holder; read it with [`ClockPhase::phase`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockPhase(Clock);

impl ClockPhase {
    pub fn phase(&self) -> f64 {
        self.0.value()
    }
}

#[derive(Debug, Clone)]
struct Fade {
    from: Pose,
    elapsed: f64,
    duration: f64,
}

/// Plays a salient clip once, then loops its idle until the next trigger.
#[derive(Debug, Clone)]
pub struct SalientIdlePlayer {
    skeleton: Arc<Skeleton>,
    state: PlayerState,
    fade: Option<Fade>,
}

impl SalientIdlePlayer {
    pub fn new(skeleton: Arc<Skeleton>) -> Self {
        Self {
            skeleton,
            state: PlayerState::Inactive,
            fade: None,
        }
    }

    pub fn state(&self) -> &PlayerState {
        &self.state
    }

    pub fn skeleton(&self) -> &Arc<Skeleton> {
        &self.skeleton
    }

    /// Short label: "inactive", "salient:<cue>" or "idle:<cue>".
    pub fn label(&self) -> String {
        match &self.state {
            PlayerState::Inactive => "inactive".to_string(),
            PlayerState::PlayingSalient { gesture, .. } => format!("salient:{}", gesture.label),
            PlayerState::LoopingIdle { gesture, .. } => format!("idle:{}", gesture.label),
        }
    }

    /// Name of the clip currently sampled, if any.
    pub fn clip_name(&self) -> Option<&str> {
        match &self.state {
            PlayerState::Inactive => None,
            PlayerState::PlayingSalient { gesture, .. } => gesture.salient.as_ref().map(|c| c.name()),
            PlayerState::LoopingIdle { gesture, .. } => Some(gesture.idle.name()),
        }
    }

    pub fn is_fading(&self) -> bool {
        self.fade.is_some()
    }

    /// Output pose for the current state without advancing time.
    pub fn current_pose(&self) -> Pose {
        let target = match &self.state {
            PlayerState::Inactive => self.skeleton.bind_pose(),
            PlayerState::PlayingSalient { gesture, clock } => {
                let clip = gesture.salient.as_ref().expect("salient state always holds a salient clip");
                self.sample(clip, clock.phase(), false)
            }
            PlayerState::LoopingIdle { gesture, clock } => self.sample(&gesture.idle, clock.phase(), true),
        };
        match &self.fade {
            Some(f) if f.duration > 0.0 && f.elapsed < f.duration => {
                crossfade(&f.from, &target, f.elapsed / f.duration).expect("fade source checked at trigger")
            }
            _ => target,
        }
    }

    fn sample(&self, clip: &Clip, t: f64, wrap: bool) -> Pose {
        clip.sample(&self.skeleton, t, wrap)
            .expect("gesture clips are checked against the player skeleton at trigger")
    }
}

/// Starts `gesture`, fading from `current_pose` over its fade time. Interrupts whatever was playing.
pub fn trigger_cue(
    player: &mut SalientIdlePlayer,
    gesture: Arc<Gesture>,
    current_pose: Pose,
) -> Result<(), DirectionError> {
    if *current_pose.skeleton != *player.skeleton.name() {
        return Err(DirectionError::PoseMismatch {
            expected: player.skeleton.name().to_string(),
            found: current_pose.skeleton.to_string(),
        });
    }
    for clip in gesture.salient.iter().chain(std::iter::once(&gesture.idle)) {
        if clip.check_skeleton(&player.skeleton).is_err() {
            return Err(DirectionError::SkeletonMismatch {
                cue: gesture.label.clone(),
                clip: clip.name().to_string(),
                expected: player.skeleton.name().to_string(),
                found: clip.skeleton().to_string(),
            });
        }
    }
    player.fade = (gesture.fade_in > 0.0).then(|| Fade {
        from: current_pose,
        elapsed: 0.0,
        duration: gesture.fade_in,
    });
    let clock = ClockPhase(Clock::starting_at(0.0));
    player.state = if gesture.salient.is_some() {
        PlayerState::PlayingSalient { gesture, clock }
    } else {
        PlayerState::LoopingIdle { gesture, clock }
    };
    Ok(())
}

/// Advances by `dt` and returns the new output pose.
pub fn tick_player(player: &mut SalientIdlePlayer, dt: f64) -> Pose {
    if let Some(f) = &mut player.fade {
        f.elapsed += dt;
        if f.elapsed >= f.duration {
            player.fade = None;
        }
    }
    let next = match std::mem::replace(&mut player.state, PlayerState::Inactive) {
        PlayerState::Inactive => PlayerState::Inactive,
        PlayerState::PlayingSalient { gesture, mut clock } => {
            clock.0.advance(dt);
            let duration = gesture.salient.as_ref().map_or(0.0, |c| c.duration());
            if clock.0.reached(duration) {
                let overflow = (clock.phase() - duration).max(0.0);
                let idle = wrap_idle(overflow, gesture.idle.duration());
                PlayerState::LoopingIdle {
                    gesture,
                    clock: ClockPhase(Clock::starting_at(idle)),
                }
            } else {
                PlayerState::PlayingSalient { gesture, clock }
            }
        }
        PlayerState::LoopingIdle { gesture, mut clock } => {
            clock.0.advance(dt);
            let d = gesture.idle.duration();
            if clock.phase() >= d {
                clock = ClockPhase(Clock::starting_at(wrap_idle(clock.phase(), d)));
            }
            PlayerState::LoopingIdle { gesture, clock }
        }
    };
    player.state = next;
    player.current_pose()
}

fn wrap_idle(t: f64, duration: f64) -> f64 {
    let w = t.rem_euclid(duration);
    if w >= duration {
        0.0
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Internal,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Internal,
    External,
}

/// Where an avatar's movement comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MotionSource {
    /// Live or recorded capture; `retarget` names the bone map when the stream skeleton differs.
    Mocap { retarget: Option<String> },
    /// Authored clips through the salient/idle player.
    Clips,
    /// Capsule locomotion.
    Locomotion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControllerConfig {
    pub origin: Origin,
    pub decision: Decision,
    pub source: MotionSource,
    /// Behaviour tree name; required iff decision is internal.
    pub behaviour: Option<String>,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), DirectionError> {
        let fail = |m: &str| Err(DirectionError::Controller(m.to_string()));
        match (self.origin, &self.source) {
            (Origin::External, MotionSource::Locomotion) => {
                return fail("external origin needs a mocap or clip source")
            }
            (Origin::Internal, MotionSource::Mocap { .. } | MotionSource::Clips) => {
                return fail("internal origin needs procedural locomotion")
            }
            _ => {}
        }
        match (self.decision, &self.behaviour) {
            (Decision::Internal, None) => fail("internal decision needs a behaviour tree"),
            (Decision::External, Some(_)) => fail("external decision cannot bind a behaviour tree"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Classification {
    Puppet,
    Mask,
    Golem,
    Actor,
}

impl Classification {
    pub fn label(self) -> &'static str {
        match self {
            Classification::Puppet => "Puppet",
            Classification::Mask => "Mask",
            Classification::Golem => "Golem",
            Classification::Actor => "Actor",
        }
    }
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn classify_controller(cfg: &ControllerConfig) -> Classification {
    match (cfg.origin, cfg.decision) {
        (Origin::External, Decision::External) => Classification::Puppet,
        (Origin::External, Decision::Internal) => Classification::Mask,
        (Origin::Internal, Decision::External) => Classification::Golem,
        (Origin::Internal, Decision::Internal) => Classification::Actor,
    }
}
