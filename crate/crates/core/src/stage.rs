//! The deterministic fixed-step scene loop.
//!
//! Each tick drains queued commands in arrival order, evaluates avatars in
//! ascending id order and emits an immutable [`SceneState`]. Simulated time is
//! always `tick * dt`.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::animation::{crossfade, Salience};
use crate::behaviour::{tick_bt, AvatarContext, Blackboard, BtCommand, BtMemory, Value};
use crate::direction::{
    classify_controller, resolve_cue, tick_player, trigger_cue, ControllerConfig, Cue, CueSheet, Gesture,
    MotionSource, SalientIdlePlayer,
};
use crate::locomotion::{locomotion_pose, tick_locomotion, Capsule, LocomotionCommand, LocomotionState};
use crate::math::{wrap_angle, Quat, Transform, Vec3};
use crate::navigation::{follow_path, Path, Point};
use crate::protocol::{AvatarSpec, MocapFrame, Show};
use crate::retarget::retarget_pose;
use crate::skeleton::{Pose, Skeleton};

pub const DEFAULT_DT: f64 = 1.0 / 60.0;
/// Crossfade applied when an avatar's controller changes.
pub const CONTROLLER_SWITCH_FADE: f64 = 0.3;
/// A mocap stream with no new frame for this long is reported once as stale.
pub const MOCAP_STALE_AFTER: f64 = 0.5;

/// Engine-level input, already resolved from wire messages.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Go,
    Back,
    Goto(String),
    TriggerCue(String),
    SetOffset { avatar: String, offset: Transform },
    SetController { avatar: String, config: ControllerConfig },
    Mocap(MocapFrame),
}

#[derive(Debug, Error, PartialEq)]
pub enum StageError {
    #[error("time step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("unknown avatar {0:?}")]
    UnknownAvatar(String),
    #[error("avatar {avatar:?}: controller rejected: {reason}")]
    ControllerRejected { avatar: String, reason: String },
    #[error("offset rotation is not unit length")]
    BadOffset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootState {
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
}

impl RootState {
    pub fn from_transform(t: &Transform) -> Self {
        Self {
            translation: t.translation.to_array(),
            rotation: t.rotation.to_array(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvatarSnapshot {
    pub id: String,
    /// Puppet, Mask, Golem or Actor.
    pub class: String,
    /// What drives the pose right now, e.g. "mocap", "walk", "salient:C3".
    pub state: String,
    pub clip: Option<String>,
    pub root: RootState,
    /// [x, z, yaw] of the capsule (or of the streamed root for mocap avatars).
    pub capsule: [f64; 3],
    /// Short hash of the local pose, for replay comparison without logging every bone.
    pub pose_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StageEvent {
    CueFired { id: String, avatar: String },
    ControllerChanged { avatar: String, class: String },
}

/// Everything observable after one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub tick: u64,
    pub time: f64,
    pub cue_pointer: usize,
    pub avatars: Vec<AvatarSnapshot>,
    #[serde(default)]
    pub events: Vec<StageEvent>,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

pub fn pose_digest(pose: &Pose) -> String {
    let mut h = Sha256::new();
    for t in &pose.locals {
        for v in t.translation.to_array().into_iter().chain(t.rotation.to_array()) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
struct Fade {
    from: Pose,
    elapsed: f64,
}

#[derive(Debug, Clone)]
struct Route {
    goal: Point,
    path: Path,
    cursor: usize,
}

#[derive(Debug, Clone, Default)]
struct MocapInput {
    pending: Vec<MocapFrame>,
    current: Option<MocapFrame>,
    stale_reported: bool,
}

#[derive(Debug, Clone)]
struct AvatarRuntime {
    spec: AvatarSpec,
    controller: ControllerConfig,
    offset: Transform,
    capsule: Capsule,
    player: SalientIdlePlayer,
    loco: Option<LocomotionState>,
    bt: Option<BtMemory>,
    blackboard: Blackboard,
    route: Option<Route>,
    /// Gesture to play once a cue-driven walk arrives.
    pending_gesture: Option<Arc<Gesture>>,
    /// Locomotion avatars show the player's pose while a gesture holds the floor.
    gesture_active: bool,
    mocap: MocapInput,
    pose: Pose,
    root: Transform,
    fade: Option<Fade>,
    state_label: String,
    clip_label: Option<String>,
}

/// The scene: avatars, cue sheet and the pending command queue.
#[derive(Debug, Clone)]
pub struct Stage {
    show: Arc<Show>,
    dt: f64,
    tick: u64,
    cues: CueSheet,
    avatars: Vec<AvatarRuntime>,
    queue: VecDeque<Command>,
}

fn idle_gesture(show: &Show, clip: &str) -> Option<Arc<Gesture>> {
    let idle = show.clips.get(clip)?.clone();
    Gesture::new(clip, None, idle, 0.0).ok().map(Arc::new)
}

impl Stage {
    pub fn new(show: Arc<Show>, dt: f64) -> Result<Self, StageError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(StageError::BadStep(dt));
        }
        let avatars = show
            .avatars
            .iter()
            .map(|spec| {
                let mut player = SalientIdlePlayer::new(spec.skeleton.clone());
                if let Some(g) = spec.idle_clip.as_deref().and_then(|c| idle_gesture(&show, c)) {
                    trigger_cue(&mut player, g, spec.skeleton.bind_pose()).expect("idle clip checked at load");
                }
                let mut rt = AvatarRuntime {
                    controller: spec.controller.clone(),
                    offset: Transform::IDENTITY,
                    capsule: spec.spawn,
                    player,
                    loco: spec.locomotion.as_ref().map(LocomotionState::idle),
                    bt: None,
                    blackboard: Blackboard::from_entries(spec.blackboard.clone()),
                    route: None,
                    pending_gesture: None,
                    gesture_active: false,
                    mocap: MocapInput::default(),
                    pose: spec.skeleton.bind_pose(),
                    root: Transform::IDENTITY,
                    fade: None,
                    state_label: String::new(),
                    clip_label: None,
                    spec: spec.clone(),
                };
                rt.bt = rt.controller.behaviour.as_ref().and_then(|b| show.behaviours.get(b)).map(|t| BtMemory::new(t));
                rt
            })
            .collect();
        Ok(Self {
            cues: show.cues.clone(),
            show,
            dt,
            tick: 0,
            avatars,
            queue: VecDeque::new(),
        })
    }

    pub fn show(&self) -> &Arc<Show> {
        &self.show
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    pub fn cue_sheet(&self) -> &CueSheet {
        &self.cues
    }

    /// Local pose of an avatar after the last tick.
    pub fn avatar_pose(&self, id: &str) -> Option<&Pose> {
        self.avatars.iter().find(|a| a.spec.id == id).map(|a| &a.pose)
    }

    /// Queues a command; it takes effect at the start of the next tick.
    pub fn push(&mut self, command: Command) {
        self.queue.push_back(command);
    }

    fn avatar_index(&self, id: &str) -> Result<usize, StageError> {
        self.avatars
            .iter()
            .position(|a| a.spec.id == id)
            .ok_or_else(|| StageError::UnknownAvatar(id.to_string()))
    }

    /// Replaces (does not compose with) the avatar's staging offset.
    pub fn set_mocap_offset(&mut self, avatar: &str, offset: Transform) -> Result<(), StageError> {
        if !offset.is_finite() || (offset.rotation.norm() - 1.0).abs() > 1e-6 {
            return Err(StageError::BadOffset);
        }
        let i = self.avatar_index(avatar)?;
        self.avatars[i].offset = offset;
        Ok(())
    }

    /// Swaps the avatar's controller, fading from its current pose.
    pub fn set_controller(&mut self, avatar: &str, config: ControllerConfig) -> Result<(), StageError> {
        let i = self.avatar_index(avatar)?;
        let show = self.show.clone();
        let a = &mut self.avatars[i];
        show.check_controller(&a.spec, &config)
            .map_err(|reason| StageError::ControllerRejected {
                avatar: avatar.to_string(),
                reason,
            })?;
        a.bt = config.behaviour.as_ref().and_then(|b| show.behaviours.get(b)).map(|t| BtMemory::new(t));
        a.controller = config;
        a.route = None;
        a.pending_gesture = None;
        a.gesture_active = false;
        a.mocap.stale_reported = false;
        a.fade = Some(Fade {
            from: a.pose.clone(),
            elapsed: 0.0,
        });
        Ok(())
    }

    fn fire(&mut self, cue: &Cue, events: &mut Vec<StageEvent>, diags: &mut Vec<String>) {
        let Ok(i) = self.avatar_index(&cue.avatar) else {
            diags.push(format!("cue {:?}: unknown avatar {:?}", cue.id, cue.avatar));
            return;
        };
        let gesture = match resolve_cue(cue, &self.show.clips) {
            Ok(g) => Arc::new(g),
            Err(e) => {
                diags.push(e.to_string());
                return;
            }
        };
        let a = &mut self.avatars[i];
        if let Some(adj) = cue.adjust {
            a.capsule.position.x += adj.dx;
            a.capsule.position.z += adj.dz;
            a.capsule.yaw = wrap_angle(a.capsule.yaw + adj.dyaw);
        }
        match (&a.controller.source, cue.walk_to) {
            (MotionSource::Locomotion, Some(goal)) => {
                a.pending_gesture = Some(gesture);
                if a.gesture_active {
                    a.gesture_active = false;
                    a.fade = Some(Fade {
                        from: a.pose.clone(),
                        elapsed: 0.0,
                    });
                }
                plan_route(&self.show, a, goal, diags);
            }
            (source, _) => {
                if matches!(source, MotionSource::Mocap { .. }) {
                    diags.push(format!("cue {:?} fired on mocap-driven avatar {:?}", cue.id, cue.avatar));
                }
                a.route = None;
                a.pending_gesture = None;
                a.gesture_active = true;
                trigger_cue(&mut a.player, gesture, a.pose.clone()).expect("cue clips checked at load");
            }
        }
        events.push(StageEvent::CueFired {
            id: cue.id.clone(),
            avatar: cue.avatar.clone(),
        });
    }

    fn apply(&mut self, command: Command, events: &mut Vec<StageEvent>, diags: &mut Vec<String>) {
        match command {
            Command::Go => {
                let fired = self.cues.go();
                if fired.is_empty() {
                    diags.push("GO: cue sheet exhausted".into());
                }
                for c in &fired {
                    self.fire(c, events, diags);
                }
            }
            Command::Back => self.cues.back(),
            Command::Goto(id) => {
                if let Err(e) = self.cues.goto(&id) {
                    diags.push(format!("GOTO: {e}"));
                }
            }
            Command::TriggerCue(id) => match self.cues.lookup(&id) {
                Ok(cues) => {
                    for c in &cues {
                        self.fire(c, events, diags);
                    }
                }
                Err(e) => diags.push(format!("CUE: {e}")),
            },
            Command::SetOffset { avatar, offset } => {
                if let Err(e) = self.set_mocap_offset(&avatar, offset) {
                    diags.push(format!("OFFSET: {e}"));
                }
            }
            Command::SetController { avatar, config } => match self.set_controller(&avatar, config) {
                Ok(()) => {
                    let a = &self.avatars[self.avatar_index(&avatar).expect("just switched")];
                    events.push(StageEvent::ControllerChanged {
                        avatar,
                        class: classify_controller(&a.controller).label().to_string(),
                    });
                }
                Err(e) => diags.push(e.to_string()),
            },
            Command::Mocap(frame) => {
                let Ok(i) = self.avatar_index(&frame.avatar) else {
                    diags.push(format!("mocap frame for unknown avatar {:?} dropped", frame.avatar));
                    return;
                };
                let expected = mocap_bone_count(&self.show, &self.avatars[i]);
                if frame.rot.len() != expected {
                    diags.push(format!(
                        "mocap frame for {:?} has {} rotations, expected {expected}; dropped",
                        frame.avatar,
                        frame.rot.len()
                    ));
                    return;
                }
                self.avatars[i].mocap.pending.push(frame);
            }
        }
    }

    /// Runs one fixed step and returns the snapshot.
    pub fn tick(&mut self) -> SceneState {
        let mut events = Vec::new();
        let mut diags = Vec::new();
        while let Some(c) = self.queue.pop_front() {
            self.apply(c, &mut events, &mut diags);
        }

        self.tick += 1;
        let time = self.time();
        let shared = Arc::new(self.shared_section(time));
        let show = self.show.clone();
        for a in &mut self.avatars {
            evaluate(&show, a, self.dt, time, &shared, &mut diags);
        }

        SceneState {
            tick: self.tick,
            time,
            cue_pointer: self.cues.pointer(),
            avatars: self
                .avatars
                .iter()
                .map(|a| AvatarSnapshot {
                    id: a.spec.id.clone(),
                    class: classify_controller(&a.controller).label().to_string(),
                    state: a.state_label.clone(),
                    clip: a.clip_label.clone(),
                    root: RootState::from_transform(&a.root),
                    capsule: [a.capsule.position.x, a.capsule.position.z, a.capsule.yaw],
                    pose_digest: pose_digest(&a.pose),
                })
                .collect(),
            events,
            diagnostics: diags,
        }
    }

    /// Read-only blackboard section: simulated time and every avatar's position before this tick.
    fn shared_section(&self, time: f64) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        m.insert("time".to_string(), Value::Number(time));
        for a in &self.avatars {
            m.insert(format!("avatar.{}.position", a.spec.id), Value::Point(a.capsule.ground()));
        }
        m
    }
}

/// Ticks `stage` with `inputs` appended to its queue.
pub fn tick_stage(stage: &mut Stage, inputs: impl IntoIterator<Item = Command>) -> SceneState {
    for c in inputs {
        stage.push(c);
    }
    stage.tick()
}

fn mocap_bone_count(show: &Show, a: &AvatarRuntime) -> usize {
    match &a.controller.source {
        MotionSource::Mocap { retarget: Some(r) } => show.retargets.get(r).map_or(0, |c| c.source().len()),
        _ => a.spec.skeleton.len(),
    }
}

fn plan_route(show: &Show, a: &mut AvatarRuntime, goal: Point, diags: &mut Vec<String>) {
    let Some(mesh) = &show.navmesh else {
        diags.push(format!("avatar {:?}: no navmesh to route on", a.spec.id));
        a.route = None;
        return;
    };
    match mesh.find_path(a.capsule.ground(), goal) {
        Ok(path) => a.route = Some(Route { goal, path, cursor: 0 }),
        Err(e) => {
            diags.push(format!("avatar {:?}: cannot route to ({}, {}): {e}", a.spec.id, goal[0], goal[1]));
            a.route = None;
        }
    }
}

fn mocap_pose(show: &Show, a: &AvatarRuntime, frame: &MocapFrame) -> Pose {
    let (skeleton, retarget): (&Skeleton, _) = match &a.controller.source {
        MotionSource::Mocap { retarget: Some(r) } => {
            let cfg = &show.retargets[r];
            (cfg.source().as_ref(), Some(cfg))
        }
        _ => (a.spec.skeleton.as_ref(), None),
    };
    let mut pose = skeleton.bind_pose();
    for (local, q) in pose.locals.iter_mut().zip(&frame.rot) {
        local.rotation = Quat::from_array(*q);
    }
    pose.locals[0].translation = Vec3::from_array(frame.root);
    match retarget {
        Some(cfg) => retarget_pose(cfg, &pose).expect("frame bone count checked on arrival"),
        None => pose,
    }
}

fn evaluate(show: &Show, a: &mut AvatarRuntime, dt: f64, time: f64, shared: &Arc<BTreeMap<String, Value>>, diags: &mut Vec<String>) {
    let id = a.spec.id.clone();
    // the player keeps time even while another source drives the pose
    let player_pose = tick_player(&mut a.player, dt);

    let (pose, placement) = match a.controller.source.clone() {
        MotionSource::Mocap { .. } => {
            take_mocap(a, time);
            let pose = match a.mocap.current.clone() {
                Some(f) => {
                    if time - f.t > MOCAP_STALE_AFTER && !a.mocap.stale_reported {
                        a.mocap.stale_reported = true;
                        diags.push(format!("avatar {id:?}: mocap stream stale since t={}, holding last pose", f.t));
                    }
                    mocap_pose(show, a, &f)
                }
                None => a.spec.skeleton.bind_pose(),
            };
            a.state_label = "mocap".into();
            a.clip_label = None;
            (pose, show.calibration)
        }
        MotionSource::Clips => {
            let mut pose = player_pose;
            if a.bt.is_some() {
                for cmd in run_behaviour(show, a, dt, shared, diags) {
                    if let BtCommand::PlayClip(name) = cmd {
                        play_clip(show, a, &name, diags);
                        pose = a.player.current_pose();
                    }
                }
            }
            a.state_label = a.player.label();
            a.clip_label = a.player.clip_name().map(str::to_string);
            (pose, a.capsule.placement())
        }
        MotionSource::Locomotion => {
            let command = if a.bt.is_some() {
                let goal = run_behaviour(show, a, dt, shared, diags).into_iter().find_map(|c| match c {
                    BtCommand::MoveTo(p) => Some(p),
                    BtCommand::PlayClip(_) => None,
                });
                match goal {
                    Some(g) => {
                        if a.route.as_ref().is_none_or(|r| r.goal != g) {
                            plan_route(show, a, g, diags);
                        }
                    }
                    None => a.route = None,
                }
                steer(a)
            } else {
                let cmd = steer(a);
                if a.route.is_none() {
                    if let Some(g) = a.pending_gesture.take() {
                        a.gesture_active = true;
                        trigger_cue(&mut a.player, g, a.pose.clone()).expect("cue clips checked at load");
                    }
                }
                cmd
            };
            let params = a.spec.locomotion.as_ref().expect("locomotion source checked at load");
            let state = a.loco.get_or_insert_with(|| LocomotionState::idle(params));
            let t = tick_locomotion(state, &a.capsule, &command, params, dt);
            let mut capsule = t.capsule;
            if let Some(mesh) = &show.navmesh {
                let [x, z] = mesh.constrain(capsule.ground());
                capsule.position.x = x;
                capsule.position.z = z;
            }
            a.capsule = capsule;
            let mut state = t.state;
            if let Some(clip) = show.locomotion_clips.get(&state.clip) {
                state.wrap_phase(clip.duration());
            }
            let pose = if a.gesture_active {
                a.state_label = a.player.label();
                a.clip_label = a.player.clip_name().map(str::to_string);
                a.player.current_pose()
            } else {
                a.state_label = state.mode.label().to_string();
                a.clip_label = Some(state.clip.clone());
                locomotion_pose(&state, &show.locomotion_clips, &a.spec.skeleton).expect("locomotion clips checked at load")
            };
            a.loco = Some(state);
            (pose, a.capsule.placement())
        }
    };

    let pose = match &mut a.fade {
        Some(f) => {
            f.elapsed += dt;
            if f.elapsed >= CONTROLLER_SWITCH_FADE {
                a.fade = None;
                pose
            } else {
                crossfade(&f.from, &pose, f.elapsed / CONTROLLER_SWITCH_FADE).unwrap_or(pose)
            }
        }
        None => pose,
    };
    a.root = a.offset.compose(&placement).compose(&pose.locals[0]);
    if matches!(a.controller.source, MotionSource::Mocap { .. }) {
        let yaw = a.root.rotation.yaw();
        a.capsule.position.x = a.root.translation.x;
        a.capsule.position.z = a.root.translation.z;
        a.capsule.yaw = yaw;
    }
    a.pose = pose;
}

fn take_mocap(a: &mut AvatarRuntime, time: f64) {
    let pending = std::mem::take(&mut a.mocap.pending);
    let mut keep = Vec::with_capacity(pending.len());
    for f in pending {
        if f.t <= time {
            if a.mocap.current.as_ref().is_none_or(|c| f.t >= c.t) {
                a.mocap.current = Some(f);
                a.mocap.stale_reported = false;
            }
        } else {
            keep.push(f);
        }
    }
    a.mocap.pending = keep;
}

fn run_behaviour(
    show: &Show,
    a: &mut AvatarRuntime,
    dt: f64,
    shared: &Arc<BTreeMap<String, Value>>,
    diags: &mut Vec<String>,
) -> Vec<BtCommand> {
    let (Some(name), Some(memory)) = (&a.controller.behaviour, &mut a.bt) else {
        return Vec::new();
    };
    let tree = &show.behaviours[name];
    a.blackboard.set_shared(shared.clone());
    let out = tick_bt(
        tree,
        memory,
        &mut a.blackboard,
        dt,
        AvatarContext {
            position: a.capsule.ground(),
            arrival_radius: a.spec.arrival_radius,
        },
    );
    diags.extend(out.diagnostics.into_iter().map(|d| format!("avatar {:?}: behaviour {name:?}: {d}", a.spec.id)));
    out.commands
}

fn play_clip(show: &Show, a: &mut AvatarRuntime, name: &str, diags: &mut Vec<String>) {
    let Some(clip) = show.clips.get(name).cloned() else {
        diags.push(format!("avatar {:?}: unknown clip {name:?}", a.spec.id));
        return;
    };
    let idle = a.spec.idle_clip.as_ref().and_then(|c| show.clips.get(c)).cloned();
    let gesture = match (clip.salience(), idle) {
        (Salience::Idle, _) => Gesture::new(name, None, clip, crate::direction::DEFAULT_FADE_IN),
        (Salience::Salient, Some(idle)) => Gesture::new(name, Some(clip), idle, crate::direction::DEFAULT_FADE_IN),
        (Salience::Salient, None) => {
            diags.push(format!("avatar {:?}: salient clip {name:?} needs an idle_clip to settle into", a.spec.id));
            return;
        }
    };
    match gesture {
        Ok(g) => {
            if let Err(e) = trigger_cue(&mut a.player, Arc::new(g), a.pose.clone()) {
                diags.push(format!("avatar {:?}: {e}", a.spec.id));
            }
        }
        Err(e) => diags.push(format!("avatar {:?}: {e}", a.spec.id)),
    }
}

fn steer(a: &mut AvatarRuntime) -> LocomotionCommand {
    let Some(route) = &mut a.route else {
        return LocomotionCommand::STOP;
    };
    let s = follow_path(&route.path, route.cursor, a.capsule.ground(), a.spec.arrival_radius, a.spec.cruise_speed);
    route.cursor = s.cursor;
    if s.arrived {
        a.route = None;
    }
    s.command
}

/// SHA-256 over newline-terminated log lines, as lowercase hex.
#[derive(Debug, Clone, Default)]
pub struct LogHasher(Sha256);

impl LogHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn line(&mut self, line: &str) {
        self.0.update(line.as_bytes());
        self.0.update(b"\n");
    }

    pub fn finish(self) -> String {
        self.0.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
