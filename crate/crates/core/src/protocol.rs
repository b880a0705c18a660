//! File and wire formats: show documents, mocap records, control input,
//! console messages and scripted input traces. All of them are JSON or
//! line-oriented text; the parsers are pure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::animation::{extract_root_motion, loop_seam_error, Clip, Keyframe, RootMode, Salience, DEFAULT_SEAM_THRESHOLD};
use crate::behaviour::{validate_bt, Action, BehaviourTree, BtNode, Comparator, RepeatCount, Target, Value};
use crate::direction::{
    resolve_cue, ControllerConfig, Cue, CueSheet, Decision, MotionSource, Origin, StageAdjustment, DEFAULT_FADE_IN,
};
use crate::locomotion::{Capsule, LocomotionParams};
use crate::math::{Quat, Transform, Vec3};
use crate::navigation::NavMesh;
use crate::retarget::{build_retarget, BoneMap, RetargetConfig};
use crate::skeleton::{Bone, Skeleton};
use crate::stage::{Command, SceneState};

pub const FORMAT_VERSION: u32 = 1;
/// Mocap quaternions further than this from unit norm are rejected rather than renormalized.
pub const MOCAP_NORM_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_ARRIVAL_RADIUS: f64 = 0.2;
pub const DEFAULT_CRUISE_SPEED: f64 = 1.0;

/// One problem found while reading a show, located by line/column or by JSON path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShowIssue {
    pub location: String,
    pub message: String,
}

impl ShowIssue {
    fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ShowIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.location.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.location, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n"))]
pub struct ShowErrors(pub Vec<ShowIssue>);

fn is_false(b: &bool) -> bool {
    !*b
}

fn identity_rotation() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShowDocument {
    pub version: u32,
    #[serde(default)]
    pub skeletons: Vec<SkeletonDoc>,
    #[serde(default)]
    pub clips: Vec<ClipEntry>,
    #[serde(default)]
    pub retarget_maps: Vec<RetargetDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub navmesh: Option<NavMeshDoc>,
    #[serde(default)]
    pub behaviours: Vec<BehaviourDoc>,
    #[serde(default)]
    pub avatars: Vec<AvatarDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<TransformDoc>,
    #[serde(default)]
    pub cues: Vec<CueDoc>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub cue_groups: bool,
    #[serde(default)]
    pub controls: Vec<ControlDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seam_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonDoc {
    pub name: String,
    pub bones: Vec<BoneDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneDoc {
    pub name: String,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default = "identity_rotation")]
    pub rotation: [f64; 4],
    #[serde(default)]
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SalienceDoc {
    Salient,
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootModeDoc {
    #[default]
    InPlace,
    RootMotion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyDoc {
    pub t: f64,
    /// Defaults to the bone's bind translation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<[f64; 3]>,
    /// Defaults to the bone's bind rotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[f64; 4]>,
}

/// A complete clip, as stored inline or in a sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipDoc {
    pub name: String,
    pub skeleton: String,
    pub duration: f64,
    #[serde(default)]
    pub loopable: bool,
    pub salience: SalienceDoc,
    #[serde(default)]
    pub root_mode: RootModeDoc,
    pub tracks: BTreeMap<String, Vec<KeyDoc>>,
}

/// Entry in the show's clip list: either `{"file": "..."}` naming a sidecar clip
/// file, or the clip's fields inline.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClipEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skeleton: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loopable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salience: Option<SalienceDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_mode: Option<RootModeDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracks: Option<BTreeMap<String, Vec<KeyDoc>>>,
}

impl ClipEntry {
    pub fn file(path: impl Into<String>) -> Self {
        Self {
            file: Some(path.into()),
            ..Self::default()
        }
    }

    pub fn inline(doc: ClipDoc) -> Self {
        Self {
            file: None,
            name: Some(doc.name),
            skeleton: Some(doc.skeleton),
            duration: Some(doc.duration),
            loopable: Some(doc.loopable),
            salience: Some(doc.salience),
            root_mode: Some(doc.root_mode),
            tracks: Some(doc.tracks),
        }
    }

    /// The inline clip; errors name the first missing field.
    pub fn to_doc(&self) -> Result<ClipDoc, String> {
        fn need<T: Clone>(v: &Option<T>, field: &str) -> Result<T, String> {
            v.clone().ok_or_else(|| format!("inline clip is missing {field:?}"))
        }
        Ok(ClipDoc {
            name: need(&self.name, "name")?,
            skeleton: need(&self.skeleton, "skeleton")?,
            duration: need(&self.duration, "duration")?,
            loopable: self.loopable.unwrap_or(false),
            salience: need(&self.salience, "salience")?,
            root_mode: self.root_mode.unwrap_or_default(),
            tracks: need(&self.tracks, "tracks")?,
        })
    }

    fn has_inline_fields(&self) -> bool {
        self.name.is_some()
            || self.skeleton.is_some()
            || self.duration.is_some()
            || self.loopable.is_some()
            || self.salience.is_some()
            || self.root_mode.is_some()
            || self.tracks.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetargetDoc {
    pub name: String,
    pub source: String,
    pub target: String,
    pub pairs: Vec<[String; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavMeshDoc {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviourDoc {
    pub name: String,
    pub root: NodeDoc,
}

/// Behaviour tree node; which fields apply depends on `type`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeDoc {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub children: Option<Vec<NodeDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child: Option<Box<NodeDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisDoc {
    Internal,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceDoc {
    Mocap,
    Clips,
    Locomotion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerDoc {
    pub origin: AxisDoc,
    pub decision: AxisDoc,
    pub source: SourceDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retarget: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behaviour: Option<String>,
}

impl ControllerDoc {
    pub fn to_config(&self) -> ControllerConfig {
        ControllerConfig {
            origin: match self.origin {
                AxisDoc::Internal => Origin::Internal,
                AxisDoc::External => Origin::External,
            },
            decision: match self.decision {
                AxisDoc::Internal => Decision::Internal,
                AxisDoc::External => Decision::External,
            },
            source: match self.source {
                SourceDoc::Mocap => MotionSource::Mocap {
                    retarget: self.retarget.clone(),
                },
                SourceDoc::Clips => MotionSource::Clips,
                SourceDoc::Locomotion => MotionSource::Locomotion,
            },
            behaviour: self.behaviour.clone(),
        }
    }

    pub fn from_config(cfg: &ControllerConfig) -> Self {
        let axis = |internal: bool| if internal { AxisDoc::Internal } else { AxisDoc::External };
        let (source, retarget) = match &cfg.source {
            MotionSource::Mocap { retarget } => (SourceDoc::Mocap, retarget.clone()),
            MotionSource::Clips => (SourceDoc::Clips, None),
            MotionSource::Locomotion => (SourceDoc::Locomotion, None),
        };
        Self {
            origin: axis(cfg.origin == Origin::Internal),
            decision: axis(cfg.decision == Decision::Internal),
            source,
            retarget,
            behaviour: cfg.behaviour.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocomotionDoc {
    pub walk_clip: String,
    pub walk_speed: f64,
    pub idle_clip: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walk_start_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walk_stop_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_accel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_turn_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_speed: Option<f64>,
}

impl LocomotionDoc {
    pub fn to_params(&self) -> LocomotionParams {
        let mut p = LocomotionParams::new(&self.walk_clip, self.walk_speed, &self.idle_clip);
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut p.walk_start_threshold, self.walk_start_threshold);
        set(&mut p.walk_stop_threshold, self.walk_stop_threshold);
        set(&mut p.max_accel, self.max_accel);
        set(&mut p.max_turn_rate, self.max_turn_rate);
        set(&mut p.rate_min, self.rate_min);
        set(&mut p.rate_max, self.rate_max);
        set(&mut p.max_speed, self.max_speed);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvatarDoc {
    pub id: String,
    pub skeleton: String,
    pub controller: ControllerDoc,
    /// [x, z, yaw]
    #[serde(default)]
    pub spawn: [f64; 3],
    /// Loop played before the first cue (clip-driven avatars).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle_clip: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locomotion: Option<LocomotionDoc>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub blackboard: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrival_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cruise_speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformDoc {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default = "identity_rotation")]
    pub rotation: [f64; 4],
}

impl TransformDoc {
    pub fn to_transform(&self) -> Transform {
        Transform::new(Vec3::from_array(self.translation), Quat::from_array(self.rotation))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AdjustDoc {
    #[serde(default)]
    pub dx: f64,
    #[serde(default)]
    pub dz: f64,
    #[serde(default)]
    pub dyaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueDoc {
    pub id: String,
    pub avatar: String,
    pub salient: String,
    pub idle: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fade_in: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjust: Option<AdjustDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walk_to: Option<[f64; 2]>,
}

impl CueDoc {
    pub fn to_cue(&self) -> Cue {
        Cue {
            id: self.id.clone(),
            avatar: self.avatar.clone(),
            salient: self.salient.clone(),
            idle: self.idle.clone(),
            fade_in: self.fade_in.unwrap_or(DEFAULT_FADE_IN),
            adjust: self.adjust.map(|a| StageAdjustment {
                dx: a.dx,
                dz: a.dz,
                dyaw: a.dyaw,
            }),
            walk_to: self.walk_to,
        }
    }
}

/// MIDI note binding: `action` is "go" or "back", or `cue` names a cue to trigger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlDoc {
    pub ch: u8,
    pub note: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cue: Option<String>,
}

/// A parsed value plus non-fatal findings.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub value: T,
    pub warnings: Vec<ShowIssue>,
}

fn json_error(e: &serde_json::Error) -> ShowIssue {
    ShowIssue::new(format!("line {} column {}", e.line(), e.column()), e.to_string())
}

/// Deserializes JSON, reporting unknown fields as errors (`strict`) or warnings.
fn parse_json<T: DeserializeOwned>(text: &str, strict: bool, origin: &str) -> Result<Parsed<T>, ShowErrors> {
    let mut unknown = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let value: T = serde_ignored::deserialize(&mut de, |path| unknown.push(path.to_string()))
        .map_err(|e| ShowErrors(vec![json_error(&e)]))?;
    de.end().map_err(|e| ShowErrors(vec![json_error(&e)]))?;
    let issues: Vec<_> = unknown
        .into_iter()
        .map(|p| ShowIssue::new(format!("{origin}{p}"), "unknown field"))
        .collect();
    if strict && !issues.is_empty() {
        return Err(ShowErrors(issues));
    }
    Ok(Parsed {
        value,
        warnings: issues,
    })
}

/// Parses show JSON. Cross references are checked by [`resolve_show`].
pub fn parse_show(text: &str, strict: bool) -> Result<Parsed<ShowDocument>, ShowErrors> {
    let parsed: Parsed<ShowDocument> = parse_json(text, strict, "")?;
    if parsed.value.version != FORMAT_VERSION {
        return Err(ShowErrors(vec![ShowIssue::new(
            "version",
            format!("unsupported version {} (expected {FORMAT_VERSION})", parsed.value.version),
        )]));
    }
    Ok(parsed)
}

pub fn encode_show(doc: &ShowDocument) -> String {
    serde_json::to_string_pretty(doc).expect("show documents always serialize")
}

pub fn parse_clip_file(text: &str, strict: bool) -> Result<Parsed<ClipDoc>, ShowErrors> {
    parse_json(text, strict, "")
}

/// Everything an avatar needs at runtime, resolved from the show.
#[derive(Debug, Clone)]
pub struct AvatarSpec {
    pub id: String,
    pub skeleton: Arc<Skeleton>,
    pub controller: ControllerConfig,
    pub spawn: Capsule,
    pub idle_clip: Option<String>,
    pub locomotion: Option<LocomotionParams>,
    pub blackboard: BTreeMap<String, Value>,
    pub arrival_radius: f64,
    pub cruise_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappedAction {
    Go,
    Back,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlTarget {
    Action(MappedAction),
    Cue(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlMapping {
    pub channel: u8,
    pub note: u8,
    pub target: ControlTarget,
}

/// A fully resolved show, ready to stage.
#[derive(Debug, Clone)]
pub struct Show {
    pub document: ShowDocument,
    pub skeletons: BTreeMap<String, Arc<Skeleton>>,
    /// Clips as authored.
    pub clips: BTreeMap<String, Arc<Clip>>,
    /// In-place versions used by locomotion; root-motion clips are stripped here.
    pub locomotion_clips: BTreeMap<String, Arc<Clip>>,
    pub retargets: BTreeMap<String, Arc<RetargetConfig>>,
    pub navmesh: Option<Arc<NavMesh>>,
    pub behaviours: BTreeMap<String, Arc<BehaviourTree>>,
    /// Sorted by id.
    pub avatars: Vec<AvatarSpec>,
    pub calibration: Transform,
    pub cues: CueSheet,
    pub controls: Vec<ControlMapping>,
    pub seam_threshold: f64,
}

impl Show {
    pub fn avatar(&self, id: &str) -> Option<&AvatarSpec> {
        self.avatars.iter().find(|a| a.id == id)
    }

    /// Number of rotations a mocap frame for this avatar must carry.
    pub fn mocap_bone_count(&self, avatar: &str) -> Option<usize> {
        let spec = self.avatar(avatar)?;
        match &spec.controller.source {
            MotionSource::Mocap { retarget: Some(r) } => self.retargets.get(r).map(|c| c.source().len()),
            _ => Some(spec.skeleton.len()),
        }
    }

    /// Checks a controller against the loaded resources for `avatar`.
    pub fn check_controller(&self, avatar: &AvatarSpec, cfg: &ControllerConfig) -> Result<(), String> {
        cfg.validate().map_err(|e| e.to_string())?;
        if let MotionSource::Mocap { retarget: Some(r) } = &cfg.source {
            let map = self.retargets.get(r).ok_or_else(|| format!("unknown retarget map {r:?}"))?;
            if map.target().name() != avatar.skeleton.name() {
                return Err(format!(
                    "retarget map {r:?} targets skeleton {:?}, avatar uses {:?}",
                    map.target().name(),
                    avatar.skeleton.name()
                ));
            }
        }
        if cfg.source == MotionSource::Locomotion && avatar.locomotion.is_none() {
            return Err("locomotion source needs locomotion parameters".into());
        }
        if let Some(bt) = &cfg.behaviour {
            if !self.behaviours.contains_key(bt) {
                return Err(format!("unknown behaviour {bt:?}"));
            }
            let tree = self.behaviours[bt].root();
            if cfg.source == MotionSource::Locomotion && self.navmesh.is_none() {
                return Err("a behaviour-driven locomotion avatar needs a navmesh".into());
            }
            if cfg.source != MotionSource::Locomotion && tree_has(tree, &|n| matches!(n, BtNode::Action(Action::MoveTo(_)))) {
                return Err(format!("behaviour {bt:?} uses move_to, which needs a locomotion source"));
            }
            if cfg.source != MotionSource::Clips && tree_has(tree, &|n| matches!(n, BtNode::Action(Action::PlayClip(_)))) {
                return Err(format!("behaviour {bt:?} uses play_clip, which needs a clip source"));
            }
            if cfg.source == MotionSource::Clips && avatar.idle_clip.is_none() {
                return Err("a behaviour-driven clip avatar needs an idle_clip".into());
            }
        }
        Ok(())
    }
}

fn quat_from(a: [f64; 4]) -> Quat {
    Quat::from_array(a)
}

fn json_to_value(v: &serde_json::Value) -> Result<Value, String> {
    match v {
        serde_json::Value::Bool(b) => Ok(Value::Bool(*b)),
        serde_json::Value::Number(n) => n.as_f64().map(Value::Number).ok_or_else(|| "bad number".into()),
        serde_json::Value::String(s) => Ok(Value::Text(s.clone())),
        serde_json::Value::Array(a) if a.len() == 2 => match (a[0].as_f64(), a[1].as_f64()) {
            (Some(x), Some(z)) => Ok(Value::Point([x, z])),
            _ => Err("a point must be [x, z] numbers".into()),
        },
        other => Err(format!("unsupported blackboard value {other}")),
    }
}

pub fn value_to_json(v: &Value) -> serde_json::Value {
    match v {
        Value::Bool(b) => serde_json::Value::Bool(*b),
        Value::Number(n) => serde_json::json!(n),
        Value::Text(s) => serde_json::Value::String(s.clone()),
        Value::Point([x, z]) => serde_json::json!([x, z]),
    }
}

/// Converts a node document into a tree node.
pub fn node_from_doc(doc: &NodeDoc) -> Result<BtNode, String> {
    let need = |field: Option<&String>, name: &str| {
        field
            .cloned()
            .ok_or_else(|| format!("{} node needs {name:?}", doc.kind))
    };
    let children = || -> Result<Vec<BtNode>, String> {
        doc.children
            .as_deref()
            .unwrap_or_default()
            .iter()
            .map(node_from_doc)
            .collect()
    };
    let child = || -> Result<Box<BtNode>, String> {
        let c = doc.child.as_deref().ok_or_else(|| format!("{} node needs \"child\"", doc.kind))?;
        Ok(Box::new(node_from_doc(c)?))
    };
    let value = || -> Result<Value, String> {
        json_to_value(doc.value.as_ref().ok_or_else(|| format!("{} node needs \"value\"", doc.kind))?)
    };
    Ok(match doc.kind.as_str() {
        "sequence" => BtNode::Sequence(children()?),
        "selector" => BtNode::Selector(children()?),
        "condition" => {
            let op = need(doc.op.as_ref(), "op")?;
            BtNode::Condition {
                key: need(doc.key.as_ref(), "key")?,
                comparator: Comparator::from_symbol(&op).ok_or_else(|| format!("unknown comparator {op:?}"))?,
                operand: value()?,
            }
        }
        "inverter" => BtNode::Inverter(child()?),
        "repeat" => BtNode::Repeat {
            child: child()?,
            count: doc.times.map_or(RepeatCount::Forever, RepeatCount::Times),
        },
        "move_to" => match (&doc.key, doc.point) {
            (Some(k), None) => BtNode::Action(Action::MoveTo(Target::Key(k.clone()))),
            (None, Some(p)) => BtNode::Action(Action::MoveTo(Target::Point(p))),
            _ => return Err("move_to needs exactly one of \"key\" or \"point\"".into()),
        },
        "play_clip" => BtNode::Action(Action::PlayClip(need(doc.clip.as_ref(), "clip")?)),
        "set_key" => BtNode::Action(Action::SetKey(need(doc.key.as_ref(), "key")?, value()?)),
        "wait" => BtNode::Action(Action::Wait(
            doc.seconds.ok_or_else(|| "wait node needs \"seconds\"".to_string())?,
        )),
        other => BtNode::Action(Action::Unknown(other.to_string())),
    })
}

/// Inverse of [`node_from_doc`].
pub fn node_to_doc(node: &BtNode) -> NodeDoc {
    let leaf = |kind: &str| NodeDoc {
        kind: kind.to_string(),
        ..NodeDoc::default()
    };
    match node {
        BtNode::Sequence(c) | BtNode::Selector(c) => NodeDoc {
            children: Some(c.iter().map(node_to_doc).collect()),
            ..leaf(if matches!(node, BtNode::Sequence(_)) { "sequence" } else { "selector" })
        },
        BtNode::Condition {
            key,
            comparator,
            operand,
        } => NodeDoc {
            key: Some(key.clone()),
            op: Some(comparator.symbol().to_string()),
            value: Some(value_to_json(operand)),
            ..leaf("condition")
        },
        BtNode::Inverter(c) => NodeDoc {
            child: Some(Box::new(node_to_doc(c))),
            ..leaf("inverter")
        },
        BtNode::Repeat { child, count } => NodeDoc {
            child: Some(Box::new(node_to_doc(child))),
            times: match count {
                RepeatCount::Times(n) => Some(*n),
                RepeatCount::Forever => None,
            },
            ..leaf("repeat")
        },
        BtNode::Action(a) => match a {
            Action::MoveTo(Target::Key(k)) => NodeDoc {
                key: Some(k.clone()),
                ..leaf("move_to")
            },
            Action::MoveTo(Target::Point(p)) => NodeDoc {
                point: Some(*p),
                ..leaf("move_to")
            },
            Action::PlayClip(c) => NodeDoc {
                clip: Some(c.clone()),
                ..leaf("play_clip")
            },
            Action::SetKey(k, v) => NodeDoc {
                key: Some(k.clone()),
                value: Some(value_to_json(v)),
                ..leaf("set_key")
            },
            Action::Wait(s) => NodeDoc {
                seconds: Some(*s),
                ..leaf("wait")
            },
            Action::Unknown(kind) => leaf(kind),
        },
    }
}

fn tree_has(node: &BtNode, pred: &dyn Fn(&BtNode) -> bool) -> bool {
    pred(node) || node.children().iter().any(|c| tree_has(c, pred))
}

fn collect_play_clips(node: &BtNode, out: &mut Vec<String>) {
    if let BtNode::Action(Action::PlayClip(c)) = node {
        out.push(c.clone());
    }
    for c in node.children() {
        collect_play_clips(c, out);
    }
}

fn build_skeleton(doc: &SkeletonDoc) -> Result<Skeleton, String> {
    let mut index = BTreeMap::new();
    let mut bones = Vec::with_capacity(doc.bones.len());
    for (i, b) in doc.bones.iter().enumerate() {
        let parent = match &b.parent {
            None => None,
            Some(p) => Some(
                *index
                    .get(p.as_str())
                    .ok_or_else(|| format!("bone {:?}: parent {p:?} must be listed before it", b.name))?,
            ),
        };
        index.insert(b.name.as_str(), i);
        bones.push(
            Bone::new(
                b.name.clone(),
                parent,
                Transform {
                    translation: Vec3::from_array(b.translation),
                    rotation: quat_from(b.rotation),
                },
            )
            .with_length(b.length),
        );
    }
    Skeleton::new(doc.name.clone(), bones).map_err(|e| e.to_string())
}

fn build_clip(doc: &ClipDoc, skeleton: &Skeleton) -> Result<Clip, String> {
    let mut tracks = BTreeMap::new();
    for (bone, keys) in &doc.tracks {
        let bind = skeleton
            .bones()
            .get(skeleton.bone_index(bone).map_err(|e| e.to_string())?)
            .map(|b| b.bind_local)
            .expect("index from the same skeleton");
        let keys = keys
            .iter()
            .map(|k| {
                Keyframe::new(
                    k.t,
                    Transform {
                        translation: k.translation.map_or(bind.translation, Vec3::from_array),
                        rotation: k.rotation.map_or(bind.rotation, quat_from),
                    },
                )
            })
            .collect();
        tracks.insert(bone.clone(), keys);
    }
    Clip::new(
        doc.name.clone(),
        doc.skeleton.clone(),
        doc.duration,
        tracks,
        doc.loopable,
        match doc.salience {
            SalienceDoc::Salient => Salience::Salient,
            SalienceDoc::Idle => Salience::Idle,
        },
        match doc.root_mode {
            RootModeDoc::InPlace => RootMode::InPlace,
            RootModeDoc::RootMotion => RootMode::RootMotion,
        },
    )
    .map_err(|e| e.to_string())
}

/// Reads a show file (and its sidecar clips) and resolves it.
pub fn load_show(path: &Path, strict: bool) -> Result<Parsed<Show>, ShowErrors> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ShowErrors(vec![ShowIssue::new(path.display().to_string(), e.to_string())]))?;
    let parsed = parse_show(&text, strict)?;
    let mut resolved = resolve_show(&parsed.value, path.parent(), strict)?;
    let mut warnings = parsed.warnings;
    warnings.append(&mut resolved.warnings);
    Ok(Parsed {
        value: resolved.value,
        warnings,
    })
}

/// Checks every cross reference and builds runtime structures. All problems are
/// collected; warnings cover seam errors above the threshold and similar findings.
pub fn resolve_show(doc: &ShowDocument, base_dir: Option<&Path>, strict: bool) -> Result<Parsed<Show>, ShowErrors> {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mut err = |loc: String, msg: String| errors.push(ShowIssue::new(loc, msg));

    let mut skeletons = BTreeMap::new();
    for (i, s) in doc.skeletons.iter().enumerate() {
        match build_skeleton(s) {
            Ok(sk) => {
                if skeletons.insert(s.name.clone(), Arc::new(sk)).is_some() {
                    err(format!("skeletons[{i}]"), format!("duplicate skeleton {:?}", s.name));
                }
            }
            Err(m) => err(format!("skeletons[{i}]"), m),
        }
    }

    // clips
    let mut clip_docs = Vec::new();
    for (i, entry) in doc.clips.iter().enumerate() {
        match &entry.file {
            None => match entry.to_doc() {
                Ok(c) => clip_docs.push((format!("clips[{i}]"), c)),
                Err(m) => err(format!("clips[{i}]"), m),
            },
            Some(_) if entry.has_inline_fields() => {
                err(format!("clips[{i}]"), "a clip entry is either a file reference or inline, not both".into())
            }
            Some(file) => {
                let path = base_dir.map_or_else(|| Path::new(file).to_path_buf(), |d| d.join(file));
                match std::fs::read_to_string(&path) {
                    Err(e) => err(format!("clips[{i}]"), format!("cannot read {}: {e}", path.display())),
                    Ok(text) => match parse_clip_file(&text, strict) {
                        Ok(p) => {
                            warnings.extend(
                                p.warnings
                                    .into_iter()
                                    .map(|w| ShowIssue::new(format!("{file}: {}", w.location), w.message)),
                            );
                            clip_docs.push((format!("clips[{i}] ({file})"), p.value));
                        }
                        Err(ShowErrors(es)) => {
                            for e in es {
                                err(format!("{file}: {}", e.location), e.message);
                            }
                        }
                    },
                }
            }
        }
    }
    let seam_threshold = doc.seam_threshold.unwrap_or(DEFAULT_SEAM_THRESHOLD);
    let mut clips = BTreeMap::new();
    for (loc, c) in &clip_docs {
        let Some(sk) = skeletons.get(&c.skeleton) else {
            err(loc.clone(), format!("clip {:?} references unknown skeleton {:?}", c.name, c.skeleton));
            continue;
        };
        match build_clip(c, sk) {
            Ok(clip) => {
                if clip.loopable() {
                    // root travel is not a seam; judge root-motion loops in place
                    let judged = match clip.root_mode() {
                        RootMode::RootMotion => extract_root_motion(&clip, sk).map(|(c, _)| c).ok(),
                        RootMode::InPlace => Some(clip.clone()),
                    };
                    if let Some(seam) = judged.and_then(|c| loop_seam_error(&c, sk).ok()) {
                        if seam > seam_threshold {
                            warnings.push(ShowIssue::new(
                                loc.clone(),
                                format!("loop seam of clip {:?} is {seam:.4} m, above threshold {seam_threshold} m", c.name),
                            ));
                        }
                    }
                }
                if clips.insert(c.name.clone(), Arc::new(clip)).is_some() {
                    err(loc.clone(), format!("duplicate clip {:?}", c.name));
                }
            }
            Err(m) => err(loc.clone(), m),
        }
    }

    let mut retargets = BTreeMap::new();
    for (i, r) in doc.retarget_maps.iter().enumerate() {
        let loc = format!("retarget_maps[{i}]");
        match (skeletons.get(&r.source), skeletons.get(&r.target)) {
            (Some(s), Some(t)) => {
                let map = BoneMap::new(r.pairs.iter().map(|[a, b]| (a.clone(), b.clone())));
                match build_retarget(s.clone(), t.clone(), &map) {
                    Ok(cfg) => {
                        let bad = cfg.bind_orientation_mismatches(1e-3);
                        if !bad.is_empty() {
                            warnings.push(ShowIssue::new(
                                loc.clone(),
                                format!("bind orientations differ for mapped bones {bad:?}; transfer will be skewed"),
                            ));
                        }
                        retargets.insert(r.name.clone(), Arc::new(cfg));
                    }
                    Err(e) => err(loc, e.to_string()),
                }
            }
            _ => err(loc, format!("retarget map {:?} references an unknown skeleton", r.name)),
        }
    }

    let navmesh = match &doc.navmesh {
        None => None,
        Some(n) => match NavMesh::new(n.vertices.clone(), n.triangles.clone()) {
            Ok(m) => Some(Arc::new(m)),
            Err(e) => {
                err("navmesh".into(), e.to_string());
                None
            }
        },
    };

    let mut behaviours = BTreeMap::new();
    for (i, b) in doc.behaviours.iter().enumerate() {
        let loc = format!("behaviours[{i}]");
        match node_from_doc(&b.root) {
            Err(m) => err(loc, format!("behaviour {:?}: {m}", b.name)),
            Ok(node) => {
                let mut played = Vec::new();
                collect_play_clips(&node, &mut played);
                for c in played.iter().filter(|c| !clips.contains_key(*c)) {
                    err(loc.clone(), format!("behaviour {:?} plays unknown clip {c:?}", b.name));
                }
                let violations = validate_bt(&node);
                for v in &violations {
                    err(loc.clone(), format!("behaviour {:?}: {v}", b.name));
                }
                if violations.is_empty() {
                    let tree = BehaviourTree::new(node).expect("validated above");
                    behaviours.insert(b.name.clone(), Arc::new(tree));
                }
            }
        }
    }

    let mut locomotion_clips = BTreeMap::new();
    let mut avatars = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, a) in doc.avatars.iter().enumerate() {
        let loc = format!("avatars[{i}]");
        if !ids.insert(a.id.clone()) {
            err(loc.clone(), format!("duplicate avatar id {:?}", a.id));
            continue;
        }
        let Some(skeleton) = skeletons.get(&a.skeleton).cloned() else {
            err(loc, format!("avatar {:?} references unknown skeleton {:?}", a.id, a.skeleton));
            continue;
        };
        let clip_ok = |name: &str, want: Option<Salience>| -> Result<(), String> {
            let c = clips.get(name).ok_or_else(|| format!("avatar {:?} references unknown clip {name:?}", a.id))?;
            if c.skeleton() != skeleton.name() {
                return Err(format!("clip {name:?} targets skeleton {:?}, avatar {:?} uses {:?}", c.skeleton(), a.id, skeleton.name()));
            }
            if let Some(w) = want {
                if c.salience() != w {
                    return Err(format!("clip {name:?} must be tagged {w}"));
                }
            }
            Ok(())
        };
        if let Some(idle) = &a.idle_clip {
            if let Err(m) = clip_ok(idle, Some(Salience::Idle)) {
                err(loc.clone(), m);
            }
        }
        let locomotion = a.locomotion.as_ref().map(|l| l.to_params());
        if let Some(p) = &locomotion {
            if let Err(e) = p.validate() {
                err(loc.clone(), e.to_string());
            }
            for name in [&p.walk_clip, &p.idle_clip] {
                match clip_ok(name, None) {
                    Err(m) => err(loc.clone(), m),
                    Ok(()) => {
                        let clip = &clips[name.as_str()];
                        if !clip.loopable() {
                            err(loc.clone(), format!("locomotion clip {name:?} must be loopable"));
                        } else if clip.root_mode() == RootMode::RootMotion {
                            match extract_root_motion(clip, &skeleton) {
                                Ok((in_place, _)) => {
                                    locomotion_clips.insert(name.clone(), Arc::new(in_place));
                                }
                                Err(e) => err(loc.clone(), e.to_string()),
                            }
                        } else {
                            locomotion_clips.insert(name.clone(), clip.clone());
                        }
                    }
                }
            }
        }
        let mut blackboard = BTreeMap::new();
        for (k, v) in &a.blackboard {
            match json_to_value(v) {
                Ok(v) => {
                    blackboard.insert(k.clone(), v);
                }
                Err(m) => err(loc.clone(), format!("blackboard key {k:?}: {m}")),
            }
        }
        let [x, z, yaw] = a.spawn;
        avatars.push(AvatarSpec {
            id: a.id.clone(),
            skeleton,
            controller: a.controller.to_config(),
            spawn: Capsule::at(x, z, yaw),
            idle_clip: a.idle_clip.clone(),
            locomotion,
            blackboard,
            arrival_radius: a.arrival_radius.unwrap_or(DEFAULT_ARRIVAL_RADIUS),
            cruise_speed: a.cruise_speed.unwrap_or(DEFAULT_CRUISE_SPEED),
        });
    }
    avatars.sort_by(|a, b| a.id.cmp(&b.id));

    let calibration = doc.calibration.as_ref().map_or(Transform::IDENTITY, |c| {
        let n = quat_from(c.rotation).norm();
        if (n - 1.0).abs() > MOCAP_NORM_TOLERANCE {
            err("calibration".into(), format!("rotation has norm {n}"));
        }
        c.to_transform()
    });

    let cues: Vec<Cue> = doc.cues.iter().map(CueDoc::to_cue).collect();
    for (i, cue) in cues.iter().enumerate() {
        let loc = format!("cues[{i}]");
        let Some(avatar) = avatars.iter().find(|a| a.id == cue.avatar) else {
            err(loc, format!("cue {:?} targets unknown avatar {:?}", cue.id, cue.avatar));
            continue;
        };
        match resolve_cue(cue, &clips) {
            Err(e) => err(loc.clone(), e.to_string()),
            Ok(g) if g.skeleton() != avatar.skeleton.name() => err(
                loc.clone(),
                format!("cue {:?}: clips target skeleton {:?}, avatar uses {:?}", cue.id, g.skeleton(), avatar.skeleton.name()),
            ),
            Ok(_) => {}
        }
        if cue.walk_to.is_some() {
            if avatar.controller.source != MotionSource::Locomotion {
                err(loc.clone(), format!("cue {:?} walks avatar {:?}, which has no locomotion source", cue.id, cue.avatar));
            } else if navmesh.is_none() {
                err(loc.clone(), format!("cue {:?} walks but the show has no navmesh", cue.id));
            }
        }
        if matches!(avatar.controller.source, MotionSource::Mocap { .. }) {
            warnings.push(ShowIssue::new(loc, format!("cue {:?} targets mocap-driven avatar {:?}; it only shows after a controller switch", cue.id, cue.avatar)));
        }
    }
    let sheet = match CueSheet::new(cues, doc.cue_groups) {
        Ok(s) => Some(s),
        Err(e) => {
            err("cues".into(), e.to_string());
            None
        }
    };

    let mut controls = Vec::new();
    let mut bound = BTreeSet::new();
    for (i, c) in doc.controls.iter().enumerate() {
        let loc = format!("controls[{i}]");
        if !bound.insert((c.ch, c.note)) {
            err(loc.clone(), format!("channel {} note {} is bound twice", c.ch, c.note));
        }
        let target = match (c.action.as_deref(), &c.cue) {
            (Some("go"), None) => ControlTarget::Action(MappedAction::Go),
            (Some("back"), None) => ControlTarget::Action(MappedAction::Back),
            (None, Some(id)) => {
                if !doc.cues.iter().any(|q| &q.id == id) {
                    err(loc.clone(), format!("control maps to unknown cue {id:?}"));
                }
                ControlTarget::Cue(id.clone())
            }
            _ => {
                err(loc, "a control needs either action \"go\"/\"back\" or a cue id".into());
                continue;
            }
        };
        controls.push(ControlMapping {
            channel: c.ch,
            note: c.note,
            target,
        });
    }

    let mut show = Show {
        document: doc.clone(),
        skeletons,
        clips,
        locomotion_clips,
        retargets,
        navmesh,
        behaviours,
        avatars: Vec::new(),
        calibration,
        cues: sheet.unwrap_or_else(|| CueSheet::new(Vec::new(), false).expect("empty sheet")),
        controls,
        seam_threshold,
    };
    for a in &avatars {
        if let Err(m) = show.check_controller(a, &a.controller) {
            let i = doc.avatars.iter().position(|d| d.id == a.id).unwrap_or(0);
            errors.push(ShowIssue::new(format!("avatars[{i}]"), format!("avatar {:?}: {m}", a.id)));
        }
    }
    show.avatars = avatars;

    if errors.is_empty() {
        Ok(Parsed { value: show, warnings })
    } else {
        Err(ShowErrors(errors))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("non-finite number in {0}")]
    NonFinite(&'static str),
    #[error("frame has {found} rotations, skeleton has {expected} bones")]
    CountMismatch { expected: usize, found: usize },
    #[error("rotation {index} has norm {norm}, too far from unit to renormalize")]
    BadRotation { index: usize, norm: f64 },
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
}

/// One mocap sample for one avatar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MocapFrame {
    pub avatar: String,
    pub t: f64,
    pub root: [f64; 3],
    pub rot: Vec<[f64; 4]>,
}

/// Parses one newline-delimited record. With `expected_bones`, the rotation count must match.
/// Rotations within [`MOCAP_NORM_TOLERANCE`] of unit norm are renormalized.
pub fn parse_mocap_frame(bytes: &[u8], expected_bones: Option<usize>) -> Result<MocapFrame, WireError> {
    let mut frame: MocapFrame = serde_json::from_slice(bytes).map_err(|e| WireError::Malformed(e.to_string()))?;
    if !frame.t.is_finite() {
        return Err(WireError::NonFinite("t"));
    }
    if !frame.root.iter().all(|v| v.is_finite()) {
        return Err(WireError::NonFinite("root"));
    }
    if let Some(n) = expected_bones {
        if frame.rot.len() != n {
            return Err(WireError::CountMismatch {
                expected: n,
                found: frame.rot.len(),
            });
        }
    }
    for (index, q) in frame.rot.iter_mut().enumerate() {
        if !q.iter().all(|v| v.is_finite()) {
            return Err(WireError::NonFinite("rot"));
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > MOCAP_NORM_TOLERANCE {
            return Err(WireError::BadRotation { index, norm });
        }
        // already-unit rotations pass through untouched so re-encoded frames parse identically
        if (norm - 1.0).abs() > 1e-12 {
            for v in q.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(frame)
}

pub fn encode_mocap_frame(frame: &MocapFrame) -> String {
    serde_json::to_string(frame).expect("frames always serialize")
}

/// Control input from the text socket, a MIDI bridge or the console.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlMessage {
    Go,
    Back,
    Goto { id: String },
    TriggerCue { id: String },
    SetOffset { avatar: String, x: f64, z: f64, yaw: f64 },
    SetController { avatar: String, controller: ControllerDoc },
    NoteOn { ch: u8, note: u8, vel: u8 },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MidiLine {
    midi: MidiEvent,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MidiEvent {
    ch: u8,
    note: u8,
    vel: u8,
}

fn is_mocap_json(line: &str) -> bool {
    matches!(serde_json::from_str::<serde_json::Value>(line), Ok(serde_json::Value::Object(m)) if m.contains_key("rot"))
}

/// Parses one control line: `GO`, `BACK`, `GOTO <id>`, `CUE <id>`,
/// `OFFSET <avatar> <x> <z> <yaw>`, a MIDI bridge record `{"midi": {...}}`
/// or a console JSON message.
pub fn parse_control(line: &str) -> Result<ControlMessage, WireError> {
    let line = line.trim();
    if line.starts_with('{') {
        if let Ok(m) = serde_json::from_str::<MidiLine>(line) {
            return Ok(ControlMessage::NoteOn {
                ch: m.midi.ch,
                note: m.midi.note,
                vel: m.midi.vel,
            });
        }
        let raw: serde_json::Value = serde_json::from_str(line).map_err(|e| WireError::Malformed(e.to_string()))?;
        let msg: ControlMessage =
            serde_json::from_value(raw.clone()).map_err(|e| WireError::Malformed(e.to_string()))?;
        // tagged enums drop unknown keys silently; compare against the canonical encoding instead
        let canonical = serde_json::to_value(&msg).expect("control messages always serialize");
        if let Some(path) = extra_key(&raw, &canonical, "") {
            return Err(WireError::Malformed(format!("unknown field {path}")));
        }
        return Ok(msg);
    }
    let words: Vec<&str> = line.split_whitespace().collect();
    let Some(keyword) = words.first() else {
        return Err(WireError::Malformed("empty line".into()));
    };
    let arity = |n: usize| {
        if words.len() == n + 1 {
            Ok(())
        } else {
            Err(WireError::Malformed(format!("{keyword} takes {n} argument(s)")))
        }
    };
    let num = |s: &str| -> Result<f64, WireError> {
        let v: f64 = s.parse().map_err(|_| WireError::Malformed(format!("not a number: {s:?}")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(WireError::NonFinite("OFFSET"))
        }
    };
    match keyword.to_ascii_uppercase().as_str() {
        "GO" => arity(0).map(|_| ControlMessage::Go),
        "BACK" => arity(0).map(|_| ControlMessage::Back),
        "GOTO" => arity(1).map(|_| ControlMessage::Goto { id: words[1].to_string() }),
        "CUE" => arity(1).map(|_| ControlMessage::TriggerCue { id: words[1].to_string() }),
        "OFFSET" => {
            arity(4)?;
            Ok(ControlMessage::SetOffset {
                avatar: words[1].to_string(),
                x: num(words[2])?,
                z: num(words[3])?,
                yaw: num(words[4])?,
            })
        }
        _ => Err(WireError::UnknownCommand(keyword.to_string())),
    }
}

/// Text form where the grammar has one (MIDI events use the bridge record), JSON otherwise.
pub fn encode_control_line(msg: &ControlMessage) -> String {
    match msg {
        ControlMessage::Go => "GO".into(),
        ControlMessage::Back => "BACK".into(),
        ControlMessage::Goto { id } if is_word(id) => format!("GOTO {id}"),
        ControlMessage::TriggerCue { id } if is_word(id) => format!("CUE {id}"),
        ControlMessage::SetOffset { avatar, x, z, yaw } if is_word(avatar) => {
            format!("OFFSET {avatar} {x:?} {z:?} {yaw:?}")
        }
        ControlMessage::NoteOn { ch, note, vel } => serde_json::json!({
            "midi": MidiEvent { ch: *ch, note: *note, vel: *vel }
        })
        .to_string(),
        other => encode_control_json(other),
    }
}

/// First object key present (and non-null) in `raw` but absent from `canonical`.
fn extra_key(raw: &serde_json::Value, canonical: &serde_json::Value, at: &str) -> Option<String> {
    let (serde_json::Value::Object(r), serde_json::Value::Object(c)) = (raw, canonical) else {
        return None;
    };
    r.iter().find_map(|(k, v)| match c.get(k) {
        Some(cv) => extra_key(v, cv, &format!("{at}{k}.")),
        None if v.is_null() => None,
        None => Some(format!("{at}{k}")),
    })
}

fn is_word(s: &str) -> bool {
    !s.is_empty() && !s.starts_with('{') && !s.chars().any(char::is_whitespace)
}

/// Console JSON form.
pub fn encode_control_json(msg: &ControlMessage) -> String {
    serde_json::to_string(msg).expect("control messages always serialize")
}

/// Resolves a control message to an engine command. Note-offs (velocity 0)
/// and unmapped notes give `None`.
pub fn map_control(msg: &ControlMessage, mappings: &[ControlMapping]) -> Option<Command> {
    Some(match msg {
        ControlMessage::Go => Command::Go,
        ControlMessage::Back => Command::Back,
        ControlMessage::Goto { id } => Command::Goto(id.clone()),
        ControlMessage::TriggerCue { id } => Command::TriggerCue(id.clone()),
        ControlMessage::SetOffset { avatar, x, z, yaw } => Command::SetOffset {
            avatar: avatar.clone(),
            offset: Transform::from_ground(*x, *z, *yaw),
        },
        ControlMessage::SetController { avatar, controller } => Command::SetController {
            avatar: avatar.clone(),
            config: controller.to_config(),
        },
        ControlMessage::NoteOn { ch, note, vel } => {
            if *vel == 0 {
                log::debug!("note-off ch {ch} note {note} ignored");
                return None;
            }
            let Some(m) = mappings.iter().find(|m| m.channel == *ch && m.note == *note) else {
                log::info!("unmapped note ch {ch} note {note}");
                return None;
            };
            match &m.target {
                ControlTarget::Action(MappedAction::Go) => Command::Go,
                ControlTarget::Action(MappedAction::Back) => Command::Back,
                ControlTarget::Cue(id) => Command::TriggerCue(id.clone()),
            }
        }
    })
}

/// Summary of a cue for the console cue board.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueInfo {
    pub id: String,
    pub avatar: String,
}

/// Server-to-console messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    /// Sent once on connect.
    Show {
        cues: Vec<CueInfo>,
        avatars: Vec<String>,
        pointer: usize,
    },
    Snapshot(SceneState),
    CueFired { id: String, avatar: String, tick: u64 },
    Error { message: String },
}

pub fn encode_server_message(msg: &ServerMessage) -> String {
    serde_json::to_string(msg).expect("server messages always serialize")
}

pub fn parse_server_message(text: &str) -> Result<ServerMessage, WireError> {
    serde_json::from_str(text).map_err(|e| WireError::Malformed(e.to_string()))
}

/// One snapshot log line (the console snapshot message, tagged `"type": "snapshot"`).
pub fn encode_snapshot(state: &SceneState) -> String {
    #[derive(Serialize)]
    struct Tagged<'a> {
        #[serde(rename = "type")]
        kind: &'static str,
        #[serde(flatten)]
        state: &'a SceneState,
    }
    serde_json::to_string(&Tagged {
        kind: "snapshot",
        state,
    })
    .expect("snapshots always serialize")
}

pub fn parse_snapshot(text: &str) -> Result<SceneState, WireError> {
    match parse_server_message(text)? {
        ServerMessage::Snapshot(s) => Ok(s),
        other => Err(WireError::Malformed(format!("expected a snapshot, got {other:?}"))),
    }
}

/// One scripted input: delivered once `tick` ticks have completed.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub tick: u64,
    pub input: TraceInput,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceInput {
    Control(ControlMessage),
    Mocap(MocapFrame),
}

impl TraceInput {
    /// Avatar named by the input, if any.
    pub fn avatar(&self) -> Option<&str> {
        match self {
            TraceInput::Mocap(f) => Some(&f.avatar),
            TraceInput::Control(ControlMessage::SetOffset { avatar, .. })
            | TraceInput::Control(ControlMessage::SetController { avatar, .. }) => Some(avatar),
            TraceInput::Control(_) => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("trace line {line}: {message}")]
pub struct TraceError {
    pub line: usize,
    pub message: String,
}

/// Parses an input trace: each line is `<tick> <control or mocap record>`;
/// blank lines and `#` comments are skipped; ticks must not decrease.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEntry>, TraceError> {
    let mut out = Vec::new();
    let mut last = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |message: String| TraceError { line: i + 1, message };
        let (tick, rest) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| fail("expected `<tick> <record>`".into()))?;
        let tick: u64 = tick.parse().map_err(|_| fail(format!("bad tick {tick:?}")))?;
        if tick < last {
            return Err(fail(format!("tick {tick} goes backwards (previous {last})")));
        }
        last = tick;
        let rest = rest.trim();
        let input = if is_mocap_json(rest) {
            TraceInput::Mocap(parse_mocap_frame(rest.as_bytes(), None).map_err(|e| fail(e.to_string()))?)
        } else {
            TraceInput::Control(parse_control(rest).map_err(|e| fail(e.to_string()))?)
        };
        out.push(TraceEntry { tick, input });
    }
    Ok(out)
}

pub fn encode_trace_entry(entry: &TraceEntry) -> String {
    let body = match &entry.input {
        TraceInput::Control(c) => encode_control_line(c),
        TraceInput::Mocap(f) => encode_mocap_frame(f),
    };
    format!("{} {body}", entry.tick)
}
