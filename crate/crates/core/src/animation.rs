//! Keyframed clips: sampling, blending, root-motion extraction and loop-seam metrics.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::math::{wrap_angle, Quat, Transform, Vec3};
use crate::skeleton::{Pose, Skeleton, SkeletonError};

/// Seam distance above which an idle loop is flagged as conspicuous.
pub const DEFAULT_SEAM_THRESHOLD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Salience {
    Salient,
    Idle,
}

impl fmt::Display for Salience {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Salience::Salient => "salient",
            Salience::Idle => "idle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RootMode {
    InPlace,
    RootMotion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keyframe {
    pub time: f64,
    pub value: Transform,
}

impl Keyframe {
    pub fn new(time: f64, value: Transform) -> Self {
        Self { time, value }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AnimationError {
    #[error("clip {clip:?}: {reason}")]
    InvalidClip { clip: String, reason: String },
    #[error("clip {0:?} is not loopable and cannot be sampled with wrap")]
    WrapNotLoopable(String),
    #[error("invalid sample time {0}")]
    InvalidTime(f64),
    #[error("clip {clip:?} targets skeleton {expected:?}, got {found:?}")]
    WrongSkeleton {
        clip: String,
        expected: String,
        found: String,
    },
    #[error("clip {0:?} has no root track")]
    MissingRootTrack(String),
    #[error("clip {0:?} is already in place")]
    AlreadyInPlace(String),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

/// An immutable keyframed animation clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    name: String,
    skeleton: String,
    duration: f64,
    tracks: BTreeMap<String, Vec<Keyframe>>,
    loopable: bool,
    salience: Salience,
    root_mode: RootMode,
}

impl Clip {
    pub fn new(
        name: impl Into<String>,
        skeleton: impl Into<String>,
        duration: f64,
        tracks: BTreeMap<String, Vec<Keyframe>>,
        loopable: bool,
        salience: Salience,
        root_mode: RootMode,
    ) -> Result<Self, AnimationError> {
        let name = name.into();
        let invalid = |reason: String| AnimationError::InvalidClip {
            clip: name.clone(),
            reason,
        };
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(invalid(format!("duration must be positive, got {duration}")));
        }
        if salience == Salience::Idle && !loopable {
            return Err(invalid("idle clips must be loopable".into()));
        }
        let mut tracks = tracks;
        for (bone, keys) in tracks.iter_mut() {
            if keys.is_empty() {
                return Err(invalid(format!("track {bone:?} has no keyframes")));
            }
            let mut prev = f64::NEG_INFINITY;
            for k in keys.iter_mut() {
                if !(k.time >= 0.0 && k.time.is_finite()) || k.time <= prev {
                    return Err(invalid(format!(
                        "track {bone:?}: keyframe times must be non-negative and strictly increasing"
                    )));
                }
                if !k.value.is_finite() || k.value.rotation.norm() == 0.0 {
                    return Err(invalid(format!("track {bone:?}: non-finite keyframe")));
                }
                k.value.rotation = k.value.rotation.normalized();
                prev = k.time;
            }
            if prev > duration {
                return Err(invalid(format!("track {bone:?} ends after the clip duration")));
            }
        }
        Ok(Self {
            name,
            skeleton: skeleton.into(),
            duration,
            tracks,
            loopable,
            salience,
            root_mode,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn skeleton(&self) -> &str {
        &self.skeleton
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn tracks(&self) -> &BTreeMap<String, Vec<Keyframe>> {
        &self.tracks
    }

    pub fn loopable(&self) -> bool {
        self.loopable
    }

    pub fn salience(&self) -> Salience {
        self.salience
    }

    pub fn root_mode(&self) -> RootMode {
        self.root_mode
    }

    /// Checks that every track names a bone of `skeleton`.
    pub fn check_skeleton(&self, skeleton: &Skeleton) -> Result<(), AnimationError> {
        if self.skeleton != skeleton.name() {
            return Err(AnimationError::WrongSkeleton {
                clip: self.name.clone(),
                expected: self.skeleton.clone(),
                found: skeleton.name().to_string(),
            });
        }
        for bone in self.tracks.keys() {
            skeleton.bone_index(bone)?;
        }
        Ok(())
    }

    /// Maps a requested time onto clip time.
    pub fn clip_time(&self, t: f64, wrap: bool) -> Result<f64, AnimationError> {
        if wrap && !self.loopable {
            return Err(AnimationError::WrapNotLoopable(self.name.clone()));
        }
        if !(t >= 0.0 && t.is_finite()) {
            return Err(AnimationError::InvalidTime(t));
        }
        Ok(if wrap {
            t.rem_euclid(self.duration)
        } else {
            t.min(self.duration)
        })
    }

    /// Samples the clip. Bones without a track hold their bind transform.
    pub fn sample(&self, skeleton: &Skeleton, t: f64, wrap: bool) -> Result<Pose, AnimationError> {
        let t = self.clip_time(t, wrap)?;
        if self.skeleton != skeleton.name() {
            return Err(AnimationError::WrongSkeleton {
                clip: self.name.clone(),
                expected: self.skeleton.clone(),
                found: skeleton.name().to_string(),
            });
        }
        let mut pose = skeleton.bind_pose();
        for (bone, keys) in &self.tracks {
            let i = skeleton.bone_index(bone)?;
            pose.locals[i] = sample_track(keys, t);
        }
        Ok(pose)
    }
}

/// Interpolates a single track; times outside the keyed range clamp.
pub fn sample_track(keys: &[Keyframe], t: f64) -> Transform {
    let first = &keys[0];
    if t <= first.time {
        return first.value;
    }
    let next = keys.partition_point(|k| k.time <= t);
    if next == keys.len() {
        return keys[keys.len() - 1].value;
    }
    let (a, b) = (&keys[next - 1], &keys[next]);
    let u = (t - a.time) / (b.time - a.time);
    if u == 0.0 {
        return a.value;
    }
    a.value.lerp(&b.value, u)
}

/// Per-bone blend from `a` (alpha = 0) to `b` (alpha = 1).
pub fn crossfade(a: &Pose, b: &Pose, alpha: f64) -> Result<Pose, AnimationError> {
    if a.locals.len() != b.locals.len() || a.skeleton != b.skeleton {
        return Err(SkeletonError::PoseMismatch {
            skeleton: a.skeleton.to_string(),
            expected: a.locals.len(),
            found: b.locals.len(),
        }
        .into());
    }
    let alpha = alpha.clamp(0.0, 1.0);
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    Ok(Pose {
        skeleton: a.skeleton.clone(),
        locals: a.locals.iter().zip(&b.locals).map(|(x, y)| x.lerp(y, alpha)).collect(),
    })
}

/// Ground-plane root displacement (clip space) and yaw at one instant, relative to clip start.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RootKey {
    pub time: f64,
    pub dx: f64,
    pub dz: f64,
    pub yaw: f64,
}

/// Root motion removed from a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct RootTrajectory {
    keys: Vec<RootKey>,
}

impl RootTrajectory {
    pub fn keys(&self) -> &[RootKey] {
        &self.keys
    }

    pub fn end(&self) -> RootKey {
        *self.keys.last().expect("trajectory has at least one key")
    }

    pub fn sample(&self, t: f64) -> RootKey {
        let first = self.keys[0];
        if t <= first.time {
            return RootKey { time: t, ..first };
        }
        let next = self.keys.partition_point(|k| k.time <= t);
        if next == self.keys.len() {
            return RootKey { time: t, ..self.end() };
        }
        let (a, b) = (self.keys[next - 1], self.keys[next]);
        let u = (t - a.time) / (b.time - a.time);
        RootKey {
            time: t,
            dx: a.dx + (b.dx - a.dx) * u,
            dz: a.dz + (b.dz - a.dz) * u,
            yaw: a.yaw + (b.yaw - a.yaw) * u,
        }
    }

    /// Re-applies the trajectory to an in-place root transform.
    pub fn compose(in_place_root: &Transform, key: &RootKey) -> Transform {
        Transform {
            translation: in_place_root.translation + Vec3::new(key.dx, 0.0, key.dz),
            rotation: (Quat::from_yaw(key.yaw) * in_place_root.rotation).normalized(),
        }
    }
}

/// Splits a root-motion clip into an in-place clip and the ground-plane trajectory of its root.
///
/// Vertical root translation and the non-yaw part of the root rotation stay in the clip.
pub fn extract_root_motion(clip: &Clip, skeleton: &Skeleton) -> Result<(Clip, RootTrajectory), AnimationError> {
    if clip.root_mode == RootMode::InPlace {
        return Err(AnimationError::AlreadyInPlace(clip.name.clone()));
    }
    clip.check_skeleton(skeleton)?;
    let root_name = &skeleton.root().name;
    let root = clip
        .tracks
        .get(root_name)
        .ok_or_else(|| AnimationError::MissingRootTrack(clip.name.clone()))?;

    let start = root[0].value;

    let mut keys = Vec::with_capacity(root.len());
    let mut in_place = Vec::with_capacity(root.len());
    let mut prev_raw = start.rotation.yaw();
    let mut unwrapped = 0.0;
    for k in root {
        let raw = k.value.rotation.yaw();
        unwrapped += wrap_angle(raw - prev_raw);
        prev_raw = raw;
        keys.push(RootKey {
            time: k.time,
            dx: k.value.translation.x - start.translation.x,
            dz: k.value.translation.z - start.translation.z,
            yaw: unwrapped,
        });
        in_place.push(Keyframe {
            time: k.time,
            value: Transform {
                translation: Vec3::new(start.translation.x, k.value.translation.y, start.translation.z),
                rotation: (Quat::from_yaw(-unwrapped) * k.value.rotation).normalized(),
            },
        });
    }

    let mut tracks = clip.tracks.clone();
    tracks.insert(root_name.clone(), in_place);
    let stripped = Clip {
        tracks,
        root_mode: RootMode::InPlace,
        ..clip.clone()
    };
    Ok((stripped, RootTrajectory { keys }))
}

/// Largest world-space distance of any bone between the first and last frame.
pub fn loop_seam_error(clip: &Clip, skeleton: &Skeleton) -> Result<f64, AnimationError> {
    let first = skeleton.local_to_world(&clip.sample(skeleton, 0.0, false)?)?;
    let last = skeleton.local_to_world(&clip.sample(skeleton, clip.duration, false)?)?;
    Ok(first
        .iter()
        .zip(&last)
        .map(|(a, b)| a.translation.distance(b.translation))
        .fold(0.0, f64::max))
}
