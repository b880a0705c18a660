//! Pose transfer between differently proportioned skeletons.
//!
//! Mapped bones receive the source bone's rotation delta relative to its bind
//! rotation, re-expressed on top of the target bind rotation. Only the root
//! translation transfers, scaled by the ratio of bind root heights; every
//! other target bone keeps its bind translation so limb lengths are preserved.

use std::collections::HashSet;
use std::sync::Arc;

use thiserror::Error;

use crate::math::Transform;
use crate::skeleton::{Pose, Skeleton, SkeletonError};

/// Root heights at or below this are treated as degenerate (ratio falls back to 1).
const MIN_ROOT_HEIGHT: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoneMap {
    pub pairs: Vec<(String, String)>,
}

impl BoneMap {
    pub fn new<S: Into<String>, T: Into<String>>(pairs: impl IntoIterator<Item = (S, T)>) -> Self {
        Self {
            pairs: pairs.into_iter().map(|(s, t)| (s.into(), t.into())).collect(),
        }
    }

    /// Maps every bone of `skeleton` onto the same-named bone.
    pub fn identity(skeleton: &Skeleton) -> Self {
        Self::new(skeleton.bones().iter().map(|b| (b.name.clone(), b.name.clone())))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RetargetError {
    #[error("unknown {side} bone {name:?}")]
    UnknownBone { side: &'static str, name: String },
    #[error("target bone {0:?} is mapped more than once")]
    DuplicateTarget(String),
    #[error("source root {source_root:?} must map to target root {target_root:?}")]
    RootsUnmapped { source_root: String, target_root: String },
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

#[derive(Debug, Clone)]
pub struct RetargetConfig {
    source: Arc<Skeleton>,
    target: Arc<Skeleton>,
    /// (source index, target index), sorted by target index.
    pairs: Vec<(usize, usize)>,
    height_ratio: f64,
}

impl RetargetConfig {
    pub fn source(&self) -> &Arc<Skeleton> {
        &self.source
    }

    pub fn target(&self) -> &Arc<Skeleton> {
        &self.target
    }

    pub fn height_ratio(&self) -> f64 {
        self.height_ratio
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Mapped pairs whose world-space bind orientations differ by more than `tolerance`
    /// (sign-invariant quaternion distance). Such rigs violate the shared-bind-frame
    /// content requirement and are reported rather than corrected.
    pub fn bind_orientation_mismatches(&self, tolerance: f64) -> Vec<(String, String)> {
        let (Ok(sw), Ok(tw)) = (
            self.source.local_to_world(&self.source.bind_pose()),
            self.target.local_to_world(&self.target.bind_pose()),
        ) else {
            return Vec::new();
        };
        self.pairs
            .iter()
            .filter(|&&(s, t)| sw[s].rotation.distance(tw[t].rotation) > tolerance)
            .map(|&(s, t)| {
                (
                    self.source.bones()[s].name.clone(),
                    self.target.bones()[t].name.clone(),
                )
            })
            .collect()
    }
}

pub fn build_retarget(
    source: Arc<Skeleton>,
    target: Arc<Skeleton>,
    map: &BoneMap,
) -> Result<RetargetConfig, RetargetError> {
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(map.pairs.len());
    for (s, t) in &map.pairs {
        let si = source.bone_index(s).map_err(|_| RetargetError::UnknownBone {
            side: "source",
            name: s.clone(),
        })?;
        let ti = target.bone_index(t).map_err(|_| RetargetError::UnknownBone {
            side: "target",
            name: t.clone(),
        })?;
        if !seen.insert(ti) {
            return Err(RetargetError::DuplicateTarget(t.clone()));
        }
        pairs.push((si, ti));
    }
    if !pairs.contains(&(0, 0)) {
        return Err(RetargetError::RootsUnmapped {
            source_root: source.root().name.clone(),
            target_root: target.root().name.clone(),
        });
    }
    pairs.sort_by_key(|&(_, t)| t);

    let source_height = source.root().bind_local.translation.y;
    let target_height = target.root().bind_local.translation.y;
    let height_ratio = if source_height <= MIN_ROOT_HEIGHT || target_height <= MIN_ROOT_HEIGHT {
        1.0
    } else {
        target_height / source_height
    };

    Ok(RetargetConfig {
        source,
        target,
        pairs,
        height_ratio,
    })
}

/// Transfers `source_pose` onto the target skeleton.
pub fn retarget_pose(config: &RetargetConfig, source_pose: &Pose) -> Result<Pose, RetargetError> {
    config.source.check_pose(source_pose)?;
    let sbones = config.source.bones();
    let tbones = config.target.bones();
    let mut out = config.target.bind_pose();
    for &(s, t) in &config.pairs {
        let delta = sbones[s].bind_local.rotation.inverse() * source_pose.locals[s].rotation;
        out.locals[t].rotation = (tbones[t].bind_local.rotation * delta).normalized();
    }
    let src_root = &source_pose.locals[0];
    let displacement = src_root.translation - sbones[0].bind_local.translation;
    out.locals[0] = Transform {
        translation: tbones[0].bind_local.translation + displacement.scale(config.height_ratio),
        rotation: out.locals[0].rotation,
    };
    Ok(out)
}
