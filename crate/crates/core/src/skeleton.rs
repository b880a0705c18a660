//! Bone hierarchy, poses and forward kinematics.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::math::{Transform, UNIT_TOLERANCE};

#[derive(Debug, Clone, PartialEq)]
pub struct Bone {
    pub name: String,
    pub parent: Option<usize>,
    pub bind_local: Transform,
    pub length: f64,
}

impl Bone {
    pub fn new(name: impl Into<String>, parent: Option<usize>, bind_local: Transform) -> Self {
        Self {
            name: name.into(),
            parent,
            bind_local,
            length: 0.0,
        }
    }

    pub fn with_length(mut self, length: f64) -> Self {
        self.length = length;
        self
    }
}

/// One broken skeleton invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    DuplicateName(String),
    NoRoot,
    MultipleRoots(Vec<usize>),
    ParentOrder { bone: usize, parent: usize },
    NonUnitRotation { bone: usize, norm: f64 },
    BadLength { bone: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "skeleton has no bones"),
            Violation::DuplicateName(n) => write!(f, "duplicate bone name {n:?}"),
            Violation::NoRoot => write!(f, "no root bone"),
            Violation::MultipleRoots(ids) => write!(f, "multiple roots at bones {ids:?}"),
            Violation::ParentOrder { bone, parent } => {
                write!(f, "parent order: bone {bone} has parent {parent}")
            }
            Violation::NonUnitRotation { bone, norm } => {
                write!(f, "bone {bone} bind rotation has norm {norm}")
            }
            Violation::BadLength { bone } => write!(f, "bone {bone} has a negative or non-finite length"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SkeletonError {
    #[error("invalid skeleton {name:?}: {}", join(.violations))]
    Invalid { name: String, violations: Vec<Violation> },
    #[error("unknown bone {0:?}")]
    UnknownBone(String),
    #[error("pose does not match skeleton {skeleton:?} ({expected} bones, pose has {found})")]
    PoseMismatch {
        skeleton: String,
        expected: usize,
        found: usize,
    },
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Checks every skeleton invariant and returns all violations found.
pub fn validate_skeleton(bones: &[Bone]) -> Vec<Violation> {
    let mut out = Vec::new();
    if bones.is_empty() {
        out.push(Violation::Empty);
        return out;
    }
    let mut seen = HashMap::new();
    for b in bones {
        if seen.insert(b.name.as_str(), ()).is_some() {
            out.push(Violation::DuplicateName(b.name.clone()));
        }
    }
    let roots: Vec<usize> = bones
        .iter()
        .enumerate()
        .filter(|(_, b)| b.parent.is_none())
        .map(|(i, _)| i)
        .collect();
    match roots.len() {
        0 => out.push(Violation::NoRoot),
        1 => {}
        _ => out.push(Violation::MultipleRoots(roots)),
    }
    for (i, b) in bones.iter().enumerate() {
        if let Some(p) = b.parent {
            if p >= i {
                out.push(Violation::ParentOrder { bone: i, parent: p });
            }
        }
        let norm = b.bind_local.rotation.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            out.push(Violation::NonUnitRotation { bone: i, norm });
        }
        if !(b.length >= 0.0 && b.length.is_finite()) {
            out.push(Violation::BadLength { bone: i });
        }
    }
    out
}

/// A validated, immutable bone hierarchy in topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    name: Arc<str>,
    bones: Vec<Bone>,
    index: HashMap<String, usize>,
}

impl Skeleton {
    pub fn new(name: impl Into<String>, bones: Vec<Bone>) -> Result<Self, SkeletonError> {
        let name: String = name.into();
        let violations = validate_skeleton(&bones);
        if !violations.is_empty() {
            return Err(SkeletonError::Invalid { name, violations });
        }
        let bones: Vec<Bone> = bones
            .into_iter()
            .map(|mut b| {
                b.bind_local.rotation = b.bind_local.rotation.normalized();
                b
            })
            .collect();
        let index = bones.iter().enumerate().map(|(i, b)| (b.name.clone(), i)).collect();
        Ok(Self {
            name: name.into(),
            bones,
            index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn len(&self) -> usize {
        self.bones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }

    /// The root is always bone 0 in a valid skeleton.
    pub fn root(&self) -> &Bone {
        &self.bones[0]
    }

    pub fn bone_index(&self, name: &str) -> Result<usize, SkeletonError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| SkeletonError::UnknownBone(name.to_string()))
    }

    pub fn bind_pose(&self) -> Pose {
        Pose {
            skeleton: self.name.clone(),
            locals: self.bones.iter().map(|b| b.bind_local).collect(),
        }
    }

    pub fn check_pose(&self, pose: &Pose) -> Result<(), SkeletonError> {
        if pose.locals.len() != self.bones.len() || *pose.skeleton != *self.name {
            return Err(SkeletonError::PoseMismatch {
                skeleton: self.name.to_string(),
                expected: self.bones.len(),
                found: pose.locals.len(),
            });
        }
        Ok(())
    }

    /// Forward kinematics: world[i] = world[parent(i)] ∘ local[i].
    pub fn local_to_world(&self, pose: &Pose) -> Result<Vec<Transform>, SkeletonError> {
        self.check_pose(pose)?;
        let mut world: Vec<Transform> = Vec::with_capacity(self.bones.len());
        for (bone, local) in self.bones.iter().zip(&pose.locals) {
            let w = match bone.parent {
                Some(p) => world[p].compose(local),
                None => *local,
            };
            world.push(w);
        }
        Ok(world)
    }
}

/// Per-bone local transforms, in skeleton order.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub skeleton: Arc<str>,
    pub locals: Vec<Transform>,
}

impl Pose {
    pub fn len(&self) -> usize {
        self.locals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locals.is_empty()
    }

    /// Largest per-bone (translation distance, rotation distance) to `other`.
    pub fn max_deviation(&self, other: &Pose) -> (f64, f64) {
        if self.locals.len() != other.locals.len() {
            return (f64::INFINITY, f64::INFINITY);
        }
        self.locals.iter().zip(&other.locals).fold((0.0, 0.0), |(dt, dr), (a, b)| {
            (
                f64::max(dt, a.translation.distance(b.translation)),
                f64::max(dr, a.rotation.distance(b.rotation)),
            )
        })
    }
}
