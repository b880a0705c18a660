//! Headless avatar-direction runtime.
//!
//! Animates virtual performers on a simulated stage: clips are sampled and
//! retargeted onto avatar skeletons, capsule locomotion is driven by a small
//! state machine, navigation runs over a triangulated walkable mesh, behaviour
//! trees supply autonomous decisions, and an operator fires cue sheets through
//! a salient/idle player.

pub mod animation;
pub mod behaviour;
pub mod direction;
pub mod locomotion;
pub mod math;
pub mod navigation;
pub mod protocol;
pub mod retarget;
pub mod skeleton;
pub mod stage;

pub use math::{Quat, Transform, Vec3};
