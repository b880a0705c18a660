mod common;

use std::f64::consts::FRAC_PI_2;

use proptest::prelude::*;
use shadowstage::skeleton::{validate_skeleton, Bone, Skeleton, SkeletonError, Violation};
use shadowstage::{Quat, Transform, Vec3};

fn chain(root: Transform, child: Transform) -> Skeleton {
    Skeleton::new(
        "chain",
        vec![Bone::new("root", None, root), Bone::new("child", Some(0), child)],
    )
    .unwrap()
}

#[test]
fn root_only_identity_pose_is_identity() {
    let s = Skeleton::new("one", vec![Bone::new("root", None, Transform::IDENTITY)]).unwrap();
    assert!(validate_skeleton(s.bones()).is_empty());
    let w = s.local_to_world(&s.bind_pose()).unwrap();
    assert_eq!(w, vec![Transform::IDENTITY]);
}

#[test]
fn rotated_root_swings_child_onto_negative_x() {
    let s = chain(Transform::IDENTITY, Transform::from_translation(Vec3::new(0.0, 1.0, 0.0)));
    let mut pose = s.bind_pose();
    pose.locals[0].rotation = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), FRAC_PI_2);
    let w = s.local_to_world(&pose).unwrap();
    let oracle = common::fk_oracle(&s, &pose);
    let (dp, dq) = common::matrix_error(&w[1], &oracle[1]);
    assert!(dp < 1e-6 && dq < 1e-6);
    assert!(w[1].translation.distance(Vec3::new(-1.0, 0.0, 0.0)) < 1e-6);
}

#[test]
fn random_ten_bone_chain_matches_matrix_oracle() {
    let mut rng = common::rng(10);
    for _ in 0..50 {
        let bones = (0..10)
            .map(|i| Bone::new(format!("b{i}"), (i > 0).then(|| i - 1), common::transform(&mut rng)))
            .collect();
        let s = Skeleton::new("ten", bones).unwrap();
        let pose = common::pose(&mut rng, &s);
        let w = s.local_to_world(&pose).unwrap();
        for (t, m) in w.iter().zip(common::fk_oracle(&s, &pose)) {
            let (dp, dq) = common::matrix_error(t, &m);
            assert!(dp < 1e-6 && dq < 1e-6, "dp {dp} dq {dq}");
        }
    }
}

#[test]
fn bind_pose_fk_accumulates_bind_transforms() {
    let mut rng = common::rng(3);
    let s = Skeleton::new(
        "three",
        vec![
            Bone::new("a", None, common::transform(&mut rng)),
            Bone::new("b", Some(0), common::transform(&mut rng)),
            Bone::new("c", Some(1), common::transform(&mut rng)),
        ],
    )
    .unwrap();
    let bind = s.bind_pose();
    for (i, b) in s.bones().iter().enumerate() {
        assert_eq!(bind.locals[i], b.bind_local);
    }
    for (t, m) in s.local_to_world(&bind).unwrap().iter().zip(common::fk_oracle(&s, &bind)) {
        let (dp, dq) = common::matrix_error(t, &m);
        assert!(dp < 1e-9 && dq < 1e-9);
    }
}

#[test]
fn violations_are_reported_together() {
    let two_roots = vec![
        Bone::new("a", None, Transform::IDENTITY),
        Bone::new("b", None, Transform::IDENTITY),
    ];
    assert_eq!(validate_skeleton(&two_roots), vec![Violation::MultipleRoots(vec![0, 1])]);

    let bad_order = vec![
        Bone::new("a", None, Transform::IDENTITY),
        Bone::new("b", Some(2), Transform::IDENTITY),
        Bone::new("c", Some(0), Transform::IDENTITY),
    ];
    assert_eq!(
        validate_skeleton(&bad_order),
        vec![Violation::ParentOrder { bone: 1, parent: 2 }]
    );

    let mut messy = vec![
        Bone::new("a", None, Transform::IDENTITY),
        Bone::new("a", None, Transform::IDENTITY),
    ];
    messy[1].bind_local.rotation = Quat::new(2.0, 0.0, 0.0, 0.0);
    let v = validate_skeleton(&messy);
    assert_eq!(v.len(), 3, "{v:?}");
    assert!(matches!(
        Skeleton::new("messy", messy),
        Err(SkeletonError::Invalid { violations, .. }) if violations.len() == 3
    ));
}

#[test]
fn bone_index_lookup() {
    let s = Skeleton::new(
        "s",
        vec![
            Bone::new("root", None, Transform::IDENTITY),
            Bone::new("hips", Some(0), Transform::IDENTITY),
            Bone::new("head", Some(1), Transform::IDENTITY),
        ],
    )
    .unwrap();
    assert_eq!(s.bone_index("root"), Ok(0));
    assert_eq!(s.bone_index("head"), Ok(2));
    assert_eq!(s.bone_index("tail"), Err(SkeletonError::UnknownBone("tail".into())));
}

#[test]
fn pose_length_mismatch_is_an_error() {
    let s = chain(Transform::IDENTITY, Transform::IDENTITY);
    let mut pose = s.bind_pose();
    pose.locals.pop();
    assert!(matches!(s.local_to_world(&pose), Err(SkeletonError::PoseMismatch { .. })));
}

proptest! {
    #[test]
    fn fk_matches_oracle(seed in any::<u64>(), n in 1usize..=20) {
        let mut rng = common::rng(seed);
        let s = common::skeleton(&mut rng, "p", n);
        let pose = common::pose(&mut rng, &s);
        for (t, m) in s.local_to_world(&pose).unwrap().iter().zip(common::fk_oracle(&s, &pose)) {
            let (dp, dq) = common::matrix_error(t, &m);
            prop_assert!(dp < 1e-6 && dq < 1e-6);
        }
    }

    #[test]
    fn normalization_is_idempotent(w in -10.0..10.0f64, x in -10.0..10.0f64, y in -10.0..10.0f64, z in -10.0..10.0f64) {
        let q = Quat::new(w, x, y, z);
        prop_assume!(q.norm() > 1e-6);
        let once = q.normalized();
        prop_assert!((once.norm() - 1.0).abs() < 1e-12);
        let twice = once.normalized();
        prop_assert!(once.distance(twice) < 1e-15);
    }

    #[test]
    fn composition_is_associative(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let (a, b, c) = (common::transform(&mut rng), common::transform(&mut rng), common::transform(&mut rng));
        let l = a.compose(&b).compose(&c);
        let r = a.compose(&b.compose(&c));
        prop_assert!(l.translation.distance(r.translation) < 1e-9);
        prop_assert!(l.rotation.distance(r.rotation) < 1e-9);
        let id = Transform::IDENTITY.compose(&a);
        prop_assert!(id.translation.distance(a.translation) < 1e-12 && id.rotation.distance(a.rotation) < 1e-12);
    }
}
