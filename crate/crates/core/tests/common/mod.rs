//! Generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shadowstage::animation::{Clip, Keyframe, RootMode, Salience};
use shadowstage::behaviour::{Action, Blackboard, BtNode, TickStatus};
use shadowstage::navigation::{NavMesh, Point};
use shadowstage::retarget::{build_retarget, BoneMap, RetargetConfig};
use shadowstage::skeleton::{Bone, Pose, Skeleton};
use shadowstage::{Quat, Transform, Vec3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_quat(rng: &mut impl Rng) -> Quat {
    loop {
        let q = Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            return q.normalized();
        }
    }
}

pub fn vec3(rng: &mut impl Rng, r: f64) -> Vec3 {
    Vec3::new(rng.gen_range(-r..r), rng.gen_range(-r..r), rng.gen_range(-r..r))
}

pub fn transform(rng: &mut impl Rng) -> Transform {
    Transform::new(vec3(rng, 1.0), unit_quat(rng))
}

/// Random topologically ordered skeleton; the root bind height is positive.
pub fn skeleton(rng: &mut impl Rng, name: &str, bones: usize) -> Skeleton {
    let mut out = Vec::with_capacity(bones);
    for i in 0..bones {
        let parent = (i > 0).then(|| rng.gen_range(0..i));
        let mut bind = transform(rng);
        if i == 0 {
            bind.translation.y = rng.gen_range(0.5..1.5);
        }
        out.push(Bone::new(format!("b{i}"), parent, bind));
    }
    Skeleton::new(name, out).expect("generated skeleton is valid")
}

/// Random source/target pair with a random partial map that always pairs the roots.
pub fn retarget_config(rng: &mut impl Rng) -> RetargetConfig {
    let n = rng.gen_range(1..=15);
    let source = Arc::new(skeleton(rng, "src", n));
    let n = rng.gen_range(1..=15);
    let target = Arc::new(skeleton(rng, "dst", n));
    let mut targets: Vec<usize> = (1..target.len()).collect();
    targets.shuffle(rng);
    let mut pairs = vec![(source.bones()[0].name.clone(), target.bones()[0].name.clone())];
    for t in targets.into_iter().take(rng.gen_range(0..target.len())) {
        let s = rng.gen_range(0..source.len());
        pairs.push((source.bones()[s].name.clone(), target.bones()[t].name.clone()));
    }
    build_retarget(source, target, &BoneMap::new(pairs)).unwrap()
}

pub fn pose(rng: &mut impl Rng, skeleton: &Skeleton) -> Pose {
    let mut p = skeleton.bind_pose();
    for l in &mut p.locals {
        *l = transform(rng);
    }
    p
}

pub fn to_matrix(t: &Transform) -> Matrix4<f64> {
    let q = UnitQuaternion::from_quaternion(Quaternion::new(t.rotation.w, t.rotation.x, t.rotation.y, t.rotation.z));
    let mut m = q.to_homogeneous();
    m[(0, 3)] = t.translation.x;
    m[(1, 3)] = t.translation.y;
    m[(2, 3)] = t.translation.z;
    m
}

/// Forward kinematics by 4x4 homogeneous matrix products.
pub fn fk_oracle(skeleton: &Skeleton, pose: &Pose) -> Vec<Matrix4<f64>> {
    let mut world: Vec<Matrix4<f64>> = Vec::new();
    for (bone, local) in skeleton.bones().iter().zip(&pose.locals) {
        let m = to_matrix(local);
        world.push(match bone.parent {
            Some(p) => world[p] * m,
            None => m,
        });
    }
    world
}

/// (position error, quaternion distance) between a transform and a matrix.
pub fn matrix_error(t: &Transform, m: &Matrix4<f64>) -> (f64, f64) {
    let pos = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    let dp = (pos - Vector3::new(t.translation.x, t.translation.y, t.translation.z)).norm();
    let rot = Rotation3::from_matrix_unchecked(m.fixed_view::<3, 3>(0, 0).into_owned());
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    let got = Quat::new(q.w, q.i, q.j, q.k);
    (dp, got.distance(t.rotation))
}

pub fn pose_error(a: &Pose, b: &Pose) -> f64 {
    let (p, r) = a.max_deviation(b);
    p.max(r)
}

/// Synthetic root-motion clip: the root walks with varying speed and heading
/// while bobbing vertically; one child bone swings.
pub fn walk_clip(rng: &mut impl Rng, skeleton: &Skeleton, name: &str) -> Clip {
    let duration = rng.gen_range(0.5..3.0);
    let keys = rng.gen_range(3..12);
    let root = &skeleton.root().bind_local;
    let (mut x, mut z, mut yaw) = (root.translation.x, root.translation.z, rng.gen_range(-PI..PI));
    let turn = rng.gen_range(-2.0..2.0);
    let speed = rng.gen_range(0.0..2.0);
    let tilt = Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), rng.gen_range(-0.3..0.3));
    let mut track = Vec::new();
    let step = duration / (keys - 1) as f64;
    for k in 0..keys {
        let t = if k + 1 == keys { duration } else { k as f64 * step };
        let y = root.translation.y + 0.03 * (t * 7.0).sin();
        let rot = Quat::from_yaw(yaw) * tilt;
        track.push(Keyframe::new(t, Transform::new(Vec3::new(x, y, z), rot)));
        let travel = yaw + rng.gen_range(-0.2..0.2);
        x += travel.sin() * speed * step;
        z += travel.cos() * speed * step;
        yaw += turn * step;
    }
    let mut tracks = BTreeMap::new();
    tracks.insert(skeleton.root().name.clone(), track);
    if skeleton.len() > 1 {
        let b = &skeleton.bones()[1];
        let swing = vec![
            Keyframe::new(0.0, b.bind_local),
            Keyframe::new(duration, Transform::new(b.bind_local.translation, unit_quat(rng))),
        ];
        tracks.insert(b.name.clone(), swing);
    }
    Clip::new(
        name,
        skeleton.name(),
        duration,
        tracks,
        false,
        Salience::Salient,
        RootMode::RootMotion,
    )
    .expect("generated clip is valid")
}

/// Clip with random keys on every bone.
pub fn random_clip(rng: &mut impl Rng, skeleton: &Skeleton, name: &str, salience: Salience) -> Clip {
    let duration = rng.gen_range(0.2..3.0);
    let mut tracks = BTreeMap::new();
    for b in skeleton.bones() {
        if rng.gen_bool(0.2) {
            continue;
        }
        let n = rng.gen_range(1..6);
        let mut times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..duration)).collect();
        times.sort_by(f64::total_cmp);
        times.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
        let keys = times
            .into_iter()
            .map(|t| Keyframe::new(t, Transform::new(vec3(rng, 0.5), unit_quat(rng))))
            .collect();
        tracks.insert(b.name.clone(), keys);
    }
    Clip::new(
        name,
        skeleton.name(),
        duration,
        tracks,
        salience == Salience::Idle || rng.gen_bool(0.5),
        salience,
        RootMode::InPlace,
    )
    .expect("generated clip is valid")
}

/// Jittered grid triangulation with random holes; `cols * rows * 2` triangles before holes.
pub fn grid_mesh(rng: &mut impl Rng, cols: usize, rows: usize, hole_chance: f64) -> Option<NavMesh> {
    let mut vertices = Vec::new();
    for j in 0..=rows {
        for i in 0..=cols {
            let jitter = |r: &mut dyn rand::RngCore| (r.next_u32() as f64 / u32::MAX as f64 - 0.5) * 0.5;
            let (dx, dz) = (jitter(rng), jitter(rng));
            vertices.push([i as f64 + dx, j as f64 + dz]);
        }
    }
    let v = |i: usize, j: usize| j * (cols + 1) + i;
    let mut triangles = Vec::new();
    for j in 0..rows {
        for i in 0..cols {
            if rng.gen_bool(hole_chance) {
                continue;
            }
            let (a, b, c, d) = (v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1));
            // counter-clockwise seen from +y with x right and z up the page
            if rng.gen_bool(0.5) {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            } else {
                triangles.push([a, b, d]);
                triangles.push([b, c, d]);
            }
        }
    }
    if triangles.is_empty() {
        return None;
    }
    NavMesh::new(vertices, triangles).ok()
}

pub fn centroid(mesh: &NavMesh, t: usize) -> Point {
    let [a, b, c] = mesh.triangles()[t];
    let v = mesh.vertices();
    [(v[a][0] + v[b][0] + v[c][0]) / 3.0, (v[a][1] + v[b][1] + v[c][1]) / 3.0]
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Result of the Dijkstra oracle: node cost, node points and the triangle corridor.
pub struct OracleRoute {
    pub cost: f64,
    pub points: Vec<Point>,
    pub corridor: Vec<usize>,
}

/// Dijkstra over start, goal and the midpoints of shared triangle edges, with adjacency
/// rebuilt from the raw triangle list. Ties go to the smaller node index.
pub fn dijkstra_oracle(mesh: &NavMesh, start: Point, start_tri: usize, goal: Point, goal_tri: usize) -> Option<OracleRoute> {
    let tris = mesh.triangles();
    let verts = mesh.vertices();
    let mut by_edge: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (t, tri) in tris.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            by_edge.entry((a.min(b), a.max(b))).or_default().push(t);
        }
    }
    // node 0 start, 1 goal, then one node per shared edge
    let mut points = vec![start, goal];
    let mut node_tris: Vec<Vec<usize>> = vec![vec![start_tri], vec![goal_tri]];
    for ((a, b), ts) in &by_edge {
        if ts.len() == 2 {
            points.push([(verts[*a][0] + verts[*b][0]) / 2.0, (verts[*a][1] + verts[*b][1]) / 2.0]);
            node_tris.push(ts.clone());
        }
    }
    let mut in_tri: HashMap<usize, Vec<usize>> = HashMap::new();
    for (n, ts) in node_tris.iter().enumerate() {
        if n == 1 {
            continue;
        }
        for &t in ts {
            in_tri.entry(t).or_default().push(n);
        }
    }
    let n = points.len();
    let mut best = vec![f64::INFINITY; n];
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut done = vec![false; n];
    best[0] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((OrdF64(0.0), 0usize)));
    while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        if u == 1 {
            break;
        }
        let mut next: Vec<(usize, usize)> = Vec::new();
        for &t in &node_tris[u] {
            for &v in in_tri.get(&t).into_iter().flatten() {
                if v != u {
                    next.push((v, t));
                }
            }
            if t == goal_tri {
                next.push((1, t));
            }
        }
        next.sort_unstable();
        next.dedup_by_key(|e| e.0);
        for (v, t) in next {
            let c = d + dist(points[u], points[v]);
            if c < best[v] {
                best[v] = c;
                prev[v] = Some((u, t));
                heap.push(Reverse((OrdF64(c), v)));
            }
        }
    }
    if !done[1] {
        return None;
    }
    let mut chain = vec![(1usize, usize::MAX)];
    let mut cur = 1;
    while let Some((p, t)) = prev[cur] {
        chain.last_mut().expect("non-empty").1 = t;
        chain.push((p, usize::MAX));
        cur = p;
    }
    chain.reverse();
    let pts: Vec<Point> = chain.iter().map(|c| points[c.0]).collect();
    let cost = pts.windows(2).fold(0.0, |acc, w| acc + dist(w[0], w[1]));
    let mut corridor = vec![start_tri];
    for c in &chain {
        if c.1 != usize::MAX && corridor.last() != Some(&c.1) {
            corridor.push(c.1);
        }
    }
    if corridor.last() != Some(&goal_tri) {
        corridor.push(goal_tri);
    }
    Some(OracleRoute {
        cost,
        points: pts,
        corridor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct OrdF64(pub f64);

impl Eq for OrdF64 {}

impl Ord for OrdF64 {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&o.0)
    }
}

/// True when every sample taken every `step` metres along the polyline lies on the mesh.
pub fn polyline_on_mesh(mesh: &NavMesh, pts: &[Point], step: f64) -> bool {
    let on = |p: Point| mesh.locate_polygon(p).is_some() || dist(mesh.constrain(p), p) < 1e-6;
    if !on(pts[0]) {
        return false;
    }
    for w in pts.windows(2) {
        let len = dist(w[0], w[1]);
        let n = (len / step).ceil().max(1.0) as usize;
        for k in 1..=n {
            let u = k as f64 / n as f64;
            if !on([w[0][0] + (w[1][0] - w[0][0]) * u, w[0][1] + (w[1][1] - w[0][1]) * u]) {
                return false;
            }
        }
    }
    true
}

/// Reference interpreter for trees of Sequence, Selector, Condition and SetKey:
/// plain recursion with explicit resume indices keyed by preorder id.
pub struct RefInterpreter {
    resume: HashMap<usize, usize>,
}

impl RefInterpreter {
    pub fn new() -> Self {
        Self { resume: HashMap::new() }
    }

    /// Returns (status, post-order trace, diagnostics count).
    pub fn tick(&mut self, root: &BtNode, bb: &mut Blackboard) -> (TickStatus, Vec<(usize, TickStatus)>, usize) {
        let mut trace = Vec::new();
        let mut diags = 0;
        let s = self.node(root, 0, bb, &mut trace, &mut diags);
        (s, trace, diags)
    }

    fn size(n: &BtNode) -> usize {
        1 + n.children().iter().map(Self::size).sum::<usize>()
    }

    fn node(
        &mut self,
        n: &BtNode,
        id: usize,
        bb: &mut Blackboard,
        trace: &mut Vec<(usize, TickStatus)>,
        diags: &mut usize,
    ) -> TickStatus {
        let status = match n {
            BtNode::Sequence(cs) | BtNode::Selector(cs) => {
                let is_seq = matches!(n, BtNode::Sequence(_));
                let start = self.resume.remove(&id).unwrap_or(0);
                let mut offsets = Vec::with_capacity(cs.len());
                let mut next = id + 1;
                for c in cs {
                    offsets.push(next);
                    next += Self::size(c);
                }
                let mut result = if is_seq { TickStatus::Success } else { TickStatus::Failure };
                for i in start..cs.len() {
                    let s = self.node(&cs[i], offsets[i], bb, trace, diags);
                    if s == TickStatus::Running {
                        self.resume.insert(id, i);
                        result = TickStatus::Running;
                        break;
                    }
                    if is_seq && s == TickStatus::Failure {
                        result = TickStatus::Failure;
                        break;
                    }
                    if !is_seq && s == TickStatus::Success {
                        result = TickStatus::Success;
                        break;
                    }
                }
                result
            }
            BtNode::Condition {
                key,
                comparator,
                operand,
            } => match bb.get(key) {
                Err(_) => {
                    *diags += 1;
                    TickStatus::Failure
                }
                Ok(v) => match comparator.apply(v, operand) {
                    Some(true) => TickStatus::Success,
                    Some(false) => TickStatus::Failure,
                    None => {
                        *diags += 1;
                        TickStatus::Failure
                    }
                },
            },
            BtNode::Action(Action::SetKey(k, v)) => {
                bb.set(k.clone(), v.clone());
                TickStatus::Success
            }
            other => panic!("reference interpreter does not cover {other:?}"),
        };
        trace.push((id, status));
        status
    }
}

/// Expected output of a salient/idle player `k` ticks after a trigger, built by
/// sampling the two clips directly: salient until its end, then the idle loop
/// continuing with the overflow, optionally blended in from `from`.
pub fn splice_oracle(
    skeleton: &Skeleton,
    salient: &Clip,
    idle: &Clip,
    from: &Pose,
    fade_in: f64,
    dt: f64,
    k: u64,
) -> Pose {
    let t = k as f64 * dt;
    let switch = (salient.duration() / dt).ceil() as u64;
    let target = if k < switch {
        salient.sample(skeleton, t, false).expect("salient sample")
    } else {
        idle.sample(skeleton, t - salient.duration(), true).expect("idle sample")
    };
    if fade_in > 0.0 && t < fade_in {
        shadowstage::animation::crossfade(from, &target, t / fade_in).expect("same skeleton")
    } else {
        target
    }
}

pub fn arc_map(clips: Vec<Clip>) -> BTreeMap<String, Arc<Clip>> {
    clips.into_iter().map(|c| (c.name().to_string(), Arc::new(c))).collect()
}

/// Leaves for the exhaustive tree enumeration over keys "a" and "b".
pub fn bt_leaves() -> Vec<BtNode> {
    use shadowstage::behaviour::{Comparator, Value};
    let cond = |key: &str, comparator, operand| BtNode::Condition {
        key: key.into(),
        comparator,
        operand,
    };
    vec![
        cond("a", Comparator::Eq, Value::Number(1.0)),
        cond("b", Comparator::Lt, Value::Number(1.0)),
        cond("b", Comparator::Eq, Value::Bool(true)),
        BtNode::Action(Action::SetKey("a".into(), Value::Number(1.0))),
        BtNode::Action(Action::SetKey("b".into(), Value::Number(0.0))),
        BtNode::Action(Action::SetKey("b".into(), Value::Bool(true))),
    ]
}

/// Every tree of depth at most `depth` (a lone leaf has depth 1) whose
/// composites are Sequence or Selector with one or two children.
pub fn enumerate_trees(depth: usize) -> Vec<BtNode> {
    let mut out = bt_leaves();
    if depth <= 1 {
        return out;
    }
    let below = enumerate_trees(depth - 1);
    for make in [BtNode::Sequence as fn(Vec<BtNode>) -> BtNode, BtNode::Selector] {
        for a in &below {
            out.push(make(vec![a.clone()]));
            for b in &below {
                out.push(make(vec![a.clone(), b.clone()]));
            }
        }
    }
    out
}

/// Initial blackboards: "a" absent, 0 or 1; "b" absent, 0, 1 or true.
pub fn bt_blackboards() -> Vec<Blackboard> {
    use shadowstage::behaviour::Value;
    let a = [None, Some(Value::Number(0.0)), Some(Value::Number(1.0))];
    let b = [None, Some(Value::Number(0.0)), Some(Value::Number(1.0)), Some(Value::Bool(true))];
    let mut out = Vec::new();
    for va in &a {
        for vb in &b {
            let mut bb = Blackboard::new();
            if let Some(v) = va {
                bb.set("a", v.clone());
            }
            if let Some(v) = vb {
                bb.set("b", v.clone());
            }
            out.push(bb);
        }
    }
    out
}

/// Ticks every enumerated tree twice from every initial blackboard with both the
/// engine and the reference interpreter; returns (cases, mismatches).
pub fn bt_exhaustive(depth: usize) -> (usize, usize) {
    use shadowstage::behaviour::{tick_bt, AvatarContext, BehaviourTree, BtMemory};
    let ctx = AvatarContext {
        position: [0.0, 0.0],
        arrival_radius: 0.2,
    };
    let (mut cases, mut mismatches) = (0, 0);
    for tree in enumerate_trees(depth) {
        let bt = BehaviourTree::new(tree.clone()).expect("enumerated trees are valid");
        for init in bt_blackboards() {
            let (mut bb, mut ref_bb) = (init.clone(), init);
            let mut memory = BtMemory::new(&bt);
            let mut reference = RefInterpreter::new();
            for _ in 0..2 {
                let out = tick_bt(&bt, &mut memory, &mut bb, 1.0 / 60.0, ctx);
                let (status, trace, diags) = reference.tick(&tree, &mut ref_bb);
                cases += 1;
                if out.status != status
                    || out.trace != trace
                    || out.diagnostics.len() != diags
                    || bb.entries() != ref_bb.entries()
                {
                    mismatches += 1;
                }
            }
        }
    }
    (cases, mismatches)
}

/// Outcome of one trigger-then-tick run against the splice oracle.
pub struct SpliceCase {
    pub max_error: f64,
    /// Tick count after which the player first reported LoopingIdle.
    pub switched_at: Option<u64>,
    pub expected_switch: u64,
}

/// Builds a random (salient, idle) pair on a random skeleton, triggers from the bind
/// pose and compares every tick with the splice oracle.
pub fn splice_case(rng: &mut impl Rng, fade_in: f64, dt: f64, ticks_after_switch: u64) -> SpliceCase {
    use shadowstage::direction::{tick_player, trigger_cue, Gesture, PlayerState, SalientIdlePlayer};
    let n = rng.gen_range(1..=12);
    let skel = Arc::new(skeleton(rng, "s", n));
    let salient = Arc::new(random_clip(rng, &skel, "salient", Salience::Salient));
    let idle = Arc::new(random_clip(rng, &skel, "idle", Salience::Idle));
    let gesture = Arc::new(Gesture::new("g", Some(salient.clone()), idle.clone(), fade_in).expect("valid gesture"));
    let mut player = SalientIdlePlayer::new(skel.clone());
    let from = skel.bind_pose();
    trigger_cue(&mut player, gesture, from.clone()).expect("trigger");
    let expected_switch = (salient.duration() / dt).ceil() as u64;
    let mut case = SpliceCase {
        max_error: 0.0,
        switched_at: None,
        expected_switch,
    };
    for k in 1..=expected_switch + ticks_after_switch {
        let got = tick_player(&mut player, dt);
        let want = splice_oracle(&skel, &salient, &idle, &from, fade_in, dt, k);
        case.max_error = case.max_error.max(pose_error(&got, &want));
        if case.switched_at.is_none() && matches!(player.state(), PlayerState::LoopingIdle { .. }) {
            case.switched_at = Some(k);
        }
    }
    case
}

/// Worst (metres, radians) error after stripping root motion and composing it back.
pub fn root_motion_round_trip(clip: &Clip, skeleton: &Skeleton) -> (f64, f64) {
    use shadowstage::animation::{extract_root_motion, RootTrajectory};
    let (in_place, traj) = extract_root_motion(clip, skeleton).expect("walk clips extract");
    let root = &skeleton.root().name;
    let mut worst = (0.0f64, 0.0f64);
    for (orig, stripped) in clip.tracks()[root].iter().zip(&in_place.tracks()[root]) {
        let back = RootTrajectory::compose(&stripped.value, &traj.sample(orig.time));
        worst.0 = worst.0.max(back.translation.distance(orig.value.translation));
        let dq = back.rotation.distance(orig.value.rotation);
        // chord length to angle
        worst.1 = worst.1.max(4.0 * (dq / 2.0).asin());
    }
    worst
}

/// Plans with the engine and the Dijkstra oracle and checks they agree: same reachability,
/// bit-equal graph cost, and a smoothed path that stays on the mesh and is no longer than the route.
pub fn check_route(mesh: &NavMesh, start: Point, goal: Point) -> Result<(), String> {
    use shadowstage::navigation::{NavError, Path};
    let (st, gt) = (mesh.locate_polygon(start).ok_or("start off mesh")?, mesh.locate_polygon(goal).ok_or("goal off mesh")?);
    match (mesh.plan_route(start, goal), dijkstra_oracle(mesh, start, st, goal, gt)) {
        (Ok(route), Some(o)) => {
            if route.cost != o.cost {
                return Err(format!("graph cost {} vs oracle {}", route.cost, o.cost));
            }
            let path = mesh.find_path(start, goal).map_err(|e| e.to_string())?;
            let oracle_path = Path::new(mesh.string_pull(start, goal, &o.corridor));
            if start != goal && (path.length - oracle_path.length).abs() >= 1e-9 {
                return Err(format!("path length {} vs oracle corridor {}", path.length, oracle_path.length));
            }
            if path.length > route.cost + 1e-9 {
                return Err(format!("smoothed path {} longer than route {}", path.length, route.cost));
            }
            if !polyline_on_mesh(mesh, &path.waypoints, 0.05) {
                return Err("path leaves the mesh".into());
            }
            Ok(())
        }
        (Err(NavError::NoRoute), None) => Ok(()),
        (got, want) => Err(format!("engine {got:?} vs oracle found={}", want.is_some())),
    }
}
