//! Walkable-surface navigation: triangle mesh, A* over portal midpoints,
//! funnel smoothing and path following.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use thiserror::Error;

use crate::locomotion::LocomotionCommand;

/// Ground-plane point (x, z) in meters.
pub type Point = [f64; 2];

/// Endpoints this far off the mesh (or closer) are snapped onto it.
pub const SNAP_TOLERANCE: f64 = 0.25;
const MIN_AREA: f64 = 1e-9;
const EDGE_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum NavError {
    #[error("navmesh has no triangles")]
    Empty,
    #[error("triangle {0} references a missing vertex")]
    BadIndex(usize),
    #[error("vertex {0} is not finite")]
    NonFinite(usize),
    #[error("triangle {0} is degenerate")]
    Degenerate(usize),
    #[error("triangle {0} winds against the rest of the mesh")]
    MixedWinding(usize),
    #[error("edge ({0}, {1}) is shared by more than two triangles")]
    NonManifold(usize, usize),
    #[error("{which} point ({x}, {z}) is off the navmesh")]
    OffMesh { which: &'static str, x: f64, z: f64 },
    #[error("no route between start and goal")]
    NoRoute,
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    let (u, v) = (sub(a, o), sub(b, o));
    u[0] * v[1] - u[1] * v[0]
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn closest_on_segment(p: Point, a: Point, b: Point) -> Point {
    let ab = sub(b, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 == 0.0 {
        return a;
    }
    let ap = sub(p, a);
    let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0);
    [a[0] + ab[0] * t, a[1] + ab[1] * t]
}

/// Edge shared by exactly two triangles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Portal {
    pub vertices: [usize; 2],
    pub triangles: [usize; 2],
    pub midpoint: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavMesh {
    vertices: Vec<Point>,
    /// Counter-clockwise in (x, z).
    triangles: Vec<[usize; 3]>,
    /// Neighbour across edge k (vertex k to vertex k+1).
    neighbours: Vec<[Option<usize>; 3]>,
    portals: Vec<Portal>,
    tri_portals: Vec<Vec<usize>>,
}

impl NavMesh {
    /// Builds a mesh. A uniformly clockwise mesh is accepted and stored re-wound.
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self, NavError> {
        if triangles.is_empty() {
            return Err(NavError::Empty);
        }
        if let Some(i) = vertices.iter().position(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(NavError::NonFinite(i));
        }
        let mut sign = 0.0;
        for (i, t) in triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= vertices.len()) {
                return Err(NavError::BadIndex(i));
            }
            let area = 0.5 * cross(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
            if area.abs() <= MIN_AREA {
                return Err(NavError::Degenerate(i));
            }
            if sign == 0.0 {
                sign = area.signum();
            } else if area.signum() != sign {
                return Err(NavError::MixedWinding(i));
            }
        }
        let triangles: Vec<[usize; 3]> = if sign < 0.0 {
            triangles.into_iter().map(|[a, b, c]| [a, c, b]).collect()
        } else {
            triangles
        };

        let mut edges: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
        for (ti, t) in triangles.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.entry((a.min(b), a.max(b))).or_default().push((ti, k));
            }
        }
        let mut keys: Vec<_> = edges.keys().copied().collect();
        keys.sort_unstable();
        let mut neighbours = vec![[None; 3]; triangles.len()];
        let mut portals = Vec::new();
        let mut tri_portals = vec![Vec::new(); triangles.len()];
        for key in keys {
            let users = &edges[&key];
            match users.as_slice() {
                [_] => {}
                [(t0, k0), (t1, k1)] => {
                    neighbours[*t0][*k0] = Some(*t1);
                    neighbours[*t1][*k1] = Some(*t0);
                    let (a, b) = (vertices[key.0], vertices[key.1]);
                    let id = portals.len();
                    portals.push(Portal {
                        vertices: [key.0, key.1],
                        triangles: [*t0.min(t1), *t0.max(t1)],
                        midpoint: [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5],
                    });
                    tri_portals[*t0].push(id);
                    tri_portals[*t1].push(id);
                }
                _ => return Err(NavError::NonManifold(key.0, key.1)),
            }
        }
        Ok(Self {
            vertices,
            triangles,
            neighbours,
            portals,
            tri_portals,
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn portals(&self) -> &[Portal] {
        &self.portals
    }

    /// Portal ids bordering triangle `t`, ascending.
    pub fn triangle_portals(&self, t: usize) -> &[usize] {
        &self.tri_portals[t]
    }

    pub fn neighbour(&self, t: usize, edge: usize) -> Option<usize> {
        self.neighbours[t][edge]
    }

    fn corners(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn contains(&self, t: usize, p: Point) -> bool {
        let c = self.corners(t);
        (0..3).all(|k| {
            let (a, b) = (c[k], c[(k + 1) % 3]);
            cross(a, b, p) >= -EDGE_EPSILON * distance(a, b)
        })
    }

    /// Triangle containing `p` (edges inclusive), lowest index on ties.
    pub fn locate_polygon(&self, p: Point) -> Option<usize> {
        (0..self.triangles.len()).find(|&t| self.contains(t, p))
    }

    fn closest_in_triangle(&self, t: usize, p: Point) -> Point {
        if self.contains(t, p) {
            return p;
        }
        let c = self.corners(t);
        (0..3)
            .map(|k| closest_on_segment(p, c[k], c[(k + 1) % 3]))
            .min_by(|a, b| distance(*a, p).total_cmp(&distance(*b, p)))
            .expect("three edges")
    }

    /// Nearest point on the mesh and its triangle.
    pub fn nearest(&self, p: Point) -> (usize, Point) {
        if let Some(t) = self.locate_polygon(p) {
            return (t, p);
        }
        let mut best = (0, self.closest_in_triangle(0, p));
        for t in 1..self.triangles.len() {
            let q = self.closest_in_triangle(t, p);
            if distance(q, p) < distance(best.1, p) {
                best = (t, q);
            }
        }
        best
    }

    /// Projects a point that left the mesh back onto its boundary.
    pub fn constrain(&self, p: Point) -> Point {
        self.nearest(p).1
    }

    fn snap(&self, p: Point, which: &'static str) -> Result<(usize, Point), NavError> {
        let (t, q) = self.nearest(p);
        if distance(p, q) > SNAP_TOLERANCE {
            return Err(NavError::OffMesh { which, x: p[0], z: p[1] });
        }
        Ok((t, q))
    }

    /// Shortest route over the portal-midpoint graph (A*, straight-line heuristic).
    pub fn plan_route(&self, start: Point, goal: Point) -> Result<Route, NavError> {
        let (st, start) = self.snap(start, "start")?;
        let (gt, goal) = self.snap(goal, "goal")?;
        let graph = MidpointGraph::new(self, st, start, gt, goal);
        let found = graph.astar().ok_or(NavError::NoRoute)?;
        Ok(graph.route(found))
    }

    /// Shortest path from `start` to `goal`, string-pulled through the route's corridor.
    pub fn find_path(&self, start: Point, goal: Point) -> Result<Path, NavError> {
        let route = self.plan_route(start, goal)?;
        let (s, g) = (route.points[0], *route.points.last().expect("route has endpoints"));
        if s == g {
            return Ok(Path::new(vec![s]));
        }
        Ok(Path::new(self.string_pull(s, g, &route.corridor)))
    }

    /// Left/right portal endpoints (as seen when travelling from `from` into `to`).
    pub fn portal_between(&self, from: usize, to: usize) -> Option<(Point, Point)> {
        let k = (0..3).find(|&k| self.neighbours[from][k] == Some(to))?;
        let t = self.triangles[from];
        Some((self.vertices[t[(k + 1) % 3]], self.vertices[t[k]]))
    }

    /// Funnel (string-pulling) through a triangle corridor.
    pub fn string_pull(&self, start: Point, goal: Point, corridor: &[usize]) -> Vec<Point> {
        let mut portals = Vec::with_capacity(corridor.len() + 1);
        portals.push((start, start));
        for w in corridor.windows(2) {
            if let Some(p) = self.portal_between(w[0], w[1]) {
                portals.push(p);
            }
        }
        portals.push((goal, goal));
        funnel(&portals)
    }
}

/// Simple stupid funnel over (left, right) portals; first and last are the endpoints.
fn funnel(portals: &[(Point, Point)]) -> Vec<Point> {
    // positive when c lies right of a→b
    let area = |a: Point, b: Point, c: Point| -cross(a, b, c);
    let mut path = vec![portals[0].0];
    let (mut apex, mut left, mut right) = (portals[0].0, portals[0].0, portals[0].1);
    let (mut left_i, mut right_i) = (0, 0);
    let mut i = 1;
    while i < portals.len() {
        let (l, r) = portals[i];
        if area(apex, right, r) <= 0.0 {
            if apex == right || area(apex, left, r) > 0.0 {
                right = r;
                right_i = i;
            } else {
                apex = left;
                let apex_i = left_i;
                path.push(apex);
                right = apex;
                right_i = apex_i;
                i = apex_i + 1;
                continue;
            }
        }
        if area(apex, left, l) >= 0.0 {
            if apex == left || area(apex, right, l) < 0.0 {
                left = l;
                left_i = i;
            } else {
                apex = right;
                let apex_i = right_i;
                path.push(apex);
                left = apex;
                left_i = apex_i;
                i = apex_i + 1;
                continue;
            }
        }
        i += 1;
    }
    path.push(portals[portals.len() - 1].0);
    path.dedup();
    path
}

/// Node path through the midpoint graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    /// Graph node ids: 0 = start, 1 = goal, 2 + k = portal k.
    pub nodes: Vec<usize>,
    pub points: Vec<Point>,
    /// Sum of edge weights along `nodes`.
    pub cost: f64,
    /// Triangles traversed, in order.
    pub corridor: Vec<usize>,
}

struct MidpointGraph<'a> {
    mesh: &'a NavMesh,
    start_tri: usize,
    goal_tri: usize,
    points: Vec<Point>,
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    g: f64,
    node: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, o: &Self) -> Ordering {
        // min-heap on f, then on node index
        o.f.total_cmp(&self.f).then_with(|| o.node.cmp(&self.node))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

const START: usize = 0;
const GOAL: usize = 1;

impl<'a> MidpointGraph<'a> {
    fn new(mesh: &'a NavMesh, start_tri: usize, start: Point, goal_tri: usize, goal: Point) -> Self {
        let mut points = vec![start, goal];
        points.extend(mesh.portals.iter().map(|p| p.midpoint));
        Self {
            mesh,
            start_tri,
            goal_tri,
            points,
        }
    }

    /// Outgoing (neighbour, triangle) pairs in ascending neighbour order.
    fn edges(&self, node: usize, out: &mut Vec<(usize, usize)>) {
        out.clear();
        let within = |t: usize, from_portal: Option<usize>, out: &mut Vec<(usize, usize)>| {
            if t == self.goal_tri && node != GOAL {
                out.push((GOAL, t));
            }
            for &p in self.mesh.triangle_portals(t) {
                if Some(p) != from_portal {
                    out.push((p + 2, t));
                }
            }
        };
        match node {
            START => within(self.start_tri, None, out),
            GOAL => {}
            n => {
                let portal = n - 2;
                for t in self.mesh.portals[portal].triangles {
                    within(t, Some(portal), out);
                }
            }
        }
        out.sort_unstable();
        out.dedup_by_key(|e| e.0);
    }

    fn astar(&self) -> Option<Vec<(usize, usize)>> {
        let n = self.points.len();
        let goal = self.points[GOAL];
        let h = |v: usize| distance(self.points[v], goal);
        let mut g = vec![f64::INFINITY; n];
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        let mut buf = Vec::new();
        g[START] = 0.0;
        heap.push(Open { f: h(START), g: 0.0, node: START });
        while let Some(Open { g: gu, node: u, .. }) = heap.pop() {
            if gu > g[u] {
                continue;
            }
            if u == GOAL {
                let mut path = Vec::new();
                let mut cur = GOAL;
                while let Some((prev, tri)) = parent[cur] {
                    path.push((cur, tri));
                    cur = prev;
                }
                path.push((START, self.start_tri));
                path.reverse();
                return Some(path);
            }
            self.edges(u, &mut buf);
            for &(v, tri) in &buf {
                let cand = gu + distance(self.points[u], self.points[v]);
                if cand < g[v] {
                    g[v] = cand;
                    parent[v] = Some((u, tri));
                    heap.push(Open { f: cand + h(v), g: cand, node: v });
                }
            }
        }
        None
    }

    /// `steps[i] = (node, triangle of the edge that reached it)`.
    fn route(&self, steps: Vec<(usize, usize)>) -> Route {
        let nodes: Vec<usize> = steps.iter().map(|s| s.0).collect();
        let points: Vec<Point> = nodes.iter().map(|&v| self.points[v]).collect();
        let cost = points.windows(2).fold(0.0, |acc, w| acc + distance(w[0], w[1]));
        let mut corridor: Vec<usize> = steps.iter().map(|s| s.1).collect();
        corridor.dedup();
        if corridor.last() != Some(&self.goal_tri) {
            corridor.push(self.goal_tri);
        }
        Route {
            nodes,
            points,
            cost,
            corridor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub waypoints: Vec<Point>,
    pub length: f64,
}

impl Path {
    pub fn new(waypoints: Vec<Point>) -> Self {
        assert!(!waypoints.is_empty(), "a path has at least one waypoint");
        let length = waypoints.windows(2).map(|w| distance(w[0], w[1])).sum();
        Self { waypoints, length }
    }

    pub fn goal(&self) -> Point {
        self.waypoints[self.waypoints.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Steering {
    pub command: LocomotionCommand,
    /// Index of the waypoint being steered toward.
    pub cursor: usize,
    pub arrived: bool,
}

/// Steers toward the first waypoint at or after `cursor` that is farther than
/// `arrival_radius`; inside the radius of the final waypoint the command is zero.
pub fn follow_path(path: &Path, cursor: usize, position: Point, arrival_radius: f64, cruise_speed: f64) -> Steering {
    let last = path.waypoints.len() - 1;
    if distance(position, path.goal()) <= arrival_radius {
        return Steering {
            command: LocomotionCommand::STOP,
            cursor: last,
            arrived: true,
        };
    }
    let mut cursor = cursor.min(last);
    while cursor < last && distance(position, path.waypoints[cursor]) <= arrival_radius {
        cursor += 1;
    }
    let target = path.waypoints[cursor];
    let d = distance(position, target);
    let k = cruise_speed / d;
    Steering {
        command: LocomotionCommand {
            velocity: [(target[0] - position[0]) * k, (target[1] - position[1]) * k],
            facing: None,
        },
        cursor,
        arrived: false,
    }
}
