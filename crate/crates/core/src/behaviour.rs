//! Behaviour trees over a per-avatar blackboard.
//!
//! Composites keep memory: a `Running` child is resumed on the next tick and the
//! siblings that already succeeded are not re-evaluated. Blackboard writes take
//! effect immediately, so later conditions in the same tick observe them.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::navigation::{distance, Point};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Bool(bool),
    Number(f64),
    Point(Point),
    Text(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Number(n) => write!(f, "{n}"),
            Value::Point([x, z]) => write!(f, "({x}, {z})"),
            Value::Text(s) => write!(f, "{s:?}"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BlackboardError {
    #[error("blackboard key {0:?} is absent")]
    Missing(String),
}

/// Key/value store. Reads fall back to an optional read-only shared section.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Blackboard {
    entries: BTreeMap<String, Value>,
    shared: Option<Arc<BTreeMap<String, Value>>>,
}

impl Blackboard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: BTreeMap<String, Value>) -> Self {
        Self { entries, shared: None }
    }

    pub fn set_shared(&mut self, shared: Arc<BTreeMap<String, Value>>) {
        self.shared = Some(shared);
    }

    pub fn get(&self, key: &str) -> Result<&Value, BlackboardError> {
        self.entries
            .get(key)
            .or_else(|| self.shared.as_ref().and_then(|s| s.get(key)))
            .ok_or_else(|| BlackboardError::Missing(key.to_string()))
    }

    pub fn set(&mut self, key: impl Into<String>, value: Value) {
        self.entries.insert(key.into(), value);
    }

    pub fn remove(&mut self, key: &str) -> Option<Value> {
        self.entries.remove(key)
    }

    pub fn entries(&self) -> &BTreeMap<String, Value> {
        &self.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Comparator {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Eq => "==",
            Comparator::Ne => "!=",
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        Some(match s {
            "==" => Comparator::Eq,
            "!=" => Comparator::Ne,
            "<" => Comparator::Lt,
            "<=" => Comparator::Le,
            ">" => Comparator::Gt,
            ">=" => Comparator::Ge,
            _ => return None,
        })
    }

    /// `None` when the comparator does not apply to these operand types.
    pub fn apply(self, lhs: &Value, rhs: &Value) -> Option<bool> {
        match (lhs, rhs) {
            (Value::Number(a), Value::Number(b)) => Some(match self {
                Comparator::Eq => a == b,
                Comparator::Ne => a != b,
                Comparator::Lt => a < b,
                Comparator::Le => a <= b,
                Comparator::Gt => a > b,
                Comparator::Ge => a >= b,
            }),
            (Value::Bool(_), Value::Bool(_))
            | (Value::Point(_), Value::Point(_))
            | (Value::Text(_), Value::Text(_)) => match self {
                Comparator::Eq => Some(lhs == rhs),
                Comparator::Ne => Some(lhs != rhs),
                _ => None,
            },
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Key(String),
    Point(Point),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    MoveTo(Target),
    PlayClip(String),
    SetKey(String, Value),
    Wait(f64),
    /// An action kind this engine does not implement; flagged by validation, fails when ticked.
    Unknown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepeatCount {
    Times(u32),
    Forever,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BtNode {
    Sequence(Vec<BtNode>),
    Selector(Vec<BtNode>),
    Condition {
        key: String,
        comparator: Comparator,
        operand: Value,
    },
    Action(Action),
    Inverter(Box<BtNode>),
    Repeat {
        child: Box<BtNode>,
        count: RepeatCount,
    },
}

impl BtNode {
    pub fn children(&self) -> &[BtNode] {
        match self {
            BtNode::Sequence(c) | BtNode::Selector(c) => c,
            BtNode::Inverter(c) | BtNode::Repeat { child: c, .. } => std::slice::from_ref(c.as_ref()),
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TickStatus {
    Success,
    Failure,
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BtViolation {
    EmptyComposite { node: usize },
    UnknownAction { node: usize, kind: String },
    RepeatZero { node: usize },
    NegativeWait { node: usize },
}

impl fmt::Display for BtViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BtViolation::EmptyComposite { node } => write!(f, "node {node}: composite has no children"),
            BtViolation::UnknownAction { node, kind } => write!(f, "node {node}: unknown action kind {kind:?}"),
            BtViolation::RepeatZero { node } => write!(f, "node {node}: repeat count is 0"),
            BtViolation::NegativeWait { node } => write!(f, "node {node}: wait time must be non-negative"),
        }
    }
}

/// Lists every structural problem; node ids are preorder indices.
pub fn validate_bt(tree: &BtNode) -> Vec<BtViolation> {
    fn walk(n: &BtNode, id: &mut usize, out: &mut Vec<BtViolation>) {
        let me = *id;
        *id += 1;
        match n {
            BtNode::Sequence(c) | BtNode::Selector(c) if c.is_empty() => {
                out.push(BtViolation::EmptyComposite { node: me })
            }
            BtNode::Repeat {
                count: RepeatCount::Times(0),
                ..
            } => out.push(BtViolation::RepeatZero { node: me }),
            BtNode::Action(Action::Unknown(kind)) => out.push(BtViolation::UnknownAction {
                node: me,
                kind: kind.clone(),
            }),
            BtNode::Action(Action::Wait(s)) if !(*s >= 0.0) => out.push(BtViolation::NegativeWait { node: me }),
            _ => {}
        }
        for c in n.children() {
            walk(c, id, out);
        }
    }
    let mut out = Vec::new();
    walk(tree, &mut 0, &mut out);
    out
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid behaviour tree: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct InvalidTree(pub Vec<BtViolation>);

/// A validated tree with preorder bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviourTree {
    root: BtNode,
    /// Subtree size per preorder id.
    sizes: Vec<usize>,
}

impl BehaviourTree {
    pub fn new(root: BtNode) -> Result<Self, InvalidTree> {
        let v = validate_bt(&root);
        if !v.is_empty() {
            return Err(InvalidTree(v));
        }
        fn size(n: &BtNode, sizes: &mut Vec<usize>) -> usize {
            let me = sizes.len();
            sizes.push(0);
            let s = 1 + n.children().iter().map(|c| size(c, sizes)).sum::<usize>();
            sizes[me] = s;
            s
        }
        let mut sizes = Vec::new();
        size(&root, &mut sizes);
        Ok(Self { root, sizes })
    }

    pub fn root(&self) -> &BtNode {
        &self.root
    }

    pub fn node_count(&self) -> usize {
        self.sizes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
enum Slot {
    #[default]
    Fresh,
    Child(usize),
    Elapsed(f64),
    Count(u32),
    Goal(Point),
}

/// Running-state memory for one tree instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BtMemory {
    slots: Vec<Slot>,
}

impl BtMemory {
    pub fn new(tree: &BehaviourTree) -> Self {
        Self {
            slots: vec![Slot::Fresh; tree.node_count()],
        }
    }

    pub fn reset(&mut self) {
        self.slots.fill(Slot::Fresh);
    }
}

/// Commands a tree hands to the lower layers.
#[derive(Debug, Clone, PartialEq)]
pub enum BtCommand {
    MoveTo(Point),
    PlayClip(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvatarContext {
    pub position: Point,
    pub arrival_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub status: TickStatus,
    pub commands: Vec<BtCommand>,
    pub diagnostics: Vec<String>,
    /// (preorder id, status) in the order nodes finished this tick.
    pub trace: Vec<(usize, TickStatus)>,
}

struct Ticker<'a> {
    tree: &'a BehaviourTree,
    memory: &'a mut BtMemory,
    bb: &'a mut Blackboard,
    dt: f64,
    ctx: AvatarContext,
    out: TickOutput,
    goal_held: bool,
}

impl Ticker<'_> {
    fn tick(&mut self, node: &BtNode, id: usize) -> TickStatus {
        let status = match node {
            BtNode::Sequence(children) => self.composite(children, id, TickStatus::Failure),
            BtNode::Selector(children) => self.composite(children, id, TickStatus::Success),
            BtNode::Condition {
                key,
                comparator,
                operand,
            } => self.condition(id, key, *comparator, operand),
            BtNode::Action(a) => self.action(a, id),
            BtNode::Inverter(child) => match self.tick(child, id + 1) {
                TickStatus::Success => TickStatus::Failure,
                TickStatus::Failure => TickStatus::Success,
                TickStatus::Running => TickStatus::Running,
            },
            BtNode::Repeat { child, count } => {
                let done = match self.memory.slots[id] {
                    Slot::Count(c) => c,
                    _ => 0,
                };
                match self.tick(child, id + 1) {
                    TickStatus::Success => {
                        let done = done + 1;
                        if matches!(count, RepeatCount::Times(n) if done >= *n) {
                            self.memory.slots[id] = Slot::Fresh;
                            TickStatus::Success
                        } else {
                            self.memory.slots[id] = Slot::Count(done);
                            TickStatus::Running
                        }
                    }
                    TickStatus::Failure => {
                        self.memory.slots[id] = Slot::Fresh;
                        TickStatus::Failure
                    }
                    TickStatus::Running => TickStatus::Running,
                }
            }
        };
        self.out.trace.push((id, status));
        status
    }

    /// Sequence when `stop_on` is Failure, Selector when it is Success.
    fn composite(&mut self, children: &[BtNode], id: usize, stop_on: TickStatus) -> TickStatus {
        let resume = match self.memory.slots[id] {
            Slot::Child(i) => i,
            _ => 0,
        };
        let mut child_id = id + 1;
        for c in &children[..resume] {
            child_id += self.tree.sizes[child_id];
            let _ = c;
        }
        for (i, child) in children.iter().enumerate().skip(resume) {
            match self.tick(child, child_id) {
                TickStatus::Running => {
                    self.memory.slots[id] = Slot::Child(i);
                    return TickStatus::Running;
                }
                s if s == stop_on => {
                    self.memory.slots[id] = Slot::Fresh;
                    return s;
                }
                _ => {}
            }
            child_id += self.tree.sizes[child_id];
        }
        self.memory.slots[id] = Slot::Fresh;
        match stop_on {
            TickStatus::Failure => TickStatus::Success,
            _ => TickStatus::Failure,
        }
    }

    fn condition(&mut self, id: usize, key: &str, cmp: Comparator, operand: &Value) -> TickStatus {
        let value = match self.bb.get(key) {
            Ok(v) => v,
            Err(e) => {
                self.out.diagnostics.push(format!("node {id}: {e}"));
                return TickStatus::Failure;
            }
        };
        match cmp.apply(value, operand) {
            Some(true) => TickStatus::Success,
            Some(false) => TickStatus::Failure,
            None => {
                self.out.diagnostics.push(format!(
                    "node {id}: cannot compare {value} {} {operand}",
                    cmp.symbol()
                ));
                TickStatus::Failure
            }
        }
    }

    fn action(&mut self, action: &Action, id: usize) -> TickStatus {
        match action {
            Action::SetKey(k, v) => {
                self.bb.set(k.clone(), v.clone());
                TickStatus::Success
            }
            Action::PlayClip(name) => {
                self.out.commands.push(BtCommand::PlayClip(name.clone()));
                TickStatus::Success
            }
            Action::Wait(seconds) => {
                let elapsed = match self.memory.slots[id] {
                    Slot::Elapsed(e) => e,
                    _ => 0.0,
                } + self.dt;
                if elapsed >= *seconds {
                    self.memory.slots[id] = Slot::Fresh;
                    TickStatus::Success
                } else {
                    self.memory.slots[id] = Slot::Elapsed(elapsed);
                    TickStatus::Running
                }
            }
            Action::MoveTo(target) => {
                let goal = match self.memory.slots[id] {
                    Slot::Goal(g) => g,
                    _ => match target {
                        Target::Point(p) => *p,
                        Target::Key(k) => match self.bb.get(k) {
                            Ok(Value::Point(p)) => *p,
                            Ok(other) => {
                                self.out.diagnostics.push(format!("node {id}: key {k:?} holds {other}, not a point"));
                                return TickStatus::Failure;
                            }
                            Err(e) => {
                                self.out.diagnostics.push(format!("node {id}: {e}"));
                                return TickStatus::Failure;
                            }
                        },
                    },
                };
                if distance(self.ctx.position, goal) <= self.ctx.arrival_radius {
                    self.memory.slots[id] = Slot::Fresh;
                    return TickStatus::Success;
                }
                self.memory.slots[id] = Slot::Goal(goal);
                // the first running MoveTo of a tick holds the navigation goal
                if !self.goal_held {
                    self.goal_held = true;
                    self.out.commands.push(BtCommand::MoveTo(goal));
                }
                TickStatus::Running
            }
            Action::Unknown(kind) => {
                self.out.diagnostics.push(format!("node {id}: unknown action {kind:?}"));
                TickStatus::Failure
            }
        }
    }
}

/// Ticks the tree once, depth first, updating `memory` and `bb` in place.
pub fn tick_bt(
    tree: &BehaviourTree,
    memory: &mut BtMemory,
    bb: &mut Blackboard,
    dt: f64,
    ctx: AvatarContext,
) -> TickOutput {
    let mut t = Ticker {
        tree,
        memory,
        bb,
        dt,
        ctx,
        out: TickOutput {
            status: TickStatus::Failure,
            commands: Vec::new(),
            diagnostics: Vec::new(),
            trace: Vec::new(),
        },
        goal_held: false,
    };
    t.out.status = t.tick(&tree.root, 0);
    t.out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> AvatarContext {
        AvatarContext {
            position: [0.0, 0.0],
            arrival_radius: 0.2,
        }
    }

    fn set(k: &str, v: f64) -> BtNode {
        BtNode::Action(Action::SetKey(k.into(), Value::Number(v)))
    }

    fn cond(k: &str, c: Comparator, v: f64) -> BtNode {
        BtNode::Condition {
            key: k.into(),
            comparator: c,
            operand: Value::Number(v),
        }
    }

    fn run(tree: &BehaviourTree, bb: &mut Blackboard, mem: &mut BtMemory) -> TickOutput {
        tick_bt(tree, mem, bb, 0.5, ctx())
    }

    #[test]
    fn sequence_sets_key() {
        let t = BehaviourTree::new(BtNode::Sequence(vec![set("a", 1.0)])).unwrap();
        let mut bb = Blackboard::new();
        let out = run(&t, &mut bb, &mut BtMemory::new(&t));
        assert_eq!(out.status, TickStatus::Success);
        assert_eq!(bb.get("a"), Ok(&Value::Number(1.0)));
    }

    #[test]
    fn selector_falls_through() {
        let t = BehaviourTree::new(BtNode::Selector(vec![cond("a", Comparator::Gt, 5.0), set("b", 1.0)])).unwrap();
        let mut bb = Blackboard::new();
        bb.set("a", Value::Number(3.0));
        let out = run(&t, &mut bb, &mut BtMemory::new(&t));
        assert_eq!(out.status, TickStatus::Success);
        assert_eq!(bb.get("b"), Ok(&Value::Number(1.0)));
        assert_eq!(out.trace, vec![(1, TickStatus::Failure), (2, TickStatus::Success), (0, TickStatus::Success)]);
    }

    #[test]
    fn absent_key_fails_with_diagnostic() {
        let t = BehaviourTree::new(cond("nope", Comparator::Eq, 1.0)).unwrap();
        let mut bb = Blackboard::new();
        let out = run(&t, &mut bb, &mut BtMemory::new(&t));
        assert_eq!(out.status, TickStatus::Failure);
        assert_eq!(out.diagnostics.len(), 1);
    }

    #[test]
    fn running_child_resumes_without_reticking_earlier_siblings() {
        let t = BehaviourTree::new(BtNode::Sequence(vec![
            set("a", 1.0),
            BtNode::Action(Action::Wait(1.0)),
            set("b", 2.0),
        ]))
        .unwrap();
        let mut bb = Blackboard::new();
        let mut mem = BtMemory::new(&t);
        let first = run(&t, &mut bb, &mut mem);
        assert_eq!(first.status, TickStatus::Running);
        assert_eq!(first.trace, vec![(1, TickStatus::Success), (2, TickStatus::Running), (0, TickStatus::Running)]);
        let second = run(&t, &mut bb, &mut mem);
        assert_eq!(second.status, TickStatus::Success);
        // node 1 is not visited again
        assert_eq!(second.trace, vec![(2, TickStatus::Success), (3, TickStatus::Success), (0, TickStatus::Success)]);
    }

    #[test]
    fn move_to_runs_until_arrival() {
        let t = BehaviourTree::new(BtNode::Action(Action::MoveTo(Target::Key("spot".into())))).unwrap();
        let mut bb = Blackboard::new();
        bb.set("spot", Value::Point([3.0, 0.0]));
        let mut mem = BtMemory::new(&t);
        let out = run(&t, &mut bb, &mut mem);
        assert_eq!(out.status, TickStatus::Running);
        assert_eq!(out.commands, vec![BtCommand::MoveTo([3.0, 0.0])]);
        let there = AvatarContext {
            position: [2.9, 0.0],
            arrival_radius: 0.2,
        };
        let out = tick_bt(&t, &mut mem, &mut bb, 0.5, there);
        assert_eq!(out.status, TickStatus::Success);
        assert!(out.commands.is_empty());
    }

    #[test]
    fn repeat_counts_successes() {
        let t = BehaviourTree::new(BtNode::Repeat {
            child: Box::new(set("a", 1.0)),
            count: RepeatCount::Times(3),
        })
        .unwrap();
        let mut bb = Blackboard::new();
        let mut mem = BtMemory::new(&t);
        let statuses: Vec<_> = (0..4).map(|_| run(&t, &mut bb, &mut mem).status).collect();
        assert_eq!(
            statuses,
            vec![TickStatus::Running, TickStatus::Running, TickStatus::Success, TickStatus::Running]
        );
    }

    #[test]
    fn validation() {
        assert!(validate_bt(&BtNode::Action(Action::PlayClip("bow".into()))).is_empty());
        assert_eq!(validate_bt(&BtNode::Sequence(vec![])), vec![BtViolation::EmptyComposite { node: 0 }]);
        assert_eq!(
            validate_bt(&BtNode::Repeat {
                child: Box::new(set("a", 1.0)),
                count: RepeatCount::Times(0)
            }),
            vec![BtViolation::RepeatZero { node: 0 }]
        );
        assert_eq!(
            validate_bt(&BtNode::Selector(vec![BtNode::Action(Action::Unknown("dance".into()))])),
            vec![BtViolation::UnknownAction { node: 1, kind: "dance".into() }]
        );
    }

    #[test]
    fn shared_section_is_read_only_fallback() {
        let mut bb = Blackboard::new();
        let shared: BTreeMap<_, _> = [("time".to_string(), Value::Number(4.0))].into_iter().collect();
        bb.set_shared(Arc::new(shared));
        assert_eq!(bb.get("time"), Ok(&Value::Number(4.0)));
        bb.set("time", Value::Number(1.0));
        assert_eq!(bb.get("time"), Ok(&Value::Number(1.0)));
    }
}
