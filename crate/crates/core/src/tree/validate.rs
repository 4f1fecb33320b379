use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{NodeKind, ReasoningTree};
use crate::model::{transcript_hash, Message, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    DuplicateNodeId,
    MissingEndpoint,
    Cycle,
    TurnOrder,
    TurnIndexRange,
    SpanRange,
    Grounding,
    StaleTree,
    UnknownFlagNode,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// Node id, `edge#<i>`, or absent for tree-wide violations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    /// One line per violation, the text fed back to the model on repair.
    pub fn render(&self) -> String {
        self.violations
            .iter()
            .map(|v| match &v.subject {
                Some(s) => format!("- {:?} ({s}): {}", v.code, v.message),
                None => format!("- {:?}: {}", v.code, v.message),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

fn grounding_ok(kind: NodeKind, role: Role) -> bool {
    match kind {
        NodeKind::Premise | NodeKind::Verdict => role != Role::Assistant,
        NodeKind::Inference | NodeKind::Action => role == Role::Assistant,
    }
}

/// Structural checks of a tree against the transcript it claims to describe.
pub fn validate_tree(tree: &ReasoningTree, messages: &[Message]) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |code, subject: Option<String>, message: String| violations.push(Violation { code, subject, message });

    let mut by_id: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, n) in tree.nodes.iter().enumerate() {
        if by_id.insert(n.id.as_str(), i).is_some() {
            push(ViolationCode::DuplicateNodeId, Some(n.id.clone()), format!("node id {:?} is used more than once", n.id));
        }
    }

    for n in &tree.nodes {
        let Some(m) = messages.get(n.turn_index) else {
            push(
                ViolationCode::TurnIndexRange,
                Some(n.id.clone()),
                format!("turn_index {} outside transcript of {} messages", n.turn_index, messages.len()),
            );
            continue;
        };
        if let Some((s, e)) = n.span {
            let len = m.content.chars().count();
            if s > e || e > len {
                push(
                    ViolationCode::SpanRange,
                    Some(n.id.clone()),
                    format!("span ({s},{e}) outside message {} of {len} characters", n.turn_index),
                );
            }
        }
        if !grounding_ok(n.kind, m.role) {
            push(
                ViolationCode::Grounding,
                Some(n.id.clone()),
                format!("{} node grounded in a {} message", n.kind.as_str(), m.role.as_str()),
            );
        }
    }

    let mut live_edges = Vec::new();
    for (i, e) in tree.edges.iter().enumerate() {
        let from = by_id.get(e.from.as_str()).map(|&k| &tree.nodes[k]);
        let to = by_id.get(e.to.as_str()).map(|&k| &tree.nodes[k]);
        match (from, to) {
            (Some(f), Some(t)) => {
                if f.turn_index > t.turn_index {
                    push(
                        ViolationCode::TurnOrder,
                        Some(format!("edge#{i}")),
                        format!("edge {} -> {} goes from turn {} back to turn {}", e.from, e.to, f.turn_index, t.turn_index),
                    );
                }
                live_edges.push((e.from.as_str(), e.to.as_str()));
            }
            _ => push(
                ViolationCode::MissingEndpoint,
                Some(format!("edge#{i}")),
                format!("edge {} -> {} references a missing node", e.from, e.to),
            ),
        }
    }

    // Kahn's algorithm over distinct ids; leftovers sit on or behind a cycle.
    let ids: BTreeSet<&str> = by_id.keys().copied().collect();
    let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|&id| (id, 0)).collect();
    let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for &(f, t) in &live_edges {
        *indegree.get_mut(t).expect("endpoint exists") += 1;
        out.entry(f).or_default().push(t);
    }
    let mut queue: VecDeque<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
    let mut visited = 0;
    while let Some(id) = queue.pop_front() {
        visited += 1;
        for &next in out.get(id).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indegree.get_mut(next).expect("endpoint exists");
            *d -= 1;
            if *d == 0 {
                queue.push_back(next);
            }
        }
    }
    if visited < ids.len() {
        push(ViolationCode::Cycle, None, "edge set contains a cycle".into());
    }

    for f in &tree.flags {
        if !by_id.contains_key(f.node_id.as_str()) {
            push(ViolationCode::UnknownFlagNode, Some(f.node_id.clone()), "flag references a missing node".into());
        }
    }

    if tree.source_hash != transcript_hash(messages) {
        push(ViolationCode::StaleTree, None, "tree was generated from a different transcript".into());
    }

    ValidationReport { ok: violations.is_empty(), violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{Generator, ReasoningEdge, ReasoningNode, Relation};

    fn transcript() -> Vec<Message> {
        let roles = [Role::System, Role::User, Role::Assistant, Role::Environment];
        (0..8).map(|i| Message::new(i, roles[(i % 4) as usize], format!("message {i}"))).collect()
    }

    fn node(id: &str, kind: NodeKind, turn: usize) -> ReasoningNode {
        ReasoningNode { id: id.into(), kind, turn_index: turn, text: id.into(), span: None, claim: None }
    }

    fn edge(f: &str, t: &str) -> ReasoningEdge {
        ReasoningEdge { from: f.into(), to: t.into(), relation: Relation::Uses }
    }

    fn tree(nodes: Vec<ReasoningNode>, edges: Vec<ReasoningEdge>) -> ReasoningTree {
        let mut t = ReasoningTree::empty("s".into(), Generator::Llm, transcript_hash(&transcript()));
        t.nodes = nodes;
        t.edges = edges;
        t
    }

    #[test]
    fn empty_tree_is_ok() {
        assert!(validate_tree(&tree(vec![], vec![]), &transcript()).ok);
    }

    #[test]
    fn backwards_edge_violates_turn_order() {
        let t = tree(
            vec![node("a", NodeKind::Premise, 7), node("b", NodeKind::Premise, 3)],
            vec![edge("a", "b")],
        );
        let r = validate_tree(&t, &transcript());
        assert!(!r.ok);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].code, ViolationCode::TurnOrder);
    }

    #[test]
    fn cycle_detected() {
        let t = tree(
            vec![node("a", NodeKind::Inference, 2), node("b", NodeKind::Inference, 2)],
            vec![edge("a", "b"), edge("b", "a")],
        );
        let r = validate_tree(&t, &transcript());
        assert!(r.has(ViolationCode::Cycle));
        assert!(!r.has(ViolationCode::TurnOrder));
    }

    #[test]
    fn range_grounding_and_endpoints() {
        let mut n = node("x", NodeKind::Inference, 3);
        n.span = Some((0, 100));
        let t = tree(
            vec![n, node("far", NodeKind::Premise, 99), node("ok", NodeKind::Inference, 6)],
            vec![edge("ok", "ghost")],
        );
        let r = validate_tree(&t, &transcript());
        let codes: BTreeSet<_> = r.violations.iter().map(|v| v.code).collect();
        assert!(codes.contains(&ViolationCode::Grounding));
        assert!(codes.contains(&ViolationCode::SpanRange));
        assert!(codes.contains(&ViolationCode::TurnIndexRange));
        assert!(codes.contains(&ViolationCode::MissingEndpoint));
    }

    #[test]
    fn stale_source_hash() {
        let t = tree(vec![], vec![]);
        let mut other = transcript();
        other.pop();
        assert!(validate_tree(&t, &other).has(ViolationCode::StaleTree));
    }

    #[test]
    fn duplicates_reported() {
        let t = tree(vec![node("a", NodeKind::Premise, 0), node("a", NodeKind::Premise, 1)], vec![]);
        assert!(validate_tree(&t, &transcript()).has(ViolationCode::DuplicateNodeId));
    }
}
