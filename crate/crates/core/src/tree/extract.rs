//! Annotation parser.
//!
//! Assistant messages may carry step lines of the form
//!
//! ```text
//! S<k>: <text> [uses: <ref>, ...] [claim: keep|drop (<d1>,<d2>,...)]
//! ```
//!
//! where a ref is `S<j>` (an earlier step), `V<j>` (the latest recorded
//! verdict of verifier j) or `M<j>` (a non-assistant message j). Each step
//! becomes an inference node; referenced verdicts and messages become
//! verdict and premise nodes. A step id that appears again becomes a new
//! node linked to the old one by a `revises` edge, and later refs resolve to
//! the newest version. Refs that cannot be resolved are reported as
//! `dangling_reference` flags, never as failures.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;

use super::{Claim, ClaimMode, Flag, FlagKind, Generator, NodeKind, ReasoningEdge, ReasoningNode, ReasoningTree, Relation};
use crate::bench::parse_verdict_lines;
use crate::model::{transcript_hash, Message, Role, SessionId};

struct Patterns {
    step: Regex,
    uses: Regex,
    claim: Regex,
    reference: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        step: Regex::new(r"^\s*S(\d+)\s*:\s*(.*)$").expect("valid regex"),
        uses: Regex::new(r"(?i)\[\s*uses\s*:\s*([^\]]*)\]").expect("valid regex"),
        claim: Regex::new(r"(?i)\[?\s*claim\s*:\s*(keep|drop)\s*\(?\s*(\d(?:[\s,]*\d)*)\s*\)?\s*\]?")
            .expect("valid regex"),
        reference: Regex::new(r"^(?i)([SVM])(\d+)$").expect("valid regex"),
    })
}

/// One parsed `S<k>:` line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepLine {
    pub step: u64,
    pub text: String,
    pub refs: Vec<String>,
    pub claim: Option<Claim>,
    /// Character offsets of the line within its message.
    pub span: (usize, usize),
}

pub fn parse_step_lines(content: &str) -> Vec<StepLine> {
    let p = patterns();
    let mut out = Vec::new();
    let mut char_offset = 0usize;
    for line in content.split('\n') {
        let line_chars = line.chars().count();
        if let Some(c) = p.step.captures(line) {
            if let Ok(step) = c[1].parse::<u64>() {
                let mut body = c[2].to_string();
                let refs: Vec<String> = p
                    .uses
                    .captures(&body)
                    .map(|u| {
                        u[1].split(|ch: char| ch == ',' || ch.is_whitespace())
                            .filter(|s| !s.is_empty())
                            .map(str::to_string)
                            .collect()
                    })
                    .unwrap_or_default();
                let claim = p.claim.captures(&body).map(|m| Claim {
                    mode: if m[1].eq_ignore_ascii_case("keep") { ClaimMode::Keep } else { ClaimMode::Drop },
                    code: m[2].chars().filter_map(|ch| ch.to_digit(10)).map(|d| d as u8).collect(),
                });
                body = p.uses.replace_all(&body, "").to_string();
                body = p.claim.replace_all(&body, "").to_string();
                let lead = line.chars().take_while(|ch| ch.is_whitespace()).count();
                let trimmed_len = line.trim_end().chars().count();
                out.push(StepLine {
                    step,
                    text: body.trim().to_string(),
                    refs,
                    claim,
                    span: (char_offset + lead, char_offset + trimmed_len),
                });
            }
        }
        char_offset += line_chars + 1;
    }
    out
}

fn first_line(s: &str, max: usize) -> String {
    let line = s.lines().next().unwrap_or("");
    let mut t: String = line.chars().take(max).collect();
    if line.chars().count() > max {
        t.push('…');
    }
    t
}

struct Builder<'a> {
    messages: &'a [Message],
    nodes: Vec<ReasoningNode>,
    node_ids: BTreeSet<String>,
    edges: BTreeSet<ReasoningEdge>,
    flags: Vec<Flag>,
    /// Latest node id for each step number.
    steps: BTreeMap<u64, String>,
    step_versions: BTreeMap<u64, u32>,
}

impl<'a> Builder<'a> {
    fn add_node(&mut self, node: ReasoningNode) {
        if self.node_ids.insert(node.id.clone()) {
            self.nodes.push(node);
        }
    }

    /// Verdict node for verifier `k` grounded at the latest environment
    /// message before `turn` that records it.
    fn verdict_node(&mut self, k: usize, turn: usize) -> Option<String> {
        let (idx, fb) = self.messages[..turn].iter().enumerate().rev().find_map(|(i, m)| {
            if m.role != Role::Environment {
                return None;
            }
            parse_verdict_lines(&m.content).into_iter().rev().find(|f| f.verifier_index == k).map(|f| (i, f))
        })?;
        let id = format!("V{k}@{idx}");
        let text = format!("VERIFIER {k}: {}", if fb.verdict { "TRUE" } else { "FALSE" });
        let span = find_char_span(&self.messages[idx].content, &text);
        self.add_node(ReasoningNode { id: id.clone(), kind: NodeKind::Verdict, turn_index: idx, text, span, claim: None });
        Some(id)
    }

    fn premise_node(&mut self, j: usize, turn: usize) -> Option<String> {
        if j >= turn {
            return None;
        }
        let m = &self.messages[j];
        if m.role == Role::Assistant {
            return None;
        }
        let id = format!("M{j}");
        self.add_node(ReasoningNode {
            id: id.clone(),
            kind: NodeKind::Premise,
            turn_index: j,
            text: first_line(&m.content, 80),
            span: None,
            claim: None,
        });
        Some(id)
    }

    fn resolve(&mut self, reference: &str, turn: usize) -> Option<String> {
        let c = patterns().reference.captures(reference)?;
        let n: u64 = c[2].parse().ok()?;
        match c[1].to_ascii_uppercase().as_str() {
            "S" => self.steps.get(&n).cloned(),
            "V" => self.verdict_node(n as usize, turn),
            "M" => self.premise_node(n as usize, turn),
            _ => None,
        }
    }
}

/// Case-insensitive search for `needle` in `haystack`, as char offsets.
fn find_char_span(haystack: &str, needle: &str) -> Option<(usize, usize)> {
    let hl = haystack.to_ascii_uppercase();
    let nl = needle.to_ascii_uppercase();
    let byte = hl.find(&nl)?;
    let start = haystack[..byte].chars().count();
    Some((start, start + needle.chars().count()))
}

pub fn extract_tree_deterministic(session_id: &SessionId, messages: &[Message]) -> ReasoningTree {
    let mut b = Builder {
        messages,
        nodes: Vec::new(),
        node_ids: BTreeSet::new(),
        edges: BTreeSet::new(),
        flags: Vec::new(),
        steps: BTreeMap::new(),
        step_versions: BTreeMap::new(),
    };
    for (turn, m) in messages.iter().enumerate() {
        if m.role != Role::Assistant {
            continue;
        }
        for line in parse_step_lines(&m.content) {
            let version = b.step_versions.entry(line.step).or_insert(0);
            *version += 1;
            let id = if *version == 1 { format!("S{}", line.step) } else { format!("S{}#{}", line.step, version) };
            let previous = b.steps.get(&line.step).cloned();

            let mut resolved = Vec::new();
            let mut dangling = Vec::new();
            for r in &line.refs {
                match b.resolve(r, turn) {
                    Some(target) => resolved.push(target),
                    None => dangling.push(r.clone()),
                }
            }
            b.add_node(ReasoningNode {
                id: id.clone(),
                kind: NodeKind::Inference,
                turn_index: turn,
                text: line.text.clone(),
                span: Some(line.span),
                claim: line.claim.clone(),
            });
            for target in resolved {
                b.edges.insert(ReasoningEdge { from: target, to: id.clone(), relation: Relation::Uses });
            }
            if let Some(prev) = previous {
                b.edges.insert(ReasoningEdge { from: prev, to: id.clone(), relation: Relation::Revises });
            }
            for r in dangling {
                b.flags.push(Flag {
                    node_id: id.clone(),
                    kind: FlagKind::DanglingReference,
                    explanation: format!("reference {r} does not resolve to an earlier step, verdict, or message"),
                });
            }
            b.steps.insert(line.step, id);
        }
    }
    let mut tree = ReasoningTree::empty(session_id.clone(), Generator::Deterministic, transcript_hash(messages));
    tree.nodes = b.nodes;
    tree.edges = b.edges.into_iter().collect();
    tree.flags = b.flags;
    tree.normalize();
    tree
}
