//! Checks a tree's machine-readable claims against recorded verifier feedback.

use std::collections::BTreeSet;

use serde_json::Value;

use super::{ClaimMode, Flag, FlagKind, NodeKind, ReasoningTree, Relation};
use crate::bench::{feedback_in, join_digits, parse_verdict_lines, Feedback, FeedbackOracle};
use crate::model::{AuditEvent, AuditKind, Message};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConsistencyOutcome {
    pub flags: Vec<Flag>,
    pub warnings: Vec<String>,
}

fn describe(fb: &[Feedback]) -> String {
    fb.iter()
        .map(|f| format!("V{}={}", f.verifier_index, if f.verdict { "TRUE" } else { "FALSE" }))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Old verdicts that in-place edits replaced, keyed by message index.
fn edited_verdicts(audit: &[AuditEvent]) -> Vec<(usize, Feedback)> {
    audit
        .iter()
        .filter(|e| e.kind == AuditKind::InPlaceEdit)
        .filter_map(|e| {
            let index = e.payload.get("index")?.as_u64()? as usize;
            let old = e.payload.get("old_content")?.as_str()?;
            Some(parse_verdict_lines(old).into_iter().map(move |f| (index, f)))
        })
        .flatten()
        .collect()
}

/// Flags for the tree:
///
/// * `unsupported_step`: an inference node with no incoming `uses` edge.
/// * `contradicts_feedback`: a `keep` claim on a code the verdicts recorded
///   before the node's turn already eliminate, or a `drop` claim on a code
///   they still allow.
/// * `stale_dependency`: a node that uses a verdict node whose stated verdict
///   was replaced by an in-place edit of its grounding message.
///
/// Without an oracle the claim check is skipped and a warning is returned.
pub fn check_consistency(
    tree: &ReasoningTree,
    messages: &[Message],
    audit: &[AuditEvent],
    item: &Value,
    oracle: Option<&dyn FeedbackOracle>,
) -> ConsistencyOutcome {
    let mut out = ConsistencyOutcome::default();

    let supported: BTreeSet<&str> = tree
        .edges
        .iter()
        .filter(|e| e.relation == Relation::Uses)
        .map(|e| e.to.as_str())
        .collect();
    for n in tree.nodes.iter().filter(|n| n.kind == NodeKind::Inference) {
        if !supported.contains(n.id.as_str()) {
            out.flags.push(Flag {
                node_id: n.id.clone(),
                kind: FlagKind::UnsupportedStep,
                explanation: "inference has no `uses` dependency".into(),
            });
        }
    }

    let claims: Vec<_> = tree.nodes.iter().filter(|n| n.claim.is_some()).collect();
    match oracle {
        None if !claims.is_empty() => {
            out.warnings.push("oracle unavailable: benchmark exposes no candidate oracle; claims not checked".into())
        }
        None => {}
        Some(oracle) => {
            for n in claims {
                let claim = n.claim.as_ref().expect("filtered");
                let fb = feedback_in(messages, n.turn_index.min(messages.len()));
                let consistent = match oracle.is_consistent(item, &fb, &claim.code) {
                    Ok(c) => c,
                    Err(e) => {
                        out.warnings.push(format!("node {}: claim not checked: {e}", n.id));
                        continue;
                    }
                };
                let code = join_digits(&claim.code, ",");
                let explanation = match (claim.mode, consistent) {
                    (ClaimMode::Keep, false) => {
                        let culprits: Vec<Feedback> = fb
                            .iter()
                            .copied()
                            .filter(|f| matches!(oracle.is_consistent(item, &[*f], &claim.code), Ok(false)))
                            .collect();
                        Some(format!(
                            "keeps ({code}) but recorded feedback eliminates it: {}",
                            describe(if culprits.is_empty() { &fb } else { &culprits })
                        ))
                    }
                    (ClaimMode::Drop, true) => Some(format!(
                        "drops ({code}) but it is consistent with all feedback so far{}",
                        if fb.is_empty() { String::new() } else { format!(" ({})", describe(&fb)) }
                    )),
                    _ => None,
                };
                if let Some(explanation) = explanation {
                    out.flags.push(Flag { node_id: n.id.clone(), kind: FlagKind::ContradictsFeedback, explanation });
                }
            }
        }
    }

    let edited = edited_verdicts(audit);
    if !edited.is_empty() {
        for v in tree.nodes.iter().filter(|n| n.kind == NodeKind::Verdict) {
            let Some(stated) = parse_verdict_lines(&v.text).into_iter().next() else { continue };
            let current = messages
                .get(v.turn_index)
                .map(|m| parse_verdict_lines(&m.content))
                .unwrap_or_default();
            let replaced = edited.iter().any(|(i, old)| *i == v.turn_index && *old == stated);
            if replaced && !current.contains(&stated) {
                for e in tree.edges.iter().filter(|e| e.from == v.id && e.relation == Relation::Uses) {
                    out.flags.push(Flag {
                        node_id: e.to.clone(),
                        kind: FlagKind::StaleDependency,
                        explanation: format!(
                            "depends on {} (VERIFIER {}: {}), which an edit of message {} replaced",
                            v.id,
                            stated.verifier_index,
                            if stated.verdict { "TRUE" } else { "FALSE" },
                            v.turn_index
                        ),
                    });
                }
            }
        }
    }

    out.flags.sort();
    out.flags.dedup();
    out
}
