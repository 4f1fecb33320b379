use std::fmt::Write as _;
use std::str::FromStr;

use super::{NodeKind, ReasoningTree, Relation, TreeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TreeFormat {
    Json,
    Dot,
}

impl TreeFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            TreeFormat::Json => "application/json",
            TreeFormat::Dot => "text/vnd.graphviz",
        }
    }
}

impl FromStr for TreeFormat {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(TreeFormat::Json),
            "dot" => Ok(TreeFormat::Dot),
            other => Err(TreeError::UnknownFormat(other.to_string())),
        }
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => {}
            c => out.push(c),
        }
    }
    out
}

fn shape(kind: NodeKind) -> &'static str {
    match kind {
        NodeKind::Premise => "note",
        NodeKind::Inference => "box",
        NodeKind::Action => "cds",
        NodeKind::Verdict => "diamond",
    }
}

fn to_dot(tree: &ReasoningTree) -> String {
    let mut t = tree.clone();
    t.normalize();
    let mut out = String::from("digraph reasoning {\n");
    for n in &t.nodes {
        let mut attrs = format!(
            "label=\"{}\\n[{}] {}\", shape={}",
            escape(&n.id),
            n.turn_index,
            escape(&n.text),
            shape(n.kind)
        );
        let kinds: Vec<&str> = t
            .flags
            .iter()
            .filter(|f| f.node_id == n.id)
            .map(|f| match f.kind {
                super::FlagKind::UnsupportedStep => "unsupported_step",
                super::FlagKind::ContradictsFeedback => "contradicts_feedback",
                super::FlagKind::StaleDependency => "stale_dependency",
                super::FlagKind::DanglingReference => "dangling_reference",
            })
            .collect();
        if !kinds.is_empty() {
            let _ = write!(attrs, ", color=red, style=bold, tooltip=\"{}\"", kinds.join(", "));
        }
        let _ = writeln!(out, "  \"{}\" [{attrs}];", escape(&n.id));
    }
    for e in &t.edges {
        let style = match e.relation {
            Relation::Uses => "",
            Relation::Contradicts => ", style=dashed, color=red",
            Relation::Revises => ", style=dotted",
        };
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\" [label=\"{}\"{style}];",
            escape(&e.from),
            escape(&e.to),
            e.relation.as_str()
        );
    }
    out.push_str("}\n");
    out
}

pub fn export_tree(tree: &ReasoningTree, format: TreeFormat) -> String {
    match format {
        TreeFormat::Json => {
            let mut t = tree.clone();
            t.normalize();
            serde_json::to_string_pretty(&t).expect("tree serializes")
        }
        TreeFormat::Dot => to_dot(tree),
    }
}

pub fn import_tree_json(text: &str) -> Result<ReasoningTree, TreeError> {
    serde_json::from_str(text).map_err(|e| TreeError::InvalidDocument(e.to_string()))
}
