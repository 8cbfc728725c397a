//! Canonical tree form and text rendering of a configuration.
//!
//! Layout rules: the root sections appear in a fixed order, every other
//! block lists its children sorted by key, indentation is one space per
//! level, line endings are LF and the text ends with exactly one newline.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::model::ConfigDocument;
use super::syntax::{quote, render_word, Literal};
use super::validate::{validate, ValidationReport};
use crate::digest::sha256_hex;
use crate::vocab::is_identifier;

/// Root section order.
pub const SECTION_ORDER: &[&str] = &[
    "schema_version",
    "allow_gaps",
    "system",
    "objectives",
    "controls",
    "tests",
    "infrastructure",
    "access",
    "reporting",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Path segment; unique among siblings.
    pub key: String,
    /// Rendered head, e.g. `seed`, `test t1` or `"custom:x"`.
    pub head: String,
    pub value: TreeValue,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeValue {
    Leaf(Literal),
    Block(Vec<TreeNode>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TreeValueRepr {
    Literal(String),
    Block { block: Vec<TreeNode> },
}

impl Serialize for TreeValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TreeValue::Leaf(l) => TreeValueRepr::Literal(l.render()).serialize(s),
            TreeValue::Block(children) => TreeValueRepr::Block { block: children.clone() }.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for TreeValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match TreeValueRepr::deserialize(d)? {
            TreeValueRepr::Literal(text) => parse_literal(&text).map(TreeValue::Leaf).map_err(serde::de::Error::custom),
            TreeValueRepr::Block { block } => Ok(TreeValue::Block(block)),
        }
    }
}

/// Parses a single rendered literal.
pub fn parse_literal(text: &str) -> Result<Literal, super::ParseError> {
    let block = super::syntax::parse_single(&format!("v {{ v: {text} }}"), "v")?;
    match block.items.as_slice() {
        [super::syntax::Item::Field(f)] => Ok(f.value.clone()),
        _ => Err(super::ParseError::Lex { pos: Default::default(), message: format!("`{text}` is not a single literal") }),
    }
}

/// The whole document as a tree. The root head carries the sandbox name.
#[derive(Debug, Clone, PartialEq)]
pub struct DocTree {
    pub name: String,
    pub sections: Vec<TreeNode>,
}

fn leaf(key: &str, lit: Literal) -> TreeNode {
    TreeNode { key: key.to_string(), head: key.to_string(), value: TreeValue::Leaf(lit) }
}

fn block(key: impl Into<String>, head: impl Into<String>, mut children: Vec<TreeNode>) -> TreeNode {
    children.sort_by(|a, b| a.key.cmp(&b.key));
    TreeNode { key: key.into(), head: head.into(), value: TreeValue::Block(children) }
}

fn s(v: &str) -> Literal {
    Literal::Str(v.to_string())
}

fn ident(v: impl ToString) -> Literal {
    Literal::Ident(v.to_string())
}

fn int(v: u64) -> Literal {
    Literal::Int(v as i64)
}

/// Identifier-shaped references render bare; anything else is quoted.
fn word_literal(v: &str) -> Literal {
    if is_identifier(v) && v != "true" && v != "false" {
        ident(v)
    } else {
        s(v)
    }
}

pub fn to_tree(doc: &ConfigDocument) -> DocTree {
    let sys = &doc.system;
    let system = block(
        "system",
        "system",
        vec![
            leaf("system_name", s(&sys.system_name)),
            leaf("risk_class", ident(sys.risk_class)),
            leaf("domain_tag", s(&sys.domain_tag)),
            leaf("dimensions", Literal::List(sys.dimensions.iter().map(ident).collect())),
        ],
    );

    let objectives = block(
        "objectives",
        "objectives",
        doc.objectives
            .iter()
            .map(|o| {
                let mut children = vec![leaf("priority", ident(o.priority))];
                if !o.parameters.is_empty() {
                    children.push(block(
                        "parameters",
                        "parameters",
                        o.parameters.iter().map(|(k, v)| leaf(k, v.clone())).collect(),
                    ));
                }
                block(o.objective_id.clone(), render_word(&o.objective_id), children)
            })
            .collect(),
    );

    let controls = block(
        "controls",
        "controls",
        doc.controls
            .iter()
            .map(|c| {
                let mut children = vec![
                    leaf("activity", s(&c.activity)),
                    leaf("status", ident(c.status)),
                    leaf("dimension", ident(c.dimension)),
                ];
                if let Some(t) = &c.control_type {
                    children.push(leaf("control_type", s(t)));
                }
                if let Some(g) = &c.guideline {
                    children.push(block(
                        "guideline",
                        "guideline",
                        vec![leaf("source", s(&g.source)), leaf("clause", s(&g.clause))],
                    ));
                }
                block(c.control_id.clone(), format!("control {}", c.control_id), children)
            })
            .collect(),
    );

    let tests = block(
        "tests",
        "tests",
        doc.tests
            .iter()
            .map(|t| {
                let mut children = vec![
                    leaf("objective", word_literal(&t.objective)),
                    leaf("method", s(&t.method)),
                    leaf("dimension", ident(t.dimension)),
                    leaf("seed", int(t.seed)),
                ];
                if !t.inputs.is_empty() {
                    children.push(block("inputs", "inputs", t.inputs.iter().map(|(k, v)| leaf(k, s(v))).collect()));
                }
                if let Some(b) = t.budget {
                    children.push(block(
                        "budget",
                        "budget",
                        vec![leaf("cpu_seconds", int(b.cpu_seconds)), leaf("storage_bytes", int(b.storage_bytes))],
                    ));
                }
                if let Some(e) = &t.executor {
                    children.push(leaf("executor", s(e)));
                }
                block(t.test_id.clone(), format!("test {}", t.test_id), children)
            })
            .collect(),
    );

    let infra = &doc.infrastructure;
    let infrastructure = block(
        "infrastructure",
        "infrastructure",
        vec![
            leaf("executors", Literal::List(infra.executors.iter().map(|e| s(e)).collect())),
            leaf("max_cpu_seconds", int(infra.max_cpu_seconds)),
            leaf("max_storage_bytes", int(infra.max_storage_bytes)),
        ],
    );

    let access = block(
        "access",
        "access",
        doc.access
            .iter()
            .map(|a| {
                block(
                    a.role.as_str(),
                    format!("role {}", a.role),
                    vec![leaf("zones", Literal::List(a.zones.iter().map(ident).collect()))],
                )
            })
            .collect(),
    );

    let reporting = block(
        "reporting",
        "reporting",
        vec![leaf("formats", Literal::List(doc.reporting.formats.iter().map(ident).collect()))],
    );

    DocTree {
        name: doc.name.clone(),
        sections: vec![
            leaf("schema_version", s(&doc.schema_version)),
            leaf("allow_gaps", Literal::Bool(doc.allow_gaps)),
            system,
            objectives,
            controls,
            tests,
            infrastructure,
            access,
            reporting,
        ],
    }
}

fn indent(out: &mut String, depth: usize) {
    for _ in 0..depth {
        out.push(' ');
    }
}

pub fn render_node(node: &TreeNode, depth: usize, out: &mut String) {
    indent(out, depth);
    match &node.value {
        TreeValue::Leaf(lit) => {
            out.push_str(&node.head);
            out.push_str(": ");
            out.push_str(&lit.render());
            out.push('\n');
        }
        TreeValue::Block(children) if children.is_empty() => {
            out.push_str(&node.head);
            out.push_str(" {}\n");
        }
        TreeValue::Block(children) => {
            out.push_str(&node.head);
            out.push_str(" {\n");
            for child in children {
                render_node(child, depth + 1, out);
            }
            indent(out, depth);
            out.push_str("}\n");
        }
    }
}

pub fn render_tree(tree: &DocTree) -> String {
    let mut out = format!("sandbox {} {{\n", quote(&tree.name));
    for node in &tree.sections {
        render_node(node, 1, &mut out);
    }
    out.push_str("}\n");
    out
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CanonicalizeError {
    #[error("document does not validate ({} error(s)); canonical form is only defined for valid documents", .0.errors().count())]
    NotValid(ValidationReport),
}

/// Canonical text of a valid document.
pub fn canonicalize(doc: &ConfigDocument) -> Result<String, CanonicalizeError> {
    let report = validate(doc);
    if !report.ok {
        return Err(CanonicalizeError::NotValid(report));
    }
    Ok(render_tree(&to_tree(doc)))
}

/// SHA-256 of the canonical text.
pub fn config_digest(doc: &ConfigDocument) -> Result<String, CanonicalizeError> {
    canonicalize(doc).map(sha256_hex)
}
