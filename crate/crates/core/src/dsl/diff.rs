//! Structural differences between two configurations, and their replay.

use serde::{Deserialize, Serialize};

use super::canonical::{render_tree, to_tree, DocTree, TreeNode, TreeValue};
use super::model::ConfigDocument;
use super::syntax::{render_word, Literal};
use super::ParseError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Added,
    Removed,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Change {
    /// Slash-separated path, e.g. `tests/t1/seed`. The sandbox name is `name`.
    pub path: String,
    pub kind: ChangeKind,
    pub before: Option<TreeValue>,
    pub after: Option<TreeValue>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub changes: Vec<Change>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.changes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.changes.len()
    }

    pub fn paths(&self) -> Vec<&str> {
        self.changes.iter().map(|c| c.path.as_str()).collect()
    }
}

pub fn diff(old: &ConfigDocument, new: &ConfigDocument) -> ChangeSet {
    let (a, b) = (to_tree(old), to_tree(new));
    let mut changes = Vec::new();
    if a.name != b.name {
        changes.push(Change {
            path: "name".into(),
            kind: ChangeKind::Modified,
            before: Some(TreeValue::Leaf(Literal::Str(a.name.clone()))),
            after: Some(TreeValue::Leaf(Literal::Str(b.name.clone()))),
        });
    }
    diff_children("", &a.sections, &b.sections, &mut changes);
    ChangeSet { changes }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}/{key}")
    }
}

fn diff_children(prefix: &str, old: &[TreeNode], new: &[TreeNode], out: &mut Vec<Change>) {
    for o in old {
        let path = join(prefix, &o.key);
        match new.iter().find(|n| n.key == o.key) {
            None => out.push(Change { path, kind: ChangeKind::Removed, before: Some(o.value.clone()), after: None }),
            Some(n) => match (&o.value, &n.value) {
                (TreeValue::Block(oc), TreeValue::Block(nc)) if o.head == n.head => diff_children(&path, oc, nc, out),
                (ov, nv) if ov != nv || o.head != n.head => out.push(Change {
                    path,
                    kind: ChangeKind::Modified,
                    before: Some(ov.clone()),
                    after: Some(nv.clone()),
                }),
                _ => {}
            },
        }
    }
    for n in new {
        if !old.iter().any(|o| o.key == n.key) {
            out.push(Change { path: join(prefix, &n.key), kind: ChangeKind::Added, before: None, after: Some(n.value.clone()) });
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApplyError {
    #[error("change path `{0}` does not exist in the base document")]
    PathNotFound(String),
    #[error("change at `{0}` does not carry the value it needs")]
    MissingValue(String),
    #[error("replayed document does not parse: {0}")]
    Parse(#[from] ParseError),
}

/// Head of a node given its parent path, mirroring the canonical layout.
fn head_for(parent: &[&str], key: &str) -> String {
    match parent {
        ["objectives"] => render_word(key),
        ["controls"] => format!("control {key}"),
        ["tests"] => format!("test {key}"),
        ["access"] => format!("role {key}"),
        _ => key.to_string(),
    }
}

/// Replays `changes` on top of `base`.
pub fn apply(base: &ConfigDocument, changes: &ChangeSet) -> Result<ConfigDocument, ApplyError> {
    let mut tree: DocTree = to_tree(base);
    for change in &changes.changes {
        if change.path == "name" {
            match &change.after {
                Some(TreeValue::Leaf(Literal::Str(name))) => tree.name = name.clone(),
                _ => return Err(ApplyError::MissingValue(change.path.clone())),
            }
            continue;
        }
        let segments: Vec<&str> = change.path.split('/').collect();
        let (key, parent) = segments.split_last().ok_or_else(|| ApplyError::PathNotFound(change.path.clone()))?;
        let mut children = &mut tree.sections;
        for seg in parent {
            let node = children
                .iter_mut()
                .find(|n| n.key == *seg)
                .ok_or_else(|| ApplyError::PathNotFound(change.path.clone()))?;
            match &mut node.value {
                TreeValue::Block(c) => children = c,
                TreeValue::Leaf(_) => return Err(ApplyError::PathNotFound(change.path.clone())),
            }
        }
        let position = children.iter().position(|n| n.key == *key);
        match change.kind {
            ChangeKind::Removed => {
                let i = position.ok_or_else(|| ApplyError::PathNotFound(change.path.clone()))?;
                children.remove(i);
            }
            ChangeKind::Added | ChangeKind::Modified => {
                let value = change.after.clone().ok_or_else(|| ApplyError::MissingValue(change.path.clone()))?;
                let node = TreeNode { key: key.to_string(), head: head_for(parent, key), value };
                match position {
                    Some(i) => children[i] = node,
                    None if change.kind == ChangeKind::Added => children.push(node),
                    None => return Err(ApplyError::PathNotFound(change.path.clone())),
                }
            }
        }
    }
    Ok(super::parse(&render_tree(&tree))?)
}
