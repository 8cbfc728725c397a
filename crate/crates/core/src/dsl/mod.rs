//! The sandbox configuration language.
//!
//! A configuration is a single `sandbox "<name>" { ... }` block written in
//! the typed-literal block format (see [`syntax`]). [`parse`] produces a
//! [`ConfigDocument`]; [`validate`] reports schema and consistency
//! diagnostics; [`canonicalize`] renders a valid document deterministically;
//! [`diff`] computes the structural change set between two revisions.

pub mod canonical;
pub mod diff;
pub mod model;
pub mod reader;
pub mod syntax;
pub mod validate;

#[cfg(feature = "arbitrary")]
pub mod arbitrary;

pub use canonical::{canonicalize, config_digest, CanonicalizeError, TreeValue};
pub use diff::{apply, diff, ApplyError, Change, ChangeKind, ChangeSet};
pub use model::{
    AccessRule, ConfigDocument, ControlSpec, GuidelineRef, InfraSpec, ObjectiveSpec, ReportSpec, SystemProfile,
    TestSpec, CURRENT_SCHEMA_VERSION,
};
pub use syntax::{Literal, Pos};
pub use validate::{validate, Code, Diagnostic, Severity, ValidationReport};

/// File extension of configuration documents.
pub const FILE_EXTENSION: &str = "sbx";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("{pos}: {message}")]
    Lex { pos: Pos, message: String },
    #[error("{pos}: expected {}, found {found}", expected.join(" or "))]
    Syntax { pos: Pos, expected: Vec<String>, found: String },
    #[error("{pos}: invalid value `{value}` for `{field}`; expected one of: {}", expected.join(", "))]
    InvalidEnum { pos: Pos, field: String, value: String, expected: Vec<String> },
    #[error("{pos}: `{field}` must be {expected}, found {found}")]
    TypeMismatch { pos: Pos, field: String, expected: &'static str, found: &'static str },
    #[error("{second}: duplicate {what} `{id}` (first defined at {first})")]
    Duplicate { what: String, id: String, first: Pos, second: Pos },
    #[error("{pos}: `{block}` is missing required `{field}`")]
    Missing { pos: Pos, block: String, field: String },
    #[error("{pos}: invalid `{field}`: {message}")]
    InvalidValue { pos: Pos, field: String, message: String },
    #[error("{pos}: unknown key `{key}` in `{block}`")]
    UnknownKey { pos: Pos, block: String, key: String },
}

impl ParseError {
    pub fn pos(&self) -> Pos {
        match self {
            ParseError::Lex { pos, .. }
            | ParseError::Syntax { pos, .. }
            | ParseError::InvalidEnum { pos, .. }
            | ParseError::TypeMismatch { pos, .. }
            | ParseError::Missing { pos, .. }
            | ParseError::InvalidValue { pos, .. }
            | ParseError::UnknownKey { pos, .. } => *pos,
            ParseError::Duplicate { second, .. } => *second,
        }
    }
}

/// Parses a configuration document.
pub fn parse(source: &str) -> Result<ConfigDocument, ParseError> {
    let root = syntax::parse_single(source, "sandbox")?;
    model::lower(&root)
}

#[cfg(test)]
mod tests;
