//! Typed access to a generic [`Block`], tracking which items were consumed.

use std::str::FromStr;

use super::syntax::{Block, Field, Item, Literal, Pos};
use super::ParseError;
use crate::vocab::{is_identifier, UnknownKeyword};

/// A key present in a block that no reader consumed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownKey {
    pub pos: Pos,
    /// Slash-separated path of the enclosing block, e.g. `tests/t1`.
    pub path: String,
    pub key: String,
}

pub struct Reader<'a> {
    block: &'a Block,
    path: String,
    used: Vec<bool>,
}

impl<'a> Reader<'a> {
    /// Fails when a field key occurs twice. Repeated sub-blocks are left to
    /// the caller, since some blocks are legitimately repeatable.
    pub fn new(block: &'a Block, path: impl Into<String>) -> Result<Self, ParseError> {
        let path = path.into();
        let mut seen: Vec<&Field> = Vec::new();
        for item in &block.items {
            if let Item::Field(f) = item {
                if let Some(first) = seen.iter().find(|s| s.key == f.key) {
                    return Err(ParseError::Duplicate {
                        what: format!("key in `{path}`"),
                        id: f.key.clone(),
                        first: first.pos,
                        second: f.pos,
                    });
                }
                seen.push(f);
            }
        }
        Ok(Reader { used: vec![false; block.items.len()], block, path })
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn pos(&self) -> Pos {
        self.block.head.pos
    }

    pub fn field(&mut self, key: &str) -> Option<&'a Field> {
        let block = self.block;
        block.items.iter().enumerate().find_map(|(i, item)| match item {
            Item::Field(f) if f.key == key => {
                self.used[i] = true;
                Some(f)
            }
            _ => None,
        })
    }

    pub fn required(&mut self, key: &str) -> Result<&'a Field, ParseError> {
        let pos = self.pos();
        let block = self.path.clone();
        self.field(key).ok_or(ParseError::Missing { pos, block, field: key.to_string() })
    }

    pub fn string(&mut self, key: &str) -> Result<Option<String>, ParseError> {
        self.field(key).map(|f| expect_str(f, &f.value)).transpose()
    }

    pub fn required_string(&mut self, key: &str) -> Result<String, ParseError> {
        let f = self.required(key)?;
        expect_str(f, &f.value)
    }

    /// A string or bare identifier.
    pub fn word(&mut self, key: &str) -> Result<Option<String>, ParseError> {
        self.field(key).map(|f| expect_word(f, &f.value)).transpose()
    }

    pub fn required_word(&mut self, key: &str) -> Result<String, ParseError> {
        let f = self.required(key)?;
        expect_word(f, &f.value)
    }

    pub fn keyword<T: FromStr<Err = UnknownKeyword>>(&mut self, key: &str) -> Result<Option<T>, ParseError> {
        self.field(key).map(|f| expect_keyword(f, &f.value)).transpose()
    }

    pub fn required_keyword<T: FromStr<Err = UnknownKeyword>>(&mut self, key: &str) -> Result<T, ParseError> {
        let f = self.required(key)?;
        expect_keyword(f, &f.value)
    }

    pub fn unsigned(&mut self, key: &str) -> Result<Option<u64>, ParseError> {
        self.field(key).map(|f| expect_unsigned(f, &f.value)).transpose()
    }

    pub fn required_unsigned(&mut self, key: &str) -> Result<u64, ParseError> {
        let f = self.required(key)?;
        expect_unsigned(f, &f.value)
    }

    pub fn boolean(&mut self, key: &str) -> Result<Option<bool>, ParseError> {
        self.field(key)
            .map(|f| match f.value {
                Literal::Bool(b) => Ok(b),
                ref other => Err(mismatch(f, "a boolean", other)),
            })
            .transpose()
    }

    /// List field whose elements are read by `each`.
    pub fn list<T>(
        &mut self,
        key: &str,
        mut each: impl FnMut(&'a Field, &'a Literal) -> Result<T, ParseError>,
    ) -> Result<Option<Vec<T>>, ParseError> {
        let Some(f) = self.field(key) else { return Ok(None) };
        match &f.value {
            Literal::List(items) => items.iter().map(|lit| each(f, lit)).collect::<Result<Vec<_>, _>>().map(Some),
            other => Err(mismatch(f, "a list", other)),
        }
    }

    /// All sub-blocks with the given head, in order.
    pub fn blocks(&mut self, head: &str) -> Vec<&'a Block> {
        let block = self.block;
        let mut out = Vec::new();
        for (i, item) in block.items.iter().enumerate() {
            if let Item::Block(b) = item {
                if b.head.text == head {
                    self.used[i] = true;
                    out.push(b);
                }
            }
        }
        out
    }

    /// At most one sub-block with the given head.
    pub fn block(&mut self, head: &str) -> Result<Option<&'a Block>, ParseError> {
        let found = self.blocks(head);
        if let [first, second, ..] = found.as_slice() {
            return Err(ParseError::Duplicate {
                what: format!("block in `{}`", self.path),
                id: head.to_string(),
                first: first.head.pos,
                second: second.head.pos,
            });
        }
        Ok(found.first().copied())
    }

    pub fn required_block(&mut self, head: &str) -> Result<&'a Block, ParseError> {
        let pos = self.pos();
        let path = self.path.clone();
        self.block(head)?.ok_or(ParseError::Missing { pos, block: path, field: head.to_string() })
    }

    /// Every remaining sub-block, regardless of head.
    pub fn remaining_blocks(&mut self) -> Vec<&'a Block> {
        let block = self.block;
        let mut out = Vec::new();
        for (i, item) in block.items.iter().enumerate() {
            if let (Item::Block(b), false) = (item, self.used[i]) {
                self.used[i] = true;
                out.push(b);
            }
        }
        out
    }

    /// Every remaining field, regardless of key.
    pub fn remaining_fields(&mut self) -> Vec<&'a Field> {
        let block = self.block;
        let mut out = Vec::new();
        for (i, item) in block.items.iter().enumerate() {
            if let (Item::Field(f), false) = (item, self.used[i]) {
                self.used[i] = true;
                out.push(f);
            }
        }
        out
    }

    /// Unconsumed items.
    pub fn finish(self) -> Vec<UnknownKey> {
        self.block
            .items
            .iter()
            .zip(&self.used)
            .filter(|(_, used)| !**used)
            .map(|(item, _)| UnknownKey { pos: item.pos(), path: self.path.clone(), key: item.key().to_string() })
            .collect()
    }

    /// Like [`Reader::finish`], but unknown keys are hard errors.
    pub fn finish_strict(self) -> Result<(), ParseError> {
        match self.finish().into_iter().next() {
            None => Ok(()),
            Some(u) => Err(ParseError::UnknownKey { pos: u.pos, block: u.path, key: u.key }),
        }
    }
}

pub fn mismatch(f: &Field, expected: &'static str, found: &Literal) -> ParseError {
    ParseError::TypeMismatch { pos: f.value_pos, field: f.key.clone(), expected, found: found.type_name() }
}

pub fn expect_str(f: &Field, lit: &Literal) -> Result<String, ParseError> {
    match lit {
        Literal::Str(s) => Ok(s.clone()),
        other => Err(mismatch(f, "a string", other)),
    }
}

pub fn expect_word(f: &Field, lit: &Literal) -> Result<String, ParseError> {
    match lit {
        Literal::Str(s) | Literal::Ident(s) => Ok(s.clone()),
        other => Err(mismatch(f, "a string or identifier", other)),
    }
}

pub fn expect_identifier(f: &Field, lit: &Literal) -> Result<String, ParseError> {
    let s = expect_word(f, lit)?;
    if is_identifier(&s) {
        Ok(s)
    } else {
        Err(ParseError::InvalidValue { pos: f.value_pos, field: f.key.clone(), message: format!("`{s}` is not an identifier") })
    }
}

pub fn expect_keyword<T: FromStr<Err = UnknownKeyword>>(f: &Field, lit: &Literal) -> Result<T, ParseError> {
    match lit {
        Literal::Ident(s) => s.parse().map_err(|e: UnknownKeyword| ParseError::InvalidEnum {
            pos: f.value_pos,
            field: f.key.clone(),
            value: s.clone(),
            expected: e.expected.iter().map(|s| s.to_string()).collect(),
        }),
        other => Err(mismatch(f, "a bare identifier", other)),
    }
}

pub fn expect_unsigned(f: &Field, lit: &Literal) -> Result<u64, ParseError> {
    match lit {
        Literal::Int(i) if *i >= 0 => Ok(*i as u64),
        Literal::Int(i) => Err(ParseError::InvalidValue {
            pos: f.value_pos,
            field: f.key.clone(),
            message: format!("{i} is negative"),
        }),
        other => Err(mismatch(f, "an unsigned integer", other)),
    }
}

/// The label of a block, required to be an identifier.
pub fn identifier_label(block: &Block) -> Result<(Pos, String), ParseError> {
    match &block.label {
        Some(w) if !w.quoted && is_identifier(&w.text) => Ok((w.pos, w.text.clone())),
        Some(w) => Err(ParseError::InvalidValue {
            pos: w.pos,
            field: block.head.text.clone(),
            message: format!("label `{}` is not an identifier", w.text),
        }),
        None => Err(ParseError::Syntax {
            pos: block.head.pos,
            expected: vec![format!("identifier after `{}`", block.head.text)],
            found: "`{`".into(),
        }),
    }
}

/// Fails on a label where none is allowed.
pub fn no_label(block: &Block) -> Result<(), ParseError> {
    match &block.label {
        None => Ok(()),
        Some(w) => Err(ParseError::Syntax { pos: w.pos, expected: vec!["`{`".into()], found: format!("label `{}`", w.text) }),
    }
}
