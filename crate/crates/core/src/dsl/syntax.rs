//! Lexer and generic block tree for the typed-literal document format.
//!
//! The grammar is shared by sandbox configurations, questionnaires, rule
//! sets, mapping tables and principal tables:
//!
//! ```text
//! file    := block*
//! block   := word word? '{' item* '}'
//! item    := IDENT ':' literal | block
//! literal := STRING | INT | DECIMAL | 'true' | 'false' | IDENT | list
//! list    := '[' (literal ','?)* ']'
//! word    := IDENT | STRING
//! ```
//!
//! `#` starts a comment running to end of line.

use std::fmt;

use super::ParseError;
use crate::vocab::is_identifier;

/// 1-based line and column (in characters) of a token.
///
/// Positions are excluded from equality: two nodes compare equal when their
/// content matches regardless of where they were written.
#[derive(Debug, Clone, Copy, Default, Hash)]
pub struct Pos {
    pub line: u32,
    pub column: u32,
}

impl Pos {
    pub fn new(line: u32, column: u32) -> Self {
        Pos { line, column }
    }
}

impl PartialEq for Pos {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Eq for Pos {}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Str(String),
    Int(i64),
    Decimal(f64),
    Bool(bool),
    /// Bare identifier, used for enum values.
    Ident(String),
    List(Vec<Literal>),
}

impl Literal {
    pub fn type_name(&self) -> &'static str {
        match self {
            Literal::Str(_) => "string",
            Literal::Int(_) => "integer",
            Literal::Decimal(_) => "decimal",
            Literal::Bool(_) => "boolean",
            Literal::Ident(_) => "identifier",
            Literal::List(_) => "list",
        }
    }

    /// Renders the literal in canonical concrete syntax.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out);
        out
    }

    fn render_into(&self, out: &mut String) {
        match self {
            Literal::Str(s) => out.push_str(&quote(s)),
            Literal::Int(i) => out.push_str(&i.to_string()),
            // Debug output keeps a fractional part or exponent, so the value
            // lexes back as a decimal and round-trips exactly.
            Literal::Decimal(d) => out.push_str(&format!("{d:?}")),
            Literal::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Literal::Ident(s) => out.push_str(s),
            Literal::List(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    item.render_into(out);
                }
                out.push(']');
            }
        }
    }
}

/// Quotes and escapes a string literal.
pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c.is_control() => out.push_str(&format!("\\u{{{:x}}}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Renders a block head word: bare when it is an identifier, quoted otherwise.
pub fn render_word(s: &str) -> String {
    if is_identifier(s) && s != "true" && s != "false" {
        s.to_string()
    } else {
        quote(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Word {
    pub pos: Pos,
    pub text: String,
    pub quoted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub pos: Pos,
    pub key: String,
    pub value_pos: Pos,
    pub value: Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub head: Word,
    pub label: Option<Word>,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Field(Field),
    Block(Block),
}

impl Item {
    pub fn pos(&self) -> Pos {
        match self {
            Item::Field(f) => f.pos,
            Item::Block(b) => b.head.pos,
        }
    }

    pub fn key(&self) -> &str {
        match self {
            Item::Field(f) => &f.key,
            Item::Block(b) => &b.head.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Colon,
    Comma,
    Ident(String),
    Str(String),
    Int(i64),
    Decimal(f64),
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Str(s) => format!("string {}", quote(s)),
            Tok::Int(i) => format!("integer {i}"),
            Tok::Decimal(d) => format!("decimal {d:?}"),
            Tok::Eof => "end of input".into(),
        }
    }
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: u32,
    column: u32,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { chars: src.chars().peekable(), line: 1, column: 1 }
    }

    fn pos(&self) -> Pos {
        Pos::new(self.line, self.column)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn skip_trivia(&mut self) {
        while let Some(&c) = self.chars.peek() {
            if c.is_whitespace() {
                self.bump();
            } else if c == '#' {
                while let Some(&c) = self.chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    self.bump();
                }
            } else {
                break;
            }
        }
    }

    fn tokenize(mut self) -> Result<Vec<(Pos, Tok)>, ParseError> {
        let mut out = Vec::new();
        loop {
            self.skip_trivia();
            let pos = self.pos();
            let Some(&c) = self.chars.peek() else {
                out.push((pos, Tok::Eof));
                return Ok(out);
            };
            let tok = match c {
                '{' => self.single(Tok::LBrace),
                '}' => self.single(Tok::RBrace),
                '[' => self.single(Tok::LBracket),
                ']' => self.single(Tok::RBracket),
                ':' => self.single(Tok::Colon),
                ',' => self.single(Tok::Comma),
                '"' => self.string(pos)?,
                c if c.is_ascii_digit() || c == '-' => self.number(pos)?,
                c if c.is_ascii_alphabetic() || c == '_' => self.ident(),
                other => {
                    return Err(ParseError::Lex { pos, message: format!("unexpected character {other:?}") })
                }
            };
            out.push((pos, tok));
        }
    }

    fn single(&mut self, tok: Tok) -> Tok {
        self.bump();
        tok
    }

    fn ident(&mut self) -> Tok {
        let mut s = String::new();
        while let Some(&c) = self.chars.peek() {
            if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.') {
                s.push(c);
                self.bump();
            } else {
                break;
            }
        }
        Tok::Ident(s)
    }

    fn string(&mut self, start: Pos) -> Result<Tok, ParseError> {
        self.bump();
        let mut s = String::new();
        loop {
            let pos = self.pos();
            match self.bump() {
                None | Some('\n') => {
                    return Err(ParseError::Lex { pos: start, message: "unterminated string".into() })
                }
                Some('"') => return Ok(Tok::Str(s)),
                Some('\\') => match self.bump() {
                    Some('"') => s.push('"'),
                    Some('\\') => s.push('\\'),
                    Some('n') => s.push('\n'),
                    Some('t') => s.push('\t'),
                    Some('r') => s.push('\r'),
                    Some('u') => s.push(self.unicode_escape(pos)?),
                    other => {
                        return Err(ParseError::Lex { pos, message: format!("invalid escape sequence {other:?}") })
                    }
                },
                Some(c) => s.push(c),
            }
        }
    }

    fn unicode_escape(&mut self, pos: Pos) -> Result<char, ParseError> {
        let bad = || ParseError::Lex { pos, message: "invalid \\u{...} escape".into() };
        if self.bump() != Some('{') {
            return Err(bad());
        }
        let mut hex = String::new();
        loop {
            match self.bump() {
                Some('}') => break,
                Some(c) if c.is_ascii_hexdigit() && hex.len() < 6 => hex.push(c),
                _ => return Err(bad()),
            }
        }
        u32::from_str_radix(&hex, 16).ok().and_then(char::from_u32).ok_or_else(bad)
    }

    fn number(&mut self, pos: Pos) -> Result<Tok, ParseError> {
        let mut s = String::new();
        if self.chars.peek() == Some(&'-') {
            s.push('-');
            self.bump();
        }
        let mut decimal = false;
        self.digits(&mut s);
        if self.chars.peek() == Some(&'.') {
            decimal = true;
            s.push('.');
            self.bump();
            self.digits(&mut s);
        }
        if matches!(self.chars.peek(), Some('e' | 'E')) {
            decimal = true;
            s.push('e');
            self.bump();
            if let Some(&c @ ('+' | '-')) = self.chars.peek() {
                s.push(c);
                self.bump();
            }
            self.digits(&mut s);
        }
        if let Some(&c) = self.chars.peek() {
            if c.is_ascii_alphabetic() || c == '_' {
                return Err(ParseError::Lex { pos, message: format!("malformed number `{s}{c}`") });
            }
        }
        let malformed = || ParseError::Lex { pos, message: format!("malformed number `{s}`") };
        if decimal {
            let v: f64 = s.parse().map_err(|_| malformed())?;
            if !v.is_finite() {
                return Err(malformed());
            }
            Ok(Tok::Decimal(v))
        } else {
            s.parse().map(Tok::Int).map_err(|_| malformed())
        }
    }

    fn digits(&mut self, s: &mut String) {
        while let Some(&c) = self.chars.peek() {
            if c.is_ascii_digit() {
                s.push(c);
                self.bump();
            } else {
                break;
            }
        }
    }
}

struct Parser {
    toks: Vec<(Pos, Tok)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &(Pos, Tok) {
        &self.toks[self.at]
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].1
    }

    fn next(&mut self) -> (Pos, Tok) {
        let t = self.toks[self.at].clone();
        if self.at < self.toks.len() - 1 {
            self.at += 1;
        }
        t
    }

    fn unexpected(&self, expected: &[&str]) -> ParseError {
        let (pos, tok) = self.peek();
        ParseError::Syntax {
            pos: *pos,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: tok.describe(),
        }
    }

    fn word(&mut self) -> Option<Word> {
        let (pos, tok) = self.peek().clone();
        let word = match tok {
            Tok::Ident(text) => Word { pos, text, quoted: false },
            Tok::Str(text) => Word { pos, text, quoted: true },
            _ => return None,
        };
        self.next();
        Some(word)
    }

    fn file(&mut self) -> Result<Vec<Block>, ParseError> {
        let mut blocks = Vec::new();
        while self.peek().1 != Tok::Eof {
            let Some(head) = self.word() else {
                return Err(self.unexpected(&["block name", "end of input"]));
            };
            blocks.push(self.block_after_head(head)?);
        }
        Ok(blocks)
    }

    fn block_after_head(&mut self, head: Word) -> Result<Block, ParseError> {
        let label = if self.peek().1 == Tok::LBrace { None } else { self.word() };
        if self.peek().1 != Tok::LBrace {
            let expected: &[&str] = if label.is_none() { &["block label", "`{`"] } else { &["`{`"] };
            return Err(self.unexpected(expected));
        }
        self.next();
        let mut items = Vec::new();
        loop {
            match self.peek().1.clone() {
                Tok::RBrace => {
                    self.next();
                    return Ok(Block { head, label, items });
                }
                Tok::Ident(_) if *self.peek2() == Tok::Colon => {
                    let (pos, tok) = self.next();
                    let Tok::Ident(key) = tok else { unreachable!() };
                    self.next();
                    let value_pos = self.peek().0;
                    let value = self.literal()?;
                    items.push(Item::Field(Field { pos, key, value_pos, value }));
                }
                Tok::Ident(_) | Tok::Str(_) => {
                    let head = self.word().expect("peeked a word");
                    items.push(Item::Block(self.block_after_head(head)?));
                }
                _ => return Err(self.unexpected(&["`}`", "key", "block name"])),
            }
        }
    }

    fn literal(&mut self) -> Result<Literal, ParseError> {
        let (_, tok) = self.peek().clone();
        let lit = match tok {
            Tok::Str(s) => Literal::Str(s),
            Tok::Int(i) => Literal::Int(i),
            Tok::Decimal(d) => Literal::Decimal(d),
            Tok::Ident(s) if s == "true" => Literal::Bool(true),
            Tok::Ident(s) if s == "false" => Literal::Bool(false),
            Tok::Ident(s) => Literal::Ident(s),
            Tok::LBracket => {
                self.next();
                let mut items = Vec::new();
                loop {
                    if self.peek().1 == Tok::RBracket {
                        self.next();
                        return Ok(Literal::List(items));
                    }
                    items.push(self.literal()?);
                    match self.peek().1 {
                        Tok::Comma => {
                            self.next();
                        }
                        Tok::RBracket => {}
                        _ if matches!(self.peek().1, Tok::Str(_) | Tok::Int(_) | Tok::Decimal(_) | Tok::Ident(_) | Tok::LBracket) => {}
                        _ => return Err(self.unexpected(&["`,`", "`]`", "value"])),
                    }
                }
            }
            _ => return Err(self.unexpected(&["string", "integer", "decimal", "boolean", "identifier", "`[`"])),
        };
        self.next();
        Ok(lit)
    }
}

/// Parses a file into its top-level blocks.
pub fn parse_blocks(src: &str) -> Result<Vec<Block>, ParseError> {
    let toks = Lexer::new(src).tokenize()?;
    Parser { toks, at: 0 }.file()
}

/// Parses a file that must contain exactly one top-level block named `head`.
pub fn parse_single(src: &str, head: &str) -> Result<Block, ParseError> {
    let mut blocks = parse_blocks(src)?;
    if blocks.len() != 1 || blocks[0].head.text != head {
        let (pos, found) = match blocks.get(usize::from(blocks.first().is_some_and(|b| b.head.text == head))) {
            Some(b) => (b.head.pos, format!("block `{}`", b.head.text)),
            None => (Pos::new(1, 1), "end of input".to_string()),
        };
        return Err(ParseError::Syntax { pos, expected: vec![format!("a single `{head}` block")], found });
    }
    Ok(blocks.remove(0))
}
