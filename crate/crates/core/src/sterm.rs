//! Reader and printer for the Erlang literal-term syntax used by `.S` files.
//!
//! Only the literal subset is supported: atoms, integers (arbitrary
//! precision), floats, strings (as byte lists), binaries and bit-strings,
//! tuples and lists. A `.S` file is a sequence of dot-terminated terms.
//!
//! The lexer is public because the pseudo-source reader in
//! [`crate::destructure`] reuses it for the terms embedded in its text.

use std::fmt::{self, Write as _};

use num_bigint::BigInt;
use num_traits::{Num, ToPrimitive};
use thiserror::Error;

/// Deepest nesting accepted by the reader.
pub const MAX_DEPTH: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Atom(String),
    Int(BigInt),
    Float(f64),
    /// Bytes are MSB-first; `bits` may be less than `8 * bytes.len()` for bit-strings.
    Bin { bytes: Vec<u8>, bits: usize },
    Tuple(Vec<Term>),
    /// Proper list. Strings are lists of small integers.
    List(Vec<Term>),
    /// `[a, b | tail]` where `tail` is not itself a list.
    Improper(Vec<Term>, Box<Term>),
}

impl Term {
    pub fn atom(name: &str) -> Term {
        Term::Atom(name.to_string())
    }

    pub fn int<I: Into<BigInt>>(v: I) -> Term {
        Term::Int(v.into())
    }

    pub fn nil() -> Term {
        Term::List(Vec::new())
    }

    pub fn tuple(items: Vec<Term>) -> Term {
        Term::Tuple(items)
    }

    pub fn binary(bytes: &[u8]) -> Term {
        Term::Bin {
            bytes: bytes.to_vec(),
            bits: bytes.len() * 8,
        }
    }

    pub fn string(s: &str) -> Term {
        Term::List(s.bytes().map(Term::int).collect())
    }

    pub fn is_nil(&self) -> bool {
        matches!(self, Term::List(v) if v.is_empty())
    }

    pub fn as_atom(&self) -> Option<&str> {
        match self {
            Term::Atom(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<&BigInt> {
        match self {
            Term::Int(i) => Some(i),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        self.as_int().and_then(|i| i.to_i64())
    }

    pub fn as_tuple(&self) -> Option<&[Term]> {
        match self {
            Term::Tuple(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Term]> {
        match self {
            Term::List(v) => Some(v),
            _ => None,
        }
    }

    /// `{Tag, ...}` with the given atom tag.
    pub fn is_tagged(&self, tag: &str) -> bool {
        matches!(self.as_tuple(), Some([Term::Atom(a), ..]) if a == tag)
    }

    /// Proper list of bytes rendered as a string by the printer.
    fn printable_string(items: &[Term]) -> Option<Vec<u8>> {
        if items.is_empty() {
            return None;
        }
        items
            .iter()
            .map(|t| match t {
                Term::Int(i) => i.to_u8().filter(|b| (0x20..0x7f).contains(b)),
                _ => None,
            })
            .collect()
    }
}

impl From<&str> for Term {
    fn from(a: &str) -> Term {
        Term::atom(a)
    }
}

impl From<i64> for Term {
    fn from(v: i64) -> Term {
        Term::int(v)
    }
}

const RESERVED: &[&str] = &[
    "after", "and", "andalso", "band", "begin", "bnot", "bor", "bsl", "bsr", "bxor", "case",
    "catch", "cond", "div", "else", "end", "fun", "if", "let", "maybe", "not", "of", "or",
    "orelse", "receive", "rem", "try", "when", "xor",
];

fn atom_needs_quotes(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return true,
    }
    if !chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '@') {
        return true;
    }
    RESERVED.contains(&name)
}

fn write_escaped(out: &mut impl fmt::Write, ch: char, quote: char) -> fmt::Result {
    match ch {
        '\\' => out.write_str("\\\\"),
        '\n' => out.write_str("\\n"),
        '\t' => out.write_str("\\t"),
        '\r' => out.write_str("\\r"),
        c if c == quote => {
            out.write_char('\\')?;
            out.write_char(c)
        }
        c if (c as u32) < 0x20 || c as u32 == 0x7f => write!(out, "\\x{{{:X}}}", c as u32),
        c => out.write_char(c),
    }
}

/// Writes an atom, quoting when the bare form would not read back as the same atom.
pub fn write_atom(out: &mut impl fmt::Write, name: &str) -> fmt::Result {
    if !atom_needs_quotes(name) {
        return out.write_str(name);
    }
    out.write_char('\'')?;
    for ch in name.chars() {
        write_escaped(out, ch, '\'')?;
    }
    out.write_char('\'')
}

/// Shortest decimal that reads back as the same double, in Erlang float syntax.
pub fn format_float(v: f64) -> String {
    let mut s = format!("{v:?}");
    if let Some(e) = s.find('e') {
        if !s[..e].contains('.') {
            s.insert_str(e, ".0");
        }
    } else if !s.contains('.') {
        s.push_str(".0");
    }
    s
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Atom(a) => write_atom(f, a),
            Term::Int(i) => write!(f, "{i}"),
            Term::Float(v) => f.write_str(&format_float(*v)),
            Term::Bin { bytes, bits } => {
                f.write_str("<<")?;
                let whole = bits / 8;
                let rest = bits % 8;
                for (i, b) in bytes[..whole].iter().enumerate() {
                    if i > 0 {
                        f.write_char(',')?;
                    }
                    write!(f, "{b}")?;
                }
                if rest > 0 {
                    if whole > 0 {
                        f.write_char(',')?;
                    }
                    write!(f, "{}:{}", bytes[whole] >> (8 - rest), rest)?;
                }
                f.write_str(">>")
            }
            Term::Tuple(items) => {
                f.write_char('{')?;
                write_seq(f, items)?;
                f.write_char('}')
            }
            Term::List(items) => {
                if let Some(bytes) = Term::printable_string(items) {
                    f.write_char('"')?;
                    for b in bytes {
                        write_escaped(f, b as char, '"')?;
                    }
                    return f.write_char('"');
                }
                f.write_char('[')?;
                write_seq(f, items)?;
                f.write_char(']')
            }
            Term::Improper(items, tail) => {
                f.write_char('[')?;
                write_seq(f, items)?;
                write!(f, "|{tail}]")
            }
        }
    }
}

fn write_seq(f: &mut fmt::Formatter<'_>, items: &[Term]) -> fmt::Result {
    for (i, t) in items.iter().enumerate() {
        if i > 0 {
            f.write_char(',')?;
        }
        write!(f, "{t}")?;
    }
    Ok(())
}

/// Canonical single-form text, terminated by `".\n"`.
pub fn print_form(t: &Term) -> String {
    format!("{t}.\n")
}

/// Prints every term as a form, one per line.
pub fn print_forms(terms: &[Term]) -> String {
    terms.iter().map(print_form).collect()
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Atom(String),
    Var(String),
    Int(BigInt),
    Float(f64),
    Str(Vec<u8>),
    /// Punctuation: `{ } [ ] ( ) | , ; : -> := << >> - + / =`
    Punct(&'static str),
    Dot,
    Eof,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ErrorKind {
    #[error("bad character {0:?}")]
    BadChar(char),
    #[error("unterminated string")]
    UnterminatedString,
    #[error("unterminated quoted atom")]
    UnterminatedAtom,
    #[error("unterminated binary")]
    UnterminatedBinary,
    #[error("bad number {0:?}")]
    BadNumber(String),
    #[error("unexpected {0}")]
    Unexpected(String),
    #[error("missing dot after form")]
    MissingDot,
    #[error("nesting deeper than {MAX_DEPTH}")]
    TooDeep,
    #[error("bad binary segment: {0}")]
    BadSegment(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{pos}: {kind}")]
pub struct ParseError {
    pub pos: Pos,
    pub kind: ErrorKind,
}

impl ParseError {
    fn new(pos: Pos, kind: ErrorKind) -> Self {
        ParseError { pos, kind }
    }
}

pub struct Lexer<'a> {
    src: &'a [u8],
    at: usize,
    line: usize,
    col: usize,
    peeked: Option<(Tok, Pos)>,
}

impl<'a> Lexer<'a> {
    pub fn new(text: &'a str) -> Self {
        Lexer {
            src: text.as_bytes(),
            at: 0,
            line: 1,
            col: 1,
            peeked: None,
        }
    }

    fn here(&self) -> Pos {
        Pos {
            line: self.line,
            col: self.col,
        }
    }

    fn cur(&self) -> Option<u8> {
        self.src.get(self.at).copied()
    }

    fn look(&self, n: usize) -> Option<u8> {
        self.src.get(self.at + n).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.cur()?;
        self.at += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else if c & 0xC0 != 0x80 {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_trivia(&mut self) {
        while let Some(c) = self.cur() {
            if c.is_ascii_whitespace() {
                self.bump();
            } else if c == b'%' {
                while let Some(c) = self.cur() {
                    if c == b'\n' {
                        break;
                    }
                    self.bump();
                }
            } else {
                break;
            }
        }
    }

    pub fn peek(&mut self) -> Result<&(Tok, Pos), ParseError> {
        if self.peeked.is_none() {
            let t = self.lex()?;
            self.peeked = Some(t);
        }
        Ok(self.peeked.as_ref().unwrap())
    }

    pub fn next_tok(&mut self) -> Result<(Tok, Pos), ParseError> {
        match self.peeked.take() {
            Some(t) => Ok(t),
            None => self.lex(),
        }
    }

    fn lex(&mut self) -> Result<(Tok, Pos), ParseError> {
        self.skip_trivia();
        let pos = self.here();
        let Some(c) = self.cur() else {
            return Ok((Tok::Eof, pos));
        };
        let tok = match c {
            b'0'..=b'9' => self.number(pos)?,
            b'a'..=b'z' => Tok::Atom(self.word()),
            b'A'..=b'Z' | b'_' => Tok::Var(self.word()),
            b'\'' => {
                self.bump();
                let bytes = self.quoted(b'\'', pos, ErrorKind::UnterminatedAtom)?;
                Tok::Atom(String::from_utf8_lossy(&bytes).into_owned())
            }
            b'"' => {
                self.bump();
                Tok::Str(self.quoted(b'"', pos, ErrorKind::UnterminatedString)?)
            }
            b'$' => {
                self.bump();
                let v = match self.bump() {
                    Some(b'\\') => self.escape(pos)?,
                    Some(ch) => self.utf8_tail(ch),
                    None => return Err(ParseError::new(pos, ErrorKind::UnterminatedString)),
                };
                Tok::Int(BigInt::from(v))
            }
            b'.' => {
                self.bump();
                match self.cur() {
                    None | Some(b'%') => Tok::Dot,
                    Some(c) if c.is_ascii_whitespace() => Tok::Dot,
                    Some(_) => return Err(ParseError::new(pos, ErrorKind::BadChar('.'))),
                }
            }
            _ => {
                let two = [c, self.look(1).unwrap_or(0)];
                let p: &'static str = match &two {
                    b"->" => "->",
                    b":=" => ":=",
                    b"<<" => "<<",
                    b">>" => ">>",
                    _ => match c {
                        b'{' => "{",
                        b'}' => "}",
                        b'[' => "[",
                        b']' => "]",
                        b'(' => "(",
                        b')' => ")",
                        b'|' => "|",
                        b',' => ",",
                        b';' => ";",
                        b':' => ":",
                        b'-' => "-",
                        b'+' => "+",
                        b'/' => "/",
                        b'=' => "=",
                        _ => {
                            let ch = std::str::from_utf8(&self.src[self.at..])
                                .ok()
                                .and_then(|s| s.chars().next())
                                .unwrap_or(c as char);
                            return Err(ParseError::new(pos, ErrorKind::BadChar(ch)));
                        }
                    },
                };
                for _ in 0..p.len() {
                    self.bump();
                }
                Tok::Punct(p)
            }
        };
        Ok((tok, pos))
    }

    fn word(&mut self) -> String {
        let start = self.at;
        while let Some(c) = self.cur() {
            if c.is_ascii_alphanumeric() || c == b'_' || c == b'@' {
                self.bump();
            } else {
                break;
            }
        }
        String::from_utf8_lossy(&self.src[start..self.at]).into_owned()
    }

    fn digits(&mut self, radix: u32) -> String {
        let mut s = String::new();
        while let Some(c) = self.cur() {
            if (c as char).is_digit(radix) {
                s.push(c as char);
                self.bump();
            } else if c == b'_' && self.look(1).is_some_and(|d| (d as char).is_digit(radix)) {
                self.bump();
            } else {
                break;
            }
        }
        s
    }

    fn number(&mut self, pos: Pos) -> Result<Tok, ParseError> {
        let int_part = self.digits(10);
        if self.cur() == Some(b'#') {
            self.bump();
            let radix: u32 = int_part
                .parse()
                .ok()
                .filter(|r| (2..=36).contains(r))
                .ok_or_else(|| ParseError::new(pos, ErrorKind::BadNumber(int_part.clone())))?;
            let ds = self.digits(radix);
            return BigInt::from_str_radix(&ds, radix)
                .map(Tok::Int)
                .map_err(|_| ParseError::new(pos, ErrorKind::BadNumber(ds)));
        }
        if self.cur() == Some(b'.') && self.look(1).is_some_and(|c| c.is_ascii_digit()) {
            self.bump();
            let mut s = format!("{int_part}.{}", self.digits(10));
            if matches!(self.cur(), Some(b'e' | b'E')) {
                let sign = self.look(1);
                let (skip, signed) = match sign {
                    Some(b'+' | b'-') => (2, true),
                    _ => (1, false),
                };
                if self.look(skip).is_some_and(|c| c.is_ascii_digit()) {
                    self.bump();
                    s.push('e');
                    if signed {
                        s.push(self.bump().unwrap() as char);
                    }
                    s.push_str(&self.digits(10));
                }
            }
            return s
                .parse::<f64>()
                .map(Tok::Float)
                .map_err(|_| ParseError::new(pos, ErrorKind::BadNumber(s)));
        }
        int_part
            .parse::<BigInt>()
            .map(Tok::Int)
            .map_err(|_| ParseError::new(pos, ErrorKind::BadNumber(int_part)))
    }

    fn utf8_tail(&mut self, first: u8) -> u32 {
        let extra = match first {
            0xC0..=0xDF => 1,
            0xE0..=0xEF => 2,
            0xF0..=0xF7 => 3,
            _ => 0,
        };
        let start = self.at - 1;
        for _ in 0..extra {
            self.bump();
        }
        std::str::from_utf8(&self.src[start..self.at])
            .ok()
            .and_then(|s| s.chars().next())
            .map_or(first as u32, |c| c as u32)
    }

    fn escape(&mut self, pos: Pos) -> Result<u32, ParseError> {
        let c = self
            .bump()
            .ok_or_else(|| ParseError::new(pos, ErrorKind::UnterminatedString))?;
        Ok(match c {
            b'n' => 10,
            b't' => 9,
            b'r' => 13,
            b's' => 32,
            b'e' => 27,
            b'd' => 127,
            b'b' => 8,
            b'f' => 12,
            b'v' => 11,
            b'0'..=b'7' => {
                let mut v = (c - b'0') as u32;
                for _ in 0..2 {
                    match self.cur() {
                        Some(d @ b'0'..=b'7') => {
                            self.bump();
                            v = v * 8 + (d - b'0') as u32;
                        }
                        _ => break,
                    }
                }
                v
            }
            b'x' => {
                if self.cur() == Some(b'{') {
                    self.bump();
                    let ds = self.digits(16);
                    if self.bump() != Some(b'}') {
                        return Err(ParseError::new(pos, ErrorKind::BadNumber(ds)));
                    }
                    u32::from_str_radix(&ds, 16)
                        .map_err(|_| ParseError::new(pos, ErrorKind::BadNumber(ds)))?
                } else {
                    let mut ds = String::new();
                    for _ in 0..2 {
                        if let Some(d) = self.cur().filter(|d| d.is_ascii_hexdigit()) {
                            self.bump();
                            ds.push(d as char);
                        }
                    }
                    u32::from_str_radix(&ds, 16)
                        .map_err(|_| ParseError::new(pos, ErrorKind::BadNumber(ds)))?
                }
            }
            b'^' => {
                let ch = self
                    .bump()
                    .ok_or_else(|| ParseError::new(pos, ErrorKind::UnterminatedString))?;
                (ch & 0x1f) as u32
            }
            other => self.utf8_tail(other),
        })
    }

    fn quoted(&mut self, quote: u8, pos: Pos, kind: ErrorKind) -> Result<Vec<u8>, ParseError> {
        let mut out = Vec::new();
        loop {
            match self.bump() {
                None => return Err(ParseError::new(pos, kind)),
                Some(c) if c == quote => return Ok(out),
                Some(b'\\') => {
                    let v = self.escape(pos)?;
                    match char::from_u32(v) {
                        Some(ch) if quote == b'\'' => {
                            let mut buf = [0u8; 4];
                            out.extend_from_slice(ch.encode_utf8(&mut buf).as_bytes());
                        }
                        _ => out.push(v as u8),
                    }
                }
                Some(c) => out.push(c),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parser

enum Frame {
    Tuple(Vec<Term>),
    List(Vec<Term>),
    /// After `|`, waiting for the tail term.
    Tail(Vec<Term>),
}

/// Reads one term from the lexer. Iterative so that deep nesting reports
/// [`ErrorKind::TooDeep`] instead of exhausting the stack.
pub fn read_term(lx: &mut Lexer<'_>) -> Result<Term, ParseError> {
    let mut stack: Vec<Frame> = Vec::new();
    loop {
        let (tok, pos) = lx.next_tok()?;
        let mut value = match tok {
            Tok::Punct("{") | Tok::Punct("[") => {
                if stack.len() >= MAX_DEPTH {
                    return Err(ParseError::new(pos, ErrorKind::TooDeep));
                }
                let closer = if tok == Tok::Punct("{") { "}" } else { "]" };
                if lx.peek()?.0 == Tok::Punct(closer) {
                    lx.next_tok()?;
                    if closer == "}" {
                        Term::Tuple(Vec::new())
                    } else {
                        Term::nil()
                    }
                } else {
                    stack.push(if closer == "}" {
                        Frame::Tuple(Vec::new())
                    } else {
                        Frame::List(Vec::new())
                    });
                    continue;
                }
            }
            Tok::Punct("<<") => read_binary(lx, pos)?,
            Tok::Atom(a) => Term::Atom(a),
            Tok::Int(i) => Term::Int(i),
            Tok::Float(v) => Term::Float(v),
            Tok::Str(mut s) => {
                while let Tok::Str(_) = lx.peek()?.0 {
                    if let (Tok::Str(more), _) = lx.next_tok()? {
                        s.extend(more);
                    }
                }
                Term::List(s.into_iter().map(Term::int).collect())
            }
            Tok::Punct(sign @ ("-" | "+")) => match lx.next_tok()? {
                (Tok::Int(i), _) => Term::Int(if sign == "-" { -i } else { i }),
                (Tok::Float(v), _) => Term::Float(if sign == "-" { -v } else { v }),
                (t, p) => return Err(ParseError::new(p, ErrorKind::Unexpected(describe(&t)))),
            },
            other => return Err(ParseError::new(pos, ErrorKind::Unexpected(describe(&other)))),
        };
        // Attach the completed value to enclosing frames.
        loop {
            let Some(frame) = stack.last_mut() else {
                return Ok(value);
            };
            let (tok, pos) = lx.next_tok()?;
            match frame {
                Frame::Tuple(items) => {
                    items.push(value);
                    match tok {
                        Tok::Punct(",") => break,
                        Tok::Punct("}") => {
                            let Some(Frame::Tuple(items)) = stack.pop() else { unreachable!() };
                            value = Term::Tuple(items);
                        }
                        t => return Err(ParseError::new(pos, ErrorKind::Unexpected(describe(&t)))),
                    }
                }
                Frame::List(items) => {
                    items.push(value);
                    match tok {
                        Tok::Punct(",") => break,
                        Tok::Punct("|") => {
                            let Some(Frame::List(items)) = stack.pop() else { unreachable!() };
                            stack.push(Frame::Tail(items));
                            break;
                        }
                        Tok::Punct("]") => {
                            let Some(Frame::List(items)) = stack.pop() else { unreachable!() };
                            value = Term::List(items);
                        }
                        t => return Err(ParseError::new(pos, ErrorKind::Unexpected(describe(&t)))),
                    }
                }
                Frame::Tail(_) => {
                    if tok != Tok::Punct("]") {
                        return Err(ParseError::new(pos, ErrorKind::Unexpected(describe(&tok))));
                    }
                    let Some(Frame::Tail(mut items)) = stack.pop() else { unreachable!() };
                    value = match value {
                        Term::List(more) => {
                            items.extend(more);
                            Term::List(items)
                        }
                        Term::Improper(more, tail) => {
                            items.extend(more);
                            Term::Improper(items, tail)
                        }
                        other => Term::Improper(items, Box::new(other)),
                    };
                }
            }
        }
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Atom(a) => format!("atom {a}"),
        Tok::Var(v) => format!("variable {v}"),
        Tok::Int(i) => format!("integer {i}"),
        Tok::Float(v) => format!("float {v}"),
        Tok::Str(_) => "string".into(),
        Tok::Punct(p) => format!("'{p}'"),
        Tok::Dot => "'.'".into(),
        Tok::Eof => "end of input".into(),
    }
}

struct BitBuf {
    bytes: Vec<u8>,
    bits: usize,
}

impl BitBuf {
    fn push_bits(&mut self, value: &BigInt, size: usize) {
        for i in (0..size).rev() {
            let bit = value.bit(i as u64);
            if self.bits.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if bit {
                let idx = self.bits / 8;
                self.bytes[idx] |= 0x80 >> (self.bits % 8);
            }
            self.bits += 1;
        }
    }
}

fn read_binary(lx: &mut Lexer<'_>, open: Pos) -> Result<Term, ParseError> {
    let mut buf = BitBuf {
        bytes: Vec::new(),
        bits: 0,
    };
    if lx.peek()?.0 == Tok::Punct(">>") {
        lx.next_tok()?;
        return Ok(Term::Bin {
            bytes: Vec::new(),
            bits: 0,
        });
    }
    loop {
        let (tok, pos) = lx.next_tok()?;
        match tok {
            Tok::Str(s) => {
                for b in s {
                    buf.push_bits(&BigInt::from(b), 8);
                }
            }
            Tok::Int(_) | Tok::Punct("-") => {
                let value = match tok {
                    Tok::Int(i) => i,
                    _ => match lx.next_tok()? {
                        (Tok::Int(i), _) => -i,
                        (t, p) => {
                            return Err(ParseError::new(p, ErrorKind::BadSegment(describe(&t))))
                        }
                    },
                };
                let size = if lx.peek()?.0 == Tok::Punct(":") {
                    lx.next_tok()?;
                    match lx.next_tok()? {
                        (Tok::Int(n), p) => n
                            .to_usize()
                            .ok_or_else(|| ParseError::new(p, ErrorKind::BadSegment(n.to_string())))?,
                        (t, p) => {
                            return Err(ParseError::new(p, ErrorKind::BadSegment(describe(&t))))
                        }
                    }
                } else {
                    8
                };
                buf.push_bits(&value, size);
            }
            Tok::Eof => return Err(ParseError::new(open, ErrorKind::UnterminatedBinary)),
            t => return Err(ParseError::new(pos, ErrorKind::BadSegment(describe(&t)))),
        }
        match lx.next_tok()? {
            (Tok::Punct(","), _) => continue,
            (Tok::Punct(">>"), _) => break,
            (Tok::Eof, _) => return Err(ParseError::new(open, ErrorKind::UnterminatedBinary)),
            (t, p) => return Err(ParseError::new(p, ErrorKind::Unexpected(describe(&t)))),
        }
    }
    Ok(Term::Bin {
        bytes: buf.bytes,
        bits: buf.bits,
    })
}

/// One dot-terminated form and where it started.
#[derive(Debug, Clone, PartialEq)]
pub struct Form {
    pub term: Term,
    pub pos: Pos,
}

/// Reads a sequence of dot-terminated forms.
pub fn parse_forms(text: &str) -> Result<Vec<Form>, ParseError> {
    let mut lx = Lexer::new(text);
    let mut forms = Vec::new();
    loop {
        let pos = match lx.peek()? {
            (Tok::Eof, _) => return Ok(forms),
            (_, p) => *p,
        };
        let term = read_term(&mut lx)?;
        match lx.next_tok()? {
            (Tok::Dot, _) => forms.push(Form { term, pos }),
            (Tok::Eof, p) => return Err(ParseError::new(p, ErrorKind::MissingDot)),
            (t, p) => return Err(ParseError::new(p, ErrorKind::Unexpected(describe(&t)))),
        }
    }
}

/// Like [`parse_forms`] but drops positions.
pub fn parse_terms(text: &str) -> Result<Vec<Term>, ParseError> {
    Ok(parse_forms(text)?.into_iter().map(|f| f.term).collect())
}

/// Reads exactly one term; a trailing dot is optional.
pub fn parse_term(text: &str) -> Result<Term, ParseError> {
    let mut lx = Lexer::new(text);
    let t = read_term(&mut lx)?;
    match lx.next_tok()? {
        (Tok::Eof, _) => Ok(t),
        (Tok::Dot, _) => match lx.next_tok()? {
            (Tok::Eof, _) => Ok(t),
            (tok, p) => Err(ParseError::new(p, ErrorKind::Unexpected(describe(&tok)))),
        },
        (tok, p) => Err(ParseError::new(p, ErrorKind::Unexpected(describe(&tok)))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(text: &str) -> Term {
        let forms = parse_terms(text).unwrap();
        assert_eq!(forms.len(), 1);
        forms.into_iter().next().unwrap()
    }

    #[test]
    fn label_form() {
        assert_eq!(one("{label,2}."), Term::tuple(vec![Term::atom("label"), Term::int(2)]));
        assert_eq!(print_form(&one("{label,2}.")), "{label,2}.\n");
    }

    #[test]
    fn empty_list() {
        assert_eq!(one("[]."), Term::nil());
        assert_eq!(one("[ ]."), Term::nil());
    }

    #[test]
    fn move_literal_binary() {
        let t = one("{move,{literal,<<3,4,5>>},{x,0}}.");
        assert_eq!(
            t,
            Term::tuple(vec![
                Term::atom("move"),
                Term::tuple(vec![Term::atom("literal"), Term::binary(&[3, 4, 5])]),
                Term::tuple(vec![Term::atom("x"), Term::int(0)]),
            ])
        );
        assert_eq!(print_form(&Term::binary(&[3, 4, 5])), "<<3,4,5>>.\n");
    }

    #[test]
    fn quoting() {
        assert_eq!(print_form(&Term::atom("Mod Name")), "'Mod Name'.\n");
        assert_eq!(print_form(&Term::atom("try")), "'try'.\n");
        assert_eq!(print_form(&Term::atom("+")), "'+'.\n");
        assert_eq!(print_form(&Term::atom("it's")), "'it\\'s'.\n");
        assert_eq!(one("'Mod Name'."), Term::atom("Mod Name"));
        assert_eq!(one("'a\\nb'."), Term::atom("a\nb"));
    }

    #[test]
    fn strings_are_byte_lists() {
        assert_eq!(one("\"ab\"."), Term::List(vec![Term::int(97), Term::int(98)]));
        assert_eq!(Term::string("hi").to_string(), "\"hi\"");
        assert_eq!(Term::List(vec![Term::int(1), Term::int(2)]).to_string(), "[1,2]");
        assert_eq!(one("\"a\\\"b\".").to_string(), "\"a\\\"b\"");
    }

    #[test]
    fn floats() {
        assert_eq!(format_float(1.0), "1.0");
        assert_eq!(format_float(0.1), "0.1");
        assert_eq!(format_float(1e-7), "1.0e-7");
        assert_eq!(one("1.0e-7."), Term::Float(1e-7));
        assert_eq!(one("-2.5."), Term::Float(-2.5));
    }

    #[test]
    fn numbers() {
        assert_eq!(one("-5."), Term::int(-5));
        assert_eq!(one("16#ff."), Term::int(255));
        assert_eq!(one("$a."), Term::int(97));
        let big = one("123456789012345678901234567890.");
        assert_eq!(big.to_string(), "123456789012345678901234567890");
    }

    #[test]
    fn bitstrings() {
        let t = one("<<1,5:3>>.");
        assert_eq!(
            t,
            Term::Bin {
                bytes: vec![1, 0b1010_0000],
                bits: 11
            }
        );
        assert_eq!(t.to_string(), "<<1,5:3>>");
        assert_eq!(one("<<\"ab\">>."), Term::binary(b"ab"));
        assert_eq!(one("<<>>.").to_string(), "<<>>");
    }

    #[test]
    fn improper_lists() {
        let t = one("[a|b].");
        assert_eq!(t, Term::Improper(vec![Term::atom("a")], Box::new(Term::atom("b"))));
        assert_eq!(t.to_string(), "[a|b]");
        assert_eq!(one("[a|[b]]."), Term::List(vec![Term::atom("a"), Term::atom("b")]));
    }

    #[test]
    fn comments_and_positions() {
        let forms = parse_forms("% header\n{a}.\n  {b}. % trailing\n").unwrap();
        assert_eq!(forms.len(), 2);
        assert_eq!(forms[1].pos, Pos { line: 3, col: 3 });
    }

    #[test]
    fn errors_report_position() {
        let e = parse_forms("{a,\n  #}.").unwrap_err();
        assert_eq!(e.kind, ErrorKind::BadChar('#'));
        assert_eq!(e.pos, Pos { line: 2, col: 3 });
        assert_eq!(parse_forms("\"abc").unwrap_err().kind, ErrorKind::UnterminatedString);
        assert_eq!(parse_forms("<<1,2").unwrap_err().kind, ErrorKind::UnterminatedBinary);
        assert_eq!(parse_forms("{a}").unwrap_err().kind, ErrorKind::MissingDot);
        assert!(matches!(parse_forms("{a].").unwrap_err().kind, ErrorKind::Unexpected(_)));
    }

    #[test]
    fn depth_limit() {
        let deep = "[".repeat(MAX_DEPTH + 1) + &"]".repeat(MAX_DEPTH + 1) + ".";
        assert_eq!(parse_forms(&deep).unwrap_err().kind, ErrorKind::TooDeep);
        let ok = "{".repeat(50) + &"}".repeat(50) + ".";
        assert!(parse_forms(&ok).is_ok());
    }
}
