//! Pseudo-source trees with an Erlang-flavored printer and its parser.

use std::fmt::Write;

use thiserror::Error;

use crate::sterm::{parse_term, write_atom, Term};

/// Structured program tree. `If` arms are tried in order; structured code
/// ends every chain with a `true` arm.
#[derive(Debug, Clone, PartialEq)]
pub enum PseudoExpr {
    Seq(Vec<PseudoExpr>),
    If(Vec<(PseudoExpr, PseudoExpr)>),
    /// `while Cond do Body end`.
    Loop(Box<PseudoExpr>, Box<PseudoExpr>),
    /// Clauses `Pattern -> Body` and an optional `after Timeout -> Body`.
    Receive(Vec<(PseudoExpr, PseudoExpr)>, Option<Box<(PseudoExpr, PseudoExpr)>>),
    /// Optional module, function name, arguments.
    Call(Option<String>, String, Vec<PseudoExpr>),
    Primop(String, Vec<PseudoExpr>),
    Var(String),
    Lit(Term),
}

const INFIX: &[&str] = &["=", "+", "-", "*", "/", "=:=", "=/=", "==", "/=", "<", ">", "=<", ">=", "!"];
const KEYWORDS: &[&str] = &["if", "end", "while", "do", "receive", "after", "skip"];

/// First line of emitted pseudo-source files.
pub const HEADER: &str = "%% Erlang-flavored pseudo-source recovered from BEAM assembly; not compilable Erlang.";

impl PseudoExpr {
    pub fn var(name: &str) -> Self {
        PseudoExpr::Var(name.to_string())
    }

    pub fn lit(t: Term) -> Self {
        PseudoExpr::Lit(t)
    }

    pub fn atom(a: &str) -> Self {
        PseudoExpr::Lit(Term::atom(a))
    }

    pub fn prim(name: &str, args: Vec<PseudoExpr>) -> Self {
        PseudoExpr::Primop(name.to_string(), args)
    }

    pub fn assign(var: PseudoExpr, value: PseudoExpr) -> Self {
        Self::prim("=", vec![var, value])
    }

    pub fn skip() -> Self {
        PseudoExpr::Seq(Vec::new())
    }

    /// Flattens nested sequences and unwraps one-element sequences, at every
    /// depth. Printing and parsing preserve normalized trees exactly.
    pub fn normalized(&self) -> PseudoExpr {
        use PseudoExpr::*;
        let arms = |v: &[(PseudoExpr, PseudoExpr)]| v.iter().map(|(a, b)| (a.normalized(), b.normalized())).collect();
        match self {
            Seq(items) => {
                let mut out = Vec::new();
                for i in items {
                    match i.normalized() {
                        Seq(inner) if !inner.is_empty() => out.extend(inner),
                        other => out.push(other),
                    }
                }
                if out.len() == 1 {
                    out.pop().unwrap()
                } else {
                    Seq(out)
                }
            }
            If(v) => If(arms(v)),
            Loop(c, b) => Loop(Box::new(c.normalized()), Box::new(b.normalized())),
            Receive(v, after) => Receive(
                arms(v),
                after.as_ref().map(|a| Box::new((a.0.normalized(), a.1.normalized()))),
            ),
            Call(m, f, args) => Call(m.clone(), f.clone(), args.iter().map(Self::normalized).collect()),
            Primop(n, args) => Primop(n.clone(), args.iter().map(Self::normalized).collect()),
            Var(_) | Lit(_) => self.clone(),
        }
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        use PseudoExpr::*;
        1 + match self {
            Seq(v) | Call(_, _, v) | Primop(_, v) => v.iter().map(Self::size).sum(),
            If(v) => v.iter().map(|(a, b)| a.size() + b.size()).sum(),
            Loop(c, b) => c.size() + b.size(),
            Receive(v, after) => {
                v.iter().map(|(a, b)| a.size() + b.size()).sum::<usize>()
                    + after.as_ref().map_or(0, |a| a.0.size() + a.1.size())
            }
            Var(_) | Lit(_) => 0,
        }
    }

    /// Calls `f` on every node, parents first.
    pub fn visit(&self, f: &mut impl FnMut(&PseudoExpr)) {
        use PseudoExpr::*;
        f(self);
        match self {
            Seq(v) | Call(_, _, v) | Primop(_, v) => v.iter().for_each(|e| e.visit(f)),
            If(v) => v.iter().for_each(|(a, b)| {
                a.visit(f);
                b.visit(f)
            }),
            Loop(c, b) => {
                c.visit(f);
                b.visit(f)
            }
            Receive(v, after) => {
                v.iter().for_each(|(a, b)| {
                    a.visit(f);
                    b.visit(f)
                });
                if let Some(a) = after {
                    a.0.visit(f);
                    a.1.visit(f);
                }
            }
            Var(_) | Lit(_) => {}
        }
    }

    fn is_infix(&self) -> bool {
        matches!(self, PseudoExpr::Primop(n, a) if a.len() == 2 && INFIX.contains(&n.as_str()))
    }
}

fn atom_text(name: &str) -> String {
    if KEYWORDS.contains(&name) {
        return format!("'{name}'");
    }
    let mut s = String::new();
    write_atom(&mut s, name).unwrap();
    s
}

fn lit_text(t: &Term) -> String {
    match t {
        Term::Atom(a) => atom_text(a),
        Term::Int(i) if i.sign() == num_bigint::Sign::Minus => format!("({t})"),
        Term::Float(v) if v.is_sign_negative() => format!("({t})"),
        _ => t.to_string(),
    }
}

struct Printer {
    out: String,
}

impl Printer {
    fn nl(&mut self, depth: usize) {
        self.out.push('\n');
        for _ in 0..depth {
            self.out.push_str("    ");
        }
    }

    /// An expression in operand position.
    fn operand(&mut self, e: &PseudoExpr, depth: usize) {
        let wrap = e.is_infix() || matches!(e, PseudoExpr::Seq(v) if v.len() > 1);
        if wrap {
            self.out.push('(');
        }
        self.expr(e, depth);
        if wrap {
            self.out.push(')');
        }
    }

    /// An expression delimited by separators, where infix needs no parens.
    fn top(&mut self, e: &PseudoExpr, depth: usize) {
        if e.is_infix() {
            self.expr(e, depth);
        } else {
            self.operand(e, depth);
        }
    }

    fn args(&mut self, args: &[PseudoExpr], depth: usize) {
        self.out.push('(');
        for (i, a) in args.iter().enumerate() {
            if i > 0 {
                self.out.push_str(", ");
            }
            self.operand(a, depth);
        }
        self.out.push(')');
    }

    fn arms(&mut self, arms: &[(PseudoExpr, PseudoExpr)], depth: usize) {
        for (i, (c, b)) in arms.iter().enumerate() {
            if i > 0 {
                self.out.push(';');
            }
            self.nl(depth + 1);
            self.top(c, depth + 1);
            self.out.push_str(" ->");
            self.nl(depth + 2);
            self.expr(b, depth + 2);
        }
    }

    fn expr(&mut self, e: &PseudoExpr, depth: usize) {
        use PseudoExpr::*;
        match e {
            Seq(items) if items.is_empty() => self.out.push_str("skip"),
            Seq(items) => {
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        self.out.push(',');
                        self.nl(depth);
                    }
                    match item {
                        Seq(v) if v.len() > 1 => self.expr(item, depth),
                        _ => self.top(item, depth),
                    }
                }
            }
            If(arms) => {
                self.out.push_str("if");
                self.arms(arms, depth);
                self.nl(depth);
                self.out.push_str("end");
            }
            Loop(c, b) => {
                self.out.push_str("while ");
                self.top(c, depth);
                self.out.push_str(" do");
                self.nl(depth + 1);
                self.expr(b, depth + 1);
                self.nl(depth);
                self.out.push_str("end");
            }
            Receive(clauses, after) => {
                self.out.push_str("receive");
                self.arms(clauses, depth);
                if let Some(a) = after {
                    self.nl(depth);
                    self.out.push_str("after ");
                    self.top(&a.0, depth);
                    self.out.push_str(" ->");
                    self.nl(depth + 1);
                    self.expr(&a.1, depth + 1);
                }
                self.nl(depth);
                self.out.push_str("end");
            }
            Call(m, f, args) => {
                if let Some(m) = m {
                    self.out.push_str(&atom_text(m));
                    self.out.push(':');
                }
                self.out.push_str(&atom_text(f));
                self.args(args, depth);
            }
            Primop(op, a) if op == "=" && a.len() == 2 => {
                self.operand(&a[0], depth);
                self.out.push_str(" = ");
                self.top(&a[1], depth);
            }
            Primop(op, a) if e.is_infix() => {
                self.operand(&a[0], depth);
                let _ = write!(self.out, " {op} ");
                self.operand(&a[1], depth);
            }
            Primop(op, a) => {
                self.out.push('#');
                self.out.push_str(&atom_text(op));
                self.args(a, depth);
            }
            Var(v) => self.out.push_str(v),
            Lit(t) => self.out.push_str(&lit_text(t)),
        }
    }
}

/// Renders a tree as pseudo-source text (no header line).
pub fn emit_pseudo_source(p: &PseudoExpr) -> String {
    let mut pr = Printer { out: String::new() };
    pr.expr(p, 0);
    pr.out
}

/// Renders a function: `name(X0, ..) ->` followed by the indented body.
pub fn emit_function(name: &str, arity: u32, body: &PseudoExpr) -> String {
    let mut pr = Printer { out: String::new() };
    pr.out.push_str(&atom_text(name));
    let params: Vec<String> = (0..arity).map(|i| format!("X{i}")).collect();
    let _ = write!(pr.out, "({}) ->", params.join(", "));
    pr.nl(1);
    pr.expr(body, 1);
    pr.out.push_str(".\n");
    pr.out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("pseudo-source {line}:{col}: {msg}")]
pub struct PseudoParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Var(String),
    /// Atom name and whether it was quoted.
    Atom(String, bool),
    Lit(Term),
    Punct(&'static str),
    Eof,
}

const PUNCT: &[&str] = &[
    "=:=", "=/=", "->", "==", "=<", "/=", ">=", "=", "+", "-", "*", "/", "<", ">", "!", "(", ")", ",", ";", ":",
    "#", ".",
];

struct Lexer<'a> {
    src: &'a str,
    at: usize,
}

impl<'a> Lexer<'a> {
    fn pos(&self, at: usize) -> (usize, usize) {
        let before = &self.src[..at];
        let line = before.matches('\n').count() + 1;
        let col = at - before.rfind('\n').map_or(0, |i| i + 1) + 1;
        (line, col)
    }

    fn err(&self, at: usize, msg: impl Into<String>) -> PseudoParseError {
        let (line, col) = self.pos(at);
        PseudoParseError {
            line,
            col,
            msg: msg.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.at..]
    }

    fn skip_trivia(&mut self) {
        loop {
            let r = self.rest();
            let t = r.trim_start();
            self.at += r.len() - t.len();
            if t.starts_with('%') {
                self.at += t.find('\n').unwrap_or(t.len());
            } else {
                return;
            }
        }
    }

    /// Length of a bracketed literal or string starting here.
    fn literal_extent(&self) -> Option<usize> {
        let b = self.rest().as_bytes();
        let mut depth = 0i32;
        let mut i = 0;
        while i < b.len() {
            match b[i] {
                q @ (b'"' | b'\'') => {
                    i += 1;
                    while i < b.len() && b[i] != q {
                        if b[i] == b'\\' {
                            i += 1;
                        }
                        i += 1;
                    }
                }
                b'{' | b'[' => depth += 1,
                b'}' | b']' => depth -= 1,
                b'<' if b.get(i + 1) == Some(&b'<') => {
                    depth += 1;
                    i += 1;
                }
                b'>' if b.get(i + 1) == Some(&b'>') && depth > 0 => {
                    depth -= 1;
                    i += 1;
                }
                _ => {}
            }
            i += 1;
            if depth == 0 {
                return Some(i);
            }
        }
        None
    }

    fn number_extent(&self) -> usize {
        let b = self.rest().as_bytes();
        let digits = |mut i: usize, radix: bool| {
            while i < b.len() && (b[i].is_ascii_digit() || (radix && b[i].is_ascii_alphanumeric())) {
                i += 1;
            }
            i
        };
        let mut i = digits(0, false);
        if b.get(i) == Some(&b'#') {
            return digits(i + 1, true);
        }
        if b.get(i) == Some(&b'.') && b.get(i + 1).is_some_and(u8::is_ascii_digit) {
            i = digits(i + 1, false);
            if matches!(b.get(i), Some(b'e' | b'E')) {
                let j = if matches!(b.get(i + 1), Some(b'+' | b'-')) { i + 2 } else { i + 1 };
                if b.get(j).is_some_and(u8::is_ascii_digit) {
                    i = digits(j, false);
                }
            }
        }
        i
    }

    fn term(&mut self, len: usize) -> Result<Term, PseudoParseError> {
        let start = self.at;
        let text = &self.src[start..start + len];
        self.at += len;
        parse_term(text).map_err(|e| self.err(start, e.to_string()))
    }

    fn next(&mut self) -> Result<(Tok, usize), PseudoParseError> {
        self.skip_trivia();
        let start = self.at;
        let r = self.rest();
        let Some(c) = r.chars().next() else {
            return Ok((Tok::Eof, start));
        };
        let word = |r: &str| r.find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_' || ch == '@')).unwrap_or(r.len());
        let tok = if c.is_ascii_uppercase() || c == '_' {
            let n = word(r);
            self.at += n;
            Tok::Var(r[..n].to_string())
        } else if c.is_ascii_lowercase() {
            let n = word(r);
            self.at += n;
            Tok::Atom(r[..n].to_string(), false)
        } else if c == '\'' {
            let n = self.literal_extent().ok_or_else(|| self.err(start, "unterminated atom"))?;
            match self.term(n)? {
                Term::Atom(a) => Tok::Atom(a, true),
                _ => return Err(self.err(start, "bad quoted atom")),
            }
        } else if c.is_ascii_digit() {
            let n = self.number_extent();
            Tok::Lit(self.term(n)?)
        } else if c == '"' || c == '{' || c == '[' || r.starts_with("<<") {
            let n = self.literal_extent().ok_or_else(|| self.err(start, "unterminated literal"))?;
            Tok::Lit(self.term(n)?)
        } else if let Some(p) = PUNCT.iter().find(|p| r.starts_with(**p)) {
            self.at += p.len();
            Tok::Punct(p)
        } else {
            return Err(self.err(start, format!("unexpected character {c:?}")));
        };
        Ok((tok, start))
    }
}

struct Parser<'a> {
    lx: Lexer<'a>,
    tok: Tok,
    at: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Result<Self, PseudoParseError> {
        let mut lx = Lexer { src: text, at: 0 };
        let (tok, at) = lx.next()?;
        Ok(Parser { lx, tok, at })
    }

    fn bump(&mut self) -> Result<Tok, PseudoParseError> {
        let (tok, at) = self.lx.next()?;
        self.at = at;
        Ok(std::mem::replace(&mut self.tok, tok))
    }

    fn err(&self, msg: impl Into<String>) -> PseudoParseError {
        self.lx.err(self.at, msg)
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(&self.tok, Tok::Punct(q) if *q == p)
    }

    fn is_kw(&self, k: &str) -> bool {
        matches!(&self.tok, Tok::Atom(a, false) if a == k)
    }

    fn expect_punct(&mut self, p: &str) -> Result<(), PseudoParseError> {
        if self.is_punct(p) {
            self.bump()?;
            Ok(())
        } else {
            Err(self.err(format!("expected {p:?}, found {:?}", self.tok)))
        }
    }

    fn expect_kw(&mut self, k: &str) -> Result<(), PseudoParseError> {
        if self.is_kw(k) {
            self.bump()?;
            Ok(())
        } else {
            Err(self.err(format!("expected {k}, found {:?}", self.tok)))
        }
    }

    fn body(&mut self) -> Result<PseudoExpr, PseudoParseError> {
        let mut items = vec![self.expr()?];
        while self.is_punct(",") {
            self.bump()?;
            items.push(self.expr()?);
        }
        Ok(if items.len() == 1 { items.pop().unwrap() } else { PseudoExpr::Seq(items) })
    }

    fn expr(&mut self) -> Result<PseudoExpr, PseudoParseError> {
        let lhs = self.unary()?;
        let op = match &self.tok {
            Tok::Punct(p) if INFIX.contains(p) => *p,
            _ => return Ok(lhs),
        };
        self.bump()?;
        let rhs = if op == "=" { self.expr()? } else { self.unary()? };
        Ok(PseudoExpr::prim(op, vec![lhs, rhs]))
    }

    fn arms(&mut self, stop: &[&str]) -> Result<Vec<(PseudoExpr, PseudoExpr)>, PseudoParseError> {
        let mut arms = Vec::new();
        if stop.iter().any(|k| self.is_kw(k)) {
            return Ok(arms);
        }
        loop {
            let c = self.expr()?;
            self.expect_punct("->")?;
            let b = self.body()?;
            arms.push((c, b));
            if self.is_punct(";") {
                self.bump()?;
            } else {
                return Ok(arms);
            }
        }
    }

    fn args(&mut self) -> Result<Vec<PseudoExpr>, PseudoParseError> {
        self.expect_punct("(")?;
        let mut out = Vec::new();
        if self.is_punct(")") {
            self.bump()?;
            return Ok(out);
        }
        loop {
            out.push(self.expr()?);
            if self.is_punct(",") {
                self.bump()?;
            } else {
                self.expect_punct(")")?;
                return Ok(out);
            }
        }
    }

    fn name(&mut self) -> Result<String, PseudoParseError> {
        match self.bump()? {
            Tok::Atom(a, _) => Ok(a),
            t => Err(self.err(format!("expected an atom, found {t:?}"))),
        }
    }

    fn unary(&mut self) -> Result<PseudoExpr, PseudoParseError> {
        use PseudoExpr::*;
        if let Tok::Atom(k, false) = &self.tok {
            match k.as_str() {
                "skip" => {
                    self.bump()?;
                    return Ok(Seq(Vec::new()));
                }
                "if" => {
                    self.bump()?;
                    let arms = self.arms(&["end"])?;
                    self.expect_kw("end")?;
                    return Ok(If(arms));
                }
                "while" => {
                    self.bump()?;
                    let c = self.expr()?;
                    self.expect_kw("do")?;
                    let b = self.body()?;
                    self.expect_kw("end")?;
                    return Ok(Loop(Box::new(c), Box::new(b)));
                }
                "receive" => {
                    self.bump()?;
                    let clauses = self.arms(&["after", "end"])?;
                    let after = if self.is_kw("after") {
                        self.bump()?;
                        let t = self.expr()?;
                        self.expect_punct("->")?;
                        Some(Box::new((t, self.body()?)))
                    } else {
                        None
                    };
                    self.expect_kw("end")?;
                    return Ok(Receive(clauses, after));
                }
                "end" | "do" | "after" => return Err(self.err(format!("unexpected {k}"))),
                _ => {}
            }
        }
        match self.bump()? {
            Tok::Punct("(") => {
                let e = self.body()?;
                self.expect_punct(")")?;
                Ok(e)
            }
            Tok::Punct("-") => match self.bump()? {
                Tok::Lit(Term::Int(i)) => Ok(Lit(Term::Int(-i))),
                Tok::Lit(Term::Float(v)) => Ok(Lit(Term::Float(-v))),
                t => Err(self.err(format!("expected a number after '-', found {t:?}"))),
            },
            Tok::Punct("#") => {
                let op = self.name()?;
                Ok(Primop(op, self.args()?))
            }
            Tok::Var(v) => Ok(Var(v)),
            Tok::Lit(t) => Ok(Lit(t)),
            Tok::Atom(a, _) => {
                if self.is_punct(":") {
                    self.bump()?;
                    let f = self.name()?;
                    Ok(Call(Some(a), f, self.args()?))
                } else if self.is_punct("(") {
                    Ok(Call(None, a, self.args()?))
                } else {
                    Ok(Lit(Term::Atom(a)))
                }
            }
            t => Err(self.err(format!("unexpected {t:?}"))),
        }
    }
}

/// Parses pseudo-source text produced by [`emit_pseudo_source`].
pub fn parse_pseudo(text: &str) -> Result<PseudoExpr, PseudoParseError> {
    let mut p = Parser::new(text)?;
    let e = p.body()?;
    if p.tok != Tok::Eof {
        return Err(p.err(format!("trailing {:?}", p.tok)));
    }
    Ok(e)
}

/// Parses a file of functions written by [`emit_function`]: a list of
/// `(name, arity, body)`.
pub fn parse_pseudo_functions(text: &str) -> Result<Vec<(String, u32, PseudoExpr)>, PseudoParseError> {
    let mut p = Parser::new(text)?;
    let mut out = Vec::new();
    while p.tok != Tok::Eof {
        let name = p.name()?;
        let params = p.args()?;
        if !params.iter().all(|a| matches!(a, PseudoExpr::Var(_))) {
            return Err(p.err("parameters must be variables"));
        }
        p.expect_punct("->")?;
        let body = p.body()?;
        p.expect_punct(".")?;
        out.push((name, params.len() as u32, body));
    }
    Ok(out)
}
