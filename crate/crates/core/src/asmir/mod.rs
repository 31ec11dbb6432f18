//! Typed instruction-level IR for BEAM assembly and the converters between
//! terms and the IR.
//!
//! Two input shapes are accepted by [`decode_module`]: the five-element
//! module tuple handed to `compile:forms(_, [from_asm])`, and the form
//! sequence of a `.S` file (`{module,_}`, `{exports,_}`, `{attributes,_}`,
//! `{labels,_}`, then `{function,...}` headers each followed by their
//! instructions).

pub mod effects;
pub mod opcodes;
mod spans;

use std::collections::BTreeSet;
use std::fmt;

use num_bigint::BigInt;
use num_traits::ToPrimitive;
use thiserror::Error;

use crate::sterm::{self, Term};
pub use opcodes::Class;
pub use spans::{construction_spans, Span, SpanDiagnostic, SpanKind, SpanSize};

/// Register file bound for x registers and y slots.
pub const MAX_REGISTER: u32 = 1024;

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    X(u32),
    Y(u32),
    /// `{f,N}`; 0 means "no fail path".
    Label(u32),
    Atom(String),
    Integer(BigInt),
    Literal(Term),
    Nil,
    ExtFunc {
        module: String,
        function: String,
        arity: u32,
    },
    /// Bare list, e.g. the argument list of `test` or `gc_bif`.
    List(Vec<Operand>),
    /// `{list,[...]}`, as used by `select_val` and `put_tuple2`.
    TaggedList(Vec<Operand>),
    /// Bare integer: counts, sizes, indices.
    Num(BigInt),
    /// Bare atom: test kinds, BIF names, `no_fail`.
    Word(String),
    /// Kept verbatim (`{field_flags,_}`, `{string,_}`, `{float,_}`, ...).
    Raw(Term),
}

impl Operand {
    pub fn x(n: u32) -> Operand {
        Operand::X(n)
    }
    pub fn y(n: u32) -> Operand {
        Operand::Y(n)
    }
    pub fn int<I: Into<BigInt>>(v: I) -> Operand {
        Operand::Integer(v.into())
    }
    pub fn num<I: Into<BigInt>>(v: I) -> Operand {
        Operand::Num(v.into())
    }
    pub fn atom(a: &str) -> Operand {
        Operand::Atom(a.to_string())
    }
    pub fn word(a: &str) -> Operand {
        Operand::Word(a.to_string())
    }
    pub fn ext(module: &str, function: &str, arity: u32) -> Operand {
        Operand::ExtFunc {
            module: module.into(),
            function: function.into(),
            arity,
        }
    }

    pub fn as_label(&self) -> Option<u32> {
        match self {
            Operand::Label(l) => Some(*l),
            _ => None,
        }
    }

    /// Integer value of a bare or tagged integer operand.
    pub fn as_u64(&self) -> Option<u64> {
        match self {
            Operand::Num(n) | Operand::Integer(n) => n.to_u64(),
            _ => None,
        }
    }

    pub fn as_reg(&self) -> Option<Reg> {
        match self {
            Operand::X(n) => Some(Reg::X(*n)),
            Operand::Y(n) => Some(Reg::Y(*n)),
            _ => None,
        }
    }

    /// Registers read when this operand is used as a source, including
    /// registers nested in lists.
    pub fn regs(&self, out: &mut Vec<Reg>) {
        match self {
            Operand::X(n) => out.push(Reg::X(*n)),
            Operand::Y(n) => out.push(Reg::Y(*n)),
            Operand::List(v) | Operand::TaggedList(v) => v.iter().for_each(|o| o.regs(out)),
            _ => {}
        }
    }

    pub fn to_term(&self) -> Term {
        let tag = |t: &str, v: Term| Term::Tuple(vec![Term::atom(t), v]);
        match self {
            Operand::X(n) => tag("x", Term::int(*n)),
            Operand::Y(n) => tag("y", Term::int(*n)),
            Operand::Label(n) => tag("f", Term::int(*n)),
            Operand::Atom(a) => tag("atom", Term::atom(a)),
            Operand::Integer(i) => tag("integer", Term::Int(i.clone())),
            Operand::Literal(t) => tag("literal", t.clone()),
            Operand::Nil => Term::atom("nil"),
            Operand::ExtFunc {
                module,
                function,
                arity,
            } => Term::Tuple(vec![
                Term::atom("extfunc"),
                Term::atom(module),
                Term::atom(function),
                Term::int(*arity),
            ]),
            Operand::List(v) => Term::List(v.iter().map(Operand::to_term).collect()),
            Operand::TaggedList(v) => tag("list", Term::List(v.iter().map(Operand::to_term).collect())),
            Operand::Num(n) => Term::Int(n.clone()),
            Operand::Word(w) => Term::atom(w),
            Operand::Raw(t) => t.clone(),
        }
    }

    pub fn from_term(t: &Term) -> Result<Operand, AsmError> {
        let bad = || AsmError::BadOperand(t.to_string());
        let small = |v: &Term| -> Result<u32, AsmError> {
            v.as_int().and_then(|i| i.to_u32()).ok_or_else(bad)
        };
        Ok(match t {
            Term::Atom(a) if a == "nil" => Operand::Nil,
            Term::Atom(a) => Operand::Word(a.clone()),
            Term::Int(i) => Operand::Num(i.clone()),
            Term::List(items) => {
                Operand::List(items.iter().map(Operand::from_term).collect::<Result<_, _>>()?)
            }
            Term::Tuple(items) => match items.as_slice() {
                [Term::Atom(tag), v] => match tag.as_str() {
                    "x" | "y" => {
                        let n = small(v)?;
                        if n >= MAX_REGISTER {
                            return Err(bad());
                        }
                        if tag == "x" {
                            Operand::X(n)
                        } else {
                            Operand::Y(n)
                        }
                    }
                    "f" => Operand::Label(small(v)?),
                    "atom" => Operand::Atom(v.as_atom().ok_or_else(bad)?.to_string()),
                    "integer" => Operand::Integer(v.as_int().ok_or_else(bad)?.clone()),
                    "literal" => Operand::Literal(v.clone()),
                    "list" => match v {
                        Term::List(items) => Operand::TaggedList(
                            items.iter().map(Operand::from_term).collect::<Result<_, _>>()?,
                        ),
                        _ => Operand::Raw(t.clone()),
                    },
                    _ => Operand::Raw(t.clone()),
                },
                [Term::Atom(tag), Term::Atom(m), Term::Atom(f), a] if tag == "extfunc" => {
                    let arity = small(a)?;
                    if arity > 255 {
                        return Err(bad());
                    }
                    Operand::ExtFunc {
                        module: m.clone(),
                        function: f.clone(),
                        arity,
                    }
                }
                _ => Operand::Raw(t.clone()),
            },
            _ => Operand::Raw(t.clone()),
        })
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_term())
    }
}

/// A register: x register or y slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reg {
    X(u32),
    Y(u32),
}

impl Reg {
    pub fn operand(self) -> Operand {
        match self {
            Reg::X(n) => Operand::X(n),
            Reg::Y(n) => Operand::Y(n),
        }
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reg::X(n) => write!(f, "{{x,{n}}}"),
            Reg::Y(n) => write!(f, "{{y,{n}}}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub opcode: String,
    pub operands: Vec<Operand>,
}

impl Instruction {
    pub fn new(opcode: &str, operands: Vec<Operand>) -> Self {
        Instruction {
            opcode: opcode.to_string(),
            operands,
        }
    }

    pub fn label(n: u32) -> Self {
        Self::new("label", vec![Operand::Num(n.into())])
    }

    pub fn mov(src: Operand, dst: Operand) -> Self {
        Self::new("move", vec![src, dst])
    }

    pub fn jump(l: u32) -> Self {
        Self::new("jump", vec![Operand::Label(l)])
    }

    pub fn test(kind: &str, fail: u32, args: Vec<Operand>) -> Self {
        Self::new("test", vec![Operand::word(kind), Operand::Label(fail), Operand::List(args)])
    }

    pub fn gc_bif(name: &str, live: u32, args: Vec<Operand>, dst: Operand) -> Self {
        Self::new(
            "gc_bif",
            vec![Operand::word(name), Operand::Label(0), Operand::num(live), Operand::List(args), dst],
        )
    }

    pub fn bif(name: &str, args: Vec<Operand>, dst: Operand) -> Self {
        Self::new("bif", vec![Operand::word(name), Operand::Label(0), Operand::List(args), dst])
    }

    pub fn simple(opcode: &str) -> Self {
        Self::new(opcode, Vec::new())
    }

    pub fn info(&self) -> Option<&'static opcodes::OpcodeInfo> {
        opcodes::lookup(&self.opcode)
    }

    /// Class from the opcode table; unknown opcodes are `Plain`.
    pub fn class(&self) -> Class {
        self.info().map_or(Class::Plain, |i| i.class)
    }

    pub fn is_known(&self) -> bool {
        self.info().is_some()
    }

    pub fn is(&self, opcode: &str) -> bool {
        self.opcode == opcode
    }

    /// Label id of a `label` instruction.
    pub fn label_id(&self) -> Option<u32> {
        if self.opcode == "label" {
            self.operands.first().and_then(Operand::as_u64).map(|v| v as u32)
        } else {
            None
        }
    }

    /// Every `{f,L}` operand with L > 0 (including those nested in lists).
    pub fn label_refs(&self) -> Vec<u32> {
        fn walk(o: &Operand, out: &mut Vec<u32>) {
            match o {
                Operand::Label(l) if *l > 0 => out.push(*l),
                Operand::List(v) | Operand::TaggedList(v) => v.iter().for_each(|o| walk(o, out)),
                _ => {}
            }
        }
        let mut out = Vec::new();
        if self.opcode != "label" {
            self.operands.iter().for_each(|o| walk(o, &mut out));
        }
        out
    }

    pub fn to_term(&self) -> Term {
        if self.operands.is_empty() {
            return Term::atom(&self.opcode);
        }
        let mut items = vec![Term::atom(&self.opcode)];
        items.extend(self.operands.iter().map(Operand::to_term));
        Term::Tuple(items)
    }

    pub fn from_term(t: &Term) -> Result<Instruction, AsmError> {
        let (opcode, args): (&str, &[Term]) = match t {
            Term::Atom(a) => (a, &[]),
            Term::Tuple(items) => match items.split_first() {
                Some((Term::Atom(a), rest)) => (a, rest),
                _ => return Err(AsmError::BadInstruction(t.to_string())),
            },
            _ => return Err(AsmError::BadInstruction(t.to_string())),
        };
        let info = opcodes::lookup(opcode);
        if let Some(info) = info {
            if !info.arities.contains(&args.len()) {
                return Err(AsmError::ArityMismatch {
                    opcode: opcode.to_string(),
                    expected: info.arities.to_vec(),
                    found: args.len(),
                });
            }
        }
        let operands = if info.is_some() {
            args.iter().map(Operand::from_term).collect::<Result<_, _>>()?
        } else {
            // Unknown opcodes keep their operands verbatim.
            args.iter().cloned().map(Operand::Raw).collect()
        };
        Ok(Instruction {
            opcode: opcode.to_string(),
            operands,
        })
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_term())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionDef {
    pub name: String,
    pub arity: u32,
    pub entry: u32,
    pub body: Vec<Instruction>,
}

impl FunctionDef {
    /// Index of the `label` instruction defining `l`.
    pub fn label_index(&self, l: u32) -> Option<usize> {
        self.body.iter().position(|i| i.label_id() == Some(l))
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.body.iter().filter_map(Instruction::label_id)
    }

    /// Highest register index mentioned anywhere in the body, per kind.
    pub fn max_regs(&self) -> (Option<u32>, Option<u32>) {
        let mut regs = Vec::new();
        for ins in &self.body {
            ins.operands.iter().for_each(|o| o.regs(&mut regs));
        }
        let mx = regs.iter().filter_map(|r| match r {
            Reg::X(n) => Some(*n),
            _ => None,
        });
        let my = regs.iter().filter_map(|r| match r {
            Reg::Y(n) => Some(*n),
            _ => None,
        });
        (mx.max(), my.max())
    }

    fn check(&self) -> Result<(), AsmError> {
        let bad = |why: &str| AsmError::MalformedFunction {
            function: format!("{}/{}", self.name, self.arity),
            reason: why.to_string(),
        };
        if self.body.first().and_then(Instruction::label_id).is_none() {
            return Err(bad("first instruction is not a label"));
        }
        let entry_idx = match self.body.iter().filter(|i| i.label_id() == Some(self.entry)).count() {
            1 => self.label_index(self.entry).unwrap(),
            0 => return Err(bad("entry label not defined")),
            _ => return Err(bad("entry label defined twice")),
        };
        if !self.body[..entry_idx].iter().any(|i| i.is("func_info")) {
            return Err(bad("no func_info before the entry label"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleAsm {
    pub name: String,
    pub exports: Vec<(String, u32)>,
    pub attributes: Vec<Term>,
    pub functions: Vec<FunctionDef>,
    pub label_count: u32,
    /// Unrecognized header forms of a `.S` file, kept verbatim.
    pub annotations: Vec<Term>,
}

impl ModuleAsm {
    pub fn empty(name: &str) -> Self {
        ModuleAsm {
            name: name.to_string(),
            exports: Vec::new(),
            attributes: Vec::new(),
            functions: Vec::new(),
            label_count: 0,
            annotations: Vec::new(),
        }
    }

    pub fn function(&self, name: &str, arity: u32) -> Option<&FunctionDef> {
        self.functions.iter().find(|f| f.name == name && f.arity == arity)
    }

    pub fn function_mut(&mut self, name: &str, arity: u32) -> Option<&mut FunctionDef> {
        self.functions.iter_mut().find(|f| f.name == name && f.arity == arity)
    }

    pub fn max_label(&self) -> u32 {
        self.functions.iter().flat_map(|f| f.labels()).max().unwrap_or(0)
    }

    /// A label id not used anywhere in the module; bumps `label_count`.
    pub fn fresh_label(&mut self) -> u32 {
        let next = self.label_count.max(self.max_label() + 1);
        self.label_count = next + 1;
        next
    }

    pub fn is_exported(&self, name: &str, arity: u32) -> bool {
        self.exports.iter().any(|(n, a)| n == name && *a == arity)
    }

    fn refresh_label_count(&mut self) {
        let max = self.max_label();
        if max > 0 && self.label_count <= max {
            self.label_count = max + 1;
        }
    }

    fn check(&self) -> Result<(), AsmError> {
        let mut seen = BTreeSet::new();
        for f in &self.functions {
            f.check()?;
            for l in f.labels() {
                if !seen.insert(l) {
                    return Err(AsmError::DuplicateLabel(l));
                }
            }
        }
        for f in &self.functions {
            for ins in &f.body {
                if let Some(l) = ins.label_refs().into_iter().find(|l| !seen.contains(l)) {
                    return Err(AsmError::UndefinedLabel {
                        function: format!("{}/{}", f.name, f.arity),
                        label: l,
                    });
                }
            }
        }
        for (n, a) in &self.exports {
            if self.function(n, *a).is_none() {
                return Err(AsmError::UndefinedExport(format!("{n}/{a}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("malformed module: {0}")]
    MalformedModule(String),
    #[error("malformed instruction {0}")]
    BadInstruction(String),
    #[error("malformed operand {0}")]
    BadOperand(String),
    #[error("{opcode} takes {expected:?} operands, found {found}")]
    ArityMismatch {
        opcode: String,
        expected: Vec<usize>,
        found: usize,
    },
    #[error("label {0} defined more than once")]
    DuplicateLabel(u32),
    #[error("{function}: reference to undefined label {label}")]
    UndefinedLabel { function: String, label: u32 },
    #[error("export {0} has no definition")]
    UndefinedExport(String),
    #[error("{function}: {reason}")]
    MalformedFunction { function: String, reason: String },
    #[error(transparent)]
    Parse(#[from] sterm::ParseError),
}

fn atom_of(t: &Term, what: &str) -> Result<String, AsmError> {
    t.as_atom()
        .map(str::to_string)
        .ok_or_else(|| AsmError::MalformedModule(format!("{what}: expected atom, got {t}")))
}

fn u32_of(t: &Term, what: &str) -> Result<u32, AsmError> {
    t.as_int()
        .and_then(|i| i.to_u32())
        .ok_or_else(|| AsmError::MalformedModule(format!("{what}: expected integer, got {t}")))
}

fn decode_exports(t: &Term) -> Result<Vec<(String, u32)>, AsmError> {
    let items = t
        .as_list()
        .ok_or_else(|| AsmError::MalformedModule(format!("exports: expected list, got {t}")))?;
    items
        .iter()
        .map(|e| match e.as_tuple() {
            Some([n, a]) => Ok((atom_of(n, "export name")?, u32_of(a, "export arity")?)),
            _ => Err(AsmError::MalformedModule(format!("bad export {e}"))),
        })
        .collect()
}

fn decode_function_header(t: &Term) -> Option<Result<(String, u32, u32), AsmError>> {
    match t.as_tuple() {
        Some([Term::Atom(tag), n, a, e]) if tag == "function" => Some((|| {
            Ok((atom_of(n, "function name")?, u32_of(a, "arity")?, u32_of(e, "entry")?))
        })()),
        _ => None,
    }
}

/// Decodes either a single five-element module tuple or a `.S` form sequence.
pub fn decode_module(forms: &[Term]) -> Result<ModuleAsm, AsmError> {
    let mut m = match forms {
        [single] if single.as_tuple().is_some_and(|t| t.len() == 5 && !single.is_tagged("function")) => {
            decode_module_tuple(single)?
        }
        _ => decode_asm_forms(forms)?,
    };
    m.refresh_label_count();
    m.check()?;
    Ok(m)
}

/// Parses `.S` text and decodes it.
pub fn parse_module(text: &str) -> Result<ModuleAsm, AsmError> {
    decode_module(&sterm::parse_terms(text)?)
}

fn decode_module_tuple(t: &Term) -> Result<ModuleAsm, AsmError> {
    let Some([name, exports, attrs, funs, labels]) = t.as_tuple() else {
        return Err(AsmError::MalformedModule("expected a five-element tuple".into()));
    };
    let mut m = ModuleAsm::empty(&atom_of(name, "module name")?);
    m.exports = decode_exports(exports)?;
    m.attributes = attrs
        .as_list()
        .ok_or_else(|| AsmError::MalformedModule("attributes must be a list".into()))?
        .to_vec();
    m.label_count = u32_of(labels, "label count")?;
    let funs = funs
        .as_list()
        .ok_or_else(|| AsmError::MalformedModule("functions must be a list".into()))?;
    for f in funs {
        match f.as_tuple() {
            Some([Term::Atom(tag), n, a, e, Term::List(body)]) if tag == "function" => {
                m.functions.push(FunctionDef {
                    name: atom_of(n, "function name")?,
                    arity: u32_of(a, "arity")?,
                    entry: u32_of(e, "entry")?,
                    body: body.iter().map(Instruction::from_term).collect::<Result<_, _>>()?,
                });
            }
            _ => return Err(AsmError::MalformedModule(format!("bad function {f}"))),
        }
    }
    Ok(m)
}

fn decode_asm_forms(forms: &[Term]) -> Result<ModuleAsm, AsmError> {
    let mut m: Option<ModuleAsm> = None;
    let mut current: Option<FunctionDef> = None;
    for form in forms {
        if let Some(h) = decode_function_header(form) {
            let (name, arity, entry) = h?;
            let module = m
                .as_mut()
                .ok_or_else(|| AsmError::MalformedModule("function before {module,_}".into()))?;
            if let Some(f) = current.take() {
                module.functions.push(f);
            }
            current = Some(FunctionDef {
                name,
                arity,
                entry,
                body: Vec::new(),
            });
            continue;
        }
        if let Some(f) = current.as_mut() {
            f.body.push(Instruction::from_term(form)?);
            continue;
        }
        match form.as_tuple() {
            Some([Term::Atom(tag), v]) if tag == "module" => {
                if m.is_some() {
                    return Err(AsmError::MalformedModule("duplicate {module,_}".into()));
                }
                m = Some(ModuleAsm::empty(&atom_of(v, "module name")?));
            }
            Some([Term::Atom(tag), v]) if m.is_some() && tag == "exports" => {
                m.as_mut().unwrap().exports = decode_exports(v)?;
            }
            Some([Term::Atom(tag), Term::List(v)]) if m.is_some() && tag == "attributes" => {
                m.as_mut().unwrap().attributes = v.clone();
            }
            Some([Term::Atom(tag), v]) if m.is_some() && tag == "labels" => {
                m.as_mut().unwrap().label_count = u32_of(v, "label count")?;
            }
            _ => match m.as_mut() {
                Some(m) => m.annotations.push(form.clone()),
                None => return Err(AsmError::MalformedModule(format!("unexpected form {form}"))),
            },
        }
    }
    let mut m = m.ok_or_else(|| AsmError::MalformedModule("missing {module,_}".into()))?;
    if let Some(f) = current {
        m.functions.push(f);
    }
    Ok(m)
}

fn encode_exports(exports: &[(String, u32)]) -> Term {
    Term::List(
        exports
            .iter()
            .map(|(n, a)| Term::Tuple(vec![Term::atom(n), Term::int(*a)]))
            .collect(),
    )
}

fn refreshed(m: &ModuleAsm) -> u32 {
    let mut c = m.clone();
    c.refresh_label_count();
    c.label_count
}

/// The five-element module tuple.
pub fn encode_module(m: &ModuleAsm) -> Term {
    let funs = m
        .functions
        .iter()
        .map(|f| {
            Term::Tuple(vec![
                Term::atom("function"),
                Term::atom(&f.name),
                Term::int(f.arity),
                Term::int(f.entry),
                Term::List(f.body.iter().map(Instruction::to_term).collect()),
            ])
        })
        .collect();
    Term::Tuple(vec![
        Term::atom(&m.name),
        encode_exports(&m.exports),
        Term::List(m.attributes.clone()),
        Term::List(funs),
        Term::int(refreshed(m)),
    ])
}

/// The `.S` form sequence.
pub fn to_asm_forms(m: &ModuleAsm) -> Vec<Term> {
    let mut out = vec![
        Term::Tuple(vec![Term::atom("module"), Term::atom(&m.name)]),
        Term::Tuple(vec![Term::atom("exports"), encode_exports(&m.exports)]),
        Term::Tuple(vec![Term::atom("attributes"), Term::List(m.attributes.clone())]),
        Term::Tuple(vec![Term::atom("labels"), Term::int(refreshed(m))]),
    ];
    out.extend(m.annotations.iter().cloned());
    for f in &m.functions {
        out.push(Term::Tuple(vec![
            Term::atom("function"),
            Term::atom(&f.name),
            Term::int(f.arity),
            Term::int(f.entry),
        ]));
        out.extend(f.body.iter().map(Instruction::to_term));
    }
    out
}

/// Canonical `.S` text with the compiler's indentation.
pub fn print_module(m: &ModuleAsm) -> String {
    let mut s = String::new();
    for t in to_asm_forms(m) {
        if t.is_tagged("function") {
            s.push('\n');
            s.push_str(&sterm::print_form(&t));
        } else if t.is_tagged("label") {
            s.push_str("  ");
            s.push_str(&sterm::print_form(&t));
        } else if s.contains("{function,") {
            s.push_str("    ");
            s.push_str(&sterm::print_form(&t));
        } else {
            s.push_str(&sterm::print_form(&t));
        }
    }
    s
}
