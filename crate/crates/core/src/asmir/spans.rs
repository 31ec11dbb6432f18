//! Construction spans: the instructions that fill a tuple opened by
//! `put_tuple` or a binary opened by `bs_init2`/`bs_init_bits`.

use super::{opcodes, Class, FunctionDef, Instruction, Operand, Reg};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanKind {
    Tuple,
    Binary,
}

/// Where the declared size of a construction comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SpanSize {
    /// Elements for tuples, bits for binaries.
    Constant(u64),
    /// Size read from a register: the fill length is not statically known.
    Register(Operand),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Span {
    pub kind: SpanKind,
    pub opener: usize,
    /// Indices of the filling instructions, in order.
    pub elements: Vec<usize>,
    pub size: SpanSize,
    /// Statically computed fill (elements or bits); `None` when some element
    /// has a size that is not a constant.
    pub filled: Option<u64>,
    /// Register receiving the constructed value.
    pub dst: Option<Reg>,
}

impl Span {
    pub fn is_complete(&self) -> bool {
        match (&self.size, self.filled) {
            (SpanSize::Constant(n), Some(f)) => *n == f,
            _ => false,
        }
    }

    pub fn is_statically_known(&self) -> bool {
        matches!(self.size, SpanSize::Constant(_)) && self.filled.is_some()
    }

    /// No foreign instruction between the opener and the last element.
    pub fn is_contiguous(&self) -> bool {
        self.elements
            .iter()
            .enumerate()
            .all(|(k, &i)| i == self.opener + k + 1)
    }

    /// Indices of instructions between the opener and the last element that
    /// do not belong to the span.
    pub fn foreign(&self) -> Vec<usize> {
        let Some(&last) = self.elements.last() else {
            return Vec::new();
        };
        (self.opener + 1..last).filter(|i| !self.elements.contains(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanDiagnostic {
    pub opener: usize,
    pub declared: u64,
    pub found: u64,
}

fn stops_scan(ins: &Instruction) -> bool {
    matches!(
        ins.class(),
        Class::Label | Class::Terminator | Class::Test | Class::Call | Class::ReceiveFamily | Class::TryFamily
    ) || ins.is("put_tuple")
        || ins.is("bs_init2")
        || ins.is("bs_init_bits")
}

fn reads(ins: &Instruction, r: Reg) -> bool {
    super::effects::uses(ins).contains(&r)
}

fn const_size(o: &Operand) -> Option<u64> {
    match o {
        Operand::Num(_) | Operand::Integer(_) => o.as_u64(),
        _ => None,
    }
}

/// Static bit size of one `bs_put_*` instruction.
fn put_bits(ins: &Instruction) -> Option<u64> {
    let ops = &ins.operands;
    match ins.opcode.as_str() {
        "bs_put_string" => ops.first().and_then(Operand::as_u64).map(|n| n * 8),
        "bs_put_integer" | "bs_put_binary" | "bs_put_float" => {
            let unit = ops.get(2).and_then(Operand::as_u64).unwrap_or(1);
            const_size(ops.get(1)?).map(|s| s * unit)
        }
        "bs_put_utf8" => match ops.get(2) {
            Some(Operand::Integer(c)) => {
                let c = num_traits::ToPrimitive::to_u32(c)?;
                Some(8 * char::from_u32(c)?.len_utf8() as u64)
            }
            _ => None,
        },
        "bs_put_utf16" => match ops.get(2) {
            Some(Operand::Integer(c)) => {
                let c = num_traits::ToPrimitive::to_u32(c)?;
                Some(16 * char::from_u32(c)?.len_utf16() as u64)
            }
            _ => None,
        },
        "bs_put_utf32" => Some(32),
        _ => None,
    }
}

/// Finds every construction span in a function body.
pub fn construction_spans(f: &FunctionDef) -> (Vec<Span>, Vec<SpanDiagnostic>) {
    let mut spans = Vec::new();
    let mut diags = Vec::new();
    for (i, ins) in f.body.iter().enumerate() {
        let span = match ins.opcode.as_str() {
            "put_tuple" => {
                let Some(n) = ins.operands.first().and_then(Operand::as_u64) else {
                    continue;
                };
                let dst = ins.operands.get(1).and_then(Operand::as_reg);
                let mut elements = Vec::new();
                for (j, next) in f.body.iter().enumerate().skip(i + 1) {
                    if elements.len() as u64 == n {
                        break;
                    }
                    if next.is("put") {
                        elements.push(j);
                    } else if stops_scan(next) || dst.is_some_and(|d| reads(next, d)) {
                        break;
                    }
                }
                Span {
                    kind: SpanKind::Tuple,
                    opener: i,
                    filled: Some(elements.len() as u64),
                    elements,
                    size: SpanSize::Constant(n),
                    dst,
                }
            }
            "bs_init2" | "bs_init_bits" => {
                let scale = if ins.is("bs_init2") { 8 } else { 1 };
                let size_op = ins.operands.get(1).cloned().unwrap_or(Operand::Nil);
                let size = match const_size(&size_op) {
                    Some(n) => SpanSize::Constant(n * scale),
                    None => SpanSize::Register(size_op),
                };
                let dst = ins.operands.get(5).and_then(Operand::as_reg);
                let mut elements = Vec::new();
                let mut filled = Some(0u64);
                for (j, next) in f.body.iter().enumerate().skip(i + 1) {
                    if let (SpanSize::Constant(n), Some(got)) = (&size, filled) {
                        if got >= *n {
                            break;
                        }
                    }
                    if opcodes::is_bs_put(&next.opcode) {
                        elements.push(j);
                        filled = filled.zip(put_bits(next)).map(|(a, b)| a + b);
                    } else if stops_scan(next) || dst.is_some_and(|d| reads(next, d)) {
                        break;
                    }
                }
                Span {
                    kind: SpanKind::Binary,
                    opener: i,
                    elements,
                    size,
                    filled,
                    dst,
                }
            }
            _ => continue,
        };
        if let (SpanSize::Constant(n), Some(got)) = (&span.size, span.filled) {
            if got < *n {
                diags.push(SpanDiagnostic {
                    opener: i,
                    declared: *n,
                    found: got,
                });
            }
        }
        spans.push(span);
    }
    (spans, diags)
}
