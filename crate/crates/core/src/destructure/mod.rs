//! Deobfuscation: construction normalization, receive-loop recovery and
//! structuring into pseudo-source.

pub mod interp;
mod pseudo;
mod structure;

use crate::asmir::effects::{clobbers_x, defs, uses};
use crate::asmir::{construction_spans, FunctionDef, Instruction, ModuleAsm, Operand, Reg};
use crate::obf::{match_loop, Layout, LoopSchema};
use crate::sterm::Term;
use crate::vlite::liveness_report;
pub use pseudo::{
    emit_function, emit_pseudo_source, parse_pseudo, parse_pseudo_functions, PseudoExpr, PseudoParseError, HEADER,
};
pub use structure::{
    callee_table, structure_function, structure_module, structure_with, Strategy, StructError, StructureOptions,
    Structured,
};

/// Something `normalize_report` could not make contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizeNote {
    pub function: String,
    pub arity: u32,
    /// Index of the construction opener in the normalized body.
    pub opener: usize,
    pub message: String,
}

impl NormalizeNote {
    pub fn to_term(&self) -> Term {
        Term::Tuple(vec![
            Term::atom("left_in_place"),
            Term::Tuple(vec![Term::atom(&self.function), Term::int(self.arity)]),
            Term::int(self.opener),
            Term::string(&self.message),
        ])
    }
}

const HOISTABLE: &[&str] = &["move", "get_tuple_element", "get_hd", "get_tl", "get_list", "put_list", "init", "kill"];

fn is_opener(ins: &Instruction) -> bool {
    matches!(ins.opcode.as_str(), "put_tuple" | "bs_init2" | "bs_init_bits")
}

fn is_binary_opener(ins: &Instruction) -> bool {
    ins.is("bs_init2") || ins.is("bs_init_bits")
}

fn constant(op: &Operand) -> Option<u64> {
    match op {
        Operand::Integer(_) | Operand::Num(_) => op.as_u64(),
        _ => None,
    }
}

/// Folds `move K, x_d` directly before a binary opener sized by `x_d`
/// back into a constant size when `x_d` is dead afterwards.
fn fold_size(f: &mut FunctionDef) -> bool {
    let live = liveness_report(f);
    for o in 1..f.body.len() {
        let ins = &f.body[o];
        let Some(Operand::X(d)) = is_binary_opener(ins).then(|| ins.operands.get(1)).flatten() else {
            continue;
        };
        let d = Reg::X(*d);
        let prev = &f.body[o - 1];
        let k = match (prev.opcode.as_str(), prev.operands.as_slice()) {
            ("move", [src, dst]) if dst.as_reg() == Some(d) => constant(src),
            _ => None,
        };
        let redefined = defs(ins).contains(&d);
        if let Some(k) = k {
            if redefined || !live.live_out[o].contains(&d) {
                f.body[o].operands[1] = Operand::num(k);
                f.body.remove(o - 1);
                return true;
            }
        }
    }
    false
}

/// Why the foreign instruction at `j` cannot move in front of the opener of
/// its span.
fn hoist_blocker(f: &FunctionDef, opener: usize, j: usize, live_out: &[Reg]) -> Option<String> {
    let ins = &f.body[j];
    if !HOISTABLE.contains(&ins.opcode.as_str()) {
        return Some(format!("{} at {j} is not movable", ins.opcode));
    }
    let (u, d) = (uses(ins), defs(ins));
    for k in opener..j {
        let other = &f.body[k];
        if clobbers_x(other) {
            return Some(format!("call at {k}"));
        }
        let (ou, od) = (uses(other), defs(other));
        if let Some(r) = u.iter().find(|r| od.contains(r)) {
            return Some(format!("{} at {j} reads {r} written at {k}", ins.opcode));
        }
        if let Some(r) = d.iter().find(|r| ou.contains(r) || od.contains(r)) {
            return Some(format!("{} at {j} writes {r} used at {k}", ins.opcode));
        }
    }
    if is_binary_opener(&f.body[opener]) {
        let limit = f.body[opener].operands.get(3).and_then(Operand::as_u64).unwrap_or(0);
        if let Some(r) = d.iter().find(|r| matches!(r, Reg::X(n) if *n as u64 >= limit) && live_out.contains(r)) {
            return Some(format!("{} at {j} writes {r} above the live count of the opener", ins.opcode));
        }
    }
    None
}

/// Why the foreign instruction at `j` cannot move below the last element
/// at `last`.
fn sink_blocker(f: &FunctionDef, j: usize, last: usize) -> Option<String> {
    let ins = &f.body[j];
    if !HOISTABLE.contains(&ins.opcode.as_str()) {
        return Some(format!("{} at {j} is not movable", ins.opcode));
    }
    let (u, d) = (uses(ins), defs(ins));
    for k in j + 1..=last {
        let other = &f.body[k];
        let (ou, od) = (uses(other), defs(other));
        if let Some(r) = d.iter().find(|r| ou.contains(r) || od.contains(r)) {
            return Some(format!("{} at {j} writes {r} used at {k}", ins.opcode));
        }
        if let Some(r) = u.iter().find(|r| od.contains(r)) {
            return Some(format!("{} at {j} reads {r} written at {k}", ins.opcode));
        }
    }
    None
}

fn hoist_one(f: &mut FunctionDef) -> bool {
    let (spans, _) = construction_spans(f);
    let live = liveness_report(f);
    for s in &spans {
        for j in s.foreign() {
            let out: Vec<Reg> = live.live_out[j].iter().copied().collect();
            if hoist_blocker(f, s.opener, j, &out).is_none() {
                let ins = f.body.remove(j);
                f.body.insert(s.opener, ins);
                return true;
            }
            let last = *s.elements.last().expect("foreign instructions sit between elements");
            if sink_blocker(f, j, last).is_none() {
                let ins = f.body.remove(j);
                f.body.insert(last, ins);
                return true;
            }
        }
    }
    false
}

fn notes_for(f: &FunctionDef) -> Vec<NormalizeNote> {
    let note = |opener: usize, message: String| NormalizeNote {
        function: f.name.clone(),
        arity: f.arity,
        opener,
        message,
    };
    let mut out = Vec::new();
    let (spans, _) = construction_spans(f);
    let live = liveness_report(f);
    for s in &spans {
        for j in s.foreign() {
            let lo: Vec<Reg> = live.live_out[j].iter().copied().collect();
            let last = *s.elements.last().expect("foreign instructions sit between elements");
            if let (Some(why), Some(_)) = (hoist_blocker(f, s.opener, j, &lo), sink_blocker(f, j, last)) {
                out.push(note(s.opener, why));
            }
        }
    }
    for (o, ins) in f.body.iter().enumerate() {
        let Some(Operand::X(d)) = is_binary_opener(ins).then(|| ins.operands.get(1)).flatten() else {
            continue;
        };
        let d = Reg::X(*d);
        let mut last_write = None;
        for k in (0..o).rev() {
            let prev = &f.body[k];
            if prev.is("label") || !prev.label_refs().is_empty() {
                break;
            }
            if !defs(prev).contains(&d) {
                continue;
            }
            match (prev.opcode.as_str(), prev.operands.as_slice()) {
                ("move", [src, _]) if constant(src).is_some() => {
                    if let Some(w) = last_write {
                        out.push(note(
                            o,
                            format!("binary size in {d}: constant load at {k} is overwritten at {w}; size left in the register"),
                        ));
                    } else if k + 1 != o || live.live_out[o].contains(&d) {
                        out.push(note(o, format!("binary size in {d}: register stays live; size left in the register")));
                    }
                    break;
                }
                _ => last_write = last_write.or(Some(k)),
            }
        }
    }
    out
}

/// Normalizes every function and reports constructions left as they were.
pub fn normalize_report(m: &ModuleAsm) -> (ModuleAsm, Vec<NormalizeNote>) {
    let mut out = m.clone();
    let mut notes = Vec::new();
    for f in out.functions.iter_mut() {
        if !f.body.iter().any(is_opener) {
            continue;
        }
        while fold_size(f) {}
        while hoist_one(f) {}
        notes.extend(notes_for(f));
    }
    (out, notes)
}

/// Moves independent instructions out of tuple and binary constructions, above
/// the opener when possible and below the last element otherwise, and
/// folds register-loaded constant binary sizes, so that spans are contiguous
/// wherever dependences allow.
pub fn normalize_constructions(m: &ModuleAsm) -> ModuleAsm {
    normalize_report(m).0
}

/// Recovers the schema of a receive-encoded loop, or `None`.
pub fn recover_receive_loop(f: &FunctionDef) -> Option<(LoopSchema, Layout)> {
    match_loop(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FidelityLevel {
    ExactSchema,
    StructuredOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fidelity {
    pub function: String,
    pub arity: u32,
    pub level: FidelityLevel,
    pub schema: Option<LoopSchema>,
    pub notes: Vec<String>,
}

impl Fidelity {
    pub fn to_term(&self) -> Term {
        let level = match self.level {
            FidelityLevel::ExactSchema => "exact_schema",
            FidelityLevel::StructuredOnly => "structured_only",
        };
        Term::Tuple(vec![
            Term::atom("fidelity"),
            Term::Tuple(vec![Term::atom(&self.function), Term::int(self.arity)]),
            Term::atom(level),
            Term::List(self.notes.iter().map(|n| Term::string(n)).collect()),
        ])
    }
}

/// Fidelity report as a term list.
pub fn fidelity_term(report: &[Fidelity]) -> Term {
    Term::List(report.iter().map(Fidelity::to_term).collect())
}

fn layout_notes(layout: &Layout) -> Vec<String> {
    let mut notes = Vec::new();
    if layout.exits > 1 {
        notes.push(format!("exit-merge: {} loop exits merged into one return", layout.exits));
    }
    if layout.second_entry.is_some() {
        notes.push("second loop entry removed".to_string());
    }
    if layout.wait_timeouts > 0 {
        notes.push(format!("{} wait_timeout instructions removed", layout.wait_timeouts));
    }
    notes
}

fn unused_name(m: &ModuleAsm, base: &str, arity: u32) -> String {
    let mut name = base.to_string();
    let mut k = 1;
    while m.function(&name, arity).is_some() {
        k += 1;
        name = format!("{base}{k}");
    }
    name
}

/// Replaces each receive-encoded loop with the recursion it encodes and
/// reports the fidelity of every function.
pub fn recover_module(m: &ModuleAsm) -> (ModuleAsm, Vec<Fidelity>) {
    let mut out = m.clone();
    let mut report = Vec::new();
    for f in &m.functions {
        let Some((schema, layout)) = recover_receive_loop(f) else {
            report.push(Fidelity {
                function: f.name.clone(),
                arity: f.arity,
                level: FidelityLevel::StructuredOnly,
                schema: None,
                notes: Vec::new(),
            });
            continue;
        };
        let mut notes = layout_notes(&layout);
        let e = f.label_index(f.entry).expect("matched loops have an entry");
        let prefix = f.body[..=e].to_vec();
        let body = if layout.post_test {
            let helper = unused_name(&out, &format!("{}_loop", f.name), f.arity);
            let [first, entry, spare] = [(); 3].map(|_| out.fresh_label());
            let head = vec![
                Instruction::label(first),
                Instruction::new(
                    "func_info",
                    vec![Operand::atom(&m.name), Operand::atom(&helper), Operand::num(f.arity)],
                ),
                Instruction::label(entry),
            ];
            out.functions.push(FunctionDef {
                name: helper.clone(),
                arity: f.arity,
                entry,
                body: schema.to_recursion(&head, entry, spare),
            });
            notes.push(format!("post-test loop: first iteration inlined, then {helper}/{}", f.arity));
            let mut body = prefix;
            body.extend(schema.step.iter().cloned());
            body.push(Instruction::new("call_only", vec![Operand::num(f.arity), Operand::Label(entry)]));
            body
        } else {
            let spare = out.fresh_label();
            schema.to_recursion(&prefix, f.entry, spare)
        };
        out.function_mut(&f.name, f.arity).unwrap().body = body;
        report.push(Fidelity {
            function: f.name.clone(),
            arity: f.arity,
            level: FidelityLevel::ExactSchema,
            schema: Some(schema),
            notes,
        });
    }
    (out, report)
}

/// Structures every function of `m` and renders the module as
/// pseudo-source, header line first.
pub fn module_pseudo_source(m: &ModuleAsm, opts: &StructureOptions) -> Result<String, StructError> {
    let mut text = format!("{HEADER}\n%% module {}\n", m.name);
    for s in structure_module(m, opts)? {
        text.push('\n');
        text.push_str(&emit_function(&s.name, s.arity, &s.expr));
    }
    Ok(text)
}

#[cfg(test)]
mod tests;
