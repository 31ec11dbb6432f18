//! A small single-process interpreter for the instruction subset, with a
//! mailbox, a catch stack, a reduction counter and cost counters.

mod bifs;
mod machine;
pub mod value;

use thiserror::Error;

use crate::asmir::ModuleAsm;
use crate::sterm::Term;
pub use machine::{Flow, Handler, Machine};
pub use value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Reading an uninitialised register faults.
    #[default]
    Strict,
    /// Uninitialised registers read as `[]`.
    Permissive,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub fuel: u64,
    pub mode: Mode,
    pub trace: bool,
    pub record_reads: bool,
}

pub const DEFAULT_FUEL: u64 = 10_000_000;

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            fuel: DEFAULT_FUEL,
            mode: Mode::Strict,
            trace: false,
            record_reads: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Costs {
    pub steps: u64,
    pub heap_words_copied: u64,
    pub messages_sent: u64,
    pub messages_removed: u64,
    pub reductions: u64,
    /// Simulated milliseconds spent in expired `wait_timeout`s.
    pub clock: u64,
}

impl Costs {
    pub fn to_term(&self) -> Term {
        let kv = |k: &str, v: u64| Term::Tuple(vec![Term::atom(k), Term::int(v)]);
        Term::List(vec![
            kv("steps", self.steps),
            kv("heap_words_copied", self.heap_words_copied),
            kv("messages_sent", self.messages_sent),
            kv("messages_removed", self.messages_removed),
            kv("reductions", self.reductions),
            kv("clock", self.clock),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Fault {
    #[error("no match of right hand side value {0}")]
    Badmatch(Term),
    #[error("bad argument")]
    Badarg,
    #[error("bad argument in arithmetic expression")]
    Badarith,
    #[error("no function clause matching")]
    FunctionClause,
    #[error("no case clause matching {0}")]
    CaseClause(Term),
    #[error("no try clause matching {0}")]
    TryClause(Term),
    #[error("no true branch found when evaluating an if expression")]
    IfClause,
    #[error("undefined function {0}")]
    Undef(String),
    #[error("{class}: {reason}")]
    Raised { class: String, reason: Term },
    #[error("read of uninitialised register {0}")]
    Uninitialized(String),
    #[error("receive context violation: {0}")]
    ReceiveContext(String),
    #[error("wait with an empty mailbox would block forever")]
    Deadlock,
    #[error("unsupported opcode {0}")]
    UnknownOpcode(String),
    #[error("malformed instruction: {0}")]
    BadInstruction(String),
}

impl Fault {
    /// Faults that `catch`/`try` can intercept.
    pub fn catchable(&self) -> bool {
        matches!(
            self,
            Fault::Badmatch(_)
                | Fault::Badarg
                | Fault::Badarith
                | Fault::FunctionClause
                | Fault::CaseClause(_)
                | Fault::TryClause(_)
                | Fault::IfClause
                | Fault::Undef(_)
                | Fault::Raised { .. }
        )
    }

    pub fn class(&self) -> &str {
        match self {
            Fault::Raised { class, .. } => class,
            _ => "error",
        }
    }

    pub fn reason(&self) -> Term {
        let tag = |t: &str, v: &Term| Term::Tuple(vec![Term::atom(t), v.clone()]);
        match self {
            Fault::Badmatch(v) => tag("badmatch", v),
            Fault::Badarg => Term::atom("badarg"),
            Fault::Badarith => Term::atom("badarith"),
            Fault::FunctionClause => Term::atom("function_clause"),
            Fault::CaseClause(v) => tag("case_clause", v),
            Fault::TryClause(v) => tag("try_clause", v),
            Fault::IfClause => Term::atom("if_clause"),
            Fault::Undef(_) => Term::atom("undef"),
            Fault::Raised { reason, .. } => reason.clone(),
            Fault::Uninitialized(r) => tag("uninitialized", &Term::atom(r)),
            Fault::ReceiveContext(why) => tag("receive_context", &Term::string(why)),
            Fault::Deadlock => Term::atom("deadlock"),
            Fault::UnknownOpcode(op) => tag("unknown_opcode", &Term::atom(op)),
            Fault::BadInstruction(why) => tag("bad_instruction", &Term::string(why)),
        }
    }
}

/// Why execution stopped before producing a value.
#[derive(Debug, Clone, PartialEq)]
pub enum Stop {
    Fault(Fault),
    Fuel,
}

impl From<Fault> for Stop {
    fn from(f: Fault) -> Self {
        Stop::Fault(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Value(Term),
    Fault(Fault),
    FuelExhausted,
}

impl Outcome {
    pub fn to_term(&self) -> Term {
        match self {
            Outcome::Value(v) => Term::Tuple(vec![Term::atom("value"), v.clone()]),
            Outcome::Fault(f) => Term::Tuple(vec![Term::atom("fault"), Term::atom(f.class()), f.reason()]),
            Outcome::FuelExhausted => Term::atom("fuel_exhausted"),
        }
    }

    pub fn value(&self) -> Option<&Term> {
        match self {
            Outcome::Value(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub step: u64,
    pub function: String,
    /// Index in the function body.
    pub index: usize,
    pub instruction: Term,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmuResult {
    pub outcome: Outcome,
    pub costs: Costs,
    /// Messages left in the mailbox.
    pub residue: usize,
    /// Terms printed by `erlang:display/1`.
    pub output: Vec<Term>,
    pub trace: Vec<TraceEntry>,
    /// Register reads as (function index, instruction index, register).
    pub reads: Vec<(usize, usize, crate::asmir::Reg)>,
}

impl EmuResult {
    pub fn to_term(&self) -> Term {
        Term::Tuple(vec![
            Term::atom("result"),
            self.outcome.to_term(),
            Term::Tuple(vec![Term::atom("costs"), self.costs.to_term()]),
            Term::Tuple(vec![Term::atom("residue"), Term::int(self.residue)]),
            Term::Tuple(vec![Term::atom("output"), Term::List(self.output.clone())]),
        ])
    }
}

/// Runs the exported function `name/args.len()` of `m`.
pub fn run(m: &ModuleAsm, name: &str, args: &[Term], opts: &RunOptions) -> EmuResult {
    let mut mach = Machine::new(m, opts);
    let arity = args.len() as u32;
    let outcome = match mach.export_label(name, arity) {
        None => Outcome::Fault(Fault::Undef(format!("{}:{name}/{arity}", m.name))),
        Some(label) => {
            for (i, a) in args.iter().enumerate() {
                mach.set_x(i, Value::from_term(a));
            }
            match mach.invoke(label, arity) {
                Ok(()) => Outcome::Value(mach.x0().map_or(Term::nil(), |v| v.to_term())),
                Err(Stop::Fault(f)) => Outcome::Fault(f),
                Err(Stop::Fuel) => Outcome::FuelExhausted,
            }
        }
    };
    EmuResult {
        outcome,
        residue: mach.residue(),
        costs: mach.costs.clone(),
        output: std::mem::take(&mut mach.output),
        trace: mach.trace.take().unwrap_or_default(),
        reads: mach.reads.take().unwrap_or_default(),
    }
}

/// Runs with an instruction trace.
pub fn trace(m: &ModuleAsm, name: &str, args: &[Term], fuel: u64) -> EmuResult {
    run(
        m,
        name,
        args,
        &RunOptions {
            fuel,
            trace: true,
            ..RunOptions::default()
        },
    )
}

/// True when two results have the same value (or the same fault) and the
/// same `display` output.
pub fn same_outcome(a: &EmuResult, b: &EmuResult) -> bool {
    let outcome = match (&a.outcome, &b.outcome) {
        (Outcome::Fault(x), Outcome::Fault(y)) => x.class() == y.class() && x.reason() == y.reason(),
        (x, y) => x == y,
    };
    outcome && a.output == b.output
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub args: Vec<Term>,
    pub left: EmuResult,
    pub right: EmuResult,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiffReport {
    pub trials: usize,
    pub mismatches: Vec<Mismatch>,
}

impl DiffReport {
    pub fn is_equivalent(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn to_term(&self) -> Term {
        Term::Tuple(vec![
            Term::atom("differential"),
            Term::Tuple(vec![Term::atom("trials"), Term::int(self.trials)]),
            Term::Tuple(vec![Term::atom("mismatches"), Term::int(self.mismatches.len())]),
            Term::List(
                self.mismatches
                    .iter()
                    .map(|m| {
                        Term::Tuple(vec![
                            Term::List(m.args.clone()),
                            m.left.outcome.to_term(),
                            m.right.outcome.to_term(),
                        ])
                    })
                    .collect(),
            ),
        ])
    }
}

#[derive(Debug, Clone, Default)]
pub struct DiffOptions {
    pub run: RunOptions,
    /// Also compare the mailbox residue.
    pub residue: bool,
}

/// Seeded generator of integer argument lists drawn from `range`, for use
/// with [`run_differential`].
pub fn seeded_int_inputs(seed: u64, arity: u32, range: std::ops::RangeInclusive<i64>) -> impl FnMut(usize) -> Vec<Term> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    move |_| (0..arity).map(|_| Term::int(rng.gen_range(range.clone()))).collect()
}

/// Runs both modules on `trials` generated inputs and lists disagreements.
pub fn run_differential<G>(
    left: &ModuleAsm,
    right: &ModuleAsm,
    name: &str,
    mut inputs: G,
    trials: usize,
    opts: &DiffOptions,
) -> DiffReport
where
    G: FnMut(usize) -> Vec<Term>,
{
    let mut report = DiffReport {
        trials,
        mismatches: Vec::new(),
    };
    for i in 0..trials {
        let args = inputs(i);
        let l = run(left, name, &args, &opts.run);
        let r = run(right, name, &args, &opts.run);
        if !same_outcome(&l, &r) || (opts.residue && l.residue != r.residue) {
            report.mismatches.push(Mismatch { args, left: l, right: r });
        }
    }
    report
}

/// Runs `name(Size, Writes)` for each size and returns the heap words copied.
pub fn cost_profile(m: &ModuleAsm, name: &str, sizes: &[u64], writes: u64, opts: &RunOptions) -> Vec<(u64, u64)> {
    sizes
        .iter()
        .map(|&s| {
            let r = run(m, name, &[Term::int(s), Term::int(writes)], opts);
            (s, r.costs.heap_words_copied)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriterKind {
    Setelement,
    SetTupleElement,
}

/// A module exporting `write/2`: builds a tuple of `Size` zeros and
/// overwrites its first element `Writes` times.
pub fn writer_module(kind: WriterKind) -> ModuleAsm {
    let update = match kind {
        WriterKind::Setelement => {
            "{move,{integer,1},{x,0}}.
             {move,{y,1},{x,1}}.
             {move,{y,0},{x,2}}.
             {call_ext,3,{extfunc,erlang,setelement,3}}.
             {move,{x,0},{y,1}}."
        }
        WriterKind::SetTupleElement => "{set_tuple_element,{y,0},{y,1},0}.",
    };
    let text = format!(
        "{{module,writer}}. {{exports,[{{write,2}}]}}. {{attributes,[]}}. {{labels,5}}.
         {{function,write,2,2}}.
         {{label,1}}. {{func_info,{{atom,writer}},{{atom,write}},2}}.
         {{label,2}}.
           {{allocate,2,2}}.
           {{move,{{x,1}},{{y,0}}}}.
           {{move,{{integer,0}},{{x,1}}}}.
           {{call_ext,2,{{extfunc,erlang,make_tuple,2}}}}.
           {{move,{{x,0}},{{y,1}}}}.
         {{label,3}}.
           {{test,is_ne_exact,{{f,4}},[{{y,0}},{{integer,0}}]}}.
           {update}
           {{gc_bif,'-',{{f,0}},0,[{{y,0}},{{integer,1}}],{{y,0}}}}.
           {{jump,{{f,3}}}}.
         {{label,4}}.
           {{move,{{atom,ok}},{{x,0}}}}.
           {{deallocate,2}}.
           return."
    );
    crate::asmir::parse_module(&text).expect("writer module is well formed")
}

#[cfg(test)]
mod tests;
