//! A small validator: register initialization, match contexts, fragile
//! message references and stack frame pairing, checked by forward abstract
//! interpretation over each function's control-flow graph.

mod liveness;

use std::collections::{BTreeMap, BTreeSet};

use crate::asmir::effects::{clobbers_x, defs, uses};
use crate::asmir::{FunctionDef, Instruction, ModuleAsm, Operand, Reg};
use crate::cfg::{build_cfg, Cfg, EdgeKind};
use crate::sterm::Term;
pub use liveness::{liveness_report, LivenessReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Uninit,
    Value,
    MatchContext,
    Fragile,
    Conflict,
}

impl Tag {
    fn join(self, other: Tag) -> Tag {
        use Tag::*;
        match (self, other) {
            (a, b) if a == b => a,
            (Uninit, _) | (_, Uninit) => Uninit,
            (Conflict, _) | (_, Conflict) => Conflict,
            (Fragile, Value) | (Value, Fragile) => Fragile,
            _ => Conflict,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbsState {
    /// Tags of x registers; absent means uninitialized.
    pub x: BTreeMap<u32, Tag>,
    /// Tags of the current stack frame, `None` when nothing is allocated.
    pub y: Option<Vec<Tag>>,
    pub receive_open: bool,
}

impl AbsState {
    fn entry(arity: u32) -> Self {
        AbsState {
            x: (0..arity).map(|i| (i, Tag::Value)).collect(),
            y: None,
            receive_open: false,
        }
    }

    pub fn get(&self, r: Reg) -> Tag {
        match r {
            Reg::X(n) => self.x.get(&n).copied().unwrap_or(Tag::Uninit),
            Reg::Y(n) => self
                .y
                .as_ref()
                .and_then(|y| y.get(n as usize).copied())
                .unwrap_or(Tag::Uninit),
        }
    }

    fn set(&mut self, r: Reg, t: Tag) {
        match r {
            Reg::X(n) => {
                if t == Tag::Uninit {
                    self.x.remove(&n);
                } else {
                    self.x.insert(n, t);
                }
            }
            Reg::Y(n) => {
                if let Some(slot) = self.y.as_mut().and_then(|y| y.get_mut(n as usize)) {
                    *slot = t;
                }
            }
        }
    }

    fn kill_x_from(&mut self, live: u32) {
        self.x.retain(|&k, _| k < live);
    }

    fn unfragile(&mut self) {
        for t in self.x.values_mut().chain(self.y.iter_mut().flatten()) {
            if *t == Tag::Fragile {
                *t = Tag::Value;
            }
        }
    }

    /// Joins `other` into `self`; returns the kinds of structural conflict.
    fn join(&mut self, other: &AbsState) -> Vec<&'static str> {
        let mut conflicts = Vec::new();
        let keys: BTreeSet<u32> = self.x.keys().chain(other.x.keys()).copied().collect();
        let mut x = BTreeMap::new();
        for k in keys {
            let t = self.get(Reg::X(k)).join(other.get(Reg::X(k)));
            if t != Tag::Uninit {
                x.insert(k, t);
            }
        }
        self.x = x;
        match (&mut self.y, &other.y) {
            (Some(a), Some(b)) if a.len() == b.len() => {
                for (s, o) in a.iter_mut().zip(b) {
                    *s = s.join(*o);
                }
            }
            (None, None) => {}
            _ => conflicts.push("inconsistent_stack_frame"),
        }
        if self.receive_open != other.receive_open {
            conflicts.push("inconsistent_receive_context");
            self.receive_open = true;
        }
        conflicts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub module: String,
    pub function: String,
    pub arity: u32,
    /// Zero-based position in the function body.
    pub index: usize,
    pub instruction: Instruction,
    pub reason: Term,
}

impl Diagnostic {
    /// `{Mod,{function,Name,Arity},{Instruction,Position,Reason}}` with a
    /// one-based position.
    pub fn to_term(&self) -> Term {
        Term::Tuple(vec![
            Term::atom(&self.module),
            Term::Tuple(vec![
                Term::atom("function"),
                Term::atom(&self.function),
                Term::int(self.arity),
            ]),
            Term::Tuple(vec![
                self.instruction.to_term(),
                Term::int(self.index + 1),
                self.reason.clone(),
            ]),
        ])
    }

    /// The compiler's error-list entry:
    /// `{beam_validator,{{Mod,Name,Arity},{Instruction,Position,Reason}}}`.
    pub fn validator_term(&self) -> Term {
        let Term::Tuple(parts) = self.to_term() else { unreachable!() };
        Term::Tuple(vec![
            Term::atom("beam_validator"),
            Term::Tuple(vec![
                Term::Tuple(vec![Term::atom(&self.module), Term::atom(&self.function), Term::int(self.arity)]),
                parts[2].clone(),
            ]),
        ])
    }

    pub fn reason_name(&self) -> String {
        match &self.reason {
            Term::Tuple(v) if !v.is_empty() => v[0].as_atom().unwrap_or("").to_string(),
            t => t.as_atom().unwrap_or("").to_string(),
        }
    }
}

fn reg_term(r: Reg) -> Term {
    r.operand().to_term()
}

fn reason(name: &str, extra: Vec<Term>) -> Term {
    if extra.is_empty() {
        return Term::atom(name);
    }
    let mut v = vec![Term::atom(name)];
    v.extend(extra);
    Term::Tuple(v)
}

fn num(o: Option<&Operand>) -> Option<u32> {
    o.and_then(Operand::as_u64).map(|n| n as u32)
}

/// True for instructions that may legally read a match context.
fn accepts_match_context(ins: &Instruction) -> bool {
    match ins.opcode.as_str() {
        "move" | "swap" | "kill" => true,
        "test" => matches!(ins.operands.first(), Some(Operand::Word(w)) if w.starts_with("bs_")),
        op => op.starts_with("bs_"),
    }
}

struct Checker<'a> {
    out: Option<&'a mut Vec<(usize, Term)>>,
}

impl Checker<'_> {
    fn report(&mut self, i: usize, r: Term) {
        if let Some(out) = self.out.as_mut() {
            out.push((i, r));
        }
    }

    fn source_tag(st: &AbsState, o: &Operand) -> Tag {
        o.as_reg().map(|r| st.get(r)).unwrap_or(Tag::Value)
    }

    /// Applies one instruction to `st`.
    fn step(&mut self, st: &mut AbsState, ins: &Instruction, i: usize) {
        let ops = &ins.operands;
        for r in uses(ins) {
            if let (Reg::Y(_), None) = (r, &st.y) {
                self.report(i, reason("no_stack_frame", vec![reg_term(r)]));
                continue;
            }
            match st.get(r) {
                Tag::Uninit => {
                    self.report(i, reason("uninitialized_reg", vec![reg_term(r)]));
                    st.set(r, Tag::Value);
                }
                Tag::Conflict => {
                    self.report(i, reason("conflicting_tags", vec![reg_term(r)]));
                    st.set(r, Tag::Value);
                }
                Tag::MatchContext if !accepts_match_context(ins) => {
                    self.report(i, reason("match_context", vec![reg_term(r)]))
                }
                _ => {}
            }
        }
        match ins.opcode.as_str() {
            "move" => {
                let t = Self::source_tag(st, &ops[0]);
                if let Some(d) = ops[1].as_reg() {
                    self.store(st, d, t, i);
                }
            }
            "swap" => {
                if let (Some(a), Some(b)) = (ops[0].as_reg(), ops[1].as_reg()) {
                    let (ta, tb) = (st.get(a), st.get(b));
                    self.store(st, a, tb, i);
                    self.store(st, b, ta, i);
                }
            }
            "get_tuple_element" | "get_list" | "get_hd" | "get_tl" => {
                let t = match Self::source_tag(st, &ops[0]) {
                    Tag::Fragile => Tag::Fragile,
                    _ => Tag::Value,
                };
                for d in defs(ins) {
                    self.store(st, d, t, i);
                }
            }
            "bs_start_match4" | "bs_start_match3" => {
                if let Some(d) = ops.last().and_then(Operand::as_reg) {
                    self.store(st, d, Tag::MatchContext, i);
                }
            }
            "loop_rec" => {
                if st.receive_open {
                    self.report(i, reason("nested_receive_context", vec![]));
                }
                st.receive_open = true;
                st.set(Reg::X(0), Tag::Fragile);
            }
            "remove_message" | "loop_rec_end" => {
                if !st.receive_open {
                    self.report(i, reason("no_receive_context", vec![]));
                }
                st.receive_open = false;
                st.unfragile();
            }
            "wait" | "wait_timeout" | "timeout" => {
                if st.receive_open {
                    self.report(i, reason("open_receive_context", vec![]));
                }
            }
            "allocate" | "allocate_zero" | "allocate_heap" | "allocate_heap_zero" => {
                let n = num(ops.first()).unwrap_or(0) as usize;
                let live = num(ops.last()).unwrap_or(0);
                if st.y.is_some() {
                    self.report(i, reason("already_allocated", vec![]));
                }
                let fill = if ins.opcode.ends_with("_zero") { Tag::Value } else { Tag::Uninit };
                st.y = Some(vec![fill; n]);
                st.kill_x_from(live);
            }
            "test_heap" => st.kill_x_from(num(ops.get(1)).unwrap_or(0)),
            "deallocate" => {
                self.check_frame(st, num(ops.first()).unwrap_or(0), i);
                st.y = None;
            }
            "trim" => {
                let n = num(ops.first()).unwrap_or(0) as usize;
                if let Some(y) = st.y.as_mut() {
                    y.drain(..n.min(y.len()));
                }
            }
            "call_last" | "call_ext_last" => self.check_frame(st, num(ops.get(2)).unwrap_or(0), i),
            "return" | "call_only" | "call_ext_only" => {
                if st.y.is_some() {
                    self.report(i, reason("frame_not_deallocated", vec![]));
                }
            }
            _ => {
                for d in defs(ins) {
                    self.store(st, d, Tag::Value, i);
                }
            }
        }
        if clobbers_x(ins) {
            st.x.clear();
            st.set(Reg::X(0), Tag::Value);
        }
        if ins.is("try_case") {
            st.x.clear();
            for k in 0..3 {
                st.set(Reg::X(k), Tag::Value);
            }
        }
    }

    fn store(&mut self, st: &mut AbsState, d: Reg, t: Tag, i: usize) {
        if let Reg::Y(n) = d {
            match &st.y {
                None => {
                    self.report(i, reason("no_stack_frame", vec![reg_term(d)]));
                    return;
                }
                Some(y) if n as usize >= y.len() => {
                    self.report(i, reason("invalid_store", vec![reg_term(d)]));
                    return;
                }
                _ => {}
            }
            if t == Tag::Fragile && st.receive_open {
                self.report(i, reason("fragile_message_reference", vec![reg_term(d)]));
            }
        }
        st.set(d, t);
    }

    fn check_frame(&mut self, st: &AbsState, n: u32, i: usize) {
        let cur = st.y.as_ref().map(|y| y.len());
        if cur != Some(n as usize) {
            let have = cur.map(Term::int).unwrap_or_else(|| Term::atom("none"));
            self.report(i, reason("deallocate_mismatch", vec![Term::int(n), have]));
        }
    }
}

fn exception_state(st: &AbsState) -> AbsState {
    AbsState {
        x: BTreeMap::new(),
        y: st.y.clone(),
        receive_open: false,
    }
}

/// Runs `block` from `input`, returning the state flowing along each
/// outgoing edge, in edge order.
fn flow_block(c: &Cfg, b: usize, input: &AbsState, chk: &mut Checker) -> Vec<(usize, AbsState)> {
    let block = &c.blocks[b];
    let mut st = input.clone();
    let mut out = Vec::new();
    let edges: Vec<_> = c.succs(b).copied().collect();
    if block.range().is_empty() {
        return edges.iter().map(|e| (e.to, st.clone())).collect();
    }
    let opener = block.range().rfind(|&i| c.ins(i).is("try") || c.ins(i).is("catch"));
    let mut raising: Option<AbsState> = None;
    for i in block.range() {
        let before = st.clone();
        chk.step(&mut st, c.ins(i), i);
        if opener.is_none_or(|o| i >= o) && st.y.is_some() {
            let ex = exception_state(&st);
            match raising.as_mut() {
                None => raising = Some(ex),
                Some(r) => {
                    r.join(&ex);
                }
            }
        }
        for e in edges.iter().filter(|e| e.site == i && e.kind != EdgeKind::Exception) {
            let s = if e.kind == EdgeKind::Fail { &before } else { &st };
            out.push((e.to, s.clone()));
        }
    }
    for e in edges.iter().filter(|e| e.kind == EdgeKind::Exception) {
        out.push((e.to, raising.clone().unwrap_or_else(|| exception_state(&st))));
    }
    out
}

/// Block entry states at the fixpoint, with the conflicts found while
/// joining.
fn solve(c: &Cfg) -> (Vec<Option<AbsState>>, BTreeMap<usize, Vec<&'static str>>) {
    let n = c.blocks.len();
    let mut input: Vec<Option<AbsState>> = vec![None; n];
    let mut conflicts: BTreeMap<usize, Vec<&'static str>> = BTreeMap::new();
    if n == 0 {
        return (input, conflicts);
    }
    input[c.entry] = Some(AbsState::entry(c.func.arity));
    let mut work = vec![c.entry];
    let mut chk = Checker { out: None };
    while let Some(b) = work.pop() {
        let st = input[b].clone().unwrap();
        for (to, s) in flow_block(c, b, &st, &mut chk) {
            let changed = match &mut input[to] {
                slot @ None => {
                    *slot = Some(s);
                    true
                }
                Some(cur) => {
                    let before = cur.clone();
                    for k in cur.join(&s) {
                        let v = conflicts.entry(to).or_default();
                        if !v.contains(&k) {
                            v.push(k);
                        }
                    }
                    *cur != before
                }
            };
            if changed && !work.contains(&to) {
                work.push(to);
            }
        }
    }
    (input, conflicts)
}

/// Abstract state before each instruction (`None` where unreachable).
pub fn states(f: &FunctionDef) -> Vec<Option<AbsState>> {
    let mut out = vec![None; f.body.len()];
    let Ok(c) = build_cfg(f) else {
        return out;
    };
    let (input, _) = solve(&c);
    let mut chk = Checker { out: None };
    for (b, st) in input.iter().enumerate() {
        if let Some(st) = st {
            let mut s = st.clone();
            for i in c.blocks[b].range() {
                out[i] = Some(s.clone());
                chk.step(&mut s, c.ins(i), i);
            }
        }
    }
    out
}

fn validate_function(module: &str, f: &FunctionDef) -> Vec<Diagnostic> {
    let mk = |index: usize, reason: Term| Diagnostic {
        module: module.to_string(),
        function: f.name.clone(),
        arity: f.arity,
        index,
        instruction: f.body.get(index).cloned().unwrap_or_else(|| Instruction::simple("return")),
        reason,
    };
    let c = match build_cfg(f) {
        Ok(c) => c,
        Err(crate::cfg::CfgError::UndefinedLabel { label, .. }) => {
            let at = f.body.iter().position(|i| i.label_refs().contains(&label)).unwrap_or(0);
            return vec![mk(at, reason("undefined_label", vec![Term::int(label)]))];
        }
    };
    let (input, conflicts) = solve(&c);
    let mut found: Vec<(usize, Term)> = Vec::new();
    for (b, ks) in &conflicts {
        for k in ks {
            found.push((c.blocks[*b].start, Term::atom(k)));
        }
    }
    let mut chk = Checker { out: Some(&mut found) };
    for (b, st) in input.iter().enumerate() {
        if let Some(st) = st {
            flow_block(&c, b, st, &mut chk);
        }
    }
    let mut seen = BTreeSet::new();
    found.sort_by_key(|(i, _)| *i);
    found
        .into_iter()
        .filter(|(i, r)| seen.insert((*i, r.to_string())))
        .map(|(i, r)| mk(i, r))
        .collect()
}

/// All diagnostics of a module, in function and instruction order.
pub fn validate(m: &ModuleAsm) -> Vec<Diagnostic> {
    m.functions.iter().flat_map(|f| validate_function(&m.name, f)).collect()
}

/// The instruction stream as the loader keeps it: a `move S,D` directly
/// followed by the self-move `move D,D` is folded away together with it,
/// as if the first move were dead code.
pub fn loader_view(m: &ModuleAsm) -> ModuleAsm {
    let mut out = m.clone();
    for f in &mut out.functions {
        let mut body = Vec::with_capacity(f.body.len());
        let mut i = 0;
        while i < f.body.len() {
            let ins = &f.body[i];
            if let (true, Some(next)) = (ins.is("move"), f.body.get(i + 1)) {
                if next.is("move") && next.operands[0] == next.operands[1] && next.operands[1] == ins.operands[1] {
                    i += 2;
                    continue;
                }
            }
            body.push(ins.clone());
            i += 1;
        }
        f.body = body;
    }
    out
}

/// Validates the code the loader would actually run.
pub fn validate_loaded(m: &ModuleAsm) -> Vec<Diagnostic> {
    validate(&loader_view(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Off,
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LintFinding {
    pub severity: Severity,
    pub diagnostic: Diagnostic,
}

/// Flags `set_tuple_element` whose new value may live on the heap; such a
/// store can leave a tuple pointing at data a collector moves.
pub fn lint(m: &ModuleAsm, severity: Severity) -> Vec<LintFinding> {
    if severity == Severity::Off {
        return Vec::new();
    }
    let mut out = Vec::new();
    for f in &m.functions {
        for (i, ins) in f.body.iter().enumerate() {
            if !ins.is("set_tuple_element") {
                continue;
            }
            let immediate = matches!(ins.operands.first(), Some(Operand::Atom(_) | Operand::Integer(_) | Operand::Nil));
            if !immediate {
                out.push(LintFinding {
                    severity,
                    diagnostic: Diagnostic {
                        module: m.name.clone(),
                        function: f.name.clone(),
                        arity: f.arity,
                        index: i,
                        instruction: ins.clone(),
                        reason: reason("non_immediate_store", vec![ins.operands[0].to_term()]),
                    },
                });
            }
        }
    }
    out
}
