//! Loops encoded as self-sent messages consumed by `loop_rec`.
//!
//! A self-tail-recursive function (guard test, base case, step, self call)
//! becomes: fetch a unique id U, send `{U, Done}` to self, then a receive
//! loop whose body runs the step, bumps a counter and sends the next
//! `{U, Done}`. Matched iteration messages are skipped with `loop_rec_end`
//! rather than removed, so a cleanup loop removes exactly `counter` of them
//! after the final `{U,true}` is consumed.
//!
//! Register plan of the generated code: x0 message and send target, x1
//! scratch, x2 U, x3 self, x4 counter, x5 saved message, x6 flag; the
//! original registers are shifted up by [`BASE`].

use crate::asmir::{FunctionDef, Instruction, ModuleAsm, Operand, Reg};
use crate::sterm::Term;

use super::{ObfError, PassConfig};

const X_TMP: u32 = 1;
const X_U: u32 = 2;
const X_SELF: u32 = 3;
const X_COUNT: u32 = 4;
const X_SAVED: u32 = 5;
const X_FLAG: u32 = 6;
/// Offset added to the original function's x registers.
pub const BASE: u32 = 7;

const STRAIGHT: &[&str] = &[
    "move",
    "gc_bif",
    "bif",
    "get_tuple_element",
    "get_list",
    "get_hd",
    "get_tl",
    "put_list",
    "put_tuple2",
    "swap",
    "test_heap",
];

/// A self-tail-recursive function split into its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopSchema {
    pub name: String,
    pub arity: u32,
    /// The single `test`, with its fail label cleared.
    pub guard: Instruction,
    /// The base case runs when the guard passes (otherwise when it fails).
    pub exit_on_pass: bool,
    /// Base case code, without the final `return`.
    pub base: Vec<Instruction>,
    /// Recursive case code, without the self call.
    pub step: Vec<Instruction>,
    /// Number of x registers the function uses.
    pub regs: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryGuard {
    /// Second entry taken when the first argument is an odd integer.
    Parity,
    /// Second entry never taken.
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    /// First iteration runs without testing the guard.
    pub post_test: bool,
    /// 1 or 2 loop exits (selected by counter parity).
    pub exits: u32,
    pub second_entry: Option<EntryGuard>,
    /// Extra `wait_timeout` instructions on the empty-mailbox path.
    pub wait_timeouts: u32,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            post_test: false,
            exits: 1,
            second_entry: None,
            wait_timeouts: 0,
        }
    }
}

impl LoopSchema {
    /// Parameters the guard reads.
    pub fn counter(&self) -> Vec<Reg> {
        let mut regs = Vec::new();
        self.guard.operands.iter().for_each(|o| o.regs(&mut regs));
        regs.retain(|r| matches!(r, Reg::X(n) if *n < self.arity));
        regs.sort();
        regs.dedup();
        regs
    }

    /// Parameters the guard does not read.
    pub fn accumulators(&self) -> Vec<Reg> {
        let c = self.counter();
        (0..self.arity).map(Reg::X).filter(|r| !c.contains(r)).collect()
    }

    pub fn to_term(&self) -> Term {
        let regs = |v: Vec<Reg>| Term::List(v.into_iter().map(|r| r.operand().to_term()).collect());
        let code = |v: &[Instruction]| Term::List(v.iter().map(Instruction::to_term).collect());
        Term::Tuple(vec![
            Term::atom("loop_schema"),
            Term::Tuple(vec![Term::atom(&self.name), Term::int(self.arity)]),
            Term::List(vec![
                Term::Tuple(vec![Term::atom("counter"), regs(self.counter())]),
                Term::Tuple(vec![Term::atom("accumulators"), regs(self.accumulators())]),
                Term::Tuple(vec![Term::atom("condition"), self.guard.to_term()]),
                Term::Tuple(vec![Term::atom("exit_on_pass"), Term::atom(if self.exit_on_pass { "true" } else { "false" })]),
                Term::Tuple(vec![Term::atom("base"), code(&self.base)]),
                Term::Tuple(vec![Term::atom("step"), code(&self.step)]),
            ]),
        ])
    }

    /// The plain recursive function: `prefix` ends with the entry label and
    /// `spare` is an unused label.
    pub fn to_recursion(&self, prefix: &[Instruction], entry: u32, spare: u32) -> Vec<Instruction> {
        let mut out = prefix.to_vec();
        let mut guard = self.guard.clone();
        guard.operands[1] = Operand::Label(spare);
        out.push(guard);
        let tail = Instruction::new("call_only", vec![Operand::num(self.arity), Operand::Label(entry)]);
        let (first, second) = if self.exit_on_pass {
            (&self.base, &self.step)
        } else {
            (&self.step, &self.base)
        };
        out.extend(first.iter().cloned());
        out.push(if self.exit_on_pass { Instruction::simple("return") } else { tail.clone() });
        out.push(Instruction::label(spare));
        out.extend(second.iter().cloned());
        out.push(if self.exit_on_pass { tail } else { Instruction::simple("return") });
        out
    }
}

fn map_operand(o: &Operand, f: &impl Fn(u32) -> Option<u32>) -> Option<Operand> {
    Some(match o {
        Operand::X(n) => Operand::X(f(*n)?),
        Operand::List(v) => Operand::List(v.iter().map(|o| map_operand(o, f)).collect::<Option<_>>()?),
        Operand::TaggedList(v) => Operand::TaggedList(v.iter().map(|o| map_operand(o, f)).collect::<Option<_>>()?),
        o => o.clone(),
    })
}

/// Shifts x registers (and live counts) up by `BASE`.
fn shift(ins: &Instruction) -> Instruction {
    shift_by(ins, true).unwrap()
}

/// Shifts back down; `None` when a register is below `BASE`.
fn unshift(ins: &Instruction) -> Option<Instruction> {
    shift_by(ins, false)
}

fn shift_by(ins: &Instruction, up: bool) -> Option<Instruction> {
    let f = |n: u32| if up { Some(n + BASE) } else { n.checked_sub(BASE) };
    let ops = ins.operands.iter().map(|o| map_operand(o, &f)).collect::<Option<_>>()?;
    let mut out = Instruction::new(&ins.opcode, ops);
    let live_at = match ins.opcode.as_str() {
        "gc_bif" => Some(2),
        "test_heap" => Some(1),
        _ => None,
    };
    if let Some(k) = live_at {
        if let Some(n) = out.operands.get(k).and_then(Operand::as_u64) {
            out.operands[k] = Operand::num(f(n as u32)?);
        }
    }
    Some(out)
}

fn entry_index(f: &FunctionDef) -> Option<usize> {
    f.label_index(f.entry)
}

fn straight(code: &[Instruction]) -> Result<(), String> {
    for ins in code {
        if !STRAIGHT.contains(&ins.opcode.as_str()) {
            return Err(format!("unsupported instruction {}", ins.opcode));
        }
        if !ins.label_refs().is_empty() {
            return Err(format!("{} has a fail label", ins.opcode));
        }
    }
    Ok(())
}

/// Recognizes the loop schema: guard test, base case ending in `return`,
/// recursive case ending in a self `call_only`, in either order.
pub fn detect_schema(f: &FunctionDef) -> Result<LoopSchema, String> {
    let e = entry_index(f).ok_or("no entry label")?;
    if f.max_regs().1.is_some() {
        return Err("uses stack slots".into());
    }
    let rest: Vec<Instruction> = f.body[e + 1..].iter().filter(|i| !i.is("line")).cloned().collect();
    let guard = rest.first().filter(|i| i.is("test") && i.operands.len() == 3).ok_or("no guard test")?;
    let fail = guard.operands[1].as_label().filter(|l| *l > 0).ok_or("guard without fail label")?;
    let p = rest.iter().position(|i| i.label_id() == Some(fail)).ok_or("fail label not local")?;
    let self_call = |i: &Instruction| {
        i.is("call_only")
            && i.operands.first().and_then(Operand::as_u64) == Some(f.arity as u64)
            && i.operands.get(1).and_then(Operand::as_label) == Some(f.entry)
    };
    let (a, b) = (&rest[1..p], &rest[p + 1..]);
    let (base, step, exit_on_pass) = match (a.last(), b.last()) {
        (Some(x), Some(y)) if x.is("return") && self_call(y) => (&a[..a.len() - 1], &b[..b.len() - 1], true),
        (Some(x), Some(y)) if self_call(x) && y.is("return") => (&b[..b.len() - 1], &a[..a.len() - 1], false),
        _ => return Err("not a base case and a self tail call".into()),
    };
    straight(base)?;
    straight(step)?;
    let mut guard = guard.clone();
    guard.operands[1] = Operand::Label(0);
    Ok(LoopSchema {
        name: f.name.clone(),
        arity: f.arity,
        guard,
        exit_on_pass,
        base: base.to_vec(),
        step: step.to_vec(),
        regs: f.max_regs().0.map_or(0, |n| n + 1).max(f.arity),
    })
}

fn x(n: u32) -> Operand {
    Operand::X(n)
}

fn int(n: i64) -> Operand {
    Operand::int(n)
}

fn ext(f: &str, a: u32) -> Operand {
    Operand::ext("erlang", f, a)
}

struct Gen<'a> {
    s: &'a LoopSchema,
    out: Vec<Instruction>,
    next: &'a mut dyn FnMut() -> u32,
    live: u32,
}

impl Gen<'_> {
    fn fresh(&mut self) -> u32 {
        (self.next)()
    }

    fn push(&mut self, i: Instruction) {
        self.out.push(i);
    }

    fn flag(&mut self, first: bool) {
        let (on_pass, on_fail) = if self.s.exit_on_pass { ("true", "false") } else { ("false", "true") };
        if first {
            self.push(Instruction::mov(Operand::atom("false"), x(X_FLAG)));
            return;
        }
        let l = self.fresh();
        self.push(Instruction::mov(Operand::atom(on_fail), x(X_FLAG)));
        let mut g = shift(&self.s.guard);
        g.operands[1] = Operand::Label(l);
        self.push(g);
        self.push(Instruction::mov(Operand::atom(on_pass), x(X_FLAG)));
        self.push(Instruction::label(l));
    }

    fn send(&mut self) {
        self.push(Instruction::new(
            "put_tuple2",
            vec![x(X_TMP), Operand::TaggedList(vec![x(X_U), x(X_FLAG)])],
        ));
        self.push(Instruction::mov(x(X_SELF), x(0)));
        self.push(Instruction::simple("send"));
    }

    /// Tests that x0 is `{U,_}`, leaving the second element in x1.
    fn match_u(&mut self, miss: u32) {
        self.push(Instruction::test("is_tuple", miss, vec![x(0)]));
        self.push(Instruction::test("test_arity", miss, vec![x(0), Operand::num(2)]));
        self.push(Instruction::new("get_tuple_element", vec![x(0), Operand::num(0), x(X_TMP)]));
        self.push(Instruction::test("is_eq_exact", miss, vec![x(X_TMP), x(X_U)]));
    }

    fn base(&mut self, clean: u32) {
        for i in &self.s.base {
            self.out.push(shift(i));
        }
        self.push(Instruction::jump(clean));
    }

    fn cleanup(&mut self, clean: u32) {
        let (more, miss, wait) = (self.fresh(), self.fresh(), self.fresh());
        self.push(Instruction::label(clean));
        self.push(Instruction::test("is_eq_exact", more, vec![x(X_COUNT), int(0)]));
        self.push(Instruction::mov(x(BASE), x(0)));
        self.push(Instruction::simple("return"));
        self.push(Instruction::label(more));
        self.push(Instruction::new("loop_rec", vec![Operand::Label(wait), x(0)]));
        self.match_u(miss);
        self.push(Instruction::simple("remove_message"));
        self.push(Instruction::gc_bif("-", self.live, vec![x(X_COUNT), int(1)], x(X_COUNT)));
        self.push(Instruction::jump(clean));
        self.push(Instruction::label(miss));
        self.push(Instruction::new("loop_rec_end", vec![Operand::Label(more)]));
        self.push(Instruction::label(wait));
        self.push(Instruction::new("wait", vec![Operand::Label(more)]));
    }
}

/// Emits the receive-encoded body after `prefix` (which ends with the entry
/// label), drawing new labels from `next`.
pub fn generate_loop(s: &LoopSchema, layout: &Layout, prefix: &[Instruction], next: &mut dyn FnMut() -> u32) -> Vec<Instruction> {
    let live = BASE + s.regs;
    let mut g = Gen {
        s,
        out: prefix.to_vec(),
        next,
        live,
    };
    let a = s.arity;
    let [head, body, cont, miss, wait] = [(); 5].map(|_| g.fresh());
    let cleans: Vec<u32> = (0..layout.exits.max(1)).map(|_| g.fresh()).collect();

    if a > 0 {
        g.push(Instruction::new("allocate", vec![Operand::num(a), Operand::num(a)]));
        for i in 0..a {
            g.push(Instruction::mov(x(i), Operand::Y(i)));
        }
    }
    g.push(Instruction::new("call_ext", vec![Operand::num(0), ext("unique_integer", 0)]));
    g.push(Instruction::mov(x(0), x(X_U)));
    if a > 0 {
        for i in 0..a {
            g.push(Instruction::mov(Operand::Y(i), x(BASE + i)));
        }
        g.push(Instruction::new("deallocate", vec![Operand::num(a)]));
    }
    g.push(Instruction::bif("self", vec![], x(X_SELF)));
    g.push(Instruction::mov(int(0), x(X_COUNT)));
    g.flag(layout.post_test);
    g.send();

    let wait2 = layout.second_entry.map(|guard| {
        match guard {
            EntryGuard::Parity => {
                g.push(Instruction::test("is_integer", head, vec![x(BASE)]));
                g.push(Instruction::gc_bif("band", live, vec![x(BASE), int(1)], x(X_FLAG)));
                g.push(Instruction::test("is_eq_exact", head, vec![x(X_FLAG), int(1)]));
            }
            EntryGuard::Never => {
                g.push(Instruction::test("is_eq_exact", head, vec![Operand::atom("true"), Operand::atom("false")]));
            }
        }
        let w = g.fresh();
        g.push(Instruction::new("loop_rec", vec![Operand::Label(w), x(0)]));
        g.push(Instruction::jump(body));
        w
    });

    g.push(Instruction::label(head));
    g.push(Instruction::new("loop_rec", vec![Operand::Label(wait), x(0)]));
    g.push(Instruction::label(body));
    g.match_u(miss);
    g.push(Instruction::new("get_tuple_element", vec![x(0), Operand::num(1), x(X_TMP)]));
    g.push(Instruction::test("is_eq_exact", cont, vec![x(X_TMP), Operand::atom("true")]));
    g.push(Instruction::simple("remove_message"));
    if cleans.len() > 1 {
        let other = g.fresh();
        g.push(Instruction::gc_bif("band", live, vec![x(X_COUNT), int(1)], x(X_FLAG)));
        g.push(Instruction::test("is_eq_exact", other, vec![x(X_FLAG), int(0)]));
        g.base(cleans[0]);
        g.push(Instruction::label(other));
        g.base(cleans[1]);
    } else {
        g.base(cleans[0]);
    }

    g.push(Instruction::label(cont));
    g.push(Instruction::mov(x(0), x(X_SAVED)));
    for i in &s.step {
        g.out.push(shift(i));
    }
    g.push(Instruction::gc_bif("+", live, vec![x(X_COUNT), int(1)], x(X_COUNT)));
    g.flag(false);
    g.send();
    g.push(Instruction::mov(x(X_SAVED), x(0)));
    g.push(Instruction::new("loop_rec_end", vec![Operand::Label(head)]));
    g.push(Instruction::label(miss));
    g.push(Instruction::new("loop_rec_end", vec![Operand::Label(head)]));

    g.push(Instruction::label(wait));
    for k in 0..layout.wait_timeouts {
        g.push(Instruction::new("wait_timeout", vec![Operand::Label(head), int(k as i64)]));
        g.push(Instruction::simple("timeout"));
    }
    g.push(Instruction::new("wait", vec![Operand::Label(head)]));
    if let Some(w) = wait2 {
        g.push(Instruction::label(w));
        g.push(Instruction::new("wait", vec![Operand::Label(head)]));
    }
    for c in cleans {
        g.cleanup(c);
    }
    g.out
}

/// Instruction sequences equal up to a consistent renaming of labels.
pub fn alpha_eq(a: &[Instruction], b: &[Instruction]) -> bool {
    use std::collections::BTreeMap;
    if a.len() != b.len() {
        return false;
    }
    let mut fwd: BTreeMap<u32, u32> = BTreeMap::new();
    let mut bwd: BTreeMap<u32, u32> = BTreeMap::new();
    let mut bind = |p: u32, q: u32| -> bool {
        if (p == 0) != (q == 0) {
            return false;
        }
        *fwd.entry(p).or_insert(q) == q && *bwd.entry(q).or_insert(p) == p
    };
    fn ops_eq(x: &Operand, y: &Operand, bind: &mut dyn FnMut(u32, u32) -> bool) -> bool {
        match (x, y) {
            (Operand::Label(p), Operand::Label(q)) => bind(*p, *q),
            (Operand::List(u), Operand::List(v)) | (Operand::TaggedList(u), Operand::TaggedList(v)) => {
                u.len() == v.len() && u.iter().zip(v).all(|(p, q)| ops_eq(p, q, bind))
            }
            _ => x == y,
        }
    }
    a.iter().zip(b).all(|(i, j)| {
        if i.opcode != j.opcode || i.operands.len() != j.operands.len() {
            return false;
        }
        match (i.label_id(), j.label_id()) {
            (Some(p), Some(q)) => bind(p, q),
            _ => i.operands.iter().zip(&j.operands).all(|(p, q)| ops_eq(p, q, &mut bind)),
        }
    })
}

fn is_counter_step(i: &Instruction) -> bool {
    i.is("gc_bif")
        && i.operands[0] == Operand::word("+")
        && i.operands[3] == Operand::List(vec![x(X_COUNT), int(1)])
        && i.operands[4] == x(X_COUNT)
}

/// Recognizes a loop produced by [`generate_loop`] and recovers its schema
/// and layout. The recovered pair regenerates the body exactly (up to
/// label names); anything else is rejected.
pub fn match_loop(f: &FunctionDef) -> Option<(LoopSchema, Layout)> {
    let e = entry_index(f)?;
    let body = &f.body;
    let prefix = &body[..=e];
    let incr = body.iter().position(is_counter_step)?;
    let live = body[incr].operands[2].as_u64()? as u32;
    let regs = live.checked_sub(BASE)?;
    let saved = (e..incr).rev().find(|&i| body[i] == Instruction::mov(x(0), x(X_SAVED)))?;
    let step: Vec<Instruction> = body[saved + 1..incr].iter().map(unshift).collect::<Option<_>>()?;
    let exit_on_pass = body.get(incr + 1)? == &Instruction::mov(Operand::atom("false"), x(X_FLAG));
    let mut guard = unshift(body.get(incr + 2).filter(|i| i.is("test"))?)?;
    guard.operands[1] = Operand::Label(0);
    let rm = body.iter().position(|i| i.is("remove_message"))?;
    let wait_timeouts = body.iter().filter(|i| i.is("wait_timeout")).count() as u32;
    let guards = [None, Some(EntryGuard::Parity), Some(EntryGuard::Never)];
    for exits in [1, 2] {
        let start = rm + 1 + if exits == 2 { 2 } else { 0 };
        let Some(len) = body.get(start..).and_then(|r| r.iter().position(|i| i.is("jump"))) else {
            continue;
        };
        let Some(base) = body[start..start + len].iter().map(unshift).collect::<Option<Vec<_>>>() else {
            continue;
        };
        let schema = LoopSchema {
            name: f.name.clone(),
            arity: f.arity,
            guard: guard.clone(),
            exit_on_pass,
            base,
            step: step.clone(),
            regs,
        };
        if straight(&schema.base).is_err() || straight(&schema.step).is_err() {
            continue;
        }
        for post_test in [false, true] {
            for second_entry in guards {
                let layout = Layout {
                    post_test,
                    exits,
                    second_entry,
                    wait_timeouts,
                };
                let mut n = u32::MAX / 2;
                let mut next = || {
                    n += 1;
                    n
                };
                if alpha_eq(&generate_loop(&schema, &layout, prefix, &mut next), body) {
                    return Some((schema, layout));
                }
            }
        }
    }
    None
}

fn lookup<'a>(m: &'a ModuleAsm, target: &(String, u32)) -> Result<&'a FunctionDef, ObfError> {
    m.function(&target.0, target.1)
        .ok_or_else(|| ObfError::NotFound(target.0.clone(), target.1))
}

/// The local function `f` tail-calls as its last instruction, if any.
fn tail_callee<'a>(m: &'a ModuleAsm, f: &FunctionDef) -> Option<&'a FunctionDef> {
    let last = f.body.last().filter(|i| i.is("call_only"))?;
    let l = last.operands.get(1)?.as_label()?;
    m.functions.iter().find(|g| g.entry == l && !(g.name == f.name && g.arity == f.arity))
}

fn replace(m: &ModuleAsm, f: &FunctionDef, s: &LoopSchema, layout: &Layout) -> ModuleAsm {
    let mut out = m.clone();
    let prefix = &f.body[..=entry_index(f).unwrap()];
    let body = {
        let mut next = || out.fresh_label();
        generate_loop(s, layout, prefix, &mut next)
    };
    out.function_mut(&f.name, f.arity).unwrap().body = body;
    out
}

/// Rewrites the target (or the schema function it tail-calls) into a
/// receive-encoded loop.
pub fn pass_receive_loop(m: &ModuleAsm, target: &(String, u32), cfg: &PassConfig) -> Result<ModuleAsm, ObfError> {
    let f = lookup(m, target)?;
    let (f, s) = match detect_schema(f) {
        Ok(s) => (f, s),
        Err(why) => match tail_callee(m, f).map(|g| (g, detect_schema(g))) {
            Some((g, Ok(s))) => (g, s),
            _ => return Err(ObfError::NotSchema(f.name.clone(), f.arity, why)),
        },
    };
    let layout = Layout {
        post_test: cfg.post_test,
        ..Layout::default()
    };
    Ok(replace(m, f, &s, &layout))
}

fn encoded<'a>(m: &'a ModuleAsm, target: &(String, u32)) -> Result<(&'a FunctionDef, LoopSchema, Layout), ObfError> {
    let f = lookup(m, target)?;
    if let Some((s, l)) = match_loop(f) {
        return Ok((f, s, l));
    }
    if let Some(g) = tail_callee(m, f) {
        if let Some((s, l)) = match_loop(g) {
            return Ok((g, s, l));
        }
    }
    Err(ObfError::NoReceiveLoop(f.name.clone(), f.arity))
}

/// Splits the loop exit in two, chosen by the parity of the iteration
/// counter; each exit has its own cleanup loop and return.
pub fn pass_multi_exit_receive(m: &ModuleAsm, target: &(String, u32), _cfg: &PassConfig) -> Result<ModuleAsm, ObfError> {
    let (f, s, mut layout) = encoded(m, target)?;
    layout.exits = 2;
    Ok(replace(m, f, &s, &layout))
}

/// Adds a second loop entry with its own `loop_rec` ahead of the loop,
/// joining the loop body after the main `loop_rec`.
pub fn pass_multi_entry_receive(m: &ModuleAsm, target: &(String, u32), cfg: &PassConfig) -> Result<ModuleAsm, ObfError> {
    let (f, s, mut layout) = encoded(m, target)?;
    layout.second_entry = Some(cfg.entry_guard);
    Ok(replace(m, f, &s, &layout))
}

/// Puts a chain of `wait_timeout` instructions (timeouts 0, 1, ...) on the
/// empty-mailbox path of the loop.
pub fn pass_redundant_wait_timeout(m: &ModuleAsm, target: &(String, u32), cfg: &PassConfig) -> Result<ModuleAsm, ObfError> {
    let (f, s, mut layout) = encoded(m, target)?;
    layout.wait_timeouts = (layout.wait_timeouts + cfg.intensity).max(2);
    Ok(replace(m, f, &s, &layout))
}
