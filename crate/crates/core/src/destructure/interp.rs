//! Interpreter for structured pseudo-programs, used as a test oracle.
//!
//! Instruction statements run on the emulator's machine, so register,
//! mailbox and cost semantics match [`crate::miniemu::run`]. Exception
//! handlers are honored when the faulting code runs inside the `if` arm
//! guarded by the matching `catch`/`try`.

use std::collections::{BTreeMap, HashMap};

use super::pseudo::PseudoExpr;
use super::structure::Structured;
use crate::asmir::{opcodes, Instruction, ModuleAsm, Operand};
use crate::miniemu::{EmuResult, Fault, Flow, Machine, Outcome, RunOptions, Stop, Value};
use crate::sterm::Term;

enum Ev {
    Val(Term),
    Ret,
    Tail(u32, u32),
}

struct Interp<'a> {
    mach: Machine,
    module: &'a ModuleAsm,
    bodies: HashMap<u32, &'a PseudoExpr>,
    entries: BTreeMap<(String, u32), u32>,
    budget: u64,
}

fn bad(msg: impl Into<String>) -> Stop {
    Stop::Fault(Fault::BadInstruction(msg.into()))
}

fn truthy(t: &Term) -> bool {
    matches!(t, Term::Atom(a) if a == "true")
}

fn reg_of(name: &str) -> Option<Operand> {
    let (tag, n) = name.split_at(1);
    let n: u32 = n.parse().ok()?;
    match tag {
        "X" => Some(Operand::X(n)),
        "Y" => Some(Operand::Y(n)),
        _ => None,
    }
}

fn operand(e: &PseudoExpr) -> Result<Operand, Stop> {
    match e {
        PseudoExpr::Var(v) => reg_of(v).ok_or_else(|| bad(format!("{v} is not a register"))),
        PseudoExpr::Lit(t) => Operand::from_term(t).map_err(|e| bad(e.to_string())),
        other => Err(bad(format!("not an operand: {other:?}"))),
    }
}

fn compare(op: &str, a: &Term, b: &Term) -> Result<Term, Stop> {
    let ints = || match (a, b) {
        (Term::Int(x), Term::Int(y)) => Ok((x.clone(), y.clone())),
        _ => Err(bad(format!("{op} on non-integers {a} and {b}"))),
    };
    let bool_term = |v: bool| Term::atom(if v { "true" } else { "false" });
    Ok(match op {
        "=:=" | "==" => bool_term(a == b),
        "=/=" | "/=" => bool_term(a != b),
        "<" => bool_term(ints().map(|(x, y)| x < y)?),
        ">" => bool_term(ints().map(|(x, y)| x > y)?),
        "=<" => bool_term(ints().map(|(x, y)| x <= y)?),
        ">=" => bool_term(ints().map(|(x, y)| x >= y)?),
        "+" => ints().map(|(x, y)| Term::Int(x + y))?,
        "-" => ints().map(|(x, y)| Term::Int(x - y))?,
        "*" => ints().map(|(x, y)| Term::Int(x * y))?,
        _ => return Err(bad(format!("unsupported operator {op}"))),
    })
}

impl<'a> Interp<'a> {
    fn step(&mut self) -> Result<(), Stop> {
        if self.budget == 0 {
            return Err(Stop::Fuel);
        }
        self.budget -= 1;
        Ok(())
    }

    fn exec(&mut self, ins: Instruction) -> Result<Flow, Stop> {
        self.mach.tick(usize::MAX, &ins)?;
        Ok(self.mach.exec(&ins)?)
    }

    fn entry_of(&self, name: &str, arity: usize) -> Result<u32, Stop> {
        self.entries
            .get(&(name.to_string(), arity as u32))
            .copied()
            .ok_or_else(|| Stop::Fault(Fault::Undef(format!("{}:{name}/{arity}", self.module.name))))
    }

    fn call_instruction(&self, module: &Option<String>, f: &str, n: usize, tail: bool) -> Result<Instruction, Stop> {
        let arity = Operand::num(n as u64);
        Ok(match module {
            None => {
                let l = Operand::Label(self.entry_of(f, n)?);
                Instruction::new(if tail { "call_only" } else { "call" }, vec![arity, l])
            }
            Some(m) => Instruction::new(
                if tail { "call_ext_only" } else { "call_ext" },
                vec![arity, Operand::ext(m, f, n as u32)],
            ),
        })
    }

    /// Runs the function at `label` to completion.
    fn call(&mut self, label: u32, arity: u32) -> Result<(), Stop> {
        self.mach.enter_call(arity);
        let mut label = label;
        loop {
            let body = *self
                .bodies
                .get(&label)
                .ok_or_else(|| bad(format!("no structured function at label {label}")))?;
            let mut env = HashMap::new();
            match self.eval(body, &mut env)? {
                Ev::Ret => break,
                Ev::Tail(l, a) => {
                    self.mach.clear_x_from(a as usize);
                    label = l;
                }
                Ev::Val(_) => return Err(bad("fell off the end of a function")),
            }
        }
        self.mach.leave_call();
        Ok(())
    }

    fn flow(&mut self, flow: Flow) -> Result<Ev, Stop> {
        Ok(match flow {
            Flow::Next => Ev::Val(Term::atom("true")),
            Flow::Jump(l) => Ev::Val(Term::int(l)),
            Flow::Call { label, arity } => {
                self.call(label, arity)?;
                Ev::Val(Term::atom("true"))
            }
            Flow::Tail { label, arity } => Ev::Tail(label, arity),
            Flow::Return => Ev::Ret,
        })
    }

    fn value(&mut self, e: &PseudoExpr, env: &mut HashMap<String, Term>) -> Result<Result<Term, Ev>, Stop> {
        Ok(match self.eval(e, env)? {
            Ev::Val(t) => Ok(t),
            other => Err(other),
        })
    }

    fn instruction(&mut self, name: &str, args: &[PseudoExpr]) -> Result<Instruction, Stop> {
        let dummy = Operand::Label(0);
        let ops = || args.iter().map(operand).collect::<Result<Vec<_>, _>>();
        Ok(match (name, args.len()) {
            ("peek_message", 1) => Instruction::new("loop_rec", vec![dummy, operand(&args[0])?]),
            ("next_message", 0) => Instruction::new("loop_rec_end", vec![dummy]),
            ("wait_message", 0) => Instruction::new("wait", vec![dummy]),
            ("timeout_expired", 1) => Instruction::new("wait_timeout", vec![dummy, operand(&args[0])?]),
            _ if opcodes::lookup(name).is_some() => Instruction::new(name, ops()?),
            _ => Instruction::new("test", vec![Operand::word(name), dummy, Operand::List(ops()?)]),
        })
    }

    fn eval(&mut self, e: &PseudoExpr, env: &mut HashMap<String, Term>) -> Result<Ev, Stop> {
        use PseudoExpr as P;
        macro_rules! val {
            ($e:expr) => {
                match self.value($e, env)? {
                    Ok(t) => t,
                    Err(ev) => return Ok(ev),
                }
            };
        }
        match e {
            P::Seq(items) => {
                for item in items {
                    if let ev @ (Ev::Ret | Ev::Tail(..)) = self.eval(item, env)? {
                        return Ok(ev);
                    }
                }
                Ok(Ev::Val(Term::atom("true")))
            }
            P::If(arms) => {
                for (k, (c, body)) in arms.iter().enumerate() {
                    let handler = match c {
                        P::Primop(op, a) if (op == "catch" || op == "try") && a.len() == 2 => {
                            operand(&a[1])?.as_label()
                        }
                        _ => None,
                    };
                    let depth = self.mach.call_depth();
                    if !truthy(&val!(c)) {
                        continue;
                    }
                    let r = self.eval(body, env);
                    return match (r, handler, arms.get(k + 1)) {
                        (Err(Stop::Fault(f)), Some(l), Some((_, other))) => {
                            let mine = f.catchable()
                                && self.mach.handlers.last().is_some_and(|h| h.label == l && h.cps == depth);
                            if !mine {
                                return Err(Stop::Fault(f));
                            }
                            self.mach.unwind(&f, depth);
                            self.eval(other, env)
                        }
                        (r, _, _) => r,
                    };
                }
                Ok(Ev::Val(Term::atom("true")))
            }
            P::Loop(c, body) => {
                loop {
                    self.step()?;
                    if !truthy(&val!(c)) {
                        return Ok(Ev::Val(Term::atom("true")));
                    }
                    if let ev @ (Ev::Ret | Ev::Tail(..)) = self.eval(body, env)? {
                        return Ok(ev);
                    }
                }
            }
            P::Receive(clauses, after) => self.receive(clauses, after.as_deref(), env),
            P::Call(m, f, args) => {
                let ins = self.call_instruction(m, f, args.len(), false)?;
                let flow = self.exec(ins)?;
                self.flow(flow)
            }
            P::Primop(op, args) if op == "return" => match args.as_slice() {
                [] => {
                    let flow = self.exec(Instruction::simple("return"))?;
                    self.flow(flow)
                }
                [P::Call(m, f, a)] => {
                    let ins = self.call_instruction(m, f, a.len(), true)?;
                    let flow = self.exec(ins)?;
                    self.flow(flow)
                }
                _ => Err(bad("malformed return")),
            },
            P::Primop(op, args) if op == "=" && args.len() == 2 => match &args[0] {
                P::Var(v) if reg_of(v).is_some() => {
                    let ins = Instruction::mov(operand(&args[1])?, operand(&args[0])?);
                    let flow = self.exec(ins)?;
                    self.flow(flow)
                }
                P::Var(v) => {
                    let t = val!(&args[1]);
                    env.insert(v.clone(), t.clone());
                    Ok(Ev::Val(t))
                }
                other => Err(bad(format!("cannot assign to {other:?}"))),
            },
            P::Primop(op, args) if args.len() == 2 && opcodes::lookup(op).is_none() && !op.starts_with(char::is_alphabetic) => {
                let a = val!(&args[0]);
                let b = val!(&args[1]);
                Ok(Ev::Val(compare(op, &a, &b)?))
            }
            P::Primop(op, args) => {
                let ins = self.instruction(op, args)?;
                let flow = self.exec(ins)?;
                self.flow(flow)
            }
            P::Var(v) => match env.get(v) {
                Some(t) => Ok(Ev::Val(t.clone())),
                None => match reg_of(v) {
                    Some(r) => Ok(Ev::Val(self.mach.get(&r)?.to_term())),
                    None => Err(bad(format!("unbound variable {v}"))),
                },
            },
            P::Lit(t) => Ok(Ev::Val(t.clone())),
        }
    }

    /// Selective receive over the mailbox: the first message matching some
    /// clause is removed and bound to x0.
    fn receive(
        &mut self,
        clauses: &[(PseudoExpr, PseudoExpr)],
        after: Option<&(PseudoExpr, PseudoExpr)>,
        env: &mut HashMap<String, Term>,
    ) -> Result<Ev, Stop> {
        let messages: Vec<Term> = self.mach.mailbox.iter().map(Value::to_term).collect();
        for (i, msg) in messages.iter().enumerate() {
            for (pat, body) in clauses {
                let hit = match pat {
                    PseudoExpr::Var(_) => true,
                    PseudoExpr::Lit(t) => t == msg,
                    _ => return Err(bad("unsupported receive pattern")),
                };
                if hit {
                    self.step()?;
                    self.mach.mailbox.remove(i);
                    self.mach.costs.messages_removed += 1;
                    if let PseudoExpr::Var(v) = pat {
                        match reg_of(v) {
                            Some(r) => self.mach.put(&r, Value::from_term(msg))?,
                            None => {
                                env.insert(v.clone(), msg.clone());
                            }
                        }
                    }
                    return self.eval(body, env);
                }
            }
        }
        match after {
            Some((_, body)) => self.eval(body, env),
            None => Err(Stop::Fault(Fault::Deadlock)),
        }
    }
}

/// Runs `name/args.len()` of `m` through the structured bodies in
/// `program`, which must hold one entry per function of `m`.
pub fn run_structured(
    m: &ModuleAsm,
    program: &[Structured],
    name: &str,
    args: &[Term],
    opts: &RunOptions,
) -> EmuResult {
    let entries: BTreeMap<(String, u32), u32> =
        m.functions.iter().map(|f| ((f.name.clone(), f.arity), f.entry)).collect();
    let bodies = program
        .iter()
        .filter_map(|s| entries.get(&(s.name.clone(), s.arity)).map(|&l| (l, &s.expr)))
        .collect();
    let mut it = Interp {
        mach: Machine::new(m, opts),
        module: m,
        bodies,
        entries,
        budget: opts.fuel,
    };
    let arity = args.len() as u32;
    let outcome = match it.mach.export_label(name, arity) {
        None => Outcome::Fault(Fault::Undef(format!("{}:{name}/{arity}", m.name))),
        Some(label) => {
            for (i, a) in args.iter().enumerate() {
                it.mach.set_x(i, Value::from_term(a));
            }
            match it.call(label, arity) {
                Ok(()) => Outcome::Value(it.mach.x0().map_or(Term::nil(), |v| v.to_term())),
                Err(Stop::Fault(f)) => Outcome::Fault(f),
                Err(Stop::Fuel) => Outcome::FuelExhausted,
            }
        }
    };
    EmuResult {
        outcome,
        residue: it.mach.residue(),
        costs: it.mach.costs.clone(),
        output: std::mem::take(&mut it.mach.output),
        trace: Vec::new(),
        reads: Vec::new(),
    }
}
