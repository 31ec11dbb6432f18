use std::collections::{HashMap, VecDeque};
use std::rc::Rc;

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive, Zero};

use super::bifs;
use super::value::{compare, exact_eq, Bits, MatchState, Value};
use super::{Costs, Fault, Mode, RunOptions, Stop, TraceEntry};
use crate::asmir::{Instruction, ModuleAsm, Operand, Reg, MAX_REGISTER};
use crate::sterm::Term;

/// Control transfer produced by one instruction.
#[derive(Debug, Clone, PartialEq)]
pub enum Flow {
    Next,
    Jump(u32),
    Call { label: u32, arity: u32 },
    Tail { label: u32, arity: u32 },
    Return,
}

#[derive(Debug, Clone)]
pub struct Handler {
    pub label: u32,
    pub slot: u32,
    pub frames: usize,
    pub cps: usize,
}

enum Build {
    Tuple {
        dst: Operand,
        size: usize,
        items: Vec<Value>,
    },
    Binary {
        dst: Operand,
        size: usize,
        buf: Bits,
    },
}

const SENTINEL: usize = usize::MAX;

pub struct Machine {
    pub module_name: String,
    code: Rc<Vec<Instruction>>,
    owner: Vec<(usize, usize)>,
    fnames: Vec<String>,
    labels: HashMap<u32, usize>,
    exports: HashMap<(String, u32), u32>,
    x: Vec<Option<Value>>,
    xhi: usize,
    frames: Vec<Vec<Option<Value>>>,
    cps: Vec<usize>,
    pub handlers: Vec<Handler>,
    pub mailbox: VecDeque<Value>,
    save: usize,
    context: Option<usize>,
    build: Option<Build>,
    pending: Option<Fault>,
    pub costs: Costs,
    pub unique: u64,
    pub output: Vec<Term>,
    pub trace: Option<Vec<TraceEntry>>,
    pub reads: Option<Vec<(usize, usize, Reg)>>,
    mode: Mode,
    fuel: u64,
    pc: usize,
}

impl Machine {
    pub fn new(m: &ModuleAsm, opts: &RunOptions) -> Self {
        let mut code = Vec::new();
        let mut owner = Vec::new();
        let mut labels = HashMap::new();
        let mut fnames = Vec::new();
        for (fi, f) in m.functions.iter().enumerate() {
            fnames.push(format!("{}/{}", f.name, f.arity));
            for (ii, ins) in f.body.iter().enumerate() {
                if let Some(l) = ins.label_id() {
                    labels.insert(l, code.len());
                }
                code.push(ins.clone());
                owner.push((fi, ii));
            }
        }
        let exports = m
            .exports
            .iter()
            .filter_map(|(n, a)| m.function(n, *a).map(|f| ((n.clone(), *a), f.entry)))
            .collect();
        Machine {
            module_name: m.name.clone(),
            code: Rc::new(code),
            owner,
            fnames,
            labels,
            exports,
            x: vec![None; MAX_REGISTER as usize],
            xhi: 0,
            frames: Vec::new(),
            cps: Vec::new(),
            handlers: Vec::new(),
            mailbox: VecDeque::new(),
            save: 0,
            context: None,
            build: None,
            pending: None,
            costs: Costs::default(),
            unique: 0,
            output: Vec::new(),
            trace: opts.trace.then(Vec::new),
            reads: opts.record_reads.then(Vec::new),
            mode: opts.mode,
            fuel: opts.fuel,
            pc: 0,
        }
    }

    pub fn export_label(&self, name: &str, arity: u32) -> Option<u32> {
        self.exports.get(&(name.to_string(), arity)).copied()
    }

    pub fn label_pc(&self, l: u32) -> Result<usize, Fault> {
        self.labels
            .get(&l)
            .copied()
            .ok_or_else(|| Fault::BadInstruction(format!("jump to undefined label {l}")))
    }

    pub fn set_x(&mut self, n: usize, v: Value) {
        self.x[n] = Some(v);
        self.xhi = self.xhi.max(n + 1);
    }

    pub fn x0(&self) -> Option<Value> {
        self.x[0].clone()
    }

    pub fn clear_x_from(&mut self, n: usize) {
        for i in n..self.xhi {
            self.x[i] = None;
        }
        self.xhi = self.xhi.min(n);
    }

    pub fn residue(&self) -> usize {
        self.mailbox.len()
    }

    pub fn call_depth(&self) -> usize {
        self.cps.len()
    }

    // ---- operands ----

    fn note_read(&mut self, r: Reg) {
        if let Some(log) = self.reads.as_mut() {
            if let Some(&(f, i)) = self.owner.get(self.pc) {
                log.push((f, i, r));
            }
        }
    }

    fn uninit(&self, r: Reg) -> Result<Value, Fault> {
        match self.mode {
            Mode::Strict => Err(Fault::Uninitialized(r.to_string())),
            Mode::Permissive => Ok(Value::Nil),
        }
    }

    pub fn get(&mut self, op: &Operand) -> Result<Value, Fault> {
        match op {
            Operand::X(n) => {
                self.note_read(Reg::X(*n));
                match self.x[*n as usize].clone() {
                    Some(v) => Ok(v),
                    None => self.uninit(Reg::X(*n)),
                }
            }
            Operand::Y(n) => {
                self.note_read(Reg::Y(*n));
                match self.frames.last().and_then(|f| f.get(*n as usize)).cloned().flatten() {
                    Some(v) => Ok(v),
                    None => self.uninit(Reg::Y(*n)),
                }
            }
            Operand::Atom(a) | Operand::Word(a) => Ok(Value::atom(a)),
            Operand::Integer(i) | Operand::Num(i) => Ok(Value::Int(i.clone())),
            Operand::Literal(t) => Ok(Value::from_term(t)),
            Operand::Nil => Ok(Value::Nil),
            Operand::List(v) | Operand::TaggedList(v) => {
                let items = v.iter().map(|o| self.get(o)).collect::<Result<Vec<_>, _>>()?;
                Ok(Value::list(items))
            }
            Operand::Raw(t) => match t.as_tuple() {
                Some([Term::Atom(tag), v]) if tag == "float" => Ok(Value::from_term(v)),
                _ => Ok(Value::from_term(t)),
            },
            Operand::ExtFunc { .. } | Operand::Label(_) => Err(Fault::BadInstruction(format!("cannot read {op}"))),
        }
    }

    pub fn put(&mut self, op: &Operand, v: Value) -> Result<(), Fault> {
        match op {
            Operand::X(n) => {
                self.set_x(*n as usize, v);
                Ok(())
            }
            Operand::Y(n) => match self.frames.last_mut().and_then(|f| f.get_mut(*n as usize)) {
                Some(slot) => {
                    *slot = Some(v);
                    Ok(())
                }
                None => Err(Fault::BadInstruction(format!("write to {op} outside the stack frame"))),
            },
            _ => Err(Fault::BadInstruction(format!("cannot write {op}"))),
        }
    }

    fn args(&mut self, op: Option<&Operand>) -> Result<Vec<Value>, Fault> {
        match op {
            Some(Operand::List(v)) => v.clone().iter().map(|o| self.get(o)).collect(),
            Some(o) => Err(Fault::BadInstruction(format!("expected an argument list, got {o}"))),
            None => Err(Fault::BadInstruction("missing argument list".into())),
        }
    }

    // ---- driving ----

    /// Runs from `pc` until a `return` pops the sentinel pushed by the
    /// caller of this method.
    pub fn run_from(&mut self, mut pc: usize) -> Result<(), Stop> {
        let base = self.cps.len();
        loop {
            let code = Rc::clone(&self.code);
            let Some(ins) = code.get(pc) else {
                return Err(Stop::Fault(Fault::BadInstruction("fell off the end of the code".into())));
            };
            self.pc = pc;
            self.tick(pc, ins)?;
            let flow = match self.exec(ins) {
                Ok(f) => f,
                Err(f) => match self.unwind(&f, base) {
                    Some(l) => Flow::Jump(l),
                    None => return Err(Stop::Fault(f)),
                },
            };
            pc = match flow {
                Flow::Next => pc + 1,
                Flow::Jump(l) => self.label_pc(l)?,
                Flow::Call { label, arity } => {
                    self.clear_x_from(arity as usize);
                    self.cps.push(pc + 1);
                    self.label_pc(label)?
                }
                Flow::Tail { label, arity } => {
                    self.clear_x_from(arity as usize);
                    self.label_pc(label)?
                }
                Flow::Return => {
                    self.clear_x_from(1);
                    match self.cps.pop() {
                        Some(SENTINEL) | None => return Ok(()),
                        Some(r) => r,
                    }
                }
            };
        }
    }

    /// Calls the function at `label` and runs it to completion.
    pub fn invoke(&mut self, label: u32, arity: u32) -> Result<(), Stop> {
        let pc = self.label_pc(label)?;
        self.clear_x_from(arity as usize);
        let depth = self.cps.len();
        self.cps.push(SENTINEL);
        let r = self.run_from(pc);
        if r.is_err() {
            self.cps.truncate(depth);
        }
        r
    }

    /// Opens a call frame for code driven outside [`Machine::run_from`].
    pub fn enter_call(&mut self, arity: u32) {
        self.clear_x_from(arity as usize);
        self.cps.push(SENTINEL);
    }

    /// Closes a frame opened by [`Machine::enter_call`].
    pub fn leave_call(&mut self) {
        self.clear_x_from(1);
        self.cps.pop();
    }

    /// Step accounting shared by every executed instruction.
    pub fn tick(&mut self, pc: usize, ins: &Instruction) -> Result<(), Stop> {
        if self.costs.steps >= self.fuel {
            return Err(Stop::Fuel);
        }
        self.costs.steps += 1;
        if let Some(t) = self.trace.as_mut() {
            let (f, i) = self.owner.get(pc).copied().unwrap_or((usize::MAX, 0));
            t.push(TraceEntry {
                step: self.costs.steps,
                function: self.fnames.get(f).cloned().unwrap_or_default(),
                index: i,
                instruction: ins.to_term(),
            });
        }
        Ok(())
    }

    /// Transfers control to the innermost handler installed at call depth
    /// `base` or deeper. Returns the handler label.
    pub fn unwind(&mut self, f: &Fault, base: usize) -> Option<u32> {
        if !f.catchable() {
            return None;
        }
        let h = self.handlers.last()?.clone();
        if h.cps < base {
            return None;
        }
        self.frames.truncate(h.frames);
        self.cps.truncate(h.cps);
        self.pending = Some(f.clone());
        self.build = None;
        self.context = None;
        self.x[0] = None;
        Some(h.label)
    }

    fn fail(fail: &Operand, fault: Fault) -> Result<Flow, Fault> {
        match fail.as_label() {
            Some(l) if l > 0 => Ok(Flow::Jump(l)),
            _ => Err(fault),
        }
    }

    fn label_op(op: Option<&Operand>) -> Result<u32, Fault> {
        op.and_then(Operand::as_label)
            .ok_or_else(|| Fault::BadInstruction("expected {f,_}".into()))
    }

    fn count(op: Option<&Operand>) -> Result<usize, Fault> {
        op.and_then(Operand::as_u64)
            .map(|n| n as usize)
            .ok_or_else(|| Fault::BadInstruction("expected an integer operand".into()))
    }

    fn ext_target(&self, op: Option<&Operand>) -> Result<(String, String, u32), Fault> {
        match op {
            Some(Operand::ExtFunc {
                module,
                function,
                arity,
            }) => Ok((module.clone(), function.clone(), *arity)),
            _ => Err(Fault::BadInstruction("expected {extfunc,_,_,_}".into())),
        }
    }

    /// Either a local export (returns its label) or a BIF run in place.
    fn call_ext(&mut self, op: Option<&Operand>) -> Result<Result<(u32, u32), ()>, Fault> {
        let (module, function, arity) = self.ext_target(op)?;
        self.costs.reductions += 1;
        if module == self.module_name {
            if let Some(l) = self.export_label(&function, arity) {
                return Ok(Ok((l, arity)));
            }
        }
        let mut args = Vec::with_capacity(arity as usize);
        for i in 0..arity {
            args.push(self.get(&Operand::X(i))?);
        }
        let v = bifs::call(self, &module, &function, args)?;
        self.clear_x_from(1);
        self.set_x(0, v);
        Ok(Err(()))
    }

    fn check_no_context(&self, op: &str) -> Result<(), Fault> {
        if self.context.is_some() {
            return Err(Fault::ReceiveContext(format!("{op} while a message is being examined")));
        }
        Ok(())
    }

    fn check_context(&self, op: &str) -> Result<(), Fault> {
        if self.context.is_none() {
            return Err(Fault::ReceiveContext(format!("{op} without an open receive context")));
        }
        Ok(())
    }

    fn pop_frame(&mut self, n: usize) -> Result<(), Fault> {
        match self.frames.pop() {
            Some(f) if f.len() == n => Ok(()),
            Some(f) => Err(Fault::BadInstruction(format!("deallocate {n} on a frame of {}", f.len()))),
            None => Err(Fault::BadInstruction("deallocate without a frame".into())),
        }
    }

    fn pop_handler(&mut self, slot: u32) {
        let depth = self.frames.len();
        if let Some(i) = self.handlers.iter().rposition(|h| h.frames == depth && h.slot == slot) {
            self.handlers.remove(i);
        }
    }

    fn finish_build(&mut self) -> Result<(), Fault> {
        let done = match &self.build {
            Some(Build::Tuple { size, items, .. }) => items.len() == *size,
            Some(Build::Binary { size, buf, .. }) => buf.bits == *size,
            None => false,
        };
        if done {
            match self.build.take() {
                Some(Build::Tuple { dst, items, .. }) => self.put(&dst, Value::tuple(items))?,
                Some(Build::Binary { dst, buf, .. }) => self.put(&dst, Value::Binary(Rc::new(buf)))?,
                None => {}
            }
        }
        Ok(())
    }

    fn binary_builder(&mut self) -> Result<&mut Bits, Fault> {
        match self.build.as_mut() {
            Some(Build::Binary { buf, .. }) => Ok(buf),
            _ => Err(Fault::Badarg),
        }
    }

    fn put_segment(&mut self, ins: &Instruction) -> Result<(), Fault> {
        let ops = &ins.operands;
        let flags = ops.get(3).map(|o| o.to_term().to_string()).unwrap_or_default();
        let little = flags.contains("little");
        match ins.opcode.as_str() {
            "bs_put_string" => {
                let bytes: Vec<u8> = match ops.get(1).map(Operand::to_term) {
                    Some(Term::Tuple(t)) if t.len() == 2 => match &t[1] {
                        Term::Bin { bytes, .. } => bytes.clone(),
                        Term::List(items) => items
                            .iter()
                            .filter_map(|i| i.as_i64().map(|b| b as u8))
                            .collect(),
                        _ => return Err(Fault::Badarg),
                    },
                    _ => return Err(Fault::Badarg),
                };
                let n = Self::count(ops.first())?;
                let buf = self.binary_builder()?;
                for b in bytes.iter().take(n) {
                    buf.push_int(&BigInt::from(*b), 8);
                }
            }
            "bs_put_integer" | "bs_put_float" | "bs_put_binary" => {
                let unit = ops.get(2).and_then(Operand::as_u64).unwrap_or(1) as usize;
                let src = self.get(&ops[4])?;
                let size = match &ops[1] {
                    Operand::Atom(a) | Operand::Word(a) if a == "all" => None,
                    o => Some(
                        self.get(o)?
                            .as_usize()
                            .ok_or(Fault::Badarg)?
                            .checked_mul(unit)
                            .ok_or(Fault::Badarg)?,
                    ),
                };
                match ins.opcode.as_str() {
                    "bs_put_integer" => {
                        let v = src.as_int().ok_or(Fault::Badarg)?.clone();
                        let size = size.ok_or(Fault::Badarg)?;
                        let buf = self.binary_builder()?;
                        if little && size % 8 == 0 {
                            let mut tmp = Bits::new();
                            tmp.push_int(&v, size);
                            for chunk in tmp.bytes.iter().rev() {
                                buf.push_int(&BigInt::from(*chunk), 8);
                            }
                        } else {
                            buf.push_int(&v, size);
                        }
                    }
                    "bs_put_float" => {
                        let f = match src {
                            Value::Float(f) => f,
                            Value::Int(i) => i.to_f64().ok_or(Fault::Badarg)?,
                            _ => return Err(Fault::Badarg),
                        };
                        let bits = match size {
                            Some(64) => BigInt::from(f.to_bits()),
                            Some(32) => BigInt::from((f as f32).to_bits()),
                            _ => return Err(Fault::Badarg),
                        };
                        let n = size.unwrap();
                        self.binary_builder()?.push_int(&bits, n);
                    }
                    _ => {
                        let Value::Binary(b) = src else {
                            return Err(Fault::Badarg);
                        };
                        let n = size.unwrap_or(b.bits);
                        if n > b.bits {
                            return Err(Fault::Badarg);
                        }
                        self.binary_builder()?.push_bits(&b, n);
                    }
                }
            }
            "bs_put_utf8" | "bs_put_utf16" | "bs_put_utf32" => {
                let c = self
                    .get(&ops[2])?
                    .as_int()
                    .and_then(|i| i.to_u32())
                    .and_then(char::from_u32)
                    .ok_or(Fault::Badarg)?;
                let buf = self.binary_builder()?;
                match ins.opcode.as_str() {
                    "bs_put_utf8" => {
                        let mut tmp = [0u8; 4];
                        for b in c.encode_utf8(&mut tmp).bytes() {
                            buf.push_int(&BigInt::from(b), 8);
                        }
                    }
                    "bs_put_utf16" => {
                        let mut tmp = [0u16; 2];
                        for u in c.encode_utf16(&mut tmp) {
                            buf.push_int(&BigInt::from(*u), 16);
                        }
                    }
                    _ => buf.push_int(&BigInt::from(c as u32), 32),
                }
            }
            _ => return Err(Fault::UnknownOpcode(ins.opcode.clone())),
        }
        if let Some(Build::Binary { size, buf, .. }) = &self.build {
            if buf.bits > *size {
                self.build = None;
                return Err(Fault::Badarg);
            }
        }
        self.finish_build()
    }

    fn run_test(&mut self, kind: &str, args: &[Value]) -> Result<bool, Fault> {
        let one = || args.first().ok_or_else(|| Fault::BadInstruction(format!("{kind}: missing argument")));
        Ok(match kind {
            "is_integer" => matches!(one()?, Value::Int(_)),
            "is_float" => matches!(one()?, Value::Float(_)),
            "is_number" => matches!(one()?, Value::Int(_) | Value::Float(_)),
            "is_atom" => matches!(one()?, Value::Atom(_)),
            "is_boolean" => matches!(one()?.as_atom(), Some("true" | "false")),
            "is_tuple" => matches!(one()?, Value::Tuple(_)),
            "is_list" => matches!(one()?, Value::Nil | Value::Cons(_)),
            "is_nil" => matches!(one()?, Value::Nil),
            "is_nonempty_list" => matches!(one()?, Value::Cons(_)),
            "is_binary" => matches!(one()?, Value::Binary(b) if b.bits % 8 == 0),
            "is_bitstr" => matches!(one()?, Value::Binary(_)),
            "is_pid" => matches!(one()?, Value::Pid(_)),
            "is_eq_exact" | "is_ne_exact" | "is_eq" | "is_ne" | "is_lt" | "is_ge" => {
                let [a, b] = args else {
                    return Err(Fault::BadInstruction(format!("{kind} takes two arguments")));
                };
                match kind {
                    "is_eq_exact" => exact_eq(a, b),
                    "is_ne_exact" => !exact_eq(a, b),
                    "is_eq" => compare(a, b).is_eq(),
                    "is_ne" => compare(a, b).is_ne(),
                    "is_lt" => compare(a, b).is_lt(),
                    _ => compare(a, b).is_ge(),
                }
            }
            "test_arity" => match args {
                [Value::Tuple(t), n] => Some(t.borrow().len()) == n.as_usize(),
                [_, _] => false,
                _ => return Err(Fault::BadInstruction("test_arity takes two arguments".into())),
            },
            "is_tagged_tuple" => match args {
                [Value::Tuple(t), n, tag] => {
                    let t = t.borrow();
                    Some(t.len()) == n.as_usize() && t.first().is_some_and(|h| exact_eq(h, tag))
                }
                [_, _, _] => false,
                _ => return Err(Fault::BadInstruction("is_tagged_tuple takes three arguments".into())),
            },
            "bs_test_tail2" => match args {
                [Value::MatchCtx(ms), n] => Some(ms.bin.bits - ms.pos.get()) == n.as_usize(),
                _ => return Err(Fault::Badarg),
            },
            "bs_test_unit" => match args {
                [Value::MatchCtx(ms), n] => {
                    let u = n.as_usize().filter(|u| *u > 0).ok_or(Fault::Badarg)?;
                    (ms.bin.bits - ms.pos.get()) % u == 0
                }
                _ => return Err(Fault::Badarg),
            },
            _ => return Err(Fault::UnknownOpcode(format!("test {kind}"))),
        })
    }

    /// Executes one instruction.
    pub fn exec(&mut self, ins: &Instruction) -> Result<Flow, Fault> {
        let ops = &ins.operands;
        match ins.opcode.as_str() {
            "label" | "line" | "test_heap" | "recv_marker_reserve" | "recv_marker_bind" | "recv_marker_clear"
            | "recv_marker_use" => {}
            "func_info" => return Err(Fault::FunctionClause),
            "move" => {
                let v = self.get(&ops[0])?;
                self.put(&ops[1], v)?;
            }
            "swap" => {
                let a = self.get(&ops[0])?;
                let b = self.get(&ops[1])?;
                self.put(&ops[0], b)?;
                self.put(&ops[1], a)?;
            }
            "init" | "kill" => self.put(&ops[0], Value::Nil)?,
            "init_yregs" => {
                if let Some(Operand::TaggedList(ys) | Operand::List(ys)) = ops.first() {
                    for y in ys.clone() {
                        self.put(&y, Value::Nil)?;
                    }
                }
            }
            "allocate" | "allocate_heap" | "allocate_zero" | "allocate_heap_zero" => {
                let n = Self::count(ops.first())?;
                let live = Self::count(ops.last())?;
                let fill = if ins.opcode.ends_with("zero") { Some(Value::Nil) } else { None };
                self.frames.push(vec![fill; n]);
                self.clear_x_from(live);
            }
            "deallocate" => self.pop_frame(Self::count(ops.first())?)?,
            "trim" => {
                let n = Self::count(ops.first())?;
                match self.frames.last_mut() {
                    Some(f) if f.len() >= n => {
                        f.drain(..n);
                    }
                    _ => return Err(Fault::BadInstruction("trim beyond the frame".into())),
                }
            }
            "get_tuple_element" => {
                let t = self.get(&ops[0])?;
                let i = Self::count(ops.get(1))?;
                let Value::Tuple(t) = t else {
                    return Err(Fault::Badarg);
                };
                let v = t.borrow().get(i).cloned().ok_or(Fault::Badarg)?;
                self.put(&ops[2], v)?;
            }
            "set_tuple_element" => {
                let v = self.get(&ops[0])?;
                let t = self.get(&ops[1])?;
                let i = Self::count(ops.get(2))?;
                let Value::Tuple(t) = t else {
                    return Err(Fault::Badarg);
                };
                let mut t = t.borrow_mut();
                let slot = t.get_mut(i).ok_or(Fault::Badarg)?;
                *slot = v;
                self.costs.heap_words_copied += 1;
            }
            "get_list" | "get_hd" | "get_tl" => {
                let Value::Cons(c) = self.get(&ops[0])? else {
                    return Err(Fault::Badarg);
                };
                match ins.opcode.as_str() {
                    "get_list" => {
                        self.put(&ops[1], c.0.clone())?;
                        self.put(&ops[2], c.1.clone())?;
                    }
                    "get_hd" => self.put(&ops[1], c.0.clone())?,
                    _ => self.put(&ops[1], c.1.clone())?,
                }
            }
            "put_list" => {
                let h = self.get(&ops[0])?;
                let t = self.get(&ops[1])?;
                self.put(&ops[2], Value::Cons(Rc::new((h, t))))?;
            }
            "bif" | "gc_bif" => {
                let name = match &ops[0] {
                    Operand::Word(w) | Operand::Atom(w) => w.clone(),
                    o => return Err(Fault::BadInstruction(format!("bad bif name {o}"))),
                };
                let (args_op, dst) = if ins.is("bif") { (ops.get(2), &ops[3]) } else { (ops.get(3), &ops[4]) };
                let args = self.args(args_op)?;
                self.costs.reductions += 1;
                match bifs::call(self, "erlang", &name, args) {
                    Ok(v) => self.put(dst, v)?,
                    Err(f) => return Self::fail(&ops[1], f),
                }
            }
            "send" => {
                let to = self.get(&Operand::X(0))?;
                let msg = self.get(&Operand::X(1))?;
                self.costs.reductions += 1;
                bifs::send(self, to, msg.clone())?;
                self.set_x(0, msg);
            }
            "call" => {
                self.costs.reductions += 1;
                return Ok(Flow::Call {
                    label: Self::label_op(ops.get(1))?,
                    arity: Self::count(ops.first())? as u32,
                });
            }
            "call_only" | "call_last" => {
                self.costs.reductions += 1;
                if ins.is("call_last") {
                    self.pop_frame(Self::count(ops.get(2))?)?;
                }
                return Ok(Flow::Tail {
                    label: Self::label_op(ops.get(1))?,
                    arity: Self::count(ops.first())? as u32,
                });
            }
            "call_ext" => {
                return Ok(match self.call_ext(ops.get(1))? {
                    Ok((label, arity)) => Flow::Call { label, arity },
                    Err(()) => Flow::Next,
                })
            }
            "call_ext_only" | "call_ext_last" => {
                if ins.is("call_ext_last") {
                    self.pop_frame(Self::count(ops.get(2))?)?;
                }
                return Ok(match self.call_ext(ops.get(1))? {
                    Ok((label, arity)) => Flow::Tail { label, arity },
                    Err(()) => Flow::Return,
                });
            }
            "return" => return self.leave(),
            "badmatch" => return Err(Fault::Badmatch(self.get(&ops[0])?.to_term())),
            "case_end" => return Err(Fault::CaseClause(self.get(&ops[0])?.to_term())),
            "try_case_end" => return Err(Fault::TryClause(self.get(&ops[0])?.to_term())),
            "if_end" => return Err(Fault::IfClause),
            "jump" => return Ok(Flow::Jump(Self::label_op(ops.first())?)),
            "select_val" | "select_tuple_arity" => {
                let v = self.get(&ops[0])?;
                let fail = Self::label_op(ops.get(1))?;
                let Some(Operand::TaggedList(pairs)) = ops.get(2) else {
                    return Err(Fault::BadInstruction("select without a {list,_}".into()));
                };
                let key = if ins.is("select_tuple_arity") {
                    match &v {
                        Value::Tuple(t) => Value::int(t.borrow().len()),
                        _ => return Ok(Flow::Jump(fail)),
                    }
                } else {
                    v
                };
                for pair in pairs.chunks(2) {
                    let cand = self.get(&pair[0])?;
                    if exact_eq(&key, &cand) {
                        return Ok(Flow::Jump(Self::label_op(pair.get(1))?));
                    }
                }
                return Ok(Flow::Jump(fail));
            }
            "test" => {
                let kind = match &ops[0] {
                    Operand::Word(w) => w.clone(),
                    o => return Err(Fault::BadInstruction(format!("bad test kind {o}"))),
                };
                let fail = Self::label_op(ops.get(1))?;
                let arg_op = if ops.len() == 3 { ops.get(2) } else { ops.get(3) };
                let args = self.args(arg_op)?;
                if ops.len() == 5 {
                    // Guard BIF in test form.
                    self.costs.reductions += 1;
                    return match bifs::call(self, "erlang", &kind, args) {
                        Ok(v) => {
                            self.put(&ops[4], v)?;
                            Ok(Flow::Next)
                        }
                        Err(_) => Ok(Flow::Jump(fail)),
                    };
                }
                if !self.run_test(&kind, &args)? {
                    return Ok(Flow::Jump(fail));
                }
            }
            "bs_start_match4" => {
                let src = self.get(&ops[2])?;
                let ctx = match src {
                    Value::Binary(b) => Value::MatchCtx(Rc::new(MatchState {
                        bin: b,
                        pos: 0.into(),
                    })),
                    v @ Value::MatchCtx(_) => v,
                    _ => return Self::fail(&ops[0], Fault::Badarg),
                };
                self.put(&ops[3], ctx)?;
            }
            "loop_rec" => {
                if self.context.is_some() {
                    return Err(Fault::ReceiveContext("loop_rec inside an open receive context".into()));
                }
                let fail = Self::label_op(ops.first())?;
                match self.mailbox.get(self.save).cloned() {
                    Some(msg) => {
                        self.context = Some(self.cps.len());
                        self.put(&ops[1], msg)?;
                    }
                    None => return Ok(Flow::Jump(fail)),
                }
            }
            "loop_rec_end" => {
                self.check_context("loop_rec_end")?;
                self.save += 1;
                self.context = None;
                return Ok(Flow::Jump(Self::label_op(ops.first())?));
            }
            "remove_message" => {
                self.check_context("remove_message")?;
                self.mailbox.remove(self.save);
                self.save = 0;
                self.context = None;
                self.costs.messages_removed += 1;
            }
            "timeout" => {
                self.check_no_context("timeout")?;
                self.save = 0;
            }
            "wait" => {
                self.check_no_context("wait")?;
                if self.save < self.mailbox.len() {
                    return Ok(Flow::Jump(Self::label_op(ops.first())?));
                }
                return Err(Fault::Deadlock);
            }
            "wait_timeout" => {
                self.check_no_context("wait_timeout")?;
                if self.save < self.mailbox.len() {
                    return Ok(Flow::Jump(Self::label_op(ops.first())?));
                }
                match self.get(&ops[1])? {
                    Value::Int(t) if !t.is_negative() => {
                        self.costs.clock += t.to_u64().unwrap_or(u64::MAX);
                    }
                    Value::Atom(a) if &*a == "infinity" => return Err(Fault::Deadlock),
                    _ => return Err(Fault::Badarg),
                }
            }
            "catch" | "try" => {
                let slot = match &ops[0] {
                    Operand::Y(n) => *n,
                    o => return Err(Fault::BadInstruction(format!("{} needs a y slot, got {o}", ins.opcode))),
                };
                let label = Self::label_op(ops.get(1))?;
                self.put(&ops[0], Value::CatchTag(label))?;
                self.handlers.push(Handler {
                    label,
                    slot,
                    frames: self.frames.len(),
                    cps: self.cps.len(),
                });
            }
            "catch_end" => {
                let slot = Self::y_slot(&ops[0])?;
                self.pop_handler(slot);
                self.put(&ops[0], Value::Nil)?;
                if let Some(f) = self.pending.take() {
                    let reason = match f.class() {
                        "throw" => f.reason(),
                        "exit" => Term::Tuple(vec![Term::atom("EXIT"), f.reason()]),
                        _ => Term::Tuple(vec![Term::atom("EXIT"), Term::Tuple(vec![f.reason(), Term::nil()])]),
                    };
                    self.set_x(0, Value::from_term(&reason));
                }
            }
            "try_end" => {
                let slot = Self::y_slot(&ops[0])?;
                self.pop_handler(slot);
                self.put(&ops[0], Value::Nil)?;
            }
            "try_case" => {
                let slot = Self::y_slot(&ops[0])?;
                self.pop_handler(slot);
                self.put(&ops[0], Value::Nil)?;
                let f = self.pending.take().unwrap_or(Fault::Badarg);
                self.set_x(0, Value::atom(f.class()));
                self.set_x(1, Value::from_term(&f.reason()));
                self.set_x(2, Value::Nil);
            }
            "put_tuple" => {
                let n = Self::count(ops.first())?;
                self.build = Some(Build::Tuple {
                    dst: ops[1].clone(),
                    size: n,
                    items: Vec::with_capacity(n),
                });
                self.finish_build()?;
            }
            "put" => {
                let v = self.get(&ops[0])?;
                match self.build.as_mut() {
                    Some(Build::Tuple { items, .. }) => items.push(v),
                    _ => return Err(Fault::BadInstruction("put outside a tuple construction".into())),
                }
                self.finish_build()?;
            }
            "put_tuple2" => {
                let Some(Operand::TaggedList(items)) = ops.get(1) else {
                    return Err(Fault::BadInstruction("put_tuple2 without a {list,_}".into()));
                };
                let vals = items.clone().iter().map(|o| self.get(o)).collect::<Result<Vec<_>, _>>()?;
                self.put(&ops[0], Value::tuple(vals))?;
            }
            "bs_init2" | "bs_init_bits" => {
                let size = self.get(&ops[1])?.as_usize().ok_or(Fault::Badarg);
                let size = match size {
                    Ok(s) => s,
                    Err(f) => return Self::fail(&ops[0], f),
                };
                let bits = if ins.is("bs_init2") { size * 8 } else { size };
                self.build = Some(Build::Binary {
                    dst: ops[5].clone(),
                    size: bits,
                    buf: Bits::new(),
                });
                self.finish_build()?;
            }
            op if op.starts_with("bs_put_") => self.put_segment(ins)?,
            other => return Err(Fault::UnknownOpcode(other.to_string())),
        }
        Ok(Flow::Next)
    }

    fn y_slot(op: &Operand) -> Result<u32, Fault> {
        match op {
            Operand::Y(n) => Ok(*n),
            o => Err(Fault::BadInstruction(format!("expected a y slot, got {o}"))),
        }
    }

    fn leave(&mut self) -> Result<Flow, Fault> {
        if self.context == Some(self.cps.len()) {
            return Err(Fault::ReceiveContext("return with an open receive context".into()));
        }
        if self.x[0].is_none() {
            self.uninit(Reg::X(0))?;
        }
        Ok(Flow::Return)
    }

    pub fn bump_reductions(&mut self, n: u64) {
        self.costs.reductions += n;
    }

    pub fn next_unique(&mut self) -> BigInt {
        self.unique += 1;
        BigInt::from(self.unique)
    }

    pub fn is_zero_fuel(&self) -> bool {
        self.fuel.is_zero()
    }
}
