//! Per-function control-flow graphs.
//!
//! Blocks are split at labels and after terminators. Conditional
//! instructions in the middle of a block (`test`, `loop_rec`, a `bif` with a
//! fail label, ...) leave through side edges that record the instruction
//! index they come from.

mod dot;
pub(crate) mod loops;
mod regions;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use thiserror::Error;

use crate::asmir::{Class, FunctionDef, Instruction, Operand};
pub use dot::export_dot;
pub use loops::{dominates, dominators, find_loops, is_reducible, post_dominators, LoopInfo};
pub use regions::{annotate_regions, check_receive_sequencing, Region, RegionKind, SequencingDiagnostic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Terminator {
    Fallthrough,
    Jump,
    TwoWayTest,
    Select,
    CallExit,
    Return,
    ExceptionExit,
    WaitBackEdge,
    WaitTimeoutConditional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock {
    pub id: usize,
    pub labels: Vec<u32>,
    pub start: usize,
    pub end: usize,
    pub terminator: Terminator,
}

impl BasicBlock {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn last(&self) -> Option<usize> {
        (self.end > self.start).then(|| self.end - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Normal,
    Fail,
    Back,
    Timeout,
    Exception,
}

impl EdgeKind {
    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::Normal => "normal",
            EdgeKind::Fail => "fail",
            EdgeKind::Back => "back",
            EdgeKind::Timeout => "timeout",
            EdgeKind::Exception => "exception",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
    /// Index of the instruction the edge leaves from.
    pub site: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cfg {
    pub func: FunctionDef,
    pub blocks: Vec<BasicBlock>,
    pub edges: Vec<Edge>,
    pub entry: usize,
    label_block: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CfgError {
    #[error("{function}: edge to undefined label {label}")]
    UndefinedLabel { function: String, label: u32 },
}

/// True for instructions after which a new block starts.
pub fn ends_block(ins: &Instruction) -> bool {
    ins.class() == Class::Terminator
        || matches!(
            ins.opcode.as_str(),
            "select_val" | "select_tuple_arity" | "wait" | "wait_timeout" | "loop_rec_end" | "func_info"
        )
}

fn terminator_of(ins: Option<&Instruction>) -> Terminator {
    let Some(ins) = ins else {
        return Terminator::Fallthrough;
    };
    match ins.opcode.as_str() {
        "jump" | "loop_rec_end" => Terminator::Jump,
        "test" | "loop_rec" => Terminator::TwoWayTest,
        "select_val" | "select_tuple_arity" => Terminator::Select,
        "call_only" | "call_last" | "call_ext_only" | "call_ext_last" => Terminator::CallExit,
        "return" => Terminator::Return,
        "badmatch" | "case_end" | "if_end" | "try_case_end" | "func_info" => Terminator::ExceptionExit,
        "wait" => Terminator::WaitBackEdge,
        "wait_timeout" => Terminator::WaitTimeoutConditional,
        _ if !ends_block(ins) && !side_exits(ins).is_empty() => Terminator::TwoWayTest,
        _ => Terminator::Fallthrough,
    }
}

/// Labels of conditional exits of an instruction that does not end a
/// block, or of the fail target of a block-ending select.
fn side_exits(ins: &Instruction) -> Vec<u32> {
    match ins.opcode.as_str() {
        "catch" | "try" | "label" | "call" | "call_last" | "call_only" | "make_fun2" | "make_fun3" => Vec::new(),
        _ if ends_block(ins) => Vec::new(),
        _ => ins.label_refs(),
    }
}

impl Cfg {
    pub fn name(&self) -> String {
        format!("{}/{}", self.func.name, self.func.arity)
    }

    pub fn block_of_label(&self, l: u32) -> Option<usize> {
        self.label_block.get(&l).copied()
    }

    pub fn block_of_index(&self, i: usize) -> Option<usize> {
        self.blocks.iter().position(|b| b.range().contains(&i))
    }

    pub fn ins(&self, i: usize) -> &Instruction {
        &self.func.body[i]
    }

    pub fn succs(&self, b: usize) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| e.from == b)
    }

    pub fn preds(&self, b: usize) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| e.to == b)
    }

    pub fn succ_blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.blocks.len()];
        for e in &self.edges {
            if !out[e.from].contains(&e.to) {
                out[e.from].push(e.to);
            }
        }
        out
    }

    pub fn pred_blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.blocks.len()];
        for e in &self.edges {
            if !out[e.to].contains(&e.from) {
                out[e.to].push(e.from);
            }
        }
        out
    }

    /// Blocks reachable from the entry, in reverse postorder.
    pub fn reverse_postorder(&self) -> Vec<usize> {
        let succ = self.succ_blocks();
        let mut seen = vec![false; self.blocks.len()];
        let mut post = Vec::new();
        let mut stack = vec![(self.entry, 0usize)];
        seen[self.entry] = true;
        while let Some((b, i)) = stack.pop() {
            if let Some(&s) = succ[b].get(i) {
                stack.push((b, i + 1));
                if !seen[s] {
                    seen[s] = true;
                    stack.push((s, 0));
                }
            } else {
                post.push(b);
            }
        }
        post.reverse();
        post
    }

    pub fn reachable(&self) -> BTreeSet<usize> {
        self.reverse_postorder().into_iter().collect()
    }

    pub fn back_edges(&self) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Back)
    }
}

/// Builds the control-flow graph of one function.
pub fn build_cfg(f: &FunctionDef) -> Result<Cfg, CfgError> {
    let body = &f.body;
    let mut starts = BTreeSet::new();
    starts.insert(0);
    for (i, ins) in body.iter().enumerate() {
        if ins.is("label") && !(i > 0 && body[i - 1].is("label")) {
            starts.insert(i);
        }
        if ends_block(ins) && i + 1 < body.len() {
            starts.insert(i + 1);
        }
    }
    let starts: Vec<usize> = starts.into_iter().collect();
    let mut blocks = Vec::new();
    let mut label_block = BTreeMap::new();
    for (id, &s) in starts.iter().enumerate() {
        let e = starts.get(id + 1).copied().unwrap_or(body.len()).max(s);
        let labels: Vec<u32> = body[s..e].iter().map_while(Instruction::label_id).collect();
        for &l in &labels {
            label_block.insert(l, id);
        }
        blocks.push(BasicBlock {
            id,
            labels,
            start: s,
            end: e,
            terminator: terminator_of(body[s..e].last()),
        });
    }
    let undefined = |l: u32| CfgError::UndefinedLabel {
        function: format!("{}/{}", f.name, f.arity),
        label: l,
    };
    let target = |l: u32| label_block.get(&l).copied().ok_or_else(|| undefined(l));
    let mut edges: Vec<Edge> = Vec::new();
    let add = |edges: &mut Vec<Edge>, e: Edge| {
        if !edges.iter().any(|x| x.from == e.from && x.to == e.to && x.kind == e.kind) {
            edges.push(e);
        }
    };
    for b in &blocks {
        for i in b.range() {
            for l in side_exits(&body[i]) {
                add(&mut edges, Edge { from: b.id, to: target(l)?, kind: EdgeKind::Fail, site: i });
            }
        }
        let Some(last) = b.last() else {
            if b.id + 1 < blocks.len() {
                add(&mut edges, Edge { from: b.id, to: b.id + 1, kind: EdgeKind::Normal, site: b.start });
            }
            continue;
        };
        let ins = &body[last];
        let next = (b.id + 1 < blocks.len()).then_some(b.id + 1);
        let label0 = || ins.operands.first().and_then(Operand::as_label);
        match ins.opcode.as_str() {
            "jump" => add(&mut edges, Edge { from: b.id, to: target(label0().unwrap_or(0))?, kind: EdgeKind::Normal, site: last }),
            "loop_rec_end" | "wait" => {
                add(&mut edges, Edge { from: b.id, to: target(label0().unwrap_or(0))?, kind: EdgeKind::Back, site: last })
            }
            "wait_timeout" => {
                add(&mut edges, Edge { from: b.id, to: target(label0().unwrap_or(0))?, kind: EdgeKind::Back, site: last });
                if let Some(n) = next {
                    add(&mut edges, Edge { from: b.id, to: n, kind: EdgeKind::Timeout, site: last });
                }
            }
            "select_val" | "select_tuple_arity" => {
                if let Some(l) = ins.operands.get(1).and_then(Operand::as_label) {
                    add(&mut edges, Edge { from: b.id, to: target(l)?, kind: EdgeKind::Fail, site: last });
                }
                if let Some(Operand::TaggedList(pairs)) = ins.operands.get(2) {
                    for p in pairs.chunks(2) {
                        if let Some(l) = p.get(1).and_then(Operand::as_label) {
                            add(&mut edges, Edge { from: b.id, to: target(l)?, kind: EdgeKind::Normal, site: last });
                        }
                    }
                }
            }
            _ if ends_block(ins) => {}
            _ => {
                if let Some(n) = next {
                    add(&mut edges, Edge { from: b.id, to: n, kind: EdgeKind::Normal, site: last });
                }
            }
        }
    }
    let entry = label_block.get(&f.entry).copied().unwrap_or(0);
    let mut cfg = Cfg {
        func: f.clone(),
        blocks,
        edges,
        entry,
        label_block,
    };
    add_exception_edges(&mut cfg);
    Ok(cfg)
}

/// Adds an exception edge from every block in which a catch or try handler
/// is active to the handler's block.
fn add_exception_edges(cfg: &mut Cfg) {
    type Active = BTreeSet<(u32, u32)>;
    let n = cfg.blocks.len();
    let mut input: Vec<Option<Active>> = vec![None; n];
    let mut touched: Vec<Active> = vec![Active::new(); n];
    input[cfg.entry] = Some(Active::new());
    let mut work: Vec<usize> = vec![cfg.entry];
    let slot_of = |ins: &Instruction| match ins.operands.first() {
        Some(Operand::Y(k)) => Some(*k),
        _ => None,
    };
    while let Some(b) = work.pop() {
        let mut st = input[b].clone().unwrap_or_default();
        let block = cfg.blocks[b].clone();
        let mut out_at: Vec<(usize, Active)> = Vec::new();
        for i in block.range() {
            let ins = cfg.ins(i);
            match ins.opcode.as_str() {
                "catch" | "try" => {
                    if let (Some(k), Some(l)) = (slot_of(ins), ins.operands.get(1).and_then(Operand::as_label)) {
                        st.retain(|(s, _)| *s != k);
                        st.insert((k, l));
                    }
                }
                "catch_end" | "try_end" | "try_case" => {
                    if let Some(k) = slot_of(ins) {
                        st.retain(|(s, _)| *s != k);
                    }
                }
                _ => {}
            }
            touched[b].extend(st.iter().copied());
            out_at.push((i, st.clone()));
        }
        let edges: Vec<Edge> = cfg.succs(b).copied().collect();
        for e in edges {
            let st = out_at
                .iter()
                .find(|(i, _)| *i == e.site)
                .map(|(_, s)| s.clone())
                .unwrap_or_else(|| st.clone());
            let slot = &mut input[e.to];
            let changed = match slot {
                None => {
                    *slot = Some(st);
                    true
                }
                Some(cur) => {
                    let before = cur.len();
                    cur.extend(st);
                    cur.len() != before
                }
            };
            if changed {
                work.push(e.to);
            }
        }
    }
    for b in 0..n {
        for &(_, l) in &touched[b] {
            if let Some(h) = cfg.block_of_label(l) {
                if h != b && !cfg.edges.iter().any(|e| e.from == b && e.to == h && e.kind == EdgeKind::Exception) {
                    let site = cfg.blocks[b].last().unwrap_or(cfg.blocks[b].start);
                    cfg.edges.push(Edge { from: b, to: h, kind: EdgeKind::Exception, site });
                }
            }
        }
    }
}
