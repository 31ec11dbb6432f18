use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{Cfg, EdgeKind};
use crate::asmir::{Instruction, Operand};
use crate::sterm::Term;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionKind {
    Receive,
    Try,
    Catch,
}

impl RegionKind {
    pub fn name(self) -> &'static str {
        match self {
            RegionKind::Receive => "receive",
            RegionKind::Try => "try",
            RegionKind::Catch => "catch",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub kind: RegionKind,
    /// Instruction indices of `loop_rec` / `try` / `catch`.
    pub openers: Vec<usize>,
    /// Instruction indices of the closing instructions.
    pub closers: Vec<usize>,
    /// Blocks visited between openers and closers.
    pub blocks: BTreeSet<usize>,
}

impl Region {
    /// (openers, primary closers): `loop_rec_end` for receives, `catch_end`
    /// for catches, `try_end`/`try_case` for tries.
    pub fn cardinality(&self, c: &Cfg) -> (usize, usize) {
        let closers = self
            .closers
            .iter()
            .filter(|&&i| match self.kind {
                RegionKind::Receive => c.ins(i).is("loop_rec_end"),
                _ => true,
            })
            .count();
        (self.openers.len(), closers)
    }

    /// Closer sites with the given opcode.
    pub fn closers_of<'a>(&'a self, c: &'a Cfg, opcode: &'a str) -> impl Iterator<Item = usize> + 'a {
        self.closers.iter().copied().filter(move |&i| c.ins(i).is(opcode))
    }

    pub fn to_term(&self, c: &Cfg) -> Term {
        let (o, k) = self.cardinality(c);
        let sites = |v: &[usize]| Term::List(v.iter().map(|&i| Term::int(i + 1)).collect());
        Term::Tuple(vec![
            Term::atom(self.kind.name()),
            Term::Tuple(vec![Term::atom("openers"), sites(&self.openers)]),
            Term::Tuple(vec![Term::atom("closers"), sites(&self.closers)]),
            Term::Tuple(vec![Term::atom("cardinality"), Term::Tuple(vec![Term::int(o), Term::int(k)])]),
        ])
    }
}

fn is_receive_closer(ins: &Instruction) -> bool {
    matches!(
        ins.opcode.as_str(),
        "loop_rec_end" | "remove_message" | "timeout" | "wait" | "wait_timeout"
    )
}

/// Successor instruction positions of `i`, skipping exception edges
/// unless `exceptions` is set.
fn next_positions(c: &Cfg, i: usize, exceptions: bool) -> Vec<usize> {
    let Some(b) = c.block_of_index(i) else {
        return Vec::new();
    };
    let block = &c.blocks[b];
    let mut out = Vec::new();
    for e in c.succs(b) {
        let ok = match e.kind {
            EdgeKind::Exception => exceptions,
            _ => e.site == i,
        };
        if ok {
            out.push(c.blocks[e.to].start);
        }
    }
    if i + 1 < block.end && !super::ends_block(c.ins(i)) {
        out.push(i + 1);
    }
    out.sort();
    out.dedup();
    out
}

/// Walks forward from `starts`, calling `visit` on each instruction; the
/// walk stops at instructions for which `visit` returns false.
fn walk(c: &Cfg, starts: Vec<usize>, exceptions: bool, mut visit: impl FnMut(usize) -> bool) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<usize> = starts.into();
    let mut blocks = BTreeSet::new();
    while let Some(i) = queue.pop_front() {
        if i >= c.func.body.len() || !seen.insert(i) {
            continue;
        }
        if let Some(b) = c.block_of_index(i) {
            blocks.insert(b);
        }
        if visit(i) {
            queue.extend(next_positions(c, i, exceptions));
        }
    }
    blocks
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, a: usize) -> usize {
        let mut r = a;
        while self.0[r] != r {
            r = self.0[r];
        }
        self.0[a] = r;
        r
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn group(
    c: &Cfg,
    kind: RegionKind,
    walks: Vec<(usize, BTreeSet<usize>, BTreeSet<usize>)>,
    all_closers: Vec<usize>,
) -> Vec<Region> {
    let mut uf = UnionFind((0..walks.len()).collect());
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for (k, (_, closers, _)) in walks.iter().enumerate() {
        for &cl in closers {
            match owner.get(&cl) {
                Some(&o) => uf.union(o, k),
                None => {
                    owner.insert(cl, k);
                }
            }
        }
    }
    let mut regions: BTreeMap<usize, Region> = BTreeMap::new();
    for (k, (opener, closers, blocks)) in walks.into_iter().enumerate() {
        let root = uf.find(k);
        let r = regions.entry(root).or_insert_with(|| Region {
            kind,
            openers: Vec::new(),
            closers: Vec::new(),
            blocks: BTreeSet::new(),
        });
        r.openers.push(opener);
        r.closers.extend(closers);
        r.blocks.extend(blocks);
    }
    let mut out: Vec<Region> = regions.into_values().collect();
    for cl in all_closers {
        if !owner.contains_key(&cl) {
            out.push(Region {
                kind,
                openers: Vec::new(),
                closers: vec![cl],
                blocks: c.block_of_index(cl).into_iter().collect(),
            });
        }
    }
    for r in &mut out {
        r.openers.sort();
        r.openers.dedup();
        r.closers.sort();
        r.closers.dedup();
    }
    out.sort_by_key(|r| (r.openers.first().copied(), r.closers.first().copied()));
    out
}

fn receive_regions(c: &Cfg) -> Vec<Region> {
    let body = &c.func.body;
    let mut walks = Vec::new();
    for (i, ins) in body.iter().enumerate() {
        if !ins.is("loop_rec") {
            continue;
        }
        let mut closers = BTreeSet::new();
        // Open path: until the context is closed.
        let mut blocks = walk(c, vec![i + 1], false, |j| {
            let ins = c.ins(j);
            if ins.is("loop_rec") {
                return false;
            }
            if is_receive_closer(ins) {
                closers.insert(j);
                return false;
            }
            true
        });
        // Empty-mailbox path through the wait label.
        let wait_start = ins
            .operands
            .first()
            .and_then(Operand::as_label)
            .and_then(|l| c.block_of_label(l))
            .map(|b| c.blocks[b].start);
        if let Some(s) = wait_start {
            blocks.extend(walk(c, vec![s], false, |j| {
                let ins = c.ins(j);
                match ins.opcode.as_str() {
                    "loop_rec" => false,
                    "wait" | "loop_rec_end" | "remove_message" => {
                        closers.insert(j);
                        false
                    }
                    "wait_timeout" | "timeout" => {
                        closers.insert(j);
                        true
                    }
                    _ => true,
                }
            }));
        }
        blocks.extend(c.block_of_index(i));
        walks.push((i, closers, blocks));
    }
    let all: Vec<usize> = (0..body.len()).filter(|&j| is_receive_closer(&body[j])).collect();
    group(c, RegionKind::Receive, walks, all)
}

fn handler_regions(c: &Cfg, kind: RegionKind) -> Vec<Region> {
    let (open, close): (&str, &[&str]) = match kind {
        RegionKind::Catch => ("catch", &["catch_end"]),
        _ => ("try", &["try_end", "try_case"]),
    };
    let slot = |ins: &Instruction| match ins.operands.first() {
        Some(Operand::Y(k)) => Some(*k),
        _ => None,
    };
    let body = &c.func.body;
    let mut walks = Vec::new();
    for (i, ins) in body.iter().enumerate() {
        if !ins.is(open) {
            continue;
        }
        let k = slot(ins);
        let mut closers = BTreeSet::new();
        let mut blocks = walk(c, vec![i + 1], true, |j| {
            let other = c.ins(j);
            if close.contains(&other.opcode.as_str()) && slot(other) == k {
                closers.insert(j);
                return false;
            }
            !(other.is(open) && slot(other) == k)
        });
        blocks.extend(c.block_of_index(i));
        walks.push((i, closers, blocks));
    }
    let all: Vec<usize> = (0..body.len())
        .filter(|&j| close.contains(&body[j].opcode.as_str()))
        .collect();
    group(c, kind, walks, all)
}

/// Receive, try and catch regions of a function.
pub fn annotate_regions(c: &Cfg) -> Vec<Region> {
    let mut out = receive_regions(c);
    out.extend(handler_regions(c, RegionKind::Try));
    out.extend(handler_regions(c, RegionKind::Catch));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequencingDiagnostic {
    pub index: usize,
    pub opcode: String,
    pub reason: String,
    /// Blocks from the entry to the offending block.
    pub witness: Vec<usize>,
}

impl SequencingDiagnostic {
    pub fn to_term(&self) -> Term {
        Term::Tuple(vec![
            Term::atom("receive_sequencing"),
            Term::atom(&self.opcode),
            Term::int(self.index + 1),
            Term::atom(&self.reason),
            Term::Tuple(vec![
                Term::atom("path"),
                Term::List(self.witness.iter().map(|&b| Term::int(b)).collect()),
            ]),
        ])
    }
}

/// Checks that every path opens a receive context before examining or
/// removing a message and closes it before waiting or returning.
pub fn check_receive_sequencing(c: &Cfg, _regions: &[Region]) -> Vec<SequencingDiagnostic> {
    let mut parent: BTreeMap<(usize, bool), Option<(usize, bool)>> = BTreeMap::new();
    let mut queue = VecDeque::new();
    parent.insert((c.entry, false), None);
    queue.push_back((c.entry, false));
    let mut diags: BTreeMap<(usize, &'static str), SequencingDiagnostic> = BTreeMap::new();
    let witness = |parent: &BTreeMap<(usize, bool), Option<(usize, bool)>>, mut node: (usize, bool)| {
        let mut path = vec![node.0];
        while let Some(Some(p)) = parent.get(&node) {
            path.push(p.0);
            node = *p;
        }
        path.reverse();
        path
    };
    while let Some(node @ (b, open0)) = queue.pop_front() {
        let mut open = open0;
        let mut outgoing: Vec<(usize, bool)> = Vec::new();
        let block = c.blocks[b].clone();
        for i in block.range() {
            let ins = c.ins(i);
            let before = open;
            let bad: Option<&'static str> = match ins.opcode.as_str() {
                "loop_rec" if open => Some("nested_receive_context"),
                "loop_rec_end" | "remove_message" if !open => Some("no_open_receive_context"),
                "wait" | "wait_timeout" | "timeout" if open => Some("wait_with_open_context"),
                "return" if open => Some("exit_with_open_context"),
                _ => None,
            };
            if let Some(reason) = bad {
                diags.entry((i, reason)).or_insert_with(|| SequencingDiagnostic {
                    index: i,
                    opcode: ins.opcode.clone(),
                    reason: reason.to_string(),
                    witness: witness(&parent, node),
                });
            }
            open = match ins.opcode.as_str() {
                "loop_rec" => true,
                "loop_rec_end" | "remove_message" | "wait" | "wait_timeout" | "timeout" => false,
                _ => open,
            };
            for e in c.succs(b).filter(|e| e.site == i && e.kind != EdgeKind::Exception) {
                let st = if e.kind == EdgeKind::Fail { before } else { open };
                outgoing.push((e.to, st));
            }
        }
        for e in c.succs(b).filter(|e| e.kind == EdgeKind::Exception) {
            outgoing.push((e.to, false));
        }
        for next in outgoing {
            if let std::collections::btree_map::Entry::Vacant(v) = parent.entry(next) {
                v.insert(Some(node));
                queue.push_back(next);
            }
        }
    }
    diags.into_values().collect()
}
