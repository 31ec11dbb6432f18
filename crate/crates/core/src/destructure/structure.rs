//! Goto-free structuring of function bodies.
//!
//! The body becomes a graph with one node per instruction. Irreducible
//! regions are made reducible by node splitting or by a dispatch variable,
//! loops are collapsed innermost first, and each acyclic region is emitted
//! by following immediate post-dominators. Branches whose arms share code
//! fall back to a guarded state sequence unless tail un-merging is enabled.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use thiserror::Error;

use super::pseudo::PseudoExpr;
use crate::asmir::{opcodes, FunctionDef, Instruction, ModuleAsm, Operand};
use crate::cfg::loops::{dominates_in, idoms, sccs};
use crate::cfg::{build_cfg, CfgError};
use crate::sterm::Term;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    /// Node splitting.
    #[default]
    Duplicate,
    /// Dispatch variables.
    CondVars,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Strategy> {
        match s {
            "duplicate" => Some(Strategy::Duplicate),
            "condvars" | "condition-variables" => Some(Strategy::CondVars),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StructureOptions {
    pub strategy: Strategy,
    /// Node splitting may grow the graph to this multiple of its size.
    pub cap_factor: usize,
    /// Duplicate shared branch tails instead of using a state sequence.
    pub unmerge_tails: bool,
}

impl Default for StructureOptions {
    fn default() -> Self {
        StructureOptions {
            strategy: Strategy::Duplicate,
            cap_factor: 8,
            unmerge_tails: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StructError {
    #[error("{function}: node splitting needs more than {cap} nodes (started from {initial})")]
    BlowUp { function: String, initial: usize, cap: usize },
    #[error(transparent)]
    Cfg(#[from] CfgError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Structured {
    pub name: String,
    pub arity: u32,
    pub expr: PseudoExpr,
    /// Cfg blocks reachable from the entry.
    pub reachable_blocks: BTreeSet<usize>,
    /// Cfg blocks represented in `expr`.
    pub covered_blocks: BTreeSet<usize>,
    /// Instruction nodes before any splitting.
    pub initial_nodes: usize,
    /// Nodes added by splitting.
    pub duplicated: usize,
    /// Irreducible regions repaired.
    pub irreducible_regions: usize,
    pub dispatch_vars: Vec<String>,
    pub loops: usize,
    pub state_sequences: usize,
}

impl Structured {
    /// Every reachable Cfg block appears in the output.
    pub fn covers_cfg(&self) -> bool {
        self.reachable_blocks.is_subset(&self.covered_blocks)
    }

    pub fn to_term(&self) -> Term {
        let kv = |k: &str, v: Term| Term::Tuple(vec![Term::atom(k), v]);
        Term::Tuple(vec![
            Term::atom("structured"),
            Term::Tuple(vec![Term::atom(&self.name), Term::int(self.arity)]),
            Term::List(vec![
                kv(
                    "blocks",
                    Term::Tuple(vec![Term::int(self.covered_blocks.len()), Term::int(self.reachable_blocks.len())]),
                ),
                kv("initial_nodes", Term::int(self.initial_nodes)),
                kv("duplicated", Term::int(self.duplicated)),
                kv("irreducible_regions", Term::int(self.irreducible_regions)),
                kv("dispatch_vars", Term::List(self.dispatch_vars.iter().map(|v| Term::atom(v)).collect())),
                kv("loops", Term::int(self.loops)),
                kv("state_sequences", Term::int(self.state_sequences)),
            ]),
        ])
    }
}

impl StructError {
    pub fn to_term(&self) -> Term {
        match self {
            StructError::BlowUp { function, initial, cap } => Term::Tuple(vec![
                Term::atom("blow_up"),
                Term::atom(function),
                Term::int(*initial),
                Term::int(*cap),
            ]),
            StructError::Cfg(e) => Term::Tuple(vec![Term::atom("cfg"), Term::string(&e.to_string())]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Arm {
    Next,
    Label(u32),
    Value(i64),
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Ins(usize),
    /// `jump`: no code.
    Nop(usize),
    Set(String, i64),
    Dispatch(String),
}

#[derive(Debug, Clone)]
struct Node {
    kind: Kind,
    succ: Vec<usize>,
    arms: Vec<Arm>,
}

#[derive(Debug, Clone)]
struct Graph {
    nodes: Vec<Node>,
    entry: usize,
}

enum Shape {
    Stop,
    Goto(u32),
    Stmt,
    StmtGoto(u32),
    Branch(Vec<Arm>),
}

fn shape(ins: &Instruction) -> Shape {
    let label = |i: usize| ins.operands.get(i).and_then(Operand::as_label).unwrap_or(0);
    match ins.opcode.as_str() {
        "return" | "call_only" | "call_last" | "call_ext_only" | "call_ext_last" | "badmatch" | "case_end"
        | "if_end" | "try_case_end" | "func_info" => Shape::Stop,
        "jump" => Shape::Goto(label(0)),
        "loop_rec_end" | "wait" => Shape::StmtGoto(label(0)),
        "select_val" | "select_tuple_arity" => {
            let mut arms = vec![Arm::Label(label(1))];
            if let Some(Operand::TaggedList(pairs)) = ins.operands.get(2) {
                for p in pairs.chunks(2) {
                    if let Some(l) = p.get(1).and_then(Operand::as_label) {
                        arms.push(Arm::Label(l));
                    }
                }
            }
            let mut seen = BTreeSet::new();
            arms.retain(|a| seen.insert(*a));
            Shape::Branch(arms)
        }
        "call" | "call_ext" | "make_fun2" | "make_fun3" => Shape::Stmt,
        _ => {
            let mut refs = ins.label_refs();
            refs.dedup();
            if refs.is_empty() {
                Shape::Stmt
            } else {
                Shape::Branch(std::iter::once(Arm::Next).chain(refs.into_iter().map(Arm::Label)).collect())
            }
        }
    }
}

fn build_graph(f: &FunctionDef) -> Graph {
    let body = &f.body;
    let skip = |mut i: usize| {
        while i < body.len() && (body[i].is("label") || body[i].is("line")) {
            i += 1;
        }
        i
    };
    let at_label = |l: u32| f.label_index(l).map(skip);
    let mut nodes: Vec<Node> = Vec::new();
    let mut id: HashMap<usize, usize> = HashMap::new();
    let mut work = VecDeque::new();
    let intern = |i: usize, id: &mut HashMap<usize, usize>, nodes: &mut Vec<Node>, work: &mut VecDeque<usize>| -> usize {
        *id.entry(i).or_insert_with(|| {
            nodes.push(Node {
                kind: Kind::Ins(i),
                succ: Vec::new(),
                arms: Vec::new(),
            });
            work.push_back(i);
            nodes.len() - 1
        })
    };
    let Some(start) = at_label(f.entry).filter(|&i| i < body.len()) else {
        return Graph {
            nodes: vec![Node {
                kind: Kind::Nop(0),
                succ: Vec::new(),
                arms: Vec::new(),
            }],
            entry: 0,
        };
    };
    let entry = intern(start, &mut id, &mut nodes, &mut work);
    while let Some(i) = work.pop_front() {
        let n = id[&i];
        let target = |a: Arm| match a {
            Arm::Next => Some(skip(i + 1)),
            Arm::Label(l) => at_label(l),
            Arm::Value(_) => None,
        };
        let (kind, arms) = match shape(&body[i]) {
            Shape::Stop => (Kind::Ins(i), vec![]),
            Shape::Goto(l) => (Kind::Nop(i), vec![Arm::Label(l)]),
            Shape::StmtGoto(l) => (Kind::Ins(i), vec![Arm::Label(l)]),
            Shape::Stmt => (Kind::Ins(i), vec![Arm::Next]),
            Shape::Branch(arms) => (Kind::Ins(i), arms),
        };
        let mut succ = Vec::new();
        let mut kept = Vec::new();
        for a in arms {
            if let Some(t) = target(a).filter(|&t| t < body.len()) {
                succ.push(intern(t, &mut id, &mut nodes, &mut work));
                kept.push(a);
            }
        }
        if succ.len() > 1 && succ.iter().all(|&s| s == succ[0]) {
            succ.truncate(1);
            kept = vec![Arm::Next];
        }
        nodes[n] = Node {
            kind,
            succ,
            arms: kept,
        };
    }
    Graph { nodes, entry }
}

impl Graph {
    fn succ(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .map(|n| {
                let mut s = n.succ.clone();
                s.sort_unstable();
                s.dedup();
                s
            })
            .collect()
    }

    fn preds(&self) -> Vec<Vec<usize>> {
        let mut p = vec![Vec::new(); self.nodes.len()];
        for (u, ss) in self.succ().iter().enumerate() {
            for &s in ss {
                p[s].push(u);
            }
        }
        p
    }

    fn reachable(&self) -> BTreeSet<usize> {
        let succ = self.succ();
        let mut seen = BTreeSet::from([self.entry]);
        let mut stack = vec![self.entry];
        while let Some(u) = stack.pop() {
            for &s in &succ[u] {
                if seen.insert(s) {
                    stack.push(s);
                }
            }
        }
        seen
    }

    fn rpo_index(&self) -> Vec<usize> {
        let succ = self.succ();
        let mut seen = vec![false; succ.len()];
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
        let mut order = vec![usize::MAX; succ.len()];
        for (k, &b) in post.iter().rev().enumerate() {
            order[b] = k;
        }
        order
    }

    /// A strongly connected region with more than one entry node, as
    /// (region, entries sorted by reverse postorder).
    fn irreducible_region(&self) -> Option<(BTreeSet<usize>, Vec<usize>)> {
        let succ = self.succ();
        let preds = self.preds();
        let order = self.rpo_index();
        let mut work: Vec<(BTreeSet<usize>, Option<usize>)> = vec![(self.reachable(), None)];
        while let Some((set, header)) = work.pop() {
            let sub: Vec<Vec<usize>> = succ
                .iter()
                .enumerate()
                .map(|(u, ss)| {
                    if !set.contains(&u) {
                        return Vec::new();
                    }
                    ss.iter().copied().filter(|s| set.contains(s) && Some(*s) != header).collect()
                })
                .collect();
            for comp in sccs(&sub, &set) {
                let cyclic = comp.len() > 1 || sub[comp[0]].contains(&comp[0]);
                if !cyclic {
                    continue;
                }
                let members: BTreeSet<usize> = comp.iter().copied().collect();
                let mut entries: Vec<usize> = comp
                    .iter()
                    .copied()
                    .filter(|&v| v == self.entry || preds[v].iter().any(|p| !members.contains(p)))
                    .collect();
                entries.sort_by_key(|&v| order[v]);
                if entries.len() > 1 {
                    return Some((members, entries));
                }
                work.push((members, entries.first().copied()));
            }
        }
        None
    }

    fn redirect(&mut self, from: impl Fn(usize) -> bool, old: usize, new: usize) {
        for u in 0..self.nodes.len() {
            if from(u) {
                for s in self.nodes[u].succ.iter_mut() {
                    if *s == old {
                        *s = new;
                    }
                }
            }
        }
    }

    /// Splits the part of `region` reachable from `entry` without passing
    /// through `header`, giving outside predecessors their own copy.
    fn split(&mut self, region: &BTreeSet<usize>, header: usize, entry: usize) {
        let succ = self.succ();
        let mut part = BTreeSet::from([entry]);
        let mut stack = vec![entry];
        while let Some(u) = stack.pop() {
            for &s in &succ[u] {
                if s != header && region.contains(&s) && part.insert(s) {
                    stack.push(s);
                }
            }
        }
        let originals = self.nodes.len();
        let copy: BTreeMap<usize, usize> = part.iter().enumerate().map(|(k, &u)| (u, originals + k)).collect();
        for &u in &part {
            let mut n = self.nodes[u].clone();
            for s in n.succ.iter_mut() {
                if let Some(&c) = copy.get(s) {
                    *s = c;
                }
            }
            self.nodes.push(n);
        }
        for (&u, &c) in &copy {
            self.redirect(|p| p < originals && !region.contains(&p), u, c);
        }
        if let Some(&c) = copy.get(&self.entry) {
            self.entry = c;
        }
    }

    /// Routes every edge into an entry of `region` through a dispatch node
    /// on a fresh variable, making the dispatch node the only entry.
    fn add_dispatch(&mut self, region: &BTreeSet<usize>, entries: &[usize], var: &str) {
        let originals = self.nodes.len();
        let dispatch = originals;
        self.nodes.push(Node {
            kind: Kind::Dispatch(var.to_string()),
            succ: entries.to_vec(),
            arms: (0..entries.len() as i64).map(Arm::Value).collect(),
        });
        for (i, &e) in entries.iter().enumerate() {
            for inside in [true, false] {
                let set = self.nodes.len();
                self.nodes.push(Node {
                    kind: Kind::Set(var.to_string(), i as i64),
                    succ: vec![dispatch],
                    arms: vec![Arm::Next],
                });
                self.redirect(|p| p < originals && region.contains(&p) == inside, e, set);
                if !inside && self.entry == e {
                    self.entry = set;
                }
            }
        }
        self.prune();
    }

    /// Drops unreachable nodes, renumbering the rest.
    fn prune(&mut self) {
        let live = self.reachable();
        let map: HashMap<usize, usize> = live.iter().enumerate().map(|(k, &u)| (u, k)).collect();
        let mut nodes = Vec::with_capacity(live.len());
        for &u in &live {
            let mut n = self.nodes[u].clone();
            n.succ = n.succ.iter().map(|s| map[s]).collect();
            nodes.push(n);
        }
        self.entry = map[&self.entry];
        self.nodes = nodes;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Abs {
    Node(usize),
    Loop(usize),
    Cont,
    Exit(usize),
    End,
    Super,
}

struct Region {
    header: Option<usize>,
    nodes: Vec<Abs>,
    succ: Vec<Vec<usize>>,
    /// Arms of each abstract node, parallel to `succ`.
    arms: Vec<Vec<Arm>>,
    ipdom: Vec<Option<usize>>,
    sink: usize,
}

struct Emitter<'a> {
    f: &'a FunctionDef,
    callees: &'a BTreeMap<u32, (String, u32)>,
    g: Graph,
    unmerge: bool,
    bodies: BTreeMap<usize, BTreeSet<usize>>,
    exits: BTreeMap<usize, Vec<usize>>,
    /// Innermost loop header of each node.
    loop_of: Vec<Option<usize>>,
    parent: BTreeMap<usize, Option<usize>>,
    emitted: BTreeSet<usize>,
    loops: usize,
    states: usize,
    fresh: usize,
}

fn reg_var(op: &Operand) -> PseudoExpr {
    match op {
        Operand::X(n) => PseudoExpr::Var(format!("X{n}")),
        Operand::Y(n) => PseudoExpr::Var(format!("Y{n}")),
        o => PseudoExpr::Lit(o.to_term()),
    }
}

fn int(v: i64) -> PseudoExpr {
    PseudoExpr::Lit(Term::int(v))
}

fn eq(a: PseudoExpr, b: PseudoExpr) -> PseudoExpr {
    PseudoExpr::prim("=:=", vec![a, b])
}

fn arm_value(a: Arm) -> PseudoExpr {
    match a {
        Arm::Next => PseudoExpr::atom("true"),
        Arm::Label(l) => int(l as i64),
        Arm::Value(v) => int(v),
    }
}

/// Pseudo-source statements for one instruction.
pub(crate) fn render_instruction(ins: &Instruction, callees: &BTreeMap<u32, (String, u32)>) -> Vec<PseudoExpr> {
    use PseudoExpr as P;
    let ops = &ins.operands;
    let xs = |n: u64| (0..n).map(|i| P::Var(format!("X{i}"))).collect::<Vec<_>>();
    let local = |n: &Operand, l: &Operand| -> Option<PseudoExpr> {
        let n = n.as_u64()?;
        let (name, arity) = callees.get(&l.as_label()?)?;
        (*arity as u64 == n).then(|| P::Call(None, name.clone(), xs(n)))
    };
    let remote = |n: &Operand, e: &Operand| -> Option<PseudoExpr> {
        let n = n.as_u64()?;
        match e {
            Operand::ExtFunc {
                module,
                function,
                arity,
            } if *arity as u64 == n => Some(P::Call(Some(module.clone()), function.clone(), xs(n))),
            _ => None,
        }
    };
    let tail = |call: Option<PseudoExpr>, dealloc: Option<&Operand>| -> Option<Vec<PseudoExpr>> {
        let mut out = Vec::new();
        if let Some(d) = dealloc {
            out.push(P::prim("deallocate", vec![reg_var(d)]));
        }
        out.push(P::prim("return", vec![call?]));
        Some(out)
    };
    let special = match (ins.opcode.as_str(), ops.as_slice()) {
        ("move", [s, d]) => Some(vec![P::assign(reg_var(d), reg_var(s))]),
        ("return", []) => Some(vec![P::prim("return", vec![])]),
        ("call", [n, l]) => local(n, l).map(|c| vec![c]),
        ("call_ext", [n, e]) => remote(n, e).map(|c| vec![c]),
        ("call_only", [n, l]) => tail(local(n, l), None),
        ("call_last", [n, l, d]) => tail(local(n, l), Some(d)),
        ("call_ext_only", [n, e]) => tail(remote(n, e), None),
        ("call_ext_last", [n, e, d]) => tail(remote(n, e), Some(d)),
        ("loop_rec", [_, d]) => Some(vec![P::prim("peek_message", vec![reg_var(d)])]),
        ("loop_rec_end", [_]) => Some(vec![P::prim("next_message", vec![])]),
        ("wait", [_]) => Some(vec![P::prim("wait_message", vec![])]),
        ("wait_timeout", [_, t]) => Some(vec![P::prim("timeout_expired", vec![reg_var(t)])]),
        ("test", [Operand::Word(kind), _, Operand::List(args)]) if opcodes::lookup(kind).is_none() => {
            Some(vec![P::prim(kind, args.iter().map(reg_var).collect())])
        }
        _ => None,
    };
    special.unwrap_or_else(|| vec![P::prim(&ins.opcode, ops.iter().map(reg_var).collect())])
}

impl<'a> Emitter<'a> {
    fn analyze_loops(&mut self) {
        let succ = self.g.succ();
        let idom = idoms(&succ, self.g.entry);
        let preds = self.g.preds();
        let mut bodies: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (u, ss) in succ.iter().enumerate() {
            if idom[u].is_none() {
                continue;
            }
            for &h in ss {
                if dominates_in(&idom, h, u) {
                    let body = bodies.entry(h).or_insert_with(|| BTreeSet::from([h]));
                    let mut stack = vec![u];
                    while let Some(v) = stack.pop() {
                        if body.insert(v) {
                            stack.extend(preds[v].iter().copied());
                        }
                    }
                }
            }
        }
        let n = self.g.nodes.len();
        self.loop_of = (0..n)
            .map(|v| {
                bodies
                    .iter()
                    .filter(|(_, b)| b.contains(&v))
                    .min_by_key(|(_, b)| b.len())
                    .map(|(&h, _)| h)
            })
            .collect();
        for (&h, body) in &bodies {
            let p = bodies
                .iter()
                .filter(|(&k, b)| k != h && b.len() > body.len() && b.contains(&h))
                .min_by_key(|(_, b)| b.len())
                .map(|(&k, _)| k);
            self.parent.insert(h, p);
            let mut ex: Vec<usize> = body
                .iter()
                .flat_map(|&v| succ[v].iter().copied())
                .filter(|s| !body.contains(s))
                .collect();
            ex.sort_unstable();
            ex.dedup();
            self.exits.insert(h, ex);
        }
        self.bodies = bodies;
    }

    /// Representative of `v` inside the region headed by `header`.
    fn rep(&self, v: usize, header: Option<usize>) -> Abs {
        let mut chain = Vec::new();
        let mut cur = self.loop_of[v];
        while let Some(h) = cur {
            if Some(h) == header {
                break;
            }
            chain.push(h);
            cur = self.parent[&h];
        }
        match chain.last() {
            Some(&h) => Abs::Loop(h),
            None => Abs::Node(v),
        }
    }

    fn region(&self, header: Option<usize>, start: usize) -> Region {
        let body = header.map(|h| &self.bodies[&h]);
        let exits = header.map(|h| &self.exits[&h]);
        let target = |t: usize| -> Abs {
            if Some(t) == header {
                Abs::Cont
            } else if body.is_some_and(|b| !b.contains(&t)) {
                Abs::Exit(exits.unwrap().iter().position(|&e| e == t).unwrap())
            } else {
                self.rep(t, header)
            }
        };
        let out_of = |a: Abs| -> (Vec<Abs>, Vec<Arm>) {
            let (succ, arms): (Vec<usize>, Vec<Arm>) = match a {
                Abs::Node(v) => (self.g.nodes[v].succ.clone(), self.g.nodes[v].arms.clone()),
                Abs::Loop(h) => {
                    let ex = &self.exits[&h];
                    (ex.clone(), (1..=ex.len() as i64).map(Arm::Value).collect())
                }
                Abs::Cont | Abs::Exit(_) | Abs::End => return (vec![Abs::Super], vec![Arm::Next]),
                Abs::Super => return (vec![], vec![]),
            };
            if succ.is_empty() {
                return (vec![Abs::End], vec![Arm::Next]);
            }
            (succ.into_iter().map(target).collect(), arms)
        };
        let first = if Some(start) == header {
            Abs::Node(start)
        } else {
            target(start)
        };
        let mut nodes = vec![first];
        let mut index = HashMap::from([(first, 0)]);
        let mut succ: Vec<Vec<usize>> = Vec::new();
        let mut arms = Vec::new();
        let mut k = 0;
        while k < nodes.len() {
            let (ss, aa) = out_of(nodes[k]);
            let ids = ss
                .into_iter()
                .map(|s| {
                    *index.entry(s).or_insert_with(|| {
                        nodes.push(s);
                        nodes.len() - 1
                    })
                })
                .collect();
            succ.push(ids);
            arms.push(aa);
            k += 1;
        }
        let sink = match index.get(&Abs::Super) {
            Some(&s) => s,
            None => {
                nodes.push(Abs::Super);
                succ.push(vec![]);
                arms.push(vec![]);
                nodes.len() - 1
            }
        };
        let mut rev = vec![Vec::new(); nodes.len()];
        for (u, ss) in succ.iter().enumerate() {
            for &s in ss {
                if !rev[s].contains(&u) {
                    rev[s].push(u);
                }
            }
        }
        let ipdom = idoms(&rev, sink);
        Region {
            header,
            nodes,
            succ,
            arms,
            ipdom,
            sink,
        }
    }

    fn mark(&mut self, v: usize) {
        self.emitted.insert(v);
    }

    fn statement(&mut self, v: usize) -> Vec<PseudoExpr> {
        self.mark(v);
        match &self.g.nodes[v].kind {
            Kind::Ins(i) => render_instruction(&self.f.body[*i], self.callees),
            Kind::Nop(_) | Kind::Dispatch(_) => Vec::new(),
            Kind::Set(var, k) => vec![PseudoExpr::assign(PseudoExpr::var(var), int(*k))],
        }
    }

    /// Code for an abstract node and the expression its arms test, if any.
    fn node_code(&mut self, r: &Region, a: usize) -> (Vec<PseudoExpr>, Option<PseudoExpr>) {
        match r.nodes[a] {
            Abs::Node(v) => {
                let mut code = self.statement(v);
                let distinct: BTreeSet<usize> = r.succ[a].iter().copied().collect();
                if distinct.len() < 2 {
                    return (code, None);
                }
                if let Kind::Dispatch(var) = &self.g.nodes[v].kind {
                    return (code, Some(PseudoExpr::var(var)));
                }
                let cond = code.pop();
                (code, cond)
            }
            Abs::Loop(h) => {
                let code = self.emit_loop(h);
                let distinct: BTreeSet<usize> = r.succ[a].iter().copied().collect();
                if distinct.len() < 2 {
                    return (code, None);
                }
                (code, Some(PseudoExpr::var(&format!("V{h}"))))
            }
            Abs::Exit(k) => {
                let h = r.header.expect("loop exit outside a loop");
                (vec![PseudoExpr::assign(PseudoExpr::var(&format!("V{h}")), int(k as i64 + 1))], None)
            }
            Abs::Cont | Abs::End | Abs::Super => (Vec::new(), None),
        }
    }

    /// `if` over the arms of branch node `a`, with `arm_body` giving the code
    /// of each distinct target.
    fn branch(
        &mut self,
        r: &Region,
        a: usize,
        test: PseudoExpr,
        code: &mut Vec<PseudoExpr>,
        mut arm_body: impl FnMut(&mut Self, usize) -> PseudoExpr,
    ) {
        let succ = &r.succ[a];
        let arms = &r.arms[a];
        let mut targets: Vec<usize> = Vec::new();
        for &s in succ {
            if !targets.contains(&s) {
                targets.push(s);
            }
        }
        let two_way = arms.len() == 2 && arms[0] == Arm::Next && targets.len() == 2;
        let is_dispatch_var = matches!(&test, PseudoExpr::Var(_));
        let subject = if two_way || is_dispatch_var {
            test.clone()
        } else {
            let var = PseudoExpr::var(&format!("C{}", self.fresh));
            self.fresh += 1;
            code.push(PseudoExpr::assign(var.clone(), test.clone()));
            var
        };
        if two_way {
            let then = arm_body(self, succ[0]);
            let other = arm_body(self, succ[1]);
            code.push(PseudoExpr::If(vec![(subject, then), (PseudoExpr::atom("true"), other)]));
            return;
        }
        // The target taken by most arms becomes the default.
        let default = *targets
            .iter()
            .max_by_key(|&&t| (succ.iter().filter(|&&s| s == t).count(), std::cmp::Reverse(t)))
            .unwrap();
        let mut out = Vec::new();
        for (k, &s) in succ.iter().enumerate() {
            if s != default {
                out.push((eq(subject.clone(), arm_value(arms[k])), arm_body(self, s)));
            }
        }
        out.push((PseudoExpr::atom("true"), arm_body(self, default)));
        code.push(PseudoExpr::If(out));
    }

    fn reach_before(&self, r: &Region, from: usize, join: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(u) = stack.pop() {
            if u == join || !seen.insert(u) {
                continue;
            }
            stack.extend(r.succ[u].iter().copied());
        }
        seen
    }

    fn is_sink(r: &Region, u: usize) -> bool {
        matches!(r.nodes[u], Abs::Cont | Abs::Exit(_) | Abs::End | Abs::Super)
    }

    fn seq(&mut self, r: &Region, mut a: usize, until: usize) -> Vec<PseudoExpr> {
        let mut out = Vec::new();
        while a != until && a != r.sink {
            let distinct: BTreeSet<usize> = r.succ[a].iter().copied().collect();
            if distinct.len() < 2 {
                let (code, _) = self.node_code(r, a);
                out.extend(code);
                match distinct.first() {
                    Some(&s) => a = s,
                    None => break,
                }
                continue;
            }
            let join = r.ipdom[a].unwrap_or(r.sink);
            let sets: Vec<BTreeSet<usize>> = distinct
                .iter()
                .map(|&t| self.reach_before(r, t, join).into_iter().filter(|&u| !Self::is_sink(r, u)).collect())
                .collect();
            let overlap = sets
                .iter()
                .enumerate()
                .any(|(i, s)| sets[i + 1..].iter().any(|t| !s.is_disjoint(t)));
            if overlap && !self.unmerge {
                out.extend(self.state_sequence(r, a, join));
            } else {
                let (mut code, test) = self.node_code(r, a);
                let test = test.expect("branch node without a test");
                self.branch(r, a, test, &mut code, |me, t| PseudoExpr::Seq(me.seq(r, t, join)));
                out.extend(code);
            }
            a = join;
        }
        out
    }

    /// Guarded straight-line code for the acyclic part of `r` from `a` up to
    /// `join`, driven by a state variable.
    fn state_sequence(&mut self, r: &Region, a: usize, join: usize) -> Vec<PseudoExpr> {
        let part = self.reach_before(r, a, join);
        // Topological order of `part`.
        let mut indeg: BTreeMap<usize, usize> = part.iter().map(|&u| (u, 0)).collect();
        for &u in &part {
            for s in r.succ[u].iter().collect::<BTreeSet<_>>() {
                if let Some(d) = indeg.get_mut(s) {
                    *d += 1;
                }
            }
        }
        let mut ready: VecDeque<usize> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&u, _)| u).collect();
        let mut order = Vec::new();
        while let Some(u) = ready.pop_front() {
            order.push(u);
            for s in r.succ[u].iter().collect::<BTreeSet<_>>() {
                if let Some(d) = indeg.get_mut(s) {
                    *d -= 1;
                    if *d == 0 {
                        ready.push_back(*s);
                    }
                }
            }
        }
        let pos: HashMap<usize, i64> = order.iter().enumerate().map(|(k, &u)| (u, k as i64)).collect();
        let var = PseudoExpr::var(&format!("S{}", self.fresh));
        self.fresh += 1;
        self.states += 1;
        let goto = |t: usize| PseudoExpr::assign(var.clone(), int(pos.get(&t).copied().unwrap_or(-1)));
        let mut out = vec![PseudoExpr::assign(var.clone(), int(0))];
        for &u in &order {
            let (mut code, test) = self.node_code(r, u);
            if !Self::is_sink(r, u) {
                match test {
                    Some(t) => self.branch(r, u, t, &mut code, |_, s| goto(s)),
                    None => {
                        if let Some(&s) = r.succ[u].first() {
                            code.push(goto(s));
                        }
                    }
                }
            }
            out.push(PseudoExpr::If(vec![
                (eq(var.clone(), int(pos[&u])), PseudoExpr::Seq(code)),
                (PseudoExpr::atom("true"), PseudoExpr::skip()),
            ]));
        }
        out
    }

    fn emit_loop(&mut self, h: usize) -> Vec<PseudoExpr> {
        self.loops += 1;
        let body = self.bodies[&h].clone();
        let exits = self.exits[&h].clone();
        let node = &self.g.nodes[h];
        let pre_test = exits.len() == 1
            && node.arms.len() == 2
            && node.arms[0] == Arm::Next
            && matches!(node.kind, Kind::Ins(_))
            && node.succ.iter().filter(|s| !body.contains(s)).count() == 1
            && body.iter().filter(|&&v| v != h).all(|&v| self.g.nodes[v].succ.iter().all(|s| body.contains(s)));
        if pre_test {
            let inside = node.succ.iter().position(|s| body.contains(s)).unwrap();
            let s_in = node.succ[inside];
            let mut code = self.statement(h);
            let p = code.pop().unwrap();
            let cond = if inside == 0 {
                p
            } else {
                PseudoExpr::prim("=/=", vec![p, PseudoExpr::atom("true")])
            };
            let inner = if s_in == h {
                Vec::new()
            } else {
                let r = self.region(Some(h), s_in);
                self.seq(&r, 0, r.sink)
            };
            code.push(PseudoExpr::Loop(Box::new(cond), Box::new(PseudoExpr::Seq(inner))));
            return code;
        }
        let v = PseudoExpr::var(&format!("V{h}"));
        let r = self.region(Some(h), h);
        let inner = self.seq(&r, 0, r.sink);
        vec![
            PseudoExpr::assign(v.clone(), int(0)),
            PseudoExpr::Loop(Box::new(eq(v, int(0))), Box::new(PseudoExpr::Seq(inner))),
        ]
    }
}

/// Entry labels of the functions of `m`, for naming local calls.
pub fn callee_table(m: &ModuleAsm) -> BTreeMap<u32, (String, u32)> {
    m.functions.iter().map(|f| (f.entry, (f.name.clone(), f.arity))).collect()
}

/// Structures `f`, naming local calls with `callees`.
pub fn structure_with(
    f: &FunctionDef,
    callees: &BTreeMap<u32, (String, u32)>,
    opts: &StructureOptions,
) -> Result<Structured, StructError> {
    let cfg = build_cfg(f)?;
    let mut g = build_graph(f);
    let initial = g.nodes.len();
    let cap = initial.max(1) * opts.cap_factor.max(1);
    let mut regions = 0;
    let mut dispatch_vars = Vec::new();
    while let Some((region, entries)) = g.irreducible_region() {
        regions += 1;
        match opts.strategy {
            Strategy::Duplicate => {
                g.split(&region, entries[0], entries[1]);
                g.prune();
                if g.nodes.len() > cap {
                    return Err(StructError::BlowUp {
                        function: format!("{}/{}", f.name, f.arity),
                        initial,
                        cap,
                    });
                }
            }
            Strategy::CondVars => {
                let var = format!("D{}", dispatch_vars.len());
                g.add_dispatch(&region, &entries, &var);
                dispatch_vars.push(var);
            }
        }
    }
    let duplicated = if opts.strategy == Strategy::Duplicate {
        g.nodes.len().saturating_sub(initial)
    } else {
        0
    };
    let mut em = Emitter {
        f,
        callees,
        g,
        unmerge: opts.unmerge_tails,
        bodies: BTreeMap::new(),
        exits: BTreeMap::new(),
        loop_of: Vec::new(),
        parent: BTreeMap::new(),
        emitted: BTreeSet::new(),
        loops: 0,
        states: 0,
        fresh: 0,
    };
    em.analyze_loops();
    let entry = em.g.entry;
    let r = em.region(None, entry);
    let body = em.seq(&r, 0, r.sink);
    let expr = PseudoExpr::Seq(body).normalized();

    let mut emitted_ins = BTreeSet::new();
    for &v in &em.emitted {
        if let Kind::Ins(i) | Kind::Nop(i) = em.g.nodes[v].kind {
            emitted_ins.insert(i);
        }
    }
    let mut covered = BTreeSet::new();
    for j in 0..f.body.len() {
        let mut k = j;
        while k < f.body.len() && (f.body[k].is("label") || f.body[k].is("line")) {
            k += 1;
        }
        if emitted_ins.contains(&k) {
            if let Some(b) = cfg.block_of_index(j) {
                covered.insert(b);
            }
        }
    }
    Ok(Structured {
        name: f.name.clone(),
        arity: f.arity,
        expr,
        reachable_blocks: cfg.reachable(),
        covered_blocks: covered,
        initial_nodes: initial,
        duplicated,
        irreducible_regions: regions,
        dispatch_vars,
        loops: em.loops,
        state_sequences: em.states,
    })
}

/// Structures a single function; only self-calls get names.
pub fn structure_function(f: &FunctionDef, opts: &StructureOptions) -> Result<Structured, StructError> {
    let callees = BTreeMap::from([(f.entry, (f.name.clone(), f.arity))]);
    structure_with(f, &callees, opts)
}

/// Structures every function of `m`.
pub fn structure_module(m: &ModuleAsm, opts: &StructureOptions) -> Result<Vec<Structured>, StructError> {
    let callees = callee_table(m);
    m.functions.iter().map(|f| structure_with(f, &callees, opts)).collect()
}
