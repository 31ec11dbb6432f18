use std::collections::{BTreeMap, BTreeSet};

use super::{Cfg, Edge};

#[derive(Debug, Clone, PartialEq)]
pub struct LoopInfo {
    /// Blocks entered from outside the loop (the function entry counts).
    pub headers: Vec<usize>,
    pub body: BTreeSet<usize>,
    pub entry_count: usize,
    /// Retreating edges inside the loop.
    pub back_edges: Vec<(usize, usize)>,
    /// Edges leaving the loop.
    pub exits: Vec<Edge>,
    pub reducible: bool,
    /// Some exit target post-dominates every header.
    pub exit_postdominates: bool,
}

/// Immediate dominators over the blocks reachable from `entry` in `succ`;
/// `None` for unreachable blocks, `Some(entry)` for the entry itself.
pub(crate) fn idoms(succ: &[Vec<usize>], entry: usize) -> Vec<Option<usize>> {
    let n = succ.len();
    let mut pred = vec![Vec::new(); n];
    for (b, ss) in succ.iter().enumerate() {
        for &s in ss {
            pred[s].push(b);
        }
    }
    // reverse postorder
    let mut seen = vec![false; n];
    let mut post = Vec::new();
    let mut stack = vec![(entry, 0usize)];
    seen[entry] = true;
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
    let mut order = vec![usize::MAX; n];
    for (k, &b) in post.iter().enumerate() {
        order[b] = k;
    }
    let rpo: Vec<usize> = post.iter().rev().copied().collect();
    let mut idom: Vec<Option<usize>> = vec![None; n];
    idom[entry] = Some(entry);
    let intersect = |idom: &[Option<usize>], mut a: usize, mut b: usize| {
        while a != b {
            while order[a] < order[b] {
                a = idom[a].unwrap();
            }
            while order[b] < order[a] {
                b = idom[b].unwrap();
            }
        }
        a
    };
    let mut changed = true;
    while changed {
        changed = false;
        for &b in rpo.iter().skip(1) {
            let mut new = None;
            for &p in &pred[b] {
                if idom[p].is_some() {
                    new = Some(match new {
                        None => p,
                        Some(cur) => intersect(&idom, p, cur),
                    });
                }
            }
            if new.is_some() && idom[b] != new {
                idom[b] = new;
                changed = true;
            }
        }
    }
    idom
}

pub(crate) fn dominates_in(idom: &[Option<usize>], a: usize, mut b: usize) -> bool {
    loop {
        if a == b {
            return true;
        }
        match idom[b] {
            Some(p) if p != b => b = p,
            _ => return false,
        }
    }
}

/// Immediate dominator of each block (`None` if unreachable).
pub fn dominators(c: &Cfg) -> Vec<Option<usize>> {
    idoms(&c.succ_blocks(), c.entry)
}

/// Immediate post-dominators; the virtual exit is index `blocks.len()`.
pub fn post_dominators(c: &Cfg) -> Vec<Option<usize>> {
    let n = c.blocks.len();
    let succ = c.succ_blocks();
    let mut rev = vec![Vec::new(); n + 1];
    for (b, ss) in succ.iter().enumerate() {
        if ss.is_empty() {
            rev[n].push(b);
        }
        for &s in ss {
            rev[s].push(b);
        }
    }
    idoms(&rev, n)
}

/// T1/T2 collapse over the reachable part of the graph.
pub fn is_reducible(c: &Cfg) -> bool {
    let reach = c.reachable();
    let mut succ: BTreeMap<usize, BTreeSet<usize>> = reach.iter().map(|&b| (b, BTreeSet::new())).collect();
    for e in &c.edges {
        if reach.contains(&e.from) && reach.contains(&e.to) {
            succ.get_mut(&e.from).unwrap().insert(e.to);
        }
    }
    let mut changed = true;
    while changed && succ.len() > 1 {
        changed = false;
        // T1: drop self loops.
        for (b, ss) in succ.iter_mut() {
            if ss.remove(b) {
                changed = true;
            }
        }
        // T2: merge a node with a unique predecessor into it.
        let nodes: Vec<usize> = succ.keys().copied().collect();
        for v in nodes {
            if v == c.entry || !succ.contains_key(&v) {
                continue;
            }
            let preds: Vec<usize> = succ.iter().filter(|(_, ss)| ss.contains(&v)).map(|(b, _)| *b).collect();
            if let [p] = preds.as_slice() {
                let p = *p;
                if p == v {
                    continue;
                }
                let vs = succ.remove(&v).unwrap();
                let ps = succ.get_mut(&p).unwrap();
                ps.remove(&v);
                ps.extend(vs);
                for ss in succ.values_mut() {
                    if ss.remove(&v) {
                        ss.insert(p);
                    }
                }
                changed = true;
            }
        }
    }
    succ.len() == 1
}

/// Strongly connected components (Tarjan, iterative).
pub(crate) fn sccs(succ: &[Vec<usize>], nodes: &BTreeSet<usize>) -> Vec<Vec<usize>> {
    let n = succ.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on = vec![false; n];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    let mut next = 0;
    for &root in nodes {
        if index[root] != usize::MAX {
            continue;
        }
        let mut call = vec![(root, 0usize)];
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on[root] = true;
        while let Some(&mut (v, ref mut i)) = call.last_mut() {
            let ss: Vec<usize> = succ[v].iter().copied().filter(|s| nodes.contains(s)).collect();
            if *i < ss.len() {
                let w = ss[*i];
                *i += 1;
                if index[w] == usize::MAX {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on[w] = true;
                    call.push((w, 0));
                } else if on[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(p, _)) = call.last() {
                    low[p] = low[p].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().unwrap();
                        on[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort();
                    out.push(comp);
                }
            }
        }
    }
    out.sort();
    out
}

/// Loops of the reachable graph, one per strongly connected component with
/// a cycle.
pub fn find_loops(c: &Cfg) -> Vec<LoopInfo> {
    let succ = c.succ_blocks();
    let pred = c.pred_blocks();
    let reach = c.reachable();
    let pdom = post_dominators(c);
    let mut loops = Vec::new();
    for comp in sccs(&succ, &reach) {
        let body: BTreeSet<usize> = comp.iter().copied().collect();
        let cyclic = comp.len() > 1 || succ[comp[0]].contains(&comp[0]);
        if !cyclic {
            continue;
        }
        let headers: Vec<usize> = comp
            .iter()
            .copied()
            .filter(|&b| b == c.entry || pred[b].iter().any(|p| reach.contains(p) && !body.contains(p)))
            .collect();
        let exits: Vec<Edge> = c
            .edges
            .iter()
            .filter(|e| body.contains(&e.from) && !body.contains(&e.to))
            .copied()
            .collect();
        // Retreating edges: a DFS from the headers inside the body.
        let mut back_edges = Vec::new();
        let mut state = BTreeMap::new();
        for &h in &headers {
            if state.contains_key(&h) {
                continue;
            }
            let mut stack = vec![(h, 0usize)];
            state.insert(h, 1u8);
            while let Some(&mut (v, ref mut i)) = stack.last_mut() {
                let ss: Vec<usize> = succ[v].iter().copied().filter(|s| body.contains(s)).collect();
                if *i < ss.len() {
                    let w = ss[*i];
                    *i += 1;
                    match state.get(&w) {
                        None => {
                            state.insert(w, 1);
                            stack.push((w, 0));
                        }
                        Some(1) => back_edges.push((v, w)),
                        _ => {}
                    }
                } else {
                    state.insert(v, 2);
                    stack.pop();
                }
            }
        }
        back_edges.sort();
        let exit_postdominates = exits
            .iter()
            .any(|e| headers.iter().all(|&h| dominates_in(&pdom, e.to, h)));
        let entry_count = headers.len();
        loops.push(LoopInfo {
            reducible: entry_count <= 1,
            headers,
            body,
            entry_count,
            back_edges,
            exits,
            exit_postdominates,
        });
    }
    loops
}

/// True when `a` dominates `b`.
pub fn dominates(idom: &[Option<usize>], a: usize, b: usize) -> bool {
    idom[b].is_some() && dominates_in(idom, a, b)
}
