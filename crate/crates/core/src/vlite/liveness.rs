use std::collections::BTreeSet;

use crate::asmir::effects::{clobbers_x, defs, uses};
use crate::asmir::{FunctionDef, Reg};
use crate::cfg::{build_cfg, ends_block, Cfg, EdgeKind};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LivenessReport {
    /// Registers live before each instruction.
    pub live_in: Vec<BTreeSet<Reg>>,
    /// Registers live after each instruction.
    pub live_out: Vec<BTreeSet<Reg>>,
}

impl LivenessReport {
    /// x registers below `limit` that are dead before instruction `i` (and
    /// not touched by it).
    pub fn dead_x_before(&self, i: usize, limit: u32) -> Vec<u32> {
        let Some(live) = self.live_in.get(i) else {
            return Vec::new();
        };
        (0..limit).filter(|&k| !live.contains(&Reg::X(k))).collect()
    }
}

/// Instruction positions control may reach directly after `i`.
pub fn successors(c: &Cfg, i: usize) -> Vec<usize> {
    let Some(b) = c.block_of_index(i) else {
        return Vec::new();
    };
    let block = &c.blocks[b];
    let mut out = Vec::new();
    if i + 1 < block.end && !ends_block(c.ins(i)) {
        out.push(i + 1);
    }
    for e in c.succs(b) {
        if e.site == i || e.kind == EdgeKind::Exception {
            let mut to = e.to;
            // Skip empty blocks.
            while c.blocks[to].range().is_empty() && to + 1 < c.blocks.len() {
                to += 1;
            }
            if !c.blocks[to].range().is_empty() {
                out.push(c.blocks[to].start);
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Backward liveness over the function's control-flow graph.
pub fn liveness_report(f: &FunctionDef) -> LivenessReport {
    let n = f.body.len();
    let Ok(c) = build_cfg(f) else {
        return LivenessReport {
            live_in: vec![BTreeSet::new(); n],
            live_out: vec![BTreeSet::new(); n],
        };
    };
    let succ: Vec<Vec<usize>> = (0..n).map(|i| successors(&c, i)).collect();
    let mut live_in = vec![BTreeSet::new(); n];
    let mut live_out = vec![BTreeSet::new(); n];
    let mut changed = true;
    while changed {
        changed = false;
        for i in (0..n).rev() {
            let out: BTreeSet<Reg> = succ[i].iter().flat_map(|&s| live_in[s].iter().copied()).collect();
            let ins = &f.body[i];
            let d = defs(ins);
            let clob = clobbers_x(ins);
            let mut inn: BTreeSet<Reg> = out
                .iter()
                .copied()
                .filter(|r| !d.contains(r) && !(clob && matches!(r, Reg::X(_))))
                .collect();
            inn.extend(uses(ins));
            if inn != live_in[i] || out != live_out[i] {
                live_in[i] = inn;
                live_out[i] = out;
                changed = true;
            }
        }
    }
    LivenessReport { live_in, live_out }
}
