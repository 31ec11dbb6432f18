use rand::Rng;

use crate::asmir::{construction_spans, FunctionDef, Instruction, ModuleAsm, Operand, Reg, SpanKind, SpanSize};
use crate::cfg::build_cfg;
use crate::vlite::liveness_report;

use super::PassConfig;

/// Inserts inert moves between the filling instructions of tuple and binary
/// constructions, and optionally loads constant binary sizes through a dead
/// register. The number of `put`/`bs_put_*` instructions is unchanged.
pub fn pass_interleave_constructions(m: &ModuleAsm, cfg: &PassConfig) -> ModuleAsm {
    let mut out = m.clone();
    let mut rng = cfg.rng();
    for f in out.functions.iter_mut() {
        if cfg.selects(&f.name, f.arity) && cfg.intensity > 0 {
            interleave(f, cfg, &mut rng);
        }
    }
    out
}

fn interleave(f: &mut FunctionDef, cfg: &PassConfig, rng: &mut impl Rng) {
    if build_cfg(f).is_err() {
        return;
    }
    let (spans, _) = construction_spans(f);
    if spans.is_empty() {
        return;
    }
    let live = liveness_report(f);
    let limit = f.max_regs().0.map_or(0, |n| n + 1).max(f.arity) + 1;
    // (position, instruction) pairs, and size reroutes (opener, register).
    let mut inserts: Vec<(usize, Instruction)> = Vec::new();
    let mut reroutes: Vec<(usize, u32, u64)> = Vec::new();
    for s in &spans {
        let not_dst = |k: &u32| s.dst != Some(Reg::X(*k));
        if s.kind == SpanKind::Binary && cfg.reroute_sizes {
            if let SpanSize::Constant(_) = s.size {
                let dead: Vec<u32> = live.dead_x_before(s.opener, limit).into_iter().filter(not_dst).collect();
                let size = f.body[s.opener].operands[1].as_u64();
                if let (false, Some(size)) = (dead.is_empty(), size) {
                    reroutes.push((s.opener, dead[rng.gen_range(0..dead.len())], size));
                }
            }
        }
        if s.elements.is_empty() {
            continue;
        }
        for _ in 0..cfg.intensity {
            let at = s.elements[rng.gen_range(0..s.elements.len())];
            let dead: Vec<u32> = live.dead_x_before(at, limit).into_iter().filter(not_dst).collect();
            if dead.is_empty() {
                continue;
            }
            let d = dead[rng.gen_range(0..dead.len())];
            let sources: Vec<u32> = live.live_in[at]
                .iter()
                .filter_map(|r| match r {
                    Reg::X(k) if not_dst(k) => Some(*k),
                    _ => None,
                })
                .collect();
            let src = if !sources.is_empty() && rng.gen_bool(0.5) {
                Operand::X(sources[rng.gen_range(0..sources.len())])
            } else {
                Operand::int(rng.gen_range(0..1000))
            };
            inserts.push((at, Instruction::mov(src, Operand::X(d))));
        }
    }
    for (opener, d, size) in reroutes {
        f.body[opener].operands[1] = Operand::X(d);
        inserts.push((opener, Instruction::mov(Operand::int(size), Operand::X(d))));
    }
    // Stable order: later positions first, ties keep generation order.
    inserts.sort_by(|a, b| b.0.cmp(&a.0));
    let mut i = 0;
    while i < inserts.len() {
        let at = inserts[i].0;
        let mut j = i;
        while j < inserts.len() && inserts[j].0 == at {
            j += 1;
        }
        let group: Vec<Instruction> = inserts[i..j].iter().map(|(_, ins)| ins.clone()).collect();
        f.body.splice(at..at, group);
        i = j;
    }
}
