use crate::asmir::{FunctionDef, Instruction, ModuleAsm, Operand, Reg};
use crate::vlite::liveness_report;

use super::{ObfError, PassConfig};

/// Stack frame size when every allocation in `f` agrees on it.
fn frame_size(f: &FunctionDef) -> Option<u32> {
    let sizes: Vec<u64> = f
        .body
        .iter()
        .filter(|i| i.opcode.starts_with("allocate"))
        .filter_map(|i| i.operands.first().and_then(Operand::as_u64))
        .collect();
    match sizes.first() {
        Some(&n) if sizes.iter().all(|&m| m == n) => Some(n as u32),
        _ => None,
    }
}

/// Grows every frame operand from `old` to `new`; allocations become
/// zeroing so the added slots are initialized.
fn resize_frame(f: &mut FunctionDef, old: u32, new: u32) {
    for ins in f.body.iter_mut() {
        let at = match ins.opcode.as_str() {
            "allocate" | "allocate_heap" => {
                ins.opcode.push_str("_zero");
                0
            }
            "allocate_zero" | "allocate_heap_zero" | "deallocate" => 0,
            "call_last" | "call_ext_last" => 2,
            _ => continue,
        };
        if ins.operands.get(at).and_then(Operand::as_u64) == Some(old as u64) {
            ins.operands[at] = Operand::num(new);
        }
    }
}

fn slot(ins: &Instruction) -> Option<u32> {
    match ins.operands.first() {
        Some(Operand::Y(k)) => Some(*k),
        _ => None,
    }
}

/// Rewrites the first catch region of `f` into two catch openers and two
/// handlers, chosen at run time by bits of the process reduction counter.
fn split_catch(f: &FunctionDef, fresh: &mut dyn FnMut() -> u32) -> Option<FunctionDef> {
    if f.body.iter().any(|i| i.is("trim")) {
        return None;
    }
    let c = f.body.iter().position(|i| i.is("catch"))?;
    let k = slot(&f.body[c])?;
    let handler = f.body[c].operands.get(1)?.as_label()?;
    let h = f.label_index(handler)?;
    let end = (h + 1..f.body.len()).find(|&j| !f.body[j].is("line"))?;
    if !(f.body[end].is("catch_end") && slot(&f.body[end]) == Some(k)) {
        return None;
    }
    let n = frame_size(f)?;
    let live = liveness_report(f);
    let live_x = |i: usize| -> Vec<u32> {
        live.live_in[i]
            .iter()
            .filter_map(|r| match r {
                Reg::X(j) => Some(*j),
                _ => None,
            })
            .collect()
    };
    let saved = live_x(c);
    let counter = n + saved.len() as u32;
    let above = |v: &[u32]| v.iter().max().map_or(0, |m| m + 1);
    let scratch = above(&saved);
    // catch_end passes x0 through on the normal path.
    let scratch_h = above(&live_x(end)).max(1);

    let [second, body, h1, h2, rest] = [(); 5].map(|_| fresh());
    let x = Operand::X;
    let y = Operand::Y;
    let mut site = Vec::new();
    for (t, &j) in saved.iter().enumerate() {
        site.push(Instruction::mov(x(j), y(n + t as u32)));
    }
    site.push(Instruction::bif("self", vec![], x(0)));
    site.push(Instruction::mov(Operand::atom("reductions"), x(1)));
    site.push(Instruction::new(
        "call_ext",
        vec![Operand::num(2), Operand::ext("erlang", "process_info", 2)],
    ));
    site.push(Instruction::new("get_tuple_element", vec![x(0), Operand::num(1), y(counter)]));
    for (t, &j) in saved.iter().enumerate() {
        site.push(Instruction::mov(y(n + t as u32), x(j)));
    }
    site.push(Instruction::gc_bif("band", scratch, vec![y(counter), Operand::int(1)], x(scratch)));
    site.push(Instruction::test("is_eq_exact", second, vec![x(scratch), Operand::int(0)]));
    site.push(Instruction::new("catch", vec![y(k), Operand::Label(h1)]));
    site.push(Instruction::jump(body));
    site.push(Instruction::label(second));
    site.push(Instruction::new("catch", vec![y(k), Operand::Label(h2)]));
    site.push(Instruction::label(body));

    let catch_end = f.body[end].clone();
    let dispatch = vec![
        Instruction::gc_bif("band", scratch_h, vec![y(counter), Operand::int(2)], x(scratch_h)),
        Instruction::test("is_eq_exact", h2, vec![x(scratch_h), Operand::int(0)]),
        Instruction::label(h1),
        catch_end.clone(),
        Instruction::jump(rest),
        Instruction::label(h2),
        catch_end,
        Instruction::label(rest),
    ];

    let mut out = f.clone();
    out.body.splice(end..=end, dispatch);
    out.body.splice(c..=c, site);
    resize_frame(&mut out, n, counter + 1);
    Some(out)
}

/// Duplicates the opener and the handler of one catch region per selected
/// function, giving a region with two `catch` and two `catch_end`
/// instructions whose pairing is decided at run time.
pub fn pass_many_to_many_catch(m: &ModuleAsm, cfg: &PassConfig) -> Result<ModuleAsm, ObfError> {
    let mut out = m.clone();
    let mut changed = false;
    for i in 0..out.functions.len() {
        let f = &out.functions[i];
        if !cfg.selects(&f.name, f.arity) {
            continue;
        }
        let f = f.clone();
        let mut next = || out.fresh_label();
        if let Some(g) = split_catch(&f, &mut next) {
            out.functions[i] = g;
            changed = true;
        }
    }
    if changed {
        Ok(out)
    } else {
        Err(ObfError::NoCatchRegion)
    }
}
