//! Register reads and writes of each instruction.

use super::{Instruction, Operand, Reg};

fn regs_of(ops: &[Operand]) -> Vec<Reg> {
    let mut out = Vec::new();
    ops.iter().for_each(|o| o.regs(&mut out));
    out
}

fn reg(o: Option<&Operand>) -> Vec<Reg> {
    o.and_then(Operand::as_reg).into_iter().collect()
}

fn args(n: u64) -> Vec<Reg> {
    (0..n as u32).map(Reg::X).collect()
}

/// Registers read by `ins`.
pub fn uses(ins: &Instruction) -> Vec<Reg> {
    let ops = &ins.operands;
    match ins.opcode.as_str() {
        "move" | "get_tuple_element" | "get_list" | "get_hd" | "get_tl" => regs_of(&ops[..1]),
        "swap" => regs_of(ops),
        "set_tuple_element" => regs_of(&ops[..2]),
        "put_list" => regs_of(&ops[..2]),
        "bif" => regs_of(&ops[2..3]),
        "gc_bif" => regs_of(&ops[3..4]),
        "send" => vec![Reg::X(0), Reg::X(1)],
        "call" | "call_ext" | "call_only" | "call_ext_only" | "call_last" | "call_ext_last" => {
            args(ops.first().and_then(Operand::as_u64).unwrap_or(0))
        }
        "return" => vec![Reg::X(0)],
        "badmatch" | "case_end" | "put" | "try_case_end" => regs_of(ops),
        "select_val" | "select_tuple_arity" => regs_of(&ops[..1]),
        "test" => match ops.len() {
            5 => regs_of(&ops[3..4]),
            4 => regs_of(&ops[3..4]),
            _ => regs_of(&ops[2..]),
        },
        "bs_start_match4" => regs_of(&ops[2..3]),
        "wait_timeout" => regs_of(&ops[1..]),
        "put_tuple2" => regs_of(&ops[1..]),
        "bs_init2" | "bs_init_bits" => regs_of(&ops[1..2]),
        op if op.starts_with("bs_put_") => regs_of(ops),
        "label" | "func_info" | "line" | "allocate" | "allocate_zero" | "allocate_heap"
        | "allocate_heap_zero" | "test_heap" | "deallocate" | "trim" | "init" | "kill"
        | "init_yregs" | "jump" | "loop_rec" | "loop_rec_end" | "wait" | "remove_message"
        | "timeout" | "try" | "catch" | "try_end" | "catch_end" | "try_case" | "put_tuple"
        | "if_end" => Vec::new(),
        _ => regs_of(ops),
    }
}

/// Registers written by `ins` (not counting the x-register clobber of calls).
pub fn defs(ins: &Instruction) -> Vec<Reg> {
    let ops = &ins.operands;
    match ins.opcode.as_str() {
        "move" | "get_hd" | "get_tl" => reg(ops.get(1)),
        "swap" => regs_of(ops),
        "get_tuple_element" | "put_list" => reg(ops.get(2)),
        "get_list" => regs_of(&ops[1..]),
        "bif" => reg(ops.get(3)),
        "gc_bif" => reg(ops.get(4)),
        "send" | "call" | "call_ext" | "catch_end" => vec![Reg::X(0)],
        "try_case" => vec![Reg::X(0), Reg::X(1), Reg::X(2)],
        "test" if ops.len() == 5 => reg(ops.get(4)),
        "bs_start_match4" => reg(ops.get(3)),
        "loop_rec" => vec![Reg::X(0)],
        "init" | "kill" | "try" | "catch" | "try_end" => reg(ops.first()),
        "init_yregs" => regs_of(ops),
        "put_tuple" => reg(ops.get(1)),
        "put_tuple2" => reg(ops.first()),
        "bs_init2" | "bs_init_bits" => reg(ops.get(5)),
        _ => Vec::new(),
    }
}

/// True for calls that return to the next instruction and leave every x
/// register other than x0 undefined.
pub fn clobbers_x(ins: &Instruction) -> bool {
    matches!(ins.opcode.as_str(), "call" | "call_ext")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn move_and_call() {
        let m = Instruction::mov(Operand::X(5), Operand::X(0));
        assert_eq!(uses(&m), vec![Reg::X(5)]);
        assert_eq!(defs(&m), vec![Reg::X(0)]);
        let c = Instruction::new("call", vec![Operand::num(2), Operand::Label(4)]);
        assert_eq!(uses(&c), vec![Reg::X(0), Reg::X(1)]);
        assert!(clobbers_x(&c));
    }

    #[test]
    fn test_args() {
        let t = Instruction::test("is_eq_exact", 3, vec![Operand::X(0), Operand::y(1)]);
        assert_eq!(uses(&t), vec![Reg::X(0), Reg::Y(1)]);
        assert!(defs(&t).is_empty());
    }
}
