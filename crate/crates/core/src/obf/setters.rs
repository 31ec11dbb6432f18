use crate::asmir::{FunctionDef, Instruction, ModuleAsm, Operand};

use super::ObfError;

/// Export table limit: the largest setter module that can be loaded.
pub const MAX_SETTERS: u64 = 524_288;

const MODULE: &str = "put_tuple_elem";

fn header(name: &str, arity: u32, first: u32) -> Vec<Instruction> {
    vec![
        Instruction::label(first),
        Instruction::new(
            "func_info",
            vec![Operand::atom(MODULE), Operand::atom(name), Operand::num(arity)],
        ),
        Instruction::label(first + 1),
    ]
}

/// Module `put_tuple_elem` exporting `doX/2` for X in 1..=n; `doX(T, V)`
/// overwrites element X of T in place with `set_tuple_element`.
pub fn gen_mutable_tuple_setters(n: u64) -> Result<ModuleAsm, ObfError> {
    if n == 0 {
        return Err(ObfError::Refused("badarg: at least one setter is required".into()));
    }
    if n > MAX_SETTERS {
        return Err(ObfError::Refused(format!(
            "export table limit: {n} setters exceeds {MAX_SETTERS}"
        )));
    }
    let n = n as u32;
    let mut m = ModuleAsm::empty(MODULE);
    for x in 1..=n {
        let name = format!("do{x}");
        let mut body = header(&name, 2, 2 * x - 1);
        body.push(Instruction::new(
            "set_tuple_element",
            vec![Operand::X(1), Operand::X(0), Operand::num(x - 1)],
        ));
        body.push(Instruction::simple("return"));
        m.exports.push((name.clone(), 2));
        m.functions.push(FunctionDef {
            name,
            arity: 2,
            entry: 2 * x,
            body,
        });
    }
    let info = |arity: u32| {
        let first = 2 * n + 1 + 2 * arity;
        let mut body = header("module_info", arity, first);
        if arity == 1 {
            body.push(Instruction::mov(Operand::X(0), Operand::X(1)));
        }
        body.push(Instruction::mov(Operand::atom(MODULE), Operand::X(0)));
        body.push(Instruction::new(
            "call_ext_only",
            vec![
                Operand::num(arity + 1),
                Operand::ext("erlang", "get_module_info", arity + 1),
            ],
        ));
        FunctionDef {
            name: "module_info".into(),
            arity,
            entry: first + 1,
            body,
        }
    };
    for a in [0, 1] {
        m.exports.push(("module_info".into(), a));
        m.functions.push(info(a));
    }
    m.label_count = 2 * n + 5;
    Ok(m)
}
