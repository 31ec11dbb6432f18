//! Opcode table: operand counts and instruction classes for the subset of
//! BEAM assembly the analyses and passes understand.

/// Coarse instruction class used by the CFG builder and the passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    Plain,
    Label,
    FuncInfo,
    Test,
    Call,
    Terminator,
    ReceiveFamily,
    TryFamily,
    Construction,
}

pub struct OpcodeInfo {
    pub name: &'static str,
    /// Accepted operand counts.
    pub arities: &'static [usize],
    pub class: Class,
}

macro_rules! ops {
    ($( $name:literal => [$($n:literal),*] $class:ident ),* $(,)?) => {
        pub static OPCODES: &[OpcodeInfo] = &[
            $( OpcodeInfo { name: $name, arities: &[$($n),*], class: Class::$class } ),*
        ];
    };
}

ops! {
    "label" => [1] Label,
    "func_info" => [3] FuncInfo,
    "line" => [1] Plain,
    "move" => [2] Plain,
    "swap" => [2] Plain,
    "init" => [1] Plain,
    "kill" => [1] Plain,
    "init_yregs" => [1] Plain,
    "trim" => [2] Plain,
    "allocate" => [2] Plain,
    "allocate_zero" => [2] Plain,
    "allocate_heap" => [3] Plain,
    "allocate_heap_zero" => [3] Plain,
    "test_heap" => [2] Plain,
    "deallocate" => [1] Plain,
    "get_tuple_element" => [3] Plain,
    "set_tuple_element" => [3] Plain,
    "get_list" => [3] Plain,
    "get_hd" => [2] Plain,
    "get_tl" => [2] Plain,
    "put_list" => [3] Plain,
    "bif" => [4] Plain,
    "gc_bif" => [5] Plain,
    "send" => [0] Plain,
    "call" => [2] Call,
    "call_ext" => [2] Call,
    "call_only" => [2] Terminator,
    "call_last" => [3] Terminator,
    "call_ext_only" => [2] Terminator,
    "call_ext_last" => [3] Terminator,
    "return" => [0] Terminator,
    "badmatch" => [1] Terminator,
    "case_end" => [1] Terminator,
    "if_end" => [0] Terminator,
    "jump" => [1] Terminator,
    "select_val" => [3] Test,
    "select_tuple_arity" => [3] Test,
    "test" => [3, 4, 5] Test,
    "bs_start_match4" => [4] Plain,
    "loop_rec" => [2] ReceiveFamily,
    "loop_rec_end" => [1] ReceiveFamily,
    "wait" => [1] ReceiveFamily,
    "wait_timeout" => [2] ReceiveFamily,
    "remove_message" => [0] ReceiveFamily,
    "timeout" => [0] ReceiveFamily,
    "recv_marker_reserve" => [1] Plain,
    "recv_marker_bind" => [2] Plain,
    "recv_marker_clear" => [1] Plain,
    "recv_marker_use" => [1] Plain,
    "try" => [2] TryFamily,
    "try_end" => [1] TryFamily,
    "try_case" => [1] TryFamily,
    "try_case_end" => [1] TryFamily,
    "catch" => [2] TryFamily,
    "catch_end" => [1] TryFamily,
    "put_tuple" => [2] Construction,
    "put" => [1] Construction,
    "put_tuple2" => [2] Construction,
    "bs_init2" => [6] Construction,
    "bs_init_bits" => [6] Construction,
    "bs_put_string" => [2] Construction,
    "bs_put_integer" => [5] Construction,
    "bs_put_binary" => [5] Construction,
    "bs_put_float" => [5] Construction,
    "bs_put_utf8" => [3] Construction,
    "bs_put_utf16" => [3] Construction,
    "bs_put_utf32" => [3] Construction,
}

pub fn lookup(name: &str) -> Option<&'static OpcodeInfo> {
    OPCODES.iter().find(|o| o.name == name)
}

/// Opcodes that fill a binary opened by `bs_init2`/`bs_init_bits`.
pub fn is_bs_put(name: &str) -> bool {
    name.starts_with("bs_put_")
}

/// Receive-family opcodes that close or leave a receive context.
pub const RECEIVE_CLOSERS: &[&str] = &["loop_rec_end", "remove_message", "timeout", "wait", "wait_timeout"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_has_no_duplicates() {
        let mut names: Vec<_> = OPCODES.iter().map(|o| o.name).collect();
        names.sort();
        let n = names.len();
        names.dedup();
        assert_eq!(n, names.len());
    }

    #[test]
    fn classes() {
        assert_eq!(lookup("loop_rec").unwrap().class, Class::ReceiveFamily);
        assert_eq!(lookup("call_ext_only").unwrap().class, Class::Terminator);
        assert_eq!(lookup("put").unwrap().class, Class::Construction);
        assert!(lookup("bs_append").is_none());
    }
}
