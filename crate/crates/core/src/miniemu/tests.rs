use super::*;
use crate::asmir::{parse_module, Instruction, Operand};
use crate::sterm::parse_term;

fn fixture(name: &str) -> ModuleAsm {
    let path = format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    parse_module(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn t(s: &str) -> Term {
    parse_term(s).unwrap()
}

fn value(r: &EmuResult) -> String {
    match &r.outcome {
        Outcome::Value(v) => v.to_string(),
        other => panic!("expected a value, got {other:?}"),
    }
}

#[test]
fn dumpbinmatch_displays_the_tuple() {
    let r = run(&fixture("dumpbinmatch.S"), "dumpbinmatch", &[], &RunOptions::default());
    assert_eq!(value(&r), "true");
    assert_eq!(r.output, vec![t("{<<3,4,5>>}")]);
}

#[test]
fn broken_dumpbinmatch_leaks_the_match_state() {
    let r = run(&fixture("dumpbinmatch_broken.S"), "dumpbinmatch", &[], &RunOptions::default());
    assert_eq!(r.output, vec![Term::atom("#MatchState")]);
}

#[test]
fn loops_match_closed_forms() {
    let m = fixture("loops.S");
    for n in 0..20u64 {
        let r = run(&m, "sum_to_n", &[Term::int(n)], &RunOptions::default());
        assert_eq!(value(&r), (n * (n + 1) / 2).to_string());
        let r = run(&m, "fact_loop", &[Term::int(n), Term::int(1)], &RunOptions::default());
        let fact: num_bigint::BigInt = (1..=n).product();
        assert_eq!(value(&r), fact.to_string());
        let r = run(&m, "fib_loop", &[Term::int(n), Term::int(0), Term::int(1)], &RunOptions::default());
        let (mut a, mut b) = (0u64, 1u64);
        for _ in 0..n {
            (a, b) = (b, a + b);
        }
        assert_eq!(value(&r), a.to_string());
    }
}

#[test]
fn reductions_count_calls() {
    let m = fixture("loops.S");
    let r = run(&m, "sum_loop", &[Term::int(10), Term::int(0)], &RunOptions::default());
    // ten tail calls plus twenty arithmetic BIFs
    assert_eq!(r.costs.reductions, 30);
}

#[test]
fn fuel_runs_out() {
    let m = fixture("loops.S");
    let opts = RunOptions {
        fuel: 50,
        ..RunOptions::default()
    };
    let r = run(&m, "sum_loop", &[Term::int(1000), Term::int(0)], &opts);
    assert_eq!(r.outcome, Outcome::FuelExhausted);
    assert_eq!(r.costs.steps, 50);
}

#[test]
fn mailbox_semantics() {
    let m = fixture("receive.S");
    let r = run(&m, "echo", &[t("{hello,1}")], &RunOptions::default());
    assert_eq!(value(&r), "{hello,1}");
    assert_eq!(r.residue, 0);
    assert_eq!((r.costs.messages_sent, r.costs.messages_removed), (1, 1));

    let r = run(&m, "pick", &[], &RunOptions::default());
    assert_eq!(value(&r), "1");
    assert_eq!(r.residue, 1);

    let r = run(&m, "after0", &[], &RunOptions::default());
    assert_eq!(value(&r), "timeout");

    let r = run(&m, "bad_remove", &[], &RunOptions::default());
    assert!(matches!(r.outcome, Outcome::Fault(Fault::ReceiveContext(_))));
}

#[test]
fn catch_and_try() {
    let m = fixture("catch.S");
    let r = run(&m, "guarded", &[Term::int(0)], &RunOptions::default());
    assert_eq!(value(&r), "{'EXIT',{{badmatch,0},[]}}");
    let r = run(&m, "guarded", &[Term::int(4)], &RunOptions::default());
    assert_eq!(value(&r), "5");
    let r = run(&m, "tried", &[Term::int(0)], &RunOptions::default());
    assert_eq!(value(&r), "{error,{badmatch,0}}");
    let r = run(&m, "tried", &[Term::int(1)], &RunOptions::default());
    assert_eq!(value(&r), "2");
    let r = run(&m, "risky", &[Term::int(0)], &RunOptions::default());
    assert_eq!(r.outcome, Outcome::Fault(Fault::Badmatch(Term::int(0))));
}

fn inline(body: &str, arity: u32) -> ModuleAsm {
    parse_module(&format!(
        "{{module,t}}. {{exports,[{{f,{arity}}}]}}. {{attributes,[]}}. {{labels,3}}.
         {{function,f,{arity},2}}. {{label,1}}. {{func_info,{{atom,t}},{{atom,f}},{arity}}}. {{label,2}}. {body}"
    ))
    .unwrap()
}

#[test]
fn setelement_copies_and_set_tuple_element_does_not() {
    let m = inline(
        "{allocate,1,1}.
         {move,{x,0},{y,0}}.
         {move,{integer,1},{x,0}}.
         {move,{y,0},{x,1}}.
         {move,{atom,z},{x,2}}.
         {call_ext,3,{extfunc,erlang,setelement,3}}.
         {set_tuple_element,{atom,w},{x,0},1}.
         {deallocate,1}.
         return.",
        1,
    );
    let r = run(&m, "f", &[t("{a,b,c,d}")], &RunOptions::default());
    assert_eq!(value(&r), "{z,w,c,d}");
    assert_eq!(r.costs.heap_words_copied, 4 + 1);
}

#[test]
fn permissive_mode_reads_nil() {
    let m = inline("{move,{x,7},{x,0}}. return.", 0);
    let r = run(&m, "f", &[], &RunOptions::default());
    assert_eq!(r.outcome, Outcome::Fault(Fault::Uninitialized("{x,7}".into())));
    let opts = RunOptions {
        mode: Mode::Permissive,
        ..RunOptions::default()
    };
    assert_eq!(value(&run(&m, "f", &[], &opts)), "[]");
}

#[test]
fn binary_construction() {
    let m = inline(
        "{bs_init2,{f,0},3,0,1,{field_flags,[]},{x,1}}.
         {bs_put_string,1,{string,[1]}}.
         {bs_put_integer,{f,0},{integer,16},1,{field_flags,[unsigned,little]},{x,0}}.
         {move,{x,1},{x,0}}.
         return.",
        1,
    );
    assert_eq!(value(&run(&m, "f", &[Term::int(0x0203)], &RunOptions::default())), "<<1,3,2>>");
    let m = inline(
        "{bs_init_bits,{f,0},{x,0},0,1,{field_flags,[]},{x,1}}.
         {bs_put_integer,{f,0},{integer,3},1,{field_flags,[unsigned,big]},{integer,5}}.
         {move,{x,1},{x,0}}.
         return.",
        1,
    );
    assert_eq!(value(&run(&m, "f", &[Term::int(3)], &RunOptions::default())), "<<5:3>>");
    assert_eq!(
        run(&m, "f", &[Term::int(2)], &RunOptions::default()).outcome,
        Outcome::Fault(Fault::Badarg)
    );
}

#[test]
fn unknown_opcode_faults() {
    let m = inline("{bs_frob,{x,0}}. return.", 1);
    let r = run(&m, "f", &[Term::int(1)], &RunOptions::default());
    assert_eq!(r.outcome, Outcome::Fault(Fault::UnknownOpcode("bs_frob".into())));
}

#[test]
fn wait_on_empty_mailbox_deadlocks() {
    let m = inline("{label,3}. {loop_rec,{f,4},{x,0}}. return. {label,4}. {wait,{f,3}}.", 0);
    let r = run(&m, "f", &[], &RunOptions::default());
    assert_eq!(r.outcome, Outcome::Fault(Fault::Deadlock));
}

#[test]
fn trace_records_each_step() {
    let r = trace(&fixture("loops.S"), "sum_to_n", &[Term::int(1)], 1000);
    assert_eq!(r.trace.len() as u64, r.costs.steps);
    assert_eq!(r.trace[0].function, "sum_to_n/1");
    assert_eq!(r.trace[0].instruction, t("{label,11}"));
}

#[test]
fn differential_reflexive_and_mutation() {
    let a = fixture("loops.S");
    let d = run_differential(&a, &a, "sum_to_n", |i| vec![Term::int(i)], 30, &DiffOptions::default());
    assert!(d.is_equivalent());
    let mut b = a.clone();
    let step = b.function_mut("sum_loop", 2).unwrap();
    step.body[7] = Instruction::gc_bif("-", 2, vec![Operand::X(0), Operand::int(2)], Operand::X(0));
    let bad = run_differential(&a, &b, "sum_to_n", |i| vec![Term::int(i + 1)], 20, &DiffOptions::default());
    assert_eq!(bad.mismatches.len(), 20);
}

#[test]
fn cost_model_linear_vs_constant() {
    let opts = RunOptions::default();
    let copy = cost_profile(&writer_module(WriterKind::Setelement), "write", &[64, 1024], 10, &opts);
    assert_eq!(copy, vec![(64, 640), (1024, 10240)]);
    let inplace = cost_profile(&writer_module(WriterKind::SetTupleElement), "write", &[64, 1024], 10, &opts);
    assert_eq!(inplace, vec![(64, 10), (1024, 10)]);
    let none = cost_profile(&writer_module(WriterKind::Setelement), "write", &[64, 1024], 0, &opts);
    assert_eq!(none, vec![(64, 0), (1024, 0)]);
}
