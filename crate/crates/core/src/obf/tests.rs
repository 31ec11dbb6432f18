use super::*;
use crate::asmir::{parse_module, FunctionDef, Instruction, Operand};
use crate::cfg::{annotate_regions, build_cfg, check_receive_sequencing, RegionKind};
use crate::miniemu::{run, Outcome, RunOptions};
use crate::vlite::validate;

fn fixture(name: &str) -> ModuleAsm {
    let path = format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    parse_module(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn target(name: &str, arity: u32) -> (String, u32) {
    (name.to_string(), arity)
}

fn cfg_for(name: &str, arity: u32) -> PassConfig {
    PassConfig {
        targets: vec![target(name, arity)],
        ..PassConfig::default()
    }
}

/// vlite clean and every function passes the receive sequencing check.
fn assert_clean(m: &ModuleAsm) {
    assert_eq!(validate(m), vec![]);
    for f in &m.functions {
        let c = build_cfg(f).unwrap();
        let regions = annotate_regions(&c);
        assert_eq!(check_receive_sequencing(&c, &regions), vec![], "{}", f.name);
    }
}

fn assert_same(a: &ModuleAsm, b: &ModuleAsm, name: &str, inputs: &[Vec<Term>]) {
    let opts = RunOptions::default();
    for args in inputs {
        let x = run(a, name, args, &opts);
        let y = run(b, name, args, &opts);
        assert_eq!(x.outcome, y.outcome, "{name}{args:?}");
        assert_eq!(y.residue, 0, "{name}{args:?} left messages");
    }
}

fn ints(n: i64) -> Vec<Vec<Term>> {
    (0..n).map(|i| vec![Term::int(i)]).collect()
}

fn loops_inputs(name: &str) -> Vec<Vec<Term>> {
    match name {
        "sum_to_n" => ints(25),
        "sum_loop" => (0..20).map(|i| vec![Term::int(i), Term::int(3)]).collect(),
        "fact_loop" => (0..12).map(|i| vec![Term::int(i), Term::int(1)]).collect(),
        "fib_loop" => (0..15).map(|i| vec![Term::int(i), Term::int(0), Term::int(1)]).collect(),
        _ => unreachable!(),
    }
}

fn receive_region_count(f: &FunctionDef, opcode: &str) -> Vec<usize> {
    let c = build_cfg(f).unwrap();
    annotate_regions(&c)
        .iter()
        .filter(|r| r.kind == RegionKind::Receive)
        .map(|r| r.openers.iter().chain(&r.closers).filter(|&&i| c.ins(i).is(opcode)).count())
        .collect()
}

#[test]
fn schema_detection() {
    let m = fixture("loops.S");
    let s = receive::detect_schema(m.function("fib_loop", 3).unwrap()).unwrap();
    assert!(s.exit_on_pass);
    assert_eq!(s.counter(), vec![crate::asmir::Reg::X(0)]);
    assert_eq!(s.accumulators().len(), 2);
    assert_eq!(s.step.len(), 4);
    assert_eq!(s.base.len(), 1);
    assert_eq!(s.regs, 4);
    assert!(receive::detect_schema(m.function("sum_to_n", 1).unwrap()).is_err());
    let r = fixture("receive.S");
    assert!(receive::detect_schema(r.function("pick", 0).unwrap()).is_err());
}

#[test]
fn receive_loop_preserves_results() {
    let m = fixture("loops.S");
    for (name, arity) in [("sum_loop", 2), ("fact_loop", 2), ("fib_loop", 3)] {
        for post_test in [false, true] {
            let cfg = PassConfig {
                post_test,
                ..cfg_for(name, arity)
            };
            let out = pass_receive_loop(&m, &target(name, arity), &cfg).unwrap();
            assert_clean(&out);
            // A post-test loop runs the body once before testing the guard,
            // so it only agrees on inputs that iterate at least once.
            let mut inputs = loops_inputs(name);
            if post_test {
                inputs.remove(0);
            }
            assert_same(&m, &out, name, &inputs);
        }
    }
}

#[test]
fn wrapper_target_rewrites_the_callee() {
    let m = fixture("loops.S");
    let out = pass_receive_loop(&m, &target("sum_to_n", 1), &PassConfig::default()).unwrap();
    assert_eq!(out.function("sum_to_n", 1), m.function("sum_to_n", 1));
    assert_ne!(out.function("sum_loop", 2), m.function("sum_loop", 2));
    assert_same(&m, &out, "sum_to_n", &ints(25));
}

#[test]
fn iteration_count_matches_messages_and_mailbox_drains() {
    let m = fixture("loops.S");
    let out = pass_receive_loop(&m, &target("sum_loop", 2), &PassConfig::default()).unwrap();
    for n in [0, 1, 2, 7, 50, 200] {
        let r = run(&out, "sum_loop", &[Term::int(n), Term::int(0)], &RunOptions::default());
        assert_eq!(r.outcome, Outcome::Value(Term::int(n * (n + 1) / 2)));
        assert_eq!(r.costs.messages_sent, n as u64 + 1);
        assert_eq!(r.residue, 0);
    }
}

#[test]
fn bad_targets() {
    let m = fixture("loops.S");
    assert_eq!(
        pass_receive_loop(&m, &target("nope", 1), &PassConfig::default()),
        Err(ObfError::NotFound("nope".into(), 1))
    );
    assert!(matches!(
        pass_multi_exit_receive(&m, &target("sum_loop", 2), &PassConfig::default()),
        Err(ObfError::NoReceiveLoop(..))
    ));
    let r = fixture("receive.S");
    assert!(matches!(
        pass_receive_loop(&r, &target("pick", 0), &PassConfig::default()),
        Err(ObfError::NotSchema(..))
    ));
}

fn encoded(name: &str, arity: u32) -> (ModuleAsm, ModuleAsm) {
    let m = fixture("loops.S");
    let out = pass_receive_loop(&m, &target(name, arity), &cfg_for(name, arity)).unwrap();
    (m, out)
}

#[test]
fn match_loop_recovers_every_layout() {
    let m = fixture("loops.S");
    let f = m.function("fib_loop", 3).unwrap();
    let s = receive::detect_schema(f).unwrap();
    let prefix = &f.body[..=f.label_index(f.entry).unwrap()];
    for post_test in [false, true] {
        for exits in [1, 2] {
            for second_entry in [None, Some(EntryGuard::Parity), Some(EntryGuard::Never)] {
                for wait_timeouts in [0, 3] {
                    let layout = Layout {
                        post_test,
                        exits,
                        second_entry,
                        wait_timeouts,
                    };
                    let mut n = 100;
                    let mut next = || {
                        n += 1;
                        n
                    };
                    let body = generate_loop(&s, &layout, prefix, &mut next);
                    let g = FunctionDef {
                        body,
                        ..f.clone()
                    };
                    assert_eq!(match_loop(&g), Some((s.clone(), layout)));
                }
            }
        }
    }
    assert_eq!(match_loop(f), None);
}

#[test]
fn multi_exit_has_two_returns() {
    let (m, out) = encoded("fact_loop", 2);
    let out = pass_multi_exit_receive(&out, &target("fact_loop", 2), &PassConfig::default()).unwrap();
    let f = out.function("fact_loop", 2).unwrap();
    assert_eq!(f.body.iter().filter(|i| i.is("return")).count(), 2);
    assert_eq!(match_loop(f).unwrap().1.exits, 2);
    assert_clean(&out);
    assert_same(&m, &out, "fact_loop", &loops_inputs("fact_loop"));
}

#[test]
fn multi_entry_adds_an_opener() {
    for guard in [EntryGuard::Parity, EntryGuard::Never] {
        let (m, out) = encoded("sum_loop", 2);
        let cfg = PassConfig {
            entry_guard: guard,
            ..PassConfig::default()
        };
        let out = pass_multi_entry_receive(&out, &target("sum_loop", 2), &cfg).unwrap();
        let f = out.function("sum_loop", 2).unwrap();
        assert!(receive_region_count(f, "loop_rec").contains(&2));
        assert_clean(&out);
        assert_same(&m, &out, "sum_loop", &loops_inputs("sum_loop"));
    }
}

#[test]
fn redundant_wait_timeouts_share_a_region() {
    let (m, out) = encoded("fib_loop", 3);
    let out = pass_redundant_wait_timeout(&out, &target("fib_loop", 3), &PassConfig::default()).unwrap();
    let f = out.function("fib_loop", 3).unwrap();
    assert!(receive_region_count(f, "wait_timeout").iter().any(|&n| n >= 2));
    let zero = f
        .body
        .iter()
        .find(|i| i.is("wait_timeout"))
        .map(|i| i.operands[1].clone());
    assert_eq!(zero, Some(Operand::int(0)));
    assert_clean(&out);
    assert_same(&m, &out, "fib_loop", &loops_inputs("fib_loop"));
}

#[test]
fn stacked_receive_passes() {
    let (m, out) = encoded("sum_loop", 2);
    let cfg = PassConfig::default();
    let t = target("sum_loop", 2);
    let out = pass_multi_exit_receive(&out, &t, &cfg).unwrap();
    let out = pass_multi_entry_receive(&out, &t, &cfg).unwrap();
    let out = pass_redundant_wait_timeout(&out, &t, &cfg).unwrap();
    let (_, layout) = match_loop(out.function("sum_loop", 2).unwrap()).unwrap();
    assert_eq!(
        layout,
        Layout {
            post_test: false,
            exits: 2,
            second_entry: Some(EntryGuard::Parity),
            wait_timeouts: 2,
        }
    );
    assert_clean(&out);
    assert_same(&m, &out, "sum_loop", &loops_inputs("sum_loop"));
}

#[test]
fn post_test_runs_the_body_first() {
    let m = fixture("loops.S");
    let cfg = PassConfig {
        post_test: true,
        ..PassConfig::default()
    };
    let out = pass_receive_loop(&m, &target("fact_loop", 2), &cfg).unwrap();
    let opts = RunOptions {
        fuel: 10_000,
        ..RunOptions::default()
    };
    let r = run(&out, "fact_loop", &[Term::int(0), Term::int(1)], &opts);
    assert_eq!(r.outcome, Outcome::FuelExhausted);
}

#[test]
fn many_to_many_catch() {
    let m = fixture("catch.S");
    let out = pass_many_to_many_catch(&m, &cfg_for("guarded", 1)).unwrap();
    let f = out.function("guarded", 1).unwrap();
    let c = build_cfg(f).unwrap();
    let regions = annotate_regions(&c);
    let catch: Vec<_> = regions.iter().filter(|r| r.kind == RegionKind::Catch).collect();
    assert_eq!(catch.len(), 1);
    assert_eq!(catch[0].cardinality(&c), (2, 2));
    assert_clean(&out);
    assert_same(&m, &out, "guarded", &ints(6));
    let thrown = run(&out, "guarded", &[Term::int(0)], &RunOptions::default());
    assert!(thrown.outcome.value().unwrap().to_string().starts_with("{'EXIT',{{badmatch,0}"));
}

#[test]
fn catch_pass_needs_a_catch() {
    assert_eq!(
        pass_many_to_many_catch(&fixture("loops.S"), &PassConfig::default()),
        Err(ObfError::NoCatchRegion)
    );
}

fn count_puts(m: &ModuleAsm) -> usize {
    m.functions
        .iter()
        .flat_map(|f| &f.body)
        .filter(|i| i.is("put") || i.opcode.starts_with("bs_put_"))
        .count()
}

#[test]
fn interleave_spreads_constructions() {
    let m = fixture("build.S");
    let inputs: Vec<Vec<Term>> = (0..20).map(|i| vec![Term::int(i * 7), Term::int(i * 300)]).collect();
    for seed in 0..20 {
        let cfg = PassConfig {
            seed,
            intensity: 3,
            ..PassConfig::default()
        };
        let out = pass_interleave_constructions(&m, &cfg);
        assert_eq!(count_puts(&out), count_puts(&m));
        assert_eq!(out, pass_interleave_constructions(&m, &cfg));
        let pair = out.function("pair", 2).unwrap();
        assert!(pair.body.len() > m.function("pair", 2).unwrap().body.len());
        let pack = out.function("pack", 2).unwrap();
        let init = pack.body.iter().find(|i| i.is("bs_init2")).unwrap();
        assert!(matches!(init.operands[1], Operand::X(_)));
        assert_clean(&out);
        assert_same(&m, &out, "pair", &inputs);
        assert_same(&m, &out, "pack", &inputs);
    }
    let none = PassConfig {
        intensity: 0,
        ..PassConfig::default()
    };
    assert_eq!(pass_interleave_constructions(&m, &none), m);
}

#[test]
fn setter_module_matches_generator() {
    let m = gen_mutable_tuple_setters(1).unwrap();
    let text = "{module, put_tuple_elem}.
        {exports, [{do1,2},{module_info,0},{module_info,1}]}.
        {attributes, []}.
        {labels, 7}.
        {function, do1, 2, 2}.
          {label,1}. {func_info,{atom,put_tuple_elem},{atom,do1},2}.
          {label,2}. {set_tuple_element,{x,1},{x,0},0}. return.
        {function, module_info, 0, 4}.
          {label,3}. {func_info,{atom,put_tuple_elem},{atom,module_info},0}.
          {label,4}. {move,{atom,put_tuple_elem},{x,0}}.
            {call_ext_only,1,{extfunc,erlang,get_module_info,1}}.
        {function, module_info, 1, 6}.
          {label,5}. {func_info,{atom,put_tuple_elem},{atom,module_info},1}.
          {label,6}. {move,{x,0},{x,1}}. {move,{atom,put_tuple_elem},{x,0}}.
            {call_ext_only,2,{extfunc,erlang,get_module_info,2}}.";
    assert_eq!(m, parse_module(text).unwrap());
    let three = gen_mutable_tuple_setters(3).unwrap();
    assert_eq!(three.label_count, 11);
    assert_eq!(three.functions[2].body[3], Instruction::new(
        "set_tuple_element",
        vec![Operand::X(1), Operand::X(0), Operand::num(2)],
    ));
    assert_clean(&three);
    assert!(matches!(gen_mutable_tuple_setters(MAX_SETTERS + 1), Err(ObfError::Refused(_))));
    assert!(gen_mutable_tuple_setters(0).is_err());
}

#[test]
fn pipeline_parsing() {
    let text = "{receive_loop,[{target,{sum_loop,2}},{post_test,true}]}.
                {redundant_wait_timeout,[{target,{sum_loop,2}},{intensity,3}]}.
                {interleave_constructions,[{seed,7}]}.";
    let steps = parse_pipeline(text).unwrap();
    assert_eq!(steps.len(), 3);
    assert!(steps[0].1.post_test);
    assert_eq!(steps[1].1.intensity, 3);
    assert_eq!(steps[2].1.seed, 7);
    let m = fixture("loops.S");
    let out = run_pipeline(&m, &steps).unwrap();
    let f = out.function("sum_loop", 2).unwrap();
    assert_eq!(match_loop(f).unwrap().1.wait_timeouts, 3);
    assert_same(&m, &out, "sum_to_n", &ints(20)[1..]);

    assert!(parse_pipeline("{shuffle,[]}.").is_err());
    assert!(parse_pipeline("{receive_loop,[{seed,-1}]}.").is_err());
    assert!(matches!(
        run_pipeline(&m, &parse_pipeline("{receive_loop,[]}.").unwrap()),
        Err(ObfError::Pipeline(_))
    ));
}
