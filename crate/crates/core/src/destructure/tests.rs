use super::interp::run_structured;
use super::*;
use crate::asmir::{construction_spans, parse_module};
use crate::miniemu::{run, RunOptions};
use crate::obf::{
    apply_pass, pass_interleave_constructions, pass_multi_entry_receive, pass_multi_exit_receive, pass_receive_loop,
    pass_redundant_wait_timeout, PassConfig,
};

fn fixture(name: &str) -> ModuleAsm {
    let path = format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    parse_module(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn opts(strategy: Strategy) -> StructureOptions {
    StructureOptions {
        strategy,
        ..StructureOptions::default()
    }
}

fn target(name: &str, arity: u32) -> (String, u32) {
    (name.to_string(), arity)
}

fn ints(v: &[i64]) -> Vec<Term> {
    v.iter().map(|&i| Term::int(i)).collect()
}

/// The structured program and the emulator agree on every input.
fn assert_interp_matches(m: &ModuleAsm, o: &StructureOptions, name: &str, inputs: &[Vec<Term>]) {
    let program = structure_module(m, o).unwrap();
    let ro = RunOptions {
        fuel: 200_000,
        ..RunOptions::default()
    };
    for args in inputs {
        let a = run(m, name, args, &ro);
        let b = run_structured(m, &program, name, args, &ro);
        assert_eq!(a.outcome, b.outcome, "{name}{args:?} under {:?}", o.strategy);
        assert_eq!(a.residue, b.residue, "{name}{args:?}");
        assert_eq!(a.costs.reductions, b.costs.reductions, "{name}{args:?}");
    }
}

fn primops(e: &PseudoExpr) -> Vec<String> {
    let mut out = Vec::new();
    e.visit(&mut |n| {
        if let PseudoExpr::Primop(op, _) = n {
            out.push(op.clone());
        }
    });
    out
}

fn count(e: &PseudoExpr, pred: impl Fn(&PseudoExpr) -> bool) -> usize {
    let mut n = 0;
    e.visit(&mut |x| n += pred(x) as usize);
    n
}

#[test]
fn diamond_is_one_if() {
    let m = fixture("shapes.S");
    let s = structure_function(m.function("diamond", 1).unwrap(), &StructureOptions::default()).unwrap();
    assert_eq!(count(&s.expr, |e| matches!(e, PseudoExpr::If(_))), 1);
    assert_eq!(count(&s.expr, |e| matches!(e, PseudoExpr::Loop(..))), 0);
    assert!(s.dispatch_vars.is_empty());
    assert_eq!(s.duplicated, 0);
    assert_eq!(s.state_sequences, 0);
    assert!(s.covers_cfg());
    let text = emit_pseudo_source(&s.expr);
    assert!(text.starts_with("if\n    #is_lt(X0, {integer,10}) ->"), "{text}");
    assert!(text.contains("true ->"));
    assert!(text.ends_with("#return()"), "{text}");
    assert_interp_matches(&m, &StructureOptions::default(), "diamond", &[ints(&[3]), ints(&[10]), ints(&[40])]);
}

#[test]
fn two_entry_loop_by_splitting() {
    let m = fixture("shapes.S");
    let f = m.function("twoentry", 1).unwrap();
    let s = structure_function(f, &opts(Strategy::Duplicate)).unwrap();
    assert_eq!(s.irreducible_regions, 1);
    assert!(s.duplicated > 0);
    assert!(s.dispatch_vars.is_empty());
    assert_eq!(s.loops, 1);
    assert!(s.covers_cfg());
    let inputs: Vec<Vec<Term>> = (0..12).map(|n| ints(&[n])).collect();
    assert_interp_matches(&m, &opts(Strategy::Duplicate), "twoentry", &inputs);
}

#[test]
fn two_entry_loop_by_dispatch() {
    let m = fixture("shapes.S");
    let f = m.function("twoentry", 1).unwrap();
    let s = structure_function(f, &opts(Strategy::CondVars)).unwrap();
    assert_eq!(s.dispatch_vars, vec!["D0".to_string()]);
    assert_eq!(s.duplicated, 0);
    assert_eq!(s.loops, 1);
    assert!(s.covers_cfg());
    // Each instruction of the loop appears once.
    let adds = primops(&s.expr).iter().filter(|p| *p == "gc_bif").count();
    assert_eq!(adds, 4);
    let inputs: Vec<Vec<Term>> = (0..12).map(|n| ints(&[n])).collect();
    assert_interp_matches(&m, &opts(Strategy::CondVars), "twoentry", &inputs);
}

#[test]
fn splitting_respects_the_cap() {
    let m = fixture("shapes.S");
    let f = m.function("twoentry", 1).unwrap();
    let o = StructureOptions {
        cap_factor: 1,
        ..StructureOptions::default()
    };
    assert!(matches!(structure_function(f, &o), Err(StructError::BlowUp { .. })));
}

fn corpus() -> Vec<ModuleAsm> {
    ["shapes.S", "loops.S", "catch.S", "receive.S", "build.S", "dumpbinmatch.S"]
        .iter()
        .map(|n| fixture(n))
        .collect()
}

#[test]
fn corpus_is_goto_free_and_covered() {
    for m in corpus() {
        for strategy in [Strategy::Duplicate, Strategy::CondVars] {
            for s in structure_module(&m, &opts(strategy)).unwrap() {
                assert!(s.covers_cfg(), "{}:{} {:?}", m.name, s.name, strategy);
                let ops = primops(&s.expr);
                assert!(!ops.iter().any(|o| o == "jump" || o == "loop_rec_end" || o == "wait"), "{ops:?}");
                let text = emit_pseudo_source(&s.expr);
                assert_eq!(parse_pseudo(&text).unwrap(), s.expr.normalized(), "{text}");
            }
        }
    }
}

#[test]
fn corpus_runs_the_same_structured() {
    let m = fixture("loops.S");
    for strategy in [Strategy::Duplicate, Strategy::CondVars] {
        let o = opts(strategy);
        assert_interp_matches(&m, &o, "sum_to_n", &(0..15).map(|n| ints(&[n])).collect::<Vec<_>>());
        assert_interp_matches(&m, &o, "fib_loop", &(0..10).map(|n| ints(&[n, 0, 1])).collect::<Vec<_>>());
        let c = fixture("catch.S");
        assert_interp_matches(&c, &o, "guarded", &(0..4).map(|n| ints(&[n])).collect::<Vec<_>>());
        assert_interp_matches(&c, &o, "tried", &(0..4).map(|n| ints(&[n])).collect::<Vec<_>>());
        let r = fixture("receive.S");
        for f in &r.functions {
            if f.name != "module_info" && r.is_exported(&f.name, f.arity) {
                let args = vec![Term::int(7); f.arity as usize];
                assert_interp_matches(&r, &o, &f.name, &[args]);
            }
        }
        let b = fixture("build.S");
        assert_interp_matches(&b, &o, "pack", &[ints(&[1, 2])]);
        assert_interp_matches(&b, &o, "pair", &[ints(&[1, 2])]);
    }
}

#[test]
fn receive_encoded_loops_structure_and_run() {
    let m = fixture("loops.S");
    let cfg = PassConfig::default();
    let t = target("sum_loop", 2);
    let once = pass_receive_loop(&m, &t, &cfg).unwrap();
    let variants = [
        once.clone(),
        pass_multi_exit_receive(&once, &t, &cfg).unwrap(),
        pass_multi_entry_receive(&once, &t, &cfg).unwrap(),
        pass_redundant_wait_timeout(&once, &t, &cfg).unwrap(),
    ];
    let inputs: Vec<Vec<Term>> = (0..8).map(|n| ints(&[n, 3])).collect();
    for v in &variants {
        for strategy in [Strategy::Duplicate, Strategy::CondVars] {
            assert_interp_matches(v, &opts(strategy), "sum_loop", &inputs);
        }
    }
}

#[test]
fn unmerged_tails_duplicate_instead_of_sequencing() {
    let m = fixture("receive.S");
    let plain = structure_module(&m, &StructureOptions::default()).unwrap();
    let o = StructureOptions {
        unmerge_tails: true,
        ..StructureOptions::default()
    };
    let unmerged = structure_module(&m, &o).unwrap();
    for (a, b) in plain.iter().zip(&unmerged) {
        assert_eq!(b.state_sequences, 0, "{}", b.name);
        assert!(b.expr.size() >= a.expr.size() || a.state_sequences == 0);
    }
}

fn every_variant() -> PseudoExpr {
    use PseudoExpr as P;
    P::Seq(vec![
        P::assign(P::var("V"), P::Lit(Term::int(-5))),
        P::If(vec![
            (P::prim("=:=", vec![P::var("V"), P::Lit(Term::int(0))]), P::skip()),
            (
                P::atom("true"),
                P::Seq(vec![P::Call(None, "f".into(), vec![P::var("X0")]), P::atom("if")]),
            ),
        ]),
        P::Loop(
            Box::new(P::prim(">=", vec![P::var("V"), P::Lit(Term::int(1))])),
            Box::new(P::prim("gc_bif", vec![P::Lit(Term::atom("+")), P::Lit(crate::sterm::parse_term("{f,0}").unwrap())])),
        ),
        P::Receive(
            vec![(P::var("X0"), P::prim("return", vec![]))],
            Some(Box::new((P::Lit(Term::int(10)), P::Call(Some("erlang".into()), "display".into(), vec![])))),
        ),
        P::Lit(crate::sterm::parse_term("<<1,2:3>>").unwrap()),
        P::Lit(crate::sterm::parse_term("{x,\"str\",[1|2],'Q q',1.5}").unwrap()),
        P::Lit(Term::Float(-2.5)),
        P::prim("=", vec![P::var("A"), P::prim("=", vec![P::var("B"), P::Lit(Term::int(1))])]),
        P::prim("-", vec![P::prim("+", vec![P::var("A"), P::var("B")]), P::Lit(Term::int(2))]),
    ])
}

#[test]
fn pseudo_text_round_trips() {
    let p = every_variant();
    let text = emit_pseudo_source(&p);
    assert_eq!(parse_pseudo(&text).unwrap(), p.normalized(), "{text}");
    assert!(text.contains("receive\n"));
    assert!(text.contains("after 10 ->"));
    assert!(text.contains("'if'"));
    assert!(text.contains("A = B = 1"), "{text}");
    assert!(text.contains("(A + B) - 2"));
    let f = emit_function("g", 2, &p);
    let parsed = parse_pseudo_functions(&f).unwrap();
    assert_eq!(parsed, vec![("g".to_string(), 2, p.normalized())]);
    assert!(parse_pseudo("if X -> skip").is_err());
}

#[test]
fn module_text_has_the_header() {
    let text = module_pseudo_source(&fixture("shapes.S"), &StructureOptions::default()).unwrap();
    assert!(text.starts_with(HEADER));
    let body: String = text.lines().filter(|l| !l.starts_with("%%")).collect::<Vec<_>>().join("\n");
    assert_eq!(parse_pseudo_functions(&body).unwrap().len(), 3);
}

fn spans_contiguous(m: &ModuleAsm) -> bool {
    m.functions.iter().all(|f| construction_spans(f).0.iter().all(|s| s.is_contiguous()))
}

#[test]
fn normalization_undoes_interleaving() {
    let m = fixture("build.S");
    for seed in 0..20 {
        for intensity in 1..=3 {
            let cfg = PassConfig {
                seed,
                intensity,
                reroute_sizes: true,
                ..PassConfig::default()
            };
            let mixed = pass_interleave_constructions(&m, &cfg);
            assert!(!spans_contiguous(&mixed));
            let (n, notes) = normalize_report(&mixed);
            assert!(notes.is_empty(), "{notes:?}");
            assert!(spans_contiguous(&n), "seed {seed}");
            assert_eq!(normalize_constructions(&n), n);
            let ro = RunOptions::default();
            for name in ["pair", "pack"] {
                for args in [ints(&[1, 2]), ints(&[255, 65535])] {
                    assert_eq!(run(&m, name, &args, &ro).outcome, run(&n, name, &args, &ro).outcome);
                }
            }
            let pack = n.function("pack", 2).unwrap();
            let opener = pack.body.iter().find(|i| i.is("bs_init2")).unwrap();
            assert_eq!(opener.operands[1], Operand::num(3));
        }
    }
}

#[test]
fn contiguous_code_is_unchanged() {
    let m = fixture("build.S");
    let (n, notes) = normalize_report(&m);
    assert_eq!(n, m);
    assert!(notes.is_empty());
}

#[test]
fn routed_size_is_reported() {
    let m = fixture("shapes.S");
    let (n, notes) = normalize_report(&m);
    assert_eq!(n, m);
    assert_eq!(notes.len(), 1, "{notes:?}");
    assert_eq!(notes[0].function, "routed");
    assert!(notes[0].message.contains("overwritten at 4"), "{}", notes[0].message);
}

#[test]
fn blocked_hoist_is_reported() {
    let text = "{module, blk}.\n{exports, [{t,1}]}.\n{attributes, []}.\n{labels, 3}.\n\
        {function, t, 1, 2}.\n{label,1}.\n{func_info,{atom,blk},{atom,t},1}.\n{label,2}.\n\
        {test_heap,3,1}.\n{put_tuple,2,{x,1}}.\n{put,{x,0}}.\n{move,{integer,5},{x,0}}.\n{put,{x,0}}.\n\
        {move,{x,1},{x,0}}.\nreturn.\n";
    let m = parse_module(text).unwrap();
    let (n, notes) = normalize_report(&m);
    assert_eq!(n, m);
    assert_eq!(notes.len(), 1);
    assert!(notes[0].message.contains("writes {x,0} used at 5"), "{}", notes[0].message);
}

#[test]
fn sum_to_n_recovers_to_one_accumulator() {
    let m = fixture("loops.S");
    let obf = pass_receive_loop(&m, &target("sum_to_n", 1), &PassConfig::default()).unwrap();
    let (rec, report) = recover_module(&obf);
    let exact: Vec<&Fidelity> = report.iter().filter(|f| f.level == FidelityLevel::ExactSchema).collect();
    assert_eq!(exact.len(), 1);
    let schema = exact[0].schema.as_ref().unwrap();
    assert_eq!(schema.accumulators().len(), 1);
    assert!(exact[0].notes.is_empty());
    let ro = RunOptions::default();
    for n in 0..120 {
        let args = ints(&[n]);
        assert_eq!(run(&m, "sum_to_n", &args, &ro).outcome, run(&rec, "sum_to_n", &args, &ro).outcome);
    }
    assert!(!rec.functions.iter().flat_map(|f| &f.body).any(|i| i.is("loop_rec")));
    let text = module_pseudo_source(&rec, &StructureOptions::default()).unwrap();
    let name = &exact[0].function;
    let def = text.split("\n\n").find(|chunk| chunk.starts_with(&format!("{name}("))).unwrap();
    assert!(def.contains(&format!("#return({name}(X0, X1))")), "{def}");
}

#[test]
fn multi_exit_recovery_notes_the_merge() {
    let m = fixture("loops.S");
    let t = target("fact_loop", 2);
    let cfg = PassConfig::default();
    let obf = pass_multi_exit_receive(&pass_receive_loop(&m, &t, &cfg).unwrap(), &t, &cfg).unwrap();
    let (rec, report) = recover_module(&obf);
    let f = report.iter().find(|f| f.function == "fact_loop").unwrap();
    assert_eq!(f.level, FidelityLevel::ExactSchema);
    assert!(f.notes.iter().any(|n| n.starts_with("exit-merge")), "{:?}", f.notes);
    let ro = RunOptions::default();
    for n in 0..12 {
        let args = ints(&[n, 1]);
        assert_eq!(run(&obf, "fact_loop", &args, &ro).outcome, run(&rec, "fact_loop", &args, &ro).outcome);
    }
    let t = fidelity_term(&report).to_string();
    assert!(t.contains("{fidelity,{fact_loop,2},exact_schema,"), "{t}");
}

#[test]
fn post_test_recovery_adds_a_helper() {
    let m = fixture("loops.S");
    let cfg = PassConfig {
        post_test: true,
        ..PassConfig::default()
    };
    let obf = apply_pass(
        &m,
        "receive_loop",
        &PassConfig {
            targets: vec![target("sum_loop", 2)],
            ..cfg
        },
    )
    .unwrap();
    let (rec, report) = recover_module(&obf);
    assert!(rec.function("sum_loop_loop", 2).is_some());
    assert!(report.iter().any(|f| f.notes.iter().any(|n| n.contains("sum_loop_loop/2"))));
    let ro = RunOptions::default();
    for n in 1..30 {
        let args = ints(&[n, 3]);
        assert_eq!(run(&obf, "sum_loop", &args, &ro).outcome, run(&rec, "sum_loop", &args, &ro).outcome);
    }
}

#[test]
fn recognition_is_conservative() {
    for m in corpus() {
        for f in &m.functions {
            assert!(recover_receive_loop(f).is_none(), "{}:{}", m.name, f.name);
        }
        let (rec, report) = recover_module(&m);
        assert_eq!(rec, m);
        assert!(report.iter().all(|f| f.level == FidelityLevel::StructuredOnly));
    }
}

mod roundtrip {
    use super::{emit_pseudo_source, parse_pseudo, PseudoExpr, Term};
    use proptest::prelude::*;

    fn leaf() -> impl Strategy<Value = PseudoExpr> {
        prop_oneof![
            "[A-Z][a-z0-9]{0,3}".prop_map(PseudoExpr::Var),
            any::<i32>().prop_map(|i| PseudoExpr::Lit(Term::int(i))),
            prop_oneof!["[a-z][a-z_]{0,5}", Just("if".to_string()), Just("Odd atom".to_string())]
                .prop_map(|a| PseudoExpr::Lit(Term::atom(&a))),
            prop::collection::vec(-3i64..300, 0..3)
                .prop_map(|v| PseudoExpr::Lit(Term::Tuple(v.into_iter().map(Term::int).collect()))),
        ]
    }

    fn tree() -> impl Strategy<Value = PseudoExpr> {
        leaf().prop_recursive(4, 40, 4, |inner| {
            let arm = (inner.clone(), inner.clone());
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..4).prop_map(PseudoExpr::Seq),
                prop::collection::vec(arm.clone(), 1..3).prop_map(PseudoExpr::If),
                (inner.clone(), inner.clone()).prop_map(|(c, b)| PseudoExpr::Loop(Box::new(c), Box::new(b))),
                (prop::collection::vec(arm.clone(), 0..3), prop::option::of(arm))
                    .prop_filter("receive needs a clause", |(v, a)| !v.is_empty() || a.is_some())
                    .prop_map(|(v, a)| PseudoExpr::Receive(v, a.map(Box::new))),
                (prop::option::of("[a-z]{1,4}"), "[a-z][a-z_]{0,4}", prop::collection::vec(inner.clone(), 0..3))
                    .prop_map(|(m, f, a)| PseudoExpr::Call(m, f, a)),
                ("[a-z][a-z_]{0,6}", prop::collection::vec(inner.clone(), 0..3))
                    .prop_map(|(n, a)| PseudoExpr::Primop(n, a)),
                (prop::sample::select(vec!["=", "+", "-", "=:=", "=/=", "<", ">="]), inner.clone(), inner)
                    .prop_map(|(op, a, b)| PseudoExpr::prim(op, vec![a, b])),
            ]
        })
    }

    proptest! {
        #[test]
        fn printed_trees_parse_back(p in tree()) {
            let text = emit_pseudo_source(&p);
            prop_assert_eq!(parse_pseudo(&text).unwrap(), p.normalized(), "{}", text);
        }
    }
}
