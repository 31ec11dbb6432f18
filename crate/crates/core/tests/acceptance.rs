//! Acceptance suite: one PASS/FAIL line per criterion.

use std::time::{Duration, Instant};

use beamobf::asmir::{construction_spans, decode_module, encode_module, parse_module, print_module, ModuleAsm};
use beamobf::beampatch::{apply_patch, diff, encode_register_byte, rewrite_register_byte, RegisterByte};
use beamobf::cfg::{annotate_regions, build_cfg, find_loops, is_reducible, RegionKind};
use beamobf::destructure::{
    normalize_constructions, recover_module, structure_module, FidelityLevel, PseudoExpr, Strategy, StructureOptions,
};
use beamobf::miniemu::{
    cost_profile, run, run_differential, seeded_int_inputs, writer_module, DiffOptions, Fault, Outcome, RunOptions,
    WriterKind,
};
use beamobf::obf::{
    apply_pass, gen_mutable_tuple_setters, pass_interleave_constructions, pass_many_to_many_catch,
    pass_multi_entry_receive, pass_multi_exit_receive, pass_receive_loop, pass_redundant_wait_timeout, EntryGuard,
    PassConfig,
};
use beamobf::sterm::{parse_term, Term};
use beamobf::vlite::validate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn fixture_text(name: &str) -> String {
    std::fs::read_to_string(format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn fixture(name: &str) -> ModuleAsm {
    parse_module(&fixture_text(name)).unwrap()
}

fn target(name: &str, arity: u32) -> (String, u32) {
    (name.to_string(), arity)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// The module the setter generator listing builds, expanded by hand from
/// its list comprehensions.
fn expanded_setter_listing(n: u64) -> String {
    let m = "put_tuple_elem";
    let mut exports: Vec<String> = (1..=n).map(|x| format!("{{do{x},2}}")).collect();
    exports.extend(["{module_info,0}".to_string(), "{module_info,1}".to_string()]);
    let mut funs: Vec<String> = (1..=n)
        .map(|x| {
            format!(
                "{{function,do{x},2,{l},[{{label,{f}}},{{func_info,{{atom,{m}}},{{atom,do{x}}},2}},{{label,{l}}},\
                 {{set_tuple_element,{{x,1}},{{x,0}},{i}}},return]}}",
                l = x * 2,
                f = x * 2 - 1,
                i = x - 1
            )
        })
        .collect();
    funs.push(format!(
        "{{function,module_info,0,{e},[{{label,{f}}},{{func_info,{{atom,{m}}},{{atom,module_info}},0}},{{label,{e}}},\
         {{move,{{atom,{m}}},{{x,0}}}},{{call_ext_only,1,{{extfunc,erlang,get_module_info,1}}}}]}}",
        f = n * 2 + 1,
        e = n * 2 + 2
    ));
    funs.push(format!(
        "{{function,module_info,1,{e},[{{label,{f}}},{{func_info,{{atom,{m}}},{{atom,module_info}},1}},{{label,{e}}},\
         {{move,{{x,0}},{{x,1}}}},{{move,{{atom,{m}}},{{x,0}}}},{{call_ext_only,2,{{extfunc,erlang,get_module_info,2}}}}]}}",
        f = n * 2 + 3,
        e = n * 2 + 4
    ));
    format!("{{{m},[{}],[],[{}],{}}}", exports.join(","), funs.join(","), 2 * n + 5)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut listings: Vec<(String, ModuleAsm)> = [
        "dumpbinmatch.S",
        "dumpbinmatch_broken.S",
        "dumpbinmatch_patchsrc.S",
        "dumpbinmatch_patchable.S",
        "opdep.S",
    ]
    .iter()
    .map(|n| (n.to_string(), fixture(n)))
    .collect();
    for n in [1, 3] {
        let m = gen_mutable_tuple_setters(n).map_err(|e| e.to_string())?;
        let expected = parse_term(&expanded_setter_listing(n)).unwrap();
        ensure(encode_module(&m) == expected, || format!("setters n={n} differ from the expanded listing"))?;
        listings.push((format!("setters n={n}"), m));
    }
    let dump = &listings[0].1;
    ensure(dump.functions.len() == 1 && dump.functions[0].entry == 2, || "dumpbinmatch shape".into())?;
    let f = &dump.functions[0];
    let from_entry = f.body.len() - f.label_index(f.entry).unwrap();
    ensure(from_entry == 8, || format!("dumpbinmatch has {from_entry} instructions from its entry label"))?;
    for (name, m) in &listings {
        let term = encode_module(m);
        let decoded = decode_module(std::slice::from_ref(&term)).map_err(|e| format!("{name}: {e}"))?;
        ensure(&decoded == m, || format!("{name}: decode(encode(m)) != m"))?;
        let first = print_module(&decoded);
        let second = print_module(&parse_module(&first).map_err(|e| format!("{name}: {e}"))?);
        ensure(first == second, || format!("{name}: reprint is not a fixpoint"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("{} listings at a fixpoint in {elapsed:.2?}", listings.len()))
}

fn criterion_2() -> Verdict {
    let expected = parse_term(
        "{beam_validator,{{dumpbeam,dumpbinmatch,0},\
           {{call_ext_only,1,{extfunc,erlang,display,1}},9,{match_context,{x,0}}}}}",
    )
    .unwrap();
    let broken = validate(&fixture("dumpbinmatch_broken.S"));
    ensure(broken.len() == 1, || format!("{} diagnostics on the broken listing", broken.len()))?;
    let got = broken[0].validator_term();
    ensure(got == expected, || format!("got {got}"))?;
    let clean = validate(&fixture("dumpbinmatch.S"));
    ensure(clean.is_empty(), || format!("{} diagnostics on the original", clean.len()))?;
    Ok(format!("{got}"))
}

fn receive_cardinality(m: &ModuleAsm, name: &str, arity: u32) -> Vec<(usize, usize)> {
    let c = build_cfg(m.function(name, arity).unwrap()).unwrap();
    annotate_regions(&c)
        .iter()
        .filter(|r| r.kind == RegionKind::Receive)
        .map(|r| r.cardinality(&c))
        .collect()
}

fn criterion_3() -> Verdict {
    let recv = fixture("receive.S");
    let pick = receive_cardinality(&recv, "pick", 0);
    ensure(pick == [(1, 1)], || format!("pick/0 reports {pick:?}"))?;

    let catch = pass_many_to_many_catch(
        &fixture("catch.S"),
        &PassConfig {
            targets: vec![target("guarded", 1)],
            ..PassConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let c = build_cfg(catch.function("guarded", 1).unwrap()).unwrap();
    let catch_card: Vec<(usize, usize)> = annotate_regions(&c)
        .iter()
        .filter(|r| r.kind == RegionKind::Catch)
        .map(|r| r.cardinality(&c))
        .collect();
    ensure(catch_card.iter().any(|&(o, k)| o >= 2 && k >= 2), || format!("catch cardinality {catch_card:?}"))?;

    let loops = fixture("loops.S");
    let cfg = PassConfig::default();
    let t = target("sum_loop", 2);
    let once = pass_receive_loop(&loops, &t, &cfg).map_err(|e| e.to_string())?;
    let waits = pass_redundant_wait_timeout(&once, &t, &cfg).map_err(|e| e.to_string())?;
    let c = build_cfg(waits.function("sum_loop", 2).unwrap()).unwrap();
    let closers: usize = annotate_regions(&c)
        .iter()
        .filter(|r| r.kind == RegionKind::Receive)
        .map(|r| r.closers_of(&c, "wait_timeout").count())
        .sum();
    ensure(closers >= 2, || format!("{closers} wait_timeout closers"))?;

    let entry = pass_multi_entry_receive(&once, &t, &cfg).map_err(|e| e.to_string())?;
    let c = build_cfg(entry.function("sum_loop", 2).unwrap()).unwrap();
    let irreducible = find_loops(&c).iter().any(|l| !l.reducible && l.entry_count >= 2);
    ensure(irreducible && !is_reducible(&c), || "multi-entry loop not flagged irreducible".into())?;

    let exit = pass_multi_exit_receive(&once, &t, &cfg).map_err(|e| e.to_string())?;
    let f = exit.function("sum_loop", 2).unwrap();
    let c = build_cfg(f).unwrap();
    let rec = f.body.iter().position(|i| i.is("loop_rec")).unwrap();
    let rec_block = c.block_of_index(rec).unwrap();
    let found = find_loops(&c);
    let l = found.iter().find(|l| l.body.contains(&rec_block)).ok_or("no loop around loop_rec")?;
    ensure(!l.exit_postdominates, || "an exit post-dominates the loop".into())?;
    let targets: std::collections::BTreeSet<usize> = l.exits.iter().map(|e| e.to).collect();
    ensure(targets.len() >= 2, || format!("{} exit targets", targets.len()))?;
    Ok(format!(
        "pick {pick:?}, catch {catch_card:?}, {closers} wait_timeout closers, irreducible entry, {} exit targets",
        targets.len()
    ))
}

/// Seeded differential check; returns (trials, mismatches).
fn differential(a: &ModuleAsm, b: &ModuleAsm, name: &str, arity: u32, range: std::ops::RangeInclusive<i64>) -> (usize, usize) {
    let opts = DiffOptions {
        residue: true,
        ..DiffOptions::default()
    };
    let report = run_differential(a, b, name, seeded_int_inputs(0xACCE, arity, range), 100, &opts);
    (report.trials, report.mismatches.len())
}

/// Every obfuscated variant the suite exercises: (label, original,
/// obfuscated, checked function, arity, input range).
#[allow(clippy::type_complexity)]
fn variants() -> Vec<(String, ModuleAsm, ModuleAsm, String, u32, std::ops::RangeInclusive<i64>)> {
    let mut out = Vec::new();
    let loops = fixture("loops.S");
    for (name, arity) in [("sum_loop", 2), ("fact_loop", 2), ("fib_loop", 3), ("sum_to_n", 1)] {
        let t = target(name, arity);
        for seed in [1u64, 2] {
            let cfg = PassConfig {
                seed,
                entry_guard: if seed == 1 { EntryGuard::Parity } else { EntryGuard::Never },
                ..PassConfig::default()
            };
            let once = pass_receive_loop(&loops, &t, &cfg).unwrap();
            let mut add = |pass: &str, m: ModuleAsm| {
                out.push((format!("{pass} {name}/{arity} seed {seed}"), loops.clone(), m, name.to_string(), arity, 0..=200));
            };
            add("receive_loop", once.clone());
            add("multi_exit_receive", pass_multi_exit_receive(&once, &t, &cfg).unwrap());
            add("multi_entry_receive", pass_multi_entry_receive(&once, &t, &cfg).unwrap());
            add("redundant_wait_timeout", pass_redundant_wait_timeout(&once, &t, &cfg).unwrap());
        }
        let post = apply_pass(
            &loops,
            "receive_loop",
            &PassConfig {
                targets: vec![t.clone()],
                post_test: true,
                ..PassConfig::default()
            },
        )
        .unwrap();
        out.push((format!("receive_loop post-test {name}/{arity}"), loops.clone(), post, name.to_string(), arity, 1..=200));
    }
    let catch = fixture("catch.S");
    for (name, arity) in [("guarded", 1), ("tried", 1)] {
        let cfg = PassConfig {
            targets: vec![target(name, arity)],
            ..PassConfig::default()
        };
        if let Ok(m) = pass_many_to_many_catch(&catch, &cfg) {
            out.push((format!("many_to_many_catch {name}/{arity}"), catch.clone(), m, name.to_string(), arity, -3..=3));
        }
    }
    let build = fixture("build.S");
    for seed in 0..4 {
        for intensity in 1..=3 {
            let cfg = PassConfig {
                seed,
                intensity,
                ..PassConfig::default()
            };
            let m = pass_interleave_constructions(&build, &cfg);
            for name in ["pair", "pack"] {
                out.push((
                    format!("interleave_constructions {name}/2 seed {seed} intensity {intensity}"),
                    build.clone(),
                    m.clone(),
                    name.to_string(),
                    2,
                    -70_000..=70_000,
                ));
            }
        }
    }
    out
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let mut trials = 0;
    let mut passes = std::collections::BTreeSet::new();
    for (label, orig, obf, name, arity, range) in variants() {
        let (t, bad) = differential(&orig, &obf, &name, arity, range);
        trials += t;
        ensure(bad == 0, || format!("{label}: {bad} mismatches"))?;
        passes.insert(label.split(' ').next().unwrap().to_string());
    }
    ensure(passes.len() == 6, || format!("only {passes:?} exercised"))?;

    let loops = fixture("loops.S");
    let obf = pass_receive_loop(&loops, &target("sum_to_n", 1), &PassConfig::default()).unwrap();
    for n in 0..=200i64 {
        let r = run(&obf, "sum_to_n", &[Term::int(n)], &RunOptions::default());
        ensure(r.outcome == Outcome::Value(Term::int(n * (n + 1) / 2)), || format!("sum_to_n({n}) = {:?}", r.outcome))?;
        ensure(r.residue == 0, || format!("sum_to_n({n}) leaves {} messages", r.residue))?;
        // One state message enters the loop, then one per iteration.
        let iterations = r.costs.messages_sent - 1;
        ensure(iterations == n as u64, || format!("sum_to_n({n}) ran {iterations} iterations"))?;
        ensure(r.costs.messages_removed == r.costs.messages_sent, || format!("sum_to_n({n}) removal count"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{trials} trials over {} passes, 0 mismatches, residue 0 and counter = n for n <= 200, {elapsed:.1?}", passes.len()))
}

fn has_goto(e: &PseudoExpr) -> bool {
    let mut found = false;
    e.visit(&mut |n| {
        if let PseudoExpr::Primop(op, _) = n {
            found |= matches!(op.as_str(), "jump" | "loop_rec_end" | "wait");
        }
    });
    found
}

fn criterion_5() -> Verdict {
    let loops = fixture("loops.S");
    let mut recovered = 0;
    for (name, arity) in [("sum_loop", 2), ("fact_loop", 2), ("fib_loop", 3), ("sum_to_n", 1)] {
        let obf = pass_receive_loop(&loops, &target(name, arity), &PassConfig::default()).unwrap();
        let (rec, report) = recover_module(&obf);
        ensure(report.iter().any(|f| f.level == FidelityLevel::ExactSchema), || format!("{name}: nothing recovered"))?;
        ensure(!rec.functions.iter().flat_map(|f| &f.body).any(|i| i.is("loop_rec")), || format!("{name}: receive left"))?;
        let (_, bad) = differential(&loops, &rec, name, arity, 0..=200);
        ensure(bad == 0, || format!("{name}: {bad} mismatches after recovery"))?;
        recovered += 1;
    }

    let build = fixture("build.S");
    let mut normalized = 0;
    for seed in 0..50 {
        for intensity in 1..=3 {
            let cfg = PassConfig {
                seed,
                intensity,
                ..PassConfig::default()
            };
            let n = normalize_constructions(&pass_interleave_constructions(&build, &cfg));
            let contiguous = n.functions.iter().all(|f| construction_spans(f).0.iter().all(|s| s.is_contiguous()));
            ensure(contiguous, || format!("seed {seed} intensity {intensity} stays interleaved"))?;
            normalized += 1;
        }
    }

    let mut modules: Vec<ModuleAsm> = ["loops.S", "receive.S", "catch.S", "build.S", "shapes.S", "dumpbinmatch.S", "opdep.S"]
        .iter()
        .map(|n| fixture(n))
        .collect();
    modules.extend(variants().into_iter().map(|v| v.2));
    let mut functions = 0;
    for m in &modules {
        for strategy in [Strategy::Duplicate, Strategy::CondVars] {
            let opts = StructureOptions {
                strategy,
                ..StructureOptions::default()
            };
            let all = structure_module(m, &opts).map_err(|e| format!("{}: {e}", m.name))?;
            for s in all {
                ensure(!has_goto(&s.expr) && s.covers_cfg(), || format!("{}:{}/{} {strategy:?}", m.name, s.name, s.arity))?;
                functions += 1;
            }
        }
    }
    Ok(format!(
        "{recovered} loops recovered, {normalized} interleavings normalized, {functions} structurings goto-free"
    ))
}

fn criterion_6() -> Verdict {
    let opts = RunOptions::default();
    let ratio = |kind| {
        let p = cost_profile(&writer_module(kind), "write", &[64, 1024], 10, &opts);
        p[1].1 as f64 / p[0].1.max(1) as f64
    };
    let copy = ratio(WriterKind::Setelement);
    let inplace = ratio(WriterKind::SetTupleElement);
    ensure((12.8..=19.2).contains(&copy), || format!("setelement ratio {copy}"))?;
    ensure(inplace <= 1.5, || format!("set_tuple_element ratio {inplace}"))?;
    ensure(ratio(WriterKind::Setelement) == copy, || "not deterministic".into())?;
    Ok(format!("setelement ratio {copy:.2}, set_tuple_element ratio {inplace:.2}"))
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut a: Vec<u8> = (0..1024).map(|_| rng.gen()).collect();
    a[411] = 3;
    a[413] = 3;
    let mut b = a.clone();
    b[411] = 35;
    b[413] = 35;
    for i in 600..604 {
        b[i] = a[i].wrapping_add(1);
    }
    let p = diff(&a, &b).map_err(|e| e.to_string())?;
    let text = p.to_string();
    ensure(text.starts_with("[{411,3,35},{413,3,35},"), || text.clone())?;
    for (byte, x) in [(0x03, 0), (0x23, 2), (0x83, 8)] {
        ensure(rewrite_register_byte(byte) == RegisterByte::X(x), || format!("{byte:#x}"))?;
    }
    for x in 0..16 {
        let byte = encode_register_byte(x).map_err(|e| e.to_string())?;
        ensure(rewrite_register_byte(byte) == RegisterByte::X(x), || format!("x{x}"))?;
    }
    ensure(encode_register_byte(16).is_err(), || "x16 encoded".into())?;
    for _ in 0..10_000 {
        let n = rng.gen_range(0..256);
        let a: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
        let b: Vec<u8> = a.iter().map(|&v| if rng.gen_bool(0.1) { rng.gen() } else { v }).collect();
        let p = diff(&a, &b).map_err(|e| e.to_string())?;
        ensure(apply_patch(&a, &p, true).ok().as_ref() == Some(&b), || "round trip failed".into())?;
    }
    Ok(format!("{}..., 10000 round trips", &text[..22]))
}

fn soundness_fault(o: &Outcome) -> bool {
    matches!(o, Outcome::Fault(Fault::Uninitialized(_) | Fault::ReceiveContext(_)))
}

fn criterion_8() -> Verdict {
    ensure(gen_mutable_tuple_setters(524_289).is_err(), || "524289 setters accepted".into())?;
    let strict = RunOptions::default();
    let recv = fixture("receive.S");
    let r = run(&recv, "bad_remove", &[], &strict);
    ensure(matches!(r.outcome, Outcome::Fault(Fault::ReceiveContext(_))), || format!("bad_remove: {:?}", r.outcome))?;
    let uninit = parse_module(
        "{module,u}. {exports,[{f,0}]}. {attributes,[]}. {labels,3}.\n\
         {function,f,0,2}. {label,1}. {func_info,{atom,u},{atom,f},0}. {label,2}. {move,{x,5},{x,0}}. return.",
    )
    .unwrap();
    let r = run(&uninit, "f", &[], &strict);
    ensure(r.outcome == Outcome::Fault(Fault::Uninitialized("{x,5}".into())), || format!("{:?}", r.outcome))?;
    let wait = parse_module(
        "{module,w}. {exports,[{f,0}]}. {attributes,[]}. {labels,4}.\n\
         {function,f,0,2}. {label,1}. {func_info,{atom,w},{atom,f},0}. {label,2}.\n\
         {loop_rec,{f,3},{x,0}}. remove_message. return. {label,3}. {wait,{f,2}}.",
    )
    .unwrap();
    for _ in 0..2 {
        let r = run(&wait, "f", &[], &strict);
        ensure(r.outcome == Outcome::Fault(Fault::Deadlock), || format!("{:?}", r.outcome))?;
    }

    let mut corpus: Vec<ModuleAsm> = ["loops.S", "receive.S", "catch.S", "build.S", "shapes.S", "opdep.S"]
        .iter()
        .map(|n| fixture(n))
        .collect();
    corpus.extend(variants().into_iter().map(|v| v.2));
    corpus.push(gen_mutable_tuple_setters(3).unwrap());
    let mut runs = 0;
    for m in &corpus {
        let dirty: Vec<(String, u32)> = validate(m).iter().map(|d| (d.function.clone(), d.arity)).collect();
        for f in &m.functions {
            if f.name == "module_info" || dirty.contains(&(f.name.clone(), f.arity)) || !m.is_exported(&f.name, f.arity) {
                continue;
            }
            let mut inputs = seeded_int_inputs(runs as u64, f.arity, 0..=200);
            for i in 0..10 {
                let args = inputs(i);
                let r = run(m, &f.name, &args, &strict);
                ensure(!soundness_fault(&r.outcome), || format!("{}:{}{args:?} -> {:?}", m.name, f.name, r.outcome))?;
                runs += 1;
            }
        }
    }
    Ok(format!("cap refused, three faults deterministic, {runs} clean runs without soundness faults"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("fixture round trip", criterion_1),
        ("validator reproduction", criterion_2),
        ("region cardinality", criterion_3),
        ("semantic preservation", criterion_4),
        ("deobfuscation round trip", criterion_5),
        ("complexity property", criterion_6),
        ("byte patching", criterion_7),
        ("guard rails", criterion_8),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                println!("criterion {}: FAIL {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
