use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn beamobf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beamobf")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn validate_flags_the_broken_listing() {
    let bad = beamobf(&["validate", p(&fixture("dumpbinmatch_broken.S"))]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("{match_context,{x,0}}"), "{}", stdout(&bad));
    let good = beamobf(&["validate", p(&fixture("dumpbinmatch.S"))]);
    assert_eq!(good.status.code(), Some(0));
    assert_eq!(stdout(&good), "");
}

#[test]
fn parse_reaches_a_fixpoint() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["loops.S", "receive.S", "catch.S", "dumpbinmatch.S"] {
        let once = dir.path().join("once.S");
        let o = beamobf(&["parse", p(&fixture(name)), "-o", p(&once)]);
        assert!(o.status.success());
        let twice = beamobf(&["parse", p(&once)]);
        assert_eq!(stdout(&twice), fs::read_to_string(&once).unwrap(), "{name}");
    }
}

#[test]
fn obfuscated_sum_has_no_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let obf = dir.path().join("obf.S");
    let o = beamobf(&[
        "obfuscate",
        p(&fixture("loops.S")),
        "--pass",
        "receive_loop",
        "--target",
        "sum_to_n/1",
        "-o",
        p(&obf),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d = beamobf(&[
        "emu",
        p(&fixture("loops.S")),
        "--diff",
        p(&obf),
        "--entry",
        "sum_to_n/1",
        "--trials",
        "100",
        "--residue",
    ]);
    assert_eq!(d.status.code(), Some(0));
    assert!(stdout(&d).ends_with("0 mismatches\n"));
}

#[test]
fn pipelines_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let pipe = dir.path().join("p.terms");
    fs::write(
        &pipe,
        "{receive_loop,[{target,{fact_loop,2}}]}.\n{multi_exit_receive,[{target,{fact_loop,2}}]}.\n\
         {interleave_constructions,[{seed,7},{intensity,2}]}.\n",
    )
    .unwrap();
    let run = || stdout(&beamobf(&["obfuscate", p(&fixture("loops.S")), "--pipeline", p(&pipe)]));
    let first = run();
    assert!(first.contains("loop_rec"));
    assert_eq!(first, run());
    fs::write(&pipe, "{no_such_pass,[]}.\n").unwrap();
    let bad = beamobf(&["obfuscate", p(&fixture("loops.S")), "--pipeline", p(&pipe)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("{error,{bad_pipeline,"));
}

#[test]
fn emu_runs_and_reports_faults() {
    let ok = beamobf(&["emu", p(&fixture("loops.S")), "--entry", "sum_to_n/1", "--args", "[10]"]);
    assert!(ok.status.success());
    assert!(stdout(&ok).starts_with("{result,{value,55},"));
    let fault = beamobf(&["emu", p(&fixture("receive.S")), "--entry", "bad_remove/0"]);
    assert_eq!(fault.status.code(), Some(1));
    assert!(stdout(&fault).contains("{fault,"));
    let arity = beamobf(&["emu", p(&fixture("loops.S")), "--entry", "sum_to_n/1", "--args", "[1,2]"]);
    assert_eq!(arity.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(beamobf(&["frob"]).status.code(), Some(2));
    assert_eq!(beamobf(&["emu", "x.S"]).status.code(), Some(2));
    assert_eq!(beamobf(&["structure", "x.S", "--strategy", "magic"]).status.code(), Some(2));
    let missing = beamobf(&["parse", "/nonexistent/x.S"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("{error,io,"));
}

#[test]
fn setters_and_the_export_cap() {
    let o = beamobf(&["gensetters", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("{set_tuple_element,{x,1},{x,0},2}."), "{text}");
    let refused = beamobf(&["gensetters", "524289"]);
    assert_eq!(refused.status.code(), Some(1));
}

#[test]
fn diff_and_apply_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = vec![0u8; 512];
    a[411] = 3;
    a[413] = 3;
    let mut b = a.clone();
    b[411] = 35;
    b[413] = 35;
    let (fa, fb, patch, out) = (
        dir.path().join("a.beam"),
        dir.path().join("b.beam"),
        dir.path().join("p.terms"),
        dir.path().join("c.beam"),
    );
    fs::write(&fa, &a).unwrap();
    fs::write(&fb, &b).unwrap();
    let d = beamobf(&["diffpatch", p(&fa), p(&fb), "-o", p(&patch)]);
    assert!(d.status.success());
    assert_eq!(fs::read_to_string(&patch).unwrap(), "[{411,3,35},{413,3,35}].\n");
    assert!(String::from_utf8_lossy(&d.stderr).contains("{registers,[{411,x0,x2},{413,x0,x2}]}"));
    let ap = beamobf(&["diffpatch", p(&fa), "--apply", p(&patch), "-o", p(&out)]);
    assert!(ap.status.success());
    assert_eq!(fs::read(&out).unwrap(), b);
    let stale = beamobf(&["diffpatch", p(&fb), "--apply", p(&patch)]);
    assert_eq!(stale.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&stale.stderr).contains("stale_byte"));
}

#[test]
fn structure_recover_and_cfg() {
    let dir = tempfile::tempdir().unwrap();
    for strategy in ["duplicate", "condvars"] {
        let report = dir.path().join("r.terms");
        let o = beamobf(&[
            "structure",
            p(&fixture("shapes.S")),
            "--strategy",
            strategy,
            "--report",
            p(&report),
        ]);
        assert!(o.status.success());
        assert!(stdout(&o).starts_with("%% Erlang-flavored pseudo-source"));
        assert!(fs::read_to_string(&report).unwrap().contains("{structured,{twoentry,1},"));
    }
    let asm = dir.path().join("rec.S");
    let o = beamobf(&["recover", p(&fixture("loops.S")), "--asm", p(&asm)]);
    assert!(o.status.success());
    assert!(beamobf(&["parse", p(&asm)]).status.success());
    let dot = dir.path().join("g.dot");
    let c = beamobf(&["cfg", p(&fixture("receive.S")), "--dot", p(&dot)]);
    assert!(c.status.success());
    assert!(stdout(&c).contains("{cardinality,{1,1}}"));
    assert!(fs::read_to_string(&dot).unwrap().starts_with("digraph"));
}
