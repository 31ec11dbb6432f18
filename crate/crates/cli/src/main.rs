use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use beamobf::asmir::{parse_module, print_module, ModuleAsm};
use beamobf::beampatch::{apply_patch, diff, list_chunks, rewrite_register_byte, PatchSet, RegisterByte};
use beamobf::cfg::{annotate_regions, build_cfg, export_dot, find_loops, is_reducible};
use beamobf::destructure::{
    fidelity_term, module_pseudo_source, normalize_report, recover_module, structure_module, Strategy,
    StructureOptions,
};
use beamobf::miniemu::{run, run_differential, seeded_int_inputs, DiffOptions, Mode, RunOptions, DEFAULT_FUEL};
use beamobf::obf::{apply_pass, gen_mutable_tuple_setters, parse_pipeline, run_pipeline, EntryGuard, PassConfig};
use beamobf::sterm::{parse_term, print_form, Term};
use beamobf::vlite::{validate, validate_loaded};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "beamobf", version, about = "Obfuscate, analyse and deobfuscate textual BEAM assembly")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Out {
    /// Output file (default: stdout).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a .S file and print it in canonical form.
    Parse {
        input: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Report blocks, loops and regions; optionally write DOT.
    Cfg {
        input: PathBuf,
        #[arg(long)]
        dot: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Run the validator. Exits 1 when there are diagnostics.
    Validate {
        input: PathBuf,
        /// Validate what the loader keeps after dropping dead moves.
        #[arg(long)]
        loaded: bool,
    },
    /// Apply a pass pipeline, or a single pass.
    Obfuscate {
        input: PathBuf,
        #[arg(long, conflicts_with = "pass")]
        pipeline: Option<PathBuf>,
        #[arg(long, required_unless_present = "pipeline")]
        pass: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        intensity: u32,
        /// Target function as name/arity; repeatable.
        #[arg(long = "target", value_parser = parse_fa)]
        targets: Vec<(String, u32)>,
        #[arg(long)]
        post_test: bool,
        /// Never take the second loop entry.
        #[arg(long)]
        never_enter: bool,
        #[arg(long)]
        keep_sizes: bool,
        #[command(flatten)]
        out: Out,
    },
    /// Structure every function into pseudo-source.
    Structure {
        input: PathBuf,
        #[command(flatten)]
        opts: StructArgs,
        #[command(flatten)]
        out: Out,
    },
    /// Normalize constructions, recover receive loops, then structure.
    Recover {
        input: PathBuf,
        /// Also write the recovered assembly.
        #[arg(long)]
        asm: Option<PathBuf>,
        #[command(flatten)]
        opts: StructArgs,
        #[command(flatten)]
        out: Out,
    },
    /// Run a function in the emulator, or compare two modules on it.
    Emu {
        input: PathBuf,
        /// Function as name/arity.
        #[arg(long, value_parser = parse_fa)]
        entry: (String, u32),
        /// Argument list as a term, e.g. "[1,2]".
        #[arg(long, conflicts_with = "diff")]
        args: Option<String>,
        #[arg(long)]
        diff: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inclusive range of generated integer arguments.
        #[arg(long, default_value_t = 0)]
        min: i64,
        #[arg(long, default_value_t = 200)]
        max: i64,
        /// Compare mailbox residue as well.
        #[arg(long)]
        residue: bool,
        #[arg(long)]
        permissive: bool,
        #[arg(long, default_value_t = DEFAULT_FUEL)]
        fuel: u64,
    },
    /// Diff two binaries into a patch, or apply a patch to a binary.
    Diffpatch {
        a: PathBuf,
        /// Second binary to diff against.
        b: Option<PathBuf>,
        #[arg(long, conflicts_with = "b")]
        apply: Option<PathBuf>,
        #[arg(long)]
        no_verify: bool,
        /// List container chunks of the first file instead.
        #[arg(long, conflicts_with_all = ["b", "apply"])]
        chunks: bool,
        #[command(flatten)]
        out: Out,
    },
    /// Generate the setter module for tuples of size n.
    Gensetters {
        n: u64,
        #[command(flatten)]
        out: Out,
    },
}

#[derive(Args)]
struct StructArgs {
    #[arg(long, value_enum, default_value_t = StrategyArg::Duplicate)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 8)]
    cap_factor: usize,
    #[arg(long)]
    unmerge_tails: bool,
    /// Report file (default: stderr).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Duplicate,
    Condvars,
}

impl StructArgs {
    fn options(&self) -> StructureOptions {
        StructureOptions {
            strategy: match self.strategy {
                StrategyArg::Duplicate => Strategy::Duplicate,
                StrategyArg::Condvars => Strategy::CondVars,
            },
            cap_factor: self.cap_factor,
            unmerge_tails: self.unmerge_tails,
        }
    }
}

fn parse_fa(s: &str) -> Result<(String, u32), String> {
    let (name, arity) = s.rsplit_once('/').ok_or("expected name/arity")?;
    let arity = arity.parse().map_err(|_| format!("bad arity in {s}"))?;
    if name.is_empty() {
        return Err("empty function name".into());
    }
    Ok((name.to_string(), arity))
}

/// A domain failure carrying its Term-formatted reason.
struct Failure(Term);

fn error_term(kind: &str, what: impl ToString) -> Failure {
    Failure(Term::tuple(vec![Term::atom("error"), Term::atom(kind), Term::string(&what.to_string())]))
}

impl From<Term> for Failure {
    fn from(t: Term) -> Self {
        Failure(Term::tuple(vec![Term::atom("error"), t]))
    }
}

type Res<T> = Result<T, Failure>;

fn read_text(p: &Path) -> Res<String> {
    fs::read_to_string(p).map_err(|e| error_term("io", format!("{}: {e}", p.display())))
}

fn read_bytes(p: &Path) -> Res<Vec<u8>> {
    fs::read(p).map_err(|e| error_term("io", format!("{}: {e}", p.display())))
}

fn read_module(p: &Path) -> Res<ModuleAsm> {
    parse_module(&read_text(p)?).map_err(|e| error_term("parse", e))
}

fn write_to(p: &Path, data: &[u8]) -> Res<()> {
    fs::write(p, data).map_err(|e| error_term("io", format!("{}: {e}", p.display())))
}

fn emit(out: &Out, data: &[u8]) -> Res<()> {
    match &out.output {
        Some(p) => write_to(p, data),
        None => std::io::stdout().write_all(data).map_err(|e| error_term("io", e)),
    }
}

fn emit_report(path: &Option<PathBuf>, terms: &[Term]) -> Res<()> {
    let text: String = terms.iter().map(print_form).collect();
    match path {
        Some(p) => write_to(p, text.as_bytes()),
        None => {
            eprint!("{text}");
            Ok(())
        }
    }
}

fn cfg_report(m: &ModuleAsm) -> Res<(Vec<Term>, String)> {
    let mut terms = Vec::new();
    let mut dot = String::new();
    for f in &m.functions {
        let c = build_cfg(f).map_err(|e| error_term("cfg", e))?;
        let regions = annotate_regions(&c);
        let loops = find_loops(&c);
        let loop_terms = loops
            .iter()
            .map(|l| {
                Term::tuple(vec![
                    Term::atom("loop"),
                    Term::List(l.headers.iter().map(|&h| Term::int(h)).collect()),
                    Term::tuple(vec![Term::atom("blocks"), Term::int(l.body.len())]),
                    Term::tuple(vec![Term::atom("entries"), Term::int(l.entry_count)]),
                    Term::tuple(vec![Term::atom("exits"), Term::int(l.exits.len())]),
                    Term::tuple(vec![Term::atom("reducible"), Term::atom(&l.reducible.to_string())]),
                    Term::tuple(vec![
                        Term::atom("exit_postdominates"),
                        Term::atom(&l.exit_postdominates.to_string()),
                    ]),
                ])
            })
            .collect();
        terms.push(Term::tuple(vec![
            Term::atom("cfg"),
            Term::tuple(vec![Term::atom(&f.name), Term::int(f.arity)]),
            Term::List(vec![
                Term::tuple(vec![Term::atom("blocks"), Term::int(c.blocks.len())]),
                Term::tuple(vec![Term::atom("reducible"), Term::atom(&is_reducible(&c).to_string())]),
                Term::tuple(vec![Term::atom("loops"), Term::List(loop_terms)]),
                Term::tuple(vec![
                    Term::atom("regions"),
                    Term::List(regions.iter().map(|r| r.to_term(&c)).collect()),
                ]),
            ]),
        ]));
        dot.push_str(&export_dot(&c, &regions));
    }
    Ok((terms, dot))
}

fn exec(cmd: Cmd) -> Res<ExitCode> {
    match cmd {
        Cmd::Parse { input, out } => {
            let m = read_module(&input)?;
            emit(&out, print_module(&m).as_bytes())?;
        }
        Cmd::Cfg { input, dot, out } => {
            let m = read_module(&input)?;
            let (terms, text) = cfg_report(&m)?;
            if let Some(p) = dot {
                write_to(&p, text.as_bytes())?;
            }
            let report: String = terms.iter().map(print_form).collect();
            emit(&out, report.as_bytes())?;
        }
        Cmd::Validate { input, loaded } => {
            let m = read_module(&input)?;
            let diags = if loaded { validate_loaded(&m) } else { validate(&m) };
            let text: String = diags.iter().map(|d| print_form(&d.to_term())).collect();
            print!("{text}");
            if !diags.is_empty() {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Obfuscate {
            input,
            pipeline,
            pass,
            seed,
            intensity,
            targets,
            post_test,
            never_enter,
            keep_sizes,
            out,
        } => {
            let m = read_module(&input)?;
            let result = match (pipeline, pass) {
                (Some(p), _) => {
                    let steps = parse_pipeline(&read_text(&p)?).map_err(|e| Failure::from(e.to_term()))?;
                    run_pipeline(&m, &steps)
                }
                (None, Some(pass)) => {
                    let cfg = PassConfig {
                        seed,
                        intensity,
                        targets,
                        post_test,
                        entry_guard: if never_enter { EntryGuard::Never } else { EntryGuard::Parity },
                        reroute_sizes: !keep_sizes,
                    };
                    apply_pass(&m, &pass, &cfg)
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            let obf = result.map_err(|e| Failure::from(e.to_term()))?;
            emit(&out, print_module(&obf).as_bytes())?;
        }
        Cmd::Structure { input, opts, out } => {
            let m = read_module(&input)?;
            let o = opts.options();
            let structured = structure_module(&m, &o).map_err(|e| Failure::from(e.to_term()))?;
            let text = module_pseudo_source(&m, &o).map_err(|e| Failure::from(e.to_term()))?;
            emit(&out, text.as_bytes())?;
            let terms: Vec<Term> = structured.iter().map(|s| s.to_term()).collect();
            emit_report(&opts.report, &terms)?;
        }
        Cmd::Recover { input, asm, opts, out } => {
            let m = read_module(&input)?;
            let (normalized, notes) = normalize_report(&m);
            let (recovered, fidelity) = recover_module(&normalized);
            let o = opts.options();
            let text = module_pseudo_source(&recovered, &o).map_err(|e| Failure::from(e.to_term()))?;
            if let Some(p) = asm {
                write_to(&p, print_module(&recovered).as_bytes())?;
            }
            emit(&out, text.as_bytes())?;
            let mut terms = vec![fidelity_term(&fidelity)];
            terms.push(Term::tuple(vec![
                Term::atom("normalize"),
                Term::List(notes.iter().map(|n| n.to_term()).collect()),
            ]));
            emit_report(&opts.report, &terms)?;
        }
        Cmd::Emu {
            input,
            entry: (name, arity),
            args,
            diff: other,
            trials,
            seed,
            min,
            max,
            residue,
            permissive,
            fuel,
        } => {
            let m = read_module(&input)?;
            let run_opts = RunOptions {
                fuel,
                mode: if permissive { Mode::Permissive } else { Mode::Strict },
                ..RunOptions::default()
            };
            if let Some(other) = other {
                if min > max {
                    return Err(error_term("usage", "--min exceeds --max"));
                }
                let right = read_module(&other)?;
                let opts = DiffOptions { run: run_opts, residue };
                let inputs = seeded_int_inputs(seed, arity, min..=max);
                let report = run_differential(&m, &right, &name, inputs, trials, &opts);
                print!("{}", print_form(&report.to_term()));
                println!("{} mismatches", report.mismatches.len());
                if !report.is_equivalent() {
                    return Ok(ExitCode::from(1));
                }
            } else {
                let args = match args {
                    Some(text) => parse_term(&text).map_err(|e| error_term("args", e))?,
                    None => Term::nil(),
                };
                let args = args.as_list().ok_or_else(|| error_term("args", "expected a list"))?;
                if args.len() as u32 != arity {
                    return Err(error_term("args", format!("{name}/{arity} given {} arguments", args.len())));
                }
                let r = run(&m, &name, args, &run_opts);
                print!("{}", print_form(&r.to_term()));
                if r.outcome.value().is_none() {
                    return Ok(ExitCode::from(1));
                }
            }
        }
        Cmd::Diffpatch {
            a,
            b,
            apply,
            no_verify,
            chunks,
            out,
        } => {
            let left = read_bytes(&a)?;
            if chunks {
                let idx = list_chunks(&left).map_err(|e| error_term("chunks", e))?;
                emit(&out, print_form(&idx.to_term()).as_bytes())?;
            } else if let Some(b) = b {
                let p = diff(&left, &read_bytes(&b)?).map_err(|e| Failure::from(e.to_term()))?;
                emit(&out, print_form(&p.to_term()).as_bytes())?;
                let runs: Vec<Term> = p
                    .runs()
                    .into_iter()
                    .map(|(o, n)| Term::tuple(vec![Term::int(o), Term::int(n)]))
                    .collect();
                let regs: Vec<Term> = p
                    .entries()
                    .iter()
                    .filter_map(|e| match (rewrite_register_byte(e.old), rewrite_register_byte(e.new)) {
                        (RegisterByte::X(x), RegisterByte::X(y)) => Some(Term::tuple(vec![
                            Term::int(e.offset),
                            Term::atom(&format!("x{x}")),
                            Term::atom(&format!("x{y}")),
                        ])),
                        _ => None,
                    })
                    .collect();
                emit_report(
                    &None,
                    &[
                        Term::tuple(vec![Term::atom("runs"), Term::List(runs)]),
                        Term::tuple(vec![Term::atom("registers"), Term::List(regs)]),
                    ],
                )?;
            } else if let Some(pf) = apply {
                let p = PatchSet::parse(&read_text(&pf)?).map_err(|e| Failure::from(e.to_term()))?;
                let patched = apply_patch(&left, &p, !no_verify).map_err(|e| Failure::from(e.to_term()))?;
                emit(&out, &patched)?;
            } else {
                return Err(error_term("usage", "give a second file, --apply PATCH or --chunks"));
            }
        }
        Cmd::Gensetters { n, out } => {
            let m = gen_mutable_tuple_setters(n).map_err(|e| Failure::from(e.to_term()))?;
            emit(&out, print_module(&m).as_bytes())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exec(cli.cmd) {
        Ok(code) => code,
        Err(Failure(t)) => {
            eprint!("{}", print_form(&t));
            if matches!(t.as_tuple(), Some([_, k, _]) if k.as_atom() == Some("usage")) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
