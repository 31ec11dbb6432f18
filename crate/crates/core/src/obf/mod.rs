//! Obfuscating transformations over [`ModuleAsm`].
//!
//! Every pass is a deterministic function of its input module and
//! [`PassConfig`]; passes keep the output clean under [`crate::vlite`] and
//! emulator-equivalent to the input.

mod catch;
mod interleave;
pub mod receive;
mod setters;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::asmir::ModuleAsm;
use crate::sterm::{parse_terms, Term};
pub use catch::pass_many_to_many_catch;
pub use interleave::pass_interleave_constructions;
pub use receive::{
    generate_loop, match_loop, pass_multi_entry_receive, pass_multi_exit_receive, pass_receive_loop,
    pass_redundant_wait_timeout, EntryGuard, Layout, LoopSchema,
};
pub use setters::{gen_mutable_tuple_setters, MAX_SETTERS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObfError {
    #[error("function {0}/{1} not found")]
    NotFound(String, u32),
    #[error("{0}/{1} does not match the loop schema: {2}")]
    NotSchema(String, u32, String),
    #[error("{0}/{1} has no receive-encoded loop")]
    NoReceiveLoop(String, u32),
    #[error("no catch region to transform")]
    NoCatchRegion,
    #[error("{0}")]
    Refused(String),
    #[error("bad pipeline: {0}")]
    Pipeline(String),
}

impl ObfError {
    pub fn to_term(&self) -> Term {
        let fa = |n: &str, a: u32| Term::Tuple(vec![Term::atom(n), Term::int(a)]);
        match self {
            ObfError::NotFound(n, a) => Term::Tuple(vec![Term::atom("not_found"), fa(n, *a)]),
            ObfError::NotSchema(n, a, why) => {
                Term::Tuple(vec![Term::atom("not_schema"), fa(n, *a), Term::string(why)])
            }
            ObfError::NoReceiveLoop(n, a) => Term::Tuple(vec![Term::atom("no_receive_loop"), fa(n, *a)]),
            ObfError::NoCatchRegion => Term::atom("no_catch_region"),
            ObfError::Refused(why) => Term::Tuple(vec![Term::atom("refused"), Term::string(why)]),
            ObfError::Pipeline(why) => Term::Tuple(vec![Term::atom("bad_pipeline"), Term::string(why)]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassConfig {
    pub seed: u64,
    pub intensity: u32,
    /// Functions the pass applies to; empty means every function.
    pub targets: Vec<(String, u32)>,
    /// First loop iteration runs unconditionally (receive loop pass).
    pub post_test: bool,
    pub entry_guard: EntryGuard,
    /// Route constant binary sizes through a dead register.
    pub reroute_sizes: bool,
}

impl Default for PassConfig {
    fn default() -> Self {
        PassConfig {
            seed: 0,
            intensity: 1,
            targets: Vec::new(),
            post_test: false,
            entry_guard: EntryGuard::Parity,
            reroute_sizes: true,
        }
    }
}

impl PassConfig {
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    pub fn selects(&self, name: &str, arity: u32) -> bool {
        self.targets.is_empty() || self.targets.iter().any(|(n, a)| n == name && *a == arity)
    }

    fn target(&self, pass: &str) -> Result<(String, u32), ObfError> {
        self.targets
            .first()
            .cloned()
            .ok_or_else(|| ObfError::Pipeline(format!("{pass} needs a target")))
    }
}

pub const PASS_NAMES: &[&str] = &[
    "interleave_constructions",
    "receive_loop",
    "multi_exit_receive",
    "multi_entry_receive",
    "many_to_many_catch",
    "redundant_wait_timeout",
];

/// Runs one named pass.
pub fn apply_pass(m: &ModuleAsm, pass: &str, cfg: &PassConfig) -> Result<ModuleAsm, ObfError> {
    match pass {
        "interleave_constructions" => Ok(pass_interleave_constructions(m, cfg)),
        "receive_loop" => pass_receive_loop(m, &cfg.target(pass)?, cfg),
        "multi_exit_receive" => pass_multi_exit_receive(m, &cfg.target(pass)?, cfg),
        "multi_entry_receive" => pass_multi_entry_receive(m, &cfg.target(pass)?, cfg),
        "redundant_wait_timeout" => pass_redundant_wait_timeout(m, &cfg.target(pass)?, cfg),
        "many_to_many_catch" => pass_many_to_many_catch(m, cfg),
        other => Err(ObfError::Pipeline(format!("unknown pass {other}"))),
    }
}

fn fun_ref(t: &Term) -> Option<(String, u32)> {
    let v = t.as_tuple()?;
    match v {
        [n, a] => Some((n.as_atom()?.to_string(), a.as_i64()? as u32)),
        _ => None,
    }
}

fn as_bool(t: &Term) -> Option<bool> {
    match t.as_atom()? {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

/// Parses a pipeline: a sequence of `{PassName,[Param]}.` forms with
/// parameters `{seed,N}`, `{intensity,N}`, `{target,{F,A}}`,
/// `{targets,[{F,A}]}`, `{post_test,Bool}`, `{entry_guard,parity|never}`,
/// `{reroute_sizes,Bool}`.
pub fn parse_pipeline(text: &str) -> Result<Vec<(String, PassConfig)>, ObfError> {
    let forms = parse_terms(text).map_err(|e| ObfError::Pipeline(e.to_string()))?;
    let bad = |what: &str, t: &Term| ObfError::Pipeline(format!("{what}: {t}"));
    let mut out = Vec::new();
    for form in &forms {
        let Some([name, params]) = form.as_tuple() else {
            return Err(bad("expected {Pass,[Params]}", form));
        };
        let pass = name.as_atom().ok_or_else(|| bad("pass name", name))?.to_string();
        if !PASS_NAMES.contains(&pass.as_str()) {
            return Err(bad("unknown pass", name));
        }
        let mut cfg = PassConfig::default();
        for p in params.as_list().ok_or_else(|| bad("parameter list", params))? {
            let Some([k, v]) = p.as_tuple() else {
                return Err(bad("parameter", p));
            };
            match k.as_atom().unwrap_or("") {
                "seed" => cfg.seed = v.as_i64().filter(|n| *n >= 0).ok_or_else(|| bad("seed", v))? as u64,
                "intensity" => cfg.intensity = v.as_i64().filter(|n| *n >= 0).ok_or_else(|| bad("intensity", v))? as u32,
                "target" => cfg.targets = vec![fun_ref(v).ok_or_else(|| bad("target", v))?],
                "targets" => {
                    cfg.targets = v
                        .as_list()
                        .ok_or_else(|| bad("targets", v))?
                        .iter()
                        .map(|t| fun_ref(t).ok_or_else(|| bad("target", t)))
                        .collect::<Result<_, _>>()?
                }
                "post_test" => cfg.post_test = as_bool(v).ok_or_else(|| bad("post_test", v))?,
                "reroute_sizes" => cfg.reroute_sizes = as_bool(v).ok_or_else(|| bad("reroute_sizes", v))?,
                "entry_guard" => {
                    cfg.entry_guard = match v.as_atom() {
                        Some("parity") => EntryGuard::Parity,
                        Some("never") => EntryGuard::Never,
                        _ => return Err(bad("entry_guard", v)),
                    }
                }
                _ => return Err(bad("unknown parameter", p)),
            }
        }
        out.push((pass, cfg));
    }
    Ok(out)
}

/// Applies the passes in order.
pub fn run_pipeline(m: &ModuleAsm, steps: &[(String, PassConfig)]) -> Result<ModuleAsm, ObfError> {
    let mut cur = m.clone();
    for (pass, cfg) in steps {
        cur = apply_pass(&cur, pass, cfg)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests;
