//! Obfuscation and analysis workbench for textual BEAM assembly.

pub mod sterm;
pub mod asmir;
pub mod cfg;
pub mod vlite;
pub mod miniemu;
pub mod obf;
pub mod destructure;
pub mod beampatch;
