//! Disassembly ground truth from assembler listings and ELF symbols, and
//! scoring of disassembler output against it.

pub mod asm;
pub mod binfmt;
pub mod capture;
pub mod checker;
pub mod config;
pub mod digest;
pub mod discovery;
pub mod evaluator;
pub mod groundtruth;
pub mod listing;
pub mod pipeline;
pub mod prefixcanon;
pub mod reconcile;
pub mod x86;
