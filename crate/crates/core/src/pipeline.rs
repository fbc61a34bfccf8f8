//! End-to-end ground-truth build and check.
//!
//! A build writes `<out>` (the ground-truth file) and `<out>.d/` holding the
//! reconciled sources (`NNN.s`) and a `manifest` of function pairs, which is
//! everything `check` needs besides an assembler.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::asm::{AsmError, AssemblerDriver, GnuAssembler};
use crate::binfmt::{load_binary, BinaryImage, BinfmtError, FuncSymbol, Isa};
use crate::capture::{CaptureError, SnapshotLedger};
use crate::checker::{check_correspondence, CheckReport};
use crate::config::{ConfigError, DecoderChoice, ProjectConfig};
use crate::discovery::{discover_optional, BuiltinOracle, DecodeOracle, Finding, ObjdumpOracle};
use crate::groundtruth::{
    build_ground_truth, deserialize, listed_symbols, match_functions, serialize, FuncRef, GroundTruthDoc, GtError,
    GtFormatError, Pair, Provenance, ReconcileCapability,
};
use crate::listing::ListingDoc;
use crate::reconcile::{encoding_rules, ReconcileError, Reconciler, SourceSet};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Binfmt(#[from] BinfmtError),
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Reconcile(#[from] ReconcileError),
    #[error(transparent)]
    Gt(#[from] GtError),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: GtFormatError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config says {config} but the binary is {binary}")]
    IsaMismatch { config: Isa, binary: Isa },
    #[error("{path}:{line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },
    #[error("no assembly sources")]
    NoSources,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct BuildResult {
    pub gt: GroundTruthDoc,
    /// Sources after reconciliation, in input order.
    pub sources: Vec<String>,
    pub docs: Vec<ListingDoc>,
    pub pairs: Vec<Pair>,
    /// Labels treated as function starts when parsing listings.
    pub fallback_names: Vec<String>,
    pub unconsumed: Vec<FuncRef>,
    pub patches: usize,
    pub findings: Vec<Finding>,
    pub check: CheckReport,
}

/// Reconciles `sources` against `img`, builds the ground truth, adds optional
/// instructions and runs the correspondence check.
pub fn build_from_sources(
    img: &BinaryImage,
    sources: Vec<String>,
    driver: &dyn AssemblerDriver,
    oracle: &dyn DecodeOracle,
    provenance: Provenance,
) -> Result<BuildResult, PipelineError> {
    if sources.is_empty() {
        return Err(PipelineError::NoSources);
    }
    let mut fallback_names: Vec<String> = img.list_functions().iter().map(|s| s.name.clone()).collect();
    fallback_names.sort();
    fallback_names.dedup();
    let fallback: HashSet<String> = fallback_names.iter().cloned().collect();
    let rules = encoding_rules();
    let reconciler = Reconciler {
        driver,
        rules: &rules,
        isa: img.isa,
        fallback_names: &fallback,
    };
    let mut set = SourceSet::new(reconciler, sources)?;
    let symbols = listed_symbols(img, set.docs());
    let outcome = match_functions(&symbols, &mut set, img)?;
    set.stabilize(&outcome.pairs, img)?;
    let patches = set.patches;
    let (sources, docs) = set.into_parts();
    let gt = build_ground_truth(img, &docs, &outcome.pairs, provenance)?;
    let discovery = discover_optional(&gt, img, oracle);
    let check = check_correspondence(&docs, &discovery.doc, &outcome.pairs);
    Ok(BuildResult {
        gt: discovery.doc,
        sources,
        docs,
        pairs: outcome.pairs,
        fallback_names,
        unconsumed: outcome.unconsumed,
        patches,
        findings: discovery.findings,
        check,
    })
}

/// Explicit sources first, then every ledger version in sequence order.
pub fn load_sources(cfg: &ProjectConfig) -> Result<Vec<String>, PipelineError> {
    let mut out = Vec::new();
    for p in &cfg.sources {
        out.push(fs::read_to_string(p).map_err(io_err(p))?);
    }
    if let Some(l) = &cfg.ledger {
        for (_, bytes) in SnapshotLedger::open(l)?.extract_chronological()? {
            out.push(String::from_utf8_lossy(&bytes).into_owned());
        }
    }
    Ok(out)
}

pub fn assembler_for(cmd: Option<&str>, isa: Isa) -> Result<GnuAssembler, AsmError> {
    match cmd {
        Some(t) => GnuAssembler::from_template(t),
        None => Ok(GnuAssembler::new(isa)),
    }
}

/// The configured decoder, falling back to the built-in one when the
/// program cannot run.
pub fn oracle_for(choice: &DecoderChoice) -> Box<dyn DecodeOracle> {
    match choice {
        DecoderChoice::Builtin => Box::new(BuiltinOracle),
        DecoderChoice::Objdump(p) => {
            let o = ObjdumpOracle::new(p.clone());
            if o.available() {
                Box::new(o)
            } else {
                log::warn!("`{p}` is not runnable; using the built-in decoder");
                Box::new(BuiltinOracle)
            }
        }
    }
}

/// Runs a build described by a config file's contents.
pub fn run_build(cfg: &ProjectConfig) -> Result<BuildResult, PipelineError> {
    let img = load_binary(&cfg.binary)?;
    if let Some(isa) = cfg.isa {
        if isa != img.isa {
            return Err(PipelineError::IsaMismatch {
                config: isa,
                binary: img.isa,
            });
        }
    }
    let driver = assembler_for(cfg.assembler_cmd.as_deref(), img.isa)?;
    let oracle = oracle_for(&cfg.decoder);
    let sources = load_sources(cfg)?;
    build_from_sources(
        &img,
        sources,
        &driver,
        oracle.as_ref(),
        Provenance::new(&cfg.compiler, &cfg.optflag),
    )
}

pub fn work_dir(gtf: &Path) -> PathBuf {
    let mut d = gtf.as_os_str().to_owned();
    d.push(".d");
    PathBuf::from(d)
}

const MANIFEST: &str = "manifest";

/// Manifest lines: `S <file>` per source, `L <name>` per fallback label,
/// `P <doc> <func> <abs> <size|?> <section> <name>` per pair.
fn render_manifest(r: &BuildResult) -> String {
    let mut s = String::new();
    for i in 0..r.sources.len() {
        let _ = writeln!(s, "S {}", source_name(i));
    }
    for n in &r.fallback_names {
        let _ = writeln!(s, "L {n}");
    }
    for p in &r.pairs {
        let size = p.symbol.size.map_or("?".into(), |v| format!("{v:x}"));
        let _ = writeln!(
            s,
            "P {} {} {:x} {} {} {}",
            p.listed.doc, p.listed.func, p.symbol.abs_offset, size, p.symbol.section_name, p.symbol.name
        );
    }
    s
}

fn source_name(i: usize) -> String {
    format!("{i:03}.s")
}

/// Writes the ground-truth file and its work directory.
pub fn write_build(r: &BuildResult, gtf: &Path) -> Result<(), PipelineError> {
    if let Some(parent) = gtf.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(gtf, serialize(&r.gt)).map_err(io_err(gtf))?;
    let dir = work_dir(gtf);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (i, src) in r.sources.iter().enumerate() {
        let p = dir.join(source_name(i));
        fs::write(&p, src).map_err(io_err(&p))?;
    }
    let m = dir.join(MANIFEST);
    fs::write(&m, render_manifest(r)).map_err(io_err(&m))
}

pub fn read_gt(path: &Path) -> Result<GroundTruthDoc, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    deserialize(&text).map_err(|source| PipelineError::Format {
        path: path.to_path_buf(),
        source,
    })
}

struct Manifest {
    sources: Vec<String>,
    fallback: HashSet<String>,
    pairs: Vec<Pair>,
}

fn read_manifest(dir: &Path) -> Result<Manifest, PipelineError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut m = Manifest {
        sources: Vec::new(),
        fallback: HashSet::new(),
        pairs: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let bad = |reason: &str| PipelineError::Manifest {
            path: path.clone(),
            line: i + 1,
            reason: reason.to_string(),
        };
        let (tag, rest) = line.split_once(' ').ok_or_else(|| bad("missing tag"))?;
        match tag {
            "S" => {
                let p = dir.join(rest);
                m.sources.push(fs::read_to_string(&p).map_err(io_err(&p))?);
            }
            "L" => {
                m.fallback.insert(rest.to_string());
            }
            "P" => {
                let f: Vec<&str> = rest.splitn(6, ' ').collect();
                if f.len() != 6 {
                    return Err(bad("expected 6 pair fields"));
                }
                let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad index"));
                let hexv = |s: &str| u64::from_str_radix(s, 16).map_err(|_| bad("bad hex"));
                m.pairs.push(Pair {
                    symbol: FuncSymbol {
                        name: f[5].to_string(),
                        abs_offset: hexv(f[2])?,
                        size: if f[3] == "?" { None } else { Some(hexv(f[3])?) },
                        section_name: f[4].to_string(),
                    },
                    listed: FuncRef {
                        doc: num(f[0])?,
                        func: num(f[1])?,
                    },
                });
            }
            _ => return Err(bad("unknown tag")),
        }
    }
    Ok(m)
}

/// Reassembles the work directory's sources and checks them against the
/// ground-truth file.
pub fn run_check(gtf: &Path, driver: &dyn AssemblerDriver) -> Result<CheckReport, PipelineError> {
    let gt = read_gt(gtf)?;
    let m = read_manifest(&work_dir(gtf))?;
    let mut docs = Vec::with_capacity(m.sources.len());
    for s in &m.sources {
        docs.push(driver.assemble(s)?.parse(&m.fallback).map_err(AsmError::from)?);
    }
    Ok(check_correspondence(&docs, &gt, &m.pairs))
}
