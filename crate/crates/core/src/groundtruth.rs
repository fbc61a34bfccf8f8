//! Ground-truth documents: construction from paired symbols and listings,
//! duplicate-name matching, and the `.gtf` text format.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use crate::binfmt::{BinaryImage, BinfmtError, FuncSymbol, Isa};
use crate::digest::Digest;
use crate::listing::{classify_statement, CfClass, ListedFunction, ListingDoc, RecordKind};
use crate::prefixcanon::{split_prefixes, PrefixSet};
use crate::reconcile::ReconcileError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InstructionRecord {
    pub abs_offset: u64,
    pub size: u64,
    pub bytes: Vec<u8>,
    pub prefixes: PrefixSet,
    pub optional: bool,
    pub cf_class: CfClass,
}

impl InstructionRecord {
    /// Builds a record from its bytes, splitting out the prefix set.
    pub fn new(abs_offset: u64, bytes: Vec<u8>, isa: Isa, optional: bool, cf_class: CfClass) -> Self {
        InstructionRecord {
            abs_offset,
            size: bytes.len() as u64,
            prefixes: prefix_set_of(&bytes, isa),
            bytes,
            optional,
            cf_class,
        }
    }

    pub fn end(&self) -> u64 {
        self.abs_offset + self.size
    }
}

/// Prefix set of an encoding. An encoding made only of prefix bytes keeps
/// them all as its core.
pub fn prefix_set_of(bytes: &[u8], isa: Isa) -> PrefixSet {
    split_prefixes(bytes, isa).map(|(p, _)| p).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NopRegion {
    pub abs_offset: u64,
    pub size: u64,
}

impl NopRegion {
    pub fn end(&self) -> u64 {
        self.abs_offset + self.size
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionRecord {
    pub name: String,
    pub abs_offset: u64,
    pub extent: Option<u64>,
    pub instructions: Vec<InstructionRecord>,
    pub regions: Vec<NopRegion>,
}

impl FunctionRecord {
    /// End of the function: its extent, or the end of its last record when
    /// the extent is unknown.
    pub fn end(&self) -> u64 {
        match self.extent {
            Some(e) => self.abs_offset + e,
            None => self
                .instructions
                .iter()
                .map(|i| i.end())
                .chain(self.regions.iter().map(|r| r.end()))
                .max()
                .unwrap_or(self.abs_offset),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub compiler: String,
    pub optflag: String,
}

impl Provenance {
    /// Whitespace is not allowed in provenance fields; it is replaced by `_`.
    pub fn new(compiler: &str, optflag: &str) -> Self {
        let token = |s: &str| {
            let t: String = s
                .trim()
                .chars()
                .map(|c| if c.is_whitespace() { '_' } else { c })
                .collect();
            if t.is_empty() {
                "unknown".to_string()
            } else {
                t
            }
        };
        Provenance {
            compiler: token(compiler),
            optflag: token(optflag),
        }
    }
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance::new("", "")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthDoc {
    pub binary_hash: Digest,
    pub isa: Isa,
    pub functions: Vec<FunctionRecord>,
    pub provenance: Provenance,
}

impl GroundTruthDoc {
    pub fn instructions(&self) -> impl Iterator<Item = &InstructionRecord> {
        self.functions.iter().flat_map(|f| f.instructions.iter())
    }

    pub fn regions(&self) -> impl Iterator<Item = &NopRegion> {
        self.functions.iter().flat_map(|f| f.regions.iter())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GtError {
    #[error("instruction offset {rlt_insn:#x} precedes function offset {rlt_func:#x}")]
    Underflow { rlt_func: u64, rlt_insn: u64 },
    #[error("no listing reconciles with symbol {name} at {abs_offset:#x}{}", fmt_reasons(.reasons))]
    UnmatchedSymbol {
        name: String,
        abs_offset: u64,
        reasons: Vec<String>,
    },
    #[error("{first} and {second} overlap at {offset:#x}")]
    OverlapDetected { first: String, second: String, offset: u64 },
    #[error(transparent)]
    Binfmt(#[from] BinfmtError),
    #[error(transparent)]
    Reconcile(#[from] ReconcileError),
}

fn fmt_reasons(reasons: &[String]) -> String {
    if reasons.is_empty() {
        String::new()
    } else {
        format!(": {}", reasons.join("; "))
    }
}

/// `abs_func + (rlt_insn - rlt_func)`.
pub fn absolutize(abs_func: u64, rlt_func: u64, rlt_insn: u64) -> Result<u64, GtError> {
    rlt_insn
        .checked_sub(rlt_func)
        .map(|d| abs_func + d)
        .ok_or(GtError::Underflow { rlt_func, rlt_insn })
}

/// Identifies a listed function: listing document index and function index
/// within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FuncRef {
    pub doc: usize,
    pub func: usize,
}

/// Something that can bring a listed function into byte agreement with the
/// binary, committing its edits only on success.
pub trait ReconcileCapability {
    fn docs(&self) -> &[ListingDoc];

    fn try_reconcile(&mut self, listed: FuncRef, abs_func: u64, img: &BinaryImage) -> Result<(), ReconcileError>;

    fn function(&self, r: FuncRef) -> &ListedFunction {
        &self.docs()[r.doc].functions[r.func]
    }
}

/// Checks agreement without editing anything: a candidate matches when every
/// instruction and data record already equals the binary bytes.
pub struct ExactMatch {
    pub docs: Vec<ListingDoc>,
}

impl ReconcileCapability for ExactMatch {
    fn docs(&self) -> &[ListingDoc] {
        &self.docs
    }

    fn try_reconcile(&mut self, listed: FuncRef, abs_func: u64, img: &BinaryImage) -> Result<(), ReconcileError> {
        let func = self.function(listed);
        match crate::reconcile::find_first_mismatch(func, img, abs_func)? {
            None => Ok(()),
            Some(i) => Err(crate::reconcile::mismatch_error(func, i, img, abs_func)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub symbol: FuncSymbol,
    pub listed: FuncRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchOutcome {
    pub pairs: Vec<Pair>,
    /// Listed functions no symbol claimed.
    pub unconsumed: Vec<FuncRef>,
}

/// Pairs each symbol with the first listed function of the same name that
/// reconciles against the binary at the symbol's offset. Symbols are taken
/// in the given order, candidates in listing order.
pub fn match_functions(
    symbols: &[FuncSymbol],
    reconciler: &mut dyn ReconcileCapability,
    img: &BinaryImage,
) -> Result<MatchOutcome, GtError> {
    let mut classes: BTreeMap<&str, Vec<FuncRef>> = BTreeMap::new();
    let mut names: Vec<(FuncRef, String)> = Vec::new();
    for (d, doc) in reconciler.docs().iter().enumerate() {
        for (f, func) in doc.functions.iter().enumerate() {
            names.push((FuncRef { doc: d, func: f }, func.name.clone()));
        }
    }
    for (r, name) in &names {
        classes.entry(name.as_str()).or_default().push(*r);
    }

    let mut pairs = Vec::new();
    for sym in symbols {
        let candidates = classes
            .get_mut(sym.name.as_str())
            .map(std::mem::take)
            .unwrap_or_default();
        let mut reasons = Vec::new();
        let mut remaining = Vec::with_capacity(candidates.len());
        let mut matched = None;
        let single = candidates.len() == 1;
        for cand in candidates {
            if matched.is_some() {
                remaining.push(cand);
                continue;
            }
            match reconciler.try_reconcile(cand, sym.abs_offset, img) {
                Ok(()) => matched = Some(cand),
                Err(e) if e.rejects_candidate() => {
                    if single {
                        return Err(e.into());
                    }
                    reasons.push(e.to_string());
                    remaining.push(cand);
                }
                Err(e) => return Err(e.into()),
            }
        }
        if let Some(class) = classes.get_mut(sym.name.as_str()) {
            *class = remaining;
        }
        match matched {
            Some(listed) => pairs.push(Pair {
                symbol: sym.clone(),
                listed,
            }),
            None => {
                return Err(GtError::UnmatchedSymbol {
                    name: sym.name.clone(),
                    abs_offset: sym.abs_offset,
                    reasons,
                })
            }
        }
    }
    let mut unconsumed: Vec<FuncRef> = classes.into_values().flatten().collect();
    unconsumed.sort();
    Ok(MatchOutcome { pairs, unconsumed })
}

/// Builds one function record from a reconciled pair.
pub fn function_record(img: &BinaryImage, sym: &FuncSymbol, func: &ListedFunction) -> Result<FunctionRecord, GtError> {
    let abs_func = sym.abs_offset;
    let mut instructions = Vec::new();
    let mut regions = Vec::new();
    let mut end = abs_func;
    for rec in &func.records {
        let abs = absolutize(abs_func, func.rlt_func, rec.rlt_offset)?;
        end = end.max(abs + rec.size);
        match rec.kind {
            RecordKind::Insn => {
                let bytes = img.read_bytes(abs, rec.size)?.to_vec();
                instructions.push(InstructionRecord::new(
                    abs,
                    bytes,
                    img.isa,
                    false,
                    classify_statement(&rec.statement),
                ));
            }
            RecordKind::Align if rec.size > 0 => regions.push(NopRegion {
                abs_offset: abs,
                size: rec.size,
            }),
            RecordKind::Align | RecordKind::Data => {}
        }
    }
    let listed_extent = end - abs_func;
    let extent = match sym.size {
        Some(s) => Some(s.max(listed_extent)),
        None if func.records.is_empty() => None,
        None => Some(listed_extent),
    };
    Ok(FunctionRecord {
        name: sym.name.clone(),
        abs_offset: abs_func,
        extent,
        instructions,
        regions,
    })
}

/// Assembles the ground-truth document for `img` from reconciled pairs.
pub fn build_ground_truth(
    img: &BinaryImage,
    docs: &[ListingDoc],
    pairs: &[Pair],
    provenance: Provenance,
) -> Result<GroundTruthDoc, GtError> {
    let mut functions = Vec::with_capacity(pairs.len());
    for p in pairs {
        let func = &docs[p.listed.doc].functions[p.listed.func];
        functions.push(function_record(img, &p.symbol, func)?);
    }
    functions.sort_by(|a, b| a.abs_offset.cmp(&b.abs_offset).then_with(|| a.name.cmp(&b.name)));
    let doc = GroundTruthDoc {
        binary_hash: img.content_hash,
        isa: img.isa,
        functions,
        provenance,
    };
    check_overlaps(&doc)?;
    Ok(doc)
}

/// Instruction and region ranges must be pairwise disjoint across the doc.
pub fn check_overlaps(doc: &GroundTruthDoc) -> Result<(), GtError> {
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for f in &doc.functions {
        spans.extend(f.instructions.iter().map(|i| (i.abs_offset, i.end(), f.name.as_str())));
        spans.extend(f.regions.iter().map(|r| (r.abs_offset, r.end(), f.name.as_str())));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(GtError::OverlapDetected {
                first: w[0].2.to_string(),
                second: w[1].2.to_string(),
                offset: w[1].0,
            });
        }
    }
    Ok(())
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GtFormatError {
    #[error("unsupported ground-truth format version `{found}` (expected {FORMAT_VERSION})")]
    FormatVersionMismatch { found: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Renders the canonical text form.
pub fn serialize(doc: &GroundTruthDoc) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "#gtf {FORMAT_VERSION}");
    let _ = writeln!(
        out,
        "B {} {} {} {}",
        doc.binary_hash, doc.isa, doc.provenance.compiler, doc.provenance.optflag
    );
    for f in &doc.functions {
        let extent = f.extent.map_or("?".to_string(), |e| format!("{e:x}"));
        let _ = writeln!(out, "F {:x} {} {}", f.abs_offset, extent, f.name);
        let mut insns = f.instructions.iter().peekable();
        let mut regions = f.regions.iter().peekable();
        loop {
            let take_insn = match (insns.peek(), regions.peek()) {
                (Some(i), Some(r)) => i.abs_offset <= r.abs_offset,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            if take_insn {
                let i = insns.next().unwrap();
                let _ = writeln!(
                    out,
                    "I {:x} {:x} {} P={} O={} C={}",
                    i.abs_offset,
                    i.size,
                    hex::encode(&i.bytes),
                    i.prefixes,
                    u8::from(i.optional),
                    i.cf_class
                );
            } else {
                let r = regions.next().unwrap();
                let _ = writeln!(out, "N {:x} {:x}", r.abs_offset, r.size);
            }
        }
    }
    out
}

fn hex_u64(s: &str, what: &str) -> Result<u64, String> {
    u64::from_str_radix(s, 16).map_err(|_| format!("bad {what} `{s}`"))
}

fn keyed<'a>(tok: Option<&'a str>, key: &str) -> Result<&'a str, String> {
    tok.and_then(|t| t.strip_prefix(key))
        .ok_or_else(|| format!("missing `{key}` field"))
}

/// Parses the text form.
pub fn deserialize(text: &str) -> Result<GroundTruthDoc, GtFormatError> {
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
    let err = |line: usize, reason: String| GtFormatError::Parse { line, reason };

    let (_, header) = lines.next().unwrap_or((1, ""));
    let version = header
        .strip_prefix("#gtf ")
        .ok_or_else(|| err(1, "missing `#gtf` header".into()))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(GtFormatError::FormatVersionMismatch {
            found: version.to_string(),
        });
    }

    let mut doc: Option<GroundTruthDoc> = None;
    let mut last_offset: Option<u64> = None;
    let mut ended = false;
    for (n, line) in lines {
        if line.is_empty() {
            ended = true;
            continue;
        }
        if ended {
            return Err(err(n - 1, "blank line inside document".into()));
        }
        let mut tok = line.split(' ');
        let tag = tok.next().unwrap_or_default();
        match (tag, doc.as_mut()) {
            ("B", None) => {
                let fields: Vec<&str> = tok.collect();
                let [hash, isa, compiler, optflag] = fields[..] else {
                    return Err(err(n, "B line needs 4 fields".into()));
                };
                doc = Some(GroundTruthDoc {
                    binary_hash: hash.parse().map_err(|e| err(n, format!("{e}")))?,
                    isa: isa.parse().map_err(|e| err(n, e))?,
                    functions: Vec::new(),
                    provenance: Provenance {
                        compiler: compiler.to_string(),
                        optflag: optflag.to_string(),
                    },
                });
            }
            ("B", Some(_)) => return Err(err(n, "duplicate B line".into())),
            (_, None) => return Err(err(n, "expected B line".into())),
            ("F", Some(d)) => {
                let (off, rest) = line[2..]
                    .split_once(' ')
                    .ok_or_else(|| err(n, "truncated F line".into()))?;
                let (extent, name) = rest.split_once(' ').ok_or_else(|| err(n, "truncated F line".into()))?;
                if name.is_empty() {
                    return Err(err(n, "empty function name".into()));
                }
                d.functions.push(FunctionRecord {
                    name: name.to_string(),
                    abs_offset: hex_u64(off, "function offset").map_err(|e| err(n, e))?,
                    extent: match extent {
                        "?" => None,
                        e => Some(hex_u64(e, "extent").map_err(|e| err(n, e))?),
                    },
                    instructions: Vec::new(),
                    regions: Vec::new(),
                });
                last_offset = None;
            }
            ("I", Some(d)) => {
                let isa = d.isa;
                let f = d
                    .functions
                    .last_mut()
                    .ok_or_else(|| err(n, "I line before any F line".into()))?;
                let rec = parse_insn(tok, isa).map_err(|e| err(n, e))?;
                if last_offset.is_some_and(|l| rec.abs_offset < l) {
                    return Err(err(n, "records not sorted by offset".into()));
                }
                last_offset = Some(rec.abs_offset);
                f.instructions.push(rec);
            }
            ("N", Some(d)) => {
                let f = d
                    .functions
                    .last_mut()
                    .ok_or_else(|| err(n, "N line before any F line".into()))?;
                let fields: Vec<&str> = tok.collect();
                let [off, size] = fields[..] else {
                    return Err(err(n, "N line needs 2 fields".into()));
                };
                let region = NopRegion {
                    abs_offset: hex_u64(off, "offset").map_err(|e| err(n, e))?,
                    size: hex_u64(size, "size").map_err(|e| err(n, e))?,
                };
                if region.size == 0 {
                    return Err(err(n, "zero-size region".into()));
                }
                if last_offset.is_some_and(|l| region.abs_offset <= l) {
                    return Err(err(n, "records not sorted by offset".into()));
                }
                last_offset = Some(region.abs_offset);
                f.regions.push(region);
            }
            (other, Some(_)) => return Err(err(n, format!("unknown line tag `{other}`"))),
        }
    }
    doc.ok_or_else(|| err(2, "missing B line".into()))
}

fn parse_insn<'a>(mut tok: impl Iterator<Item = &'a str>, isa: Isa) -> Result<InstructionRecord, String> {
    let off = hex_u64(tok.next().ok_or("missing offset")?, "offset")?;
    let size = hex_u64(tok.next().ok_or("missing size")?, "size")?;
    let bytes_tok = tok.next().ok_or("missing bytes")?;
    let bytes = hex::decode(bytes_tok).map_err(|_| format!("bad bytes `{bytes_tok}`"))?;
    if size == 0 || size != bytes.len() as u64 {
        return Err(format!("size {size:x} does not match {} bytes", bytes.len()));
    }
    let prefixes: PrefixSet = keyed(tok.next(), "P=")?.parse()?;
    if prefixes != prefix_set_of(&bytes, isa) {
        return Err(format!("prefix set {prefixes} does not match the bytes"));
    }
    let optional = match keyed(tok.next(), "O=")? {
        "0" => false,
        "1" => true,
        o => return Err(format!("bad optional flag `{o}`")),
    };
    let cf_class: CfClass = keyed(tok.next(), "C=")?.parse()?;
    if tok.next().is_some() {
        return Err("trailing fields".into());
    }
    Ok(InstructionRecord {
        abs_offset: off,
        size,
        bytes,
        prefixes,
        optional,
        cf_class,
    })
}

/// Symbols whose names occur in at least one listing.
pub fn listed_symbols(img: &BinaryImage, docs: &[ListingDoc]) -> Vec<FuncSymbol> {
    let names: HashSet<&str> = docs
        .iter()
        .flat_map(|d| d.functions.iter().map(|f| f.name.as_str()))
        .collect();
    img.list_functions()
        .iter()
        .filter(|s| names.contains(s.name.as_str()))
        .cloned()
        .collect()
}
