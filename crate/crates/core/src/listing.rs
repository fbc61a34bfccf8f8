//! GNU assembler listing (`as -al`) parsing.
//!
//! Accepted grammar, one listing line per source line plus continuation
//! lines:
//!
//! ```text
//! <lineno> <addr-hex> <bytes-hex>\t<source line>   emitting line
//! <lineno>      <bytes-hex>                         continuation of lineno
//! <lineno>              \t<source line>             non-emitting line
//! ```
//!
//! Page headers (`GAS LISTING ...`), blank lines, `****` diagnostics and the
//! trailing symbol tables are skipped. Addresses are offsets within the
//! current section, which the parser tracks through `.text`, `.section`,
//! `.pushsection`, `.popsection` and `.previous`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

/// Marker appended to lines rewritten by the reconciler.
pub const PATCH_MARKER: &str = "gtforge-patched:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CfClass {
    NonCf,
    CondDirectJump,
    UncondDirectJump,
    IndirectJump,
    Return,
    Call,
    OtherCf,
    UnknownCf,
}

impl CfClass {
    pub const ALL: [CfClass; 8] = [
        CfClass::NonCf,
        CfClass::CondDirectJump,
        CfClass::UncondDirectJump,
        CfClass::IndirectJump,
        CfClass::Return,
        CfClass::Call,
        CfClass::OtherCf,
        CfClass::UnknownCf,
    ];

    pub fn token(self) -> &'static str {
        match self {
            CfClass::NonCf => "noncf",
            CfClass::CondDirectJump => "jcc",
            CfClass::UncondDirectJump => "jmp",
            CfClass::IndirectJump => "ijmp",
            CfClass::Return => "ret",
            CfClass::Call => "call",
            CfClass::OtherCf => "othercf",
            CfClass::UnknownCf => "unknowncf",
        }
    }
}

impl fmt::Display for CfClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for CfClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CfClass::ALL
            .into_iter()
            .find(|c| c.token() == s)
            .ok_or_else(|| format!("unknown cfclass token `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Insn,
    Align,
    Data,
}

/// Bytes of a record that the assembler left for the linker to fill in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fixup {
    pub at: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListedRecord {
    pub kind: RecordKind,
    /// Offset within the section.
    pub rlt_offset: u64,
    pub size: u64,
    pub bytes: Vec<u8>,
    /// Statement text without labels or comments, whitespace collapsed.
    pub statement: String,
    /// 1-based line number in the assembly source.
    pub line: usize,
    pub fixups: Vec<Fixup>,
    /// The line was rewritten by the reconciler.
    pub patched: bool,
}

impl ListedRecord {
    pub fn end(&self) -> u64 {
        self.rlt_offset + self.size
    }

    pub fn is_fixup_byte(&self, i: usize) -> bool {
        self.fixups.iter().any(|f| i >= f.at && i < f.at + f.len)
    }

    /// Compares against `other`, ignoring bytes covered by fixups.
    pub fn bytes_match(&self, other: &[u8]) -> bool {
        self.bytes.len() == other.len()
            && self
                .bytes
                .iter()
                .zip(other)
                .enumerate()
                .all(|(i, (a, b))| a == b || self.is_fixup_byte(i))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListedFunction {
    pub name: String,
    pub section: String,
    pub rlt_func: u64,
    pub records: Vec<ListedRecord>,
    /// Source line of the function label.
    pub label_line: usize,
    /// Last source line that can belong to this function.
    pub last_line: usize,
}

impl ListedFunction {
    pub fn instructions(&self) -> impl Iterator<Item = &ListedRecord> {
        self.records.iter().filter(|r| r.kind == RecordKind::Insn)
    }

    /// End of the last record relative to the section.
    pub fn end(&self) -> u64 {
        self.records.iter().map(|r| r.end()).max().unwrap_or(self.rlt_func)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ListingDoc {
    pub source_id: String,
    pub functions: Vec<ListedFunction>,
    /// Byte-emitting records in executable sections outside any function.
    pub unattributed: Vec<ListedRecord>,
}

impl ListingDoc {
    /// Marks record bytes covered by relocations. `relocs` maps a section
    /// name to relocation sites sorted by offset.
    pub fn apply_fixups(&mut self, relocs: &HashMap<String, Vec<RelocSite>>) {
        for func in &mut self.functions {
            let Some(list) = relocs.get(&func.section) else {
                continue;
            };
            for rec in &mut func.records {
                rec.fixups.clear();
                if rec.size == 0 {
                    continue;
                }
                let first = list.partition_point(|r| r.offset < rec.rlt_offset);
                for site in &list[first..] {
                    if site.offset >= rec.end() {
                        break;
                    }
                    let mut at = (site.offset - rec.rlt_offset) as usize;
                    let mut len = site.len.min(rec.size as usize - at);
                    let before = site.relaxable_opcode.min(at);
                    // an indirect jmp through the GOT relaxes into two instructions; leave
                    // that mismatch visible
                    if before > 0 && !(at >= 2 && rec.bytes[at - 2..at] == [0xff, 0x25]) {
                        at -= before;
                        len += before;
                    }
                    rec.fixups.push(Fixup { at, len });
                }
            }
        }
    }
}

/// A relocation inside a section of the assembled object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelocSite {
    pub offset: u64,
    pub len: usize,
    /// Bytes in front of the field the linker may rewrite when relaxing
    /// (GOT loads turned into `lea`, and similar).
    pub relaxable_opcode: usize,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ListingError {
    #[error("malformed listing at line {line}: {reason}")]
    MalformedListing { line: usize, reason: String },
    #[error("function {function}: offset {offset:#x} (source line {line}) precedes the end of the previous record")]
    NonMonotonicOffsets { function: String, offset: u64, line: usize },
}

const DATA_DIRECTIVES: &[&str] = &[
    ".byte", ".2byte", ".4byte", ".8byte", ".short", ".word", ".hword", ".long", ".int", ".quad", ".octa", ".value",
    ".ascii", ".asciz", ".string", ".zero", ".skip", ".space", ".fill", ".float", ".double", ".single", ".sleb128",
    ".uleb128", ".nops", ".inst",
];

fn is_align_directive(d: &str) -> bool {
    matches!(
        d,
        ".align" | ".p2align" | ".balign" | ".p2alignw" | ".p2alignl" | ".balignw" | ".balignl"
    )
}

/// Strips a `#` comment, honoring double-quoted strings.
fn split_comment(s: &str) -> (&str, Option<&str>) {
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        match c {
            _ if escaped => escaped = false,
            '\\' if in_str => escaped = true,
            '"' => in_str = !in_str,
            '#' if !in_str => return (&s[..i], Some(&s[i + 1..])),
            _ => {}
        }
    }
    (s, None)
}

fn is_label_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$' | '@')
}

/// Splits leading `label:` definitions off a statement.
pub fn split_labels(s: &str) -> (Vec<&str>, &str) {
    let mut labels = Vec::new();
    let mut rest = s.trim_start();
    loop {
        let end = rest.find(|c: char| !is_label_char(c)).unwrap_or(rest.len());
        if end > 0 && rest[end..].starts_with(':') && !rest[end..].starts_with("::") {
            labels.push(&rest[..end]);
            rest = rest[end + 1..].trim_start();
        } else if rest.starts_with('"') {
            // quoted label
            match rest[1..].find('"') {
                Some(q) if rest[q + 2..].starts_with(':') => {
                    labels.push(&rest[1..q + 1]);
                    rest = rest[q + 3..].trim_start();
                }
                _ => break,
            }
        } else {
            break;
        }
    }
    (labels, rest)
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A source statement reduced to the parts the parser cares about.
struct Stmt {
    labels: Vec<String>,
    text: String,
    patched_from: Option<String>,
}

fn parse_stmt(src: &str) -> Stmt {
    let (code, comment) = split_comment(src);
    let (labels, rest) = split_labels(code);
    let patched_from = comment
        .map(str::trim)
        .and_then(|c| c.strip_prefix(PATCH_MARKER))
        .map(collapse_ws);
    Stmt {
        labels: labels.into_iter().map(str::to_string).collect(),
        text: collapse_ws(rest),
        patched_from,
    }
}

fn directive_of(text: &str) -> Option<&str> {
    text.starts_with('.')
        .then(|| text.split(|c: char| c.is_whitespace()).next().unwrap_or(text))
}

fn directive_args(text: &str) -> Vec<String> {
    let after = text.split_once(char::is_whitespace).map(|x| x.1).unwrap_or("");
    after
        .split(',')
        .map(|a| a.trim().trim_matches('"').to_string())
        .collect()
}

fn parse_int(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(h, 16).ok()
    } else {
        s.parse().ok()
    }
}

/// Padding an alignment directive inserts at `offset`, when computable.
fn align_padding(text: &str, offset: u64) -> Option<u64> {
    let d = directive_of(text)?;
    let args = directive_args(text);
    let first = parse_int(args.first()?)?;
    let boundary = if d.starts_with(".p2align") {
        1u64.checked_shl(first as u32)?
    } else {
        // .align on x86 ELF takes a byte count
        first
    };
    if boundary == 0 {
        return Some(0);
    }
    let pad = (boundary - offset % boundary) % boundary;
    let max = args.get(2).and_then(|m| parse_int(m));
    Some(match max {
        Some(max) if pad > max => 0,
        _ => pad,
    })
}

#[derive(Default)]
struct SectionState {
    /// Next offset after the most recent record.
    cursor: u64,
    /// Index into `funcs` of the function currently open in this section.
    open: Option<usize>,
}

struct PendingFunc {
    name: String,
    section: String,
    label_line: usize,
    /// Index in the section's record list where this function starts.
    first_record: usize,
    records: Vec<usize>,
}

struct RawRecord {
    kind: RecordKind,
    offset: u64,
    bytes: Vec<u8>,
    statement: String,
    line: usize,
    patched: bool,
    addressed: bool,
    section: String,
}

fn malformed(line: usize, reason: impl Into<String>) -> ListingError {
    ListingError::MalformedListing {
        line,
        reason: reason.into(),
    }
}

fn is_executable_section(name: &str, flags: Option<&str>) -> bool {
    name.starts_with(".text") || flags.is_some_and(|f| f.contains('x'))
}

/// Parses listing text. Function boundaries come from `.type name,@function`
/// directives.
pub fn parse_listing(text: &str) -> Result<ListingDoc, ListingError> {
    parse_listing_with(text, &HashSet::new())
}

/// Like [`parse_listing`], additionally opening a function at any label in
/// `fallback_names` (for sources lacking `.type` directives).
pub fn parse_listing_with(text: &str, fallback_names: &HashSet<String>) -> Result<ListingDoc, ListingError> {
    let mut sections: HashMap<String, SectionState> = HashMap::new();
    let mut exec_sections: HashSet<String> = [".text".to_string()].into();
    let mut current = ".text".to_string();
    let mut previous = ".text".to_string();
    let mut stack: Vec<String> = Vec::new();
    let mut function_names: HashSet<String> = HashSet::new();

    let mut records: Vec<RawRecord> = Vec::new();
    let mut funcs: Vec<PendingFunc> = Vec::new();
    // (source line, record index) of the last emitting line, for continuation bytes
    let mut last_record_of_line: Option<(usize, usize)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let lst_line = idx + 1;
        let line = raw.trim_end_matches('\r').trim_start_matches('\x0c');
        if line.trim().is_empty() || line.starts_with("****") {
            continue;
        }
        if line.starts_with("GAS LISTING") {
            continue;
        }
        let trimmed = line.trim_start();
        if trimmed.starts_with("DEFINED SYMBOLS")
            || trimmed.starts_with("UNDEFINED SYMBOLS")
            || trimmed.starts_with("NO DEFINED SYMBOLS")
            || trimmed.starts_with("NO UNDEFINED SYMBOLS")
        {
            break;
        }
        let (left, src) = match line.split_once('\t') {
            Some((l, s)) => (l, Some(s)),
            None => (line, None),
        };
        let ltrim = left.trim_start();
        let num_end = ltrim.find(|c: char| !c.is_ascii_digit()).unwrap_or(ltrim.len());
        if num_end == 0 {
            // page header continuation (title/subtitle) lines
            if src.is_none() && !ltrim.chars().next().is_some_and(|c| c.is_ascii_hexdigit()) {
                continue;
            }
            return Err(malformed(lst_line, "missing line number"));
        }
        let src_line: usize = ltrim[..num_end]
            .parse()
            .map_err(|_| malformed(lst_line, "bad line number"))?;
        let after_num = &ltrim[num_end..];
        let has_addr = after_num.starts_with(' ') && after_num[1..].starts_with(|c: char| c.is_ascii_hexdigit());
        let mut tokens = after_num.split_whitespace();
        let addr = if has_addr {
            let tok = tokens.next().unwrap_or_default();
            Some(u64::from_str_radix(tok, 16).map_err(|_| malformed(lst_line, "bad address column"))?)
        } else {
            None
        };
        let mut bytes = Vec::new();
        for tok in tokens {
            let decoded = hex::decode(tok).map_err(|_| malformed(lst_line, format!("bad byte column `{tok}`")))?;
            bytes.extend(decoded);
        }

        let Some(src) = src else {
            // continuation line: more bytes for the previous record of this source line
            if addr.is_some() {
                return Err(malformed(lst_line, "address without statement"));
            }
            match last_record_of_line {
                Some((l, r)) if l == src_line => records[r].bytes.extend(bytes),
                _ if bytes.is_empty() => {}
                _ => return Err(malformed(lst_line, "continuation bytes without a record")),
            }
            continue;
        };

        let stmt = parse_stmt(src);
        let directive = directive_of(&stmt.text).map(str::to_string);

        // section tracking
        if let Some(d) = directive.as_deref() {
            let args = directive_args(&stmt.text);
            let switch_to = |name: String, current: &mut String, previous: &mut String| {
                if name != *current {
                    *previous = std::mem::replace(current, name);
                }
            };
            match d {
                ".text" => switch_to(".text".into(), &mut current, &mut previous),
                ".data" => switch_to(".data".into(), &mut current, &mut previous),
                ".bss" => switch_to(".bss".into(), &mut current, &mut previous),
                ".section" | ".pushsection" => {
                    let name = args.first().cloned().unwrap_or_default();
                    if is_executable_section(&name, args.get(1).map(String::as_str)) {
                        exec_sections.insert(name.clone());
                    }
                    if d == ".pushsection" {
                        stack.push(current.clone());
                    }
                    switch_to(name, &mut current, &mut previous);
                }
                ".popsection" => {
                    if let Some(s) = stack.pop() {
                        switch_to(s, &mut current, &mut previous);
                    }
                }
                ".previous" => std::mem::swap(&mut current, &mut previous),
                ".type" if args.len() >= 2 => {
                    let ty = args[1].trim_start_matches(['@', '%']);
                    if ty == "function" || ty == "STT_FUNC" || ty == "gnu_indirect_function" {
                        function_names.insert(args[0].clone());
                    }
                }
                _ => {}
            }
        }

        let state = sections.entry(current.clone()).or_default();
        for label in &stmt.labels {
            if function_names.contains(label) || fallback_names.contains(label) {
                let fidx = funcs.len();
                funcs.push(PendingFunc {
                    name: label.clone(),
                    section: current.clone(),
                    label_line: src_line,
                    first_record: records.len(),
                    records: Vec::new(),
                });
                state.open = Some(fidx);
            }
        }

        let kind = match directive.as_deref() {
            _ if stmt.patched_from.is_some() => Some(RecordKind::Insn),
            Some(d) if is_align_directive(d) => Some(RecordKind::Align),
            Some(d) if DATA_DIRECTIVES.contains(&d) || addr.is_some() => Some(RecordKind::Data),
            Some(_) => None,
            None if stmt.text.is_empty() => None,
            None => Some(RecordKind::Insn),
        };
        let Some(kind) = kind else { continue };
        if addr.is_none() && kind != RecordKind::Align {
            // nothing emitted (e.g. `.zero 0`)
            continue;
        }
        let offset = addr.unwrap_or(state.cursor);
        state.cursor = offset + bytes.len() as u64;
        let statement = stmt.patched_from.clone().unwrap_or_else(|| stmt.text.clone());
        let ridx = records.len();
        records.push(RawRecord {
            kind,
            offset,
            bytes,
            statement,
            line: src_line,
            patched: stmt.patched_from.is_some(),
            addressed: addr.is_some(),
            section: current.clone(),
        });
        last_record_of_line = Some((src_line, ridx));
        if let Some(f) = state.open {
            funcs[f].records.push(ridx);
        }
    }

    // cursors reflect continuation bytes only after the fact
    let mut by_section: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_section.entry(r.section.as_str()).or_default().push(i);
    }
    let mut sizes = vec![0u64; records.len()];
    let mut offsets: Vec<u64> = records.iter().map(|r| r.offset).collect();
    for list in by_section.values() {
        let mut cursor = 0u64;
        for (pos, &i) in list.iter().enumerate() {
            let r = &records[i];
            if !r.addressed {
                offsets[i] = cursor;
            }
            let next = list[pos + 1..].iter().map(|&j| &records[j]).find(|n| n.addressed);
            sizes[i] = match r.kind {
                RecordKind::Align => match next {
                    Some(n) if n.offset >= offsets[i] => n.offset - offsets[i],
                    _ => align_padding(&r.statement, offsets[i])
                        .unwrap_or(r.bytes.len() as u64)
                        .max(r.bytes.len() as u64),
                },
                _ => r.bytes.len() as u64,
            };
            cursor = offsets[i] + sizes[i];
        }
    }

    let mut doc = ListingDoc::default();
    let mut attributed = vec![false; records.len()];
    // the last source line a function may own: just before the next function label in
    // its section
    for (fi, f) in funcs.iter().enumerate() {
        let next_label = funcs[fi + 1..]
            .iter()
            .find(|g| g.section == f.section)
            .map(|g| g.label_line - 1);
        let last_line = next_label.unwrap_or(usize::MAX);
        let mut recs: Vec<ListedRecord> = Vec::with_capacity(f.records.len());
        for &ri in &f.records {
            attributed[ri] = true;
            let r = &records[ri];
            recs.push(ListedRecord {
                kind: r.kind,
                rlt_offset: offsets[ri],
                size: sizes[ri],
                bytes: r.bytes.clone(),
                statement: r.statement.clone(),
                line: r.line,
                fixups: Vec::new(),
                patched: r.patched,
            });
        }
        let rlt_func = by_section
            .get(f.section.as_str())
            .and_then(|list| list.iter().find(|&&i| i >= f.first_record))
            .map(|&i| offsets[i])
            .unwrap_or_else(|| sections.get(&f.section).map_or(0, |s| s.cursor));
        let mut prev_end = rlt_func;
        for r in &recs {
            if r.rlt_offset < prev_end {
                return Err(ListingError::NonMonotonicOffsets {
                    function: f.name.clone(),
                    offset: r.rlt_offset,
                    line: r.line,
                });
            }
            prev_end = r.end();
        }
        doc.functions.push(ListedFunction {
            name: f.name.clone(),
            section: f.section.clone(),
            rlt_func,
            records: recs,
            label_line: f.label_line,
            last_line,
        });
    }
    for (i, r) in records.iter().enumerate() {
        if !attributed[i] && exec_sections.contains(&r.section) && sizes[i] > 0 {
            doc.unattributed.push(ListedRecord {
                kind: r.kind,
                rlt_offset: offsets[i],
                size: sizes[i],
                bytes: r.bytes.clone(),
                statement: r.statement.clone(),
                line: r.line,
                fixups: Vec::new(),
                patched: r.patched,
            });
        }
    }
    Ok(doc)
}

const CC_SUFFIXES: &[&str] = &[
    "a", "ae", "b", "be", "c", "e", "g", "ge", "l", "le", "na", "nae", "nb", "nbe", "nc", "ne", "ng", "nge", "nl",
    "nle", "no", "np", "ns", "nz", "o", "p", "pe", "po", "s", "z",
];

const INSN_PREFIXES: &[&str] = &[
    "rep", "repe", "repz", "repne", "repnz", "lock", "notrack", "bnd", "data16", "data32", "addr16", "addr32", "cs",
    "ds", "es", "fs", "gs", "ss", "rex", "rex.w", "rex64", "xacquire", "xrelease",
];

/// Control-flow mnemonics outside the supported set.
const UNSUPPORTED_CF: &[&str] = &[
    "syscall", "sysenter", "sysexit", "sysret", "sysretq", "sysretl", "sysexitq", "int", "int3", "int1", "into",
    "iret", "iretd", "iretq", "iretl", "iretw", "xbegin", "xabort", "xend", "vmcall", "vmlaunch", "vmresume",
    "vmmcall", "enclu", "encls",
];

/// Lowercased mnemonic of an instruction statement and the operand text,
/// skipping labels and instruction prefixes such as `rep` or `{disp32}`.
pub fn mnemonic_of(statement: &str) -> Option<(String, String)> {
    let (_, rest) = split_labels(split_comment(statement).0);
    let mut words = rest
        .split(|c: char| c.is_whitespace())
        .filter(|w| !w.is_empty())
        .skip_while(|w| {
            INSN_PREFIXES.contains(&w.to_ascii_lowercase().as_str()) || (w.starts_with('{') && w.ends_with('}'))
        });
    let mnemonic = words.next()?.to_ascii_lowercase();
    Some((mnemonic, words.collect::<Vec<_>>().join(" ")))
}

/// Classifies an AT&T- or Intel-syntax instruction statement by mnemonic.
pub fn classify_statement(statement: &str) -> CfClass {
    let Some((mnemonic, operands)) = mnemonic_of(statement) else {
        return CfClass::NonCf;
    };
    let indirect = operands.starts_with('*')
        || operands.starts_with('%')
        || operands.contains('[')
        || operands.starts_with("qword")
        || operands.starts_with("dword");
    let m = mnemonic.as_str();
    match m {
        "jmp" | "jmpq" | "jmpl" | "jmpw" => {
            if indirect {
                CfClass::IndirectJump
            } else {
                CfClass::UncondDirectJump
            }
        }
        "ljmp" | "ljmpl" | "ljmpq" | "ljmpw" => CfClass::IndirectJump,
        "call" | "callq" | "calll" | "callw" | "lcall" | "lcalll" | "lcallq" => CfClass::Call,
        "ret" | "retq" | "retl" | "retw" | "retn" | "lret" | "lretq" | "lretl" | "lretw" => CfClass::Return,
        "jcxz" | "jecxz" | "jrcxz" | "loop" | "loope" | "loopz" | "loopne" | "loopnz" | "loopl" | "loopq" => {
            CfClass::CondDirectJump
        }
        "ud2" | "ud0" | "ud1" | "hlt" => CfClass::OtherCf,
        _ if UNSUPPORTED_CF.contains(&m) => CfClass::UnknownCf,
        _ => match m.strip_prefix('j') {
            Some(cc) if CC_SUFFIXES.contains(&cc) => CfClass::CondDirectJump,
            _ => CfClass::NonCf,
        },
    }
}
