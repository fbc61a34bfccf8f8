//! Multiple-encoding reconciliation. The assembler may pick a different
//! encoding for a statement than the one found in the binary; such
//! statements are rewritten as `.byte` lines carrying the binary's bytes and
//! the file is reassembled until the function agrees with the binary.

use std::collections::HashSet;

use crate::asm::{AsmError, AssemblerDriver};
use crate::binfmt::{BinaryImage, BinfmtError, Isa};
use crate::groundtruth::{FuncRef, Pair, ReconcileCapability};
use crate::listing::{
    mnemonic_of, split_labels, ListedFunction, ListedRecord, ListingDoc, ListingError, RecordKind, PATCH_MARKER,
};
use crate::x86::{decode_form, Form, MAX_INSN_LEN};

#[derive(Debug, thiserror::Error)]
pub enum ReconcileError {
    #[error("{function}: no encoding rule explains the mismatch at {abs_offset:#x} (`{statement}`): listing {} vs binary {}", hex::encode(.listing), hex::encode(.binary))]
    UnresolvableMismatch {
        function: String,
        abs_offset: u64,
        statement: String,
        listing: Vec<u8>,
        binary: Vec<u8>,
    },
    #[error("{function}: reconciliation did not converge after {iterations} patches")]
    NonTermination { function: String, iterations: usize },
    #[error("{function}: source line {line} cannot be located in the function body")]
    StatementNotLocatable { function: String, line: usize },
    #[error("listed function #{index} ({name}) is missing after reassembly")]
    FunctionMissing { index: usize, name: String },
    #[error("{function}: record offset {rlt_insn:#x} precedes function offset {rlt_func:#x}")]
    Underflow {
        function: String,
        rlt_func: u64,
        rlt_insn: u64,
    },
    #[error(transparent)]
    Binfmt(#[from] BinfmtError),
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Listing(#[from] ListingError),
}

impl ReconcileError {
    /// Errors meaning "this listed function is not the one at that offset",
    /// as opposed to failures of the machinery.
    pub fn rejects_candidate(&self) -> bool {
        matches!(
            self,
            ReconcileError::UnresolvableMismatch { .. }
                | ReconcileError::NonTermination { .. }
                | ReconcileError::Underflow { .. }
                | ReconcileError::Binfmt(BinfmtError::OutOfRange { .. })
        )
    }
}

fn abs_of(func: &ListedFunction, rec: &ListedRecord, abs_func: u64) -> Result<u64, ReconcileError> {
    rec.rlt_offset
        .checked_sub(func.rlt_func)
        .map(|d| abs_func + d)
        .ok_or_else(|| ReconcileError::Underflow {
            function: func.name.clone(),
            rlt_func: func.rlt_func,
            rlt_insn: rec.rlt_offset,
        })
}

/// Index of the first instruction or data record whose bytes differ from
/// the binary. Alignment records are not compared.
pub fn find_first_mismatch(
    func: &ListedFunction,
    img: &BinaryImage,
    abs_func: u64,
) -> Result<Option<usize>, ReconcileError> {
    for (i, rec) in func.records.iter().enumerate() {
        if rec.kind == RecordKind::Align || rec.size == 0 {
            continue;
        }
        let abs = abs_of(func, rec, abs_func)?;
        let binary = img.read_up_to(abs, rec.size);
        if binary.is_empty() {
            return Err(BinfmtError::OutOfRange {
                start: abs,
                len: rec.size,
            }
            .into());
        }
        if !rec.bytes_match(binary) {
            return Ok(Some(i));
        }
    }
    Ok(None)
}

/// The error reported for a record no rule can reconcile.
pub fn mismatch_error(func: &ListedFunction, index: usize, img: &BinaryImage, abs_func: u64) -> ReconcileError {
    let rec = &func.records[index];
    let abs = abs_func + rec.rlt_offset.saturating_sub(func.rlt_func);
    ReconcileError::UnresolvableMismatch {
        function: func.name.clone(),
        abs_offset: abs,
        statement: rec.statement.clone(),
        listing: rec.bytes.clone(),
        binary: img.read_up_to(abs, rec.size.max(MAX_INSN_LEN as u64)).to_vec(),
    }
}

/// One family of statements that admit more than one encoding.
pub trait EncodingRule: Send + Sync {
    fn description(&self) -> &str;

    fn matches(&self, statement: &str, listing: &[u8], isa: Isa) -> bool;

    /// Length of the binary's encoding of the same statement, given the
    /// bytes at the statement's offset (up to 15).
    fn alternate_length(&self, listing: &[u8], binary: &[u8], isa: Isa) -> Option<usize>;
}

/// A rule over one instruction family: the statement's mnemonic selects the
/// rule and the binary bytes must decode to the same operation with the same
/// operands, differing only in encoding.
pub struct FamilyRule {
    description: &'static str,
    mnemonic: fn(&str) -> bool,
    family: fn(&Form) -> bool,
}

impl EncodingRule for FamilyRule {
    fn description(&self) -> &str {
        self.description
    }

    fn matches(&self, statement: &str, listing: &[u8], isa: Isa) -> bool {
        mnemonic_of(statement).is_some_and(|(m, _)| (self.mnemonic)(&m))
            && decode_form(listing, isa).is_some_and(|d| (self.family)(&d.form))
    }

    fn alternate_length(&self, listing: &[u8], binary: &[u8], isa: Isa) -> Option<usize> {
        let ours = decode_form(listing, isa)?;
        let theirs = decode_form(binary, isa)?;
        (ours.equivalent(&theirs) && (1..=MAX_INSN_LEN).contains(&theirs.len)).then_some(theirs.len)
    }
}

fn strip_suffix(m: &str, bases: &[&str], suffixes: &[&str]) -> bool {
    bases.iter().any(|b| {
        m.strip_prefix(b)
            .is_some_and(|rest| rest.is_empty() || suffixes.contains(&rest))
    })
}

const BOP_NAMES: [&str; 8] = ["add", "or", "adc", "sbb", "and", "sub", "xor", "cmp"];
const SIZE_SUFFIXES: [&str; 4] = ["b", "w", "l", "q"];

fn is_jmp(m: &str) -> bool {
    matches!(m, "jmp" | "jmpq" | "jmpl" | "jmpw")
}

fn is_jcc(m: &str) -> bool {
    m.starts_with('j') && !is_jmp(m) && !m.starts_with("jrcxz") && !m.starts_with("jecxz") && !m.starts_with("jcxz")
}

fn is_bop(m: &str) -> bool {
    strip_suffix(m, &BOP_NAMES, &SIZE_SUFFIXES)
}

fn is_imul(m: &str) -> bool {
    strip_suffix(m, &["imul"], &["w", "l", "q"])
}

fn is_shift(m: &str) -> bool {
    strip_suffix(m, &["sar", "shr", "sal", "shl"], &SIZE_SUFFIXES)
}

fn is_mov(m: &str) -> bool {
    strip_suffix(m, &["mov"], &SIZE_SUFFIXES) || m == "movabs" || strip_suffix(m, &["movabs"], &SIZE_SUFFIXES)
}

/// The built-in rule table. Exact-mnemonic rules come before family rules.
pub fn encoding_rules() -> Vec<Box<dyn EncodingRule>> {
    let rules = [
        FamilyRule {
            description: "jmp rel8 / jmp rel32",
            mnemonic: is_jmp,
            family: |f| matches!(f, Form::Jmp),
        },
        FamilyRule {
            description: "imul r, r/m, imm8 / imm16/32",
            mnemonic: is_imul,
            family: |f| matches!(f, Form::Imul { .. }),
        },
        FamilyRule {
            description: "mov accumulator, moffs / mov r, m",
            mnemonic: is_mov,
            family: |f| matches!(f, Form::MovAbs { .. }),
        },
        FamilyRule {
            description: "jcc rel8 / jcc rel32",
            mnemonic: is_jcc,
            family: |f| matches!(f, Form::Jcc(_)),
        },
        FamilyRule {
            description: "binary operation: accumulator / r/m forms, imm8 / imm16/32",
            mnemonic: is_bop,
            family: |f| matches!(f, Form::Bop { .. }),
        },
        FamilyRule {
            description: "shift by 1 / shift by imm8",
            mnemonic: is_shift,
            family: |f| matches!(f, Form::Shift { .. }),
        },
    ];
    rules
        .into_iter()
        .map(|r| Box::new(r) as Box<dyn EncodingRule>)
        .collect()
}

/// Replaces the source line of `record` with a `.byte` line holding
/// `replacement`, keeping labels defined on that line.
pub fn patch_statement(
    asm_text: &str,
    func: &ListedFunction,
    record: &ListedRecord,
    replacement: &[u8],
) -> Result<String, ReconcileError> {
    let not_found = || ReconcileError::StatementNotLocatable {
        function: func.name.clone(),
        line: record.line,
    };
    if record.line <= func.label_line || record.line > func.last_line || replacement.is_empty() {
        return Err(not_found());
    }
    let mut lines: Vec<&str> = asm_text.split_inclusive('\n').collect();
    let idx = record.line - 1;
    let original = *lines.get(idx).ok_or_else(not_found)?;
    let body = original.trim_end_matches(['\n', '\r']);
    let eol = &original[body.len()..];

    let (code, comment) = match body.find('#') {
        Some(i) if !body[..i].contains('"') => (&body[..i], Some(&body[i + 1..])),
        _ => (body, None),
    };
    let (labels, stmt) = split_labels(code);
    let previous_patch = comment
        .map(str::trim)
        .and_then(|c| c.strip_prefix(PATCH_MARKER))
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "));
    let stmt_text = stmt.split_whitespace().collect::<Vec<_>>().join(" ");
    let origin = previous_patch.unwrap_or(stmt_text);
    if origin != record.statement {
        return Err(not_found());
    }

    let mut new_line = String::new();
    for l in labels {
        new_line.push_str(l);
        new_line.push_str(": ");
    }
    let bytes: Vec<String> = replacement.iter().map(|b| format!("{b:#04x}")).collect();
    new_line.push_str(&format!("\t.byte {} # {PATCH_MARKER} {origin}", bytes.join(",")));
    new_line.push_str(if eol.is_empty() { "\n" } else { eol });
    let mut out = String::with_capacity(asm_text.len() + 32);
    for (i, l) in lines.iter_mut().enumerate() {
        if i == idx {
            out.push_str(&new_line);
        } else {
            out.push_str(l);
        }
    }
    Ok(out)
}

/// Result of a converged reconciliation.
#[derive(Debug, Clone)]
pub struct Reconciled {
    pub asm_text: String,
    pub doc: ListingDoc,
    /// Index of the function within `doc`.
    pub function: usize,
    pub patches: usize,
}

pub struct Reconciler<'a> {
    pub driver: &'a dyn AssemblerDriver,
    pub rules: &'a [Box<dyn EncodingRule>],
    pub isa: Isa,
    /// Labels treated as function starts in sources without `.type`.
    pub fallback_names: &'a HashSet<String>,
}

impl Reconciler<'_> {
    fn assemble(&self, text: &str) -> Result<ListingDoc, ReconcileError> {
        Ok(self.driver.assemble(text)?.parse(self.fallback_names)?)
    }

    /// Patches function `index` of `asm_text` until it agrees with the binary
    /// at `abs_func`.
    pub fn reconcile_function(
        &self,
        asm_text: &str,
        index: usize,
        img: &BinaryImage,
        abs_func: u64,
    ) -> Result<Reconciled, ReconcileError> {
        self.reconcile_from(asm_text.to_string(), self.assemble(asm_text)?, index, img, abs_func)
    }

    fn reconcile_from(
        &self,
        mut text: String,
        mut doc: ListingDoc,
        index: usize,
        img: &BinaryImage,
        abs_func: u64,
    ) -> Result<Reconciled, ReconcileError> {
        let name = doc
            .functions
            .get(index)
            .map(|f| f.name.clone())
            .ok_or_else(|| ReconcileError::FunctionMissing {
                index,
                name: String::new(),
            })?;
        let budget = doc.functions[index]
            .records
            .iter()
            .filter(|r| r.kind != RecordKind::Align)
            .count();
        let mut patches = 0;
        let mut last_mismatch: Option<u64> = None;
        loop {
            let func =
                doc.functions
                    .get(index)
                    .filter(|f| f.name == name)
                    .ok_or_else(|| ReconcileError::FunctionMissing {
                        index,
                        name: name.clone(),
                    })?;
            let Some(i) = find_first_mismatch(func, img, abs_func)? else {
                return Ok(Reconciled {
                    asm_text: text,
                    doc,
                    function: index,
                    patches,
                });
            };
            let rec = &func.records[i];
            let abs = abs_of(func, rec, abs_func)?;
            if patches >= budget || last_mismatch.is_some_and(|l| abs <= l) {
                return Err(ReconcileError::NonTermination {
                    function: name,
                    iterations: patches,
                });
            }
            last_mismatch = Some(abs);
            if rec.kind == RecordKind::Data && !rec.patched {
                return Err(mismatch_error(func, i, img, abs_func));
            }
            let window = img.read_up_to(abs, MAX_INSN_LEN as u64);
            let len = self
                .rules
                .iter()
                .filter(|r| r.matches(&rec.statement, &rec.bytes, self.isa))
                .find_map(|r| r.alternate_length(&rec.bytes, window, self.isa))
                .ok_or_else(|| mismatch_error(func, i, img, abs_func))?;
            let replacement = img.read_bytes(abs, len as u64)?;
            log::debug!(
                "{name}: {} at {abs:#x}: {} -> {}",
                rec.statement,
                hex::encode(&rec.bytes),
                hex::encode(replacement)
            );
            text = patch_statement(&text, func, rec, replacement)?;
            doc = self.assemble(&text)?;
            patches += 1;
        }
    }
}

/// Assembly sources under reconciliation. Each attempt works on a copy of
/// the source and commits it only when the function converges.
pub struct SourceSet<'a> {
    reconciler: Reconciler<'a>,
    sources: Vec<String>,
    docs: Vec<ListingDoc>,
    pub patches: usize,
}

impl<'a> SourceSet<'a> {
    pub fn new(reconciler: Reconciler<'a>, sources: Vec<String>) -> Result<Self, ReconcileError> {
        let docs = sources
            .iter()
            .map(|s| reconciler.assemble(s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SourceSet {
            reconciler,
            sources,
            docs,
            patches: 0,
        })
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn into_parts(self) -> (Vec<String>, Vec<ListingDoc>) {
        (self.sources, self.docs)
    }

    /// Re-reconciles paired functions disturbed by later patches to the same
    /// file (a patch shifts offsets after it).
    pub fn stabilize(&mut self, pairs: &[Pair], img: &BinaryImage) -> Result<(), ReconcileError> {
        for _ in 0..=pairs.len() {
            let mut changed = false;
            for p in pairs {
                let func = self.function(p.listed);
                if find_first_mismatch(func, img, p.symbol.abs_offset)?.is_some() {
                    self.try_reconcile(p.listed, p.symbol.abs_offset, img)?;
                    changed = true;
                }
            }
            if !changed {
                return Ok(());
            }
        }
        Err(ReconcileError::NonTermination {
            function: "<all>".into(),
            iterations: pairs.len(),
        })
    }
}

impl ReconcileCapability for SourceSet<'_> {
    fn docs(&self) -> &[ListingDoc] {
        &self.docs
    }

    fn try_reconcile(&mut self, listed: FuncRef, abs_func: u64, img: &BinaryImage) -> Result<(), ReconcileError> {
        let done = self.reconciler.reconcile_from(
            self.sources[listed.doc].clone(),
            self.docs[listed.doc].clone(),
            listed.func,
            img,
            abs_func,
        )?;
        self.patches += done.patches;
        self.sources[listed.doc] = done.asm_text;
        self.docs[listed.doc] = done.doc;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::listing::parse_listing;

    fn func(text: &str) -> ListedFunction {
        parse_listing(text).unwrap().functions.remove(0)
    }

    const LISTING: &str = "   1              \t.type f, @function
   2              \tf:
   3 0000 31C0     \t\txorl %eax, %eax
   4 0002 E9000000 \t.L5: jmp .L2
   4      00
   5 0007 C3       \t.L2: ret
";

    #[test]
    fn mismatch_positions() {
        let f = func(LISTING);
        let same = BinaryImage::from_code(Isa::X64, 0x10, &[0x31, 0xc0, 0xe9, 0, 0, 0, 0, 0xc3], vec![]);
        assert_eq!(find_first_mismatch(&f, &same, 0x10).unwrap(), None);
        let short = BinaryImage::from_code(Isa::X64, 0x10, &[0x31, 0xc0, 0xeb, 0x00, 0xc3], vec![]);
        assert_eq!(find_first_mismatch(&f, &short, 0x10).unwrap(), Some(1));
        let last = BinaryImage::from_code(Isa::X64, 0x10, &[0x31, 0xc0, 0xe9, 0, 0, 0, 0, 0xc2, 0, 0], vec![]);
        assert_eq!(find_first_mismatch(&f, &last, 0x10).unwrap(), Some(2));
    }

    #[test]
    fn patch_replaces_line_and_keeps_label() {
        let src = "\t.type f, @function\nf:\n\txorl %eax, %eax\n.L5: jmp .L2\n.L2: ret\n";
        let f = func(LISTING);
        let out = patch_statement(src, &f, &f.records[1], &[0xeb, 0xf0]).unwrap();
        let line = out.lines().nth(3).unwrap();
        assert!(line.starts_with(".L5: "), "{line}");
        assert!(line.contains(".byte 0xeb,0xf0"), "{line}");
        assert!(line.ends_with("# gtforge-patched: jmp .L2"), "{line}");
        // a patched line can be patched again
        let mut again = f.records[1].clone();
        again.patched = true;
        let twice = patch_statement(&out, &f, &again, &[0xe9, 1, 0, 0, 0]).unwrap();
        assert!(twice.lines().nth(3).unwrap().contains(".byte 0xe9,0x01,0x00,0x00,0x00"));
    }

    #[test]
    fn patch_outside_function_fails() {
        let src = "\t.type f, @function\nf:\n\txorl %eax, %eax\n.L5: jmp .L2\n.L2: ret\n";
        let f = func(LISTING);
        let mut rec = f.records[2].clone();
        rec.line = 40;
        assert!(matches!(
            patch_statement(src, &f, &rec, &[0xc3]),
            Err(ReconcileError::StatementNotLocatable { .. })
        ));
        let mut rec = f.records[2].clone();
        rec.statement = "leave".into();
        assert!(patch_statement(src, &f, &rec, &[0xc3]).is_err());
    }

    #[test]
    fn rules_map_lengths() {
        let rules = encoding_rules();
        let find = |stmt: &str, listing: &[u8], binary: &[u8]| {
            rules
                .iter()
                .filter(|r| r.matches(stmt, listing, Isa::X64))
                .find_map(|r| r.alternate_length(listing, binary, Isa::X64))
        };
        assert_eq!(find("jmp .L2", &[0xe9, 0, 0, 0, 0], &[0xeb, 0xf0, 0x90]), Some(2));
        assert_eq!(find("jne .L2", &[0x75, 0x10], &[0x0f, 0x85, 1, 0, 0, 0]), Some(6));
        assert_eq!(find("jne .L2", &[0x75, 0x10], &[0x0f, 0x84, 1, 0, 0, 0]), None);
        assert_eq!(find("addl $1, %eax", &[0x83, 0xc0, 0x01], &[0x05, 1, 0, 0, 0]), Some(5));
        assert_eq!(find("addl $1, %eax", &[0x83, 0xc0, 0x01], &[0x05, 2, 0, 0, 0]), None);
        assert_eq!(find("shll %eax", &[0xd1, 0xe0], &[0xc1, 0xe0, 0x01]), Some(3));
        assert_eq!(find("movq %rax, %rbx", &[0x48, 0x89, 0xc3], &[0x48, 0x8b, 0xd8]), None);
    }

    #[test]
    fn candidate_rejection_classes() {
        let e = ReconcileError::NonTermination {
            function: "f".into(),
            iterations: 3,
        };
        assert!(e.rejects_candidate());
        let e = ReconcileError::StatementNotLocatable {
            function: "f".into(),
            line: 1,
        };
        assert!(!e.rejects_candidate());
    }
}
