//! Discovery of instructions the compiler emitted as data. Starting from the
//! conservative successors of every recorded instruction, a conservative
//! recursive traversal decodes unrecorded code and records it as optional.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::process::Command;
use std::sync::Mutex;

use crate::binfmt::{BinaryImage, Isa};
use crate::groundtruth::{GroundTruthDoc, InstructionRecord};
use crate::listing::{classify_statement, CfClass};
use crate::x86::{branch_displacement, decode_builtin, MAX_INSN_LEN};

/// One decoded instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedInsn {
    pub size: usize,
    pub bytes: Vec<u8>,
    pub cf_class: CfClass,
}

pub trait DecodeOracle: Send + Sync {
    fn name(&self) -> &str;

    /// Decodes the instruction at `abs_offset`, or `None` when the oracle
    /// cannot.
    fn decode_at(&self, img: &BinaryImage, abs_offset: u64) -> Option<DecodedInsn>;

    /// Whether the oracle decodes the whole instruction set.
    fn full_coverage(&self) -> bool {
        false
    }
}

/// Known nops, the multiple-encoding families, `ret` and direct `call`.
pub struct BuiltinOracle;

impl DecodeOracle for BuiltinOracle {
    fn name(&self) -> &str {
        "builtin"
    }

    fn decode_at(&self, img: &BinaryImage, abs_offset: u64) -> Option<DecodedInsn> {
        let window = img.read_up_to(abs_offset, MAX_INSN_LEN as u64);
        let insn = decode_builtin(window, img.isa)?;
        Some(DecodedInsn {
            size: insn.len,
            bytes: window[..insn.len].to_vec(),
            cf_class: insn.cf_class,
        })
    }
}

/// Decodes with GNU objdump. Whole executable sections are swept once and
/// cached; addresses off the sweep's boundaries are decoded individually.
pub struct ObjdumpOracle {
    program: String,
    cache: Mutex<HashMap<u64, Option<DecodedInsn>>>,
    swept: Mutex<BTreeSet<u64>>,
}

impl ObjdumpOracle {
    pub fn new(program: impl Into<String>) -> Self {
        ObjdumpOracle {
            program: program.into(),
            cache: Mutex::new(HashMap::new()),
            swept: Mutex::new(BTreeSet::new()),
        }
    }

    /// Whether the program runs at all.
    pub fn available(&self) -> bool {
        Command::new(&self.program)
            .arg("--version")
            .output()
            .is_ok_and(|o| o.status.success())
    }

    fn run(&self, img: &BinaryImage, section_va: u64, code: &[u8], start: u64, stop: u64) -> Vec<(u64, DecodedInsn)> {
        let Ok(dir) = tempfile::tempdir() else {
            return Vec::new();
        };
        let path = dir.path().join("code.bin");
        if std::fs::write(&path, code).is_err() {
            return Vec::new();
        }
        let arch = if img.isa.is_64() { "i386:x86-64" } else { "i386" };
        let out = Command::new(&self.program)
            .args(["-D", "-z", "--insn-width=15", "-b", "binary", "-m", arch])
            .arg(format!("--adjust-vma={section_va:#x}"))
            .arg(format!("--start-address={start:#x}"))
            .arg(format!("--stop-address={stop:#x}"))
            .arg(&path)
            .output();
        match out {
            Ok(o) if o.status.success() => parse_objdump(&String::from_utf8_lossy(&o.stdout)),
            _ => Vec::new(),
        }
    }

    fn sweep_section(&self, img: &BinaryImage, abs_offset: u64) {
        let Some(section) = img.section_at(abs_offset) else {
            return;
        };
        if !self.swept.lock().unwrap().insert(section.virtual_address) {
            return;
        }
        let Ok(code) = img.read_bytes(section.virtual_address, section.size) else {
            return;
        };
        let end = section.virtual_address + section.size;
        let decoded = self.run(img, section.virtual_address, code, section.virtual_address, end);
        let mut cache = self.cache.lock().unwrap();
        for (addr, insn) in decoded {
            cache.entry(addr).or_insert(Some(insn));
        }
    }
}

/// Parses `objdump -d` instruction lines: `addr:\tbytes\tmnemonic operands`.
pub fn parse_objdump(text: &str) -> Vec<(u64, DecodedInsn)> {
    let mut out: Vec<(u64, DecodedInsn)> = Vec::new();
    for line in text.lines() {
        let mut parts = line.splitn(3, '\t');
        let (Some(addr), Some(bytes)) = (parts.next(), parts.next()) else {
            continue;
        };
        let Some(addr) = addr.trim().strip_suffix(':') else {
            continue;
        };
        let Ok(addr) = u64::from_str_radix(addr, 16) else {
            continue;
        };
        let Ok(bytes) = hex::decode(bytes.split_whitespace().collect::<String>()) else {
            continue;
        };
        let text = parts.next().unwrap_or("").trim();
        if bytes.is_empty() {
            continue;
        }
        if text.is_empty() {
            // continuation of an encoding longer than the dump width
            if let Some((prev, insn)) = out.last_mut() {
                if *prev + insn.size as u64 == addr {
                    insn.bytes.extend_from_slice(&bytes);
                    insn.size = insn.bytes.len();
                }
            }
            continue;
        }
        if text.contains("(bad)") {
            continue;
        }
        out.push((
            addr,
            DecodedInsn {
                size: bytes.len(),
                bytes,
                cf_class: classify_statement(text),
            },
        ));
    }
    out
}

impl DecodeOracle for ObjdumpOracle {
    fn name(&self) -> &str {
        "objdump"
    }

    fn full_coverage(&self) -> bool {
        true
    }

    fn decode_at(&self, img: &BinaryImage, abs_offset: u64) -> Option<DecodedInsn> {
        self.sweep_section(img, abs_offset);
        if let Some(hit) = self.cache.lock().unwrap().get(&abs_offset) {
            return hit.clone();
        }
        let section = img.section_at(abs_offset)?;
        let code = img.read_bytes(section.virtual_address, section.size).ok()?;
        let stop = (abs_offset + MAX_INSN_LEN as u64).min(section.virtual_address + section.size);
        let insn = self
            .run(img, section.virtual_address, code, abs_offset, stop)
            .into_iter()
            .find(|(a, _)| *a == abs_offset)
            .map(|(_, i)| i);
        self.cache.lock().unwrap().insert(abs_offset, insn.clone());
        insn
    }
}

/// Direct branch target encoded in `bytes` located at `abs_offset`.
pub fn direct_target(bytes: &[u8], abs_offset: u64, isa: Isa) -> Option<u64> {
    let (disp, len) = branch_displacement(bytes, isa)?;
    if len != bytes.len() {
        return None;
    }
    (abs_offset + len as u64).checked_add_signed(disp)
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("direct jump at {offset:#x} has no computable target")]
pub struct TargetUnresolvable {
    pub offset: u64,
}

/// Addresses where control may continue after an instruction, never
/// guessing indirect targets. Calls and other control flow yield nothing.
pub fn conservative_successors(
    abs_offset: u64,
    bytes: &[u8],
    cf_class: CfClass,
    isa: Isa,
) -> Result<BTreeSet<u64>, TargetUnresolvable> {
    let fall_through = abs_offset + bytes.len() as u64;
    let target = || direct_target(bytes, abs_offset, isa).ok_or(TargetUnresolvable { offset: abs_offset });
    Ok(match cf_class {
        CfClass::NonCf | CfClass::UnknownCf => [fall_through].into(),
        CfClass::CondDirectJump => [fall_through, target()?].into(),
        CfClass::UncondDirectJump => [target()?].into(),
        CfClass::IndirectJump | CfClass::Return | CfClass::Call | CfClass::OtherCf => BTreeSet::new(),
    })
}

/// [`conservative_successors`] for a ground-truth record.
pub fn record_successors(r: &InstructionRecord, isa: Isa) -> Result<BTreeSet<u64>, TargetUnresolvable> {
    conservative_successors(r.abs_offset, &r.bytes, r.cf_class, isa)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Finding {
    Undecodable {
        offset: u64,
        bytes: Vec<u8>,
    },
    Overlap {
        offset: u64,
        bytes: Vec<u8>,
        conflicts_with: u64,
    },
    TargetUnresolvable {
        offset: u64,
    },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::Undecodable { offset, bytes } => {
                write!(f, "undecodable {offset:x} {}", hex::encode(bytes))
            }
            Finding::Overlap {
                offset,
                bytes,
                conflicts_with,
            } => write!(
                f,
                "overlap {offset:x} {} conflicts-with {conflicts_with:x}",
                hex::encode(bytes)
            ),
            Finding::TargetUnresolvable { offset } => write!(f, "target-unresolvable {offset:x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Discovery {
    pub doc: GroundTruthDoc,
    pub findings: Vec<Finding>,
    /// Every address the traversal decoded, in visiting order.
    pub trace: Vec<u64>,
}

/// Occupied byte ranges: start -> end.
struct Occupancy {
    spans: BTreeMap<u64, u64>,
}

impl Occupancy {
    /// The span overlapping `[start, end)`, if any.
    fn conflict(&self, start: u64, end: u64) -> Option<u64> {
        if let Some((&s, &e)) = self.spans.range(..=start).next_back() {
            if e > start {
                return Some(s);
            }
        }
        self.spans.range(start..end).next().map(|(&s, _)| s)
    }
}

/// Records as optional every instruction reachable from a recorded
/// instruction's conservative successors that the document lacks.
pub fn discover_optional(doc: &GroundTruthDoc, img: &BinaryImage, oracle: &dyn DecodeOracle) -> Discovery {
    let isa = doc.isa;
    let mut occupied = Occupancy {
        spans: doc
            .instructions()
            .map(|i| (i.abs_offset, i.end()))
            .chain(doc.regions().map(|r| (r.abs_offset, r.end())))
            .collect(),
    };
    let starts: BTreeSet<u64> = doc.instructions().map(|i| i.abs_offset).collect();
    let mut findings = BTreeSet::new();
    let mut trace = Vec::new();
    let mut out = doc.clone();

    for func in &mut out.functions {
        let lo = func.abs_offset;
        let hi = func.extent.map_or(u64::MAX, |e| lo + e);
        let mut work: Vec<u64> = Vec::new();
        for r in &func.instructions {
            match record_successors(r, isa) {
                Ok(s) => work.extend(s),
                Err(e) => {
                    findings.insert(Finding::TargetUnresolvable { offset: e.offset });
                }
            }
        }
        work.sort_unstable_by(|a, b| b.cmp(a));
        let mut seen: BTreeSet<u64> = BTreeSet::new();
        let mut added = Vec::new();
        while let Some(j) = work.pop() {
            if j < lo || j >= hi || starts.contains(&j) || !seen.insert(j) {
                continue;
            }
            if let Some(s) = occupied.conflict(j, j + 1) {
                // inside a region (padding) or straddling a recorded instruction
                let in_region = doc.regions().any(|r| r.abs_offset == s);
                if !in_region && !added.iter().any(|a: &InstructionRecord| a.abs_offset == s) {
                    findings.insert(Finding::Overlap {
                        offset: j,
                        bytes: img.read_up_to(j, 1).to_vec(),
                        conflicts_with: s,
                    });
                }
                continue;
            }
            trace.push(j);
            let Some(insn) = oracle.decode_at(img, j) else {
                findings.insert(Finding::Undecodable {
                    offset: j,
                    bytes: img.read_up_to(j, MAX_INSN_LEN as u64).to_vec(),
                });
                continue;
            };
            let end = j + insn.size as u64;
            if let Some(s) = occupied.conflict(j, end) {
                findings.insert(Finding::Overlap {
                    offset: j,
                    bytes: insn.bytes.clone(),
                    conflicts_with: s,
                });
                continue;
            }
            occupied.spans.insert(j, end);
            let rec = InstructionRecord::new(j, insn.bytes, isa, true, insn.cf_class);
            match record_successors(&rec, isa) {
                Ok(s) => work.extend(s),
                Err(e) => {
                    findings.insert(Finding::TargetUnresolvable { offset: e.offset });
                }
            }
            added.push(rec);
        }
        if !added.is_empty() {
            func.instructions.extend(added);
            func.instructions.sort_by_key(|i| i.abs_offset);
        }
    }
    Discovery {
        doc: out,
        findings: findings.into_iter().collect(),
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::Digest;
    use crate::groundtruth::{FunctionRecord, NopRegion, Provenance};

    fn rec(off: u64, bytes: &[u8], cf: CfClass) -> InstructionRecord {
        InstructionRecord::new(off, bytes.to_vec(), Isa::X64, false, cf)
    }

    fn doc(code_len: u64, instructions: Vec<InstructionRecord>, regions: Vec<NopRegion>) -> GroundTruthDoc {
        GroundTruthDoc {
            binary_hash: Digest::default(),
            isa: Isa::X64,
            provenance: Provenance::default(),
            functions: vec![FunctionRecord {
                name: "f".into(),
                abs_offset: 0x100,
                extent: Some(code_len),
                instructions,
                regions,
            }],
        }
    }

    #[test]
    fn successor_rules() {
        let s = |off, b: &[u8], c| conservative_successors(off, b, c, Isa::X64).unwrap();
        assert_eq!(s(0x100, &[0x48, 0x01, 0xd8], CfClass::NonCf), [0x103].into());
        // jne -0x72 from 0x102
        assert_eq!(s(0x100, &[0x75, 0x8e], CfClass::CondDirectJump), [0x102, 0x90].into());
        assert_eq!(s(0x100, &[0xeb, 0x02], CfClass::UncondDirectJump), [0x104].into());
        assert!(s(0x100, &[0xc3], CfClass::Return).is_empty());
        assert!(s(0x100, &[0xe8, 0, 0, 0, 0], CfClass::Call).is_empty());
        assert!(s(0x100, &[0xff, 0xe0], CfClass::IndirectJump).is_empty());
        assert_eq!(s(0x100, &[0x0f, 0x05], CfClass::UnknownCf), [0x102].into());
        assert!(conservative_successors(0x100, &[0x90, 0x90], CfClass::UncondDirectJump, Isa::X64).is_err());
    }

    #[test]
    fn falls_through_into_data_nop() {
        // xor eax,eax ; <0f 1f 00 as data> ; ret
        let code = [0x31, 0xc0, 0x0f, 0x1f, 0x00, 0xc3];
        let img = BinaryImage::from_code(Isa::X64, 0x100, &code, vec![]);
        let gt = doc(
            6,
            vec![
                rec(0x100, &code[..2], CfClass::NonCf),
                rec(0x105, &[0xc3], CfClass::Return),
            ],
            vec![],
        );
        let d = discover_optional(&gt, &img, &BuiltinOracle);
        let optional: Vec<_> = d.doc.instructions().filter(|i| i.optional).collect();
        assert_eq!(optional.len(), 1);
        assert_eq!((optional[0].abs_offset, optional[0].size), (0x102, 3));
        assert!(d.findings.is_empty());
        // idempotent
        assert_eq!(discover_optional(&d.doc, &img, &BuiltinOracle).doc, d.doc);
    }

    #[test]
    fn stops_at_regions_and_reports_undecodable() {
        // xor ; [region 2] ; ret   then   jmp to an undecodable byte
        let code = [0x31, 0xc0, 0x66, 0x90, 0xc3, 0xeb, 0x00, 0x06];
        let img = BinaryImage::from_code(Isa::X64, 0x100, &code, vec![]);
        let gt = doc(
            8,
            vec![
                rec(0x100, &code[..2], CfClass::NonCf),
                rec(0x104, &[0xc3], CfClass::Return),
                rec(0x105, &[0xeb, 0x00], CfClass::UncondDirectJump),
            ],
            vec![NopRegion {
                abs_offset: 0x102,
                size: 2,
            }],
        );
        let d = discover_optional(&gt, &img, &BuiltinOracle);
        assert_eq!(d.doc.instructions().filter(|i| i.optional).count(), 0);
        assert_eq!(
            d.findings,
            vec![Finding::Undecodable {
                offset: 0x107,
                bytes: vec![0x06]
            }]
        );
    }

    #[test]
    fn straddling_decode_is_an_overlap() {
        // jmp into the middle of a recorded instruction
        let code = [0xeb, 0x01, 0xb8, 0x90, 0x90, 0x90, 0x90];
        let img = BinaryImage::from_code(Isa::X64, 0x100, &code, vec![]);
        let gt = doc(
            7,
            vec![
                rec(0x100, &[0xeb, 0x01], CfClass::UncondDirectJump),
                rec(0x102, &code[2..], CfClass::NonCf),
            ],
            vec![],
        );
        let d = discover_optional(&gt, &img, &BuiltinOracle);
        assert!(matches!(d.findings[0], Finding::Overlap { offset: 0x103, .. }));
    }

    #[test]
    fn objdump_line_parsing() {
        let text = "\n0000000000001000 <.data>:\n    1000:\t31 c0                \txor    %eax,%eax\n    1002:\tff e0                \tjmp    *%rax\n    1004:\t06                   \t(bad)\n";
        let parsed = parse_objdump(text);
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].0, 0x1002);
        assert_eq!(parsed[1].1.cf_class, CfClass::IndirectJump);
    }

    #[test]
    fn objdump_continuation_lines_are_merged() {
        let text = "  401000:\t66 2e 0f 1f 84 00 00 \tcs nopw 0x0(%rax,%rax,1)\n  401007:\t00 00 00 \n  40100a:\tc3                   \tret\n";
        let parsed = parse_objdump(text);
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].1.bytes, [0x66, 0x2e, 0x0f, 0x1f, 0x84, 0, 0, 0, 0, 0]);
        assert_eq!(parsed[0].1.size, 10);
        assert_eq!(parsed[1].0, 0x40100a);
    }
}
