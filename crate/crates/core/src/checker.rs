//! The final one-to-one correspondence check between reconciled listings and
//! a ground-truth document.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::groundtruth::{GroundTruthDoc, Pair};
use crate::listing::{ListedRecord, ListingDoc, RecordKind};
use crate::prefixcanon::equivalent;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckReport {
    pub ok: bool,
    /// Listing records without a ground-truth counterpart: (function,
    /// section-relative offset).
    pub missing_in_gt: Vec<(String, u64)>,
    /// Ground-truth entries without a listing counterpart: (function,
    /// absolute offset).
    pub missing_in_lst: Vec<(String, u64)>,
    /// (absolute offset, listing bytes, ground-truth bytes).
    pub byte_mismatches: Vec<(u64, Vec<u8>, Vec<u8>)>,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (func, off) in &self.missing_in_gt {
            writeln!(f, "missing-in-gt {func} {off:x}")?;
        }
        for (func, off) in &self.missing_in_lst {
            writeln!(f, "missing-in-lst {func} {off:x}")?;
        }
        for (off, lst, gt) in &self.byte_mismatches {
            writeln!(f, "byte-mismatch {off:x} {} {}", hex::encode(lst), hex::encode(gt))?;
        }
        Ok(())
    }
}

enum Expected<'a> {
    Insn(&'a ListedRecord),
    Region(u64),
}

/// Checks that every listed instruction of every paired function has exactly
/// one non-optional ground-truth record with the same offset, size, prefix
/// set and bytes, that alignment records map onto nop regions, and that the
/// ground truth holds nothing else.
pub fn check_correspondence(final_docs: &[ListingDoc], gt: &GroundTruthDoc, pairs: &[Pair]) -> CheckReport {
    let mut report = CheckReport::default();
    let mut gt_funcs: BTreeMap<(u64, &str), usize> = BTreeMap::new();
    for (i, f) in gt.functions.iter().enumerate() {
        gt_funcs.insert((f.abs_offset, f.name.as_str()), i);
    }
    let mut used_funcs = BTreeSet::new();

    for p in pairs {
        let Some(func) = final_docs
            .get(p.listed.doc)
            .and_then(|d| d.functions.get(p.listed.func))
        else {
            continue;
        };
        let abs_func = p.symbol.abs_offset;
        let mut expected: BTreeMap<u64, (Expected, u64)> = BTreeMap::new();
        for rec in &func.records {
            let Some(delta) = rec.rlt_offset.checked_sub(func.rlt_func) else {
                report.missing_in_gt.push((func.name.clone(), rec.rlt_offset));
                continue;
            };
            let abs = abs_func + delta;
            match rec.kind {
                RecordKind::Insn => {
                    expected.insert(abs, (Expected::Insn(rec), rec.rlt_offset));
                }
                RecordKind::Align if rec.size > 0 => {
                    expected.insert(abs, (Expected::Region(rec.size), rec.rlt_offset));
                }
                _ => {}
            }
        }

        let gt_index = gt_funcs.get(&(abs_func, p.symbol.name.as_str())).copied();
        let mut actual_insns = BTreeMap::new();
        let mut actual_regions = BTreeMap::new();
        if let Some(i) = gt_index {
            used_funcs.insert(i);
            for r in gt.functions[i].instructions.iter().filter(|r| !r.optional) {
                actual_insns.insert(r.abs_offset, r);
            }
            for r in &gt.functions[i].regions {
                actual_regions.insert(r.abs_offset, r.size);
            }
        }

        for (abs, (exp, rlt)) in &expected {
            match exp {
                Expected::Insn(rec) => match actual_insns.remove(abs) {
                    None => report.missing_in_gt.push((func.name.clone(), *rlt)),
                    Some(g) => {
                        let same = g.size == rec.size
                            && (rec.bytes_match(&g.bytes) || equivalent(&rec.bytes, &g.bytes, gt.isa));
                        if !same {
                            report.byte_mismatches.push((*abs, rec.bytes.clone(), g.bytes.clone()));
                        }
                    }
                },
                Expected::Region(size) => match actual_regions.remove(abs) {
                    Some(s) if s == *size => {}
                    Some(_) => {
                        report.missing_in_gt.push((func.name.clone(), *rlt));
                        report.missing_in_lst.push((func.name.clone(), *abs));
                    }
                    None => report.missing_in_gt.push((func.name.clone(), *rlt)),
                },
            }
        }
        for abs in actual_insns.keys().chain(actual_regions.keys()) {
            report.missing_in_lst.push((p.symbol.name.clone(), *abs));
        }
    }

    for (i, f) in gt.functions.iter().enumerate() {
        if used_funcs.contains(&i) {
            continue;
        }
        for r in f.instructions.iter().filter(|r| !r.optional) {
            report.missing_in_lst.push((f.name.clone(), r.abs_offset));
        }
        for r in &f.regions {
            report.missing_in_lst.push((f.name.clone(), r.abs_offset));
        }
    }

    report.missing_in_gt.sort();
    report.missing_in_lst.sort();
    report.byte_mismatches.sort();
    report.ok =
        report.missing_in_gt.is_empty() && report.missing_in_lst.is_empty() && report.byte_mismatches.is_empty();
    report
}
