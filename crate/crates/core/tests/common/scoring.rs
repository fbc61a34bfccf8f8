//! Random scoring instances and a brute-force scorer written directly from
//! the counting rules, sharing no code with the library scorer.

use std::collections::BTreeSet;

use gtforge_core::binfmt::Isa;
use gtforge_core::digest::Digest;
use gtforge_core::evaluator::{Claim, ClaimScope, PredictionSet, RegionMode, ScoreOptions};
use gtforge_core::groundtruth::{FunctionRecord, GroundTruthDoc, InstructionRecord, NopRegion, Provenance};
use gtforge_core::listing::CfClass;
use rand::seq::SliceRandom;
use rand::Rng;

const LEGACY: [u8; 11] = [0x26, 0x2e, 0x36, 0x3e, 0x64, 0x65, 0x66, 0x67, 0xf0, 0xf2, 0xf3];

/// The nop of each length 1..=15 the generator uses.
pub fn nop(len: usize) -> Vec<u8> {
    match len {
        1 => vec![0x90],
        2 => vec![0x66, 0x90],
        3 => vec![0x0f, 0x1f, 0x00],
        4 => vec![0x0f, 0x1f, 0x40, 0x00],
        5 => vec![0x0f, 0x1f, 0x44, 0x00, 0x00],
        6 => vec![0x66, 0x0f, 0x1f, 0x44, 0x00, 0x00],
        7 => vec![0x0f, 0x1f, 0x80, 0, 0, 0, 0],
        8 => vec![0x0f, 0x1f, 0x84, 0, 0, 0, 0, 0],
        n => {
            let mut v = vec![0x66; n - 8];
            v.extend_from_slice(&nop(8));
            v
        }
    }
}

/// Instructions that are not nops in either mode.
const NON_NOPS: &[&[u8]] = &[
    &[0x31, 0xc0],
    &[0xc3],
    &[0x55],
    &[0x89, 0xe5],
    &[0x83, 0xc0, 0x01],
    &[0xe8, 0x10, 0x00, 0x00, 0x00],
    &[0x0f, 0x0b],
    &[0xf3, 0x66, 0xab],
    &[0xf3, 0xab],
    &[0x66, 0x2e, 0x89, 0x03],
    &[0xf0, 0x0f, 0xb1, 0x11],
    &[0xcc],
    &[0x8b, 0x44, 0x24, 0x08],
    &[0xc7, 0x45, 0xfc, 0x00, 0x00, 0x00, 0x00],
];

fn split_legacy(b: &[u8]) -> (BTreeSet<u8>, &[u8]) {
    let n = b.iter().take_while(|x| LEGACY.contains(x)).count();
    (b[..n].iter().copied().collect(), &b[n..])
}

fn same_instruction(a: &[u8], b: &[u8]) -> bool {
    if a == b {
        return true;
    }
    let (pa, ca) = split_legacy(a);
    let (pb, cb) = split_legacy(b);
    !ca.is_empty() && !cb.is_empty() && pa == pb && ca == cb
}

fn permute_prefixes(b: &[u8], rng: &mut impl Rng) -> Vec<u8> {
    let n = b.iter().take_while(|x| LEGACY.contains(x)).count();
    let mut p = b[..n].to_vec();
    p.shuffle(rng);
    p.extend_from_slice(&b[n..]);
    p
}

pub struct Instance {
    pub gt: GroundTruthDoc,
    pub preds: PredictionSet,
    pub opts: ScoreOptions,
}

enum Elem {
    Insn(u64, Vec<u8>, bool),
    Region(u64, u64),
}

/// A random ground truth (at most 200 records) with a random prediction set
/// (at most 200 claims) exercising every counting rule.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let isa = if rng.gen_bool(0.7) { Isa::X64 } else { Isa::X86 };
    let n = rng.gen_range(0..=120);
    let mut elems = Vec::new();
    let mut cursor = 0x1000u64;
    for _ in 0..n {
        if rng.gen_bool(0.05) {
            cursor += rng.gen_range(1..4);
        }
        if rng.gen_bool(0.2) {
            let size = rng.gen_range(1..=20);
            elems.push(Elem::Region(cursor, size));
            cursor += size;
        } else {
            let bytes = if rng.gen_bool(0.1) {
                nop(rng.gen_range(1..=15))
            } else {
                NON_NOPS.choose(rng).unwrap().to_vec()
            };
            let len = bytes.len() as u64;
            elems.push(Elem::Insn(cursor, bytes, rng.gen_bool(0.15)));
            cursor += len;
        }
    }

    let mut claims: Vec<Claim> = Vec::new();
    for e in &elems {
        match e {
            Elem::Insn(off, bytes, _) => {
                let r: f64 = rng.gen();
                let len = bytes.len() as u64;
                if r < 0.25 {
                    claims.push(Claim::with_bytes(*off, bytes));
                } else if r < 0.35 {
                    claims.push(Claim::with_bytes(*off, &permute_prefixes(bytes, rng)));
                } else if r < 0.45 {
                    claims.push(Claim {
                        offset: *off,
                        size: Some(len),
                        bytes: None,
                    });
                } else if r < 0.55 {
                    claims.push(Claim::at(*off));
                } else if r < 0.62 {
                    claims.push(Claim {
                        offset: *off,
                        size: Some(len + 1),
                        bytes: None,
                    });
                } else if r < 0.68 {
                    claims.push(Claim::with_bytes(*off, &vec![0xcc; bytes.len()]));
                } else if r < 0.75 && len > 1 {
                    claims.push(Claim::at(off + rng.gen_range(1..len)));
                } else if r < 0.8 {
                    let n = bytes.iter().take_while(|x| LEGACY.contains(x)).count();
                    if n > 0 && n < bytes.len() {
                        claims.push(Claim::with_bytes(*off, &bytes[..n]));
                        claims.push(Claim::with_bytes(off + n as u64, &bytes[n..]));
                    }
                }
            }
            Elem::Region(off, size) => {
                let r: f64 = rng.gen();
                let end = off + size;
                if r < 0.5 {
                    let mut at = *off;
                    if isa == Isa::X86 && *size >= 2 && rng.gen_bool(0.3) {
                        claims.push(Claim::with_bytes(at, &[0xeb, (size - 2) as u8]));
                        at += 2;
                    }
                    let break_one = rng.gen_bool(0.2);
                    while at < end {
                        let len = rng.gen_range(1..=(end - at).min(15));
                        let mut bytes = nop(len as usize);
                        if break_one && rng.gen_bool(0.3) {
                            bytes = vec![0xcc; len as usize];
                        }
                        match rng.gen_range(0..10) {
                            0 => claims.push(Claim::at(at)),
                            1 => claims.push(Claim {
                                offset: at,
                                size: Some(len),
                                bytes: None,
                            }),
                            2 if break_one => {}
                            _ => claims.push(Claim::with_bytes(at, &bytes)),
                        }
                        at += len;
                    }
                } else if r < 0.6 {
                    claims.push(Claim::with_bytes(*off, &nop((*size).min(15) as usize)));
                } else if r < 0.7 {
                    claims.push(Claim::at(off + rng.gen_range(0..*size)));
                }
            }
        }
    }
    for _ in 0..rng.gen_range(0..6) {
        let off = rng.gen_range(0xff0..=cursor + 16);
        claims.push(match rng.gen_range(0..3) {
            0 => Claim::at(off),
            1 => Claim::with_bytes(off, NON_NOPS.choose(rng).unwrap()),
            _ => Claim::with_bytes(off, &nop(rng.gen_range(1..=15))),
        });
    }
    claims.shuffle(rng);
    claims.truncate(200);

    let mut functions = Vec::new();
    let cut = rng.gen_range(0..=elems.len());
    for (i, part) in [&elems[..cut], &elems[cut..]].into_iter().enumerate() {
        let Some(first) = part.first() else { continue };
        let start = match first {
            Elem::Insn(o, ..) | Elem::Region(o, _) => *o,
        };
        let mut f = FunctionRecord {
            name: format!("f{i}"),
            abs_offset: start,
            extent: None,
            instructions: Vec::new(),
            regions: Vec::new(),
        };
        for e in part {
            match e {
                Elem::Insn(o, b, opt) => {
                    f.instructions
                        .push(InstructionRecord::new(*o, b.clone(), isa, *opt, CfClass::NonCf))
                }
                Elem::Region(o, s) => f.regions.push(NopRegion {
                    abs_offset: *o,
                    size: *s,
                }),
            }
        }
        functions.push(f);
    }
    let gt = GroundTruthDoc {
        binary_hash: Digest::default(),
        isa,
        functions,
        provenance: Provenance::new("gcc", "-O2"),
    };
    let regions = if rng.gen_bool(0.8) {
        RegionMode::Count
    } else {
        RegionMode::Ignore
    };
    let scope = if rng.gen_bool(0.5) {
        ClaimScope::Functions
    } else {
        ClaimScope::All
    };
    Instance {
        gt,
        preds: PredictionSet::from_claims("random", None, claims),
        opts: ScoreOptions { regions, scope },
    }
}

fn is_nop(bytes: &[u8]) -> bool {
    (1..=15).any(|l| nop(l) == bytes)
}

fn claim_len(claims: &[&Claim], i: usize, end: u64) -> u64 {
    let c = claims[i];
    c.size
        .or(c.bytes.as_ref().map(|b| b.len() as u64))
        .unwrap_or_else(|| claims.get(i + 1).map_or(end, |n| n.offset) - c.offset)
}

/// Paints the region with the claims: tiled iff every byte is covered exactly
/// once, nothing spills past the end and every claim with bytes is a nop (or,
/// in 32-bit code, a short jump to the region end).
fn painted(start: u64, end: u64, claims: &[&Claim], isa: Isa) -> bool {
    if claims.is_empty() {
        return false;
    }
    let mut paint = vec![0u32; (end - start) as usize];
    for i in 0..claims.len() {
        let c = claims[i];
        let len = claim_len(claims, i, end);
        if len == 0 || c.offset + len > end {
            return false;
        }
        for b in c.offset..c.offset + len {
            paint[(b - start) as usize] += 1;
        }
        if let Some(bytes) = &c.bytes {
            let jump = isa == Isa::X86
                && bytes.len() == 2
                && bytes[0] == 0xeb
                && (c.offset as i64 + 2 + bytes[1] as i8 as i64) == end as i64;
            if !is_nop(bytes) && !jump {
                return false;
            }
        }
    }
    paint.iter().all(|&p| p == 1)
}

/// `(tp, fp, fn)` by direct enumeration.
pub fn brute_force(gt: &GroundTruthDoc, preds: &PredictionSet, opts: ScoreOptions) -> (u64, u64, u64) {
    let claims = &preds.claims;
    let mut consumed = vec![false; claims.len()];
    if opts.scope == ClaimScope::Functions {
        for (i, c) in claims.iter().enumerate() {
            consumed[i] = !gt.functions.iter().any(|f| {
                let ends = f.instructions.iter().map(|r| r.abs_offset + r.bytes.len() as u64);
                let end = ends
                    .chain(f.regions.iter().map(|r| r.abs_offset + r.size))
                    .max()
                    .unwrap();
                (f.abs_offset..end).contains(&c.offset)
            });
        }
    }
    let (mut tp, mut fn_) = (0u64, 0u64);
    for f in &gt.functions {
        for r in &f.instructions {
            let at: Vec<usize> = (0..claims.len())
                .filter(|&i| !consumed[i] && claims[i].offset == r.abs_offset)
                .collect();
            assert!(at.len() <= 1, "claim offsets are unique");
            if r.optional {
                for i in at {
                    consumed[i] = true;
                }
                continue;
            }
            let hit = at.first().is_some_and(|&i| {
                let c = &claims[i];
                match (&c.bytes, c.size) {
                    (Some(b), _) => same_instruction(b, &r.bytes),
                    (None, Some(s)) => s == r.size,
                    (None, None) => true,
                }
            });
            if hit {
                tp += 1;
                consumed[at[0]] = true;
            } else {
                fn_ += 1;
            }
        }
    }
    for f in &gt.functions {
        for reg in &f.regions {
            let (start, end) = (reg.abs_offset, reg.abs_offset + reg.size);
            let inside: Vec<usize> = (0..claims.len())
                .filter(|&i| !consumed[i] && claims[i].offset >= start && claims[i].offset < end)
                .collect();
            if opts.regions == RegionMode::Ignore {
                for i in inside {
                    consumed[i] = true;
                }
                continue;
            }
            let refs: Vec<&Claim> = inside.iter().map(|&i| &claims[i]).collect();
            if painted(start, end, &refs, gt.isa) {
                tp += 1;
                for i in inside {
                    consumed[i] = true;
                }
            } else {
                fn_ += 1;
            }
        }
    }
    let fp = consumed.iter().filter(|c| !**c).count() as u64;
    (tp, fp, fn_)
}
