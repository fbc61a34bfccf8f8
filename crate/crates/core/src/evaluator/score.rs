use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use super::predictions::{Claim, PredictionSet};
use crate::binfmt::{BinaryImage, Isa};
use crate::digest::Digest;
use crate::discovery::DecodeOracle;
use crate::groundtruth::{GroundTruthDoc, InstructionRecord, NopRegion};
use crate::prefixcanon::equivalent;
use crate::x86::{is_padding_jump, known_nop_len};

/// How nop regions enter the counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegionMode {
    /// A tiled region is one TP, an untiled one is one FN.
    #[default]
    Count,
    /// Regions and the claims inside them are left out entirely.
    Ignore,
}

impl FromStr for RegionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "count" => Ok(RegionMode::Count),
            "ignore" => Ok(RegionMode::Ignore),
            o => Err(format!("unknown region mode `{o}` (expected count or ignore)")),
        }
    }
}

/// Which claims take part in scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClaimScope {
    /// Claims starting inside a ground-truth function. Code without ground
    /// truth (startup code, statically linked libraries) is not scored.
    #[default]
    Functions,
    /// Every claim; those outside all functions are false positives.
    All,
}

impl FromStr for ClaimScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "functions" => Ok(ClaimScope::Functions),
            "all" => Ok(ClaimScope::All),
            o => Err(format!("unknown scope `{o}` (expected functions or all)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreOptions {
    pub regions: RegionMode,
    pub scope: ClaimScope,
}

impl From<RegionMode> for ScoreOptions {
    fn from(regions: RegionMode) -> Self {
        ScoreOptions {
            regions,
            scope: ClaimScope::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimOutcome {
    Tp,
    Fp,
    /// At the offset of an optional instruction.
    ExcludedOptional,
    /// Part of a correct tiling of a nop region.
    RegionTiling,
    /// Inside a region while regions are ignored.
    RegionIgnored,
    /// Outside every ground-truth function.
    OutOfScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BinaryScore {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub excluded_optional: u64,
    pub region_matches: u64,
    pub region_misses: u64,
    pub out_of_scope: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `tp + fp` was zero; precision is reported as 0.
    pub precision_undefined: bool,
}

impl BinaryScore {
    /// Fills in the ratios from the counts.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let mut s = BinaryScore {
            tp,
            fp,
            fn_,
            ..Default::default()
        };
        s.finish();
        s
    }

    fn finish(&mut self) {
        self.precision_undefined = self.tp + self.fp == 0;
        self.precision = ratio(self.tp, self.tp + self.fp);
        self.recall = ratio(self.tp, self.tp + self.fn_);
        self.f1 = if self.precision > 0.0 && self.recall > 0.0 {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        } else {
            0.0
        };
    }

    /// Ground-truth instructions (including regions when counted).
    pub fn gt_instructions(&self) -> u64 {
        self.tp + self.fn_
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("predictions are for binary {predicted}, ground truth is for {expected}")]
    HashMismatch { expected: Digest, predicted: Digest },
    #[error("decoder cannot decode the instruction at {offset:#x}")]
    OracleInsufficient { offset: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetailedScore {
    pub score: BinaryScore,
    /// Parallel to the prediction set's claims.
    pub claims: Vec<ClaimOutcome>,
    /// Offsets of non-optional records left unmatched.
    pub missed: Vec<u64>,
}

fn claim_agrees(claim: &Claim, rec: &InstructionRecord, isa: Isa) -> bool {
    match (&claim.bytes, claim.size) {
        (Some(b), _) => equivalent(b, &rec.bytes, isa),
        (None, Some(s)) => s == rec.size,
        (None, None) => true,
    }
}

/// Whether the claims (sorted, all starting inside `region`) tile it exactly
/// with known nops. Claims without bytes are sized by the distance to the
/// next claim and are not checked for nop-ness.
fn tiles(region: &NopRegion, claims: &[&Claim], isa: Isa) -> bool {
    if claims.is_empty() {
        return false;
    }
    let end = region.end();
    let mut cursor = region.abs_offset;
    for (i, c) in claims.iter().enumerate() {
        if c.offset != cursor {
            return false;
        }
        let next = claims.get(i + 1).map_or(end, |n| n.offset);
        let len = c.claimed_len().unwrap_or(next - c.offset);
        if len == 0 {
            return false;
        }
        if let Some(b) = &c.bytes {
            let nop = known_nop_len(b, isa) == Some(b.len()) || (!isa.is_64() && is_padding_jump(b, c.offset, end));
            if !nop {
                return false;
            }
        }
        cursor += len;
    }
    cursor == end
}

/// Scores one prediction set with per-claim outcomes.
pub fn score_detailed(
    gt: &GroundTruthDoc,
    preds: &PredictionSet,
    opts: impl Into<ScoreOptions>,
) -> Result<DetailedScore, ScoreError> {
    let opts = opts.into();
    if let Some(h) = preds.binary_hash {
        if h != gt.binary_hash {
            return Err(ScoreError::HashMismatch {
                expected: gt.binary_hash,
                predicted: h,
            });
        }
    }
    let isa = gt.isa;
    let mut required: BTreeMap<u64, (&InstructionRecord, bool)> = BTreeMap::new();
    let mut optional: BTreeSet<u64> = BTreeSet::new();
    for r in gt.instructions() {
        if r.optional {
            optional.insert(r.abs_offset);
        } else {
            required.insert(r.abs_offset, (r, false));
        }
    }

    let mut outcomes: Vec<Option<ClaimOutcome>> = vec![None; preds.claims.len()];
    let mut s = BinaryScore::default();
    if opts.scope == ClaimScope::Functions {
        let spans: BTreeMap<u64, u64> = gt.functions.iter().map(|f| (f.abs_offset, f.end())).collect();
        for (i, c) in preds.claims.iter().enumerate() {
            let inside = spans
                .range(..=c.offset)
                .next_back()
                .is_some_and(|(_, &end)| c.offset < end);
            if !inside {
                outcomes[i] = Some(ClaimOutcome::OutOfScope);
                s.out_of_scope += 1;
            }
        }
    }
    for (i, c) in preds.claims.iter().enumerate() {
        if outcomes[i].is_some() {
            continue;
        }
        if let Some((rec, hit)) = required.get_mut(&c.offset) {
            if !*hit && claim_agrees(c, rec, isa) {
                *hit = true;
                outcomes[i] = Some(ClaimOutcome::Tp);
                s.tp += 1;
            }
        } else if optional.contains(&c.offset) {
            outcomes[i] = Some(ClaimOutcome::ExcludedOptional);
            s.excluded_optional += 1;
        }
    }

    for region in gt.regions() {
        let lo = preds.claims.partition_point(|c| c.offset < region.abs_offset);
        let hi = preds.claims.partition_point(|c| c.offset < region.end());
        let inside: Vec<usize> = (lo..hi).filter(|&i| outcomes[i].is_none()).collect();
        if opts.regions == RegionMode::Ignore {
            for i in inside {
                outcomes[i] = Some(ClaimOutcome::RegionIgnored);
            }
            continue;
        }
        let claims: Vec<&Claim> = inside.iter().map(|&i| &preds.claims[i]).collect();
        if tiles(region, &claims, isa) {
            s.region_matches += 1;
            for i in inside {
                outcomes[i] = Some(ClaimOutcome::RegionTiling);
            }
        } else {
            s.region_misses += 1;
        }
    }

    let claims: Vec<ClaimOutcome> = outcomes.into_iter().map(|o| o.unwrap_or(ClaimOutcome::Fp)).collect();
    s.fp = claims.iter().filter(|o| **o == ClaimOutcome::Fp).count() as u64;
    let missed: Vec<u64> = required.iter().filter(|(_, (_, hit))| !hit).map(|(o, _)| *o).collect();
    s.fn_ = missed.len() as u64 + s.region_misses;
    s.tp += s.region_matches;
    s.finish();
    Ok(DetailedScore {
        score: s,
        claims,
        missed,
    })
}

/// Scores one prediction set.
pub fn score(
    gt: &GroundTruthDoc,
    preds: &PredictionSet,
    opts: impl Into<ScoreOptions>,
) -> Result<BinaryScore, ScoreError> {
    score_detailed(gt, preds, opts).map(|d| d.score)
}

/// False positives whose bytes in the binary are a known nop encoding.
pub fn count_nop_false_positives(
    gt: &GroundTruthDoc,
    preds: &PredictionSet,
    img: &BinaryImage,
    opts: impl Into<ScoreOptions>,
) -> Result<u64, ScoreError> {
    let detailed = score_detailed(gt, preds, opts)?;
    let mut n = 0;
    for (c, o) in preds.claims.iter().zip(&detailed.claims) {
        if *o != ClaimOutcome::Fp {
            continue;
        }
        let window = img.read_up_to(c.offset, crate::x86::MAX_INSN_LEN as u64);
        match (known_nop_len(window, gt.isa), c.claimed_len()) {
            (Some(l), Some(want)) if l as u64 == want => n += 1,
            (Some(_), None) => n += 1,
            _ => {}
        }
    }
    Ok(n)
}

/// Linearly sweeps every function range of `gt` with `oracle` and reports
/// whether the sweep reproduces the ground truth exactly.
pub fn linear_sweep_check(
    gt: &GroundTruthDoc,
    img: &BinaryImage,
    oracle: &dyn DecodeOracle,
) -> Result<bool, ScoreError> {
    let mut claims = Vec::new();
    for f in &gt.functions {
        let end = f.end();
        let mut pos = f.abs_offset;
        while pos < end {
            let insn = oracle
                .decode_at(img, pos)
                .ok_or(ScoreError::OracleInsufficient { offset: pos })?;
            claims.push(Claim::with_bytes(pos, &insn.bytes));
            pos += insn.size as u64;
        }
    }
    let preds = PredictionSet::from_claims(oracle.name(), None, claims);
    let s = score(gt, &preds, RegionMode::Count)?;
    Ok(s.fp == 0 && s.fn_ == 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundtruth::{FunctionRecord, Provenance};
    use crate::listing::CfClass;

    fn gt(insns: &[(u64, &[u8], bool)], regions: &[(u64, u64)]) -> GroundTruthDoc {
        GroundTruthDoc {
            binary_hash: Digest::default(),
            isa: Isa::X64,
            provenance: Provenance::default(),
            functions: vec![FunctionRecord {
                name: "f".into(),
                abs_offset: 0,
                extent: None,
                instructions: insns
                    .iter()
                    .map(|(o, b, opt)| InstructionRecord::new(*o, b.to_vec(), Isa::X64, *opt, CfClass::NonCf))
                    .collect(),
                regions: regions
                    .iter()
                    .map(|&(o, s)| NopRegion { abs_offset: o, size: s })
                    .collect(),
            }],
        }
    }

    fn preds(claims: Vec<Claim>) -> PredictionSet {
        PredictionSet::from_claims("t", None, claims)
    }

    #[test]
    fn perfect_output() {
        let g = gt(&[(0, &[0x90], false), (1, &[0xc3], false)], &[]);
        let s = score(&g, &preds(vec![Claim::at(0), Claim::at(1)]), RegionMode::Count).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (2, 0, 0));
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn region_tiled_by_one_nop() {
        let g = gt(&[(0, &[0xc3], false)], &[(1, 4)]);
        let p = preds(vec![Claim::at(0), Claim::with_bytes(1, &[0x0f, 0x1f, 0x40, 0x00])]);
        let s = score(&g, &p, RegionMode::Count).unwrap();
        assert_eq!((s.region_matches, s.tp, s.fp, s.fn_), (1, 2, 0, 0));
        let s = score(&g, &p, RegionMode::Ignore).unwrap();
        assert_eq!((s.region_matches, s.tp, s.fp, s.fn_), (0, 1, 0, 0));
    }

    #[test]
    fn untiled_region_is_a_miss() {
        let g = gt(&[(0, &[0xc3], false)], &[(1, 4)]);
        // a 3-byte nop leaves one byte uncovered
        let p = preds(vec![Claim::at(0), Claim::with_bytes(1, &[0x0f, 0x1f, 0x00])]);
        let s = score(&g, &p, RegionMode::Count).unwrap();
        assert_eq!((s.region_misses, s.tp, s.fp, s.fn_), (1, 1, 1, 1));
        // not a nop
        let p = preds(vec![Claim::at(0), Claim::with_bytes(1, &[0x8d, 0x74, 0x26, 0x00])]);
        assert_eq!(score(&g, &p, RegionMode::Count).unwrap().region_misses, 1);
        // no claims at all
        let s = score(&g, &preds(vec![Claim::at(0)]), RegionMode::Count).unwrap();
        assert_eq!((s.tp, s.fn_), (1, 1));
    }

    const ALL: ScoreOptions = ScoreOptions {
        regions: RegionMode::Count,
        scope: ClaimScope::All,
    };

    #[test]
    fn nine_of_ten() {
        let code: Vec<(u64, &[u8], bool)> = (0..10).map(|i| (i, &[0x90u8][..], false)).collect();
        let g = gt(&code, &[]);
        let mut claims: Vec<Claim> = (0..9).map(Claim::at).collect();
        claims.push(Claim::at(0x40));
        let s = score(&g, &preds(claims.clone()), ALL).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (9, 1, 1));
        assert!((s.precision - 0.9).abs() < 1e-15 && (s.recall - 0.9).abs() < 1e-15);
        let s = score(&g, &preds(claims), RegionMode::Count).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_, s.out_of_scope), (9, 0, 1, 1));
    }

    #[test]
    fn optional_claims_are_excluded() {
        let g = gt(&[(0, &[0x90], false), (1, &[0x0f, 0x1f, 0x00], true)], &[]);
        let s = score(&g, &preds(vec![Claim::at(0), Claim::at(1)]), RegionMode::Count).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_, s.excluded_optional), (1, 0, 0, 1));
        let s = score(&g, &preds(vec![Claim::at(0)]), RegionMode::Count).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (1, 0, 0));
    }

    #[test]
    fn size_and_bytes_must_agree() {
        let g = gt(&[(0, &[0x66, 0xf3, 0xab], false)], &[]);
        let ok = preds(vec![Claim::with_bytes(0, &[0xf3, 0x66, 0xab])]);
        assert_eq!(score(&g, &ok, RegionMode::Count).unwrap().tp, 1);
        let bad = preds(vec![Claim {
            offset: 0,
            size: Some(2),
            bytes: None,
        }]);
        let s = score(&g, &bad, RegionMode::Count).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (0, 1, 1));
    }

    #[test]
    fn empty_predictions() {
        let g = gt(&[(0, &[0x90], false)], &[]);
        let s = score(&g, &preds(vec![]), RegionMode::Count).unwrap();
        assert!(s.precision_undefined);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hash_mismatch() {
        let g = gt(&[], &[]);
        let p = PredictionSet::from_claims("t", Some(Digest::of(b"other")), vec![]);
        assert!(matches!(
            score(&g, &p, RegionMode::Count),
            Err(ScoreError::HashMismatch { .. })
        ));
    }

    #[test]
    fn nop_false_positives() {
        let code = [0xc3, 0x0f, 0x1f, 0x00, 0x31, 0xc0];
        let img = BinaryImage::from_code(Isa::X64, 0, &code, vec![]);
        let g = gt(&[(0, &[0xc3], false)], &[]);
        assert_eq!(
            count_nop_false_positives(&g, &preds(vec![Claim::at(0)]), &img, ALL).unwrap(),
            0
        );
        let p = preds(vec![Claim::at(0), Claim::at(1)]);
        assert_eq!(count_nop_false_positives(&g, &p, &img, ALL).unwrap(), 1);
        assert_eq!(count_nop_false_positives(&g, &p, &img, RegionMode::Count).unwrap(), 0);
        let p = preds(vec![Claim::at(0), Claim::at(4)]);
        assert_eq!(count_nop_false_positives(&g, &p, &img, ALL).unwrap(), 0);
    }
}
