//! Coarse prefix canonicalization. Leading legacy prefixes form an unordered
//! set; REX bytes stay with the core instruction. A disassembler claim made of
//! prefixes alone is folded into the claim that follows it.

use std::fmt;
use std::str::FromStr;

use crate::binfmt::Isa;
use crate::evaluator::Claim;
use crate::x86::{is_legacy_prefix, LEGACY_PREFIXES};

/// A set of legacy prefix bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PrefixSet(u16);

impl PrefixSet {
    pub const EMPTY: PrefixSet = PrefixSet(0);

    fn bit(b: u8) -> Option<u16> {
        LEGACY_PREFIXES.iter().position(|&p| p == b).map(|i| 1 << i)
    }

    /// Inserts `b`; returns false when `b` is not a legacy prefix.
    pub fn insert(&mut self, b: u8) -> bool {
        match Self::bit(b) {
            Some(bit) => {
                self.0 |= bit;
                true
            }
            None => false,
        }
    }

    pub fn contains(&self, b: u8) -> bool {
        Self::bit(b).is_some_and(|bit| self.0 & bit != 0)
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    /// Members in ascending byte order.
    pub fn bytes(&self) -> Vec<u8> {
        LEGACY_PREFIXES
            .iter()
            .enumerate()
            .filter(|(i, _)| self.0 & (1 << i) != 0)
            .map(|(_, &b)| b)
            .collect()
    }
}

impl FromIterator<u8> for PrefixSet {
    fn from_iter<T: IntoIterator<Item = u8>>(iter: T) -> Self {
        let mut s = PrefixSet::EMPTY;
        for b in iter {
            s.insert(b);
        }
        s
    }
}

/// `-` for the empty set, else the sorted members as lowercase hex.
impl fmt::Display for PrefixSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            f.write_str("-")
        } else {
            f.write_str(&hex::encode(self.bytes()))
        }
    }
}

impl FromStr for PrefixSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "-" {
            return Ok(PrefixSet::EMPTY);
        }
        let bytes = hex::decode(s).map_err(|e| format!("bad prefix set `{s}`: {e}"))?;
        let mut set = PrefixSet::EMPTY;
        let mut last = None;
        for b in bytes {
            if !set.insert(b) {
                return Err(format!("{b:02x} is not a legacy prefix"));
            }
            if last.is_some_and(|l| l >= b) {
                return Err(format!("prefix set `{s}` is not sorted"));
            }
            last = Some(b);
        }
        Ok(set)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PrefixError {
    #[error("empty byte sequence")]
    Empty,
    #[error("byte sequence consists solely of prefixes")]
    AllPrefixes,
}

/// Splits the maximal leading run of legacy prefixes from the core bytes.
pub fn split_prefixes(bytes: &[u8], isa: Isa) -> Result<(PrefixSet, &[u8]), PrefixError> {
    // REX bytes are never legacy prefixes, so the split is the same for both modes
    let _ = isa;
    if bytes.is_empty() {
        return Err(PrefixError::Empty);
    }
    let n = bytes.iter().take_while(|&&b| is_legacy_prefix(b)).count();
    if n == bytes.len() {
        return Err(PrefixError::AllPrefixes);
    }
    Ok((bytes[..n].iter().copied().collect(), &bytes[n..]))
}

/// True when the two encodings are identical up to prefix order and
/// repetition.
pub fn equivalent(a: &[u8], b: &[u8], isa: Isa) -> bool {
    if a == b {
        return true;
    }
    match (split_prefixes(a, isa), split_prefixes(b, isa)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// Whether the instruction carries a 66/f2/f3 prefix in front of a two-byte
/// opcode, where the prefix may be a mandatory opcode modifier.
pub fn mandatory_prefix_suspect(bytes: &[u8], isa: Isa) -> bool {
    match split_prefixes(bytes, isa) {
        Ok((set, core)) => {
            let core = match core.first() {
                Some(b) if crate::x86::is_rex(*b, isa) => &core[1..],
                _ => core,
            };
            (set.contains(0x66) || set.contains(0xf2) || set.contains(0xf3)) && core.first() == Some(&0x0f)
        }
        Err(_) => false,
    }
}

fn is_prefix_only(claim: &Claim) -> bool {
    claim
        .bytes
        .as_deref()
        .is_some_and(|b| !b.is_empty() && b.iter().all(|&x| is_legacy_prefix(x)))
}

/// Result of [`merge_split_claims`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutcome {
    pub claims: Vec<Claim>,
    /// Offsets of prefix-only claims with no adjacent successor. These
    /// claims are kept unchanged.
    pub dangling: Vec<u64>,
}

/// Folds every prefix-only claim into the adjacent claim that follows it.
/// `claims` must be sorted by offset.
pub fn merge_split_claims(claims: Vec<Claim>) -> MergeOutcome {
    let mut out: Vec<Claim> = Vec::with_capacity(claims.len());
    let mut dangling = Vec::new();
    let mut pending: Option<Claim> = None;
    for claim in claims {
        if let Some(p) = pending.take() {
            let p_bytes = p.bytes.as_deref().unwrap_or_default();
            if p.offset + p_bytes.len() as u64 == claim.offset {
                let mut merged_bytes = p_bytes.to_vec();
                let bytes = claim.bytes.map(|b| {
                    merged_bytes.extend(b);
                    merged_bytes
                });
                let merged = Claim {
                    offset: p.offset,
                    size: claim.size.map(|s| s + p_bytes.len() as u64),
                    bytes,
                };
                if is_prefix_only(&merged) {
                    pending = Some(merged);
                } else {
                    out.push(merged);
                }
                continue;
            }
            dangling.push(p.offset);
            out.push(p);
        }
        if is_prefix_only(&claim) {
            pending = Some(claim);
        } else {
            out.push(claim);
        }
    }
    if let Some(p) = pending {
        dangling.push(p.offset);
        out.push(p);
    }
    MergeOutcome { claims: out, dangling }
}
