use crate::digest::Digest;
use crate::discovery::parse_objdump;
use crate::prefixcanon::merge_split_claims;

/// One claimed instruction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Claim {
    pub offset: u64,
    pub size: Option<u64>,
    pub bytes: Option<Vec<u8>>,
}

impl Claim {
    pub fn at(offset: u64) -> Self {
        Claim {
            offset,
            size: None,
            bytes: None,
        }
    }

    pub fn with_bytes(offset: u64, bytes: &[u8]) -> Self {
        Claim {
            offset,
            size: Some(bytes.len() as u64),
            bytes: Some(bytes.to_vec()),
        }
    }

    /// Size from the explicit field or the bytes.
    pub fn claimed_len(&self) -> Option<u64> {
        self.size.or_else(|| self.bytes.as_ref().map(|b| b.len() as u64))
    }
}

/// Normalized output of one tool on one binary.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PredictionSet {
    /// From a `#binary <sha256>` header line, when present.
    pub binary_hash: Option<Digest>,
    pub tool: String,
    /// Sorted by offset, offsets unique.
    pub claims: Vec<Claim>,
    /// Prefix-only claims that could not be merged.
    pub dangling_prefixes: Vec<u64>,
}

impl PredictionSet {
    /// Builds a set from raw claims: sorts, merges prefix-only claims and
    /// drops repeated offsets (the first claim wins).
    pub fn from_claims(tool: &str, binary_hash: Option<Digest>, mut claims: Vec<Claim>) -> Self {
        claims.sort_by_key(|c| c.offset);
        let merged = merge_split_claims(claims);
        let mut claims = merged.claims;
        claims.dedup_by_key(|c| c.offset);
        PredictionSet {
            binary_hash,
            tool: tool.to_string(),
            claims,
            dangling_prefixes: merged.dangling,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PredictionError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unknown prediction format `{0}`")]
    UnknownAdapter(String),
}

/// Registered input formats.
pub const ADAPTERS: &[&str] = &["generic", "objdump"];

/// Parses tool output in the named format. Empty output is a valid, empty
/// prediction set.
pub fn normalize_output(raw: &str, adapter: &str) -> Result<PredictionSet, PredictionError> {
    match adapter {
        "generic" => parse_generic(raw),
        "objdump" => Ok(PredictionSet::from_claims(
            "objdump",
            None,
            parse_objdump(raw)
                .into_iter()
                .map(|(off, insn)| Claim::with_bytes(off, &insn.bytes))
                .collect(),
        )),
        other => Err(PredictionError::UnknownAdapter(other.to_string())),
    }
}

/// `<offset-hex> [<size-hex> [<bytes-hex>]]` per line; `#` starts a comment.
/// `#tool <name>` and `#binary <sha256>` comment lines set metadata.
fn parse_generic(raw: &str) -> Result<PredictionSet, PredictionError> {
    let mut tool = String::from("unknown");
    let mut binary_hash = None;
    let mut claims = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let n = i + 1;
        let err = |reason: String| PredictionError::Parse { line: n, reason };
        let (body, comment) = match line.split_once('#') {
            Some((b, c)) => (b, Some(c)),
            None => (line, None),
        };
        if let Some(c) = comment.filter(|_| body.trim().is_empty()) {
            let mut words = c.split_whitespace();
            match (words.next(), words.next()) {
                (Some("tool"), Some(name)) => tool = name.to_string(),
                (Some("binary"), Some(h)) => binary_hash = Some(h.parse().map_err(|e| err(format!("{e}")))?),
                _ => {}
            }
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() > 3 {
            return Err(err("too many fields".into()));
        }
        let hex_field = |s: &str, what: &str| {
            u64::from_str_radix(s.trim_start_matches("0x"), 16).map_err(|_| err(format!("bad {what} `{s}`")))
        };
        let offset = hex_field(fields[0], "offset")?;
        let size = fields.get(1).map(|s| hex_field(s, "size")).transpose()?;
        let bytes = fields
            .get(2)
            .map(|s| hex::decode(s).map_err(|_| err(format!("bad bytes `{s}`"))))
            .transpose()?;
        if size == Some(0) {
            return Err(err("zero size".into()));
        }
        if let (Some(s), Some(b)) = (size, &bytes) {
            if s != b.len() as u64 {
                return Err(err(format!("size {s:x} does not match {} bytes", b.len())));
            }
        }
        claims.push(Claim { offset, size, bytes });
    }
    Ok(PredictionSet::from_claims(&tool, binary_hash, claims))
}
