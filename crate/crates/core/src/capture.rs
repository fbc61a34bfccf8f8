//! Build capture: a compiler wrapper that snapshots every generated assembly
//! file into an append-only, content-addressed ledger.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::digest::Digest;

pub const LEDGER_ENV: &str = "GTFORGE_LEDGER";
pub const REAL_CC_ENV: &str = "GTFORGE_REAL_CC";
pub const ASM_FLAGS_ENV: &str = "GTFORGE_ASM_FLAGS";
pub const BUILD_DIR_ENV: &str = "GTFORGE_BUILD_DIR";
pub const DEFAULT_ASM_FLAGS: &str = "-save-temps=obj";

const INDEX: &str = "index";
const BLOBS: &str = "blobs";
const LOCK: &str = "lock";

#[derive(Debug, thiserror::Error)]
pub enum CaptureError {
    #[error("environment variable {0} is not set")]
    NotConfigured(&'static str),
    #[error("compiler `{0}` not found")]
    CompilerNotFound(String),
    #[error("corrupt ledger entry {seq} ({rel_path}): {reason}")]
    CorruptLedger { seq: u64, rel_path: String, reason: String },
    #[error("corrupt ledger index line {line}: {reason}")]
    CorruptIndex { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CaptureError + '_ {
    move |source| CaptureError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub seq: u64,
    pub content_hash: Digest,
    pub rel_path: String,
}

/// Ledger layout: `index` with one `<seq> <sha256> <rel_path>` line per
/// entry, `blobs/<sha256>` holding contents, `lock` serializing writers.
#[derive(Debug, Clone)]
pub struct SnapshotLedger {
    root: PathBuf,
}

impl SnapshotLedger {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CaptureError> {
        let root = root.into();
        let blobs = root.join(BLOBS);
        fs::create_dir_all(&blobs).map_err(io_at(&blobs))?;
        Ok(SnapshotLedger { root })
    }

    pub fn from_env() -> Result<Self, CaptureError> {
        let root = std::env::var_os(LEDGER_ENV).ok_or(CaptureError::NotConfigured(LEDGER_ENV))?;
        Self::open(PathBuf::from(root))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blob_path(&self, hash: &Digest) -> PathBuf {
        self.root.join(BLOBS).join(hash.to_hex())
    }

    /// Complete index lines in order. A trailing line without a newline is
    /// an interrupted append and is ignored.
    pub fn entries(&self) -> Result<Vec<LedgerEntry>, CaptureError> {
        let path = self.root.join(INDEX);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_at(&path)(e)),
        };
        parse_index(&text)
    }

    /// Appends one entry, storing the blob first. Callers hold the lock.
    fn append_locked(
        &self,
        index: &mut File,
        seq: u64,
        rel_path: &str,
        bytes: &[u8],
    ) -> Result<LedgerEntry, CaptureError> {
        let hash = Digest::of(bytes);
        let blob = self.blob_path(&hash);
        if !blob.exists() {
            let dir = self.root.join(BLOBS);
            let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_at(&dir))?;
            tmp.write_all(bytes).map_err(io_at(&blob))?;
            tmp.as_file().sync_all().map_err(io_at(&blob))?;
            tmp.persist(&blob).map_err(|e| io_at(&blob)(e.error))?;
        }
        let line = format!("{seq} {hash} {rel_path}\n");
        index.write_all(line.as_bytes()).map_err(io_at(&self.root))?;
        index.sync_data().map_err(io_at(&self.root))?;
        Ok(LedgerEntry {
            seq,
            content_hash: hash,
            rel_path: rel_path.to_string(),
        })
    }

    /// Records `files` (relative path, contents) under the directory lock,
    /// skipping files whose content equals their latest recorded version.
    pub fn record(&self, files: &[(String, Vec<u8>)]) -> Result<Vec<LedgerEntry>, CaptureError> {
        let lock_path = self.root.join(LOCK);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_at(&lock_path))?;
        lock.lock().map_err(io_at(&lock_path))?;

        let index_path = self.root.join(INDEX);
        let mut index = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(&index_path)
            .map_err(io_at(&index_path))?;
        let mut text = String::new();
        index.read_to_string(&mut text).map_err(io_at(&index_path))?;
        let complete = text.rfind('\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            index.set_len(complete as u64).map_err(io_at(&index_path))?;
        }
        index.seek(SeekFrom::End(0)).map_err(io_at(&index_path))?;

        let existing = parse_index(&text[..complete])?;
        let mut latest: HashMap<&str, Digest> = HashMap::new();
        for e in &existing {
            latest.insert(&e.rel_path, e.content_hash);
        }
        let mut seq = existing.last().map_or(0, |e| e.seq);
        let mut added = Vec::new();
        for (rel, bytes) in files {
            if rel.contains('\n') || latest.get(rel.as_str()) == Some(&Digest::of(bytes)) {
                continue;
            }
            seq += 1;
            added.push(self.append_locked(&mut index, seq, rel, bytes)?);
        }
        Ok(added)
    }

    /// Records every assembly file under `build_dir`.
    pub fn snapshot(&self, build_dir: &Path) -> Result<Vec<LedgerEntry>, CaptureError> {
        let files = collect_assembly(build_dir, &self.root)?;
        self.record(&files)
    }

    /// Every recorded version in sequence order, verified against its hash.
    pub fn extract_chronological(&self) -> Result<Vec<(String, Vec<u8>)>, CaptureError> {
        let mut out = Vec::new();
        for e in self.entries()? {
            let corrupt = |reason: String| CaptureError::CorruptLedger {
                seq: e.seq,
                rel_path: e.rel_path.clone(),
                reason,
            };
            let bytes =
                fs::read(self.blob_path(&e.content_hash)).map_err(|err| corrupt(format!("blob unreadable: {err}")))?;
            let actual = Digest::of(&bytes);
            if actual != e.content_hash {
                return Err(corrupt(format!("blob hashes to {actual}")));
            }
            out.push((e.rel_path, bytes));
        }
        Ok(out)
    }
}

fn parse_index(text: &str) -> Result<Vec<LedgerEntry>, CaptureError> {
    let mut out: Vec<LedgerEntry> = Vec::new();
    let complete = text.rfind('\n').map_or("", |i| &text[..i]);
    for (i, line) in complete.lines().enumerate() {
        let bad = |reason: &str| CaptureError::CorruptIndex {
            line: i + 1,
            reason: reason.to_string(),
        };
        let mut parts = line.splitn(3, ' ');
        let (Some(seq), Some(hash), Some(rel)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected `<seq> <sha256> <rel_path>`"));
        };
        let seq: u64 = seq.parse().map_err(|_| bad("bad sequence number"))?;
        let content_hash: Digest = hash.parse().map_err(|_| bad("bad digest"))?;
        if out.last().is_some_and(|e| e.seq >= seq) {
            return Err(bad("sequence numbers not increasing"));
        }
        out.push(LedgerEntry {
            seq,
            content_hash,
            rel_path: rel.to_string(),
        });
    }
    Ok(out)
}

fn is_assembly(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "s")
}

/// `(relative path, contents)` of every `.s` file under `dir`, sorted by
/// path, skipping anything inside `exclude`.
fn collect_assembly(dir: &Path, exclude: &Path) -> Result<Vec<(String, Vec<u8>)>, CaptureError> {
    let exclude = exclude.canonicalize().unwrap_or_else(|_| exclude.to_path_buf());
    let mut out = Vec::new();
    let walker = walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.path().canonicalize().map_or(true, |p| p != exclude));
    for entry in walker {
        let entry = entry.map_err(|e| CaptureError::Io {
            path: dir.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() || !is_assembly(entry.path()) {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).unwrap_or(entry.path());
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let bytes = fs::read(entry.path()).map_err(io_at(entry.path()))?;
        out.push((rel, bytes));
    }
    Ok(out)
}

/// Settings for one wrapper invocation.
#[derive(Debug, Clone)]
pub struct WrapConfig {
    pub real_cc: String,
    pub asm_flags: Vec<String>,
    pub build_dir: PathBuf,
    pub ledger: PathBuf,
}

impl WrapConfig {
    pub fn from_env() -> Result<Self, CaptureError> {
        let ledger = std::env::var_os(LEDGER_ENV).ok_or(CaptureError::NotConfigured(LEDGER_ENV))?;
        let real_cc = std::env::var(REAL_CC_ENV).map_err(|_| CaptureError::NotConfigured(REAL_CC_ENV))?;
        let flags = std::env::var(ASM_FLAGS_ENV).unwrap_or_else(|_| DEFAULT_ASM_FLAGS.to_string());
        let build_dir = match std::env::var_os(BUILD_DIR_ENV) {
            Some(d) => PathBuf::from(d),
            None => std::env::current_dir().map_err(io_at(Path::new(".")))?,
        };
        Ok(WrapConfig {
            real_cc,
            asm_flags: flags.split_whitespace().map(str::to_string).collect(),
            build_dir,
            ledger: PathBuf::from(ledger),
        })
    }
}

/// Runs the real compiler with the assembly-emitting flags added, then
/// snapshots the build directory. Returns the compiler's exit code.
pub fn wrap_compiler(argv: &[String], cfg: &WrapConfig) -> Result<i32, CaptureError> {
    let ledger = SnapshotLedger::open(&cfg.ledger)?;
    let status = Command::new(&cfg.real_cc)
        .args(&cfg.asm_flags)
        .args(argv)
        .status()
        .map_err(|e| match e.kind() {
            io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied => {
                CaptureError::CompilerNotFound(cfg.real_cc.clone())
            }
            _ => io_at(Path::new(&cfg.real_cc))(e),
        })?;
    let added = ledger.snapshot(&cfg.build_dir)?;
    log::debug!("captured {} assembly file(s)", added.len());
    Ok(status.code().unwrap_or(1))
}
