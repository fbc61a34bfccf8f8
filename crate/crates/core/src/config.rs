//! Per-binary project configuration: one `key = value` per line, `#`
//! comments. Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::binfmt::Isa;

/// Optimization flags accepted for the Linux profile.
pub const LINUX_OPTFLAGS: &[&str] = &["-O0", "-O1", "-O2", "-O3", "-Ofast", "-Os"];

const KEYS: &[&str] = &[
    "binary",
    "isa",
    "os",
    "compiler",
    "optflag",
    "project",
    "assembler_cmd",
    "sources",
    "ledger",
    "decoder",
    "output",
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Syntax { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

/// Instruction decoder used for optional-instruction discovery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecoderChoice {
    Builtin,
    /// An objdump-compatible program.
    Objdump(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectConfig {
    pub path: PathBuf,
    pub binary: PathBuf,
    pub isa: Option<Isa>,
    pub os: String,
    pub compiler: String,
    pub optflag: String,
    pub project: String,
    pub assembler_cmd: Option<String>,
    /// Explicit assembly sources, in order.
    pub sources: Vec<PathBuf>,
    /// Capture ledger whose assembly versions follow the explicit sources.
    pub ledger: Option<PathBuf>,
    pub decoder: DecoderChoice,
    pub output: PathBuf,
}

impl ProjectConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// Parses config text; `path` locates relative paths and names errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let syntax = |reason: String| ConfigError::Syntax {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let line = raw.split_once('#').map_or(raw, |(b, _)| b).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| syntax("expected `key = value`".into()))?;
            let k = k.trim();
            let key = KEYS
                .iter()
                .find(|&&known| known == k)
                .ok_or_else(|| syntax(format!("unknown key `{k}`")))?;
            if kv.insert(key, v.trim().to_string()).is_some() {
                return Err(syntax(format!("duplicate key `{k}`")));
            }
        }
        let invalid = |reason: String| ConfigError::Invalid {
            path: path.to_path_buf(),
            reason,
        };
        let resolve = |p: &str| base.join(p);

        let binary = kv
            .get("binary")
            .map(|b| resolve(b))
            .ok_or_else(|| invalid("missing `binary`".into()))?;
        let isa = kv
            .get("isa")
            .map(|s| s.parse::<Isa>().map_err(|e| invalid(e.to_string())))
            .transpose()?;
        let os = kv.get("os").cloned().unwrap_or_else(|| "linux".into());
        let optflag = kv.get("optflag").cloned().unwrap_or_else(|| "unknown".into());
        if os == "linux" && optflag != "unknown" && !LINUX_OPTFLAGS.contains(&optflag.as_str()) {
            return Err(invalid(format!(
                "optflag `{optflag}` is not one of {}",
                LINUX_OPTFLAGS.join(", ")
            )));
        }
        let sources: Vec<PathBuf> = kv
            .get("sources")
            .map(|s| s.split_whitespace().map(resolve).collect())
            .unwrap_or_default();
        let ledger = kv.get("ledger").map(|l| resolve(l));
        if sources.is_empty() && ledger.is_none() {
            return Err(invalid("need `sources` or `ledger`".into()));
        }
        let decoder = match kv.get("decoder").map(String::as_str) {
            None | Some("objdump") => DecoderChoice::Objdump("objdump".into()),
            Some("builtin") => DecoderChoice::Builtin,
            Some(other) => DecoderChoice::Objdump(other.to_string()),
        };
        let output = match kv.get("output") {
            Some(o) => resolve(o),
            None => {
                let mut o = binary.clone().into_os_string();
                o.push(".gtf");
                PathBuf::from(o)
            }
        };
        Ok(ProjectConfig {
            path: path.to_path_buf(),
            binary,
            isa,
            os,
            compiler: kv.get("compiler").cloned().unwrap_or_else(|| "unknown".into()),
            optflag,
            project: kv.get("project").cloned().unwrap_or_else(|| "unknown".into()),
            assembler_cmd: kv.get("assembler_cmd").cloned(),
            sources,
            ledger,
            decoder,
            output,
        })
    }
}
