//! Binary container access: executable sections, function symbols and byte
//! extraction at virtual addresses.
//!
//! All addresses handed out by this module are virtual addresses, the same
//! numbers symbol tables and disassemblers report. File offsets stay internal.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use goblin::elf::{header, section_header, sym, Elf};

use crate::digest::Digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Isa {
    X86,
    X64,
}

impl Isa {
    pub fn token(self) -> &'static str {
        match self {
            Isa::X86 => "x86",
            Isa::X64 => "x64",
        }
    }

    pub fn is_64(self) -> bool {
        self == Isa::X64
    }
}

impl fmt::Display for Isa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Isa {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "x86" => Ok(Isa::X86),
            "x64" => Ok(Isa::X64),
            other => Err(format!("unknown isa `{other}` (expected x86 or x64)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BinfmtError {
    #[error("cannot read {path}: {source}")]
    UnreadableFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported container ({reason})")]
    UnsupportedContainer { path: PathBuf, reason: String },
    #[error("{path}: unsupported machine type {machine:#x}")]
    UnsupportedIsa { path: PathBuf, machine: u16 },
    #[error("range {start:#x}+{len:#x} is not inside a single section")]
    OutOfRange { start: u64, len: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionView {
    pub name: String,
    pub file_offset: u64,
    pub virtual_address: u64,
    pub size: u64,
    pub executable: bool,
}

impl SectionView {
    pub fn contains(&self, addr: u64, len: u64) -> bool {
        addr >= self.virtual_address
            && addr
                .checked_add(len)
                .is_some_and(|end| end <= self.virtual_address + self.size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuncSymbol {
    pub name: String,
    pub abs_offset: u64,
    /// `None` when the symbol table records no size.
    pub size: Option<u64>,
    pub section_name: String,
}

/// An immutable, loaded binary.
#[derive(Debug, Clone)]
pub struct BinaryImage {
    pub path: PathBuf,
    pub content_hash: Digest,
    pub sections: Vec<SectionView>,
    pub symbols: Vec<FuncSymbol>,
    pub isa: Isa,
    data: Arc<[u8]>,
}

impl BinaryImage {
    /// Builds an in-memory image with a single executable section `.text`
    /// mapped at `base`. Used for synthetic inputs.
    pub fn from_code(isa: Isa, base: u64, code: &[u8], symbols: Vec<FuncSymbol>) -> Self {
        let mut symbols = symbols;
        sort_symbols(&mut symbols);
        BinaryImage {
            path: PathBuf::from("<memory>"),
            content_hash: Digest::of(code),
            sections: vec![SectionView {
                name: ".text".into(),
                file_offset: 0,
                virtual_address: base,
                size: code.len() as u64,
                executable: true,
            }],
            symbols,
            isa,
            data: Arc::from(code),
        }
    }

    /// Raw file contents.
    pub fn file_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn section_at(&self, addr: u64) -> Option<&SectionView> {
        self.sections.iter().find(|s| s.contains(addr, 1))
    }

    /// Returns `len` bytes at virtual address `abs_offset`. The range must
    /// lie inside one section that has file contents.
    pub fn read_bytes(&self, abs_offset: u64, len: u64) -> Result<&[u8], BinfmtError> {
        if len == 0 {
            return Ok(&[]);
        }
        let section = self
            .sections
            .iter()
            .find(|s| s.contains(abs_offset, len))
            .ok_or(BinfmtError::OutOfRange { start: abs_offset, len })?;
        let start = (section.file_offset + (abs_offset - section.virtual_address)) as usize;
        Ok(&self.data[start..start + len as usize])
    }

    /// Like [`read_bytes`](Self::read_bytes) but clips the length at the end
    /// of the containing section. Empty when `abs_offset` is unmapped.
    pub fn read_up_to(&self, abs_offset: u64, max_len: u64) -> &[u8] {
        match self.section_at(abs_offset) {
            Some(s) => {
                let avail = s.virtual_address + s.size - abs_offset;
                self.read_bytes(abs_offset, avail.min(max_len)).unwrap_or(&[])
            }
            None => &[],
        }
    }

    pub fn list_functions(&self) -> &[FuncSymbol] {
        &self.symbols
    }
}

fn sort_symbols(symbols: &mut [FuncSymbol]) {
    symbols.sort_by(|a, b| a.abs_offset.cmp(&b.abs_offset).then_with(|| a.name.cmp(&b.name)));
}

/// A reader for one container format. Only ELF is implemented.
pub trait ContainerReader {
    fn sniff(&self, bytes: &[u8]) -> bool;
    fn read(&self, path: &Path, bytes: Arc<[u8]>) -> Result<BinaryImage, BinfmtError>;
}

pub struct ElfReader;

impl ContainerReader for ElfReader {
    fn sniff(&self, bytes: &[u8]) -> bool {
        bytes.starts_with(b"\x7fELF")
    }

    fn read(&self, path: &Path, bytes: Arc<[u8]>) -> Result<BinaryImage, BinfmtError> {
        let unsupported = |reason: String| BinfmtError::UnsupportedContainer {
            path: path.to_path_buf(),
            reason,
        };
        let elf = Elf::parse(&bytes).map_err(|e| unsupported(e.to_string()))?;
        let isa = match (elf.header.e_machine, elf.is_64) {
            (header::EM_X86_64, true) => Isa::X64,
            (header::EM_386, false) => Isa::X86,
            (machine, _) => {
                return Err(BinfmtError::UnsupportedIsa {
                    path: path.to_path_buf(),
                    machine,
                })
            }
        };

        let file_len = bytes.len() as u64;
        let mut sections = Vec::new();
        let mut names_by_index = Vec::with_capacity(elf.section_headers.len());
        for sh in &elf.section_headers {
            let name = elf.shdr_strtab.get_at(sh.sh_name).unwrap_or("").to_string();
            names_by_index.push(name.clone());
            if sh.sh_flags & u64::from(section_header::SHF_ALLOC) == 0
                || sh.sh_type == section_header::SHT_NOBITS
                || sh.sh_size == 0
            {
                continue;
            }
            if sh.sh_offset.checked_add(sh.sh_size).is_none_or(|end| end > file_len) {
                return Err(unsupported(format!("section {name} exceeds file size")));
            }
            sections.push(SectionView {
                name,
                file_offset: sh.sh_offset,
                virtual_address: sh.sh_addr,
                size: sh.sh_size,
                executable: sh.sh_flags & u64::from(section_header::SHF_EXECINSTR) != 0,
            });
        }

        let mut symbols = Vec::new();
        for s in elf.syms.iter() {
            if s.st_type() != sym::STT_FUNC
                || s.st_shndx == section_header::SHN_UNDEF as usize
                || s.st_shndx >= names_by_index.len()
            {
                continue;
            }
            let Some(name) = elf.strtab.get_at(s.st_name) else {
                continue;
            };
            if name.is_empty() {
                continue;
            }
            symbols.push(FuncSymbol {
                name: name.to_string(),
                abs_offset: s.st_value,
                size: (s.st_size != 0).then_some(s.st_size),
                section_name: names_by_index[s.st_shndx].clone(),
            });
        }
        sort_symbols(&mut symbols);

        Ok(BinaryImage {
            path: path.to_path_buf(),
            content_hash: Digest::of(&bytes),
            sections,
            symbols,
            isa,
            data: bytes,
        })
    }
}

/// Loads a binary from disk.
pub fn load_binary(path: impl AsRef<Path>) -> Result<BinaryImage, BinfmtError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| BinfmtError::UnreadableFile {
        path: path.to_path_buf(),
        source,
    })?;
    let readers: [&dyn ContainerReader; 1] = [&ElfReader];
    let reader = readers
        .into_iter()
        .find(|r| r.sniff(&bytes))
        .ok_or_else(|| BinfmtError::UnsupportedContainer {
            path: path.to_path_buf(),
            reason: if bytes.is_empty() {
                "empty file".into()
            } else {
                "unrecognized magic".into()
            },
        })?;
    reader.read(path, Arc::from(bytes))
}
