//! Running the assembler with listing output enabled.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::Command;

use goblin::elf::{header, reloc, section_header, Elf};

use crate::binfmt::Isa;
use crate::listing::{parse_listing_with, ListingDoc, ListingError, RelocSite};

#[derive(Debug, thiserror::Error)]
pub enum AsmError {
    #[error("assembler command template is empty or lacks `{{in}}`/`{{lst}}`")]
    BadTemplate,
    #[error("cannot run `{program}`: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("assembler exited with {status}: {stderr}")]
    Failed { status: String, stderr: String },
    #[error("assembler scratch i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot read assembled object: {0}")]
    Object(String),
    #[error(transparent)]
    Listing(#[from] ListingError),
}

/// Output of one assembler run.
#[derive(Debug, Clone, Default)]
pub struct Assembled {
    pub listing: String,
    /// Relocation sites per section, sorted by offset. Empty when the
    /// template produces no object file.
    pub relocations: HashMap<String, Vec<RelocSite>>,
}

impl Assembled {
    /// Parses the listing and marks relocated bytes.
    pub fn parse(&self, fallback_names: &std::collections::HashSet<String>) -> Result<ListingDoc, ListingError> {
        let mut doc = parse_listing_with(&self.listing, fallback_names)?;
        doc.apply_fixups(&self.relocations);
        Ok(doc)
    }
}

/// Turns assembly text into a listing. Implementations must be safe to call
/// concurrently on distinct inputs.
pub trait AssemblerDriver: Send + Sync {
    fn assemble(&self, asm_text: &str) -> Result<Assembled, AsmError>;
}

/// Runs GNU `as` (or anything with the same listing format) from a command
/// template. Placeholders: `{in}` source, `{lst}` listing, `{obj}` object.
/// The template is split on whitespace; no shell is involved.
#[derive(Debug, Clone)]
pub struct GnuAssembler {
    template: Vec<String>,
}

impl GnuAssembler {
    pub fn default_template(isa: Isa) -> String {
        let mode = if isa.is_64() { "--64" } else { "--32" };
        format!("as {mode} --listing-cont-lines=100000 -al={{lst}} -o {{obj}} {{in}}")
    }

    pub fn new(isa: Isa) -> Self {
        Self::from_template(&Self::default_template(isa)).expect("default template is valid")
    }

    pub fn from_template(template: &str) -> Result<Self, AsmError> {
        let template: Vec<String> = template.split_whitespace().map(str::to_string).collect();
        let has = |p: &str| template.iter().any(|t| t.contains(p));
        if template.is_empty() || !has("{in}") || !has("{lst}") {
            return Err(AsmError::BadTemplate);
        }
        Ok(GnuAssembler { template })
    }
}

impl AssemblerDriver for GnuAssembler {
    fn assemble(&self, asm_text: &str) -> Result<Assembled, AsmError> {
        let dir = tempfile::tempdir()?;
        let path = |name: &str| -> PathBuf { dir.path().join(name) };
        std::fs::write(path("in.s"), asm_text)?;
        let subst = |t: &str| {
            t.replace("{in}", &path("in.s").to_string_lossy())
                .replace("{lst}", &path("out.lst").to_string_lossy())
                .replace("{obj}", &path("out.o").to_string_lossy())
        };
        let program = subst(&self.template[0]);
        let output = Command::new(&program)
            .args(self.template[1..].iter().map(|t| subst(t)))
            .current_dir(dir.path())
            .output()
            .map_err(|source| AsmError::Spawn {
                program: program.clone(),
                source,
            })?;
        if !output.status.success() {
            return Err(AsmError::Failed {
                status: output.status.to_string(),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        let listing = String::from_utf8_lossy(&std::fs::read(path("out.lst"))?).into_owned();
        let relocations = match std::fs::read(path("out.o")) {
            Ok(obj) => object_relocations(&obj)?,
            Err(_) => HashMap::new(),
        };
        Ok(Assembled { listing, relocations })
    }
}

/// Width in bytes of the field a relocation patches, and how many bytes in
/// front of it a linker may rewrite while relaxing.
fn reloc_shape(machine: u16, r_type: u32) -> (usize, usize) {
    if machine == header::EM_X86_64 {
        match r_type {
            reloc::R_X86_64_64
            | reloc::R_X86_64_DTPMOD64
            | reloc::R_X86_64_DTPOFF64
            | reloc::R_X86_64_TPOFF64
            | reloc::R_X86_64_PC64
            | reloc::R_X86_64_GOTOFF64
            | reloc::R_X86_64_GOT64
            | reloc::R_X86_64_GOTPCREL64
            | reloc::R_X86_64_GOTPC64
            | reloc::R_X86_64_GOTPLT64
            | reloc::R_X86_64_PLTOFF64
            | reloc::R_X86_64_SIZE64
            | reloc::R_X86_64_RELATIVE64 => (8, 0),
            reloc::R_X86_64_TLSDESC => (16, 0),
            reloc::R_X86_64_16 | reloc::R_X86_64_PC16 => (2, 0),
            reloc::R_X86_64_8 | reloc::R_X86_64_PC8 => (1, 0),
            reloc::R_X86_64_TLSDESC_CALL => (0, 0),
            reloc::R_X86_64_GOTPCRELX => (4, 2),
            reloc::R_X86_64_REX_GOTPCRELX | reloc::R_X86_64_GOTTPOFF => (4, 3),
            _ => (4, 0),
        }
    } else {
        match r_type {
            reloc::R_386_16 | reloc::R_386_PC16 => (2, 0),
            reloc::R_386_8 | reloc::R_386_PC8 => (1, 0),
            reloc::R_386_GOT32X => (4, 2),
            _ => (4, 0),
        }
    }
}

/// Relocation sites of an ELF relocatable object, keyed by target section.
pub fn object_relocations(obj: &[u8]) -> Result<HashMap<String, Vec<RelocSite>>, AsmError> {
    let elf = Elf::parse(obj).map_err(|e| AsmError::Object(e.to_string()))?;
    let name_of = |idx: usize| {
        elf.section_headers
            .get(idx)
            .and_then(|sh| elf.shdr_strtab.get_at(sh.sh_name))
            .unwrap_or("")
            .to_string()
    };
    let mut out: HashMap<String, Vec<RelocSite>> = HashMap::new();
    for (idx, relocs) in &elf.shdr_relocs {
        let Some(sh) = elf.section_headers.get(*idx) else {
            continue;
        };
        if sh.sh_type != section_header::SHT_RELA && sh.sh_type != section_header::SHT_REL {
            continue;
        }
        let target = name_of(sh.sh_info as usize);
        let sites = out.entry(target).or_default();
        for r in relocs.iter() {
            let (len, relaxable_opcode) = reloc_shape(elf.header.e_machine, r.r_type);
            if len > 0 {
                sites.push(RelocSite {
                    offset: r.r_offset,
                    len,
                    relaxable_opcode,
                });
            }
        }
    }
    for sites in out.values_mut() {
        sites.sort_by_key(|s| s.offset);
    }
    Ok(out)
}
