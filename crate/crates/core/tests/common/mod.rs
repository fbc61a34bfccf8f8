#![allow(dead_code)]

pub mod encodings;
pub mod scoring;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use gtforge_core::asm::{AssemblerDriver, GnuAssembler};
use gtforge_core::binfmt::{load_binary, Isa};
use gtforge_core::discovery::ObjdumpOracle;
use gtforge_core::groundtruth::{deserialize, serialize, Provenance};
use gtforge_core::listing::ListingDoc;
use gtforge_core::pipeline::{build_from_sources, run_check, write_build};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn run(cmd: &mut Command) {
    let out = cmd.output().unwrap_or_else(|e| panic!("{cmd:?}: {e}"));
    assert!(
        out.status.success(),
        "{cmd:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Assembles `body` as the only function `f` and parses the listing.
pub fn listed(isa: Isa, body: &str) -> ListingDoc {
    let text = format!("\t.text\n\t.globl f\n\t.type f, @function\nf:\n{body}\n");
    GnuAssembler::new(isa)
        .assemble(&text)
        .expect("assembles")
        .parse(&HashSet::new())
        .expect("parses")
}

/// objdump's rendering of each instruction in `bytes`, placed at `vma`.
pub fn objdump_text(isa: Isa, bytes: &[u8], vma: u64) -> Vec<String> {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("code.bin");
    std::fs::write(&p, bytes).unwrap();
    let arch = if isa.is_64() { "i386:x86-64" } else { "i386" };
    let out = Command::new("objdump")
        .args(["-D", "-b", "binary", "-m", arch, "--insn-width=15"])
        .arg(format!("--adjust-vma={vma:#x}"))
        .arg(&p)
        .output()
        .expect("objdump runs");
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter_map(|l| {
            let mut parts = l.splitn(3, '\t');
            let addr = parts.next()?;
            addr.trim().strip_suffix(':')?;
            parts.next()?;
            Some(parts.next()?.split_whitespace().collect::<Vec<_>>().join(" "))
        })
        .collect()
}

/// Compiles a C fixture directory at `opt`: every `.c` file to assembly,
/// then the assembly to an executable. Returns the binary and sources.
pub fn build_c(name: &str, opt: &str, out: &Path) -> (PathBuf, Vec<PathBuf>) {
    let src_dir = fixtures().join("c").join(name);
    let mut cs: Vec<PathBuf> = std::fs::read_dir(&src_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "c"))
        .collect();
    cs.sort();
    std::fs::create_dir_all(out).unwrap();
    let mut sources = Vec::new();
    for c in &cs {
        let s = out.join(c.file_stem().unwrap()).with_extension("s");
        run(Command::new("gcc").arg(opt).arg("-S").arg(c).arg("-o").arg(&s));
        sources.push(s);
    }
    let bin = out.join(name);
    run(Command::new("gcc").args(&sources).arg("-o").arg(&bin));
    (bin, sources)
}

/// Assembles `text` and links it without libc, entry `entry`.
pub fn link_asm(isa: Isa, text: &str, entry: &str, out: &Path) -> PathBuf {
    std::fs::create_dir_all(out).unwrap();
    let s = out.join("prog.s");
    let o = out.join("prog.o");
    let bin = out.join("prog");
    std::fs::write(&s, text).unwrap();
    let (asf, ldm) = if isa.is_64() {
        ("--64", "elf_x86_64")
    } else {
        ("--32", "elf_i386")
    };
    run(Command::new("as").arg(asf).arg(&s).arg("-o").arg(&o));
    run(Command::new("ld")
        .args(["-m", ldm, "-e", entry])
        .arg(&o)
        .arg("-o")
        .arg(&bin));
    bin
}

pub const C_FIXTURES: &[&str] = &[
    "align",
    "bits",
    "dupstatic",
    "floats",
    "fnptr",
    "hello",
    "noreturn",
    "recursion",
    "strings",
    "structs",
    "switch",
    "tls",
    "varargs",
];

/// Builds one C fixture at one optimization level and checks the result.
/// Returns the serialized ground truth.
pub fn build_and_check(name: &str, opt: &str, dir: &Path) -> String {
    let (bin, sources) = build_c(name, opt, dir);
    let img = load_binary(&bin).unwrap();
    let texts = sources.iter().map(|s| std::fs::read_to_string(s).unwrap()).collect();
    let driver = GnuAssembler::new(Isa::X64);
    let r = build_from_sources(
        &img,
        texts,
        &driver,
        &ObjdumpOracle::new("objdump"),
        Provenance::new("gcc", opt),
    )
    .unwrap_or_else(|e| panic!("{name} {opt}: {e}"));
    assert!(r.check.ok, "{name} {opt}: {}", r.check);
    assert!(!r.gt.functions.is_empty());
    for i in r.gt.instructions() {
        assert_eq!(
            img.read_bytes(i.abs_offset, i.size).unwrap(),
            &i.bytes[..],
            "{name} {opt}"
        );
    }
    let gtf = dir.join("gt.gtf");
    write_build(&r, &gtf).unwrap();
    assert!(run_check(&gtf, &driver).unwrap().ok, "{name} {opt}");
    let text = serialize(&r.gt);
    assert_eq!(serialize(&deserialize(&text).unwrap()), text);
    text
}
