//! One case per encoding pair of each multiple-encoding row.

use gtforge_core::binfmt::Isa;

pub struct Case {
    pub row: &'static str,
    pub isa: Isa,
    pub stmt: String,
    /// A statement the assembler encodes the other way, when one exists.
    pub alt_stmt: Option<String>,
    pub enc: [Vec<u8>; 2],
    /// Jump rows target offset 16 through an alignment directive.
    pub jump: bool,
}

const BOPS: [&str; 8] = ["add", "or", "adc", "sbb", "and", "sub", "xor", "cmp"];
const SHIFTS: [(&str, u8); 4] = [("sal", 4), ("shl", 4), ("shr", 5), ("sar", 7)];

fn cat(parts: &[&[u8]]) -> Vec<u8> {
    parts.concat()
}

pub fn cases() -> Vec<Case> {
    let mut v = Vec::new();
    let mut push = |row, isa, stmt: String, alt_stmt: Option<String>, a: Vec<u8>, b: Vec<u8>, jump| {
        v.push(Case {
            row,
            isa,
            stmt,
            alt_stmt,
            enc: [a, b],
            jump,
        })
    };

    push(
        "jmp rel8 / rel32",
        Isa::X64,
        "jmp 1f".into(),
        Some("{disp32} jmp 1f".into()),
        vec![0xeb, 0x0e],
        vec![0xe9, 0x0b, 0, 0, 0],
        true,
    );
    for (cc, op) in [("je", 0x4u8), ("jne", 0x5), ("jg", 0xf), ("jb", 0x2)] {
        push(
            "jcc rel8 / rel32",
            Isa::X64,
            format!("{cc} 1f"),
            Some(format!("{{disp32}} {cc} 1f")),
            vec![0x70 | op, 0x0e],
            vec![0x0f, 0x80 | op, 0x0a, 0, 0, 0],
            true,
        );
    }
    for (k, name) in BOPS.iter().enumerate() {
        let k = k as u8;
        push(
            "BOP AL, imm8 / r8, imm8",
            Isa::X64,
            format!("{name}b $5, %al"),
            None,
            vec![k * 8 + 4, 5],
            vec![0x80, 0xc0 | k << 3, 5],
            false,
        );
        push(
            "BOP AX, imm16 / r16, imm16",
            Isa::X64,
            format!("{name}w $0x1234, %ax"),
            None,
            vec![0x66, k * 8 + 5, 0x34, 0x12],
            vec![0x66, 0x81, 0xc0 | k << 3, 0x34, 0x12],
            false,
        );
        push(
            "BOP EAX, imm32 / r32, imm32",
            Isa::X64,
            format!("{name}l $0x12345678, %eax"),
            None,
            vec![k * 8 + 5, 0x78, 0x56, 0x34, 0x12],
            vec![0x81, 0xc0 | k << 3, 0x78, 0x56, 0x34, 0x12],
            false,
        );
        push(
            "BOP RAX, imm32 / r64, imm32",
            Isa::X64,
            format!("{name}q $0x12345678, %rax"),
            None,
            vec![0x48, k * 8 + 5, 0x78, 0x56, 0x34, 0x12],
            vec![0x48, 0x81, 0xc0 | k << 3, 0x78, 0x56, 0x34, 0x12],
            false,
        );
        push(
            "BOP r16, imm16 / r16, imm8",
            Isa::X64,
            format!("{name}w $-5, %cx"),
            None,
            vec![0x66, 0x83, 0xc1 | k << 3, 0xfb],
            vec![0x66, 0x81, 0xc1 | k << 3, 0xfb, 0xff],
            false,
        );
        push(
            "BOP r32, imm32 / r32, imm8",
            Isa::X64,
            format!("{name}l $5, %ecx"),
            None,
            vec![0x83, 0xc1 | k << 3, 5],
            vec![0x81, 0xc1 | k << 3, 5, 0, 0, 0],
            false,
        );
        push(
            "BOP r64, imm32 / r64, imm8",
            Isa::X64,
            format!("{name}q $127, %r9"),
            None,
            vec![0x49, 0x83, 0xc1 | k << 3, 0x7f],
            vec![0x49, 0x81, 0xc1 | k << 3, 0x7f, 0, 0, 0],
            false,
        );
    }
    push(
        "imul r16, r/m16, imm16 / imm8",
        Isa::X64,
        "imulw $5, %cx, %dx".into(),
        None,
        vec![0x66, 0x6b, 0xd1, 5],
        vec![0x66, 0x69, 0xd1, 5, 0],
        false,
    );
    push(
        "imul r32, r/m32, imm32 / imm8",
        Isa::X64,
        "imull $-128, 8(%rsp), %edx".into(),
        None,
        vec![0x6b, 0x54, 0x24, 0x08, 0x80],
        vec![0x69, 0x54, 0x24, 0x08, 0x80, 0xff, 0xff, 0xff],
        false,
    );
    push(
        "imul r64, r/m64, imm32 / imm8",
        Isa::X64,
        "imulq $100, %rsi, %rax".into(),
        None,
        vec![0x48, 0x6b, 0xc6, 100],
        vec![0x48, 0x69, 0xc6, 100, 0, 0, 0],
        false,
    );
    for (name, op) in SHIFTS {
        let m = 0xc1 | op << 3;
        push(
            "SHF r8, 1 / r8, imm8",
            Isa::X64,
            format!("{name}b $1, %cl"),
            None,
            vec![0xd0, m],
            vec![0xc0, m, 1],
            false,
        );
        push(
            "SHF r16, 1 / r16, imm8",
            Isa::X64,
            format!("{name}w $1, %cx"),
            None,
            vec![0x66, 0xd1, m],
            vec![0x66, 0xc1, m, 1],
            false,
        );
        push(
            "SHF r32, 1 / r32, imm8",
            Isa::X64,
            format!("{name}l $1, %ecx"),
            None,
            vec![0xd1, m],
            vec![0xc1, m, 1],
            false,
        );
        push(
            "SHF r64, 1 / r64, imm8",
            Isa::X64,
            format!("{name}q $1, %rcx"),
            None,
            vec![0x48, 0xd1, m],
            vec![0x48, 0xc1, m, 1],
            false,
        );
    }
    let addr: &[u8] = &[0x00, 0x10, 0, 0];
    let addr64: &[u8] = &[0x00, 0x10, 0, 0, 0, 0, 0, 0];
    for (store, dir) in [(false, 0u8), (true, 2u8)] {
        let (ld8, ld) = if store { (0x88, 0x89) } else { (0x8a, 0x8b) };
        let stmt = |m: &str, r: &str| {
            if store {
                format!("{m} %{r}, 0x1000")
            } else {
                format!("{m} 0x1000, %{r}")
            }
        };
        push(
            "mov AL, moffs8 / r8, m8",
            Isa::X86,
            stmt("movb", "al"),
            None,
            cat(&[&[0xa0 | dir], addr]),
            cat(&[&[ld8, 0x05], addr]),
            false,
        );
        push(
            "mov AX, moffs16 / r16, m16",
            Isa::X86,
            stmt("movw", "ax"),
            None,
            cat(&[&[0x66, 0xa1 | dir], addr]),
            cat(&[&[0x66, ld, 0x05], addr]),
            false,
        );
        push(
            "mov EAX, moffs32 / r32, m32",
            Isa::X86,
            stmt("movl", "eax"),
            None,
            cat(&[&[0xa1 | dir], addr]),
            cat(&[&[ld, 0x05], addr]),
            false,
        );
        push(
            "mov AL, moffs8 / r8, m8",
            Isa::X64,
            stmt("movb", "al"),
            Some(stmt("movabsb", "al")),
            cat(&[&[ld8, 0x04, 0x25], addr]),
            cat(&[&[0xa0 | dir], addr64]),
            false,
        );
        push(
            "mov AX, moffs16 / r16, m16",
            Isa::X64,
            stmt("movw", "ax"),
            Some(stmt("movabsw", "ax")),
            cat(&[&[0x66, ld, 0x04, 0x25], addr]),
            cat(&[&[0x66, 0xa1 | dir], addr64]),
            false,
        );
        push(
            "mov EAX, moffs32 / r32, m32",
            Isa::X64,
            stmt("movl", "eax"),
            Some(stmt("movabsl", "eax")),
            cat(&[&[ld, 0x04, 0x25], addr]),
            cat(&[&[0xa1 | dir], addr64]),
            false,
        );
    }
    v
}

pub fn body(c: &Case, stmt: &str) -> String {
    if c.jump {
        format!("\t{stmt}\n\t.p2align 4\n1:\tret")
    } else {
        format!("\t{stmt}\n\tret")
    }
}

pub fn binary_with(c: &Case, enc: &[u8]) -> Vec<u8> {
    let mut code = enc.to_vec();
    if c.jump {
        code.resize(16, 0x90);
    }
    code.push(0xc3);
    code
}

/// objdump prints shift-by-one without its count and absolute moves as
/// `movabs`.
pub fn normalize(text: &str) -> String {
    let text = text.replace("movabs", "mov");
    match text.split_once(' ') {
        Some((m, ops)) if ["shl", "shr", "sar", "sal"].iter().any(|s| m.starts_with(s)) && !ops.contains(',') => {
            format!("{m} $0x1,{ops}")
        }
        _ => text,
    }
}
