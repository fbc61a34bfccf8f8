//! Small x86/x64 encoding toolkit: prefix scanning, ModRM operand lengths,
//! structural decoding of the multiple-encoding instruction families, and
//! recognition of the nop encodings assemblers use for alignment.
//!
//! This is deliberately not a general decoder. Anything outside the
//! supported families decodes to `None`.

mod forms;
mod nops;

pub use forms::{decode_form, Decoded, Form, Operand};
pub use nops::{is_padding_jump, known_nop_len};

use crate::binfmt::Isa;
use crate::listing::CfClass;

/// Legacy prefix bytes, ascending.
pub const LEGACY_PREFIXES: [u8; 11] = [0x26, 0x2e, 0x36, 0x3e, 0x64, 0x65, 0x66, 0x67, 0xf0, 0xf2, 0xf3];

pub const MAX_INSN_LEN: usize = 15;

pub fn is_legacy_prefix(b: u8) -> bool {
    LEGACY_PREFIXES.contains(&b)
}

pub fn is_segment_prefix(b: u8) -> bool {
    matches!(b, 0x26 | 0x2e | 0x36 | 0x3e | 0x64 | 0x65)
}

pub fn is_rex(b: u8, isa: Isa) -> bool {
    isa.is_64() && (0x40..=0x4f).contains(&b)
}

/// Prefix bytes in front of an opcode.
#[derive(Debug, Clone, Copy)]
pub struct Head<'a> {
    pub legacy: &'a [u8],
    /// REX byte, 0 when absent.
    pub rex: u8,
    /// Index of the first opcode byte.
    pub opcode_at: usize,
}

impl Head<'_> {
    pub fn has(&self, prefix: u8) -> bool {
        self.legacy.contains(&prefix)
    }

    pub fn rex_w(&self) -> bool {
        self.rex & 0x08 != 0
    }

    /// Operand size in bits for a non-byte instruction.
    pub fn operand_bits(&self) -> u8 {
        if self.rex_w() {
            64
        } else if self.has(0x66) {
            16
        } else {
            32
        }
    }

    pub fn addr16(&self, isa: Isa) -> bool {
        !isa.is_64() && self.has(0x67)
    }
}

pub fn scan_head(bytes: &[u8], isa: Isa) -> Head<'_> {
    let mut i = 0;
    while i < bytes.len() && i < MAX_INSN_LEN && is_legacy_prefix(bytes[i]) {
        i += 1;
    }
    let legacy = &bytes[..i];
    let mut rex = 0;
    if i < bytes.len() && is_rex(bytes[i], isa) {
        rex = bytes[i];
        i += 1;
    }
    Head {
        legacy,
        rex,
        opcode_at: i,
    }
}

/// Length of a ModRM operand (ModRM byte, SIB and displacement) starting at
/// `bytes[0]`. `None` when `bytes` is too short.
pub fn modrm_len(bytes: &[u8], addr16: bool) -> Option<usize> {
    let modrm = *bytes.first()?;
    let md = modrm >> 6;
    let rm = modrm & 7;
    let len = if md == 3 {
        1
    } else if addr16 {
        match md {
            0 if rm == 6 => 3,
            0 => 1,
            1 => 2,
            _ => 3,
        }
    } else {
        let mut len = 1;
        let mut base = rm;
        if rm == 4 {
            base = *bytes.get(1)? & 7;
            len += 1;
        }
        len + match md {
            0 if rm == 5 || (rm == 4 && base == 5) => 4,
            0 => 0,
            1 => 1,
            _ => 4,
        }
    };
    (bytes.len() >= len).then_some(len)
}

fn le_int(bytes: &[u8]) -> Option<i64> {
    Some(match bytes.len() {
        1 => bytes[0] as i8 as i64,
        2 => i16::from_le_bytes(bytes.try_into().ok()?) as i64,
        4 => i32::from_le_bytes(bytes.try_into().ok()?) as i64,
        8 => i64::from_le_bytes(bytes.try_into().ok()?),
        _ => return None,
    })
}

/// Relative displacement of a direct `jmp`/`jcc`, measured from the end of
/// the instruction, together with the instruction length.
pub fn branch_displacement(bytes: &[u8], isa: Isa) -> Option<(i64, usize)> {
    let head = scan_head(bytes, isa);
    let at = head.opcode_at;
    let op = *bytes.get(at)?;
    let rel_len = |short: bool| {
        if short {
            1
        } else if !isa.is_64() && head.has(0x66) {
            2
        } else {
            4
        }
    };
    let (start, n) = match op {
        0xeb | 0x70..=0x7f | 0xe0..=0xe3 => (at + 1, rel_len(true)),
        0xe9 | 0xe8 => (at + 1, rel_len(false)),
        0x0f if matches!(bytes.get(at + 1), Some(0x80..=0x8f)) => (at + 2, rel_len(false)),
        _ => return None,
    };
    let disp = le_int(bytes.get(start..start + n)?)?;
    Some((disp, start + n))
}

/// Decoding result of the built-in decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltinInsn {
    pub len: usize,
    pub cf_class: CfClass,
}

/// Decodes the instruction families the built-in decoder knows: known nops,
/// the multiple-encoding families, `ret`, and direct `call`, each with any
/// leading legacy prefixes.
pub fn decode_builtin(bytes: &[u8], isa: Isa) -> Option<BuiltinInsn> {
    if let Some(len) = known_nop_len(bytes, isa) {
        return Some(BuiltinInsn {
            len,
            cf_class: CfClass::NonCf,
        });
    }
    if let Some(d) = decode_form(bytes, isa) {
        let cf_class = match d.form {
            Form::Jmp => CfClass::UncondDirectJump,
            Form::Jcc(_) => CfClass::CondDirectJump,
            _ => CfClass::NonCf,
        };
        return Some(BuiltinInsn { len: d.len, cf_class });
    }
    let head = scan_head(bytes, isa);
    let at = head.opcode_at;
    match *bytes.get(at)? {
        0xc3 => Some(BuiltinInsn {
            len: at + 1,
            cf_class: CfClass::Return,
        }),
        0xc2 if bytes.len() >= at + 3 => Some(BuiltinInsn {
            len: at + 3,
            cf_class: CfClass::Return,
        }),
        0xe8 => branch_displacement(bytes, isa).map(|(_, len)| BuiltinInsn {
            len,
            cf_class: CfClass::Call,
        }),
        _ => None,
    }
}
