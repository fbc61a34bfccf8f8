use super::{is_segment_prefix, le_int, modrm_len, scan_head, Head};
use crate::binfmt::Isa;

/// Operand of a ModRM-encoded instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand {
    /// Register number including REX extension. Byte registers under a REX
    /// prefix are offset by 16 (spl..dil instead of ah..bh).
    Reg(u8),
    /// Memory operand identity: ModRM with the reg field cleared, SIB,
    /// displacement and the REX.X/REX.B bits.
    Mem(Vec<u8>),
}

/// Normalized meaning of an instruction from one of the multiple-encoding
/// families. Two encodings are interchangeable iff their forms are equal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Form {
    Jmp,
    Jcc(u8),
    /// add/or/adc/sbb/and/sub/xor/cmp with an immediate.
    Bop {
        op: u8,
        width: u8,
        dst: Operand,
        imm: u64,
    },
    Imul {
        width: u8,
        reg: u8,
        src: Operand,
        imm: u64,
    },
    /// shl/sal (op 4), shr (5), sar (7).
    Shift {
        op: u8,
        width: u8,
        dst: Operand,
        count: u8,
    },
    /// mov between the accumulator and an absolute address.
    MovAbs {
        store: bool,
        width: u8,
        segment: Option<u8>,
        addr: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub form: Form,
    pub len: usize,
    /// Legacy prefixes other than 0x66/0x67 (whose effect is folded into the
    /// form), sorted.
    pub other_prefixes: Vec<u8>,
}

impl Decoded {
    /// True when `other` encodes the same instruction.
    pub fn equivalent(&self, other: &Decoded) -> bool {
        self.form == other.form && self.other_prefixes == other.other_prefixes
    }
}

fn mask(width: u8) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

fn imm_bytes(width: u8) -> usize {
    match width {
        8 => 1,
        16 => 2,
        _ => 4,
    }
}

struct ModRm {
    reg: u8,
    rm: Operand,
    len: usize,
}

fn modrm(bytes: &[u8], head: &Head, isa: Isa, byte_op: bool) -> Option<ModRm> {
    let b = *bytes.first()?;
    let len = modrm_len(bytes, head.addr16(isa))?;
    let reg = ((b >> 3) & 7) | if head.rex & 0x04 != 0 { 8 } else { 0 };
    let rm = if b >> 6 == 3 {
        let mut r = (b & 7) | if head.rex & 0x01 != 0 { 8 } else { 0 };
        if byte_op && head.rex != 0 {
            r += 16;
        }
        Operand::Reg(r)
    } else {
        let mut key = bytes[..len].to_vec();
        key[0] &= 0xc7;
        key.push(head.rex & 0x03);
        key.push(u8::from(head.has(0x67)));
        Operand::Mem(key)
    };
    Some(ModRm { reg, rm, len })
}

/// Decodes `bytes` as an instruction of one of the multiple-encoding
/// families (direct jumps, immediate binary ops, imul with immediate,
/// shifts by one/imm8, accumulator moves to/from absolute addresses).
pub fn decode_form(bytes: &[u8], isa: Isa) -> Option<Decoded> {
    let head = scan_head(bytes, isa);
    let at = head.opcode_at;
    let op = *bytes.get(at)?;
    let after = at + 1;
    let osize = head.operand_bits();
    let branch_rel = if !isa.is_64() && head.has(0x66) { 2 } else { 4 };

    let (form, len) = match op {
        0xeb => (Form::Jmp, after + 1),
        0xe9 => (Form::Jmp, after + branch_rel),
        0x70..=0x7f => (Form::Jcc(op & 0x0f), after + 1),
        0x0f => match *bytes.get(after)? {
            cc @ 0x80..=0x8f => (Form::Jcc(cc & 0x0f), after + 1 + branch_rel),
            _ => return None,
        },
        // accumulator forms: op AL, imm8 / op eAX, imm
        _ if op < 0x40 && (op & 7 == 4 || op & 7 == 5) => {
            let width = if op & 7 == 4 { 8 } else { osize };
            let n = imm_bytes(width);
            let imm = le_int(bytes.get(after..after + n)?)? as u64 & mask(width);
            (
                Form::Bop {
                    op: op >> 3,
                    width,
                    dst: Operand::Reg(0),
                    imm,
                },
                after + n,
            )
        }
        0x80 | 0x81 | 0x83 => {
            let width = if op == 0x80 { 8 } else { osize };
            let m = modrm(&bytes[after..], &head, isa, op == 0x80)?;
            let n = if op == 0x81 { imm_bytes(width) } else { 1 };
            let start = after + m.len;
            let imm = le_int(bytes.get(start..start + n)?)? as u64 & mask(width);
            (
                Form::Bop {
                    op: m.reg & 7,
                    width,
                    dst: m.rm,
                    imm,
                },
                start + n,
            )
        }
        0x69 | 0x6b => {
            let m = modrm(&bytes[after..], &head, isa, false)?;
            let n = if op == 0x69 { imm_bytes(osize) } else { 1 };
            let start = after + m.len;
            let imm = le_int(bytes.get(start..start + n)?)? as u64 & mask(osize);
            (
                Form::Imul {
                    width: osize,
                    reg: m.reg,
                    src: m.rm,
                    imm,
                },
                start + n,
            )
        }
        0xd0 | 0xd1 | 0xc0 | 0xc1 => {
            let byte_op = op == 0xd0 || op == 0xc0;
            let m = modrm(&bytes[after..], &head, isa, byte_op)?;
            let shift = match m.reg & 7 {
                4 | 6 => 4,
                5 => 5,
                7 => 7,
                _ => return None,
            };
            let start = after + m.len;
            let (count, len) = if op == 0xd0 || op == 0xd1 {
                (1, start)
            } else {
                (*bytes.get(start)?, start + 1)
            };
            (
                Form::Shift {
                    op: shift,
                    width: if byte_op { 8 } else { osize },
                    dst: m.rm,
                    count,
                },
                len,
            )
        }
        0xa0..=0xa3 => {
            let n = match (isa.is_64(), head.has(0x67)) {
                (true, false) => 8,
                (true, true) | (false, false) => 4,
                (false, true) => 2,
            };
            let raw = bytes.get(after..after + n)?;
            let mut buf = [0u8; 8];
            buf[..n].copy_from_slice(raw);
            (
                Form::MovAbs {
                    store: op >= 0xa2,
                    width: if op & 1 == 0 { 8 } else { osize },
                    segment: segment(&head),
                    addr: u64::from_le_bytes(buf),
                },
                after + n,
            )
        }
        0x88..=0x8b => {
            let b = *bytes.get(after)?;
            // reg field must be the accumulator
            if (b >> 3) & 7 != 0 || head.rex & 0x04 != 0 || head.rex & 0x03 != 0 {
                return None;
            }
            if head.addr16(isa) {
                return None;
            }
            let (disp_at, ok) = match (b, bytes.get(after + 1)) {
                (0x04, Some(0x25)) => (after + 2, true),
                (0x05, _) if !isa.is_64() => (after + 1, true),
                _ => (0, false),
            };
            if !ok {
                return None;
            }
            let disp = le_int(bytes.get(disp_at..disp_at + 4)?)?;
            let addr = if head.has(0x67) || !isa.is_64() {
                disp as u32 as u64
            } else {
                disp as u64
            };
            (
                Form::MovAbs {
                    store: op <= 0x89,
                    width: if op & 1 == 0 { 8 } else { osize },
                    segment: segment(&head),
                    addr,
                },
                disp_at + 4,
            )
        }
        _ => return None,
    };
    if len > bytes.len() || len > super::MAX_INSN_LEN {
        return None;
    }
    let mut other_prefixes: Vec<u8> = head
        .legacy
        .iter()
        .copied()
        .filter(|&p| p != 0x66 && p != 0x67 && !is_segment_prefix(p))
        .collect();
    other_prefixes.sort_unstable();
    other_prefixes.dedup();
    if let Some(seg) = segment(&head) {
        // segment overrides matter for memory operands only
        if !matches!(form, Form::MovAbs { .. }) {
            other_prefixes.push(seg);
        }
    }
    Some(Decoded {
        form,
        len,
        other_prefixes,
    })
}

fn segment(head: &Head) -> Option<u8> {
    head.legacy.iter().rev().copied().find(|&p| is_segment_prefix(p))
}
