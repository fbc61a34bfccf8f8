use super::modrm_len;
use crate::binfmt::Isa;

/// Length of the known nop encoding at the start of `bytes`, if any.
///
/// Recognized: `90` and `66 90`; the `0f 1f /0` family with any run of
/// 0x66 and cs/ds prefixes; and, in 32-bit mode, the self-moves and
/// zero-displacement self-`lea`s GNU as pads with.
pub fn known_nop_len(bytes: &[u8], isa: Isa) -> Option<usize> {
    let mut i = 0;
    let mut only_66 = true;
    while i < bytes.len() && i < 14 && matches!(bytes[i], 0x66 | 0x2e | 0x3e) {
        only_66 &= bytes[i] == 0x66;
        i += 1;
    }
    let op = *bytes.get(i)?;
    let rest = &bytes[i + 1..];
    let len = match op {
        0x90 if only_66 => i + 1,
        0x0f if rest.first() == Some(&0x1f) => {
            let m = *rest.get(1)?;
            if (m >> 3) & 7 != 0 {
                return None;
            }
            i + 2 + modrm_len(&rest[1..], false)?
        }
        0x8d if !isa.is_64() && i == 0 => i + 1 + self_lea_len(rest)?,
        0x8d if !isa.is_64() && bytes[..i] == [0x2e] => i + 1 + self_lea_len(rest)?,
        0x89 | 0x8b | 0x87 if !isa.is_64() && i == 0 => {
            let m = *rest.first()?;
            if m >> 6 == 3 && (m >> 3) & 7 == m & 7 {
                2
            } else {
                return None;
            }
        }
        _ => return None,
    };
    (len <= super::MAX_INSN_LEN && len <= bytes.len()).then_some(len)
}

/// `lea 0(%reg), %reg` with no index, any displacement width.
fn self_lea_len(rest: &[u8]) -> Option<usize> {
    let m = *rest.first()?;
    let md = m >> 6;
    let reg = (m >> 3) & 7;
    let rm = m & 7;
    if md == 3 {
        return None;
    }
    let len = modrm_len(rest, false)?;
    let base = if rm == 4 {
        let sib = rest[1];
        // index 4 means "no index"
        if (sib >> 3) & 7 != 4 {
            return None;
        }
        sib & 7
    } else {
        rm
    };
    if md == 0 && base == 5 {
        return None;
    }
    let disp_at = if rm == 4 { 2 } else { 1 };
    if base != reg || rest[disp_at..len].iter().any(|&b| b != 0) {
        return None;
    }
    Some(len)
}

/// A short `jmp` at `at` whose target is `region_end`: GNU as emits these
/// in front of long 32-bit padding runs.
pub fn is_padding_jump(bytes: &[u8], at: u64, region_end: u64) -> bool {
    match bytes {
        [0xeb, rel] => {
            at.checked_add(2)
                .and_then(|next| next.checked_add_signed(*rel as i8 as i64))
                == Some(region_end)
        }
        _ => false,
    }
}
