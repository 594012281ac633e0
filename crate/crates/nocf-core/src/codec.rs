//! 32-bit wire words exchanged between the interposer and the integrity
//! core over the FIFO configuration links.
//!
//! Command word layout (interposer-bound):
//!
//! ```text
//! 31 30 | 29 .. 26 | 25 | 24 | 23 ........ 4 | 3 .. 0
//! opcode| size code| rd | wr | base page     | zero      (opcode 00, NewRule)
//! opcode| 0 ...................................... 0    (01 Flush, 10 EnforceRead, 11 EnforceWrite)
//! ```
//!
//! Interrupt word layout (core-bound):
//!
//! ```text
//! 31 ........... 12 | 11 .. 1 | 0
//! faulting page     | zero    | 1 = read, 0 = write
//! ```
//!
//! The low 12 address bits are dropped: a single word cannot carry the full
//! address plus flags, and the 4 KiB minimum region size makes page
//! granularity lossless for granting.

use core::fmt;

use crate::bus::{AccessKind, Address};
use crate::policy::SizeCode;

/// One raw word on a configuration link.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct FslWord(pub u32);

impl fmt::Debug for FslWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FslWord({:#010x})", self.0)
    }
}

/// Raw interrupt word carrying the faulting page and access kind.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct IntrWord(pub u32);

impl fmt::Debug for IntrWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IntrWord({:#010x})", self.0)
    }
}

/// Decoded integrity-core command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub enum Command {
    NewRule { base_page: u32, size: SizeCode, allow_read: bool, allow_write: bool },
    Flush,
    EnforceRead,
    EnforceWrite,
}

impl Command {
    /// Enforce command for a given channel kind.
    pub fn enforce(kind: AccessKind) -> Self {
        match kind {
            AccessKind::Read => Command::EnforceRead,
            AccessKind::Write => Command::EnforceWrite,
        }
    }

    /// NewRule with the alignment invariant checked: the implied base
    /// (`base_page << 12`) must be aligned to the decoded region size.
    pub fn new_rule(
        base_page: u32,
        size: SizeCode,
        allow_read: bool,
        allow_write: bool,
    ) -> Result<Self, CodecError> {
        if base_page > 0xF_FFFF {
            return Err(CodecError::PageTooWide(base_page));
        }
        if (base_page << 12) & !size.base_mask() != 0 {
            return Err(CodecError::UnalignedRule { base_page, size });
        }
        Ok(Command::NewRule { base_page, size, allow_read, allow_write })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecError {
    /// Reserved bits set in a received word.
    MalformedCommand(u32),
    MalformedIntr(u32),
    PageTooWide(u32),
    UnalignedRule { base_page: u32, size: SizeCode },
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecError::MalformedCommand(w) => {
                write!(f, "command word {w:#010x} has nonzero reserved bits")
            }
            CodecError::MalformedIntr(w) => {
                write!(f, "interrupt word {w:#010x} has nonzero reserved bits")
            }
            CodecError::PageTooWide(p) => write!(f, "base page {p:#x} does not fit 20 bits"),
            CodecError::UnalignedRule { base_page, size } => write!(
                f,
                "rule base {:#010x} not aligned to {}-byte region",
                base_page << 12,
                size.decode_size()
            ),
        }
    }
}

impl core::error::Error for CodecError {}

const OPCODE_NEW_RULE: u32 = 0b00;
const OPCODE_FLUSH: u32 = 0b01;
const OPCODE_ENFORCE_READ: u32 = 0b10;
const OPCODE_ENFORCE_WRITE: u32 = 0b11;

pub fn encode_command(cmd: &Command) -> FslWord {
    let raw = match *cmd {
        Command::NewRule { base_page, size, allow_read, allow_write } => {
            (OPCODE_NEW_RULE << 30)
                | ((size.code() as u32) << 26)
                | ((allow_read as u32) << 25)
                | ((allow_write as u32) << 24)
                | ((base_page & 0xF_FFFF) << 4)
        }
        Command::Flush => OPCODE_FLUSH << 30,
        Command::EnforceRead => OPCODE_ENFORCE_READ << 30,
        Command::EnforceWrite => OPCODE_ENFORCE_WRITE << 30,
    };
    FslWord(raw)
}

pub fn decode_command(word: FslWord) -> Result<Command, CodecError> {
    let raw = word.0;
    match raw >> 30 {
        OPCODE_NEW_RULE => {
            if raw & 0xF != 0 {
                return Err(CodecError::MalformedCommand(raw));
            }
            let size = SizeCode::new(((raw >> 26) & 0xF) as u8).expect("4-bit field");
            Ok(Command::NewRule {
                base_page: (raw >> 4) & 0xF_FFFF,
                size,
                allow_read: raw & (1 << 25) != 0,
                allow_write: raw & (1 << 24) != 0,
            })
        }
        opcode => {
            if raw & 0x3FFF_FFFF != 0 {
                return Err(CodecError::MalformedCommand(raw));
            }
            Ok(match opcode {
                OPCODE_FLUSH => Command::Flush,
                OPCODE_ENFORCE_READ => Command::EnforceRead,
                _ => Command::EnforceWrite,
            })
        }
    }
}

pub fn encode_intr(addr: Address, kind: AccessKind) -> IntrWord {
    let kind_bit = match kind {
        AccessKind::Read => 1,
        AccessKind::Write => 0,
    };
    IntrWord((addr.0 & 0xFFFF_F000) | kind_bit)
}

/// Decode an interrupt word into (faulting page, access kind).
pub fn decode_intr(word: IntrWord) -> Result<(u32, AccessKind), CodecError> {
    if word.0 & 0x0000_0FFE != 0 {
        return Err(CodecError::MalformedIntr(word.0));
    }
    Ok(intr_fields(word))
}

/// Field extraction without the reserved-bit check, for fail-closed paths
/// that still need to route a best-effort Enforce.
pub fn intr_fields(word: IntrWord) -> (u32, AccessKind) {
    let kind = if word.0 & 1 != 0 { AccessKind::Read } else { AccessKind::Write };
    (word.0 >> 12, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent bit-assembly oracle: builds the word bit by bit from a
    /// boolean array instead of shift-or expressions.
    fn assemble(bits: &[(usize, u32, u32)]) -> u32 {
        let mut out = [false; 32];
        for &(lo, width, value) in bits {
            for i in 0..width as usize {
                out[lo + i] = (value >> i) & 1 != 0;
            }
        }
        out.iter()
            .enumerate()
            .fold(0u32, |acc, (i, &b)| if b { acc | (1 << i) } else { acc })
    }

    #[test]
    fn flush_encodes_to_fixed_word() {
        assert_eq!(encode_command(&Command::Flush).0, 0x4000_0000);
    }

    #[test]
    fn new_rule_matches_bit_assembly_oracle() {
        let cmd = Command::new_rule(0x44A00, SizeCode::new(4).unwrap(), true, true).unwrap();
        let oracle = assemble(&[(30, 2, 0b00), (26, 4, 4), (25, 1, 1), (24, 1, 1), (4, 20, 0x44A00)]);
        assert_eq!(oracle, 0x1344_A000);
        assert_eq!(encode_command(&cmd).0, oracle);
    }

    #[test]
    fn command_roundtrip_all_kinds() {
        let cmds = [
            Command::new_rule(0x80000, SizeCode::new(8).unwrap(), true, false).unwrap(),
            Command::Flush,
            Command::EnforceRead,
            Command::EnforceWrite,
        ];
        for cmd in cmds {
            assert_eq!(decode_command(encode_command(&cmd)).unwrap(), cmd);
        }
    }

    #[test]
    fn decode_flags_reserved_bits() {
        assert!(matches!(
            decode_command(FslWord(0x4000_0001)),
            Err(CodecError::MalformedCommand(_))
        ));
        assert!(matches!(
            decode_command(FslWord(0x0000_0008)),
            Err(CodecError::MalformedCommand(_))
        ));
        assert!(matches!(decode_intr(IntrWord(0x0000_0002)), Err(CodecError::MalformedIntr(_))));
    }

    #[test]
    fn new_rule_constructor_enforces_alignment() {
        // Page 0x44A01 << 12 is not 64 KiB aligned.
        assert!(Command::new_rule(0x44A01, SizeCode::new(4).unwrap(), true, true).is_err());
        assert!(Command::new_rule(0x10_0000, SizeCode::new(0).unwrap(), true, true).is_err());
    }

    #[test]
    fn intr_word_matches_bit_assembly_oracle() {
        let w = encode_intr(Address(0x8000_1ABC), AccessKind::Read);
        let oracle = assemble(&[(12, 20, 0x8_0001), (0, 1, 1)]);
        assert_eq!(oracle, 0x8000_1001);
        assert_eq!(w.0, oracle);

        assert_eq!(encode_intr(Address(0), AccessKind::Write).0, 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn intr_roundtrip_preserves_page_and_kind(addr in any::<u32>(), read in any::<bool>()) {
                let kind = if read { AccessKind::Read } else { AccessKind::Write };
                let (page, got_kind) = decode_intr(encode_intr(Address(addr), kind)).unwrap();
                prop_assert_eq!(page, addr >> 12);
                prop_assert_eq!(got_kind, kind);
            }

            #[test]
            fn command_roundtrip_over_sampled_fields(
                code in 0u8..=15,
                page_bits in any::<u32>(),
                r in any::<bool>(),
                w in any::<bool>(),
            ) {
                let size = SizeCode::new(code).unwrap();
                // Align the page to the region so the invariant holds.
                let page = (page_bits & 0xF_FFFF) & (size.base_mask() >> 12);
                let cmd = Command::new_rule(page, size, r, w).unwrap();
                prop_assert_eq!(decode_command(encode_command(&cmd)).unwrap(), cmd);
            }
        }
    }
}
