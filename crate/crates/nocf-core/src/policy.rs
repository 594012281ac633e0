//! Policy rules and the fixed-capacity decision point.
//!
//! A rule grants read and/or write access to one power-of-two region. The
//! store checks a request against every rule in parallel (order never
//! matters) and replaces the oldest rule when a new one arrives at
//! capacity.

use alloc::vec::Vec;
use core::fmt;

use crate::bus::{AccessKind, Address};

/// 4-bit region size code. Code `s` covers `2^(12+s)` bytes, so the
/// representable sizes run from 4 KiB to 128 MiB.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct SizeCode(u8);

impl SizeCode {
    pub const MIN_BYTES: u32 = 1 << 12;

    pub fn new(code: u8) -> Result<Self, PolicyError> {
        if code > 0xF {
            return Err(PolicyError::BadSizeCode(code));
        }
        Ok(SizeCode(code))
    }

    pub fn code(self) -> u8 {
        self.0
    }

    /// Region size in bytes: `2^(12+code)`.
    pub fn decode_size(self) -> u32 {
        1 << (12 + self.0)
    }

    /// Mask selecting the address bits that must match the rule base.
    pub fn base_mask(self) -> u32 {
        !(self.decode_size() - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyError {
    BadSizeCode(u8),
    /// Rule base not aligned to its region size; signals a codec or
    /// kernel bug upstream.
    UnalignedBase { base: Address, size: SizeCode },
    ZeroCapacity,
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::BadSizeCode(c) => write!(f, "size code {c} does not fit 4 bits"),
            PolicyError::UnalignedBase { base, size } => write!(
                f,
                "rule base {base} not aligned to {}-byte region",
                size.decode_size()
            ),
            PolicyError::ZeroCapacity => write!(f, "rule table capacity must be at least 1"),
        }
    }
}

impl core::error::Error for PolicyError {}

/// One masked-region permission. A rule with both permission bits clear is
/// legal and matches nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct PolicyRule {
    pub base: Address,
    pub size: SizeCode,
    pub allow_read: bool,
    pub allow_write: bool,
    /// Insertion sequence number, assigned by the table.
    pub age: u64,
}

impl PolicyRule {
    pub fn new(
        base: Address,
        size: SizeCode,
        allow_read: bool,
        allow_write: bool,
    ) -> Result<Self, PolicyError> {
        if base.0 & !size.base_mask() != 0 {
            return Err(PolicyError::UnalignedBase { base, size });
        }
        Ok(PolicyRule { base, size, allow_read, allow_write, age: 0 })
    }

    fn permits(&self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.allow_read,
            AccessKind::Write => self.allow_write,
        }
    }
}

/// True when the masked address equals the rule base and the permission bit
/// for the access kind is set.
pub fn rule_matches(rule: &PolicyRule, addr: Address, kind: AccessKind) -> bool {
    (addr.0 & rule.size.base_mask()) == rule.base.0 && rule.permits(kind)
}

/// Allow or deny.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(rename_all = "lowercase"))]
pub enum Decision {
    Allow,
    Deny,
}

/// Fixed-capacity rule store with FIFO replacement. By default no rule
/// allows anything.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct RuleTable {
    capacity: usize,
    rules: Vec<PolicyRule>,
    next_age: u64,
}

impl RuleTable {
    pub fn new(capacity: usize) -> Result<Self, PolicyError> {
        if capacity == 0 {
            return Err(PolicyError::ZeroCapacity);
        }
        Ok(RuleTable { capacity, rules: Vec::new(), next_age: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rules(&self) -> &[PolicyRule] {
        &self.rules
    }

    /// Allow iff at least one stored rule matches. Order-independent.
    pub fn decide(&self, addr: Address, kind: AccessKind) -> Decision {
        if self.rules.iter().any(|r| rule_matches(r, addr, kind)) {
            Decision::Allow
        } else {
            Decision::Deny
        }
    }

    /// Insert a rule, evicting the oldest one at capacity. Rejects an
    /// unaligned base rather than storing a rule that can never match
    /// correctly.
    pub fn insert(&mut self, rule: PolicyRule) -> Result<(), PolicyError> {
        if rule.base.0 & !rule.size.base_mask() != 0 {
            return Err(PolicyError::UnalignedBase { base: rule.base, size: rule.size });
        }
        if self.rules.len() == self.capacity {
            let oldest = self
                .rules
                .iter()
                .enumerate()
                .min_by_key(|(_, r)| r.age)
                .map(|(i, _)| i)
                .expect("table at capacity is non-empty");
            self.rules.remove(oldest);
        }
        let mut rule = rule;
        rule.age = self.next_age;
        self.next_age += 1;
        self.rules.push(rule);
        Ok(())
    }

    /// Drop every rule; capacity and the age counter are preserved.
    pub fn flush(&mut self) {
        self.rules.clear();
    }

    /// Renumber ages to 0..n keeping their relative order. Replacement
    /// depends only on relative age, so this is behavior-preserving; it
    /// lets tables reached through different insertion histories compare
    /// equal.
    pub fn renumber_ages(&mut self) {
        let mut order: Vec<u64> = self.rules.iter().map(|r| r.age).collect();
        order.sort_unstable();
        for rule in &mut self.rules {
            rule.age = order.binary_search(&rule.age).expect("own age present") as u64;
        }
        self.next_age = self.rules.len() as u64;
    }
}
