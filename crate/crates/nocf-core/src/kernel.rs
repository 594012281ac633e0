//! Integrity-kernel model: receives interrupt words from interposers over
//! dedicated links, consults a per-master grant map, and answers with rule
//! and enforce commands.
//!
//! The grant map plays the role of the kernel's region-calculation tables:
//! an access is grantable when exactly one configured entry for the faulting
//! master contains it with the right permission. The kernel is fail-closed:
//! anything it cannot attribute to an entry gets an enforce command against
//! an unchanged policy, which the interposer then denies.

use alloc::vec::Vec;
use core::fmt;

use alloc::collections::VecDeque;

use crate::bus::{AccessKind, Address};
use crate::codec::{decode_intr, encode_command, intr_fields, Command, FslWord, IntrWord};
use crate::policy::SizeCode;

/// One grantable region for one master.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct GrantEntry {
    pub master: usize,
    pub base: Address,
    pub size: SizeCode,
    pub allow_read: bool,
    pub allow_write: bool,
}

impl GrantEntry {
    pub fn new(
        master: usize,
        base: Address,
        size: SizeCode,
        allow_read: bool,
        allow_write: bool,
    ) -> Result<Self, KernelConfigError> {
        if base.0 & !size.base_mask() != 0 {
            return Err(KernelConfigError::UnalignedEntry { master, base, size });
        }
        Ok(GrantEntry { master, base, size, allow_read, allow_write })
    }

    pub fn contains(&self, addr: Address) -> bool {
        let base = self.base.0 as u64;
        let a = addr.0 as u64;
        base <= a && a < base + self.size.decode_size() as u64
    }

    pub fn permits(&self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.allow_read,
            AccessKind::Write => self.allow_write,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelConfigError {
    UnalignedEntry { master: usize, base: Address, size: SizeCode },
    /// Two entries for one master overlap; grant lookups would be ambiguous.
    OverlappingEntries { master: usize, first: Address, second: Address },
}

impl fmt::Display for KernelConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelConfigError::UnalignedEntry { master, base, size } => write!(
                f,
                "grant entry for master {master}: base {base} not aligned to {} bytes",
                size.decode_size()
            ),
            KernelConfigError::OverlappingEntries { master, first, second } => write!(
                f,
                "grant entries for master {master} overlap: {first} and {second}"
            ),
        }
    }
}

impl core::error::Error for KernelConfigError {}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct KernelStats {
    pub interrupts: u64,
    pub grants: u64,
    pub denials: u64,
    pub malformed: u64,
}

#[derive(Clone, Debug)]
struct KernelLink {
    /// Master whose port this link serves, for grant lookups.
    owner: usize,
    /// Received interrupt words with their arrival cycle.
    inbox: VecDeque<(u64, IntrWord)>,
    /// Commands awaiting transmission, in emission order.
    outbox: VecDeque<FslWord>,
}

/// The integrity-kernel state: grant map, per-interposer links, counters.
#[derive(Clone, Debug)]
pub struct KernelState {
    grant_map: Vec<GrantEntry>,
    /// Cycles between interrupt arrival and command emission.
    latency: u64,
    links: Vec<KernelLink>,
    pub stats: KernelStats,
}

impl KernelState {
    /// `link_owners[i]` is the master served by link `i`, one link per
    /// interposer.
    pub fn new(
        latency: u64,
        grant_map: Vec<GrantEntry>,
        link_owners: &[usize],
    ) -> Result<Self, KernelConfigError> {
        for (i, a) in grant_map.iter().enumerate() {
            for b in grant_map.iter().skip(i + 1) {
                if a.master != b.master {
                    continue;
                }
                let a_end = a.base.0 as u64 + a.size.decode_size() as u64;
                let b_end = b.base.0 as u64 + b.size.decode_size() as u64;
                if (a.base.0 as u64) < b_end && (b.base.0 as u64) < a_end {
                    return Err(KernelConfigError::OverlappingEntries {
                        master: a.master,
                        first: a.base,
                        second: b.base,
                    });
                }
            }
        }
        Ok(KernelState {
            grant_map,
            latency,
            links: link_owners
                .iter()
                .map(|&owner| KernelLink {
                    owner,
                    inbox: VecDeque::new(),
                    outbox: VecDeque::new(),
                })
                .collect(),
            stats: KernelStats::default(),
        })
    }

    pub fn latency(&self) -> u64 {
        self.latency
    }

    pub fn grant_map(&self) -> &[GrantEntry] {
        &self.grant_map
    }

    /// The unique grant entry covering the faulting page with the right
    /// permission, or `None` for a denied access.
    pub fn calculate_region(
        &self,
        master: usize,
        page: u32,
        kind: AccessKind,
    ) -> Option<&GrantEntry> {
        let addr = Address::from_page(page);
        self.grant_map
            .iter()
            .find(|e| e.master == master && e.contains(addr) && e.permits(kind))
    }

    /// Handle one interrupt word: on a grant, emit the rule for the whole
    /// containing entry followed by the matching enforce command; on a
    /// denial (or a malformed word), emit the enforce command alone so the
    /// recheck runs against the unchanged policy. Returns the emitted words,
    /// which are also queued on the link's outbox.
    pub fn handle_intr(&mut self, link: usize, word: IntrWord) -> Vec<FslWord> {
        self.stats.interrupts += 1;
        let owner = self.links[link].owner;
        let mut commands = Vec::with_capacity(2);

        match decode_intr(word) {
            Ok((page, kind)) => {
                match self.calculate_region(owner, page, kind) {
                    Some(entry) => {
                        let rule = Command::new_rule(
                            entry.base.page(),
                            entry.size,
                            entry.allow_read,
                            entry.allow_write,
                        )
                        .expect("grant entries are aligned by construction");
                        commands.push(encode_command(&rule));
                        self.stats.grants += 1;
                    }
                    None => self.stats.denials += 1,
                }
                commands.push(encode_command(&Command::enforce(kind)));
            }
            Err(_) => {
                // Fail closed: release the channel with the policy untouched
                // so the recheck denies. The kind bit is still readable.
                self.stats.malformed += 1;
                self.stats.denials += 1;
                let (_, kind) = intr_fields(word);
                commands.push(encode_command(&Command::enforce(kind)));
            }
        }

        let link = &mut self.links[link];
        link.outbox.extend(commands.iter().copied());
        commands
    }

    /// Queue an interrupt word that arrived on a link this cycle.
    pub fn deliver_intr(&mut self, link: usize, word: IntrWord, now: u64) {
        self.links[link].inbox.push_back((now, word));
    }

    /// Handle every queued interrupt whose service latency has elapsed, in
    /// link-id order.
    pub fn service(&mut self, now: u64) {
        for link in 0..self.links.len() {
            while let Some(&(arrived, word)) = self.links[link].inbox.front() {
                if now < arrived + self.latency {
                    break;
                }
                self.links[link].inbox.pop_front();
                self.handle_intr(link, word);
            }
        }
    }

    /// Next command awaiting transmission on a link.
    pub fn pop_command(&mut self, link: usize) -> Option<FslWord> {
        self.links[link].outbox.pop_front()
    }

    pub fn pending_commands(&self, link: usize) -> usize {
        self.links[link].outbox.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{decode_command, encode_intr};

    fn kernel() -> KernelState {
        // Master 0 owns links 0 and 1; master 1 owns link 2.
        let entries = vec![
            GrantEntry::new(0, Address(0x8000_0000), SizeCode::new(15).unwrap(), true, true)
                .unwrap(),
            GrantEntry::new(1, Address(0x4000_0000), SizeCode::new(4).unwrap(), false, true)
                .unwrap(),
        ];
        KernelState::new(3, entries, &[0, 0, 1]).unwrap()
    }

    #[test]
    fn calculate_region_finds_containing_entry() {
        let k = kernel();
        // Containment oracle: 0x80001 << 12 lies inside [0x80000000, +128MiB).
        let hit = k.calculate_region(0, 0x8_0001, AccessKind::Read).unwrap();
        assert_eq!(hit.base, Address(0x8000_0000));
        assert_eq!(hit.size.code(), 15);
        assert!(hit.allow_read && hit.allow_write);

        assert!(k.calculate_region(0, 0x9_0000, AccessKind::Read).is_none());
        assert!(k.calculate_region(1, 0x9_0000, AccessKind::Read).is_none());
        // Permission must cover the faulting kind.
        assert!(k.calculate_region(1, 0x4_0000, AccessKind::Read).is_none());
        assert!(k.calculate_region(1, 0x4_0000, AccessKind::Write).is_some());
    }

    #[test]
    fn grantable_fault_emits_rule_then_enforce() {
        let mut k = kernel();
        let words = k.handle_intr(0, encode_intr(Address(0x8000_1000), AccessKind::Read));
        assert_eq!(words.len(), 2);
        let rule = decode_command(words[0]).unwrap();
        assert_eq!(
            rule,
            Command::new_rule(0x8000_0000 >> 12, SizeCode::new(15).unwrap(), true, true).unwrap()
        );
        assert_eq!(decode_command(words[1]).unwrap(), Command::EnforceRead);
        assert_eq!(k.stats.grants, 1);
        assert_eq!(k.stats.interrupts, 1);
    }

    #[test]
    fn denied_fault_emits_enforce_only() {
        let mut k = kernel();
        let words = k.handle_intr(2, encode_intr(Address(0x9000_0000), AccessKind::Write));
        assert_eq!(words.len(), 1);
        assert_eq!(decode_command(words[0]).unwrap(), Command::EnforceWrite);
        assert_eq!(k.stats.denials, 1);

        // Write-only entry, read fault inside it: denied.
        let words = k.handle_intr(2, encode_intr(Address(0x4000_0000), AccessKind::Read));
        assert_eq!(words.len(), 1);
        assert_eq!(decode_command(words[0]).unwrap(), Command::EnforceRead);
        assert_eq!(k.stats.denials, 2);
    }

    #[test]
    fn commands_route_to_their_own_link() {
        let mut k = kernel();
        k.handle_intr(0, encode_intr(Address(0x8000_0000), AccessKind::Read));
        k.handle_intr(2, encode_intr(Address(0x0000_0000), AccessKind::Write));
        assert_eq!(k.pending_commands(0), 2);
        assert_eq!(k.pending_commands(1), 0);
        assert_eq!(k.pending_commands(2), 1);
    }

    #[test]
    fn malformed_word_fails_closed() {
        let mut k = kernel();
        // Reserved bit set; kind bit says write.
        let words = k.handle_intr(0, IntrWord(0x8000_0002));
        assert_eq!(words.len(), 1);
        assert_eq!(decode_command(words[0]).unwrap(), Command::EnforceWrite);
        assert_eq!(k.stats.malformed, 1);
    }

    #[test]
    fn service_honors_latency_and_link_order() {
        let mut k = kernel();
        k.deliver_intr(1, encode_intr(Address(0x8000_0000), AccessKind::Read), 10);
        k.service(12);
        assert_eq!(k.stats.interrupts, 0, "latency not yet elapsed");
        k.service(13);
        assert_eq!(k.stats.interrupts, 1);
        assert_eq!(k.pending_commands(1), 2);
    }

    #[test]
    fn overlapping_entries_for_one_master_rejected() {
        let entries = vec![
            GrantEntry::new(0, Address(0x8000_0000), SizeCode::new(4).unwrap(), true, true)
                .unwrap(),
            GrantEntry::new(0, Address(0x8000_0000), SizeCode::new(0).unwrap(), true, false)
                .unwrap(),
        ];
        assert!(matches!(
            KernelState::new(3, entries, &[0]),
            Err(KernelConfigError::OverlappingEntries { .. })
        ));

        // Same regions on different masters are fine.
        let entries = vec![
            GrantEntry::new(0, Address(0x8000_0000), SizeCode::new(4).unwrap(), true, true)
                .unwrap(),
            GrantEntry::new(1, Address(0x8000_0000), SizeCode::new(4).unwrap(), true, true)
                .unwrap(),
        ];
        assert!(KernelState::new(3, entries, &[0, 1]).is_ok());
    }

    #[test]
    fn every_emitted_rule_lies_within_a_grant_entry() {
        let mut k = kernel();
        for page in [0x8_0000u32, 0x8_FFFF, 0xF_FFFF, 0x4_0000] {
            for kind in [AccessKind::Read, AccessKind::Write] {
                for link in 0..3 {
                    let words = k.handle_intr(link, encode_intr(Address::from_page(page), kind));
                    for w in words {
                        if let Ok(Command::NewRule { base_page, size, .. }) = decode_command(w) {
                            let owner = [0usize, 0, 1][link];
                            let base = Address::from_page(base_page);
                            let end = base.0 as u64 + size.decode_size() as u64;
                            let covered = k.grant_map().iter().any(|e| {
                                e.master == owner
                                    && e.base.0 as u64 <= base.0 as u64
                                    && end <= e.base.0 as u64 + e.size.decode_size() as u64
                            });
                            assert!(covered, "rule escapes the grant map");
                        }
                    }
                }
            }
        }
    }
}
