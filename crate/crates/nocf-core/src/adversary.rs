//! Misbehaving-IP behaviors: a scripted protocol-violating attacker, and a
//! malicious GPU that extracts commands steganographically embedded in
//! framebuffer pixels and writes an attacker-chosen payload into memory.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::bus::{AccessKind, Address, AddressRequest, PortAction};
use crate::interposer::Response;

/// What an attacker may do with its request channel in one cycle, judged
/// against a fixed reference policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(rename_all = "kebab-case"))]
pub enum AttackerChoice {
    NoRequest,
    Permissible,
    Impermissible,
}

/// A concrete attacker move: the resolved address for a choice. Choice
/// sequences made of these are directly replayable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(rename_all = "kebab-case"))]
pub enum AttackerMove {
    NoRequest,
    Present { addr: Address, permissible: bool },
}

/// The address domain an attacker scenario draws from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioDomain {
    pub allowed: Vec<Address>,
    pub denied: Vec<Address>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainError {
    NoAllowedAddress,
    NoDeniedAddress,
}

impl fmt::Display for DomainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainError::NoAllowedAddress => write!(f, "scenario domain has no allowed address"),
            DomainError::NoDeniedAddress => write!(f, "scenario domain has no denied address"),
        }
    }
}

impl core::error::Error for DomainError {}

impl ScenarioDomain {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.allowed.is_empty() {
            return Err(DomainError::NoAllowedAddress);
        }
        if self.denied.is_empty() {
            return Err(DomainError::NoDeniedAddress);
        }
        Ok(())
    }
}

/// Resolve a choice sequence entry into the port action for a cycle.
/// Past the end of the sequence the attacker goes quiet.
pub fn attacker_emit(
    choices: &[AttackerChoice],
    cycle: u64,
    domain: &ScenarioDomain,
    kind: AccessKind,
    id: u8,
) -> PortAction {
    let choice = choices.get(cycle as usize).copied().unwrap_or(AttackerChoice::NoRequest);
    let addr = match choice {
        AttackerChoice::NoRequest => return PortAction::NoRequest,
        AttackerChoice::Permissible => domain.allowed[0],
        AttackerChoice::Impermissible => domain.denied[0],
    };
    PortAction::Present(AddressRequest::word(id, addr, kind))
}

/// A fully resolved per-cycle attacker script, e.g. a counterexample's
/// choice column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttackerScript {
    pub kind: AccessKind,
    pub id: u8,
    pub moves: Vec<AttackerMove>,
}

impl AttackerScript {
    pub fn action_at(&self, cycle: u64) -> PortAction {
        match self.moves.get(cycle as usize) {
            Some(AttackerMove::Present { addr, .. }) => {
                PortAction::Present(AddressRequest::word(self.id, *addr, self.kind))
            }
            _ => PortAction::NoRequest,
        }
    }
}

/// What a master observes at its port each cycle: which requests the
/// interposer accepted toward the fabric, any error response, and returned
/// read data.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PortFeedback {
    pub forwarded_read: Option<AddressRequest>,
    pub forwarded_write: Option<AddressRequest>,
    pub response_read: Option<Response>,
    pub response_write: Option<Response>,
    pub read_return: Option<(AddressRequest, Vec<u8>)>,
}

/// What a behavior drives onto its port in one cycle.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PortDrive {
    pub read: PortAction,
    pub write: PortAction,
    /// Payload bytes for a presented write request.
    pub write_data: Option<Vec<u8>>,
}

// --- steganographic framebuffer channel ---

/// A framebuffer image: 32-bit pixels, 4 bytes each. Byte 0 of each pixel
/// is the steganographic carrier byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Framebuffer {
    pub base: Address,
    pub pixels: Vec<u32>,
}

impl Framebuffer {
    pub fn new(base: Address, pixels: usize) -> Self {
        Framebuffer { base, pixels: alloc::vec![0u32; pixels] }
    }

    pub fn carrier_byte(&self, pixel: usize) -> u8 {
        (self.pixels[pixel] & 0xFF) as u8
    }

    /// Little-endian byte image for loading into a memory slave.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.to_le_bytes()).collect()
    }
}

/// A command hidden in a framebuffer: after the trigger come four carrier
/// bytes of destination address, two of payload length, then the payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StegoCommand {
    pub dest: Address,
    pub payload: Vec<u8>,
}

/// Carrier bytes occupied by a command with the given payload length.
pub fn stego_pixels(payload_len: usize) -> usize {
    8 + 4 + 2 + payload_len
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StegoError {
    PayloadTooLong(usize),
    FramebufferTooSmall { need: usize, have: usize },
}

impl fmt::Display for StegoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StegoError::PayloadTooLong(n) => write!(f, "payload of {n} bytes exceeds 16-bit length"),
            StegoError::FramebufferTooSmall { need, have } => {
                write!(f, "framebuffer of {have} pixels cannot carry {need} command bytes")
            }
        }
    }
}

impl core::error::Error for StegoError {}

/// Embed a command in the carrier bytes of consecutive pixels starting at
/// pixel 0. Bytes 1..3 of every pixel are untouched.
pub fn stego_encode(
    fb: &mut Framebuffer,
    trigger: &[u8; 8],
    cmd: &StegoCommand,
) -> Result<(), StegoError> {
    if cmd.payload.len() > u16::MAX as usize {
        return Err(StegoError::PayloadTooLong(cmd.payload.len()));
    }
    let need = stego_pixels(cmd.payload.len());
    if fb.pixels.len() < need {
        return Err(StegoError::FramebufferTooSmall { need, have: fb.pixels.len() });
    }
    let bytes = trigger
        .iter()
        .copied()
        .chain(cmd.dest.0.to_le_bytes())
        .chain((cmd.payload.len() as u16).to_le_bytes())
        .chain(cmd.payload.iter().copied());
    for (pixel, b) in fb.pixels.iter_mut().zip(bytes) {
        *pixel = (*pixel & 0xFFFF_FF00) | b as u32;
    }
    Ok(())
}

/// Recover a command from a framebuffer, if its carrier bytes start with
/// the trigger.
pub fn stego_decode(fb: &Framebuffer, trigger: &[u8; 8]) -> Option<StegoCommand> {
    if fb.pixels.len() < 14 {
        return None;
    }
    for (i, t) in trigger.iter().enumerate() {
        if fb.carrier_byte(i) != *t {
            return None;
        }
    }
    let byte = |i: usize| fb.carrier_byte(i);
    let dest = Address(u32::from_le_bytes([byte(8), byte(9), byte(10), byte(11)]));
    let len = u16::from_le_bytes([byte(12), byte(13)]) as usize;
    if fb.pixels.len() < stego_pixels(len) {
        return None;
    }
    let payload = (14..14 + len).map(byte).collect();
    Some(StegoCommand { dest, payload })
}

// --- malicious GPU ---

/// A queued scan order, standing in for the GPU's slave command interface.
/// Fires at the first cycle at or after `at` in which the GPU is idle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanDirective {
    pub at: u64,
    pub fb_base: Address,
    pub fb_pixels: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GpuConfig {
    pub trigger: [u8; 8],
    pub read_id: u8,
    pub write_id: u8,
    pub scans: Vec<ScanDirective>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum GpuPhase {
    Idle,
    /// Reading carrier bytes; `collected` holds them in pixel order.
    Scanning { offset: u32, collected: Vec<u8> },
    Writing { dest: Address, payload: Vec<u8>, written: usize },
}

/// The malicious GPU. It reads pixels from a framebuffer in memory one
/// word at a time; when the leading carrier bytes match the trigger it
/// parses the embedded command and writes the payload to the embedded
/// destination. It issues at most one request per cycle, holds each
/// request until the port acknowledges it, and gives up on any decode
/// error.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GpuModel {
    cfg: GpuConfig,
    next_scan: usize,
    phase: GpuPhase,
    fb_base: Address,
    fb_pixels: u32,
    presented: Option<AddressRequest>,
    presented_data: Option<Vec<u8>>,
    awaiting_data: Option<AddressRequest>,
    /// Reads issued and reads completed, for scenario reporting.
    pub reads_issued: u64,
    pub reads_completed: u64,
    pub writes_forwarded: u64,
}

impl GpuModel {
    pub fn new(cfg: GpuConfig) -> Self {
        GpuModel {
            cfg,
            next_scan: 0,
            phase: GpuPhase::Idle,
            fb_base: Address(0),
            fb_pixels: 0,
            presented: None,
            presented_data: None,
            awaiting_data: None,
            reads_issued: 0,
            reads_completed: 0,
            writes_forwarded: 0,
        }
    }

    pub fn is_idle(&self) -> bool {
        matches!(self.phase, GpuPhase::Idle) && self.presented.is_none()
    }

    pub fn step(&mut self, cycle: u64, feedback: &PortFeedback) -> PortDrive {
        self.absorb_feedback(feedback);

        // Arm the next scan order once idle.
        if matches!(self.phase, GpuPhase::Idle) && self.presented.is_none() {
            if let Some(scan) = self.cfg.scans.get(self.next_scan) {
                if cycle >= scan.at {
                    self.fb_base = scan.fb_base;
                    self.fb_pixels = scan.fb_pixels;
                    self.phase = GpuPhase::Scanning { offset: 0, collected: Vec::new() };
                    self.next_scan += 1;
                }
            }
        }

        // Hold an unacknowledged request.
        if let Some(req) = self.presented {
            return self.drive(req);
        }

        match &self.phase {
            GpuPhase::Idle => PortDrive::default(),
            GpuPhase::Scanning { offset, .. } => {
                if self.awaiting_data.is_some() {
                    return PortDrive::default();
                }
                if *offset >= self.fb_pixels {
                    // Image exhausted without a complete command.
                    self.phase = GpuPhase::Idle;
                    return PortDrive::default();
                }
                let addr = self.fb_base.wrapping_add(offset * 4);
                let req = AddressRequest::word(self.cfg.read_id, addr, AccessKind::Read);
                self.presented = Some(req);
                self.presented_data = None;
                self.reads_issued += 1;
                self.drive(req)
            }
            GpuPhase::Writing { dest, payload, written } => {
                if *written >= payload.len() {
                    self.phase = GpuPhase::Idle;
                    return PortDrive::default();
                }
                let chunk_end = (written + 4).min(payload.len());
                let chunk = payload[*written..chunk_end].to_vec();
                let addr = dest.wrapping_add(*written as u32);
                let req = AddressRequest::word(self.cfg.write_id, addr, AccessKind::Write);
                self.presented = Some(req);
                self.presented_data = Some(chunk);
                self.drive(req)
            }
        }
    }

    fn drive(&self, req: AddressRequest) -> PortDrive {
        let mut drive = PortDrive::default();
        match req.kind {
            AccessKind::Read => drive.read = PortAction::Present(req),
            AccessKind::Write => {
                drive.write = PortAction::Present(req);
                drive.write_data = self.presented_data.clone();
            }
        }
        drive
    }

    fn absorb_feedback(&mut self, feedback: &PortFeedback) {
        if let Some(req) = self.presented {
            let response = match req.kind {
                AccessKind::Read => feedback.response_read,
                AccessKind::Write => feedback.response_write,
            };
            if response.map(|r| r.id) == Some(req.id) {
                // Firewall blocked the access; abandon the current command.
                self.presented = None;
                self.presented_data = None;
                self.phase = GpuPhase::Idle;
                return;
            }
            let forwarded = match req.kind {
                AccessKind::Read => feedback.forwarded_read,
                AccessKind::Write => feedback.forwarded_write,
            };
            if forwarded == Some(req) {
                let chunk = self.presented_data.as_ref().map_or(0, Vec::len);
                self.presented = None;
                self.presented_data = None;
                match req.kind {
                    AccessKind::Read => self.awaiting_data = Some(req),
                    AccessKind::Write => {
                        self.writes_forwarded += 1;
                        if let GpuPhase::Writing { written, payload, .. } = &mut self.phase {
                            *written += chunk;
                            if *written >= payload.len() {
                                self.phase = GpuPhase::Idle;
                            }
                        }
                    }
                }
            }
        }

        if let Some(expect) = self.awaiting_data {
            if let Some((req, data)) = &feedback.read_return {
                if *req == expect {
                    self.awaiting_data = None;
                    self.reads_completed += 1;
                    let carrier = data.first().copied().unwrap_or(0);
                    self.consume_carrier(carrier);
                }
            }
        }
    }

    fn consume_carrier(&mut self, byte: u8) {
        let GpuPhase::Scanning { offset, collected } = &mut self.phase else {
            return;
        };
        *offset += 1;
        collected.push(byte);
        let n = collected.len();

        if n <= 8 {
            if collected[n - 1] != self.cfg.trigger[n - 1] {
                // Not a command image.
                self.phase = GpuPhase::Idle;
            }
            return;
        }
        if n < 14 {
            return;
        }
        let len = u16::from_le_bytes([collected[12], collected[13]]) as usize;
        if n == 14 + len {
            let dest =
                Address(u32::from_le_bytes([collected[8], collected[9], collected[10], collected[11]]));
            let payload = collected[14..].to_vec();
            self.phase = if payload.is_empty() {
                GpuPhase::Idle
            } else {
                GpuPhase::Writing { dest, payload, written: 0 }
            };
        }
    }
}

// --- injection oracle ---

/// Expected contents of the two injected regions: the interrupt-hook bytes
/// and the main payload, at their scenario-defined addresses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InjectionTarget {
    pub hook_at: Address,
    pub hook: Vec<u8>,
    pub payload_at: Address,
    pub payload: Vec<u8>,
}

/// True iff both regions hold exactly the scenario's bytes, reading memory
/// through `read(addr, len)`.
pub fn keylogger_injected<F>(read: F, target: &InjectionTarget) -> bool
where
    F: Fn(Address, usize) -> Vec<u8>,
{
    read(target.hook_at, target.hook.len()) == target.hook
        && read(target.payload_at, target.payload.len()) == target.payload
}

/// Deterministic filler bytes for scenario images, derived from a tag.
pub fn pattern_bytes(tag: &str, len: usize) -> Vec<u8> {
    let mut state = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.bytes() {
        state = (state ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
    }
    (0..len)
        .map(|i| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 32) as u8) ^ (i as u8)
        })
        .collect()
}

/// Human-oriented one-line description of a move sequence.
pub fn describe_moves(moves: &[AttackerMove]) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    for (i, m) in moves.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        match m {
            AttackerMove::NoRequest => s.push_str("idle"),
            AttackerMove::Present { addr, permissible: true } => {
                let _ = write!(s, "permissible {addr}");
            }
            AttackerMove::Present { addr, permissible: false } => {
                let _ = write!(s, "impermissible {addr}");
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRIGGER: [u8; 8] = [0x4E, 0x6F, 0x43, 0x46, 0xC3, 0x5A, 0x99, 0x7E];

    #[test]
    fn attacker_emit_resolves_choices_against_domain() {
        let domain = ScenarioDomain {
            allowed: vec![Address(0x8000_0000)],
            denied: vec![Address(0x9000_0000)],
        };
        domain.validate().unwrap();
        let choices = [AttackerChoice::Permissible, AttackerChoice::Impermissible];
        let ok = attacker_emit(&choices, 0, &domain, AccessKind::Write, 0);
        assert_eq!(ok.request().unwrap().addr, Address(0x8000_0000));
        let bad = attacker_emit(&choices, 1, &domain, AccessKind::Write, 0);
        assert_eq!(bad.request().unwrap().addr, Address(0x9000_0000));
        assert_eq!(attacker_emit(&choices, 2, &domain, AccessKind::Write, 0), PortAction::NoRequest);

        let empty = ScenarioDomain { allowed: vec![Address(0)], denied: vec![] };
        assert_eq!(empty.validate(), Err(DomainError::NoDeniedAddress));
    }

    #[test]
    fn stego_roundtrip_and_carrier_isolation() {
        let mut fb = Framebuffer::new(Address(0x9000_0000), 64);
        // Fill the upper pixel bytes with a gradient to detect clobbering.
        for (i, p) in fb.pixels.iter_mut().enumerate() {
            *p = ((i as u32) << 8) | 0xAABB_0000 | (i as u32 & 0xFF);
        }
        let before = fb.pixels.clone();

        let cmd = StegoCommand { dest: Address(0x8000_3000), payload: pattern_bytes("p", 21) };
        stego_encode(&mut fb, &TRIGGER, &cmd).unwrap();
        assert_eq!(stego_decode(&fb, &TRIGGER), Some(cmd));

        for (a, b) in fb.pixels.iter().zip(before) {
            assert_eq!(a & 0xFFFF_FF00, b & 0xFFFF_FF00, "non-carrier bytes must not change");
        }
    }

    #[test]
    fn stego_encode_rejects_small_framebuffer() {
        let mut fb = Framebuffer::new(Address(0), 10);
        let cmd = StegoCommand { dest: Address(0), payload: vec![1, 2, 3] };
        assert!(matches!(
            stego_encode(&mut fb, &TRIGGER, &cmd),
            Err(StegoError::FramebufferTooSmall { .. })
        ));
    }

    /// Perfect-memory harness: forwards every request immediately and
    /// returns framebuffer words with a one-cycle delay.
    fn run_gpu_against_memory(
        gpu: &mut GpuModel,
        fb_bytes: &[u8],
        fb_base: Address,
        cycles: u64,
    ) -> Vec<(Address, Vec<u8>)> {
        let mut writes = Vec::new();
        let mut feedback = PortFeedback::default();
        for cycle in 0..cycles {
            let drive = gpu.step(cycle, &feedback);
            feedback = PortFeedback::default();
            if let PortAction::Present(req) = drive.read {
                feedback.forwarded_read = Some(req);
                let off = req.addr.0.wrapping_sub(fb_base.0) as usize;
                let data = fb_bytes[off..off + 4].to_vec();
                feedback.read_return = Some((req, data));
            }
            if let PortAction::Present(req) = drive.write {
                feedback.forwarded_write = Some(req);
                writes.push((req.addr, drive.write_data.clone().unwrap_or_default()));
            }
        }
        writes
    }

    #[test]
    fn gpu_extracts_and_writes_embedded_payload() {
        let payload = pattern_bytes("payload", 21);
        let mut fb = Framebuffer::new(Address(0x9000_0000), 64);
        let cmd = StegoCommand { dest: Address(0x8000_3000), payload: payload.clone() };
        stego_encode(&mut fb, &TRIGGER, &cmd).unwrap();

        let mut gpu = GpuModel::new(GpuConfig {
            trigger: TRIGGER,
            read_id: 0,
            write_id: 1,
            scans: vec![ScanDirective { at: 0, fb_base: fb.base, fb_pixels: 64 }],
        });
        let writes = run_gpu_against_memory(&mut gpu, &fb.to_bytes(), fb.base, 400);

        let mut landed = alloc::collections::BTreeMap::new();
        for (addr, bytes) in writes {
            for (i, b) in bytes.iter().enumerate() {
                landed.insert(addr.0 + i as u32, *b);
            }
        }
        let got: Vec<u8> =
            (0..payload.len()).map(|i| landed[&(0x8000_3000 + i as u32)]).collect();
        assert_eq!(got, payload);
        assert!(gpu.is_idle());
    }

    #[test]
    fn gpu_never_writes_without_trigger_match() {
        // Fixed non-trigger data: an accidental 8-byte trigger has
        // probability 2^-64, so plain content is a sound stand-in.
        let mut fb = Framebuffer::new(Address(0x9000_0000), 64);
        for (i, p) in fb.pixels.iter_mut().enumerate() {
            *p = 0x0101_0100 | (i as u32 & 0xFF);
        }
        let mut gpu = GpuModel::new(GpuConfig {
            trigger: TRIGGER,
            read_id: 0,
            write_id: 1,
            scans: vec![ScanDirective { at: 0, fb_base: fb.base, fb_pixels: 64 }],
        });
        let writes = run_gpu_against_memory(&mut gpu, &fb.to_bytes(), fb.base, 200);
        assert!(writes.is_empty());
        assert!(gpu.is_idle());
        // The scan aborted on the first mismatching carrier byte.
        assert!(gpu.reads_completed <= 8);
    }

    #[test]
    fn keylogger_oracle_compares_memory_bytes() {
        let target = InjectionTarget {
            hook_at: Address(0x8000_1230),
            hook: pattern_bytes("hook", 20),
            payload_at: Address(0x8000_3000),
            payload: pattern_bytes("payload", 360),
        };
        let mut mem = alloc::collections::BTreeMap::new();
        for (i, b) in target.hook.iter().enumerate() {
            mem.insert(target.hook_at.0 + i as u32, *b);
        }
        let read = |addr: Address, len: usize| -> Vec<u8> {
            (0..len).map(|i| mem.get(&(addr.0 + i as u32)).copied().unwrap_or(0)).collect()
        };
        assert!(!keylogger_injected(&read, &target), "payload region still empty");

        let mut mem2 = mem.clone();
        for (i, b) in target.payload.iter().enumerate() {
            mem2.insert(target.payload_at.0 + i as u32, *b);
        }
        let read2 = |addr: Address, len: usize| -> Vec<u8> {
            (0..len).map(|i| mem2.get(&(addr.0 + i as u32)).copied().unwrap_or(0)).collect()
        };
        assert!(keylogger_injected(&read2, &target));
    }
}
