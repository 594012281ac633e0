//! The firewall interposer: per-channel address filters, the channel
//! control state machines, and their composition around one shared rule
//! table and one configuration link.
//!
//! Each request channel (read, write) is gated by an [`AddressFilter`] that
//! owns the handshake with the master and the NoC fabric, driven by a
//! [`ChannelController`] that owns the deny/interrupt/recheck protocol with
//! the integrity core. The filter buffers at most one committed request.
//!
//! The [`FilterVariant`] distinguishes the straightforward design, which
//! forwards whatever the master's wires carry once the fabric becomes
//! ready, from the hardened design that forwards exactly the request that
//! was subjected to the access control check.

use alloc::vec::Vec;

use crate::bus::{AccessKind, AddressRequest, PortAction, ResponseKind};
use crate::codec::{decode_command, encode_intr, Command, FslWord};
use crate::policy::{Decision, PolicyError, PolicyRule, RuleTable};

/// Filter handshake state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(rename_all = "lowercase"))]
pub enum FilterState {
    Idle,
    Committed,
    Waiting,
}

/// Which forwarding behavior the filter implements in the waiting state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(rename_all = "kebab-case"))]
pub enum FilterVariant {
    /// Forwards the master's current wires when the fabric becomes ready.
    Vulnerable,
    /// Forwards the buffered request that was actually checked.
    CommitBuffered,
}

/// Gate for one request channel. Buffers the request under evaluation and
/// completes the handshake toward the fabric.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct AddressFilter {
    pub state: FilterState,
    /// The master's request wires as sampled this cycle.
    pub live_request: Option<AddressRequest>,
    /// The request captured when the filter left idle.
    pub committed_request: Option<AddressRequest>,
    pub pulse_committed_valid: bool,
    pub pulse_forwarded: bool,
    pub pulse_policy_compliant: bool,
    pub variant: FilterVariant,
}

impl AddressFilter {
    pub fn new(variant: FilterVariant) -> Self {
        AddressFilter {
            state: FilterState::Idle,
            live_request: None,
            committed_request: None,
            pulse_committed_valid: false,
            pulse_forwarded: false,
            pulse_policy_compliant: false,
            variant,
        }
    }

    /// The request the channel is evaluating this cycle: the buffered one
    /// once committed, otherwise whatever the master drives.
    pub fn current_request(&self) -> Option<&AddressRequest> {
        match self.state {
            FilterState::Idle => self.live_request.as_ref(),
            _ => self.committed_request.as_ref(),
        }
    }

    /// Advance one cycle. `decision` must be the decision the channel
    /// controller delivered to the filter this cycle, if any. Returns the
    /// request forwarded to the fabric, if one was.
    ///
    /// A master that changes its wires at any time is legal input; the
    /// handshake rules decide what that means per variant.
    pub fn step(
        &mut self,
        master: &PortAction,
        fabric_ready: bool,
        decision: Option<Decision>,
    ) -> Option<AddressRequest> {
        self.pulse_committed_valid = false;
        self.pulse_forwarded = false;
        self.pulse_policy_compliant = decision == Some(Decision::Allow);
        self.live_request = master.request().copied();

        let mut forwarded = None;
        match self.state {
            FilterState::Idle => {
                if let Some(req) = self.live_request {
                    match decision {
                        Some(Decision::Allow) if fabric_ready => {
                            // Passes straight through this cycle.
                            forwarded = Some(req);
                        }
                        Some(Decision::Allow) => {
                            self.committed_request = Some(req);
                            self.state = FilterState::Waiting;
                        }
                        _ => {
                            // Denied or no decision yet: buffer and hold.
                            self.committed_request = Some(req);
                            self.state = FilterState::Committed;
                        }
                    }
                }
            }
            FilterState::Committed => match decision {
                Some(Decision::Allow) => {
                    if fabric_ready {
                        forwarded = self.committed_request.take();
                        self.state = FilterState::Idle;
                    } else {
                        self.state = FilterState::Waiting;
                    }
                }
                Some(Decision::Deny) => {
                    self.committed_request = None;
                    self.state = FilterState::Idle;
                }
                None => {}
            },
            FilterState::Waiting => {
                if decision == Some(Decision::Deny) {
                    // The policy changed between approval and the fabric
                    // handshake and the recheck denied; drop the request.
                    self.committed_request = None;
                    self.state = FilterState::Idle;
                } else if fabric_ready {
                    forwarded = match self.variant {
                        FilterVariant::CommitBuffered => self.committed_request,
                        FilterVariant::Vulnerable => self.live_request,
                    };
                    self.committed_request = None;
                    self.state = FilterState::Idle;
                }
            }
        }

        self.pulse_forwarded = forwarded.is_some();
        self.pulse_committed_valid = self.committed_request.is_some();
        forwarded
    }
}

/// Channel control state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(rename_all = "lowercase"))]
pub enum ChannelState {
    /// Debug pass-through; never entered in normal configurations.
    Permit,
    Enforce,
    Request,
    Wait,
    Check,
    Respond,
    Resume,
}

/// A response the interposer drives on a channel while it has taken the
/// response path over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Response {
    pub id: u8,
    pub kind: ResponseKind,
}

/// Conditions worth surfacing that do not alter machine behavior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Diagnostic {
    /// Received command word had nonzero reserved bits.
    MalformedCommand(u32),
    /// A NewRule command carried an unaligned base and was dropped.
    RejectedRule(u32),
    /// An enforce command arrived while the channel was not waiting for
    /// one; protocol desync with the integrity core.
    UnexpectedEnforce(AccessKind),
    /// A recheck fired after the buffered request had already left.
    StaleCheck(AccessKind),
    /// Request state found no buffered request to report.
    StaleRequest(AccessKind),
}

/// One request channel: the controller plus its filter.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ChannelController {
    pub state: ChannelState,
    pub filter: AddressFilter,
    pub kind: AccessKind,
    /// Transaction id latched for the response path.
    pub saved_id: Option<u8>,
    /// Burst length latched on the read channel for the response duration.
    pub saved_len: Option<u8>,
    pub respond_beats_left: u8,
}

/// Everything a channel produced in one cycle.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChannelOutput {
    pub forwarded: Option<AddressRequest>,
    /// Encoded interrupt word toward the integrity core.
    pub fsl_out: Option<FslWord>,
    pub response: Option<Response>,
    /// The decision computed for the current request this cycle, if any.
    pub decision: Option<Decision>,
    pub diagnostics: Vec<Diagnostic>,
}

impl ChannelController {
    pub fn new(kind: AccessKind, variant: FilterVariant) -> Self {
        ChannelController {
            state: ChannelState::Enforce,
            filter: AddressFilter::new(variant),
            kind,
            saved_id: None,
            saved_len: None,
            respond_beats_left: 0,
        }
    }

    /// Advance one cycle against the shared rule table.
    ///
    /// `enforce_cmd` is true when an enforce command addressed to this
    /// channel was consumed from the configuration link this cycle.
    /// `policy_busy` suppresses all decisions for the cycle. `fsl_out_ready`
    /// gates interrupt emission on outgoing FIFO space.
    pub fn step(
        &mut self,
        table: &RuleTable,
        master: &PortAction,
        fabric_ready: bool,
        enforce_cmd: bool,
        policy_busy: bool,
        fsl_out_ready: bool,
    ) -> ChannelOutput {
        let mut out = ChannelOutput::default();

        if enforce_cmd && self.state != ChannelState::Wait {
            out.diagnostics.push(Diagnostic::UnexpectedEnforce(self.kind));
        }

        // The request under evaluation: the live wires while idle, the
        // buffered request once committed.
        let current: Option<AddressRequest> = match self.filter.state {
            FilterState::Idle => master.request().copied(),
            _ => self.filter.committed_request,
        };

        // No decisions are issued while the policy is being updated; the
        // permit state unconditionally allows.
        let decision: Option<Decision> = if policy_busy {
            None
        } else if self.state == ChannelState::Permit {
            current.map(|_| Decision::Allow)
        } else {
            current.map(|req| table.decide(req.addr, self.kind))
        };
        out.decision = decision;

        match self.state {
            ChannelState::Permit | ChannelState::Enforce => {
                if decision == Some(Decision::Allow) {
                    out.forwarded = self.filter.step(master, fabric_ready, decision);
                } else {
                    // The filter is not told about a deny here; it buffers
                    // the request while the controller raises an interrupt.
                    out.forwarded = self.filter.step(master, fabric_ready, None);
                    if decision == Some(Decision::Deny) && self.state == ChannelState::Enforce {
                        self.state = ChannelState::Request;
                    }
                }
            }
            ChannelState::Request => {
                out.forwarded = self.filter.step(master, fabric_ready, None);
                if fsl_out_ready {
                    if let Some(req) = self.filter.committed_request {
                        out.fsl_out = Some(FslWord(encode_intr(req.addr, self.kind).0));
                        self.state = ChannelState::Wait;
                    } else {
                        out.diagnostics.push(Diagnostic::StaleRequest(self.kind));
                        self.state = ChannelState::Enforce;
                    }
                }
                // Otherwise block here until the FIFO has space.
            }
            ChannelState::Wait => {
                out.forwarded = self.filter.step(master, fabric_ready, None);
                if enforce_cmd {
                    self.state = ChannelState::Check;
                }
            }
            ChannelState::Check => {
                if self.filter.committed_request.is_none() {
                    // The buffered request already left (forwarded from the
                    // waiting state while the kernel round trip was in
                    // flight). Nothing to recheck.
                    out.diagnostics.push(Diagnostic::StaleCheck(self.kind));
                    out.forwarded = self.filter.step(master, fabric_ready, None);
                    self.state = ChannelState::Resume;
                } else if let Some(dec) = decision {
                    let req = self.filter.committed_request.expect("checked above");
                    self.saved_id = Some(req.id);
                    if self.kind == AccessKind::Read {
                        self.saved_len = Some(req.burst_len);
                    }
                    out.forwarded = self.filter.step(master, fabric_ready, Some(dec));
                    match dec {
                        Decision::Allow => self.state = ChannelState::Resume,
                        Decision::Deny => {
                            self.respond_beats_left = match self.kind {
                                AccessKind::Read => self.saved_len.expect("latched above"),
                                AccessKind::Write => 1,
                            };
                            self.state = ChannelState::Respond;
                        }
                    }
                } else {
                    // Policy update in flight; hold until a decision can be
                    // issued.
                    out.forwarded = self.filter.step(master, fabric_ready, None);
                }
            }
            ChannelState::Respond => {
                out.forwarded = self.filter.step(master, fabric_ready, None);
                let id = self.saved_id.expect("latched in check");
                out.response = Some(Response { id, kind: ResponseKind::DecodeError });
                self.respond_beats_left -= 1;
                if self.respond_beats_left == 0 {
                    match self.kind {
                        // The write channel responds once and resumes
                        // enforcement immediately.
                        AccessKind::Write => {
                            self.saved_id = None;
                            self.state = ChannelState::Enforce;
                        }
                        // The read channel has held the error for the whole
                        // burst length by now.
                        AccessKind::Read => self.state = ChannelState::Resume,
                    }
                }
            }
            ChannelState::Resume => {
                out.forwarded = self.filter.step(master, fabric_ready, None);
                self.saved_id = None;
                self.saved_len = None;
                self.state = ChannelState::Enforce;
            }
        }

        out
    }
}

/// Inputs to one interposer cycle.
#[derive(Clone, Copy, Debug)]
pub struct CycleInputs<'a> {
    pub master_read: &'a PortAction,
    pub master_write: &'a PortAction,
    pub fabric_ready_read: bool,
    pub fabric_ready_write: bool,
    /// At most one configuration word per cycle (FIFO link rate).
    pub fsl_in: Option<FslWord>,
    /// Whether the outgoing FIFO toward the integrity core has space.
    pub fsl_out_ready: bool,
}

impl<'a> CycleInputs<'a> {
    /// Quiescent inputs with an always-ready fabric.
    pub fn idle() -> CycleInputs<'static> {
        CycleInputs {
            master_read: &PortAction::NoRequest,
            master_write: &PortAction::NoRequest,
            fabric_ready_read: true,
            fabric_ready_write: true,
            fsl_in: None,
            fsl_out_ready: true,
        }
    }
}

/// Outputs from one interposer cycle.
#[derive(Clone, Debug, Default)]
pub struct CycleOutput {
    pub forwarded_read: Option<AddressRequest>,
    pub forwarded_write: Option<AddressRequest>,
    pub fsl_out: Option<FslWord>,
    pub response_read: Option<Response>,
    pub response_write: Option<Response>,
    pub decision_read: Option<Decision>,
    pub decision_write: Option<Decision>,
    pub policy_busy: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl CycleOutput {
    pub fn forwarded(&self, kind: AccessKind) -> Option<AddressRequest> {
        match kind {
            AccessKind::Read => self.forwarded_read,
            AccessKind::Write => self.forwarded_write,
        }
    }

    pub fn response(&self, kind: AccessKind) -> Option<Response> {
        match kind {
            AccessKind::Read => self.response_read,
            AccessKind::Write => self.response_write,
        }
    }
}

/// One interposer instance: a shared rule table, two channel controllers,
/// and the command decode for its configuration link.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Interposer {
    table: RuleTable,
    pub read: ChannelController,
    pub write: ChannelController,
}

impl Interposer {
    pub fn new(capacity: usize, variant: FilterVariant) -> Result<Self, PolicyError> {
        Ok(Interposer {
            table: RuleTable::new(capacity)?,
            read: ChannelController::new(AccessKind::Read, variant),
            write: ChannelController::new(AccessKind::Write, variant),
        })
    }

    pub fn table(&self) -> &RuleTable {
        &self.table
    }

    /// Pre-install a rule, as a predetermined policy would.
    pub fn preload_rule(&mut self, rule: PolicyRule) -> Result<(), PolicyError> {
        self.table.insert(rule)
    }

    /// Switch both channels to the debug pass-through state.
    pub fn enable_debug_permit(&mut self) {
        self.read.state = ChannelState::Permit;
        self.write.state = ChannelState::Permit;
    }

    pub fn channel(&self, kind: AccessKind) -> &ChannelController {
        match kind {
            AccessKind::Read => &self.read,
            AccessKind::Write => &self.write,
        }
    }

    /// Normalize rule ages to their relative order. Behavior-preserving
    /// (replacement depends only on relative age); used to make states
    /// reached through different insertion histories compare equal.
    pub fn canonicalize_ages(&mut self) {
        self.table.renumber_ages();
    }

    /// Advance one cycle: consume at most one configuration word, then step
    /// both channels against the (possibly just-updated) rule table.
    ///
    /// A rule update takes effect before any decision this cycle and
    /// suppresses decisions for the cycle. When both channels need the
    /// single outgoing link in one cycle, the write channel goes first.
    pub fn cycle(&mut self, inputs: CycleInputs<'_>) -> CycleOutput {
        let mut out = CycleOutput::default();
        let mut enforce_read = false;
        let mut enforce_write = false;

        if let Some(word) = inputs.fsl_in {
            match decode_command(word) {
                Ok(Command::NewRule { base_page, size, allow_read, allow_write }) => {
                    out.policy_busy = true;
                    match PolicyRule::new(
                        crate::bus::Address::from_page(base_page),
                        size,
                        allow_read,
                        allow_write,
                    )
                    .and_then(|rule| self.table.insert(rule))
                    {
                        Ok(()) => {}
                        Err(_) => out.diagnostics.push(Diagnostic::RejectedRule(word.0)),
                    }
                }
                Ok(Command::Flush) => {
                    out.policy_busy = true;
                    self.table.flush();
                }
                Ok(Command::EnforceRead) => enforce_read = true,
                Ok(Command::EnforceWrite) => enforce_write = true,
                Err(_) => out.diagnostics.push(Diagnostic::MalformedCommand(word.0)),
            }
        }

        let wout = self.write.step(
            &self.table,
            inputs.master_write,
            inputs.fabric_ready_write,
            enforce_write,
            out.policy_busy,
            inputs.fsl_out_ready,
        );
        let read_slot = inputs.fsl_out_ready && wout.fsl_out.is_none();
        let rout = self.read.step(
            &self.table,
            inputs.master_read,
            inputs.fabric_ready_read,
            enforce_read,
            out.policy_busy,
            read_slot,
        );

        out.forwarded_write = wout.forwarded;
        out.forwarded_read = rout.forwarded;
        out.fsl_out = wout.fsl_out.or(rout.fsl_out);
        out.response_write = wout.response;
        out.response_read = rout.response;
        out.decision_write = wout.decision;
        out.decision_read = rout.decision;
        out.diagnostics.extend(wout.diagnostics);
        out.diagnostics.extend(rout.diagnostics);
        out
    }
}
