//! Bounded explicit-state search over one interposer channel, an abstract
//! integrity core, and a protocol-violating attacker.
//!
//! Every cycle the attacker may present a permissible request, an
//! impermissible one, or none, and may change its wires while a request is
//! unacknowledged; the fabric is nondeterministically ready; the kernel
//! answers a pending fault with a grant or a denial after a
//! nondeterministic bounded delay. States are expanded breadth-first, so a
//! reported violation has minimal cycle depth.
//!
//! The search drives the same [`Interposer`] cycle function the simulator
//! uses; there is no second implementation of the state machines to drift
//! from. Counterexamples replay through the full simulator for
//! cross-validation.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adversary::AttackerMove;
use crate::adversary::AttackerScript;
use crate::bus::{AccessKind, Address, AddressRequest, PortAction};
use crate::codec::{encode_command, intr_fields, Command, FslWord, IntrWord};
use crate::interposer::{CycleInputs, FilterState, FilterVariant, Interposer, Response};
use crate::kernel::GrantEntry;
use crate::policy::{Decision, PolicyError, PolicyRule, SizeCode};
use crate::sim::{
    Behavior, MasterSetup, MemorySlave, PortSetup, ReadyPattern, Simulator, Topology,
    TopologyError, TraceRecord,
};

/// Which reading of the forwarding invariant the search reports on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(rename_all = "kebab-case"))]
pub enum InvariantMode {
    /// The forwarded request must be the request that was checked: flag a
    /// forward from the buffered path that differs bit-for-bit from the
    /// committed request.
    Strict,
    /// The forwarded request must be allowed by the policy at forwarding
    /// time.
    PolicyAtForward,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckConfig {
    pub variant: FilterVariant,
    pub depth_bound: u32,
    /// The request channel under attack.
    pub channel: AccessKind,
    pub table_capacity: usize,
    /// The fixed reference policy installed before the search starts.
    pub rules: Vec<PolicyRule>,
    pub allowed: Vec<Address>,
    pub denied: Vec<Address>,
    /// The kernel replies between 1 and this many cycles after a fault.
    pub kernel_delay_max: u8,
    /// Whether the attacker may change its wires before acknowledgment.
    pub may_mutate: bool,
    pub state_limit: usize,
    pub mode: InvariantMode,
}

impl Default for CheckConfig {
    fn default() -> Self {
        let rule = PolicyRule::new(
            Address(0x8000_0000),
            SizeCode::new(8).expect("valid code"),
            true,
            true,
        )
        .expect("aligned");
        CheckConfig {
            variant: FilterVariant::Vulnerable,
            depth_bound: 6,
            channel: AccessKind::Write,
            table_capacity: 2,
            rules: alloc::vec![rule],
            allowed: alloc::vec![Address(0x8000_0000)],
            denied: alloc::vec![Address(0x9000_0000)],
            kernel_delay_max: 3,
            may_mutate: true,
            state_limit: 10_000_000,
            mode: InvariantMode::Strict,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CheckConfigError {
    Policy(PolicyError),
    NoAllowedAddress,
    NoDeniedAddress,
    /// An address in `allowed` that the reference table denies, or vice
    /// versa.
    DomainDisagreesWithTable { addr: Address, expected: Decision },
    CapacityTooSmall { rules: usize, capacity: usize },
    ZeroKernelDelay,
}

impl core::fmt::Display for CheckConfigError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CheckConfigError::Policy(e) => write!(f, "reference rule: {e}"),
            CheckConfigError::NoAllowedAddress => write!(f, "address domain has no allowed address"),
            CheckConfigError::NoDeniedAddress => write!(f, "address domain has no denied address"),
            CheckConfigError::DomainDisagreesWithTable { addr, expected } => {
                write!(f, "reference table does not decide {addr} as {expected:?}")
            }
            CheckConfigError::CapacityTooSmall { rules, capacity } => {
                write!(f, "{rules} reference rules exceed table capacity {capacity}")
            }
            CheckConfigError::ZeroKernelDelay => write!(f, "kernel delay bound must be at least 1"),
        }
    }
}

impl core::error::Error for CheckConfigError {}

impl CheckConfig {
    pub fn validate(&self) -> Result<(), CheckConfigError> {
        if self.allowed.is_empty() {
            return Err(CheckConfigError::NoAllowedAddress);
        }
        if self.denied.is_empty() {
            return Err(CheckConfigError::NoDeniedAddress);
        }
        if self.kernel_delay_max == 0 {
            return Err(CheckConfigError::ZeroKernelDelay);
        }
        if self.rules.len() > self.table_capacity {
            return Err(CheckConfigError::CapacityTooSmall {
                rules: self.rules.len(),
                capacity: self.table_capacity,
            });
        }
        let initial = initial_state(self).map_err(CheckConfigError::Policy)?;
        let table = initial.interposer.table();
        for (addrs, expected) in
            [(&self.allowed, Decision::Allow), (&self.denied, Decision::Deny)]
        {
            for addr in addrs {
                if table.decide(*addr, self.channel) != expected {
                    return Err(CheckConfigError::DomainDisagreesWithTable {
                        addr: *addr,
                        expected,
                    });
                }
            }
        }
        Ok(())
    }
}

/// What the abstract kernel does in a cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(rename_all = "kebab-case"))]
pub enum KernelAction {
    /// No fault pending.
    Idle,
    /// Sit on the pending fault another cycle.
    Hold,
    /// Install a page rule for the fault, then release the channel.
    Grant,
    /// Release the channel with the policy unchanged.
    Deny,
}

/// One cycle's worth of nondeterministic choices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ChoiceLabel {
    pub attacker: AttackerMove,
    pub fabric_ready: bool,
    pub kernel: KernelAction,
}

/// A fault the interposer reported, not yet answered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct PendingFault {
    pub page: u32,
    pub kind: AccessKind,
    /// Cycles since the fault was reported.
    pub age: u8,
}

/// Complete search state: the interposer registers, words in flight on the
/// configuration link, the kernel's pending fault, the attacker's
/// outstanding request (hold-compliant mode only), and the cycle count.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct AbstractState {
    pub interposer: Interposer,
    pub downlink: VecDeque<FslWord>,
    pub pending: Option<PendingFault>,
    pub hold: Option<AttackerMove>,
    pub cycle: u32,
}

impl AbstractState {
    /// Canonical dedup key: cycle-independent, with rule ages normalized to
    /// their relative order.
    pub fn canonical(&self) -> AbstractState {
        let mut c = self.clone();
        c.cycle = 0;
        c.interposer.canonicalize_ages();
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(rename_all = "kebab-case"))]
pub enum InvariantTag {
    ForwardedDiffersFromCommitted,
    ForwardedDeniedByPolicy,
}

/// What one step did, as needed for invariant checking and reporting.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepObs {
    pub forwarded: Option<AddressRequest>,
    pub response: Option<Response>,
    /// Raw interrupt word emitted this cycle.
    pub intr: Option<u32>,
    pub violation: Option<InvariantTag>,
}

/// A labeled successor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Succ {
    pub label: ChoiceLabel,
    pub state: AbstractState,
    pub obs: StepObs,
}

/// The search's initial state: reference rules installed, everything idle.
pub fn initial_state(cfg: &CheckConfig) -> Result<AbstractState, PolicyError> {
    let mut interposer = Interposer::new(cfg.table_capacity, cfg.variant)?;
    for rule in &cfg.rules {
        interposer.preload_rule(*rule)?;
    }
    Ok(AbstractState {
        interposer,
        downlink: VecDeque::new(),
        pending: None,
        hold: None,
        cycle: 0,
    })
}

fn attacker_moves(s: &AbstractState, cfg: &CheckConfig) -> Vec<AttackerMove> {
    if !cfg.may_mutate {
        if let Some(held) = s.hold {
            // The AXI hold requirement: the wires may not change until the
            // outstanding request is acknowledged.
            return alloc::vec![held];
        }
    }
    let mut moves = Vec::with_capacity(1 + cfg.allowed.len() + cfg.denied.len());
    moves.push(AttackerMove::NoRequest);
    moves.extend(cfg.allowed.iter().map(|a| AttackerMove::Present { addr: *a, permissible: true }));
    moves.extend(cfg.denied.iter().map(|a| AttackerMove::Present { addr: *a, permissible: false }));
    moves
}

fn kernel_actions(s: &AbstractState, cfg: &CheckConfig) -> Vec<KernelAction> {
    match &s.pending {
        None => alloc::vec![KernelAction::Idle],
        Some(fault) if fault.age + 1 < cfg.kernel_delay_max => {
            alloc::vec![KernelAction::Hold, KernelAction::Grant, KernelAction::Deny]
        }
        Some(_) => alloc::vec![KernelAction::Grant, KernelAction::Deny],
    }
}

/// Apply one cycle's choices to a state.
pub fn apply(s: &AbstractState, label: ChoiceLabel, cfg: &CheckConfig) -> Succ {
    let mut t = s.clone();
    t.cycle += 1;

    // Kernel phase: answer or age the pending fault.
    match label.kernel {
        KernelAction::Idle => {}
        KernelAction::Hold => {
            t.pending.as_mut().expect("hold implies a pending fault").age += 1;
        }
        KernelAction::Grant => {
            let fault = t.pending.take().expect("grant implies a pending fault");
            let rule = Command::new_rule(
                fault.page,
                SizeCode::new(0).expect("page-sized rule"),
                fault.kind == AccessKind::Read,
                fault.kind == AccessKind::Write,
            )
            .expect("page rules are always aligned");
            t.downlink.push_back(encode_command(&rule));
            t.downlink.push_back(encode_command(&Command::enforce(fault.kind)));
        }
        KernelAction::Deny => {
            let fault = t.pending.take().expect("deny implies a pending fault");
            t.downlink.push_back(encode_command(&Command::enforce(fault.kind)));
        }
    }

    // Interposer phase: one link word, then one cycle.
    let action = match label.attacker {
        AttackerMove::NoRequest => PortAction::NoRequest,
        AttackerMove::Present { addr, .. } => {
            PortAction::Present(AddressRequest::word(0, addr, cfg.channel))
        }
    };
    let fsl_in = t.downlink.pop_front();
    let (pre_filter, pre_committed) = {
        let ch = t.interposer.channel(cfg.channel);
        (ch.filter.state, ch.filter.committed_request)
    };
    let no_request = PortAction::NoRequest;
    let (master_read, master_write) = match cfg.channel {
        AccessKind::Read => (&action, &no_request),
        AccessKind::Write => (&no_request, &action),
    };
    let out = t.interposer.cycle(CycleInputs {
        master_read,
        master_write,
        fabric_ready_read: label.fabric_ready,
        fabric_ready_write: label.fabric_ready,
        fsl_in,
        fsl_out_ready: true,
    });

    if let Some(word) = out.fsl_out {
        let (page, kind) = intr_fields(IntrWord(word.0));
        debug_assert!(t.pending.is_none(), "one outstanding fault per channel");
        t.pending = Some(PendingFault { page, kind, age: 0 });
    }

    let forwarded = out.forwarded(cfg.channel);
    let response = out.response(cfg.channel);

    if !cfg.may_mutate {
        if matches!(label.attacker, AttackerMove::Present { .. }) {
            t.hold = Some(label.attacker);
        }
        if forwarded.is_some() || response.is_some() {
            t.hold = None;
        }
    }

    let violation = forwarded.and_then(|req| match cfg.mode {
        InvariantMode::Strict => {
            let from_buffer_history =
                matches!(pre_filter, FilterState::Committed | FilterState::Waiting);
            (from_buffer_history && Some(req) != pre_committed)
                .then_some(InvariantTag::ForwardedDiffersFromCommitted)
        }
        InvariantMode::PolicyAtForward => (t.interposer.table().decide(req.addr, cfg.channel)
            == Decision::Deny)
            .then_some(InvariantTag::ForwardedDeniedByPolicy),
    });

    Succ {
        label,
        state: t,
        obs: StepObs { forwarded, response, intr: out.fsl_out.map(|w| w.0), violation },
    }
}

/// Every labeled successor of a state: the cross product of attacker move,
/// fabric readiness, and kernel action.
pub fn successors(s: &AbstractState, cfg: &CheckConfig) -> Vec<Succ> {
    let moves = attacker_moves(s, cfg);
    let kernels = kernel_actions(s, cfg);
    let mut out = Vec::with_capacity(moves.len() * 2 * kernels.len());
    for attacker in &moves {
        for fabric_ready in [false, true] {
            for kernel in &kernels {
                out.push(apply(
                    s,
                    ChoiceLabel { attacker: *attacker, fabric_ready, kernel: *kernel },
                    cfg,
                ));
            }
        }
    }
    out
}

/// One counterexample step: the choices taken in a cycle and what resulted.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct CxStep {
    pub cycle: u32,
    pub attacker: AttackerMove,
    pub fabric_ready: bool,
    pub kernel: KernelAction,
    #[cfg_attr(feature = "serde", serde(skip_serializing_if = "Option::is_none"))]
    pub forwarded: Option<AddressRequest>,
    #[cfg_attr(feature = "serde", serde(skip_serializing_if = "Option::is_none"))]
    pub intr: Option<u32>,
    pub state: AbstractState,
}

/// A replayable witness of an invariant violation.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Counterexample {
    pub invariant: InvariantTag,
    pub steps: Vec<CxStep>,
}

impl Counterexample {
    pub fn moves(&self) -> Vec<AttackerMove> {
        self.steps.iter().map(|s| s.attacker).collect()
    }

    /// The forwarded request of the final, violating step.
    pub fn violating_forward(&self) -> Option<AddressRequest> {
        self.steps.last().and_then(|s| s.forwarded)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(tag = "verdict", rename_all = "kebab-case"))]
pub enum CheckOutcome {
    Verified { depth: u32, states_explored: usize },
    Violation(Counterexample),
    /// The state-count safety limit was hit before the depth bound.
    Inconclusive { states_explored: usize, limit: usize },
}

/// Breadth-first bounded search with the default serial expansion.
pub fn check(cfg: &CheckConfig) -> Result<CheckOutcome, CheckConfigError> {
    check_with_expander(cfg, |cfg, states| {
        states.iter().map(|s| successors(s, cfg)).collect()
    })
}

struct Node {
    state: AbstractState,
    parent: Option<usize>,
    label: Option<ChoiceLabel>,
    obs: StepObs,
}

fn path_labels(nodes: &[Node], mut at: usize) -> Vec<ChoiceLabel> {
    let mut labels = Vec::new();
    while let Some(parent) = nodes[at].parent {
        labels.push(nodes[at].label.expect("non-root has a label"));
        at = parent;
    }
    labels.reverse();
    labels
}

/// Breadth-first bounded search with a custom frontier expansion, e.g. a
/// parallel one. The expander must return one successor list per input
/// state, in order; any expansion that does so yields identical results,
/// because the frontier is dedup-set based and violations are tie-broken by
/// choice sequence rather than discovery order.
pub fn check_with_expander<F>(cfg: &CheckConfig, mut expand: F) -> Result<CheckOutcome, CheckConfigError>
where
    F: FnMut(&CheckConfig, &[AbstractState]) -> Vec<Vec<Succ>>,
{
    cfg.validate()?;

    let init = initial_state(cfg).map_err(CheckConfigError::Policy)?;
    let mut visited: BTreeSet<AbstractState> = BTreeSet::new();
    visited.insert(init.canonical());
    let mut nodes = alloc::vec![Node { state: init, parent: None, label: None, obs: StepObs::default() }];
    let mut frontier = alloc::vec![0usize];

    for _ in 0..cfg.depth_bound {
        if frontier.is_empty() {
            // Entire reachable space explored below the bound.
            break;
        }
        let states: Vec<AbstractState> =
            frontier.iter().map(|&i| nodes[i].state.clone()).collect();
        let lists = expand(cfg, &states);
        debug_assert_eq!(lists.len(), frontier.len(), "one successor list per state");

        // Violations at this depth are all minimal; pick the one with the
        // lexicographically least choice sequence so the result does not
        // depend on expansion order.
        let mut best: Option<(Vec<ChoiceLabel>, usize, Succ)> = None;
        for (fi, list) in lists.iter().enumerate() {
            for succ in list {
                if succ.obs.violation.is_none() {
                    continue;
                }
                let mut labels = path_labels(&nodes, frontier[fi]);
                labels.push(succ.label);
                if best.as_ref().is_none_or(|(b, _, _)| labels < *b) {
                    best = Some((labels, frontier[fi], succ.clone()));
                }
            }
        }
        if let Some((_, parent, succ)) = best {
            return Ok(CheckOutcome::Violation(build_counterexample(&nodes, parent, succ)));
        }

        let mut next = Vec::new();
        for (fi, list) in lists.into_iter().enumerate() {
            let parent = frontier[fi];
            for succ in list {
                if visited.insert(succ.state.canonical()) {
                    if visited.len() > cfg.state_limit {
                        return Ok(CheckOutcome::Inconclusive {
                            states_explored: visited.len(),
                            limit: cfg.state_limit,
                        });
                    }
                    nodes.push(Node {
                        state: succ.state,
                        parent: Some(parent),
                        label: Some(succ.label),
                        obs: succ.obs,
                    });
                    next.push(nodes.len() - 1);
                }
            }
        }
        frontier = next;
    }

    Ok(CheckOutcome::Verified { depth: cfg.depth_bound, states_explored: visited.len() })
}

fn build_counterexample(nodes: &[Node], parent: usize, final_succ: Succ) -> Counterexample {
    let invariant = final_succ.obs.violation.expect("final step violates");
    let mut steps = Vec::new();
    steps.push(CxStep {
        cycle: final_succ.state.cycle - 1,
        attacker: final_succ.label.attacker,
        fabric_ready: final_succ.label.fabric_ready,
        kernel: final_succ.label.kernel,
        forwarded: final_succ.obs.forwarded,
        intr: final_succ.obs.intr,
        state: final_succ.state,
    });
    let mut at = parent;
    while let Some(up) = nodes[at].parent {
        let node = &nodes[at];
        let label = node.label.expect("non-root has a label");
        steps.push(CxStep {
            cycle: node.state.cycle - 1,
            attacker: label.attacker,
            fabric_ready: label.fabric_ready,
            kernel: label.kernel,
            forwarded: node.obs.forwarded,
            intr: node.obs.intr,
            state: node.state.clone(),
        });
        at = up;
    }
    steps.reverse();
    Counterexample { invariant, steps }
}

// --- replay through the full simulator ---

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReplayError {
    /// The counterexample grants and denies the same page and kind; no
    /// grant map reproduces that.
    InconsistentKernelChoices { page: u32 },
    Topology(Vec<TopologyError>),
}

impl core::fmt::Display for ReplayError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ReplayError::InconsistentKernelChoices { page } => {
                write!(f, "kernel both grants and denies page {page:#x}")
            }
            ReplayError::Topology(errors) => {
                write!(f, "replay topology invalid: {} errors", errors.len())
            }
        }
    }
}

impl core::error::Error for ReplayError {}

/// Outcome of replaying a counterexample through the simulator.
#[derive(Clone, Debug)]
pub struct ReplayReport {
    /// Whether the simulator forwarded exactly what the checker predicted
    /// in every cycle, including the final violating forward.
    pub reproduced: bool,
    pub violation_cycle: Option<u64>,
    /// First cycle whose forward differed, with a description. A divergence
    /// here is a harness bug, not an attack result.
    pub first_divergence: Option<(u64, String)>,
    pub trace: Vec<TraceRecord>,
}

/// Drive the full simulator with a scripted attacker following the
/// counterexample's choices and check that the same forwards happen at the
/// same cycles.
pub fn replay(cx: &Counterexample, cfg: &CheckConfig) -> Result<ReplayReport, ReplayError> {
    if cx.steps.is_empty() {
        return Ok(ReplayReport {
            reproduced: true,
            violation_cycle: None,
            first_divergence: None,
            trace: Vec::new(),
        });
    }

    // Reconstruct kernel behavior: which pages the abstract kernel granted
    // or denied, and the real latency that reproduces its reply timing.
    let mut grants: Vec<GrantEntry> = Vec::new();
    let mut denied: Vec<(u32, AccessKind)> = Vec::new();
    let mut latency: Option<u64> = None;
    let mut last_intr: Option<(u32, u32, AccessKind)> = None;
    for step in &cx.steps {
        if let Some(word) = step.intr {
            let (page, kind) = intr_fields(IntrWord(word));
            last_intr = Some((step.cycle, page, kind));
        }
        match step.kernel {
            KernelAction::Grant => {
                let (emitted, page, kind) = last_intr.expect("grant follows a fault");
                if denied.contains(&(page, kind)) {
                    return Err(ReplayError::InconsistentKernelChoices { page });
                }
                // Checker reply at cycle j maps to a kernel service latency
                // of j - emission - 1 (one cycle of link transit).
                latency.get_or_insert((step.cycle - emitted - 1) as u64);
                let entry = GrantEntry::new(
                    0,
                    Address::from_page(page),
                    SizeCode::new(0).expect("page rule"),
                    kind == AccessKind::Read,
                    kind == AccessKind::Write,
                )
                .expect("page-aligned");
                if !grants.contains(&entry) {
                    grants.push(entry);
                }
            }
            KernelAction::Deny => {
                let (_, page, kind) = last_intr.expect("deny follows a fault");
                if grants.iter().any(|g| {
                    g.contains(Address::from_page(page))
                        && match kind {
                            AccessKind::Read => g.allow_read,
                            AccessKind::Write => g.allow_write,
                        }
                }) {
                    return Err(ReplayError::InconsistentKernelChoices { page });
                }
                denied.push((page, kind));
            }
            _ => {}
        }
    }

    // One slave spanning every address the scenario touches.
    let mut lo = u32::MAX;
    let mut hi = 0u32;
    let mut note = |addr: Address| {
        lo = lo.min(addr.0 & 0xFFFF_F000);
        hi = hi.max(addr.0 | 0xFFF);
    };
    for step in &cx.steps {
        if let AttackerMove::Present { addr, .. } = step.attacker {
            note(addr);
        }
    }
    for rule in &cfg.rules {
        note(rule.base);
    }
    let mut slave = MemorySlave::new("fabric", Address(lo), (hi - lo) as u64 + 1);
    slave.ready = ReadyPattern::Cyclic(cx.steps.iter().map(|s| s.fabric_ready).collect());

    let topology = Topology {
        masters: alloc::vec![MasterSetup {
            name: String::from("attacker"),
            ports: alloc::vec![PortSetup {
                capacity: cfg.table_capacity,
                variant: cfg.variant,
                preload: cfg.rules.clone(),
                behavior: Behavior::Attacker(AttackerScript {
                    kind: cfg.channel,
                    id: 0,
                    moves: cx.moves(),
                }),
                ..PortSetup::default()
            }],
        }],
        slaves: alloc::vec![slave],
        grants,
        kernel_latency: latency.unwrap_or(0),
        ..Topology::default()
    };

    let mut sim = Simulator::new(topology).map_err(ReplayError::Topology)?;
    let mut trace = Vec::with_capacity(cx.steps.len());
    let mut first_divergence = None;
    for (i, step) in cx.steps.iter().enumerate() {
        let record = sim.step();
        let channel = match cfg.channel {
            AccessKind::Read => &record.ports[0].read,
            AccessKind::Write => &record.ports[0].write,
        };
        if channel.forwarded != step.forwarded && first_divergence.is_none() {
            first_divergence = Some((
                i as u64,
                format!(
                    "checker forwarded {:?}, simulator forwarded {:?}",
                    step.forwarded, channel.forwarded
                ),
            ));
        }
        trace.push(record);
    }

    let reproduced = first_divergence.is_none();
    Ok(ReplayReport {
        reproduced,
        violation_cycle: reproduced.then(|| cx.steps.last().expect("non-empty").cycle as u64),
        first_divergence,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vulnerable() -> CheckConfig {
        CheckConfig::default()
    }

    fn commit_buffered() -> CheckConfig {
        CheckConfig { variant: FilterVariant::CommitBuffered, depth_bound: 8, ..CheckConfig::default() }
    }

    #[test]
    fn quiescent_state_has_full_choice_cross_product() {
        let cfg = vulnerable();
        let init = initial_state(&cfg).unwrap();
        let succs = successors(&init, &cfg);
        // 3 attacker moves x 2 readiness, no pending fault so one kernel
        // action.
        assert_eq!(succs.len(), 6);
        assert!(succs.iter().all(|s| s.label.kernel == KernelAction::Idle));

        // Distinct post-states by enumeration: the no-request pair collapses
        // over readiness, the impermissible pair commits either way, and the
        // permissible move splits on readiness.
        let distinct: BTreeSet<AbstractState> =
            succs.iter().map(|s| s.state.canonical()).collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn kernel_branches_appear_only_with_a_pending_fault() {
        let cfg = vulnerable();
        let init = initial_state(&cfg).unwrap();
        // Drive an impermissible request to the fault report.
        let imp = AttackerMove::Present { addr: cfg.denied[0], permissible: false };
        let s1 = apply(&init, ChoiceLabel { attacker: imp, fabric_ready: true, kernel: KernelAction::Idle }, &cfg);
        let s2 = apply(&s1.state, ChoiceLabel { attacker: imp, fabric_ready: true, kernel: KernelAction::Idle }, &cfg);
        assert!(s2.obs.intr.is_some());
        assert!(s2.state.pending.is_some());

        let succs = successors(&s2.state, &cfg);
        assert!(succs.iter().any(|s| s.label.kernel == KernelAction::Grant));
        assert!(succs.iter().any(|s| s.label.kernel == KernelAction::Deny));
        assert!(succs.iter().any(|s| s.label.kernel == KernelAction::Hold));
        assert!(succs.iter().all(|s| s.label.kernel != KernelAction::Idle));
    }

    #[test]
    fn vulnerable_variant_yields_the_wait_state_swap() {
        let cfg = vulnerable();
        let outcome = check(&cfg).unwrap();
        let CheckOutcome::Violation(cx) = outcome else {
            panic!("expected a violation, got {outcome:?}");
        };
        assert_eq!(cx.invariant, InvariantTag::ForwardedDiffersFromCommitted);
        assert!(cx.steps.len() <= 6);

        // The shape: a permissible request approved while the fabric is not
        // ready, then a mutation to the impermissible request that gets
        // forwarded once the fabric becomes ready.
        let setup = cx
            .steps
            .iter()
            .position(|s| {
                matches!(s.attacker, AttackerMove::Present { permissible: true, .. })
                    && !s.fabric_ready
            })
            .expect("permissible-while-not-ready step");
        let last = cx.steps.last().unwrap();
        assert!(matches!(last.attacker, AttackerMove::Present { permissible: false, .. }));
        assert!(last.fabric_ready);
        let forwarded = last.forwarded.expect("violating forward");
        assert_eq!(forwarded.addr, cfg.denied[0]);
        assert!(setup < cx.steps.len() - 1);

        // BFS minimality: one cycle less and the attack no longer fits.
        let shallower = CheckConfig { depth_bound: cx.steps.len() as u32 - 1, ..cfg };
        assert!(matches!(check(&shallower).unwrap(), CheckOutcome::Verified { .. }));
    }

    #[test]
    fn commit_buffered_variant_verifies() {
        let outcome = check(&commit_buffered()).unwrap();
        let CheckOutcome::Verified { depth, states_explored } = outcome else {
            panic!("expected verification, got {outcome:?}");
        };
        assert_eq!(depth, 8);
        assert!(states_explored > 1);
    }

    #[test]
    fn hold_compliant_attacker_cannot_swap() {
        let cfg = CheckConfig { may_mutate: false, depth_bound: 8, ..vulnerable() };
        assert!(matches!(check(&cfg).unwrap(), CheckOutcome::Verified { .. }));
    }

    #[test]
    fn policy_mode_flags_the_same_attack() {
        let cfg = CheckConfig { mode: InvariantMode::PolicyAtForward, ..vulnerable() };
        let CheckOutcome::Violation(cx) = check(&cfg).unwrap() else {
            panic!("expected a violation");
        };
        assert_eq!(cx.invariant, InvariantTag::ForwardedDeniedByPolicy);
    }

    #[test]
    fn verification_is_monotone_in_depth() {
        for depth in [2, 4, 6] {
            let cfg = CheckConfig { depth_bound: depth, ..commit_buffered() };
            assert!(matches!(check(&cfg).unwrap(), CheckOutcome::Verified { .. }));
        }
    }

    #[test]
    fn depth_zero_is_trivially_verified() {
        let cfg = CheckConfig { depth_bound: 0, ..vulnerable() };
        let CheckOutcome::Verified { depth, states_explored } = check(&cfg).unwrap() else {
            panic!("expected verification");
        };
        assert_eq!(depth, 0);
        assert_eq!(states_explored, 1);
    }

    #[test]
    fn state_limit_reports_inconclusive() {
        let cfg = CheckConfig { state_limit: 3, ..vulnerable() };
        assert!(matches!(check(&cfg).unwrap(), CheckOutcome::Inconclusive { .. }));
    }

    #[test]
    fn counterexample_replays_in_the_simulator() {
        let cfg = vulnerable();
        let CheckOutcome::Violation(cx) = check(&cfg).unwrap() else {
            panic!("expected a violation");
        };
        let report = replay(&cx, &cfg).unwrap();
        assert!(report.reproduced, "divergence: {:?}", report.first_divergence);
        assert_eq!(report.violation_cycle, Some(cx.steps.last().unwrap().cycle as u64));

        // A prefix without the final mutation shows no violating forward.
        let prefix = Counterexample {
            invariant: cx.invariant,
            steps: cx.steps[..cx.steps.len() - 1].to_vec(),
        };
        let report = replay(&prefix, &cfg).unwrap();
        assert!(report.reproduced);
        let bad = cfg.denied[0];
        assert!(report
            .trace
            .iter()
            .all(|r| r.ports[0].write.forwarded.map(|f| f.addr) != Some(bad)));
    }

    #[test]
    fn empty_counterexample_replays_to_empty_trace() {
        let cx = Counterexample {
            invariant: InvariantTag::ForwardedDiffersFromCommitted,
            steps: Vec::new(),
        };
        let report = replay(&cx, &vulnerable()).unwrap();
        assert!(report.trace.is_empty());
        assert!(report.reproduced);
    }

    #[test]
    fn exploration_order_does_not_change_the_outcome() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;

        let reference = check(&vulnerable()).unwrap();
        let reference_verified = check(&commit_buffered()).unwrap();
        for seed in 0..4u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = |cfg: &CheckConfig, states: &[AbstractState]| {
                states
                    .iter()
                    .map(|s| {
                        let mut succs = successors(s, cfg);
                        succs.shuffle(&mut rng);
                        succs
                    })
                    .collect::<Vec<_>>()
            };
            assert_eq!(check_with_expander(&vulnerable(), &mut shuffled).unwrap(), reference);
            assert_eq!(
                check_with_expander(&commit_buffered(), &mut shuffled).unwrap(),
                reference_verified
            );
        }
    }

    #[test]
    fn config_validation_catches_domain_mismatches() {
        let mut cfg = vulnerable();
        cfg.denied = alloc::vec![cfg.allowed[0]];
        assert!(matches!(
            cfg.validate(),
            Err(CheckConfigError::DomainDisagreesWithTable { .. })
        ));

        let cfg = CheckConfig { denied: Vec::new(), ..vulnerable() };
        assert_eq!(cfg.validate(), Err(CheckConfigError::NoDeniedAddress));
    }
}
