//! Cycle-level model of a network-on-chip firewall.
//!
//! An interposer sits between each bus-master port and the interconnect
//! fabric. A fixed-capacity table of masked-region rules decides each
//! address request; denied requests are blocked while a dedicated
//! integrity kernel is consulted over a private FIFO word link, after
//! which the request is rechecked and either forwarded or answered with a
//! decode error.
//!
//! The crate provides the building blocks ([`bus`], [`policy`], [`codec`],
//! [`interposer`], [`kernel`]), a full-system cycle simulator ([`sim`]),
//! misbehaving-IP behaviors ([`adversary`]), and a bounded explicit-state
//! checker with simulator replay ([`checker`]).
//!
//! Everything here is `no_std` (with `alloc`); IO, file formats, and the
//! command line live in the companion `nocf-cli` crate.

#![no_std]

#[macro_use]
extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adversary;
pub mod bus;
pub mod checker;
pub mod codec;
pub mod interposer;
pub mod kernel;
pub mod policy;
pub mod sim;

pub use bus::{AccessKind, Address, AddressRequest, BurstType, PortAction, ResponseKind};
pub use checker::{CheckConfig, CheckOutcome, Counterexample};
pub use interposer::{FilterVariant, Interposer};
pub use policy::{Decision, PolicyRule, RuleTable, SizeCode};
pub use sim::{Simulator, Topology};
