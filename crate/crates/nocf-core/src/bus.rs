//! Shared bus vocabulary: addresses, address-channel requests, responses,
//! and the valid/ready handshake abstraction used by every other module.

use alloc::vec::Vec;
use core::fmt;

/// A 32-bit byte address. No alignment is assumed at this layer.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address(pub u32);

impl Address {
    /// The 20-bit page number (address bits 31..12).
    pub fn page(self) -> u32 {
        self.0 >> 12
    }

    /// An address from a 20-bit page number (low 12 bits zero).
    pub fn from_page(page: u32) -> Self {
        Address((page & 0xF_FFFF) << 12)
    }

    pub fn wrapping_add(self, offset: u32) -> Self {
        Address(self.0.wrapping_add(offset))
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({:#010x})", self.0)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for Address {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&format_args!("{:#010x}", self.0))
    }
}

/// Read or write access.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(rename_all = "lowercase"))]
pub enum AccessKind {
    Read,
    Write,
}

/// Burst addressing mode. Wrapping bursts are unsupported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(rename_all = "lowercase"))]
pub enum BurstType {
    /// Every beat targets the start address.
    Fixed,
    /// Beats advance by the beat size.
    Incr,
}

/// One address-channel beat: a single request that may trigger a burst of
/// data transfers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct AddressRequest {
    /// 4-bit transaction id.
    pub id: u8,
    pub addr: Address,
    pub kind: AccessKind,
    /// Number of beats, 1..=16.
    pub burst_len: u8,
    /// log2 of bytes per beat, 0..=2.
    pub burst_size_log2: u8,
    pub burst_type: BurstType,
}

/// Request field out of range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequestError {
    IdTooWide(u8),
    BadBurstLen(u8),
    BadBurstSize(u8),
}

impl fmt::Display for RequestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RequestError::IdTooWide(id) => write!(f, "transaction id {id} does not fit 4 bits"),
            RequestError::BadBurstLen(n) => write!(f, "burst length {n} outside 1..=16"),
            RequestError::BadBurstSize(n) => write!(f, "burst size log2 {n} outside 0..=2"),
        }
    }
}

impl core::error::Error for RequestError {}

impl AddressRequest {
    pub fn new(
        id: u8,
        addr: Address,
        kind: AccessKind,
        burst_len: u8,
        burst_size_log2: u8,
        burst_type: BurstType,
    ) -> Result<Self, RequestError> {
        if id > 0xF {
            return Err(RequestError::IdTooWide(id));
        }
        if burst_len == 0 || burst_len > 16 {
            return Err(RequestError::BadBurstLen(burst_len));
        }
        if burst_size_log2 > 2 {
            return Err(RequestError::BadBurstSize(burst_size_log2));
        }
        Ok(AddressRequest { id, addr, kind, burst_len, burst_size_log2, burst_type })
    }

    /// Single-beat word access, the most common shape in scenarios.
    pub fn word(id: u8, addr: Address, kind: AccessKind) -> Self {
        AddressRequest {
            id: id & 0xF,
            addr,
            kind,
            burst_len: 1,
            burst_size_log2: 2,
            burst_type: BurstType::Incr,
        }
    }

    /// Bytes covered by one beat.
    pub fn beat_bytes(&self) -> u32 {
        1 << self.burst_size_log2
    }
}

/// Response codes the interposer can return on a request channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize), serde(rename_all = "kebab-case"))]
pub enum ResponseKind {
    Okay,
    /// The only error response the interposer emits; identical to what a
    /// master sees when addressing a missing device.
    DecodeError,
}

/// The master side of a request channel in one cycle: either driving a
/// request or not. The opposing ready signal travels separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum PortAction {
    #[default]
    NoRequest,
    Present(AddressRequest),
}

impl PortAction {
    pub fn request(&self) -> Option<&AddressRequest> {
        match self {
            PortAction::NoRequest => None,
            PortAction::Present(req) => Some(req),
        }
    }
}

/// The beat addresses a request can touch. `Fixed` bursts hit the start
/// address every beat; `Incr` bursts advance by the beat size, modulo 2^32.
pub fn burst_footprint(req: &AddressRequest) -> Vec<Address> {
    let stride = match req.burst_type {
        BurstType::Fixed => 0,
        BurstType::Incr => req.beat_bytes(),
    };
    (0..req.burst_len as u32)
        .map(|i| req.addr.wrapping_add(i.wrapping_mul(stride)))
        .collect()
}
