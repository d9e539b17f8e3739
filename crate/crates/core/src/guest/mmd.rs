//! The MMD layer: the device file split into independent named interfaces,
//! reachable only through eight operators.
//!
//! Address conventions per interface:
//! - `kernel-cra`: `addr` is a register index; data moves in 8-byte
//!   little-endian words over consecutive registers.
//! - `memory`: `addr` is a device address inside one of the session's
//!   buffers. The window at [`MGMT_BASE`] manages buffers: reading
//!   `MGMT_BASE + size` allocates and returns `base ++ size` (16 bytes LE);
//!   writing `base` (8 bytes LE) to `MGMT_BASE` frees.
//! - `reprogram`: only `mmd_reprogram` applies.

use std::collections::BTreeMap;

use crate::vmm::transport::Transport;
use crate::vmm::wire::{HandlerKind, InterfaceInfo, RegWriteOutcome, ReplyBody, Request};
use crate::vmm::Interface;

use super::{DeviceFile, GuestError, Handler};

/// Start of the buffer-management window on the memory interface. Above any
/// real device address.
pub const MGMT_BASE: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterfaceKind {
    /// Goes straight to the session's region.
    PassThrough,
    /// Mediated by the broker.
    Forwarded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MmdInterface {
    pub name: &'static str,
    pub handle: u64,
    pub kind: InterfaceKind,
}

/// Result of a write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteAck {
    /// Id the request carried; status callbacks report it.
    pub request_id: u32,
    /// Outcome of the last register written, for `kernel-cra`.
    pub register: Option<RegWriteOutcome>,
}

#[derive(Debug)]
pub struct MmdDevice<T: Transport> {
    file: DeviceFile<T>,
    open: BTreeMap<u64, Interface>,
    next_handle: u64,
}

impl<T: Transport> MmdDevice<T> {
    pub fn attach(transport: T, vm: u32) -> Result<Self, GuestError> {
        Ok(Self::new(DeviceFile::attach(transport, vm)?))
    }

    pub fn new(file: DeviceFile<T>) -> Self {
        Self {
            file,
            open: BTreeMap::new(),
            next_handle: 1,
        }
    }

    /// The session underneath, for polling and simulation control.
    pub fn file(&mut self) -> &mut DeviceFile<T> {
        &mut self.file
    }

    pub fn file_ref(&self) -> &DeviceFile<T> {
        &self.file
    }

    pub fn detach(self) -> Result<(), GuestError> {
        self.file.detach()
    }

    fn lookup(&self, iface: &MmdInterface) -> Result<Interface, GuestError> {
        self.open
            .get(&iface.handle)
            .copied()
            .ok_or(GuestError::ClosedInterface)
    }

    pub fn mmd_open(&mut self, name: &str) -> Result<MmdInterface, GuestError> {
        let i = Interface::from_name(name)
            .ok_or_else(|| GuestError::NoSuchInterface(name.to_string()))?;
        let handle = self.next_handle;
        self.next_handle += 1;
        self.open.insert(handle, i);
        Ok(MmdInterface {
            name: i.name(),
            handle,
            kind: if i.is_pass_through() {
                InterfaceKind::PassThrough
            } else {
                InterfaceKind::Forwarded
            },
        })
    }

    pub fn mmd_close(&mut self, iface: &MmdInterface) -> Result<(), GuestError> {
        self.open
            .remove(&iface.handle)
            .map(drop)
            .ok_or(GuestError::ClosedInterface)
    }

    pub fn mmd_read(
        &mut self,
        iface: &MmdInterface,
        addr: u64,
        len: u64,
    ) -> Result<Vec<u8>, GuestError> {
        match self.lookup(iface)? {
            Interface::KernelCra => {
                if len % 8 != 0 {
                    return Err(GuestError::InvalidLength(len));
                }
                let mut out = Vec::with_capacity(len as usize);
                for i in 0..len / 8 {
                    let reg = register_index(addr, i);
                    match self.file.call(Request::RegRead { reg })? {
                        ReplyBody::Value(v) => out.extend_from_slice(&v.to_le_bytes()),
                        _ => return Err(GuestError::UnexpectedReply),
                    }
                }
                Ok(out)
            }
            Interface::Memory if addr >= MGMT_BASE => {
                if len != 16 {
                    return Err(GuestError::InvalidLength(len));
                }
                match self.file.call(Request::Alloc {
                    size: addr - MGMT_BASE,
                })? {
                    ReplyBody::Handle { base, size } => {
                        let mut out = base.to_le_bytes().to_vec();
                        out.extend_from_slice(&size.to_le_bytes());
                        Ok(out)
                    }
                    _ => Err(GuestError::UnexpectedReply),
                }
            }
            Interface::Memory => match self.file.call(Request::ReadMem { addr, len })? {
                ReplyBody::Bytes(b) => Ok(b),
                _ => Err(GuestError::UnexpectedReply),
            },
            Interface::Reprogram => Err(GuestError::Unsupported),
        }
    }

    pub fn mmd_write(
        &mut self,
        iface: &MmdInterface,
        addr: u64,
        data: &[u8],
    ) -> Result<WriteAck, GuestError> {
        match self.lookup(iface)? {
            Interface::KernelCra => {
                if data.is_empty() || data.len() % 8 != 0 {
                    return Err(GuestError::InvalidLength(data.len() as u64));
                }
                let mut last = None;
                let mut request_id = 0;
                for (i, word) in data.chunks_exact(8).enumerate() {
                    let reg = register_index(addr, i as u64);
                    let value = u64::from_le_bytes(word.try_into().expect("8-byte chunk"));
                    request_id = self.file.next_request_id();
                    match self.file.call(Request::RegWrite { reg, value })? {
                        ReplyBody::RegWrite(o) => last = Some(o),
                        _ => return Err(GuestError::UnexpectedReply),
                    }
                }
                Ok(WriteAck {
                    request_id,
                    register: last,
                })
            }
            Interface::Memory if addr >= MGMT_BASE => {
                let base: [u8; 8] = data
                    .try_into()
                    .map_err(|_| GuestError::InvalidLength(data.len() as u64))?;
                let request_id = self.file.next_request_id();
                self.file.call(Request::Free {
                    base: u64::from_le_bytes(base),
                })?;
                Ok(WriteAck {
                    request_id,
                    register: None,
                })
            }
            Interface::Memory => {
                let request_id = self.file.next_request_id();
                self.file.call(Request::WriteMem {
                    addr,
                    data: data.to_vec(),
                })?;
                Ok(WriteAck {
                    request_id,
                    register: None,
                })
            }
            Interface::Reprogram => Err(GuestError::Unsupported),
        }
    }

    pub fn mmd_get_info(&mut self, iface: &MmdInterface) -> Result<InterfaceInfo, GuestError> {
        let i = self.lookup(iface)?;
        match self.file.call(Request::GetInfo { iface: i })? {
            ReplyBody::Info(info) => Ok(info),
            _ => Err(GuestError::UnexpectedReply),
        }
    }

    /// Registers (or with `None` clears) the completion callback. It also
    /// receives guard faults raised by the session's region.
    pub fn mmd_set_irq(
        &mut self,
        iface: &MmdInterface,
        handler: Option<Handler>,
    ) -> Result<(), GuestError> {
        self.set_handler(iface, HandlerKind::Irq, handler)
    }

    /// Registers (or clears) the callback for finished transfers and
    /// reconfigurations.
    pub fn mmd_set_status(
        &mut self,
        iface: &MmdInterface,
        handler: Option<Handler>,
    ) -> Result<(), GuestError> {
        self.set_handler(iface, HandlerKind::Status, handler)
    }

    fn set_handler(
        &mut self,
        iface: &MmdInterface,
        kind: HandlerKind,
        handler: Option<Handler>,
    ) -> Result<(), GuestError> {
        if self.lookup(iface)? == Interface::Reprogram {
            return Err(GuestError::Unsupported);
        }
        let enabled = handler.is_some();
        // Install locally first so no notification can miss its callback.
        self.file.set_handler(kind == HandlerKind::Irq, handler);
        self.file.call(Request::SetHandler { kind, enabled })?;
        Ok(())
    }

    /// Queues a reconfiguration and returns the request id the completion
    /// notification will carry.
    pub fn mmd_reprogram(
        &mut self,
        iface: &MmdInterface,
        bitfile: &[u8],
    ) -> Result<u32, GuestError> {
        if self.lookup(iface)? != Interface::Reprogram {
            return Err(GuestError::Unsupported);
        }
        let request_id = self.file.next_request_id();
        self.file.call(Request::Reprogram {
            bitfile: bitfile.to_vec(),
        })?;
        Ok(request_id)
    }
}

/// Out-of-range indices saturate and are rejected by the broker.
fn register_index(addr: u64, offset: u64) -> u32 {
    u32::try_from(addr.saturating_add(offset)).unwrap_or(u32::MAX)
}
