//! Guest/broker messages and their binary encoding.
//!
//! Frame layout, little-endian: `u32 length` (bytes after this field),
//! `u16 kind`, `u32 request id`, `u64 session token`, then the payload.
//! Replies reuse the request kind with [`REPLY_BIT`] set.

use std::io::{self, Read, Write};

use serde::Serialize;
use thiserror::Error;

use super::accounting::{Breakdown, VmStats};

pub const REPLY_BIT: u16 = 0x8000;
/// Upper bound on a frame body; larger lengths are treated as corruption.
pub const MAX_FRAME: u32 = 1 << 30;
const FRAME_FIXED: usize = 2 + 4 + 8;

/// Broker-level failures, each with a stable wire code.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[repr(u16)]
pub enum VmmError {
    #[error("permission denied")]
    PermissionDenied = 1,
    #[error("no free region")]
    NoRegionAvailable = 2,
    #[error("vm already attached")]
    AlreadyAttached = 3,
    #[error("no attached session for this token")]
    NotAttached = 4,
    #[error("access outside the buffer")]
    OutOfBounds = 5,
    #[error("reconfiguration queue full")]
    Busy = 6,
    #[error("configuration does not match")]
    ConfigMismatch = 7,
    #[error("invalid size")]
    InvalidSize = 8,
    #[error("out of device memory")]
    OutOfDeviceMemory = 9,
    #[error("invalid handle")]
    InvalidHandle = 10,
    #[error("invalid address")]
    InvalidAddress = 11,
    #[error("invalid region or register")]
    InvalidRegion = 12,
    #[error("malformed bitfile")]
    Format = 13,
    #[error("bitfile crc mismatch")]
    Crc = 14,
    #[error("bitfile built for another device or shell")]
    Incompatible = 15,
    #[error("unknown interface")]
    NoSuchInterface = 16,
    #[error("interface closed")]
    ClosedInterface = 17,
    #[error("operation not supported on this interface")]
    Unsupported = 18,
    #[error("dma fault")]
    DmaFault = 19,
    #[error("guard fault")]
    GuardFault = 20,
    #[error("protocol error")]
    Protocol = 21,
    #[error("replay diverged from the trace")]
    ReplayDivergence = 22,
}

impl VmmError {
    const ALL: [VmmError; 22] = [
        Self::PermissionDenied,
        Self::NoRegionAvailable,
        Self::AlreadyAttached,
        Self::NotAttached,
        Self::OutOfBounds,
        Self::Busy,
        Self::ConfigMismatch,
        Self::InvalidSize,
        Self::OutOfDeviceMemory,
        Self::InvalidHandle,
        Self::InvalidAddress,
        Self::InvalidRegion,
        Self::Format,
        Self::Crc,
        Self::Incompatible,
        Self::NoSuchInterface,
        Self::ClosedInterface,
        Self::Unsupported,
        Self::DmaFault,
        Self::GuardFault,
        Self::Protocol,
        Self::ReplayDivergence,
    ];

    pub fn code(self) -> u16 {
        self as u16
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Self::ALL.iter().copied().find(|e| e.code() == code)
    }

    /// Stable snake_case name used in traces and reports.
    pub fn name(self) -> &'static str {
        match self {
            Self::PermissionDenied => "permission_denied",
            Self::NoRegionAvailable => "no_region_available",
            Self::AlreadyAttached => "already_attached",
            Self::NotAttached => "not_attached",
            Self::OutOfBounds => "out_of_bounds",
            Self::Busy => "busy",
            Self::ConfigMismatch => "config_mismatch",
            Self::InvalidSize => "invalid_size",
            Self::OutOfDeviceMemory => "out_of_device_memory",
            Self::InvalidHandle => "invalid_handle",
            Self::InvalidAddress => "invalid_address",
            Self::InvalidRegion => "invalid_region",
            Self::Format => "format",
            Self::Crc => "crc",
            Self::Incompatible => "incompatible",
            Self::NoSuchInterface => "no_such_interface",
            Self::ClosedInterface => "closed_interface",
            Self::Unsupported => "unsupported",
            Self::DmaFault => "dma_fault",
            Self::GuardFault => "guard_fault",
            Self::Protocol => "protocol",
            Self::ReplayDivergence => "replay_divergence",
        }
    }
}

/// The three MMD interfaces a session exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Interface {
    /// Kernel control/argument registers, passed straight to the region.
    KernelCra = 0,
    /// Device DDR, forwarded through the broker.
    Memory = 1,
    /// Partial bitfile submission, forwarded through the broker.
    Reprogram = 2,
}

impl Interface {
    pub fn name(self) -> &'static str {
        match self {
            Self::KernelCra => "kernel-cra",
            Self::Memory => "memory",
            Self::Reprogram => "reprogram",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Self::KernelCra, Self::Memory, Self::Reprogram]
            .into_iter()
            .find(|i| i.name() == name)
    }

    pub fn is_pass_through(self) -> bool {
        self == Self::KernelCra
    }

    fn from_u8(v: u8) -> Option<Self> {
        [Self::KernelCra, Self::Memory, Self::Reprogram]
            .into_iter()
            .find(|i| *i as u8 == v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HandlerKind {
    Irq = 0,
    Status = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    /// Opens a session; sent with token 0.
    Attach { vm: u32 },
    Detach,
    GetInfo { iface: Interface },
    SetHandler { kind: HandlerKind, enabled: bool },
    Alloc { size: u64 },
    Free { base: u64 },
    WriteMem { addr: u64, data: Vec<u8> },
    ReadMem { addr: u64, len: u64 },
    Reprogram { bitfile: Vec<u8> },
    RegWrite { reg: u32, value: u64 },
    RegRead { reg: u32 },
    /// Collects queued notifications without doing anything else.
    Poll,
    Hello,
    Advance { to: u64 },
    RunUntilIdle,
    Snapshot,
    ExportTrace,
    Breakdown,
}

impl Request {
    pub fn kind(&self) -> u16 {
        match self {
            Self::Attach { .. } => 1,
            Self::Detach => 2,
            Self::GetInfo { .. } => 3,
            Self::SetHandler { .. } => 4,
            Self::Alloc { .. } => 5,
            Self::Free { .. } => 6,
            Self::WriteMem { .. } => 7,
            Self::ReadMem { .. } => 8,
            Self::Reprogram { .. } => 9,
            Self::RegWrite { .. } => 10,
            Self::RegRead { .. } => 11,
            Self::Poll => 12,
            Self::Hello => 32,
            Self::Advance { .. } => 33,
            Self::RunUntilIdle => 34,
            Self::Snapshot => 35,
            Self::ExportTrace => 36,
            Self::Breakdown => 37,
        }
    }

    /// Name used in the trace.
    pub fn op_name(&self) -> &'static str {
        match self {
            Self::Attach { .. } => "attach",
            Self::Detach => "detach",
            Self::GetInfo { .. } => "get_info",
            Self::SetHandler { .. } => "set_handler",
            Self::Alloc { .. } => "alloc",
            Self::Free { .. } => "free",
            Self::WriteMem { .. } => "write_mem",
            Self::ReadMem { .. } => "read_mem",
            Self::Reprogram { .. } => "reprogram",
            Self::RegWrite { .. } => "reg_write",
            Self::RegRead { .. } => "reg_read",
            Self::Poll => "poll",
            Self::Hello => "hello",
            Self::Advance { .. } => "advance",
            Self::RunUntilIdle => "run_until_idle",
            Self::Snapshot => "snapshot",
            Self::ExportTrace => "export_trace",
            Self::Breakdown => "breakdown",
        }
    }

    /// Register access goes straight to the region and is not charged.
    pub fn is_pass_through(&self) -> bool {
        matches!(self, Self::RegWrite { .. } | Self::RegRead { .. })
    }

    /// Requests that move the simulation or change broker state on behalf of
    /// no session.
    pub fn is_control(&self) -> bool {
        matches!(self, Self::Advance { .. } | Self::RunUntilIdle)
    }

    /// Pure queries: never traced, never change simulation state.
    pub fn is_query(&self) -> bool {
        matches!(
            self,
            Self::Poll | Self::Hello | Self::Snapshot | Self::ExportTrace | Self::Breakdown
        )
    }

    fn encode_payload(&self, e: &mut Enc) {
        match self {
            Self::Attach { vm } => e.u32(*vm),
            Self::GetInfo { iface } => e.u8(*iface as u8),
            Self::SetHandler { kind, enabled } => {
                e.u8(*kind as u8);
                e.u8(u8::from(*enabled));
            }
            Self::Alloc { size } => e.u64(*size),
            Self::Free { base } => e.u64(*base),
            Self::WriteMem { addr, data } => {
                e.u64(*addr);
                e.bytes(data);
            }
            Self::ReadMem { addr, len } => {
                e.u64(*addr);
                e.u64(*len);
            }
            Self::Reprogram { bitfile } => e.bytes(bitfile),
            Self::RegWrite { reg, value } => {
                e.u32(*reg);
                e.u64(*value);
            }
            Self::RegRead { reg } => e.u32(*reg),
            Self::Advance { to } => e.u64(*to),
            Self::Detach
            | Self::Poll
            | Self::Hello
            | Self::RunUntilIdle
            | Self::Snapshot
            | Self::ExportTrace
            | Self::Breakdown => {}
        }
    }

    fn decode_payload(kind: u16, d: &mut Dec<'_>) -> Result<Self, WireError> {
        let req = match kind {
            1 => Self::Attach { vm: d.u32()? },
            2 => Self::Detach,
            3 => Self::GetInfo {
                iface: Interface::from_u8(d.u8()?).ok_or(WireError::BadValue("interface"))?,
            },
            4 => Self::SetHandler {
                kind: match d.u8()? {
                    0 => HandlerKind::Irq,
                    1 => HandlerKind::Status,
                    _ => return Err(WireError::BadValue("handler kind")),
                },
                enabled: d.bool()?,
            },
            5 => Self::Alloc { size: d.u64()? },
            6 => Self::Free { base: d.u64()? },
            7 => Self::WriteMem {
                addr: d.u64()?,
                data: d.bytes()?,
            },
            8 => Self::ReadMem {
                addr: d.u64()?,
                len: d.u64()?,
            },
            9 => Self::Reprogram { bitfile: d.bytes()? },
            10 => Self::RegWrite {
                reg: d.u32()?,
                value: d.u64()?,
            },
            11 => Self::RegRead { reg: d.u32()? },
            12 => Self::Poll,
            32 => Self::Hello,
            33 => Self::Advance { to: d.u64()? },
            34 => Self::RunUntilIdle,
            35 => Self::Snapshot,
            36 => Self::ExportTrace,
            37 => Self::Breakdown,
            k => return Err(WireError::UnknownKind(k)),
        };
        Ok(req)
    }

    /// `u16 kind` followed by the payload. This is what the trace records.
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::default();
        e.u16(self.kind());
        self.encode_payload(&mut e);
        e.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut d = Dec::new(bytes);
        let req = Self::decode_payload(d.u16()?, &mut d)?;
        d.finish()?;
        Ok(req)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InterfaceInfo {
    pub iface: Interface,
    pub prr: u32,
    pub register_count: u32,
    pub register_width_bits: u32,
    pub segment_size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegWriteOutcome {
    Stored,
    /// The region was configuring and dropped the write.
    Ignored,
    Launched { done_at: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub now: u64,
    pub next_event: Option<u64>,
    pub digest: [u8; 32],
    /// No pending device events and an empty reconfiguration queue.
    pub idle: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplyBody {
    Empty,
    Attached { token: u64, prr: u32 },
    Info(InterfaceInfo),
    Handle { base: u64, size: u64 },
    Bytes(Vec<u8>),
    Value(u64),
    RegWrite(RegWriteOutcome),
    Snapshot(Snapshot),
    Text(String),
    Breakdown(Breakdown),
}

/// Asynchronous news for a session, carried on its next reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Notification {
    /// The ISR dispatched a completion of the session's region.
    Irq { prr: u32, at: u64, error: bool },
    /// A buffer transfer finished.
    TransferDone { request_id: u32, at: u64 },
    /// A queued reconfiguration finished or failed.
    ReprogramDone {
        request_id: u32,
        at: u64,
        error: Option<VmmError>,
    },
    /// The session's kernel touched DDR outside its guard window.
    GuardFault { prr: u32, at: u64, addr: u64, len: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub result: Result<ReplyBody, VmmError>,
    pub notifications: Vec<Notification>,
}

impl Reply {
    pub fn ok(body: ReplyBody) -> Self {
        Self {
            result: Ok(body),
            notifications: Vec::new(),
        }
    }

    pub fn err(e: VmmError) -> Self {
        Self {
            result: Err(e),
            notifications: Vec::new(),
        }
    }

    fn encode_payload(&self, e: &mut Enc) {
        match &self.result {
            Err(err) => e.u16(err.code()),
            Ok(body) => {
                e.u16(0);
                encode_body(body, e);
            }
        }
        e.u32(self.notifications.len() as u32);
        for n in &self.notifications {
            encode_notification(n, e);
        }
    }

    fn decode_payload(d: &mut Dec<'_>) -> Result<Self, WireError> {
        let status = d.u16()?;
        let result = if status == 0 {
            Ok(decode_body(d)?)
        } else {
            Err(VmmError::from_code(status).ok_or(WireError::BadValue("status"))?)
        };
        let count = d.u32()?;
        let mut notifications = Vec::new();
        for _ in 0..count {
            notifications.push(decode_notification(d)?);
        }
        Ok(Self {
            result,
            notifications,
        })
    }
}

fn encode_body(body: &ReplyBody, e: &mut Enc) {
    match body {
        ReplyBody::Empty => e.u8(0),
        ReplyBody::Attached { token, prr } => {
            e.u8(1);
            e.u64(*token);
            e.u32(*prr);
        }
        ReplyBody::Info(i) => {
            e.u8(2);
            e.u8(i.iface as u8);
            e.u32(i.prr);
            e.u32(i.register_count);
            e.u32(i.register_width_bits);
            e.u64(i.segment_size);
        }
        ReplyBody::Handle { base, size } => {
            e.u8(3);
            e.u64(*base);
            e.u64(*size);
        }
        ReplyBody::Bytes(b) => {
            e.u8(4);
            e.bytes(b);
        }
        ReplyBody::Value(v) => {
            e.u8(5);
            e.u64(*v);
        }
        ReplyBody::RegWrite(o) => {
            e.u8(6);
            match o {
                RegWriteOutcome::Stored => e.u8(0),
                RegWriteOutcome::Ignored => e.u8(1),
                RegWriteOutcome::Launched { done_at } => {
                    e.u8(2);
                    e.u64(*done_at);
                }
            }
        }
        ReplyBody::Snapshot(s) => {
            e.u8(7);
            e.u64(s.now);
            e.opt_u64(s.next_event);
            e.raw(&s.digest);
            e.u8(u8::from(s.idle));
        }
        ReplyBody::Text(t) => {
            e.u8(8);
            e.bytes(t.as_bytes());
        }
        ReplyBody::Breakdown(b) => {
            e.u8(9);
            for v in [
                b.total_ns,
                b.software_ns,
                b.transfer_ns,
                b.kernel_ns,
                b.reconfiguration_ns,
                b.idle_ns,
            ] {
                e.u64(v);
            }
            e.u32(b.vms.len() as u32);
            for s in &b.vms {
                e.u32(s.vm);
                e.u32(s.prr);
                for v in s.counters() {
                    e.u64(v);
                }
            }
        }
    }
}

fn decode_body(d: &mut Dec<'_>) -> Result<ReplyBody, WireError> {
    Ok(match d.u8()? {
        0 => ReplyBody::Empty,
        1 => ReplyBody::Attached {
            token: d.u64()?,
            prr: d.u32()?,
        },
        2 => ReplyBody::Info(InterfaceInfo {
            iface: Interface::from_u8(d.u8()?).ok_or(WireError::BadValue("interface"))?,
            prr: d.u32()?,
            register_count: d.u32()?,
            register_width_bits: d.u32()?,
            segment_size: d.u64()?,
        }),
        3 => ReplyBody::Handle {
            base: d.u64()?,
            size: d.u64()?,
        },
        4 => ReplyBody::Bytes(d.bytes()?),
        5 => ReplyBody::Value(d.u64()?),
        6 => ReplyBody::RegWrite(match d.u8()? {
            0 => RegWriteOutcome::Stored,
            1 => RegWriteOutcome::Ignored,
            2 => RegWriteOutcome::Launched { done_at: d.u64()? },
            _ => return Err(WireError::BadValue("register outcome")),
        }),
        7 => ReplyBody::Snapshot(Snapshot {
            now: d.u64()?,
            next_event: d.opt_u64()?,
            digest: d.array()?,
            idle: d.bool()?,
        }),
        8 => ReplyBody::Text(
            String::from_utf8(d.bytes()?).map_err(|_| WireError::BadValue("utf-8"))?,
        ),
        9 => {
            let mut head = [0u64; 6];
            for v in &mut head {
                *v = d.u64()?;
            }
            let n = d.u32()?;
            let mut vms = Vec::new();
            for _ in 0..n {
                let vm = d.u32()?;
                let prr = d.u32()?;
                let mut c = [0u64; VmStats::COUNTERS];
                for v in &mut c {
                    *v = d.u64()?;
                }
                vms.push(VmStats::from_counters(vm, prr, c));
            }
            ReplyBody::Breakdown(Breakdown {
                total_ns: head[0],
                software_ns: head[1],
                transfer_ns: head[2],
                kernel_ns: head[3],
                reconfiguration_ns: head[4],
                idle_ns: head[5],
                vms,
            })
        }
        _ => return Err(WireError::BadValue("reply body")),
    })
}

fn encode_notification(n: &Notification, e: &mut Enc) {
    match n {
        Notification::Irq { prr, at, error } => {
            e.u8(0);
            e.u32(*prr);
            e.u64(*at);
            e.u8(u8::from(*error));
        }
        Notification::TransferDone { request_id, at } => {
            e.u8(1);
            e.u32(*request_id);
            e.u64(*at);
        }
        Notification::ReprogramDone {
            request_id,
            at,
            error,
        } => {
            e.u8(2);
            e.u32(*request_id);
            e.u64(*at);
            e.u16(error.map_or(0, VmmError::code));
        }
        Notification::GuardFault { prr, at, addr, len } => {
            e.u8(3);
            e.u32(*prr);
            e.u64(*at);
            e.u64(*addr);
            e.u64(*len);
        }
    }
}

fn decode_notification(d: &mut Dec<'_>) -> Result<Notification, WireError> {
    Ok(match d.u8()? {
        0 => Notification::Irq {
            prr: d.u32()?,
            at: d.u64()?,
            error: d.bool()?,
        },
        1 => Notification::TransferDone {
            request_id: d.u32()?,
            at: d.u64()?,
        },
        2 => Notification::ReprogramDone {
            request_id: d.u32()?,
            at: d.u64()?,
            error: match d.u16()? {
                0 => None,
                c => Some(VmmError::from_code(c).ok_or(WireError::BadValue("status"))?),
            },
        },
        3 => Notification::GuardFault {
            prr: d.u32()?,
            at: d.u64()?,
            addr: d.u64()?,
            len: d.u64()?,
        },
        _ => return Err(WireError::BadValue("notification")),
    })
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame truncated")]
    Truncated,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("unknown message kind {0:#06x}")]
    UnknownKind(u16),
    #[error("bad {0}")]
    BadValue(&'static str),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestFrame {
    pub request_id: u32,
    pub token: u64,
    pub request: Request,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyFrame {
    pub kind: u16,
    pub request_id: u32,
    pub token: u64,
    pub reply: Reply,
}

fn frame(kind: u16, request_id: u32, token: u64, payload: impl FnOnce(&mut Enc)) -> Vec<u8> {
    let mut e = Enc::default();
    e.u32(0);
    e.u16(kind);
    e.u32(request_id);
    e.u64(token);
    payload(&mut e);
    let len = (e.0.len() - 4) as u32;
    e.0[..4].copy_from_slice(&len.to_le_bytes());
    e.0
}

impl RequestFrame {
    pub fn encode(&self) -> Vec<u8> {
        frame(self.request.kind(), self.request_id, self.token, |e| {
            self.request.encode_payload(e)
        })
    }

    /// Decodes a frame body (everything after the length field).
    pub fn decode_body(body: &[u8]) -> Result<Self, WireError> {
        let mut d = Dec::new(body);
        let kind = d.u16()?;
        let request_id = d.u32()?;
        let token = d.u64()?;
        let request = Request::decode_payload(kind, &mut d)?;
        d.finish()?;
        Ok(Self {
            request_id,
            token,
            request,
        })
    }
}

impl ReplyFrame {
    pub fn encode(&self) -> Vec<u8> {
        frame(self.kind | REPLY_BIT, self.request_id, self.token, |e| {
            self.reply.encode_payload(e)
        })
    }

    pub fn decode_body(body: &[u8]) -> Result<Self, WireError> {
        let mut d = Dec::new(body);
        let kind = d.u16()?;
        if kind & REPLY_BIT == 0 {
            return Err(WireError::BadValue("reply kind"));
        }
        let request_id = d.u32()?;
        let token = d.u64()?;
        let reply = Reply::decode_payload(&mut d)?;
        d.finish()?;
        Ok(Self {
            kind: kind & !REPLY_BIT,
            request_id,
            token,
            reply,
        })
    }
}

/// Reads one length-prefixed frame body. `Ok(None)` on a clean EOF.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    if (len as usize) < FRAME_FIXED {
        return Err(WireError::Truncated);
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn write_frame(w: &mut impl Write, frame: &[u8]) -> Result<(), WireError> {
    w.write_all(frame)?;
    w.flush()?;
    Ok(())
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn opt_u64(&mut self, v: Option<u64>) {
        match v {
            None => self.u8(0),
            Some(v) => {
                self.u8(1);
                self.u64(v);
            }
        }
    }
    fn raw(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.raw(b);
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::BadValue("bool")),
        }
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn opt_u64(&mut self) -> Result<Option<u64>, WireError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.u64()?)),
            _ => Err(WireError::BadValue("option")),
        }
    }
    fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn finish(&self) -> Result<(), WireError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}
