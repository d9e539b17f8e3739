//! The broker between guests and the board.
//!
//! One [`Vmm`] owns the device and the segment pool and serializes every
//! request. Memory, allocation, reprogramming and queries are forwarded
//! through it and charged software time; kernel register access passes
//! straight to the session's region. Every call is logged to the trace.

pub mod accounting;
pub mod server;
pub mod trace;
pub mod transport;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bitstream::{cb_compatibility_check, decode_bitfile, Compatibility, DecodeError};
use crate::device::{
    Device, DeviceConfig, DeviceConfigError, DeviceError, DeviceEvent, DmaDirection,
    RegisterWrite, SimDuration, SimTime, REGISTER_COUNT,
};
use crate::mmu::{AllocatorKind, MmuError, PoolConfigError, SegmentPool, VmId};

use accounting::{Accounting, Breakdown, Component, VmStats};
use trace::{parse_trace, Source, Trace, TraceParseError};
use wire::{
    HandlerKind, InterfaceInfo, Notification, RegWriteOutcome, Reply, ReplyBody, Request,
    Snapshot,
};

pub use wire::{Interface, VmmError};

pub const DEFAULT_QUEUE_DEPTH: usize = 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mediation {
    /// Guest memory is staged through the host and every forwarded call pays
    /// the software overhead.
    #[default]
    Mediated,
    /// Bare-metal baseline: no overhead, DMA straight from the caller.
    Native,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VmmConfig {
    pub segment_size: u64,
    pub queue_depth: usize,
    pub scrub_on_detach: bool,
    pub allocator: AllocatorKind,
    pub mediation: Mediation,
}

impl Default for VmmConfig {
    fn default() -> Self {
        Self {
            segment_size: crate::mmu::DEFAULT_SEGMENT_SIZE,
            queue_depth: DEFAULT_QUEUE_DEPTH,
            scrub_on_detach: true,
            allocator: AllocatorKind::Array,
            mediation: Mediation::Mediated,
        }
    }
}

#[derive(Debug, Error)]
pub enum VmmConfigError {
    #[error(transparent)]
    Device(#[from] DeviceConfigError),
    #[error(transparent)]
    Pool(#[from] PoolConfigError),
    #[error("queue depth must be at least 1")]
    QueueDepth,
    #[error("{segments} segments cannot be split across {prrs} guarded regions")]
    GuardPartition { segments: u64, prrs: usize },
}

#[derive(Debug, Clone)]
struct Session {
    vm: VmId,
    prr: usize,
    handles: BTreeSet<u64>,
    irq_handler: bool,
    status_handler: bool,
    mailbox: Vec<Notification>,
    stats: VmStats,
}

#[derive(Debug, Clone)]
struct QueuedReprogram {
    token: u64,
    request_id: u32,
    prr: usize,
    bitfile: Vec<u8>,
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    token: u64,
    request_id: u32,
    prr: usize,
}

#[derive(Debug)]
pub struct Vmm {
    device: Device,
    pool: SegmentPool,
    config: VmmConfig,
    fingerprint: String,
    sessions: BTreeMap<u64, Session>,
    by_vm: BTreeMap<VmId, u64>,
    prr_owner: Vec<Option<u64>>,
    next_token: u64,
    queue: VecDeque<QueuedReprogram>,
    in_flight: Option<InFlight>,
    scrub_pending: Vec<bool>,
    trace: Trace,
    accounting: Accounting,
    retired: Vec<VmStats>,
}

/// Hash of everything that affects simulation results.
pub fn fingerprint(device: &DeviceConfig, config: &VmmConfig) -> String {
    #[derive(Serialize)]
    struct Input<'a> {
        vmm: &'a VmmConfig,
        device: &'a DeviceConfig,
    }
    let text = toml::to_string(&Input {
        vmm: config,
        device,
    })
    .expect("configs serialize");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

fn outcome_name(result: &Result<ReplyBody, VmmError>) -> &'static str {
    match result {
        Ok(_) => "ok",
        Err(e) => e.name(),
    }
}

fn device_error(e: DeviceError) -> VmmError {
    match e {
        DeviceError::InvalidRegion(_) | DeviceError::InvalidRegister(_) => VmmError::InvalidRegion,
        DeviceError::Busy => VmmError::Busy,
        DeviceError::Decode(d) => decode_error(d),
        DeviceError::Incompatible => VmmError::Incompatible,
        DeviceError::DmaFault { .. } => VmmError::DmaFault,
        DeviceError::GuardFault { .. } => VmmError::GuardFault,
        DeviceError::NotRunning(_) => VmmError::Protocol,
    }
}

fn decode_error(e: DecodeError) -> VmmError {
    match e {
        DecodeError::Crc { .. } => VmmError::Crc,
        DecodeError::Format(_) => VmmError::Format,
    }
}

fn mmu_error(e: MmuError) -> VmmError {
    match e {
        MmuError::InvalidSize => VmmError::InvalidSize,
        MmuError::OutOfDeviceMemory { .. } => VmmError::OutOfDeviceMemory,
        MmuError::InvalidHandle => VmmError::InvalidHandle,
        MmuError::InvalidAddress(_) => VmmError::InvalidAddress,
    }
}

impl Vmm {
    pub fn new(device: DeviceConfig, config: VmmConfig) -> Result<Self, VmmConfigError> {
        if config.queue_depth == 0 {
            return Err(VmmConfigError::QueueDepth);
        }
        let fingerprint = fingerprint(&device, &config);
        let dev = Device::new(device)?;
        let pool = SegmentPool::new(dev.config().ddr_size, config.segment_size, config.allocator)?;
        let prrs = dev.prr_count();
        if dev.config().range_guard && pool.segment_count() < prrs as u64 {
            return Err(VmmConfigError::GuardPartition {
                segments: pool.segment_count(),
                prrs,
            });
        }
        Ok(Self {
            device: dev,
            pool,
            config,
            fingerprint,
            sessions: BTreeMap::new(),
            by_vm: BTreeMap::new(),
            prr_owner: vec![None; prrs],
            next_token: 1,
            queue: VecDeque::new(),
            in_flight: None,
            scrub_pending: vec![false; prrs],
            trace: Trace::default(),
            accounting: Accounting::default(),
            retired: Vec::new(),
        })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn pool(&self) -> &SegmentPool {
        &self.pool
    }

    pub fn config(&self) -> &VmmConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn now(&self) -> SimTime {
        self.device.now()
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn accounting(&self) -> &Accounting {
        &self.accounting
    }

    /// Region assigned to an attached VM.
    pub fn session_prr(&self, vm: VmId) -> Option<usize> {
        self.by_vm.get(&vm).map(|t| self.sessions[t].prr)
    }

    pub fn export_trace(&self) -> String {
        self.trace.export(
            &self.fingerprint,
            self.now().as_nanos(),
            &self.device.memory().digest_hex(),
        )
    }

    pub fn snapshot(&self) -> Snapshot {
        let next_event = self.device.next_event_time().map(SimTime::as_nanos);
        Snapshot {
            now: self.now().as_nanos(),
            next_event,
            digest: self.device.memory().digest(),
            idle: next_event.is_none() && self.queue.is_empty() && self.in_flight.is_none(),
        }
    }

    pub fn breakdown(&self) -> Breakdown {
        let total = self.now().as_nanos();
        let t = self.accounting.totals(total);
        let mut vms: Vec<VmStats> = self
            .retired
            .iter()
            .cloned()
            .chain(self.sessions.values().map(|s| s.stats.clone()))
            .collect();
        vms.sort_by_key(|s| s.vm);
        Breakdown {
            total_ns: total,
            software_ns: t[0],
            transfer_ns: t[1],
            kernel_ns: t[2],
            reconfiguration_ns: t[3],
            idle_ns: t[4],
            vms,
        }
    }

    /// Single entry point for every request, local or remote.
    pub fn handle(&mut self, token: u64, request_id: u32, request: Request) -> Reply {
        let mut reply = match request {
            Request::Poll => {
                if self.sessions.contains_key(&token) {
                    Reply::ok(ReplyBody::Empty)
                } else {
                    Reply::err(VmmError::NotAttached)
                }
            }
            Request::Hello => Reply::ok(ReplyBody::Text(self.fingerprint.clone())),
            Request::Snapshot => Reply::ok(ReplyBody::Snapshot(self.snapshot())),
            Request::ExportTrace => Reply::ok(ReplyBody::Text(self.export_trace())),
            Request::Breakdown => Reply::ok(ReplyBody::Breakdown(self.breakdown())),
            Request::Advance { .. } | Request::RunUntilIdle => self.control(request_id, request),
            _ => self.guest_call(token, request_id, request),
        };
        let owner = match reply.result {
            Ok(ReplyBody::Attached { token, .. }) => token,
            _ => token,
        };
        if let Some(s) = self.sessions.get_mut(&owner) {
            reply.notifications = std::mem::take(&mut s.mailbox);
        }
        reply
    }

    fn control(&mut self, request_id: u32, request: Request) -> Reply {
        let idx = self.trace.begin(
            self.now().as_nanos(),
            Source::Ctl,
            None,
            request.op_name(),
            request_id,
            &request.encode(),
        );
        match request {
            Request::Advance { to } => self.advance(SimTime(to)),
            Request::RunUntilIdle => self.run_until_idle(),
            _ => unreachable!("not a control request"),
        }
        self.trace.finish(idx, "ok");
        Reply::ok(ReplyBody::Snapshot(self.snapshot()))
    }

    fn guest_call(&mut self, token: u64, request_id: u32, request: Request) -> Reply {
        self.settle();
        let vm = match request {
            Request::Attach { vm } => Some(vm),
            _ => self.sessions.get(&token).map(|s| s.vm),
        };
        let idx = self.trace.begin(
            self.now().as_nanos(),
            Source::Call,
            vm,
            request.op_name(),
            request_id,
            &request.encode(),
        );
        let result = self.dispatch(token, request_id, request);
        self.pump();
        self.trace.finish(idx, outcome_name(&result));
        Reply {
            result,
            notifications: Vec::new(),
        }
    }

    fn mediated(&self) -> bool {
        self.config.mediation == Mediation::Mediated
    }

    fn dispatch(
        &mut self,
        token: u64,
        request_id: u32,
        request: Request,
    ) -> Result<ReplyBody, VmmError> {
        if let Request::Attach { vm } = request {
            self.charge(None, Component::Software, self.overhead());
            return self.attach(vm);
        }
        let session = self.sessions.get_mut(&token).ok_or(VmmError::NotAttached)?;
        let (vm, prr) = (session.vm, session.prr);
        if request.is_pass_through() {
            session.stats.pass_through_calls += 1;
        } else {
            session.stats.forwarded_calls += 1;
            self.charge(Some(token), Component::Software, self.overhead());
        }
        match request {
            Request::Detach => self.detach(token),
            Request::GetInfo { iface } => Ok(ReplyBody::Info(InterfaceInfo {
                iface,
                prr: prr as u32,
                register_count: REGISTER_COUNT as u32,
                register_width_bits: 64,
                segment_size: self.pool.segment_size(),
            })),
            Request::SetHandler { kind, enabled } => {
                let s = self.sessions.get_mut(&token).expect("checked above");
                match kind {
                    HandlerKind::Irq => s.irq_handler = enabled,
                    HandlerKind::Status => s.status_handler = enabled,
                }
                Ok(ReplyBody::Empty)
            }
            Request::Alloc { size } => {
                let h = if self.device.config().range_guard {
                    let window = self.guard_segments(prr);
                    self.pool.allocate_within(vm, size, window)
                } else {
                    self.pool.allocate(vm, size)
                }
                .map_err(mmu_error)?;
                let s = self.sessions.get_mut(&token).expect("checked above");
                s.handles.insert(h.id);
                Ok(ReplyBody::Handle {
                    base: h.base_addr,
                    size: h.size,
                })
            }
            Request::Free { base } => self.free(token, vm, base),
            Request::WriteMem { addr, data } => self.write_mem(token, request_id, vm, addr, data),
            Request::ReadMem { addr, len } => self.read_mem(token, vm, addr, len),
            Request::Reprogram { bitfile } => self.reprogram(token, request_id, prr, bitfile),
            Request::RegWrite { reg, value } => {
                let outcome = self
                    .device
                    .write_kernel_register(prr, reg as usize, value)
                    .map_err(device_error)?;
                Ok(ReplyBody::RegWrite(match outcome {
                    RegisterWrite::Stored => RegWriteOutcome::Stored,
                    RegisterWrite::Ignored => RegWriteOutcome::Ignored,
                    RegisterWrite::Launched { done_at } => RegWriteOutcome::Launched {
                        done_at: done_at.as_nanos(),
                    },
                }))
            }
            Request::RegRead { reg } => self
                .device
                .read_kernel_register(prr, reg as usize)
                .map(ReplyBody::Value)
                .map_err(device_error),
            _ => Err(VmmError::Protocol),
        }
    }

    fn overhead(&self) -> SimDuration {
        if self.mediated() {
            self.device.cost().sw_overhead()
        } else {
            SimDuration::ZERO
        }
    }

    /// Spends `d` of virtual time on `component`, servicing device events that
    /// fall inside it.
    fn charge(&mut self, token: Option<u64>, component: Component, d: SimDuration) {
        let start = self.now();
        self.advance(start + d);
        self.accounting
            .record(component, start.as_nanos(), self.now().as_nanos());
        if let Some(s) = token.and_then(|t| self.sessions.get_mut(&t)) {
            s.stats.add(component, d.as_nanos());
        }
    }

    /// Segment window a guarded region's allocations must stay inside.
    fn guard_segments(&self, prr: usize) -> (u64, u64) {
        let per = self.pool.segment_count() / self.device.prr_count() as u64;
        (prr as u64 * per, (prr as u64 + 1) * per)
    }

    fn attach(&mut self, vm: VmId) -> Result<ReplyBody, VmmError> {
        if self.by_vm.contains_key(&vm) {
            return Err(VmmError::AlreadyAttached);
        }
        let prr = (0..self.prr_owner.len())
            .find(|&p| self.prr_owner[p].is_none() && !self.scrub_pending[p])
            .ok_or(VmmError::NoRegionAvailable)?;
        let token = self.next_token;
        self.next_token += 1;
        self.sessions.insert(
            token,
            Session {
                vm,
                prr,
                handles: BTreeSet::new(),
                irq_handler: false,
                status_handler: false,
                mailbox: Vec::new(),
                stats: VmStats::new(vm, prr as u32),
            },
        );
        self.by_vm.insert(vm, token);
        self.prr_owner[prr] = Some(token);
        if self.device.config().range_guard {
            let (lo, hi) = self.guard_segments(prr);
            let seg = self.pool.segment_size();
            self.device
                .set_guard(prr, Some((lo * seg, hi * seg)))
                .expect("region index in range");
        }
        self.device.ack_irq(prr).expect("region index in range");
        let mask = self.device.irq().mask() & !(1 << prr);
        self.device.write_irq_mask(mask);
        Ok(ReplyBody::Attached {
            token,
            prr: prr as u32,
        })
    }

    fn detach(&mut self, token: u64) -> Result<ReplyBody, VmmError> {
        let session = self.sessions.remove(&token).ok_or(VmmError::NotAttached)?;
        let prr = session.prr;
        self.by_vm.remove(&session.vm);
        self.prr_owner[prr] = None;
        for id in &session.handles {
            let h = self.pool.handle(*id).cloned().expect("session handles are live");
            self.pool.free(&h).expect("session handles are live");
        }
        let mask = self.device.irq().mask() | (1 << prr);
        self.device.write_irq_mask(mask);
        self.device.ack_irq(prr).expect("region index in range");
        self.queue.retain(|j| j.token != token);
        if self.config.scrub_on_detach {
            if self.in_flight.is_some_and(|f| f.prr == prr) {
                self.scrub_pending[prr] = true;
            } else {
                self.scrub(prr);
            }
        }
        self.device.set_guard(prr, None).expect("region index in range");
        self.retired.push(session.stats);
        Ok(ReplyBody::Empty)
    }

    fn scrub(&mut self, prr: usize) {
        self.device.scrub(prr).expect("region not configuring");
        self.trace
            .device(self.now().as_nanos(), None, "scrub", format!("prr:{prr}"));
    }

    fn free(&mut self, token: u64, vm: VmId, base: u64) -> Result<ReplyBody, VmmError> {
        match self.pool.handle_by_base(base).cloned() {
            Some(h) if h.owner == vm => {
                self.pool.free(&h).map_err(mmu_error)?;
                let s = self.sessions.get_mut(&token).expect("caller is attached");
                s.handles.remove(&h.id);
                Ok(ReplyBody::Empty)
            }
            Some(_) => Err(VmmError::PermissionDenied),
            None => match self.pool.owner_of(base) {
                Ok(Some(o)) if o != vm => Err(VmmError::PermissionDenied),
                Ok(_) => Err(VmmError::InvalidHandle),
                Err(_) => Err(VmmError::InvalidAddress),
            },
        }
    }

    /// Checks that `[addr, addr+len)` lies inside one of `vm`'s buffers.
    fn resolve(&self, vm: VmId, addr: u64, len: u64) -> Result<(), VmmError> {
        let end = addr.checked_add(len).ok_or(VmmError::OutOfBounds)?;
        match self.pool.owner_of(addr) {
            Err(_) => return Err(VmmError::InvalidAddress),
            Ok(None) => return Err(VmmError::InvalidHandle),
            Ok(Some(o)) if o != vm => return Err(VmmError::PermissionDenied),
            Ok(Some(_)) => {}
        }
        let h = self.pool.handle_at(addr).ok_or(VmmError::OutOfBounds)?;
        if end > h.end() {
            return Err(VmmError::OutOfBounds);
        }
        Ok(())
    }

    fn write_mem(
        &mut self,
        token: u64,
        request_id: u32,
        vm: VmId,
        addr: u64,
        mut data: Vec<u8>,
    ) -> Result<ReplyBody, VmmError> {
        let len = data.len() as u64;
        self.resolve(vm, addr, len)?;
        if self.mediated() {
            let d = self.device.cost().staging_copy_time(len);
            self.charge(Some(token), Component::Software, d);
        }
        let c = self
            .device
            .dma_transfer(DmaDirection::HostToDevice, &mut data, addr)
            .map_err(device_error)?;
        self.transfer_wait(token, c.started, c.done_at);
        let s = self.sessions.get_mut(&token).expect("caller is attached");
        s.stats.bytes_written += len;
        if s.status_handler {
            s.mailbox.push(Notification::TransferDone {
                request_id,
                at: self.device.now().as_nanos(),
            });
        }
        Ok(ReplyBody::Empty)
    }

    fn read_mem(
        &mut self,
        token: u64,
        vm: VmId,
        addr: u64,
        len: u64,
    ) -> Result<ReplyBody, VmmError> {
        self.resolve(vm, addr, len)?;
        let mut data = vec![0u8; len as usize];
        let c = self
            .device
            .dma_transfer(DmaDirection::DeviceToHost, &mut data, addr)
            .map_err(device_error)?;
        self.transfer_wait(token, c.started, c.done_at);
        if self.mediated() {
            let d = self.device.cost().staging_copy_time(len);
            self.charge(Some(token), Component::Software, d);
        }
        let s = self.sessions.get_mut(&token).expect("caller is attached");
        s.stats.bytes_read += len;
        Ok(ReplyBody::Bytes(data))
    }

    fn transfer_wait(&mut self, token: u64, started: SimTime, done: SimTime) {
        self.advance(done);
        self.accounting
            .record(Component::Transfer, started.as_nanos(), done.as_nanos());
        if let Some(s) = self.sessions.get_mut(&token) {
            s.stats.add(Component::Transfer, (done - started).as_nanos());
        }
    }

    fn reprogram(
        &mut self,
        token: u64,
        request_id: u32,
        prr: usize,
        bitfile: Vec<u8>,
    ) -> Result<ReplyBody, VmmError> {
        let parsed = decode_bitfile(&bitfile).map_err(decode_error)?;
        if usize::from(parsed.header.prr_id) != prr {
            return Err(VmmError::PermissionDenied);
        }
        let cfg = self.device.config();
        if cb_compatibility_check(&parsed, cfg.device_id, cfg.shell_id) == Compatibility::Reject {
            return Err(VmmError::Incompatible);
        }
        if self.queue.len() >= self.config.queue_depth {
            return Err(VmmError::Busy);
        }
        self.queue.push_back(QueuedReprogram {
            token,
            request_id,
            prr,
            bitfile,
        });
        self.start_next_reprogram();
        Ok(ReplyBody::Empty)
    }

    fn start_next_reprogram(&mut self) {
        while self.in_flight.is_none() {
            let Some(job) = self.queue.pop_front() else {
                return;
            };
            let vm = self.sessions.get(&job.token).map(|s| s.vm);
            match self.device.pr_reconfigure(&job.bitfile) {
                Ok(_) => {
                    self.in_flight = Some(InFlight {
                        token: job.token,
                        request_id: job.request_id,
                        prr: job.prr,
                    });
                    self.trace.device(
                        self.now().as_nanos(),
                        vm,
                        "reconfig_start",
                        format!("prr:{}", job.prr),
                    );
                }
                Err(e) => self.notify_reprogram(job.token, job.request_id, Some(device_error(e))),
            }
        }
    }

    fn notify_reprogram(&mut self, token: u64, request_id: u32, error: Option<VmmError>) {
        let at = self.now().as_nanos();
        if let Some(s) = self.sessions.get_mut(&token) {
            if error.is_none() {
                s.stats.reconfigurations += 1;
            }
            if s.status_handler {
                s.mailbox.push(Notification::ReprogramDone {
                    request_id,
                    at,
                    error,
                });
            }
        }
    }

    /// Services everything already due at the current instant.
    fn settle(&mut self) {
        self.advance(self.now());
    }

    fn advance(&mut self, to: SimTime) {
        loop {
            self.pump();
            match self.device.next_event_time() {
                // Everything due at one instant fires before the host reacts,
                // so simultaneous completions share one MSI.
                Some(t) if t <= to => while self.device.step_until(t) {},
                _ => break,
            }
        }
        if to > self.now() {
            self.device.set_clock(to);
        }
    }

    fn run_until_idle(&mut self) {
        loop {
            self.pump();
            self.start_next_reprogram();
            match self.device.next_event_time() {
                Some(t) => self.advance(t),
                None => break,
            }
        }
    }

    fn owner_vm(&self, prr: usize) -> Option<(u64, VmId)> {
        self.prr_owner[prr].map(|t| (t, self.sessions[&t].vm))
    }

    /// Reacts to everything the device reported since the last pump.
    fn pump(&mut self) {
        loop {
            let events = self.device.take_events();
            if events.is_empty() {
                return;
            }
            for event in events {
                self.on_device_event(event);
            }
        }
    }

    fn on_device_event(&mut self, event: DeviceEvent) {
        match event {
            DeviceEvent::Msi { .. } => self.route_msi(),
            DeviceEvent::ReconfigDone {
                at, started, prr, ..
            } => {
                self.accounting.record(
                    Component::Reconfiguration,
                    started.as_nanos(),
                    at.as_nanos(),
                );
                let job = self.in_flight.take().expect("reconfiguration was started");
                debug_assert_eq!(job.prr, prr);
                if let Some(s) = self.sessions.get_mut(&job.token) {
                    s.stats
                        .add(Component::Reconfiguration, (at - started).as_nanos());
                }
                let vm = self.sessions.get(&job.token).map(|s| s.vm);
                self.trace
                    .device(at.as_nanos(), vm, "reconfig_done", format!("prr:{prr}"));
                self.notify_reprogram(job.token, job.request_id, None);
                if std::mem::take(&mut self.scrub_pending[prr]) {
                    self.scrub(prr);
                }
                self.start_next_reprogram();
            }
            DeviceEvent::ReconfigFailed { .. } | DeviceEvent::DmaDone { .. } => {}
            DeviceEvent::KernelStarted { prr, .. } => {
                if let Some(t) = self.prr_owner[prr] {
                    self.sessions.get_mut(&t).expect("owner attached").stats.kernel_runs += 1;
                }
            }
            DeviceEvent::KernelDone {
                at,
                started,
                prr,
                error,
            } => {
                self.accounting
                    .record(Component::Kernel, started.as_nanos(), at.as_nanos());
                let owner = self.owner_vm(prr);
                if let Some((t, _)) = owner {
                    let s = self.sessions.get_mut(&t).expect("owner attached");
                    s.stats.add(Component::Kernel, (at - started).as_nanos());
                }
                self.trace.device(
                    at.as_nanos(),
                    owner.map(|o| o.1),
                    "kernel_done",
                    format!("prr:{prr},error:{}", error.is_some()),
                );
            }
            DeviceEvent::FrozenAccess {
                at,
                prr,
                register,
                write,
            } => {
                let vm = self.owner_vm(prr).map(|o| o.1);
                self.trace.device(
                    at.as_nanos(),
                    vm,
                    "frozen_access",
                    format!("prr:{prr},reg:{register},write:{write}"),
                );
            }
            DeviceEvent::GuardFault { at, prr, addr, len } => {
                let owner = self.owner_vm(prr);
                self.trace.device(
                    at.as_nanos(),
                    owner.map(|o| o.1),
                    "guard_fault",
                    format!("prr:{prr},addr:{addr:#x},len:{len}"),
                );
                if let Some((t, _)) = owner {
                    let s = self.sessions.get_mut(&t).expect("owner attached");
                    s.mailbox.push(Notification::GuardFault {
                        prr: prr as u32,
                        at: at.as_nanos(),
                        addr,
                        len,
                    });
                }
            }
        }
    }

    /// ISR: read the status register, mask every pending source, hand each
    /// to its session and acknowledge it, then unmask. Sources with no
    /// session are acknowledged and left masked. A completion that lands
    /// after the status read raises a fresh MSI on unmask.
    fn route_msi(&mut self) {
        self.device.begin_msi_service();
        let status = self.device.read_irq_status();
        let at = self.now().as_nanos();
        self.trace
            .device(at, None, "msi", format!("status:{status:#04x}"));
        let serviced = (0..self.prr_owner.len())
            .filter(|&p| self.prr_owner[p].is_some())
            .map(|p| 1u8 << p)
            .fold(0, |acc, b| acc | b)
            & status
            & !self.device.irq().mask();
        self.device.write_irq_mask(self.device.irq().mask() | serviced);
        for prr in 0..self.prr_owner.len() {
            let bit = 1u8 << prr;
            if status & bit == 0 {
                continue;
            }
            match self.owner_vm(prr) {
                None => {
                    self.trace
                        .device(at, None, "orphan_irq", format!("prr:{prr}"));
                    self.device.ack_irq(prr).expect("region index in range");
                }
                Some((token, vm)) if serviced & bit != 0 => {
                    let error = self.device.slots()[prr].registers.error;
                    let s = self.sessions.get_mut(&token).expect("owner attached");
                    if s.irq_handler {
                        s.mailbox.push(Notification::Irq {
                            prr: prr as u32,
                            at,
                            error,
                        });
                    }
                    self.trace.device(
                        at,
                        Some(vm),
                        "isr_dispatch",
                        format!("prr:{prr},error:{error}"),
                    );
                    self.device.ack_irq(prr).expect("region index in range");
                }
                Some(_) => {}
            }
        }
        self.device.write_irq_mask(self.device.irq().mask() & !serviced);
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Parse(#[from] TraceParseError),
    #[error(transparent)]
    Config(#[from] VmmConfigError),
    #[error("trace was recorded under configuration {recorded}, replaying under {current}")]
    ConfigMismatch { recorded: String, current: String },
    #[error("event {seq} has undecodable arguments")]
    BadArgs { seq: u64 },
    #[error("replay diverged at event {seq}: {what}")]
    Diverged { seq: u64, what: String },
}

impl ReplayError {
    pub fn code(&self) -> VmmError {
        match self {
            Self::ConfigMismatch { .. } | Self::Config(_) => VmmError::ConfigMismatch,
            Self::Parse(_) | Self::BadArgs { .. } => VmmError::Protocol,
            Self::Diverged { .. } => VmmError::ReplayDivergence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub digest: String,
    pub final_time: u64,
    pub expected_digest: String,
    pub expected_time: u64,
    /// The re-exported trace is byte-identical to the input.
    pub trace_identical: bool,
}

impl ReplayOutcome {
    pub fn matches(&self) -> bool {
        self.digest == self.expected_digest && self.final_time == self.expected_time
    }
}

/// Re-drives a fresh broker with the calls and control steps of an exported
/// trace and reports the resulting memory digest and clock.
pub fn replay(
    text: &str,
    device: DeviceConfig,
    config: VmmConfig,
) -> Result<ReplayOutcome, ReplayError> {
    let parsed = parse_trace(text)?;
    let mut vmm = Vmm::new(device, config)?;
    if parsed.fingerprint != vmm.fingerprint {
        return Err(ReplayError::ConfigMismatch {
            recorded: parsed.fingerprint,
            current: vmm.fingerprint.clone(),
        });
    }
    let mut tokens: BTreeMap<VmId, u64> = BTreeMap::new();
    for ev in parsed.events.iter().filter(|e| e.src != Source::Dev) {
        let bytes = hex::decode(&ev.args).map_err(|_| ReplayError::BadArgs { seq: ev.seq })?;
        let request = Request::decode(&bytes).map_err(|_| ReplayError::BadArgs { seq: ev.seq })?;
        if vmm.now().as_nanos() != ev.time {
            return Err(ReplayError::Diverged {
                seq: ev.seq,
                what: format!("clock at {} instead of {}", vmm.now().as_nanos(), ev.time),
            });
        }
        let token = match (&request, ev.src) {
            (_, Source::Ctl) | (Request::Attach { .. }, _) => 0,
            _ => ev
                .vm
                .and_then(|v| tokens.get(&v).copied())
                .unwrap_or(u64::MAX),
        };
        let detaching = matches!(request, Request::Detach);
        let reply = vmm.handle(token, ev.request_id, request);
        let outcome = outcome_name(&reply.result);
        if outcome != ev.outcome {
            return Err(ReplayError::Diverged {
                seq: ev.seq,
                what: format!("outcome {outcome} instead of {}", ev.outcome),
            });
        }
        match (&reply.result, ev.vm) {
            (Ok(ReplyBody::Attached { token, .. }), Some(vm)) => {
                tokens.insert(vm, *token);
            }
            (Ok(_), Some(vm)) if detaching => {
                tokens.remove(&vm);
            }
            _ => {}
        }
    }
    Ok(ReplayOutcome {
        digest: vmm.device.memory().digest_hex(),
        final_time: vmm.now().as_nanos(),
        expected_digest: parsed.end_digest,
        expected_time: parsed.end_time,
        trace_identical: vmm.export_trace() == text,
    })
}
