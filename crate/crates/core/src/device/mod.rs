//! Simulated FPGA board: a static shell hosting several partial reconfiguration
//! regions (PRRs), the PR control block with per-region freeze, an IRQ controller
//! with a single MSI line, device DDR with an optional per-region range guard,
//! and a DMA engine. All timing flows through one event queue.

pub mod clock;
pub mod cost;
pub mod irq;
pub mod memory;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitstream::{
    cb_compatibility_check, decode_bitfile, Compatibility, DecodeError, KernelDescriptor,
    KernelKind, ARG_REGISTERS,
};
use crate::kernels::{KernelError, KernelInstance, KernelMemory, MemFault};

pub use clock::{EventQueue, SimDuration, SimTime};
pub use cost::{CostModel, CostModelError};
pub use irq::IrqBank;
pub use memory::DeviceMemory;

/// Control register: bit 0 starts the loaded kernel.
pub const REG_CONTROL: usize = 0;
/// Status register, read-only: see the `STATUS_*` bits.
pub const REG_STATUS: usize = 1;
/// First argument register; arguments occupy `REG_ARG0..REG_ARG0 + ARG_REGISTERS`.
pub const REG_ARG0: usize = 2;
pub const REGISTER_COUNT: usize = REG_ARG0 + ARG_REGISTERS;

pub const STATUS_DONE: u64 = 1 << 0;
pub const STATUS_ERROR: u64 = 1 << 1;
pub const STATUS_LOADED: u64 = 1 << 2;
pub const STATUS_RUNNING: u64 = 1 << 3;

pub const MAX_PRRS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    pub prr_count: usize,
    pub ddr_size: u64,
    pub device_id: u32,
    pub shell_id: u32,
    /// Enables the per-region (base, limit) window on kernel DDR accesses.
    pub range_guard: bool,
    /// Charge `full_reconfig_time` for every reconfiguration instead of the
    /// partial-image cost. Models a board without PR support.
    pub full_device_reconfig: bool,
    /// Per-region clocks. Empty means every region runs at `cost.clock_hz`.
    pub prr_clock_hz: Vec<f64>,
    pub cost: CostModel,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            prr_count: 4,
            ddr_size: 2 << 30,
            device_id: 1,
            shell_id: 7,
            range_guard: false,
            full_device_reconfig: false,
            prr_clock_hz: Vec::new(),
            cost: CostModel::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceConfigError {
    #[error("prr_count must be in 1..={MAX_PRRS}, got {0}")]
    PrrCount(usize),
    #[error("ddr_size must be non-zero")]
    DdrSize,
    #[error("prr_clock_hz lists {got} clocks for {expected} regions")]
    ClockCount { got: usize, expected: usize },
    #[error("prr_clock_hz entries must be positive")]
    ClockValue,
    #[error(transparent)]
    Cost(#[from] CostModelError),
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<(), DeviceConfigError> {
        if !(1..=MAX_PRRS).contains(&self.prr_count) {
            return Err(DeviceConfigError::PrrCount(self.prr_count));
        }
        if self.ddr_size == 0 {
            return Err(DeviceConfigError::DdrSize);
        }
        if !self.prr_clock_hz.is_empty() {
            if self.prr_clock_hz.len() != self.prr_count {
                return Err(DeviceConfigError::ClockCount {
                    got: self.prr_clock_hz.len(),
                    expected: self.prr_count,
                });
            }
            if self.prr_clock_hz.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
                return Err(DeviceConfigError::ClockValue);
            }
        }
        self.cost.validate()?;
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("region {0} does not exist")]
    InvalidRegion(usize),
    #[error("register {0} outside the kernel register file")]
    InvalidRegister(usize),
    #[error("the reconfiguration control block is busy")]
    Busy,
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("bitfile built for another device or shell")]
    Incompatible,
    #[error("DMA access [{addr:#x}, +{len}) outside device memory")]
    DmaFault { addr: u64, len: u64 },
    #[error("guard fault: region {prr} accessed [{addr:#x}, +{len})")]
    GuardFault { prr: usize, addr: u64, len: u64 },
    #[error("region {0} is not running a kernel")]
    NotRunning(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotState {
    Empty,
    Configuring,
    Ready,
    Running,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KernelRegisterFile {
    pub start: bool,
    pub done: bool,
    pub error: bool,
    pub args: [u64; ARG_REGISTERS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrrSlot {
    pub index: usize,
    pub state: SlotState,
    pub frozen: bool,
    pub kernel: Option<KernelDescriptor>,
    pub registers: KernelRegisterFile,
    /// Bumped whenever in-flight work on the region must be discarded.
    generation: u64,
}

impl PrrSlot {
    fn new(index: usize) -> Self {
        Self {
            index,
            state: SlotState::Empty,
            frozen: false,
            kernel: None,
            registers: KernelRegisterFile::default(),
            generation: 0,
        }
    }

    fn status_word(&self) -> u64 {
        let mut s = 0;
        if self.registers.done {
            s |= STATUS_DONE;
        }
        if self.registers.error {
            s |= STATUS_ERROR;
        }
        if self.kernel.is_some() {
            s |= STATUS_LOADED;
        }
        if self.state == SlotState::Running {
            s |= STATUS_RUNNING;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmaDirection {
    HostToDevice,
    DeviceToHost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmaCompletion {
    pub started: SimTime,
    pub done_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconfigTicket {
    pub prr: usize,
    pub started: SimTime,
    pub done_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegisterWrite {
    /// Value latched, nothing else happened.
    Stored,
    /// Region frozen; the write never reached it.
    Ignored,
    /// The write started the loaded kernel.
    Launched { done_at: SimTime },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KernelAccess {
    Read { addr: u64, len: usize },
    Write { addr: u64, data: Vec<u8> },
}

/// Things the shell reports to the host side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceEvent {
    Msi {
        at: SimTime,
    },
    ReconfigDone {
        at: SimTime,
        started: SimTime,
        prr: usize,
        kind: KernelKind,
    },
    ReconfigFailed {
        at: SimTime,
        error: DeviceError,
    },
    KernelStarted {
        at: SimTime,
        prr: usize,
        cycles: u64,
    },
    KernelDone {
        at: SimTime,
        started: SimTime,
        prr: usize,
        error: Option<KernelError>,
    },
    FrozenAccess {
        at: SimTime,
        prr: usize,
        register: usize,
        write: bool,
    },
    GuardFault {
        at: SimTime,
        prr: usize,
        addr: u64,
        len: u64,
    },
    DmaDone {
        at: SimTime,
        started: SimTime,
        direction: DmaDirection,
        len: u64,
    },
}

#[derive(Debug, Clone)]
enum Timer {
    ReconfigDone {
        prr: usize,
        generation: u64,
        descriptor: KernelDescriptor,
        started: SimTime,
    },
    KernelDone {
        prr: usize,
        generation: u64,
        started: SimTime,
        instance: KernelInstance,
        arg_error: Option<KernelError>,
    },
    DmaDone {
        started: SimTime,
        direction: DmaDirection,
        len: u64,
    },
}

/// A region's view of DDR, subject to its guard window when enabled.
struct PrrPort<'a> {
    memory: &'a mut DeviceMemory,
    guard: Option<(u64, u64)>,
}

impl PrrPort<'_> {
    fn admit(&self, addr: u64, len: u64) -> Result<(), MemFault> {
        if let Some((base, limit)) = self.guard {
            let end = addr.checked_add(len).ok_or(MemFault::Guard { addr, len })?;
            if addr < base || end > limit {
                return Err(MemFault::Guard { addr, len });
            }
        }
        self.memory
            .check(addr, len)
            .map_err(|_| MemFault::OutOfRange { addr, len })
    }
}

impl KernelMemory for PrrPort<'_> {
    fn read(&mut self, addr: u64, len: usize) -> Result<Vec<u8>, MemFault> {
        self.admit(addr, len as u64)?;
        self.memory
            .read(addr, len)
            .map_err(|_| MemFault::OutOfRange { addr, len: len as u64 })
    }

    fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), MemFault> {
        self.admit(addr, data.len() as u64)?;
        self.memory.write(addr, data).map_err(|_| MemFault::OutOfRange {
            addr,
            len: data.len() as u64,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Device {
    config: DeviceConfig,
    slots: Vec<PrrSlot>,
    irq: IrqBank,
    memory: DeviceMemory,
    guards: Vec<Option<(u64, u64)>>,
    queue: EventQueue<Timer>,
    reconfig_in_flight: Option<usize>,
    dma_busy_until: SimTime,
    outbox: Vec<DeviceEvent>,
}

impl Device {
    pub fn new(config: DeviceConfig) -> Result<Self, DeviceConfigError> {
        config.validate()?;
        Ok(Self {
            slots: (0..config.prr_count).map(PrrSlot::new).collect(),
            irq: IrqBank::new(config.prr_count),
            memory: DeviceMemory::new(config.ddr_size),
            guards: vec![None; config.prr_count],
            queue: EventQueue::new(),
            reconfig_in_flight: None,
            dma_busy_until: SimTime::ZERO,
            outbox: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn cost(&self) -> &CostModel {
        &self.config.cost
    }

    pub fn prr_count(&self) -> usize {
        self.slots.len()
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue.peek_time()
    }

    pub fn has_pending_events(&self) -> bool {
        !self.queue.is_empty()
    }

    pub fn slot(&self, prr: usize) -> Result<&PrrSlot, DeviceError> {
        self.slots.get(prr).ok_or(DeviceError::InvalidRegion(prr))
    }

    pub fn slots(&self) -> &[PrrSlot] {
        &self.slots
    }

    pub fn memory(&self) -> &DeviceMemory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut DeviceMemory {
        &mut self.memory
    }

    pub fn irq(&self) -> &IrqBank {
        &self.irq
    }

    pub fn reconfig_in_flight(&self) -> Option<usize> {
        self.reconfig_in_flight
    }

    pub fn clock_hz(&self, prr: usize) -> f64 {
        self.config
            .prr_clock_hz
            .get(prr)
            .copied()
            .unwrap_or(self.config.cost.clock_hz)
    }

    /// Drains everything the shell has reported since the last call.
    pub fn take_events(&mut self) -> Vec<DeviceEvent> {
        std::mem::take(&mut self.outbox)
    }

    fn check_region(&self, prr: usize) -> Result<(), DeviceError> {
        if prr < self.slots.len() {
            Ok(())
        } else {
            Err(DeviceError::InvalidRegion(prr))
        }
    }

    // ---- event loop -------------------------------------------------------

    /// Fires the earliest pending event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some((at, timer)) = self.queue.pop() else {
            return false;
        };
        self.fire(at, timer);
        true
    }

    /// Fires the earliest event only if it is due at or before `limit`.
    pub fn step_until(&mut self, limit: SimTime) -> bool {
        let Some((at, timer)) = self.queue.pop_until(limit) else {
            return false;
        };
        self.fire(at, timer);
        true
    }

    /// Fires every event due at or before `to`, then moves the clock to `to`.
    pub fn advance_to(&mut self, to: SimTime) {
        while self.step_until(to) {}
        self.queue.advance_clock(to);
    }

    pub fn run_until_idle(&mut self) {
        while self.step() {}
    }

    /// Moves the clock to `to`; the caller guarantees no event is due earlier.
    pub fn set_clock(&mut self, to: SimTime) {
        self.queue.advance_clock(to);
    }

    fn fire(&mut self, at: SimTime, timer: Timer) {
        match timer {
            Timer::ReconfigDone {
                prr,
                generation,
                descriptor,
                started,
            } => {
                self.reconfig_in_flight = None;
                let slot = &mut self.slots[prr];
                if slot.generation != generation {
                    return;
                }
                let kind = descriptor.kind;
                slot.state = SlotState::Ready;
                slot.frozen = false;
                slot.kernel = Some(descriptor);
                self.outbox.push(DeviceEvent::ReconfigDone {
                    at,
                    started,
                    prr,
                    kind,
                });
            }
            Timer::KernelDone {
                prr,
                generation,
                started,
                instance,
                arg_error,
            } => {
                if self.slots[prr].generation != generation {
                    return;
                }
                let result = match arg_error {
                    Some(e) => Err(e),
                    None => {
                        let guard = self.active_guard(prr);
                        let mut port = PrrPort {
                            memory: &mut self.memory,
                            guard,
                        };
                        instance.execute(&mut port).map(|_| ())
                    }
                };
                if let Err(KernelError::Fault(MemFault::Guard { addr, len })) = &result {
                    self.outbox.push(DeviceEvent::GuardFault {
                        at,
                        prr,
                        addr: *addr,
                        len: *len,
                    });
                }
                let slot = &mut self.slots[prr];
                slot.state = SlotState::Ready;
                slot.registers.start = false;
                slot.registers.done = true;
                slot.registers.error = result.is_err();
                self.outbox.push(DeviceEvent::KernelDone {
                    at,
                    started,
                    prr,
                    error: result.err(),
                });
                self.raise_irq(prr);
            }
            Timer::DmaDone {
                started,
                direction,
                len,
            } => self.outbox.push(DeviceEvent::DmaDone {
                at,
                started,
                direction,
                len,
            }),
        }
    }

    // ---- PR controller ----------------------------------------------------

    /// Starts configuring the region named inside the bitfile.
    ///
    /// The control block decodes the file and checks CRC and device/shell
    /// compatibility, nothing more: the frames land wherever the file says.
    /// Deciding whether the requester may touch that region is the broker's job.
    pub fn pr_reconfigure(&mut self, bitfile: &[u8]) -> Result<ReconfigTicket, DeviceError> {
        let result = self.start_reconfig(bitfile);
        if let Err(error) = &result {
            self.outbox.push(DeviceEvent::ReconfigFailed {
                at: self.now(),
                error: error.clone(),
            });
        }
        result
    }

    fn start_reconfig(&mut self, bitfile: &[u8]) -> Result<ReconfigTicket, DeviceError> {
        let parsed = decode_bitfile(bitfile)?;
        if cb_compatibility_check(&parsed, self.config.device_id, self.config.shell_id)
            == Compatibility::Reject
        {
            return Err(DeviceError::Incompatible);
        }
        let prr = parsed.header.prr_id as usize;
        self.check_region(prr)?;
        if self.reconfig_in_flight.is_some() {
            return Err(DeviceError::Busy);
        }

        let duration = if self.config.full_device_reconfig {
            self.config.cost.full_reconfig()
        } else {
            self.config.cost.pr_time(bitfile.len() as u64)
        };
        let started = self.now();
        let slot = &mut self.slots[prr];
        slot.generation += 1;
        slot.state = SlotState::Configuring;
        slot.frozen = true;
        slot.kernel = None;
        slot.registers = KernelRegisterFile::default();
        let generation = slot.generation;
        self.reconfig_in_flight = Some(prr);
        self.queue.schedule_in(
            duration,
            Timer::ReconfigDone {
                prr,
                generation,
                descriptor: parsed.descriptor,
                started,
            },
        );
        Ok(ReconfigTicket {
            prr,
            started,
            done_at: started + duration,
        })
    }

    /// Returns a region to Empty, discarding its kernel and any in-flight run.
    pub fn scrub(&mut self, prr: usize) -> Result<(), DeviceError> {
        self.check_region(prr)?;
        let slot = &mut self.slots[prr];
        if slot.state == SlotState::Configuring {
            return Err(DeviceError::Busy);
        }
        slot.generation += 1;
        slot.state = SlotState::Empty;
        slot.kernel = None;
        slot.registers = KernelRegisterFile::default();
        Ok(())
    }

    // ---- PRR interface (kernel register file) -----------------------------

    pub fn write_kernel_register(
        &mut self,
        prr: usize,
        index: usize,
        value: u64,
    ) -> Result<RegisterWrite, DeviceError> {
        self.check_region(prr)?;
        if index >= REGISTER_COUNT {
            return Err(DeviceError::InvalidRegister(index));
        }
        let now = self.now();
        if self.slots[prr].frozen {
            self.outbox.push(DeviceEvent::FrozenAccess {
                at: now,
                prr,
                register: index,
                write: true,
            });
            return Ok(RegisterWrite::Ignored);
        }
        match index {
            REG_CONTROL if value & 1 == 1 => Ok(self.launch(prr)),
            REG_CONTROL | REG_STATUS => Ok(RegisterWrite::Stored),
            _ => {
                self.slots[prr].registers.args[index - REG_ARG0] = value;
                Ok(RegisterWrite::Stored)
            }
        }
    }

    fn launch(&mut self, prr: usize) -> RegisterWrite {
        let now = self.now();
        let clock_hz = self.clock_hz(prr);
        let slot = &mut self.slots[prr];
        let Some(descriptor) = slot.kernel.as_ref() else {
            return RegisterWrite::Stored;
        };
        if slot.state != SlotState::Ready {
            return RegisterWrite::Stored;
        }
        let instance = KernelInstance::bind(descriptor, &slot.registers.args);
        let (cycles, arg_error) = match instance.cycles() {
            Ok(c) => (c, None),
            Err(e) => (0, Some(e)),
        };
        slot.state = SlotState::Running;
        slot.registers.start = true;
        slot.registers.done = false;
        slot.registers.error = false;
        let generation = slot.generation;
        let duration = self.config.cost.cycles_time(cycles, clock_hz);
        self.queue.schedule_in(
            duration,
            Timer::KernelDone {
                prr,
                generation,
                started: now,
                instance,
                arg_error,
            },
        );
        self.outbox.push(DeviceEvent::KernelStarted {
            at: now,
            prr,
            cycles,
        });
        RegisterWrite::Launched {
            done_at: now + duration,
        }
    }

    /// Frozen regions read as zero.
    pub fn read_kernel_register(&mut self, prr: usize, index: usize) -> Result<u64, DeviceError> {
        self.check_region(prr)?;
        if index >= REGISTER_COUNT {
            return Err(DeviceError::InvalidRegister(index));
        }
        let slot = &self.slots[prr];
        if slot.frozen {
            self.outbox.push(DeviceEvent::FrozenAccess {
                at: self.now(),
                prr,
                register: index,
                write: false,
            });
            return Ok(0);
        }
        Ok(match index {
            REG_CONTROL => u64::from(slot.registers.start),
            REG_STATUS => slot.status_word(),
            _ => slot.registers.args[index - REG_ARG0],
        })
    }

    // ---- IRQ controller ---------------------------------------------------

    pub fn raise_irq(&mut self, prr: usize) {
        if self.irq.raise(prr) {
            self.outbox.push(DeviceEvent::Msi { at: self.now() });
        }
    }

    pub fn read_irq_status(&self) -> u8 {
        self.irq.status()
    }

    pub fn write_irq_mask(&mut self, mask: u8) {
        if self.irq.write_mask(mask) {
            self.outbox.push(DeviceEvent::Msi { at: self.now() });
        }
    }

    pub fn ack_irq(&mut self, prr: usize) -> Result<(), DeviceError> {
        self.check_region(prr)?;
        self.irq.ack(prr);
        Ok(())
    }

    pub fn begin_msi_service(&mut self) {
        self.irq.begin_service();
    }

    // ---- DDR, DMA and the range guard -------------------------------------

    pub fn set_guard(&mut self, prr: usize, window: Option<(u64, u64)>) -> Result<(), DeviceError> {
        self.check_region(prr)?;
        self.guards[prr] = window;
        Ok(())
    }

    pub fn guard(&self, prr: usize) -> Option<(u64, u64)> {
        self.guards.get(prr).copied().flatten()
    }

    fn active_guard(&self, prr: usize) -> Option<(u64, u64)> {
        if self.config.range_guard {
            self.guards[prr]
        } else {
            None
        }
    }

    /// Copies between a host staging buffer and DDR. The engine serves one
    /// transfer at a time; the returned completion accounts for queueing.
    pub fn dma_transfer(
        &mut self,
        direction: DmaDirection,
        staging: &mut [u8],
        device_addr: u64,
    ) -> Result<DmaCompletion, DeviceError> {
        let len = staging.len() as u64;
        self.memory
            .check(device_addr, len)
            .map_err(|_| DeviceError::DmaFault {
                addr: device_addr,
                len,
            })?;
        match direction {
            DmaDirection::HostToDevice => self.memory.write(device_addr, staging),
            DmaDirection::DeviceToHost => self
                .memory
                .read(device_addr, staging.len())
                .map(|data| staging.copy_from_slice(&data)),
        }
        .expect("range checked above");
        let started = self.now().max(self.dma_busy_until);
        let done_at = started + self.config.cost.dma_time(len);
        self.dma_busy_until = done_at;
        self.queue.schedule_at(
            done_at,
            Timer::DmaDone {
                started,
                direction,
                len,
            },
        );
        Ok(DmaCompletion { started, done_at })
    }

    /// A running kernel's direct DDR access. Without the guard any in-range
    /// address is reachable, whoever owns it.
    pub fn kernel_memory_access(
        &mut self,
        prr: usize,
        access: KernelAccess,
    ) -> Result<Option<Vec<u8>>, DeviceError> {
        self.check_region(prr)?;
        if self.slots[prr].state != SlotState::Running {
            return Err(DeviceError::NotRunning(prr));
        }
        let guard = self.active_guard(prr);
        let mut port = PrrPort {
            memory: &mut self.memory,
            guard,
        };
        let result = match access {
            KernelAccess::Read { addr, len } => port.read(addr, len).map(Some),
            KernelAccess::Write { addr, data } => port.write(addr, &data).map(|_| None),
        };
        result.map_err(|fault| match fault {
            MemFault::Guard { addr, len } => {
                self.outbox.push(DeviceEvent::GuardFault {
                    at: self.queue.now(),
                    prr,
                    addr,
                    len,
                });
                DeviceError::GuardFault { prr, addr, len }
            }
            MemFault::OutOfRange { addr, len } => DeviceError::DmaFault { addr, len },
        })
    }
}
