//! Drives every VM's script against one broker and collects the report.
//!
//! Scheduling is deterministic: runnable VMs each execute one operation per
//! round in id order. When none can run, blocked VMs poll for their
//! notifications and, failing that, shared virtual time jumps to the next
//! device event or sleeper deadline.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bitstream::{encode_bitfile_with_image, BitfileTarget, KernelDescriptor};
use crate::guest::{GuestBuffer, GuestError, Runtime};
use crate::vmm::accounting::{Breakdown, VmStats};
use crate::vmm::transport::{LocalTransport, Transport, TransportError, UnixTransport};
use crate::vmm::wire::{ReplyBody, Request, Snapshot};
use crate::vmm::{Mediation, Vmm, VmmConfigError};

use super::config::{ConfigError, ScenarioConfig};
use super::script::{Fill, Op, Operand};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("broker at the other end runs configuration {remote}, expected {local}")]
    ConfigMismatch { local: String, remote: String },
    #[error("vm {vm}: {source}")]
    Guest { vm: u32, source: GuestError },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("cannot connect: {0}")]
    Connect(std::io::Error),
    #[error("scenario deadlocked; stuck VMs: {stuck:?}")]
    DeadlockDetected { stuck: Vec<u32> },
    #[error("unexpected reply from the broker")]
    UnexpectedReply,
}

impl From<VmmConfigError> for RunError {
    fn from(e: VmmConfigError) -> Self {
        Self::Config(ConfigError::Setup(e))
    }
}

/// Opens transports to one broker.
pub trait Connector {
    type T: Transport;
    fn connect(&mut self) -> Result<Self::T, RunError>;
}

/// In-process broker.
#[derive(Debug, Clone)]
pub struct LocalConnector(pub Arc<Mutex<Vmm>>);

impl LocalConnector {
    pub fn new(config: &ScenarioConfig) -> Result<Self, RunError> {
        Ok(Self(Arc::new(Mutex::new(Vmm::new(
            config.device.clone(),
            config.vmm.clone(),
        )?))))
    }
}

impl Connector for LocalConnector {
    type T = LocalTransport;
    fn connect(&mut self) -> Result<LocalTransport, RunError> {
        Ok(LocalTransport::shared(Arc::clone(&self.0)))
    }
}

/// A broker serving a local socket.
#[derive(Debug, Clone)]
pub struct UnixConnector(pub PathBuf);

impl Connector for UnixConnector {
    type T = UnixTransport;
    fn connect(&mut self) -> Result<UnixTransport, RunError> {
        UnixTransport::connect(&self.0).map_err(RunError::Connect)
    }
}

/// Broker-side session requests made outside any VM.
struct Control<T: Transport> {
    transport: T,
    next_id: u32,
}

impl<T: Transport> Control<T> {
    fn call(&mut self, request: Request) -> Result<ReplyBody, RunError> {
        self.next_id = self.next_id.wrapping_add(1);
        let reply = self.transport.call(0, self.next_id, request)?;
        reply.result.map_err(|e| RunError::Guest {
            vm: u32::MAX,
            source: e.into(),
        })
    }

    fn snapshot(&mut self) -> Result<Snapshot, RunError> {
        match self.call(Request::Snapshot)? {
            ReplyBody::Snapshot(s) => Ok(s),
            _ => Err(RunError::UnexpectedReply),
        }
    }

    fn text(&mut self, request: Request) -> Result<String, RunError> {
        match self.call(request)? {
            ReplyBody::Text(t) => Ok(t),
            _ => Err(RunError::UnexpectedReply),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Ready,
    WaitKernel,
    WaitReprogram,
    Sleeping(u64),
    Done,
}

struct VmRun<T: Transport> {
    id: u32,
    rt: Runtime<T>,
    ops: Vec<Op>,
    pc: usize,
    state: State,
    buffers: BTreeMap<String, GuestBuffer>,
    errors: Vec<String>,
    reads: Sha256,
    rng: ChaCha8Rng,
}

fn error_tag(e: &GuestError) -> String {
    match e {
        GuestError::Vmm(v) => v.name().to_string(),
        GuestError::NoSuchInterface(_) => "no_such_interface".into(),
        GuestError::ClosedInterface => "closed_interface".into(),
        GuestError::Unsupported => "unsupported".into(),
        GuestError::InvalidLength(_) => "invalid_length".into(),
        GuestError::OutOfBounds { .. } => "out_of_bounds".into(),
        GuestError::NoKernelLoaded => "no_kernel_loaded".into(),
        GuestError::KernelFault => "kernel_fault".into(),
        GuestError::Stalled => "stalled".into(),
        GuestError::Transport(_) | GuestError::UnexpectedReply => "transport".into(),
    }
}

fn fill_bytes(fill: &Fill, rng: &mut ChaCha8Rng) -> Vec<u8> {
    match fill {
        Fill::Random { len } => {
            let mut b = vec![0; *len as usize];
            rng.fill_bytes(&mut b);
            b
        }
        Fill::Byte { value, len } => vec![*value; *len as usize],
        Fill::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Fill::Iota { count } => (0..*count as i32).flat_map(|x| x.to_le_bytes()).collect(),
    }
}

impl<T: Transport> VmRun<T> {
    fn fail(&mut self, what: impl Into<String>) {
        self.errors.push(format!("{}:{}", self.pc, what.into()));
    }

    /// Runs the next operation. Only transport failures abort the run;
    /// refused operations are recorded and the script continues.
    fn step(&mut self, config: &ScenarioConfig, now: u64) -> Result<(), RunError> {
        let Some(op) = self.ops.get(self.pc).cloned() else {
            self.state = State::Done;
            return Ok(());
        };
        let result = match self.execute(&op, config, now) {
            Ok(()) => Ok(()),
            Err(GuestError::Transport(t)) => Err(t.into()),
            Err(e) => {
                self.fail(error_tag(&e));
                Ok(())
            }
        };
        self.pc += 1;
        result
    }

    fn buffer(&self, name: &str) -> Option<&GuestBuffer> {
        self.buffers.get(name)
    }

    fn execute(&mut self, op: &Op, config: &ScenarioConfig, now: u64) -> Result<(), GuestError> {
        match op {
            Op::Reprogram {
                kind,
                image,
                prr,
                cycles,
            } => {
                let mut d = KernelDescriptor::new(*kind);
                if let Some(c) = cycles {
                    d = d.with_cycles_per_item(*c);
                }
                let target = BitfileTarget::new(
                    config.device.device_id,
                    config.device.shell_id,
                    prr.unwrap_or(self.rt.prr() as u8),
                );
                let bytes = encode_bitfile_with_image(&d, target, *image)
                    .map_err(|_| GuestError::InvalidLength(*image as u64))?;
                self.rt.submit_program(&bytes)?;
                self.state = State::WaitReprogram;
            }
            Op::ReprogramFile { path } => match std::fs::read(path) {
                Ok(bytes) => {
                    self.rt.submit_program(&bytes)?;
                    self.state = State::WaitReprogram;
                }
                Err(_) => self.fail("unreadable_bitfile"),
            },
            Op::Alloc { name, size } => {
                let b = self.rt.create_buffer(*size)?;
                self.buffers.insert(name.clone(), b);
            }
            Op::Free { name } => match self.buffers.remove(name) {
                Some(b) => self.rt.free_buffer(b)?,
                None => self.fail("unknown_buffer"),
            },
            Op::Write { name, offset, fill } => {
                let data = fill_bytes(fill, &mut self.rng);
                match self.buffer(name).cloned() {
                    Some(b) => {
                        self.rt.write_buffer(&b, *offset, &data)?;
                    }
                    None => self.fail("unknown_buffer"),
                }
            }
            Op::Read { name, offset, len } => match self.buffers.get(name).cloned() {
                Some(mut b) => {
                    let data = self.rt.read_buffer(&mut b, *offset, *len)?;
                    self.reads.update(&data);
                }
                None => self.fail("unknown_buffer"),
            },
            Op::Args(args) => {
                let mut values = Vec::with_capacity(args.len());
                for a in args {
                    match a {
                        Operand::Int(v) => values.push(*v),
                        Operand::Buffer { name, offset } => match self.buffer(name) {
                            Some(b) => values.push(b.base() + offset),
                            None => {
                                self.fail("unknown_buffer");
                                return Ok(());
                            }
                        },
                    }
                }
                self.rt.set_kernel_args(&values)?;
            }
            Op::Launch => {
                self.rt.launch()?;
            }
            Op::Wait => {
                if self.rt.kernel_pending() {
                    self.state = State::WaitKernel;
                }
            }
            Op::Sleep { ns } => self.state = State::Sleeping(now.saturating_add(*ns)),
        }
        Ok(())
    }

    /// Moves a blocked VM back to Ready once its notification arrived.
    fn unblock(&mut self) -> bool {
        let outcome = match self.state {
            State::WaitKernel => self.rt.take_kernel_outcome(),
            State::WaitReprogram => self.rt.take_reprogram_outcome(),
            _ => return false,
        };
        match outcome {
            Some(r) => {
                if let Err(e) = r {
                    // Attribute the failure to the op that blocked.
                    self.errors.push(format!("{}:{}", self.pc - 1, error_tag(&e)));
                }
                self.state = State::Ready;
                true
            }
            None => false,
        }
    }
}

/// Raw result of driving a scenario once.
#[derive(Debug, Clone)]
pub struct Execution {
    pub breakdown: Breakdown,
    pub trace: String,
    pub memory_digest: String,
    pub fingerprint: String,
    pub vms: Vec<VmOutcome>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VmOutcome {
    pub id: u32,
    pub prr: u32,
    pub ops: usize,
    /// `op_index:error` for each refused operation.
    pub errors: Vec<String>,
    /// SHA-256 over all bytes read back, hex.
    pub read_digest: String,
}

fn vm_seed(seed: u64, vm: u32) -> u64 {
    seed ^ u64::from(vm).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs every VM script to completion, then lets the device go idle.
pub fn execute<C: Connector>(
    config: &ScenarioConfig,
    connector: &mut C,
) -> Result<Execution, RunError> {
    config.validate()?;
    let mut control = Control {
        transport: connector.connect()?,
        next_id: 0,
    };
    let local = crate::vmm::fingerprint(&config.device, &config.vmm);
    let remote = control.text(Request::Hello)?;
    if remote != local {
        return Err(RunError::ConfigMismatch { local, remote });
    }
    let mut vms = Vec::new();
    for (id, ops) in config.scripts()? {
        let rt = Runtime::attach(connector.connect()?, id)
            .map_err(|source| RunError::Guest { vm: id, source })?;
        vms.push(VmRun {
            id,
            rt,
            ops,
            pc: 0,
            state: State::Ready,
            buffers: BTreeMap::new(),
            errors: Vec::new(),
            reads: Sha256::new(),
            rng: ChaCha8Rng::seed_from_u64(vm_seed(config.seed, id)),
        });
    }

    loop {
        let mut progressed = false;
        for i in 0..vms.len() {
            if vms[i].state == State::Ready {
                let now = if matches!(vms[i].ops.get(vms[i].pc), Some(Op::Sleep { .. })) {
                    control.snapshot()?.now
                } else {
                    0
                };
                vms[i].step(config, now)?;
                progressed = true;
            }
        }
        if progressed {
            continue;
        }
        if vms.iter().all(|v| v.state == State::Done) {
            break;
        }
        for v in vms.iter_mut() {
            if matches!(v.state, State::WaitKernel | State::WaitReprogram) {
                v.rt.poll().map_err(|source| RunError::Guest { vm: v.id, source })?;
                progressed |= v.unblock();
            }
        }
        if progressed {
            continue;
        }
        let snap = control.snapshot()?;
        for v in vms.iter_mut() {
            if let State::Sleeping(until) = v.state {
                if until <= snap.now {
                    v.state = State::Ready;
                    progressed = true;
                }
            }
        }
        if progressed {
            continue;
        }
        let wake = vms
            .iter()
            .filter_map(|v| match v.state {
                State::Sleeping(until) => Some(until),
                _ => None,
            })
            .min();
        let target = match (snap.next_event, wake) {
            (Some(a), Some(b)) => a.min(b),
            (a, b) => match a.or(b) {
                Some(t) => t,
                None => {
                    return Err(RunError::DeadlockDetected {
                        stuck: vms
                            .iter()
                            .filter(|v| v.state != State::Done)
                            .map(|v| v.id)
                            .collect(),
                    })
                }
            },
        };
        control.call(Request::Advance { to: target })?;
    }

    control.call(Request::RunUntilIdle)?;
    let breakdown = match control.call(Request::Breakdown)? {
        ReplyBody::Breakdown(b) => b,
        _ => return Err(RunError::UnexpectedReply),
    };
    let trace = control.text(Request::ExportTrace)?;
    let memory_digest = hex::encode(control.snapshot()?.digest);
    let vms = vms
        .into_iter()
        .map(|v| VmOutcome {
            id: v.id,
            prr: v.rt.prr(),
            ops: v.ops.len(),
            errors: v.errors,
            read_digest: hex::encode(v.reads.finalize()),
        })
        .collect();
    Ok(Execution {
        breakdown,
        trace,
        memory_digest,
        fingerprint: local,
        vms,
    })
}

/// The first VM's workload alone on bare metal: no mediation overhead, no
/// staging copies, same device.
pub fn native_baseline(config: &ScenarioConfig) -> ScenarioConfig {
    let mut c = config.clone();
    c.vms.truncate(1);
    c.vmm.mediation = Mediation::Native;
    c
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VmReport {
    pub id: u32,
    pub prr: u32,
    pub ops: usize,
    pub forwarded_calls: u64,
    pub pass_through_calls: u64,
    pub bytes_written: u64,
    pub bytes_read: u64,
    pub kernel_runs: u64,
    pub reconfigurations: u64,
    pub software_ns: u64,
    pub transfer_ns: u64,
    pub kernel_ns: u64,
    pub reconfiguration_ns: u64,
    pub errors: Vec<String>,
    pub read_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BreakdownReport {
    pub description: String,
    pub seed: u64,
    pub fingerprint: String,
    pub total_ns: u64,
    pub software_ns: u64,
    pub transfer_ns: u64,
    pub kernel_ns: u64,
    pub reconfiguration_ns: u64,
    pub idle_ns: u64,
    pub software_share: f64,
    pub transfer_share: f64,
    pub kernel_share: f64,
    pub reconfiguration_share: f64,
    pub idle_share: f64,
    /// Same workload as the first VM, run natively.
    pub native_total_ns: u64,
    pub memory_digest: String,
    pub vm: Vec<VmReport>,
}

impl BreakdownReport {
    pub fn from_execution(config: &ScenarioConfig, e: &Execution, native_total_ns: u64) -> Self {
        let b = &e.breakdown;
        let stats: BTreeMap<u32, &VmStats> = b.vms.iter().map(|s| (s.vm, s)).collect();
        let vm = e
            .vms
            .iter()
            .map(|o| {
                let s = stats.get(&o.id).copied().cloned().unwrap_or_default();
                VmReport {
                    id: o.id,
                    prr: o.prr,
                    ops: o.ops,
                    forwarded_calls: s.forwarded_calls,
                    pass_through_calls: s.pass_through_calls,
                    bytes_written: s.bytes_written,
                    bytes_read: s.bytes_read,
                    kernel_runs: s.kernel_runs,
                    reconfigurations: s.reconfigurations,
                    software_ns: s.software_ns,
                    transfer_ns: s.transfer_ns,
                    kernel_ns: s.kernel_ns,
                    reconfiguration_ns: s.reconfiguration_ns,
                    errors: o.errors.clone(),
                    read_digest: o.read_digest.clone(),
                }
            })
            .collect();
        Self {
            description: config.description.clone(),
            seed: config.seed,
            fingerprint: e.fingerprint.clone(),
            total_ns: b.total_ns,
            software_ns: b.software_ns,
            transfer_ns: b.transfer_ns,
            kernel_ns: b.kernel_ns,
            reconfiguration_ns: b.reconfiguration_ns,
            idle_ns: b.idle_ns,
            software_share: b.share(b.software_ns),
            transfer_share: b.share(b.transfer_ns),
            kernel_share: b.share(b.kernel_ns),
            reconfiguration_share: b.share(b.reconfiguration_ns),
            idle_share: b.share(b.idle_ns),
            native_total_ns,
            memory_digest: e.memory_digest.clone(),
            vm,
        }
    }

    pub fn component_sum_ns(&self) -> u64 {
        self.software_ns + self.transfer_ns + self.kernel_ns + self.reconfiguration_ns + self.idle_ns
    }

    /// Stable-order TOML text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: BreakdownReport,
    pub trace: String,
}

/// Runs the scenario against `connector` plus the native baseline in
/// process.
pub fn run_with<C: Connector>(
    config: &ScenarioConfig,
    connector: &mut C,
) -> Result<RunOutput, RunError> {
    let e = execute(config, connector)?;
    let native = native_baseline(config);
    let n = execute(&native, &mut LocalConnector::new(&native)?)?;
    Ok(RunOutput {
        report: BreakdownReport::from_execution(config, &e, n.breakdown.total_ns),
        trace: e.trace,
    })
}

/// In-process run.
pub fn run(config: &ScenarioConfig) -> Result<RunOutput, RunError> {
    run_with(config, &mut LocalConnector::new(config)?)
}
