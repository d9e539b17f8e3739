//! Minimal accelerator runtime composed only of MMD operators.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::bitstream::ARG_REGISTERS;
use crate::device::{REG_ARG0, REG_CONTROL, REG_STATUS, STATUS_LOADED, STATUS_RUNNING};
use crate::vmm::transport::Transport;
use crate::vmm::wire::{Notification, RegWriteOutcome};
use crate::vmm::VmmError;

use super::mmd::{MmdDevice, MmdInterface, MGMT_BASE};
use super::GuestError;

/// A device allocation. Its size never changes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuestBuffer {
    base: u64,
    size: u64,
    /// Copy of the last data read back, if any.
    pub shadow: Option<Vec<u8>>,
}

impl GuestBuffer {
    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    fn check(&self, offset: u64, len: u64) -> Result<(), GuestError> {
        match offset.checked_add(len) {
            Some(end) if end <= self.size => Ok(()),
            _ => Err(GuestError::OutOfBounds {
                offset,
                len,
                size: self.size,
            }),
        }
    }
}

#[derive(Debug)]
pub struct Runtime<T: Transport> {
    dev: MmdDevice<T>,
    cra: MmdInterface,
    mem: MmdInterface,
    rep: MmdInterface,
    /// Irq count at the last launch; done once the log holds one more.
    pending_kernel: Option<usize>,
    pending_reprogram: Option<u32>,
    callbacks: Arc<AtomicU64>,
}

impl<T: Transport> Runtime<T> {
    pub fn attach(transport: T, vm: u32) -> Result<Self, GuestError> {
        let mut dev = MmdDevice::attach(transport, vm)?;
        let cra = dev.mmd_open("kernel-cra")?;
        let mem = dev.mmd_open("memory")?;
        let rep = dev.mmd_open("reprogram")?;
        let callbacks = Arc::new(AtomicU64::new(0));
        let irq = Arc::clone(&callbacks);
        dev.mmd_set_irq(
            &cra,
            Some(Box::new(move |_| {
                irq.fetch_add(1, Ordering::SeqCst);
            })),
        )?;
        let status = Arc::clone(&callbacks);
        dev.mmd_set_status(
            &mem,
            Some(Box::new(move |_| {
                status.fetch_add(1, Ordering::SeqCst);
            })),
        )?;
        Ok(Self {
            dev,
            cra,
            mem,
            rep,
            pending_kernel: None,
            pending_reprogram: None,
            callbacks,
        })
    }

    pub fn device(&mut self) -> &mut MmdDevice<T> {
        &mut self.dev
    }

    pub fn prr(&self) -> u32 {
        self.dev.file_ref().prr()
    }

    pub fn vm(&self) -> u32 {
        self.dev.file_ref().vm()
    }

    /// Callbacks the dispatch thread has run so far.
    pub fn callbacks_run(&self) -> u64 {
        self.callbacks.load(Ordering::SeqCst)
    }

    pub fn notifications(&self) -> &[Notification] {
        self.dev.file_ref().notifications()
    }

    pub fn detach(self) -> Result<(), GuestError> {
        self.dev.detach()
    }

    pub fn create_buffer(&mut self, size: u64) -> Result<GuestBuffer, GuestError> {
        if size == 0 || size >= MGMT_BASE {
            return Err(GuestError::InvalidLength(size));
        }
        let b = self.dev.mmd_read(&self.mem, MGMT_BASE + size, 16)?;
        let word = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().expect("16-byte reply"));
        Ok(GuestBuffer {
            base: word(0),
            size: word(8),
            shadow: None,
        })
    }

    pub fn free_buffer(&mut self, buf: GuestBuffer) -> Result<(), GuestError> {
        self.dev
            .mmd_write(&self.mem, MGMT_BASE, &buf.base.to_le_bytes())
            .map(drop)
    }

    /// Returns the request id the transfer-done status carries.
    pub fn write_buffer(
        &mut self,
        buf: &GuestBuffer,
        offset: u64,
        data: &[u8],
    ) -> Result<u32, GuestError> {
        buf.check(offset, data.len() as u64)?;
        Ok(self.dev.mmd_write(&self.mem, buf.base + offset, data)?.request_id)
    }

    pub fn read_buffer(
        &mut self,
        buf: &mut GuestBuffer,
        offset: u64,
        len: u64,
    ) -> Result<Vec<u8>, GuestError> {
        buf.check(offset, len)?;
        let data = self.dev.mmd_read(&self.mem, buf.base + offset, len)?;
        buf.shadow = Some(data.clone());
        Ok(data)
    }

    pub fn set_kernel_args(&mut self, args: &[u64]) -> Result<(), GuestError> {
        if args.is_empty() {
            return Ok(());
        }
        if args.len() > ARG_REGISTERS {
            return Err(GuestError::InvalidLength(args.len() as u64));
        }
        let bytes: Vec<u8> = args.iter().flat_map(|a| a.to_le_bytes()).collect();
        self.dev.mmd_write(&self.cra, REG_ARG0 as u64, &bytes).map(drop)
    }

    fn status(&mut self) -> Result<u64, GuestError> {
        let b = self.dev.mmd_read(&self.cra, REG_STATUS as u64, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("one register")))
    }

    fn irq_count(&self) -> usize {
        self.notifications()
            .iter()
            .filter(|n| matches!(n, Notification::Irq { .. }))
            .count()
    }

    /// Starts the loaded kernel and returns its completion time.
    pub fn launch(&mut self) -> Result<u64, GuestError> {
        let status = self.status()?;
        if status & STATUS_LOADED == 0 {
            return Err(GuestError::NoKernelLoaded);
        }
        if status & STATUS_RUNNING != 0 {
            return Err(GuestError::Vmm(VmmError::Busy));
        }
        let seen = self.irq_count();
        let ack = self
            .dev
            .mmd_write(&self.cra, REG_CONTROL as u64, &1u64.to_le_bytes())?;
        match ack.register {
            Some(RegWriteOutcome::Launched { done_at }) => {
                self.pending_kernel = Some(seen);
                Ok(done_at)
            }
            // Frozen mid-reconfiguration, or the region changed under us.
            _ => Err(GuestError::NoKernelLoaded),
        }
    }

    /// Queues a reconfiguration of the session's region. Completion is
    /// observed by [`Self::wait`].
    pub fn submit_program(&mut self, bitfile: &[u8]) -> Result<u32, GuestError> {
        let request_id = self.dev.mmd_reprogram(&self.rep, bitfile)?;
        self.pending_reprogram = Some(request_id);
        Ok(request_id)
    }

    /// Reconfigures and waits for the outcome.
    pub fn program(&mut self, bitfile: &[u8]) -> Result<(), GuestError> {
        self.submit_program(bitfile)?;
        self.wait()
    }

    /// Collects notifications without consuming any outcome.
    pub fn poll(&mut self) -> Result<(), GuestError> {
        self.dev.file().poll()
    }

    pub fn kernel_pending(&self) -> bool {
        self.pending_kernel.is_some()
    }

    pub fn reprogram_pending(&self) -> bool {
        self.pending_reprogram.is_some()
    }

    /// Outcome of the last launch once its interrupt has arrived. Clears it.
    pub fn take_kernel_outcome(&mut self) -> Option<Result<(), GuestError>> {
        let seen = self.pending_kernel?;
        let error = self
            .notifications()
            .iter()
            .filter_map(|n| match n {
                Notification::Irq { error, .. } => Some(*error),
                _ => None,
            })
            .nth(seen)?;
        self.pending_kernel = None;
        Some(if error {
            Err(GuestError::KernelFault)
        } else {
            Ok(())
        })
    }

    /// Outcome of the queued reconfiguration once it finished. Clears it.
    pub fn take_reprogram_outcome(&mut self) -> Option<Result<(), GuestError>> {
        let id = self.pending_reprogram?;
        let error = self.notifications().iter().rev().find_map(|n| match n {
            Notification::ReprogramDone {
                request_id, error, ..
            } if *request_id == id => Some(*error),
            _ => None,
        })?;
        self.pending_reprogram = None;
        Some(error.map_or(Ok(()), |e| Err(GuestError::Vmm(e))))
    }

    /// Blocks until every pending launch and reconfiguration finishes,
    /// driving virtual time as needed. Returns at once if nothing is pending.
    /// Reports the first failure.
    pub fn wait(&mut self) -> Result<(), GuestError> {
        let mut first = Ok(());
        loop {
            for outcome in [self.take_reprogram_outcome(), self.take_kernel_outcome()]
                .into_iter()
                .flatten()
            {
                if first.is_ok() {
                    first = outcome;
                }
            }
            if !self.kernel_pending() && !self.reprogram_pending() {
                break;
            }
            match self.dev.file().snapshot()?.next_event {
                Some(t) => {
                    self.dev.file().advance(t)?;
                }
                None => {
                    self.dev.file().poll()?;
                    if self.take_reprogram_outcome().is_none() && self.take_kernel_outcome().is_none() {
                        self.pending_kernel = None;
                        self.pending_reprogram = None;
                        return Err(GuestError::Stalled);
                    }
                }
            }
        }
        self.dev.file_ref().flush();
        first
    }
}
