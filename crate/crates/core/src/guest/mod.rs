//! Guest-side stack: a session ("device file") over any [`Transport`], the
//! MMD layer splitting it into named interfaces, and a small runtime for
//! buffers and kernel launches.
//!
//! Notifications ride back on replies. Each one is logged synchronously in
//! the calling thread and then handed to a per-session dispatch thread that
//! runs the registered callbacks one at a time, in arrival order.

mod mmd;
mod runtime;

use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};

use thiserror::Error;

use crate::vmm::transport::{Transport, TransportError};
use crate::vmm::wire::{Notification, ReplyBody, Request, Snapshot};
use crate::vmm::VmmError;

pub use mmd::{InterfaceKind, MmdDevice, MmdInterface, WriteAck, MGMT_BASE};
pub use runtime::{GuestBuffer, Runtime};

#[derive(Debug, Error)]
pub enum GuestError {
    #[error("broker refused: {0}")]
    Vmm(VmmError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("no interface named {0:?}")]
    NoSuchInterface(String),
    #[error("interface already closed")]
    ClosedInterface,
    #[error("operation not supported on this interface")]
    Unsupported,
    #[error("length {0} is not valid here")]
    InvalidLength(u64),
    #[error("[{offset}, +{len}) exceeds buffer of {size} bytes")]
    OutOfBounds { offset: u64, len: u64, size: u64 },
    #[error("no kernel loaded in the assigned region")]
    NoKernelLoaded,
    #[error("kernel finished with an error")]
    KernelFault,
    #[error("nothing left to simulate but the wait is unsatisfied")]
    Stalled,
    #[error("unexpected reply body")]
    UnexpectedReply,
}

impl GuestError {
    /// The broker-side code, if the failure came from the broker.
    pub fn vmm(&self) -> Option<VmmError> {
        match self {
            Self::Vmm(e) => Some(*e),
            _ => None,
        }
    }
}

impl From<VmmError> for GuestError {
    fn from(e: VmmError) -> Self {
        Self::Vmm(e)
    }
}

pub type Handler = Box<dyn FnMut(&Notification) + Send>;

#[derive(Default)]
struct Handlers {
    irq: Option<Handler>,
    status: Option<Handler>,
}

impl Handlers {
    fn deliver(&mut self, n: &Notification) {
        let slot = match n {
            Notification::Irq { .. } | Notification::GuardFault { .. } => &mut self.irq,
            Notification::TransferDone { .. } | Notification::ReprogramDone { .. } => {
                &mut self.status
            }
        };
        if let Some(h) = slot {
            h(n);
        }
    }
}

#[derive(Default)]
struct Progress {
    sent: u64,
    done: u64,
}

/// Runs callbacks on a dedicated thread, serialized.
struct Dispatcher {
    tx: Option<Sender<Notification>>,
    handlers: Arc<Mutex<Handlers>>,
    progress: Arc<(Mutex<Progress>, Condvar)>,
    thread: Option<JoinHandle<()>>,
}

impl Dispatcher {
    fn spawn() -> Self {
        let (tx, rx) = mpsc::channel::<Notification>();
        let handlers = Arc::new(Mutex::new(Handlers::default()));
        let progress = Arc::new((Mutex::new(Progress::default()), Condvar::new()));
        let thread = {
            let handlers = Arc::clone(&handlers);
            let progress = Arc::clone(&progress);
            thread::Builder::new()
                .name("guest-dispatch".into())
                .spawn(move || {
                    for n in rx {
                        handlers.lock().unwrap_or_else(|p| p.into_inner()).deliver(&n);
                        let (lock, cv) = &*progress;
                        lock.lock().unwrap_or_else(|p| p.into_inner()).done += 1;
                        cv.notify_all();
                    }
                })
                .expect("spawn dispatch thread")
        };
        Self {
            tx: Some(tx),
            handlers,
            progress,
            thread: Some(thread),
        }
    }

    fn send(&self, n: Notification) {
        self.progress.0.lock().unwrap_or_else(|p| p.into_inner()).sent += 1;
        if let Some(tx) = &self.tx {
            // The receiver lives as long as `self`.
            let _ = tx.send(n);
        }
    }

    fn flush(&self) {
        let (lock, cv) = &*self.progress;
        let mut p = lock.lock().unwrap_or_else(|p| p.into_inner());
        while p.done < p.sent {
            p = cv.wait(p).unwrap_or_else(|p| p.into_inner());
        }
    }
}

impl Drop for Dispatcher {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl std::fmt::Debug for Dispatcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dispatcher").finish_non_exhaustive()
    }
}

/// An attached session: the lowest guest layer.
#[derive(Debug)]
pub struct DeviceFile<T: Transport> {
    transport: T,
    token: u64,
    vm: u32,
    prr: u32,
    next_request_id: u32,
    log: Vec<Notification>,
    dispatcher: Dispatcher,
}

impl<T: Transport> DeviceFile<T> {
    pub fn attach(mut transport: T, vm: u32) -> Result<Self, GuestError> {
        let reply = transport.call(0, 1, Request::Attach { vm })?;
        let (token, prr) = match reply.result? {
            ReplyBody::Attached { token, prr } => (token, prr),
            _ => return Err(GuestError::UnexpectedReply),
        };
        let mut file = Self {
            transport,
            token,
            vm,
            prr,
            next_request_id: 2,
            log: Vec::new(),
            dispatcher: Dispatcher::spawn(),
        };
        file.absorb(reply.notifications);
        Ok(file)
    }

    pub fn vm(&self) -> u32 {
        self.vm
    }

    pub fn prr(&self) -> u32 {
        self.prr
    }

    pub fn token(&self) -> u64 {
        self.token
    }

    /// Id the next request will carry.
    pub fn next_request_id(&self) -> u32 {
        self.next_request_id
    }

    /// Every notification received so far, in arrival order.
    pub fn notifications(&self) -> &[Notification] {
        &self.log
    }

    fn absorb(&mut self, notifications: Vec<Notification>) {
        for n in notifications {
            self.log.push(n.clone());
            self.dispatcher.send(n);
        }
    }

    /// Sends one request on this session and returns its body.
    pub fn call(&mut self, request: Request) -> Result<ReplyBody, GuestError> {
        let rid = self.next_request_id;
        self.next_request_id = self.next_request_id.wrapping_add(1);
        let reply = self.transport.call(self.token, rid, request)?;
        self.absorb(reply.notifications);
        Ok(reply.result?)
    }

    /// Collects notifications without doing anything else.
    pub fn poll(&mut self) -> Result<(), GuestError> {
        self.call(Request::Poll).map(drop)
    }

    pub fn snapshot(&mut self) -> Result<Snapshot, GuestError> {
        match self.call(Request::Snapshot)? {
            ReplyBody::Snapshot(s) => Ok(s),
            _ => Err(GuestError::UnexpectedReply),
        }
    }

    /// Moves shared virtual time forward to `to` (never backwards).
    pub fn advance(&mut self, to: u64) -> Result<Snapshot, GuestError> {
        match self.call(Request::Advance { to })? {
            ReplyBody::Snapshot(s) => Ok(s),
            _ => Err(GuestError::UnexpectedReply),
        }
    }

    /// Blocks until every callback for notifications received so far ran.
    pub fn flush(&self) {
        self.dispatcher.flush();
    }

    fn set_handler(&mut self, irq: bool, handler: Option<Handler>) {
        let mut h = self
            .dispatcher
            .handlers
            .lock()
            .unwrap_or_else(|p| p.into_inner());
        if irq {
            h.irq = handler;
        } else {
            h.status = handler;
        }
    }

    pub fn detach(mut self) -> Result<(), GuestError> {
        self.call(Request::Detach)?;
        self.flush();
        Ok(())
    }
}

#[cfg(test)]
mod tests;
