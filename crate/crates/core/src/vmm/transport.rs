//! Ways for a guest to reach the broker. Both transports push every message
//! through the same binary codec, so they behave identically.

use std::os::unix::net::UnixStream;
use std::path::Path;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use super::wire::{read_frame, write_frame, Reply, ReplyFrame, Request, RequestFrame, WireError};
use super::Vmm;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("connection closed by the broker")]
    Closed,
    #[error("reply does not answer request {0}")]
    Mismatch(u32),
}

pub trait Transport: Send {
    fn call(&mut self, token: u64, request_id: u32, request: Request)
        -> Result<Reply, TransportError>;
}

/// Decodes one request frame body, runs it and encodes the reply frame.
pub fn serve_frame(vmm: &Mutex<Vmm>, body: &[u8]) -> Vec<u8> {
    match RequestFrame::decode_body(body) {
        Ok(f) => {
            let kind = f.request.kind();
            let reply = vmm
                .lock()
                .unwrap_or_else(|p| p.into_inner())
                .handle(f.token, f.request_id, f.request);
            ReplyFrame {
                kind,
                request_id: f.request_id,
                token: f.token,
                reply,
            }
            .encode()
        }
        Err(_) => {
            let request_id = body.get(2..6).map_or(0, |b| u32::from_le_bytes(b.try_into().unwrap()));
            ReplyFrame {
                kind: 0,
                request_id,
                token: 0,
                reply: Reply::err(super::VmmError::Protocol),
            }
            .encode()
        }
    }
}

fn check_reply(frame: &[u8], request_id: u32) -> Result<Reply, TransportError> {
    let reply = ReplyFrame::decode_body(frame)?;
    if reply.request_id != request_id {
        return Err(TransportError::Mismatch(request_id));
    }
    Ok(reply.reply)
}

/// In-process transport sharing one broker between any number of clones.
#[derive(Debug, Clone)]
pub struct LocalTransport {
    vmm: Arc<Mutex<Vmm>>,
}

impl LocalTransport {
    pub fn new(vmm: Vmm) -> Self {
        Self::shared(Arc::new(Mutex::new(vmm)))
    }

    pub fn shared(vmm: Arc<Mutex<Vmm>>) -> Self {
        Self { vmm }
    }

    pub fn vmm(&self) -> &Arc<Mutex<Vmm>> {
        &self.vmm
    }
}

impl Transport for LocalTransport {
    fn call(
        &mut self,
        token: u64,
        request_id: u32,
        request: Request,
    ) -> Result<Reply, TransportError> {
        let frame = RequestFrame {
            request_id,
            token,
            request,
        }
        .encode();
        let out = serve_frame(&self.vmm, &frame[4..]);
        check_reply(&out[4..], request_id)
    }
}

/// One connection to a [`super::server::VmmServer`].
#[derive(Debug)]
pub struct UnixTransport {
    stream: UnixStream,
}

impl UnixTransport {
    pub fn connect(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self {
            stream: UnixStream::connect(path)?,
        })
    }
}

impl Transport for UnixTransport {
    fn call(
        &mut self,
        token: u64,
        request_id: u32,
        request: Request,
    ) -> Result<Reply, TransportError> {
        let frame = RequestFrame {
            request_id,
            token,
            request,
        }
        .encode();
        write_frame(&mut self.stream, &frame)?;
        let body = read_frame(&mut self.stream)?.ok_or(TransportError::Closed)?;
        check_reply(&body, request_id)
    }
}
