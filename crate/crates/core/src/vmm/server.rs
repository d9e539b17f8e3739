//! Serves a broker on a local stream socket, one thread per connection.
//! Requests from all connections are serialized by the broker lock.

use std::io;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use super::transport::serve_frame;
use super::wire::{read_frame, write_frame};
use super::Vmm;

#[derive(Debug)]
pub struct VmmServer {
    path: PathBuf,
    vmm: Arc<Mutex<Vmm>>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl VmmServer {
    pub fn bind(vmm: Arc<Mutex<Vmm>>, path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let listener = UnixListener::bind(&path)?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let vmm = Arc::clone(&vmm);
            let stop = Arc::clone(&stop);
            thread::Builder::new()
                .name("vmm-accept".into())
                .spawn(move || {
                    for conn in listener.incoming() {
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        let Ok(conn) = conn else { continue };
                        let vmm = Arc::clone(&vmm);
                        let _ = thread::Builder::new()
                            .name("vmm-conn".into())
                            .spawn(move || serve_connection(conn, &vmm));
                    }
                })?
        };
        Ok(Self {
            path,
            vmm,
            stop,
            accept: Some(accept),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn vmm(&self) -> &Arc<Mutex<Vmm>> {
        &self.vmm
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting connections. Open connections finish on their own.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        if let Some(h) = self.accept.take() {
            self.stop.store(true, Ordering::SeqCst);
            // Wake the blocking accept.
            let _ = UnixStream::connect(&self.path);
            let _ = h.join();
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

impl Drop for VmmServer {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

fn serve_connection(mut conn: UnixStream, vmm: &Mutex<Vmm>) {
    while let Ok(Some(body)) = read_frame(&mut conn) {
        let reply = serve_frame(vmm, &body);
        if write_frame(&mut conn, &reply).is_err() {
            break;
        }
    }
}
