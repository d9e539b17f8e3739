//! Board DDR, stored sparsely so multi-gigabyte address spaces cost nothing
//! until touched.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

const PAGE_SHIFT: u32 = 16;
const PAGE_SIZE: usize = 1 << PAGE_SHIFT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("access [{addr:#x}, +{len}) outside device memory of {size} bytes")]
pub struct OutOfRange {
    pub addr: u64,
    pub len: u64,
    pub size: u64,
}

#[derive(Clone)]
pub struct DeviceMemory {
    size: u64,
    pages: BTreeMap<u64, Box<[u8]>>,
}

impl std::fmt::Debug for DeviceMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceMemory")
            .field("size", &self.size)
            .field("resident_pages", &self.pages.len())
            .finish()
    }
}

impl PartialEq for DeviceMemory {
    fn eq(&self, other: &Self) -> bool {
        self.size == other.size && self.digest() == other.digest()
    }
}

impl DeviceMemory {
    pub fn new(size: u64) -> Self {
        Self {
            size,
            pages: BTreeMap::new(),
        }
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn check(&self, addr: u64, len: u64) -> Result<(), OutOfRange> {
        match addr.checked_add(len) {
            Some(end) if end <= self.size => Ok(()),
            _ => Err(OutOfRange {
                addr,
                len,
                size: self.size,
            }),
        }
    }

    pub fn read(&self, addr: u64, len: usize) -> Result<Vec<u8>, OutOfRange> {
        self.check(addr, len as u64)?;
        let mut out = vec![0u8; len];
        let mut done = 0usize;
        while done < len {
            let a = addr + done as u64;
            let page = a >> PAGE_SHIFT;
            let off = (a as usize) & (PAGE_SIZE - 1);
            let n = (PAGE_SIZE - off).min(len - done);
            if let Some(p) = self.pages.get(&page) {
                out[done..done + n].copy_from_slice(&p[off..off + n]);
            }
            done += n;
        }
        Ok(out)
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), OutOfRange> {
        self.check(addr, data.len() as u64)?;
        let mut done = 0usize;
        while done < data.len() {
            let a = addr + done as u64;
            let page = a >> PAGE_SHIFT;
            let off = (a as usize) & (PAGE_SIZE - 1);
            let n = (PAGE_SIZE - off).min(data.len() - done);
            let chunk = &data[done..done + n];
            match self.pages.get_mut(&page) {
                Some(p) => p[off..off + n].copy_from_slice(chunk),
                None if chunk.iter().all(|&b| b == 0) => {}
                None => {
                    let mut p = vec![0u8; PAGE_SIZE].into_boxed_slice();
                    p[off..off + n].copy_from_slice(chunk);
                    self.pages.insert(page, p);
                }
            }
            done += n;
        }
        Ok(())
    }

    /// SHA-256 over the contents. All-zero pages are skipped so the digest only
    /// depends on the bytes, not on which pages happen to be resident.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.size.to_le_bytes());
        for (idx, page) in &self.pages {
            if page.iter().all(|&b| b == 0) {
                continue;
            }
            h.update(idx.to_le_bytes());
            h.update(page);
        }
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }
}
