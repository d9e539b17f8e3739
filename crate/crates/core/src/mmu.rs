//! Software MMU: a pool of fixed-size DDR segments handed out first-fit as
//! contiguous runs, each run owned by one VM.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SEGMENT_SIZE: u64 = 1 << 20;

pub type VmId = u32;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MmuError {
    #[error("allocation size must be non-zero")]
    InvalidSize,
    #[error("no contiguous run of {segments} free segments")]
    OutOfDeviceMemory { segments: u64 },
    #[error("unknown or already freed handle")]
    InvalidHandle,
    #[error("address {0:#x} outside device memory")]
    InvalidAddress(u64),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PoolConfigError {
    #[error("segment size must be non-zero")]
    ZeroSegment,
    #[error("ddr size {ddr_size} is not a non-zero multiple of the segment size {segment_size}")]
    Indivisible { ddr_size: u64, segment_size: u64 },
}

/// Which free-space structure backs the pool. Both give identical placements.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocatorKind {
    /// One mark per segment, scanned linearly.
    #[default]
    Array,
    /// Ordered map of free runs.
    FreeList,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MemHandle {
    pub id: u64,
    pub base_addr: u64,
    /// Requested size; the span may be larger.
    pub size: u64,
    /// `(first segment, segment count)`.
    pub segment_span: (u64, u64),
    pub owner: VmId,
}

impl MemHandle {
    pub fn end(&self) -> u64 {
        self.base_addr + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base_addr && addr < self.end()
    }
}

/// Free-space bookkeeping. `first_fit` must return the lowest start index of
/// a free run of `count` segments lying entirely inside `window`.
trait Backend: std::fmt::Debug + Send {
    fn first_fit(&self, count: u64, window: (u64, u64)) -> Option<u64>;
    fn mark_used(&mut self, first: u64, count: u64);
    fn mark_free(&mut self, first: u64, count: u64);
}

#[derive(Debug, Clone)]
struct ArrayBackend {
    marks: Vec<u8>,
}

impl Backend for ArrayBackend {
    fn first_fit(&self, count: u64, (lo, hi): (u64, u64)) -> Option<u64> {
        let mut run = 0u64;
        for i in lo..hi {
            if self.marks[i as usize] == 0 {
                run += 1;
                if run == count {
                    return Some(i + 1 - count);
                }
            } else {
                run = 0;
            }
        }
        None
    }

    fn mark_used(&mut self, first: u64, count: u64) {
        for m in &mut self.marks[first as usize..(first + count) as usize] {
            *m = 1;
        }
    }

    fn mark_free(&mut self, first: u64, count: u64) {
        for m in &mut self.marks[first as usize..(first + count) as usize] {
            *m = 0;
        }
    }
}

/// Maximal free runs keyed by start index; adjacent runs are always merged.
#[derive(Debug, Clone)]
struct FreeListBackend {
    runs: BTreeMap<u64, u64>,
}

impl Backend for FreeListBackend {
    fn first_fit(&self, count: u64, (lo, hi): (u64, u64)) -> Option<u64> {
        let from = self.runs.range(..=lo).next_back().map_or(lo, |(&s, _)| s);
        for (&start, &len) in self.runs.range(from..hi) {
            let s = start.max(lo);
            let e = (start + len).min(hi);
            if e > s && e - s >= count {
                return Some(s);
            }
        }
        None
    }

    fn mark_used(&mut self, first: u64, count: u64) {
        let (&start, &len) = self
            .runs
            .range(..=first)
            .next_back()
            .expect("marking a free range");
        debug_assert!(first + count <= start + len);
        self.runs.remove(&start);
        if first > start {
            self.runs.insert(start, first - start);
        }
        let tail = start + len - (first + count);
        if tail > 0 {
            self.runs.insert(first + count, tail);
        }
    }

    fn mark_free(&mut self, first: u64, count: u64) {
        let mut start = first;
        let mut len = count;
        if let Some((&ps, &pl)) = self.runs.range(..first).next_back() {
            if ps + pl == first {
                self.runs.remove(&ps);
                start = ps;
                len += pl;
            }
        }
        if let Some(nl) = self.runs.remove(&(first + count)) {
            len += nl;
        }
        self.runs.insert(start, len);
    }
}

#[derive(Debug)]
pub struct SegmentPool {
    segment_size: u64,
    owners: Vec<Option<VmId>>,
    backend: Box<dyn Backend>,
    live: BTreeMap<u64, MemHandle>,
    next_id: u64,
}

impl SegmentPool {
    pub fn new(
        ddr_size: u64,
        segment_size: u64,
        kind: AllocatorKind,
    ) -> Result<Self, PoolConfigError> {
        if segment_size == 0 {
            return Err(PoolConfigError::ZeroSegment);
        }
        if ddr_size == 0 || ddr_size % segment_size != 0 {
            return Err(PoolConfigError::Indivisible {
                ddr_size,
                segment_size,
            });
        }
        let n = ddr_size / segment_size;
        let backend: Box<dyn Backend> = match kind {
            AllocatorKind::Array => Box::new(ArrayBackend {
                marks: vec![0; n as usize],
            }),
            AllocatorKind::FreeList => Box::new(FreeListBackend {
                runs: BTreeMap::from([(0, n)]),
            }),
        };
        Ok(Self {
            segment_size,
            owners: vec![None; n as usize],
            backend,
            live: BTreeMap::new(),
            next_id: 1,
        })
    }

    pub fn segment_size(&self) -> u64 {
        self.segment_size
    }

    pub fn segment_count(&self) -> u64 {
        self.owners.len() as u64
    }

    pub fn ddr_size(&self) -> u64 {
        self.segment_count() * self.segment_size
    }

    pub fn allocate(&mut self, vm: VmId, size: u64) -> Result<MemHandle, MmuError> {
        self.allocate_within(vm, size, (0, self.segment_count()))
    }

    /// First-fit restricted to segments `window.0..window.1`.
    pub fn allocate_within(
        &mut self,
        vm: VmId,
        size: u64,
        window: (u64, u64),
    ) -> Result<MemHandle, MmuError> {
        if size == 0 {
            return Err(MmuError::InvalidSize);
        }
        let count = size.div_ceil(self.segment_size);
        let window = (window.0, window.1.min(self.segment_count()));
        let first = self
            .backend
            .first_fit(count, window)
            .ok_or(MmuError::OutOfDeviceMemory { segments: count })?;
        self.backend.mark_used(first, count);
        for o in &mut self.owners[first as usize..(first + count) as usize] {
            *o = Some(vm);
        }
        let handle = MemHandle {
            id: self.next_id,
            base_addr: first * self.segment_size,
            size,
            segment_span: (first, count),
            owner: vm,
        };
        self.next_id += 1;
        self.live.insert(handle.id, handle.clone());
        Ok(handle)
    }

    pub fn free(&mut self, handle: &MemHandle) -> Result<(), MmuError> {
        match self.live.get(&handle.id) {
            Some(h) if h == handle => {}
            _ => return Err(MmuError::InvalidHandle),
        }
        self.live.remove(&handle.id);
        let (first, count) = handle.segment_span;
        self.backend.mark_free(first, count);
        for o in &mut self.owners[first as usize..(first + count) as usize] {
            *o = None;
        }
        Ok(())
    }

    pub fn owner_of(&self, addr: u64) -> Result<Option<VmId>, MmuError> {
        self.owners
            .get((addr / self.segment_size) as usize)
            .copied()
            .ok_or(MmuError::InvalidAddress(addr))
    }

    /// The live handle whose requested range contains `addr`.
    pub fn handle_at(&self, addr: u64) -> Option<&MemHandle> {
        let owner = self.owner_of(addr).ok()??;
        self.live
            .values()
            .find(|h| h.owner == owner && h.contains(addr))
    }

    pub fn handle(&self, id: u64) -> Option<&MemHandle> {
        self.live.get(&id)
    }

    pub fn handle_by_base(&self, base: u64) -> Option<&MemHandle> {
        self.live.values().find(|h| h.base_addr == base)
    }

    pub fn live_handles(&self) -> impl Iterator<Item = &MemHandle> {
        self.live.values()
    }

    pub fn used_segments(&self) -> u64 {
        self.owners.iter().filter(|o| o.is_some()).count() as u64
    }

    /// Per-segment owner table, `None` for free segments.
    pub fn owners(&self) -> &[Option<VmId>] {
        &self.owners
    }

    /// One character per segment: `.` free, otherwise the owner modulo 36.
    pub fn dump(&self) -> String {
        self.owners
            .iter()
            .map(|o| match o {
                None => '.',
                Some(vm) => char::from_digit(vm % 36, 36).unwrap(),
            })
            .collect()
    }
}
