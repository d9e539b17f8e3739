//! Attribution of virtual time to overhead components.
//!
//! Activity is logged as half-open intervals. A sweep assigns every
//! nanosecond of `[0, total)` to the highest-priority active component, or to
//! idle, so the components partition the run exactly.

use serde::Serialize;

/// Listed in decreasing priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Software,
    Transfer,
    Kernel,
    Reconfiguration,
}

const COMPONENTS: usize = 4;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VmStats {
    pub vm: u32,
    pub prr: u32,
    pub forwarded_calls: u64,
    pub pass_through_calls: u64,
    pub bytes_written: u64,
    pub bytes_read: u64,
    pub kernel_runs: u64,
    pub reconfigurations: u64,
    /// Raw per-VM activity, before cross-VM overlap is resolved.
    pub software_ns: u64,
    pub transfer_ns: u64,
    pub kernel_ns: u64,
    pub reconfiguration_ns: u64,
}

impl VmStats {
    pub const COUNTERS: usize = 10;

    pub fn new(vm: u32, prr: u32) -> Self {
        Self {
            vm,
            prr,
            ..Self::default()
        }
    }

    pub fn counters(&self) -> [u64; Self::COUNTERS] {
        [
            self.forwarded_calls,
            self.pass_through_calls,
            self.bytes_written,
            self.bytes_read,
            self.kernel_runs,
            self.reconfigurations,
            self.software_ns,
            self.transfer_ns,
            self.kernel_ns,
            self.reconfiguration_ns,
        ]
    }

    pub fn from_counters(vm: u32, prr: u32, c: [u64; Self::COUNTERS]) -> Self {
        Self {
            vm,
            prr,
            forwarded_calls: c[0],
            pass_through_calls: c[1],
            bytes_written: c[2],
            bytes_read: c[3],
            kernel_runs: c[4],
            reconfigurations: c[5],
            software_ns: c[6],
            transfer_ns: c[7],
            kernel_ns: c[8],
            reconfiguration_ns: c[9],
        }
    }

    pub fn add(&mut self, component: Component, ns: u64) {
        match component {
            Component::Software => self.software_ns += ns,
            Component::Transfer => self.transfer_ns += ns,
            Component::Kernel => self.kernel_ns += ns,
            Component::Reconfiguration => self.reconfiguration_ns += ns,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Breakdown {
    pub total_ns: u64,
    pub software_ns: u64,
    pub transfer_ns: u64,
    pub kernel_ns: u64,
    pub reconfiguration_ns: u64,
    pub idle_ns: u64,
    pub vms: Vec<VmStats>,
}

impl Breakdown {
    pub fn component_sum(&self) -> u64 {
        self.software_ns + self.transfer_ns + self.kernel_ns + self.reconfiguration_ns + self.idle_ns
    }

    pub fn share(&self, ns: u64) -> f64 {
        if self.total_ns == 0 {
            0.0
        } else {
            ns as f64 / self.total_ns as f64
        }
    }

    pub fn software_share(&self) -> f64 {
        self.share(self.software_ns)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Accounting {
    intervals: Vec<(Component, u64, u64)>,
}

impl Accounting {
    pub fn record(&mut self, component: Component, start: u64, end: u64) {
        if end > start {
            self.intervals.push((component, start, end));
        }
    }

    pub fn intervals(&self) -> &[(Component, u64, u64)] {
        &self.intervals
    }

    /// Component totals over `[0, total)`. Intervals are clipped to `total`.
    pub fn totals(&self, total: u64) -> [u64; COMPONENTS + 1] {
        let mut edges: Vec<(u64, bool, Component)> = Vec::with_capacity(self.intervals.len() * 2);
        for &(c, s, e) in &self.intervals {
            let e = e.min(total);
            if s < e {
                edges.push((s, true, c));
                edges.push((e, false, c));
            }
        }
        edges.sort_unstable_by_key(|&(t, open, c)| (t, open, c));
        let mut active = [0u32; COMPONENTS];
        let mut out = [0u64; COMPONENTS + 1];
        let mut cursor = 0u64;
        let mut i = 0;
        loop {
            while let Some(&(t, open, c)) = edges.get(i) {
                if t > cursor {
                    break;
                }
                if open {
                    active[c as usize] += 1;
                } else {
                    active[c as usize] -= 1;
                }
                i += 1;
            }
            if cursor >= total {
                break;
            }
            let next = edges.get(i).map_or(total, |e| e.0.min(total));
            let slot = active.iter().position(|&n| n > 0).unwrap_or(COMPONENTS);
            out[slot] += next - cursor;
            cursor = next;
        }
        out
    }
}
