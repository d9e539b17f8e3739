use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::clock::SimDuration;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("cost parameter `{name}` must be finite and strictly positive, got {value}")]
pub struct CostModelError {
    pub name: &'static str,
    pub value: f64,
}

/// Timing parameters of the simulated platform. Rates are bytes per second,
/// latencies and times are seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub clock_hz: f64,
    pub dma_bandwidth: f64,
    pub dma_latency: f64,
    pub pr_bandwidth: f64,
    pub full_reconfig_time: f64,
    pub sw_call_overhead: f64,
    pub staging_copy_bandwidth: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            clock_hz: 200e6,
            dma_bandwidth: 6.0e9,
            dma_latency: 10e-6,
            // 4 MiB partial image in 0.1 s
            pr_bandwidth: 41_943_040.0,
            full_reconfig_time: 2.5,
            sw_call_overhead: 50e-6,
            staging_copy_bandwidth: 3.0e9,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), CostModelError> {
        let fields = [
            ("clock_hz", self.clock_hz),
            ("dma_bandwidth", self.dma_bandwidth),
            ("dma_latency", self.dma_latency),
            ("pr_bandwidth", self.pr_bandwidth),
            ("full_reconfig_time", self.full_reconfig_time),
            ("sw_call_overhead", self.sw_call_overhead),
            ("staging_copy_bandwidth", self.staging_copy_bandwidth),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(CostModelError { name, value });
            }
        }
        Ok(())
    }

    pub fn dma_time(&self, len: u64) -> SimDuration {
        SimDuration::from_secs_f64_ceil(self.dma_latency + len as f64 / self.dma_bandwidth)
    }

    pub fn pr_time(&self, bitfile_len: u64) -> SimDuration {
        SimDuration::from_secs_f64_ceil(bitfile_len as f64 / self.pr_bandwidth)
    }

    pub fn full_reconfig(&self) -> SimDuration {
        SimDuration::from_secs_f64_ceil(self.full_reconfig_time)
    }

    pub fn staging_copy_time(&self, len: u64) -> SimDuration {
        SimDuration::from_secs_f64_ceil(len as f64 / self.staging_copy_bandwidth)
    }

    pub fn sw_overhead(&self) -> SimDuration {
        SimDuration::from_secs_f64_ceil(self.sw_call_overhead)
    }

    pub fn cycles_time(&self, cycles: u64, clock_hz: f64) -> SimDuration {
        SimDuration::from_secs_f64_ceil(cycles as f64 / clock_hz)
    }
}
