//! Stock workloads: the vector-add application, random multi-tenant
//! scenarios and the multiplexing comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bitstream::KernelKind;
use crate::device::DeviceConfig;
use crate::vmm::VmmConfig;

use super::config::{ScenarioConfig, VmSpec};
use super::runner::{execute, LocalConnector, RunError};

/// Program, fill two `n`-element i32 vectors, add them on the device and
/// read the sum back.
pub fn vec_add_script(n: u64, image: usize) -> Vec<String> {
    let bytes = 4 * n;
    vec![
        format!("reprogram vec_add image={image}"),
        format!("alloc a {bytes}"),
        format!("alloc b {bytes}"),
        format!("alloc c {bytes}"),
        format!("write a 0 iota {n}"),
        format!("write b 0 random {bytes}"),
        format!("args @a @b @c {n}"),
        "launch".into(),
        "wait".into(),
        format!("read c 0 {bytes}"),
    ]
}

pub fn single_vm(device: DeviceConfig, script: Vec<String>) -> ScenarioConfig {
    ScenarioConfig {
        device,
        vms: vec![VmSpec { id: 0, script }],
        ..ScenarioConfig::default()
    }
}

fn random_script(rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut s = Vec::new();
    let kind = [KernelKind::VecAdd, KernelKind::Sobel, KernelKind::Matmul][rng.gen_range(0..3)];
    s.push(format!(
        "reprogram {} image={}",
        kind.name(),
        rng.gen_range(1..=64) << 10
    ));
    for _ in 0..rng.gen_range(1..=2) {
        let args = match kind {
            KernelKind::VecAdd => {
                let n = rng.gen_range(1..=4096u64);
                s.push(format!("alloc a {}", 4 * n));
                s.push(format!("alloc b {}", 4 * n));
                s.push(format!("alloc c {}", 4 * n));
                s.push(format!("write a 0 random {}", 4 * n));
                s.push(format!("write b 0 iota {n}"));
                format!("args @a @b @c {n}")
            }
            KernelKind::Sobel => {
                let (w, h) = (rng.gen_range(1..=64u64), rng.gen_range(1..=64u64));
                s.push(format!("alloc a {}", w * h));
                s.push(format!("alloc c {}", w * h));
                s.push(format!("write a 0 random {}", w * h));
                format!("args @a @c {w} {h}")
            }
            _ => {
                let (n, m, k) = (
                    rng.gen_range(1..=16u64),
                    rng.gen_range(1..=16u64),
                    rng.gen_range(1..=16u64),
                );
                s.push(format!("alloc a {}", 4 * n * m));
                s.push(format!("alloc b {}", 4 * m * k));
                s.push(format!("alloc c {}", 4 * n * k));
                s.push(format!("write a 0 random {}", 4 * n * m));
                s.push(format!("write b 0 random {}", 4 * m * k));
                format!("args @a @b @c {n} {m} {k}")
            }
        };
        s.push(args);
        s.push("launch".into());
        if rng.gen_bool(0.3) {
            s.push(format!("sleep {}", rng.gen_range(1..=50_000)));
        }
        s.push("wait".into());
        s.push("read c 0 4".into());
        for b in ["a", "b", "c"] {
            if rng.gen_bool(0.5) {
                s.push(format!("free {b}"));
            }
        }
    }
    s
}

/// Two to four tenants with random kernels, sizes and timings on a small
/// device.
pub fn random_scenario(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vms = rng.gen_range(2..=4);
    ScenarioConfig {
        description: format!("random scenario {seed}"),
        seed,
        device: DeviceConfig {
            ddr_size: 256 << 20,
            ..DeviceConfig::default()
        },
        vmm: VmmConfig::default(),
        vms: (0..vms)
            .map(|id| VmSpec {
                id,
                script: random_script(&mut rng),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MultiplexResult {
    pub vms: usize,
    /// One tenant alone with whole-device reconfiguration.
    pub single_ns: u64,
    /// `vms` tenants one after another, each paying a full reconfiguration.
    pub serialized_ns: u64,
    /// All tenants at once, one region each, partial reconfiguration.
    pub shared_ns: u64,
}

impl MultiplexResult {
    pub fn win(&self) -> bool {
        self.shared_ns < self.serialized_ns
    }
}

/// Compares `vms` copies of `script` sharing one device against running
/// them back to back on a board without partial reconfiguration.
pub fn multiplexing_win(
    device: &DeviceConfig,
    script: &[String],
    vms: usize,
) -> Result<MultiplexResult, RunError> {
    let solo = single_vm(
        DeviceConfig {
            full_device_reconfig: true,
            ..device.clone()
        },
        script.to_vec(),
    );
    let single_ns = execute(&solo, &mut LocalConnector::new(&solo)?)?
        .breakdown
        .total_ns;
    let shared = ScenarioConfig {
        device: DeviceConfig {
            full_device_reconfig: false,
            prr_count: device.prr_count.max(vms),
            ..device.clone()
        },
        vms: (0..vms as u32)
            .map(|id| VmSpec {
                id,
                script: script.to_vec(),
            })
            .collect(),
        ..ScenarioConfig::default()
    };
    let shared_ns = execute(&shared, &mut LocalConnector::new(&shared)?)?
        .breakdown
        .total_ns;
    Ok(MultiplexResult {
        vms,
        single_ns,
        serialized_ns: single_ns.saturating_mul(vms as u64),
        shared_ns,
    })
}
