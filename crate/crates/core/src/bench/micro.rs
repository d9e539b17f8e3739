//! Microbenchmarks against the bare device model: host link bandwidth,
//! kernel-side DDR streaming rate and effective region clock.

use serde::Serialize;

use crate::bitstream::{encode_bitfile, BitfileTarget, KernelDescriptor, KernelKind};
use crate::device::{
    Device, DeviceConfig, DeviceConfigError, DeviceEvent, DmaDirection, RegisterWrite, REG_ARG0,
    REG_CONTROL,
};

/// 4 KiB to 256 MiB in factors of four.
pub const PCIE_SWEEP: [u64; 10] = [
    4 << 10,
    16 << 10,
    64 << 10,
    256 << 10,
    1 << 20,
    4 << 20,
    16 << 20,
    64 << 20,
    128 << 20,
    256 << 20,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PciePoint {
    pub bytes: u64,
    pub seconds: f64,
    /// Bytes per second.
    pub rate: f64,
}

/// Effective host-to-device rate for each transfer size, one transfer on an
/// idle engine per point.
pub fn pcie(config: &DeviceConfig, sizes: &[u64]) -> Result<Vec<PciePoint>, DeviceConfigError> {
    let mut out = Vec::with_capacity(sizes.len());
    for &bytes in sizes {
        let mut device = Device::new(config.clone())?;
        let mut data = vec![0u8; bytes as usize];
        let c = device
            .dma_transfer(DmaDirection::HostToDevice, &mut data, 0)
            .expect("sweep sizes fit in device memory");
        let seconds = (c.done_at - c.started).as_secs_f64();
        out.push(PciePoint {
            bytes,
            seconds,
            rate: bytes as f64 / seconds,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelRun {
    pub cycles: u64,
    pub seconds: f64,
    pub bytes_moved: u64,
}

/// Loads `kind` into `prr`, runs it once with `args` and times it on the
/// device clock.
fn run_kernel(
    config: &DeviceConfig,
    prr: usize,
    kind: KernelKind,
    args: &[u64],
) -> Result<KernelRun, DeviceConfigError> {
    let mut device = Device::new(config.clone())?;
    let bitfile = encode_bitfile(
        &KernelDescriptor::new(kind),
        BitfileTarget::new(config.device_id, config.shell_id, prr as u8),
    )
    .expect("default descriptor encodes");
    device.pr_reconfigure(&bitfile).expect("compatible bitfile");
    device.run_until_idle();
    for (i, a) in args.iter().enumerate() {
        device
            .write_kernel_register(prr, REG_ARG0 + i, *a)
            .expect("argument register");
    }
    let started = device.now();
    let RegisterWrite::Launched { done_at } = device
        .write_kernel_register(prr, REG_CONTROL, 1)
        .expect("control register")
    else {
        unreachable!("kernel was just loaded");
    };
    device.run_until_idle();
    let cycles = device
        .take_events()
        .into_iter()
        .find_map(|e| match e {
            DeviceEvent::KernelStarted { cycles, .. } => Some(cycles),
            _ => None,
        })
        .expect("kernel started");
    Ok(KernelRun {
        cycles,
        seconds: (done_at - started).as_secs_f64(),
        bytes_moved: args[3].saturating_mul(12),
    })
}

/// Kernel-side DDR streaming rate (bytes per second) of a vector add over
/// `items` elements in region 0.
pub fn membw(config: &DeviceConfig, items: u64) -> Result<f64, DeviceConfigError> {
    let n = items.max(1);
    let base = 4 * n;
    let r = run_kernel(config, 0, KernelKind::VecAdd, &[0, base, 2 * base, n])?;
    Ok(r.bytes_moved as f64 / r.seconds)
}

/// Effective clock of each region in Hz, measured as cycles over time.
pub fn freq(config: &DeviceConfig) -> Result<Vec<f64>, DeviceConfigError> {
    const CYCLES: u64 = 1 << 20;
    (0..config.prr_count)
        .map(|prr| {
            let r = run_kernel(config, prr, KernelKind::VecAdd, &[0, 0, 0, CYCLES])?;
            Ok(r.cycles as f64 / r.seconds)
        })
        .collect()
}
