//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vfpga_core::bench::{self, micro, ScenarioConfig, UnixConnector};
use vfpga_core::bitstream::{
    cb_compatibility_check, decode_bitfile, encode_bitfile, encode_bitfile_with_image,
    BitfileTarget, Compatibility, KernelDescriptor, KernelKind, ParamSlot, HEADER_LEN,
};
use vfpga_core::device::{DeviceConfig, IrqBank};
use vfpga_core::guest::{GuestBuffer, GuestError, Runtime, MGMT_BASE};
use vfpga_core::kernels::{execute_matmul, execute_sobel, execute_vec_add, FlatMemory};
use vfpga_core::mmu::{AllocatorKind, MmuError, SegmentPool};
use vfpga_core::vmm::server::VmmServer;
use vfpga_core::vmm::transport::LocalTransport;
use vfpga_core::vmm::wire::Notification;
use vfpga_core::vmm::{replay, Vmm, VmmConfig, VmmError};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    check(t < limit, || format!("took {t:?}, limit {limit:?}"))
}

// 1 ------------------------------------------------------------------------

/// Brute-force first fit over a segment ownership vector.
struct RefPool {
    owner: Vec<Option<(u32, u64)>>,
}

impl RefPool {
    fn first_fit(&self, count: usize) -> Option<usize> {
        (0..=self.owner.len().checked_sub(count)?)
            .find(|&s| self.owner[s..s + count].iter().all(Option::is_none))
    }

    fn take(&mut self, start: usize, count: usize, vm: u32, id: u64) {
        for o in &mut self.owner[start..start + count] {
            *o = Some((vm, id));
        }
    }

    fn free(&mut self, id: u64) -> bool {
        let mut hit = false;
        for o in &mut self.owner {
            if matches!(o, Some((_, h)) if *h == id) {
                *o = None;
                hit = true;
            }
        }
        hit
    }
}

fn allocator_oracle() -> Outcome {
    const SEG: u64 = 4096;
    const OPS: usize = 10_000;
    let start = Instant::now();
    for kind in [AllocatorKind::Array, AllocatorKind::FreeList] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pool = SegmentPool::new(64 * SEG, SEG, kind).map_err(|e| e.to_string())?;
        let mut reference = RefPool {
            owner: vec![None; 64],
        };
        let mut live = Vec::new();
        let mut freed = Vec::new();
        for step in 0..OPS {
            let roll = rng.gen_range(0..100);
            if roll < 55 || live.is_empty() {
                let vm = rng.gen_range(0..4);
                let size = rng.gen_range(1..=12 * SEG);
                let count = size.div_ceil(SEG) as usize;
                let got = pool.allocate(vm, size);
                let want = reference.first_fit(count);
                match (&got, want) {
                    (Ok(h), Some(s)) => {
                        check(h.base_addr == s as u64 * SEG && h.owner == vm, || {
                            format!("step {step}: placed at {:#x}, reference {s}", h.base_addr)
                        })?;
                        reference.take(s, count, vm, h.id);
                        live.push(h.clone());
                    }
                    (Err(MmuError::OutOfDeviceMemory { .. }), None) => {}
                    _ => return Err(format!("step {step}: pool {got:?}, reference {want:?}")),
                }
            } else if roll < 95 {
                let h = live.swap_remove(rng.gen_range(0..live.len()));
                check(pool.free(&h).is_ok() && reference.free(h.id), || {
                    format!("step {step}: free of {} disagreed", h.id)
                })?;
                freed.push(h);
            } else if let Some(h) = freed.choose(&mut rng) {
                check(pool.free(h) == Err(MmuError::InvalidHandle), || {
                    format!("step {step}: double free accepted")
                })?;
            }
            let expected: Vec<Option<u32>> =
                reference.owner.iter().map(|o| o.map(|(vm, _)| vm)).collect();
            check(pool.owners() == expected.as_slice(), || {
                format!("step {step}: owner map diverged")
            })?;
        }
    }
    within(Duration::from_secs(5), start)?;
    Ok(format!("{OPS} ops x 2 backends in {:?}", start.elapsed()))
}

// 2 ------------------------------------------------------------------------

fn denied<T>(r: Result<T, GuestError>) -> bool {
    matches!(r, Err(GuestError::Vmm(VmmError::PermissionDenied)))
}

fn bitfile(kind: KernelKind, prr: u32, image: usize) -> Vec<u8> {
    let d = DeviceConfig::default();
    encode_bitfile_with_image(
        &KernelDescriptor::new(kind),
        BitfileTarget::new(d.device_id, d.shell_id, prr as u8),
        image,
    )
    .unwrap()
}

struct Tenant {
    rt: Runtime<LocalTransport>,
    data: Vec<(GuestBuffer, Vec<u8>)>,
}

fn isolation_suite() -> Outcome {
    const SCENARIOS: u64 = 100;
    let mut attempts = 0u64;
    let mut refused = 0u64;
    let mut checked_bytes = 0u64;
    for seed in 0..SCENARIOS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let device = DeviceConfig {
            ddr_size: 64 << 20,
            range_guard: rng.gen(),
            ..DeviceConfig::default()
        };
        let t = LocalTransport::new(Vmm::new(device, VmmConfig::default()).unwrap());
        let n = rng.gen_range(2..=4);
        let mut tenants = Vec::new();
        for vm in 0..n {
            let mut rt = Runtime::attach(t.clone(), vm).map_err(|e| e.to_string())?;
            let prr = rt.prr();
            rt.program(&bitfile(KernelKind::VecAdd, prr, 4096))
                .map_err(|e| e.to_string())?;
            let mut data = Vec::new();
            for _ in 0..rng.gen_range(1..=3) {
                let len = rng.gen_range(1..=8192);
                let b = rt.create_buffer(len).map_err(|e| e.to_string())?;
                let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                rt.write_buffer(&b, 0, &bytes).map_err(|e| e.to_string())?;
                data.push((b, bytes));
            }
            tenants.push(Tenant { rt, data });
        }

        // Every tenant also computes on its own buffers.
        for (vm, tn) in tenants.iter_mut().enumerate() {
            let n_items = rng.gen_range(1..=256u64);
            let a = tn.rt.create_buffer(4 * n_items).map_err(|e| e.to_string())?;
            let c = tn.rt.create_buffer(4 * n_items).map_err(|e| e.to_string())?;
            let vals: Vec<u8> = (0..4 * n_items).map(|_| rng.gen()).collect();
            tn.rt.write_buffer(&a, 0, &vals).map_err(|e| e.to_string())?;
            tn.rt
                .set_kernel_args(&[a.base(), a.base(), c.base(), n_items])
                .map_err(|e| e.to_string())?;
            tn.rt.launch().map_err(|e| format!("vm {vm}: {e}"))?;
        }
        for tn in &mut tenants {
            tn.rt.wait().map_err(|e| e.to_string())?;
        }

        for _ in 0..rng.gen_range(3..=8) {
            let a = rng.gen_range(0..n as usize);
            let mut v = rng.gen_range(0..n as usize);
            if v == a {
                v = (v + 1) % n as usize;
            }
            let (victim_prr, target) = {
                let vt = &tenants[v];
                let (b, _) = vt.data.choose(&mut rng).unwrap();
                (vt.rt.prr(), b.base() + rng.gen_range(0..b.size()))
            };
            let at = &mut tenants[a].rt;
            let results = match rng.gen_range(0..4) {
                0 => {
                    let d = at.device();
                    let mem = d.mmd_open("memory").map_err(|e| e.to_string())?;
                    vec![denied(d.mmd_read(&mem, target, 8))]
                }
                1 => {
                    let d = at.device();
                    let mem = d.mmd_open("memory").map_err(|e| e.to_string())?;
                    vec![denied(d.mmd_write(&mem, target, &[0xAA; 8]))]
                }
                2 => {
                    let base = tenants[v].data[0].0.base();
                    let d = tenants[a].rt.device();
                    let mem = d.mmd_open("memory").map_err(|e| e.to_string())?;
                    vec![denied(d.mmd_write(&mem, MGMT_BASE, &base.to_le_bytes()))]
                }
                _ => {
                    let r = at.submit_program(&bitfile(KernelKind::Sobel, victim_prr, 4096));
                    let ok = denied(r);
                    at.wait().map_err(|e| e.to_string())?;
                    vec![ok]
                }
            };
            attempts += results.len() as u64;
            refused += results.iter().filter(|r| **r).count() as u64;
        }

        for (vm, tn) in tenants.iter_mut().enumerate() {
            for (b, bytes) in &mut tn.data {
                let got = tn.rt.read_buffer(b, 0, bytes.len() as u64).map_err(|e| e.to_string())?;
                check(got == *bytes, || format!("scenario {seed}: vm {vm} data changed"))?;
                checked_bytes += bytes.len() as u64;
            }
        }
    }
    check(attempts == refused, || {
        format!("{refused}/{attempts} cross-VM attempts refused")
    })?;
    Ok(format!(
        "{SCENARIOS} scenarios, {refused}/{attempts} attempts denied, {checked_bytes} bytes intact"
    ))
}

// 3 ------------------------------------------------------------------------

fn hw_corrupt() -> Outcome {
    const TRIALS: usize = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..TRIALS {
        let device = DeviceConfig {
            ddr_size: rng.gen_range(1..=8u64) * (16 << 20),
            ..DeviceConfig::default()
        };
        for guard in [false, true] {
            let v = bench::attack(&device, bench::Attack::HwCorrupt, guard)
                .map_err(|e| e.to_string())?;
            check(v.passed, || format!("trial {trial}, guard {guard}: {}", v.observed))?;
        }
    }
    Ok(format!("{TRIALS} trials per guard setting, all as expected"))
}

// 4 ------------------------------------------------------------------------

/// Reference model of the status/mask/MSI registers.
#[derive(Default)]
struct IrqModel {
    status: [bool; 4],
    mask: [bool; 4],
    in_flight: bool,
}

impl IrqModel {
    fn deliverable(&self) -> bool {
        (0..4).any(|i| self.status[i] && !self.mask[i])
    }

    fn maybe_send(&mut self) -> bool {
        if !self.in_flight && self.deliverable() {
            self.in_flight = true;
            return true;
        }
        false
    }
}

fn irq_automaton(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut bank = IrqBank::new(4);
    let mut model = IrqModel {
        mask: [true; 4],
        ..IrqModel::default()
    };
    for step in 0..rng.gen_range(10..60) {
        let sent = match rng.gen_range(0..4) {
            0 => {
                let p = rng.gen_range(0..4);
                model.status[p] = true;
                (bank.raise(p), model.maybe_send())
            }
            1 => {
                let m: u8 = rng.gen_range(0..16);
                for i in 0..4 {
                    model.mask[i] = m & (1 << i) != 0;
                }
                (bank.write_mask(m), model.maybe_send())
            }
            2 => {
                let p = rng.gen_range(0..4);
                model.status[p] = false;
                bank.ack(p);
                (false, false)
            }
            _ => {
                model.in_flight = false;
                bank.begin_service();
                (false, false)
            }
        };
        let status: u8 = (0..4).filter(|&i| model.status[i]).map(|i| 1 << i).sum();
        let mask: u8 = (0..4).filter(|&i| model.mask[i]).map(|i| 1 << i).sum();
        check(
            sent.0 == sent.1
                && bank.status() == status
                && bank.mask() == mask
                && bank.msi_pending() == model.in_flight,
            || format!("register model diverged at step {step}"),
        )?;
    }
    Ok(())
}

fn irq_end_to_end(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let device = DeviceConfig {
        ddr_size: 16 << 20,
        ..DeviceConfig::default()
    };
    let t = LocalTransport::new(Vmm::new(device, VmmConfig::default()).unwrap());
    let mut rts = Vec::new();
    for vm in 0..4 {
        let mut rt = Runtime::attach(t.clone(), vm).map_err(|e| e.to_string())?;
        let prr = rt.prr();
        rt.program(&bitfile(KernelKind::VecAdd, prr, 64)).map_err(|e| e.to_string())?;
        let b = rt.create_buffer(4096).map_err(|e| e.to_string())?;
        rts.push((rt, b, 0u64));
    }
    for _ in 0..rng.gen_range(1..=3) {
        let mut order: Vec<usize> = (0..4).filter(|_| rng.gen_bool(0.7)).collect();
        order.shuffle(rng);
        for &i in &order {
            let (rt, b, launches) = &mut rts[i];
            // Close completion times so several land inside one MSI.
            let n = rng.gen_range(1..=64u64) * 8;
            rt.set_kernel_args(&[b.base(), b.base(), b.base(), n])
                .map_err(|e| e.to_string())?;
            rt.launch().map_err(|e| e.to_string())?;
            *launches += 1;
        }
        order.shuffle(rng);
        for &i in &order {
            rts[i].0.wait().map_err(|e| e.to_string())?;
        }
    }
    for (vm, (rt, _, launches)) in rts.iter_mut().enumerate() {
        rt.poll().map_err(|e| e.to_string())?;
        let prr = rt.prr();
        let irqs = rt
            .notifications()
            .iter()
            .filter(|n| matches!(n, Notification::Irq { prr: p, error: false, .. } if *p == prr))
            .count() as u64;
        check(irqs == *launches, || {
            format!("vm {vm}: {irqs} dispatches for {launches} completions")
        })?;
    }
    Ok(())
}

fn irq_demux() -> Outcome {
    const SCHEDULES: usize = 1000;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in 0..SCHEDULES {
        irq_automaton(&mut rng).map_err(|e| format!("schedule {s}: {e}"))?;
        irq_end_to_end(&mut rng).map_err(|e| format!("schedule {s}: {e}"))?;
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!(
        "{SCHEDULES} register schedules and {SCHEDULES} end-to-end schedules in {:?}",
        start.elapsed()
    ))
}

// 5 ------------------------------------------------------------------------

fn random_descriptor(rng: &mut ChaCha8Rng) -> KernelDescriptor {
    let kinds = [
        KernelKind::VecAdd,
        KernelKind::Matmul,
        KernelKind::Sobel,
        KernelKind::RogueWriter,
    ];
    let mut d = KernelDescriptor::new(*kinds.choose(rng).unwrap())
        .with_cycles_per_item(rng.gen_range(1..=1000));
    d.param_schema = (0..rng.gen_range(0..=8))
        .map(|i| {
            let len = rng.gen_range(1..=20);
            let name: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            ParamSlot::new(format!("{name}{i}"), rng.gen_range(1..=64))
        })
        .collect();
    d
}

fn bitfile_checks() -> Outcome {
    const N: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..N {
        let d = random_descriptor(&mut rng);
        let target = BitfileTarget::new(rng.gen(), rng.gen(), rng.gen());
        let image = rng.gen_range(0..4096);
        let bytes = encode_bitfile_with_image(&d, target, image).map_err(|e| e.to_string())?;
        let back = decode_bitfile(&bytes).map_err(|e| format!("round trip {i}: {e}"))?;
        check(
            back.descriptor == d && back.target() == target && back.image_len == image,
            || format!("round trip {i} changed the bitfile"),
        )?;
    }
    for i in 0..N {
        let d = random_descriptor(&mut rng);
        let mut bytes =
            encode_bitfile_with_image(&d, BitfileTarget::new(1, 7, 0), rng.gen_range(0..1024))
                .map_err(|e| e.to_string())?;
        let bit = rng.gen_range(HEADER_LEN * 8..bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        check(decode_bitfile(&bytes).is_err(), || {
            format!("corruption {i} at bit {bit} went unnoticed")
        })?;
    }
    let d = KernelDescriptor::new(KernelKind::VecAdd);
    for (dev, shell) in [(1, 7), (2, 7), (1, 8)] {
        let verdicts: Vec<Compatibility> = (0..=255u8)
            .map(|prr| {
                let f = decode_bitfile(&encode_bitfile(&d, BitfileTarget::new(dev, shell, prr)).unwrap())
                    .unwrap();
                cb_compatibility_check(&f, 1, 7)
            })
            .collect();
        check(verdicts.iter().all(|v| *v == verdicts[0]), || {
            format!("verdict for device {dev} shell {shell} depends on prr_id")
        })?;
        let want = if (dev, shell) == (1, 7) {
            Compatibility::Accept
        } else {
            Compatibility::Reject
        };
        check(verdicts[0] == want, || format!("device {dev} shell {shell}: {:?}", verdicts[0]))?;
    }
    Ok(format!(
        "{N} round trips, {N}/{N} corruptions caught, prr_id 0..=255 never changes the verdict"
    ))
}

// 6 ------------------------------------------------------------------------

fn i32s(b: &[u8]) -> Vec<i32> {
    b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn bytes(v: &[i32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn kernel_oracles() -> Outcome {
    const N: usize = 500;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..N {
        let n = rng.gen_range(0..=512usize);
        let a: Vec<i32> = (0..n).map(|_| rng.gen()).collect();
        let b: Vec<i32> = (0..n).map(|_| rng.gen()).collect();
        let mut mem = FlatMemory([bytes(&a), bytes(&b), vec![0; 4 * n]].concat());
        execute_vec_add(&mut mem, 0, 4 * n as u64, 8 * n as u64, n as u64, 1)
            .map_err(|e| e.to_string())?;
        let want: Vec<i32> = a.iter().zip(&b).map(|(x, y)| x.wrapping_add(*y)).collect();
        check(i32s(&mem.0[8 * n..]) == want, || format!("vec_add instance {i}"))?;
    }
    for i in 0..N {
        let (n, m, k) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=16));
        let a: Vec<i32> = (0..n * m).map(|_| rng.gen_range(-1000..1000)).collect();
        let b: Vec<i32> = (0..m * k).map(|_| rng.gen()).collect();
        let (ao, bo, co) = (0, 4 * n * m, 4 * (n * m + m * k));
        let mut mem = FlatMemory([bytes(&a), bytes(&b), vec![0; 4 * n * k]].concat());
        execute_matmul(&mut mem, ao as u64, bo as u64, co as u64, (n as u64, m as u64, k as u64), 1)
            .map_err(|e| e.to_string())?;
        let mut want = vec![0i32; n * k];
        for r in 0..n {
            for c in 0..k {
                want[r * k + c] = (0..m).fold(0i32, |acc, p| {
                    acc.wrapping_add(a[r * m + p].wrapping_mul(b[p * k + c]))
                });
            }
        }
        check(i32s(&mem.0[co..]) == want, || format!("matmul instance {i} ({n}x{m}x{k})"))?;
    }
    const GX: [[i32; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
    const GY: [[i32; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];
    for i in 0..N {
        let (w, h) = (rng.gen_range(3..=64usize), rng.gen_range(3..=64usize));
        let img: Vec<u8> = (0..w * h).map(|_| rng.gen()).collect();
        let mut mem = FlatMemory([img.clone(), vec![0xCC; w * h]].concat());
        execute_sobel(&mut mem, 0, (w * h) as u64, w as u64, h as u64, 9)
            .map_err(|e| e.to_string())?;
        let mut want = vec![0u8; w * h];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let (mut gx, mut gy) = (0, 0);
                for (dy, (rx, ry)) in GX.iter().zip(&GY).enumerate() {
                    for dx in 0..3 {
                        let p = i32::from(img[(y + dy - 1) * w + x + dx - 1]);
                        gx += rx[dx] * p;
                        gy += ry[dx] * p;
                    }
                }
                want[y * w + x] = (gx.abs() + gy.abs()).min(255) as u8;
            }
        }
        check(mem.0[w * h..] == want[..], || format!("sobel instance {i} ({w}x{h})"))?;
    }
    Ok(format!("{N} instances each of vec_add, matmul (<=16x16), sobel (<=64x64)"))
}

// 7 ------------------------------------------------------------------------

fn reconfiguration_economics() -> Outcome {
    let device = DeviceConfig::default();
    check(device.cost.full_reconfig_time == 2.5, || "full reconfiguration is not 2.5 s".into())?;
    let script = bench::vec_add_script(1 << 16, 1 << 20);
    let mut parts = Vec::new();
    for n in 2..=4 {
        let m = bench::multiplexing_win(&device, &script, n).map_err(|e| e.to_string())?;
        check(m.win(), || format!("N={n}: {m:?}"))?;
        parts.push(format!(
            "N={n} shared {:.3} s < serialized {:.3} s",
            m.shared_ns as f64 / 1e9,
            m.serialized_ns as f64 / 1e9
        ));
    }
    Ok(parts.join(", "))
}

// 8 ------------------------------------------------------------------------

fn repo_file(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(name)
}

fn breakdown_calibration() -> Outcome {
    let c = ScenarioConfig::load(repo_file("configs/calibration_vec_add.toml"))
        .map_err(|e| e.to_string())?;
    check(c.description.starts_with("calibration"), || {
        "calibration file is not labeled as calibration".into()
    })?;
    let r = bench::run(&c).map_err(|e| e.to_string())?.report;
    check(r.vm.iter().all(|v| v.errors.is_empty()), || "workload reported errors".into())?;
    let sum = r.software_ns + r.transfer_ns + r.kernel_ns + r.reconfiguration_ns + r.idle_ns;
    let rel = (sum as f64 - r.total_ns as f64).abs() / r.total_ns as f64;
    check(rel <= 1e-9, || format!("components off by {rel:e}"))?;
    let shares = r.software_share + r.transfer_share + r.kernel_share
        + r.reconfiguration_share + r.idle_share;
    check((shares - 1.0).abs() <= 1e-9, || format!("shares sum to {shares}"))?;
    check((0.45..=0.65).contains(&r.software_share), || {
        format!("software share {:.4}", r.software_share)
    })?;
    Ok(format!("software share {:.1}% (calibrated)", 100.0 * r.software_share))
}

// 9 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    const RUNS: u64 = 20;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for seed in 0..RUNS {
        let c = bench::random_scenario(900 + seed);
        let local = bench::run(&c).map_err(|e| e.to_string())?;
        let sock = dir.path().join(format!("vmm{seed}.sock"));
        let vmm = Vmm::new(c.device.clone(), c.vmm.clone()).map_err(|e| e.to_string())?;
        let server = VmmServer::bind(Arc::new(Mutex::new(vmm)), &sock).map_err(|e| e.to_string())?;
        let wire = bench::run_with(&c, &mut UnixConnector(sock));
        server.shutdown();
        let wire = wire.map_err(|e| e.to_string())?;
        for (mode, out) in [("local", &local), ("wire", &wire)] {
            let r = replay(&out.trace, c.device.clone(), c.vmm.clone())
                .map_err(|e| format!("seed {seed} {mode}: {e}"))?;
            check(
                r.matches()
                    && r.digest == out.report.memory_digest
                    && r.final_time == out.report.total_ns,
                || format!("seed {seed} {mode}: {r:?}"),
            )?;
        }
        check(local.trace == wire.trace, || format!("seed {seed}: modes disagree"))?;
    }
    Ok(format!("{RUNS} scenarios replayed bit-identically in both modes"))
}

// 10 -----------------------------------------------------------------------

fn microbench_sanity() -> Outcome {
    let d = DeviceConfig::default();
    let f = micro::freq(&d).map_err(|e| e.to_string())?;
    check(f.iter().all(|hz| *hz == 200e6), || format!("freq {f:?}"))?;
    let p = micro::pcie(&d, &[4 << 10, 256 << 20]).map_err(|e| e.to_string())?;
    let bw = d.cost.dma_bandwidth;
    let big = p[1].rate / bw;
    check((big - 1.0).abs() <= 0.01, || format!("256 MiB at {big:.4} of configured"))?;
    check(p[0].rate < bw, || "4 KiB reached the configured rate".into())?;
    Ok(format!(
        "200 MHz, 256 MiB at {:.2}% and 4 KiB at {:.2}% of dma_bandwidth",
        100.0 * big,
        100.0 * p[0].rate / bw
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("allocator oracle equivalence", allocator_oracle),
        ("isolation suite", isolation_suite),
        ("hardware isolation caveat", hw_corrupt),
        ("irq demultiplexing", irq_demux),
        ("bitfile checks", bitfile_checks),
        ("kernel oracles", kernel_oracles),
        ("reconfiguration economics", reconfiguration_economics),
        ("breakdown calibration", breakdown_calibration),
        ("determinism and interposition", determinism),
        ("microbenchmark sanity", microbench_sanity),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(format!("panicked: {p:?}")));
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
