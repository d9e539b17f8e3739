use std::sync::{Arc, Mutex};

use super::*;
use crate::bitstream::{
    encode_bitfile, encode_bitfile_with_image, BitfileTarget, KernelDescriptor, KernelKind,
};
use crate::device::{DeviceConfig, REG_ARG0, REG_CONTROL, REG_STATUS, STATUS_LOADED};
use crate::vmm::server::VmmServer;
use crate::vmm::transport::{LocalTransport, UnixTransport};
use crate::vmm::wire::RegWriteOutcome;
use crate::vmm::{Vmm, VmmConfig};

fn broker() -> LocalTransport {
    let device = DeviceConfig {
        ddr_size: 64 << 20,
        ..DeviceConfig::default()
    };
    LocalTransport::new(Vmm::new(device, VmmConfig::default()).unwrap())
}

fn bitfile(kind: KernelKind, prr: u32) -> Vec<u8> {
    encode_bitfile(&KernelDescriptor::new(kind), BitfileTarget::new(1, 7, prr as u8)).unwrap()
}

fn big_bitfile(kind: KernelKind, prr: u32) -> Vec<u8> {
    encode_bitfile_with_image(
        &KernelDescriptor::new(kind),
        BitfileTarget::new(1, 7, prr as u8),
        4 << 20,
    )
    .unwrap()
}

fn trace_len(t: &LocalTransport) -> usize {
    t.vmm().lock().unwrap().trace().len()
}

fn ints(v: &[i32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn from_ints(b: &[u8]) -> Vec<i32> {
    b.chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn vec_add(rt: &mut Runtime<impl Transport>, a: &[i32], b: &[i32]) -> Vec<i32> {
    let n = a.len() as u64;
    let ba = rt.create_buffer(4 * n).unwrap();
    let bb = rt.create_buffer(4 * n).unwrap();
    let mut bc = rt.create_buffer(4 * n).unwrap();
    rt.write_buffer(&ba, 0, &ints(a)).unwrap();
    rt.write_buffer(&bb, 0, &ints(b)).unwrap();
    rt.set_kernel_args(&[ba.base(), bb.base(), bc.base(), n]).unwrap();
    rt.launch().unwrap();
    rt.wait().unwrap();
    from_ints(&rt.read_buffer(&mut bc, 0, 4 * n).unwrap())
}

#[test]
fn interfaces_have_fixed_kinds() {
    let mut d = MmdDevice::attach(broker(), 0).unwrap();
    let cra = d.mmd_open("kernel-cra").unwrap();
    assert_eq!(cra.kind, InterfaceKind::PassThrough);
    assert_eq!(d.mmd_open("memory").unwrap().kind, InterfaceKind::Forwarded);
    assert_eq!(d.mmd_open("reprogram").unwrap().kind, InterfaceKind::Forwarded);
    assert!(matches!(
        d.mmd_open("bogus"),
        Err(GuestError::NoSuchInterface(n)) if n == "bogus"
    ));
}

#[test]
fn closed_interface_is_unusable() {
    let mut d = MmdDevice::attach(broker(), 0).unwrap();
    let cra = d.mmd_open("kernel-cra").unwrap();
    d.mmd_close(&cra).unwrap();
    assert!(matches!(d.mmd_read(&cra, 0, 8), Err(GuestError::ClosedInterface)));
    assert!(matches!(d.mmd_close(&cra), Err(GuestError::ClosedInterface)));
    assert!(matches!(d.mmd_get_info(&cra), Err(GuestError::ClosedInterface)));
}

#[test]
fn get_info_reports_assigned_region() {
    let t = broker();
    let _first = MmdDevice::attach(t.clone(), 0).unwrap();
    let mut d = MmdDevice::attach(t, 1).unwrap();
    let cra = d.mmd_open("kernel-cra").unwrap();
    let info = d.mmd_get_info(&cra).unwrap();
    assert_eq!(info.prr, 1);
    assert_eq!(info.register_width_bits, 64);
    assert_eq!(info.segment_size, 1 << 20);
}

#[test]
fn register_access_passes_through() {
    let t = broker();
    let mut d = MmdDevice::attach(t.clone(), 0).unwrap();
    let cra = d.mmd_open("kernel-cra").unwrap();
    d.mmd_write(&cra, REG_ARG0 as u64, &[7u64.to_le_bytes(), 9u64.to_le_bytes()].concat())
        .unwrap();
    let back = d.mmd_read(&cra, REG_ARG0 as u64, 16).unwrap();
    assert_eq!(back, [7u64.to_le_bytes(), 9u64.to_le_bytes()].concat());
    let vmm = t.vmm().lock().unwrap();
    assert_eq!(vmm.device().slots()[0].registers.args[..2], [7, 9]);
    let ops: Vec<_> = vmm.trace().events().iter().map(|e| e.op.as_str()).collect();
    assert_eq!(ops.iter().filter(|o| **o == "reg_write").count(), 2);
    assert_eq!(ops.iter().filter(|o| **o == "reg_read").count(), 2);
}

#[test]
fn register_index_out_of_range() {
    let mut d = MmdDevice::attach(broker(), 0).unwrap();
    let cra = d.mmd_open("kernel-cra").unwrap();
    let err = d.mmd_read(&cra, 10, 8).unwrap_err();
    assert_eq!(err.vmm(), Some(VmmError::InvalidRegion));
    let err = d.mmd_write(&cra, u64::MAX, &[0; 8]).unwrap_err();
    assert_eq!(err.vmm(), Some(VmmError::InvalidRegion));
    assert!(matches!(d.mmd_read(&cra, 0, 3), Err(GuestError::InvalidLength(3))));
}

#[test]
fn start_on_ready_slot_launches() {
    let mut rt = Runtime::attach(broker(), 0).unwrap();
    rt.program(&bitfile(KernelKind::VecAdd, 0)).unwrap();
    let d = rt.device();
    let cra = d.mmd_open("kernel-cra").unwrap();
    let ack = d.mmd_write(&cra, REG_CONTROL as u64, &1u64.to_le_bytes()).unwrap();
    assert!(matches!(ack.register, Some(RegWriteOutcome::Launched { .. })));
}

#[test]
fn frozen_write_is_ignored_and_traced() {
    let t = broker();
    let mut rt = Runtime::attach(t.clone(), 0).unwrap();
    rt.submit_program(&big_bitfile(KernelKind::VecAdd, 0)).unwrap();
    let d = rt.device();
    let cra = d.mmd_open("kernel-cra").unwrap();
    let ack = d.mmd_write(&cra, REG_ARG0 as u64, &5u64.to_le_bytes()).unwrap();
    assert_eq!(ack.register, Some(RegWriteOutcome::Ignored));
    let vmm = t.vmm().lock().unwrap();
    assert!(vmm.trace().events().iter().any(|e| e.op == "frozen_access"));
    assert_eq!(vmm.device().slots()[0].registers.args[0], 0);
}

#[test]
fn cross_read_is_denied() {
    let t = broker();
    let mut victim = Runtime::attach(t.clone(), 0).unwrap();
    let buf = victim.create_buffer(4096).unwrap();
    victim.write_buffer(&buf, 0, &[0xAB; 4096]).unwrap();
    let mut attacker = MmdDevice::attach(t, 1).unwrap();
    let mem = attacker.mmd_open("memory").unwrap();
    let err = attacker.mmd_read(&mem, buf.base(), 16).unwrap_err();
    assert_eq!(err.vmm(), Some(VmmError::PermissionDenied));
    let err = attacker
        .mmd_write(&mem, MGMT_BASE, &buf.base().to_le_bytes())
        .unwrap_err();
    assert_eq!(err.vmm(), Some(VmmError::PermissionDenied));
}

#[test]
fn reprogram_legal_accepted() {
    let mut rt = Runtime::attach(broker(), 0).unwrap();
    rt.program(&bitfile(KernelKind::Sobel, 0)).unwrap();
    let d = rt.device();
    let cra = d.mmd_open("kernel-cra").unwrap();
    let status = d.mmd_read(&cra, REG_STATUS as u64, 8).unwrap();
    assert_ne!(u64::from_le_bytes(status.try_into().unwrap()) & STATUS_LOADED, 0);
}

#[test]
fn reprogram_of_foreign_region_denied() {
    let t = broker();
    let _victim = MmdDevice::attach(t.clone(), 0).unwrap();
    let mut d = MmdDevice::attach(t.clone(), 1).unwrap();
    let rep = d.mmd_open("reprogram").unwrap();
    let err = d.mmd_reprogram(&rep, &bitfile(KernelKind::VecAdd, 0)).unwrap_err();
    assert_eq!(err.vmm(), Some(VmmError::PermissionDenied));
    let vmm = t.vmm().lock().unwrap();
    assert!(vmm.device().slots()[0].kernel.is_none());
}

#[test]
fn reprogram_busy_when_queue_full() {
    let t = broker();
    let mut d = MmdDevice::attach(t, 0).unwrap();
    let rep = d.mmd_open("reprogram").unwrap();
    let big = big_bitfile(KernelKind::VecAdd, 0);
    // One in flight plus a full queue.
    for _ in 0..=crate::vmm::DEFAULT_QUEUE_DEPTH {
        d.mmd_reprogram(&rep, &big).unwrap();
    }
    let err = d.mmd_reprogram(&rep, &big).unwrap_err();
    assert_eq!(err.vmm(), Some(VmmError::Busy));
}

#[test]
fn reprogram_interface_rejects_handlers_and_data() {
    let mut d = MmdDevice::attach(broker(), 0).unwrap();
    let rep = d.mmd_open("reprogram").unwrap();
    assert!(matches!(d.mmd_set_irq(&rep, None), Err(GuestError::Unsupported)));
    assert!(matches!(d.mmd_set_status(&rep, None), Err(GuestError::Unsupported)));
    assert!(matches!(d.mmd_read(&rep, 0, 8), Err(GuestError::Unsupported)));
    assert!(matches!(d.mmd_write(&rep, 0, &[0; 8]), Err(GuestError::Unsupported)));
    let mem = d.mmd_open("memory").unwrap();
    assert!(matches!(d.mmd_reprogram(&mem, &[]), Err(GuestError::Unsupported)));
}

#[test]
fn vec_add_end_to_end() {
    let mut rt = Runtime::attach(broker(), 0).unwrap();
    rt.program(&bitfile(KernelKind::VecAdd, 0)).unwrap();
    let a: Vec<i32> = (0..1000).map(|i| i * 3 - 700).collect();
    let b: Vec<i32> = (0..1000).map(|i| i32::MAX - i).collect();
    let expect: Vec<i32> = a.iter().zip(&b).map(|(x, y)| x.wrapping_add(*y)).collect();
    assert_eq!(vec_add(&mut rt, &a, &b), expect);
}

#[test]
fn vec_add_over_unix_socket() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vmm.sock");
    let shared = broker().vmm().clone();
    let server = VmmServer::bind(shared, &path).unwrap();
    let mut rt = Runtime::attach(UnixTransport::connect(&path).unwrap(), 0).unwrap();
    rt.program(&bitfile(KernelKind::VecAdd, 0)).unwrap();
    assert_eq!(vec_add(&mut rt, &[1, 2, 3], &[10, 20, 30]), [11, 22, 33]);
    rt.detach().unwrap();
    server.shutdown();
}

#[test]
fn wait_without_pending_returns() {
    let t = broker();
    let mut rt = Runtime::attach(t.clone(), 0).unwrap();
    let before = trace_len(&t);
    rt.wait().unwrap();
    assert_eq!(trace_len(&t), before);
}

#[test]
fn launch_without_kernel() {
    let mut rt = Runtime::attach(broker(), 0).unwrap();
    assert!(matches!(rt.launch(), Err(GuestError::NoKernelLoaded)));
}

#[test]
fn launch_during_reconfiguration_does_not_hang() {
    let mut rt = Runtime::attach(broker(), 0).unwrap();
    rt.program(&bitfile(KernelKind::VecAdd, 0)).unwrap();
    rt.submit_program(&big_bitfile(KernelKind::VecAdd, 0)).unwrap();
    // Frozen registers read as zero, so no kernel appears loaded.
    assert!(matches!(rt.launch(), Err(GuestError::NoKernelLoaded)));
    rt.wait().unwrap();
    assert_eq!(vec_add(&mut rt, &[4], &[5]), [9]);
}

#[test]
fn kernel_fault_surfaces_from_wait() {
    let mut rt = Runtime::attach(broker(), 0).unwrap();
    rt.program(&bitfile(KernelKind::VecAdd, 0)).unwrap();
    // Operands far outside device memory.
    rt.set_kernel_args(&[1 << 40, 0, 0, 16]).unwrap();
    rt.launch().unwrap();
    assert!(matches!(rt.wait(), Err(GuestError::KernelFault)));
}

#[test]
fn buffer_bounds_checked_without_wire_traffic() {
    let t = broker();
    let mut rt = Runtime::attach(t.clone(), 0).unwrap();
    let mut buf = rt.create_buffer(100).unwrap();
    let before = trace_len(&t);
    assert!(matches!(
        rt.write_buffer(&buf, 90, &[0; 11]),
        Err(GuestError::OutOfBounds { offset: 90, len: 11, size: 100 })
    ));
    assert!(matches!(
        rt.read_buffer(&mut buf, u64::MAX, 2),
        Err(GuestError::OutOfBounds { .. })
    ));
    assert!(matches!(rt.create_buffer(0), Err(GuestError::InvalidLength(0))));
    assert!(matches!(
        rt.set_kernel_args(&[0; 9]),
        Err(GuestError::InvalidLength(9))
    ));
    assert_eq!(trace_len(&t), before);
}

#[test]
fn freed_buffer_is_gone() {
    let mut rt = Runtime::attach(broker(), 0).unwrap();
    let buf = rt.create_buffer(64).unwrap();
    let copy = buf.clone();
    rt.free_buffer(buf).unwrap();
    let err = rt.write_buffer(&copy, 0, &[1]).unwrap_err();
    assert_eq!(err.vmm(), Some(VmmError::InvalidHandle));
}

type Log = Arc<Mutex<Vec<Notification>>>;

fn recorder(log: &Log) -> Handler {
    let log = Arc::clone(log);
    Box::new(move |n: &Notification| log.lock().unwrap().push(n.clone()))
}

#[test]
fn irq_handler_runs_once_per_completion() {
    let t = broker();
    let mut rt = Runtime::attach(t, 0).unwrap();
    rt.program(&bitfile(KernelKind::VecAdd, 0)).unwrap();
    let log: Log = Arc::default();
    let d = rt.device();
    let cra = d.mmd_open("kernel-cra").unwrap();
    d.mmd_set_irq(&cra, Some(recorder(&log))).unwrap();
    for _ in 0..3 {
        rt.set_kernel_args(&[0, 0, 0, 0]).unwrap();
        rt.launch().unwrap();
        rt.wait().unwrap();
    }
    let got = log.lock().unwrap();
    assert_eq!(got.len(), 3);
    assert!(got.iter().all(|n| matches!(n, Notification::Irq { prr: 0, error: false, .. })));
}

#[test]
fn status_handler_reports_write_request_id() {
    let mut d = MmdDevice::attach(broker(), 0).unwrap();
    let mem = d.mmd_open("memory").unwrap();
    let log: Log = Arc::default();
    d.mmd_set_status(&mem, Some(recorder(&log))).unwrap();
    let alloc = d.mmd_read(&mem, MGMT_BASE + 256, 16).unwrap();
    let base = u64::from_le_bytes(alloc[..8].try_into().unwrap());
    let ack = d.mmd_write(&mem, base, &[1; 256]).unwrap();
    d.file().flush();
    let got = log.lock().unwrap();
    assert!(matches!(
        got.as_slice(),
        [Notification::TransferDone { request_id, .. }] if *request_id == ack.request_id
    ));
}

#[test]
fn clearing_a_handler_stops_delivery() {
    let mut d = MmdDevice::attach(broker(), 0).unwrap();
    let mem = d.mmd_open("memory").unwrap();
    let log: Log = Arc::default();
    d.mmd_set_status(&mem, Some(recorder(&log))).unwrap();
    d.mmd_set_status(&mem, None).unwrap();
    let alloc = d.mmd_read(&mem, MGMT_BASE + 8, 16).unwrap();
    let base = u64::from_le_bytes(alloc[..8].try_into().unwrap());
    d.mmd_write(&mem, base, &[1; 8]).unwrap();
    d.file().flush();
    assert!(log.lock().unwrap().is_empty());
    assert!(d.file_ref().notifications().is_empty());
}

#[test]
fn callbacks_follow_virtual_time_and_never_overlap() {
    let t = broker();
    let mut rt = Runtime::attach(t, 0).unwrap();
    let busy = Arc::new(Mutex::new(false));
    let times: Arc<Mutex<Vec<u64>>> = Arc::default();
    let handler = |busy: Arc<Mutex<bool>>, times: Arc<Mutex<Vec<u64>>>| -> Handler {
        Box::new(move |n: &Notification| {
            {
                let mut b = busy.lock().unwrap();
                assert!(!*b, "callbacks overlapped");
                *b = true;
            }
            let at = match n {
                Notification::Irq { at, .. }
                | Notification::TransferDone { at, .. }
                | Notification::ReprogramDone { at, .. }
                | Notification::GuardFault { at, .. } => *at,
            };
            times.lock().unwrap().push(at);
            std::thread::sleep(std::time::Duration::from_millis(1));
            *busy.lock().unwrap() = false;
        })
    };
    let d = rt.device();
    let cra = d.mmd_open("kernel-cra").unwrap();
    let mem = d.mmd_open("memory").unwrap();
    d.mmd_set_irq(&cra, Some(handler(busy.clone(), times.clone()))).unwrap();
    d.mmd_set_status(&mem, Some(handler(busy, times.clone()))).unwrap();
    rt.program(&bitfile(KernelKind::VecAdd, 0)).unwrap();
    assert_eq!(vec_add(&mut rt, &[1; 64], &[2; 64]), [3; 64]);
    rt.device().file().flush();
    let t = times.lock().unwrap();
    // reprogram, two writes, one completion
    assert_eq!(t.len(), 4);
    assert!(t.windows(2).all(|w| w[0] <= w[1]), "{t:?}");
}

#[test]
fn guard_fault_reaches_irq_handler() {
    let device = DeviceConfig {
        ddr_size: 64 << 20,
        range_guard: true,
        ..DeviceConfig::default()
    };
    let t = LocalTransport::new(Vmm::new(device, VmmConfig::default()).unwrap());
    let mut rogue = Runtime::attach(t, 0).unwrap();
    rogue.program(&bitfile(KernelKind::RogueWriter, 0)).unwrap();
    // Region 0 owns the first quarter; aim at the last.
    rogue.set_kernel_args(&[60 << 20, 64, 0xEE]).unwrap();
    rogue.launch().unwrap();
    assert!(matches!(rogue.wait(), Err(GuestError::KernelFault)));
    assert!(rogue
        .notifications()
        .iter()
        .any(|n| matches!(n, Notification::GuardFault { prr: 0, .. })));
}

#[test]
fn reconfiguring_under_a_running_kernel_stalls_its_wait() {
    let mut rt = Runtime::attach(broker(), 0).unwrap();
    rt.program(&bitfile(KernelKind::VecAdd, 0)).unwrap();
    rt.set_kernel_args(&[0, 0, 0, 1_000_000]).unwrap();
    rt.launch().unwrap();
    rt.submit_program(&bitfile(KernelKind::VecAdd, 0)).unwrap();
    assert!(matches!(rt.wait(), Err(GuestError::Stalled)));
    assert!(!rt.kernel_pending());
}
