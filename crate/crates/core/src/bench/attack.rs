//! Isolation attacks between two tenants. Each returns a verdict stating
//! what was expected, what was observed and whether they agree.

use serde::Serialize;

use crate::bitstream::{encode_bitfile, BitfileTarget, KernelDescriptor, KernelKind};
use crate::device::{DeviceConfig, SlotState};
use crate::guest::{GuestError, Runtime, MGMT_BASE};
use crate::vmm::transport::LocalTransport;
use crate::vmm::wire::Notification;
use crate::vmm::{Vmm, VmmConfig, VmmConfigError, VmmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    CrossReprogram,
    CrossRead,
    HwCorrupt,
}

impl Attack {
    pub const ALL: [Attack; 3] = [Self::CrossReprogram, Self::CrossRead, Self::HwCorrupt];

    pub fn name(self) -> &'static str {
        match self {
            Self::CrossReprogram => "cross_reprogram",
            Self::CrossRead => "cross_read",
            Self::HwCorrupt => "hw_corrupt",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub attack: Attack,
    pub guard: bool,
    pub expected: String,
    pub observed: String,
    pub passed: bool,
}

const VICTIM: u32 = 0;
const ATTACKER: u32 = 1;
const PATTERN: u8 = 0x5A;
const LEN: u64 = 4096;

fn bitfile(device: &DeviceConfig, kind: KernelKind, prr: u32) -> Vec<u8> {
    encode_bitfile(
        &KernelDescriptor::new(kind),
        BitfileTarget::new(device.device_id, device.shell_id, prr as u8),
    )
    .expect("default descriptor encodes")
}

fn denied(r: Result<impl Sized, GuestError>) -> bool {
    matches!(r, Err(GuestError::Vmm(VmmError::PermissionDenied)))
}

fn unexpected(e: GuestError) -> String {
    format!("setup failed: {e}")
}

/// Runs `attack` on a fresh broker over `device` with the guard forced to
/// `guard`.
pub fn attack(
    device: &DeviceConfig,
    attack: Attack,
    guard: bool,
) -> Result<Verdict, VmmConfigError> {
    let device = DeviceConfig {
        range_guard: guard,
        ..device.clone()
    };
    let t = LocalTransport::new(Vmm::new(device.clone(), VmmConfig::default())?);
    let (expected, observed, passed) = match scenario(&t, &device, attack, guard) {
        Ok(v) => v,
        Err(e) => ("-".into(), unexpected(e), false),
    };
    Ok(Verdict {
        attack,
        guard,
        expected,
        observed,
        passed,
    })
}

type Outcome = (String, String, bool);

fn scenario(
    t: &LocalTransport,
    device: &DeviceConfig,
    attack: Attack,
    guard: bool,
) -> Result<Outcome, GuestError> {
    let mut victim = Runtime::attach(t.clone(), VICTIM)?;
    let mut attacker = Runtime::attach(t.clone(), ATTACKER)?;
    let (vp, ap) = (victim.prr(), attacker.prr());
    victim.program(&bitfile(device, KernelKind::VecAdd, vp))?;
    let mut buf = victim.create_buffer(LEN)?;
    victim.write_buffer(&buf, 0, &vec![PATTERN; LEN as usize])?;
    let intact = |victim: &mut Runtime<LocalTransport>, buf: &mut _| -> Result<bool, GuestError> {
        Ok(victim.read_buffer(buf, 0, LEN)?.iter().all(|b| *b == PATTERN))
    };

    Ok(match attack {
        Attack::CrossReprogram => {
            let before = t.vmm().lock().expect("broker lock").device().slots()[vp as usize].clone();
            let refused = denied(attacker.submit_program(&bitfile(device, KernelKind::Sobel, vp)));
            attacker.wait()?;
            let after = t.vmm().lock().expect("broker lock").device().slots()[vp as usize].clone();
            let untouched = before == after && after.state == SlotState::Ready;
            (
                "permission_denied, victim region untouched".into(),
                format!("denied={refused}, untouched={untouched}"),
                refused && untouched,
            )
        }
        Attack::CrossRead => {
            let d = attacker.device();
            let mem = d.mmd_open("memory")?;
            let read = denied(d.mmd_read(&mem, buf.base(), 64));
            let write = denied(d.mmd_write(&mem, buf.base(), &[0; 64]));
            let free = denied(d.mmd_write(&mem, MGMT_BASE, &buf.base().to_le_bytes()));
            let ok = intact(&mut victim, &mut buf)?;
            (
                "permission_denied on read, write and free; data intact".into(),
                format!("read={read}, write={write}, free={free}, intact={ok}"),
                read && write && free && ok,
            )
        }
        Attack::HwCorrupt => {
            attacker.program(&bitfile(device, KernelKind::RogueWriter, ap))?;
            attacker.set_kernel_args(&[buf.base(), LEN, 0xEE])?;
            attacker.launch()?;
            let fault = attacker.wait();
            let guard_fault = attacker
                .notifications()
                .iter()
                .any(|n| matches!(n, Notification::GuardFault { prr, .. } if *prr == ap));
            let corrupted = !intact(&mut victim, &mut buf)?;
            let expected = if guard {
                "guard_fault raised, victim intact"
            } else {
                "victim corrupted"
            };
            let passed = if guard {
                guard_fault && !corrupted && matches!(fault, Err(GuestError::KernelFault))
            } else {
                corrupted && !guard_fault && fault.is_ok()
            };
            (
                expected.into(),
                format!("corrupted={corrupted}, guard_fault={guard_fault}"),
                passed,
            )
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_attacks_behave_as_expected() {
        let device = DeviceConfig {
            ddr_size: 64 << 20,
            ..DeviceConfig::default()
        };
        for a in Attack::ALL {
            for guard in [false, true] {
                let v = attack(&device, a, guard).unwrap();
                assert!(v.passed, "{v:?}");
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for a in Attack::ALL {
            assert_eq!(Attack::from_name(a.name()), Some(a));
        }
        assert_eq!(Attack::from_name("nope"), None);
    }
}
