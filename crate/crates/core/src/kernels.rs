//! Functional and timing models of the accelerators a PRR can host.
//!
//! All datapaths are integer: `vec_add` and `matmul` use wrapping 32-bit lanes,
//! `sobel` works on 8-bit grayscale. Every kernel reads its inputs in full before
//! issuing a single output write, so a faulting kernel leaves memory untouched.

use thiserror::Error;

use crate::bitstream::{KernelDescriptor, KernelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MemFault {
    #[error("guard fault at [{addr:#x}, +{len})")]
    Guard { addr: u64, len: u64 },
    #[error("access [{addr:#x}, +{len}) outside device memory")]
    OutOfRange { addr: u64, len: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("bad kernel arguments: {0}")]
    Arg(String),
    #[error(transparent)]
    Fault(#[from] MemFault),
}

/// The kernel's view of device DDR.
pub trait KernelMemory {
    fn read(&mut self, addr: u64, len: usize) -> Result<Vec<u8>, MemFault>;
    fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), MemFault>;
}

fn arg_err(msg: impl Into<String>) -> KernelError {
    KernelError::Arg(msg.into())
}

fn byte_len(count: u64, elem: u64) -> Result<usize, KernelError> {
    count
        .checked_mul(elem)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| arg_err("region size overflows"))
}

fn to_i32s(bytes: &[u8]) -> Vec<i32> {
    bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn from_i32s(v: &[i32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// `c[i] = a[i] + b[i]` over `n` wrapping i32 lanes.
pub fn execute_vec_add(
    mem: &mut dyn KernelMemory,
    a_addr: u64,
    b_addr: u64,
    c_addr: u64,
    n: u64,
    cycles_per_item: u32,
) -> Result<u64, KernelError> {
    let cycles = vec_add_cycles(n, cycles_per_item)?;
    let len = byte_len(n, 4)?;
    if n == 0 {
        return Ok(0);
    }
    let a = to_i32s(&mem.read(a_addr, len)?);
    let b = to_i32s(&mem.read(b_addr, len)?);
    let c: Vec<i32> = a.iter().zip(&b).map(|(x, y)| x.wrapping_add(*y)).collect();
    mem.write(c_addr, &from_i32s(&c))?;
    Ok(cycles)
}

pub fn vec_add_cycles(n: u64, cycles_per_item: u32) -> Result<u64, KernelError> {
    n.checked_mul(u64::from(cycles_per_item))
        .ok_or_else(|| arg_err("cycle count overflows"))
}

/// Row-major `C(n×k) = A(n×m) · B(m×k)` with wrapping i32 arithmetic.
pub fn execute_matmul(
    mem: &mut dyn KernelMemory,
    a_addr: u64,
    b_addr: u64,
    c_addr: u64,
    dims: (u64, u64, u64),
    cycles_per_item: u32,
) -> Result<u64, KernelError> {
    let (n, m, k) = dims;
    let cycles = matmul_cycles(dims, cycles_per_item)?;
    let a_len = byte_len(n.checked_mul(m).ok_or_else(|| arg_err("n*m overflows"))?, 4)?;
    let b_len = byte_len(m.checked_mul(k).ok_or_else(|| arg_err("m*k overflows"))?, 4)?;
    let c_len = byte_len(n.checked_mul(k).ok_or_else(|| arg_err("n*k overflows"))?, 4)?;
    if c_len == 0 {
        return Ok(cycles);
    }
    let a = to_i32s(&mem.read(a_addr, a_len)?);
    let b = to_i32s(&mem.read(b_addr, b_len)?);
    let (n, m, k) = (n as usize, m as usize, k as usize);
    let mut c = vec![0i32; n * k];
    for i in 0..n {
        for p in 0..m {
            let aip = a[i * m + p];
            for j in 0..k {
                c[i * k + j] = c[i * k + j].wrapping_add(aip.wrapping_mul(b[p * k + j]));
            }
        }
    }
    mem.write(c_addr, &from_i32s(&c))?;
    Ok(cycles)
}

pub fn matmul_cycles(dims: (u64, u64, u64), cycles_per_item: u32) -> Result<u64, KernelError> {
    let (n, m, k) = dims;
    n.checked_mul(m)
        .and_then(|x| x.checked_mul(k))
        .and_then(|x| x.checked_mul(u64::from(cycles_per_item)))
        .ok_or_else(|| arg_err("cycle count overflows"))
}

/// 3×3 Sobel magnitude `min(|Gx| + |Gy|, 255)` on interior pixels, zero border.
pub fn execute_sobel(
    mem: &mut dyn KernelMemory,
    src_addr: u64,
    dst_addr: u64,
    w: u64,
    h: u64,
    cycles_per_item: u32,
) -> Result<u64, KernelError> {
    let cycles = sobel_cycles(w, h, cycles_per_item)?;
    let len = byte_len(w.checked_mul(h).ok_or_else(|| arg_err("w*h overflows"))?, 1)?;
    let src = mem.read(src_addr, len)?;
    let (w, h) = (w as usize, h as usize);
    let px = |x: usize, y: usize| i32::from(src[y * w + x]);
    let mut dst = vec![0u8; len];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = -px(x - 1, y - 1) + px(x + 1, y - 1) - 2 * px(x - 1, y)
                + 2 * px(x + 1, y)
                - px(x - 1, y + 1)
                + px(x + 1, y + 1);
            let gy = -px(x - 1, y - 1) - 2 * px(x, y - 1) - px(x + 1, y - 1)
                + px(x - 1, y + 1)
                + 2 * px(x, y + 1)
                + px(x + 1, y + 1);
            dst[y * w + x] = (gx.abs() + gy.abs()).min(255) as u8;
        }
    }
    mem.write(dst_addr, &dst)?;
    Ok(cycles)
}

pub fn sobel_cycles(w: u64, h: u64, cycles_per_item: u32) -> Result<u64, KernelError> {
    if w < 3 || h < 3 {
        return Err(arg_err(format!("sobel needs at least 3x3, got {w}x{h}")));
    }
    w.checked_mul(h)
        .and_then(|x| x.checked_mul(u64::from(cycles_per_item)))
        .ok_or_else(|| arg_err("cycle count overflows"))
}

/// Writes `len` bytes of the little-endian `pattern`, repeated, at `target_addr`.
/// Nothing but the device's range guard stands in its way.
pub fn execute_rogue_writer(
    mem: &mut dyn KernelMemory,
    target_addr: u64,
    len: u64,
    pattern: u64,
    cycles_per_item: u32,
) -> Result<u64, KernelError> {
    let cycles = rogue_writer_cycles(len, cycles_per_item)?;
    let len = byte_len(len, 1)?;
    let pat = pattern.to_le_bytes();
    let data: Vec<u8> = (0..len).map(|i| pat[i % 8]).collect();
    mem.write(target_addr, &data)?;
    Ok(cycles)
}

pub fn rogue_writer_cycles(len: u64, cycles_per_item: u32) -> Result<u64, KernelError> {
    len.checked_mul(u64::from(cycles_per_item))
        .ok_or_else(|| arg_err("cycle count overflows"))
}

/// A descriptor bound to the argument values latched from the register file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelInstance {
    pub descriptor: KernelDescriptor,
    pub args: Vec<u64>,
}

impl KernelInstance {
    /// Latches one value per schema slot, truncated to the slot width.
    pub fn bind(descriptor: &KernelDescriptor, registers: &[u64]) -> Self {
        let args = descriptor
            .param_schema
            .iter()
            .zip(registers)
            .map(|(slot, &v)| {
                if slot.width >= 64 {
                    v
                } else {
                    v & ((1u64 << slot.width) - 1)
                }
            })
            .collect();
        Self {
            descriptor: descriptor.clone(),
            args,
        }
    }

    fn arg(&self, i: usize) -> Result<u64, KernelError> {
        self.args.get(i).copied().ok_or_else(|| {
            arg_err(format!(
                "{} expects argument {i}, schema has {}",
                self.descriptor.kind,
                self.args.len()
            ))
        })
    }

    fn cpi(&self) -> u32 {
        self.descriptor.static_cycles_per_item
    }

    /// Cycle count implied by the bound arguments, validated but not executed.
    pub fn cycles(&self) -> Result<u64, KernelError> {
        match self.descriptor.kind {
            KernelKind::VecAdd => {
                self.arg(2)?;
                vec_add_cycles(self.arg(3)?, self.cpi())
            }
            KernelKind::Matmul => {
                self.arg(2)?;
                matmul_cycles((self.arg(3)?, self.arg(4)?, self.arg(5)?), self.cpi())
            }
            KernelKind::Sobel => {
                self.arg(1)?;
                sobel_cycles(self.arg(2)?, self.arg(3)?, self.cpi())
            }
            KernelKind::RogueWriter => {
                self.arg(2)?;
                rogue_writer_cycles(self.arg(1)?, self.cpi())
            }
        }
    }

    /// Bytes moved between the kernel and DDR during one run.
    pub fn bytes_moved(&self) -> u64 {
        let a = |i| self.args.get(i).copied().unwrap_or(0);
        match self.descriptor.kind {
            KernelKind::VecAdd => a(3).saturating_mul(12),
            KernelKind::Matmul => a(3)
                .saturating_mul(a(4))
                .saturating_add(a(4).saturating_mul(a(5)))
                .saturating_add(a(3).saturating_mul(a(5)))
                .saturating_mul(4),
            KernelKind::Sobel => a(2).saturating_mul(a(3)).saturating_mul(2),
            KernelKind::RogueWriter => a(1),
        }
    }

    pub fn execute(&self, mem: &mut dyn KernelMemory) -> Result<u64, KernelError> {
        let cpi = self.cpi();
        match self.descriptor.kind {
            KernelKind::VecAdd => execute_vec_add(
                mem,
                self.arg(0)?,
                self.arg(1)?,
                self.arg(2)?,
                self.arg(3)?,
                cpi,
            ),
            KernelKind::Matmul => execute_matmul(
                mem,
                self.arg(0)?,
                self.arg(1)?,
                self.arg(2)?,
                (self.arg(3)?, self.arg(4)?, self.arg(5)?),
                cpi,
            ),
            KernelKind::Sobel => execute_sobel(
                mem,
                self.arg(0)?,
                self.arg(1)?,
                self.arg(2)?,
                self.arg(3)?,
                cpi,
            ),
            KernelKind::RogueWriter => {
                execute_rogue_writer(mem, self.arg(0)?, self.arg(1)?, self.arg(2)?, cpi)
            }
        }
    }
}

/// Flat byte array implementing [`KernelMemory`]; used by tests and benches.
#[derive(Debug, Clone, Default)]
pub struct FlatMemory(pub Vec<u8>);

impl KernelMemory for FlatMemory {
    fn read(&mut self, addr: u64, len: usize) -> Result<Vec<u8>, MemFault> {
        let fault = MemFault::OutOfRange {
            addr,
            len: len as u64,
        };
        let start = usize::try_from(addr).map_err(|_| fault)?;
        let end = start.checked_add(len).ok_or(fault)?;
        self.0.get(start..end).map(<[u8]>::to_vec).ok_or(fault)
    }

    fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), MemFault> {
        let fault = MemFault::OutOfRange {
            addr,
            len: data.len() as u64,
        };
        let start = usize::try_from(addr).map_err(|_| fault)?;
        let end = start.checked_add(data.len()).ok_or(fault)?;
        self.0.get_mut(start..end).ok_or(fault)?.copy_from_slice(data);
        Ok(())
    }
}
