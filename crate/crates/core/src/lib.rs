//! Discrete-event model of an FPGA shared between virtual machines through
//! partial reconfiguration.
//!
//! The stack, bottom up:
//!
//! - [`bitstream`]: the partial bitfile format and the control block's checks.
//! - [`device`]: the board. PRR slots with freeze, the IRQ controller with a
//!   single MSI line, DDR, DMA and the virtual clock.
//! - [`kernels`]: functional and timing models of the hosted accelerators.
//! - [`mmu`]: the broker's segment allocator over device DDR.
//! - [`vmm`]: the broker. Sessions, mediated memory and reprogram calls,
//!   interrupt routing, the trace, and the guest wire protocol.
//! - [`guest`]: the guest-side MMD library and a small runtime on top of it.
//! - [`bench`]: scenario files, the scenario runner, microbenchmarks and attacks.

pub mod bench;
pub mod bitstream;
pub mod device;
pub mod guest;
pub mod kernels;
pub mod mmu;
pub mod vmm;
