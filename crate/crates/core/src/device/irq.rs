//! IRQ controller: per-PRR status bits funneled into one MSI line.

/// Status and mask registers plus the state of the shared MSI line.
///
/// `msi_pending` is set when a message is sent and cleared when the host starts
/// servicing it. A new message is only sent while none is pending, so several
/// completions can be covered by one MSI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrqBank {
    prr_count: usize,
    status: u8,
    mask: u8,
    msi_pending: bool,
}

impl IrqBank {
    /// All lines start masked; the broker unmasks regions as it hands them out.
    pub fn new(prr_count: usize) -> Self {
        assert!((1..=8).contains(&prr_count));
        let all = Self::all_bits(prr_count);
        Self {
            prr_count,
            status: 0,
            mask: all,
            msi_pending: false,
        }
    }

    fn all_bits(prr_count: usize) -> u8 {
        ((1u16 << prr_count) - 1) as u8
    }

    pub fn valid_bits(&self) -> u8 {
        Self::all_bits(self.prr_count)
    }

    pub fn status(&self) -> u8 {
        self.status
    }

    pub fn mask(&self) -> u8 {
        self.mask
    }

    pub fn msi_pending(&self) -> bool {
        self.msi_pending
    }

    fn try_send(&mut self) -> bool {
        if !self.msi_pending && self.status & !self.mask != 0 {
            self.msi_pending = true;
            true
        } else {
            false
        }
    }

    /// Sets the status bit for `prr`. Returns true when an MSI is sent.
    pub fn raise(&mut self, prr: usize) -> bool {
        assert!(prr < self.prr_count);
        self.status |= 1 << prr;
        self.try_send()
    }

    /// Replaces the mask. Unmasking a bit with unacknowledged status re-sends.
    pub fn write_mask(&mut self, mask: u8) -> bool {
        self.mask = mask & self.valid_bits();
        self.try_send()
    }

    pub fn ack(&mut self, prr: usize) {
        assert!(prr < self.prr_count);
        self.status &= !(1 << prr);
    }

    /// The host has taken the message; a later raise may send another.
    pub fn begin_service(&mut self) {
        self.msi_pending = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_unmasked_completion_sends_once() {
        let mut irq = IrqBank::new(4);
        irq.write_mask(0);
        assert!(irq.raise(2));
        assert_eq!(irq.status(), 0b100);
        assert!(!irq.raise(2));
    }

    #[test]
    fn one_msi_covers_two_sources() {
        let mut irq = IrqBank::new(4);
        irq.write_mask(0);
        assert!(irq.raise(1));
        assert!(!irq.raise(3));
        assert_eq!(irq.status(), 0b1010);
    }

    #[test]
    fn masked_completion_fires_on_unmask() {
        let mut irq = IrqBank::new(4);
        irq.write_mask(0b0001);
        assert!(!irq.raise(0));
        assert_eq!(irq.status(), 0b0001);
        assert!(irq.write_mask(0));
    }

    #[test]
    fn mask_bits_above_region_count_are_dropped() {
        let mut irq = IrqBank::new(3);
        irq.write_mask(0xff);
        assert_eq!(irq.mask(), 0b111);
    }
}
