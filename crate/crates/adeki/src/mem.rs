//! Explicit byte accounting for the large buffers the gradient engine
//! allocates. The meter is fed by the code paths that create checkpoint and
//! adjoint storage, so "peak" means the high-water mark of tracked buffers,
//! not of the whole process. Benchmarks take a mark after the forward pass
//! and read the additional peak the reverse sweep adds on top of it.

use std::sync::atomic::{AtomicUsize, Ordering};

#[derive(Debug, Default)]
pub struct AllocMeter {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl AllocMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, bytes: usize) {
        let live = self.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(live, Ordering::SeqCst);
    }

    pub fn free(&self, bytes: usize) {
        let prev = self.live.fetch_sub(bytes, Ordering::SeqCst);
        debug_assert!(prev >= bytes, "freed more bytes than were tracked");
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Reset the peak to the current live total and return that total.
    /// `peak() - mark` afterwards is the additional high water since the mark.
    pub fn mark(&self) -> usize {
        let live = self.live();
        self.peak.store(live, Ordering::SeqCst);
        live
    }

    pub fn peak_above(&self, mark: usize) -> usize {
        self.peak().saturating_sub(mark)
    }

    /// Track `bytes` until the returned guard drops.
    pub fn scoped(&self, bytes: usize) -> ScopedAlloc<'_> {
        self.alloc(bytes);
        ScopedAlloc { meter: self, bytes }
    }
}

pub struct ScopedAlloc<'a> {
    meter: &'a AllocMeter,
    bytes: usize,
}

impl Drop for ScopedAlloc<'_> {
    fn drop(&mut self) {
        self.meter.free(self.bytes);
    }
}

/// Bytes held by an f64 buffer of the given element count.
pub fn f64_bytes(len: usize) -> usize {
    len * std::mem::size_of::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_is_a_high_water_mark() {
        let m = AllocMeter::new();
        m.alloc(100);
        m.alloc(50);
        m.free(120);
        m.alloc(10);
        assert_eq!(m.live(), 40);
        assert_eq!(m.peak(), 150, "peak should remember the 150-byte high point");
    }

    #[test]
    fn mark_measures_additional_memory_only() {
        let m = AllocMeter::new();
        m.alloc(1000);
        let mark = m.mark();
        assert_eq!(mark, 1000);
        m.alloc(300);
        m.free(300);
        m.alloc(200);
        assert_eq!(m.peak_above(mark), 300, "reverse-phase extra peak");
    }

    #[test]
    fn scoped_guard_frees_on_drop() {
        let m = AllocMeter::new();
        {
            let _g = m.scoped(64);
            assert_eq!(m.live(), 64);
            let _g2 = m.scoped(64);
            assert_eq!(m.live(), 128);
        }
        assert_eq!(m.live(), 0);
        assert_eq!(m.peak(), 128);
    }

    #[test]
    fn f64_bytes_counts_eight_per_element() {
        assert_eq!(f64_bytes(0), 0);
        assert_eq!(f64_bytes(7), 56);
    }
}
