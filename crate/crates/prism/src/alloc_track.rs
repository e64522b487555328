//! Byte-counting global allocator, used to measure transient allocation of
//! the attention kernels.
//!
//! The library never installs it; a binary opts in with
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: prism::alloc_track::CountingAlloc = prism::alloc_track::CountingAlloc;
//! ```
//!
//! Without that, the counters stay at zero and the probes report zero.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering::Relaxed};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let cur = CURRENT.fetch_add(layout.size(), Relaxed) + layout.size();
            PEAK.fetch_max(cur, Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            let old = layout.size();
            if new_size >= old {
                let cur = CURRENT.fetch_add(new_size - old, Relaxed) + (new_size - old);
                PEAK.fetch_max(cur, Relaxed);
            } else {
                CURRENT.fetch_sub(old - new_size, Relaxed);
            }
        }
        p
    }
}

/// Live bytes right now (zero when the allocator is not installed).
pub fn current_bytes() -> usize {
    CURRENT.load(Relaxed)
}

/// Reset the peak to the current level and return that level, the baseline
/// for a transient measurement.
pub fn reset_transient() -> usize {
    let cur = CURRENT.load(Relaxed);
    PEAK.store(cur, Relaxed);
    cur
}

/// Peak bytes observed above `base` since the matching reset.
pub fn transient_peak(base: usize) -> usize {
    PEAK.load(Relaxed).saturating_sub(base)
}
