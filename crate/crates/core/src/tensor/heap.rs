//! Keeps freed tensor buffers inside the process.
//!
//! glibc serves large allocations with fresh `mmap` regions and returns them
//! on free, so every training step would re-fault tens of megabytes of
//! im2col and gradient buffers. Routing everything through the main heap and
//! disabling trimming lets those pages be reused.

use std::sync::Once;

static TUNE: Once = Once::new();

pub(crate) fn retain_freed_memory() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator tunables; it is called once,
        // before the engine allocates its working buffers.
        unsafe {
            libc::mallopt(libc::M_MMAP_MAX, 0);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        }
    });
}
