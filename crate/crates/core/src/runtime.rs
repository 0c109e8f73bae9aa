//! Process-level tuning for long training runs.

/// Asks the C allocator to keep freed memory mapped instead of returning it
/// to the kernel. Call once at process start. No-op on non-glibc targets.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
