pub mod attention;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod interpret;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Ask glibc to keep freed heap memory instead of returning it to the OS.
///
/// Training allocates and frees many multi-megabyte buffers per step; by
/// default each one is mapped fresh and page-faulted in again. No-op on other
/// platforms.
pub fn retain_heap_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 1 << 30);
    }
}
