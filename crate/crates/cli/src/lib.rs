//! Runners behind the `tilestream` command-line tool: streaming/conventional
//! equivalence checks, memory and timing benchmarks, and a small training
//! demo on synthetic images.

pub mod bench;
pub mod dataset;
pub mod equiv;
pub mod input;
pub mod train;

/// Process exit codes, one per failure class.
pub mod exit {
    pub const OK: i32 = 0;
    /// Malformed network, arguments or geometry.
    pub const SPEC: i32 = 2;
    /// Streamed and conventional results disagree, or an internal
    /// consistency check tripped.
    pub const EQUIVALENCE: i32 = 3;
    /// I/O or tensor-file problems.
    pub const RESOURCE: i32 = 4;
}

/// Keeps large freed buffers in the process for reuse. By default glibc
/// returns every allocation above 32 MB to the kernel on free, so each
/// large activation is paid for again in page faults; tile-sized and
/// image-sized tensors would then differ in cost for reasons unrelated to
/// the work done. No-op on other platforms.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tuning parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

/// Maps an error to its exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use tilestream::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) | E::Format(_) => exit::RESOURCE,
                E::Internal(_) | E::Placement(_) => exit::EQUIVALENCE,
                _ => exit::SPEC,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::RESOURCE;
        }
    }
    exit::SPEC
}
