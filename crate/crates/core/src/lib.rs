//! Train a small convolutional network on MNIST, convert it to a spiking
//! network of integrate-and-fire neurons, and simulate it.

pub mod ann;
pub mod container;
pub mod convert;
pub mod dataset;
pub mod encoding;
pub mod harness;
pub mod kv;
pub mod neuron;
pub mod sim;
pub mod tensor;

/// Keep freed memory in the process heap instead of returning it to the
/// kernel. Training allocates and drops multi-megabyte activations every
/// step; with glibc's defaults each of those round-trips through mmap and
/// the resulting page faults dominate run time. Idempotent; a no-op on other
/// allocators.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        // M_TRIM_THRESHOLD = -1, M_MMAP_THRESHOLD = -3.
        libc::mallopt(-1, 1 << 30);
        libc::mallopt(-3, 1 << 30);
    }
}
