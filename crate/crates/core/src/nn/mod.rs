//! Minimal differentiable tensor engine used by the network and the losses.

pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{Grads, Graph, Var};
pub use kernels::{ConvGeom, Kernel2d};
pub use layers::{Conv2d, ConvAct, PRelu};
pub use optim::{clip_global_norm, Adam, CosineSchedule};
pub use params::{Ctx, ParamId, ParamStore};

/// Sets flush-to-zero and denormals-are-zero for the calling thread.
/// Saturated sigmoid gates otherwise fill the backward pass with subnormal
/// floats, which slows x86 arithmetic by orders of magnitude.
pub fn flush_denormals() {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    unsafe {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}
