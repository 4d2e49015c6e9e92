//! Runtime selection of wider vector instructions.

/// Runs `f` inside a function compiled for AVX2 when the CPU supports it.
///
/// Loops inlined into `f` are then vectorized with 256-bit registers. The
/// arithmetic is unchanged (no fused multiply-add), so results are
/// bit-identical to the baseline build.
#[inline(always)]
pub(crate) fn vectorized<R>(f: impl FnOnce() -> R) -> R {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            #[target_feature(enable = "avx2")]
            unsafe fn avx2<R>(f: impl FnOnce() -> R) -> R {
                f()
            }
            // SAFETY: the feature was detected above.
            return unsafe { avx2(f) };
        }
    }
    f()
}
