//! Scalar abstraction shared by the 32-bit training path and the 64-bit
//! gradient-checking path.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `exp`; the 32-bit form is a branch-free polynomial that vectorizes.
    fn fast_exp(self) -> Self;

    fn fast_tanh(self) -> Self;
}

/// Cephes-style single-precision exponential, within a few ulp of `expf`
/// over the clamped range.
#[inline]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0;
    let x = x.max(-87.3).min(88.3);
    let t = x * LOG2E + ROUND;
    let k = t - ROUND;
    let r = x - k * LN2_HI - k * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    let y = p * r * r + r + 1.0;
    // The low mantissa bits of `t` hold k; rebias them into an exponent
    // without a float-to-int conversion so the loop stays vectorized.
    y * f32::from_bits(t.to_bits().wrapping_sub(0x4B40_0000 - 127) << 23)
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn fast_exp(self) -> Self {
        exp_f32(self)
    }

    #[inline]
    fn fast_tanh(self) -> Self {
        let x = if self < -9.0 { -9.0 } else if self > 9.0 { 9.0 } else { self };
        let e = exp_f32(2.0 * x);
        (e - 1.0) / (e + 1.0)
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn fast_exp(self) -> Self {
        self.exp()
    }

    #[inline]
    fn fast_tanh(self) -> Self {
        self.tanh()
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_tracks_std() {
        let mut worst = 0.0f64;
        for i in -87000..88000 {
            let x = i as f32 * 1e-3;
            let e = (x as f64).exp();
            worst = worst.max(((exp_f32(x) as f64) - e).abs() / e);
        }
        assert!(worst < 4e-7, "{worst}");
        assert_eq!(exp_f32(0.0), 1.0);
        assert!(exp_f32(-1e4) < 1e-37);
    }

    #[test]
    fn fast_tanh_tracks_std() {
        for i in -2000..2000 {
            let x = i as f32 * 5e-3;
            assert!((x.fast_tanh() - x.tanh()).abs() < 3e-7, "{x}");
        }
        assert_eq!(100.0f32.fast_tanh(), 1.0);
    }

    #[test]
    fn seeds_mix() {
        assert_ne!(mix_seed(1, 0), mix_seed(1, 1));
        assert_ne!(mix_seed(0, 1), mix_seed(1, 0));
    }
}
