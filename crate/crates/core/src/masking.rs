//! Exact-count block masking.
//!
//! A cubic scan of side `S` is tiled into `(S/B)^3` non-overlapping blocks.
//! A mask hides exactly `ceil((1 - p) * (S/B)^3)` of them, chosen as the
//! prefix of a seeded uniform permutation of block indices.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const MASK_MAGIC: &[u8; 5] = b"MMSK1";
const MASK_HEADER_LEN: usize = 5 + 4 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub side: usize,
    pub block: usize,
    pub keep_prob: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(side: usize, block: usize, keep_prob: f64, seed: u64) -> Result<Self> {
        let spec = Self { side, block, keep_prob, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || self.side == 0 || !self.side.is_multiple_of(self.block) {
            return Err(Error::IndivisibleBlock { side: self.side, block: self.block });
        }
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return Err(Error::BadProbability(self.keep_prob));
        }
        Ok(())
    }

    pub fn blocks_per_axis(&self) -> usize {
        self.side / self.block
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks_per_axis().pow(3)
    }

    /// Number of blocks hidden by every mask drawn from this spec.
    pub fn masked_count(&self) -> usize {
        masked_block_count(self.keep_prob, self.total_blocks())
    }
}

/// `ceil((1 - p) * total)` evaluated exactly on the binary value of `p`, as
/// `total - floor(total * p)`; the float product `(1 - p) * total` can land
/// one ulp past an integer and overcount.
pub fn masked_block_count(keep_prob: f64, total: usize) -> usize {
    total - kept_block_count(keep_prob.clamp(0.0, 1.0), total)
}

fn kept_block_count(p: f64, total: usize) -> usize {
    if p == 0.0 {
        return 0;
    }
    if p == 1.0 {
        return total;
    }
    // p = mantissa * 2^-shift with shift > 0 for p < 1
    let bits = p.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let (mantissa, shift) = if exp == 0 {
        (bits & ((1 << 52) - 1), 1074)
    } else {
        ((bits & ((1 << 52) - 1)) | (1 << 52), 1075 - exp)
    };
    if shift >= 128 {
        return 0;
    }
    ((total as u128 * mantissa as u128) >> shift) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    spec: MaskSpec,
    kept: Vec<bool>,
}

impl BlockMask {
    pub fn spec(&self) -> &MaskSpec {
        &self.spec
    }

    /// Keep flags in block-index order (x-fastest).
    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn blocks_per_axis(&self) -> usize {
        self.spec.blocks_per_axis()
    }

    pub fn masked_count(&self) -> usize {
        self.kept.iter().filter(|k| !**k).count()
    }

    pub fn kept_count(&self) -> usize {
        self.kept.len() - self.masked_count()
    }

    /// All blocks kept or all masked; used by tests and degenerate configs.
    pub fn uniform(side: usize, block: usize, keep: bool) -> Result<Self> {
        let spec = MaskSpec::new(side, block, if keep { 1.0 } else { 0.0 }, 0)?;
        Ok(Self { kept: vec![keep; spec.total_blocks()], spec })
    }

    /// Mask with explicit flags; the count must still match the `MaskSpec`.
    pub fn from_flags(spec: MaskSpec, kept: Vec<bool>) -> Result<Self> {
        spec.validate()?;
        if kept.len() != spec.total_blocks() {
            return Err(Error::DimMismatch(format!(
                "{} flags for {} blocks",
                kept.len(),
                spec.total_blocks()
            )));
        }
        let mask = Self { spec, kept };
        if mask.masked_count() != spec.masked_count() {
            return Err(Error::BadProbability(spec.keep_prob));
        }
        Ok(mask)
    }

    #[inline]
    pub fn keeps_voxel(&self, x: usize, y: usize, z: usize) -> bool {
        let b = self.spec.block;
        let n = self.blocks_per_axis();
        self.kept[x / b + n * (y / b + n * (z / b))]
    }

    fn check_volume(&self, vol: &Volume) -> Result<()> {
        match vol.cubic_side() {
            Some(s) if s == self.spec.side => Ok(()),
            _ => Err(Error::DimMismatch(format!(
                "volume {:?} vs mask side {}",
                vol.dims(),
                self.spec.side
            ))),
        }
    }

    /// Bit-packed serialization prefixed by `(S, B, p, seed)`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MASK_HEADER_LEN + self.kept.len().div_ceil(8));
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&(self.spec.side as u32).to_le_bytes());
        out.extend_from_slice(&(self.spec.block as u32).to_le_bytes());
        out.extend_from_slice(&self.spec.keep_prob.to_le_bytes());
        out.extend_from_slice(&self.spec.seed.to_le_bytes());
        for chunk in self.kept.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &k)| acc | ((k as u8) << i));
            out.push(byte);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MASK_HEADER_LEN {
            if !bytes.starts_with(&MASK_MAGIC[..bytes.len().min(5)]) {
                return Err(Error::BadMagic("expected MMSK1".into()));
            }
            return Err(Error::TruncatedStream { expected: MASK_HEADER_LEN, found: bytes.len() });
        }
        if &bytes[..5] != MASK_MAGIC {
            return Err(Error::BadMagic("expected MMSK1".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let u64_at = |o: usize| {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[o..o + 8]);
            u64::from_le_bytes(b)
        };
        let side = u32_at(5) as usize;
        let block = u32_at(9) as usize;
        let keep_prob = f64::from_bits(u64_at(13));
        let seed = u64_at(21);
        let spec = MaskSpec::new(side, block, keep_prob, seed)?;
        let total = spec
            .blocks_per_axis()
            .checked_pow(3)
            .ok_or_else(|| Error::DimMismatch("block count overflows".into()))?;
        let need = total.div_ceil(8);
        let body = &bytes[MASK_HEADER_LEN..];
        if body.len() < need {
            return Err(Error::TruncatedStream { expected: MASK_HEADER_LEN + need, found: bytes.len() });
        }
        if body.len() > need {
            return Err(Error::MalformedHeader(format!("{} trailing bytes", body.len() - need)));
        }
        let kept = (0..total).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect();
        Self::from_flags(spec, kept)
    }
}

/// Draws a mask: a seeded Fisher-Yates permutation of block indices whose
/// first `masked_count` entries are hidden.
pub fn sample_block_mask(spec: &MaskSpec) -> Result<BlockMask> {
    spec.validate()?;
    let total = spec.total_blocks();
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let mut kept = vec![true; total];
    for &i in &order[..spec.masked_count()] {
        kept[i] = false;
    }
    Ok(BlockMask { spec: *spec, kept })
}

/// Zeroes every voxel inside a masked block.
pub fn apply_mask(vol: &Volume, mask: &BlockMask) -> Result<Volume> {
    mask.check_volume(vol)?;
    let s = mask.spec.side;
    Volume::from_fn(vol.dims(), vol.spacing(), |x, y, z| {
        if mask.keeps_voxel(x, y, z) {
            vol.data()[x + s * (y + s * z)]
        } else {
            0.0
        }
    })
}

/// Voxel-level keep indicator: 1 on kept voxels, 0 on masked ones.
pub fn mask_to_voxel_grid(mask: &BlockMask, side: usize) -> Result<Volume> {
    if side != mask.spec.side {
        return Err(Error::DimMismatch(format!("side {side} vs mask side {}", mask.spec.side)));
    }
    Volume::from_fn([side; 3], [1.0; 3], |x, y, z| if mask.keeps_voxel(x, y, z) { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn masked_counts_match_ceiling() {
        let s = MaskSpec::new(256, 16, 0.6, 1).unwrap();
        assert_eq!(s.masked_count(), 1639);
        assert_eq!(sample_block_mask(&s).unwrap().masked_count(), 1639);
        let s = MaskSpec::new(32, 4, 1.0, 1).unwrap();
        assert_eq!(sample_block_mask(&s).unwrap().masked_count(), 0);
        let s = MaskSpec::new(32, 4, 0.7, 9).unwrap();
        assert_eq!(sample_block_mask(&s).unwrap().masked_count(), 154);
        let s = MaskSpec::new(8, 2, 0.0, 9).unwrap();
        assert_eq!(sample_block_mask(&s).unwrap().masked_count(), 64);
    }

    #[test]
    fn counts_use_the_binary_value_of_p() {
        // 0.3 is stored just below 3/10, so 1000 * p floors to 299.
        assert_eq!(masked_block_count(0.3, 1000), 701);
        assert_eq!(masked_block_count(0.5, 1000), 500);
        assert_eq!(masked_block_count(0.125, 8), 7);
        assert_eq!(masked_block_count(f64::MIN_POSITIVE, 4096), 4096);
        assert_eq!(masked_block_count(1.0 - f64::EPSILON / 2.0, 4096), 1);
    }

    #[test]
    fn spec_errors() {
        assert!(matches!(MaskSpec::new(10, 4, 0.5, 0), Err(Error::IndivisibleBlock { .. })));
        assert!(matches!(MaskSpec::new(8, 0, 0.5, 0), Err(Error::IndivisibleBlock { .. })));
        assert!(matches!(MaskSpec::new(8, 4, 1.5, 0), Err(Error::BadProbability(_))));
        assert!(matches!(MaskSpec::new(8, 4, f64::NAN, 0), Err(Error::BadProbability(_))));
    }

    #[test]
    fn apply_identity_annihilation_and_single_block() {
        let vol = Volume::from_fn([8; 3], [1.0; 3], |x, y, z| (x + y * z) as f32 + 1.0).unwrap();
        let all = BlockMask::uniform(8, 2, true).unwrap();
        assert_eq!(apply_mask(&vol, &all).unwrap(), vol);
        let none = BlockMask::uniform(8, 2, false).unwrap();
        assert!(apply_mask(&vol, &none).unwrap().data().iter().all(|&v| v == 0.0));

        let ones = Volume::filled([8; 3], 1.0).unwrap();
        let spec = MaskSpec { side: 8, block: 2, keep_prob: 1.0 - 1.0 / 64.0, seed: 4 };
        let one_masked = sample_block_mask(&spec).unwrap();
        assert_eq!(one_masked.masked_count(), 1);
        let total: f32 = apply_mask(&ones, &one_masked).unwrap().data().iter().sum();
        assert_eq!(total, 512.0 - 8.0);

        let wrong = Volume::zeros([4; 3]).unwrap();
        assert!(matches!(apply_mask(&wrong, &all), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn grid_counts_and_errors() {
        let all = BlockMask::uniform(8, 4, true).unwrap();
        assert!(mask_to_voxel_grid(&all, 8).unwrap().data().iter().all(|&v| v == 1.0));
        let none = BlockMask::uniform(8, 4, false).unwrap();
        assert!(mask_to_voxel_grid(&none, 8).unwrap().data().iter().all(|&v| v == 0.0));
        let m = sample_block_mask(&MaskSpec::new(16, 4, 0.3, 5).unwrap()).unwrap();
        let sum: f32 = mask_to_voxel_grid(&m, 16).unwrap().data().iter().sum();
        assert_eq!(sum as usize, m.kept_count() * 64);
        assert!(mask_to_voxel_grid(&m, 8).is_err());
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let m = sample_block_mask(&MaskSpec::new(16, 2, 0.37, 77).unwrap()).unwrap();
        let bytes = m.encode();
        assert_eq!(BlockMask::decode(&bytes).unwrap(), m);
        assert!(matches!(BlockMask::decode(&bytes[..bytes.len() - 1]), Err(Error::TruncatedStream { .. })));
        assert!(matches!(BlockMask::decode(b"XXXXX0000000000000000000000000"), Err(Error::BadMagic(_))));
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(BlockMask::decode(&flipped).is_err());
    }

    #[test]
    fn block_selection_is_uniform() {
        // 64 blocks, 32 masked per draw; chi-square over 2000 seeds with
        // 63 degrees of freedom, 0.999 quantile ~ 103.4.
        let draws = 2000;
        let mut counts = [0usize; 64];
        for seed in 0..draws {
            let m = sample_block_mask(&MaskSpec::new(8, 2, 0.5, seed).unwrap()).unwrap();
            for (c, k) in counts.iter_mut().zip(m.kept()) {
                if !k {
                    *c += 1;
                }
            }
        }
        let expected = draws as f64 * 32.0 / 64.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 103.4, "chi2 = {chi2}");
        let a = sample_block_mask(&MaskSpec::new(8, 2, 0.5, 1).unwrap()).unwrap();
        let b = sample_block_mask(&MaskSpec::new(8, 2, 0.5, 2).unwrap()).unwrap();
        assert_ne!(a, b);
    }

    proptest! {
        #[test]
        fn apply_is_idempotent_and_a_product(seed in any::<u64>(), p in 0.0f64..=1.0) {
            let vol = Volume::from_fn([8; 3], [1.0; 3], |x, y, z| (x * 7 + y * 3 + z) as f32 - 20.0).unwrap();
            let m = sample_block_mask(&MaskSpec::new(8, 2, p, seed).unwrap()).unwrap();
            let once = apply_mask(&vol, &m).unwrap();
            prop_assert_eq!(&apply_mask(&once, &m).unwrap(), &once);
            let grid = mask_to_voxel_grid(&m, 8).unwrap();
            let product: Vec<f32> = vol.data().iter().zip(grid.data()).map(|(a, b)| a * b).collect();
            prop_assert_eq!(once.data(), &product[..]);
            prop_assert_eq!(sample_block_mask(&m.spec).unwrap(), m);
        }
    }
}
