use mamoc_core::masking::{apply_mask, mask_to_voxel_grid, masked_block_count, sample_block_mask, BlockMask, MaskSpec};
use mamoc_core::volume::Volume;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use proptest::prelude::*;

/// `ceil((1 - p) * n)` in exact rational arithmetic.
fn oracle(p: f64, n: usize) -> usize {
    let p = BigRational::from_float(p).unwrap();
    let v = (BigRational::one() - p) * BigRational::from_integer(n.into());
    v.ceil().to_integer().to_usize().unwrap()
}

fn sides_and_blocks() -> impl Strategy<Value = (usize, usize)> {
    prop_oneof![Just(8usize), Just(16), Just(32)].prop_flat_map(|s| {
        let divisors: Vec<usize> = (1..=s).filter(|b| s % b == 0).collect();
        (Just(s), proptest::sample::select(divisors))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn masked_count_is_the_exact_ceiling((s, b) in sides_and_blocks(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let spec = MaskSpec::new(s, b, p, seed).unwrap();
        let n = (s / b).pow(3);
        prop_assert_eq!(spec.masked_count(), oracle(p, n));
        let m = sample_block_mask(&spec).unwrap();
        prop_assert_eq!(m.masked_count(), oracle(p, n));
        prop_assert_eq!(m.kept().iter().filter(|k| !**k).count(), m.masked_count());
    }

    #[test]
    fn encoding_round_trips((s, b) in sides_and_blocks(), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let m = sample_block_mask(&MaskSpec::new(s, b, p, seed).unwrap()).unwrap();
        prop_assert_eq!(BlockMask::decode(&m.encode()).unwrap(), m);
    }

    #[test]
    fn masked_voxels_are_zero_and_kept_voxels_untouched(p in 0.0f64..=1.0, seed in any::<u64>()) {
        let vol = Volume::from_fn([16; 3], [1.0; 3], |x, y, z| 1.0 + (x + 16 * y + 256 * z) as f32).unwrap();
        let m = sample_block_mask(&MaskSpec::new(16, 4, p, seed).unwrap()).unwrap();
        let out = apply_mask(&vol, &m).unwrap();
        let grid = mask_to_voxel_grid(&m, 16).unwrap();
        for ((o, v), k) in out.data().iter().zip(vol.data()).zip(grid.data()) {
            prop_assert_eq!(*o, if *k == 1.0 { *v } else { 0.0 });
        }
        let zeros = out.data().iter().filter(|v| **v == 0.0).count();
        prop_assert_eq!(zeros, m.masked_count() * 64);
    }
}

#[test]
fn edge_probabilities() {
    for total in [1usize, 8, 64, 512, 1000, 4096, 32768] {
        assert_eq!(masked_block_count(0.0, total), total);
        assert_eq!(masked_block_count(1.0, total), 0);
        for p in [0.1, 0.3, 0.6, 0.7, 0.9, 1.0 / 3.0, 0.5 + f64::EPSILON] {
            assert_eq!(masked_block_count(p, total), oracle(p, total), "p={p} n={total}");
        }
    }
}
