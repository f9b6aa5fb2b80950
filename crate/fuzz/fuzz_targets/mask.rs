#![no_main]

use libfuzzer_sys::fuzz_target;
use mamoc_core::masking::BlockMask;

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = BlockMask::decode(data) {
        assert_eq!(mask.masked_count(), mask.spec().masked_count());
        assert_eq!(BlockMask::decode(&mask.encode()).unwrap(), mask);
    }
});
