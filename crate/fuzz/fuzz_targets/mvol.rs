#![no_main]

use libfuzzer_sys::fuzz_target;
use mamoc_core::volume::{decode_volume, encode_volume};

fuzz_target!(|data: &[u8]| {
    if let Ok(vol) = decode_volume(data) {
        let again = decode_volume(&encode_volume(&vol)).expect("round trip");
        assert_eq!(encode_volume(&again), encode_volume(&vol));
    }
});
