#![no_main]

use libfuzzer_sys::fuzz_target;
use mamoc_core::forge::{parse_manifest, render_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_manifest(text) {
        assert_eq!(parse_manifest(&render_manifest(&records)).unwrap(), records);
    }
});
