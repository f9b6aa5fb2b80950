#![no_main]

use libfuzzer_sys::fuzz_target;
use mamoc_core::metrics::parse_record;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for line in text.lines() {
        if let Ok(fields) = parse_record(line) {
            assert!(fields.keys().all(|k| !k.contains(char::is_whitespace)));
        }
    }
});
