#![no_main]

use libfuzzer_sys::fuzz_target;
use mamoc_core::forge::MotionTrajectory;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = MotionTrajectory::from_json(text) {
        assert_eq!(MotionTrajectory::from_json(&t.to_json()).unwrap(), t);
        let _ = t.event_at(t.line_groups.saturating_sub(1));
    }
});
