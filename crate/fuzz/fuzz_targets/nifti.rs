#![no_main]

use libfuzzer_sys::fuzz_target;
use mamoc_core::volume::{encode_nifti, load_nifti};

fuzz_target!(|data: &[u8]| {
    if let Ok(vol) = load_nifti(data) {
        // Whatever decodes must survive our own float32 writer.
        if let Ok(bytes) = encode_nifti(&vol) {
            let back = load_nifti(&bytes).expect("re-encoded volume decodes");
            assert_eq!(back.dims(), vol.dims());
            assert!(back.data().iter().zip(vol.data()).all(|(a, b)| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())));
        }
    }
});
