//! Golden NIfTI-1 files written by nibabel (see tests/golden/make_golden.py).

use std::path::PathBuf;

use mamoc_core::volume::{load_nifti, load_nifti_path};
use mamoc_core::Error;

const DIMS: [usize; 3] = [3, 4, 5];
const SPACING: [f64; 3] = [1.5, 2.0, 2.5];

#[derive(Clone, Copy, PartialEq)]
enum Raw {
    U8,
    I16,
    F32,
    F64,
}

fn raw(kind: Raw, r: f64) -> f64 {
    match kind {
        Raw::U8 => r,
        Raw::I16 => r * 100.0 - 3000.0,
        Raw::F32 => r * 0.25 - 5.0,
        Raw::F64 => r / 3.0,
    }
}

// file, stored type, (slope, inter) applied by the reader
const CASES: &[(&str, Raw, Option<(f64, f64)>)] = &[
    ("u8_le.nii", Raw::U8, None),
    ("u8_be.nii", Raw::U8, None),
    ("i16_le.nii", Raw::I16, None),
    ("i16_be.nii", Raw::I16, None),
    ("f32_le.nii", Raw::F32, None),
    ("f32_be.nii", Raw::F32, None),
    ("f64_le.nii", Raw::F64, None),
    ("f64_be.nii", Raw::F64, None),
    ("u8_scaled_le.nii", Raw::U8, Some((0.5, -3.0))),
    ("i16_scaled_be.nii", Raw::I16, Some((2.0, 10.0))),
    ("f32_slope0_le.nii", Raw::F32, None),
    ("f64_scaled_be.nii", Raw::F64, Some((-1.25, 0.5))),
    ("f32_le_gz.nii.gz", Raw::F32, None),
    ("i16_scaled_be_gz.nii.gz", Raw::I16, Some((2.0, 10.0))),
];

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn expected(kind: Raw, scaling: Option<(f64, f64)>) -> Vec<f32> {
    let mut out = Vec::new();
    for z in 0..DIMS[2] {
        for y in 0..DIMS[1] {
            for x in 0..DIMS[0] {
                let mut v = raw(kind, (x + 3 * y + 12 * z) as f64);
                if kind == Raw::F32 {
                    v = v as f32 as f64;
                }
                if let Some((s, i)) = scaling {
                    v = s * v + i;
                }
                out.push(v as f32);
            }
        }
    }
    out
}

#[test]
fn every_golden_file_decodes_exactly() {
    for &(name, kind, scaling) in CASES {
        let v = load_nifti_path(golden(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(v.dims(), DIMS, "{name}");
        assert_eq!(v.spacing(), SPACING, "{name}");
        let want = expected(kind, scaling);
        for (i, (a, b)) in v.data().iter().zip(&want).enumerate() {
            assert_eq!(a.to_bits(), b.to_bits(), "{name} voxel {i}: {a} vs {b}");
        }
    }
}

#[test]
fn byte_orders_agree() {
    for (le, be) in [("u8_le.nii", "u8_be.nii"), ("i16_le.nii", "i16_be.nii"), ("f32_le.nii", "f32_be.nii"), ("f64_le.nii", "f64_be.nii")] {
        assert_eq!(load_nifti_path(golden(le)).unwrap(), load_nifti_path(golden(be)).unwrap());
    }
}

#[test]
fn gzip_matches_plain() {
    assert_eq!(load_nifti_path(golden("f32_le_gz.nii.gz")).unwrap(), load_nifti_path(golden("f32_le.nii")).unwrap());
    assert_eq!(
        load_nifti_path(golden("i16_scaled_be_gz.nii.gz")).unwrap(),
        load_nifti_path(golden("i16_scaled_be.nii")).unwrap()
    );
}

#[test]
fn bad_magic_is_rejected() {
    let mut bytes = std::fs::read(golden("f32_le.nii")).unwrap();
    bytes[344..348].copy_from_slice(b"nope");
    assert!(matches!(load_nifti(&bytes), Err(Error::BadMagic(_))));
    let mut bytes = std::fs::read(golden("f32_be.nii")).unwrap();
    bytes[..4].copy_from_slice(&[0, 0, 0, 0]);
    assert!(matches!(load_nifti(&bytes), Err(Error::BadMagic(_))));
}

#[test]
fn every_truncation_is_reported() {
    for name in ["f64_be.nii", "i16_le.nii"] {
        let bytes = std::fs::read(golden(name)).unwrap();
        for cut in [0, 10, 347, 348, 352, bytes.len() - 1] {
            let err = load_nifti(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::TruncatedStream { .. }), "{name} cut at {cut}: {err}");
        }
    }
    let gz = std::fs::read(golden("f32_le_gz.nii.gz")).unwrap();
    for cut in [4, gz.len() / 2, gz.len() - 9] {
        let err = load_nifti(&gz[..cut]).unwrap_err();
        assert!(matches!(err, Error::TruncatedStream { .. }), "gzip cut at {cut}: {err}");
    }
}
