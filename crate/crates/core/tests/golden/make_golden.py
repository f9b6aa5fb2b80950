"""Regenerates the NIfTI-1 golden files with nibabel.

Every file holds the same 3x4x5 grid with raw value r = x + 3y + 12z at
voxel (x, y, z), stored as the datatype's encoding of `raw(r)` below.
Scaled files have scl_slope / scl_inter patched in after writing so that
nibabel does not rescale the payload. nibabel reads every file back and the
decoded values are checked against the same formulas nifti_golden.rs uses.
"""

import gzip
import struct
from pathlib import Path

import nibabel as nib
import numpy as np

HERE = Path(__file__).parent
DIMS = (3, 4, 5)
SPACING = (1.5, 2.0, 2.5)

RAW = {
    "uint8": lambda r: r,
    "int16": lambda r: r * 100 - 3000,
    "float32": lambda r: r * 0.25 - 5.0,
    "float64": lambda r: r / 3.0,
}

# name, dtype, endianness, slope, inter, gzip
CASES = [
    ("u8_le", "uint8", "<", None, None, False),
    ("u8_be", "uint8", ">", None, None, False),
    ("i16_le", "int16", "<", None, None, False),
    ("i16_be", "int16", ">", None, None, False),
    ("f32_le", "float32", "<", None, None, False),
    ("f32_be", "float32", ">", None, None, False),
    ("f64_le", "float64", "<", None, None, False),
    ("f64_be", "float64", ">", None, None, False),
    ("u8_scaled_le", "uint8", "<", 0.5, -3.0, False),
    ("i16_scaled_be", "int16", ">", 2.0, 10.0, False),
    ("f32_slope0_le", "float32", "<", 0.0, 7.0, False),
    ("f64_scaled_be", "float64", ">", -1.25, 0.5, False),
    ("f32_le_gz", "float32", "<", None, None, True),
    ("i16_scaled_be_gz", "int16", ">", 2.0, 10.0, True),
]


def grid():
    x, y, z = np.meshgrid(*(np.arange(d) for d in DIMS), indexing="ij")
    return (x + 3 * y + 12 * z).astype(np.float64)


def write(name, dtype, endian, slope, inter, gz):
    data = RAW[dtype](grid()).astype(np.dtype(dtype).newbyteorder(endian))
    hdr = nib.Nifti1Header(endianness=endian)
    hdr.set_data_dtype(data.dtype)
    img = nib.Nifti1Image(data, np.diag([*SPACING, 1.0]), header=hdr)
    img.header.set_zooms(SPACING)
    img.header["vox_offset"] = 352
    raw = bytearray(img.header.binaryblock)
    raw += b"\0" * (int(img.header["vox_offset"]) - len(raw))
    raw += data.tobytes(order="F")
    if slope is not None:
        struct.pack_into(endian + "ff", raw, 112, slope, inter)
    path = HERE / (name + (".nii.gz" if gz else ".nii"))
    payload = gzip.compress(bytes(raw), mtime=0) if gz else bytes(raw)
    path.write_bytes(payload)

    back = nib.load(path)
    expected = RAW[dtype](grid())
    if slope not in (None, 0.0):
        expected = slope * expected + inter
    assert back.shape == DIMS
    assert np.array_equal(np.asarray(back.dataobj, dtype=np.float64), expected), name


if __name__ == "__main__":
    for case in CASES:
        write(*case)
    print(f"wrote {len(CASES)} files")
