//! Volumes, labels, subject bookkeeping and the scalar preprocessing steps
//! applied before training: least-squares intensity normalization, trilinear
//! resampling and the subject-level train/test split.

mod mvol;
mod nifti;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mvol::{decode_volume, encode_volume, load_labels, load_volume, save_labels, save_volume, MVOL_MAGIC};
pub use nifti::{encode_nifti, load_nifti, load_nifti_path, NiftiDatatype, NiftiHeader, NIFTI_HEADER_SIZE};

/// Dense 3D scalar grid, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

fn check_dims(dims: [usize; 3]) -> Result<usize> {
    if dims.contains(&0) {
        return Err(Error::NonPositiveDim(format!("{dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::NonPositiveDim(format!("{dims:?} overflows")))
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::NonPositiveDim(format!("spacing {spacing:?}")))
    }
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let len = check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != len {
            return Err(Error::DimMismatch(format!(
                "{} values for dims {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Result<Self> {
        let len = check_dims(dims)?;
        Self::new(dims, [1.0; 3], vec![value; len])
    }

    pub fn zeros(dims: [usize; 3]) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    pub fn cube(side: usize, data: Vec<f32>) -> Result<Self> {
        Self::new([side; 3], [1.0; 3], data)
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let len = check_dims(dims)?;
        let mut data = Vec::with_capacity(len);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Side length if the volume is a cube.
    pub fn cubic_side(&self) -> Option<usize> {
        let [a, b, c] = self.dims;
        (a == b && b == c).then_some(a)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    /// Elementwise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Volume, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.require_same_dims(other)?;
        Self::new(
            self.dims,
            self.spacing,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn require_same_dims(&self, other: &Volume) -> Result<()> {
        if self.dims == other.dims {
            Ok(())
        } else {
            Err(Error::DimMismatch(format!("{:?} vs {:?}", self.dims, other.dims)))
        }
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

/// Integer class labels on a voxel grid, 0 = background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    labels: Vec<u32>,
    spacing_bits: [u64; 3],
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u32>) -> Result<Self> {
        let len = check_dims(dims)?;
        check_spacing(spacing)?;
        if labels.len() != len {
            return Err(Error::DimMismatch(format!(
                "{} labels for dims {dims:?}",
                labels.len()
            )));
        }
        Ok(Self {
            dims,
            labels,
            spacing_bits: spacing.map(f64::to_bits),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing_bits.map(f64::from_bits)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Boolean indicator of one class.
    pub fn class_mask(&self, class: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    pub fn count(&self, class: u32) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing(),
            data: self.labels.iter().map(|&l| l as f32).collect(),
        }
    }

    /// Inverse of [`LabelVolume::to_volume`]; every value must be a
    /// non-negative integer.
    pub fn from_volume(vol: &Volume) -> Result<Self> {
        let labels = vol
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 && v.fract() == 0.0 && v <= 16_777_216.0 {
                    Ok(v as u32)
                } else {
                    Err(Error::MalformedHeader(format!("voxel {i} holds non-label value {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vol.dims(), vol.spacing(), labels)
    }
}

/// Which acquisition of a subject a scan is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanKind {
    Clean,
    Moderate,
    Heavy,
}

impl ScanKind {
    pub const ALL: [ScanKind; 3] = [ScanKind::Clean, ScanKind::Moderate, ScanKind::Heavy];

    pub fn as_str(self) -> &'static str {
        match self {
            ScanKind::Clean => "clean",
            ScanKind::Moderate => "moderate",
            ScanKind::Heavy => "heavy",
        }
    }
}

impl fmt::Display for ScanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(ScanKind::Clean),
            "moderate" => Ok(ScanKind::Moderate),
            "heavy" => Ok(ScanKind::Heavy),
            other => Err(Error::BadSeverity(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

/// One subject's scans, keyed by acquisition.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub scans: BTreeMap<ScanKind, Volume>,
    pub labels: Option<LabelVolume>,
    pub split: Split,
}

impl SubjectRecord {
    pub fn clean(&self) -> Result<&Volume> {
        self.scans
            .get(&ScanKind::Clean)
            .ok_or_else(|| Error::MissingCleanTarget(self.subject_id.clone()))
    }

    /// Motion-affected scans present for this subject.
    pub fn affected(&self) -> impl Iterator<Item = (ScanKind, &Volume)> {
        self.scans
            .iter()
            .filter(|(k, _)| **k != ScanKind::Clean)
            .map(|(k, v)| (*k, v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn split_of(&self, id: &str) -> Split {
        if self.train.iter().any(|t| t == id) {
            Split::Train
        } else if self.test.iter().any(|t| t == id) {
            Split::Test
        } else {
            Split::Unassigned
        }
    }
}

fn sum_products(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Scale factor minimizing `||alpha * vol - reference||^2`, or `None` when
/// `vol` is identically zero.
pub fn least_squares_scale(vol: &Volume, reference: &Volume) -> Result<Option<f64>> {
    vol.require_same_dims(reference)?;
    let energy = sum_products(vol.data(), vol.data());
    if energy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sum_products(vol.data(), reference.data()) / energy))
}

/// Rescales `vol` by the least-squares factor against `reference`.
pub fn normalize_least_squares(vol: &Volume, reference: &Volume) -> Result<Volume> {
    match least_squares_scale(vol, reference)? {
        None => Ok(vol.clone()),
        Some(alpha) => vol.map(|v| (alpha * v as f64) as f32),
    }
}

/// Source coordinate of output sample `i` when the first and last samples of
/// both grids coincide.
#[inline]
fn aligned_coordinate(i: usize, n_out: usize, n_in: usize) -> f64 {
    if n_out == 1 {
        (n_in as f64 - 1.0) / 2.0
    } else {
        i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
    }
}

#[inline]
fn lerp_axis(coord: f64, n: usize) -> (usize, usize, f64) {
    let lo = (coord.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, coord - lo as f64)
}

/// Trilinear resampling onto `target_dims` with corner-aligned grids.
pub fn resample_volume(vol: &Volume, target_dims: [usize; 3]) -> Result<Volume> {
    check_dims(target_dims)?;
    let src = vol.dims();
    if src == target_dims {
        return Ok(vol.clone());
    }
    let axes: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            (0..target_dims[a])
                .map(|i| lerp_axis(aligned_coordinate(i, target_dims[a], src[a]), src[a]))
                .collect()
        })
        .collect();
    let d = vol.data();
    let at = |x: usize, y: usize, z: usize| d[x + src[0] * (y + src[1] * z)] as f64;
    let mut out = Vec::with_capacity(target_dims.iter().product());
    for &(z0, z1, wz) in &axes[2] {
        for &(y0, y1, wy) in &axes[1] {
            for &(x0, x1, wx) in &axes[0] {
                let c00 = at(x0, y0, z0) * (1.0 - wx) + at(x1, y0, z0) * wx;
                let c10 = at(x0, y1, z0) * (1.0 - wx) + at(x1, y1, z0) * wx;
                let c01 = at(x0, y0, z1) * (1.0 - wx) + at(x1, y0, z1) * wx;
                let c11 = at(x0, y1, z1) * (1.0 - wx) + at(x1, y1, z1) * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                out.push((c0 * (1.0 - wz) + c1 * wz) as f32);
            }
        }
    }
    let spacing = [0, 1, 2].map(|a| vol.spacing()[a] * src[a] as f64 / target_dims[a] as f64);
    Volume::new(target_dims, spacing, out)
}

/// Seeded subject-level split. `train` receives `floor(fraction * n)`
/// subjects, clamped so both sides are nonempty.
pub fn split_by_subject(subject_ids: &[String], train_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if subject_ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::DegenerateFraction(train_fraction));
    }
    let mut ids: Vec<String> = subject_ids.to_vec();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateSubject(w[0].clone()));
    }
    let n = ids.len();
    if n < 2 {
        return Err(Error::DegenerateFraction(train_fraction));
    }
    let n_train = ((train_fraction * n as f64).floor() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort();
    test.sort();
    Ok(DatasetSplit { train, test, seed })
}
