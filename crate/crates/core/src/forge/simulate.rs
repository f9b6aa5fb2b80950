//! Retrospective rigid-motion corruption in k-space. The phase-encode axis
//! is y; lines are acquired from the most negative frequency upwards, so
//! the middle line groups carry the k-space center.

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::forge::trajectory::{MotionEvent, MotionTrajectory};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimulationReport {
    /// Largest relative gap between image-domain and k-space energy over the
    /// distinct poses.
    pub max_parseval_error: f64,
    pub poses: usize,
}

/// In-place unnormalized 3D DFT of a cubic grid, x-fastest.
pub fn fft3(data: &mut [Complex64], side: usize, direction: FftDirection) {
    let fft = FftPlanner::new().plan_fft(side, direction);
    let mut line = vec![Complex64::default(); side];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    for axis in 0..3 {
        let stride = side.pow(axis as u32);
        for base in 0..side * side {
            // Lines along the current axis start at every index whose
            // coordinate on that axis is zero.
            let start = match axis {
                0 => base * side,
                1 => base % side + (base / side) * side * side,
                _ => base,
            };
            for (k, v) in line.iter_mut().enumerate() {
                *v = data[start + k * stride];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for (k, v) in line.iter().enumerate() {
                data[start + k * stride] = *v;
            }
        }
    }
}

/// Frequency row acquired at position `j` of the centered line ordering.
pub fn acquired_row(j: usize, side: usize) -> usize {
    (j + side / 2) % side
}

/// Line group owning acquisition position `j`.
pub fn group_of(j: usize, side: usize, groups: usize) -> usize {
    j * groups / side
}

fn rotation_matrix(r: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = r[0].sin_cos();
    let (sy, cy) = r[1].sin_cos();
    let (sz, cz) = r[2].sin_cos();
    // Rz * Ry * Rx
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// The object after the event's motion: `out(p) = in(R^T (p - c - t) + c)`,
/// sampled trilinearly on the periodic grid the DFT assumes.
pub fn move_object(vol: &Volume, event: &MotionEvent) -> Result<Volume> {
    let s = vol.cubic_side().ok_or_else(|| Error::DimMismatch(format!("{:?} is not cubic", vol.dims())))?;
    if event.is_identity() {
        return Ok(vol.clone());
    }
    let r = rotation_matrix(event.rotation);
    let c = (s as f64 - 1.0) / 2.0;
    let n = s as f64;
    let d = vol.data();
    let wrap = |i: i64| i.rem_euclid(s as i64) as usize;
    Volume::from_fn([s; 3], vol.spacing(), |x, y, z| {
        let q = [x as f64 - c - event.translation[0], y as f64 - c - event.translation[1], z as f64 - c - event.translation[2]];
        let src: [f64; 3] = [0, 1, 2].map(|i| (r[0][i] * q[0] + r[1][i] * q[1] + r[2][i] * q[2] + c).rem_euclid(n));
        let f = src.map(f64::floor);
        let w = [0, 1, 2].map(|i| src[i] - f[i]);
        let b = f.map(|v| v as i64);
        let mut acc = 0.0;
        for corner in 0..8 {
            let o = [corner & 1, corner >> 1 & 1, corner >> 2 & 1];
            let weight: f64 = (0..3).map(|i| if o[i] == 1 { w[i] } else { 1.0 - w[i] }).product();
            if weight != 0.0 {
                let idx = wrap(b[0] + o[0] as i64) + s * (wrap(b[1] + o[1] as i64) + s * wrap(b[2] + o[2] as i64));
                acc += weight * d[idx] as f64;
            }
        }
        acc as f32
    })
}

pub fn simulate_motion(vol: &Volume, trajectory: &MotionTrajectory) -> Result<Volume> {
    Ok(simulate_motion_report(vol, trajectory)?.0)
}

/// Composes k-space from one moved copy per pose and returns the magnitude
/// of its inverse transform.
pub fn simulate_motion_report(vol: &Volume, trajectory: &MotionTrajectory) -> Result<(Volume, SimulationReport)> {
    let s = vol.cubic_side().ok_or_else(|| Error::DimMismatch(format!("{:?} is not cubic", vol.dims())))?;
    trajectory.check_structure()?;
    if trajectory.line_groups > s {
        return Err(Error::DimMismatch(format!("{} line groups for {s} phase-encode lines", trajectory.line_groups)));
    }
    let n = s * s * s;
    let mut composite = vec![Complex64::default(); n];
    let mut report = SimulationReport { poses: trajectory.events.len(), ..Default::default() };
    for (ei, event) in trajectory.events.iter().enumerate() {
        let moved = move_object(vol, event)?;
        let mut k: Vec<Complex64> = moved.data().iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
        let image_energy: f64 = k.iter().map(|v| v.norm_sqr()).sum();
        fft3(&mut k, s, FftDirection::Forward);
        let k_energy: f64 = k.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
        let gap = (k_energy - image_energy).abs() / image_energy.max(f64::MIN_POSITIVE);
        report.max_parseval_error = report.max_parseval_error.max(gap);
        for j in 0..s {
            if trajectory.event_at(group_of(j, s, trajectory.line_groups)) != ei {
                continue;
            }
            let ky = acquired_row(j, s);
            for z in 0..s {
                let row = s * (ky + s * z);
                composite[row..row + s].copy_from_slice(&k[row..row + s]);
            }
        }
    }
    fft3(&mut composite, s, FftDirection::Inverse);
    let out = composite.iter().map(|v| (v.norm() / n as f64) as f32).collect();
    Ok((Volume::new(vol.dims(), vol.spacing(), out)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(s: usize) -> Volume {
        let c = (s as f64 - 1.0) / 2.0;
        Volume::from_fn([s; 3], [1.0; 3], |x, y, z| {
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c * 0.8).powi(2) + (z as f64 - c).powi(2);
            ((-r2 / 18.0).exp() + 0.1 * ((x * 3 + y) % 4) as f64) as f32
        })
        .unwrap()
    }

    #[test]
    fn fft_round_trip_and_dc() {
        let v = blob(8);
        let mut k: Vec<Complex64> = v.data().iter().map(|&x| Complex64::new(x as f64, 0.0)).collect();
        fft3(&mut k, 8, FftDirection::Forward);
        let dc: f64 = v.data().iter().map(|&x| x as f64).sum();
        assert!((k[0].re - dc).abs() < 1e-9 && k[0].im.abs() < 1e-9);
        fft3(&mut k, 8, FftDirection::Inverse);
        for (a, b) in k.iter().zip(v.data()) {
            assert!((a.re / 512.0 - *b as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_trajectory_reproduces_input() {
        let v = blob(16);
        let (out, rep) = simulate_motion_report(&v, &MotionTrajectory::identity(8)).unwrap();
        let err = out.data().iter().zip(v.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-5, "{err}");
        assert!(rep.max_parseval_error < 1e-6);
    }

    #[test]
    fn integer_translation_is_a_circular_shift() {
        let v = blob(16);
        let ev = MotionEvent { start: 0, translation: [2.0, -3.0, 1.0], rotation: [0.0; 3] };
        let moved = move_object(&v, &ev).unwrap();
        for (x, y, z) in [(0, 0, 0), (5, 9, 14), (15, 2, 7)] {
            let src = v.get((x + 14) % 16, (y + 3) % 16, (z + 15) % 16);
            assert_eq!(moved.get(x, y, z), src);
        }
    }

    #[test]
    fn acquisition_order_is_centered() {
        assert_eq!((0..8).map(|j| acquired_row(j, 8)).collect::<Vec<_>>(), vec![4, 5, 6, 7, 0, 1, 2, 3]);
        assert_eq!((0..8).map(|j| group_of(j, 8, 3)).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1, 2, 2]);
    }

    #[test]
    fn rejects_bad_geometry() {
        let v = Volume::zeros([8, 8, 4]).unwrap();
        assert!(matches!(simulate_motion(&v, &MotionTrajectory::identity(2)), Err(Error::DimMismatch(_))));
        let v = blob(8);
        assert!(matches!(simulate_motion(&v, &MotionTrajectory::identity(9)), Err(Error::DimMismatch(_))));
    }
}
