//! Token-major activation grids and the dense kernels the network is built
//! from. Every kernel has a matching backward pass; reductions over tokens
//! are split into fixed-size chunks summed in index order, so results do not
//! depend on the number of worker threads.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;

/// Rows per parallel work item.
pub const ROW_CHUNK: usize = 1024;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Batched cubic feature grid: `data[((b * side^3) + token) * channels + c]`
/// with tokens in x-fastest spatial order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T> {
    pub batch: usize,
    pub side: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn new(batch: usize, side: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        let expect = batch * side.pow(3) * channels;
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "grid {batch}x{side}^3x{channels} needs {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Self { batch, side, channels, data })
    }

    pub fn zeros(batch: usize, side: usize, channels: usize) -> Self {
        Self { batch, side, channels, data: vec![T::zero(); batch * side.pow(3) * channels] }
    }

    pub fn tokens_per_item(&self) -> usize {
        self.side.pow(3)
    }

    pub fn rows(&self) -> usize {
        self.batch * self.tokens_per_item()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.batch == other.batch && self.side == other.side && self.channels == other.channels
    }
}

/// `y = x w^T + b` for `n` rows; `w` is `d_out x d_in` row-major.
pub fn linear_forward<T: Real>(x: &[T], d_in: usize, w: &[T], b: &[T], d_out: usize) -> Vec<T> {
    let n = x.len() / d_in;
    let mut y = vec![T::zero(); n * d_out];
    let wv = ArrayView2::from_shape((d_out, d_in), w).expect("weight shape");
    y.par_chunks_mut(ROW_CHUNK * d_out)
        .zip(x.par_chunks(ROW_CHUNK * d_in))
        .for_each(|(yc, xc)| {
            let rows = xc.len() / d_in;
            for row in yc.chunks_exact_mut(d_out) {
                row.copy_from_slice(b);
            }
            let xv = ArrayView2::from_shape((rows, d_in), xc).expect("input shape");
            let mut yv = ArrayViewMut2::from_shape((rows, d_out), yc).expect("output shape");
            general_mat_mul(T::one(), &xv, &wv.t(), T::one(), &mut yv);
        });
    y
}

/// Backward of [`linear_forward`]: accumulates into `gw`/`gb` and returns
/// the input gradient.
pub fn linear_backward<T: Real>(
    x: &[T],
    d_in: usize,
    w: &[T],
    d_out: usize,
    dy: &[T],
    gw: &mut [T],
    gb: &mut [T],
) -> Vec<T> {
    let n = x.len() / d_in;
    debug_assert_eq!(dy.len(), n * d_out);
    let wv = ArrayView2::from_shape((d_out, d_in), w).expect("weight shape");
    let mut dx = vec![T::zero(); n * d_in];
    dx.par_chunks_mut(ROW_CHUNK * d_in)
        .zip(dy.par_chunks(ROW_CHUNK * d_out))
        .for_each(|(dxc, dyc)| {
            let rows = dyc.len() / d_out;
            let dyv = ArrayView2::from_shape((rows, d_out), dyc).expect("grad shape");
            let mut dxv = ArrayViewMut2::from_shape((rows, d_in), dxc).expect("input shape");
            general_mat_mul(T::one(), &dyv, &wv, T::zero(), &mut dxv);
        });
    let partials: Vec<(Vec<T>, Vec<T>)> = x
        .par_chunks(ROW_CHUNK * d_in)
        .zip(dy.par_chunks(ROW_CHUNK * d_out))
        .map(|(xc, dyc)| {
            let rows = xc.len() / d_in;
            let xv = ArrayView2::from_shape((rows, d_in), xc).expect("input shape");
            let dyv = ArrayView2::from_shape((rows, d_out), dyc).expect("grad shape");
            let mut pw = vec![T::zero(); d_out * d_in];
            {
                let mut pv = ArrayViewMut2::from_shape((d_out, d_in), &mut pw[..]).expect("weight shape");
                general_mat_mul(T::one(), &dyv.t(), &xv, T::zero(), &mut pv);
            }
            let mut pb = vec![T::zero(); d_out];
            for row in dyc.chunks_exact(d_out) {
                for (acc, &v) in pb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            (pw, pb)
        })
        .collect();
    for (pw, pb) in partials {
        add_into(gw, &pw);
        add_into(gb, &pb);
    }
    dx
}

#[inline]
pub fn add_into<T: Real>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm_forward<T: Real>(x: &[T], c: usize, gamma: &[T], beta: &[T]) -> (Vec<T>, NormCache<T>) {
    let n = x.len() / c;
    let eps = T::lit(LAYER_NORM_EPS);
    let inv_c = T::one() / T::lit(c as f64);
    let mut y = vec![T::zero(); n * c];
    let mut xhat = vec![T::zero(); n * c];
    let mut rstd = vec![T::zero(); n];
    y.par_chunks_mut(ROW_CHUNK * c)
        .zip(xhat.par_chunks_mut(ROW_CHUNK * c))
        .zip(rstd.par_chunks_mut(ROW_CHUNK))
        .zip(x.par_chunks(ROW_CHUNK * c))
        .for_each(|(((yc, hc), rc), xc)| {
            for (((yr, hr), r), xr) in yc
                .chunks_exact_mut(c)
                .zip(hc.chunks_exact_mut(c))
                .zip(rc.iter_mut())
                .zip(xc.chunks_exact(c))
            {
                let mean = xr.iter().copied().sum::<T>() * inv_c;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
                let rs = T::one() / (var + eps).sqrt();
                *r = rs;
                for k in 0..c {
                    let h = (xr[k] - mean) * rs;
                    hr[k] = h;
                    yr[k] = h * gamma[k] + beta[k];
                }
            }
        });
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Real>(
    cache: &NormCache<T>,
    c: usize,
    gamma: &[T],
    dy: &[T],
    g_gamma: &mut [T],
    g_beta: &mut [T],
) -> Vec<T> {
    let n = dy.len() / c;
    let inv_c = T::one() / T::lit(c as f64);
    let mut dx = vec![T::zero(); n * c];
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(ROW_CHUNK * c)
        .zip(dy.par_chunks(ROW_CHUNK * c))
        .zip(cache.xhat.par_chunks(ROW_CHUNK * c))
        .zip(cache.rstd.par_chunks(ROW_CHUNK))
        .map(|(((dxc, dyc), hc), rc)| {
            let mut pg = vec![T::zero(); c];
            let mut pb = vec![T::zero(); c];
            for (((dxr, dyr), hr), &rs) in dxc
                .chunks_exact_mut(c)
                .zip(dyc.chunks_exact(c))
                .zip(hc.chunks_exact(c))
                .zip(rc.iter())
            {
                let mut mean_d = T::zero();
                let mut mean_dh = T::zero();
                for k in 0..c {
                    let dh = dyr[k] * gamma[k];
                    mean_d += dh;
                    mean_dh += dh * hr[k];
                    pg[k] += dyr[k] * hr[k];
                    pb[k] += dyr[k];
                }
                mean_d *= inv_c;
                mean_dh *= inv_c;
                for k in 0..c {
                    let dh = dyr[k] * gamma[k];
                    dxr[k] = rs * (dh - mean_d - hr[k] * mean_dh);
                }
            }
            (pg, pb)
        })
        .collect();
    for (pg, pb) in partials {
        add_into(g_gamma, &pg);
        add_into(g_beta, &pb);
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).fast_tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).fast_tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

pub fn gelu_forward<T: Real>(x: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    y.par_chunks_mut(ROW_CHUNK * 16)
        .zip(x.par_chunks(ROW_CHUNK * 16))
        .for_each(|(yc, xc)| {
            for (o, &v) in yc.iter_mut().zip(xc) {
                *o = gelu(v);
            }
        });
    y
}

pub fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    dx.par_chunks_mut(ROW_CHUNK * 16)
        .zip(x.par_chunks(ROW_CHUNK * 16).zip(dy.par_chunks(ROW_CHUNK * 16)))
        .for_each(|(dc, (xc, gc))| {
            for ((o, &v), &g) in dc.iter_mut().zip(xc).zip(gc) {
                *o = g * gelu_grad(v);
            }
        });
    dx
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += eps;
                let fp = f(&p);
                p[i] -= 2.0 * eps;
                let fm = f(&p);
                (fp - fm) / (2.0 * eps)
            })
            .collect()
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n).map(|i| (((i as u64 * 2654435761 + salt * 97) % 1000) as f64 / 500.0) - 1.0).collect()
    }

    #[test]
    fn linear_matches_naive_and_its_gradient() {
        let (n, di, do_) = (2500, 3, 5);
        let x = pseudo(n * di, 1);
        let w = pseudo(do_ * di, 2);
        let b = pseudo(do_, 3);
        let y = linear_forward(&x, di, &w, &b, do_);
        for r in [0, 1024, 2499] {
            for o in 0..do_ {
                let e: f64 = b[o] + (0..di).map(|k| x[r * di + k] * w[o * di + k]).sum::<f64>();
                assert!((y[r * do_ + o] - e).abs() < 1e-12);
            }
        }
        let dy = pseudo(n * do_, 4);
        let mut gw = vec![0.0; do_ * di];
        let mut gb = vec![0.0; do_];
        let dx = linear_backward(&x, di, &w, do_, &dy, &mut gw, &mut gb);
        let loss_w = |wp: &[f64]| -> f64 {
            linear_forward(&x, di, wp, &b, do_).iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        for (a, e) in gw.iter().zip(numeric_grad(loss_w, &w)) {
            assert!((a - e).abs() < 1e-5 * e.abs().max(1.0));
        }
        let gb_e: Vec<f64> = (0..do_).map(|o| (0..n).map(|r| dy[r * do_ + o]).sum()).collect();
        for (a, e) in gb.iter().zip(gb_e) {
            assert!((a - e).abs() < 1e-9);
        }
        let e0: f64 = (0..do_).map(|o| dy[o] * w[o * di]).sum();
        assert!((dx[0] - e0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradient() {
        let c = 6;
        let x = pseudo(4 * c, 7);
        let gamma = pseudo(c, 8);
        let beta = pseudo(c, 9);
        let dy = pseudo(4 * c, 10);
        let (y, cache) = layer_norm_forward(&x, c, &gamma, &beta);
        for row in cache.xhat.chunks(c) {
            let m: f64 = row.iter().sum::<f64>() / c as f64;
            assert!(m.abs() < 1e-12);
        }
        assert_eq!(y.len(), x.len());
        let mut gg = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        let dx = layer_norm_backward(&cache, c, &gamma, &dy, &mut gg, &mut gbeta);
        let f = |xp: &[f64]| -> f64 {
            layer_norm_forward(xp, c, &gamma, &beta).0.iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        for (a, e) in dx.iter().zip(numeric_grad(f, &x)) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
        let fg = |gp: &[f64]| -> f64 {
            layer_norm_forward(&x, c, gp, &beta).0.iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        for (a, e) in gg.iter().zip(numeric_grad(fg, &gamma)) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_and_sigmoid() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let e = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - e).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(1e4f32), 1.0);
        assert_eq!(sigmoid(-1e4f32), 0.0);
    }
}
