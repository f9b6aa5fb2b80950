//! Multi-head scaled dot-product attention over independent token groups.
//!
//! Input rows hold packed projections `[q | k | v]`, each `channels` wide,
//! head `h` owning the slice `h*dh..(h+1)*dh`. Groups are contiguous runs of
//! `tokens` rows. An optional additive bias of layout `[head][query][key]` is
//! shared by every group. The backward pass recomputes the attention
//! probabilities instead of caching them.

use rayon::prelude::*;

use crate::real::Real;
use crate::tensor::add_into;

/// Groups per parallel work item in the backward pass; bias-gradient
/// partials are summed in this fixed chunking.
const GROUP_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub groups: usize,
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Dot product with eight independent accumulators, combined in a fixed
/// order; vectorizes without reassociating across calls.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Per-head scratch: queries row-major `[n][dh]`, keys and values
/// transposed `[dh][n]`, probabilities `[n][n]`.
struct HeadBuf<T> {
    q: Vec<T>,
    kt: Vec<T>,
    vt: Vec<T>,
    p: Vec<T>,
}

impl<T: Real> HeadBuf<T> {
    fn new(n: usize, dh: usize) -> Self {
        Self { q: vec![T::zero(); n * dh], kt: vec![T::zero(); n * dh], vt: vec![T::zero(); n * dh], p: vec![T::zero(); n * n] }
    }

    fn gather(&mut self, qkv: &[T], s: AttnShape, h: usize) {
        let (n, c, dh) = (s.tokens, s.channels, s.head_dim());
        let o = h * dh;
        for t in 0..n {
            let row = &qkv[t * 3 * c..(t + 1) * 3 * c];
            self.q[t * dh..(t + 1) * dh].copy_from_slice(&row[o..o + dh]);
            for d in 0..dh {
                self.kt[d * n + t] = row[c + o + d];
                self.vt[d * n + t] = row[2 * c + o + d];
            }
        }
    }

    /// Fills `p` with the softmax-normalized scores for one head.
    fn probabilities(&mut self, n: usize, dh: usize, scale: T, bias: Option<&[T]>) {
        for i in 0..n {
            let row = &mut self.p[i * n..(i + 1) * n];
            match bias {
                Some(b) => row.copy_from_slice(&b[i * n..(i + 1) * n]),
                None => row.iter_mut().for_each(|r| *r = T::zero()),
            }
            for d in 0..dh {
                axpy(row, self.q[i * dh + d] * scale, &self.kt[d * n..(d + 1) * n]);
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
            for r in row.iter_mut() {
                *r = (*r - max).fast_exp();
            }
            let ones = [T::one(); 8];
            let z = row.chunks(8).fold(T::zero(), |acc, c| acc + dot(c, &ones[..c.len()]));
            let inv = T::one() / z;
            for r in row.iter_mut() {
                *r *= inv;
            }
        }
    }
}

fn head_bias<T: Real>(bias: Option<&[T]>, h: usize, n: usize) -> Option<&[T]> {
    bias.map(|b| &b[h * n * n..(h + 1) * n * n])
}

pub fn attention_forward<T: Real>(qkv: &[T], s: AttnShape, bias: Option<&[T]>) -> Vec<T> {
    let (n, c, dh) = (s.tokens, s.channels, s.head_dim());
    debug_assert_eq!(qkv.len(), s.groups * n * 3 * c);
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); s.groups * n * c];
    out.par_chunks_mut(n * c).zip(qkv.par_chunks(n * 3 * c)).for_each(|(og, qg)| {
        let mut buf = HeadBuf::new(n, dh);
        for h in 0..s.heads {
            buf.gather(qg, s, h);
            buf.probabilities(n, dh, scale, head_bias(bias, h, n));
            for i in 0..n {
                let prow = &buf.p[i * n..(i + 1) * n];
                for d in 0..dh {
                    og[i * c + h * dh + d] = dot(prow, &buf.vt[d * n..(d + 1) * n]);
                }
            }
        }
    });
    out
}

/// Returns the packed projection gradient and, when a bias was used, its
/// gradient in the same `[head][query][key]` layout.
pub fn attention_backward<T: Real>(
    qkv: &[T],
    dout: &[T],
    s: AttnShape,
    bias: Option<&[T]>,
) -> (Vec<T>, Option<Vec<T>>) {
    let (n, c, dh) = (s.tokens, s.channels, s.head_dim());
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dqkv = vec![T::zero(); qkv.len()];
    let partials: Vec<Option<Vec<T>>> = dqkv
        .par_chunks_mut(GROUP_CHUNK * n * 3 * c)
        .zip(qkv.par_chunks(GROUP_CHUNK * n * 3 * c))
        .zip(dout.par_chunks(GROUP_CHUNK * n * c))
        .map(|((dchunk, qchunk), ochunk)| {
            let mut dbias = bias.map(|b| vec![T::zero(); b.len()]);
            let mut buf = HeadBuf::new(n, dh);
            let mut dout_h = vec![T::zero(); n * dh];
            let mut ds = vec![T::zero(); n * n];
            let mut dkt = vec![T::zero(); n * dh];
            let mut dvt = vec![T::zero(); n * dh];
            for ((dg, qg), og) in dchunk
                .chunks_mut(n * 3 * c)
                .zip(qchunk.chunks(n * 3 * c))
                .zip(ochunk.chunks(n * c))
            {
                for h in 0..s.heads {
                    let o = h * dh;
                    buf.gather(qg, s, h);
                    buf.probabilities(n, dh, scale, head_bias(bias, h, n));
                    for t in 0..n {
                        dout_h[t * dh..(t + 1) * dh].copy_from_slice(&og[t * c + o..t * c + o + dh]);
                    }
                    dkt.iter_mut().for_each(|v| *v = T::zero());
                    dvt.iter_mut().for_each(|v| *v = T::zero());
                    for i in 0..n {
                        let prow = &buf.p[i * n..(i + 1) * n];
                        let dsrow = &mut ds[i * n..(i + 1) * n];
                        dsrow.iter_mut().for_each(|v| *v = T::zero());
                        for d in 0..dh {
                            let g = dout_h[i * dh + d];
                            axpy(dsrow, g, &buf.vt[d * n..(d + 1) * n]);
                            axpy(&mut dvt[d * n..(d + 1) * n], g, prow);
                        }
                        let rd = dot(prow, dsrow);
                        for (v, &pv) in dsrow.iter_mut().zip(prow) {
                            *v = pv * (*v - rd);
                        }
                        let dq = &mut dg[i * 3 * c + o..i * 3 * c + o + dh];
                        for d in 0..dh {
                            dq[d] = scale * dot(dsrow, &buf.kt[d * n..(d + 1) * n]);
                            axpy(&mut dkt[d * n..(d + 1) * n], scale * buf.q[i * dh + d], dsrow);
                        }
                    }
                    for t in 0..n {
                        for d in 0..dh {
                            dg[t * 3 * c + c + o + d] = dkt[d * n + t];
                            dg[t * 3 * c + 2 * c + o + d] = dvt[d * n + t];
                        }
                    }
                    if let Some(db) = dbias.as_mut() {
                        add_into(&mut db[h * n * n..(h + 1) * n * n], &ds);
                    }
                }
            }
            dbias
        })
        .collect();
    let dbias = bias.map(|b| {
        let mut acc = vec![T::zero(); b.len()];
        for p in partials.iter().flatten() {
            add_into(&mut acc, p);
        }
        acc
    });
    (dqkv, dbias)
}
