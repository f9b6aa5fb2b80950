//! 2× spatial down- and upsampling between U-Net stages.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Gradients, Init, ParamId, ParamStore, Registry};
use crate::real::Real;
use crate::tensor::{add_into, FeatureGrid, ROW_CHUNK};

/// Spatial index of child `k` (`k = dx + 2dy + 4dz`) of coarse token `t`.
#[inline]
fn child(t: usize, coarse: usize, k: usize) -> usize {
    let fine = 2 * coarse;
    let (x, y, z) = (t % coarse, (t / coarse) % coarse, t / (coarse * coarse));
    let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
    (2 * x + dx) + fine * ((2 * y + dy) + fine * (2 * z + dz))
}

/// Reduces each 2³ group channelwise with one shared 8→1 map, then mixes
/// channels C→2C.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub reduce_weight: ParamId,
    pub reduce_bias: ParamId,
    pub proj: Linear,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct MergeCache<T> {
    input: FeatureGrid<T>,
    reduced: Vec<T>,
}

impl PatchMerge {
    pub fn register(reg: &mut Registry, name: &str, channels: usize) -> Self {
        Self {
            reduce_weight: reg.register(format!("{name}.reduce.weight"), &[1, 8], Init::TruncNormal),
            reduce_bias: reg.register(format!("{name}.reduce.bias"), &[1], Init::Zeros),
            proj: Linear::register(reg, &format!("{name}.proj"), channels, 2 * channels),
            channels,
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &FeatureGrid<T>) -> Result<(FeatureGrid<T>, MergeCache<T>)> {
        if !x.side.is_multiple_of(2) {
            return Err(Error::OddSide(x.side));
        }
        if x.channels != self.channels {
            return Err(Error::ShapeMismatch(format!("{} channels vs merge {}", x.channels, self.channels)));
        }
        let c = self.channels;
        let coarse = x.side / 2;
        let per_item = coarse.pow(3);
        let fine_n = x.side.pow(3) * c;
        let w = p.get(self.reduce_weight);
        let b = p.get(self.reduce_bias)[0];
        let mut reduced = vec![T::zero(); x.batch * per_item * c];
        reduced.par_chunks_mut(c).enumerate().for_each(|(row, out)| {
            let (item, t) = (row / per_item, row % per_item);
            let src = &x.data[item * fine_n..(item + 1) * fine_n];
            out.iter_mut().for_each(|o| *o = b);
            for (k, &wk) in w.iter().enumerate() {
                let s = child(t, coarse, k) * c;
                for (o, &v) in out.iter_mut().zip(&src[s..s + c]) {
                    *o += wk * v;
                }
            }
        });
        let data = self.proj.forward(p, &reduced);
        let out = FeatureGrid { batch: x.batch, side: coarse, channels: 2 * c, data };
        Ok((out, MergeCache { input: x.clone(), reduced }))
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &MergeCache<T>,
        dy: &FeatureGrid<T>,
        g: &mut Gradients<T>,
    ) -> FeatureGrid<T> {
        let c = self.channels;
        let x = &cache.input;
        let coarse = x.side / 2;
        let per_item = coarse.pow(3);
        let fine_n = x.side.pow(3) * c;
        let dr = self.proj.backward(p, &cache.reduced, &dy.data, g);
        let w = p.get(self.reduce_weight).to_vec();
        let partials: Vec<[T; 9]> = dr
            .par_chunks(ROW_CHUNK * c)
            .enumerate()
            .map(|(chunk, rows)| {
                let mut acc = [T::zero(); 9];
                for (r, d) in rows.chunks_exact(c).enumerate() {
                    let row = chunk * ROW_CHUNK + r;
                    let (item, t) = (row / per_item, row % per_item);
                    let src = &x.data[item * fine_n..(item + 1) * fine_n];
                    for k in 0..8 {
                        let s = child(t, coarse, k) * c;
                        for (&dv, &xv) in d.iter().zip(&src[s..s + c]) {
                            acc[k] += dv * xv;
                        }
                    }
                    for &dv in d {
                        acc[8] += dv;
                    }
                }
                acc
            })
            .collect();
        {
            let gw = g.get_mut(self.reduce_weight);
            for part in &partials {
                add_into(gw, &part[..8]);
            }
        }
        let gb = g.get_mut(self.reduce_bias);
        for part in &partials {
            gb[0] += part[8];
        }
        let mut dx = vec![T::zero(); x.data.len()];
        dx.par_chunks_mut(fine_n).enumerate().for_each(|(item, dst)| {
            for t in 0..per_item {
                let d = &dr[(item * per_item + t) * c..(item * per_item + t + 1) * c];
                for (k, &wk) in w.iter().enumerate() {
                    let s = child(t, coarse, k) * c;
                    for (o, &dv) in dst[s..s + c].iter_mut().zip(d) {
                        *o = wk * dv;
                    }
                }
            }
        });
        FeatureGrid { batch: x.batch, side: x.side, channels: c, data: dx }
    }
}

/// Mixes channels C→C/2, then scatters each scalar to the 2³ children
/// through one shared 1→8 map.
#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub proj: Linear,
    pub expand_weight: ParamId,
    pub expand_bias: ParamId,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct ExpandCache<T> {
    input: FeatureGrid<T>,
    mixed: Vec<T>,
}

impl PatchExpand {
    pub fn register(reg: &mut Registry, name: &str, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::OddChannels(channels));
        }
        Ok(Self {
            proj: Linear::register(reg, &format!("{name}.proj"), channels, channels / 2),
            expand_weight: reg.register(format!("{name}.expand.weight"), &[8, 1], Init::TruncNormal),
            expand_bias: reg.register(format!("{name}.expand.bias"), &[8], Init::Zeros),
            channels,
        })
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &FeatureGrid<T>) -> Result<(FeatureGrid<T>, ExpandCache<T>)> {
        if !x.channels.is_multiple_of(2) {
            return Err(Error::OddChannels(x.channels));
        }
        if x.channels != self.channels {
            return Err(Error::ShapeMismatch(format!("{} channels vs expand {}", x.channels, self.channels)));
        }
        let half = self.channels / 2;
        let coarse = x.side;
        let per_item = coarse.pow(3);
        let fine_n = (2 * coarse).pow(3) * half;
        let mixed = self.proj.forward(p, &x.data);
        let w = p.get(self.expand_weight);
        let b = p.get(self.expand_bias);
        let mut data = vec![T::zero(); x.batch * fine_n];
        data.par_chunks_mut(fine_n).enumerate().for_each(|(item, dst)| {
            for t in 0..per_item {
                let u = &mixed[(item * per_item + t) * half..(item * per_item + t + 1) * half];
                for k in 0..8 {
                    let s = child(t, coarse, k) * half;
                    for (o, &uv) in dst[s..s + half].iter_mut().zip(u) {
                        *o = w[k] * uv + b[k];
                    }
                }
            }
        });
        let out = FeatureGrid { batch: x.batch, side: 2 * coarse, channels: half, data };
        Ok((out, ExpandCache { input: x.clone(), mixed }))
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &ExpandCache<T>,
        dy: &FeatureGrid<T>,
        g: &mut Gradients<T>,
    ) -> FeatureGrid<T> {
        let half = self.channels / 2;
        let coarse = cache.input.side;
        let per_item = coarse.pow(3);
        let fine_n = (2 * coarse).pow(3) * half;
        let w = p.get(self.expand_weight).to_vec();
        let mut du = vec![T::zero(); cache.mixed.len()];
        let partials: Vec<[T; 16]> = du
            .par_chunks_mut(ROW_CHUNK * half)
            .zip(cache.mixed.par_chunks(ROW_CHUNK * half))
            .enumerate()
            .map(|(chunk, (dus, us))| {
                let mut acc = [T::zero(); 16];
                for (r, (dur, ur)) in dus.chunks_exact_mut(half).zip(us.chunks_exact(half)).enumerate() {
                    let row = chunk * ROW_CHUNK + r;
                    let (item, t) = (row / per_item, row % per_item);
                    let src = &dy.data[item * fine_n..(item + 1) * fine_n];
                    for k in 0..8 {
                        let s = child(t, coarse, k) * half;
                        for ((o, &dv), &uv) in dur.iter_mut().zip(&src[s..s + half]).zip(ur) {
                            *o += w[k] * dv;
                            acc[k] += dv * uv;
                            acc[8 + k] += dv;
                        }
                    }
                }
                acc
            })
            .collect();
        {
            let gw = g.get_mut(self.expand_weight);
            for part in &partials {
                add_into(gw, &part[..8]);
            }
        }
        {
            let gb = g.get_mut(self.expand_bias);
            for part in &partials {
                add_into(gb, &part[8..]);
            }
        }
        let dx = self.proj.backward(p, &cache.input.data, &du, g);
        FeatureGrid { batch: cache.input.batch, side: coarse, channels: self.channels, data: dx }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(side: usize, c: usize, f: impl Fn(usize) -> f64) -> FeatureGrid<f64> {
        FeatureGrid::new(1, side, c, (0..side.pow(3) * c).map(f).collect()).unwrap()
    }

    #[test]
    fn averaging_merge_preserves_constants() {
        let mut reg = Registry::new();
        let m = PatchMerge::register(&mut reg, "m", 4);
        let mut p: ParamStore<f64> = reg.zeros();
        p.get_mut(m.reduce_weight).iter_mut().for_each(|v| *v = 0.125);
        let w = p.get_mut(m.proj.weight);
        for c in 0..4 {
            w[c * 4 + c] = 1.0;
        }
        let x = grid(8, 4, |_| 2.5);
        let (y, _) = m.forward(&p, &x).unwrap();
        assert_eq!((y.side, y.channels), (4, 8));
        for row in y.data.chunks(8) {
            assert_eq!(&row[..4], &[2.5; 4]);
            assert_eq!(&row[4..], &[0.0; 4]);
        }
        assert!(matches!(m.forward(&p, &grid(3, 4, |_| 0.0)), Err(Error::OddSide(3))));
    }

    #[test]
    fn replicating_expand_and_shape_round_trip() {
        let mut reg = Registry::new();
        let m = PatchMerge::register(&mut reg, "m", 4);
        let e = PatchExpand::register(&mut reg, "e", 8).unwrap();
        let mut p: ParamStore<f64> = reg.init(0.3, 1).cast();
        let x = grid(4, 4, |i| (i as f64 * 0.37).sin());
        let (y, _) = m.forward(&p, &x).unwrap();
        let (z, _) = e.forward(&p, &y).unwrap();
        assert_eq!((z.side, z.channels), (x.side, x.channels));

        p.get_mut(e.expand_weight).iter_mut().for_each(|v| *v = 1.0);
        p.get_mut(e.expand_bias).iter_mut().for_each(|v| *v = 0.0);
        p.get_mut(e.proj.bias).iter_mut().for_each(|v| *v = 0.0);
        let w = p.get_mut(e.proj.weight);
        w.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..4 {
            w[c * 8 + c] = 1.0;
        }
        let (z, _) = e.forward(&p, &grid(2, 8, |_| -1.5)).unwrap();
        assert!(z.data.iter().all(|&v| v == -1.5));
        assert!(matches!(PatchExpand::register(&mut Registry::new(), "x", 3), Err(Error::OddChannels(3))));
    }

    #[test]
    fn linear_without_bias() {
        let mut reg = Registry::new();
        let m = PatchMerge::register(&mut reg, "m", 2);
        let e = PatchExpand::register(&mut reg, "e", 4).unwrap();
        let p: ParamStore<f64> = reg.init(0.5, 3).cast();
        let x = grid(4, 2, |i| (i as f64).cos());
        let x3 = grid(4, 2, |i| 3.0 * (i as f64).cos());
        let (a, _) = m.forward(&p, &x).unwrap();
        let (b, _) = m.forward(&p, &x3).unwrap();
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((3.0 * u - v).abs() < 1e-12);
        }
        let (a, _) = e.forward(&p, &a).unwrap();
        let (b, _) = e.forward(&p, &b).unwrap();
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((3.0 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut reg = Registry::new();
        let m = PatchMerge::register(&mut reg, "m", 2);
        let e = PatchExpand::register(&mut reg, "e", 4).unwrap();
        let p: ParamStore<f64> = reg.init(0.5, 5).cast();
        let x = FeatureGrid::new(2, 4, 2, (0..256).map(|i| ((i * 37 % 17) as f64) / 8.0 - 1.0).collect()).unwrap();
        let wts: Vec<f64> = (0..256).map(|i| ((i * 13 % 11) as f64) / 5.0 - 1.0).collect();
        let loss = |p: &ParamStore<f64>, x: &FeatureGrid<f64>| -> f64 {
            let (y, _) = m.forward(p, x).unwrap();
            let (z, _) = e.forward(p, &y).unwrap();
            z.data.iter().zip(&wts).map(|(a, b)| a * b).sum()
        };
        let (y, mc) = m.forward(&p, &x).unwrap();
        let (_, ec) = e.forward(&p, &y).unwrap();
        let mut g = p.zeros_like::<f64>();
        let dz = FeatureGrid::new(2, 4, 2, wts.clone()).unwrap();
        let dy = e.backward(&p, &ec, &dz, &mut g);
        let dx = m.backward(&p, &mc, &dy, &mut g);
        let eps = 1e-6;
        for id in 0..p.len() {
            for k in 0..p.get(id).len() {
                let mut pp = p.clone();
                pp.get_mut(id)[k] += eps;
                let fp = loss(&pp, &x);
                pp.get_mut(id)[k] -= 2.0 * eps;
                let fm = loss(&pp, &x);
                let n = (fp - fm) / (2.0 * eps);
                assert!((g.get(id)[k] - n).abs() < 1e-6, "{} {k}", p.name(id));
            }
        }
        for k in [0, 77, 255] {
            let mut xx = x.clone();
            xx.data[k] += eps;
            let fp = loss(&p, &xx);
            xx.data[k] -= 2.0 * eps;
            let fm = loss(&p, &xx);
            assert!((dx.data[k] - (fp - fm) / (2.0 * eps)).abs() < 1e-6);
        }
    }
}
