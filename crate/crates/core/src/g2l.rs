//! Global-to-local attention block.
//!
//! A block first mean-pools every `W³` window to one token and lets those
//! tokens attend to each other (no positional information), broadcasting the
//! projected result back onto each window's voxels. It then runs pre-norm
//! windowed self-attention with a learned relative-position bias, followed by
//! a pre-norm GELU MLP. Each stage is residual.

use rayon::prelude::*;

use crate::attention::{attention_backward, attention_forward, AttnShape};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Gradients, Init, ParamId, ParamStore, Registry};
use crate::real::Real;
use crate::tensor::{gelu_backward, gelu_forward, FeatureGrid, NormCache};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct G2LConfig {
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl G2LConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.window == 0 || self.heads == 0 {
            return Err(Error::BadConfig("channels, window and heads must be positive".into()));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::BadConfig(format!("{} heads do not divide {} channels", self.heads, self.channels)));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(Error::BadConfig(format!("mlp ratio {} must be positive", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        ((self.mlp_ratio * self.channels as f64).round() as usize).max(1)
    }

    pub fn check_side(&self, side: usize) -> Result<()> {
        if !side.is_multiple_of(self.window) {
            return Err(Error::IndivisibleWindow { side, window: self.window });
        }
        Ok(())
    }
}

/// Features rearranged so each window's `W³` tokens are contiguous:
/// `data[((b * count + win) * W³ + local) * channels + c]`, windows and local
/// tokens both ordered x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Windows<T> {
    pub batch: usize,
    pub side: usize,
    pub window: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> Windows<T> {
    pub fn per_item(&self) -> usize {
        (self.side / self.window).pow(3)
    }

    pub fn tokens(&self) -> usize {
        self.window.pow(3)
    }

    pub fn groups(&self) -> usize {
        self.batch * self.per_item()
    }

    pub fn window(&self, b: usize, w: usize) -> &[T] {
        let n = self.tokens() * self.channels;
        let i = b * self.per_item() + w;
        &self.data[i * n..(i + 1) * n]
    }
}

/// `order[k]` is the spatial token index stored at window-order position `k`.
pub fn window_order(side: usize, window: usize) -> Vec<usize> {
    let nw = side / window;
    let mut order = Vec::with_capacity(side.pow(3));
    for wz in 0..nw {
        for wy in 0..nw {
            for wx in 0..nw {
                for lz in 0..window {
                    for ly in 0..window {
                        for lx in 0..window {
                            let (x, y, z) = (wx * window + lx, wy * window + ly, wz * window + lz);
                            order.push(x + side * (y + side * z));
                        }
                    }
                }
            }
        }
    }
    order
}

fn gather_rows<T: Real>(src: &[T], channels: usize, tokens: usize, order: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    out.par_chunks_mut(tokens * channels)
        .zip(src.par_chunks(tokens * channels))
        .for_each(|(o, s)| {
            for (k, &t) in order.iter().enumerate() {
                o[k * channels..(k + 1) * channels].copy_from_slice(&s[t * channels..(t + 1) * channels]);
            }
        });
    out
}

fn scatter_rows<T: Real>(src: &[T], channels: usize, tokens: usize, order: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    out.par_chunks_mut(tokens * channels)
        .zip(src.par_chunks(tokens * channels))
        .for_each(|(o, s)| {
            for (k, &t) in order.iter().enumerate() {
                o[t * channels..(t + 1) * channels].copy_from_slice(&s[k * channels..(k + 1) * channels]);
            }
        });
    out
}

pub fn window_partition<T: Real>(grid: &FeatureGrid<T>, window: usize) -> Result<Windows<T>> {
    if window == 0 || !grid.side.is_multiple_of(window) {
        return Err(Error::IndivisibleWindow { side: grid.side, window });
    }
    let order = window_order(grid.side, window);
    Ok(Windows {
        batch: grid.batch,
        side: grid.side,
        window,
        channels: grid.channels,
        data: gather_rows(&grid.data, grid.channels, grid.tokens_per_item(), &order),
    })
}

pub fn window_merge<T: Real>(w: &Windows<T>) -> FeatureGrid<T> {
    let order = window_order(w.side, w.window);
    FeatureGrid {
        batch: w.batch,
        side: w.side,
        channels: w.channels,
        data: scatter_rows(&w.data, w.channels, w.side.pow(3), &order),
    }
}

pub fn rel_table_len(window: usize) -> usize {
    (2 * window - 1).pow(3)
}

/// Table row for every (query, key) pair of local tokens inside a window.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window.pow(3);
    let span = 2 * window - 1;
    let coord = |t: usize| (t % window, (t / window) % window, t / (window * window));
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (xi, yi, zi) = coord(i);
        for j in 0..n {
            let (xj, yj, zj) = coord(j);
            let dx = xi + window - 1 - xj;
            let dy = yi + window - 1 - yj;
            let dz = zi + window - 1 - zj;
            idx.push(dx + span * (dy + span * dz));
        }
    }
    idx
}

#[derive(Debug, Clone)]
pub struct LocalAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_bias: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
}

#[derive(Debug, Clone)]
pub struct LocalCache<T> {
    input: Vec<T>,
    qkv: Vec<T>,
    attn: Vec<T>,
    groups: usize,
}

impl LocalAttention {
    pub fn register(reg: &mut Registry, name: &str, cfg: &G2LConfig) -> Self {
        let c = cfg.channels;
        let qkv = Linear::register(reg, &format!("{name}.qkv"), c, 3 * c);
        let proj = Linear::register(reg, &format!("{name}.proj"), c, c);
        let rel_bias = reg.register(format!("{name}.rel_bias"), &[rel_table_len(cfg.window), cfg.heads], Init::TruncNormal);
        Self { qkv, proj, rel_bias, channels: c, heads: cfg.heads, window: cfg.window }
    }

    fn shape(&self, groups: usize) -> AttnShape {
        AttnShape { groups, tokens: self.window.pow(3), channels: self.channels, heads: self.heads }
    }

    /// Expands the table into a dense `[head][query][key]` bias.
    pub fn bias_matrix<T: Real>(&self, p: &ParamStore<T>) -> Vec<T> {
        let table = p.get(self.rel_bias);
        let idx = relative_position_index(self.window);
        let nn = idx.len();
        let mut out = vec![T::zero(); self.heads * nn];
        for h in 0..self.heads {
            for (o, &r) in out[h * nn..(h + 1) * nn].iter_mut().zip(&idx) {
                *o = table[r * self.heads + h];
            }
        }
        out
    }

    /// Attention over window-ordered rows; `groups` windows of `W³` tokens.
    pub fn forward_rows<T: Real>(&self, p: &ParamStore<T>, x: Vec<T>, groups: usize) -> (Vec<T>, LocalCache<T>) {
        let qkv = self.qkv.forward(p, &x);
        let bias = self.bias_matrix(p);
        let attn = attention_forward(&qkv, self.shape(groups), Some(&bias));
        let out = self.proj.forward(p, &attn);
        (out, LocalCache { input: x, qkv, attn, groups })
    }

    pub fn backward_rows<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &LocalCache<T>,
        dy: &[T],
        g: &mut Gradients<T>,
    ) -> Vec<T> {
        let dattn = self.proj.backward(p, &cache.attn, dy, g);
        let bias = self.bias_matrix(p);
        let (dqkv, dbias) = attention_backward(&cache.qkv, &dattn, self.shape(cache.groups), Some(&bias));
        let dbias = dbias.expect("bias gradient");
        let idx = relative_position_index(self.window);
        let nn = idx.len();
        let gt = g.get_mut(self.rel_bias);
        for h in 0..self.heads {
            for (&r, &d) in idx.iter().zip(&dbias[h * nn..(h + 1) * nn]) {
                gt[r * self.heads + h] += d;
            }
        }
        self.qkv.backward(p, &cache.input, &dqkv, g)
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Windows<T>) -> Result<Windows<T>> {
        if x.window != self.window || x.channels != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "windows {}^3 x {} vs attention {}^3 x {}",
                x.window, x.channels, self.window, self.channels
            )));
        }
        let (data, _) = self.forward_rows(p, x.data.clone(), x.groups());
        Ok(Windows { data, ..x.clone() })
    }
}

#[derive(Debug, Clone)]
pub struct GlobalStage {
    pub norm: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub channels: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct GlobalCache<T> {
    norm: NormCache<T>,
    normed: Vec<T>,
    qkv: Vec<T>,
    attn: Vec<T>,
    batch: usize,
    per_item: usize,
    tokens: usize,
}

impl GlobalStage {
    pub fn register(reg: &mut Registry, name: &str, cfg: &G2LConfig) -> Self {
        let c = cfg.channels;
        Self {
            norm: LayerNorm::register(reg, &format!("{name}.norm"), c),
            qkv: Linear::register(reg, &format!("{name}.qkv"), c, 3 * c),
            proj: Linear::register(reg, &format!("{name}.proj"), c, c),
            channels: c,
            heads: cfg.heads,
        }
    }

    /// One updated token per window, `[batch * per_item, C]`.
    pub fn forward_rows<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        batch: usize,
        per_item: usize,
        tokens: usize,
    ) -> (Vec<T>, GlobalCache<T>) {
        let c = self.channels;
        let inv = T::one() / T::lit(tokens as f64);
        let mut pooled = vec![T::zero(); batch * per_item * c];
        pooled.par_chunks_mut(c).zip(x.par_chunks(tokens * c)).for_each(|(o, w)| {
            for row in w.chunks_exact(c) {
                for (a, &v) in o.iter_mut().zip(row) {
                    *a += v;
                }
            }
            o.iter_mut().for_each(|a| *a *= inv);
        });
        let (normed, norm) = self.norm.forward(p, &pooled);
        let qkv = self.qkv.forward(p, &normed);
        let shape = AttnShape { groups: batch, tokens: per_item, channels: c, heads: self.heads };
        let attn = attention_forward(&qkv, shape, None);
        let out = self.proj.forward(p, &attn);
        (out, GlobalCache { norm, normed, qkv, attn, batch, per_item, tokens })
    }

    /// Gradient with respect to the window-ordered input, given the
    /// gradient of the per-window tokens.
    pub fn backward_rows<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &GlobalCache<T>,
        dtok: &[T],
        g: &mut Gradients<T>,
    ) -> Vec<T> {
        let c = self.channels;
        let dattn = self.proj.backward(p, &cache.attn, dtok, g);
        let shape = AttnShape { groups: cache.batch, tokens: cache.per_item, channels: c, heads: self.heads };
        let (dqkv, _) = attention_backward(&cache.qkv, &dattn, shape, None);
        let dnormed = self.qkv.backward(p, &cache.normed, &dqkv, g);
        let dpooled = self.norm.backward(p, &cache.norm, &dnormed, g);
        let inv = T::one() / T::lit(cache.tokens as f64);
        let mut dx = vec![T::zero(); cache.batch * cache.per_item * cache.tokens * c];
        dx.par_chunks_mut(cache.tokens * c).zip(dpooled.par_chunks(c)).for_each(|(w, d)| {
            for row in w.chunks_exact_mut(c) {
                for (o, &v) in row.iter_mut().zip(d) {
                    *o = v * inv;
                }
            }
        });
        dx
    }

    /// Residual form: every voxel receives its window's updated token.
    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Windows<T>) -> Result<Windows<T>> {
        if x.channels != self.channels {
            return Err(Error::ShapeMismatch(format!("{} channels vs {}", x.channels, self.channels)));
        }
        let (tok, _) = self.forward_rows(p, &x.data, x.batch, x.per_item(), x.tokens());
        let mut data = x.data.clone();
        broadcast_add(&mut data, &tok, x.tokens(), x.channels);
        Ok(Windows { data, ..x.clone() })
    }
}

fn broadcast_add<T: Real>(x: &mut [T], tok: &[T], tokens: usize, c: usize) {
    x.par_chunks_mut(tokens * c).zip(tok.par_chunks(c)).for_each(|(w, t)| {
        for row in w.chunks_exact_mut(c) {
            for (o, &v) in row.iter_mut().zip(t) {
                *o += v;
            }
        }
    });
}

fn window_sums<T: Real>(x: &[T], tokens: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len() / tokens];
    out.par_chunks_mut(c).zip(x.par_chunks(tokens * c)).for_each(|(o, w)| {
        for row in w.chunks_exact(c) {
            for (a, &v) in o.iter_mut().zip(row) {
                *a += v;
            }
        }
    });
    out
}

#[derive(Debug, Clone)]
pub struct G2LBlock {
    pub cfg: G2LConfig,
    pub global: GlobalStage,
    pub norm1: LayerNorm,
    pub attn: LocalAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    batch: usize,
    side: usize,
    global: GlobalCache<T>,
    norm1: NormCache<T>,
    local: LocalCache<T>,
    norm2: NormCache<T>,
    normed2: Vec<T>,
    hidden: Vec<T>,
    act: Vec<T>,
}

impl G2LBlock {
    pub fn register(reg: &mut Registry, name: &str, cfg: G2LConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            cfg,
            global: GlobalStage::register(reg, &format!("{name}.global"), &cfg),
            norm1: LayerNorm::register(reg, &format!("{name}.norm1"), c),
            attn: LocalAttention::register(reg, &format!("{name}.attn"), &cfg),
            norm2: LayerNorm::register(reg, &format!("{name}.norm2"), c),
            fc1: Linear::register(reg, &format!("{name}.mlp.fc1"), c, cfg.hidden()),
            fc2: Linear::register(reg, &format!("{name}.mlp.fc2"), cfg.hidden(), c),
        })
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &FeatureGrid<T>) -> Result<(FeatureGrid<T>, BlockCache<T>)> {
        if x.channels != self.cfg.channels {
            return Err(Error::ShapeMismatch(format!("{} channels vs block {}", x.channels, self.cfg.channels)));
        }
        self.cfg.check_side(x.side)?;
        let w = window_partition(x, self.cfg.window)?;
        let (tokens, per_item, c) = (w.tokens(), w.per_item(), w.channels);
        let mut h = w.data;

        let (tok, global) = self.global.forward_rows(p, &h, x.batch, per_item, tokens);
        broadcast_add(&mut h, &tok, tokens, c);

        let (n1, norm1) = self.norm1.forward(p, &h);
        let (a, local) = self.attn.forward_rows(p, n1, x.batch * per_item);
        crate::tensor::add_into(&mut h, &a);

        let (normed2, norm2) = self.norm2.forward(p, &h);
        let hidden = self.fc1.forward(p, &normed2);
        let act = gelu_forward(&hidden);
        let m = self.fc2.forward(p, &act);
        crate::tensor::add_into(&mut h, &m);

        let out = window_merge(&Windows { batch: x.batch, side: x.side, window: self.cfg.window, channels: c, data: h });
        Ok((out, BlockCache { batch: x.batch, side: x.side, global, norm1, local, norm2, normed2, hidden, act }))
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &BlockCache<T>,
        dy: &FeatureGrid<T>,
        g: &mut Gradients<T>,
    ) -> FeatureGrid<T> {
        let win = self.cfg.window;
        let c = self.cfg.channels;
        let tokens = win.pow(3);
        let order = window_order(cache.side, win);
        let mut d = gather_rows(&dy.data, c, cache.side.pow(3), &order);

        let dact = self.fc2.backward(p, &cache.act, &d, g);
        let dhidden = gelu_backward(&cache.hidden, &dact);
        let dn2 = self.fc1.backward(p, &cache.normed2, &dhidden, g);
        let back = self.norm2.backward(p, &cache.norm2, &dn2, g);
        crate::tensor::add_into(&mut d, &back);

        let dn1 = self.attn.backward_rows(p, &cache.local, &d, g);
        let back = self.norm1.backward(p, &cache.norm1, &dn1, g);
        crate::tensor::add_into(&mut d, &back);

        let dtok = window_sums(&d, tokens, c);
        let back = self.global.backward_rows(p, &cache.global, &dtok, g);
        crate::tensor::add_into(&mut d, &back);

        FeatureGrid { batch: cache.batch, side: cache.side, channels: c, data: scatter_rows(&d, c, cache.side.pow(3), &order) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(batch: usize, side: usize, c: usize, seed: u64) -> FeatureGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * side.pow(3) * c;
        FeatureGrid::new(batch, side, c, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn block(side_cfg: G2LConfig, seed: u64, std: f64) -> (G2LBlock, ParamStore<f64>) {
        let mut reg = Registry::new();
        let b = G2LBlock::register(&mut reg, "blk", side_cfg).unwrap();
        (b, reg.init(std, seed).cast())
    }

    const CFG: G2LConfig = G2LConfig { channels: 8, window: 2, heads: 2, mlp_ratio: 2.0 };

    #[test]
    fn partition_counts_and_round_trip() {
        let g = random_grid(2, 8, 3, 1);
        let w = window_partition(&g, 4).unwrap();
        assert_eq!(w.per_item(), 8);
        assert_eq!(w.tokens(), 64);
        assert_eq!(window_merge(&w), g);
        let whole = window_partition(&g, 8).unwrap();
        assert_eq!(whole.per_item(), 1);
        assert_eq!(whole.data, g.data);
        assert!(matches!(window_partition(&g, 3), Err(Error::IndivisibleWindow { side: 8, window: 3 })));
    }

    #[test]
    fn relative_index_covers_table() {
        let idx = relative_position_index(3);
        assert_eq!(idx.len(), 27 * 27);
        let centre = (rel_table_len(3) - 1) / 2;
        for i in 0..27 {
            assert_eq!(idx[i * 27 + i], centre);
        }
        assert!(idx.iter().all(|&r| r < rel_table_len(3)));
        assert_eq!(*idx.iter().max().unwrap(), rel_table_len(3) - 1);
    }

    #[test]
    fn zero_projections_give_identity() {
        let (b, mut p) = block(CFG, 3, 0.02);
        for lin in [b.global.proj, b.attn.proj, b.fc2] {
            p.get_mut(lin.weight).iter_mut().for_each(|v| *v = 0.0);
        }
        for side in [4, 8, 16] {
            let x = random_grid(1, side, 8, side as u64);
            let (y, _) = b.forward(&p, &x).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn uniform_local_attention_is_window_mean() {
        let mut reg = Registry::new();
        let cfg = G2LConfig { channels: 4, window: 2, heads: 2, mlp_ratio: 1.0 };
        let la = LocalAttention::register(&mut reg, "a", &cfg);
        let mut p: ParamStore<f64> = reg.zeros();
        let w = p.get_mut(la.qkv.weight);
        for c in 0..4 {
            w[(8 + c) * 4 + c] = 1.0;
        }
        let w = p.get_mut(la.proj.weight);
        for c in 0..4 {
            w[c * 4 + c] = 1.0;
        }
        let x = window_partition(&random_grid(1, 4, 4, 5), 2).unwrap();
        let y = la.forward(&p, &x).unwrap();
        for win in 0..x.per_item() {
            let xs = x.window(0, win);
            let ys = y.window(0, win);
            for c in 0..4 {
                let mean = (0..8).map(|t| xs[t * 4 + c]).sum::<f64>() / 8.0;
                for t in 0..8 {
                    assert!((ys[t * 4 + c] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn local_windows_are_independent() {
        let mut reg = Registry::new();
        let la = LocalAttention::register(&mut reg, "a", &CFG);
        let p: ParamStore<f64> = reg.init(0.5, 2).cast();
        let x = window_partition(&random_grid(1, 4, 8, 6), 2).unwrap();
        let y = la.forward(&p, &x).unwrap();
        let mut x2 = x.clone();
        x2.data[3] += 0.7;
        let y2 = la.forward(&p, &x2).unwrap();
        assert_ne!(y.window(0, 0), y2.window(0, 0));
        for w in 1..x.per_item() {
            assert_eq!(y.window(0, w), y2.window(0, w));
        }
    }

    #[test]
    fn global_stage_single_window_adds_constant() {
        let mut reg = Registry::new();
        let gs = GlobalStage::register(&mut reg, "g", &CFG);
        let p: ParamStore<f64> = reg.init(0.3, 4).cast();
        let x = window_partition(&random_grid(1, 2, 8, 8), 2).unwrap();
        let y = gs.forward(&p, &x).unwrap();
        for c in 0..8 {
            let d0 = y.data[c] - x.data[c];
            for t in 1..8 {
                assert!((y.data[t * 8 + c] - x.data[t * 8 + c] - d0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_is_window_permutation_equivariant() {
        let (b, p) = block(CFG, 9, 0.3);
        let x = random_grid(1, 4, 8, 10);
        let wx = window_partition(&x, 2).unwrap();
        let perm = [3usize, 0, 7, 5, 1, 6, 2, 4];
        let n = wx.tokens() * 8;
        let mut permuted = wx.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.data[dst * n..(dst + 1) * n].copy_from_slice(wx.window(0, src));
        }
        let (y, _) = b.forward(&p, &x).unwrap();
        let (yp, _) = b.forward(&p, &window_merge(&permuted)).unwrap();
        let wy = window_partition(&y, 2).unwrap();
        let wyp = window_partition(&yp, 2).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for (a, b) in wyp.window(0, dst).iter().zip(wy.window(0, src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let cfg = G2LConfig { channels: 8, window: 2, heads: 2, mlp_ratio: 2.0 };
        let (b, p) = block(cfg, 11, 0.3);
        let x = random_grid(1, 4, 8, 12);
        let wts = random_grid(1, 4, 8, 13);
        let loss = |p: &ParamStore<f64>, x: &FeatureGrid<f64>| -> f64 {
            b.forward(p, x).unwrap().0.data.iter().zip(&wts.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = b.forward(&p, &x).unwrap();
        let mut g = p.zeros_like::<f64>();
        let dx = b.backward(&p, &cache, &wts, &mut g);
        let eps = 1e-5;
        let rel = |a: f64, e: f64| (a - e).abs() / a.abs().max(e.abs()).max(1e-4);
        let mut worst: f64 = 0.0;
        for id in 0..p.len() {
            let n = p.get(id).len();
            for k in [0, n / 2, n - 1] {
                let mut pp = p.clone();
                pp.get_mut(id)[k] += eps;
                let fp = loss(&pp, &x);
                pp.get_mut(id)[k] -= 2.0 * eps;
                let fm = loss(&pp, &x);
                worst = worst.max(rel(g.get(id)[k], (fp - fm) / (2.0 * eps)));
            }
        }
        for k in [0, 100, 511] {
            let mut xx = x.clone();
            xx.data[k] += eps;
            let fp = loss(&p, &xx);
            xx.data[k] -= 2.0 * eps;
            let fm = loss(&p, &xx);
            worst = worst.max(rel(dx.data[k], (fp - fm) / (2.0 * eps)));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
