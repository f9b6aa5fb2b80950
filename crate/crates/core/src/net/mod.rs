//! The masked motion-correction U-Net: pointwise stem, encoder stages of
//! G2L blocks with patch merging, a bottleneck, mirrored decoder stages with
//! additive skips, a pointwise head and the output gate.

pub mod checkpoint;
pub mod gate;
pub mod resample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::g2l::{BlockCache, G2LBlock, G2LConfig};
use crate::layers::Linear;
use crate::params::{Gradients, ParamStore, Registry};
use crate::real::Real;
use crate::tensor::{add_into, FeatureGrid};
use crate::volume::Volume;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Phase};
use gate::{Gate, GateCache};
use resample::{ExpandCache, MergeCache, PatchExpand, PatchMerge};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub side: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub blocks_per_stage: usize,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub gate_hidden: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            side: 32,
            base_channels: 16,
            depth: 2,
            blocks_per_stage: 2,
            window: 4,
            heads: 4,
            mlp_ratio: 2.0,
            gate_hidden: 8,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn stage_side(&self, level: usize) -> usize {
        self.side >> level
    }

    pub fn stage_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Block configuration at `level` (0 = full resolution, `depth` =
    /// bottleneck); the window is clamped to the stage side.
    pub fn block_config(&self, level: usize) -> G2LConfig {
        G2LConfig {
            channels: self.stage_channels(level),
            window: self.window.min(self.stage_side(level)),
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("side", self.side),
            ("base_channels", self.base_channels),
            ("blocks_per_stage", self.blocks_per_stage),
            ("window", self.window),
            ("heads", self.heads),
            ("gate_hidden", self.gate_hidden),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::BadConfig(format!("model.{k} must be positive")));
            }
        }
        if self.depth > 8 || !self.side.is_multiple_of(1 << self.depth) {
            return Err(Error::BadConfig(format!("side {} not divisible by 2^{}", self.side, self.depth)));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::BadConfig(format!("model.init_std {} must be non-negative", self.init_std)));
        }
        for level in 0..=self.depth {
            let cfg = self.block_config(level);
            cfg.validate()?;
            if !self.stage_side(level).is_multiple_of(cfg.window) {
                return Err(Error::BadConfig(format!(
                    "window {} does not divide stage side {}",
                    cfg.window,
                    self.stage_side(level)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<G2LBlock>,
}

#[derive(Debug, Clone)]
pub struct MamocNet {
    config: ModelConfig,
    registry: Registry,
    stem: Linear,
    encoder: Vec<Stage>,
    merges: Vec<PatchMerge>,
    bottleneck: Stage,
    expands: Vec<PatchExpand>,
    decoder: Vec<Stage>,
    head: Linear,
    gate: Gate,
}

/// Outputs and gate internals for a batch, each `batch · S³` long.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput<T> {
    pub output: Vec<T>,
    pub prediction: Vec<T>,
    pub gate: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct NetCache<T> {
    stem_input: Vec<T>,
    encoder: Vec<Vec<BlockCache<T>>>,
    merges: Vec<MergeCache<T>>,
    bottleneck: Vec<BlockCache<T>>,
    expands: Vec<ExpandCache<T>>,
    decoder: Vec<Vec<BlockCache<T>>>,
    head_input: Vec<T>,
    gate: GateCache<T>,
    batch: usize,
}

fn build_stage(reg: &mut Registry, name: &str, cfg: G2LConfig, count: usize) -> Result<Stage> {
    let blocks = (0..count)
        .map(|j| G2LBlock::register(reg, &format!("{name}.block{j}"), cfg))
        .collect::<Result<_>>()?;
    Ok(Stage { blocks })
}

impl MamocNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut reg = Registry::new();
        let c0 = config.base_channels;
        let stem = Linear::register(&mut reg, "stem", 1, c0);
        let mut encoder = Vec::new();
        let mut merges = Vec::new();
        for level in 0..config.depth {
            let cfg = config.block_config(level);
            encoder.push(build_stage(&mut reg, &format!("enc{level}"), cfg, config.blocks_per_stage)?);
            merges.push(PatchMerge::register(&mut reg, &format!("enc{level}.merge"), cfg.channels));
        }
        let bottleneck = build_stage(&mut reg, "bottleneck", config.block_config(config.depth), config.blocks_per_stage)?;
        let mut expands = Vec::new();
        let mut decoder = Vec::new();
        for level in (0..config.depth).rev() {
            let cfg = config.block_config(level);
            expands.push(PatchExpand::register(&mut reg, &format!("dec{level}.expand"), 2 * cfg.channels)?);
            decoder.push(build_stage(&mut reg, &format!("dec{level}"), cfg, config.blocks_per_stage)?);
        }
        let head = Linear::register(&mut reg, "head", c0, 1);
        let gate = Gate::register(&mut reg, "gate", config.gate_hidden);
        Ok(Self { config, registry: reg, stem, encoder, merges, bottleneck, expands, decoder, head, gate })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn init_parameters(&self, seed: u64) -> ParamStore<f32> {
        self.registry.init(self.config.init_std, seed)
    }

    pub fn parameter_count(&self) -> usize {
        self.registry.total_count()
    }

    /// Checks that a store was produced for this architecture.
    pub fn check_params<T: Real>(&self, p: &ParamStore<T>) -> Result<()> {
        let specs = self.registry.specs();
        if p.len() != specs.len() || specs.iter().enumerate().any(|(i, s)| p.name(i) != s.name || p.shape(i) != s.shape) {
            return Err(Error::ShapeMismatch("parameter store does not match the model".into()));
        }
        Ok(())
    }

    fn check_inputs<T: Real>(&self, input: &FeatureGrid<T>, keep: &FeatureGrid<T>) -> Result<()> {
        if input.side != self.config.side || input.channels != 1 {
            return Err(Error::DimMismatch(format!(
                "input {}^3 x {} vs model side {}",
                input.side, input.channels, self.config.side
            )));
        }
        if !input.same_shape(keep) {
            return Err(Error::DimMismatch("keep grid differs from input".into()));
        }
        if input.batch == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(())
    }

    fn run<T: Real>(
        &self,
        p: &ParamStore<T>,
        input: &FeatureGrid<T>,
        keep: &FeatureGrid<T>,
        train: bool,
    ) -> Result<(NetOutput<T>, Option<NetCache<T>>)> {
        self.check_params(p)?;
        self.check_inputs(input, keep)?;
        let batch = input.batch;
        let side = self.config.side;
        let mut h = FeatureGrid {
            batch,
            side,
            channels: self.config.base_channels,
            data: self.stem.forward(p, &input.data),
        };

        let mut enc_caches = Vec::new();
        let mut merge_caches = Vec::new();
        let mut skips = Vec::new();
        for (stage, merge) in self.encoder.iter().zip(&self.merges) {
            let mut caches = Vec::new();
            for blk in &stage.blocks {
                let (o, c) = blk.forward(p, &h)?;
                caches.extend(train.then_some(c));
                h = o;
            }
            enc_caches.push(caches);
            let (o, c) = merge.forward(p, &h)?;
            merge_caches.extend(train.then_some(c));
            skips.push(std::mem::replace(&mut h, o));
        }
        let mut bottleneck_caches = Vec::new();
        for blk in &self.bottleneck.blocks {
            let (o, c) = blk.forward(p, &h)?;
            bottleneck_caches.extend(train.then_some(c));
            h = o;
        }
        let mut expand_caches = Vec::new();
        let mut dec_caches = Vec::new();
        for (stage, expand) in self.decoder.iter().zip(&self.expands) {
            let (mut o, c) = expand.forward(p, &h)?;
            expand_caches.extend(train.then_some(c));
            let skip = skips.pop().expect("skip per stage");
            add_into(&mut o.data, &skip.data);
            h = o;
            let mut caches = Vec::new();
            for blk in &stage.blocks {
                let (o, c) = blk.forward(p, &h)?;
                caches.extend(train.then_some(c));
                h = o;
            }
            dec_caches.push(caches);
        }
        let prediction = self.head.forward(p, &h.data);
        let (output, gate, gate_cache) = self.gate.forward(p, &input.data, &keep.data, &prediction);
        let cache = train.then(|| NetCache {
            stem_input: input.data.clone(),
            encoder: enc_caches,
            merges: merge_caches,
            bottleneck: bottleneck_caches,
            expands: expand_caches,
            decoder: dec_caches,
            head_input: h.data,
            gate: gate_cache,
            batch,
        });
        Ok((NetOutput { output, prediction, gate }, cache))
    }

    /// Inference pass over a batch of single-channel grids.
    pub fn forward<T: Real>(&self, p: &ParamStore<T>, input: &FeatureGrid<T>, keep: &FeatureGrid<T>) -> Result<NetOutput<T>> {
        Ok(self.run(p, input, keep, false)?.0)
    }

    pub fn forward_train<T: Real>(
        &self,
        p: &ParamStore<T>,
        input: &FeatureGrid<T>,
        keep: &FeatureGrid<T>,
    ) -> Result<(NetOutput<T>, NetCache<T>)> {
        let (out, cache) = self.run(p, input, keep, true)?;
        Ok((out, cache.expect("training cache")))
    }

    /// Accumulates parameter gradients given the gradient of the gated output.
    pub fn backward<T: Real>(&self, p: &ParamStore<T>, cache: &NetCache<T>, d_output: &[T], g: &mut Gradients<T>) -> Result<()> {
        self.check_params(g)?;
        let side = self.config.side;
        if d_output.len() != cache.batch * side.pow(3) {
            return Err(Error::ShapeMismatch(format!("output gradient has {} values", d_output.len())));
        }
        let dpred = self.gate.backward(p, &cache.gate, d_output, g);
        let mut dh = FeatureGrid {
            batch: cache.batch,
            side,
            channels: self.config.base_channels,
            data: self.head.backward(p, &cache.head_input, &dpred, g),
        };
        let mut dskips = Vec::new();
        for ((stage, expand), (caches, ecache)) in self
            .decoder
            .iter()
            .zip(&self.expands)
            .zip(cache.decoder.iter().zip(&cache.expands))
            .rev()
        {
            for (blk, c) in stage.blocks.iter().zip(caches).rev() {
                dh = blk.backward(p, c, &dh, g);
            }
            dskips.push(dh.clone());
            dh = expand.backward(p, ecache, &dh, g);
        }
        for (blk, c) in self.bottleneck.blocks.iter().zip(&cache.bottleneck).rev() {
            dh = blk.backward(p, c, &dh, g);
        }
        for ((stage, merge), (caches, mcache)) in self
            .encoder
            .iter()
            .zip(&self.merges)
            .zip(cache.encoder.iter().zip(&cache.merges))
            .rev()
        {
            dh = merge.backward(p, mcache, &dh, g);
            let skip = dskips.pop().expect("skip gradient per stage");
            add_into(&mut dh.data, &skip.data);
            for (blk, c) in stage.blocks.iter().zip(caches).rev() {
                dh = blk.backward(p, c, &dh, g);
            }
        }
        let (gw, gb) = g.pair_mut(self.stem.weight, self.stem.bias);
        crate::tensor::linear_backward(&cache.stem_input, 1, p.get(self.stem.weight), self.stem.d_out, &dh.data, gw, gb);
        Ok(())
    }

    /// Single-volume convenience wrapper around [`MamocNet::forward`].
    pub fn correct_volume(&self, p: &ParamStore<f32>, masked: &Volume, keep: &Volume) -> Result<Volume> {
        masked.require_same_dims(keep)?;
        let side = masked.cubic_side().ok_or_else(|| Error::DimMismatch(format!("{:?} is not cubic", masked.dims())))?;
        let input = FeatureGrid::new(1, side, 1, masked.data().to_vec())?;
        let keep = FeatureGrid::new(1, side, 1, keep.data().to_vec())?;
        let out = self.forward(p, &input, &keep)?;
        Volume::new(masked.dims(), masked.spacing(), out.output)
    }
}
