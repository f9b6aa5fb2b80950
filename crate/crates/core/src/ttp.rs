//! Test-time prediction: average the network output over several
//! independently masked copies of one scan.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{apply_mask, mask_to_voxel_grid, sample_block_mask, MaskSpec};
use crate::net::MamocNet;
use crate::params::ParamStore;
use crate::tensor::FeatureGrid;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub keep_prob: f64,
    pub passes: usize,
    pub seed: u64,
    pub block: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { keep_prob: 0.6, passes: 8, seed: 0, block: 4 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return Err(Error::BadConfig(format!("keep probability {} outside [0, 1]", self.keep_prob)));
        }
        if self.passes == 0 {
            return Err(Error::BadConfig("at least one pass is required".into()));
        }
        if self.block == 0 {
            return Err(Error::BadConfig("block side must be positive".into()));
        }
        Ok(())
    }

    /// Mask seed of pass `i`, counted from 1.
    pub fn pass_seed(&self, i: usize) -> u64 {
        self.seed ^ i as u64
    }
}

fn check(net: &MamocNet, vol: &Volume, cfg: &InferenceConfig) -> Result<usize> {
    cfg.validate()?;
    let side = net.config().side;
    if vol.dims() != [side; 3] {
        return Err(Error::DimMismatch(format!("scan {:?} but the model expects {side}^3", vol.dims())));
    }
    MaskSpec::new(side, cfg.block, cfg.keep_prob, 0).map_err(|e| Error::BadConfig(e.to_string()))?;
    Ok(side)
}

/// Masked input and keep indicator of pass `i`.
pub fn masked_copy(vol: &Volume, side: usize, cfg: &InferenceConfig, i: usize) -> Result<(Volume, Volume)> {
    let mask = sample_block_mask(&MaskSpec::new(side, cfg.block, cfg.keep_prob, cfg.pass_seed(i))?)?;
    Ok((apply_mask(vol, &mask)?, mask_to_voxel_grid(&mask, side)?))
}

/// One masked pass; the building block of both averaging routes.
pub fn single_pass(net: &MamocNet, params: &ParamStore<f32>, vol: &Volume, cfg: &InferenceConfig, i: usize) -> Result<Volume> {
    let side = check(net, vol, cfg)?;
    let (masked, keep) = masked_copy(vol, side, cfg, i)?;
    net.correct_volume(params, &masked, &keep)
}

/// Sums in pass order, then divides once.
fn mean_of(outputs: &[Vec<f32>]) -> Vec<f32> {
    let mut acc = outputs[0].clone();
    for o in &outputs[1..] {
        for (a, v) in acc.iter_mut().zip(o) {
            *a += *v;
        }
    }
    let l = outputs.len() as f32;
    acc.iter_mut().for_each(|a| *a /= l);
    acc
}

pub fn correct_scan(net: &MamocNet, params: &ParamStore<f32>, vol: &Volume, cfg: &InferenceConfig) -> Result<Volume> {
    check(net, vol, cfg)?;
    let outputs = (1..=cfg.passes)
        .into_par_iter()
        .map(|i| single_pass(net, params, vol, cfg, i).map(Volume::into_data))
        .collect::<Result<Vec<_>>>()?;
    Volume::new(vol.dims(), vol.spacing(), mean_of(&outputs))
}

/// The same average, with all masked copies stacked into one batch.
pub fn correct_batchlike(net: &MamocNet, params: &ParamStore<f32>, vol: &Volume, cfg: &InferenceConfig) -> Result<Volume> {
    let side = check(net, vol, cfg)?;
    let mut input = Vec::with_capacity(cfg.passes * vol.len());
    let mut keep = Vec::with_capacity(cfg.passes * vol.len());
    for i in 1..=cfg.passes {
        let (m, k) = masked_copy(vol, side, cfg, i)?;
        input.extend_from_slice(m.data());
        keep.extend_from_slice(k.data());
    }
    let input = FeatureGrid::new(cfg.passes, side, 1, input)?;
    let keep = FeatureGrid::new(cfg.passes, side, 1, keep)?;
    let out = net.forward(params, &input, &keep)?.output;
    let outputs: Vec<Vec<f32>> = out.chunks(vol.len()).map(<[f32]>::to_vec).collect();
    Volume::new(vol.dims(), vol.spacing(), mean_of(&outputs))
}
