//! Losses, batched gradients, the two training phases and the loop driver.
//!
//! Every step draws from its own ChaCha stream seeded by `(seed, step)`, so
//! a run resumed from a checkpoint replays the uninterrupted trajectory.

pub mod gradcheck;
pub mod lion;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{apply_mask, mask_to_voxel_grid, sample_block_mask, MaskSpec};
use crate::net::checkpoint::Phase;
use crate::net::MamocNet;
use crate::params::{Gradients, ParamStore};
use crate::real::{mix_seed, Real};
use crate::tensor::FeatureGrid;
use crate::volume::Volume;

pub use gradcheck::{finite_difference_check, network_gradient_check, GradCheckReport};
pub use lion::{lion_step, LionConfig, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub p_min: f64,
    pub p_max: f64,
    pub block: usize,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            batch_size: 2,
            steps: 500,
            p_min: 0.0,
            p_max: 1.0,
            block: 4,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn lion(&self) -> LionConfig {
        LionConfig { lr: self.lr, weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2 }
    }

    pub fn validate(&self) -> Result<()> {
        self.lion().validate()?;
        if self.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_min) || !(0.0..=1.0).contains(&self.p_max) || self.p_min > self.p_max {
            return Err(Error::BadConfig(format!("keep range [{}, {}] outside [0, 1]", self.p_min, self.p_max)));
        }
        if self.block == 0 {
            return Err(Error::BadConfig("block must be positive".into()));
        }
        Ok(())
    }

    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.seed, step))
    }
}

/// Mean squared voxel difference over the whole volume.
pub fn l2_loss(pred: &Volume, target: &Volume) -> Result<f64> {
    pred.require_same_dims(target)?;
    Ok(l2_slices(pred.data(), target.data()))
}

fn l2_slices<T: Real>(a: &[T], b: &[T]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    s / a.len() as f64
}

/// Loss split by voxel role; `masked`/`unmasked` are means over those voxels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub masked: f64,
    pub unmasked: f64,
}

fn breakdown<T: Real>(out: &[T], target: &[T], keep: &[T]) -> LossBreakdown {
    let (mut sm, mut nm, mut su, mut nu) = (0.0, 0usize, 0.0, 0usize);
    for ((&o, &t), &k) in out.iter().zip(target).zip(keep) {
        let e = (o.as_f64() - t.as_f64()).powi(2);
        if k == T::zero() {
            sm += e;
            nm += 1;
        } else {
            su += e;
            nu += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    LossBreakdown { total: (sm + su) / out.len() as f64, masked: mean(sm, nm), unmasked: mean(su, nu) }
}

/// One network input: masked scan, keep grid and full-volume target.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub input: Vec<T>,
    pub keep: Vec<T>,
    pub target: Vec<T>,
}

/// Loss averaged over the batch (equal-sized scans, so the voxel mean) and
/// its gradient with respect to every parameter.
pub fn batch_backward<T: Real>(
    net: &MamocNet,
    params: &ParamStore<T>,
    batch: &[Example<T>],
) -> Result<(LossBreakdown, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let side = net.config().side;
    let n = side.pow(3);
    for ex in batch {
        if ex.input.len() != n || ex.keep.len() != n || ex.target.len() != n {
            return Err(Error::ShapeMismatch(format!("example does not hold {side}^3 voxels")));
        }
    }
    let cat = |f: fn(&Example<T>) -> &Vec<T>| -> Vec<T> { batch.iter().flat_map(|e| f(e).iter().copied()).collect() };
    let input = FeatureGrid::new(batch.len(), side, 1, cat(|e| &e.input))?;
    let keep = FeatureGrid::new(batch.len(), side, 1, cat(|e| &e.keep))?;
    let target = cat(|e| &e.target);
    let (out, cache) = net.forward_train(params, &input, &keep)?;
    let loss = breakdown(&out.output, &target, &keep.data);
    let scale = T::lit(2.0 / out.output.len() as f64);
    let d: Vec<T> = out.output.iter().zip(&target).map(|(&o, &t)| scale * (o - t)).collect();
    let mut grads = params.zeros_like();
    net.backward(params, &cache, &d, &mut grads)?;
    Ok((loss, grads))
}

fn masked_example(scan: &Volume, target: &Volume, block: usize, p: f64, seed: u64) -> Result<Example<f32>> {
    scan.require_same_dims(target)?;
    let side = scan
        .cubic_side()
        .ok_or_else(|| Error::DimMismatch(format!("{:?} is not cubic", scan.dims())))?;
    let mask = sample_block_mask(&MaskSpec::new(side, block, p, seed)?)?;
    Ok(Example {
        input: apply_mask(scan, &mask)?.into_data(),
        keep: mask_to_voxel_grid(&mask, side)?.into_data(),
        target: target.data().to_vec(),
    })
}

fn draw_keep(rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> f64 {
    if cfg.p_min == cfg.p_max {
        cfg.p_min
    } else {
        rng.random_range(cfg.p_min..=cfg.p_max)
    }
}

/// Motion-affected variants of one subject and its clean reference.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub affected: &'a [&'a Volume],
    pub clean: Option<&'a Volume>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
}

fn apply_step(
    net: &MamocNet,
    params: &mut ParamStore<f32>,
    state: &mut OptimizerState<f32>,
    cfg: &TrainConfig,
    batch: &[Example<f32>],
) -> Result<StepReport> {
    let (loss, grads) = batch_backward(net, params, batch)?;
    lion_step(params, &grads, state, &cfg.lion())?;
    Ok(StepReport { loss })
}

/// Self-supervised step: each clean scan is masked at its own keep
/// probability and reconstructed against itself.
pub fn pretrain_step(
    net: &MamocNet,
    params: &mut ParamStore<f32>,
    state: &mut OptimizerState<f32>,
    cfg: &TrainConfig,
    clean: &[&Volume],
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    let mut batch = Vec::with_capacity(clean.len());
    for &scan in clean {
        let p = draw_keep(rng, cfg);
        let seed = rng.random::<u64>();
        batch.push(masked_example(scan, scan, cfg.block, p, seed)?);
    }
    apply_step(net, params, state, cfg, &batch)
}

/// Correction step: a masked motion-affected scan (severity drawn uniformly
/// among the available ones) is mapped to the subject's clean scan.
pub fn finetune_step(
    net: &MamocNet,
    params: &mut ParamStore<f32>,
    state: &mut OptimizerState<f32>,
    cfg: &TrainConfig,
    pairs: &[Pair<'_>],
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    let mut batch = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let clean = pair.clean.ok_or_else(|| Error::MissingCleanTarget(format!("batch item {i}")))?;
        if pair.affected.is_empty() {
            return Err(Error::EmptyInput);
        }
        let scan = if pair.affected.len() == 1 {
            pair.affected[0]
        } else {
            pair.affected[rng.random_range(0..pair.affected.len())]
        };
        let p = draw_keep(rng, cfg);
        let seed = rng.random::<u64>();
        batch.push(masked_example(scan, clean, cfg.block, p, seed)?);
    }
    apply_step(net, params, state, cfg, &batch)
}

/// Training material for one phase.
#[derive(Debug, Clone)]
pub enum TrainData {
    Clean(Vec<Volume>),
    Paired(Vec<PairedSubject>),
}

#[derive(Debug, Clone)]
pub struct PairedSubject {
    pub id: String,
    pub clean: Option<Volume>,
    pub affected: Vec<Volume>,
}

impl TrainData {
    pub fn phase(&self) -> Phase {
        match self {
            TrainData::Clean(_) => Phase::Pretrain,
            TrainData::Paired(_) => Phase::Finetune,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TrainData::Clean(v) => v.len(),
            TrainData::Paired(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub phase: Phase,
    pub loss: LossBreakdown,
    pub wall_seconds: f64,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!(
            "step={}\tphase={}\tloss={:.9e}\tmasked_loss={:.9e}\tunmasked_loss={:.9e}\twall_s={:.3}",
            self.step, self.phase, self.loss.total, self.loss.masked, self.loss.unmasked, self.wall_seconds
        )
    }
}

/// Runs steps `state.step .. cfg.steps`, calling `on_step` after each one.
/// Scans for a step are drawn with replacement from that step's stream.
pub fn train(
    net: &MamocNet,
    params: &mut ParamStore<f32>,
    state: &mut OptimizerState<f32>,
    cfg: &TrainConfig,
    data: &TrainData,
    mut on_step: impl FnMut(&StepLog, &ParamStore<f32>, &OptimizerState<f32>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let start = Instant::now();
    while state.step < cfg.steps {
        let step = state.step;
        let mut rng = cfg.step_rng(step);
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let report = match data {
            TrainData::Clean(scans) => {
                let batch: Vec<&Volume> = picks.iter().map(|&i| &scans[i]).collect();
                pretrain_step(net, params, state, cfg, &batch, &mut rng)?
            }
            TrainData::Paired(subjects) => {
                let refs: Vec<Vec<&Volume>> = picks.iter().map(|&i| subjects[i].affected.iter().collect()).collect();
                let pairs: Vec<Pair<'_>> = picks
                    .iter()
                    .zip(&refs)
                    .map(|(&i, a)| Pair { affected: a, clean: subjects[i].clean.as_ref() })
                    .collect();
                finetune_step(net, params, state, cfg, &pairs, &mut rng)?
            }
        };
        let log = StepLog { step: step + 1, phase: data.phase(), loss: report.loss, wall_seconds: start.elapsed().as_secs_f64() };
        on_step(&log, params, state)?;
    }
    Ok(())
}
