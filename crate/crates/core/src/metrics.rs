//! Image-quality and segmentation-overlap measures, plus the line-oriented
//! evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

fn check_peak(peak: f64) -> Result<()> {
    if peak.is_finite() && peak > 0.0 {
        Ok(())
    } else {
        Err(Error::BadConfig(format!("peak {peak} must be positive")))
    }
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    a.require_same_dims(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// Decibels; `f64::INFINITY` when the volumes are identical.
pub fn psnr(a: &Volume, b: &Volume, peak: f64) -> Result<f64> {
    check_peak(peak)?;
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, peak: 1.0 }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::BadConfig(format!("SSIM window {} must be odd", self.window)));
        }
        for (k, v) in [("sigma", self.sigma), ("k1", self.k1), ("k2", self.k2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::BadConfig(format!("SSIM {k} {v} must be positive")));
            }
        }
        check_peak(self.peak)
    }

    fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as i64;
        (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * self.sigma * self.sigma)).exp()).collect()
    }
}

/// Normalized Gaussian smoothing along one axis; taps falling outside the
/// volume are dropped and the rest reweighted.
fn smooth_axis(data: &[f64], dims: [usize; 3], axis: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() / 2;
    let n = dims[axis];
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let norms: Vec<f64> = (0..n)
        .map(|i| (0..taps.len()).filter(|&k| (i + k).checked_sub(r).is_some_and(|j| j < n)).map(|k| taps[k]).sum())
        .collect();
    let mut out = vec![0.0; data.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let i = idx / stride % n;
        let base = idx - i * stride;
        let lo = r.saturating_sub(i);
        let hi = taps.len().min(n + r - i);
        let mut acc = 0.0;
        for k in lo..hi {
            acc += taps[k] * data[base + (i + k - r) * stride];
        }
        *o = acc / norms[i];
    }
    out
}

fn smooth(data: Vec<f64>, dims: [usize; 3], taps: &[f64]) -> Vec<f64> {
    (0..3).fold(data, |d, axis| smooth_axis(&d, dims, axis, taps))
}

/// Local statistics combine as
/// `(2 mu_a mu_b + C1)(2 cov + C2) / ((mu_a^2 + mu_b^2 + C1)(var_a + var_b + C2))`.
pub fn ssim_term(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

pub fn ssim(a: &Volume, b: &Volume, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    a.require_same_dims(b)?;
    let dims = a.dims();
    let side = *dims.iter().min().expect("three dims");
    if side < cfg.window {
        return Err(Error::VolumeTooSmall { side, window: cfg.window });
    }
    let taps = cfg.taps();
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_a = smooth(x.clone(), dims, &taps);
    let mu_b = smooth(y.clone(), dims, &taps);
    let ea2 = smooth(prod(&x, &x), dims, &taps);
    let eb2 = smooth(prod(&y, &y), dims, &taps);
    let eab = smooth(prod(&x, &y), dims, &taps);
    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);
    let total: f64 = (0..x.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            ssim_term(ma, mb, ea2[i] - ma * ma, eb2[i] - mb * mb, eab[i] - ma * mb, c1, c2)
        })
        .sum();
    Ok(total / x.len() as f64)
}

fn region(vol: &Volume, mask: &[bool], what: &'static str) -> Result<(f64, f64)> {
    if mask.len() != vol.len() {
        return Err(Error::DimMismatch(format!("{what} mask has {} voxels, volume {}", mask.len(), vol.len())));
    }
    let vals: Vec<f64> = vol.data().iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64).collect();
    if vals.is_empty() {
        return Err(Error::EmptyMask(what));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var))
}

fn disjoint(a: &[bool], b: &[bool]) -> Result<()> {
    if a.iter().zip(b).any(|(&x, &y)| x && y) {
        return Err(Error::OverlappingMasks);
    }
    Ok(())
}

/// Foreground mean over the population standard deviation of the background.
pub fn snr(vol: &Volume, fg: &[bool], bg: &[bool]) -> Result<f64> {
    let (mean, _) = region(vol, fg, "foreground")?;
    let (_, var) = region(vol, bg, "background")?;
    disjoint(fg, bg)?;
    if var == 0.0 {
        return Err(Error::BackgroundDegenerate);
    }
    Ok(mean / var.sqrt())
}

/// `|mean_gm - mean_wm| / sqrt(var_gm + var_wm)`, taken as 0 for two
/// identical constant regions.
pub fn cnr(vol: &Volume, gm: &[bool], wm: &[bool]) -> Result<f64> {
    let (mg, vg) = region(vol, gm, "gray matter")?;
    let (mw, vw) = region(vol, wm, "white matter")?;
    disjoint(gm, wm)?;
    let gap = (mg - mw).abs();
    if vg + vw == 0.0 {
        return if gap == 0.0 { Ok(0.0) } else { Err(Error::DegenerateContrast) };
    }
    Ok(gap / (vg + vw).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceScores {
    /// `None` for a class absent from both volumes.
    pub per_class: Vec<(u32, Option<f64>)>,
    /// Mean over the scored classes; 1 when no class is present at all.
    pub mean: f64,
}

/// Union of labels in either volume, background only on request.
pub fn label_classes(a: &LabelVolume, b: &LabelVolume, include_background: bool) -> Vec<u32> {
    let mut c = a.classes();
    c.extend(b.classes());
    c.into_iter().filter(|&k| include_background || k != 0).collect()
}

pub fn dice(a: &LabelVolume, b: &LabelVolume, classes: &[u32]) -> Result<DiceScores> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let per_class: Vec<(u32, Option<f64>)> = classes
        .iter()
        .map(|&c| {
            let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
            for (&x, &y) in a.labels().iter().zip(b.labels()) {
                na += (x == c) as usize;
                nb += (y == c) as usize;
                both += (x == c && y == c) as usize;
            }
            (c, (na + nb > 0).then(|| 2.0 * both as f64 / (na + nb) as f64))
        })
        .collect();
    let scored: Vec<f64> = per_class.iter().filter_map(|(_, s)| *s).collect();
    let mean = if scored.is_empty() { 1.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    Ok(DiceScores { per_class, mean })
}

/// Class-averaged `dice(mf, mc) - dice(mf, ma)` over the foreground classes
/// of all three segmentations.
pub fn dice_improvement(mf: &LabelVolume, ma: &LabelVolume, mc: &LabelVolume) -> Result<f64> {
    let mut classes = label_classes(mf, ma, false);
    classes.extend(label_classes(mf, mc, false));
    classes.sort_unstable();
    classes.dedup();
    Ok(dice(mf, mc, &classes)?.mean - dice(mf, ma, &classes)?.mean)
}

/// Intensity thresholds separating background, CSF, gray and white matter.
pub const TISSUE_THRESHOLDS: [f64; 3] = [0.1, 0.425, 0.725];

/// Labels each voxel with the number of thresholds it reaches.
pub fn threshold_segment(vol: &Volume, thresholds: &[f64]) -> Result<LabelVolume> {
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::BadConfig(format!("thresholds {thresholds:?} must increase")));
    }
    let labels = vol.data().iter().map(|&v| thresholds.iter().filter(|&&t| v as f64 >= t).count() as u32).collect();
    LabelVolume::new(vol.dims(), vol.spacing(), labels)
}

/// `|candidate - clean|` for a group of candidates, divided by the group's
/// common maximum so the maps share one scale.
pub fn difference_maps(clean: &Volume, candidates: &[&Volume]) -> Result<Vec<Volume>> {
    let raw = candidates.iter().map(|c| c.zip_map(clean, |a, b| (a - b).abs())).collect::<Result<Vec<_>>>()?;
    let peak = raw.iter().map(Volume::max_value).fold(0.0f32, f32::max);
    if peak == 0.0 {
        return Ok(raw);
    }
    raw.iter().map(|d| d.map(|v| v / peak)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub peak: f64,
    pub ssim: SsimConfig,
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { peak: 1.0, ssim: SsimConfig::default(), thresholds: TISSUE_THRESHOLDS.to_vec() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        check_peak(self.peak)?;
        self.ssim.validate()?;
        if self.thresholds.is_empty() || self.thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::BadConfig(format!("thresholds {:?} must be non-empty and increasing", self.thresholds)));
        }
        Ok(())
    }
}

/// Quality of one candidate against its clean reference. Region metrics are
/// absent when no labels are known or when their guards trip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub snr: Option<f64>,
    pub cnr: Option<f64>,
    pub dice: f64,
    pub dice_delta: f64,
}

/// Tissue ids as generated by the phantom.
pub const LABEL_GRAY: u32 = 2;
pub const LABEL_WHITE: u32 = 3;

pub fn evaluate_scan(
    clean: &Volume,
    affected: &Volume,
    candidate: &Volume,
    labels: Option<&LabelVolume>,
    cfg: &EvalConfig,
) -> Result<ScanMetrics> {
    cfg.validate()?;
    clean.require_same_dims(affected)?;
    clean.require_same_dims(candidate)?;
    let (snr_v, cnr_v) = match labels {
        Some(l) => {
            if l.dims() != clean.dims() {
                return Err(Error::DimMismatch(format!("labels {:?} vs scan {:?}", l.dims(), clean.dims())));
            }
            let fg: Vec<bool> = l.labels().iter().map(|&c| c != 0).collect();
            let bg: Vec<bool> = fg.iter().map(|f| !f).collect();
            (snr(candidate, &fg, &bg).ok(), cnr(candidate, &l.class_mask(LABEL_GRAY), &l.class_mask(LABEL_WHITE)).ok())
        }
        None => (None, None),
    };
    let seg_mf = threshold_segment(clean, &cfg.thresholds)?;
    let seg_ma = threshold_segment(affected, &cfg.thresholds)?;
    let seg_mc = threshold_segment(candidate, &cfg.thresholds)?;
    let classes = label_classes(&seg_mf, &seg_mc, false);
    Ok(ScanMetrics {
        psnr: psnr(candidate, clean, cfg.peak)?,
        ssim: ssim(candidate, clean, &cfg.ssim)?,
        snr: snr_v,
        cnr: cnr_v,
        dice: dice(&seg_mf, &seg_mc, &classes)?.mean,
        dice_delta: dice_improvement(&seg_mf, &seg_ma, &seg_mc)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub subject: String,
    pub severity: String,
    pub method: String,
    pub metrics: ScanMetrics,
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_owned(), num)
}

impl ReportRow {
    pub fn line(&self) -> String {
        let m = &self.metrics;
        format!(
            "record=scan subject={} severity={} method={} psnr={} ssim={} snr={} cnr={} dice={} dice_delta={}",
            self.subject,
            self.severity,
            self.method,
            num(m.psnr),
            num(m.ssim),
            opt(m.snr),
            opt(m.cnr),
            num(m.dice),
            num(m.dice_delta)
        )
    }
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, f64::NAN);
    }
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Scan rows in the given order, then one aggregate row per
/// (severity, method) and per method over all severities, sorted by key.
pub fn render_report(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&r.line());
        out.push('\n');
    }
    let mut groups: BTreeMap<(String, String), Vec<&ScanMetrics>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.severity.clone(), r.method.clone())).or_default().push(&r.metrics);
        groups.entry(("all".to_owned(), r.method.clone())).or_default().push(&r.metrics);
    }
    for ((severity, method), ms) in &groups {
        let _ = write!(out, "record=aggregate severity={severity} method={method} n={}", ms.len());
        let fields: [(&str, Vec<Option<f64>>); 6] = [
            ("psnr", ms.iter().map(|m| Some(m.psnr)).collect()),
            ("ssim", ms.iter().map(|m| Some(m.ssim)).collect()),
            ("snr", ms.iter().map(|m| m.snr).collect()),
            ("cnr", ms.iter().map(|m| m.cnr).collect()),
            ("dice", ms.iter().map(|m| Some(m.dice)).collect()),
            ("dice_delta", ms.iter().map(|m| Some(m.dice_delta)).collect()),
        ];
        for (name, vals) in fields {
            let vals: Option<Vec<f64>> = vals.into_iter().collect();
            match vals {
                Some(v) => {
                    let (m, s) = mean_std(&v);
                    let _ = write!(out, " {name}_mean={} {name}_std={}", num(m), num(s));
                }
                None => {
                    let _ = write!(out, " {name}_mean=na {name}_std=na");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Splits a report line into its named fields.
pub fn parse_record(line: &str) -> Result<BTreeMap<String, String>> {
    line.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_owned(), v.to_owned()))
                .ok_or_else(|| Error::ManifestError(format!("report field {kv:?} lacks '='")))
        })
        .collect()
}
