use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use mamoc_core::forge::{make_paired_dataset, parse_manifest, render_manifest, ManifestRecord, ScanEntry, Severity};
use mamoc_core::metrics::{difference_maps, evaluate_scan, render_report, ReportRow};
use mamoc_core::net::checkpoint::Phase;
use mamoc_core::net::{load_checkpoint, save_checkpoint, Checkpoint, MamocNet};
use mamoc_core::params::ParamStore;
use mamoc_core::train::{train, OptimizerState, PairedSubject, TrainData};
use mamoc_core::ttp::correct_scan;
use mamoc_core::volume::{
    decode_volume, load_labels, load_nifti, resample_volume, save_labels, save_volume, split_by_subject, LabelVolume, Split, Volume,
    MVOL_MAGIC,
};
use mamoc_core::Error;
use rayon::prelude::*;

use crate::config::{PhaseConfig, RunConfig};
use crate::CliError;

pub const MANIFEST: &str = "manifest.jsonl";
pub const RESOLVED: &str = "resolved_config.toml";
pub const REPORT: &str = "report.txt";

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(io_at(dir)),
        None => Ok(()),
    }
}

/// Generates the paired dataset, assigns the subject split and writes
/// volumes, labels and the manifest under `data.dir`.
pub fn simulate(cfg: &RunConfig) -> Result<String, CliError> {
    let d = &cfg.data;
    let subjects = make_paired_dataset(d.subjects, &d.phantom, d.line_groups, d.seed)?;
    let ids: Vec<String> = subjects.iter().map(|s| s.record.subject_id.clone()).collect();
    let split = if ids.len() > 1 { Some(split_by_subject(&ids, d.train_fraction, d.seed)?) } else { None };
    fs::create_dir_all(&d.dir).map_err(io_at(&d.dir))?;
    let mut records = Vec::with_capacity(subjects.len());
    for s in &subjects {
        let id = &s.record.subject_id;
        let sub_dir = d.dir.join(id);
        fs::create_dir_all(&sub_dir).map_err(io_at(&sub_dir))?;
        save_volume(s.record.clean()?, sub_dir.join("clean.mvol"))?;
        let labels = s.record.labels.as_ref().map(|l| -> Result<String, CliError> {
            save_labels(l, sub_dir.join("labels.mvol"))?;
            Ok(format!("{id}/labels.mvol"))
        });
        let mut scans = Vec::new();
        for sev in &d.severities {
            let vol = s.record.scans.get(&sev.kind()).ok_or_else(|| Error::ManifestError(format!("{id} lacks {sev}")))?;
            save_volume(vol, sub_dir.join(format!("{sev}.mvol")))?;
            scans.push(ScanEntry { severity: *sev, path: format!("{id}/{sev}.mvol"), trajectory: s.trajectories[sev].clone() });
        }
        records.push(ManifestRecord {
            subject_id: id.clone(),
            split: split.as_ref().map_or(Split::Train, |sp| sp.split_of(id)),
            clean: format!("{id}/clean.mvol"),
            labels: labels.transpose()?,
            scans,
        });
    }
    let manifest = d.dir.join(MANIFEST);
    fs::write(&manifest, render_manifest(&records)).map_err(io_at(&manifest))?;
    cfg.echo(&d.dir.join(RESOLVED))?;
    let n_test = records.iter().filter(|r| r.split == Split::Test).count();
    Ok(format!(
        "simulated {} subjects ({} train, {n_test} test) into {}",
        records.len(),
        records.len() - n_test,
        d.dir.display()
    ))
}

/// A manifest record with its volumes loaded.
pub struct LoadedSubject {
    pub record: ManifestRecord,
    pub clean: Volume,
    pub labels: Option<LabelVolume>,
    pub scans: Vec<(Severity, Volume)>,
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedSubject>, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_at(&path))?;
    let records = parse_manifest(&text)?;
    if records.is_empty() {
        return Err(Error::ManifestError(format!("{} lists no subjects", path.display())).into());
    }
    records
        .into_iter()
        .map(|record| {
            let clean = mamoc_core::volume::load_volume(dir.join(&record.clean))?;
            let labels = record.labels.as_ref().map(|l| load_labels(dir.join(l))).transpose()?;
            let scans = record
                .scans
                .iter()
                .map(|s| Ok((s.severity, mamoc_core::volume::load_volume(dir.join(&s.path))?)))
                .collect::<Result<Vec<_>, CliError>>()?;
            Ok(LoadedSubject { record, clean, labels, scans })
        })
        .collect()
}

fn require_side(v: &Volume, side: usize, what: &str) -> Result<(), CliError> {
    if v.dims() != [side; 3] {
        return Err(Error::DimMismatch(format!("{what} is {:?}, the model expects {side}^3", v.dims())).into());
    }
    Ok(())
}

fn split_subjects(all: Vec<LoadedSubject>, split: Split, side: usize) -> Result<Vec<LoadedSubject>, CliError> {
    let chosen: Vec<LoadedSubject> = all.into_iter().filter(|s| s.record.split == split).collect();
    if chosen.is_empty() {
        return Err(Error::ManifestError(format!("no {split:?} subjects in the manifest")).into());
    }
    for s in &chosen {
        require_side(&s.clean, side, &s.record.subject_id)?;
        for (sev, v) in &s.scans {
            require_side(v, side, &format!("{} {sev}", s.record.subject_id))?;
        }
    }
    Ok(chosen)
}

fn load_matching(path: &Path, net: &MamocNet) -> Result<Checkpoint, CliError> {
    let ck = load_checkpoint(path)?;
    if &ck.config != net.config() {
        return Err(Error::CheckpointError(format!("{} was trained with a different model configuration", path.display())).into());
    }
    Ok(ck)
}

fn resume_state(ck: Checkpoint, phase: Phase, path: &Path) -> Result<(ParamStore<f32>, OptimizerState<f32>), CliError> {
    if ck.phase != phase {
        return Err(Error::CheckpointError(format!("{} holds a {} checkpoint, not {phase}", path.display(), ck.phase)).into());
    }
    let momentum = ck.momentum.unwrap_or_else(|| ck.params.zeros_like());
    Ok((ck.params, OptimizerState { momentum, step: ck.step }))
}

fn run_phase(
    net: &MamocNet,
    phase_cfg: &PhaseConfig,
    phase: Phase,
    data: &TrainData,
    mut params: ParamStore<f32>,
    mut state: OptimizerState<f32>,
    run: &RunConfig,
) -> Result<String, CliError> {
    let ck_path = &phase_cfg.checkpoint;
    ensure_parent(ck_path)?;
    run.echo(&ck_path.with_extension("config.toml"))?;
    let log_path = ck_path.with_extension("log");
    let resumed = state.step > 0;
    let log = OpenOptions::new().create(true).write(true).append(resumed).truncate(!resumed).open(&log_path).map_err(io_at(&log_path))?;
    let mut log = BufWriter::new(log);
    let cfg = &phase_cfg.train;
    let snapshot = |params: &ParamStore<f32>, state: &OptimizerState<f32>| Checkpoint {
        config: net.config().clone(),
        seed: cfg.seed,
        phase,
        step: state.step,
        params: params.clone(),
        momentum: Some(state.momentum.clone()),
    };
    let mut first = None;
    let mut last = None;
    train(net, &mut params, &mut state, cfg, data, |l, p, st| {
        writeln!(log, "{}", l.line())?;
        first.get_or_insert(l.loss.total);
        last = Some(l.loss.total);
        if l.step % 25 == 0 {
            info!("{}", l.line());
        }
        if cfg.checkpoint_every > 0 && l.step % cfg.checkpoint_every == 0 && l.step < cfg.steps {
            save_checkpoint(&snapshot(p, st), ck_path)?;
        }
        Ok(())
    })?;
    log.flush().map_err(io_at(&log_path))?;
    save_checkpoint(&snapshot(&params, &state), ck_path)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.6e}"));
    Ok(format!("{phase}: step {} loss {} -> {}; checkpoint {}", state.step, fmt(first), fmt(last), ck_path.display()))
}

pub fn pretrain(cfg: &RunConfig, resume: bool) -> Result<String, CliError> {
    let net = MamocNet::new(cfg.model.clone())?;
    let subjects = split_subjects(load_dataset(&cfg.data.dir)?, Split::Train, cfg.model.side)?;
    let phase = &cfg.pretrain;
    let (params, state) = if resume && phase.checkpoint.exists() {
        resume_state(load_matching(&phase.checkpoint, &net)?, Phase::Pretrain, &phase.checkpoint)?
    } else {
        let p = net.init_parameters(phase.init_seed);
        let st = OptimizerState::new(&p);
        (p, st)
    };
    let data = TrainData::Clean(subjects.into_iter().map(|s| s.clean).collect());
    run_phase(&net, phase, Phase::Pretrain, &data, params, state, cfg)
}

pub fn finetune(cfg: &RunConfig, resume: bool, cold_start: bool) -> Result<String, CliError> {
    let net = MamocNet::new(cfg.model.clone())?;
    let subjects = split_subjects(load_dataset(&cfg.data.dir)?, Split::Train, cfg.model.side)?;
    let phase = &cfg.finetune;
    let (params, state) = if resume && phase.checkpoint.exists() {
        resume_state(load_matching(&phase.checkpoint, &net)?, Phase::Finetune, &phase.checkpoint)?
    } else {
        let params = match &phase.init {
            Some(p) if p.exists() => load_matching(p, &net)?.params,
            _ if cold_start => net.init_parameters(phase.init_seed),
            Some(p) => return Err(CliError::MissingCheckpoint(p.display().to_string())),
            None => return Err(CliError::MissingCheckpoint("finetune.init (unset)".into())),
        };
        let st = OptimizerState::new(&params);
        (params, st)
    };
    let data = TrainData::Paired(
        subjects
            .into_iter()
            .map(|s| PairedSubject {
                id: s.record.subject_id,
                clean: Some(s.clean),
                affected: s.scans.into_iter().filter(|(sev, _)| cfg.data.severities.contains(sev)).map(|(_, v)| v).collect(),
            })
            .collect(),
    );
    run_phase(&net, phase, Phase::Finetune, &data, params, state, cfg)
}

/// MVOL1 by magic, NIfTI-1 (plain or gzip) otherwise.
pub fn read_volume(path: &Path) -> Result<Volume, CliError> {
    let bytes = fs::read(path).map_err(io_at(path))?;
    if bytes.starts_with(MVOL_MAGIC.as_bytes()) {
        Ok(decode_volume(&bytes)?)
    } else {
        Ok(load_nifti(&bytes)?)
    }
}

fn inference_model(cfg: &RunConfig) -> Result<(MamocNet, ParamStore<f32>), CliError> {
    let path = &cfg.inference.checkpoint;
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path.display().to_string()));
    }
    let ck = load_checkpoint(path)?;
    let net = MamocNet::new(ck.config.clone())?;
    Ok((net, ck.params))
}

pub fn correct(cfg: &RunConfig, input: &Path, output: &Path, resample: bool) -> Result<String, CliError> {
    let (net, params) = inference_model(cfg)?;
    let side = net.config().side;
    let vol = read_volume(input)?;
    let dims = vol.dims();
    let ttp = &cfg.inference.ttp;
    let corrected = if dims == [side; 3] {
        correct_scan(&net, &params, &vol, ttp)?
    } else if resample {
        let small = resample_volume(&vol, [side; 3])?;
        let back = resample_volume(&correct_scan(&net, &params, &small, ttp)?, dims)?;
        back.with_spacing(vol.spacing())?
    } else {
        return Err(Error::ShapeMismatch(format!("input {dims:?} differs from the model's {side}^3; pass --resample")).into());
    };
    ensure_parent(output)?;
    save_volume(&corrected, output)?;
    cfg.echo(&output.with_extension("config.toml"))?;
    Ok(format!("keep_prob={} passes={} seed={} block={} output={}", ttp.keep_prob, ttp.passes, ttp.seed, ttp.block, output.display()))
}

struct SubjectEval {
    rows: Vec<ReportRow>,
    outputs: Vec<(PathBuf, Volume)>,
}

fn evaluate_subject(cfg: &RunConfig, net: &MamocNet, params: &ParamStore<f32>, s: &LoadedSubject) -> Result<SubjectEval, CliError> {
    let id = &s.record.subject_id;
    let dir = cfg.eval.out.join(id);
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    let mut group: Vec<(String, Volume)> = Vec::new();
    for (sev, affected) in &s.scans {
        let corrected = correct_scan(net, params, affected, &cfg.inference.ttp)?;
        for (method, candidate) in [("affected", affected), ("corrected", &corrected)] {
            rows.push(ReportRow {
                subject: id.clone(),
                severity: sev.to_string(),
                method: method.to_owned(),
                metrics: evaluate_scan(&s.clean, affected, candidate, s.labels.as_ref(), &cfg.eval.metrics)?,
            });
            group.push((format!("{sev}_{method}"), candidate.clone()));
        }
        outputs.push((dir.join(format!("{sev}_corrected.mvol")), corrected));
    }
    let refs: Vec<&Volume> = group.iter().map(|(_, v)| v).collect();
    for ((name, _), map) in group.iter().zip(difference_maps(&s.clean, &refs)?) {
        outputs.push((dir.join(format!("{name}_diff.mvol")), map));
    }
    Ok(SubjectEval { rows, outputs })
}

/// Corrects every held-out scan, scores it and the uncorrected scan against
/// the clean reference, and writes the report with volumes and difference
/// maps under `eval.out`.
pub fn evaluate(cfg: &RunConfig) -> Result<String, CliError> {
    let (net, params) = inference_model(cfg)?;
    let subjects = split_subjects(load_dataset(&cfg.data.dir)?, Split::Test, net.config().side)?;
    let results = subjects.par_iter().map(|s| evaluate_subject(cfg, &net, &params, s)).collect::<Result<Vec<_>, _>>()?;
    let out = &cfg.eval.out;
    fs::create_dir_all(out).map_err(io_at(out))?;
    let mut rows = Vec::new();
    for r in results {
        for (path, vol) in &r.outputs {
            ensure_parent(path)?;
            save_volume(vol, path)?;
        }
        rows.extend(r.rows);
    }
    let report = render_report(&rows);
    let path = out.join(REPORT);
    let mut f = File::create(&path).map_err(io_at(&path))?;
    f.write_all(report.as_bytes()).map_err(io_at(&path))?;
    cfg.echo(&out.join(RESOLVED))?;
    let summary: Vec<&str> = report.lines().filter(|l| l.starts_with("record=aggregate severity=all")).collect();
    Ok(format!("{} scan records in {}\n{}", rows.len(), path.display(), summary.join("\n")))
}
