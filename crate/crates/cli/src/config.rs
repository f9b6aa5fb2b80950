//! Run configuration: a TOML file with one table per pipeline stage, dotted
//! `--set` overrides, and the resolved echo written next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use mamoc_core::forge::{PhantomSpec, Severity};
use mamoc_core::metrics::EvalConfig;
use mamoc_core::net::ModelConfig;
use mamoc_core::train::TrainConfig;
use mamoc_core::ttp::InferenceConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory holding the manifest and per-subject volumes.
    pub dir: PathBuf,
    pub subjects: usize,
    pub line_groups: usize,
    pub severities: Vec<Severity>,
    pub train_fraction: f64,
    pub seed: u64,
    pub phantom: PhantomSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: "data".into(),
            subjects: 8,
            line_groups: 16,
            severities: Severity::ALL.to_vec(),
            train_fraction: 0.75,
            seed: 0,
            phantom: PhantomSpec::default(),
        }
    }
}

/// Pretraining and fine-tuning share this shape but not their defaults, so
/// missing keys are filled by merging onto the serialized defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    /// Where the phase writes its checkpoint; the log goes next to it.
    pub checkpoint: PathBuf,
    /// Starting point of fine-tuning; ignored by pretraining.
    pub init: Option<PathBuf>,
    pub init_seed: u64,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl PhaseConfig {
    fn named(name: &str, seed: u64) -> Self {
        Self {
            checkpoint: format!("runs/{name}.ckpt").into(),
            init: (name == "finetune").then(|| "runs/pretrain.ckpt".into()),
            init_seed: 0,
            train: TrainConfig { seed, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    /// Checkpoint used by `correct` and `evaluate`.
    pub checkpoint: PathBuf,
    #[serde(flatten)]
    pub ttp: InferenceConfig,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self { checkpoint: "runs/finetune.ckpt".into(), ttp: InferenceConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub out: PathBuf,
    #[serde(flatten)]
    pub metrics: EvalConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { out: "runs/eval".into(), metrics: EvalConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub inference: InferenceSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PhaseConfig::named("pretrain", 0),
            finetune: PhaseConfig::named("finetune", 1),
            inference: InferenceSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies one `section.key[.sub]=value` override.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| config_err(format!("override {assignment:?} lacks '='")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("override key {path:?} is malformed")));
    }
    let (last, parents) = keys.split_last().expect("split yields a key");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| config_err(format!("override {path}: {k} is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Layers the file at `path` and then the overrides onto the defaults,
    /// and validates every section.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = toml::Table::try_from(Self::default()).expect("defaults serialize");
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            let file = text.parse::<toml::Table>().map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_toml(&toml::to_string(&table).map_err(|e| config_err(e.to_string()))?)
    }

    /// Parses a complete configuration such as a resolved echo.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        if d.subjects == 0 {
            return Err(config_err("data.subjects must be at least 1"));
        }
        if d.severities.is_empty() {
            return Err(config_err("data.severities must list at least one severity"));
        }
        d.phantom.validate()?;
        self.model.validate()?;
        if d.phantom.side != self.model.side {
            return Err(config_err(format!("data.phantom.side {} differs from model.side {}", d.phantom.side, self.model.side)));
        }
        for (name, phase) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            phase.train.validate().map_err(|e| config_err(format!("{name}: {e}")))?;
        }
        self.inference.ttp.validate()?;
        self.eval.metrics.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration to `path`.
    pub fn echo(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_toml())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_the_echo() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::resolve(None, &[]).unwrap(), cfg);
    }

    #[test]
    fn partial_files_keep_phase_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[finetune]\nsteps = 3\n[data.phantom]\nnoise_sigma = 0.0\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &[]).unwrap();
        assert_eq!(cfg.finetune.train.steps, 3);
        assert_eq!(cfg.finetune.train.seed, 1);
        assert_eq!(cfg.finetune.checkpoint, PathBuf::from("runs/finetune.ckpt"));
        assert_eq!(cfg.data.phantom.noise_sigma, 0.0);
        assert_eq!(cfg.data.phantom.side, 32);
    }

    #[test]
    fn overrides_reach_nested_and_flattened_keys() {
        let sets = ["pretrain.steps=7", "data.phantom.noise_sigma=0.5", "inference.keep_prob=1.0", "data.dir=elsewhere"].map(String::from);
        let cfg = RunConfig::resolve(None, &sets).unwrap();
        assert_eq!(cfg.pretrain.train.steps, 7);
        assert_eq!(cfg.data.phantom.noise_sigma, 0.5);
        assert_eq!(cfg.inference.ttp.keep_prob, 1.0);
        assert_eq!(cfg.data.dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_key() {
        let err = RunConfig::resolve(None, &["pretrain.stepz=7".into()]).unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("stepz")), "{err}");
        let err = RunConfig::resolve(None, &["data.severities=[\"violent\"]".into()]).unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("severities")), "{err}");
        assert!(RunConfig::resolve(None, &["model.side=24".into()]).is_err());
        assert!(RunConfig::resolve(None, &["nokey".into()]).is_err());
    }
}
