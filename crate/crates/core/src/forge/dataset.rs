use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::phantom::{generate_phantom, PhantomSpec};
use crate::forge::simulate::simulate_motion;
use crate::forge::trajectory::{sample_trajectory, MotionTrajectory, Severity};
use crate::real::mix_seed;
use crate::volume::{ScanKind, Split, SubjectRecord};

/// A subject's scans together with the trajectories that produced them.
#[derive(Debug, Clone)]
pub struct ForgedSubject {
    pub record: SubjectRecord,
    pub trajectories: BTreeMap<Severity, MotionTrajectory>,
}

pub fn subject_id(i: usize) -> String {
    format!("sub-{i:03}")
}

/// Subject `i` draws its phantom and both trajectories from streams derived
/// from `(seed, i)`, so any subject can be regenerated on its own.
pub fn make_subject(i: usize, spec: &PhantomSpec, line_groups: usize, seed: u64) -> Result<ForgedSubject> {
    let base = mix_seed(seed, i as u64);
    let (clean, labels) = generate_phantom(&PhantomSpec { seed: mix_seed(base, 0), ..spec.clone() })?;
    let mut scans = BTreeMap::new();
    let mut trajectories = BTreeMap::new();
    for (salt, sev) in (1u64..).zip(Severity::ALL) {
        let t = sample_trajectory(sev, line_groups, mix_seed(base, salt))?;
        scans.insert(sev.kind(), simulate_motion(&clean, &t)?);
        trajectories.insert(sev, t);
    }
    scans.insert(ScanKind::Clean, clean);
    Ok(ForgedSubject {
        record: SubjectRecord { subject_id: subject_id(i), scans, labels: Some(labels), split: Split::Unassigned },
        trajectories,
    })
}

pub fn make_paired_dataset(n_subjects: usize, spec: &PhantomSpec, line_groups: usize, seed: u64) -> Result<Vec<ForgedSubject>> {
    if n_subjects == 0 {
        return Err(Error::BadSpec("at least one subject is required".into()));
    }
    spec.validate()?;
    if line_groups > spec.side {
        return Err(Error::BadSpec(format!("{line_groups} line groups exceed {} phase-encode lines", spec.side)));
    }
    (0..n_subjects).into_par_iter().map(|i| make_subject(i, spec, line_groups, seed)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanEntry {
    pub severity: Severity,
    pub path: String,
    pub trajectory: MotionTrajectory,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub subject_id: String,
    pub split: Split,
    pub clean: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    pub scans: Vec<ScanEntry>,
}

pub fn render_manifest(records: &[ManifestRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("manifest record serializes") + "\n").collect()
}

/// Parses JSON-lines; blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut ids = BTreeSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let at = |msg: String| Error::ManifestError(format!("line {}: {msg}", n + 1));
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        if rec.subject_id.is_empty() || rec.subject_id.chars().any(char::is_whitespace) {
            return Err(at(format!("invalid subject id {:?}", rec.subject_id)));
        }
        if !ids.insert(rec.subject_id.clone()) {
            return Err(at(format!("duplicate subject {}", rec.subject_id)));
        }
        let mut seen = BTreeSet::new();
        for s in &rec.scans {
            if !seen.insert(s.severity) {
                return Err(at(format!("{} listed twice for {}", s.severity, rec.subject_id)));
            }
            s.trajectory.validate().map_err(|e| at(e.to_string()))?;
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn spec() -> PhantomSpec {
        PhantomSpec { side: 16, ..Default::default() }
    }

    #[test]
    fn records_hold_three_scans_from_one_source() {
        let ds = make_paired_dataset(3, &spec(), 8, 5).unwrap();
        assert_eq!(ds.len(), 3);
        for (i, s) in ds.iter().enumerate() {
            assert_eq!(s.record.subject_id, subject_id(i));
            assert_eq!(s.record.scans.len(), 3);
            let alone = make_subject(i, &spec(), 8, 5).unwrap();
            assert_eq!(alone.record.scans, s.record.scans);
            let clean = s.record.clean().unwrap();
            for (_, v) in s.record.affected() {
                assert!(psnr(v, clean, 1.0).unwrap().is_finite());
            }
        }
        assert!(matches!(make_paired_dataset(0, &spec(), 8, 5), Err(Error::BadSpec(_))));
    }

    #[test]
    fn manifest_round_trip_and_rejections() {
        let t = sample_trajectory(Severity::Heavy, 8, 1).unwrap();
        let rec = ManifestRecord {
            subject_id: "sub-000".into(),
            split: Split::Train,
            clean: "sub-000/clean.mvol".into(),
            labels: Some("sub-000/labels.mvol".into()),
            scans: vec![ScanEntry { severity: Severity::Heavy, path: "sub-000/heavy.mvol".into(), trajectory: t }],
        };
        let text = render_manifest(std::slice::from_ref(&rec));
        assert_eq!(parse_manifest(&text).unwrap(), vec![rec]);
        let twice = format!("{text}\n{text}");
        assert!(matches!(parse_manifest(&twice), Err(Error::ManifestError(m)) if m.contains("duplicate")));
        assert!(matches!(parse_manifest("{\"subject_id\": 3}"), Err(Error::ManifestError(_))));
        assert!(parse_manifest(&text.replace("\"train\"", "\"holdout\"")).is_err());
    }
}
