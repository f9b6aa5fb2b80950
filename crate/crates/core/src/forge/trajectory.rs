//! Piecewise-constant rigid motion over groups of k-space lines.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::ScanKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Moderate,
    Heavy,
}

impl Severity {
    pub const ALL: [Severity; 2] = [Severity::Moderate, Severity::Heavy];

    /// Inclusive range of motion events after the initial pose.
    pub fn event_range(self) -> (usize, usize) {
        match self {
            Severity::Moderate => (1, 3),
            Severity::Heavy => (3, 8),
        }
    }

    /// Largest translation norm, in voxels.
    pub fn max_translation(self) -> f64 {
        match self {
            Severity::Moderate => 2.0,
            Severity::Heavy => 5.0,
        }
    }

    /// Largest rotation about any axis, in radians.
    pub fn max_rotation(self) -> f64 {
        match self {
            Severity::Moderate => 2f64.to_radians(),
            Severity::Heavy => 5f64.to_radians(),
        }
    }

    pub fn kind(self) -> ScanKind {
        match self {
            Severity::Moderate => ScanKind::Moderate,
            Severity::Heavy => ScanKind::Heavy,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind().as_str())
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moderate" => Ok(Severity::Moderate),
            "heavy" => Ok(Severity::Heavy),
            other => Err(Error::BadSeverity(other.to_owned())),
        }
    }
}

/// Pose held from line group `start` until the next event. Rotation angles
/// are about x, y and z through the volume center, applied in that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionEvent {
    pub start: usize,
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

impl MotionEvent {
    pub fn identity(start: usize) -> Self {
        Self { start, translation: [0.0; 3], rotation: [0.0; 3] }
    }

    pub fn is_identity(&self) -> bool {
        self.translation == [0.0; 3] && self.rotation == [0.0; 3]
    }

    fn translation_norm(&self) -> f64 {
        self.translation.iter().map(|t| t * t).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionTrajectory {
    pub severity: Severity,
    pub line_groups: usize,
    pub events: Vec<MotionEvent>,
}

fn bad(msg: String) -> Error {
    Error::BadTrajectory(msg)
}

impl MotionTrajectory {
    /// Motionless acquisition.
    pub fn identity(line_groups: usize) -> Self {
        Self { severity: Severity::Moderate, line_groups, events: vec![MotionEvent::identity(0)] }
    }

    /// Well-formed event schedule: starts strictly increasing from 0 and
    /// below `line_groups`, finite poses.
    pub fn check_structure(&self) -> Result<()> {
        if self.line_groups == 0 {
            return Err(bad("no line groups".into()));
        }
        match self.events.first() {
            Some(e) if e.start == 0 => {}
            _ => return Err(bad("the first event must start at group 0".into())),
        }
        for w in self.events.windows(2) {
            if w[1].start <= w[0].start {
                return Err(bad(format!("event starts {} and {} are not increasing", w[0].start, w[1].start)));
            }
        }
        for e in &self.events {
            if e.start >= self.line_groups {
                return Err(bad(format!("event start {} beyond {} groups", e.start, self.line_groups)));
            }
            if e.translation.iter().chain(&e.rotation).any(|v| !v.is_finite()) {
                return Err(bad(format!("event at group {} has a non-finite pose", e.start)));
            }
        }
        Ok(())
    }

    /// Structure plus an identity first pose and the severity's bounds.
    pub fn validate(&self) -> Result<()> {
        self.check_structure()?;
        if !self.events[0].is_identity() {
            return Err(bad("the first event must be the identity".into()));
        }
        let moves = self.events.len() - 1;
        if moves > self.severity.event_range().1 {
            return Err(bad(format!("{moves} events exceed the {} limit", self.severity)));
        }
        let (mt, mr) = (self.severity.max_translation(), self.severity.max_rotation());
        for e in &self.events {
            if e.translation_norm() > mt * (1.0 + 1e-12) {
                return Err(bad(format!("translation {:?} exceeds {mt} voxels", e.translation)));
            }
            if e.rotation.iter().any(|r| r.abs() > mr * (1.0 + 1e-12)) {
                return Err(bad(format!("rotation {:?} exceeds {mr} rad", e.rotation)));
            }
        }
        Ok(())
    }

    /// Index of the event in force during line group `g`.
    pub fn event_at(&self, g: usize) -> usize {
        self.events.iter().rposition(|e| e.start <= g).unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text).map_err(|e| bad(format!("trajectory: {e}")))?;
        t.validate()?;
        Ok(t)
    }
}

/// Identity pose at group 0 followed by a severity-bounded number of events
/// at distinct later groups. Translations point in a uniform direction with
/// a norm in the upper four fifths of the allowed range; each rotation angle
/// is uniform within the bound.
pub fn sample_trajectory(severity: Severity, line_groups: usize, seed: u64) -> Result<MotionTrajectory> {
    if line_groups < 2 {
        return Err(Error::BadSeverity(format!("{severity} motion needs at least 2 line groups, got {line_groups}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = severity.event_range();
    let n = rng.random_range(lo..=hi).min(line_groups - 1);
    let mut starts: Vec<usize> = sample(&mut rng, line_groups - 1, n).into_iter().map(|s| s + 1).collect();
    starts.sort_unstable();
    let (mt, mr) = (severity.max_translation(), severity.max_rotation());
    let mut events = vec![MotionEvent::identity(0)];
    for start in starts {
        let dir = loop {
            let v: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(&mut rng));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                break v.map(|x| x / norm);
            }
        };
        let mag = rng.random_range(0.2 * mt..=mt);
        let translation = dir.map(|d| (d * mag).clamp(-mt, mt));
        let rotation = [0, 1, 2].map(|_| rng.random_range(-mr..=mr));
        events.push(MotionEvent { start, translation, rotation });
    }
    Ok(MotionTrajectory { severity, line_groups, events })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_trajectories_respect_bounds() {
        for sev in Severity::ALL {
            for seed in 0..200 {
                let t = sample_trajectory(sev, 16, seed).unwrap();
                t.validate().unwrap();
                let moves = t.events.len() - 1;
                let (lo, hi) = sev.event_range();
                assert!((lo..=hi).contains(&moves));
                assert_eq!(t, sample_trajectory(sev, 16, seed).unwrap());
            }
        }
    }

    #[test]
    fn seeds_give_distinct_trajectories() {
        let mut seen: Vec<String> = (0..1000).map(|s| sample_trajectory(Severity::Heavy, 16, s).unwrap().to_json()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 1000);
    }

    #[test]
    fn json_round_trip_and_guards() {
        let t = sample_trajectory(Severity::Moderate, 8, 3).unwrap();
        assert_eq!(MotionTrajectory::from_json(&t.to_json()).unwrap(), t);
        assert!(matches!(sample_trajectory(Severity::Heavy, 1, 0), Err(Error::BadSeverity(_))));
        assert!(matches!("violent".parse::<Severity>(), Err(Error::BadSeverity(_))));
        let mut shifted = t.clone();
        shifted.events[0].translation[0] = 1.0;
        assert!(matches!(shifted.validate(), Err(Error::BadTrajectory(_))));
        assert!(shifted.check_structure().is_ok());
        let mut far = t;
        far.events.last_mut().unwrap().translation = [3.0, 0.0, 0.0];
        assert!(far.validate().is_err());
    }

    #[test]
    fn event_lookup_is_piecewise_constant() {
        let mut t = MotionTrajectory::identity(8);
        t.events.push(MotionEvent { start: 3, translation: [1.0, 0.0, 0.0], rotation: [0.0; 3] });
        assert_eq!((0..8).map(|g| t.event_at(g)).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1, 1, 1]);
    }
}
