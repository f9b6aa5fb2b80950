//! Synthetic paired data: labeled phantoms and k-space motion corruption.

pub mod dataset;
pub mod phantom;
pub mod simulate;
pub mod trajectory;

pub use dataset::{make_paired_dataset, make_subject, parse_manifest, render_manifest, ForgedSubject, ManifestRecord, ScanEntry};
pub use phantom::{generate_phantom, PhantomSpec};
pub use simulate::{simulate_motion, simulate_motion_report, SimulationReport};
pub use trajectory::{sample_trajectory, MotionEvent, MotionTrajectory, Severity};
