//! Experiment orchestration: plans of arms, cached per-seed phases, the
//! results table and the report.
//!
//! Layout of an output directory:
//!
//! ```text
//! plan.json  results.json  results.csv  report.md  strips/
//! seed<k>/pretrain/<arch>-<dir>/    model checkpoint, trainer state, log
//! seed<k>/attacks/{pgd,ogan}/       protected/ frames, generator, distortions.json
//! seed<k>/victims/<arch>-<dir>-<set>/  snapshots, lineage.json
//! seed<k>/results/<arm>/            report.json, curve.csv
//! ```

mod plan;
mod report;
mod results;
mod workspace;

pub use plan::{ArmSpec, AttackKind, DeskSettings, ExperimentPlan, SwapDirection, TrainingSet, VictimKey};
pub use report::{abs_diff_image, hstack, report, ReportOutput, DIFF_GAIN};
pub use results::{
    arm_dir, evaluate_at, run_arm, run_curve, run_plan, ArmStatus, ArmSummary, ResultRow, ResultsTable, RESULTS_FILE,
};
pub use workspace::{samples_digest, Lineage, OganArtifacts, PhaseRecord, Workspace, PHASE_FILE};
