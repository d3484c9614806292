use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::plan::{ArmSpec, AttackKind, ExperimentPlan, VictimKey};
use super::workspace::{PhaseRecord, Workspace};
use crate::metrics::{write_curve, CurvePoint, TemporalReport};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmStatus {
    Completed,
    Failed,
}

/// One (arm, seed) outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub arm_id: String,
    pub arm: ArmSpec,
    pub seed: u64,
    pub status: ArmStatus,
    pub s_tmp: Option<f64>,
    pub e_tmp_attacked: Option<f64>,
    pub e_tmp_baseline: Option<f64>,
    /// Wall-clock seconds of every phase the arm depends on.
    pub runtime_s: f64,
    pub error: Option<String>,
}

/// Mean, min and max of an arm's S_tmp over completed seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm_id: String,
    pub seeds: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn get(&self, arm_id: &str, seed: u64) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.arm_id == arm_id && r.seed == seed)
    }

    /// Inserts or replaces the row for (arm, seed).
    pub fn upsert(&mut self, row: ResultRow) {
        self.rows.retain(|r| !(r.arm_id == row.arm_id && r.seed == row.seed));
        self.rows.push(row);
        self.rows.sort_by(|a, b| (&a.arm_id, a.seed).cmp(&(&b.arm_id, b.seed)));
    }

    pub fn all_completed(&self) -> bool {
        self.rows.iter().all(|r| r.status == ArmStatus::Completed)
    }

    pub fn summaries(&self) -> Vec<ArmSummary> {
        let mut by_arm: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            if let Some(s) = r.s_tmp {
                by_arm.entry(&r.arm_id).or_default().push(s);
            }
        }
        by_arm
            .into_iter()
            .map(|(id, v)| ArmSummary {
                arm_id: id.to_string(),
                seeds: v.len(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
            .collect()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("arm_id,seed,status,s_tmp,e_tmp_attacked,e_tmp_baseline,runtime_s\n");
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.1}\n",
                r.arm_id,
                r.seed,
                match r.status {
                    ArmStatus::Completed => "completed",
                    ArmStatus::Failed => "failed",
                },
                f(r.s_tmp),
                f(r.e_tmp_attacked),
                f(r.e_tmp_baseline),
                r.runtime_s
            ));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

pub fn arm_dir(ws: &Workspace, arm: &ArmSpec) -> PathBuf {
    ws.root().join("results").join(arm.id())
}

fn phase_seconds(dir: &Path) -> f64 {
    PhaseRecord::load(dir).ok().flatten().map(|r| r.seconds).unwrap_or(0.0)
}

fn dependency_seconds(ws: &Workspace, arm: &ArmSpec) -> f64 {
    let s = ws.settings();
    let mut t = phase_seconds(&ws.victim_dir(&arm.victim()));
    if arm.attack != AttackKind::None {
        t += phase_seconds(&ws.pretrain_dir(s.source_arch, super::plan::SwapDirection::AToB));
        t += phase_seconds(&ws.attack_dir(arm.attack));
    }
    t
}

/// S_tmp of the arm's victim at `iteration`: the attacked sequence is the
/// attack's O_A, the baseline the same victim swapping pristine P_A.
pub fn evaluate_at(ws: &Workspace, arm: &ArmSpec, iteration: u64) -> Result<TemporalReport> {
    let model = ws.snapshot(&arm.victim(), iteration)?;
    let attacked = ws.protected(arm.attack)?;
    ws.evaluate(&model, &attacked)
}

fn ensure_victim(ws: &Workspace, arm: &ArmSpec) -> Result<()> {
    ws.victim(&arm.victim(), arm.retrain_iterations, &arm.eval_points())?;
    Ok(())
}

/// pretrain → attack → D'_A or D_A∖P_A → fresh victim → swap → score.
pub fn run_arm(ws: &Workspace, arm: &ArmSpec) -> Result<TemporalReport> {
    arm.validate()?;
    ensure_victim(ws, arm)?;
    let report = evaluate_at(ws, arm, arm.retrain_iterations)?;
    let dir = arm_dir(ws, arm);
    report.save(&dir.join("report.json"))?;
    Ok(report)
}

/// S_tmp at every evaluation point of a curve arm; persisted as CSV.
pub fn run_curve(ws: &Workspace, arm: &ArmSpec) -> Result<Vec<CurvePoint>> {
    arm.validate()?;
    if !arm.include_adversarial_in_training {
        return Err(Error::Invalid(format!("curve arm {} must include adversarial samples", arm.id())));
    }
    ensure_victim(ws, arm)?;
    let points = arm
        .eval_points()
        .into_iter()
        .map(|k| {
            Ok(CurvePoint {
                iteration: k,
                s_tmp: evaluate_at(ws, arm, k)?.s_tmp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = arm_dir(ws, arm);
    write_curve(&dir.join("curve.csv"), &points)?;
    evaluate_at(ws, arm, arm.retrain_iterations)?.save(&dir.join("report.json"))?;
    Ok(points)
}

fn row(ws: &Workspace, arm: &ArmSpec, outcome: Result<TemporalReport>) -> ResultRow {
    let runtime_s = dependency_seconds(ws, arm);
    match outcome {
        Ok(r) => ResultRow {
            arm_id: arm.id(),
            arm: arm.clone(),
            seed: ws.seed(),
            status: ArmStatus::Completed,
            s_tmp: Some(r.s_tmp),
            e_tmp_attacked: Some(r.e_tmp_attacked),
            e_tmp_baseline: Some(r.e_tmp_baseline),
            runtime_s,
            error: None,
        },
        Err(e) => ResultRow {
            arm_id: arm.id(),
            arm: arm.clone(),
            seed: ws.seed(),
            status: ArmStatus::Failed,
            s_tmp: None,
            e_tmp_attacked: None,
            e_tmp_baseline: None,
            runtime_s,
            error: Some(e.to_string()),
        },
    }
}

pub const RESULTS_FILE: &str = "results.json";

/// Runs every arm for every seed. Victims shared between arms train once,
/// up to the largest iteration any of them needs; a failing arm is recorded
/// and the others continue. The table is saved after each arm.
pub fn run_plan(plan: &ExperimentPlan, out: &Path, mut progress: impl FnMut(&str)) -> Result<ResultsTable> {
    plan.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    plan.save(&out.join("plan.json"))?;
    let table_path = out.join(RESULTS_FILE);
    let mut table = if table_path.is_file() { ResultsTable::load(&table_path)? } else { ResultsTable::default() };

    let mut needs: BTreeMap<VictimKey, (u64, BTreeSet<u64>)> = BTreeMap::new();
    for arm in &plan.arms {
        let e = needs.entry(arm.victim()).or_default();
        e.0 = e.0.max(arm.retrain_iterations);
        e.1.extend(arm.eval_points());
    }
    for &seed in &plan.seeds {
        let ws = Workspace::new(out, seed, &plan.settings)?;
        let mut failed: BTreeMap<VictimKey, String> = BTreeMap::new();
        for (key, (until, points)) in &needs {
            progress(&format!("seed {seed}: victim {}", key.id()));
            let points: Vec<u64> = points.iter().copied().collect();
            if let Err(e) = ws.victim(key, *until, &points) {
                failed.insert(*key, e.to_string());
            }
        }
        for arm in &plan.arms {
            progress(&format!("seed {seed}: arm {}", arm.id()));
            let outcome = match failed.get(&arm.victim()) {
                Some(msg) => Err(Error::Invalid(format!("victim failed: {msg}"))),
                None if arm.is_curve() => run_curve(&ws, arm).and_then(|_| evaluate_at(&ws, arm, arm.retrain_iterations)),
                None => run_arm(&ws, arm),
            };
            table.upsert(row(&ws, arm, outcome));
            table.save(&table_path)?;
        }
        let audited = ws.audit_hygiene()?;
        progress(&format!("seed {seed}: hygiene audit passed for {audited:?}"));
    }
    fs::write(out.join("results.csv"), table.csv()).map_err(|e| Error::io(out, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faceswap::Architecture;
    use crate::harness::plan::{DeskSettings, SwapDirection};

    fn row(arm: &str, seed: u64, s: Option<f64>) -> ResultRow {
        ResultRow {
            arm_id: arm.into(),
            arm: ArmSpec::new(AttackKind::Pgd, Architecture::H128Mini, SwapDirection::AToB, true, 10),
            seed,
            status: if s.is_some() { ArmStatus::Completed } else { ArmStatus::Failed },
            s_tmp: s,
            e_tmp_attacked: s,
            e_tmp_baseline: s,
            runtime_s: 1.0,
            error: None,
        }
    }

    #[test]
    fn summaries_and_upsert() {
        let mut t = ResultsTable::default();
        t.upsert(row("x", 0, Some(0.1)));
        t.upsert(row("x", 1, Some(0.3)));
        t.upsert(row("x", 1, Some(0.2)));
        t.upsert(row("y", 0, None));
        assert_eq!(t.rows.len(), 3);
        let s = &t.summaries()[0];
        assert_eq!((s.seeds, s.min, s.max), (2, 0.1, 0.2));
        assert!((s.mean - 0.15).abs() < 1e-12);
        assert!(!t.all_completed());
        assert_eq!(t.csv().lines().count(), 4);
    }

    #[test]
    fn tiny_plan_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let h = Architecture::H128Mini;
        let plan = ExperimentPlan {
            seeds: vec![3],
            arms: vec![
                ArmSpec::new(AttackKind::None, h, SwapDirection::AToB, false, 4),
                ArmSpec::new(AttackKind::Pgd, h, SwapDirection::AToB, false, 4),
                ArmSpec::new(AttackKind::Ogan, h, SwapDirection::AToB, true, 4).with_curve(2),
            ],
            settings: DeskSettings::tiny(),
        };
        let table = run_plan(&plan, dir.path(), |_| {}).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert!(table.all_completed(), "{table:?}");
        let none = table.rows.iter().find(|r| r.arm.attack == AttackKind::None).unwrap();
        assert_eq!(none.s_tmp, Some(0.0));

        let ws = Workspace::new(dir.path(), 3, &plan.settings).unwrap();
        assert_eq!(ws.audit_hygiene().unwrap(), vec!["h128-mini-a2b-exclusion".to_string()]);
        let curve = crate::metrics::read_curve(&arm_dir(&ws, &plan.arms[2]).join("curve.csv")).unwrap();
        assert_eq!(curve.iter().map(|p| p.iteration).collect::<Vec<_>>(), vec![2, 4]);

        // A rerun reuses every phase and reproduces the table.
        let again = run_plan(&plan, dir.path(), |_| {}).unwrap();
        for (a, b) in table.rows.iter().zip(&again.rows) {
            assert_eq!(a.s_tmp, b.s_tmp);
        }
    }
}
