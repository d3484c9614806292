use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::plan::{ArmSpec, AttackKind, ExperimentPlan, SwapDirection};
use super::results::{arm_dir, ResultsTable, RESULTS_FILE};
use super::workspace::Workspace;
use crate::diffengine::Tensor;
use crate::faceswap::Architecture;
use crate::metrics::read_curve;
use crate::synthdata::write_image;
use crate::{Error, Result};

/// Amplification applied to |difference| images in strips.
pub const DIFF_GAIN: f32 = 32.0;

/// `min(1, gain·|a − b|)` per element.
pub fn abs_diff_image(a: &Tensor, b: &Tensor, gain: f32) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("abs_diff_image", &[a.shape(), b.shape()]));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (gain * (x - y).abs()).min(1.0)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Places H×W×C images side by side.
pub fn hstack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Invalid("empty strip".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || images.iter().any(|t| t.shape() != shape.as_slice()) {
        return Err(Error::shape("hstack", &images.iter().map(|t| t.shape()).collect::<Vec<_>>()));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut data = Vec::with_capacity(h * w * c * images.len());
    for y in 0..h {
        for t in images {
            data.extend_from_slice(&t.data()[y * w * c..(y + 1) * w * c]);
        }
    }
    Tensor::new(vec![h, w * images.len(), c], data)
}

/// What [`report`] produced.
#[derive(Debug, Default)]
pub struct ReportOutput {
    pub markdown: PathBuf,
    pub csv: PathBuf,
    pub strips: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "—".into())
}

fn section(title: &str, arms: &[&ArmSpec], table: &ResultsTable, seeds: &[u64], md: &mut String) {
    if arms.is_empty() {
        return;
    }
    let _ = writeln!(md, "## {title}\n");
    let mut head = String::from("| arm |");
    let mut rule = String::from("|---|");
    for s in seeds {
        let _ = write!(head, " seed {s} |");
        rule.push_str("---|");
    }
    head.push_str(" mean | min | max |");
    rule.push_str("---|---|---|");
    let _ = writeln!(md, "{head}\n{rule}");
    let summaries = table.summaries();
    for arm in arms {
        let id = arm.id();
        let mut line = format!("| {id} |");
        for &s in seeds {
            let _ = write!(line, " {} |", fmt_opt(table.get(&id, s).and_then(|r| r.s_tmp)));
        }
        match summaries.iter().find(|x| x.arm_id == id) {
            Some(x) => {
                let _ = write!(line, " {:.4} | {:.4} | {:.4} |", x.mean, x.min, x.max);
            }
            None => line.push_str(" — | — | — |"),
        }
        let _ = writeln!(md, "{line}");
    }
    md.push('\n');
}

fn find(
    plan: &ExperimentPlan,
    attack: AttackKind,
    arch: Architecture,
    dir: SwapDirection,
    include: bool,
) -> Option<&ArmSpec> {
    plan.arms.iter().find(|a| {
        a.attack == attack
            && a.victim_arch == arch
            && a.swap_direction == dir
            && a.include_adversarial_in_training == include
            && !a.is_curve()
    })
}

/// Per-seed comparison of two arms, reported as a count.
fn compare(table: &ResultsTable, seeds: &[u64], a: &ArmSpec, b: &ArmSpec) -> (usize, usize) {
    let mut wins = 0;
    let mut n = 0;
    for &s in seeds {
        if let (Some(x), Some(y)) = (
            table.get(&a.id(), s).and_then(|r| r.s_tmp),
            table.get(&b.id(), s).and_then(|r| r.s_tmp),
        ) {
            n += 1;
            wins += (x > y) as usize;
        }
    }
    (wins, n)
}

/// Renders tables, directional counts, curves and image strips for a
/// results directory written by `run_plan`.
pub fn report(out: &Path) -> Result<ReportOutput> {
    let mut result = ReportOutput {
        markdown: out.join("report.md"),
        csv: out.join("results.csv"),
        ..ReportOutput::default()
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let table_path = out.join(RESULTS_FILE);
    let table = if table_path.is_file() {
        ResultsTable::load(&table_path)?
    } else {
        result.warnings.push(format!("no {RESULTS_FILE} in {}; the report is empty", out.display()));
        ResultsTable::default()
    };
    let plan_path = out.join("plan.json");
    let plan = if plan_path.is_file() { Some(ExperimentPlan::load(&plan_path)?) } else { None };
    let seeds: Vec<u64> = match &plan {
        Some(p) => p.seeds.clone(),
        None => table.rows.iter().map(|r| r.seed).collect::<BTreeSet<_>>().into_iter().collect(),
    };

    let mut md = String::from("# Results\n\nS_tmp per arm and seed; the baseline of every arm is its own victim swapping the pristine protected frames.\n\n");
    let arms: Vec<ArmSpec> = match &plan {
        Some(p) => p.arms.clone(),
        None => {
            let mut v: Vec<ArmSpec> = table.rows.iter().map(|r| r.arm.clone()).collect();
            v.dedup();
            v
        }
    };
    if let Some(p) = &plan {
        for arm in &p.arms {
            for &s in &p.seeds {
                if table.get(&arm.id(), s).is_none() {
                    result.warnings.push(format!("missing arm {} seed {s}", arm.id()));
                }
            }
        }
    }
    for r in table.rows.iter().filter(|r| r.error.is_some()) {
        result.warnings.push(format!("arm {} seed {} failed: {}", r.arm_id, r.seed, r.error.as_deref().unwrap_or("")));
    }

    let h = Architecture::H128Mini;
    let pick = |f: &dyn Fn(&ArmSpec) -> bool| arms.iter().filter(|a| f(a)).collect::<Vec<_>>();
    section(
        "Training resistance (adversarial frames in the victim's training set)",
        &pick(&|a| a.include_adversarial_in_training && a.victim_arch == h && a.swap_direction == SwapDirection::AToB && !a.is_curve()),
        &table,
        &seeds,
        &mut md,
    );
    section(
        "Exclusion (victim trained without the protected frames)",
        &pick(&|a| !a.include_adversarial_in_training),
        &table,
        &seeds,
        &mut md,
    );
    section(
        "Transfer (attacks built against h128-mini A->B)",
        &pick(&|a| a.include_adversarial_in_training && (a.victim_arch != h || a.swap_direction != SwapDirection::AToB)),
        &table,
        &seeds,
        &mut md,
    );
    section("Extra training (final curve point)", &pick(&|a| a.is_curve()), &table, &seeds, &mut md);

    if let Some(p) = &plan {
        let _ = writeln!(md, "## Per-seed directional checks\n");
        let ab = SwapDirection::AToB;
        if let (Some(o), Some(g)) = (find(p, AttackKind::Ogan, h, ab, true), find(p, AttackKind::Pgd, h, ab, true)) {
            let (w, n) = compare(&table, &seeds, o, g);
            let _ = writeln!(md, "- OGAN above PGD with adversarial frames included: {w} of {n} seeds");
        }
        if let (Some(e), Some(i)) = (find(p, AttackKind::Pgd, h, ab, false), find(p, AttackKind::Pgd, h, ab, true)) {
            let (w, n) = compare(&table, &seeds, e, i);
            let _ = writeln!(md, "- PGD exclusion above PGD inclusion: {w} of {n} seeds");
        }
        md.push('\n');

        let curves: Vec<&ArmSpec> = p.arms.iter().filter(|a| a.is_curve()).collect();
        if !curves.is_empty() {
            let _ = writeln!(md, "## Curves\n");
            for arm in curves {
                for &s in &p.seeds {
                    let ws = Workspace::new(out, s, &p.settings)?;
                    let path = arm_dir(&ws, arm).join("curve.csv");
                    match read_curve(&path) {
                        Ok(points) => {
                            let vals: Vec<String> =
                                points.iter().map(|pt| format!("{}:{:.3}", pt.iteration, pt.s_tmp)).collect();
                            let _ = writeln!(md, "- {} seed {s}: {}", arm.id(), vals.join(" "));
                        }
                        Err(_) => result.warnings.push(format!("missing curve {}", path.display())),
                    }
                }
            }
            md.push('\n');
        }
        result.strips = write_strips(out, p, &mut result.warnings)?;
        if !result.strips.is_empty() {
            let _ = writeln!(
                md,
                "## Strips\n\nEach strip shows pristine, adversarial, |difference|×{DIFF_GAIN}, the victim's swap of the adversarial frame and |swap difference|×{DIFF_GAIN}.\n"
            );
            for s in &result.strips {
                let _ = writeln!(md, "- {}", s.strip_prefix(out).unwrap_or(s).display());
            }
            md.push('\n');
        }
    }
    if !result.warnings.is_empty() {
        let _ = writeln!(md, "## Warnings\n");
        for w in &result.warnings {
            let _ = writeln!(md, "- {w}");
        }
    }
    fs::write(&result.markdown, md).map_err(|e| Error::io(&result.markdown, e))?;
    fs::write(&result.csv, table.csv()).map_err(|e| Error::io(&result.csv, e))?;
    Ok(result)
}

/// One strip per (seed, attack) from the first protected frame and the
/// attack's inclusion victim on A->B at its final iteration.
fn write_strips(out: &Path, plan: &ExperimentPlan, warnings: &mut Vec<String>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &seed in &plan.seeds {
        let ws = Workspace::new(out, seed, &plan.settings)?;
        for attack in [AttackKind::Ogan, AttackKind::Pgd] {
            let Some(arm) = plan
                .arms
                .iter()
                .filter(|a| a.attack == attack && a.include_adversarial_in_training && a.swap_direction == SwapDirection::AToB)
                .min_by_key(|a| a.retrain_iterations)
            else {
                continue;
            };
            let built = (|| -> Result<PathBuf> {
                let adv = crate::attacks::load_protected(&ws.attack_dir(attack).join("protected"))?;
                let model = ws.snapshot(&arm.victim(), arm.retrain_iterations)?;
                let x = &ws.partition()?.p_a()[0].image;
                let xa = &adv[0].image;
                let sx = model.swap(x)?;
                let sa = model.swap(xa)?;
                let strip = hstack(&[x, xa, &abs_diff_image(xa, x, DIFF_GAIN)?, &sa, &abs_diff_image(&sa, &sx, DIFF_GAIN)?])?;
                let path = out.join("strips").join(format!("seed{seed}-{attack}.ppm"));
                fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(out, e))?;
                write_image(&path, &strip)?;
                Ok(path)
            })();
            match built {
                Ok(p) => written.push(p),
                Err(e) => warnings.push(format!("no strip for seed {seed} {attack}: {e}")),
            }
        }
    }
    Ok(written)
}
