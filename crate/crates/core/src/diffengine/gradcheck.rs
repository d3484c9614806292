//! Central finite-difference oracle for gradient checks.
//!
//! The numeric side only runs forward passes: the graph output `y` is
//! projected onto fixed random weights `r` in f64, and each probed coordinate
//! is differentiated as `(P(θ+h) − P(θ−h)) / 2h`. The analytic side
//! backpropagates the same projection through the engine. A probe is an
//! 8-element random slice of one leaf; its error is
//! `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`.
//!
//! A coordinate whose ±h evaluations take different branches of a
//! non-smooth operator (ReLU-like, abs, clip) has no meaningful central
//! difference; it is replaced by another coordinate and counted in
//! `kinked`.

use super::{Graph, NodeId, SeededRng, Tensor};
use crate::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f32,
    pub probes: usize,
    pub slice: usize,
    /// Lower bound on the normaliser, so slices whose true gradient is
    /// numerically zero do not divide by round-off.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            probes: 100,
            slice: 8,
            floor: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub worst_leaf: usize,
    pub kinked: usize,
}

fn project(y: &Tensor, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(&a, &b)| a as f64 * b).sum()
}

pub fn check_gradients<F>(
    leaves: &[Tensor],
    build: F,
    cfg: &GradCheckConfig,
    rng: &mut SeededRng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<(Tensor, Vec<i8>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.constant(v.clone())).collect();
        let y = build(&mut g, &ids)?;
        Ok((g.value(y).clone(), g.branch_pattern()))
    };

    let (y0, _) = eval(leaves)?;
    let r: Vec<f64> = (0..y0.len()).map(|_| rng.normal() as f64).collect();

    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|v| g.variable(v.clone())).collect();
    let y = build(&mut g, &ids)?;
    let weights = g.constant(Tensor::new(
        g.value(y).shape().to_vec(),
        r.iter().map(|&v| v as f32).collect(),
    )?);
    let prod = g.mul(y, weights)?;
    let mean = g.mean(prod)?;
    let n = g.value(prod).len() as f32;
    let loss = g.scalar_mul(mean, n)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(&g, id)).collect();

    let mut report = GradCheckReport::default();
    let mut total = 0.0;
    let mut values = leaves.to_vec();
    for probe in 0..cfg.probes {
        let leaf = probe % leaves.len();
        let len = leaves[leaf].len();
        let want = cfg.slice.min(len);
        let mut tried = std::collections::BTreeSet::new();
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        let mut used = 0;
        while used < want && tried.len() < len {
            let i = rng.below(len);
            if !tried.insert(i) {
                continue;
            }
            let orig = values[leaf].data()[i];
            values[leaf].data_mut()[i] = orig + cfg.step;
            let (yp, bp) = eval(&values)?;
            values[leaf].data_mut()[i] = orig - cfg.step;
            let (ym, bm) = eval(&values)?;
            values[leaf].data_mut()[i] = orig;
            if bp != bm {
                report.kinked += 1;
                continue;
            }
            // The actually realised step, since orig ± h rounds in f32.
            let h = ((orig + cfg.step) as f64) - ((orig - cfg.step) as f64);
            let numeric = (project(&yp, &r) - project(&ym, &r)) / h;
            let a = analytic[leaf].data()[i] as f64;
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
            used += 1;
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(cfg.floor);
        total += rel;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_leaf = leaf;
        }
        report.probes += 1;
    }
    report.mean_rel_err = total / report.probes.max(1) as f64;
    Ok(report)
}
