use serde::{Deserialize, Serialize};

use crate::diffengine::{sign0, Graph, NodeId, SeededRng, Tensor};
use crate::faceswap::SwapModel;
use crate::synthdata::FaceSample;
use crate::{Error, Result};

/// A differentiable end-to-end swap H(x).
pub trait SwapFn {
    fn swap_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId>;
}

impl SwapFn for SwapModel {
    fn swap_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        SwapModel::swap_node(self, g, x)
    }
}

/// H(x) = x; a stub for checking attack mechanics in isolation.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentitySwap;

impl SwapFn for IdentitySwap {
    fn swap_node(&self, _g: &mut Graph, x: NodeId) -> Result<NodeId> {
        Ok(x)
    }
}

/// −RMS(H(x_adv) − H(x)) over all elements, with `h_x` = H(x) precomputed.
pub fn loss_dist_node<H: SwapFn + ?Sized>(h: &H, g: &mut Graph, x_adv: NodeId, h_x: NodeId) -> Result<NodeId> {
    let y = h.swap_node(g, x_adv)?;
    let d = g.sub(y, h_x)?;
    let sq = g.square(d)?;
    let ms = g.mean(sq)?;
    let rms = g.sqrt(ms)?;
    g.scalar_mul(rms, -1.0)
}

pub fn loss_dist<H: SwapFn + ?Sized>(h: &H, x_adv: &Tensor, x: &Tensor) -> Result<f32> {
    if x_adv.shape() != x.shape() {
        return Err(Error::shape("loss_dist", &[x_adv.shape(), x.shape()]));
    }
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let hx = h.swap_node(&mut g, xi)?;
    let xa = g.constant(x_adv.clone());
    let l = loss_dist_node(h, &mut g, xa, hx)?;
    g.value(l).item()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub epsilon: f32,
    pub alpha: f32,
    pub iterations: usize,
    pub seed: u64,
    /// Images attacked together; results do not depend on it.
    pub batch_size: usize,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            epsilon: 2.0 / 255.0,
            alpha: 0.001,
            iterations: 200,
            seed: 0,
            batch_size: 16,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.alpha > 0.0) || self.batch_size == 0 {
            return Err(Error::Invalid(format!("pgd configuration {self:?}")));
        }
        Ok(())
    }
}

/// Clamps `v` into the ε-box around `x` and then into [0, 1].
fn project(v: f32, x: f32, eps: f32) -> f32 {
    v.clamp(x - eps, x + eps).clamp(0.0, 1.0)
}

/// Outcome of one PGD run.
#[derive(Clone, Debug)]
pub struct PgdRun {
    pub adversarial: Tensor,
    pub initial_loss: f32,
    pub final_loss: f32,
}

/// PGD on a batch `x` (N×H×W×3) with a caller-supplied start point `x0`.
/// `observe` sees every iterate, starting with the projected `x0`.
pub fn pgd_from<H: SwapFn + ?Sized>(
    h: &H,
    x: &Tensor,
    x0: &Tensor,
    cfg: &PgdConfig,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<PgdRun> {
    cfg.validate()?;
    if x0.shape() != x.shape() {
        return Err(Error::shape("pgd", &[x0.shape(), x.shape()]));
    }
    let eps = cfg.epsilon;
    let mut cur = Tensor::new(
        x.shape().to_vec(),
        x0.data().iter().zip(x.data()).map(|(&v, &o)| project(v, o, eps)).collect(),
    )?;
    observe(0, &cur);

    let h_x = {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = h.swap_node(&mut g, xi)?;
        g.value(y).clone()
    };
    let mut initial_loss = None;
    for t in 0..cfg.iterations {
        let mut g = Graph::new();
        let xa = g.variable(cur.clone());
        let hx = g.constant(h_x.clone());
        let loss = loss_dist_node(h, &mut g, xa, hx)?;
        let value = g.value(loss).item()?;
        initial_loss.get_or_insert(value);
        let grad = g.backward(loss)?.wrt(&g, xa);
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!("pgd gradient at iteration {t}")));
        }
        for ((v, &gv), &o) in cur.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
            *v = project(*v - cfg.alpha * sign0(gv), o, eps);
        }
        observe(t + 1, &cur);
    }
    let final_loss = loss_dist(h, &cur, x)?;
    Ok(PgdRun {
        adversarial: cur,
        initial_loss: initial_loss.unwrap_or(final_loss),
        final_loss,
    })
}

/// Uniform start point x + U[−ε, ε] per element (projected later).
pub fn pgd_start(x: &Tensor, epsilon: f32, rng: &mut SeededRng) -> Tensor {
    let data = x.data().iter().map(|&v| v + rng.uniform_range(-epsilon, epsilon)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// The distorting attack on a batch or a single image.
pub fn pgd_distort<H: SwapFn + ?Sized>(h: &H, x: &Tensor, cfg: &PgdConfig, rng: &mut SeededRng) -> Result<Tensor> {
    let x0 = pgd_start(x, cfg.epsilon, rng);
    if x.shape().len() == 3 {
        let mut s = vec![1];
        s.extend_from_slice(x.shape());
        let xb = x.clone().reshape(&s)?;
        let run = pgd_from(h, &xb, &x0.reshape(&s)?, cfg, |_, _| {})?;
        return run.adversarial.reshape(x.shape());
    }
    Ok(pgd_from(h, x, &x0, cfg, |_, _| {})?.adversarial)
}

/// Summary of attacking a protected set with PGD.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PgdReport {
    pub initial_loss: Vec<f32>,
    pub final_loss: Vec<f32>,
}

/// Attacks every sample; each frame's start noise comes from its own
/// substream, so results are independent of batching and order.
pub fn pgd_protect<H: SwapFn + ?Sized>(
    h: &H,
    samples: &[FaceSample],
    cfg: &PgdConfig,
) -> Result<(Vec<FaceSample>, PgdReport)> {
    let mut out = Vec::with_capacity(samples.len());
    let mut report = PgdReport::default();
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let x = Tensor::stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let starts: Vec<Tensor> = chunk
            .iter()
            .map(|s| {
                let mut rng = SeededRng::substream(cfg.seed, &format!("pgd/frame{}", s.frame_index));
                pgd_start(&s.image, cfg.epsilon, &mut rng)
            })
            .collect();
        let x0 = Tensor::stack(&starts.iter().collect::<Vec<_>>())?;
        let run = pgd_from(h, &x, &x0, cfg, |_, _| {})?;
        report.initial_loss.push(run.initial_loss);
        report.final_loss.push(run.final_loss);
        for (s, adv) in chunk.iter().zip(run.adversarial.unstack()) {
            out.push(FaceSample {
                image: adv,
                ..s.clone()
            });
        }
    }
    Ok((out, report))
}
