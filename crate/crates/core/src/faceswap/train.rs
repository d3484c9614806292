use std::path::Path;

use serde::{Deserialize, Serialize};

use super::losses::loss_rec_node;
use super::model::{Architecture, Side, SwapModel};
use crate::diffengine::{Checkpoint, Graph, OptimConfig, SeededRng, Tensor};
use crate::synthdata::{DatasetPartition, FaceSample, Target};
use crate::transforms::{augment_tensors, AugmentConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Iterations; each is one A step and one B step.
    pub iterations: u64,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

pub const DESK_LEARNING_RATE: f32 = 5e-5;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 16,
            optim: OptimConfig::new(DESK_LEARNING_RATE, 0.5, 0.999),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        self.optim.validate()?;
        self.augment.validate()
    }
}

pub fn stack_batch(batch: &[FaceSample]) -> Result<(Tensor, Tensor)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let images = Tensor::stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let masks = Tensor::stack(&batch.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
    Ok((images, masks))
}

/// One gradient step of L_rec on (images, masks) for the encoder and the
/// decoder of `side`; returns the loss before the step.
pub fn train_step_tensors(
    model: &mut SwapModel,
    side: Side,
    images: &Tensor,
    masks: &Tensor,
    optim: &OptimConfig,
) -> Result<f32> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let m = g.constant(masks.clone());
    let f = model.forward(&mut g, x, side, true)?;
    let loss = loss_rec_node(&mut g, f.face, f.mask, x, m)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("reconstruction loss of side {side:?}")));
    }
    let grads = g.backward(loss)?;
    let ge = f.encoder.grads(&g, &grads);
    let gd = f.decoder.grads(&g, &grads);
    // Validate both updates before applying either.
    let mut encoder = model.encoder.clone();
    encoder.adam_step(&ge, optim)?;
    model.decoder_mut(side).adam_step(&gd, optim)?;
    model.encoder = encoder;
    Ok(value)
}

/// Augments `batch`, then takes one step on the encoder and the decoder of
/// `side`. Returns L_rec on the augmented batch.
pub fn train_step(
    model: &mut SwapModel,
    side: Side,
    batch: &[FaceSample],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<f32> {
    let expected = model.identity(side).to_string();
    if !expected.is_empty() {
        if let Some(s) = batch.iter().find(|s| s.identity != expected) {
            return Err(Error::Invalid(format!(
                "side {side:?} trains on identity {expected}, batch holds {}",
                s.identity
            )));
        }
    }
    let (images, masks) = stack_batch(batch)?;
    let (images, masks) = augment_tensors(&images, &masks, &cfg.augment, rng)?;
    train_step_tensors(model, side, &images, &masks, &cfg.optim)
}

/// Mean L_rec of f_side over `samples` without augmentation.
pub fn evaluate_loss(model: &SwapModel, side: Side, samples: &[FaceSample], batch: usize) -> Result<f32> {
    let mut total = 0.0f64;
    for chunk in samples.chunks(batch.max(1)) {
        let (images, masks) = stack_batch(chunk)?;
        let (face, mask) = model.reconstruct(side, &images)?;
        total += super::losses::loss_rec(&face, &mask, &images, &masks)? as f64 * chunk.len() as f64;
    }
    Ok((total / samples.len().max(1) as f64) as f32)
}

/// Shuffled batches without replacement; reshuffles each epoch. The
/// permutation of epoch `e` comes from its own substream, so the sampler
/// position is fully described by `(epoch, cursor)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    n: usize,
    seed: u64,
    label: String,
    epoch: u64,
    cursor: usize,
    #[serde(skip)]
    perm: Vec<usize>,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64, label: &str) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid(format!("cannot sample batches from empty set {label}")));
        }
        Ok(BatchSampler {
            n,
            seed,
            label: label.to_string(),
            epoch: 0,
            cursor: 0,
            perm: Vec::new(),
        })
    }

    fn ensure_perm(&mut self) {
        if self.perm.len() != self.n {
            let mut rng = SeededRng::substream(self.seed, &format!("{}/epoch{}", self.label, self.epoch));
            self.perm = rng.permutation(self.n);
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            self.ensure_perm();
            out.push(self.perm[self.cursor]);
            self.cursor += 1;
            if self.cursor == self.n {
                self.cursor = 0;
                self.epoch += 1;
                self.perm.clear();
            }
        }
        out
    }
}

pub fn gather(samples: &[FaceSample], idx: &[usize]) -> Vec<FaceSample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// Per-iteration training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub loss_a: Vec<f32>,
    pub loss_b: Vec<f32>,
}

/// Resumable alternating A/B training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SwapModel,
    pub cfg: TrainConfig,
    sampler_a: BatchSampler,
    sampler_b: BatchSampler,
    augment_rng: SeededRng,
    iteration: u64,
    pub log: TrainLog,
}

impl Trainer {
    /// `label` separates the random streams of different training runs under
    /// the same seed.
    pub fn new(model: SwapModel, cfg: TrainConfig, n_a: usize, n_b: usize, label: &str) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            sampler_a: BatchSampler::new(n_a, cfg.seed, &format!("{label}/batches-a"))?,
            sampler_b: BatchSampler::new(n_b, cfg.seed, &format!("{label}/batches-b"))?,
            augment_rng: SeededRng::substream(cfg.seed, &format!("{label}/augment")),
            iteration: 0,
            log: TrainLog::default(),
            model,
            cfg,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// One A step then one B step.
    pub fn step(&mut self, d_a: &[FaceSample], d_b: &[FaceSample]) -> Result<(f32, f32)> {
        let bs = self.cfg.batch_size;
        let ba = gather(d_a, &self.sampler_a.next_batch(bs));
        let la = train_step(&mut self.model, Side::A, &ba, &self.cfg, &mut self.augment_rng)?;
        let bb = gather(d_b, &self.sampler_b.next_batch(bs));
        let lb = train_step(&mut self.model, Side::B, &bb, &self.cfg, &mut self.augment_rng)?;
        self.iteration += 1;
        self.log.loss_a.push(la);
        self.log.loss_b.push(lb);
        Ok((la, lb))
    }

    /// Trains until `iteration == until`.
    pub fn run_until(&mut self, d_a: &[FaceSample], d_b: &[FaceSample], until: u64) -> Result<()> {
        while self.iteration < until {
            self.step(d_a, d_b)?;
        }
        Ok(())
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut ck = self.model.to_checkpoint()?;
        ck.set_meta("trainer/iteration", self.iteration)?;
        ck.set_meta("trainer/config", &self.cfg)?;
        ck.set_meta("trainer/sampler_a", &self.sampler_a)?;
        ck.set_meta("trainer/sampler_b", &self.sampler_b)?;
        ck.set_meta("trainer/log", &self.log)?;
        ck.put_rng("augment", &self.augment_rng)?;
        ck.save(stem)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let ck = Checkpoint::load(stem)?;
        Ok(Trainer {
            model: SwapModel::read_from(&ck, "")?,
            cfg: ck.meta_as("trainer/config")?,
            sampler_a: ck.meta_as("trainer/sampler_a")?,
            sampler_b: ck.meta_as("trainer/sampler_b")?,
            augment_rng: ck.rng("augment")?,
            iteration: ck.meta_as("trainer/iteration")?,
            log: ck.meta_as("trainer/log")?,
        })
    }
}

/// Trains f_A and f_B from random initialisation for `cfg.iterations`
/// alternating A/B iterations on D_A and the target set.
pub fn pretrain(
    partition: &DatasetPartition,
    arch: Architecture,
    target: Target,
    cfg: &TrainConfig,
) -> Result<(SwapModel, TrainLog)> {
    let d_a = &partition.d_a;
    let d_t = partition.target(target);
    if d_a.is_empty() || d_t.is_empty() {
        return Err(Error::Invalid("pretraining needs non-empty source and target sets".into()));
    }
    let res = d_a[0].image.shape()[0];
    let mut init = SeededRng::substream(cfg.seed, &format!("pretrain-init/{arch}"));
    let model = SwapModel::new(arch, res, &mut init)?.with_identities(&d_a[0].identity, &d_t[0].identity);
    let mut trainer = Trainer::new(model, cfg.clone(), d_a.len(), d_t.len(), "pretrain")?;
    trainer.run_until(d_a, d_t, cfg.iterations)?;
    Ok((trainer.model, trainer.log))
}
