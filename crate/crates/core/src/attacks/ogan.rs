use serde::{Deserialize, Serialize};

use super::generator::AdvGenerator;
use crate::diffengine::{Graph, NodeId, OptimConfig, SeededRng, Tensor};
use crate::faceswap::{gather, loss_face_node, stack_batch, train_step_tensors, BatchSampler, Side, SwapModel};
use crate::synthdata::{DatasetPartition, FaceSample, Target};
use crate::transforms::{
    apply_affine_batch, augment_tensors, sample_distortion, AffineDistortion, AugmentConfig, DistortionSamplerConfig,
};
use crate::{Error, Result};

/// The face branch of an autoencoder, f^face(x), as a graph function.
pub trait FaceFn {
    fn face_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId>;
}

/// f_A^face with frozen weights.
pub struct SourceFace<'a>(pub &'a SwapModel);

impl FaceFn for SourceFace<'_> {
    fn face_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        Ok(self.0.forward(g, x, Side::A, false)?.face)
    }
}

/// L_face(f^face(x_adv), target, m) with `target` = N(x) already formed.
pub fn loss_adv_node<F: FaceFn + ?Sized>(
    f: &F,
    g: &mut Graph,
    x_adv: NodeId,
    target: NodeId,
    mask: NodeId,
) -> Result<NodeId> {
    let face = f.face_node(g, x_adv)?;
    loss_face_node(g, face, target, mask)
}

/// L_adv on tensors: N (one distortion per image) is applied to `x` here.
pub fn loss_adv<F: FaceFn + ?Sized>(
    f: &F,
    x_adv: &Tensor,
    x: &Tensor,
    ds: &[AffineDistortion],
    mask: &Tensor,
) -> Result<f32> {
    if x_adv.shape() != x.shape() {
        return Err(Error::shape("loss_adv", &[x_adv.shape(), x.shape()]));
    }
    let mut g = Graph::new();
    let xa = g.constant(x_adv.clone());
    let t = g.constant(apply_affine_batch(x, ds)?);
    let m = g.constant(mask.clone());
    let l = loss_adv_node(f, &mut g, xa, t, m)?;
    g.value(l).item()
}

/// The distortion drawn for one protected frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDistortion {
    pub frame_index: usize,
    pub theta: f32,
    pub shift_x: f32,
    pub shift_y: f32,
}

impl FrameDistortion {
    pub fn distortion(&self) -> AffineDistortion {
        AffineDistortion::new(self.theta, self.shift_x, self.shift_y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OganConfig {
    pub epsilon: f32,
    /// Θ (degrees) and Ψ (pixels).
    pub distortion: DistortionSamplerConfig,
    pub batch_size: usize,
    pub batch_iters: usize,
    pub epochs: usize,
    pub generator_optim: OptimConfig,
    pub faceswap_optim: OptimConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for OganConfig {
    fn default() -> Self {
        OganConfig {
            epsilon: 2.0 / 255.0,
            distortion: DistortionSamplerConfig {
                max_rotation: 10.0,
                max_shift: 3.2,
            },
            batch_size: 16,
            batch_iters: 8,
            epochs: 48,
            generator_optim: OptimConfig::new(5e-5, 0.9, 0.9999),
            faceswap_optim: OptimConfig::new(crate::faceswap::DESK_LEARNING_RATE, 0.5, 0.999),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl OganConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || self.batch_size == 0 {
            return Err(Error::Invalid(format!("ogan configuration {self:?}")));
        }
        self.distortion.validate()?;
        self.generator_optim.validate()?;
        self.faceswap_optim.validate()?;
        self.augment.validate()
    }
}

/// Per-epoch means of the losses seen during OGAN training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OganLog {
    pub adv_loss: Vec<f32>,
    pub loss_a: Vec<f32>,
    pub loss_b: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct OganOutcome {
    pub generator: AdvGenerator,
    pub distortions: Vec<FrameDistortion>,
    pub model: SwapModel,
    pub log: OganLog,
}

fn phase<T>(r: Result<T>, what: impl FnOnce() -> String) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} during {}", what())),
        other => other,
    })
}

/// One generator step on L_adv; returns the loss before the step.
fn generator_step(
    gen: &mut AdvGenerator,
    model: &SwapModel,
    x: &Tensor,
    target: &Tensor,
    mask: &Tensor,
    ds: &[AffineDistortion],
    optim: &OptimConfig,
) -> Result<f32> {
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let f = gen.forward(&mut g, xi, ds, true)?;
    let t = g.constant(target.clone());
    let m = g.constant(mask.clone());
    let loss = loss_adv_node(&SourceFace(model), &mut g, f.output, t, m)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("adversarial loss".into()));
    }
    let grads = g.backward(loss)?;
    let ge = f.encoder.grads(&g, &grads);
    let gd = f.decoder.grads(&g, &grads);
    let mut encoder = gen.encoder.clone();
    encoder.adam_step(&ge, optim)?;
    gen.decoder.adam_step(&gd, optim)?;
    gen.encoder = encoder;
    Ok(value)
}

/// Index batches of a fresh permutation of `0..n`.
fn epoch_batches(n: usize, size: usize, seed: u64, label: &str) -> Vec<Vec<usize>> {
    let perm = SeededRng::substream(seed, label).permutation(n);
    perm.chunks(size).map(|c| c.to_vec()).collect()
}

fn mean(v: &[f32]) -> f32 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as f32
}

/// Alternating training of G against a co-trained swap model.
///
/// The distortions {N_p} are drawn once, before the first epoch. Every
/// epoch then walks P_A batch by batch: `batch_iters` generator steps
/// towards f_A(G(x, N)) ≈ N(x), one f_A step on the augmented adversarial
/// batch and one f_B step on a target batch. Afterwards each D_A∖P_A batch
/// gets one f_A step and one f_B step.
pub fn ogan_train(partition: &DatasetPartition, pretrained: &SwapModel, cfg: &OganConfig) -> Result<OganOutcome> {
    cfg.validate()?;
    let p_a = partition.p_a();
    let rest = partition.unprotected();
    let d_b = partition.target(Target::B);
    if d_b.is_empty() {
        return Err(Error::Invalid("ogan training needs a non-empty target set".into()));
    }
    let res = pretrained.resolution();
    let seed = cfg.seed;

    let mut init = SeededRng::substream(seed, "ogan/generator-init");
    let mut gen = AdvGenerator::new(res, cfg.epsilon, cfg.distortion, &mut init)?;
    let mut draw = SeededRng::substream(seed, "ogan/distortions");
    let distortions: Vec<FrameDistortion> = p_a
        .iter()
        .map(|s| {
            let d = sample_distortion(&cfg.distortion, &mut draw);
            FrameDistortion {
                frame_index: s.frame_index,
                theta: d.theta,
                shift_x: d.shift_x,
                shift_y: d.shift_y,
            }
        })
        .collect();

    let mut model = pretrained.clone();
    let mut sampler_b = BatchSampler::new(d_b.len(), seed, "ogan/batches-b")?;
    let mut aug = SeededRng::substream(seed, "ogan/augment");
    let mut log = OganLog::default();
    let bs = cfg.batch_size;

    let mut step_b = |model: &mut SwapModel, aug: &mut SeededRng, epoch: usize| -> Result<f32> {
        let batch = gather(d_b, &sampler_b.next_batch(bs));
        let (x, m) = stack_batch(&batch)?;
        let (x, m) = augment_tensors(&x, &m, &cfg.augment, aug)?;
        phase(train_step_tensors(model, Side::B, &x, &m, &cfg.faceswap_optim), || {
            format!("f_B step (epoch {epoch})")
        })
    };

    for epoch in 0..cfg.epochs {
        let (mut adv, mut la, mut lb) = (Vec::new(), Vec::new(), Vec::new());
        if !p_a.is_empty() {
            for idx in epoch_batches(p_a.len(), bs, seed, &format!("ogan/protected/epoch{epoch}")) {
                let batch = gather(p_a, &idx);
                let ds: Vec<AffineDistortion> = idx.iter().map(|&i| distortions[i].distortion()).collect();
                let (x, m) = stack_batch(&batch)?;
                let target = apply_affine_batch(&x, &ds)?;
                for _ in 0..cfg.batch_iters {
                    let l = generator_step(&mut gen, &model, &x, &target, &m, &ds, &cfg.generator_optim);
                    adv.push(phase(l, || format!("generator step (epoch {epoch})"))?);
                }
                let x_adv = gen.perturb(&x, &ds)?;
                let (xa, ma) = augment_tensors(&x_adv, &m, &cfg.augment, &mut aug)?;
                la.push(phase(train_step_tensors(&mut model, Side::A, &xa, &ma, &cfg.faceswap_optim), || {
                    format!("f_A step on adversarial batch (epoch {epoch})")
                })?);
                lb.push(step_b(&mut model, &mut aug, epoch)?);
            }
        }
        if !rest.is_empty() {
            for idx in epoch_batches(rest.len(), bs, seed, &format!("ogan/unprotected/epoch{epoch}")) {
                let (x, m) = stack_batch(&gather(&rest, &idx))?;
                let (x, m) = augment_tensors(&x, &m, &cfg.augment, &mut aug)?;
                la.push(phase(train_step_tensors(&mut model, Side::A, &x, &m, &cfg.faceswap_optim), || {
                    format!("f_A step (epoch {epoch})")
                })?);
                lb.push(step_b(&mut model, &mut aug, epoch)?);
            }
        }
        log.adv_loss.push(mean(&adv));
        log.loss_a.push(mean(&la));
        log.loss_b.push(mean(&lb));
    }
    Ok(OganOutcome {
        generator: gen,
        distortions,
        model,
        log,
    })
}

/// O_A for a trained generator: one adversarial image per protected sample,
/// masks and indices unchanged.
pub fn ogan_protect(
    gen: &AdvGenerator,
    distortions: &[FrameDistortion],
    samples: &[FaceSample],
    batch: usize,
) -> Result<Vec<FaceSample>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let ds = chunk
            .iter()
            .map(|s| {
                distortions
                    .iter()
                    .find(|d| d.frame_index == s.frame_index)
                    .map(FrameDistortion::distortion)
                    .ok_or_else(|| Error::Invalid(format!("no distortion recorded for frame {}", s.frame_index)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (x, _) = stack_batch(chunk)?;
        for (s, img) in chunk.iter().zip(gen.perturb(&x, &ds)?.unstack()) {
            out.push(FaceSample {
                image: img,
                ..s.clone()
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faceswap::Architecture;
    use crate::synthdata::{build_partition, PartitionSizes, SynthIdentitySpec};

    struct ConstFace(f32);

    impl FaceFn for ConstFace {
        fn face_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
            let z = g.scalar_mul(x, 0.0)?;
            g.scalar_add(z, self.0)
        }
    }

    struct Passthrough;

    impl FaceFn for Passthrough {
        fn face_node(&self, _g: &mut Graph, x: NodeId) -> Result<NodeId> {
            Ok(x)
        }
    }

    #[test]
    fn loss_adv_cases() {
        let x = Tensor::full(&[1, 4, 4, 3], 0.25);
        let one = Tensor::full(&[1, 4, 4, 1], 1.0);
        let zero = Tensor::zeros(&[1, 4, 4, 1]);
        let id = [AffineDistortion::IDENTITY];
        assert_eq!(loss_adv(&Passthrough, &x, &x, &id, &one).unwrap(), 0.0);
        assert!((loss_adv(&ConstFace(0.5), &x, &x, &id, &one).unwrap() - 0.25).abs() < 1e-7);
        assert_eq!(loss_adv(&ConstFace(0.5), &x, &x, &id, &zero).unwrap(), 0.0);
    }

    fn setup(protected: std::ops::Range<usize>) -> (DatasetPartition, SwapModel) {
        let specs = [SynthIdentitySpec::preset(0), SynthIdentitySpec::preset(1), SynthIdentitySpec::preset(2)];
        let sizes = PartitionSizes { a: 8, b: 6, c: 6 };
        let p = build_partition([&specs[0], &specs[1], &specs[2]], &sizes, protected, 16, 0).unwrap();
        let m = SwapModel::new(Architecture::H128Mini, 16, &mut SeededRng::new(1))
            .unwrap()
            .with_identities("A", "B");
        (p, m)
    }

    fn tiny() -> OganConfig {
        OganConfig {
            batch_size: 2,
            batch_iters: 2,
            epochs: 2,
            generator_optim: OptimConfig::new(1e-3, 0.9, 0.9999),
            faceswap_optim: OptimConfig::new(1e-3, 0.5, 0.999),
            seed: 5,
            ..OganConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_moves_the_generator() {
        let (p, m) = setup(0..4);
        let a = ogan_train(&p, &m, &tiny()).unwrap();
        let b = ogan_train(&p, &m, &tiny()).unwrap();
        assert_eq!(a.generator.digest().unwrap(), b.generator.digest().unwrap());
        assert_eq!(a.distortions, b.distortions);
        assert_eq!(a.model.digest().unwrap(), b.model.digest().unwrap());
        assert_eq!(a.distortions.len(), 4);
        assert_eq!(a.log.adv_loss.len(), 2);

        let init = AdvGenerator::new(16, tiny().epsilon, tiny().distortion, &mut SeededRng::substream(5, "ogan/generator-init")).unwrap();
        assert_ne!(a.generator, init);
        assert_ne!(a.model.digest().unwrap(), m.digest().unwrap());
    }

    #[test]
    fn zero_batch_iters_keeps_generator() {
        let (p, m) = setup(0..4);
        let cfg = OganConfig { batch_iters: 0, ..tiny() };
        let out = ogan_train(&p, &m, &cfg).unwrap();
        let init = AdvGenerator::new(16, cfg.epsilon, cfg.distortion, &mut SeededRng::substream(5, "ogan/generator-init")).unwrap();
        assert_eq!(out.generator, init);
    }

    #[test]
    fn empty_protected_set_is_plain_training() {
        let (mut p, m) = setup(0..4);
        p.protected = 0..0;
        let out = ogan_train(&p, &m, &tiny()).unwrap();
        assert!(out.distortions.is_empty());
        let init = AdvGenerator::new(16, tiny().epsilon, tiny().distortion, &mut SeededRng::substream(5, "ogan/generator-init")).unwrap();
        assert_eq!(out.generator, init);
        assert_ne!(out.model.digest().unwrap(), m.digest().unwrap());
    }

    #[test]
    fn protect_needs_every_distortion() {
        let (p, m) = setup(0..4);
        let out = ogan_train(&p, &m, &OganConfig { epochs: 0, ..tiny() }).unwrap();
        let adv = ogan_protect(&out.generator, &out.distortions, p.p_a(), 3).unwrap();
        assert_eq!(adv.len(), 4);
        for (a, s) in adv.iter().zip(p.p_a()) {
            assert!(a.image.max_abs_diff(&s.image).unwrap() <= tiny().epsilon + 1e-6);
            assert_eq!(a.mask, s.mask);
            assert_eq!(a.frame_index, s.frame_index);
        }
        assert!(ogan_protect(&out.generator, &out.distortions[1..], p.p_a(), 3).is_err());
    }
}
