use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffengine::{Bound, Checkpoint, Graph, NodeId, ParamSet, SeededRng, Tensor};
use crate::faceswap::net::{self, Layers};
use crate::transforms::{AffineDistortion, DistortionSamplerConfig};
use crate::{Error, Result};

/// Image channels plus the three tiled distortion parameters.
pub const GENERATOR_INPUT_CHANNELS: usize = 6;

/// The perturbation generator G(x, N): an h128-mini-shaped autoencoder whose
/// input is the image concatenated with (θ/Θ, ψx/Ψ, ψy/Ψ) tiled over the
/// frame. The output is `clip(x + ε·tanh(head), 0, 1)`, so the ℓ∞ budget
/// holds for any weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvGenerator {
    resolution: usize,
    epsilon: f32,
    bounds: DistortionSamplerConfig,
    pub encoder: ParamSet,
    pub decoder: ParamSet,
}

/// Graph handles produced by [`AdvGenerator::forward`].
pub struct GeneratorForward {
    pub output: NodeId,
    pub encoder: Bound,
    pub decoder: Bound,
}

#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    resolution: usize,
    epsilon: f32,
    bounds: DistortionSamplerConfig,
}

fn ratio(v: f32, bound: f32) -> f32 {
    if bound > 0.0 {
        v / bound
    } else {
        0.0
    }
}

impl AdvGenerator {
    pub fn new(resolution: usize, epsilon: f32, bounds: DistortionSamplerConfig, rng: &mut SeededRng) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Invalid(format!("epsilon {epsilon} must be finite and non-negative")));
        }
        bounds.validate()?;
        Ok(AdvGenerator {
            resolution,
            epsilon,
            bounds,
            encoder: net::build_encoder(GENERATOR_INPUT_CHANNELS, resolution, rng)?,
            decoder: net::build_decoder(false, 3, rng)?,
        })
    }

    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }

    pub fn bounds(&self) -> DistortionSamplerConfig {
        self.bounds
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// N×R×R×3 constant channels (θ/Θ, ψx/Ψ, ψy/Ψ); a zero bound gives zeros.
    pub fn conditioning(&self, ds: &[AffineDistortion]) -> Tensor {
        let r = self.resolution;
        let mut data = Vec::with_capacity(ds.len() * r * r * 3);
        for d in ds {
            let c = [
                ratio(d.theta, self.bounds.max_rotation),
                ratio(d.shift_x, self.bounds.max_shift),
                ratio(d.shift_y, self.bounds.max_shift),
            ];
            for _ in 0..r * r {
                data.extend_from_slice(&c);
            }
        }
        Tensor::new(vec![ds.len(), r, r, 3], data).expect("conditioning shape")
    }

    /// Records G(x, N) for an N×R×R×3 node with one distortion per image.
    pub fn forward(&self, g: &mut Graph, x: NodeId, ds: &[AffineDistortion], trainable: bool) -> Result<GeneratorForward> {
        let r = self.resolution;
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != r || shape[2] != r || shape[3] != 3 {
            return Err(Error::shape("generator", &[&shape, &[0, r, r, 3]]));
        }
        if ds.len() != shape[0] {
            return Err(Error::Invalid(format!("{} distortions for a batch of {}", ds.len(), shape[0])));
        }
        let encoder = self.encoder.bind(g, trainable);
        let decoder = self.decoder.bind(g, trainable);
        let cond = g.constant(self.conditioning(ds));
        let input = g.concat_channels(&[x, cond])?;
        let enc = net::encode(g, &Layers::new(&self.encoder, &encoder), input)?;
        let head = net::decode(g, &Layers::new(&self.decoder, &decoder), &enc)?;
        let t = g.tanh(head)?;
        let delta = g.scalar_mul(t, self.epsilon)?;
        let y = g.add(x, delta)?;
        let output = g.clip(y, 0.0, 1.0)?;
        Ok(GeneratorForward { output, encoder, decoder })
    }

    /// G(x, N) on a batch (or a single image with one distortion). The
    /// result is additionally projected onto the ε-box of `x` so the budget
    /// holds exactly in f32.
    pub fn perturb(&self, x: &Tensor, ds: &[AffineDistortion]) -> Result<Tensor> {
        let single = x.shape().len() == 3;
        let xb = if single {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.clone().reshape(&s)?
        } else {
            x.clone()
        };
        let mut g = Graph::new();
        let xi = g.constant(xb.clone());
        let f = self.forward(&mut g, xi, ds, false)?;
        let eps = self.epsilon;
        let data = g
            .value(f.output)
            .data()
            .iter()
            .zip(xb.data())
            .map(|(&v, &o)| v.clamp(o - eps, o + eps).clamp(0.0, 1.0))
            .collect();
        let out = Tensor::new(xb.shape().to_vec(), data)?;
        if single {
            return out.reshape(x.shape());
        }
        Ok(out)
    }

    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.put_params(&format!("{prefix}generator/encoder"), &self.encoder)?;
        ck.put_params(&format!("{prefix}generator/decoder"), &self.decoder)?;
        ck.set_meta(
            format!("{prefix}generator"),
            GeneratorMeta {
                resolution: self.resolution,
                epsilon: self.epsilon,
                bounds: self.bounds,
            },
        )
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let meta: GeneratorMeta = ck.meta_as(&format!("{prefix}generator"))?;
        let g = AdvGenerator {
            resolution: meta.resolution,
            epsilon: meta.epsilon,
            bounds: meta.bounds,
            encoder: ck.params(&format!("{prefix}generator/encoder"))?,
            decoder: ck.params(&format!("{prefix}generator/decoder"))?,
        };
        let fresh = AdvGenerator::new(g.resolution, g.epsilon, g.bounds, &mut SeededRng::new(0))?;
        let shapes = |s: &ParamSet| {
            s.params()
                .iter()
                .map(|p| (p.name.clone(), p.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        if shapes(&g.encoder) != shapes(&fresh.encoder) || shapes(&g.decoder) != shapes(&fresh.decoder) {
            return Err(Error::Invalid("generator parameters do not match its topology".into()));
        }
        Ok(g)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        self.write_into(&mut ck, "")?;
        ck.save(stem)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        Self::read_from(&Checkpoint::load(stem)?, "")
    }

    pub fn digest(&self) -> Result<String> {
        let mut ck = Checkpoint::new();
        self.write_into(&mut ck, "")?;
        Ok(ck.digest())
    }
}
