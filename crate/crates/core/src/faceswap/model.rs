use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::net::{self, Layers};
use crate::diffengine::{Bound, Checkpoint, Graph, NodeId, ParamSet, SeededRng, Tensor};
use crate::synthdata::FaceSample;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    /// Plain encoder/decoder, no skip connections.
    #[serde(rename = "h128-mini")]
    H128Mini,
    /// Encoder-to-decoder skip connections inside the decoders.
    #[serde(rename = "sae-mini")]
    SaeMini,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Architecture::H128Mini => "h128-mini",
            Architecture::SaeMini => "sae-mini",
        }
    }

    fn skips(self) -> bool {
        self == Architecture::SaeMini
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h128-mini" => Ok(Architecture::H128Mini),
            "sae-mini" => Ok(Architecture::SaeMini),
            other => Err(Error::Invalid(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Which autoencoder: A is the source face, B the swap target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

/// Shared encoder with one decoder per identity. Each decoder emits a face
/// (3 channels) and a mask (1 channel), both through a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct SwapModel {
    arch: Architecture,
    resolution: usize,
    pub encoder: ParamSet,
    pub decoder_a: ParamSet,
    pub decoder_b: ParamSet,
    /// Identity tags the decoders are trained on; empty means unchecked.
    identities: [String; 2],
}

/// Graph handles produced by [`SwapModel::forward`].
pub struct Forward {
    pub face: NodeId,
    pub mask: NodeId,
    pub encoder: Bound,
    pub decoder: Bound,
}

fn batched(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.shape().len() {
        4 => Ok((x.clone(), false)),
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            Ok((x.clone().reshape(&s)?, true))
        }
        _ => Err(Error::shape("swap", &[x.shape()])),
    }
}

/// `face ⊙ mask + x ⊙ (1 − mask)`, written as `x + mask ⊙ (face − x)`.
pub fn blend_node(g: &mut Graph, face: NodeId, mask: NodeId, x: NodeId) -> Result<NodeId> {
    let d = g.sub(face, x)?;
    let d = g.mul_channel(d, mask)?;
    g.add(x, d)
}

impl SwapModel {
    pub fn new(arch: Architecture, resolution: usize, rng: &mut SeededRng) -> Result<Self> {
        let encoder = net::build_encoder(3, resolution, rng)?;
        let decoder_a = net::build_decoder(arch.skips(), 4, rng)?;
        let decoder_b = net::build_decoder(arch.skips(), 4, rng)?;
        Ok(SwapModel {
            arch,
            resolution,
            encoder,
            decoder_a,
            decoder_b,
            identities: [String::new(), String::new()],
        })
    }

    pub fn with_identities(mut self, a: &str, b: &str) -> Self {
        self.identities = [a.to_string(), b.to_string()];
        self
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn identity(&self, side: Side) -> &str {
        &self.identities[side as usize]
    }

    pub fn decoder(&self, side: Side) -> &ParamSet {
        match side {
            Side::A => &self.decoder_a,
            Side::B => &self.decoder_b,
        }
    }

    pub fn decoder_mut(&mut self, side: Side) -> &mut ParamSet {
        match side {
            Side::A => &mut self.decoder_a,
            Side::B => &mut self.decoder_b,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.resolution;
        if shape.len() != 4 || shape[1] != r || shape[2] != r || shape[3] != 3 {
            return Err(Error::shape("swap_model", &[shape, &[0, r, r, 3]]));
        }
        Ok(())
    }

    /// Records f_side(x) on `g` for an N×R×R×3 node. Parameters become
    /// differentiable leaves when `trainable`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, side: Side, trainable: bool) -> Result<Forward> {
        let encoder = self.encoder.bind(g, trainable);
        let decoder = self.decoder(side).bind(g, trainable);
        let (face, mask) = self.forward_bound(g, x, side, &encoder, &decoder)?;
        Ok(Forward { face, mask, encoder, decoder })
    }

    /// Like [`forward`](Self::forward) with parameters already on the graph,
    /// in the order of [`encoder`](Self::encoder) and the side's decoder.
    pub(crate) fn forward_bound(
        &self,
        g: &mut Graph,
        x: NodeId,
        side: Side,
        encoder: &Bound,
        decoder: &Bound,
    ) -> Result<(NodeId, NodeId)> {
        self.check_input(g.value(x).shape())?;
        let enc = net::encode(g, &Layers::new(&self.encoder, encoder), x)?;
        let head = net::decode(g, &Layers::new(self.decoder(side), decoder), &enc)?;
        let out = g.sigmoid(head)?;
        Ok((g.slice_channels(out, 0, 3)?, g.slice_channels(out, 3, 1)?))
    }

    /// The end-to-end deepfake H(x) with the B decoder, differentiable in `x`.
    pub fn swap_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let f = self.forward(g, x, Side::B, false)?;
        blend_node(g, f.face, f.mask, x)
    }

    /// (face, mask) of f_side on an N×R×R×3 batch or a single R×R×3 image.
    pub fn reconstruct(&self, side: Side, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (xb, single) = batched(x)?;
        let mut g = Graph::new();
        let xi = g.constant(xb);
        let f = self.forward(&mut g, xi, side, false)?;
        let (face, mask) = (g.value(f.face).clone(), g.value(f.mask).clone());
        if single {
            let r = self.resolution;
            return Ok((face.reshape(&[r, r, 3])?, mask.reshape(&[r, r, 1])?));
        }
        Ok((face, mask))
    }

    /// H(x) on a batch or single image; output keeps the input's rank.
    pub fn swap(&self, x: &Tensor) -> Result<Tensor> {
        let (xb, single) = batched(x)?;
        let mut g = Graph::new();
        let xi = g.constant(xb);
        let y = self.swap_node(&mut g, xi)?;
        let out = g.value(y).clone();
        if single {
            return out.reshape(x.shape());
        }
        Ok(out)
    }

    /// Swaps a frame sequence in chunks of `batch`.
    pub fn swap_frames(&self, frames: &[Tensor], batch: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(batch.max(1)) {
            let x = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
            out.extend(self.swap(&x)?.unstack());
        }
        Ok(out)
    }

    pub fn swap_samples(&self, samples: &[FaceSample], batch: usize) -> Result<Vec<Tensor>> {
        let frames: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        self.swap_frames(&frames, batch)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.write_into(&mut ck, "")?;
        Ok(ck)
    }

    /// Stores the model under `prefix` (empty for top level).
    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.put_params(&format!("{prefix}encoder"), &self.encoder)?;
        ck.put_params(&format!("{prefix}decoder_a"), &self.decoder_a)?;
        ck.put_params(&format!("{prefix}decoder_b"), &self.decoder_b)?;
        ck.set_meta(format!("{prefix}architecture_id"), self.arch.id())?;
        ck.set_meta(format!("{prefix}resolution"), self.resolution)?;
        ck.set_meta(format!("{prefix}identities"), &self.identities)?;
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let arch: String = ck.meta_as(&format!("{prefix}architecture_id"))?;
        let model = SwapModel {
            arch: arch.parse()?,
            resolution: ck.meta_as(&format!("{prefix}resolution"))?,
            encoder: ck.params(&format!("{prefix}encoder"))?,
            decoder_a: ck.params(&format!("{prefix}decoder_a"))?,
            decoder_b: ck.params(&format!("{prefix}decoder_b"))?,
            identities: ck.meta_as(&format!("{prefix}identities"))?,
        };
        model.validate_topology()?;
        Ok(model)
    }

    /// Checks loaded parameter shapes against a fresh model of the same
    /// architecture.
    fn validate_topology(&self) -> Result<()> {
        let fresh = SwapModel::new(self.arch, self.resolution, &mut SeededRng::new(0))?;
        for (name, a, b) in [
            ("encoder", &self.encoder, &fresh.encoder),
            ("decoder_a", &self.decoder_a, &fresh.decoder_a),
            ("decoder_b", &self.decoder_b, &fresh.decoder_b),
        ] {
            let shapes = |s: &ParamSet| {
                s.params()
                    .iter()
                    .map(|p| (p.name.clone(), p.value.shape().to_vec()))
                    .collect::<Vec<_>>()
            };
            if shapes(a) != shapes(b) {
                return Err(Error::Invalid(format!(
                    "{name} parameters do not match the {} topology",
                    self.arch
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        self.to_checkpoint()?.save(stem)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        Self::read_from(&Checkpoint::load(stem)?, "")
    }

    /// Digest of all weights and optimizer state.
    pub fn digest(&self) -> Result<String> {
        Ok(self.to_checkpoint()?.digest())
    }

    /// Digests of each parameter value alone (no Adam state), keyed by
    /// network and parameter name; used for lineage checks.
    pub fn weight_digests(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (net, set) in [("encoder", &self.encoder), ("decoder_a", &self.decoder_a), ("decoder_b", &self.decoder_b)] {
            for p in set.params() {
                let mut ck = Checkpoint::new();
                ck.insert("w", p.value.clone());
                out.push((format!("{net}/{}", p.name), ck.digest()));
            }
        }
        out
    }
}
