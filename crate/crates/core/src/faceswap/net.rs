//! Layer builders shared by the swap autoencoders and the attack generator.

use crate::diffengine::{Bound, Graph, NodeId, ParamSet, SeededRng};
use crate::{Error, Result};

pub(crate) const LEAK: f32 = 0.1;
pub(crate) const LATENT: usize = 128;
/// Channels of the three encoder stages.
pub(crate) const ENC_CH: [usize; 3] = [16, 32, 64];
/// Output channels of the three decoder stages.
pub(crate) const DEC_CH: [usize; 3] = [32, 16, 8];

/// Name-addressed view of a bound parameter set.
pub(crate) struct Layers<'a> {
    set: &'a ParamSet,
    ids: &'a Bound,
}

impl<'a> Layers<'a> {
    pub(crate) fn new(set: &'a ParamSet, ids: &'a Bound) -> Self {
        Layers { set, ids }
    }

    fn get(&self, name: &str) -> Result<NodeId> {
        self.set
            .position(name)
            .map(|i| self.ids.id(i))
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub(crate) fn has(&self, name: &str) -> bool {
        self.set.position(name).is_some()
    }

    pub(crate) fn conv(&self, g: &mut Graph, name: &str, x: NodeId, stride: usize) -> Result<NodeId> {
        let w = self.get(&format!("{name}.w"))?;
        let b = self.get(&format!("{name}.b"))?;
        let k = self.set.get(&format!("{name}.w")).map(|p| p.value.shape()[0]).unwrap_or(3);
        g.conv2d(x, w, b, stride, k / 2)
    }

    pub(crate) fn dense(&self, g: &mut Graph, name: &str, x: NodeId) -> Result<NodeId> {
        let w = self.get(&format!("{name}.w"))?;
        let b = self.get(&format!("{name}.b"))?;
        g.dense(x, w, b)
    }
}

/// He-uniform k×k convolution with zero bias.
pub(crate) fn add_conv(set: &mut ParamSet, name: &str, k: usize, cin: usize, cout: usize, rng: &mut SeededRng) -> Result<()> {
    let bound = (6.0 / (k * k * cin) as f32).sqrt();
    set.add_uniform(format!("{name}.w"), &[k, k, cin, cout], bound, rng)?;
    set.add_zeros(format!("{name}.b"), &[cout])?;
    Ok(())
}

/// Glorot-uniform k×k convolution with zero bias, for saturating heads.
pub(crate) fn add_head(set: &mut ParamSet, name: &str, k: usize, cin: usize, cout: usize, rng: &mut SeededRng) -> Result<()> {
    let bound = (6.0 / (k * k * (cin + cout)) as f32).sqrt();
    set.add_uniform(format!("{name}.w"), &[k, k, cin, cout], bound, rng)?;
    set.add_zeros(format!("{name}.b"), &[cout])?;
    Ok(())
}

pub(crate) fn add_dense(set: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut SeededRng) -> Result<()> {
    let bound = (6.0 / (din + dout) as f32).sqrt();
    set.add_uniform(format!("{name}.w"), &[din, dout], bound, rng)?;
    set.add_zeros(format!("{name}.b"), &[dout])?;
    Ok(())
}

pub(crate) fn check_resolution(res: usize) -> Result<()> {
    if res < 16 || !res.is_multiple_of(8) {
        return Err(Error::Invalid(format!(
            "resolution {res} must be a multiple of 8 and at least 16"
        )));
    }
    Ok(())
}

/// Encoder: three stride-2 convolutions, a dense bottleneck and a dense
/// projection back to an (res/8)² × 64 map.
pub(crate) fn build_encoder(cin: usize, res: usize, rng: &mut SeededRng) -> Result<ParamSet> {
    check_resolution(res)?;
    let mut set = ParamSet::new();
    add_conv(&mut set, "conv1", 3, cin, ENC_CH[0], rng)?;
    add_conv(&mut set, "conv2", 3, ENC_CH[0], ENC_CH[1], rng)?;
    add_conv(&mut set, "conv3", 3, ENC_CH[1], ENC_CH[2], rng)?;
    let flat = (res / 8) * (res / 8) * ENC_CH[2];
    add_dense(&mut set, "dense1", flat, LATENT, rng)?;
    add_dense(&mut set, "dense2", LATENT, flat, rng)?;
    Ok(set)
}

/// Encoder activations consumed by decoders.
pub(crate) struct Encoded {
    /// N×res/8×res/8×64 map after the bottleneck.
    pub(crate) map: NodeId,
    /// Stage-1 features, N×res/2×res/2×16.
    pub(crate) e1: NodeId,
    /// Stage-2 features, N×res/4×res/4×32.
    pub(crate) e2: NodeId,
}

pub(crate) fn encode(g: &mut Graph, l: &Layers, x: NodeId) -> Result<Encoded> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("encode", &[&shape]));
    }
    let (n, res) = (shape[0], shape[1]);
    let h = l.conv(g, "conv1", x, 2)?;
    let e1 = g.leaky_relu(h, LEAK)?;
    let h = l.conv(g, "conv2", e1, 2)?;
    let e2 = g.leaky_relu(h, LEAK)?;
    let h = l.conv(g, "conv3", e2, 2)?;
    let h = g.leaky_relu(h, LEAK)?;
    let r = res / 8;
    let flat = g.reshape(h, &[n, r * r * ENC_CH[2]])?;
    let z = l.dense(g, "dense1", flat)?;
    let up = l.dense(g, "dense2", z)?;
    let map = g.reshape(up, &[n, r, r, ENC_CH[2]])?;
    Ok(Encoded { map, e1, e2 })
}

/// Decoder: three [2× upsample, 3×3 conv] stages and a 3×3 head with
/// `cout` channels. With `skips`, 1×1-projected encoder stage-2 and stage-1
/// features are concatenated at the matching resolutions.
pub(crate) fn build_decoder(skips: bool, cout: usize, rng: &mut SeededRng) -> Result<ParamSet> {
    let mut set = ParamSet::new();
    let extra = if skips { [ENC_CH[1], ENC_CH[0], 0] } else { [0, 0, 0] };
    if skips {
        add_conv(&mut set, "skip2", 1, ENC_CH[1], ENC_CH[1], rng)?;
        add_conv(&mut set, "skip1", 1, ENC_CH[0], ENC_CH[0], rng)?;
    }
    let mut cin = ENC_CH[2];
    for (i, &c) in DEC_CH.iter().enumerate() {
        add_conv(&mut set, &format!("up{}", i + 1), 3, cin + extra[i], c, rng)?;
        cin = c;
    }
    add_head(&mut set, "head", 3, cin, cout, rng)?;
    Ok(set)
}

/// Returns the pre-activation head output.
pub(crate) fn decode(g: &mut Graph, l: &Layers, enc: &Encoded) -> Result<NodeId> {
    let mut h = enc.map;
    for i in 1..=3 {
        h = g.upsample2x(h)?;
        let skip = match i {
            1 if l.has("skip2.w") => Some(("skip2", enc.e2)),
            2 if l.has("skip1.w") => Some(("skip1", enc.e1)),
            _ => None,
        };
        if let Some((name, feat)) = skip {
            let s = l.conv(g, name, feat, 1)?;
            let s = g.leaky_relu(s, LEAK)?;
            h = g.concat_channels(&[h, s])?;
        }
        let c = l.conv(g, &format!("up{i}"), h, 1)?;
        h = g.leaky_relu(c, LEAK)?;
    }
    l.conv(g, "head", h, 1)
}
