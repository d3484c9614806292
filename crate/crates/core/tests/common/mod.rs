#![allow(dead_code)]

pub mod reference;

use ogan_lab::attacks::AdvGenerator;
use ogan_lab::diffengine::{Graph, NodeId, SeededRng, Tensor};
use ogan_lab::faceswap::{Architecture, Side, SwapModel};
use ogan_lab::transforms::{apply_affine_node, AffineDistortion, DistortionSamplerConfig};
use ogan_lab::Result;

use reference::GradReport;

pub fn random(shape: &[usize], lo: f32, hi: f32, rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

type Build = fn(&mut Graph, &mut SeededRng) -> Result<(NodeId, Vec<NodeId>)>;

fn var(g: &mut Graph, rng: &mut SeededRng, shape: &[usize], lo: f32, hi: f32) -> NodeId {
    g.variable(random(shape, lo, hi, rng))
}

/// One small graph per engine operator: (name, builder returning the output
/// and the variables to differentiate).
pub fn operator_cases() -> Vec<(&'static str, Build)> {
    const IMG: [usize; 4] = [2, 5, 4, 3];
    vec![
        ("conv2d", |g, r| {
            let (x, w, b) = (var(g, r, &[2, 6, 5, 3], -1.0, 1.0), var(g, r, &[3, 3, 3, 4], -0.5, 0.5), var(g, r, &[4], -0.5, 0.5));
            Ok((g.conv2d(x, w, b, 1, 1)?, vec![x, w, b]))
        }),
        ("conv2d_strided", |g, r| {
            let (x, w, b) = (var(g, r, &[1, 7, 6, 2], -1.0, 1.0), var(g, r, &[4, 4, 2, 3], -0.5, 0.5), var(g, r, &[3], -0.5, 0.5));
            Ok((g.conv2d(x, w, b, 2, 1)?, vec![x, w, b]))
        }),
        ("dense", |g, r| {
            let (x, w, b) = (var(g, r, &[3, 7], -1.0, 1.0), var(g, r, &[7, 5], -0.5, 0.5), var(g, r, &[5], -0.5, 0.5));
            Ok((g.dense(x, w, b)?, vec![x, w, b]))
        }),
        ("upsample2x", |g, r| {
            let x = var(g, r, &IMG, -1.0, 1.0);
            Ok((g.upsample2x(x)?, vec![x]))
        }),
        ("leaky_relu", |g, r| {
            let x = var(g, r, &IMG, -1.0, 1.0);
            Ok((g.leaky_relu(x, 0.1)?, vec![x]))
        }),
        ("tanh", |g, r| {
            let x = var(g, r, &IMG, -2.0, 2.0);
            Ok((g.tanh(x)?, vec![x]))
        }),
        ("sigmoid", |g, r| {
            let x = var(g, r, &IMG, -3.0, 3.0);
            Ok((g.sigmoid(x)?, vec![x]))
        }),
        ("sqrt", |g, r| {
            let x = var(g, r, &IMG, 0.1, 2.0);
            Ok((g.sqrt(x)?, vec![x]))
        }),
        ("abs", |g, r| {
            let x = var(g, r, &IMG, -1.0, 1.0);
            Ok((g.abs(x)?, vec![x]))
        }),
        ("square", |g, r| {
            let x = var(g, r, &IMG, -1.0, 1.0);
            Ok((g.square(x)?, vec![x]))
        }),
        ("add", |g, r| {
            let (a, b) = (var(g, r, &IMG, -1.0, 1.0), var(g, r, &IMG, -1.0, 1.0));
            Ok((g.add(a, b)?, vec![a, b]))
        }),
        ("sub", |g, r| {
            let (a, b) = (var(g, r, &IMG, -1.0, 1.0), var(g, r, &IMG, -1.0, 1.0));
            Ok((g.sub(a, b)?, vec![a, b]))
        }),
        ("mul", |g, r| {
            let (a, b) = (var(g, r, &IMG, -1.0, 1.0), var(g, r, &IMG, -1.0, 1.0));
            Ok((g.mul(a, b)?, vec![a, b]))
        }),
        ("mul_channel", |g, r| {
            let (a, m) = (var(g, r, &IMG, -1.0, 1.0), var(g, r, &[2, 5, 4, 1], 0.0, 1.0));
            Ok((g.mul_channel(a, m)?, vec![a, m]))
        }),
        ("scalar_mul", |g, r| {
            let x = var(g, r, &IMG, -1.0, 1.0);
            Ok((g.scalar_mul(x, -1.7)?, vec![x]))
        }),
        ("scalar_add", |g, r| {
            let x = var(g, r, &IMG, -1.0, 1.0);
            Ok((g.scalar_add(x, 0.3)?, vec![x]))
        }),
        ("abs_sum", |g, r| {
            let x = var(g, r, &IMG, -1.0, 1.0);
            Ok((g.abs_sum(x)?, vec![x]))
        }),
        ("sq_sum", |g, r| {
            let x = var(g, r, &IMG, -1.0, 1.0);
            Ok((g.sq_sum(x)?, vec![x]))
        }),
        ("mean", |g, r| {
            let x = var(g, r, &IMG, -1.0, 1.0);
            Ok((g.mean(x)?, vec![x]))
        }),
        ("concat_channels", |g, r| {
            let (a, b) = (var(g, r, &IMG, -1.0, 1.0), var(g, r, &[2, 5, 4, 2], -1.0, 1.0));
            Ok((g.concat_channels(&[a, b, a])?, vec![a, b]))
        }),
        ("slice_channels", |g, r| {
            let x = var(g, r, &IMG, -1.0, 1.0);
            Ok((g.slice_channels(x, 1, 2)?, vec![x]))
        }),
        ("reshape", |g, r| {
            let x = var(g, r, &IMG, -1.0, 1.0);
            let y = g.reshape(x, &[10, 12])?;
            // A non-linear consumer, so the reshaped layout matters.
            Ok((g.square(y)?, vec![x]))
        }),
        ("clip", |g, r| {
            let x = var(g, r, &IMG, -1.5, 1.5);
            Ok((g.clip(x, -1.0, 1.0)?, vec![x]))
        }),
        ("resample", |g, r| {
            let x = var(g, r, &[2, 8, 8, 3], 0.0, 1.0);
            let ds = [AffineDistortion::new(7.0, 1.3, -0.6), AffineDistortion::new(-4.0, -2.2, 0.9)];
            Ok((apply_affine_node(g, x, &ds)?, vec![x]))
        }),
    ]
}

pub const MODEL_RESOLUTION: usize = 16;

/// f_side(x) of a model: the concatenated (face, mask) heads, differentiated
/// with respect to the input and every parameter.
pub fn model_case(arch: Architecture, side: Side, seed: u64) -> Result<(Graph, NodeId, Vec<NodeId>)> {
    let mut rng = SeededRng::new(seed);
    let model = SwapModel::new(arch, MODEL_RESOLUTION, &mut rng)?;
    let mut g = Graph::new();
    let x = g.variable(random(&[1, MODEL_RESOLUTION, MODEL_RESOLUTION, 3], 0.0, 1.0, &mut rng));
    let f = model.forward(&mut g, x, side, true)?;
    let out = g.concat_channels(&[f.face, f.mask])?;
    let mut vars = vec![x];
    vars.extend_from_slice(f.encoder.ids());
    vars.extend_from_slice(f.decoder.ids());
    Ok((g, out, vars))
}

/// The end-to-end swap H(x), differentiated with respect to x only.
pub fn swap_case(arch: Architecture, seed: u64) -> Result<(Graph, NodeId, Vec<NodeId>)> {
    let mut rng = SeededRng::new(seed);
    let model = SwapModel::new(arch, MODEL_RESOLUTION, &mut rng)?;
    let mut g = Graph::new();
    let x = g.variable(random(&[1, MODEL_RESOLUTION, MODEL_RESOLUTION, 3], 0.0, 1.0, &mut rng));
    let out = model.swap_node(&mut g, x)?;
    Ok((g, out, vec![x]))
}

/// The perturbation generator, in its input and parameters. Inputs stay
/// away from 0 and 1 so the final clip is inactive.
pub fn generator_case(seed: u64) -> Result<(Graph, NodeId, Vec<NodeId>)> {
    let mut rng = SeededRng::new(seed);
    let bounds = DistortionSamplerConfig { max_rotation: 10.0, max_shift: 3.2 };
    let gen = AdvGenerator::new(MODEL_RESOLUTION, 2.0 / 255.0, bounds, &mut rng)?;
    let mut g = Graph::new();
    let x = g.variable(random(&[1, MODEL_RESOLUTION, MODEL_RESOLUTION, 3], 0.1, 0.9, &mut rng));
    let f = gen.forward(&mut g, x, &[AffineDistortion::new(3.0, -1.0, 2.0)], true)?;
    let mut vars = vec![x];
    vars.extend_from_slice(f.encoder.ids());
    vars.extend_from_slice(f.decoder.ids());
    Ok((g, f.output, vars))
}

/// Runs every operator case with `op_probes` probes each and every model
/// case with `model_probes`; returns (name, report) pairs.
pub fn gradient_suite(op_probes: usize, model_probes: usize) -> Result<Vec<(String, GradReport)>> {
    let mut out = Vec::new();
    for (i, (name, build)) in operator_cases().into_iter().enumerate() {
        let mut rng = SeededRng::new(100 + i as u64);
        let mut g = Graph::new();
        let (y, vars) = build(&mut g, &mut rng)?;
        out.push((name.to_string(), reference::check(&mut g, y, &vars, op_probes, 7 + i as u64)?));
    }
    let mut models = Vec::new();
    for arch in [Architecture::H128Mini, Architecture::SaeMini] {
        models.push((format!("{arch} f_A"), model_case(arch, Side::A, 1)?));
        models.push((format!("{arch} f_B"), model_case(arch, Side::B, 2)?));
        models.push((format!("{arch} H(x)"), swap_case(arch, 3)?));
    }
    models.push(("generator".to_string(), generator_case(4)?));
    for (i, (name, (mut g, y, vars))) in models.into_iter().enumerate() {
        out.push((name, reference::check(&mut g, y, &vars, model_probes, 50 + i as u64)?));
    }
    Ok(out)
}
