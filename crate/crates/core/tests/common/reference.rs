//! Independent f64 reference for gradient checks.
//!
//! A recorded graph is replayed with its own f64 kernels (written here, not
//! shared with the engine), so central differences are accurate to ~1e-10
//! and the engine's analytic gradients are checked against the true
//! derivative rather than against its own f32 forward pass.

use std::collections::{BTreeSet, HashMap};

use ogan_lab::diffengine::{Graph, NodeId, Op, SeededRng, Tensor};
use ogan_lab::Result;

/// Replays `g` up to `out` in f64. Leaves take their recorded values unless
/// overridden. Also returns the branch taken by every element of every
/// non-smooth operator.
pub fn replay(g: &Graph, out: NodeId, overrides: &HashMap<NodeId, Vec<f64>>) -> (Vec<f64>, Vec<i8>) {
    let mut vals: HashMap<NodeId, Vec<f64>> = HashMap::new();
    let mut branches = Vec::new();
    for id in g.ids().take_while(|&id| id <= out) {
        let shape = g.value(id).shape();
        let v = match g.op(id) {
            None => match overrides.get(&id) {
                Some(v) => v.clone(),
                None => g.value(id).data().iter().map(|&x| x as f64).collect(),
            },
            Some((op, inputs)) => {
                let ins: Vec<&[f64]> = inputs.iter().map(|i| vals[i].as_slice()).collect();
                let shapes: Vec<&[usize]> = inputs.iter().map(|i| g.value(*i).shape()).collect();
                eval(op, &ins, &shapes, shape, &mut branches)
            }
        };
        vals.insert(id, v);
    }
    (vals.remove(&out).unwrap_or_default(), branches)
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

fn eval(op: &Op, x: &[&[f64]], shapes: &[&[usize]], out_shape: &[usize], br: &mut Vec<i8>) -> Vec<f64> {
    let unary = |f: &dyn Fn(f64) -> f64| x[0].iter().map(|&v| f(v)).collect::<Vec<f64>>();
    match op {
        Op::Conv2d { stride, pad } => conv(x[0], shapes[0], x[1], shapes[1], x[2], *stride, *pad, out_shape),
        Op::Dense => {
            let (n, i_dim, o_dim) = (shapes[0][0], shapes[1][0], shapes[1][1]);
            let mut y = vec![0.0; n * o_dim];
            for r in 0..n {
                for o in 0..o_dim {
                    let mut s = x[2][o];
                    for i in 0..i_dim {
                        s += x[0][r * i_dim + i] * x[1][i * o_dim + o];
                    }
                    y[r * o_dim + o] = s;
                }
            }
            y
        }
        Op::Upsample2x => {
            let (n, h, w, c) = (shapes[0][0], shapes[0][1], shapes[0][2], shapes[0][3]);
            let mut y = Vec::with_capacity(n * h * w * c * 4);
            for b in 0..n {
                for oy in 0..2 * h {
                    for ox in 0..2 * w {
                        let s = ((b * h + oy / 2) * w + ox / 2) * c;
                        y.extend_from_slice(&x[0][s..s + c]);
                    }
                }
            }
            y
        }
        Op::LeakyRelu(slope) => {
            br.extend(x[0].iter().map(|&v| sign(v)));
            let s = *slope as f64;
            unary(&|v| if v > 0.0 { v } else { s * v })
        }
        Op::Tanh => unary(&f64::tanh),
        Op::Sigmoid => unary(&|v| 1.0 / (1.0 + (-v).exp())),
        Op::Sqrt => {
            br.extend(x[0].iter().map(|&v| sign(v)));
            unary(&|v| v.max(0.0).sqrt())
        }
        Op::Abs => {
            br.extend(x[0].iter().map(|&v| sign(v)));
            unary(&f64::abs)
        }
        Op::Square => unary(&|v| v * v),
        Op::Add => x[0].iter().zip(x[1]).map(|(a, b)| a + b).collect(),
        Op::Sub => x[0].iter().zip(x[1]).map(|(a, b)| a - b).collect(),
        Op::Mul => x[0].iter().zip(x[1]).map(|(a, b)| a * b).collect(),
        Op::MulChannel => {
            let c = *shapes[0].last().unwrap();
            x[0].iter().enumerate().map(|(i, a)| a * x[1][i / c]).collect()
        }
        Op::ScalarMul(s) => unary(&|v| *s as f64 * v),
        Op::ScalarAdd(s) => unary(&|v| v + *s as f64),
        Op::AbsSum => {
            br.extend(x[0].iter().map(|&v| sign(v)));
            vec![x[0].iter().map(|v| v.abs()).sum()]
        }
        Op::SqSum => vec![x[0].iter().map(|v| v * v).sum()],
        Op::Mean => vec![x[0].iter().sum::<f64>() / x[0].len() as f64],
        Op::ConcatChannels => {
            let cs: Vec<usize> = shapes.iter().map(|s| *s.last().unwrap()).collect();
            let rows = x[0].len() / cs[0];
            let mut y = Vec::new();
            for r in 0..rows {
                for (part, &c) in x.iter().zip(&cs) {
                    y.extend_from_slice(&part[r * c..(r + 1) * c]);
                }
            }
            y
        }
        Op::SliceChannels { start, len } => {
            let c = *shapes[0].last().unwrap();
            x[0].chunks(c).flat_map(|row| row[*start..start + len].to_vec()).collect()
        }
        Op::Reshape(_) => x[0].to_vec(),
        Op::Clip { lo, hi } => {
            let (lo, hi) = (*lo as f64, *hi as f64);
            br.extend(x[0].iter().map(|&v| if v <= lo { -1 } else if v >= hi { 1 } else { 0 }));
            unary(&|v| v.clamp(lo, hi))
        }
        Op::Resample(map) => {
            let c = shapes[0][3];
            let (in_px, out_px) = (map.h_in * map.w_in, map.h_out * map.w_out);
            let mut y = vec![0.0; map.n * out_px * c];
            for n in 0..map.n {
                for p in 0..out_px {
                    for &(src, w) in &map.taps[n * out_px + p] {
                        for k in 0..c {
                            y[(n * out_px + p) * c + k] += w as f64 * x[0][(n * in_px + src as usize) * c + k];
                        }
                    }
                }
            }
            y
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv(x: &[f64], xs: &[usize], w: &[f64], ws: &[usize], b: &[f64], stride: usize, pad: usize, os: &[usize]) -> Vec<f64> {
    let (n, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, co) = (ws[0], ws[1], ws[3]);
    let (ho, wo) = (os[1], os[2]);
    let mut y = vec![0.0; n * ho * wo * co];
    for bn in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = &mut y[((bn * ho + oy) * wo + ox) * co..][..co];
                dst.copy_from_slice(b);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let src = &x[((bn * h + iy as usize) * wd + ix as usize) * ci..][..ci];
                        for (c, &xv) in src.iter().enumerate() {
                            let wrow = &w[((ky * kw + kx) * ci + c) * co..][..co];
                            for (d, &wv) in dst.iter_mut().zip(wrow) {
                                *d += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub kinked: usize,
}

impl GradReport {
    pub fn merge(&mut self, other: &GradReport) {
        self.probes += other.probes;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.kinked += other.kinked;
    }
}

/// Compares the engine's gradient of `Σ r·out` (random fixed `r`) with
/// respect to `vars` against f64 central differences of the replay.
/// Each probe is an 8-coordinate slice of one variable; its error is
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-6)`. Coordinates
/// whose ±h replays change a branch are redrawn and counted as kinked.
pub fn check(g: &mut Graph, out: NodeId, vars: &[NodeId], probes: usize, seed: u64) -> Result<GradReport> {
    let mut rng = SeededRng::new(seed);
    let shape = g.value(out).shape().to_vec();
    let n = g.value(out).len();
    let r32: Vec<f32> = (0..n).map(|_| rng.normal()).collect();
    let r: Vec<f64> = r32.iter().map(|&v| v as f64).collect();
    let w = g.constant(Tensor::new(shape, r32)?);
    let prod = g.mul(out, w)?;
    let mean = g.mean(prod)?;
    let loss = g.scalar_mul(mean, n as f32)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(g, v)).collect();

    const H: f64 = 1e-5;
    const SLICE: usize = 8;
    let project = |y: &[f64]| y.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
    let mut report = GradReport::default();
    for p in 0..probes {
        let k = p % vars.len();
        let base: Vec<f64> = g.value(vars[k]).data().iter().map(|&v| v as f64).collect();
        let len = base.len();
        let mut tried = BTreeSet::new();
        let (mut diff, mut na, mut nn, mut used) = (0.0f64, 0.0f64, 0.0f64, 0);
        while used < SLICE.min(len) && tried.len() < len {
            let i = rng.below(len);
            if !tried.insert(i) {
                continue;
            }
            let mut ov = HashMap::new();
            let mut v = base.clone();
            v[i] = base[i] + H;
            ov.insert(vars[k], v.clone());
            let (yp, bp) = replay(g, out, &ov);
            v[i] = base[i] - H;
            ov.insert(vars[k], v);
            let (ym, bm) = replay(g, out, &ov);
            if bp != bm {
                report.kinked += 1;
                continue;
            }
            let numeric = (project(&yp) - project(&ym)) / (2.0 * H);
            let a = analytic[k].data()[i] as f64;
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
            used += 1;
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-6);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.probes += 1;
    }
    Ok(report)
}
