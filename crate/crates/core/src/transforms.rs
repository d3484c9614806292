//! Affine distortions and the training augmentation pipeline.
//!
//! Geometry uses pixel-centre coordinates (column `x`, row `y`, origin at the
//! top-left pixel) and rotates about the image centre `((W−1)/2, (H−1)/2)`.
//! Positive angles turn the picture counter-clockwise as displayed; positive
//! shifts move content right and down. Sampling is bilinear with coordinates
//! clamped to the image, so the border colour extends outwards.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffengine::{Graph, Nhwc, NodeId, SampleMap, SeededRng, Tensor};
use crate::synthdata::FaceSample;
use crate::{Error, Result};

/// Rotation (degrees) followed by a shift (pixels).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineDistortion {
    pub theta: f32,
    pub shift_x: f32,
    pub shift_y: f32,
}

impl AffineDistortion {
    pub const IDENTITY: AffineDistortion = AffineDistortion {
        theta: 0.0,
        shift_x: 0.0,
        shift_y: 0.0,
    };

    pub fn new(theta: f32, shift_x: f32, shift_y: f32) -> Self {
        AffineDistortion { theta, shift_x, shift_y }
    }

    pub fn is_identity(&self) -> bool {
        self.theta == 0.0 && self.shift_x == 0.0 && self.shift_y == 0.0
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.shift_x.is_finite() && self.shift_y.is_finite()
    }
}

/// Bounds Θ (degrees) and Ψ (pixels) of the distortion sampler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSamplerConfig {
    pub max_rotation: f32,
    pub max_shift: f32,
}

impl DistortionSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation >= 0.0) || !(self.max_shift >= 0.0) {
            return Err(Error::Invalid(format!("distortion bounds {self:?}")));
        }
        Ok(())
    }
}

/// θ ~ U[−Θ, Θ], shift_x, shift_y ~ U[−Ψ, Ψ] independently.
pub fn sample_distortion(cfg: &DistortionSamplerConfig, rng: &mut SeededRng) -> AffineDistortion {
    let (t, p) = (cfg.max_rotation, cfg.max_shift);
    AffineDistortion {
        theta: rng.uniform_range(-t, t),
        shift_x: rng.uniform_range(-p, p),
        shift_y: rng.uniform_range(-p, p),
    }
}

/// Rotation, zoom about the centre, then shift. Used for both distortions
/// and augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp {
    pub theta: f32,
    pub zoom: f32,
    pub shift_x: f32,
    pub shift_y: f32,
}

impl Warp {
    pub const IDENTITY: Warp = Warp {
        theta: 0.0,
        zoom: 1.0,
        shift_x: 0.0,
        shift_y: 0.0,
    };
}

impl From<AffineDistortion> for Warp {
    fn from(d: AffineDistortion) -> Self {
        Warp {
            theta: d.theta,
            zoom: 1.0,
            shift_x: d.shift_x,
            shift_y: d.shift_y,
        }
    }
}

fn warp_taps(h: usize, w: usize, warp: Warp, taps: &mut Vec<[(u32, f32); 4]>) {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let rad = (warp.theta as f64).to_radians();
    let (s, c) = rad.sin_cos();
    let zoom = warp.zoom as f64;
    let (sx, sy) = (warp.shift_x as f64, warp.shift_y as f64);
    for yo in 0..h {
        for xo in 0..w {
            let u = xo as f64 - cx - sx;
            let v = yo as f64 - cy - sy;
            // Inverse of the display-CCW rotation (dx, dy) ↦ (dx·c + dy·s, −dx·s + dy·c).
            let xs = ((u * c - v * s) / zoom + cx).clamp(0.0, w as f64 - 1.0);
            let ys = ((u * s + v * c) / zoom + cy).clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (xs.floor() as usize, ys.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((xs - x0 as f64) as f32, (ys - y0 as f64) as f32);
            let at = |y: usize, x: usize| (y * w + x) as u32;
            taps.push([
                (at(y0, x0), (1.0 - fx) * (1.0 - fy)),
                (at(y0, x1), fx * (1.0 - fy)),
                (at(y1, x0), (1.0 - fx) * fy),
                (at(y1, x1), fx * fy),
            ]);
        }
    }
}

/// Bilinear sample map for a batch, one warp per image.
pub fn sample_map(h: usize, w: usize, warps: &[Warp]) -> SampleMap {
    let mut taps = Vec::with_capacity(warps.len() * h * w);
    for &warp in warps {
        warp_taps(h, w, warp, &mut taps);
    }
    SampleMap {
        n: warps.len(),
        h_in: h,
        w_in: w,
        h_out: h,
        w_out: w,
        taps,
    }
}

fn warp_batch(batch: &Tensor, warps: &[Warp]) -> Result<Tensor> {
    let s = Nhwc::of("apply_affine", batch.shape())?;
    if warps.len() != s.n {
        return Err(Error::Invalid(format!("{} warps for a batch of {}", warps.len(), s.n)));
    }
    if warps.iter().all(|w| *w == Warp::IDENTITY) {
        return Ok(batch.clone());
    }
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let y = g.resample(x, Arc::new(sample_map(s.h, s.w, warps)))?;
    let out = g.value(y).map(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Applies `d` to one H×W×C image with values in [0, 1].
pub fn apply_affine(img: &Tensor, d: AffineDistortion) -> Result<Tensor> {
    let shape = img.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("apply_affine", &[&shape]));
    }
    if d.is_identity() {
        return Ok(img.clone());
    }
    let mut batched = vec![1];
    batched.extend_from_slice(&shape);
    let out = warp_batch(&img.clone().reshape(&batched)?, &[d.into()])?;
    out.reshape(&shape)
}

/// Applies one distortion per image of an N×H×W×C batch.
pub fn apply_affine_batch(batch: &Tensor, ds: &[AffineDistortion]) -> Result<Tensor> {
    let warps: Vec<Warp> = ds.iter().map(|&d| d.into()).collect();
    warp_batch(batch, &warps)
}

/// Differentiable form of [`apply_affine_batch`] on a graph node.
pub fn apply_affine_node(g: &mut Graph, x: NodeId, ds: &[AffineDistortion]) -> Result<NodeId> {
    let s = Nhwc::of("apply_affine", g.value(x).shape())?;
    let warps: Vec<Warp> = ds.iter().map(|&d| d.into()).collect();
    if warps.len() != s.n {
        return Err(Error::Invalid(format!("{} distortions for a batch of {}", warps.len(), s.n)));
    }
    g.resample(x, Arc::new(sample_map(s.h, s.w, &warps)))
}

/// Random training augmentation. Geometric parts act identically on image
/// and mask; colour jitter touches the image only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Degrees.
    pub max_rotation: f32,
    /// Fraction of the image width.
    pub max_translate: f32,
    /// Zoom factor drawn from 1 ± zoom_range.
    pub zoom_range: f32,
    /// Additive per-channel amplitude.
    pub color_jitter: f32,
    pub rotate: bool,
    pub translate: bool,
    pub zoom: bool,
    pub jitter: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation: 10.0,
            max_translate: 0.05,
            zoom_range: 0.05,
            color_jitter: 0.05,
            rotate: true,
            translate: true,
            zoom: true,
            jitter: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            max_rotation: 0.0,
            max_translate: 0.0,
            zoom_range: 0.0,
            color_jitter: 0.0,
            rotate: false,
            translate: false,
            zoom: false,
            jitter: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let amps = [self.max_rotation, self.max_translate, self.zoom_range, self.color_jitter];
        if amps.iter().any(|a| !(*a >= 0.0)) || self.zoom_range >= 1.0 {
            return Err(Error::Invalid(format!("augmentation amplitudes {self:?}")));
        }
        Ok(())
    }

    fn draw_warp(&self, width: usize, rng: &mut SeededRng) -> Warp {
        let mut w = Warp::IDENTITY;
        if self.rotate {
            w.theta = rng.uniform_range(-self.max_rotation, self.max_rotation);
        }
        if self.zoom {
            w.zoom = 1.0 + rng.uniform_range(-self.zoom_range, self.zoom_range);
        }
        if self.translate {
            let t = self.max_translate * width as f32;
            w.shift_x = rng.uniform_range(-t, t);
            w.shift_y = rng.uniform_range(-t, t);
        }
        w
    }
}

/// Augments a batch held as tensors (N×H×W×3 images, N×H×W×1 masks).
pub fn augment_tensors(
    images: &Tensor,
    masks: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut SeededRng,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let s = Nhwc::of("augment", images.shape())?;
    let sm = Nhwc::of("augment", masks.shape())?;
    if (sm.n, sm.h, sm.w, sm.c) != (s.n, s.h, s.w, 1) {
        return Err(Error::shape("augment", &[images.shape(), masks.shape()]));
    }
    let warps: Vec<Warp> = (0..s.n).map(|_| cfg.draw_warp(s.w, rng)).collect();
    let mut out_img = warp_batch(images, &warps)?;
    let out_mask = warp_batch(masks, &warps)?;
    if cfg.jitter && cfg.color_jitter > 0.0 {
        let per_image = s.h * s.w * s.c;
        for img in out_img.data_mut().chunks_mut(per_image) {
            let offsets: Vec<f32> = (0..s.c)
                .map(|_| rng.uniform_range(-cfg.color_jitter, cfg.color_jitter))
                .collect();
            for px in img.chunks_mut(s.c) {
                for (v, o) in px.iter_mut().zip(&offsets) {
                    *v = (*v + o).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok((out_img, out_mask))
}

/// Augments a batch of samples, keeping frame indices and identities.
pub fn augment(batch: &[FaceSample], cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<Vec<FaceSample>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let images = Tensor::stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let masks = Tensor::stack(&batch.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
    let (images, masks) = augment_tensors(&images, &masks, cfg, rng)?;
    Ok(batch
        .iter()
        .zip(images.unstack().into_iter().zip(masks.unstack()))
        .map(|(s, (image, mask))| FaceSample {
            image,
            mask,
            frame_index: s.frame_index,
            identity: s.identity.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::gradcheck::{check_gradients, GradCheckConfig};

    fn ramp(h: usize, w: usize, c: usize) -> Tensor {
        let data = (0..h * w * c)
            .map(|i| ((i * 7919) % 97) as f32 / 96.0)
            .collect();
        Tensor::new(vec![h, w, c], data).unwrap()
    }

    fn delta(h: usize, w: usize, r: usize, c: usize) -> Tensor {
        let mut t = Tensor::zeros(&[h, w, 1]);
        t.data_mut()[r * w + c] = 1.0;
        t
    }

    #[test]
    fn zero_bounds_give_identity() {
        let mut rng = SeededRng::new(1);
        let cfg = DistortionSamplerConfig { max_rotation: 0.0, max_shift: 0.0 };
        assert!(sample_distortion(&cfg, &mut rng).is_identity());
    }

    #[test]
    fn sampled_distortions_fill_their_bounds() {
        let mut rng = SeededRng::new(2);
        let cfg = DistortionSamplerConfig { max_rotation: 10.0, max_shift: 3.2 };
        let draws: Vec<_> = (0..10_000).map(|_| sample_distortion(&cfg, &mut rng)).collect();
        let (mut tmin, mut tmax, mut smin, mut smax) = (f32::MAX, f32::MIN, f32::MAX, f32::MIN);
        for d in &draws {
            assert!(d.theta.abs() <= 10.0 && d.shift_x.abs() <= 3.2 && d.shift_y.abs() <= 3.2);
            tmin = tmin.min(d.theta);
            tmax = tmax.max(d.theta);
            smin = smin.min(d.shift_x.min(d.shift_y));
            smax = smax.max(d.shift_x.max(d.shift_y));
        }
        assert!(tmin < -10.0 * 0.98 && tmax > 10.0 * 0.98);
        assert!(smin < -3.2 * 0.98 && smax > 3.2 * 0.98);

        let mut again = SeededRng::new(2);
        let replay: Vec<_> = (0..10_000).map(|_| sample_distortion(&cfg, &mut again)).collect();
        assert_eq!(draws, replay);
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = ramp(8, 8, 3);
        assert_eq!(apply_affine(&img, AffineDistortion::IDENTITY).unwrap(), img);
    }

    #[test]
    fn integer_shift_moves_delta_one_column() {
        let img = delta(8, 8, 3, 4);
        let out = apply_affine(&img, AffineDistortion::new(0.0, 1.0, 0.0)).unwrap();
        assert_eq!(out, delta(8, 8, 3, 5));
        let down = apply_affine(&img, AffineDistortion::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(down, delta(8, 8, 5, 4));
    }

    /// Forward coordinate mapping computed independently of the sampler.
    fn rotate_forward(r: usize, c: usize, n: usize, deg: f64) -> (f64, f64) {
        let ctr = (n as f64 - 1.0) / 2.0;
        let (dx, dy) = (c as f64 - ctr, r as f64 - ctr);
        let (s, co) = deg.to_radians().sin_cos();
        let x = dx * co + dy * s + ctr;
        let y = -dx * s + dy * co + ctr;
        (y, x)
    }

    #[test]
    fn quarter_turn_matches_coordinate_oracle() {
        let n = 7;
        for (r, c) in [(1, 2), (2, 5), (0, 3), (4, 1)] {
            let out = apply_affine(&delta(n, n, r, c), AffineDistortion::new(90.0, 0.0, 0.0)).unwrap();
            let (ty, tx) = rotate_forward(r, c, n, 90.0);
            let (ty, tx) = (ty.round() as usize, tx.round() as usize);
            for y in 0..n {
                for x in 0..n {
                    let v = out.data()[y * n + x];
                    let want = if (y, x) == (ty, tx) { 1.0 } else { 0.0 };
                    assert!((v - want).abs() < 1e-5, "({r},{c}) -> ({y},{x}) = {v}");
                }
            }
        }
        // Counter-clockwise as displayed: the right-middle pixel goes to the top-middle.
        assert_eq!(rotate_forward(3, 6, 7, 90.0).0.round(), 0.0);
    }

    #[test]
    fn shift_and_unshift_restores_interior() {
        let img = ramp(10, 10, 2);
        let there = apply_affine(&img, AffineDistortion::new(0.0, 2.0, 0.0)).unwrap();
        let back = apply_affine(&there, AffineDistortion::new(0.0, -2.0, 0.0)).unwrap();
        for y in 0..10 {
            for x in 2..8 {
                for ch in 0..2 {
                    let i = (y * 10 + x) * 2 + ch;
                    assert!((back.data()[i] - img.data()[i]).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn output_stays_in_unit_range() {
        let img = ramp(9, 9, 3);
        let out = apply_affine(&img, AffineDistortion::new(33.0, 1.3, -2.7)).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let img = ramp(6, 6, 2).reshape(&[1, 6, 6, 2]).unwrap();
        // Non-integer geometry keeps sample points off the bilinear breakpoints.
        let d = [AffineDistortion::new(7.3, 0.37, -0.41)];
        let mut rng = SeededRng::new(9);
        let report = check_gradients(
            &[img],
            |g, ids| apply_affine_node(g, ids[0], &d),
            &GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    fn sample_with(image: Tensor, mask: Tensor) -> FaceSample {
        FaceSample {
            image,
            mask,
            frame_index: 0,
            identity: "t".into(),
        }
    }

    #[test]
    fn zero_amplitudes_leave_batch_unchanged() {
        let s = sample_with(ramp(8, 8, 3), ramp(8, 8, 1));
        let cfg = AugmentConfig {
            max_rotation: 0.0,
            max_translate: 0.0,
            zoom_range: 0.0,
            color_jitter: 0.0,
            ..AugmentConfig::default()
        };
        let out = augment(std::slice::from_ref(&s), &cfg, &mut SeededRng::new(0)).unwrap();
        assert_eq!(out[0], s);
        let out = augment(std::slice::from_ref(&s), &AugmentConfig::none(), &mut SeededRng::new(0)).unwrap();
        assert_eq!(out[0], s);
    }

    fn centroid(t: &Tensor, w: usize, c: usize, ch: usize) -> (f64, f64) {
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for (i, px) in t.data().chunks(c).enumerate() {
            let v = px[ch] as f64;
            sx += v * (i % w) as f64;
            sy += v * (i / w) as f64;
            sw += v;
        }
        (sx / sw, sy / sw)
    }

    #[test]
    fn mask_and_image_move_together() {
        let n = 24;
        let mut img = Tensor::zeros(&[n, n, 3]);
        let mut mask = Tensor::zeros(&[n, n, 1]);
        for y in 9..14 {
            for x in 10..15 {
                img.data_mut()[(y * n + x) * 3 + 1] = 1.0;
                mask.data_mut()[y * n + x] = 1.0;
            }
        }
        let s = sample_with(img, mask);
        let cfg = AugmentConfig {
            jitter: false,
            max_rotation: 10.0,
            max_translate: 0.1,
            ..AugmentConfig::default()
        };
        let mut rng = SeededRng::new(4);
        let (ix0, iy0) = centroid(&s.image, n, 3, 1);
        let (mx0, my0) = centroid(&s.mask, n, 1, 0);
        for _ in 0..20 {
            let out = augment(std::slice::from_ref(&s), &cfg, &mut rng).unwrap().remove(0);
            let (ix, iy) = centroid(&out.image, n, 3, 1);
            let (mx, my) = centroid(&out.mask, n, 1, 0);
            assert!(((ix - ix0) - (mx - mx0)).abs() < 0.5);
            assert!(((iy - iy0) - (my - my0)).abs() < 0.5);
        }
    }

    #[test]
    fn jitter_bounded_by_amplitude_and_mask_untouched() {
        let s = sample_with(ramp(8, 8, 3), ramp(8, 8, 1));
        let mut cfg = AugmentConfig::none();
        cfg.jitter = true;
        cfg.color_jitter = 0.05;
        let mut rng = SeededRng::new(6);
        for _ in 0..10 {
            let out = augment(std::slice::from_ref(&s), &cfg, &mut rng).unwrap().remove(0);
            assert!(out.image.max_abs_diff(&s.image).unwrap() <= 0.05 + 1e-7);
            assert_eq!(out.mask, s.mask);
            assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
