//! Procedural identity videos with analytic masks.
//!
//! Each identity is a stylised face (skin ellipse, hair, eyes, brows, nose,
//! mouth) over a static textured background. A smooth pose and expression
//! trajectory animates it over frames. Pixel values are quantised to
//! multiples of 1/255 at render time, so an 8-bit PPM/PGM round trip
//! reproduces synthetic frames exactly.

use std::collections::BTreeMap;
use std::f32::consts::TAU;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffengine::{SeededRng, Tensor};
use crate::{Error, Result};

pub const MIN_RESOLUTION: usize = 16;
pub const SIDECAR: &str = "sequence.json";

/// One face crop with its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    /// H×W×3 in [0, 1].
    pub image: Tensor,
    /// H×W×1 in [0, 1].
    pub mask: Tensor,
    pub frame_index: usize,
    pub identity: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    /// Head translation amplitude, fraction of the width.
    pub shift: f32,
    /// Head roll amplitude, degrees.
    pub roll: f32,
    /// Relative scale amplitude.
    pub scale: f32,
    /// Mouth opening amplitude in [0, 1].
    pub expression: f32,
    /// Base period of the pose trajectory, frames.
    pub period: f32,
}

impl MotionSpec {
    pub fn frozen() -> Self {
        MotionSpec {
            shift: 0.0,
            roll: 0.0,
            scale: 0.0,
            expression: 0.0,
            period: 1.0,
        }
    }
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec {
            shift: 0.06,
            roll: 6.0,
            scale: 0.04,
            expression: 0.8,
            period: 40.0,
        }
    }
}

/// Deterministic description of one synthetic identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthIdentitySpec {
    pub name: String,
    /// Face ellipse radii, fractions of the width.
    pub face_radii: [f32; 2],
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub background: [f32; 3],
    pub iris: [f32; 3],
    pub lips: [f32; 3],
    /// Horizontal eye offset from the face centre, fraction of the width.
    pub eye_spacing: f32,
    /// Eye height above the face centre, fraction of the width.
    pub eye_height: f32,
    pub mouth_width: f32,
    pub texture_seed: u64,
    pub motion: MotionSpec,
}

impl SynthIdentitySpec {
    /// Three well-separated built-in identities, `k` = 0, 1, 2 for A, B, C.
    pub fn preset(k: usize) -> Self {
        match k % 3 {
            0 => SynthIdentitySpec {
                name: "A".into(),
                face_radii: [0.27, 0.34],
                skin: [0.87, 0.69, 0.56],
                hair: [0.22, 0.14, 0.08],
                background: [0.35, 0.47, 0.62],
                iris: [0.25, 0.45, 0.62],
                lips: [0.72, 0.36, 0.38],
                eye_spacing: 0.11,
                eye_height: 0.07,
                mouth_width: 0.10,
                texture_seed: 11,
                motion: MotionSpec::default(),
            },
            1 => SynthIdentitySpec {
                name: "B".into(),
                face_radii: [0.30, 0.32],
                skin: [0.55, 0.38, 0.27],
                hair: [0.06, 0.05, 0.05],
                background: [0.63, 0.58, 0.40],
                iris: [0.20, 0.13, 0.07],
                lips: [0.45, 0.22, 0.20],
                eye_spacing: 0.12,
                eye_height: 0.06,
                mouth_width: 0.13,
                texture_seed: 23,
                motion: MotionSpec {
                    period: 46.0,
                    ..MotionSpec::default()
                },
            },
            _ => SynthIdentitySpec {
                name: "C".into(),
                face_radii: [0.25, 0.36],
                skin: [0.95, 0.84, 0.76],
                hair: [0.80, 0.58, 0.25],
                background: [0.30, 0.55, 0.33],
                iris: [0.30, 0.52, 0.30],
                lips: [0.85, 0.45, 0.50],
                eye_spacing: 0.10,
                eye_height: 0.08,
                mouth_width: 0.09,
                texture_seed: 37,
                motion: MotionSpec {
                    period: 52.0,
                    ..MotionSpec::default()
                },
            },
        }
    }

    pub fn with_motion(mut self, motion: MotionSpec) -> Self {
        self.motion = motion;
        self
    }
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn quantise(v: f32) -> f32 {
    decode_u8(encode_u8(v))
}

fn encode_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode_u8(b: u8) -> f32 {
    b as f32 / 255.0
}

fn mix(dst: &mut [f32; 3], src: [f32; 3], alpha: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += (s - *d) * alpha;
    }
}

/// Soft coverage of the ellipse of radii (rx, ry) at offset (x, y), with an
/// edge ramp `aa` wide in normalised units.
fn ellipse(x: f32, y: f32, rx: f32, ry: f32, aa: f32) -> f32 {
    let r = ((x / rx).powi(2) + (y / ry).powi(2)).sqrt();
    let band = aa / rx.min(ry);
    1.0 - smoothstep(1.0 - band, 1.0 + band, r)
}

/// Fixed sinusoidal texture; `k` selects frequencies and phases.
#[derive(Clone, Debug)]
struct Texture {
    waves: Vec<(f32, f32, f32, f32)>,
}

impl Texture {
    fn new(seed: u64, label: &str, waves: usize, freq: f32) -> Self {
        let mut rng = SeededRng::substream(seed, label);
        let waves = (0..waves)
            .map(|_| {
                let angle = rng.uniform_range(0.0, TAU);
                let f = freq * rng.uniform_range(0.6, 1.4);
                (f * angle.cos(), f * angle.sin(), rng.uniform_range(0.0, TAU), rng.uniform_range(0.5, 1.0))
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, x: f32, y: f32) -> f32 {
        let norm: f32 = self.waves.iter().map(|w| w.3).sum();
        self.waves
            .iter()
            .map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin())
            .sum::<f32>()
            / norm
    }
}

#[derive(Clone, Copy, Debug)]
struct Pose {
    dx: f32,
    dy: f32,
    roll: f32,
    scale: f32,
    mouth: f32,
    blink: f32,
}

struct Trajectory {
    motion: MotionSpec,
    phases: [f32; 8],
}

impl Trajectory {
    fn new(motion: MotionSpec, rng: &mut SeededRng) -> Self {
        let mut phases = [0.0; 8];
        for p in &mut phases {
            *p = rng.uniform_range(0.0, TAU);
        }
        Trajectory { motion, phases }
    }

    fn wave(&self, t: f32, k: usize, period: f32) -> f32 {
        let p = &self.phases;
        0.7 * (TAU * t / period + p[k]).sin() + 0.3 * (TAU * t / (0.43 * period) + p[k + 1]).sin()
    }

    fn at(&self, t: f32) -> Pose {
        let m = &self.motion;
        let period = m.period.max(1.0);
        Pose {
            dx: m.shift * self.wave(t, 0, period),
            dy: 0.7 * m.shift * self.wave(t, 1, 1.31 * period),
            roll: m.roll * self.wave(t, 2, 1.73 * period),
            scale: 1.0 + m.scale * self.wave(t, 3, 2.11 * period),
            mouth: m.expression * 0.5 * (1.0 + self.wave(t, 4, 0.61 * period)),
            blink: m.expression * 0.5 * (1.0 + self.wave(t, 5, 0.83 * period)),
        }
    }
}

struct Renderer<'a> {
    spec: &'a SynthIdentitySpec,
    res: usize,
    background: Texture,
    skin: Texture,
}

impl<'a> Renderer<'a> {
    fn new(spec: &'a SynthIdentitySpec, res: usize) -> Self {
        Renderer {
            spec,
            res,
            background: Texture::new(spec.texture_seed, "background", 4, 9.0),
            skin: Texture::new(spec.texture_seed, "skin", 3, 22.0),
        }
    }

    /// Renders one frame; returns (image, mask) as H×W×3 and H×W×1.
    fn frame(&self, pose: Pose) -> (Vec<f32>, Vec<f32>) {
        let s = self.spec;
        let n = self.res;
        let aa = 0.75 / n as f32;
        let (sin_r, cos_r) = pose.roll.to_radians().sin_cos();
        let [rx, ry] = s.face_radii;
        let mut image = Vec::with_capacity(n * n * 3);
        let mut mask = Vec::with_capacity(n * n);
        for yi in 0..n {
            for xi in 0..n {
                let x = (xi as f32 + 0.5) / n as f32 - 0.5;
                let y = (yi as f32 + 0.5) / n as f32 - 0.5;
                // Face-local coordinates: undo shift, roll and scale.
                let (ux, uy) = (x - pose.dx, y - pose.dy);
                let fx = (ux * cos_r - uy * sin_r) / pose.scale;
                let fy = (ux * sin_r + uy * cos_r) / pose.scale;

                let mut px = s.background;
                let bg = 0.06 * self.background.at(x, y);
                for c in &mut px {
                    *c += bg;
                }
                mix(&mut px, s.hair, ellipse(fx, fy + 0.07, rx * 1.18, ry * 1.12, aa));

                let face = ellipse(fx, fy, rx, ry, aa);
                let shade = 1.0 - 0.25 * ((fx / rx).powi(2) + (fy / ry).powi(2)) + 0.03 * self.skin.at(fx, fy);
                let mut skin = s.skin.map(|c| c * shade);

                let (ex, ey) = (s.eye_spacing, -s.eye_height);
                let lid = 0.028 * (1.0 - 0.7 * pose.blink) + 0.006;
                for side in [-1.0f32, 1.0] {
                    let cx = fx - side * ex;
                    mix(&mut skin, [0.96, 0.96, 0.94], ellipse(cx, fy - ey, 0.055, lid, aa));
                    mix(&mut skin, s.iris, ellipse(cx, fy - ey, 0.024, lid.min(0.024), aa));
                    mix(&mut skin, s.hair, ellipse(cx, fy - ey + 0.055, 0.06, 0.011, aa));
                }
                mix(&mut skin, s.skin.map(|c| c * 0.78), ellipse(fx, fy - 0.04, 0.025, 0.05, aa));
                let mouth_h = 0.012 + 0.035 * pose.mouth;
                mix(&mut skin, s.lips, ellipse(fx, fy - 0.16, s.mouth_width, mouth_h, aa));
                mix(&mut skin, [0.15, 0.05, 0.05], ellipse(fx, fy - 0.16, s.mouth_width * 0.7, mouth_h * 0.45, aa));
                mix(&mut px, skin, face);

                image.extend(px.iter().map(|&v| quantise(v)));
                let r = ((fx / rx).powi(2) + (fy / ry).powi(2)).sqrt();
                mask.push(quantise(1.0 - smoothstep(0.85, 1.0, r)));
            }
        }
        (image, mask)
    }
}

/// Renders `n_frames` consecutive frames of one identity.
pub fn synthesize_sequence(
    spec: &SynthIdentitySpec,
    n_frames: usize,
    resolution: usize,
    rng: &mut SeededRng,
) -> Result<Vec<FaceSample>> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::Invalid(format!(
            "resolution {resolution} below minimum {MIN_RESOLUTION}"
        )));
    }
    if n_frames < 2 {
        return Err(Error::Invalid(format!("need at least 2 frames, got {n_frames}")));
    }
    let trajectory = Trajectory::new(spec.motion, rng);
    let renderer = Renderer::new(spec, resolution);
    (0..n_frames)
        .map(|t| {
            let (image, mask) = renderer.frame(trajectory.at(t as f32));
            Ok(FaceSample {
                image: Tensor::new(vec![resolution, resolution, 3], image)?,
                mask: Tensor::new(vec![resolution, resolution, 1], mask)?,
                frame_index: t,
                identity: spec.name.clone(),
            })
        })
        .collect()
}

/// D_A, D_B, D_C and the protected range P_A inside D_A.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPartition {
    pub d_a: Vec<FaceSample>,
    pub d_b: Vec<FaceSample>,
    pub d_c: Vec<FaceSample>,
    pub protected: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub a: usize,
    pub b: usize,
    pub c: usize,
}

impl Default for PartitionSizes {
    fn default() -> Self {
        PartitionSizes { a: 512, b: 512, c: 512 }
    }
}

pub const DEFAULT_PROTECTED: Range<usize> = 0..48;

fn check_protected(len: usize, protected: &Range<usize>) -> Result<()> {
    if protected.start >= protected.end || protected.end > len {
        return Err(Error::Invalid(format!(
            "protected range {protected:?} is empty or outside 0..{len}"
        )));
    }
    Ok(())
}

impl DatasetPartition {
    pub fn new(
        d_a: Vec<FaceSample>,
        d_b: Vec<FaceSample>,
        d_c: Vec<FaceSample>,
        protected: Range<usize>,
    ) -> Result<Self> {
        check_protected(d_a.len(), &protected)?;
        for (set, name) in [(&d_a, "D_A"), (&d_b, "D_B"), (&d_c, "D_C")] {
            if let Some(first) = set.first() {
                if set.iter().any(|s| s.identity != first.identity) {
                    return Err(Error::Invalid(format!("{name} mixes identities")));
                }
            }
        }
        Ok(DatasetPartition { d_a, d_b, d_c, protected })
    }

    /// P_A: the protected video.
    pub fn p_a(&self) -> &[FaceSample] {
        &self.d_a[self.protected.clone()]
    }

    /// D_A ∖ P_A, in frame order.
    pub fn unprotected(&self) -> Vec<FaceSample> {
        self.d_a
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.protected.contains(i))
            .map(|(_, s)| s.clone())
            .collect()
    }

    /// D'_A: the protected samples replaced by `adversarial` (same order,
    /// same frame indices), the rest of D_A untouched.
    pub fn with_protected_replaced(&self, adversarial: &[FaceSample]) -> Result<Vec<FaceSample>> {
        let p = self.p_a();
        if adversarial.len() != p.len() {
            return Err(Error::Invalid(format!(
                "{} adversarial samples for {} protected",
                adversarial.len(),
                p.len()
            )));
        }
        for (a, o) in adversarial.iter().zip(p) {
            if a.frame_index != o.frame_index || a.image.shape() != o.image.shape() {
                return Err(Error::Invalid(format!(
                    "adversarial sample {} does not match protected frame {}",
                    a.frame_index, o.frame_index
                )));
            }
        }
        let mut out = self.d_a.clone();
        out[self.protected.clone()].clone_from_slice(adversarial);
        Ok(out)
    }

    pub fn target(&self, direction: Target) -> &[FaceSample] {
        match direction {
            Target::B => &self.d_b,
            Target::C => &self.d_c,
        }
    }
}

/// Target identity of a swap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    B,
    C,
}

/// Renders A, B and C and designates `protected` frames of A as P_A.
pub fn build_partition(
    specs: [&SynthIdentitySpec; 3],
    sizes: &PartitionSizes,
    protected: Range<usize>,
    resolution: usize,
    seed: u64,
) -> Result<DatasetPartition> {
    check_protected(sizes.a, &protected)?;
    let render = |spec: &SynthIdentitySpec, n: usize| {
        let mut rng = SeededRng::substream(seed, &format!("data/{}", spec.name));
        synthesize_sequence(spec, n, resolution, &mut rng)
    };
    DatasetPartition::new(
        render(specs[0], sizes.a)?,
        render(specs[1], sizes.b)?,
        render(specs[2], sizes.c)?,
        protected,
    )
}

/// Metadata written next to a frame directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSidecar {
    pub identity: String,
    pub spec: Option<SynthIdentitySpec>,
    pub seed: u64,
    pub resolution: usize,
    pub frames: usize,
    pub protected_range: Option<[usize; 2]>,
}

impl SequenceSidecar {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SIDECAR);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(SIDECAR);
        if !path.is_file() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::format(&path, e.to_string()))
    }
}

pub fn frame_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:05}.ppm"))
}

pub fn mask_file(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("mask_{index:05}.pgm"))
}

/// Encodes an H×W×C (C = 1 or 3) tensor as binary PGM/PPM.
pub fn encode_pnm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = match *t.shape() {
        [h, w, c] if c == 1 || c == 3 => (h, w, c),
        _ => return Err(Error::shape("encode_pnm", &[t.shape()])),
    };
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| encode_u8(v)));
    Ok(out)
}

/// Decodes a binary PGM/PPM (maxval 255) into H×W×C.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: &str| Error::format(path, msg.to_string());
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let c = match tokens[0] {
        "P6" => 3,
        "P5" => 1,
        other => return Err(bad(&format!("unsupported magic {other:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field {s:?}")));
    let (w, h, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} (only 255 supported)")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero dimension"));
    }
    let n = w * h * c;
    if bytes.len() < pos + n {
        return Err(bad("truncated raster"));
    }
    let data = bytes[pos..pos + n].iter().map(|&b| decode_u8(b)).collect();
    Tensor::new(vec![h, w, c], data)
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode_pnm(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

/// Writes `frame_NNNNN.ppm` / `mask_NNNNN.pgm`, numbered by position.
pub fn write_frames(seq: &[FaceSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in seq.iter().enumerate() {
        write_image(&frame_file(dir, i), &s.image)?;
        write_image(&mask_file(dir, i), &s.mask)?;
    }
    Ok(())
}

/// Reads a frame directory written by [`write_frames`]. Frame indices follow
/// the file numbering; the identity comes from the sidecar when present.
pub fn read_frames(dir: &Path) -> Result<Vec<FaceSample>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name.strip_prefix("frame_").and_then(|r| r.strip_suffix(".ppm")) {
            let idx: usize = num
                .parse()
                .map_err(|_| Error::format(entry.path(), "unparsable frame number"))?;
            frames.insert(idx, entry.path());
        }
    }
    let identity = match SequenceSidecar::read(dir)? {
        Some(side) => side.identity,
        None => dir
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let mut out = Vec::with_capacity(frames.len());
    let mut shape: Option<Vec<usize>> = None;
    for (pos, (idx, path)) in frames.into_iter().enumerate() {
        if idx != pos {
            return Err(Error::format(&path, format!("expected frame number {pos}")));
        }
        let image = read_image(&path)?;
        let mpath = mask_file(dir, idx);
        let mask = read_image(&mpath)?;
        if image.shape()[2] != 3 {
            return Err(Error::format(&path, "frame is not RGB"));
        }
        if mask.shape() != [image.shape()[0], image.shape()[1], 1] {
            return Err(Error::format(&mpath, "mask resolution differs from its frame"));
        }
        match &shape {
            Some(s) if s != image.shape() => {
                return Err(Error::format(&path, format!("resolution {:?} differs from {s:?}", image.shape())))
            }
            None => shape = Some(image.shape().to_vec()),
            _ => {}
        }
        out.push(FaceSample {
            image,
            mask,
            frame_index: idx,
            identity: identity.clone(),
        });
    }
    Ok(out)
}
