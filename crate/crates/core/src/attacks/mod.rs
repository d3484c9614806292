//! The two attacks on a protected sequence P_A: the PGD distorting attack
//! against a fixed swap model, and OGAN, a bounded conditional generator
//! trained in alternation with the swap model it attacks.

mod generator;
mod ogan;
mod pgd;

use std::fs;
use std::path::Path;

pub use generator::{AdvGenerator, GeneratorForward, GENERATOR_INPUT_CHANNELS};
pub use ogan::{
    loss_adv, loss_adv_node, ogan_protect, ogan_train, FaceFn, FrameDistortion, OganConfig, OganLog, OganOutcome,
    SourceFace,
};
pub use pgd::{
    loss_dist, loss_dist_node, pgd_distort, pgd_from, pgd_protect, pgd_start, IdentitySwap, PgdConfig, PgdReport,
    PgdRun, SwapFn,
};

use crate::diffengine::Checkpoint;
use crate::faceswap::SwapModel;
use crate::synthdata::{write_frames, FaceSample};
use crate::{Error, Result};

/// A trained attack ready to protect frames.
pub enum Attack<'a> {
    Ogan {
        generator: &'a AdvGenerator,
        distortions: &'a [FrameDistortion],
    },
    Pgd {
        model: &'a SwapModel,
        cfg: &'a PgdConfig,
    },
}

/// O_A: one adversarial image per protected sample, masks unchanged.
pub fn protect_sequence(attack: &Attack, p_a: &[FaceSample], batch: usize) -> Result<Vec<FaceSample>> {
    match attack {
        Attack::Ogan { generator, distortions } => ogan_protect(generator, distortions, p_a, batch),
        Attack::Pgd { model, cfg } => {
            let cfg = PgdConfig { batch_size: batch.max(1), ..(*cfg).clone() };
            Ok(pgd_protect(*model, p_a, &cfg)?.0)
        }
    }
}

const SAMPLES_STEM: &str = "adversarial";
const FRAMES_DIR: &str = "frames";

/// Writes `dir/frames/` (8-bit preview frames) and the exact f32 samples
/// as `dir/adversarial.{json,bin}`.
pub fn save_protected(dir: &Path, samples: &[FaceSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_frames(samples, &dir.join(FRAMES_DIR))?;
    let mut ck = Checkpoint::new();
    let mut index = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        ck.insert(format!("image/{i}"), s.image.clone());
        ck.insert(format!("mask/{i}"), s.mask.clone());
        index.push((s.frame_index, s.identity.clone()));
    }
    ck.set_meta("samples", index)?;
    ck.save(&dir.join(SAMPLES_STEM))
}

pub fn load_protected(dir: &Path) -> Result<Vec<FaceSample>> {
    let ck = Checkpoint::load(&dir.join(SAMPLES_STEM))?;
    let index: Vec<(usize, String)> = ck.meta_as("samples")?;
    index
        .into_iter()
        .enumerate()
        .map(|(i, (frame_index, identity))| {
            Ok(FaceSample {
                image: ck.require(&format!("image/{i}"))?.clone(),
                mask: ck.require(&format!("mask/{i}"))?.clone(),
                frame_index,
                identity,
            })
        })
        .collect()
}

pub fn save_distortions(path: &Path, ds: &[FrameDistortion]) -> Result<()> {
    let text = serde_json::to_string_pretty(ds)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_distortions(path: &Path) -> Result<Vec<FrameDistortion>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::{SeededRng, Tensor};

    fn samples(n: usize) -> Vec<FaceSample> {
        let mut rng = SeededRng::new(0);
        (0..n)
            .map(|i| FaceSample {
                image: Tensor::new(vec![16, 16, 3], (0..768).map(|_| rng.uniform()).collect()).unwrap(),
                mask: Tensor::full(&[16, 16, 1], 1.0),
                frame_index: i,
                identity: "A".into(),
            })
            .collect()
    }

    #[test]
    fn pgd_protection_is_order_and_batch_independent() {
        let s = samples(5);
        let cfg = PgdConfig { iterations: 3, ..PgdConfig::default() };
        let a = protect_sequence(&Attack::Pgd { model: &stub_model(), cfg: &cfg }, &s, 2).unwrap();
        let b = protect_sequence(&Attack::Pgd { model: &stub_model(), cfg: &cfg }, &s, 5).unwrap();
        assert_eq!(a, b);
        let mut rev = s.clone();
        rev.reverse();
        let mut c = pgd_protect(&stub_model(), &rev, &cfg).unwrap().0;
        c.reverse();
        assert_eq!(a, c);
        for (x, o) in a.iter().zip(&s) {
            assert!(x.image.max_abs_diff(&o.image).unwrap() <= cfg.epsilon + 1e-6);
            assert_eq!(x.mask, o.mask);
        }
    }

    fn stub_model() -> SwapModel {
        SwapModel::new(crate::faceswap::Architecture::H128Mini, 16, &mut SeededRng::new(2)).unwrap()
    }

    #[test]
    fn artifacts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = samples(3);
        save_protected(dir.path(), &s).unwrap();
        assert_eq!(load_protected(dir.path()).unwrap(), s);
        assert!(dir.path().join("frames/frame_00002.ppm").exists());

        let ds = vec![FrameDistortion { frame_index: 4, theta: 1.5, shift_x: -0.25, shift_y: 3.0 }];
        let p = dir.path().join("distortions.json");
        save_distortions(&p, &ds).unwrap();
        assert_eq!(load_distortions(&p).unwrap(), ds);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"frame_index\"") && text.contains("\"shift_y\""));
    }
}
