//! Temporal consistency scores for swapped videos.
//!
//! `e_tmp` is the scaled root-mean-square difference between consecutive
//! frames; `s_tmp` normalises an attacked sequence by its unattacked baseline.
//! Reductions run in f64 in frame order, so results do not depend on the
//! order of evaluation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffengine::Tensor;
use crate::{Error, Result};

/// Scale applied to the RMS frame difference.
pub const GAMMA: f64 = 1000.0;

/// Scaled RMS of consecutive-frame differences over every element
/// (pixels × channels).
pub fn e_tmp(frames: &[Tensor]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::Invalid(format!(
            "e_tmp needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let shape = frames[0].shape();
    let mut total = 0.0f64;
    for pair in frames.windows(2) {
        if pair[1].shape() != shape {
            return Err(Error::shape("e_tmp", &[shape, pair[1].shape()]));
        }
        total += pair[0]
            .data()
            .iter()
            .zip(pair[1].data())
            .map(|(&a, &b)| {
                let d = b as f64 - a as f64;
                d * d
            })
            .sum::<f64>();
    }
    let d = frames[0].len() as f64;
    Ok(GAMMA * (total / (d * (frames.len() - 1) as f64)).sqrt())
}

/// `e_tmp(attacked) / e_tmp(baseline) - 1`.
pub fn s_tmp(attacked: &[Tensor], baseline: &[Tensor]) -> Result<f64> {
    Ok(TemporalReport::from_frames(attacked, baseline)?.s_tmp)
}

fn ratio_minus_one(attacked: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Invalid(format!(
            "baseline e_tmp is {baseline}; a static baseline video cannot normalise s_tmp"
        )));
    }
    Ok(attacked / baseline - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalReport {
    pub e_tmp_attacked: f64,
    pub e_tmp_baseline: f64,
    pub s_tmp: f64,
    pub n_frames: usize,
    pub gamma: f64,
}

impl TemporalReport {
    pub fn from_scores(e_tmp_attacked: f64, e_tmp_baseline: f64, n_frames: usize) -> Result<Self> {
        Ok(TemporalReport {
            s_tmp: ratio_minus_one(e_tmp_attacked, e_tmp_baseline)?,
            e_tmp_attacked,
            e_tmp_baseline,
            n_frames,
            gamma: GAMMA,
        })
    }

    pub fn from_frames(attacked: &[Tensor], baseline: &[Tensor]) -> Result<Self> {
        if attacked.len() != baseline.len() {
            return Err(Error::Invalid(format!(
                "attacked has {} frames, baseline {}",
                attacked.len(),
                baseline.len()
            )));
        }
        Self::from_scores(e_tmp(attacked)?, e_tmp(baseline)?, attacked.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// One point of an S_tmp-versus-iterations curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub s_tmp: f64,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("iteration,s_tmp\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p.iteration, p.s_tmp));
    }
    out
}

pub fn parse_curve_csv(text: &str, path: &Path) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("iteration,s_tmp") {
        return Err(Error::format(path, "missing iteration,s_tmp header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (it, s) = l
                .split_once(',')
                .ok_or_else(|| Error::format(path, format!("bad curve row {l:?}")))?;
            Ok(CurvePoint {
                iteration: it.trim().parse().map_err(|_| Error::format(path, format!("bad iteration {it:?}")))?,
                s_tmp: s.trim().parse().map_err(|_| Error::format(path, format!("bad s_tmp {s:?}")))?,
            })
        })
        .collect()
}

pub fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, curve_csv(points)).map_err(|e| Error::io(path, e))
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_curve_csv(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frames(values: &[f32]) -> Vec<Tensor> {
        values.iter().map(|&v| Tensor::full(&[2, 2, 1], v)).collect()
    }

    #[test]
    fn hand_cases() {
        assert!((e_tmp(&frames(&[0.0, 0.5])).unwrap() - 500.0).abs() < 1e-6);
        assert!((e_tmp(&frames(&[0.0, 0.5, 1.0])).unwrap() - 500.0).abs() < 1e-6);
        assert_eq!(e_tmp(&frames(&[0.3, 0.3, 0.3])).unwrap(), 0.0);
    }

    #[test]
    fn s_tmp_arithmetic() {
        let r = TemporalReport::from_scores(550.0, 500.0, 10).unwrap();
        assert!((r.s_tmp - 0.1).abs() < 1e-12);
        assert_eq!(r.gamma, 1000.0);
        let v = frames(&[0.0, 0.2, 0.1]);
        assert_eq!(s_tmp(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(e_tmp(&frames(&[0.5])).is_err());
        let still = frames(&[0.4, 0.4]);
        let err = s_tmp(&frames(&[0.0, 1.0]), &still).unwrap_err().to_string();
        assert!(err.contains("static"), "{err}");
        let mixed = vec![Tensor::zeros(&[2, 2, 1]), Tensor::zeros(&[2, 2, 3])];
        assert!(e_tmp(&mixed).is_err());
    }

    #[test]
    fn report_and_curve_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = TemporalReport::from_scores(42.5, 40.0, 48).unwrap();
        r.save(&dir.path().join("r.json")).unwrap();
        assert_eq!(TemporalReport::load(&dir.path().join("r.json")).unwrap(), r);
        let pts = vec![
            CurvePoint { iteration: 375, s_tmp: 0.125 },
            CurvePoint { iteration: 750, s_tmp: -0.03 },
        ];
        write_curve(&dir.path().join("c.csv"), &pts).unwrap();
        assert_eq!(read_curve(&dir.path().join("c.csv")).unwrap(), pts);
    }

    fn seq_strategy() -> impl Strategy<Value = Vec<Vec<f32>>> {
        prop::collection::vec(prop::collection::vec(0.0f32..1.0, 12), 2..6)
    }

    fn to_frames(v: &[Vec<f32>]) -> Vec<Tensor> {
        v.iter().map(|d| Tensor::new(vec![2, 2, 3], d.clone()).unwrap()).collect()
    }

    proptest! {
        #[test]
        fn scale_law(seq in seq_strategy(), c in 0.0f32..4.0) {
            let a = to_frames(&seq);
            let scaled: Vec<Tensor> = a.iter().map(|t| t.map(|v| v * c)).collect();
            let e = e_tmp(&a).unwrap();
            let es = e_tmp(&scaled).unwrap();
            prop_assert!((es - c as f64 * e).abs() <= 1e-3 * (1.0 + es));
        }

        #[test]
        fn s_tmp_scale_invariant(x in seq_strategy(), c in 0.1f32..4.0) {
            let a = to_frames(&x);
            let b: Vec<Tensor> = a.iter().rev().map(|t| t.map(|v| 1.0 - v * 0.5)).collect();
            prop_assume!(e_tmp(&b).unwrap() > 1.0);
            let s = s_tmp(&a, &b).unwrap();
            let sa: Vec<Tensor> = a.iter().map(|t| t.map(|v| v * c)).collect();
            let sb: Vec<Tensor> = b.iter().map(|t| t.map(|v| v * c)).collect();
            let s2 = s_tmp(&sa, &sb).unwrap();
            prop_assert!((s - s2).abs() <= 1e-4 * (1.0 + s.abs()));
        }

        #[test]
        fn reversal_invariant(seq in seq_strategy()) {
            let a = to_frames(&seq);
            let r: Vec<Tensor> = a.iter().rev().cloned().collect();
            prop_assert!((e_tmp(&a).unwrap() - e_tmp(&r).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn non_negative(seq in seq_strategy()) {
            prop_assert!(e_tmp(&to_frames(&seq)).unwrap() >= 0.0);
        }
    }

    #[test]
    fn permutation_changes_score() {
        let a = frames(&[0.0, 1.0, 0.1]);
        let p = frames(&[0.0, 0.1, 1.0]);
        assert!((e_tmp(&a).unwrap() - e_tmp(&p).unwrap()).abs() > 1.0);
    }
}
