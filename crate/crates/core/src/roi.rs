//! Sliding-window region-of-interest detection on a saliency volume.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{dense_flow_magnitude, FlowParams};
use crate::geometry::WindowRect;
use crate::video::SparseSignal;

/// How the sparse signal is turned into per-pixel saliency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaliencyMode {
    /// Values above a fixed threshold pass unchanged, the rest become 0.
    To,
    /// Optical-flow magnitude of the sparse signal.
    Of,
}

impl std::str::FromStr for SaliencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "to" => Ok(Self::To),
            "of" => Ok(Self::Of),
            other => Err(Error::Config(format!("unknown saliency mode `{other}` (expected to|of)"))),
        }
    }
}

impl std::fmt::Display for SaliencyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::To => "to",
            Self::Of => "of",
        })
    }
}

/// Non-negative per-frame weights, not all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeWeights(Vec<f64>);

impl TimeWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("time weights must be finite and >= 0".into()));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("time weights are all zero".into()));
        }
        Ok(Self(weights))
    }

    pub fn uniform(frames: usize) -> Self {
        Self(vec![1.0; frames.max(1)])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Saliency volume in `(t, row, col)` layout.
pub fn saliency_volume(sparse: &SparseSignal, mode: SaliencyMode, to_threshold: f64, flow: &FlowParams) -> Result<Array3<f64>> {
    match mode {
        SaliencyMode::To => Ok(sparse.data().mapv(|s| if s > to_threshold { s } else { 0.0 })),
        SaliencyMode::Of => Ok(dense_flow_magnitude(sparse, flow)?.data),
    }
}

/// Window size proportional to a 60x80 window on a 400x400 frame, rounded
/// to even sizes.
pub fn default_window_size(height: usize, width: usize) -> (usize, usize) {
    let even = |v: f64| (((v / 2.0).round() as usize) * 2).max(2);
    (even(60.0 / 400.0 * height as f64), even(80.0 / 400.0 * width as f64))
}

/// Scan stride: 1 up to side 64, 4 at side 400.
pub fn default_stride(side: usize) -> usize {
    if side <= 64 {
        1
    } else {
        ((side as f64 / 100.0).round() as usize).max(1)
    }
}

/// Summed-area table with a zero top row and left column.
fn integral_image(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut sat = Array2::zeros((h + 1, w + 1));
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += img[[r, c]];
            sat[[r + 1, c + 1]] = sat[[r, c + 1]] + row;
        }
    }
    sat
}

/// Scores within this relative distance of the best count as ties, so the
/// tie-break survives rounding in the summed-area table.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Argmax over stride-grid positions of `sum_t s_t * sum_{window} sal_t^2`.
/// Ties go to the smallest top, then the smallest left.
pub fn detect_window(sal: &Array3<f64>, weights: &TimeWeights, win_h: usize, win_w: usize, stride: usize) -> Result<WindowRect> {
    let (frames, h, w) = sal.dim();
    if weights.as_slice().len() != frames {
        return Err(Error::Dimension(format!(
            "{} time weights for {frames} frames",
            weights.as_slice().len()
        )));
    }
    if win_h == 0 || win_w == 0 || win_h > h || win_w > w {
        return Err(Error::Dimension(format!("window {win_h}x{win_w} does not fit a {h}x{w} frame")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let mut energy = Array2::<f64>::zeros((h, w));
    for (frame, &s) in sal.axis_iter(Axis(0)).zip(weights.as_slice()) {
        if s != 0.0 {
            energy.zip_mut_with(&frame, |e, v| *e += s * v * v);
        }
    }
    let sat = integral_image(&energy);
    let mut best = WindowRect::new(0, 0, win_h, win_w);
    let mut best_score = f64::NEG_INFINITY;
    for top in (0..=h - win_h).step_by(stride) {
        for left in (0..=w - win_w).step_by(stride) {
            let (b, r) = (top + win_h, left + win_w);
            let score = sat[[b, r]] - sat[[top, r]] - sat[[b, left]] + sat[[top, left]];
            if best_score.is_infinite() || score > best_score + TIE_TOLERANCE * best_score.abs() {
                best_score = score;
                best = WindowRect::new(top, left, win_h, win_w);
            }
        }
    }
    Ok(best)
}

/// Runs [`detect_window`] once per temporal embedding component and keeps
/// the right-most candidate (largest left; ties: largest top, then the
/// earlier component). `v_gmf` holds `T` rows of `K` weights.
pub fn time_masked_detect(
    sal: &Array3<f64>,
    v_gmf: &[Vec<f64>],
    win_h: usize,
    win_w: usize,
    stride: usize,
) -> Result<(WindowRect, Vec<WindowRect>)> {
    let k = v_gmf.first().map_or(0, |r| r.len());
    if k == 0 || v_gmf.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension("temporal embeddings must be a non-empty T x K table".into()));
    }
    let candidates = (0..k)
        .map(|i| {
            let weights = TimeWeights::new(v_gmf.iter().map(|r| r[i]).collect())?;
            detect_window(sal, &weights, win_h, win_w, stride)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut chosen = candidates[0];
    for c in &candidates[1..] {
        if (c.left, c.top) > (chosen.left, chosen.top) {
            chosen = *c;
        }
    }
    Ok((chosen, candidates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::Video;

    #[test]
    fn single_pixel_tie_break() {
        let mut sal = Array3::zeros((1, 6, 6));
        sal[[0, 4, 5]] = 1.0;
        let w = detect_window(&sal, &TimeWeights::uniform(1), 2, 2, 1).unwrap();
        assert_eq!(w, WindowRect::new(3, 4, 2, 2));
    }

    #[test]
    fn scaling_weights_keeps_argmax() {
        let sal = Array3::from_shape_fn((3, 9, 9), |(t, r, c)| ((t * 31 + r * 7 + c * 3) % 11) as f64 / 10.0);
        let a = detect_window(&sal, &TimeWeights::uniform(3), 3, 4, 1).unwrap();
        let b = detect_window(&sal, &TimeWeights::new(vec![2.5; 3]).unwrap(), 3, 4, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_window_and_bad_weights_rejected() {
        let sal = Array3::zeros((2, 4, 4));
        assert!(detect_window(&sal, &TimeWeights::uniform(2), 5, 2, 1).is_err());
        assert!(TimeWeights::new(vec![0.0, 0.0]).is_err());
        assert!(TimeWeights::new(vec![1.0, -0.1]).is_err());
    }

    #[test]
    fn threshold_operator_bounds() {
        let data = Array3::from_shape_fn((2, 3, 3), |(t, r, c)| ((t + r + c) % 4) as f64 / 4.0);
        let v = Video::new(data.clone(), 25.0).unwrap();
        let f = FlowParams::default();
        assert_eq!(saliency_volume(&v, SaliencyMode::To, 0.0, &f).unwrap(), data);
        assert!(saliency_volume(&v, SaliencyMode::To, 1.0, &f).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn time_masking_separates_disjoint_supports() {
        // Left blob moves on frames 0..3, right blob on frames 3..6.
        let mut sal = Array3::zeros((6, 10, 20));
        for t in 0..6 {
            let cols = if t < 3 { 2..5 } else { 14..17 };
            for r in 4..7 {
                for c in cols.clone() {
                    sal[[t, r, c]] = 1.0;
                }
            }
        }
        let v: Vec<Vec<f64>> = (0..6).map(|t| if t < 3 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let (chosen, cands) = time_masked_detect(&sal, &v, 3, 3, 1).unwrap();
        assert_eq!(cands[0], WindowRect::new(4, 2, 3, 3));
        assert_eq!(cands[1], WindowRect::new(4, 14, 3, 3));
        assert_eq!(chosen, cands[1]);

        let single: Vec<Vec<f64>> = (0..6).map(|t| vec![t as f64 + 1.0]).collect();
        let weights = TimeWeights::new((0..6).map(|t| t as f64 + 1.0).collect()).unwrap();
        assert_eq!(
            time_masked_detect(&sal, &single, 3, 3, 1).unwrap().0,
            detect_window(&sal, &weights, 3, 3, 1).unwrap()
        );
    }

    #[test]
    fn identical_candidates() {
        let mut sal = Array3::zeros((2, 8, 8));
        sal[[0, 2, 2]] = 1.0;
        sal[[1, 2, 2]] = 1.0;
        let v = vec![vec![1.0, 1.0]; 2];
        let (chosen, cands) = time_masked_detect(&sal, &v, 2, 2, 1).unwrap();
        assert_eq!(cands[0], cands[1]);
        assert_eq!(chosen, cands[0]);
    }

    #[test]
    fn default_sizes() {
        assert_eq!(default_window_size(400, 400), (60, 80));
        assert_eq!(default_window_size(64, 64), (10, 12));
        assert_eq!(default_stride(400), 4);
        assert_eq!(default_stride(64), 1);
    }
}
