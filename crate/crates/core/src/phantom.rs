//! Synthetic echo-like phantoms with analytic ground truth.
//!
//! A phantom is a smooth rank-`r` background (Gaussian intensity bumps whose
//! brightness follows the cardiac cycle) plus one or two "leaflets": bright
//! elongated blobs hinged near the top of their window that appear while the
//! valve is open. During each visible phase a leaflet swings once across its
//! angular range while its hinge slides sideways, like an annulus moving with
//! the heart. Additive Gaussian speckle is applied last and the result is
//! clamped to `[0, 1]`.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::WindowRect;
use crate::video::Video;

/// Second moving structure, phase shifted against the valve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    pub window: WindowRect,
    /// Phase lag relative to the valve, in frames.
    pub phase_offset_frames: f64,
    /// Leaflet size multiplier relative to the valve leaflet.
    pub scale: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background_rank: usize,
    pub valve_window: WindowRect,
    pub valve_period_frames: usize,
    pub distractor: Option<DistractorSpec>,
    pub speckle_std: f64,
    pub seed: u64,
    pub valve_intensity: f64,
    /// Leaflet length as a fraction of the valve window height.
    pub leaflet_length: f64,
    /// Leaflet thickness in pixels (full width at half maximum).
    pub leaflet_thickness: f64,
    /// Half-range of the angular sweep, degrees.
    pub sweep_degrees: f64,
    /// Sideways hinge travel over one swing, as a fraction of the window
    /// width. Spreads the footprint so no pixel stays covered all cycle.
    #[serde(default)]
    pub hinge_travel: f64,
    /// Openness below which the valve is closed and invisible.
    pub visible_above: f64,
    pub frame_rate_hz: f64,
}

impl PhantomConfig {
    /// The 64x64x48 single-valve phantom used by the acceptance suite.
    pub fn standard(seed: u64) -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 48,
            background_rank: 2,
            valve_window: WindowRect::new(22, 38, 16, 18),
            valve_period_frames: 16,
            distractor: None,
            speckle_std: 0.02,
            seed,
            valve_intensity: 0.6,
            leaflet_length: 0.45,
            leaflet_thickness: 6.0,
            sweep_degrees: 20.0,
            hinge_travel: 0.5,
            visible_above: 0.2,
            frame_rate_hz: 25.0,
        }
    }

    /// Standard phantom plus a larger distractor valve on the left, half a
    /// period out of phase. Each valve shows only while more than half
    /// open, so the two are never visible in the same frame.
    pub fn two_blob(seed: u64) -> Self {
        let mut cfg = Self::standard(seed);
        cfg.visible_above = 0.5;
        cfg.distractor = Some(DistractorSpec {
            window: WindowRect::new(22, 8, 16, 18),
            phase_offset_frames: cfg.valve_period_frames as f64 / 2.0,
            scale: 1.75,
            intensity: 0.6,
        });
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::Config("phantom dimensions must be >= 1".into()));
        }
        if self.valve_period_frames < 4 {
            return Err(Error::Config("valve_period_frames must be >= 4".into()));
        }
        if !(self.speckle_std >= 0.0 && self.speckle_std.is_finite()) {
            return Err(Error::Config("speckle_std must be >= 0".into()));
        }
        if self.background_rank == 0 {
            return Err(Error::Config("background_rank must be >= 1".into()));
        }
        if !self.valve_window.fits_in(self.height, self.width) {
            return Err(Error::Config(format!(
                "valve window {:?} outside {}x{} frame",
                self.valve_window, self.height, self.width
            )));
        }
        if let Some(d) = &self.distractor {
            if !d.window.fits_in(self.height, self.width) {
                return Err(Error::Config(format!(
                    "distractor window {:?} outside frame",
                    d.window
                )));
            }
            if d.window.overlaps(&self.valve_window) {
                return Err(Error::Config(
                    "valve and distractor windows overlap".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    pub valve_mask: Array3<bool>,
    pub valve_window: WindowRect,
    pub distractor_window: Option<WindowRect>,
    pub background_rank: usize,
    /// Valve openness in `[0, 1]` per frame.
    pub valve_activity: Vec<f64>,
    pub distractor_activity: Option<Vec<f64>>,
}

/// Serializable summary of a [`PhantomTruth`] (the mask travels separately).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthMeta {
    pub valve_window: WindowRect,
    pub distractor_window: Option<WindowRect>,
    pub background_rank: usize,
    pub valve_activity: Vec<f64>,
    pub distractor_activity: Option<Vec<f64>>,
}

impl PhantomTruth {
    pub fn meta(&self) -> TruthMeta {
        TruthMeta {
            valve_window: self.valve_window,
            distractor_window: self.distractor_window,
            background_rank: self.background_rank,
            valve_activity: self.valve_activity.clone(),
            distractor_activity: self.distractor_activity.clone(),
        }
    }

    pub fn from_meta(meta: TruthMeta, valve_mask: Array3<bool>) -> Self {
        Self {
            valve_mask,
            valve_window: meta.valve_window,
            distractor_window: meta.distractor_window,
            background_rank: meta.background_rank,
            valve_activity: meta.valve_activity,
            distractor_activity: meta.distractor_activity,
        }
    }
}

/// Openness of a valve at frame `t`: 0 closed, 1 fully open.
fn openness(t: f64, period: f64, phase_frames: f64) -> f64 {
    0.5 - 0.5 * (2.0 * PI * (t - phase_frames) / period).cos()
}

/// Progress through the visible part of the cycle in `[0, 1]`. Drives the
/// leaflet angle, so the leaflet swings once across its range per cycle
/// instead of retracing its opening path.
fn swing(t: f64, period: f64, phase_frames: f64, visible_above: f64) -> f64 {
    let frac = ((t - phase_frames) / period).rem_euclid(1.0);
    let start = (1.0 - 2.0 * visible_above).clamp(-1.0, 1.0).acos() / (2.0 * PI);
    ((frac - start) / (1.0 - 2.0 * start)).clamp(0.0, 1.0)
}

struct Leaflet {
    hinge_row: f64,
    hinge_col: f64,
    length: f64,
    thickness: f64,
    sweep: f64,
    travel: f64,
}

impl Leaflet {
    fn in_window(window: &WindowRect, length_frac: f64, thickness: f64, sweep_deg: f64, travel: f64) -> Self {
        Self {
            hinge_row: window.top as f64 + 0.5,
            hinge_col: window.left as f64 + window.width as f64 / 2.0 - 0.5,
            length: length_frac * window.height as f64,
            thickness,
            sweep: sweep_deg.to_radians(),
            travel: travel * window.width as f64,
        }
    }

    /// Half-maximum footprint of the oriented Gaussian ellipse at swing
    /// progress `progress` in `[0, 1]`.
    fn rasterize(&self, progress: f64, window: &WindowRect, frame: &mut Array2<bool>) {
        let angle = self.sweep * (2.0 * progress - 1.0);
        let (dir_r, dir_c) = (angle.cos(), angle.sin());
        let center_r = self.hinge_row + 0.5 * self.length * dir_r;
        let center_c = self.hinge_col + self.travel * (progress - 0.5) + 0.5 * self.length * dir_c;
        // Gaussian std per axis such that the half-max contour has the
        // requested semi-axes.
        let half_max = (2.0 * 2f64.ln()).sqrt();
        let sigma_major = 0.5 * self.length / half_max;
        let sigma_minor = 0.5 * self.thickness / half_max;
        for r in window.top..window.bottom() {
            for c in window.left..window.right() {
                let dr = r as f64 - center_r;
                let dc = c as f64 - center_c;
                let along = dr * dir_r + dc * dir_c;
                let across = -dr * dir_c + dc * dir_r;
                let g = (-0.5
                    * ((along / sigma_major).powi(2) + (across / sigma_minor).powi(2)))
                .exp();
                if g >= 0.5 {
                    frame[[r, c]] = true;
                }
            }
        }
    }
}

/// Smooth background: `sum_k P_k(x) c_k(t)`, returned as (patterns, courses).
fn background_factors(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> (Vec<Array2<f64>>, Vec<Vec<f64>>) {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let rank = cfg.background_rank;
    let period = cfg.valve_period_frames as f64;
    let mut patterns = Vec::with_capacity(rank);
    let mut courses = Vec::with_capacity(rank);
    for k in 0..rank {
        let amplitude = 0.4 / rank as f64 * rng.random_range(0.75..1.0);
        let cy = rng.random_range(0.15..0.85) * h;
        let cx = rng.random_range(0.15..0.85) * w;
        let sigma = rng.random_range(0.12..0.2) * h.min(w);
        let pattern = Array2::from_shape_fn((cfg.height, cfg.width), |(r, c)| {
            let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
            amplitude * (-d2 / (2.0 * sigma * sigma)).exp()
        });
        let phase = period * k as f64 / rank as f64;
        let course = (0..cfg.frames)
            .map(|t| openness(t as f64, period, phase))
            .collect();
        patterns.push(pattern);
        courses.push(course);
    }
    (patterns, courses)
}

/// Noise-free background volume; exposed for oracle tests.
pub fn phantom_background(cfg: &PhantomConfig) -> Result<Array3<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (patterns, courses) = background_factors(cfg, &mut rng);
    let mut bg = Array3::<f64>::zeros((cfg.frames, cfg.height, cfg.width));
    for (pattern, course) in patterns.iter().zip(&courses) {
        for (t, mut frame) in bg.outer_iter_mut().enumerate() {
            frame.scaled_add(course[t], pattern);
        }
    }
    Ok(bg)
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Video, PhantomTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (patterns, courses) = background_factors(cfg, &mut rng);
    let period = cfg.valve_period_frames as f64;
    let (h, w, t_len) = (cfg.height, cfg.width, cfg.frames);

    let valve = Leaflet::in_window(
        &cfg.valve_window,
        cfg.leaflet_length,
        cfg.leaflet_thickness,
        cfg.sweep_degrees,
        cfg.hinge_travel,
    );
    let distractor = cfg.distractor.as_ref().map(|d| {
        (
            d,
            Leaflet::in_window(
                &d.window,
                cfg.leaflet_length * d.scale,
                cfg.leaflet_thickness * d.scale,
                cfg.sweep_degrees,
                cfg.hinge_travel,
            ),
        )
    });

    let valve_activity: Vec<f64> = (0..t_len).map(|t| openness(t as f64, period, 0.0)).collect();
    let distractor_activity: Option<Vec<f64>> = distractor.as_ref().map(|(d, _)| {
        (0..t_len)
            .map(|t| openness(t as f64, period, d.phase_offset_frames))
            .collect()
    });

    let mut video = Array3::<f64>::zeros((t_len, h, w));
    let mut valve_mask = Array3::from_elem((t_len, h, w), false);
    let noise = Normal::new(0.0, cfg.speckle_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;

    for t in 0..t_len {
        let mut frame = video.index_axis_mut(Axis(0), t);
        for (pattern, course) in patterns.iter().zip(&courses) {
            frame.scaled_add(course[t], pattern);
        }

        let open = valve_activity[t];
        if open > cfg.visible_above {
            let mut m = valve_mask.index_axis_mut(Axis(0), t).to_owned();
            valve.rasterize(swing(t as f64, period, 0.0, cfg.visible_above), &cfg.valve_window, &mut m);
            valve_mask.index_axis_mut(Axis(0), t).assign(&m);
            for ((r, c), on) in m.indexed_iter() {
                if *on {
                    frame[[r, c]] += cfg.valve_intensity;
                }
            }
        }
        if let (Some((spec, leaflet)), Some(activity)) = (&distractor, &distractor_activity) {
            let open = activity[t];
            if open > cfg.visible_above {
                let mut m = Array2::from_elem((h, w), false);
                let pos = swing(t as f64, period, spec.phase_offset_frames, cfg.visible_above);
                leaflet.rasterize(pos, &spec.window, &mut m);
                for ((r, c), on) in m.indexed_iter() {
                    if *on {
                        frame[[r, c]] += spec.intensity;
                    }
                }
            }
        }
    }

    if cfg.speckle_std > 0.0 {
        for v in video.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    video.mapv_inplace(|v| v.clamp(0.0, 1.0));

    let truth = PhantomTruth {
        valve_mask,
        valve_window: cfg.valve_window,
        distractor_window: cfg.distractor.as_ref().map(|d| d.window),
        background_rank: cfg.background_rank,
        valve_activity,
        distractor_activity,
    };
    Ok((Video::new(video, cfg.frame_rate_hz)?, truth))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_phantom_is_background_plus_blob() {
        let mut cfg = PhantomConfig::standard(3);
        cfg.speckle_std = 0.0;
        let (video, truth) = generate_phantom(&cfg).unwrap();
        let bg = phantom_background(&cfg).unwrap();
        for ((idx, v), b) in video.data().indexed_iter().zip(bg.iter()) {
            let blob = if truth.valve_mask[idx] { cfg.valve_intensity } else { 0.0 };
            assert_eq!(*v, b + blob);
        }
        assert!(truth.valve_mask.iter().any(|m| *m));
    }

    #[test]
    fn mask_stays_inside_valve_window() {
        let (_, truth) = generate_phantom(&PhantomConfig::two_blob(1)).unwrap();
        for ((_, r, c), on) in truth.valve_mask.indexed_iter() {
            if *on {
                assert!(truth.valve_window.contains(r, c));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom(&PhantomConfig::two_blob(9)).unwrap().0;
        let b = generate_phantom(&PhantomConfig::two_blob(9)).unwrap().0;
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_phantom(&PhantomConfig::two_blob(10)).unwrap().0;
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn half_period_offset_anticorrelates_activity() {
        let (_, truth) = generate_phantom(&PhantomConfig::two_blob(0)).unwrap();
        let r = pearson(&truth.valve_activity, truth.distractor_activity.as_ref().unwrap());
        assert!(r < 0.0, "correlation {r}");
    }

    #[test]
    fn overlapping_windows_rejected() {
        let mut cfg = PhantomConfig::two_blob(0);
        cfg.distractor.as_mut().unwrap().window = WindowRect::new(24, 40, 8, 8);
        assert!(matches!(generate_phantom(&cfg), Err(Error::Config(_))));
        let mut cfg = PhantomConfig::standard(0);
        cfg.valve_period_frames = 3;
        assert!(generate_phantom(&cfg).is_err());
    }
}
