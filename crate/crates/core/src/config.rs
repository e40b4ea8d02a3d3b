//! Pipeline configuration and its flat `section.key = value` text form.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::geometry::WindowRect;
use crate::neumf::{Schedule, TrainConfig};
use crate::phantom::{DistractorSpec, PhantomConfig};
use crate::rnmf::RnmfConfig;
use crate::roi::SaliencyMode;
use crate::segment::{Connectivity, SegmentParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factorization {
    Rnmf,
    NeumfRi,
    NeumfMfi,
}

impl FromStr for Factorization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnmf" => Ok(Self::Rnmf),
            "neumf_ri" => Ok(Self::NeumfRi),
            "neumf_mfi" => Ok(Self::NeumfMfi),
            other => Err(Error::Config(format!(
                "unknown factorization `{other}` (expected rnmf|neumf_ri|neumf_mfi)"
            ))),
        }
    }
}

impl Display for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rnmf => "rnmf",
            Self::NeumfRi => "neumf_ri",
            Self::NeumfMfi => "neumf_mfi",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Raw video file; `None` generates the configured phantom.
    pub input: Option<PathBuf>,
    /// Ground-truth mask for file inputs, in raw-video coordinates.
    pub truth: Option<PathBuf>,
    pub phantom: PhantomConfig,
    /// Output side after padding and resampling; 0 pads to a square only.
    pub side: usize,
    pub factorization: Factorization,
    pub seed: u64,
    pub rnmf: RnmfConfig,
    pub train: TrainConfig,
    pub wd_mode: SaliencyMode,
    pub time_masking: bool,
    pub to_threshold: f64,
    /// ROI size; 0 derives it from the frame size.
    pub window_height: usize,
    pub window_width: usize,
    /// Scan stride; 0 derives it from the frame size.
    pub stride: usize,
    pub flow: FlowParams,
    pub segment: SegmentParams,
    /// Evaluate only this many frames spread over the cycle; 0 evaluates all.
    pub sample_frames: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: None,
            truth: None,
            phantom: PhantomConfig::standard(0),
            side: 0,
            factorization: Factorization::NeumfMfi,
            seed: 0,
            rnmf: RnmfConfig::default(),
            train: TrainConfig::default(),
            wd_mode: SaliencyMode::Of,
            time_masking: true,
            to_threshold: 0.1,
            window_height: 0,
            window_width: 0,
            stride: 0,
            flow: FlowParams::default(),
            segment: SegmentParams::default(),
            sample_frames: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_rect(key: &str, value: &str) -> Result<WindowRect> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| parse(key, p))
        .collect::<Result<_>>()?;
    match parts[..] {
        [top, left, height, width] => Ok(WindowRect::new(top, left, height, width)),
        _ => Err(Error::Config(format!("`{key}` expects top,left,height,width"))),
    }
}

fn fmt_rect(r: &WindowRect) -> String {
    format!("{},{},{},{}", r.top, r.left, r.height, r.width)
}

fn fmt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl PipelineConfig {
    /// Sets one `section.key` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let ph = &mut self.phantom;
        match key {
            "input.path" => self.input = (!v.is_empty()).then(|| PathBuf::from(v)),
            "input.truth" => self.truth = (!v.is_empty()).then(|| PathBuf::from(v)),
            "phantom.kind" => {
                let seed = ph.seed;
                *ph = match v {
                    "standard" => PhantomConfig::standard(seed),
                    "two_blob" => PhantomConfig::two_blob(seed),
                    other => return Err(Error::Config(format!("unknown phantom kind `{other}`"))),
                };
            }
            "phantom.seed" => ph.seed = parse(key, v)?,
            "phantom.height" => ph.height = parse(key, v)?,
            "phantom.width" => ph.width = parse(key, v)?,
            "phantom.frames" => ph.frames = parse(key, v)?,
            "phantom.background_rank" => ph.background_rank = parse(key, v)?,
            "phantom.valve_window" => ph.valve_window = parse_rect(key, v)?,
            "phantom.valve_period_frames" => ph.valve_period_frames = parse(key, v)?,
            "phantom.speckle_std" => ph.speckle_std = parse(key, v)?,
            "phantom.valve_intensity" => ph.valve_intensity = parse(key, v)?,
            "phantom.leaflet_length" => ph.leaflet_length = parse(key, v)?,
            "phantom.leaflet_thickness" => ph.leaflet_thickness = parse(key, v)?,
            "phantom.sweep_degrees" => ph.sweep_degrees = parse(key, v)?,
            "phantom.hinge_travel" => ph.hinge_travel = parse(key, v)?,
            "phantom.visible_above" => ph.visible_above = parse(key, v)?,
            "phantom.frame_rate_hz" => ph.frame_rate_hz = parse(key, v)?,
            "phantom.distractor_window" => {
                if v == "none" || v.is_empty() {
                    ph.distractor = None;
                } else {
                    let window = parse_rect(key, v)?;
                    let period = ph.valve_period_frames as f64;
                    let d = ph.distractor.get_or_insert(DistractorSpec {
                        window,
                        phase_offset_frames: period / 2.0,
                        scale: 1.0,
                        intensity: ph.valve_intensity,
                    });
                    d.window = window;
                }
            }
            "phantom.distractor_phase_frames" | "phantom.distractor_scale" | "phantom.distractor_intensity" => {
                let d = ph.distractor.as_mut().ok_or_else(|| {
                    Error::Config(format!("`{key}` needs phantom.distractor_window first"))
                })?;
                let x: f64 = parse(key, v)?;
                match key {
                    "phantom.distractor_phase_frames" => d.phase_offset_frames = x,
                    "phantom.distractor_scale" => d.scale = x,
                    _ => d.intensity = x,
                }
            }
            "preprocess.side" => self.side = parse(key, v)?,
            "factorization" => self.factorization = parse_enum(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "rnmf.rank" => self.rnmf.rank = parse(key, v)?,
            "rnmf.lambda" => self.rnmf.lambda = parse(key, v)?,
            "rnmf.max_iters" => self.rnmf.max_iters = parse(key, v)?,
            "rnmf.tol" => self.rnmf.tol = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.beta" => self.train.beta = parse(key, v)?,
            "train.lambda" => self.train.lambda = parse(key, v)?,
            "train.k" => self.train.k = parse(key, v)?,
            "train.k_prime" => self.train.k_prime = parse(key, v)?,
            "train.gs_weight" => self.train.gs_weight = parse(key, v)?,
            "train.adam_beta1" => self.train.adam_beta1 = parse(key, v)?,
            "train.adam_beta2" => self.train.adam_beta2 = parse(key, v)?,
            "train.adam_epsilon" => self.train.adam_epsilon = parse(key, v)?,
            "train.threshold_restarts" => self.train.threshold_restarts = parse(key, v)?,
            "train.threshold_refit_epochs" => self.train.threshold_refit_epochs = parse(key, v)?,
            "train.schedule" => {
                self.train.schedule = match v {
                    "per_batch" => Schedule::PerBatch,
                    "per_epoch" => Schedule::PerEpoch,
                    other => return Err(Error::Config(format!("unknown schedule `{other}`"))),
                }
            }
            "wd.mode" => self.wd_mode = v.parse()?,
            "wd.time_masking" => self.time_masking = parse_bool(key, v)?,
            "wd.to_threshold" => self.to_threshold = parse(key, v)?,
            "wd.window_height" => self.window_height = parse(key, v)?,
            "wd.window_width" => self.window_width = parse(key, v)?,
            "wd.stride" => self.stride = parse(key, v)?,
            "flow.sigma_t" => self.flow.sigma_t = parse(key, v)?,
            "flow.pyramid_levels" => self.flow.pyramid_levels = parse(key, v)?,
            "flow.poly_size" => self.flow.poly_size = parse(key, v)?,
            "flow.poly_sigma" => self.flow.poly_sigma = parse(key, v)?,
            "flow.window" => self.flow.window = parse(key, v)?,
            "flow.iterations" => self.flow.iterations = parse(key, v)?,
            "segment.tau_s" => self.segment.tau_s = parse(key, v)?,
            "segment.postprocess" => self.segment.postprocess = parse_bool(key, v)?,
            "segment.open_radius" => self.segment.open_radius = parse(key, v)?,
            "segment.diffusion_iterations" => self.segment.diffusion.iterations = parse(key, v)?,
            "segment.diffusion_kappa" => self.segment.diffusion.kappa = parse(key, v)?,
            "segment.diffusion_step" => self.segment.diffusion.step = parse(key, v)?,
            "segment.min_voxel_fraction" => self.segment.min_voxel_fraction = parse(key, v)?,
            "segment.connectivity" => self.segment.connectivity = v.parse::<Connectivity>()?,
            "diffusion.iterations" => self.segment.diffusion.iterations = parse(key, v)?,
            "diffusion.kappa" => self.segment.diffusion.kappa = parse(key, v)?,
            "diffusion.step" => self.segment.diffusion.step = parse(key, v)?,
            "eval.sample_frames" => self.sample_frames = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let ph = &self.phantom;
        let mut e: Vec<(&'static str, String)> = vec![
            ("input.path", fmt_path(&self.input)),
            ("input.truth", fmt_path(&self.truth)),
            ("phantom.seed", ph.seed.to_string()),
            ("phantom.height", ph.height.to_string()),
            ("phantom.width", ph.width.to_string()),
            ("phantom.frames", ph.frames.to_string()),
            ("phantom.background_rank", ph.background_rank.to_string()),
            ("phantom.valve_window", fmt_rect(&ph.valve_window)),
            ("phantom.valve_period_frames", ph.valve_period_frames.to_string()),
            ("phantom.speckle_std", ph.speckle_std.to_string()),
            ("phantom.valve_intensity", ph.valve_intensity.to_string()),
            ("phantom.leaflet_length", ph.leaflet_length.to_string()),
            ("phantom.leaflet_thickness", ph.leaflet_thickness.to_string()),
            ("phantom.sweep_degrees", ph.sweep_degrees.to_string()),
            ("phantom.hinge_travel", ph.hinge_travel.to_string()),
            ("phantom.visible_above", ph.visible_above.to_string()),
            ("phantom.frame_rate_hz", ph.frame_rate_hz.to_string()),
        ];
        match &ph.distractor {
            None => e.push(("phantom.distractor_window", "none".into())),
            Some(d) => {
                e.push(("phantom.distractor_window", fmt_rect(&d.window)));
                e.push(("phantom.distractor_phase_frames", d.phase_offset_frames.to_string()));
                e.push(("phantom.distractor_scale", d.scale.to_string()));
                e.push(("phantom.distractor_intensity", d.intensity.to_string()));
            }
        }
        let t = &self.train;
        let f = &self.flow;
        let s = &self.segment;
        e.extend([
            ("preprocess.side", self.side.to_string()),
            ("factorization", self.factorization.to_string()),
            ("seed", self.seed.to_string()),
            ("rnmf.rank", self.rnmf.rank.to_string()),
            ("rnmf.lambda", self.rnmf.lambda.to_string()),
            ("rnmf.max_iters", self.rnmf.max_iters.to_string()),
            ("rnmf.tol", self.rnmf.tol.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.beta", t.beta.to_string()),
            ("train.lambda", t.lambda.to_string()),
            ("train.k", t.k.to_string()),
            ("train.k_prime", t.k_prime.to_string()),
            ("train.gs_weight", t.gs_weight.to_string()),
            ("train.adam_beta1", t.adam_beta1.to_string()),
            ("train.adam_beta2", t.adam_beta2.to_string()),
            ("train.adam_epsilon", t.adam_epsilon.to_string()),
            ("train.threshold_restarts", t.threshold_restarts.to_string()),
            ("train.threshold_refit_epochs", t.threshold_refit_epochs.to_string()),
            (
                "train.schedule",
                match t.schedule {
                    Schedule::PerBatch => "per_batch",
                    Schedule::PerEpoch => "per_epoch",
                }
                .into(),
            ),
            ("wd.mode", self.wd_mode.to_string()),
            ("wd.time_masking", self.time_masking.to_string()),
            ("wd.to_threshold", self.to_threshold.to_string()),
            ("wd.window_height", self.window_height.to_string()),
            ("wd.window_width", self.window_width.to_string()),
            ("wd.stride", self.stride.to_string()),
            ("flow.sigma_t", f.sigma_t.to_string()),
            ("flow.pyramid_levels", f.pyramid_levels.to_string()),
            ("flow.poly_size", f.poly_size.to_string()),
            ("flow.poly_sigma", f.poly_sigma.to_string()),
            ("flow.window", f.window.to_string()),
            ("flow.iterations", f.iterations.to_string()),
            ("segment.tau_s", s.tau_s.to_string()),
            ("segment.postprocess", s.postprocess.to_string()),
            ("segment.open_radius", s.open_radius.to_string()),
            ("segment.diffusion_iterations", s.diffusion.iterations.to_string()),
            ("segment.diffusion_kappa", s.diffusion.kappa.to_string()),
            ("segment.diffusion_step", s.diffusion.step.to_string()),
            ("segment.min_voxel_fraction", s.min_voxel_fraction.to_string()),
            (
                "segment.connectivity",
                match s.connectivity {
                    Connectivity::Six => "6",
                    Connectivity::TwentySix => "26",
                }
                .into(),
            ),
            ("diffusion.iterations", s.diffusion.iterations.to_string()),
            ("diffusion.kappa", s.diffusion.kappa.to_string()),
            ("diffusion.step", s.diffusion.step.to_string()),
            ("eval.sample_frames", self.sample_frames.to_string()),
        ]);
        e
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Parses config text on top of the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Seeds the decomposition and training from the master seed.
    pub fn seeded(&self) -> (RnmfConfig, TrainConfig) {
        let rnmf = RnmfConfig { seed: self.seed, ..self.rnmf };
        let mut train = self.train;
        train.seed = self.seed;
        (rnmf, train)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_none() {
            self.phantom.validate()?;
        }
        self.train.validate()?;
        self.flow.validate()?;
        self.segment.diffusion.validate()?;
        if self.factorization == Factorization::NeumfMfi && self.rnmf.rank != self.train.k {
            return Err(Error::Config(format!(
                "MFI needs rnmf.rank ({}) == train.k ({})",
                self.rnmf.rank, self.train.k
            )));
        }
        if !(self.to_threshold >= 0.0) || !(self.segment.tau_s >= 0.0) {
            return Err(Error::Config("thresholds must be >= 0".into()));
        }
        Ok(())
    }
}

fn parse_enum<T: FromStr<Err = Error>>(_key: &str, v: &str) -> Result<T> {
    v.parse()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.phantom = PhantomConfig::two_blob(7);
        cfg.wd_mode = SaliencyMode::To;
        cfg.train.epochs = 3;
        cfg.segment.connectivity = Connectivity::TwentySix;
        cfg.input = Some(PathBuf::from("videos/a.lrse"));
        let back = PipelineConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn comments_presets_and_errors() {
        let cfg = PipelineConfig::from_text("# run\nphantom.kind = two_blob\nseed = 4\n\nwd.mode=to\n").unwrap();
        assert!(cfg.phantom.distractor.is_some());
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.wd_mode, SaliencyMode::To);
        assert!(PipelineConfig::from_text("bogus.key = 1").is_err());
        assert!(PipelineConfig::from_text("train.epochs = many").is_err());
        assert!(PipelineConfig::from_text("no equals sign").is_err());
    }

    #[test]
    fn mfi_rank_must_match() {
        let mut cfg = PipelineConfig::default();
        cfg.rnmf.rank = 3;
        assert!(cfg.validate().is_err());
    }
}
