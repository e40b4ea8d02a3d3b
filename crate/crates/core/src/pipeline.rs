//! End-to-end orchestration: input, decomposition, window detection,
//! segmentation, evaluation, and the ablation grid.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{Factorization, PipelineConfig};
use crate::error::{Error, Result, StageContext};
use crate::geometry::WindowRect;
use crate::metrics::{aggregate, dice, iou, paired_ttest_onesided, window_accuracy, EvalItem, EvalReport};
use crate::neumf::checkpoint::{factors_from_bytes, factors_to_bytes, is_factor_checkpoint, model_from_bytes, model_to_bytes};
use crate::neumf::{extract_sparse_signal, init_mfi, init_random, reconstruct, train, LossRow, LossTrace, NeuMFModel};
use crate::phantom::{generate_phantom, PhantomTruth};
use crate::rnmf::{rnmf_decompose, RnmfResult};
use crate::roi::{default_stride, default_window_size, detect_window, saliency_volume, time_masked_detect, TimeWeights};
use crate::segment::{segment, MaskVolume};
use crate::video::{flatten, load_mask, load_video, preprocess, save_mask, save_video, unflatten, PixelMatrix, SparseSignal, Video};

/// Reference segmentation in preprocessed coordinates.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub mask: Array3<bool>,
    /// Gold-standard ROI; derived from the mask's bounding box when absent.
    pub window: Option<WindowRect>,
    pub phantom: Option<PhantomTruth>,
}

/// Symmetric-pad-and-resample geometry of [`preprocess`].
#[derive(Debug, Clone, Copy)]
struct Geometry {
    pad_top: usize,
    pad_left: usize,
    square: usize,
    side: usize,
}

impl Geometry {
    fn new(h: usize, w: usize, side: usize) -> Self {
        let square = h.max(w);
        Self {
            pad_top: (square - h) / 2,
            pad_left: (square - w) / 2,
            square,
            side: if side == 0 { square } else { side },
        }
    }

    fn map_rect(&self, r: &WindowRect) -> WindowRect {
        let s = self.side as f64 / self.square as f64;
        let lo = |v: usize, pad: usize| ((v + pad) as f64 * s).floor() as usize;
        let hi = |v: usize, pad: usize| (((v + pad) as f64 * s).ceil() as usize).min(self.side);
        let (top, left) = (lo(r.top, self.pad_top), lo(r.left, self.pad_left));
        WindowRect::new(
            top,
            left,
            hi(r.bottom(), self.pad_top) - top,
            hi(r.right(), self.pad_left) - left,
        )
    }

    fn map_mask(&self, mask: &Array3<bool>, fps: f64) -> Result<Array3<bool>> {
        let (_, h, w) = mask.dim();
        if self.square == h && self.square == w && self.side == self.square {
            return Ok(mask.clone());
        }
        let float = Video::new(mask.mapv(|v| v as u8 as f64), fps)?;
        Ok(preprocess(&float, self.side)?.data().mapv(|v| v >= 0.5))
    }
}

/// Loads or generates the input video, preprocessed, with its ground truth.
pub fn prepare_input(cfg: &PipelineConfig) -> Result<(Video, Option<GroundTruth>)> {
    let (raw, truth) = match &cfg.input {
        None => {
            let (video, truth) = generate_phantom(&cfg.phantom)?;
            let gt = GroundTruth {
                mask: truth.valve_mask.clone(),
                window: Some(truth.valve_window),
                phantom: Some(truth),
            };
            (video, Some(gt))
        }
        Some(path) => {
            let video = load_video(path)?;
            let truth = match &cfg.truth {
                Some(p) => Some(GroundTruth {
                    mask: load_mask(p)?,
                    window: None,
                    phantom: None,
                }),
                None => None,
            };
            (video, truth)
        }
    };
    let (h, w, _) = raw.shape();
    let geo = Geometry::new(h, w, cfg.side);
    let video = preprocess(&raw, geo.side)?;
    let truth = match truth {
        Some(gt) => {
            if gt.mask.dim() != (raw.frames(), h, w) {
                return Err(Error::Dimension(format!(
                    "truth mask is {:?}, video is {:?}",
                    gt.mask.dim(),
                    (raw.frames(), h, w)
                )));
            }
            Some(GroundTruth {
                mask: geo.map_mask(&gt.mask, raw.frame_rate_hz())?,
                window: gt.window.map(|r| geo.map_rect(&r)),
                phantom: gt.phantom,
            })
        }
        None => None,
    };
    Ok((video, truth))
}

/// Output of the factorization stage, at the precision it is persisted with.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub sparse: SparseSignal,
    /// `T` rows of `K` temporal weights used for time masking.
    pub temporal: Vec<Vec<f64>>,
    pub trace: LossTrace,
    /// Checkpoint bytes (`NMF1` for NeuMF, `RNF1` for RNMF factors).
    pub checkpoint: Vec<u8>,
    pub model: Option<NeuMFModel>,
}

fn quantize(v: &Video) -> Result<Video> {
    Video::new(v.data().mapv(|x| x as f32 as f64), v.frame_rate_hz())
}

fn rnmf_trace(x: &PixelMatrix, res: &RnmfResult) -> LossTrace {
    let lr = res.low_rank();
    let count = (x.pixels() * x.frames()) as f64;
    let mut sq = 0.0;
    let mut sqs = 0.0;
    for ((xv, l), s) in x.data().iter().zip(lr.iter()).zip(res.s.iter()) {
        sq += (xv - l).powi(2);
        sqs += (xv - l - s).powi(2);
    }
    LossTrace {
        initial: None,
        epochs: vec![LossRow {
            epoch: res.objective_trace.len(),
            l2x: (sq / count).sqrt(),
            l1: res.s.sum() / count,
            l2xs: (sqs / count).sqrt(),
        }],
    }
}

/// Temporal weights and sparse signal read back from a checkpoint.
pub fn temporal_weights(checkpoint: &[u8]) -> Result<Vec<Vec<f64>>> {
    if is_factor_checkpoint(checkpoint) {
        let (_, v) = factors_from_bytes(checkpoint)?;
        Ok(v.outer_iter().map(|r| r.to_vec()).collect())
    } else {
        Ok(model_from_bytes(checkpoint)?.embeddings.frame_gmf_rows())
    }
}

/// Factorizes the preprocessed video into reconstruction and sparse signal.
pub fn decompose(cfg: &PipelineConfig, video: &Video) -> Result<Decomposition> {
    let x = flatten(video);
    let fps = video.frame_rate_hz();
    let (rnmf_cfg, train_cfg) = cfg.seeded();
    match cfg.factorization {
        Factorization::Rnmf => {
            let res = rnmf_decompose(&x, &rnmf_cfg)?;
            let checkpoint = factors_to_bytes(&res.u, &res.v);
            let sparse = unflatten(&PixelMatrix::new(res.s.clone(), x.height(), x.width())?, fps)?;
            Ok(Decomposition {
                sparse: quantize(&sparse)?,
                temporal: temporal_weights(&checkpoint)?,
                trace: rnmf_trace(&x, &res),
                checkpoint,
                model: None,
            })
        }
        Factorization::NeumfRi | Factorization::NeumfMfi => {
            let (n, t) = (x.pixels(), x.frames());
            let model = if cfg.factorization == Factorization::NeumfMfi {
                let res = rnmf_decompose(&x, &rnmf_cfg).stage("rnmf")?;
                init_mfi(&res, n, t, &train_cfg, cfg.seed)?
            } else {
                init_random(n, t, &train_cfg, cfg.seed)
            };
            let (model, trace) = train(model, &x, &train_cfg)?;
            // The persisted checkpoint is the model every later stage sees.
            let checkpoint = model_to_bytes(&model);
            let model = model_from_bytes(&checkpoint)?;
            let sparse = quantize(&extract_sparse_signal(&model, &x, fps)?)?;
            Ok(Decomposition {
                sparse,
                temporal: model.embeddings.frame_gmf_rows(),
                trace,
                checkpoint,
                model: Some(model),
            })
        }
    }
}

/// Mean-squared reconstruction residual of a trained model; used by tests.
pub fn reconstruction_rms(model: &NeuMFModel, x: &PixelMatrix) -> f64 {
    let xh = reconstruct(model);
    ((x.data() - &xh).mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub roi: WindowRect,
    /// One window per temporal component under time masking, else just the ROI.
    pub candidates: Vec<WindowRect>,
    pub wd_mode: crate::roi::SaliencyMode,
    pub time_masking: bool,
}

impl Detection {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("detection serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad ROI json: {e}")))
    }
}

pub fn window_geometry(cfg: &PipelineConfig, h: usize, w: usize) -> (usize, usize, usize) {
    let (dh, dw) = default_window_size(h, w);
    let win_h = if cfg.window_height == 0 { dh } else { cfg.window_height };
    let win_w = if cfg.window_width == 0 { dw } else { cfg.window_width };
    let stride = if cfg.stride == 0 { default_stride(h.max(w)) } else { cfg.stride };
    (win_h, win_w, stride)
}

pub fn detect(cfg: &PipelineConfig, sparse: &SparseSignal, temporal: &[Vec<f64>]) -> Result<Detection> {
    let sal = saliency_volume(sparse, cfg.wd_mode, cfg.to_threshold, &cfg.flow)?;
    let (h, w, frames) = sparse.shape();
    let (win_h, win_w, stride) = window_geometry(cfg, h, w);
    let (roi, candidates) = if cfg.time_masking {
        if temporal.len() != frames {
            return Err(Error::Dimension(format!(
                "{} temporal weight rows for {frames} frames",
                temporal.len()
            )));
        }
        time_masked_detect(&sal, temporal, win_h, win_w, stride)?
    } else {
        let roi = detect_window(&sal, &TimeWeights::uniform(frames), win_h, win_w, stride)?;
        (roi, vec![roi])
    };
    Ok(Detection {
        roi,
        candidates,
        wd_mode: cfg.wd_mode,
        time_masking: cfg.time_masking,
    })
}

fn rect_mask(r: &WindowRect, h: usize, w: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| r.contains(y, x))
}

fn bounding_box(mask: &Array3<bool>) -> Option<WindowRect> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for ((_, r, c), on) in mask.indexed_iter() {
        if *on {
            let b = bb.get_or_insert((r, c, r, c));
            *b = (b.0.min(r), b.1.min(c), b.2.max(r), b.3.max(c));
        }
    }
    bb.map(|(t, l, b, r)| WindowRect::new(t, l, b - t + 1, r - l + 1))
}

/// Frames used for evaluation: all, or `count` frames spread evenly over
/// those where the reference is non-empty.
pub fn evaluation_frames(truth: &Array3<bool>, count: usize) -> Vec<usize> {
    let frames = truth.dim().0;
    if count == 0 {
        return (0..frames).collect();
    }
    let visible: Vec<usize> = (0..frames)
        .filter(|&t| truth.index_axis(Axis(0), t).iter().any(|v| *v))
        .collect();
    if visible.len() <= count {
        return visible;
    }
    (0..count)
        .map(|i| visible[(i * visible.len() + visible.len() / 2) / count])
        .collect()
}

/// Per-frame items: the ROI accuracy against the gold-standard window and
/// the mask overlap with the reference.
pub fn evaluate(mask: &MaskVolume, truth: &GroundTruth, sample_frames: usize) -> Result<EvalReport> {
    if mask.data.dim() != truth.mask.dim() {
        return Err(Error::Dimension(format!(
            "mask shape {:?} does not match truth shape {:?}",
            mask.data.dim(),
            truth.mask.dim()
        )));
    }
    let (_, h, w) = mask.data.dim();
    let gs_window = truth
        .window
        .or_else(|| bounding_box(&truth.mask))
        .ok_or_else(|| Error::Metric("reference mask is empty".into()))?;
    let i = window_accuracy(&rect_mask(&mask.roi, h, w), &rect_mask(&gs_window, h, w))?;
    let items = evaluation_frames(&truth.mask, sample_frames)
        .into_iter()
        .map(|t| {
            let m = mask.data.index_axis(Axis(0), t);
            let g = truth.mask.index_axis(Axis(0), t);
            Ok(EvalItem {
                i,
                iou: iou(&m, &g)?,
                dc: dice(&m, &g)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&items)
}

/// Everything a run produces, kept in memory.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub video: Video,
    pub truth: Option<GroundTruth>,
    pub decomposition: Decomposition,
    pub detection: Detection,
    pub mask: MaskVolume,
    pub report: Option<EvalReport>,
}

impl RunResult {
    /// Whole-run summary item: ROI accuracy and frame-averaged overlaps.
    pub fn summary(&self) -> Option<EvalItem> {
        self.report.as_ref().map(|r| EvalItem {
            i: r.mean_i,
            iou: r.mean_iou,
            dc: r.mean_dc,
        })
    }
}

pub mod artifacts {
    pub const CONFIG: &str = "config.cfg";
    pub const MODEL: &str = "model.nmf";
    pub const LOSS_TRACE: &str = "loss_trace.csv";
    pub const ROI: &str = "roi.json";
    pub const MASK: &str = "mask.lrse";
    pub const REPORT_CSV: &str = "report.csv";
    pub const REPORT_JSON: &str = "report.json";
    pub const SPARSE: &str = "sparse.lrse";
    pub const VIDEO: &str = "video.lrse";
    pub const TRUTH_MASK: &str = "truth_mask.lrse";
    pub const TRUTH_META: &str = "truth.json";
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Creates `dir`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "run directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn execute(cfg: &PipelineConfig, out: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    let put = |name: &str, bytes: &[u8]| -> Result<()> {
        match out {
            Some(dir) => write_file(&dir.join(name), bytes),
            None => Ok(()),
        }
    };
    put(artifacts::CONFIG, cfg.to_text().as_bytes())?;
    let (video, truth) = prepare_input(cfg).stage("load")?;
    let decomposition = decompose(cfg, &video).stage("decompose")?;
    put(artifacts::MODEL, &decomposition.checkpoint)?;
    put(artifacts::LOSS_TRACE, decomposition.trace.to_csv().as_bytes())?;
    let detection = detect(cfg, &decomposition.sparse, &decomposition.temporal).stage("detect")?;
    put(artifacts::ROI, detection.to_json().as_bytes())?;
    let mask = segment(&decomposition.sparse, detection.roi, &cfg.segment).stage("segment")?;
    if let Some(dir) = out {
        save_mask(&mask.data, video.frame_rate_hz(), dir.join(artifacts::MASK))?;
    }
    let report = match &truth {
        Some(gt) => {
            let r = evaluate(&mask, gt, cfg.sample_frames).stage("evaluate")?;
            put(artifacts::REPORT_CSV, r.to_csv().as_bytes())?;
            put(artifacts::REPORT_JSON, r.to_json().as_bytes())?;
            Some(r)
        }
        None => None,
    };
    Ok(RunResult {
        video,
        truth,
        decomposition,
        detection,
        mask,
        report,
    })
}

/// Runs every stage without touching the filesystem (beyond reading input).
pub fn run_in_memory(cfg: &PipelineConfig) -> Result<RunResult> {
    execute(cfg, None)
}

/// Runs every stage and writes the artifacts into `dir`.
pub fn run_pipeline(cfg: &PipelineConfig, dir: &Path, force: bool) -> Result<RunResult> {
    prepare_run_dir(dir, force)?;
    execute(cfg, Some(dir))
}

/// Writes a phantom video, its truth mask, and truth metadata into `dir`.
pub fn write_phantom(cfg: &crate::phantom::PhantomConfig, dir: &Path) -> Result<PathBuf> {
    let (video, truth) = generate_phantom(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_video(&video, dir.join(artifacts::VIDEO))?;
    save_mask(&truth.valve_mask, video.frame_rate_hz(), dir.join(artifacts::TRUTH_MASK))?;
    let meta = serde_json::to_string_pretty(&truth.meta()).expect("truth serializes");
    write_file(&dir.join(artifacts::TRUTH_META), meta)?;
    Ok(dir.to_path_buf())
}

/// Axes of an ablation grid: each key takes every listed value.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub axes: Vec<(String, Vec<String>)>,
    pub seeds: Vec<u64>,
}

impl GridSpec {
    /// Parses `key=v1,v2;key2=v3,v4`.
    pub fn parse(axes: &str, seeds: &[u64]) -> Result<Self> {
        let mut out = Vec::new();
        for part in axes.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, vs) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid axis `{part}` must be key=v1,v2")))?;
            let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).collect();
            if values.iter().any(|v| v.is_empty()) {
                return Err(Error::Config(format!("grid axis `{k}` has an empty value")));
            }
            out.push((k.trim().to_string(), values));
        }
        Ok(Self {
            axes: out,
            seeds: seeds.to_vec(),
        })
    }

    fn configurations(&self, base: &PipelineConfig) -> Result<Vec<(String, PipelineConfig)>> {
        let mut cells = vec![(String::new(), base.clone())];
        for (key, values) in &self.axes {
            let mut next = Vec::new();
            for (label, cfg) in &cells {
                for v in values {
                    let mut c = cfg.clone();
                    c.set(key, v)?;
                    let l = if label.is_empty() {
                        format!("{key}={v}")
                    } else {
                        format!("{label} {key}={v}")
                    };
                    next.push((l, c));
                }
            }
            cells = next;
        }
        if cells.len() == 1 && cells[0].0.is_empty() {
            cells[0].0 = "base".into();
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub label: String,
    /// Per-seed summary, `None` where the run failed.
    pub items: Vec<Option<EvalItem>>,
    pub errors: Vec<String>,
}

impl GridCell {
    fn succeeded(&self) -> Vec<EvalItem> {
        self.items.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct PairwiseTest {
    pub a: usize,
    pub b: usize,
    pub metric: &'static str,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub seeds: Vec<u64>,
    pub cells: Vec<GridCell>,
    pub tests: Vec<PairwiseTest>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,runs,failures,i65,i85,mean_i,mean_iou,mean_dc\n");
        for c in &self.cells {
            let ok = c.succeeded();
            let (i65, i85, mi, miou, mdc) = match aggregate(&ok) {
                Ok(r) => (r.i65.to_string(), r.i85.to_string(), r.mean_i, r.mean_iou, r.mean_dc),
                Err(_) => ("0".into(), "0".into(), f64::NAN, f64::NAN, f64::NAN),
            };
            out.push_str(&format!(
                "\"{}\",{},{},{i65},{i85},{mi},{miou},{mdc}\n",
                c.label,
                ok.len(),
                c.errors.len()
            ));
        }
        if !self.tests.is_empty() {
            out.push_str("\nconfig_a,config_b,metric,p_value\n");
            for t in &self.tests {
                out.push_str(&format!(
                    "\"{}\",\"{}\",{},{}\n",
                    self.cells[t.a].label, self.cells[t.b].label, t.metric, t.p_value
                ));
            }
        }
        out
    }
}

/// Runs each grid configuration on phantoms seeded by every grid seed, then
/// compares configurations pairwise with the paired one-sided t-test.
pub fn run_ablation_grid(base: &PipelineConfig, spec: &GridSpec) -> Result<GridResult> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("grid needs at least one seed".into()));
    }
    let configs = spec.configurations(base)?;
    let mut cells = Vec::with_capacity(configs.len());
    for (label, cfg) in configs {
        let mut items = Vec::new();
        let mut errors = Vec::new();
        for &seed in &spec.seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            c.phantom.seed = seed;
            match run_in_memory(&c).and_then(|r| {
                r.summary()
                    .ok_or_else(|| Error::Metric("grid runs need ground truth".into()))
            }) {
                Ok(item) => items.push(Some(item)),
                Err(e) => {
                    log::warn!("grid cell `{label}` seed {seed} failed: {e}");
                    errors.push(format!("seed {seed}: {e}"));
                    items.push(None);
                }
            }
        }
        cells.push(GridCell { label, items, errors });
    }
    let mut tests = Vec::new();
    for a in 0..cells.len() {
        for b in 0..cells.len() {
            if a == b {
                continue;
            }
            let pairs: Vec<(EvalItem, EvalItem)> = cells[a]
                .items
                .iter()
                .zip(&cells[b].items)
                .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
                .collect();
            for (metric, f) in [("i", (|e: &EvalItem| e.i) as fn(&EvalItem) -> f64), ("dc", |e: &EvalItem| e.dc)] {
                let xa: Vec<f64> = pairs.iter().map(|p| f(&p.0)).collect();
                let xb: Vec<f64> = pairs.iter().map(|p| f(&p.1)).collect();
                if let Ok(p_value) = paired_ttest_onesided(&xa, &xb) {
                    tests.push(PairwiseTest { a, b, metric, p_value });
                }
            }
        }
    }
    Ok(GridResult {
        seeds: spec.seeds.clone(),
        cells,
        tests,
    })
}
