use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lrseg::config::PipelineConfig;
use lrseg::pipeline::{
    artifacts, decompose, detect, evaluate, prepare_run_dir, run_ablation_grid, run_pipeline,
    temporal_weights, write_phantom, Detection, GridSpec, GroundTruth,
};
use lrseg::phantom::{PhantomConfig, TruthMeta};
use lrseg::segment::{segment, MaskVolume};
use lrseg::video::{load_mask, load_video, preprocess, save_mask, save_video};
use lrseg::{Error, Result};

#[derive(Parser)]
#[command(name = "lrseg", version, about = "Low-rank plus sparse video decomposition and fast-motion segmentation")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write a complete run directory.
    Run(RunArgs),
    /// Generate a phantom video with its ground truth.
    Phantom(PhantomArgs),
    /// Preprocess and factorize a video; writes the checkpoint, loss trace and sparse signal.
    Decompose(DecomposeArgs),
    /// Detect the ROI in a sparse signal.
    Detect(DetectArgs),
    /// Segment the sparse signal inside an ROI.
    Segment(SegmentArgs),
    /// Score a mask against a reference mask.
    Evaluate(EvaluateArgs),
    /// Run an ablation grid over phantom seeds.
    Grid(GridArgs),
}

/// Options shared by every stage; later options override earlier ones.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file with `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.beta=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// rnmf | neumf_ri | neumf_mfi
    #[arg(long)]
    factorization: Option<String>,
    /// Saliency for window detection: to | of
    #[arg(long)]
    wd_mode: Option<String>,
    /// Use temporal embedding components as window-detection weights.
    #[arg(long, value_name = "BOOL")]
    time_masking: Option<bool>,
    /// Apply opening and 3D component filtering to the mask.
    #[arg(long, value_name = "BOOL")]
    postprocess: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    gs_weight: Option<f64>,
    /// Preprocessed frame side; 0 pads to a square only.
    #[arg(long)]
    side: Option<usize>,
    /// Phantom preset used when no input file is given: standard | two_blob
    #[arg(long)]
    phantom: Option<String>,
    #[arg(long)]
    phantom_seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            cfg.apply_text(&text)?;
        }
        let mut pairs: Vec<(&str, String)> = Vec::new();
        if let Some(v) = &self.phantom {
            pairs.push(("phantom.kind", v.clone()));
        }
        let opts: [(&str, Option<String>); 9] = [
            ("factorization", self.factorization.clone()),
            ("wd.mode", self.wd_mode.clone()),
            ("wd.time_masking", self.time_masking.map(|v| v.to_string())),
            ("segment.postprocess", self.postprocess.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("train.epochs", self.epochs.map(|v| v.to_string())),
            ("train.gs_weight", self.gs_weight.map(|v| v.to_string())),
            ("preprocess.side", self.side.map(|v| v.to_string())),
            ("phantom.seed", self.phantom_seed.map(|v| v.to_string())),
        ];
        pairs.extend(opts.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        for (k, v) in pairs {
            cfg.set(k, &v)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Raw video; omit to generate the configured phantom.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Reference mask for `--in`, in raw-video coordinates.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PhantomArgs {
    /// Config file holding `phantom.*` keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// standard | two_blob (applied before the spec file)
    #[arg(long, default_value = "standard")]
    kind: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Sparse signal written by `decompose`.
    #[arg(long)]
    sparse: PathBuf,
    /// Checkpoint written by `decompose`; needed for time masking.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Directory receiving roi.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    sparse: PathBuf,
    #[arg(long)]
    roi: PathBuf,
    /// Directory receiving mask.lrse.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// roi.json of the run; defaults to the mask's bounding box.
    #[arg(long)]
    roi: Option<PathBuf>,
    /// truth.json carrying the gold-standard window.
    #[arg(long)]
    truth_meta: Option<PathBuf>,
    /// Evaluate this many frames instead of all.
    #[arg(long, default_value_t = 0)]
    sample_frames: usize,
    /// Directory receiving report.csv and report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Axes as `key=v1,v2;key2=v3,v4`.
    #[arg(long, default_value = "")]
    axes: String,
    /// Comma-separated phantom seeds, or a range `a..b`.
    #[arg(long)]
    seeds: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let parse = |v: &str| v.trim().parse::<u64>().map_err(|_| Error::Config(format!("bad seed range `{s}`")));
        return Ok((parse(a)?..parse(b)?).collect());
    }
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad seed `{p}`"))))
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = a.config.build()?;
    if let Some(p) = a.input {
        cfg.input = Some(p);
    }
    if let Some(p) = a.truth {
        cfg.truth = Some(p);
    }
    let result = run_pipeline(&cfg, &a.out, a.force)?;
    let roi = result.detection.roi;
    println!("roi top={} left={} height={} width={}", roi.top, roi.left, roi.height, roi.width);
    if let Some(r) = &result.report {
        println!("I={:.4} IoU={:.4} DC={:.4}", r.mean_i, r.mean_iou, r.mean_dc);
    }
    Ok(())
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.set("phantom.kind", &a.kind)?;
    if let Some(spec) = &a.spec {
        cfg.apply_text(&read_text(spec)?)?;
    }
    if let Some(seed) = a.seed {
        cfg.phantom.seed = seed;
    }
    let phantom: PhantomConfig = cfg.phantom;
    write_phantom(&phantom, &a.out)?;
    println!("wrote phantom to {}", a.out.display());
    Ok(())
}

fn cmd_decompose(a: DecomposeArgs) -> Result<()> {
    let mut cfg = a.config.build()?;
    cfg.input = Some(a.input.clone());
    cfg.validate()?;
    let raw = load_video(&a.input)?;
    let side = if cfg.side == 0 { raw.height().max(raw.width()) } else { cfg.side };
    let video = preprocess(&raw, side)?;
    prepare_run_dir(&a.out, a.force)?;
    write(&a.out.join(artifacts::CONFIG), cfg.to_text())?;
    let d = decompose(&cfg, &video)?;
    write(&a.out.join(artifacts::MODEL), &d.checkpoint)?;
    write(&a.out.join(artifacts::LOSS_TRACE), d.trace.to_csv())?;
    save_video(&d.sparse, a.out.join(artifacts::SPARSE))?;
    if let Some(last) = d.trace.last() {
        println!("l2x={:.5} l1={:.5} l2xs={:.5}", last.l2x, last.l1, last.l2xs);
    }
    Ok(())
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let cfg = a.config.build()?;
    let sparse = load_video(&a.sparse)?;
    let temporal = match &a.model {
        Some(p) => temporal_weights(&std::fs::read(p).map_err(|e| io_err(p, e))?)?,
        None if cfg.time_masking => {
            return Err(Error::Config("time masking needs --model".into()));
        }
        None => Vec::new(),
    };
    let det = detect(&cfg, &sparse, &temporal)?;
    ensure_dir(&a.out)?;
    write(&a.out.join(artifacts::ROI), det.to_json())?;
    println!("roi top={} left={} height={} width={}", det.roi.top, det.roi.left, det.roi.height, det.roi.width);
    Ok(())
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let cfg = a.config.build()?;
    let sparse = load_video(&a.sparse)?;
    let det = Detection::from_json(&read_text(&a.roi)?)?;
    let mask = segment(&sparse, det.roi, &cfg.segment)?;
    ensure_dir(&a.out)?;
    save_mask(&mask.data, sparse.frame_rate_hz(), a.out.join(artifacts::MASK))?;
    println!("mask voxels={}", mask.count());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let data = load_mask(&a.mask)?;
    let truth = load_mask(&a.truth)?;
    if data.dim() != truth.dim() {
        return Err(Error::Dimension(format!(
            "mask {} has shape {:?} (t, h, w) but truth {} has shape {:?}",
            a.mask.display(),
            data.dim(),
            a.truth.display(),
            truth.dim()
        )));
    }
    let window = match &a.truth_meta {
        Some(p) => {
            let meta: TruthMeta = serde_json::from_str(&read_text(p)?)
                .map_err(|e| Error::Config(format!("bad truth metadata: {e}")))?;
            Some(meta.valve_window)
        }
        None => None,
    };
    let roi = match &a.roi {
        Some(p) => Detection::from_json(&read_text(p)?)?.roi,
        None => pipeline_bbox(&data)?,
    };
    let gt = GroundTruth {
        mask: truth,
        window,
        phantom: None,
    };
    let report = evaluate(&MaskVolume { data, roi }, &gt, a.sample_frames)?;
    ensure_dir(&a.out)?;
    write(&a.out.join(artifacts::REPORT_CSV), report.to_csv())?;
    write(&a.out.join(artifacts::REPORT_JSON), report.to_json())?;
    println!("I={:.4} IoU={:.4} DC={:.4}", report.mean_i, report.mean_iou, report.mean_dc);
    Ok(())
}

fn pipeline_bbox(mask: &ndarray::Array3<bool>) -> Result<lrseg::geometry::WindowRect> {
    let (_, h, w) = mask.dim();
    let mut lo = (h, w);
    let mut hi = (0, 0);
    for ((_, r, c), on) in mask.indexed_iter() {
        if *on {
            lo = (lo.0.min(r), lo.1.min(c));
            hi = (hi.0.max(r), hi.1.max(c));
        }
    }
    if lo.0 > hi.0 {
        return Err(Error::Metric("mask is empty and no --roi was given".into()));
    }
    Ok(lrseg::geometry::WindowRect::new(lo.0, lo.1, hi.0 - lo.0 + 1, hi.1 - lo.1 + 1))
}

fn cmd_grid(a: GridArgs) -> Result<()> {
    let cfg = a.config.build()?;
    let spec = GridSpec::parse(&a.axes, &parse_seeds(&a.seeds)?)?;
    let result = run_ablation_grid(&cfg, &spec)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write(&a.out, result.to_csv())?;
    print!("{}", result.to_csv());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Grid(a) => cmd_grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
