//! Alternating training schedule, sparse-signal extraction and the
//! partial-training deployment mode.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::loss::{
    reconstruct_batch, reconstruction_embedding_grad, reconstruction_network_grad,
    sparse_threshold_grad, Entry,
};
use super::mlp::Mlp;
use super::model::{EmbeddingGrad, NeuMFModel, Table};
use super::smoothing::gaussian_smoothing_grad;
use crate::error::{Error, Result};
use crate::video::{unflatten, PixelMatrix, SparseSignal};

/// Granularity of the three-step alternation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Network step, embedding step and threshold step on every batch.
    PerBatch,
    /// One full pass per step within every epoch.
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta: f64,
    pub lambda: f64,
    pub k: usize,
    pub k_prime: usize,
    /// Weight of the Gaussian smoothing penalty; 0 disables it.
    pub gs_weight: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Fresh threshold networks fitted on the final residual after training.
    pub threshold_restarts: usize,
    /// Epochs per restart.
    pub threshold_refit_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            batch_size: 10_000,
            epochs: 15,
            beta: 0.1,
            lambda: 0.3,
            k: 2,
            k_prime: 1,
            gs_weight: 0.0,
            seed: 0,
            schedule: Schedule::PerBatch,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            threshold_restarts: 4,
            threshold_refit_epochs: 15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("lambda", self.lambda),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta >= 0.0 && self.gs_weight >= 0.0) {
            return Err(Error::Config("beta and gs_weight must be >= 0".into()));
        }
        if self.batch_size == 0 || self.k == 0 || self.k_prime == 0 {
            return Err(Error::Config("batch_size, k and k_prime must be >= 1".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// Whole-matrix training diagnostics, normalized by the entry count:
/// `l2x` and `l2xs` are root-mean-square residuals, `l1` the mean of `S_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub l2x: f64,
    pub l1: f64,
    pub l2xs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    /// State before the first epoch; `None` when no epoch ran.
    pub initial: Option<LossRow>,
    pub epochs: Vec<LossRow>,
}

impl LossTrace {
    pub fn is_empty(&self) -> bool {
        self.initial.is_none() && self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&LossRow> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l2x,l1,l2xs\n");
        for row in self.initial.iter().chain(&self.epochs) {
            out.push_str(&format!("{},{},{},{}\n", row.epoch, row.l2x, row.l1, row.l2xs));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut trace = LossTrace::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("loss trace line {}: bad number `{s}`", i + 1)))
            };
            if f.len() != 4 {
                return Err(Error::Config(format!("loss trace line {}: expected 4 fields", i + 1)));
            }
            let row = LossRow {
                epoch: parse(f[0])? as usize,
                l2x: parse(f[1])?,
                l1: parse(f[2])?,
                l2xs: parse(f[3])?,
            };
            if row.epoch == 0 && trace.initial.is_none() && trace.epochs.is_empty() {
                trace.initial = Some(row);
            } else {
                trace.epochs.push(row);
            }
        }
        Ok(trace)
    }
}

/// Mean diagnostics over a set of entries.
pub fn evaluate_losses(model: &NeuMFModel, x: &PixelMatrix, entries: impl Iterator<Item = Entry>, epoch: usize) -> LossRow {
    let mut s = model.scratch();
    let (mut sq, mut l1, mut sqs, mut count) = (0.0, 0.0, 0.0, 0usize);
    for (n, t) in entries {
        let y = model.forward_with(n, t, &mut s);
        let r = x.get(n, t) - y;
        let sparse = model.threshold_with(r, &mut s);
        sq += r * r;
        l1 += sparse.abs();
        sqs += (r - sparse).powi(2);
        count += 1;
    }
    let c = count.max(1) as f64;
    LossRow {
        epoch,
        l2x: (sq / c).sqrt(),
        l1: l1 / c,
        l2xs: (sqs / c).sqrt(),
    }
}

fn all_entries(pixels: usize, frames: usize) -> impl Iterator<Item = Entry> {
    (0..pixels).flat_map(move |n| (0..frames).map(move |t| (n, t)))
}

struct Optimizers {
    branch: Adam,
    head: Adam,
    tables: [Adam; 4],
    threshold: Adam,
}

impl Optimizers {
    fn new(model: &NeuMFModel, cfg: &TrainConfig) -> Self {
        let a = cfg.adam();
        let e = &model.embeddings;
        Self {
            branch: Adam::new(model.mlp_branch.num_params(), a),
            head: Adam::new(model.head.num_params(), a),
            tables: Table::ALL.map(|t| Adam::new(e.table(t).len(), a)),
            threshold: Adam::new(model.threshold.num_params(), a),
        }
    }
}

/// Which parameter groups a training loop may update.
#[derive(Debug, Clone)]
struct Freeze {
    networks: bool,
    pixel_tables: bool,
    /// Trainable flag per frame for the temporal tables.
    frames: Vec<bool>,
}

fn check_finite(loss: f64, epoch: usize, batch: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{what} loss is {loss} at epoch {epoch}, batch {batch}"
        )))
    }
}

fn network_step(model: &mut NeuMFModel, opt: &mut Optimizers, x: &PixelMatrix, batch: &[Entry], cfg: &TrainConfig) -> f64 {
    let (loss, g) = reconstruction_network_grad(model, x, batch, cfg.beta);
    opt.branch.step(&mut model.mlp_branch.params, &g.mlp_branch);
    opt.head.step(&mut model.head.params, &g.head);
    loss
}

fn embedding_step(
    model: &mut NeuMFModel,
    opt: &mut Optimizers,
    x: &PixelMatrix,
    batch: &[Entry],
    cfg: &TrainConfig,
    grid: (usize, usize),
    freeze: &Freeze,
) -> Result<f64> {
    let (mut loss, mut g) = reconstruction_embedding_grad(model, x, batch, cfg.beta);
    if cfg.gs_weight > 0.0 {
        let (gs, g_gs) = gaussian_smoothing_grad(&model.embeddings, grid.0, grid.1)?;
        loss += cfg.gs_weight * gs;
        add_scaled(&mut g, &g_gs, cfg.gs_weight);
    }
    let e = &mut model.embeddings;
    let (k, kp) = (e.k, e.k_prime);
    for (i, table) in Table::ALL.into_iter().enumerate() {
        let channels = if matches!(table, Table::PixelGmf | Table::FrameGmf) { k } else { kp };
        let grads = g.table(table);
        let params = e.table_mut(table);
        match table {
            Table::PixelGmf | Table::PixelMlp => {
                if freeze.pixel_tables {
                    opt.tables[i].step(params, grads);
                }
            }
            Table::FrameGmf | Table::FrameMlp => {
                let frames = &freeze.frames;
                opt.tables[i].step_masked(params, grads, |j| frames[j / channels]);
            }
        }
    }
    Ok(loss)
}

fn add_scaled(dst: &mut EmbeddingGrad, src: &EmbeddingGrad, c: f64) {
    for t in Table::ALL {
        for (a, b) in dst.table_mut(t).iter_mut().zip(src.table(t)) {
            *a += c * b;
        }
    }
}

fn threshold_step(model: &mut NeuMFModel, opt: &mut Optimizers, x: &PixelMatrix, batch: &[Entry], cfg: &TrainConfig) -> f64 {
    let x_hat = reconstruct_batch(model, batch);
    let (loss, g) = sparse_threshold_grad(model, x, &x_hat, batch, cfg.lambda);
    opt.threshold.step(&mut model.threshold.params, &g);
    loss
}

/// Mean `L_s` of `net` over precomputed residuals.
fn threshold_loss(net: &Mlp, residuals: &[f64], lambda: f64) -> f64 {
    let mut ws = net.workspace();
    let total: f64 = residuals
        .iter()
        .map(|&r| {
            let s = net.forward(&[r], &mut ws)[0];
            (r - s).powi(2) + lambda * s
        })
        .sum();
    total / residuals.len() as f64
}

/// Refits `f_T` from fresh Xavier draws on the frozen final residual and
/// keeps whichever network, including the trained one, has the lowest `L_s`.
/// The residual is dominated by near-zero entries, so a single run can settle
/// on the flat all-suppressing solution; independent restarts rarely all do.
fn refit_threshold(model: &mut NeuMFModel, x: &PixelMatrix, entries: &[Entry], cfg: &TrainConfig) {
    let x_hat = reconstruct_batch(model, entries);
    let residuals: Vec<f64> = entries.iter().zip(&x_hat).map(|(&(n, t), y)| x.get(n, t) - y).collect();
    let mut best_loss = threshold_loss(&model.threshold, &residuals, cfg.lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7468_7265_7368);
    let mut order: Vec<usize> = (0..residuals.len()).collect();
    for restart in 0..cfg.threshold_restarts {
        let mut net = model.threshold.clone();
        net.xavier_init(&mut rng);
        let mut adam = Adam::new(net.num_params(), cfg.adam());
        let mut ws = net.workspace();
        for _ in 0..cfg.threshold_refit_epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let mut grad = vec![0.0; net.num_params()];
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let r = residuals[i];
                    let s = net.forward(&[r], &mut ws)[0];
                    let d = (-2.0 * (r - s) + cfg.lambda) * scale;
                    net.backward(&mut ws, &[d], Some(&mut grad), None);
                }
                adam.step(&mut net.params, &grad);
            }
        }
        let loss = threshold_loss(&net, &residuals, cfg.lambda);
        log::debug!("threshold restart {restart}: L_s={loss:.6} (best {best_loss:.6})");
        if loss < best_loss {
            best_loss = loss;
            model.threshold = net;
        }
    }
}

fn run_training(
    mut model: NeuMFModel,
    x: &PixelMatrix,
    cfg: &TrainConfig,
    entries: &[Entry],
    freeze: &Freeze,
) -> Result<(NeuMFModel, LossTrace)> {
    cfg.validate()?;
    check_shapes(&model, x)?;
    if !x.is_normalized() {
        return Err(Error::Config("pixel matrix must be normalized to [0, 1]".into()));
    }
    let mut trace = LossTrace::default();
    if cfg.epochs == 0 {
        return Ok((model, trace));
    }
    let grid = (x.height(), x.width());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizers::new(&model, cfg);
    let mut order = entries.to_vec();
    trace.initial = Some(evaluate_losses(&model, x, entries.iter().copied(), 0));

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let batches: Vec<&[Entry]> = order.chunks(cfg.batch_size).collect();
        match cfg.schedule {
            Schedule::PerBatch => {
                for (b, batch) in batches.iter().enumerate() {
                    if freeze.networks {
                        check_finite(network_step(&mut model, &mut opt, x, batch, cfg), epoch, b, "reconstruction")?;
                    }
                    check_finite(embedding_step(&mut model, &mut opt, x, batch, cfg, grid, freeze)?, epoch, b, "embedding")?;
                    if freeze.networks {
                        check_finite(threshold_step(&mut model, &mut opt, x, batch, cfg), epoch, b, "sparse")?;
                    }
                }
            }
            Schedule::PerEpoch => {
                if freeze.networks {
                    for (b, batch) in batches.iter().enumerate() {
                        check_finite(network_step(&mut model, &mut opt, x, batch, cfg), epoch, b, "reconstruction")?;
                    }
                }
                for (b, batch) in batches.iter().enumerate() {
                    check_finite(embedding_step(&mut model, &mut opt, x, batch, cfg, grid, freeze)?, epoch, b, "embedding")?;
                }
                if freeze.networks {
                    for (b, batch) in batches.iter().enumerate() {
                        check_finite(threshold_step(&mut model, &mut opt, x, batch, cfg), epoch, b, "sparse")?;
                    }
                }
            }
        }
        let row = evaluate_losses(&model, x, entries.iter().copied(), epoch);
        if !(row.l2x.is_finite() && row.l1.is_finite() && row.l2xs.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss trace at epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: l2x={:.5} l1={:.5} l2xs={:.5}", row.l2x, row.l1, row.l2xs);
        trace.epochs.push(row);
    }
    if freeze.networks && cfg.epochs > 0 && cfg.threshold_restarts > 0 {
        refit_threshold(&mut model, x, entries, cfg);
        if let Some(last) = trace.epochs.last_mut() {
            *last = evaluate_losses(&model, x, entries.iter().copied(), last.epoch);
        }
    }
    Ok((model, trace))
}

fn check_shapes(model: &NeuMFModel, x: &PixelMatrix) -> Result<()> {
    if model.pixels() != x.pixels() || model.frames() != x.frames() {
        return Err(Error::Dimension(format!(
            "model is {}x{}, matrix is {}x{}",
            model.pixels(),
            model.frames(),
            x.pixels(),
            x.frames()
        )));
    }
    Ok(())
}

/// Trains every parameter group on all entries of `x`.
pub fn train(model: NeuMFModel, x: &PixelMatrix, cfg: &TrainConfig) -> Result<(NeuMFModel, LossTrace)> {
    let entries: Vec<Entry> = all_entries(x.pixels(), x.frames()).collect();
    let freeze = Freeze {
        networks: true,
        pixel_tables: true,
        frames: vec![true; x.frames()],
    };
    run_training(model, x, cfg, &entries, &freeze)
}

/// `X_hat` over the whole matrix.
pub fn reconstruct(model: &NeuMFModel) -> Array2<f64> {
    let mut s = model.scratch();
    Array2::from_shape_fn((model.pixels(), model.frames()), |(n, t)| model.forward_with(n, t, &mut s))
}

/// `S_hat = f_T(X - X_hat)` reshaped to the video grid.
pub fn extract_sparse_signal(model: &NeuMFModel, x: &PixelMatrix, frame_rate_hz: f64) -> Result<SparseSignal> {
    check_shapes(model, x)?;
    let mut s = model.scratch();
    let data = Array2::from_shape_fn((x.pixels(), x.frames()), |(n, t)| {
        let r = x.get(n, t) - model.forward_with(n, t, &mut s);
        model.threshold_with(r, &mut s)
    });
    unflatten(&PixelMatrix::new(data, x.height(), x.width())?, frame_rate_hz)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeployMode {
    /// Held-out temporal embeddings stay at their initialization.
    Frozen,
    /// Held-out temporal embeddings are fitted with everything else frozen.
    Fit,
}

#[derive(Debug, Clone)]
pub struct PartialDiagnostics {
    pub split_t: usize,
    pub trace: LossTrace,
    /// Diagnostics over `t < split_t`.
    pub trained: LossRow,
    /// Diagnostics over `t >= split_t`.
    pub held_out: LossRow,
}

/// Trains on frames `t < split_t` only, then extracts the sparse signal
/// over every frame.
pub fn deploy_partial(
    model: NeuMFModel,
    x: &PixelMatrix,
    split_t: usize,
    cfg: &TrainConfig,
    mode: DeployMode,
    frame_rate_hz: f64,
) -> Result<(NeuMFModel, SparseSignal, PartialDiagnostics)> {
    let frames = x.frames();
    if split_t == 0 || split_t >= frames {
        return Err(Error::Index(format!("split_t {split_t} must be in 1..{frames}")));
    }
    let pixels = x.pixels();
    let trained_entries: Vec<Entry> = all_entries(pixels, frames).filter(|e| e.1 < split_t).collect();
    let freeze = Freeze {
        networks: true,
        pixel_tables: true,
        frames: (0..frames).map(|t| t < split_t).collect(),
    };
    let (mut model, trace) = run_training(model, x, cfg, &trained_entries, &freeze)?;

    let held_entries: Vec<Entry> = all_entries(pixels, frames).filter(|e| e.1 >= split_t).collect();
    if mode == DeployMode::Fit {
        let fit_freeze = Freeze {
            networks: false,
            pixel_tables: false,
            frames: (0..frames).map(|t| t >= split_t).collect(),
        };
        let mut best = evaluate_losses(&model, x, held_entries.iter().copied(), 0).l2x;
        let mut best_model = model.clone();
        let mut fit_cfg = *cfg;
        fit_cfg.gs_weight = 0.0;
        fit_cfg.epochs = 1;
        let mut current = model.clone();
        for epoch in 0..cfg.epochs {
            fit_cfg.seed = cfg.seed.wrapping_add(1 + epoch as u64);
            current = run_training(current, x, &fit_cfg, &held_entries, &fit_freeze)?.0;
            let l2x = evaluate_losses(&current, x, held_entries.iter().copied(), 0).l2x;
            if l2x < best {
                best = l2x;
                best_model = current.clone();
            }
        }
        model = best_model;
    }

    let sparse = extract_sparse_signal(&model, x, frame_rate_hz)?;
    let diag = PartialDiagnostics {
        split_t,
        trace,
        trained: evaluate_losses(&model, x, trained_entries.iter().copied(), 0),
        held_out: evaluate_losses(&model, x, held_entries.iter().copied(), 0),
    };
    Ok((model, sparse, diag))
}
