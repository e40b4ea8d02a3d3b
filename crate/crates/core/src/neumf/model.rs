use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::mlp::{inverse_softplus, softplus, sigmoid, Activation, Mlp, Workspace};
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::rnmf::RnmfResult;

/// Hidden width of every fully connected layer.
pub const HIDDEN: usize = 10;

/// Floor applied to RNMF factors before inverting the softplus.
pub const MFI_EPSILON: f64 = 1e-4;

const EMBEDDING_MEAN: f64 = 0.5;
const EMBEDDING_STD: f64 = 0.01;

/// Pixel and frame embeddings, stored as softplus pre-activations in
/// row-major `(index, channel)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub pixels: usize,
    pub frames: usize,
    pub k: usize,
    pub k_prime: usize,
    pub u_gmf: Vec<f64>,
    pub v_gmf: Vec<f64>,
    pub u_mlp: Vec<f64>,
    pub v_mlp: Vec<f64>,
}

/// Which embedding family a table slice belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table {
    PixelGmf,
    FrameGmf,
    PixelMlp,
    FrameMlp,
}

impl Table {
    pub const ALL: [Table; 4] = [Table::PixelGmf, Table::FrameGmf, Table::PixelMlp, Table::FrameMlp];
}

impl EmbeddingTables {
    pub fn zeros(pixels: usize, frames: usize, k: usize, k_prime: usize) -> Self {
        Self {
            pixels,
            frames,
            k,
            k_prime,
            u_gmf: vec![0.0; pixels * k],
            v_gmf: vec![0.0; frames * k],
            u_mlp: vec![0.0; pixels * k_prime],
            v_mlp: vec![0.0; frames * k_prime],
        }
    }

    pub fn table(&self, which: Table) -> &[f64] {
        match which {
            Table::PixelGmf => &self.u_gmf,
            Table::FrameGmf => &self.v_gmf,
            Table::PixelMlp => &self.u_mlp,
            Table::FrameMlp => &self.v_mlp,
        }
    }

    pub fn table_mut(&mut self, which: Table) -> &mut [f64] {
        match which {
            Table::PixelGmf => &mut self.u_gmf,
            Table::FrameGmf => &mut self.v_gmf,
            Table::PixelMlp => &mut self.u_mlp,
            Table::FrameMlp => &mut self.v_mlp,
        }
    }

    /// Channels per row of a table.
    pub fn channels(&self, which: Table) -> usize {
        match which {
            Table::PixelGmf | Table::FrameGmf => self.k,
            Table::PixelMlp | Table::FrameMlp => self.k_prime,
        }
    }

    /// Effective (softplus) values of one table.
    pub fn effective(&self, which: Table) -> Vec<f64> {
        self.table(which).iter().map(|p| softplus(*p)).collect()
    }

    /// Temporal GMF embeddings as `T` rows of `K` effective values.
    pub fn frame_gmf_rows(&self) -> Vec<Vec<f64>> {
        self.effective(Table::FrameGmf)
            .chunks(self.k)
            .map(|c| c.to_vec())
            .collect()
    }
}

/// Output of one forward evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Scratch {
    branch: Workspace,
    head: Workspace,
    threshold: Workspace,
    u_gmf: Vec<f64>,
    v_gmf: Vec<f64>,
    branch_in: Vec<f64>,
    head_in: Vec<f64>,
    d_head_in: Vec<f64>,
    d_branch_in: Vec<f64>,
    n: usize,
    t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrad {
    pub mlp_branch: Vec<f64>,
    pub head: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrad {
    pub u_gmf: Vec<f64>,
    pub v_gmf: Vec<f64>,
    pub u_mlp: Vec<f64>,
    pub v_mlp: Vec<f64>,
}

impl EmbeddingGrad {
    pub fn zeros_like(e: &EmbeddingTables) -> Self {
        Self {
            u_gmf: vec![0.0; e.u_gmf.len()],
            v_gmf: vec![0.0; e.v_gmf.len()],
            u_mlp: vec![0.0; e.u_mlp.len()],
            v_mlp: vec![0.0; e.v_mlp.len()],
        }
    }

    pub fn table(&self, which: Table) -> &[f64] {
        match which {
            Table::PixelGmf => &self.u_gmf,
            Table::FrameGmf => &self.v_gmf,
            Table::PixelMlp => &self.u_mlp,
            Table::FrameMlp => &self.v_mlp,
        }
    }

    pub fn table_mut(&mut self, which: Table) -> &mut [f64] {
        match which {
            Table::PixelGmf => &mut self.u_gmf,
            Table::FrameGmf => &mut self.v_gmf,
            Table::PixelMlp => &mut self.u_mlp,
            Table::FrameMlp => &mut self.v_mlp,
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in Table::ALL {
            self.table_mut(t).iter_mut().for_each(|g| *g *= c);
        }
    }
}

/// Neural matrix factorization: embeddings, the low-dimensional network
/// (`mlp_branch` followed by `head`) and the scalar threshold network.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuMFModel {
    pub embeddings: EmbeddingTables,
    /// `u_mlp ++ v_mlp -> 10 -> 10 -> 10`, ReLU.
    pub mlp_branch: Mlp,
    /// `(u_gmf * v_gmf) ++ branch -> 10 -> 10 -> 10 -> 1`, ReLU then sigmoid.
    pub head: Mlp,
    /// `residual -> 10 -> 10 -> 10 -> 1`, ReLU then softplus.
    pub threshold: Mlp,
}

impl NeuMFModel {
    /// Architecture with all parameters zero.
    pub fn zeros(pixels: usize, frames: usize, k: usize, k_prime: usize) -> Self {
        use Activation::{Relu, Sigmoid, Softplus};
        Self {
            embeddings: EmbeddingTables::zeros(pixels, frames, k, k_prime),
            mlp_branch: Mlp::new(&[2 * k_prime, HIDDEN, HIDDEN, HIDDEN], &[Relu, Relu, Relu]),
            head: Mlp::new(
                &[k + HIDDEN, HIDDEN, HIDDEN, HIDDEN, 1],
                &[Relu, Relu, Relu, Sigmoid],
            ),
            threshold: Mlp::new(&[1, HIDDEN, HIDDEN, HIDDEN, 1], &[Relu, Relu, Relu, Softplus]),
        }
    }

    pub fn pixels(&self) -> usize {
        self.embeddings.pixels
    }

    pub fn frames(&self) -> usize {
        self.embeddings.frames
    }

    pub fn k(&self) -> usize {
        self.embeddings.k
    }

    pub fn k_prime(&self) -> usize {
        self.embeddings.k_prime
    }

    /// Number of network parameters (independent of `N` and `T`).
    pub fn network_params(&self) -> usize {
        self.mlp_branch.num_params() + self.head.num_params() + self.threshold.num_params()
    }

    /// Replaces the final sigmoid with the identity. Test harness only.
    #[doc(hidden)]
    pub fn set_linear_test_mode(&mut self, linear: bool) {
        self.head.set_output_activation(if linear {
            Activation::Identity
        } else {
            Activation::Sigmoid
        });
    }

    pub fn scratch(&self) -> Scratch {
        let k = self.k();
        Scratch {
            branch: self.mlp_branch.workspace(),
            head: self.head.workspace(),
            threshold: self.threshold.workspace(),
            u_gmf: vec![0.0; k],
            v_gmf: vec![0.0; k],
            branch_in: vec![0.0; 2 * self.k_prime()],
            head_in: vec![0.0; k + HIDDEN],
            d_head_in: vec![0.0; k + HIDDEN],
            d_branch_in: vec![0.0; 2 * self.k_prime()],
            n: 0,
            t: 0,
        }
    }

    pub fn forward(&self, n: usize, t: usize) -> Result<f64> {
        if n >= self.pixels() || t >= self.frames() {
            return Err(Error::Index(format!(
                "entry ({n}, {t}) outside {}x{}",
                self.pixels(),
                self.frames()
            )));
        }
        Ok(self.forward_with(n, t, &mut self.scratch()))
    }

    /// Reconstruction `X_hat[n, t]`; indices must be in range.
    pub fn forward_with(&self, n: usize, t: usize, s: &mut Scratch) -> f64 {
        let e = &self.embeddings;
        let (k, kp) = (e.k, e.k_prime);
        s.n = n;
        s.t = t;
        for c in 0..k {
            s.u_gmf[c] = softplus(e.u_gmf[n * k + c]);
            s.v_gmf[c] = softplus(e.v_gmf[t * k + c]);
            s.head_in[c] = s.u_gmf[c] * s.v_gmf[c];
        }
        for c in 0..kp {
            s.branch_in[c] = softplus(e.u_mlp[n * kp + c]);
            s.branch_in[kp + c] = softplus(e.v_mlp[t * kp + c]);
        }
        let branch_out = self.mlp_branch.forward(&s.branch_in, &mut s.branch);
        s.head_in[k..].copy_from_slice(branch_out);
        self.head.forward(&s.head_in, &mut s.head)[0]
    }

    /// Back-propagates `d_out = dL/dX_hat` from the last `forward_with`.
    pub fn backward_with(
        &self,
        s: &mut Scratch,
        d_out: f64,
        network: Option<&mut NetworkGrad>,
        embeddings: Option<&mut EmbeddingGrad>,
    ) {
        let (mut g_branch, mut g_head) = match network {
            Some(g) => (Some(&mut g.mlp_branch[..]), Some(&mut g.head[..])),
            None => (None, None),
        };
        let want_inputs = embeddings.is_some();
        s.d_head_in.iter_mut().for_each(|v| *v = 0.0);
        self.head.backward(
            &mut s.head,
            &[d_out],
            g_head.as_deref_mut(),
            Some(&mut s.d_head_in),
        );
        let k = self.k();
        let kp = self.k_prime();
        if want_inputs {
            s.d_branch_in.iter_mut().for_each(|v| *v = 0.0);
            self.mlp_branch.backward(
                &mut s.branch,
                &s.d_head_in[k..],
                g_branch.as_deref_mut(),
                Some(&mut s.d_branch_in),
            );
        } else {
            self.mlp_branch
                .backward(&mut s.branch, &s.d_head_in[k..], g_branch.as_deref_mut(), None);
        }
        if let Some(g) = embeddings {
            let e = &self.embeddings;
            let (n, t) = (s.n, s.t);
            for c in 0..k {
                let d = s.d_head_in[c];
                g.u_gmf[n * k + c] += d * s.v_gmf[c] * sigmoid(e.u_gmf[n * k + c]);
                g.v_gmf[t * k + c] += d * s.u_gmf[c] * sigmoid(e.v_gmf[t * k + c]);
            }
            for c in 0..kp {
                g.u_mlp[n * kp + c] += s.d_branch_in[c] * sigmoid(e.u_mlp[n * kp + c]);
                g.v_mlp[t * kp + c] += s.d_branch_in[kp + c] * sigmoid(e.v_mlp[t * kp + c]);
            }
        }
    }

    pub fn network_grad_zeros(&self) -> NetworkGrad {
        NetworkGrad {
            mlp_branch: vec![0.0; self.mlp_branch.num_params()],
            head: vec![0.0; self.head.num_params()],
        }
    }

    /// `f_T(residual)`, always `>= 0`.
    pub fn threshold_apply(&self, residual: f64) -> f64 {
        let mut ws = self.threshold.workspace();
        self.threshold.forward(&[residual], &mut ws)[0]
    }

    pub(crate) fn threshold_with(&self, residual: f64, s: &mut Scratch) -> f64 {
        self.threshold.forward(&[residual], &mut s.threshold)[0]
    }

    /// Adds `d_out * d f_T / d theta_T` for the last `threshold_with` call.
    pub(crate) fn threshold_backward(&self, s: &mut Scratch, d_out: f64, grad: &mut [f64]) {
        self.threshold.backward(&mut s.threshold, &[d_out], Some(grad), None);
    }

    /// Sum of squared effective embedding norms touched by entry `(n, t)`.
    pub(crate) fn touched_sq_norm(&self, n: usize, t: usize) -> f64 {
        let e = &self.embeddings;
        let sq = |table: &[f64], row: usize, ch: usize| -> f64 {
            table[row * ch..(row + 1) * ch]
                .iter()
                .map(|p| softplus(*p).powi(2))
                .sum()
        };
        sq(&e.u_gmf, n, e.k) + sq(&e.u_mlp, n, e.k_prime) + sq(&e.v_gmf, t, e.k) + sq(&e.v_mlp, t, e.k_prime)
    }
}

fn fill_embeddings(values: &mut [f64], rng: &mut ChaCha8Rng, normal: &Normal<f64>) {
    for p in values {
        let target = normal.sample(rng).max(MFI_EPSILON);
        *p = inverse_softplus(target);
    }
}

/// Random initialization: Xavier-uniform networks, zero biases, effective
/// embeddings drawn from `N(0.5, 0.01^2)`.
pub fn init_random(pixels: usize, frames: usize, cfg: &TrainConfig, seed: u64) -> NeuMFModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = NeuMFModel::zeros(pixels, frames, cfg.k, cfg.k_prime);
    let normal = Normal::new(EMBEDDING_MEAN, EMBEDDING_STD).expect("valid normal");
    for table in Table::ALL {
        fill_embeddings(model.embeddings.table_mut(table), &mut rng, &normal);
    }
    model.mlp_branch.xavier_init(&mut rng);
    model.head.xavier_init(&mut rng);
    model.threshold.xavier_init(&mut rng);
    model
}

/// Matrix-factorization initialization: GMF embeddings take the RNMF
/// factors, everything else as in [`init_random`].
pub fn init_mfi(rnmf: &RnmfResult, pixels: usize, frames: usize, cfg: &TrainConfig, seed: u64) -> Result<NeuMFModel> {
    if rnmf.rank() != cfg.k {
        return Err(Error::Config(format!(
            "RNMF rank {} does not match K = {}",
            rnmf.rank(),
            cfg.k
        )));
    }
    if rnmf.u.nrows() != pixels || rnmf.v.nrows() != frames {
        return Err(Error::Dimension(format!(
            "RNMF factors are {}x{} / {}x{}, expected N = {pixels}, T = {frames}",
            rnmf.u.nrows(),
            rnmf.u.ncols(),
            rnmf.v.nrows(),
            rnmf.v.ncols()
        )));
    }
    let mut model = init_random(pixels, frames, cfg, seed);
    let k = cfg.k;
    for ((n, c), u) in rnmf.u.indexed_iter() {
        model.embeddings.u_gmf[n * k + c] = inverse_softplus(u.max(MFI_EPSILON));
    }
    for ((t, c), v) in rnmf.v.indexed_iter() {
        model.embeddings.v_gmf[t * k + c] = inverse_softplus(v.max(MFI_EPSILON));
    }
    Ok(model)
}
