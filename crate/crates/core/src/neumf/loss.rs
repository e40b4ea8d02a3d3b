//! Batch losses of the factorization model and their analytic gradients.
//!
//! All losses are batch means. The l2 penalty is the mean, over the batch
//! entries, of the squared norms of the four embedding vectors each entry
//! touches.

use super::mlp::{sigmoid, softplus};
use super::model::{EmbeddingGrad, NetworkGrad, NeuMFModel};
use crate::video::PixelMatrix;

/// One `(pixel, frame)` entry of the pixel matrix.
pub type Entry = (usize, usize);

pub fn loss_reconstruction(model: &NeuMFModel, x: &PixelMatrix, batch: &[Entry], beta: f64) -> f64 {
    let mut s = model.scratch();
    let mut fit = 0.0;
    let mut reg = 0.0;
    for &(n, t) in batch {
        let r = x.get(n, t) - model.forward_with(n, t, &mut s);
        fit += r * r;
        reg += model.touched_sq_norm(n, t);
    }
    let b = batch.len() as f64;
    fit / b + beta * reg / b
}

/// Gradient of the reconstruction loss with respect to the network weights.
pub fn reconstruction_network_grad(
    model: &NeuMFModel,
    x: &PixelMatrix,
    batch: &[Entry],
    beta: f64,
) -> (f64, NetworkGrad) {
    let mut s = model.scratch();
    let mut grad = model.network_grad_zeros();
    let scale = 1.0 / batch.len() as f64;
    let mut fit = 0.0;
    let mut reg = 0.0;
    for &(n, t) in batch {
        let y = model.forward_with(n, t, &mut s);
        let r = y - x.get(n, t);
        fit += r * r;
        reg += model.touched_sq_norm(n, t);
        model.backward_with(&mut s, 2.0 * r * scale, Some(&mut grad), None);
    }
    ((fit + beta * reg) * scale, grad)
}

/// Gradient of the reconstruction loss with respect to the embedding
/// pre-activations (dense, zero for untouched rows).
pub fn reconstruction_embedding_grad(
    model: &NeuMFModel,
    x: &PixelMatrix,
    batch: &[Entry],
    beta: f64,
) -> (f64, EmbeddingGrad) {
    let e = &model.embeddings;
    let mut s = model.scratch();
    let mut grad = EmbeddingGrad::zeros_like(e);
    let scale = 1.0 / batch.len() as f64;
    let mut fit = 0.0;
    let mut reg = 0.0;
    for &(n, t) in batch {
        let y = model.forward_with(n, t, &mut s);
        let r = y - x.get(n, t);
        fit += r * r;
        reg += model.touched_sq_norm(n, t);
        model.backward_with(&mut s, 2.0 * r * scale, None, Some(&mut grad));
        add_l2_grad(&e.u_gmf, &mut grad.u_gmf, n, e.k, beta * scale);
        add_l2_grad(&e.u_mlp, &mut grad.u_mlp, n, e.k_prime, beta * scale);
        add_l2_grad(&e.v_gmf, &mut grad.v_gmf, t, e.k, beta * scale);
        add_l2_grad(&e.v_mlp, &mut grad.v_mlp, t, e.k_prime, beta * scale);
    }
    ((fit + beta * reg) * scale, grad)
}

/// `d/dp c * softplus(p)^2 = 2 c softplus(p) sigmoid(p)` for one row.
fn add_l2_grad(params: &[f64], grad: &mut [f64], row: usize, channels: usize, c: f64) {
    for i in row * channels..(row + 1) * channels {
        let p = params[i];
        grad[i] += 2.0 * c * softplus(p) * sigmoid(p);
    }
}

/// `mean (X - X_hat - S_hat)^2 + lambda * mean |S_hat|` with `X_hat` given.
pub fn loss_sparse(model: &NeuMFModel, x: &PixelMatrix, x_hat: &[f64], batch: &[Entry], lambda: f64) -> f64 {
    let mut s = model.scratch();
    let mut total = 0.0;
    for (&(n, t), &y) in batch.iter().zip(x_hat) {
        let r = x.get(n, t) - y;
        let sparse = model.threshold_with(r, &mut s);
        total += (r - sparse).powi(2) + lambda * sparse.abs();
    }
    total / batch.len() as f64
}

/// Gradient of [`loss_sparse`] with respect to the threshold network only.
pub fn sparse_threshold_grad(
    model: &NeuMFModel,
    x: &PixelMatrix,
    x_hat: &[f64],
    batch: &[Entry],
    lambda: f64,
) -> (f64, Vec<f64>) {
    let mut s = model.scratch();
    let mut grad = vec![0.0; model.threshold.num_params()];
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (&(n, t), &y) in batch.iter().zip(x_hat) {
        let r = x.get(n, t) - y;
        let sparse = model.threshold_with(r, &mut s);
        total += (r - sparse).powi(2) + lambda * sparse;
        let d = (-2.0 * (r - sparse) + lambda) * scale;
        model.threshold_backward(&mut s, d, &mut grad);
    }
    (total * scale, grad)
}

/// `X_hat` for each batch entry.
pub fn reconstruct_batch(model: &NeuMFModel, batch: &[Entry]) -> Vec<f64> {
    let mut s = model.scratch();
    batch.iter().map(|&(n, t)| model.forward_with(n, t, &mut s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neumf::mlp::inverse_softplus;
    use crate::neumf::model::Table;
    use ndarray::Array2;

    /// Model whose forward output is exactly `target` everywhere: all head
    /// weights zero and the output bias at logit(target).
    fn constant_model(target: f64) -> NeuMFModel {
        let mut m = NeuMFModel::zeros(4, 3, 2, 1);
        let last = m.head.num_layers() - 1;
        let (_, b) = m.head.layer_mut(last);
        b[0] = (target / (1.0 - target)).ln();
        m
    }

    #[test]
    fn exact_fit_without_penalty_is_zero() {
        let m = constant_model(0.25);
        let x = PixelMatrix::new(Array2::from_elem((4, 3), 0.25), 2, 2).unwrap();
        let batch: Vec<Entry> = (0..4).flat_map(|n| (0..3).map(move |t| (n, t))).collect();
        assert!(loss_reconstruction(&m, &x, &batch, 0.0).abs() < 1e-15);
    }

    #[test]
    fn single_entry_arithmetic() {
        let mut m = constant_model(0.25);
        // effective embeddings with total squared norm 2 for entry (0, 0)
        let half = 0.5f64.sqrt();
        let set = |m: &mut NeuMFModel, t: Table, vals: &[f64]| {
            let tab = m.embeddings.table_mut(t);
            for (p, v) in tab.iter_mut().zip(vals) {
                *p = inverse_softplus(*v);
            }
        };
        set(&mut m, Table::PixelGmf, &[0.5, 0.5]);
        set(&mut m, Table::FrameGmf, &[0.5, 0.5]);
        set(&mut m, Table::PixelMlp, &[half]);
        set(&mut m, Table::FrameMlp, &[half]);
        let mut x = Array2::from_elem((4, 3), 0.25);
        x[[0, 0]] = 0.75;
        let x = PixelMatrix::new(x, 2, 2).unwrap();
        let loss = loss_reconstruction(&m, &x, &[(0, 0)], 0.1);
        assert!((loss - 0.45).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn saturated_threshold_leaves_mean_squared_residual() {
        let mut m = NeuMFModel::zeros(2, 2, 2, 1);
        let last = m.threshold.num_layers() - 1;
        m.threshold.layer_mut(last).1[0] = -800.0;
        let x = PixelMatrix::new(Array2::from_shape_vec((2, 2), vec![0.1, 0.9, 0.4, 0.0]).unwrap(), 1, 2).unwrap();
        let batch = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let x_hat = [0.3, 0.3, 0.3, 0.3];
        let expected = [0.2f64, 0.6, 0.1, 0.3].iter().map(|r| r * r).sum::<f64>() / 4.0;
        assert!((loss_sparse(&m, &x, &x_hat, &batch, 0.3) - expected).abs() < 1e-15);
    }
}
