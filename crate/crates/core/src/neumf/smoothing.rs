//! Gaussian smoothing penalty on the embedding fields: each pixel table is
//! viewed as an `h x w x channels` image and each frame table as a
//! `T x channels` signal; the loss is the squared distance between a field
//! and its Gaussian-blurred copy.

use super::mlp::sigmoid;
use super::model::{EmbeddingGrad, EmbeddingTables, Table};
use crate::error::{Error, Result};

pub const KERNEL_SIZE: usize = 15;
pub const KERNEL_VARIANCE: f64 = 1.0;

/// Normalized 1D Gaussian taps for an axis of length `len`; the kernel is
/// shrunk to at most `len` taps when the axis is shorter than the kernel.
pub fn gaussian_kernel(len: usize) -> Vec<f64> {
    let max_radius = (KERNEL_SIZE - 1) / 2;
    let radius = max_radius.min(len.saturating_sub(1) / 2);
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * KERNEL_VARIANCE)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / total).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= len {
        i = 2 * len - i - 1;
    }
    i.clamp(0, len - 1) as usize
}

/// Correlates `data` along one axis of a dense row-major array with
/// reflective borders. `adjoint` applies the transpose of that operator.
fn convolve_axis(data: &[f64], dims: &[usize], axis: usize, kernel: &[f64], adjoint: bool) -> Vec<f64> {
    let len = dims[axis];
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let radius = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * len * stride + inner;
            for i in 0..len {
                for (j, w) in kernel.iter().enumerate() {
                    let src = reflect(i as isize + j as isize - radius, len);
                    if adjoint {
                        out[base + src * stride] += w * data[base + i * stride];
                    } else {
                        out[base + i * stride] += w * data[base + src * stride];
                    }
                }
            }
        }
    }
    out
}

/// Loss and gradient of `||E - Ker * E||_F^2` for a field with the given
/// spatial dims (channels last).
pub fn field_smoothing(field: &[f64], spatial: &[usize], channels: usize) -> (f64, Vec<f64>) {
    let mut dims: Vec<usize> = spatial.to_vec();
    dims.push(channels);
    let kernels: Vec<Vec<f64>> = spatial.iter().map(|&l| gaussian_kernel(l)).collect();

    let mut blurred = field.to_vec();
    for (axis, k) in kernels.iter().enumerate() {
        blurred = convolve_axis(&blurred, &dims, axis, k, false);
    }
    let diff: Vec<f64> = field.iter().zip(&blurred).map(|(a, b)| a - b).collect();
    let loss = diff.iter().map(|d| d * d).sum();

    let mut back = diff.clone();
    for (axis, k) in kernels.iter().enumerate().rev() {
        back = convolve_axis(&back, &dims, axis, k, true);
    }
    let grad = diff.iter().zip(&back).map(|(d, b)| 2.0 * (d - b)).collect();
    (loss, grad)
}

fn check_grid(e: &EmbeddingTables, height: usize, width: usize) -> Result<()> {
    if height * width != e.pixels {
        return Err(Error::Dimension(format!(
            "embedding table has {} pixels, grid is {height}x{width}",
            e.pixels
        )));
    }
    Ok(())
}

pub fn loss_gaussian_smoothing(e: &EmbeddingTables, height: usize, width: usize) -> Result<f64> {
    Ok(gaussian_smoothing_grad(e, height, width)?.0)
}

/// Loss and gradient with respect to the embedding pre-activations.
pub fn gaussian_smoothing_grad(e: &EmbeddingTables, height: usize, width: usize) -> Result<(f64, EmbeddingGrad)> {
    check_grid(e, height, width)?;
    let mut grad = EmbeddingGrad::zeros_like(e);
    let mut total = 0.0;
    for table in Table::ALL {
        let spatial: Vec<usize> = match table {
            Table::PixelGmf | Table::PixelMlp => vec![height, width],
            Table::FrameGmf | Table::FrameMlp => vec![e.frames],
        };
        let effective = e.effective(table);
        let (loss, g_eff) = field_smoothing(&effective, &spatial, e.channels(table));
        total += loss;
        for ((g, p), ge) in grad.table_mut(table).iter_mut().zip(e.table(table)).zip(g_eff) {
            *g = ge * sigmoid(*p);
        }
    }
    Ok((total, grad))
}
