//! Dense optical-flow magnitude by polynomial expansion (Farnebäck).
//!
//! Each frame is locally approximated by a quadratic `x^T A x + b^T x + c`
//! fitted with Gaussian applicability weights. Displacements follow from
//! how `b` changes between consecutive frames, solved in a Gaussian
//! neighborhood on a two-level pyramid.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::SparseSignal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Temporal Gaussian std applied before differencing; 0 disables it.
    pub sigma_t: f64,
    pub pyramid_levels: usize,
    /// Side of the polynomial-expansion neighborhood (odd).
    pub poly_size: usize,
    pub poly_sigma: f64,
    /// Side of the Gaussian averaging window for the displacement solve (odd).
    pub window: usize,
    pub iterations: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            sigma_t: 3.5,
            pyramid_levels: 2,
            poly_size: 5,
            poly_sigma: 1.1,
            window: 9,
            iterations: 3,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.poly_size % 2 == 0 || self.window % 2 == 0 {
            return Err(Error::Config("flow poly_size and window must be odd".into()));
        }
        if self.pyramid_levels == 0 || !(self.poly_sigma > 0.0) || !(self.sigma_t >= 0.0) {
            return Err(Error::Config("flow needs >= 1 pyramid level, poly_sigma > 0, sigma_t >= 0".into()));
        }
        Ok(())
    }
}

/// Per-pixel flow norm in pixels per frame, `(t, row, col)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMagnitudeVolume {
    pub data: Array3<f64>,
}

#[derive(Clone)]
struct Image {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Image {
    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.px[y * self.w + x]
    }
}

/// Quadratic coefficients per pixel: `A = [[axx, axy], [axy, ayy]]`, `b = (bx, by)`.
struct Expansion {
    h: usize,
    w: usize,
    coef: Vec<[f64; 5]>,
}

impl Expansion {
    fn bilinear(&self, y: f64, x: f64) -> [f64; 5] {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.h - 1), (x0 + 1).min(self.w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let mut out = [0.0; 5];
        let corners = [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x1, (1.0 - fy) * fx),
            (y1, x0, fy * (1.0 - fx)),
            (y1, x1, fy * fx),
        ];
        for (yy, xx, wgt) in corners {
            let c = &self.coef[yy * self.w + xx];
            for i in 0..5 {
                out[i] += wgt * c[i];
            }
        }
        out
    }
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Linear filters mapping a neighborhood to the six weighted least-squares
/// coefficients of `1, x, y, x^2, y^2, xy`.
fn poly_filters(size: usize, sigma: f64) -> Vec<(isize, isize, [f64; 6])> {
    let r = (size / 2) as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (dx as f64, dy as f64);
            let g = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            offsets.push((dy, dx, g, [1.0, x, y, x * x, y * y, x * y]));
        }
    }
    let mut gram = vec![vec![0.0; 6]; 6];
    for (_, _, g, b) in &offsets {
        for i in 0..6 {
            for j in 0..6 {
                gram[i][j] += g * b[i] * b[j];
            }
        }
    }
    let inv: Vec<Vec<f64>> = (0..6)
        .map(|i| {
            let mut e = vec![0.0; 6];
            e[i] = 1.0;
            solve_dense(gram.clone(), e)
        })
        .collect();
    offsets
        .into_iter()
        .map(|(dy, dx, g, b)| {
            let mut f = [0.0; 6];
            for (i, fi) in f.iter_mut().enumerate() {
                *fi = g * (0..6).map(|j| inv[j][i] * b[j]).sum::<f64>();
            }
            (dy, dx, f)
        })
        .collect()
}

fn expand(img: &Image, filters: &[(isize, isize, [f64; 6])]) -> Expansion {
    let mut coef = Vec::with_capacity(img.h * img.w);
    for y in 0..img.h as isize {
        for x in 0..img.w as isize {
            let mut r = [0.0; 6];
            for (dy, dx, f) in filters {
                let v = img.at(y + dy, x + dx);
                for i in 0..6 {
                    r[i] += f[i] * v;
                }
            }
            coef.push([r[3], 0.5 * r[5], r[4], r[1], r[2]]);
        }
    }
    Expansion { h: img.h, w: img.w, coef }
}

fn gaussian_taps(size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let sigma = (0.3 * r).max(0.5) + 0.5;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable blur with clamped borders, applied to interleaved channels.
fn blur_channels<const C: usize>(data: &[[f64; C]], h: usize, w: usize, taps: &[f64]) -> Vec<[f64; C]> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![[0.0; C]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; C];
            for (k, t) in taps.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                let v = &data[y * w + xx];
                for c in 0..C {
                    acc[c] += t * v[c];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![[0.0; C]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; C];
            for (k, t) in taps.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                let v = &tmp[yy * w + x];
                for c in 0..C {
                    acc[c] += t * v[c];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn downsample(img: &Image) -> Image {
    let taps = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let wrapped: Vec<[f64; 1]> = img.px.iter().map(|v| [*v]).collect();
    let blurred = blur_channels(&wrapped, img.h, img.w, &taps);
    let (h, w) = (img.h.div_ceil(2), img.w.div_ceil(2));
    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            px.push(blurred[2 * y * img.w + 2 * x][0]);
        }
    }
    Image { h, w, px }
}

/// Refines the displacement field `d` (per-pixel `(dx, dy)`) in place.
fn refine(e1: &Expansion, e2: &Expansion, d: &mut [[f64; 2]], params: &FlowParams) {
    let (h, w) = (e1.h, e1.w);
    let taps = gaussian_taps(params.window);
    for _ in 0..params.iterations {
        let mut terms = vec![[0.0; 5]; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let [dx, dy] = d[i];
                let c1 = &e1.coef[i];
                let c2 = e2.bilinear(y as f64 + dy, x as f64 + dx);
                let axx = 0.5 * (c1[0] + c2[0]);
                let axy = 0.5 * (c1[1] + c2[1]);
                let ayy = 0.5 * (c1[2] + c2[2]);
                let bx = -0.5 * (c2[3] - c1[3]) + axx * dx + axy * dy;
                let by = -0.5 * (c2[4] - c1[4]) + axy * dx + ayy * dy;
                terms[i] = [
                    axx * axx + axy * axy,
                    axx * axy + axy * ayy,
                    axy * axy + ayy * ayy,
                    axx * bx + axy * by,
                    axy * bx + ayy * by,
                ];
            }
        }
        let avg = blur_channels(&terms, h, w, &taps);
        let max_trace = avg.iter().map(|g| g[0] + g[2]).fold(0.0, f64::max);
        let mu = 1e-3 * max_trace + 1e-300;
        for (di, g) in d.iter_mut().zip(&avg) {
            let (g11, g12, g22) = (g[0] + mu, g[1], g[2] + mu);
            let det = g11 * g22 - g12 * g12;
            *di = if det > 0.0 && det.is_finite() {
                [(g22 * g[3] - g12 * g[4]) / det, (g11 * g[4] - g12 * g[3]) / det]
            } else {
                [0.0, 0.0]
            };
        }
    }
}

fn upsample_flow(d: &[[f64; 2]], h: usize, w: usize, fine_h: usize, fine_w: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(fine_h * fine_w);
    for y in 0..fine_h {
        for x in 0..fine_w {
            let cy = (y as f64 / 2.0).min((h - 1) as f64);
            let cx = (x as f64 / 2.0).min((w - 1) as f64);
            let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (cy - y0 as f64, cx - x0 as f64);
            let mut v = [0.0; 2];
            for (yy, xx, wgt) in [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ] {
                for c in 0..2 {
                    v[c] += 2.0 * wgt * d[yy * w + xx][c];
                }
            }
            out.push(v);
        }
    }
    out
}

/// Mirrors `i` into `0..len` with half-sample symmetry, for any offset.
fn mirror(i: isize, len: usize) -> usize {
    let p = 2 * len as isize;
    let m = i.rem_euclid(p);
    if m < len as isize {
        m as usize
    } else {
        (p - 1 - m) as usize
    }
}

/// Gaussian smoothing along `t`, truncated at three standard deviations.
pub fn smooth_temporal(data: &Array3<f64>, sigma_t: f64) -> Array3<f64> {
    if sigma_t <= 0.0 {
        return data.clone();
    }
    let radius = (3.0 * sigma_t).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma_t * sigma_t)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    let frames = data.shape()[0];
    let mut out = Array3::zeros(data.raw_dim());
    for t in 0..frames {
        let mut acc = out.index_axis_mut(ndarray::Axis(0), t);
        for (k, w) in taps.iter().enumerate() {
            let src = mirror(t as isize + k as isize - radius, frames);
            acc.scaled_add(w / total, &data.index_axis(ndarray::Axis(0), src));
        }
    }
    out
}

fn frame_image(data: &Array3<f64>, t: usize, scale: f64) -> Image {
    let (h, w) = (data.shape()[1], data.shape()[2]);
    let px = data.index_axis(ndarray::Axis(0), t).iter().map(|v| v * scale).collect();
    Image { h, w, px }
}

/// Flow-field norm between each pair of consecutive frames; the last frame
/// repeats the previous pair's magnitudes.
pub fn dense_flow_magnitude(video: &SparseSignal, params: &FlowParams) -> Result<FlowMagnitudeVolume> {
    params.validate()?;
    let (h, w, frames) = video.shape();
    if frames < 2 {
        return Err(Error::Dimension(format!("optical flow needs at least 2 frames, got {frames}")));
    }
    let smoothed = smooth_temporal(video.data(), params.sigma_t);
    let max = smoothed.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let filters = poly_filters(params.poly_size, params.poly_sigma);

    // Expansions per pyramid level (coarsest last) for every frame.
    let pyramids: Vec<Vec<Expansion>> = (0..frames)
        .map(|t| {
            let mut img = frame_image(&smoothed, t, scale);
            let mut levels = Vec::with_capacity(params.pyramid_levels);
            for level in 0..params.pyramid_levels {
                if level > 0 {
                    img = downsample(&img);
                }
                levels.push(expand(&img, &filters));
            }
            levels
        })
        .collect();

    let mut data = Array3::zeros((frames, h, w));
    for t in 0..frames - 1 {
        let mut d: Vec<[f64; 2]> = Vec::new();
        for level in (0..params.pyramid_levels).rev() {
            let (e1, e2) = (&pyramids[t][level], &pyramids[t + 1][level]);
            d = if d.is_empty() {
                vec![[0.0; 2]; e1.h * e1.w]
            } else {
                let coarse = &pyramids[t][level + 1];
                upsample_flow(&d, coarse.h, coarse.w, e1.h, e1.w)
            };
            refine(e1, e2, &mut d, params);
        }
        for (i, v) in d.iter().enumerate() {
            data[[t, i / w, i % w]] = v[0].hypot(v[1]);
        }
    }
    let last = data.index_axis(ndarray::Axis(0), frames - 2).to_owned();
    data.index_axis_mut(ndarray::Axis(0), frames - 1).assign(&last);
    Ok(FlowMagnitudeVolume { data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::Video;

    fn square_video(side: usize, frames: usize, speed: usize) -> Video {
        let mut data = Array3::zeros((frames, side, side));
        for t in 0..frames {
            for y in 12..20 {
                for x in 6 + t * speed..14 + t * speed {
                    data[[t, y, x]] = 1.0;
                }
            }
        }
        Video::new(data, 25.0).unwrap()
    }

    fn interior_mean(flow: &FlowMagnitudeVolume, frames: usize, speed: usize) -> f64 {
        let mut sum = 0.0;
        let mut count = 0;
        for t in 0..frames - 1 {
            for y in 13..19 {
                for x in 7 + t * speed..13 + t * speed {
                    sum += flow.data[[t, y, x]];
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    fn no_smoothing() -> FlowParams {
        FlowParams { sigma_t: 0.0, ..Default::default() }
    }

    #[test]
    fn static_video_has_no_motion() {
        let v = square_video(32, 4, 0);
        let f = dense_flow_magnitude(&v, &FlowParams::default()).unwrap();
        assert!(f.data.iter().all(|m| *m < 1e-6));
    }

    #[test]
    fn translation_speed_is_recovered() {
        let one = interior_mean(&dense_flow_magnitude(&square_video(40, 6, 1), &no_smoothing()).unwrap(), 6, 1);
        assert!((0.8..=1.2).contains(&one), "1 px/frame gave {one}");
        let two = interior_mean(&dense_flow_magnitude(&square_video(40, 6, 2), &no_smoothing()).unwrap(), 6, 2);
        assert!((1.6..=2.4).contains(&(two / one)), "ratio {}", two / one);
    }

    #[test]
    fn last_frame_repeats_previous() {
        let f = dense_flow_magnitude(&square_video(32, 4, 1), &no_smoothing()).unwrap();
        assert_eq!(f.data.index_axis(ndarray::Axis(0), 3), f.data.index_axis(ndarray::Axis(0), 2));
    }

    #[test]
    fn intensity_scale_is_irrelevant() {
        let v = square_video(32, 5, 1);
        let scaled = Video::new(v.data() * 7.0, 25.0).unwrap();
        let a = dense_flow_magnitude(&v, &no_smoothing()).unwrap();
        let b = dense_flow_magnitude(&scaled, &no_smoothing()).unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert!((x - y).abs() <= 0.1 * x.abs().max(1e-9));
        }
    }

    #[test]
    fn rotation_rotates_the_field() {
        let v = square_video(32, 5, 1);
        let rotated = {
            let d = v.data();
            let n = d.shape()[1];
            Array3::from_shape_fn(d.raw_dim(), |(t, y, x)| d[[t, x, n - 1 - y]])
        };
        let a = dense_flow_magnitude(&v, &no_smoothing()).unwrap();
        let b = dense_flow_magnitude(&Video::new(rotated, 25.0).unwrap(), &no_smoothing()).unwrap();
        let n = 32;
        let mut dev = 0.0;
        let mut mass = 0.0;
        for ((t, y, x), bv) in b.data.indexed_iter() {
            dev += (bv - a.data[[t, x, n - 1 - y]]).abs();
            mass += bv.abs();
        }
        assert!(dev <= 0.05 * mass, "deviation {dev} vs mass {mass}");
    }

    #[test]
    fn single_frame_is_rejected() {
        assert!(dense_flow_magnitude(&square_video(32, 1, 0), &FlowParams::default()).is_err());
    }

    #[test]
    fn temporal_smoothing_preserves_constants() {
        let d = Array3::from_elem((5, 2, 2), 0.3);
        let s = smooth_temporal(&d, 3.5);
        assert!(s.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }
}
