//! Grayscale video volumes, the `LRSE1` raw container, preprocessing and the
//! pixel-matrix view used by the factorization models.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

const MAGIC: &str = "LRSE1";

/// Non-negative intensity volume stored frame-major: `data[[t, row, col]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    data: Array3<f64>,
    frame_rate_hz: f64,
}

/// Sparse fast-motion signal reshaped to the video grid.
pub type SparseSignal = Video;

impl Video {
    pub fn new(data: Array3<f64>, frame_rate_hz: f64) -> Result<Self> {
        let (t, h, w) = data.dim();
        if t == 0 {
            return Err(Error::Dimension("empty video".into()));
        }
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!("degenerate frame size {h}x{w}")));
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::Config(format!(
                "frame rate must be positive, got {frame_rate_hz}"
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Numeric(format!(
                "video intensities must be finite and non-negative, found {bad}"
            )));
        }
        Ok(Self {
            data,
            frame_rate_hz,
        })
    }

    /// All-zero volume of the given shape.
    pub fn zeros(height: usize, width: usize, frames: usize, frame_rate_hz: f64) -> Result<Self> {
        Self::new(Array3::zeros((frames, height, width)), frame_rate_hz)
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    /// `(height, width, frames)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.frames())
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), t)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Encodes the volume in the `LRSE1` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        encode_container(&self.data, self.frame_rate_hz)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (data, fps) = decode_container(bytes)?;
        Self::new(data, fps).map_err(|e| match e {
            Error::Numeric(m) => Error::load(0, m),
            other => other,
        })
    }
}

pub fn load_video(path: impl AsRef<Path>) -> Result<Video> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Video::from_bytes(&bytes)
}

pub fn save_video(video: &Video, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, video.to_bytes()).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode_container(data: &Array3<f64>, frame_rate_hz: f64) -> Vec<u8> {
    let (t, h, w) = data.dim();
    let header = format!("{MAGIC} {h} {w} {t} {frame_rate_hz}\n");
    let mut out = Vec::with_capacity(header.len() + 4 * data.len());
    out.extend_from_slice(header.as_bytes());
    for v in data.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub(crate) fn decode_container(bytes: &[u8]) -> Result<(Array3<f64>, f64)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::load(0, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::load(0, "header is not ASCII"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 5 || fields[0] != MAGIC {
        return Err(Error::load(0, format!("malformed header `{header}`")));
    }
    let dim = |i: usize| -> Result<usize> {
        fields[i]
            .parse::<usize>()
            .map_err(|_| Error::load(0, format!("bad dimension `{}`", fields[i])))
    };
    let (h, w, t) = (dim(1)?, dim(2)?, dim(3)?);
    let fps: f64 = fields[4]
        .parse()
        .map_err(|_| Error::load(0, format!("bad frame rate `{}`", fields[4])))?;
    if t == 0 {
        return Err(Error::load(0, "empty video"));
    }
    if h == 0 || w == 0 {
        return Err(Error::load(0, format!("degenerate frame size {h}x{w}")));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::load(0, format!("frame rate must be positive, got {fps}")));
    }
    let count = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(t))
        .ok_or_else(|| Error::load(0, "dimensions overflow"))?;
    let start = newline + 1;
    let expected = count * 4;
    let payload = &bytes[start..];
    if payload.len() < expected {
        return Err(Error::load(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::load(start + expected, "trailing bytes after payload"));
    }
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::load(start + 4 * i, format!("non-finite value {v}")));
        }
        if v < 0.0 {
            return Err(Error::load(start + 4 * i, format!("negative value {v}")));
        }
        values.push(v as f64);
    }
    let data = Array3::from_shape_vec((t, h, w), values).expect("length checked above");
    Ok((data, fps))
}

/// Binary volume persisted in the `LRSE1` container with values in {0, 1}.
pub fn mask_to_bytes(mask: &Array3<bool>, frame_rate_hz: f64) -> Vec<u8> {
    encode_container(&mask.mapv(|b| if b { 1.0 } else { 0.0 }), frame_rate_hz)
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<Array3<bool>> {
    let (data, _) = decode_container(bytes)?;
    let header_len = bytes.iter().position(|&b| b == b'\n').unwrap_or(0) + 1;
    if let Some(i) = data.iter().position(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::load(
            header_len + 4 * i,
            "mask values must be 0.0 or 1.0",
        ));
    }
    Ok(data.mapv(|v| v == 1.0))
}

pub fn save_mask(mask: &Array3<bool>, frame_rate_hz: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, mask_to_bytes(mask, frame_rate_hz)).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Array3<bool>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    mask_from_bytes(&bytes)
}

/// Pads to a square (symmetric, excess row/column at the bottom/right),
/// resamples to `side x side` and rescales by the global maximum.
pub fn preprocess(video: &Video, side: usize) -> Result<Video> {
    if side == 0 {
        return Err(Error::Config("preprocess target side must be >= 1".into()));
    }
    let (h, w, t) = video.shape();
    let square = h.max(w);
    let pad_top = (square - h) / 2;
    let pad_left = (square - w) / 2;

    let rows = resample_weights(square, side);
    let cols = resample_weights(square, side);

    let mut out = Array3::<f64>::zeros((t, side, side));
    let mut padded = Array2::<f64>::zeros((square, square));
    for f in 0..t {
        padded.fill(0.0);
        padded
            .slice_mut(ndarray::s![pad_top..pad_top + h, pad_left..pad_left + w])
            .assign(&video.frame(f));
        let resized = rows.dot(&padded).dot(&cols.t());
        out.index_axis_mut(Axis(0), f).assign(&resized);
    }

    let max = out.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        out.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    }
    Video::new(out, video.frame_rate_hz())
}

/// `(dst x src)` resampling operator: area averaging when shrinking, bilinear
/// (half-pixel centers, edge clamped) when enlarging.
fn resample_weights(src: usize, dst: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((dst, src));
    if src == dst {
        m.diag_mut().fill(1.0);
    } else if dst < src {
        let scale = src as f64 / dst as f64;
        for i in 0..dst {
            let lo = i as f64 * scale;
            let hi = lo + scale;
            let mut j = lo.floor() as usize;
            while j < src && (j as f64) < hi {
                let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                m[[i, j]] += overlap / scale;
                j += 1;
            }
        }
    } else {
        let scale = src as f64 / dst as f64;
        for i in 0..dst {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let j0 = x.floor() as usize;
            let j1 = (j0 + 1).min(src - 1);
            let frac = x - j0 as f64;
            m[[i, j0]] += 1.0 - frac;
            m[[i, j1]] += frac;
        }
    }
    m
}

/// Video reshaped so that column `t` is frame `t` in row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMatrix {
    data: Array2<f64>,
    height: usize,
    width: usize,
}

impl PixelMatrix {
    pub fn new(data: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        if data.nrows() != height * width {
            return Err(Error::Dimension(format!(
                "pixel matrix has {} rows but frame is {height}x{width}",
                data.nrows()
            )));
        }
        if data.ncols() == 0 {
            return Err(Error::Dimension("empty video".into()));
        }
        Ok(Self {
            data,
            height,
            width,
        })
    }

    pub fn pixels(&self) -> usize {
        self.data.nrows()
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn get(&self, n: usize, t: usize) -> f64 {
        self.data[[n, t]]
    }

    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

pub fn flatten(video: &Video) -> PixelMatrix {
    let (h, w, t) = video.shape();
    let mut m = Array2::<f64>::zeros((h * w, t));
    for (f, frame) in video.data().outer_iter().enumerate() {
        for (n, v) in frame.iter().enumerate() {
            m[[n, f]] = *v;
        }
    }
    PixelMatrix {
        data: m,
        height: h,
        width: w,
    }
}

pub fn unflatten(matrix: &PixelMatrix, frame_rate_hz: f64) -> Result<Video> {
    let (h, w) = (matrix.height, matrix.width);
    if matrix.pixels() != h * w {
        return Err(Error::Dimension(format!(
            "N = {} but h*w = {}",
            matrix.pixels(),
            h * w
        )));
    }
    let t = matrix.frames();
    let mut data = Array3::<f64>::zeros((t, h, w));
    for f in 0..t {
        let column = matrix.data.column(f);
        for (dst, src) in data.index_axis_mut(Axis(0), f).iter_mut().zip(column.iter()) {
            *dst = *src;
        }
    }
    Video::new(data, frame_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn constant(h: usize, w: usize, t: usize, v: f64) -> Video {
        Video::new(Array3::from_elem((t, h, w), v), 25.0).unwrap()
    }

    #[test]
    fn trivial_file_round_trip() {
        let data = Array3::from_shape_vec((1, 2, 2), vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let v = Video::new(data.clone(), 30.0).unwrap();
        let bytes = v.to_bytes();
        assert!(bytes.starts_with(b"LRSE1 2 2 1 30\n"));
        let back = Video::from_bytes(&bytes).unwrap();
        assert_eq!(back.data(), &data);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn empty_video_rejected() {
        let err = Video::from_bytes(b"LRSE1 2 2 0 25\n").unwrap_err();
        assert!(err.to_string().contains("empty video"), "{err}");
    }

    #[test]
    fn truncated_and_non_finite_payloads_name_offsets() {
        let mut bytes = b"LRSE1 1 2 1 25\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        match Video::from_bytes(&bytes).unwrap_err() {
            Error::Load { message, .. } => assert!(message.contains("truncated")),
            e => panic!("unexpected {e}"),
        }
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        match Video::from_bytes(&bytes).unwrap_err() {
            Error::Load { offset, .. } => assert_eq!(offset, 15 + 4),
            e => panic!("unexpected {e}"),
        }
        assert!(Video::from_bytes(b"LRSX 1 1 1 25\n\0\0\0\0").is_err());
    }

    #[test]
    fn symmetric_padding_of_short_side() {
        let v = constant(4, 6, 1, 3.0);
        let p = preprocess(&v, 6).unwrap();
        assert_eq!(p.shape(), (6, 6, 1));
        let f = p.frame(0);
        for c in 0..6 {
            assert_eq!(f[[0, c]], 0.0);
            assert_eq!(f[[5, c]], 0.0);
            for r in 1..5 {
                assert_eq!(f[[r, c]], 1.0);
            }
        }
    }

    #[test]
    fn odd_padding_puts_excess_at_bottom_right() {
        let v = constant(3, 6, 1, 1.0);
        let p = preprocess(&v, 6).unwrap();
        let f = p.frame(0);
        assert_eq!(f.column(0).to_vec(), vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let v = constant(6, 3, 1, 1.0);
        let p = preprocess(&v, 6).unwrap();
        assert_eq!(p.frame(0).row(0).to_vec(), vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalization_hits_exactly_one() {
        let mut data = Array3::from_elem((2, 5, 5), 10.0);
        data[[1, 2, 3]] = 200.0;
        let p = preprocess(&Video::new(data, 25.0).unwrap(), 5).unwrap();
        assert_eq!(p.max_value(), 1.0);
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkerboard_area_average_is_uniform_half() {
        let mut data = Array3::zeros((1, 8, 8));
        for r in 0..8 {
            for c in 0..8 {
                data[[0, r, c]] = ((r + c) % 2) as f64;
            }
        }
        let weights = resample_weights(8, 4);
        let frame = data.index_axis(Axis(0), 0);
        let down = weights.dot(&frame).dot(&weights.t());
        for v in down.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        // after normalization the uniform frame maps to 1.0
        let p = preprocess(&Video::new(data, 25.0).unwrap(), 4).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn upsampling_is_bilinear_and_preserves_constants() {
        let v = constant(4, 4, 1, 0.5);
        let p = preprocess(&v, 10).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let w = resample_weights(2, 4);
        let up = w.dot(&array![0.0, 1.0]);
        assert_eq!(up.to_vec(), vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn flatten_layout() {
        let data = Array3::from_shape_fn((2, 2, 2), |(t, r, c)| (t * 4 + r * 2 + c) as f64);
        let v = Video::new(data, 25.0).unwrap();
        let m = flatten(&v);
        assert_eq!(m.data().column(0).to_vec(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(m.data().column(1).to_vec(), vec![4.0, 5.0, 6.0, 7.0]);
        assert_eq!(unflatten(&m, 25.0).unwrap(), v);
    }

    #[test]
    fn constant_frames_give_constant_columns() {
        let data = Array3::from_shape_fn((3, 2, 3), |(t, _, _)| t as f64 * 0.1);
        let m = flatten(&Video::new(data, 25.0).unwrap());
        for t in 0..3 {
            assert!(m.data().column(t).iter().all(|v| *v == t as f64 * 0.1));
        }
    }

    #[test]
    fn mask_container_rejects_non_binary_values() {
        let mut mask = Array3::from_elem((1, 2, 2), false);
        mask[[0, 1, 0]] = true;
        let bytes = mask_to_bytes(&mask, 25.0);
        assert_eq!(mask_from_bytes(&bytes).unwrap(), mask);
        let v = Video::new(Array3::from_elem((1, 2, 2), 0.5), 25.0).unwrap();
        assert!(mask_from_bytes(&v.to_bytes()).is_err());
    }

    #[test]
    fn pixel_matrix_rejects_inconsistent_dims() {
        assert!(PixelMatrix::new(Array2::zeros((5, 2)), 2, 2).is_err());
    }
}
