//! Binary checkpoints.
//!
//! NeuMF: `b"NMF1"`, then `N, T, K, K'` as little-endian u32, then the
//! parameter blocks `u_gmf, v_gmf, u_mlp, v_mlp, mlp_branch, head,
//! threshold` as little-endian f32.
//!
//! RNMF factors: `b"RNF1"`, then `N, T, K` as u32, then `U` and `V`
//! row-major as f32.

use std::path::Path;

use ndarray::Array2;

use super::model::{NeuMFModel, Table};
use crate::error::{Error, Result};

const NEUMF_MAGIC: &[u8; 4] = b"NMF1";
const RNMF_MAGIC: &[u8; 4] = b"RNF1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.bytes.len() < 4 || &self.bytes[..4] != magic {
            return Err(Error::load(0, format!("missing {} magic", String::from_utf8_lossy(magic))));
        }
        self.pos = 4;
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::load(self.bytes.len(), "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, dst: &mut [f64]) -> Result<()> {
        for d in dst.iter_mut() {
            let offset = self.pos;
            let b = self.take(4)?;
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(Error::load(offset, "non-finite parameter"));
            }
            *d = v as f64;
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::load(self.pos, "trailing bytes after checkpoint"));
        }
        Ok(())
    }
}

pub fn model_to_bytes(model: &NeuMFModel) -> Vec<u8> {
    let mut out = NEUMF_MAGIC.to_vec();
    for d in [model.pixels(), model.frames(), model.k(), model.k_prime()] {
        put_u32(&mut out, d);
    }
    for t in Table::ALL {
        put_f32s(&mut out, model.embeddings.table(t));
    }
    put_f32s(&mut out, &model.mlp_branch.params);
    put_f32s(&mut out, &model.head.params);
    put_f32s(&mut out, &model.threshold.params);
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<NeuMFModel> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(NEUMF_MAGIC)?;
    let (n, t, k, kp) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if n == 0 || t == 0 || k == 0 || kp == 0 {
        return Err(Error::load(4, format!("invalid dims N={n} T={t} K={k} K'={kp}")));
    }
    let expected = (n + t) * (k + kp);
    if (bytes.len() - 20) / 4 < expected {
        return Err(Error::load(bytes.len(), "truncated checkpoint"));
    }
    let mut model = NeuMFModel::zeros(n, t, k, kp);
    for table in Table::ALL {
        r.f32s(model.embeddings.table_mut(table))?;
    }
    r.f32s(&mut model.mlp_branch.params)?;
    r.f32s(&mut model.head.params)?;
    r.f32s(&mut model.threshold.params)?;
    r.finish()?;
    Ok(model)
}

pub fn save_model(model: &NeuMFModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NeuMFModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

/// Serializes RNMF factors `U (N x K)` and `V (T x K)`.
pub fn factors_to_bytes(u: &Array2<f64>, v: &Array2<f64>) -> Vec<u8> {
    let mut out = RNMF_MAGIC.to_vec();
    for d in [u.nrows(), v.nrows(), u.ncols()] {
        put_u32(&mut out, d);
    }
    put_f32s(&mut out, &u.iter().copied().collect::<Vec<_>>());
    put_f32s(&mut out, &v.iter().copied().collect::<Vec<_>>());
    out
}

pub fn factors_from_bytes(bytes: &[u8]) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(RNMF_MAGIC)?;
    let (n, t, k) = (r.u32()?, r.u32()?, r.u32()?);
    if (bytes.len() - 16) / 4 < (n + t) * k {
        return Err(Error::load(bytes.len(), "truncated checkpoint"));
    }
    let mut u = vec![0.0; n * k];
    let mut v = vec![0.0; t * k];
    r.f32s(&mut u)?;
    r.f32s(&mut v)?;
    r.finish()?;
    let shape_err = |e: ndarray::ShapeError| Error::Dimension(e.to_string());
    Ok((
        Array2::from_shape_vec((n, k), u).map_err(shape_err)?,
        Array2::from_shape_vec((t, k), v).map_err(shape_err)?,
    ))
}

/// True when `bytes` starts with the RNMF factor magic.
pub fn is_factor_checkpoint(bytes: &[u8]) -> bool {
    bytes.starts_with(RNMF_MAGIC)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neumf::{init_random, TrainConfig};

    #[test]
    fn round_trip_at_f32_precision() {
        let m = init_random(12, 5, &TrainConfig::default(), 4);
        let bytes = model_to_bytes(&m);
        assert_eq!(&bytes[..4], b"NMF1");
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(model_to_bytes(&back), bytes);
        for t in Table::ALL {
            for (a, b) in m.embeddings.table(t).iter().zip(back.embeddings.table(t)) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let bytes = model_to_bytes(&init_random(3, 2, &TrainConfig::default(), 0));
        assert!(model_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(model_from_bytes(b"XXXX").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(model_from_bytes(&extra).is_err());
    }

    #[test]
    fn factor_round_trip() {
        let u = Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64 * 0.25);
        let v = Array2::from_shape_fn((3, 2), |(i, j)| (i * j) as f64 * 0.5);
        let (u2, v2) = factors_from_bytes(&factors_to_bytes(&u, &v)).unwrap();
        assert_eq!(u, u2);
        assert_eq!(v, v2);
    }
}
