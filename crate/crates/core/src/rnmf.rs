//! Robust non-negative matrix factorization `X ~ U V^T + S` with an l1-sparse
//! outlier term, solved by block-coordinate descent.

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::video::PixelMatrix;

const DENOM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RnmfConfig {
    pub rank: usize,
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for RnmfConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            lambda: 0.3,
            max_iters: 200,
            tol: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RnmfResult {
    /// `N x K` spatial factors.
    pub u: Array2<f64>,
    /// `T x K` temporal factors.
    pub v: Array2<f64>,
    /// `N x T` non-negative sparse outliers.
    pub s: Array2<f64>,
    pub objective_trace: Vec<f64>,
}

impl RnmfResult {
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn low_rank(&self) -> Array2<f64> {
        self.u.dot(&self.v.t())
    }
}

/// `||X - U V^T - S||_F^2 + lambda ||S||_1`.
pub fn rnmf_objective(x: &Array2<f64>, u: &Array2<f64>, v: &Array2<f64>, s: &Array2<f64>, lambda: f64) -> f64 {
    let low = u.dot(&v.t());
    let mut fit = 0.0;
    let mut l1 = 0.0;
    Zip::from(x).and(&low).and(s).for_each(|&x, &l, &s| {
        fit += (x - l - s).powi(2);
        l1 += s.abs();
    });
    fit + lambda * l1
}

/// Exact minimizer of the objective over `S >= 0` for fixed factors.
pub fn sparse_update(x: &Array2<f64>, low_rank: &Array2<f64>, lambda: f64) -> Array2<f64> {
    let mut s = x - low_rank;
    s.mapv_inplace(|r| (r - 0.5 * lambda).max(0.0));
    s
}

pub fn rnmf_decompose(x: &PixelMatrix, cfg: &RnmfConfig) -> Result<RnmfResult> {
    let (n, t) = (x.pixels(), x.frames());
    let k = cfg.rank;
    if k == 0 || k > n.min(t) {
        return Err(Error::Config(format!(
            "rank {k} must be in 1..={}",
            n.min(t)
        )));
    }
    if !(cfg.lambda > 0.0) {
        return Err(Error::Config("lambda must be positive".into()));
    }
    let x = x.data();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mean = x.mean().unwrap_or(0.0).max(1e-3);
    let scale = (mean / k as f64).sqrt();
    let normal = Normal::new(0.0, scale).expect("positive scale");
    let mut u = Array2::from_shape_simple_fn((n, k), || normal.sample(&mut rng).abs() + 1e-3);
    let mut v = Array2::from_shape_simple_fn((t, k), || normal.sample(&mut rng).abs() + 1e-3);
    let mut s = Array2::<f64>::zeros((n, t));

    let mut trace = Vec::new();
    let mut previous = rnmf_objective(x, &u, &v, &s, cfg.lambda);
    for _ in 0..cfg.max_iters {
        let mut residual = x - &s;
        residual.mapv_inplace(|r| r.max(0.0));

        // U <- U * (R V) / (U V^T V)
        let numer = residual.dot(&v);
        let denom = u.dot(&v.t().dot(&v));
        Zip::from(&mut u).and(&numer).and(&denom).for_each(|u, &a, &b| {
            *u *= a / (b + DENOM_EPS);
        });
        // V <- V * (R^T U) / (V U^T U)
        let numer = residual.t().dot(&u);
        let denom = v.dot(&u.t().dot(&u));
        Zip::from(&mut v).and(&numer).and(&denom).for_each(|v, &a, &b| {
            *v *= a / (b + DENOM_EPS);
        });

        s = sparse_update(x, &u.dot(&v.t()), cfg.lambda);
        let objective = rnmf_objective(x, &u, &v, &s, cfg.lambda);
        if !objective.is_finite() {
            return Err(Error::Numeric(format!(
                "RNMF objective became {objective} at iteration {}",
                trace.len()
            )));
        }
        trace.push(objective);
        let change = (previous - objective).abs() / previous.abs().max(f64::MIN_POSITIVE);
        previous = objective;
        if change < cfg.tol {
            break;
        }
    }

    balance_columns(&mut u, &mut v);
    Ok(RnmfResult {
        u,
        v,
        s,
        objective_trace: trace,
    })
}

/// Rescales each rank-one term so its spatial and temporal factors share the
/// same peak value; `U V^T` is unchanged.
fn balance_columns(u: &mut Array2<f64>, v: &mut Array2<f64>) {
    for k in 0..u.ncols() {
        let mu = u.column(k).iter().copied().fold(0.0, f64::max);
        let mv = v.column(k).iter().copied().fold(0.0, f64::max);
        if mu > 0.0 && mv > 0.0 {
            let c = (mv / mu).sqrt();
            u.column_mut(k).mapv_inplace(|x| x * c);
            v.column_mut(k).mapv_inplace(|x| x / c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn matrix(data: Array2<f64>, h: usize, w: usize) -> PixelMatrix {
        PixelMatrix::new(data, h, w).unwrap()
    }

    #[test]
    fn sparse_update_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = Array2::from_shape_simple_fn((3, 4), || rng.random::<f64>());
            let low = Array2::from_shape_simple_fn((3, 4), || rng.random::<f64>() * 0.8);
            let lambda = rng.random_range(0.05..0.8);
            let closed = sparse_update(&x, &low, lambda);
            for ((i, j), s) in closed.indexed_iter() {
                let cost = |s: f64| (x[[i, j]] - low[[i, j]] - s).powi(2) + lambda * s;
                // coarse scan, then golden-section refinement on the bracket
                let steps = 2000;
                let best = (0..=steps)
                    .map(|k| 1.5 * k as f64 / steps as f64)
                    .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
                    .unwrap();
                let (mut lo, mut hi) = ((best - 1e-3).max(0.0), best + 1e-3);
                let g = 0.5 * (5f64.sqrt() - 1.0);
                for _ in 0..200 {
                    let a = hi - g * (hi - lo);
                    let b = lo + g * (hi - lo);
                    if cost(a) < cost(b) {
                        hi = b;
                    } else {
                        lo = a;
                    }
                }
                let scanned = 0.5 * (lo + hi);
                assert!((scanned - s).abs() < 1e-8, "{scanned} vs {s}");
            }
        }
    }

    #[test]
    fn rank_too_large_is_config_error() {
        let x = matrix(Array2::from_elem((4, 3), 0.5), 2, 2);
        let cfg = RnmfConfig { rank: 4, ..Default::default() };
        assert!(matches!(rnmf_decompose(&x, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn huge_lambda_gives_zero_sparse_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_simple_fn((16, 8), || rng.random::<f64>());
        let cfg = RnmfConfig { rank: 2, lambda: 10.0, ..Default::default() };
        let res = rnmf_decompose(&matrix(x, 4, 4), &cfg).unwrap();
        assert!(res.s.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn spike_is_captured_by_sparse_term() {
        let a: Vec<f64> = (0..64).map(|i| 0.05 + 0.15 * ((i as f64) * 0.37).sin().abs()).collect();
        let b: Vec<f64> = (0..32).map(|j| 0.2 + 0.1 * (j as f64 * 0.5).cos().abs()).collect();
        let mut x = Array2::from_shape_fn((64, 32), |(i, j)| a[i] * b[j]);
        let base = x[[5, 7]];
        x[[5, 7]] = base + 0.9;
        assert!(x[[5, 7]] <= 1.0);
        let cfg = RnmfConfig { rank: 1, ..Default::default() };
        let res = rnmf_decompose(&matrix(x, 8, 8), &cfg).unwrap();
        assert!(res.s[[5, 7]] >= 0.8 * 0.9, "captured {}", res.s[[5, 7]]);
    }

    #[test]
    fn factors_stay_non_negative_and_objective_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_simple_fn((30, 10), || rng.random::<f64>());
        let res = rnmf_decompose(&matrix(x, 5, 6), &RnmfConfig::default()).unwrap();
        assert!(res.u.iter().chain(res.v.iter()).chain(res.s.iter()).all(|v| *v >= 0.0));
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }
}
