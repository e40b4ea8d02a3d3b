//! Overlap metrics, aggregates, and the paired one-sided t-test.

use ndarray::{ArrayBase, Data, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn counts<S, D>(m: &ArrayBase<S, D>, gs: &ArrayBase<S, D>) -> Result<(usize, usize, usize)>
where
    S: Data<Elem = bool>,
    D: Dimension,
{
    if m.shape() != gs.shape() {
        return Err(Error::Dimension(format!(
            "mask shape {:?} differs from reference shape {:?}",
            m.shape(),
            gs.shape()
        )));
    }
    let (mut inter, mut a, mut b) = (0, 0, 0);
    for (x, y) in m.iter().zip(gs.iter()) {
        inter += (*x && *y) as usize;
        a += *x as usize;
        b += *y as usize;
    }
    Ok((inter, a, b))
}

/// `|m & gs| / |m|`: the share of the detected region that is correct.
pub fn window_accuracy<S, D>(m: &ArrayBase<S, D>, gs: &ArrayBase<S, D>) -> Result<f64>
where
    S: Data<Elem = bool>,
    D: Dimension,
{
    let (inter, a, _) = counts(m, gs)?;
    if a == 0 {
        return Err(Error::Metric("window accuracy of an empty mask".into()));
    }
    Ok(inter as f64 / a as f64)
}

pub fn iou<S, D>(m: &ArrayBase<S, D>, gs: &ArrayBase<S, D>) -> Result<f64>
where
    S: Data<Elem = bool>,
    D: Dimension,
{
    let (inter, a, b) = counts(m, gs)?;
    let union = a + b - inter;
    if union == 0 {
        log::debug!("IoU of two empty masks taken as 1");
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn dice<S, D>(m: &ArrayBase<S, D>, gs: &ArrayBase<S, D>) -> Result<f64>
where
    S: Data<Elem = bool>,
    D: Dimension,
{
    let (inter, a, b) = counts(m, gs)?;
    if a + b == 0 {
        log::debug!("Dice of two empty masks taken as 1");
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub i: f64,
    pub iou: f64,
    pub dc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: Vec<EvalItem>,
    pub i65: usize,
    pub i85: usize,
    pub mean_i: f64,
    pub mean_iou: f64,
    pub mean_dc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p_value: Option<f64>,
}

pub fn aggregate(items: &[EvalItem]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Metric("cannot aggregate zero items".into()));
    }
    let n = items.len() as f64;
    let mean = |f: fn(&EvalItem) -> f64| items.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        items: items.to_vec(),
        i65: items.iter().filter(|x| x.i > 0.65).count(),
        i85: items.iter().filter(|x| x.i > 0.85).count(),
        mean_i: mean(|x| x.i),
        mean_iou: mean(|x| x.iou),
        mean_dc: mean(|x| x.dc),
        p_value: None,
    })
}

impl EvalReport {
    /// Per-item rows followed by an aggregate footer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("item,i,iou,dc\n");
        for (k, it) in self.items.iter().enumerate() {
            out.push_str(&format!("{k},{},{},{}\n", it.i, it.iou, it.dc));
        }
        out.push_str(&format!("mean,{},{},{}\n", self.mean_i, self.mean_iou, self.mean_dc));
        out.push_str(&format!("i65,{}\ni85,{}\n", self.i65, self.i85));
        if let Some(p) = self.p_value {
            out.push_str(&format!("p_value,{p}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Gamma(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + 7.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Student t CDF with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * incomplete_beta(0.5 * df, 0.5, x);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// p-value of the paired one-sided t-test for `mean(a - b) > 0`.
pub fn paired_ttest_onesided(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Metric("paired t-test needs at least 2 pairs".into()));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            0.5
        } else if mean > 0.0 {
            0.0
        } else {
            1.0
        });
    }
    let t = mean / (var / n).sqrt();
    Ok(1.0 - student_t_cdf(t, n - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    #[test]
    fn overlap_examples() {
        let a = arr2(&[[true, true, false]]);
        let b = arr2(&[[false, true, true]]);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((dice(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let empty = Array2::from_elem((1, 3), false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn window_accuracy_examples() {
        let m = Array2::from_shape_fn((2, 4), |_| true);
        let gs = Array2::from_shape_fn((2, 4), |(_, c)| c < 2);
        assert_eq!(window_accuracy(&m, &gs).unwrap(), 0.5);
        assert_eq!(window_accuracy(&gs, &m).unwrap(), 1.0);
        assert_eq!(window_accuracy(&m, &m).unwrap(), 1.0);
        let disjoint = gs.mapv(|v| !v);
        assert_eq!(window_accuracy(&gs, &disjoint).unwrap(), 0.0);
        assert!(window_accuracy(&Array2::from_elem((2, 4), false), &gs).is_err());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = Array2::from_elem((2, 3), true);
        let b = Array2::from_elem((3, 2), true);
        assert!(matches!(dice(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn strict_counting() {
        let items = |is: &[f64]| is.iter().map(|&i| EvalItem { i, iou: 0.5, dc: 0.5 }).collect::<Vec<_>>();
        let r = aggregate(&items(&[0.9, 0.7, 0.5])).unwrap();
        assert_eq!((r.i65, r.i85), (2, 1));
        let r = aggregate(&items(&[0.65, 0.65])).unwrap();
        assert_eq!((r.i65, r.i85), (0, 0));
        let r = aggregate(&items(&[0.85])).unwrap();
        assert_eq!((r.i65, r.i85), (1, 0));
        let single = aggregate(&[EvalItem { i: 0.3, iou: 0.2, dc: 0.1 }]).unwrap();
        assert_eq!((single.mean_i, single.mean_iou, single.mean_dc), (0.3, 0.2, 0.1));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn ttest_degenerate_cases() {
        let a = [0.3, 0.5, 0.9];
        assert_eq!(paired_ttest_onesided(&a, &a).unwrap(), 0.5);
        assert_eq!(paired_ttest_onesided(&[2.0; 4], &[1.0; 4]).unwrap(), 0.0);
        assert_eq!(paired_ttest_onesided(&[1.0; 4], &[2.0; 4]).unwrap(), 1.0);
        assert!(paired_ttest_onesided(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn t_cdf_with_one_df_is_cauchy() {
        for t in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let cauchy = 0.5 + f64::atan(t) / std::f64::consts::PI;
            assert!((student_t_cdf(t, 1.0) - cauchy).abs() < 1e-13);
        }
    }
}
