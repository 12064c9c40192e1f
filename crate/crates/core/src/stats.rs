//! Order statistics and rank correlations.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman-Fan type 7). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    quantile_sorted(&sorted(values), 0.5)
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!("length mismatch {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two points".into()));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("correlation undefined for constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!("length mismatch {} vs {}", xs.len(), ys.len())));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Kendall-type trend statistic of `y` against an ordered factor `x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrendTest {
    pub s: f64,
    pub var_s: f64,
    pub z: f64,
    /// One-sided p-value for a decreasing trend.
    pub p_decreasing: f64,
    /// One-sided p-value for an increasing trend.
    pub p_increasing: f64,
}

/// Mann-Kendall test generalized to tied groups: `S = Σ sign(x_j - x_i) sign(y_j - y_i)`
/// over all pairs, with the tie-corrected variance for ties in both
/// variables and a continuity-corrected normal approximation.
pub fn kendall_trend(x: &[f64], y: &[f64]) -> Result<TrendTest> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::InvalidArgument(format!("length mismatch {n} vs {}", y.len())));
    }
    if n < 3 {
        return Err(Error::InvalidArgument("trend test needs at least three points".into()));
    }
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += sign(x[j] - x[i]) * sign(y[j] - y[i]);
        }
    }
    let groups = |v: &[f64]| -> Vec<f64> {
        let sv = sorted(v);
        let mut out = Vec::new();
        let mut i = 0;
        while i < sv.len() {
            let mut j = i;
            while j + 1 < sv.len() && sv[j + 1] == sv[i] {
                j += 1;
            }
            if j > i {
                out.push((j - i + 1) as f64);
            }
            i = j + 1;
        }
        out
    };
    let (tx, ty) = (groups(x), groups(y));
    let nf = n as f64;
    let a = |t: &[f64]| t.iter().map(|t| t * (t - 1.0) * (2.0 * t + 5.0)).sum::<f64>();
    let b = |t: &[f64]| t.iter().map(|t| t * (t - 1.0) * (t - 2.0)).sum::<f64>();
    let c = |t: &[f64]| t.iter().map(|t| t * (t - 1.0)).sum::<f64>();
    let var_s = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - a(&tx) - a(&ty)) / 18.0
        + b(&tx) * b(&ty) / (9.0 * nf * (nf - 1.0) * (nf - 2.0))
        + c(&tx) * c(&ty) / (2.0 * nf * (nf - 1.0));
    if var_s <= 0.0 {
        return Err(Error::InvalidArgument("trend variance is zero".into()));
    }
    let z = if s > 0.0 {
        (s - 1.0) / var_s.sqrt()
    } else if s < 0.0 {
        (s + 1.0) / var_s.sqrt()
    } else {
        0.0
    };
    let normal = Normal::standard();
    Ok(TrendTest {
        s,
        var_s,
        z,
        p_decreasing: normal.cdf(z),
        p_increasing: 1.0 - normal.cdf(z),
    })
}

/// Two-sided standard normal critical value for a central interval.
pub fn normal_interval_z(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_deciles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile_sorted(&v, 0.1) - 10.9).abs() < 1e-12);
        assert!((quantile_sorted(&v, 0.2) - 20.8).abs() < 1e-12);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 100.0);
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // 1 - 6*2/(4*15) = 0.8
        assert!((spearman(&a, &[1.0, 2.0, 4.0, 3.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(spearman(&a, &[1.0; 4]).is_err());
        assert!(spearman(&a, &[1.0; 3]).is_err());
    }

    #[test]
    fn tied_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn trend_detects_decrease() {
        let x = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0];
        let y = [9.0, 8.5, 9.2, 6.0, 6.4, 5.9, 3.0, 3.3, 2.8];
        let t = kendall_trend(&x, &y).unwrap();
        assert_eq!(t.s, -27.0);
        assert!(t.p_decreasing < 0.01);
    }

    #[test]
    fn ninety_percent_interval() {
        assert!((normal_interval_z(0.90) - 1.644_853_6).abs() < 1e-6);
    }
}
