//! Scalar metrics. Correlations of zero-variance inputs are reported as 0
//! with a degenerate flag instead of NaN.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

impl Correlation {
    fn degenerate() -> Self {
        Self { value: 0.0, degenerate: true }
    }
}

fn check(preds: &[f64], golds: &[f64]) {
    assert_eq!(preds.len(), golds.len(), "metric inputs differ in length");
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn rmse(preds: &[f64], golds: &[f64]) -> f64 {
    check(preds, golds);
    if preds.is_empty() {
        return 0.0;
    }
    (preds.iter().zip(golds).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / preds.len() as f64).sqrt()
}

pub fn mae(preds: &[f64], golds: &[f64]) -> f64 {
    check(preds, golds);
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(golds).map(|(p, g)| (p - g).abs()).sum::<f64>() / preds.len() as f64
}

pub fn pcc(preds: &[f64], golds: &[f64]) -> Correlation {
    check(preds, golds);
    if preds.len() < 2 {
        return Correlation::degenerate();
    }
    let (mp, mg) = (mean(preds), mean(golds));
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vg = 0.0;
    for (p, g) in preds.iter().zip(golds) {
        cov += (p - mp) * (g - mg);
        vp += (p - mp) * (p - mp);
        vg += (g - mg) * (g - mg);
    }
    if vp == 0.0 || vg == 0.0 {
        return Correlation::degenerate();
    }
    Correlation { value: (cov / (vp.sqrt() * vg.sqrt())).clamp(-1.0, 1.0), degenerate: false }
}

/// Coefficient of determination `1 - SS_res / SS_tot`; 0 and degenerate
/// when the golds are constant.
pub fn r2(preds: &[f64], golds: &[f64]) -> Correlation {
    check(preds, golds);
    if preds.is_empty() {
        return Correlation::degenerate();
    }
    let mg = mean(golds);
    let ss_tot: f64 = golds.iter().map(|g| (g - mg) * (g - mg)).sum();
    if ss_tot == 0.0 {
        return Correlation::degenerate();
    }
    let ss_res: f64 = preds.iter().zip(golds).map(|(p, g)| (p - g) * (p - g)).sum();
    Correlation { value: 1.0 - ss_res / ss_tot, degenerate: false }
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
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

/// Pearson correlation of average ranks.
pub fn spearman(preds: &[f64], golds: &[f64]) -> Correlation {
    check(preds, golds);
    pcc(&average_ranks(preds), &average_ranks(golds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities() {
        let x = [0.1, 0.5, 0.2, 0.9];
        assert_eq!(rmse(&x, &x), 0.0);
        assert!((pcc(&x, &x).value - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[1.0, 3.0, 2.0, 4.0]).value - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 2.0, 3.0, 1.0]).value + 1.0).abs() < 1e-12);
        let c = pcc(&[0.3; 4], &x);
        assert!(c.degenerate && c.value == 0.0);
        assert!(r2(&x, &[1.0; 4]).degenerate);
    }

    #[test]
    fn tied_ranks() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
    }
}
