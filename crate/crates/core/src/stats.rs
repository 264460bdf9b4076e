//! Small descriptive statistics used by the reports.

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

/// Pearson correlation; `NaN` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "pearson on unequal lengths");
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    sxy / (sxx * syy).sqrt()
}

/// `1 − SSE / SST` of predictions against targets, with SST taken about
/// the supplied baseline mean (per column for multi-output rows).
pub fn r_squared(pred: &[Vec<f64>], target: &[Vec<f64>], baseline: &[f64]) -> f64 {
    let mut sse = 0.0;
    let mut sst = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for j in 0..t.len() {
            sse += (p[j] - t[j]).powi(2);
            sst += (t[j] - baseline[j]).powi(2);
        }
    }
    1.0 - sse / sst
}

/// Column means of rows.
pub fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.first().map_or(0, Vec::len);
    (0..n)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// Half-width of the 95% normal-approximation interval for a difference of
/// two proportions.
pub fn two_proportion_radius(p1: f64, n1: usize, p2: f64, n2: usize) -> f64 {
    1.96 * (p1 * (1.0 - p1) / n1 as f64 + p2 * (1.0 - p2) / n2 as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook formula, written independently.
    fn pearson_direct(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn pearson_matches_direct_formula() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..100).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v + r.random_range(-1.0..1.0)).collect();
        assert!((pearson(&x, &y) - pearson_direct(&x, &y)).abs() < 1e-10);
        assert!((pearson(&x, &x) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -2.0 * v).collect();
        assert!((pearson(&x, &neg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn r_squared_reference_points() {
        let t = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert_eq!(r_squared(&t, &t, &[2.0]), 1.0);
        let m = vec![vec![2.0]; 3];
        assert_eq!(r_squared(&m, &t, &[2.0]), 0.0);
        assert!(r_squared(&vec![vec![10.0]; 3], &t, &[2.0]) < 0.0);
    }

    #[test]
    fn variance_and_radius() {
        assert_eq!(variance(&[1.0, 3.0]), 1.0);
        let r = two_proportion_radius(0.775, 40, 0.325, 40);
        // 1.96 * sqrt(0.775*0.225/40 + 0.325*0.675/40)
        assert!((r - 0.19447).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn pearson_bounded(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..50)) {
            let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let r = pearson(&x, &y);
            prop_assume!(r.is_finite());
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
    }
}
