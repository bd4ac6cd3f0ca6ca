//! Small statistics helpers shared by the lab and the acceptance tests.

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Upper tail `P(X >= stat)` for a chi-square variable with `dof` degrees.
pub fn chi_square_pvalue(stat: f64, dof: usize) -> f64 {
    match ChiSquared::new(dof as f64) {
        Ok(d) => d.sf(stat),
        Err(_) => f64::NAN,
    }
}

/// Pearson statistic over cells with expected count at least `min_expected`;
/// the remaining cells are pooled into one. Returns `(stat, dof)`.
pub fn pearson(observed: &[f64], expected: &[f64], min_expected: f64) -> (f64, usize) {
    let (mut stat, mut cells) = (0.0, 0usize);
    let (mut po, mut pe) = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        if e >= min_expected {
            stat += (o - e).powi(2) / e;
            cells += 1;
        } else {
            po += o;
            pe += e;
        }
    }
    if pe > 0.0 {
        stat += (po - pe).powi(2) / pe;
        cells += 1;
    }
    (stat, cells.saturating_sub(1))
}

/// Least-squares `(slope, intercept)`.
pub fn ols(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Mean and standard error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (pos - i as f64) * (sorted[j] - sorted[i])
}

/// Percentile interval of `stat` over `reps` resamples with replacement;
/// resamples where `stat` is undefined are dropped.
pub fn bootstrap_ci<T, F, R>(data: &[T], reps: usize, level: f64, rng: &mut R, stat: F) -> Option<(f64, f64)>
where
    T: Clone,
    F: Fn(&[T]) -> Option<f64>,
    R: Rng + ?Sized,
{
    if data.is_empty() {
        return None;
    }
    let mut buf = Vec::with_capacity(data.len());
    let mut vals: Vec<f64> = (0..reps)
        .filter_map(|_| {
            buf.clear();
            buf.extend((0..data.len()).map(|_| data[rng.random_range(0..data.len())].clone()));
            stat(&buf)
        })
        .collect();
    if vals.len() < reps / 2 {
        return None;
    }
    vals.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Some((quantile(&vals, a), quantile(&vals, 1.0 - a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssa::stream;

    #[test]
    fn chi_square_tail() {
        // Median of chi-square with 2 dof is 2 ln 2.
        assert!((chi_square_pvalue(2.0 * 2f64.ln(), 2) - 0.5).abs() < 1e-12);
        assert!((chi_square_pvalue(0.0, 5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_pools_sparse_cells() {
        let (s, dof) = pearson(&[10.0, 10.0, 1.0, 0.0], &[10.0, 10.0, 0.5, 0.5], 5.0);
        assert_eq!(dof, 2);
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn ols_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        let (b, a) = ols(&x, &y).unwrap();
        assert!((b + 2.0).abs() < 1e-12 && (a - 3.0).abs() < 1e-12);
        assert!(ols(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn bootstrap_covers_mean() {
        let data: Vec<f64> = (0..200).map(|i| (i % 10) as f64).collect();
        let mut rng = stream(3, 0);
        let (lo, hi) = bootstrap_ci(&data, 400, 0.95, &mut rng, |d| Some(mean_stderr(d).0)).unwrap();
        assert!(lo < 4.5 && 4.5 < hi && hi - lo < 1.5);
    }
}
