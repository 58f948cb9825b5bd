use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const SW_PROJECTIONS: usize = 256;
pub const SW_SEED: u64 = 0x5EED_5117;
pub const MIN_SAMPLES: usize = 1000;

/// Exact 1-D Wasserstein-1 between two sorted empirical distributions of
/// possibly different sizes, integrating over merged quantile breakpoints.
pub fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as u128, b.len() as u128);
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let (ka, kb) = ((i as u128 + 1) * m, (j as u128 + 1) * n);
        let next = if ka <= kb { (i + 1) as f64 / n as f64 } else { (j + 1) as f64 / m as f64 };
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if ka <= kb {
            i += 1;
        }
        if kb <= ka {
            j += 1;
        }
    }
    total
}

/// Unit directions shared by every distance computation with the same seed.
pub fn projections(dim: usize, count: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Array2<f64> = Array2::from_shape_fn((dim, count), |_| StandardNormal.sample(&mut rng));
    for mut col in p.columns_mut() {
        let norm = col.dot(&col).sqrt();
        col /= norm;
    }
    p
}

fn sorted_columns(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.columns()
        .into_iter()
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect()
}

/// Sliced Wasserstein-1 with explicit settings and no sample-count floor.
pub fn sliced_wasserstein_with(a: &Array2<f64>, b: &Array2<f64>, count: usize, seed: u64) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("{} vs {} dimensions", a.ncols(), b.ncols())));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let p = projections(a.ncols(), count, seed);
    let pa = sorted_columns(&a.dot(&p));
    let pb = sorted_columns(&b.dot(&p));
    let total: f64 = pa.iter().zip(&pb).map(|(x, y)| wasserstein_1d_sorted(x, y)).sum();
    Ok(total / count as f64)
}

/// Sliced Wasserstein-1 over 256 fixed projections. Symmetric and
/// order-invariant; needs at least 1000 samples on each side.
pub fn distribution_distance(samples: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    for x in [samples, reference] {
        if x.nrows() < MIN_SAMPLES {
            return Err(Error::TooFewSamples { needed: MIN_SAMPLES, got: x.nrows() });
        }
    }
    sliced_wasserstein_with(samples, reference, SW_PROJECTIONS, SW_SEED)
}

/// Root-mean per-dimension standard deviation.
pub fn data_scale(x: &Array2<f64>) -> f64 {
    x.var_axis(Axis(0), 0.0).mean().unwrap_or(0.0).sqrt()
}

/// `distribution_distance` divided by the reference's `data_scale`.
pub fn relative_distance(samples: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    let scale = data_scale(reference);
    if scale <= 0.0 {
        return Err(Error::Singular("reference set has zero spread".into()));
    }
    Ok(distribution_distance(samples, reference)? / scale)
}

/// Mean and standard deviation of each column.
pub fn column_stats(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
    (mean, x.std_axis(Axis(0), 0.0))
}

/// One-sided paired t-test of `mean(a - b) > 0`. Returns `(t, p)`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!("paired test needs two equal samples of size >= 2, got {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        let p = if mean > 0.0 { 0.0 } else { 1.0 };
        return Ok((f64::INFINITY.copysign(mean), p));
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((t, 1.0 - dist.cdf(t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn one_d_hand_cases() {
        assert_eq!(wasserstein_1d_sorted(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        assert!((wasserstein_1d_sorted(&[0.0], &[2.0]) - 2.0).abs() < 1e-15);
        // {0,1} vs {0,0,3}: quantiles 0..1/3 -> 0, 1/3..1/2 -> 0, 1/2..2/3 -> 1, 2/3..1 -> 2
        let w = wasserstein_1d_sorted(&[0.0, 1.0], &[0.0, 0.0, 3.0]);
        assert!((w - (1.0 / 6.0 + 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn projections_are_unit() {
        let p = projections(3, 10, 1);
        for c in p.columns() {
            assert!((c.dot(&c) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_samples() {
        let x = array![[0.0, 1.0]];
        assert!(matches!(distribution_distance(&x, &x), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn paired_t_matches_table_value() {
        // differences 1, 2, 3: mean 2, sd 1, t = 2 * sqrt(3)
        let (t, p) = paired_t_test(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        // upper tail of t(2) at 3.4641: 1/2 - t / (2 sqrt(t^2 + 2))
        let want = 0.5 - t / (2.0 * (t * t + 2.0).sqrt());
        assert!((p - want).abs() < 1e-9);
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
    }
}
