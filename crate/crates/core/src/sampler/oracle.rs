//! Closed-form Bayes-optimal denoisers for Gaussian-mixture data.
//!
//! For `x ~ N(mu_k, diag(s_k^2))` and `z = alpha x + sigma eps`, component `k`
//! gives `z ~ N(alpha mu_k, alpha^2 s_k^2 + sigma^2)` and
//!
//! ```text
//! E[eps | z, k] = sigma (z - alpha mu_k) / (alpha^2 s_k^2 + sigma^2)
//! E[x   | z, k] = mu_k + alpha s_k^2 (z - alpha mu_k) / (alpha^2 s_k^2 + sigma^2)
//! ```
//!
//! mixed by the posterior responsibilities. Neither expression divides by
//! `alpha` or `sigma` alone, so the oracle is usable on the whole sampling grid.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{Condition, Denoise};
use crate::schedule::{
    check_rows, LatentState, NoiseSchedule, Prediction, PredictionKind, SINGULAR_EPS,
};

/// Diagonal-covariance Gaussian mixture. A zero variance is a point mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

/// Posterior moments of one row.
struct Posterior {
    eps_mean: Vec<f64>,
    x_mean: Vec<f64>,
    eps_var: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let m = GaussianMixture { weights, means, variances };
        m.validate()?;
        Ok(m)
    }

    pub fn point_mass(mean: Vec<f64>) -> Self {
        let d = mean.len();
        GaussianMixture { weights: vec![1.0], means: vec![mean], variances: vec![vec![0.0; d]] }
    }

    pub fn standard_normal(dim: usize) -> Self {
        GaussianMixture { weights: vec![1.0], means: vec![vec![0.0; dim]], variances: vec![vec![1.0; dim]] }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(Error::InvalidArgument("mixture needs matching non-empty weights/means/variances".into()));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be >= 0".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}, not 1")));
        }
        let d = self.means[0].len();
        if d == 0 {
            return Err(Error::InvalidArgument("mixture dimension must be > 0".into()));
        }
        for (mu, var) in self.means.iter().zip(&self.variances) {
            if mu.len() != d || var.len() != d {
                return Err(Error::InvalidArgument("mixture components differ in dimension".into()));
            }
            if var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || mu.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidArgument("mixture variances must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = if self.weights.len() == 1 {
            0
        } else {
            WeightedIndex::new(&self.weights).expect("validated weights").sample(rng)
        };
        self.means[k]
            .iter()
            .zip(&self.variances[k])
            .map(|(m, v)| {
                let n: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * n
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            for (o, v) in row.iter_mut().zip(self.sample_one(rng)) {
                *o = v;
            }
        }
        out
    }

    /// Mean and per-dimension variance of the whole mixture.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        let mut second = vec![0.0; d];
        for ((w, mu), var) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            for j in 0..d {
                mean[j] += w * mu[j];
                second[j] += w * (var[j] + mu[j] * mu[j]);
            }
        }
        let var = (0..d).map(|j| second[j] - mean[j] * mean[j]).collect();
        (mean, var)
    }

    fn posterior(&self, z: &[f64], alpha: f64, sigma: f64) -> Result<Posterior> {
        let d = self.dim();
        let k = self.weights.len();
        let mut logr = vec![f64::NEG_INFINITY; k];
        for c in 0..k {
            if self.weights[c] == 0.0 {
                continue;
            }
            let mut acc = self.weights[c].ln();
            for j in 0..d {
                let tot = alpha * alpha * self.variances[c][j] + sigma * sigma;
                if tot <= 0.0 {
                    return Err(Error::DegeneratePosterior(format!(
                        "component {c} has zero total variance (alpha = {alpha}, sigma = {sigma})"
                    )));
                }
                let r = z[j] - alpha * self.means[c][j];
                acc -= 0.5 * (r * r / tot + tot.ln());
            }
            logr[c] = acc;
        }
        let max = logr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegeneratePosterior("all responsibilities underflow".into()));
        }
        let mut resp: Vec<f64> = logr.iter().map(|l| (l - max).exp()).collect();
        let norm: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= norm);

        let mut eps_mean = vec![0.0; d];
        let mut x_mean = vec![0.0; d];
        let mut eps_second = vec![0.0; d];
        for c in 0..k {
            if resp[c] == 0.0 {
                continue;
            }
            for j in 0..d {
                let s2 = self.variances[c][j];
                let tot = alpha * alpha * s2 + sigma * sigma;
                let r = z[j] - alpha * self.means[c][j];
                let e = sigma * r / tot;
                let cond_var = alpha * alpha * s2 / tot;
                eps_mean[j] += resp[c] * e;
                x_mean[j] += resp[c] * (self.means[c][j] + alpha * s2 * r / tot);
                eps_second[j] += resp[c] * (cond_var + e * e);
            }
        }
        let eps_var = (0..d).map(|j| eps_second[j] - eps_mean[j] * eps_mean[j]).collect();
        Ok(Posterior { eps_mean, x_mean, eps_var })
    }

    fn check_dim(&self, z: &Array2<f64>) -> Result<()> {
        if z.ncols() == self.dim() {
            Ok(())
        } else {
            Err(Error::Shape(format!("latent has {} columns, mixture {}", z.ncols(), self.dim())))
        }
    }

    /// Row-wise `E[eps | z_t]`, `E[x | z_t]` and `Var[eps | z_t]`.
    fn posterior_rows(
        &self,
        schedule: &NoiseSchedule,
        z: &Array2<f64>,
        t: &[f64],
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        self.check_dim(z)?;
        check_rows(z, t)?;
        let mut eps = Array2::zeros(z.raw_dim());
        let mut x = Array2::zeros(z.raw_dim());
        let mut var = Array2::zeros(z.raw_dim());
        for (i, row) in z.rows().into_iter().enumerate() {
            let (a, s) = schedule.alpha_sigma_at(t[i])?;
            let zr: Vec<f64> = row.to_vec();
            let p = self.posterior(&zr, a, s)?;
            for j in 0..zr.len() {
                eps[[i, j]] = p.eps_mean[j];
                x[[i, j]] = p.x_mean[j];
                var[[i, j]] = p.eps_var[j];
            }
        }
        Ok((eps, x, var))
    }

    /// Posterior variance of the noise, the Bayes risk of an eps-predictor.
    pub fn posterior_eps_variance(&self, schedule: &NoiseSchedule, z: &LatentState) -> Result<Array2<f64>> {
        let t = vec![z.t.get(); z.z.nrows()];
        Ok(self.posterior_rows(schedule, &z.z, &t)?.2)
    }

    /// Posterior mean of the clean sample.
    pub fn posterior_mean_x(&self, schedule: &NoiseSchedule, z: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        Ok(self.posterior_rows(schedule, z, t)?.1)
    }

    /// Bayes-optimal velocity `alpha E[eps|z] - sigma E[x|z]`.
    pub fn posterior_v(&self, schedule: &NoiseSchedule, z: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        let (eps, x, _) = self.posterior_rows(schedule, z, t)?;
        let c = schedule.row_coeffs(t)?;
        Ok(crate::schedule::lincomb_rows(&c.alpha, &eps, &(-&c.sigma), &x))
    }
}

/// `E[eps | z_t]` under `mixture`; the minimiser of the noise-prediction loss.
pub fn analytic_epsilon(schedule: &NoiseSchedule, mixture: &GaussianMixture, z: &LatentState) -> Result<Prediction> {
    let (_, sigma) = schedule.alpha_sigma(z.t);
    if sigma < SINGULAR_EPS {
        return Err(Error::Singular(format!("analytic epsilon needs sigma > 0 (t = {})", z.t.get())));
    }
    let t = vec![z.t.get(); z.z.nrows()];
    let (eps, _, _) = mixture.posterior_rows(schedule, &z.z, &t)?;
    Ok(Prediction::new(PredictionKind::Epsilon, eps))
}

/// Exact conditional denoiser for class-conditional mixtures; the null
/// condition uses the class-marginal mixture. Outputs v-predictions.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    schedule: NoiseSchedule,
    classes: Vec<GaussianMixture>,
    marginal: GaussianMixture,
}

impl AnalyticDenoiser {
    /// Classes are weighted equally in the marginal.
    pub fn new(schedule: NoiseSchedule, classes: Vec<GaussianMixture>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidArgument("at least one class required".into()));
        }
        for c in &classes {
            c.validate()?;
        }
        let d = classes[0].dim();
        if classes.iter().any(|c| c.dim() != d) {
            return Err(Error::InvalidArgument("class mixtures differ in dimension".into()));
        }
        let share = 1.0 / classes.len() as f64;
        let mut marginal = GaussianMixture { weights: vec![], means: vec![], variances: vec![] };
        for c in &classes {
            for k in 0..c.weights.len() {
                marginal.weights.push(share * c.weights[k]);
                marginal.means.push(c.means[k].clone());
                marginal.variances.push(c.variances[k].clone());
            }
        }
        let total: f64 = marginal.weights.iter().sum();
        marginal.weights.iter_mut().for_each(|w| *w /= total);
        Ok(AnalyticDenoiser { schedule, classes, marginal })
    }

    /// Unconditional oracle for a single mixture.
    pub fn unconditional(schedule: NoiseSchedule, mixture: GaussianMixture) -> Result<Self> {
        Self::new(schedule, vec![mixture])
    }

    pub fn mixture_for(&self, c: Condition) -> Result<&GaussianMixture> {
        match c {
            Condition::Null => Ok(&self.marginal),
            Condition::Label(k) => self
                .classes
                .get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("label {k} out of range"))),
        }
    }
}

impl Denoise for AnalyticDenoiser {
    fn data_dim(&self) -> usize {
        self.marginal.dim()
    }

    fn predict(&self, z: &Array2<f64>, t: &[f64], cond: &[Condition]) -> Result<Prediction> {
        check_rows(z, t)?;
        if cond.len() != z.nrows() {
            return Err(Error::Shape(format!("{} rows but {} conditions", z.nrows(), cond.len())));
        }
        let mut v = Array2::zeros(z.raw_dim());
        for (i, c) in cond.iter().enumerate() {
            let mix = self.mixture_for(*c)?;
            let row = z.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            let vi = mix.posterior_v(&self.schedule, &row, &t[i..i + 1])?;
            v.row_mut(i).assign(&vi.row(0));
        }
        Ok(Prediction::new(PredictionKind::V, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::TimePoint;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tp(t: f64) -> TimePoint {
        TimePoint::new(t).unwrap()
    }

    #[test]
    fn standard_normal_gives_sigma_z() {
        let s = NoiseSchedule::Cosine;
        let mix = GaussianMixture::standard_normal(3);
        let z = LatentState::new(array![[0.3, -1.2, 2.5], [0.0, 0.7, -0.1]], tp(0.42)).unwrap();
        let eps = analytic_epsilon(&s, &mix, &z).unwrap();
        let (_, sigma) = s.alpha_sigma(tp(0.42));
        for (e, zv) in eps.value.iter().zip(z.z.iter()) {
            assert_abs_diff_eq!(*e, sigma * zv, epsilon = 1e-12);
        }
    }

    /// Brute-force E[eps | z] by quadrature over x for 1-D N(0,1) data.
    #[test]
    fn standard_normal_matches_quadrature() {
        let s = NoiseSchedule::Cosine;
        let (a, sg) = s.alpha_sigma(tp(0.3));
        let z0 = 0.8;
        let (mut num, mut den) = (0.0, 0.0);
        let h = 1e-3;
        let mut x = -10.0;
        while x <= 10.0 {
            let eps = (z0 - a * x) / sg;
            let w = (-0.5 * x * x).exp() * (-0.5 * eps * eps).exp();
            num += w * eps;
            den += w;
            x += h;
        }
        let mix = GaussianMixture::standard_normal(1);
        let z = LatentState::new(array![[z0]], tp(0.3)).unwrap();
        let got = analytic_epsilon(&s, &mix, &z).unwrap().value[[0, 0]];
        assert_abs_diff_eq!(got, num / den, epsilon = 1e-8);
    }

    #[test]
    fn point_mass_inverts_exactly() {
        let s = NoiseSchedule::Cosine;
        let mu = vec![1.5, -0.5];
        let mix = GaussianMixture::point_mass(mu.clone());
        let z = LatentState::new(array![[0.2, 0.9]], tp(0.65)).unwrap();
        let (a, sg) = s.alpha_sigma(tp(0.65));
        let eps = analytic_epsilon(&s, &mix, &z).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(eps.value[[0, j]], (z.z[[0, j]] - a * mu[j]) / sg, epsilon = 1e-12);
        }
    }

    /// Monte-Carlo posterior: draw (x, eps), keep draws whose z lands near z0.
    #[test]
    fn two_component_matches_monte_carlo_posterior() {
        let s = NoiseSchedule::Cosine;
        let mix = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![vec![-1.0], vec![1.5]],
            vec![vec![0.2], vec![0.1]],
        )
        .unwrap();
        let t = tp(0.5);
        let (a, sg) = s.alpha_sigma(t);
        let z0 = 0.4;
        let half_width = 0.01;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut kept = Vec::new();
        while kept.len() < 20_000 {
            let x = mix.sample_one(&mut rng)[0];
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = a * x + sg * e;
            if (z - z0).abs() < half_width {
                // shift eps to the exact z0 slice
                kept.push(e + (z0 - z) / sg);
            }
        }
        let n = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / n;
        let var = kept.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let z = LatentState::new(array![[z0]], t).unwrap();
        let got = analytic_epsilon(&s, &mix, &z).unwrap().value[[0, 0]];
        assert!((got - mean).abs() < 3.0 * se + 1e-3, "oracle {got} vs mc {mean} (se {se})");
    }

    #[test]
    fn singular_time_rejected() {
        let s = NoiseSchedule::Cosine;
        let mix = GaussianMixture::standard_normal(1);
        let z = LatentState::new(array![[0.1]], tp(0.0)).unwrap();
        assert!(analytic_epsilon(&s, &mix, &z).is_err());
        let pm = GaussianMixture::point_mass(vec![0.0]);
        assert!(matches!(pm.posterior_v(&s, &array![[0.0]], &[0.0]), Err(Error::DegeneratePosterior(_))));
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(GaussianMixture::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![vec![-1.0]]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0, 1.0]], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn oracle_velocity_is_finite_at_t_one() {
        let s = NoiseSchedule::Cosine;
        let mix = GaussianMixture::new(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![vec![0.1], vec![0.1]]).unwrap();
        let m = AnalyticDenoiser::unconditional(s, mix).unwrap();
        let p = m.predict(&array![[0.3]], &[1.0], &[Condition::Label(0)]).unwrap();
        // at t = 1, x_hat is the prior mean (0), so v = -x_hat = 0
        assert_abs_diff_eq!(p.value[[0, 0]], 0.0, epsilon = 1e-12);
    }
}
