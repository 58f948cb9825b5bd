use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{AnalyticDenoiser, Condition, GaussianMixture};
use crate::schedule::NoiseSchedule;

/// Finite label set with one Gaussian mixture per label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDataset {
    pub classes: Vec<GaussianMixture>,
    pub seed: u64,
}

impl ConditionalDataset {
    pub fn new(classes: Vec<GaussianMixture>, seed: u64) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one condition".into()));
        }
        let d = classes[0].dim();
        for c in &classes {
            c.validate()?;
            if c.dim() != d {
                return Err(Error::InvalidArgument("conditions differ in dimension".into()));
            }
        }
        Ok(ConditionalDataset { classes, seed })
    }

    /// `k` isotropic 2-D Gaussians evenly spaced on a circle, one per label.
    pub fn ring(k: usize, radius: f64, std: f64, seed: u64) -> Result<Self> {
        let classes = (0..k)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / k as f64;
                GaussianMixture::new(vec![1.0], vec![vec![radius * a.cos(), radius * a.sin()]], vec![vec![std * std; 2]])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(classes, seed)
    }

    /// The default toy problem: 8 labels on a ring of radius 1.5, std 0.2.
    pub fn toy(seed: u64) -> Self {
        Self::ring(8, 1.5, 0.2, seed).expect("toy ring parameters are valid")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.classes[0].dim()
    }

    pub fn oracle(&self, schedule: NoiseSchedule) -> AnalyticDenoiser {
        AnalyticDenoiser::new(schedule, self.classes.clone()).expect("validated at construction")
    }

    /// Sample `index` of label `label`; a pure function of `(label, seed, index)`.
    pub fn draw(&self, label: usize, index: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((label as u64) << 48) ^ index);
        self.classes[label].sample_one(&mut rng)
    }

    /// Batch with labels drawn uniformly from `rng`.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
        let k = self.num_classes();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let mut x = Array2::zeros((n, self.dim()));
        for (i, &c) in labels.iter().enumerate() {
            let row = self.classes[c].sample_one(rng);
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        (x, labels)
    }

    /// Label `i % k` for row `i`.
    pub fn balanced_labels(&self, n: usize) -> Vec<usize> {
        (0..n).map(|i| i % self.num_classes()).collect()
    }

    /// Balanced sample whose row `i` is `draw(i % k, offset + i)`.
    pub fn balanced(&self, n: usize, offset: u64) -> (Array2<f64>, Vec<usize>) {
        let labels = self.balanced_labels(n);
        let mut x = Array2::zeros((n, self.dim()));
        for (i, &c) in labels.iter().enumerate() {
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&self.draw(c, offset + i as u64)));
        }
        (x, labels)
    }
}

pub fn to_conditions(labels: &[usize]) -> Vec<Condition> {
    labels.iter().map(|&c| Condition::Label(c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_pure() {
        let d = ConditionalDataset::toy(3);
        assert_eq!(d.draw(2, 17), d.draw(2, 17));
        assert_ne!(d.draw(2, 17), d.draw(2, 18));
        assert_ne!(d.draw(2, 17), d.draw(3, 17));
        assert_ne!(d.draw(2, 17), ConditionalDataset::toy(4).draw(2, 17));
        let (a, la) = d.balanced(20, 5);
        let (b, lb) = d.balanced(20, 5);
        assert_eq!((a, la), (b, lb));
    }

    #[test]
    fn ring_geometry() {
        let d = ConditionalDataset::ring(4, 2.0, 0.1, 0).unwrap();
        assert!((d.classes[1].means[0][1] - 2.0).abs() < 1e-12);
        let (x, labels) = d.balanced(4000, 0);
        let mean_c0: f64 = labels.iter().zip(x.rows()).filter(|(l, _)| **l == 0).map(|(_, r)| r[0]).sum::<f64>() / 1000.0;
        assert!((mean_c0 - 2.0).abs() < 0.02);
    }
}
