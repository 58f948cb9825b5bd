//! Frozen softmax-regression classifier on quadratic features, used to score
//! how well samples match the condition they were generated for.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::ConditionalDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub dim: usize,
    pub num_classes: usize,
    /// `(features, classes)`.
    pub weights: Vec<Vec<f64>>,
    pub checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeTraining {
    pub samples: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Offset into the dataset's sample indices, kept apart from evaluation draws.
    pub offset: u64,
}

impl Default for ProbeTraining {
    fn default() -> Self {
        ProbeTraining { samples: 8000, iterations: 1500, learning_rate: 0.05, offset: 1 << 40 }
    }
}

/// `[1, x_i, x_i x_j (i <= j)]`.
pub fn quadratic_features(x: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols();
    let f = 1 + d + d * (d + 1) / 2;
    let mut out = Array2::zeros((x.nrows(), f));
    for (r, row) in x.rows().into_iter().enumerate() {
        out[[r, 0]] = 1.0;
        let mut k = 1;
        for i in 0..d {
            out[[r, k]] = row[i];
            k += 1;
        }
        for i in 0..d {
            for j in i..d {
                out[[r, k]] = row[i] * row[j];
                k += 1;
            }
        }
    }
    out
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

fn digest(dim: usize, k: usize, w: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    h.update((dim as u64).to_le_bytes());
    h.update((k as u64).to_le_bytes());
    for row in w {
        for v in row {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Probe {
    /// Full-batch Adam on cross-entropy over balanced real samples.
    pub fn train(data: &ConditionalDataset, opts: ProbeTraining) -> Self {
        let (x, labels) = data.balanced(opts.samples, opts.offset);
        let phi = quadratic_features(&x);
        let k = data.num_classes();
        let n = phi.nrows() as f64;
        let mut w = Array2::<f64>::zeros((phi.ncols(), k));
        let mut m = w.clone();
        let mut v = w.clone();
        let (b1, b2) = (0.9f64, 0.999f64);
        for step in 1..=opts.iterations {
            let mut p = phi.dot(&w);
            softmax_rows(&mut p);
            for (r, &c) in labels.iter().enumerate() {
                p[[r, c]] -= 1.0;
            }
            let g = phi.t().dot(&p) / n;
            m = &m * b1 + &g * (1.0 - b1);
            v = &v * b2 + &(&g * &g) * (1.0 - b2);
            let bc1 = 1.0 - b1.powi(step as i32);
            let bc2 = 1.0 - b2.powi(step as i32);
            ndarray::Zip::from(&mut w).and(&m).and(&v).for_each(|w, &m, &v| {
                *w -= opts.learning_rate * (m / bc1) / ((v / bc2).sqrt() + 1e-8);
            });
        }
        let weights: Vec<Vec<f64>> = w.rows().into_iter().map(|r| r.to_vec()).collect();
        let checksum = digest(data.dim(), k, &weights);
        Probe { dim: data.dim(), num_classes: k, weights, checksum }
    }

    pub fn recompute_checksum(&self) -> String {
        digest(self.dim, self.num_classes, &self.weights)
    }

    /// Errors unless the weights hash to both the stored and the expected checksum.
    pub fn verify(&self, expected: &str) -> Result<()> {
        let found = self.recompute_checksum();
        if found != expected || found != self.checksum {
            return Err(Error::ProbeChecksum { expected: expected.to_string(), found });
        }
        Ok(())
    }

    pub fn probabilities(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim {
            return Err(Error::Shape(format!("probe expects {} columns, got {}", self.dim, x.ncols())));
        }
        let f = self.weights.len();
        let w = Array2::from_shape_fn((f, self.num_classes), |(i, j)| self.weights[i][j]);
        let mut p = quadratic_features(x).dot(&w);
        softmax_rows(&mut p);
        Ok(p)
    }
}

/// Mean probe probability of the intended label, in `[0, 1]`.
pub fn condition_consistency(samples: &Array2<f64>, labels: &[usize], probe: &Probe, expected_checksum: &str) -> Result<f64> {
    probe.verify(expected_checksum)?;
    if labels.len() != samples.nrows() || labels.is_empty() {
        return Err(Error::Shape(format!("{} samples but {} labels", samples.nrows(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= probe.num_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside probe's {} classes", probe.num_classes)));
    }
    let p = probe.probabilities(samples)?;
    let total: f64 = labels.iter().enumerate().map(|(r, &c)| p[[r, c]]).sum();
    Ok((total / labels.len() as f64).clamp(0.0, 1.0))
}

/// Fraction of rows whose most probable class is the label.
pub fn probe_accuracy(samples: &Array2<f64>, labels: &[usize], probe: &Probe) -> Result<f64> {
    let p = probe.probabilities(samples)?;
    let hits = p
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &c)| row.iter().enumerate().all(|(j, &v)| j == c || v <= row[c]))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_layout() {
        let f = quadratic_features(&ndarray::array![[2.0, 3.0]]);
        assert_eq!(f.row(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn tampering_detected() {
        let d = ConditionalDataset::ring(3, 1.0, 0.2, 0).unwrap();
        let mut p = Probe::train(&d, ProbeTraining { samples: 300, iterations: 50, ..Default::default() });
        let sum = p.checksum.clone();
        let (x, l) = d.balanced(30, 0);
        assert!(condition_consistency(&x, &l, &p, &sum).is_ok());
        p.weights[0][0] += 1e-9;
        assert!(matches!(condition_consistency(&x, &l, &p, &sum), Err(Error::ProbeChecksum { .. })));
    }
}
