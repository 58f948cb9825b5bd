//! Parameter containers and the dense layer shared by every network here.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// A collection of named 2-D parameter arrays. Gradients use the same type,
/// so optimizers can walk parameters and gradients in lockstep.
pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, a| out.extend(a.iter().copied()));
        out
    }

    /// Overwrites every parameter from a vector laid out like `flatten`.
    fn assign_flat(&mut self, values: &[f64]) {
        let mut pos = 0;
        self.visit_mut("", &mut |_, a| {
            for v in a.iter_mut() {
                *v = values[pos];
                pos += 1;
            }
        });
        assert_eq!(pos, values.len(), "flat parameter vector length mismatch");
    }

    /// `self += a * other`, for two sets with identical layout.
    fn scaled_add_params(&mut self, a: f64, other: &Self)
    where
        Self: Sized,
    {
        let mut xs = Vec::new();
        other.visit("", &mut |_, x| xs.push(x));
        let mut i = 0;
        self.visit_mut("", &mut |_, p| {
            p.scaled_add(a, xs[i]);
            i += 1;
        });
    }

    fn fill_zero(&mut self) {
        self.visit_mut("", &mut |_, a| a.fill(0.0));
    }

    /// SHA-256 over names, shapes and little-endian values.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, a| {
            h.update(name.as_bytes());
            for d in a.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in a.iter() {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let n: f64 = StandardNormal.sample(rng);
        n * std
    })
}

/// `y = x W + b` with `W: (in, out)` and `b: (1, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Linear {
    /// Weights drawn from `N(0, gain^2 / fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        Linear {
            w: gaussian(rng, fan_in, fan_out, gain / (fan_in as f64).sqrt()),
            b: Array2::zeros((1, fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear { w: Array2::zeros((fan_in, fan_out)), b: Array2::zeros((1, fan_out)) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl ParamSet for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

pub fn silu(u: &Array2<f64>) -> Array2<f64> {
    u.mapv(|v| v * sigmoid(v))
}

/// `dL/du` given `dL/da` for `a = silu(u)`.
pub fn silu_backward(u: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut out = da.clone();
    ndarray::Zip::from(&mut out).and(u).for_each(|d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::init(&mut rng, 3, 2, 1.0);
        let x = gaussian(&mut rng, 4, 3, 1.0);
        let dy = gaussian(&mut rng, 4, 2, 1.0);
        let mut g = Linear::zeros(3, 2);
        let dx = lin.backward(&x, &dy, &mut g);
        let loss = |l: &Linear, x: &Array2<f64>| (l.forward(x) * &dy).sum();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut p = lin.clone();
                p.w[[i, j]] += h;
                let mut m = lin.clone();
                m.w[[i, j]] -= h;
                let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
                assert!((fd - g.w[[i, j]]).abs() < 1e-6);
            }
        }
        let mut xp = x.clone();
        xp[[1, 2]] += h;
        let mut xm = x.clone();
        xm[[1, 2]] -= h;
        let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h);
        assert!((fd - dx[[1, 2]]).abs() < 1e-6);
    }

    #[test]
    fn silu_derivative() {
        let u = ndarray::array![[-2.0, 0.0, 0.7, 3.0]];
        let d = silu_backward(&u, &Array2::ones((1, 4)));
        let h = 1e-6;
        for j in 0..4 {
            let f = |v: f64| v * sigmoid(v);
            let fd = (f(u[[0, j]] + h) - f(u[[0, j]] - h)) / (2.0 * h);
            assert!((fd - d[[0, j]]).abs() < 1e-8);
        }
    }

    #[test]
    fn flatten_assign_and_checksum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::init(&mut rng, 2, 3, 1.0);
        let before = lin.checksum();
        let flat = lin.flatten();
        assert_eq!(flat.len(), lin.param_count());
        lin.fill_zero();
        assert_ne!(lin.checksum(), before);
        lin.assign_flat(&flat);
        assert_eq!(lin.checksum(), before);
    }
}
