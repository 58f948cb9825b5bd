//! Variance-preserving noise schedules and the algebra linking the clean
//! sample `x`, the noise `eps`, the velocity `v` and the noisy latent `z_t`.
//!
//! Every tensor here is a batch: one row per sample, one column per latent
//! dimension. Conversions exist in a scalar-time form (one `t` for the whole
//! batch) and a per-row form used by the training losses.

use std::f64::consts::FRAC_PI_2;

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients below this magnitude are treated as the singular endpoint.
pub const SINGULAR_EPS: f64 = 1e-6;

/// A point of continuous diffusion time in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TimePoint(f64);

impl TimePoint {
    pub const ZERO: TimePoint = TimePoint(0.0);
    pub const ONE: TimePoint = TimePoint(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(TimePoint(t))
        } else {
            Err(Error::TimeOutOfRange(t))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for TimePoint {
    type Error = Error;
    fn try_from(t: f64) -> Result<Self> {
        TimePoint::new(t)
    }
}

impl From<TimePoint> for f64 {
    fn from(t: TimePoint) -> f64 {
        t.0
    }
}

/// Signal/noise curves `(alpha_t, sigma_t)` with `alpha^2 + sigma^2 = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum NoiseSchedule {
    /// `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`.
    #[default]
    Cosine,
}

/// Which quantity a model output represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    Epsilon,
    V,
    X,
}

/// A model output tagged with its parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub kind: PredictionKind,
    pub value: Array2<f64>,
}

impl Prediction {
    pub fn new(kind: PredictionKind, value: Array2<f64>) -> Self {
        Prediction { kind, value }
    }
}

/// A noisy latent batch sharing one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Array2<f64>,
    pub t: TimePoint,
}

impl LatentState {
    pub fn new(z: Array2<f64>, t: TimePoint) -> Result<Self> {
        crate::error::ensure_finite(z.iter(), || format!("in latent at t = {}", t.get()))?;
        Ok(LatentState { z, t })
    }
}

/// Per-row `(alpha, sigma)` columns for a batch whose rows sit at different times.
#[derive(Debug, Clone)]
pub struct RowCoeffs {
    pub alpha: Array1<f64>,
    pub sigma: Array1<f64>,
}

impl NoiseSchedule {
    /// `(alpha_t, sigma_t)` at time `t`.
    pub fn alpha_sigma(&self, t: TimePoint) -> (f64, f64) {
        match self {
            NoiseSchedule::Cosine => {
                let t = t.get();
                // exact endpoints; cos(pi/2) is not 0 in floating point
                if t == 0.0 {
                    (1.0, 0.0)
                } else if t == 1.0 {
                    (0.0, 1.0)
                } else {
                    let a = FRAC_PI_2 * t;
                    (a.cos(), a.sin())
                }
            }
        }
    }

    /// Checked variant taking a raw time.
    pub fn alpha_sigma_at(&self, t: f64) -> Result<(f64, f64)> {
        Ok(self.alpha_sigma(TimePoint::new(t)?))
    }

    pub fn row_coeffs(&self, t: &[f64]) -> Result<RowCoeffs> {
        let mut alpha = Array1::zeros(t.len());
        let mut sigma = Array1::zeros(t.len());
        for (i, &ti) in t.iter().enumerate() {
            let (a, s) = self.alpha_sigma_at(ti)?;
            alpha[i] = a;
            sigma[i] = s;
        }
        Ok(RowCoeffs { alpha, sigma })
    }

    /// `z_t = alpha_t x + sigma_t eps`.
    pub fn diffuse(&self, x: &Array2<f64>, eps: &Array2<f64>, t: TimePoint) -> Result<LatentState> {
        check_same_shape(x, eps, "diffuse")?;
        let (a, s) = self.alpha_sigma(t);
        LatentState::new(lincomb(a, x, s, eps), t)
    }

    /// Per-row `z = alpha x + sigma eps`.
    pub fn diffuse_rows(&self, x: &Array2<f64>, eps: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        check_same_shape(x, eps, "diffuse")?;
        check_rows(x, t)?;
        let c = self.row_coeffs(t)?;
        Ok(lincomb_rows(&c.alpha, x, &c.sigma, eps))
    }

    /// Ground-truth velocity `v = alpha_t eps - sigma_t x`.
    pub fn v_from_x_eps(&self, x: &Array2<f64>, eps: &Array2<f64>, t: TimePoint) -> Result<Prediction> {
        check_same_shape(x, eps, "v_from_x_eps")?;
        let (a, s) = self.alpha_sigma(t);
        Ok(Prediction::new(PredictionKind::V, lincomb(a, eps, -s, x)))
    }

    pub fn v_from_x_eps_rows(&self, x: &Array2<f64>, eps: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        check_same_shape(x, eps, "v_from_x_eps")?;
        check_rows(x, t)?;
        let c = self.row_coeffs(t)?;
        Ok(lincomb_rows(&c.alpha, eps, &(-&c.sigma), x))
    }

    /// Re-expresses `pred` in the `target` parameterization relative to `z`.
    pub fn convert(&self, pred: &Prediction, z: &LatentState, target: PredictionKind) -> Result<Prediction> {
        let t = vec![z.t.get(); z.z.nrows()];
        self.convert_rows(pred, &z.z, &t, target)
    }

    /// Per-row conversion; row `i` of `pred` belongs to `(z[i], t[i])`.
    pub fn convert_rows(
        &self,
        pred: &Prediction,
        z: &Array2<f64>,
        t: &[f64],
        target: PredictionKind,
    ) -> Result<Prediction> {
        use PredictionKind::*;
        check_same_shape(&pred.value, z, "convert")?;
        check_rows(z, t)?;
        if pred.kind == target {
            return Ok(pred.clone());
        }
        let c = self.row_coeffs(t)?;
        let p = &pred.value;
        let singular = |need_alpha: bool| -> Result<()> {
            let coeff = if need_alpha { &c.alpha } else { &c.sigma };
            match coeff.iter().position(|v| v.abs() < SINGULAR_EPS) {
                Some(i) => Err(Error::SingularConversion { from: pred.kind, to: target, t: t[i] }),
                None => Ok(()),
            }
        };
        let value = match (pred.kind, target) {
            (V, X) => lincomb_rows(&c.alpha, z, &(-&c.sigma), p),
            (V, Epsilon) => lincomb_rows(&c.sigma, z, &c.alpha, p),
            (Epsilon, X) => {
                singular(true)?;
                lincomb_rows(&c.alpha.mapv(f64::recip), z, &(-&c.sigma / &c.alpha), p)
            }
            (Epsilon, V) => {
                singular(true)?;
                lincomb_rows(&(-&c.sigma / &c.alpha), z, &c.alpha.mapv(f64::recip), p)
            }
            (X, Epsilon) => {
                singular(false)?;
                lincomb_rows(&c.sigma.mapv(f64::recip), z, &(-&c.alpha / &c.sigma), p)
            }
            (X, V) => {
                singular(false)?;
                lincomb_rows(&(&c.alpha / &c.sigma), z, &(-c.sigma.mapv(f64::recip)), p)
            }
            _ => unreachable!("identical kinds returned early"),
        };
        Ok(Prediction::new(target, value))
    }
}

pub(crate) fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())))
    }
}

pub(crate) fn check_rows(a: &Array2<f64>, t: &[f64]) -> Result<()> {
    if a.nrows() == t.len() {
        Ok(())
    } else {
        Err(Error::Shape(format!("{} rows but {} time values", a.nrows(), t.len())))
    }
}

/// `a x + b y` elementwise.
pub(crate) fn lincomb(a: f64, x: &Array2<f64>, b: f64, y: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    Zip::from(&mut out).and(x).and(y).for_each(|o, &xv, &yv| *o = a * xv + b * yv);
    out
}

/// Row-scaled `a_i x_i + b_i y_i`.
pub(crate) fn lincomb_rows(a: &Array1<f64>, x: &Array2<f64>, b: &Array1<f64>, y: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let (ai, bi) = (a[i], b[i]);
        Zip::from(&mut row)
            .and(x.row(i))
            .and(y.row(i))
            .for_each(|o, &xv, &yv| *o = ai * xv + bi * yv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tp(t: f64) -> TimePoint {
        TimePoint::new(t).unwrap()
    }

    #[test]
    fn endpoints_and_midpoint() {
        let s = NoiseSchedule::Cosine;
        assert_eq!(s.alpha_sigma(tp(0.0)), (1.0, 0.0));
        assert_eq!(s.alpha_sigma(tp(1.0)), (0.0, 1.0));
        let (a, b) = s.alpha_sigma(tp(0.5));
        assert_abs_diff_eq!(a, 0.70711, epsilon = 1e-5);
        assert_abs_diff_eq!(b, 0.70711, epsilon = 1e-5);
    }

    #[test]
    fn out_of_range_time_rejected() {
        assert!(matches!(TimePoint::new(1.5), Err(Error::TimeOutOfRange(_))));
        assert!(TimePoint::new(-1e-12).is_err());
        assert!(NoiseSchedule::Cosine.alpha_sigma_at(f64::NAN).is_err());
    }

    #[test]
    fn variance_preserving_and_monotone_on_grid() {
        let s = NoiseSchedule::Cosine;
        let mut prev = (1.0, 0.0);
        for i in 0..=10_000 {
            let (a, b) = s.alpha_sigma(tp(i as f64 / 10_000.0));
            assert!((a * a + b * b - 1.0).abs() < 1e-9);
            assert!(a <= prev.0 && b >= prev.1);
            prev = (a, b);
        }
    }

    #[test]
    fn diffuse_examples() {
        let s = NoiseSchedule::Cosine;
        let x = array![[1.0, -3.0]];
        let e = array![[2.0, 0.5]];
        assert_eq!(s.diffuse(&x, &e, tp(0.0)).unwrap().z, x);
        assert_eq!(s.diffuse(&x, &e, tp(1.0)).unwrap().z, e);
        let z = s.diffuse(&array![[1.0]], &array![[2.0]], tp(0.5)).unwrap();
        assert_abs_diff_eq!(z.z[[0, 0]], 2.12132, epsilon = 1e-5);
        assert!(matches!(s.diffuse(&x, &array![[1.0]], tp(0.5)), Err(Error::Shape(_))));
    }

    #[test]
    fn velocity_examples() {
        let s = NoiseSchedule::Cosine;
        let x = array![[0.3, 0.7]];
        let e = array![[-1.0, 2.0]];
        assert_eq!(s.v_from_x_eps(&x, &e, tp(0.0)).unwrap().value, e);
        let c = array![[1.25, -0.5]];
        let v = s.v_from_x_eps(&c, &c, tp(0.5)).unwrap();
        assert!(v.value.iter().all(|v| v.abs() < 1e-15));
        let v = s.v_from_x_eps(&array![[1.0]], &array![[2.0]], tp(0.5)).unwrap();
        assert_abs_diff_eq!(v.value[[0, 0]], 0.70711, epsilon = 1e-5);
    }

    #[test]
    fn v_to_x_recovers_truth_and_singular_endpoints() {
        let s = NoiseSchedule::Cosine;
        let x = array![[0.4, -1.1], [2.0, 0.0]];
        let e = array![[0.9, 0.2], [-0.3, 1.7]];
        let z = s.diffuse(&x, &e, tp(0.37)).unwrap();
        let v = s.v_from_x_eps(&x, &e, tp(0.37)).unwrap();
        let xh = s.convert(&v, &z, PredictionKind::X).unwrap();
        for (a, b) in xh.value.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        let z0 = s.diffuse(&x, &e, tp(0.0)).unwrap();
        let px = Prediction::new(PredictionKind::X, x.clone());
        assert!(matches!(
            s.convert(&px, &z0, PredictionKind::Epsilon),
            Err(Error::SingularConversion { .. })
        ));
        let z1 = s.diffuse(&x, &e, tp(1.0)).unwrap();
        let pe = Prediction::new(PredictionKind::Epsilon, e.clone());
        assert!(s.convert(&pe, &z1, PredictionKind::X).is_err());
        // v never divides
        assert!(s.convert(&v, &z1, PredictionKind::X).is_ok());
    }

    #[test]
    fn v_eps_v_round_trip() {
        let s = NoiseSchedule::Cosine;
        let z = LatentState::new(array![[0.5, -0.2, 1.3]], tp(0.3)).unwrap();
        let v = Prediction::new(PredictionKind::V, array![[0.1, 0.8, -2.0]]);
        let e = s.convert(&v, &z, PredictionKind::Epsilon).unwrap();
        let back = s.convert(&e, &z, PredictionKind::V).unwrap();
        for (a, b) in back.value.iter().zip(v.value.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn schedule_serializes_with_type_tag() {
        let json = serde_json::to_string(&NoiseSchedule::Cosine).unwrap();
        assert_eq!(json, r#"{"type":"cosine"}"#);
    }
}
