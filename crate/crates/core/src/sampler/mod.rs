//! DDIM stepping, classifier-free guidance and the sampling loop.

mod oracle;

pub use oracle::{analytic_epsilon, AnalyticDenoiser, GaussianMixture};

use ndarray::{concatenate, s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::schedule::{
    check_rows, check_same_shape, lincomb, lincomb_rows, LatentState, NoiseSchedule, Prediction,
    PredictionKind, TimePoint,
};

/// Conditioning input: a class label or the reserved null token used for the
/// unconditional branch of guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    Label(usize),
    Null,
}

/// Classifier-free guidance scale; `w = 1` is the plain conditional prediction.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GuidanceScale(f64);

impl GuidanceScale {
    pub const NONE: GuidanceScale = GuidanceScale(1.0);

    pub fn new(w: f64) -> Result<Self> {
        if w.is_finite() && w >= 0.0 {
            Ok(GuidanceScale(w))
        } else {
            Err(Error::InvalidArgument(format!("guidance scale must be finite and >= 0, got {w}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn is_identity(self) -> bool {
        self.0 == 1.0
    }
}

impl TryFrom<f64> for GuidanceScale {
    type Error = Error;
    fn try_from(w: f64) -> Result<Self> {
        GuidanceScale::new(w)
    }
}

impl From<GuidanceScale> for f64 {
    fn from(w: GuidanceScale) -> f64 {
        w.0
    }
}

/// Anything that maps `(z_t, t, c)` to a prediction. Row `i` of `z` is at
/// time `t[i]` with condition `cond[i]`.
pub trait Denoise: Sync {
    fn data_dim(&self) -> usize;
    fn predict(&self, z: &Array2<f64>, t: &[f64], cond: &[Condition]) -> Result<Prediction>;
}

impl<T: Denoise + ?Sized> Denoise for &T {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }
    fn predict(&self, z: &Array2<f64>, t: &[f64], cond: &[Condition]) -> Result<Prediction> {
        (**self).predict(z, t, cond)
    }
}

/// `w * cond - (w - 1) * uncond`.
pub fn cfg_combine(cond: &Prediction, uncond: &Prediction, w: GuidanceScale) -> Result<Prediction> {
    if cond.kind != uncond.kind {
        return Err(Error::KindMismatch(cond.kind, uncond.kind));
    }
    check_same_shape(&cond.value, &uncond.value, "cfg_combine")?;
    let w = w.get();
    Ok(Prediction::new(cond.kind, lincomb(w, &cond.value, -(w - 1.0), &uncond.value)))
}

/// Evaluates the model on `cond` and, unless `w = 1`, on the null condition as
/// well (one stacked forward pass), returning the guided prediction.
pub fn guided_predict<M: Denoise + ?Sized>(
    model: &M,
    z: &Array2<f64>,
    t: &[f64],
    cond: &[Condition],
    w: GuidanceScale,
) -> Result<Prediction> {
    if w.is_identity() {
        return model.predict(z, t, cond);
    }
    let n = z.nrows();
    let zz = concatenate![Axis(0), z.view(), z.view()];
    let tt: Vec<f64> = t.iter().chain(t.iter()).copied().collect();
    let cc: Vec<Condition> = cond.iter().copied().chain(std::iter::repeat(Condition::Null).take(n)).collect();
    let both = model.predict(&zz, &tt, &cc)?;
    let c = Prediction::new(both.kind, both.value.slice(s![..n, ..]).to_owned());
    let u = Prediction::new(both.kind, both.value.slice(s![n.., ..]).to_owned());
    cfg_combine(&c, &u, w)
}

/// One deterministic DDIM jump `z_t -> z_{t_next}`:
/// `z' = alpha' x_hat + sigma' eps_hat` with both estimates taken from `pred`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z: &LatentState,
    pred: &Prediction,
    t_next: TimePoint,
) -> Result<LatentState> {
    if t_next > z.t {
        return Err(Error::InvalidArgument(format!(
            "ddim_step must move backwards in time: {} -> {}",
            z.t.get(),
            t_next.get()
        )));
    }
    check_same_shape(&z.z, &pred.value, "ddim_step")?;
    if t_next == z.t {
        return Ok(z.clone());
    }
    let x_hat = schedule.convert(pred, z, PredictionKind::X)?;
    let eps_hat = schedule.convert(pred, z, PredictionKind::Epsilon)?;
    let (a, s) = schedule.alpha_sigma(t_next);
    LatentState::new(lincomb(a, &x_hat.value, s, &eps_hat.value), t_next)
}

/// Per-row DDIM jump; each row moves from `t[i]` to `t_next[i]`.
pub fn ddim_step_rows(
    schedule: &NoiseSchedule,
    z: &Array2<f64>,
    t: &[f64],
    pred: &Prediction,
    t_next: &[f64],
) -> Result<Array2<f64>> {
    check_rows(z, t)?;
    check_rows(z, t_next)?;
    if let Some(i) = t.iter().zip(t_next).position(|(a, b)| b > a) {
        return Err(Error::InvalidArgument(format!(
            "ddim_step must move backwards in time: row {i} {} -> {}",
            t[i], t_next[i]
        )));
    }
    let x_hat = schedule.convert_rows(pred, z, t, PredictionKind::X)?;
    let eps_hat = schedule.convert_rows(pred, z, t, PredictionKind::Epsilon)?;
    let c = schedule.row_coeffs(t_next)?;
    Ok(lincomb_rows(&c.alpha, &x_hat.value, &c.sigma, &eps_hat.value))
}

/// Uniform time grid `1 = t_0 > t_1 > ... > t_n = 0` with `t_i = 1 - i/n`.
pub fn uniform_grid(n_steps: usize) -> Vec<f64> {
    (0..=n_steps).map(|i| (n_steps - i) as f64 / n_steps as f64).collect()
}

/// Standard-normal starting noise, one row per condition.
pub fn initial_noise(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, dim), |_| StandardNormal.sample(&mut rng))
}

/// Runs `n_steps` DDIM steps from seeded noise at `t = 1` down to `t = 0`,
/// guiding every step when `w != 1`.
pub fn sample<M: Denoise + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    n_steps: usize,
    conditions: &[Condition],
    w: GuidanceScale,
    seed: u64,
) -> Result<Array2<f64>> {
    let z = initial_noise(conditions.len(), model.data_dim(), seed);
    sample_from(model, schedule, z, n_steps, conditions, w)
}

/// Sampling loop starting from a caller-supplied `z_1`.
pub fn sample_from<M: Denoise + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    z_init: Array2<f64>,
    n_steps: usize,
    conditions: &[Condition],
    w: GuidanceScale,
) -> Result<Array2<f64>> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
    }
    if z_init.nrows() != conditions.len() {
        return Err(Error::Shape(format!(
            "{} noise rows but {} conditions",
            z_init.nrows(),
            conditions.len()
        )));
    }
    let grid = uniform_grid(n_steps);
    let mut state = LatentState::new(z_init, TimePoint::ONE)?;
    for (i, pair) in grid.windows(2).enumerate() {
        let t = vec![pair[0]; conditions.len()];
        let pred = guided_predict(model, &state.z, &t, conditions, w)?;
        ensure_finite(pred.value.iter(), || {
            format!("in model output at step {i} of {n_steps} (t = {})", pair[0])
        })?;
        state = ddim_step(schedule, &state, &pred, TimePoint::new(pair[1])?)?;
    }
    Ok(state.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tp(t: f64) -> TimePoint {
        TimePoint::new(t).unwrap()
    }

    /// Always predicts the same clean sample (a point-mass data set).
    struct Truth {
        x: Array2<f64>,
    }

    impl Denoise for Truth {
        fn data_dim(&self) -> usize {
            self.x.ncols()
        }
        fn predict(&self, _z: &Array2<f64>, _t: &[f64], _c: &[Condition]) -> Result<Prediction> {
            Ok(Prediction::new(PredictionKind::X, self.x.clone()))
        }
    }

    #[test]
    fn cfg_combine_examples() {
        let c = Prediction::new(PredictionKind::V, array![[2.0]]);
        let u = Prediction::new(PredictionKind::V, array![[1.0]]);
        assert_eq!(cfg_combine(&c, &u, GuidanceScale::new(1.0).unwrap()).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, GuidanceScale::new(0.0).unwrap()).unwrap(), u);
        let g = cfg_combine(&c, &u, GuidanceScale::new(3.0).unwrap()).unwrap();
        assert_eq!(g.value[[0, 0]], 4.0);
        let e = Prediction::new(PredictionKind::Epsilon, array![[1.0]]);
        assert!(matches!(
            cfg_combine(&c, &e, GuidanceScale::NONE),
            Err(Error::KindMismatch(..))
        ));
    }

    #[test]
    fn negative_guidance_rejected() {
        assert!(GuidanceScale::new(-0.5).is_err());
        assert!(GuidanceScale::new(f64::INFINITY).is_err());
    }

    #[test]
    fn ddim_step_examples() {
        let s = NoiseSchedule::Cosine;
        let x = array![[0.5, -1.0]];
        let e = array![[1.5, 0.25]];
        let z = s.diffuse(&x, &e, tp(0.6)).unwrap();
        let v = s.v_from_x_eps(&x, &e, tp(0.6)).unwrap();

        assert_eq!(ddim_step(&s, &z, &v, tp(0.6)).unwrap(), z);

        let next = ddim_step(&s, &z, &v, tp(0.25)).unwrap();
        let want = s.diffuse(&x, &e, tp(0.25)).unwrap();
        for (a, b) in next.z.iter().zip(want.z.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        let end = ddim_step(&s, &z, &v, tp(0.0)).unwrap();
        let xh = s.convert(&v, &z, PredictionKind::X).unwrap();
        assert_eq!(end.z, xh.value);

        assert!(ddim_step(&s, &z, &v, tp(0.7)).is_err());
    }

    #[test]
    fn epsilon_step_matches_textbook_update() {
        let s = NoiseSchedule::Cosine;
        let z = LatentState::new(array![[0.3, -0.8]], tp(0.7)).unwrap();
        let eps = Prediction::new(PredictionKind::Epsilon, array![[0.1, 0.9]]);
        let (a, sg) = s.alpha_sigma(tp(0.7));
        let (a2, s2) = s.alpha_sigma(tp(0.4));
        let next = ddim_step(&s, &z, &eps, tp(0.4)).unwrap();
        for j in 0..2 {
            let want = a2 * (z.z[[0, j]] - sg * eps.value[[0, j]]) / a + s2 * eps.value[[0, j]];
            assert_abs_diff_eq!(next.z[[0, j]], want, epsilon = 1e-14);
        }
    }

    #[test]
    fn one_step_returns_the_data_point() {
        let x = array![[1.25, -0.75]];
        let model = Truth { x: x.clone() };
        let out = sample(&model, &NoiseSchedule::Cosine, 1, &[Condition::Label(0)], GuidanceScale::NONE, 3).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn grid_is_exact_and_descending() {
        let g = uniform_grid(8);
        assert_eq!(g.first(), Some(&1.0));
        assert_eq!(g.last(), Some(&0.0));
        assert!(g.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(g[4], 0.5);
    }

    #[test]
    fn zero_steps_rejected() {
        let model = Truth { x: array![[0.0]] };
        assert!(sample(&model, &NoiseSchedule::Cosine, 0, &[Condition::Null], GuidanceScale::NONE, 0).is_err());
    }
}
