//! Step distillation of a `2N`-step teacher into an `N`-step student.
//!
//! For a student time `t` with `t' = t - 1/(2N)` and `t'' = t - 1/N`, the
//! teacher takes two DDIM steps `z_t -> z_t' -> z_t''`. The student must land
//! on `z_t''` in one step, which fixes its clean-sample estimate:
//!
//! ```text
//! x_target = (z_t'' - (sigma_t''/sigma_t) z_t) / (alpha_t'' - (sigma_t''/sigma_t) alpha_t)
//! ```
//!
//! The loss is `max(alpha_t^2/sigma_t^2, 1) * |x_student - x_target|^2`, with
//! every v-prediction optionally replaced by its guided version
//! `w v(c) - (w - 1) v(null)` on both networks.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaldata::{to_conditions, ConditionalDataset};
use crate::nets::{Denoiser, ParamSet, SkipMask};
use crate::optim::{AdamW, AdamWConfig};
use crate::sampler::{ddim_step_rows, guided_predict, Condition, Denoise, GuidanceScale};
use crate::schedule::{check_rows, lincomb_rows, LatentState, NoiseSchedule, Prediction, PredictionKind, TimePoint};
use crate::trainer::{denoise_loss_grad, NoiseDraw, Parameterization};

pub const SNR_CAP: f64 = 1e4;
pub const TARGET_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMode {
    Constant,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    Direct,
    Progressive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub cfg_range: [f64; 2],
    pub cfg_probability: f64,
    pub gamma_mode: GammaMode,
    pub gamma: f64,
    pub mode: DistillMode,
    pub seed: u64,
    pub batch_size: usize,
    /// Optimizer updates per distillation stage.
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub cond_dropout: f64,
    pub log_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            teacher_steps: 16,
            student_steps: 8,
            cfg_range: [2.0, 14.0],
            cfg_probability: 0.1,
            gamma_mode: GammaMode::Dynamic,
            gamma: 0.2,
            mode: DistillMode::Direct,
            seed: 0,
            batch_size: 256,
            iterations: 600,
            learning_rate: 5e-5,
            weight_decay: 0.01,
            cond_dropout: 0.1,
            log_every: 50,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.cfg_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
            return Err(Error::InvalidArgument(format!("cfg_range must satisfy 0 <= w_min <= w_max, got {lo}..{hi}")));
        }
        if !(0.0..=1.0).contains(&self.cfg_probability) {
            return Err(Error::InvalidArgument("cfg_probability must lie in [0, 1]".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidArgument("gamma must be >= 0".into()));
        }
        if self.student_steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::InvalidArgument("student_steps, batch_size and log_every must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        self.stage_plan().map(|_| ())
    }

    /// `(teacher, student)` step counts per stage.
    pub fn stage_plan(&self) -> Result<Vec<(usize, usize)>> {
        check_grid_nesting(self.teacher_steps, self.student_steps)?;
        match self.mode {
            DistillMode::Direct => {
                if self.teacher_steps != 2 * self.student_steps {
                    return Err(Error::GridMismatch(format!(
                        "direct distillation needs teacher_steps = 2 * student_steps, got {} and {}",
                        self.teacher_steps, self.student_steps
                    )));
                }
                Ok(vec![(self.teacher_steps, self.student_steps)])
            }
            DistillMode::Progressive => {
                let mut plan = Vec::new();
                let mut n = self.teacher_steps;
                while n > self.student_steps {
                    if n % 2 != 0 {
                        return Err(Error::GridMismatch(format!(
                            "cannot halve {n} steps on the way to {}",
                            self.student_steps
                        )));
                    }
                    plan.push((n, n / 2));
                    n /= 2;
                }
                if n != self.student_steps || plan.is_empty() {
                    return Err(Error::GridMismatch(format!(
                        "{} is not {} times a power of two",
                        self.teacher_steps, self.student_steps
                    )));
                }
                Ok(plan)
            }
        }
    }
}

/// Every student grid point `k / n_s` is a teacher grid point `j / n_t`,
/// checked in integer arithmetic.
pub fn check_grid_nesting(teacher_steps: usize, student_steps: usize) -> Result<()> {
    if student_steps == 0 || teacher_steps == 0 {
        return Err(Error::GridMismatch("step counts must be >= 1".into()));
    }
    for k in 0..=student_steps {
        if (k * teacher_steps) % student_steps != 0 {
            return Err(Error::GridMismatch(format!(
                "student time {k}/{student_steps} is not on the {teacher_steps}-step teacher grid"
            )));
        }
    }
    Ok(())
}

/// `(t, t', t'')` for student step `k` (counted from `t = 1`).
pub fn time_triple(student_steps: usize, k: usize) -> (f64, f64, f64) {
    let n = student_steps as f64;
    let t = (student_steps - k) as f64 / n;
    (t, t - 1.0 / (2.0 * n), t - 1.0 / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillBatchOutcome {
    pub loss_total: f64,
    pub loss_dstl: f64,
    pub loss_ori: f64,
    pub gamma_eff: f64,
    pub used_cfg: bool,
    pub w_sampled: Option<f64>,
}

/// One training batch: data, conditions, student-grid times and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch {
    pub x: Array2<f64>,
    pub cond: Vec<Condition>,
    pub t: Vec<f64>,
    pub t_mid: Vec<f64>,
    pub t_next: Vec<f64>,
    pub eps: Array2<f64>,
    /// Independent noise for the original denoising loss.
    pub ori: NoiseDraw,
}

impl DistillBatch {
    pub fn sample<R: Rng + ?Sized>(
        data: &ConditionalDataset,
        student_steps: usize,
        batch_size: usize,
        cond_dropout: f64,
        rng: &mut R,
    ) -> Self {
        let (x, labels) = data.sample_batch(batch_size, rng);
        let cond = to_conditions(&labels)
            .into_iter()
            .map(|c| if rng.gen::<f64>() < cond_dropout { Condition::Null } else { c })
            .collect();
        let mut t = Vec::with_capacity(batch_size);
        let mut t_mid = Vec::with_capacity(batch_size);
        let mut t_next = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let (a, b, c) = time_triple(student_steps, rng.gen_range(0..student_steps));
            t.push(a);
            t_mid.push(b);
            t_next.push(c);
        }
        let eps = NoiseDraw::sample(rng, batch_size, x.ncols()).eps;
        let ori = NoiseDraw::sample(rng, batch_size, x.ncols());
        DistillBatch { x, cond, t, t_mid, t_next, eps, ori }
    }

    pub fn z_t(&self, schedule: &NoiseSchedule) -> Result<Array2<f64>> {
        schedule.diffuse_rows(&self.x, &self.eps, &self.t)
    }
}

fn guided<M: Denoise + ?Sized>(
    model: &M,
    z: &Array2<f64>,
    t: &[f64],
    cond: &[Condition],
    guidance: Option<GuidanceScale>,
) -> Result<Prediction> {
    match guidance {
        Some(w) => guided_predict(model, z, t, cond, w),
        None => model.predict(z, t, cond),
    }
}

/// Two teacher DDIM steps `t -> t' -> t''` per row. Each step computes
/// `x_hat = alpha z - sigma v`, `eps_hat = sigma z + alpha v` and lands on
/// `alpha' x_hat + sigma' eps_hat`.
pub fn teacher_two_steps<M: Denoise + ?Sized>(
    teacher: &M,
    schedule: &NoiseSchedule,
    z: &Array2<f64>,
    t: &[f64],
    t_mid: &[f64],
    t_next: &[f64],
    cond: &[Condition],
    guidance: Option<GuidanceScale>,
) -> Result<Array2<f64>> {
    check_rows(z, t)?;
    check_rows(z, t_mid)?;
    check_rows(z, t_next)?;
    for i in 0..t.len() {
        if !(0.0 <= t_next[i] && t_next[i] < t_mid[i] && t_mid[i] < t[i] && t[i] <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= t'' < t' < t <= 1, row {i} has ({}, {}, {})",
                t[i], t_mid[i], t_next[i]
            )));
        }
    }
    let step = |z: &Array2<f64>, from: &[f64], to: &[f64]| -> Result<Array2<f64>> {
        let v = guided(teacher, z, from, cond, guidance)?;
        if v.kind != PredictionKind::V {
            return Err(Error::KindMismatch(PredictionKind::V, v.kind));
        }
        let out = ddim_step_rows(schedule, z, from, &v, to)?;
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: format!("in teacher step from t = {}", from[0]) });
        }
        Ok(out)
    };
    let z_mid = step(z, t, t_mid)?;
    step(&z_mid, t_mid, t_next)
}

/// Single-time form of [`teacher_two_steps`].
pub fn teacher_two_steps_state<M: Denoise + ?Sized>(
    teacher: &M,
    schedule: &NoiseSchedule,
    z: &LatentState,
    t_mid: TimePoint,
    t_next: TimePoint,
    cond: &[Condition],
    guidance: Option<GuidanceScale>,
) -> Result<LatentState> {
    let n = z.z.nrows();
    let out = teacher_two_steps(
        teacher,
        schedule,
        &z.z,
        &vec![z.t.get(); n],
        &vec![t_mid.get(); n],
        &vec![t_next.get(); n],
        cond,
        guidance,
    )?;
    LatentState::new(out, t_next)
}

/// Clean-sample estimate that a one-step student must output to land on `z_tpp`.
pub fn vanilla_target(
    schedule: &NoiseSchedule,
    z_t: &Array2<f64>,
    z_tpp: &Array2<f64>,
    t: &[f64],
    t_next: &[f64],
) -> Result<Array2<f64>> {
    check_rows(z_t, t)?;
    check_rows(z_tpp, t_next)?;
    let c = schedule.row_coeffs(t)?;
    let n = schedule.row_coeffs(t_next)?;
    let mut ratio = Array1::zeros(t.len());
    let mut inv_denom = Array1::zeros(t.len());
    for i in 0..t.len() {
        if c.sigma[i] <= 0.0 {
            return Err(Error::Singular(format!("sigma_t = 0 at t = {}", t[i])));
        }
        ratio[i] = n.sigma[i] / c.sigma[i];
        let denom = n.alpha[i] - ratio[i] * c.alpha[i];
        if denom.abs() <= TARGET_EPS {
            return Err(Error::Singular(format!(
                "alpha_t'' - (sigma_t''/sigma_t) alpha_t = {denom} for t = {}, t'' = {}",
                t[i], t_next[i]
            )));
        }
        inv_denom[i] = 1.0 / denom;
    }
    let numer = lincomb_rows(&Array1::ones(t.len()), z_tpp, &(-&ratio), z_t);
    Ok(lincomb_rows(&inv_denom, &numer, &Array1::zeros(t.len()), &numer))
}

/// Where a one-step DDIM jump `t -> t''` lands given a clean estimate `x_hat`:
/// `alpha'' x_hat + sigma'' (z_t - alpha x_hat) / sigma`.
pub fn student_landing(
    schedule: &NoiseSchedule,
    z_t: &Array2<f64>,
    x_hat: &Array2<f64>,
    t: &[f64],
    t_next: &[f64],
) -> Result<Array2<f64>> {
    let c = schedule.row_coeffs(t)?;
    let n = schedule.row_coeffs(t_next)?;
    let mut out = Array2::zeros(z_t.raw_dim());
    for i in 0..t.len() {
        if c.sigma[i] <= 0.0 {
            return Err(Error::Singular(format!("sigma_t = 0 at t = {}", t[i])));
        }
        let r = n.sigma[i] / c.sigma[i];
        let mut row = out.row_mut(i);
        row.assign(&(&x_hat.row(i) * (n.alpha[i] - r * c.alpha[i]) + &z_t.row(i) * r));
    }
    Ok(out)
}

/// `min(max(alpha_t^2 / sigma_t^2, 1), 1e4)`.
pub fn snr_weight(schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    let (a, s) = schedule.alpha_sigma_at(t)?;
    if s == 0.0 {
        return Err(Error::Singular(format!("SNR weight undefined at sigma = 0 (t = {t})")));
    }
    Ok(((a * a) / (s * s)).max(1.0).min(SNR_CAP))
}

/// Per-row weights and x-space targets from the teacher.
fn teacher_targets<T: Denoise + ?Sized>(
    teacher: &T,
    schedule: &NoiseSchedule,
    batch: &DistillBatch,
    z_t: &Array2<f64>,
    guidance: Option<GuidanceScale>,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let z_tpp = teacher_two_steps(teacher, schedule, z_t, &batch.t, &batch.t_mid, &batch.t_next, &batch.cond, guidance)?;
    let target = vanilla_target(schedule, z_t, &z_tpp, &batch.t, &batch.t_next)?;
    let weights = batch.t.iter().map(|&t| snr_weight(schedule, t)).collect::<Result<Vec<_>>>()?;
    Ok((target, weights))
}

/// `mean_b[ weight_b * mean_d (x_hat - target)^2 ]` and its gradient w.r.t. `x_hat`.
fn weighted_mse(x_hat: &Array2<f64>, target: &Array2<f64>, weights: &[f64]) -> (f64, Array2<f64>) {
    let (n, d) = (x_hat.nrows() as f64, x_hat.ncols() as f64);
    let mut r = x_hat - target;
    let mut loss = 0.0;
    for (mut row, &w) in r.rows_mut().into_iter().zip(weights) {
        loss += w * row.mapv(|e| e * e).sum() / d;
        row *= 2.0 * w / (n * d);
    }
    (loss / n, r)
}

fn student_x_hat<S: Denoise + ?Sized>(
    student: &S,
    schedule: &NoiseSchedule,
    z_t: &Array2<f64>,
    batch: &DistillBatch,
    guidance: Option<GuidanceScale>,
) -> Result<Array2<f64>> {
    let v = guided(student, z_t, &batch.t, &batch.cond, guidance)?;
    Ok(schedule.convert_rows(&v, z_t, &batch.t, PredictionKind::X)?.value)
}

/// Distillation loss value for any pair of models.
pub fn dstl_loss<S: Denoise + ?Sized, T: Denoise + ?Sized>(
    student: &S,
    teacher: &T,
    schedule: &NoiseSchedule,
    batch: &DistillBatch,
    guidance: Option<GuidanceScale>,
) -> Result<f64> {
    let z_t = batch.z_t(schedule)?;
    let (target, weights) = teacher_targets(teacher, schedule, batch, &z_t, guidance)?;
    let x_hat = student_x_hat(student, schedule, &z_t, batch, guidance)?;
    Ok(weighted_mse(&x_hat, &target, &weights).0)
}

/// Distillation loss and its gradient for a trainable student.
pub fn dstl_loss_grad<T: Denoise + ?Sized>(
    student: &Denoiser,
    teacher: &T,
    schedule: &NoiseSchedule,
    batch: &DistillBatch,
    guidance: Option<GuidanceScale>,
) -> Result<(f64, Denoiser)> {
    let z_t = batch.z_t(schedule)?;
    let (target, weights) = teacher_targets(teacher, schedule, batch, &z_t, guidance)?;
    let n = z_t.nrows();
    let c = schedule.row_coeffs(&batch.t)?;
    let mask = SkipMask::execute_all();
    let mut grad = student.zeros_like();
    let w = guidance.filter(|w| !w.is_identity()).map(GuidanceScale::get);
    let loss = match w {
        None => {
            let (v, tape) = student.forward_tape(&z_t, &batch.t, &batch.cond, &mask)?;
            let x_hat = lincomb_rows(&c.alpha, &z_t, &(-&c.sigma), &v.value);
            let (loss, dx) = weighted_mse(&x_hat, &target, &weights);
            let dv = lincomb_rows(&Array1::zeros(n), &dx, &(-&c.sigma), &dx);
            student.backward(&tape, &dv, &mut grad);
            loss
        }
        Some(w) => {
            let zz = concatenate![Axis(0), z_t.view(), z_t.view()];
            let tt: Vec<f64> = batch.t.iter().chain(&batch.t).copied().collect();
            let cc: Vec<Condition> =
                batch.cond.iter().copied().chain(std::iter::repeat(Condition::Null).take(n)).collect();
            let (v, tape) = student.forward_tape(&zz, &tt, &cc, &mask)?;
            let vc = v.value.slice(s![..n, ..]).to_owned();
            let vu = v.value.slice(s![n.., ..]).to_owned();
            let vg = &vc * w - &vu * (w - 1.0);
            let x_hat = lincomb_rows(&c.alpha, &z_t, &(-&c.sigma), &vg);
            let (loss, dx) = weighted_mse(&x_hat, &target, &weights);
            let dvg = lincomb_rows(&Array1::zeros(n), &dx, &(-&c.sigma), &dx);
            let dv = concatenate![Axis(0), (&dvg * w).view(), (&dvg * (-(w - 1.0))).view()];
            student.backward(&tape, &dv, &mut grad);
            loss
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: "in distillation loss".into() });
    }
    Ok((loss, grad))
}

fn outcome(loss_dstl: f64, used_cfg: bool, w_sampled: Option<f64>) -> DistillBatchOutcome {
    DistillBatchOutcome { loss_total: loss_dstl, loss_dstl, loss_ori: 0.0, gamma_eff: 0.0, used_cfg, w_sampled }
}

/// Unguided distillation loss.
pub fn vanilla_dstl_loss<S: Denoise + ?Sized, T: Denoise + ?Sized>(
    student: &S,
    teacher: &T,
    schedule: &NoiseSchedule,
    batch: &DistillBatch,
) -> Result<DistillBatchOutcome> {
    Ok(outcome(dstl_loss(student, teacher, schedule, batch, None)?, false, None))
}

/// Draws `w ~ U[w_min, w_max]`; a degenerate range returns `w_min` without touching `rng`.
pub fn sample_guidance<R: Rng + ?Sized>(range: [f64; 2], rng: &mut R) -> Result<GuidanceScale> {
    let [lo, hi] = range;
    if lo > hi {
        return Err(Error::InvalidArgument(format!("cfg range {lo}..{hi} is empty")));
    }
    GuidanceScale::new(if lo == hi { lo } else { rng.gen_range(lo..=hi) })
}

/// Guided distillation loss with one `w` shared by teacher and student.
pub fn cfg_dstl_loss<S: Denoise + ?Sized, T: Denoise + ?Sized, R: Rng + ?Sized>(
    student: &S,
    teacher: &T,
    schedule: &NoiseSchedule,
    batch: &DistillBatch,
    config: &DistillConfig,
    rng: &mut R,
) -> Result<DistillBatchOutcome> {
    let w = sample_guidance(config.cfg_range, rng)?;
    Ok(outcome(dstl_loss(student, teacher, schedule, batch, Some(w))?, true, Some(w.get())))
}

/// `gamma_eff` for the current batch.
pub fn effective_gamma(config: &DistillConfig, loss_dstl: f64, loss_ori: f64) -> f64 {
    match config.gamma_mode {
        GammaMode::Constant => config.gamma,
        GammaMode::Dynamic => config.gamma * loss_dstl / loss_ori.max(1e-8),
    }
}

/// `L_dstl + gamma_eff * L_ori` with a per-batch Bernoulli(p) choice between
/// the guided and unguided distillation losses. Returns the student gradient.
pub fn total_loss<T: Denoise + ?Sized, R: Rng + ?Sized>(
    student: &Denoiser,
    teacher: &T,
    schedule: &NoiseSchedule,
    batch: &DistillBatch,
    config: &DistillConfig,
    rng: &mut R,
) -> Result<(DistillBatchOutcome, Denoiser)> {
    let used_cfg = rng.gen::<f64>() < config.cfg_probability;
    let w = if used_cfg { Some(sample_guidance(config.cfg_range, rng)?) } else { None };
    let (loss_dstl, mut grad) = dstl_loss_grad(student, teacher, schedule, batch, w)?;
    let (loss_ori, grad_ori) = denoise_loss_grad(
        student,
        schedule,
        &batch.x,
        &batch.cond,
        &batch.ori,
        Parameterization::V,
        &SkipMask::execute_all(),
    )?;
    let gamma_eff = effective_gamma(config, loss_dstl, loss_ori);
    grad.scaled_add_params(gamma_eff, &grad_ori);
    let out = DistillBatchOutcome {
        loss_total: loss_dstl + gamma_eff * loss_ori,
        loss_dstl,
        loss_ori,
        gamma_eff,
        used_cfg,
        w_sampled: w.map(GuidanceScale::get),
    };
    Ok((out, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillLogRow {
    pub stage: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_dstl: f64,
    pub loss_ori: f64,
    pub used_cfg: bool,
    pub w: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub student: Denoiser,
    pub log: Vec<DistillLogRow>,
}

/// Trains `student` against `teacher` for one `(2N -> N)` stage.
pub fn distill_stage<T: Denoise + ?Sized>(
    teacher: &T,
    mut student: Denoiser,
    data: &ConditionalDataset,
    config: &DistillConfig,
    student_steps: usize,
    stage: usize,
) -> Result<StageResult> {
    let schedule = NoiseSchedule::Cosine;
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stage as u64);
    let mut log = Vec::new();
    for step in 1..=config.iterations {
        let batch = DistillBatch::sample(data, student_steps, config.batch_size, config.cond_dropout, &mut rng);
        let (o, grad) = total_loss(&student, teacher, &schedule, &batch, config, &mut rng)?;
        opt.step(&mut student, &grad);
        if step == 1 || step % config.log_every == 0 || step == config.iterations {
            log.push(DistillLogRow {
                stage,
                step,
                loss_total: o.loss_total,
                loss_dstl: o.loss_dstl,
                loss_ori: o.loss_ori,
                used_cfg: o.used_cfg,
                w: o.w_sampled,
            });
        }
    }
    Ok(StageResult { teacher_steps: 2 * student_steps, student_steps, student, log })
}

/// Direct: one `2N -> N` stage. Progressive: halve repeatedly, each stage's
/// student becoming the next teacher and the next student's initialization.
/// Returns one result per stage; the last holds the final student.
pub fn distill(
    teacher: &Denoiser,
    student_init: Denoiser,
    data: &ConditionalDataset,
    config: &DistillConfig,
) -> Result<Vec<StageResult>> {
    config.validate()?;
    let plan = config.stage_plan()?;
    let mut results: Vec<StageResult> = Vec::with_capacity(plan.len());
    let mut student = student_init;
    for (i, &(_, n_s)) in plan.iter().enumerate() {
        let r = match results.last() {
            None => distill_stage(teacher, student, data, config, n_s, i)?,
            Some(prev) => {
                let t = prev.student.clone();
                distill_stage(&t, prev.student.clone(), data, config, n_s, i)?
            }
        };
        student = r.student.clone();
        results.push(r);
    }
    drop(student);
    Ok(results)
}

/// Held-out agreement between a student's one-step jump and the teacher's
/// two-step landing, averaged over the student grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandingReport {
    pub student_mse: f64,
    /// Same measure with the teacher as its own one-step student.
    pub teacher_floor: f64,
}

pub fn landing_report<S: Denoise + ?Sized, T: Denoise + ?Sized>(
    student: &S,
    teacher: &T,
    data: &ConditionalDataset,
    student_steps: usize,
    n: usize,
    seed: u64,
) -> Result<LandingReport> {
    let schedule = NoiseSchedule::Cosine;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = DistillBatch::sample(data, student_steps, n, 0.0, &mut rng);
    let z_t = batch.z_t(&schedule)?;
    let z_tpp = teacher_two_steps(teacher, &schedule, &z_t, &batch.t, &batch.t_mid, &batch.t_next, &batch.cond, None)?;
    let mse = |m: &dyn Denoise| -> Result<f64> {
        let x_hat = student_x_hat(m, &schedule, &z_t, &batch, None)?;
        let landed = student_landing(&schedule, &z_t, &x_hat, &batch.t, &batch.t_next)?;
        Ok((&landed - &z_tpp).mapv(|e| e * e).mean().unwrap_or(0.0))
    };
    Ok(LandingReport { student_mse: mse(&student)?, teacher_floor: mse(&teacher)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ArchitectureGenome, DenoiserConfig};
    use crate::sampler::GaussianMixture;

    fn point_mass_oracle() -> (ConditionalDataset, crate::sampler::AnalyticDenoiser) {
        let d = ConditionalDataset::new(
            vec![GaussianMixture::point_mass(vec![0.5, -1.0]), GaussianMixture::point_mass(vec![-0.3, 0.2])],
            0,
        )
        .unwrap();
        let o = d.oracle(NoiseSchedule::Cosine);
        (d, o)
    }

    #[test]
    fn snr_weight_examples() {
        let s = NoiseSchedule::Cosine;
        assert!((snr_weight(&s, 0.5).unwrap() - 1.0).abs() < 1e-12);
        // alpha^2/sigma^2 = 4 where tan(pi t / 2) = 1/2
        let t4 = 2.0 * (0.5f64).atan() / std::f64::consts::PI;
        assert!((snr_weight(&s, t4).unwrap() - 4.0).abs() < 1e-9);
        let t_quarter = 2.0 * 2f64.atan() / std::f64::consts::PI;
        assert_eq!(snr_weight(&s, t_quarter).unwrap(), 1.0);
        assert!(snr_weight(&s, 0.0).is_err());
        assert_eq!(snr_weight(&s, 1e-9).unwrap(), SNR_CAP);
    }

    #[test]
    fn oracle_teacher_is_exact_on_point_masses() {
        let (_, o) = point_mass_oracle();
        let s = NoiseSchedule::Cosine;
        let x = ndarray::array![[0.5, -1.0], [-0.3, 0.2]];
        let eps = ndarray::array![[0.3, 1.2], [-0.7, 0.1]];
        let cond = [Condition::Label(0), Condition::Label(1)];
        let (t, t1, t2) = ([0.75, 1.0], [0.6875, 0.9375], [0.625, 0.875]);
        let z = s.diffuse_rows(&x, &eps, &t).unwrap();
        let got = teacher_two_steps(&o, &s, &z, &t, &t1, &t2, &cond, None).unwrap();
        let want = s.diffuse_rows(&x, &eps, &t2).unwrap();
        assert!((&got - &want).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn degenerate_times_rejected() {
        let (_, o) = point_mass_oracle();
        let z = ndarray::array![[0.0, 0.0]];
        let c = [Condition::Label(0)];
        assert!(teacher_two_steps(&o, &NoiseSchedule::Cosine, &z, &[0.5], &[0.25], &[0.25], &c, None).is_err());
        let s = NoiseSchedule::Cosine;
        assert!(matches!(vanilla_target(&s, &z, &z, &[0.5], &[0.5]), Err(Error::Singular(_))));
    }

    #[test]
    fn guidance_one_matches_unguided() {
        let (_, o) = point_mass_oracle();
        let s = NoiseSchedule::Cosine;
        let z = ndarray::array![[0.2, 0.4]];
        let c = [Condition::Label(1)];
        let a = teacher_two_steps(&o, &s, &z, &[0.5], &[0.4], &[0.3], &c, None).unwrap();
        let b = teacher_two_steps(&o, &s, &z, &[0.5], &[0.4], &[0.3], &c, Some(GuidanceScale::NONE)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn consistent_x_hat_is_recovered() {
        let s = NoiseSchedule::Cosine;
        let x_hat = ndarray::array![[0.9, -0.2, 0.1]];
        let z = ndarray::array![[0.4, 0.3, -1.1]];
        let (t, t1, t2) = ([0.8], [0.7], [0.6]);
        // both teacher steps predict the same x_hat
        let eps_at = |z: &Array2<f64>, t: f64| {
            let (a, sg) = s.alpha_sigma_at(t).unwrap();
            (z - &(&x_hat * a)) / sg
        };
        let step = |z: &Array2<f64>, from: f64, to: f64| {
            let (a, sg) = s.alpha_sigma_at(to).unwrap();
            &x_hat * a + &(eps_at(z, from) * sg)
        };
        let z_tpp = step(&step(&z, t[0], t1[0]), t1[0], t2[0]);
        let target = vanilla_target(&s, &z, &z_tpp, &t, &t2).unwrap();
        assert!((&target - &x_hat).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn point_mass_oracle_student_has_zero_loss() {
        let (d, o) = point_mass_oracle();
        let s = NoiseSchedule::Cosine;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = DistillBatch::sample(&d, 4, 64, 0.0, &mut rng);
        assert!(vanilla_dstl_loss(&o, &o, &s, &batch).unwrap().loss_dstl < 1e-20);
        let cfg = DistillConfig { cfg_range: [2.0, 14.0], ..Default::default() };
        let guided = cfg_dstl_loss(&o, &o, &s, &batch, &cfg, &mut rng).unwrap();
        let w = guided.w_sampled.unwrap();
        assert!(guided.used_cfg && (2.0..=14.0).contains(&w) && guided.loss_dstl.is_finite());
    }

    #[test]
    fn grad_matches_value_and_finite_differences() {
        let (d, o) = point_mass_oracle();
        let g = ArchitectureGenome::uniform([4, 6, 8], 1, 1).unwrap();
        let cfg = DenoiserConfig { data_dim: 2, num_classes: 2, time_features: 4, temb_dim: 5, tokens: 2, token_dim: 3, attn_dim: 4 };
        let m = Denoiser::build(&g, cfg, 4).unwrap();
        let s = NoiseSchedule::Cosine;
        let batch = DistillBatch::sample(&d, 4, 6, 0.3, &mut ChaCha8Rng::seed_from_u64(8));
        for w in [None, Some(GuidanceScale::new(3.5).unwrap())] {
            let (loss, grad) = dstl_loss_grad(&m, &o, &s, &batch, w).unwrap();
            assert!((loss - dstl_loss(&m, &o, &s, &batch, w).unwrap()).abs() < 1e-12);

            let flat = m.flatten();
            let gf = grad.flatten();
            let h = 1e-5;
            for i in (0..flat.len()).step_by(37) {
                let mut v = flat.clone();
                v[i] += h;
                let mut a = m.clone();
                a.assign_flat(&v);
                v[i] -= 2.0 * h;
                let mut b = m.clone();
                b.assign_flat(&v);
                let fd = (dstl_loss(&a, &o, &s, &batch, w).unwrap() - dstl_loss(&b, &o, &s, &batch, w).unwrap()) / (2.0 * h);
                assert!((fd - gf[i]).abs() <= 1e-3 * fd.abs().max(gf[i].abs()).max(1e-7), "{i}: {fd} vs {}", gf[i]);
            }
        }
    }

    /// The oracle with every clean estimate shifted by a fixed `delta`.
    struct Shifted<'a> {
        inner: &'a crate::sampler::AnalyticDenoiser,
        delta: Vec<f64>,
    }

    impl Denoise for Shifted<'_> {
        fn data_dim(&self) -> usize {
            self.inner.data_dim()
        }
        fn predict(&self, z: &Array2<f64>, t: &[f64], cond: &[Condition]) -> Result<Prediction> {
            let mut v = self.inner.predict(z, t, cond)?;
            let c = NoiseSchedule::Cosine.row_coeffs(t)?;
            for (i, mut row) in v.value.rows_mut().into_iter().enumerate() {
                for (e, d) in row.iter_mut().zip(&self.delta) {
                    *e -= d / c.sigma[i];
                }
            }
            Ok(v)
        }
    }

    #[test]
    fn single_class_guided_oracle_is_consistent() {
        let d = ConditionalDataset::new(vec![GaussianMixture::point_mass(vec![0.7, -0.4])], 2).unwrap();
        let o = d.oracle(NoiseSchedule::Cosine);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = DistillBatch::sample(&d, 8, 64, 0.0, &mut rng);
        let cfg = DistillConfig::default();
        let out = cfg_dstl_loss(&o, &o, &NoiseSchedule::Cosine, &batch, &cfg, &mut rng).unwrap();
        assert!(out.loss_dstl < 1e-18, "{}", out.loss_dstl);
    }

    #[test]
    fn shifted_student_loss_is_weighted_square() {
        let (d, o) = point_mass_oracle();
        let s = NoiseSchedule::Cosine;
        let delta = vec![0.1, -0.25];
        let student = Shifted { inner: &o, delta: delta.clone() };
        let batch = DistillBatch::sample(&d, 8, 200, 0.0, &mut ChaCha8Rng::seed_from_u64(5));
        let sq = delta.iter().map(|x| x * x).sum::<f64>() / 2.0;
        let weights: Vec<f64> = batch.t.iter().map(|&t| snr_weight(&s, t).unwrap()).collect();
        let want = weights.iter().map(|w| w * sq).sum::<f64>() / 200.0;
        let got = vanilla_dstl_loss(&student, &o, &s, &batch).unwrap().loss_dstl;
        assert!((got - want).abs() < 1e-10 * want);
        // the unweighted mean differs from the weighted one by exactly the weight average
        let mean_w = weights.iter().sum::<f64>() / 200.0;
        assert!((got / mean_w - sq).abs() < 1e-10);
    }

    #[test]
    fn target_solves_landing_equation_by_bisection() {
        let s = NoiseSchedule::Cosine;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = rng.gen_range(0.2..1.0);
            let tpp = t - rng.gen_range(0.05..0.19);
            let z = ndarray::array![[rng.gen_range(-2.0..2.0)]];
            let zpp = ndarray::array![[rng.gen_range(-2.0..2.0)]];
            let target = vanilla_target(&s, &z, &zpp, &[t], &[tpp]).unwrap()[[0, 0]];
            let f = |x: f64| student_landing(&s, &z, &ndarray::array![[x]], &[t], &[tpp]).unwrap()[[0, 0]] - zpp[[0, 0]];
            let (mut lo, mut hi) = (-1e3, 1e3);
            let up = f(hi) > f(lo);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if (f(mid) > 0.0) == up {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            assert!((0.5 * (lo + hi) - target).abs() < 1e-8 * target.abs().max(1.0));
        }
    }

    #[test]
    fn total_loss_dispatch_and_dynamic_gamma() {
        let (d, o) = point_mass_oracle();
        let g = ArchitectureGenome::uniform([4, 6, 8], 1, 1).unwrap();
        let student = Denoiser::build(&g, DenoiserConfig::new(2, 2), 1).unwrap();
        let s = NoiseSchedule::Cosine;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (p, expect) in [(0.0, false), (1.0, true)] {
            let cfg = DistillConfig { cfg_probability: p, ..Default::default() };
            for _ in 0..20 {
                let batch = DistillBatch::sample(&d, 8, 16, 0.1, &mut rng);
                let (out, _) = total_loss(&student, &o, &s, &batch, &cfg, &mut rng).unwrap();
                assert_eq!(out.used_cfg, expect);
                assert_eq!(out.w_sampled.is_some(), expect);
                assert!((out.gamma_eff * out.loss_ori / out.loss_dstl - 0.2).abs() < 1e-9);
                assert!((out.loss_total - out.loss_dstl - out.gamma_eff * out.loss_ori).abs() < 1e-9);
            }
        }
        let cfg = DistillConfig { gamma_mode: GammaMode::Constant, gamma: 0.3, ..Default::default() };
        let batch = DistillBatch::sample(&d, 8, 16, 0.1, &mut rng);
        assert_eq!(total_loss(&student, &o, &s, &batch, &cfg, &mut rng).unwrap().0.gamma_eff, 0.3);
    }

    #[test]
    fn progressive_records_every_stage() {
        let (d, _) = point_mass_oracle();
        let g = ArchitectureGenome::uniform([4, 6, 8], 1, 1).unwrap();
        let teacher = Denoiser::build(&g, DenoiserConfig::new(2, 2), 1).unwrap();
        let cfg = DistillConfig {
            teacher_steps: 32,
            student_steps: 8,
            mode: DistillMode::Progressive,
            batch_size: 8,
            iterations: 3,
            ..Default::default()
        };
        let stages = distill(&teacher, teacher.clone(), &d, &cfg).unwrap();
        assert_eq!(stages.iter().map(|r| (r.teacher_steps, r.student_steps)).collect::<Vec<_>>(), vec![(32, 16), (16, 8)]);
        assert!(stages.iter().all(|r| r.log.iter().all(|row| row.loss_total.is_finite())));
        let direct = DistillConfig { mode: DistillMode::Direct, ..cfg };
        assert!(matches!(distill(&teacher, teacher.clone(), &d, &direct), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn stage_plans() {
        let direct = DistillConfig { teacher_steps: 16, student_steps: 8, ..Default::default() };
        assert_eq!(direct.stage_plan().unwrap(), vec![(16, 8)]);
        let bad = DistillConfig { teacher_steps: 32, ..direct.clone() };
        assert!(matches!(bad.stage_plan(), Err(Error::GridMismatch(_))));
        let prog = DistillConfig { teacher_steps: 32, mode: DistillMode::Progressive, ..direct.clone() };
        assert_eq!(prog.stage_plan().unwrap(), vec![(32, 16), (16, 8)]);
        let odd = DistillConfig { teacher_steps: 24, mode: DistillMode::Progressive, ..direct };
        assert!(odd.stage_plan().is_err());
        assert!(check_grid_nesting(12, 8).is_err());
        assert!(check_grid_nesting(16, 8).is_ok());
    }

    #[test]
    fn time_triples() {
        assert_eq!(time_triple(8, 0), (1.0, 1.0 - 1.0 / 16.0, 1.0 - 1.0 / 8.0));
        assert_eq!(time_triple(8, 7).2, 0.0);
    }
}
