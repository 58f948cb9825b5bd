//! Denoising training: the per-sample noise/velocity regression loss, the
//! AdamW loop around it, and the optional stochastic block skipping that makes
//! a model tolerant to block removal.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaldata::{to_conditions, ConditionalDataset};
use crate::nets::{BlockKey, Denoiser, SkipConfig, SkipMask};
use crate::optim::{AdamW, AdamWConfig};
use crate::sampler::{Condition, Denoise};
use crate::schedule::{check_same_shape, NoiseSchedule, PredictionKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Epsilon,
    V,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub parameterization: Parameterization,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub skip: Option<SkipConfig>,
    pub seed: u64,
    /// Chance of replacing a label with the null condition.
    pub cond_dropout: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            parameterization: Parameterization::V,
            batch_size: 256,
            steps: 2000,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            skip: None,
            seed: 0,
            cond_dropout: 0.1,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::InvalidArgument("steps, batch_size and log_every must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::InvalidArgument("cond_dropout must lie in [0, 1]".into()));
        }
        if let Some(s) = &self.skip {
            s.validate()?;
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// Per-row diffusion times and Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<f64>,
    pub eps: Array2<f64>,
}

impl NoiseDraw {
    /// `t ~ U[0, 1]`, `eps ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> Self {
        let t = (0..n).map(|_| rng.gen::<f64>()).collect();
        let eps = Array2::from_shape_fn((n, dim), |_| StandardNormal.sample(rng));
        NoiseDraw { t, eps }
    }
}

fn regression_target(
    schedule: &NoiseSchedule,
    x: &Array2<f64>,
    noise: &NoiseDraw,
    param: Parameterization,
) -> Result<Array2<f64>> {
    match param {
        Parameterization::Epsilon => Ok(noise.eps.clone()),
        Parameterization::V => schedule.v_from_x_eps_rows(x, &noise.eps, &noise.t),
    }
}

/// Mean over all entries of `(prediction - target)^2`, where the model's
/// output is expressed in the chosen parameterization first.
pub fn denoise_loss<M: Denoise + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x: &Array2<f64>,
    cond: &[Condition],
    noise: &NoiseDraw,
    param: Parameterization,
) -> Result<f64> {
    check_same_shape(x, &noise.eps, "denoise_loss")?;
    let z = schedule.diffuse_rows(x, &noise.eps, &noise.t)?;
    let pred = model.predict(&z, &noise.t, cond)?;
    let kind = match param {
        Parameterization::Epsilon => PredictionKind::Epsilon,
        Parameterization::V => PredictionKind::V,
    };
    let pred = schedule.convert_rows(&pred, &z, &noise.t, kind)?;
    let target = regression_target(schedule, x, noise, param)?;
    let loss = (&pred.value - &target).mapv(|e| e * e).mean().unwrap_or(0.0);
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: "in denoising loss".into() });
    }
    Ok(loss)
}

/// `denoise_loss` for a `Denoiser` together with its parameter gradient.
pub fn denoise_loss_grad(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    x: &Array2<f64>,
    cond: &[Condition],
    noise: &NoiseDraw,
    param: Parameterization,
    mask: &SkipMask,
) -> Result<(f64, Denoiser)> {
    check_same_shape(x, &noise.eps, "denoise_loss_grad")?;
    let z = schedule.diffuse_rows(x, &noise.eps, &noise.t)?;
    let (v, tape) = model.forward_tape(&z, &noise.t, cond, mask)?;
    let target = regression_target(schedule, x, noise, param)?;
    let scale = 2.0 / target.len() as f64;
    let (loss, dv) = match param {
        Parameterization::V => {
            let r = &v.value - &target;
            (r.mapv(|e| e * e).mean().unwrap_or(0.0), r * scale)
        }
        Parameterization::Epsilon => {
            // eps_hat = sigma z + alpha v_hat
            let c = schedule.row_coeffs(&noise.t)?;
            let eps_hat = crate::schedule::lincomb_rows(&c.sigma, &z, &c.alpha, &v.value);
            let r = &eps_hat - &target;
            let loss = r.mapv(|e| e * e).mean().unwrap_or(0.0);
            let mut dv = r * scale;
            for (mut row, a) in dv.rows_mut().into_iter().zip(c.alpha.iter()) {
                row *= *a;
            }
            (loss, dv)
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: "in denoising loss".into() });
    }
    let mut grad = model.zeros_like();
    model.backward(&tape, &dv, &mut grad);
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
}

/// Owns a model, its optimizer and the data stream so training can be resumed
/// in chunks (e.g. between evolution rounds).
pub struct Trainer {
    pub model: Denoiser,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    step: usize,
    initial_loss: Option<f64>,
    pub log: Vec<MetricRow>,
}

impl Trainer {
    pub fn new(model: Denoiser, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.optimizer())?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            config,
            schedule: NoiseSchedule::Cosine,
            optimizer,
            rng,
            step: 0,
            initial_loss: None,
            log: Vec::new(),
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Call after the model's parameter layout changed.
    pub fn reset_optimizer(&mut self) {
        self.optimizer.reset();
    }

    /// One optimizer update on a fresh batch; returns the batch loss.
    pub fn train_step(&mut self, data: &ConditionalDataset) -> Result<f64> {
        let cfg = &self.config;
        let (x, labels) = data.sample_batch(cfg.batch_size, &mut self.rng);
        let cond: Vec<Condition> = to_conditions(&labels)
            .into_iter()
            .map(|c| if self.rng.gen::<f64>() < cfg.cond_dropout { Condition::Null } else { c })
            .collect();
        let noise = NoiseDraw::sample(&mut self.rng, x.nrows(), x.ncols());
        let mask = match &cfg.skip {
            Some(skip) => skip.sample_mask(&self.model.genome(), &mut self.rng),
            None => SkipMask::execute_all(),
        };
        let (loss, grad) =
            denoise_loss_grad(&self.model, &self.schedule, &x, &cond, &noise, cfg.parameterization, &mask)?;
        let initial = *self.initial_loss.get_or_insert(loss);
        let limit = 1e3 * initial;
        if loss > limit {
            return Err(Error::Diverged { step: self.step, loss, limit });
        }
        self.optimizer.step(&mut self.model, &grad);
        self.step += 1;
        Ok(loss)
    }

    /// Runs `n` steps, logging every `log_every` steps and at the end.
    pub fn run(&mut self, data: &ConditionalDataset, n: usize) -> Result<()> {
        let end = self.step + n;
        while self.step < end {
            let loss = self.train_step(data)?;
            if self.step == 1 || self.step % self.config.log_every == 0 || self.step == end {
                self.log.push(MetricRow { step: self.step, loss });
            }
        }
        Ok(())
    }
}

pub struct FitOutcome {
    pub model: Denoiser,
    pub log: Vec<MetricRow>,
}

/// Trains `model` for `config.steps` steps.
pub fn fit(model: Denoiser, data: &ConditionalDataset, config: &TrainConfig) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(model, config.clone())?;
    trainer.run(data, config.steps)?;
    Ok(FitOutcome { model: trainer.model, log: trainer.log })
}

/// Quality with every block present and with each single block skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub full: f64,
    pub ablated: Vec<(BlockKey, f64)>,
}

impl AblationReport {
    /// Mean of `ablated - full`; positive means removal hurts when lower is better.
    pub fn mean_degradation(&self) -> f64 {
        let n = self.ablated.len().max(1) as f64;
        self.ablated.iter().map(|(_, q)| q - self.full).sum::<f64>() / n
    }
}

/// Scores `model` under `quality` with each block masked in turn.
pub fn ablation_report<F>(model: &Denoiser, mut quality: F) -> Result<AblationReport>
where
    F: FnMut(&dyn Denoise) -> Result<f64>,
{
    let full = quality(&model.masked(&SkipMask::execute_all()))?;
    let mut ablated = Vec::new();
    for spec in model.genome().blocks() {
        let mask = SkipMask::skip_one(spec.key);
        ablated.push((spec.key, quality(&model.masked(&mask))?));
    }
    Ok(AblationReport { full, ablated })
}

/// Mean squared norm of the difference from a reference set, per entry.
pub fn mean_squared(a: &Array2<f64>) -> f64 {
    a.mapv(|e| e * e).mean().unwrap_or(0.0)
}
