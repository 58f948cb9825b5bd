//! Run configuration: one TOML file, every key optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use snaplab::decoder::{DecoderDistillConfig, DecoderSpec};
use snaplab::distill::{DistillConfig, DistillMode, GammaMode};
use snaplab::evaldata::{default_w_grid, ConditionalDataset};
use snaplab::evolve::EvolveConfig;
use snaplab::nets::{ArchitectureGenome, DenoiserConfig, SkipConfig};
use snaplab::trainer::{Parameterization, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Master seed. Every stage derives its own seed from it.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub distill: DistillSection,
    pub evolve: EvolveSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub decoder: DecoderSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            distill: DistillSection::default(),
            evolve: EvolveSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
            decoder: DecoderSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub classes: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { classes: 8, radius: 1.5, std: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Same block counts in every stage.
    Uniform,
    /// Scaled-down block counts of the original large denoiser.
    Origin,
    /// Scaled-down block counts of the evolved efficient denoiser.
    Efficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub widths: [usize; 3],
    pub layout: Layout,
    pub cross_attention: usize,
    pub resnet: usize,
    pub time_features: usize,
    pub temb_dim: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub attn_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = DenoiserConfig::new(2, 8);
        ModelSection {
            widths: [32, 64, 128],
            layout: Layout::Uniform,
            cross_attention: 1,
            resnet: 1,
            time_features: c.time_features,
            temb_dim: c.temb_dim,
            tokens: c.tokens,
            token_dim: c.token_dim,
            attn_dim: c.attn_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub parameterization: Parameterization,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Per-block execute probability for robust training; absent means off.
    pub execute_probability: Option<f64>,
    pub cond_dropout: f64,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            parameterization: t.parameterization,
            batch_size: t.batch_size,
            steps: t.steps,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            execute_probability: None,
            cond_dropout: t.cond_dropout,
            log_every: t.log_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub mode: DistillMode,
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub cfg_range: [f64; 2],
    pub cfg_probability: f64,
    pub gamma_mode: GammaMode,
    pub gamma: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub cond_dropout: f64,
    pub log_every: usize,
    /// Held-out rows for the landing report.
    pub holdout: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            mode: d.mode,
            teacher_steps: d.teacher_steps,
            student_steps: d.student_steps,
            cfg_range: d.cfg_range,
            cfg_probability: d.cfg_probability,
            gamma_mode: d.gamma_mode,
            gamma: d.gamma,
            batch_size: d.batch_size,
            iterations: d.iterations,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            cond_dropout: d.cond_dropout,
            log_every: d.log_every,
            holdout: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LutSource {
    /// Multiply-accumulate counts at an assumed throughput; reproducible.
    CostModel,
    /// Wall-clock timings on this machine.
    Bench,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveSection {
    /// Absolute latency target. When absent, `target_fraction` of the
    /// starting model's latency is used.
    pub target_ms: Option<f64>,
    pub target_fraction: f64,
    pub group_size: usize,
    pub rounds: usize,
    pub train_steps_per_round: usize,
    pub execute_probability: f64,
    pub eval_steps: usize,
    pub cfg_scale: f64,
    pub n_samples: usize,
    pub lut: Option<PathBuf>,
    pub lut_source: LutSource,
    pub lut_batch: usize,
    pub lut_gmacs: f64,
    pub bench_reps: usize,
}

impl Default for EvolveSection {
    fn default() -> Self {
        let e = EvolveConfig::default();
        EvolveSection {
            target_ms: None,
            target_fraction: 0.7,
            group_size: e.group_size,
            rounds: e.rounds,
            train_steps_per_round: e.train_steps_per_round,
            execute_probability: SkipConfig::default().execute_probability,
            eval_steps: e.eval_steps,
            cfg_scale: e.cfg_scale,
            n_samples: 512,
            lut: None,
            lut_source: LutSource::CostModel,
            lut_batch: 256,
            lut_gmacs: 1.0,
            bench_reps: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub cfg_scale: f64,
    pub n: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { steps: 50, cfg_scale: 1.0, n: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub steps: usize,
    pub w_list: Vec<f64>,
    pub n_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { steps: 50, w_list: default_w_grid(), n_samples: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    pub ratio: f64,
    pub hidden: Vec<usize>,
    pub latent_channels: usize,
    pub latent_size: usize,
    pub latent_std: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout: usize,
}

impl Default for DecoderSection {
    fn default() -> Self {
        let s = DecoderSpec::default();
        let d = DecoderDistillConfig::default();
        DecoderSection {
            ratio: 0.5,
            hidden: s.hidden,
            latent_channels: s.latent_channels,
            latent_size: s.latent_size,
            latent_std: 0.5,
            steps: d.steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            holdout: d.holdout,
        }
    }
}

/// Stage offsets added to the master seed.
pub mod seeds {
    pub const DATA: u64 = 0;
    pub const MODEL: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const DISTILL: u64 = 3;
    pub const EVOLVE: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const DECODER: u64 = 7;
}

fn check(ok: bool, path: &str, msg: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config { path: path.into(), message: msg.into() })
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

fn unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl RunConfig {
    /// Parses TOML text, reporting the failing key path on error.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            CliError::Config { path, message: inner.message().trim().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes to JSON");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn stage_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(offset)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        check(!self.name.is_empty() && !self.name.contains(['/', '\\']), "name", "must be non-empty without path separators")?;
        check(self.seed <= i64::MAX as u64, "seed", "must fit in a signed 64-bit integer")?;
        let d = &self.data;
        check(d.classes >= 1, "data.classes", "must be >= 1")?;
        check(positive(d.radius), "data.radius", "must be > 0")?;
        check(d.std.is_finite() && d.std >= 0.0, "data.std", "must be >= 0")?;

        let m = &self.model;
        check(m.widths.iter().all(|&w| w > 0), "model.widths", "must all be >= 1")?;
        check(m.time_features >= 2 && m.time_features % 2 == 0, "model.time_features", "must be even and >= 2")?;
        check(m.temb_dim > 0, "model.temb_dim", "must be >= 1")?;
        check(m.tokens > 0, "model.tokens", "must be >= 1")?;
        check(m.token_dim > 0, "model.token_dim", "must be >= 1")?;
        check(m.attn_dim > 0, "model.attn_dim", "must be >= 1")?;
        check(m.cross_attention + m.resnet > 0 || m.layout != Layout::Uniform, "model.resnet", "a stage needs at least one block")?;

        let t = &self.train;
        check(t.batch_size > 0, "train.batch_size", "must be >= 1")?;
        check(t.steps > 0, "train.steps", "must be >= 1")?;
        check(positive(t.learning_rate), "train.learning_rate", "must be > 0")?;
        check(t.weight_decay.is_finite() && t.weight_decay >= 0.0, "train.weight_decay", "must be >= 0")?;
        check(t.execute_probability.map_or(true, unit), "train.execute_probability", "must lie in [0, 1]")?;
        check(unit(t.cond_dropout), "train.cond_dropout", "must lie in [0, 1]")?;
        check(t.log_every > 0, "train.log_every", "must be >= 1")?;

        let s = &self.distill;
        check(s.student_steps > 0, "distill.student_steps", "must be >= 1")?;
        let nested = s.teacher_steps > s.student_steps && s.teacher_steps % s.student_steps == 0;
        check(nested, "distill.teacher_steps", "must be a multiple of student_steps above it")?;
        let [lo, hi] = s.cfg_range;
        check(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi, "distill.cfg_range", "must satisfy 0 <= a <= b")?;
        check(unit(s.cfg_probability), "distill.cfg_probability", "must lie in [0, 1]")?;
        check(s.gamma.is_finite() && s.gamma >= 0.0, "distill.gamma", "must be >= 0")?;
        check(s.batch_size > 0, "distill.batch_size", "must be >= 1")?;
        check(s.iterations > 0, "distill.iterations", "must be >= 1")?;
        check(positive(s.learning_rate), "distill.learning_rate", "must be > 0")?;
        check(s.weight_decay.is_finite() && s.weight_decay >= 0.0, "distill.weight_decay", "must be >= 0")?;
        check(unit(s.cond_dropout), "distill.cond_dropout", "must lie in [0, 1]")?;
        check(s.log_every > 0, "distill.log_every", "must be >= 1")?;
        check(s.holdout > 0, "distill.holdout", "must be >= 1")?;
        self.distill_config().validate().map_err(|e| CliError::Config { path: "distill".into(), message: e.to_string() })?;

        let e = &self.evolve;
        check(e.target_ms.map_or(true, positive), "evolve.target_ms", "must be > 0")?;
        check(e.target_fraction > 0.0 && e.target_fraction <= 1.0, "evolve.target_fraction", "must lie in (0, 1]")?;
        check(e.group_size > 0, "evolve.group_size", "must be >= 1")?;
        check(unit(e.execute_probability), "evolve.execute_probability", "must lie in [0, 1]")?;
        check(e.eval_steps > 0, "evolve.eval_steps", "must be >= 1")?;
        check(e.cfg_scale.is_finite() && e.cfg_scale >= 0.0, "evolve.cfg_scale", "must be >= 0")?;
        check(e.n_samples > 0, "evolve.n_samples", "must be >= 1")?;
        check(e.lut_batch > 0, "evolve.lut_batch", "must be >= 1")?;
        check(positive(e.lut_gmacs), "evolve.lut_gmacs", "must be > 0")?;
        check(e.bench_reps >= 3, "evolve.bench_reps", "must be >= 3")?;

        check(self.sample.steps > 0, "sample.steps", "must be >= 1")?;
        check(self.sample.cfg_scale.is_finite() && self.sample.cfg_scale >= 0.0, "sample.cfg_scale", "must be >= 0")?;
        check(self.sample.n > 0, "sample.n", "must be >= 1")?;

        check(self.eval.steps > 0, "eval.steps", "must be >= 1")?;
        check(!self.eval.w_list.is_empty(), "eval.w_list", "must not be empty")?;
        check(self.eval.w_list.iter().all(|w| w.is_finite() && *w >= 0.0), "eval.w_list", "entries must be >= 0")?;
        check(self.eval.n_samples >= 2, "eval.n_samples", "must be >= 2")?;

        let c = &self.decoder;
        check(c.ratio > 0.0 && c.ratio < 1.0, "decoder.ratio", "must lie in (0, 1)")?;
        check(!c.hidden.is_empty() && c.hidden.iter().all(|&h| h > 0), "decoder.hidden", "needs at least one non-zero layer")?;
        check(c.latent_channels > 0, "decoder.latent_channels", "must be >= 1")?;
        check(c.latent_size > 0, "decoder.latent_size", "must be >= 1")?;
        check(c.latent_std.is_finite() && c.latent_std >= 0.0, "decoder.latent_std", "must be >= 0")?;
        check(c.batch_size > 0, "decoder.batch_size", "must be >= 1")?;
        check(positive(c.learning_rate), "decoder.learning_rate", "must be > 0")?;
        check(c.holdout > 0, "decoder.holdout", "must be >= 1")?;
        self.decoder_spec().pruned(c.ratio).map_err(|e| CliError::Config { path: "decoder.ratio".into(), message: e.to_string() })?;
        Ok(())
    }

    pub fn dataset(&self) -> ConditionalDataset {
        let d = &self.data;
        ConditionalDataset::ring(d.classes, d.radius, d.std, self.stage_seed(seeds::DATA))
            .expect("validated data section")
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        let m = &self.model;
        DenoiserConfig {
            data_dim: 2,
            num_classes: self.data.classes,
            time_features: m.time_features,
            temb_dim: m.temb_dim,
            tokens: m.tokens,
            token_dim: m.token_dim,
            attn_dim: m.attn_dim,
        }
    }

    pub fn genome(&self) -> snaplab::Result<ArchitectureGenome> {
        let m = &self.model;
        match m.layout {
            Layout::Uniform => ArchitectureGenome::uniform(m.widths, m.cross_attention, m.resnet),
            Layout::Origin => ArchitectureGenome::reference_origin(m.widths),
            Layout::Efficient => ArchitectureGenome::reference_efficient(m.widths),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            parameterization: t.parameterization,
            batch_size: t.batch_size,
            steps: t.steps,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            skip: t.execute_probability.map(|p| SkipConfig { execute_probability: p, ..SkipConfig::default() }),
            seed: self.stage_seed(seeds::TRAIN),
            cond_dropout: t.cond_dropout,
            log_every: t.log_every,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let s = &self.distill;
        DistillConfig {
            teacher_steps: s.teacher_steps,
            student_steps: s.student_steps,
            cfg_range: s.cfg_range,
            cfg_probability: s.cfg_probability,
            gamma_mode: s.gamma_mode,
            gamma: s.gamma,
            mode: s.mode,
            seed: self.stage_seed(seeds::DISTILL),
            batch_size: s.batch_size,
            iterations: s.iterations,
            learning_rate: s.learning_rate,
            weight_decay: s.weight_decay,
            cond_dropout: s.cond_dropout,
            log_every: s.log_every,
        }
    }

    /// Evolution settings for a concrete latency target.
    pub fn evolve_config(&self, target_ms: f64) -> EvolveConfig {
        let e = &self.evolve;
        let mut train = self.train_config();
        train.skip = Some(SkipConfig { execute_probability: e.execute_probability, ..SkipConfig::default() });
        train.seed = self.stage_seed(seeds::EVOLVE);
        EvolveConfig {
            target_ms,
            group_size: e.group_size,
            rounds: e.rounds,
            train_steps_per_round: e.train_steps_per_round,
            train,
            eval_steps: e.eval_steps,
            cfg_scale: e.cfg_scale,
        }
    }

    pub fn decoder_spec(&self) -> DecoderSpec {
        let c = &self.decoder;
        DecoderSpec {
            latent_channels: c.latent_channels,
            latent_size: c.latent_size,
            hidden: c.hidden.clone(),
            out_channels: 3,
        }
    }

    pub fn decoder_config(&self) -> DecoderDistillConfig {
        let c = &self.decoder;
        DecoderDistillConfig {
            steps: c.steps,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            seed: self.stage_seed(seeds::DECODER),
            holdout: c.holdout,
        }
    }
}
