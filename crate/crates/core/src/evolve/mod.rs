//! Latency-driven architecture evolution.
//!
//! Each round scores every block by what removing it does to quality per
//! millisecond saved (`value = delta_quality / delta_latency`). While the
//! genome is over the latency target the lowest-value blocks are removed;
//! once under it, weight copies of the highest-value blocks are added as long
//! as the target still holds.

mod latency;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crate::nets::{Action, Direction};
pub use latency::{
    block_macs, build_latency_table, cost_model_table, genome_latency, genome_space, machine_id, sampling_latency,
    BlockBench, LatencyKey, LatencyTable,
};

use crate::error::{Error, Result};
use crate::evaldata::{condition_consistency, to_conditions, ConditionalDataset, Probe};
use crate::nets::{ArchitectureGenome, BlockKey, Denoiser, SkipMask};
use crate::sampler::{sample, GuidanceScale};
use crate::schedule::NoiseSchedule;
use crate::trainer::{TrainConfig, Trainer};

/// Scores a model, optionally with some blocks masked out. Higher is better.
pub trait QualityEvaluator {
    fn quality(&mut self, model: &Denoiser, mask: &SkipMask) -> Result<f64>;
}

/// Quality is `base` plus a fixed contribution for every executed block,
/// looked up by block uid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyntheticEvaluator {
    pub base: f64,
    pub contributions: BTreeMap<u64, f64>,
    /// Used for blocks without an entry, e.g. fresh copies.
    pub default_contribution: f64,
}

impl QualityEvaluator for SyntheticEvaluator {
    fn quality(&mut self, model: &Denoiser, mask: &SkipMask) -> Result<f64> {
        let mut q = self.base;
        for spec in model.genome().blocks() {
            if !mask.is_skipped(&spec.key) {
                let uid = model.block(spec.key)?.uid();
                q += self.contributions.get(&uid).copied().unwrap_or(self.default_contribution);
            }
        }
        Ok(q)
    }
}

/// Condition consistency of guided samples from the (masked) model.
pub struct ConsistencyEvaluator<'a> {
    pub dataset: &'a ConditionalDataset,
    pub probe: &'a Probe,
    pub probe_checksum: String,
    pub eval_steps: usize,
    pub cfg_scale: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl QualityEvaluator for ConsistencyEvaluator<'_> {
    fn quality(&mut self, model: &Denoiser, mask: &SkipMask) -> Result<f64> {
        let labels = self.dataset.balanced_labels(self.n_samples);
        let samples = sample(
            &model.masked(mask),
            &NoiseSchedule::Cosine,
            self.eval_steps,
            &to_conditions(&labels),
            GuidanceScale::new(self.cfg_scale)?,
            self.seed,
        )?;
        condition_consistency(&samples, &labels, self.probe, &self.probe_checksum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionScore {
    pub action: Action,
    pub delta_quality: f64,
    pub delta_latency: f64,
    pub value: f64,
}

/// Scores `action` against `base_quality`, the model's unmodified quality.
/// Removals are evaluated through a skip mask, additions on a mutated copy;
/// `model` itself is never changed.
pub fn evaluate_action<E: QualityEvaluator + ?Sized>(
    model: &Denoiser,
    action: Action,
    evaluator: &mut E,
    table: &LatencyTable,
    base_quality: f64,
) -> Result<ActionScore> {
    let key = action.target;
    model.block(key)?;
    let genome = model.genome();
    let block_ms = table.block(&genome, key.stage, key.kind)?;
    let (quality, delta_latency) = match action.direction {
        Direction::Remove => (evaluator.quality(model, &SkipMask::skip_one(key))?, -block_ms),
        Direction::Add => (evaluator.quality(&model.mutated(action)?, &SkipMask::execute_all())?, block_ms),
    };
    let delta_quality = quality - base_quality;
    Ok(ActionScore { action, delta_quality, delta_latency, value: delta_quality / delta_latency })
}

/// Removal scores for every block, in `(stage, index, kind)` order.
pub fn score_removals<E: QualityEvaluator + ?Sized>(
    model: &Denoiser,
    evaluator: &mut E,
    table: &LatencyTable,
    base_quality: f64,
) -> Result<Vec<ActionScore>> {
    let mut keys: Vec<BlockKey> = model.genome().blocks().into_iter().map(|b| b.key).collect();
    keys.sort();
    keys.into_iter()
        .map(|k| evaluate_action(model, Action::remove(k), evaluator, table, base_quality))
        .collect()
}

fn ascending(scores: &[ActionScore]) -> Vec<ActionScore> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.action.target.cmp(&b.action.target)));
    v
}

/// The `k` lowest-value scores, ties broken by block position.
pub fn bottom_k(scores: &[ActionScore], k: usize) -> Vec<ActionScore> {
    ascending(scores).into_iter().take(k).collect()
}

/// The `k` highest-value scores, ties broken by block position.
pub fn top_k(scores: &[ActionScore], k: usize) -> Vec<ActionScore> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.action.target.cmp(&b.action.target)));
    v.truncate(k);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolveConfig {
    pub target_ms: f64,
    pub group_size: usize,
    /// Rounds that include robust training; more removal-only rounds follow
    /// if the target is still unmet.
    pub rounds: usize,
    pub train_steps_per_round: usize,
    pub train: TrainConfig,
    pub eval_steps: usize,
    pub cfg_scale: f64,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        EvolveConfig {
            target_ms: 1.0,
            group_size: 2,
            rounds: 4,
            train_steps_per_round: 200,
            train: TrainConfig { skip: Some(Default::default()), ..TrainConfig::default() },
            eval_steps: 50,
            cfg_scale: 7.5,
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_ms > 0.0 && self.target_ms.is_finite()) {
            return Err(Error::InvalidArgument(format!("latency target must be > 0, got {}", self.target_ms)));
        }
        if self.group_size == 0 || self.eval_steps == 0 {
            return Err(Error::InvalidArgument("group_size and eval_steps must be >= 1".into()));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Remove,
    Add,
    Hold,
    Final,
}

/// State at the start of a round and what the round then did to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub round: usize,
    pub phase: Phase,
    pub genome: ArchitectureGenome,
    pub latency_ms: f64,
    pub quality: f64,
    pub executed: Vec<ActionScore>,
}

pub struct EvolveOutcome {
    pub model: Denoiser,
    pub genome: ArchitectureGenome,
    pub history: Vec<HistoryRecord>,
}

fn cheapest_block(genome: &ArchitectureGenome, table: &LatencyTable) -> Result<f64> {
    genome_space(genome)
        .into_iter()
        .filter_map(|k| table.get(k.kind, k.stage, k.width).ok())
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::Latency("table has no entry for this genome".into()))
}

/// Runs the evolution loop on `model` and returns the evolved model.
pub fn evolve<E: QualityEvaluator + ?Sized>(
    model: Denoiser,
    data: &ConditionalDataset,
    table: &LatencyTable,
    config: &EvolveConfig,
    evaluator: &mut E,
) -> Result<EvolveOutcome> {
    config.validate()?;
    let cheapest = cheapest_block(&model.genome(), table)?;
    if config.target_ms < cheapest {
        return Err(Error::UnreachableTarget { target: config.target_ms, cheapest });
    }
    let mut trainer = Trainer::new(model, config.train.clone())?;
    let mut history = Vec::new();
    let mut round = 0;
    loop {
        let genome = trainer.model.genome();
        let latency = genome_latency(&genome, table)?;
        let training = round < config.rounds;
        if !training && latency <= config.target_ms {
            let quality = evaluator.quality(&trainer.model, &SkipMask::execute_all())?;
            history.push(HistoryRecord { round, phase: Phase::Final, genome, latency_ms: latency, quality, executed: vec![] });
            break;
        }
        if training && config.train_steps_per_round > 0 {
            trainer.run(data, config.train_steps_per_round)?;
        }
        let quality = evaluator.quality(&trainer.model, &SkipMask::execute_all())?;
        let scores = score_removals(&trainer.model, evaluator, table, quality)?;

        let (phase, executed) = if latency > config.target_ms {
            let removable = genome.total_blocks().saturating_sub(1);
            if removable == 0 {
                return Err(Error::UnreachableTarget { target: config.target_ms, cheapest: latency });
            }
            (Phase::Remove, bottom_k(&scores, config.group_size.min(removable)))
        } else {
            let mut budget = config.target_ms - latency;
            let mut picked = Vec::new();
            for s in top_k(&scores, config.group_size) {
                let cost = -s.delta_latency;
                if cost <= budget {
                    budget -= cost;
                    picked.push(ActionScore { action: Action::add(s.action.target), ..s });
                }
            }
            (if picked.is_empty() { Phase::Hold } else { Phase::Add }, picked)
        };
        // later positions first so earlier keys stay valid
        let mut order = executed.clone();
        order.sort_by(|a, b| b.action.target.cmp(&a.action.target));
        for s in &order {
            trainer.model.mutate(s.action)?;
        }
        if !order.is_empty() {
            trainer.reset_optimizer();
        }
        history.push(HistoryRecord { round, phase, genome, latency_ms: latency, quality, executed });
        round += 1;
    }
    let genome = trainer.model.genome();
    Ok(EvolveOutcome { model: trainer.model, genome, history })
}

#[derive(Debug, Serialize)]
struct HistoryRow<'a> {
    round: usize,
    phase: Phase,
    latency_ms: f64,
    quality: f64,
    total_blocks: usize,
    executed: String,
    genome: String,
    seed: u64,
    config_hash: &'a str,
}

fn format_actions(executed: &[ActionScore]) -> String {
    executed
        .iter()
        .map(|s| {
            let dir = match s.action.direction {
                Direction::Add => "add",
                Direction::Remove => "remove",
            };
            format!("{dir}:{}", s.action.target)
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub fn write_history_csv(path: &Path, history: &[HistoryRecord], seed: u64, config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(HistoryRow {
            round: r.round,
            phase: r.phase,
            latency_ms: r.latency_ms,
            quality: r.quality,
            total_blocks: r.genome.total_blocks(),
            executed: format_actions(&r.executed),
            genome: serde_json::to_string(&r.genome)?,
            seed,
            config_hash,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{BlockKind, DenoiserConfig, ParamSet};

    fn tiny() -> Denoiser {
        let g = ArchitectureGenome::uniform([4, 6, 8], 1, 1).unwrap();
        Denoiser::build(&g, DenoiserConfig::new(2, 2), 3).unwrap()
    }

    fn flat_table(model: &Denoiser, ms: f64) -> LatencyTable {
        build_latency_table(&genome_space(&model.genome()), |_| Ok(ms), 3, "test").unwrap()
    }

    #[test]
    fn injected_quality_gives_exact_value() {
        let m = tiny();
        let key = BlockKey::new(1, BlockKind::Resnet, 0);
        let uid = m.block(key).unwrap().uid();
        let mut e = SyntheticEvaluator { base: 1.0, contributions: BTreeMap::from([(uid, 0.03)]), default_contribution: 0.0 };
        let table = flat_table(&m, 4.0);
        let base = e.quality(&m, &SkipMask::execute_all()).unwrap();
        let s = evaluate_action(&m, Action::remove(key), &mut e, &table, base).unwrap();
        assert_eq!(s.delta_latency, -4.0);
        assert!((s.delta_quality + 0.03).abs() < 1e-15);
        assert!((s.value - 0.03 / 4.0).abs() < 1e-15);
        let add = evaluate_action(&m, Action::add(key), &mut e, &table, base).unwrap();
        assert_eq!(add.delta_latency, 4.0);
        assert_eq!(add.delta_quality, 0.0);
    }

    #[test]
    fn zeroed_block_has_zero_delta() {
        let g = ArchitectureGenome::uniform([4, 6, 8], 1, 1).unwrap();
        let mut m = Denoiser::build(&g, DenoiserConfig::new(2, 8), 3).unwrap();
        let key = BlockKey::new(3, BlockKind::CrossAttention, 0);
        m.stages[3].attns[0].out.fill_zero();
        let data = ConditionalDataset::toy(0);
        let probe = Probe::train(&data, crate::evaldata::ProbeTraining { samples: 400, iterations: 50, ..Default::default() });
        let mut e = ConsistencyEvaluator {
            dataset: &data,
            probe: &probe,
            probe_checksum: probe.checksum.clone(),
            eval_steps: 4,
            cfg_scale: 7.5,
            n_samples: 64,
            seed: 1,
        };
        let table = flat_table(&m, 1.0);
        let base = e.quality(&m, &SkipMask::execute_all()).unwrap();
        let s = evaluate_action(&m, Action::remove(key), &mut e, &table, base).unwrap();
        assert_eq!(s.delta_quality, 0.0);
        // mask and real removal agree bitwise
        let removed = m.mutated(Action::remove(BlockKey::new(2, BlockKind::Resnet, 0))).unwrap();
        let masked = e.quality(&m, &SkipMask::skip_one(BlockKey::new(2, BlockKind::Resnet, 0))).unwrap();
        assert_eq!(e.quality(&removed, &SkipMask::execute_all()).unwrap(), masked);
    }

    #[test]
    fn ranking_ties_follow_block_order() {
        let mk = |stage, kind, value| ActionScore {
            action: Action::remove(BlockKey::new(stage, kind, 0)),
            delta_quality: 0.0,
            delta_latency: -1.0,
            value,
        };
        let scores = vec![mk(2, BlockKind::Resnet, 0.5), mk(1, BlockKind::Resnet, 0.5), mk(0, BlockKind::Resnet, 0.9), mk(1, BlockKind::CrossAttention, 0.5)];
        let b = bottom_k(&scores, 2);
        assert_eq!(b[0].action.target, BlockKey::new(1, BlockKind::CrossAttention, 0));
        assert_eq!(b[1].action.target, BlockKey::new(1, BlockKind::Resnet, 0));
        assert_eq!(top_k(&scores, 1)[0].value, 0.9);
    }

    #[test]
    fn unreachable_target_rejected() {
        let m = tiny();
        let table = flat_table(&m, 5.0);
        let cfg = EvolveConfig { target_ms: 4.0, train_steps_per_round: 0, ..Default::default() };
        let r = evolve(m, &ConditionalDataset::toy(0), &table, &cfg, &mut SyntheticEvaluator::default());
        assert!(matches!(r, Err(Error::UnreachableTarget { .. })));
    }

    #[test]
    fn adds_stay_under_target() {
        let m = tiny();
        let table = flat_table(&m, 1.0);
        let mut e = SyntheticEvaluator { base: 0.0, contributions: BTreeMap::new(), default_contribution: 0.1 };
        let cfg = EvolveConfig { target_ms: 16.5, rounds: 3, train_steps_per_round: 0, ..Default::default() };
        let out = evolve(m, &ConditionalDataset::toy(0), &table, &cfg, &mut e).unwrap();
        let phases: Vec<Phase> = out.history.iter().map(|r| r.phase).collect();
        assert_eq!(phases, vec![Phase::Add, Phase::Hold, Phase::Hold, Phase::Final]);
        assert_eq!(out.genome.total_blocks(), 16);
        assert!(out.history.iter().all(|r| r.latency_ms <= 16.5));
    }
}
