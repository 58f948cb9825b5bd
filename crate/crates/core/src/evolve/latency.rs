use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{ArchitectureGenome, AttnBlock, BlockKind, DenoiserConfig, ResBlock};

/// Lookup key: blocks of one kind at the same stage and width cost the same.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LatencyKey {
    pub kind: BlockKind,
    pub stage: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    kind: BlockKind,
    stage: usize,
    width: usize,
    latency_ms: f64,
    reps: usize,
    machine_id: String,
}

/// Per-block latencies in milliseconds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyTable {
    pub entries: BTreeMap<LatencyKey, f64>,
    pub reps: usize,
    pub machine_id: String,
}

impl LatencyTable {
    pub fn new(reps: usize, machine_id: impl Into<String>) -> Self {
        LatencyTable { entries: BTreeMap::new(), reps, machine_id: machine_id.into() }
    }

    pub fn insert(&mut self, kind: BlockKind, stage: usize, width: usize, latency_ms: f64) -> Result<()> {
        if !(latency_ms.is_finite() && latency_ms > 0.0) {
            return Err(Error::Latency(format!("{kind} at stage {stage}, width {width}: latency {latency_ms} is not positive")));
        }
        self.entries.insert(LatencyKey { kind, stage, width }, latency_ms);
        Ok(())
    }

    pub fn get(&self, kind: BlockKind, stage: usize, width: usize) -> Result<f64> {
        self.entries
            .get(&LatencyKey { kind, stage, width })
            .copied()
            .ok_or_else(|| Error::Latency(format!("no entry for {kind} at stage {stage}, width {width}")))
    }

    /// Latency of the block of `kind` in `stage` of `genome`.
    pub fn block(&self, genome: &ArchitectureGenome, stage: usize, kind: BlockKind) -> Result<f64> {
        let spec = genome
            .stages
            .get(stage)
            .ok_or_else(|| Error::Latency(format!("genome has no stage {stage}")))?;
        self.get(kind, stage, spec.width)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (k, &latency_ms) in &self.entries {
            w.serialize(Record {
                kind: k.kind,
                stage: k.stage,
                width: k.width,
                latency_ms,
                reps: self.reps,
                machine_id: self.machine_id.clone(),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut table = LatencyTable::default();
        for rec in csv::Reader::from_path(path)?.deserialize() {
            let rec: Record = rec?;
            table.reps = rec.reps;
            table.machine_id = rec.machine_id;
            table.insert(rec.kind, rec.stage, rec.width, rec.latency_ms)?;
        }
        Ok(table)
    }
}

/// Sum of block latencies. Missing entries are an error.
pub fn genome_latency(genome: &ArchitectureGenome, table: &LatencyTable) -> Result<f64> {
    let mut total = 0.0;
    for (i, s) in genome.stages.iter().enumerate() {
        if s.resnet > 0 {
            total += s.resnet as f64 * table.get(BlockKind::Resnet, i, s.width)?;
        }
        if s.cross_attention > 0 {
            total += s.cross_attention as f64 * table.get(BlockKind::CrossAttention, i, s.width)?;
        }
    }
    Ok(total)
}

/// Latency of a full sampling run.
pub fn sampling_latency(per_step_ms: f64, steps: usize) -> f64 {
    per_step_ms * steps as f64
}

/// Every `(kind, stage, width)` slot the genome can hold a block in.
pub fn genome_space(genome: &ArchitectureGenome) -> Vec<LatencyKey> {
    let mut keys = Vec::new();
    for (stage, s) in genome.stages.iter().enumerate() {
        for kind in [BlockKind::Resnet, BlockKind::CrossAttention] {
            keys.push(LatencyKey { kind, stage, width: s.width });
        }
    }
    keys
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median of `reps` calls to `bench` per key. Any failing or non-positive
/// measurement rejects the whole table.
pub fn build_latency_table<F>(keys: &[LatencyKey], mut bench: F, reps: usize, machine_id: &str) -> Result<LatencyTable>
where
    F: FnMut(LatencyKey) -> Result<f64>,
{
    if reps < 3 {
        return Err(Error::InvalidArgument(format!("latency tables need reps >= 3, got {reps}")));
    }
    let mut table = LatencyTable::new(reps, machine_id);
    for &key in keys {
        let runs = (0..reps).map(|_| bench(key)).collect::<Result<Vec<_>>>()?;
        table.insert(key.kind, key.stage, key.width, median(runs))?;
    }
    Ok(table)
}

/// Host name plus architecture, for labelling latency tables.
pub fn machine_id() -> String {
    let host = std::fs::read_to_string("/etc/hostname")
        .ok()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "unknown".into());
    format!("{host}-{}", std::env::consts::ARCH)
}

/// Multiply-accumulates per sample for one block forward pass.
pub fn block_macs(kind: BlockKind, width: usize, config: &DenoiserConfig) -> usize {
    match kind {
        BlockKind::Resnet => 2 * width * width + config.temb_dim * width,
        BlockKind::CrossAttention => {
            let (t, a) = (config.tokens, config.attn_dim);
            width * a + 2 * t * config.token_dim * a + 2 * t * a + a * width
        }
    }
}

/// Deterministic table from a cost model: `batch` samples at `gmacs` billion
/// multiply-accumulates per second.
pub fn cost_model_table(keys: &[LatencyKey], config: &DenoiserConfig, batch: usize, gmacs: f64) -> Result<LatencyTable> {
    if !(gmacs > 0.0) || batch == 0 {
        return Err(Error::InvalidArgument("cost model needs batch >= 1 and a positive throughput".into()));
    }
    let mut table = LatencyTable::new(1, "cost-model");
    for k in keys {
        let ms = (block_macs(k.kind, k.width, config) * batch) as f64 / (gmacs * 1e6);
        table.insert(k.kind, k.stage, k.width, ms)?;
    }
    Ok(table)
}

/// Wall-clock benchmark of one isolated block forward pass at `batch` rows.
pub struct BlockBench {
    pub config: DenoiserConfig,
    pub batch: usize,
    /// Forward passes timed together per measurement.
    pub inner: usize,
}

impl BlockBench {
    pub fn new(config: DenoiserConfig) -> Self {
        BlockBench { config, batch: 256, inner: 20 }
    }

    pub fn measure(&self, key: LatencyKey) -> Result<f64> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(key.width as u64);
        let h = Array2::from_elem((self.batch, key.width), 0.1);
        let temb = Array2::from_elem((self.batch, c.temb_dim), 0.1);
        let ctx = Array2::from_elem((self.batch * c.tokens, c.token_dim), 0.1);
        let start;
        let mut sink = 0.0;
        match key.kind {
            BlockKind::Resnet => {
                let b = ResBlock::init(&mut rng, 0, key.width, c.temb_dim);
                sink += b.forward(&h, &temb, None)[[0, 0]];
                start = Instant::now();
                for _ in 0..self.inner {
                    sink += b.forward(&h, &temb, None)[[0, 0]];
                }
            }
            BlockKind::CrossAttention => {
                let b = AttnBlock::init(&mut rng, 0, key.width, c.token_dim, c.attn_dim);
                sink += b.forward(&h, &ctx, c.tokens, None)[[0, 0]];
                start = Instant::now();
                for _ in 0..self.inner {
                    sink += b.forward(&h, &ctx, c.tokens, None)[[0, 0]];
                }
            }
        }
        let ms = start.elapsed().as_secs_f64() * 1e3 / self.inner as f64;
        if !sink.is_finite() {
            return Err(Error::Latency(format!("benchmark of {:?} produced non-finite output", key)));
        }
        Ok(ms)
    }
}
