//! Tiny conditional UNet-shaped denoiser with manual backpropagation.
//!
//! Layout: `input -> stage_0 .. stage_{n-1} -> output`, where every stage is a
//! sequence of residual ResNet and cross-attention blocks at a fixed width.
//! A linear transition maps between adjacent stages of different width, and
//! up stage `k` adds the output of down stage `n - 1 - k` to its input.
//! The network predicts `v`.

mod blocks;
mod genome;
mod params;
mod skip;

use std::f64::consts::PI;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{AttnBlock, AttnCache, ResBlock, ResCache};
pub use genome::{stage_order, ArchitectureGenome, BlockKey, BlockKind, BlockSpec, StageRole, StageSpec};
pub use params::{silu, silu_backward, Linear, ParamSet};
pub use skip::{SkipConfig, SkipMask};
pub(crate) use params::join as join_name;

use crate::error::{Error, Result};
use crate::sampler::{Condition, Denoise};
use crate::schedule::{check_rows, Prediction, PredictionKind};
use params::{gaussian, join};

/// Hyperparameters that do not depend on the genome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    /// Number of condition labels; the null condition gets one extra row.
    pub num_classes: usize,
    pub time_features: usize,
    pub temb_dim: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub attn_dim: usize,
}

impl DenoiserConfig {
    pub fn new(data_dim: usize, num_classes: usize) -> Self {
        DenoiserConfig { data_dim, num_classes, time_features: 16, temb_dim: 64, tokens: 4, token_dim: 16, attn_dim: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.data_dim, self.num_classes, self.temb_dim, self.tokens, self.token_dim, self.attn_dim];
        if positive.contains(&0) || self.time_features < 2 || self.time_features % 2 != 0 {
            return Err(Error::InvalidArgument(format!("invalid denoiser config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: String,
    pub width: usize,
    pub transition: Option<Linear>,
    pub resnets: Vec<ResBlock>,
    pub attns: Vec<AttnBlock>,
}

impl Stage {
    fn count(&self, kind: BlockKind) -> usize {
        match kind {
            BlockKind::Resnet => self.resnets.len(),
            BlockKind::CrossAttention => self.attns.len(),
        }
    }
}

/// A single block lifted out of a model, remembered with its position.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Resnet(ResBlock),
    CrossAttention(AttnBlock),
}

impl Block {
    pub fn uid(&self) -> u64 {
        match self {
            Block::Resnet(b) => b.uid,
            Block::CrossAttention(b) => b.uid,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Block::Resnet(b) => b.param_count(),
            Block::CrossAttention(b) => b.param_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemovedBlock {
    pub key: BlockKey,
    pub block: Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Add,
    Remove,
}

/// `Remove(key)` drops the block at `key`. `Add(key)` inserts a weight copy of
/// the block at `key` directly after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub direction: Direction,
    pub target: BlockKey,
}

impl Action {
    pub fn remove(target: BlockKey) -> Self {
        Action { direction: Direction::Remove, target }
    }

    pub fn add(target: BlockKey) -> Self {
        Action { direction: Direction::Add, target }
    }
}

/// What `mutate` did, enough to undo it.
#[derive(Debug, Clone, PartialEq)]
pub enum Mutation {
    Removed(RemovedBlock),
    Added(BlockKey),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub seed: u64,
    pub input: Linear,
    pub time1: Linear,
    pub time2: Linear,
    /// `(num_classes + 1, tokens * token_dim)`; the last row is the null condition.
    pub cond_table: Array2<f64>,
    pub stages: Vec<Stage>,
    pub output: Linear,
    next_uid: u64,
}

/// Activations kept from a forward pass for `backward`.
pub struct Tape {
    mask: SkipMask,
    z: Array2<f64>,
    feat: Array2<f64>,
    time_pre: Array2<f64>,
    time_act: Array2<f64>,
    temb: Array2<f64>,
    ctx: Array2<f64>,
    cond_rows: Vec<usize>,
    stage_inputs: Vec<Array2<f64>>,
    res: Vec<Vec<Option<ResCache>>>,
    attn: Vec<Vec<Option<AttnCache>>>,
    last: Array2<f64>,
}

/// Convenience constructor mirroring `Denoiser::build`.
pub fn build_model(genome: &ArchitectureGenome, config: DenoiserConfig, seed: u64) -> Result<Denoiser> {
    Denoiser::build(genome, config, seed)
}

impl Denoiser {
    pub fn build(genome: &ArchitectureGenome, config: DenoiserConfig, seed: u64) -> Result<Self> {
        genome.validate()?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let first = genome.stages[0].width;
        let last = genome.stages[genome.stages.len() - 1].width;
        let input = Linear::init(&mut rng, c.data_dim, first, 1.0);
        let time1 = Linear::init(&mut rng, c.time_features, c.temb_dim, 1.0);
        let time2 = Linear::init(&mut rng, c.temb_dim, c.temb_dim, 1.0);
        let cond_table = gaussian(&mut rng, c.num_classes + 1, c.tokens * c.token_dim, 1.0);
        let mut uid = 0;
        let mut stages = Vec::with_capacity(genome.stages.len());
        let mut prev = first;
        for spec in &genome.stages {
            let transition = (spec.width != prev).then(|| Linear::init(&mut rng, prev, spec.width, 1.0));
            let mut resnets = Vec::new();
            for _ in 0..spec.resnet {
                resnets.push(ResBlock::init(&mut rng, uid, spec.width, c.temb_dim));
                uid += 1;
            }
            let mut attns = Vec::new();
            for _ in 0..spec.cross_attention {
                attns.push(AttnBlock::init(&mut rng, uid, spec.width, c.token_dim, c.attn_dim));
                uid += 1;
            }
            stages.push(Stage { name: spec.name.clone(), width: spec.width, transition, resnets, attns });
            prev = spec.width;
        }
        let output = Linear::init(&mut rng, last, c.data_dim, 0.5);
        Ok(Denoiser { config, seed, input, time1, time2, cond_table, stages, output, next_uid: uid })
    }

    /// Same structure with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn genome(&self) -> ArchitectureGenome {
        ArchitectureGenome {
            stages: self
                .stages
                .iter()
                .map(|s| StageSpec::new(s.name.clone(), s.width, s.attns.len(), s.resnets.len()))
                .collect(),
        }
    }

    pub fn next_uid(&self) -> u64 {
        self.next_uid
    }

    pub(crate) fn set_next_uid(&mut self, uid: u64) {
        self.next_uid = uid;
    }

    pub fn block(&self, key: BlockKey) -> Result<Block> {
        let stage = self.stages.get(key.stage).ok_or(Error::NoSuchBlock(key))?;
        match key.kind {
            BlockKind::Resnet => stage.resnets.get(key.index).cloned().map(Block::Resnet),
            BlockKind::CrossAttention => stage.attns.get(key.index).cloned().map(Block::CrossAttention),
        }
        .ok_or(Error::NoSuchBlock(key))
    }

    pub fn block_param_count(&self, key: BlockKey) -> Result<usize> {
        Ok(self.block(key)?.param_count())
    }

    /// Parameters outside the blocks: input/output layers, time MLP,
    /// condition table and stage transitions.
    pub fn backbone_param_count(&self) -> usize {
        self.input.param_count()
            + self.time1.param_count()
            + self.time2.param_count()
            + self.cond_table.len()
            + self.output.param_count()
            + self.stages.iter().filter_map(|s| s.transition.as_ref()).map(|t| t.param_count()).sum::<usize>()
    }

    fn time_features(&self, t: &[f64]) -> Array2<f64> {
        let half = self.config.time_features / 2;
        let mut feat = Array2::zeros((t.len(), 2 * half));
        for (b, &tb) in t.iter().enumerate() {
            for k in 0..half {
                let freq = if half > 1 { 100f64.powf(k as f64 / (half - 1) as f64) } else { 1.0 };
                let angle = 2.0 * PI * freq * tb / 4.0;
                feat[[b, k]] = angle.sin();
                feat[[b, half + k]] = angle.cos();
            }
        }
        feat
    }

    fn cond_row(&self, c: Condition) -> Result<usize> {
        match c {
            Condition::Null => Ok(self.config.num_classes),
            Condition::Label(k) if k < self.config.num_classes => Ok(k),
            Condition::Label(k) => Err(Error::InvalidArgument(format!(
                "label {k} out of range for {} classes",
                self.config.num_classes
            ))),
        }
    }

    fn context(&self, rows: &[usize]) -> Array2<f64> {
        let (tokens, dc) = (self.config.tokens, self.config.token_dim);
        let mut ctx = Array2::zeros((rows.len() * tokens, dc));
        for (b, &r) in rows.iter().enumerate() {
            for j in 0..tokens {
                ctx.row_mut(b * tokens + j).assign(&self.cond_table.slice(s![r, j * dc..(j + 1) * dc]));
            }
        }
        ctx
    }

    fn check_inputs(&self, z: &Array2<f64>, t: &[f64], cond: &[Condition]) -> Result<Vec<usize>> {
        check_rows(z, t)?;
        if z.ncols() != self.config.data_dim {
            return Err(Error::Shape(format!("expected {} columns, got {}", self.config.data_dim, z.ncols())));
        }
        if cond.len() != z.nrows() {
            return Err(Error::Shape(format!("{} rows but {} conditions", z.nrows(), cond.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "in denoiser input".into() });
        }
        cond.iter().map(|c| self.cond_row(*c)).collect()
    }

    /// Plain forward pass with every block executed.
    pub fn forward(&self, z: &Array2<f64>, t: &[f64], cond: &[Condition]) -> Result<Prediction> {
        self.forward_masked(z, t, cond, &SkipMask::execute_all())
    }

    /// Forward pass where blocks in `mask` act as the identity.
    pub fn forward_masked(&self, z: &Array2<f64>, t: &[f64], cond: &[Condition], mask: &SkipMask) -> Result<Prediction> {
        let rows = self.check_inputs(z, t, cond)?;
        let v = self.run(z, t, rows, mask, None)?;
        Ok(Prediction::new(PredictionKind::V, v))
    }

    /// Forward pass that records a tape for [`Denoiser::backward`].
    pub fn forward_tape(
        &self,
        z: &Array2<f64>,
        t: &[f64],
        cond: &[Condition],
        mask: &SkipMask,
    ) -> Result<(Prediction, Tape)> {
        let rows = self.check_inputs(z, t, cond)?;
        let mut tape = None;
        let v = self.run(z, t, rows, mask, Some(&mut tape))?;
        Ok((Prediction::new(PredictionKind::V, v), tape.expect("tape recorded")))
    }

    fn run(
        &self,
        z: &Array2<f64>,
        t: &[f64],
        cond_rows: Vec<usize>,
        mask: &SkipMask,
        mut tape: Option<&mut Option<Tape>>,
    ) -> Result<Array2<f64>> {
        let recording = tape.is_some();
        let feat = self.time_features(t);
        let time_pre = self.time1.forward(&feat);
        let time_act = silu(&time_pre);
        let temb = self.time2.forward(&time_act);
        let ctx = self.context(&cond_rows);
        let tokens = self.config.tokens;
        let n = self.stages.len();

        let mut h = self.input.forward(z);
        let mut skips: Vec<Option<Array2<f64>>> = vec![None; n];
        let mut stage_inputs = Vec::new();
        let mut res_caches = Vec::new();
        let mut attn_caches = Vec::new();
        let genome = self.genome();
        for (i, stage) in self.stages.iter().enumerate() {
            if recording {
                stage_inputs.push(h.clone());
            }
            if let Some(tr) = &stage.transition {
                h = tr.forward(&h);
            }
            if let Some(src) = genome.skip_source(i) {
                h += skips[src].as_ref().expect("down stage ran before its up stage");
            }
            let mut rc: Vec<Option<ResCache>> = (0..stage.resnets.len()).map(|_| None).collect();
            let mut ac: Vec<Option<AttnCache>> = (0..stage.attns.len()).map(|_| None).collect();
            for (kind, j) in stage_order(stage.attns.len(), stage.resnets.len()) {
                let key = BlockKey::new(i, kind, j);
                if mask.is_skipped(&key) {
                    continue;
                }
                h = match kind {
                    BlockKind::Resnet => {
                        stage.resnets[j].forward(&h, &temb, recording.then_some(&mut rc[j]))
                    }
                    BlockKind::CrossAttention => {
                        stage.attns[j].forward(&h, &ctx, tokens, recording.then_some(&mut ac[j]))
                    }
                };
                if h.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteBlock { block: key });
                }
            }
            if genome.role(i) == StageRole::Down {
                skips[i] = Some(h.clone());
            }
            res_caches.push(rc);
            attn_caches.push(ac);
        }
        let out = self.output.forward(&h);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "in denoiser output".into() });
        }
        if let Some(slot) = tape.as_deref_mut() {
            *slot = Some(Tape {
                mask: mask.clone(),
                z: z.clone(),
                feat,
                time_pre,
                time_act,
                temb,
                ctx,
                cond_rows,
                stage_inputs,
                res: res_caches,
                attn: attn_caches,
                last: h,
            });
        }
        Ok(out)
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/d(output)`.
    pub fn backward(&self, tape: &Tape, dout: &Array2<f64>, grad: &mut Denoiser) {
        let tokens = self.config.tokens;
        let genome = self.genome();
        let n = self.stages.len();
        let mut dtemb = Array2::zeros(tape.temb.raw_dim());
        let mut dctx = Array2::zeros(tape.ctx.raw_dim());
        let mut dskips: Vec<Option<Array2<f64>>> = vec![None; n];

        let mut dh = self.output.backward(&tape.last, dout, &mut grad.output);
        for i in (0..n).rev() {
            let stage = &self.stages[i];
            let gstage = &mut grad.stages[i];
            if let Some(ds) = dskips[i].take() {
                dh += &ds;
            }
            let order = stage_order(stage.attns.len(), stage.resnets.len());
            for &(kind, j) in order.iter().rev() {
                if tape.mask.is_skipped(&BlockKey::new(i, kind, j)) {
                    continue;
                }
                dh = match kind {
                    BlockKind::Resnet => {
                        let cache = tape.res[i][j].as_ref().expect("resnet cache");
                        stage.resnets[j].backward(cache, &tape.temb, &dh, &mut gstage.resnets[j], &mut dtemb)
                    }
                    BlockKind::CrossAttention => {
                        let cache = tape.attn[i][j].as_ref().expect("attention cache");
                        stage.attns[j].backward(cache, &tape.ctx, tokens, &dh, &mut gstage.attns[j], &mut dctx)
                    }
                };
            }
            if let Some(src) = genome.skip_source(i) {
                dskips[src] = Some(dh.clone());
            }
            if let (Some(tr), Some(gtr)) = (&stage.transition, gstage.transition.as_mut()) {
                dh = tr.backward(&tape.stage_inputs[i], &dh, gtr);
            }
        }
        self.input.backward(&tape.z, &dh, &mut grad.input);

        let dact = self.time2.backward(&tape.time_act, &dtemb, &mut grad.time2);
        let dpre = silu_backward(&tape.time_pre, &dact);
        self.time1.backward(&tape.feat, &dpre, &mut grad.time1);

        let dc = self.config.token_dim;
        for (b, &r) in tape.cond_rows.iter().enumerate() {
            for j in 0..tokens {
                let mut row = grad.cond_table.slice_mut(s![r, j * dc..(j + 1) * dc]);
                row += &dctx.row(b * tokens + j);
            }
        }
    }

    /// Applies `action` in place.
    pub fn mutate(&mut self, action: Action) -> Result<Mutation> {
        let key = action.target;
        match action.direction {
            Direction::Remove => self.remove_block(key).map(Mutation::Removed),
            Direction::Add => {
                let copy = match self.block(key)? {
                    Block::Resnet(mut b) => {
                        b.uid = self.next_uid;
                        Block::Resnet(b)
                    }
                    Block::CrossAttention(mut b) => {
                        b.uid = self.next_uid;
                        Block::CrossAttention(b)
                    }
                };
                self.next_uid += 1;
                let at = BlockKey::new(key.stage, key.kind, key.index + 1);
                self.insert_block(at, copy)?;
                Ok(Mutation::Added(at))
            }
        }
    }

    /// Returns a mutated copy, leaving `self` untouched.
    pub fn mutated(&self, action: Action) -> Result<Denoiser> {
        let mut m = self.clone();
        m.mutate(action)?;
        Ok(m)
    }

    pub fn remove_block(&mut self, key: BlockKey) -> Result<RemovedBlock> {
        let stage = self.stages.get_mut(key.stage).ok_or(Error::NoSuchBlock(key))?;
        if key.index >= stage.count(key.kind) {
            return Err(Error::NoSuchBlock(key));
        }
        let total: usize = self.stages.iter().map(|s| s.resnets.len() + s.attns.len()).sum();
        if total == 1 {
            return Err(Error::InvalidGenome(format!("removing {key} would leave no blocks")));
        }
        let stage = &mut self.stages[key.stage];
        let block = match key.kind {
            BlockKind::Resnet => Block::Resnet(stage.resnets.remove(key.index)),
            BlockKind::CrossAttention => Block::CrossAttention(stage.attns.remove(key.index)),
        };
        Ok(RemovedBlock { key, block })
    }

    /// Inserts `block` so that it ends up at `key`; later blocks shift by one.
    pub fn insert_block(&mut self, key: BlockKey, block: Block) -> Result<()> {
        let width = self.stages.get(key.stage).ok_or(Error::NoSuchBlock(key))?.width;
        let stage = &mut self.stages[key.stage];
        if key.index > stage.count(key.kind) {
            return Err(Error::NoSuchBlock(key));
        }
        match (key.kind, block) {
            (BlockKind::Resnet, Block::Resnet(b)) if b.outer.w.ncols() == width => stage.resnets.insert(key.index, b),
            (BlockKind::CrossAttention, Block::CrossAttention(b)) if b.out.w.ncols() == width => {
                stage.attns.insert(key.index, b)
            }
            _ => return Err(Error::InvalidArgument(format!("block does not fit slot {key}"))),
        }
        Ok(())
    }

    /// Undoes a mutation returned by [`Denoiser::mutate`].
    pub fn restore(&mut self, mutation: Mutation) -> Result<()> {
        match mutation {
            Mutation::Removed(r) => self.insert_block(r.key, r.block),
            Mutation::Added(key) => self.remove_block(key).map(|_| ()),
        }
    }

    /// View of this model with `mask` applied on every prediction.
    pub fn masked<'a>(&'a self, mask: &'a SkipMask) -> Masked<'a> {
        Masked { model: self, mask }
    }
}

impl ParamSet for Denoiser {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.input.visit(&join(prefix, "input"), f);
        self.time1.visit(&join(prefix, "time1"), f);
        self.time2.visit(&join(prefix, "time2"), f);
        f(join(prefix, "cond_table"), &self.cond_table);
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            if let Some(tr) = &s.transition {
                tr.visit(&join(&p, "transition"), f);
            }
            for (j, b) in s.resnets.iter().enumerate() {
                b.visit(&join(&p, &format!("resnet{j}")), f);
            }
            for (j, b) in s.attns.iter().enumerate() {
                b.visit(&join(&p, &format!("cross_attention{j}")), f);
            }
        }
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        self.time1.visit_mut(&join(prefix, "time1"), f);
        self.time2.visit_mut(&join(prefix, "time2"), f);
        f(join(prefix, "cond_table"), &mut self.cond_table);
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            if let Some(tr) = &mut s.transition {
                tr.visit_mut(&join(&p, "transition"), f);
            }
            for (j, b) in s.resnets.iter_mut().enumerate() {
                b.visit_mut(&join(&p, &format!("resnet{j}")), f);
            }
            for (j, b) in s.attns.iter_mut().enumerate() {
                b.visit_mut(&join(&p, &format!("cross_attention{j}")), f);
            }
        }
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

impl Denoise for Denoiser {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn predict(&self, z: &Array2<f64>, t: &[f64], cond: &[Condition]) -> Result<Prediction> {
        self.forward(z, t, cond)
    }
}

/// A model whose predictions always use a fixed skip mask.
#[derive(Clone, Copy)]
pub struct Masked<'a> {
    pub model: &'a Denoiser,
    pub mask: &'a SkipMask,
}

impl Denoise for Masked<'_> {
    fn data_dim(&self) -> usize {
        self.model.config.data_dim
    }

    fn predict(&self, z: &Array2<f64>, t: &[f64], cond: &[Condition]) -> Result<Prediction> {
        self.model.forward_masked(z, t, cond, self.mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_genome() -> ArchitectureGenome {
        ArchitectureGenome::uniform([4, 6, 8], 1, 1).unwrap()
    }

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig { data_dim: 2, num_classes: 3, time_features: 4, temb_dim: 5, tokens: 2, token_dim: 3, attn_dim: 4 }
    }

    fn inputs(seed: u64, n: usize) -> (Array2<f64>, Vec<f64>, Vec<Condition>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(&mut rng, n, 2, 1.0);
        let t = (0..n).map(|_| rng.gen::<f64>()).collect();
        let c = (0..n)
            .map(|i| if i % 4 == 3 { Condition::Null } else { Condition::Label(i % 3) })
            .collect();
        (z, t, c)
    }

    #[test]
    fn same_seed_same_checksum() {
        let a = Denoiser::build(&tiny_genome(), tiny_config(), 3).unwrap();
        let b = Denoiser::build(&tiny_genome(), tiny_config(), 3).unwrap();
        let c = Denoiser::build(&tiny_genome(), tiny_config(), 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn reference_layouts_build() {
        let cfg = DenoiserConfig::new(2, 8);
        let m = Denoiser::build(&ArchitectureGenome::reference_efficient([8, 16, 32]).unwrap(), cfg, 0).unwrap();
        assert_eq!(m.genome().total_blocks(), 31);
        let (z, t, _) = inputs(0, 5);
        let c = vec![Condition::Label(7); 5];
        assert!(m.forward(&z, &t, &c).is_ok());
    }

    #[test]
    fn param_accounting() {
        let m = Denoiser::build(&tiny_genome(), tiny_config(), 0).unwrap();
        let blocks: usize = m.genome().blocks().iter().map(|b| m.block_param_count(b.key).unwrap()).sum();
        assert_eq!(m.param_count(), m.backbone_param_count() + blocks);
    }

    #[test]
    fn masking_equals_surgery_for_every_block() {
        let m = Denoiser::build(&tiny_genome(), tiny_config(), 1).unwrap();
        let (z, t, c) = inputs(1, 6);
        for spec in m.genome().blocks() {
            let masked = m.forward_masked(&z, &t, &c, &SkipMask::skip_one(spec.key)).unwrap();
            let mut cut = m.clone();
            cut.remove_block(spec.key).unwrap();
            assert_eq!(masked, cut.forward(&z, &t, &c).unwrap(), "{}", spec.key);
        }
    }

    #[test]
    fn remove_add_restore() {
        let mut m = Denoiser::build(&tiny_genome(), tiny_config(), 2).unwrap();
        let before = m.clone();
        let key = BlockKey::new(3, BlockKind::Resnet, 0);
        let n = m.param_count();
        let block_n = m.block_param_count(key).unwrap();
        let undo = m.mutate(Action::remove(key)).unwrap();
        assert_eq!(m.param_count(), n - block_n);
        m.restore(undo).unwrap();
        assert_eq!(m, before);

        let added = m.mutate(Action::add(key)).unwrap();
        assert_eq!(m.genome().stages[3].resnet, 2);
        let copied = m.block(BlockKey::new(3, BlockKind::Resnet, 1)).unwrap();
        match (copied, before.block(key).unwrap()) {
            (Block::Resnet(a), Block::Resnet(b)) => {
                assert_eq!(a.inner, b.inner);
                assert_ne!(a.uid, b.uid);
            }
            _ => unreachable!(),
        }
        m.restore(added).unwrap();
        let (z, t, c) = inputs(2, 4);
        assert_eq!(m.forward(&z, &t, &c).unwrap(), before.forward(&z, &t, &c).unwrap());
    }

    #[test]
    fn empty_slot_and_last_block_errors() {
        let g = ArchitectureGenome::from_counts([4, 6, 8], [(0, 0), (0, 0), (0, 0), (0, 1), (0, 0), (0, 0), (0, 0)]).unwrap();
        let mut m = Denoiser::build(&g, tiny_config(), 0).unwrap();
        assert!(matches!(m.mutate(Action::remove(BlockKey::new(0, BlockKind::Resnet, 0))), Err(Error::NoSuchBlock(_))));
        assert!(m.mutate(Action::remove(BlockKey::new(3, BlockKind::Resnet, 0))).is_err());
    }

    #[test]
    fn down1_edit_matches_efficient_layout() {
        let cfg = DenoiserConfig::new(2, 4);
        let mut m = Denoiser::build(&ArchitectureGenome::reference_origin([4, 8, 16]).unwrap(), cfg, 0).unwrap();
        for _ in 0..2 {
            m.mutate(Action::remove(BlockKey::new(0, BlockKind::CrossAttention, 0))).unwrap();
        }
        let ours = ArchitectureGenome::reference_efficient([4, 8, 16]).unwrap();
        assert_eq!(m.genome().stages[0], ours.stages[0]);
    }

    #[test]
    fn zeroed_block_is_inert() {
        let mut m = Denoiser::build(&tiny_genome(), tiny_config(), 5).unwrap();
        let key = BlockKey::new(1, BlockKind::CrossAttention, 0);
        let width = m.stages[1].width;
        m.stages[1].attns[0] = AttnBlock::zeros(99, width, 3, 4);
        let (z, t, c) = inputs(5, 4);
        assert_eq!(m.forward(&z, &t, &c).unwrap(), m.forward_masked(&z, &t, &c, &SkipMask::skip_one(key)).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = Denoiser::build(&tiny_genome(), tiny_config(), 11).unwrap();
        let (z, t, c) = inputs(11, 5);
        let target = gaussian(&mut ChaCha8Rng::seed_from_u64(12), 5, 2, 1.0);
        let mask = SkipMask::skip_one(BlockKey::new(4, BlockKind::Resnet, 0));
        let loss = |m: &Denoiser| {
            let v = m.forward_masked(&z, &t, &c, &mask).unwrap().value;
            (&v - &target).mapv(|e| e * e).mean().unwrap()
        };
        let (pred, tape) = m.forward_tape(&z, &t, &c, &mask).unwrap();
        let dout = (&pred.value - &target) * (2.0 / target.len() as f64);
        let mut grad = m.zeros_like();
        m.backward(&tape, &dout, &mut grad);
        let analytic = grad.flatten();
        let base = m.flatten();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-5;
        for _ in 0..120 {
            let i = rng.gen_range(0..base.len());
            let mut p = base.clone();
            p[i] += h;
            let mut mp = m.clone();
            mp.assign_flat(&p);
            p[i] -= 2.0 * h;
            let mut mm = m.clone();
            mm.assign_flat(&p);
            let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs()).max(1e-7);
            assert!((fd - analytic[i]).abs() / scale < 1e-3, "param {i}: fd {fd} vs {}", analytic[i]);
        }
    }
}
