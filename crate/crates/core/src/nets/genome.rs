use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    CrossAttention,
    Resnet,
}

impl BlockKind {
    pub const ALL: [BlockKind; 2] = [BlockKind::CrossAttention, BlockKind::Resnet];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::CrossAttention => "cross_attention",
            BlockKind::Resnet => "resnet",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_attention" => Ok(BlockKind::CrossAttention),
            "resnet" => Ok(BlockKind::Resnet),
            other => Err(Error::InvalidArgument(format!("unknown block kind {other:?}"))),
        }
    }
}

/// Position of a block: stage `i`, index `j` among the blocks of its kind.
///
/// Field order gives the `(stage, index, kind)` lexicographic ordering used
/// for tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockKey {
    pub stage: usize,
    pub index: usize,
    pub kind: BlockKind,
}

impl BlockKey {
    pub fn new(stage: usize, kind: BlockKind, index: usize) -> Self {
        BlockKey { stage, index, kind }
    }
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage{}/{}[{}]", self.stage, self.kind, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub key: BlockKey,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageRole {
    Down,
    Mid,
    Up,
}

/// One stage record: feature width plus block counts of each kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub width: usize,
    pub cross_attention: usize,
    pub resnet: usize,
}

impl StageSpec {
    pub fn new(name: impl Into<String>, width: usize, cross_attention: usize, resnet: usize) -> Self {
        StageSpec { name: name.into(), width, cross_attention, resnet }
    }

    pub fn count(&self, kind: BlockKind) -> usize {
        match kind {
            BlockKind::CrossAttention => self.cross_attention,
            BlockKind::Resnet => self.resnet,
        }
    }

    pub fn count_mut(&mut self, kind: BlockKind) -> &mut usize {
        match kind {
            BlockKind::CrossAttention => &mut self.cross_attention,
            BlockKind::Resnet => &mut self.resnet,
        }
    }
}

/// Execution order inside a stage: resnet `j` then cross-attention `j`,
/// continuing with whichever kind has blocks left.
pub fn stage_order(cross_attention: usize, resnet: usize) -> Vec<(BlockKind, usize)> {
    let mut order = Vec::with_capacity(cross_attention + resnet);
    for j in 0..cross_attention.max(resnet) {
        if j < resnet {
            order.push((BlockKind::Resnet, j));
        }
        if j < cross_attention {
            order.push((BlockKind::CrossAttention, j));
        }
    }
    order
}

/// UNet-shaped stage list: `n` down stages, one mid stage, `n` up stages with
/// mirrored widths. Up stage `k` receives a skip from down stage `n - 1 - k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureGenome {
    pub stages: Vec<StageSpec>,
}

const TAB_NAMES: [&str; 7] = ["down1", "down2", "down3", "mid", "up1", "up2", "up3"];

impl ArchitectureGenome {
    pub fn new(stages: Vec<StageSpec>) -> Result<Self> {
        let g = ArchitectureGenome { stages };
        g.validate()?;
        Ok(g)
    }

    /// Seven stages over widths `[w1, w2, w3]` with the same block counts everywhere.
    pub fn uniform(widths: [usize; 3], cross_attention: usize, resnet: usize) -> Result<Self> {
        Self::from_counts(widths, [(cross_attention, resnet); 7])
    }

    /// Seven stages over `widths` with per-stage `(cross_attention, resnet)` counts.
    pub fn from_counts(widths: [usize; 3], counts: [(usize, usize); 7]) -> Result<Self> {
        let stage_widths = [widths[0], widths[1], widths[2], widths[2], widths[2], widths[1], widths[0]];
        let stages = TAB_NAMES
            .iter()
            .zip(stage_widths)
            .zip(counts)
            .map(|((name, w), (ca, r))| StageSpec::new(*name, w, ca, r))
            .collect();
        Self::new(stages)
    }

    /// Block layout of the original large denoiser, widths scaled down.
    pub fn reference_origin(widths: [usize; 3]) -> Result<Self> {
        Self::from_counts(widths, [(2, 2), (2, 2), (2, 2), (1, 7), (3, 3), (3, 3), (3, 3)])
    }

    /// Block layout of the evolved efficient denoiser, widths scaled down.
    pub fn reference_efficient(widths: [usize; 3]) -> Result<Self> {
        Self::from_counts(widths, [(0, 2), (2, 2), (2, 1), (1, 4), (6, 2), (3, 3), (0, 3)])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages.len();
        if n == 0 || n % 2 == 0 {
            return Err(Error::InvalidGenome(format!("need an odd number of stages, got {n}")));
        }
        if self.stages.iter().any(|s| s.width == 0) {
            return Err(Error::InvalidGenome("stage widths must be > 0".into()));
        }
        let half = n / 2;
        for k in 0..half {
            let (down, up) = (&self.stages[k], &self.stages[n - 1 - k]);
            if down.width != up.width {
                return Err(Error::InvalidGenome(format!(
                    "stage {} ({}) and stage {} ({}) must share a width for the skip connection",
                    k,
                    down.width,
                    n - 1 - k,
                    up.width
                )));
            }
        }
        if self.total_blocks() == 0 {
            return Err(Error::InvalidGenome("genome has no blocks".into()));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.cross_attention + s.resnet).sum()
    }

    pub fn role(&self, stage: usize) -> StageRole {
        let half = self.stages.len() / 2;
        match stage.cmp(&half) {
            std::cmp::Ordering::Less => StageRole::Down,
            std::cmp::Ordering::Equal => StageRole::Mid,
            std::cmp::Ordering::Greater => StageRole::Up,
        }
    }

    /// Down stage feeding the skip connection of up stage `stage`.
    pub fn skip_source(&self, stage: usize) -> Option<usize> {
        (self.role(stage) == StageRole::Up).then(|| self.stages.len() - 1 - stage)
    }

    pub fn contains(&self, key: BlockKey) -> bool {
        self.stages.get(key.stage).is_some_and(|s| key.index < s.count(key.kind))
    }

    /// All blocks in execution order.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                stage_order(s.cross_attention, s.resnet)
                    .into_iter()
                    .map(move |(kind, j)| BlockSpec { key: BlockKey::new(i, kind, j), width: s.width })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: ArchitectureGenome = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleaved_order() {
        use BlockKind::*;
        assert_eq!(
            stage_order(3, 1),
            vec![(Resnet, 0), (CrossAttention, 0), (CrossAttention, 1), (CrossAttention, 2)]
        );
        assert!(stage_order(0, 0).is_empty());
    }

    #[test]
    fn reference_layouts() {
        let origin = ArchitectureGenome::reference_origin([32, 64, 128]).unwrap();
        let ours = ArchitectureGenome::reference_efficient([32, 64, 128]).unwrap();
        assert_eq!(origin.stages[0].cross_attention, 2);
        assert_eq!(ours.stages[0].cross_attention, 0);
        assert_eq!(origin.stages[3].resnet, 7);
        assert_eq!(ours.stages[4].cross_attention, 6);
        assert_eq!(origin.total_blocks(), 38);
        assert_eq!(ours.total_blocks(), 31);
    }

    #[test]
    fn invalid_genomes() {
        assert!(ArchitectureGenome::uniform([8, 16, 32], 0, 0).is_err());
        let mut g = ArchitectureGenome::uniform([8, 16, 32], 1, 1).unwrap();
        g.stages[6].width = 9;
        assert!(g.validate().is_err());
        g.stages.pop();
        assert!(g.validate().is_err());
    }

    #[test]
    fn key_ordering_is_stage_index_kind() {
        let a = BlockKey::new(0, BlockKind::Resnet, 0);
        let b = BlockKey::new(0, BlockKind::CrossAttention, 1);
        let c = BlockKey::new(1, BlockKind::CrossAttention, 0);
        let mut v = vec![c, b, a];
        v.sort();
        assert_eq!(v, vec![a, b, c]);
    }

    #[test]
    fn json_round_trip() {
        let g = ArchitectureGenome::reference_efficient([4, 8, 16]).unwrap();
        assert_eq!(ArchitectureGenome::from_json(&g.to_json().unwrap()).unwrap(), g);
        assert!(ArchitectureGenome::from_json(r#"{"stages": []}"#).is_err());
    }
}
