use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::genome::{ArchitectureGenome, BlockKey};
use crate::error::{Error, Result};

/// Blocks replaced by the identity for one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipMask {
    pub skipped: BTreeSet<BlockKey>,
}

impl SkipMask {
    pub fn execute_all() -> Self {
        SkipMask::default()
    }

    pub fn skip_one(key: BlockKey) -> Self {
        SkipMask { skipped: BTreeSet::from([key]) }
    }

    pub fn is_skipped(&self, key: &BlockKey) -> bool {
        self.skipped.contains(key)
    }
}

/// Per-block probability of *executing* (vs. identity) during robust training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipConfig {
    pub execute_probability: f64,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

impl Default for SkipConfig {
    fn default() -> Self {
        SkipConfig { execute_probability: 0.9, overrides: BTreeMap::new() }
    }
}

impl SkipConfig {
    pub fn uniform(execute_probability: f64) -> Result<Self> {
        let c = SkipConfig { execute_probability, overrides: BTreeMap::new() };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.execute_probability) || !self.overrides.values().all(|p| ok(*p)) {
            return Err(Error::InvalidArgument("skip probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Overrides are keyed by the block's display form, e.g. `stage0/resnet[1]`.
    pub fn probability(&self, key: &BlockKey) -> f64 {
        self.overrides.get(&key.to_string()).copied().unwrap_or(self.execute_probability)
    }

    pub fn sample_mask<R: Rng + ?Sized>(&self, genome: &ArchitectureGenome, rng: &mut R) -> SkipMask {
        let skipped = genome
            .blocks()
            .into_iter()
            .filter(|b| rng.gen::<f64>() >= self.probability(&b.key))
            .map(|b| b.key)
            .collect();
        SkipMask { skipped }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::BlockKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probabilities_respected() {
        let g = ArchitectureGenome::uniform([4, 8, 16], 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SkipConfig::uniform(1.0).unwrap().sample_mask(&g, &mut rng).skipped.is_empty());
        assert_eq!(SkipConfig::uniform(0.0).unwrap().sample_mask(&g, &mut rng).skipped.len(), 14);
        let mut cfg = SkipConfig::uniform(1.0).unwrap();
        let key = BlockKey::new(2, BlockKind::Resnet, 0);
        cfg.overrides.insert(key.to_string(), 0.0);
        assert_eq!(cfg.sample_mask(&g, &mut rng), SkipMask::skip_one(key));
        assert!(SkipConfig::uniform(1.5).is_err());
    }

    #[test]
    fn seeded_masks_reproduce() {
        let g = ArchitectureGenome::uniform([4, 8, 16], 2, 2).unwrap();
        let cfg = SkipConfig::default();
        let a = cfg.sample_mask(&g, &mut ChaCha8Rng::seed_from_u64(9));
        let b = cfg.sample_mask(&g, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
