//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use snaplab::nets::ArchitectureGenome;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const RUNS_DIR_ENV: &str = "SNAPLAB_RUNS_DIR";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const TIMING: &str = "timing.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Cached,
}

/// One link of a multi-stage chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    /// Upstream stage names.
    pub inputs: Vec<String>,
    /// Run-relative paths this stage wrote.
    pub outputs: Vec<String>,
    /// Parameter checksum of the stage's model, if it produced one.
    pub checksum: Option<String>,
    /// Checksums of the upstream models this stage read, by stage name.
    pub input_checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: RunConfig,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub code_version: String,
    pub schedule: String,
    pub genome: Option<ArchitectureGenome>,
    /// Run-relative artifact paths by role.
    pub artifacts: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub wallclock_s: Option<f64>,
}

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn now() -> String {
    chrono::Local::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// A live run directory.
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: RunManifest,
    started: Instant,
    timing: Vec<(String, f64)>,
}

impl RunDir {
    /// Creates `out`, or `<runs root>/<timestamp>-<name>` when `out` is
    /// absent, and writes the config snapshot and an initial manifest.
    pub fn create(config: &RunConfig, command: &str, argv: &[String], out: Option<&Path>) -> CliResult<RunDir> {
        let root = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let base = runs_root();
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                let mut candidate = base.join(format!("{stamp}-{}", config.name));
                let mut n = 1;
                while candidate.exists() {
                    candidate = base.join(format!("{stamp}-{}-{n}", config.name));
                    n += 1;
                }
                candidate
            }
        };
        if root.join(MANIFEST).exists() {
            return Err(CliError::Usage(format!(
                "{} already holds a run; pick another --out or use --resume",
                root.display()
            )));
        }
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("plots"))?;
        write_atomic(&root.join(CONFIG_SNAPSHOT), config.to_toml().as_bytes())?;
        let manifest = RunManifest {
            command: command.into(),
            argv: argv.to_vec(),
            config: config.clone(),
            config_hash: config.hash(),
            seeds: BTreeMap::from([("master".to_string(), config.seed)]),
            code_version: format!("snaplab {}", env!("CARGO_PKG_VERSION")),
            schedule: "cosine".into(),
            genome: None,
            artifacts: BTreeMap::from([("config".to_string(), CONFIG_SNAPSHOT.to_string())]),
            stages: Vec::new(),
            status: RunStatus::Running,
            error: None,
            started_at: now(),
            finished_at: None,
            wallclock_s: None,
        };
        let run = RunDir { root, manifest, started: Instant::now(), timing: Vec::new() };
        run.save()?;
        Ok(run)
    }

    /// Reopens an existing run for resumption.
    pub fn open(root: &Path, argv: &[String]) -> CliResult<RunDir> {
        let text = std::fs::read_to_string(root.join(MANIFEST))
            .map_err(|e| CliError::Usage(format!("cannot resume {}: {e}", root.display())))?;
        let mut manifest: RunManifest = serde_json::from_str(&text)?;
        manifest.argv = argv.to_vec();
        manifest.status = RunStatus::Running;
        manifest.error = None;
        manifest.finished_at = None;
        manifest.wallclock_s = None;
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("plots"))?;
        let run = RunDir { root: root.to_path_buf(), manifest, started: Instant::now(), timing: Vec::new() };
        run.save()?;
        Ok(run)
    }

    pub fn config(&self) -> &RunConfig {
        &self.manifest.config
    }

    pub fn hash(&self) -> &str {
        &self.manifest.config_hash
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn artifact(&mut self, role: &str, rel: &str) {
        self.manifest.artifacts.insert(role.into(), rel.into());
    }

    pub fn seed(&mut self, role: &str, seed: u64) {
        self.manifest.seeds.insert(role.into(), seed);
    }

    pub fn stage(&mut self, record: StageRecord) {
        match self.manifest.stages.iter_mut().find(|s| s.name == record.name) {
            Some(slot) => *slot = record,
            None => self.manifest.stages.push(record),
        }
    }

    pub fn time(&mut self, phase: &str, seconds: f64) {
        self.timing.push((phase.into(), seconds));
    }

    pub fn save(&self) -> CliResult<()> {
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&self.root.join(MANIFEST), &json)?;
        Ok(())
    }

    /// Records the outcome, checks that every listed artifact exists and
    /// writes the final manifest.
    pub fn finalize(mut self, outcome: CliResult<()>) -> CliResult<()> {
        let total = self.started.elapsed().as_secs_f64();
        self.time("total", total);
        let mut outcome = outcome;
        if outcome.is_ok() {
            if let Err(e) = self.write_timing() {
                outcome = Err(e);
            }
            self.artifact("timing", TIMING);
        }
        if outcome.is_ok() {
            let missing: Vec<String> = self
                .manifest
                .artifacts
                .values()
                .chain(self.manifest.stages.iter().flat_map(|s| s.outputs.iter()))
                .filter(|rel| !self.root.join(rel).exists())
                .cloned()
                .collect();
            if !missing.is_empty() {
                outcome = Err(CliError::Incomplete(missing.join(", ")));
            }
        }
        self.manifest.status = if outcome.is_ok() { RunStatus::Succeeded } else { RunStatus::Failed };
        self.manifest.error = outcome.as_ref().err().map(|e| e.to_string());
        self.manifest.finished_at = Some(now());
        self.manifest.wallclock_s = Some(total);
        self.save()?;
        outcome
    }

    fn write_timing(&self) -> CliResult<()> {
        let mut w = csv::Writer::from_path(self.root.join(TIMING))?;
        w.write_record(["phase", "seconds"])?;
        for (phase, s) in &self.timing {
            w.write_record([phase.as_str(), &format!("{s:.3}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_is_written_and_finalized() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r");
        let cfg = RunConfig::default();
        let mut run = RunDir::create(&cfg, "train", &["train".into()], Some(&out)).unwrap();
        let m: RunManifest = serde_json::from_slice(&std::fs::read(out.join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(m.status, RunStatus::Running);
        assert_eq!(m.config_hash, cfg.hash());
        std::fs::write(out.join("metrics.csv"), "a\n").unwrap();
        run.artifact("metrics", "metrics.csv");
        run.finalize(Ok(())).unwrap();
        let m: RunManifest = serde_json::from_slice(&std::fs::read(out.join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(m.status, RunStatus::Succeeded);
        assert!(m.wallclock_s.is_some());
        assert!(out.join(TIMING).exists() && out.join("checkpoints").is_dir() && out.join("plots").is_dir());
        assert!(!out.join("manifest.json.tmp").exists());
    }

    #[test]
    fn missing_artifact_fails_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r");
        let mut run = RunDir::create(&RunConfig::default(), "x", &[], Some(&out)).unwrap();
        run.artifact("metrics", "metrics.csv");
        assert!(run.finalize(Ok(())).is_err());
        let m: RunManifest = serde_json::from_slice(&std::fs::read(out.join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(m.status, RunStatus::Failed);
        assert!(m.error.unwrap().contains("metrics.csv"));
    }

    #[test]
    fn refuses_to_overwrite_a_run() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r");
        RunDir::create(&RunConfig::default(), "x", &[], Some(&out)).unwrap();
        assert!(RunDir::create(&RunConfig::default(), "x", &[], Some(&out)).is_err());
    }

    #[test]
    fn stage_records_replace_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(&RunConfig::default(), "x", &[], Some(&dir.path().join("r"))).unwrap();
        let rec = |status| StageRecord {
            name: "a".into(),
            status,
            inputs: vec![],
            outputs: vec![],
            checksum: None,
            input_checksums: BTreeMap::new(),
        };
        run.stage(rec(StageStatus::Ran));
        run.stage(rec(StageStatus::Cached));
        assert_eq!(run.manifest.stages.len(), 1);
        assert_eq!(run.manifest.stages[0].status, StageStatus::Cached);
    }
}
