//! Subcommand bodies. Each takes a live run directory and fills it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use snaplab::checkpoint;
use snaplab::decoder::{distill_decoder, prune_decoder, write_decoder_report, Decoder, DecoderSpec, LatentPipeline};
use snaplab::distill::{distill, landing_report, StageResult};
use snaplab::evaldata::{
    condition_consistency, distribution_distance, plot_curves, to_conditions, write_curve_csv, ConditionalDataset,
    CurveSettings, Evaluator, Probe, ProbeTraining,
};
use snaplab::evolve::{
    build_latency_table, cost_model_table, evolve, genome_latency, genome_space, machine_id, write_history_csv,
    BlockBench, ConsistencyEvaluator, LatencyTable,
};
use snaplab::nets::{ArchitectureGenome, Denoiser};
use snaplab::sampler::{sample, AnalyticDenoiser, Denoise, GuidanceScale};
use snaplab::schedule::NoiseSchedule;
use snaplab::trainer::{fit, MetricRow};

use crate::config::{seeds, LutSource, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::RunDir;

pub const METRICS: &str = "metrics.csv";

/// Accepts a checkpoint stem, either of its two files, or a run directory
/// (whose `checkpoints/final` is used).
pub fn checkpoint_stem(p: &Path) -> PathBuf {
    if p.is_dir() {
        return p.join("checkpoints").join("final");
    }
    match p.extension().and_then(|e| e.to_str()) {
        Some("npz") | Some("json") => p.with_extension(""),
        _ => p.to_path_buf(),
    }
}

pub fn load_model(p: &Path) -> CliResult<Denoiser> {
    let stem = checkpoint_stem(p);
    checkpoint::load(&stem)
        .map(|(m, _)| m)
        .map_err(|e| CliError::Usage(format!("cannot load checkpoint {}: {e}", stem.display())))
}

pub fn save_model(run: &mut RunDir, model: &Denoiser, name: &str, step: u64) -> CliResult<String> {
    let rel = format!("checkpoints/{name}");
    let notes = serde_json::json!({ "config_hash": run.hash(), "stage": name });
    checkpoint::save(model, &run.path(&rel), step, notes)?;
    run.artifact(&format!("checkpoint:{name}"), &format!("{rel}.npz"));
    Ok(rel)
}

/// Writes `rows` with serde headers.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn fresh_model(cfg: &RunConfig) -> CliResult<Denoiser> {
    Ok(Denoiser::build(&cfg.genome()?, cfg.denoiser_config(), cfg.stage_seed(seeds::MODEL))?)
}

pub fn probe_for(data: &ConditionalDataset) -> Probe {
    Probe::train(data, ProbeTraining::default())
}

/// Either a trained model or the exact Bayes denoiser of the dataset.
pub enum Source {
    Model(Box<Denoiser>),
    Oracle(AnalyticDenoiser),
}

impl Source {
    pub fn from_flag(model: Option<&Path>, data: &ConditionalDataset) -> CliResult<Source> {
        Ok(match model {
            Some(p) => Source::Model(Box::new(load_model(p)?)),
            None => Source::Oracle(data.oracle(NoiseSchedule::Cosine)),
        })
    }

    pub fn denoiser(&self) -> &dyn Denoise {
        match self {
            Source::Model(m) => m.as_ref(),
            Source::Oracle(o) => o,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Source::Model(_) => "model",
            Source::Oracle(_) => "oracle",
        }
    }
}

#[derive(Serialize)]
struct TrainRow<'a> {
    step: usize,
    loss: f64,
    seed: u64,
    config_hash: &'a str,
}

pub fn write_train_metrics(path: &Path, log: &[MetricRow], seed: u64, hash: &str) -> CliResult<()> {
    let rows: Vec<TrainRow> = log.iter().map(|r| TrainRow { step: r.step, loss: r.loss, seed, config_hash: hash }).collect();
    write_csv(path, &rows)
}

pub fn train(run: &mut RunDir) -> CliResult<()> {
    let cfg = run.config().clone();
    let data = cfg.dataset();
    let tc = cfg.train_config();
    run.seed("train", tc.seed);
    run.seed("model", cfg.stage_seed(seeds::MODEL));
    let model = fresh_model(&cfg)?;
    run.manifest.genome = Some(model.genome());
    run.save()?;
    let t0 = Instant::now();
    let out = fit(model, &data, &tc)?;
    run.time("train", t0.elapsed().as_secs_f64());
    write_train_metrics(&run.path(METRICS), &out.log, tc.seed, run.hash())?;
    run.artifact("metrics", METRICS);
    save_model(run, &out.model, "final", tc.steps as u64)?;
    Ok(())
}

#[derive(Serialize)]
struct DistillRow<'a> {
    stage: usize,
    step: usize,
    loss_total: f64,
    loss_dstl: f64,
    loss_ori: f64,
    used_cfg: bool,
    w: Option<f64>,
    seed: u64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct LandingRow<'a> {
    stage: usize,
    teacher_steps: usize,
    student_steps: usize,
    student_mse: f64,
    teacher_floor: f64,
    seed: u64,
    config_hash: &'a str,
}

pub fn write_distill_log(path: &Path, stages: &[StageResult], seed: u64, hash: &str) -> CliResult<()> {
    let rows: Vec<DistillRow> = stages
        .iter()
        .flat_map(|s| s.log.iter())
        .map(|r| DistillRow {
            stage: r.stage,
            step: r.step,
            loss_total: r.loss_total,
            loss_dstl: r.loss_dstl,
            loss_ori: r.loss_ori,
            used_cfg: r.used_cfg,
            w: r.w,
            seed,
            config_hash: hash,
        })
        .collect();
    write_csv(path, &rows)
}

pub fn distill_cmd(run: &mut RunDir, teacher: &Path, student: &str) -> CliResult<()> {
    let cfg = run.config().clone();
    let data = cfg.dataset();
    let dc = cfg.distill_config();
    run.seed("distill", dc.seed);
    let teacher = load_model(teacher)?;
    let init = if student == "init" { teacher.clone() } else { load_model(Path::new(student))? };
    run.manifest.genome = Some(init.genome());
    run.save()?;
    let t0 = Instant::now();
    let stages = distill(&teacher, init, &data, &dc)?;
    run.time("distill", t0.elapsed().as_secs_f64());

    let hash = run.hash().to_string();
    write_distill_log(&run.path(METRICS), &stages, dc.seed, &hash)?;
    run.artifact("metrics", METRICS);

    let landing_seed = dc.seed ^ 0x1A4D;
    let mut landing = Vec::new();
    for (i, s) in stages.iter().enumerate() {
        let stage_teacher = if i == 0 { &teacher } else { &stages[i - 1].student };
        let r = landing_report(&s.student, stage_teacher, &data, s.student_steps, cfg.distill.holdout, landing_seed)?;
        landing.push(LandingRow {
            stage: i,
            teacher_steps: s.teacher_steps,
            student_steps: s.student_steps,
            student_mse: r.student_mse,
            teacher_floor: r.teacher_floor,
            seed: landing_seed,
            config_hash: &hash,
        });
        if stages.len() > 1 {
            save_model(run, &s.student, &format!("stage{i}_{}steps", s.student_steps), dc.iterations as u64)?;
        }
    }
    write_csv(&run.path("landing.csv"), &landing)?;
    run.artifact("landing", "landing.csv");
    let last = stages.last().expect("at least one stage");
    save_model(run, &last.student, "final", (dc.iterations * stages.len()) as u64)?;
    Ok(())
}

/// Latency table for `genome` from a file or the configured source.
pub fn latency_table(cfg: &RunConfig, genome: &ArchitectureGenome, lut: Option<&Path>) -> CliResult<LatencyTable> {
    if let Some(p) = lut.or(cfg.evolve.lut.as_deref()) {
        return Ok(LatencyTable::load(p)?);
    }
    let e = &cfg.evolve;
    let keys = genome_space(genome);
    Ok(match e.lut_source {
        LutSource::CostModel => cost_model_table(&keys, &cfg.denoiser_config(), e.lut_batch, e.lut_gmacs)?,
        LutSource::Bench => {
            let bench = BlockBench { batch: e.lut_batch, ..BlockBench::new(cfg.denoiser_config()) };
            build_latency_table(&keys, |k| bench.measure(k), e.bench_reps, &machine_id())?
        }
    })
}

#[derive(Serialize)]
struct RoundRow<'a> {
    round: usize,
    latency_ms: f64,
    quality: f64,
    total_blocks: usize,
    seed: u64,
    config_hash: &'a str,
}

/// Outcome of an evolution run already written into `run`.
pub struct Evolved {
    pub model: Denoiser,
    pub target_ms: f64,
    pub start_latency_ms: f64,
    pub final_latency_ms: f64,
}

/// Evolves `model` and writes `history.csv`, `lut.csv` and `<prefix>genome.json`.
pub fn evolve_into(run: &mut RunDir, model: Denoiser, lut: Option<&Path>, prefix: &str) -> CliResult<Evolved> {
    let cfg = run.config().clone();
    let data = cfg.dataset();
    let genome = model.genome();
    let table = latency_table(&cfg, &genome, lut)?;
    let lut_rel = format!("{prefix}lut.csv");
    table.save(&run.path(&lut_rel))?;
    run.artifact(&format!("{prefix}lut"), &lut_rel);
    let start = genome_latency(&genome, &table)?;
    let target = cfg.evolve.target_ms.unwrap_or(cfg.evolve.target_fraction * start);
    let ec = cfg.evolve_config(target);
    run.seed("evolve", ec.train.seed);

    let probe = probe_for(&data);
    let mut evaluator = ConsistencyEvaluator {
        dataset: &data,
        probe: &probe,
        probe_checksum: probe.checksum.clone(),
        eval_steps: ec.eval_steps,
        cfg_scale: ec.cfg_scale,
        n_samples: cfg.evolve.n_samples,
        seed: cfg.stage_seed(seeds::EVAL),
    };
    let out = evolve(model, &data, &table, &ec, &mut evaluator)?;

    let hash = run.hash().to_string();
    let history_rel = format!("{prefix}history.csv");
    write_history_csv(&run.path(&history_rel), &out.history, ec.train.seed, &hash)?;
    run.artifact(&format!("{prefix}history"), &history_rel);
    let genome_rel = format!("{prefix}genome.json");
    std::fs::write(run.path(&genome_rel), out.genome.to_json()?)?;
    run.artifact(&format!("{prefix}genome"), &genome_rel);
    let rounds: Vec<RoundRow> = out
        .history
        .iter()
        .map(|h| RoundRow {
            round: h.round,
            latency_ms: h.latency_ms,
            quality: h.quality,
            total_blocks: h.genome.total_blocks(),
            seed: ec.train.seed,
            config_hash: &hash,
        })
        .collect();
    let metrics_rel = format!("{prefix}{METRICS}");
    write_csv(&run.path(&metrics_rel), &rounds)?;
    run.artifact(&format!("{prefix}metrics"), &metrics_rel);
    let final_latency = genome_latency(&out.genome, &table)?;
    Ok(Evolved { model: out.model, target_ms: target, start_latency_ms: start, final_latency_ms: final_latency })
}

pub fn evolve_cmd(run: &mut RunDir, model: Option<&Path>, lut: Option<&Path>) -> CliResult<()> {
    let cfg = run.config().clone();
    let model = match model {
        Some(p) => load_model(p)?,
        None => fresh_model(&cfg)?,
    };
    let t0 = Instant::now();
    let ev = evolve_into(run, model, lut, "")?;
    run.time("evolve", t0.elapsed().as_secs_f64());
    run.manifest.genome = Some(ev.model.genome());
    save_model(run, &ev.model, "final", 0)?;
    Ok(())
}

#[derive(Serialize)]
struct SampleRow<'a> {
    index: usize,
    label: usize,
    x0: f64,
    x1: f64,
    seed: u64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct SampleMetrics<'a> {
    source: &'a str,
    steps: usize,
    cfg_scale: f64,
    n: usize,
    dist: f64,
    consistency: f64,
    seed: u64,
    config_hash: &'a str,
}

pub fn sample_cmd(run: &mut RunDir, model: Option<&Path>) -> CliResult<()> {
    let cfg = run.config().clone();
    let s = &cfg.sample;
    let data = cfg.dataset();
    let source = Source::from_flag(model, &data)?;
    if let Source::Model(m) = &source {
        run.manifest.genome = Some(m.genome());
    }
    let seed = cfg.stage_seed(seeds::SAMPLE);
    run.seed("sample", seed);
    let labels = data.balanced_labels(s.n);
    let t0 = Instant::now();
    let x = sample(
        source.denoiser(),
        &NoiseSchedule::Cosine,
        s.steps,
        &to_conditions(&labels),
        GuidanceScale::new(s.cfg_scale)?,
        seed,
    )?;
    run.time("sample", t0.elapsed().as_secs_f64());
    ndarray_npy::write_npy(run.path("samples.npy"), &x).map_err(|e| CliError::Npy(e.to_string()))?;
    run.artifact("samples", "samples.npy");

    let hash = run.hash().to_string();
    let rows: Vec<SampleRow> = x
        .rows()
        .into_iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (r, &label))| SampleRow { index: i, label, x0: r[0], x1: r[1], seed, config_hash: &hash })
        .collect();
    write_csv(&run.path("samples.csv"), &rows)?;
    run.artifact("samples_manifest", "samples.csv");

    let probe = probe_for(&data);
    let ev = Evaluator { dataset: &data, probe: &probe, probe_checksum: &probe.checksum, schedule: NoiseSchedule::Cosine };
    let metrics = SampleMetrics {
        source: source.label(),
        steps: s.steps,
        cfg_scale: s.cfg_scale,
        n: s.n,
        dist: distribution_distance(&x, &ev.reference(s.n))?,
        consistency: condition_consistency(&x, &labels, &probe, &probe.checksum)?,
        seed,
        config_hash: &hash,
    };
    write_csv(&run.path(METRICS), &[metrics])?;
    run.artifact("metrics", METRICS);
    Ok(())
}

pub fn bench_cmd(run: &mut RunDir, model: Option<&Path>) -> CliResult<()> {
    let cfg = run.config().clone();
    let genome = match model {
        Some(p) => load_model(p)?.genome(),
        None => cfg.genome()?,
    };
    run.manifest.genome = Some(genome.clone());
    let t0 = Instant::now();
    let table = latency_table(&cfg, &genome, None)?;
    run.time("bench", t0.elapsed().as_secs_f64());
    table.save(&run.path("lut.csv"))?;
    run.artifact("lut", "lut.csv");

    #[derive(Serialize)]
    struct Row<'a> {
        total_blocks: usize,
        latency_ms: f64,
        source: &'a str,
        seed: u64,
        config_hash: &'a str,
    }
    let source = match cfg.evolve.lut_source {
        LutSource::CostModel => "cost-model",
        LutSource::Bench => "bench",
    };
    let row = Row {
        total_blocks: genome.total_blocks(),
        latency_ms: genome_latency(&genome, &table)?,
        source,
        seed: cfg.seed,
        config_hash: run.hash(),
    };
    write_csv(&run.path(METRICS), &[row])?;
    run.artifact("metrics", METRICS);
    Ok(())
}

pub fn save_decoder(run: &mut RunDir, decoder: &Decoder, name: &str) -> CliResult<()> {
    let rel = format!("checkpoints/{name}");
    checkpoint::save_params(decoder, &run.path(&format!("{rel}.npz")))?;
    std::fs::write(run.path(&format!("{rel}.json")), serde_json::to_vec_pretty(&decoder.spec)?)?;
    run.artifact(&format!("checkpoint:{name}"), &format!("{rel}.npz"));
    Ok(())
}

pub fn load_decoder(stem: &Path) -> CliResult<Decoder> {
    let spec: DecoderSpec = serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
    let mut d = Decoder::new(spec, 0)?;
    checkpoint::load_params(&mut d, &stem.with_extension("npz"))?;
    Ok(d)
}

#[derive(Serialize)]
struct LossRow<'a> {
    step: usize,
    loss: f64,
    seed: u64,
    config_hash: &'a str,
}

pub fn decoder_cmd(run: &mut RunDir, teacher: Option<&Path>) -> CliResult<()> {
    let cfg = run.config().clone();
    let dc = cfg.decoder_config();
    run.seed("decoder", dc.seed);
    let teacher = match teacher {
        Some(p) if p.is_dir() => load_decoder(&p.join("checkpoints").join("decoder_teacher"))?,
        Some(p) => load_decoder(&checkpoint_stem(p))?,
        None => Decoder::new(cfg.decoder_spec(), dc.seed)?,
    };
    let pipeline = LatentPipeline::synthetic(teacher.spec.latent_dim(), cfg.data.classes, cfg.decoder.latent_std, dc.seed)?;
    let student = prune_decoder(&teacher, cfg.decoder.ratio, dc.seed.wrapping_add(1))?;
    let t0 = Instant::now();
    let out = distill_decoder(&pipeline, &teacher, student, &dc)?;
    run.time("decoder-distill", t0.elapsed().as_secs_f64());

    write_decoder_report(&run.path("decoder_report.csv"), &out.report, cfg.decoder.ratio, dc.seed, run.hash())?;
    run.artifact("decoder_report", "decoder_report.csv");
    let hash = run.hash().to_string();
    let rows: Vec<LossRow> = out
        .losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossRow { step: i + 1, loss, seed: dc.seed, config_hash: &hash })
        .collect();
    write_csv(&run.path(METRICS), &rows)?;
    run.artifact("metrics", METRICS);
    save_decoder(run, &teacher, "decoder_teacher")?;
    save_decoder(run, &out.student, "decoder_student")?;
    Ok(())
}

/// Writes one curve CSV for `model` at `steps`; returns its points.
pub fn curve_into(
    run: &mut RunDir,
    model: &dyn Denoise,
    steps: usize,
    rel: &str,
    data: &ConditionalDataset,
    probe: &Probe,
) -> CliResult<Vec<snaplab::evaldata::TradeoffPoint>> {
    let cfg = run.config().clone();
    let settings = CurveSettings { steps, n_samples: cfg.eval.n_samples, seed: cfg.stage_seed(seeds::EVAL) };
    let ev = Evaluator { dataset: data, probe, probe_checksum: &probe.checksum, schedule: NoiseSchedule::Cosine };
    let points = ev.curve(model, settings, &cfg.eval.w_list)?;
    write_curve_csv(&run.path(rel), &points, settings, run.hash())?;
    run.artifact(rel.trim_end_matches(".csv"), rel);
    Ok(points)
}

pub fn eval_curve_cmd(run: &mut RunDir, model: Option<&Path>) -> CliResult<()> {
    let cfg = run.config().clone();
    let data = cfg.dataset();
    let source = Source::from_flag(model, &data)?;
    if let Source::Model(m) = &source {
        run.manifest.genome = Some(m.genome());
    }
    run.seed("eval", cfg.stage_seed(seeds::EVAL));
    let probe = probe_for(&data);
    let t0 = Instant::now();
    let points = curve_into(run, source.denoiser(), cfg.eval.steps, "curve.csv", &data, &probe)?;
    run.time("eval-curve", t0.elapsed().as_secs_f64());
    std::fs::copy(run.path("curve.csv"), run.path(METRICS))?;
    run.artifact("metrics", METRICS);
    let label = format!("{} ({} steps)", source.label(), cfg.eval.steps);
    plot_curves(&run.path("plots/curve.svg"), &[(label, points)])?;
    run.artifact("plot", "plots/curve.svg");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_resolve() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(checkpoint_stem(dir.path()), dir.path().join("checkpoints/final"));
        assert_eq!(checkpoint_stem(Path::new("a/b.npz")), Path::new("a/b"));
        assert_eq!(checkpoint_stem(Path::new("a/b.json")), Path::new("a/b"));
        assert_eq!(checkpoint_stem(Path::new("a/b")), Path::new("a/b"));
    }
}
