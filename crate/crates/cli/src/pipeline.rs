//! Multi-stage chains: the full base-teacher to 8-step efficient-student
//! pipeline, and the direct-versus-progressive comparison.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use snaplab::checkpoint;
use snaplab::distill::{distill, landing_report, DistillConfig, DistillMode};
use snaplab::evaldata::{plot_curves, read_curve_csv, ConditionalDataset, CurveSettings, Evaluator, Probe};
use snaplab::nets::{Denoiser, ParamSet};
use snaplab::schedule::NoiseSchedule;
use snaplab::trainer::fit;

use crate::commands::{curve_into, evolve_into, fresh_model, probe_for, save_model, write_csv, write_distill_log, write_train_metrics};
use crate::config::seeds;
use crate::error::{CliError, CliResult};
use crate::run::{RunDir, StageRecord, StageStatus};

/// Stage names in execution order.
pub const STAGES: [&str; 9] = [
    "teacher_base",
    "teacher_16",
    "evolved",
    "efficient_16",
    "efficient_8",
    "curve_teacher",
    "curve_efficient_16",
    "curve_efficient_8",
    "plot",
];

/// Runs `build` unless the manifest already lists the stage and every output
/// it recorded is still on disk.
fn stage<F>(run: &mut RunDir, name: &str, inputs: &[(&str, &Denoiser)], build: F) -> CliResult<StageStatus>
where
    F: FnOnce(&mut RunDir) -> CliResult<(Vec<String>, Option<String>)>,
{
    let cached = run
        .manifest
        .stages
        .iter()
        .find(|s| s.name == name)
        .is_some_and(|s| s.outputs.iter().all(|o| run.path(o).exists()));
    let input_checksums: BTreeMap<String, String> =
        inputs.iter().map(|(n, m)| (n.to_string(), m.checksum())).collect();
    if cached {
        let rec = run.manifest.stages.iter_mut().find(|s| s.name == name).expect("checked above");
        rec.status = StageStatus::Cached;
        rec.input_checksums = input_checksums;
        for o in rec.outputs.clone() {
            run.artifact(&format!("{name}:{o}"), &o);
        }
        run.save()?;
        return Ok(StageStatus::Cached);
    }
    let t0 = Instant::now();
    let (outputs, checksum) = build(run).map_err(|e| e.in_stage(name))?;
    run.time(name, t0.elapsed().as_secs_f64());
    for o in &outputs {
        run.artifact(&format!("{name}:{o}"), o);
    }
    run.stage(StageRecord {
        name: name.into(),
        status: StageStatus::Ran,
        inputs: inputs.iter().map(|(n, _)| n.to_string()).collect(),
        outputs,
        checksum,
        input_checksums,
    });
    run.save()?;
    Ok(StageStatus::Ran)
}

/// A stage whose product is a model checkpoint at `checkpoints/<name>`.
fn model_stage<F>(run: &mut RunDir, name: &str, inputs: &[(&str, &Denoiser)], build: F) -> CliResult<Denoiser>
where
    F: FnOnce(&mut RunDir) -> CliResult<(Denoiser, Vec<String>)>,
{
    let mut produced = None;
    let status = stage(run, name, inputs, |run| {
        let (model, mut extra) = build(run)?;
        let rel = save_model(run, &model, name, 0)?;
        extra.push(format!("{rel}.npz"));
        extra.push(format!("{rel}.json"));
        let sum = model.checksum();
        produced = Some(model);
        Ok((extra, Some(sum)))
    })?;
    match (status, produced) {
        (StageStatus::Ran, Some(m)) => Ok(m),
        _ => {
            let stem = run.path(&format!("checkpoints/{name}"));
            let (m, _) = checkpoint::load(&stem).map_err(|e| CliError::from(e).in_stage(name))?;
            Ok(m)
        }
    }
}

fn distill_stage_config(base: &DistillConfig, teacher_steps: usize, student_steps: usize, p: f64, k: u64) -> DistillConfig {
    DistillConfig {
        teacher_steps,
        student_steps,
        cfg_probability: p,
        mode: DistillMode::Direct,
        seed: base.seed.wrapping_add(k),
        ..base.clone()
    }
}

fn run_distill(
    run: &mut RunDir,
    name: &str,
    teacher: &Denoiser,
    init: Denoiser,
    data: &ConditionalDataset,
    dc: &DistillConfig,
) -> CliResult<(Denoiser, Vec<String>)> {
    let stages = distill(teacher, init, data, dc)?;
    let rel = format!("{name}_metrics.csv");
    write_distill_log(&run.path(&rel), &stages, dc.seed, &run.hash().to_string())?;
    let student = stages.into_iter().last().expect("one stage").student;
    Ok((student, vec![rel]))
}

/// Base teacher, 16-step teacher, evolved genome, 16-step and 8-step
/// efficient students, then tradeoff curves for the teacher and both students.
pub fn reproduce(run: &mut RunDir) -> CliResult<()> {
    let cfg = run.config().clone();
    let data = cfg.dataset();
    let base = cfg.distill_config();
    run.seed("train", cfg.stage_seed(seeds::TRAIN));
    run.seed("distill", base.seed);
    run.seed("eval", cfg.stage_seed(seeds::EVAL));
    run.save()?;

    let teacher = model_stage(run, "teacher_base", &[], |run| {
        let tc = cfg.train_config();
        let out = fit(fresh_model(&cfg)?, &data, &tc)?;
        let rel = "teacher_base_metrics.csv".to_string();
        write_train_metrics(&run.path(&rel), &out.log, tc.seed, run.hash())?;
        Ok((out.model, vec![rel]))
    })?;

    let teacher_16 = model_stage(run, "teacher_16", &[("teacher_base", &teacher)], |run| {
        let dc = distill_stage_config(&base, 32, 16, 0.0, 1);
        run_distill(run, "teacher_16", &teacher, teacher.clone(), &data, &dc)
    })?;

    let evolved = model_stage(run, "evolved", &[("teacher_base", &teacher)], |run| {
        let ev = evolve_into(run, teacher.clone(), None, "evolved_")?;
        let outputs = ["evolved_lut.csv", "evolved_history.csv", "evolved_genome.json", "evolved_metrics.csv"];
        Ok((ev.model, outputs.iter().map(|s| s.to_string()).collect()))
    })?;

    let efficient_16 = model_stage(run, "efficient_16", &[("teacher_base", &teacher), ("evolved", &evolved)], |run| {
        let dc = distill_stage_config(&base, 32, 16, 0.0, 2);
        run_distill(run, "efficient_16", &teacher, evolved.clone(), &data, &dc)
    })?;

    let efficient_8 =
        model_stage(run, "efficient_8", &[("teacher_16", &teacher_16), ("efficient_16", &efficient_16)], |run| {
            let dc = distill_stage_config(&base, 16, 8, base.cfg_probability, 3);
            run_distill(run, "efficient_8", &teacher_16, efficient_16.clone(), &data, &dc)
        })?;
    run.manifest.genome = Some(efficient_8.genome());

    let probe = probe_for(&data);
    let curves: [(&str, &str, &Denoiser, usize); 3] = [
        ("curve_teacher", "teacher_base", &teacher, cfg.eval.steps),
        ("curve_efficient_16", "efficient_16", &efficient_16, 16),
        ("curve_efficient_8", "efficient_8", &efficient_8, 8),
    ];
    let mut curve_files = Vec::new();
    for (name, source, model, steps) in curves {
        let rel = format!("curves/{source}_{steps}.csv");
        std::fs::create_dir_all(run.path("curves"))?;
        stage(run, name, &[(source, model)], |run| {
            curve_into(run, model, steps, &rel, &data, &probe)?;
            Ok((vec![rel.clone()], None))
        })?;
        curve_files.push((format!("{source} ({steps} steps)"), rel));
    }

    let inputs: [(&str, &Denoiser); 3] = [("teacher_base", &teacher), ("efficient_16", &efficient_16), ("efficient_8", &efficient_8)];
    stage(run, "plot", &inputs, |run| {
        let series = curve_files
            .iter()
            .map(|(label, rel)| Ok((label.clone(), read_curve_csv(&run.path(rel))?)))
            .collect::<CliResult<Vec<_>>>()?;
        let rel = "plots/tradeoff.svg".to_string();
        plot_curves(&run.path(&rel), &series)?;
        Ok((vec![rel], None))
    })?;
    Ok(())
}

/// One row of the direct-versus-progressive comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub pipeline: String,
    pub stages: usize,
    pub iterations_per_stage: usize,
    pub total_iterations: usize,
    pub student_steps: usize,
    /// One-step landing error against the base teacher's two-step landing.
    pub landing_mse: f64,
    pub mean_dist: f64,
    pub mean_consistency: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Distills `teacher` to 8 steps twice under the same total iteration budget:
/// directly from a 16-step teacher, and progressively 32 -> 16 -> 8.
#[allow(clippy::too_many_arguments)]
pub fn compare_direct_progressive(
    teacher: &Denoiser,
    data: &ConditionalDataset,
    probe: &Probe,
    base: &DistillConfig,
    budget: usize,
    settings: CurveSettings,
    w_list: &[f64],
    holdout: usize,
    config_hash: &str,
) -> CliResult<Vec<ComparisonRow>> {
    if budget < 2 {
        return Err(CliError::Usage("comparison budget must be at least 2 iterations".into()));
    }
    let ev = Evaluator { dataset: data, probe, probe_checksum: &probe.checksum, schedule: NoiseSchedule::Cosine };
    let plans = [("direct", 16, DistillMode::Direct, budget), ("progressive", 32, DistillMode::Progressive, budget / 2)];
    let mut rows = Vec::new();
    for (label, teacher_steps, mode, iterations) in plans {
        let dc = DistillConfig { teacher_steps, student_steps: 8, mode, iterations, ..base.clone() };
        let stages = distill(teacher, teacher.clone(), data, &dc)?;
        let student = &stages.last().expect("one stage").student;
        let landing = landing_report(student, teacher, data, 8, holdout, dc.seed ^ 0x1A4D)?;
        let points = ev.curve(student, settings, w_list)?;
        let n = points.len() as f64;
        rows.push(ComparisonRow {
            pipeline: label.into(),
            stages: stages.len(),
            iterations_per_stage: iterations,
            total_iterations: iterations * stages.len(),
            student_steps: 8,
            landing_mse: landing.student_mse,
            mean_dist: points.iter().map(|p| p.dist).sum::<f64>() / n,
            mean_consistency: points.iter().map(|p| p.consistency).sum::<f64>() / n,
            seed: dc.seed,
            config_hash: config_hash.into(),
        });
    }
    Ok(rows)
}

/// `direct` or `progressive`, by lower mean `dist`.
pub fn winner(rows: &[ComparisonRow]) -> Option<&str> {
    rows.iter().min_by(|a, b| a.mean_dist.total_cmp(&b.mean_dist)).map(|r| r.pipeline.as_str())
}

pub fn compare_cmd(run: &mut RunDir, teacher: Option<&std::path::Path>, budget: Option<usize>) -> CliResult<()> {
    let cfg = run.config().clone();
    let data = cfg.dataset();
    let teacher = match teacher {
        Some(p) => crate::commands::load_model(p)?,
        None => {
            let tc = cfg.train_config();
            run.seed("train", tc.seed);
            let out = fit(fresh_model(&cfg)?, &data, &tc)?;
            write_train_metrics(&run.path("teacher_metrics.csv"), &out.log, tc.seed, run.hash())?;
            run.artifact("teacher_metrics", "teacher_metrics.csv");
            save_model(run, &out.model, "teacher", tc.steps as u64)?;
            out.model
        }
    };
    let base = cfg.distill_config();
    run.seed("distill", base.seed);
    let budget = budget.unwrap_or(base.iterations);
    let probe = probe_for(&data);
    let settings = CurveSettings { steps: 8, n_samples: cfg.eval.n_samples, seed: cfg.stage_seed(seeds::EVAL) };
    let t0 = Instant::now();
    let hash = run.hash().to_string();
    let rows = compare_direct_progressive(&teacher, &data, &probe, &base, budget, settings, &cfg.eval.w_list, cfg.distill.holdout, &hash)?;
    run.time("compare", t0.elapsed().as_secs_f64());
    write_csv(&run.path("comparison.csv"), &rows)?;
    run.artifact("comparison", "comparison.csv");
    std::fs::copy(run.path("comparison.csv"), run.path(crate::commands::METRICS))?;
    run.artifact("metrics", crate::commands::METRICS);
    if let Some(w) = winner(&rows) {
        println!("lower mean dist at 8 steps: {w}");
    }
    Ok(())
}
