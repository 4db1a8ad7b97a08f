use std::path::{Path, PathBuf};

use fade_core::diffusion::{pretrain_base, DenoiserModel, DenoiserSpec};
use fade_core::metrics::{evaluate_model, measure_model, report_from, train_probe, MetricsReport, ProbeClassifier};
use fade_core::seed::{derive_seed, rng_for, stream};
use fade_core::theory::{verify_theorem_equilibrium, DiscretePairedDistribution, TheoremReport};
use fade_core::trainer::{changed_scalars, run_ablation, run_fade, AblationArm, StopReason};
use fade_core::world::World;
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output::{append_metrics_csv, float, iteration_csv, loss_csv, write_text};

pub const PRETRAINED_FILE: &str = "pretrained.json";
pub const ERASED_FILE: &str = "erased.json";
pub const DISCRIMINATOR_FILE: &str = "discriminator.json";
pub const PROBE_FILE: &str = "probe.json";

fn out_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone())
}

fn probe_for(cfg: &RunConfig, world: &World) -> Result<ProbeClassifier> {
    Ok(train_probe(world, &cfg.probe, derive_seed(cfg.seed, stream::PROBE))?)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_curve: Vec<f64>,
}

/// Seeded initialization followed by denoising pretraining.
pub fn cmd_pretrain(cfg: &RunConfig, out: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let dir = out_dir(cfg, out);
    let world = cfg.world()?;
    let schedule = cfg.noise_schedule()?;
    let spec = DenoiserSpec::for_world(&world, schedule.steps());
    let mut model = DenoiserModel::new(spec, derive_seed(cfg.seed, stream::INIT_DENOISER))?;
    let curve = pretrain_base(
        &mut model,
        &world,
        &schedule,
        &cfg.pretrain,
        derive_seed(cfg.seed, stream::PRETRAIN),
    )?;
    let path = dir.join(PRETRAINED_FILE);
    save_checkpoint(
        &path,
        &Checkpoint::denoiser(&model, &schedule, Stage::Pretrained, &cfg.hash(), cfg.seed),
    )?;
    write_text(&dir.join("pretrain_loss.csv"), &loss_csv(&curve))?;
    Ok(PretrainOutcome {
        checkpoint: path,
        loss_curve: curve,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EraseSummary {
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub final_validation_accuracy: Option<f64>,
    pub mask_size: usize,
    pub changed_parameters: usize,
}

/// Runs erasure from a pretrained checkpoint; refuses any other stage.
pub fn cmd_erase(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<EraseSummary> {
    cfg.validate()?;
    let dir = out_dir(cfg, out);
    let ckpt = load_checkpoint(checkpoint)?;
    ckpt.require_stage(&[Stage::Pretrained])?;
    let model = ckpt.to_denoiser()?;
    let schedule = ckpt.schedule()?;
    let world = cfg.world()?;
    let mut fade = cfg.fade.clone();
    fade.seed = cfg.seed;
    let record = run_fade(&model, &world, &schedule, &fade)?;
    let hash = cfg.hash();
    save_checkpoint(
        &dir.join(ERASED_FILE),
        &Checkpoint::denoiser(&record.model, &schedule, Stage::Erased, &hash, cfg.seed),
    )?;
    save_checkpoint(
        &dir.join(DISCRIMINATOR_FILE),
        &Checkpoint::discriminator(&record.discriminator, &schedule, &hash, cfg.seed),
    )?;
    write_text(&dir.join("iterations.csv"), &iteration_csv(&record.history))?;
    let summary = EraseSummary {
        iterations: record.history.len(),
        stop_reason: record.stop_reason,
        final_validation_accuracy: record.history.last().map(|r| r.validation_accuracy),
        mask_size: record.mask.included_count(),
        changed_parameters: changed_scalars(&model.params, &record.model.params)?.len(),
    };
    write_text(
        &dir.join("erase_summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

/// Scores a denoiser checkpoint against the pretrained reference. A
/// pretrained checkpoint is its own reference; for an erased one the
/// reference defaults to `pretrained.json` in the output directory.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, reference: Option<&Path>, out: Option<&Path>) -> Result<MetricsReport> {
    cfg.validate()?;
    let dir = out_dir(cfg, out);
    let ckpt = load_checkpoint(checkpoint)?;
    ckpt.require_stage(&[Stage::Pretrained, Stage::Erased])?;
    let model = ckpt.to_denoiser()?;
    let schedule = ckpt.schedule()?;
    let world = cfg.world()?;
    let probe = probe_for(cfg, &world)?;
    save_checkpoint(
        &dir.join(PROBE_FILE),
        &Checkpoint::probe(&probe, &schedule, &cfg.hash(), cfg.seed),
    )?;
    let mut eval = cfg.eval.clone();
    eval.seed = derive_seed(cfg.seed, stream::EVAL);
    let report = if ckpt.stage() == Stage::Pretrained && reference.is_none() {
        let m = measure_model(&model, &world, &schedule, &probe, &eval)?;
        report_from(&m, &m)?
    } else {
        let ref_path = reference.map(Path::to_path_buf).unwrap_or_else(|| dir.join(PRETRAINED_FILE));
        let rc = load_checkpoint(&ref_path)?;
        rc.require_stage(&[Stage::Pretrained])?;
        evaluate_model(&model, &rc.to_denoiser()?, &world, &schedule, &probe, &eval)?
    };
    write_text(
        &dir.join("metrics.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    append_metrics_csv(&dir.join("metrics.csv"), &report)?;
    Ok(report)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairLine {
    p1: Vec<f64>,
    p0: Vec<f64>,
    #[serde(default = "half")]
    prior: f64,
}

fn half() -> f64 {
    0.5
}

/// One JSON object per line: `{"p1": [...], "p0": [...]}` with an optional
/// `"prior"`. Blank lines and lines starting with `#` are skipped.
pub fn parse_pair_file(text: &str) -> Result<Vec<DiscretePairedDistribution>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| CliError::PairFile { line: line_no, message };
        let p: PairLine = serde_json::from_str(trimmed).map_err(|e| err(e.to_string()))?;
        out.push(DiscretePairedDistribution::new(p.p1, p.p0, p.prior).map_err(|e| err(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(CliError::PairFile {
            line: 0,
            message: "no pairs found".into(),
        });
    }
    Ok(out)
}

fn dirichlet<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// `count` balanced pairs with support drawn from `2..=16` and both
/// conditionals from the flat Dirichlet.
pub fn random_pairs(count: usize, seed: u64) -> Result<Vec<DiscretePairedDistribution>> {
    let mut rng = rng_for(seed, stream::THEORY);
    (0..count)
        .map(|_| {
            let m = rng.gen_range(2..=16);
            let p1 = dirichlet(&mut rng, m);
            let p0 = dirichlet(&mut rng, m);
            Ok(DiscretePairedDistribution::balanced(p1, p0)?)
        })
        .collect()
}

pub fn cmd_verify_theory(pairs: Option<&Path>, count: usize, seed: u64, tolerance: f64) -> Result<Vec<TheoremReport>> {
    let dists = match pairs {
        Some(p) => parse_pair_file(&std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?)?,
        None => {
            if count == 0 {
                return Err(CliError::Argument("count must be at least 1".into()));
            }
            random_pairs(count, seed)?
        }
    };
    dists
        .iter()
        .map(|d| Ok(verify_theorem_equilibrium(d, tolerance)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub final_validation_accuracy: f64,
    pub report: MetricsReport,
    pub mask_size: usize,
    pub changed_parameters: usize,
    pub changed_outside_full_mask: usize,
}

pub const ABLATION_COLUMNS: [&str; 14] = [
    "arm",
    "iterations",
    "stop_reason",
    "final_val_acc",
    "concept_accuracy",
    "fidelity_proxy",
    "adherence",
    "erasure_efficacy",
    "fidelity",
    "harmonic_mean",
    "concept_mi_nats",
    "mask_size",
    "changed_parameters",
    "changed_outside_full_mask",
];

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = ABLATION_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        let stop = match r.stop_reason {
            StopReason::Converged => "converged",
            StopReason::MaxIterations => "max_iterations",
        };
        let fields = [
            r.arm.clone(),
            r.iterations.to_string(),
            stop.to_string(),
            float(r.final_validation_accuracy),
            float(r.report.concept_accuracy),
            float(r.report.fidelity_proxy),
            float(r.report.adherence),
            float(r.report.erasure_efficacy),
            float(r.report.fidelity),
            float(r.report.harmonic_mean),
            float(r.report.concept_mi_nats),
            r.mask_size.to_string(),
            r.changed_parameters.to_string(),
            r.changed_outside_full_mask.to_string(),
        ];
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

/// Runs the four arms from one pretrained model and scores each against it.
pub fn ablate_model(cfg: &RunConfig, model: &DenoiserModel, schedule: &fade_core::diffusion::NoiseSchedule) -> Result<Vec<AblationRow>> {
    let world = cfg.world()?;
    let mut fade = cfg.fade.clone();
    fade.seed = cfg.seed;
    let runs = run_ablation(model, &world, schedule, &fade)?;
    let probe = probe_for(cfg, &world)?;
    let mut eval = cfg.eval.clone();
    eval.seed = derive_seed(cfg.seed, stream::EVAL);
    let reference = measure_model(model, &world, schedule, &probe, &eval)?;
    let full_mask = runs
        .iter()
        .find(|r| r.arm == AblationArm::Full)
        .map(|r| r.record.mask.clone())
        .expect("full arm present");
    runs.iter()
        .map(|run| {
            let m = measure_model(&run.record.model, &world, schedule, &probe, &eval)?;
            let changed = changed_scalars(&model.params, &run.record.model.params)?;
            Ok(AblationRow {
                arm: run.arm.label().to_string(),
                iterations: run.record.history.len(),
                stop_reason: run.record.stop_reason,
                final_validation_accuracy: run.record.history.last().map_or(f64::NAN, |r| r.validation_accuracy),
                report: report_from(&m, &reference)?,
                mask_size: run.record.mask.included_count(),
                changed_parameters: changed.len(),
                changed_outside_full_mask: changed.iter().filter(|&&i| !full_mask.contains(i)).count(),
            })
        })
        .collect()
}

pub fn cmd_ablate(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let dir = out_dir(cfg, out);
    let ckpt = load_checkpoint(checkpoint)?;
    ckpt.require_stage(&[Stage::Pretrained])?;
    let rows = ablate_model(cfg, &ckpt.to_denoiser()?, &ckpt.schedule()?)?;
    write_text(&dir.join("ablation.csv"), &ablation_csv(&rows))?;
    Ok(rows)
}
