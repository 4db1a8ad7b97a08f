//! Adversarial concept erasure: saliency mask, trajectory preservation,
//! the per-iteration min-max update, the stopping rule and the ablation arms.

use fade_autodiff::{masked_adam_step, AdamConfig, AdamState, ParamMode, ParameterStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adversary::Discriminator;
use crate::diffusion::{
    ancestral_sample, ancestral_sample_recorded, forward_noise_batch, DenoiserModel, NoiseSchedule, SamplerConfig,
    SamplingNoise,
};
use crate::error::{invalid, FadeError, Result};
use crate::seed::{derive_seed, rng_for, stream};
use crate::world::{sample_labels, PromptLabel, PromptSetPair, World};

/// Erasure hyperparameters. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FadeConfig {
    /// Weight of the preservation term.
    pub lambda: f64,
    pub guidance: f64,
    pub max_iterations: usize,
    /// Preservation covers timesteps `1..=preservation_cutoff`.
    pub preservation_cutoff: usize,
    pub saliency_fraction: f64,
    pub batch: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    /// First-moment decay of both adversarial optimizers.
    pub adam_beta1: f64,
    pub discriminator_pretrain_steps: usize,
    pub stop_window: usize,
    pub stop_band: f64,
    /// Number of concept/neutral prompt pairs.
    pub context_variety: usize,
    /// Sampling steps differentiated for the removal loss; `None` means all.
    pub backprop_steps: Option<usize>,
    /// Samples per class in the fixed validation set.
    pub validation_size: usize,
    /// Noised samples used to score parameter saliency.
    pub saliency_samples: usize,
    pub disable_adv: bool,
    pub disable_pres: bool,
    pub disable_saliency: bool,
    pub seed: u64,
}

impl Default for FadeConfig {
    fn default() -> Self {
        FadeConfig {
            lambda: 1.0,
            guidance: 2.0,
            max_iterations: 2000,
            preservation_cutoff: 25,
            saliency_fraction: 0.2,
            batch: 64,
            generator_lr: 5e-4,
            discriminator_lr: 2e-3,
            adam_beta1: 0.9,
            discriminator_pretrain_steps: 200,
            stop_window: 50,
            stop_band: 0.05,
            context_variety: 2,
            backprop_steps: None,
            validation_size: 128,
            saliency_samples: 256,
            disable_adv: false,
            disable_pres: false,
            disable_saliency: false,
            seed: 0,
        }
    }
}

impl FadeConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        let fail = |m: &str| Err(invalid(m.to_string()));
        if self.preservation_cutoff == 0 || self.preservation_cutoff > horizon {
            return fail("preservation_cutoff must lie in 1..=T");
        }
        if !(self.saliency_fraction > 0.0 && self.saliency_fraction <= 1.0) {
            return fail("saliency_fraction must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be finite and nonnegative");
        }
        if !(self.stop_band > 0.0 && self.stop_band < 0.5) {
            return fail("stop_band must lie in (0, 0.5)");
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return fail("guidance must be finite and nonnegative");
        }
        if !(self.generator_lr > 0.0 && self.discriminator_lr > 0.0) {
            return fail("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return fail("adam_beta1 must lie in [0, 1)");
        }
        if self.batch == 0 || self.stop_window == 0 || self.context_variety == 0 {
            return fail("batch, stop_window and context_variety must be positive");
        }
        if self.validation_size == 0 || self.saliency_samples == 0 {
            return fail("validation_size and saliency_samples must be positive");
        }
        if self.backprop_steps == Some(0) {
            return fail("backprop_steps must be positive when set");
        }
        Ok(())
    }

    /// Preservation weight after ablation flags.
    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            ..AdamConfig::with_lr(lr)
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.disable_pres {
            0.0
        } else {
            self.lambda
        }
    }
}

/// Inclusion flag per scalar of the generator's flattened parameter index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaliencyMask {
    included: Vec<bool>,
    count: usize,
}

impl SaliencyMask {
    pub fn all(n: usize) -> Self {
        SaliencyMask {
            included: vec![true; n],
            count: n,
        }
    }

    pub fn from_flags(included: Vec<bool>) -> Self {
        let count = included.iter().filter(|b| **b).count();
        SaliencyMask { included, count }
    }

    /// Keeps the `ceil(fraction * n)` highest scores; equal scores prefer the
    /// lower index.
    pub fn top_fraction(scores: &[f64], fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(invalid(format!("saliency fraction {fraction} outside (0, 1]")));
        }
        let n = scores.len();
        let keep = ((fraction * n as f64).ceil() as usize).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut included = vec![false; n];
        for &i in &order[..keep] {
            included[i] = true;
        }
        Ok(SaliencyMask { included, count: keep })
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    pub fn included_count(&self) -> usize {
        self.count
    }

    pub fn flags(&self) -> &[bool] {
        &self.included
    }

    pub fn contains(&self, i: usize) -> bool {
        self.included[i]
    }
}

/// Noised states with paired concept / neutral conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyBatch {
    pub z: Tensor,
    pub ts: Vec<usize>,
    pub concept: Tensor,
    pub neutral: Tensor,
}

/// Draws `n` concept-prompt data points, noises them at uniform timesteps
/// and attaches both members of the prompt pair.
pub fn saliency_batch(
    world: &World,
    prompts: &PromptSetPair,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<SaliencyBatch> {
    if n == 0 || prompts.is_empty() {
        return Err(invalid("saliency batch needs samples and prompts"));
    }
    let mut rng = rng_for(seed, 0);
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..prompts.len())).collect();
    let labels: Vec<&PromptLabel> = idx.iter().map(|&i| &prompts.concept[i]).collect();
    let x0 = sample_labels(world, &labels, &mut rng)?;
    let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=schedule.steps())).collect();
    let eps = normal_like(&x0, &mut rng);
    let z = forward_noise_batch(&x0, schedule, &ts, &eps)?;
    let concept = world.encode_batch(&labels.iter().map(|l| Some(*l)).collect::<Vec<_>>());
    let neutral = world.encode_batch(&idx.iter().map(|&i| Some(&prompts.neutral[i])).collect::<Vec<_>>());
    Ok(SaliencyBatch { z, ts, concept, neutral })
}

fn normal_like(x: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let v: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(x.shape().to_vec(), v).expect("same shape")
}

fn row_tensor(t: &Tensor, i: usize) -> Tensor {
    Tensor::new(vec![1, t.cols()], t.row(i).to_vec()).expect("nonempty row")
}

/// Per-scalar sum over samples of `|d/dtheta ||eps(z, y_c, t) - eps(z, y_neg, t)||^2|`.
pub fn saliency_scores(model: &DenoiserModel, batch: &SaliencyBatch) -> Result<Vec<f64>> {
    let mut scores = vec![0.0; model.params.num_scalars()];
    for i in 0..batch.ts.len() {
        let mut tape = Tape::new();
        let z = tape.constant(row_tensor(&batch.z, i));
        let zz = tape.concat_rows(&[z, z])?;
        let cond = Tensor::new(
            vec![2, batch.concept.cols()],
            [batch.concept.row(i), batch.neutral.row(i)].concat(),
        )?;
        let out = model.record(&mut tape, zz, &[batch.ts[i]; 2], &cond, ParamMode::Trainable)?;
        let a = tape.slice_rows(out, 0, 1)?;
        let b = tape.slice_rows(out, 1, 2)?;
        let d = tape.sub(a, b)?;
        let loss = tape.mean_row_sq_norm(d);
        let g = tape.backward(loss, &Tensor::scalar(1.0), &model.params)?;
        for (s, v) in scores.iter_mut().zip(g.flatten()) {
            *s += v.abs();
        }
    }
    Ok(scores)
}

pub fn compute_saliency_mask(model: &DenoiserModel, batch: &SaliencyBatch, fraction: f64) -> Result<SaliencyMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("saliency fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(SaliencyMask::all(model.params.num_scalars()));
    }
    SaliencyMask::top_fraction(&saliency_scores(model, batch)?, fraction)
}

/// Neutral-prompt states noised at timesteps up to the preservation cutoff;
/// both models see the same `z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreservationBatch {
    pub z: Tensor,
    pub ts: Vec<usize>,
    pub cond: Tensor,
}

pub fn preservation_batch<R: Rng>(
    world: &World,
    neutral: &[PromptLabel],
    schedule: &NoiseSchedule,
    cutoff: usize,
    n: usize,
    rng: &mut R,
) -> Result<PreservationBatch> {
    if n == 0 || neutral.is_empty() {
        return Err(invalid("preservation batch needs samples and prompts"));
    }
    if cutoff == 0 || cutoff > schedule.steps() {
        return Err(FadeError::TimestepOutOfRange {
            t: cutoff,
            max: schedule.steps(),
        });
    }
    let labels: Vec<&PromptLabel> = (0..n).map(|_| &neutral[rng.gen_range(0..neutral.len())]).collect();
    let x0 = sample_labels(world, &labels, rng)?;
    let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=cutoff)).collect();
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let eps = Tensor::new(x0.shape().to_vec(), eps)?;
    let z = forward_noise_batch(&x0, schedule, &ts, &eps)?;
    let cond = world.encode_batch(&labels.iter().map(|l| Some(*l)).collect::<Vec<_>>());
    Ok(PreservationBatch { z, ts, cond })
}

/// `mean ||eps_theta(z_t, y, t) - eps_orig(z_t, y, t)||^2` over the batch.
pub fn preservation_loss_on(model: &DenoiserModel, original: &DenoiserModel, batch: &PreservationBatch) -> Result<f64> {
    let a = model.predict(&batch.z, &batch.ts, &batch.cond)?;
    let b = original.predict(&batch.z, &batch.ts, &batch.cond)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / batch.ts.len() as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn preservation_loss(
    model: &DenoiserModel,
    original: &DenoiserModel,
    world: &World,
    neutral: &[PromptLabel],
    schedule: &NoiseSchedule,
    cutoff: usize,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let batch = preservation_batch(world, neutral, schedule, cutoff, n, &mut rng_for(seed, 0))?;
    preservation_loss_on(model, original, &batch)
}

/// Records the preservation loss with the frozen reference entering as a
/// constant target.
pub fn record_preservation_loss(
    tape: &mut Tape,
    model: &DenoiserModel,
    original: &DenoiserModel,
    batch: &PreservationBatch,
) -> Result<Var> {
    let target = original.predict(&batch.z, &batch.ts, &batch.cond)?;
    let z = tape.constant(batch.z.clone());
    let pred = model.record(tape, z, &batch.ts, &batch.cond, ParamMode::Trainable)?;
    let target = tape.constant(target);
    let d = tape.sub(pred, target)?;
    Ok(tape.mean_row_sq_norm(d))
}

/// Everything one erasure iteration reads and updates.
#[derive(Debug, Clone)]
pub struct FadeState {
    pub model: DenoiserModel,
    pub original: DenoiserModel,
    pub discriminator: Discriminator,
    pub generator_adam: AdamState,
    pub discriminator_adam: AdamState,
    pub mask: SaliencyMask,
    pub config: FadeConfig,
}

impl FadeState {
    pub fn new(model: DenoiserModel, discriminator: Discriminator, mask: SaliencyMask, config: FadeConfig) -> Result<Self> {
        if mask.len() != model.params.num_scalars() {
            return Err(invalid(format!(
                "mask covers {} scalars, model has {}",
                mask.len(),
                model.params.num_scalars()
            )));
        }
        Ok(FadeState {
            original: model.clone(),
            generator_adam: AdamState::new(model.params.num_scalars()),
            discriminator_adam: AdamState::new(discriminator.params.num_scalars()),
            model,
            discriminator,
            mask,
            config,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLosses {
    pub removal: f64,
    pub preservation: f64,
    pub total: f64,
    /// Discriminator loss before its update; `NaN` when the adversary is off.
    pub discriminator: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub removal: f64,
    pub preservation: f64,
    pub total: f64,
    pub discriminator: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct ErasureRunRecord {
    pub history: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    pub model: DenoiserModel,
    pub discriminator: Discriminator,
    pub mask: SaliencyMask,
}

fn diverged(step: usize, what: &str) -> FadeError {
    FadeError::TrainingDiverged {
        step,
        what: what.into(),
    }
}

fn pair_conditions(world: &World, prompts: &PromptSetPair, idx: &[usize]) -> (Tensor, Tensor) {
    let c: Vec<_> = idx.iter().map(|&i| Some(&prompts.concept[i])).collect();
    let n: Vec<_> = idx.iter().map(|&i| Some(&prompts.neutral[i])).collect();
    (world.encode_batch(&c), world.encode_batch(&n))
}

/// One discriminator step on `L_adv^D`; returns the loss before the step.
fn discriminator_step(
    disc: &mut Discriminator,
    adam: &mut AdamState,
    cfg: &AdamConfig,
    x_c: &Tensor,
    x_neg: &Tensor,
    head: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(x_c.clone());
    let b = tape.constant(x_neg.clone());
    let loss = disc.record_discriminator_loss(&mut tape, a, b, head)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss, &Tensor::scalar(1.0), &disc.params)?;
    masked_adam_step(&mut disc.params, &grads, None, adam, cfg)?;
    Ok(value)
}

/// Generates a batch, updates the discriminator (unless the adversary is
/// ablated) and takes one masked generator step on
/// `L_rem + lambda * L_pres`.
pub fn fade_iteration(
    state: &mut FadeState,
    world: &World,
    schedule: &NoiseSchedule,
    prompts: &PromptSetPair,
    iteration: usize,
    seed: u64,
) -> Result<IterationLosses> {
    let cfg = state.config.clone();
    let mut rng = rng_for(seed, 0);
    let b = cfg.batch;
    let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..prompts.len())).collect();
    let (cond_c, cond_neg) = pair_conditions(world, prompts, &idx);
    let noise = SamplingNoise::draw(b, world.dim(), schedule.steps(), &mut rng);
    let pres_batch = preservation_batch(world, &prompts.neutral, schedule, cfg.preservation_cutoff, b, &mut rng)?;
    let sampler = SamplerConfig::new(cfg.guidance)?;
    let k = cfg.backprop_steps.unwrap_or(schedule.steps());

    let x_neg = ancestral_sample(&state.model, schedule, &cond_neg, &sampler, &noise, false)?.x0;
    let mut tape = Tape::new();
    let x_c = ancestral_sample_recorded(&mut tape, &state.model, schedule, &cond_c, &sampler, &noise, k)?;
    let x_c_value = tape.value(x_c).clone();

    let disc_loss = if cfg.disable_adv {
        f64::NAN
    } else {
        let l = discriminator_step(
            &mut state.discriminator,
            &mut state.discriminator_adam,
            &cfg.adam(cfg.discriminator_lr),
            &x_c_value,
            &x_neg,
            0,
        )?;
        if !l.is_finite() {
            return Err(diverged(iteration, "discriminator loss"));
        }
        l
    };

    let removal = if cfg.disable_adv {
        let target = tape.constant(x_neg.clone());
        let d = tape.sub(x_c, target)?;
        tape.mean_row_sq_norm(d)
    } else {
        state.discriminator.record_removal_loss(&mut tape, x_c, 0)?
    };
    let lambda = cfg.effective_lambda();
    let (total, pres_value) = if lambda > 0.0 {
        let pres = record_preservation_loss(&mut tape, &state.model, &state.original, &pres_batch)?;
        let p = tape.value(pres).item();
        (tape.lincomb(&[(removal, 1.0), (pres, lambda)])?, p)
    } else {
        (removal, preservation_loss_on(&state.model, &state.original, &pres_batch)?)
    };
    let rem_value = tape.value(removal).item();
    let total_value = tape.value(total).item();
    if !(rem_value.is_finite() && pres_value.is_finite() && total_value.is_finite()) {
        return Err(diverged(iteration, "generator loss"));
    }
    let grads = tape.backward(total, &Tensor::scalar(1.0), &state.model.params)?;
    if !grads.is_finite() {
        return Err(diverged(iteration, "generator gradient"));
    }
    let mask = (!cfg.disable_saliency).then(|| state.mask.flags());
    masked_adam_step(
        &mut state.model.params,
        &grads,
        mask,
        &mut state.generator_adam,
        &cfg.adam(cfg.generator_lr),
    )?;
    Ok(IterationLosses {
        removal: rem_value,
        preservation: pres_value,
        total: total_value,
        discriminator: disc_loss,
    })
}

/// Fixed-noise validation chains, `n` per class, prompts cycled over pairs.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    cond_c: Tensor,
    cond_neg: Tensor,
    noise_c: SamplingNoise,
    noise_neg: SamplingNoise,
}

impl ValidationSet {
    pub fn new(world: &World, prompts: &PromptSetPair, schedule: &NoiseSchedule, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || prompts.is_empty() {
            return Err(invalid("validation needs samples and prompts"));
        }
        let idx: Vec<usize> = (0..n).map(|i| i % prompts.len()).collect();
        let (cond_c, cond_neg) = pair_conditions(world, prompts, &idx);
        let mut rng = rng_for(seed, 0);
        let noise_c = SamplingNoise::draw(n, world.dim(), schedule.steps(), &mut rng);
        let noise_neg = SamplingNoise::draw(n, world.dim(), schedule.steps(), &mut rng);
        Ok(ValidationSet {
            cond_c,
            cond_neg,
            noise_c,
            noise_neg,
        })
    }

    pub fn samples(&self, model: &DenoiserModel, schedule: &NoiseSchedule, guidance: f64) -> Result<(Tensor, Tensor)> {
        let s = SamplerConfig::new(guidance)?;
        let a = ancestral_sample(model, schedule, &self.cond_c, &s, &self.noise_c, false)?.x0;
        let b = ancestral_sample(model, schedule, &self.cond_neg, &s, &self.noise_neg, false)?.x0;
        Ok((a, b))
    }

    /// Discriminator accuracy on concept (flag 1) and neutral (flag 0) samples.
    pub fn accuracy(
        &self,
        model: &DenoiserModel,
        disc: &Discriminator,
        schedule: &NoiseSchedule,
        guidance: f64,
    ) -> Result<f64> {
        let (a, b) = self.samples(model, schedule, guidance)?;
        let mut p = disc.probabilities(&a, 0)?;
        p.extend(disc.probabilities(&b, 0)?);
        let flags: Vec<bool> = (0..p.len()).map(|i| i < a.rows()).collect();
        crate::adversary::accuracy_from_probs(&p, &flags)
    }
}

/// Trains the discriminator on a pool sampled once from `model`.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_discriminator(
    disc: &mut Discriminator,
    adam: &mut AdamState,
    model: &DenoiserModel,
    world: &World,
    schedule: &NoiseSchedule,
    prompts: &PromptSetPair,
    cfg: &FadeConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if cfg.discriminator_pretrain_steps == 0 {
        return Ok(Vec::new());
    }
    let mut rng = rng_for(seed, 0);
    let pool = (4 * cfg.batch).max(256);
    let idx: Vec<usize> = (0..pool).map(|_| rng.gen_range(0..prompts.len())).collect();
    let (cond_c, cond_neg) = pair_conditions(world, prompts, &idx);
    let sampler = SamplerConfig::new(cfg.guidance)?;
    let noise = SamplingNoise::draw(pool, world.dim(), schedule.steps(), &mut rng);
    let xc = ancestral_sample(model, schedule, &cond_c, &sampler, &noise, false)?.x0;
    let noise = SamplingNoise::draw(pool, world.dim(), schedule.steps(), &mut rng);
    let xn = ancestral_sample(model, schedule, &cond_neg, &sampler, &noise, false)?.x0;
    let pick = |x: &Tensor, rows: &[usize]| {
        let data: Vec<f64> = rows.iter().flat_map(|&r| x.row(r).to_vec()).collect();
        Tensor::new(vec![rows.len(), x.cols()], data).expect("nonempty")
    };
    let mut curve = Vec::with_capacity(cfg.discriminator_pretrain_steps);
    for step in 0..cfg.discriminator_pretrain_steps {
        let rc: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..pool)).collect();
        let rn: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..pool)).collect();
        let l = discriminator_step(disc, adam, &cfg.adam(cfg.discriminator_lr), &pick(&xc, &rc), &pick(&xn, &rn), 0)?;
        if !l.is_finite() {
            return Err(diverged(step, "discriminator pretraining loss"));
        }
        curve.push(l);
    }
    Ok(curve)
}

fn in_band(acc: f64, cfg: &FadeConfig) -> bool {
    (acc - 0.5).abs() <= cfg.stop_band
}

/// Full erasure run: prompt sets, saliency mask, discriminator pretraining,
/// then iterations until the validation accuracy has stayed within
/// `0.5 +- stop_band` for `stop_window` consecutive iterations or
/// `max_iterations` is reached.
pub fn run_fade(
    pretrained: &DenoiserModel,
    world: &World,
    schedule: &NoiseSchedule,
    config: &FadeConfig,
) -> Result<ErasureRunRecord> {
    config.validate(schedule.steps())?;
    let seed = config.seed;
    let prompts = crate::world::build_prompt_sets(world, config.context_variety, derive_seed(seed, stream::PROMPTS))?;
    let mask = if config.disable_saliency || config.saliency_fraction == 1.0 {
        SaliencyMask::all(pretrained.params.num_scalars())
    } else {
        let batch = saliency_batch(
            world,
            &prompts,
            schedule,
            config.saliency_samples,
            derive_seed(seed, stream::SALIENCY),
        )?;
        compute_saliency_mask(pretrained, &batch, config.saliency_fraction)?
    };
    let disc = Discriminator::new(world.dim(), 1, derive_seed(seed, stream::INIT_DISCRIMINATOR))?;
    let mut state = FadeState::new(pretrained.clone(), disc, mask, config.clone())?;
    if config.max_iterations == 0 {
        return Ok(ErasureRunRecord {
            history: Vec::new(),
            stop_reason: StopReason::MaxIterations,
            model: state.model,
            discriminator: state.discriminator,
            mask: state.mask,
        });
    }
    pretrain_discriminator(
        &mut state.discriminator,
        &mut state.discriminator_adam,
        pretrained,
        world,
        schedule,
        &prompts,
        config,
        derive_seed(seed, stream::DISC_PRETRAIN),
    )?;
    let validation = ValidationSet::new(
        world,
        &prompts,
        schedule,
        config.validation_size,
        derive_seed(seed, stream::VALIDATION),
    )?;
    let iter_root = derive_seed(seed, stream::ITERATIONS);
    let mut history = Vec::new();
    let mut stop_reason = StopReason::MaxIterations;
    for it in 0..config.max_iterations {
        let losses = fade_iteration(&mut state, world, schedule, &prompts, it, derive_seed(iter_root, it as u64))?;
        let acc = validation.accuracy(&state.model, &state.discriminator, schedule, config.guidance)?;
        history.push(IterationRecord {
            iteration: it,
            removal: losses.removal,
            preservation: losses.preservation,
            total: losses.total,
            discriminator: losses.discriminator,
            validation_accuracy: acc,
        });
        let w = config.stop_window;
        if history.len() >= w && history[history.len() - w..].iter().all(|r| in_band(r.validation_accuracy, config)) {
            stop_reason = StopReason::Converged;
            break;
        }
    }
    Ok(ErasureRunRecord {
        history,
        stop_reason,
        model: state.model,
        discriminator: state.discriminator,
        mask: state.mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationArm {
    Full,
    WithoutAdv,
    WithoutPres,
    WithoutSaliency,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::Full,
        AblationArm::WithoutAdv,
        AblationArm::WithoutPres,
        AblationArm::WithoutSaliency,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationArm::Full => "Full",
            AblationArm::WithoutAdv => "w/o Adv",
            AblationArm::WithoutPres => "w/o Pres",
            AblationArm::WithoutSaliency => "w/o Saliency",
        }
    }

    pub fn configure(self, base: &FadeConfig) -> FadeConfig {
        let mut c = base.clone();
        c.disable_adv = self == AblationArm::WithoutAdv;
        c.disable_pres = self == AblationArm::WithoutPres;
        c.disable_saliency = self == AblationArm::WithoutSaliency;
        c
    }
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub arm: AblationArm,
    pub record: ErasureRunRecord,
}

/// Runs the four arms from the same pretrained model and seed.
pub fn run_ablation(
    pretrained: &DenoiserModel,
    world: &World,
    schedule: &NoiseSchedule,
    base: &FadeConfig,
) -> Result<Vec<AblationRun>> {
    AblationArm::ALL
        .iter()
        .map(|&arm| {
            Ok(AblationRun {
                arm,
                record: run_fade(pretrained, world, schedule, &arm.configure(base))?,
            })
        })
        .collect()
}

/// Flattened indices whose value differs (bitwise) between two stores.
pub fn changed_scalars(before: &ParameterStore, after: &ParameterStore) -> Result<Vec<usize>> {
    let (a, b) = (before.flatten(), after.flatten());
    if a.len() != b.len() {
        return Err(invalid("stores differ in size"));
    }
    Ok((0..a.len()).filter(|&i| a[i].to_bits() != b[i].to_bits()).collect())
}
