//! Conditional DDPM on low-dimensional data: schedule, noise predictor,
//! classifier-free guided ancestral sampling and base-model pretraining.
//!
//! Sampling uses the DDPM posterior step
//!
//! ```text
//! z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * xi
//! sigma_t^2 = beta_t * (1 - abar_{t-1}) / (1 - abar_t),   abar_0 = 1
//! ```
//!
//! and guidance `eps_hat = (1 - w) * eps(z, null) + w * eps(z, y)`.

use std::f64::consts::PI;

use fade_autodiff::{masked_adam_step, Activation, AdamConfig, AdamState, Mlp, ParamMode, ParameterStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FadeError, Result};
use crate::seed::rng_for;
use crate::world::{sample_labels, World};

/// Betas for `t = 1..=T` with derived alphas and cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `steps` betas spaced evenly from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(FadeError::InvalidSchedule("at least one step is required".into()));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// T = 50, betas linear in [1e-4, 0.2].
    pub fn default_schedule() -> Self {
        Self::linear(50, 1e-4, 0.2).expect("valid default schedule")
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(FadeError::InvalidSchedule("at least one step is required".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(FadeError::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if alpha_bars.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(FadeError::InvalidSchedule("cumulative alpha must strictly decrease".into()));
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(FadeError::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `(1/sqrt(alpha_t), beta_t/sqrt(1-abar_t), sigma_t)` of the posterior step.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        (1.0 / self.alpha(t).sqrt(), beta / (1.0 - ab).sqrt(), var.max(0.0).sqrt())
    }
}

/// `sqrt(abar) * x0 + sqrt(1 - abar) * eps`.
pub fn noise_closed_form(x0: &[f64], alpha_bar: f64, eps: &[f64]) -> Vec<f64> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

pub fn forward_noise(x0: &[f64], schedule: &NoiseSchedule, t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check(t)?;
    if x0.len() != eps.len() {
        return Err(invalid(format!("x0 has {} entries, eps {}", x0.len(), eps.len())));
    }
    Ok(noise_closed_form(x0, schedule.alpha_bar(t), eps))
}

/// Row-wise [`forward_noise`] with one timestep per row.
pub fn forward_noise_batch(x0: &Tensor, schedule: &NoiseSchedule, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() || ts.len() != x0.rows() {
        return Err(invalid("forward_noise_batch: mismatched batch shapes"));
    }
    let mut data = Vec::with_capacity(x0.len());
    for (i, &t) in ts.iter().enumerate() {
        data.extend(forward_noise(x0.row(i), schedule, t, eps.row(i))?);
    }
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

pub const TIME_EMBED_WIDTH: usize = 3;

/// `(t/T, sin(2 pi t/T), cos(2 pi t/T))`.
pub fn time_embedding(t: usize, horizon: usize) -> [f64; 3] {
    let u = t as f64 / horizon as f64;
    [u, (2.0 * PI * u).sin(), (2.0 * PI * u).cos()]
}

/// Architecture of the noise predictor: input `[z, time embedding, condition]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub dim: usize,
    pub cond_width: usize,
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl DenoiserSpec {
    /// Three SiLU hidden layers of width 128.
    pub fn for_world(world: &World, horizon: usize) -> Self {
        DenoiserSpec {
            dim: world.dim(),
            cond_width: world.condition_width(),
            horizon,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
        }
    }

    pub fn input_width(&self) -> usize {
        self.dim + TIME_EMBED_WIDTH + self.cond_width
    }

    pub fn mlp(&self) -> Result<Mlp> {
        let mut sizes = vec![self.input_width()];
        sizes.extend(&self.hidden);
        sizes.push(self.dim);
        Ok(Mlp::new(sizes, self.activation)?)
    }
}

/// Noise predictor `eps_theta(z_t, y, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub spec: DenoiserSpec,
    pub arch: Mlp,
    pub params: ParameterStore,
}

impl DenoiserModel {
    pub fn new(spec: DenoiserSpec, seed: u64) -> Result<Self> {
        let arch = spec.mlp()?;
        let params = arch.init(seed);
        Ok(DenoiserModel { spec, arch, params })
    }

    /// Wraps existing parameters after checking every layer is present.
    pub fn from_params(spec: DenoiserSpec, params: ParameterStore) -> Result<Self> {
        let arch = spec.mlp()?;
        let probe = Tensor::zeros(&[1, spec.input_width()]);
        arch.forward(&params, &probe)?;
        Ok(DenoiserModel { spec, arch, params })
    }

    /// Constant `[time embedding, condition]` block, one row per sample.
    fn context(&self, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        if cond.cols() != self.spec.cond_width || cond.rows() != ts.len() {
            return Err(invalid(format!(
                "condition batch {:?} does not match {} rows of width {}",
                cond.shape(),
                ts.len(),
                self.spec.cond_width
            )));
        }
        let w = TIME_EMBED_WIDTH + self.spec.cond_width;
        let mut data = Vec::with_capacity(ts.len() * w);
        for (i, &t) in ts.iter().enumerate() {
            data.extend(time_embedding(t, self.spec.horizon));
            data.extend_from_slice(cond.row(i));
        }
        Ok(Tensor::new(vec![ts.len(), w], data)?)
    }

    fn input(&self, z: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        if z.cols() != self.spec.dim || z.rows() != ts.len() {
            return Err(invalid(format!("state batch {:?} does not match {} rows", z.shape(), ts.len())));
        }
        let ctx = self.context(ts, cond)?;
        let w = self.spec.input_width();
        let mut data = Vec::with_capacity(ts.len() * w);
        for i in 0..ts.len() {
            data.extend_from_slice(z.row(i));
            data.extend_from_slice(ctx.row(i));
        }
        Ok(Tensor::new(vec![ts.len(), w], data)?)
    }

    /// Predicted noise with per-row timesteps, using `params` in place of the
    /// model's own (same architecture).
    pub fn predict_with(&self, params: &ParameterStore, z: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        Ok(self.arch.forward(params, &self.input(z, ts, cond)?)?)
    }

    pub fn predict(&self, z: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        self.predict_with(&self.params, z, ts, cond)
    }

    /// Records the prediction for a state already on the tape.
    pub fn record(&self, tape: &mut Tape, z: Var, ts: &[usize], cond: &Tensor, mode: ParamMode) -> Result<Var> {
        let ctx = tape.constant(self.context(ts, cond)?);
        let input = tape.concat_cols(&[z, ctx])?;
        Ok(self.arch.record(tape, &self.params, input, mode)?)
    }
}

/// Guidance configuration shared by every sampling call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub guidance: f64,
}

impl SamplerConfig {
    pub fn new(guidance: f64) -> Result<Self> {
        if !(guidance.is_finite() && guidance >= 0.0) {
            return Err(invalid(format!("guidance weight {guidance} must be finite and nonnegative")));
        }
        Ok(SamplerConfig { guidance })
    }
}

fn check_t(model: &DenoiserModel, t: usize) -> Result<()> {
    if t == 0 || t > model.spec.horizon {
        return Err(FadeError::TimestepOutOfRange {
            t,
            max: model.spec.horizon,
        });
    }
    Ok(())
}

/// `eps_theta(z_t, y, t)` for a batch sharing one timestep; null rows of
/// `cond` are all zeros.
pub fn predict_eps(model: &DenoiserModel, z: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor> {
    check_t(model, t)?;
    model.predict(z, &vec![t; z.rows()], cond)
}

/// Classifier-free guided prediction `(1 - w) eps(z, null) + w eps(z, y)`.
pub fn guided_eps(model: &DenoiserModel, z: &Tensor, cond: &Tensor, t: usize, guidance: f64) -> Result<Tensor> {
    SamplerConfig::new(guidance)?;
    let null = Tensor::zeros(cond.shape());
    let eu = predict_eps(model, z, &null, t)?;
    let ec = predict_eps(model, z, cond, t)?;
    Ok(combine_guidance(&eu, &ec, guidance))
}

pub fn combine_guidance(uncond: &Tensor, cond: &Tensor, guidance: f64) -> Tensor {
    let data = uncond
        .data()
        .iter()
        .zip(cond.data())
        .map(|(u, c)| (1.0 - guidance) * u + guidance * c)
        .collect();
    Tensor::new(uncond.shape().to_vec(), data).expect("same shape")
}

/// Frozen randomness of one sampling chain: the initial state and the
/// per-step noise (`steps[t - 1]` feeds the transition out of `z_t`).
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingNoise {
    pub initial: Tensor,
    pub steps: Vec<Tensor>,
}

impl SamplingNoise {
    pub fn draw<R: Rng>(rows: usize, dim: usize, horizon: usize, rng: &mut R) -> Self {
        let mut normal = |n: usize| {
            let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::new(vec![rows, dim], v).expect("positive shape")
        };
        let initial = normal(rows * dim);
        let steps = (0..horizon).map(|_| normal(rows * dim)).collect();
        SamplingNoise { initial, steps }
    }

    pub fn from_seed(rows: usize, dim: usize, horizon: usize, seed: u64) -> Self {
        Self::draw(rows, dim, horizon, &mut rng_for(seed, 0))
    }

    pub fn rows(&self) -> usize {
        self.initial.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub x0: Tensor,
    /// `z_T, ..., z_0` when requested.
    pub trajectory: Option<Vec<Tensor>>,
}

fn check_sampling(model: &DenoiserModel, schedule: &NoiseSchedule, cond: &Tensor, noise: &SamplingNoise) -> Result<()> {
    if schedule.steps() != model.spec.horizon {
        return Err(invalid(format!(
            "schedule has {} steps but the model embeds horizon {}",
            schedule.steps(),
            model.spec.horizon
        )));
    }
    if noise.steps.len() != schedule.steps() || cond.rows() != noise.rows() || noise.initial.cols() != model.spec.dim {
        return Err(invalid("sampling noise does not match batch, dimension or schedule"));
    }
    Ok(())
}

/// Stacked `[cond; null]` evaluation at one timestep, split into
/// `(eps_cond, eps_null)`; skips a branch whose guidance weight is zero.
fn guided_parts(model: &DenoiserModel, z: &Tensor, cond: &Tensor, t: usize, guidance: f64) -> Result<Tensor> {
    let rows = z.rows();
    if guidance == 1.0 {
        return model.predict(z, &vec![t; rows], cond);
    }
    let null = Tensor::zeros(cond.shape());
    if guidance == 0.0 {
        return model.predict(z, &vec![t; rows], &null);
    }
    let zz = Tensor::new(vec![2 * rows, z.cols()], [z.data(), z.data()].concat())?;
    let cc = Tensor::new(vec![2 * rows, cond.cols()], [cond.data(), null.data()].concat())?;
    let out = model.predict(&zz, &vec![t; 2 * rows], &cc)?;
    let half = rows * z.cols();
    let (ec, eu) = out.data().split_at(half);
    let data = eu.iter().zip(ec).map(|(u, c)| (1.0 - guidance) * u + guidance * c).collect();
    Ok(Tensor::new(z.shape().to_vec(), data)?)
}

/// Runs the guided ancestral chain from `z_T = noise.initial` down to `z_0`.
pub fn ancestral_sample(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    cond: &Tensor,
    sampler: &SamplerConfig,
    noise: &SamplingNoise,
    keep_trajectory: bool,
) -> Result<SampleOutput> {
    check_sampling(model, schedule, cond, noise)?;
    let mut z = noise.initial.clone();
    let mut trajectory = keep_trajectory.then(|| vec![z.clone()]);
    for t in (1..=schedule.steps()).rev() {
        let eps = guided_parts(model, &z, cond, t, sampler.guidance)?;
        let (a, b, s) = schedule.posterior_coefficients(t);
        let xi = &noise.steps[t - 1];
        let data: Vec<f64> = (0..z.len())
            .map(|i| a * (z.data()[i] - b * eps.data()[i]) + s * xi.data()[i])
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FadeError::Divergence { step: t });
        }
        z = Tensor::new(z.shape().to_vec(), data)?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(z.clone());
        }
    }
    Ok(SampleOutput { x0: z, trajectory })
}

/// Differentiable version of [`ancestral_sample`] with the noise frozen.
/// Only the last `backprop_steps` transitions (those ending at `z_0`) are
/// recorded; earlier ones run tape-free and enter as constants.
pub fn ancestral_sample_recorded(
    tape: &mut Tape,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    cond: &Tensor,
    sampler: &SamplerConfig,
    noise: &SamplingNoise,
    backprop_steps: usize,
) -> Result<Var> {
    check_sampling(model, schedule, cond, noise)?;
    let steps = schedule.steps();
    let k = backprop_steps.min(steps);
    let rows = cond.rows();
    let null = Tensor::zeros(cond.shape());
    let stacked_cond = Tensor::new(vec![2 * rows, cond.cols()], [cond.data(), null.data()].concat())?;

    // untracked prefix
    let mut z_plain = noise.initial.clone();
    for t in ((k + 1)..=steps).rev() {
        let eps = guided_parts(model, &z_plain, cond, t, sampler.guidance)?;
        let (a, b, s) = schedule.posterior_coefficients(t);
        let xi = &noise.steps[t - 1];
        let data: Vec<f64> = (0..z_plain.len())
            .map(|i| a * (z_plain.data()[i] - b * eps.data()[i]) + s * xi.data()[i])
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FadeError::Divergence { step: t });
        }
        z_plain = Tensor::new(z_plain.shape().to_vec(), data)?;
    }

    let w = sampler.guidance;
    let mut z = tape.constant(z_plain);
    for t in (1..=k).rev() {
        let (a, b, s) = schedule.posterior_coefficients(t);
        let mut terms = vec![(z, a)];
        if w == 1.0 || w == 0.0 {
            let c = if w == 1.0 { cond } else { &null };
            let e = model.record(tape, z, &vec![t; rows], c, ParamMode::Trainable)?;
            terms.push((e, -a * b));
        } else {
            let zz = tape.concat_rows(&[z, z])?;
            let out = model.record(tape, zz, &vec![t; 2 * rows], &stacked_cond, ParamMode::Trainable)?;
            let ec = tape.slice_rows(out, 0, rows)?;
            let eu = tape.slice_rows(out, rows, 2 * rows)?;
            terms.push((ec, -a * b * w));
            terms.push((eu, -a * b * (1.0 - w)));
        }
        if s > 0.0 {
            let xi = tape.constant(noise.steps[t - 1].clone());
            terms.push((xi, s));
        }
        z = tape.lincomb(&terms)?;
        if !tape.value(z).is_finite() {
            return Err(FadeError::Divergence { step: t });
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing a row's condition by the null prompt.
    #[serde(default = "default_dropout")]
    pub cond_dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 5000,
            batch: 128,
            lr: 1e-3,
            cond_dropout: 0.1,
        }
    }
}

/// Trains `model` on the denoising objective over uniformly drawn labels,
/// dropping the condition with probability `cond_dropout`. Returns the
/// per-step loss.
pub fn pretrain_base(
    model: &mut DenoiserModel,
    world: &World,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !(0.0..=1.0).contains(&cfg.cond_dropout) {
        return Err(invalid("pretraining needs batch >= 1, lr > 0 and dropout in [0, 1]"));
    }
    if schedule.steps() != model.spec.horizon {
        return Err(invalid("schedule length differs from model horizon"));
    }
    let labels = world.all_labels();
    let mut rng = rng_for(seed, 0);
    let mut state = AdamState::new(model.params.num_scalars());
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picked: Vec<_> = (0..cfg.batch).map(|_| &labels[rng.gen_range(0..labels.len())]).collect();
        let x0 = sample_labels(world, &picked, &mut rng)?;
        let ts: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(1..=schedule.steps())).collect();
        let eps_v: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Tensor::new(x0.shape().to_vec(), eps_v)?;
        let conds: Vec<_> = picked
            .iter()
            .map(|l| if rng.gen::<f64>() < cfg.cond_dropout { None } else { Some(*l) })
            .collect();
        let cond = world.encode_batch(&conds);
        let z = forward_noise_batch(&x0, schedule, &ts, &eps)?;

        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let pred = model.record(&mut tape, zv, &ts, &cond, ParamMode::Trainable)?;
        let target = tape.constant(eps);
        let diff = tape.sub(pred, target)?;
        let loss = tape.mean_row_sq_norm(diff);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(FadeError::TrainingDiverged {
                step,
                what: "denoising loss".into(),
            });
        }
        let grads = tape.backward(loss, &Tensor::scalar(1.0), &model.params)?;
        masked_adam_step(&mut model.params, &grads, None, &mut state, &adam)?;
        curve.push(value);
    }
    Ok(curve)
}
