//! Evaluation harness: an independent probe classifier, concept accuracy,
//! a Gaussian Fréchet distance, prompt adherence and the composite
//! efficacy / fidelity / harmonic-mean scores.

use fade_autodiff::{masked_adam_step, Activation, AdamConfig, AdamState, Mlp, ParamMode, ParameterStore, Tape, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ancestral_sample, DenoiserModel, NoiseSchedule, SamplerConfig, SamplingNoise};
use crate::error::{invalid, FadeError, Result};
use crate::seed::{derive_seed, rng_for};
use crate::theory::{empirical_concept_mi, GridSpec};
use crate::world::{build_prompt_sets, sample_labels, sample_world, PromptLabel, World};

/// Attribute classifier trained on ground-truth world samples: one softmax
/// group per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeClassifier {
    pub arch: Mlp,
    pub params: ParameterStore,
    pub arities: Vec<usize>,
    pub concept_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub samples_per_label: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            samples_per_label: 2000,
            steps: 1500,
            batch: 128,
            lr: 3e-3,
        }
    }
}

pub fn train_probe(world: &World, cfg: &ProbeConfig, seed: u64) -> Result<ProbeClassifier> {
    if cfg.samples_per_label == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(invalid("probe training needs samples, a batch size and a positive lr"));
    }
    let arities: Vec<usize> = world.attributes().iter().map(|a| a.arity).collect();
    let arch = Mlp::new(vec![world.dim(), 64, 64, arities.iter().sum()], Activation::Silu)?;
    let mut params = arch.init(derive_seed(seed, 0));
    let labels = world.all_labels();
    let mut rng = rng_for(seed, 1);
    let pool_labels: Vec<&PromptLabel> = labels
        .iter()
        .flat_map(|l| std::iter::repeat(l).take(cfg.samples_per_label))
        .collect();
    let pool = sample_labels(world, &pool_labels, &mut rng)?;
    let mut adam = AdamState::new(params.num_scalars());
    let opt = AdamConfig::with_lr(cfg.lr);
    for step in 0..cfg.steps {
        let rows: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..pool.rows())).collect();
        let x: Vec<f64> = rows.iter().flat_map(|&r| pool.row(r).to_vec()).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![rows.len(), world.dim()], x)?);
        let logits = arch.record(&mut tape, &params, xv, ParamMode::Trainable)?;
        let mut terms = Vec::new();
        let mut start = 0;
        for (a, &arity) in arities.iter().enumerate() {
            let targets: Vec<usize> = rows.iter().map(|&r| pool_labels[r].values[a]).collect();
            terms.push((tape.softmax_xent(logits, start, arity, &targets)?, 1.0));
            start += arity;
        }
        let loss = tape.lincomb(&terms)?;
        if !tape.value(loss).is_finite() {
            return Err(FadeError::TrainingDiverged {
                step,
                what: "probe loss".into(),
            });
        }
        let g = tape.backward(loss, &Tensor::scalar(1.0), &params)?;
        masked_adam_step(&mut params, &g, None, &mut adam, &opt)?;
    }
    Ok(ProbeClassifier {
        arch,
        params,
        arities,
        concept_index: world.concept_index(),
    })
}

impl ProbeClassifier {
    fn group_start(&self, attr: usize) -> usize {
        self.arities[..attr].iter().sum()
    }

    /// Softmax probabilities of one attribute, one row per sample.
    pub fn attribute_probabilities(&self, x: &Tensor, attr: usize) -> Result<Vec<Vec<f64>>> {
        if attr >= self.arities.len() {
            return Err(invalid(format!("attribute {attr} out of range")));
        }
        let logits = self.arch.forward(&self.params, x)?;
        let (s, w) = (self.group_start(attr), self.arities[attr]);
        Ok((0..logits.rows())
            .map(|r| {
                let g = &logits.row(r)[s..s + w];
                let m = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = g.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|v| v / z).collect()
            })
            .collect())
    }

    /// Probability that the concept is present.
    pub fn concept_probabilities(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .attribute_probabilities(x, self.concept_index)?
            .into_iter()
            .map(|p| p[1])
            .collect())
    }

    /// Most probable value of every attribute, per sample.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::with_capacity(self.arities.len()); x.rows()];
        for a in 0..self.arities.len() {
            for (row, p) in out.iter_mut().zip(self.attribute_probabilities(x, a)?) {
                let best = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
                row.push(best);
            }
        }
        Ok(out)
    }

    /// Concept-head accuracy on fresh ground-truth samples of every label.
    pub fn held_out_accuracy(&self, world: &World, per_label: usize, seed: u64) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (i, l) in world.all_labels().iter().enumerate() {
            let x = sample_world(world, l, per_label, derive_seed(seed, i as u64))?;
            for p in self.concept_probabilities(&x)? {
                correct += usize::from((p > 0.5) == l.concept);
                total += 1;
            }
        }
        Ok(correct as f64 / total as f64)
    }
}

/// Fraction of samples the probe flags as showing the concept.
pub fn concept_accuracy(probe: &ProbeClassifier, samples: &Tensor) -> Result<f64> {
    flagged_fraction(&probe.concept_probabilities(samples)?.iter().map(|&p| p > 0.5).collect::<Vec<_>>())
}

pub fn flagged_fraction(flags: &[bool]) -> Result<f64> {
    if flags.is_empty() {
        return Err(invalid("concept accuracy needs at least one sample"));
    }
    Ok(flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64)
}

pub const COVARIANCE_RIDGE: f64 = 1e-6;

fn moments(x: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mu = DVector::zeros(d);
    for r in 0..n {
        mu += DVector::from_row_slice(x.row(r));
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in 0..n {
        let v = DVector::from_row_slice(x.row(r)) - &mu;
        cov += &v * v.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Squared 2-Wasserstein distance between two Gaussians:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn frechet_gaussian(mu1: &[f64], cov1: &[Vec<f64>], mu2: &[f64], cov2: &[Vec<f64>]) -> Result<f64> {
    let d = mu1.len();
    let ok = |c: &[Vec<f64>]| c.len() == d && c.iter().all(|r| r.len() == d);
    if d == 0 || mu2.len() != d || !ok(cov1) || !ok(cov2) {
        return Err(invalid("Gaussian parameters disagree in dimension"));
    }
    let m = |c: &[Vec<f64>]| DMatrix::from_fn(d, d, |i, j| c[i][j]);
    Ok(frechet_matrices(
        &DVector::from_column_slice(mu1),
        &m(cov1),
        &DVector::from_column_slice(mu2),
        &m(cov2),
    ))
}

fn frechet_matrices(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let mean_term = (mu1 - mu2).norm_squared();
    let r = psd_sqrt(s1);
    let cross = psd_sqrt(&(&r * s2 * &r));
    (mean_term + (s1 + s2 - cross * 2.0).trace()).max(0.0)
}

/// Fréchet distance between Gaussians fitted to two sample sets, with
/// `COVARIANCE_RIDGE * I` added to each covariance.
pub fn frechet_proxy(generated: &Tensor, reference: &Tensor) -> Result<f64> {
    let d = generated.cols();
    if reference.cols() != d {
        return Err(invalid("sample sets differ in dimension"));
    }
    if generated.rows() < d + 1 || reference.rows() < d + 1 {
        return Err(invalid(format!("Fréchet proxy needs at least {} samples per set", d + 1)));
    }
    let (m1, mut s1) = moments(generated);
    let (m2, mut s2) = moments(reference);
    for i in 0..d {
        s1[(i, i)] += COVARIANCE_RIDGE;
        s2[(i, i)] += COVARIANCE_RIDGE;
    }
    Ok(frechet_matrices(&m1, &s1, &m2, &s2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adherence {
    pub score: f64,
    /// Set when the world has no context attributes to match.
    pub vacuous: bool,
}

/// Mean agreement between the probe's predicted context attributes and the
/// prompts that generated each sample.
pub fn adherence_score(probe: &ProbeClassifier, samples: &Tensor, prompts: &[PromptLabel]) -> Result<Adherence> {
    if samples.rows() != prompts.len() || prompts.is_empty() {
        return Err(invalid("adherence needs one prompt per sample"));
    }
    let ctx: Vec<usize> = (0..probe.arities.len()).filter(|&a| a != probe.concept_index).collect();
    if ctx.is_empty() {
        return Ok(Adherence {
            score: 1.0,
            vacuous: true,
        });
    }
    let pred = probe.predict(samples)?;
    let hits: usize = pred
        .iter()
        .zip(prompts)
        .map(|(p, l)| ctx.iter().filter(|&&a| p[a] == l.values[a]).count())
        .sum();
    Ok(Adherence {
        score: hits as f64 / (ctx.len() * prompts.len()) as f64,
        vacuous: false,
    })
}

/// `F = 1/2 (adh / adh_ref + max(ref - (proxy - ref), 0) / ref)`, clamped
/// to `[0, 1]`.
pub fn fidelity_f(proxy: f64, adherence: f64, ref_proxy: f64, ref_adherence: f64) -> Result<f64> {
    if !(ref_proxy > 0.0 && ref_adherence > 0.0) {
        return Err(invalid("reference fidelity proxy and adherence must be positive"));
    }
    if !(proxy.is_finite() && adherence.is_finite()) {
        return Err(invalid("metric inputs must be finite"));
    }
    let clip = adherence / ref_adherence;
    let fid = (ref_proxy - (proxy - ref_proxy)).max(0.0) / ref_proxy;
    Ok((0.5 * (clip + fid)).clamp(0.0, 1.0))
}

/// `2 E F / (E + F)`, zero when `E + F = 0`.
pub fn harmonic_mean(e: f64, f: f64) -> f64 {
    if e + f == 0.0 {
        0.0
    } else {
        2.0 * e * f / (e + f)
    }
}

/// Raw measurements that a [`MetricsReport`] is assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricInputs {
    pub concept_accuracy: f64,
    pub fidelity_proxy: f64,
    pub adherence: f64,
    pub adherence_vacuous: bool,
    pub reference_concept_accuracy: f64,
    pub reference_fidelity_proxy: f64,
    pub reference_adherence: f64,
    pub concept_mi_nats: f64,
    pub reference_concept_mi_nats: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub concept_accuracy: f64,
    pub fidelity_proxy: f64,
    pub adherence: f64,
    pub adherence_vacuous: bool,
    pub erasure_efficacy: f64,
    pub fidelity: f64,
    pub harmonic_mean: f64,
    pub reference_concept_accuracy: f64,
    pub reference_fidelity_proxy: f64,
    pub reference_adherence: f64,
    pub concept_mi_nats: f64,
    pub reference_concept_mi_nats: f64,
}

impl MetricsReport {
    /// Re-derives the composite scores and checks ranges.
    pub fn check(&self) -> Result<()> {
        let fail = |m: &str| Err(FadeError::InconsistentReport(m.into()));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let all = [
            self.concept_accuracy,
            self.fidelity_proxy,
            self.adherence,
            self.erasure_efficacy,
            self.fidelity,
            self.harmonic_mean,
            self.reference_concept_accuracy,
            self.reference_fidelity_proxy,
            self.reference_adherence,
            self.concept_mi_nats,
            self.reference_concept_mi_nats,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return fail("non-finite entry");
        }
        if !(unit(self.concept_accuracy) && unit(self.adherence) && unit(self.fidelity)) {
            return fail("accuracy, adherence and fidelity must lie in [0, 1]");
        }
        if self.fidelity_proxy < 0.0 {
            return fail("negative fidelity proxy");
        }
        if self.erasure_efficacy != 1.0 - self.concept_accuracy {
            return fail("erasure efficacy differs from 1 - concept accuracy");
        }
        if self.harmonic_mean != harmonic_mean(self.erasure_efficacy, self.fidelity) {
            return fail("harmonic mean differs from its recomputation");
        }
        Ok(())
    }
}

pub fn emit_report(inputs: &MetricInputs) -> Result<MetricsReport> {
    let e = 1.0 - inputs.concept_accuracy;
    let f = fidelity_f(
        inputs.fidelity_proxy,
        inputs.adherence,
        inputs.reference_fidelity_proxy,
        inputs.reference_adherence,
    )?;
    let report = MetricsReport {
        concept_accuracy: inputs.concept_accuracy,
        fidelity_proxy: inputs.fidelity_proxy,
        adherence: inputs.adherence,
        adherence_vacuous: inputs.adherence_vacuous,
        erasure_efficacy: e,
        fidelity: f,
        harmonic_mean: harmonic_mean(e, f),
        reference_concept_accuracy: inputs.reference_concept_accuracy,
        reference_fidelity_proxy: inputs.reference_fidelity_proxy,
        reference_adherence: inputs.reference_adherence,
        concept_mi_nats: inputs.concept_mi_nats,
        reference_concept_mi_nats: inputs.reference_concept_mi_nats,
    };
    report.check()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated samples per prompt.
    pub samples_per_prompt: usize,
    /// Ground-truth samples per neutral prompt for the Fréchet reference.
    pub reference_samples: usize,
    pub guidance: f64,
    pub grid: Option<GridSpec>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_prompt: 500,
            reference_samples: 2000,
            guidance: 2.0,
            grid: None,
            seed: 0,
        }
    }
}

/// Samples drawn from one model for a prompt list, `n` per prompt.
#[derive(Debug, Clone)]
pub struct PromptSamples {
    pub per_prompt: Vec<Tensor>,
}

impl PromptSamples {
    pub fn pooled(&self) -> Tensor {
        let cols = self.per_prompt[0].cols();
        let data: Vec<f64> = self.per_prompt.iter().flat_map(|t| t.data().to_vec()).collect();
        Tensor::new(vec![data.len() / cols, cols], data).expect("nonempty")
    }
}

/// Draws `n` guided samples per prompt. Noise depends only on `seed` and the
/// prompt position, so two models sampled with the same seed share it.
pub fn generate_for_prompts(
    model: &DenoiserModel,
    world: &World,
    schedule: &NoiseSchedule,
    prompts: &[PromptLabel],
    n: usize,
    guidance: f64,
    seed: u64,
) -> Result<PromptSamples> {
    if n == 0 {
        return Err(invalid("sample count must be positive"));
    }
    let sampler = SamplerConfig::new(guidance)?;
    let per_prompt = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let cond = world.encode_batch(&vec![Some(p); n]);
            let noise = SamplingNoise::from_seed(n, world.dim(), schedule.steps(), derive_seed(seed, i as u64));
            Ok(ancestral_sample(model, schedule, &cond, &sampler, &noise, false)?.x0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptSamples { per_prompt })
}

/// Raw per-model measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMeasurements {
    pub concept_accuracy: f64,
    pub fidelity_proxy: f64,
    pub adherence: Adherence,
    pub concept_mi_nats: f64,
}

/// Every context paired once: concept prompts and their neutral partners.
pub fn evaluation_prompts(world: &World) -> Result<crate::world::PromptSetPair> {
    let contexts = world.all_labels().len() / 2;
    let mut pairs = build_prompt_sets(world, contexts.max(1), 0)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs.neutral[a].cmp(&pairs.neutral[b]));
    pairs.concept = order.iter().map(|&i| pairs.concept[i].clone()).collect();
    pairs.neutral = order.iter().map(|&i| pairs.neutral[i].clone()).collect();
    Ok(pairs)
}

pub fn measure_model(
    model: &DenoiserModel,
    world: &World,
    schedule: &NoiseSchedule,
    probe: &ProbeClassifier,
    cfg: &EvalConfig,
) -> Result<ModelMeasurements> {
    let prompts = evaluation_prompts(world)?;
    let n = cfg.samples_per_prompt;
    let xc = generate_for_prompts(model, world, schedule, &prompts.concept, n, cfg.guidance, derive_seed(cfg.seed, 1))?;
    let xn = generate_for_prompts(model, world, schedule, &prompts.neutral, n, cfg.guidance, derive_seed(cfg.seed, 2))?;
    let concept_accuracy = concept_accuracy(probe, &xc.pooled())?;

    let mut proxy = 0.0;
    for (i, (p, x)) in prompts.neutral.iter().zip(&xn.per_prompt).enumerate() {
        let truth = sample_world(world, p, cfg.reference_samples, derive_seed(cfg.seed, 100 + i as u64))?;
        proxy += frechet_proxy(x, &truth)?;
    }
    proxy /= prompts.neutral.len() as f64;

    let labels: Vec<PromptLabel> = prompts
        .neutral
        .iter()
        .flat_map(|p| std::iter::repeat(p.clone()).take(n))
        .collect();
    let adherence = adherence_score(probe, &xn.pooled(), &labels)?;
    let grid = cfg.grid.clone().unwrap_or_else(|| GridSpec::for_world(world));
    let mi = empirical_concept_mi(&xc.pooled(), &xn.pooled(), &grid)?;
    Ok(ModelMeasurements {
        concept_accuracy,
        fidelity_proxy: proxy,
        adherence,
        concept_mi_nats: mi,
    })
}

/// Scores `model` against the reference (pretrained) model under common
/// sampling noise.
pub fn evaluate_model(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    world: &World,
    schedule: &NoiseSchedule,
    probe: &ProbeClassifier,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let m = measure_model(model, world, schedule, probe, cfg)?;
    let r = measure_model(reference, world, schedule, probe, cfg)?;
    report_from(&m, &r)
}

pub fn report_from(m: &ModelMeasurements, r: &ModelMeasurements) -> Result<MetricsReport> {
    emit_report(&MetricInputs {
        concept_accuracy: m.concept_accuracy,
        fidelity_proxy: m.fidelity_proxy,
        adherence: m.adherence.score,
        adherence_vacuous: m.adherence.vacuous,
        reference_concept_accuracy: r.concept_accuracy,
        reference_fidelity_proxy: r.fidelity_proxy,
        reference_adherence: r.adherence.score,
        concept_mi_nats: m.concept_mi_nats,
        reference_concept_mi_nats: r.concept_mi_nats,
    })
}
