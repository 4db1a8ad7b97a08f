//! Concept discriminator and the two adversarial losses.
//!
//! The discriminator maps a data point to one logistic probability per
//! concept head. Probabilities are clamped into `[CLAMP, 1 - CLAMP]` before
//! any logarithm.

use fade_autodiff::{sigmoid, Activation, Mlp, ParamMode, ParameterStore, Tape, Tensor, Var};

use crate::error::{invalid, Result};

pub const CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub arch: Mlp,
    pub params: ParameterStore,
}

impl Discriminator {
    /// Two SiLU hidden layers of width 64, `heads` logistic outputs.
    pub fn new(dim: usize, heads: usize, seed: u64) -> Result<Self> {
        Self::with_hidden(dim, &[64, 64], heads, seed)
    }

    pub fn with_hidden(dim: usize, hidden: &[usize], heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 {
            return Err(invalid("a discriminator needs at least one head"));
        }
        let mut sizes = vec![dim];
        sizes.extend(hidden);
        sizes.push(heads);
        let arch = Mlp::new(sizes, Activation::Silu)?;
        let params = arch.init(seed);
        Ok(Discriminator { arch, params })
    }

    pub fn from_params(arch: Mlp, params: ParameterStore) -> Result<Self> {
        arch.forward(&params, &Tensor::zeros(&[1, arch.input_width()]))?;
        Ok(Discriminator { arch, params })
    }

    pub fn heads(&self) -> usize {
        self.arch.output_width()
    }

    pub fn dim(&self) -> usize {
        self.arch.input_width()
    }

    fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.heads() {
            return Err(invalid(format!("head {head} out of {}", self.heads())));
        }
        Ok(())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.arch.forward(&self.params, x)?)
    }

    /// Unclamped probabilities of one head, one per row of `x`.
    pub fn probabilities(&self, x: &Tensor, head: usize) -> Result<Vec<f64>> {
        self.check_head(head)?;
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|r| sigmoid(logits.row(r)[head])).collect())
    }

    /// `L_adv^D` on a concept batch and a neutral batch.
    pub fn discriminator_loss(&self, x_c: &Tensor, x_neg: &Tensor, head: usize) -> Result<f64> {
        discriminator_loss_from_probs(&self.probabilities(x_c, head)?, &self.probabilities(x_neg, head)?)
    }

    /// `L_rem` on a concept batch.
    pub fn removal_loss(&self, x_c: &Tensor, head: usize) -> Result<f64> {
        removal_loss_from_probs(&self.probabilities(x_c, head)?)
    }

    /// Fraction of rows where `D(x) > 0.5` agrees with the origin flag.
    pub fn accuracy(&self, x: &Tensor, origin: &[bool], head: usize) -> Result<f64> {
        accuracy_from_probs(&self.probabilities(x, head)?, origin)
    }

    /// Records `L_adv^D` with the discriminator parameters trainable and the
    /// batches already on the tape.
    pub fn record_discriminator_loss(&self, tape: &mut Tape, x_c: Var, x_neg: Var, head: usize) -> Result<Var> {
        self.check_head(head)?;
        let lc = self.arch.record(tape, &self.params, x_c, ParamMode::Trainable)?;
        let ln = self.arch.record(tape, &self.params, x_neg, ParamMode::Trainable)?;
        let pos = tape.binary_log_loss(lc, head, true, CLAMP)?;
        let neg = tape.binary_log_loss(ln, head, false, CLAMP)?;
        Ok(tape.lincomb(&[(pos, 1.0), (neg, 1.0)])?)
    }

    /// Records `L_rem` with the discriminator frozen, so gradients reach only
    /// whatever produced `x_c`.
    pub fn record_removal_loss(&self, tape: &mut Tape, x_c: Var, head: usize) -> Result<Var> {
        self.check_head(head)?;
        let l = self.arch.record(tape, &self.params, x_c, ParamMode::Frozen)?;
        Ok(tape.binary_log_loss(l, head, false, CLAMP)?)
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(CLAMP, 1.0 - CLAMP)
}

/// `mean(-ln D(x_c)) + mean(-ln(1 - D(x_neg)))`.
pub fn discriminator_loss_from_probs(p_c: &[f64], p_neg: &[f64]) -> Result<f64> {
    if p_c.is_empty() || p_neg.is_empty() {
        return Err(invalid("discriminator loss needs nonempty batches"));
    }
    let a = p_c.iter().map(|&p| -clamp(p).ln()).sum::<f64>() / p_c.len() as f64;
    let b = p_neg.iter().map(|&p| -(1.0 - clamp(p)).ln()).sum::<f64>() / p_neg.len() as f64;
    Ok(a + b)
}

/// `mean(-ln(1 - D(x_c)))`.
pub fn removal_loss_from_probs(p_c: &[f64]) -> Result<f64> {
    if p_c.is_empty() {
        return Err(invalid("removal loss needs a nonempty batch"));
    }
    Ok(p_c.iter().map(|&p| -(1.0 - clamp(p)).ln()).sum::<f64>() / p_c.len() as f64)
}

/// A row counts as correct when `p > 0.5` and the flag is set, or `p < 0.5`
/// and it is not; `p == 0.5` is always wrong.
pub fn accuracy_from_probs(p: &[f64], origin: &[bool]) -> Result<f64> {
    if p.is_empty() || p.len() != origin.len() {
        return Err(invalid("accuracy needs a nonempty set with one flag per sample"));
    }
    let correct = p
        .iter()
        .zip(origin)
        .filter(|(&p, &o)| (o && p > 0.5) || (!o && p < 0.5))
        .count();
    Ok(correct as f64 / p.len() as f64)
}
