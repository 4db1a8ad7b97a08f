use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::params::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    pub tolerance: f64,
    /// Scalars probed per tensor; `None` probes all of them.
    pub probes_per_tensor: Option<usize>,
    /// Lower bound on the relative-error denominator.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            probes_per_tensor: None,
            denominator_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error per parameter tensor, in store order.
    pub per_parameter: Vec<(String, f64)>,
    pub worst: f64,
    pub probes: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn evaluate<F>(params: &ParameterStore, loss: &F) -> Result<(Tape, Var, f64)>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(params, &mut tape)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(AutodiffError::dim("finite_difference_check", "loss must be scalar"));
    }
    let value = v.item();
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite("loss evaluation".into()));
    }
    Ok((tape, out, value))
}

/// Compares tape gradients of a scalar loss against central differences.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn finite_difference_check<F>(params: &ParameterStore, loss: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<Var>,
{
    if !(cfg.step > 0.0) {
        return Err(AutodiffError::InvalidArgument("step must be positive".into()));
    }
    let (tape, out, _) = evaluate(params, &loss)?;
    let analytic = tape.backward(out, &Tensor::scalar(1.0), params)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut per_parameter = Vec::with_capacity(params.len());
    let mut probes = 0;
    for (t, name) in params.names().iter().enumerate() {
        let n = params.tensor_at(t).len();
        let picks: Vec<usize> = match cfg.probes_per_tensor {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for j in picks {
            let original = params.tensor_at(t).data()[j];
            work.get_mut(name)?.data_mut()[j] = original + cfg.step;
            let (_, _, plus) = evaluate(&work, &loss)?;
            work.get_mut(name)?.data_mut()[j] = original - cfg.step;
            let (_, _, minus) = evaluate(&work, &loss)?;
            work.get_mut(name)?.data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.tensor_at(t).data()[j];
            let denom = a.abs().max(numeric.abs()).max(cfg.denominator_floor);
            worst = worst.max((a - numeric).abs() / denom);
            probes += 1;
        }
        per_parameter.push((name.clone(), worst));
    }
    let worst = per_parameter.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_parameter,
        worst,
        probes,
        tolerance: cfg.tolerance,
        passed: worst <= cfg.tolerance,
    })
}
