//! Exact information-theoretic oracle on finite supports: Bayes-optimal
//! discriminator, mutual information, total variation, optimal adversarial
//! losses and the equilibrium checks built on them. Natural logarithms
//! throughout.

use std::f64::consts::LN_2;

use fade_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::adversary::CLAMP;
use crate::error::{invalid, FadeError, Result};
use crate::world::World;

const SUM_TOL: f64 = 1e-12;

/// Class-conditional distributions `P(X | C = 1)`, `P(X | C = 0)` over a
/// finite support with prior `P(C = 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePairedDistribution {
    p1: Vec<f64>,
    p0: Vec<f64>,
    prior: f64,
}

impl DiscretePairedDistribution {
    pub fn new(p1: Vec<f64>, p0: Vec<f64>, prior: f64) -> Result<Self> {
        let bad = |m: String| FadeError::InvalidDistribution(m);
        if p1.is_empty() || p1.len() != p0.len() {
            return Err(bad(format!("supports of size {} and {}", p1.len(), p0.len())));
        }
        if !(prior > 0.0 && prior < 1.0) {
            return Err(bad(format!("prior {prior} outside (0, 1)")));
        }
        for (name, p) in [("P1", &p1), ("P0", &p0)] {
            if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(bad(format!("{name} has a negative or non-finite entry")));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > SUM_TOL {
                return Err(bad(format!("{name} sums to {s}")));
            }
        }
        Ok(DiscretePairedDistribution { p1, p0, prior })
    }

    /// Balanced prior.
    pub fn balanced(p1: Vec<f64>, p0: Vec<f64>) -> Result<Self> {
        Self::new(p1, p0, 0.5)
    }

    pub fn p1(&self) -> &[f64] {
        &self.p1
    }

    pub fn p0(&self) -> &[f64] {
        &self.p0
    }

    pub fn prior(&self) -> f64 {
        self.prior
    }

    pub fn support(&self) -> usize {
        self.p1.len()
    }

    /// Merges outcome `j` into outcome `i` (`i != j`).
    pub fn merge_bins(&self, i: usize, j: usize) -> Result<Self> {
        if i == j || i >= self.support() || j >= self.support() {
            return Err(invalid("merge needs two distinct in-range outcomes"));
        }
        let merge = |p: &[f64]| {
            let mut out = Vec::with_capacity(p.len() - 1);
            for (k, &v) in p.iter().enumerate() {
                if k == j {
                    continue;
                }
                out.push(if k == i { v + p[j] } else { v });
            }
            out
        };
        Ok(DiscretePairedDistribution {
            p1: merge(&self.p1),
            p0: merge(&self.p0),
            prior: self.prior,
        })
    }

    /// `P1(A)` and `P0(A)` for the event given as a membership mask.
    pub fn event_probabilities(&self, event: &[bool]) -> (f64, f64) {
        let mut a = (0.0, 0.0);
        for ((&e, p1), p0) in event.iter().zip(&self.p1).zip(&self.p0) {
            if e {
                a.0 += p1;
                a.1 += p0;
            }
        }
        a
    }

    fn require_balanced(&self) -> Result<()> {
        if self.prior != 0.5 {
            return Err(invalid(format!("prior {} given where 0.5 is required", self.prior)));
        }
        Ok(())
    }
}

/// `D*(x) = pi P1(x) / (pi P1(x) + (1 - pi) P0(x))`.
pub fn bayes_discriminator(dist: &DiscretePairedDistribution) -> Result<Vec<f64>> {
    let pi = dist.prior;
    dist.p1
        .iter()
        .zip(&dist.p0)
        .enumerate()
        .map(|(i, (&a, &b))| {
            let num = pi * a;
            let den = num + (1.0 - pi) * b;
            if den == 0.0 {
                Err(FadeError::DegenerateSupport(i))
            } else {
                Ok(num / den)
            }
        })
        .collect()
}

fn xlogy_ratio(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

/// `I(C; X)` in nats.
pub fn mutual_information(dist: &DiscretePairedDistribution) -> f64 {
    let pi = dist.prior;
    let mut total = 0.0;
    for (&a, &b) in dist.p1.iter().zip(&dist.p0) {
        let px = pi * a + (1.0 - pi) * b;
        if px == 0.0 {
            continue;
        }
        total += pi * xlogy_ratio(a, px) + (1.0 - pi) * xlogy_ratio(b, px);
    }
    total.max(0.0)
}

/// `1/2 sum |P1 - P0|`.
pub fn total_variation(dist: &DiscretePairedDistribution) -> f64 {
    0.5 * dist.p1.iter().zip(&dist.p0).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `1/2 sum (P1 - P0)^2 / P0`; infinite when `P1` has mass where `P0` has none.
pub fn half_chi_square(dist: &DiscretePairedDistribution) -> f64 {
    0.5 * dist
        .p1
        .iter()
        .zip(&dist.p0)
        .map(|(&a, &b)| {
            if a == b {
                0.0
            } else if b == 0.0 {
                f64::INFINITY
            } else {
                (a - b) * (a - b) / b
            }
        })
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalLosses {
    pub discriminator: f64,
    pub removal: f64,
}

/// Adversarial losses at the Bayes discriminator for any prior, with the
/// same probability clamp as the trainable discriminator.
pub fn optimal_losses_general(dist: &DiscretePairedDistribution) -> Result<OptimalLosses> {
    let d = bayes_discriminator(dist)?;
    let pi = dist.prior;
    let mut disc = 0.0;
    let mut rem = 0.0;
    for ((&a, &b), &q) in dist.p1.iter().zip(&dist.p0).zip(&d) {
        let q = q.clamp(CLAMP, 1.0 - CLAMP);
        disc -= pi * a * q.ln() + (1.0 - pi) * b * (1.0 - q).ln();
        rem -= a * (1.0 - q).ln();
    }
    Ok(OptimalLosses {
        discriminator: disc,
        removal: rem,
    })
}

/// [`optimal_losses_general`] restricted to the balanced prior, where the
/// equilibrium values are `2 ln 2` and `ln 2`. The discriminator term is
/// reported per class (`mean(-ln D(x_c)) + mean(-ln(1 - D(x_neg)))`), i.e.
/// twice the prior-weighted sum.
pub fn optimal_losses(dist: &DiscretePairedDistribution) -> Result<OptimalLosses> {
    dist.require_balanced()?;
    let g = optimal_losses_general(dist)?;
    Ok(OptimalLosses {
        discriminator: 2.0 * g.discriminator,
        removal: g.removal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBound {
    pub best_accuracy: f64,
    pub total_variation: f64,
    /// `|best_accuracy - (1/2 + TV/2)|`
    pub identity_residual: f64,
    pub holds: bool,
}

/// Best achievable accuracy `sum max(pi P1, (1 - pi) P0)` (thresholding
/// `D*` at one half; ties contribute the same either way) against the
/// `1/2 + TV/2` identity.
pub fn accuracy_tv_bound(dist: &DiscretePairedDistribution) -> Result<AccuracyBound> {
    dist.require_balanced()?;
    let best: f64 = dist
        .p1
        .iter()
        .zip(&dist.p0)
        .map(|(a, b)| (0.5 * a).max(0.5 * b))
        .sum();
    let tv = total_variation(dist);
    let residual = (best - (0.5 + 0.5 * tv)).abs();
    Ok(AccuracyBound {
        best_accuracy: best,
        total_variation: tv,
        identity_residual: residual,
        holds: residual <= 1e-12,
    })
}

/// Largest total variation compatible with a discriminator that cannot beat
/// accuracy `acc` at the balanced prior.
pub fn tv_ceiling_from_accuracy(acc: f64) -> f64 {
    (2.0 * acc - 1.0).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Signed slack; nonpositive means the inequality holds.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub mutual_information: f64,
    pub total_variation: f64,
    pub bayes_discriminator: Vec<f64>,
    pub optimal_discriminator_loss: f64,
    pub removal_loss_at_optimum: f64,
    pub best_accuracy: f64,
    pub tolerance: f64,
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
}

/// Slack allowed for rounding in the inequality checks.
const ROUND: f64 = 1e-12;

/// Checks the equilibrium statement in both directions at tolerance `tol`:
///
/// * `TV <= tol` implies `I <= tol ln 2` and
///   `0 <= L_rem(D*) - ln 2 <= chi^2(P1 || P0) / 2`;
/// * `TV > tol` implies `I > 0` and `L_rem(D*) - ln 2 >= TV^2 > 0`.
///
/// Both bounds hold for every pair, so they are also checked unconditionally,
/// together with the `1/2 + TV/2` accuracy identity.
pub fn verify_theorem_equilibrium(dist: &DiscretePairedDistribution, tol: f64) -> Result<TheoremReport> {
    dist.require_balanced()?;
    if !(tol >= 0.0) {
        return Err(invalid("tolerance must be nonnegative"));
    }
    let d = bayes_discriminator(dist)?;
    let mi = mutual_information(dist);
    let tv = total_variation(dist);
    let losses = optimal_losses(dist)?;
    let acc = accuracy_tv_bound(dist)?;
    let gap = losses.removal - LN_2;
    let chi = half_chi_square(dist);

    let mut checks = Vec::new();
    let mut push = |name: &str, residual: f64| {
        checks.push(CheckOutcome {
            name: name.into(),
            passed: residual <= ROUND,
            residual,
        });
    };
    push("mi_below_tv_ln2", mi - LN_2 * tv);
    push("removal_gap_above_tv_squared", tv * tv - gap);
    push("accuracy_identity", acc.identity_residual);
    if tv <= tol {
        push("near_equilibrium_mi", mi - LN_2 * tol);
        push("near_equilibrium_removal_lower", -gap);
        push("near_equilibrium_removal_upper", if chi.is_finite() { gap - chi } else { 0.0 });
    } else {
        // strict positivity, expressed as slack below zero
        push("separated_mi_positive", if mi > 0.0 { -mi } else { 1.0 });
        push("separated_removal_margin", if gap > 0.0 { tv * tv - gap } else { 1.0 });
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(TheoremReport {
        mutual_information: mi,
        total_variation: tv,
        bayes_discriminator: d,
        optimal_discriminator_loss: losses.discriminator,
        removal_loss_at_optimum: losses.removal,
        best_accuracy: acc.best_accuracy,
        tolerance: tol,
        checks,
        passed,
    })
}

/// Regular histogram over an axis-aligned box; points outside fall into the
/// nearest edge bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub bins: usize,
}

impl GridSpec {
    /// 16 bins per axis over the world's component means +- 3 standard
    /// deviations.
    pub fn for_world(world: &World) -> Self {
        let (lower, upper) = world.bounding_box(3.0);
        GridSpec { lower, upper, bins: 16 }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.bins == 0 || self.lower.len() != dim || self.upper.len() != dim {
            return Err(invalid("grid needs at least one bin and bounds matching the data dimension"));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(u > l)) {
            return Err(invalid("grid upper bounds must exceed lower bounds"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.bins.pow(self.lower.len() as u32)
    }

    pub fn cell_of(&self, x: &[f64]) -> usize {
        x.iter().enumerate().fold(0, |acc, (i, &v)| {
            let u = (v - self.lower[i]) / (self.upper[i] - self.lower[i]) * self.bins as f64;
            let b = if u.is_nan() { 0 } else { (u.floor().max(0.0) as usize).min(self.bins - 1) };
            acc * self.bins + b
        })
    }
}

pub const HISTOGRAM_SMOOTHING: f64 = 1e-9;
pub const MIN_SAMPLES_PER_CLASS: usize = 100;

/// Histogram estimate of the paired distribution of two sample sets.
pub fn binned_distribution(x1: &Tensor, x0: &Tensor, grid: &GridSpec) -> Result<DiscretePairedDistribution> {
    if x1.is_empty() || x0.is_empty() {
        return Err(invalid("both classes need samples"));
    }
    if x1.rows() < MIN_SAMPLES_PER_CLASS || x0.rows() < MIN_SAMPLES_PER_CLASS {
        return Err(invalid(format!(
            "at least {MIN_SAMPLES_PER_CLASS} samples per class required, got {} and {}",
            x1.rows(),
            x0.rows()
        )));
    }
    if x1.cols() != x0.cols() {
        return Err(invalid("sample sets differ in dimension"));
    }
    grid.validate(x1.cols())?;
    let hist = |x: &Tensor| {
        let mut counts = vec![HISTOGRAM_SMOOTHING; grid.cells()];
        for r in 0..x.rows() {
            counts[grid.cell_of(x.row(r))] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        counts.iter().map(|c| c / total).collect::<Vec<_>>()
    };
    let (n1, n0) = (x1.rows() as f64, x0.rows() as f64);
    DiscretePairedDistribution::new(renormalize(hist(x1)), renormalize(hist(x0)), n1 / (n1 + n0))
}

/// Removes rounding drift so the sum check passes.
fn renormalize(mut p: Vec<f64>) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

/// Mutual information between the origin flag and the binned sample.
pub fn empirical_concept_mi(x1: &Tensor, x0: &Tensor, grid: &GridSpec) -> Result<f64> {
    Ok(mutual_information(&binned_distribution(x1, x0, grid)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> DiscretePairedDistribution {
        DiscretePairedDistribution::balanced(vec![0.8, 0.2], vec![0.2, 0.8]).unwrap()
    }

    #[test]
    fn worked_pair() {
        let d = pair();
        let ds = bayes_discriminator(&d).unwrap();
        assert!((ds[0] - 0.8).abs() < 1e-15 && (ds[1] - 0.2).abs() < 1e-15);
        // brute force over the joint
        let joint: [f64; 4] = [0.4, 0.1, 0.1, 0.4];
        let mut mi = 0.0;
        for p in joint {
            mi += p * (p / (0.5 * 0.5)).ln();
        }
        assert!((mutual_information(&d) - mi).abs() < 1e-15);
        assert!((mutual_information(&d) - 0.1927).abs() < 1e-4);
        assert!((total_variation(&d) - 0.6).abs() < 1e-15);
        let l = optimal_losses(&d).unwrap();
        assert!((l.removal + 0.8 * 0.2f64.ln() + 0.2 * 0.8f64.ln()).abs() < 1e-12);
        assert!((l.removal - 1.3322).abs() < 1e-4);
        assert!((accuracy_tv_bound(&d).unwrap().best_accuracy - 0.8).abs() < 1e-15);
    }

    #[test]
    fn equal_pair_is_equilibrium() {
        let d = DiscretePairedDistribution::balanced(vec![0.3, 0.7], vec![0.3, 0.7]).unwrap();
        assert!(bayes_discriminator(&d).unwrap().iter().all(|&v| v == 0.5));
        assert_eq!(mutual_information(&d), 0.0);
        let l = optimal_losses(&d).unwrap();
        assert!((l.discriminator - 2.0 * LN_2).abs() < 1e-15);
        assert!((l.removal - LN_2).abs() < 1e-15);
        let r = verify_theorem_equilibrium(&d, 0.0).unwrap();
        assert!(r.passed);
    }

    #[test]
    fn disjoint_supports() {
        let d = DiscretePairedDistribution::balanced(vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 1.0]).unwrap();
        let ds = bayes_discriminator(&d).unwrap();
        assert_eq!(ds, vec![1.0, 1.0, 0.0]);
        assert!((mutual_information(&d) - LN_2).abs() < 1e-15);
        assert_eq!(total_variation(&d), 1.0);
        let l = optimal_losses(&d).unwrap();
        assert!(l.discriminator < 1e-6);
        assert!((l.removal + CLAMP.ln()).abs() < 1e-6);
    }

    #[test]
    fn invalid_inputs() {
        assert!(DiscretePairedDistribution::balanced(vec![0.5, 0.4], vec![0.5, 0.5]).is_err());
        assert!(DiscretePairedDistribution::new(vec![1.0], vec![1.0], 1.0).is_err());
        let d = DiscretePairedDistribution::balanced(vec![1.0, 0.0], vec![1.0, 0.0]).unwrap();
        assert_eq!(bayes_discriminator(&d), Err(FadeError::DegenerateSupport(1)));
        let skew = DiscretePairedDistribution::new(vec![1.0], vec![1.0], 0.3).unwrap();
        assert!(optimal_losses(&skew).is_err());
        assert!(optimal_losses_general(&skew).is_ok());
    }
}
