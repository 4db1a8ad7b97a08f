//! Concept-labeled Gaussian-mixture worlds and paired prompt sets.
//!
//! Every full assignment of the world's discrete attributes owns one 2-D
//! Gaussian component. One binary attribute is the concept; the remaining
//! attributes form the context a prompt pair shares.

use std::collections::BTreeMap;

use fade_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FadeError, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub arity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub assignment: BTreeMap<String, usize>,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

/// Serializable world description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub dim: usize,
    pub attributes: Vec<AttributeSpec>,
    pub concept: String,
    pub components: Vec<ComponentSpec>,
}

impl WorldConfig {
    /// Concept `c` crossed with a binary `scene`: concept-present components
    /// sit at x = 4, absent ones at x = -4, scenes at y = 0 and y = 3, all
    /// with covariance `0.5 I`.
    pub fn default_world() -> Self {
        let mut components = Vec::new();
        for c in 0..2 {
            for scene in 0..2 {
                let mut assignment = BTreeMap::new();
                assignment.insert("c".to_string(), c);
                assignment.insert("scene".to_string(), scene);
                components.push(ComponentSpec {
                    assignment,
                    mean: vec![if c == 1 { 4.0 } else { -4.0 }, 3.0 * scene as f64],
                    covariance: vec![vec![0.5, 0.0], vec![0.0, 0.5]],
                });
            }
        }
        WorldConfig {
            dim: 2,
            attributes: vec![
                AttributeSpec {
                    name: "c".into(),
                    arity: 2,
                },
                AttributeSpec {
                    name: "scene".into(),
                    arity: 2,
                },
            ],
            concept: "c".into(),
            components,
        }
    }
}

/// One mixture component with its precomputed Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
}

fn cholesky(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = m.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = m[i][i] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (m[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

/// Validated world.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    config: WorldConfig,
    concept_index: usize,
    /// Components indexed by the mixed-radix code of the assignment.
    components: Vec<Component>,
}

/// Discrete conditioning: one value per attribute, in attribute order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptLabel {
    pub values: Vec<usize>,
    pub concept: bool,
}

/// Paired concept / neutral prompts differing only in the concept attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSetPair {
    pub concept: Vec<PromptLabel>,
    pub neutral: Vec<PromptLabel>,
}

impl PromptSetPair {
    pub fn len(&self) -> usize {
        self.concept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concept.is_empty()
    }

    /// Pairing invariant: equal lengths, concept flags 1/0, and members of
    /// each pair agree on every attribute except `concept_index`.
    pub fn is_well_paired(&self, concept_index: usize) -> bool {
        self.concept.len() == self.neutral.len()
            && self.concept.iter().zip(&self.neutral).all(|(c, n)| {
                c.concept
                    && !n.concept
                    && c.values.len() == n.values.len()
                    && c.values
                        .iter()
                        .zip(&n.values)
                        .enumerate()
                        .all(|(i, (a, b))| i == concept_index || a == b)
            })
    }
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        let bad = |m: String| FadeError::InvalidWorld(m);
        if config.dim == 0 {
            return Err(bad("dimension must be positive".into()));
        }
        if config.attributes.is_empty() {
            return Err(bad("at least one attribute is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for a in &config.attributes {
            if a.arity == 0 {
                return Err(bad(format!("attribute `{}` has arity 0", a.name)));
            }
            if !seen.insert(a.name.as_str()) {
                return Err(bad(format!("attribute `{}` listed twice", a.name)));
            }
        }
        let concept_index = config
            .attributes
            .iter()
            .position(|a| a.name == config.concept)
            .ok_or_else(|| bad(format!("concept attribute `{}` is not declared", config.concept)))?;
        if config.attributes[concept_index].arity != 2 {
            return Err(bad("concept attribute must be binary".into()));
        }
        let total: usize = config.attributes.iter().map(|a| a.arity).product();
        let mut slots: Vec<Option<Component>> = vec![None; total];
        for spec in &config.components {
            if spec.assignment.len() != config.attributes.len() {
                return Err(bad(format!("component {:?} does not assign every attribute", spec.assignment)));
            }
            let mut values = Vec::with_capacity(config.attributes.len());
            for a in &config.attributes {
                let v = *spec
                    .assignment
                    .get(&a.name)
                    .ok_or_else(|| bad(format!("component {:?} misses `{}`", spec.assignment, a.name)))?;
                if v >= a.arity {
                    return Err(bad(format!("value {v} out of range for `{}`", a.name)));
                }
                values.push(v);
            }
            if spec.mean.len() != config.dim
                || spec.covariance.len() != config.dim
                || spec.covariance.iter().any(|r| r.len() != config.dim)
            {
                return Err(bad(format!("component {:?} has wrong mean/covariance size", spec.assignment)));
            }
            if spec.mean.iter().chain(spec.covariance.iter().flatten()).any(|v| !v.is_finite()) {
                return Err(bad("non-finite component entry".into()));
            }
            for i in 0..config.dim {
                for j in 0..i {
                    if (spec.covariance[i][j] - spec.covariance[j][i]).abs() > 1e-12 {
                        return Err(bad(format!("covariance of {:?} is not symmetric", spec.assignment)));
                    }
                }
            }
            let chol = cholesky(&spec.covariance).ok_or_else(|| {
                bad(format!("covariance of {:?} is not positive-definite", spec.assignment))
            })?;
            let code = encode_values(&config.attributes, &values);
            if slots[code].is_some() {
                return Err(bad(format!("assignment {:?} listed twice", spec.assignment)));
            }
            slots[code] = Some(Component {
                mean: spec.mean.clone(),
                covariance: spec.covariance.clone(),
                chol,
            });
        }
        let mut components = Vec::with_capacity(total);
        for (code, slot) in slots.into_iter().enumerate() {
            let c = slot.ok_or_else(|| {
                let values = decode_values(&config.attributes, code);
                bad(format!("no component for assignment {values:?}"))
            })?;
            components.push(c);
        }
        Ok(World {
            config,
            concept_index,
            components,
        })
    }

    pub fn default_world() -> Self {
        World::new(WorldConfig::default_world()).expect("default world is valid")
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn attributes(&self) -> &[AttributeSpec] {
        &self.config.attributes
    }

    pub fn concept_index(&self) -> usize {
        self.concept_index
    }

    /// Width of the one-hot condition encoding.
    pub fn condition_width(&self) -> usize {
        self.config.attributes.iter().map(|a| a.arity).sum()
    }

    /// Indices of the non-concept attributes.
    pub fn context_attributes(&self) -> Vec<usize> {
        (0..self.config.attributes.len()).filter(|&i| i != self.concept_index).collect()
    }

    pub fn label(&self, values: Vec<usize>) -> Result<PromptLabel> {
        if values.len() != self.config.attributes.len()
            || values.iter().zip(&self.config.attributes).any(|(v, a)| *v >= a.arity)
        {
            return Err(FadeError::UnknownLabel(format!("{values:?}")));
        }
        let concept = values[self.concept_index] == 1;
        Ok(PromptLabel { values, concept })
    }

    /// Every attribute assignment in mixed-radix order.
    pub fn all_labels(&self) -> Vec<PromptLabel> {
        (0..self.components.len())
            .map(|code| self.label(decode_values(&self.config.attributes, code)).expect("in range"))
            .collect()
    }

    pub fn component(&self, label: &PromptLabel) -> Result<&Component> {
        let valid = label.values.len() == self.config.attributes.len()
            && label.values.iter().zip(&self.config.attributes).all(|(v, a)| *v < a.arity)
            && label.concept == (label.values[self.concept_index] == 1);
        if !valid {
            return Err(FadeError::UnknownLabel(format!("{label:?}")));
        }
        Ok(&self.components[encode_values(&self.config.attributes, &label.values)])
    }

    /// One-hot per attribute, concatenated. `None` is the null prompt and
    /// encodes as zeros.
    pub fn encode(&self, label: Option<&PromptLabel>) -> Vec<f64> {
        let mut out = vec![0.0; self.condition_width()];
        if let Some(label) = label {
            let mut off = 0;
            for (a, &v) in self.config.attributes.iter().zip(&label.values) {
                out[off + v] = 1.0;
                off += a.arity;
            }
        }
        out
    }

    /// Condition matrix with one encoded row per label.
    pub fn encode_batch(&self, labels: &[Option<&PromptLabel>]) -> Tensor {
        let w = self.condition_width();
        let data: Vec<f64> = labels.iter().flat_map(|l| self.encode(*l)).collect();
        Tensor::new(vec![labels.len(), w], data).expect("non-empty batch")
    }

    pub(crate) fn draw<R: Rng>(&self, component: &Component, rng: &mut R, out: &mut Vec<f64>) {
        let d = self.config.dim;
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            let s: f64 = (0..=i).map(|k| component.chol[i][k] * z[k]).sum();
            out.push(component.mean[i] + s);
        }
    }

    /// Axis-aligned box covering every component mean +- `k` standard
    /// deviations (per-axis). Returns `(lower, upper)`.
    pub fn bounding_box(&self, k: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.config.dim;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for c in &self.components {
            for i in 0..d {
                let s = c.covariance[i][i].sqrt();
                lo[i] = lo[i].min(c.mean[i] - k * s);
                hi[i] = hi[i].max(c.mean[i] + k * s);
            }
        }
        (lo, hi)
    }
}

fn encode_values(attrs: &[AttributeSpec], values: &[usize]) -> usize {
    values.iter().zip(attrs).fold(0, |acc, (v, a)| acc * a.arity + v)
}

fn decode_values(attrs: &[AttributeSpec], mut code: usize) -> Vec<usize> {
    let mut values = vec![0; attrs.len()];
    for (i, a) in attrs.iter().enumerate().rev() {
        values[i] = code % a.arity;
        code /= a.arity;
    }
    values
}

/// `n` i.i.d. draws from the label's component as an `n x dim` matrix.
pub fn sample_world(world: &World, label: &PromptLabel, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(FadeError::InvalidArgument("sample count must be at least 1".into()));
    }
    let comp = world.component(label)?;
    let mut rng = rng_for(seed, 0);
    let mut data = Vec::with_capacity(n * world.dim());
    for _ in 0..n {
        world.draw(comp, &mut rng, &mut data);
    }
    Ok(Tensor::new(vec![n, world.dim()], data)?)
}

/// Draws one point per label using a caller-owned generator.
pub fn sample_labels<R: Rng>(world: &World, labels: &[&PromptLabel], rng: &mut R) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * world.dim());
    for l in labels {
        world.draw(world.component(l)?, rng, &mut data);
    }
    Ok(Tensor::new(vec![labels.len(), world.dim()], data)?)
}

/// `k` concept/neutral pairs over distinct contexts (seeded order, cycling
/// when `k` exceeds the number of contexts).
pub fn build_prompt_sets(world: &World, k: usize, seed: u64) -> Result<PromptSetPair> {
    if k == 0 {
        return Err(FadeError::InvalidArgument("context variety must be at least 1".into()));
    }
    let ctx = world.context_attributes();
    if k > 1 && ctx.is_empty() {
        return Err(FadeError::InvalidArgument(
            "more than one context requested from a world without context attributes".into(),
        ));
    }
    let ci = world.concept_index();
    let mut contexts: Vec<Vec<usize>> = world
        .all_labels()
        .into_iter()
        .filter(|l| l.values[ci] == 0)
        .map(|l| l.values)
        .collect();
    contexts.shuffle(&mut rng_for(seed, 0));
    let mut concept = Vec::with_capacity(k);
    let mut neutral = Vec::with_capacity(k);
    for i in 0..k {
        let mut values = contexts[i % contexts.len()].clone();
        values[ci] = 0;
        neutral.push(world.label(values.clone())?);
        values[ci] = 1;
        concept.push(world.label(values)?);
    }
    Ok(PromptSetPair { concept, neutral })
}
