//! Fusing K sub-model checkpoints into one.
//!
//! Every merge is a pure function of its inputs. Reductions run in f32 in a
//! fixed order (model index ascending) so results are bit-reproducible.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor_store::{axpy_map, ensure_compatible, Checkpoint, StoreError, Tensor};

#[derive(Error, Debug)]
pub enum MergeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid merge recipe: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MergeError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(MergeError::Validation(msg.into()))
}

pub const DEFAULT_DENSITY: f64 = 0.2;
pub const DEFAULT_DROP_RATE: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 1e-8;
const ALPHA_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    #[default]
    Average,
    Fisher,
    TaskVector,
    Ties,
    Dare,
}

impl MergeMethod {
    /// Methods that work on task vectors and therefore need a base checkpoint.
    pub fn needs_base(self) -> bool {
        matches!(self, MergeMethod::TaskVector | MergeMethod::Ties | MergeMethod::Dare)
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMethod::Average => "average",
            MergeMethod::Fisher => "fisher",
            MergeMethod::TaskVector => "task_vector",
            MergeMethod::Ties => "ties",
            MergeMethod::Dare => "dare",
        })
    }
}

impl FromStr for MergeMethod {
    type Err = MergeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "fisher" => Ok(Self::Fisher),
            "task_vector" => Ok(Self::TaskVector),
            "ties" => Ok(Self::Ties),
            "dare" => Ok(Self::Dare),
            other => invalid(format!("unknown merge method `{other}`")),
        }
    }
}

/// Method selector plus optional hyper-parameters; unset fields take defaults
/// that depend on K (see [`MergeRecipe::resolve`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A recipe with every parameter filled in for a given K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRecipe {
    pub method: MergeMethod,
    pub alpha: Vec<f64>,
    pub lambda: f64,
    pub density: f64,
    pub drop_rate: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl MergeRecipe {
    pub fn new(method: MergeMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Fills defaults and validates against K models.
    ///
    /// Defaults: uniform alpha, density 0.2, drop rate 0.5, epsilon 1e-8, seed 0,
    /// lambda 1/K for the summing methods (task_vector, dare) and 1 for TIES,
    /// whose disjoint mean is already an average.
    pub fn resolve(&self, k: usize) -> Result<ResolvedRecipe> {
        if k == 0 {
            return invalid("at least one model is required");
        }
        let alpha = match &self.alpha {
            Some(a) => a.clone(),
            None => vec![1.0 / k as f64; k],
        };
        let default_lambda = match self.method {
            MergeMethod::Ties => 1.0,
            _ => 1.0 / k as f64,
        };
        let r = ResolvedRecipe {
            method: self.method,
            alpha,
            lambda: self.lambda.unwrap_or(default_lambda),
            density: self.density.unwrap_or(DEFAULT_DENSITY),
            drop_rate: self.drop_rate.unwrap_or(DEFAULT_DROP_RATE),
            epsilon: self.epsilon.unwrap_or(DEFAULT_EPSILON),
            seed: self.seed.unwrap_or(0),
        };
        if r.method == MergeMethod::Average {
            if r.alpha.len() != k {
                return invalid(format!("alpha has {} weights for {k} models", r.alpha.len()));
            }
            validate_alpha(&r.alpha)?;
        }
        validate_density(r.density)?;
        validate_drop_rate(r.drop_rate)?;
        if r.epsilon <= 0.0 || !r.epsilon.is_finite() {
            return invalid(format!("epsilon must be positive, got {}", r.epsilon));
        }
        if !r.lambda.is_finite() {
            return invalid("lambda must be finite");
        }
        Ok(r)
    }
}

fn validate_alpha(alpha: &[f64]) -> Result<()> {
    if let Some(a) = alpha.iter().find(|a| **a < 0.0 || !a.is_finite()) {
        return invalid(format!("alpha weights must be non-negative, got {a}"));
    }
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() > ALPHA_SUM_TOL {
        return invalid(format!("alpha weights must sum to 1, got {sum}"));
    }
    Ok(())
}

fn validate_density(density: f64) -> Result<()> {
    if !(density > 0.0 && density <= 1.0) {
        return invalid(format!("density must lie in (0, 1], got {density}"));
    }
    Ok(())
}

fn validate_drop_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return invalid(format!("drop rate must lie in [0, 1), got {p}"));
    }
    Ok(())
}

fn require_models(models: &[Checkpoint]) -> Result<()> {
    if models.is_empty() {
        return invalid("at least one model is required");
    }
    ensure_compatible(models)?;
    Ok(())
}

/// Weighted average `sum_j alpha_j * M_j` with `alpha` on the probability simplex.
pub fn merge_average(models: &[Checkpoint], alpha: &[f64]) -> Result<Checkpoint> {
    require_models(models)?;
    if alpha.len() != models.len() {
        return invalid(format!("alpha has {} weights for {} models", alpha.len(), models.len()));
    }
    validate_alpha(alpha)?;
    let refs: Vec<&Checkpoint> = models.iter().collect();
    let coeffs: Vec<f32> = alpha.iter().map(|&a| a as f32).collect();
    // a unit weight vector selects one model; return its values untouched
    if let Some(j) = alpha.iter().position(|&a| a == 1.0) {
        return Ok(models[j].clone());
    }
    let out = axpy_map(&refs, &coeffs)?;
    // f32 rounding can land one ulp outside the inputs' range; clamp back into it
    out.map_tensors(|name, t| {
        let inputs: Vec<&Tensor> = models
            .iter()
            .map(|m| m.get(name).expect("compatibility checked"))
            .collect();
        let vals = (0..t.len())
            .map(|i| {
                let (lo, hi) = inputs
                    .iter()
                    .map(|m| m.get(i))
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                t.get(i).clamp(lo, hi)
            })
            .collect();
        Tensor::from_values(t.dtype(), t.shape().to_vec(), vals)
    })
    .map_err(Into::into)
}

/// Difference between a fine-tuned checkpoint and its base.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector(pub Checkpoint);

impl TaskVector {
    pub fn as_checkpoint(&self) -> &Checkpoint {
        &self.0
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.0
    }
}

pub fn extract_task_vector(model: &Checkpoint, base: &Checkpoint) -> Result<TaskVector> {
    ensure_compatible([base, model])?;
    Ok(TaskVector(axpy_map(&[model, base], &[1.0, -1.0])?))
}

fn check_taus(base: &Checkpoint, taus: &[TaskVector]) -> Result<()> {
    if taus.is_empty() {
        return invalid("at least one task vector is required");
    }
    ensure_compatible(std::iter::once(base).chain(taus.iter().map(|t| &t.0)))?;
    Ok(())
}

/// `base + lambda * sum_j tau_j`.
pub fn merge_task_vectors(base: &Checkpoint, taus: &[TaskVector], lambda: f64) -> Result<Checkpoint> {
    check_taus(base, taus)?;
    let lambda = lambda as f32;
    Ok(base.map_tensors(|name, b| {
        let mut sum = vec![0.0f32; b.len()];
        for t in taus {
            let src = t.0.get(name).expect("compatibility checked");
            sum.iter_mut().enumerate().for_each(|(i, s)| *s += src.get(i));
        }
        let out = (0..b.len()).map(|i| b.get(i) + lambda * sum[i]).collect();
        Tensor::from_values(b.dtype(), b.shape().to_vec(), out)
    })?)
}

/// Number of entries kept when trimming `n` values at `density`.
pub fn trim_count(n: usize, density: f64) -> usize {
    // the small slack keeps products such as 0.7 * 10 = 7.000000000000001 from rounding up
    let m = (density * n as f64 - 1e-9).ceil();
    (m.max(0.0) as usize).min(n)
}

/// Keeps the `trim_count` largest-magnitude entries; ties go to the lower index.
pub fn trim_top_magnitude(values: &[f32], density: f64) -> Vec<f32> {
    let keep = trim_count(values.len(), density);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; values.len()];
    for &i in &order[..keep] {
        out[i] = values[i];
    }
    out
}

/// Trim, elect sign, disjoint mean; returns `base + lambda * tau_merged`.
pub fn ties_merge(base: &Checkpoint, taus: &[TaskVector], density: f64, lambda: f64) -> Result<Checkpoint> {
    validate_density(density)?;
    check_taus(base, taus)?;
    let lambda = lambda as f32;
    Ok(base.map_tensors(|name, b| {
        let trimmed: Vec<Vec<f32>> = taus
            .iter()
            .map(|t| trim_top_magnitude(&t.0.get(name).expect("compatibility checked").to_f32_vec(), density))
            .collect();
        let out = (0..b.len())
            .map(|i| {
                let total: f32 = trimmed.iter().map(|t| t[i]).sum();
                let positive = total >= 0.0;
                let (mut sum, mut count) = (0.0f32, 0u32);
                for t in &trimmed {
                    let v = t[i];
                    if (positive && v > 0.0) || (!positive && v < 0.0) {
                        sum += v;
                        count += 1;
                    }
                }
                let merged = if count == 0 { 0.0 } else { sum / count as f32 };
                b.get(i) + lambda * merged
            })
            .collect();
        Tensor::from_values(b.dtype(), b.shape().to_vec(), out)
    })?)
}

/// Drops each entry with probability `drop_rate` and rescales survivors by `1/(1-p)`.
///
/// `stream` selects an independent random stream (the model index when merging);
/// each tensor draws from its own stream derived from `(seed, name, stream)`.
pub fn dare_transform(tau: &TaskVector, drop_rate: f64, seed: u64, stream: u64) -> Result<TaskVector> {
    validate_drop_rate(drop_rate)?;
    if drop_rate == 0.0 {
        return Ok(tau.clone());
    }
    let scale = (1.0 / (1.0 - drop_rate)) as f32;
    let out = tau.0.map_tensors(|name, t| {
        let mut r = rng::stream(rng::derive(seed, name, stream));
        let vals = (0..t.len())
            .map(|i| {
                let keep = r.random::<f64>() >= drop_rate;
                if keep {
                    t.get(i) * scale
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::from_values(t.dtype(), t.shape().to_vec(), vals)
    })?;
    Ok(TaskVector(out))
}

/// Diagonal-Fisher weighted average: `sum_j F_j M_j / (sum_j F_j + eps)`.
///
/// Where every Fisher entry of an element is exactly zero the formula carries no
/// information and the plain arithmetic mean is used instead.
pub fn merge_fisher(models: &[Checkpoint], fishers: &[Checkpoint], epsilon: f64) -> Result<Checkpoint> {
    require_models(models)?;
    if fishers.len() != models.len() {
        return invalid(format!(
            "{} Fisher checkpoints for {} models",
            fishers.len(),
            models.len()
        ));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return invalid(format!("epsilon must be positive, got {epsilon}"));
    }
    ensure_compatible(std::iter::once(&models[0]).chain(fishers))?;
    for f in fishers {
        for (name, t) in f.iter() {
            if let Some(v) = t.to_f32_vec().into_iter().find(|v| v.is_nan() || *v < 0.0) {
                return invalid(format!("Fisher tensor `{name}` has negative entry {v}"));
            }
        }
    }
    let eps = epsilon as f32;
    let k = models.len() as f32;
    Ok(models[0].map_tensors(|name, t0| {
        let ms: Vec<&Tensor> = models.iter().map(|m| m.get(name).expect("checked")).collect();
        let fs: Vec<&Tensor> = fishers.iter().map(|f| f.get(name).expect("checked")).collect();
        let out = (0..t0.len())
            .map(|i| {
                let (mut num, mut den, mut plain) = (0.0f32, 0.0f32, 0.0f32);
                for (m, f) in ms.iter().zip(&fs) {
                    let (mv, fv) = (m.get(i), f.get(i));
                    num += fv * mv;
                    den += fv;
                    plain += mv;
                }
                if den == 0.0 {
                    plain / k
                } else {
                    num / (den + eps)
                }
            })
            .collect();
        Tensor::from_values(t0.dtype(), t0.shape().to_vec(), out)
    })?)
}

/// Runs a recipe end to end. `base` is required for the task-vector family,
/// `fishers` for the Fisher method.
pub fn merge(
    recipe: &MergeRecipe,
    base: Option<&Checkpoint>,
    models: &[Checkpoint],
    fishers: Option<&[Checkpoint]>,
) -> Result<Checkpoint> {
    let r = recipe.resolve(models.len())?;
    let need_base =
        || base.ok_or_else(|| MergeError::Validation(format!("method `{}` needs a base checkpoint", r.method)));
    let taus =
        |b: &Checkpoint| -> Result<Vec<TaskVector>> { models.iter().map(|m| extract_task_vector(m, b)).collect() };
    match r.method {
        MergeMethod::Average => merge_average(models, &r.alpha),
        MergeMethod::Fisher => {
            let f = fishers.ok_or_else(|| MergeError::Validation("method `fisher` needs Fisher checkpoints".into()))?;
            merge_fisher(models, f, r.epsilon)
        }
        MergeMethod::TaskVector => {
            let b = need_base()?;
            merge_task_vectors(b, &taus(b)?, r.lambda)
        }
        MergeMethod::Ties => {
            let b = need_base()?;
            ties_merge(b, &taus(b)?, r.density, r.lambda)
        }
        MergeMethod::Dare => {
            let b = need_base()?;
            let dropped = taus(b)?
                .iter()
                .enumerate()
                .map(|(j, t)| dare_transform(t, r.drop_rate, r.seed, j as u64))
                .collect::<Result<Vec<_>>>()?;
            merge_task_vectors(b, &dropped, r.lambda)
        }
    }
}
