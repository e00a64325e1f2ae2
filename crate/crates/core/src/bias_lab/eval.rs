use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::model::{argmax, cross_entropy, Dataset, TinyModel};
use super::{BiasLabError, Result};
use crate::dispersal::Corpus;
use crate::rng;
use crate::tensor_store::{Checkpoint, Tensor};

pub const DEFAULT_FISHER_SAMPLES: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n_cases: usize,
    pub per_case_correct: BTreeMap<String, bool>,
    /// Mean cross-entropy per true class; 0 for classes with no cases.
    pub per_class_loss: Vec<f64>,
    /// Seconds spent computing logits (the forward passes only).
    #[serde(default)]
    pub wall_time_secs: f64,
}

fn report(ds: &Dataset, logits: &[f64], c: usize, secs: f64) -> EvalReport {
    let (mut correct, mut total) = (0usize, 0.0);
    let (mut per, mut count) = (vec![0.0; c], vec![0usize; c]);
    let mut per_case = BTreeMap::new();
    for (i, z) in logits.chunks(c).enumerate() {
        let y = ds.y[i];
        let ok = argmax(z) == y;
        correct += usize::from(ok);
        let l = cross_entropy(z, y);
        total += l;
        per[y] += l;
        count[y] += 1;
        per_case.insert(ds.ids[i].clone(), ok);
    }
    for (p, &n) in per.iter_mut().zip(&count) {
        if n > 0 {
            *p /= n as f64;
        }
    }
    let n = ds.len();
    EvalReport {
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        mean_loss: if n == 0 { 0.0 } else { total / n as f64 },
        n_cases: n,
        per_case_correct: per_case,
        per_class_loss: per,
        wall_time_secs: secs,
    }
}

/// Accuracy and losses of `model` on labeled `data`.
pub fn evaluate(model: &TinyModel, data: &Corpus) -> Result<EvalReport> {
    let ds = Dataset::for_model(data, model)?;
    let c = model.n_classes();
    let mut logits = vec![0.0; ds.len() * c];
    let mut s = model.scratch();
    let start = Instant::now();
    for (i, out) in logits.chunks_mut(c).enumerate() {
        model.forward_into(ds.row(i), &mut s);
        out.copy_from_slice(&s.logits);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(report(&ds, &logits, c, secs))
}

/// Evaluates the uniform average of the models' logits.
pub fn ensemble_evaluate(models: &[TinyModel], data: &Corpus) -> Result<EvalReport> {
    let first = models
        .first()
        .ok_or_else(|| BiasLabError::Invalid("ensemble needs at least one model".into()))?;
    if let Some((j, m)) = models.iter().enumerate().find(|(_, m)| !m.same_structure(first)) {
        return Err(BiasLabError::LayoutMismatch(format!(
            "model 0 is {} {}x{}, model {j} is {} {}x{}",
            first.layout(),
            first.input_dim(),
            first.n_classes(),
            m.layout(),
            m.input_dim(),
            m.n_classes()
        )));
    }
    let ds = Dataset::for_model(data, first)?;
    let c = first.n_classes();
    let k = models.len() as f64;
    let mut logits = vec![0.0; ds.len() * c];
    let mut scratch: Vec<_> = models.iter().map(|m| m.scratch()).collect();
    let start = Instant::now();
    for (i, out) in logits.chunks_mut(c).enumerate() {
        for (m, s) in models.iter().zip(scratch.iter_mut()) {
            m.forward_into(ds.row(i), s);
            out.iter_mut().zip(&s.logits).for_each(|(o, z)| *o += z);
        }
        out.iter_mut().for_each(|o| *o /= k);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(report(&ds, &logits, c, secs))
}

/// Diagonal empirical Fisher: the mean squared per-example gradient of the
/// observed-label cross-entropy over `sample_size` rows drawn without
/// replacement. The result has the model's tensor names and shapes.
pub fn estimate_fisher(model: &TinyModel, data: &Corpus, sample_size: usize, seed: u64) -> Result<Checkpoint> {
    let ds = Dataset::for_model(data, model)?;
    if sample_size == 0 || ds.is_empty() {
        return Err(BiasLabError::EmptySample);
    }
    if sample_size > ds.len() {
        return Err(BiasLabError::Invalid(format!(
            "sample size {sample_size} exceeds the {} available rows",
            ds.len()
        )));
    }
    let mut rows = index::sample(&mut rng::stream(rng::derive(seed, "fisher", 0)), ds.len(), sample_size).into_vec();
    rows.sort_unstable();

    let mut fisher = model.zeroed();
    let mut grad = model.zeroed();
    let mut s = model.scratch();
    for &i in &rows {
        grad.params_mut()
            .into_iter()
            .for_each(|p| p.iter_mut().for_each(|v| *v = 0.0));
        model.accumulate_grad(ds.row(i), ds.y[i], &mut grad, &mut s);
        for (f, g) in fisher.params_mut().into_iter().zip(grad.params_mut()) {
            f.iter_mut().zip(g.iter()).for_each(|(f, g)| *f += g * g);
        }
    }
    let inv = 1.0 / rows.len() as f64;
    fisher
        .params_mut()
        .into_iter()
        .for_each(|p| p.iter_mut().for_each(|v| *v *= inv));

    let shapes = model.to_checkpoint();
    let mut out = Checkpoint::new();
    out.metadata = shapes.metadata.clone();
    for (name, values) in fisher.params() {
        let shape = shapes.get(name).expect("same parameter names").shape().to_vec();
        out.insert(
            name,
            Tensor::from_f32(shape, values.iter().map(|&v| v as f32).collect())?,
        )?;
    }
    Ok(out)
}
