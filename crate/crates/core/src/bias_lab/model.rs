use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BiasLabError, Result};
use crate::dispersal::Corpus;
use crate::rng;
use crate::tensor_store::{Checkpoint, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Layout {
    /// Softmax regression: `logits = x W0 + b0`.
    #[default]
    Linear,
    /// `logits = tanh(x W0 + b0) W1 + b1`.
    Mlp { hidden: usize },
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::Linear => f.write_str("linear"),
            Layout::Mlp { hidden } => write!(f, "mlp(hidden={hidden})"),
        }
    }
}

/// A tiny classifier with f64 parameters. Weight matrices are row-major with
/// the input dimension first (`w0` is D x H or D x C).
#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    layout: Layout,
    d: usize,
    c: usize,
    pub(super) w0: Vec<f64>,
    pub(super) b0: Vec<f64>,
    pub(super) w1: Vec<f64>,
    pub(super) b1: Vec<f64>,
}

/// Per-example scratch space for forward and backward passes.
pub(super) struct Scratch {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub grad_hidden: Vec<f64>,
}

impl TinyModel {
    /// Zero-initialized model. For the MLP this is a saddle point, so training
    /// should start from [`TinyModel::init`] instead.
    pub fn zeros(layout: Layout, d: usize, c: usize) -> Result<Self> {
        if d == 0 {
            return Err(BiasLabError::Invalid("input dimension must be positive".into()));
        }
        if c < 2 {
            return Err(BiasLabError::Invalid(format!("need at least 2 classes, got {c}")));
        }
        let (w0, b0, w1, b1) = match layout {
            Layout::Linear => (d * c, c, 0, 0),
            Layout::Mlp { hidden: 0 } => return Err(BiasLabError::Invalid("hidden width must be positive".into())),
            Layout::Mlp { hidden } => (d * hidden, hidden, hidden * c, c),
        };
        Ok(Self {
            layout,
            d,
            c,
            w0: vec![0.0; w0],
            b0: vec![0.0; b0],
            w1: vec![0.0; w1],
            b1: vec![0.0; b1],
        })
    }

    /// Default initialization: zeros for the linear layout; for the MLP, weights
    /// drawn from N(0, 1/fan_in) and zero biases.
    pub fn init(layout: Layout, d: usize, c: usize, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(layout, d, c)?;
        if let Layout::Mlp { hidden } = layout {
            let mut r = rng::stream(rng::derive(seed, "init", 0));
            let s0 = 1.0 / (d as f64).sqrt();
            let s1 = 1.0 / (hidden as f64).sqrt();
            m.w0.iter_mut()
                .for_each(|w| *w = s0 * r.sample::<f64, _>(StandardNormal));
            m.w1.iter_mut()
                .for_each(|w| *w = s1 * r.sample::<f64, _>(StandardNormal));
        }
        Ok(m)
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn n_classes(&self) -> usize {
        self.c
    }

    fn hidden(&self) -> usize {
        match self.layout {
            Layout::Linear => 0,
            Layout::Mlp { hidden } => hidden,
        }
    }

    pub fn same_structure(&self, other: &TinyModel) -> bool {
        self.layout == other.layout && self.d == other.d && self.c == other.c
    }

    pub fn num_params(&self) -> usize {
        self.w0.len() + self.b0.len() + self.w1.len() + self.b1.len()
    }

    /// Parameters by tensor name; the linear layout has only `w0` and `b0`.
    pub fn params(&self) -> Vec<(&'static str, &[f64])> {
        let all = [("w0", &self.w0), ("b0", &self.b0), ("w1", &self.w1), ("b1", &self.b1)];
        all.into_iter()
            .filter(|(_, p)| !p.is_empty())
            .map(|(n, p)| (n, p.as_slice()))
            .collect()
    }

    pub(super) fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w0, &mut self.b0, &mut self.w1, &mut self.b1]
    }

    /// All parameters flattened in tensor-name order `w0, b0, w1, b1`.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().into_iter().flat_map(|(_, p)| p.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(BiasLabError::Invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut rest = values;
        for p in self.params_mut() {
            let (head, tail) = rest.split_at(p.len());
            p.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self.layout {
            Layout::Linear => vec![("w0", vec![self.d, self.c]), ("b0", vec![self.c])],
            Layout::Mlp { hidden } => vec![
                ("w0", vec![self.d, hidden]),
                ("b0", vec![hidden]),
                ("w1", vec![hidden, self.c]),
                ("b1", vec![self.c]),
            ],
        }
    }

    pub(super) fn scratch(&self) -> Scratch {
        Scratch {
            hidden: vec![0.0; self.hidden()],
            logits: vec![0.0; self.c],
            grad_hidden: vec![0.0; self.hidden()],
        }
    }

    pub(super) fn forward_into(&self, x: &[f64], s: &mut Scratch) {
        let c = self.c;
        match self.layout {
            Layout::Linear => affine(x, &self.w0, &self.b0, c, &mut s.logits),
            Layout::Mlp { hidden } => {
                affine(x, &self.w0, &self.b0, hidden, &mut s.hidden);
                s.hidden.iter_mut().for_each(|h| *h = h.tanh());
                affine(&s.hidden, &self.w1, &self.b1, c, &mut s.logits);
            }
        }
    }

    /// Logits for one input vector.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.scratch();
        self.forward_into(x, &mut s);
        s.logits
    }

    /// Adds the cross-entropy gradient of one example into `grad` (same shape as
    /// `self`) and returns the example's loss.
    pub(super) fn accumulate_grad(&self, x: &[f64], y: usize, grad: &mut TinyModel, s: &mut Scratch) -> f64 {
        self.forward_into(x, s);
        let loss = softmax_in_place(&mut s.logits, y);
        // s.logits now holds d(loss)/d(logits)
        let g = &s.logits;
        let c = self.c;
        match self.layout {
            Layout::Linear => {
                outer_add(x, g, &mut grad.w0);
                grad.b0.iter_mut().zip(g).for_each(|(b, v)| *b += v);
            }
            Layout::Mlp { hidden } => {
                outer_add(&s.hidden, g, &mut grad.w1);
                grad.b1.iter_mut().zip(g).for_each(|(b, v)| *b += v);
                for h in 0..hidden {
                    let row = &self.w1[h * c..(h + 1) * c];
                    let gh: f64 = row.iter().zip(g).map(|(w, v)| w * v).sum();
                    s.grad_hidden[h] = gh * (1.0 - s.hidden[h] * s.hidden[h]);
                }
                outer_add(x, &s.grad_hidden, &mut grad.w0);
                grad.b0.iter_mut().zip(&s.grad_hidden).for_each(|(b, v)| *b += v);
            }
        }
        loss
    }

    /// Cross-entropy gradient of one example, returned as a model-shaped value.
    pub fn example_gradient(&self, x: &[f64], y: usize) -> (f64, TinyModel) {
        let mut grad = self.zeroed();
        let mut s = self.scratch();
        let loss = self.accumulate_grad(x, y, &mut grad, &mut s);
        (loss, grad)
    }

    /// Cross-entropy of one example.
    pub fn example_loss(&self, x: &[f64], y: usize) -> f64 {
        let mut s = self.scratch();
        self.forward_into(x, &mut s);
        softmax_in_place(&mut s.logits, y)
    }

    pub(super) fn zeroed(&self) -> TinyModel {
        let mut z = self.clone();
        z.params_mut()
            .into_iter()
            .for_each(|p| p.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn sq_norm(&self) -> f64 {
        self.params().iter().flat_map(|(_, p)| p.iter()).map(|v| v * v).sum()
    }

    /// f32 checkpoint with tensors `w0`, `b0` (`w1`, `b1` for the MLP) and
    /// metadata `layout`, `D`, `H`, `C`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for ((name, shape), (_, values)) in self.shapes().into_iter().zip(self.params()) {
            let t = Tensor::from_f32(shape, values.iter().map(|&v| v as f32).collect()).expect("shape matches length");
            ck.insert(name, t).expect("fixed tensor names are valid");
        }
        let layout = match self.layout {
            Layout::Linear => "linear",
            Layout::Mlp { .. } => "mlp",
        };
        ck.metadata = BTreeMap::from([
            ("layout".to_string(), layout.to_string()),
            ("D".to_string(), self.d.to_string()),
            ("H".to_string(), self.hidden().to_string()),
            ("C".to_string(), self.c.to_string()),
        ]);
        ck
    }

    /// Reads a model back from a checkpoint. Without metadata the layout is
    /// inferred from the tensor names and shapes.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |msg: String| BiasLabError::Invalid(format!("not a classifier checkpoint: {msg}"));
        let w0 = ck.get("w0").ok_or_else(|| bad("missing tensor `w0`".into()))?;
        if w0.shape().len() != 2 {
            return Err(bad(format!("`w0` has shape {:?}", w0.shape())));
        }
        let d = w0.shape()[0];
        let (layout, c) = match ck.get("w1") {
            None => (Layout::Linear, w0.shape()[1]),
            Some(w1) if w1.shape().len() == 2 => (Layout::Mlp { hidden: w0.shape()[1] }, w1.shape()[1]),
            Some(w1) => return Err(bad(format!("`w1` has shape {:?}", w1.shape()))),
        };
        let mut m = Self::zeros(layout, d, c)?;
        if let Some(meta) = ck.metadata.get("layout") {
            let want = match layout {
                Layout::Linear => "linear",
                Layout::Mlp { .. } => "mlp",
            };
            if meta != want {
                return Err(bad(format!("metadata says `{meta}` but tensors describe `{want}`")));
            }
        }
        let expected = m.shapes();
        if ck.len() != expected.len() {
            return Err(bad(format!("expected {} tensors, found {}", expected.len(), ck.len())));
        }
        for ((name, shape), p) in expected.into_iter().zip(m.params_mut()) {
            let t = ck.get(name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(bad(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            *p = t.to_f32_vec().into_iter().map(f64::from).collect();
        }
        Ok(m)
    }
}

fn affine(x: &[f64], w: &[f64], b: &[f64], out_dim: usize, out: &mut [f64]) {
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * out_dim..(i + 1) * out_dim];
        out.iter_mut().zip(row).for_each(|(o, w)| *o += xi * w);
    }
}

fn outer_add(a: &[f64], b: &[f64], out: &mut [f64]) {
    let n = b.len();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        out[i * n..(i + 1) * n]
            .iter_mut()
            .zip(b)
            .for_each(|(o, v)| *o += ai * v);
    }
}

/// Replaces logits with `softmax - onehot(y)` and returns the cross-entropy.
pub(super) fn softmax_in_place(z: &mut [f64], y: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_y = z[y] - max;
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let loss = sum.ln() - shifted_y;
    z.iter_mut().for_each(|v| *v /= sum);
    z[y] -= 1.0;
    loss
}

/// Cross-entropy from raw logits without modifying them.
pub(super) fn cross_entropy(z: &[f64], y: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[y]
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Dense feature matrix and labels extracted from a labeled corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub d: usize,
}

impl Dataset {
    pub fn from_corpus(corpus: &Corpus, d: usize, c: usize) -> Result<Self> {
        let mut ds = Dataset {
            ids: Vec::with_capacity(corpus.len()),
            x: Vec::with_capacity(corpus.len() * d),
            y: Vec::with_capacity(corpus.len()),
            d,
        };
        for r in corpus.iter() {
            let f = r
                .features
                .as_ref()
                .ok_or_else(|| BiasLabError::MissingFeatures(r.id.clone()))?;
            let label = r.label.ok_or_else(|| BiasLabError::Unlabeled(r.id.clone()))?;
            if f.len() != d {
                return Err(BiasLabError::DimensionMismatch {
                    id: r.id.clone(),
                    got: f.len(),
                    expected: d,
                });
            }
            if label >= c {
                return Err(BiasLabError::LabelOutOfRange {
                    id: r.id.clone(),
                    label,
                    classes: c,
                });
            }
            ds.ids.push(r.id.clone());
            ds.x.extend(f.iter().map(|&v| f64::from(v)));
            ds.y.push(label);
        }
        Ok(ds)
    }

    pub fn for_model(corpus: &Corpus, model: &TinyModel) -> Result<Self> {
        Self::from_corpus(corpus, model.input_dim(), model.n_classes())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Mean cross-entropy and per-class mean cross-entropy (0 for absent classes).
    pub fn losses(&self, model: &TinyModel) -> (f64, Vec<f64>) {
        let c = model.n_classes();
        let mut s = model.scratch();
        let (mut total, mut per, mut count) = (0.0, vec![0.0; c], vec![0usize; c]);
        for i in 0..self.len() {
            model.forward_into(self.row(i), &mut s);
            let l = cross_entropy(&s.logits, self.y[i]);
            total += l;
            per[self.y[i]] += l;
            count[self.y[i]] += 1;
        }
        for (p, &n) in per.iter_mut().zip(&count) {
            if n > 0 {
                *p /= n as f64;
            }
        }
        let mean = if self.is_empty() {
            0.0
        } else {
            total / self.len() as f64
        };
        (mean, per)
    }
}
