use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BiasLabError, Result};
use crate::dispersal::{Corpus, InstructionRecord};
use crate::rng::{self, SplitMix64};

/// Parameters of the synthetic biased classification task.
///
/// Each row's features are a signal block (noisy class mean, `signal_dim`
/// entries) followed by `clusters` bias blocks of `n_classes` one-hot entries.
/// In cluster j's training rows, bias block j shows the true label with
/// probability `bias_strength`; every other block, and every block of the
/// validation rows, is a uniformly random one-hot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasSpec {
    pub n_classes: usize,
    pub signal_dim: usize,
    pub clusters: usize,
    pub bias_strength: f64,
    pub samples_per_cluster: usize,
    pub val_samples: usize,
    pub noise: f64,
    pub seed: u64,
    /// Length of the per-row topic embedding used by k-means dispersal.
    pub embedding_dim: usize,
    /// Per-coordinate noise added to the cluster topic direction.
    pub embedding_noise: f64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            signal_dim: 8,
            clusters: 4,
            bias_strength: 0.9,
            samples_per_cluster: 2000,
            val_samples: 2000,
            noise: 0.5,
            seed: 0,
            embedding_dim: 16,
            embedding_noise: 0.1,
        }
    }
}

impl BiasSpec {
    pub fn feature_dim(&self) -> usize {
        self.signal_dim + self.clusters * self.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BiasLabError::Invalid(m));
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return bad(format!("bias strength must lie in [0, 1], got {}", self.bias_strength));
        }
        if self.signal_dim == 0 || self.clusters == 0 || self.embedding_dim == 0 {
            return bad("signal_dim, clusters and embedding_dim must be positive".into());
        }
        if [self.noise, self.embedding_noise]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }
}

fn unit_vector(r: &mut SplitMix64, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Generator<'a> {
    spec: &'a BiasSpec,
    means: Vec<Vec<f64>>,
    topics: Vec<Vec<f64>>,
}

impl Generator<'_> {
    /// One row; `biased` names the cluster whose bias block carries the label.
    fn row(&self, r: &mut SplitMix64, id: String, cluster: usize, biased: Option<usize>) -> InstructionRecord {
        let s = self.spec;
        let c = s.n_classes;
        let label = r.random_range(0..c);
        let mut features: Vec<f32> = self.means[label]
            .iter()
            .map(|m| (m + s.noise * r.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        for block in 0..s.clusters {
            let mut hot = r.random_range(0..c);
            if biased == Some(block) && r.random::<f64>() < s.bias_strength {
                hot = label;
            }
            features.extend((0..c).map(|k| if k == hot { 1.0f32 } else { 0.0 }));
        }
        let embedding = self.topics[cluster]
            .iter()
            .map(|t| (t + s.embedding_noise * r.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        let mut rec = InstructionRecord::new(id);
        rec.features = Some(features);
        rec.label = Some(label);
        rec.embedding = Some(embedding);
        rec
    }
}

/// Generates `(train, val)`. Train rows carry their cluster tag; validation rows
/// have no cluster and no planted bias.
pub fn generate_biased_dataset(spec: &BiasSpec) -> Result<(Corpus, Corpus)> {
    spec.validate()?;
    let mut r = rng::stream(rng::derive(spec.seed, "class-means", 0));
    let means = (0..spec.n_classes)
        .map(|_| unit_vector(&mut r, spec.signal_dim))
        .collect();
    let mut r = rng::stream(rng::derive(spec.seed, "topics", 0));
    let topics = (0..spec.clusters)
        .map(|_| unit_vector(&mut r, spec.embedding_dim))
        .collect();
    let g = Generator { spec, means, topics };

    let mut train = Vec::with_capacity(spec.clusters * spec.samples_per_cluster);
    for j in 0..spec.clusters {
        let mut r = rng::stream(rng::derive(spec.seed, "train", j as u64));
        for i in 0..spec.samples_per_cluster {
            let mut rec = g.row(&mut r, format!("train-{j}-{i:05}"), j, Some(j));
            rec.cluster = Some(j);
            train.push(rec);
        }
    }
    let mut r = rng::stream(rng::derive(spec.seed, "val", 0));
    let val = (0..spec.val_samples)
        .map(|i| {
            let topic = r.random_range(0..spec.clusters);
            g.row(&mut r, format!("val-{i:05}"), topic, None)
        })
        .collect();
    Ok((Corpus::new(train)?, Corpus::new(val)?))
}
