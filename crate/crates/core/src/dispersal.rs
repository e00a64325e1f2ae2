//! Distributing a corpus into K non-overlapping clusters.
//!
//! Two methods are provided: a seeded random split with balanced cluster sizes,
//! and spherical k-means over caller-supplied embedding vectors.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::rng;

#[derive(Error, Debug)]
pub enum DispersalError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record `{id}` has embedding length {got}, expected {expected}")]
    EmbeddingLength { id: String, got: usize, expected: usize },
    #[error("record `{0}` has no embedding")]
    MissingEmbedding(String),
    #[error("record `{0}` has a zero-norm embedding")]
    ZeroNorm(String),
    #[error("cannot form {k} clusters from {n} records")]
    TooManyClusters { k: usize, n: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DispersalError>;

/// One row of an instruction corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    #[serde(default)]
    pub instruction: String,
    #[serde(default)]
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    /// Source cluster of synthetic rows; absent for ordinary corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
    /// Fields this crate does not interpret; kept so rewrites are lossless.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl InstructionRecord {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            instruction: String::new(),
            response: String::new(),
            embedding: None,
            features: None,
            label: None,
            cluster: None,
            extra: Map::new(),
        }
    }
}

/// An ordered collection of records with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    records: Vec<InstructionRecord>,
}

impl Corpus {
    pub fn new(records: Vec<InstructionRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut embed_len: Option<usize> = None;
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(DispersalError::DuplicateId(r.id.clone()));
            }
            if let Some(e) = &r.embedding {
                match embed_len {
                    None => embed_len = Some(e.len()),
                    Some(n) if n != e.len() => {
                        return Err(DispersalError::EmbeddingLength {
                            id: r.id.clone(),
                            got: e.len(),
                            expected: n,
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[InstructionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, InstructionRecord> {
        self.records.iter()
    }

    /// Sub-corpus of the given row indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Corpus {
        Corpus {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Splits the corpus into `a.k` parts, preserving corpus order inside each part.
    pub fn partition(&self, a: &ClusterAssignment) -> Result<Vec<Corpus>> {
        let mut parts = vec![Vec::new(); a.k];
        for r in &self.records {
            let c = *a
                .assignment
                .get(&r.id)
                .ok_or_else(|| DispersalError::Invalid(format!("record `{}` is not assigned", r.id)))?;
            parts
                .get_mut(c)
                .ok_or_else(|| DispersalError::Invalid(format!("cluster {c} out of range for k={}", a.k)))?
                .push(r.clone());
        }
        Ok(parts.into_iter().map(|records| Corpus { records }).collect())
    }

    /// Concatenation of several corpora; ids must stay unique.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Corpus>) -> Result<Corpus> {
        let records = parts.into_iter().flat_map(|c| c.records.iter().cloned()).collect();
        Corpus::new(records)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

impl FromIterator<InstructionRecord> for Corpus {
    /// Panics on duplicate ids; use [`Corpus::new`] for fallible construction.
    fn from_iter<T: IntoIterator<Item = InstructionRecord>>(iter: T) -> Self {
        Corpus::new(iter.into_iter().collect()).expect("unique record ids")
    }
}

/// Reads a JSONL corpus. Blank lines are skipped; line numbers in errors are 1-based.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstructionRecord = serde_json::from_str(&line).map_err(|e| DispersalError::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Corpus::new(records)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in corpus.iter() {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DispersalMethod {
    #[default]
    Random,
    Kmeans,
}

impl fmt::Display for DispersalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DispersalMethod::Random => "random",
            DispersalMethod::Kmeans => "kmeans",
        })
    }
}

impl FromStr for DispersalMethod {
    type Err = DispersalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "kmeans" => Ok(Self::Kmeans),
            other => Err(DispersalError::Invalid(format!("unknown dispersal method `{other}`"))),
        }
    }
}

/// Maps every record id to a cluster in `[0, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub method: DispersalMethod,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in self.assignment.values() {
            sizes[c] += 1;
        }
        sizes
    }
}

pub fn save_assignment(a: &ClusterAssignment, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(a)?)?;
    Ok(())
}

pub fn load_assignment(path: impl AsRef<Path>) -> Result<ClusterAssignment> {
    let text = fs::read_to_string(path)?;
    let a: ClusterAssignment = serde_json::from_str(&text)?;
    if let Some((id, c)) = a.assignment.iter().find(|(_, &c)| c >= a.k) {
        return Err(DispersalError::Invalid(format!(
            "record `{id}` assigned to cluster {c} >= k={}",
            a.k
        )));
    }
    Ok(a)
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 {
        return Err(DispersalError::Invalid("k must be at least 1".into()));
    }
    if n == 0 {
        return Err(DispersalError::Invalid("corpus is empty".into()));
    }
    if k > n {
        return Err(DispersalError::TooManyClusters { k, n });
    }
    Ok(())
}

/// Seeded Fisher-Yates shuffle of the corpus order, then round-robin assignment.
pub fn random_split(corpus: &Corpus, k: usize, seed: u64) -> Result<ClusterAssignment> {
    check_k(k, corpus.len())?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng::stream(seed));
    let assignment = order
        .iter()
        .enumerate()
        .map(|(pos, &i)| (corpus.records[i].id.clone(), pos % k))
        .collect();
    Ok(ClusterAssignment {
        k,
        method: DispersalMethod::Random,
        seed,
        assignment,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmeansOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KmeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-4,
        }
    }
}

/// Result of a spherical k-means run, before it is keyed by record id.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansFit {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Objective (sum of cosine distances) after each Lloyd iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Cosine distance between unit vectors.
fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b)
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = cos_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    // squared Euclidean distance on the sphere is 2 * cosine distance
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| 2.0 * cos_dist(p, &centroids[0]).max(0.0))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().enumerate().filter(|(i, _)| !chosen[*i]).map(|(_, d)| d).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if chosen[i] || d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
            pick.expect("positive mass")
        } else {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        let c = centroids.last().expect("just pushed");
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(2.0 * cos_dist(p, c).max(0.0));
        }
    }
    centroids
}

/// Spherical k-means on raw vectors. Vectors are L2-normalized first.
pub fn spherical_kmeans(vectors: &[Vec<f64>], k: usize, seed: u64, opts: KmeansOptions) -> Result<KmeansFit> {
    check_k(k, vectors.len())?;
    let mut points = vectors.to_vec();
    for (i, p) in points.iter_mut().enumerate() {
        if normalize(p) == 0.0 {
            return Err(DispersalError::ZeroNorm(format!("#{i}")));
        }
    }
    let dim = points[0].len();
    let mut rng = rng::stream(seed);
    let mut centroids = kmeans_pp(&points, k, &mut rng);
    let mut labels = vec![0usize; points.len()];
    let mut objective_trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..opts.max_iter {
        iterations += 1;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            labels[i] = j;
            dists[i] = d;
        }
        repair_empty_clusters(&points, &mut centroids, &mut labels, &mut dists);

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &j) in points.iter().zip(&labels) {
            sums[j].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut movement: f64 = 0.0;
        for (c, mut s) in centroids.iter_mut().zip(sums) {
            if normalize(&mut s) == 0.0 {
                // members cancel out exactly; keep the previous direction
                continue;
            }
            let shift = c.iter().zip(&s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            movement = movement.max(shift);
            *c = s;
        }
        let objective = points
            .iter()
            .zip(&labels)
            .map(|(p, &j)| cos_dist(p, &centroids[j]))
            .sum();
        objective_trace.push(objective);
        if movement < opts.tol {
            break;
        }
    }
    // final assignment against the converged centroids
    let mut dists = vec![0.0; points.len()];
    for (i, p) in points.iter().enumerate() {
        let (j, d) = nearest(p, &centroids);
        labels[i] = j;
        dists[i] = d;
    }
    repair_empty_clusters(&points, &mut centroids, &mut labels, &mut dists);

    Ok(KmeansFit {
        labels,
        centroids,
        objective_trace,
        iterations,
    })
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty_clusters(points: &[Vec<f64>], centroids: &mut [Vec<f64>], labels: &mut [usize], dists: &mut [f64]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&j| counts[j] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far: Option<usize> = None;
        for i in 0..points.len() {
            if counts[labels[i]] < 2 {
                continue;
            }
            if far.is_none_or(|f| dists[i] > dists[f]) {
                far = Some(i);
            }
        }
        let Some(i) = far else { return };
        labels[i] = empty;
        dists[i] = 0.0;
        centroids[empty] = points[i].clone();
    }
}

/// Clusters a corpus by its embeddings with spherical k-means.
pub fn kmeans_disperse(corpus: &Corpus, k: usize, seed: u64, opts: KmeansOptions) -> Result<ClusterAssignment> {
    check_k(k, corpus.len())?;
    let mut vectors = Vec::with_capacity(corpus.len());
    for r in corpus.iter() {
        let e = r
            .embedding
            .as_ref()
            .ok_or_else(|| DispersalError::MissingEmbedding(r.id.clone()))?;
        let v: Vec<f64> = e.iter().map(|&x| f64::from(x)).collect();
        if v.iter().all(|&x| x == 0.0) {
            return Err(DispersalError::ZeroNorm(r.id.clone()));
        }
        vectors.push(v);
    }
    let fit = spherical_kmeans(&vectors, k, seed, opts)?;
    let assignment = corpus
        .iter()
        .zip(&fit.labels)
        .map(|(r, &j)| (r.id.clone(), j))
        .collect();
    Ok(ClusterAssignment {
        k,
        method: DispersalMethod::Kmeans,
        seed,
        assignment,
    })
}

pub fn disperse(
    corpus: &Corpus,
    k: usize,
    method: DispersalMethod,
    seed: u64,
    opts: KmeansOptions,
) -> Result<ClusterAssignment> {
    match method {
        DispersalMethod::Random => random_split(corpus, k, seed),
        DispersalMethod::Kmeans => kmeans_disperse(corpus, k, seed, opts),
    }
}
