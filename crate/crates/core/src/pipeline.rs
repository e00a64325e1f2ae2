//! End-to-end experiment: generate data, disperse, train K sub-models, merge,
//! evaluate against a full-data baseline and an ensemble, then analyze.
//!
//! Every artifact is written under the output directory. `report.json` is a
//! pure function of the config; wall-clock timings go to `timing.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, BiasContributor, BucketReport, ErrorSets, LossTrace, RatioEntry, VennEntry};
use crate::bias_lab::{
    self, BiasSpec, EvalReport, Layout, PilotConfig, TinyModel, TrainConfig, DEFAULT_FISHER_SAMPLES,
};
use crate::dispersal::{self, save_assignment, save_corpus, Corpus, DispersalMethod, KmeansOptions};
use crate::merge_engine::{self, MergeMethod, MergeRecipe};
use crate::rng;
use crate::tensor_store::{write_checkpoint, Checkpoint};

pub const FORMAT_VERSION: &str = "dtm-report/1";

/// Number of classes listed in the bias-contributor table.
const TOP_CONTRIBUTORS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Disperse, train one sub-model per cluster, merge.
    #[default]
    Dtm,
    /// One model on the full corpus; no merge.
    Vanilla,
    /// K models on the full corpus with different seeds and learning rates, merged.
    UniformSoup,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dtm => "dtm",
            Mode::Vanilla => "vanilla",
            Mode::UniformSoup => "uniform_soup",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DispersalConfig {
    pub method: DispersalMethod,
    pub seed: u64,
    pub kmeans: KmeansOptions,
}

impl Default for DispersalConfig {
    fn default() -> Self {
        Self {
            method: DispersalMethod::Random,
            seed: 0,
            kmeans: KmeansOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: usize,
    pub mode: Mode,
    pub dispersal: DispersalConfig,
    pub bias: BiasSpec,
    pub train: TrainConfig,
    pub layout: Layout,
    pub merge: MergeRecipe,
    pub fisher_samples: usize,
    /// Sequential-portion study run alongside the main experiment; `None` skips it.
    pub pilot: Option<PilotConfig>,
    pub sweep: Option<Vec<usize>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 4,
            mode: Mode::Dtm,
            dispersal: DispersalConfig::default(),
            bias: BiasSpec::default(),
            train: TrainConfig::default(),
            layout: Layout::Linear,
            merge: MergeRecipe::default(),
            fisher_samples: DEFAULT_FISHER_SAMPLES,
            pilot: Some(PilotConfig::default()),
            sweep: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| stage_err("config", format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| stage_err("config", format!("{}: {e}", path.display())))
    }

    /// Sets every component seed to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.bias.seed = seed;
        self.dispersal.seed = seed;
        self.train.seed = seed;
        self.merge.seed = Some(seed);
        if let Some(p) = &mut self.pilot {
            p.split_seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(stage_err("config", m));
        if self.mode != Mode::Vanilla && self.k == 0 {
            return err("k must be positive".into());
        }
        if let Some(s) = &self.sweep {
            if s.is_empty() {
                return err("sweep list is empty".into());
            }
            if let Some(k) = s.iter().find(|&&k| k < 2) {
                return err(format!("sweep values must be at least 2, got {k}"));
            }
        }
        self.bias.validate().map_err(|e| stage_err("config", e))?;
        self.train.validate().map_err(|e| stage_err("config", e))?;
        if self.mode != Mode::Vanilla {
            self.merge.resolve(self.k).map_err(|e| stage_err("config", e))?;
        }
        if self.merge.method == MergeMethod::Fisher && self.fisher_samples == 0 {
            return err("fisher_samples must be positive".into());
        }
        Ok(())
    }
}

#[derive(Error, Debug)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn stage_err(stage: &'static str, e: impl fmt::Display) -> PipelineError {
    PipelineError {
        stage,
        message: e.to_string(),
    }
}

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: fmt::Display> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| stage_err(stage, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Submodel,
    Merged,
    Vanilla,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub role: Role,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n_cases: usize,
    /// Training rows seen by the model; `None` for merged and ensemble entries.
    pub train_rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpearmanSummary {
    pub early: SpearmanValue,
    pub late: SpearmanValue,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpearmanValue {
    pub from: usize,
    pub to: usize,
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotSummary {
    pub loss_ratio: Vec<RatioEntry>,
    pub spearman: Option<SpearmanSummary>,
    pub bias_contributors: Vec<BiasContributor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidatedReport {
    pub format_version: String,
    pub config: PipelineConfig,
    pub models: Vec<ModelEntry>,
    pub cluster_sizes: Vec<usize>,
    pub pilot: Option<PilotSummary>,
    pub venn: Option<Vec<VennEntry>>,
    pub buckets: Option<BucketReport>,
    pub notes: Vec<String>,
}

impl ConsolidatedReport {
    pub fn entry(&self, role: Role) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.role == role)
    }

    pub fn submodels(&self) -> impl Iterator<Item = &ModelEntry> {
        self.models.iter().filter(|m| m.role == Role::Submodel)
    }
}

/// Wall-clock seconds per stage and per evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub stages: BTreeMap<String, f64>,
    pub evaluation: BTreeMap<String, f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: &'static str) -> Result<()> {
    let text = serde_json::to_string_pretty(value).stage(stage)?;
    fs::write(path, text + "\n").map_err(|e| stage_err(stage, format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str, stage: &'static str) -> Result<()> {
    fs::write(path, text).map_err(|e| stage_err(stage, format!("{}: {e}", path.display())))
}

fn save_model(model: &TinyModel, path: &Path, stage: &'static str) -> Result<TinyModel> {
    let ck = model.to_checkpoint();
    write_checkpoint(&ck, path).stage(stage)?;
    // evaluate exactly what was written
    TinyModel::from_checkpoint(&ck).stage(stage)
}

struct Trained {
    name: String,
    model: TinyModel,
    trace: LossTrace,
    data: Corpus,
}

/// Trains every job on its own thread; results keep job order.
fn train_all(init: &TinyModel, jobs: Vec<(String, Corpus, TrainConfig)>, val: &Corpus) -> Result<Vec<Trained>> {
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(_, data, cfg)| s.spawn(move || bias_lab::train_submodel(init, data, val, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    jobs.into_iter()
        .zip(results)
        .map(|((name, data, _), r)| {
            let (model, trace) = r.map_err(|e| stage_err("train", format!("{name}: {e}")))?;
            Ok(Trained {
                name,
                model,
                trace,
                data,
            })
        })
        .collect()
}

fn entry(name: &str, role: Role, r: &EvalReport, train_rows: Option<usize>) -> ModelEntry {
    ModelEntry {
        name: name.to_string(),
        role,
        accuracy: r.accuracy,
        mean_loss: r.mean_loss,
        n_cases: r.n_cases,
        train_rows,
    }
}

fn spearman_value(trace: &LossTrace, from: usize, to: usize) -> SpearmanValue {
    match analysis::per_class_spearman(trace, from, to) {
        Ok(rho) => SpearmanValue {
            from,
            to,
            rho: Some(rho),
            error: None,
        },
        Err(e) => SpearmanValue {
            from,
            to,
            rho: None,
            error: Some(e.to_string()),
        },
    }
}

/// Early/late per-class Spearman over a pilot trace with checkpoints
/// `start, portion 1, ..., portion n`: early compares portion 1 -> 2, late
/// compares portion n-1 -> n.
pub fn pilot_spearman(trace: &LossTrace) -> Option<SpearmanSummary> {
    let n = trace.len();
    if n < 4 {
        return None;
    }
    Some(SpearmanSummary {
        early: spearman_value(trace, 1, 2),
        late: spearman_value(trace, n - 2, n - 1),
        note: "per-class mean losses stand in for per-token losses".into(),
    })
}

fn summarize_pilot(trace: &LossTrace, classes: usize) -> Result<PilotSummary> {
    let loss_ratio = analysis::loss_ratio_trace(trace).stage("analyze")?;
    let bias_contributors = analysis::top_bias_contributors(trace, TOP_CONTRIBUTORS.min(classes)).stage("analyze")?;
    Ok(PilotSummary {
        loss_ratio,
        spearman: pilot_spearman(trace),
        bias_contributors,
    })
}

/// Learning-rate multiplier of uniform-soup member `j` of `k`, spread evenly over [0.5, 1.5].
pub fn soup_lr_factor(j: usize, k: usize) -> f64 {
    if k <= 1 {
        1.0
    } else {
        0.5 + j as f64 / (k - 1) as f64
    }
}

/// Runs the whole experiment and writes its artifacts to `out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<ConsolidatedReport> {
    let mut timing = Timing::default();
    let mut clock = Instant::now();
    let mut lap = |timing: &mut Timing, stage: &str| {
        timing.stages.insert(stage.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| stage_err("config", format!("{}: {e}", out_dir.display())))?;
    let path = |name: &str| -> PathBuf { out_dir.join(name) };

    let (train, val) = bias_lab::generate_biased_dataset(&cfg.bias).stage("generate")?;
    save_corpus(&train, path("train.jsonl")).stage("generate")?;
    save_corpus(&val, path("val.jsonl")).stage("generate")?;
    lap(&mut timing, "generate");

    let d = cfg.bias.feature_dim();
    let c = cfg.bias.n_classes;
    let base = TinyModel::init(cfg.layout, d, c, cfg.train.seed).stage("init")?;
    let base = save_model(&base, &path("base.ct"), "init")?;

    let mut notes = Vec::new();
    let mut cluster_sizes = Vec::new();
    let mut jobs = Vec::new();
    match cfg.mode {
        Mode::Dtm => {
            let a = dispersal::disperse(
                &train,
                cfg.k,
                cfg.dispersal.method,
                cfg.dispersal.seed,
                cfg.dispersal.kmeans,
            )
            .stage("disperse")?;
            save_assignment(&a, path("assignment.json")).stage("disperse")?;
            cluster_sizes = a.sizes();
            for (j, part) in train.partition(&a).stage("disperse")?.into_iter().enumerate() {
                let tc = TrainConfig {
                    seed: rng::derive(cfg.train.seed, "submodel", j as u64),
                    ..cfg.train.clone()
                };
                jobs.push((format!("submodel_{j}"), part, tc));
            }
            lap(&mut timing, "disperse");
        }
        Mode::UniformSoup => {
            for j in 0..cfg.k {
                let tc = TrainConfig {
                    seed: rng::derive(cfg.train.seed, "soup", j as u64),
                    learning_rate: cfg.train.learning_rate * soup_lr_factor(j, cfg.k),
                    ..cfg.train.clone()
                };
                jobs.push((format!("soup_{j}"), train.clone(), tc));
            }
            notes.push("uniform soup: members train on the full corpus with distinct seeds and learning rates".into());
        }
        Mode::Vanilla => {}
    }
    let n_members = jobs.len();
    jobs.push(("vanilla".to_string(), train.clone(), cfg.train.clone()));

    let trained = train_all(&base, jobs, &val)?;
    let mut members = Vec::with_capacity(n_members);
    for t in &trained {
        let m = save_model(&t.model, &path(&format!("{}.ct", t.name)), "train")?;
        write_json(&path(&format!("trace_{}.json", t.name)), &t.trace, "train")?;
        members.push(m);
    }
    let vanilla = members.pop().expect("vanilla job is always present");
    lap(&mut timing, "train");

    let mut models = Vec::new();
    let mut member_reports = Vec::new();
    for (t, m) in trained.iter().zip(&members) {
        let r = bias_lab::evaluate(m, &val).stage("evaluate")?;
        write_json(&path(&format!("eval_{}.json", t.name)), &r, "evaluate")?;
        timing.evaluation.insert(t.name.clone(), r.wall_time_secs);
        models.push(entry(&t.name, Role::Submodel, &r, Some(t.data.len())));
        member_reports.push(r);
    }
    let vanilla_report = bias_lab::evaluate(&vanilla, &val).stage("evaluate")?;
    write_json(&path("eval_vanilla.json"), &vanilla_report, "evaluate")?;
    timing
        .evaluation
        .insert("vanilla".into(), vanilla_report.wall_time_secs);

    let mut venn = None;
    let mut buckets = None;
    if cfg.mode != Mode::Vanilla {
        let fishers = if cfg.merge.method == MergeMethod::Fisher {
            let mut fs_ = Vec::new();
            for (j, (t, m)) in trained.iter().zip(&members).enumerate() {
                let n = cfg.fisher_samples.min(t.data.len());
                let seed = rng::derive(cfg.train.seed, "fisher", j as u64);
                let f = bias_lab::estimate_fisher(m, &t.data, n, seed).stage("fisher")?;
                write_checkpoint(&f, path(&format!("fisher_{}.ct", t.name))).stage("fisher")?;
                fs_.push(f);
            }
            lap(&mut timing, "fisher");
            Some(fs_)
        } else {
            None
        };

        let cks: Vec<Checkpoint> = members.iter().map(|m| m.to_checkpoint()).collect();
        let base_ck = base.to_checkpoint();
        let merged_ck = merge_engine::merge(&cfg.merge, Some(&base_ck), &cks, fishers.as_deref()).stage("merge")?;
        write_checkpoint(&merged_ck, path("merged.ct")).stage("merge")?;
        write_json(
            &path("merge_recipe.json"),
            &cfg.merge.resolve(cfg.k).stage("merge")?,
            "merge",
        )?;
        let merged = TinyModel::from_checkpoint(&merged_ck).stage("merge")?;
        lap(&mut timing, "merge");

        let merged_report = bias_lab::evaluate(&merged, &val).stage("evaluate")?;
        write_json(&path("eval_merged.json"), &merged_report, "evaluate")?;
        timing.evaluation.insert("merged".into(), merged_report.wall_time_secs);
        let ens_report = bias_lab::ensemble_evaluate(&members, &val).stage("evaluate")?;
        write_json(&path("eval_ensemble.json"), &ens_report, "evaluate")?;
        timing.evaluation.insert("ensemble".into(), ens_report.wall_time_secs);
        models.push(entry("merged", Role::Merged, &merged_report, None));
        models.push(entry("vanilla", Role::Vanilla, &vanilla_report, Some(train.len())));
        models.push(entry("ensemble", Role::Ensemble, &ens_report, None));
        lap(&mut timing, "evaluate");

        let errs = ErrorSets::from_reports(&member_reports).stage("analyze")?;
        write_json(&path("error_sets.json"), &errs, "analyze")?;
        let b = analysis::bucket_accuracy(&errs, &merged_report).stage("analyze")?;
        write_text(&path("buckets.csv"), &analysis::buckets_csv(&b), "analyze")?;
        buckets = Some(b);
        if errs.k() > analysis::MAX_VENN_SETS {
            notes.push(format!(
                "venn fractions skipped: {} error sets exceed the limit",
                errs.k()
            ));
        } else {
            match analysis::venn_fractions(&errs) {
                Ok(v) => {
                    write_text(&path("venn.csv"), &analysis::venn_csv(&v), "analyze")?;
                    venn = Some(v);
                }
                Err(e) => notes.push(format!("venn fractions unavailable: {e}")),
            }
        }
    } else {
        models.push(entry("vanilla", Role::Vanilla, &vanilla_report, Some(train.len())));
        lap(&mut timing, "evaluate");
    }

    let pilot = match &cfg.pilot {
        Some(p) => {
            let (_, trace) = bias_lab::pilot_study(&base, &train, &val, &cfg.train, p).stage("pilot")?;
            write_json(&path("pilot_trace.json"), &trace, "pilot")?;
            let summary = summarize_pilot(&trace, c)?;
            write_text(
                &path("loss_ratio.csv"),
                &analysis::loss_ratio_csv(&summary.loss_ratio),
                "analyze",
            )?;
            write_text(
                &path("bias_contributors.csv"),
                &analysis::contributors_csv(&summary.bias_contributors),
                "analyze",
            )?;
            lap(&mut timing, "pilot");
            Some(summary)
        }
        None => None,
    };

    let report = ConsolidatedReport {
        format_version: FORMAT_VERSION.to_string(),
        config: cfg.clone(),
        models,
        cluster_sizes,
        pilot,
        venn,
        buckets,
        notes,
    };
    write_json(&path("report.json"), &report, "report")?;
    write_json(&path("timing.json"), &timing, "report")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub k: usize,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub merged_accuracy: Option<f64>,
    pub merged_loss: Option<f64>,
    pub ensemble_accuracy: Option<f64>,
    pub vanilla_accuracy: Option<f64>,
    pub mean_submodel_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub format_version: String,
    pub config: PipelineConfig,
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from(
            "k,ok,merged_accuracy,merged_loss,ensemble_accuracy,vanilla_accuracy,mean_submodel_accuracy\n",
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.k,
                e.ok,
                opt(e.merged_accuracy),
                opt(e.merged_loss),
                opt(e.ensemble_accuracy),
                opt(e.vanilla_accuracy),
                opt(e.mean_submodel_accuracy)
            ));
        }
        s
    }
}

/// One pipeline run per k in `cfg.sweep`, each in `out_dir/k{k}`. A failing k is
/// recorded and the remaining values still run.
pub fn run_sweep(cfg: &PipelineConfig, out_dir: &Path) -> Result<SweepReport> {
    let ks = cfg
        .sweep
        .clone()
        .ok_or_else(|| stage_err("config", "config has no sweep list"))?;
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| stage_err("config", format!("{}: {e}", out_dir.display())))?;
    let mut entries = Vec::with_capacity(ks.len());
    for k in ks {
        let run_cfg = PipelineConfig {
            k,
            sweep: None,
            ..cfg.clone()
        };
        let e = match run_pipeline(&run_cfg, &out_dir.join(format!("k{k}"))) {
            Ok(r) => {
                let subs: Vec<f64> = r.submodels().map(|m| m.accuracy).collect();
                SweepEntry {
                    k,
                    ok: true,
                    error: None,
                    merged_accuracy: r.entry(Role::Merged).map(|m| m.accuracy),
                    merged_loss: r.entry(Role::Merged).map(|m| m.mean_loss),
                    ensemble_accuracy: r.entry(Role::Ensemble).map(|m| m.accuracy),
                    vanilla_accuracy: r.entry(Role::Vanilla).map(|m| m.accuracy),
                    mean_submodel_accuracy: (!subs.is_empty()).then(|| subs.iter().sum::<f64>() / subs.len() as f64),
                }
            }
            Err(e) => SweepEntry {
                k,
                ok: false,
                error: Some(e.to_string()),
                merged_accuracy: None,
                merged_loss: None,
                ensemble_accuracy: None,
                vanilla_accuracy: None,
                mean_submodel_accuracy: None,
            },
        };
        entries.push(e);
    }
    let report = SweepReport {
        format_version: FORMAT_VERSION.to_string(),
        config: cfg.clone(),
        entries,
    };
    write_json(&out_dir.join("sweep.json"), &report, "report")?;
    write_text(&out_dir.join("sweep.csv"), &report.to_csv(), "report")?;
    Ok(report)
}
