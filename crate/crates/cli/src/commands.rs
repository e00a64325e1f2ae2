use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use dtm_core::analysis::{self, ErrorSets, LossTrace};
use dtm_core::bias_lab::{self, EvalReport, Layout, Optimizer, TinyModel, TrainConfig};
use dtm_core::dispersal::{self, load_corpus, save_assignment, save_corpus, DispersalMethod};
use dtm_core::merge_engine::{self, MergeMethod};
use dtm_core::pipeline::{self, ConsolidatedReport, Mode, PipelineConfig, Role, SweepReport};
use dtm_core::tensor_store::{read_checkpoint, write_checkpoint, Checkpoint};

use crate::{
    AnalyzeCommand, Cli, Command, DisperseArgs, EnsembleArgs, EvalArgs, FisherArgs, LayoutArg, MergeArg, MergeArgs,
    MethodArg, ModeArg, PipelineFlags, RunArgs, SweepArgs, SynthArgs, TrainArgs, TrainFlags,
};

const DEFAULT_SWEEP: [usize; 5] = [2, 3, 4, 5, 6];

pub fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli).context("config stage failed")?;
    match &cli.command {
        Command::Disperse(a) => disperse(cli, cfg, a).context("disperse stage failed"),
        Command::Synth(a) => synth(cli, cfg, a).context("synth stage failed"),
        Command::Train(a) => train(cli, cfg, a).context("train stage failed"),
        Command::Fisher(a) => fisher(cli, cfg, a).context("fisher stage failed"),
        Command::Merge(a) => merge(cli, cfg, a).context("merge stage failed"),
        Command::Eval(a) => eval(cli, a).context("eval stage failed"),
        Command::Ensemble(a) => ensemble(cli, a).context("ensemble stage failed"),
        Command::Analyze(a) => analyze(cli, a).context("analyze stage failed"),
        Command::Run(a) => run(cli, cfg, a),
        Command::Sweep(a) => sweep(cli, cfg, a),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

/// Where a single-artifact command writes: `--output` if given, else `--out`
/// itself when it carries the artifact's extension (`--out fused.ct`), else
/// `name` inside the `--out` directory. Parent directories are created.
fn output_path(cli: &Cli, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let wanted = Path::new(name).extension();
    let path = match explicit {
        Some(p) => p.clone(),
        None if wanted.is_some() && cli.out.extension() == wanted => cli.out.clone(),
        None => cli.out.join(name),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_ck(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(path).with_context(|| format!("reading {}", path.display()))
}

fn read_model(path: &Path) -> Result<TinyModel> {
    TinyModel::from_checkpoint(&read_ck(path)?).with_context(|| format!("loading {}", path.display()))
}

fn say(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", msg.as_ref());
    }
}

fn dispersal_method(m: MethodArg) -> DispersalMethod {
    match m {
        MethodArg::Random => DispersalMethod::Random,
        MethodArg::Kmeans => DispersalMethod::Kmeans,
    }
}

fn merge_method(m: MergeArg) -> MergeMethod {
    match m {
        MergeArg::Average => MergeMethod::Average,
        MergeArg::Fisher => MergeMethod::Fisher,
        MergeArg::TaskVector => MergeMethod::TaskVector,
        MergeArg::Ties => MergeMethod::Ties,
        MergeArg::Dare => MergeMethod::Dare,
    }
}

fn layout(arg: Option<LayoutArg>, hidden: usize, fallback: Layout) -> Layout {
    match arg {
        None => fallback,
        Some(LayoutArg::Linear) => Layout::Linear,
        Some(LayoutArg::Mlp) => Layout::Mlp { hidden },
    }
}

fn apply_train_flags(cfg: &mut TrainConfig, f: &TrainFlags) {
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.l2 {
        cfg.l2_coeff = v;
    }
    if let Some(beta) = f.momentum {
        cfg.optimizer = Optimizer::Momentum { beta };
    }
}

fn disperse(cli: &Cli, cfg: PipelineConfig, a: &DisperseArgs) -> Result<()> {
    let corpus = load_corpus(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let k = a.k.unwrap_or(cfg.k);
    let method = a.method.map(dispersal_method).unwrap_or(cfg.dispersal.method);
    let assignment = dispersal::disperse(&corpus, k, method, cfg.dispersal.seed, cfg.dispersal.kmeans)?;
    save_assignment(&assignment, output_path(cli, &None, "assignment.json")?)?;
    for (j, part) in corpus.partition(&assignment)?.iter().enumerate() {
        save_corpus(part, output_path(cli, &None, &format!("cluster_{j}.jsonl"))?)?;
    }
    say(
        cli,
        format!(
            "{} records -> {k} clusters ({method}), sizes {:?}",
            corpus.len(),
            assignment.sizes()
        ),
    );
    Ok(())
}

fn synth(cli: &Cli, cfg: PipelineConfig, a: &SynthArgs) -> Result<()> {
    let mut spec = cfg.bias;
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { spec.$field = v; } )* };
    }
    set!(
        n_classes,
        signal_dim,
        clusters,
        bias_strength,
        samples_per_cluster,
        val_samples,
        noise
    );
    let (train, val) = bias_lab::generate_biased_dataset(&spec)?;
    save_corpus(&train, output_path(cli, &None, "train.jsonl")?)?;
    save_corpus(&val, output_path(cli, &None, "val.jsonl")?)?;
    write_json(&output_path(cli, &None, "bias_spec.json")?, &spec)?;
    say(
        cli,
        format!(
            "{} train rows, {} val rows, {} features",
            train.len(),
            val.len(),
            spec.feature_dim()
        ),
    );
    Ok(())
}

fn train(cli: &Cli, cfg: PipelineConfig, a: &TrainArgs) -> Result<()> {
    let data = load_corpus(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let val = match &a.val {
        Some(p) => load_corpus(p).with_context(|| format!("reading {}", p.display()))?,
        None => data.clone(),
    };
    let mut tc = cfg.train.clone();
    apply_train_flags(&mut tc, &a.train);
    let init = match &a.init {
        Some(p) => read_model(p)?,
        None => {
            let d = data
                .iter()
                .find_map(|r| r.features.as_ref().map(Vec::len))
                .context("training corpus has no feature vectors")?;
            let c = a.classes.unwrap_or(cfg.bias.n_classes);
            TinyModel::init(layout(a.layout, a.hidden, cfg.layout), d, c, tc.seed)?
        }
    };
    let (model, trace) = if a.pilot {
        let pilot = cfg.pilot.unwrap_or_default();
        bias_lab::pilot_study(&init, &data, &val, &tc, &pilot)?
    } else {
        bias_lab::train_submodel(&init, &data, &val, &tc)?
    };
    let out = output_path(cli, &a.output, "model.ct")?;
    write_checkpoint(&model.to_checkpoint(), &out)?;
    let trace_path = out.with_extension("trace.json");
    write_json(&trace_path, &trace)?;
    let last = trace.checkpoints.last().expect("trace starts with the initial point");
    say(
        cli,
        format!(
            "trained {} on {} rows: train loss {:.4}, val loss {:.4} -> {}",
            model.layout(),
            data.len(),
            last.mean_train_loss,
            last.mean_val_loss,
            out.display()
        ),
    );
    Ok(())
}

fn fisher(cli: &Cli, cfg: PipelineConfig, a: &FisherArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let data = load_corpus(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let n = a.samples.unwrap_or_else(|| cfg.fisher_samples.min(data.len()));
    let f = bias_lab::estimate_fisher(&model, &data, n, cfg.train.seed)?;
    let out = output_path(cli, &a.output, "fisher.ct")?;
    write_checkpoint(&f, &out)?;
    say(cli, format!("fisher over {n} samples -> {}", out.display()));
    Ok(())
}

fn merge(cli: &Cli, cfg: PipelineConfig, a: &MergeArgs) -> Result<()> {
    let mut recipe = match &a.recipe {
        Some(p) => merge_engine::MergeRecipe::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => cfg.merge.clone(),
    };
    if let Some(m) = a.method {
        recipe.method = merge_method(m);
    }
    if a.alpha.is_some() {
        recipe.alpha = a.alpha.clone();
    }
    recipe.lambda = a.lambda.or(recipe.lambda);
    recipe.density = a.density.or(recipe.density);
    recipe.drop_rate = a.drop_rate.or(recipe.drop_rate);
    recipe.epsilon = a.epsilon.or(recipe.epsilon);
    if cli.seed.is_some() {
        recipe.seed = cfg.merge.seed;
    }
    let models = a.models.iter().map(|p| read_ck(p)).collect::<Result<Vec<_>>>()?;
    let base = a.base.as_deref().map(read_ck).transpose()?;
    let fishers = a.fishers.iter().map(|p| read_ck(p)).collect::<Result<Vec<_>>>()?;
    if recipe.method == MergeMethod::Fisher && fishers.is_empty() {
        bail!("method `fisher` needs --fishers");
    }
    let fishers = (!fishers.is_empty()).then_some(fishers);
    let merged = merge_engine::merge(&recipe, base.as_ref(), &models, fishers.as_deref())?;
    let out = output_path(cli, &a.output, "merged.ct")?;
    write_checkpoint(&merged, &out)?;
    say(
        cli,
        format!(
            "merged {} checkpoints ({}) -> {}",
            models.len(),
            recipe.method,
            out.display()
        ),
    );
    Ok(())
}

fn print_eval(cli: &Cli, what: &str, r: &EvalReport, out: &Path) {
    say(
        cli,
        format!(
            "{what}: accuracy {:.4}, mean loss {:.4} over {} cases -> {}",
            r.accuracy,
            r.mean_loss,
            r.n_cases,
            out.display()
        ),
    );
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let data = load_corpus(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let r = bias_lab::evaluate(&model, &data)?;
    let out = output_path(cli, &a.output, "eval.json")?;
    write_json(&out, &r)?;
    print_eval(cli, "model", &r, &out);
    Ok(())
}

fn ensemble(cli: &Cli, a: &EnsembleArgs) -> Result<()> {
    let models = a.models.iter().map(|p| read_model(p)).collect::<Result<Vec<_>>>()?;
    let data = load_corpus(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let r = bias_lab::ensemble_evaluate(&models, &data)?;
    let out = output_path(cli, &a.output, "ensemble.json")?;
    write_json(&out, &r)?;
    print_eval(cli, &format!("ensemble of {}", models.len()), &r, &out);
    Ok(())
}

#[derive(Serialize)]
struct SpearmanOutput {
    from: usize,
    to: usize,
    rho: f64,
    train_reduction: Vec<f64>,
    val_reduction: Vec<f64>,
}

#[derive(Serialize)]
struct ErrorSetsOutput {
    k: usize,
    universe: usize,
    error_counts: Vec<usize>,
    venn: Option<Vec<analysis::VennEntry>>,
    buckets: Option<analysis::BucketReport>,
}

fn analyze(cli: &Cli, cmd: &AnalyzeCommand) -> Result<()> {
    let text = |name: &str, body: String| -> Result<()> {
        let p = output_path(cli, &None, name)?;
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
    };
    match cmd {
        AnalyzeCommand::LossRatio { trace } => {
            let t: LossTrace = read_json(trace)?;
            let r = analysis::loss_ratio_trace(&t)?;
            write_json(&output_path(cli, &None, "loss_ratio.json")?, &r)?;
            text("loss_ratio.csv", analysis::loss_ratio_csv(&r))?;
            for e in &r {
                let ratio = e.ratio.map_or("flagged".to_string(), |v| format!("{v:.4}"));
                say(cli, format!("{} -> {}: {ratio}", e.from, e.to));
            }
        }
        AnalyzeCommand::Spearman { trace, from, to } => {
            let t: LossTrace = read_json(trace)?;
            let rho = analysis::per_class_spearman(&t, *from, *to)?;
            let (train_reduction, val_reduction) = analysis::per_class_reductions(&t, *from, *to)?;
            text(
                "reductions.csv",
                analysis::reductions_csv(&train_reduction, &val_reduction),
            )?;
            let out = SpearmanOutput {
                from: *from,
                to: *to,
                rho,
                train_reduction,
                val_reduction,
            };
            write_json(&output_path(cli, &None, "spearman.json")?, &out)?;
            say(cli, format!("spearman rho {from} -> {to}: {rho:.4}"));
        }
        AnalyzeCommand::BiasTop { trace, k, from, to } => {
            let t: LossTrace = read_json(trace)?;
            if t.len() < 2 {
                bail!("trace needs at least 2 checkpoints, has {}", t.len());
            }
            let rows = analysis::top_bias_contributors_between(&t, from.unwrap_or(0), to.unwrap_or(t.len() - 1), *k)?;
            write_json(&output_path(cli, &None, "bias_top.json")?, &rows)?;
            text("bias_top.csv", analysis::contributors_csv(&rows))?;
            for r in &rows {
                say(cli, format!("class {}: gap {:.4}", r.class, r.gap));
            }
        }
        AnalyzeCommand::ErrorSets { reports, fused } => {
            let rs = reports
                .iter()
                .map(|p| read_json::<EvalReport>(p))
                .collect::<Result<Vec<_>>>()?;
            let errs = ErrorSets::from_reports(&rs)?;
            let venn = if errs.k() <= analysis::MAX_VENN_SETS {
                Some(analysis::venn_fractions(&errs)?)
            } else {
                None
            };
            let buckets = match fused {
                Some(p) => Some(analysis::bucket_accuracy(&errs, &read_json::<EvalReport>(p)?)?),
                None => None,
            };
            if let Some(v) = &venn {
                text("venn.csv", analysis::venn_csv(v))?;
            }
            if let Some(b) = &buckets {
                text("buckets.csv", analysis::buckets_csv(b))?;
                for bucket in &b.buckets {
                    let acc = bucket.accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
                    say(
                        cli,
                        format!("n={}: {} cases, fused accuracy {acc}", bucket.n, bucket.count),
                    );
                }
            }
            let out = ErrorSetsOutput {
                k: errs.k(),
                universe: errs.universe.len(),
                error_counts: errs.sets.iter().map(|s| s.len()).collect(),
                venn,
                buckets,
            };
            write_json(&output_path(cli, &None, "error_sets.json")?, &out)?;
        }
    }
    Ok(())
}

fn apply_pipeline_flags(cfg: &mut PipelineConfig, f: &PipelineFlags) {
    if let Some(m) = f.mode {
        cfg.mode = match m {
            ModeArg::Dtm => Mode::Dtm,
            ModeArg::Vanilla => Mode::Vanilla,
            ModeArg::UniformSoup => Mode::UniformSoup,
        };
    }
    if let Some(m) = f.method {
        cfg.dispersal.method = dispersal_method(m);
    }
    if let Some(m) = f.merge {
        cfg.merge.method = merge_method(m);
    }
    cfg.layout = layout(f.layout, f.hidden, cfg.layout);
    if let Some(q) = f.bias_strength {
        cfg.bias.bias_strength = q;
    }
    if let Some(n) = f.samples_per_cluster {
        cfg.bias.samples_per_cluster = n;
    }
    if let Some(n) = f.val_samples {
        cfg.bias.val_samples = n;
    }
    if f.no_pilot {
        cfg.pilot = None;
    }
    apply_train_flags(&mut cfg.train, &f.train);
}

fn print_report(cli: &Cli, r: &ConsolidatedReport) {
    for m in &r.models {
        say(
            cli,
            format!("{:<12} accuracy {:.4}  loss {:.4}", m.name, m.accuracy, m.mean_loss),
        );
    }
    if let Some(p) = &r.pilot {
        let first = p.loss_ratio.first().and_then(|e| e.ratio);
        let last = p.loss_ratio.last().and_then(|e| e.ratio);
        if let (Some(a), Some(b)) = (first, last) {
            say(
                cli,
                format!("loss-reduction ratio: first portion {a:.3}, last portion {b:.3}"),
            );
        }
    }
    if let Some(b) = &r.buckets {
        let accs: Vec<String> = b
            .buckets
            .iter()
            .map(|x| x.accuracy.map_or("-".to_string(), |a| format!("{a:.3}")))
            .collect();
        say(
            cli,
            format!("merged accuracy by error-set count: [{}]", accs.join(", ")),
        );
    }
}

fn run(cli: &Cli, mut cfg: PipelineConfig, a: &RunArgs) -> Result<()> {
    if let Some(k) = a.k {
        cfg.k = k;
    }
    apply_pipeline_flags(&mut cfg, &a.pipeline);
    cfg.sweep = None;
    let report = pipeline::run_pipeline(&cfg, &cli.out)?;
    print_report(cli, &report);
    if report.entry(Role::Merged).is_some() {
        say(
            cli,
            format!("report written to {}", cli.out.join("report.json").display()),
        );
    }
    Ok(())
}

fn sweep(cli: &Cli, mut cfg: PipelineConfig, a: &SweepArgs) -> Result<()> {
    apply_pipeline_flags(&mut cfg, &a.pipeline);
    cfg.sweep = Some(
        a.ks.clone()
            .or(cfg.sweep.take())
            .unwrap_or_else(|| DEFAULT_SWEEP.to_vec()),
    );
    let report: SweepReport = pipeline::run_sweep(&cfg, &cli.out)?;
    let mut failed = Vec::new();
    for e in &report.entries {
        match (e.ok, e.merged_accuracy) {
            (true, Some(acc)) => say(cli, format!("k={}: merged accuracy {acc:.4}", e.k)),
            (true, None) => say(cli, format!("k={}: ok", e.k)),
            _ => {
                eprintln!("k={}: {}", e.k, e.error.as_deref().unwrap_or("failed"));
                failed.push(e.k);
            }
        }
    }
    if !failed.is_empty() {
        bail!("sweep stage failed for k = {failed:?}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_flags_override_config() {
        let mut cfg = TrainConfig::default();
        let flags = TrainFlags {
            epochs: Some(7),
            momentum: Some(0.9),
            ..TrainFlags::default()
        };
        apply_train_flags(&mut cfg, &flags);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.optimizer, Optimizer::Momentum { beta: 0.9 });
        assert_eq!(cfg.learning_rate, 0.1);
    }
}
