use std::fs;
use std::path::Path;

use dtm_core::bias_lab::{BiasSpec, PilotConfig};
use dtm_core::merge_engine::{MergeMethod, MergeRecipe};
use dtm_core::pipeline::{run_pipeline, run_sweep, ConsolidatedReport, Mode, PipelineConfig, Role, FORMAT_VERSION};
use dtm_core::tensor_store::read_checkpoint;

fn small() -> PipelineConfig {
    PipelineConfig {
        k: 3,
        bias: BiasSpec {
            clusters: 3,
            samples_per_cluster: 60,
            val_samples: 50,
            ..BiasSpec::default()
        },
        pilot: Some(PilotConfig {
            portions: 4,
            trained: 4,
            split_seed: 0,
        }),
        ..PipelineConfig::default()
    }
}

fn read_report(dir: &Path) -> ConsolidatedReport {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn dtm_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let report = run_pipeline(&cfg, dir.path()).unwrap();

    assert_eq!(report.models.len(), cfg.k + 3);
    assert_eq!(report.submodels().count(), cfg.k);
    for role in [Role::Merged, Role::Vanilla, Role::Ensemble] {
        assert_eq!(report.models.iter().filter(|m| m.role == role).count(), 1);
    }
    assert_eq!(report.cluster_sizes.iter().sum::<usize>(), 180);
    assert_eq!(report.format_version, FORMAT_VERSION);
    assert_eq!(report.config, cfg);
    assert_eq!(read_report(dir.path()), report);

    for name in [
        "train.jsonl",
        "val.jsonl",
        "base.ct",
        "assignment.json",
        "submodel_0.ct",
        "submodel_2.ct",
        "trace_submodel_1.json",
        "eval_merged.json",
        "eval_ensemble.json",
        "eval_vanilla.json",
        "merged.ct",
        "merge_recipe.json",
        "error_sets.json",
        "buckets.csv",
        "venn.csv",
        "pilot_trace.json",
        "loss_ratio.csv",
        "bias_contributors.csv",
        "timing.json",
    ] {
        assert!(dir.path().join(name).is_file(), "missing {name}");
    }
    let pilot = report.pilot.as_ref().unwrap();
    assert_eq!(pilot.loss_ratio.len(), 4);
    assert!(pilot.spearman.is_some());
    let venn: f64 = report.venn.as_ref().unwrap().iter().map(|v| v.fraction).sum();
    assert!((venn - 1.0).abs() < 1e-9);
    let buckets = report.buckets.as_ref().unwrap();
    assert_eq!(buckets.buckets.iter().map(|b| b.count).sum::<usize>(), 50);
}

#[test]
fn identical_configs_give_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = PipelineConfig {
        merge: MergeRecipe::new(MergeMethod::Fisher),
        ..small()
    };
    run_pipeline(&cfg, a.path()).unwrap();
    run_pipeline(&cfg, b.path()).unwrap();
    for name in [
        "report.json",
        "merged.ct",
        "submodel_1.ct",
        "vanilla.ct",
        "fisher_submodel_0.ct",
        "pilot_trace.json",
    ] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }

    let c = tempfile::tempdir().unwrap();
    let mut other = cfg.clone();
    other.set_seed(5);
    run_pipeline(&other, c.path()).unwrap();
    assert_ne!(
        fs::read(a.path().join("merged.ct")).unwrap(),
        fs::read(c.path().join("merged.ct")).unwrap()
    );
}

#[test]
fn every_merge_method_completes() {
    for method in [
        MergeMethod::Average,
        MergeMethod::Fisher,
        MergeMethod::TaskVector,
        MergeMethod::Ties,
        MergeMethod::Dare,
    ] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            merge: MergeRecipe::new(method),
            pilot: None,
            ..small()
        };
        let report = run_pipeline(&cfg, dir.path()).unwrap();
        let merged = report.entry(Role::Merged).unwrap();
        assert!(merged.accuracy > 0.0, "{method}");
        let ck = read_checkpoint(dir.path().join("merged.ct")).unwrap();
        assert!(ck.is_finite(), "{method}");
        assert!(report.pilot.is_none());
    }
}

#[test]
fn merged_average_of_one_cluster_is_the_submodel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        k: 1,
        pilot: None,
        ..small()
    };
    run_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(
        fs::read(dir.path().join("merged.ct")).unwrap(),
        fs::read(dir.path().join("submodel_0.ct")).unwrap()
    );
}

#[test]
fn vanilla_and_soup_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        mode: Mode::Vanilla,
        pilot: None,
        ..small()
    };
    let report = run_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(report.models.len(), 1);
    assert_eq!(report.models[0].role, Role::Vanilla);
    assert!(!dir.path().join("merged.ct").exists());

    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        mode: Mode::UniformSoup,
        pilot: None,
        ..small()
    };
    let report = run_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(report.models.len(), cfg.k + 3);
    assert!(report.submodels().all(|m| m.train_rows == Some(180)));
    assert!(report.cluster_sizes.is_empty());
}

#[test]
fn sweep_records_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    // two training rows: k=2 works, k=3 cannot be dispersed
    let cfg = PipelineConfig {
        k: 2,
        bias: BiasSpec {
            clusters: 2,
            samples_per_cluster: 1,
            val_samples: 20,
            ..BiasSpec::default()
        },
        pilot: None,
        sweep: Some(vec![3, 2]),
        ..PipelineConfig::default()
    };
    let report = run_sweep(&cfg, dir.path()).unwrap();
    assert_eq!(report.entries.len(), 2);
    assert!(!report.entries[0].ok);
    assert!(report.entries[0]
        .error
        .as_deref()
        .unwrap()
        .starts_with("disperse stage failed"));
    assert!(report.entries[1].ok && report.entries[1].merged_accuracy.is_some());
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("3,false,"));
    assert!(dir.path().join("k2/report.json").is_file());
}

#[test]
fn invalid_config_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        merge: MergeRecipe {
            density: Some(0.0),
            ..MergeRecipe::new(MergeMethod::Ties)
        },
        ..small()
    };
    let err = run_pipeline(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.stage, "config");
    assert!(err.to_string().starts_with("config stage failed"));
}
