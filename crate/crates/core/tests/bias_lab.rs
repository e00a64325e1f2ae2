use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use dtm_core::bias_lab::{
    ensemble_evaluate, estimate_fisher, evaluate, generate_biased_dataset, pilot_study, train_submodel, BiasSpec,
    Dataset, Layout, Optimizer, PilotConfig, TinyModel, TrainConfig, Trainer,
};
use dtm_core::dispersal::{Corpus, InstructionRecord};
use dtm_core::tensor_store::{read_checkpoint, write_checkpoint};

fn corpus(rows: Vec<(Vec<f32>, usize)>) -> Corpus {
    rows.into_iter()
        .enumerate()
        .map(|(i, (f, y))| {
            let mut r = InstructionRecord::new(format!("r{i:04}"));
            r.features = Some(f);
            r.label = Some(y);
            r
        })
        .collect()
}

fn random_corpus(rng: &mut StdRng, n: usize, d: usize, c: usize) -> Corpus {
    corpus(
        (0..n)
            .map(|i| ((0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect(), i % c))
            .collect(),
    )
}

fn random_model(rng: &mut StdRng, layout: Layout, d: usize, c: usize) -> TinyModel {
    let mut m = TinyModel::zeros(layout, d, c).unwrap();
    let p: Vec<f64> = (0..m.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    m.set_flat_params(&p).unwrap();
    m
}

fn features(r: &InstructionRecord) -> Vec<f64> {
    r.features.as_ref().unwrap().iter().map(|&v| f64::from(v)).collect()
}

/// Central differences of `f` around `theta`.
fn fd(theta: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let mut p = theta.to_vec();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            (up - f(&p)) / (2.0 * h)
        })
        .collect()
}

fn assert_rel(got: &[f64], want: &[f64], rel: f64) {
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= rel * w.abs() + 1e-9, "entry {i}: {g} vs {w}");
    }
}

#[test]
fn example_gradient_matches_finite_differences() {
    let mut rng = StdRng::seed_from_u64(1);
    for layout in [Layout::Linear, Layout::Mlp { hidden: 4 }] {
        let model = random_model(&mut rng, layout, 5, 3);
        for y in 0..3 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, grad) = model.example_gradient(&x, y);
            let want = fd(&model.flat_params(), 1e-4, |p| {
                let mut m = model.clone();
                m.set_flat_params(p).unwrap();
                m.example_loss(&x, y)
            });
            assert_rel(&grad.flat_params(), &want, 1e-4);
        }
    }
}

#[test]
fn full_batch_step_follows_the_regularized_objective() {
    // one SGD step over the whole data set moves theta by -lr * grad J, where
    // J = mean cross-entropy + l2 * |theta|^2
    let mut rng = StdRng::seed_from_u64(2);
    let (d, c, n) = (5, 3, 12);
    let data = random_corpus(&mut rng, n, d, c);
    for layout in [Layout::Linear, Layout::Mlp { hidden: 3 }] {
        let model = random_model(&mut rng, layout, d, c);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 1,
            batch_size: n,
            l2_coeff: 0.01,
            ..TrainConfig::default()
        };
        let ds = Dataset::for_model(&data, &model).unwrap();
        let mut stepped = model.clone();
        Trainer::new(cfg.clone()).unwrap().run(&mut stepped, &ds, 1).unwrap();

        let theta = model.flat_params();
        let grad = fd(&theta, 1e-5, |p| {
            let mut m = model.clone();
            m.set_flat_params(p).unwrap();
            let ce: f64 = data
                .iter()
                .map(|r| m.example_loss(&features(r), r.label.unwrap()))
                .sum::<f64>()
                / n as f64;
            ce + cfg.l2_coeff * p.iter().map(|v| v * v).sum::<f64>()
        });
        let want: Vec<f64> = theta
            .iter()
            .zip(&grad)
            .map(|(t, g)| t - cfg.learning_rate * g)
            .collect();
        for (g, w) in stepped.flat_params().iter().zip(&want) {
            assert!((g - w).abs() < 1e-8, "{g} vs {w}");
        }
    }
}

#[test]
fn separable_data_is_fit_exactly() {
    let mut rng = StdRng::seed_from_u64(3);
    let rows = (0..80)
        .map(|i| {
            let y = i % 2;
            let sign = if y == 0 { -1.0 } else { 1.0 };
            let x = vec![sign * rng.random_range(0.2f32..1.0), rng.random_range(-1.0f32..1.0)];
            (x, y)
        })
        .collect();
    let data = corpus(rows);
    let init = TinyModel::zeros(Layout::Linear, 2, 2).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.5,
        epochs: 200,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let (model, trace) = train_submodel(&init, &data, &data, &cfg).unwrap();
    assert_eq!(evaluate(&model, &data).unwrap().accuracy, 1.0);
    let (first, last) = (&trace.checkpoints[0], trace.checkpoints.last().unwrap());
    assert!(last.mean_train_loss < first.mean_train_loss);
}

#[test]
fn training_is_bit_reproducible() {
    let spec = BiasSpec {
        samples_per_cluster: 100,
        val_samples: 50,
        ..BiasSpec::default()
    };
    let (train, val) = generate_biased_dataset(&spec).unwrap();
    let init = TinyModel::init(Layout::Mlp { hidden: 8 }, spec.feature_dim(), spec.n_classes, 4).unwrap();
    let cfg = TrainConfig {
        optimizer: Optimizer::Momentum { beta: 0.9 },
        seed: 11,
        ..TrainConfig::default()
    };
    let (a, ta) = train_submodel(&init, &train, &val, &cfg).unwrap();
    let (b, tb) = train_submodel(&init, &train, &val, &cfg).unwrap();
    assert_eq!(a.to_checkpoint(), b.to_checkpoint());
    assert_eq!(ta, tb);
    let (c, _) = train_submodel(&init, &train, &val, &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.to_checkpoint(), c.to_checkpoint());
}

#[test]
fn evaluation_does_not_depend_on_row_order() {
    let mut rng = StdRng::seed_from_u64(5);
    let data = random_corpus(&mut rng, 60, 4, 3);
    let mut rows = data.records().to_vec();
    rows.reverse();
    rows.swap(3, 40);
    let shuffled = Corpus::new(rows).unwrap();
    let models: Vec<TinyModel> = (0..3).map(|_| random_model(&mut rng, Layout::Linear, 4, 3)).collect();
    let (a, b) = (
        evaluate(&models[0], &data).unwrap(),
        evaluate(&models[0], &shuffled).unwrap(),
    );
    assert_eq!(a.per_case_correct, b.per_case_correct);
    assert_eq!(a.accuracy, b.accuracy);
    let (a, b) = (
        ensemble_evaluate(&models, &data).unwrap(),
        ensemble_evaluate(&models, &shuffled).unwrap(),
    );
    assert_eq!(a.per_case_correct, b.per_case_correct);
}

#[test]
fn ensemble_matches_brute_force_recount() {
    // per-case prediction recomputed from the two models' raw logits
    let mut rng = StdRng::seed_from_u64(6);
    let data = random_corpus(&mut rng, 200, 3, 2);
    let models: Vec<TinyModel> = (0..2)
        .map(|_| random_model(&mut rng, Layout::Mlp { hidden: 3 }, 3, 2))
        .collect();
    let report = ensemble_evaluate(&models, &data).unwrap();
    let mut correct = 0;
    for r in data.iter() {
        let x = features(r);
        let (z0, z1) = (models[0].forward(&x), models[1].forward(&x));
        let avg: Vec<f64> = z0.iter().zip(&z1).map(|(a, b)| (a + b) / 2.0).collect();
        let pred = if avg[1] > avg[0] { 1 } else { 0 };
        let ok = pred == r.label.unwrap();
        correct += usize::from(ok);
        assert_eq!(report.per_case_correct[&r.id], ok, "{}", r.id);
    }
    assert_eq!(report.accuracy, correct as f64 / 200.0);
    // K copies of one model evaluate like the model itself
    let single = evaluate(&models[0], &data).unwrap();
    let copies = ensemble_evaluate(&vec![models[0].clone(); 3], &data).unwrap();
    assert_eq!(single.per_case_correct, copies.per_case_correct);
    assert!((single.mean_loss - copies.mean_loss).abs() < 1e-12);
}

#[test]
fn hand_computed_forward_pass() {
    // w0 is [D, C] row-major: logits = x . w0 + b0
    let mut m = TinyModel::zeros(Layout::Linear, 2, 3).unwrap();
    m.set_flat_params(&[1.0, 0.0, -1.0, 2.0, 1.0, 0.0, 0.0, 0.5, 0.0])
        .unwrap();
    let x = [0.5f32, 1.0];
    // class 0: 0.5 + 2 = 2.5; class 1: 0 + 1 + 0.5 = 1.5; class 2: -0.5
    assert_eq!(m.forward(&[0.5, 1.0]), vec![2.5, 1.5, -0.5]);
    let data = corpus(vec![(x.to_vec(), 1)]);
    let r = evaluate(&m, &data).unwrap();
    assert!(!r.per_case_correct["r0000"]);
    let z: [f64; 3] = [2.5, 1.5, -0.5];
    let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
    assert!((r.mean_loss - (lse - 1.5)).abs() < 1e-12);
}

#[test]
fn fisher_matches_squared_finite_differences() {
    let mut rng = StdRng::seed_from_u64(7);
    let data = random_corpus(&mut rng, 16, 5, 3);
    let model = random_model(&mut rng, Layout::Mlp { hidden: 2 }, 5, 3);
    let f = estimate_fisher(&model, &data, 16, 0).unwrap();
    let mut want = vec![0.0; model.num_params()];
    for r in data.iter() {
        let x = features(r);
        let g = fd(&model.flat_params(), 1e-4, |p| {
            let mut m = model.clone();
            m.set_flat_params(p).unwrap();
            m.example_loss(&x, r.label.unwrap())
        });
        want.iter_mut().zip(g).for_each(|(w, g)| *w += g * g / 16.0);
    }
    let got: Vec<f64> = model
        .params()
        .iter()
        .flat_map(|(name, _)| f.get(name).unwrap().to_f32_vec())
        .map(f64::from)
        .collect();
    assert_rel(&got, &want, 1e-4);
    assert!(got.iter().all(|&v| v >= 0.0));
}

#[test]
fn fisher_vanishes_at_a_confident_optimum() {
    let mut m = TinyModel::zeros(Layout::Linear, 1, 2).unwrap();
    m.set_flat_params(&[0.0, 0.0, 0.0, 40.0]).unwrap();
    let data = corpus(vec![(vec![1.0], 1)]);
    let (_, grad) = m.example_gradient(&[1.0], 1);
    let norm = grad.flat_params().iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(norm < 1e-6);
    let f = estimate_fisher(&m, &data, 1, 0).unwrap();
    for (_, t) in f.iter() {
        assert!(t.to_f32_vec().iter().all(|&v| f64::from(v) < 1e-12));
    }
    assert!(estimate_fisher(&m, &data, 2, 0).is_err());
    assert!(estimate_fisher(&m, &data, 0, 0).is_err());
}

/// Share of cluster-j rows whose bias block j is the one-hot of the label.
fn bias_match_rate(train: &Corpus, spec: &BiasSpec, j: usize) -> (f64, usize) {
    let rows: Vec<_> = train.iter().filter(|r| r.cluster == Some(j)).collect();
    let start = spec.signal_dim + j * spec.n_classes;
    let hits = rows
        .iter()
        .filter(|r| r.features.as_ref().unwrap()[start + r.label.unwrap()] == 1.0)
        .count();
    (hits as f64 / rows.len() as f64, rows.len())
}

#[test]
fn planted_bias_frequency_is_within_binomial_bounds() {
    for q in [0.0, 0.5, 0.9] {
        let spec = BiasSpec {
            bias_strength: q,
            samples_per_cluster: 3000,
            val_samples: 10,
            ..BiasSpec::default()
        };
        let (train, _) = generate_biased_dataset(&spec).unwrap();
        let c = spec.n_classes as f64;
        let p = q + (1.0 - q) / c;
        // blocks of other clusters match the label at the uniform rate only
        let (mut other_hits, mut other_rows) = (0, 0);
        for j in 0..spec.clusters {
            let (rate, n) = bias_match_rate(&train, &spec, j);
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((rate - p).abs() <= 3.0 * sigma, "q={q} cluster {j}: {rate} vs {p}");
            let start = spec.signal_dim + ((j + 1) % spec.clusters) * spec.n_classes;
            for r in train.iter().filter(|r| r.cluster == Some(j)) {
                other_hits += usize::from(r.features.as_ref().unwrap()[start + r.label.unwrap()] == 1.0);
                other_rows += 1;
            }
        }
        let (base, rate) = (1.0 / c, other_hits as f64 / other_rows as f64);
        assert!(
            (rate - base).abs() <= 3.0 * (base * (1.0 - base) / other_rows as f64).sqrt(),
            "q={q}: {rate}"
        );
    }
}

#[test]
fn validation_blocks_carry_no_label() {
    let spec = BiasSpec {
        bias_strength: 1.0,
        samples_per_cluster: 10,
        val_samples: 8000,
        ..BiasSpec::default()
    };
    let (_, val) = generate_biased_dataset(&spec).unwrap();
    let base = 1.0 / spec.n_classes as f64;
    let n = (val.len() * spec.clusters) as f64;
    let hits: usize = val
        .iter()
        .map(|r| {
            let f = r.features.as_ref().unwrap();
            (0..spec.clusters)
                .filter(|j| f[spec.signal_dim + j * spec.n_classes + r.label.unwrap()] == 1.0)
                .count()
        })
        .sum();
    assert!((hits as f64 / n - base).abs() <= 3.0 * (base * (1.0 - base) / n).sqrt());
}

#[test]
fn pilot_trace_has_one_point_per_portion() {
    let spec = BiasSpec {
        samples_per_cluster: 100,
        val_samples: 40,
        ..BiasSpec::default()
    };
    let (train, val) = generate_biased_dataset(&spec).unwrap();
    let init = TinyModel::zeros(Layout::Linear, spec.feature_dim(), spec.n_classes).unwrap();
    let cfg = TrainConfig::default();
    let (_, trace) = pilot_study(&init, &train, &val, &cfg, &PilotConfig::default()).unwrap();
    assert_eq!(trace.len(), 10);
    assert_eq!(trace.checkpoints[0].label, "start");
    assert_eq!(trace.checkpoints[9].label, "portion 9");
    assert!(trace.checkpoints[9].mean_train_loss < trace.checkpoints[0].mean_train_loss);
    let bad = PilotConfig {
        trained: 11,
        ..PilotConfig::default()
    };
    assert!(pilot_study(&init, &train, &val, &cfg, &bad).is_err());
}

#[test]
fn model_checkpoint_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let m = TinyModel::init(Layout::Mlp { hidden: 5 }, 6, 4, 9).unwrap();
    let path = dir.path().join("m.ct");
    write_checkpoint(&m.to_checkpoint(), &path).unwrap();
    let ck = read_checkpoint(&path).unwrap();
    assert_eq!(ck.metadata["layout"], "mlp");
    assert_eq!(
        (
            ck.metadata["D"].as_str(),
            ck.metadata["H"].as_str(),
            ck.metadata["C"].as_str()
        ),
        ("6", "5", "4")
    );
    let back = TinyModel::from_checkpoint(&ck).unwrap();
    assert!(back.same_structure(&m));
    // parameters are stored as f32
    for (a, b) in back.flat_params().iter().zip(m.flat_params()) {
        assert_eq!(*a, f64::from(b as f32));
    }
}
